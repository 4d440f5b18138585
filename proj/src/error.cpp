#include "ckaa/error.hpp"

namespace ckaa {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Routing: return "routing";
    case ErrorKind::Aggregation: return "aggregation";
    case ErrorKind::Modeling: return "modeling";
    case ErrorKind::DegenerateBatch: return "degenerate-batch";
    case ErrorKind::Similarity: return "similarity";
    case ErrorKind::Config: return "config";
    case ErrorKind::State: return "state";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

}  // namespace ckaa
