#include "ckaa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ckaa/error.hpp"
#include "eigen_view.hpp"

namespace ckaa {

using detail::make_result;
using detail::Node;
using detail::view;

namespace {

Shape mat_shape(std::size_t r, std::size_t c) { return {r, c}; }

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::Dimension, std::string(op) + ": shape mismatch");
}

// Gradient buffer of parent i, or nullptr when it does not need one.
double* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

const std::vector<double>& pdata(Node& self, std::size_t i) { return self.parents[i]->data; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, ErrorKind::Dimension,
          "matmul: inner dimensions " + std::to_string(k) + " and " + std::to_string(b.rows()) + " differ");
  std::vector<double> out(m * n);
  view(out, m, n).noalias() = view(a) * view(b);
  return make_result(mat_shape(m, n), std::move(out), {a, b}, [m, k, n](Node& self) {
    auto dc = view(self.grad, m, n);
    if (double* ga = pgrad(self, 0)) {
      detail::MatMap(ga, m, k).noalias() += dc * view(pdata(self, 1), k, n).transpose();
    }
    if (double* gb = pgrad(self, 1)) {
      detail::MatMap(gb, k, n).noalias() += view(pdata(self, 0), m, k).transpose() * dc;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  require(b.cols() == k, ErrorKind::Dimension, "matmul_nt: inner dimensions differ");
  std::vector<double> out(m * n);
  view(out, m, n).noalias() = view(a) * view(b).transpose();
  return make_result(mat_shape(m, n), std::move(out), {a, b}, [m, k, n](Node& self) {
    auto dc = view(self.grad, m, n);
    if (double* ga = pgrad(self, 0)) detail::MatMap(ga, m, k).noalias() += dc * view(pdata(self, 1), n, k);
    if (double* gb = pgrad(self, 1)) {
      detail::MatMap(gb, n, k).noalias() += dc.transpose() * view(pdata(self, 0), m, k);
    }
  });
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  view(out, n, m) = view(a).transpose();
  return make_result(mat_shape(n, m), std::move(out), {a}, [m, n](Node& self) {
    if (double* ga = pgrad(self, 0)) detail::MatMap(ga, m, n) += view(self.grad, n, m).transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = pgrad(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& da = pdata(self, 0);
    const auto& db = pdata(self, 1);
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * db[i];
    }
    if (double* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * da[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  const std::size_t m = a.rows(), n = a.cols();
  require(v.numel() == n, ErrorKind::Dimension, "add_rowvec: vector length differs from column count");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + v[j];
  return make_result(a.shape(), std::move(out), {a, v}, [m, n](Node& self) {
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor add_tiled(const Tensor& a, const Tensor& t) {
  const std::size_t n = a.cols(), tr = t.rows();
  require(t.cols() == n && a.rows() % tr == 0, ErrorKind::Dimension, "add_tiled: incompatible shapes");
  const std::size_t block = tr * n;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + t[i % block];
  return make_result(a.shape(), std::move(out), {a, t}, [block](Node& self) {
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = pgrad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % block] += self.grad[i];
    }
  });
}

Tensor scale_rows(const Tensor& a, std::span<const double> w) {
  const std::size_t m = a.rows(), n = a.cols();
  require(w.size() == m, ErrorKind::Dimension, "scale_rows: weight count differs from row count");
  std::vector<double> weights(w.begin(), w.end());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] * weights[i];
  return make_result(a.shape(), std::move(out), {a}, [n, weights = std::move(weights)](Node& self) {
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * weights[i / n];
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    const auto& x = pdata(self, 0);
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (x[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x)));
  }
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    const auto& xs = pdata(self, 0);
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double x = xs[i];
        const double t = std::tanh(c * (x + k * x * x * x));
        const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
        g[i] += self.grad[i] * d;
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  require(n >= 2, ErrorKind::Dimension, "layernorm: needs at least two features");
  require(gamma.numel() == n && beta.numel() == n, ErrorKind::Dimension, "layernorm: affine length mismatch");
  std::vector<double> out(x.numel()), xhat(x.numel()), rstd(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += r[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(n);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (r[j] - mu) * rstd[i];
      out[i * n + j] = gamma[j] * xhat[i * n + j] + beta[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       const auto& dy = self.grad;
                       const auto& gm = pdata(self, 1);
                       if (double* gg = pgrad(self, 1)) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gg[j] += dy[i * n + j] * xhat[i * n + j];
                       }
                       if (double* gb = pgrad(self, 2)) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += dy[i * n + j];
                       }
                       if (double* gx = pgrad(self, 0)) {
                         const double inv_n = 1.0 / static_cast<double>(n);
                         for (std::size_t i = 0; i < m; ++i) {
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double dxh = dy[i * n + j] * gm[j];
                             s1 += dxh;
                             s2 += dxh * xhat[i * n + j];
                           }
                           for (std::size_t j = 0; j < n; ++j) {
                             const double dxh = dy[i * n + j] * gm[j];
                             gx[i * n + j] += rstd[i] * (dxh - s1 * inv_n - xhat[i * n + j] * s2 * inv_n);
                           }
                         }
                       }
                     });
}

Tensor softmax(const Tensor& a, double temperature) {
  require(a.numel() >= 1, ErrorKind::Dimension, "softmax: empty input");
  require(temperature > 0.0, ErrorKind::Config, "softmax: temperature must be positive");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = a.data().data() + i * n;
    const double mx = *std::max_element(r, r + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp((r[j] - mx) / temperature);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return make_result(a.shape(), out, {a}, [m, n, temperature, y = out](Node& self) {
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * self.grad[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          g[i * n + j] += y[i * n + j] * (self.grad[i * n + j] - dot) / temperature;
      }
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result(Shape{}, {s}, {a}, [](Node& self) {
    if (double* g = pgrad(self, 0)) {
      const std::size_t n = self.parents[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor square_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return make_result(Shape{}, {s}, {a}, [](Node& self) {
    const auto& x = pdata(self, 0);
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += 2.0 * x[i] * self.grad[0];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx) {
  const std::size_t n = a.cols(), m = a.rows();
  require(!idx.empty(), ErrorKind::Dimension, "gather_rows: no rows requested");
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  std::vector<double> out(rows.size() * n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < m, ErrorKind::Dimension, "gather_rows: row index out of range");
    std::copy_n(a.data().data() + rows[r] * n, n, out.data() + r * n);
  }
  Shape shape = mat_shape(rows.size(), n);
  return make_result(std::move(shape), std::move(out), {a}, [n, rows = std::move(rows)](Node& self) {
    if (double* g = pgrad(self, 0)) {
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) g[rows[r] * n + j] += self.grad[r * n + j];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorKind::Dimension, "concat_rows: nothing to concatenate");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require(p.cols() == n, ErrorKind::Dimension, "concat_rows: column counts differ");
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    m += p.rows();
  }
  return make_result(mat_shape(m, n), std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (double* g = pgrad(self, p)) {
        const std::size_t len = self.parents[p]->data.size();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offsets[p] + i];
      }
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t m = a.rows(), n = a.cols();
  require(begin < end && end <= n, ErrorKind::Dimension, "slice_cols: bad column range");
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a[i * n + begin + j];
  return make_result(mat_shape(m, w), std::move(out), {a}, [m, n, w, begin](Node& self) {
    if (double* g = pgrad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
    }
  });
}

Tensor strided_rows(const Tensor& a, std::size_t block, std::size_t offset) {
  require(block > 0 && offset < block && a.rows() % block == 0, ErrorKind::Dimension, "strided_rows: bad layout");
  std::vector<std::size_t> idx(a.rows() / block);
  for (std::size_t b = 0; b < idx.size(); ++b) idx[b] = b * block + offset;
  return gather_rows(a, idx);
}

Tensor prepend_row(const Tensor& a, const Tensor& prefix, std::size_t block) {
  const std::size_t n = a.cols();
  require(prefix.numel() == n, ErrorKind::Dimension, "prepend_row: prefix width mismatch");
  require(block > 0 && a.rows() % block == 0, ErrorKind::Dimension, "prepend_row: bad layout");
  const std::size_t nb = a.rows() / block, ob = block + 1;
  std::vector<double> out(nb * ob * n);
  for (std::size_t b = 0; b < nb; ++b) {
    std::copy_n(prefix.data().data(), n, out.data() + b * ob * n);
    std::copy_n(a.data().data() + b * block * n, block * n, out.data() + (b * ob + 1) * n);
  }
  return make_result(mat_shape(nb * ob, n), std::move(out), {a, prefix}, [nb, ob, block, n](Node& self) {
    double* ga = pgrad(self, 0);
    double* gp = pgrad(self, 1);
    for (std::size_t b = 0; b < nb; ++b) {
      if (gp) {
        for (std::size_t j = 0; j < n; ++j) gp[j] += self.grad[b * ob * n + j];
      }
      if (ga) {
        for (std::size_t i = 0; i < block * n; ++i) ga[b * block * n + i] += self.grad[(b * ob + 1) * n + i];
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t m = logits.rows(), k = logits.cols();
  require(labels.size() == m, ErrorKind::Dimension, "cross_entropy: label count differs from batch size");
  std::vector<double> prob(m * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < k, ErrorKind::Dimension,
            "cross_entropy: label " + std::to_string(labels[i]) + " outside logit range");
    const double* r = logits.data().data() + i * k;
    const double mx = *std::max_element(r, r + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      prob[i * k + j] = std::exp(r[j] - mx);
      z += prob[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) prob[i * k + j] /= z;
    loss += (mx + std::log(z)) - r[labels[i]];
  }
  loss /= static_cast<double>(m);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result(Shape{}, {loss}, {logits}, [m, k, prob = std::move(prob), lab = std::move(lab)](Node& self) {
    if (double* g = pgrad(self, 0)) {
      const double s = self.grad[0] / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) g[i * k + j] += s * prob[i * k + j];
        g[i * k + static_cast<std::size_t>(lab[i])] -= s;
      }
    }
  });
}

Tensor prompt_attention(const Tensor& q, const Tensor& kx, const Tensor& vx, const Tensor* kp, const Tensor* vp,
                        std::size_t batch, std::size_t heads, std::vector<double>* probs_out) {
  const std::size_t d = q.cols();
  require(batch > 0 && q.rows() % batch == 0, ErrorKind::Dimension, "prompt_attention: rows not divisible by batch");
  require(heads > 0 && d % heads == 0, ErrorKind::Dimension, "prompt_attention: dim not divisible by heads");
  require(kx.shape() == q.shape() && vx.shape() == q.shape(), ErrorKind::Dimension,
          "prompt_attention: q/k/v shapes differ");
  require((kp == nullptr) == (vp == nullptr), ErrorKind::Dimension, "prompt_attention: prompt keys without values");
  const std::size_t np = kp ? kp->rows() : 0;
  if (kp) {
    require(kp->cols() == d && vp->cols() == d && vp->rows() == np, ErrorKind::Dimension,
            "prompt_attention: prompt key/value shape mismatch");
  }
  const std::size_t t = q.rows() / batch, dh = d / heads, nk = t + np;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> probs(batch * heads * t * nk);
  std::vector<double> out(q.numel(), 0.0);
  const double* Q = q.data().data();
  const double* KX = kx.data().data();
  const double* VX = vx.data().data();
  const double* KP = kp ? kp->data().data() : nullptr;
  const double* VP = vp ? vp->data().data() : nullptr;

  auto key_row = [&](const double* kxs, const double* kps, std::size_t b, std::size_t j) {
    return j < t ? kxs + (b * t + j) * d : kps + (j - t) * d;
  };

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < t; ++i) {
        double* p = probs.data() + ((b * heads + h) * t + i) * nk;
        const double* qi = Q + (b * t + i) * d + c0;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < nk; ++j) {
          const double* kj = key_row(KX, KP, b, j) + c0;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[j] = s * scl;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        double* oi = out.data() + (b * t + i) * d + c0;
        for (std::size_t j = 0; j < nk; ++j) {
          p[j] /= z;
          const double* vj = key_row(VX, VP, b, j) + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  if (probs_out) *probs_out = probs;

  std::vector<Tensor> parents{q, kx, vx};
  if (kp) {
    parents.push_back(*kp);
    parents.push_back(*vp);
  }
  return make_result(q.shape(), std::move(out), std::move(parents),
                     [batch, heads, t, np, d, dh, nk, scl, probs = std::move(probs)](Node& self) {
                       const double* Q = self.parents[0]->data.data();
                       const double* KX = self.parents[1]->data.data();
                       const double* VX = self.parents[2]->data.data();
                       const double* KP = np ? self.parents[3]->data.data() : nullptr;
                       const double* VP = np ? self.parents[4]->data.data() : nullptr;
                       double* gq = pgrad(self, 0);
                       double* gkx = pgrad(self, 1);
                       double* gvx = pgrad(self, 2);
                       double* gkp = np ? pgrad(self, 3) : nullptr;
                       double* gvp = np ? pgrad(self, 4) : nullptr;
                       std::vector<double> ds(nk);
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t h = 0; h < heads; ++h) {
                           const std::size_t c0 = h * dh;
                           for (std::size_t i = 0; i < t; ++i) {
                             const double* p = probs.data() + ((b * heads + h) * t + i) * nk;
                             const double* go = self.grad.data() + (b * t + i) * d + c0;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < nk; ++j) {
                               const double* vj = j < t ? VX + (b * t + j) * d + c0 : VP + (j - t) * d + c0;
                               double dp = 0.0;
                               for (std::size_t c = 0; c < dh; ++c) dp += go[c] * vj[c];
                               ds[j] = dp;
                               dot += p[j] * dp;
                               double* gv = j < t ? (gvx ? gvx + (b * t + j) * d + c0 : nullptr)
                                                  : (gvp ? gvp + (j - t) * d + c0 : nullptr);
                               if (gv) {
                                 for (std::size_t c = 0; c < dh; ++c) gv[c] += p[j] * go[c];
                               }
                             }
                             const double* qi = Q + (b * t + i) * d + c0;
                             double* gqi = gq ? gq + (b * t + i) * d + c0 : nullptr;
                             for (std::size_t j = 0; j < nk; ++j) {
                               const double dsj = p[j] * (ds[j] - dot) * scl;
                               const double* kj = j < t ? KX + (b * t + j) * d + c0 : KP + (j - t) * d + c0;
                               if (gqi) {
                                 for (std::size_t c = 0; c < dh; ++c) gqi[c] += dsj * kj[c];
                               }
                               double* gk = j < t ? (gkx ? gkx + (b * t + j) * d + c0 : nullptr)
                                                  : (gkp ? gkp + (j - t) * d + c0 : nullptr);
                               if (gk) {
                                 for (std::size_t c = 0; c < dh; ++c) gk[c] += dsj * qi[c];
                               }
                             }
                           }
                         }
                       }
                     });
}

}  // namespace ckaa

namespace ckaa {

std::vector<double> softmax_values(std::span<const double> v, double temperature) {
  require(!v.empty(), ErrorKind::Dimension, "softmax: empty vector");
  require(temperature > 0.0, ErrorKind::Config, "softmax: temperature must be positive");
  double mx = -INFINITY;
  for (double x : v) {
    require(!std::isnan(x) && x != INFINITY, ErrorKind::Numeric, "softmax: NaN or +inf input");
    mx = std::max(mx, x);
  }
  require(std::isfinite(mx), ErrorKind::Numeric, "softmax: no finite entry");
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::isfinite(v[i]) ? std::exp((v[i] - mx) / temperature) : 0.0;
    z += out[i];
  }
  for (double& o : out) o /= z;
  return out;
}

}  // namespace ckaa
