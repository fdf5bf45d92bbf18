#include "preroute/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "preroute/error.hpp"

namespace preroute::ad {
namespace {

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

// Returns numel(b) when b equals a or a trailing suffix of a.
std::size_t broadcast_inner(const char* op, const Shape& a, const Shape& b) {
  if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) shape_mismatch(op, a, b);
  return numel(b);
}

std::size_t last_dim(const char* op, const Tensor& a) {
  if (a.rank() == 0 || a.shape().back() == 0) {
    throw ShapeError(std::string(op) + ": needs a non-empty last dimension, got " + to_string(a.shape()));
  }
  return a.shape().back();
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(a.shape(), std::move(y), {a}, [df](Node& self) {
    Node& in = parent(self, 0);
    std::vector<double> g(self.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * df(in.data[i], self.data[i]);
    in.accumulate_grad(g);
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t inner = broadcast_inner("add", a.shape(), b.shape());
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % inner];
  return make_result(a.shape(), std::move(out), {a, b}, [inner](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) pa.accumulate_grad(self.grad);
    if (pb.requires_grad) {
      std::vector<double> g(inner, 0.0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
      pb.accumulate_grad(g);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const std::size_t inner = broadcast_inner("sub", a.shape(), b.shape());
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i % inner];
  return make_result(a.shape(), std::move(out), {a, b}, [inner](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) pa.accumulate_grad(self.grad);
    if (pb.requires_grad) {
      std::vector<double> g(inner, 0.0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] -= self.grad[i];
      pb.accumulate_grad(g);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const std::size_t inner = broadcast_inner("mul", a.shape(), b.shape());
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i % inner];
  return make_result(a.shape(), std::move(out), {a, b}, [inner](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      std::vector<double> g(self.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * pb.data[i % inner];
      pa.accumulate_grad(g);
    }
    if (pb.requires_grad) {
      std::vector<double> g(inner, 0.0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i] * pa.data[i];
      pb.accumulate_grad(g);
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s + x * s * (1.0 - s);
      });
}

Tensor gelu(const Tensor& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(c * (x + k * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t n = a.shape().back();
  const std::size_t bn = b.shape()[b.rank() - 2];
  const std::size_t p = b.shape().back();
  if (n != bn) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t batch = numel(a.shape()) / std::max<std::size_t>(m * n, 1);
  bool shared = b.rank() == 2;
  if (!shared) {
    if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      shape_mismatch("matmul", a.shape(), b.shape());
    }
  }
  Shape out_shape = a.shape();
  out_shape.back() = p;
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(batch * m * p, 0.0);
  for (std::size_t bt = 0; bt < batch; ++bt) {
    const double* A = x.data() + bt * m * n;
    const double* B = y.data() + (shared ? 0 : bt * n * p);
    double* C = out.data() + bt * m * p;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t l = 0; l < n; ++l) {
        const double av = A[i * n + l];
        const double* brow = B + l * p;
        double* crow = C + i * p;
        for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
      }
    }
  }
  return make_result(std::move(out_shape), std::move(out), {a, b}, [=](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const double* G = self.grad.data();
    if (pa.requires_grad) {
      std::vector<double> ga(batch * m * n, 0.0);
      std::vector<double> bt_buf(n * p);
      for (std::size_t bt = 0; bt < batch; ++bt) {
        const double* B = pb.data.data() + (shared ? 0 : bt * n * p);
        const double* Gb = G + bt * m * p;
        double* GA = ga.data() + bt * m * n;
        for (std::size_t l = 0; l < n; ++l)
          for (std::size_t j = 0; j < p; ++j) bt_buf[j * n + l] = B[l * p + j];
        for (std::size_t i = 0; i < m; ++i) {
          double* garow = GA + i * n;
          for (std::size_t j = 0; j < p; ++j) {
            const double g = Gb[i * p + j];
            const double* btrow = bt_buf.data() + j * n;
            for (std::size_t l = 0; l < n; ++l) garow[l] += g * btrow[l];
          }
        }
      }
      pa.accumulate_grad(ga);
    }
    if (pb.requires_grad) {
      std::vector<double> gb(shared ? n * p : batch * n * p, 0.0);
      for (std::size_t bt = 0; bt < batch; ++bt) {
        const double* A = pa.data.data() + bt * m * n;
        const double* Gb = G + bt * m * p;
        double* GB = gb.data() + (shared ? 0 : bt * n * p);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t l = 0; l < n; ++l) {
            const double av = A[i * n + l];
            const double* grow = Gb + i * p;
            double* gbrow = GB + l * p;
            for (std::size_t j = 0; j < p; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
      pb.accumulate_grad(gb);
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + to_string(a.shape()));
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t n = a.shape().back();
  const std::size_t batch = numel(a.shape()) / std::max<std::size_t>(m * n, 1);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape.back());
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = x[b * m * n + i * n + j];
  return make_result(std::move(out_shape), std::move(out), {a}, [=](Node& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[b * m * n + i * n + j] = self.grad[b * m * n + j * m + i];
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) shape_mismatch("reshape", a.shape(), shape);
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a},
                     [](Node& self) { parent(self, 0).accumulate_grad(self.grad); });
}

Tensor softmax(const Tensor& a) {
  const std::size_t d = last_dim("softmax", a);
  const std::size_t rows = a.size() / d;
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double* yr = y.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) yr[j] /= s;
  }
  return make_result(a.shape(), std::move(y), {a}, [d, rows](Node& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = self.data.data() + r * d;
      const double* gr = self.grad.data() + r * d;
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] = yr[j] * (gr[j] - dot);
    }
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor log_softmax(const Tensor& a) {
  const std::size_t d = last_dim("log_softmax", a);
  const std::size_t rows = a.size() / d;
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += std::exp(xr[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xr[j] - lse;
  }
  return make_result(a.shape(), std::move(y), {a}, [d, rows](Node& self) {
    std::vector<double> g(self.grad.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = self.data.data() + r * d;
      const double* gr = self.grad.data() + r * d;
      const double gs = std::accumulate(gr, gr + d, 0.0);
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] = gr[j] - std::exp(yr[j]) * gs;
    }
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor logsumexp(const Tensor& a) {
  const std::size_t d = last_dim("logsumexp", a);
  const std::size_t rows = a.size() / d;
  const auto x = a.data();
  std::vector<double> y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += std::exp(xr[j] - mx);
    y[r] = mx + std::log(s);
  }
  return make_result(drop_last(a.shape()), std::move(y), {a}, [d, rows](Node& self) {
    Node& in = parent(self, 0);
    std::vector<double> g(rows * d);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] = self.grad[r] * std::exp(in.data[r * d + j] - self.data[r]);
    in.accumulate_grad(g);
  });
}

Tensor sum_last(const Tensor& a) {
  const std::size_t d = last_dim("sum_last", a);
  const std::size_t rows = a.size() / d;
  const auto x = a.data();
  std::vector<double> y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) y[r] += x[r * d + j];
  return make_result(drop_last(a.shape()), std::move(y), {a}, [d, rows](Node& self) {
    std::vector<double> g(rows * d);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] = self.grad[r];
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps) {
  const std::size_t d = last_dim("rms_norm", x);
  if (weight.shape() != Shape{d}) shape_mismatch("rms_norm", x.shape(), weight.shape());
  const std::size_t rows = x.size() / d;
  const auto xv = x.data();
  const auto wv = weight.data();
  std::vector<double> inv(rows);
  std::vector<double> y(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[r * d + j] * xv[r * d + j];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = xv[r * d + j] * inv[r] * wv[j];
  }
  return make_result(x.shape(), std::move(y), {x, weight}, [d, rows, inv = std::move(inv)](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    if (px.requires_grad) {
      std::vector<double> g(rows * d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = px.data.data() + r * d;
        const double* gr = self.grad.data() + r * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * pw.data[j] * xr[j];
        const double c = inv[r] * inv[r] * inv[r] * dot / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] = inv[r] * pw.data[j] * gr[j] - xr[j] * c;
      }
      px.accumulate_grad(g);
    }
    if (pw.requires_grad) {
      std::vector<double> g(d, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j] * px.data[r * d + j] * inv[r];
      pw.accumulate_grad(g);
    }
  });
}

Tensor sum(const Tensor& a) {
  const auto x = a.data();
  const double s = std::accumulate(x.begin(), x.end(), 0.0);
  const std::size_t n = x.size();
  return make_result({}, {s}, {a}, [n](Node& self) {
    parent(self, 0).accumulate_grad(std::vector<double>(n, self.grad[0]));
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor mean_rows(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) == 0) throw ShapeError("mean_rows: needs a non-empty [n, d] tensor, got " + to_string(a.shape()));
  const std::size_t n = a.dim(0);
  const std::size_t d = a.dim(1);
  const auto x = a.data();
  std::vector<double> y(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) y[j] += x[r * d + j];
  for (auto& v : y) v /= static_cast<double>(n);
  return make_result({d}, std::move(y), {a}, [n, d](Node& self) {
    std::vector<double> g(n * d);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) g[r * d + j] = self.grad[j] / static_cast<double>(n);
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor embedding(const Tensor& table, const std::vector<std::uint32_t>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V, d], got " + to_string(table.shape()));
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  const auto w = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw ShapeError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    std::copy_n(w.data() + ids[i] * d, d, out.data() + i * d);
  }
  return make_result({ids.size(), d}, std::move(out), {table}, [ids, vocab, d](Node& self) {
    std::vector<double> g(vocab * d, 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += self.grad[i * d + j];
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() != 2) throw ShapeError("gather_rows: needs [n, d], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t d = x.dim(1);
  const auto v = x.data();
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range " + std::to_string(n));
    std::copy_n(v.data() + rows[i] * d, d, out.data() + i * d);
  }
  return make_result({rows.size(), d}, std::move(out), {x}, [rows, n, d](Node& self) {
    std::vector<double> g(n * d, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[rows[i] * d + j] += self.grad[i * d + j];
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& rows, std::size_t n) {
  if (x.rank() != 2 || x.dim(0) != rows.size()) {
    throw ShapeError("scatter_rows: source " + to_string(x.shape()) + " does not match " + std::to_string(rows.size()) + " rows");
  }
  const std::size_t d = x.dim(1);
  const auto v = x.data();
  std::vector<double> out(n * d, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("scatter_rows: row " + std::to_string(rows[i]) + " out of range " + std::to_string(n));
    for (std::size_t j = 0; j < d; ++j) out[rows[i] * d + j] += v[i * d + j];
  }
  return make_result({n, d}, std::move(out), {x}, [rows, d](Node& self) {
    std::vector<double> g(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] = self.grad[rows[i] * d + j];
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor take(const Tensor& a, const std::vector<std::size_t>& positions) {
  const auto v = a.data();
  std::vector<double> out(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= v.size()) throw ShapeError("take: position " + std::to_string(positions[i]) + " out of range");
    out[i] = v[positions[i]];
  }
  const std::size_t n = v.size();
  return make_result({positions.size()}, std::move(out), {a}, [positions, n](Node& self) {
    std::vector<double> g(n, 0.0);
    for (std::size_t i = 0; i < positions.size(); ++i) g[positions[i]] += self.grad[i];
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.shape() != Shape{x.dim(0)}) shape_mismatch("scale_rows", x.shape(), w.shape());
  const std::size_t n = x.dim(0);
  const std::size_t d = x.dim(1);
  const auto xv = x.data();
  const auto wv = w.data();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * wv[i];
  return make_result({n, d}, std::move(out), {x, w}, [n, d](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    if (px.requires_grad) {
      std::vector<double> g(n * d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] = self.grad[i * d + j] * pw.data[i];
      px.accumulate_grad(g);
    }
    if (pw.requires_grad) {
      std::vector<double> g(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i] += self.grad[i * d + j] * px.data[i * d + j];
      pw.accumulate_grad(g);
    }
  });
}

Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length) {
  const std::size_t d = last_dim("slice_last", a);
  if (start + length > d) throw ShapeError("slice_last: [" + std::to_string(start) + ", +" + std::to_string(length) + ") exceeds " + to_string(a.shape()));
  const std::size_t rows = a.size() / d;
  Shape out_shape = a.shape();
  out_shape.back() = length;
  const auto x = a.data();
  std::vector<double> out(rows * length);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * d + start, length, out.data() + r * length);
  return make_result(std::move(out_shape), std::move(out), {a}, [=](Node& self) {
    std::vector<double> g(rows * d, 0.0);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(self.grad.data() + r * length, length, g.data() + r * d + start);
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const Shape lead = drop_last(parts.front().shape());
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (drop_last(p.shape()) != lead) shape_mismatch("concat_last", parts.front().shape(), p.shape());
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  return make_result(std::move(out_shape), std::move(out), parts, [rows, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      Node& p = parent(self, k);
      if (p.requires_grad) {
        std::vector<double> g(rows * widths[k]);
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(self.grad.data() + r * total + off, widths[k], g.data() + r * widths[k]);
        p.accumulate_grad(g);
      }
      off += widths[k];
    }
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::uint32_t>& targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size() || targets.empty()) {
    throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " vs " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = logits.dim(0);
  const std::size_t v = logits.dim(1);
  const auto x = logits.data();
  std::vector<double> probs(n * v);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= v) throw ShapeError("cross_entropy: target " + std::to_string(targets[r]) + " outside " + std::to_string(v) + " classes");
    const double* xr = x.data() + r * v;
    const double mx = *std::max_element(xr, xr + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += (probs[r * v + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= s;
    loss += mx + std::log(s) - xr[targets[r]];
  }
  loss /= static_cast<double>(n);
  return make_result({}, {loss}, {logits}, [n, v, targets, probs = std::move(probs)](Node& self) {
    std::vector<double> g(probs);
    const double c = self.grad[0] / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) g[r * v + targets[r]] -= 1.0;
    for (auto& e : g) e *= c;
    parent(self, 0).accumulate_grad(g);
  });
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) shape_mismatch("kl_divergence", p.shape(), q.shape());
  const std::size_t d = last_dim("kl_divergence", p);
  const std::size_t rows = p.size() / d;
  const auto pv = p.data();
  const auto qv = q.data();
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] > 0.0) total += pv[i] * std::log(pv[i] / qv[i]);
  }
  total /= static_cast<double>(rows);
  return make_result({}, {total}, {p, q}, [rows](Node& self) {
    Node& pp = parent(self, 0);
    Node& pq = parent(self, 1);
    const double c = self.grad[0] / static_cast<double>(rows);
    if (pp.requires_grad) {
      // Not differentiable at p = 0; that subgradient is taken as 0.
      std::vector<double> g(pp.data.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (pp.data[i] > 0.0) g[i] = c * (std::log(pp.data[i] / pq.data[i]) + 1.0);
      pp.accumulate_grad(g);
    }
    if (pq.requires_grad) {
      std::vector<double> g(pq.data.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (pp.data[i] > 0.0) g[i] = -c * pp.data[i] / pq.data[i];
      pq.accumulate_grad(g);
    }
  });
}

Tensor kl_divergence_logits(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.shape() != student_logits.shape()) {
    shape_mismatch("kl_divergence_logits", teacher_logits.shape(), student_logits.shape());
  }
  const std::size_t d = last_dim("kl_divergence_logits", teacher_logits);
  const double rows = static_cast<double>(teacher_logits.size() / d);
  const Tensor log_p = log_softmax(teacher_logits);
  const Tensor p = softmax(teacher_logits);
  const Tensor log_q = log_softmax(student_logits);
  return scale(sum(mul(p, sub(log_p, log_q))), 1.0 / rows);
}

TopK topk_select(const Tensor& scores, std::size_t k) {
  const std::size_t d = last_dim("topk_select", scores);
  if (k == 0 || k > d) throw ShapeError("topk_select: k=" + std::to_string(k) + " invalid for last dim " + std::to_string(d));
  TopK out;
  out.rows = scores.size() / d;
  out.k = k;
  out.indices.resize(out.rows * k);
  std::vector<double> mask(scores.size(), 0.0);
  const auto x = scores.data();
  std::vector<std::uint32_t> order(d);
  for (std::size_t r = 0; r < out.rows; ++r) {
    const double* xr = x.data() + r * d;
    std::iota(order.begin(), order.end(), 0U);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [xr](std::uint32_t a, std::uint32_t b) { return xr[a] > xr[b] || (xr[a] == xr[b] && a < b); });
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t j = 0; j < k; ++j) {
      out.indices[r * k + j] = order[j];
      mask[r * d + order[j]] = 1.0;
    }
  }
  out.mask = Tensor(scores.shape(), std::move(mask), false);
  return out;
}

}  // namespace preroute::ad
