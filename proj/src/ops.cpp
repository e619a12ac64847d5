#include "dasvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>

#include "dasvit/errors.hpp"

namespace dasvit::ops {

namespace {

using detail::Node;

void check_finite(const char* op, const std::vector<double>& data) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
  }
}

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, detail::BackwardFn fn) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& t : inputs) node->parents.push_back(t.node());
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

void push_grad(Node& self, std::size_t i, std::span<const double> g) {
  if (wants(self, i)) self.parents[i]->accumulate(g);
}

std::string shapes2(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " and " + shape_str(b.shape());
}

std::size_t norm_axis(const char* op, int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

template <typename F>
void parallel_for(std::size_t n, std::size_t work_per_item, F&& body) {
  const auto threads = static_cast<std::size_t>(num_threads());
  if (threads <= 1 || n < 2 || n * work_per_item < 32768) {
    body(std::size_t{0}, n);
    return;
  }
  const std::size_t parts = std::min(threads, n);
  const std::size_t chunk = (n + parts - 1) / parts;
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < parts; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo < hi) pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  body(0, std::min(n, chunk));
  for (auto& th : pool) th.join();
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
  parallel_for(m, k * n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      double* c = C + i * n;
      const double* a = A + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = a[p];
        const double* b = B + p * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  });
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
  parallel_for(m, k * n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const double* a = A + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* b = B + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
        C[i * n + j] += acc;
      }
    }
  });
}

// C[m,n] += A[k,m]^T * B[k,n]
void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
  parallel_for(m, k * n, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      for (std::size_t i = lo; i < hi; ++i) {
        const double av = A[p * m + i];
        double* c = C + i * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  });
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
  const std::size_t r = out.size();
  const std::size_t off = r - src.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t d = r; d-- > off;) {
    const std::size_t sd = src[d - off];
    stride[d] = sd == 1 ? 0 : s;
    s *= sd;
  }
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> idx(total);
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < total; ++i) {
    idx[i] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      cur += stride[d];
      if (counter[d] < out[d]) break;
      cur -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast shapes " + shape_str(a) + " and " +
                       shape_str(b));
    }
    out[i] = std::max(da, db);
    if (da == 0 || db == 0) out[i] = 0;
  }
  return out;
}

BroadcastPlan plan(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  p.out = broadcast_shape(op, a, b);
  p.ia = broadcast_index(a, p.out);
  p.ib = broadcast_index(b, p.out);
  return p;
}

enum class Binary { Add, Sub, Mul };

Tensor binary(const char* op, Binary kind, const Tensor& a, const Tensor& b) {
  const auto& av = a.data();
  const auto& bv = b.data();
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case Binary::Add: return x + y;
      case Binary::Sub: return x - y;
      case Binary::Mul: return x * y;
    }
    return 0.0;
  };
  if (a.shape() == b.shape()) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
    return make_result(op, a.shape(), std::move(out), {a, b}, [kind](Node& self) {
      const auto& g = self.grad;
      if (kind == Binary::Mul) {
        const auto& x = self.parents[0]->data;
        const auto& y = self.parents[1]->data;
        std::vector<double> t(g.size());
        if (wants(self, 0)) {
          for (std::size_t i = 0; i < g.size(); ++i) t[i] = g[i] * y[i];
          push_grad(self, 0, t);
        }
        if (wants(self, 1)) {
          for (std::size_t i = 0; i < g.size(); ++i) t[i] = g[i] * x[i];
          push_grad(self, 1, t);
        }
        return;
      }
      push_grad(self, 0, g);
      if (kind == Binary::Sub && wants(self, 1)) {
        std::vector<double> t(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) t[i] = -g[i];
        push_grad(self, 1, t);
      } else {
        push_grad(self, 1, g);
      }
    });
  }
  auto p = std::make_shared<BroadcastPlan>(plan(op, a.shape(), b.shape()));
  std::vector<double> out(p->ia.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[p->ia[i]], bv[p->ib[i]]);
  return make_result(op, p->out, std::move(out), {a, b}, [kind, p](Node& self) {
    const auto& g = self.grad;
    const auto& x = self.parents[0]->data;
    const auto& y = self.parents[1]->data;
    if (wants(self, 0)) {
      std::vector<double> ga(x.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[p->ia[i]] += kind == Binary::Mul ? g[i] * y[p->ib[i]] : g[i];
      }
      push_grad(self, 0, ga);
    }
    if (wants(self, 1)) {
      std::vector<double> gb(y.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double v = g[i];
        if (kind == Binary::Mul) v *= x[p->ia[i]];
        if (kind == Binary::Sub) v = -v;
        gb[p->ib[i]] += v;
      }
      push_grad(self, 1, gb);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", Binary::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", Binary::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", Binary::Mul, a, b); }

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result("scale", x.shape(), std::move(out), {x}, [factor](Node& self) {
    std::vector<double> g(self.grad);
    for (auto& v : g) v *= factor;
    push_grad(self, 0, g);
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += value;
  return make_result("add_scalar", x.shape(), std::move(out), {x},
                     [](Node& self) { push_grad(self, 0, self.grad); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shapes2(a, b));
  }
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  if (b.dim(-2) != k) throw ShapeError("matmul: inner dimensions differ for " + shapes2(a, b));
  const std::size_t n = b.dim(-1);

  if (b.rank() == 2) {
    const std::size_t rows = a.numel() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    std::vector<double> out(rows * n, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), rows, k, n);
    return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                       [rows, k, n](Node& self) {
                         const auto& g = self.grad;
                         const auto& A = self.parents[0]->data;
                         const auto& B = self.parents[1]->data;
                         if (wants(self, 0)) {
                           std::vector<double> ga(rows * k, 0.0);
                           gemm_nt(g.data(), B.data(), ga.data(), rows, n, k);
                           push_grad(self, 0, ga);
                         }
                         if (wants(self, 1)) {
                           std::vector<double> gb(k * n, 0.0);
                           gemm_tn(A.data(), g.data(), gb.data(), k, rows, n);
                           push_grad(self, 1, gb);
                         }
                       });
  }

  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw ShapeError("matmul: batch dimensions differ for " + shapes2(a, b));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_nn(a.data().data() + t * m * k, b.data().data() + t * k * n, out.data() + t * m * n, m,
            k, n);
  }
  return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                     [batch, m, k, n](Node& self) {
                       const auto& g = self.grad;
                       const auto& A = self.parents[0]->data;
                       const auto& B = self.parents[1]->data;
                       if (wants(self, 0)) {
                         std::vector<double> ga(batch * m * k, 0.0);
                         for (std::size_t t = 0; t < batch; ++t) {
                           gemm_nt(g.data() + t * m * n, B.data() + t * k * n,
                                   ga.data() + t * m * k, m, n, k);
                         }
                         push_grad(self, 0, ga);
                       }
                       if (wants(self, 1)) {
                         std::vector<double> gb(batch * k * n, 0.0);
                         for (std::size_t t = 0; t < batch; ++t) {
                           gemm_tn(A.data() + t * m * k, g.data() + t * m * n,
                                   gb.data() + t * k * n, k, m, n);
                         }
                         push_grad(self, 1, gb);
                       }
                     });
}

namespace {

// Output-to-input flat index map; forward copies through it and backward
// scatters back. Covers transpose, slicing and gathers.
Tensor remap(const char* op, const Tensor& x, Shape out_shape, std::vector<std::size_t> src) {
  std::vector<double> out(src.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  auto map = std::make_shared<std::vector<std::size_t>>(std::move(src));
  return make_result(op, std::move(out_shape), std::move(out), {x}, [map](Node& self) {
    std::vector<double> gx(self.parents[0]->data.size(), 0.0);
    for (std::size_t i = 0; i < map->size(); ++i) gx[(*map)[i]] += self.grad[i];
    push_grad(self, 0, gx);
  });
}

}  // namespace

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  const std::size_t r = x.rank();
  const std::size_t a0 = norm_axis("transpose", axis0, r);
  const std::size_t a1 = norm_axis("transpose", axis1, r);
  Shape out_shape = x.shape();
  std::swap(out_shape[a0], out_shape[a1]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r - 1; d-- > 0;) in_stride[d] = in_stride[d + 1] * x.shape()[d + 1];
  std::vector<std::size_t> stride = in_stride;
  std::swap(stride[a0], stride[a1]);
  const std::size_t total = x.numel();
  std::vector<std::size_t> src(total);
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < total; ++i) {
    src[i] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      cur += stride[d];
      if (counter[d] < out_shape[d]) break;
      cur -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return remap("transpose", x, std::move(out_shape), std::move(src));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [](Node& self) { push_grad(self, 0, self.grad); });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (x.rank() > shape.size() || broadcast_shape("broadcast_to", x.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                     shape_str(shape));
  }
  return remap("broadcast_to", x, shape, broadcast_index(x.shape(), shape));
}

Tensor softmax(const Tensor& x) {
  const std::size_t len = x.dim(-1);
  const std::size_t rows = len == 0 ? 0 : x.numel() / len;
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * len;
    double* y = out.data() + r * len;
    const double mx = *std::max_element(in, in + len);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) total += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < len; ++j) y[j] /= total;
  }
  return make_result("softmax", x.shape(), std::move(out), {x}, [rows, len](Node& self) {
    const auto& y = self.data;
    const auto& g = self.grad;
    std::vector<double> gx(y.size());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += g[r * len + j] * y[r * len + j];
      for (std::size_t j = 0; j < len; ++j) {
        gx[r * len + j] = y[r * len + j] * (g[r * len + j] - dot);
      }
    }
    push_grad(self, 0, gx);
  });
}

Tensor layer_norm(const Tensor& x, double eps) {
  const std::size_t len = x.dim(-1);
  const std::size_t rows = x.numel() / len;
  std::vector<double> out(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const auto& xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * len;
    double mu = 0.0;
    for (std::size_t j = 0; j < len; ++j) mu += in[j];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(len);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = (in[j] - mu) * rs;
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x}, [rows, len, rstd](Node& self) {
    const auto& xh = self.data;
    const auto& g = self.grad;
    std::vector<double> gx(xh.size());
    const double inv = 1.0 / static_cast<double>(len);
    for (std::size_t r = 0; r < rows; ++r) {
      double mg = 0.0;
      double mgx = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        mg += g[r * len + j];
        mgx += g[r * len + j] * xh[r * len + j];
      }
      mg *= inv;
      mgx *= inv;
      for (std::size_t j = 0; j < len; ++j) {
        gx[r * len + j] = (*rstd)[r] * (g[r * len + j] - mg - xh[r * len + j] * mgx);
      }
    }
    push_grad(self, 0, gx);
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return make_result("gelu", x.shape(), std::move(out), {x}, [](Node& self) {
    const auto& xv = self.parents[0]->data;
    std::vector<double> gx(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] = self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
    push_grad(self, 0, gx);
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_result("relu", x.shape(), std::move(out), {x}, [](Node& self) {
    const auto& xv = self.parents[0]->data;
    std::vector<double> gx(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = xv[i] > 0.0 ? self.grad[i] : 0.0;
    push_grad(self, 0, gx);
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  return make_result("sigmoid", x.shape(), std::move(out), {x}, [](Node& self) {
    const auto& y = self.data;
    std::vector<double> gx(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] = self.grad[i] * y[i] * (1.0 - y[i]);
    push_grad(self, 0, gx);
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result("sum", Shape{1}, {total}, {x}, [](Node& self) {
    std::vector<double> gx(self.parents[0]->data.size(), self.grad[0]);
    push_grad(self, 0, gx);
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(x.numel());
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result("mean", Shape{1}, {total * inv}, {x}, [inv](Node& self) {
    std::vector<double> gx(self.parents[0]->data.size(), self.grad[0] * inv);
    push_grad(self, 0, gx);
  });
}

namespace {
Tensor reduce_last(const char* op, const Tensor& x, double factor) {
  const std::size_t len = x.dim(-1);
  const std::size_t rows = x.numel() / len;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(rows, 0.0);
  const auto& xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < len; ++j) acc += xv[r * len + j];
    out[r] = acc * factor;
  }
  return make_result(op, std::move(out_shape), std::move(out), {x},
                     [rows, len, factor](Node& self) {
                       std::vector<double> gx(rows * len);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < len; ++j) {
                           gx[r * len + j] = self.grad[r] * factor;
                         }
                       }
                       push_grad(self, 0, gx);
                     });
}
}  // namespace

Tensor sum_last(const Tensor& x) { return reduce_last("sum_last", x, 1.0); }

Tensor mean_last(const Tensor& x) {
  if (x.dim(-1) == 0) throw ShapeError("mean_last: empty last axis");
  return reduce_last("mean_last", x, 1.0 / static_cast<double>(x.dim(-1)));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = norm_axis("concat", axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t d = 0; ok && d < first.size(); ++d) {
      if (d != ax && p.shape()[d] != first[d]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: shape " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(first) + " along axis " + std::to_string(axis));
    }
    out_shape[ax] += p.shape()[ax];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = ax + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[ax] * inner;
  std::vector<double> out(outer * out_row);
  auto widths = std::make_shared<std::vector<std::size_t>>();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[ax] * inner;
    widths->push_back(w);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * w, w, out.data() + o * out_row + offset);
    }
    offset += w;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [widths, outer, out_row](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t i = 0; i < widths->size(); ++i) {
                         const std::size_t w = (*widths)[i];
                         if (wants(self, i)) {
                           std::vector<double> g(outer * w);
                           for (std::size_t o = 0; o < outer; ++o) {
                             std::copy_n(self.grad.data() + o * out_row + off, w,
                                         g.data() + o * w);
                           }
                           push_grad(self, i, g);
                         }
                         off += w;
                       }
                     });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis("slice", axis, x.rank());
  if (start + length > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis " + std::to_string(axis) +
                     " of shape " + shape_str(x.shape()));
  }
  std::vector<std::size_t> idx(length);
  for (std::size_t i = 0; i < length; ++i) idx[i] = start + i;
  return index_select(x, static_cast<int>(ax), idx);
}

Tensor index_select(const Tensor& x, int axis, std::span<const std::size_t> indices) {
  const std::size_t ax = norm_axis("index_select", axis, x.rank());
  const std::size_t extent = x.shape()[ax];
  for (auto i : indices) {
    if (i >= extent) {
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range for axis " +
                       std::to_string(axis) + " of shape " + shape_str(x.shape()));
    }
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= x.shape()[d];
  std::size_t inner = 1;
  for (std::size_t d = ax + 1; d < x.rank(); ++d) inner *= x.shape()[d];
  Shape out_shape = x.shape();
  out_shape[ax] = indices.size();
  std::vector<std::size_t> src;
  src.reserve(outer * indices.size() * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (auto i : indices) {
      for (std::size_t j = 0; j < inner; ++j) src.push_back((o * extent + i) * inner + j);
    }
  }
  return remap("index_select", x, std::move(out_shape), std::move(src));
}

Tensor gather_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& rows) {
  if (x.rank() != 3 || rows.size() != x.dim(0)) {
    throw ShapeError("gather_rows: expected [B,N,C] with B row lists, got shape " +
                     shape_str(x.shape()) + " and " + std::to_string(rows.size()) + " lists");
  }
  const std::size_t n = x.dim(1);
  const std::size_t c = x.dim(2);
  const std::size_t k = rows.empty() ? 0 : rows.front().size();
  std::vector<std::size_t> src;
  src.reserve(rows.size() * k * c);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    if (rows[b].size() != k) throw ShapeError("gather_rows: row lists differ in length");
    for (auto r : rows[b]) {
      if (r >= n) {
        throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for shape " +
                         shape_str(x.shape()));
      }
      for (std::size_t j = 0; j < c; ++j) src.push_back((b * n + r) * c + j);
    }
  }
  return remap("gather_rows", x, Shape{rows.size(), k, c}, std::move(src));
}

Tensor take(const Tensor& x, std::span<const std::size_t> flat_indices) {
  for (auto i : flat_indices) {
    if (i >= x.numel()) {
      throw ShapeError("take: index " + std::to_string(i) + " out of range for shape " +
                       shape_str(x.shape()));
    }
  }
  return remap("take", x, Shape{flat_indices.size()},
               std::vector<std::size_t>(flat_indices.begin(), flat_indices.end()));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double loss = 0.0;
  const auto& z = logits.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
    const double* row = z.data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double total = 0.0;
    for (std::size_t j = 0; j < classes; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < classes; ++j) (*probs)[b * classes + j] = std::exp(row[j] - lse);
    loss += lse - row[y];
  }
  loss /= static_cast<double>(batch);
  return make_result("cross_entropy", Shape{1}, {loss}, {logits},
                     [probs, lab, batch, classes](Node& self) {
                       std::vector<double> g(*probs);
                       const double s = self.grad[0] / static_cast<double>(batch);
                       for (std::size_t b = 0; b < batch; ++b) {
                         g[b * classes + static_cast<std::size_t>((*lab)[b])] -= 1.0;
                       }
                       for (auto& v : g) v *= s;
                       push_grad(self, 0, g);
                     });
}

}  // namespace dasvit::ops
