#include "fvt/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

#include "fvt/errors.hpp"

namespace fvt {
inline namespace FVT_NS {

namespace {

// Gradient buffer of an input, or nullptr when it must not receive one.
real* grad_of(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.impl()->grad_buffer().data();
}

const real* grad_in(const TensorImpl& out) { return out.grad.data(); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void check_suffix(const Tensor& x, const Tensor& b, const char* op) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  bool ok = bs.size() <= xs.size();
  for (std::size_t i = 0; ok && i < bs.size(); ++i) {
    ok = xs[xs.size() - bs.size() + i] == bs[i];
  }
  if (!ok) {
    throw ShapeError(std::string(op) + ": " + shape_str(bs) + " is not a trailing suffix of " +
                     shape_str(xs));
  }
}

[[maybe_unused]] void blas_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
               const float* a, const float* b, float beta, float* c) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(ta ? m : k), b, static_cast<int>(tb ? k : n), beta, c,
              static_cast<int>(n));
}

[[maybe_unused]] void blas_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
               const double* a, const double* b, double beta, double* c) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(ta ? m : k), b, static_cast<int>(tb ? k : n), beta, c,
              static_cast<int>(n));
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, real alpha,
          const real* a, const real* b, real beta, real* c) {
  // Single-threaded BLAS keeps every reduction order fixed, so results are
  // bit-reproducible across runs.
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
  blas_gemm(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<real> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_result("add", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    const real* g = grad_in(o);
    for (const Tensor* t : {&a, &b}) {
      if (real* gt = grad_of(*t)) {
        for (std::size_t i = 0; i < o.data.size(); ++i) gt[i] += g[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<real> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  return make_result("sub", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    const real* g = grad_in(o);
    if (real* ga = grad_of(a)) {
      for (std::size_t i = 0; i < o.data.size(); ++i) ga[i] += g[i];
    }
    if (real* gb = grad_of(b)) {
      for (std::size_t i = 0; i < o.data.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<real> out(a.numel());
  const auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result("mul", a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    const real* g = grad_in(o);
    const auto ad = a.data(), bd = b.data();
    if (real* ga = grad_of(a)) {
      for (std::size_t i = 0; i < o.data.size(); ++i) ga[i] += g[i] * bd[i];
    }
    if (real* gb = grad_of(b)) {
      for (std::size_t i = 0; i < o.data.size(); ++i) gb[i] += g[i] * ad[i];
    }
  });
}

Tensor scale(const Tensor& x, real s) {
  std::vector<real> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * s;
  return make_result("scale", x.shape(), std::move(out), {x}, [x, s](const TensorImpl& o) {
    const real* g = grad_in(o);
    if (real* gx = grad_of(x)) {
      for (std::size_t i = 0; i < o.data.size(); ++i) gx[i] += g[i] * s;
    }
  });
}

Tensor add_broadcast(const Tensor& x, const Tensor& b) {
  check_suffix(x, b, "add_broadcast");
  const std::size_t inner = b.numel();
  const std::size_t outer = x.numel() / inner;
  std::vector<real> out(x.numel());
  const auto xd = x.data(), bd = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xd[o * inner + i] + bd[i];
  }
  return make_result("add_broadcast", x.shape(), std::move(out), {x, b},
                     [x, b, outer, inner](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       if (real* gx = grad_of(x)) {
                         for (std::size_t i = 0; i < o.data.size(); ++i) gx[i] += g[i];
                       }
                       if (real* gb = grad_of(b)) {
                         for (std::size_t r = 0; r < outer; ++r) {
                           for (std::size_t i = 0; i < inner; ++i) gb[i] += g[r * inner + i];
                         }
                       }
                     });
}

Tensor mul_broadcast(const Tensor& x, const Tensor& b) {
  check_suffix(x, b, "mul_broadcast");
  const std::size_t inner = b.numel();
  const std::size_t outer = x.numel() / inner;
  std::vector<real> out(x.numel());
  const auto xd = x.data(), bd = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xd[o * inner + i] * bd[i];
  }
  return make_result("mul_broadcast", x.shape(), std::move(out), {x, b},
                     [x, b, outer, inner](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       const auto xd = x.data(), bd = b.data();
                       real* gx = grad_of(x);
                       real* gb = grad_of(b);
                       for (std::size_t r = 0; r < outer; ++r) {
                         for (std::size_t i = 0; i < inner; ++i) {
                           const std::size_t k = r * inner + i;
                           if (gx) gx[k] += g[k] * bd[i];
                           if (gb) gb[i] += g[k] * xd[k];
                         }
                       }
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<real> out(m * n);
  gemm(false, false, m, n, k, 1, a.data().data(), b.data().data(), 0, out.data());
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const TensorImpl& o) {
    const real* g = grad_in(o);
    if (real* ga = grad_of(a)) gemm(false, true, m, k, n, 1, g, b.data().data(), 1, ga);
    if (real* gb = grad_of(b)) gemm(true, false, k, n, m, 1, a.data().data(), g, 1, gb);
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<real> out(batch * m * n);
  const real* ad = a.data().data();
  const real* bd = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(false, false, m, n, k, 1, ad + i * m * k, bd + i * k * n, 0, out.data() + i * m * n);
  }
  return make_result("bmm", {batch, m, n}, std::move(out), {a, b},
                     [a, b, batch, m, k, n](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       const real* ad = a.data().data();
                       const real* bd = b.data().data();
                       real* ga = grad_of(a);
                       real* gb = grad_of(b);
                       for (std::size_t i = 0; i < batch; ++i) {
                         const real* gi = g + i * m * n;
                         if (ga) gemm(false, true, m, k, n, 1, gi, bd + i * k * n, 1, ga + i * m * k);
                         if (gb) gemm(true, false, k, n, m, 1, ad + i * m * k, gi, 1, gb + i * k * n);
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() < 1 || w.rank() != 2 || x.dim(-1) != w.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0), n = w.dim(1);
  const std::size_t m = x.numel() / k;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match output width " +
                     std::to_string(n));
  }
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<real> out(m * n);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t r = 0; r < m; ++r) std::copy(bd.begin(), bd.end(), out.begin() + r * n);
  }
  gemm(false, false, m, n, k, 1, x.data().data(), w.data().data(), bias.defined() ? 1 : 0,
       out.data());
  return make_result("linear", std::move(out_shape), std::move(out), {x, w, bias},
                     [x, w, bias, m, k, n](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       if (real* gx = grad_of(x)) gemm(false, true, m, k, n, 1, g, w.data().data(), 1, gx);
                       if (real* gw = grad_of(w)) gemm(true, false, k, n, m, 1, x.data().data(), g, 1, gw);
                       if (real* gb = grad_of(bias)) {
                         for (std::size_t r = 0; r < m; ++r) {
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                         }
                       }
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  bool ok = axes.size() == r;
  for (std::size_t i = 0; ok && i < r; ++i) {
    ok = axes[i] < r && !seen[axes[i]];
    if (ok) seen[axes[i]] = true;
  }
  if (!ok) throw ShapeError("permute: invalid axis order for " + shape_str(x.shape()));

  const Shape& in_shape = x.shape();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[axes[i]];
    src_strides[i] = in_strides[axes[i]];
  }
  // Source offset of the first element of every output row (last axis),
  // reused by backward; the row itself walks src_strides[r-1].
  const std::size_t n = x.numel();
  const std::size_t row_len = r ? out_shape[r - 1] : 1;
  const std::size_t row_stride = r ? src_strides[r - 1] : 1;
  const std::size_t rows = row_len ? n / row_len : 0;
  auto row_src = std::make_shared<std::vector<std::size_t>>(rows);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    (*row_src)[i] = src;
    for (std::size_t d = r - 1; d-- > 0;) {
      ++counter[d];
      src += src_strides[d];
      if (counter[d] < out_shape[d]) break;
      src -= src_strides[d] * out_shape[d];
      counter[d] = 0;
    }
  }
  std::vector<real> out(n);
  const real* xd = x.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    const real* from = xd + (*row_src)[i];
    real* to = out.data() + i * row_len;
    if (row_stride == 1) {
      std::copy(from, from + row_len, to);
    } else {
      for (std::size_t k = 0; k < row_len; ++k) to[k] = from[k * row_stride];
    }
  }
  return make_result("permute", std::move(out_shape), std::move(out), {x},
                     [x, row_src, row_len, row_stride](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       real* gx = grad_of(x);
                       if (!gx) return;
                       for (std::size_t i = 0; i < row_src->size(); ++i) {
                         real* to = gx + (*row_src)[i];
                         const real* from = g + i * row_len;
                         for (std::size_t k = 0; k < row_len; ++k) to[k * row_stride] += from[k];
                       }
                     });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2 for " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<real> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [x](const TensorImpl& o) {
    const real* g = grad_in(o);
    if (real* gx = grad_of(x)) {
      for (std::size_t i = 0; i < o.data.size(); ++i) gx[i] += g[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != parts[0].shape()[i]) {
        throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " +
                         shape_str(s) + " differ off-axis");
      }
    }
    out_shape[ax] += s[ax];
  }
  const AxisSplit total = split_at(out_shape, ax);
  const std::size_t out_row = total.len * total.inner;
  std::vector<real> out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t row = p.dim(static_cast<int>(ax)) * total.inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < total.outer; ++o) {
      std::copy_n(pd.begin() + o * row, row, out.begin() + o * out_row + offset);
    }
    offsets.push_back(offset);
    offset += row;
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts,
                     [parts, offsets, total, out_row](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                         real* gp = grad_of(parts[pi]);
                         if (!gp) continue;
                         const std::size_t row = parts[pi].numel() / total.outer;
                         for (std::size_t r = 0; r < total.outer; ++r) {
                           for (std::size_t i = 0; i < row; ++i) {
                             gp[r * row + i] += g[r * out_row + offsets[pi] + i];
                           }
                         }
                       }
                     });
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "slice");
  if (length == 0 || start + length > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") out of bounds for axis " +
                     std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const std::size_t in_row = s.len * s.inner;
  const std::size_t out_row = length * s.inner;
  const std::size_t offset = start * s.inner;
  std::vector<real> out(s.outer * out_row);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xd.begin() + o * in_row + offset, out_row, out.begin() + o * out_row);
  }
  return make_result("slice", std::move(out_shape), std::move(out), {x},
                     [x, s, in_row, out_row, offset](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       if (real* gx = grad_of(x)) {
                         for (std::size_t r = 0; r < s.outer; ++r) {
                           for (std::size_t i = 0; i < out_row; ++i) {
                             gx[r * in_row + offset + i] += g[r * out_row + i];
                           }
                         }
                       }
                     });
}

Tensor repeat_leading(const Tensor& x, std::size_t n) {
  if (n == 0) throw ShapeError("repeat_leading: count must be positive");
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin(), n);
  const std::size_t block = x.numel();
  std::vector<real> out(n * block);
  const auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) std::copy(xd.begin(), xd.end(), out.begin() + i * block);
  return make_result("repeat_leading", std::move(out_shape), std::move(out), {x},
                     [x, n, block](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       if (real* gx = grad_of(x)) {
                         for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < block; ++j) gx[j] += g[i * block + j];
                         }
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double acc = 0;
  for (real v : x.data()) acc += v;
  return make_result("sum", {1}, {static_cast<real>(acc)}, {x}, [x](const TensorImpl& o) {
    if (real* gx = grad_of(x)) {
      const real g = o.grad[0];
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    }
  });
}

Tensor mean(const Tensor& x) {
  double acc = 0;
  for (real v : x.data()) acc += v;
  const auto n = static_cast<double>(x.numel());
  return make_result("mean", {1}, {static_cast<real>(acc / n)}, {x}, [x, n](const TensorImpl& o) {
    if (real* gx = grad_of(x)) {
      const auto g = static_cast<real>(o.grad[0] / n);
      for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<real> out(idx.size() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                       std::to_string(rows) + " rows");
    }
    std::copy_n(td.begin() + idx[i] * d, d, out.begin() + i * d);
  }
  return make_result("gather_rows", {idx.size(), d}, std::move(out), {table},
                     [table, idx, d](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       if (real* gt = grad_of(table)) {
                         for (std::size_t i = 0; i < idx.size(); ++i) {
                           for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += g[i * d + j];
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  std::vector<real> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.len * s.inner + j;
      real mx = xd[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, xd[base + i * s.inner]);
      double denom = 0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const real e = std::exp(xd[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        denom += e;
      }
      const auto inv = static_cast<real>(1.0 / denom);
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] *= inv;
    }
  }
  return make_result("softmax", x.shape(), std::move(out), {x}, [x, s](const TensorImpl& o) {
    real* gx = grad_of(x);
    if (!gx) return;
    const real* g = grad_in(o);
    const real* y = o.data.data();
    for (std::size_t b = 0; b < s.outer; ++b) {
      for (std::size_t j = 0; j < s.inner; ++j) {
        const std::size_t base = b * s.len * s.inner + j;
        double dot = 0;
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t k = base + i * s.inner;
          dot += static_cast<double>(g[k]) * y[k];
        }
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t k = base + i * s.inner;
          gx[k] += y[k] * (g[k] - static_cast<real>(dot));
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), "log_softmax");
  const AxisSplit s = split_at(x.shape(), ax);
  std::vector<real> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.len * s.inner + j;
      real mx = xd[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, xd[base + i * s.inner]);
      double denom = 0;
      for (std::size_t i = 0; i < s.len; ++i) denom += std::exp(xd[base + i * s.inner] - mx);
      const auto lse = static_cast<real>(mx + std::log(denom));
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] = xd[base + i * s.inner] - lse;
    }
  }
  return make_result("log_softmax", x.shape(), std::move(out), {x}, [x, s](const TensorImpl& o) {
    real* gx = grad_of(x);
    if (!gx) return;
    const real* g = grad_in(o);
    const real* y = o.data.data();
    for (std::size_t b = 0; b < s.outer; ++b) {
      for (std::size_t j = 0; j < s.inner; ++j) {
        const std::size_t base = b * s.len * s.inner + j;
        double gsum = 0;
        for (std::size_t i = 0; i < s.len; ++i) gsum += g[base + i * s.inner];
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t k = base + i * s.inner;
          gx[k] += g[k] - std::exp(y[k]) * static_cast<real>(gsum);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias, real eps) {
  const std::size_t d = x.dim(-1);
  if (weight.rank() != 1 || weight.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeError("layer_norm: affine parameters must be [" + std::to_string(d) + "], got " +
                     shape_str(weight.shape()) + " and " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<real>>(x.numel());
  auto rstd = std::make_shared<std::vector<real>>(rows);
  std::vector<real> out(x.numel());
  const auto xd = x.data(), wd = weight.data(), bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xd.data() + r * d;
    double mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = static_cast<real>(rs);
    for (std::size_t i = 0; i < d; ++i) {
      const auto h = static_cast<real>((row[i] - mu) * rs);
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * wd[i] + bd[i];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, weight, bias},
                     [x, weight, bias, xhat, rstd, rows, d](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       const auto wd = weight.data();
                       real* gx = grad_of(x);
                       real* gw = grad_of(weight);
                       real* gb = grad_of(bias);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const real* gr = g + r * d;
                         const real* hr = xhat->data() + r * d;
                         if (gw || gb) {
                           for (std::size_t i = 0; i < d; ++i) {
                             if (gw) gw[i] += gr[i] * hr[i];
                             if (gb) gb[i] += gr[i];
                           }
                         }
                         if (!gx) continue;
                         double m1 = 0, m2 = 0;
                         for (std::size_t i = 0; i < d; ++i) {
                           const double dh = static_cast<double>(gr[i]) * wd[i];
                           m1 += dh;
                           m2 += dh * hr[i];
                         }
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         const double rs = (*rstd)[r];
                         for (std::size_t i = 0; i < d; ++i) {
                           const double dh = static_cast<double>(gr[i]) * wd[i];
                           gx[r * d + i] += static_cast<real>(rs * (dh - m1 - hr[i] * m2));
                         }
                       }
                     });
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, real eps) {
  const std::size_t d = x.dim(-1);
  if (weight.rank() != 1 || weight.dim(0) != d) {
    throw ShapeError("rms_norm: weight must be [" + std::to_string(d) + "], got " +
                     shape_str(weight.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto inv_rms = std::make_shared<std::vector<double>>(rows);
  std::vector<real> out(x.numel());
  const auto xd = x.data(), wd = weight.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xd.data() + r * d;
    double ms = 0;
    for (std::size_t i = 0; i < d; ++i) ms += static_cast<double>(row[i]) * row[i];
    const double ir = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    (*inv_rms)[r] = ir;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = static_cast<real>(row[i] * ir) * wd[i];
  }
  return make_result("rms_norm", x.shape(), std::move(out), {x, weight},
                     [x, weight, inv_rms, rows, d](const TensorImpl& o) {
                       const real* g = grad_in(o);
                       const auto xd = x.data(), wd = weight.data();
                       real* gx = grad_of(x);
                       real* gw = grad_of(weight);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const real* gr = g + r * d;
                         const real* xr = xd.data() + r * d;
                         const double ir = (*inv_rms)[r];
                         if (gw) {
                           for (std::size_t i = 0; i < d; ++i) gw[i] += static_cast<real>(gr[i] * xr[i] * ir);
                         }
                         if (!gx) continue;
                         double dot = 0;
                         for (std::size_t i = 0; i < d; ++i) dot += static_cast<double>(gr[i]) * wd[i] * xr[i];
                         const double c = ir * ir * ir * dot / static_cast<double>(d);
                         for (std::size_t i = 0; i < d; ++i) {
                           gx[r * d + i] += static_cast<real>(ir * gr[i] * wd[i] - c * xr[i]);
                         }
                       }
                     });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  std::vector<real> out(x.numel());
  // Phi(x) is kept for backward.
  auto cdf = std::make_shared<std::vector<real>>(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const real v = xd[i];
    const real c = real(0.5) * (real(1) + std::erf(v * real(kInvSqrt2)));
    (*cdf)[i] = c;
    out[i] = v * c;
  }
  return make_result("gelu", x.shape(), std::move(out), {x}, [x, cdf](const TensorImpl& o) {
    real* gx = grad_of(x);
    if (!gx) return;
    const real* g = grad_in(o);
    const auto xd = x.data();
    const real inv_sqrt_2pi = real(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    for (std::size_t i = 0; i < o.data.size(); ++i) {
      const real v = xd[i];
      const real pdf = inv_sqrt_2pi * std::exp(real(-0.5) * v * v);
      real d = (*cdf)[i] + v * pdf;
#if defined(FVT_MUTATE_GELU_GRAD)
      d = -d;  // mutation-testing build only
#endif
      gx[i] += g[i] * d;
    }
  });
}

Tensor silu(const Tensor& x) {
  std::vector<real> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const real v = xd[i];
    out[i] = v / (real(1) + std::exp(-v));
  }
  return make_result("silu", x.shape(), std::move(out), {x}, [x](const TensorImpl& o) {
    real* gx = grad_of(x);
    if (!gx) return;
    const real* g = grad_in(o);
    const auto xd = x.data();
    for (std::size_t i = 0; i < o.data.size(); ++i) {
      const real v = xd[i];
      const real sig = real(1) / (real(1) + std::exp(-v));
      gx[i] += g[i] * sig * (real(1) + v * (real(1) - sig));
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<real> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0 ? xd[i] : real{0};
  return make_result("relu", x.shape(), std::move(out), {x}, [x](const TensorImpl& o) {
    real* gx = grad_of(x);
    if (!gx) return;
    const real* g = grad_in(o);
    const auto xd = x.data();
    for (std::size_t i = 0; i < o.data.size(); ++i) {
      if (xd[i] > 0) gx[i] += g[i];
    }
  });
}

}  // namespace FVT_NS
}  // namespace fvt
