#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "wavbert/tensor.hpp"

// Differentiable tensor operations. Every op records its adjoint on the
// current thread's tape when any input requires grad and grad mode is on.

namespace wavbert {

using BoolSeq = std::vector<bool>;

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Flat source offset for every flat index of `out` under broadcasting.
inline std::vector<std::size_t> broadcast_offsets(const Shape& src, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::size_t axis = src.size() - 1 - i;
    const std::size_t oaxis = rank - 1 - i;
    stride[oaxis] = src[axis] == 1 ? 0 : s;
    s *= src[axis];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> offsets(n);
  std::vector<std::size_t> index(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    offsets[flat] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++index[axis];
      offset += stride[axis];
      if (index[axis] < out[axis]) break;
      offset -= stride[axis] * index[axis];
      index[axis] = 0;
    }
  }
  return offsets;
}

inline void require_finite(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

enum class BinaryKind { Add, Sub, Mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  const bool track = tracking({&a, &b});
  const auto& av = a.data();
  const auto& bv = b.data();
  if (a.shape() == b.shape()) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    switch (kind) {
      case BinaryKind::Add:
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
        break;
      case BinaryKind::Sub:
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
        break;
      case BinaryKind::Mul:
        for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
        break;
    }
    return make_result(a.shape(), std::move(out), track,
                       [an = a.node(), bn = b.node(), kind](const Node& o) {
                         const std::size_t n = o.grad.size();
                         if (double* ga = grad_target(an)) {
                           if (kind == BinaryKind::Mul) {
                             for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i] * bn->value[i];
                           } else {
                             for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i];
                           }
                         }
                         if (double* gb = grad_target(bn)) {
                           if (kind == BinaryKind::Mul) {
                             for (std::size_t i = 0; i < n; ++i) gb[i] += o.grad[i] * an->value[i];
                           } else if (kind == BinaryKind::Sub) {
                             for (std::size_t i = 0; i < n; ++i) gb[i] -= o.grad[i];
                           } else {
                             for (std::size_t i = 0; i < n; ++i) gb[i] += o.grad[i];
                           }
                         }
                       });
  }
  Shape shape = broadcast_shapes(a.shape(), b.shape(), name);
  auto ia = broadcast_offsets(a.shape(), shape);
  auto ib = broadcast_offsets(b.shape(), shape);
  const std::size_t n = shape_numel(shape);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[ia[i]];
    const double y = bv[ib[i]];
    out[i] = kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y;
  }
  return make_result(std::move(shape), std::move(out), track,
                     [an = a.node(), bn = b.node(), kind, ia = std::move(ia),
                      ib = std::move(ib)](const Node& o) {
                       const std::size_t n = o.grad.size();
                       if (double* ga = grad_target(an)) {
                         for (std::size_t i = 0; i < n; ++i) {
                           ga[ia[i]] += kind == BinaryKind::Mul ? o.grad[i] * bn->value[ib[i]]
                                                                : o.grad[i];
                         }
                       }
                       if (double* gb = grad_target(bn)) {
                         for (std::size_t i = 0; i < n; ++i) {
                           gb[ib[i]] += kind == BinaryKind::Mul   ? o.grad[i] * an->value[ia[i]]
                                        : kind == BinaryKind::Sub ? -o.grad[i]
                                                                  : o.grad[i];
                         }
                       }
                     });
}

template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF dfdx) {
  const bool track = tracking({&x});
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), track, [xn = x.node(), dfdx](const Node& o) {
    if (double* gx = grad_target(xn)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        gx[i] += o.grad[i] * dfdx(xn->value[i], o.value[i]);
      }
    }
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// Elementwise with numpy-style broadcasting.
inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinaryKind::Add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinaryKind::Sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinaryKind::Mul, "mul");
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result({}, {s}, detail::tracking({&x}),
                             [xn = x.node()](const detail::Node& o) {
    if (double* gx = detail::grad_target(xn)) {
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += o.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Batched matrix product over the last two axes; leading axes broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2];
  const std::size_t k = a.shape()[a.rank() - 1];
  const std::size_t n = b.shape()[b.rank() - 1];
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shapes(a_batch, b_batch, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions of " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not broadcastable");
  }
  auto a_off = detail::broadcast_offsets(a_batch, batch);
  auto b_off = detail::broadcast_offsets(b_batch, batch);
  const std::size_t nb = a_off.size();
  Shape shape = batch;
  shape.push_back(m);
  shape.push_back(n);
  std::vector<double> out(nb * m * n, 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t bi = 0; bi < nb; ++bi) {
    const double* A = av + a_off[bi] * m * k;
    const double* B = bv + b_off[bi] * k * n;
    double* C = out.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        const double* brow = B + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  return detail::make_result(
      std::move(shape), std::move(out), detail::tracking({&a, &b}),
      [an = a.node(), bn = b.node(), a_off = std::move(a_off), b_off = std::move(b_off), m, k,
       n](const detail::Node& o) {
        double* ga = detail::grad_target(an);
        double* gb = detail::grad_target(bn);
        std::vector<double> bt;
        for (std::size_t bi = 0; bi < a_off.size(); ++bi) {
          const double* G = o.grad.data() + bi * m * n;
          const double* A = an->value.data() + a_off[bi] * m * k;
          const double* B = bn->value.data() + b_off[bi] * k * n;
          if (ga) {
            // GA += G B^T as row updates against B^T, which vectorize.
            bt.resize(n * k);
            for (std::size_t p = 0; p < k; ++p) {
              for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B[p * n + j];
            }
            double* GA = ga + a_off[bi] * m * k;
            for (std::size_t i = 0; i < m; ++i) {
              double* garow = GA + i * k;
              const double* grow = G + i * n;
              for (std::size_t j = 0; j < n; ++j) {
                const double g = grow[j];
                const double* btrow = bt.data() + j * k;
                for (std::size_t p = 0; p < k; ++p) garow[p] += g * btrow[p];
              }
            }
          }
          if (gb) {
            double* GB = gb + b_off[bi] * k * n;
            for (std::size_t i = 0; i < m; ++i) {
              const double* grow = G + i * n;
              for (std::size_t p = 0; p < k; ++p) {
                const double aip = A[i * k + p];
                double* gbrow = GB + p * n;
                for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
              }
            }
          }
        }
      });
}

// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose: rank < 2 for shape " + shape_str(x.shape()));
  const std::size_t r = x.shape()[x.rank() - 2];
  const std::size_t c = x.shape()[x.rank() - 1];
  const std::size_t nb = r * c == 0 ? 0 : x.numel() / (r * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = xv[b * r * c + i * c + j];
    }
  }
  return detail::make_result(std::move(shape), std::move(out), detail::tracking({&x}),
                             [xn = x.node(), nb, r, c](const detail::Node& o) {
                               if (double* gx = detail::grad_target(xn)) {
                                 for (std::size_t b = 0; b < nb; ++b) {
                                   for (std::size_t i = 0; i < r; ++i) {
                                     for (std::size_t j = 0; j < c; ++j) {
                                       gx[b * r * c + i * c + j] += o.grad[b * r * c + j * r + i];
                                     }
                                   }
                                 }
                               }
                             });
}

// Copying reshape.
inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), detail::tracking({&x}),
                             [xn = x.node()](const detail::Node& o) {
                               if (double* gx = detail::grad_target(xn)) {
                                 for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
                               }
                             });
}

// Concatenates along the last axis; leading shapes must agree.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_last: no inputs");
  const Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::size_t width = 0;
  std::vector<std::size_t> widths;
  bool track = false;
  for (const auto& p : parts) {
    if (p.rank() == 0 || Shape(p.shape().begin(), p.shape().end() - 1) != lead) {
      throw DimensionError("concat_last: incompatible shapes " + shape_str(parts[0].shape()) +
                           " and " + shape_str(p.shape()));
    }
    widths.push_back(p.shape().back());
    width += p.shape().back();
    track = track || detail::tracking({&p});
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * width);
  std::size_t col = 0;
  for (std::size_t idx = 0; idx < parts.size(); ++idx) {
    const auto& pv = parts[idx].data();
    const std::size_t w = widths[idx];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(r * width + col));
    }
    col += w;
  }
  Shape shape = lead;
  shape.push_back(width);
  std::vector<detail::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result(
      std::move(shape), std::move(out), track,
      [nodes = std::move(nodes), widths = std::move(widths), rows, width](const detail::Node& o) {
        std::size_t col = 0;
        for (std::size_t idx = 0; idx < nodes.size(); ++idx) {
          const std::size_t w = widths[idx];
          if (double* g = detail::grad_target(nodes[idx])) {
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < w; ++j) g[r * w + j] += o.grad[r * width + col + j];
            }
          }
          col += w;
        }
      });
}

// Columns [start, start + length) of the last axis.
inline Tensor slice_last(const Tensor& x, std::size_t start, std::size_t length) {
  if (x.rank() == 0 || start + length > x.shape().back()) {
    throw DimensionError("slice_last: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") outside shape " +
                         shape_str(x.shape()));
  }
  const std::size_t width = x.shape().back();
  const std::size_t rows = width == 0 ? 0 : x.numel() / width;
  Shape shape = x.shape();
  shape.back() = length;
  std::vector<double> out(rows * length);
  const auto& xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < length; ++j) out[r * length + j] = xv[r * width + start + j];
  }
  return detail::make_result(std::move(shape), std::move(out), detail::tracking({&x}),
                             [xn = x.node(), rows, width, start, length](const detail::Node& o) {
                               if (double* gx = detail::grad_target(xn)) {
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < length; ++j) {
                                     gx[r * width + start + j] += o.grad[r * length + j];
                                   }
                                 }
                               }
                             });
}

// Normalizes over the last axis, then applies gamma/beta (both shape (d,)).
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: affine shapes " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), detail::tracking({&x, &gamma, &beta}),
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat = std::move(xhat),
       rstd = std::move(rstd), rows, d](const detail::Node& o) {
        double* gx = detail::grad_target(xn);
        double* gg = detail::grad_target(gn);
        double* gb = detail::grad_target(bn);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = o.grad.data() + r * d;
          const double* xh = xhat.data() + r * d;
          double mean_dx = 0.0;
          double mean_dx_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) gg[j] += g[j] * xh[j];
            if (gb) gb[j] += g[j];
            dxhat[j] = g[j] * gn->value[j];
            mean_dx += dxhat[j];
            mean_dx_xh += dxhat[j] * xh[j];
          }
          if (!gx) continue;
          mean_dx /= static_cast<double>(d);
          mean_dx_xh /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_dx - xh[j] * mean_dx_xh);
          }
        }
      });
}

// Rows of `table` gathered by id. Rows whose id equals `frozen_id` receive
// no gradient (used for the PAD embedding).
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids, int frozen_id = -1) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D");
  const std::size_t rows = table.shape()[0];
  const std::size_t d = table.shape()[1];
  std::vector<double> out(ids.size() * d);
  const auto& tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw VocabularyError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(rows) + " rows");
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return detail::make_result({ids.size(), d}, std::move(out), detail::tracking({&table}),
                             [tn = table.node(), ids, d, frozen_id](const detail::Node& o) {
                               if (double* gt = detail::grad_target(tn)) {
                                 for (std::size_t i = 0; i < ids.size(); ++i) {
                                   if (ids[i] == frozen_id) continue;
                                   for (std::size_t j = 0; j < d; ++j) {
                                     gt[ids[i] * d + j] += o.grad[i * d + j];
                                   }
                                 }
                               }
                             });
}

namespace detail {

struct AxisLayout {
  std::size_t outer, extent, inner;
};

inline AxisLayout axis_layout(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(x.shape()));
  }
  AxisLayout l{1, x.shape()[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) l.inner *= x.shape()[i];
  return l;
}

}  // namespace detail

// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x, axis, "softmax");
  detail::require_finite(x, "softmax");
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.extent * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < l.extent; ++e) mx = std::max(mx, xv[base + e * l.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < l.extent; ++e) {
        out[base + e * l.inner] = std::exp(xv[base + e * l.inner] - mx);
        z += out[base + e * l.inner];
      }
      for (std::size_t e = 0; e < l.extent; ++e) out[base + e * l.inner] /= z;
    }
  }
  return detail::make_result(x.shape(), std::move(out), detail::tracking({&x}),
                             [xn = x.node(), l](const detail::Node& o) {
                               double* gx = detail::grad_target(xn);
                               if (!gx) return;
                               for (std::size_t ot = 0; ot < l.outer; ++ot) {
                                 for (std::size_t in = 0; in < l.inner; ++in) {
                                   const std::size_t base = ot * l.extent * l.inner + in;
                                   double dot = 0.0;
                                   for (std::size_t e = 0; e < l.extent; ++e) {
                                     const std::size_t i = base + e * l.inner;
                                     dot += o.grad[i] * o.value[i];
                                   }
                                   for (std::size_t e = 0; e < l.extent; ++e) {
                                     const std::size_t i = base + e * l.inner;
                                     gx[i] += o.value[i] * (o.grad[i] - dot);
                                   }
                                 }
                               }
                             });
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto l = detail::axis_layout(x, axis, "log_softmax");
  detail::require_finite(x, "log_softmax");
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.extent * l.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < l.extent; ++e) mx = std::max(mx, xv[base + e * l.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < l.extent; ++e) z += std::exp(xv[base + e * l.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t e = 0; e < l.extent; ++e) {
        out[base + e * l.inner] = xv[base + e * l.inner] - lse;
      }
    }
  }
  return detail::make_result(x.shape(), std::move(out), detail::tracking({&x}),
                             [xn = x.node(), l](const detail::Node& o) {
                               double* gx = detail::grad_target(xn);
                               if (!gx) return;
                               for (std::size_t ot = 0; ot < l.outer; ++ot) {
                                 for (std::size_t in = 0; in < l.inner; ++in) {
                                   const std::size_t base = ot * l.extent * l.inner + in;
                                   double gsum = 0.0;
                                   for (std::size_t e = 0; e < l.extent; ++e) {
                                     gsum += o.grad[base + e * l.inner];
                                   }
                                   for (std::size_t e = 0; e < l.extent; ++e) {
                                     const std::size_t i = base + e * l.inner;
                                     gx[i] += o.grad[i] - std::exp(o.value[i]) * gsum;
                                   }
                                 }
                               }
                             });
}

// Softmax over the last axis restricted to keys where `key_mask` is true.
// Masked keys get probability exactly 0.
inline Tensor masked_softmax(const Tensor& x, const BoolSeq& key_mask) {
  if (x.rank() == 0 || x.shape().back() != key_mask.size()) {
    throw DimensionError("masked_softmax: mask length " + std::to_string(key_mask.size()) +
                         " does not match shape " + shape_str(x.shape()));
  }
  if (std::none_of(key_mask.begin(), key_mask.end(), [](bool b) { return b; })) {
    throw DegenerateAttentionError("attention: every key is masked");
  }
  const std::size_t k = key_mask.size();
  const std::size_t rows = x.numel() / k;
  std::vector<double> out(x.numel(), 0.0);
  const auto& xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      if (!key_mask[j]) continue;
      if (!std::isfinite(row[j])) throw NumericError("masked_softmax: non-finite input");
      mx = std::max(mx, row[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (key_mask[j]) {
        out[r * k + j] = std::exp(row[j] - mx);
        z += out[r * k + j];
      }
    }
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] /= z;
  }
  return detail::make_result(x.shape(), std::move(out), detail::tracking({&x}),
                             [xn = x.node(), rows, k](const detail::Node& o) {
                               double* gx = detail::grad_target(xn);
                               if (!gx) return;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < k; ++j) {
                                   dot += o.grad[r * k + j] * o.value[r * k + j];
                                 }
                                 for (std::size_t j = 0; j < k; ++j) {
                                   gx[r * k + j] += o.value[r * k + j] * (o.grad[r * k + j] - dot);
                                 }
                               }
                             });
}

}  // namespace wavbert
