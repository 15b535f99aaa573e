#pragma once

// Minimal tape-based reverse-mode differentiation over dense double tensors.
// Only the operations the models in this library need are provided; each one
// records its own adjoint. Values are never mutated after being recorded.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <vector>

#include "geoworld/errors.hpp"
#include "geoworld/numerics.hpp"

namespace geoworld::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const noexcept { return tape != nullptr; }
};

namespace kernel {

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  // Transposing B keeps the inner loop contiguous (and vectorizable).
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace kernel

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) { return push(std::move(v), false, {}); }
  Var leaf(Tensor v) { return push(std::move(v), true, {}); }

  Var record(Tensor v, std::initializer_list<Var> inputs, Backward back) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(v), needs, needs ? std::move(back) : Backward{});
  }
  Var record(Tensor v, const std::vector<Var>& inputs, Backward back) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(v), needs, needs ? std::move(back) : Backward{});
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  /// Adjoint buffer for v, allocated as zeros on first access.
  Tensor& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool has_grad(Var v) const { return nodes_.at(v.id).grad.shape() == nodes_.at(v.id).value.shape(); }

  void accumulate(Var v, const Tensor& g) {
    if (!needs_grad(v)) return;
    Tensor& dst = grad(v);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  /// Reverse sweep from root. A scalar root gets seed 1 unless one is given.
  void backward(Var root, const Tensor* seed = nullptr) {
    Tensor& g = grad(root);
    if (seed) {
      if (seed->size() != g.size()) throw InvalidShape("backward seed does not match root shape");
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
    } else {
      if (g.size() != 1) throw InvalidShape("backward on non-scalar root needs a seed");
      g[0] += 1.0;
    }
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.back || n.grad.shape() != n.value.shape()) continue;
      n.back(*this, n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward back;
    bool needs_grad = false;
  };

  Var push(Tensor v, bool needs, Backward back) {
    nodes_.push_back(Node{std::move(v), Tensor{}, std::move(back), needs});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& val(Var v) { return v.tape->value(v); }

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw InvalidShape(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

inline Var constant(Tape& tape, Tensor v) { return tape.constant(std::move(v)); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// a[m,k] * b[k,n]
inline Var matmul(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) throw InvalidShape("matmul inner dimension mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  Tensor out({m, n});
  kernel::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) kernel::gemm_nt(g.data().data(), t.value(b).data().data(), t.grad(a).data().data(), m, n, k);
    if (t.needs_grad(b)) kernel::gemm_tn(t.value(a).data().data(), g.data().data(), t.grad(b).data().data(), m, k, n);
  });
}

/// a[m,k] * b[n,k]^T
inline Var matmul_nt(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  require_rank2(av, "matmul_nt");
  require_rank2(bv, "matmul_nt");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  if (bv.dim(1) != k) throw InvalidShape("matmul_nt inner dimension mismatch");
  Tensor out({m, n});
  kernel::gemm_nt(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.tape->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) kernel::gemm_nn(g.data().data(), t.value(b).data().data(), t.grad(a).data().data(), m, n, k);
    if (t.needs_grad(b)) kernel::gemm_tn(g.data().data(), t.value(a).data().data(), t.grad(b).data().data(), m, n, k);
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.size() != b.size()) {
    throw InvalidShape(std::string(op) + ": size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline Var add(Var a, Var b) {
  require_same(val(a), val(b), "add");
  Tensor out = val(a);
  const Tensor& bv = val(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  require_same(val(a), val(b), "sub");
  Tensor out = val(a);
  const Tensor& bv = val(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  require_same(val(a), val(b), "mul");
  Tensor out = val(a);
  const Tensor& bv = val(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      const Tensor& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      const Tensor& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = val(a);
  for (auto& v : out.data()) v *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

/// a[m,n] + row[n] broadcast over rows.
inline Var add_row(Var a, Var row) {
  const Tensor& av = val(a);
  const Tensor& rv = val(row);
  const std::size_t n = rv.size();
  if (n == 0 || av.size() % n != 0 || av.shape().back() != n) throw InvalidShape("add_row: width mismatch");
  Tensor out = av;
  const std::size_t m = out.size() / n;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  return a.tape->record(std::move(out), {a, row}, [a, row, m, n](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) {
      Tensor& gr = t.grad(row);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
    }
  });
}

inline double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const double u = k * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

/// Tanh-approximated GELU.
inline Var gelu(Var a) {
  Tensor out = val(a);
  for (auto& v : out.data()) v = gelu_value(v);
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    const Tensor& av = t.value(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_derivative(av[i]);
  });
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Tensor out = val(a);
  for (auto& v : out.data()) v = sigmoid_value(v);
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(out), {a}, [a, self](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    const Tensor& y = t.value(Var{&t, self});
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

/// Elementwise clamp; the adjoint is passed through where lo <= a <= hi.
inline Var clamp(Var a, double lo, double hi) {
  Tensor out = val(a);
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  return a.tape->record(std::move(out), {a}, [a, lo, hi](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    const Tensor& av = t.value(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (av[i] >= lo && av[i] <= hi) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

inline Var reshape(Var a, Shape s) {
  Tensor out = val(a).reshaped(std::move(s));
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// out.flat[i] = a.flat[index[i]]; the adjoint scatter-adds.
inline Var gather(Var a, std::vector<std::size_t> index, Shape out_shape) {
  const Tensor& av = val(a);
  if (shape_size(out_shape) != index.size()) throw InvalidShape("gather: index count does not match output shape");
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.size()) throw InvalidShape("gather: index out of range");
    out[i] = av[index[i]];
  }
  return a.tape->record(std::move(out), {a}, [a, idx = std::move(index)](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
  });
}

/// Row gather on a rank-2 tensor.
inline Var gather_rows(Var a, const std::vector<std::size_t>& rows) {
  const Tensor& av = val(a);
  require_rank2(av, "gather_rows");
  const std::size_t n = av.dim(1);
  std::vector<std::size_t> idx;
  idx.reserve(rows.size() * n);
  for (std::size_t r : rows) {
    if (r >= av.dim(0)) throw InvalidShape("gather_rows: row out of range");
    for (std::size_t j = 0; j < n; ++j) idx.push_back(r * n + j);
  }
  return gather(a, std::move(idx), {rows.size(), n});
}

/// Concatenate rank-2 tensors with equal row counts along columns.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidShape("concat_cols: no inputs");
  const std::size_t m = val(parts[0]).dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_rank2(val(p), "concat_cols");
    if (val(p).dim(0) != m) throw InvalidShape("concat_cols: row count mismatch");
    widths.push_back(val(p).dim(1));
    total += widths.back();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = val(parts[k]);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = pv[i * widths[k] + j];
    off += widths[k];
  }
  return parts[0].tape->record(std::move(out), parts, [parts, widths, m, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (t.needs_grad(parts[k])) {
        Tensor& gp = t.grad(parts[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention
// ---------------------------------------------------------------------------

/// Per-row layer normalization of x[m,n] with affine gain and bias of length n.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  const Tensor& xv = val(x);
  require_rank2(xv, "layer_norm");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  const Tensor& gv = val(gain);
  const Tensor& bv = val(bias);
  if (gv.size() != n || bv.size() != n) throw InvalidShape("layer_norm: affine size mismatch");
  Tensor xhat({m, n});
  std::vector<double> inv_std(m);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = xv.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += r[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (r[j] - mu) * inv_std[i];
      xhat[i * n + j] = h;
      out[i * n + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape->record(std::move(out), {x, gain, bias},
                        [x, gain, bias, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
                          const Tensor& gv = t.value(gain);
                          if (t.needs_grad(gain) || t.needs_grad(bias)) {
                            Tensor& gg = t.grad(gain);
                            Tensor& gb = t.grad(bias);
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j) {
                                gg[j] += g[i * n + j] * xhat[i * n + j];
                                gb[j] += g[i * n + j];
                              }
                          }
                          if (!t.needs_grad(x)) return;
                          Tensor& gx = t.grad(x);
                          std::vector<double> dh(n);
                          for (std::size_t i = 0; i < m; ++i) {
                            double mean_dh = 0.0, mean_dh_h = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              dh[j] = g[i * n + j] * gv[j];
                              mean_dh += dh[j];
                              mean_dh_h += dh[j] * xhat[i * n + j];
                            }
                            mean_dh /= static_cast<double>(n);
                            mean_dh_h /= static_cast<double>(n);
                            for (std::size_t j = 0; j < n; ++j)
                              gx[i * n + j] += inv_std[i] * (dh[j] - mean_dh - xhat[i * n + j] * mean_dh_h);
                          }
                        });
}

/// A block of queries [q_begin, q_end) attending to keys [k_begin, k_end).
struct AttentionSegment {
  std::size_t q_begin, q_end, k_begin, k_end;
  std::size_t nq() const { return q_end - q_begin; }
  std::size_t nk() const { return k_end - k_begin; }
};

/// Segmented scaled dot-product attention:
///   out[seg.q] = softmax(Q[seg.q] K[seg.k]^T * scale + B_seg) V[seg.k]
/// bias, when valid, holds the per-segment [nq, nk] blocks back to back.
/// Query rows not covered by any segment produce zeros.
inline Var attention(Var q, Var k, Var v, std::vector<AttentionSegment> segments, Var bias, double scale) {
  const Tensor& qv = val(q);
  const Tensor& kv = val(k);
  const Tensor& vv = val(v);
  require_rank2(qv, "attention");
  require_rank2(kv, "attention");
  require_rank2(vv, "attention");
  const std::size_t d = qv.dim(1), dv = vv.dim(1);
  if (kv.dim(1) != d || kv.dim(0) != vv.dim(0)) throw InvalidShape("attention: key/value shape mismatch");
  std::size_t bias_total = 0;
  for (const auto& s : segments) {
    if (s.nk() == 0) throw InvalidShape("attention: empty key set");
    if (s.q_end > qv.dim(0) || s.k_end > kv.dim(0) || s.q_begin > s.q_end) throw InvalidShape("attention: segment out of range");
    bias_total += s.nq() * s.nk();
  }
  if (bias.valid() && val(bias).size() != bias_total) throw InvalidShape("attention: bias size mismatch");
  const double* bptr = bias.valid() ? val(bias).data().data() : nullptr;

  Tensor out({qv.dim(0), dv});
  std::vector<double> probs(bias_total);
  std::size_t boff = 0;
  for (const auto& s : segments) {
    const std::size_t nq = s.nq(), nk = s.nk();
    double* p = probs.data() + boff;
    kernel::gemm_nt(qv.data().data() + s.q_begin * d, kv.data().data() + s.k_begin * d, p, nq, d, nk);
    for (std::size_t i = 0; i < nq; ++i) {
      double* row = p + i * nk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < nk; ++j) {
        row[j] = row[j] * scale + (bptr ? bptr[boff + i * nk + j] : 0.0);
        mx = std::max(mx, row[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < nk; ++j) row[j] *= inv;
    }
    kernel::gemm_nn(p, vv.data().data() + s.k_begin * dv, out.data().data() + s.q_begin * dv, nq, nk, dv);
    boff += nq * nk;
  }

  std::vector<Var> inputs{q, k, v};
  if (bias.valid()) inputs.push_back(bias);
  return q.tape->record(
      std::move(out), inputs,
      [q, k, v, bias, d, dv, scale, segs = std::move(segments), probs = std::move(probs)](Tape& t, const Tensor& g) {
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        const bool gq = t.needs_grad(q), gk = t.needs_grad(k), gvv = t.needs_grad(v);
        const bool gb = bias.valid() && t.needs_grad(bias);
        std::size_t boff = 0;
        std::vector<double> ds;
        for (const auto& s : segs) {
          const std::size_t nq = s.nq(), nk = s.nk();
          const double* p = probs.data() + boff;
          const double* go = g.data().data() + s.q_begin * dv;
          if (gvv) kernel::gemm_tn(p, go, t.grad(v).data().data() + s.k_begin * dv, nq, nk, dv);
          // dA = dO V^T, then the softmax adjoint.
          ds.assign(nq * nk, 0.0);
          kernel::gemm_nt(go, vv.data().data() + s.k_begin * dv, ds.data(), nq, dv, nk);
          for (std::size_t i = 0; i < nq; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < nk; ++j) dot += ds[i * nk + j] * p[i * nk + j];
            for (std::size_t j = 0; j < nk; ++j) ds[i * nk + j] = p[i * nk + j] * (ds[i * nk + j] - dot);
          }
          if (gb) {
            Tensor& gbias = t.grad(bias);
            for (std::size_t i = 0; i < nq * nk; ++i) gbias[boff + i] += ds[i];
          }
          for (auto& x : ds) x *= scale;
          if (gq) kernel::gemm_nn(ds.data(), kv.data().data() + s.k_begin * d, t.grad(q).data().data() + s.q_begin * d, nq, nk, d);
          if (gk) kernel::gemm_tn(ds.data(), qv.data().data() + s.q_begin * d, t.grad(k).data().data() + s.k_begin * d, nq, nk, d);
          boff += nq * nk;
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(Var a) {
  double s = 0.0;
  for (double x : val(a).data()) s += x;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (auto& x : ga.data()) x += g[0];
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).size())); }

/// Mean squared difference against a constant target.
inline Var mse(Var a, const Tensor& target) {
  const Tensor& av = val(a);
  require_same(av, target, "mse");
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - target[i]) * (av[i] - target[i]);
  return a.tape->record(Tensor::scalar(s / n), {a}, [a, target, n](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    const Tensor& av = t.value(a);
    const double c = 2.0 * g[0] / n;
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += c * (av[i] - target[i]);
  });
}

/// Mean squared difference between two tape values.
inline Var mse(Var a, Var b) {
  Var d = sub(a, b);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// Parameter binding
// ---------------------------------------------------------------------------

/// Maps parameter tensors (by address) onto tape variables so each parameter
/// is bound once per tape. Trainable bindings become gradient leaves.
class ParamBinding {
 public:
  ParamBinding(Tape& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

  Var operator()(const Tensor& p) {
    auto it = vars_.find(&p);
    if (it != vars_.end()) return it->second;
    Var v = trainable_ ? tape_->leaf(p) : tape_->constant(p);
    vars_.emplace(&p, v);
    return v;
  }

  /// Gradient for p after backward; zeros when p was never reached.
  Tensor grad(const Tensor& p) const {
    auto it = vars_.find(&p);
    if (it == vars_.end() || !tape_->has_grad(it->second)) return Tensor(p.shape());
    return tape_->grad(it->second);
  }

  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_;
  bool trainable_;
  std::map<const Tensor*, Var> vars_;
};

}  // namespace geoworld::ad
