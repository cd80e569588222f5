#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "tkto/tensor.hpp"

namespace tkto {

// Reverse-mode autodiff over Tensors, tape style: the graph is built per
// forward pass and freed when the root goes out of scope. Gradients
// accumulate additively; the trainer owns zeroing.
struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // lazily sized on first touch
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

  explicit Node(Tensor v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

  Tensor& grad_ref() {
    if (grad.data.empty()) grad = Tensor(value.shape);
    return grad;
  }
  void zero_grad() {
    for (double& g : grad.data) g = 0.0;
  }
};

inline NodePtr make_leaf(Tensor v, bool requires_grad = false) {
  return std::make_shared<Node>(std::move(v), requires_grad);
}
inline NodePtr constant(double v) { return make_leaf(Tensor({1}, {v})); }
inline NodePtr constant(Tensor t) { return make_leaf(std::move(t)); }

namespace detail {

inline bool any_requires(std::initializer_list<NodePtr> ps) {
  for (const auto& p : ps)
    if (p && p->requires_grad) return true;
  return false;
}

// Backward closures are only attached when some parent needs gradients,
// so forwards through frozen models stay cheap.
inline NodePtr make_op(Tensor value, std::initializer_list<NodePtr> parents,
                       std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>(std::move(value));
  if (any_requires(parents)) {
    n->requires_grad = true;
    n->parents.assign(parents.begin(), parents.end());
    n->backward_fn = std::move(bw);
  }
  return n;
}

}  // namespace detail

// ---- elementwise binary (equal shapes, or one operand scalar) ----

template <class Fwd, class BwA, class BwB>
NodePtr binary_ew(const NodePtr& a, const NodePtr& b, const char* name, Fwd fwd, BwA bwa,
                  BwB bwb) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  bool a_scalar = av.is_scalar() && !bv.is_scalar();
  bool b_scalar = bv.is_scalar() && !av.is_scalar();
  if (!a_scalar && !b_scalar) check_same_shape(av, bv, name);
  Tensor out(a_scalar ? bv.shape : av.shape);
  for (size_t i = 0; i < out.size(); ++i) {
    double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
    out[i] = fwd(x, y);
  }
  return detail::make_op(std::move(out), {a, b}, [=](Node& n) {
    const Tensor& av2 = a->value;
    const Tensor& bv2 = b->value;
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (size_t i = 0; i < n.grad.size(); ++i)
        ga[a_scalar ? 0 : i] += n.grad[i] * bwa(av2[a_scalar ? 0 : i], bv2[b_scalar ? 0 : i]);
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (size_t i = 0; i < n.grad.size(); ++i)
        gb[b_scalar ? 0 : i] += n.grad[i] * bwb(av2[a_scalar ? 0 : i], bv2[b_scalar ? 0 : i]);
    }
  });
}

template <class Fwd, class Bw>
NodePtr unary_ew(const NodePtr& a, Fwd fwd, Bw bw) {
  Tensor out(a->value.shape);
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a->value[i]);
  auto n = detail::make_op(std::move(out), {a}, [=](Node& nn) {
    Tensor& ga = a->grad_ref();
    for (size_t i = 0; i < nn.grad.size(); ++i) ga[i] += nn.grad[i] * bw(a->value[i], nn.value[i]);
  });
  return n;
}

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
  return binary_ew(a, b, "add", [](double x, double y) { return x + y; },
                   [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
inline NodePtr sub(const NodePtr& a, const NodePtr& b) {
  return binary_ew(a, b, "sub", [](double x, double y) { return x - y; },
                   [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
  return binary_ew(a, b, "mul", [](double x, double y) { return x * y; },
                   [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline double sigmoid_val(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline NodePtr negate(const NodePtr& a) {
  return unary_ew(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline NodePtr exp(const NodePtr& a) {
  return unary_ew(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline NodePtr log(const NodePtr& a) {
  return unary_ew(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline NodePtr sigmoid(const NodePtr& a) {
  return unary_ew(a, [](double x) { return sigmoid_val(x); },
                  [](double, double y) { return y * (1.0 - y); });
}
inline NodePtr relu(const NodePtr& a) {
  return unary_ew(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}
inline NodePtr scale(const NodePtr& a, double c) {
  return unary_ew(a, [=](double x) { return c * x; }, [=](double, double) { return c; });
}
inline NodePtr add_const(const NodePtr& a, double c) {
  return unary_ew(a, [=](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// Saturated values get zero gradient, including exact lo/hi.
inline NodePtr clamp(const NodePtr& a, double lo, double hi) {
  if (lo > hi) throw config_error("clamp: lo > hi");
  return unary_ew(a, [=](double x) { return std::min(std::max(x, lo), hi); },
                  [=](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline NodePtr detach(const NodePtr& a) { return make_leaf(a->value, false); }

// ---- matrix ops (2-D) ----

inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
    throw std::runtime_error("matmul: dimension mismatch " + A.shape_str() + " vs " +
                             B.shape_str());
  int M = A.shape[0], K = A.shape[1], N = B.shape[1];
  Tensor out({M, N});
  for (int i = 0; i < M; ++i) {
    const double* arow = &A.data[static_cast<size_t>(i) * K];
    double* orow = &out.data[static_cast<size_t>(i) * N];
    for (int k = 0; k < K; ++k) {
      double av = arow[k];
      const double* brow = &B.data[static_cast<size_t>(k) * N];
      for (int j = 0; j < N; ++j) orow[j] += av * brow[j];
    }
  }
  return detail::make_op(std::move(out), {a, b}, [=](Node& n) {
    const Tensor& A2 = a->value;
    const Tensor& B2 = b->value;
    int M2 = A2.shape[0], K2 = A2.shape[1], N2 = B2.shape[1];
    if (a->requires_grad) {  // dA = G B^T
      Tensor& ga = a->grad_ref();
      for (int i = 0; i < M2; ++i)
        for (int k = 0; k < K2; ++k) {
          double s = 0.0;
          const double* grow = &n.grad.data[static_cast<size_t>(i) * N2];
          const double* brow = &B2.data[static_cast<size_t>(k) * N2];
          for (int j = 0; j < N2; ++j) s += grow[j] * brow[j];
          ga.data[static_cast<size_t>(i) * K2 + k] += s;
        }
    }
    if (b->requires_grad) {  // dB = A^T G
      Tensor& gb = b->grad_ref();
      for (int k = 0; k < K2; ++k) {
        const double* acol_base = &A2.data[0];
        for (int i = 0; i < M2; ++i) {
          double av = acol_base[static_cast<size_t>(i) * K2 + k];
          if (av == 0.0) continue;
          const double* grow = &n.grad.data[static_cast<size_t>(i) * N2];
          double* gbrow = &gb.data[static_cast<size_t>(k) * N2];
          for (int j = 0; j < N2; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

inline NodePtr transpose(const NodePtr& a) {
  const Tensor& A = a->value;
  if (A.shape.size() != 2) throw std::runtime_error("transpose: needs 2-D tensor");
  int M = A.shape[0], N = A.shape[1];
  Tensor out({N, M});
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out.at(j, i) = A.at(i, j);
  return detail::make_op(std::move(out), {a}, [=](Node& n) {
    Tensor& ga = a->grad_ref();
    int M2 = a->value.shape[0], N2 = a->value.shape[1];
    for (int i = 0; i < M2; ++i)
      for (int j = 0; j < N2; ++j) ga.at(i, j) += n.grad.at(j, i);
  });
}

// Numerically stable row-wise log-softmax (max subtraction). For 1-D input
// axis must be 0; for 2-D input axis must be 1.
inline NodePtr log_softmax(const NodePtr& a, int axis) {
  const Tensor& A = a->value;
  int R, C;
  if (A.shape.size() == 1) {
    if (axis != 0) throw std::runtime_error("log_softmax: bad axis for 1-D input");
    R = 1;
    C = A.shape[0];
  } else if (A.shape.size() == 2) {
    if (axis != 1) throw std::runtime_error("log_softmax: only row-wise (axis=1) supported");
    R = A.shape[0];
    C = A.shape[1];
  } else {
    throw std::runtime_error("log_softmax: needs 1-D or 2-D tensor");
  }
  Tensor out(A.shape);
  for (int i = 0; i < R; ++i) {
    const double* x = &A.data[static_cast<size_t>(i) * C];
    double* y = &out.data[static_cast<size_t>(i) * C];
    double mx = x[0];
    for (int j = 1; j < C; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < C; ++j) s += std::exp(x[j] - mx);
    double lse = mx + std::log(s);
    for (int j = 0; j < C; ++j) y[j] = x[j] - lse;
  }
  return detail::make_op(std::move(out), {a}, [=](Node& n) {
    Tensor& ga = a->grad_ref();
    for (int i = 0; i < R; ++i) {
      const double* y = &n.value.data[static_cast<size_t>(i) * C];
      const double* g = &n.grad.data[static_cast<size_t>(i) * C];
      double* gx = &ga.data[static_cast<size_t>(i) * C];
      double gsum = 0.0;
      for (int j = 0; j < C; ++j) gsum += g[j];
      for (int j = 0; j < C; ++j) gx[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

inline NodePtr softmax(const NodePtr& a, int axis) { return exp(log_softmax(a, axis)); }

// ---- reductions / indexing ----

inline NodePtr sum(const NodePtr& a) {
  double s = std::accumulate(a->value.data.begin(), a->value.data.end(), 0.0);
  return detail::make_op(Tensor({1}, {s}), {a}, [=](Node& n) {
    Tensor& ga = a->grad_ref();
    for (double& g : ga.data) g += n.grad[0];
  });
}

inline NodePtr mean(const NodePtr& a) { return scale(sum(a), 1.0 / a->value.size()); }

// Embedding-style row gather with scatter-add backward.
inline NodePtr gather_rows(const NodePtr& a, const std::vector<int>& idx) {
  const Tensor& A = a->value;
  if (A.shape.size() != 2) throw std::runtime_error("gather_rows: needs 2-D tensor");
  int C = A.shape[1];
  Tensor out({static_cast<int>(idx.size()), C});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= A.shape[0])
      throw std::runtime_error("gather_rows: index out of range");
    std::copy_n(&A.data[static_cast<size_t>(idx[i]) * C], C, &out.data[i * C]);
  }
  return detail::make_op(std::move(out), {a}, [=](Node& n) {
    Tensor& ga = a->grad_ref();
    int C2 = a->value.shape[1];
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < C2; ++j) ga.data[static_cast<size_t>(idx[i]) * C2 + j] +=
          n.grad.data[i * C2 + j];
  });
}

// Picks entries (rows[i], cols[i]) into a 1-D tensor.
inline NodePtr gather_entries(const NodePtr& a, const std::vector<int>& rows,
                              const std::vector<int>& cols) {
  const Tensor& A = a->value;
  if (rows.size() != cols.size()) throw std::runtime_error("gather_entries: index size mismatch");
  Tensor out({static_cast<int>(rows.size())});
  for (size_t i = 0; i < rows.size(); ++i) out[i] = A.at(rows[i], cols[i]);
  return detail::make_op(std::move(out), {a}, [=](Node& n) {
    Tensor& ga = a->grad_ref();
    int C = a->value.cols();
    for (size_t i = 0; i < rows.size(); ++i)
      ga.data[static_cast<size_t>(rows[i]) * C + cols[i]] += n.grad[i];
  });
}

inline NodePtr slice_rows(const NodePtr& a, int r0, int r1) {
  const Tensor& A = a->value;
  int C = A.shape[1];
  Tensor out({r1 - r0, C});
  std::copy_n(&A.data[static_cast<size_t>(r0) * C], static_cast<size_t>(r1 - r0) * C,
              out.data.begin());
  return detail::make_op(std::move(out), {a}, [=](Node& n) {
    Tensor& ga = a->grad_ref();
    int C2 = a->value.shape[1];
    for (size_t i = 0; i < n.grad.size(); ++i) ga.data[static_cast<size_t>(r0) * C2 + i] +=
        n.grad.data[i];
  });
}

inline NodePtr slice_cols(const NodePtr& a, int c0, int c1) {
  const Tensor& A = a->value;
  int R = A.shape[0], C = A.shape[1], W = c1 - c0;
  Tensor out({R, W});
  for (int i = 0; i < R; ++i)
    std::copy_n(&A.data[static_cast<size_t>(i) * C + c0], W, &out.data[static_cast<size_t>(i) * W]);
  return detail::make_op(std::move(out), {a}, [=](Node& n) {
    Tensor& ga = a->grad_ref();
    int R2 = a->value.shape[0], C2 = a->value.shape[1], W2 = c1 - c0;
    for (int i = 0; i < R2; ++i)
      for (int j = 0; j < W2; ++j) ga.data[static_cast<size_t>(i) * C2 + c0 + j] +=
          n.grad.data[static_cast<size_t>(i) * W2 + j];
  });
}

inline NodePtr concat_cols(const std::vector<NodePtr>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_cols: empty input");
  int R = parts[0]->value.shape[0], C = 0;
  for (const auto& p : parts) {
    if (p->value.shape[0] != R) throw std::runtime_error("concat_cols: row mismatch");
    C += p->value.shape[1];
  }
  Tensor out({R, C});
  int off = 0;
  for (const auto& p : parts) {
    int W = p->value.shape[1];
    for (int i = 0; i < R; ++i)
      std::copy_n(&p->value.data[static_cast<size_t>(i) * W], W,
                  &out.data[static_cast<size_t>(i) * C + off]);
    off += W;
  }
  auto n = std::make_shared<Node>(std::move(out));
  bool rg = false;
  for (const auto& p : parts) rg = rg || p->requires_grad;
  if (rg) {
    n->requires_grad = true;
    n->parents = parts;
    n->backward_fn = [parts, R, C](Node& nn) {
      int off2 = 0;
      for (const auto& p : parts) {
        int W = p->value.shape[1];
        if (p->requires_grad) {
          Tensor& gp = p->grad_ref();
          for (int i = 0; i < R; ++i)
            for (int j = 0; j < W; ++j)
              gp.data[static_cast<size_t>(i) * W + j] +=
                  nn.grad.data[static_cast<size_t>(i) * C + off2 + j];
        }
        off2 += W;
      }
    };
  }
  return n;
}

// Row-broadcast bias add: a is (R,C), b is 1-D of length C.
inline NodePtr add_bias(const NodePtr& a, const NodePtr& b) {
  const Tensor& A = a->value;
  const Tensor& B = b->value;
  if (A.shape.size() != 2 || B.shape.size() != 1 || A.shape[1] != B.shape[0])
    throw std::runtime_error("add_bias: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
  int R = A.shape[0], C = A.shape[1];
  Tensor out(A.shape);
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < C; ++j) out.at(i, j) = A.at(i, j) + B[j];
  return detail::make_op(std::move(out), {a, b}, [=](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = a->grad_ref();
      for (size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->grad_ref();
      for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) gb[j] += n.grad.at(i, j);
    }
  });
}

// Row-wise layer norm with affine parameters (gamma, beta are 1-D length C).
inline NodePtr layer_norm(const NodePtr& a, const NodePtr& gamma, const NodePtr& beta,
                          double eps = 1e-5) {
  const Tensor& A = a->value;
  int R = A.rows(), C = A.cols();
  Tensor out(A.shape);
  auto xhat_store = std::make_shared<Tensor>(A.shape);
  auto rstd_store = std::make_shared<std::vector<double>>(R);
  for (int i = 0; i < R; ++i) {
    const double* x = &A.data[static_cast<size_t>(i) * C];
    double m = 0.0;
    for (int j = 0; j < C; ++j) m += x[j];
    m /= C;
    double v = 0.0;
    for (int j = 0; j < C; ++j) v += (x[j] - m) * (x[j] - m);
    v /= C;
    double rstd = 1.0 / std::sqrt(v + eps);
    (*rstd_store)[i] = rstd;
    for (int j = 0; j < C; ++j) {
      double xh = (x[j] - m) * rstd;
      xhat_store->data[static_cast<size_t>(i) * C + j] = xh;
      out.data[static_cast<size_t>(i) * C + j] = gamma->value[j] * xh + beta->value[j];
    }
  }
  return detail::make_op(std::move(out), {a, gamma, beta}, [=](Node& n) {
    for (int i = 0; i < R; ++i) {
      const double* g = &n.grad.data[static_cast<size_t>(i) * C];
      const double* xh = &xhat_store->data[static_cast<size_t>(i) * C];
      if (gamma->requires_grad) {
        Tensor& gg = gamma->grad_ref();
        for (int j = 0; j < C; ++j) gg[j] += g[j] * xh[j];
      }
      if (beta->requires_grad) {
        Tensor& gb = beta->grad_ref();
        for (int j = 0; j < C; ++j) gb[j] += g[j];
      }
      if (a->requires_grad) {
        Tensor& ga = a->grad_ref();
        double rstd = (*rstd_store)[i];
        double m_dxh = 0.0, m_dxh_xh = 0.0;
        std::vector<double> dxh(C);
        for (int j = 0; j < C; ++j) {
          dxh[j] = g[j] * gamma->value[j];
          m_dxh += dxh[j];
          m_dxh_xh += dxh[j] * xh[j];
        }
        m_dxh /= C;
        m_dxh_xh /= C;
        for (int j = 0; j < C; ++j)
          ga.data[static_cast<size_t>(i) * C + j] += rstd * (dxh[j] - m_dxh - xh[j] * m_dxh_xh);
      }
    }
  });
}

// ---- backward pass ----

inline void backward(const NodePtr& loss) {
  if (!loss->value.is_scalar()) throw std::runtime_error("backward: loss must be scalar");
  if (!loss->requires_grad) return;
  // topo order by iterative DFS
  std::vector<Node*> topo;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(n);
      stack.pop_back();
    }
  }
  loss->grad_ref()[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->grad_ref();  // ensure sized even if untouched
      n->backward_fn(*n);
    }
  }
}

}  // namespace tkto
