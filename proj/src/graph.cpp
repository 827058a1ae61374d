#include "vivi/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

#include "vivi/kernels.hpp"

namespace vivi::ad {

namespace {

template <typename T>
void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw ShapeError(strcat_msg("shape mismatch in ", op, ": ", shape_str(a), " vs ",
                                shape_str(b)));
  }
}

void check_2d(const char* op, const Shape& s) {
  if (s.size() != 2) {
    throw ShapeError(strcat_msg(op, " expects a 2-d input, got ", shape_str(s)));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

template <typename T>
int Graph<T>::add_node(Shape shape, std::vector<T> val, bool needs_grad, const char* op,
                       std::vector<int> parents, std::function<void(Graph&, Node&)> back) {
  (void)parents;
  if (consumed_) {
    throw Error("graph tape already consumed by backward; build a new graph");
  }
  if (static_cast<int64_t>(val.size()) != vivi::numel(shape)) {
    throw ShapeError(strcat_msg("internal: value size ", val.size(), " does not match shape ",
                                shape_str(shape), " in ", op));
  }
  if (nan_checks_ && !val.empty() && kern::has_nonfinite(val.data(), val.size())) {
    throw NumericError(strcat_msg("non-finite values produced by ", op));
  }
  Node n;
  n.shape = std::move(shape);
  n.val = std::move(val);
  n.needs_grad = needs_grad;
  n.op = op;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
Var<T> Graph<T>::input(Array<T> value) {
  int id = add_node(std::move(value.shape), std::move(value.data), false, "input", {}, {});
  return {this, id};
}

template <typename T>
Var<T> Graph<T>::variable(Array<T> value) {
  int id = add_node(std::move(value.shape), std::move(value.data), true, "variable", {}, {});
  return {this, id};
}

template <typename T>
Var<T> Graph<T>::param(Parameter<T>& p) {
  if (p.grad.size() != p.value.data.size()) p.grad.assign(p.value.data.size(), T(0));
  int id = add_node(p.value.shape, p.value.data, true, "param", {}, {});
  nodes_[static_cast<size_t>(id)].bound = &p;
  bound_params_.push_back(&p);
  return {this, id};
}

template <typename T>
Array<T> Graph<T>::value(Var<T> v) const {
  const Node& n = node(v.id);
  return Array<T>(n.shape, n.val);
}

template <typename T>
const std::vector<T>& Graph<T>::data(Var<T> v) const {
  return node(v.id).val;
}

template <typename T>
const Shape& Graph<T>::shape(Var<T> v) const {
  return node(v.id).shape;
}

template <typename T>
const std::vector<T>& Graph<T>::grad(Var<T> v) const {
  const Node& n = node(v.id);
  if (!n.needs_grad) throw Error(strcat_msg("grad requested for non-tracked node ", n.op));
  if (n.grad.empty()) throw Error("grad requested before backward()");
  return n.grad;
}

template <typename T>
std::vector<T>& Graph<T>::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad.assign(n.val.size(), T(0));
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> output) {
  if (output.g != this) throw Error("backward: output belongs to a different graph");
  if (consumed_) throw Error("backward: tape already consumed; rebuild the forward pass");
  Node& out = node(output.id);
  if (out.val.size() != 1) {
    throw ShapeError(strcat_msg("backward requires a scalar output, got shape ",
                                shape_str(out.shape)));
  }
  if (!out.needs_grad) {
    // Constant output: all grads are zero; still mark the tape consumed.
    consumed_ = true;
  } else {
    grad_buf(output.id).front() = T(1);
    for (int id = output.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.needs_grad || n.grad.empty() || !n.back) continue;
      n.back(*this, n);
    }
    consumed_ = true;
  }
  // Leaf contract: tracked leaves always expose a grad after backward, and
  // bound parameters accumulate theirs.
  for (auto& n : nodes_) {
    if (n.needs_grad && !n.back && n.grad.empty()) n.grad.assign(n.val.size(), T(0));
    if (n.bound && !n.grad.empty()) {
      kern::axpy(T(1), n.grad.data(), n.bound->grad.data(), n.grad.size());
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  const auto& nb = g.node(b.id);
  check_same_shape<T>("add", na.shape, nb.shape);
  std::vector<T> out(na.val.size());
  kern::add(na.val.data(), nb.val.data(), out.data(), out.size());
  bool ng = na.needs_grad || nb.needs_grad;
  int id = g.add_node(na.shape, std::move(out), ng, "add", {a.id, b.id},
                      [pa = a.id, pb = b.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (gg.node(pa).needs_grad)
                          kern::axpy(T(1), self.grad.data(), gg.grad_buf(pa).data(),
                                     self.grad.size());
                        if (gg.node(pb).needs_grad)
                          kern::axpy(T(1), self.grad.data(), gg.grad_buf(pb).data(),
                                     self.grad.size());
                      });
  return {&g, id};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  const auto& nb = g.node(b.id);
  check_same_shape<T>("sub", na.shape, nb.shape);
  std::vector<T> out(na.val.size());
  kern::sub(na.val.data(), nb.val.data(), out.data(), out.size());
  bool ng = na.needs_grad || nb.needs_grad;
  int id = g.add_node(na.shape, std::move(out), ng, "sub", {a.id, b.id},
                      [pa = a.id, pb = b.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (gg.node(pa).needs_grad)
                          kern::axpy(T(1), self.grad.data(), gg.grad_buf(pa).data(),
                                     self.grad.size());
                        if (gg.node(pb).needs_grad)
                          kern::axpy(T(-1), self.grad.data(), gg.grad_buf(pb).data(),
                                     self.grad.size());
                      });
  return {&g, id};
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  const auto& nb = g.node(b.id);
  check_same_shape<T>("mul", na.shape, nb.shape);
  std::vector<T> out(na.val.size());
  kern::mul(na.val.data(), nb.val.data(), out.data(), out.size());
  bool ng = na.needs_grad || nb.needs_grad;
  int id = g.add_node(na.shape, std::move(out), ng, "mul", {a.id, b.id},
                      [pa = a.id, pb = b.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        const auto& va = gg.node(pa).val;
                        const auto& vb = gg.node(pb).val;
                        if (gg.node(pa).needs_grad) {
                          auto& ga = gg.grad_buf(pa);
                          for (size_t i = 0; i < self.grad.size(); ++i)
                            ga[i] += self.grad[i] * vb[i];
                        }
                        if (gg.node(pb).needs_grad) {
                          auto& gb = gg.grad_buf(pb);
                          for (size_t i = 0; i < self.grad.size(); ++i)
                            gb[i] += self.grad[i] * va[i];
                        }
                      });
  return {&g, id};
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  std::vector<T> out = na.val;
  kern::scale(c, out.data(), out.size());
  int id = g.add_node(na.shape, std::move(out), na.needs_grad, "scale", {a.id},
                      [pa = a.id, c](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (gg.node(pa).needs_grad)
                          kern::axpy(c, self.grad.data(), gg.grad_buf(pa).data(),
                                     self.grad.size());
                      });
  return {&g, id};
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  std::vector<T> out = na.val;
  for (auto& v : out) v += c;
  int id = g.add_node(na.shape, std::move(out), na.needs_grad, "add_scalar", {a.id},
                      [pa = a.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (gg.node(pa).needs_grad)
                          kern::axpy(T(1), self.grad.data(), gg.grad_buf(pa).data(),
                                     self.grad.size());
                      });
  return {&g, id};
}

template <typename T>
Var<T> relu(Var<T> a) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  std::vector<T> out(na.val.size());
  kern::relu(na.val.data(), out.data(), out.size());
  int id = g.add_node(na.shape, std::move(out), na.needs_grad, "relu", {a.id},
                      [pa = a.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        kern::relu_grad(gg.node(pa).val.data(), self.grad.data(),
                                        gg.grad_buf(pa).data(), self.grad.size());
                      });
  return {&g, id};
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  std::vector<T> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const T x = na.val[i];
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                       : std::exp(x) / (T(1) + std::exp(x));
  }
  int id = g.add_node(na.shape, std::move(out), na.needs_grad, "sigmoid", {a.id},
                      [pa = a.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        auto& ga = gg.grad_buf(pa);
                        for (size_t i = 0; i < self.grad.size(); ++i) {
                          const T y = self.val[i];
                          ga[i] += self.grad[i] * y * (T(1) - y);
                        }
                      });
  return {&g, id};
}

template <typename T>
Var<T> tanh_act(Var<T> a) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  std::vector<T> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(na.val[i]);
  int id = g.add_node(na.shape, std::move(out), na.needs_grad, "tanh", {a.id},
                      [pa = a.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        auto& ga = gg.grad_buf(pa);
                        for (size_t i = 0; i < self.grad.size(); ++i)
                          ga[i] += self.grad[i] * (T(1) - self.val[i] * self.val[i]);
                      });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  if (vivi::numel(s) != static_cast<int64_t>(na.val.size())) {
    throw ShapeError(strcat_msg("reshape: cannot view ", shape_str(na.shape), " as ",
                                shape_str(s)));
  }
  std::vector<T> out = na.val;
  int id = g.add_node(std::move(s), std::move(out), na.needs_grad, "reshape", {a.id},
                      [pa = a.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (gg.node(pa).needs_grad)
                          kern::axpy(T(1), self.grad.data(), gg.grad_buf(pa).data(),
                                     self.grad.size());
                      });
  return {&g, id};
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Graph<T>& g = *xs.front().g;
  int64_t rows = 0, cols = 0;
  bool ng = false;
  for (const auto& x : xs) {
    const auto& n = g.node(x.id);
    check_2d("concat", n.shape);
    if (rows == 0) rows = n.shape[0];
    if (n.shape[0] != rows) {
      throw ShapeError(strcat_msg("shape mismatch in concat: ", shape_str(n.shape),
                                  " vs (", rows, ",*)"));
    }
    cols += n.shape[1];
    ng = ng || n.needs_grad;
  }
  std::vector<T> out(static_cast<size_t>(rows * cols));
  std::vector<int> ids;
  std::vector<int64_t> widths;
  int64_t off = 0;
  for (const auto& x : xs) {
    const auto& n = g.node(x.id);
    const int64_t w = n.shape[1];
    for (int64_t r = 0; r < rows; ++r) {
      std::memcpy(out.data() + r * cols + off, n.val.data() + r * w,
                  static_cast<size_t>(w) * sizeof(T));
    }
    ids.push_back(x.id);
    widths.push_back(w);
    off += w;
  }
  int id = g.add_node({rows, cols}, std::move(out), ng, "concat", ids,
                      [ids, widths, rows, cols](Graph<T>& gg, typename Graph<T>::Node& self) {
                        int64_t o = 0;
                        for (size_t i = 0; i < ids.size(); ++i) {
                          const int64_t w = widths[i];
                          if (gg.node(ids[i]).needs_grad) {
                            auto& gp = gg.grad_buf(ids[i]);
                            for (int64_t r = 0; r < rows; ++r)
                              kern::axpy(T(1), self.grad.data() + r * cols + o,
                                         gp.data() + r * w, static_cast<size_t>(w));
                          }
                          o += w;
                        }
                      });
  return {&g, id};
}

template <typename T>
Var<T> slice_cols(Var<T> a, int64_t lo, int64_t hi) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  check_2d("slice_cols", na.shape);
  const int64_t rows = na.shape[0], cols = na.shape[1];
  if (lo < 0 || hi > cols || lo >= hi) {
    throw ShapeError(strcat_msg("slice_cols: range [", lo, ",", hi, ") invalid for ",
                                shape_str(na.shape)));
  }
  const int64_t w = hi - lo;
  std::vector<T> out(static_cast<size_t>(rows * w));
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * w, na.val.data() + r * cols + lo,
                static_cast<size_t>(w) * sizeof(T));
  int id = g.add_node({rows, w}, std::move(out), na.needs_grad, "slice_cols", {a.id},
                      [pa = a.id, lo, rows, cols, w](Graph<T>& gg,
                                                     typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        auto& ga = gg.grad_buf(pa);
                        for (int64_t r = 0; r < rows; ++r)
                          kern::axpy(T(1), self.grad.data() + r * w,
                                     ga.data() + r * cols + lo, static_cast<size_t>(w));
                      });
  return {&g, id};
}

template <typename T>
Var<T> take_rows(Var<T> a, int64_t lo, int64_t hi) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  if (na.shape.empty()) throw ShapeError("take_rows: scalar input");
  const int64_t rows = na.shape[0];
  if (lo < 0 || hi > rows || lo >= hi) {
    throw ShapeError(strcat_msg("take_rows: range [", lo, ",", hi, ") invalid for ",
                                shape_str(na.shape)));
  }
  const int64_t rsz = static_cast<int64_t>(na.val.size()) / rows;
  Shape s = na.shape;
  s[0] = hi - lo;
  std::vector<T> out(static_cast<size_t>((hi - lo) * rsz));
  std::memcpy(out.data(), na.val.data() + lo * rsz, out.size() * sizeof(T));
  int id = g.add_node(std::move(s), std::move(out), na.needs_grad, "take_rows", {a.id},
                      [pa = a.id, lo, rsz](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        kern::axpy(T(1), self.grad.data(),
                                   gg.grad_buf(pa).data() + lo * rsz, self.grad.size());
                      });
  return {&g, id};
}

template <typename T>
Var<T> gather(Var<T> a, std::vector<int64_t> flat_idx) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  const int64_t n = static_cast<int64_t>(na.val.size());
  std::vector<T> out(flat_idx.size());
  for (size_t i = 0; i < flat_idx.size(); ++i) {
    if (flat_idx[i] < 0 || flat_idx[i] >= n) {
      throw ShapeError(strcat_msg("gather: index ", flat_idx[i], " out of range for ",
                                  shape_str(na.shape)));
    }
    out[i] = na.val[static_cast<size_t>(flat_idx[i])];
  }
  const int64_t count = static_cast<int64_t>(flat_idx.size());
  int id = g.add_node({count}, std::move(out), na.needs_grad,
                      "gather", {a.id},
                      [pa = a.id, idx = std::move(flat_idx)](Graph<T>& gg,
                                                             typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        auto& ga = gg.grad_buf(pa);
                        for (size_t i = 0; i < idx.size(); ++i)
                          ga[static_cast<size_t>(idx[i])] += self.grad[i];
                      });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b) {
  Graph<T>& g = *x.g;
  const auto& nx = g.node(x.id);
  const auto& nw = g.node(w.id);
  check_2d("linear", nx.shape);
  check_2d("linear", nw.shape);
  const int64_t B = nx.shape[0], D = nx.shape[1], N = nw.shape[1];
  if (nw.shape[0] != D) {
    throw ShapeError(strcat_msg("shape mismatch in linear: ", shape_str(nx.shape), " x ",
                                shape_str(nw.shape)));
  }
  bool ng = nx.needs_grad || nw.needs_grad;
  std::vector<T> out(static_cast<size_t>(B * N));
  kern::gemm_nn(static_cast<size_t>(B), static_cast<size_t>(N), static_cast<size_t>(D),
                nx.val.data(), nw.val.data(), out.data(), false);
  int bias_id = -1;
  if (b) {
    const auto& nb = g.node(b->id);
    if (nb.shape != Shape{N}) {
      throw ShapeError(strcat_msg("shape mismatch in linear bias: ", shape_str(nb.shape),
                                  " vs (", N, ")"));
    }
    kern::add_bias(out.data(), nb.val.data(), static_cast<size_t>(B), static_cast<size_t>(N));
    ng = ng || nb.needs_grad;
    bias_id = b->id;
  }
  int id = g.add_node({B, N}, std::move(out), ng, "linear", {x.id, w.id},
                      [px = x.id, pw = w.id, bias_id, B, D, N](Graph<T>& gg,
                                                               typename Graph<T>::Node& self) {
                        const auto& vx = gg.node(px).val;
                        const auto& vw = gg.node(pw).val;
                        if (gg.node(px).needs_grad) {
                          kern::gemm_nt(static_cast<size_t>(B), static_cast<size_t>(D),
                                        static_cast<size_t>(N), self.grad.data(), vw.data(),
                                        gg.grad_buf(px).data(), true);
                        }
                        if (gg.node(pw).needs_grad) {
                          kern::gemm_tn(static_cast<size_t>(D), static_cast<size_t>(N),
                                        static_cast<size_t>(B), vx.data(), self.grad.data(),
                                        gg.grad_buf(pw).data(), true);
                        }
                        if (bias_id >= 0 && gg.node(bias_id).needs_grad) {
                          auto& gb = gg.grad_buf(bias_id);
                          for (int64_t r = 0; r < B; ++r)
                            kern::axpy(T(1), self.grad.data() + r * N, gb.data(),
                                       static_cast<size_t>(N));
                        }
                      });
  return {&g, id};
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  const auto& nb = g.node(b.id);
  check_2d("matmul_nt", na.shape);
  check_2d("matmul_nt", nb.shape);
  const int64_t M = na.shape[0], K = na.shape[1], N = nb.shape[0];
  if (nb.shape[1] != K) {
    throw ShapeError(strcat_msg("shape mismatch in matmul_nt: ", shape_str(na.shape), " x ",
                                shape_str(nb.shape)));
  }
  std::vector<T> out(static_cast<size_t>(M * N));
  kern::gemm_nt(static_cast<size_t>(M), static_cast<size_t>(N), static_cast<size_t>(K),
                na.val.data(), nb.val.data(), out.data(), false);
  bool ng = na.needs_grad || nb.needs_grad;
  int id = g.add_node({M, N}, std::move(out), ng, "matmul_nt", {a.id, b.id},
                      [pa = a.id, pb = b.id, M, N, K](Graph<T>& gg,
                                                      typename Graph<T>::Node& self) {
                        if (gg.node(pa).needs_grad) {
                          kern::gemm_nn(static_cast<size_t>(M), static_cast<size_t>(K),
                                        static_cast<size_t>(N), self.grad.data(),
                                        gg.node(pb).val.data(), gg.grad_buf(pa).data(), true);
                        }
                        if (gg.node(pb).needs_grad) {
                          kern::gemm_tn(static_cast<size_t>(N), static_cast<size_t>(K),
                                        static_cast<size_t>(M), self.grad.data(),
                                        gg.node(pa).val.data(), gg.grad_buf(pb).data(), true);
                        }
                      });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int64_t B, H, W, C, Cout, KH, KW;
  int64_t OH, OW, pad_top, pad_left;
  int stride;
  int64_t patch() const { return KH * KW * C; }
  int64_t rows() const { return B * OH * OW; }
};

inline ConvDims conv_dims(const Shape& xs, const Shape& ks, int stride, Padding pad) {
  if (xs.size() != 4) {
    throw ShapeError(strcat_msg("conv2d expects NHWC input, got ", shape_str(xs)));
  }
  if (ks.size() != 4) {
    throw ShapeError(strcat_msg("conv2d expects (Cout,KH,KW,Cin) kernel, got ", shape_str(ks)));
  }
  ConvDims d{};
  d.B = xs[0]; d.H = xs[1]; d.W = xs[2]; d.C = xs[3];
  d.Cout = ks[0]; d.KH = ks[1]; d.KW = ks[2];
  if (ks[3] != d.C) {
    throw ShapeError(strcat_msg("shape mismatch in conv2d: input ", shape_str(xs),
                                " vs kernel ", shape_str(ks)));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  d.stride = stride;
  if (pad == Padding::same) {
    d.OH = (d.H + stride - 1) / stride;
    d.OW = (d.W + stride - 1) / stride;
    const int64_t ph = std::max<int64_t>((d.OH - 1) * stride + d.KH - d.H, 0);
    const int64_t pw = std::max<int64_t>((d.OW - 1) * stride + d.KW - d.W, 0);
    d.pad_top = ph / 2;
    d.pad_left = pw / 2;
  } else {
    if (d.H < d.KH || d.W < d.KW) {
      throw ShapeError(strcat_msg("conv2d valid padding: input ", shape_str(xs),
                                  " smaller than kernel ", shape_str(ks)));
    }
    d.OH = (d.H - d.KH) / stride + 1;
    d.OW = (d.W - d.KW) / stride + 1;
    d.pad_top = 0;
    d.pad_left = 0;
  }
  return d;
}

template <typename T>
void im2col(const ConvDims& d, const T* x, T* col) {
  const int64_t P = d.patch();
  const int64_t rowC = d.KW * d.C;
  for (int64_t b = 0; b < d.B; ++b) {
    const T* img = x + b * d.H * d.W * d.C;
    for (int64_t oh = 0; oh < d.OH; ++oh) {
      for (int64_t ow = 0; ow < d.OW; ++ow) {
        T* dst = col + ((b * d.OH + oh) * d.OW + ow) * P;
        std::memset(dst, 0, static_cast<size_t>(P) * sizeof(T));
        const int64_t ih0 = oh * d.stride - d.pad_top;
        const int64_t iw0 = ow * d.stride - d.pad_left;
        for (int64_t kh = 0; kh < d.KH; ++kh) {
          const int64_t ih = ih0 + kh;
          if (ih < 0 || ih >= d.H) continue;
          const int64_t kw_lo = std::max<int64_t>(0, -iw0);
          const int64_t kw_hi = std::min<int64_t>(d.KW, d.W - iw0);
          if (kw_lo >= kw_hi) continue;
          std::memcpy(dst + kh * rowC + kw_lo * d.C,
                      img + (ih * d.W + iw0 + kw_lo) * d.C,
                      static_cast<size_t>((kw_hi - kw_lo) * d.C) * sizeof(T));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvDims& d, const T* col, T* gx) {
  const int64_t P = d.patch();
  const int64_t rowC = d.KW * d.C;
  for (int64_t b = 0; b < d.B; ++b) {
    T* img = gx + b * d.H * d.W * d.C;
    for (int64_t oh = 0; oh < d.OH; ++oh) {
      for (int64_t ow = 0; ow < d.OW; ++ow) {
        const T* src = col + ((b * d.OH + oh) * d.OW + ow) * P;
        const int64_t ih0 = oh * d.stride - d.pad_top;
        const int64_t iw0 = ow * d.stride - d.pad_left;
        for (int64_t kh = 0; kh < d.KH; ++kh) {
          const int64_t ih = ih0 + kh;
          if (ih < 0 || ih >= d.H) continue;
          const int64_t kw_lo = std::max<int64_t>(0, -iw0);
          const int64_t kw_hi = std::min<int64_t>(d.KW, d.W - iw0);
          if (kw_lo >= kw_hi) continue;
          kern::axpy(T(1), src + kh * rowC + kw_lo * d.C,
                     img + (ih * d.W + iw0 + kw_lo) * d.C,
                     static_cast<size_t>((kw_hi - kw_lo) * d.C));
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, std::optional<Var<T>> bias, int stride, Padding pad) {
  Graph<T>& g = *x.g;
  const auto& nx = g.node(x.id);
  const auto& nk = g.node(kernel.id);
  const ConvDims d = conv_dims(nx.shape, nk.shape, stride, pad);
  const int64_t R = d.rows(), P = d.patch();

  auto col = std::make_shared<std::vector<T>>(static_cast<size_t>(R * P));
  im2col(d, nx.val.data(), col->data());

  std::vector<T> out(static_cast<size_t>(R * d.Cout));
  kern::gemm_nt(static_cast<size_t>(R), static_cast<size_t>(d.Cout), static_cast<size_t>(P),
                col->data(), nk.val.data(), out.data(), false);
  bool ng = nx.needs_grad || nk.needs_grad;
  int bias_id = -1;
  if (bias) {
    const auto& nb = g.node(bias->id);
    if (nb.shape != Shape{d.Cout}) {
      throw ShapeError(strcat_msg("shape mismatch in conv2d bias: ", shape_str(nb.shape),
                                  " vs (", d.Cout, ")"));
    }
    kern::add_bias(out.data(), nb.val.data(), static_cast<size_t>(R),
                   static_cast<size_t>(d.Cout));
    ng = ng || nb.needs_grad;
    bias_id = bias->id;
  }
  int id = g.add_node(
      {d.B, d.OH, d.OW, d.Cout}, std::move(out), ng, "conv2d", {x.id, kernel.id},
      [px = x.id, pk = kernel.id, bias_id, d, col](Graph<T>& gg,
                                                   typename Graph<T>::Node& self) {
        const int64_t R2 = d.rows(), P2 = d.patch();
        if (gg.node(pk).needs_grad) {
          kern::gemm_tn(static_cast<size_t>(d.Cout), static_cast<size_t>(P2),
                        static_cast<size_t>(R2), self.grad.data(), col->data(),
                        gg.grad_buf(pk).data(), true);
        }
        if (gg.node(px).needs_grad) {
          std::vector<T> gcol(static_cast<size_t>(R2 * P2));
          kern::gemm_nn(static_cast<size_t>(R2), static_cast<size_t>(P2),
                        static_cast<size_t>(d.Cout), self.grad.data(),
                        gg.node(pk).val.data(), gcol.data(), false);
          col2im_add(d, gcol.data(), gg.grad_buf(px).data());
        }
        if (bias_id >= 0 && gg.node(bias_id).needs_grad) {
          auto& gb = gg.grad_buf(bias_id);
          for (int64_t r = 0; r < R2; ++r)
            kern::axpy(T(1), self.grad.data() + r * d.Cout, gb.data(),
                       static_cast<size_t>(d.Cout));
        }
      });
  return {&g, id};
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  Graph<T>& g = *x.g;
  const auto& nx = g.node(x.id);
  if (nx.shape.size() != 4) {
    throw ShapeError(strcat_msg("global_avg_pool expects NHWC, got ", shape_str(nx.shape)));
  }
  const int64_t B = nx.shape[0], HW = nx.shape[1] * nx.shape[2], C = nx.shape[3];
  std::vector<T> out(static_cast<size_t>(B * C), T(0));
  for (int64_t b = 0; b < B; ++b) {
    const T* src = nx.val.data() + b * HW * C;
    T* dst = out.data() + b * C;
    for (int64_t i = 0; i < HW; ++i)
      kern::axpy(T(1), src + i * C, dst, static_cast<size_t>(C));
  }
  kern::scale(T(1) / static_cast<T>(HW), out.data(), out.size());
  int id = g.add_node({B, C}, std::move(out), nx.needs_grad, "global_avg_pool", {x.id},
                      [px = x.id, B, HW, C](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(px).needs_grad) return;
                        auto& gx = gg.grad_buf(px);
                        const T inv = T(1) / static_cast<T>(HW);
                        for (int64_t b = 0; b < B; ++b) {
                          const T* gs = self.grad.data() + b * C;
                          T* gd = gx.data() + b * HW * C;
                          for (int64_t i = 0; i < HW; ++i)
                            kern::axpy(inv, gs, gd + i * C, static_cast<size_t>(C));
                        }
                      });
  return {&g, id};
}

template <typename T>
Var<T> pool_rows(Var<T> x, int64_t group) {
  Graph<T>& g = *x.g;
  const auto& nx = g.node(x.id);
  check_2d("pool_rows", nx.shape);
  const int64_t R = nx.shape[0], C = nx.shape[1];
  if (group < 1 || R % group != 0) {
    throw ShapeError(strcat_msg("pool_rows: group ", group, " does not divide rows of ",
                                shape_str(nx.shape)));
  }
  const int64_t G = R / group;
  std::vector<T> out(static_cast<size_t>(G * C), T(0));
  for (int64_t i = 0; i < G; ++i) {
    T* dst = out.data() + i * C;
    for (int64_t j = 0; j < group; ++j)
      kern::axpy(T(1), nx.val.data() + (i * group + j) * C, dst, static_cast<size_t>(C));
  }
  kern::scale(T(1) / static_cast<T>(group), out.data(), out.size());
  int id = g.add_node({G, C}, std::move(out), nx.needs_grad, "pool_rows", {x.id},
                      [px = x.id, G, C, group](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(px).needs_grad) return;
                        auto& gx = gg.grad_buf(px);
                        const T inv = T(1) / static_cast<T>(group);
                        for (int64_t i = 0; i < G; ++i) {
                          const T* gs = self.grad.data() + i * C;
                          for (int64_t j = 0; j < group; ++j)
                            kern::axpy(inv, gs, gx.data() + (i * group + j) * C,
                                       static_cast<size_t>(C));
                        }
                      });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::pair<int64_t, int64_t> rows_cols_channelwise(const char* op, const Shape& s) {
  if (s.size() == 2) return {s[0], s[1]};
  if (s.size() == 4) return {s[0] * s[1] * s[2], s[3]};
  throw ShapeError(strcat_msg(op, " expects (B,C) or (B,H,W,C), got ", shape_str(s)));
}

}  // namespace

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormState<T>& state,
                  bool training, T momentum, T eps) {
  Graph<T>& g = *x.g;
  const auto& nx = g.node(x.id);
  auto [rows, C] = rows_cols_channelwise<T>("batch_norm", nx.shape);
  const auto& ngm = g.node(gamma.id);
  const auto& nbt = g.node(beta.id);
  if (ngm.shape != Shape{C} || nbt.shape != Shape{C}) {
    throw ShapeError(strcat_msg("shape mismatch in batch_norm affine: gamma ",
                                shape_str(ngm.shape), ", beta ", shape_str(nbt.shape),
                                " for C=", C));
  }
  if (static_cast<int64_t>(state.running_mean.size()) != C) {
    throw ShapeError(strcat_msg("batch_norm state has ", state.running_mean.size(),
                                " channels, input has ", C));
  }
  std::vector<T> mean(static_cast<size_t>(C), T(0)), var(static_cast<size_t>(C), T(0));
  if (training) {
    for (int64_t r = 0; r < rows; ++r)
      kern::axpy(T(1), nx.val.data() + r * C, mean.data(), static_cast<size_t>(C));
    kern::scale(T(1) / static_cast<T>(rows), mean.data(), mean.size());
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = nx.val.data() + r * C;
      for (int64_t c = 0; c < C; ++c) {
        const T d = row[c] - mean[static_cast<size_t>(c)];
        var[static_cast<size_t>(c)] += d * d;
      }
    }
    kern::scale(T(1) / static_cast<T>(rows), var.data(), var.size());
    for (int64_t c = 0; c < C; ++c) {
      state.running_mean[c] = momentum * state.running_mean[c] + (T(1) - momentum) * mean[c];
      state.running_var[c] = momentum * state.running_var[c] + (T(1) - momentum) * var[c];
    }
  } else {
    mean.assign(state.running_mean.begin(), state.running_mean.end());
    var.assign(state.running_var.begin(), state.running_var.end());
  }
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c)
    (*invstd)[static_cast<size_t>(c)] = T(1) / std::sqrt(var[static_cast<size_t>(c)] + eps);
  auto xhat = std::make_shared<std::vector<T>>(nx.val.size());
  std::vector<T> out(nx.val.size());
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = nx.val.data() + r * C;
    T* xh = xhat->data() + r * C;
    T* o = out.data() + r * C;
    for (int64_t c = 0; c < C; ++c) {
      xh[c] = (row[c] - mean[static_cast<size_t>(c)]) * (*invstd)[static_cast<size_t>(c)];
      o[c] = ngm.val[static_cast<size_t>(c)] * xh[c] + nbt.val[static_cast<size_t>(c)];
    }
  }
  bool ng = nx.needs_grad || ngm.needs_grad || nbt.needs_grad;
  int id = g.add_node(
      nx.shape, std::move(out), ng, "batch_norm", {x.id, gamma.id, beta.id},
      [px = x.id, pg = gamma.id, pb = beta.id, rows, C, xhat, invstd, training](
          Graph<T>& gg, typename Graph<T>::Node& self) {
        const auto& gmv = gg.node(pg).val;
        // dgamma/dbeta
        if (gg.node(pg).needs_grad || gg.node(pb).needs_grad) {
          std::vector<T> dg(static_cast<size_t>(C), T(0)), db(static_cast<size_t>(C), T(0));
          for (int64_t r = 0; r < rows; ++r) {
            const T* gr = self.grad.data() + r * C;
            const T* xh = xhat->data() + r * C;
            for (int64_t c = 0; c < C; ++c) {
              dg[static_cast<size_t>(c)] += gr[c] * xh[c];
              db[static_cast<size_t>(c)] += gr[c];
            }
          }
          if (gg.node(pg).needs_grad)
            kern::axpy(T(1), dg.data(), gg.grad_buf(pg).data(), dg.size());
          if (gg.node(pb).needs_grad)
            kern::axpy(T(1), db.data(), gg.grad_buf(pb).data(), db.size());
        }
        if (!gg.node(px).needs_grad) return;
        auto& gx = gg.grad_buf(px);
        if (!training) {
          for (int64_t r = 0; r < rows; ++r) {
            const T* gr = self.grad.data() + r * C;
            T* gxr = gx.data() + r * C;
            for (int64_t c = 0; c < C; ++c)
              gxr[c] += gr[c] * gmv[static_cast<size_t>(c)] *
                        (*invstd)[static_cast<size_t>(c)];
          }
          return;
        }
        // training mode: gradient flows through the batch statistics
        std::vector<T> sum_dxhat(static_cast<size_t>(C), T(0));
        std::vector<T> sum_dxhat_xhat(static_cast<size_t>(C), T(0));
        for (int64_t r = 0; r < rows; ++r) {
          const T* gr = self.grad.data() + r * C;
          const T* xh = xhat->data() + r * C;
          for (int64_t c = 0; c < C; ++c) {
            const T dxh = gr[c] * gmv[static_cast<size_t>(c)];
            sum_dxhat[static_cast<size_t>(c)] += dxh;
            sum_dxhat_xhat[static_cast<size_t>(c)] += dxh * xh[c];
          }
        }
        const T invm = T(1) / static_cast<T>(rows);
        for (int64_t r = 0; r < rows; ++r) {
          const T* gr = self.grad.data() + r * C;
          const T* xh = xhat->data() + r * C;
          T* gxr = gx.data() + r * C;
          for (int64_t c = 0; c < C; ++c) {
            const size_t ci = static_cast<size_t>(c);
            const T dxh = gr[c] * gmv[ci];
            gxr[c] += (*invstd)[ci] *
                      (dxh - invm * sum_dxhat[ci] - invm * xh[c] * sum_dxhat_xhat[ci]);
          }
        }
      });
  return {&g, id};
}

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps) {
  Graph<T>& g = *x.g;
  const auto& nx = g.node(x.id);
  int64_t B, HW, C;
  if (nx.shape.size() == 4) {
    B = nx.shape[0]; HW = nx.shape[1] * nx.shape[2]; C = nx.shape[3];
  } else if (nx.shape.size() == 2) {
    B = nx.shape[0]; HW = 1; C = nx.shape[1];
  } else {
    throw ShapeError(strcat_msg("group_norm expects (B,C) or (B,H,W,C), got ",
                                shape_str(nx.shape)));
  }
  if (groups < 1 || C % groups != 0) {
    throw ShapeError(strcat_msg("group_norm: ", groups, " groups do not divide C=", C));
  }
  const auto& ngm = g.node(gamma.id);
  const auto& nbt = g.node(beta.id);
  if (ngm.shape != Shape{C} || nbt.shape != Shape{C}) {
    throw ShapeError(strcat_msg("shape mismatch in group_norm affine: gamma ",
                                shape_str(ngm.shape), ", beta ", shape_str(nbt.shape),
                                " for C=", C));
  }
  const int64_t CG = C / groups;
  const int64_t n_per_group = HW * CG;
  auto xhat = std::make_shared<std::vector<T>>(nx.val.size());
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(B * groups));
  std::vector<T> out(nx.val.size());
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t gi = 0; gi < groups; ++gi) {
      T mean = T(0);
      for (int64_t i = 0; i < HW; ++i) {
        const T* px = nx.val.data() + (b * HW + i) * C + gi * CG;
        for (int64_t c = 0; c < CG; ++c) mean += px[c];
      }
      mean /= static_cast<T>(n_per_group);
      T var = T(0);
      for (int64_t i = 0; i < HW; ++i) {
        const T* px = nx.val.data() + (b * HW + i) * C + gi * CG;
        for (int64_t c = 0; c < CG; ++c) {
          const T d = px[c] - mean;
          var += d * d;
        }
      }
      var /= static_cast<T>(n_per_group);
      const T is = T(1) / std::sqrt(var + eps);
      (*invstd)[static_cast<size_t>(b * groups + gi)] = is;
      for (int64_t i = 0; i < HW; ++i) {
        const int64_t base = (b * HW + i) * C + gi * CG;
        for (int64_t c = 0; c < CG; ++c) {
          const T xh = (nx.val[static_cast<size_t>(base + c)] - mean) * is;
          (*xhat)[static_cast<size_t>(base + c)] = xh;
          out[static_cast<size_t>(base + c)] =
              ngm.val[static_cast<size_t>(gi * CG + c)] * xh +
              nbt.val[static_cast<size_t>(gi * CG + c)];
        }
      }
    }
  }
  bool ng = nx.needs_grad || ngm.needs_grad || nbt.needs_grad;
  int id = g.add_node(
      nx.shape, std::move(out), ng, "group_norm", {x.id, gamma.id, beta.id},
      [px = x.id, pg = gamma.id, pb = beta.id, B, HW, C, CG, groups, xhat, invstd,
       n_per_group](Graph<T>& gg, typename Graph<T>::Node& self) {
        const auto& gmv = gg.node(pg).val;
        if (gg.node(pg).needs_grad || gg.node(pb).needs_grad) {
          std::vector<T> dg(static_cast<size_t>(C), T(0)), db(static_cast<size_t>(C), T(0));
          for (int64_t r = 0; r < B * HW; ++r) {
            const T* gr = self.grad.data() + r * C;
            const T* xh = xhat->data() + r * C;
            for (int64_t c = 0; c < C; ++c) {
              dg[static_cast<size_t>(c)] += gr[c] * xh[c];
              db[static_cast<size_t>(c)] += gr[c];
            }
          }
          if (gg.node(pg).needs_grad)
            kern::axpy(T(1), dg.data(), gg.grad_buf(pg).data(), dg.size());
          if (gg.node(pb).needs_grad)
            kern::axpy(T(1), db.data(), gg.grad_buf(pb).data(), db.size());
        }
        if (!gg.node(px).needs_grad) return;
        auto& gx = gg.grad_buf(px);
        const T invn = T(1) / static_cast<T>(n_per_group);
        for (int64_t b = 0; b < B; ++b) {
          for (int64_t gi = 0; gi < groups; ++gi) {
            T sum_dxh = T(0), sum_dxh_xh = T(0);
            for (int64_t i = 0; i < HW; ++i) {
              const int64_t base = (b * HW + i) * C + gi * CG;
              for (int64_t c = 0; c < CG; ++c) {
                const T dxh = self.grad[static_cast<size_t>(base + c)] *
                              gmv[static_cast<size_t>(gi * CG + c)];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * (*xhat)[static_cast<size_t>(base + c)];
              }
            }
            const T is = (*invstd)[static_cast<size_t>(b * groups + gi)];
            for (int64_t i = 0; i < HW; ++i) {
              const int64_t base = (b * HW + i) * C + gi * CG;
              for (int64_t c = 0; c < CG; ++c) {
                const T dxh = self.grad[static_cast<size_t>(base + c)] *
                              gmv[static_cast<size_t>(gi * CG + c)];
                gx[static_cast<size_t>(base + c)] +=
                    is * (dxh - invn * sum_dxh -
                          invn * (*xhat)[static_cast<size_t>(base + c)] * sum_dxh_xh);
              }
            }
          }
        }
      });
  return {&g, id};
}

template <typename T>
Var<T> standardize_rows(Var<T> x, T eps) {
  Graph<T>& g = *x.g;
  const auto& nx = g.node(x.id);
  check_2d("standardize_rows", nx.shape);
  const int64_t R = nx.shape[0], C = nx.shape[1];
  auto xhat = std::make_shared<std::vector<T>>(nx.val.size());
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(R));
  std::vector<T> out(nx.val.size());
  for (int64_t r = 0; r < R; ++r) {
    const T* row = nx.val.data() + r * C;
    T mean = kern::reduce_sum(row, static_cast<size_t>(C)) / static_cast<T>(C);
    T var = T(0);
    for (int64_t c = 0; c < C; ++c) {
      const T d = row[c] - mean;
      var += d * d;
    }
    var /= static_cast<T>(C);
    const T is = T(1) / std::sqrt(var + eps);
    (*invstd)[static_cast<size_t>(r)] = is;
    for (int64_t c = 0; c < C; ++c) {
      const T xh = (row[c] - mean) * is;
      (*xhat)[static_cast<size_t>(r * C + c)] = xh;
      out[static_cast<size_t>(r * C + c)] = xh;
    }
  }
  int id = g.add_node(
      nx.shape, std::move(out), nx.needs_grad, "standardize_rows", {x.id},
      [px = x.id, R, C, xhat, invstd](Graph<T>& gg, typename Graph<T>::Node& self) {
        if (!gg.node(px).needs_grad) return;
        auto& gx = gg.grad_buf(px);
        const T invc = T(1) / static_cast<T>(C);
        for (int64_t r = 0; r < R; ++r) {
          const T* gr = self.grad.data() + r * C;
          const T* xh = xhat->data() + r * C;
          T sum_g = T(0), sum_g_xh = T(0);
          for (int64_t c = 0; c < C; ++c) {
            sum_g += gr[c];
            sum_g_xh += gr[c] * xh[c];
          }
          const T is = (*invstd)[static_cast<size_t>(r)];
          T* gxr = gx.data() + r * C;
          for (int64_t c = 0; c < C; ++c)
            gxr[c] += is * (gr[c] - invc * sum_g - invc * xh[c] * sum_g_xh);
        }
      });
  return {&g, id};
}

template <typename T>
Var<T> weight_standardize(Var<T> kernel, T eps) {
  Graph<T>& g = *kernel.g;
  const Shape orig = g.node(kernel.id).shape;
  if (orig.empty()) throw ShapeError("weight_standardize: kernel needs an output-channel axis");
  const int64_t out_ch = orig[0];
  const int64_t rest = vivi::numel(orig) / out_ch;
  Var<T> flat = reshape(kernel, {out_ch, rest});
  Var<T> std_rows = standardize_rows(flat, eps);
  return reshape(std_rows, orig);
}

template <typename T>
Var<T> l2_normalize_rows(Var<T> x, T eps) {
  Graph<T>& g = *x.g;
  const auto& nx = g.node(x.id);
  check_2d("l2_normalize_rows", nx.shape);
  const int64_t R = nx.shape[0], C = nx.shape[1];
  auto invnorm = std::make_shared<std::vector<T>>(static_cast<size_t>(R));
  std::vector<T> out(nx.val.size());
  for (int64_t r = 0; r < R; ++r) {
    const T* row = nx.val.data() + r * C;
    T s = T(0);
    for (int64_t c = 0; c < C; ++c) s += row[c] * row[c];
    const T in = T(1) / std::sqrt(s + eps);
    (*invnorm)[static_cast<size_t>(r)] = in;
    for (int64_t c = 0; c < C; ++c) out[static_cast<size_t>(r * C + c)] = row[c] * in;
  }
  int id = g.add_node(
      nx.shape, std::move(out), nx.needs_grad, "l2_normalize_rows", {x.id},
      [px = x.id, R, C, invnorm](Graph<T>& gg, typename Graph<T>::Node& self) {
        if (!gg.node(px).needs_grad) return;
        auto& gx = gg.grad_buf(px);
        const auto& vx = gg.node(px).val;
        for (int64_t r = 0; r < R; ++r) {
          const T* gr = self.grad.data() + r * C;
          const T* row = vx.data() + r * C;
          const T in = (*invnorm)[static_cast<size_t>(r)];
          T dot = T(0);
          for (int64_t c = 0; c < C; ++c) dot += gr[c] * row[c];
          T* gxr = gx.data() + r * C;
          const T in3 = in * in * in;
          for (int64_t c = 0; c < C; ++c) gxr[c] += gr[c] * in - row[c] * dot * in3;
        }
      });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

// sum_all / mean_all reduce sequentially (scalar path) so that loss values
// do not depend on the active SIMD backend.
template <typename T>
Var<T> sum_all(Var<T> a) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  const T s = kern::scalar::reduce_sum(na.val.data(), na.val.size());
  int id = g.add_node({1}, {s}, na.needs_grad, "sum_all", {a.id},
                      [pa = a.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        auto& ga = gg.grad_buf(pa);
                        const T g0 = self.grad[0];
                        for (auto& v : ga) v += g0;
                      });
  return {&g, id};
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  if (na.val.empty()) throw ShapeError("mean_all: empty input");
  const T m =
      kern::scalar::reduce_sum(na.val.data(), na.val.size()) / static_cast<T>(na.val.size());
  int id = g.add_node({1}, {m}, na.needs_grad, "mean_all", {a.id},
                      [pa = a.id](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        auto& ga = gg.grad_buf(pa);
                        const T g0 = self.grad[0] / static_cast<T>(ga.size());
                        for (auto& v : ga) v += g0;
                      });
  return {&g, id};
}

template <typename T>
Var<T> logsumexp_rows(Var<T> a) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  check_2d("logsumexp_rows", na.shape);
  const int64_t R = na.shape[0], C = na.shape[1];
  std::vector<T> out(static_cast<size_t>(R));
  for (int64_t r = 0; r < R; ++r) {
    const T* row = na.val.data() + r * C;
    const T m = kern::reduce_max(row, static_cast<size_t>(C));
    T s = T(0);
    for (int64_t c = 0; c < C; ++c) s += std::exp(row[c] - m);
    out[static_cast<size_t>(r)] = m + std::log(s);
  }
  int id = g.add_node({R}, std::move(out), na.needs_grad, "logsumexp_rows", {a.id},
                      [pa = a.id, R, C](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        auto& ga = gg.grad_buf(pa);
                        const auto& va = gg.node(pa).val;
                        for (int64_t r = 0; r < R; ++r) {
                          const T lse = self.val[static_cast<size_t>(r)];
                          const T gr = self.grad[static_cast<size_t>(r)];
                          for (int64_t c = 0; c < C; ++c)
                            ga[static_cast<size_t>(r * C + c)] +=
                                gr * std::exp(va[static_cast<size_t>(r * C + c)] - lse);
                        }
                      });
  return {&g, id};
}

template <typename T>
Var<T> masked_logsumexp_rows(Var<T> a, std::vector<uint8_t> mask) {
  Graph<T>& g = *a.g;
  const auto& na = g.node(a.id);
  check_2d("masked_logsumexp_rows", na.shape);
  const int64_t R = na.shape[0], C = na.shape[1];
  if (static_cast<int64_t>(mask.size()) != R * C) {
    throw ShapeError(strcat_msg("masked_logsumexp_rows: mask size ", mask.size(),
                                " vs input ", shape_str(na.shape)));
  }
  std::vector<T> out(static_cast<size_t>(R));
  for (int64_t r = 0; r < R; ++r) {
    const T* row = na.val.data() + r * C;
    const uint8_t* mrow = mask.data() + r * C;
    T m = -std::numeric_limits<T>::infinity();
    int64_t cnt = 0;
    for (int64_t c = 0; c < C; ++c) {
      if (mrow[c]) {
        ++cnt;
        m = std::max(m, row[c]);
      }
    }
    if (cnt == 0) {
      throw ShapeError(strcat_msg("masked_logsumexp_rows: row ", r, " has an empty mask"));
    }
    T s = T(0);
    for (int64_t c = 0; c < C; ++c)
      if (mrow[c]) s += std::exp(row[c] - m);
    out[static_cast<size_t>(r)] = m + std::log(s);
  }
  auto shared_mask = std::make_shared<std::vector<uint8_t>>(std::move(mask));
  int id = g.add_node({R}, std::move(out), na.needs_grad, "masked_logsumexp_rows", {a.id},
                      [pa = a.id, R, C, shared_mask](Graph<T>& gg,
                                                     typename Graph<T>::Node& self) {
                        if (!gg.node(pa).needs_grad) return;
                        auto& ga = gg.grad_buf(pa);
                        const auto& va = gg.node(pa).val;
                        for (int64_t r = 0; r < R; ++r) {
                          const T lse = self.val[static_cast<size_t>(r)];
                          const T gr = self.grad[static_cast<size_t>(r)];
                          const uint8_t* mrow = shared_mask->data() + r * C;
                          for (int64_t c = 0; c < C; ++c)
                            if (mrow[c])
                              ga[static_cast<size_t>(r * C + c)] +=
                                  gr * std::exp(va[static_cast<size_t>(r * C + c)] - lse);
                        }
                      });
  return {&g, id};
}

template <typename T>
Var<T> softmax_xent(Var<T> logits, std::vector<int> labels) {
  Graph<T>& g = *logits.g;
  const auto& nl = g.node(logits.id);
  check_2d("softmax_xent", nl.shape);
  const int64_t B = nl.shape[0], C = nl.shape[1];
  if (static_cast<int64_t>(labels.size()) != B) {
    throw ShapeError(strcat_msg("softmax_xent: ", labels.size(), " labels for ", B, " rows"));
  }
  auto lse = std::make_shared<std::vector<T>>(static_cast<size_t>(B));
  T total = T(0);
  for (int64_t r = 0; r < B; ++r) {
    if (labels[static_cast<size_t>(r)] < 0 || labels[static_cast<size_t>(r)] >= C) {
      throw ShapeError(strcat_msg("softmax_xent: label ", labels[static_cast<size_t>(r)],
                                  " out of range for ", C, " classes"));
    }
    const T* row = nl.val.data() + r * C;
    const T m = kern::reduce_max(row, static_cast<size_t>(C));
    T s = T(0);
    for (int64_t c = 0; c < C; ++c) s += std::exp(row[c] - m);
    const T l = m + std::log(s);
    (*lse)[static_cast<size_t>(r)] = l;
    total += l - row[labels[static_cast<size_t>(r)]];
  }
  total /= static_cast<T>(B);
  auto shared_labels = std::make_shared<std::vector<int>>(std::move(labels));
  int id = g.add_node(
      {1}, {total}, nl.needs_grad, "softmax_xent", {logits.id},
      [pl = logits.id, B, C, lse, shared_labels](Graph<T>& gg, typename Graph<T>::Node& self) {
        if (!gg.node(pl).needs_grad) return;
        auto& gl = gg.grad_buf(pl);
        const auto& vl = gg.node(pl).val;
        const T g0 = self.grad[0] / static_cast<T>(B);
        for (int64_t r = 0; r < B; ++r) {
          const T l = (*lse)[static_cast<size_t>(r)];
          const int y = (*shared_labels)[static_cast<size_t>(r)];
          for (int64_t c = 0; c < C; ++c) {
            T p = std::exp(vl[static_cast<size_t>(r * C + c)] - l);
            if (c == y) p -= T(1);
            gl[static_cast<size_t>(r * C + c)] += g0 * p;
          }
        }
      });
  return {&g, id};
}

template <typename T>
Var<T> sigmoid_bce(Var<T> logits, std::vector<T> targets) {
  Graph<T>& g = *logits.g;
  const auto& nl = g.node(logits.id);
  if (nl.val.size() != targets.size()) {
    throw ShapeError(strcat_msg("sigmoid_bce: ", targets.size(), " targets for ",
                                nl.val.size(), " logits"));
  }
  const int64_t B = static_cast<int64_t>(nl.val.size());
  T total = T(0);
  for (int64_t i = 0; i < B; ++i) {
    const T x = nl.val[static_cast<size_t>(i)];
    const T z = targets[static_cast<size_t>(i)];
    total += std::max(x, T(0)) - x * z + std::log1p(std::exp(-std::abs(x)));
  }
  total /= static_cast<T>(B);
  auto shared_targets = std::make_shared<std::vector<T>>(std::move(targets));
  int id = g.add_node(
      {1}, {total}, nl.needs_grad, "sigmoid_bce", {logits.id},
      [pl = logits.id, B, shared_targets](Graph<T>& gg, typename Graph<T>::Node& self) {
        if (!gg.node(pl).needs_grad) return;
        auto& gl = gg.grad_buf(pl);
        const auto& vl = gg.node(pl).val;
        const T g0 = self.grad[0] / static_cast<T>(B);
        for (int64_t i = 0; i < B; ++i) {
          const T x = vl[static_cast<size_t>(i)];
          const T sig = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                  : std::exp(x) / (T(1) + std::exp(x));
          gl[static_cast<size_t>(i)] += g0 * (sig - (*shared_targets)[static_cast<size_t>(i)]);
        }
      });
  return {&g, id};
}

template <typename T>
Var<T> pairwise_sqdist(Var<T> x) {
  Graph<T>& g = *x.g;
  const auto& nx = g.node(x.id);
  check_2d("pairwise_sqdist", nx.shape);
  const int64_t B = nx.shape[0], E = nx.shape[1];
  std::vector<T> out(static_cast<size_t>(B * B), T(0));
  for (int64_t i = 0; i < B; ++i) {
    for (int64_t j = 0; j < B; ++j) {
      const T* xi = nx.val.data() + i * E;
      const T* xj = nx.val.data() + j * E;
      T acc = T(0);
      for (int64_t e = 0; e < E; ++e) {
        const T d = xi[e] - xj[e];
        acc += d * d;
      }
      out[static_cast<size_t>(i * B + j)] = acc;
    }
  }
  int id = g.add_node({B, B}, std::move(out), nx.needs_grad, "pairwise_sqdist", {x.id},
                      [px = x.id, B, E](Graph<T>& gg, typename Graph<T>::Node& self) {
                        if (!gg.node(px).needs_grad) return;
                        auto& gx = gg.grad_buf(px);
                        const auto& vx = gg.node(px).val;
                        for (int64_t i = 0; i < B; ++i) {
                          for (int64_t j = 0; j < B; ++j) {
                            const T c = self.grad[static_cast<size_t>(i * B + j)];
                            if (c == T(0)) continue;
                            const T* xi = vx.data() + i * E;
                            const T* xj = vx.data() + j * E;
                            T* gi = gx.data() + i * E;
                            T* gj = gx.data() + j * E;
                            for (int64_t e = 0; e < E; ++e) {
                              const T d = T(2) * c * (xi[e] - xj[e]);
                              gi[e] += d;
                              gj[e] -= d;
                            }
                          }
                        }
                      });
  return {&g, id};
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define VIVI_INSTANTIATE_GRAPH(T)                                                       \
  template class Graph<T>;                                                              \
  template Var<T> add<T>(Var<T>, Var<T>);                                               \
  template Var<T> sub<T>(Var<T>, Var<T>);                                               \
  template Var<T> mul<T>(Var<T>, Var<T>);                                               \
  template Var<T> scale<T>(Var<T>, T);                                                  \
  template Var<T> add_scalar<T>(Var<T>, T);                                             \
  template Var<T> relu<T>(Var<T>);                                                      \
  template Var<T> sigmoid<T>(Var<T>);                                                   \
  template Var<T> tanh_act<T>(Var<T>);                                                  \
  template Var<T> reshape<T>(Var<T>, Shape);                                            \
  template Var<T> concat_cols<T>(const std::vector<Var<T>>&);                           \
  template Var<T> slice_cols<T>(Var<T>, int64_t, int64_t);                              \
  template Var<T> take_rows<T>(Var<T>, int64_t, int64_t);                               \
  template Var<T> gather<T>(Var<T>, std::vector<int64_t>);                              \
  template Var<T> linear<T>(Var<T>, Var<T>, std::optional<Var<T>>);                     \
  template Var<T> matmul_nt<T>(Var<T>, Var<T>);                                         \
  template Var<T> conv2d<T>(Var<T>, Var<T>, std::optional<Var<T>>, int, Padding);       \
  template Var<T> global_avg_pool<T>(Var<T>);                                           \
  template Var<T> pool_rows<T>(Var<T>, int64_t);                                        \
  template Var<T> batch_norm<T>(Var<T>, Var<T>, Var<T>, BatchNormState<T>&, bool, T, T);\
  template Var<T> group_norm<T>(Var<T>, Var<T>, Var<T>, int, T);                        \
  template Var<T> standardize_rows<T>(Var<T>, T);                                       \
  template Var<T> weight_standardize<T>(Var<T>, T);                                     \
  template Var<T> l2_normalize_rows<T>(Var<T>, T);                                      \
  template Var<T> sum_all<T>(Var<T>);                                                   \
  template Var<T> mean_all<T>(Var<T>);                                                  \
  template Var<T> logsumexp_rows<T>(Var<T>);                                            \
  template Var<T> masked_logsumexp_rows<T>(Var<T>, std::vector<uint8_t>);               \
  template Var<T> softmax_xent<T>(Var<T>, std::vector<int>);                            \
  template Var<T> sigmoid_bce<T>(Var<T>, std::vector<T>);                               \
  template Var<T> pairwise_sqdist<T>(Var<T>);

VIVI_INSTANTIATE_GRAPH(float)
VIVI_INSTANTIATE_GRAPH(double)

#undef VIVI_INSTANTIATE_GRAPH

}  // namespace vivi::ad
