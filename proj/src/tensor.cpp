#include "metafew/tensor.hpp"

#include <algorithm>
#include <cstring>

#include "kernels.hpp"

namespace metafew {

// internal ops used by the VJP rules (not part of the public surface)
Tensor conv2d_grad_input(const Tensor& gy, const Tensor& w, const Shape& x_shape, int64_t stride,
                         int64_t pad);
Tensor conv2d_grad_kernel(const Tensor& x, const Tensor& gy, const Shape& w_shape, int64_t stride,
                          int64_t pad);
Tensor pool_scatter_grad(const Tensor& g, const std::shared_ptr<std::vector<int32_t>>& idx,
                         const Shape& in_shape);
Tensor pool_gather_grad(const Tensor& g, const std::shared_ptr<std::vector<int32_t>>& idx,
                        const Shape& out_shape);
Tensor spatial_broadcast_grad(const Tensor& v, int64_t H, int64_t W);
Tensor channel_broadcast(const Tensor& v, const Shape& like);
Tensor channel_mean(const Tensor& x);

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::add_scalar: return "add_scalar";
    case Op::pow_const: return "pow_const";
    case Op::log_e: return "log";
    case Op::exp_e: return "exp";
    case Op::relu: return "relu";
    case Op::heaviside: return "heaviside";
    case Op::matmul: return "matmul";
    case Op::transpose2d: return "transpose2d";
    case Op::reshape: return "reshape";
    case Op::sum_rows: return "sum_rows";
    case Op::broadcast_rows: return "broadcast_rows";
    case Op::sum_cols: return "sum_cols";
    case Op::broadcast_cols: return "broadcast_cols";
    case Op::sum_all: return "sum_all";
    case Op::fill_like: return "fill_like";
    case Op::softmax: return "softmax";
    case Op::softmax_xent: return "softmax_xent";
    case Op::conv2d: return "conv2d";
    case Op::conv2d_dx: return "conv2d_dx";
    case Op::conv2d_dw: return "conv2d_dw";
    case Op::maxpool2x2: return "maxpool2x2";
    case Op::pool_scatter: return "pool_scatter";
    case Op::pool_gather: return "pool_gather";
    case Op::gap: return "global_avg_pool";
    case Op::spatial_broadcast: return "spatial_broadcast";
    case Op::channel_mean: return "channel_mean";
    case Op::channel_broadcast: return "channel_broadcast";
    case Op::concat_cols: return "concat_cols";
    case Op::slice_cols: return "slice_cols";
  }
  return "?";
}

namespace {

template <class T>
T* data_of(Storage& s);
template <>
float* data_of<float>(Storage& s) {
  return s.f.data();
}
template <>
double* data_of<double>(Storage& s) {
  return s.d.data();
}

template <class F>
void with_dtype(Dtype dt, F&& f) {
  if (dt == Dtype::f32)
    f(float{});
  else
    f(double{});
}

void check_finite_or_throw(const Storage& s, const char* op) {
  bool ok = true;
  if (s.dtype == Dtype::f32) {
    for (float v : s.f)
      if (!std::isfinite(v)) {
        ok = false;
        break;
      }
  } else {
    for (double v : s.d)
      if (!std::isfinite(v)) {
        ok = false;
        break;
      }
  }
  if (!ok) throw NumericError(std::string(op) + ": non-finite output");
}

std::shared_ptr<Tape> resolve_tape(std::initializer_list<const Tensor*> ins, const char* op) {
  std::shared_ptr<Tape> tape;
  for (const Tensor* t : ins) {
    if (!t->defined()) throw ShapeError(std::string(op) + ": undefined input tensor");
    if (t->on_tape()) {
      if (!tape)
        tape = t->tape();
      else if (tape != t->tape())
        throw ShapeError(std::string(op) + ": inputs live on different tapes");
    }
  }
  for (const Tensor* t : ins) {
    if (tape && t->dtype() != tape->dtype())
      throw ShapeError(std::string(op) + ": dtype differs from tape dtype");
  }
  if (ins.size() > 1) {
    Dtype dt = (*ins.begin())->dtype();
    for (const Tensor* t : ins)
      if (t->dtype() != dt) throw ShapeError(std::string(op) + ": mixed dtypes");
  }
  return tape;
}

// Record the node if the resolved tape is live and recording; otherwise hand
// back a detached tensor. Detached inputs are lifted to constant leaves.
Tensor finish(const char* name, Op op, std::initializer_list<const Tensor*> ins,
              std::shared_ptr<Storage> out, Shape shape, bool check, double c0 = 0.0,
              std::vector<int64_t> iattr = {}, std::shared_ptr<std::vector<int32_t>> idx = nullptr,
              bool differentiable = true) {
  if (check) check_finite_or_throw(*out, name);
  std::shared_ptr<Tape> tape = resolve_tape(ins, name);
  if (!tape || !tape->recording()) return Tensor(std::move(out), std::move(shape));
  Node n;
  n.op = op;
  n.c0 = c0;
  n.iattr = std::move(iattr);
  n.idx = std::move(idx);
  n.value = out;
  n.shape = shape;
  bool needs = false;
  for (const Tensor* t : ins) {
    int32_t id;
    if (t->on_tape()) {
      id = t->node();
    } else {
      Node leaf;
      leaf.op = Op::leaf;
      leaf.value = t->storage();
      leaf.shape = t->shape();
      leaf.needs_grad = false;
      id = tape->append(std::move(leaf));
    }
    needs = needs || tape->node(id).needs_grad;
    n.inputs.push_back(id);
  }
  n.needs_grad = differentiable && needs;
  int32_t id = tape->append(std::move(n));
  return Tensor(std::move(out), std::move(shape), tape, id);
}

void require(bool cond, const char* op, const std::string& msg) {
  if (!cond) throw ShapeError(std::string(op) + ": " + msg);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

int32_t Tape::append(Node n) {
  nodes_.push_back(std::move(n));
  return int32_t(nodes_.size() - 1);
}

Tensor Tape::watch(const Tensor& t) {
  if (t.dtype() != dtype_) throw ShapeError("watch: tensor dtype differs from tape dtype");
  Node n;
  n.op = Op::leaf;
  n.value = t.storage();
  n.shape = t.shape();
  n.needs_grad = true;
  int32_t id = append(std::move(n));
  return Tensor(t.storage(), t.shape(), shared_from_this(), id);
}

Tensor Tape::constant(const Tensor& t) {
  if (t.dtype() != dtype_) throw ShapeError("constant: tensor dtype differs from tape dtype");
  Node n;
  n.op = Op::leaf;
  n.value = t.storage();
  n.shape = t.shape();
  n.needs_grad = false;
  int32_t id = append(std::move(n));
  return Tensor(t.storage(), t.shape(), shared_from_this(), id);
}

ParamSet Tape::watch_all(const ParamSet& p) {
  ParamSet out(p.role());
  for (auto& kv : p) out.add(kv.first, watch(kv.second));
  return out;
}

namespace {

// VJP of one node, expressed through the primitive ops so that gradients of
// gradients come out of the same machinery. `sink(i, g)` accumulates the
// gradient for input slot i.
void vjp(Tape& tape, int32_t id, const Tensor& g,
         const std::function<bool(size_t)>& wants,
         const std::function<void(size_t, const Tensor&)>& sink_raw) {
  // copy: appending gradient nodes during create_graph reallocates the node list
  const Node nd = tape.node(id);
  auto in = [&](size_t i) { return tape.tensor_of(nd.inputs[i]); };
  // evaluate a slot's VJP expression only when its gradient is wanted
  auto sink = [&](size_t slot, auto&& expr) {
    if (wants(slot)) sink_raw(slot, expr());
  };
  switch (nd.op) {
    case Op::leaf:
      break;
    case Op::add:
      sink(0, [&] { return g; });
      sink(1, [&] { return g; });
      break;
    case Op::sub:
      sink(0, [&] { return g; });
      sink(1, [&] { return scale(g, -1.0); });
      break;
    case Op::mul:
      sink(0, [&] { return mul(g, in(1)); });
      sink(1, [&] { return mul(g, in(0)); });
      break;
    case Op::scale:
      sink(0, [&] { return scale(g, nd.c0); });
      break;
    case Op::add_scalar:
      sink(0, [&] { return g; });
      break;
    case Op::pow_const:
      sink(0, [&] { return scale(mul(g, pow_const(in(0), nd.c0 - 1.0)), nd.c0); });
      break;
    case Op::log_e:
      sink(0, [&] { return mul(g, pow_const(in(0), -1.0)); });
      break;
    case Op::exp_e:
      sink(0, [&] { return mul(g, tape.tensor_of(id)); });
      break;
    case Op::relu:
      sink(0, [&] { return mul(g, heaviside(in(0))); });
      break;
    case Op::heaviside:
      break;  // derivative 0 everywhere by convention
    case Op::matmul:
      sink(0, [&] { return matmul(g, transpose2d(in(1))); });
      sink(1, [&] { return matmul(transpose2d(in(0)), g); });
      break;
    case Op::transpose2d:
      sink(0, [&] { return transpose2d(g); });
      break;
    case Op::reshape:
      sink(0, [&] { return reshape(g, Shape(tape.node(nd.inputs[0]).shape)); });
      break;
    case Op::sum_rows:
      sink(0, [&] { return broadcast_rows(g, tape.node(nd.inputs[0]).shape[0]); });
      break;
    case Op::broadcast_rows:
      sink(0, [&] { return sum_rows(g); });
      break;
    case Op::sum_cols:
      sink(0, [&] { return broadcast_cols(g, tape.node(nd.inputs[0]).shape[1]); });
      break;
    case Op::broadcast_cols:
      sink(0, [&] { return sum_cols(g); });
      break;
    case Op::sum_all:
      sink(0, [&] { return fill_like(g, tape.node(nd.inputs[0]).shape); });
      break;
    case Op::fill_like:
      sink(0, [&] { return sum_all(g); });
      break;
    case Op::softmax: {
      Tensor p = tape.tensor_of(id);
      bool flat = nd.shape.size() == 1;
      Tensor p2 = flat ? reshape(p, {1, nd.shape[0]}) : p;
      Tensor g2 = flat ? reshape(g, {1, nd.shape[0]}) : g;
      Tensor s = sum_cols(mul(g2, p2));
      Tensor out = mul(p2, sub(g2, broadcast_cols(s, p2.shape()[1])));
      sink(0, [&] { return flat ? reshape(out, nd.shape) : out; });
      break;
    }
    case Op::softmax_xent: {
      Shape zs = tape.node(nd.inputs[0]).shape;  // copy: appends reallocate nodes
      int64_t B = zs.size() == 2 ? zs[0] : 1;
      int64_t N = zs.size() == 2 ? zs[1] : zs[0];
      Tensor p = softmax(in(0));
      Tensor onehot = Tensor::zeros(zs, g.dtype());
      for (int64_t i = 0; i < B; ++i) onehot.set(size_t(i * N + (*nd.idx)[size_t(i)]), 1.0);
      sink(0, [&] { return scale(mul(fill_like(g, zs), sub(p, onehot)), 1.0 / double(B)); });
      break;
    }
    case Op::conv2d: {
      // iattr = {stride, pad}
      Shape xs = tape.node(nd.inputs[0]).shape;
      Shape ws = tape.node(nd.inputs[1]).shape;
      sink(0, [&] { return conv2d_grad_input(g, in(1), xs, nd.iattr[0], nd.iattr[1]); });
      sink(1, [&] { return conv2d_grad_kernel(in(0), g, ws, nd.iattr[0], nd.iattr[1]); });
      break;
    }
    case Op::conv2d_dx: {
      // forward was dx = dX(gy, w); adjoint wrt gy is conv2d(u, w), wrt w is dW(u, gy)
      Shape ws = tape.node(nd.inputs[1]).shape;
      sink(0, [&] { return conv2d(g, in(1), nd.iattr[0], nd.iattr[1]); });
      sink(1, [&] { return conv2d_grad_kernel(g, in(0), ws, nd.iattr[0], nd.iattr[1]); });
      break;
    }
    case Op::conv2d_dw: {
      // forward was dw = dW(x, gy); adjoint wrt x is dX(gy, u), wrt gy is conv2d(x, u)
      Shape xs = tape.node(nd.inputs[0]).shape;
      sink(0, [&] { return conv2d_grad_input(in(1), g, xs, nd.iattr[0], nd.iattr[1]); });
      sink(1, [&] { return conv2d(in(0), g, nd.iattr[0], nd.iattr[1]); });
      break;
    }
    case Op::maxpool2x2:
      sink(0, [&] { return pool_scatter_grad(g, nd.idx, Shape(tape.node(nd.inputs[0]).shape)); });
      break;
    case Op::pool_scatter:
      sink(0, [&] { return pool_gather_grad(g, nd.idx, Shape(tape.node(nd.inputs[0]).shape)); });
      break;
    case Op::pool_gather:
      sink(0, [&] { return pool_scatter_grad(g, nd.idx, Shape(tape.node(nd.inputs[0]).shape)); });
      break;
    case Op::gap: {
      Shape xs = tape.node(nd.inputs[0]).shape;
      double hw = double(xs[2] * xs[3]);
      sink(0, [&] { return spatial_broadcast_grad(scale(g, 1.0 / hw), xs[2], xs[3]); });
      break;
    }
    case Op::spatial_broadcast: {
      double hw = double(nd.iattr[0] * nd.iattr[1]);
      sink(0, [&] { return scale(global_avg_pool(g), hw); });
      break;
    }
    case Op::channel_mean: {
      Shape xs = tape.node(nd.inputs[0]).shape;
      int64_t m = xs[0] * (xs.size() == 4 ? xs[2] * xs[3] : 1);
      sink(0, [&] { return channel_broadcast(scale(g, 1.0 / double(m)), xs); });
      break;
    }
    case Op::channel_broadcast: {
      Shape os = nd.shape;
      int64_t m = os[0] * (os.size() == 4 ? os[2] * os[3] : 1);
      sink(0, [&] { return scale(channel_mean(g), double(m)); });
      break;
    }
    case Op::concat_cols: {
      int64_t off = 0;
      for (size_t i = 0; i < nd.inputs.size(); ++i) {
        int64_t w = tape.node(nd.inputs[i]).shape[1];
        sink(i, [&] { return slice_cols(g, off, w); });
        off += w;
      }
      break;
    }
    case Op::slice_cols: {
      Shape xs = tape.node(nd.inputs[0]).shape;
      int64_t start = nd.iattr[0], len = nd.iattr[1];
      std::vector<Tensor> parts;
      if (start > 0) parts.push_back(Tensor::zeros({xs[0], start}, g.dtype()));
      parts.push_back(g);
      if (start + len < xs[1]) parts.push_back(Tensor::zeros({xs[0], xs[1] - start - len}, g.dtype()));
      sink(0, [&] { return parts.size() == 1 ? g : concat_cols(parts); });
      break;
    }
  }
}

}  // namespace

std::vector<Tensor> Tape::gradients(const Tensor& loss, const std::vector<Tensor>& wrt,
                                    bool create_graph) {
  if (!loss.on_tape() || loss.tape().get() != this)
    throw ShapeError("backward: loss is not on this tape");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss is not scalar, shape " + shape_str(loss.shape()));
  if (create_graph && nesting_ != 0)
    throw std::runtime_error("backward: nesting level exceeded (only one level of create_graph)");
  if (create_graph) ++create_graph_calls_;

  struct NestGuard {
    int& n;
    bool active;
    NestGuard(int& n, bool a) : n(n), active(a) {
      if (active) ++n;
    }
    ~NestGuard() {
      if (active) --n;
    }
  } nest(nesting_, create_graph);
  RecordPause pause(*this, !create_graph);

  const int32_t L = loss.node();
  std::vector<Tensor> grad(size_t(L) + 1);
  std::vector<bool> keep(size_t(L) + 1, false);
  for (const Tensor& p : wrt)
    if (p.on_tape() && p.tape().get() == this && p.node() <= L) keep[size_t(p.node())] = true;
  // propagate gradients only along paths that can reach a requested parameter
  std::vector<bool> useful = keep;
  for (int32_t id = 0; id <= L; ++id) {
    if (useful[size_t(id)]) continue;
    for (int32_t in : nodes_[size_t(id)].inputs)
      if (useful[size_t(in)]) {
        useful[size_t(id)] = true;
        break;
      }
  }
  if (nodes_[size_t(L)].needs_grad && useful[size_t(L)]) {
    grad[size_t(L)] = Tensor::full(loss.shape(), 1.0, dtype_);
    for (int32_t id = L; id >= 0; --id) {
      if (!grad[size_t(id)].defined() || !nodes_[size_t(id)].needs_grad) continue;
      vjp(
          *this, id, grad[size_t(id)],
          [&](size_t slot) {
            int32_t in_id = nodes_[size_t(id)].inputs[slot];
            return nodes_[size_t(in_id)].needs_grad && useful[size_t(in_id)];
          },
          [&](size_t slot, const Tensor& g) {
            Tensor& acc = grad[size_t(nodes_[size_t(id)].inputs[slot])];
            acc = acc.defined() ? add(acc, g) : g;
          });
      // intermediates are complete once visited; keep requested and leaf grads
      if (nodes_[size_t(id)].op != Op::leaf && !keep[size_t(id)]) grad[size_t(id)] = Tensor();
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& p : wrt) {
    if (!p.on_tape() || p.tape().get() != this)
      throw ShapeError("backward: requested parameter is not watched on this tape");
    Tensor g = p.node() <= L ? grad[size_t(p.node())] : Tensor();
    out.push_back(g.defined() ? g : Tensor::zeros(p.shape(), dtype_));
  }
  return out;
}

GradMap Tape::backward(const Tensor& loss, const ParamSet& wrt, bool create_graph) {
  std::vector<Tensor> ts;
  std::vector<std::string> names;
  for (auto& kv : wrt) {
    names.push_back(kv.first);
    ts.push_back(kv.second);
  }
  std::vector<Tensor> gs = gradients(loss, ts, create_graph);
  GradMap m;
  for (size_t i = 0; i < gs.size(); ++i) m.add(names[i], gs[i]);
  return m;
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace {
template <class K>
Tensor elementwise2(const char* name, Op op, const Tensor& a, const Tensor& b, K&& k) {
  if (a.shape() != b.shape()) shape_fail(name, a.shape(), b.shape());
  auto out = Storage::make(a.dtype(), size_t(a.numel()));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    k(data_of<T>(*a.storage()), data_of<T>(*b.storage()), data_of<T>(*out), a.numel());
  });
  return finish(name, op, {&a, &b}, std::move(out), a.shape(), true);
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise2("add", Op::add, a, b,
                      [](auto* x, auto* y, auto* o, int64_t n) { kern::add(x, y, o, n); });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise2("sub", Op::sub, a, b,
                      [](auto* x, auto* y, auto* o, int64_t n) { kern::sub(x, y, o, n); });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise2("mul", Op::mul, a, b,
                      [](auto* x, auto* y, auto* o, int64_t n) { kern::mul(x, y, o, n); });
}

Tensor scale(const Tensor& a, double c) {
  auto out = Storage::make(a.dtype(), size_t(a.numel()));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::scale(data_of<T>(*a.storage()), T(c), data_of<T>(*out), a.numel());
  });
  return finish("scale", Op::scale, {&a}, std::move(out), a.shape(), true, c);
}

Tensor add_scalar(const Tensor& a, double c) {
  auto out = Storage::make(a.dtype(), size_t(a.numel()));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::add_scalar(data_of<T>(*a.storage()), T(c), data_of<T>(*out), a.numel());
  });
  return finish("add_scalar", Op::add_scalar, {&a}, std::move(out), a.shape(), true, c);
}

Tensor pow_const(const Tensor& a, double c) {
  auto out = Storage::make(a.dtype(), size_t(a.numel()));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::pow_const(data_of<T>(*a.storage()), T(c), data_of<T>(*out), a.numel());
  });
  return finish("pow_const", Op::pow_const, {&a}, std::move(out), a.shape(), true, c);
}

Tensor log_e(const Tensor& a) {
  auto out = Storage::make(a.dtype(), size_t(a.numel()));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::log_e(data_of<T>(*a.storage()), data_of<T>(*out), a.numel());
  });
  return finish("log", Op::log_e, {&a}, std::move(out), a.shape(), true);
}

Tensor exp_e(const Tensor& a) {
  auto out = Storage::make(a.dtype(), size_t(a.numel()));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::exp_e(data_of<T>(*a.storage()), data_of<T>(*out), a.numel());
  });
  return finish("exp", Op::exp_e, {&a}, std::move(out), a.shape(), true);
}

Tensor relu(const Tensor& a) {
  auto out = Storage::make(a.dtype(), size_t(a.numel()));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::relu(data_of<T>(*a.storage()), data_of<T>(*out), a.numel());
  });
  return finish("relu", Op::relu, {&a}, std::move(out), a.shape(), false);
}

Tensor heaviside(const Tensor& a) {
  auto out = Storage::make(a.dtype(), size_t(a.numel()));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::heaviside(data_of<T>(*a.storage()), data_of<T>(*out), a.numel());
  });
  // not differentiable: derivative is 0 almost everywhere
  return finish("heaviside", Op::heaviside, {&a}, std::move(out), a.shape(), false, 0.0, {},
                nullptr, /*differentiable=*/false);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul", "inputs must be rank 2");
  if (a.shape()[1] != b.shape()[0]) shape_fail("matmul", a.shape(), b.shape());
  int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto out = Storage::make(a.dtype(), size_t(m * n));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::matmul(data_of<T>(*a.storage()), data_of<T>(*b.storage()), data_of<T>(*out), m, k, n);
  });
  return finish("matmul", Op::matmul, {&a, &b}, std::move(out), {m, n}, true);
}

Tensor transpose2d(const Tensor& a) {
  require(a.rank() == 2, "transpose2d", "input must be rank 2");
  int64_t r = a.shape()[0], c = a.shape()[1];
  auto out = Storage::make(a.dtype(), size_t(r * c));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::transpose2d(data_of<T>(*a.storage()), data_of<T>(*out), r, c);
  });
  return finish("transpose2d", Op::transpose2d, {&a}, std::move(out), {c, r}, false);
}

Tensor reshape(const Tensor& a, const Shape& s) {
  require(numel_of(s) == a.numel(), "reshape",
          "element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(s));
  // shares storage; no data copied
  return finish("reshape", Op::reshape, {&a}, a.storage(), s, false);
}

Tensor sum_rows(const Tensor& a) {
  require(a.rank() == 2, "sum_rows", "input must be rank 2");
  int64_t b = a.shape()[0], d = a.shape()[1];
  auto out = Storage::make(a.dtype(), size_t(d));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::sum_rows(data_of<T>(*a.storage()), data_of<T>(*out), b, d);
  });
  return finish("sum_rows", Op::sum_rows, {&a}, std::move(out), {d}, true);
}

Tensor broadcast_rows(const Tensor& v, int64_t rows) {
  require(v.rank() == 1, "broadcast_rows", "input must be rank 1");
  int64_t d = v.shape()[0];
  auto out = Storage::make(v.dtype(), size_t(rows * d));
  with_dtype(v.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::broadcast_rows(data_of<T>(*v.storage()), data_of<T>(*out), rows, d);
  });
  return finish("broadcast_rows", Op::broadcast_rows, {&v}, std::move(out), {rows, d}, false);
}

Tensor sum_cols(const Tensor& a) {
  require(a.rank() == 2, "sum_cols", "input must be rank 2");
  int64_t b = a.shape()[0], d = a.shape()[1];
  auto out = Storage::make(a.dtype(), size_t(b));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::sum_cols(data_of<T>(*a.storage()), data_of<T>(*out), b, d);
  });
  return finish("sum_cols", Op::sum_cols, {&a}, std::move(out), {b}, true);
}

Tensor broadcast_cols(const Tensor& v, int64_t cols) {
  require(v.rank() == 1, "broadcast_cols", "input must be rank 1");
  int64_t b = v.shape()[0];
  auto out = Storage::make(v.dtype(), size_t(b * cols));
  with_dtype(v.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::broadcast_cols(data_of<T>(*v.storage()), data_of<T>(*out), b, cols);
  });
  return finish("broadcast_cols", Op::broadcast_cols, {&v}, std::move(out), {b, cols}, false);
}

Tensor sum_all(const Tensor& a) {
  auto out = Storage::make(a.dtype(), 1);
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = data_of<T>(*a.storage());
    T s = T(0);
    for (int64_t i = 0; i < a.numel(); ++i) s += x[i];
    data_of<T>(*out)[0] = s;
  });
  return finish("sum_all", Op::sum_all, {&a}, std::move(out), {}, true);
}

Tensor fill_like(const Tensor& scalar, const Shape& s) {
  require(scalar.numel() == 1, "fill_like", "source must be scalar");
  auto out = Storage::make(scalar.dtype(), size_t(numel_of(s)), scalar.at(0));
  return finish("fill_like", Op::fill_like, {&scalar}, std::move(out), s, false);
}

Tensor mean_rows(const Tensor& a) {
  require(a.rank() == 2, "mean_rows", "input must be rank 2");
  return scale(sum_rows(a), 1.0 / double(a.shape()[0]));
}

Tensor softmax(const Tensor& logits) {
  require(logits.rank() == 1 || logits.rank() == 2, "softmax", "input must be rank 1 or 2");
  int64_t b = logits.rank() == 2 ? logits.shape()[0] : 1;
  int64_t n = logits.rank() == 2 ? logits.shape()[1] : logits.shape()[0];
  auto out = Storage::make(logits.dtype(), size_t(b * n));
  with_dtype(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::softmax(data_of<T>(*logits.storage()), data_of<T>(*out), b, n);
  });
  return finish("softmax", Op::softmax, {&logits}, std::move(out), logits.shape(), true);
}

Tensor softmax_xent(const Tensor& logits, const std::vector<int32_t>& labels) {
  require(logits.rank() == 1 || logits.rank() == 2, "softmax_xent", "input must be rank 1 or 2");
  int64_t b = logits.rank() == 2 ? logits.shape()[0] : 1;
  int64_t n = logits.rank() == 2 ? logits.shape()[1] : logits.shape()[0];
  require(int64_t(labels.size()) == b, "softmax_xent", "label count must equal batch size");
  for (int32_t y : labels)
    require(y >= 0 && y < n, "softmax_xent", "label out of range");
  auto out = Storage::make(logits.dtype(), 1);
  with_dtype(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    data_of<T>(*out)[0] = kern::softmax_xent(data_of<T>(*logits.storage()), labels.data(), b, n);
  });
  auto idx = std::make_shared<std::vector<int32_t>>(labels);
  return finish("softmax_xent", Op::softmax_xent, {&logits}, std::move(out), {}, true, 0.0, {},
                std::move(idx));
}

namespace {
void conv_geometry(const char* name, const Shape& xs, const Shape& ws, int64_t stride, int64_t pad,
                   int64_t& OH, int64_t& OW) {
  require(xs.size() == 4 && ws.size() == 4, name, "conv2d operands must be rank 4");
  require(stride >= 1, name, "stride must be >= 1");
  require(pad >= 0, name, "pad must be >= 0");
  if (xs[1] != ws[1]) shape_fail(name, xs, ws);
  OH = (xs[2] + 2 * pad - ws[2]) / stride + 1;
  OW = (xs[3] + 2 * pad - ws[3]) / stride + 1;
  require(OH >= 1 && OW >= 1, name, "kernel larger than padded input");
}
}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad) {
  int64_t OH, OW;
  conv_geometry("conv2d", x.shape(), w.shape(), stride, pad, OH, OW);
  int64_t B = x.shape()[0], IC = x.shape()[1], IH = x.shape()[2], IW = x.shape()[3];
  int64_t OC = w.shape()[0], KH = w.shape()[2], KW = w.shape()[3];
  auto out = Storage::make(x.dtype(), size_t(B * OC * OH * OW));
  with_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::conv2d(data_of<T>(*x.storage()), data_of<T>(*w.storage()), data_of<T>(*out), B, IC, IH,
                 IW, OC, KH, KW, stride, pad, OH, OW);
  });
  return finish("conv2d", Op::conv2d, {&x, &w}, std::move(out), {B, OC, OH, OW}, true, 0.0,
                {stride, pad});
}

Tensor conv2d_grad_input(const Tensor& gy, const Tensor& w, const Shape& x_shape, int64_t stride,
                         int64_t pad) {
  int64_t OH, OW;
  conv_geometry("conv2d_dx", x_shape, w.shape(), stride, pad, OH, OW);
  require(gy.shape() == Shape({x_shape[0], w.shape()[0], OH, OW}), "conv2d_dx",
          "upstream shape inconsistent with geometry");
  int64_t B = x_shape[0], IC = x_shape[1], IH = x_shape[2], IW = x_shape[3];
  int64_t OC = w.shape()[0], KH = w.shape()[2], KW = w.shape()[3];
  auto out = Storage::make(gy.dtype(), size_t(B * IC * IH * IW));
  with_dtype(gy.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::conv2d_dx(data_of<T>(*gy.storage()), data_of<T>(*w.storage()), data_of<T>(*out), B, IC,
                    IH, IW, OC, KH, KW, stride, pad, OH, OW);
  });
  return finish("conv2d_dx", Op::conv2d_dx, {&gy, &w}, std::move(out), x_shape, true, 0.0,
                {stride, pad});
}

Tensor conv2d_grad_kernel(const Tensor& x, const Tensor& gy, const Shape& w_shape, int64_t stride,
                          int64_t pad) {
  int64_t OH, OW;
  conv_geometry("conv2d_dw", x.shape(), w_shape, stride, pad, OH, OW);
  require(gy.shape() == Shape({x.shape()[0], w_shape[0], OH, OW}), "conv2d_dw",
          "upstream shape inconsistent with geometry");
  int64_t B = x.shape()[0], IC = x.shape()[1], IH = x.shape()[2], IW = x.shape()[3];
  int64_t OC = w_shape[0], KH = w_shape[2], KW = w_shape[3];
  auto out = Storage::make(x.dtype(), size_t(OC * IC * KH * KW));
  with_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::conv2d_dw(data_of<T>(*x.storage()), data_of<T>(*gy.storage()), data_of<T>(*out), B, IC,
                    IH, IW, OC, KH, KW, stride, pad, OH, OW);
  });
  return finish("conv2d_dw", Op::conv2d_dw, {&x, &gy}, std::move(out), w_shape, true, 0.0,
                {stride, pad});
}

Tensor maxpool2x2(const Tensor& x) {
  require(x.rank() == 4, "maxpool2x2", "input must be rank 4");
  int64_t B = x.shape()[0], C = x.shape()[1], IH = x.shape()[2], IW = x.shape()[3];
  require(IH >= 2 && IW >= 2, "maxpool2x2", "spatial dims must be >= 2");
  int64_t OH = IH / 2, OW = IW / 2;
  auto out = Storage::make(x.dtype(), size_t(B * C * OH * OW));
  auto idx = std::make_shared<std::vector<int32_t>>(size_t(B * C * OH * OW));
  with_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::maxpool2x2(data_of<T>(*x.storage()), data_of<T>(*out), idx->data(), B * C, IH, IW, OH,
                     OW);
  });
  return finish("maxpool2x2", Op::maxpool2x2, {&x}, std::move(out), {B, C, OH, OW}, false, 0.0,
                {}, std::move(idx));
}

Tensor pool_scatter_grad(const Tensor& g, const std::shared_ptr<std::vector<int32_t>>& idx,
                         const Shape& in_shape) {
  auto out = Storage::make(g.dtype(), size_t(numel_of(in_shape)));
  with_dtype(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::pool_scatter(data_of<T>(*g.storage()), idx->data(), data_of<T>(*out),
                       numel_of(in_shape), g.numel());
  });
  return finish("pool_scatter", Op::pool_scatter, {&g}, std::move(out), in_shape, false, 0.0, {},
                idx);
}

Tensor pool_gather_grad(const Tensor& g, const std::shared_ptr<std::vector<int32_t>>& idx,
                        const Shape& out_shape) {
  auto out = Storage::make(g.dtype(), size_t(numel_of(out_shape)));
  with_dtype(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::pool_gather(data_of<T>(*g.storage()), idx->data(), data_of<T>(*out),
                      numel_of(out_shape));
  });
  return finish("pool_gather", Op::pool_gather, {&g}, std::move(out), out_shape, false, 0.0, {},
                idx);
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.rank() == 4, "global_avg_pool", "input must be rank 4");
  int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  auto out = Storage::make(x.dtype(), size_t(B * C));
  with_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::gap(data_of<T>(*x.storage()), data_of<T>(*out), B * C, H * W);
  });
  return finish("global_avg_pool", Op::gap, {&x}, std::move(out), {B, C}, true);
}

Tensor spatial_broadcast_grad(const Tensor& v, int64_t H, int64_t W) {
  require(v.rank() == 2, "spatial_broadcast", "input must be rank 2");
  int64_t B = v.shape()[0], C = v.shape()[1];
  auto out = Storage::make(v.dtype(), size_t(B * C * H * W));
  with_dtype(v.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::spatial_broadcast(data_of<T>(*v.storage()), data_of<T>(*out), B * C, H * W);
  });
  return finish("spatial_broadcast", Op::spatial_broadcast, {&v}, std::move(out), {B, C, H, W},
                false, 0.0, {H, W});
}

Tensor channel_mean(const Tensor& x) {
  require(x.rank() == 2 || x.rank() == 4, "channel_mean", "input must be rank 2 or 4");
  int64_t B = x.shape()[0], C = x.shape()[1];
  int64_t HW = x.rank() == 4 ? x.shape()[2] * x.shape()[3] : 1;
  auto out = Storage::make(x.dtype(), size_t(C));
  with_dtype(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::channel_mean(data_of<T>(*x.storage()), data_of<T>(*out), B, C, HW);
  });
  return finish("channel_mean", Op::channel_mean, {&x}, std::move(out), {C}, true);
}

Tensor channel_broadcast(const Tensor& v, const Shape& like) {
  require(v.rank() == 1, "channel_broadcast", "input must be rank 1");
  require(like.size() == 2 || like.size() == 4, "channel_broadcast", "target must be rank 2 or 4");
  require(like[1] == v.shape()[0], "channel_broadcast", "channel count mismatch");
  int64_t B = like[0], C = like[1];
  int64_t HW = like.size() == 4 ? like[2] * like[3] : 1;
  auto out = Storage::make(v.dtype(), size_t(B * C * HW));
  with_dtype(v.dtype(), [&](auto tag) {
    using T = decltype(tag);
    kern::channel_broadcast(data_of<T>(*v.storage()), data_of<T>(*out), B, C, HW);
  });
  return finish("channel_broadcast", Op::channel_broadcast, {&v}, std::move(out), like, false);
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.rank() == 2 || x.rank() == 4, "batch_norm", "input must be rank 2 or 4");
  require(x.shape()[0] >= 2, "batch_norm", "batch dimension must be >= 2 in training mode");
  require(gamma.rank() == 1 && gamma.shape()[0] == x.shape()[1], "batch_norm",
          "scale must have one entry per channel");
  require(beta.shape() == gamma.shape(), "batch_norm", "scale/shift shape mismatch");
  // current-batch statistics at both train and eval time (transductive episodic convention)
  Tensor mu = channel_mean(x);
  Tensor xc = sub(x, channel_broadcast(mu, x.shape()));
  Tensor var = channel_mean(mul(xc, xc));
  Tensor inv = pow_const(add_scalar(var, eps), -0.5);
  Tensor norm = mul(xc, channel_broadcast(inv, x.shape()));
  return add(mul(norm, channel_broadcast(gamma, x.shape())),
             channel_broadcast(beta, x.shape()));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  int64_t rows = parts[0].shape().size() == 2 ? parts[0].shape()[0] : -1;
  require(rows > 0, "concat_cols", "inputs must be rank 2");
  int64_t total = 0;
  for (auto& p : parts) {
    require(p.rank() == 2, "concat_cols", "inputs must be rank 2");
    if (p.shape()[0] != rows) shape_fail("concat_cols", parts[0].shape(), p.shape());
    total += p.shape()[1];
  }
  Dtype dt = parts[0].dtype();
  auto out = Storage::make(dt, size_t(rows * total));
  with_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    T* o = data_of<T>(*out);
    int64_t off = 0;
    for (auto& p : parts) {
      const T* src = data_of<T>(*p.storage());
      int64_t w = p.shape()[1];
      for (int64_t r = 0; r < rows; ++r) std::copy(src + r * w, src + (r + 1) * w, o + r * total + off);
      off += w;
    }
  });
  // variable arity, so the node is assembled here instead of via finish()
  std::vector<const Tensor*> ptrs;
  for (auto& p : parts) ptrs.push_back(&p);
  std::shared_ptr<Tape> tape;
  for (auto* t : ptrs) {
    if (t->on_tape()) {
      if (!tape)
        tape = t->tape();
      else
        require(tape == t->tape(), "concat_cols", "inputs live on different tapes");
    }
  }
  if (!tape || !tape->recording()) return Tensor(std::move(out), {rows, total});
  Node n;
  n.op = Op::concat_cols;
  n.value = out;
  n.shape = {rows, total};
  bool needs = false;
  for (auto* t : ptrs) {
    int32_t id;
    if (t->on_tape())
      id = t->node();
    else {
      Node leaf;
      leaf.op = Op::leaf;
      leaf.value = t->storage();
      leaf.shape = t->shape();
      id = tape->append(std::move(leaf));
    }
    needs = needs || tape->node(id).needs_grad;
    n.inputs.push_back(id);
  }
  n.needs_grad = needs;
  int32_t id = tape->append(std::move(n));
  return Tensor(std::move(out), {rows, total}, tape, id);
}

Tensor slice_cols(const Tensor& a, int64_t start, int64_t len) {
  require(a.rank() == 2, "slice_cols", "input must be rank 2");
  require(start >= 0 && len >= 1 && start + len <= a.shape()[1], "slice_cols",
          "slice out of range");
  int64_t rows = a.shape()[0], cols = a.shape()[1];
  auto out = Storage::make(a.dtype(), size_t(rows * len));
  with_dtype(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = data_of<T>(*a.storage());
    T* o = data_of<T>(*out);
    for (int64_t r = 0; r < rows; ++r)
      std::copy(src + r * cols + start, src + r * cols + start + len, o + r * len);
  });
  return finish("slice_cols", Op::slice_cols, {&a}, std::move(out), {rows, len}, false, 0.0,
                {start, len});
}

Tensor apply_primitive(PrimitiveKind kind, const std::vector<Tensor>& inputs,
                       const PrimitiveAttrs& attrs) {
  auto need = [&](size_t n) {
    require(inputs.size() == n, "apply_primitive", "wrong input count");
  };
  switch (kind) {
    case PrimitiveKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case PrimitiveKind::add: need(2); return add(inputs[0], inputs[1]);
    case PrimitiveKind::scale: need(1); return scale(inputs[0], attrs.c0);
    case PrimitiveKind::relu: need(1); return relu(inputs[0]);
    case PrimitiveKind::conv2d: need(2); return conv2d(inputs[0], inputs[1], attrs.stride, attrs.pad);
    case PrimitiveKind::maxpool2x2: need(1); return maxpool2x2(inputs[0]);
    case PrimitiveKind::global_avg_pool: need(1); return global_avg_pool(inputs[0]);
    case PrimitiveKind::batch_norm:
      need(3);
      return batch_norm(inputs[0], inputs[1], inputs[2], attrs.c0 > 0 ? attrs.c0 : 1e-5);
    case PrimitiveKind::concat_last_axis: return concat_cols(inputs);
    case PrimitiveKind::mean_rows: need(1); return mean_rows(inputs[0]);
    case PrimitiveKind::softmax_xent: need(1); return softmax_xent(inputs[0], attrs.labels);
    case PrimitiveKind::reshape: need(1); return reshape(inputs[0], attrs.shape);
  }
  throw ShapeError("apply_primitive: unknown kind");
}

GradMap finite_diff_grad(const std::function<double(const ParamSet&)>& f, const ParamSet& point,
                         double eps) {
  if (eps <= 0) throw ShapeError("finite_diff_grad: epsilon must be positive");
  for (auto& kv : point)
    if (kv.second.dtype() != Dtype::f64)
      throw ShapeError("finite_diff_grad: point must be 64-bit (parameter " + kv.first + ")");
  ParamSet p = point.clone();
  GradMap out;
  for (auto& kv : p) {
    Tensor g = Tensor::zeros(kv.second.shape(), Dtype::f64);
    for (int64_t i = 0; i < kv.second.numel(); ++i) {
      double orig = kv.second.at(size_t(i));
      kv.second.set(size_t(i), orig + eps);
      double hi = f(p);
      kv.second.set(size_t(i), orig - eps);
      double lo = f(p);
      kv.second.set(size_t(i), orig);
      if (!std::isfinite(hi) || !std::isfinite(lo))
        throw NumericError("finite_diff_grad: non-finite evaluation");
      g.set(size_t(i), (hi - lo) / (2.0 * eps));
    }
    out.add(kv.first, g);
  }
  return out;
}

}  // namespace metafew
