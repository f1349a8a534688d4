#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "metafew/common.hpp"

namespace metafew {

enum class Dtype : uint8_t { f32, f64 };

// Flat value buffer. Exactly one of f/d is populated, selected by dtype.
struct Storage {
  Dtype dtype = Dtype::f32;
  std::vector<float> f;
  std::vector<double> d;

  static std::shared_ptr<Storage> make(Dtype dt, size_t n, double fill = 0.0) {
    auto s = std::make_shared<Storage>();
    s->dtype = dt;
    if (dt == Dtype::f32)
      s->f.assign(n, float(fill));
    else
      s->d.assign(n, fill);
    return s;
  }

  size_t size() const { return dtype == Dtype::f32 ? f.size() : d.size(); }
  double at(size_t i) const { return dtype == Dtype::f32 ? double(f[i]) : d[i]; }
  void set(size_t i, double v) {
    if (dtype == Dtype::f32)
      f[i] = float(v);
    else
      d[i] = v;
  }
};

class Tape;

// Dense N-dimensional array. Optionally bound to a tape node, in which case
// the tape records how it was produced and backward() can reach it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::shared_ptr<Storage> st, Shape shape) : st_(std::move(st)), shape_(std::move(shape)) {}
  Tensor(std::shared_ptr<Storage> st, Shape shape, std::shared_ptr<Tape> tape, int32_t node)
      : st_(std::move(st)), shape_(std::move(shape)), tape_(std::move(tape)), node_(node) {}

  static Tensor zeros(const Shape& s, Dtype dt = Dtype::f32) {
    return Tensor(Storage::make(dt, size_t(numel_of(s))), s);
  }
  static Tensor full(const Shape& s, double v, Dtype dt = Dtype::f32) {
    return Tensor(Storage::make(dt, size_t(numel_of(s)), v), s);
  }
  static Tensor scalar(double v, Dtype dt = Dtype::f32) { return full({}, v, dt); }
  static Tensor from(const Shape& s, const std::vector<double>& vals, Dtype dt = Dtype::f32) {
    if (int64_t(vals.size()) != numel_of(s)) throw ShapeError("Tensor::from: element count mismatch");
    Tensor t = zeros(s, dt);
    for (size_t i = 0; i < vals.size(); ++i) t.st_->set(i, vals[i]);
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t numel() const { return numel_of(shape_); }
  int64_t dim(size_t i) const { return shape_[i]; }
  size_t rank() const { return shape_.size(); }
  Dtype dtype() const { return st_->dtype; }

  bool on_tape() const { return tape_ != nullptr; }
  const std::shared_ptr<Tape>& tape() const { return tape_; }
  int32_t node() const { return node_; }

  Tensor detached() const { return Tensor(st_, shape_); }

  const std::shared_ptr<Storage>& storage() const { return st_; }
  double at(size_t i) const { return st_->at(i); }
  void set(size_t i, double v) { st_->set(i, v); }
  double item() const {
    if (numel() != 1) throw ShapeError("item(): tensor is not scalar, shape " + shape_str(shape_));
    return st_->at(0);
  }

  std::vector<double> to_vector() const {
    std::vector<double> out(size_t(numel()), 0.0);
    for (size_t i = 0; i < out.size(); ++i) out[i] = st_->at(i);
    return out;
  }

  // deep copy of values, detached
  Tensor clone() const {
    Tensor t = zeros(shape_, dtype());
    if (dtype() == Dtype::f32)
      t.st_->f = st_->f;
    else
      t.st_->d = st_->d;
    return t;
  }

  Tensor astype(Dtype dt) const {
    if (dt == dtype()) return clone();
    Tensor t = zeros(shape_, dt);
    for (int64_t i = 0; i < numel(); ++i) t.st_->set(size_t(i), st_->at(size_t(i)));
    return t;
  }

  bool all_finite() const {
    for (int64_t i = 0; i < numel(); ++i)
      if (!std::isfinite(st_->at(size_t(i)))) return false;
    return true;
  }

 private:
  std::shared_ptr<Storage> st_;
  Shape shape_;
  std::shared_ptr<Tape> tape_;
  int32_t node_ = -1;
};

// Named, ordered collection of trainable tensors.
enum class Role : uint8_t { generic, encoder, head, hypernet };

class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(Role role) : role_(role) {}

  Role role() const { return role_; }
  void set_role(Role r) { role_ = r; }

  void add(const std::string& name, Tensor t) {
    if (has(name)) throw ShapeError("ParamSet: duplicate name " + name);
    items_.emplace_back(name, std::move(t));
  }
  bool has(const std::string& name) const {
    for (auto& kv : items_)
      if (kv.first == name) return true;
    return false;
  }
  const Tensor& at(const std::string& name) const {
    for (auto& kv : items_)
      if (kv.first == name) return kv.second;
    throw ShapeError("ParamSet: no parameter named " + name);
  }
  Tensor& at(const std::string& name) {
    for (auto& kv : items_)
      if (kv.first == name) return kv.second;
    throw ShapeError("ParamSet: no parameter named " + name);
  }
  void replace(const std::string& name, Tensor t) { at(name) = std::move(t); }

  size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (auto& kv : items_) n += kv.second.numel();
    return n;
  }

  // concatenation of all parameters in declaration order; unflatten() of the
  // result reproduces the set exactly
  std::vector<double> flatten() const {
    std::vector<double> v;
    v.reserve(size_t(total_elements()));
    for (auto& kv : items_)
      for (int64_t i = 0; i < kv.second.numel(); ++i) v.push_back(kv.second.at(size_t(i)));
    return v;
  }
  void unflatten(const std::vector<double>& v) {
    if (int64_t(v.size()) != total_elements()) throw ShapeError("unflatten: length mismatch");
    size_t k = 0;
    for (auto& kv : items_)
      for (int64_t i = 0; i < kv.second.numel(); ++i) kv.second.set(size_t(i), v[k++]);
  }

  ParamSet clone() const {
    ParamSet p(role_);
    for (auto& kv : items_) p.add(kv.first, kv.second.clone());
    return p;
  }
  ParamSet astype(Dtype dt) const {
    ParamSet p(role_);
    for (auto& kv : items_) p.add(kv.first, kv.second.astype(dt));
    return p;
  }

  // merge views (shallow: tensors shared)
  static ParamSet merged(std::initializer_list<const ParamSet*> sets) {
    ParamSet p;
    for (auto* s : sets)
      for (auto& kv : *s) p.add(kv.first, kv.second);
    return p;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  Role role_ = Role::generic;
};

// parameter name -> gradient tensor of identical shape
class GradMap {
 public:
  void add(const std::string& name, Tensor g) { items_.emplace_back(name, std::move(g)); }
  bool has(const std::string& name) const {
    for (auto& kv : items_)
      if (kv.first == name) return true;
    return false;
  }
  const Tensor& at(const std::string& name) const {
    for (auto& kv : items_)
      if (kv.first == name) return kv.second;
    throw ShapeError("GradMap: no gradient named " + name);
  }
  size_t size() const { return items_.size(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  double norm() const {
    double s = 0;
    for (auto& kv : items_)
      for (int64_t i = 0; i < kv.second.numel(); ++i) {
        double v = kv.second.at(size_t(i));
        s += v * v;
      }
    return std::sqrt(s);
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

enum class Op : uint8_t {
  leaf,
  add,
  sub,
  mul,
  scale,        // c0 = factor
  add_scalar,   // c0 = addend
  pow_const,    // c0 = exponent
  log_e,
  exp_e,
  relu,
  heaviside,    // derivative defined as 0 everywhere
  matmul,
  transpose2d,
  reshape,
  sum_rows,        // (B,D) -> (D)
  broadcast_rows,  // (D) -> (B,D), i0 = B
  sum_cols,        // (B,D) -> (B)
  broadcast_cols,  // (B) -> (B,D), i0 = D
  sum_all,         // any -> scalar
  fill_like,       // scalar -> shape
  softmax,         // rowwise
  softmax_xent,    // mean cross-entropy, labels in idx
  conv2d,          // i0..i1 = stride, pad
  conv2d_dx,       // adjoint wrt input
  conv2d_dw,       // adjoint wrt kernel
  maxpool2x2,      // argmax saved in idx
  pool_scatter,
  pool_gather,
  gap,                // global average pool (B,C,H,W) -> (B,C)
  spatial_broadcast,  // (B,C) -> (B,C,H,W)
  channel_mean,       // (B,C[,H,W]) -> (C)
  channel_broadcast,  // (C) -> like shape
  concat_cols,
  slice_cols,  // i0 = start, i1 = len
};

const char* op_name(Op op);

struct Node {
  Op op = Op::leaf;
  std::vector<int32_t> inputs;
  std::shared_ptr<Storage> value;
  Shape shape;
  double c0 = 0.0;
  std::vector<int64_t> iattr;                  // geometry attrs
  std::shared_ptr<std::vector<int32_t>> idx;   // labels / pool indices
  bool needs_grad = false;
};

// Append-only record of primitive applications. Create through Tape::make so
// tensors can keep the tape alive via shared_ptr.
class Tape : public std::enable_shared_from_this<Tape> {
 public:
  static std::shared_ptr<Tape> make(Dtype dt = Dtype::f32) {
    return std::shared_ptr<Tape>(new Tape(dt));
  }

  Dtype dtype() const { return dtype_; }
  size_t size() const { return nodes_.size(); }
  int nesting_level() const { return nesting_; }
  bool recording() const { return recording_; }
  int create_graph_calls() const { return create_graph_calls_; }

  // leaf with gradient tracking (parameters)
  Tensor watch(const Tensor& t);
  // leaf without gradient tracking (data, constants)
  Tensor constant(const Tensor& t);
  ParamSet watch_all(const ParamSet& p);

  const Node& node(int32_t id) const { return nodes_[size_t(id)]; }
  Tensor tensor_of(int32_t id) {
    return Tensor(nodes_[size_t(id)].value, nodes_[size_t(id)].shape, shared_from_this(), id);
  }

  // d(loss)/d(param) for every param in wrt. With create_graph, the returned
  // gradients are tape nodes themselves, so a later backward differentiates
  // through them (exactly one extra level is supported).
  GradMap backward(const Tensor& loss, const ParamSet& wrt, bool create_graph = false);
  std::vector<Tensor> gradients(const Tensor& loss, const std::vector<Tensor>& wrt,
                                bool create_graph = false);

  int32_t append(Node n);

 private:
  explicit Tape(Dtype dt) : dtype_(dt) {}
  std::vector<Node> nodes_;
  Dtype dtype_;
  int nesting_ = 0;
  int create_graph_calls_ = 0;
  bool recording_ = true;
  friend class RecordPause;
};

// Scoped "compute values only" mode used by backward(create_graph=false).
class RecordPause {
 public:
  explicit RecordPause(Tape& t, bool active = true) : tape_(t), prev_(t.recording_) {
    if (active) tape_.recording_ = false;
  }
  ~RecordPause() { tape_.recording_ = prev_; }

 private:
  Tape& tape_;
  bool prev_;
};

// ---------------------------------------------------------------------------
// Primitive operations. Inputs must share a tape (detached tensors are lifted
// to constants); outputs are recorded when the tape is recording.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor pow_const(const Tensor& a, double c);
Tensor log_e(const Tensor& a);
Tensor exp_e(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor heaviside(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& s);
Tensor sum_rows(const Tensor& a);
Tensor broadcast_rows(const Tensor& v, int64_t rows);
Tensor sum_cols(const Tensor& a);
Tensor broadcast_cols(const Tensor& v, int64_t cols);
Tensor sum_all(const Tensor& a);
Tensor fill_like(const Tensor& scalar, const Shape& s);
Tensor mean_rows(const Tensor& a);
Tensor softmax(const Tensor& logits);
Tensor softmax_xent(const Tensor& logits, const std::vector<int32_t>& labels);
Tensor conv2d(const Tensor& x, const Tensor& w, int64_t stride = 1, int64_t pad = 0);
Tensor maxpool2x2(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);
Tensor channel_mean(const Tensor& x);                      // (B,C[,H,W]) -> (C)
Tensor channel_broadcast(const Tensor& v, const Shape& like);
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, int64_t start, int64_t len);

// Spec-level dispatcher over the public primitive inventory.
enum class PrimitiveKind {
  matmul,
  add,
  scale,
  relu,
  conv2d,
  maxpool2x2,
  global_avg_pool,
  batch_norm,
  concat_last_axis,
  mean_rows,
  softmax_xent,
  reshape,
};

struct PrimitiveAttrs {
  double c0 = 0.0;            // scale factor / bn eps
  int64_t stride = 1;
  int64_t pad = 0;
  Shape shape;                // reshape target
  std::vector<int32_t> labels;
};

Tensor apply_primitive(PrimitiveKind kind, const std::vector<Tensor>& inputs,
                       const PrimitiveAttrs& attrs = {});

// ---------------------------------------------------------------------------
// Central-difference oracle: (f(p+eps e) - f(p-eps e)) / 2eps per coordinate.
// Evaluation is required to be in 64-bit precision.
// ---------------------------------------------------------------------------
GradMap finite_diff_grad(const std::function<double(const ParamSet&)>& f, const ParamSet& point,
                         double eps = 1e-4);

}  // namespace metafew
