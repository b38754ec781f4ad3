#pragma once

#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "msiseg/layers.hpp"
#include "msiseg/tensor.hpp"

namespace msiseg {

enum class OpKind : uint8_t {
  Input,
  Conv2d,
  BatchNorm,
  Relu,
  MaxPool,
  MeanPool,
  Upsample2,
  Add,
  Dense,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::BatchNorm: return "batchnorm";
    case OpKind::Relu: return "relu";
    case OpKind::MaxPool: return "maxpool";
    case OpKind::MeanPool: return "meanpool";
    case OpKind::Upsample2: return "upsample2";
    case OpKind::Add: return "add";
    case OpKind::Dense: return "dense";
  }
  return "?";
}

struct NodeSpec {
  OpKind kind = OpKind::Input;
  int in0 = -1;
  int in1 = -1;      // second input for add
  int window = 0;    // conv kernel / pool window; 0 on MeanPool means global
  int stride = 1;
  int pad = 0;
  double momentum = 0.9;
  double eps = 1e-5;
  // parameter names (conv/dense: w,b; batchnorm: gamma,beta,rmean,rvar)
  std::string w, b, gamma, beta, rmean, rvar;
};

template <typename T>
struct Param {
  Tensor<T> tensor;
  bool trainable = true;  // false: running stats and other tracked buffers
  bool frozen = false;    // true: excluded from optimizer updates
};

template <typename T>
class ParamStore {
 public:
  Tensor<T>& create(const std::string& name, const std::vector<int>& shape, bool trainable) {
    if (params_.count(name)) throw StateError("parameter already exists: " + name);
    Param<T>& p = params_[name];
    p.tensor.reset(shape);
    p.trainable = trainable;
    order_.push_back(name);
    return p.tensor;
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Param<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter: " + name);
    return it->second;
  }
  const Param<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw StateError("unknown parameter: " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }

  void zero_grad() {
    for (auto& [name, p] : params_) p.tensor.zero_grad();
  }

  void set_frozen(const std::string& prefix, bool frozen) {
    for (auto& [name, p] : params_)
      if (name.rfind(prefix, 0) == 0) p.frozen = frozen;
  }

  size_t count_trainable() const {
    size_t n = 0;
    for (const auto& [name, p] : params_)
      if (p.trainable) n += p.tensor.numel();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const std::string& name : order_) {
      const Param<T>& p = get(name);
      Tensor<U>& t = out.create(name, p.tensor.shape, p.trainable);
      t = p.tensor.template cast<U>();
      out.get(name).frozen = p.frozen;
    }
    return out;
  }

 private:
  std::map<std::string, Param<T>> params_;
  std::vector<std::string> order_;  // creation order, used for stable checkpoints
};

// A static computation graph: nodes are added in topological order (inputs
// must already exist), forward caches every activation, backward walks the
// node list in reverse and accumulates into Tensor::grad buffers.
template <typename T>
class Graph {
 public:
  int add_input() {
    if (!nodes_.empty()) throw StateError("graph input must be the first node");
    nodes_.push_back(NodeSpec{});
    return 0;
  }

  int add(NodeSpec spec) {
    const int id = static_cast<int>(nodes_.size());
    if (id == 0) throw StateError("add an input node first");
    if (spec.kind == OpKind::Input) throw ArgumentError("graph may have only one input node");
    if (spec.in0 < 0 || spec.in0 >= id) throw ArgumentError("node input out of range");
    if (spec.kind == OpKind::Add) {
      if (spec.in1 < 0 || spec.in1 >= id) throw ArgumentError("add node needs two valid inputs");
    } else if (spec.in1 != -1) {
      throw ArgumentError("only add nodes take a second input");
    }
    switch (spec.kind) {
      case OpKind::Conv2d:
        if (spec.pad < 0) throw ArgumentError("conv pad must be >= 0");
        if (spec.w.empty()) throw ArgumentError("conv needs a w param");
        break;
      case OpKind::Dense:
        if (spec.w.empty() || spec.b.empty()) throw ArgumentError("dense needs w and b params");
        break;
      case OpKind::BatchNorm:
        if (spec.gamma.empty() || spec.beta.empty() || spec.rmean.empty() || spec.rvar.empty())
          throw ArgumentError("batchnorm needs gamma/beta/rmean/rvar params");
        if (spec.eps <= 0.0) throw ArgumentError("batchnorm eps must be positive");
        break;
      case OpKind::MaxPool:
        if (spec.window < 1) throw ArgumentError("maxpool window must be >= 1");
        if (spec.pad < -1) throw ArgumentError("pool pad must be >= 0, or -1 for same");
        break;
      case OpKind::MeanPool:
        if (spec.window < 0) throw ArgumentError("meanpool window must be >= 0");
        if (spec.pad < -1) throw ArgumentError("pool pad must be >= 0, or -1 for same");
        break;
      default:
        break;
    }
    if (spec.stride < 1) throw ArgumentError("stride must be >= 1");
    nodes_.push_back(spec);
    return id;
  }

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  int output_node() const { return static_cast<int>(nodes_.size()) - 1; }
  size_t node_count() const { return nodes_.size(); }
  const NodeSpec& node(int id) const { return nodes_.at(static_cast<size_t>(id)); }

  void set_frozen(const std::string& prefix, bool frozen) { params_.set_frozen(prefix, frozen); }

  // Runs the whole graph; train toggles batch-norm batch statistics. A frozen
  // batch-norm layer always runs in eval mode so its behavior cannot drift
  // while the optimizer is excluded from touching it.
  const Tensor<T>& forward(const Tensor<T>& input, bool train) {
    if (nodes_.empty() || nodes_[0].kind != OpKind::Input) throw StateError("graph has no input node");
    acts_.resize(nodes_.size());
    bn_caches_.resize(nodes_.size());
    argmax_.resize(nodes_.size());
    acts_[0].reset(input.shape);
    acts_[0].values = input.values;
    for (size_t i = 1; i < nodes_.size(); ++i) {
      const NodeSpec& nd = nodes_[i];
      const Tensor<T>& a = acts_[static_cast<size_t>(nd.in0)];
      Tensor<T>& out = acts_[i];
      switch (nd.kind) {
        case OpKind::Conv2d:
          layers::conv2d_forward(a, params_.get(nd.w).tensor,
                                 nd.b.empty() ? nullptr : &params_.get(nd.b).tensor, nd.stride,
                                 nd.pad, out);
          break;
        case OpKind::BatchNorm: {
          const bool frozen = params_.get(nd.gamma).frozen;
          const bool use_batch = train && !frozen;
          layers::batchnorm_forward(a, params_.get(nd.gamma).tensor, params_.get(nd.beta).tensor,
                                    params_.get(nd.rmean).tensor, params_.get(nd.rvar).tensor,
                                    nd.momentum, nd.eps, use_batch, use_batch, out, bn_caches_[i]);
          break;
        }
        case OpKind::Relu:
          layers::relu_forward(a, out);
          break;
        case OpKind::MaxPool:
          layers::maxpool_forward(a, nd.window, nd.stride, nd.pad, out, argmax_[i]);
          break;
        case OpKind::MeanPool: {
          const int win = nd.window == 0 ? a.h() : nd.window;
          const int st = nd.window == 0 ? 1 : nd.stride;
          if (nd.window == 0 && a.h() != a.w())
            throw ShapeError("global meanpool needs a square activation");
          layers::meanpool_forward(a, win, st, nd.pad, out);
          break;
        }
        case OpKind::Upsample2:
          layers::upsample2_forward(a, out);
          break;
        case OpKind::Add:
          layers::add_forward(a, acts_[static_cast<size_t>(nd.in1)], out);
          break;
        case OpKind::Dense:
          layers::dense_forward(a, params_.get(nd.w).tensor, params_.get(nd.b).tensor, out);
          break;
        case OpKind::Input:
          throw StateError("unexpected input node");
      }
      out.check_finite((std::string(op_name(nd.kind)) + " output (node " + std::to_string(i) + ")").c_str());
    }
    return acts_.back();
  }

  // Backpropagates from the output node. Parameter gradients accumulate into
  // ParamStore grads; call params().zero_grad() between optimizer steps.
  void backward(const Tensor<T>& grad_output) {
    if (acts_.empty()) throw StateError("backward before forward");
    if (!grad_output.same_shape(acts_.back())) throw ShapeError("output gradient shape mismatch");
    for (auto& a : acts_) a.zero_grad();
    acts_.back().grad = grad_output.values;
    for (size_t i = nodes_.size(); i-- > 1;) {
      const NodeSpec& nd = nodes_[i];
      Tensor<T>& a = acts_[static_cast<size_t>(nd.in0)];
      Tensor<T>& out = acts_[i];
      // reuse the activation's grad buffer as this node's upstream gradient
      Tensor<T> up;
      up.shape = out.shape;
      up.values.swap(out.grad);
      switch (nd.kind) {
        case OpKind::Conv2d:
          layers::conv2d_backward(a, params_.get(nd.w).tensor, up, nd.stride, nd.pad, &a,
                                  params_.get(nd.w).tensor,
                                  nd.b.empty() ? nullptr : &params_.get(nd.b).tensor);
          break;
        case OpKind::BatchNorm:
          layers::batchnorm_backward(a, params_.get(nd.gamma).tensor, up, bn_caches_[i], &a,
                                     params_.get(nd.gamma).tensor, params_.get(nd.beta).tensor);
          break;
        case OpKind::Relu:
          layers::relu_backward(a, up, a);
          break;
        case OpKind::MaxPool:
          layers::maxpool_backward(up, argmax_[i], a);
          break;
        case OpKind::MeanPool: {
          const int win = nd.window == 0 ? a.h() : nd.window;
          const int st = nd.window == 0 ? 1 : nd.stride;
          layers::meanpool_backward(a, up, win, st, nd.pad, a);
          break;
        }
        case OpKind::Upsample2:
          layers::upsample2_backward(up, a);
          break;
        case OpKind::Add: {
          Tensor<T>& b = acts_[static_cast<size_t>(nd.in1)];
          for (size_t k = 0; k < up.numel(); ++k) {
            a.grad[k] += up.values[k];
            b.grad[k] += up.values[k];
          }
          break;
        }
        case OpKind::Dense:
          layers::dense_backward(a, params_.get(nd.w).tensor, up, &a, params_.get(nd.w).tensor,
                                 params_.get(nd.b).tensor);
          break;
        case OpKind::Input:
          throw StateError("unexpected input node");
      }
      out.grad.swap(up.values);  // restore (diagnostics may want it)
    }
  }

  const Tensor<T>& activation(int id) const { return acts_.at(static_cast<size_t>(id)); }
  const Tensor<T>& input_activation() const { return acts_.at(0); }

  // Structural copy with params converted to U; used to re-run a trained float
  // graph in double precision for finite-difference verification.
  template <typename U>
  Graph<U> cast() const {
    Graph<U> out;
    out.nodes_ = nodes_;
    out.params_ = params_.template cast<U>();
    return out;
  }

  template <typename U>
  friend class Graph;

 private:
  std::vector<NodeSpec> nodes_;
  ParamStore<T> params_;
  std::vector<Tensor<T>> acts_;
  std::vector<layers::BnCache<T>> bn_caches_;
  std::vector<std::vector<int64_t>> argmax_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: binary, little-endian.
//   magic "MPK1", u32 record count, then per record:
//     u16 name length, name bytes, u8 flags (bit0 trainable, bit1 frozen),
//     u8 ndim, i32 dims[ndim], f32 values (row-major).
// ---------------------------------------------------------------------------

struct CheckpointRecord {
  std::string name;
  bool trainable = true;
  bool frozen = false;
  std::vector<int> shape;
  std::vector<float> values;
};

namespace detail {

inline void write_bytes(std::FILE* f, const void* p, size_t n, const std::string& path) {
  if (std::fwrite(p, 1, n, f) != n) throw IoError("short write: " + path);
}

inline void read_bytes(std::FILE* f, void* p, size_t n, const std::string& path) {
  if (std::fread(p, 1, n, f) != n) throw IoError("truncated checkpoint: " + path);
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open for writing: " + path);
  try {
    detail::write_bytes(f, "MPK1", 4, path);
    const uint32_t count = static_cast<uint32_t>(records.size());
    detail::write_bytes(f, &count, 4, path);
    for (const CheckpointRecord& r : records) {
      if (r.name.empty() || r.name.size() > 65535) throw ArgumentError("bad checkpoint record name");
      size_t numel = 1;
      for (int d : r.shape) numel *= static_cast<size_t>(d);
      if (numel != r.values.size()) throw ShapeError("checkpoint record value count mismatch: " + r.name);
      const uint16_t nlen = static_cast<uint16_t>(r.name.size());
      detail::write_bytes(f, &nlen, 2, path);
      detail::write_bytes(f, r.name.data(), nlen, path);
      const uint8_t flags = static_cast<uint8_t>((r.trainable ? 1 : 0) | (r.frozen ? 2 : 0));
      detail::write_bytes(f, &flags, 1, path);
      const uint8_t ndim = static_cast<uint8_t>(r.shape.size());
      detail::write_bytes(f, &ndim, 1, path);
      for (int d : r.shape) {
        const int32_t v = d;
        detail::write_bytes(f, &v, 4, path);
      }
      if (!r.values.empty()) detail::write_bytes(f, r.values.data(), 4 * r.values.size(), path);
    }
  } catch (...) {
    std::fclose(f);
    throw;
  }
  if (std::fclose(f) != 0) throw IoError("close failed: " + path);
}

inline std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open: " + path);
  std::vector<CheckpointRecord> records;
  try {
    char magic[4];
    detail::read_bytes(f, magic, 4, path);
    if (std::string(magic, 4) != "MPK1") throw FormatError("not a checkpoint file: " + path);
    uint32_t count = 0;
    detail::read_bytes(f, &count, 4, path);
    records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
      CheckpointRecord r;
      uint16_t nlen = 0;
      detail::read_bytes(f, &nlen, 2, path);
      r.name.resize(nlen);
      detail::read_bytes(f, r.name.data(), nlen, path);
      uint8_t flags = 0, ndim = 0;
      detail::read_bytes(f, &flags, 1, path);
      detail::read_bytes(f, &ndim, 1, path);
      r.trainable = (flags & 1) != 0;
      r.frozen = (flags & 2) != 0;
      size_t numel = 1;
      for (int d = 0; d < ndim; ++d) {
        int32_t v = 0;
        detail::read_bytes(f, &v, 4, path);
        if (v <= 0) throw FormatError("non-positive dimension in checkpoint: " + path);
        r.shape.push_back(v);
        numel *= static_cast<size_t>(v);
      }
      r.values.resize(numel);
      if (numel) detail::read_bytes(f, r.values.data(), 4 * numel, path);
      records.push_back(std::move(r));
    }
    int trailing = std::fgetc(f);
    if (trailing != EOF) throw FormatError("trailing bytes after checkpoint records: " + path);
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
  return records;
}

template <typename T>
std::vector<CheckpointRecord> params_to_records(const ParamStore<T>& store) {
  std::vector<CheckpointRecord> records;
  for (const std::string& name : store.names()) {
    const Param<T>& p = store.get(name);
    CheckpointRecord r;
    r.name = name;
    r.trainable = p.trainable;
    r.frozen = p.frozen;
    r.shape = p.tensor.shape;
    r.values.resize(p.tensor.numel());
    for (size_t i = 0; i < r.values.size(); ++i) r.values[i] = static_cast<float>(p.tensor.values[i]);
    records.push_back(std::move(r));
  }
  return records;
}

// Loads values into an existing store; every record must match a parameter of
// identical shape, and every parameter must be covered exactly once.
template <typename T>
void records_to_params(const std::vector<CheckpointRecord>& records, ParamStore<T>& store) {
  std::set<std::string> seen;
  for (const CheckpointRecord& r : records) {
    if (!store.has(r.name)) throw FormatError("checkpoint has unknown parameter: " + r.name);
    Param<T>& p = store.get(r.name);
    if (p.tensor.shape != r.shape)
      throw ShapeError("checkpoint shape mismatch for " + r.name + ": file " + shape_str(r.shape) +
                       " vs graph " + shape_str(p.tensor.shape));
    for (size_t i = 0; i < r.values.size(); ++i) p.tensor.values[i] = static_cast<T>(r.values[i]);
    seen.insert(r.name);
  }
  for (const std::string& name : store.names())
    if (!seen.count(name)) throw FormatError("checkpoint missing parameter: " + name);
}

template <typename T>
void save_params(const ParamStore<T>& store, const std::string& path) {
  write_checkpoint(path, params_to_records(store));
}

template <typename T>
void load_params(const std::string& path, ParamStore<T>& store) {
  records_to_params(read_checkpoint(path), store);
}

}  // namespace msiseg
