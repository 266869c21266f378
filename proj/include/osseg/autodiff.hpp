#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "osseg/rng.hpp"
#include "osseg/tensor.hpp"

namespace osseg::ad {

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
  explicit operator bool() const { return tape != nullptr; }
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Ordered record of executed primitives. Not shareable between concurrent
/// writers; independent tapes may run on different threads.
template <class T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using Backward = std::function<void(Tape&, const TensorT& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers an input. Gradients are tracked iff value.requires_grad().
  Var<T> leaf(TensorT value) {
    const bool rg = value.requires_grad();
    return push(std::move(value), rg, nullptr);
  }
  Var<T> constant(TensorT value) { return push(std::move(value), false, nullptr); }
  Var<T> variable(TensorT value) { return push(std::move(value), true, nullptr); }

  /// Records the result of a primitive. The backward closure is kept only
  /// when some parent tracks gradients.
  Var<T> record(TensorT value, std::initializer_list<Var<T>> parents, Backward backward) {
    bool rg = false;
    for (const auto& p : parents) {
      check_owned(p);
      rg = rg || nodes_[p.id].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }
  Var<T> record(TensorT value, std::span<const Var<T>> parents, Backward backward) {
    bool rg = false;
    for (const auto& p : parents) {
      check_owned(p);
      rg = rg || nodes_[p.id].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  const TensorT& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds `g` into the running gradient of node `id` during a backward sweep.
  void accumulate(std::size_t id, TensorT g) {
    if (!nodes_[id].requires_grad) return;
    auto& slot = grads_[id];
    if (!slot) {
      slot = std::move(g);
      return;
    }
    auto dst = slot->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Reverse-mode sweep from a single-element output. Returns one gradient
  /// per requested input with that input's shape (zeros if unreachable).
  std::vector<TensorT> grad(Var<T> output, std::span<const Var<T>> inputs) {
    check_owned(output);
    if (output.value().numel() != 1)
      throw TapeError("grad: output must have a single element, got shape " +
                      shape_str(output.shape()));
    for (const auto& in : inputs) {
      check_owned(in);
      if (!nodes_[in.id].requires_grad)
        throw TapeError("grad: input " + std::to_string(in.id) + " does not track gradients");
    }
    grads_.assign(nodes_.size(), std::nullopt);
    if (nodes_[output.id].requires_grad) grads_[output.id] = TensorT(output.shape(), T(1));
    for (std::size_t id = output.id + 1; id-- > 0;) {
      if (!grads_[id] || !nodes_[id].backward) continue;
      nodes_[id].backward(*this, *grads_[id]);
      if (!is_input(id, inputs)) grads_[id].reset();
    }
    std::vector<TensorT> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs)
      out.push_back(grads_[in.id] ? *grads_[in.id] : TensorT(in.shape(), T(0)));
    grads_.clear();
    return out;
  }
  std::vector<TensorT> grad(Var<T> output, std::initializer_list<Var<T>> inputs) {
    return grad(output, std::span<const Var<T>>(inputs.begin(), inputs.size()));
  }

  /// Folds a discrete decision (relu mask, argmax) into a running hash.
  /// Finite-difference checks compare signatures to detect kink crossings.
  void note_branch(std::uint64_t h) {
    branch_hash_ ^= h + 0x9e3779b97f4a7c15ull + (branch_hash_ << 6) + (branch_hash_ >> 2);
  }
  std::uint64_t branch_signature() const { return branch_hash_; }

 private:
  struct Node {
    TensorT value;
    bool requires_grad;
    Backward backward;
  };

  Var<T> push(TensorT value, bool rg, Backward backward) {
    nodes_.push_back(Node{std::move(value), rg, std::move(backward)});
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owned(const Var<T>& v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw TapeError("variable is not on this tape");
  }

  static bool is_input(std::size_t id, std::span<const Var<T>> inputs) {
    for (const auto& in : inputs)
      if (in.id == id) return true;
    return false;
  }

  std::deque<Node> nodes_;  // deque so value() references survive later pushes
  std::vector<std::optional<TensorT>> grads_;
  std::uint64_t branch_hash_ = 0;
};

// Elementwise (operands must have identical shapes).
template <class T> Var<T> add(Var<T> a, Var<T> b);
template <class T> Var<T> sub(Var<T> a, Var<T> b);
template <class T> Var<T> mul(Var<T> a, Var<T> b);
template <class T> Var<T> scale(Var<T> a, T factor);
template <class T> Var<T> add_scalar(Var<T> a, T c);
template <class T> Var<T> log(Var<T> a);
template <class T> Var<T> exp(Var<T> a);
template <class T> Var<T> relu(Var<T> a);
template <class T> Var<T> sigmoid(Var<T> a);
/// log(1 + exp(a)), stable for large |a|.
template <class T> Var<T> softplus(Var<T> a);

// Reductions.
template <class T> Var<T> sum(Var<T> a);
template <class T> Var<T> mean(Var<T> a);
/// Sum along `axis`, keeping that axis with extent 1.
template <class T> Var<T> sum_axis(Var<T> a, std::size_t axis);
/// Max along `axis`, keeping that axis with extent 1. Ties go to the lowest index.
template <class T> Var<T> max(Var<T> a, std::size_t axis);

template <class T> Var<T> softmax(Var<T> logits, std::size_t axis);
template <class T> Var<T> log_softmax(Var<T> logits, std::size_t axis);

// NCHW spatial primitives.
template <class T> Var<T> conv2d(Var<T> input, Var<T> kernel, std::size_t stride, std::size_t padding);
/// Adds bias[c] to every element of channel c.
template <class T> Var<T> add_channel_bias(Var<T> input, Var<T> bias);
/// Bilinear interpolation with half-pixel centers (align_corners = false).
template <class T> Var<T> bilinear_upsample(Var<T> input, std::size_t factor);
/// Non-overlapping k x k average pooling; extents must be divisible by k.
template <class T> Var<T> avg_pool(Var<T> input, std::size_t k);
/// Average pooling onto a grid x grid layout of cells; cell i spans
/// [floor(i*H/grid), ceil((i+1)*H/grid)).
template <class T> Var<T> adaptive_avg_pool(Var<T> input, std::size_t grid);
/// Inverse layout of adaptive_avg_pool: pixel (y, x) reads cell
/// (floor(y*grid/H), floor(x*grid/W)).
template <class T> Var<T> grid_broadcast(Var<T> cells, std::size_t height, std::size_t width);
template <class T> Var<T> concat_channels(std::span<const Var<T>> parts);
/// [N,1,H,W] -> [N,C,H,W] by repetition.
template <class T> Var<T> broadcast_channels(Var<T> input, std::size_t channels);
template <class T> Var<T> reshape(Var<T> input, Shape shape);
/// x[N,in] * w[out,in]^T + b[out].
template <class T> Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);

/// Running statistics of one batch-norm layer.
template <class T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;
};

struct BatchNormOptions {
  bool training = false;  // batch statistics when true, running statistics otherwise
  bool update_running = true;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

template <class T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats,
                  const BatchNormOptions& options);

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
template <class T> Var<T> dropout(Var<T> input, double p, Rng& rng);

}  // namespace osseg::ad
