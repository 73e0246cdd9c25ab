#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace das {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense 64-bit tensor with a gradient slot, shared-handle semantics.
///
/// Copying a Tensor copies the handle; ops that build the computation graph
/// capture handles so gradients land in the original storage. Gradients
/// accumulate across backward calls until zero_grad().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rows() const;  ///< shape[0] of a 2-D tensor
  std::size_t cols() const;  ///< shape[1] of a 2-D tensor

  std::span<const double> values() const;
  std::span<double> values_mut();

  /// True once backward has deposited something here.
  bool has_grad() const;
  std::span<const double> grad() const;

  double item() const;  ///< sole element of a one-element tensor

  bool requires_grad() const;
  void set_requires_grad(bool v);
  /// Frozen tensors participate in forward math but never accumulate grad.
  bool frozen() const;
  void set_frozen(bool v);
  /// requires_grad && !frozen: this tensor is a gradient target.
  bool wants_grad() const;

  void zero_grad();

  /// Gradient buffer, materialized to zeros on first use. Op internals.
  std::span<double> grad_accum();

  /// Stable identity of the underlying storage.
  const void* id() const;

  /// Deep copy (fresh storage, no grad, same flags).
  Tensor clone() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  void require_defined() const;
};

/// Ordered record of executed ops; backward replays it in exact reverse
/// execution order. One tape is active per thread at a time (TapeScope).
/// No active tape means no recording: forwards run in inference mode.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear();

  /// Seeds d(loss)/d(loss) = 1 and replays recorded nodes in reverse.
  /// loss must be a scalar produced on this tape.
  void backward(const Tensor& loss);

  static Tape* current();

  /// Op internals: register a backward closure for an op that produced out.
  void record(const Tensor& out, std::function<void()> backward_fn);
  bool produced(const Tensor& t) const;

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<const void*> produced_ids_;
};

/// Binds a tape as the thread's recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

/// Counts multiply-add operations performed by matmul forwards while alive.
class MacCounterScope {
 public:
  MacCounterScope();
  ~MacCounterScope();
  MacCounterScope(const MacCounterScope&) = delete;
  MacCounterScope& operator=(const MacCounterScope&) = delete;

  std::uint64_t count() const { return count_; }

  static void add(std::uint64_t macs);

 private:
  std::uint64_t count_ = 0;
  MacCounterScope* prev_;
};

// Ops. Each records a node on the active tape when an input wants grad
// (directly or transitively).

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
/// [B x d] plus a length-d bias broadcast over rows. The only broadcast form.
Tensor add_bias_row(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
double sigmoid(double x);
Tensor sum(const Tensor& x);
/// Mean over the batch of -log softmax(logits)[label]; max-stabilized.
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& labels);

/// Backward through the currently active tape.
void backward(const Tensor& loss);

/// Trainable-or-frozen weight. The tensor always has requires_grad set;
/// freezing stops gradient accumulation and optimizer updates.
class Parameter {
 public:
  Parameter() = default;
  explicit Parameter(Tensor t);

  const Tensor& tensor() const { return tensor_; }
  Tensor& tensor() { return tensor_; }

  bool frozen() const;
  void freeze();
  void unfreeze();

  std::size_t numel() const { return tensor_.numel(); }
  void zero_grad() { tensor_.zero_grad(); }

 private:
  Tensor tensor_;
};

}  // namespace das
