#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "das/rng.hpp"
#include "das/tensor.hpp"

namespace das {

/// Which modules of an n-block chain are replaced by short-cut adapters.
class SkipMask {
 public:
  SkipMask() = default;
  /// Empty mask over n modules.
  explicit SkipMask(std::size_t n);
  /// Mask with the given skipped indices (validated, stored sorted).
  SkipMask(std::size_t n, std::vector<std::size_t> skipped);

  std::size_t n() const { return n_; }
  std::size_t count() const { return skipped_.size(); }
  bool contains(std::size_t i) const;
  const std::vector<std::size_t>& skipped() const { return skipped_; }

  bool operator==(const SkipMask& other) const = default;

  /// "2|5" for {2,5}; "-" when empty. Stable, CSV-safe.
  std::string to_string() const;

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> skipped_;
};

struct NetworkDims {
  std::size_t input_dim = 0;
  std::size_t d = 0;
  std::size_t d_ff = 0;
  std::size_t h_adapt = 0;
  std::size_t h_skip = 0;
  std::size_t classes = 0;
  std::size_t n = 0;

  bool operator==(const NetworkDims&) const = default;
  void validate() const;
};

struct Linear {
  Parameter w;
  Parameter b;

  Tensor forward(const Tensor& x) const;
  std::size_t numel() const { return w.numel() + b.numel(); }
};

/// Bottleneck module ReLU(x W_in) W_out with h strictly below d.
struct Adapter {
  Parameter w_in;   // [d x h]
  Parameter w_out;  // [h x d]

  static Adapter fresh(std::size_t d, std::size_t h, Rng& rng);
  std::size_t numel() const { return w_in.numel() + w_out.numel(); }
  Adapter clone() const;
};

/// Two-layer residual MLP body (the frozen pretrained unit once training
/// ends). The residual sum is applied by the stage functions below.
struct ResidualBlock {
  Linear fc1;  // d -> d_ff
  Linear fc2;  // d_ff -> d

  static ResidualBlock random_init(std::size_t d, std::size_t d_ff, Rng& rng);
  Tensor forward(const Tensor& x) const;
  std::size_t numel() const { return fc1.numel() + fc2.numel(); }
  void freeze();
  bool frozen() const;
  ResidualBlock clone() const;
  /// Scales the block's output exactly by factor (fc2 weights and bias).
  void scale_output(double factor);
};

Tensor adapter_forward(const Adapter& a, const Tensor& x);
/// x + block(x) + adapter(x): a kept module under parallel adaptation.
Tensor block_forward_adapted(const ResidualBlock& block, const Adapter& a,
                             const Tensor& x);
/// x + adapter(x): a skipped module; the block is not evaluated.
Tensor block_forward_skipped(const Adapter& skip_adapter, const Tensor& x);

class PrunedNetwork;

/// Ordered chain of n blocks, each wearing a parallel adapter and a
/// short-cut adapter; embed and head bracket the chain. Only embed, head,
/// and adapters are trainable once blocks are frozen.
class SkippableNetwork {
 public:
  SkippableNetwork(const NetworkDims& dims, Rng& rng);

  const NetworkDims& dims() const { return dims_; }
  std::size_t n() const { return dims_.n; }

  Tensor forward(const Tensor& x, const SkipMask& mask) const;
  /// Chain without any adapters: embed -> x + block(x) -> head. The
  /// pretraining path and the reference the zero-init network reproduces.
  Tensor backbone_forward(const Tensor& x) const;

  const Linear& embed() const { return embed_; }
  const Linear& head() const { return head_; }
  const ResidualBlock& block(std::size_t i) const { return blocks_.at(i); }
  ResidualBlock& block(std::size_t i) { return blocks_.at(i); }
  const Adapter& adapt_adapter(std::size_t i) const { return adapt_.at(i); }
  const Adapter& skip_adapter(std::size_t i) const { return skip_.at(i); }

  void freeze_blocks();
  void attach_fresh_adapters(Rng& rng);

  /// embed + head + every adapter.
  std::vector<Parameter> trainable_params() const;
  /// All adapters (their own learning-rate group).
  std::vector<Parameter> adapter_params() const;
  /// embed + head.
  std::vector<Parameter> head_params() const;
  /// All block parameters.
  std::vector<Parameter> block_params() const;
  /// embed + blocks + head: the pretraining parameter set.
  std::vector<Parameter> backbone_params() const;

  std::size_t trainable_param_count() const;
  std::size_t frozen_param_count() const;
  void zero_grad();

  PrunedNetwork prune(const SkipMask& mask) const;

 private:
  friend class PrunedNetwork;
  friend SkippableNetwork load_checkpoint(const std::string& path);
  SkippableNetwork() = default;

  NetworkDims dims_;
  Linear embed_;
  std::vector<ResidualBlock> blocks_;
  std::vector<Adapter> adapt_;
  std::vector<Adapter> skip_;
  Linear head_;
};

/// Standalone deployment network: kept blocks with their parallel adapters,
/// short-cut adapters where modules were skipped. Forward is bit-identical
/// to the masked forward of the network it was pruned from.
class PrunedNetwork {
 public:
  struct Stage {
    bool skipped = false;
    std::size_t orig_index = 0;
    ResidualBlock block;  // kept stages only
    Adapter adapter;      // parallel adapter if kept, short-cut if skipped
  };

  Tensor forward(const Tensor& x) const;

  const NetworkDims& dims() const { return dims_; }
  const SkipMask& final_mask() const { return mask_; }
  const std::vector<Stage>& stages() const { return stages_; }
  const Linear& embed() const { return embed_; }
  const Linear& head() const { return head_; }

  std::vector<Parameter> trainable_params() const;
  std::vector<Parameter> adapter_params() const;
  std::vector<Parameter> head_params() const;
  std::size_t trainable_param_count() const;
  std::size_t frozen_param_count() const;
  void zero_grad();

  /// Replaces every stage adapter with a fresh zero-init one.
  void attach_fresh_adapters(Rng& rng);

 private:
  friend class SkippableNetwork;
  friend PrunedNetwork load_pruned_checkpoint(const std::string& path);

  NetworkDims dims_;
  SkipMask mask_;
  Linear embed_;
  std::vector<Stage> stages_;
  Linear head_;
};

/// Analytic multiply-add count of one masked forward pass at the given
/// batch size. Counts exactly what the matmul instrumentation counts.
std::uint64_t count_flops(const NetworkDims& dims, const SkipMask& mask,
                          std::size_t batch);

struct FlopReport {
  std::uint64_t full = 0;
  std::uint64_t pruned = 0;
  double saved_fraction = 0.0;
};

/// Per-sample counts for the empty mask vs the given mask.
FlopReport flop_report(const NetworkDims& dims, const SkipMask& mask);

void save_checkpoint(const SkippableNetwork& net, const std::string& path);
SkippableNetwork load_checkpoint(const std::string& path);
void save_pruned_checkpoint(const PrunedNetwork& net, const std::string& path);
PrunedNetwork load_pruned_checkpoint(const std::string& path);
/// Peeks at a checkpoint file to see whether it is a pruned export.
bool checkpoint_is_pruned(const std::string& path);

}  // namespace das
