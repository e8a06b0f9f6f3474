#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pacn/autograd.hpp"
#include "pacn/mac_tally.hpp"
#include "pacn/ops.hpp"
#include "pacn/tensor.hpp"

namespace pacn {

enum class WiringMode { parallel, serial, no_fusion };

std::string to_string(WiringMode mode);
WiringMode wiring_mode_from_string(const std::string& s);

/// Depth-wise kernel size used by every BSConv block.
inline constexpr std::int64_t kKernelSize = 3;

/// Declarative hyperparameters; fully determines the graph, the parameter
/// count and the MACs. Defaults are the shipped student reference.
struct PacnConfig {
  std::vector<std::int64_t> pre_channels{8, 16};
  std::vector<Stride2> pre_strides{{2, 2}, {2, 1}};
  std::vector<Stride2> pre_pool{{2, 1}, {2, 2}};
  std::vector<std::int64_t> lci_channels{20, 20};
  std::int64_t gci_embed_dim = 16;
  std::int64_t gci_heads = 4;
  std::int64_t gci_mlp_hidden = 48;
  std::int64_t shuffle_groups = 2;
  std::int64_t num_classes = 10;
  WiringMode wiring_mode = WiringMode::parallel;
  bool arn_enabled = true;
  // Input feature geometry (channels are always log-Mel + delta).
  std::int64_t input_bins = 256;
  std::int64_t input_frames = 65;

  /// Throws ConfigError describing the first inconsistency.
  void validate() const;

  /// (c, f, t) after the pre-processing module.
  Shape pre_output_shape() const;
  std::int64_t fused_channels() const;

  std::string to_json() const;
  static PacnConfig from_json(const std::string& text);
  static PacnConfig load(const std::string& path);

  /// Same topology with every width multiplied by `factor`.
  PacnConfig widened(std::int64_t factor) const;
};

/// Ordered, path-addressable tensor collection.
class NamedTensors {
 public:
  struct Entry {
    std::string path;
    Tensor value;
  };

  void add(std::string path, Tensor value);
  bool contains(const std::string& path) const { return index_.count(path) != 0; }
  std::size_t index_of(const std::string& path) const;
  Tensor& at(const std::string& path) { return entries_[index_of(path)].value; }
  const Tensor& at(const std::string& path) const { return entries_[index_of(path)].value; }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::int64_t total_elements() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using PacnParams = NamedTensors;

/// Parameters and BN statistics placed on a tape of scalar type T.
template <class T>
struct ModelBinding {
  Tape<T>* tape = nullptr;
  std::vector<Var> params;
  std::vector<BatchNormStats<T>> bn;
  MacTally* tally = nullptr;
};

struct GciOutput {
  Var tokens;  // (n, L, d) after the second residual
  Var vector;  // (n, d) token mean
};

class PacnModel {
 public:
  /// Declares every parameter/buffer for `config` and initializes them from `seed`.
  explicit PacnModel(PacnConfig config, std::uint64_t seed = 0);

  const PacnConfig& config() const { return config_; }
  PacnParams& params() { return params_; }
  const PacnParams& params() const { return params_; }
  /// BatchNorm running statistics (not trainable, not counted as parameters).
  NamedTensors& buffers() { return buffers_; }
  const NamedTensors& buffers() const { return buffers_; }

  template <class T>
  ModelBinding<T> bind(Tape<T>& tape, bool trainable, MacTally* tally = nullptr) const;

  /// Copies BN running statistics updated during a training forward back into buffers().
  template <class T>
  void store_statistics(const ModelBinding<T>& binding);

  /// features (n, 2, F, T) -> logits (n, num_classes)
  template <class T>
  Var forward(ModelBinding<T>& b, Var features, bool training) const;

  template <class T>
  Var preprocess(ModelBinding<T>& b, Var features, bool training) const;
  template <class T>
  GciOutput gci(ModelBinding<T>& b, Var h) const;
  /// h (n, c, f, t) -> (n, c_lci)
  template <class T>
  Var lci(ModelBinding<T>& b, Var h, bool training) const;
  template <class T>
  Var fuse(ModelBinding<T>& b, Var gci_vec, Var lci_vec) const;

  /// Inference-mode logits for a (n, 2, F, T) batch.
  Tensor predict(const Tensor& features, MacTally* tally = nullptr) const;

  /// Paths of ARN balance parameters (clamped to [0, 1] by the optimizer).
  std::vector<std::string> arn_rho_paths() const;

 private:
  template <class T>
  Var p(const ModelBinding<T>& b, const std::string& path) const;
  template <class T>
  Var bn(ModelBinding<T>& b, const std::string& layer, Var x, bool training) const;

  void declare();
  void initialize(std::uint64_t seed);
  void add_param(const std::string& path, Shape shape);

  PacnConfig config_;
  PacnParams params_;
  NamedTensors buffers_;
  std::vector<std::string> bn_layers_;
  std::unordered_map<std::string, std::size_t> bn_index_;
};

/// Stacks FeatureClip-layout tensors (F, T, 2) into a model batch (n, 2, F, T).
Tensor stack_features(const std::vector<const Tensor*>& features);

}  // namespace pacn
