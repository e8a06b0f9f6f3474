#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pacn/model.hpp"

namespace pacn {

/// Layer classes; only conv, fc and attention are tallied at runtime.
enum class LayerKind { conv, fc, attention, norm, pool, elementwise };

std::string to_string(LayerKind kind);

struct ComplexityRow {
  std::string path;
  LayerKind kind;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

/// Per-layer parameter and MAC accounting for one batch-1 forward pass.
///
/// Conventions: one MAC is one multiply paired with at most one add.
/// Point-wise conv: F*T*c_out*c_in. Depth-wise conv: F_out*T_out*c*k^2 (padded
/// taps included). FC: in*out per token. Attention: 4*L*d^2 + 2*L^2*d.
/// Normalizations and average pooling: 1 per output element. ReLU, max pooling,
/// softmax and residual adds: 0.
struct ComplexityReport {
  std::vector<ComplexityRow> rows;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;

  std::string to_text() const;
  std::string to_csv() const;
};

ComplexityReport profile(const PacnConfig& config);
/// Same report; named after the column of interest.
inline ComplexityReport count_params(const PacnConfig& config) { return profile(config); }
inline ComplexityReport count_macs(const PacnConfig& config) { return profile(config); }

struct RuntimeCheck {
  bool ok = false;
  /// Empty when ok, otherwise the first layer whose tally disagrees.
  std::string first_divergent_layer;
  std::string message;
  std::int64_t counted_macs = 0;  // conv/fc/attention rows of the report
  std::int64_t tallied_macs = 0;  // multiplies executed by those kernels
};

/// Runs one instrumented batch-1 forward pass and compares the kernel tallies
/// with the conv/fc/attention rows of profile(config).
RuntimeCheck verify_against_runtime(const PacnConfig& config);

}  // namespace pacn
