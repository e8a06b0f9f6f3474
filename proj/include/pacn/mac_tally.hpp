#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace pacn {

/// Counts multiplies actually executed by the conv/FC/attention kernels,
/// keyed by the layer path active when the kernel ran. Install with
/// TallyScope; kernels call tally_macs().
struct MacTally {
  std::map<std::string, std::int64_t> by_layer;
  std::int64_t total() const {
    std::int64_t t = 0;
    for (const auto& [_, v] : by_layer) t += v;
    return t;
  }
};

namespace detail {
struct TallyState {
  MacTally* tally = nullptr;
  const std::string* layer = nullptr;
};
inline thread_local TallyState tally_state;
}  // namespace detail

inline void tally_macs(std::int64_t n) {
  auto& st = detail::tally_state;
  if (st.tally && st.layer) st.tally->by_layer[*st.layer] += n;
}

inline bool tally_active() { return detail::tally_state.tally != nullptr; }

/// Attributes kernel multiplies to `layer` while alive. Nests by restoring
/// the previous layer on destruction.
class TallyScope {
 public:
  TallyScope(MacTally* tally, std::string layer) : layer_(std::move(layer)) {
    prev_ = detail::tally_state;
    if (tally) {
      detail::tally_state.tally = tally;
      detail::tally_state.layer = &layer_;
    } else if (prev_.tally) {
      detail::tally_state.layer = &layer_;
    }
  }
  ~TallyScope() { detail::tally_state = prev_; }
  TallyScope(const TallyScope&) = delete;
  TallyScope& operator=(const TallyScope&) = delete;

 private:
  std::string layer_;
  detail::TallyState prev_;
};

}  // namespace pacn
