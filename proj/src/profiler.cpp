#include "pacn/profiler.hpp"

#include <iomanip>
#include <map>
#include <sstream>

namespace pacn {

using i64 = std::int64_t;

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv:
      return "conv";
    case LayerKind::fc:
      return "fc";
    case LayerKind::attention:
      return "attention";
    case LayerKind::norm:
      return "norm";
    case LayerKind::pool:
      return "pool";
    case LayerKind::elementwise:
      return "elementwise";
  }
  return "?";
}

namespace {

i64 ceil_div(i64 a, i64 b) { return (a + b - 1) / b; }

bool runtime_tallied(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::fc || k == LayerKind::attention;
}

}  // namespace

ComplexityReport profile(const PacnConfig& c) {
  c.validate();
  ComplexityReport r;
  auto row = [&](std::string path, LayerKind kind, i64 params, i64 macs) {
    r.rows.push_back({std::move(path), kind, params, macs});
  };
  const i64 k2 = kKernelSize * kKernelSize;

  i64 ch = 2, F = c.input_bins, T = c.input_frames;
  for (std::size_t i = 0; i < c.pre_channels.size(); ++i) {
    const std::string s = "pre." + std::to_string(i);
    const i64 out = c.pre_channels[i];
    row(s + ".pw", LayerKind::conv, ch * out + out, F * T * out * ch);
    F = ceil_div(F, c.pre_strides[i].f);
    T = ceil_div(T, c.pre_strides[i].t);
    row(s + ".dw", LayerKind::conv, k2 * out + out, F * T * out * k2);
    if (c.arn_enabled && i == 0) row(s + ".arn", LayerKind::norm, 2 * out + 1, F * T * out);
    row(s + ".bn", LayerKind::norm, 2 * out, F * T * out);
    F /= c.pre_pool[i].f;
    T /= c.pre_pool[i].t;
    row(s + ".pool", LayerKind::pool, 0, 0);
    if (c.arn_enabled && i > 0) row(s + ".arn", LayerKind::norm, 2 * out + 1, F * T * out);
    ch = out;
  }

  const i64 c_pre = ch, d = c.gci_embed_dim, h = c.gci_mlp_hidden, L = T;
  row("gci.freq_mean", LayerKind::pool, 0, c_pre * L);
  row("gci.proj", LayerKind::fc, c_pre * d + d, L * c_pre * d);
  row("gci.ln1", LayerKind::norm, 2 * d, L * d);
  row("gci.attn", LayerKind::attention, 4 * (d * d + d), 4 * L * d * d + 2 * L * L * d);
  row("gci.ln2", LayerKind::norm, 2 * d, L * d);
  row("gci.mlp.fc1", LayerKind::fc, d * h + h, L * d * h);
  row("gci.mlp.fc2", LayerKind::fc, h * d + d, L * h * d);
  row("gci.token_mean", LayerKind::pool, 0, d);
  if (c.wiring_mode == WiringMode::serial) {
    row("gci.back", LayerKind::fc, d * c_pre + c_pre, L * d * c_pre);
  }

  for (std::size_t i = 0; i < c.lci_channels.size(); ++i) {
    const std::string s = "lci." + std::to_string(i);
    const i64 out = c.lci_channels[i];
    row(s + ".pw", LayerKind::conv, ch * out + out, F * T * out * ch);
    row(s + ".dw", LayerKind::conv, k2 * out + out, F * T * out * k2);
    row(s + ".bn", LayerKind::norm, 2 * out, F * T * out);
    ch = out;
  }
  row("lci.grn", LayerKind::norm, 2 * ch, F * T * ch);
  row("lci.gap", LayerKind::pool, 0, ch);

  const i64 n = c.num_classes;
  if (c.wiring_mode == WiringMode::no_fusion) {
    row("head.gci_fc", LayerKind::fc, d * n + n, d * n);
    row("head.lci_fc", LayerKind::fc, ch * n + n, ch * n);
    row("head.average", LayerKind::elementwise, 0, n);
  } else {
    row("head.fc", LayerKind::fc, (d + ch) * n + n, (d + ch) * n);
  }

  for (const auto& x : r.rows) {
    r.total_params += x.params;
    r.total_macs += x.macs;
  }
  return r;
}

std::string ComplexityReport::to_text() const {
  std::size_t w = 5;
  for (const auto& x : rows) w = std::max(w, x.path.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "layer" << "  " << std::setw(11) << "kind"
     << std::right << std::setw(10) << "params" << std::setw(12) << "macs" << "\n";
  for (const auto& x : rows) {
    os << std::left << std::setw(static_cast<int>(w)) << x.path << "  " << std::setw(11)
       << to_string(x.kind) << std::right << std::setw(10) << x.params << std::setw(12) << x.macs
       << "\n";
  }
  os << std::left << std::setw(static_cast<int>(w)) << "total" << "  " << std::setw(11) << ""
     << std::right << std::setw(10) << total_params << std::setw(12) << total_macs << "\n";
  os << std::fixed << std::setprecision(2) << "PN " << total_params / 1000.0 << "k, MACs "
     << total_macs / 1e6 << "M\n";
  return os.str();
}

std::string ComplexityReport::to_csv() const {
  std::ostringstream os;
  os << "layer,kind,params,macs\n";
  for (const auto& x : rows) os << x.path << "," << to_string(x.kind) << "," << x.params << "," << x.macs << "\n";
  os << "total,," << total_params << "," << total_macs << "\n";
  return os.str();
}

RuntimeCheck verify_against_runtime(const PacnConfig& config) {
  const ComplexityReport report = profile(config);
  PacnModel model(config, 1);
  Tensor x({1, 2, config.input_bins, config.input_frames});
  for (i64 i = 0; i < x.size(); ++i) x[i] = static_cast<float>((i % 17) - 8) * 0.1f;
  MacTally tally;
  model.predict(x, &tally);

  RuntimeCheck out;
  std::map<std::string, i64> remaining = tally.by_layer;
  for (const auto& row : report.rows) {
    if (!runtime_tallied(row.kind)) continue;
    out.counted_macs += row.macs;
    auto it = remaining.find(row.path);
    const i64 seen = it == remaining.end() ? 0 : it->second;
    if (it != remaining.end()) remaining.erase(it);
    if (seen != row.macs && out.first_divergent_layer.empty()) {
      out.first_divergent_layer = row.path;
      out.message = row.path + ": counted " + std::to_string(row.macs) + " MACs, runtime tallied " +
                    std::to_string(seen);
    }
  }
  if (out.first_divergent_layer.empty() && !remaining.empty()) {
    out.first_divergent_layer = remaining.begin()->first;
    out.message = remaining.begin()->first + ": runtime tallied " +
                  std::to_string(remaining.begin()->second) + " MACs for a layer absent from the report";
  }
  out.tallied_macs = tally.total();
  out.ok = out.first_divergent_layer.empty();
  if (out.ok) out.message = "runtime tally matches (" + std::to_string(out.tallied_macs) + " MACs)";
  return out;
}

}  // namespace pacn
