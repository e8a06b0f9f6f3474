#include "pacn/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pacn/arn.hpp"
#include "pacn/rng.hpp"

namespace pacn {

using i64 = std::int64_t;
using json = nlohmann::json;

std::string to_string(WiringMode mode) {
  switch (mode) {
    case WiringMode::parallel:
      return "parallel";
    case WiringMode::serial:
      return "serial";
    case WiringMode::no_fusion:
      return "no_fusion";
  }
  return "?";
}

WiringMode wiring_mode_from_string(const std::string& s) {
  if (s == "parallel") return WiringMode::parallel;
  if (s == "serial") return WiringMode::serial;
  if (s == "no_fusion") return WiringMode::no_fusion;
  throw ConfigError("unknown wiring mode '" + s + "' (expected parallel, serial or no_fusion)");
}

// ---------------------------------------------------------------------------
// PacnConfig

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("invalid PACN config: " + msg);
}

i64 ceil_div(i64 a, i64 b) { return (a + b - 1) / b; }

json stride_list(const std::vector<Stride2>& v) {
  json arr = json::array();
  for (const auto& s : v) arr.push_back({s.f, s.t});
  return arr;
}

std::vector<Stride2> parse_strides(const json& j, const char* key) {
  std::vector<Stride2> out;
  for (const auto& e : j.at(key)) {
    if (!e.is_array() || e.size() != 2) {
      throw ConfigError(std::string("config field '") + key + "' needs [f, t] pairs");
    }
    out.push_back({e[0].get<i64>(), e[1].get<i64>()});
  }
  return out;
}

}  // namespace

void PacnConfig::validate() const {
  check(!pre_channels.empty(), "pre_channels must not be empty");
  check(pre_strides.size() == pre_channels.size(), "pre_strides needs one entry per stage");
  check(pre_pool.size() == pre_channels.size(), "pre_pool needs one entry per stage");
  check(!lci_channels.empty(), "lci_channels must not be empty");
  for (auto c : pre_channels) check(c > 0, "channel widths must be positive");
  for (auto c : lci_channels) check(c > 0, "channel widths must be positive");
  check(gci_embed_dim > 0 && gci_heads > 0 && gci_mlp_hidden > 0, "GCI sizes must be positive");
  check(gci_embed_dim % gci_heads == 0,
        "gci_embed_dim " + std::to_string(gci_embed_dim) + " not divisible by gci_heads " +
            std::to_string(gci_heads));
  check(num_classes >= 2, "num_classes must be >= 2");
  check(shuffle_groups >= 1, "shuffle_groups must be >= 1");
  if (wiring_mode != WiringMode::no_fusion) {
    check(fused_channels() % shuffle_groups == 0,
          "fused channel count " + std::to_string(fused_channels()) +
              " not divisible by shuffle_groups " + std::to_string(shuffle_groups));
  }
  i64 f = input_bins, t = input_frames;
  for (std::size_t i = 0; i < pre_channels.size(); ++i) {
    check(f >= kKernelSize && t >= kKernelSize,
          "stage " + std::to_string(i) + " input smaller than the kernel");
    check(pre_strides[i].f >= 1 && pre_strides[i].t >= 1, "strides must be positive");
    f = ceil_div(f, pre_strides[i].f);
    t = ceil_div(t, pre_strides[i].t);
    check(pre_pool[i].f >= 1 && pre_pool[i].t >= 1 && f >= pre_pool[i].f && t >= pre_pool[i].t,
          "stage " + std::to_string(i) + " pooling window larger than its input");
    f /= pre_pool[i].f;
    t /= pre_pool[i].t;
  }
  check(f >= kKernelSize && t >= kKernelSize, "pre-processing output smaller than the kernel");
}

Shape PacnConfig::pre_output_shape() const {
  i64 f = input_bins, t = input_frames;
  for (std::size_t i = 0; i < pre_channels.size(); ++i) {
    f = ceil_div(f, pre_strides[i].f) / pre_pool[i].f;
    t = ceil_div(t, pre_strides[i].t) / pre_pool[i].t;
  }
  return {pre_channels.back(), f, t};
}

i64 PacnConfig::fused_channels() const { return gci_embed_dim + lci_channels.back(); }

std::string PacnConfig::to_json() const {
  json j;
  j["pre_channels"] = pre_channels;
  j["pre_strides"] = stride_list(pre_strides);
  j["pre_pool"] = stride_list(pre_pool);
  j["lci_channels"] = lci_channels;
  j["gci_embed_dim"] = gci_embed_dim;
  j["gci_heads"] = gci_heads;
  j["gci_mlp_hidden"] = gci_mlp_hidden;
  j["shuffle_groups"] = shuffle_groups;
  j["num_classes"] = num_classes;
  j["wiring_mode"] = to_string(wiring_mode);
  j["arn_enabled"] = arn_enabled;
  j["input_bins"] = input_bins;
  j["input_frames"] = input_frames;
  return j.dump(2);
}

PacnConfig PacnConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  PacnConfig c;
  try {
    c.pre_channels = j.at("pre_channels").get<std::vector<i64>>();
    c.pre_strides = parse_strides(j, "pre_strides");
    c.pre_pool = parse_strides(j, "pre_pool");
    c.lci_channels = j.at("lci_channels").get<std::vector<i64>>();
    c.gci_embed_dim = j.at("gci_embed_dim").get<i64>();
    c.gci_heads = j.at("gci_heads").get<i64>();
    c.gci_mlp_hidden = j.at("gci_mlp_hidden").get<i64>();
    c.shuffle_groups = j.at("shuffle_groups").get<i64>();
    c.num_classes = j.value("num_classes", i64{10});
    c.wiring_mode = wiring_mode_from_string(j.value("wiring_mode", std::string("parallel")));
    c.arn_enabled = j.value("arn_enabled", true);
    c.input_bins = j.value("input_bins", i64{256});
    c.input_frames = j.value("input_frames", i64{65});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field error: ") + e.what());
  }
  c.validate();
  return c;
}

PacnConfig PacnConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

PacnConfig PacnConfig::widened(i64 factor) const {
  PacnConfig c = *this;
  for (auto& v : c.pre_channels) v *= factor;
  for (auto& v : c.lci_channels) v *= factor;
  c.gci_embed_dim *= factor;
  c.gci_mlp_hidden *= factor;
  return c;
}

// ---------------------------------------------------------------------------
// NamedTensors

void NamedTensors::add(std::string path, Tensor value) {
  if (contains(path)) throw ConfigError("duplicate tensor path " + path);
  index_.emplace(path, entries_.size());
  entries_.push_back({std::move(path), std::move(value)});
}

std::size_t NamedTensors::index_of(const std::string& path) const {
  auto it = index_.find(path);
  if (it == index_.end()) throw ConfigError("unknown tensor path " + path);
  return it->second;
}

i64 NamedTensors::total_elements() const {
  i64 n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// PacnModel: declaration and initialization

PacnModel::PacnModel(PacnConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  declare();
  initialize(seed);
}

void PacnModel::add_param(const std::string& path, Shape shape) {
  params_.add(path, Tensor(std::move(shape)));
}

void PacnModel::declare() {
  const auto& c = config_;
  const i64 k = kKernelSize;
  auto conv = [&](const std::string& prefix, i64 in, i64 out) {
    add_param(prefix + ".pw.weight", {out, in});
    add_param(prefix + ".pw.bias", {out});
    add_param(prefix + ".dw.weight", {out, k, k});
    add_param(prefix + ".dw.bias", {out});
  };
  auto norm = [&](const std::string& prefix, i64 ch) {
    add_param(prefix + ".weight", {ch});
    add_param(prefix + ".bias", {ch});
  };
  auto batchnorm = [&](const std::string& prefix, i64 ch) {
    norm(prefix, ch);
    bn_index_[prefix] = bn_layers_.size();
    bn_layers_.push_back(prefix);
    buffers_.add(prefix + ".running_mean", Tensor({ch}, 0.0f));
    buffers_.add(prefix + ".running_var", Tensor({ch}, 1.0f));
  };
  auto arn_layer = [&](const std::string& prefix, i64 ch) {
    add_param(prefix + ".rho", {1});
    add_param(prefix + ".gamma", {ch});
    add_param(prefix + ".beta", {ch});
  };
  auto fc = [&](const std::string& prefix, i64 in, i64 out) {
    add_param(prefix + ".weight", {out, in});
    add_param(prefix + ".bias", {out});
  };

  i64 ch = 2;
  for (std::size_t i = 0; i < c.pre_channels.size(); ++i) {
    const std::string s = "pre." + std::to_string(i);
    const i64 out = c.pre_channels[i];
    conv(s, ch, out);
    if (c.arn_enabled) arn_layer(s + ".arn", out);
    batchnorm(s + ".bn", out);
    ch = out;
  }
  const i64 c_pre = ch;
  const i64 d = c.gci_embed_dim;
  fc("gci.proj", c_pre, d);
  norm("gci.ln1", d);
  for (const char* w : {"q", "k", "v", "o"}) fc(std::string("gci.attn.") + w, d, d);
  norm("gci.ln2", d);
  fc("gci.mlp.fc1", d, c.gci_mlp_hidden);
  fc("gci.mlp.fc2", c.gci_mlp_hidden, d);
  if (c.wiring_mode == WiringMode::serial) fc("gci.back", d, c_pre);

  for (std::size_t i = 0; i < c.lci_channels.size(); ++i) {
    const std::string s = "lci." + std::to_string(i);
    const i64 out = c.lci_channels[i];
    conv(s, ch, out);
    batchnorm(s + ".bn", out);
    ch = out;
  }
  norm("lci.grn", ch);

  if (c.wiring_mode == WiringMode::no_fusion) {
    fc("head.gci_fc", d, c.num_classes);
    fc("head.lci_fc", ch, c.num_classes);
  } else {
    fc("head.fc", d + ch, c.num_classes);
  }
}

namespace {
bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
}  // namespace

void PacnModel::initialize(std::uint64_t seed) {
  Rng rng(derive_seed({seed, 0x1417}));
  for (auto& e : params_.entries()) {
    const std::string& path = e.path;
    Tensor& t = e.value;
    if (ends_with(path, ".rho")) {
      t.fill(0.5f);
    } else if (ends_with(path, ".gamma")) {
      t.fill(1.0f);
    } else if (ends_with(path, ".beta")) {
      t.fill(0.0f);
    } else if (path.rfind("lci.grn", 0) == 0) {
      t.fill(0.0f);
    } else if (path.find(".bn.") != std::string::npos || path.find(".ln") != std::string::npos) {
      t.fill(ends_with(path, ".weight") ? 1.0f : 0.0f);
    } else if (ends_with(path, ".weight")) {
      // LeCun uniform (variance 1/fan_in); fan_in is everything but the output axis.
      const double fan_in = static_cast<double>(t.size() / t.dim(0));
      const double bound = std::sqrt(3.0 / fan_in);
      for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
    } else {
      t.fill(0.0f);
    }
  }
}

std::vector<std::string> PacnModel::arn_rho_paths() const {
  std::vector<std::string> out;
  for (const auto& e : params_.entries()) {
    if (ends_with(e.path, ".arn.rho")) out.push_back(e.path);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binding

template <class T>
ModelBinding<T> PacnModel::bind(Tape<T>& tape, bool trainable, MacTally* tally) const {
  ModelBinding<T> b;
  b.tape = &tape;
  b.tally = tally;
  b.params.reserve(params_.size());
  for (const auto& e : params_.entries()) b.params.push_back(tape.leaf(e.value.cast<T>(), trainable));
  for (const auto& layer : bn_layers_) {
    BatchNormStats<T> st;
    st.running_mean = buffers_.at(layer + ".running_mean").cast<T>();
    st.running_var = buffers_.at(layer + ".running_var").cast<T>();
    b.bn.push_back(std::move(st));
  }
  return b;
}

template <class T>
void PacnModel::store_statistics(const ModelBinding<T>& binding) {
  for (std::size_t i = 0; i < bn_layers_.size(); ++i) {
    buffers_.at(bn_layers_[i] + ".running_mean") = binding.bn[i].running_mean.template cast<float>();
    buffers_.at(bn_layers_[i] + ".running_var") = binding.bn[i].running_var.template cast<float>();
  }
}

template <class T>
Var PacnModel::p(const ModelBinding<T>& b, const std::string& path) const {
  return b.params[params_.index_of(path)];
}

template <class T>
Var PacnModel::bn(ModelBinding<T>& b, const std::string& layer, Var x, bool training) const {
  TallyScope scope(b.tally, layer);
  return batch_norm(*b.tape, x, p(b, layer + ".weight"), p(b, layer + ".bias"),
                    b.bn[bn_index_.at(layer)], training);
}

// ---------------------------------------------------------------------------
// Forward

template <class T>
Var PacnModel::preprocess(ModelBinding<T>& b, Var x, bool training) const {
  Tape<T>& tape = *b.tape;
  const auto& xs = tape.value(x).shape();
  if (xs.size() != 4 || xs[1] != 2 || xs[2] != config_.input_bins || xs[3] != config_.input_frames) {
    throw ConfigError("model input must be (n, 2, " + std::to_string(config_.input_bins) + ", " +
                      std::to_string(config_.input_frames) + "), got " + shape_str(xs));
  }
  Var h = x;
  for (std::size_t i = 0; i < config_.pre_channels.size(); ++i) {
    const std::string s = "pre." + std::to_string(i);
    {
      TallyScope scope(b.tally, s + ".pw");
      h = pointwise_conv(tape, h, p(b, s + ".pw.weight"), p(b, s + ".pw.bias"));
    }
    {
      TallyScope scope(b.tally, s + ".dw");
      h = depthwise_conv(tape, h, p(b, s + ".dw.weight"), p(b, s + ".dw.bias"),
                         config_.pre_strides[i]);
    }
    // ARN follows the first convolution, then closes every later stage.
    if (config_.arn_enabled && i == 0) {
      h = arn(tape, h, p(b, s + ".arn.rho"), p(b, s + ".arn.gamma"), p(b, s + ".arn.beta"));
    }
    h = bn(b, s + ".bn", h, training);
    h = relu(tape, h);
    h = maxpool2d(tape, h, config_.pre_pool[i], config_.pre_pool[i]);
    if (config_.arn_enabled && i > 0) {
      h = arn(tape, h, p(b, s + ".arn.rho"), p(b, s + ".arn.gamma"), p(b, s + ".arn.beta"));
    }
  }
  return h;
}

template <class T>
GciOutput PacnModel::gci(ModelBinding<T>& b, Var h) const {
  Tape<T>& tape = *b.tape;
  // Tokens are time frames: average out frequency, then map channels to d.
  Var tokens = transpose12(tape, mean_axis(tape, h, 2));
  Var z;
  {
    TallyScope scope(b.tally, "gci.proj");
    z = linear(tape, tokens, p(b, "gci.proj.weight"), p(b, "gci.proj.bias"));
  }
  Var a = layer_norm(tape, z, p(b, "gci.ln1.weight"), p(b, "gci.ln1.bias"));
  {
    TallyScope scope(b.tally, "gci.attn");
    MhaWeights w{p(b, "gci.attn.q.weight"), p(b, "gci.attn.q.bias"), p(b, "gci.attn.k.weight"),
                 p(b, "gci.attn.k.bias"),   p(b, "gci.attn.v.weight"), p(b, "gci.attn.v.bias"),
                 p(b, "gci.attn.o.weight"), p(b, "gci.attn.o.bias")};
    a = mha(tape, a, w, config_.gci_heads);
  }
  z = add(tape, z, a);
  Var m = layer_norm(tape, z, p(b, "gci.ln2.weight"), p(b, "gci.ln2.bias"));
  {
    TallyScope scope(b.tally, "gci.mlp.fc1");
    m = linear(tape, m, p(b, "gci.mlp.fc1.weight"), p(b, "gci.mlp.fc1.bias"));
  }
  m = relu(tape, m);
  {
    TallyScope scope(b.tally, "gci.mlp.fc2");
    m = linear(tape, m, p(b, "gci.mlp.fc2.weight"), p(b, "gci.mlp.fc2.bias"));
  }
  z = add(tape, z, m);
  return {z, mean_axis(tape, z, 1)};
}

template <class T>
Var PacnModel::lci(ModelBinding<T>& b, Var h, bool training) const {
  Tape<T>& tape = *b.tape;
  for (std::size_t i = 0; i < config_.lci_channels.size(); ++i) {
    const std::string s = "lci." + std::to_string(i);
    {
      TallyScope scope(b.tally, s + ".pw");
      h = pointwise_conv(tape, h, p(b, s + ".pw.weight"), p(b, s + ".pw.bias"));
    }
    {
      TallyScope scope(b.tally, s + ".dw");
      h = depthwise_conv(tape, h, p(b, s + ".dw.weight"), p(b, s + ".dw.bias"), Stride2{1, 1});
    }
    h = bn(b, s + ".bn", h, training);
    h = relu(tape, h);
  }
  h = grn(tape, h, p(b, "lci.grn.weight"), p(b, "lci.grn.bias"));
  return global_avg_pool(tape, h);
}

template <class T>
Var PacnModel::fuse(ModelBinding<T>& b, Var gci_vec, Var lci_vec) const {
  Tape<T>& tape = *b.tape;
  if (config_.wiring_mode == WiringMode::no_fusion) {
    Var zg, zl;
    {
      TallyScope scope(b.tally, "head.gci_fc");
      zg = linear(tape, gci_vec, p(b, "head.gci_fc.weight"), p(b, "head.gci_fc.bias"));
    }
    {
      TallyScope scope(b.tally, "head.lci_fc");
      zl = linear(tape, lci_vec, p(b, "head.lci_fc.weight"), p(b, "head.lci_fc.bias"));
    }
    return scale(tape, add(tape, zg, zl), T(0.5));
  }
  Var cat = concat(tape, {gci_vec, lci_vec}, 1);
  cat = channel_shuffle(tape, cat, config_.shuffle_groups);
  TallyScope scope(b.tally, "head.fc");
  return linear(tape, cat, p(b, "head.fc.weight"), p(b, "head.fc.bias"));
}

template <class T>
Var PacnModel::forward(ModelBinding<T>& b, Var features, bool training) const {
  Tape<T>& tape = *b.tape;
  Var h = preprocess(b, features, training);
  GciOutput g = gci(b, h);
  if (config_.wiring_mode == WiringMode::serial) {
    // GCI output re-enters channel space and is broadcast over frequency as a
    // residual; the LCI module then consumes the combined map.
    Var back;
    {
      TallyScope scope(b.tally, "gci.back");
      back = linear(tape, g.tokens, p(b, "gci.back.weight"), p(b, "gci.back.bias"));
    }
    h = add_freq_broadcast(tape, h, transpose12(tape, back));
  }
  Var l = lci(b, h, training);
  return fuse(b, g.vector, l);
}

Tensor PacnModel::predict(const Tensor& features, MacTally* tally) const {
  Tape<float> tape;
  auto b = bind(tape, false, tally);
  Var x = tape.constant(features);
  return tape.value(forward(b, x, false));
}

Tensor stack_features(const std::vector<const Tensor*>& features) {
  if (features.empty()) throw UsageError("stack_features: empty batch");
  const Shape& s = features[0]->shape();
  if (s.size() != 3 || s[2] != 2) {
    throw ConfigError("feature must be (bins, frames, 2), got " + shape_str(s));
  }
  const i64 F = s[0], Tn = s[1], n = static_cast<i64>(features.size());
  Tensor out({n, 2, F, Tn});
  for (i64 i = 0; i < n; ++i) {
    const Tensor& f = *features[i];
    if (f.shape() != s) throw ConfigError("stack_features: inconsistent feature shapes");
    for (i64 b = 0; b < F; ++b)
      for (i64 t = 0; t < Tn; ++t)
        for (i64 c = 0; c < 2; ++c) out[((i * 2 + c) * F + b) * Tn + t] = f[(b * Tn + t) * 2 + c];
  }
  return out;
}

#define PACN_INSTANTIATE_MODEL(T)                                                      \
  template ModelBinding<T> PacnModel::bind<T>(Tape<T>&, bool, MacTally*) const;        \
  template void PacnModel::store_statistics<T>(const ModelBinding<T>&);                \
  template Var PacnModel::forward<T>(ModelBinding<T>&, Var, bool) const;               \
  template Var PacnModel::preprocess<T>(ModelBinding<T>&, Var, bool) const;            \
  template GciOutput PacnModel::gci<T>(ModelBinding<T>&, Var) const;                   \
  template Var PacnModel::lci<T>(ModelBinding<T>&, Var, bool) const;                   \
  template Var PacnModel::fuse<T>(ModelBinding<T>&, Var, Var) const;

PACN_INSTANTIATE_MODEL(float)
PACN_INSTANTIATE_MODEL(double)

}  // namespace pacn
