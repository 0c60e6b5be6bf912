#include "ndlab/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace ndlab::model {

void BackboneConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("backbone: layers must be >= 1");
  if (d < 1 || heads < 1) throw std::invalid_argument("backbone: d and heads must be >= 1");
  if (d % heads != 0) {
    throw std::invalid_argument("backbone: d = " + std::to_string(d) +
                                " not divisible by heads = " + std::to_string(heads));
  }
  if (vocab < 2) throw std::invalid_argument("backbone: vocab too small");
  if (max_seq < 1) throw std::invalid_argument("backbone: max_seq must be >= 1");
}

const char* to_string(Module m) {
  switch (m) {
    case Module::kQuery: return "q";
    case Module::kKey: return "k";
    case Module::kValue: return "v";
    case Module::kOutput: return "o";
    case Module::kGate: return "gate";
    case Module::kUp: return "up";
    case Module::kDown: return "down";
  }
  return "?";
}

const char* to_string(LoraTargets t) {
  switch (t) {
    case LoraTargets::kAll: return "all";
    case LoraTargets::kKvq: return "kvq";
    case LoraTargets::kNoMlp: return "no-mlp";
    case LoraTargets::kNoAttention: return "no-attention";
  }
  return "?";
}

LoraTargets parse_lora_targets(const std::string& text) {
  if (text == "all" || text == "ALL") return LoraTargets::kAll;
  if (text == "kvq" || text == "KVQ") return LoraTargets::kKvq;
  if (text == "no-mlp" || text == "NO-MLP") return LoraTargets::kNoMlp;
  if (text == "no-attention" || text == "NO-ATTENTION") return LoraTargets::kNoAttention;
  throw std::invalid_argument("unknown LoRA target selector '" + text + "'");
}

std::vector<Module> target_modules(LoraTargets t) {
  switch (t) {
    case LoraTargets::kAll:
      return {Module::kQuery, Module::kKey, Module::kValue, Module::kOutput,
              Module::kGate, Module::kUp, Module::kDown};
    case LoraTargets::kKvq: return {Module::kQuery, Module::kKey, Module::kValue};
    case LoraTargets::kNoMlp:
      return {Module::kQuery, Module::kKey, Module::kValue, Module::kOutput};
    case LoraTargets::kNoAttention: return {Module::kGate, Module::kUp, Module::kDown};
  }
  return {};
}

const char* to_string(PrefixMode m) { return m == PrefixMode::kInput ? "input" : "kv"; }

PrefixMode parse_prefix_mode(const std::string& text) {
  if (text == "kv") return PrefixMode::kKeyValue;
  if (text == "input") return PrefixMode::kInput;
  throw std::invalid_argument("unknown prefix mode '" + text + "'");
}

void AdapterConfig::validate(const BackboneConfig& b) const {
  if (P < 1) throw std::invalid_argument("adapters: P must be >= 1");
  if (use_lora && (rank < 1 || rank > b.d)) {
    throw std::invalid_argument("adapters: rank must lie in [1, d]");
  }
  if (!(epsilon >= 0.0 && epsilon < 1.0)) {
    throw std::invalid_argument("adapters: epsilon must lie in [0, 1)");
  }
  if (design_layer < 1 || design_layer > b.layers) {
    throw std::invalid_argument("adapters: design layer must lie in [1, L]");
  }
  if (!(prefix_init_std >= 0.0)) throw std::invalid_argument("adapters: prefix std < 0");
}

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kLora: return "lora";
    case ParamGroup::kPrefix: return "prefix";
    case ParamGroup::kAggregator: return "aggregator";
  }
  return "?";
}

void ParameterStore::add(const std::string& name, Tensor value, ParamGroup group) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_[name] = params_.size();
  params_.push_back({name, std::move(value), group, false});
}

const Parameter& ParameterStore::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return params_[it->second];
}

void ParameterStore::update(const std::string& name, Tensor value) {
  if (at(name).frozen) throw FrozenParameterError(name);
  overwrite(name, std::move(value));
}

void ParameterStore::overwrite(const std::string& name, Tensor value) {
  Parameter& p = params_[index_.at(name)];
  if (value.shape() != p.value.shape()) {
    throw std::invalid_argument("parameter '" + name + "': shape " +
                                shape_to_string(value.shape()) + " vs " +
                                shape_to_string(p.value.shape()));
  }
  p.value = std::move(value);
}

void ParameterStore::freeze(ParamGroup group) {
  for (Parameter& p : params_) {
    if (p.group == group) p.frozen = true;
  }
}

void ParameterStore::unfreeze(ParamGroup group) {
  for (Parameter& p : params_) {
    if (p.group == group) p.frozen = false;
  }
}

std::size_t ParameterStore::count(ParamGroup group) const {
  std::size_t n = 0;
  for (const Parameter& p : params_) {
    if (p.group == group) n += p.value.size();
  }
  return n;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) {
    if (!p.frozen) n += p.value.size();
  }
  return n;
}

std::uint64_t ParameterStore::hash(ParamGroup group) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const Parameter& p : params_) {
    if (p.group != group) continue;
    mix(p.name.data(), p.name.size());
    for (std::size_t d : p.value.shape()) mix(&d, sizeof d);
    mix(p.value.data().data(), p.value.size() * sizeof(double));
  }
  return h;
}

namespace {

std::size_t module_in(const BackboneConfig& b, Module m) {
  return m == Module::kDown ? b.ff_dim() : b.d;
}

std::size_t module_out(const BackboneConfig& b, Module m) {
  return (m == Module::kGate || m == Module::kUp) ? b.ff_dim() : b.d;
}

std::string weight_name(std::size_t layer, Module m) {
  return "l" + std::to_string(layer) + ".w" + to_string(m);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = stddev * normal(rng);
  return t;
}

void add_backbone(ParameterStore& ps, const BackboneConfig& b) {
  Rng rng = make_rng(b.seed, "backbone");
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(b.layers));
  ps.add("tok_emb", normal_tensor({b.vocab, b.d}, 1.0, rng), ParamGroup::kBackbone);
  ps.add("pos_emb", normal_tensor({b.max_seq, b.d}, 0.1, rng), ParamGroup::kBackbone);
  for (std::size_t l = 0; l < b.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    ps.add(p + "attn_norm", Tensor({b.d}, 1.0), ParamGroup::kBackbone);
    for (Module m : {Module::kQuery, Module::kKey, Module::kValue, Module::kOutput}) {
      const double s = 1.0 / std::sqrt(static_cast<double>(module_in(b, m)));
      ps.add(weight_name(l, m),
             normal_tensor({module_in(b, m), module_out(b, m)},
                           m == Module::kOutput ? s * out_scale : s, rng),
             ParamGroup::kBackbone);
    }
    ps.add(p + "mlp_norm", Tensor({b.d}, 1.0), ParamGroup::kBackbone);
    for (Module m : {Module::kGate, Module::kUp, Module::kDown}) {
      const double s = 1.0 / std::sqrt(static_cast<double>(module_in(b, m)));
      ps.add(weight_name(l, m),
             normal_tensor({module_in(b, m), module_out(b, m)},
                           m == Module::kDown ? s * out_scale : s, rng),
             ParamGroup::kBackbone);
    }
  }
  ps.add("final_norm", Tensor({b.d}, 1.0), ParamGroup::kBackbone);
  ps.add("head", normal_tensor({b.d, b.vocab}, 1.0 / std::sqrt(static_cast<double>(b.d)), rng),
         ParamGroup::kBackbone);
}

void add_adapters(NdModel& m) {
  const BackboneConfig& b = m.backbone;
  const AdapterConfig& a = m.adapters;
  a.validate(b);
  ParameterStore& ps = m.params;
  if (a.use_lora) {
    Rng rng = make_rng(a.seed, "lora");
    const std::size_t sets = a.shared_lora ? 1 : a.P;
    for (std::size_t s = 0; s < sets; ++s) {
      for (std::size_t l = 0; l < b.layers; ++l) {
        for (Module mod : target_modules(a.targets)) {
          const std::size_t in = module_in(b, mod);
          ps.add(lora_name(m, s, l, mod, 'A'),
                 normal_tensor({in, a.rank}, 1.0 / std::sqrt(static_cast<double>(in)), rng),
                 ParamGroup::kLora);
          ps.add(lora_name(m, s, l, mod, 'B'), Tensor({a.rank, module_out(b, mod)}),
                 ParamGroup::kLora);
        }
      }
    }
  }
  if (a.n_prefix > 0) {
    Rng rng = make_rng(a.seed, "prefix");
    Tensor first;
    for (std::size_t s = 0; s < a.P; ++s) {
      Tensor t = normal_tensor({a.n_prefix, b.d}, a.prefix_init_std, rng);
      if (s == 0) first = t;
      ps.add(prefix_name(s), a.shared_prefix_init ? first : t, ParamGroup::kPrefix);
    }
  }
  if (a.P > 1) {
    Rng rng = make_rng(a.seed, "aggregator");
    const std::size_t pd = a.P * b.d;
    ps.add("agg.w1", normal_tensor({pd, pd}, 1.0 / std::sqrt(static_cast<double>(pd)), rng),
           ParamGroup::kAggregator);
    ps.add("agg.b1", Tensor({pd}), ParamGroup::kAggregator);
    ps.add("agg.w2", normal_tensor({pd, a.P}, 0.01, rng), ParamGroup::kAggregator);
    ps.add("agg.b2", Tensor({a.P}), ParamGroup::kAggregator);
  }
}

}  // namespace

ParamCount expected_parameter_count(const BackboneConfig& b, const AdapterConfig& a) {
  ParamCount c;
  if (a.use_lora) {
    std::size_t per_layer = 0;
    for (Module m : target_modules(a.targets)) {
      per_layer += a.rank * module_in(b, m) + a.rank * module_out(b, m);
    }
    c.lora = (a.shared_lora ? 1 : a.P) * b.layers * per_layer;
  }
  c.prefix = a.P * a.n_prefix * b.d;
  if (a.P > 1) {
    const std::size_t pd = a.P * b.d;
    c.aggregator = pd * pd + pd + pd * a.P + a.P;
  }
  return c;
}

ParamCount NdModel::trainable_parameters() const {
  ParamCount c;
  for (const Parameter& p : params.all()) {
    if (p.frozen) continue;
    if (p.group == ParamGroup::kLora) c.lora += p.value.size();
    if (p.group == ParamGroup::kPrefix) c.prefix += p.value.size();
    if (p.group == ParamGroup::kAggregator) c.aggregator += p.value.size();
  }
  return c;
}

NdModel build_backbone(const BackboneConfig& backbone) {
  backbone.validate();
  NdModel m;
  m.backbone = backbone;
  m.adapters.P = 1;
  m.adapters.use_lora = false;
  m.adapters.n_prefix = 0;
  m.adapters.design_layer = 1;
  add_backbone(m.params, backbone);
  return m;
}

NdModel build_model(const BackboneConfig& backbone, const AdapterConfig& adapters) {
  return attach_adapters(build_backbone(backbone), adapters);
}

NdModel attach_adapters(const NdModel& base, const AdapterConfig& adapters) {
  NdModel m;
  m.backbone = base.backbone;
  m.adapters = adapters;
  m.adapters.validate(m.backbone);
  for (const Parameter& p : base.params.all()) {
    if (p.group == ParamGroup::kBackbone) m.params.add(p.name, p.value, p.group);
  }
  m.params.freeze(ParamGroup::kBackbone);
  add_adapters(m);
  return m;
}

std::string lora_name(const NdModel& m, std::size_t stream, std::size_t layer, Module module,
                      char which) {
  const std::string owner = m.adapters.shared_lora ? "lora" : "s" + std::to_string(stream);
  return owner + ".l" + std::to_string(layer) + "." + to_string(module) + "." + which;
}

std::string prefix_name(std::size_t stream) { return "s" + std::to_string(stream) + ".prefix"; }

// -- forward ----------------------------------------------------------------

namespace {

class Builder {
 public:
  Builder(const NdModel& model, ForwardGraph& fg) : m_(model), fg_(fg), g_(*fg.graph) {}

  ad::Var param(const std::string& name) {
    const auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Parameter& p = m_.params.at(name);
    ad::Var v = g_.input(name, p.value.shape(), !p.frozen);
    vars_.emplace(name, v);
    return v;
  }

  bool has_lora(Module mod) const {
    if (!m_.adapters.use_lora) return false;
    for (Module t : target_modules(m_.adapters.targets)) {
      if (t == mod) return true;
    }
    return false;
  }

  ad::Var linear(ad::Var x, std::size_t stream, std::size_t layer, Module mod, bool prefix_path) {
    ad::Var y = ad::matmul(x, param(weight_name(layer, mod)));
    if (!has_lora(mod)) return y;
    ad::Var a = param(lora_name(m_, stream, layer, mod, 'A'));
    ad::Var b = param(lora_name(m_, stream, layer, mod, 'B'));
    ad::Var delta = ad::scale(ad::matmul(ad::matmul(x, a), b),
                              1.0 / static_cast<double>(m_.adapters.rank));
    if (fg_.options.adapter_dropout && !prefix_path) {
      const std::string name = "drop.s" + std::to_string(stream) + ".l" +
                               std::to_string(layer) + "." + to_string(mod);
      ad::Var mask = g_.input(name, delta.shape());
      fg_.dropout_masks.push_back({name, delta.shape()});
      delta = delta * mask;
    }
    return y + delta;
  }

  ad::Var attention(ad::Var x, std::size_t stream, std::size_t layer, ad::Var mask) {
    const BackboneConfig& b = m_.backbone;
    const std::size_t B = x.shape()[0];
    const std::size_t S = x.shape()[1];
    const std::size_t H = b.heads;
    const std::size_t dh = b.d / H;
    const std::string p = "l" + std::to_string(layer) + ".";
    ad::Var h = ad::rms_norm(x) * param(p + "attn_norm");
    ad::Var q = linear(h, stream, layer, Module::kQuery, false);
    ad::Var k = linear(h, stream, layer, Module::kKey, false);
    ad::Var v = linear(h, stream, layer, Module::kValue, false);
    if (m_.adapters.n_prefix > 0 && m_.adapters.prefix_mode == PrefixMode::kKeyValue) {
      ad::Var pre = ad::broadcast_leading(param(prefix_name(stream)), B);
      k = ad::concat({linear(pre, stream, layer, Module::kKey, true), k}, 1);
      v = ad::concat({linear(pre, stream, layer, Module::kValue, true), v}, 1);
    }
    const std::size_t SK = k.shape()[1];
    ad::Var qh = ad::permute(ad::reshape(q, {B, S, H, dh}), {0, 2, 1, 3});
    ad::Var kh = ad::permute(ad::reshape(k, {B, SK, H, dh}), {0, 2, 1, 3});
    ad::Var vh = ad::permute(ad::reshape(v, {B, SK, H, dh}), {0, 2, 1, 3});
    ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)),
                               1.0 / std::sqrt(static_cast<double>(dh)));
    ad::Var att = ad::softmax(scores + mask);
    ad::Var o = ad::reshape(ad::permute(ad::matmul(att, vh), {0, 2, 1, 3}), {B, S, b.d});
    return linear(o, stream, layer, Module::kOutput, false);
  }

  ad::Var mlp(ad::Var x, std::size_t stream, std::size_t layer) {
    const std::string p = "l" + std::to_string(layer) + ".";
    ad::Var h = ad::rms_norm(x) * param(p + "mlp_norm");
    ad::Var gate = linear(h, stream, layer, Module::kGate, false);
    ad::Var up = linear(h, stream, layer, Module::kUp, false);
    return linear(ad::silu(gate) * up, stream, layer, Module::kDown, false);
  }

 private:
  const NdModel& m_;
  ForwardGraph& fg_;
  ad::Graph& g_;
  std::unordered_map<std::string, ad::Var> vars_;
};

Tensor causal_mask(std::size_t queries, std::size_t keys, std::size_t always_visible) {
  Tensor mask({queries, keys});
  for (std::size_t t = 0; t < queries; ++t) {
    for (std::size_t s = always_visible; s < keys; ++s) {
      if (s - always_visible > t) mask.at(t, s) = -1e9;
    }
  }
  return mask;
}

}  // namespace

ForwardGraph build_forward(const NdModel& model, const ForwardOptions& options) {
  const BackboneConfig& b = model.backbone;
  const AdapterConfig& a = model.adapters;
  if (options.batch < 1 || options.seq < 1) throw std::invalid_argument("empty batch");
  if (options.seq > b.max_seq) {
    throw std::invalid_argument("sequence length " + std::to_string(options.seq) +
                                " exceeds max_seq " + std::to_string(b.max_seq));
  }
  if (options.only_stream && *options.only_stream >= a.P) {
    throw std::out_of_range("stream index out of range");
  }
  if (options.corruption_layer > b.layers) {
    throw std::invalid_argument("corruption layer outside [1, L]");
  }
  if (options.corruption_layer > 0 && (a.P < 2 || options.only_stream)) {
    throw std::invalid_argument("corruption hook needs P >= 2 and all streams");
  }
  ForwardGraph fg;
  fg.graph = std::make_unique<ad::Graph>(options.precision);
  fg.options = options;
  ad::Graph& g = *fg.graph;
  Builder builder(model, fg);
  const std::size_t B = options.batch;
  const std::size_t T = options.seq;
  const bool input_prefix = a.n_prefix > 0 && a.prefix_mode == PrefixMode::kInput;
  const std::size_t offset = input_prefix ? a.n_prefix : 0;
  const std::size_t S = T + offset;

  fg.tokens = g.input("tokens", {B, T});
  fg.targets = g.input("targets", {B, T});
  ad::Var emb = ad::gather(builder.param("tok_emb"), fg.tokens) +
                ad::slice(builder.param("pos_emb"), 0, 0, T);

  std::vector<std::size_t> streams;
  if (options.only_stream) {
    streams.push_back(*options.only_stream);
  } else {
    for (std::size_t i = 0; i < a.P; ++i) streams.push_back(i);
  }
  const std::size_t kv_prefix =
      (a.n_prefix > 0 && a.prefix_mode == PrefixMode::kKeyValue) ? a.n_prefix : 0;
  ad::Var mask = g.constant(input_prefix ? causal_mask(S, S, 0) : causal_mask(S, S + kv_prefix, kv_prefix));

  std::vector<ad::Var> xs;
  for (std::size_t i : streams) {
    ad::Var x = emb;
    if (input_prefix) {
      x = ad::concat({ad::broadcast_leading(builder.param(prefix_name(i)), B), emb}, 1);
    }
    xs.push_back(x);
  }
  fg.layer_states.assign(streams.size(), {});
  for (std::size_t l = 0; l < b.layers; ++l) {
    for (std::size_t k = 0; k < streams.size(); ++k) {
      ad::Var x = xs[k] + builder.attention(xs[k], streams[k], l, mask);
      xs[k] = x + builder.mlp(x, streams[k], l);
    }
    if (options.corruption_layer == l + 1) {
      std::vector<ad::Var> corrupted;
      for (std::size_t i = 0; i < a.P; ++i) {
        const std::string keep = "corrupt.keep" + std::to_string(i);
        fg.corruption_masks.push_back({keep, {B, S, b.d}});
        ad::Var acc = xs[i] * g.input(keep, {B, S, b.d});
        for (std::size_t j = 0; j < a.P; ++j) {
          if (j == i) continue;
          const std::string name = "corrupt.m" + std::to_string(i) + "." + std::to_string(j);
          fg.corruption_masks.push_back({name, {B, S, b.d}});
          acc = acc + xs[j] * g.input(name, {B, S, b.d});
        }
        corrupted.push_back(acc);
      }
      xs = corrupted;
    }
    for (std::size_t k = 0; k < streams.size(); ++k) {
      fg.layer_states[k].push_back(input_prefix ? ad::slice(xs[k], 1, offset, S) : xs[k]);
    }
  }
  for (std::size_t k = 0; k < streams.size(); ++k) {
    fg.design_features.push_back(
        ad::reshape(fg.layer_states[k][a.design_layer - 1], {B * T, b.d}));
    fg.stream_final.push_back(ad::rms_norm(fg.layer_states[k].back()) *
                              builder.param("final_norm"));
  }
  if (options.only_stream) return fg;

  ad::Var combined;
  if (a.P == 1) {
    combined = fg.stream_final[0];
    fg.alpha = g.constant(Tensor({B, T, 1}, 1.0));
  } else {
    AggregatorVars agg{builder.param("agg.w1"), builder.param("agg.b1"),
                       builder.param("agg.w2"), builder.param("agg.b2")};
    Aggregated out = aggregate(fg.stream_final, agg, a.epsilon);
    combined = out.combined;
    fg.alpha = out.alpha;
  }
  fg.logits = ad::matmul(combined, builder.param("head"));
  fg.token_nll = ad::token_nll(fg.logits, fg.targets);
  fg.ce = ad::mean(fg.token_nll);
  return fg;
}

ad::Bindings parameter_bindings(const NdModel& model) {
  ad::Bindings b;
  for (const Parameter& p : model.params.all()) b[p.name] = p.value;
  return b;
}

void bind_dropout_masks(const ForwardGraph& fg, double rate, Rng& rng, ad::Bindings& bindings) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate outside [0,1)");
  std::bernoulli_distribution drop(rate);
  const double keep = 1.0 / (1.0 - rate);
  for (const auto& m : fg.dropout_masks) {
    Tensor t(m.shape);
    for (double& v : t.storage()) v = drop(rng) ? 0.0 : keep;
    bindings[m.name] = std::move(t);
  }
}

void bind_identity_dropout(const ForwardGraph& fg, ad::Bindings& bindings) {
  for (const auto& m : fg.dropout_masks) bindings[m.name] = Tensor(m.shape, 1.0);
}

void bind_corruption(const ForwardGraph& fg, const NdModel& model, const CorruptionPlan* plan,
                     ad::Bindings& bindings) {
  if (fg.options.corruption_layer == 0) return;
  const std::size_t P = model.adapters.P;
  const std::size_t B = fg.options.batch;
  const std::size_t T = fg.options.seq;
  const std::size_t d = model.backbone.d;
  const bool input_prefix =
      model.adapters.n_prefix > 0 && model.adapters.prefix_mode == PrefixMode::kInput;
  const std::size_t offset = input_prefix ? model.adapters.n_prefix : 0;
  const std::size_t S = T + offset;
  if (plan) {
    if (plan->hook_layer != fg.options.corruption_layer) {
      throw std::invalid_argument("corruption plan hook layer does not match the graph");
    }
    if (plan->donor.size() != P) throw std::invalid_argument("corruption plan: one row per stream");
    for (const auto& row : plan->donor) {
      if (row.size() != B * T) throw std::invalid_argument("corruption plan: batch·seq entries");
    }
  }
  for (std::size_t i = 0; i < P; ++i) {
    Tensor keep({B, S, d}, 1.0);
    std::vector<Tensor> from(P, Tensor({B, S, d}));
    if (plan) {
      for (std::size_t bb = 0; bb < B; ++bb) {
        for (std::size_t t = 0; t < T; ++t) {
          const int donor = plan->donor[i][bb * T + t];
          if (donor < 0) continue;
          if (static_cast<std::size_t>(donor) >= P || static_cast<std::size_t>(donor) == i) {
            throw std::invalid_argument("corruption plan: invalid donor stream");
          }
          const std::size_t base = (bb * S + t + offset) * d;
          for (std::size_t c = 0; c < d; ++c) {
            keep[base + c] = 0.0;
            from[donor][base + c] = 1.0;
          }
        }
      }
    }
    bindings["corrupt.keep" + std::to_string(i)] = std::move(keep);
    for (std::size_t j = 0; j < P; ++j) {
      if (j != i) {
        bindings["corrupt.m" + std::to_string(i) + "." + std::to_string(j)] = std::move(from[j]);
      }
    }
  }
}

Tensor token_tensor(const std::vector<std::vector<std::size_t>>& rows) {
  if (rows.empty() || rows[0].empty()) throw std::invalid_argument("empty token batch");
  Tensor t({rows.size(), rows[0].size()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw std::invalid_argument("ragged token batch");
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      t.at(r, c) = static_cast<double>(rows[r][c]);
    }
  }
  return t;
}

namespace {

ad::Bindings data_bindings(const NdModel& model, const ForwardGraph& fg, const Tensor& tokens) {
  for (double v : tokens.data()) {
    if (!(v >= 0.0) || v >= static_cast<double>(model.backbone.vocab) || v != std::floor(v)) {
      throw std::invalid_argument("token id outside the vocabulary");
    }
  }
  ad::Bindings b = parameter_bindings(model);
  b["tokens"] = tokens;
  b["targets"] = Tensor(tokens.shape());
  bind_identity_dropout(fg, b);
  return b;
}

ForwardOptions options_for(const Tensor& tokens) {
  if (tokens.rank() != 2) throw std::invalid_argument("tokens must be [batch, seq]");
  ForwardOptions o;
  o.batch = tokens.shape()[0];
  o.seq = tokens.shape()[1];
  return o;
}

}  // namespace

StreamOutput stream_forward(const NdModel& model, const Tensor& tokens, std::size_t stream) {
  ForwardOptions o = options_for(tokens);
  o.only_stream = stream;
  ForwardGraph fg = build_forward(model, o);
  const ad::Evaluation ev = ad::evaluate(*fg.graph, data_bindings(model, fg, tokens));
  StreamOutput out;
  for (ad::Var v : fg.layer_states[0]) out.layer_states.push_back(ev.value(v));
  out.design_features = ev.value(fg.design_features[0]);
  out.final_state = ev.value(fg.stream_final[0]);
  return out;
}

LmOutput lm_forward(const NdModel& model, const Tensor& tokens, const CorruptionPlan* plan) {
  ForwardOptions o = options_for(tokens);
  if (plan) o.corruption_layer = plan->hook_layer;
  ForwardGraph fg = build_forward(model, o);
  ad::Bindings b = data_bindings(model, fg, tokens);
  bind_corruption(fg, model, plan, b);
  const ad::Evaluation ev = ad::evaluate(*fg.graph, b);
  LmOutput out;
  out.logits = ev.value(fg.logits);
  out.alpha = ev.value(fg.alpha);
  for (ad::Var v : fg.design_features) out.design_features.push_back(ev.value(v));
  for (ad::Var v : fg.stream_final) out.stream_final.push_back(ev.value(v));
  return out;
}

// -- aggregator -------------------------------------------------------------

Aggregated aggregate(const std::vector<ad::Var>& states, const AggregatorVars& agg,
                     double epsilon) {
  if (states.empty()) throw std::invalid_argument("aggregate: no streams");
  const Shape s = states[0].shape();
  for (const ad::Var& v : states) {
    if (v.shape() != s) throw std::invalid_argument("aggregate: stream shapes differ");
  }
  const std::size_t P = states.size();
  const std::size_t r = s.size();
  ad::Var cat = ad::concat(states, r - 1);
  ad::Var hidden = ad::silu(ad::matmul(cat, agg.w1) + agg.b1);
  ad::Var logits = ad::matmul(hidden, agg.w2) + agg.b2;
  Aggregated out;
  out.alpha = ad::add_scalar(ad::scale(ad::softmax(logits), 1.0 - epsilon),
                             epsilon / static_cast<double>(P));
  Shape lead(s.begin(), s.end() - 1);
  Shape expanded = lead;
  expanded.push_back(1);
  expanded.push_back(s.back());
  std::vector<ad::Var> parts;
  for (const ad::Var& v : states) parts.push_back(ad::reshape(v, expanded));
  ad::Var stacked = ad::concat(parts, r - 1);  // [..., P, d]
  Shape alpha_row = lead;
  alpha_row.push_back(1);
  alpha_row.push_back(P);
  out.combined = ad::reshape(ad::matmul(ad::reshape(out.alpha, alpha_row), stacked), s);
  return out;
}

AggregateResult aggregate(const std::vector<Tensor>& states, const AggregatorParams& params) {
  ad::Graph g;
  std::vector<ad::Var> vars;
  for (const Tensor& t : states) vars.push_back(g.constant(t));
  AggregatorVars agg{g.constant(params.w1), g.constant(params.b1), g.constant(params.w2),
                     g.constant(params.b2)};
  const Aggregated a = aggregate(vars, agg, params.epsilon);
  const ad::Evaluation ev = ad::evaluate(g, {});
  return {ev.value(a.combined), ev.value(a.alpha)};
}

// -- config text and checkpoints --------------------------------------------

void write_config(const BackboneConfig& b, const AdapterConfig& a, KvConfig& c) {
  write_backbone_config(b, c);
  write_adapter_config(a, c);
}

void write_backbone_config(const BackboneConfig& b, KvConfig& c) {
  c.set("backbone.layers", b.layers);
  c.set("backbone.d", b.d);
  c.set("backbone.heads", b.heads);
  c.set("backbone.ff", b.ff);
  c.set("backbone.vocab", b.vocab);
  c.set("backbone.max_seq", b.max_seq);
  c.set("backbone.seed", std::to_string(b.seed));
}

void write_adapter_config(const AdapterConfig& a, KvConfig& c) {
  c.set("adapters.P", a.P);
  c.set("adapters.rank", a.rank);
  c.set("adapters.n_prefix", a.n_prefix);
  c.set("adapters.epsilon", a.epsilon);
  c.set("adapters.targets", to_string(a.targets));
  c.set("adapters.use_lora", a.use_lora);
  c.set("adapters.shared_lora", a.shared_lora);
  c.set("adapters.shared_prefix_init", a.shared_prefix_init);
  c.set("adapters.prefix_mode", to_string(a.prefix_mode));
  c.set("adapters.prefix_init_std", a.prefix_init_std);
  c.set("adapters.design_layer", a.design_layer);
  c.set("adapters.seed", std::to_string(a.seed));
}

BackboneConfig read_backbone_config(const KvConfig& c) {
  BackboneConfig b;
  b.layers = c.get_size("backbone.layers", b.layers);
  b.d = c.get_size("backbone.d", b.d);
  b.heads = c.get_size("backbone.heads", b.heads);
  b.ff = c.get_size("backbone.ff", b.ff);
  b.vocab = c.get_size("backbone.vocab", b.vocab);
  b.max_seq = c.get_size("backbone.max_seq", b.max_seq);
  b.seed = c.get_u64("backbone.seed", b.seed);
  return b;
}

AdapterConfig read_adapter_config(const KvConfig& c) {
  AdapterConfig a;
  a.P = c.get_size("adapters.P", a.P);
  a.rank = c.get_size("adapters.rank", a.rank);
  a.n_prefix = c.get_size("adapters.n_prefix", a.n_prefix);
  a.epsilon = c.get_double("adapters.epsilon", a.epsilon);
  a.targets = parse_lora_targets(c.get_string("adapters.targets", to_string(a.targets)));
  a.use_lora = c.get_bool("adapters.use_lora", a.use_lora);
  a.shared_lora = c.get_bool("adapters.shared_lora", a.shared_lora);
  a.shared_prefix_init = c.get_bool("adapters.shared_prefix_init", a.shared_prefix_init);
  a.prefix_mode = parse_prefix_mode(c.get_string("adapters.prefix_mode", to_string(a.prefix_mode)));
  a.prefix_init_std = c.get_double("adapters.prefix_init_std", a.prefix_init_std);
  a.design_layer = c.get_size("adapters.design_layer", a.design_layer);
  a.seed = c.get_u64("adapters.seed", a.seed);
  return a;
}

namespace {

constexpr char kMagic[8] = {'N', 'D', 'L', 'A', 'B', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw CheckpointError("checkpoint truncated");
  return v;
}

std::string get_string(std::ifstream& in, std::uint64_t limit) {
  const auto n = get<std::uint64_t>(in);
  if (n > limit) throw CheckpointError("checkpoint string too long");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw CheckpointError("checkpoint truncated");
  return s;
}

}  // namespace

void save_checkpoint(const NdModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  KvConfig c;
  write_config(model.backbone, model.adapters, c);
  const std::string text = c.to_text();
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::uint64_t>(out, model.backbone_hash());
  put<std::uint64_t>(out, model.params.all().size());
  for (const Parameter& p : model.params.all()) {
    put<std::uint64_t>(out, p.name.size());
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(p.group));
    put<std::uint8_t>(out, p.frozen ? 1 : 0);
    put<std::uint64_t>(out, p.value.rank());
    for (std::size_t d : p.value.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(p.value.data().data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

NdModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const KvConfig c = KvConfig::parse(get_string(in, 1 << 20));
  const auto recorded_hash = get<std::uint64_t>(in);
  const auto count = get<std::uint64_t>(in);

  // The skeleton fixes the expected names and shapes.
  NdModel m = build_model(read_backbone_config(c), read_adapter_config(c));
  if (count != m.params.all().size()) throw CheckpointError("checkpoint parameter count mismatch");
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = get_string(in, 4096);
    const auto group = get<std::uint8_t>(in);
    const auto frozen = get<std::uint8_t>(in);
    const auto rank = get<std::uint64_t>(in);
    if (rank > 8) throw CheckpointError("checkpoint tensor rank too large");
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in);
    if (!m.params.contains(name)) throw CheckpointError("unexpected parameter '" + name + "'");
    const Parameter& expect = m.params.at(name);
    if (expect.value.shape() != shape || static_cast<std::uint8_t>(expect.group) != group) {
      throw CheckpointError("parameter '" + name + "' does not match the configuration");
    }
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.storage().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw CheckpointError("checkpoint truncated");
    m.params.overwrite(name, std::move(t));
    if (frozen) m.params.freeze(expect.group);
  }
  if (m.backbone_hash() != recorded_hash) {
    throw CheckpointError("backbone hash mismatch: checkpoint was written for another backbone");
  }
  return m;
}

}  // namespace ndlab::model
