#pragma once

// Toy frozen transformer backbone with P parallel streams. Each stream owns
// low-rank adapters and prefix vectors; a smoothed MLP aggregator mixes the
// final stream states before the shared LM head.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ndlab/autodiff.hpp"
#include "ndlab/config.hpp"
#include "ndlab/rng.hpp"
#include "ndlab/tensor.hpp"

namespace ndlab::model {

// Byte-level vocabulary plus two specials.
inline constexpr std::size_t kByteVocab = 256;
inline constexpr std::size_t kBos = 256;
inline constexpr std::size_t kPad = 257;
inline constexpr std::size_t kVocab = 258;

struct BackboneConfig {
  std::size_t layers = 4;
  std::size_t d = 64;
  std::size_t heads = 4;
  /// MLP width; 0 means 2·d.
  std::size_t ff = 0;
  std::size_t vocab = kVocab;
  std::size_t max_seq = 128;
  std::uint64_t seed = 0;

  std::size_t ff_dim() const { return ff == 0 ? 2 * d : ff; }
  void validate() const;
};

enum class Module { kQuery, kKey, kValue, kOutput, kGate, kUp, kDown };
const char* to_string(Module m);

enum class LoraTargets { kAll, kKvq, kNoMlp, kNoAttention };
const char* to_string(LoraTargets t);
LoraTargets parse_lora_targets(const std::string& text);
std::vector<Module> target_modules(LoraTargets t);

enum class PrefixMode {
  /// Prefix vectors projected to keys/values and prepended at every layer.
  kKeyValue,
  /// Prefix vectors prepended to the input sequence (fallback).
  kInput,
};
const char* to_string(PrefixMode m);
PrefixMode parse_prefix_mode(const std::string& text);

struct AdapterConfig {
  std::size_t P = 4;
  std::size_t rank = 16;
  std::size_t n_prefix = 48;
  double epsilon = 0.1;
  LoraTargets targets = LoraTargets::kAll;
  bool use_lora = true;
  /// One adapter set used by every stream.
  bool shared_lora = false;
  /// Every stream starts from the same prefix draw.
  bool shared_prefix_init = false;
  PrefixMode prefix_mode = PrefixMode::kKeyValue;
  double prefix_init_std = 1.0;
  /// 1-based layer whose output feeds the diversity terms.
  std::size_t design_layer = 2;
  std::uint64_t seed = 0;

  void validate(const BackboneConfig& backbone) const;
};

enum class ParamGroup { kBackbone, kLora, kPrefix, kAggregator };
const char* to_string(ParamGroup g);

class FrozenParameterError : public std::logic_error {
 public:
  explicit FrozenParameterError(const std::string& name)
      : std::logic_error("parameter '" + name + "' is frozen") {}
};

struct Parameter {
  std::string name;
  Tensor value;
  ParamGroup group = ParamGroup::kBackbone;
  bool frozen = false;
};

/// Named parameters in insertion order.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor value, ParamGroup group);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Parameter& at(const std::string& name) const;
  const Tensor& value(const std::string& name) const { return at(name).value; }
  const std::vector<Parameter>& all() const { return params_; }

  /// Replaces a parameter value; frozen parameters refuse.
  void update(const std::string& name, Tensor value);
  /// Unchecked write used for deliberate test setups and checkpoint loads.
  void overwrite(const std::string& name, Tensor value);
  void freeze(ParamGroup group);
  void unfreeze(ParamGroup group);
  bool frozen(const std::string& name) const { return at(name).frozen; }

  std::size_t count(ParamGroup group) const;
  std::size_t trainable_count() const;
  std::uint64_t hash(ParamGroup group) const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ParamCount {
  std::size_t lora = 0;
  std::size_t prefix = 0;
  std::size_t aggregator = 0;
  std::size_t total() const { return lora + prefix + aggregator; }
};

/// Analytic trainable-parameter count for a configuration.
ParamCount expected_parameter_count(const BackboneConfig& backbone, const AdapterConfig& adapters);

struct NdModel {
  BackboneConfig backbone;
  AdapterConfig adapters;
  ParameterStore params;

  std::size_t P() const { return adapters.P; }
  std::uint64_t backbone_hash() const { return params.hash(ParamGroup::kBackbone); }
  ParamCount trainable_parameters() const;
};

/// Bare backbone: P = 1, no adapters, no prefix, nothing frozen.
NdModel build_backbone(const BackboneConfig& backbone);

/// Fresh random backbone (frozen) plus adapters.
NdModel build_model(const BackboneConfig& backbone, const AdapterConfig& adapters);

/// Copies the backbone tensors of `base` (frozen) and adds adapters.
NdModel attach_adapters(const NdModel& base, const AdapterConfig& adapters);

// Parameter names.
std::string lora_name(const NdModel& m, std::size_t stream, std::size_t layer, Module module,
                      char which);
std::string prefix_name(std::size_t stream);

/// Inference-time substitution at the output of one layer: stream i takes
/// position n from donor[i][n] (or keeps its own when negative).
struct CorruptionPlan {
  std::size_t hook_layer = 1;
  std::vector<std::vector<int>> donor;  // [P][batch·seq]
};

/// Parameters that are not frozen become gradient inputs.
struct ForwardOptions {
  std::size_t batch = 1;
  std::size_t seq = 1;
  Precision precision = Precision::kDouble;
  /// Adds one dropout-mask input per adapter application.
  bool adapter_dropout = false;
  /// Layer whose output is substituted; 0 disables the hook.
  std::size_t corruption_layer = 0;
  /// Build only this stream, skipping the aggregator and head.
  std::optional<std::size_t> only_stream;
};

struct ForwardGraph {
  std::unique_ptr<ad::Graph> graph;
  ForwardOptions options;
  ad::Var tokens;
  ad::Var targets;
  ad::Var logits;     // [B, T, V]
  ad::Var alpha;      // [B, T, P]
  ad::Var token_nll;  // [B, T]
  ad::Var ce;         // scalar mean NLL
  std::vector<ad::Var> stream_final;               // per stream [B, T, d]
  std::vector<std::vector<ad::Var>> layer_states;  // per stream, per layer [B, T, d]
  std::vector<ad::Var> design_features;            // per stream [B·T, d]
  struct Mask {
    std::string name;
    Shape shape;
  };
  std::vector<Mask> dropout_masks;
  std::vector<Mask> corruption_masks;  // "corrupt.keep<i>" and "corrupt.m<i>.<j>"
};

ForwardGraph build_forward(const NdModel& model, const ForwardOptions& options);

/// Parameter tensors keyed by name, ready to merge with data bindings.
ad::Bindings parameter_bindings(const NdModel& model);

/// Inverted-dropout masks (values 0 or 1/(1-rate)).
void bind_dropout_masks(const ForwardGraph& fg, double rate, Rng& rng, ad::Bindings& bindings);
/// All-ones masks (dropout disabled at evaluation).
void bind_identity_dropout(const ForwardGraph& fg, ad::Bindings& bindings);
void bind_corruption(const ForwardGraph& fg, const NdModel& model, const CorruptionPlan* plan,
                     ad::Bindings& bindings);

/// [B, T] token tensor from ids.
Tensor token_tensor(const std::vector<std::vector<std::size_t>>& rows);

struct StreamOutput {
  std::vector<Tensor> layer_states;  // [B, T, d] per layer
  Tensor design_features;            // [B·T, d]
  Tensor final_state;                // [B, T, d] after the final norm
};

StreamOutput stream_forward(const NdModel& model, const Tensor& tokens, std::size_t stream);

struct LmOutput {
  Tensor logits;
  std::vector<Tensor> design_features;
  Tensor alpha;
  std::vector<Tensor> stream_final;
};

LmOutput lm_forward(const NdModel& model, const Tensor& tokens,
                    const CorruptionPlan* plan = nullptr);

// -- aggregator -------------------------------------------------------------

struct AggregatorVars {
  ad::Var w1, b1, w2, b2;
};

struct Aggregated {
  ad::Var combined;  // [..., d]
  ad::Var alpha;     // [..., P]
};

/// alpha = (1-eps)·softmax(W2·silu(W1·[h_1..h_P] + b1) + b2) + eps/P per position;
/// combined = Σ alpha_i h_i.
Aggregated aggregate(const std::vector<ad::Var>& states, const AggregatorVars& agg, double epsilon);

struct AggregatorParams {
  Tensor w1, b1, w2, b2;
  double epsilon = 0.1;
};

struct AggregateResult {
  Tensor combined;
  Tensor alpha;
};

AggregateResult aggregate(const std::vector<Tensor>& states, const AggregatorParams& params);

// -- configuration text and checkpoints -------------------------------------

void write_config(const BackboneConfig& b, const AdapterConfig& a, KvConfig& out);
void write_backbone_config(const BackboneConfig& b, KvConfig& out);
void write_adapter_config(const AdapterConfig& a, KvConfig& out);
BackboneConfig read_backbone_config(const KvConfig& c);
AdapterConfig read_adapter_config(const KvConfig& c);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const NdModel& model, const std::filesystem::path& path);
NdModel load_checkpoint(const std::filesystem::path& path);

}  // namespace ndlab::model
