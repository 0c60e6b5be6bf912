#pragma once

// Training-cost arithmetic per fine-tuning variant, in units of one forward
// pass through the full backbone.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ndlab/config.hpp"

namespace ndlab::costmodel {

inline constexpr double kStandardUnits = 3.0;
inline constexpr double kBackboneParams = 495e6;
inline constexpr double kAdapterParams = 1.3e6;

enum class BtMode {
  kNone,
  /// Correlation on pooled outputs only (0.1 units).
  kSimplified,
  /// All P-choose-2 cross-correlations plus whitening (1.6 units).
  kFull,
};
const char* to_string(BtMode m);
BtMode parse_bt_mode(const std::string& text);
double default_bt_units(BtMode m);

struct OverheadSpec {
  /// Replaces the mode's default BT units when set.
  std::optional<double> bt_units;
  double other_units = 0.0;
};

struct VariantCost {
  std::string name;
  double forward = 0.0;
  double backward = 0.0;
  double bt = 0.0;
  double other = 0.0;
  double total = 0.0;
  double relative = 0.0;
};

/// forward = P, backward = 2·fraction, total = sum, relative = total / 3.
VariantCost variant_cost(std::size_t P, double trainable_fraction, BtMode bt,
                         const OverheadSpec& overhead, std::string name = {});

/// (pretrain + finetune·relative) / pretrain.
double amortized_cost(double pretrain_tokens, double finetune_tokens, double relative);

/// Standard, ParScale, ParScale-BT, Indep. LoRA and ND-LoRA.
std::vector<VariantCost> reference_variants();

/// Values rounded to `decimals` places, for table comparisons.
double round_to(double value, int decimals);

void write_cost_table_csv(const std::filesystem::path& path, std::span<const VariantCost> rows,
                          std::optional<double> amortize_pretrain = std::nullopt,
                          double finetune_tokens = 0.0);

struct CostRequest {
  bool include_reference = true;
  /// Extra row built from custom_* fields when set.
  std::optional<std::size_t> custom_P;
  double custom_fraction = kAdapterParams / kBackboneParams;
  BtMode custom_bt = BtMode::kNone;
  std::optional<double> custom_bt_units;
  double custom_other = 0.0;
  std::string custom_name = "custom";
  bool amortize = false;
  double pretrain_tokens = 1e12;
  double finetune_tokens = 20e6;
};

CostRequest read_cost_config(const KvConfig& c);
void write_cost_config(const CostRequest& r, KvConfig& out);
std::vector<VariantCost> build_rows(const CostRequest& r);

}  // namespace ndlab::costmodel
