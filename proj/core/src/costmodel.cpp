#include "ndlab/costmodel.hpp"

#include <cmath>
#include <stdexcept>

#include "ndlab/csv.hpp"

namespace ndlab::costmodel {

const char* to_string(BtMode m) {
  switch (m) {
    case BtMode::kNone: return "none";
    case BtMode::kSimplified: return "simplified";
    case BtMode::kFull: return "full";
  }
  return "?";
}

BtMode parse_bt_mode(const std::string& text) {
  for (BtMode m : {BtMode::kNone, BtMode::kSimplified, BtMode::kFull}) {
    if (text == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown BT mode '" + text + "' (none, simplified, full)");
}

double default_bt_units(BtMode m) {
  switch (m) {
    case BtMode::kNone: return 0.0;
    case BtMode::kSimplified: return 0.1;
    case BtMode::kFull: return 1.6;
  }
  return 0.0;
}

VariantCost variant_cost(std::size_t P, double trainable_fraction, BtMode bt,
                         const OverheadSpec& overhead, std::string name) {
  if (P == 0) throw std::invalid_argument("variant_cost: P must be at least 1");
  if (!(trainable_fraction > 0.0 && trainable_fraction <= 1.0)) {
    throw std::invalid_argument("variant_cost: trainable fraction outside (0, 1]");
  }
  VariantCost c;
  c.name = std::move(name);
  c.forward = static_cast<double>(P);
  c.backward = 2.0 * trainable_fraction;
  c.bt = overhead.bt_units.value_or(default_bt_units(bt));
  c.other = overhead.other_units;
  if (c.bt < 0.0 || c.other < 0.0) throw std::invalid_argument("variant_cost: negative overhead");
  c.total = c.forward + c.backward + c.bt + c.other;
  c.relative = c.total / kStandardUnits;
  return c;
}

double amortized_cost(double pretrain_tokens, double finetune_tokens, double relative) {
  if (!(pretrain_tokens > 0.0)) throw std::invalid_argument("amortized_cost: pretrain tokens must be positive");
  if (finetune_tokens < 0.0 || relative < 0.0) {
    throw std::invalid_argument("amortized_cost: negative finetune tokens or factor");
  }
  return (pretrain_tokens + finetune_tokens * relative) / pretrain_tokens;
}

std::vector<VariantCost> reference_variants() {
  const double f = kAdapterParams / kBackboneParams;
  return {
      variant_cost(1, 1.0, BtMode::kNone, {}, "Standard"),
      variant_cost(4, f, BtMode::kNone, {std::nullopt, 0.01}, "ParScale"),
      variant_cost(4, f, BtMode::kSimplified, {std::nullopt, 0.01}, "ParScale-BT"),
      variant_cost(4, f, BtMode::kNone, {std::nullopt, 0.05}, "Indep. LoRA"),
      variant_cost(4, f, BtMode::kFull, {std::nullopt, 0.05}, "ND-LoRA"),
  };
}

double round_to(double value, int decimals) {
  const double s = std::pow(10.0, decimals);
  return std::round(value * s) / s;
}

void write_cost_table_csv(const std::filesystem::path& path, std::span<const VariantCost> rows,
                          std::optional<double> amortize_pretrain, double finetune_tokens) {
  std::vector<std::string> header{"variant", "forward", "backward", "bt", "other", "total", "relative"};
  if (amortize_pretrain) header.push_back("lifecycle");
  CsvWriter w(path, header);
  for (const VariantCost& c : rows) {
    w.cell(c.name).cell(c.forward).cell(c.backward).cell(c.bt).cell(c.other).cell(c.total).cell(c.relative);
    if (amortize_pretrain) w.cell(amortized_cost(*amortize_pretrain, finetune_tokens, c.relative));
    w.end_row();
  }
}

CostRequest read_cost_config(const KvConfig& c) {
  CostRequest r;
  r.include_reference = c.get_bool("cost.reference", r.include_reference);
  if (c.contains("cost.custom_P")) r.custom_P = c.get_size("cost.custom_P", 1);
  r.custom_fraction = c.get_double("cost.custom_fraction", r.custom_fraction);
  r.custom_bt = parse_bt_mode(c.get_string("cost.custom_bt", to_string(r.custom_bt)));
  if (c.contains("cost.custom_bt_units")) r.custom_bt_units = c.get_double("cost.custom_bt_units", 0.0);
  r.custom_other = c.get_double("cost.custom_other", r.custom_other);
  r.custom_name = c.get_string("cost.custom_name", r.custom_name);
  r.amortize = c.get_bool("cost.amortize", r.amortize);
  r.pretrain_tokens = c.get_double("cost.pretrain_tokens", r.pretrain_tokens);
  r.finetune_tokens = c.get_double("cost.finetune_tokens", r.finetune_tokens);
  return r;
}

void write_cost_config(const CostRequest& r, KvConfig& c) {
  c.set("cost.reference", r.include_reference);
  if (r.custom_P) c.set("cost.custom_P", *r.custom_P);
  c.set("cost.custom_fraction", r.custom_fraction);
  c.set("cost.custom_bt", to_string(r.custom_bt));
  if (r.custom_bt_units) c.set("cost.custom_bt_units", *r.custom_bt_units);
  c.set("cost.custom_other", r.custom_other);
  c.set("cost.custom_name", r.custom_name);
  c.set("cost.amortize", r.amortize);
  c.set("cost.pretrain_tokens", r.pretrain_tokens);
  c.set("cost.finetune_tokens", r.finetune_tokens);
}

std::vector<VariantCost> build_rows(const CostRequest& r) {
  std::vector<VariantCost> rows;
  if (r.include_reference) rows = reference_variants();
  if (r.custom_P) {
    rows.push_back(variant_cost(*r.custom_P, r.custom_fraction, r.custom_bt,
                                {r.custom_bt_units, r.custom_other}, r.custom_name));
  }
  return rows;
}

}  // namespace ndlab::costmodel
