#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mmvr/corpus.hpp"
#include "mmvr/encoders.hpp"
#include "mmvr/metrics.hpp"
#include "mmvr/trainer.hpp"

namespace mmvr {

enum class AblationKind { kPSweep, kPartialMask, kSingleModality };

const char* ablation_kind_name(AblationKind k);
AblationKind parse_ablation_kind(const std::string& name);  // throws ConfigError

struct AblationConfig {
  AblationKind kind = AblationKind::kPSweep;
  // p_sweep / single_modality: supervising probabilities; partial_mask: fractions
  std::vector<double> grid;
  int n_seeds = 3;
  std::uint64_t seed0 = 0;
  bool include_scratch = false;  // p_sweep baseline rows without pre-training

  ModelConfig model;
  TrainConfig pretrain_cfg;  // phase forced to kPretrain
  TrainConfig finetune_cfg;  // phase forced to kFinetune

  void validate() const;  // throws ConfigError (empty grid, n_seeds < 1)
};

struct AblationRow {
  std::string run_id;
  std::string phase;          // "finetune" or "scratch"
  double p = -1.0;            // < 0 renders as an empty field
  double mask_fraction = -1.0;
  std::string modality;       // "all" or a single modality name
  std::uint64_t seed = 0;
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
  double mdr = 0.0, mnr = 0.0, gm = 0.0;
};

AblationRow make_row(std::string run_id, std::string phase, double p, double mask_fraction,
                     std::string modality, std::uint64_t seed, const RetrievalMetrics& m);

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string csv;    // one row per (grid point, seed[, modality])
  std::string table;  // mean +- std per group, aligned columns
};

// Pre-trains and fine-tunes per grid point and seed on the given store, then
// evaluates on the test split. Grid points run sequentially; each run derives
// its seed as seed0 + seed_index for both phases.
AblationResult ablate(const FeatureStore& store, const AblationConfig& cfg,
                      std::ostream* log = nullptr);

// CSV round trip. Schema:
// run_id,phase,p,mask_fraction,modality,seed,R@1,R@5,R@10,MdR,MnR,gm
std::string rows_to_csv(const std::vector<AblationRow>& rows);
std::vector<AblationRow> parse_rows_csv(const std::string& text);  // throws DataError

// Aggregated table: one line per (phase, p, mask_fraction, modality) group in
// first-appearance order, cells "mean +- std" (sample std, 0 for one seed).
// Deterministic bytes for identical input.
std::string render_table(const std::vector<AblationRow>& rows);

// report entry point: parse every CSV, concatenate in argument order, render
std::string render_report(const std::vector<std::string>& csv_texts);

}  // namespace mmvr
