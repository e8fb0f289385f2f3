#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mmvr/ablation.hpp"
#include "mmvr/errors.hpp"
#include "mmvr/metrics.hpp"

namespace mmvr {

namespace {

constexpr const char* kCsvHeader =
    "run_id,phase,p,mask_fraction,modality,seed,R@1,R@5,R@10,MdR,MnR,gm";

std::string fmt(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// p / mask_fraction use two decimals and render negatives (not applicable) empty
std::string fmt_knob(double v) { return v < 0.0 ? std::string() : fmt(v, 2); }

// strict: the whole field must be consumed, so "8..0" or "3x" are rejected
double parse_num(const std::string& s) {
  size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw DataError("trailing characters in numeric field '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& s) {
  size_t pos = 0;
  const std::uint64_t v = std::stoull(s, &pos);
  if (pos != s.size()) throw DataError("trailing characters in numeric field '" + s + "'");
  return v;
}

double parse_knob(const std::string& s) {
  if (s.empty()) return -1.0;
  return parse_num(s);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

struct GroupKey {
  std::string phase;
  double p;
  double mask_fraction;
  std::string modality;

  bool operator==(const GroupKey&) const = default;
};

std::string group_label(const GroupKey& k) {
  std::string s = k.phase;
  if (k.p >= 0.0) s += " p=" + fmt(k.p, 2);
  if (k.mask_fraction >= 0.0) s += " f=" + fmt(k.mask_fraction, 2);
  s += " " + k.modality;
  return s;
}

struct Agg {
  std::vector<double> vals;
  double mean() const {
    double s = 0.0;
    for (double v : vals) s += v;
    return s / static_cast<double>(vals.size());
  }
  // sample standard deviation; zero for a single observation
  double stdev() const {
    const size_t n = vals.size();
    if (n < 2) return 0.0;
    const double m = mean();
    double s = 0.0;
    for (double v : vals) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(n - 1));
  }
};

std::string cell(const Agg& a, int prec) {
  return fmt(a.mean(), prec) + " +- " + fmt(a.stdev(), prec);
}

}  // namespace

const char* ablation_kind_name(AblationKind k) {
  switch (k) {
    case AblationKind::kPSweep: return "p_sweep";
    case AblationKind::kPartialMask: return "partial_mask";
    case AblationKind::kSingleModality: return "single_modality";
  }
  throw Error("unknown ablation kind");
}

AblationKind parse_ablation_kind(const std::string& name) {
  if (name == "p_sweep") return AblationKind::kPSweep;
  if (name == "partial_mask") return AblationKind::kPartialMask;
  if (name == "single_modality") return AblationKind::kSingleModality;
  throw ConfigError("unknown ablation kind '" + name +
                    "' (expected p_sweep, partial_mask or single_modality)");
}

void AblationConfig::validate() const {
  if (grid.empty()) throw ConfigError("ablation.grid: must be nonempty");
  if (n_seeds < 1) throw ConfigError("ablation.n_seeds: must be >= 1");
  for (double v : grid) {
    if (!(v > 0.0 && v <= 1.0))
      throw ConfigError("ablation.grid: values must lie in (0, 1], got " + fmt(v, 4));
  }
  pretrain_cfg.validate();
  finetune_cfg.validate();
}

AblationRow make_row(std::string run_id, std::string phase, double p, double mask_fraction,
                     std::string modality, std::uint64_t seed, const RetrievalMetrics& m) {
  AblationRow row;
  row.run_id = std::move(run_id);
  row.phase = std::move(phase);
  row.p = p;
  row.mask_fraction = mask_fraction;
  row.modality = std::move(modality);
  row.seed = seed;
  row.r1 = m.r(1);
  row.r5 = m.r(5);
  row.r10 = m.r(10);
  row.mdr = m.mdr;
  row.mnr = m.mnr;
  row.gm = geometric_mean_selection(m);
  return row;
}

std::string rows_to_csv(const std::vector<AblationRow>& rows) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const AblationRow& r : rows) {
    out += r.run_id + ',' + r.phase + ',' + fmt_knob(r.p) + ',' + fmt_knob(r.mask_fraction) + ',' +
           r.modality + ',' + std::to_string(r.seed) + ',' + fmt(r.r1, 6) + ',' + fmt(r.r5, 6) +
           ',' + fmt(r.r10, 6) + ',' + fmt(r.mdr, 6) + ',' + fmt(r.mnr, 6) + ',' + fmt(r.gm, 6) +
           '\n';
  }
  return out;
}

std::vector<AblationRow> parse_rows_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader)
    throw DataError("unexpected CSV header: " + line);
  std::vector<AblationRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() != 12)
      throw DataError("CSV line " + std::to_string(lineno) + ": expected 12 fields, got " +
                      std::to_string(f.size()));
    AblationRow r;
    try {
      r.run_id = f[0];
      r.phase = f[1];
      r.p = parse_knob(f[2]);
      r.mask_fraction = parse_knob(f[3]);
      r.modality = f[4];
      r.seed = parse_u64(f[5]);
      r.r1 = parse_num(f[6]);
      r.r5 = parse_num(f[7]);
      r.r10 = parse_num(f[8]);
      r.mdr = parse_num(f[9]);
      r.mnr = parse_num(f[10]);
      r.gm = parse_num(f[11]);
    } catch (const std::exception&) {
      throw DataError("CSV line " + std::to_string(lineno) + ": malformed value");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string render_table(const std::vector<AblationRow>& rows) {
  std::vector<GroupKey> keys;
  std::vector<std::array<Agg, 6>> aggs;  // R@1, R@5, R@10, MdR, MnR, gm
  for (const AblationRow& r : rows) {
    const GroupKey key{r.phase, r.p, r.mask_fraction, r.modality};
    size_t g = 0;
    for (; g < keys.size(); ++g)
      if (keys[g] == key) break;
    if (g == keys.size()) {
      keys.push_back(key);
      aggs.emplace_back();
    }
    aggs[g][0].vals.push_back(r.r1);
    aggs[g][1].vals.push_back(r.r5);
    aggs[g][2].vals.push_back(r.r10);
    aggs[g][3].vals.push_back(r.mdr);
    aggs[g][4].vals.push_back(r.mnr);
    aggs[g][5].vals.push_back(r.gm);
  }

  const char* headers[7] = {"group", "R@1", "R@5", "R@10", "MdR", "MnR", "gm"};
  std::vector<std::array<std::string, 7>> lines;
  for (size_t g = 0; g < keys.size(); ++g) {
    std::array<std::string, 7> line;
    line[0] = group_label(keys[g]);
    for (int c = 0; c < 3; ++c) line[1 + c] = cell(aggs[g][c], 3);
    line[4] = cell(aggs[g][3], 1);
    line[5] = cell(aggs[g][4], 1);
    line[6] = cell(aggs[g][5], 3);
    lines.push_back(std::move(line));
  }

  std::array<size_t, 7> width{};
  for (int c = 0; c < 7; ++c) width[c] = std::string(headers[c]).size();
  for (const auto& line : lines)
    for (int c = 0; c < 7; ++c) width[c] = std::max(width[c], line[c].size());

  std::string out;
  auto emit = [&](const std::array<std::string, 7>& line) {
    for (int c = 0; c < 7; ++c) {
      std::string padded = line[c];
      padded.resize(width[c], ' ');
      out += padded;
      out += c + 1 < 7 ? "  " : "";
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    out += '\n';
  };
  std::array<std::string, 7> head;
  for (int c = 0; c < 7; ++c) head[c] = headers[c];
  emit(head);
  for (const auto& line : lines) emit(line);
  return out;
}

std::string render_report(const std::vector<std::string>& csv_texts) {
  std::vector<AblationRow> all;
  for (const std::string& text : csv_texts) {
    std::vector<AblationRow> rows = parse_rows_csv(text);
    all.insert(all.end(), rows.begin(), rows.end());
  }
  return render_table(all);
}

namespace {

// one pretrain(+finetune) pair; p < 0 skips pre-training (scratch baseline)
RetrievalMetrics run_point(const FeatureStore& store, const AblationConfig& cfg, double p,
                           double f, std::uint64_t seed, const EvalOptions& eval_opt,
                           ModelParams* out_params, std::ostream* log) {
  TrainConfig ft = cfg.finetune_cfg;
  ft.phase = TrainPhase::kFinetune;
  ft.seed = seed;

  const ModelParams* init = nullptr;
  ModelParams pretrained;
  if (p >= 0.0) {
    TrainConfig pt = cfg.pretrain_cfg;
    pt.phase = TrainPhase::kPretrain;
    pt.masking.p = p;
    pt.masking.mask_fraction = f;
    pt.seed = seed;
    pt.masking.seed = mix64(seed ^ 0xBA7C3ULL);
    PretrainResult pr = pretrain(store, cfg.model, pt, nullptr, log);
    pretrained = std::move(pr.checkpoint.params);
    init = &pretrained;
  } else {
    ft.phase = TrainPhase::kScratch;
  }

  FinetuneResult fr = finetune(store, cfg.model, ft, init, log);
  RetrievalMetrics test = evaluate_retrieval(store, store.manifest().test_ids, cfg.model,
                                             fr.best_params, eval_opt);
  if (out_params) *out_params = std::move(fr.best_params);
  return test;
}

std::string run_id_for(const AblationConfig& cfg, double p, double f, const std::string& modality,
                       std::uint64_t seed) {
  std::string id = ablation_kind_name(cfg.kind);
  if (p >= 0.0) id += ":p=" + fmt(p, 2);
  if (f >= 0.0) id += ":f=" + fmt(f, 2);
  id += ":m=" + modality + ":s=" + std::to_string(seed);
  return id;
}

}  // namespace

AblationResult ablate(const FeatureStore& store, const AblationConfig& cfg, std::ostream* log) {
  cfg.validate();
  EvalOptions eval_opt;
  eval_opt.crop_s = cfg.finetune_cfg.crop_s;
  eval_opt.caps = cfg.finetune_cfg.caps;
  eval_opt.aggregation = cfg.finetune_cfg.aggregation;

  AblationResult result;
  for (double g : cfg.grid) {
    const double p = cfg.kind == AblationKind::kPartialMask ? cfg.pretrain_cfg.masking.p : g;
    const double f = cfg.kind == AblationKind::kPartialMask ? g : cfg.pretrain_cfg.masking.mask_fraction;
    for (int s = 0; s < cfg.n_seeds; ++s) {
      const std::uint64_t seed = cfg.seed0 + static_cast<std::uint64_t>(s);
      if (log)
        *log << "[ablate] " << ablation_kind_name(cfg.kind) << " p=" << p << " f=" << f
             << " seed=" << seed << "\n";
      ModelParams best;
      const RetrievalMetrics test = run_point(store, cfg, p, f, seed, eval_opt, &best, log);
      result.rows.push_back(
          make_row(run_id_for(cfg, p, f, "all", seed), "finetune", p, f, "all", seed, test));
      if (cfg.kind == AblationKind::kSingleModality) {
        for (ModalityId m : kModalities) {
          const RetrievalMetrics mm = single_modality_eval(store, store.manifest().test_ids,
                                                           cfg.model, best, m, eval_opt);
          result.rows.push_back(make_row(run_id_for(cfg, p, f, modality_name(m), seed), "finetune",
                                         p, f, modality_name(m), seed, mm));
        }
      }
    }
  }
  if (cfg.include_scratch && cfg.kind == AblationKind::kPSweep) {
    for (int s = 0; s < cfg.n_seeds; ++s) {
      const std::uint64_t seed = cfg.seed0 + static_cast<std::uint64_t>(s);
      if (log) *log << "[ablate] scratch seed=" << seed << "\n";
      const RetrievalMetrics test = run_point(store, cfg, -1.0, -1.0, seed, eval_opt, nullptr, log);
      result.rows.push_back(make_row(ablation_kind_name(cfg.kind) + std::string(":scratch:s=") +
                                         std::to_string(seed),
                                     "scratch", -1.0, -1.0, "all", seed, test));
    }
  }

  result.csv = rows_to_csv(result.rows);
  // render from the parsed CSV so stored and in-memory reports share bytes
  result.table = render_table(parse_rows_csv(result.csv));
  return result;
}

}  // namespace mmvr
