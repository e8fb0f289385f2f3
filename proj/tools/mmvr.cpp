#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mmvr/ablation.hpp"
#include "mmvr/config.hpp"
#include "mmvr/corpus.hpp"
#include "mmvr/encoders.hpp"
#include "mmvr/errors.hpp"
#include "mmvr/metrics.hpp"
#include "mmvr/trainer.hpp"

namespace fs = std::filesystem;
using namespace mmvr;

namespace {

constexpr std::string_view kKnownKeys[] = {
    "gen.n_clips", "gen.z_dim", "gen.d_rgb", "gen.d_aud", "gen.d_asr", "gen.vocab_size",
    "gen.noise_rgb", "gen.noise_aud", "gen.noise_asr", "gen.caption_min", "gen.caption_max",
    "gen.duration_min", "gen.duration_max", "gen.words_per_second", "gen.silence_alignment",
    "gen.silence_prob", "gen.seed",
    "model.d_model", "model.n_layers", "model.n_heads", "model.d_ff", "model.dropout_p",
    "model.d_rgb", "model.d_aud", "model.d_asr", "model.vocab_size", "model.cap_rgb",
    "model.cap_audio", "model.cap_asr", "model.cap_text", "model.use_temporal_embeddings_psi",
    "model.use_temporal_embeddings_phi", "model.netvlad_clusters", "model.ln_eps",
    "pretrain.batch_size", "pretrain.lr0", "pretrain.decay_factor", "pretrain.decay_every_steps",
    "pretrain.total_steps", "pretrain.margin", "pretrain.seed", "pretrain.eval_every_steps",
    "pretrain.crop_s", "pretrain.masking.p", "pretrain.masking.mask_fraction",
    "pretrain.masking.seed",
    "finetune.batch_size", "finetune.lr0", "finetune.decay_factor", "finetune.decay_every_steps",
    "finetune.total_steps", "finetune.margin", "finetune.seed", "finetune.eval_every_steps",
    "finetune.crop_s", "finetune.aggregation", "finetune.freeze_query",
    "ablation.kind", "ablation.grid", "ablation.seeds", "ablation.seed0",
    "ablation.include_scratch",
    "eval.split", "eval.modality",
    "io.data", "io.init", "io.model",
};

GeneratorConfig generator_from(const Config& c) {
  GeneratorConfig g;
  g.n_clips = c.get_int("gen.n_clips", g.n_clips);
  g.z_dim = static_cast<int>(c.get_int("gen.z_dim", g.z_dim));
  g.d_rgb = static_cast<int>(c.get_int("gen.d_rgb", g.d_rgb));
  g.d_aud = static_cast<int>(c.get_int("gen.d_aud", g.d_aud));
  g.d_asr = static_cast<int>(c.get_int("gen.d_asr", g.d_asr));
  g.vocab_size = static_cast<int>(c.get_int("gen.vocab_size", g.vocab_size));
  g.noise_rgb = c.get_double("gen.noise_rgb", g.noise_rgb);
  g.noise_aud = c.get_double("gen.noise_aud", g.noise_aud);
  g.noise_asr = c.get_double("gen.noise_asr", g.noise_asr);
  g.caption_min = static_cast<int>(c.get_int("gen.caption_min", g.caption_min));
  g.caption_max = static_cast<int>(c.get_int("gen.caption_max", g.caption_max));
  g.duration_min = static_cast<int>(c.get_int("gen.duration_min", g.duration_min));
  g.duration_max = static_cast<int>(c.get_int("gen.duration_max", g.duration_max));
  g.words_per_second = static_cast<int>(c.get_int("gen.words_per_second", g.words_per_second));
  g.silence_alignment = c.get_bool("gen.silence_alignment", g.silence_alignment);
  g.silence_prob = c.get_double("gen.silence_prob", g.silence_prob);
  g.seed = static_cast<std::uint64_t>(c.get_int("gen.seed", 0));
  return g;
}

ModelConfig model_from(const Config& c) {
  ModelConfig m;
  m.d_model = static_cast<int>(c.get_int("model.d_model", m.d_model));
  m.n_layers = static_cast<int>(c.get_int("model.n_layers", m.n_layers));
  m.n_heads = static_cast<int>(c.get_int("model.n_heads", m.n_heads));
  m.d_ff = static_cast<int>(c.get_int("model.d_ff", m.d_ff));
  m.dropout_p = c.get_double("model.dropout_p", m.dropout_p);
  m.d_rgb = static_cast<int>(c.get_int("model.d_rgb", m.d_rgb));
  m.d_aud = static_cast<int>(c.get_int("model.d_aud", m.d_aud));
  m.d_asr = static_cast<int>(c.get_int("model.d_asr", m.d_asr));
  m.vocab_size = static_cast<int>(c.get_int("model.vocab_size", m.vocab_size));
  m.cap_rgb = static_cast<int>(c.get_int("model.cap_rgb", m.cap_rgb));
  m.cap_audio = static_cast<int>(c.get_int("model.cap_audio", m.cap_audio));
  m.cap_asr = static_cast<int>(c.get_int("model.cap_asr", m.cap_asr));
  m.cap_text = static_cast<int>(c.get_int("model.cap_text", m.cap_text));
  m.use_temporal_embeddings_psi =
      c.get_bool("model.use_temporal_embeddings_psi", m.use_temporal_embeddings_psi);
  m.use_temporal_embeddings_phi =
      c.get_bool("model.use_temporal_embeddings_phi", m.use_temporal_embeddings_phi);
  m.netvlad_clusters = static_cast<int>(c.get_int("model.netvlad_clusters", m.netvlad_clusters));
  m.ln_eps = c.get_double("model.ln_eps", m.ln_eps);
  return m;
}

CaptionAggregation aggregation_from(const std::string& name) {
  if (name == "pooled") return CaptionAggregation::kPooled;
  if (name == "netvlad") return CaptionAggregation::kNetvlad;
  throw ConfigError("finetune.aggregation: expected pooled or netvlad, got '" + name + "'");
}

SampleCaps caps_from(const ModelConfig& m) {
  return SampleCaps{m.cap_rgb, m.cap_audio, m.cap_asr, m.cap_text};
}

TrainConfig train_from(const Config& c, const std::string& prefix, TrainPhase phase,
                       const ModelConfig& model) {
  TrainConfig t;
  t.phase = phase;
  const bool pre = phase == TrainPhase::kPretrain;
  t.lr0 = pre ? 1e-3 : 5e-4;
  t.total_steps = pre ? 2000 : 1000;
  t.margin = pre ? 0.05 : 0.2;
  auto key = [&](const char* k) { return prefix + "." + k; };
  t.batch_size = static_cast<int>(c.get_int(key("batch_size"), t.batch_size));
  t.lr0 = c.get_double(key("lr0"), t.lr0);
  t.decay_factor = c.get_double(key("decay_factor"), t.decay_factor);
  t.decay_every_steps = static_cast<int>(c.get_int(key("decay_every_steps"), t.decay_every_steps));
  t.total_steps = c.get_int(key("total_steps"), t.total_steps);
  t.margin = c.get_double(key("margin"), t.margin);
  t.seed = static_cast<std::uint64_t>(c.get_int(key("seed"), 0));
  t.eval_every_steps = c.get_int(key("eval_every_steps"), t.eval_every_steps);
  t.crop_s = static_cast<int>(c.get_int(key("crop_s"), t.crop_s));
  t.caps = caps_from(model);
  if (pre) {
    t.masking.p = c.get_double("pretrain.masking.p", t.masking.p);
    t.masking.mask_fraction = c.get_double("pretrain.masking.mask_fraction", t.masking.mask_fraction);
    t.masking.seed = static_cast<std::uint64_t>(c.get_int("pretrain.masking.seed", 1));
  } else {
    t.aggregation = aggregation_from(c.get_string("finetune.aggregation", "pooled"));
    t.freeze_query = c.get_bool("finetune.freeze_query", false);
  }
  return t;
}

Config load_config(const std::string& path, const std::vector<std::string>& sets) {
  Config c = path.empty() ? Config() : Config::parse_file(path);
  for (const std::string& s : sets) c.apply_override(s);
  c.require_known_keys(kKnownKeys);
  return c;
}

// relative --out paths land under MMVR_OUT_ROOT when it is set
fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (const char* root = std::getenv("MMVR_OUT_ROOT"); root && *root && p.is_relative())
    p = fs::path(root) / p;
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f.flush()) throw DataError("short write: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingInputError("cannot open: " + path.string());
  std::ostringstream out;
  out << f.rdbuf();
  return out.str();
}

void write_resolved(const Config& c, const fs::path& dir) {
  write_text(dir / "resolved.cfg", c.serialize());
}

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string f6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

fs::path store_path(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "corpus.bin";
  return p;
}

// model argument may be a run directory (best.bin preferred) or a checkpoint file
fs::path checkpoint_path(const std::string& model) {
  fs::path p(model);
  if (fs::is_directory(p)) {
    if (fs::exists(p / "best.bin")) return p / "best.bin";
    return p / "checkpoint.bin";
  }
  return p;
}

std::string loss_csv(const std::vector<double>& losses) {
  std::string out = "step,loss\n";
  for (size_t i = 0; i < losses.size(); ++i)
    out += std::to_string(i + 1) + "," + g17(losses[i]) + "\n";
  return out;
}

std::string metrics_line(const RetrievalMetrics& m) {
  return f6(m.r(1)) + "," + f6(m.r(5)) + "," + f6(m.r(10)) + "," + f6(m.mdr) + "," + f6(m.mnr) +
         "," + f6(geometric_mean_selection(m));
}

void print_metrics(std::ostream& out, const RetrievalMetrics& m) {
  out << "R@1 " << f6(m.r(1)) << "  R@5 " << f6(m.r(5)) << "  R@10 " << f6(m.r(10)) << "  MdR "
      << f6(m.mdr) << "  MnR " << f6(m.mnr) << "  gm " << f6(geometric_mean_selection(m))
      << "  (" << m.n_queries << " queries)\n";
}

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool out_required = true) {
  cmd->add_option("--config", a.config, "config file (dotted key = value lines)");
  cmd->add_option("--set", a.sets, "override, e.g. --set pretrain.masking.p=1.0");
  auto* out = cmd->add_option("--out", a.out, "output directory");
  if (out_required) out->required();
}

int cmd_gen_data(const CommonArgs& a) {
  Config c = load_config(a.config, a.sets);
  const GeneratorConfig gen = generator_from(c);
  const fs::path out = resolve_out(a.out);
  auto [manifest, records] = generate_corpus(gen);
  write_store(manifest, records, (out / "corpus.bin").string());
  write_resolved(c, out);
  const FeatureStore store = FeatureStore::open((out / "corpus.bin").string());
  std::ostringstream dump;
  dump_manifest(store, dump);
  write_text(out / "manifest.txt", dump.str());
  std::cout << "wrote " << (out / "corpus.bin").string() << " (" << store.size() << " clips: "
            << store.manifest().train_ids.size() << " train, "
            << store.manifest().val_ids.size() << " val, " << store.manifest().test_ids.size()
            << " test)\n";
  return 0;
}

int cmd_pretrain(const CommonArgs& a, const std::string& data, const std::string& resume) {
  Config c = load_config(a.config, a.sets);
  c.set("io.data", data);
  const ModelConfig model = model_from(c);
  const TrainConfig train = train_from(c, "pretrain", TrainPhase::kPretrain, model);
  const FeatureStore store = FeatureStore::open(store_path(data).string());
  const fs::path out = resolve_out(a.out);
  write_resolved(c, out);

  Checkpoint resumed;
  const Checkpoint* resume_ptr = nullptr;
  if (!resume.empty()) {
    resumed = load_checkpoint(checkpoint_path(resume).string(), config_fingerprint(model, train));
    resume_ptr = &resumed;
  }
  PretrainResult r = pretrain(store, model, train, resume_ptr, &std::cout);
  save_checkpoint(r.checkpoint, (out / "checkpoint.bin").string());
  write_text(out / "loss.csv", loss_csv(r.loss_history));
  std::string val = "step,val_loss\n";
  for (const auto& [step, v] : r.val_loss_history) val += std::to_string(step) + "," + g17(v) + "\n";
  write_text(out / "val_loss.csv", val);
  std::cout << "wrote " << (out / "checkpoint.bin").string() << " at step " << r.checkpoint.step
            << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& a, const std::string& data, const std::string& init,
                 bool scratch) {
  Config c = load_config(a.config, a.sets);
  c.set("io.data", data);
  if (!scratch) c.set("io.init", init);
  const ModelConfig model = model_from(c);
  TrainConfig train = train_from(c, "finetune", TrainPhase::kFinetune, model);
  if (scratch) train.phase = TrainPhase::kScratch;
  const FeatureStore store = FeatureStore::open(store_path(data).string());
  const fs::path out = resolve_out(a.out);
  write_resolved(c, out);

  Checkpoint init_ckpt;
  const ModelParams* init_ptr = nullptr;
  if (!scratch) {
    if (init.empty()) throw ConfigError("finetune: pass --init <pretrain run> or --scratch");
    init_ckpt = load_checkpoint(checkpoint_path(init).string());
    init_ptr = &init_ckpt.params;
  }
  FinetuneResult r = finetune(store, model, train, init_ptr, &std::cout);
  save_checkpoint(r.checkpoint, (out / "checkpoint.bin").string());
  Checkpoint best = r.checkpoint;
  best.step = r.best_step;
  best.params = std::move(r.best_params);
  save_checkpoint(best, (out / "best.bin").string());
  write_text(out / "loss.csv", loss_csv(r.loss_history));
  std::string val = "step,R@1,R@5,R@10,MdR,MnR,gm\n";
  for (const auto& [step, m] : r.val_history)
    val += std::to_string(step) + "," + metrics_line(m) + "\n";
  write_text(out / "val_metrics.csv", val);
  std::cout << "best step " << best.step << " val ";
  print_metrics(std::cout, r.best_val_metrics);
  return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& data, const std::string& model_path,
             const std::string& split, const std::string& modality) {
  Config c = load_config(a.config, a.sets);
  c.set("io.data", data);
  c.set("io.model", model_path);
  c.set("eval.split", split);
  c.set("eval.modality", modality);
  const ModelConfig model = model_from(c);
  const TrainConfig ft = train_from(c, "finetune", TrainPhase::kFinetune, model);
  const FeatureStore store = FeatureStore::open(store_path(data).string());
  const Checkpoint ckpt = load_checkpoint(checkpoint_path(model_path).string());

  std::span<const std::int64_t> ids;
  if (split == "test") ids = store.manifest().test_ids;
  else if (split == "val") ids = store.manifest().val_ids;
  else if (split == "train") ids = store.manifest().train_ids;
  else throw ConfigError("eval.split: expected test, val or train, got '" + split + "'");

  EvalOptions opt;
  opt.crop_s = ft.crop_s;
  opt.caps = ft.caps;
  opt.aggregation = ft.aggregation;

  RetrievalMetrics m;
  if (modality == "all") {
    m = evaluate_retrieval(store, ids, model, ckpt.params, opt);
  } else {
    m = single_modality_eval(store, ids, model, ckpt.params, modality_from_name(modality), opt);
  }

  std::vector<AblationRow> rows{make_row("eval:" + split + ":m=" + modality, "eval", -1.0, -1.0,
                                         modality, 0, m)};
  print_metrics(std::cout, m);
  if (!a.out.empty()) {
    const fs::path out = resolve_out(a.out);
    write_resolved(c, out);
    write_text(out / "metrics.csv", rows_to_csv(rows));
  }
  return 0;
}

int cmd_ablate(const CommonArgs& a, const std::string& data, const std::string& kind,
               const std::string& grid_arg, int seeds, std::uint64_t seed0, bool scratch) {
  Config c = load_config(a.config, a.sets);
  c.set("io.data", data);
  c.set("ablation.kind", kind);
  c.set("ablation.grid", grid_arg);
  c.set("ablation.seeds", std::to_string(seeds));
  c.set("ablation.seed0", std::to_string(seed0));
  c.set("ablation.include_scratch", scratch ? "true" : "false");

  AblationConfig ab;
  ab.kind = parse_ablation_kind(kind);
  ab.grid = c.get_double_list("ablation.grid", {});
  ab.n_seeds = seeds;
  ab.seed0 = seed0;
  ab.include_scratch = scratch;
  ab.model = model_from(c);
  ab.pretrain_cfg = train_from(c, "pretrain", TrainPhase::kPretrain, ab.model);
  ab.finetune_cfg = train_from(c, "finetune", TrainPhase::kFinetune, ab.model);

  const FeatureStore store = FeatureStore::open(store_path(data).string());
  const fs::path out = resolve_out(a.out);
  write_resolved(c, out);
  AblationResult r = ablate(store, ab, &std::cout);
  write_text(out / "ablation.csv", r.csv);
  write_text(out / "report.txt", r.table);
  std::cout << r.table;
  return 0;
}

int cmd_report(const std::vector<std::string>& csvs, const std::string& out_arg) {
  std::vector<std::string> texts;
  for (const std::string& p : csvs) texts.push_back(read_text(p));
  const std::string table = render_report(texts);
  if (!out_arg.empty()) {
    const fs::path out = resolve_out(out_arg);
    write_text(out / "report.txt", table);
  }
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal video retrieval pipeline"};
  app.require_subcommand(1);

  CommonArgs gen_args;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  add_common(gen, gen_args);

  CommonArgs pre_args;
  std::string pre_data, pre_resume;
  auto* pre = app.add_subcommand("pretrain", "alternating modality-masking pre-training");
  add_common(pre, pre_args);
  pre->add_option("--data", pre_data, "corpus directory or file")->required();
  pre->add_option("--resume", pre_resume, "checkpoint to continue from");

  CommonArgs ft_args;
  std::string ft_data, ft_init;
  bool ft_scratch = false;
  auto* ft = app.add_subcommand("finetune", "caption-to-video fine-tuning");
  add_common(ft, ft_args);
  ft->add_option("--data", ft_data, "corpus directory or file")->required();
  ft->add_option("--init", ft_init, "pre-training run directory or checkpoint");
  ft->add_flag("--scratch", ft_scratch, "train from random init");

  CommonArgs ev_args;
  std::string ev_data, ev_model, ev_split = "test", ev_modality = "all";
  auto* ev = app.add_subcommand("eval", "retrieval metrics for a trained model");
  add_common(ev, ev_args, /*out_required=*/false);
  ev->add_option("--data", ev_data, "corpus directory or file")->required();
  ev->add_option("--model", ev_model, "fine-tune run directory or checkpoint")->required();
  ev->add_option("--split", ev_split, "test, val or train");
  ev->add_option("--modality", ev_modality, "all, rgb, audio or asr");

  CommonArgs ab_args;
  std::string ab_data, ab_kind, ab_grid;
  int ab_seeds = 3;
  std::uint64_t ab_seed0 = 0;
  bool ab_scratch = false;
  auto* ab = app.add_subcommand("ablate", "grid of pretrain+finetune runs");
  add_common(ab, ab_args);
  ab->add_option("--data", ab_data, "corpus directory or file")->required();
  ab->add_option("--kind", ab_kind, "p_sweep, partial_mask or single_modality")->required();
  ab->add_option("--grid", ab_grid, "comma-separated values, e.g. 1.0,0.8")->required();
  ab->add_option("--seeds", ab_seeds, "seeds per grid point");
  ab->add_option("--seed0", ab_seed0, "first seed");
  ab->add_flag("--scratch", ab_scratch, "add a from-scratch baseline (p_sweep)");

  std::vector<std::string> rp_csvs;
  std::string rp_out;
  auto* rp = app.add_subcommand("report", "aggregate stored CSVs into a table");
  rp->add_option("csv", rp_csvs, "ablation/eval CSV files")->required();
  rp->add_option("--out", rp_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (pre->parsed()) return cmd_pretrain(pre_args, pre_data, pre_resume);
    if (ft->parsed()) return cmd_finetune(ft_args, ft_data, ft_init, ft_scratch);
    if (ev->parsed()) return cmd_eval(ev_args, ev_data, ev_model, ev_split, ev_modality);
    if (ab->parsed()) return cmd_ablate(ab_args, ab_data, ab_kind, ab_grid, ab_seeds, ab_seed0,
                                        ab_scratch);
    if (rp->parsed()) return cmd_report(rp_csvs, rp_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
