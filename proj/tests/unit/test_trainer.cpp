#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "mmvr/corpus.hpp"
#include "mmvr/encoders.hpp"
#include "mmvr/errors.hpp"
#include "mmvr/metrics.hpp"
#include "mmvr/rng.hpp"
#include "mmvr/trainer.hpp"

using namespace mmvr;

namespace {

GeneratorConfig tiny_gen(std::int64_t n_clips, std::uint64_t seed) {
  GeneratorConfig gen;
  gen.n_clips = n_clips;
  gen.z_dim = 8;
  gen.d_rgb = 16;
  gen.d_aud = 8;
  gen.d_asr = 12;
  gen.vocab_size = 64;
  gen.seed = seed;
  return gen;
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.d_rgb = 16;
  cfg.d_aud = 8;
  cfg.d_asr = 12;
  cfg.vocab_size = 64;
  cfg.netvlad_clusters = 2;
  cfg.dropout_p = 0.1;
  return cfg;
}

TrainConfig tiny_pretrain(std::int64_t steps) {
  TrainConfig cfg;
  cfg.phase = TrainPhase::kPretrain;
  cfg.batch_size = 4;
  cfg.lr0 = 5e-4;
  cfg.total_steps = steps;
  cfg.margin = 0.05;
  cfg.masking.p = 0.8;
  cfg.masking.mask_fraction = 1.0;
  cfg.masking.seed = 77;
  cfg.seed = 11;
  cfg.eval_every_steps = 100;
  cfg.crop_s = 6;
  return cfg;
}

FeatureStore make_store(const GeneratorConfig& gen, const std::string& path) {
  const auto [manifest, records] = generate_corpus(gen);
  write_store(manifest, records, path);
  return read_store(path);
}

bool same_tensors(const ModelParams& a, const ModelParams& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    if (!b.has(name)) return false;
    const Tensor& u = b.at(name);
    if (t.size() != u.size()) return false;
    if (std::memcmp(t.data(), u.data(), sizeof(double) * static_cast<size_t>(t.size())) != 0)
      return false;
  }
  return true;
}

bool same_tensor(const Tensor& t, const Tensor& u) {
  return t.size() == u.size() &&
         std::memcmp(t.data(), u.data(), sizeof(double) * static_cast<size_t>(t.size())) == 0;
}

}  // namespace

TEST_CASE("learning rate follows the staircase decay") {
  TrainConfig cfg;
  cfg.lr0 = 1e-4;
  cfg.decay_factor = 0.98;
  cfg.decay_every_steps = 2000;
  CHECK(lr_at(0, cfg) == 1e-4);
  CHECK(lr_at(1999, cfg) == 1e-4);
  CHECK(lr_at(2000, cfg) == doctest::Approx(9.8e-5).epsilon(1e-14));
  CHECK(lr_at(3999, cfg) == doctest::Approx(9.8e-5).epsilon(1e-14));
  CHECK(lr_at(4000, cfg) == doctest::Approx(9.604e-5).epsilon(1e-14));
  CHECK_THROWS_AS((void)lr_at(-1, cfg), ConfigError);
}

TEST_CASE("adam first step moves each coordinate by almost exactly lr") {
  ModelParams params;
  params.tensors.emplace("w", Tensor::from_data({1, 3}, {1.0, 2.0, 3.0}, true));
  Tensor& w = params.at("w");
  w.grad() = {2.0, -3.0, 0.0};

  AdamState state;
  const double lr = 0.01;
  adam_step(params, state, lr);
  CHECK(state.step == 1);
  // zero slots reduce the update to lr * g / (|g| + eps)
  CHECK(w.data()[0] == doctest::Approx(1.0 - lr * (2.0 / (2.0 + 1e-8))).epsilon(1e-15));
  CHECK(w.data()[1] == doctest::Approx(2.0 + lr * (3.0 / (3.0 + 1e-8))).epsilon(1e-15));
  CHECK(w.data()[2] == 3.0);  // zero gradient moves nothing on the first step
}

TEST_CASE("adam matches an independent reference over several steps") {
  ModelParams params;
  params.tensors.emplace("w", Tensor::from_data({1, 2}, {0.5, -1.5}, true));
  Tensor& w = params.at("w");

  const double lr = 0.02, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> theta{0.5, -1.5}, m(2, 0.0), v(2, 0.0);
  AdamState state;
  Rng rng(3);
  for (int step = 1; step <= 5; ++step) {
    std::vector<double> g{rng.normal(), rng.normal()};
    w.grad() = g;
    adam_step(params, state, lr, b1, b2, eps);
    for (int i = 0; i < 2; ++i) {
      m[static_cast<size_t>(i)] = b1 * m[static_cast<size_t>(i)] + (1 - b1) * g[static_cast<size_t>(i)];
      v[static_cast<size_t>(i)] =
          b2 * v[static_cast<size_t>(i)] + (1 - b2) * g[static_cast<size_t>(i)] * g[static_cast<size_t>(i)];
      const double mh = m[static_cast<size_t>(i)] / (1 - std::pow(b1, step));
      const double vh = v[static_cast<size_t>(i)] / (1 - std::pow(b2, step));
      theta[static_cast<size_t>(i)] -= lr * mh / (std::sqrt(vh) + eps);
      CHECK(w.data()[i] == doctest::Approx(theta[static_cast<size_t>(i)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("adam skips frozen parameters and rejects non-finite gradients") {
  ModelParams params;
  params.tensors.emplace("frozen", Tensor::from_data({1, 2}, {1.0, 1.0}, false));
  params.tensors.emplace("live", Tensor::from_data({1, 2}, {1.0, 1.0}, true));
  params.at("live").grad() = {0.5, 0.5};
  AdamState state;
  adam_step(params, state, 0.1);
  CHECK(params.at("frozen").data()[0] == 1.0);
  CHECK(state.slots.count("frozen") == 0);
  CHECK(params.at("live").data()[0] != 1.0);

  params.at("live").grad() = {std::nan(""), 0.0};
  CHECK_THROWS_WITH_AS(adam_step(params, state, 0.1), doctest::Contains("live"), TrainError);
}

TEST_CASE("config fingerprint keys the trajectory, not the run length") {
  const ModelConfig model = tiny_model();
  const TrainConfig base = tiny_pretrain(100);
  const std::uint64_t fp = config_fingerprint(model, base);

  // extending the run or changing the eval cadence must not break resume
  TrainConfig longer = base;
  longer.total_steps = 9999;
  longer.eval_every_steps = 7;
  CHECK(config_fingerprint(model, longer) == fp);

  auto differs = [&](auto mutate) {
    TrainConfig c = base;
    mutate(c);
    return config_fingerprint(model, c) != fp;
  };
  CHECK(differs([](TrainConfig& c) { c.lr0 = 1e-3; }));
  CHECK(differs([](TrainConfig& c) { c.seed = 12; }));
  CHECK(differs([](TrainConfig& c) { c.masking.p = 0.7; }));
  CHECK(differs([](TrainConfig& c) { c.masking.mask_fraction = 0.5; }));
  CHECK(differs([](TrainConfig& c) { c.masking.seed = 78; }));
  CHECK(differs([](TrainConfig& c) { c.batch_size = 8; }));
  CHECK(differs([](TrainConfig& c) { c.margin = 0.2; }));
  CHECK(differs([](TrainConfig& c) { c.crop_s = 7; }));
  CHECK(differs([](TrainConfig& c) { c.caps.rgb = 12; }));
  CHECK(differs([](TrainConfig& c) { c.decay_factor = 0.95; }));
  CHECK(differs([](TrainConfig& c) { c.decay_every_steps = 100; }));
  CHECK(differs([](TrainConfig& c) { c.phase = TrainPhase::kFinetune; }));
  CHECK(differs([](TrainConfig& c) { c.aggregation = CaptionAggregation::kNetvlad; }));
  CHECK(differs([](TrainConfig& c) { c.freeze_query = true; }));

  ModelConfig other_model = model;
  other_model.d_model = 32;
  CHECK(config_fingerprint(other_model, base) != fp);
}

TEST_CASE("pretrain is deterministic and indifferent to eval cadence") {
  const FeatureStore store = make_store(tiny_gen(36, 5), "trainer_det.bin");
  const ModelConfig model = tiny_model();
  const TrainConfig cfg = tiny_pretrain(6);

  const PretrainResult a = pretrain(store, model, cfg);
  const PretrainResult b = pretrain(store, model, cfg);
  CHECK(a.loss_history == b.loss_history);
  CHECK(same_tensors(a.checkpoint.params, b.checkpoint.params));

  // validation consumes no training randomness
  TrainConfig chatty = cfg;
  chatty.eval_every_steps = 2;
  const PretrainResult c = pretrain(store, model, chatty);
  CHECK(a.loss_history == c.loss_history);
  CHECK(same_tensors(a.checkpoint.params, c.checkpoint.params));
  // cadence 2 with 6 steps reports at 2, 4 and 6
  REQUIRE(c.val_loss_history.size() == 3);
  CHECK(c.val_loss_history[0].first == 2);
  CHECK(c.val_loss_history[1].first == 4);
  CHECK(c.val_loss_history[2].first == 6);
}

TEST_CASE("resumed pretraining continues the exact trajectory") {
  const FeatureStore store = make_store(tiny_gen(36, 6), "trainer_resume.bin");
  const ModelConfig model = tiny_model();

  const PretrainResult whole = pretrain(store, model, tiny_pretrain(6));
  const PretrainResult half = pretrain(store, model, tiny_pretrain(3));
  const PretrainResult rest = pretrain(store, model, tiny_pretrain(6), &half.checkpoint);

  REQUIRE(rest.loss_history.size() == 3);
  for (int i = 0; i < 3; ++i)
    CHECK(rest.loss_history[static_cast<size_t>(i)] == whole.loss_history[static_cast<size_t>(i) + 3]);
  CHECK(same_tensors(whole.checkpoint.params, rest.checkpoint.params));
  CHECK(whole.checkpoint.trainer_rng == rest.checkpoint.trainer_rng);
  CHECK(whole.checkpoint.masking_rng == rest.checkpoint.masking_rng);
  CHECK(whole.checkpoint.step == rest.checkpoint.step);

  // a trajectory-defining change invalidates the checkpoint
  TrainConfig other = tiny_pretrain(6);
  other.lr0 = 1e-3;
  CHECK_THROWS_AS((void)pretrain(store, model, other, &half.checkpoint), ConfigError);
}

TEST_CASE("checkpoints round trip through disk bit-exactly") {
  const FeatureStore store = make_store(tiny_gen(36, 7), "trainer_ckpt_corpus.bin");
  const ModelConfig model = tiny_model();
  const TrainConfig cfg = tiny_pretrain(4);
  const PretrainResult run = pretrain(store, model, cfg);

  const std::string path = "trainer_ckpt.bin";
  save_checkpoint(run.checkpoint, path);
  const Checkpoint loaded = load_checkpoint(path, config_fingerprint(model, cfg));
  CHECK(loaded.step == run.checkpoint.step);
  CHECK(loaded.config_fingerprint == run.checkpoint.config_fingerprint);
  CHECK(loaded.trainer_rng == run.checkpoint.trainer_rng);
  CHECK(loaded.masking_rng == run.checkpoint.masking_rng);
  CHECK(same_tensors(loaded.params, run.checkpoint.params));
  REQUIRE(loaded.adam.slots.size() == run.checkpoint.adam.slots.size());
  for (const auto& [name, slots] : run.checkpoint.adam.slots) {
    REQUIRE(loaded.adam.slots.count(name) == 1);
    CHECK(loaded.adam.slots.at(name).m == slots.m);
    CHECK(loaded.adam.slots.at(name).v == slots.v);
  }

  // resuming from the loaded copy reproduces the in-memory continuation
  const PretrainResult from_disk = pretrain(store, model, tiny_pretrain(6), &loaded);
  const PretrainResult from_mem = pretrain(store, model, tiny_pretrain(6), &run.checkpoint);
  CHECK(from_disk.loss_history == from_mem.loss_history);
  CHECK(same_tensors(from_disk.checkpoint.params, from_mem.checkpoint.params));

  // fingerprint guard and its explicit override
  CHECK_THROWS_AS((void)load_checkpoint(path, 0x1234ULL), ConfigError);
  CHECK_NOTHROW((void)load_checkpoint(path, 0x1234ULL, true));
  CHECK_THROWS_AS((void)load_checkpoint("no_such_checkpoint.bin"), MissingInputError);

  // any flipped payload byte must fail the checksum
  std::ifstream in(path, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  bytes[bytes.size() / 2] ^= 0x20;
  std::ofstream out("trainer_ckpt_bad.bin", std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  CHECK_THROWS_AS((void)load_checkpoint("trainer_ckpt_bad.bin"), DataError);
}

TEST_CASE("always supervising asr leaves the other query paths untouched") {
  const FeatureStore store = make_store(tiny_gen(36, 8), "trainer_asr_only.bin");
  const ModelConfig model = tiny_model();
  TrainConfig cfg = tiny_pretrain(4);
  cfg.masking.p = 1.0;

  Rng init_rng(mix64(cfg.seed ^ 0x1217ULL));
  const ModelParams fresh = ModelParams::init(model, init_rng, &store.manifest().codebook);
  const PretrainResult run = pretrain(store, model, cfg);

  // rgb and audio never supervise, so their query-side input towers keep
  // their init; the asr video slot is always fully masked, so the asr-facing
  // query head never scores; pretrain overrides mixture weights, so the
  // weight head and the caption-only netvlad stack stay frozen too
  for (const char* name : {"phi.proj.rgb.w", "phi.proj.rgb.b", "phi.proj.audio.w",
                           "phi.geu.asr.w1", "phi.whead.w", "phi.vlad.centers",
                           "psi.proj.asr.w", "psi.geu.asr.w1"})
    CHECK(same_tensor(run.checkpoint.params.at(name), fresh.at(name)));
  // while the asr query path, the collaborator-facing heads and the
  // collaborator video towers all train
  for (const char* name : {"phi.proj.asr.w", "phi.geu.rgb.w1", "phi.geu.audio.w1",
                           "psi.proj.rgb.w", "psi.proj.audio.w", "psi.geu.rgb.w1"})
    CHECK_FALSE(same_tensor(run.checkpoint.params.at(name), fresh.at(name)));
}

TEST_CASE("pretraining reduces the ranking loss") {
  const FeatureStore store = make_store(tiny_gen(48, 9), "trainer_descent.bin");
  const ModelConfig model = tiny_model();
  TrainConfig cfg = tiny_pretrain(60);
  cfg.batch_size = 8;

  const PretrainResult run = pretrain(store, model, cfg);
  const auto head = std::accumulate(run.loss_history.begin(), run.loss_history.begin() + 10, 0.0) / 10.0;
  const auto tail = std::accumulate(run.loss_history.end() - 10, run.loss_history.end(), 0.0) / 10.0;
  CHECK(tail < head);
}

TEST_CASE("finetune tracks the best validation snapshot") {
  const FeatureStore store = make_store(tiny_gen(40, 10), "trainer_ft.bin");
  const ModelConfig model = tiny_model();

  TrainConfig pre = tiny_pretrain(6);
  const PretrainResult pretrained = pretrain(store, model, pre);

  TrainConfig ft;
  ft.phase = TrainPhase::kFinetune;
  ft.batch_size = 4;
  ft.lr0 = 5e-4;
  ft.total_steps = 9;
  ft.margin = 0.2;
  ft.seed = 13;
  ft.eval_every_steps = 3;
  ft.crop_s = 6;
  const FinetuneResult run = finetune(store, model, ft, &pretrained.checkpoint.params);

  REQUIRE(run.val_history.size() == 3);
  CHECK(run.val_history[0].first == 3);
  CHECK(run.val_history[2].first == 9);
  CHECK(run.loss_history.size() == 9);

  // best_step carries the highest gm seen, first winner kept on ties
  double best_gm = -1.0;
  std::int64_t best_step = 0;
  for (const auto& [step, metrics] : run.val_history) {
    const double gm = geometric_mean_selection(metrics);
    if (gm > best_gm) {
      best_gm = gm;
      best_step = step;
    }
  }
  CHECK(run.best_step == best_step);
  CHECK(geometric_mean_selection(run.best_val_metrics) == best_gm);

  // the snapshot reproduces its recorded validation numbers
  EvalOptions opt;
  opt.crop_s = ft.crop_s;
  opt.caps = ft.caps;
  opt.aggregation = ft.aggregation;
  const RetrievalMetrics again =
      evaluate_retrieval(store, store.manifest().val_ids, model, run.best_params, opt);
  CHECK(again.r(1) == run.best_val_metrics.r(1));
  CHECK(again.r(5) == run.best_val_metrics.r(5));
  CHECK(again.r(10) == run.best_val_metrics.r(10));
  CHECK(again.mdr == run.best_val_metrics.mdr);
  CHECK(again.mnr == run.best_val_metrics.mnr);

  // determinism end to end
  const FinetuneResult rerun = finetune(store, model, ft, &pretrained.checkpoint.params);
  CHECK(rerun.loss_history == run.loss_history);
  CHECK(rerun.best_step == run.best_step);
  CHECK(same_tensors(rerun.best_params, run.best_params));
}

TEST_CASE("freezing the query side trains only the video encoder") {
  const FeatureStore store = make_store(tiny_gen(36, 12), "trainer_freeze.bin");
  const ModelConfig model = tiny_model();

  Rng init_rng(mix64(15ULL ^ 0x1217ULL));
  const ModelParams fresh = ModelParams::init(model, init_rng, &store.manifest().codebook);

  TrainConfig ft;
  ft.phase = TrainPhase::kFinetune;
  ft.batch_size = 4;
  ft.lr0 = 5e-4;
  ft.total_steps = 4;
  ft.margin = 0.2;
  ft.seed = 15;
  ft.eval_every_steps = 4;
  ft.crop_s = 6;
  ft.freeze_query = true;
  const FinetuneResult run = finetune(store, model, ft, &fresh);

  bool psi_changed = false;
  for (const auto& [name, t] : run.checkpoint.params.tensors) {
    if (name.rfind("phi.", 0) == 0)
      CHECK(same_tensor(t, fresh.at(name)));
    else
      psi_changed = psi_changed || !same_tensor(t, fresh.at(name));
  }
  CHECK(psi_changed);
}

TEST_CASE("degenerate validation splits report nan pretrain val loss") {
  const FeatureStore store = make_store(tiny_gen(10, 14), "trainer_tinyval.bin");
  REQUIRE(store.manifest().val_ids.size() < 2);
  const ModelConfig model = tiny_model();
  const TrainConfig cfg = tiny_pretrain(2);
  const PretrainResult run = pretrain(store, model, cfg);
  REQUIRE(!run.val_loss_history.empty());
  CHECK(std::isnan(run.val_loss_history.back().second));
}

TEST_CASE("trainer configuration contracts") {
  const FeatureStore store = make_store(tiny_gen(36, 16), "trainer_cfg.bin");
  const ModelConfig model = tiny_model();

  TrainConfig bad = tiny_pretrain(2);
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_pretrain(2);
  bad.lr0 = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_pretrain(2);
  bad.masking.p = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_pretrain(2);
  bad.decay_factor = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  // phase mismatches
  TrainConfig ft = tiny_pretrain(2);
  ft.phase = TrainPhase::kFinetune;
  CHECK_THROWS_AS((void)pretrain(store, model, ft), ConfigError);
  CHECK_THROWS_AS((void)finetune(store, model, tiny_pretrain(2)), ConfigError);

  // store/model disagreement
  ModelConfig wrong = model;
  wrong.d_rgb = 32;
  CHECK_THROWS_AS((void)pretrain(store, wrong, tiny_pretrain(2)), ConfigError);
  wrong = model;
  wrong.vocab_size = 128;
  CHECK_THROWS_AS((void)pretrain(store, wrong, tiny_pretrain(2)), ConfigError);

  // crops must stay within the temporal tables
  TrainConfig wide = tiny_pretrain(2);
  wide.crop_s = 31;
  CHECK_THROWS_AS((void)pretrain(store, model, wide), ConfigError);
}
