#include <benchmark/benchmark.h>

#include <memory>
#include <vector>

#include "mmvr/corpus.hpp"
#include "mmvr/encoders.hpp"
#include "mmvr/masking.hpp"
#include "mmvr/metrics.hpp"
#include "mmvr/objective.hpp"
#include "mmvr/rng.hpp"
#include "mmvr/tensor.hpp"
#include "mmvr/trainer.hpp"

namespace {

using namespace mmvr;

struct Fixture {
  GeneratorConfig gen;
  CorpusManifest manifest;
  std::vector<ClipRecord> records;
  std::unique_ptr<FeatureStore> store;
  ModelConfig model;
  ModelParams params;

  Fixture() {
    gen.n_clips = 128;
    gen.seed = 7;
    auto [m, r] = generate_corpus(gen);
    manifest = std::move(m);
    records = std::move(r);
    const std::string path = "bench_corpus.bin";
    write_store(manifest, records, path);
    store = std::make_unique<FeatureStore>(FeatureStore::open(path));
    Rng rng(3);
    params = ModelParams::init(model, rng, &manifest.codebook);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  const Tensor a = Tensor::randn({n, n}, 1.0, rng);
  const Tensor b = Tensor::randn({n, n}, 1.0, rng);
  for (auto _ : state) {
    NoGradGuard guard;
    benchmark::DoNotOptimize(matmul(a, b).data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(128)->Arg(512);

void BM_EncodeVideo(benchmark::State& state) {
  Fixture& f = fixture();
  const SampledClip clip = sample_eval_clip(*f.store, f.store->manifest().train_ids[0], 8, {});
  const VideoInputs inputs = VideoInputs::all_of(clip);
  for (auto _ : state) {
    NoGradGuard guard;
    const VideoRepr v = encode_video(inputs, f.model, f.params, nullptr);
    benchmark::DoNotOptimize(v.v[0].data());
  }
}
BENCHMARK(BM_EncodeVideo);

void BM_PretrainStep(benchmark::State& state) {
  Fixture& f = fixture();
  Rng rng(11);
  MaskingConfig mask_cfg;
  for (auto _ : state) {
    RawBatch raw = sample_batch(*f.store, f.store->manifest().train_ids, 16, 8, {}, rng);
    const ModalityId sup = sample_objective(rng, mask_cfg);
    const MaskedBatch masked = build_masked_batch(raw, sup, 1.0, rng);
    std::vector<QueryRepr> queries;
    std::vector<VideoRepr> videos;
    for (const MaskedClip& mc : masked.clips) {
      videos.push_back(encode_video(mc.video, f.model, f.params, &rng));
      queries.push_back(encode_query_pretrain(mc.query, f.model, f.params, &rng));
    }
    const Tensor s = similarity_matrix(queries, videos);
    const Tensor loss = bidirectional_max_margin_loss(s, 0.05);
    Graph g = Graph::build(loss);
    g.run_backward();
    f.params.zero_grad();
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_PretrainStep);

void BM_ComputeMetrics(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(5);
  const Tensor s = Tensor::randn({n, n}, 1.0, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(compute_metrics(s).mnr);
  }
}
BENCHMARK(BM_ComputeMetrics)->Arg(100)->Arg(500)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
