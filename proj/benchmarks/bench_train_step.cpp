#include <benchmark/benchmark.h>

#include "stum/trainer.hpp"

using namespace stum;

namespace {

StumConfig bench_model_config(std::size_t cells_per_block) {
    StumConfig mc;
    mc.nodes = 20;
    mc.in_channels = 1;
    mc.astucs_per_block = cells_per_block;
    return mc;
}

// members initialize in declaration order; stream safely references norm
struct BenchSetup {
    FrameSeries norm;
    TrafficGraph graph;
    StumModel model;
    AdamOptimizer opt;
    WindowStream stream;

    explicit BenchSetup(std::size_t cells_per_block)
        : norm(), graph(), model(bench_model_config(cells_per_block)),
          opt(model.parameters(), TrainConfig{}),
          stream((init_data(), norm), 12, 12, 64, 1) {}

  private:
    void init_data() {
        SynthConfig sc;
        sc.nodes = 20;
        sc.frames = 200;
        sc.regions = 3;
        sc.seed = 1;
        auto [series, g] = synth_generate(sc);
        NormStats stats = fit_normalizer(series);
        norm = apply_normalizer(stats, series);
        graph = std::move(g);
    }
};

void run_step(BenchSetup& s) {
    auto batch = s.stream.next();
    if (!batch) {
        s.stream.reset();
        batch = s.stream.next();
    }
    s.opt.zero_grad();
    Tensor loss = mae_loss(s.model.forward(batch->inputs, &s.graph, true),
                           batch->targets);
    loss.backward();
    s.opt.clip_gradients(5.0);
    s.opt.step();
    benchmark::DoNotOptimize(loss.item());
}

void BM_TrainStep(benchmark::State& state) {
    BenchSetup s(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) run_step(s);
}

void BM_ForwardEval(benchmark::State& state) {
    BenchSetup s(8);
    auto batch = s.stream.next();
    NoGradGuard ng;
    for (auto _ : state) {
        Tensor z = s.model.forward(batch->inputs, &s.graph, false);
        benchmark::DoNotOptimize(z.data().data());
    }
}

}  // namespace

BENCHMARK(BM_TrainStep)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardEval)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
