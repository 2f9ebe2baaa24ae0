#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "stum/trainer.hpp"

using namespace stum;
namespace fs = std::filesystem;

namespace {

StumConfig tiny_model_config() {
    StumConfig cfg;
    cfg.seq_len = 4;
    cfg.horizon = 2;
    cfg.nodes = 6;
    cfg.in_channels = 1;
    cfg.embed_dim = 6;
    cfg.num_mlrf = 1;
    cfg.astucs_per_block = 2;
    cfg.backbone_hidden = {8};
    cfg.dropout = 0.0;
    cfg.seed = 5;
    return cfg;
}

struct Fixture {
    FrameSeries train_norm, val_norm;
    NormStats stats;
    TrafficGraph graph;
};

Fixture tiny_fixture(std::uint64_t seed = 1, double noise = 0.05) {
    SynthConfig sc;
    sc.nodes = 6;
    sc.frames = 120;
    sc.regions = 2;
    sc.period = 24;
    sc.noise = noise;
    sc.seed = seed;
    auto [series, graph] = synth_generate(sc);
    SplitSeries sp = split_622(series);
    NormStats stats = fit_normalizer(sp.train);
    return {apply_normalizer(stats, sp.train), apply_normalizer(stats, sp.val),
            std::move(stats), std::move(graph)};
}

}  // namespace

TEST(MaeLoss, HandOracle) {
    // Z = [1,2], Y = [2,4] -> mean(|1-2|, |2-4|) = 1.5
    Tensor z = Tensor::from_data({2}, {1, 2});
    Tensor y = Tensor::from_data({2}, {2, 4});
    EXPECT_DOUBLE_EQ(mae_loss(z, y).item(), 1.5);
    EXPECT_DOUBLE_EQ(mae_loss(y, y).item(), 0.0);
    EXPECT_THROW(mae_loss(z, Tensor::zeros({3})), ShapeMismatch);
}

TEST(Adam, FirstStepClosedForm) {
    // single parameter, constant gradient g: after one step with no decay,
    // theta -= lr * g / (|g| + eps) (bias corrections cancel at t=1)
    Tensor w = Tensor::from_data({1}, {1.0}, true);
    ParamList params{{"w", w, true, false, false}};
    TrainConfig cfg;
    cfg.lr_theta = 0.01;
    cfg.weight_decay = 0.0;
    AdamOptimizer opt(params, cfg);
    mutable_grad(w) = {3.0};
    opt.step();
    double expect = 1.0 - 0.01 * 3.0 / (3.0 + 1e-8);
    EXPECT_NEAR(w.data()[0], expect, 1e-12);
}

TEST(Adam, DecoupledDecayAppliesOnlyToMarkedParams) {
    Tensor decayed = Tensor::from_data({1}, {2.0}, true);
    Tensor bare = Tensor::from_data({1}, {2.0}, true);
    Tensor gate = Tensor::from_data({1}, {2.0}, true);
    ParamList params{{"d", decayed, true, true, false},
                     {"n", bare, true, false, false},
                     {"g", gate, true, true, true}};
    TrainConfig cfg;
    cfg.lr_theta = 0.1;
    cfg.lr_alpha = 0.2;
    cfg.weight_decay = 0.5;
    AdamOptimizer opt(params, cfg);
    mutable_grad(decayed) = {0.0};
    mutable_grad(bare) = {0.0};
    mutable_grad(gate) = {0.0};
    opt.step();
    // zero gradient isolates the decay term: theta *= (1 - lr*wd)
    EXPECT_NEAR(decayed.data()[0], 2.0 * (1.0 - 0.1 * 0.5), 1e-12);
    EXPECT_DOUBLE_EQ(bare.data()[0], 2.0);
    EXPECT_DOUBLE_EQ(gate.data()[0], 2.0);  // gate never decayed
}

TEST(Adam, GateUsesAlphaRate) {
    Tensor theta = Tensor::from_data({1}, {0.0}, true);
    Tensor gate = Tensor::from_data({1}, {0.0}, true);
    ParamList params{{"t", theta, true, false, false}, {"g", gate, true, false, true}};
    TrainConfig cfg;
    cfg.lr_theta = 0.01;
    cfg.lr_alpha = 0.04;
    cfg.weight_decay = 0.0;
    AdamOptimizer opt(params, cfg);
    mutable_grad(theta) = {1.0};
    mutable_grad(gate) = {1.0};
    opt.step();
    EXPECT_NEAR(gate.data()[0] / theta.data()[0], 4.0, 1e-9);
}

TEST(Adam, ClipScalesGlobalNorm) {
    Tensor a = Tensor::from_data({2}, {0.0, 0.0}, true);
    Tensor b = Tensor::from_data({1}, {0.0}, true);
    ParamList params{{"a", a, true, false, false}, {"b", b, true, false, false}};
    TrainConfig cfg;
    AdamOptimizer opt(params, cfg);
    mutable_grad(a) = {3.0, 0.0};
    mutable_grad(b) = {4.0};
    double norm = opt.clip_gradients(1.0);  // global norm 5
    EXPECT_DOUBLE_EQ(norm, 5.0);
    EXPECT_NEAR(a.grad()[0], 0.6, 1e-12);
    EXPECT_NEAR(b.grad()[0], 0.8, 1e-12);
    // below the limit: untouched
    mutable_grad(a) = {0.3, 0.0};
    mutable_grad(b) = {0.4};
    EXPECT_DOUBLE_EQ(opt.clip_gradients(1.0), 0.5);
    EXPECT_DOUBLE_EQ(a.grad()[0], 0.3);
    EXPECT_DOUBLE_EQ(b.grad()[0], 0.4);
}

TEST(Trainer, ConfigValidation) {
    TrainConfig cfg;
    cfg.lr_theta = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.patience = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.max_epochs = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Trainer, LossDescendsOnOverfitFixture) {
    Fixture f = tiny_fixture();
    StumModel model(tiny_model_config());
    TrainConfig cfg;
    cfg.max_epochs = 15;
    cfg.patience = 15;
    cfg.batch_size = 16;
    TrainResult r = train(model, f.train_norm, f.val_norm, f.stats, f.graph, cfg);
    ASSERT_FALSE(r.history.empty());
    EXPECT_LT(r.history.back().train_mae, r.history.front().train_mae);
    EXPECT_LE(r.history.size(), cfg.max_epochs);
    EXPECT_GT(r.best_epoch, 0u);
    EXPECT_TRUE(std::isfinite(r.best_val_mae));
}

TEST(Trainer, FrozenBasesBitwiseUnchanged) {
    Fixture f = tiny_fixture();
    StumModel model(tiny_model_config());
    std::vector<std::vector<double>> before;
    for (const auto& p : model.parameters())
        if (!p.trainable) before.push_back(p.tensor.data());
    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.batch_size = 16;
    train(model, f.train_norm, f.val_norm, f.stats, f.graph, cfg);
    std::size_t i = 0;
    for (const auto& p : model.parameters())
        if (!p.trainable) EXPECT_EQ(p.tensor.data(), before[i++]) << p.name;
    EXPECT_GT(i, 0u);
}

TEST(Trainer, DeterministicHistory) {
    TrainConfig cfg;
    cfg.max_epochs = 4;
    cfg.batch_size = 16;
    auto run = [&] {
        Fixture f = tiny_fixture();
        StumModel model(tiny_model_config());
        return train(model, f.train_norm, f.val_norm, f.stats, f.graph, cfg);
    };
    TrainResult a = run(), b = run();
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        EXPECT_EQ(a.history[i].train_mae, b.history[i].train_mae);  // bitwise
        EXPECT_EQ(a.history[i].val_mae, b.history[i].val_mae);
    }
}

TEST(Trainer, EarlyStoppingRule) {
    // patience 1: training stops one epoch after the last improvement and
    // never reaches max_epochs on a quickly-plateauing setup
    Fixture f = tiny_fixture();
    StumModel model(tiny_model_config());
    TrainConfig cfg;
    cfg.max_epochs = 60;
    cfg.patience = 1;
    cfg.batch_size = 16;
    TrainResult r = train(model, f.train_norm, f.val_norm, f.stats, f.graph, cfg);
    if (r.stopped_early) {
        // stop occurs exactly patience epochs after the best one
        EXPECT_EQ(r.history.size(), r.best_epoch + cfg.patience);
    } else {
        EXPECT_EQ(r.history.size(), cfg.max_epochs);
    }
    // best snapshot restored: recomputing validation MAE matches best_val_mae
    NoGradGuard ng;
    WindowStream vs(f.val_norm, 4, 2, 16);
    double acc = 0.0;
    std::size_t elems = 0;
    while (auto batch = vs.next()) {
        Tensor z = model.forward(batch->inputs, &f.graph, false);
        const auto& zd = z.data();
        const auto& td = batch->targets.data();
        for (std::size_t i = 0; i < zd.size(); ++i)
            acc += std::fabs(zd[i] - td[i]) * f.stats.stddev[0];
        elems += zd.size();
    }
    EXPECT_NEAR(acc / elems, r.best_val_mae, 1e-10);
}

TEST(Trainer, NonFiniteLossAborts) {
    Fixture f = tiny_fixture();
    StumModel model(tiny_model_config());
    // poison a parameter so the first forward pass explodes
    model.parameters()[0].tensor.data()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.max_epochs = 1;
    EXPECT_THROW(train(model, f.train_norm, f.val_norm, f.stats, f.graph, cfg),
                 Error);
}

TEST(Trainer, HistoryCsvFormat) {
    fs::path tmp = fs::temp_directory_path() /
                   ("stum_hist_" + std::to_string(std::random_device{}()) + ".csv");
    std::vector<EpochRecord> hist{{1, 2.5, 3.5, 0.1}, {2, 2.0, 3.0, 0.1}};
    write_history_csv(hist, tmp.string());
    std::ifstream in(tmp);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "epoch,train_mae,val_mae,seconds");
    std::getline(in, line);
    EXPECT_EQ(line.rfind("1,2.5,3.5", 0), 0u);
    fs::remove(tmp);
}
