#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "stum/run_config.hpp"

using namespace stum;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("stum_cfg_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(RunConfig, Defaults) {
    RunConfig cfg;
    EXPECT_EQ(cfg.model.seq_len, 12u);
    EXPECT_EQ(cfg.model.horizon, 12u);
    EXPECT_EQ(cfg.model.embed_dim, 16u);
    EXPECT_EQ(cfg.model.num_mlrf, 4u);
    EXPECT_EQ(cfg.model.astucs_per_block, 8u);
    EXPECT_EQ(cfg.model.effective_rank(), 4u);
    EXPECT_DOUBLE_EQ(cfg.train.lr_theta, 0.001);
    EXPECT_DOUBLE_EQ(cfg.train.weight_decay, 0.0005);
    EXPECT_EQ(cfg.train.max_epochs, 150u);
    EXPECT_EQ(cfg.train.patience, 10u);
    EXPECT_EQ(cfg.train.batch_size, 64u);
    EXPECT_DOUBLE_EQ(cfg.train.clip_norm, 5.0);
    EXPECT_EQ(cfg.horizons, (std::vector<std::size_t>{3, 6, 12}));
}

TEST(RunConfig, ParsesFlatFile) {
    TempDir tmp;
    fs::path file = tmp.path / "run.cfg";
    std::ofstream(file) << "# comment\n"
                        << "\n"
                        << "model.embed_dim = 20\n"
                        << "model.backbone = graphconv\n"
                        << "model.norm_variant = paper_eq9\n"
                        << "train.max_epochs=7\n"
                        << "  train.batch_size =  16  \n"
                        << "synth.nodes = 10\n"
                        << "run.horizons = 1, 2,3\n";
    RunConfig cfg = RunConfig::from_file(file.string());
    EXPECT_EQ(cfg.model.embed_dim, 20u);
    EXPECT_EQ(cfg.model.backbone, BackboneKind::GraphConv);
    EXPECT_EQ(cfg.model.norm_variant, NormVariant::PaperEq9);
    EXPECT_EQ(cfg.train.max_epochs, 7u);
    EXPECT_EQ(cfg.train.batch_size, 16u);
    EXPECT_EQ(cfg.synth.nodes, 10u);
    EXPECT_EQ(cfg.horizons, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(RunConfig, RejectsBadInput) {
    RunConfig cfg;
    EXPECT_THROW(cfg.apply("model.unknown", "3"), ConfigError);
    EXPECT_THROW(cfg.apply("model.embed_dim", "abc"), ConfigError);
    EXPECT_THROW(cfg.apply("model.backbone", "transformer"), ConfigError);
    EXPECT_THROW(cfg.apply_set_flag("no-equals-sign"), ConfigError);
    EXPECT_THROW(RunConfig::from_file("/nonexistent/run.cfg"), ConfigError);

    TempDir tmp;
    fs::path bad = tmp.path / "bad.cfg";
    std::ofstream(bad) << "model.embed_dim 16\n";
    EXPECT_THROW(RunConfig::from_file(bad.string()), ConfigError);
}

TEST(RunConfig, SetFlagOverrides) {
    RunConfig cfg;
    cfg.apply_set_flag("train.lr=0.01");
    cfg.apply_set_flag("model.gate_shape=per_channel");
    EXPECT_DOUBLE_EQ(cfg.train.lr_theta, 0.01);
    EXPECT_EQ(cfg.model.gate_shape, GateShape::PerChannel);
}

TEST(RunConfig, EnvironmentSeedOverride) {
    RunConfig cfg;
    setenv("STUM_SEED", "123", 1);
    cfg.apply_environment();
    unsetenv("STUM_SEED");
    EXPECT_EQ(cfg.model.seed, 123u);
    EXPECT_EQ(cfg.train.seed, 123u);
    EXPECT_EQ(cfg.synth.seed, 123u);

    setenv("STUM_THREADS", "notanumber", 1);
    EXPECT_THROW(cfg.apply_environment(), ConfigError);
    unsetenv("STUM_THREADS");
}

TEST(RunConfig, SerializeRoundTrip) {
    TempDir tmp;
    RunConfig cfg;
    cfg.apply("model.embed_dim", "24");
    cfg.apply("model.lora_scale_convention", "alpha_over_r");
    cfg.apply("train.lr_alpha", "0.002");
    cfg.apply("data.format", "csv");
    fs::path file = tmp.path / "resolved.cfg";
    cfg.write_resolved(file.string());
    RunConfig back = RunConfig::from_file(file.string());
    EXPECT_EQ(back.model.embed_dim, 24u);
    EXPECT_EQ(back.model.scale_convention, ScaleConvention::AlphaOverR);
    EXPECT_DOUBLE_EQ(back.train.lr_alpha, 0.002);
    EXPECT_EQ(back.data.format, DataFormat::Csv);
    EXPECT_EQ(back.serialize(), cfg.serialize());
}

TEST(RunConfig, LoadOrGenerate) {
    RunConfig cfg;
    cfg.synth.nodes = 8;
    cfg.synth.frames = 60;
    cfg.synth.regions = 2;
    cfg.synth.period = 12;
    auto [series, graph] = cfg.load_or_generate();  // no data path -> synthetic
    EXPECT_EQ(series.nodes, 8u);
    EXPECT_EQ(series.frames, 60u);
    EXPECT_EQ(graph.num_nodes, 8u);

    cfg.data.path = "somewhere.csv";
    EXPECT_THROW(cfg.load_or_generate(), ConfigError);  // graph path missing

    TempDir tmp;
    std::string prefix = (tmp.path / "series").string();
    save_flatbin(series, prefix);
    save_edges_csv(graph, prefix + "_edges.csv");
    cfg.data.path = prefix + ".json";
    cfg.data.graph_path = prefix + "_edges.csv";
    cfg.data.format = DataFormat::Flatbin;
    auto [loaded, lg] = cfg.load_or_generate();
    EXPECT_EQ(loaded.nodes, 8u);
    EXPECT_EQ(loaded.frames, 60u);
    (void)lg;
}

TEST(RunConfig, SerializedValueEnumsStable) {
    RunConfig cfg;
    std::string s = cfg.serialize();
    EXPECT_NE(s.find("model.backbone = mlp"), std::string::npos);
    EXPECT_NE(s.find("model.norm_variant = rms"), std::string::npos);
    EXPECT_NE(s.find("model.gate_shape = scalar"), std::string::npos);
    EXPECT_NE(s.find("run.mape_eps = 0.001"), std::string::npos);
}
