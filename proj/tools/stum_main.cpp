#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "stum/eval_report.hpp"
#include "stum/gradcheck.hpp"
#include "stum/run_config.hpp"

namespace fs = std::filesystem;
using namespace stum;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("-c,--config", c.config_path, "flat section.key = value file");
    cmd->add_option("--set", c.sets, "override, e.g. --set train.max_epochs=5")
        ->take_all();
    cmd->add_option("-o,--out", c.out_dir, "output directory (overrides run.out_dir)");
}

RunConfig resolve(const Common& c) {
    RunConfig cfg =
        c.config_path.empty() ? RunConfig{} : RunConfig::from_file(c.config_path);
    for (const auto& kv : c.sets) cfg.apply_set_flag(kv);
    cfg.apply_environment();
    if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
    return cfg;
}

struct Prepared {
    SplitSeries splits;
    NormStats stats;
    TrafficGraph graph;
};

Prepared prepare(RunConfig& cfg) {
    auto [series, graph] = cfg.load_or_generate();
    Prepared p{split_622(series), {}, std::move(graph)};
    p.stats = fit_normalizer(p.splits.train);
    cfg.model.nodes = series.nodes;
    cfg.model.in_channels = series.channels;
    return p;
}

int cmd_train(const Common& c) {
    RunConfig cfg = resolve(c);
    Prepared p = prepare(cfg);
    cfg.model.validate();
    cfg.train.validate();
    fs::create_directories(cfg.out_dir);
    cfg.write_resolved(cfg.out_dir + "/resolved.cfg");

    StumModel model(cfg.model);
    FrameSeries train_norm = apply_normalizer(p.stats, p.splits.train);
    FrameSeries val_norm = apply_normalizer(p.stats, p.splits.val);
    TrainResult result =
        train(model, train_norm, val_norm, p.stats, p.graph, cfg.train);
    write_history_csv(result.history, cfg.out_dir + "/history.csv");
    model.save_checkpoint(cfg.out_dir + "/checkpoint");

    EvalReport report = evaluate(model, p.splits.test, p.stats, p.graph, cfg.horizons,
                                 cfg.train.batch_size, cfg.mape_eps);
    std::ofstream(cfg.out_dir + "/report.json") << report.to_json() << "\n";
    report.write_csv(cfg.out_dir + "/report.csv");

    std::cout << "best val MAE " << result.best_val_mae << " at epoch "
              << result.best_epoch
              << (result.stopped_early ? " (early stop)" : "") << "\n";
    for (const auto& r : report.rows)
        std::cout << "test horizon " << r.label << ": mae=" << r.metrics.mae
                  << " rmse=" << r.metrics.rmse << " mape=" << r.metrics.mape << "\n";
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, bool do_export) {
    RunConfig cfg = resolve(c);
    Prepared p = prepare(cfg);
    cfg.model.validate();
    StumModel model(cfg.model);
    model.load_checkpoint(checkpoint.empty() ? cfg.out_dir + "/checkpoint"
                                             : checkpoint);
    fs::create_directories(cfg.out_dir);
    EvalReport report = evaluate(model, p.splits.test, p.stats, p.graph, cfg.horizons,
                                 cfg.train.batch_size, cfg.mape_eps);
    std::ofstream(cfg.out_dir + "/report.json") << report.to_json() << "\n";
    report.write_csv(cfg.out_dir + "/report.csv");
    if (do_export)
        export_artifacts(model, p.splits.test, p.stats, p.graph, cfg.out_dir,
                         cfg.horizons);
    for (const auto& r : report.rows)
        std::cout << "horizon " << r.label << ": mae=" << r.metrics.mae
                  << " rmse=" << r.metrics.rmse << " mape=" << r.metrics.mape << "\n";
    return 0;
}

int cmd_ablate(const Common& c, const std::string& axis,
               std::vector<std::size_t> values) {
    RunConfig cfg = resolve(c);
    Prepared p = prepare(cfg);
    cfg.train.validate();
    fs::create_directories(cfg.out_dir);
    if (values.empty()) {
        if (axis == "mlrf") values = {1, 2, 4, 6};
        else if (axis == "astuc") values = {2, 4, 8, 12};
        else if (axis == "embed") values = {8, 16, 32};
        else throw ConfigError("ablate axis must be mlrf|astuc|embed");
    }
    FrameSeries train_norm = apply_normalizer(p.stats, p.splits.train);
    FrameSeries val_norm = apply_normalizer(p.stats, p.splits.val);
    std::ofstream sweep(cfg.out_dir + "/sweep.csv");
    if (!sweep) throw IoError("cannot write sweep.csv");
    sweep.precision(17);
    sweep << "axis,value,mae,rmse,mape,trainable_params,sec_per_step\n";
    std::size_t steps_per_epoch =
        (window_count(train_norm.frames, cfg.model.seq_len, cfg.model.horizon) +
         cfg.train.batch_size - 1) /
        cfg.train.batch_size;
    for (std::size_t v : values) {
        StumConfig mcfg = cfg.model;
        if (axis == "mlrf") mcfg.num_mlrf = v;
        else if (axis == "astuc") mcfg.astucs_per_block = v;
        else if (axis == "embed") mcfg.embed_dim = v;
        else throw ConfigError("ablate axis must be mlrf|astuc|embed");
        mcfg.validate();
        StumModel model(mcfg);
        TrainResult r = train(model, train_norm, val_norm, p.stats, p.graph, cfg.train);
        EvalReport report = evaluate(model, p.splits.test, p.stats, p.graph, {},
                                     cfg.train.batch_size, cfg.mape_eps);
        double total_sec = 0.0;
        for (const auto& e : r.history) total_sec += e.seconds;
        double per_step =
            r.history.empty()
                ? 0.0
                : total_sec / static_cast<double>(r.history.size() * steps_per_epoch);
        const MetricValues& m = report.rows.back().metrics;
        sweep << axis << "," << v << "," << m.mae << "," << m.rmse << "," << m.mape
              << "," << model.param_report().trainable << "," << per_step << "\n";
        std::cout << axis << "=" << v << " best val MAE " << r.best_val_mae
                  << " test MAE " << m.mae << "\n";
    }
    return 0;
}

int cmd_bench(const Common& c, std::size_t steps) {
    RunConfig cfg = resolve(c);
    Prepared p = prepare(cfg);
    fs::create_directories(cfg.out_dir);
    FrameSeries train_norm = apply_normalizer(p.stats, p.splits.train);
    std::vector<std::pair<std::string, StumConfig>> configs;
    for (std::size_t k : {std::size_t{4}, std::size_t{8}, std::size_t{16}}) {
        StumConfig mcfg = cfg.model;
        mcfg.astucs_per_block = k;
        configs.emplace_back("astuc_k" + std::to_string(k), mcfg);
    }
    auto rows = benchmark_configs(configs, train_norm, p.graph, cfg.train, steps);
    write_bench_csv(rows, cfg.out_dir + "/bench.csv");
    for (const auto& r : rows)
        std::cout << r.name << ": " << r.median_step_seconds * 1e3
                  << " ms/step, " << r.trainable_params << " trainable params\n";
    return 0;
}

int cmd_synth(const Common& c, const std::string& prefix) {
    RunConfig cfg = resolve(c);
    auto [series, graph] = synth_generate(cfg.synth);
    fs::path out(prefix);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_flatbin(series, prefix);
    save_edges_csv(graph, prefix + "_edges.csv");
    std::cout << "wrote " << prefix << ".json/.bin (" << series.frames << "x"
              << series.nodes << "x" << series.channels << ") and " << prefix
              << "_edges.csv (" << graph.edges.size() << " edges)\n";
    return 0;
}

int cmd_gradcheck(const Common& c, double tol) {
    RunConfig cfg = resolve(c);
    auto results = run_gradcheck_suite(cfg.model.seed);
    bool ok = true;
    for (const auto& r : results) {
        bool pass = r.max_rel_error <= tol;
        ok = ok && pass;
        std::cout << (pass ? "PASS " : "FAIL ") << r.name << " max_rel_err="
                  << r.max_rel_error << "\n";
    }
    return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"STUM traffic forecasting engine"};
    app.require_subcommand(1);

    Common c_train, c_eval, c_ablate, c_bench, c_synth, c_grad;
    std::string checkpoint, axis = "mlrf", synth_prefix = "synth";
    std::vector<std::size_t> values;
    bool do_export = false;
    std::size_t bench_steps = 50;
    double grad_tol = 1e-6;

    auto* train_cmd = app.add_subcommand("train", "train a model end to end");
    add_common(train_cmd, c_train);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    add_common(eval_cmd, c_eval);
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint path prefix");
    eval_cmd->add_flag("--export", do_export, "also write predictions/embeddings");

    auto* ablate_cmd = app.add_subcommand("ablate", "sweep one architecture axis");
    add_common(ablate_cmd, c_ablate);
    ablate_cmd->add_option("--axis", axis, "mlrf|astuc|embed")->required();
    ablate_cmd->add_option("--values", values, "values to sweep")->take_all();

    auto* bench_cmd = app.add_subcommand("bench", "time training steps per config");
    add_common(bench_cmd, c_bench);
    bench_cmd->add_option("--steps", bench_steps, "training steps per config");

    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
    add_common(synth_cmd, c_synth);
    synth_cmd->add_option("--prefix", synth_prefix, "output path prefix");

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    add_common(grad_cmd, c_grad);
    grad_cmd->add_option("--tol", grad_tol, "max relative error allowed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(c_train);
        if (eval_cmd->parsed()) return cmd_eval(c_eval, checkpoint, do_export);
        if (ablate_cmd->parsed()) return cmd_ablate(c_ablate, axis, values);
        if (bench_cmd->parsed()) return cmd_bench(c_bench, bench_steps);
        if (synth_cmd->parsed()) return cmd_synth(c_synth, synth_prefix);
        if (grad_cmd->parsed()) return cmd_gradcheck(c_grad, grad_tol);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
