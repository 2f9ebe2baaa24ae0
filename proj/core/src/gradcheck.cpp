#include "stum/gradcheck.hpp"

#include <cmath>

#include "stum/graph_data.hpp"
#include "stum/model.hpp"
#include "stum/trainer.hpp"

namespace stum {

namespace {

Tensor shifted_uniform(Shape shape, Rng& rng) {
    // away from 0 so relu/abs kinks are never straddled by the probe
    Tensor t = Tensor::uniform(std::move(shape), 0.2, 1.2, rng);
    std::bernoulli_distribution flip(0.5);
    for (double& v : t.data())
        if (flip(rng)) v = -v;
    return t;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed, double h) {
    std::vector<GradCheckResult> results;
    Rng rng(seed);
    auto check = [&](const std::string& name,
                     const std::function<Tensor(const Tensor&)>& f, Tensor x) {
        results.push_back({name, finite_diff_check(f, std::move(x), h)});
    };

    Tensor m34 = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
    Tensor m43 = Tensor::uniform({4, 3}, -1.0, 1.0, rng);
    check("matmul_lhs", [&](const Tensor& x) { return sum(matmul(x, m43)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    Tensor m33 = Tensor::uniform({3, 3}, -1.0, 1.0, rng);
    check("matmul_rhs", [&](const Tensor& x) { return sum(mul(matmul(m34, x), m33)); },
          Tensor::uniform({4, 3}, -1.0, 1.0, rng));
    check("matmul_batched",
          [&](const Tensor& x) { return sum(matmul(x, m43)); },
          Tensor::uniform({2, 3, 4}, -1.0, 1.0, rng));

    Tensor other = Tensor::uniform({3, 4}, 0.5, 1.5, rng);
    Tensor vec = Tensor::uniform({4}, 0.5, 1.5, rng);
    check("add", [&](const Tensor& x) { return sum(mul(add(x, other), other)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("sub", [&](const Tensor& x) { return sum(mul(sub(other, x), other)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("mul", [&](const Tensor& x) { return sum(mul(x, other)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("div_num", [&](const Tensor& x) { return sum(div(x, other)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("div_den", [&](const Tensor& x) { return sum(div(other, x)); },
          Tensor::uniform({3, 4}, 0.5, 1.5, rng));
    check("broadcast_bias", [&](const Tensor& x) { return sum(mul(add(other, x), other)); },
          Tensor::uniform({4}, -1.0, 1.0, rng));
    check("broadcast_inner",
          [&](const Tensor& x) { return sum(div(other, x)); },
          Tensor::uniform({3, 1}, 0.5, 1.5, rng));
    check("scale", [&](const Tensor& x) { return sum(scale(x, -2.5)); },
          Tensor::uniform({5}, -1.0, 1.0, rng));
    check("add_scalar", [&](const Tensor& x) { return sum(mul(add_scalar(x, 3.0), other)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));

    check("relu", [&](const Tensor& x) { return sum(mul(relu(x), other)); },
          shifted_uniform({3, 4}, rng));
    check("sigmoid", [&](const Tensor& x) { return sum(mul(sigmoid(x), other)); },
          Tensor::uniform({3, 4}, -2.0, 2.0, rng));
    check("softmax", [&](const Tensor& x) { return sum(mul(softmax(x, 1), other)); },
          Tensor::uniform({3, 4}, -2.0, 2.0, rng));
    check("sqrt", [&](const Tensor& x) { return sum(mul(sqrt_t(x), other)); },
          Tensor::uniform({3, 4}, 0.5, 2.0, rng));
    check("abs", [&](const Tensor& x) { return sum(mul(abs_t(x), other)); },
          shifted_uniform({3, 4}, rng));

    check("sum_axis", [&](const Tensor& x) { return sum(mul(sum(x, 1), vec)); },
          Tensor::uniform({4, 2, 4}, -1.0, 1.0, rng));
    check("mean", [&](const Tensor& x) { return mean(mul(x, x)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("abs_mean", [&](const Tensor& x) { return abs_mean(x); },
          shifted_uniform({3, 4}, rng));
    Tensor w243 = Tensor::uniform({2, 4, 3}, -1.0, 1.0, rng);
    check("moveaxis", [&](const Tensor& x) { return sum(mul(moveaxis(x, 0, 2), w243)); },
          Tensor::uniform({3, 2, 4}, -1.0, 1.0, rng));

    Tensor w234 = Tensor::uniform({2, 3, 4}, -1.0, 1.0, rng);
    Tensor x234 = Tensor::uniform({2, 3, 4}, -1.0, 1.0, rng);
    Tensor w33 = Tensor::uniform({3, 3}, -1.0, 1.0, rng);
    Tensor b3 = Tensor::uniform({3}, -0.5, 0.5, rng);
    check("axis_linear_x",
          [&](const Tensor& x) { return sum(mul(axis_linear(x, w33, b3, 1), w234)); },
          Tensor::uniform({2, 3, 4}, -1.0, 1.0, rng));
    check("axis_linear_w",
          [&](const Tensor& w) { return sum(mul(axis_linear(x234, w, b3, 1), w234)); },
          Tensor::uniform({3, 3}, -1.0, 1.0, rng));
    check("axis_linear_bias",
          [&](const Tensor& b) { return sum(mul(axis_linear(x234, w33, b, 1), w234)); },
          Tensor::uniform({3}, -1.0, 1.0, rng));

    Tensor gate_t = Tensor::uniform({1}, 0.2, 0.8, rng);
    Tensor mixed_t = shifted_uniform({3, 4}, rng);
    Tensor carried_t = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
    check("gated_mix_mixed",
          [&](const Tensor& m) { return sum(mul(gated_mix(gate_t, m, carried_t), other)); },
          shifted_uniform({3, 4}, rng));
    check("gated_mix_carried",
          [&](const Tensor& c) { return sum(mul(gated_mix(gate_t, mixed_t, c), other)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("gated_mix_gate",
          [&](const Tensor& g) { return sum(mul(gated_mix(g, mixed_t, carried_t), other)); },
          Tensor::uniform({1}, 0.2, 0.8, rng));

    Tensor cell_x = Tensor::uniform({2, 3, 4}, -1.0, 1.0, rng);
    Tensor cell_c = Tensor::uniform({2, 3, 4}, -1.0, 1.0, rng);
    check("astuc_mix_x",
          [&](const Tensor& x) {
              return sum(mul(astuc_mix(gate_t, x, cell_c, w33, b3, 1), w234));
          },
          Tensor::uniform({2, 3, 4}, -1.0, 1.0, rng));
    check("astuc_mix_carried",
          [&](const Tensor& c) {
              return sum(mul(astuc_mix(gate_t, cell_x, c, w33, b3, 1), w234));
          },
          Tensor::uniform({2, 3, 4}, -1.0, 1.0, rng));
    check("astuc_mix_w",
          [&](const Tensor& w) {
              return sum(mul(astuc_mix(gate_t, cell_x, cell_c, w, b3, 1), w234));
          },
          Tensor::uniform({3, 3}, -1.0, 1.0, rng));
    check("astuc_mix_bias",
          [&](const Tensor& b) {
              return sum(mul(astuc_mix(gate_t, cell_x, cell_c, w33, b, 1), w234));
          },
          Tensor::uniform({3}, -1.0, 1.0, rng));
    check("astuc_mix_gate",
          [&](const Tensor& g) {
              return sum(mul(astuc_mix(g, cell_x, cell_c, w33, b3, 1), w234));
          },
          Tensor::uniform({1}, 0.2, 0.8, rng));

    Tensor w25 = Tensor::uniform({2, 5}, -1.0, 1.0, rng);
    Tensor w45 = Tensor::uniform({4, 5}, -1.0, 1.0, rng);
    Tensor b5 = Tensor::uniform({5}, -0.5, 0.5, rng);
    Tensor x24 = Tensor::uniform({2, 4}, -1.0, 1.0, rng);
    check("linear_last_x",
          [&](const Tensor& x) { return sum(mul(linear_last(x, w45, b5), w25)); },
          Tensor::uniform({2, 4}, -1.0, 1.0, rng));
    check("linear_last_w",
          [&](const Tensor& w) { return sum(mul(linear_last(x24, w, b5), w25)); },
          Tensor::uniform({4, 5}, -1.0, 1.0, rng));
    check("linear_last_bias",
          [&](const Tensor& b) { return sum(mul(linear_last(x24, w45, b), w25)); },
          Tensor::uniform({5}, -1.0, 1.0, rng));

    Tensor r4 = Tensor::uniform({4}, 0.2, 0.9, rng);
    Tensor m34a = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
    Tensor m34b = Tensor::uniform({3, 4}, -1.0, 1.0, rng);
    Tensor bias4 = Tensor::uniform({4}, -0.5, 0.5, rng);
    check("retain_merge_retain",
          [&](const Tensor& r) { return sum(mul(retain_merge(r, m34a, m34b, bias4), other)); },
          Tensor::uniform({4}, 0.2, 0.9, rng));
    check("retain_merge_a",
          [&](const Tensor& a) { return sum(mul(retain_merge(r4, a, m34b, bias4), other)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("retain_merge_b",
          [&](const Tensor& b) { return sum(mul(retain_merge(r4, m34a, b, bias4), other)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("retain_merge_bias",
          [&](const Tensor& b) { return sum(mul(retain_merge(r4, m34a, m34b, b), other)); },
          Tensor::uniform({4}, -0.5, 0.5, rng));

    check("residual_dropout_x",
          [&](const Tensor& x) {
              Rng drng(99);  // fixed mask so the probe sees a deterministic map
              return sum(mul(residual_dropout(x, m34a, 0.4, true, drng), other));
          },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("residual_dropout_dw",
          [&](const Tensor& dw) {
              Rng drng(99);
              return sum(mul(residual_dropout(m34a, dw, 0.4, true, drng), other));
          },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));

    Tensor w4 = Tensor::uniform({4}, 0.5, 1.5, rng);
    check("rms_norm",
          [&](const Tensor& x) { return sum(mul(rms_norm(x, w4, 1e-8), other)); },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));
    check("rms_norm_paper_eq9",
          [&](const Tensor& x) {
              return sum(mul(rms_norm(x, w4, 1e-8, NormVariant::PaperEq9), other));
          },
          Tensor::uniform({3, 4}, -1.0, 1.0, rng));

    // full STUM forward + MAE on a toy fixture, one check per parameter group
    {
        StumConfig cfg;
        cfg.seq_len = 3;
        cfg.horizon = 3;
        cfg.nodes = 4;
        cfg.in_channels = 1;
        cfg.embed_dim = 8;
        cfg.num_mlrf = 2;
        cfg.astucs_per_block = 4;
        cfg.backbone_hidden = {8};
        cfg.dropout = 0.0;
        cfg.seed = seed;
        SynthConfig synth;
        synth.nodes = 4;
        synth.frames = 40;
        synth.regions = 2;
        synth.period = 12;
        synth.noise = 0.1;
        synth.seed = seed;
        auto [series, graph] = synth_generate(synth);
        NormStats stats = fit_normalizer(series);
        FrameSeries norm = apply_normalizer(stats, series);
        WindowStream stream(norm, cfg.seq_len, cfg.horizon, 2);
        auto batch = stream.next();

        for (BackboneKind kind : {BackboneKind::Mlp, BackboneKind::GraphConv}) {
            cfg.backbone = kind;
            StumModel model(cfg);
            const TrafficGraph* g = &graph;
            auto loss_fn = [&](const Tensor&) {
                return mae_loss(model.forward(batch->inputs, g, false), batch->targets);
            };
            double worst = 0.0;
            for (auto& p : model.parameters()) {
                if (!p.trainable) continue;
                worst = std::max(worst, finite_diff_check(loss_fn, p.tensor, h));
            }
            results.push_back(
                {kind == BackboneKind::Mlp ? "stum_composite_mlp" : "stum_composite_graphconv",
                 worst});
        }
    }
    return results;
}

}  // namespace stum
