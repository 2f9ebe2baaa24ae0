#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>

#include "stum/backbone.hpp"
#include "stum/graph_data.hpp"
#include "stum/lowrank.hpp"
#include "stum/mlrf.hpp"

namespace stum {

enum class GateShape { Scalar, PerChannel };
enum class HeadActivation { Relu, Softmax };

struct StumConfig {
    std::size_t seq_len = 12, horizon = 12;
    std::size_t nodes = 0, in_channels = 0;  // discovered from data
    std::size_t out_channels = 0;            // 0 = same as in_channels
    std::size_t embed_dim = 16;
    std::size_t num_mlrf = 4;
    std::size_t astucs_per_block = 8;
    std::size_t rank = 0;  // 0 = ceil(embed_dim / 4)
    double lora_scale = 1.0;
    double lora_eps = 1e-8;
    ScaleConvention scale_convention = ScaleConvention::Paper;
    NormVariant norm_variant = NormVariant::Rms;
    double norm_eps = 1e-8;
    double dropout = 0.1;
    GateShape gate_shape = GateShape::Scalar;
    HeadActivation head_activation = HeadActivation::Relu;
    BackboneKind backbone = BackboneKind::Mlp;
    std::vector<std::size_t> backbone_hidden{64, 64};
    bool backbone_only = false;  // ablation: skip MLRF path, output z_b
    std::uint64_t seed = 42;

    std::size_t effective_rank() const {
        return rank > 0 ? rank : (embed_dim + 3) / 4;
    }
    std::size_t effective_out_channels() const {
        return out_channels > 0 ? out_channels : in_channels;
    }
    void validate() const;
};

/// Learnable blend between backbone and MLRF-head predictions,
/// alpha = sigmoid(raw) in (0,1).
class FusionGate {
  public:
    explicit FusionGate(GateShape shape, std::size_t channels);

    Tensor alpha() const;
    Tensor& raw() { return raw_; }
    const Tensor& raw() const { return raw_; }
    std::optional<double>& forced_alpha() { return forced_alpha_; }

    void collect_params(const std::string& prefix, ParamList& out) const;

  private:
    Tensor raw_;
    std::optional<double> forced_alpha_;
};

struct DualFeatures {
    Tensor backbone_features;  // z_b: B x h x N x c_out
    Tensor embedded;           // X': B x s x N x m
};

struct ForwardDetail {
    Tensor backbone_out;  // z_b
    Tensor head_out;      // z_t
    Tensor fused;         // Z
    Tensor stack_state;   // H_L: B x s x N x d
};

struct ParamReport {
    std::size_t trainable = 0, frozen = 0;
    std::size_t dense_equivalent = 0;
    std::map<std::string, std::size_t> per_module;
    std::string to_json() const;
};

class StumModel {
  public:
    StumModel(StumConfig cfg, Rng seed_rng);
    explicit StumModel(StumConfig cfg);

    DualFeatures extract_dual(const Tensor& x, const TrafficGraph* graph) const;
    Tensor predict_head(const Tensor& stack_state) const;
    Tensor fuse(const Tensor& z_b, const Tensor& z_t) const;
    Tensor forward(const Tensor& x, const TrafficGraph* graph, bool training);
    ForwardDetail forward_detail(const Tensor& x, const TrafficGraph* graph,
                                 bool training);

    ParamList parameters() const;
    ParamReport param_report() const;

    const StumConfig& config() const { return cfg_; }
    FusionGate& gate() { return *gate_; }
    Backbone& backbone() { return *backbone_; }
    MlrfStack& stack() { return *stack_; }
    LowRankLinear& embed() { return *embed_; }
    Dense& head() { return *head_; }

    void save_checkpoint(const std::string& path_prefix) const;
    void load_checkpoint(const std::string& path_prefix);

  private:
    StumConfig cfg_;
    std::unique_ptr<LowRankLinear> embed_;
    std::unique_ptr<MlrfStack> stack_;
    std::unique_ptr<Dense> head_;
    std::unique_ptr<Backbone> backbone_;
    std::unique_ptr<FusionGate> gate_;
    Rng dropout_rng_;
};

}  // namespace stum
