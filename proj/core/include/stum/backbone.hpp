#pragma once

#include <vector>

#include "stum/graph_data.hpp"
#include "stum/params.hpp"

namespace stum {

/// Plain trainable dense layer, used by backbones and the predictor head.
struct Dense {
    Tensor weight;  // in x out
    Tensor bias;    // out

    Dense() = default;
    Dense(std::size_t in, std::size_t out, Rng& rng);
    Tensor apply(const Tensor& x) const;  // x[...,in] -> [...,out]
    void collect_params(const std::string& prefix, ParamList& out) const;
};

enum class BackboneKind { Mlp, GraphConv };

struct BackboneSpec {
    BackboneKind kind = BackboneKind::Mlp;
    std::vector<std::size_t> hidden{64, 64};
    std::size_t seq_len = 0, in_channels = 0;
    std::size_t horizon = 0, out_channels = 0;

    bool uses_adjacency() const { return kind == BackboneKind::GraphConv; }
};

/// Global extractor producing z_b with shape B x h x N x c_out. The MLP is
/// node-wise; GraphConv prepends one row-normalized adjacency aggregation.
class Backbone {
  public:
    Backbone(BackboneSpec spec, Rng& rng);

    Tensor forward(const Tensor& x, const TrafficGraph* graph) const;

    const BackboneSpec& spec() const { return spec_; }
    void collect_params(const std::string& prefix, ParamList& out) const;
    std::size_t trainable_param_count() const;

  private:
    BackboneSpec spec_;
    std::vector<Dense> layers_;  // hidden chain + head
};

}  // namespace stum
