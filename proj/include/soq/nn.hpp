// SPDX-License-Identifier: Apache-2.0
//
// Parameter registry and the layer zoo shared by all trainable modules.
// Parameter initialization is seeded per parameter name, so module layouts
// can change without disturbing unrelated tensors.
#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "soq/common.hpp"
#include "soq/tensor.hpp"

namespace soq::nn {

class ParamStore {
  public:
    explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

    ad::Var create(const std::string& name, ad::Shape shape,
                   const std::function<double(Rng&)>& init) {
        SOQ_REQUIRE(!index_.count(name), "ParamStore: duplicate parameter " + name);
        Rng rng(seed_ ^ fnv1a64(name));
        std::vector<double> v(static_cast<size_t>(ad::numel(shape)));
        for (auto& x : v) x = init(rng);
        auto var = ad::leaf(std::move(shape), std::move(v), true);
        index_[name] = params_.size();
        params_.push_back({name, var});
        return var;
    }

    ad::Var zeros_param(const std::string& name, ad::Shape shape) {
        return create(name, std::move(shape), [](Rng&) { return 0.0; });
    }

    // Xavier-uniform for a [out,in] weight
    ad::Var xavier(const std::string& name, int64_t out, int64_t in) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
        return create(name, {out, in}, [bound](Rng& r) { return r.uniform(-bound, bound); });
    }

    ad::Var normal_param(const std::string& name, ad::Shape shape, double std) {
        return create(name, std::move(shape), [std](Rng& r) { return r.normal(0.0, std); });
    }

    ad::Var ones_param(const std::string& name, ad::Shape shape) {
        return create(name, std::move(shape), [](Rng&) { return 1.0; });
    }

    const std::vector<std::pair<std::string, ad::Var>>& params() const { return params_; }

    ad::Var find(const std::string& name) const {
        auto it = index_.find(name);
        SOQ_REQUIRE(it != index_.end(), "ParamStore: unknown parameter " + name);
        return params_[it->second].second;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    void zero_grad() {
        for (auto& [name, v] : params_) v->zero_grad();
    }

    // requires_grad toggle by name prefix
    void set_trainable(const std::string& prefix, bool trainable) {
        for (auto& [name, v] : params_)
            if (name.rfind(prefix, 0) == 0) v->requires_grad = trainable;
    }

    void set_all_trainable(bool trainable) {
        for (auto& [name, v] : params_) v->requires_grad = trainable;
    }

    size_t total_elements() const {
        size_t n = 0;
        for (const auto& [name, v] : params_) n += v->val.size();
        return n;
    }

    uint64_t seed() const { return seed_; }

  private:
    uint64_t seed_;
    std::vector<std::pair<std::string, ad::Var>> params_;
    std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// layers

struct Linear {
    ad::Var W, b;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, bool zero_init = false) {
        W = zero_init ? ps.zeros_param(name + ".W", {out, in}) : ps.xavier(name + ".W", out, in);
        b = ps.zeros_param(name + ".b", {out});
    }

    ad::Var operator()(const ad::Var& x) const { return ad::linear(x, W, b); }
};

struct LayerNorm {
    ad::Var gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, int64_t dim) {
        gamma = ps.ones_param(name + ".gamma", {dim});
        beta = ps.zeros_param(name + ".beta", {dim});
    }

    ad::Var operator()(const ad::Var& x) const { return ad::layer_norm(x, gamma, beta); }
};

// two-layer perceptron with GELU
struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(ParamStore& ps, const std::string& name, int64_t in, int64_t hidden, int64_t out)
        : fc1(ps, name + ".fc1", in, hidden), fc2(ps, name + ".fc2", hidden, out) {}

    ad::Var operator()(const ad::Var& x) const { return fc2(ad::gelu(fc1(x))); }
};

// standard multi-head attention; `mask` (rows = queries, cols = keys) uses
// 1 = attend, 0 = blocked; empty mask attends everywhere
struct MultiheadAttention {
    Linear q_proj, k_proj, v_proj, out_proj;
    int64_t heads = 1, dim = 0;

    MultiheadAttention() = default;
    MultiheadAttention(ParamStore& ps, const std::string& name, int64_t dim_, int64_t heads_)
        : q_proj(ps, name + ".q", dim_, dim_),
          k_proj(ps, name + ".k", dim_, dim_),
          v_proj(ps, name + ".v", dim_, dim_),
          out_proj(ps, name + ".o", dim_, dim_),
          heads(heads_),
          dim(dim_) {
        SOQ_REQUIRE(dim_ % heads_ == 0, "MultiheadAttention: dim % heads != 0");
    }

    ad::Var operator()(const ad::Var& query_in, const ad::Var& kv_in,
                       const std::vector<uint8_t>& mask = {}) const {
        const int64_t dh = dim / heads;
        auto q = q_proj(query_in);
        auto k = k_proj(kv_in);
        auto v = v_proj(kv_in);
        std::vector<ad::Var> head_outs;
        head_outs.reserve(static_cast<size_t>(heads));
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int64_t h = 0; h < heads; ++h) {
            auto qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
            auto kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
            auto vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
            auto logits = ad::scale(ad::matmul(qh, ad::transpose2d(kh)), inv_sqrt);
            auto attn = ad::softmax_rows(logits, mask);
            head_outs.push_back(ad::matmul(attn, vh));
        }
        return out_proj(ad::concat_cols(head_outs));
    }
};

}  // namespace soq::nn
