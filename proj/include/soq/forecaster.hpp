// SPDX-License-Identifier: Apache-2.0
//
// Occupancy forecasting: residual fusion of LLM-reasoned tokens with raw
// encoder queries, per-step 4D + ego conditioning, and a single weight-tied
// block applied recursively frame by frame.
#pragma once

#include <string>
#include <vector>

#include "soq/connector.hpp"
#include "soq/encoder.hpp"
#include "soq/scene.hpp"

namespace soq {

struct ForecasterConfig {
    int dim = 64;
    int d_lm = 128;
    int heads = 4;
    int points_per_step = 8;  // k_fore
    int horizon = 6;
    double dt = 0.5;
    int num_classes = kNumClasses;
    int ffn_hidden = 128;
    double offset_bound = 2.0;  // meters per step
    double lambda_focal = 0.2;
    bool normalized_chamfer = false;
    bool use_token_branch = true;    // ablation: w/o Residual-Token
    bool use_query_residual = true;  // ablation: w/o Residual-Query
    int pe_pairs = 10;
    double pe_min_wavelength = 0.25, pe_max_wavelength = 64.0;

    void validate() const {
        if (dim <= 0 || horizon < 0 || points_per_step <= 0)
            throw ConfigError("ForecasterConfig: sizes");
        if (dim % heads != 0) throw ConfigError("ForecasterConfig: dim % heads");
    }
};

struct FusedQuerySet {
    ad::Var embeddings;  // [N, D]
    ad::Var positions;   // [N, 3]
};

struct ForecastFrame {
    LayerPoints points;  // decoded point set for this step
};

class Forecaster {
  public:
    Forecaster() = default;
    Forecaster(nn::ParamStore& ps, const std::string& name, const ForecasterConfig& cfg)
        : cfg_(cfg) {
        cfg.validate();
        token_proj_ = nn::Linear(ps, name + ".token_proj", cfg.d_lm, cfg.dim, /*zero_init=*/true);
        fuse_ = nn::Linear(ps, name + ".fuse", 2 * cfg.dim, cfg.dim, /*zero_init=*/true);
        pe_proj_ = nn::Linear(ps, name + ".pe_proj", 3LL * 2 * cfg.pe_pairs, cfg.dim,
                              /*zero_init=*/true);
        step_embed_ = ps.zeros_param(name + ".step_embed", {cfg.horizon, cfg.dim});
        ego_proj_ = nn::Linear(ps, name + ".ego_proj", 8, cfg.dim, /*zero_init=*/true);
        // one shared block: spatial-aware attention + FFN + decoding head
        attn_ = SpatialMhsa(ps, name + ".mhsa", cfg.dim, cfg.heads);
        attn_norm_ = nn::LayerNorm(ps, name + ".mhsa_norm", cfg.dim);
        ffn_ = nn::Mlp(ps, name + ".ffn", cfg.dim, cfg.ffn_hidden, cfg.dim);
        ffn_norm_ = nn::LayerNorm(ps, name + ".ffn_norm", cfg.dim);
        decoder_ = PointDecoder(ps, name + ".decode", cfg.dim, cfg.points_per_step,
                                cfg.num_classes, cfg.offset_bound);
    }

    const ForecasterConfig& config() const { return cfg_; }

    // Q_hat = Q_L (+ residual) + Linear([proj(T_o'), Q_L]); zero-initialized
    // fusion leaves Q_hat = Q_L exactly
    FusedQuerySet residual_fuse(const ad::Var& reasoned_tokens, const QuerySet& queries) const {
        if (reasoned_tokens && reasoned_tokens->rows() != queries.embeddings->rows())
            throw InvalidArgument("residual_fuse: token/query count mismatch");
        const int64_t n = queries.embeddings->rows();
        ad::Var tok = (cfg_.use_token_branch && reasoned_tokens)
                          ? token_proj_(reasoned_tokens)
                          : ad::zeros({n, cfg_.dim});
        auto fused = fuse_(ad::concat_cols({tok, queries.embeddings}));
        if (cfg_.use_query_residual) fused = ad::add(fused, queries.embeddings);
        return {fused, queries.positions};
    }

    // Q_hat^t = Q_hat + embed(X,Y,Z) + step_embed[t] + ego
    ad::Var temporal_condition(const ad::Var& embeddings, const ad::Var& positions, int t,
                               const EgoState& ego) const {
        if (t < 1 || t > cfg_.horizon)
            throw InvalidArgument("temporal_condition: step outside horizon");
        auto pe = pe_proj_(ops::sinusoidal_encode(positions, cfg_.pe_pairs, cfg_.pe_min_wavelength,
                                                  cfg_.pe_max_wavelength));
        auto step = ad::slice_rows(step_embed_, t - 1, t);
        const auto f = ego.features();
        auto ego_emb = ego_proj_(ad::constant({1, 8}, std::vector<double>(f.begin(), f.end())));
        auto cond = ad::add(embeddings, pe);
        cond = ad::add_rowvec(cond, ad::reshape(step, {cfg_.dim}));
        cond = ad::add_rowvec(cond, ad::reshape(ego_emb, {cfg_.dim}));
        return cond;
    }

    // one shared forecaster application: returns this frame's points and the
    // next recursion state
    ForecastFrame forecast_step(const ad::Var& conditioned, const ad::Var& positions,
                                ad::Var& next_embeddings, ad::Var& next_positions) const {
        ad::Var emb = conditioned;
        emb = ad::add(emb, attn_(attn_norm_(emb), positions));
        emb = ad::add(emb, ffn_(ffn_norm_(emb)));
        ForecastFrame frame;
        ad::Var mean_pos;
        decoder_.decode(emb, positions, frame.points, mean_pos);
        next_embeddings = emb;
        next_positions = mean_pos;
        return frame;
    }

    std::vector<ForecastFrame> rollout(const FusedQuerySet& fused, const EgoState& ego,
                                       int horizon) const {
        if (horizon < 0 || horizon > cfg_.horizon)
            throw InvalidArgument("rollout: horizon outside configured range");
        std::vector<ForecastFrame> out;
        ad::Var emb = fused.embeddings;
        ad::Var pos = fused.positions;
        for (int t = 1; t <= horizon; ++t) {
            auto cond = temporal_condition(emb, pos, t, ego);
            ad::Var next_emb, next_pos;
            out.push_back(forecast_step(cond, pos, next_emb, next_pos));
            emb = next_emb;
            pos = next_pos;
        }
        return out;
    }

    // L_fore = sum_t CD(P_t, G_t) + lambda * focal(C_t, matched labels); the
    // supervision base is the concatenated extended gt re-expressed in each
    // future frame's ego coordinates
    ad::Var forecast_loss(const std::vector<ForecastFrame>& predicted, const Scene& scene,
                          int t0) const {
        const int T = static_cast<int>(predicted.size());
        if (t0 < 0 || t0 + T >= static_cast<int>(scene.frames.size()))
            throw InvalidArgument("forecast_loss: horizon exceeds scene");
        auto base_gt = build_extended_gt(scene, t0, T);
        SOQ_REQUIRE(!base_gt.empty(), "forecast_loss: empty ground truth");
        ad::Var total = ad::scalar(0.0);
        for (int t = 1; t <= T; ++t) {
            const Pose rel = scene.frames[t0 + t].ego_pose.inverse().compose(
                scene.frames[t0].ego_pose);
            auto gt_t = transform_points(base_gt, rel);
            const auto& layer = predicted[t - 1].points;
            total = ad::add(total, ops::chamfer(layer.points, gt_t.coords, cfg_.normalized_chamfer));
            if (cfg_.lambda_focal > 0.0) {
                OccupancyPointSet pred;
                pred.num_classes = cfg_.num_classes;
                const int64_t m = layer.points->rows();
                pred.coords.resize(static_cast<size_t>(m));
                pred.labels.assign(static_cast<size_t>(m), 0);
                for (int64_t i = 0; i < m; ++i)
                    pred.coords[i] = {layer.points->val[i * 3], layer.points->val[i * 3 + 1],
                                      layer.points->val[i * 3 + 2]};
                const auto matches = match_points(pred, gt_t);
                std::vector<int> labels(static_cast<size_t>(m));
                for (int64_t i = 0; i < m; ++i) labels[i] = gt_t.labels[matches[i]];
                total = ad::add(total, ad::scale(ops::focal(layer.logits, labels, 2.0, 0.25),
                                                 cfg_.lambda_focal));
            }
        }
        return total;
    }

    nn::Linear token_proj_, fuse_, pe_proj_, ego_proj_;
    ad::Var step_embed_;
    SpatialMhsa attn_;
    nn::LayerNorm attn_norm_, ffn_norm_;
    nn::Mlp ffn_;
    PointDecoder decoder_;

  private:
    ForecasterConfig cfg_;
};

}  // namespace soq
