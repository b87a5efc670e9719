// SPDX-License-Identifier: Apache-2.0
//
// Anchor-diffusion trajectory planner: K-means anchors over expert
// trajectories, a reasoning-conditioned anchor scorer, DDIM noising and a
// conditional decoder that regresses clean trajectories (x0-prediction) while
// attending to scene queries, the ego token and reasoning tokens in turn.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "soq/connector.hpp"
#include "soq/encoder.hpp"
#include "soq/geometry.hpp"
#include "soq/nn.hpp"
#include "soq/scene.hpp"

namespace soq {

using Trajectory = std::vector<std::array<double, 2>>;  // T_plan waypoints, ego frame

inline double trajectory_l2(const Trajectory& a, const Trajectory& b) {
    SOQ_REQUIRE(a.size() == b.size() && !a.empty(), "trajectory_l2: length mismatch");
    double total = 0.0;
    for (size_t k = 0; k < a.size(); ++k)
        total += std::hypot(a[k][0] - b[k][0], a[k][1] - b[k][1]);
    return total / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// anchors

struct AnchorSet {
    std::vector<Trajectory> anchors;
    int kmeans_iterations = 0;
    double inertia = 0.0;  // within-cluster sum of squares at convergence
    uint64_t seed = 0;
    std::vector<double> inertia_history;  // per iteration, non-increasing

    size_t size() const { return anchors.size(); }
};

inline AnchorSet fit_anchors(const std::vector<Trajectory>& trajectories, int k,
                             uint64_t seed = 17, int max_iters = 100) {
    SOQ_REQUIRE(k >= 1, "fit_anchors: k must be positive");
    SOQ_REQUIRE(static_cast<int>(trajectories.size()) >= k, "fit_anchors: fewer trajectories than k");
    const size_t dim = trajectories.at(0).size() * 2;
    const size_t n = trajectories.size();
    std::vector<std::vector<double>> flat(n, std::vector<double>(dim));
    for (size_t i = 0; i < n; ++i) {
        SOQ_REQUIRE(trajectories[i].size() * 2 == dim, "fit_anchors: ragged trajectories");
        for (size_t t = 0; t < trajectories[i].size(); ++t) {
            flat[i][t * 2] = trajectories[i][t][0];
            flat[i][t * 2 + 1] = trajectories[i][t][1];
        }
    }
    // distinct-point count must reach k
    {
        std::vector<std::vector<double>> uniq;
        for (const auto& f : flat) {
            bool dup = false;
            for (const auto& u : uniq)
                if (u == f) dup = true;
            if (!dup) uniq.push_back(f);
        }
        if (static_cast<int>(uniq.size()) < k)
            throw InvalidArgument("fit_anchors: fewer than k distinct trajectories");
    }

    auto sq = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (size_t c = 0; c < a.size(); ++c) {
            const double d = a[c] - b[c];
            s += d * d;
        }
        return s;
    };

    // k-means++ seeding
    Rng rng(seed);
    std::vector<std::vector<double>> centers;
    centers.push_back(flat[rng.uniform_int(n)]);
    std::vector<double> d2(n);
    while (static_cast<int>(centers.size()) < k) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double best = sq(flat[i], centers[0]);
            for (const auto& c : centers) best = std::min(best, sq(flat[i], c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) {
            centers.push_back(flat[rng.uniform_int(n)]);
            continue;
        }
        double pick = rng.uniform() * total;
        size_t chosen = n - 1;
        for (size_t i = 0; i < n; ++i) {
            pick -= d2[i];
            if (pick <= 0.0) {
                chosen = i;
                break;
            }
        }
        centers.push_back(flat[chosen]);
    }

    AnchorSet out;
    out.seed = seed;
    std::vector<int> assign(n, -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        double inertia = 0.0;
        for (size_t i = 0; i < n; ++i) {
            int best = 0;
            double bd = sq(flat[i], centers[0]);
            for (int c = 1; c < k; ++c) {
                const double d = sq(flat[i], centers[c]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (assign[i] != best) changed = true;
            assign[i] = best;
            inertia += bd;
        }
        out.inertia_history.push_back(inertia);
        out.inertia = inertia;
        out.kmeans_iterations = iter + 1;
        if (!changed && iter > 0) break;
        // recompute means; empty clusters keep their center
        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<int> counts(k, 0);
        for (size_t i = 0; i < n; ++i) {
            ++counts[assign[i]];
            for (size_t c = 0; c < dim; ++c) sums[assign[i]][c] += flat[i][c];
        }
        for (int c = 0; c < k; ++c)
            if (counts[c] > 0)
                for (size_t t = 0; t < dim; ++t) centers[c][t] = sums[c][t] / counts[c];
    }

    const size_t steps = dim / 2;
    for (int c = 0; c < k; ++c) {
        Trajectory traj(steps);
        for (size_t t = 0; t < steps; ++t) traj[t] = {centers[c][t * 2], centers[c][t * 2 + 1]};
        out.anchors.push_back(traj);
    }
    return out;
}

// positive anchor = closest (mean L2) to the expert trajectory, lowest index on ties
inline int positive_anchor_index(const AnchorSet& anchors, const Trajectory& gt) {
    int best = 0;
    double bd = trajectory_l2(anchors.anchors[0], gt);
    for (size_t k = 1; k < anchors.size(); ++k) {
        const double d = trajectory_l2(anchors.anchors[k], gt);
        if (d < bd) {
            bd = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// DDIM noise schedule

struct NoiseSchedule {
    std::vector<double> alpha_bar;  // index 0..T, alpha_bar[0] ~ 1, alpha_bar[T] ~ 0
    int inference_steps = 2;

    int total_steps() const { return static_cast<int>(alpha_bar.size()) - 1; }

    static NoiseSchedule cosine(int steps, int inference_steps = 2, double s = 0.008) {
        SOQ_REQUIRE(steps >= 1, "NoiseSchedule: steps");
        NoiseSchedule out;
        out.inference_steps = inference_steps;
        auto f = [s](double t) {
            const double x = (t + s) / (1.0 + s) * M_PI / 2.0;
            return std::cos(x) * std::cos(x);
        };
        const double f0 = f(0.0);
        for (int i = 0; i <= steps; ++i)
            out.alpha_bar.push_back(f(static_cast<double>(i) / steps) / f0);
        out.validate();
        return out;
    }

    static NoiseSchedule from_values(std::vector<double> values, int inference_steps = 2) {
        NoiseSchedule out;
        out.alpha_bar = std::move(values);
        out.inference_steps = inference_steps;
        out.validate();
        return out;
    }

    void validate() const {
        SOQ_REQUIRE(alpha_bar.size() >= 2, "NoiseSchedule: need at least two levels");
        SOQ_REQUIRE(alpha_bar.front() > 0.98, "NoiseSchedule: alpha_bar[0] must be ~1");
        SOQ_REQUIRE(alpha_bar.back() < 0.05, "NoiseSchedule: alpha_bar[T] must be ~0");
        for (size_t i = 1; i < alpha_bar.size(); ++i)
            SOQ_REQUIRE(alpha_bar[i] <= alpha_bar[i - 1], "NoiseSchedule: must be non-increasing");
        for (double a : alpha_bar) SOQ_REQUIRE(a >= 0.0 && a <= 1.0, "NoiseSchedule: range");
    }

    double at(int step) const {
        if (step < 0 || step >= static_cast<int>(alpha_bar.size()))
            throw InvalidArgument("NoiseSchedule: step out of range");
        return alpha_bar[static_cast<size_t>(step)];
    }

    // strided denoising ladder: e.g. T=50, 2 steps -> {50, 25, 0}
    std::vector<int> inference_ladder() const {
        std::vector<int> out;
        const int T = total_steps();
        for (int k = 0; k <= inference_steps; ++k)
            out.push_back(static_cast<int>(std::llround(
                static_cast<double>(T) * (1.0 - static_cast<double>(k) / inference_steps))));
        return out;
    }
};

// flat [K, P*2] anchor matrix helpers
inline std::vector<double> flatten_anchors(const std::vector<Trajectory>& anchors) {
    const size_t dim = anchors.at(0).size() * 2;
    std::vector<double> flat(anchors.size() * dim);
    for (size_t k = 0; k < anchors.size(); ++k)
        for (size_t t = 0; t < anchors[k].size(); ++t) {
            flat[k * dim + t * 2] = anchors[k][t][0];
            flat[k * dim + t * 2 + 1] = anchors[k][t][1];
        }
    return flat;
}

// tau = sqrt(alpha_bar) * a + sqrt(1 - alpha_bar) * eps, elementwise
inline std::vector<double> add_noise(const std::vector<double>& anchors_flat, int step,
                                     const NoiseSchedule& schedule,
                                     const std::vector<double>& eps) {
    SOQ_REQUIRE(anchors_flat.size() == eps.size(), "add_noise: eps size mismatch");
    const double ab = schedule.at(step);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    std::vector<double> out(anchors_flat.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = sa * anchors_flat[i] + sb * eps[i];
    return out;
}

// ---------------------------------------------------------------------------
// planner model

struct PlannerConfig {
    int plan_steps = 6;
    double dt = 0.5;
    int anchor_count = 8;
    int diffusion_steps = 50;
    int denoise_steps = 2;
    int dim = 64;  // decoder width, aligned with the occupancy query dim
    int d_lm = 128;
    int heads = 4;
    int blocks = 2;
    int ffn_hidden = 128;
    int timestep_pairs = 8;
    bool use_scene_fusion = true;   // ablation: w/o Traj-Scene Fusion
    bool use_ego_fusion = true;     // ablation: w/o Traj-Ego Fusion
    bool use_reason_fusion = true;  // ablation: w/o Traj-Reason Fusion
    bool llm_scoring = true;        // ablation: w/o LLM Scoring
    bool cross_anchor_attention = false;

    void validate() const {
        if (plan_steps <= 0 || anchor_count <= 0 || dim <= 0)
            throw ConfigError("PlannerConfig: sizes");
        if (dim % heads != 0) throw ConfigError("PlannerConfig: dim % heads");
        if (denoise_steps < 1) throw ConfigError("PlannerConfig: denoise steps");
    }
};

// conditioning bundle; any entry may be null when ablated away
struct PlannerContext {
    ad::Var scene_queries;     // [N, dim] encoder queries
    ad::Var ego_token;         // [1, d_lm]
    ad::Var reasoning_tokens;  // [R, d_lm]
};

class AnchorScorer {
  public:
    AnchorScorer() = default;
    AnchorScorer(nn::ParamStore& ps, const std::string& name, const PlannerConfig& cfg)
        : embed_(ps, name + ".embed", static_cast<int64_t>(cfg.plan_steps) * 2, cfg.d_lm),
          attn_(ps, name + ".attn", cfg.d_lm, cfg.heads),
          norm_(ps, name + ".norm", cfg.d_lm),
          head_(ps, name + ".head", cfg.d_lm, 1),
          cfg_(cfg) {}

    // logits [K,1]; conditions on [T_r, ego] (or ego alone without LLM scoring)
    ad::Var operator()(const AnchorSet& anchors, const PlannerContext& ctx) const {
        auto a = embed_(ad::constant({static_cast<int64_t>(anchors.size()),
                                      static_cast<int64_t>(cfg_.plan_steps) * 2},
                                     flatten_anchors(anchors.anchors)));
        std::vector<ad::Var> kv_parts;
        if (cfg_.llm_scoring && ctx.reasoning_tokens) kv_parts.push_back(ctx.reasoning_tokens);
        if (ctx.ego_token) kv_parts.push_back(ctx.ego_token);
        if (!kv_parts.empty()) {
            auto kv = kv_parts.size() == 1 ? kv_parts[0] : ad::concat_rows(kv_parts);
            a = ad::add(a, attn_(norm_(a), kv));
        }
        return head_(a);
    }

    nn::Linear embed_;
    nn::MultiheadAttention attn_;
    nn::LayerNorm norm_;
    nn::Linear head_;

  private:
    PlannerConfig cfg_;
};

// binary cross-entropy with logits; positive index gets label 1
inline ad::Var scorer_bce(const ad::Var& logits, int positive_index) {
    const int64_t k = logits->rows();
    SOQ_REQUIRE(positive_index >= 0 && positive_index < k, "scorer_bce: index");
    // mean_k [ y*softplus(-x) + (1-y)*softplus(x) ]
    ad::Var total = ad::scalar(0.0);
    for (int64_t i = 0; i < k; ++i) {
        auto x = ad::reshape(ad::slice_rows(logits, i, i + 1), {1});
        total = ad::add(total, i == positive_index ? ad::softplus(ad::neg(x)) : ad::softplus(x));
    }
    return ad::scale(total, 1.0 / static_cast<double>(k));
}

class DiffusionDecoder {
  public:
    DiffusionDecoder() = default;
    DiffusionDecoder(nn::ParamStore& ps, const std::string& name, const PlannerConfig& cfg)
        : cfg_(cfg) {
        cfg.validate();
        const int64_t io = static_cast<int64_t>(cfg.plan_steps) * 2;
        traj_embed_ = nn::Linear(ps, name + ".traj_embed", io, cfg.dim);
        ego_proj_ = nn::Linear(ps, name + ".ego_proj", cfg.d_lm, cfg.dim);
        reason_proj_ = nn::Linear(ps, name + ".reason_proj", cfg.d_lm, cfg.dim);
        for (int b = 0; b < cfg.blocks; ++b) {
            const std::string bn = name + ".block" + std::to_string(b);
            Block blk;
            blk.scene_attn = nn::MultiheadAttention(ps, bn + ".scene", cfg.dim, cfg.heads);
            blk.scene_norm = nn::LayerNorm(ps, bn + ".scene_norm", cfg.dim);
            blk.ego_attn = nn::MultiheadAttention(ps, bn + ".ego", cfg.dim, cfg.heads);
            blk.ego_norm = nn::LayerNorm(ps, bn + ".ego_norm", cfg.dim);
            blk.reason_attn = nn::MultiheadAttention(ps, bn + ".reason", cfg.dim, cfg.heads);
            blk.reason_norm = nn::LayerNorm(ps, bn + ".reason_norm", cfg.dim);
            blk.self_attn = nn::MultiheadAttention(ps, bn + ".self", cfg.dim, cfg.heads);
            blk.self_norm = nn::LayerNorm(ps, bn + ".self_norm", cfg.dim);
            blk.ffn = nn::Mlp(ps, bn + ".ffn", cfg.dim, cfg.ffn_hidden, cfg.dim);
            blk.ffn_norm = nn::LayerNorm(ps, bn + ".ffn_norm", cfg.dim);
            blk.time_mod = nn::Linear(ps, bn + ".time_mod", 2 * cfg.timestep_pairs, 2 * cfg.dim,
                                      /*zero_init=*/true);
            blocks_.push_back(std::move(blk));
        }
        head_ = nn::Linear(ps, name + ".head", cfg.dim, io);
    }

    // sinusoidal embedding of the diffusion step index
    ad::Var timestep_embedding(int step) const {
        const int pairs = cfg_.timestep_pairs;
        std::vector<double> v(static_cast<size_t>(2 * pairs));
        for (int k = 0; k < pairs; ++k) {
            const double freq = std::pow(10000.0, -static_cast<double>(k) / pairs);
            v[2 * k] = std::sin(step * freq);
            v[2 * k + 1] = std::cos(step * freq);
        }
        return ad::constant({1, 2 * pairs}, std::move(v));
    }

    // noised: [K, plan_steps*2]; returns x0 predictions of the same shape
    ad::Var operator()(const ad::Var& noised, const PlannerContext& ctx, int step) const {
        ad::Var x = traj_embed_(noised);
        auto temb = timestep_embedding(step);
        ad::Var ego = (cfg_.use_ego_fusion && ctx.ego_token) ? ego_proj_(ctx.ego_token) : nullptr;
        ad::Var reason = (cfg_.use_reason_fusion && ctx.reasoning_tokens)
                             ? reason_proj_(ctx.reasoning_tokens)
                             : nullptr;
        for (const auto& blk : blocks_) {
            if (cfg_.use_scene_fusion && ctx.scene_queries)
                x = ad::add(x, blk.scene_attn(blk.scene_norm(x), ctx.scene_queries));
            if (ego) x = ad::add(x, blk.ego_attn(blk.ego_norm(x), ego));
            if (reason) x = ad::add(x, blk.reason_attn(blk.reason_norm(x), reason));
            if (cfg_.cross_anchor_attention)
                x = ad::add(x, blk.self_attn(blk.self_norm(x), blk.self_norm(x)));
            // timestep modulation: x * (1 + scale) + shift
            auto mod = blk.time_mod(temb);  // [1, 2*dim]
            auto scale_row = ad::reshape(ad::slice_cols(mod, 0, cfg_.dim), {cfg_.dim});
            auto shift_row = ad::reshape(ad::slice_cols(mod, cfg_.dim, 2 * cfg_.dim), {cfg_.dim});
            auto ones = ad::constant({static_cast<int64_t>(cfg_.dim)},
                                     std::vector<double>(static_cast<size_t>(cfg_.dim), 1.0));
            x = ad::mul(x, row_broadcast(ad::add(ones, scale_row), x->rows()));
            x = ad::add_rowvec(x, shift_row);
            x = ad::add(x, blk.ffn(blk.ffn_norm(x)));
        }
        return head_(x);
    }

    nn::Linear traj_embed_, ego_proj_, reason_proj_, head_;

  private:
    static ad::Var row_broadcast(const ad::Var& row, int64_t rows) {
        std::vector<ad::Var> copies(static_cast<size_t>(rows), ad::reshape(row, {1, row->size()}));
        return ad::concat_rows(copies);
    }

    struct Block {
        nn::MultiheadAttention scene_attn, ego_attn, reason_attn, self_attn;
        nn::LayerNorm scene_norm, ego_norm, reason_norm, self_norm, ffn_norm;
        nn::Mlp ffn;
        nn::Linear time_mod;
    };

    PlannerConfig cfg_;
    std::vector<Block> blocks_;
};

// L1 on the positive anchor's x0 prediction only (mean over coordinates)
inline ad::Var diffusion_train_loss(const DiffusionDecoder& decoder, const AnchorSet& anchors,
                                    const Trajectory& gt, const NoiseSchedule& schedule,
                                    const PlannerContext& ctx, Rng& rng) {
    const auto flat = flatten_anchors(anchors.anchors);
    std::vector<double> eps(flat.size());
    for (auto& e : eps) e = rng.normal();
    const int step = 1 + static_cast<int>(rng.uniform_int(
                             static_cast<uint64_t>(schedule.total_steps())));
    auto noised = ad::constant({static_cast<int64_t>(anchors.size()),
                                static_cast<int64_t>(gt.size()) * 2},
                               add_noise(flat, step, schedule, eps));
    auto x0 = decoder(noised, ctx, step);
    const int pos = positive_anchor_index(anchors, gt);
    auto pred = ad::slice_rows(x0, pos, pos + 1);
    std::vector<double> gt_flat(gt.size() * 2);
    for (size_t t = 0; t < gt.size(); ++t) {
        gt_flat[t * 2] = gt[t][0];
        gt_flat[t * 2 + 1] = gt[t][1];
    }
    auto target = ad::constant({1, static_cast<int64_t>(gt.size()) * 2}, gt_flat);
    return ad::mean_all(ad::abs_(ad::sub(pred, target)));
}

// deterministic DDIM (eta = 0) with x0-prediction; the denoiser maps
// (noised flat anchors, step) -> x0 predictions, letting tests substitute an
// ideal oracle for the trained decoder
inline Trajectory plan_with_denoiser(
    const AnchorSet& anchors, const NoiseSchedule& schedule,
    const std::function<std::vector<double>(const std::vector<double>&, int)>& denoiser,
    const std::vector<double>& anchor_scores, uint64_t noise_seed, int plan_steps) {
    SOQ_REQUIRE(anchor_scores.size() == anchors.size(), "plan: score per anchor");
    const auto flat = flatten_anchors(anchors.anchors);
    Rng rng(noise_seed);
    std::vector<double> eps(flat.size());
    for (auto& e : eps) e = rng.normal();

    const auto ladder = schedule.inference_ladder();
    std::vector<double> tau = add_noise(flat, ladder.front(), schedule, eps);
    std::vector<double> x0 = flat;
    for (size_t k = 0; k + 1 < ladder.size(); ++k) {
        const int cur = ladder[k], next = ladder[k + 1];
        x0 = denoiser(tau, cur);
        const double ab_cur = schedule.at(cur), ab_next = schedule.at(next);
        const double sa_cur = std::sqrt(ab_cur), sb_cur = std::sqrt(1.0 - ab_cur);
        const double sa_next = std::sqrt(ab_next), sb_next = std::sqrt(1.0 - ab_next);
        for (size_t i = 0; i < tau.size(); ++i) {
            const double eps_hat = sb_cur > 0.0 ? (tau[i] - sa_cur * x0[i]) / sb_cur : 0.0;
            tau[i] = sa_next * x0[i] + sb_next * eps_hat;
        }
    }
    int best = 0;
    for (size_t k = 1; k < anchor_scores.size(); ++k)
        if (anchor_scores[k] > anchor_scores[best]) best = static_cast<int>(k);
    Trajectory out(static_cast<size_t>(plan_steps));
    const size_t dim = static_cast<size_t>(plan_steps) * 2;
    for (int t = 0; t < plan_steps; ++t)
        out[static_cast<size_t>(t)] = {x0[best * dim + t * 2], x0[best * dim + t * 2 + 1]};
    return out;
}

// ---------------------------------------------------------------------------
// open-loop metrics

struct PlanMetrics {
    std::array<double, 3> l2{0, 0, 0};         // at 1s, 2s, 3s
    std::array<double, 3> collision{0, 0, 0};  // 0/1 at 1s, 2s, 3s
    double l2_avg = 0.0;
};

// collision: 3x3 xy-neighborhood of the waypoint cell at the ego height layer,
// checked in the corresponding future frame's own grid
inline PlanMetrics planning_metrics(const Trajectory& pred, const Trajectory& expert,
                                    const Scene& scene, int t0) {
    SOQ_REQUIRE(pred.size() == expert.size(), "planning_metrics: length mismatch");
    const double dt = scene.config.dt;
    PlanMetrics out;
    const std::array<double, 3> horizons = {1.0, 2.0, 3.0};
    for (int h = 0; h < 3; ++h) {
        const int idx = static_cast<int>(std::llround(horizons[h] / dt)) - 1;
        if (idx < 0 || idx >= static_cast<int>(pred.size()))
            throw InvalidArgument("planning_metrics: horizon exceeds plan length");
        out.l2[h] = std::hypot(pred[idx][0] - expert[idx][0], pred[idx][1] - expert[idx][1]);
        // collision if any waypoint up to this horizon intersects occupancy
        double collided = 0.0;
        for (int k = 0; k <= idx; ++k) {
            const int frame = t0 + k + 1;
            if (frame >= static_cast<int>(scene.frames.size()))
                throw InvalidArgument("planning_metrics: horizon exceeds scene");
            const auto& gt = scene.frames[frame].gt;
            const Pose rel = scene.frames[frame].ego_pose.inverse().compose(
                scene.frames[t0].ego_pose);
            const Vec3 p = rel.apply({pred[k][0], pred[k][1], scene.config.ego_z});
            int ix, iy, iz;
            if (!gt.locate(p, ix, iy, iz)) continue;
            for (int dx = -1; dx <= 1 && collided == 0.0; ++dx)
                for (int dy = -1; dy <= 1; ++dy) {
                    const int cx = ix + dx, cy = iy + dy;
                    if (!gt.in_bounds(cx, cy, iz)) continue;
                    if (gt.at(cx, cy, iz) != gt.free_index()) {
                        collided = 1.0;
                        break;
                    }
                }
            if (collided > 0.0) break;
        }
        out.collision[h] = collided;
    }
    out.l2_avg = (out.l2[0] + out.l2[1] + out.l2[2]) / 3.0;
    return out;
}

}  // namespace soq
