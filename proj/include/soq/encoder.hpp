// SPDX-License-Identifier: Apache-2.0
//
// Sparse occupancy encoder: learnable queries with explicit 3D positions,
// refined through L layers of multi-frame multi-view feature sampling,
// adaptive mixing, distance-penalized self-attention and an FFN, decoding a
// growing point cloud per layer.
#pragma once

#include <string>
#include <vector>

#include "soq/backbone.hpp"
#include "soq/camera.hpp"
#include "soq/geometry.hpp"
#include "soq/nn.hpp"
#include "soq/nn_ops.hpp"
#include "soq/scene.hpp"

namespace soq {

struct EncoderConfig {
    int num_queries = 64;
    int num_layers = 3;
    int dim = 64;
    int heads = 4;
    std::vector<int> points_schedule = {2, 4, 8};
    int sample_points = 4;  // learned 3D offsets per query
    int history_frames = 4;
    int d_img = 64;  // backbone pyramid channels
    Vec3 range_min{-8, -8, 0};
    Vec3 range_max{8, 8, 4};
    double lambda_focal = 0.2;
    int num_classes = kNumClasses;
    int ffn_hidden = 128;
    double offset_init_std_frac = 0.1;  // of half range extent
    std::vector<double> offset_bound_fracs = {0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625};
    int horizon = 6;  // forecast steps used by adaptive range scaling
    double dt = 0.5;
    bool learned_position_update = false;  // alternative to decoded-point mean
    bool normalized_chamfer = false;

    void validate() const {
        if (num_queries <= 0 || num_layers <= 0 || dim <= 0)
            throw ConfigError("EncoderConfig: sizes must be positive");
        if (static_cast<int>(points_schedule.size()) != num_layers)
            throw ConfigError("EncoderConfig: schedule length != layers");
        for (size_t i = 1; i < points_schedule.size(); ++i)
            if (points_schedule[i] < points_schedule[i - 1])
                throw ConfigError("EncoderConfig: schedule must be non-decreasing");
        if (static_cast<int>(offset_bound_fracs.size()) < num_layers)
            throw ConfigError("EncoderConfig: need an offset bound per layer");
        if (dim % heads != 0) throw ConfigError("EncoderConfig: dim % heads != 0");
        if (history_frames <= 0 || sample_points <= 0)
            throw ConfigError("EncoderConfig: sampling geometry");
    }

    int slots_per_query() const { return history_frames * sample_points * 4; }

    double half_extent() const {
        return 0.5 * std::max({range_max[0] - range_min[0], range_max[1] - range_min[1],
                               range_max[2] - range_min[2]});
    }
};

struct QuerySet {
    ad::Var embeddings;  // [N, D]
    ad::Var positions;   // [N, 3]
};

struct LayerPoints {
    ad::Var points;  // [N*k, 3]
    ad::Var logits;  // [N*k, C]
};

struct EncoderOutput {
    QuerySet initial;        // Q_0 / P_0 (after adaptive range scaling)
    QuerySet final_queries;  // Q_L / P_L
    std::vector<LayerPoints> layers;
};

// per history frame: relative pose (reference ego -> this frame's ego) and
// the per-view feature pyramids extracted from its images
struct FrameContext {
    Pose rel_pose;
    std::vector<FeaturePyramid> views;
};

namespace ops {

// Differentiable projection + multi-scale bilinear sampling.
// points: [K,3] in reference-frame ego coords. For every (point, frame) the
// point is moved into that frame, projected into every camera, and each
// visible camera's pyramid is sampled at all 4 scales; visible samples are
// averaged per scale. Rows: ((k*F + f)*4 + scale); invisible slots are zero.
inline ad::Var sample_pyramids(const ad::Var& points, const std::vector<FrameContext>& frames,
                               const CameraRig& rig) {
    SOQ_REQUIRE(points->cols() == 3, "sample_pyramids: points must be Kx3");
    SOQ_REQUIRE(!frames.empty(), "sample_pyramids: no frames");
    const int64_t K = points->rows();
    const int64_t F = static_cast<int64_t>(frames.size());
    const int64_t V = static_cast<int64_t>(rig.size());
    const int64_t C = frames[0].views.at(0).levels[0]->shape[0];

    struct ViewHit {
        int16_t frame, view;
        double u, v;        // pixel coords
        Vec3 du_dp, dv_dp;  // pixel coord gradients w.r.t. the ego point
    };
    std::vector<std::vector<ViewHit>> hits(static_cast<size_t>(K * F));

    for (int64_t k = 0; k < K; ++k) {
        const Vec3 p = {points->val[k * 3], points->val[k * 3 + 1], points->val[k * 3 + 2]};
        for (int64_t f = 0; f < F; ++f) {
            const Pose& rel = frames[f].rel_pose;
            const Vec3 pf = rel.apply(p);
            for (int64_t v = 0; v < V; ++v) {
                const Camera& cam = rig[static_cast<size_t>(v)];
                double u, vp, depth;
                if (!cam.project(pf, u, vp, depth)) continue;
                const Pose& ce = cam.cam_from_ego;
                std::array<double, 9> M{};
                for (int r = 0; r < 3; ++r)
                    for (int c = 0; c < 3; ++c) {
                        double s = 0;
                        for (int t = 0; t < 3; ++t)
                            s += ce.rotation[r * 3 + t] * rel.rotation[t * 3 + c];
                        M[r * 3 + c] = s;
                    }
                const Vec3 pc = ce.apply(pf);
                ViewHit hit;
                hit.frame = static_cast<int16_t>(f);
                hit.view = static_cast<int16_t>(v);
                hit.u = u;
                hit.v = vp;
                const double iz = 1.0 / pc[2];
                for (int c = 0; c < 3; ++c) {
                    hit.du_dp[c] = cam.fx * (M[0 * 3 + c] - pc[0] * iz * M[2 * 3 + c]) * iz;
                    hit.dv_dp[c] = cam.fy * (M[1 * 3 + c] - pc[1] * iz * M[2 * 3 + c]) * iz;
                }
                hits[static_cast<size_t>(k * F + f)].push_back(hit);
            }
        }
    }

    std::vector<double> out(static_cast<size_t>(K * F * 4 * C), 0.0);
    for (int64_t k = 0; k < K; ++k)
        for (int64_t f = 0; f < F; ++f) {
            const auto& cell = hits[static_cast<size_t>(k * F + f)];
            if (cell.empty()) continue;
            const double w = 1.0 / static_cast<double>(cell.size());
            for (const auto& hit : cell)
                for (int l = 0; l < 4; ++l) {
                    const auto& map = frames[hit.frame].views[hit.view].levels[l];
                    const int64_t H = map->shape[1], W = map->shape[2];
                    const double stride = FeaturePyramid::strides[l];
                    const double uf = (hit.u + 0.5) / stride - 0.5;
                    const double vf = (hit.v + 0.5) / stride - 0.5;
                    const double cu = std::min(std::max(uf, 0.0), static_cast<double>(W - 1));
                    const double cv = std::min(std::max(vf, 0.0), static_cast<double>(H - 1));
                    const int64_t x0 = std::min(static_cast<int64_t>(cu), W - 1);
                    const int64_t y0 = std::min(static_cast<int64_t>(cv), H - 1);
                    const int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
                    const double fx = cu - x0, fy = cv - y0;
                    double* acc = &out[(((k * F + f) * 4) + l) * C];
                    for (int64_t c = 0; c < C; ++c) {
                        const double* mc = &map->val[c * H * W];
                        acc[c] += w * ((1 - fy) * ((1 - fx) * mc[y0 * W + x0] + fx * mc[y0 * W + x1]) +
                                       fy * ((1 - fx) * mc[y1 * W + x0] + fx * mc[y1 * W + x1]));
                    }
                }
        }

    std::vector<ad::Var> parents = {points};
    for (const auto& fr : frames)
        for (const auto& view : fr.views)
            for (const auto& level : view.levels) parents.push_back(level);

    return ad::detail::op(
        {K * F * 4, C}, std::move(out), std::move(parents),
        [points, frames, hits, K, F, C](ad::Node& n) {
            for (int64_t k = 0; k < K; ++k)
                for (int64_t f = 0; f < F; ++f) {
                    const auto& cell = hits[static_cast<size_t>(k * F + f)];
                    if (cell.empty()) continue;
                    const double w = 1.0 / static_cast<double>(cell.size());
                    for (const auto& hit : cell) {
                        double du_total = 0.0, dv_total = 0.0;
                        for (int l = 0; l < 4; ++l) {
                            const auto& map = frames[hit.frame].views[hit.view].levels[l];
                            const int64_t H = map->shape[1], W = map->shape[2];
                            const double stride = FeaturePyramid::strides[l];
                            const double uf = (hit.u + 0.5) / stride - 0.5;
                            const double vf = (hit.v + 0.5) / stride - 0.5;
                            const double cu = std::min(std::max(uf, 0.0), static_cast<double>(W - 1));
                            const double cv = std::min(std::max(vf, 0.0), static_cast<double>(H - 1));
                            const bool u_clamped = uf != cu, v_clamped = vf != cv;
                            const int64_t x0 = std::min(static_cast<int64_t>(cu), W - 1);
                            const int64_t y0 = std::min(static_cast<int64_t>(cv), H - 1);
                            const int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
                            const double fx = cu - x0, fy = cv - y0;
                            const double* g = &n.grad[(((k * F + f) * 4) + l) * C];
                            double du = 0.0, dv = 0.0;
                            for (int64_t c = 0; c < C; ++c) {
                                const double gc = g[c];
                                if (gc == 0.0) continue;
                                const double* mv = &map->val[c * H * W];
                                const double v00 = mv[y0 * W + x0], v01 = mv[y0 * W + x1];
                                const double v10 = mv[y1 * W + x0], v11 = mv[y1 * W + x1];
                                if (map->requires_grad) {
                                    map->ensure_grad();
                                    double* mg = &map->grad[c * H * W];
                                    mg[y0 * W + x0] += gc * w * (1 - fy) * (1 - fx);
                                    mg[y0 * W + x1] += gc * w * (1 - fy) * fx;
                                    mg[y1 * W + x0] += gc * w * fy * (1 - fx);
                                    mg[y1 * W + x1] += gc * w * fy * fx;
                                }
                                du += gc * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
                                dv += gc * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                            if (!u_clamped) du_total += w * du / stride;
                            if (!v_clamped) dv_total += w * dv / stride;
                        }
                        if (points->requires_grad) {
                            points->ensure_grad();
                            for (int c = 0; c < 3; ++c)
                                points->grad[k * 3 + c] +=
                                    du_total * hit.du_dp[c] + dv_total * hit.dv_dp[c];
                        }
                    }
                }
        });
}

// pairwise Euclidean distance matrix [N,N], differentiable, zero diagonal
inline ad::Var pairwise_distance(const ad::Var& positions) {
    SOQ_REQUIRE(positions->cols() == 3, "pairwise_distance: Nx3 expected");
    const int64_t n = positions->rows();
    std::vector<double> v(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            const double dx = positions->val[i * 3] - positions->val[j * 3];
            const double dy = positions->val[i * 3 + 1] - positions->val[j * 3 + 1];
            const double dz = positions->val[i * 3 + 2] - positions->val[j * 3 + 2];
            const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
            v[i * n + j] = d;
            v[j * n + i] = d;
        }
    return ad::detail::op({n, n}, std::move(v), {positions}, [positions, n](ad::Node& nd) {
        positions->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double d = nd.val[i * n + j];
                if (d <= 1e-12) continue;
                const double g = nd.grad[i * n + j] / d;
                if (g == 0.0) continue;
                for (int c = 0; c < 3; ++c) {
                    const double diff = positions->val[i * 3 + c] - positions->val[j * 3 + c];
                    positions->grad[i * 3 + c] += g * diff;
                    positions->grad[j * 3 + c] -= g * diff;
                }
            }
    });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// spatial-aware multi-head self-attention block (shared with the forecaster)

class SpatialMhsa {
  public:
    SpatialMhsa() = default;
    SpatialMhsa(nn::ParamStore& ps, const std::string& name, int64_t dim, int64_t heads)
        : q_(ps, name + ".q", dim, dim),
          k_(ps, name + ".k", dim, dim),
          v_(ps, name + ".v", dim, dim),
          o_(ps, name + ".o", dim, dim),
          tau_(ps, name + ".tau", dim, heads),
          dim_(dim),
          heads_(heads) {}

    // logits_h = q_h k_h^T / sqrt(dh) - tau_h(q_i) * ||p_i - p_j||; row softmax;
    // returns the attention output (caller adds the residual)
    ad::Var operator()(const ad::Var& emb, const ad::Var& positions,
                       bool force_zero_tau = false) const {
        const int64_t dh = dim_ / heads_;
        auto q = q_(emb);
        auto k = k_(emb);
        auto v = v_(emb);
        auto dist = ops::pairwise_distance(positions);
        auto tau = ad::softplus(tau_(emb));  // [N, heads] >= 0
        std::vector<ad::Var> outs;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int64_t h = 0; h < heads_; ++h) {
            auto qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
            auto kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
            auto vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
            auto logits = ad::scale(ad::matmul(qh, ad::transpose2d(kh)), inv_sqrt);
            if (!force_zero_tau) {
                auto tau_h = ad::slice_cols(tau, h, h + 1);
                logits = ad::sub(logits, ad::mul_colvec(dist, tau_h));
            }
            outs.push_back(ad::matmul(ad::softmax_rows(logits), vh));
        }
        return o_(ad::concat_cols(outs));
    }

    nn::Linear q_, k_, v_, o_, tau_;
    int64_t dim_ = 0, heads_ = 0;
};

// point decoding head: per query, k tanh-bounded offsets plus class logits
class PointDecoder {
  public:
    PointDecoder() = default;
    PointDecoder(nn::ParamStore& ps, const std::string& name, int64_t dim, int points,
                 int num_classes, double offset_bound)
        : head_(ps, name + ".head", dim, static_cast<int64_t>(points) * (3 + num_classes),
                /*zero_init=*/true),
          points_(points),
          classes_(num_classes),
          bound_(offset_bound) {}

    // out.points rows are blocked per offset slot: row (pt*N + i) is query i's
    // pt-th point; chamfer and focal do not care about row order
    void decode(const ad::Var& emb, const ad::Var& positions, LayerPoints& out,
                ad::Var& mean_positions) const {
        auto raw = head_(emb);  // [N, k*(3+C)]
        std::vector<ad::Var> point_rows, logit_rows;
        ad::Var mean_off;
        for (int pt = 0; pt < points_; ++pt) {
            const int64_t base = static_cast<int64_t>(pt) * (3 + classes_);
            auto off = ad::scale(ad::tanh_(ad::slice_cols(raw, base, base + 3)), bound_);
            point_rows.push_back(ad::add(positions, off));
            logit_rows.push_back(ad::slice_cols(raw, base + 3, base + 3 + classes_));
            mean_off = pt == 0 ? off : ad::add(mean_off, off);
        }
        out.points = ad::concat_rows(point_rows);
        out.logits = ad::concat_rows(logit_rows);
        mean_positions = ad::add(positions, ad::scale(mean_off, 1.0 / points_));
    }

    int points() const { return points_; }

    nn::Linear head_;
    int points_ = 0, classes_ = 0;
    double bound_ = 1.0;
};

// ---------------------------------------------------------------------------

class OccupancyEncoder {
  public:
    OccupancyEncoder() = default;
    OccupancyEncoder(nn::ParamStore& ps, const std::string& name, const EncoderConfig& cfg)
        : cfg_(cfg) {
        cfg.validate();
        const int64_t N = cfg.num_queries, D = cfg.dim, C = cfg.d_img;
        const int64_t P = cfg.slots_per_query();
        query_embed_ = ps.normal_param(name + ".query_embed", {N, D}, 0.5);
        query_pos_raw_ = ps.normal_param(name + ".query_pos", {N, 3}, 1.0);
        const double range = cfg.half_extent();
        for (int l = 0; l < cfg.num_layers; ++l) {
            const std::string ln = name + ".layer" + std::to_string(l);
            offset_gen_.emplace_back(ps, ln + ".offsets", D,
                                     static_cast<int64_t>(cfg.sample_points) * 3,
                                     /*zero_init=*/true);
            {
                // small constant initial offsets via the bias
                Rng rng(ps.seed() ^ fnv1a64(ln + ".offsets.bias"));
                for (auto& x : offset_gen_.back().b->val)
                    x = rng.normal(0.0, cfg.offset_init_std_frac * range);
            }
            AdaptiveMix mix;
            mix.channel_gen = nn::Linear(ps, ln + ".mix.cgen", D, C * C, /*zero_init=*/true);
            mix.point_gen = nn::Linear(ps, ln + ".mix.pgen", D, P * P, /*zero_init=*/true);
            // identity bias: initial mixing passes samples through
            for (int64_t i = 0; i < C; ++i) mix.channel_gen.b->val[i * C + i] = 1.0;
            for (int64_t i = 0; i < P; ++i) mix.point_gen.b->val[i * P + i] = 1.0;
            mix.out = nn::Linear(ps, ln + ".mix.out", P * C, D);
            mix.norm = nn::LayerNorm(ps, ln + ".mix.norm", D);
            mix_.push_back(std::move(mix));

            attn_.emplace_back(ps, ln + ".mhsa", D, cfg.heads);
            attn_norm_.emplace_back(ps, ln + ".mhsa_norm", D);
            ffn_.emplace_back(ps, ln + ".ffn", D, cfg.ffn_hidden, D);
            ffn_norm_.emplace_back(ps, ln + ".ffn_norm", D);
            decoders_.emplace_back(ps, ln + ".decode", D, cfg.points_schedule[l], cfg.num_classes,
                                   cfg.offset_bound_fracs[l] * range);
            if (cfg.learned_position_update)
                pos_update_.emplace_back(ps, ln + ".pos_update", D, 3, /*zero_init=*/true);
        }
    }

    const EncoderConfig& config() const { return cfg_; }

    // adaptive range scaling: the forward extent grows by |v| * horizon * dt
    QuerySet init_queries(const EgoState& ego) const {
        const int64_t N = cfg_.num_queries;
        const double ext = ego.speed() * cfg_.horizon * cfg_.dt;
        auto gate = ad::sigmoid(query_pos_raw_);  // (0,1)
        std::vector<double> lo(static_cast<size_t>(N * 3)), span(static_cast<size_t>(N * 3));
        for (int64_t i = 0; i < N; ++i)
            for (int c = 0; c < 3; ++c) {
                lo[i * 3 + c] = cfg_.range_min[c];
                span[i * 3 + c] = cfg_.range_max[c] + (c == 0 ? ext : 0.0) - cfg_.range_min[c];
            }
        auto positions = ad::add(ad::constant({N, 3}, lo), ad::mul(gate, ad::constant({N, 3}, span)));
        return {query_embed_, positions};
    }

    EncoderOutput forward(const std::vector<FrameContext>& frames, const CameraRig& rig,
                          const EgoState& ego) const {
        SOQ_REQUIRE(static_cast<int>(frames.size()) == cfg_.history_frames,
                    "encoder: history frame count mismatch");
        EncoderOutput out;
        out.initial = init_queries(ego);
        ad::Var emb = out.initial.embeddings;
        ad::Var pos = out.initial.positions;
        for (int l = 0; l < cfg_.num_layers; ++l) {
            auto sampled = sample_features(emb, pos, frames, rig, l);
            emb = ad::add(emb, adaptive_mix(emb, sampled, l));
            emb = ad::add(emb, attn_[l](attn_norm_[l](emb), pos));
            emb = ad::add(emb, ffn_[l](ffn_norm_[l](emb)));
            LayerPoints lp;
            ad::Var mean_pos;
            decoders_[l].decode(emb, pos, lp, mean_pos);
            out.layers.push_back(lp);
            pos = cfg_.learned_position_update ? ad::add(pos, pos_update_[l](emb)) : mean_pos;
        }
        out.final_queries = {emb, pos};
        return out;
    }

    // sampling points: rows (s*N + i); kept visible for unit tests
    ad::Var sample_features(const ad::Var& emb, const ad::Var& pos,
                            const std::vector<FrameContext>& frames, const CameraRig& rig,
                            int layer) const {
        auto offsets = offset_gen_[layer](emb);  // [N, S*3]
        std::vector<ad::Var> sample_rows;
        for (int s = 0; s < cfg_.sample_points; ++s)
            sample_rows.push_back(ad::add(pos, ad::slice_cols(offsets, s * 3, s * 3 + 3)));
        return ops::sample_pyramids(ad::concat_rows(sample_rows), frames, rig);
    }

    // samples: [(S*N)*F*4, C] from sample_features; query-conditioned channel
    // mixing then point mixing, flatten-project to D (residual added by caller)
    ad::Var adaptive_mix(const ad::Var& emb, const ad::Var& samples, int layer) const {
        const int64_t N = cfg_.num_queries;
        const int64_t F = cfg_.history_frames;
        const int64_t C = cfg_.d_img;
        const int64_t P = cfg_.slots_per_query();
        const auto& mix = mix_[layer];
        auto cgen = mix.channel_gen(emb);  // [N, C*C]
        auto pgen = mix.point_gen(emb);    // [N, P*P]
        std::vector<ad::Var> outs;
        outs.reserve(static_cast<size_t>(N));
        for (int64_t i = 0; i < N; ++i) {
            std::vector<ad::Var> rows;
            for (int s = 0; s < cfg_.sample_points; ++s) {
                const int64_t r0 = (static_cast<int64_t>(s) * N + i) * F * 4;
                rows.push_back(ad::slice_rows(samples, r0, r0 + F * 4));
            }
            auto Si = ad::concat_rows(rows);  // [P, C]
            auto Mc = ad::reshape(ad::slice_rows(cgen, i, i + 1), {C, C});
            auto S1 = ad::relu(ad::matmul(Si, Mc));
            auto Mp = ad::reshape(ad::slice_rows(pgen, i, i + 1), {P, P});
            auto S2 = ad::relu(ad::matmul(Mp, S1));
            outs.push_back(ad::reshape(S2, {1, P * C}));
        }
        return mix.norm(mix.out(ad::concat_rows(outs)));
    }

    const SpatialMhsa& attention(int layer) const { return attn_[layer]; }

    ad::Var query_embed_, query_pos_raw_;

  private:
    struct AdaptiveMix {
        nn::Linear channel_gen, point_gen, out;
        nn::LayerNorm norm;
    };

    EncoderConfig cfg_;
    std::vector<nn::Linear> offset_gen_;
    std::vector<AdaptiveMix> mix_;
    std::vector<SpatialMhsa> attn_;
    std::vector<nn::LayerNorm> attn_norm_;
    std::vector<nn::Mlp> ffn_;
    std::vector<nn::LayerNorm> ffn_norm_;
    std::vector<PointDecoder> decoders_;
    std::vector<nn::Linear> pos_update_;
};

// ---------------------------------------------------------------------------
// training objective: Chamfer on P_0 and every layer's points, focal on every
// layer's logits against matched ground-truth labels, plus the supplied
// distillation term

inline ad::Var encoder_loss(const EncoderOutput& out, const OccupancyPointSet& extended_gt,
                            const ad::Var& distill_term, const EncoderConfig& cfg) {
    SOQ_REQUIRE(!extended_gt.empty(), "encoder_loss: empty ground truth");
    ad::Var total = ops::chamfer(out.initial.positions, extended_gt.coords, cfg.normalized_chamfer);
    for (const auto& layer : out.layers) {
        total = ad::add(total, ops::chamfer(layer.points, extended_gt.coords, cfg.normalized_chamfer));
        if (cfg.lambda_focal > 0.0) {
            // label of each predicted point = label of its nearest gt point
            OccupancyPointSet pred;
            pred.num_classes = cfg.num_classes;
            const int64_t m = layer.points->rows();
            pred.coords.resize(static_cast<size_t>(m));
            pred.labels.assign(static_cast<size_t>(m), 0);
            for (int64_t i = 0; i < m; ++i)
                pred.coords[i] = {layer.points->val[i * 3], layer.points->val[i * 3 + 1],
                                  layer.points->val[i * 3 + 2]};
            const auto matches = match_points(pred, extended_gt);
            std::vector<int> labels(static_cast<size_t>(m));
            for (int64_t i = 0; i < m; ++i) labels[i] = extended_gt.labels[matches[i]];
            total = ad::add(total, ad::scale(ops::focal(layer.logits, labels, 2.0, 0.25),
                                             cfg.lambda_focal));
        }
    }
    if (distill_term) total = ad::add(total, distill_term);
    return total;
}

}  // namespace soq
