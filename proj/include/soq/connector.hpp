// SPDX-License-Identifier: Apache-2.0
//
// Vision-language connector: sinusoidal position encoding, alignment of
// encoder queries into the language embedding space, cosine feature
// distillation against projected teacher features, and learnable global
// scene tokens that cross-attend over all occupancy tokens.
#pragma once

#include <string>
#include <vector>

#include "soq/camera.hpp"
#include "soq/encoder.hpp"
#include "soq/nn.hpp"
#include "soq/nn_ops.hpp"

namespace soq {

struct ConnectorConfig {
    int d_query = 64;    // encoder dim D
    int d_lm = 128;      // language embedding width
    int d_teacher = 32;  // teacher channel width
    int global_tokens = 12;
    int heads = 4;
    int pe_pairs = 10;  // sin/cos pairs per axis
    double pe_min_wavelength = 0.25;
    double pe_max_wavelength = 64.0;
    int teacher_stride = 16;

    void validate() const {
        if (d_query <= 0 || d_lm <= 0 || global_tokens < 0)
            throw ConfigError("ConnectorConfig: sizes");
        if (pe_pairs < 1) throw ConfigError("ConnectorConfig: pe_pairs");
    }
};

struct OccupancyTokens {
    ad::Var tokens;          // [N, d_lm]
    std::vector<Vec3> positions;  // source positions, kept for distillation
};

struct DistillResult {
    ad::Var loss;     // scalar in [0,2]
    int included = 0; // tokens visible in at least one view
    int excluded = 0;
};

namespace ops {

// sin/cos ladder over a geometric wavelength range, per axis of [N,3];
// output [N, 3*2*pairs], channel pairs (sin, cos), differentiable
inline ad::Var sinusoidal_encode(const ad::Var& positions, int pairs, double min_wavelength,
                                 double max_wavelength) {
    SOQ_REQUIRE(positions->cols() == 3, "sinusoidal_encode: Nx3 expected");
    SOQ_REQUIRE(pairs >= 1, "sinusoidal_encode: pairs");
    const int64_t n = positions->rows();
    const int64_t width = 3LL * 2 * pairs;
    std::vector<double> freqs(static_cast<size_t>(pairs));
    for (int k = 0; k < pairs; ++k) {
        const double t = pairs == 1 ? 0.0 : static_cast<double>(k) / (pairs - 1);
        freqs[k] = 2.0 * M_PI / (min_wavelength * std::pow(max_wavelength / min_wavelength, t));
    }
    std::vector<double> v(static_cast<size_t>(n * width));
    for (int64_t i = 0; i < n; ++i)
        for (int axis = 0; axis < 3; ++axis) {
            const double x = positions->val[i * 3 + axis];
            for (int k = 0; k < pairs; ++k) {
                const int64_t base = i * width + (axis * pairs + k) * 2;
                v[base] = std::sin(freqs[k] * x);
                v[base + 1] = std::cos(freqs[k] * x);
            }
        }
    return ad::detail::op(
        {n, width}, std::move(v), {positions}, [positions, n, pairs, width, freqs](ad::Node& nd) {
            if (!positions->requires_grad) return;
            positions->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int axis = 0; axis < 3; ++axis) {
                    double acc = 0.0;
                    for (int k = 0; k < pairs; ++k) {
                        const int64_t base = i * width + (axis * pairs + k) * 2;
                        acc += nd.grad[base] * freqs[k] * nd.val[base + 1];
                        acc -= nd.grad[base + 1] * freqs[k] * nd.val[base];
                    }
                    positions->grad[i * 3 + axis] += acc;
                }
        });
}

}  // namespace ops

class Connector {
  public:
    Connector() = default;
    Connector(nn::ParamStore& ps, const std::string& name, const ConnectorConfig& cfg)
        : cfg_(cfg) {
        cfg.validate();
        const int64_t raw = raw_pe_width();
        pe_proj_ = nn::Linear(ps, name + ".pe_proj", raw, cfg.d_query);
        align_fc1_ = nn::Linear(ps, name + ".align_fc1", cfg.d_query, cfg.d_query + cfg.d_lm);
        align_fc2_ = nn::Linear(ps, name + ".align_fc2", cfg.d_query + cfg.d_lm, cfg.d_lm);
        align_skip_ = ps.zeros_param(name + ".align_skip.W", {cfg.d_lm, cfg.d_query});
        // pad/truncate identity warm start for the skip path
        for (int64_t i = 0; i < std::min<int64_t>(cfg.d_lm, cfg.d_query); ++i)
            align_skip_->val[i * cfg.d_query + i] = 1.0;
        align_skip_b_ = ps.zeros_param(name + ".align_skip.b", {cfg.d_lm});

        distill_head_ = nn::Linear(ps, name + ".distill_head", cfg.d_lm, cfg.d_teacher);
        norm_student_ = nn::LayerNorm(ps, name + ".norm_student", cfg.d_teacher);
        norm_teacher_ = nn::LayerNorm(ps, name + ".norm_teacher", cfg.d_teacher);

        global_embed_ = ps.normal_param(name + ".global_embed", {cfg.global_tokens, cfg.d_lm}, 0.5);
        if (cfg.global_tokens > 0) {
            global_attn_ = nn::MultiheadAttention(ps, name + ".global_attn", cfg.d_lm, cfg.heads);
            global_ffn_ = nn::Mlp(ps, name + ".global_ffn", cfg.d_lm, 2 * cfg.d_lm, cfg.d_lm);
            global_norm1_ = nn::LayerNorm(ps, name + ".global_norm1", cfg.d_lm);
            global_norm2_ = nn::LayerNorm(ps, name + ".global_norm2", cfg.d_lm);
        }
    }

    int64_t raw_pe_width() const { return 3LL * 2 * cfg_.pe_pairs; }

    // raw ladder, pre-projection
    ad::Var positional_encode_raw(const ad::Var& positions) const {
        return ops::sinusoidal_encode(positions, cfg_.pe_pairs, cfg_.pe_min_wavelength,
                                      cfg_.pe_max_wavelength);
    }

    ad::Var positional_encode(const ad::Var& positions) const {
        return pe_proj_(positional_encode_raw(positions));
    }

    // T_o = MLP(Q_L + PE(P_L)); two-layer perceptron with a linear skip
    OccupancyTokens align_tokens(const ad::Var& q_final, const ad::Var& p_final) const {
        SOQ_REQUIRE(q_final->rows() == p_final->rows(), "align_tokens: N mismatch");
        auto x = ad::add(q_final, positional_encode(p_final));
        auto tokens = ad::add(ad::linear(x, align_skip_, align_skip_b_),
                              align_fc2_(ad::gelu(align_fc1_(x))));
        OccupancyTokens out;
        out.tokens = tokens;
        out.positions.resize(static_cast<size_t>(p_final->rows()));
        for (int64_t i = 0; i < p_final->rows(); ++i)
            out.positions[i] = {p_final->val[i * 3], p_final->val[i * 3 + 1],
                                p_final->val[i * 3 + 2]};
        return out;
    }

    // 1 - cosine(Norm1(head(T_o)), Norm2(sampled teacher)); teacher maps are
    // detached upstream, and the sampling position carries no gradient
    DistillResult distill_loss(const OccupancyTokens& tokens,
                               const std::vector<ad::Var>& teacher_maps,
                               const CameraRig& rig) const {
        SOQ_REQUIRE(teacher_maps.size() == rig.size(), "distill_loss: teacher map per view");
        const int64_t n = tokens.tokens->rows();
        const int64_t dt = cfg_.d_teacher;
        std::vector<int64_t> included;
        std::vector<double> teacher_rows;
        for (int64_t i = 0; i < n; ++i) {
            const Vec3 p = tokens.positions[i];
            int visible = 0;
            std::vector<double> acc(static_cast<size_t>(dt), 0.0);
            for (size_t v = 0; v < rig.size(); ++v) {
                double u, vp, depth;
                if (!rig[v].project(p, u, vp, depth)) continue;
                ++visible;
                const auto& map = teacher_maps[v];
                const int64_t H = map->shape[1], W = map->shape[2];
                const double uf = std::min(
                    std::max((u + 0.5) / cfg_.teacher_stride - 0.5, 0.0), static_cast<double>(W - 1));
                const double vf = std::min(
                    std::max((vp + 0.5) / cfg_.teacher_stride - 0.5, 0.0), static_cast<double>(H - 1));
                const int64_t x0 = std::min(static_cast<int64_t>(uf), W - 1);
                const int64_t y0 = std::min(static_cast<int64_t>(vf), H - 1);
                const int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
                const double fx = uf - x0, fy = vf - y0;
                for (int64_t c = 0; c < dt; ++c) {
                    const double* mc = &map->val[c * H * W];
                    acc[c] += (1 - fy) * ((1 - fx) * mc[y0 * W + x0] + fx * mc[y0 * W + x1]) +
                              fy * ((1 - fx) * mc[y1 * W + x0] + fx * mc[y1 * W + x1]);
                }
            }
            if (visible == 0) continue;
            for (int64_t c = 0; c < dt; ++c) teacher_rows.push_back(acc[c] / visible);
            included.push_back(i);
        }
        DistillResult res;
        res.included = static_cast<int>(included.size());
        res.excluded = static_cast<int>(n - res.included);
        if (included.empty()) {
            ++zero_visible_warnings_;
            res.loss = ad::scalar(0.0);
            return res;
        }
        auto student = norm_student_(
            distill_head_(ad::gather_rows(tokens.tokens, included)));
        auto teacher = norm_teacher_(
            ad::constant({static_cast<int64_t>(included.size()), dt}, std::move(teacher_rows)));
        auto dot = ad::sum_cols(ad::mul(student, teacher));
        auto nu = ad::sqrt_(ad::add_scalar(ad::sum_cols(ad::square(student)), 1e-12));
        auto nv = ad::sqrt_(ad::add_scalar(ad::sum_cols(ad::square(teacher)), 1e-12));
        auto cos = ad::div(dot, ad::mul(nu, nv));
        res.loss = ad::add_scalar(ad::neg(ad::mean_all(cos)), 1.0);
        return res;
    }

    // T_g = Cross_Attn(T_g, T_o, T_o) with residual + FFN
    ad::Var global_attend(const ad::Var& occupancy_tokens, bool force_uniform = false) const {
        SOQ_REQUIRE(cfg_.global_tokens > 0, "global_attend: no global tokens configured");
        ad::Var g = global_embed_;
        ad::Var attended;
        if (force_uniform) {
            // uniform weights over tokens: mean of the value projection
            auto v = global_attn_.v_proj(occupancy_tokens);
            auto mean_v = ad::mean_rows(v);
            std::vector<ad::Var> rows(static_cast<size_t>(cfg_.global_tokens),
                                      global_attn_.out_proj(mean_v));
            attended = ad::concat_rows(rows);
        } else {
            attended = global_attn_(global_norm1_(g), occupancy_tokens);
        }
        g = ad::add(g, attended);
        g = ad::add(g, global_ffn_(global_norm2_(g)));
        return g;
    }

    int zero_visible_warnings() const { return zero_visible_warnings_; }

    const ConnectorConfig& config() const { return cfg_; }

    nn::Linear pe_proj_, align_fc1_, align_fc2_, distill_head_;
    ad::Var align_skip_, align_skip_b_;
    nn::LayerNorm norm_student_, norm_teacher_;
    ad::Var global_embed_;
    nn::MultiheadAttention global_attn_;
    nn::Mlp global_ffn_;
    nn::LayerNorm global_norm1_, global_norm2_;

  private:
    ConnectorConfig cfg_;
    mutable int zero_visible_warnings_ = 0;
};

}  // namespace soq
