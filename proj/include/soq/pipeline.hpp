// SPDX-License-Identifier: Apache-2.0
//
// Full model assembly plus checkpoint I/O. A checkpoint stores the config
// hash, stage tag, every parameter blob by name, optimizer moments and the
// fitted anchor set; loading against a different config is refused.
#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "soq/backbone.hpp"
#include "soq/config.hpp"
#include "soq/connector.hpp"
#include "soq/encoder.hpp"
#include "soq/forecaster.hpp"
#include "soq/lm.hpp"
#include "soq/optim.hpp"
#include "soq/planner.hpp"
#include "soq/scene_io.hpp"

namespace soq {

struct SampleRef {
    const Scene* scene = nullptr;
    int t0 = 0;
};

struct SampleForward {
    EncoderOutput enc;
    std::vector<ad::Var> current_images;  // per view, [3,H,W] for the teacher
};

class Pipeline {
  public:
    explicit Pipeline(const RunConfig& cfg)
        : cfg(cfg),
          params(cfg.seed ^ 0x50a9e17ULL),
          student(params, "student", cfg.backbone),
          teacher(params, "teacher", cfg.backbone),
          encoder(params, "encoder", cfg.encoder),
          connector(params, "connector", cfg.connector),
          lm(params, "lm", cfg.lm),
          forecaster(params, "forecaster", cfg.forecaster),
          decoder(params, "planner.decoder", cfg.planner),
          scorer(params, "planner.scorer", cfg.planner),
          vocab(Vocabulary::standard()) {}

    // history frame contexts for (scene, t0): index 0 is the current frame,
    // rel poses map t0-ego coordinates into each history frame's ego frame
    std::vector<FrameContext> frame_contexts(const Scene& scene, int t0,
                                             std::vector<ad::Var>* current_images = nullptr) const {
        SOQ_REQUIRE(t0 >= cfg.scene.history - 1 && t0 < static_cast<int>(scene.frames.size()),
                    "frame_contexts: t0 outside history range");
        std::vector<FrameContext> out;
        const Pose t0_pose = scene.frames[t0].ego_pose;
        for (int i = 0; i < cfg.scene.history; ++i) {
            const int f = t0 - i;
            FrameContext ctx;
            ctx.rel_pose = scene.frames[f].ego_pose.inverse().compose(t0_pose);
            auto views = render_views(scene, f);
            for (size_t v = 0; v < views.size(); ++v) {
                auto img = ad::image_to_var(views[v].image);
                if (i == 0 && current_images) current_images->push_back(img);
                ctx.views.push_back(student.forward(img));
            }
            out.push_back(std::move(ctx));
        }
        return out;
    }

    SampleForward encode_sample(const Scene& scene, int t0) const {
        SampleForward fwd;
        auto frames = frame_contexts(scene, t0, &fwd.current_images);
        fwd.enc = encoder.forward(frames, scene.cameras, scene.frames[t0].state);
        return fwd;
    }

    // stage-1 objective for one sample: L_occ (+ distillation)
    ad::Var occupancy_loss(const Scene& scene, int t0, const SampleForward& fwd,
                           DistillResult* distill_out = nullptr) const {
        auto gt = build_extended_gt(scene, t0, cfg.scene.horizon);
        ad::Var distill_term;
        if (cfg.distill_enabled) {
            auto tokens = connector.align_tokens(fwd.enc.final_queries.embeddings,
                                                 fwd.enc.final_queries.positions);
            auto maps = teacher.extract_views(fwd.current_images);
            auto res = cfg.distill_normalized
                           ? connector.distill_loss(tokens, maps, scene.cameras)
                           : distill_unnormalized(tokens, maps, scene.cameras);
            distill_term = res.loss;
            if (distill_out) *distill_out = res;
        }
        return encoder_loss(fwd.enc, gt, distill_term, cfg.encoder);
    }

    // ablation variant without the LayerNorm pair: plain cosine on raw vectors
    DistillResult distill_unnormalized(const OccupancyTokens& tokens,
                                       const std::vector<ad::Var>& maps,
                                       const CameraRig& rig) const {
        // reuse the connector path but bypass the norms by normalizing with
        // frozen identity statistics: compute cosine directly here
        const int64_t n = tokens.tokens->rows();
        std::vector<int64_t> included;
        std::vector<double> teacher_rows;
        const int64_t dt = cfg.connector.d_teacher;
        for (int64_t i = 0; i < n; ++i) {
            int visible = 0;
            std::vector<double> acc(static_cast<size_t>(dt), 0.0);
            for (size_t v = 0; v < rig.size(); ++v) {
                double u, vp, depth;
                if (!rig[v].project(tokens.positions[i], u, vp, depth)) continue;
                ++visible;
                const auto& map = maps[v];
                const int64_t H = map->shape[1], W = map->shape[2];
                const double uf = std::min(std::max((u + 0.5) / cfg.connector.teacher_stride - 0.5,
                                                    0.0),
                                           static_cast<double>(W - 1));
                const double vf = std::min(std::max((vp + 0.5) / cfg.connector.teacher_stride - 0.5,
                                                    0.0),
                                           static_cast<double>(H - 1));
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
            res.loss = ad::scalar(0.0);
            return res;
        }
        auto student_rows = connector.distill_head_(ad::gather_rows(tokens.tokens, included));
        auto teacher_var =
            ad::constant({static_cast<int64_t>(included.size()), dt}, std::move(teacher_rows));
        auto dot = ad::sum_cols(ad::mul(student_rows, teacher_var));
        auto nu = ad::sqrt_(ad::add_scalar(ad::sum_cols(ad::square(student_rows)), 1e-12));
        auto nv = ad::sqrt_(ad::add_scalar(ad::sum_cols(ad::square(teacher_var)), 1e-12));
        res.loss = ad::add_scalar(ad::neg(ad::mean_all(ad::div(dot, ad::mul(nu, nv)))), 1.0);
        return res;
    }

    // reasoning rows = hidden states at answer positions of a teacher-forced pass
    static ad::Var answer_hidden(const TokenSequence& seq, const LmOutput& out) {
        std::vector<ad::Var> rows;
        for (int64_t i = 0; i < seq.length(); ++i)
            if (seq.segments[static_cast<size_t>(i)] == Segment::Answer)
                rows.push_back(ad::slice_rows(out.hidden, i, i + 1));
        if (rows.empty()) {
            const int64_t last = seq.length() - 1;
            rows.push_back(ad::slice_rows(out.hidden, last, last + 1));
        }
        return ad::concat_rows(rows);
    }

    RunConfig cfg;
    nn::ParamStore params;
    StudentBackbone student;
    TeacherBackbone teacher;
    OccupancyEncoder encoder;
    Connector connector;
    LanguageModel lm;
    Forecaster forecaster;
    DiffusionDecoder decoder;
    AnchorScorer scorer;
    Vocabulary vocab;
    AnchorSet anchors;  // fitted in stage 2
};

// ---------------------------------------------------------------------------
// checkpoint format "SOQC"

constexpr uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

inline void write_string(std::ostream& os, const std::string& s) {
    detail::write_raw<uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const auto n = detail::read_raw<uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw DataError("checkpoint: truncated string");
    return s;
}

inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
    detail::write_raw<uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_doubles(std::istream& is) {
    const auto n = detail::read_raw<uint64_t>(is);
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated payload");
    return v;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Pipeline& model, const nn::AdamW* optimizer, int stage,
                            const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot write " + path);
    os.write("SOQC", 4);
    detail::write_raw<uint32_t>(os, kCheckpointVersion);
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(stage));
    detail::write_raw<uint64_t>(os, config_hash(model.cfg));

    detail::write_raw<uint64_t>(os, model.params.params().size());
    for (const auto& [name, p] : model.params.params()) {
        ckpt_detail::write_string(os, name);
        detail::write_raw<uint64_t>(os, p->shape.size());
        for (int64_t d : p->shape) detail::write_raw<int64_t>(os, d);
        ckpt_detail::write_doubles(os, p->val);
    }

    const uint8_t has_opt = optimizer ? 1 : 0;
    detail::write_raw<uint8_t>(os, has_opt);
    if (optimizer) {
        detail::write_raw<int64_t>(os, optimizer->step_count());
        detail::write_raw<uint64_t>(os, optimizer->moments().size());
        for (const auto& [name, m] : optimizer->moments()) {
            ckpt_detail::write_string(os, name);
            ckpt_detail::write_doubles(os, m.m);
            ckpt_detail::write_doubles(os, m.v);
        }
    }

    detail::write_raw<uint64_t>(os, model.anchors.anchors.size());
    if (!model.anchors.anchors.empty()) {
        detail::write_raw<uint32_t>(os, static_cast<uint32_t>(model.anchors.anchors[0].size()));
        for (const auto& a : model.anchors.anchors)
            ckpt_detail::write_doubles(os, [&] {
                std::vector<double> flat;
                for (const auto& w : a) {
                    flat.push_back(w[0]);
                    flat.push_back(w[1]);
                }
                return flat;
            }());
        detail::write_raw<uint32_t>(os, static_cast<uint32_t>(model.anchors.kmeans_iterations));
        detail::write_raw<double>(os, model.anchors.inertia);
        detail::write_raw<uint64_t>(os, model.anchors.seed);
    }
    if (!os) throw DataError("checkpoint: write failed " + path);
}

// returns the stored stage tag
inline int load_checkpoint(Pipeline& model, nn::AdamW* optimizer, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot read " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SOQC", 4) != 0) throw DataError("checkpoint: bad magic");
    if (detail::read_raw<uint32_t>(is) != kCheckpointVersion)
        throw DataError("checkpoint: unsupported version");
    const int stage = static_cast<int>(detail::read_raw<uint32_t>(is));
    const uint64_t hash = detail::read_raw<uint64_t>(is);
    if (hash != config_hash(model.cfg))
        throw ConfigError("checkpoint: config hash mismatch (refusing to load)");

    const auto count = detail::read_raw<uint64_t>(is);
    for (uint64_t i = 0; i < count; ++i) {
        const std::string name = ckpt_detail::read_string(is);
        const auto ndims = detail::read_raw<uint64_t>(is);
        ad::Shape shape(ndims);
        for (auto& d : shape) d = detail::read_raw<int64_t>(is);
        auto vals = ckpt_detail::read_doubles(is);
        auto p = model.params.find(name);
        SOQ_REQUIRE(p->shape == shape && p->val.size() == vals.size(),
                    "checkpoint: shape mismatch for " + name);
        p->val = std::move(vals);
    }

    const auto has_opt = detail::read_raw<uint8_t>(is);
    if (has_opt) {
        const auto step_count = detail::read_raw<int64_t>(is);
        const auto mcount = detail::read_raw<uint64_t>(is);
        if (optimizer) {
            optimizer->set_step_count(step_count);
            optimizer->moments().clear();
        }
        for (uint64_t i = 0; i < mcount; ++i) {
            const std::string name = ckpt_detail::read_string(is);
            auto m = ckpt_detail::read_doubles(is);
            auto v = ckpt_detail::read_doubles(is);
            if (optimizer) optimizer->moments()[name] = {std::move(m), std::move(v)};
        }
    }

    model.anchors = AnchorSet{};
    const auto anchor_count = detail::read_raw<uint64_t>(is);
    if (anchor_count > 0) {
        const auto steps = detail::read_raw<uint32_t>(is);
        for (uint64_t a = 0; a < anchor_count; ++a) {
            auto flat = ckpt_detail::read_doubles(is);
            SOQ_REQUIRE(flat.size() == steps * 2ULL, "checkpoint: anchor payload");
            Trajectory t(steps);
            for (uint32_t k = 0; k < steps; ++k) t[k] = {flat[k * 2], flat[k * 2 + 1]};
            model.anchors.anchors.push_back(std::move(t));
        }
        model.anchors.kmeans_iterations = static_cast<int>(detail::read_raw<uint32_t>(is));
        model.anchors.inertia = detail::read_raw<double>(is);
        model.anchors.seed = detail::read_raw<uint64_t>(is);
    }
    return stage;
}

}  // namespace soq
