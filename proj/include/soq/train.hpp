// SPDX-License-Identifier: Apache-2.0
//
// Three-stage training: (1) occupancy encoder + connector with occupancy and
// distillation losses, (2) frozen perception, train connector, global tokens
// and the forecasting/planning heads, (3) joint training of everything but
// the frozen teacher. Deterministic: fixed seeds, fixed order, single thread.
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "soq/pipeline.hpp"
#include "soq/plot.hpp"

namespace soq {

// unweighted sum of the four loss components; a component required by the
// stage must be present
inline ad::Var total_loss(const std::optional<ad::Var>& occ, const std::optional<ad::Var>& lm,
                          const std::optional<ad::Var>& fore, const std::optional<ad::Var>& diff,
                          int stage) {
    auto require = [](const std::optional<ad::Var>& v, const char* name) {
        if (!v || !*v) throw InvalidArgument(std::string("total_loss: missing component ") + name);
    };
    if (stage == 1) {
        require(occ, "occ");
    } else if (stage == 2) {
        require(lm, "lm");
        require(fore, "fore");
        require(diff, "diff");
    } else if (stage == 3) {
        require(occ, "occ");
        require(lm, "lm");
        require(fore, "fore");
        require(diff, "diff");
    } else {
        throw InvalidArgument("total_loss: stage must be 1, 2 or 3");
    }
    ad::Var total;
    for (const auto& part : {occ, lm, fore, diff}) {
        if (!part || !*part) continue;
        total = total ? ad::add(total, *part) : *part;
    }
    return total;
}

inline void apply_stage_freeze(Pipeline& model, int stage) {
    auto& ps = model.params;
    if (stage == 1) {
        ps.set_all_trainable(false);
        ps.set_trainable("student.", true);
        ps.set_trainable("encoder.", true);
        ps.set_trainable("connector.", true);
        ps.set_trainable("connector.global_", false);  // global queries join in stage 2
    } else if (stage == 2) {
        ps.set_all_trainable(false);
        ps.set_trainable("connector.", true);
        ps.set_trainable("forecaster.", true);
        ps.set_trainable("planner.", true);
    } else if (stage == 3) {
        // the toy LM is trained directly here (the paper applies LoRA to a
        // frozen LLM instead; recorded in the paper preset fields)
        ps.set_all_trainable(true);
    } else {
        throw InvalidArgument("apply_stage_freeze: bad stage");
    }
    ps.set_trainable("teacher.", false);
}

// ---------------------------------------------------------------------------
// dataset helpers

inline std::vector<Scene> load_scenes(const std::string& data_dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(data_dir)) throw DataError("load_scenes: no such directory " + data_dir);
    std::vector<std::string> dirs;
    for (const auto& entry : fs::directory_iterator(data_dir))
        if (entry.is_directory() && fs::exists(entry.path() / "manifest.jsonl"))
            dirs.push_back(entry.path().string());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw DataError("load_scenes: no scenes under " + data_dir);
    std::vector<Scene> scenes;
    scenes.reserve(dirs.size());
    for (const auto& d : dirs) scenes.push_back(load_scene(d));
    return scenes;
}

struct TrainSample {
    int scene_index = 0;
    int t0 = 0;
};

inline std::vector<TrainSample> make_samples(const std::vector<Scene>& scenes,
                                             const RunConfig& cfg) {
    std::vector<TrainSample> out;
    for (size_t s = 0; s < scenes.size(); ++s) {
        const int frames = static_cast<int>(scenes[s].frames.size());
        for (int t0 = cfg.scene.history - 1; t0 + cfg.scene.horizon < frames; ++t0)
            out.push_back({static_cast<int>(s), t0});
    }
    SOQ_REQUIRE(!out.empty(), "make_samples: no usable samples");
    return out;
}

inline const LanguageAnnotation& annotation_for(const Scene& scene, int frame, TaskTag task) {
    for (const auto& a : scene.annotations)
        if (a.frame == frame && a.task == task) return a;
    throw DataError("annotation_for: missing annotation");
}

// ---------------------------------------------------------------------------
// trainer

struct StageLogs {
    std::vector<double> total;
    std::vector<double> occ, lm, fore, diff;
};

struct StageResult {
    std::string checkpoint_path;
    StageLogs logs;
};

class Trainer {
  public:
    Trainer(Pipeline& model) : model_(model), cfg_(model.cfg) {}

    // cached frozen-perception outputs for stage 2
    struct CachedPerception {
        std::vector<double> q_final, p_final;
        std::vector<double> q0, p0;
    };

    const CachedPerception& perception(const Scene& scene, int t0, bool frozen) {
        const auto key = std::make_pair(&scene, t0);
        auto it = cache_.find(key);
        if (frozen && it != cache_.end()) return it->second;
        auto fwd = model_.encode_sample(scene, t0);
        CachedPerception entry;
        entry.q_final = fwd.enc.final_queries.embeddings->val;
        entry.p_final = fwd.enc.final_queries.positions->val;
        entry.q0 = fwd.enc.initial.embeddings->val;
        entry.p0 = fwd.enc.initial.positions->val;
        return cache_[key] = std::move(entry);
    }

    void invalidate_cache() { cache_.clear(); }

    // per-sample loss graph for a stage; component values reported through `logs`
    ad::Var sample_loss(int stage, const Scene& scene, int t0, Rng& rng,
                        std::array<double, 4>* component_values = nullptr) {
        std::optional<ad::Var> occ_term, lm_term, fore_term, diff_term;
        QuerySet queries;

        if (stage == 1 || stage == 3) {
            auto fwd = model_.encode_sample(scene, t0);
            occ_term = model_.occupancy_loss(scene, t0, fwd);
            queries = fwd.enc.final_queries;
        } else {
            const auto& cached = perception(scene, t0, /*frozen=*/true);
            const int64_t n = cfg_.encoder.num_queries;
            queries.embeddings = ad::constant({n, cfg_.encoder.dim}, cached.q_final);
            queries.positions = ad::constant({n, 3}, cached.p_final);
        }

        if (stage >= 2) {
            const EgoState& ego = scene.frames[t0].state;
            auto tokens = model_.connector.align_tokens(queries.embeddings, queries.positions);
            ad::Var global = cfg_.connector.global_tokens > 0
                                 ? model_.connector.global_attend(tokens.tokens)
                                 : nullptr;

            // language loss over the three task passes; the caption pass
            // supplies reasoned occupancy tokens, the plan pass supplies T_r
            ad::Var lm_sum;
            ad::Var reasoned_occ, reasoning_tokens;
            for (TaskTag task : {TaskTag::Caption, TaskTag::Qa, TaskTag::PlanReason}) {
                const auto& ann = annotation_for(scene, t0, task);
                auto seq = model_.lm.assemble_sequence(tokens.tokens, global, ego,
                                                       model_.vocab.encode(ann.prompt),
                                                       model_.vocab.encode(ann.answer));
                auto out = model_.lm.forward(seq);
                auto loss = model_.lm.lm_loss(out.logits, seq);
                lm_sum = lm_sum ? ad::add(lm_sum, loss) : loss;
                if (task == TaskTag::Caption)
                    reasoned_occ = ad::slice_rows(out.hidden, 0, seq.occ_count);
                if (task == TaskTag::PlanReason)
                    reasoning_tokens = Pipeline::answer_hidden(seq, out);
            }
            lm_term = ad::scale(lm_sum, 1.0 / 3.0);

            auto fused = model_.forecaster.residual_fuse(reasoned_occ, queries);
            auto frames = model_.forecaster.rollout(fused, ego, cfg_.scene.horizon);
            fore_term = model_.forecaster.forecast_loss(frames, scene, t0);

            SOQ_REQUIRE(!model_.anchors.anchors.empty(), "sample_loss: anchors not fitted");
            PlannerContext ctx;
            ctx.scene_queries = queries.embeddings;
            ctx.ego_token = model_.lm.ego_token(ego);
            ctx.reasoning_tokens = reasoning_tokens;
            Trajectory expert(scene.frames[t0].expert.begin(), scene.frames[t0].expert.end());
            const int positive = positive_anchor_index(model_.anchors, expert);
            auto bce = scorer_bce(model_.scorer(model_.anchors, ctx), positive);
            auto schedule = NoiseSchedule::cosine(cfg_.planner.diffusion_steps,
                                                  cfg_.planner.denoise_steps);
            auto l1 = diffusion_train_loss(model_.decoder, model_.anchors, expert, schedule, ctx,
                                           rng);
            diff_term = ad::add(bce, l1);
        }

        if (component_values) {
            auto value_of = [](const std::optional<ad::Var>& v) {
                return (v && *v) ? (*v)->val[0] : 0.0;
            };
            *component_values = {value_of(occ_term), value_of(lm_term), value_of(fore_term),
                                 value_of(diff_term)};
        }
        return total_loss(occ_term, lm_term, fore_term, diff_term, stage);
    }

    void fit_anchors_from(const std::vector<Scene>& scenes) {
        std::vector<Trajectory> trajs;
        for (const auto& scene : scenes)
            for (int t0 = cfg_.scene.history - 1;
                 t0 + cfg_.scene.horizon < static_cast<int>(scene.frames.size()); ++t0)
                trajs.push_back(Trajectory(scene.frames[t0].expert.begin(),
                                           scene.frames[t0].expert.end()));
        model_.anchors = fit_anchors(trajs, cfg_.planner.anchor_count, cfg_.seed ^ 0xa17c04);
    }

    StageResult run_stage(int stage, const std::vector<Scene>& scenes, const std::string& out_dir,
                          const std::string& prev_checkpoint = "") {
        namespace fs = std::filesystem;
        fs::create_directories(out_dir);
        nn::AdamW optimizer(cfg_.base_lr, 0.9, 0.999, 1e-8, cfg_.weight_decay);
        if (stage >= 2) {
            if (prev_checkpoint.empty())
                throw DataError("run_stage: stages 2-3 need the prior stage checkpoint");
            const int prev_stage = load_checkpoint(model_, nullptr, prev_checkpoint);
            if (prev_stage < stage - 1)
                throw DataError("run_stage: checkpoint is from an earlier stage than required");
        }
        apply_stage_freeze(model_, stage);
        invalidate_cache();
        if (stage == 2 && model_.anchors.anchors.empty()) fit_anchors_from(scenes);
        if (stage == 3 && model_.anchors.anchors.empty())
            throw DataError("run_stage: stage 3 requires anchors from stage 2");

        auto samples = make_samples(scenes, cfg_);
        const auto& schedule = cfg_.stages[static_cast<size_t>(stage - 1)];
        const int steps_per_epoch =
            (static_cast<int>(samples.size()) + cfg_.batch_size - 1) / cfg_.batch_size;
        int64_t total_steps = static_cast<int64_t>(schedule.epochs) * steps_per_epoch;
        if (schedule.max_steps > 0) total_steps = std::min<int64_t>(total_steps, schedule.max_steps);

        StageResult result;
        Rng order_rng(cfg_.seed ^ (0xabcdULL + stage));
        Rng noise_rng(cfg_.seed ^ (0x1234ULL + stage));
        int64_t step = 0;
        for (int epoch = 0; epoch < schedule.epochs && step < total_steps; ++epoch) {
            // deterministic shuffle
            for (size_t i = samples.size(); i > 1; --i)
                std::swap(samples[i - 1], samples[order_rng.uniform_int(i)]);
            for (size_t b = 0; b < samples.size() && step < total_steps;
                 b += static_cast<size_t>(cfg_.batch_size)) {
                model_.params.zero_grad();
                const size_t batch_end = std::min(samples.size(), b + cfg_.batch_size);
                const double inv = 1.0 / static_cast<double>(batch_end - b);
                std::array<double, 4> comp_sum{0, 0, 0, 0};
                double loss_sum = 0.0;
                for (size_t i = b; i < batch_end; ++i) {
                    const auto& s = samples[i];
                    std::array<double, 4> comp{};
                    auto loss = ad::scale(
                        sample_loss(stage, scenes[s.scene_index], s.t0, noise_rng, &comp), inv);
                    ad::backward(loss);
                    loss_sum += loss->val[0];
                    for (int c = 0; c < 4; ++c) comp_sum[c] += comp[c] * inv;
                }
                optimizer.step(model_.params,
                               nn::cosine_decay_lr(cfg_.base_lr, step, total_steps));
                result.logs.total.push_back(loss_sum);
                result.logs.occ.push_back(comp_sum[0]);
                result.logs.lm.push_back(comp_sum[1]);
                result.logs.fore.push_back(comp_sum[2]);
                result.logs.diff.push_back(comp_sum[3]);
                ++step;
            }
            const std::string epoch_path =
                (fs::path(out_dir) / ("stage" + std::to_string(stage) + "_epoch" +
                                      std::to_string(epoch) + ".soqc"))
                    .string();
            save_checkpoint(model_, &optimizer, stage, epoch_path);
        }

        result.checkpoint_path =
            (fs::path(out_dir) / ("stage" + std::to_string(stage) + ".soqc")).string();
        save_checkpoint(model_, &optimizer, stage, result.checkpoint_path);

        // loss curve plot per stage
        if (result.logs.total.size() >= 2) {
            Plot plot;
            plot.curve(result.logs.total, {200, 60, 40});
            plot.save((fs::path(out_dir) / ("stage" + std::to_string(stage) + "_loss.png")).string());
        }
        return result;
    }

  private:
    Pipeline& model_;
    const RunConfig& cfg_;
    std::map<std::pair<const Scene*, int>, CachedPerception> cache_;
};

}  // namespace soq
