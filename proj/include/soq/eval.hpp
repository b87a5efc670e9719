// SPDX-License-Identifier: Apache-2.0
//
// Evaluation reports (current-frame mIoU, forecast mIoU at 1/2/3 s with the
// frame-exclusion rule, text exact-match/F1 per task, open-loop planning
// metrics) and the ablation matrix runner.
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "soq/train.hpp"

namespace soq {

struct TextScore {
    double exact = 0.0;
    double f1 = 0.0;
    int count = 0;
};

struct EvalReport {
    double miou_current = 0.0;
    std::array<double, 3> miou_forecast{0, 0, 0};  // 1s, 2s, 3s
    double miou_forecast_avg = 0.0;
    std::map<std::string, TextScore> text;  // per task tag
    std::array<double, 3> l2{0, 0, 0};
    double l2_avg = 0.0;
    std::array<double, 3> collision{0, 0, 0};
    double collision_avg = 0.0;
    int perception_samples = 0;
    int forecast_samples = 0;
    int plan_samples = 0;

    json to_json() const {
        json j;
        j["miou"] = {{"current", miou_current},
                     {"forecast_1s", miou_forecast[0]},
                     {"forecast_2s", miou_forecast[1]},
                     {"forecast_3s", miou_forecast[2]},
                     {"forecast_avg", miou_forecast_avg}};
        json t;
        for (const auto& [task, score] : text)
            t[task] = {{"exact_match", score.exact}, {"token_f1", score.f1}, {"count", score.count}};
        j["text"] = t;
        j["planning"] = {{"l2_1s", l2[0]},           {"l2_2s", l2[1]},
                         {"l2_3s", l2[2]},           {"l2_avg", l2_avg},
                         {"collision_1s", collision[0]}, {"collision_2s", collision[1]},
                         {"collision_3s", collision[2]}, {"collision_avg", collision_avg}};
        j["samples"] = {{"perception", perception_samples},
                        {"forecast", forecast_samples},
                        {"plan", plan_samples}};
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "== evaluation report ==\n";
        os << "miou current        " << miou_current << "\n";
        os << "miou forecast 1s/2s/3s/avg  " << miou_forecast[0] << " " << miou_forecast[1] << " "
           << miou_forecast[2] << " " << miou_forecast_avg << "\n";
        for (const auto& [task, score] : text)
            os << "text " << task << "  exact " << score.exact << "  f1 " << score.f1 << "  n "
               << score.count << "\n";
        os << "plan L2 1s/2s/3s/avg  " << l2[0] << " " << l2[1] << " " << l2[2] << " " << l2_avg
           << "\n";
        os << "plan collision 1s/2s/3s/avg  " << collision[0] << " " << collision[1] << " "
           << collision[2] << " " << collision_avg << "\n";
        return os.str();
    }
};

// voxelize a decoded point set (argmax class per point) into the grid template
inline VoxelGrid points_to_grid(const LayerPoints& lp, const VoxelGrid& tmpl) {
    OccupancyPointSet pred;
    pred.num_classes = tmpl.num_classes;
    const int64_t m = lp.points->rows();
    const int64_t C = lp.logits->cols();
    for (int64_t i = 0; i < m; ++i) {
        int best = 0;
        for (int64_t c = 1; c < C; ++c)
            if (lp.logits->val[i * C + c] > lp.logits->val[i * C + best]) best = static_cast<int>(c);
        pred.push({lp.points->val[i * 3], lp.points->val[i * 3 + 1], lp.points->val[i * 3 + 2]},
                  best);
    }
    return voxelize_points(pred, tmpl);
}

struct EvalOptions {
    bool perception = true;
    bool language = true;
    bool forecasting = true;
    bool planning = true;
    int max_samples = 0;  // 0 = all
};

inline EvalReport evaluate(Pipeline& model, const std::vector<Scene>& scenes,
                           const EvalOptions& opt = {}) {
    const RunConfig& cfg = model.cfg;
    EvalReport rep;
    double miou_cur_sum = 0.0;
    std::array<double, 3> miou_fore_sum{0, 0, 0};
    std::array<double, 3> l2_sum{0, 0, 0}, coll_sum{0, 0, 0};
    std::map<std::string, std::pair<double, double>> text_sum;  // exact, f1
    std::map<std::string, int> text_count;

    auto schedule = NoiseSchedule::cosine(cfg.planner.diffusion_steps, cfg.planner.denoise_steps);

    int processed = 0;
    for (const auto& scene : scenes) {
        const int frames = static_cast<int>(scene.frames.size());
        for (int t0 = cfg.scene.history - 1; t0 + cfg.scene.horizon < frames; ++t0) {
            if (opt.max_samples > 0 && processed >= opt.max_samples) break;
            ++processed;
            auto fwd = model.encode_sample(scene, t0);
            const auto& queries = fwd.enc.final_queries;

            if (opt.perception) {
                auto grid = points_to_grid(fwd.enc.layers.back(), scene.frames[t0].gt);
                miou_cur_sum += miou(grid, scene.frames[t0].gt).mean;
                ++rep.perception_samples;
            }

            auto tokens = model.connector.align_tokens(queries.embeddings, queries.positions);
            ad::Var global = cfg.connector.global_tokens > 0
                                 ? model.connector.global_attend(tokens.tokens)
                                 : nullptr;
            const EgoState& ego = scene.frames[t0].state;

            if (opt.language) {
                for (TaskTag task : {TaskTag::Caption, TaskTag::Qa, TaskTag::PlanReason}) {
                    const auto& ann = annotation_for(scene, t0, task);
                    auto res = model.lm.generate(tokens.tokens, global, ego,
                                                 model.vocab.encode(ann.prompt), 24);
                    const std::string pred = model.vocab.decode(res.ids);
                    text_sum[task_name(task)].first += exact_match(pred, ann.answer) ? 1.0 : 0.0;
                    text_sum[task_name(task)].second += token_f1(pred, ann.answer);
                    ++text_count[task_name(task)];
                }
            }

            // forecasting honors the first-five / last-seven exclusion rule
            const bool forecast_eligible = t0 >= 5 && t0 <= frames - 8;
            if (opt.forecasting && forecast_eligible) {
                auto caption_seq = model.lm.assemble_sequence(
                    tokens.tokens, global, ego,
                    model.vocab.encode(annotation_for(scene, t0, TaskTag::Caption).prompt), {});
                auto caption_out = model.lm.forward(caption_seq);
                auto reasoned = ad::slice_rows(caption_out.hidden, 0, caption_seq.occ_count);
                auto fused = model.forecaster.residual_fuse(reasoned, queries);
                auto rolled = model.forecaster.rollout(fused, ego, cfg.scene.horizon);
                // 1s, 2s, 3s at dt=0.5 -> steps 2, 4, 6
                for (int h = 0; h < 3; ++h) {
                    const int t = static_cast<int>(std::llround((h + 1) * 1.0 / cfg.scene.dt));
                    if (t < 1 || t > static_cast<int>(rolled.size())) continue;
                    auto grid = points_to_grid(rolled[t - 1].points, scene.frames[t0 + t].gt);
                    miou_fore_sum[h] += miou(grid, scene.frames[t0 + t].gt).mean;
                }
                ++rep.forecast_samples;
            }

            if (opt.planning && !model.anchors.anchors.empty()) {
                const auto& plan_ann = annotation_for(scene, t0, TaskTag::PlanReason);
                auto gen = model.lm.generate(tokens.tokens, global, ego,
                                             model.vocab.encode(plan_ann.prompt), 8);
                PlannerContext ctx;
                ctx.scene_queries = queries.embeddings;
                ctx.ego_token = model.lm.ego_token(ego);
                ctx.reasoning_tokens = gen.reasoning_hidden;
                auto logits = model.scorer(model.anchors, ctx);
                auto denoiser = [&](const std::vector<double>& noised, int step) {
                    auto x0 = model.decoder(
                        ad::constant({static_cast<int64_t>(model.anchors.size()),
                                      static_cast<int64_t>(cfg.planner.plan_steps) * 2},
                                     noised),
                        ctx, step);
                    return x0->val;
                };
                auto traj = plan_with_denoiser(model.anchors, schedule, denoiser, logits->val,
                                               cfg.seed ^ (static_cast<uint64_t>(t0) << 8) ^
                                                   scene.seed,
                                               cfg.planner.plan_steps);
                Trajectory expert(scene.frames[t0].expert.begin(), scene.frames[t0].expert.end());
                auto m = planning_metrics(traj, expert, scene, t0);
                for (int h = 0; h < 3; ++h) {
                    l2_sum[h] += m.l2[h];
                    coll_sum[h] += m.collision[h];
                }
                ++rep.plan_samples;
            }
        }
    }

    if (rep.perception_samples > 0) rep.miou_current = miou_cur_sum / rep.perception_samples;
    if (rep.forecast_samples > 0) {
        for (int h = 0; h < 3; ++h) rep.miou_forecast[h] = miou_fore_sum[h] / rep.forecast_samples;
        rep.miou_forecast_avg =
            (rep.miou_forecast[0] + rep.miou_forecast[1] + rep.miou_forecast[2]) / 3.0;
    }
    for (const auto& [task, sums] : text_sum) {
        TextScore score;
        score.count = text_count[task];
        score.exact = sums.first / score.count;
        score.f1 = sums.second / score.count;
        rep.text[task] = score;
    }
    if (rep.plan_samples > 0) {
        for (int h = 0; h < 3; ++h) {
            rep.l2[h] = l2_sum[h] / rep.plan_samples;
            rep.collision[h] = coll_sum[h] / rep.plan_samples;
        }
        rep.l2_avg = (rep.l2[0] + rep.l2[1] + rep.l2[2]) / 3.0;
        rep.collision_avg = (rep.collision[0] + rep.collision[1] + rep.collision[2]) / 3.0;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// ablations

inline RunConfig apply_ablation_flag(RunConfig cfg, const std::string& flag) {
    if (flag == "base") {
    } else if (flag == "no-distill") {
        cfg.distill_enabled = false;
    } else if (flag == "no-norm") {
        cfg.distill_normalized = false;
    } else if (flag == "no-global") {
        cfg.connector.global_tokens = 0;
    } else if (flag == "no-residual-query") {
        cfg.forecaster.use_query_residual = false;
    } else if (flag == "no-residual-token") {
        cfg.forecaster.use_token_branch = false;
    } else if (flag == "no-llm-scoring") {
        cfg.planner.llm_scoring = false;
    } else if (flag == "no-traj-reason") {
        cfg.planner.use_reason_fusion = false;
    } else if (flag == "no-traj-scene") {
        cfg.planner.use_scene_fusion = false;
    } else if (flag == "no-traj-ego") {
        cfg.planner.use_ego_fusion = false;
    } else if (flag == "bidirectional-prefix") {
        cfg.lm.bidirectional_prefix = true;
    } else if (flag.rfind("queries=", 0) == 0) {
        cfg.encoder.num_queries = std::stoi(flag.substr(8));
    } else {
        throw ConfigError("ablation: unknown flag '" + flag + "'");
    }
    cfg.finalize();
    return cfg;
}

struct AblationRow {
    std::string flag;
    EvalReport report;
};

// trains all three stages per flag (with the config's step caps) and evaluates
inline std::vector<AblationRow> ablation_matrix(const RunConfig& base,
                                                const std::vector<std::string>& flags,
                                                const std::vector<Scene>& scenes,
                                                const std::string& out_dir) {
    std::vector<std::string> all = flags;
    if (all.empty()) all.push_back("base");
    std::vector<AblationRow> rows;
    for (const auto& flag : all) {
        RunConfig cfg = apply_ablation_flag(base, flag);
        Pipeline model(cfg);
        Trainer trainer(model);
        namespace fs = std::filesystem;
        const std::string run_dir = (fs::path(out_dir) / ("ablate_" + flag)).string();
        auto s1 = trainer.run_stage(1, scenes, run_dir);
        auto s2 = trainer.run_stage(2, scenes, run_dir, s1.checkpoint_path);
        (void)trainer.run_stage(3, scenes, run_dir, s2.checkpoint_path);
        AblationRow row;
        row.flag = flag;
        row.report = evaluate(model, scenes);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "flag                 | miou_cur | fore_avg | caption_em | plan_em | L2_avg | coll_avg\n";
    os << "---------------------+----------+----------+------------+---------+--------+---------\n";
    for (const auto& r : rows) {
        auto text_of = [&](const char* task) {
            auto it = r.report.text.find(task);
            return it == r.report.text.end() ? 0.0 : it->second.exact;
        };
        os << r.flag;
        for (size_t i = r.flag.size(); i < 21; ++i) os << ' ';
        os << "| " << r.report.miou_current << " | " << r.report.miou_forecast_avg << " | "
           << text_of("caption") << " | " << text_of("plan-reason") << " | " << r.report.l2_avg
           << " | " << r.report.collision_avg << "\n";
    }
    return os.str();
}

}  // namespace soq
