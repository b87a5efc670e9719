// SPDX-License-Identifier: Apache-2.0
//
// soq command line: data generation, staged training, evaluation, planning
// and the ablation matrix. Exit codes: 0 ok, 2 config error, 3 data error.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "soq/eval.hpp"
#include "soq/train.hpp"

namespace fs = std::filesystem;
using namespace soq;

namespace {

RunConfig config_from_option(const std::string& config_path) {
    if (config_path.empty()) return desk_preset();
    return load_run_config(config_path);
}

std::pair<uint64_t, uint64_t> parse_seed_range(const std::string& text) {
    const auto pos = text.find("..");
    if (pos == std::string::npos) {
        const uint64_t s = std::stoull(text);
        return {s, s};
    }
    const uint64_t a = std::stoull(text.substr(0, pos));
    const uint64_t b = std::stoull(text.substr(pos + 2));
    if (b < a) throw ConfigError("gen-data: bad seed range " + text);
    return {a, b};
}

std::string scene_dir_name(uint64_t seed) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05llu", static_cast<unsigned long long>(seed));
    return buf;
}

int cmd_gen_data(const std::string& seeds, const std::string& config_path,
                 const std::string& out) {
    auto cfg = config_from_option(config_path);
    const auto [lo, hi] = parse_seed_range(seeds);
    const std::string out_dir = resolve_out_dir(out);
    fs::create_directories(out_dir);
    for (uint64_t seed = lo; seed <= hi; ++seed) {
        auto scene = generate_scene(seed, cfg.scene);
        save_scene(scene, (fs::path(out_dir) / scene_dir_name(seed)).string());
        std::cout << "wrote " << scene_dir_name(seed) << "\n";
    }
    return 0;
}

void write_stage_logs(const StageResult& res, const std::string& out_dir, int stage) {
    std::ofstream os(fs::path(out_dir) / ("stage" + std::to_string(stage) + "_log.jsonl"));
    for (size_t i = 0; i < res.logs.total.size(); ++i) {
        json j;
        j["step"] = i;
        j["total"] = res.logs.total[i];
        j["occ"] = res.logs.occ[i];
        j["lm"] = res.logs.lm[i];
        j["fore"] = res.logs.fore[i];
        j["diff"] = res.logs.diff[i];
        os << j.dump() << "\n";
    }
}

int cmd_train(int stage, const std::string& config_path, const std::string& data,
              const std::string& out, const std::string& init_ckpt) {
    auto cfg = config_from_option(config_path);
    auto scenes = load_scenes(data);
    const std::string out_dir = resolve_out_dir(out);
    Pipeline model(cfg);
    Trainer trainer(model);
    auto result = trainer.run_stage(stage, scenes, out_dir, init_ckpt);
    write_stage_logs(result, out_dir, stage);
    std::cout << "stage " << stage << " finished; checkpoint " << result.checkpoint_path << "\n";
    if (!result.logs.total.empty())
        std::cout << "final loss " << result.logs.total.back() << "\n";
    return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& config_path, const std::string& data,
                 const std::string& out, int max_samples) {
    auto cfg = config_from_option(config_path);
    auto scenes = load_scenes(data);
    Pipeline model(cfg);
    load_checkpoint(model, nullptr, ckpt);
    EvalOptions opt;
    opt.max_samples = max_samples;
    auto report = evaluate(model, scenes, opt);
    std::cout << report.to_text();
    if (!out.empty()) {
        const std::string out_dir = resolve_out_dir(out);
        fs::create_directories(out_dir);
        std::ofstream js(fs::path(out_dir) / "report.json");
        js << report.to_json().dump(2) << "\n";
        std::ofstream ts(fs::path(out_dir) / "report.txt");
        ts << report.to_text();
    }
    return 0;
}

int cmd_plan(const std::string& scene_dir, const std::string& ckpt,
             const std::string& config_path, int frame, const std::string& out) {
    auto cfg = config_from_option(config_path);
    auto scene = load_scene(scene_dir);
    Pipeline model(cfg);
    load_checkpoint(model, nullptr, ckpt);
    if (model.anchors.anchors.empty())
        throw DataError("plan: checkpoint has no fitted anchors (run stage 2 first)");
    const int t0 = frame >= 0 ? frame : cfg.scene.history - 1;
    if (t0 + cfg.scene.plan_steps >= static_cast<int>(scene.frames.size()))
        throw DataError("plan: frame has no full planning horizon");

    auto fwd = model.encode_sample(scene, t0);
    const auto& queries = fwd.enc.final_queries;
    auto tokens = model.connector.align_tokens(queries.embeddings, queries.positions);
    ad::Var global = cfg.connector.global_tokens > 0 ? model.connector.global_attend(tokens.tokens)
                                                     : nullptr;
    const EgoState& ego = scene.frames[t0].state;
    const auto& ann = annotation_for(scene, t0, TaskTag::PlanReason);
    auto gen = model.lm.generate(tokens.tokens, global, ego, model.vocab.encode(ann.prompt), 8);
    PlannerContext ctx;
    ctx.scene_queries = queries.embeddings;
    ctx.ego_token = model.lm.ego_token(ego);
    ctx.reasoning_tokens = gen.reasoning_hidden;
    auto logits = model.scorer(model.anchors, ctx);
    auto schedule = NoiseSchedule::cosine(cfg.planner.diffusion_steps, cfg.planner.denoise_steps);
    auto denoiser = [&](const std::vector<double>& noised, int step) {
        return model
            .decoder(ad::constant({static_cast<int64_t>(model.anchors.size()),
                                   static_cast<int64_t>(cfg.planner.plan_steps) * 2},
                                  noised),
                     ctx, step)
            ->val;
    };
    auto traj = plan_with_denoiser(model.anchors, schedule, denoiser, logits->val,
                                   cfg.seed ^ scene.seed ^ static_cast<uint64_t>(t0),
                                   cfg.planner.plan_steps);
    Trajectory expert(scene.frames[t0].expert.begin(), scene.frames[t0].expert.end());
    auto metrics = planning_metrics(traj, expert, scene, t0);

    json j;
    j["frame"] = t0;
    j["reasoning"] = model.vocab.decode(gen.ids);
    j["trajectory"] = traj;
    j["expert"] = expert;
    j["l2"] = {metrics.l2[0], metrics.l2[1], metrics.l2[2]};
    j["l2_avg"] = metrics.l2_avg;
    j["collision"] = {metrics.collision[0], metrics.collision[1], metrics.collision[2]};
    std::cout << j.dump(2) << "\n";

    const std::string out_dir = resolve_out_dir(out.empty() ? scene_dir : out);
    fs::create_directories(out_dir);
    {
        std::ofstream os(fs::path(out_dir) / "plan.json");
        os << j.dump(2) << "\n";
    }
    // overhead plot: occupied cells at the ego layer, expert and planned paths
    Plot plot(480, 480);
    std::vector<std::array<double, 2>> occupied;
    const auto& gt = scene.frames[t0].gt;
    const int iz = static_cast<int>((cfg.scene.ego_z - gt.origin[2]) / gt.resolution);
    for (int ix = 0; ix < gt.nx; ++ix)
        for (int iy = 0; iy < gt.ny; ++iy)
            if (gt.at(ix, iy, iz) != gt.free_index()) {
                const auto c = gt.cell_center(ix, iy, iz);
                occupied.push_back({c[0], c[1]});
            }
    plot.path(occupied, {170, 170, 170}, 12.0, /*points_only=*/true);
    plot.path(std::vector<std::array<double, 2>>(expert.begin(), expert.end()), {40, 160, 60});
    plot.path(std::vector<std::array<double, 2>>(traj.begin(), traj.end()), {200, 60, 40});
    plot.save((fs::path(out_dir) / "plan_overhead.png").string());
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& data, const std::string& out,
               const std::string& flags_csv) {
    auto cfg = config_from_option(config_path);
    auto scenes = load_scenes(data);
    std::vector<std::string> flags;
    std::string token;
    std::istringstream ss(flags_csv);
    while (std::getline(ss, token, ','))
        if (!token.empty()) flags.push_back(token);
    const std::string out_dir = resolve_out_dir(out);
    fs::create_directories(out_dir);
    auto rows = ablation_matrix(cfg, flags, scenes, out_dir);
    const std::string table = ablation_table(rows);
    std::cout << table;
    std::ofstream ts(fs::path(out_dir) / "ablation_table.txt");
    ts << table;
    json j = json::array();
    for (const auto& row : rows) {
        json r;
        r["flag"] = row.flag;
        r["report"] = row.report.to_json();
        j.push_back(r);
    }
    std::ofstream js(fs::path(out_dir) / "ablation_table.json");
    js << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse occupancy query driving stack"};
    app.require_subcommand(1);

    std::string seeds = "0..3", config_path, data_dir, out_dir = "out", init_ckpt, ckpt;
    std::string scene_dir, flags_csv;
    int stage = 1, frame = -1, max_samples = 0;

    auto* gen = app.add_subcommand("gen-data", "generate synthetic scenes");
    gen->add_option("--seeds", seeds, "seed or range A..B")->required();
    gen->add_option("--config", config_path, "run config JSON (defaults to the desk preset)");
    gen->add_option("--out", out_dir, "output directory")->required();

    auto* train = app.add_subcommand("train", "run one training stage");
    train->add_option("--stage", stage, "training stage")->required()->check(CLI::Range(1, 3));
    train->add_option("--config", config_path, "run config JSON");
    train->add_option("--data", data_dir, "scene data directory")->required();
    train->add_option("--out", out_dir, "checkpoint/output directory")->required();
    train->add_option("--init", init_ckpt, "prior-stage checkpoint (required for stages 2-3)");

    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--config", config_path, "run config JSON");
    eval_cmd->add_option("--data", data_dir, "scene data directory")->required();
    eval_cmd->add_option("--out", out_dir, "report output directory");
    eval_cmd->add_option("--max-samples", max_samples, "cap evaluated samples (0 = all)");

    auto* plan_cmd = app.add_subcommand("plan", "plan a trajectory for one scene");
    plan_cmd->add_option("--scene", scene_dir, "scene directory")->required();
    plan_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    plan_cmd->add_option("--config", config_path, "run config JSON");
    plan_cmd->add_option("--frame", frame, "frame index (defaults to the first valid frame)");
    plan_cmd->add_option("--out", out_dir, "output directory (defaults to the scene dir)");

    auto* ablate = app.add_subcommand("ablate", "run the ablation matrix");
    ablate->add_option("--config", config_path, "run config JSON");
    ablate->add_option("--data", data_dir, "scene data directory")->required();
    ablate->add_option("--out", out_dir, "output directory")->required();
    ablate->add_option("--flags", flags_csv, "comma-separated ablation flags (empty = base)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(seeds, config_path, out_dir);
        if (train->parsed()) return cmd_train(stage, config_path, data_dir, out_dir, init_ckpt);
        if (eval_cmd->parsed())
            return cmd_evaluate(ckpt, config_path, data_dir, out_dir, max_samples);
        if (plan_cmd->parsed()) return cmd_plan(scene_dir, ckpt, config_path, frame, out_dir);
        if (ablate->parsed()) return cmd_ablate(config_path, data_dir, out_dir, flags_csv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
