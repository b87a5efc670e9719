// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: presets ("desk", "paper-record"), JSON loading with
// preset inheritance, environment overrides for seeds and output dirs, and a
// canonical config hash that checkpoints refuse to mismatch.
#pragma once

#include <array>
#include <cstdlib>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "soq/backbone.hpp"
#include "soq/connector.hpp"
#include "soq/encoder.hpp"
#include "soq/forecaster.hpp"
#include "soq/lm.hpp"
#include "soq/planner.hpp"
#include "soq/scene_io.hpp"

namespace soq {

struct StageSchedule {
    int epochs = 4;
    int max_steps = 0;  // 0 = no cap; caps epoch*samples when positive
};

struct RunConfig {
    std::string preset = "desk";
    uint64_t seed = 0;

    SceneConfig scene;
    BackboneConfig backbone;
    EncoderConfig encoder;
    ConnectorConfig connector;
    LmConfig lm;
    ForecasterConfig forecaster;
    PlannerConfig planner;

    int batch_size = 4;
    double base_lr = 2e-4;
    double weight_decay = 0.01;
    std::array<StageSchedule, 3> stages{StageSchedule{8, 0}, StageSchedule{4, 0},
                                        StageSchedule{4, 0}};
    bool deterministic = true;
    bool distill_enabled = true;
    bool distill_normalized = true;  // LayerNorms inside the distillation loss

    // paper-record documentation fields; not exercised by desk runs
    int lora_rank = 0;
    double lora_alpha = 0.0;

    // derive cross-module fields from the scene geometry and validate
    void finalize() {
        scene.validate();
        backbone.image_width = scene.image_width;
        backbone.image_height = scene.image_height;
        encoder.history_frames = scene.history;
        encoder.d_img = backbone.d_img;
        encoder.horizon = scene.horizon;
        encoder.dt = scene.dt;
        encoder.num_classes = kNumClasses;
        encoder.range_min = scene.grid_origin;
        encoder.range_max = {scene.grid_origin[0] + scene.grid_nx * scene.resolution,
                             scene.grid_origin[1] + scene.grid_ny * scene.resolution,
                             scene.grid_origin[2] + scene.grid_nz * scene.resolution};
        encoder.validate();
        connector.d_query = encoder.dim;
        connector.d_teacher = backbone.d_teacher;
        connector.validate();
        lm.d_lm = connector.d_lm;
        lm.validate();
        forecaster.dim = encoder.dim;
        forecaster.d_lm = connector.d_lm;
        forecaster.horizon = scene.horizon;
        forecaster.dt = scene.dt;
        forecaster.validate();
        planner.dim = encoder.dim;
        planner.d_lm = connector.d_lm;
        planner.plan_steps = scene.plan_steps;
        planner.dt = scene.dt;
        planner.validate();
        if (batch_size < 1) throw ConfigError("RunConfig: batch_size");
        if (base_lr <= 0) throw ConfigError("RunConfig: base_lr");
    }
};

inline RunConfig desk_preset() {
    RunConfig cfg;
    cfg.preset = "desk";
    cfg.finalize();
    return cfg;
}

// the paper-scale configuration, recorded for documentation; not a test target
inline RunConfig paper_record_preset() {
    RunConfig cfg;
    cfg.preset = "paper-record";
    cfg.scene.grid_nx = 200;
    cfg.scene.grid_ny = 200;
    cfg.scene.grid_nz = 16;
    cfg.scene.resolution = 0.4;
    cfg.scene.grid_origin = {-40.0, -40.0, -1.0};
    cfg.scene.image_width = 704;
    cfg.scene.image_height = 256;
    cfg.scene.history = 8;
    cfg.backbone.d_img = 256;
    cfg.encoder.num_queries = 600;
    cfg.encoder.num_layers = 6;
    cfg.encoder.dim = 1024;
    cfg.encoder.heads = 32;
    cfg.encoder.points_schedule = {2, 4, 16, 32, 56, 112};
    cfg.connector.d_lm = 4096;
    cfg.connector.global_tokens = 12;
    cfg.lm.d_lm = 4096;
    cfg.lm.layers = 32;
    cfg.lm.heads = 32;
    cfg.lm.max_len = 1024;
    cfg.planner.anchor_count = 18;
    cfg.planner.denoise_steps = 2;
    cfg.batch_size = 16;
    cfg.base_lr = 2e-4;
    cfg.stages = {StageSchedule{36, 0}, StageSchedule{6, 0}, StageSchedule{12, 0}};
    cfg.lora_rank = 128;
    cfg.lora_alpha = 16.0;
    cfg.finalize();
    return cfg;
}

inline RunConfig preset_by_name(const std::string& name) {
    if (name == "desk") return desk_preset();
    if (name == "paper-record") return paper_record_preset();
    throw ConfigError("unknown preset: " + name);
}

// ---------------------------------------------------------------------------
// JSON round trip

inline json run_config_to_json(const RunConfig& c) {
    json j;
    j["preset"] = c.preset;
    j["seed"] = c.seed;
    j["scene"] = scene_config_to_json(c.scene);
    j["backbone"] = {{"d_img", c.backbone.d_img}, {"d_teacher", c.backbone.d_teacher}};
    j["encoder"] = {{"num_queries", c.encoder.num_queries},
                    {"num_layers", c.encoder.num_layers},
                    {"dim", c.encoder.dim},
                    {"heads", c.encoder.heads},
                    {"points_schedule", c.encoder.points_schedule},
                    {"sample_points", c.encoder.sample_points},
                    {"lambda_focal", c.encoder.lambda_focal},
                    {"ffn_hidden", c.encoder.ffn_hidden},
                    {"learned_position_update", c.encoder.learned_position_update},
                    {"normalized_chamfer", c.encoder.normalized_chamfer}};
    j["connector"] = {{"d_lm", c.connector.d_lm},
                      {"global_tokens", c.connector.global_tokens},
                      {"heads", c.connector.heads},
                      {"pe_pairs", c.connector.pe_pairs}};
    j["lm"] = {{"layers", c.lm.layers},
               {"heads", c.lm.heads},
               {"max_len", c.lm.max_len},
               {"ffn_hidden", c.lm.ffn_hidden},
               {"bidirectional_prefix", c.lm.bidirectional_prefix}};
    j["forecaster"] = {{"points_per_step", c.forecaster.points_per_step},
                       {"heads", c.forecaster.heads},
                       {"ffn_hidden", c.forecaster.ffn_hidden},
                       {"offset_bound", c.forecaster.offset_bound},
                       {"lambda_focal", c.forecaster.lambda_focal},
                       {"use_token_branch", c.forecaster.use_token_branch},
                       {"use_query_residual", c.forecaster.use_query_residual}};
    j["planner"] = {{"anchor_count", c.planner.anchor_count},
                    {"diffusion_steps", c.planner.diffusion_steps},
                    {"denoise_steps", c.planner.denoise_steps},
                    {"heads", c.planner.heads},
                    {"blocks", c.planner.blocks},
                    {"ffn_hidden", c.planner.ffn_hidden},
                    {"use_scene_fusion", c.planner.use_scene_fusion},
                    {"use_ego_fusion", c.planner.use_ego_fusion},
                    {"use_reason_fusion", c.planner.use_reason_fusion},
                    {"llm_scoring", c.planner.llm_scoring},
                    {"cross_anchor_attention", c.planner.cross_anchor_attention}};
    j["train"] = {{"batch_size", c.batch_size},
                  {"base_lr", c.base_lr},
                  {"weight_decay", c.weight_decay},
                  {"deterministic", c.deterministic},
                  {"distill_enabled", c.distill_enabled},
                  {"distill_normalized", c.distill_normalized},
                  {"stage_epochs",
                   {c.stages[0].epochs, c.stages[1].epochs, c.stages[2].epochs}},
                  {"stage_max_steps",
                   {c.stages[0].max_steps, c.stages[1].max_steps, c.stages[2].max_steps}},
                  {"lora_rank", c.lora_rank},
                  {"lora_alpha", c.lora_alpha}};
    return j;
}

inline void apply_run_config_json(RunConfig& c, const json& j) {
    try {
        if (j.contains("seed")) c.seed = j.at("seed");
        if (j.contains("scene")) {
            json merged = scene_config_to_json(c.scene);
            merged.update(j.at("scene"));
            c.scene = scene_config_from_json(merged);
        }
        if (j.contains("backbone")) {
            const auto& b = j.at("backbone");
            if (b.contains("d_img")) c.backbone.d_img = b.at("d_img");
            if (b.contains("d_teacher")) c.backbone.d_teacher = b.at("d_teacher");
        }
        if (j.contains("encoder")) {
            const auto& e = j.at("encoder");
            if (e.contains("num_queries")) c.encoder.num_queries = e.at("num_queries");
            if (e.contains("num_layers")) c.encoder.num_layers = e.at("num_layers");
            if (e.contains("dim")) c.encoder.dim = e.at("dim");
            if (e.contains("heads")) c.encoder.heads = e.at("heads");
            if (e.contains("points_schedule"))
                c.encoder.points_schedule = e.at("points_schedule").get<std::vector<int>>();
            if (e.contains("sample_points")) c.encoder.sample_points = e.at("sample_points");
            if (e.contains("lambda_focal")) c.encoder.lambda_focal = e.at("lambda_focal");
            if (e.contains("ffn_hidden")) c.encoder.ffn_hidden = e.at("ffn_hidden");
            if (e.contains("learned_position_update"))
                c.encoder.learned_position_update = e.at("learned_position_update");
            if (e.contains("normalized_chamfer"))
                c.encoder.normalized_chamfer = e.at("normalized_chamfer");
        }
        if (j.contains("connector")) {
            const auto& x = j.at("connector");
            if (x.contains("d_lm")) c.connector.d_lm = x.at("d_lm");
            if (x.contains("global_tokens")) c.connector.global_tokens = x.at("global_tokens");
            if (x.contains("heads")) c.connector.heads = x.at("heads");
            if (x.contains("pe_pairs")) c.connector.pe_pairs = x.at("pe_pairs");
        }
        if (j.contains("lm")) {
            const auto& x = j.at("lm");
            if (x.contains("layers")) c.lm.layers = x.at("layers");
            if (x.contains("heads")) c.lm.heads = x.at("heads");
            if (x.contains("max_len")) c.lm.max_len = x.at("max_len");
            if (x.contains("ffn_hidden")) c.lm.ffn_hidden = x.at("ffn_hidden");
            if (x.contains("bidirectional_prefix"))
                c.lm.bidirectional_prefix = x.at("bidirectional_prefix");
        }
        if (j.contains("forecaster")) {
            const auto& x = j.at("forecaster");
            if (x.contains("points_per_step")) c.forecaster.points_per_step = x.at("points_per_step");
            if (x.contains("heads")) c.forecaster.heads = x.at("heads");
            if (x.contains("ffn_hidden")) c.forecaster.ffn_hidden = x.at("ffn_hidden");
            if (x.contains("offset_bound")) c.forecaster.offset_bound = x.at("offset_bound");
            if (x.contains("lambda_focal")) c.forecaster.lambda_focal = x.at("lambda_focal");
            if (x.contains("use_token_branch")) c.forecaster.use_token_branch = x.at("use_token_branch");
            if (x.contains("use_query_residual"))
                c.forecaster.use_query_residual = x.at("use_query_residual");
        }
        if (j.contains("planner")) {
            const auto& x = j.at("planner");
            if (x.contains("anchor_count")) c.planner.anchor_count = x.at("anchor_count");
            if (x.contains("diffusion_steps")) c.planner.diffusion_steps = x.at("diffusion_steps");
            if (x.contains("denoise_steps")) c.planner.denoise_steps = x.at("denoise_steps");
            if (x.contains("heads")) c.planner.heads = x.at("heads");
            if (x.contains("blocks")) c.planner.blocks = x.at("blocks");
            if (x.contains("ffn_hidden")) c.planner.ffn_hidden = x.at("ffn_hidden");
            if (x.contains("use_scene_fusion")) c.planner.use_scene_fusion = x.at("use_scene_fusion");
            if (x.contains("use_ego_fusion")) c.planner.use_ego_fusion = x.at("use_ego_fusion");
            if (x.contains("use_reason_fusion"))
                c.planner.use_reason_fusion = x.at("use_reason_fusion");
            if (x.contains("llm_scoring")) c.planner.llm_scoring = x.at("llm_scoring");
            if (x.contains("cross_anchor_attention"))
                c.planner.cross_anchor_attention = x.at("cross_anchor_attention");
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            if (t.contains("batch_size")) c.batch_size = t.at("batch_size");
            if (t.contains("base_lr")) c.base_lr = t.at("base_lr");
            if (t.contains("weight_decay")) c.weight_decay = t.at("weight_decay");
            if (t.contains("deterministic")) c.deterministic = t.at("deterministic");
            if (t.contains("distill_enabled")) c.distill_enabled = t.at("distill_enabled");
            if (t.contains("distill_normalized")) c.distill_normalized = t.at("distill_normalized");
            if (t.contains("stage_epochs"))
                for (int s = 0; s < 3; ++s) c.stages[s].epochs = t.at("stage_epochs").at(s);
            if (t.contains("stage_max_steps"))
                for (int s = 0; s < 3; ++s) c.stages[s].max_steps = t.at("stage_max_steps").at(s);
            if (t.contains("lora_rank")) c.lora_rank = t.at("lora_rank");
            if (t.contains("lora_alpha")) c.lora_alpha = t.at("lora_alpha");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
}

// file layout: { "preset": "desk", ...overrides... }; env SOQ_SEED overrides
inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig cfg = preset_by_name(j.value("preset", "desk"));
    apply_run_config_json(cfg, j);
    if (const char* env_seed = std::getenv("SOQ_SEED")) cfg.seed = std::strtoull(env_seed, nullptr, 10);
    cfg.finalize();
    return cfg;
}

inline uint64_t config_hash(const RunConfig& c) {
    return fnv1a64(run_config_to_json(c).dump());
}

// output-dir override hook for the CLI
inline std::string resolve_out_dir(const std::string& cli_value) {
    if (const char* env = std::getenv("SOQ_OUT")) return env;
    return cli_value;
}

}  // namespace soq
