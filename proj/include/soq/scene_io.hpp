// SPDX-License-Identifier: Apache-2.0
//
// Scene persistence: one directory per scene with SOVG grids, PNG views and
// a line-delimited JSON manifest for poses, ego states and annotations.
#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "soq/scene.hpp"
#include "soq/sovg.hpp"

namespace soq {

using nlohmann::json;

inline json scene_config_to_json(const SceneConfig& c) {
    json j;
    j["frames"] = c.frames;
    j["dt"] = c.dt;
    j["grid"] = {c.grid_nx, c.grid_ny, c.grid_nz};
    j["resolution"] = c.resolution;
    j["grid_origin"] = {c.grid_origin[0], c.grid_origin[1], c.grid_origin[2]};
    j["camera_count"] = c.camera_count;
    j["image_width"] = c.image_width;
    j["image_height"] = c.image_height;
    j["cam_hfov_deg"] = c.cam_hfov_deg;
    j["cam_height"] = c.cam_height;
    j["history"] = c.history;
    j["horizon"] = c.horizon;
    j["plan_steps"] = c.plan_steps;
    j["road_half_width"] = c.road_half_width;
    j["speed_min"] = c.speed_min;
    j["speed_max"] = c.speed_max;
    j["min_vehicles"] = c.min_vehicles;
    j["max_vehicles"] = c.max_vehicles;
    j["min_pedestrians"] = c.min_pedestrians;
    j["max_pedestrians"] = c.max_pedestrians;
    j["min_poles"] = c.min_poles;
    j["max_poles"] = c.max_poles;
    j["buildings"] = c.buildings;
    j["dynamic_vehicles"] = c.dynamic_vehicles;
    j["dynamic_speed"] = c.dynamic_speed;
    j["ego_z"] = c.ego_z;
    return j;
}

inline SceneConfig scene_config_from_json(const json& j) {
    SceneConfig c;
    try {
        if (j.contains("frames")) c.frames = j.at("frames");
        if (j.contains("dt")) c.dt = j.at("dt");
        if (j.contains("grid")) {
            c.grid_nx = j.at("grid").at(0);
            c.grid_ny = j.at("grid").at(1);
            c.grid_nz = j.at("grid").at(2);
        }
        if (j.contains("resolution")) c.resolution = j.at("resolution");
        if (j.contains("grid_origin"))
            c.grid_origin = {j.at("grid_origin").at(0), j.at("grid_origin").at(1),
                             j.at("grid_origin").at(2)};
        if (j.contains("camera_count")) c.camera_count = j.at("camera_count");
        if (j.contains("image_width")) c.image_width = j.at("image_width");
        if (j.contains("image_height")) c.image_height = j.at("image_height");
        if (j.contains("cam_hfov_deg")) c.cam_hfov_deg = j.at("cam_hfov_deg");
        if (j.contains("cam_height")) c.cam_height = j.at("cam_height");
        if (j.contains("history")) c.history = j.at("history");
        if (j.contains("horizon")) c.horizon = j.at("horizon");
        if (j.contains("plan_steps")) c.plan_steps = j.at("plan_steps");
        if (j.contains("road_half_width")) c.road_half_width = j.at("road_half_width");
        if (j.contains("speed_min")) c.speed_min = j.at("speed_min");
        if (j.contains("speed_max")) c.speed_max = j.at("speed_max");
        if (j.contains("min_vehicles")) c.min_vehicles = j.at("min_vehicles");
        if (j.contains("max_vehicles")) c.max_vehicles = j.at("max_vehicles");
        if (j.contains("min_pedestrians")) c.min_pedestrians = j.at("min_pedestrians");
        if (j.contains("max_pedestrians")) c.max_pedestrians = j.at("max_pedestrians");
        if (j.contains("min_poles")) c.min_poles = j.at("min_poles");
        if (j.contains("max_poles")) c.max_poles = j.at("max_poles");
        if (j.contains("buildings")) c.buildings = j.at("buildings");
        if (j.contains("dynamic_vehicles")) c.dynamic_vehicles = j.at("dynamic_vehicles");
        if (j.contains("dynamic_speed")) c.dynamic_speed = j.at("dynamic_speed");
        if (j.contains("ego_z")) c.ego_z = j.at("ego_z");
    } catch (const json::exception& e) {
        throw ConfigError(std::string("scene config: ") + e.what());
    }
    return c;
}

inline std::string frame_grid_name(int f) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%03d.sovg", f);
    return buf;
}

inline std::string view_image_name(int f, int v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "frame_%03d_cam%d.png", f, v);
    return buf;
}

inline void save_scene(const Scene& scene, const std::string& dir, bool with_images = true) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw DataError("save_scene: cannot write manifest in " + dir);

    json head;
    head["type"] = "scene";
    head["seed"] = scene.seed;
    head["light_red"] = scene.world.light_is_red;
    head["vehicle_count"] = scene.vehicle_count;
    head["pedestrian_count"] = scene.pedestrian_count;
    head["config"] = scene_config_to_json(scene.config);
    manifest << head.dump() << "\n";

    for (size_t f = 0; f < scene.frames.size(); ++f) {
        const Frame& fr = scene.frames[f];
        save_sovg(fr.gt, (fs::path(dir) / frame_grid_name(static_cast<int>(f))).string(),
                  /*sidecar=*/f == 0);
        json j;
        j["type"] = "frame";
        j["index"] = f;
        j["rotation"] = fr.ego_pose.rotation;
        j["translation"] = {fr.ego_pose.translation[0], fr.ego_pose.translation[1],
                            fr.ego_pose.translation[2]};
        j["velocity"] = fr.state.velocity;
        j["acceleration"] = fr.state.acceleration;
        j["yaw_rate"] = fr.state.yaw_rate;
        j["command"] = command_name(fr.state.command);
        j["expert"] = fr.expert;
        manifest << j.dump() << "\n";

        if (with_images) {
            const auto views = render_views(scene, static_cast<int>(f));
            for (size_t v = 0; v < views.size(); ++v)
                save_png(views[v].image,
                         (fs::path(dir) / view_image_name(static_cast<int>(f), static_cast<int>(v)))
                             .string());
        }
    }
    for (const auto& a : scene.annotations) {
        json j;
        j["type"] = "annotation";
        j["frame"] = a.frame;
        j["task"] = task_name(a.task);
        j["prompt"] = a.prompt;
        j["answer"] = a.answer;
        manifest << j.dump() << "\n";
    }
    if (!manifest) throw DataError("save_scene: manifest write failed in " + dir);
}

inline Scene load_scene(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw DataError("load_scene: no manifest in " + dir);
    Scene scene;
    std::string line;
    bool header_seen = false;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(std::string("load_scene: bad manifest line: ") + e.what());
        }
        const std::string type = j.value("type", "");
        if (type == "scene") {
            scene.seed = j.at("seed");
            scene.config = scene_config_from_json(j.at("config"));
            scene.world.light_is_red = j.at("light_red");
            scene.vehicle_count = j.at("vehicle_count");
            scene.pedestrian_count = j.at("pedestrian_count");
            scene.cameras =
                CameraRig::ring(scene.config.camera_count, scene.config.image_width,
                                scene.config.image_height, scene.config.cam_hfov_deg,
                                scene.config.cam_height);
            scene.frames.resize(scene.config.frames);
            header_seen = true;
        } else if (type == "frame") {
            if (!header_seen) throw DataError("load_scene: frame before scene header");
            const int f = j.at("index");
            Frame& fr = scene.frames.at(f);
            for (int k = 0; k < 9; ++k) fr.ego_pose.rotation[k] = j.at("rotation").at(k);
            for (int k = 0; k < 3; ++k) fr.ego_pose.translation[k] = j.at("translation").at(k);
            fr.state.velocity = {j.at("velocity").at(0), j.at("velocity").at(1)};
            fr.state.acceleration = {j.at("acceleration").at(0), j.at("acceleration").at(1)};
            fr.state.yaw_rate = j.at("yaw_rate");
            const std::string cmd = j.at("command");
            fr.state.command = cmd == "left"    ? Command::Left
                               : cmd == "right" ? Command::Right
                                                : Command::Straight;
            for (const auto& wp : j.at("expert"))
                fr.expert.push_back({wp.at(0), wp.at(1)});
            fr.gt = load_sovg((fs::path(dir) / frame_grid_name(f)).string());
        } else if (type == "annotation") {
            LanguageAnnotation a;
            a.frame = j.at("frame");
            const std::string task = j.at("task");
            a.task = task == "qa"            ? TaskTag::Qa
                     : task == "plan-reason" ? TaskTag::PlanReason
                                             : TaskTag::Caption;
            a.prompt = j.at("prompt");
            a.answer = j.at("answer");
            scene.annotations.push_back(a);
        }
    }
    if (!header_seen) throw DataError("load_scene: missing scene header in " + dir);
    for (size_t f = 0; f < scene.frames.size(); ++f)
        if (scene.frames[f].gt.cell_count() == 0)
            throw DataError("load_scene: missing frame " + std::to_string(f));
    return scene;
}

}  // namespace soq
