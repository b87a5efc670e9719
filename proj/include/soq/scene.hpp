// SPDX-License-Identifier: Apache-2.0
//
// Procedural multi-view, multi-frame driving scenes with dense occupancy
// ground truth, smooth ego motion, template language annotations and a
// deterministic rasterizer. Everything is a pure function of (seed, config).
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "soq/camera.hpp"
#include "soq/geometry.hpp"
#include "soq/png.hpp"

namespace soq {

// semantic classes; free index = kNumClasses
enum SemClass : int {
    kRoad = 0,
    kMarking = 1,
    kVehicle = 2,
    kPedestrian = 3,
    kPole = 4,
    kLightRed = 5,
    kLightGreen = 6,
    kBuilding = 7,
};
constexpr int kNumClasses = 8;

inline std::array<uint8_t, 3> class_color(int cls) {
    static constexpr std::array<std::array<uint8_t, 3>, kNumClasses> palette = {{
        {90, 90, 95},     // road
        {230, 230, 230},  // marking
        {50, 110, 220},   // vehicle
        {230, 90, 60},    // pedestrian
        {140, 140, 60},   // pole
        {235, 40, 40},    // light, red state
        {40, 220, 80},    // light, green state
        {150, 110, 180},  // building
    }};
    return palette[cls];
}
constexpr std::array<uint8_t, 3> kBackgroundColor = {25, 25, 28};

enum class Command : int { Left = 0, Straight = 1, Right = 2 };

inline const char* command_name(Command c) {
    switch (c) {
        case Command::Left: return "left";
        case Command::Straight: return "straight";
        case Command::Right: return "right";
    }
    return "straight";
}

struct EgoState {
    std::array<double, 2> velocity{0, 0};      // m/s, ego frame
    std::array<double, 2> acceleration{0, 0};  // m/s^2, ego frame
    double yaw_rate = 0;                       // rad/s
    Command command = Command::Straight;

    double speed() const { return std::hypot(velocity[0], velocity[1]); }

    std::array<double, 8> features() const {
        const double cmd[3] = {command == Command::Left ? 1.0 : 0.0,
                               command == Command::Straight ? 1.0 : 0.0,
                               command == Command::Right ? 1.0 : 0.0};
        return {velocity[0], velocity[1], acceleration[0], acceleration[1],
                yaw_rate,    cmd[0],      cmd[1],          cmd[2]};
    }
};

enum class TaskTag : int { Caption = 0, Qa = 1, PlanReason = 2 };

inline const char* task_name(TaskTag t) {
    switch (t) {
        case TaskTag::Caption: return "caption";
        case TaskTag::Qa: return "qa";
        case TaskTag::PlanReason: return "plan-reason";
    }
    return "caption";
}

struct LanguageAnnotation {
    int frame = 0;
    std::string prompt;
    std::string answer;
    TaskTag task = TaskTag::Caption;
};

// ---------------------------------------------------------------------------
// config

enum class MotionKind : int { Straight = 0, LeftTurn = 1, RightTurn = 2, Stop = 3 };

struct SceneConfig {
    int frames = 20;
    double dt = 0.5;

    int grid_nx = 32, grid_ny = 32, grid_nz = 8;
    double resolution = 0.5;
    Vec3 grid_origin{-8.0, -8.0, 0.0};

    int camera_count = 6;
    int image_width = 128, image_height = 64;
    double cam_hfov_deg = 70.0;
    double cam_height = 1.5;

    int history = 4;   // frames of image context fed to the encoder
    int horizon = 6;   // forecast steps
    int plan_steps = 6;

    double road_half_width = 1.6;
    double speed_min = 1.2, speed_max = 3.2;

    int min_vehicles = 1, max_vehicles = 3;
    int min_pedestrians = 0, max_pedestrians = 2;
    int min_poles = 1, max_poles = 2;
    int buildings = 2;
    int dynamic_vehicles = 1;   // vehicles translating along the road
    double dynamic_speed = 0.8;

    double ego_z = 0.75;  // ego center height for collision queries

    void validate() const {
        if (frames < history + horizon) throw ConfigError("SceneConfig: too few frames");
        if (dt <= 0) throw ConfigError("SceneConfig: dt must be positive");
        if (grid_nx <= 0 || grid_ny <= 0 || grid_nz <= 0 || resolution <= 0)
            throw ConfigError("SceneConfig: invalid grid");
        if (camera_count < 1) throw ConfigError("SceneConfig: need a camera");
        if (min_vehicles < 0 || max_vehicles < min_vehicles)
            throw ConfigError("SceneConfig: vehicle range");
        if (speed_min <= 0 || speed_max < speed_min) throw ConfigError("SceneConfig: speed range");
    }
};

// ---------------------------------------------------------------------------
// ego path: analytic motion primitives in world coordinates

struct EgoPath {
    MotionKind kind = MotionKind::Straight;
    double speed = 2.0;        // entry speed
    double turn_radius = 8.0;  // for turns
    double turn_start = 2.0;   // seconds of straight lead-in before a turn
    double stop_decel = 0.6;   // m/s^2 for Stop

    // position/yaw/speed at time t (seconds from scene start)
    void sample(double t, Vec3& pos, double& yaw, double& spd) const {
        switch (kind) {
            case MotionKind::Straight:
                pos = {speed * t, 0.0, 0.0};
                yaw = 0.0;
                spd = speed;
                return;
            case MotionKind::Stop: {
                const double t0 = speed / stop_decel;
                if (t < t0) {
                    pos = {speed * t - 0.5 * stop_decel * t * t, 0.0, 0.0};
                    spd = speed - stop_decel * t;
                } else {
                    pos = {0.5 * speed * t0, 0.0, 0.0};
                    spd = 0.0;
                }
                yaw = 0.0;
                return;
            }
            case MotionKind::LeftTurn:
            case MotionKind::RightTurn: {
                const double sgn = kind == MotionKind::LeftTurn ? 1.0 : -1.0;
                spd = speed;
                if (t < turn_start) {
                    pos = {speed * t, 0.0, 0.0};
                    yaw = 0.0;
                    return;
                }
                const double u = t - turn_start;
                const double omega = speed / turn_radius;
                const double a = omega * u;
                pos = {speed * turn_start + turn_radius * std::sin(a),
                       sgn * turn_radius * (1.0 - std::cos(a)), 0.0};
                yaw = sgn * a;
                return;
            }
        }
    }

    Pose pose_at(double t) const {
        Vec3 p;
        double yaw, spd;
        sample(t, p, yaw, spd);
        return Pose::yaw(yaw, p);
    }

    Command command() const {
        if (kind == MotionKind::LeftTurn) return Command::Left;
        if (kind == MotionKind::RightTurn) return Command::Right;
        return Command::Straight;
    }
};

// ---------------------------------------------------------------------------
// world: implicit geometry sampled at voxel centers

struct ObjectBox {
    Vec3 center{0, 0, 0};  // world, static part
    double half_x = 1, half_y = 0.5, z0 = 0, z1 = 1;
    double yaw = 0.0;
    int cls = kVehicle;
    // dynamic boxes translate along `motion_dir` with `motion_speed`
    bool dynamic = false;
    Vec3 motion_dir{1, 0, 0};
    double motion_speed = 0.0;

    bool contains(const Vec3& p, double t) const {
        Vec3 c = center;
        if (dynamic) c = c + (motion_speed * t) * motion_dir;
        if (p[2] < z0 || p[2] >= z1) return false;
        const double dx = p[0] - c[0], dy = p[1] - c[1];
        const double cy = std::cos(-yaw), sy = std::sin(-yaw);
        const double lx = cy * dx - sy * dy;
        const double ly = sy * dx + cy * dy;
        return std::fabs(lx) <= half_x && std::fabs(ly) <= half_y;
    }
};

struct ObjectCylinder {
    Vec3 center{0, 0, 0};
    double radius = 0.4, z0 = 0, z1 = 1.6;
    int cls = kPedestrian;

    bool contains(const Vec3& p) const {
        if (p[2] < z0 || p[2] >= z1) return false;
        const double dx = p[0] - center[0], dy = p[1] - center[1];
        return dx * dx + dy * dy <= radius * radius;
    }
};

struct World {
    // dense path polyline (world coords) with arc length, for road queries
    std::vector<Vec3> path_points;
    std::vector<double> path_arclen;
    double road_half_width = 1.6;
    double road_height = 0.5;  // road occupies z in [0, road_height)

    std::vector<ObjectBox> boxes;
    std::vector<ObjectCylinder> cylinders;
    bool light_is_red = true;

    // squared distance to the path centerline and arclength of the closest sample
    double path_sqdist(const Vec3& p, double& s) const {
        double best = std::numeric_limits<double>::infinity();
        s = 0.0;
        for (size_t i = 0; i < path_points.size(); ++i) {
            const double dx = p[0] - path_points[i][0], dy = p[1] - path_points[i][1];
            const double d = dx * dx + dy * dy;
            if (d < best) {
                best = d;
                s = path_arclen[i];
            }
        }
        return best;
    }

    // semantic class of the world at point p (world coords) and time t;
    // returns the free index when unoccupied
    int classify(const Vec3& p, double t) const {
        for (const auto& b : boxes)
            if (b.contains(p, t)) return b.cls;
        for (const auto& c : cylinders)
            if (c.contains(p)) return c.cls;
        if (p[2] >= 0.0 && p[2] < road_height) {
            double s;
            const double d2 = path_sqdist(p, s);
            if (d2 <= 0.04 && std::fmod(s, 2.0) < 1.0) return kMarking;  // dashed centerline
            if (d2 <= road_half_width * road_half_width) return kRoad;
        }
        return kNumClasses;
    }
};

// ---------------------------------------------------------------------------
// scene

struct Frame {
    VoxelGrid gt;
    Pose ego_pose;  // ego-to-world
    EgoState state;
    std::vector<std::array<double, 2>> expert;  // future waypoints, ego frame
};

struct Scene {
    uint64_t seed = 0;
    SceneConfig config;
    EgoPath path;
    World world;
    CameraRig cameras;
    std::vector<Frame> frames;
    std::vector<LanguageAnnotation> annotations;

    int vehicle_count = 0;
    int pedestrian_count = 0;
};

// canonical motion primitives used by plan-reason annotations: 4 motions x 3
// speed buckets; id = motion*3 + bucket
inline int speed_bucket(double v) { return v < 1.0 ? 0 : (v < 2.5 ? 1 : 2); }

inline const char* speed_bucket_name(int b) {
    return b == 0 ? "slow" : (b == 1 ? "medium" : "fast");
}

inline std::vector<std::array<double, 2>> primitive_waypoints(int primitive_id, int steps,
                                                              double dt) {
    const int motion = primitive_id / 3;
    const int bucket = primitive_id % 3;
    static constexpr double speeds[3] = {0.6, 1.8, 3.2};
    EgoPath p;
    p.kind = static_cast<MotionKind>(motion);
    p.speed = speeds[bucket];
    p.turn_start = 0.0;  // primitives begin turning immediately
    std::vector<std::array<double, 2>> out;
    for (int k = 1; k <= steps; ++k) {
        Vec3 pos;
        double yaw, spd;
        p.sample(k * dt, pos, yaw, spd);
        out.push_back({pos[0], pos[1]});
    }
    return out;
}

inline int nearest_primitive(const std::vector<std::array<double, 2>>& traj, double dt) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int id = 0; id < 12; ++id) {
        const auto wp = primitive_waypoints(id, static_cast<int>(traj.size()), dt);
        double d = 0.0;
        for (size_t k = 0; k < traj.size(); ++k)
            d += std::hypot(traj[k][0] - wp[k][0], traj[k][1] - wp[k][1]);
        d /= static_cast<double>(traj.size());
        if (d < best_d) {
            best_d = d;
            best = id;
        }
    }
    return best;
}

namespace scenedetail {

// lateral offset from the path at arc-station s, world coords
inline Vec3 offset_point(const EgoPath& path, double s, double lateral, double speed_hint) {
    const double t = s / std::max(speed_hint, 1e-6);
    Vec3 pos;
    double yaw, spd;
    path.sample(t, pos, yaw, spd);
    return {pos[0] - lateral * std::sin(yaw), pos[1] + lateral * std::cos(yaw), 0.0};
}

inline double path_yaw(const EgoPath& path, double s, double speed_hint) {
    const double t = s / std::max(speed_hint, 1e-6);
    Vec3 pos;
    double yaw, spd;
    path.sample(t, pos, yaw, spd);
    return yaw;
}

}  // namespace scenedetail

inline Scene generate_scene(uint64_t seed, const SceneConfig& config) {
    config.validate();
    Scene scene;
    scene.seed = seed;
    scene.config = config;
    Rng rng(seed ^ 0x5ce9e5a11ULL);

    // ego motion
    const int motion_pick = static_cast<int>(rng.uniform_int(4));
    scene.path.kind = static_cast<MotionKind>(motion_pick);
    scene.path.speed = rng.uniform(config.speed_min, config.speed_max);
    scene.path.turn_radius = rng.uniform(7.0, 10.0);
    scene.path.turn_start = rng.uniform(1.5, 3.0);
    scene.path.stop_decel = rng.uniform(0.4, 0.8);

    // dense polyline over [ -4s, duration + horizon + 6s ] for road queries
    World& world = scene.world;
    world.road_half_width = config.road_half_width;
    world.road_height = config.resolution;
    const double t_lo = -4.0;
    const double t_hi = config.frames * config.dt + 8.0;
    double arclen = 0.0;
    Vec3 prev{0, 0, 0};
    bool first = true;
    for (double t = t_lo; t <= t_hi; t += 0.05) {
        Vec3 pos;
        double yaw, spd;
        scene.path.sample(t, pos, yaw, spd);
        if (!first) arclen += std::hypot(pos[0] - prev[0], pos[1] - prev[1]);
        // anchor arclength 0 at scene start
        world.path_points.push_back(pos);
        world.path_arclen.push_back(arclen);
        prev = pos;
        first = false;
    }

    world.light_is_red = rng.uniform() < 0.5;

    const double total_station = scene.path.speed * config.frames * config.dt + 6.0;

    // vehicles: parked boxes beside the road, yaw-aligned with it
    scene.vehicle_count =
        config.min_vehicles + static_cast<int>(rng.uniform_int(
                                  static_cast<uint64_t>(config.max_vehicles - config.min_vehicles + 1)));
    for (int i = 0; i < scene.vehicle_count; ++i) {
        ObjectBox box;
        const double s = rng.uniform(1.0, std::max(2.0, total_station));
        const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
        const double lateral = side * rng.uniform(2.4, 3.2);
        box.center = scenedetail::offset_point(scene.path, s, lateral, scene.path.speed);
        box.yaw = scenedetail::path_yaw(scene.path, s, scene.path.speed);
        box.half_x = rng.uniform(0.9, 1.2);
        box.half_y = rng.uniform(0.45, 0.6);
        box.z0 = 0.0;
        box.z1 = rng.uniform(0.9, 1.3);
        box.cls = kVehicle;
        if (i < config.dynamic_vehicles) {
            box.dynamic = true;
            const double yaw = box.yaw;
            box.motion_dir = {std::cos(yaw), std::sin(yaw), 0.0};
            box.motion_speed = config.dynamic_speed;
        }
        world.boxes.push_back(box);
    }

    // pedestrians: cylinders on the walkway strip
    scene.pedestrian_count =
        config.min_pedestrians +
        static_cast<int>(rng.uniform_int(
            static_cast<uint64_t>(config.max_pedestrians - config.min_pedestrians + 1)));
    for (int i = 0; i < scene.pedestrian_count; ++i) {
        ObjectCylinder cyl;
        const double s = rng.uniform(1.0, std::max(2.0, total_station));
        const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
        cyl.center = scenedetail::offset_point(scene.path, s, side * rng.uniform(2.4, 3.0),
                                               scene.path.speed);
        cyl.radius = 0.4;
        cyl.z0 = 0.0;
        cyl.z1 = rng.uniform(1.4, 1.8);
        cyl.cls = kPedestrian;
        world.cylinders.push_back(cyl);
    }

    // poles
    const int poles = config.min_poles + static_cast<int>(rng.uniform_int(
                                             static_cast<uint64_t>(config.max_poles - config.min_poles + 1)));
    for (int i = 0; i < poles; ++i) {
        ObjectCylinder cyl;
        const double s = rng.uniform(1.0, std::max(2.0, total_station));
        const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
        cyl.center = scenedetail::offset_point(scene.path, s, side * rng.uniform(2.6, 3.4),
                                               scene.path.speed);
        cyl.radius = 0.4;
        cyl.z0 = 0.0;
        cyl.z1 = rng.uniform(2.0, 2.8);
        cyl.cls = kPole;
        world.cylinders.push_back(cyl);
    }

    // one traffic light ahead: a pole plus a colored head
    {
        const double s = rng.uniform(4.0, std::max(5.0, total_station * 0.6));
        const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
        ObjectCylinder pole;
        pole.center = scenedetail::offset_point(scene.path, s, side * 2.8, scene.path.speed);
        pole.radius = 0.4;
        pole.z0 = 0.0;
        pole.z1 = 2.5;
        pole.cls = kPole;
        world.cylinders.push_back(pole);
        ObjectBox head;
        head.center = {pole.center[0], pole.center[1], 0.0};
        head.half_x = 0.35;
        head.half_y = 0.35;
        head.z0 = 2.5;
        head.z1 = 3.2;
        head.cls = world.light_is_red ? kLightRed : kLightGreen;
        world.boxes.push_back(head);
    }

    // building facades beyond the walkway
    for (int i = 0; i < config.buildings; ++i) {
        ObjectBox b;
        const double s = rng.uniform(2.0, std::max(3.0, total_station));
        const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
        b.center = scenedetail::offset_point(scene.path, s, side * rng.uniform(5.0, 6.5),
                                             scene.path.speed);
        b.yaw = scenedetail::path_yaw(scene.path, s, scene.path.speed);
        b.half_x = rng.uniform(1.5, 2.5);
        b.half_y = 0.5;
        b.z0 = 0.0;
        b.z1 = rng.uniform(2.5, 3.5);
        b.cls = kBuilding;
        world.boxes.push_back(b);
    }

    scene.cameras = CameraRig::ring(config.camera_count, config.image_width, config.image_height,
                                    config.cam_hfov_deg, config.cam_height);

    // frames: gt is the world sampled at ego-frame voxel centers
    scene.frames.resize(config.frames);
    for (int f = 0; f < config.frames; ++f) {
        Frame& frame = scene.frames[f];
        const double t = f * config.dt;
        frame.ego_pose = scene.path.pose_at(t);

        frame.gt = VoxelGrid(config.grid_nx, config.grid_ny, config.grid_nz, config.resolution,
                             config.grid_origin, kNumClasses);
        for (int ix = 0; ix < frame.gt.nx; ++ix)
            for (int iy = 0; iy < frame.gt.ny; ++iy)
                for (int iz = 0; iz < frame.gt.nz; ++iz) {
                    const Vec3 wc = frame.ego_pose.apply(frame.gt.cell_center(ix, iy, iz));
                    const int cls = world.classify(wc, t);
                    if (cls < kNumClasses) frame.gt.set(ix, iy, iz, static_cast<uint8_t>(cls));
                }

        // ego state from the analytic path
        Vec3 p0, p1;
        double yaw0, yaw1, spd0, spd1;
        scene.path.sample(t, p0, yaw0, spd0);
        scene.path.sample(t + config.dt, p1, yaw1, spd1);
        frame.state.velocity = {spd0, 0.0};
        frame.state.acceleration = {(spd1 - spd0) / config.dt, 0.0};
        frame.state.yaw_rate = (yaw1 - yaw0) / config.dt;
        frame.state.command = scene.path.command();

        // expert trajectory: future ego positions in this frame's coordinates
        const Pose inv = frame.ego_pose.inverse();
        for (int k = 1; k <= config.plan_steps; ++k) {
            const Pose fut = scene.path.pose_at(t + k * config.dt);
            const Vec3 rel = inv.apply(fut.translation);
            frame.expert.push_back({rel[0], rel[1]});
        }
    }

    // annotations: caption / qa / plan-reason per frame
    for (int f = 0; f < config.frames; ++f) {
        const Frame& frame = scene.frames[f];
        const Pose inv = frame.ego_pose.inverse();
        const double t = f * config.dt;

        LanguageAnnotation cap;
        cap.frame = f;
        cap.task = TaskTag::Caption;
        cap.prompt = "describe the scene";
        cap.answer = "there are " + std::to_string(scene.vehicle_count) +
                     " vehicles traffic light is " + (world.light_is_red ? "red" : "green");
        scene.annotations.push_back(cap);

        bool ped_ahead = false;
        for (const auto& cyl : world.cylinders) {
            if (cyl.cls != kPedestrian) continue;
            const Vec3 rel = inv.apply(cyl.center);
            if (rel[0] > 0.0 && std::fabs(rel[0]) < 16.0 && std::fabs(rel[1]) < 16.0)
                ped_ahead = true;
        }
        LanguageAnnotation qa;
        qa.frame = f;
        qa.task = TaskTag::Qa;
        qa.prompt = "is there a pedestrian ahead";
        qa.answer = ped_ahead ? "yes" : "no";
        scene.annotations.push_back(qa);

        LanguageAnnotation plan;
        plan.frame = f;
        plan.task = TaskTag::PlanReason;
        Vec3 pos;
        double yaw, spd;
        scene.path.sample(t, pos, yaw, spd);
        plan.prompt = std::string("command ") + command_name(frame.state.command) + " speed " +
                      speed_bucket_name(speed_bucket(spd));
        plan.answer = "anchor " + std::to_string(nearest_primitive(frame.expert, config.dt));
        scene.annotations.push_back(plan);
    }
    return scene;
}

// ---------------------------------------------------------------------------
// rendering

struct RenderedView {
    Image image;
    std::vector<float> depth;  // 0 where background
};

inline std::vector<RenderedView> render_views(const Scene& scene, int frame_index) {
    if (frame_index < 0 || frame_index >= static_cast<int>(scene.frames.size()))
        throw InvalidArgument("render_views: frame out of range");
    const Frame& frame = scene.frames[frame_index];
    const auto points = sparsify_grid(frame.gt);
    const double res = frame.gt.resolution;

    std::vector<RenderedView> views(scene.cameras.size());
    for (size_t v = 0; v < scene.cameras.size(); ++v) {
        const Camera& cam = scene.cameras[v];
        RenderedView& rv = views[v];
        rv.image.width = cam.width;
        rv.image.height = cam.height;
        rv.image.rgb.assign(static_cast<size_t>(cam.width) * cam.height * 3, 0);
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x)
                for (int c = 0; c < 3; ++c) rv.image.at(y, x, c) = kBackgroundColor[c];
        rv.depth.assign(static_cast<size_t>(cam.width) * cam.height, 0.0f);

        for (size_t i = 0; i < points.size(); ++i) {
            double u, vpx, depth;
            if (!cam.project(points.coords[i], u, vpx, depth)) continue;
            // splat over the voxel's projected footprint; keep only pixels whose
            // back-projection at this depth stays inside the voxel
            const int rad = std::max(0, std::min(12, static_cast<int>(cam.fx * res / depth * 0.5)));
            const int cu = static_cast<int>(u), cv = static_cast<int>(vpx);
            const auto color = class_color(points.labels[i]);
            for (int dy = -rad; dy <= rad; ++dy)
                for (int dx = -rad; dx <= rad; ++dx) {
                    const int px = cu + dx, py = cv + dy;
                    if (px < 0 || px >= cam.width || py < 0 || py >= cam.height) continue;
                    const Vec3 hit = cam.back_project(px + 0.5, py + 0.5, depth);
                    if (std::fabs(hit[0] - points.coords[i][0]) > res * 0.5 ||
                        std::fabs(hit[1] - points.coords[i][1]) > res * 0.5 ||
                        std::fabs(hit[2] - points.coords[i][2]) > res * 0.5)
                        continue;
                    const size_t pix = static_cast<size_t>(py) * cam.width + px;
                    if (rv.depth[pix] == 0.0f || depth < rv.depth[pix]) {
                        rv.depth[pix] = static_cast<float>(depth);
                        for (int c = 0; c < 3; ++c) rv.image.rgb[pix * 3 + c] = color[c];
                    }
                }
        }
    }
    return views;
}

// ---------------------------------------------------------------------------
// extended ground truth (current + future frames in frame-t0 coordinates)

inline OccupancyPointSet build_extended_gt(const Scene& scene, int t0, int horizon) {
    if (t0 < 0 || t0 + horizon >= static_cast<int>(scene.frames.size()))
        throw InvalidArgument("build_extended_gt: horizon exceeds scene");
    const Pose to_t0 = scene.frames[t0].ego_pose.inverse();
    const VoxelGrid& ref = scene.frames[t0].gt;
    OccupancyPointSet out;
    out.num_classes = kNumClasses;
    std::unordered_set<uint64_t> seen;
    for (int f = t0; f <= t0 + horizon; ++f) {
        const Pose rel = to_t0.compose(scene.frames[f].ego_pose);
        auto pts = sparsify_grid(scene.frames[f].gt);
        for (size_t i = 0; i < pts.size(); ++i) {
            const Vec3 p = rel.apply(pts.coords[i]);
            const int64_t ix = static_cast<int64_t>(std::floor((p[0] - ref.origin[0]) / ref.resolution));
            const int64_t iy = static_cast<int64_t>(std::floor((p[1] - ref.origin[1]) / ref.resolution));
            const int64_t iz = static_cast<int64_t>(std::floor((p[2] - ref.origin[2]) / ref.resolution));
            const uint64_t key = (static_cast<uint64_t>(ix + 4096) << 40) ^
                                 (static_cast<uint64_t>(iy + 4096) << 20) ^
                                 (static_cast<uint64_t>(iz + 4096) << 4) ^
                                 static_cast<uint64_t>(pts.labels[i]);
            if (seen.insert(key).second) out.push(p, pts.labels[i]);
        }
    }
    return out;
}

}  // namespace soq
