// SPDX-License-Identifier: Apache-2.0
//
// Pinhole cameras over the ego frame. Ego frame: x forward, y left, z up.
// Camera frame: x right, y down, z forward (optical axis).
#pragma once

#include <cmath>
#include <vector>

#include "soq/geometry.hpp"

namespace soq {

struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
    Pose cam_from_ego;  // maps ego coords to camera coords

    void validate() const {
        SOQ_REQUIRE(fx > 0 && fy > 0, "Camera: focal lengths must be positive");
        SOQ_REQUIRE(cx > 0 && cx < width && cy > 0 && cy < height,
                    "Camera: principal point outside image");
        SOQ_REQUIRE(cam_from_ego.is_valid(), "Camera: extrinsic rotation invalid");
    }

    // (u, v, depth); valid iff depth > z_near and the pixel is inside the image
    bool project(const Vec3& ego_point, double& u, double& v, double& depth,
                 double z_near = 0.1) const {
        const Vec3 pc = cam_from_ego.apply(ego_point);
        depth = pc[2];
        if (depth <= z_near) return false;
        u = fx * pc[0] / depth + cx;
        v = fy * pc[1] / depth + cy;
        return u >= 0.0 && u < static_cast<double>(width) && v >= 0.0 &&
               v < static_cast<double>(height);
    }

    // inverse of project at a given depth; returns the ego-frame point
    Vec3 back_project(double u, double v, double depth) const {
        const Vec3 pc = {(u - cx) / fx * depth, (v - cy) / fy * depth, depth};
        return cam_from_ego.inverse().apply(pc);
    }
};

struct CameraRig {
    std::vector<Camera> cameras;

    size_t size() const { return cameras.size(); }
    const Camera& operator[](size_t i) const { return cameras[i]; }

    void validate() const {
        SOQ_REQUIRE(!cameras.empty(), "CameraRig: need at least one camera");
        for (const auto& c : cameras) c.validate();
    }

    // V cameras evenly spaced in yaw, first one facing forward
    static CameraRig ring(int count, int width, int height, double hfov_deg, double cam_height) {
        SOQ_REQUIRE(count >= 1, "CameraRig: need at least one camera");
        CameraRig rig;
        const double hfov = hfov_deg * M_PI / 180.0;
        const double fx = width / (2.0 * std::tan(hfov / 2.0));
        for (int i = 0; i < count; ++i) {
            Camera cam;
            cam.width = width;
            cam.height = height;
            cam.fx = fx;
            cam.fy = fx;
            cam.cx = width / 2.0;
            cam.cy = height / 2.0;
            const double yaw = 2.0 * M_PI * i / count;
            const double c = std::cos(yaw), s = std::sin(yaw);
            // rows: camera x (right of view dir), y (down), z (view dir)
            Pose ego_to_cam;
            ego_to_cam.rotation = {s, -c, 0, 0, 0, -1, c, s, 0};
            const Vec3 center = {0, 0, cam_height};  // camera position in ego
            const Vec3 t = ego_to_cam.rotate(center);
            ego_to_cam.translation = {-t[0], -t[1], -t[2]};
            cam.cam_from_ego = ego_to_cam;
            rig.cameras.push_back(cam);
        }
        rig.validate();
        return rig;
    }
};

}  // namespace soq
