// SPDX-License-Identifier: Apache-2.0
//
// Small raster plotting: loss curves and overhead trajectory views, written
// as PNG. Enough for run reports, nothing more.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "soq/png.hpp"

namespace soq {

class Plot {
  public:
    Plot(int width = 640, int height = 400) {
        img_.width = width;
        img_.height = height;
        img_.rgb.assign(static_cast<size_t>(width) * height * 3, 255);
    }

    void pixel(int x, int y, std::array<uint8_t, 3> c) {
        if (x < 0 || x >= img_.width || y < 0 || y >= img_.height) return;
        for (int k = 0; k < 3; ++k) img_.at(y, x, k) = c[k];
    }

    void line(double x0, double y0, double x1, double y1, std::array<uint8_t, 3> c) {
        const int steps = static_cast<int>(std::max(std::fabs(x1 - x0), std::fabs(y1 - y0))) + 1;
        for (int s = 0; s <= steps; ++s) {
            const double t = static_cast<double>(s) / steps;
            pixel(static_cast<int>(x0 + (x1 - x0) * t), static_cast<int>(y0 + (y1 - y0) * t), c);
        }
    }

    // polyline in data coordinates mapped to the full canvas with margins
    void curve(const std::vector<double>& ys, std::array<uint8_t, 3> color) {
        if (ys.size() < 2) return;
        double lo = *std::min_element(ys.begin(), ys.end());
        double hi = *std::max_element(ys.begin(), ys.end());
        if (hi - lo < 1e-12) hi = lo + 1.0;
        const double mx = 40, my = 20;
        for (size_t i = 1; i < ys.size(); ++i) {
            const double x0 = mx + (img_.width - 2 * mx) * (i - 1) / (ys.size() - 1);
            const double x1 = mx + (img_.width - 2 * mx) * i / (ys.size() - 1);
            const double y0 = img_.height - my - (img_.height - 2 * my) * (ys[i - 1] - lo) / (hi - lo);
            const double y1 = img_.height - my - (img_.height - 2 * my) * (ys[i] - lo) / (hi - lo);
            line(x0, y0, x1, y1, color);
        }
        // axes
        line(40, img_.height - 20, img_.width - 40, img_.height - 20, {0, 0, 0});
        line(40, 20, 40, img_.height - 20, {0, 0, 0});
    }

    // overhead scatter/path in meters, x forward (up on the canvas)
    void path(const std::vector<std::array<double, 2>>& xy, std::array<uint8_t, 3> color,
              double extent = 12.0, bool points_only = false) {
        auto to_px = [&](double x, double y, int& px, int& py) {
            px = static_cast<int>(img_.width / 2.0 - y / extent * (img_.width / 2.0 - 10));
            py = static_cast<int>(img_.height / 2.0 - x / extent * (img_.height / 2.0 - 10));
        };
        int prev_x = 0, prev_y = 0;
        for (size_t i = 0; i < xy.size(); ++i) {
            int px, py;
            to_px(xy[i][0], xy[i][1], px, py);
            if (points_only || i == 0) {
                for (int dx = -1; dx <= 1; ++dx)
                    for (int dy = -1; dy <= 1; ++dy) pixel(px + dx, py + dy, color);
            } else {
                line(prev_x, prev_y, px, py, color);
            }
            prev_x = px;
            prev_y = py;
        }
    }

    void save(const std::string& path_name) const { save_png(img_, path_name); }

    const Image& image() const { return img_; }

  private:
    Image img_;
};

}  // namespace soq
