// SPDX-License-Identifier: Apache-2.0
//
// Image feature extractors: a trainable 4-scale student (strides 4/8/16/32,
// shared across views and frames) and a frozen seed-fixed teacher that stands
// in for a pretrained vision encoder behind the same interface.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "soq/nn.hpp"
#include "soq/nn_ops.hpp"

namespace soq {

struct Conv {
    ad::Var W, b;
    int stride = 1, pad = 1;

    Conv() = default;
    Conv(nn::ParamStore& ps, const std::string& name, int64_t cin, int64_t cout, int64_t k,
         int stride_, int pad_)
        : stride(stride_), pad(pad_) {
        const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
        W = ps.normal_param(name + ".W", {cout, cin, k, k}, std);
        b = ps.zeros_param(name + ".b", {cout});
    }

    ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, W, b, stride, pad); }
};

struct FeaturePyramid {
    std::array<ad::Var, 4> levels;  // strides 4, 8, 16, 32; each [D, h, w]
    static constexpr std::array<int, 4> strides = {4, 8, 16, 32};
};

struct BackboneConfig {
    int image_width = 128, image_height = 64;
    int d_img = 64;  // pyramid channel width
    int d_teacher = 32;
};

class StudentBackbone {
  public:
    StudentBackbone() = default;
    StudentBackbone(nn::ParamStore& ps, const std::string& name, const BackboneConfig& cfg)
        : cfg_(cfg),
          stem1_(ps, name + ".stem1", 3, 16, 3, 2, 1),
          stem2_(ps, name + ".stem2", 16, 32, 3, 2, 1),
          stage3_(ps, name + ".stage3", 32, 48, 3, 2, 1),
          stage4_(ps, name + ".stage4", 48, 64, 3, 2, 1),
          stage5_(ps, name + ".stage5", 64, 64, 3, 2, 1),
          lat0_(ps, name + ".lat0", 32, cfg.d_img, 1, 1, 0),
          lat1_(ps, name + ".lat1", 48, cfg.d_img, 1, 1, 0),
          lat2_(ps, name + ".lat2", 64, cfg.d_img, 1, 1, 0),
          lat3_(ps, name + ".lat3", 64, cfg.d_img, 1, 1, 0) {}

    // image: [3,H,W] in [0,1]
    FeaturePyramid forward(const ad::Var& image) const {
        SOQ_REQUIRE(image->shape.size() == 3 && image->shape[0] == 3 &&
                        image->shape[1] == cfg_.image_height && image->shape[2] == cfg_.image_width,
                    "StudentBackbone: image shape mismatch");
        auto s2 = ad::relu(stem1_(image));
        auto s4 = ad::relu(stem2_(s2));
        auto s8 = ad::relu(stage3_(s4));
        auto s16 = ad::relu(stage4_(s8));
        auto s32 = ad::relu(stage5_(s16));
        FeaturePyramid pyr;
        pyr.levels[0] = lat0_(s4);
        pyr.levels[1] = lat1_(s8);
        pyr.levels[2] = lat2_(s16);
        pyr.levels[3] = lat3_(s32);
        return pyr;
    }

    // frames x views of pyramids
    std::vector<std::vector<FeaturePyramid>> extract(
        const std::vector<std::vector<ad::Var>>& images) const {
        std::vector<std::vector<FeaturePyramid>> out(images.size());
        for (size_t f = 0; f < images.size(); ++f) {
            out[f].reserve(images[f].size());
            for (const auto& img : images[f]) out[f].push_back(forward(img));
        }
        return out;
    }

  private:
    BackboneConfig cfg_;
    Conv stem1_, stem2_, stage3_, stage4_, stage5_;
    Conv lat0_, lat1_, lat2_, lat3_;
};

// Frozen random network standing in for a pretrained encoder. Single scale at
// stride 16; outputs are detached so no gradient can reach its inputs either.
class TeacherBackbone {
  public:
    TeacherBackbone() = default;
    TeacherBackbone(nn::ParamStore& ps, const std::string& name, const BackboneConfig& cfg)
        : cfg_(cfg),
          c1_(ps, name + ".c1", 3, 16, 3, 2, 1),
          c2_(ps, name + ".c2", 16, 24, 3, 2, 1),
          c3_(ps, name + ".c3", 24, 32, 3, 2, 1),
          c4_(ps, name + ".c4", 32, cfg.d_teacher, 3, 2, 1),
          prefix_(name) {
        freeze(ps);
    }

    void freeze(nn::ParamStore& ps) const { ps.set_trainable(prefix_ + ".", false); }

    // image: [3,H,W] -> detached [d_teacher, H/16, W/16]
    ad::Var forward(const ad::Var& image) const {
        SOQ_REQUIRE(image->shape.size() == 3 && image->shape[0] == 3,
                    "TeacherBackbone: image shape");
        auto x = ad::relu(c1_(image));
        x = ad::relu(c2_(x));
        x = ad::relu(c3_(x));
        x = c4_(x);
        return ad::detach(x);
    }

    std::vector<ad::Var> extract_views(const std::vector<ad::Var>& images) const {
        std::vector<ad::Var> out;
        out.reserve(images.size());
        for (const auto& img : images) out.push_back(forward(img));
        return out;
    }

  private:
    BackboneConfig cfg_;
    Conv c1_, c2_, c3_, c4_;
    std::string prefix_;
};

}  // namespace soq
