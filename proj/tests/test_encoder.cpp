// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "soq/encoder.hpp"
#include "test_support.hpp"

using namespace soq;
using Catch::Approx;
using soq::test::gradcheck;
using soq::test::random_leaf;

namespace {

// tiny encoder geometry used across these tests
EncoderConfig tiny_config() {
    EncoderConfig cfg;
    cfg.num_queries = 4;
    cfg.num_layers = 2;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.points_schedule = {1, 2};
    cfg.sample_points = 2;
    cfg.history_frames = 2;
    cfg.d_img = 4;
    cfg.ffn_hidden = 16;
    return cfg;
}

// single forward camera, W=128 H=64
CameraRig tiny_rig() { return CameraRig::ring(1, 128, 64, 70.0, 1.5); }

FeaturePyramid random_pyramid(Rng& rng, int d_img, int h, int w, bool requires_grad = false) {
    FeaturePyramid pyr;
    for (int l = 0; l < 4; ++l) {
        const int s = FeaturePyramid::strides[l];
        const int64_t hh = (h + s - 1) / s, ww = (w + s - 1) / s;
        std::vector<double> v(static_cast<size_t>(d_img) * hh * ww);
        for (auto& x : v) x = rng.normal();
        pyr.levels[l] = requires_grad ? ad::leaf({d_img, hh, ww}, std::move(v))
                                      : ad::constant({d_img, hh, ww}, std::move(v));
    }
    return pyr;
}

std::vector<FrameContext> tiny_frames(Rng& rng, int count, int d_img, bool requires_grad = false) {
    std::vector<FrameContext> frames(count);
    for (int f = 0; f < count; ++f) {
        frames[f].rel_pose = f == 0 ? Pose::identity()
                                    : Pose::yaw(0.02 * f, {-0.4 * f, 0.0, 0.0});
        frames[f].views.push_back(random_pyramid(rng, d_img, 64, 128, requires_grad));
    }
    return frames;
}

}  // namespace

TEST_CASE("init_queries respects range and adaptive scaling") {
    nn::ParamStore ps(101);
    auto cfg = tiny_config();
    OccupancyEncoder enc(ps, "enc", cfg);
    EgoState still;  // zero velocity
    auto qs = enc.init_queries(still);
    for (int64_t i = 0; i < qs.positions->rows(); ++i) {
        for (int c = 0; c < 3; ++c) {
            CHECK(qs.positions->val[i * 3 + c] >= cfg.range_min[c]);
            CHECK(qs.positions->val[i * 3 + c] <= cfg.range_max[c]);
        }
    }
    SECTION("forward range extended by |v| * T * dt") {
        EgoState moving;
        moving.velocity = {10.0, 0.0};  // T=6, dt=0.5 -> +30 m
        auto ext = enc.init_queries(moving);
        // same sigmoid gate maps to the stretched interval
        for (int64_t i = 0; i < ext.positions->rows(); ++i) {
            const double gate = (qs.positions->val[i * 3] - cfg.range_min[0]) /
                                (cfg.range_max[0] - cfg.range_min[0]);
            const double expected = cfg.range_min[0] +
                                    gate * (cfg.range_max[0] + 30.0 - cfg.range_min[0]);
            CHECK(ext.positions->val[i * 3] == Approx(expected).margin(1e-9));
            CHECK(ext.positions->val[i * 3 + 1] == Approx(qs.positions->val[i * 3 + 1]));
        }
    }
    SECTION("repeated calls are identical") {
        auto again = enc.init_queries(still);
        CHECK(again.positions->val == qs.positions->val);
        CHECK(again.embeddings->val == qs.embeddings->val);
    }
}

TEST_CASE("sample_pyramids interpolation contract") {
    auto rig = tiny_rig();
    const Camera& cam = rig[0];
    Rng rng(7);
    std::vector<FrameContext> frames(1);
    frames[0].rel_pose = Pose::identity();
    frames[0].views.push_back(random_pyramid(rng, 4, 64, 128));
    const auto& level0 = frames[0].views[0].levels[0];  // stride 4, [4,16,32]

    SECTION("exact lattice node returns the node value") {
        // stride-4 node (nx,ny): pixel u = 4*nx + 1.5, v = 4*ny + 1.5
        const int nx = 7, ny = 5;
        const Vec3 p = cam.back_project(4 * nx + 1.5, 4 * ny + 1.5, 6.0);
        auto points = ad::constant({1, 3}, {p[0], p[1], p[2]});
        auto out = ops::sample_pyramids(points, frames, rig);  // [4, 4]
        for (int c = 0; c < 4; ++c)
            CHECK(out->val[0 * 4 + c] == Approx(level0->val[c * 16 * 32 + ny * 32 + nx]).margin(1e-9));
    }
    SECTION("midpoint between two nodes is their mean") {
        const int nx = 7, ny = 5;
        const Vec3 p = cam.back_project(4 * (nx + 0.5) + 1.5, 4 * ny + 1.5, 6.0);
        auto points = ad::constant({1, 3}, {p[0], p[1], p[2]});
        auto out = ops::sample_pyramids(points, frames, rig);
        for (int c = 0; c < 4; ++c) {
            const double a = level0->val[c * 16 * 32 + ny * 32 + nx];
            const double b = level0->val[c * 16 * 32 + ny * 32 + nx + 1];
            CHECK(out->val[0 * 4 + c] == Approx(0.5 * (a + b)).margin(1e-9));
        }
    }
    SECTION("point behind the camera contributes zeros") {
        auto points = ad::constant({1, 3}, {-5.0, 0.0, 1.0});
        auto out = ops::sample_pyramids(points, frames, rig);
        for (double x : out->val) CHECK(x == 0.0);
    }
    SECTION("gradcheck w.r.t. points and maps") {
        std::vector<FrameContext> gframes(2);
        gframes[0].rel_pose = Pose::identity();
        gframes[1].rel_pose = Pose::yaw(0.05, {-0.7, 0.1, 0.0});
        gframes[0].views.push_back(random_pyramid(rng, 3, 64, 128, true));
        gframes[1].views.push_back(random_pyramid(rng, 3, 64, 128, true));
        auto points = ad::leaf({3, 3}, {6.0, 0.5, 1.2, 4.0, -1.0, 0.8, 8.0, 2.0, 2.0});
        auto weights = random_leaf({3 * 2 * 4, 3}, rng);
        weights->requires_grad = false;
        auto f = [&] {
            return ad::sum(ad::mul(ops::sample_pyramids(points, gframes, rig), weights));
        };
        CHECK(gradcheck(points, f, 1e-6) < 1e-4);
        CHECK(gradcheck(gframes[0].views[0].levels[0], f) < 1e-5);
        CHECK(gradcheck(gframes[1].views[0].levels[2], f) < 1e-5);
    }
}

TEST_CASE("adaptive_mix") {
    nn::ParamStore ps(55);
    auto cfg = tiny_config();
    OccupancyEncoder enc(ps, "enc", cfg);
    const int64_t N = cfg.num_queries;
    const int64_t P = cfg.slots_per_query();
    Rng rng(3);

    SECTION("zero samples give the bias-path output") {
        auto emb = enc.init_queries(EgoState{}).embeddings;
        auto zero_samples = ad::zeros({N * cfg.history_frames * cfg.sample_points * 4, cfg.d_img});
        auto out1 = enc.adaptive_mix(emb, zero_samples, 0);
        auto out2 = enc.adaptive_mix(emb, zero_samples, 0);
        CHECK(out1->shape == ad::Shape{N, cfg.dim});
        CHECK(all_finite(out1->val));
        CHECK(out1->val == out2->val);
    }
    SECTION("shape contract for any sample content") {
        auto emb = random_leaf({N, cfg.dim}, rng);
        auto samples = random_leaf({N * P / 1, cfg.d_img}, rng);  // (S*N)*F*4 rows
        auto out = enc.adaptive_mix(emb, samples, 1);
        CHECK(out->shape == ad::Shape{N, cfg.dim});
    }
    SECTION("gradient w.r.t. samples matches finite differences") {
        auto emb = random_leaf({N, cfg.dim}, rng, 0.5);
        auto samples = random_leaf({N * P, cfg.d_img}, rng, 0.5);
        auto f = [&] { return ad::sum(ad::square(enc.adaptive_mix(emb, samples, 0))); };
        CHECK(gradcheck(samples, f, 1e-6) < 1e-3);
        CHECK(gradcheck(emb, f, 1e-6) < 1e-3);
    }
}

TEST_CASE("spatial MHSA") {
    nn::ParamStore ps(66);
    SpatialMhsa attn(ps, "mhsa", 8, 2);
    Rng rng(9);
    auto emb = random_leaf({5, 8}, rng);
    auto pos = random_leaf({5, 3}, rng, 2.0);

    SECTION("forcing tau to zero reduces to standard attention") {
        auto out = attn(emb, pos, /*force_zero_tau=*/true);
        // hand-rolled reference from the same projections
        auto q = attn.q_(emb), k = attn.k_(emb), v = attn.v_(emb);
        const int64_t dh = 4;
        std::vector<double> concat(5 * 8);
        for (int h = 0; h < 2; ++h) {
            for (int i = 0; i < 5; ++i) {
                std::vector<double> logits(5);
                for (int j = 0; j < 5; ++j) {
                    double s = 0;
                    for (int c = 0; c < dh; ++c)
                        s += q->val[i * 8 + h * dh + c] * k->val[j * 8 + h * dh + c];
                    logits[j] = s / std::sqrt(4.0);
                }
                double mx = *std::max_element(logits.begin(), logits.end());
                double z = 0;
                for (double& l : logits) {
                    l = std::exp(l - mx);
                    z += l;
                }
                for (int c = 0; c < dh; ++c) {
                    double acc = 0;
                    for (int j = 0; j < 5; ++j)
                        acc += logits[j] / z * v->val[j * 8 + h * dh + c];
                    concat[i * 8 + h * dh + c] = acc;
                }
            }
        }
        auto ref = attn.o_(ad::constant({5, 8}, concat));
        for (size_t i = 0; i < ref->val.size(); ++i)
            CHECK(out->val[i] == Approx(ref->val[i]).margin(1e-6));
    }
    SECTION("coincident positions also reduce to standard attention") {
        std::vector<double> same(5 * 3);
        for (int i = 0; i < 5; ++i) {
            same[i * 3] = 1.0;
            same[i * 3 + 1] = -2.0;
            same[i * 3 + 2] = 0.5;
        }
        auto pos_same = ad::constant({5, 3}, same);
        auto a = attn(emb, pos_same, false);
        auto b = attn(emb, pos_same, true);
        for (size_t i = 0; i < a->val.size(); ++i)
            CHECK(a->val[i] == Approx(b->val[i]).margin(1e-9));
    }
    SECTION("3-query hand case matches direct formula evaluation") {
        nn::ParamStore hps(1);
        SpatialMhsa hand(hps, "hand", 2, 1);
        // identity projections, zero tau weights, bias -> softplus(b) = tau
        auto set_identity = [](nn::Linear& l) {
            std::fill(l.W->val.begin(), l.W->val.end(), 0.0);
            l.W->val[0] = 1.0;
            l.W->val[3] = 1.0;
            std::fill(l.b->val.begin(), l.b->val.end(), 0.0);
        };
        set_identity(hand.q_);
        set_identity(hand.k_);
        set_identity(hand.v_);
        set_identity(hand.o_);
        std::fill(hand.tau_.W->val.begin(), hand.tau_.W->val.end(), 0.0);
        const double tau_target = 0.7;
        hand.tau_.b->val[0] = std::log(std::exp(tau_target) - 1.0);  // softplus inverse

        auto q3 = ad::constant({3, 2}, {1.0, 0.0, 0.5, -1.0, -0.25, 2.0});
        auto p3 = ad::constant({3, 3}, {0, 0, 0, 1, 0, 0, 0, 2, 0});
        auto out = hand(q3, p3);

        // direct evaluation of softmax_j(q_i.q_j / sqrt(2) - tau * |p_i-p_j|) v_j
        const double inv = 1.0 / std::sqrt(2.0);
        const double qv[3][2] = {{1.0, 0.0}, {0.5, -1.0}, {-0.25, 2.0}};
        const double pv[3][3] = {{0, 0, 0}, {1, 0, 0}, {0, 2, 0}};
        for (int i = 0; i < 3; ++i) {
            double a[3], mx = -1e300;
            for (int j = 0; j < 3; ++j) {
                const double dot = qv[i][0] * qv[j][0] + qv[i][1] * qv[j][1];
                const double dx = pv[i][0] - pv[j][0], dy = pv[i][1] - pv[j][1],
                             dz = pv[i][2] - pv[j][2];
                a[j] = dot * inv - tau_target * std::sqrt(dx * dx + dy * dy + dz * dz);
                mx = std::max(mx, a[j]);
            }
            double z = 0;
            for (int j = 0; j < 3; ++j) {
                a[j] = std::exp(a[j] - mx);
                z += a[j];
            }
            double expect[2] = {0, 0};
            for (int j = 0; j < 3; ++j)
                for (int c = 0; c < 2; ++c) expect[c] += a[j] / z * qv[j][c];
            for (int c = 0; c < 2; ++c) CHECK(out->val[i * 2 + c] == Approx(expect[c]).margin(1e-6));
        }
    }
    SECTION("attention rows sum to one and tau is nonnegative") {
        auto tau = ad::softplus(attn.tau_(emb));
        for (double t : tau->val) CHECK(t >= 0.0);
        auto dist = ops::pairwise_distance(pos);
        auto q = attn.q_(emb), k = attn.k_(emb);
        auto qh = ad::slice_cols(q, 0, 4);
        auto kh = ad::slice_cols(k, 0, 4);
        auto logits = ad::sub(ad::scale(ad::matmul(qh, ad::transpose2d(kh)), 0.5),
                              ad::mul_colvec(dist, ad::slice_cols(tau, 0, 1)));
        auto soft = ad::softmax_rows(logits);
        for (int i = 0; i < 5; ++i) {
            double row = 0;
            for (int j = 0; j < 5; ++j) row += soft->val[i * 5 + j];
            CHECK(row == Approx(1.0).margin(1e-12));
        }
    }
    SECTION("pairwise distance gradcheck") {
        auto w = random_leaf({5, 5}, rng);
        w->requires_grad = false;
        auto f = [&] { return ad::sum(ad::mul(ops::pairwise_distance(pos), w)); };
        CHECK(gradcheck(pos, f) < 1e-5);
    }
}

TEST_CASE("decode_points") {
    nn::ParamStore ps(12);
    PointDecoder dec(ps, "dec", 8, 2, 4, 4.0);
    Rng rng(17);
    auto emb = random_leaf({3, 8}, rng);
    auto pos = random_leaf({3, 3}, rng, 2.0);

    SECTION("zero-initialized head leaves points at query positions") {
        LayerPoints lp;
        ad::Var mean_pos;
        dec.decode(emb, pos, lp, mean_pos);
        CHECK(lp.points->shape == ad::Shape{6, 3});
        CHECK(lp.logits->shape == ad::Shape{6, 4});
        for (int pt = 0; pt < 2; ++pt)
            for (int i = 0; i < 3; ++i)
                for (int c = 0; c < 3; ++c)
                    CHECK(lp.points->val[(pt * 3 + i) * 3 + c] == Approx(pos->val[i * 3 + c]));
        CHECK(mean_pos->val == pos->val);
    }
    SECTION("symmetric offsets keep the mean at the query position") {
        // bias so offsets are (+1,0,0) and (-1,0,0): tanh(b)*4 = +-1
        const double b = std::atanh(0.25);
        dec.head_.b->val[0] = b;        // point 0, x
        dec.head_.b->val[3 + 4] = -b;   // point 1, x
        LayerPoints lp;
        ad::Var mean_pos;
        dec.decode(emb, pos, lp, mean_pos);
        CHECK(lp.points->val[0 * 3 + 0] == Approx(pos->val[0] + 1.0));
        CHECK(lp.points->val[(1 * 3 + 0) * 3 + 0] == Approx(pos->val[0] - 1.0));
        for (size_t i = 0; i < mean_pos->val.size(); ++i)
            CHECK(mean_pos->val[i] == Approx(pos->val[i]).margin(1e-12));
    }
}

TEST_CASE("encoder forward") {
    nn::ParamStore ps(202);
    auto cfg = tiny_config();
    OccupancyEncoder enc(ps, "enc", cfg);
    auto rig = tiny_rig();
    Rng rng(23);
    auto frames = tiny_frames(rng, cfg.history_frames, cfg.d_img);
    EgoState ego;
    ego.velocity = {2.0, 0.0};

    auto out = enc.forward(frames, rig, ego);
    SECTION("schedule controls per-layer point counts") {
        REQUIRE(out.layers.size() == 2);
        CHECK(out.layers[0].points->rows() == cfg.num_queries * 1);
        CHECK(out.layers[1].points->rows() == cfg.num_queries * 2);
        CHECK(out.final_queries.embeddings->shape == ad::Shape{cfg.num_queries, cfg.dim});
        CHECK(out.final_queries.positions->shape == ad::Shape{cfg.num_queries, 3});
    }
    SECTION("desk and paper preset arithmetic") {
        EncoderConfig desk;
        CHECK(desk.num_queries * desk.points_schedule.back() == 512);
        EncoderConfig paper;
        paper.num_queries = 600;
        paper.num_layers = 6;
        paper.dim = 1024;
        paper.heads = 32;
        paper.points_schedule = {2, 4, 16, 32, 56, 112};
        paper.validate();
        CHECK(paper.num_queries * paper.points_schedule.back() == 600 * 112);
    }
    SECTION("permutation equivariance over queries") {
        std::vector<int64_t> perm = {2, 0, 3, 1};
        // permute the learned query parameters; all other parameters are
        // query-agnostic, so outputs must permute identically
        auto emb0 = enc.query_embed_->val;
        auto pos0 = enc.query_pos_raw_->val;
        for (int64_t i = 0; i < cfg.num_queries; ++i) {
            for (int64_t c = 0; c < cfg.dim; ++c)
                enc.query_embed_->val[i * cfg.dim + c] = emb0[perm[i] * cfg.dim + c];
            for (int c = 0; c < 3; ++c)
                enc.query_pos_raw_->val[i * 3 + c] = pos0[perm[i] * 3 + c];
        }
        auto out2 = enc.forward(frames, rig, ego);
        for (int64_t i = 0; i < cfg.num_queries; ++i)
            for (int64_t c = 0; c < cfg.dim; ++c)
                CHECK(out2.final_queries.embeddings->val[i * cfg.dim + c] ==
                      Approx(out.final_queries.embeddings->val[perm[i] * cfg.dim + c])
                          .margin(1e-5));
        // layer-1 points: rows (pt*N + i)
        for (int pt = 0; pt < 2; ++pt)
            for (int64_t i = 0; i < cfg.num_queries; ++i)
                for (int c = 0; c < 3; ++c)
                    CHECK(out2.layers[1].points->val[(pt * cfg.num_queries + i) * 3 + c] ==
                          Approx(out.layers[1].points->val[(pt * cfg.num_queries + perm[i]) * 3 + c])
                              .margin(1e-5));
    }
}

TEST_CASE("encoder_loss") {
    auto cfg = tiny_config();
    SECTION("perfect predictions with confident logits and zero distill -> ~0") {
        // construct an output whose points coincide with gt and whose logits
        // are confidently correct
        OccupancyPointSet gt;
        gt.num_classes = cfg.num_classes;
        gt.push({1, 0, 0}, 2);
        gt.push({0, 1, 0}, 5);
        EncoderOutput out;
        out.initial.positions = ad::constant({2, 3}, {1, 0, 0, 0, 1, 0});
        out.initial.embeddings = ad::zeros({2, static_cast<int64_t>(cfg.dim)});
        LayerPoints lp;
        lp.points = ad::constant({2, 3}, {1, 0, 0, 0, 1, 0});
        std::vector<double> logits(2 * cfg.num_classes, 0.0);
        logits[0 * cfg.num_classes + 2] = 40.0;
        logits[1 * cfg.num_classes + 5] = 40.0;
        lp.logits = ad::constant({2, static_cast<int64_t>(cfg.num_classes)}, logits);
        out.layers.push_back(lp);
        EncoderConfig one = cfg;
        one.num_layers = 1;
        one.points_schedule = {1};
        auto loss = encoder_loss(out, gt, nullptr, one);
        CHECK(loss->val[0] == Approx(0.0).margin(1e-10));
    }
    SECTION("small instance equals hand-computed CD + focal sum") {
        OccupancyPointSet gt;
        gt.num_classes = cfg.num_classes;
        gt.push({0, 0, 0}, 1);
        gt.push({2, 0, 0}, 3);
        gt.push({0, 2, 0}, 4);
        EncoderOutput out;
        out.initial.positions = ad::constant({2, 3}, {0.5, 0, 0, 0, 0.5, 0});
        LayerPoints lp;
        lp.points = ad::constant({2, 3}, {1.5, 0, 0, 0.25, 0.25, 0});
        std::vector<double> logits(2 * cfg.num_classes, 0.1);
        logits[0 * cfg.num_classes + 3] = 1.0;
        logits[1 * cfg.num_classes + 1] = 0.4;
        lp.logits = ad::constant({2, static_cast<int64_t>(cfg.num_classes)}, logits);
        out.layers.push_back(lp);
        EncoderConfig one = cfg;
        one.num_layers = 1;
        one.points_schedule = {1};

        OccupancyPointSet p0, pl;
        p0.num_classes = cfg.num_classes;
        pl.num_classes = cfg.num_classes;
        p0.push({0.5, 0, 0}, 0);
        p0.push({0, 0.5, 0}, 0);
        pl.push({1.5, 0, 0}, 0);
        pl.push({0.25, 0.25, 0}, 0);
        // matched labels: nearest gt to (1.5,0,0) is (2,0,0)->3; to (.25,.25,0) is (0,0,0)->1
        std::vector<double> logit_rows(lp.logits->val);
        const double expected = chamfer_distance(p0, gt) + chamfer_distance(pl, gt) +
                                one.lambda_focal *
                                    focal_loss(logit_rows, cfg.num_classes, {3, 1}, 2.0, 0.25);
        auto loss = encoder_loss(out, gt, nullptr, one);
        CHECK(loss->val[0] == Approx(expected).epsilon(1e-12));

        // lambda_focal = 0 removes the semantic term
        EncoderConfig nofocal = one;
        nofocal.lambda_focal = 0.0;
        auto loss2 = encoder_loss(out, gt, nullptr, nofocal);
        CHECK(loss2->val[0] == Approx(chamfer_distance(p0, gt) + chamfer_distance(pl, gt)));

        // distill term is added through
        auto loss3 = encoder_loss(out, gt, ad::scalar(0.125), one);
        CHECK(loss3->val[0] == Approx(expected + 0.125));
    }
    SECTION("empty gt rejected") {
        EncoderOutput out;
        out.initial.positions = ad::constant({1, 3}, {0, 0, 0});
        OccupancyPointSet empty;
        CHECK_THROWS_AS(encoder_loss(out, empty, nullptr, cfg), InvalidArgument);
    }
}

TEST_CASE("end-to-end encoder_loss gradient vs finite differences") {
    nn::ParamStore ps(303);
    auto cfg = tiny_config();
    OccupancyEncoder enc(ps, "enc", cfg);
    auto rig = tiny_rig();
    Rng rng(31);
    auto frames = tiny_frames(rng, cfg.history_frames, cfg.d_img, /*requires_grad=*/true);
    EgoState ego;
    ego.velocity = {1.5, 0.2};

    OccupancyPointSet gt;
    gt.num_classes = cfg.num_classes;
    for (int i = 0; i < 12; ++i)
        gt.push({rng.uniform(0.5, 7.0), rng.uniform(-4, 4), rng.uniform(0.2, 2.0)},
                static_cast<int>(rng.uniform_int(cfg.num_classes)));

    // move the zero-initialized decode heads off their tie point: with zero
    // offsets every query's k points coincide, and the nearest-neighbor
    // matching has no unique minimizer there
    for (int l = 0; l < cfg.num_layers; ++l) {
        auto head = ps.find("enc.layer" + std::to_string(l) + ".decode.head.b");
        for (auto& x : head->val) x = rng.normal(0.0, 0.05);
    }

    auto loss_fn = [&] {
        auto out = enc.forward(frames, rig, ego);
        return encoder_loss(out, gt, nullptr, cfg);
    };
    // a cross-section of the parameter groups
    CHECK(gradcheck(ps.find("enc.query_embed"), loss_fn, 1e-6) < 1e-3);
    CHECK(gradcheck(ps.find("enc.query_pos"), loss_fn, 1e-6) < 1e-3);
    CHECK(gradcheck(ps.find("enc.layer0.offsets.W"), loss_fn, 1e-6) < 1e-3);
    CHECK(gradcheck(ps.find("enc.layer0.mix.cgen.W"), loss_fn, 1e-6) < 1e-3);
    CHECK(gradcheck(ps.find("enc.layer1.mhsa.tau.W"), loss_fn, 1e-6) < 1e-3);
    CHECK(gradcheck(ps.find("enc.layer1.decode.head.W"), loss_fn, 1e-6) < 1e-3);
    CHECK(gradcheck(ps.find("enc.layer0.ffn.fc1.W"), loss_fn, 1e-6) < 1e-3);
}
