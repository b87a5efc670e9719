// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>

#include "soq/geometry.hpp"
#include "soq/sovg.hpp"
#include "test_support.hpp"

using namespace soq;
using Catch::Approx;

namespace {

VoxelGrid random_grid(Rng& rng, int nx, int ny, int nz, int classes, double occupancy_rate) {
    VoxelGrid g(nx, ny, nz, 0.5, {-nx * 0.25, -ny * 0.25, 0.0}, classes);
    for (auto& c : g.cells)
        if (rng.uniform() < occupancy_rate) c = static_cast<uint8_t>(rng.uniform_int(classes));
    return g;
}

OccupancyPointSet random_points(Rng& rng, int m, int classes, double extent = 5.0) {
    OccupancyPointSet ps;
    ps.num_classes = classes;
    for (int i = 0; i < m; ++i)
        ps.push({rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                 rng.uniform(-extent, extent)},
                static_cast<int>(rng.uniform_int(classes)));
    return ps;
}

// independent pairwise-distance Chamfer oracle
double chamfer_oracle(const OccupancyPointSet& P, const OccupancyPointSet& G) {
    double total = 0.0;
    for (const auto& p : P.coords) {
        double best = sqdist(p, G.coords[0]);
        for (const auto& g : G.coords) best = std::min(best, sqdist(p, g));
        total += best;
    }
    for (const auto& g : G.coords) {
        double best = sqdist(g, P.coords[0]);
        for (const auto& p : P.coords) best = std::min(best, sqdist(g, p));
        total += best;
    }
    return total;
}

// per-voxel confusion-matrix mIoU oracle
double miou_oracle(const VoxelGrid& pred, const VoxelGrid& gt) {
    const int C = gt.num_classes;
    std::vector<double> tp(C, 0), fp(C, 0), fn(C, 0);
    for (size_t i = 0; i < gt.cells.size(); ++i) {
        const int p = pred.cells[i], g = gt.cells[i];
        for (int c = 0; c < C; ++c) {
            if (p == c && g == c) tp[c] += 1;
            if (p == c && g != c) fp[c] += 1;
            if (p != c && g == c) fn[c] += 1;
        }
    }
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < C; ++c) {
        const double denom = tp[c] + fp[c] + fn[c];
        if (denom > 0) {
            sum += tp[c] / denom;
            ++present;
        }
    }
    return present ? sum / present : 0.0;
}

}  // namespace

TEST_CASE("sparsify_grid") {
    SECTION("all-free grid yields empty set") {
        VoxelGrid g(4, 4, 2, 0.4, {0, 0, 0}, 3);
        CHECK(sparsify_grid(g).empty());
    }
    SECTION("cell-center formula") {
        VoxelGrid g(4, 4, 2, 0.4, {-1.0, -1.0, 0.0}, 3);
        g.set(0, 0, 0, 1);
        auto ps = sparsify_grid(g);
        REQUIRE(ps.size() == 1);
        CHECK(ps.coords[0][0] == Approx(-0.8));
        CHECK(ps.coords[0][1] == Approx(-0.8));
        CHECK(ps.coords[0][2] == Approx(0.2));
        CHECK(ps.labels[0] == 1);
        // independent loop over every cell
        Rng rng(3);
        auto g2 = random_grid(rng, 6, 5, 3, 4, 0.3);
        auto ps2 = sparsify_grid(g2);
        size_t k = 0;
        for (int ix = 0; ix < g2.nx; ++ix)
            for (int iy = 0; iy < g2.ny; ++iy)
                for (int iz = 0; iz < g2.nz; ++iz) {
                    if (g2.at(ix, iy, iz) == g2.free_index()) continue;
                    REQUIRE(k < ps2.size());
                    CHECK(ps2.coords[k][0] == Approx(g2.origin[0] + (ix + 0.5) * g2.resolution));
                    CHECK(ps2.coords[k][1] == Approx(g2.origin[1] + (iy + 0.5) * g2.resolution));
                    CHECK(ps2.coords[k][2] == Approx(g2.origin[2] + (iz + 0.5) * g2.resolution));
                    ++k;
                }
        CHECK(k == ps2.size());
    }
    SECTION("cardinality preserved") {
        Rng rng(11);
        auto g = random_grid(rng, 8, 8, 4, 5, 0.2);
        size_t occupied = 0;
        for (auto c : g.cells)
            if (c != g.free_index()) ++occupied;
        CHECK(sparsify_grid(g).size() == occupied);
    }
}

TEST_CASE("chamfer_distance") {
    SECTION("identical sets give zero") {
        Rng rng(5);
        auto ps = random_points(rng, 20, 3);
        CHECK(chamfer_distance(ps, ps) == Approx(0.0).margin(1e-12));
    }
    SECTION("hand cases") {
        OccupancyPointSet P, G;
        P.push({0, 0, 0}, 0);
        G.push({1, 0, 0}, 0);
        CHECK(chamfer_distance(P, G) == Approx(2.0));
        // two-vs-one: forward (1+1), backward (1); oracle agrees
        P.push({2, 0, 0}, 0);
        CHECK(chamfer_distance(P, G) == Approx(3.0));
        CHECK(chamfer_distance(P, G) == Approx(chamfer_oracle(P, G)));
        // one-vs-two: forward (1), backward (1+4)
        G.push({2, 0, 0}, 0);
        OccupancyPointSet single;
        single.push({0, 0, 0}, 0);
        CHECK(chamfer_distance(single, G) == Approx(6.0));
        CHECK(chamfer_distance(single, G) == Approx(chamfer_oracle(single, G)));
    }
    SECTION("empty input is an error") {
        OccupancyPointSet P, empty;
        P.push({0, 0, 0}, 0);
        CHECK_THROWS_AS(chamfer_distance(P, empty), InvalidArgument);
        CHECK_THROWS_AS(chamfer_distance(empty, P), InvalidArgument);
    }
    SECTION("symmetry, positivity, permutation invariance") {
        Rng rng(17);
        for (int trial = 0; trial < 20; ++trial) {
            auto P = random_points(rng, 5 + static_cast<int>(rng.uniform_int(20)), 3);
            auto G = random_points(rng, 5 + static_cast<int>(rng.uniform_int(20)), 3);
            const double d = chamfer_distance(P, G);
            CHECK(d == Approx(chamfer_distance(G, P)));
            CHECK(d >= 0.0);
            CHECK(d == Approx(chamfer_oracle(P, G)));
            // permute P
            auto Pp = P;
            for (size_t i = Pp.size(); i > 1; --i) {
                const size_t j = rng.uniform_int(i);
                std::swap(Pp.coords[i - 1], Pp.coords[j]);
                std::swap(Pp.labels[i - 1], Pp.labels[j]);
            }
            CHECK(chamfer_distance(Pp, G) == Approx(d));
        }
    }
    SECTION("normalized variant") {
        OccupancyPointSet P, G;
        P.push({0, 0, 0}, 0);
        P.push({2, 0, 0}, 0);
        G.push({1, 0, 0}, 0);
        CHECK(chamfer_distance(P, G, true) == Approx((1.0 + 1.0) / 2.0 + 1.0 / 1.0));
    }
}

TEST_CASE("chamfer analytic gradient vs finite differences") {
    Rng rng(23);
    auto G = random_points(rng, 12, 2, 2.0);
    std::vector<double> coords;
    for (int i = 0; i < 8; ++i) {
        coords.push_back(rng.uniform(-2, 2));
        coords.push_back(rng.uniform(-2, 2));
        coords.push_back(rng.uniform(-2, 2));
    }
    auto P = ad::leaf({8, 3}, coords);
    auto rebuild = [&] { return ops::chamfer(P, G.coords); };
    CHECK(soq::test::gradcheck(P, rebuild, 1e-5) < 1e-4);
}

TEST_CASE("match_points") {
    SECTION("identity on distinct sets") {
        Rng rng(29);
        auto P = random_points(rng, 30, 3);
        auto m = match_points(P, P);
        for (size_t i = 0; i < P.size(); ++i) CHECK(m[i] == static_cast<int>(i));
    }
    SECTION("nearest neighbor hand case") {
        OccupancyPointSet P, G;
        P.push({0.1, 0, 0}, 0);
        G.push({0, 0, 0}, 0);
        G.push({5, 5, 5}, 1);
        CHECK(match_points(P, G) == std::vector<int>{0});
    }
    SECTION("empty target is an error") {
        OccupancyPointSet P, empty;
        P.push({0, 0, 0}, 0);
        CHECK_THROWS_AS(match_points(P, empty), InvalidArgument);
    }
    SECTION("random 50v50 equals brute-force oracle") {
        Rng rng(31);
        auto P = random_points(rng, 50, 4);
        auto G = random_points(rng, 50, 4);
        auto got = match_points(P, G);
        auto want = match_points_brute(P.coords, G.coords);
        CHECK(got == want);
    }
    SECTION("grid-hash accelerator is bit-identical to brute force") {
        Rng rng(37);
        for (int trial = 0; trial < 10; ++trial) {
            auto P = random_points(rng, 64, 4);
            auto G = random_points(rng, 80, 4);
            // inject exact duplicates to exercise the tie rule
            G.coords[10] = G.coords[3];
            auto brute = match_points(P, G, NnBackend::BruteForce);
            auto hashed = match_points(P, G, NnBackend::GridHash);
            CHECK(brute == hashed);
        }
    }
}

TEST_CASE("focal_loss") {
    SECTION("confident correct logits -> ~0") {
        std::vector<double> logits = {30.0, 0.0, 0.0, 0.0};
        CHECK(focal_loss(logits, 4, {0}) == Approx(0.0).margin(1e-10));
    }
    SECTION("gamma=0 alpha=1 equals mean cross-entropy") {
        Rng rng(41);
        const int m = 10, C = 5;
        std::vector<double> logits(m * C);
        std::vector<int> labels(m);
        for (auto& x : logits) x = rng.normal();
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(C));
        // independent softmax-CE
        double ce = 0.0;
        for (int i = 0; i < m; ++i) {
            double z = 0.0;
            for (int c = 0; c < C; ++c) z += std::exp(logits[i * C + c]);
            ce += -(logits[i * C + labels[i]] - std::log(z));
        }
        ce /= m;
        CHECK(focal_loss(logits, C, labels, 0.0, 1.0) == Approx(ce));
    }
    SECTION("uniform logits closed form") {
        // p_t = 1/4; loss = alpha * (3/4)^2 * ln 4 per point
        std::vector<double> logits(4, 0.7);
        const double expected = 0.25 * 0.75 * 0.75 * std::log(4.0);
        CHECK(focal_loss(logits, 4, {2}, 2.0, 0.25) == Approx(expected));
    }
    SECTION("non-finite logits rejected") {
        std::vector<double> logits = {1.0, std::nan(""), 0.0, 0.0};
        CHECK_THROWS_AS(focal_loss(logits, 4, {0}), InvalidArgument);
    }
    SECTION("autodiff focal matches plain value and finite differences") {
        Rng rng(43);
        const int m = 6, C = 4;
        std::vector<double> logits(m * C);
        std::vector<int> labels(m);
        for (auto& x : logits) x = rng.normal();
        for (auto& l : labels) l = static_cast<int>(rng.uniform_int(C));
        auto L = ad::leaf({m, C}, logits);
        auto rebuild = [&] { return ops::focal(L, labels, 2.0, 0.25); };
        CHECK(rebuild()->val[0] == Approx(focal_loss(logits, C, labels, 2.0, 0.25)));
        CHECK(soq::test::gradcheck(L, rebuild) < 1e-5);
    }
}

TEST_CASE("transform_points") {
    OccupancyPointSet ps;
    ps.push({1, 0, 0}, 2);
    SECTION("identity") {
        auto out = transform_points(ps, Pose::identity());
        CHECK(out.coords[0] == ps.coords[0]);
        CHECK(out.labels[0] == 2);
    }
    SECTION("pure translation") {
        OccupancyPointSet zero;
        zero.push({0, 0, 0}, 0);
        Pose t = Pose::identity();
        t.translation = {1, 0, 0};
        auto out = transform_points(zero, t);
        CHECK(out.coords[0][0] == Approx(1.0));
    }
    SECTION("90 degree yaw") {
        auto out = transform_points(ps, Pose::yaw(M_PI / 2));
        CHECK(out.coords[0][0] == Approx(0.0).margin(1e-9));
        CHECK(out.coords[0][1] == Approx(1.0).margin(1e-9));
    }
    SECTION("non-orthonormal rotation rejected") {
        Pose bad;
        bad.rotation = {2, 0, 0, 0, 1, 0, 0, 0, 1};
        CHECK_THROWS_AS(transform_points(ps, bad), InvalidArgument);
    }
    SECTION("round trip through inverse") {
        Rng rng(47);
        auto pts = random_points(rng, 25, 3);
        auto pose = Pose::yaw(rng.uniform(-3, 3), {rng.uniform(-5, 5), rng.uniform(-5, 5), 1.0});
        auto back = transform_points(transform_points(pts, pose), pose.inverse());
        for (size_t i = 0; i < pts.size(); ++i)
            for (int k = 0; k < 3; ++k)
                CHECK(back.coords[i][k] == Approx(pts.coords[i][k]).margin(1e-9));
    }
}

TEST_CASE("voxelize_points") {
    VoxelGrid tmpl(4, 4, 2, 0.5, {0, 0, 0}, 4);
    SECTION("sparsify round trip recovers the grid") {
        Rng rng(53);
        auto g = random_grid(rng, 8, 8, 4, 5, 0.25);
        auto recovered = voxelize_points(sparsify_grid(g), g);
        CHECK(recovered.cells == g.cells);
        // idempotence: sparsify(voxelize(sparsify)) == sparsify
        auto s1 = sparsify_grid(g);
        auto s2 = sparsify_grid(voxelize_points(s1, g));
        REQUIRE(s1.size() == s2.size());
        for (size_t i = 0; i < s1.size(); ++i) {
            CHECK(s1.coords[i] == s2.coords[i]);
            CHECK(s1.labels[i] == s2.labels[i]);
        }
    }
    SECTION("out-of-bounds points dropped") {
        OccupancyPointSet ps;
        ps.push({-1, -1, -1}, 0);
        ps.push({99, 0, 0}, 1);
        auto g = voxelize_points(ps, tmpl);
        for (auto c : g.cells) CHECK(c == g.free_index());
    }
    SECTION("majority vote with low-index tie break") {
        OccupancyPointSet ps;
        ps.push({0.1, 0.1, 0.1}, 1);
        ps.push({0.2, 0.2, 0.2}, 1);
        ps.push({0.3, 0.3, 0.3}, 2);
        auto g = voxelize_points(ps, tmpl);
        CHECK(g.at(0, 0, 0) == 1);
        OccupancyPointSet tie;
        tie.push({0.1, 0.1, 0.1}, 3);
        tie.push({0.2, 0.2, 0.2}, 0);
        auto gt = voxelize_points(tie, tmpl);
        CHECK(gt.at(0, 0, 0) == 0);
    }
}

TEST_CASE("miou") {
    SECTION("perfect prediction") {
        Rng rng(59);
        auto g = random_grid(rng, 6, 6, 3, 4, 0.3);
        CHECK(miou(g, g).mean == Approx(1.0));
    }
    SECTION("all-free pred vs gt with one class") {
        VoxelGrid gt(4, 4, 2, 0.5, {0, 0, 0}, 5);
        gt.set(1, 1, 1, 3);
        VoxelGrid pred(4, 4, 2, 0.5, {0, 0, 0}, 5);
        auto rep = miou(pred, gt);
        CHECK(rep.per_class[3] == Approx(0.0));
        CHECK(rep.mean == Approx(0.0));
    }
    SECTION("half coverage") {
        VoxelGrid gt(4, 4, 1, 0.5, {0, 0, 0}, 3);
        VoxelGrid pred(4, 4, 1, 0.5, {0, 0, 0}, 3);
        for (int i = 0; i < 4; ++i) gt.set(i, 0, 0, 1);
        pred.set(0, 0, 0, 1);
        pred.set(1, 0, 0, 1);
        auto rep = miou(pred, gt);
        CHECK(rep.per_class[1] == Approx(0.5));
    }
    SECTION("dimension mismatch rejected") {
        VoxelGrid a(4, 4, 2, 0.5, {0, 0, 0}, 3), b(4, 4, 3, 0.5, {0, 0, 0}, 3);
        CHECK_THROWS_AS(miou(a, b), InvalidArgument);
    }
    SECTION("random grids match confusion-matrix oracle exactly") {
        Rng rng(61);
        for (int trial = 0; trial < 25; ++trial) {
            auto gt = random_grid(rng, 16, 16, 4, 6, rng.uniform(0.05, 0.5));
            auto pred = random_grid(rng, 16, 16, 4, 6, rng.uniform(0.05, 0.5));
            CHECK(miou(pred, gt).mean == Approx(miou_oracle(pred, gt)).epsilon(1e-12));
        }
    }
}

TEST_CASE("SOVG round trip") {
    Rng rng(67);
    auto g = random_grid(rng, 10, 7, 3, 8, 0.3);
    const std::string path = "test_grid.sovg";
    save_sovg(g, path);
    auto back = load_sovg(path);
    CHECK(back.same_layout(g));
    CHECK(back.cells == g.cells);
    std::remove(path.c_str());
    std::remove((path + ".json").c_str());
    CHECK_THROWS_AS(load_sovg("does_not_exist.sovg"), DataError);
}
