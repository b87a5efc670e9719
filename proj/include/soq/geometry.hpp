// SPDX-License-Identifier: Apache-2.0
//
// Voxel grids, occupancy point sets, SE(3) poses, Chamfer/focal losses and
// mIoU. Plain-double entry points are pure functions; the autodiff wrappers
// at the bottom reuse the same matching kernels.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "soq/common.hpp"
#include "soq/tensor.hpp"

namespace soq {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double sqdist(const Vec3& a, const Vec3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

// ---------------------------------------------------------------------------
// Pose: rigid transform, x' = R x + t

struct Pose {
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
    Vec3 translation{0, 0, 0};

    static Pose identity() { return Pose{}; }

    static Pose yaw(double angle, const Vec3& t = {0, 0, 0}) {
        const double c = std::cos(angle), s = std::sin(angle);
        Pose p;
        p.rotation = {c, -s, 0, s, c, 0, 0, 0, 1};
        p.translation = t;
        return p;
    }

    Vec3 apply(const Vec3& x) const {
        const auto& r = rotation;
        return {r[0] * x[0] + r[1] * x[1] + r[2] * x[2] + translation[0],
                r[3] * x[0] + r[4] * x[1] + r[5] * x[2] + translation[1],
                r[6] * x[0] + r[7] * x[1] + r[8] * x[2] + translation[2]};
    }

    // rotation only
    Vec3 rotate(const Vec3& x) const {
        const auto& r = rotation;
        return {r[0] * x[0] + r[1] * x[1] + r[2] * x[2],
                r[3] * x[0] + r[4] * x[1] + r[5] * x[2],
                r[6] * x[0] + r[7] * x[1] + r[8] * x[2]};
    }

    Pose inverse() const {
        Pose inv;
        const auto& r = rotation;
        inv.rotation = {r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]};
        const Vec3 t = inv.rotate(translation);
        inv.translation = {-t[0], -t[1], -t[2]};
        return inv;
    }

    // this ∘ other: applies `other` first
    Pose compose(const Pose& other) const {
        Pose out;
        const auto& a = rotation;
        const auto& b = other.rotation;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                out.rotation[i * 3 + j] =
                    a[i * 3 + 0] * b[0 * 3 + j] + a[i * 3 + 1] * b[1 * 3 + j] + a[i * 3 + 2] * b[2 * 3 + j];
        out.translation = apply(other.translation);
        return out;
    }

    bool is_valid(double tol = 1e-6) const {
        const auto& r = rotation;
        // R^T R = I
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += r[k * 3 + i] * r[k * 3 + j];
                if (std::fabs(s - (i == j ? 1.0 : 0.0)) > tol) return false;
            }
        const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                           r[2] * (r[3] * r[7] - r[4] * r[6]);
        return std::fabs(det - 1.0) <= tol;
    }
};

// ---------------------------------------------------------------------------
// VoxelGrid: dense semantic occupancy; class indices 0..num_classes-1, free
// cells hold free_index() == num_classes.

struct VoxelGrid {
    int nx = 0, ny = 0, nz = 0;
    double resolution = 0.0;
    Vec3 origin{0, 0, 0};  // min corner, meters
    int num_classes = 0;
    std::vector<uint8_t> cells;  // row-major (x, then y, then z)

    VoxelGrid() = default;
    VoxelGrid(int nx_, int ny_, int nz_, double res, const Vec3& orig, int classes)
        : nx(nx_), ny(ny_), nz(nz_), resolution(res), origin(orig), num_classes(classes) {
        SOQ_REQUIRE(nx > 0 && ny > 0 && nz > 0, "VoxelGrid: dims must be positive");
        SOQ_REQUIRE(res > 0.0, "VoxelGrid: resolution must be positive");
        SOQ_REQUIRE(classes > 0, "VoxelGrid: need at least one class");
        cells.assign(static_cast<size_t>(nx) * ny * nz, static_cast<uint8_t>(classes));
    }

    int free_index() const { return num_classes; }
    size_t cell_count() const { return cells.size(); }

    size_t index(int ix, int iy, int iz) const {
        return (static_cast<size_t>(ix) * ny + iy) * nz + iz;
    }
    uint8_t at(int ix, int iy, int iz) const { return cells[index(ix, iy, iz)]; }
    void set(int ix, int iy, int iz, uint8_t cls) { cells[index(ix, iy, iz)] = cls; }

    bool in_bounds(int ix, int iy, int iz) const {
        return ix >= 0 && ix < nx && iy >= 0 && iy < ny && iz >= 0 && iz < nz;
    }

    Vec3 cell_center(int ix, int iy, int iz) const {
        return {origin[0] + (ix + 0.5) * resolution, origin[1] + (iy + 0.5) * resolution,
                origin[2] + (iz + 0.5) * resolution};
    }

    // cell containing a metric point, or false if outside
    bool locate(const Vec3& p, int& ix, int& iy, int& iz) const {
        ix = static_cast<int>(std::floor((p[0] - origin[0]) / resolution));
        iy = static_cast<int>(std::floor((p[1] - origin[1]) / resolution));
        iz = static_cast<int>(std::floor((p[2] - origin[2]) / resolution));
        return in_bounds(ix, iy, iz);
    }

    bool same_layout(const VoxelGrid& o) const {
        return nx == o.nx && ny == o.ny && nz == o.nz && resolution == o.resolution &&
               origin == o.origin && num_classes == o.num_classes;
    }
};

// ---------------------------------------------------------------------------
// OccupancyPointSet: labeled points, optional per-point class logits

struct OccupancyPointSet {
    std::vector<Vec3> coords;
    std::vector<int> labels;
    std::vector<double> logits;  // flattened M x num_classes; empty if absent
    int num_classes = 0;

    size_t size() const { return coords.size(); }
    bool empty() const { return coords.empty(); }

    void push(const Vec3& p, int label) {
        coords.push_back(p);
        labels.push_back(label);
    }
};

// ---------------------------------------------------------------------------
// sparsify / voxelize

inline OccupancyPointSet sparsify_grid(const VoxelGrid& grid) {
    OccupancyPointSet out;
    out.num_classes = grid.num_classes;
    const uint8_t free = static_cast<uint8_t>(grid.free_index());
    for (int ix = 0; ix < grid.nx; ++ix)
        for (int iy = 0; iy < grid.ny; ++iy)
            for (int iz = 0; iz < grid.nz; ++iz) {
                const uint8_t c = grid.at(ix, iy, iz);
                if (c != free) out.push(grid.cell_center(ix, iy, iz), c);
            }
    return out;
}

// points -> grid with the template's layout; conflicts resolved by majority
// label, ties to the lowest class index; out-of-bounds points dropped
inline VoxelGrid voxelize_points(const OccupancyPointSet& points, const VoxelGrid& tmpl) {
    VoxelGrid out(tmpl.nx, tmpl.ny, tmpl.nz, tmpl.resolution, tmpl.origin, tmpl.num_classes);
    std::vector<std::vector<uint16_t>> counts(out.cell_count());
    for (size_t i = 0; i < points.size(); ++i) {
        int ix, iy, iz;
        if (!out.locate(points.coords[i], ix, iy, iz)) continue;
        const int label = points.labels[i];
        SOQ_REQUIRE(label >= 0 && label < out.num_classes, "voxelize: label out of range");
        auto& c = counts[out.index(ix, iy, iz)];
        if (c.empty()) c.assign(static_cast<size_t>(out.num_classes), 0);
        ++c[label];
    }
    for (size_t idx = 0; idx < counts.size(); ++idx) {
        if (counts[idx].empty()) continue;
        int best = 0;
        for (int c = 1; c < out.num_classes; ++c)
            if (counts[idx][c] > counts[idx][best]) best = c;
        out.cells[idx] = static_cast<uint8_t>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// transforms

inline OccupancyPointSet transform_points(const OccupancyPointSet& points, const Pose& pose) {
    SOQ_REQUIRE(pose.is_valid(), "transform_points: rotation is not orthonormal");
    OccupancyPointSet out = points;
    for (auto& p : out.coords) p = pose.apply(p);
    return out;
}

// ---------------------------------------------------------------------------
// nearest-neighbor matching: brute force, plus a uniform-grid accelerator
// that must return bit-identical indices (ties to the lowest index)

inline std::vector<int> match_points_brute(const std::vector<Vec3>& P, const std::vector<Vec3>& G) {
    SOQ_REQUIRE(!G.empty(), "match_points: empty target set");
    std::vector<int> out(P.size());
    for (size_t i = 0; i < P.size(); ++i) {
        int best = 0;
        double bd = sqdist(P[i], G[0]);
        for (size_t j = 1; j < G.size(); ++j) {
            const double d = sqdist(P[i], G[j]);
            if (d < bd) {
                bd = d;
                best = static_cast<int>(j);
            }
        }
        out[i] = best;
    }
    return out;
}

// exact NN via a uniform spatial hash; expands the cell ring until the ring's
// minimum possible distance exceeds the best found
class GridNearestNeighbor {
  public:
    explicit GridNearestNeighbor(const std::vector<Vec3>& points, double cell = 0.0)
        : pts_(points) {
        SOQ_REQUIRE(!points.empty(), "GridNearestNeighbor: empty set");
        lo_ = hi_ = points[0];
        for (const auto& p : points)
            for (int k = 0; k < 3; ++k) {
                lo_[k] = std::min(lo_[k], p[k]);
                hi_[k] = std::max(hi_[k], p[k]);
            }
        if (cell <= 0.0) {
            const double span = std::max({hi_[0] - lo_[0], hi_[1] - lo_[1], hi_[2] - lo_[2], 1e-9});
            const double target = std::cbrt(static_cast<double>(points.size()));
            cell = std::max(span / std::max(target, 1.0), 1e-6);
        }
        cell_ = cell;
        for (int k = 0; k < 3; ++k)
            dims_[k] = std::max<int64_t>(
                1, static_cast<int64_t>(std::floor((hi_[k] - lo_[k]) / cell_)) + 1);
        buckets_.resize(static_cast<size_t>(dims_[0] * dims_[1] * dims_[2]));
        for (size_t i = 0; i < points.size(); ++i)
            buckets_[bucket_of(points[i])].push_back(static_cast<int>(i));
    }

    int nearest(const Vec3& q) const {
        std::array<int64_t, 3> c;
        for (int k = 0; k < 3; ++k)
            c[k] = clamp_axis(static_cast<int64_t>(std::floor((q[k] - lo_[k]) / cell_)), k);
        int best = -1;
        double bd = std::numeric_limits<double>::infinity();
        const int64_t max_ring = std::max({dims_[0], dims_[1], dims_[2]});
        for (int64_t ring = 0; ring <= max_ring; ++ring) {
            // once a candidate exists, stop when the ring cannot beat it
            if (best >= 0) {
                const double ring_min = (ring - 1) > 0 ? (ring - 1) * cell_ : 0.0;
                if (ring_min * ring_min > bd) break;
            }
            scan_ring(q, c, ring, best, bd);
        }
        return best;
    }

  private:
    int64_t clamp_axis(int64_t v, int k) const { return std::max<int64_t>(0, std::min(v, dims_[k] - 1)); }

    size_t bucket_of(const Vec3& p) const {
        std::array<int64_t, 3> c;
        for (int k = 0; k < 3; ++k)
            c[k] = clamp_axis(static_cast<int64_t>(std::floor((p[k] - lo_[k]) / cell_)), k);
        return static_cast<size_t>((c[0] * dims_[1] + c[1]) * dims_[2] + c[2]);
    }

    void scan_cell(const Vec3& q, int64_t x, int64_t y, int64_t z, int& best, double& bd) const {
        if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2]) return;
        for (int idx : buckets_[static_cast<size_t>((x * dims_[1] + y) * dims_[2] + z)]) {
            const double d = sqdist(q, pts_[idx]);
            if (d < bd || (d == bd && idx < best)) {
                bd = d;
                best = idx;
            }
        }
    }

    void scan_ring(const Vec3& q, const std::array<int64_t, 3>& c, int64_t r, int& best,
                   double& bd) const {
        if (r == 0) {
            scan_cell(q, c[0], c[1], c[2], best, bd);
            return;
        }
        for (int64_t dx = -r; dx <= r; ++dx)
            for (int64_t dy = -r; dy <= r; ++dy)
                for (int64_t dz = -r; dz <= r; ++dz) {
                    if (std::max({std::llabs(dx), std::llabs(dy), std::llabs(dz)}) != r) continue;
                    scan_cell(q, c[0] + dx, c[1] + dy, c[2] + dz, best, bd);
                }
    }

    const std::vector<Vec3>& pts_;
    Vec3 lo_{}, hi_{};
    double cell_ = 1.0;
    std::array<int64_t, 3> dims_{1, 1, 1};
    std::vector<std::vector<int>> buckets_;
};

enum class NnBackend { BruteForce, GridHash };

inline std::vector<int> match_points(const OccupancyPointSet& P, const OccupancyPointSet& G,
                                     NnBackend backend = NnBackend::BruteForce) {
    SOQ_REQUIRE(!G.empty(), "match_points: ground-truth set is empty");
    if (backend == NnBackend::BruteForce || G.size() < 32)
        return match_points_brute(P.coords, G.coords);
    GridNearestNeighbor nn(G.coords);
    std::vector<int> out(P.size());
    for (size_t i = 0; i < P.size(); ++i) out[i] = nn.nearest(P.coords[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Chamfer distance: sum of squared NN distances in both directions
// (unnormalized by default; `normalized` divides each side by its set size)

inline double chamfer_distance(const OccupancyPointSet& P, const OccupancyPointSet& G,
                               bool normalized = false, NnBackend backend = NnBackend::BruteForce) {
    SOQ_REQUIRE(!P.empty() && !G.empty(), "chamfer_distance: empty point set");
    const auto p2g = match_points(P, G, backend);
    const auto g2p = match_points(G, P, backend);
    double fwd = 0.0, bwd = 0.0;
    for (size_t i = 0; i < P.size(); ++i) fwd += sqdist(P.coords[i], G.coords[p2g[i]]);
    for (size_t j = 0; j < G.size(); ++j) bwd += sqdist(G.coords[j], P.coords[g2p[j]]);
    if (normalized) {
        fwd /= static_cast<double>(P.size());
        bwd /= static_cast<double>(G.size());
    }
    return fwd + bwd;
}

// ---------------------------------------------------------------------------
// focal loss: mean over points of -alpha * (1 - p_t)^gamma * log(p_t)

inline double focal_loss(const std::vector<double>& logits, int num_classes,
                         const std::vector<int>& target_labels, double gamma = 2.0,
                         double alpha = 0.25) {
    const size_t m = target_labels.size();
    SOQ_REQUIRE(m > 0, "focal_loss: no points");
    SOQ_REQUIRE(logits.size() == m * static_cast<size_t>(num_classes), "focal_loss: logits shape");
    SOQ_REQUIRE(all_finite(logits), "focal_loss: non-finite logits");
    double total = 0.0;
    for (size_t i = 0; i < m; ++i) {
        const int t = target_labels[i];
        SOQ_REQUIRE(t >= 0 && t < num_classes, "focal_loss: label out of range");
        const double* row = &logits[i * num_classes];
        double mx = row[0];
        for (int c = 1; c < num_classes; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (int c = 0; c < num_classes; ++c) z += std::exp(row[c] - mx);
        const double logp = row[t] - mx - std::log(z);
        const double pt = std::exp(logp);
        total += -alpha * std::pow(1.0 - pt, gamma) * logp;
    }
    return total / static_cast<double>(m);
}

// ---------------------------------------------------------------------------
// mIoU over occupied classes present in gt or pred (no visibility masking)

struct IouReport {
    std::vector<double> per_class;  // NaN when the class is absent from both
    double mean = 0.0;
};

inline IouReport miou(const VoxelGrid& pred, const VoxelGrid& gt) {
    SOQ_REQUIRE(pred.nx == gt.nx && pred.ny == gt.ny && pred.nz == gt.nz,
                "miou: grid dimension mismatch");
    SOQ_REQUIRE(pred.num_classes == gt.num_classes, "miou: class count mismatch");
    const int C = gt.num_classes;
    std::vector<int64_t> inter(C, 0), uni(C, 0);
    for (size_t i = 0; i < gt.cells.size(); ++i) {
        const int p = pred.cells[i], g = gt.cells[i];
        if (p < C || g < C) {
            if (p == g) {
                ++inter[p];
                ++uni[p];
            } else {
                if (p < C) ++uni[p];
                if (g < C) ++uni[g];
            }
        }
    }
    IouReport rep;
    rep.per_class.assign(C, std::numeric_limits<double>::quiet_NaN());
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < C; ++c) {
        if (uni[c] > 0) {
            rep.per_class[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
            sum += rep.per_class[c];
            ++present;
        }
    }
    rep.mean = present > 0 ? sum / present : 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// autodiff wrappers (share the matching kernels above)

namespace ops {

// Chamfer against a fixed target cloud, differentiable w.r.t. P ([M,3]).
// d/dp of both sums under fixed matching:
//   2*(p - g_nn(p)) + sum_{g: nn(g)=p} 2*(p - g)
inline ad::Var chamfer(const ad::Var& P, const std::vector<Vec3>& G, bool normalized = false,
                       NnBackend backend = NnBackend::BruteForce) {
    SOQ_REQUIRE(P->rows() > 0 && !G.empty(), "chamfer: empty point set");
    SOQ_REQUIRE(P->cols() == 3, "chamfer: P must be Mx3");
    const int64_t m = P->rows();
    std::vector<Vec3> pc(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i)
        pc[i] = {P->val[i * 3], P->val[i * 3 + 1], P->val[i * 3 + 2]};
    OccupancyPointSet ps, gs;
    ps.coords = pc;
    gs.coords = G;
    ps.labels.assign(pc.size(), 0);
    gs.labels.assign(G.size(), 0);
    const auto p2g = match_points(ps, gs, backend);
    const auto g2p = match_points(gs, ps, backend);
    double fwd = 0.0, bwd = 0.0;
    for (int64_t i = 0; i < m; ++i) fwd += sqdist(pc[i], G[p2g[i]]);
    for (size_t j = 0; j < G.size(); ++j) bwd += sqdist(G[j], pc[g2p[j]]);
    const double wp = normalized ? 1.0 / static_cast<double>(m) : 1.0;
    const double wg = normalized ? 1.0 / static_cast<double>(G.size()) : 1.0;
    const double value = wp * fwd + wg * bwd;
    return ad::detail::op({1}, {value}, {P}, [P, G, p2g, g2p, pc, m, wp, wg](ad::Node& n) {
        P->ensure_grad();
        const double g0 = n.grad[0];
        for (int64_t i = 0; i < m; ++i) {
            const Vec3& g = G[p2g[i]];
            for (int k = 0; k < 3; ++k)
                P->grad[i * 3 + k] += g0 * wp * 2.0 * (pc[i][k] - g[k]);
        }
        for (size_t j = 0; j < G.size(); ++j) {
            const int i = g2p[j];
            for (int k = 0; k < 3; ++k)
                P->grad[i * 3 + k] += g0 * wg * 2.0 * (pc[i][k] - G[j][k]);
        }
    });
}

// focal loss over logit rows, differentiable w.r.t. logits
inline ad::Var focal(const ad::Var& logits, const std::vector<int>& targets, double gamma,
                     double alpha) {
    const int64_t m = logits->rows(), C = logits->cols();
    SOQ_REQUIRE(static_cast<int64_t>(targets.size()) == m, "focal: target count");
    SOQ_REQUIRE(all_finite(logits->val), "focal: non-finite logits");
    auto ls = ad::log_softmax_rows(logits);
    double total = 0.0;
    for (int64_t i = 0; i < m; ++i) {
        const double logp = ls->val[i * C + targets[i]];
        total += -alpha * std::pow(1.0 - std::exp(logp), gamma) * logp;
    }
    total /= static_cast<double>(m);
    const double inv = 1.0 / static_cast<double>(m);
    return ad::detail::op({1}, {total}, {ls}, [ls, targets, m, C, gamma, alpha, inv](ad::Node& n) {
        ls->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
            const double logp = ls->val[i * C + targets[i]];
            const double pt = std::exp(logp);
            const double om = 1.0 - pt;
            // d/dlogp of -alpha*(1-e^logp)^g * logp
            double d = -alpha * std::pow(om, gamma);
            if (gamma > 0.0 && om > 0.0)
                d += alpha * gamma * std::pow(om, gamma - 1.0) * pt * logp;
            ls->grad[i * C + targets[i]] += n.grad[0] * inv * d;
        }
    });
}

}  // namespace ops

}  // namespace soq
