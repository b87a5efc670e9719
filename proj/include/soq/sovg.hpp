// SPDX-License-Identifier: Apache-2.0
//
// SOVG: flat binary voxel-grid format.
//   magic "SOVG" | version u32 | dims 3*u32 | resolution f32 | origin 3*f32 |
//   class count u32 | row-major u8 class indices
// A .json sidecar carries the same header fields in readable form.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "soq/geometry.hpp"

namespace soq {

constexpr uint32_t kSovgVersion = 1;

namespace detail {

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw DataError("SOVG: truncated stream");
    return v;
}

}  // namespace detail

inline void save_sovg(const VoxelGrid& grid, const std::string& path, bool sidecar = true) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("SOVG: cannot open for write: " + path);
    os.write("SOVG", 4);
    detail::write_raw<uint32_t>(os, kSovgVersion);
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(grid.nx));
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(grid.ny));
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(grid.nz));
    detail::write_raw<float>(os, static_cast<float>(grid.resolution));
    for (int k = 0; k < 3; ++k) detail::write_raw<float>(os, static_cast<float>(grid.origin[k]));
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(grid.num_classes));
    os.write(reinterpret_cast<const char*>(grid.cells.data()),
             static_cast<std::streamsize>(grid.cells.size()));
    if (!os) throw DataError("SOVG: write failed: " + path);
    if (sidecar) {
        nlohmann::json meta;
        meta["format"] = "SOVG";
        meta["version"] = kSovgVersion;
        meta["dims"] = {grid.nx, grid.ny, grid.nz};
        meta["resolution_m"] = grid.resolution;
        meta["origin_m"] = {grid.origin[0], grid.origin[1], grid.origin[2]};
        meta["num_classes"] = grid.num_classes;
        meta["free_index"] = grid.free_index();
        std::ofstream ms(path + ".json");
        ms << meta.dump(2) << "\n";
    }
}

inline VoxelGrid load_sovg(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("SOVG: cannot open for read: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SOVG", 4) != 0) throw DataError("SOVG: bad magic: " + path);
    const auto version = detail::read_raw<uint32_t>(is);
    if (version != kSovgVersion) throw DataError("SOVG: unsupported version");
    const auto nx = detail::read_raw<uint32_t>(is);
    const auto ny = detail::read_raw<uint32_t>(is);
    const auto nz = detail::read_raw<uint32_t>(is);
    const auto res = detail::read_raw<float>(is);
    Vec3 origin;
    for (int k = 0; k < 3; ++k) origin[k] = detail::read_raw<float>(is);
    const auto classes = detail::read_raw<uint32_t>(is);
    VoxelGrid grid(static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz),
                   static_cast<double>(res), origin, static_cast<int>(classes));
    is.read(reinterpret_cast<char*>(grid.cells.data()),
            static_cast<std::streamsize>(grid.cells.size()));
    if (!is) throw DataError("SOVG: truncated cell payload: " + path);
    for (uint8_t c : grid.cells)
        if (c > grid.free_index()) throw DataError("SOVG: invalid class index in payload");
    return grid;
}

}  // namespace soq
