#pragma once

#include "filterreg/geometry.hpp"

#include <string>
#include <vector>

namespace filterreg {

enum class CloudFormat { automatic, ply, xyz };
enum class PlyEncoding { ascii, binary_little_endian };

// PLY: vertex properties x y z, optional nx ny nz and f_0 .. f_{D-1}.
// XYZ: whitespace columns, '#' comments; 3 = xyz, 6 = xyz + normals,
// 4-5 = xyz + features, >= 7 = xyz + normals + features.
// Normals are renormalized; deviations above 1e-3 are reported in `warnings`.
// Throws ParseError (with line number when known) or InputError for an empty cloud.
PointCloud load_cloud(const std::string& path, CloudFormat format = CloudFormat::automatic,
                      std::vector<std::string>* warnings = nullptr);
PointCloud parse_ply(const std::string& bytes, std::vector<std::string>* warnings = nullptr);
PointCloud parse_xyz(const std::string& text, std::vector<std::string>* warnings = nullptr);

void save_ply(const std::string& path, const PointCloud& cloud, PlyEncoding encoding = PlyEncoding::binary_little_endian);
void save_xyz(const std::string& path, const PointCloud& cloud);
std::string ply_bytes(const PointCloud& cloud, PlyEncoding encoding);
// Saves by extension (.ply binary, .xyz / .txt text).
void save_cloud(const std::string& path, const PointCloud& cloud);

}  // namespace filterreg
