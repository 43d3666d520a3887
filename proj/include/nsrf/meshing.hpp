#pragma once

// Zero-level-set extraction on a regular grid over [-1, 1]^3.

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <functional>
#include <vector>

#include "nsrf/fields.hpp"

namespace nsrf {

inline constexpr int kMaxGridResolution = 512;

/// n^3 samples at x_i = -1 + 2i/(n-1); index (i*n + j)*n + k with x slowest.
struct SdfGrid {
  int n = 0;
  std::vector<double> values;

  double spacing() const { return 2.0 / (n - 1); }
  double coord(int i) const { return -1.0 + 2.0 * i / (n - 1); }
  std::size_t index(int i, int j, int k) const { return (std::size_t(i) * n + j) * n + k; }
  double at(int i, int j, int k) const { return values[index(i, j, k)]; }
};

using ScalarSdf = std::function<double(const Eigen::Vector3d&)>;

SdfGrid sample_grid(const ScalarSdf& sdf, int n, int max_resolution = kMaxGridResolution);
/// Samples a field slab by slab; slabs may run on several threads.
SdfGrid sample_grid(const RadianceField& field, int n, int threads = 1,
                    int max_resolution = kMaxGridResolution);

struct TriangleMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> triangles;
  std::vector<Eigen::Vector3d> normals;
};

/// Triangles are wound so face normals point toward increasing SDF.
TriangleMesh marching_cubes(const SdfGrid& grid, double iso = 0.0);

void export_obj(const TriangleMesh& mesh, const std::filesystem::path& path);
/// Reads v / vn / f records written by export_obj.
TriangleMesh read_obj(const std::filesystem::path& path);

/// V - E + F.
long euler_characteristic(const TriangleMesh& mesh);
/// True when every undirected edge belongs to exactly two triangles.
bool is_watertight(const TriangleMesh& mesh);

}  // namespace nsrf
