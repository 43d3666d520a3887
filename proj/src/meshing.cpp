#include "nsrf/meshing.hpp"

#include <Eigen/Geometry>

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "mc_tables.hpp"
#include "nsrf/errors.hpp"
#include "nsrf/parallel.hpp"

namespace nsrf {

namespace fs = std::filesystem;

namespace {

void check_resolution(int n, int max_resolution) {
  if (n < 2) throw ValidationError("grid resolution must be at least 2");
  if (n > max_resolution) {
    throw ValidationError("grid resolution " + std::to_string(n) + " exceeds limit " + std::to_string(max_resolution));
  }
}

// Corner offsets and edge endpoints in the table's vertex numbering.
constexpr std::array<std::array<int, 3>, 8> kCorner = {{
    {0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1},
}};
constexpr std::array<std::array<int, 2>, 12> kEdge = {{
    {0, 1}, {1, 2}, {3, 2}, {0, 3}, {4, 5}, {5, 6}, {7, 6}, {4, 7}, {0, 4}, {1, 5}, {2, 6}, {3, 7},
}};

// The table's winding faces toward decreasing values in this corner layout.
constexpr bool kFlipWinding = true;

}  // namespace

SdfGrid sample_grid(const ScalarSdf& sdf, int n, int max_resolution) {
  check_resolution(n, max_resolution);
  SdfGrid grid;
  grid.n = n;
  grid.values.resize(std::size_t(n) * n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) {
        const double v = sdf(Eigen::Vector3d(grid.coord(i), grid.coord(j), grid.coord(k)));
        if (!std::isfinite(v)) throw NumericalError("non-finite SDF sample");
        grid.values[grid.index(i, j, k)] = v;
      }
  return grid;
}

SdfGrid sample_grid(const RadianceField& field, int n, int threads, int max_resolution) {
  check_resolution(n, max_resolution);
  SdfGrid grid;
  grid.n = n;
  grid.values.resize(std::size_t(n) * n * n);
  parallel_for(static_cast<std::size_t>(n), threads, [&](std::size_t slab) {
    const int i = static_cast<int>(slab);
    Mat x(3, Index(n) * n);
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) x.col(Index(j) * n + k) << grid.coord(i), grid.coord(j), grid.coord(k);
    const Mat values = field.sdf(x, false).sdf;
    if (!values.allFinite()) throw NumericalError("non-finite SDF sample in slab " + std::to_string(i));
    std::copy(values.data(), values.data() + values.size(), grid.values.begin() + grid.index(i, 0, 0));
  });
  return grid;
}

TriangleMesh marching_cubes(const SdfGrid& grid, double iso) {
  if (grid.n < 2 || grid.values.size() != std::size_t(grid.n) * grid.n * grid.n) {
    throw ValidationError("marching_cubes: malformed grid");
  }
  const int n = grid.n;
  TriangleMesh mesh;
  std::unordered_map<std::size_t, int> edge_vertex;

  auto vertex_on = [&](int i, int j, int k, int edge) {
    const auto& a = kCorner[kEdge[edge][0]];
    const auto& b = kCorner[kEdge[edge][1]];
    const int ia = i + a[0], ja = j + a[1], ka = k + a[2];
    const int axis = a[0] != b[0] ? 0 : (a[1] != b[1] ? 1 : 2);
    const std::size_t key = grid.index(ia, ja, ka) * 3 + static_cast<std::size_t>(axis);
    if (auto it = edge_vertex.find(key); it != edge_vertex.end()) return it->second;
    const int ib = i + b[0], jb = j + b[1], kb = k + b[2];
    const double va = grid.at(ia, ja, ka);
    const double vb = grid.at(ib, jb, kb);
    const double t = (iso - va) / (vb - va);
    const Eigen::Vector3d pa(grid.coord(ia), grid.coord(ja), grid.coord(ka));
    const Eigen::Vector3d pb(grid.coord(ib), grid.coord(jb), grid.coord(kb));
    const int id = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(pa + t * (pb - pa));
    edge_vertex.emplace(key, id);
    return id;
  };

  for (int i = 0; i + 1 < n; ++i) {
    for (int j = 0; j + 1 < n; ++j) {
      for (int k = 0; k + 1 < n; ++k) {
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          if (grid.at(i + kCorner[c][0], j + kCorner[c][1], k + kCorner[c][2]) < iso) cube |= 1 << c;
        }
        if (mc::kEdgeTable[cube] == 0) continue;
        const auto& tris = mc::kTriTable[cube];
        for (int t = 0; tris[t] != -1; t += 3) {
          std::array<int, 3> tri = {vertex_on(i, j, k, tris[t]), vertex_on(i, j, k, tris[t + 1]),
                                    vertex_on(i, j, k, tris[t + 2])};
          if (kFlipWinding) std::swap(tri[1], tri[2]);
          const Eigen::Vector3d& p0 = mesh.vertices[tri[0]];
          const double area = 0.5 * (mesh.vertices[tri[1]] - p0).cross(mesh.vertices[tri[2]] - p0).norm();
          if (area < 1e-12) continue;
          mesh.triangles.push_back(tri);
        }
      }
    }
  }

  // Drop vertices orphaned by skipped triangles so indices stay compact.
  std::vector<int> remap(mesh.vertices.size(), -1);
  std::vector<Eigen::Vector3d> kept;
  for (auto& tri : mesh.triangles) {
    for (int& v : tri) {
      if (remap[v] < 0) {
        remap[v] = static_cast<int>(kept.size());
        kept.push_back(mesh.vertices[v]);
      }
      v = remap[v];
    }
  }
  mesh.vertices = std::move(kept);

  mesh.normals.assign(mesh.vertices.size(), Eigen::Vector3d::Zero());
  for (const auto& tri : mesh.triangles) {
    const Eigen::Vector3d& p0 = mesh.vertices[tri[0]];
    const Eigen::Vector3d face = (mesh.vertices[tri[1]] - p0).cross(mesh.vertices[tri[2]] - p0);
    for (int v : tri) mesh.normals[v] += face;
  }
  for (Eigen::Vector3d& nrm : mesh.normals) {
    const double len = nrm.norm();
    nrm = len > 0.0 ? Eigen::Vector3d(nrm / len) : Eigen::Vector3d::UnitZ();
  }
  return mesh;
}

void export_obj(const TriangleMesh& mesh, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  char buf[128];
  for (const Eigen::Vector3d& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const Eigen::Vector3d& v : mesh.normals) {
    std::snprintf(buf, sizeof(buf), "vn %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  const bool with_normals = mesh.normals.size() == mesh.vertices.size() && !mesh.normals.empty();
  for (const auto& t : mesh.triangles) {
    if (with_normals) {
      out << "f " << t[0] + 1 << "//" << t[0] + 1 << ' ' << t[1] + 1 << "//" << t[1] + 1 << ' ' << t[2] + 1
          << "//" << t[2] + 1 << '\n';
    } else {
      out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
    }
  }
  if (!out) throw ValidationError("cannot write " + path.string());
}

TriangleMesh read_obj(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing file: " + path.string());
  TriangleMesh mesh;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v" || tag == "vn") {
      Eigen::Vector3d v;
      ls >> v.x() >> v.y() >> v.z();
      (tag == "v" ? mesh.vertices : mesh.normals).push_back(v);
    } else if (tag == "f") {
      std::array<int, 3> tri{};
      for (int& idx : tri) {
        std::string tok;
        ls >> tok;
        idx = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      mesh.triangles.push_back(tri);
    }
  }
  return mesh;
}

namespace {

std::map<std::pair<int, int>, int> edge_counts(const TriangleMesh& mesh) {
  std::map<std::pair<int, int>, int> counts;
  for (const auto& t : mesh.triangles) {
    for (int e = 0; e < 3; ++e) {
      const int a = t[e], b = t[(e + 1) % 3];
      ++counts[{std::min(a, b), std::max(a, b)}];
    }
  }
  return counts;
}

}  // namespace

long euler_characteristic(const TriangleMesh& mesh) {
  return static_cast<long>(mesh.vertices.size()) - static_cast<long>(edge_counts(mesh).size()) +
         static_cast<long>(mesh.triangles.size());
}

bool is_watertight(const TriangleMesh& mesh) {
  if (mesh.triangles.empty()) return false;
  for (const auto& [edge, count] : edge_counts(mesh)) {
    if (count != 2) return false;
  }
  return true;
}

}  // namespace nsrf
