#include "nsrf/dataio.hpp"

#include <png.h>

#include <Eigen/Geometry>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"
#include "nsrf/errors.hpp"
#include "nsrf/renderer.hpp"

namespace nsrf {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "float sidecars assume a little-endian host");

// Images ------------------------------------------------------------------

void write_png(const fs::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw ValidationError("write_png: need 1 or 3 channels");
  std::vector<png_byte> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(static_cast<double>(image.data[i]), 0.0, 1.0);
    bytes[i] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw ValidationError("cannot write " + path.string() + ": " + msg);
  }
}

Image read_png(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("missing file: " + path.string());
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw ValidationError("cannot read " + path.string() + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image out(static_cast<int>(png.width), static_cast<int>(png.height), color ? 3 : 1);
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw ValidationError("cannot decode " + path.string() + ": " + msg);
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) out.data[i] = static_cast<float>(bytes[i]) / 255.0f;
  return out;
}

void write_f32(const fs::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  const std::uint32_t header[3] = {static_cast<std::uint32_t>(image.width),
                                   static_cast<std::uint32_t>(image.height),
                                   static_cast<std::uint32_t>(image.channels)};
  out.write("F32I", 4);
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(image.data.data()),
            static_cast<std::streamsize>(image.data.size() * sizeof(float)));
  if (!out) throw ValidationError("cannot write " + path.string());
}

Image read_f32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing file: " + path.string());
  char magic[4];
  std::uint32_t header[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || std::memcmp(magic, "F32I", 4) != 0) throw ValidationError("bad float image header: " + path.string());
  Image out(static_cast<int>(header[0]), static_cast<int>(header[1]), static_cast<int>(header[2]));
  in.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(out.data.size() * sizeof(float)));
  if (!in) throw ValidationError("truncated float image: " + path.string());
  return out;
}

// Scene datasets ----------------------------------------------------------

CameraRig SceneDataset::rig() const {
  CameraRig rig;
  rig.intrinsics = intrinsics;
  rig.frames.reserve(frames.size());
  for (const Frame& f : frames) rig.frames.push_back(Extrinsics::from_matrix(f.t_wc));
  return rig;
}

void SceneDataset::set_rig(const CameraRig& rig) {
  if (rig.frames.size() != frames.size()) throw ValidationError("set_rig: frame count mismatch");
  intrinsics.focal = rig.intrinsics.focal;
  for (std::size_t i = 0; i < frames.size(); ++i) frames[i].t_wc = rig.frames[i].matrix();
}

namespace {

json vec3_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d vec3_from(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(what + ": expected 3 numbers");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ValidationError("missing file: " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(file.string() + ": " + e.what());
  }
}

std::string frame_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%03zu", i);
  return buf;
}

struct CameraFile {
  Intrinsics intrinsics;
  std::vector<Eigen::Matrix4d> poses;
  std::vector<json> entries;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = kNormalizedRadius;
};

CameraFile parse_cameras(const fs::path& file) {
  const json doc = read_json(file);
  CameraFile out;
  try {
    const json& in = doc.at("intrinsics");
    out.intrinsics.focal = in.at("focal").get<double>();
    out.intrinsics.width = in.at("width").get<int>();
    out.intrinsics.height = in.at("height").get<int>();
    if (!(out.intrinsics.focal > 0.0) || out.intrinsics.width <= 0 || out.intrinsics.height <= 0) {
      throw ValidationError(file.string() + ": focal and resolution must be positive");
    }
    if (in.contains("cx") && std::abs(in["cx"].get<double>() - out.intrinsics.cx()) > 1e-9) {
      throw ValidationError(file.string() + ": principal point must be the image centre");
    }
    if (in.contains("cy") && std::abs(in["cy"].get<double>() - out.intrinsics.cy()) > 1e-9) {
      throw ValidationError(file.string() + ": principal point must be the image centre");
    }
    if (doc.contains("normalization")) {
      out.center = vec3_from(doc["normalization"].at("center"), "normalization.center");
      out.radius = doc["normalization"].at("radius").get<double>();
      if (!(out.radius > 0.0)) throw ValidationError(file.string() + ": normalization radius must be positive");
    }
    const json& frames = doc.at("frames");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const json& f = frames[i];
      const json& m = f.at("T_wc");
      if (!m.is_array() || m.size() != 16) {
        throw ValidationError("frame " + std::to_string(i) + ": T_wc needs 16 numbers");
      }
      Eigen::Matrix4d t;
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) t(r, c) = m[4 * r + c].get<double>();
      const Eigen::Matrix3d rot = t.topLeftCorner<3, 3>();
      if (!t.allFinite() || !is_rotation(rot, 1e-5)) {
        std::ostringstream msg;
        msg << "frame " << i << ": T_wc rotation block is not a rotation (det " << rot.determinant() << ")";
        throw ValidationError(msg.str());
      }
      if ((t.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-9) {
        throw ValidationError("frame " + std::to_string(i) + ": T_wc bottom row must be 0 0 0 1");
      }
      out.poses.push_back(t);
      out.entries.push_back(f);
    }
  } catch (const json::exception& e) {
    throw ValidationError(file.string() + ": " + e.what());
  }
  return out;
}

std::size_t count_png(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("missing directory: " + dir.string());
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") ++n;
  }
  return n;
}

Image load_channel_image(const fs::path& dir, const json& entry, const char* png_key, const char* f32_key) {
  if (entry.contains(f32_key)) return read_f32(dir / entry[f32_key].get<std::string>());
  return read_png(dir / entry.at(png_key).get<std::string>());
}

json cameras_json(const SceneDataset& ds, bool with_sidecars) {
  json frames = json::array();
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    const std::string name = frame_name(i);
    json f;
    f["file"] = "images/" + name + ".png";
    f["mask"] = "masks/" + name + ".png";
    if (with_sidecars) {
      f["image_f32"] = "images/" + name + ".f32";
      f["mask_f32"] = "masks/" + name + ".f32";
    }
    json m = json::array();
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) m.push_back(ds.frames[i].t_wc(r, c));
    f["T_wc"] = std::move(m);
    frames.push_back(std::move(f));
  }
  json doc;
  doc["intrinsics"] = {{"focal", ds.intrinsics.focal},
                       {"cx", ds.intrinsics.cx()},
                       {"cy", ds.intrinsics.cy()},
                       {"width", ds.intrinsics.width},
                       {"height", ds.intrinsics.height}};
  doc["normalization"] = {{"center", vec3_json(ds.bounds_center)}, {"radius", ds.bounds_radius}};
  doc["frames"] = std::move(frames);
  return doc;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + file.string());
  out << text;
}

}  // namespace

SceneDataset load_scene(const fs::path& dir) {
  const fs::path camera_file = dir / "cameras.json";
  if (!fs::exists(camera_file)) throw ValidationError("missing file: " + camera_file.string());
  CameraFile cams = parse_cameras(camera_file);

  const std::size_t n_images = count_png(dir / "images");
  if (n_images != cams.poses.size()) {
    throw ValidationError("count mismatch: cameras.json has " + std::to_string(cams.poses.size()) +
                          " frames, images/ has " + std::to_string(n_images) + " files");
  }

  SceneDataset ds;
  ds.intrinsics = cams.intrinsics;
  for (std::size_t i = 0; i < cams.poses.size(); ++i) {
    const json& e = cams.entries[i];
    Frame frame;
    frame.t_wc = cams.poses[i];
    try {
      frame.image_file = e.at("file").get<std::string>();
      frame.mask_file = e.at("mask").get<std::string>();
    } catch (const json::exception& err) {
      throw ValidationError("frame " + std::to_string(i) + ": " + err.what());
    }
    frame.image = load_channel_image(dir, e, "file", "image_f32");
    frame.mask = load_channel_image(dir, e, "mask", "mask_f32");
    const auto& in = ds.intrinsics;
    for (const Image* img : {&frame.image, &frame.mask}) {
      if (img->width != in.width || img->height != in.height) {
        throw ValidationError("resolution mismatch in frame " + std::to_string(i) + ": " +
                              std::to_string(img->width) + "x" + std::to_string(img->height) + " vs " +
                              std::to_string(in.width) + "x" + std::to_string(in.height));
      }
    }
    if (frame.image.channels != 3) throw ValidationError("frame " + std::to_string(i) + ": image must be RGB");
    if (frame.mask.channels != 1) throw ValidationError("frame " + std::to_string(i) + ": mask must be gray");
    ds.frames.push_back(std::move(frame));
  }

  const bool already = cams.center.isZero(0.0) && cams.radius == kNormalizedRadius;
  if (!already) {
    const double k = kNormalizedRadius / cams.radius;
    for (Frame& f : ds.frames) {
      f.t_wc.block<3, 1>(0, 3) = (f.t_wc.block<3, 1>(0, 3) - cams.center) * k;
    }
  }
  ds.bounds_center = Eigen::Vector3d::Zero();
  ds.bounds_radius = kNormalizedRadius;
  return ds;
}

void save_scene(const SceneDataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    const std::string name = frame_name(i);
    write_png(dir / "images" / (name + ".png"), ds.frames[i].image);
    write_f32(dir / "images" / (name + ".f32"), ds.frames[i].image);
    write_png(dir / "masks" / (name + ".png"), ds.frames[i].mask);
    write_f32(dir / "masks" / (name + ".f32"), ds.frames[i].mask);
  }
  write_text(dir / "cameras.json", cameras_json(ds, true).dump(2) + "\n");
}

void save_cameras(const SceneDataset& ds, const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  write_text(file, cameras_json(ds, true).dump(2) + "\n");
}

CameraRig load_cameras(const fs::path& file) {
  CameraFile cams = parse_cameras(file);
  CameraRig rig;
  rig.intrinsics = cams.intrinsics;
  const bool already = cams.center.isZero(0.0) && cams.radius == kNormalizedRadius;
  const double k = kNormalizedRadius / cams.radius;
  for (Eigen::Matrix4d t : cams.poses) {
    if (!already) t.block<3, 1>(0, 3) = (t.block<3, 1>(0, 3) - cams.center) * k;
    rig.frames.push_back(Extrinsics::from_matrix(t));
  }
  return rig;
}

// Synthetic spec ------------------------------------------------------------

namespace {

void validate_spec(const SyntheticSceneSpec& spec) {
  if (spec.primitives.empty() || spec.primitives.size() > 4) {
    throw ValidationError("synthetic spec: need 1 to 4 primitives");
  }
  double extent = 0.0;
  for (const Primitive& p : spec.primitives) {
    if (!p.center.allFinite()) throw ValidationError("synthetic spec: non-finite primitive centre");
    if (p.kind == Primitive::Kind::Sphere) {
      if (!(p.radius > 0.0)) throw ValidationError("synthetic spec: sphere radius must be positive");
      extent = std::max(extent, p.center.norm() + p.radius);
    } else {
      if (!(p.half_extents.minCoeff() > 0.0)) throw ValidationError("synthetic spec: box half extents must be positive");
      extent = std::max(extent, (p.center.cwiseAbs() + p.half_extents).norm());
    }
  }
  if (extent > 1.0) {
    throw ValidationError("synthetic spec: object outside unit sphere (extent " + std::to_string(extent) + ")");
  }
  if (!(spec.texture.cell > 0.0)) throw ValidationError("synthetic spec: texture cell must be positive");
  if (spec.texture.softness < 0.0 || spec.texture.softness > 1.0) {
    throw ValidationError("synthetic spec: texture softness must be in [0, 1]");
  }
  if (spec.ring.count < 1) throw ValidationError("synthetic spec: need at least one camera");
  if (!(spec.ring.radius > 1.0)) throw ValidationError("synthetic spec: camera ring must lie outside the unit sphere");
  if (!(spec.ring.focal > 0.0)) throw ValidationError("synthetic spec: focal must be positive");
  if (std::abs(spec.ring.elevation_deg) + spec.ring.elevation_spread_deg >= 89.0) {
    throw ValidationError("synthetic spec: elevation too close to the pole");
  }
  if (spec.width < 1 || spec.height < 1) throw ValidationError("synthetic spec: resolution must be positive");
}

}  // namespace

SyntheticSceneSpec parse_synthetic_spec(const std::string& text) {
  SyntheticSceneSpec spec;
  try {
    const json doc = json::parse(text);
    if (doc.contains("primitives")) {
      spec.primitives.clear();
      for (const json& p : doc["primitives"]) {
        Primitive prim;
        const std::string type = p.at("type").get<std::string>();
        if (type == "sphere") {
          prim.kind = Primitive::Kind::Sphere;
          prim.radius = p.value("radius", prim.radius);
        } else if (type == "box") {
          prim.kind = Primitive::Kind::Box;
          if (p.contains("half_extents")) prim.half_extents = vec3_from(p["half_extents"], "half_extents");
        } else {
          throw ValidationError("synthetic spec: unknown primitive type '" + type + "'");
        }
        if (p.contains("center")) prim.center = vec3_from(p["center"], "center");
        spec.primitives.push_back(prim);
      }
    }
    if (doc.contains("texture")) {
      const json& t = doc["texture"];
      const std::string type = t.value("type", std::string("checker"));
      if (type == "checker") {
        spec.texture.kind = TextureSpec::Kind::Checker;
      } else if (type == "octants") {
        spec.texture.kind = TextureSpec::Kind::Octants;
      } else {
        throw ValidationError("synthetic spec: unknown texture '" + type + "'");
      }
      spec.texture.cell = t.value("cell", spec.texture.cell);
      spec.texture.softness = t.value("softness", spec.texture.softness);
      if (t.contains("origin")) spec.texture.origin = vec3_from(t["origin"], "texture.origin");
    }
    if (doc.contains("cameras")) {
      const json& c = doc["cameras"];
      spec.ring.count = c.value("count", spec.ring.count);
      spec.ring.radius = c.value("radius", spec.ring.radius);
      spec.ring.elevation_deg = c.value("elevation_deg", spec.ring.elevation_deg);
      spec.ring.elevation_spread_deg = c.value("elevation_spread_deg", spec.ring.elevation_spread_deg);
      spec.ring.focal = c.value("focal", spec.ring.focal);
    }
    spec.width = doc.value("width", spec.width);
    spec.height = doc.value("height", spec.height);
    spec.seed = doc.value("seed", spec.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("synthetic spec: ") + e.what());
  }
  validate_spec(spec);
  return spec;
}

std::string to_json(const SyntheticSceneSpec& spec) {
  json prims = json::array();
  for (const Primitive& p : spec.primitives) {
    json j;
    j["center"] = vec3_json(p.center);
    if (p.kind == Primitive::Kind::Sphere) {
      j["type"] = "sphere";
      j["radius"] = p.radius;
    } else {
      j["type"] = "box";
      j["half_extents"] = vec3_json(p.half_extents);
    }
    prims.push_back(std::move(j));
  }
  json doc;
  doc["primitives"] = std::move(prims);
  doc["texture"] = {{"type", spec.texture.kind == TextureSpec::Kind::Checker ? "checker" : "octants"},
                    {"cell", spec.texture.cell},
                    {"softness", spec.texture.softness},
                    {"origin", vec3_json(spec.texture.origin)}};
  doc["cameras"] = {{"count", spec.ring.count},
                    {"radius", spec.ring.radius},
                    {"elevation_deg", spec.ring.elevation_deg},
                    {"elevation_spread_deg", spec.ring.elevation_spread_deg},
                    {"focal", spec.ring.focal}};
  doc["width"] = spec.width;
  doc["height"] = spec.height;
  doc["seed"] = spec.seed;
  return doc.dump(2) + "\n";
}

// Analytic geometry --------------------------------------------------------

namespace {

double primitive_sdf(const Primitive& p, const Eigen::Vector3d& x) {
  if (p.kind == Primitive::Kind::Sphere) return (x - p.center).norm() - p.radius;
  const Eigen::Vector3d q = (x - p.center).cwiseAbs() - p.half_extents;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

Eigen::Vector3d primitive_gradient(const Primitive& p, const Eigen::Vector3d& x) {
  const Eigen::Vector3d d = x - p.center;
  if (p.kind == Primitive::Kind::Sphere) {
    const double n = d.norm();
    return n > 0.0 ? Eigen::Vector3d(d / n) : Eigen::Vector3d::UnitZ();
  }
  const Eigen::Vector3d sgn = d.unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
  const Eigen::Vector3d q = d.cwiseAbs() - p.half_extents;
  const Eigen::Vector3d outside = q.cwiseMax(0.0);
  if (outside.squaredNorm() > 0.0) return (outside / outside.norm()).cwiseProduct(sgn);
  Eigen::Index axis = 0;
  q.maxCoeff(&axis);
  Eigen::Vector3d g = Eigen::Vector3d::Zero();
  g[axis] = sgn[axis];
  return g;
}

std::optional<double> primitive_hit(const Primitive& p, const Eigen::Vector3d& o, const Eigen::Vector3d& dir) {
  if (p.kind == Primitive::Kind::Sphere) {
    const Eigen::Vector3d oc = o - p.center;
    const double a = dir.squaredNorm();
    const double b = oc.dot(dir);
    const double c = oc.squaredNorm() - p.radius * p.radius;
    const double disc = b * b - a * c;
    if (disc < 0.0) return std::nullopt;
    const double sq = std::sqrt(disc);
    const double t0 = (-b - sq) / a;
    const double t1 = (-b + sq) / a;
    if (t0 >= 0.0) return t0;
    if (t1 >= 0.0) return t1;
    return std::nullopt;
  }
  double t_min = -std::numeric_limits<double>::infinity();
  double t_max = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    const double lo = p.center[k] - p.half_extents[k];
    const double hi = p.center[k] + p.half_extents[k];
    if (dir[k] == 0.0) {
      if (o[k] < lo || o[k] > hi) return std::nullopt;
      continue;
    }
    double a = (lo - o[k]) / dir[k];
    double b = (hi - o[k]) / dir[k];
    if (a > b) std::swap(a, b);
    t_min = std::max(t_min, a);
    t_max = std::min(t_max, b);
  }
  if (t_max < std::max(t_min, 0.0)) return std::nullopt;
  return t_min >= 0.0 ? t_min : t_max;
}

const std::array<Eigen::Vector3d, 8> kPalette = {
    Eigen::Vector3d(0.90, 0.25, 0.20), Eigen::Vector3d(0.25, 0.80, 0.25), Eigen::Vector3d(0.20, 0.35, 0.90),
    Eigen::Vector3d(0.95, 0.80, 0.20), Eigen::Vector3d(0.80, 0.30, 0.80), Eigen::Vector3d(0.20, 0.80, 0.80),
    Eigen::Vector3d(0.95, 0.60, 0.30), Eigen::Vector3d(0.65, 0.65, 0.65)};

constexpr double kDarkCell = 0.45;

}  // namespace

double analytic_sdf(const SyntheticSceneSpec& spec, const Eigen::Vector3d& x) {
  double d = std::numeric_limits<double>::infinity();
  for (const Primitive& p : spec.primitives) d = std::min(d, primitive_sdf(p, x));
  return d;
}

Eigen::Vector3d analytic_gradient(const SyntheticSceneSpec& spec, const Eigen::Vector3d& x) {
  std::size_t best = 0;
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < spec.primitives.size(); ++i) {
    const double v = primitive_sdf(spec.primitives[i], x);
    if (v < d) {
      d = v;
      best = i;
    }
  }
  return primitive_gradient(spec.primitives[best], x);
}

Eigen::Vector3d texture_color(const SyntheticSceneSpec& spec, const Eigen::Vector3d& x) {
  const Eigen::Vector3d rel = x - spec.texture.origin;
  const int octant = (rel.x() < 0.0 ? 1 : 0) | (rel.y() < 0.0 ? 2 : 0) | (rel.z() < 0.0 ? 4 : 0);
  const Eigen::Vector3d& base = kPalette[static_cast<std::size_t>(octant)];
  if (spec.texture.kind == TextureSpec::Kind::Octants) return base;

  const Eigen::Vector3d p = rel / spec.texture.cell;
  double bright;
  if (spec.texture.softness > 0.0) {
    const double w = std::sin(std::numbers::pi * p.x()) * std::sin(std::numbers::pi * p.y()) *
                     std::sin(std::numbers::pi * p.z());
    bright = 0.5 + 0.5 * std::clamp(w / spec.texture.softness, -1.0, 1.0);
  } else {
    const long long parity = static_cast<long long>(std::floor(p.x())) + static_cast<long long>(std::floor(p.y())) +
                             static_cast<long long>(std::floor(p.z()));
    bright = (parity % 2 == 0) ? 1.0 : 0.0;
  }
  return base * (kDarkCell + (1.0 - kDarkCell) * bright);
}

std::optional<double> analytic_intersect(const SyntheticSceneSpec& spec, const Eigen::Vector3d& origin,
                                         const Eigen::Vector3d& direction) {
  std::optional<double> best;
  for (const Primitive& p : spec.primitives) {
    const auto t = primitive_hit(p, origin, direction);
    if (t && (!best || *t < *best)) best = t;
  }
  return best;
}

std::pair<Eigen::Vector3d, double> bounding_sphere(const SyntheticSceneSpec& spec) {
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  for (const Primitive& p : spec.primitives) {
    const Eigen::Vector3d ext =
        p.kind == Primitive::Kind::Sphere ? Eigen::Vector3d::Constant(p.radius) : p.half_extents;
    lo = lo.cwiseMin(p.center - ext);
    hi = hi.cwiseMax(p.center + ext);
  }
  const Eigen::Vector3d c = 0.5 * (lo + hi);
  double r = 0.0;
  for (const Primitive& p : spec.primitives) {
    if (p.kind == Primitive::Kind::Sphere) {
      r = std::max(r, (p.center - c).norm() + p.radius);
    } else {
      for (int k = 0; k < 8; ++k) {
        const Eigen::Vector3d corner(p.center.x() + ((k & 1) ? 1 : -1) * p.half_extents.x(),
                                     p.center.y() + ((k & 2) ? 1 : -1) * p.half_extents.y(),
                                     p.center.z() + ((k & 4) ? 1 : -1) * p.half_extents.z());
        r = std::max(r, (corner - c).norm());
      }
    }
  }
  return {c, r};
}

SyntheticSceneSpec transformed(const SyntheticSceneSpec& spec, const Eigen::Vector3d& center, double scale) {
  SyntheticSceneSpec out = spec;
  for (Primitive& p : out.primitives) {
    p.center = (p.center - center) * scale;
    p.radius *= scale;
    p.half_extents *= scale;
  }
  out.texture.origin = (spec.texture.origin - center) * scale;
  out.texture.cell *= scale;
  out.ring.radius *= scale;
  return out;
}

CameraRig ring_cameras(const RingSpec& ring, int width, int height, std::uint64_t seed) {
  CameraRig rig;
  rig.intrinsics.focal = ring.focal;
  rig.intrinsics.width = width;
  rig.intrinsics.height = height;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  const double deg = std::numbers::pi / 180.0;
  const Eigen::Vector3d up = Eigen::Vector3d::UnitY();
  for (int i = 0; i < ring.count; ++i) {
    const double azimuth = 2.0 * std::numbers::pi * i / ring.count;
    const double elevation = (ring.elevation_deg + ring.elevation_spread_deg * jitter(rng)) * deg;
    const Eigen::Vector3d centre = ring.radius * Eigen::Vector3d(std::cos(elevation) * std::sin(azimuth),
                                                                  std::sin(elevation),
                                                                  std::cos(elevation) * std::cos(azimuth));
    // x right, y down, z forward
    const Eigen::Vector3d z = -centre.normalized();
    const Eigen::Vector3d y = (-up + up.dot(z) * z).normalized();
    const Eigen::Vector3d x = y.cross(z);
    Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
    t.block<3, 1>(0, 0) = x;
    t.block<3, 1>(0, 1) = y;
    t.block<3, 1>(0, 2) = z;
    t.block<3, 1>(0, 3) = centre;
    rig.frames.push_back(Extrinsics::from_matrix(t));
  }
  return rig;
}

std::optional<TraceHit> sphere_trace(const SyntheticSceneSpec& spec, const Eigen::Vector3d& origin,
                                     const Eigen::Vector3d& direction) {
  const auto bounds = near_far(origin, direction);
  if (!bounds) return std::nullopt;
  double t = bounds->first;
  for (int step = 0; step < 4096 && t <= bounds->second; ++step) {
    const Eigen::Vector3d p = origin + t * direction;
    const double d = analytic_sdf(spec, p);
    if (d < 1e-10) return TraceHit{t, p};
    t += d;
  }
  return std::nullopt;
}

SceneDataset generate_synthetic(const SyntheticSceneSpec& spec, const fs::path& dir) {
  validate_spec(spec);
  const CameraRig rig = ring_cameras(spec.ring, spec.width, spec.height, spec.seed);

  SceneDataset ds;
  ds.intrinsics = rig.intrinsics;
  const auto [centre, radius] = bounding_sphere(spec);
  ds.bounds_center = centre;
  ds.bounds_radius = radius;
  for (const Extrinsics& ext : rig.frames) {
    Frame frame;
    frame.t_wc = ext.matrix();
    frame.image = Image(spec.width, spec.height, 3);
    frame.mask = Image(spec.width, spec.height, 1);
    for (int row = 0; row < spec.height; ++row) {
      for (int col = 0; col < spec.width; ++col) {
        const Ray ray = generate_ray(ext, rig.intrinsics, Eigen::Vector2d(col + 0.5, row + 0.5));
        const auto hit = sphere_trace(spec, ray.origin, ray.direction);
        if (!hit) continue;
        const Eigen::Vector3d rgb = texture_color(spec, hit->point);
        for (int c = 0; c < 3; ++c) frame.image.at(col, row, c) = static_cast<float>(rgb[c]);
        frame.mask.at(col, row, 0) = 1.0f;
      }
    }
    ds.frames.push_back(std::move(frame));
  }

  for (const char* sub : {"images", "masks"}) {
    if (fs::exists(dir / sub)) fs::remove_all(dir / sub);
  }
  save_scene(ds, dir);
  write_text(dir / "synthetic.json", to_json(spec));
  return load_scene(dir);
}

// Analytic field -------------------------------------------------------------

namespace {

Var tiled_constant(Tape& tape, const Eigen::Vector3d& v, Index n) { return constant(tape, v.replicate(1, n)); }

Var var_min(const Var& a, const Var& b) { return a - clamp_min(a - b, 0.0); }
Var var_max(const Var& a, const Var& b) { return b + clamp_min(a - b, 0.0); }

class AnalyticBinding : public FieldBinding {
 public:
  AnalyticBinding(const AnalyticField& field, Tape& tape) : field_(field), tape_(tape) {}

  TapeSdf sdf(const Var& x) override {
    const Index n = x.cols();
    std::optional<Var> d;
    for (const Primitive& p : field_.spec().primitives) {
      Var v = x - tiled_constant(tape_, p.center, n);
      if (p.kind == Primitive::Kind::Sphere) {
        v = norm2(v) - p.radius;
      } else {
        const Var q = abs(v) - tiled_constant(tape_, p.half_extents, n);
        const Var largest = var_max(var_max(slice_rows(q, 0, 1), slice_rows(q, 1, 2)), slice_rows(q, 2, 3));
        v = norm2(clamp_min(q, 0.0)) + clamp_max(largest, 0.0);
      }
      d = d ? var_min(*d, v) : v;
    }
    return TapeSdf{*d, constant(tape_, Mat::Zero(1, n))};
  }

  Var color(const Var& x, const Var&, const Var&, const Var&) override {
    return constant(tape_, field_.color(x.value(), Mat(), Mat(), Mat()));
  }

  Var sharpness() override { return constant(tape_, field_.sharpness()); }

  std::span<const Var> leaves() const override { return {}; }

 private:
  const AnalyticField& field_;
  Tape& tape_;
};

}  // namespace

AnalyticField::AnalyticField(SyntheticSceneSpec spec, double sharpness)
    : spec_(std::move(spec)), sharpness_(sharpness) {}

SdfBatch AnalyticField::sdf(const Mat& x, bool with_gradient) const {
  SdfBatch out;
  out.sdf.resize(1, x.cols());
  out.feature = Mat::Zero(1, x.cols());
  if (with_gradient) out.gradient.resize(3, x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const Eigen::Vector3d p = x.col(j);
    out.sdf(0, j) = analytic_sdf(spec_, p);
    if (with_gradient) out.gradient.col(j) = analytic_gradient(spec_, p);
  }
  return out;
}

Mat AnalyticField::color(const Mat& x, const Mat&, const Mat&, const Mat&) const {
  Mat out(3, x.cols());
  for (Index j = 0; j < x.cols(); ++j) out.col(j) = texture_color(spec_, x.col(j));
  return out;
}

std::unique_ptr<FieldBinding> AnalyticField::bind(Tape& tape) const {
  return std::make_unique<AnalyticBinding>(*this, tape);
}

}  // namespace nsrf
