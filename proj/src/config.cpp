#include "nsrf/config.hpp"

#include <set>

#include "json.hpp"
#include "nsrf/errors.hpp"

namespace nsrf {

using json = nlohmann::json;

namespace {

json train_json(const TrainConfig& c) {
  const SdfConfig& s = c.field.sdf;
  const ColorConfig& col = c.field.color;
  json j;
  j["case"] = case_name(c.train_case);
  j["seed"] = c.seed;
  j["iterations"] = c.iterations;
  j["batch_rays"] = c.batch_rays;
  j["eval_every"] = c.eval_every;
  j["eval_frames"] = c.eval_frames;
  j["threads"] = c.threads;
  j["render"] = {{"n_coarse", c.render.n_coarse},
                 {"importance_rounds", c.render.importance_rounds},
                 {"per_round", c.render.per_round},
                 {"importance_sharpness", c.render.importance_sharpness},
                 {"background", c.render.background},
                 {"chunk_rays", c.render.chunk_rays}};
  j["field"] = {{"sdf",
                 {{"hidden_layers", s.hidden_layers},
                  {"width", s.width},
                  {"feature_dim", s.feature_dim},
                  {"skip_layer", s.skip_layer},
                  {"beta", s.beta},
                  {"frequencies", s.frequencies},
                  {"geometric_init", s.geometric_init},
                  {"init_radius", s.init_radius}}},
                {"color",
                 {{"hidden_layers", col.hidden_layers}, {"width", col.width}, {"view_frequencies", col.view_frequencies}}},
                {"init_variance", c.field.init_variance}};
  j["loss_weights"] = {{"colour", c.weights.colour}, {"eikonal", c.weights.eikonal}, {"mask", c.weights.mask}};
  j["mask_eps"] = c.mask_eps;
  j["learning_rates"] = {{"fields", c.lr_fields}, {"extrinsics", c.lr_extrinsics}, {"intrinsics", c.lr_intrinsics}};
  j["schedule"] = {{"warmup_fraction", c.warmup_fraction},
                   {"fields_final_ratio", c.fields_final_ratio},
                   {"cameras_final_ratio", c.cameras_final_ratio},
                   {"cameras_delay_fraction", c.cameras_delay_fraction}};
  j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
  j["noise"] = {{"extrinsic_sigma", c.noise.extrinsic_sigma},
                {"intrinsic_sigma_ratio", c.noise.intrinsic_sigma_ratio},
                {"seed", c.noise.rng_seed}};
  return j;
}

json run_json(const RunConfig& c) {
  json j = train_json(c.train);
  j["scene"] = c.scene;
  j["out"] = c.out;
  j["init_cameras"] = c.init_cameras;
  j["mesh_resolution"] = c.mesh_resolution;
  return j;
}

// Overlays `in` onto `base`, rejecting keys the defaults do not have.
void merge(json& base, const json& in, const std::string& path) {
  if (!in.is_object()) throw ValidationError("config: '" + path + "' must be an object");
  for (auto it = in.begin(); it != in.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ValidationError("config: unknown key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

TrainConfig train_from(const json& j) {
  TrainConfig c;
  std::string name;
  read(j, "case", name);
  c.train_case = parse_case(name);
  read(j, "seed", c.seed);
  read(j, "iterations", c.iterations);
  read(j, "batch_rays", c.batch_rays);
  read(j, "eval_every", c.eval_every);
  read(j, "eval_frames", c.eval_frames);
  read(j, "threads", c.threads);
  const json& r = j.at("render");
  read(r, "n_coarse", c.render.n_coarse);
  read(r, "importance_rounds", c.render.importance_rounds);
  read(r, "per_round", c.render.per_round);
  read(r, "importance_sharpness", c.render.importance_sharpness);
  read(r, "background", c.render.background);
  read(r, "chunk_rays", c.render.chunk_rays);
  const json& s = j.at("field").at("sdf");
  read(s, "hidden_layers", c.field.sdf.hidden_layers);
  read(s, "width", c.field.sdf.width);
  read(s, "feature_dim", c.field.sdf.feature_dim);
  read(s, "skip_layer", c.field.sdf.skip_layer);
  read(s, "beta", c.field.sdf.beta);
  read(s, "frequencies", c.field.sdf.frequencies);
  read(s, "geometric_init", c.field.sdf.geometric_init);
  read(s, "init_radius", c.field.sdf.init_radius);
  const json& col = j.at("field").at("color");
  read(col, "hidden_layers", c.field.color.hidden_layers);
  read(col, "width", c.field.color.width);
  read(col, "view_frequencies", c.field.color.view_frequencies);
  read(j.at("field"), "init_variance", c.field.init_variance);
  const json& w = j.at("loss_weights");
  read(w, "colour", c.weights.colour);
  read(w, "eikonal", c.weights.eikonal);
  read(w, "mask", c.weights.mask);
  read(j, "mask_eps", c.mask_eps);
  const json& lr = j.at("learning_rates");
  read(lr, "fields", c.lr_fields);
  read(lr, "extrinsics", c.lr_extrinsics);
  read(lr, "intrinsics", c.lr_intrinsics);
  const json& sch = j.at("schedule");
  read(sch, "warmup_fraction", c.warmup_fraction);
  read(sch, "fields_final_ratio", c.fields_final_ratio);
  read(sch, "cameras_final_ratio", c.cameras_final_ratio);
  read(sch, "cameras_delay_fraction", c.cameras_delay_fraction);
  const json& a = j.at("adam");
  read(a, "beta1", c.adam.beta1);
  read(a, "beta2", c.adam.beta2);
  read(a, "eps", c.adam.eps);
  const json& n = j.at("noise");
  read(n, "extrinsic_sigma", c.noise.extrinsic_sigma);
  read(n, "intrinsic_sigma_ratio", c.noise.intrinsic_sigma_ratio);
  read(n, "seed", c.noise.rng_seed);
  c.render.threads = c.threads;
  if (c.weights.colour < 0 || c.weights.eikonal < 0 || c.weights.mask < 0) {
    throw ValidationError("config: loss weights must be >= 0");
  }
  return c;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  json merged = run_json(RunConfig{});
  merge(merged, doc, "");
  RunConfig c;
  c.train = train_from(merged);
  read(merged, "scene", c.scene);
  read(merged, "out", c.out);
  read(merged, "init_cameras", c.init_cameras);
  read(merged, "mesh_resolution", c.mesh_resolution);
  return c;
}

std::string run_config_to_json(const RunConfig& config) { return run_json(config).dump(2) + "\n"; }

std::string train_config_to_json(const TrainConfig& config) { return train_json(config).dump(); }

}  // namespace nsrf
