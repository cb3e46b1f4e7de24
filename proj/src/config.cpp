#include "ctrecon/config.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace ctrecon {

namespace {

using nlohmann::json;

json geometry_to_json(const GeometryConfig& g) {
  return {{"sid_mm", g.sid_mm},
          {"sdd_mm", g.sdd_mm},
          {"grid_n", g.grid_n},
          {"voxel_pitch_mm", g.voxel_pitch_mm},
          {"n_detector_bins", g.n_detector_bins},
          {"detector_pitch_mm", g.detector_pitch_mm}};
}

json weights_to_json(const LossWeights& w) {
  return {{"lambda_gen", w.lambda_gen},
          {"lambda_r", w.lambda_r},
          {"lambda_proj", w.lambda_proj},
          {"lambda_s", w.lambda_s},
          {"lambda_p", w.lambda_p}};
}

json networks_to_json(const NetworkConfigBlock& n) {
  return {{"gen_levels", n.gen_levels},   {"gen_widths", n.gen_widths},
          {"dis_widths", n.dis_widths},   {"seg_widths", n.seg_widths},
          {"fx_widths", n.fx_widths},     {"gen_seed", n.gen_seed},
          {"dis_seed", n.dis_seed},       {"seg_seed", n.seg_seed},
          {"fx_seed", n.fx_seed},         {"fx_weights_path", n.fx_weights_path}};
}

json corpus_to_json(const CorpusConfig& c) {
  return {{"out_dir", c.out_dir},       {"corpus_seed", c.corpus_seed},
          {"recon_train", c.recon_train}, {"recon_test", c.recon_test},
          {"seg_train", c.seg_train},   {"seg_test", c.seg_test},
          {"grid_n", c.grid_n},         {"depth", c.depth},
          {"voxel_pitch_mm", c.voxel_pitch_mm}};
}

// Pulls known keys out of j into the fields, then complains about leftovers.
class FieldReader {
 public:
  FieldReader(const json& j, std::string scope) : j_(j), scope_(std::move(scope)) {}

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    try {
      j_.at(key).get_to(out);
    } catch (const json::exception& e) {
      throw std::invalid_argument("config field " + scope_ + key + ": " + e.what());
    }
    seen_.push_back(key);
  }

  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.push_back(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      bool known = false;
      for (const auto& s : seen_)
        if (s == key) known = true;
      if (!known) throw std::invalid_argument("unknown config key " + scope_ + key);
    }
  }

 private:
  const json& j_;
  std::string scope_;
  std::vector<std::string> seen_;
};

void geometry_from_json(const json& j, GeometryConfig& g, const std::string& scope) {
  FieldReader r(j, scope);
  r.get("sid_mm", g.sid_mm);
  r.get("sdd_mm", g.sdd_mm);
  r.get("grid_n", g.grid_n);
  r.get("voxel_pitch_mm", g.voxel_pitch_mm);
  r.get("n_detector_bins", g.n_detector_bins);
  r.get("detector_pitch_mm", g.detector_pitch_mm);
  r.finish();
}

void weights_from_json(const json& j, LossWeights& w, const std::string& scope) {
  FieldReader r(j, scope);
  r.get("lambda_gen", w.lambda_gen);
  r.get("lambda_r", w.lambda_r);
  r.get("lambda_proj", w.lambda_proj);
  r.get("lambda_s", w.lambda_s);
  r.get("lambda_p", w.lambda_p);
  r.finish();
}

void networks_from_json(const json& j, NetworkConfigBlock& n, const std::string& scope) {
  FieldReader r(j, scope);
  r.get("gen_levels", n.gen_levels);
  r.get("gen_widths", n.gen_widths);
  r.get("dis_widths", n.dis_widths);
  r.get("seg_widths", n.seg_widths);
  r.get("fx_widths", n.fx_widths);
  r.get("gen_seed", n.gen_seed);
  r.get("dis_seed", n.dis_seed);
  r.get("seg_seed", n.seg_seed);
  r.get("fx_seed", n.fx_seed);
  r.get("fx_weights_path", n.fx_weights_path);
  r.finish();
}

void corpus_from_json(const json& j, CorpusConfig& c, const std::string& scope) {
  FieldReader r(j, scope);
  r.get("out_dir", c.out_dir);
  r.get("corpus_seed", c.corpus_seed);
  r.get("recon_train", c.recon_train);
  r.get("recon_test", c.recon_test);
  r.get("seg_train", c.seg_train);
  r.get("seg_test", c.seg_test);
  r.get("grid_n", c.grid_n);
  r.get("depth", c.depth);
  r.get("voxel_pitch_mm", c.voxel_pitch_mm);
  r.finish();
}

// The corpus block owns the grid; geometry and corpus stay consistent by
// construction so every stage sees the same discretization.
void reconcile(RunConfig& cfg) {
  cfg.geometry.grid_n = cfg.corpus.grid_n;
  cfg.geometry.voxel_pitch_mm = cfg.corpus.voxel_pitch_mm;
  cfg.corpus.geometry = cfg.geometry;
  cfg.corpus.overwrite = cfg.overwrite;
  if (cfg.manifest_path.empty() && !cfg.corpus.out_dir.empty())
    cfg.manifest_path = cfg.corpus.out_dir + "/manifest.json";
}

json config_to_json(const RunConfig& cfg) {
  json j;
  j["manifest_path"] = cfg.manifest_path;
  j["out_dir"] = cfg.out_dir;
  j["weights"] = weights_to_json(cfg.weights);
  j["gan_epochs"] = cfg.gan_epochs;
  j["seg_epochs"] = cfg.seg_epochs;
  j["gan_lr"] = cfg.gan_lr;
  j["seg_lr"] = cfg.seg_lr;
  j["batch_size"] = cfg.batch_size;
  j["train_seed"] = cfg.train_seed;
  j["perceptual_l1"] = cfg.perceptual_l1;
  j["geometry"] = geometry_to_json(cfg.geometry);
  j["networks"] = networks_to_json(cfg.networks);
  j["corpus"] = corpus_to_json(cfg.corpus);
  j["deterministic"] = cfg.deterministic;
  j["overwrite"] = cfg.overwrite;
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig cfg;
  FieldReader r(j, "");
  r.get("manifest_path", cfg.manifest_path);
  r.get("out_dir", cfg.out_dir);
  r.get("gan_epochs", cfg.gan_epochs);
  r.get("seg_epochs", cfg.seg_epochs);
  r.get("gan_lr", cfg.gan_lr);
  r.get("seg_lr", cfg.seg_lr);
  r.get("batch_size", cfg.batch_size);
  r.get("train_seed", cfg.train_seed);
  r.get("perceptual_l1", cfg.perceptual_l1);
  r.get("deterministic", cfg.deterministic);
  r.get("overwrite", cfg.overwrite);
  if (const json* s = r.sub("weights")) weights_from_json(*s, cfg.weights, "weights.");
  if (const json* s = r.sub("geometry")) geometry_from_json(*s, cfg.geometry, "geometry.");
  if (const json* s = r.sub("networks")) networks_from_json(*s, cfg.networks, "networks.");
  if (const json* s = r.sub("corpus")) corpus_from_json(*s, cfg.corpus, "corpus.");
  r.finish();
  reconcile(cfg);
  return cfg;
}

}  // namespace

void validate_run_config(const RunConfig& cfg) {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string("config: ") + name + " must be > 0");
  };
  positive(cfg.gan_lr, "gan_lr");
  positive(cfg.seg_lr, "seg_lr");
  if (cfg.gan_epochs < 1) throw std::invalid_argument("config: gan_epochs must be >= 1");
  if (cfg.seg_epochs < 1) throw std::invalid_argument("config: seg_epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  auto weight = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v))
      throw std::invalid_argument(std::string("config: ") + name + " must be finite and >= 0");
  };
  weight(cfg.weights.lambda_gen, "weights.lambda_gen");
  weight(cfg.weights.lambda_r, "weights.lambda_r");
  weight(cfg.weights.lambda_proj, "weights.lambda_proj");
  weight(cfg.weights.lambda_s, "weights.lambda_s");
  weight(cfg.weights.lambda_p, "weights.lambda_p");
  if (cfg.networks.gen_widths.size() != size_t(cfg.networks.gen_levels) + 1)
    throw std::invalid_argument("config: networks.gen_widths must have gen_levels + 1 entries");
  if (cfg.networks.dis_widths.empty())
    throw std::invalid_argument("config: networks.dis_widths must be non-empty");
  if (cfg.networks.seg_widths.size() != 3)
    throw std::invalid_argument("config: networks.seg_widths must have 3 entries");
  if (cfg.networks.fx_widths.size() != 4)
    throw std::invalid_argument("config: networks.fx_widths must have 4 entries");
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("unparseable config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write config " + path);
  out << run_config_json(cfg) << "\n";
}

std::string run_config_json(const RunConfig& cfg) { return config_to_json(cfg).dump(2); }

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override must be key=value, got \"" + assignment + "\"");
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json j = config_to_json(cfg);
  json* node = &j;
  size_t start = 0;
  while (true) {
    const size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (!node->contains(part)) throw std::invalid_argument("unknown config key " + key);
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw std::invalid_argument("config key " + key + " is a section");
  if (node->is_string()) {
    *node = value;
  } else {
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded())
      throw std::invalid_argument("malformed value for " + key + ": \"" + value + "\"");
    if (parsed.type() != node->type() && !(parsed.is_number() && node->is_number()))
      throw std::invalid_argument("value for " + key + " has the wrong type: \"" + value + "\"");
    *node = parsed;
  }
  cfg = config_from_json(j);
}

uint64_t run_config_fingerprint(const RunConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("out_dir");
  j.erase("overwrite");
  j.erase("deterministic");
  // Raising the epoch budget extends a run instead of invalidating it.
  j.erase("gan_epochs");
  j.erase("seg_epochs");
  const std::string s = j.dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

GeneratorConfig make_generator_config(const RunConfig& cfg) {
  GeneratorConfig g;
  g.geometry = build_geometry(cfg.geometry);
  g.levels = cfg.networks.gen_levels;
  g.widths = cfg.networks.gen_widths;
  g.depth_z = cfg.corpus.depth;
  g.seed = cfg.networks.gen_seed;
  return g;
}

DiscriminatorConfig make_discriminator_config(const RunConfig& cfg) {
  DiscriminatorConfig d;
  d.grid_n = cfg.corpus.grid_n;
  d.depth_z = cfg.corpus.depth;
  d.widths = cfg.networks.dis_widths;
  d.seed = cfg.networks.dis_seed;
  return d;
}

SegNetConfig make_segnet_config(const RunConfig& cfg) {
  SegNetConfig s;
  s.grid_n = cfg.corpus.grid_n;
  s.depth_z = cfg.corpus.depth;
  s.widths = cfg.networks.seg_widths;
  s.seed = cfg.networks.seg_seed;
  return s;
}

FeatureExtractorConfig make_feature_extractor_config(const RunConfig& cfg) {
  FeatureExtractorConfig f;
  f.widths = cfg.networks.fx_widths;
  f.seed = cfg.networks.fx_seed;
  f.weights_path = cfg.networks.fx_weights_path;
  return f;
}

}  // namespace ctrecon
