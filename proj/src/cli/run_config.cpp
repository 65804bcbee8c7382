#include "vqd/run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace vqd::cli {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters");
  return v;
}

std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw std::invalid_argument("expected a non-negative integer");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("expected true or false");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, sep);) out.push_back(trim(part));
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Field size_field(std::string key, T RunConfig::*group, std::size_t T::*member) {
  return {key, [=](const RunConfig& c) { return std::to_string(c.*group.*member); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_uint(v); }};
}

template <typename T>
Field double_field(std::string key, T RunConfig::*group, double T::*member) {
  return {key, [=](const RunConfig& c) { return fmt_double(c.*group.*member); },
          [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_double(v); }};
}

Field detector_double(std::string key, double& (*ref)(model::DetectorConfig&)) {
  return {key,
          [=](const RunConfig& c) {
            return fmt_double(ref(const_cast<model::DetectorConfig&>(c.detector)));
          },
          [=](RunConfig& c, const std::string& v) { ref(c.detector) = parse_double(v); }};
}

const std::vector<Field>& fields() {
  using D = model::DetectorConfig;
  using S = scenes::SceneConfig;
  using T = train::TrainConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    // Detector.
    f.push_back(size_field("groups", &RunConfig::detector, &D::groups));
    f.push_back(size_field("queries", &RunConfig::detector, &D::queries));
    f.push_back(size_field("noisy_groups", &RunConfig::detector, &D::noisy_groups));
    f.push_back(size_field("width", &RunConfig::detector, &D::width));
    f.push_back(size_field("layers", &RunConfig::detector, &D::layers));
    f.push_back(size_field("heads", &RunConfig::detector, &D::heads));
    f.push_back(size_field("ffn_width", &RunConfig::detector, &D::ffn_width));
    f.push_back(double_field("lambda_det", &RunConfig::detector, &D::lambda_det));
    f.push_back(double_field("lambda_dn", &RunConfig::detector, &D::lambda_dn));
    f.push_back(double_field("lambda_distill", &RunConfig::detector, &D::lambda_distill));
    f.push_back(double_field("confidence_threshold", &RunConfig::detector,
                             &D::confidence_threshold));
    f.push_back(detector_double("dim_prior_l", [](D& d) -> double& { return d.dim_prior[0]; }));
    f.push_back(detector_double("dim_prior_w", [](D& d) -> double& { return d.dim_prior[1]; }));
    f.push_back(detector_double("dim_prior_h", [](D& d) -> double& { return d.dim_prior[2]; }));
    f.push_back(double_field("depth_prior", &RunConfig::detector, &D::depth_prior));
    f.push_back(detector_double("match_cls", [](D& d) -> double& { return d.matcher.cls; }));
    f.push_back(detector_double("match_center", [](D& d) -> double& { return d.matcher.center; }));
    f.push_back(detector_double("match_giou", [](D& d) -> double& { return d.matcher.giou; }));
    f.push_back(detector_double("loss_cls", [](D& d) -> double& { return d.loss.cls; }));
    f.push_back(detector_double("loss_center", [](D& d) -> double& { return d.loss.center; }));
    f.push_back(detector_double("loss_box_l1", [](D& d) -> double& { return d.loss.box_l1; }));
    f.push_back(detector_double("loss_giou", [](D& d) -> double& { return d.loss.giou; }));
    f.push_back(detector_double("loss_dims", [](D& d) -> double& { return d.loss.dims; }));
    f.push_back(detector_double("loss_angle", [](D& d) -> double& { return d.loss.angle; }));
    f.push_back(detector_double("loss_depth", [](D& d) -> double& { return d.loss.depth; }));
    f.push_back(detector_double("focal_alpha", [](D& d) -> double& { return d.loss.focal_alpha; }));
    f.push_back(detector_double("focal_gamma", [](D& d) -> double& { return d.loss.focal_gamma; }));
    f.push_back(detector_double("noise_center_shift",
                                [](D& d) -> double& { return d.noise.center_shift; }));
    f.push_back(detector_double("noise_box_scale", [](D& d) -> double& { return d.noise.box_scale; }));
    f.push_back(detector_double("noise_label_flip",
                                [](D& d) -> double& { return d.noise.label_flip; }));
    f.push_back(detector_double("noise_dim_scale", [](D& d) -> double& { return d.noise.dim_scale; }));
    f.push_back(detector_double("noise_angle_jitter",
                                [](D& d) -> double& { return d.noise.angle_jitter; }));
    f.push_back(detector_double("noise_depth_jitter",
                                [](D& d) -> double& { return d.noise.depth_jitter; }));
    f.push_back(detector_double("denoising_beta", [](D& d) -> double& { return d.denoising.beta; }));
    f.push_back({"denoising_mode",
                 [](const RunConfig& c) {
                   return std::string(c.detector.denoising.mode == vqg::DenoisingMode::kVariational
                                          ? "variational"
                                          : "deterministic");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "variational") c.detector.denoising.mode = vqg::DenoisingMode::kVariational;
                   else if (v == "deterministic")
                     c.detector.denoising.mode = vqg::DenoisingMode::kDeterministic;
                   else throw std::invalid_argument("expected variational or deterministic");
                 }});
    f.push_back({"refiner_identity",
                 [](const RunConfig& c) {
                   return std::string(c.detector.refiner_identity ? "true" : "false");
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.detector.refiner_identity = parse_bool(v);
                 }});
    // Scenes.
    f.push_back(size_field("grid", &RunConfig::scene, &S::grid));
    f.push_back(size_field("num_classes", &RunConfig::scene, &S::num_classes));
    f.push_back(size_field("k_max", &RunConfig::scene, &S::k_max));
    f.push_back(double_field("depth_min", &RunConfig::scene, &S::depth_min));
    f.push_back(double_field("depth_max", &RunConfig::scene, &S::depth_max));
    f.push_back(double_field("camera_height", &RunConfig::scene, &S::camera_height));
    f.push_back(double_field("feature_noise", &RunConfig::scene, &S::feature_noise));
    f.push_back({"focal", [](const RunConfig& c) { return fmt_double(c.scene.intrinsics.focal); },
                 [](RunConfig& c, const std::string& v) { c.scene.intrinsics.focal = parse_double(v); }});
    f.push_back({"class_priors",
                 [](const RunConfig& c) {
                   std::string s;
                   for (const auto& p : c.scene.priors) {
                     if (!s.empty()) s += ',';
                     s += fmt_double(p.l3d) + ':' + fmt_double(p.w3d) + ':' + fmt_double(p.h3d);
                   }
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.scene.priors.clear();
                   for (const auto& item : split(v, ',')) {
                     const auto dims = split(item, ':');
                     if (dims.size() != 3) throw std::invalid_argument("expected l:w:h entries");
                     c.scene.priors.push_back(
                         {parse_double(dims[0]), parse_double(dims[1]), parse_double(dims[2])});
                   }
                 }});
    // Optimization.
    f.push_back(size_field("epochs", &RunConfig::train, &T::epochs));
    f.push_back(size_field("batch_size", &RunConfig::train, &T::batch_size));
    f.push_back(double_field("beta_warmup", &RunConfig::train, &T::beta_warmup));
    f.push_back(double_field("iou_threshold", &RunConfig::train, &T::iou_threshold));
    f.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
                 [](RunConfig& c, const std::string& v) { c.train.seed = parse_uint(v); }});
    f.push_back({"lr", [](const RunConfig& c) { return fmt_double(c.train.optimizer.lr); },
                 [](RunConfig& c, const std::string& v) { c.train.optimizer.lr = parse_double(v); }});
    f.push_back({"decay_factor",
                 [](const RunConfig& c) { return fmt_double(c.train.optimizer.decay_factor); },
                 [](RunConfig& c, const std::string& v) {
                   c.train.optimizer.decay_factor = parse_double(v);
                 }});
    f.push_back({"decay_at",
                 [](const RunConfig& c) {
                   std::string s;
                   for (double d : c.train.optimizer.decay_at) {
                     if (!s.empty()) s += ',';
                     s += fmt_double(d);
                   }
                   return s;
                 },
                 [](RunConfig& c, const std::string& v) {
                   c.train.optimizer.decay_at.clear();
                   for (const auto& item : split(v, ','))
                     c.train.optimizer.decay_at.push_back(parse_double(item));
                 }});
    f.push_back({"clip_norm",
                 [](const RunConfig& c) { return fmt_double(c.train.optimizer.clip_norm); },
                 [](RunConfig& c, const std::string& v) {
                   c.train.optimizer.clip_norm = parse_double(v);
                 }});
    f.push_back({"runs_dir", [](const RunConfig& c) { return c.runs_dir.string(); },
                 [](RunConfig& c, const std::string& v) {
                   if (v.empty()) throw std::invalid_argument("empty path");
                   c.runs_dir = v;
                 }});
    return f;
  }();
  return table;
}

}  // namespace

void RunConfig::finalize() {
  detector.grid = scene.grid;
  detector.num_classes = scene.num_classes;
  detector.input_channels = scene.channels();
  try {
    scene.validate();
    detector.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
}

std::vector<std::pair<std::string, std::string>> default_entries() {
  const RunConfig defaults;
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(defaults));
  return out;
}

RunConfig parse_run_config(std::string_view text) {
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key[f.key] = &f;
  RunConfig cfg;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      it->second->set(cfg, value);
    } catch (const std::exception& e) {
      throw ConfigError(where + ": bad value for '" + key + "': " + e.what());
    }
  }
  cfg.finalize();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string format_run_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + '=' + f.get(cfg) + '\n';
  return out;
}

}  // namespace vqd::cli
