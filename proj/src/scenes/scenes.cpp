#include "vqd/scenes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>

#include <boost/beast/core/detail/base64.hpp>

#include "json.hpp"

namespace vqd::scenes {

namespace {

static_assert(std::endian::native == std::endian::little,
              "feature payloads are stored little-endian");

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Placed {
  geometry::GroundTruthObject gt;
  geometry::OrientedBox3D box;
};

// Projects the eight corners and derives (x_c, y_c, l, r, t, b).
void fill_image_box(geometry::GroundTruthObject& g, const geometry::OrientedBox3D& box,
                    const geometry::Intrinsics& k) {
  const geometry::ImagePoint c = geometry::project_to_image(box.center, k);
  const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
  double umin = c.u, umax = c.u, vmin = c.v, vmax = c.v;
  for (int a : {-1, 1})
    for (int b : {-1, 1})
      for (int h : {-1, 1}) {
        const double along = 0.5 * a * box.l, lat = 0.5 * b * box.w;
        const geometry::Vec3 p{box.center.x + along * cy - lat * sy,
                               box.center.y + 0.5 * h * box.h,
                               box.center.z + along * sy + lat * cy};
        const geometry::ImagePoint q = geometry::project_to_image(p, k);
        umin = std::min(umin, q.u);
        umax = std::max(umax, q.u);
        vmin = std::min(vmin, q.v);
        vmax = std::max(vmax, q.v);
      }
  g.x_c = c.u;
  g.y_c = c.v;
  g.l = c.u - umin;
  g.r = umax - c.u;
  g.t = c.v - vmin;
  g.b = vmax - c.v;
}

void render(Scene& s, const SceneConfig& cfg, Rng& rng) {
  const std::size_t f = cfg.grid, ch = cfg.channels(), nc = cfg.num_classes;
  s.features.assign(f * f * ch, 0.0);
  std::vector<double> owner_weight(f * f, 0.0);
  for (const auto& g : s.objects) {
    const double sx = std::max(0.25 * (g.l + g.r), 0.5 / f);
    const double sy = std::max(0.25 * (g.t + g.b), 0.5 / f);
    const auto& prior = cfg.priors[static_cast<std::size_t>(g.category)];
    const double attrs[12] = {10.0 / g.depth,
                              std::log(g.l3d / prior.l3d),
                              std::log(g.w3d / prior.w3d),
                              std::log(g.h3d / prior.h3d),
                              std::sin(g.theta),
                              std::cos(g.theta),
                              4.0 * g.l,
                              4.0 * g.r,
                              4.0 * g.t,
                              4.0 * g.b,
                              0.0,
                              0.0};
    for (std::size_t i = 0; i < f; ++i) {
      const double y = (i + 0.5) / f;
      for (std::size_t j = 0; j < f; ++j) {
        const double x = (j + 0.5) / f;
        const double dx = (x - g.x_c) / sx, dy = (y - g.y_c) / sy;
        const double w = std::exp(-0.5 * (dx * dx + dy * dy));
        double* cell = s.features.data() + (i * f + j) * ch;
        cell[g.category] += w;
        if (w > 0.05 && w > owner_weight[i * f + j]) {
          owner_weight[i * f + j] = w;
          std::copy(attrs, attrs + 10, cell + nc);
          cell[nc + 10] = (g.x_c - x) * f;
          cell[nc + 11] = (g.y_c - y) * f;
        }
      }
    }
  }
  for (double& v : s.features) v += rng.normal(0.0, cfg.feature_noise);
}

}  // namespace

void SceneConfig::validate() const {
  if (grid == 0 || num_classes == 0 || priors.size() != num_classes)
    throw std::invalid_argument("scene config: grid, classes and priors must agree");
  if (!(depth_min > 0.5) || !(depth_max < 120.0) || depth_min >= depth_max)
    throw std::invalid_argument("scene config: depth range must lie in (0.5, 120)");
  if (!(feature_noise >= 0.0)) throw std::invalid_argument("scene config: noise < 0");
}

Scene generate_scene(std::uint64_t scene_id, std::uint64_t seed,
                     const SceneConfig& cfg, std::optional<std::size_t> forced_objects) {
  cfg.validate();
  Rng rng(seed);
  Scene s;
  s.scene_id = scene_id;
  s.seed = seed;
  s.intrinsics = cfg.intrinsics;
  s.grid = cfg.grid;
  s.channels = cfg.channels();
  const std::size_t k = forced_objects
                            ? *forced_objects
                            : static_cast<std::size_t>(
                                  rng.integer(1, static_cast<std::int64_t>(cfg.k_max)));
  std::vector<Placed> placed;
  for (std::size_t n = 0; n < k; ++n) {
    // Rejection keeps footprints apart; a fixed try budget bounds the draws.
    for (int attempt = 0; attempt < 20; ++attempt) {
      geometry::GroundTruthObject g;
      g.category = static_cast<int>(rng.integer(0, static_cast<std::int64_t>(cfg.num_classes) - 1));
      const ClassPrior& p = cfg.priors[static_cast<std::size_t>(g.category)];
      g.l3d = p.l3d * std::clamp(1.0 + 0.08 * rng.normal(), 0.75, 1.25);
      g.w3d = p.w3d * std::clamp(1.0 + 0.08 * rng.normal(), 0.75, 1.25);
      g.h3d = p.h3d * std::clamp(1.0 + 0.08 * rng.normal(), 0.75, 1.25);
      g.theta = geometry::wrap_angle(rng.uniform(-std::numbers::pi, std::numbers::pi));
      g.depth = rng.uniform(cfg.depth_min, cfg.depth_max);
      const double u = rng.uniform(0.08, 0.92);
      const geometry::OrientedBox3D box{
          {(u - cfg.intrinsics.cx) * g.depth / cfg.intrinsics.focal,
           cfg.camera_height - 0.5 * g.h3d, g.depth},
          g.l3d, g.w3d, g.h3d, g.theta};
      bool clash = false;
      for (const auto& other : placed)
        clash = clash || std::hypot(box.center.x - other.box.center.x,
                                    box.center.z - other.box.center.z) <
                             0.5 * (box.l + other.box.l) + 1.0;
      if (clash) continue;
      fill_image_box(g, box, cfg.intrinsics);
      if (!geometry::satisfies_invariants(g)) g = geometry::clamp_to_invariants(g);
      placed.push_back({g, box});
      break;
    }
  }
  for (const auto& p : placed) s.objects.push_back(p.gt);
  render(s, cfg, rng);
  return s;
}

std::vector<Scene> generate_dataset(std::size_t count, std::uint64_t seed,
                                    const SceneConfig& cfg) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t id = (seed << 32) | static_cast<std::uint64_t>(i);
    out.push_back(generate_scene(id, splitmix64(id), cfg));
  }
  return out;
}

void save_dataset(std::span<const Scene> scenes, const std::filesystem::path& path) {
  namespace b64 = boost::beast::detail::base64;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open " + path.string() + " for writing");
  for (const Scene& s : scenes) {
    nlohmann::json rec;
    rec["scene_id"] = s.scene_id;
    rec["seed"] = s.seed;
    rec["intrinsics"] = {{"focal", s.intrinsics.focal},
                         {"cx", s.intrinsics.cx},
                         {"cy", s.intrinsics.cy}};
    rec["grid"] = s.grid;
    rec["channels"] = s.channels;
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& g : s.objects) objs.push_back(g.to_array());
    rec["objects"] = std::move(objs);
    const std::size_t bytes = s.features.size() * sizeof(double);
    std::string text(b64::encoded_size(bytes), '\0');
    text.resize(b64::encode(text.data(), s.features.data(), bytes));
    rec["features"] = std::move(text);
    out << rec.dump() << '\n';
  }
  if (!out) throw DatasetError("write failed for " + path.string());
}

std::vector<Scene> load_dataset(const std::filesystem::path& path) {
  namespace b64 = boost::beast::detail::base64;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::vector<Scene> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      Scene s;
      s.scene_id = rec.at("scene_id").get<std::uint64_t>();
      s.seed = rec.at("seed").get<std::uint64_t>();
      const auto& k = rec.at("intrinsics");
      s.intrinsics = {k.at("focal").get<double>(), k.at("cx").get<double>(),
                      k.at("cy").get<double>()};
      s.grid = rec.at("grid").get<std::size_t>();
      s.channels = rec.at("channels").get<std::size_t>();
      for (const auto& o : rec.at("objects"))
        s.objects.push_back(
            geometry::GroundTruthObject::from_array(o.get<std::array<double, 12>>()));
      const auto& text = rec.at("features").get_ref<const std::string&>();
      const std::size_t expected = s.grid * s.grid * s.channels;
      std::vector<char> raw(b64::decoded_size(text.size()));
      const auto [written, read] = b64::decode(raw.data(), text.data(), text.size());
      if (read != text.size() || written != expected * sizeof(double))
        throw DatasetError("feature payload holds " + std::to_string(written) +
                           " bytes, expected " + std::to_string(expected * sizeof(double)));
      s.features.resize(expected);
      std::memcpy(s.features.data(), raw.data(), written);
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::vector<EvalObject>> eval_objects(std::span<const Scene> scenes) {
  std::vector<std::vector<EvalObject>> out(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i)
    for (const auto& g : scenes[i].objects)
      out[i].push_back({g.category, geometry::oriented_box(g, scenes[i].intrinsics)});
  return out;
}

namespace {

std::optional<double> ap40_impl(std::span<const Detection> detections,
                                std::span<const std::vector<EvalObject>> ground_truths,
                                double iou_threshold, std::optional<int> only) {
  std::size_t total = 0;
  for (const auto& scene : ground_truths)
    for (const auto& g : scene) total += !only || g.category == *only;
  if (total == 0) return std::nullopt;

  std::vector<const Detection*> order;
  for (const auto& d : detections)
    if (!only || d.category == *only) order.push_back(&d);
  // Full key so the ranking never depends on input order.
  auto key = [](const Detection* d) {
    return std::make_tuple(-d->score, d->scene, d->category, d->box.center.x,
                           d->box.center.y, d->box.center.z, d->box.l, d->box.w,
                           d->box.h, d->box.yaw);
  };
  std::sort(order.begin(), order.end(),
            [&](const Detection* a, const Detection* b) { return key(a) < key(b); });

  std::vector<std::vector<char>> used(ground_truths.size());
  for (std::size_t s = 0; s < ground_truths.size(); ++s)
    used[s].assign(ground_truths[s].size(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Detection& d = *order[rank];
    if (d.scene >= ground_truths.size())
      throw std::out_of_range("detection scene index " + std::to_string(d.scene));
    const auto& gts = ground_truths[d.scene];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[d.scene][j] || gts[j].category != d.category) continue;
      const double iou = geometry::iou3d(d.box, gts[j].box);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best >= iou_threshold) {
      used[d.scene][best_j] = 1;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total));
  }
  // Interpolated precision: best precision at any recall >= r.
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  std::size_t pos = 0;
  for (int r = 1; r <= 40; ++r) {
    const double target = r / 40.0;
    while (pos < recall.size() && recall[pos] < target - 1e-12) ++pos;
    if (pos < recall.size()) ap += precision[pos];
  }
  return ap / 40.0;
}

}  // namespace

std::optional<double> ap40(std::span<const Detection> detections,
                           std::span<const std::vector<EvalObject>> ground_truths,
                           double iou_threshold) {
  return ap40_impl(detections, ground_truths, iou_threshold, std::nullopt);
}

std::optional<double> ap40_for_class(std::span<const Detection> detections,
                                     std::span<const std::vector<EvalObject>> ground_truths,
                                     double iou_threshold, int category) {
  return ap40_impl(detections, ground_truths, iou_threshold, category);
}

}  // namespace vqd::scenes
