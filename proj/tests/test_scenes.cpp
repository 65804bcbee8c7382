#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "vqd/scenes.hpp"

using namespace vqd;
using namespace vqd::scenes;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("vqd_test_" + name);
}

bool same_scene(const Scene& a, const Scene& b) {
  if (a.scene_id != b.scene_id || a.seed != b.seed || a.grid != b.grid ||
      a.channels != b.channels || a.objects.size() != b.objects.size() ||
      a.features.size() != b.features.size())
    return false;
  if (std::memcmp(&a.intrinsics, &b.intrinsics, sizeof(a.intrinsics)) != 0) return false;
  for (std::size_t i = 0; i < a.objects.size(); ++i)
    if (a.objects[i].to_array() != b.objects[i].to_array()) return false;
  return std::memcmp(a.features.data(), b.features.data(),
                     a.features.size() * sizeof(double)) == 0;
}

Detection det(std::size_t scene, int cat, double score, const geometry::OrientedBox3D& box) {
  return {scene, cat, score, box};
}

}  // namespace

TEST_CASE("scene generation") {
  SceneConfig cfg;
  const Scene empty = generate_scene(1, 2, cfg, 0);
  CHECK(empty.objects.empty());
  CHECK(empty.features.size() == cfg.grid * cfg.grid * cfg.channels());
  double mean = 0;
  for (double v : empty.features) mean += v;
  mean /= empty.features.size();
  CHECK(std::abs(mean) < 0.01);

  const Scene a = generate_scene(7, 99, cfg);
  const Scene b = generate_scene(7, 99, cfg);
  CHECK(same_scene(a, b));
  CHECK(!a.objects.empty());
  CHECK(a.objects.size() <= cfg.k_max);
  for (const auto& g : a.objects) CHECK(geometry::satisfies_invariants(g));
  for (double v : a.features) CHECK(std::isfinite(v));
}

TEST_CASE("projected centers stay in frame") {
  SceneConfig cfg;
  cfg.grid = 4;
  std::size_t total = 0, inside = 0;
  const auto scenes = generate_dataset(10000, 3, cfg);
  for (const auto& s : scenes)
    for (const auto& g : s.objects) {
      ++total;
      inside += g.x_c >= 0 && g.x_c <= 1 && g.y_c >= 0 && g.y_c <= 1;
    }
  CHECK(total > 10000);
  CHECK(static_cast<double>(inside) >= 0.99 * static_cast<double>(total));
}

TEST_CASE("disjoint seeds give disjoint scenes") {
  SceneConfig cfg;
  cfg.grid = 4;
  const auto a = generate_dataset(300, 1, cfg);
  const auto b = generate_dataset(300, 2, cfg);
  std::set<std::uint64_t> ids;
  for (const auto& s : a) ids.insert(s.scene_id);
  for (const auto& s : b) ids.insert(s.scene_id);
  CHECK(ids.size() == 600);
}

TEST_CASE("dataset round trip") {
  SceneConfig cfg;
  const auto path = temp_file("roundtrip.jsonl");
  save_dataset({}, path);
  CHECK(load_dataset(path).empty());
  CHECK(std::filesystem::file_size(path) == 0);

  const auto one = generate_dataset(1, 5, cfg);
  save_dataset(one, path);
  const auto back1 = load_dataset(path);
  REQUIRE(back1.size() == 1);
  CHECK(same_scene(one[0], back1[0]));

  cfg.grid = 6;
  const auto many = generate_dataset(1000, 6, cfg);
  save_dataset(many, path);
  const auto back = load_dataset(path);
  REQUIRE(back.size() == many.size());
  bool all = true;
  for (std::size_t i = 0; i < many.size(); ++i) all = all && same_scene(many[i], back[i]);
  CHECK(all);
  std::filesystem::remove(path);
}

TEST_CASE("malformed lines report their number") {
  const auto path = temp_file("bad.jsonl");
  SceneConfig cfg;
  cfg.grid = 2;
  save_dataset(generate_dataset(1, 1, cfg), path);
  {
    std::ofstream out(path, std::ios::app);
    out << "{\"scene_id\": 3}\n";
  }
  try {
    load_dataset(path);
    FAIL("expected a parse error");
  } catch (const DatasetError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("ap40 trivial cases") {
  const geometry::OrientedBox3D b1{{0, 1, 20}, 4, 1.7, 1.5, 0.1};
  const geometry::OrientedBox3D b2{{5, 1, 30}, 5, 1.9, 2.0, -1.0};
  const std::vector<std::vector<EvalObject>> gts{{{0, b1}}, {{1, b2}}};
  const std::vector<Detection> perfect{det(0, 0, 1.0, b1), det(1, 1, 1.0, b2)};
  CHECK(ap40(perfect, gts, 0.5).value() == 1.0);
  CHECK(ap40({}, gts, 0.5).value() == 0.0);
  const std::vector<std::vector<EvalObject>> none{{}, {}};
  CHECK_FALSE(ap40(perfect, none, 0.5).has_value());
  // Wrong class never matches.
  const std::vector<Detection> wrong{det(0, 1, 0.9, b1)};
  CHECK(ap40(wrong, gts, 0.5).value() == 0.0);
  CHECK(ap40_for_class(perfect, gts, 0.5, 1).value() == 1.0);
}

TEST_CASE("ap40 hand-executed four-detection case") {
  // Four ground truths; two true positives ranked first, two false
  // positives after. Precision is 1 up to recall 1/2 and recall never
  // exceeds 1/2, so 20 of the 40 points score 1: AP = 0.5.
  std::vector<std::vector<EvalObject>> gts(1);
  for (int i = 0; i < 4; ++i) gts[0].push_back({0, {{i * 10.0, 1, 20}, 4, 1.7, 1.5, 0}});
  geometry::OrientedBox3D far{{100, 1, 50}, 4, 1.7, 1.5, 0};
  const std::vector<Detection> dets{det(0, 0, 0.3, far), det(0, 0, 0.9, gts[0][0].box),
                                    det(0, 0, 0.8, gts[0][1].box), det(0, 0, 0.2, far)};
  CHECK(ap40(dets, gts, 0.5).value() == 0.5);

  // A true positive at rank 3 after one false positive: precision at
  // recall 3/4 is 3/4 for points 21..30, points 31..40 unreachable.
  std::vector<Detection> mixed{det(0, 0, 0.9, gts[0][0].box), det(0, 0, 0.8, far),
                               det(0, 0, 0.7, gts[0][1].box), det(0, 0, 0.6, gts[0][2].box)};
  // ranks: TP (p=1, r=.25), FP (p=.5), TP (p=2/3, r=.5), TP (p=3/4, r=.75)
  const double expected = (10 * 1.0 + 10 * 0.75 + 10 * 0.75) / 40.0;
  CHECK(std::abs(ap40(mixed, gts, 0.5).value() - expected) <= 1e-15);
}

TEST_CASE("ap40 properties") {
  SceneConfig cfg;
  cfg.grid = 2;
  const auto scenes = generate_dataset(30, 9, cfg);
  const auto gts = eval_objects(scenes);
  Rng rng(4);
  std::vector<Detection> dets;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (const auto& g : gts[s]) {
      geometry::OrientedBox3D b = g.box;
      b.center.x += rng.normal(0, 0.4);
      b.center.z += rng.normal(0, 0.8);
      b.yaw += rng.normal(0, 0.2);
      dets.push_back(det(s, g.category, rng.uniform(), b));
      if (rng.bernoulli(0.3)) dets.push_back(det(s, g.category, rng.uniform(), b));
    }
  const double base = ap40(dets, gts, 0.5).value();
  std::vector<Detection> rev(dets.rbegin(), dets.rend());
  CHECK(ap40(rev, gts, 0.5).value() == base);
  double prev = 2.0;
  for (double t : {0.1, 0.3, 0.5, 0.7, 0.9, 0.999}) {
    const double ap = ap40(dets, gts, t).value();
    CHECK(ap <= prev);
    prev = ap;
  }
  CHECK(prev < 0.05);
}
