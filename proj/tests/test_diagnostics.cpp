#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "vqd/diagnostics.hpp"
#include "vqd/model.hpp"

using namespace vqd;
using namespace vqd::diagnostics;

namespace {

// Random row-stochastic map over the allowed entries of `mask`.
std::vector<double> random_map(const attention::AttentionMask& mask, Rng& rng) {
  const std::size_t s = mask.size;
  std::vector<double> a(s * s, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < s; ++j)
      if (mask.allowed(i, j)) total += a[i * s + j] = rng.uniform(0.01, 1.0);
    for (std::size_t j = 0; j < s; ++j) a[i * s + j] /= total;
  }
  return a;
}

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "vqd_diag_test";
  std::filesystem::create_directories(dir);
  const auto p = dir / name;
  std::filesystem::remove(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("negative entropy of uniform and one-hot rows") {
  std::vector<double> uniform(16, 0.25);
  CHECK(attention_negative_entropy(uniform, 4) == doctest::Approx(-std::log(4.0)).epsilon(1e-14));
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  CHECK(attention_negative_entropy(eye, 4) == 0.0);
}

TEST_CASE("negative entropy matches direct summation") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mask = attention::build_denoising_mask(3, 2, 2);
    const auto a = random_map(mask, rng);
    double expect = 0.0;
    for (double p : a)
      if (p > 0) expect += p * std::log(p);
    expect /= static_cast<double>(mask.size);
    CHECK(std::abs(attention_negative_entropy(a, mask.size, &mask) - expect) < 1e-12);
  }
}

TEST_CASE("negative entropy stays within its bounds") {
  Rng rng(2);
  for (std::size_t n = 1; n <= 4; ++n)
    for (std::size_t k = 0; k <= 3; ++k)
      for (std::size_t c = 0; c <= 2; ++c) {
        const auto mask = attention::build_denoising_mask(n, k, c);
        std::size_t widest = 0;
        for (std::size_t i = 0; i < mask.size; ++i) {
          std::size_t w = 0;
          for (std::size_t j = 0; j < mask.size; ++j) w += mask.allowed(i, j);
          widest = std::max(widest, w);
        }
        const double v = attention_negative_entropy(random_map(mask, rng), mask.size, &mask);
        CHECK(v <= 0.0);
        CHECK(v >= -std::log(static_cast<double>(widest)) - 1e-12);
      }
}

TEST_CASE("negative entropy rejects invalid maps") {
  std::vector<double> a(4, 0.4);
  CHECK_THROWS_AS(attention_negative_entropy(a, 2), ValidationError);
  CHECK_THROWS_AS(attention_negative_entropy(a, 3), ValidationError);
  const auto mask = attention::build_denoising_mask(1, 1, 1);
  std::vector<double> leak{0.5, 0.5, 0.5, 0.5};  // learnable row on a noisy column
  CHECK_THROWS_AS(attention_negative_entropy(leak, 2, &mask), ValidationError);
}

TEST_CASE("noisy to learnable mass examples") {
  // N=2, K=1, C=2: S=4.
  const auto mask = attention::build_denoising_mask(2, 1, 2);
  std::vector<double> self(16, 0.0);
  for (int i = 0; i < 2; ++i) self[i * 4 + i] = 1.0;
  self[2 * 4 + 2] = 1.0;
  self[3 * 4 + 3] = 1.0;
  CHECK(noisy_to_learnable_mass(self, 2, 1, 2) == 0.0);

  std::vector<double> uni(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) {
    std::size_t w = 0;
    for (std::size_t j = 0; j < 4; ++j) w += mask.allowed(i, j);
    for (std::size_t j = 0; j < 4; ++j)
      if (mask.allowed(i, j)) uni[i * 4 + j] = 1.0 / static_cast<double>(w);
  }
  CHECK(noisy_to_learnable_mass(uni, 2, 1, 2) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(std::isnan(noisy_to_learnable_mass(std::vector<double>(9, 1.0 / 3), 3, 0, 0)));
}

TEST_CASE("mass agrees with per-row slicing and complements the noisy share") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + trial % 4, k = 1 + trial % 3, c = 1 + trial % 2;
    const auto mask = attention::build_denoising_mask(n, k, c);
    const auto a = random_map(mask, rng);
    const std::size_t s = mask.size;
    double expect = 0.0;
    for (std::size_t i = n; i < s; ++i) {
      const std::span<const double> row(a.data() + i * s, s);
      double learn = 0.0, rest = 0.0;
      for (std::size_t j = 0; j < n; ++j) learn += row[j];
      for (std::size_t j = n; j < s; ++j) rest += row[j];
      CHECK(std::abs(learn + rest - 1.0) < 1e-12);
      expect += learn;
    }
    expect /= static_cast<double>(k * c);
    CHECK(std::abs(noisy_to_learnable_mass(a, n, k, c) - expect) < 1e-12);
  }
}

TEST_CASE("accumulator averages maps") {
  MapAccumulator acc;
  CHECK(std::isnan(acc.negative_entropy()));
  std::vector<double> a(16, 0.0), b(16, 0.25);
  for (int i = 0; i < 4; ++i) a[i * 5] = 1.0;
  acc.add(a, 4, 0, 0);
  acc.add(b, 4, 0, 0);
  CHECK(acc.negative_entropy() == doctest::Approx(-0.5 * std::log(4.0)));
  CHECK(std::isnan(acc.mass()));
}

TEST_CASE("run csv round trip") {
  const auto empty = temp_file("empty.csv");
  write_run_csv({}, empty);
  CHECK(slurp(empty) == std::string(run_csv_header()) + "\n");
  CHECK(read_run_csv(empty).empty());

  std::vector<EpochRecord> recs;
  Rng rng(4);
  for (std::size_t e = 1; e <= 5; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.negative_entropy = -rng.uniform(0, 3);
    r.noisy_to_learnable_mass = e == 3 ? std::nan("") : rng.uniform();
    r.loss_total = rng.uniform(0, 100);
    r.loss_det = rng.uniform(0, 100);
    r.loss_dn = rng.uniform(0, 10);
    r.loss_reconstruction = rng.uniform(0, 10);
    r.loss_kl = rng.uniform(0, 1e-4);
    r.loss_distill = rng.uniform(0, 1);
    r.val_ap40 = rng.uniform();
    r.wall_time = 12.5;
    recs.push_back(r);
  }
  const auto path = temp_file("run.csv");
  write_run_csv(recs, path);
  const auto back = read_run_csv(path);
  REQUIRE(back.size() == recs.size());
  auto close6 = [](double a, double b) {
    if (std::isnan(a)) return std::isnan(b);
    return std::abs(a - b) <= 5e-6 * std::abs(a);
  };
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].epoch == recs[i].epoch);
    CHECK(close6(recs[i].negative_entropy, back[i].negative_entropy));
    CHECK(close6(recs[i].noisy_to_learnable_mass, back[i].noisy_to_learnable_mass));
    CHECK(close6(recs[i].loss_total, back[i].loss_total));
    CHECK(close6(recs[i].loss_kl, back[i].loss_kl));
    CHECK(close6(recs[i].val_ap40, back[i].val_ap40));
  }

  // Appending rows one at a time gives the same file.
  const auto appended = temp_file("appended.csv");
  for (const auto& r : recs) append_run_csv(r, appended);
  CHECK(slurp(appended) == slurp(path));
}

TEST_CASE("two runs write separate files") {
  const auto a = temp_file("a.csv"), b = temp_file("b.csv");
  EpochRecord r;
  for (std::size_t e = 1; e <= 3; ++e) {
    r.epoch = e;
    r.loss_total = 1.0;
    append_run_csv(r, a);
    r.loss_total = 2.0;
    append_run_csv(r, b);
  }
  const auto ra = read_run_csv(a), rb = read_run_csv(b);
  REQUIRE(ra.size() == 3);
  REQUIRE(rb.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(ra[i].loss_total == 1.0);
    CHECK(rb[i].loss_total == 2.0);
  }
}

TEST_CASE("malformed csv reports the line") {
  const auto p = temp_file("bad.csv");
  {
    std::ofstream out(p);
    out << run_csv_header() << "\n1,2,3\n";
  }
  try {
    read_run_csv(p);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  CHECK_THROWS_AS(write_run_csv({}, "/nonexistent-dir/x.csv"), std::runtime_error);
}

TEST_CASE("diagnostics leave losses and gradients untouched") {
  model::DetectorConfig cfg;
  cfg.queries = 4;
  cfg.width = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.grid = 4;
  cfg.ffn_width = 16;
  scenes::SceneConfig sc;
  sc.grid = 4;
  const auto scene = scenes::generate_scene(1, 2, sc, 2);
  auto run = [&](bool diag) {
    auto p = model::create_params(cfg, 3);
    Rng rng(4);
    const auto f = model::forward_train(*p, cfg, scene, model::prepare_step(scene, cfg, rng));
    if (diag) {
      MapAccumulator acc;
      for (const auto& m : f.trace.final_maps) acc.add(m, f.trace.n, f.trace.k, f.trace.c);
      CHECK(acc.negative_entropy() <= 0.0);
      CHECK(acc.mass() >= 0.0);
      CHECK(acc.mass() <= 1.0);
    }
    const auto t = model::compute_losses(*p, cfg, scene, f, 0.1);
    backward(t.total);
    return std::make_pair(t.total.item(), p->query_content.grad());
  };
  const auto a = run(false), b = run(true);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}
