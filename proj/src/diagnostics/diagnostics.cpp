#include "vqd/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

namespace vqd::diagnostics {

namespace {

constexpr const char* kHeader =
    "epoch,negative_entropy,noisy_to_learnable_mass,loss_total,loss_det,loss_dn,"
    "loss_reconstruction,loss_kl,loss_distill,val_ap40";
constexpr std::size_t kColumns = 10;

std::string g6(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string row(const EpochRecord& r) {
  std::string s = std::to_string(r.epoch);
  for (double v : {r.negative_entropy, r.noisy_to_learnable_mass, r.loss_total, r.loss_det,
                   r.loss_dn, r.loss_reconstruction, r.loss_kl, r.loss_distill, r.val_ap40}) {
    s += ',';
    s += g6(v);
  }
  return s;
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode) {
  std::ofstream out(path, mode);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

bool empty_or_missing(const std::filesystem::path& path) {
  std::error_code ec;
  return !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
}

}  // namespace

const char* run_csv_header() { return kHeader; }

double attention_negative_entropy(std::span<const double> a, std::size_t size,
                                  const attention::AttentionMask* mask) {
  if (a.size() != size * size)
    throw ValidationError("attention map holds " + std::to_string(a.size()) +
                          " entries, expected " + std::to_string(size * size));
  if (mask && mask->size != size) throw ValidationError("mask size does not match map");
  if (size == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    double row_sum = 0.0, plogp = 0.0;
    for (std::size_t j = 0; j < size; ++j) {
      const double p = a[i * size + j];
      if (p < 0.0 || (mask && !mask->allowed(i, j) && p != 0.0))
        throw ValidationError("row " + std::to_string(i) + " has invalid entry at column " +
                              std::to_string(j));
      row_sum += p;
      if (p > 0.0) plogp += p * std::log(p);
    }
    if (std::abs(row_sum - 1.0) > 1e-9)
      throw ValidationError("row " + std::to_string(i) + " sums to " + std::to_string(row_sum));
    total += plogp;
  }
  return total / static_cast<double>(size);
}

double noisy_to_learnable_mass(std::span<const double> a, std::size_t n, std::size_t k,
                               std::size_t c) {
  const std::size_t size = n + k * c;
  if (a.size() != size * size)
    throw ValidationError("attention map does not match the query layout");
  if (k * c == 0) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (std::size_t i = n; i < size; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < n; ++j) m += a[i * size + j];
    total += m;
  }
  return total / static_cast<double>(k * c);
}

void MapAccumulator::add(std::span<const double> map, std::size_t n, std::size_t k,
                         std::size_t c) {
  entropy_sum_ += attention_negative_entropy(map, n + k * c);
  ++entropy_count_;
  if (k * c > 0) {
    mass_sum_ += noisy_to_learnable_mass(map, n, k, c);
    ++mass_count_;
  }
}

double MapAccumulator::negative_entropy() const {
  return entropy_count_ ? entropy_sum_ / static_cast<double>(entropy_count_)
                        : std::numeric_limits<double>::quiet_NaN();
}

double MapAccumulator::mass() const {
  return mass_count_ ? mass_sum_ / static_cast<double>(mass_count_)
                     : std::numeric_limits<double>::quiet_NaN();
}

void write_run_csv(std::span<const EpochRecord> records, const std::filesystem::path& path) {
  auto out = open_out(path, std::ios::trunc);
  out << kHeader << '\n';
  for (const auto& r : records) out << row(r) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void append_run_csv(const EpochRecord& record, const std::filesystem::path& path) {
  const bool header = empty_or_missing(path);
  auto out = open_out(path, std::ios::app);
  if (header) out << kHeader << '\n';
  out << row(record) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void append_timing_csv(const EpochRecord& record, const std::filesystem::path& path) {
  const bool header = empty_or_missing(path);
  auto out = open_out(path, std::ios::app);
  if (header) out << "epoch,wall_time_s\n";
  out << record.epoch << ',' << g6(record.wall_time) << '\n';
}

std::vector<EpochRecord> read_run_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kHeader)
    throw ValidationError(path.string() + ":1: unexpected header");
  std::vector<EpochRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != kColumns)
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(kColumns) + " columns");
    try {
      EpochRecord r;
      r.epoch = std::stoul(cells[0]);
      double* fields[] = {&r.negative_entropy, &r.noisy_to_learnable_mass, &r.loss_total,
                          &r.loss_det, &r.loss_dn, &r.loss_reconstruction, &r.loss_kl,
                          &r.loss_distill, &r.val_ap40};
      for (std::size_t i = 0; i < 9; ++i) *fields[i] = std::stod(cells[i + 1]);
      out.push_back(r);
    } catch (const std::logic_error&) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

}  // namespace vqd::diagnostics
