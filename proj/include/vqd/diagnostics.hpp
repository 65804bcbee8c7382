#pragma once

// Attention-map sparsity instruments and per-epoch run logs.

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "vqd/attention.hpp"

namespace vqd::diagnostics {

struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Mean over rows of sum_j A[i,j] ln A[i,j] (0 ln 0 = 0), i.e. -H. Higher
// values mean sparser rows; one-hot rows give 0. `a` is size x size. With a
// mask, disallowed entries must be zero. Rows must sum to 1 within 1e-9.
double attention_negative_entropy(std::span<const double> a, std::size_t size,
                                  const attention::AttentionMask* mask = nullptr);

// Mean over noisy rows of the attention placed on columns [0, n). NaN when
// the layout has no noisy rows.
double noisy_to_learnable_mass(std::span<const double> a, std::size_t n,
                               std::size_t k, std::size_t c);

// Running means over the maps seen during an epoch.
class MapAccumulator {
 public:
  void add(std::span<const double> map, std::size_t n, std::size_t k, std::size_t c);
  double negative_entropy() const;
  double mass() const;  // NaN when no map had noisy rows

 private:
  double entropy_sum_ = 0.0, mass_sum_ = 0.0;
  std::size_t entropy_count_ = 0, mass_count_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double negative_entropy = 0.0;
  double noisy_to_learnable_mass = 0.0;
  double loss_total = 0.0;
  double loss_det = 0.0;
  double loss_dn = 0.0;
  double loss_reconstruction = 0.0;
  double loss_kl = 0.0;
  double loss_distill = 0.0;
  double val_ap40 = 0.0;
  double wall_time = 0.0;  // seconds; kept out of metrics.csv
};

// metrics.csv: header then one row per record, 6 significant digits.
void write_run_csv(std::span<const EpochRecord> records,
                   const std::filesystem::path& path);
// Appends one row, writing the header first if the file is new or empty.
void append_run_csv(const EpochRecord& record, const std::filesystem::path& path);
// Throws ValidationError on a malformed file.
std::vector<EpochRecord> read_run_csv(const std::filesystem::path& path);

// timing.csv: epoch and wall time, the run's only nondeterministic output.
void append_timing_csv(const EpochRecord& record, const std::filesystem::path& path);

const char* run_csv_header();

}  // namespace vqd::diagnostics
