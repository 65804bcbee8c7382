#pragma once

// Mask separated self-attention over G query groups. A group holds the
// learnable block [0, N) followed by C noisy blocks of K rows each, so every
// group has S = K*C + N rows.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vqd/ops.hpp"
#include "vqd/parameters.hpp"
#include "vqd/tensor.hpp"

namespace vqd::attention {

struct AttentionMask {
  std::size_t n = 0, k = 0, c = 0;
  std::size_t size = 0;
  std::vector<std::uint8_t> allow;  // size x size, row attends to column

  bool allowed(std::size_t row, std::size_t col) const {
    return allow[row * size + col] != 0;
  }
  MaskView view() const { return {size, size, allow}; }
};

// Learnable rows see learnable columns only; a noisy row of block j sees the
// learnable columns and block j.
AttentionMask build_denoising_mask(std::size_t n, std::size_t k, std::size_t c);

// Block-diagonal copy of `mask` over `groups` stacked groups.
std::vector<std::uint8_t> block_diagonal(const AttentionMask& mask,
                                         std::size_t groups);

struct GroupQuerySet {
  std::size_t n = 0, k = 0, c = 0;
  std::vector<Tensor> groups;  // each S x D

  std::size_t group_size() const { return k * c + n; }
  std::size_t width() const { return groups.empty() ? 0 : groups[0].cols(); }
  // Throws DimensionError when any group deviates from the declared layout.
  void validate() const;
};

// (q_L; q_N1; ...; q_NC)
Tensor concat_group_queries(const Tensor& learnable,
                            std::span<const Tensor> noisy_blocks);

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;

  static AttentionParams create(ParameterStore& store, const std::string& prefix,
                                std::size_t width);
};

struct SelfAttentionResult {
  Tensor output;             // S x D
  std::vector<double> map;   // S x S, head-averaged, detached
};

SelfAttentionResult masked_multihead_self_attention(const Tensor& queries,
                                                    const AttentionMask& mask,
                                                    const AttentionParams& params,
                                                    std::size_t heads);

struct GroupAttentionResult {
  Tensor output;                          // (G*S) x D, groups stacked
  std::vector<std::vector<double>> maps;  // per group, S x S
};

// Shared weights, no interaction between groups. `stacked` holds the G
// groups one after another.
GroupAttentionResult separated_group_attention(const Tensor& stacked,
                                               std::size_t groups,
                                               const AttentionMask& mask,
                                               const AttentionParams& params,
                                               std::size_t heads);
GroupAttentionResult separated_group_attention(const GroupQuerySet& queries,
                                               const AttentionMask& mask,
                                               const AttentionParams& params,
                                               std::size_t heads);

}  // namespace vqd::attention
