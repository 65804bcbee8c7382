#include "vqd/attention.hpp"

#include <cmath>

namespace vqd::attention {

AttentionMask build_denoising_mask(std::size_t n, std::size_t k, std::size_t c) {
  if (n == 0) throw DimensionError("denoising mask needs at least one learnable query");
  AttentionMask m;
  m.n = n;
  m.k = k;
  m.c = c;
  m.size = k * c + n;
  m.allow.assign(m.size * m.size, 0);
  auto block_of = [n, k](std::size_t i) { return (i - n) / k; };
  for (std::size_t r = 0; r < m.size; ++r) {
    for (std::size_t col = 0; col < m.size; ++col) {
      bool ok;
      if (col < n)
        ok = true;
      else if (r < n)
        ok = false;
      else
        ok = block_of(r) == block_of(col);
      m.allow[r * m.size + col] = ok ? 1 : 0;
    }
  }
  return m;
}

std::vector<std::uint8_t> block_diagonal(const AttentionMask& mask,
                                         std::size_t groups) {
  const std::size_t s = mask.size, total = s * groups;
  std::vector<std::uint8_t> out(total * total, 0);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t r = 0; r < s; ++r)
      std::copy_n(mask.allow.data() + r * s, s,
                  out.data() + (g * s + r) * total + g * s);
  return out;
}

void GroupQuerySet::validate() const {
  if (groups.empty()) throw DimensionError("query set has no groups");
  const std::size_t d = groups[0].cols();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].rank() != 2 || groups[g].rows() != group_size() ||
        groups[g].cols() != d)
      throw DimensionError("query group " + std::to_string(g) + " has shape " +
                           shape_string(groups[g].shape()) + ", expected [" +
                           std::to_string(group_size()) + "x" +
                           std::to_string(d) + "]");
  }
}

Tensor concat_group_queries(const Tensor& learnable,
                            std::span<const Tensor> noisy_blocks) {
  std::vector<Tensor> parts;
  parts.reserve(noisy_blocks.size() + 1);
  parts.push_back(learnable);
  for (const Tensor& b : noisy_blocks) {
    if (b.size() != 0 && b.cols() != learnable.cols())
      throw DimensionError("noisy block width " + std::to_string(b.cols()) +
                           " differs from learnable width " +
                           std::to_string(learnable.cols()));
    if (b.rows() != 0 && b.size() != 0) parts.push_back(b);
  }
  if (parts.size() == 1) return learnable;
  return concat_rows(parts);
}

AttentionParams AttentionParams::create(ParameterStore& store,
                                        const std::string& prefix,
                                        std::size_t width) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(width));
  AttentionParams p;
  p.wq = store.add_normal(prefix + ".wq", {width, width}, sd);
  p.bq = store.add_constant(prefix + ".bq", {width}, 0.0);
  p.wk = store.add_normal(prefix + ".wk", {width, width}, sd);
  p.bk = store.add_constant(prefix + ".bk", {width}, 0.0);
  p.wv = store.add_normal(prefix + ".wv", {width, width}, sd);
  p.bv = store.add_constant(prefix + ".bv", {width}, 0.0);
  p.wo = store.add_normal(prefix + ".wo", {width, width}, sd);
  p.bo = store.add_constant(prefix + ".bo", {width}, 0.0);
  return p;
}

SelfAttentionResult masked_multihead_self_attention(const Tensor& queries,
                                                    const AttentionMask& mask,
                                                    const AttentionParams& params,
                                                    std::size_t heads) {
  if (queries.rows() != mask.size)
    throw DimensionError("self-attention: " + std::to_string(queries.rows()) +
                         " queries for mask of size " + std::to_string(mask.size));
  const Tensor q = linear(queries, params.wq, params.bq);
  const Tensor k = linear(queries, params.wk, params.bk);
  const Tensor v = linear(queries, params.wv, params.bv);
  const MaskView view = mask.view();
  SelfAttentionResult out;
  const Tensor ctx = multihead_attention(q, k, v, heads, &view, &out.map);
  out.output = linear(ctx, params.wo, params.bo);
  return out;
}

GroupAttentionResult separated_group_attention(const Tensor& stacked,
                                               std::size_t groups,
                                               const AttentionMask& mask,
                                               const AttentionParams& params,
                                               std::size_t heads) {
  const std::size_t s = mask.size, total = s * groups;
  if (groups == 0 || stacked.rows() != total)
    throw DimensionError("group attention: " + std::to_string(stacked.rows()) +
                         " rows for " + std::to_string(groups) +
                         " groups of " + std::to_string(s));
  // Disallowed entries contribute exact zeros, so one block-diagonal pass
  // equals G separate passes bit for bit.
  const std::vector<std::uint8_t> allow = block_diagonal(mask, groups);
  const MaskView view{total, total, allow};
  const Tensor q = linear(stacked, params.wq, params.bq);
  const Tensor k = linear(stacked, params.wk, params.bk);
  const Tensor v = linear(stacked, params.wv, params.bv);
  std::vector<double> full;
  const Tensor ctx = multihead_attention(q, k, v, heads, &view, &full);

  GroupAttentionResult out;
  out.output = linear(ctx, params.wo, params.bo);
  out.maps.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    auto& m = out.maps[g];
    m.resize(s * s);
    for (std::size_t r = 0; r < s; ++r)
      std::copy_n(full.data() + (g * s + r) * total + g * s, s, m.data() + r * s);
  }
  return out;
}

GroupAttentionResult separated_group_attention(const GroupQuerySet& queries,
                                               const AttentionMask& mask,
                                               const AttentionParams& params,
                                               std::size_t heads) {
  queries.validate();
  if (queries.group_size() != mask.size)
    throw DimensionError("group layout does not match mask size");
  const Tensor stacked = queries.groups.size() == 1
                             ? queries.groups[0]
                             : concat_rows(queries.groups);
  return separated_group_attention(stacked, queries.groups.size(), mask, params,
                                   heads);
}

}  // namespace vqd::attention
