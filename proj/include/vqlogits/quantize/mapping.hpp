#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/heads/output_head.hpp"
#include "vqlogits/heads/vocab_mapping.hpp"
#include "vqlogits/quantize/kmeans.hpp"
#include "vqlogits/rng.hpp"

namespace vqlogits {

enum class MappingStrategy { kKMeansOutput, kKMeansInput, kFreqBinning, kContiguousBlocks, kRandom };

inline std::string mapping_strategy_name(MappingStrategy s) {
  switch (s) {
    case MappingStrategy::kKMeansOutput: return "kmeans_output";
    case MappingStrategy::kKMeansInput: return "kmeans_input";
    case MappingStrategy::kFreqBinning: return "freq_binning";
    case MappingStrategy::kContiguousBlocks: return "contiguous_blocks";
    case MappingStrategy::kRandom: return "random";
  }
  return "?";
}

inline MappingStrategy parse_mapping_strategy(const std::string& name) {
  for (auto s : {MappingStrategy::kKMeansOutput, MappingStrategy::kKMeansInput,
                 MappingStrategy::kFreqBinning, MappingStrategy::kContiguousBlocks,
                 MappingStrategy::kRandom}) {
    if (mapping_strategy_name(s) == name) return s;
  }
  throw ConfigError("unknown mapping strategy '" + name + "'");
}

namespace detail {

inline void check_codes(std::size_t vocab, std::size_t k) {
  if (k == 0) throw ConfigError("K must be >= 1");
  if (k > vocab) {
    throw ConfigError("K=" + std::to_string(k) + " exceeds V=" + std::to_string(vocab));
  }
}

// floor(V/K) per bin, the first V mod K bins one larger.
inline std::vector<Index> equal_bins(const std::vector<std::size_t>& order, std::size_t k) {
  const std::size_t v = order.size();
  std::vector<Index> codes(v);
  const std::size_t base = v / k, extra = v % k;
  std::size_t pos = 0;
  for (std::size_t bin = 0; bin < k; ++bin) {
    const std::size_t len = base + (bin < extra ? 1 : 0);
    for (std::size_t i = 0; i < len; ++i) codes[order[pos++]] = static_cast<Index>(bin);
  }
  return codes;
}

}  // namespace detail

// Sort ids by descending frequency (ties by id) and cut into K near-equal bins.
inline VocabMapping freq_binning_mapping(const std::vector<std::uint64_t>& freqs, std::size_t k) {
  detail::check_codes(freqs.size(), k);
  std::vector<std::size_t> order(freqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return freqs[a] > freqs[b]; });
  return VocabMapping(detail::equal_bins(order, k), k);
}

// K near-equal blocks of raw id order.
inline VocabMapping contiguous_blocks_mapping(std::size_t vocab, std::size_t k) {
  detail::check_codes(vocab, k);
  std::vector<std::size_t> order(vocab);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return VocabMapping(detail::equal_bins(order, k), k);
}

// Independent uniform code per token.
inline VocabMapping random_mapping(std::size_t vocab, std::size_t k, std::uint64_t seed) {
  detail::check_codes(vocab, k);
  Rng rng(seed);
  std::vector<Index> codes(vocab);
  for (Index& c : codes) c = static_cast<Index>(rng.below(k));
  return VocabMapping(std::move(codes), k);
}

struct ClusteredMapping {
  VocabMapping mapping;
  KMeansResult kmeans;
};

// k-means over embedding rows (V x d); assignments become the mapping.
template <typename T>
ClusteredMapping kmeans_mapping(const Tensor<T>& embeddings, std::size_t k,
                                const KMeansOptions& opts = {}) {
  detail::check_codes(embeddings.rows(), k);
  KMeansResult res = kmeans(to_points(embeddings), k, opts);
  VocabMapping map(res.assignments, k);
  return {std::move(map), std::move(res)};
}

// Mean of the member rows per code; empty codes get zero vectors.
template <typename T>
Tensor<T> centroids_for_mapping(const Tensor<T>& embeddings, const VocabMapping& map) {
  const std::size_t d = embeddings.cols();
  if (embeddings.rows() != map.vocab_size()) {
    throw DimensionError("centroids_for_mapping: embeddings do not match mapping V");
  }
  std::vector<double> sums(map.num_codes() * d, 0.0);
  for (std::size_t i = 0; i < map.vocab_size(); ++i) {
    const auto j = static_cast<std::size_t>(map.code(i));
    for (std::size_t c = 0; c < d; ++c) sums[j * d + c] += static_cast<double>(embeddings.at(i, c));
  }
  Tensor<T> out({map.num_codes(), d}, true);
  for (std::size_t j = 0; j < map.num_codes(); ++j) {
    if (map.counts()[j] == 0) continue;
    for (std::size_t c = 0; c < d; ++c)
      out.at(j, c) = static_cast<T>(sums[j * d + c] / static_cast<double>(map.counts()[j]));
  }
  return out;
}

struct MappingInputs {
  std::size_t vocab = 0;
  std::size_t codes = 0;
  std::uint64_t seed = 0;
  std::size_t kmeans_iters = 20;
  const std::vector<std::uint64_t>* freqs = nullptr;
};

// Dispatch over every strategy. Embedding-based strategies take the matrix
// they cluster (output rows for kmeans_output, input rows for kmeans_input).
template <typename T>
VocabMapping init_mapping(MappingStrategy strategy, const MappingInputs& in,
                          const Tensor<T>* output_embeddings = nullptr,
                          const Tensor<T>* input_embeddings = nullptr) {
  switch (strategy) {
    case MappingStrategy::kKMeansOutput:
    case MappingStrategy::kKMeansInput: {
      const Tensor<T>* src =
          strategy == MappingStrategy::kKMeansOutput ? output_embeddings : input_embeddings;
      if (src == nullptr || !src->defined()) {
        throw ConfigError(mapping_strategy_name(strategy) + " needs embeddings to cluster");
      }
      if (src->rows() != in.vocab) throw ConfigError("embedding rows do not match V");
      return kmeans_mapping(*src, in.codes, {in.kmeans_iters, 1e-7, in.seed}).mapping;
    }
    case MappingStrategy::kFreqBinning:
      if (in.freqs == nullptr) throw ConfigError("freq_binning needs token frequencies");
      if (in.freqs->size() != in.vocab) throw ConfigError("frequency table does not match V");
      return freq_binning_mapping(*in.freqs, in.codes);
    case MappingStrategy::kContiguousBlocks:
      return contiguous_blocks_mapping(in.vocab, in.codes);
    case MappingStrategy::kRandom:
      return random_mapping(in.vocab, in.codes, in.seed);
  }
  throw ConfigError("unhandled mapping strategy");
}

// Pre-trained initialization: cluster a Full head's output embeddings and
// use the centroids as the codebook. The mapping is fixed afterwards.
template <typename T>
VQHead<T> init_option_a(const OutputHead<T>& source, std::size_t k, bool codebook_trainable,
                        const KMeansOptions& opts = {}) {
  const auto* full = std::get_if<FullHead<T>>(&source);
  if (full == nullptr) throw ConfigError("Option A initialization needs a full softmax head");
  ClusteredMapping cm = kmeans_mapping(full->embeddings, k, opts);
  Tensor<T> centroids({k, full->embeddings.cols()}, true);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < centroids.cols(); ++c)
      centroids.at(j, c) = static_cast<T>(
          cm.kmeans.centroids(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)));
  return {Codebook<T>{std::move(centroids), codebook_trainable}, std::move(cm.mapping), true};
}

}  // namespace vqlogits
