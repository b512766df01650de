#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/numerics/tensor.hpp"
#include "vqlogits/rng.hpp"

namespace vqlogits {

struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<Index> inputs;   // [batch x seq], row-major
  std::vector<Index> targets;  // inputs shifted by one position
};

// Splits a token array into `batch` contiguous lanes and walks them with
// non-overlapping windows of `seq` tokens. Each epoch permutes which lane
// lands in which batch row; the permutation is drawn from the stream's seed.
class BatchStream {
 public:
  BatchStream(std::vector<Index> ids, std::size_t batch, std::size_t seq, std::uint64_t seed)
      : ids_(std::move(ids)), batch_(batch), seq_(seq), rng_(seed) {
    if (batch == 0 || seq == 0) throw ConfigError("batch size and sequence length must be > 0");
    if (ids_.size() < batch * (seq + 1)) {
      throw InputError("corpus of " + std::to_string(ids_.size()) +
                       " tokens is too small for batch " + std::to_string(batch) + " x seq " +
                       std::to_string(seq));
    }
    lane_len_ = ids_.size() / batch_;
    windows_ = (lane_len_ - 1) / seq_;
    lane_order_.resize(batch_);
    start_epoch();
  }

  std::size_t batch_size() const { return batch_; }
  std::size_t seq_len() const { return seq_; }
  std::size_t batches_per_epoch() const { return windows_; }
  std::size_t tokens_per_epoch() const { return batch_ * seq_ * windows_; }
  std::size_t epoch() const { return epoch_; }

  // Next batch of the current epoch, or nullopt once the epoch is exhausted.
  std::optional<Batch> next() {
    if (cursor_ >= windows_) return std::nullopt;
    Batch out;
    out.batch = batch_;
    out.seq = seq_;
    out.inputs.resize(batch_ * seq_);
    out.targets.resize(batch_ * seq_);
    for (std::size_t row = 0; row < batch_; ++row) {
      const std::size_t base = lane_order_[row] * lane_len_ + cursor_ * seq_;
      std::copy_n(ids_.begin() + static_cast<std::ptrdiff_t>(base), seq_,
                  out.inputs.begin() + static_cast<std::ptrdiff_t>(row * seq_));
      std::copy_n(ids_.begin() + static_cast<std::ptrdiff_t>(base + 1), seq_,
                  out.targets.begin() + static_cast<std::ptrdiff_t>(row * seq_));
    }
    ++cursor_;
    return out;
  }

  // Like next(), rolling over into a freshly shuffled epoch when needed.
  Batch next_cycling() {
    if (auto b = next()) return std::move(*b);
    start_epoch();
    return *next();
  }

  void start_epoch() {
    if (cursor_ != 0 || started_) ++epoch_;
    started_ = true;
    cursor_ = 0;
    std::iota(lane_order_.begin(), lane_order_.end(), std::size_t{0});
    std::shuffle(lane_order_.begin(), lane_order_.end(), rng_.engine());
  }

 private:
  std::vector<Index> ids_;
  std::size_t batch_;
  std::size_t seq_;
  Rng rng_;
  std::size_t lane_len_ = 0;
  std::size_t windows_ = 0;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  bool started_ = false;
  std::vector<std::size_t> lane_order_;
};

// Splits a token array into a leading training part and a trailing held-out
// part containing `valid_fraction` of the tokens.
inline std::pair<std::vector<Index>, std::vector<Index>> split_tokens(
    const std::vector<Index>& ids, double valid_fraction) {
  if (valid_fraction < 0.0 || valid_fraction >= 1.0) {
    throw ConfigError("valid fraction must be in [0, 1)");
  }
  const auto n_valid = static_cast<std::size_t>(static_cast<double>(ids.size()) * valid_fraction);
  const auto cut = static_cast<std::ptrdiff_t>(ids.size() - n_valid);
  return {std::vector<Index>(ids.begin(), ids.begin() + cut),
          std::vector<Index>(ids.begin() + cut, ids.end())};
}

}  // namespace vqlogits
