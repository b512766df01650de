#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/numerics/tensor.hpp"

namespace vqlogits {

// Word-level vocabulary with corpus frequencies.
//
// Ids 0..V-3 are ordinary tokens ordered by descending frequency (ties broken
// lexicographically); the unknown token and the end-of-line token occupy the
// last two ids so the frequency-ranked prefix stays contiguous.
class Vocabulary {
 public:
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr std::string_view kEos = "<eos>";

  Vocabulary() = default;

  // Counts whitespace-separated tokens; each non-empty line ends with <eos>.
  // max_size bounds V including the two specials.
  static Vocabulary build(std::istream& corpus, std::size_t max_size,
                          std::uint64_t min_freq = 1) {
    if (max_size < 2) throw ConfigError("vocabulary max_size must be at least 2");
    std::unordered_map<std::string, std::uint64_t> counts;
    std::uint64_t eos = 0, unk = 0, total = 0;
    for_each_token(corpus, [&](std::string_view tok, bool end_of_line) {
      ++total;
      if (end_of_line || tok == kEos) {
        ++eos;
      } else if (tok == kUnk) {
        ++unk;
      } else {
        ++counts[std::string(tok)];
      }
    });
    if (total == 0) throw InputError("corpus is empty");

    std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });

    Vocabulary v;
    const std::size_t capacity = max_size - 2;
    for (auto& [tok, freq] : ranked) {
      if (v.id_to_token_.size() < capacity && freq >= min_freq) {
        v.push(std::move(tok), freq);
      } else {
        unk += freq;
      }
    }
    v.push(std::string(kUnk), unk);
    v.push(std::string(kEos), eos);
    return v;
  }

  static Vocabulary build_from_file(const std::string& path, std::size_t max_size,
                                    std::uint64_t min_freq = 1) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open corpus " + path);
    return build(in, max_size, min_freq);
  }

  std::size_t size() const { return id_to_token_.size(); }
  Index unk_id() const { return static_cast<Index>(size() - 2); }
  Index eos_id() const { return static_cast<Index>(size() - 1); }

  const std::string& token(Index id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= size()) {
      throw IndexError("token id " + std::to_string(id) + " out of range");
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  Index id(std::string_view token) const {
    if (token == kEos) return eos_id();
    auto it = token_to_id_.find(std::string(token));
    return it == token_to_id_.end() ? unk_id() : it->second;
  }

  std::uint64_t freq(Index id) const { return freq_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::uint64_t>& freqs() const { return freq_; }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  std::vector<Index> encode(std::istream& text) const {
    std::vector<Index> ids;
    for_each_token(text, [&](std::string_view tok, bool end_of_line) {
      ids.push_back(end_of_line ? eos_id() : id(tok));
    });
    return ids;
  }

  std::vector<Index> encode(const std::string& text) const {
    std::istringstream in(text);
    return encode(in);
  }

  std::vector<Index> encode_file(const std::string& path) const {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open corpus " + path);
    return encode(in);
  }

  // Space-joined tokens; <eos> becomes a newline.
  std::string decode(std::span<const Index> ids) const {
    std::string out;
    bool line_start = true;
    for (Index i : ids) {
      if (i == eos_id()) {
        out += '\n';
        line_start = true;
        continue;
      }
      if (!line_start) out += ' ';
      out += token(i);
      line_start = false;
    }
    return out;
  }

  // One `token<TAB>freq` line per id.
  void save(std::ostream& out) const {
    for (std::size_t i = 0; i < size(); ++i) out << id_to_token_[i] << '\t' << freq_[i] << '\n';
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write vocabulary " + path);
    save(out);
  }

  static Vocabulary load(std::istream& in) {
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw InputError("malformed vocabulary line: " + line);
      std::uint64_t freq = 0;
      try {
        freq = std::stoull(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw InputError("malformed vocabulary frequency: " + line);
      }
      v.push(line.substr(0, tab), freq);
    }
    if (v.size() < 2 || v.id_to_token_[v.size() - 2] != kUnk ||
        v.id_to_token_.back() != kEos) {
      throw InputError("vocabulary must end with " + std::string(kUnk) + " and " +
                       std::string(kEos));
    }
    v.token_to_id_.erase(std::string(kUnk));
    v.token_to_id_.erase(std::string(kEos));
    return v;
  }

  static Vocabulary load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open vocabulary " + path);
    return load(in);
  }

  bool operator==(const Vocabulary& other) const {
    return id_to_token_ == other.id_to_token_ && freq_ == other.freq_;
  }

 private:
  template <typename Fn>
  static void for_each_token(std::istream& in, Fn&& fn) {
    std::string line;
    while (std::getline(in, line)) {
      bool any = false;
      std::size_t pos = 0;
      while (pos < line.size()) {
        while (pos < line.size() && is_space(line[pos])) ++pos;
        const std::size_t start = pos;
        while (pos < line.size() && !is_space(line[pos])) ++pos;
        if (pos > start) {
          fn(std::string_view(line).substr(start, pos - start), false);
          any = true;
        }
      }
      if (any) fn(kEos, true);
    }
  }

  static bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f';
  }

  void push(std::string tok, std::uint64_t freq) {
    token_to_id_.emplace(tok, static_cast<Index>(id_to_token_.size()));
    id_to_token_.push_back(std::move(tok));
    freq_.push_back(freq);
  }

  std::unordered_map<std::string, Index> token_to_id_;
  std::vector<std::string> id_to_token_;
  std::vector<std::uint64_t> freq_;
};

}  // namespace vqlogits
