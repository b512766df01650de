#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/numerics/tensor.hpp"

namespace vqlogits {

// Token index -> code index, with per-code member counts. Codes with no
// members are legal.
class VocabMapping {
 public:
  VocabMapping() = default;

  VocabMapping(std::vector<Index> codes, std::size_t num_codes)
      : codes_(std::move(codes)), counts_(num_codes, 0) {
    if (num_codes == 0) throw ConfigError("mapping needs at least one code");
    for (std::size_t i = 0; i < codes_.size(); ++i) {
      const Index c = codes_[i];
      if (c < 0 || static_cast<std::size_t>(c) >= num_codes) {
        throw IndexError("mapping entry " + std::to_string(i) + " = " + std::to_string(c) +
                         " outside [0, " + std::to_string(num_codes) + ")");
      }
      ++counts_[static_cast<std::size_t>(c)];
    }
  }

  static VocabMapping identity(std::size_t vocab) {
    std::vector<Index> codes(vocab);
    for (std::size_t i = 0; i < vocab; ++i) codes[i] = static_cast<Index>(i);
    return VocabMapping(std::move(codes), vocab);
  }

  std::size_t vocab_size() const { return codes_.size(); }
  std::size_t num_codes() const { return counts_.size(); }
  Index code(std::size_t token) const { return codes_.at(token); }
  const std::vector<Index>& codes() const { return codes_; }
  const std::vector<std::int64_t>& counts() const { return counts_; }

  bool operator==(const VocabMapping& other) const = default;

  // Text format: header `vqmap v1 V=<V> K=<K>`, then one decimal code per line.
  void save(std::ostream& out) const {
    out << "vqmap v1 V=" << vocab_size() << " K=" << num_codes() << '\n';
    for (Index c : codes_) out << c << '\n';
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write mapping " + path);
    save(out);
  }

  static VocabMapping load(std::istream& in) {
    std::string header;
    if (!std::getline(in, header)) throw InputError("mapping file is empty");
    std::size_t vocab = 0, codes = 0;
    {
      std::istringstream hs(header);
      std::string magic, version, v_field, k_field;
      hs >> magic >> version >> v_field >> k_field;
      if (magic != "vqmap" || version != "v1" || v_field.rfind("V=", 0) != 0 ||
          k_field.rfind("K=", 0) != 0) {
        throw InputError("bad mapping header: " + header);
      }
      try {
        vocab = std::stoull(v_field.substr(2));
        codes = std::stoull(k_field.substr(2));
      } catch (const std::exception&) {
        throw InputError("bad mapping header: " + header);
      }
    }
    std::vector<Index> entries;
    entries.reserve(vocab);
    std::string line;
    while (entries.size() < vocab && std::getline(in, line)) {
      try {
        entries.push_back(static_cast<Index>(std::stol(line)));
      } catch (const std::exception&) {
        throw InputError("bad mapping entry: " + line);
      }
    }
    if (entries.size() != vocab) {
      throw InputError("mapping declares V=" + std::to_string(vocab) + " but has " +
                       std::to_string(entries.size()) + " entries");
    }
    return VocabMapping(std::move(entries), codes);
  }

  static VocabMapping load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open mapping " + path);
    return load(in);
  }

 private:
  std::vector<Index> codes_;
  std::vector<std::int64_t> counts_;
};

}  // namespace vqlogits
