#pragma once

#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vqlogits/data/vocabulary.hpp"
#include "vqlogits/errors.hpp"
#include "vqlogits/model/transformer.hpp"

namespace vqlogits {

// Checkpoint layout: a text header, a line reading `data`, then raw
// little-endian float32 parameter blobs followed by the int32 mapping.
//
//   vqckpt 1
//   model n_layers=2 d_model=128 ... tie=untied
//   head kind=vq K=256 trainable=1 fused=1
//   vocab <n>            (n lines `token<TAB>freq`, n may be 0)
//   params <n>           (n lines `name shape offset count`, offsets in bytes)
//   mapping <offset> <count> | mapping none
//   data
inline constexpr int kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  LanguageModel<T> model;
  std::optional<Vocabulary> vocab;
};

namespace detail {

inline std::string shortest(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline void put_u32(std::ostream& out, std::uint32_t u) {
  const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                     static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
  out.write(b, 4);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

// `key=value` fields after the leading tag of a header line.
inline std::map<std::string, std::string> fields(const std::string& line, const std::string& tag) {
  std::istringstream in(line);
  std::string word;
  in >> word;
  if (word != tag) throw InputError("checkpoint: expected '" + tag + "' line, got: " + line);
  std::map<std::string, std::string> out;
  while (in >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw InputError("checkpoint: malformed field '" + word + "'");
    out[word.substr(0, eq)] = word.substr(eq + 1);
  }
  return out;
}

inline const std::string& field(const std::map<std::string, std::string>& f,
                                const std::string& key) {
  auto it = f.find(key);
  if (it == f.end()) throw InputError("checkpoint: missing field '" + key + "'");
  return it->second;
}

inline std::size_t to_size(const std::string& s) {
  std::size_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw InputError("checkpoint: bad integer '" + s + "'");
  }
  return v;
}

inline std::vector<std::size_t> to_sizes(const std::string& s, char sep) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = std::min(s.find(sep, start), s.size());
    out.push_back(to_size(s.substr(start, end - start)));
    start = end + 1;
  }
  return out;
}

inline std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline std::string next_line(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("checkpoint: truncated header");
  return line;
}

}  // namespace detail

template <typename T>
std::string head_descriptor(const OutputHead<T>& head) {
  std::string s = "head kind=" + head_kind_name(head_kind(head));
  std::visit(
      [&](const auto& hd) {
        using H = std::decay_t<decltype(hd)>;
        if constexpr (std::is_same_v<H, VQHead<T>>) {
          s += " K=" + std::to_string(hd.codebook.size()) +
               " trainable=" + (hd.codebook.trainable ? "1" : "0") +
               " fused=" + (hd.fused ? "1" : "0");
        } else if constexpr (std::is_same_v<H, LowRankHead<T>>) {
          s += " rank=" + std::to_string(hd.rank());
        } else if constexpr (std::is_same_v<H, AdaptiveHead<T>>) {
          s += " cutoffs=" + detail::join(hd.cutoffs) + " factors=" + detail::join(hd.tail_factors);
        }
      },
      head);
  return s;
}

template <typename T>
void save_checkpoint(std::ostream& out, const LanguageModel<T>& model,
                     const Vocabulary* vocab = nullptr) {
  const ModelConfig& c = model.config();
  const auto params = model.parameters();
  std::ostringstream hdr;
  hdr << "vqckpt " << kCheckpointVersion << '\n';
  hdr << "model n_layers=" << c.n_layers << " d_model=" << c.d_model << " d_ffn=" << c.d_ffn
      << " n_heads=" << c.n_heads << " vocab=" << c.vocab << " max_seq=" << c.max_seq
      << " dropout=" << detail::shortest(c.dropout) << " tie=" << tie_mode_name(c.tie) << '\n';
  hdr << head_descriptor(model.head) << '\n';
  hdr << "vocab " << (vocab ? vocab->size() : 0) << '\n';
  if (vocab) vocab->save(hdr);
  hdr << "params " << params.size() << '\n';
  std::size_t offset = 0;
  for (const auto& p : params) {
    hdr << p.name << ' ' << detail::shape_field(p.tensor.shape()) << ' ' << offset << ' '
        << p.tensor.size() << '\n';
    offset += 4 * p.tensor.size();
  }
  const auto* vq = std::get_if<VQHead<T>>(&model.head);
  if (vq) {
    hdr << "mapping " << offset << ' ' << vq->mapping.vocab_size() << '\n';
  } else {
    hdr << "mapping none\n";
  }
  hdr << "data\n";
  out << hdr.str();
  for (const auto& p : params) {
    for (T v : p.tensor.data()) {
      const float f = static_cast<float>(v);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      detail::put_u32(out, u);
    }
  }
  if (vq) {
    for (Index code : vq->mapping.codes()) detail::put_u32(out, static_cast<std::uint32_t>(code));
  }
  if (!out) throw InputError("checkpoint: write failed");
}

template <typename T>
void save_checkpoint_file(const std::string& path, const LanguageModel<T>& model,
                          const Vocabulary* vocab = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path);
  save_checkpoint(out, model, vocab);
}

template <typename T>
Checkpoint<T> load_checkpoint(std::istream& in) {
  using detail::field;
  using detail::to_size;
  {
    std::istringstream magic(detail::next_line(in));
    std::string tag;
    int version = 0;
    magic >> tag >> version;
    if (tag != "vqckpt") throw InputError("not a checkpoint file");
    if (version != kCheckpointVersion) {
      throw InputError("unsupported checkpoint version " + std::to_string(version));
    }
  }
  ModelConfig cfg;
  {
    const auto f = detail::fields(detail::next_line(in), "model");
    cfg.n_layers = to_size(field(f, "n_layers"));
    cfg.d_model = to_size(field(f, "d_model"));
    cfg.d_ffn = to_size(field(f, "d_ffn"));
    cfg.n_heads = to_size(field(f, "n_heads"));
    cfg.vocab = to_size(field(f, "vocab"));
    cfg.max_seq = to_size(field(f, "max_seq"));
    const std::string& d = field(f, "dropout");
    auto r = std::from_chars(d.data(), d.data() + d.size(), cfg.dropout);
    if (r.ec != std::errc()) throw InputError("checkpoint: bad dropout '" + d + "'");
    cfg.tie = parse_tie_mode(field(f, "tie"));
  }
  const auto head_fields = detail::fields(detail::next_line(in), "head");
  const HeadKind kind = parse_head_kind(field(head_fields, "kind"));

  auto counted = [&](const std::string& tag) {
    std::istringstream ls(detail::next_line(in));
    std::string word, n;
    ls >> word >> n;
    if (word != tag) throw InputError("checkpoint: expected '" + tag + "' line");
    return n;
  };

  Checkpoint<T> ck;
  const std::size_t vocab_lines = to_size(counted("vocab"));
  if (vocab_lines > 0) {
    std::string text;
    for (std::size_t i = 0; i < vocab_lines; ++i) text += detail::next_line(in) + '\n';
    std::istringstream vs(text);
    ck.vocab = Vocabulary::load(vs);
    if (ck.vocab->size() != cfg.vocab) throw InputError("checkpoint: vocabulary size mismatch");
  }

  struct Entry {
    Shape shape;
    std::size_t offset, count;
  };
  std::map<std::string, Entry> manifest;
  const std::size_t n_params = to_size(counted("params"));
  for (std::size_t i = 0; i < n_params; ++i) {
    std::istringstream ls(detail::next_line(in));
    std::string name, shape, offset, count;
    if (!(ls >> name >> shape >> offset >> count)) throw InputError("checkpoint: bad manifest line");
    manifest[name] = {detail::to_sizes(shape, 'x'), to_size(offset), to_size(count)};
  }
  std::optional<std::pair<std::size_t, std::size_t>> map_entry;
  {
    std::istringstream ls(detail::next_line(in));
    std::string word, a, b;
    ls >> word >> a;
    if (word != "mapping") throw InputError("checkpoint: expected 'mapping' line");
    if (a != "none") {
      ls >> b;
      map_entry = std::make_pair(to_size(a), to_size(b));
    }
  }
  if (detail::next_line(in) != "data") throw InputError("checkpoint: missing data marker");
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());

  Rng rng(0);
  OutputHead<T> head;
  switch (kind) {
    case HeadKind::kFull:
      head = make_full_head<T>(cfg.vocab, cfg.d_model, rng);
      break;
    case HeadKind::kVQ: {
      if (!map_entry) throw InputError("checkpoint: VQ head without a mapping");
      const auto [off, count] = *map_entry;
      if (count != cfg.vocab || off + 4 * count > blob.size()) {
        throw InputError("checkpoint: mapping extent is invalid");
      }
      std::vector<Index> codes(count);
      for (std::size_t i = 0; i < count; ++i) codes[i] = static_cast<Index>(detail::get_u32(bytes + off + 4 * i));
      const std::size_t k = to_size(field(head_fields, "K"));
      head = make_vq_head<T>(VocabMapping(std::move(codes), k), cfg.d_model, rng,
                             field(head_fields, "trainable") == "1");
      std::get<VQHead<T>>(head).fused = field(head_fields, "fused") == "1";
      break;
    }
    case HeadKind::kLowRank:
      head = make_lowrank_head<T>(cfg.vocab, cfg.d_model, to_size(field(head_fields, "rank")), rng);
      break;
    case HeadKind::kAdaptive:
      head = make_adaptive_head<T>(cfg.vocab, cfg.d_model,
                                   detail::to_sizes(field(head_fields, "cutoffs"), ','),
                                   detail::to_sizes(field(head_fields, "factors"), ','), rng);
      break;
  }
  if (kind != HeadKind::kVQ && map_entry) throw InputError("checkpoint: mapping on a non-VQ head");
  ck.model = LanguageModel<T>::assemble(TransformerBody<T>::init(cfg, rng), std::move(head));

  const auto params = ck.model.parameters();
  if (params.size() != manifest.size()) {
    throw InputError("checkpoint: manifest lists " + std::to_string(manifest.size()) +
                     " parameters, model has " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    auto it = manifest.find(p.name);
    if (it == manifest.end()) throw InputError("checkpoint: missing parameter " + p.name);
    const Entry& e = it->second;
    if (e.shape != p.tensor.shape() || e.count != p.tensor.size() ||
        e.offset + 4 * e.count > blob.size()) {
      throw InputError("checkpoint: parameter " + p.name + " does not match the model");
    }
    Tensor<T> t = p.tensor;
    for (std::size_t i = 0; i < e.count; ++i) {
      const std::uint32_t u = detail::get_u32(bytes + e.offset + 4 * i);
      float f;
      std::memcpy(&f, &u, 4);
      t[i] = static_cast<T>(f);
    }
  }
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path);
  return load_checkpoint<T>(in);
}

}  // namespace vqlogits
