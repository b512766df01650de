#pragma once

#include <span>
#include <string>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/heads/output_head.hpp"
#include "vqlogits/numerics/ops.hpp"
#include "vqlogits/numerics/parameter.hpp"
#include "vqlogits/rng.hpp"

namespace vqlogits {

enum class TieMode { kUntied, kTieFull, kTieCodebook };

inline std::string tie_mode_name(TieMode mode) {
  switch (mode) {
    case TieMode::kUntied: return "untied";
    case TieMode::kTieFull: return "tie_full";
    case TieMode::kTieCodebook: return "tie_codebook";
  }
  return "?";
}

inline TieMode parse_tie_mode(const std::string& name) {
  if (name == "untied") return TieMode::kUntied;
  if (name == "tie_full") return TieMode::kTieFull;
  if (name == "tie_codebook") return TieMode::kTieCodebook;
  throw ConfigError("unknown tie mode '" + name + "'");
}

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 128;
  std::size_t d_ffn = 512;
  std::size_t n_heads = 4;
  std::size_t vocab = 0;
  std::size_t max_seq = 128;
  double dropout = 0.1;
  TieMode tie = TieMode::kUntied;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("d_model must be a positive multiple of n_heads");
    }
    if (d_ffn < d_model) throw ConfigError("d_ffn must be >= d_model");
    if (vocab == 0) throw ConfigError("vocabulary size must be positive");
    if (max_seq == 0) throw ConfigError("max_seq must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct DecoderBlock {
  Tensor<T> ln1_gain, ln1_shift;
  Tensor<T> w_qkv, b_qkv;
  Tensor<T> w_out, b_out;
  Tensor<T> ln2_gain, ln2_shift;
  Tensor<T> w_fc, b_fc;
  Tensor<T> w_proj, b_proj;
};

// Pre-norm GPT-style decoder producing final hidden states h [B*S x d_model].
template <typename T>
class TransformerBody {
 public:
  TransformerBody() = default;

  static TransformerBody init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    TransformerBody body;
    body.cfg_ = cfg;
    const std::size_t d = cfg.d_model, f = cfg.d_ffn;
    auto normal = [&](Shape s) { return detail::normal_init<T>(std::move(s), rng); };
    auto zeros = [](std::size_t n) { return Tensor<T>({n}, true); };
    auto ones = [](std::size_t n) {
      Tensor<T> t({n}, true);
      t.fill(T(1));
      return t;
    };
    if (cfg.tie == TieMode::kUntied) body.token_table_ = normal({cfg.vocab, d});
    body.pos_table_ = normal({cfg.max_seq, d});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      DecoderBlock<T> b;
      b.ln1_gain = ones(d);
      b.ln1_shift = zeros(d);
      b.w_qkv = normal({d, 3 * d});
      b.b_qkv = zeros(3 * d);
      b.w_out = normal({d, d});
      b.b_out = zeros(d);
      b.ln2_gain = ones(d);
      b.ln2_shift = zeros(d);
      b.w_fc = normal({d, f});
      b.b_fc = zeros(f);
      b.w_proj = normal({f, d});
      b.b_proj = zeros(d);
      body.blocks_.push_back(std::move(b));
    }
    body.final_gain_ = ones(d);
    body.final_shift_ = zeros(d);
    return body;
  }

  const ModelConfig& config() const { return cfg_; }

  // ids is [batch x seq] row-major. dropout_rng == nullptr means eval mode.
  Tensor<T> forward(Tape<T>& tape, std::span<const Index> ids, std::size_t batch,
                    std::size_t seq, Rng* dropout_rng = nullptr) const {
    if (ids.size() != batch * seq) throw DimensionError("forward: ids do not match batch x seq");
    if (seq > cfg_.max_seq) {
      throw DimensionError("forward: sequence length " + std::to_string(seq) +
                           " exceeds max_seq " + std::to_string(cfg_.max_seq));
    }
    if (!token_table_.defined()) throw ConfigError("forward: input embeddings are not wired");
    for (Index id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab) {
        throw IndexError("forward: token id " + std::to_string(id) + " outside [0, " +
                         std::to_string(cfg_.vocab) + ")");
      }
    }
    const double p = dropout_rng != nullptr ? cfg_.dropout : 0.0;

    std::vector<Index> rows(ids.begin(), ids.end());
    if (!input_codes_.empty()) {
      for (Index& r : rows) r = input_codes_[static_cast<std::size_t>(r)];
    }
    std::vector<Index> positions(ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<Index>(i % seq);

    Tensor<T> x = add(tape, embedding_lookup(tape, token_table_, std::span<const Index>(rows)),
                      embedding_lookup(tape, pos_table_, std::span<const Index>(positions)));
    x = dropout(tape, x, p, dropout_rng);
    for (const auto& b : blocks_) {
      Tensor<T> a = layer_norm(tape, x, b.ln1_gain, b.ln1_shift);
      Tensor<T> qkv = add_row(tape, matmul(tape, a, b.w_qkv), b.b_qkv);
      Tensor<T> att = causal_self_attention(tape, qkv, batch, seq, cfg_.n_heads, p, dropout_rng);
      x = add(tape, x, add_row(tape, matmul(tape, att, b.w_out), b.b_out));
      Tensor<T> f = layer_norm(tape, x, b.ln2_gain, b.ln2_shift);
      f = gelu(tape, add_row(tape, matmul(tape, f, b.w_fc), b.b_fc));
      f = add_row(tape, matmul(tape, f, b.w_proj), b.b_proj);
      x = add(tape, x, dropout(tape, f, p, dropout_rng));
    }
    return layer_norm(tape, x, final_gain_, final_shift_);
  }

  // Parameters owned by the body. A tied input table belongs to the head and
  // is not listed here.
  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    if (owns_token_table()) out.push_back({"body.token_embeddings", token_table_, false});
    out.push_back({"body.position_embeddings", pos_table_, false});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      const std::string pre = "body.layer" + std::to_string(l) + ".";
      out.push_back({pre + "ln1.gain", b.ln1_gain, false});
      out.push_back({pre + "ln1.shift", b.ln1_shift, false});
      out.push_back({pre + "attn.w_qkv", b.w_qkv, true});
      out.push_back({pre + "attn.b_qkv", b.b_qkv, false});
      out.push_back({pre + "attn.w_out", b.w_out, true});
      out.push_back({pre + "attn.b_out", b.b_out, false});
      out.push_back({pre + "ln2.gain", b.ln2_gain, false});
      out.push_back({pre + "ln2.shift", b.ln2_shift, false});
      out.push_back({pre + "ffn.w_fc", b.w_fc, true});
      out.push_back({pre + "ffn.b_fc", b.b_fc, false});
      out.push_back({pre + "ffn.w_proj", b.w_proj, true});
      out.push_back({pre + "ffn.b_proj", b.b_proj, false});
    }
    out.push_back({"body.final_norm.gain", final_gain_, false});
    out.push_back({"body.final_norm.shift", final_shift_, false});
    return out;
  }

  std::vector<NamedParam<T>> final_norm_parameters() const {
    return {{"body.final_norm.gain", final_gain_, false},
            {"body.final_norm.shift", final_shift_, false}};
  }

  bool owns_token_table() const { return cfg_.tie == TieMode::kUntied; }
  const Tensor<T>& token_table() const { return token_table_; }
  const std::vector<Index>& input_codes() const { return input_codes_; }

  // Wires the input embedding table according to cfg.tie:
  //  untied       -> keeps its own V x d table
  //  tie_full     -> shares the Full head's output embeddings
  //  tie_codebook -> row i reads codebook row M(i); lookups accumulate into C
  void resolve_tying(const OutputHead<T>& head) {
    switch (cfg_.tie) {
      case TieMode::kUntied:
        input_codes_.clear();
        if (!token_table_.defined()) throw ConfigError("untied body has no input embeddings");
        return;
      case TieMode::kTieFull: {
        const auto* full = std::get_if<FullHead<T>>(&head);
        if (full == nullptr) throw ConfigError("tie_full requires a full softmax head");
        if (full->embeddings.rows() != cfg_.vocab || full->embeddings.cols() != cfg_.d_model) {
          throw ConfigError("tie_full: head shape does not match the body");
        }
        token_table_ = full->embeddings;
        input_codes_.clear();
        return;
      }
      case TieMode::kTieCodebook: {
        const auto* vq = std::get_if<VQHead<T>>(&head);
        if (vq == nullptr) throw ConfigError("tie_codebook requires a VQ head");
        if (vq->mapping.vocab_size() != cfg_.vocab || vq->codebook.dim() != cfg_.d_model) {
          throw ConfigError("tie_codebook: head shape does not match the body");
        }
        token_table_ = vq->codebook.vectors;
        input_codes_ = vq->mapping.codes();
        return;
      }
    }
  }

  // Mutable access used by checkpoint loading.
  Tensor<T>& token_table_mut() { return token_table_; }

 private:
  ModelConfig cfg_;
  Tensor<T> token_table_;
  std::vector<Index> input_codes_;
  Tensor<T> pos_table_;
  std::vector<DecoderBlock<T>> blocks_;
  Tensor<T> final_gain_, final_shift_;
};

// Body plus output head, with tying resolved.
template <typename T>
struct LanguageModel {
  TransformerBody<T> body;
  OutputHead<T> head;

  static LanguageModel assemble(TransformerBody<T> body, OutputHead<T> head) {
    if (head_vocab_size(head) != body.config().vocab) {
      throw ConfigError("head vocabulary (" + std::to_string(head_vocab_size(head)) +
                        ") does not match the body (" + std::to_string(body.config().vocab) +
                        ")");
    }
    body.resolve_tying(head);
    return {std::move(body), std::move(head)};
  }

  const ModelConfig& config() const { return body.config(); }

  // Every distinct parameter tensor: body first, then head. Tied tables are
  // listed once (under the head) and excluded from weight decay.
  std::vector<NamedParam<T>> parameters() const {
    auto out = body.parameters();
    for (auto p : head_parameters(head)) {
      if (config().tie != TieMode::kUntied && p.tensor.same_storage(body.token_table())) {
        p.decay = false;
      }
      out.push_back(std::move(p));
    }
    return out;
  }

  std::size_t param_count() const { return count_elements(parameters()); }

  Tensor<T> hidden(Tape<T>& tape, std::span<const Index> ids, std::size_t batch, std::size_t seq,
                   Rng* dropout_rng = nullptr) const {
    return body.forward(tape, ids, batch, seq, dropout_rng);
  }

  Tensor<T> loss(Tape<T>& tape, std::span<const Index> ids, std::span<const Index> targets,
                 std::size_t batch, std::size_t seq, Rng* dropout_rng = nullptr) const {
    return head_loss(tape, head, hidden(tape, ids, batch, seq, dropout_rng), targets);
  }
};

}  // namespace vqlogits
