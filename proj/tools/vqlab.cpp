// vqlab: train, evaluate, quantize, benchmark and inspect VQ-Logits models.
//
// Exit codes: 0 ok, 1 usage, 2 data/config, 3 numeric failure.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "vqlogits/bench/report.hpp"
#include "vqlogits/inspect/clusters.hpp"
#include "vqlogits/quantize/mapping.hpp"
#include "vqlogits/train/checkpoint.hpp"
#include "vqlogits/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace vqlogits;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kDataDirEnv = "VQLAB_DATA_DIR";

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
};

struct DataOpts {
  std::string corpus;
  std::size_t vocab_size = 10000;
  std::uint64_t min_freq = 1;
  double valid_fraction = 0.1;
};

struct ModelOpts {
  std::size_t layers = 2;
  std::size_t d_model = 128;
  std::size_t d_ffn = 512;
  std::size_t heads = 4;
  std::size_t max_seq = 128;
  double dropout = 0.1;
  std::string tie = "untied";
};

struct HeadOpts {
  std::string head = "full";
  std::size_t k = 256;
  std::size_t d_rank = 64;
  std::vector<std::size_t> cutoffs;
  std::vector<std::size_t> factors{2, 4};
  std::string init;
  std::string mapping;
  bool codebook_trainable = true;
  bool naive_loss = false;
  std::size_t kmeans_iters = 20;
};

struct TrainOpts {
  std::size_t steps = 5000;
  std::size_t warmup = 200;
  double lr = -1.0;  // resolved: 3e-4 from scratch, 5e-5 when fine-tuning
  double lr_min = 0.0;
  double weight_decay = 0.01;
  double clip = 1.0;
  std::size_t batch = 16;
  std::size_t seq = 64;
  std::size_t eval_interval = 500;
  std::size_t log_interval = 50;
  std::string scope = "full_model";
  std::string from_checkpoint;
  std::string out;
  bool deterministic = false;
};

struct EvalOpts {
  std::string checkpoint;
  std::string vocab;
  std::string split = "valid";
  std::size_t batch = 16;
  std::size_t seq = 64;
};

struct QuantizeOpts {
  std::string checkpoint;
  std::size_t k = 256;
  std::string mapping = "kmeans_output";
  std::string mapping_out;
  std::string out;
  bool codebook_trainable = true;
  std::size_t kmeans_iters = 20;
};

struct BenchOpts {
  std::string grid;
  std::vector<std::string> heads{"full", "vq"};
  std::vector<std::size_t> ks{256, 1024, 4096};
  std::vector<std::size_t> vocabs{32768};
  std::size_t d_model = 256;
  std::size_t batch = 8;
  std::size_t seq = 128;
  std::size_t reps = 20;
  std::string precision = "fp32";
  bool no_timing = false;
  std::vector<std::string> checkpoints;
  std::string split = "valid";
  std::string out;
};

struct InspectOpts {
  std::string checkpoint;
  std::string mapping;
  std::string vocab;
  long code = -1;
  bool stats = false;
  bool all = false;
  bool csv = false;
  std::size_t top = 10;
};

// ---------------------------------------------------------------------------
// Data

std::string resolve_corpus(const std::string& given) {
  const char* dir = std::getenv(kDataDirEnv);
  if (given.empty()) {
    if (dir == nullptr || *dir == '\0') {
      throw UsageError("no corpus: pass --corpus or set " + std::string(kDataDirEnv));
    }
    return (fs::path(dir) / "corpus.txt").string();
  }
  if (!fs::exists(given) && dir != nullptr && fs::path(given).is_relative() &&
      fs::exists(fs::path(dir) / given)) {
    return (fs::path(dir) / given).string();
  }
  return given;
}

struct Corpus {
  Vocabulary vocab;
  std::vector<Index> train, valid;
};

Corpus load_corpus(const std::string& path, const DataOpts& d, const Vocabulary* fixed) {
  if (!fs::exists(path)) throw InputError("corpus not found: " + path);
  Corpus c;
  c.vocab = fixed != nullptr ? *fixed : Vocabulary::build_from_file(path, d.vocab_size, d.min_freq);
  std::tie(c.train, c.valid) = split_tokens(c.vocab.encode_file(path), d.valid_fraction);
  return c;
}

const std::vector<Index>& pick_split(const Corpus& c, const std::string& split,
                                     std::vector<Index>& all) {
  if (split == "train") return c.train;
  if (split == "valid") return c.valid;
  if (split == "all") {
    all = c.train;
    all.insert(all.end(), c.valid.begin(), c.valid.end());
    return all;
  }
  throw UsageError("--split must be train, valid or all");
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) throw UsageError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory " + dir + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

// Globals plus the active subcommand's settings, unset optional strings
// dropped, so the file can be fed back through --config.
std::string resolved_config(const CLI::App& app, const std::string& sub) {
  std::istringstream in(app.config_to_str(true, false));
  std::string out;
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || line.compare(eq, std::string::npos, "=\"\"") == 0) continue;
    const auto dot = line.find('.');
    if (dot < eq && line.compare(0, dot, sub) != 0) continue;
    out += line + '\n';
  }
  return out;
}

Checkpoint<float> load_with_vocab(const std::string& path) {
  auto ck = load_checkpoint_file<float>(path);
  if (!ck.vocab) throw ConfigError("checkpoint " + path + " carries no vocabulary");
  return ck;
}

// ---------------------------------------------------------------------------
// Model construction

OutputHead<float> scratch_head(const HeadOpts& h, const ModelConfig& cfg, const Vocabulary& vocab,
                               const TransformerBody<float>& body, Rng& rng) {
  const std::size_t v = cfg.vocab, d = cfg.d_model;
  switch (parse_head_kind(h.head)) {
    case HeadKind::kFull: return make_full_head<float>(v, d, rng);
    case HeadKind::kLowRank: return make_lowrank_head<float>(v, d, h.d_rank, rng);
    case HeadKind::kAdaptive: {
      std::vector<std::size_t> cutoffs = h.cutoffs;
      if (cutoffs.empty()) cutoffs = adaptive_spec(v, d, std::max<std::size_t>(1, v / 5)).cutoffs;
      if (cutoffs.back() != v) cutoffs.push_back(v);
      return make_adaptive_head<float>(v, d, cutoffs, h.factors, rng);
    }
    case HeadKind::kVQ: {
      if (h.init == "option_a") {
        throw UsageError("--init option_a needs --from-checkpoint with a full head");
      }
      const auto strategy = parse_mapping_strategy(h.mapping.empty() ? "freq_binning" : h.mapping);
      if (strategy == MappingStrategy::kKMeansOutput) {
        throw UsageError("--mapping kmeans_output needs trained output embeddings (--from-checkpoint)");
      }
      MappingInputs in{v, h.k, rng.next_u64(), h.kmeans_iters, &vocab.freqs()};
      const Tensor<float>* input = body.owns_token_table() ? &body.token_table() : nullptr;
      VocabMapping map = init_mapping<float>(strategy, in, nullptr, input);
      return make_vq_head<float>(std::move(map), d, rng, h.codebook_trainable);
    }
  }
  throw UsageError("unknown head");
}

// Full -> VQ conversion on a trained body. Option A: codebook rows are the
// means of the Full output rows mapped to them (the k-means centroids for
// kmeans_output). Option B: random codebook, any mapping.
VQHead<float> converted_head(const HeadOpts& h, const LanguageModel<float>& src,
                             const Vocabulary& vocab, Rng& rng) {
  const auto& full = std::get<FullHead<float>>(src.head);
  const std::string init = h.init.empty() ? "option_a" : h.init;
  if (init != "option_a" && init != "option_b") throw UsageError("--init must be option_a or option_b");
  const std::string mapping = h.mapping.empty() ? (init == "option_a" ? "kmeans_output" : "freq_binning") : h.mapping;
  const auto strategy = parse_mapping_strategy(mapping);
  const KMeansOptions km{h.kmeans_iters, 1e-7, rng.next_u64()};
  if (init == "option_a" && strategy == MappingStrategy::kKMeansOutput) {
    return init_option_a(src.head, h.k, h.codebook_trainable, km);
  }
  MappingInputs in{src.config().vocab, h.k, km.seed, h.kmeans_iters, &vocab.freqs()};
  VocabMapping map = init_mapping<float>(strategy, in, &full.embeddings, &src.body.token_table());
  if (init == "option_a") {
    return {Codebook<float>{centroids_for_mapping(full.embeddings, map), h.codebook_trainable},
            std::move(map), true};
  }
  return make_vq_head<float>(std::move(map), src.config().d_model, rng, h.codebook_trainable);
}

LanguageModel<float> build_model(const ModelOpts& m, const HeadOpts& h, const Vocabulary& vocab,
                                 std::optional<Checkpoint<float>>& ck, Rng& rng) {
  const HeadKind want = parse_head_kind(h.head);
  if (!h.init.empty() && want != HeadKind::kVQ) throw UsageError("--init applies to --head vq only");
  LanguageModel<float> model;
  if (!ck) {
    ModelConfig cfg;
    cfg.n_layers = m.layers;
    cfg.d_model = m.d_model;
    cfg.d_ffn = m.d_ffn;
    cfg.n_heads = m.heads;
    cfg.vocab = vocab.size();
    cfg.max_seq = m.max_seq;
    cfg.dropout = m.dropout;
    cfg.tie = parse_tie_mode(m.tie);
    auto body = TransformerBody<float>::init(cfg, rng);
    auto head = scratch_head(h, cfg, vocab, body, rng);
    model = LanguageModel<float>::assemble(std::move(body), std::move(head));
  } else {
    const HeadKind have = head_kind(ck->model.head);
    if (have == want && h.init.empty()) {
      model = std::move(ck->model);
    } else if (have == HeadKind::kFull && want == HeadKind::kVQ) {
      if (ck->model.config().tie != TieMode::kUntied) {
        throw UsageError("converting to a VQ head needs an untied checkpoint");
      }
      VQHead<float> vq = converted_head(h, ck->model, vocab, rng);
      model = LanguageModel<float>::assemble(std::move(ck->model.body), std::move(vq));
    } else {
      throw UsageError("cannot turn a " + head_kind_name(have) + " checkpoint into a " +
                       head_kind_name(want) + " head" +
                       (h.init.empty() ? "" : " with --init " + h.init));
    }
  }
  if (auto* vq = std::get_if<VQHead<float>>(&model.head)) vq->fused = !h.naive_loss;
  return model;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_train(CLI::App& app, const Globals& g, const DataOpts& d, const ModelOpts& m,
              HeadOpts h, const TrainOpts& t) {
  ensure_dir(t.out);
  const std::string corpus_path = resolve_corpus(d.corpus);
  std::optional<Checkpoint<float>> ck;
  if (!t.from_checkpoint.empty()) {
    ck = load_with_vocab(t.from_checkpoint);
    // Without --head, keep training the checkpoint's own head.
    auto* head_opt = app.get_subcommand("train")->get_option("--head");
    if (head_opt->count() == 0) {
      h.head = head_kind_name(head_kind(ck->model.head));
      head_opt->default_str(h.head);
    }
  }
  if (h.init == "option_a" && !ck) {
    throw UsageError("--init option_a needs --from-checkpoint with a full head");
  }
  const Corpus corpus = load_corpus(corpus_path, d, ck ? &*ck->vocab : nullptr);
  write_text(fs::path(t.out) / "config.resolved", resolved_config(app, "train"));

  Rng rng(g.seed);
  LanguageModel<float> model = build_model(m, h, corpus.vocab, ck, rng);

  TrainConfig cfg;
  cfg.schedule = {t.lr, t.lr_min, t.warmup, t.steps};
  cfg.weight_decay = t.weight_decay;
  cfg.clip_norm = t.clip;
  cfg.batch = t.batch;
  cfg.seq = t.seq;
  cfg.seed = g.seed;
  cfg.eval_interval = t.eval_interval;
  cfg.log_interval = t.log_interval;
  cfg.scope = parse_finetune_scope(t.scope);
  cfg.record_throughput = !t.deterministic;

  const fs::path ckpt = fs::path(t.out) / "model.ckpt";
  TrainHooks<float> hooks{&corpus.valid,
                          [&](std::size_t) { save_checkpoint_file(ckpt.string(), model, &corpus.vocab); }};
  const TrainResult res = train_loop(model, cfg, corpus.train, hooks);

  std::ostringstream metrics;
  write_metrics_csv(metrics, res.metrics);
  write_text(fs::path(t.out) / "metrics.csv", metrics.str());
  save_checkpoint_file(ckpt.string(), model, &corpus.vocab);
  corpus.vocab.save_file((fs::path(t.out) / "vocab.txt").string());
  if (const auto* vq = std::get_if<VQHead<float>>(&model.head)) {
    vq->mapping.save_file((fs::path(t.out) / "mapping.vqmap").string());
  }
  if (res.diverged) {
    std::cerr << "vqlab: training diverged at " << res.error
              << "; kept the last good checkpoint\n";
    return 3;
  }
  const double ppl = evaluate_ppl(model, corpus.valid, t.batch, t.seq);
  std::cout << std::setprecision(10) << "head\t" << head_kind_name(head_kind(model.head)) << "\nsteps\t" << res.steps_done
            << "\nfinal_loss\t" << res.final_loss << "\nvalid_ppl\t" << ppl << '\n';
  return 0;
}

int cmd_eval(const Globals&, const DataOpts& d, const EvalOpts& e) {
  if (e.checkpoint.empty()) throw UsageError("--checkpoint is required");
  const auto ck = load_with_vocab(e.checkpoint);
  if (!e.vocab.empty() && Vocabulary::load_file(e.vocab) != *ck.vocab) {
    throw ConfigError("vocabulary " + e.vocab + " does not match the checkpoint's");
  }
  const Corpus corpus = load_corpus(resolve_corpus(d.corpus), d, &*ck.vocab);
  std::vector<Index> all;
  const auto& ids = pick_split(corpus, e.split, all);
  const double ppl = evaluate_ppl(ck.model, ids, e.batch, e.seq);
  std::cout << "ppl\t" << std::setprecision(10) << ppl << "\ntokens\t" << ids.size() - 1 << '\n';
  return 0;
}

int cmd_quantize(const CLI::App& app, const Globals& g, const QuantizeOpts& q) {
  if (q.checkpoint.empty()) throw UsageError("--checkpoint is required");
  ensure_dir(q.out);
  auto ck = load_with_vocab(q.checkpoint);
  if (head_kind(ck.model.head) != HeadKind::kFull) {
    throw ConfigError("quantize needs a full-softmax checkpoint");
  }
  if (ck.model.config().tie != TieMode::kUntied) throw ConfigError("quantize needs an untied checkpoint");
  write_text(fs::path(q.out) / "config.resolved", resolved_config(app, "quantize"));
  HeadOpts h;
  h.head = "vq";
  h.k = q.k;
  h.init = "option_a";
  h.mapping = q.mapping;
  h.codebook_trainable = q.codebook_trainable;
  h.kmeans_iters = q.kmeans_iters;
  Rng rng(g.seed);
  VQHead<float> vq = converted_head(h, ck.model, *ck.vocab, rng);
  const VocabMapping map = vq.mapping;
  auto model = LanguageModel<float>::assemble(std::move(ck.model.body), std::move(vq));
  save_checkpoint_file((fs::path(q.out) / "model.ckpt").string(), model, &*ck.vocab);
  const std::string map_path =
      q.mapping_out.empty() ? (fs::path(q.out) / "mapping.vqmap").string() : q.mapping_out;
  map.save_file(map_path);
  ck.vocab->save_file((fs::path(q.out) / "vocab.txt").string());
  std::size_t empty = 0;
  for (auto c : map.counts()) empty += c == 0 ? 1 : 0;
  std::cout << "K\t" << map.num_codes() << "\nV\t" << map.vocab_size() << "\nempty_codes\t" << empty
            << "\nhead_params\t" << head_param_count(model.head) << '\n';
  return 0;
}

template <typename T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  std::istringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    if (item.empty()) continue;
    if constexpr (std::is_same_v<T, std::string>) {
      out.push_back(item);
    } else {
      try {
        out.push_back(static_cast<T>(std::stoull(item)));
      } catch (const std::exception&) {
        throw UsageError("bad number '" + item + "' in list");
      }
    }
  }
  return out;
}

// --grid "heads=full,vq;K=256,1024;V=32768" overrides the matching flags.
void apply_grid(const std::string& grid, BenchOpts& b) {
  std::istringstream in(grid);
  for (std::string part; std::getline(in, part, ';');) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw UsageError("bad --grid entry '" + part + "'");
    const std::string key = part.substr(0, eq), value = part.substr(eq + 1);
    if (key == "heads") b.heads = parse_list<std::string>(value);
    else if (key == "K") b.ks = parse_list<std::size_t>(value);
    else if (key == "V") b.vocabs = parse_list<std::size_t>(value);
    else throw UsageError("unknown --grid key '" + key + "'");
  }
}

int cmd_bench(const CLI::App& app, const Globals& g, const DataOpts& d, BenchOpts b) {
  if (!b.grid.empty()) apply_grid(b.grid, b);
  SweepSpec sweep;
  sweep.heads.clear();
  for (const auto& name : b.heads) sweep.heads.push_back(parse_head_kind(name));
  sweep.ks = b.ks;
  sweep.vocabs = b.vocabs;
  sweep.d_model = b.d_model;
  sweep.batch = b.batch;
  sweep.seq = b.seq;
  sweep.repetitions = b.reps;
  sweep.seed = g.seed;
  sweep.precision = parse_precision(b.precision);
  sweep.timing = !b.no_timing;

  std::vector<PplEntry> ppl;
  for (const auto& path : b.checkpoints) {
    const auto ck = load_with_vocab(path);
    const Corpus corpus = load_corpus(resolve_corpus(d.corpus), d, &*ck.vocab);
    std::vector<Index> all;
    const HeadSpec s = spec_of(ck.model.head);
    ppl.push_back({s.kind, s.vocab, s.k_or_rank,
                   evaluate_ppl(ck.model, pick_split(corpus, b.split, all), 16, 64)});
  }
  const auto rows = sweep_report(sweep, ppl);
  std::ostringstream csv;
  write_report_csv(csv, rows);
  if (b.out.empty()) {
    std::cout << csv.str();
  } else if (fs::is_directory(b.out) || b.out.back() == '/') {
    ensure_dir(b.out);
    write_text(fs::path(b.out) / "report.csv", csv.str());
    write_text(fs::path(b.out) / "config.resolved", resolved_config(app, "bench"));
  } else {
    write_text(b.out, csv.str());
  }
  return 0;
}

int cmd_inspect(const InspectOpts& o) {
  std::optional<Vocabulary> vocab;
  std::optional<VocabMapping> map;
  if (!o.checkpoint.empty()) {
    auto ck = load_with_vocab(o.checkpoint);
    const auto* vq = std::get_if<VQHead<float>>(&ck.model.head);
    if (vq == nullptr) throw ConfigError("inspect needs a VQ checkpoint");
    vocab = *ck.vocab;
    map = vq->mapping;
  }
  if (!o.vocab.empty()) vocab = Vocabulary::load_file(o.vocab);
  if (!o.mapping.empty()) map = VocabMapping::load_file(o.mapping);
  if (!vocab || !map) throw UsageError("inspect needs --checkpoint, or --mapping with --vocab");
  if (o.code >= 0) {
    write_cluster_table(std::cout, {cluster_members(*map, *vocab, static_cast<std::size_t>(o.code))},
                        *vocab, o.top, o.csv);
  } else if (o.all) {
    write_cluster_table(std::cout, all_clusters(*map, *vocab), *vocab, o.top, o.csv);
  } else {
    const ClusterStats s = cluster_stats(*map, *vocab, o.top);
    write_cluster_stats(std::cout, s);
    std::vector<CodeClusterView> largest;
    for (Index j : s.largest) largest.push_back(cluster_members(*map, *vocab, static_cast<std::size_t>(j)));
    std::cout << "largest_clusters\n";
    write_cluster_table(std::cout, largest, *vocab, o.top, o.csv);
  }
  return 0;
}

void add_data_options(CLI::App* sub, DataOpts& d) {
  sub->add_option("--corpus", d.corpus, "Whitespace-tokenized text (default $" + std::string(kDataDirEnv) + "/corpus.txt)");
  sub->add_option("--vocab-size", d.vocab_size, "Maximum vocabulary size incl. <unk>, <eos>")->capture_default_str();
  sub->add_option("--min-freq", d.min_freq, "Rarer words map to <unk>")->capture_default_str();
  sub->add_option("--valid-fraction", d.valid_fraction, "Trailing share held out")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VQ-Logits laboratory"};
  app.config_formatter(std::make_shared<CLI::ConfigINI>());
  app.set_config("--config", "", "INI file of key = value settings; the command line wins");
  app.require_subcommand(1);

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random draw")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (results do not depend on it)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  DataOpts data;
  ModelOpts model;
  HeadOpts head;
  TrainOpts train;
  auto* tr = app.add_subcommand("train", "Train or fine-tune a model");
  add_data_options(tr, data);
  tr->add_option("--layers", model.layers)->capture_default_str();
  tr->add_option("--d-model", model.d_model)->capture_default_str();
  tr->add_option("--d-ffn", model.d_ffn)->capture_default_str();
  tr->add_option("--heads", model.heads, "Attention heads")->capture_default_str();
  tr->add_option("--max-seq", model.max_seq)->capture_default_str();
  tr->add_option("--dropout", model.dropout)->capture_default_str();
  tr->add_option("--tie", model.tie, "untied | tie_full | tie_codebook")->capture_default_str();
  tr->add_option("--head", head.head, "full | vq | lowrank | adaptive")->capture_default_str();
  tr->add_option("--K", head.k, "Codebook size")->capture_default_str();
  tr->add_option("--d-rank", head.d_rank, "Low-rank inner dimension")->capture_default_str();
  tr->add_option("--cutoffs", head.cutoffs, "Adaptive cluster bounds")->delimiter(',');
  tr->add_option("--factors", head.factors, "Adaptive tail projection factors")->delimiter(',')->capture_default_str();
  tr->add_option("--init", head.init, "option_a | option_b (VQ)");
  tr->add_option("--mapping", head.mapping,
                 "kmeans_output | kmeans_input | freq_binning | contiguous_blocks | random");
  tr->add_option("--codebook-trainable", head.codebook_trainable)->capture_default_str();
  tr->add_flag("--naive-loss", head.naive_loss, "Materialize V-wide logits for the VQ loss");
  tr->add_option("--kmeans-iters", head.kmeans_iters)->capture_default_str();
  tr->add_option("--steps", train.steps)->capture_default_str();
  tr->add_option("--warmup", train.warmup)->capture_default_str();
  tr->add_option("--lr", train.lr, "Peak learning rate (default 3e-4, 5e-5 with --from-checkpoint)");
  tr->add_option("--lr-min", train.lr_min)->capture_default_str();
  tr->add_option("--weight-decay", train.weight_decay)->capture_default_str();
  tr->add_option("--clip", train.clip)->capture_default_str();
  tr->add_option("--batch", train.batch)->capture_default_str();
  tr->add_option("--seq", train.seq)->capture_default_str();
  tr->add_option("--eval-interval", train.eval_interval)->capture_default_str();
  tr->add_option("--log-interval", train.log_interval)->capture_default_str();
  tr->add_option("--scope", train.scope, "full_model | head_and_final_norm | codebook_only | none")
      ->capture_default_str();
  tr->add_option("--from-checkpoint", train.from_checkpoint);
  tr->add_option("--out", train.out, "Output directory")->required();
  tr->add_flag("--deterministic", train.deterministic, "Leave tokens_per_sec empty in metrics.csv");

  EvalOpts ev;
  auto* ec = app.add_subcommand("eval", "Perplexity of a checkpoint");
  add_data_options(ec, data);
  ec->add_option("--checkpoint", ev.checkpoint)->required();
  ec->add_option("--vocab", ev.vocab, "Vocabulary file that must match the checkpoint's");
  ec->add_option("--split", ev.split, "train | valid | all")->capture_default_str();
  ec->add_option("--batch", ev.batch)->capture_default_str();
  ec->add_option("--seq", ev.seq)->capture_default_str();

  QuantizeOpts qu;
  auto* qc = app.add_subcommand("quantize", "Full checkpoint -> VQ checkpoint by k-means");
  qc->add_option("--checkpoint", qu.checkpoint)->required();
  qc->add_option("--K", qu.k)->capture_default_str();
  qc->add_option("--mapping", qu.mapping)->capture_default_str();
  qc->add_option("--mapping-out", qu.mapping_out);
  qc->add_option("--codebook-trainable", qu.codebook_trainable)->capture_default_str();
  qc->add_option("--kmeans-iters", qu.kmeans_iters)->capture_default_str();
  qc->add_option("--out", qu.out, "Output directory")->required();

  BenchOpts be;
  auto* bc = app.add_subcommand("bench", "Parameter, memory, FLOP and latency report");
  add_data_options(bc, data);
  bc->add_option("--grid", be.grid, "heads=full,vq;K=256,1024;V=32768");
  bc->add_option("--heads", be.heads)->delimiter(',')->capture_default_str();
  bc->add_option("--K", be.ks)->delimiter(',')->capture_default_str();
  bc->add_option("--V", be.vocabs)->delimiter(',')->capture_default_str();
  bc->add_option("--d-model", be.d_model)->capture_default_str();
  bc->add_option("--batch", be.batch)->capture_default_str();
  bc->add_option("--seq", be.seq)->capture_default_str();
  bc->add_option("--reps", be.reps)->capture_default_str();
  bc->add_option("--precision", be.precision, "fp16 | fp32")->capture_default_str();
  bc->add_flag("--no-timing", be.no_timing, "Skip latency columns");
  bc->add_option("--checkpoint", be.checkpoints, "Trained checkpoints for the ppl column");
  bc->add_option("--split", be.split)->capture_default_str();
  bc->add_option("--out", be.out, "CSV path, or a directory for report.csv");

  InspectOpts in;
  auto* ic = app.add_subcommand("inspect", "Show which tokens share a code");
  ic->add_option("--checkpoint", in.checkpoint);
  ic->add_option("--mapping", in.mapping);
  ic->add_option("--vocab", in.vocab);
  ic->add_option("--code", in.code, "One code's members");
  ic->add_flag("--stats", in.stats, "Cluster statistics (default)");
  ic->add_flag("--all", in.all, "Every code's members");
  ic->add_flag("--csv", in.csv);
  ic->add_option("--top", in.top, "Members/clusters listed (0 = all)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  Eigen::setNbThreads(g.threads);
  if (*tr) {
    // Defaults that depend on other settings; pinned so config.resolved shows them.
    if (tr->get_option("--lr")->count() == 0) {
      tr->get_option("--lr")->default_val(train.from_checkpoint.empty() ? 3e-4 : 5e-5);
    }
    if (tr->get_option("--warmup")->count() == 0 && train.warmup > train.steps) {
      tr->get_option("--warmup")->default_val(train.steps);
    }
  }
  try {
    if (*tr) return cmd_train(app, g, data, model, head, train);
    if (*ec) return cmd_eval(g, data, ev);
    if (*qc) return cmd_quantize(app, g, qu);
    if (*bc) return cmd_bench(app, g, data, be);
    if (*ic) return cmd_inspect(in);
  } catch (const UsageError& e) {
    std::cerr << "vqlab: usage error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "vqlab: numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    // ConfigError, InputError, IndexError, DimensionError and I/O failures.
    std::cerr << "vqlab: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
