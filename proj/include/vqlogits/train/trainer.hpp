#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vqlogits/data/batch_stream.hpp"
#include "vqlogits/errors.hpp"
#include "vqlogits/model/transformer.hpp"
#include "vqlogits/train/optimizer.hpp"

namespace vqlogits {

enum class FinetuneScope { kFullModel, kHeadAndFinalNorm, kCodebookOnly, kNone };

inline std::string finetune_scope_name(FinetuneScope s) {
  switch (s) {
    case FinetuneScope::kFullModel: return "full_model";
    case FinetuneScope::kHeadAndFinalNorm: return "head_and_final_norm";
    case FinetuneScope::kCodebookOnly: return "codebook_only";
    case FinetuneScope::kNone: return "none";
  }
  return "?";
}

inline FinetuneScope parse_finetune_scope(const std::string& name) {
  if (name == "full_model") return FinetuneScope::kFullModel;
  if (name == "head_and_final_norm") return FinetuneScope::kHeadAndFinalNorm;
  if (name == "codebook_only") return FinetuneScope::kCodebookOnly;
  if (name == "none") return FinetuneScope::kNone;
  throw ConfigError("unknown fine-tune scope '" + name + "'");
}

struct TrainConfig {
  Schedule schedule;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t batch = 16;
  std::size_t seq = 64;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 500;
  std::size_t log_interval = 50;
  FinetuneScope scope = FinetuneScope::kFullModel;
  // Wall-clock throughput is the one nondeterministic metric; when off the
  // tokens_per_sec column is left empty so metric logs compare byte for byte.
  bool record_throughput = true;

  void validate() const {
    if (schedule.warmup_steps > schedule.total_steps) {
      throw ConfigError("warmup_steps must not exceed total_steps");
    }
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
    if (!(schedule.lr_peak >= 0.0) || !(schedule.lr_min >= 0.0)) {
      throw ConfigError("learning rates must be >= 0");
    }
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (batch == 0 || seq == 0) throw ConfigError("batch and seq must be > 0");
    if (log_interval == 0) throw ConfigError("log_interval must be > 0");
  }
};

// Marks every parameter outside the scope as frozen (requires_grad off) and
// returns the trainable set. A codebook flagged untrainable stays frozen in
// every scope.
template <typename T>
std::vector<NamedParam<T>> apply_finetune_scope(const LanguageModel<T>& model,
                                                FinetuneScope scope) {
  const auto* vq = std::get_if<VQHead<T>>(&model.head);
  if (scope == FinetuneScope::kCodebookOnly && vq == nullptr) {
    throw ConfigError("codebook_only fine-tuning needs a VQ head");
  }
  auto all = model.parameters();
  const auto head = head_parameters(model.head);
  const auto norm = model.body.final_norm_parameters();
  auto contains = [](const std::vector<NamedParam<T>>& set, const Tensor<T>& t) {
    for (const auto& p : set)
      if (p.tensor.same_storage(t)) return true;
    return false;
  };
  std::vector<NamedParam<T>> trainable;
  for (auto& p : all) {
    bool on = false;
    switch (scope) {
      case FinetuneScope::kFullModel: on = true; break;
      case FinetuneScope::kHeadAndFinalNorm: on = contains(head, p.tensor) || contains(norm, p.tensor); break;
      case FinetuneScope::kCodebookOnly: on = p.tensor.same_storage(vq->codebook.vectors); break;
      case FinetuneScope::kNone: on = false; break;
    }
    if (vq != nullptr && !vq->codebook.trainable && p.tensor.same_storage(vq->codebook.vectors)) {
      on = false;
    }
    Tensor<T> t = p.tensor;
    t.set_requires_grad(on);
    if (!on) t.drop_grad();
    if (on) trainable.push_back(p);
  }
  return trainable;
}

// exp(mean next-token NLL) over every target of `ids` (ids[1..n-1]). The
// stream is cut into consecutive windows of `seq` tokens, `batch` windows per
// forward pass; each window starts a fresh context. Eval mode: no dropout,
// no tape.
template <typename T>
double evaluate_ppl(const LanguageModel<T>& model, const std::vector<Index>& ids,
                    std::size_t batch, std::size_t seq) {
  if (ids.size() < 2) throw InputError("evaluation stream needs at least two tokens");
  if (batch == 0 || seq == 0) throw ConfigError("batch and seq must be > 0");
  seq = std::min(seq, model.config().max_seq);
  Tape<T> off(false);
  const std::size_t targets = ids.size() - 1;
  const std::size_t windows = targets / seq, tail = targets % seq;
  double nll = 0.0;
  auto run = [&](std::size_t first, std::size_t n_win, std::size_t len) {
    std::vector<Index> in(n_win * len), out(n_win * len);
    for (std::size_t w = 0; w < n_win; ++w) {
      const std::size_t base = (first + w) * seq;
      std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(base), len,
                  in.begin() + static_cast<std::ptrdiff_t>(w * len));
      std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(base + 1), len,
                  out.begin() + static_cast<std::ptrdiff_t>(w * len));
    }
    const Tensor<T> loss = model.loss(off, in, out, n_win, len);
    nll += static_cast<double>(loss.item()) * static_cast<double>(n_win * len);
  };
  for (std::size_t w = 0; w < windows; w += batch) run(w, std::min(batch, windows - w), seq);
  if (tail > 0) run(windows, 1, tail);
  return std::exp(nll / static_cast<double>(targets));
}

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> ppl;
  double lr = 0.0;
  std::optional<double> tokens_per_sec;
};

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "step,loss,ppl,lr,tokens_per_sec\n";
  std::ostringstream line;
  for (const auto& r : rows) {
    line.str("");
    line << std::setprecision(9) << r.step << ',' << r.loss << ',';
    if (r.ppl) line << *r.ppl;
    line << ',' << r.lr << ',';
    if (r.tokens_per_sec) line << std::setprecision(6) << *r.tokens_per_sec;
    out << line.str() << '\n';
  }
}

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::size_t steps_done = 0;
  double final_loss = 0.0;
  bool diverged = false;
  std::string error;  // set when diverged
};

template <typename T>
struct TrainHooks {
  // Held-out stream for PPL at every eval_interval and at the end; optional.
  const std::vector<Index>* valid = nullptr;
  // Called after each evaluation with the step number; the model holds the
  // weights of that step.
  std::function<void(std::size_t)> on_checkpoint;
};

// Per step: batch -> loss -> backward -> clip -> AdamW at lr_at(step).
// Steps are numbered from 1. A non-finite loss or gradient restores the
// weights of the last checkpoint (or the initial weights) and stops.
template <typename T>
TrainResult train_loop(LanguageModel<T>& model, const TrainConfig& cfg,
                       const std::vector<Index>& train_ids, const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  const auto trainable = apply_finetune_scope(model, cfg.scope);
  BatchStream stream(train_ids, cfg.batch, cfg.seq, cfg.seed);
  Rng dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamW<T> opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  const auto all = model.parameters();

  std::vector<std::vector<T>> good;
  auto snapshot = [&] {
    good.clear();
    for (const auto& p : all) good.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  };
  auto restore = [&] {
    for (std::size_t i = 0; i < all.size(); ++i) {
      Tensor<T> t = all[i].tensor;
      std::copy(good[i].begin(), good[i].end(), t.data().begin());
    }
  };
  snapshot();

  TrainResult res;
  Tape<T> tape;
  const std::size_t total = cfg.schedule.total_steps;
  auto clock_start = std::chrono::steady_clock::now();
  std::size_t tokens_since = 0;
  for (std::size_t step = 1; step <= total; ++step) {
    const double lr = lr_at(step, cfg.schedule);
    const Batch b = stream.next_cycling();
    tape.clear();
    double loss_value = 0.0;
    try {
      const Tensor<T> loss = model.loss(tape, b.inputs, b.targets, b.batch, b.seq, &dropout_rng);
      loss_value = static_cast<double>(loss.item());
      if (!trainable.empty()) {
        tape.backward(loss);
        clip_global_norm(trainable, cfg.clip_norm);
        opt.step(trainable, lr);
      }
    } catch (const NumericError& e) {
      restore();
      tape.clear();
      res.diverged = true;
      res.error = "step " + std::to_string(step) + ": " + e.what();
      return res;
    }
    tokens_since += b.inputs.size();
    res.steps_done = step;
    res.final_loss = loss_value;

    const bool eval_now = cfg.eval_interval > 0 && step % cfg.eval_interval == 0;
    const bool last = step == total;
    if (step % cfg.log_interval == 0 || eval_now || last) {
      MetricsRow row{step, loss_value, std::nullopt, lr, std::nullopt};
      if (cfg.record_throughput) {
        const auto now = std::chrono::steady_clock::now();
        const double secs = std::chrono::duration<double>(now - clock_start).count();
        row.tokens_per_sec = secs > 0 ? static_cast<double>(tokens_since) / secs : 0.0;
      }
      if ((eval_now || last) && hooks.valid != nullptr && !hooks.valid->empty()) {
        row.ppl = evaluate_ppl(model, *hooks.valid, cfg.batch, cfg.seq);
      }
      res.metrics.push_back(row);
      if (eval_now || last) {
        snapshot();
        if (hooks.on_checkpoint) hooks.on_checkpoint(step);
      }
      tokens_since = 0;
      clock_start = std::chrono::steady_clock::now();
    }
  }
  tape.clear();
  return res;
}

}  // namespace vqlogits
