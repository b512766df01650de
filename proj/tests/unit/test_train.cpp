#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"
#include "vqlogits/train/checkpoint.hpp"
#include "vqlogits/train/trainer.hpp"

using namespace vqlogits;
using vqlogits::testing::random_ids;

namespace {

ModelConfig small_config(std::size_t vocab, TieMode tie = TieMode::kUntied) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.d_ffn = 32;
  cfg.n_heads = 2;
  cfg.vocab = vocab;
  cfg.max_seq = 16;
  cfg.dropout = 0.0;
  cfg.tie = tie;
  return cfg;
}

template <typename T>
LanguageModel<T> full_model(std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  auto body = TransformerBody<T>::init(small_config(vocab), rng);
  return LanguageModel<T>::assemble(std::move(body), make_full_head<T>(vocab, 16, rng));
}

template <typename T>
LanguageModel<T> vq_model(const VocabMapping& map, std::uint64_t seed,
                          TieMode tie = TieMode::kUntied) {
  Rng rng(seed);
  auto body = TransformerBody<T>::init(small_config(map.vocab_size(), tie), rng);
  return LanguageModel<T>::assemble(std::move(body), make_vq_head<T>(map, 16, rng));
}

TrainConfig quick_config(std::size_t steps) {
  TrainConfig cfg;
  cfg.schedule = {3e-3, 0.0, steps / 10, steps};
  cfg.batch = 4;
  cfg.seq = 8;
  cfg.seed = 5;
  cfg.eval_interval = 0;
  cfg.log_interval = 1;
  cfg.record_throughput = false;
  return cfg;
}

template <typename T>
std::vector<std::vector<T>> values(const std::vector<NamedParam<T>>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

std::vector<NamedParam<double>> scalar_param(double w, double g, bool decay) {
  TensorD t({1}, {w}, true);
  t.grad()[0] = g;
  return {{"w", t, decay}};
}

template <typename T>
std::string saved(const LanguageModel<T>& m, const Vocabulary* v = nullptr) {
  std::ostringstream out;
  save_checkpoint(out, m, v);
  return out.str();
}

}  // namespace

TEST(AdamW, ZeroGradientsZeroDecayLeaveParametersUnchanged) {
  auto params = scalar_param(0.75, 0.0, true);
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 5; ++i) opt.step(params, 0.1);
  EXPECT_EQ(params[0].tensor[0], 0.75);
}

TEST(AdamW, ConstantGradientMatchesHandRecursion) {
  // With a constant gradient the bias-corrected moments are exactly g and g^2.
  const double g = 0.5, lr = 0.1, wd = 0.01, eps = 1e-8;
  auto params = scalar_param(1.0, g, true);
  AdamW<double> opt({0.9, 0.999, eps, wd});
  double w = 1.0;
  for (int t = 1; t <= 3; ++t) {
    opt.step(params, lr);
    const double m = 1 - std::pow(0.9, t), v = 1 - std::pow(0.999, t);
    const double mhat = g * m / m, vhat = g * g * v / v;
    w = w * (1 - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
    EXPECT_NEAR(params[0].tensor[0], w, 1e-15) << "step " << t;
  }
  EXPECT_EQ(opt.steps_taken(), 3u);
}

TEST(AdamW, WeightDecayOnly) {
  auto params = scalar_param(2.0, 0.0, true);
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.01});
  double w = 2.0;
  for (int i = 0; i < 4; ++i) {
    opt.step(params, 0.1);
    w *= 1 - 0.001;
    EXPECT_DOUBLE_EQ(params[0].tensor[0], w);
  }
  // Non-decayed parameters are untouched by the decay term.
  auto nodecay = scalar_param(2.0, 0.0, false);
  opt.step(nodecay, 0.1);
  EXPECT_EQ(nodecay[0].tensor[0], 2.0);
}

TEST(AdamW, NonFiniteGradientAbortsStep) {
  auto params = scalar_param(1.0, std::nan(""), true);
  AdamW<double> opt;
  EXPECT_THROW(opt.step(params, 0.1), NumericError);
  EXPECT_EQ(params[0].tensor[0], 1.0);
  EXPECT_EQ(opt.steps_taken(), 0u);
}

TEST(Schedule, BoundaryValues) {
  const Schedule s{3e-4, 3e-5, 200, 5000};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(100, s), 1.5e-4);
  EXPECT_EQ(lr_at(200, s), 3e-4);
  EXPECT_DOUBLE_EQ(lr_at(2600, s), (3e-4 + 3e-5) / 2);
  EXPECT_DOUBLE_EQ(lr_at(5000, s), 3e-5);
  EXPECT_EQ(lr_at(9000, s), 3e-5);
  for (std::size_t step = 200; step < 5000; step += 97) EXPECT_GE(lr_at(step, s), lr_at(step + 97, s));
}

TEST(Clip, ScalesOnlyAboveThreshold) {
  TensorD a({2}, {3.0, 4.0}, true);
  a.grad()[0] = 3.0;
  a.grad()[1] = 4.0;
  std::vector<NamedParam<double>> p{{"a", a, true}};
  EXPECT_DOUBLE_EQ(clip_global_norm(p, 1.0), 0.2);
  EXPECT_DOUBLE_EQ(a.grad()[0], 0.6);
  EXPECT_DOUBLE_EQ(a.grad()[1], 0.8);
  a.grad()[0] = 0.3;
  a.grad()[1] = 0.4;
  EXPECT_EQ(clip_global_norm(p, 1.0), 1.0);
  EXPECT_EQ(a.grad()[0], 0.3);
}

TEST(Clip, PostClipNormBounded) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<NamedParam<double>> p;
    for (int k = 0; k < 3; ++k) {
      TensorD t({5}, true);
      for (double& g : t.grad()) g = rng.normal(0, 10);
      p.push_back({"p" + std::to_string(k), t, true});
    }
    const double clip = 0.1 + rng.uniform();
    clip_global_norm(p, clip);
    EXPECT_LE(global_grad_norm(p), clip + 1e-9);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.schedule.warmup_steps = cfg.schedule.total_steps + 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.clip_norm = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_finetune_scope("everything"), ConfigError);
  EXPECT_EQ(parse_finetune_scope("codebook_only"), FinetuneScope::kCodebookOnly);
}

TEST(FinetuneScope, CodebookOnlyLeavesBodyBitwiseUnchanged) {
  Rng rng(2);
  auto model = vq_model<float>(VocabMapping(random_ids(20, 6, rng), 6), 3);
  const auto body_before = values(model.body.parameters());
  const TensorF cb = std::get<VQHead<float>>(model.head).codebook.vectors;
  const std::vector<float> cb_before(cb.data().begin(), cb.data().end());
  TrainConfig cfg = quick_config(100);
  cfg.scope = FinetuneScope::kCodebookOnly;
  const auto res = train_loop(model, cfg, random_ids(400, 20, rng));
  ASSERT_FALSE(res.diverged);
  EXPECT_EQ(res.steps_done, 100u);
  EXPECT_EQ(values(model.body.parameters()), body_before);
  EXPECT_NE(std::vector<float>(cb.data().begin(), cb.data().end()), cb_before);
  for (const auto& p : model.body.parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
}

TEST(FinetuneScope, TrainableCounts) {
  Rng rng(4);
  auto model = vq_model<float>(VocabMapping(random_ids(30, 7, rng), 7), 5);
  EXPECT_EQ(count_elements(apply_finetune_scope(model, FinetuneScope::kFullModel)),
            model.param_count());
  EXPECT_EQ(count_elements(apply_finetune_scope(model, FinetuneScope::kHeadAndFinalNorm)),
            7u * 16 + 2 * 16);
  EXPECT_EQ(count_elements(apply_finetune_scope(model, FinetuneScope::kCodebookOnly)), 7u * 16);
  EXPECT_TRUE(apply_finetune_scope(model, FinetuneScope::kNone).empty());
  for (const auto& p : model.parameters()) EXPECT_FALSE(p.tensor.requires_grad());

  std::get<VQHead<float>>(model.head).codebook.trainable = false;
  EXPECT_EQ(count_elements(apply_finetune_scope(model, FinetuneScope::kHeadAndFinalNorm)), 2u * 16);

  auto full = full_model<float>(30, 6);
  EXPECT_THROW(apply_finetune_scope(full, FinetuneScope::kCodebookOnly), ConfigError);
}

TEST(EvaluatePpl, UntrainedModelIsNearUniform) {
  Rng rng(7);
  auto model = full_model<float>(50, 8);
  const double ppl = evaluate_ppl(model, random_ids(300, 50, rng), 4, 16);
  EXPECT_NEAR(ppl, 50.0, 10.0);
}

TEST(EvaluatePpl, SingleCodeIsExactlyV) {
  Rng rng(9);
  auto model = vq_model<double>(VocabMapping(std::vector<Index>(37, 0), 1), 10);
  const double ppl = evaluate_ppl(model, random_ids(123, 37, rng), 3, 10);
  EXPECT_NEAR(ppl, 37.0, 37.0 * 1e-12);
}

TEST(EvaluatePpl, DeterministicAndCoversEveryTarget) {
  Rng rng(11);
  auto model = full_model<double>(25, 12);
  const auto ids = random_ids(101, 25, rng);
  EXPECT_EQ(evaluate_ppl(model, ids, 4, 16), evaluate_ppl(model, ids, 4, 16));
  // Batch grouping does not change which windows are scored.
  EXPECT_NEAR(evaluate_ppl(model, ids, 1, 16), evaluate_ppl(model, ids, 7, 16), 1e-12);
  // Oracle: one window at a time through the loss.
  Tape<double> off(false);
  double nll = 0;
  for (std::size_t start = 0; start + 1 < ids.size(); start += 16) {
    const std::size_t len = std::min<std::size_t>(16, ids.size() - 1 - start);
    std::vector<Index> in(ids.begin() + start, ids.begin() + start + len);
    std::vector<Index> out(ids.begin() + start + 1, ids.begin() + start + 1 + len);
    nll += model.loss(off, in, out, 1, len).item() * static_cast<double>(len);
  }
  EXPECT_NEAR(evaluate_ppl(model, ids, 4, 16), std::exp(nll / 100), 1e-10);
  EXPECT_THROW(evaluate_ppl(model, std::vector<Index>{1}, 4, 16), InputError);
}

TEST(TrainLoop, OverfitsTinyCorpus) {
  Rng rng(13);
  const auto ids = random_ids(64, 16, rng);
  ModelConfig mc = small_config(16);
  mc.d_model = 32;
  mc.d_ffn = 64;
  Rng init(14);
  auto model = LanguageModel<float>::assemble(TransformerBody<float>::init(mc, init),
                                              make_full_head<float>(16, 32, init));
  TrainConfig cfg = quick_config(500);
  cfg.schedule = {1e-2, 1e-3, 20, 500};
  cfg.batch = 4;
  cfg.seq = 15;
  cfg.weight_decay = 0.0;
  const auto res = train_loop(model, cfg, ids);
  ASSERT_FALSE(res.diverged) << res.error;
  EXPECT_LT(res.final_loss, 0.1);
}

TEST(TrainLoop, SeededRunsAreIdentical) {
  Rng rng(15);
  const auto ids = random_ids(500, 30, rng);
  auto run = [&] {
    ModelConfig mc = small_config(30);
    mc.dropout = 0.2;
    Rng init(16);
    auto model = LanguageModel<float>::assemble(TransformerBody<float>::init(mc, init),
                                                make_full_head<float>(30, 16, init));
    TrainConfig cfg = quick_config(40);
    const auto res = train_loop(model, cfg, ids, {&ids, {}});
    std::ostringstream csv;
    write_metrics_csv(csv, res.metrics);
    return std::make_pair(csv.str(), saved(model));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first.substr(0, a.first.find('\n')), "step,loss,ppl,lr,tokens_per_sec");
}

TEST(TrainLoop, IdentityVqMatchesFullHead) {
  Rng rng(17);
  const auto ids = random_ids(400, 24, rng);
  auto full = full_model<float>(24, 18);
  // Same body weights, codebook = the Full head's matrix.
  Rng again(18);
  auto body = TransformerBody<float>::init(small_config(24), again);
  VQHead<float> vq{Codebook<float>{std::get<FullHead<float>>(full.head).embeddings.clone(), true},
                   VocabMapping::identity(24), true};
  auto model = LanguageModel<float>::assemble(std::move(body), vq);
  const TrainConfig cfg = quick_config(3);
  const auto a = train_loop(full, cfg, ids), b = train_loop(model, cfg, ids);
  ASSERT_EQ(a.metrics.size(), 3u);
  EXPECT_EQ(a.metrics[0].loss, b.metrics[0].loss);
  for (std::size_t i = 1; i < 3; ++i) EXPECT_NEAR(a.metrics[i].loss, b.metrics[i].loss, 1e-6);
}

TEST(TrainLoop, MetricsRowsAndCheckpointCallback) {
  Rng rng(19);
  const auto ids = random_ids(500, 20, rng);
  auto model = full_model<float>(20, 20);
  TrainConfig cfg = quick_config(25);
  cfg.log_interval = 10;
  cfg.eval_interval = 12;
  std::vector<std::size_t> ckpts;
  const auto res = train_loop(model, cfg, ids, {&ids, [&](std::size_t s) { ckpts.push_back(s); }});
  std::vector<std::size_t> steps;
  for (const auto& r : res.metrics) steps.push_back(r.step);
  EXPECT_EQ(steps, (std::vector<std::size_t>{10, 12, 20, 24, 25}));
  EXPECT_EQ(ckpts, (std::vector<std::size_t>{12, 24, 25}));
  EXPECT_FALSE(res.metrics[0].ppl.has_value());
  EXPECT_TRUE(res.metrics[1].ppl.has_value());
}

TEST(TrainLoop, DivergenceRestoresLastGoodWeights) {
  Rng rng(21);
  const auto ids = random_ids(500, 20, rng);
  auto model = full_model<float>(20, 22);
  TrainConfig cfg = quick_config(30);
  cfg.eval_interval = 5;
  std::vector<std::vector<float>> at_ckpt;
  std::size_t calls = 0;
  auto hooks = TrainHooks<float>{nullptr, [&](std::size_t) {
                                   at_ckpt = values(model.parameters());
                                   // Poison the weights right after the second checkpoint.
                                   if (++calls == 2) {
                                     TensorF w = model.parameters()[2].tensor;
                                     w[0] = std::numeric_limits<float>::infinity();
                                   }
                                 }};
  const auto res = train_loop(model, cfg, ids, hooks);
  EXPECT_TRUE(res.diverged);
  EXPECT_EQ(res.steps_done, 10u);
  EXPECT_FALSE(res.error.empty());
  EXPECT_EQ(values(model.parameters()), at_ckpt);
}

TEST(Checkpoint, RoundTripIsByteIdenticalForEveryHead) {
  Rng rng(23);
  const std::size_t v = 40;
  std::vector<LanguageModel<float>> models;
  models.push_back(full_model<float>(v, 24));
  models.push_back(vq_model<float>(VocabMapping(random_ids(v, 9, rng), 9), 25));
  models.push_back(vq_model<float>(VocabMapping(random_ids(v, 9, rng), 9), 26, TieMode::kTieCodebook));
  {
    Rng r(27);
    models.push_back(LanguageModel<float>::assemble(TransformerBody<float>::init(small_config(v), r),
                                                    make_lowrank_head<float>(v, 16, 5, r)));
    models.push_back(LanguageModel<float>::assemble(
        TransformerBody<float>::init(small_config(v), r),
        make_adaptive_head<float>(v, 16, {10, 25, 40}, {2, 4}, r)));
    models.push_back(LanguageModel<float>::assemble(
        TransformerBody<float>::init(small_config(v, TieMode::kTieFull), r),
        make_full_head<float>(v, 16, r)));
  }
  std::get<VQHead<float>>(models[1].head).codebook.trainable = false;
  const auto ids = random_ids(200, v, rng);
  for (const auto& m : models) {
    const std::string bytes = saved(m);
    std::istringstream in(bytes);
    const auto back = load_checkpoint<float>(in);
    EXPECT_EQ(saved(back.model), bytes);
    EXPECT_EQ(back.model.config(), m.config());
    EXPECT_EQ(head_descriptor(back.model.head), head_descriptor(m.head));
    EXPECT_EQ(evaluate_ppl(back.model, ids, 4, 16), evaluate_ppl(m, ids, 4, 16));
  }
}

TEST(Checkpoint, CarriesVocabularyAndMapping) {
  std::istringstream corpus("a b c a b a\nd e\n");
  const Vocabulary vocab = Vocabulary::build(corpus, 100);
  Rng rng(28);
  auto m = vq_model<float>(VocabMapping(random_ids(vocab.size(), 3, rng), 3), 29);
  std::istringstream in(saved(m, &vocab));
  const auto back = load_checkpoint<float>(in);
  ASSERT_TRUE(back.vocab.has_value());
  EXPECT_EQ(*back.vocab, vocab);
  EXPECT_EQ(std::get<VQHead<float>>(back.model.head).mapping,
            std::get<VQHead<float>>(m.head).mapping);
}

TEST(Checkpoint, ManifestCoversParametersWithoutOverlap) {
  Rng rng(30);
  auto m = vq_model<float>(VocabMapping(random_ids(40, 9, rng), 9), 31);
  const std::string bytes = saved(m);
  std::istringstream in(bytes);
  std::string line;
  std::size_t expected_offset = 0, n = 0;
  bool in_params = false;
  while (std::getline(in, line) && line != "data") {
    if (line.rfind("params ", 0) == 0) {
      in_params = true;
      continue;
    }
    if (line.rfind("mapping", 0) == 0) {
      EXPECT_EQ(line, "mapping " + std::to_string(expected_offset) + " 40");
      break;
    }
    if (!in_params) continue;
    std::istringstream ls(line);
    std::string name, shape;
    std::size_t offset = 0, count = 0;
    ls >> name >> shape >> offset >> count;
    EXPECT_EQ(offset, expected_offset) << name;
    expected_offset += 4 * count;
    ++n;
  }
  EXPECT_EQ(n, m.parameters().size());
  EXPECT_EQ(expected_offset, 4 * m.param_count());
}

TEST(Checkpoint, CorruptFilesAreInputErrors) {
  auto m = full_model<float>(12, 32);
  const std::string good = saved(m);
  auto load = [](const std::string& s) {
    std::istringstream in(s);
    return load_checkpoint<float>(in);
  };
  EXPECT_THROW(load(""), InputError);
  EXPECT_THROW(load("vqckpt 99\n"), InputError);
  EXPECT_THROW(load(good.substr(0, good.size() - 7)), InputError);
  std::string renamed = good;
  renamed.replace(renamed.find("head.embeddings"), 15, "head.emb3ddings");
  EXPECT_THROW(load(renamed), InputError);
}
