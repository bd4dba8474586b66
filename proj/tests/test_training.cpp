#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "director/csv.hpp"
#include "director/train.hpp"
#include "support/gradcheck.hpp"

using namespace director;

namespace {

// hand-built dual-head output: avoids a model when testing pure loss math
DualHeadOutput direct_output(Tensor lm_log_probs, Tensor class_probs) {
  return DualHeadOutput{.lm_log_probs = std::move(lm_log_probs),
                        .class_probs = std::move(class_probs)};
}

Tensor uniform_log_probs(int64_t t_len, int64_t vocab) {
  return Tensor::full({t_len, vocab}, std::log(1.0 / static_cast<double>(vocab)));
}

LabeledSequence plain_sequence(std::vector<int> tokens) {
  LabeledSequence seq;
  seq.tokens = std::move(tokens);
  seq.labels.assign(seq.tokens.size(), TokenLabel::unlabeled);
  seq.weights.assign(seq.tokens.size(), 1.0);
  seq.lm_mask.assign(seq.tokens.size(), 1);
  seq.lm_mask[0] = 0;
  return seq;
}

ModelConfig tiny_config(uint64_t seed, int64_t vocab = 8) {
  return ModelConfig{.vocab_size = vocab, .embed_dim = 16, .n_layers = 2,
                     .n_heads = 2, .max_seq_len = 16, .seed = seed};
}

std::vector<double> flatten_params(const DirectorModel& m,
                                   const std::vector<Tensor>& params) {
  (void)m;
  std::vector<double> out;
  for (const Tensor& p : params) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

}  // namespace

TEST_CASE("lm_loss fixed values") {
  const int64_t v = 4;

  SUBCASE("probability one on each true token gives zero loss") {
    // rows put all mass on the realized next token
    std::vector<int> tokens = {0, 2, 1};
    std::vector<double> rows(2 * v, -1e9);
    rows[0 * 4 + 2] = 0.0;
    rows[1 * 4 + 1] = 0.0;
    auto out = direct_output(Tensor({2, v}, rows), Tensor::full({2, v}, 0.5));
    CHECK(lm_loss(out, tokens).item() == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("uniform model scores ln V") {
    std::vector<int> tokens = {0, 1, 2, 3};
    auto out = direct_output(uniform_log_probs(4, v), Tensor::full({4, v}, 0.5));
    CHECK(lm_loss(out, tokens).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }

  SUBCASE("hand-set logit table matches per-step cross entropy") {
    // 3-token sequence, 2 predicted positions; logits chosen by hand
    std::vector<int> tokens = {3, 1, 0};
    Tensor logits({2, v}, {0.3, -0.2, 1.0, 0.0, -1.0, 0.5, 0.25, 0.0});
    Tensor lp = log_softmax(logits);
    auto out = direct_output(lp, Tensor::full({2, v}, 0.5));

    auto lse = [&](std::initializer_list<double> xs) {
      double total = 0.0;
      for (double x : xs) total += std::exp(x);
      return std::log(total);
    };
    const double nll1 = -(-0.2 - lse({0.3, -0.2, 1.0, 0.0}));
    const double nll2 = -(-1.0 - lse({-1.0, 0.5, 0.25, 0.0}));
    CHECK(lm_loss(out, tokens).item() ==
          doctest::Approx((nll1 + nll2) / 2.0).epsilon(1e-12));
  }

  SUBCASE("length-1 sequence is rejected") {
    std::vector<int> tokens = {0};
    auto out = direct_output(uniform_log_probs(1, v), Tensor::full({1, v}, 0.5));
    CHECK_THROWS_AS(lm_loss(out, tokens), std::invalid_argument);
  }

  SUBCASE("mask restricts the predicted positions") {
    std::vector<int> tokens = {0, 1, 2, 3};
    std::vector<double> rows(3 * v, -1e9);
    rows[0 * 4 + 1] = 0.0;   // correct
    rows[1 * 4 + 0] = 0.0;   // wrong for target 2, but masked out
    rows[2 * 4 + 3] = 0.0;   // correct
    auto out = direct_output(Tensor({3, v}, rows), Tensor::full({3, v}, 0.5));
    std::vector<uint8_t> mask = {0, 1, 0, 1};
    CHECK(lm_loss(out, tokens, mask).item() == doctest::Approx(0.0).epsilon(1e-12));
    std::vector<uint8_t> none = {0, 0, 0, 0};
    CHECK_THROWS_AS(lm_loss(out, tokens, none), std::invalid_argument);
  }
}

TEST_CASE("class_loss fixed values") {
  const int64_t v = 4;

  SUBCASE("confident correct classifier contributes nothing") {
    LabeledSequence seq = plain_sequence({0, 2});
    seq.labels[1] = TokenLabel::positive;
    Tensor cls = Tensor::full({1, v}, 0.5);
    cls.values_mut()[2] = 1.0;  // entry for the labeled token
    auto out = direct_output(uniform_log_probs(1, v), cls);
    CHECK(class_loss(out, seq).item() == doctest::Approx(0.0).epsilon(1e-8));
  }

  SUBCASE("coin-flip classifier scores ln 2 whatever the labels") {
    for (TokenLabel label : {TokenLabel::positive, TokenLabel::negative}) {
      LabeledSequence seq = plain_sequence({0, 2, 3});
      seq.labels[1] = label;
      seq.labels[2] = label;
      auto out = direct_output(uniform_log_probs(2, v), Tensor::full({2, v}, 0.5));
      CHECK(class_loss(out, seq).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
  }

  SUBCASE("two labeled tokens with probs 0.9 positive and 0.2 negative") {
    LabeledSequence seq = plain_sequence({0, 1, 3});
    seq.labels[1] = TokenLabel::positive;
    seq.labels[2] = TokenLabel::negative;
    Tensor cls = Tensor::full({2, v}, 0.5);
    cls.values_mut()[0 * 4 + 1] = 0.9;
    cls.values_mut()[1 * 4 + 3] = 0.2;
    auto out = direct_output(uniform_log_probs(2, v), cls);
    const double want = -(std::log(0.9) + std::log(0.8)) / 2.0;
    CHECK(class_loss(out, seq).item() == doctest::Approx(want).epsilon(1e-12));
    CHECK(want == doctest::Approx(0.1643).epsilon(1e-3));
  }

  SUBCASE("weights shift the mean") {
    LabeledSequence seq = plain_sequence({0, 1, 3});
    seq.labels[1] = TokenLabel::positive;
    seq.labels[2] = TokenLabel::positive;
    seq.weights[1] = 1.0;
    seq.weights[2] = 3.0;
    Tensor cls = Tensor::full({2, v}, 0.5);
    cls.values_mut()[0 * 4 + 1] = 0.9;
    cls.values_mut()[1 * 4 + 3] = 0.6;
    auto out = direct_output(uniform_log_probs(2, v), cls);
    const double want = (1.0 * -std::log(0.9) + 3.0 * -std::log(0.6)) / 4.0;
    CHECK(class_loss(out, seq).item() == doctest::Approx(want).epsilon(1e-12));
  }

  SUBCASE("no labeled positions is an error") {
    LabeledSequence seq = plain_sequence({0, 1});
    auto out = direct_output(uniform_log_probs(1, v), Tensor::full({1, v}, 0.5));
    CHECK_THROWS_AS(class_loss(out, seq), std::invalid_argument);
  }
}

TEST_CASE("label_norm_loss fixed values and brute force") {
  const int64_t v = 5;

  SUBCASE("all outputs at one half gives exactly zero") {
    LabeledSequence seq = plain_sequence({0, 2});
    seq.labels[1] = TokenLabel::positive;
    auto out = direct_output(uniform_log_probs(1, v), Tensor::full({1, v}, 0.5));
    CHECK(label_norm_loss(out, seq).item() == 0.0);
  }

  SUBCASE("off-candidates at 1.0 give a quarter") {
    LabeledSequence seq = plain_sequence({0, 2});
    seq.labels[1] = TokenLabel::negative;
    Tensor cls = Tensor::full({1, v}, 1.0);
    cls.values_mut()[2] = 0.5;  // labeled candidate is ignored by the norm
    auto out = direct_output(uniform_log_probs(1, v), cls);
    CHECK(label_norm_loss(out, seq).item() == doctest::Approx(0.25).epsilon(1e-12));
  }

  SUBCASE("random instance matches the brute-force double loop") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      const int64_t t_len = 4;
      LabeledSequence seq = plain_sequence({0, 1, 2, 3, 4});
      seq.labels[2] = TokenLabel::positive;
      seq.labels[4] = TokenLabel::negative;
      std::vector<double> probs(static_cast<size_t>(t_len * v));
      for (double& p : probs) p = 0.05 + 0.9 * rng.uniform();
      Tensor cls({t_len, v}, probs);
      auto out = direct_output(uniform_log_probs(t_len, v), cls);

      double want = 0.0;
      int terms = 0;
      for (size_t i : {size_t(2), size_t(4)}) {
        for (int64_t cand = 0; cand < v; ++cand) {
          if (cand == seq.tokens[i]) continue;
          const double p = cls.at(static_cast<int64_t>(i) - 1, cand);
          want += (p - 0.5) * (p - 0.5);
          ++terms;
        }
      }
      want /= static_cast<double>(terms);
      CHECK(label_norm_loss(out, seq).item() == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("ul_token_loss fixed values") {
  const int64_t v = 4;
  LabeledSequence seq = plain_sequence({0, 2, 1});
  seq.labels[1] = TokenLabel::negative;

  SUBCASE("half probability at one penalized token with alpha one is ln 2") {
    Tensor lp = uniform_log_probs(2, v);
    lp.values_mut()[0 * 4 + 2] = std::log(0.5);
    auto out = direct_output(lp, Tensor::full({2, v}, 0.5));
    CHECK(ul_token_loss(out, seq, 1.0).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-9));
  }

  SUBCASE("alpha zero and label-free sequences give constant zero") {
    auto out = direct_output(uniform_log_probs(2, v), Tensor::full({2, v}, 0.5));
    CHECK(ul_token_loss(out, seq, 0.0).item() == 0.0);
    LabeledSequence unlabeled = plain_sequence({0, 2, 1});
    CHECK(ul_token_loss(out, unlabeled, 0.7).item() == 0.0);
    LabeledSequence pos_only = plain_sequence({0, 2, 1});
    pos_only.labels[1] = TokenLabel::positive;
    CHECK(ul_token_loss(out, pos_only, 0.7).item() == 0.0);
  }

  SUBCASE("saturated LM probability stays finite via the epsilon clamp") {
    Tensor lp = uniform_log_probs(2, v);
    lp.values_mut()[0 * 4 + 2] = 0.0;  // P = 1 at the penalized token
    auto out = direct_output(lp, Tensor::full({2, v}, 0.5));
    const double loss = ul_token_loss(out, seq, 1.0).item();
    CHECK(std::isfinite(loss));
    CHECK(loss == doctest::Approx(-std::log(kProbEps)).epsilon(1e-6));
  }
}

TEST_CASE("all loss gradients pass finite differences through the full model") {
  DirectorModel model = DirectorModel::init(tiny_config(51));
  LabeledSequence seq = plain_sequence({1, 5, 3, 6, 2});
  seq.labels[2] = TokenLabel::positive;
  seq.labels[3] = TokenLabel::negative;
  seq.labels[4] = TokenLabel::negative;

  auto check = [&](const char* name, const std::function<Tensor()>& build) {
    auto rep = gradcheck::finite_diff(model.parameters(), build);
    INFO(name, " worst: ", rep.worst);
    CHECK(rep.max_rel_err < 1e-4);
  };

  check("lm", [&] {
    auto out = model.forward(seq.tokens);
    return lm_loss(out, seq.tokens, seq.lm_mask);
  });
  check("class", [&] {
    auto out = model.forward(seq.tokens);
    return class_loss(out, seq);
  });
  check("label_norm", [&] {
    auto out = model.forward(seq.tokens);
    return label_norm_loss(out, seq);
  });
  check("ul_tok", [&] {
    auto out = model.forward(seq.tokens);
    return ul_token_loss(out, seq, 0.25);
  });
  check("joint", [&] {
    auto out = model.forward(seq.tokens);
    Tensor joint = add(lm_loss(out, seq.tokens, seq.lm_mask),
                       scale(class_loss(out, seq), 0.2));
    joint = add(joint, scale(label_norm_loss(out, seq), 0.5));
    return add(joint, ul_token_loss(out, seq, 0.25));
  });
}

namespace {

std::vector<LabeledSequence> toy_labeled_data(int count, uint64_t seed) {
  Rng rng(seed);
  std::vector<LabeledSequence> out;
  for (int i = 0; i < count; ++i) {
    std::vector<int> tokens = {1};  // BOS
    const int len = 4 + static_cast<int>(rng.uniform_int(3));
    for (int j = 0; j < len; ++j) tokens.push_back(static_cast<int>(rng.uniform_int(8)));
    tokens.push_back(2);  // EOS
    LabeledSequence seq = plain_sequence(std::move(tokens));
    for (size_t p = 1; p + 1 < seq.length(); ++p)
      seq.labels[p] = rng.uniform() < 0.5 ? TokenLabel::positive : TokenLabel::negative;
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace

TEST_CASE("train_step contracts") {
  TrainConfig cfg{.gamma_train = 0.0, .delta = 0.0, .learning_rate = 1e-2};
  DirectorModel model = DirectorModel::init(tiny_config(61));
  auto data = toy_labeled_data(4, 3);
  Batch batch = batcher(data, 4, Vocabulary::kPad).front();

  SUBCASE("gamma and delta zero on a class batch leave parameters unchanged") {
    Optimizer opt(model.trainable_parameters(), {.kind = OptimKind::adam, .learning_rate = 1e-2});
    auto before = flatten_params(model, model.parameters());
    StepReport rep = train_step(model, batch, BatchKind::classifier, cfg, opt);
    auto after = flatten_params(model, model.parameters());
    CHECK(before == after);
    CHECK(rep.total == 0.0);
  }

  SUBCASE("empty batch and frozen LM batch are rejected") {
    Optimizer opt(model.trainable_parameters(), {.kind = OptimKind::adam, .learning_rate = 1e-2});
    CHECK_THROWS_AS(train_step(model, Batch{}, BatchKind::lm, cfg, opt), std::invalid_argument);
    DirectorModel frozen = DirectorModel::init(tiny_config(62));
    frozen.set_frozen_core(true);
    Optimizer fopt(frozen.trainable_parameters(), {.kind = OptimKind::adam, .learning_rate = 1e-2});
    CHECK_THROWS_AS(train_step(frozen, batch, BatchKind::lm, cfg, fopt), std::invalid_argument);
  }

  SUBCASE("decomposition: recorded total equals the weighted component sum") {
    TrainConfig mix{.gamma_train = 0.7, .delta = 0.3, .alpha_ul = 0.25,
                    .learning_rate = 1e-3};
    Optimizer opt(model.trainable_parameters(), {.kind = OptimKind::adam, .learning_rate = 1e-3});
    StepReport lm_rep = train_step(model, batch, BatchKind::lm, mix, opt);
    CHECK(lm_rep.total == doctest::Approx(lm_rep.lm + lm_rep.ul).epsilon(1e-12));
    StepReport cls_rep = train_step(model, batch, BatchKind::classifier, mix, opt);
    CHECK(cls_rep.total ==
          doctest::Approx(mix.gamma_train * cls_rep.cls + mix.delta * cls_rep.norm)
              .epsilon(1e-12));
  }
}

TEST_CASE("frozen-core class training moves only the classifier head") {
  DirectorModel model = DirectorModel::init(tiny_config(63));
  model.set_frozen_core(true);
  auto core_before = flatten_params(model, model.core_and_lm_parameters());
  auto head_before = flatten_params(model, model.class_head_parameters());

  TrainConfig cfg{.gamma_train = 1.0, .delta = 0.0, .learning_rate = 1e-2};
  Optimizer opt(model.trainable_parameters(), {.kind = OptimKind::adam, .learning_rate = 1e-2});
  auto data = toy_labeled_data(8, 5);
  for (int step = 0; step < 5; ++step) {
    Batch batch = batcher({data.begin() + step, data.begin() + step + 4}, 4,
                          Vocabulary::kPad).front();
    train_step(model, batch, BatchKind::classifier, cfg, opt);
  }

  CHECK(flatten_params(model, model.core_and_lm_parameters()) == core_before);
  CHECK(flatten_params(model, model.class_head_parameters()) != head_before);
}

TEST_CASE("train_loop memorizes a tiny corpus and keeps honest history") {
  // ten records, each with a distinct one-token context and a response fully
  // determined by it, so the LM loss can actually reach zero
  std::vector<std::string> words;
  for (int i = 0; i < 12; ++i) words.push_back("t" + std::to_string(i));
  Vocabulary vocab = Vocabulary::from_tokens(words);
  std::vector<LabeledSequence> d_lm;
  for (int i = 0; i < 10; ++i) {
    std::vector<int> ctx = {5 + i};
    std::vector<int> resp;
    for (int j = 0; j < 5; ++j) resp.push_back(5 + (i * 3 + j * 5) % 12);
    d_lm.push_back(pack_sequence(ctx, resp, 16));
  }

  ModelConfig mc{.vocab_size = vocab.size(), .embed_dim = 32, .n_layers = 1,
                 .n_heads = 2, .max_seq_len = 16, .seed = 5};
  TrainConfig tc{.gamma_train = 0.0, .learning_rate = 1e-2, .batch_size = 5,
                 .max_steps = 400, .patience = 1000, .eval_every = 50, .seed = 5};

  TrainResult result = train_loop(DirectorModel::init(mc), d_lm, {}, d_lm, tc);
  CHECK(result.history.size() == static_cast<size_t>(result.steps_run));

  double final_lm = result.history.back().lm;
  CHECK(final_lm < 0.05);

  // best checkpoint's metric is no worse than any later evaluation
  bool seen_best = false;
  for (const HistoryRow& row : result.history) {
    if (!row.val_metric) continue;
    if (row.step >= result.best_step) seen_best = true;
    if (seen_best) CHECK(result.best_metric <= *row.val_metric + 1e-12);
  }
}

TEST_CASE("train_loop is bit-deterministic and writes parseable history") {
  auto run = [] {
    DirectorModel model = DirectorModel::init(tiny_config(71));
    auto labeled = toy_labeled_data(6, 7);
    TrainConfig tc{.gamma_train = 0.5, .delta = 0.1, .learning_rate = 1e-3,
                   .batch_size = 3, .max_steps = 6, .patience = 100,
                   .eval_every = 3, .seed = 11};
    return train_loop(model, labeled, labeled, labeled, tc);
  };
  TrainResult a = run();
  TrainResult b = run();
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].lm == b.history[i].lm);
    CHECK(a.history[i].cls == b.history[i].cls);
    CHECK(std::isfinite(a.history[i].lm));
  }
  // alternation is strict: odd steps LM, even steps classifier
  for (const HistoryRow& row : a.history) {
    CHECK(row.kind == (row.step % 2 == 1 ? BatchKind::lm : BatchKind::classifier));
  }

  const auto path = std::filesystem::temp_directory_path() / "director_history_test.csv";
  write_history_csv(path.string(), a.history);
  auto rows = read_csv(path.string());
  REQUIRE(rows.size() == a.history.size() + 1);
  CHECK(rows[0][0] == "step");
  CHECK(rows[1][1] == "lm");
  CHECK(std::stod(rows[1][2]) == a.history[0].lm);
  std::filesystem::remove(path);
}

TEST_CASE("train_loop aborts with a named component on divergence") {
  DirectorModel model = DirectorModel::init(tiny_config(73));
  auto labeled = toy_labeled_data(6, 9);
  TrainConfig tc{.gamma_train = 0.5, .learning_rate = 1e30, .batch_size = 3,
                 .max_steps = 50, .patience = 100, .eval_every = 100,
                 .optimizer = OptimKind::sgd, .seed = 1};
  try {
    train_loop(model, labeled, labeled, {}, tc);
    FAIL("expected divergence abort");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step") != std::string::npos);
    CHECK(msg.find("loss") != std::string::npos);
  }
}

TEST_CASE("delta pushes off-candidate outputs toward one half") {
  auto data = toy_labeled_data(12, 21);
  auto off_candidate_deviation = [&](double delta) {
    DirectorModel model = DirectorModel::init(tiny_config(75));
    TrainConfig tc{.gamma_train = 1.0, .delta = delta, .learning_rate = 5e-3,
                   .batch_size = 4, .max_steps = 40, .patience = 1000,
                   .eval_every = 1000, .seed = 3};
    TrainResult result = train_loop(model, data, data, {}, tc);
    double dev = 0.0;
    int64_t count = 0;
    for (const LabeledSequence& seq : data) {
      DualHeadOutput out = result.last.forward(seq.tokens);
      for (size_t i = 1; i < seq.length(); ++i) {
        if (seq.labels[i] == TokenLabel::unlabeled) continue;
        for (int64_t cand = 0; cand < 8; ++cand) {
          if (cand == seq.tokens[i]) continue;
          dev += std::abs(out.class_probs.at(static_cast<int64_t>(i) - 1, cand) - 0.5);
          ++count;
        }
      }
    }
    return dev / static_cast<double>(count);
  };

  const double with_norm = off_candidate_deviation(10.0);
  const double without = off_candidate_deviation(0.0);
  CHECK(with_norm < without);
}
