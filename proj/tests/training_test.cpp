#include <gtest/gtest.h>
#include <unistd.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cmlm/training.hpp"

namespace {

using namespace cmlm;
namespace fs = std::filesystem;

using Named = std::vector<std::pair<std::string, ag::Tensor<double>>>;

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("cmlm_training_test_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

TEST(AdamW, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps).
  auto x = ag::Tensor<double>::from({1}, {1.0}, true);
  Named named = {{"x", x}};
  AdamState<double> st;
  ag::backward(ag::sum(ag::mul(x, x)));
  adamw_step(named, st, AdamHyper{0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_NEAR(x[0], 0.9, 1e-8);
}

TEST(AdamW, ZeroGradientWithoutDecayIsANoOp) {
  auto x = ag::Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
  Named named = {{"x", x}};
  AdamState<double> st;
  x.zero_grad();
  ag::backward(ag::scale(ag::sum(x), 0.0));
  adamw_step(named, st, AdamHyper{0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(std::vector<double>(x.values().begin(), x.values().end()), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(AdamW, DecoupledDecayShrinksBeforeTheAdamStep) {
  auto x = ag::Tensor<double>::from({2}, {4.0, -3.0}, true);
  Named named = {{"x", x}};
  AdamState<double> st;
  adamw_step(named, st, AdamHyper{0.01, 0.9, 0.999, 1e-8, 0.1});  // no gradient recorded
  EXPECT_DOUBLE_EQ(x[0], 4.0 * (1.0 - 0.01 * 0.1));
  EXPECT_DOUBLE_EQ(x[1], -3.0 * (1.0 - 0.01 * 0.1));
}

TEST(AdamW, MatchesDirectRecurrenceOverSeveralSteps) {
  const AdamHyper h{0.05, 0.8, 0.99, 1e-8, 0.02};
  auto x = ag::Tensor<double>::from({1}, {2.0}, true);
  Named named = {{"x", x}};
  AdamState<double> st;
  double w = 2.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 5; ++t) {
    x.zero_grad();
    ag::backward(ag::sum(ag::mul(ag::mul(x, x), x)));  // g = 3 x^2
    adamw_step(named, st, h);
    const double g = 3.0 * w * w;
    w *= 1.0 - h.lr * h.weight_decay;
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(h.beta1, t)), vhat = v / (1.0 - std::pow(h.beta2, t));
    w -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    EXPECT_NEAR(x[0], w, 1e-12) << "step " << t;
  }
  EXPECT_EQ(st.step, 5u);
}

TEST(AdamW, NonFiniteGradientNamesTheParameter) {
  auto a = ag::Tensor<double>::from({1}, {1.0}, true);
  auto b = ag::Tensor<double>::from({1}, {1.0}, true);
  Named named = {{"first", a}, {"second.weight", b}};
  ag::backward(ag::sum(ag::add(a, b)));
  b.mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  AdamState<double> st;
  try {
    adamw_step(named, st, AdamHyper{});
    FAIL();
  } catch (const NonFiniteGradient& e) {
    EXPECT_NE(std::string(e.what()).find("second.weight"), std::string::npos);
  }
  EXPECT_EQ(a[0], 1.0);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  auto a = ag::Tensor<double>::from({2}, {3.0, 4.0}, true);
  Named named = {{"a", a}};
  ag::backward(ag::sum(ag::mul(a, ag::Tensor<double>::from({2}, {3.0, 4.0}))));
  clip_grad_norm(named, 1.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(a.grad()[1], 0.8, 1e-15);
  clip_grad_norm(named, 10.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.p_c = 1.2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.k = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.alpha = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Objective, ParseRoundTrip) {
  for (const std::string s : {"cmlm", "tapt", "none", "cssl:eda-pair", "cssl:crm-pair"})
    EXPECT_EQ(Objective::parse(s).str(), s);
  EXPECT_THROW(Objective::parse("cssl:back-translation"), std::invalid_argument);
  EXPECT_THROW(Objective::parse("mlm"), std::invalid_argument);
}

// A tiny corpus with strong co-occurrence structure.
class SmallCorpus : public ::testing::Test {
 protected:
  std::vector<std::string> lines = [] {
    std::vector<std::string> out;
    Rng rng(123);
    const std::vector<std::vector<std::string>> topics = {
        {"red", "green", "blue", "yellow"}, {"cat", "dog", "bird", "fish"}, {"run", "walk", "swim", "fly"}};
    for (int i = 0; i < 50; ++i) {
      const auto& t = topics[static_cast<std::size_t>(i) % topics.size()];
      std::string s;
      for (int w = 0; w < 6; ++w) s += t[uniform_index(rng, t.size())] + " ";
      out.push_back(s);
    }
    return out;
  }();
  Vocabulary vocab = build_vocab(lines, 64);
  std::vector<TokenSequence> data = [this] {
    std::vector<TokenSequence> out;
    for (const auto& l : lines) out.push_back(encode({l, std::nullopt, 0}, vocab, 8));
    return out;
  }();
  EncoderConfig enc = [this] {
    EncoderConfig c;
    c.layers = 1, c.heads = 2, c.hidden = 16, c.ffn = 32, c.vocab = vocab.size(), c.max_len = 8;
    return c;
  }();
  TrainConfig train = [] {
    TrainConfig t;
    t.lr = 3e-3;
    t.epochs = 5;
    t.batch_size = 8;
    t.seed = 9;
    return t;
  }();

  EncoderParams<double> fresh() const {
    Rng rng(77);
    return init_params<double>(enc, rng);
  }
};

bool same_params(const EncoderParams<double>& a, const EncoderParams<double>& b) {
  const auto x = a.named(), y = b.named();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto u = x[i].second.values(), v = y[i].second.values();
    if (!std::equal(u.begin(), u.end(), v.begin(), [](double p, double q) {
          return std::bit_cast<std::uint64_t>(p) == std::bit_cast<std::uint64_t>(q);
        }))
      return false;
  }
  return true;
}

TEST_F(SmallCorpus, PostTrainingReducesLoss) {
  auto p = fresh();
  const auto res = post_train(p, data, vocab, train);
  const std::size_t per_epoch = (data.size() + train.batch_size - 1) / train.batch_size;
  ASSERT_EQ(res.steps, per_epoch * train.epochs);
  ASSERT_EQ(res.total_trace.size(), res.steps);
  const auto first = std::accumulate(res.mlm_trace.begin(), res.mlm_trace.begin() + per_epoch, 0.0) / per_epoch;
  const auto last = std::accumulate(res.mlm_trace.end() - per_epoch, res.mlm_trace.end(), 0.0) / per_epoch;
  EXPECT_LT(last, first);
  for (std::size_t i = 0; i < res.steps; ++i)
    EXPECT_NEAR(res.total_trace[i], res.mlm_trace[i] + train.alpha * res.cl_trace[i], 1e-9);
}

TEST_F(SmallCorpus, SameSeedIsBitIdentical) {
  auto a = fresh(), b = fresh();
  const auto ra = post_train(a, data, vocab, train);
  const auto rb = post_train(b, data, vocab, train);
  EXPECT_EQ(ra.total_trace, rb.total_trace);
  EXPECT_TRUE(same_params(a, b));
  auto c = fresh();
  auto other = train;
  other.seed = 10;
  post_train(c, data, vocab, other);
  EXPECT_FALSE(same_params(a, c));
}

TEST_F(SmallCorpus, TaptEqualsCmlmWithZeroAlpha) {
  auto tapt = train, cmlm = train;
  tapt.objective = Objective::parse("tapt");
  cmlm.alpha = 0.0;
  cmlm.k = 2;
  auto a = fresh(), b = fresh();
  const auto ra = post_train(a, data, vocab, tapt);
  const auto rb = post_train(b, data, vocab, cmlm);
  EXPECT_EQ(ra.mlm_trace, rb.mlm_trace);
  EXPECT_EQ(ra.total_trace, rb.total_trace);
  EXPECT_TRUE(same_params(a, b));
}

TEST_F(SmallCorpus, SimClrAndCsslRun) {
  auto simclr = train;
  simclr.epochs = 1;
  simclr.cl_variant = ClVariant::kSimClr;
  auto p = fresh();
  const auto r = post_train(p, data, vocab, simclr);
  for (double x : r.cl_trace) {
    EXPECT_TRUE(std::isfinite(x));
    EXPECT_GE(x, 0.0);
  }
  for (const auto& aug : augmenter_names()) {
    auto cssl = train;
    cssl.epochs = 1;
    cssl.objective = Objective::parse("cssl:" + aug);
    auto q = fresh();
    const auto rc = post_train(q, data, vocab, cssl);
    EXPECT_EQ(rc.mlm_trace, std::vector<double>(rc.steps, 0.0)) << aug;
    for (double x : rc.cl_trace) EXPECT_TRUE(std::isfinite(x)) << aug;
  }
}

TEST_F(SmallCorpus, PostTrainErrors) {
  auto p = fresh();
  EXPECT_THROW(post_train(p, {}, vocab, train), std::invalid_argument);
  auto none = train;
  none.objective = Objective::parse("none");
  EXPECT_THROW(post_train(p, data, vocab, none), std::invalid_argument);
}

class FineTuneTest : public SmallCorpus {
 protected:
  std::vector<EncodedExample> labelled = [this] {
    std::vector<EncodedExample> out;
    for (std::size_t i = 0; i < lines.size(); ++i) out.push_back({data[i], static_cast<int>(i % 3 == 1)});
    return out;
  }();
  std::vector<EncodedExample> train_set{labelled.begin(), labelled.begin() + 30};
  std::vector<EncodedExample> dev_set{labelled.begin() + 30, labelled.end()};
};

TEST_F(FineTuneTest, SingleEvaluationWhenIntervalExceedsSteps) {
  auto cfg = train;
  cfg.epochs = 1;
  cfg.checkpoint_interval = 1000;
  auto p = fresh();
  const auto r = fine_tune(p, train_set, dev_set, cfg);
  ASSERT_EQ(r.evaluations.size(), 1u);
  EXPECT_EQ(r.evaluations[0].first, 4u);  // ceil(30 / 8)
  EXPECT_EQ(r.best_step, 4u);
}

TEST_F(FineTuneTest, BestCheckpointDominatesEveryEvaluation) {
  auto cfg = train;
  cfg.epochs = 8;
  cfg.checkpoint_interval = 3;
  auto p = fresh();
  const auto r = fine_tune(p, train_set, dev_set, cfg);
  ASSERT_GE(r.evaluations.size(), 10u);
  for (const auto& [step, m] : r.evaluations) EXPECT_GE(r.best_metric, m);
  EXPECT_EQ(evaluate(r.best, dev_set, cfg.metric), r.best_metric);
  EXPECT_EQ(r.evaluations.back().first, r.loss_trace.size());
  const auto first_best = std::find_if(r.evaluations.begin(), r.evaluations.end(),
                                       [&](const auto& e) { return e.second == r.best_metric; });
  EXPECT_EQ(first_best->first, r.best_step);
  EXPECT_EQ(r.best_metric, 1.0);
}

TEST_F(FineTuneTest, RejectsLabelsOutsideTheHead) {
  auto bad = train_set;
  bad[0].label = 2;
  auto p = fresh();
  EXPECT_THROW(fine_tune(p, bad, dev_set, train), std::invalid_argument);
  EXPECT_THROW(fine_tune(p, {}, dev_set, train), std::invalid_argument);
}

TEST(SelectBest, EarliestMaximum) {
  const std::vector<double> m = {0.6, 0.9, 0.7};
  EXPECT_EQ(select_best(m), 1u);
  const std::vector<double> tie = {0.5, 0.8, 0.8};
  EXPECT_EQ(select_best(tie), 1u);
  EXPECT_THROW(select_best(std::vector<double>{}), std::invalid_argument);
}

class CheckpointTest : public SmallCorpus {
 protected:
  Checkpoint make() const {
    Checkpoint ck;
    ck.config = {{"lr", 0.001}, {"objective", "cmlm"}};
    ck.step = 17;
    ck.rng_state = rng_state(derive_rng(5, {1, 2}));
    ck.vocab = vocab.tokens();
    ck.labels = {"neg", "pos"};
    ck.params = fresh().cast<float>();
    return ck;
  }

  // Rewrites the JSON header of a saved checkpoint.
  static void edit_header(const fs::path& p, const std::function<void(nlohmann::json&)>& f) {
    auto bytes = read_bytes(p);
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[9 + i])) << (8 * i);
    auto header = nlohmann::json::parse(bytes.substr(13, len));
    f(header);
    const auto text = header.dump();
    std::string out = bytes.substr(0, 9);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xff));
    out += text + bytes.substr(13 + len);
    write_bytes(p, out);
  }
};

TEST_F(CheckpointTest, RoundTripIsBytewiseAndPredictionsMatch) {
  const auto ck = make();
  const auto p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  save_checkpoint(ck, p1.string());
  const auto back = load_checkpoint(p1.string());
  save_checkpoint(back, p2.string());
  EXPECT_EQ(read_bytes(p1), read_bytes(p2));
  EXPECT_EQ(read_bytes(p1).substr(0, 9), std::string("CMLMCKPT\x01", 9));
  EXPECT_EQ(back.step, 17u);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.vocab, ck.vocab);
  EXPECT_EQ(back.labels, ck.labels);
  EXPECT_EQ(back.params.config, ck.params.config);
  auto resumed = rng_from_state(back.rng_state);
  auto original = derive_rng(5, {1, 2});
  EXPECT_EQ(resumed(), original());
  const auto ids = data[3].ids;
  const auto a = classify(ck.params, pool_first(encode_tokens(ck.params, std::span<const int>(ids))));
  const auto b = classify(back.params, pool_first(encode_tokens(back.params, std::span<const int>(ids))));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint32_t>(a[i]), std::bit_cast<std::uint32_t>(b[i]));
}

TEST_F(CheckpointTest, BadMagicAndVersion) {
  const auto p = temp_path("bad.ckpt");
  save_checkpoint(make(), p.string());
  auto bytes = read_bytes(p);
  bytes[0] = 'X';
  write_bytes(p, bytes);
  EXPECT_THROW(load_checkpoint(p.string()), CheckpointFormatError);
  bytes[0] = 'C';
  bytes[8] = 2;
  write_bytes(p, bytes);
  EXPECT_THROW(load_checkpoint(p.string()), CheckpointVersionError);
  EXPECT_THROW(load_checkpoint(temp_path("missing.ckpt").string()), CheckpointError);
}

TEST_F(CheckpointTest, TruncationIsDetected) {
  const auto p = temp_path("trunc.ckpt");
  save_checkpoint(make(), p.string());
  const auto bytes = read_bytes(p);
  for (std::size_t keep : {std::size_t{5}, std::size_t{11}, std::size_t{40}, bytes.size() - 3}) {
    write_bytes(p, bytes.substr(0, keep));
    EXPECT_THROW(load_checkpoint(p.string()), CheckpointFormatError) << keep;
  }
}

TEST_F(CheckpointTest, ShapeMismatchNamesTheTensor) {
  const auto p = temp_path("shape.ckpt");
  save_checkpoint(make(), p.string());
  edit_header(p, [](nlohmann::json& h) { h["tensors"][3]["shape"] = {7, 7}; });
  try {
    load_checkpoint(p.string());
    FAIL();
  } catch (const CheckpointShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.attn.bq"), std::string::npos) << e.what();
  }
  save_checkpoint(make(), p.string());
  edit_header(p, [](nlohmann::json& h) { h["tensors"].erase(h["tensors"].size() - 1); });
  EXPECT_THROW(load_checkpoint(p.string()), CheckpointShapeError);
}

}  // namespace
