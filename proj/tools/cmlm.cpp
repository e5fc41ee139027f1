// cmlm: command-line driver for vocabularies, masking previews, training,
// evaluation, few-shot experiments, sweeps and gradient audits.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
// error, 3 gradient audit failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cmlm/config.hpp"
#include "cmlm/experiment.hpp"
#include "cmlm/grad_audit.hpp"
#include "cmlm/masking.hpp"
#include "cmlm/text.hpp"
#include "cmlm/training.hpp"

namespace {

using namespace cmlm;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerification = 3;

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (auto s = env_seed()) return *s;
  return 42;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<std::string> texts_of(const std::vector<LabeledExample>& xs) {
  std::vector<std::string> out;
  for (const auto& x : xs) {
    out.push_back(x.text_a);
    if (x.text_b) out.push_back(*x.text_b);
  }
  return out;
}

Checkpoint make_checkpoint(const EncoderParams<float>& params, const RunConfig& cfg, std::uint64_t step,
                           std::size_t epochs, const Vocabulary& vocab, std::vector<std::string> labels) {
  Checkpoint ck;
  ck.config = to_json(cfg);
  ck.step = step;
  // Streams are derived from (seed, tags); the next unused shuffle stream
  // is all a resumed run would need.
  ck.rng_state = rng_state(derive_rng(cfg.seed, {detail::kShuffleStream, epochs}));
  ck.vocab = vocab.tokens();
  ck.labels = std::move(labels);
  ck.params = params;
  return ck;
}

// ---------------------------------------------------------------------------

struct BuildVocabArgs {
  std::string input, out;
  std::size_t max_size = 2000;
};

int build_vocab_cmd(const BuildVocabArgs& a) {
  const auto vocab = build_vocab(texts_of(read_unlabeled_jsonl(a.input)), a.max_size);
  vocab.save(a.out);
  std::cout << "wrote " << vocab.size() << " tokens to " << a.out << "\n";
  return kExitOk;
}

struct MaskArgs {
  std::string input, vocab;
  double p_m = 0.15, p_c = 0.7;
  std::size_t k = 1, max_len = 64;
  std::optional<std::uint64_t> seed;
};

int mask_cmd(const MaskArgs& a) {
  require_probability("pm", a.p_m);
  require_probability("pc", a.p_c);
  if (a.k == 0) throw std::invalid_argument("--k must be at least 1");
  const auto vocab = Vocabulary::load(a.vocab);
  const auto examples = read_unlabeled_jsonl(a.input);
  const std::uint64_t seed = resolve_seed(a.seed);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto seq = encode(examples[i], vocab, a.max_len);
    Rng rng = derive_rng(seed, {detail::kMaskStream, i});
    std::cout << format_masked_rows(seq, make_crm_batch(seq, a.k, a.p_m, a.p_c, vocab, rng), vocab) << "\n";
  }
  return kExitOk;
}

struct MakeTaskArgs {
  std::string kind = "separable", out_dir;
  std::size_t train = 1000, eval = 1000, unlabeled = 0;
  std::optional<std::uint64_t> seed;
};

int make_task_cmd(const MakeTaskArgs& a) {
  Rng rng = derive_rng(resolve_seed(a.seed), {0x7a5c});
  const auto task = make_synthetic_task(parse_task_kind(a.kind), {a.train, a.eval, a.unlabeled}, rng);
  std::filesystem::create_directories(a.out_dir);
  const std::filesystem::path dir(a.out_dir);
  write_jsonl((dir / "train.jsonl").string(), task.train_pool, task.labels);
  write_jsonl((dir / "eval.jsonl").string(), task.eval_pool, task.labels);
  if (!task.unlabeled.empty()) write_jsonl((dir / "unlabeled.jsonl").string(), task.unlabeled, task.labels);
  std::cout << task.name << ": " << task.train_pool.size() << " train, " << task.eval_pool.size() << " eval, "
            << task.unlabeled.size() << " unlabeled in " << a.out_dir << "\n";
  return kExitOk;
}

struct PostTrainArgs {
  std::string config, data, out, vocab, init;
};

int post_train_cmd(const PostTrainArgs& a) {
  const RunConfig cfg = load_config(a.config);
  const TrainConfig train = cfg.post_train();
  if (train.objective.kind == ObjectiveKind::kNone)
    throw ConfigError("config objective 'none' has nothing to post-train");
  const auto examples = read_unlabeled_jsonl(a.data);
  if (examples.empty()) throw std::runtime_error(a.data + ": no examples");

  EncoderParams<float> params;
  Vocabulary vocab;
  std::vector<std::string> labels;
  if (!a.init.empty()) {
    auto ck = load_checkpoint(a.init);
    vocab = Vocabulary(ck.vocab);
    labels = ck.labels;
    params = std::move(ck.params);
  } else {
    vocab = a.vocab.empty() ? build_vocab(texts_of(examples), cfg.vocab_size) : Vocabulary::load(a.vocab);
    Rng init = derive_rng(cfg.seed, {detail::kInitStream});
    params = init_params<float>(cfg.encoder(vocab.size(), 2), init);
  }
  std::vector<TokenSequence> seqs;
  for (const auto& x : examples) seqs.push_back(encode(x, vocab, params.config.max_len));
  const auto res = post_train(params, seqs, vocab, train);
  save_checkpoint(make_checkpoint(params, cfg, res.steps, train.epochs, vocab, labels), a.out);
  std::cout << train.objective.str() << ": " << res.steps << " steps, loss " << std::setprecision(6)
            << res.total_trace.front() << " -> " << res.total_trace.back() << "\n";
  return kExitOk;
}

struct FineTuneArgs {
  std::string config, train, dev, init, out, vocab;
};

int fine_tune_cmd(const FineTuneArgs& a) {
  const RunConfig cfg = load_config(a.config);
  LabelSet labels;
  const auto train = read_jsonl(a.train, labels);
  const auto dev = read_jsonl(a.dev, labels);
  if (labels.size() < 2) throw std::runtime_error(a.train + ": need at least two label classes");

  EncoderParams<float> params;
  Vocabulary vocab;
  if (!a.init.empty()) {
    auto ck = load_checkpoint(a.init);
    vocab = Vocabulary(ck.vocab);
    params = std::move(ck.params);
    if (params.config.num_classes != labels.size()) {
      // The head is task-specific; a post-trained encoder gets a fresh one.
      auto cfg_enc = params.config;
      cfg_enc.num_classes = labels.size();
      Rng init = derive_rng(cfg.seed, {detail::kInitStream});
      const auto fresh = init_params<float>(cfg_enc, init);
      params.config = cfg_enc;
      params.classifier_w = fresh.classifier_w;
      params.classifier_b = fresh.classifier_b;
    }
  } else {
    vocab = a.vocab.empty() ? build_vocab(texts_of(train), cfg.vocab_size) : Vocabulary::load(a.vocab);
    Rng init = derive_rng(cfg.seed, {detail::kInitStream});
    params = init_params<float>(cfg.encoder(vocab.size(), labels.size()), init);
  }
  const TrainConfig ft = cfg.fine_tune();
  auto res = fine_tune(params, encode_examples(train, vocab, params.config.max_len),
                       encode_examples(dev, vocab, params.config.max_len), ft);
  save_checkpoint(make_checkpoint(res.best, cfg, res.best_step, ft.epochs, vocab, labels.names()), a.out);
  std::cout << "best dev " << to_string(ft.metric) << " " << std::setprecision(6) << res.best_metric << " at step "
            << res.best_step << " (" << res.evaluations.size() << " evaluations)\n";
  return kExitOk;
}

struct EvaluateArgs {
  std::string ckpt, test, metric;
};

int evaluate_cmd(const EvaluateArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  if (ck.labels.empty()) throw std::runtime_error(a.ckpt + ": checkpoint has no classifier labels; fine-tune it first");
  Metric metric = Metric::kAccuracy;
  if (!a.metric.empty())
    metric = parse_metric(a.metric);
  else if (ck.config.contains("metric"))
    metric = parse_metric(ck.config.at("metric").get<std::string>());
  LabelSet labels(ck.labels);
  const auto test = read_jsonl(a.test, labels, true);
  if (test.empty()) throw std::runtime_error(a.test + ": no examples");
  const auto value = evaluate(ck.params, encode_examples(test, Vocabulary(ck.vocab), ck.params.config.max_len), metric);
  std::cout << to_string(metric) << " " << std::setprecision(6) << value << "\n";
  return kExitOk;
}

struct ExperimentArgs {
  std::string config, method, out;
  std::size_t jobs = 1;
};

int run_experiment_cmd(const ExperimentArgs& a) {
  const RunConfig cfg = load_config(a.config);
  Method::parse(a.method);
  const auto report = run_protocol(cfg, a.method, a.jobs);
  write_text(a.out, report.to_json().dump(2) + "\n");
  std::cout << report.task << " " << report.method << " n=" << report.subset_size << ": "
            << to_string(report.metric) << " " << std::fixed << std::setprecision(4) << report.mean << " +- "
            << report.std_dev << " over " << report.records.size() << " runs\n";
  return kExitOk;
}

struct SweepArgs {
  std::string config, axis, method = "cmlm", out;
  std::vector<double> values;
  std::size_t jobs = 1;
};

int sweep_cmd(const SweepArgs& a) {
  const RunConfig cfg = load_config(a.config);
  const auto axis = parse_sweep_axis(a.axis);
  Method::parse(a.method);
  const auto rows = sweep(cfg, axis, a.values, a.method, a.jobs);
  write_text(a.out, rows.dump(2) + "\n");
  for (const auto& r : rows)
    std::cout << a.axis << "=" << r.at("value").get<double>() << ": " << std::fixed << std::setprecision(4)
              << r.at("mean").get<double>() << " +- " << r.at("std").get<double>() << "\n"
              << std::defaultfloat;
  return kExitOk;
}

struct GradCheckArgs {
  std::string scope = "all";
  int precision = 64;
};

int grad_check_cmd(const GradCheckArgs& a) {
  if (a.precision != 64) throw std::invalid_argument("--precision: only 64-bit audits are supported");
  const auto results = audit::by_scope(a.scope);
  const audit::AuditResult* worst = nullptr;
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-34s %.3e  (tol %.0e)  %s\n", r.name.c_str(), r.check.max_relative_error, r.tolerance,
                r.passed() ? "ok" : "FAIL");
    ok = ok && r.passed();
    if (!worst || r.check.max_relative_error / r.tolerance > worst->check.max_relative_error / worst->tolerance)
      worst = &r;
  }
  if (!ok && worst) {
    std::printf("worst: %s, tensor %zu index %zu, analytic %.9e numeric %.9e\n", worst->name.c_str(),
                worst->check.worst_tensor, worst->check.worst_index, worst->check.analytic, worst->check.numeric);
  }
  return ok ? kExitOk : kExitVerification;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Complementary masked language modeling lab"};
  app.require_subcommand(1);
  int code = kExitOk;

  BuildVocabArgs bv;
  auto* c_bv = app.add_subcommand("build-vocab", "Build a vocabulary file from a JSONL corpus");
  c_bv->add_option("--input", bv.input, "JSONL corpus")->required();
  c_bv->add_option("--out", bv.out, "Output vocabulary file")->required();
  c_bv->add_option("--max-size", bv.max_size, "Maximum vocabulary size, specials included")->capture_default_str();
  c_bv->callback([&] { code = build_vocab_cmd(bv); });

  MaskArgs mk;
  auto* c_mk = app.add_subcommand("mask", "Print complementary masked views of each input line");
  c_mk->add_option("--input", mk.input, "JSONL input")->required();
  c_mk->add_option("--vocab", mk.vocab, "Vocabulary file")->required();
  c_mk->add_option("--pm", mk.p_m, "First-view selection probability")->capture_default_str();
  c_mk->add_option("--pc", mk.p_c, "Complementary selection probability")->capture_default_str();
  c_mk->add_option("--k", mk.k, "Number of complementary views")->capture_default_str();
  c_mk->add_option("--max-len", mk.max_len, "Maximum sequence length")->capture_default_str();
  c_mk->add_option("--seed", mk.seed, "Seed (falls back to CMLM_SEED, then 42)");
  c_mk->callback([&] { code = mask_cmd(mk); });

  MakeTaskArgs mt;
  auto* c_mt = app.add_subcommand("make-task", "Write a synthetic task as JSONL files");
  c_mt->add_option("--kind", mt.kind, "separable or domain-shift")->capture_default_str();
  c_mt->add_option("--train", mt.train, "Labeled training pool size")->capture_default_str();
  c_mt->add_option("--eval", mt.eval, "Evaluation pool size")->capture_default_str();
  c_mt->add_option("--unlabeled", mt.unlabeled, "Unlabeled pool size")->capture_default_str();
  c_mt->add_option("--seed", mt.seed, "Seed (falls back to CMLM_SEED, then 42)");
  c_mt->add_option("--out-dir", mt.out_dir, "Output directory")->required();
  c_mt->callback([&] { code = make_task_cmd(mt); });

  PostTrainArgs pt;
  auto* c_pt = app.add_subcommand("post-train", "Post-train an encoder on unlabeled text");
  c_pt->add_option("--config", pt.config, "Run config (JSON)")->required();
  c_pt->add_option("--data", pt.data, "JSONL text")->required();
  c_pt->add_option("--out", pt.out, "Output checkpoint")->required();
  c_pt->add_option("--vocab", pt.vocab, "Vocabulary file (default: built from --data)");
  c_pt->add_option("--init", pt.init, "Checkpoint to continue from");
  c_pt->callback([&] { code = post_train_cmd(pt); });

  FineTuneArgs ft;
  auto* c_ft = app.add_subcommand("fine-tune", "Fine-tune a classifier and keep the best dev checkpoint");
  c_ft->add_option("--config", ft.config, "Run config (JSON)")->required();
  c_ft->add_option("--train", ft.train, "Labeled JSONL training set")->required();
  c_ft->add_option("--dev", ft.dev, "Labeled JSONL dev set")->required();
  c_ft->add_option("--init", ft.init, "Post-trained checkpoint");
  c_ft->add_option("--vocab", ft.vocab, "Vocabulary file when not starting from --init");
  c_ft->add_option("--out", ft.out, "Output checkpoint")->required();
  c_ft->callback([&] { code = fine_tune_cmd(ft); });

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Score a fine-tuned checkpoint on a labeled set");
  c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_ev->add_option("--test", ev.test, "Labeled JSONL test set")->required();
  c_ev->add_option("--metric", ev.metric, "acc or mcc (default: the checkpoint's config)");
  c_ev->callback([&] { code = evaluate_cmd(ev); });

  ExperimentArgs ex;
  auto* c_ex = app.add_subcommand("run-experiment", "Run the few-shot protocol and write a report");
  c_ex->add_option("--config", ex.config, "Run config (JSON)")->required();
  c_ex->add_option("--method", ex.method, "ft, tapt, cmlm or cssl:<augmenter>")->required();
  c_ex->add_option("--out", ex.out, "Report path")->required();
  c_ex->add_option("--jobs", ex.jobs, "Parallel runs")->capture_default_str();
  c_ex->callback([&] { code = run_experiment_cmd(ex); });

  SweepArgs sw;
  auto* c_sw = app.add_subcommand("sweep", "Run the protocol over values of one parameter");
  c_sw->add_option("--config", sw.config, "Run config (JSON)")->required();
  c_sw->add_option("--axis", sw.axis, "unlabeled_count, K, alpha or p_c")->required();
  c_sw->add_option("--values", sw.values, "Values to sweep")->required()->delimiter(',');
  c_sw->add_option("--method", sw.method, "Method")->capture_default_str();
  c_sw->add_option("--out", sw.out, "Output table (JSON)")->required();
  c_sw->add_option("--jobs", sw.jobs, "Parallel runs")->capture_default_str();
  c_sw->callback([&] { code = sweep_cmd(sw); });

  GradCheckArgs gc;
  auto* c_gc = app.add_subcommand("grad-check", "Finite-difference audit of the backward rules");
  c_gc->add_option("--scope", gc.scope, "primitives, objectives, encoder or all")->capture_default_str();
  c_gc->add_option("--precision", gc.precision, "Floating-point bits")->capture_default_str();
  c_gc->callback([&] { code = grad_check_cmd(gc); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return code;
}
