// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any hard criterion fails. Criterion 9 is soft and reports
// WARN instead of failing.

#include <sys/wait.h>
#include <unistd.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cmlm/experiment.hpp"
#include "cmlm/grad_audit.hpp"

namespace {

using namespace cmlm;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Pinned tolerances and budgets.
constexpr double kRateTol = 0.01;
constexpr double kAnalyticTol = 1e-6;
constexpr double kSummaryTol = 1e-12;
constexpr double kMinTestAccuracy = 0.95;
constexpr double kMinLossReduction = 0.20;
constexpr double kDirectionalSlack = 0.005;
constexpr double kBudgetFast = 10.0;     // criteria 1, 2 (seconds)
constexpr double kBudgetAudit = 60.0;    // criterion 3
constexpr double kBudgetTraining = 300.0;  // criterion 7

enum class Verdict { kPass, kFail, kWarn };

struct Outcome {
  Verdict verdict = Verdict::kFail;
  std::string detail;
};

Outcome pass_if(bool ok, std::string detail) { return {ok ? Verdict::kPass : Verdict::kFail, std::move(detail)}; }

std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << x;
  return os.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Vocabulary word_vocab(std::size_t words) {
  std::string line;
  for (std::size_t i = 0; i < words; ++i) line += "w" + std::to_string(i) + " ";
  return build_vocab({line}, words + Vocabulary::kNumSpecial);
}

TokenSequence random_sequence(std::size_t len, const Vocabulary& v, Rng& rng) {
  std::vector<int> ids = {Vocabulary::kBos};
  for (std::size_t i = 1; i < len; ++i)
    ids.push_back(Vocabulary::kNumSpecial + static_cast<int>(uniform_index(rng, v.num_regular())));
  return make_sequence(std::move(ids));
}

// 1. Complementarity over 10,000 draws.
Outcome complementarity() {
  const auto t0 = Clock::now();
  const auto v = word_vocab(100);
  Rng rng(1001);
  std::size_t violations = 0, complement_misses = 0, draws = 0;
  for (; draws < 10000; ++draws) {
    const std::size_t len = 4 + uniform_index(rng, 61);
    const double p_c = 0.1 * static_cast<double>(1 + draws % 10);
    const auto seq = random_sequence(len, v, rng);
    const auto b = make_crm_batch(seq, 1, 0.15, p_c, v, rng);
    for (std::size_t i = 0; i < len; ++i) {
      if (b.anchor.pattern.selected[i] && b.views[0].pattern.selected[i]) ++violations;
      if (draws % 10 == 9 && b.views[0].pattern.selected[i] != (seq.maskable[i] && !b.anchor.pattern.selected[i]))
        ++complement_misses;
    }
  }
  const double secs = seconds_since(t0);
  return pass_if(violations == 0 && complement_misses == 0 && secs < kBudgetFast,
                 std::to_string(draws) + " draws, " + std::to_string(violations) + " overlaps, " +
                     std::to_string(complement_misses) + " complement misses at p_c=1, " + fmt(secs, 3) + " s");
}

// 2. Selection and replacement rates.
Outcome masking_statistics() {
  const auto t0 = Clock::now();
  const auto v = word_vocab(500);
  Rng data(2002), rng(2003);
  std::size_t positions = 0, drm_sel = 0, crm_sel = 0, n_mask = 0, n_keep = 0, n_rand = 0;
  while (positions < 200000) {
    const auto seq = random_sequence(64, v, data);
    positions += seq.maskable_count();
    const auto b = make_crm_batch(seq, 1, 0.15, 0.7, v, rng);
    drm_sel += b.anchor.pattern.selected_count();
    crm_sel += b.views[0].pattern.selected_count();
    for (const auto* m : {&b.anchor, &b.views[0]})
      for (const auto& a : m->pattern.action)
        if (a) (*a == MaskAction::kMask ? n_mask : *a == MaskAction::kKeep ? n_keep : n_rand)++;
  }
  const double n = static_cast<double>(positions), acts = static_cast<double>(n_mask + n_keep + n_rand);
  const double drm_rate = drm_sel / n, crm_rate = crm_sel / n;
  const double fm = n_mask / acts, fk = n_keep / acts, fr = n_rand / acts;
  const double secs = seconds_since(t0);
  const bool ok = std::abs(drm_rate - 0.15) <= kRateTol && std::abs(crm_rate - 0.85 * 0.7) <= kRateTol &&
                  std::abs(fm - 0.8) <= kRateTol && std::abs(fk - 0.1) <= kRateTol && std::abs(fr - 0.1) <= kRateTol &&
                  secs < kBudgetFast;
  return pass_if(ok, std::to_string(positions) + " positions: drm " + fmt(drm_rate) + ", crm " + fmt(crm_rate) +
                         " (want 0.595), split " + fmt(fm) + "/" + fmt(fk) + "/" + fmt(fr) + ", " + fmt(secs, 3) + " s");
}

// 3. Finite-difference audits.
Outcome gradient_audits() {
  const auto t0 = Clock::now();
  std::size_t checked = 0, failed = 0;
  double worst_prim = 0.0, worst_comp = 0.0;
  std::string worst_name;
  for (const auto& r : audit::primitives()) {
    ++checked;
    worst_prim = std::max(worst_prim, r.check.max_relative_error);
    if (r.check.max_relative_error >= audit::kPrimitiveTolerance) ++failed, worst_name = r.name;
  }
  for (const auto* group : {"objectives", "encoder"})
    for (const auto& r : audit::by_scope(group)) {
      ++checked;
      worst_comp = std::max(worst_comp, r.check.max_relative_error);
      if (r.check.max_relative_error >= audit::kCompositeTolerance) ++failed, worst_name = r.name;
    }
  const double secs = seconds_since(t0);
  return pass_if(failed == 0 && secs < kBudgetAudit,
                 std::to_string(checked) + " audits, worst primitive " + fmt(worst_prim, 3) + ", worst composite " +
                     fmt(worst_comp, 3) + (failed ? ", failing " + worst_name : "") + ", " + fmt(secs, 3) + " s");
}

EncoderConfig probe_encoder(std::size_t vocab) {
  EncoderConfig c;
  c.layers = 2, c.heads = 2, c.hidden = 8, c.ffn = 16, c.vocab = vocab, c.max_len = 8, c.dropout = 0.0;
  return c;
}

// 4. Stop-gradient: the target encoder only reaches the loss through
// stop_gradient, so every one of its gradients must be bitwise zero.
Outcome stop_gradient_semantics() {
  Rng rng(4004);
  const auto online = init_params<double>(probe_encoder(32), rng);
  const auto target = init_params<double>(probe_encoder(32), rng);
  const std::vector<std::vector<int>> seqs = {{0, 7, 9, 11, 3, 3}, {0, 20, 5, 6, 8, 3}};
  std::vector<std::vector<ag::Tensor<double>>> on(2), tg(2);
  for (const auto& ids : seqs) {
    for (std::size_t view = 0; view < 2; ++view) {
      auto ids_v = ids;
      if (view == 1) ids_v[1] = Vocabulary::kMask;
      on[view].push_back(pool_first(encode_tokens(online, std::span<const int>(ids_v))));
      tg[view].push_back(pool_first(encode_tokens(target, std::span<const int>(ids_v))));
    }
  }
  ag::backward(simsiam_loss(stack_views(on), stack_views(tg), online.predictor_w1, online.predictor_w2));
  std::size_t nonzero = 0, entries = 0;
  for (const auto& [name, t] : target.named()) {
    if (!t.has_grad()) {
      entries += t.size();
      continue;
    }
    for (double g : t.grad()) {
      ++entries;
      if (std::bit_cast<std::uint64_t>(g) != 0) ++nonzero;
    }
  }
  double online_mass = 0.0;
  for (const auto& [name, t] : online.named())
    if (t.has_grad())
      for (double g : t.grad()) online_mass += std::abs(g);
  return pass_if(nonzero == 0 && online_mass > 0.0,
                 std::to_string(entries) + " target-encoder gradient entries, " + std::to_string(nonzero) +
                     " non-zero; online gradient mass " + fmt(online_mass, 3));
}

// 5. Closed-form loss values.
Outcome analytic_losses() {
  using TD = ag::Tensor<double>;
  std::vector<std::string> failures;
  auto check = [&](const std::string& what, double got, double want) {
    if (!(std::abs(got - want) <= kAnalyticTol)) failures.push_back(what + "=" + fmt(got, 10) + " want " + fmt(want, 10));
  };
  check("simclr(B=1)", simclr_loss(ContrastiveBatch<double>{{TD::from({1, 3}, {1, 2, 3}), TD::from({1, 3}, {-1, 0.5, 2})}}, 0.1).item(), 0.0);
  for (std::size_t B : {2u, 4u, 8u}) {
    std::vector<double> v(B * 4);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.25 * static_cast<double>(i % 4) + 0.5;
    const auto batch = ContrastiveBatch<double>{{TD::from({B, 4}, v), TD::from({B, 4}, v)}};
    check("simclr(B=" + std::to_string(B) + ")", simclr_loss(batch, 0.1).item(), std::log(static_cast<double>(B)));
  }
  const std::size_t V = 32;
  const std::vector<TD> hidden = {TD::from({4, 8}, std::vector<double>(32, 0.3))};
  const std::vector<std::vector<int>> labels = {{kIgnoreLabel, 6, 17, 31}};
  check("mlm(uniform)", mlm_loss(hidden, labels, TD::zeros({V, 8}), TD::zeros({V})).item(), std::log(static_cast<double>(V)));
  const auto eye = TD::from({2, 2}, {1, 0, 0, 1});
  const auto aligned = ContrastiveBatch<double>{{TD::from({1, 2}, {2, 0}), TD::from({1, 2}, {5, 0})}};
  const auto opposed = ContrastiveBatch<double>{{TD::from({1, 2}, {2, 0}), TD::from({1, 2}, {-2, 0})}};
  check("simsiam(aligned)", simsiam_pairs(aligned, aligned, eye, eye)[0], std::exp(-1.0));
  check("simsiam(opposed)", simsiam_pairs(opposed, opposed, eye, eye)[0], std::exp(1.0));
  std::string detail = failures.empty() ? "simclr B=1 and log B for B in {2,4,8}, mlm ln V, simsiam e^-1 and e" : "";
  for (const auto& f : failures) detail += f + "; ";
  return pass_if(failures.empty(), detail);
}

// A 50-sequence corpus with topical co-occurrence.
std::vector<std::string> toy_lines() {
  std::vector<std::string> out;
  Rng rng(5005);
  const std::vector<std::vector<std::string>> topics = {{"red", "green", "blue", "yellow", "purple"},
                                                        {"cat", "dog", "bird", "fish", "horse"},
                                                        {"run", "walk", "swim", "fly", "jump"}};
  for (int i = 0; i < 50; ++i) {
    const auto& t = topics[static_cast<std::size_t>(i) % topics.size()];
    std::string s;
    for (int w = 0; w < 8; ++w) s += t[uniform_index(rng, t.size())] + " ";
    out.push_back(s);
  }
  return out;
}

struct ToyCorpus {
  Vocabulary vocab;
  std::vector<TokenSequence> data;
  EncoderConfig enc;
};

ToyCorpus toy_corpus() {
  ToyCorpus t;
  const auto lines = toy_lines();
  t.vocab = build_vocab(lines, 64);
  for (const auto& l : lines) t.data.push_back(encode({l, std::nullopt, 0}, t.vocab, 12));
  t.enc.layers = 2, t.enc.heads = 2, t.enc.hidden = 32, t.enc.ffn = 64, t.enc.vocab = t.vocab.size(), t.enc.max_len = 12;
  return t;
}

TrainConfig toy_train() {
  TrainConfig c;
  c.lr = 3e-3;
  c.epochs = 5;
  c.batch_size = 8;
  c.seed = 42;
  return c;
}

Checkpoint as_checkpoint(const EncoderParams<float>& p, const Vocabulary& v, std::uint64_t step) {
  Checkpoint ck;
  ck.step = step;
  ck.vocab = v.tokens();
  ck.params = p;
  return ck;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path work_dir() {
  static const fs::path d = [] {
    auto p = fs::temp_directory_path() / ("cmlm_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return d;
}

// 6. TAPT equals CMLM with alpha = 0.
Outcome tapt_equivalence() {
  const auto toy = toy_corpus();
  auto tapt = toy_train(), cmlm = toy_train();
  tapt.objective = Objective::parse("tapt");
  cmlm.alpha = 0.0;
  Rng ra(6006), rb(6006);
  auto a = init_params<float>(toy.enc, ra), b = init_params<float>(toy.enc, rb);
  const auto ta = post_train(a, toy.data, toy.vocab, tapt);
  const auto tb = post_train(b, toy.data, toy.vocab, cmlm);
  const auto pa = work_dir() / "tapt.ckpt", pb = work_dir() / "cmlm0.ckpt";
  save_checkpoint(as_checkpoint(a, toy.vocab, ta.steps), pa.string());
  save_checkpoint(as_checkpoint(b, toy.vocab, tb.steps), pb.string());
  const bool traces = ta.total_trace == tb.total_trace && ta.mlm_trace == tb.mlm_trace;
  const bool ckpts = slurp(pa) == slurp(pb);
  return pass_if(traces && ckpts, std::to_string(ta.steps) + " steps, traces " + (traces ? "identical" : "differ") +
                                      ", checkpoints " + (ckpts ? "byte-identical" : "differ"));
}

// 7. Fine-tuning sanity on the separable task, and CMLM loss reduction.
Outcome training_sanity() {
  const auto t0 = Clock::now();
  Rng task_rng(7007);
  const auto task = make_synthetic_task(TaskKind::kSeparable, {200, 400, 0}, task_rng);
  const auto vocab = build_vocab(task.corpus(), 2000);
  const auto train = encode_examples(task.train_pool, vocab, 16);
  const std::vector<LabeledExample> dev_x(task.eval_pool.begin(), task.eval_pool.begin() + 200);
  const std::vector<LabeledExample> test_x(task.eval_pool.begin() + 200, task.eval_pool.end());
  EncoderConfig enc;
  enc.layers = 2, enc.heads = 2, enc.hidden = 32, enc.ffn = 64, enc.vocab = vocab.size(), enc.max_len = 16;
  TrainConfig ft;
  ft.lr = 1e-3;
  ft.epochs = 10;
  ft.batch_size = 16;
  ft.checkpoint_interval = 20;
  ft.seed = 42;
  Rng init(7008);
  auto params = init_params<float>(enc, init);
  const auto res = fine_tune(params, train, encode_examples(dev_x, vocab, 16), ft);
  const double test_acc = evaluate(res.best, encode_examples(test_x, vocab, 16), Metric::kAccuracy);

  const auto toy = toy_corpus();
  Rng toy_init(7009);
  auto toy_params = init_params<float>(toy.enc, toy_init);
  const auto post = post_train(toy_params, toy.data, toy.vocab, toy_train());
  const std::size_t window = (toy.data.size() + 7) / 8;  // one epoch of steps
  const auto& tr = post.total_trace;
  const double first = std::accumulate(tr.begin(), tr.begin() + window, 0.0) / window;
  const double last = std::accumulate(tr.end() - window, tr.end(), 0.0) / window;
  const double reduction = 1.0 - last / first;
  const double secs = seconds_since(t0);
  return pass_if(test_acc >= kMinTestAccuracy && reduction >= kMinLossReduction && secs < kBudgetTraining,
                 "separable test acc " + fmt(test_acc) + " (best dev " + fmt(res.best_metric) + " at step " +
                     std::to_string(res.best_step) + "), CMLM smoothed loss " + fmt(first) + " -> " + fmt(last) + " (-" +
                     fmt(100.0 * reduction, 3) + "%), " + fmt(secs, 3) + " s");
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + CMLM_CLI_PATH + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 8. Protocol fidelity through the CLI.
Outcome protocol_fidelity() {
  const auto dir = work_dir();
  {
    std::ofstream(dir / "protocol.json") << R"({"task": "separable", "subset_size": 20, "train_pool_size": 200,
      "eval_pool_size": 300, "dev_size": 100, "vocab_size": 200, "layers": 1, "heads": 2, "hidden": 16, "ffn": 32,
      "max_len": 16, "lr": 0.001, "epochs": 5, "post_lr": 0.001, "post_epochs": 2, "checkpoint_interval": 5})";
  }
  const std::string env = "SOURCE_DATE_EPOCH=1700000000";
  const auto first = dir / "report.json", second = dir / "report_rerun.json", echoed = dir / "echoed.json";
  if (run_cli("run-experiment --config " + (dir / "protocol.json").string() + " --method cmlm --jobs 4 --out " +
                  first.string(), env) != 0)
    return {Verdict::kFail, "run-experiment failed"};
  const auto report = nlohmann::json::parse(slurp(first));
  std::ofstream(echoed) << report.at("config").dump(2);
  if (run_cli("run-experiment --config " + echoed.string() + " --method cmlm --jobs 1 --out " + second.string(), env) != 0)
    return {Verdict::kFail, "rerun from echoed config failed"};

  const auto& recs = report.at("records");
  std::vector<double> values;
  std::vector<std::pair<std::size_t, std::uint64_t>> keys;
  for (const auto& r : recs) {
    values.push_back(r.at("value").get<double>());
    keys.emplace_back(r.at("subset").get<std::size_t>(), r.at("seed").get<std::uint64_t>());
  }
  bool grid = recs.size() == 15;
  for (std::size_t i = 0; grid && i < keys.size(); ++i)
    grid = keys[i].first == i / 3 && keys[i].second == std::vector<std::uint64_t>{31, 42, 53}[i % 3];
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(values.size()));
  const double dm = std::abs(mean - report.at("mean").get<double>()), ds = std::abs(sd - report.at("std").get<double>());
  const bool bytes = slurp(first) == slurp(second);
  return pass_if(grid && dm <= kSummaryTol && ds <= kSummaryTol && bytes,
                 std::to_string(recs.size()) + " records on the subset x seed grid" + (grid ? "" : " (grid mismatch)") +
                     ", |mean diff| " + fmt(dm, 3) + ", |std diff| " + fmt(ds, 3) + ", rerun from echoed config " +
                     (bytes ? "byte-identical" : "differs"));
}

// 9. Directional check on the domain-shift task (soft).
Outcome directional_check() {
  const auto t0 = Clock::now();
  auto c = config_from_json({{"task", "domain-shift"}, {"subset_size", 100}, {"dev_size", 200},
                             {"eval_pool_size", 600}, {"unlabeled_pool_size", 1000}, {"unlabeled_count", 1000},
                             {"hidden", 16}, {"heads", 2}, {"ffn", 32}, {"layers", 1}, {"max_len", 16},
                             {"lr", 2e-3}, {"epochs", 15}, {"post_lr", 2e-3}, {"post_epochs", 2},
                             {"checkpoint_interval", 10}});
  const std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  const auto ft = run_protocol(c, "ft", jobs);
  const auto cm = run_protocol(c, "cmlm", jobs);
  const bool ok = cm.mean >= ft.mean - kDirectionalSlack;
  return {ok ? Verdict::kPass : Verdict::kWarn,
          "FT " + fmt(ft.mean) + " +- " + fmt(ft.std_dev, 3) + ", CMLM " + fmt(cm.mean) + " +- " + fmt(cm.std_dev, 3) +
              " over " + std::to_string(cm.records.size()) + " runs each, " + fmt(seconds_since(t0), 3) + " s"};
}

// 10. Checkpoint round trip and rejection of corrupted files.
Outcome checkpoint_round_trip() {
  const auto toy = toy_corpus();
  Rng rng(1010);
  auto ck = as_checkpoint(init_params<float>(toy.enc, rng), toy.vocab, 3);
  ck.labels = {"a", "b"};
  const auto path = work_dir() / "probe.ckpt";
  save_checkpoint(ck, path.string());
  const auto back = load_checkpoint(path.string());
  std::size_t mismatched = 0, compared = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto& ids = toy.data[i].ids;
    const auto a = classify(ck.params, pool_first(encode_tokens(ck.params, std::span<const int>(ids))));
    const auto b = classify(back.params, pool_first(encode_tokens(back.params, std::span<const int>(ids))));
    for (std::size_t j = 0; j < a.size(); ++j, ++compared)
      if (std::bit_cast<std::uint32_t>(a[j]) != std::bit_cast<std::uint32_t>(b[j])) ++mismatched;
  }
  auto rejects = [&](auto corrupt, auto error_tag) {
    auto bytes = slurp(path);
    corrupt(bytes);
    const auto bad = work_dir() / "corrupt.ckpt";
    std::ofstream(bad, std::ios::binary) << bytes;
    try {
      load_checkpoint(bad.string());
    } catch (const decltype(error_tag)&) {
      return true;
    } catch (...) {
      return false;
    }
    return false;
  };
  const bool magic = rejects([](std::string& b) { b[3] = 'X'; }, CheckpointFormatError(""));
  const bool version = rejects([](std::string& b) { b[8] = 9; }, CheckpointVersionError(""));
  return pass_if(mismatched == 0 && magic && version,
                 std::to_string(compared) + " probe logits, " + std::to_string(mismatched) + " differ; bad magic " +
                     (magic ? "-> CheckpointFormatError" : "not rejected") + ", bad version " +
                     (version ? "-> CheckpointVersionError" : "not rejected"));
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"complementarity", complementarity},
      {"masking statistics", masking_statistics},
      {"gradient audits", gradient_audits},
      {"stop-gradient", stop_gradient_semantics},
      {"analytic losses", analytic_losses},
      {"tapt equivalence", tapt_equivalence},
      {"training sanity", training_sanity},
      {"protocol fidelity", protocol_fidelity},
      {"directional few-shot (soft)", directional_check},
      {"checkpoint round trip", checkpoint_round_trip},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {Verdict::kFail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.verdict == Verdict::kPass ? "PASS" : o.verdict == Verdict::kWarn ? "WARN" : "FAIL";
    if (o.verdict == Verdict::kFail) ++failures;
    std::cout << tag << " criterion " << (i + 1) << " (" << criteria[i].first << "): " << o.detail << std::endl;
  }
  std::error_code ec;
  fs::remove_all(work_dir(), ec);
  std::cout << (failures == 0 ? "acceptance: all hard criteria pass" : "acceptance: " + std::to_string(failures) + " failing")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
