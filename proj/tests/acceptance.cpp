// Acceptance checks for the whole framework. Prints one PASS/FAIL line per
// criterion. Exit status is 0 when every failing criterion was named with
// --allow-fail, 1 otherwise.

#include "mpo/digest.hpp"
#include "mpo/metrics.hpp"
#include "mpo/objectives.hpp"
#include "mpo/prefset.hpp"
#include "mpo/synthtask.hpp"
#include "mpo/trainer.hpp"

#include "fd_oracle.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

#include <CLI11.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace mpo {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

void add_noise(Policy& p, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (const auto& nt : p.parameters()) {
    Tensor t = nt.tensor;
    Matrix m = t.value();
    for (Index i = 0; i < m.size(); ++i) m.data()[i] += n(rng);
    t.assign(m);
  }
}

TokenSequence random_response(const Vocabulary& v, std::mt19937_64& rng, std::size_t max_speech) {
  std::vector<TokenId> ids(rng() % (max_speech + 1));
  for (auto& t : ids) t = v.speech_begin() + static_cast<TokenId>(rng() % v.speech_count);
  ids.push_back(v.eos());
  return response(ids);
}

PreferencePairBatch random_pairs(const Vocabulary& v, std::size_t n, std::size_t max_prompt,
                                 std::size_t max_speech, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PreferencePairBatch b;
  while (b.size() < n) {
    std::vector<TokenId> x(1 + rng() % max_prompt);
    for (auto& t : x) t = static_cast<TokenId>(rng() % v.text_count);
    PreferencePair p{prompt(x), random_response(v, rng, max_speech),
                     random_response(v, rng, max_speech)};
    if (p.y_w != p.y_l) b.push_back(p);
  }
  return b;
}

// ---------------------------------------------------------------------------
// 1. Gradients of ce, dpo and mpo against central differences.

constexpr double kFdEps = 1e-5;
constexpr double kFdRel = 1e-4;
constexpr double kFdAbs = 1e-9;  // floor for entries whose gradient is ~0

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const ArchConfig arch;  // desk architecture
  Policy model = Policy::build(arch);
  add_noise(model, 0.05, 101);
  Policy ref_src = model.clone();
  add_noise(ref_src, 0.05, 102);
  const Policy ref = ref_src.clone_frozen();
  const auto batch = random_pairs(arch.vocab, 4, 3, 2, 103);
  const double beta = 0.1, lambda = 10.0;

  oracle::FiniteDifferences fd(model, ref, batch, beta, lambda);
  const auto numeric = fd.gradients(kFdEps, 128);

  const auto winners = preferred_responses(batch);
  const std::vector<std::function<Tensor()>> losses = {
      [&] { return ce_loss(model, winners); },
      [&] { return dpo_loss(model, ref, batch, beta); },
      [&] { return mpo_loss(model, ref, batch, {}, beta, lambda).loss; }};
  const char* names[] = {"ce", "dpo", "mpo"};
  std::size_t bad = 0, checked = 0;
  std::string per_loss;
  for (std::size_t k = 0; k < losses.size(); ++k) {
    model.zero_grad();
    backward(losses[k]());
    const auto params = model.parameters();
    double worst = 0.0;
    for (std::size_t p = 0; p < params.size(); ++p) {
      const Matrix& a = params[p].tensor.grad();
      const Matrix& n = numeric[k][p];
      for (Index i = 0; i < a.size(); ++i) {
        const double x = a.data()[i], y = n.data()[i];
        const double err = std::abs(x - y);
        const double tol = kFdRel * std::max(std::abs(x), std::abs(y)) + kFdAbs;
        if (err > tol) ++bad;
        worst = std::max(worst, err / tol);
        ++checked;
      }
    }
    per_loss += fmt(" %s worst err/tol %.2f;", names[k], worst);
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = bad == 0 && secs < 60.0;
  o.detail = fmt("%zu entries (%zu params x 3 losses), %zu outside rel %.0e + abs %.0e;",
                 checked, model.parameter_count(), bad, kFdRel, kFdAbs) +
             per_loss + fmt(" %.1fs (limit 60s)", secs);
  return o;
}

// ---------------------------------------------------------------------------
// 2. DPO identities at the reference.

Outcome dpo_identities() {
  const ArchConfig arch;
  Policy model = Policy::build(arch);
  add_noise(model, 0.05, 201);
  const Policy ref = model.clone_frozen();
  const auto batch = random_pairs(arch.vocab, 100, 12, 12, 202);
  const double loss = dpo_loss(model, ref, batch, 0.1).item();
  double worst_reward = 0.0;
  for (const auto& p : batch) {
    worst_reward = std::max({worst_reward, std::abs(implicit_reward(model, ref, p.x, p.y_w, 0.1)),
                             std::abs(implicit_reward(model, ref, p.x, p.y_l, 0.1))});
  }
  std::mt19937_64 rng(203);
  std::uniform_real_distribution<double> u(-40.0, 40.0), b(0.01, 5.0);
  std::size_t swap_mismatch = 0;
  for (int i = 0; i < 100000; ++i) {
    const double w = u(rng), l = u(rng), beta = b(rng);
    if (bt_probability(w, l, beta) != 1.0 - bt_probability(l, w, beta)) ++swap_mismatch;
  }
  Outcome o;
  const double dev = std::abs(loss - std::log(2.0));
  o.pass = dev <= 1e-6 && worst_reward <= 1e-9 && swap_mismatch == 0;
  o.detail = fmt("|dpo - ln2| = %.1e (tol 1e-6), max |reward| = %.1e (tol 1e-9), "
                 "swap mismatches %zu/100000 (exact)",
                 dev, worst_reward, swap_mismatch);
  return o;
}

// ---------------------------------------------------------------------------
// 3-5. Desk-scale training runs.

double g_run_beta = 0.35;  // beta for every desk run; --beta overrides
constexpr std::size_t kTrainItems = 500, kHeldoutItems = 100, kPrefItems = 500;

struct DeskRun {
  EvalRecord start, end;
  double final_dpo = 0.0;  // mean over the last 100 steps
  double seconds = 0.0;
  std::size_t pairs = 0;
};

struct DeskRuns {
  DeskRun dpo_only, mpo, cer_only;
  double sft_seconds = 0.0;
};

DeskRun preference_run(Stage stage, const Policy& sft, std::span<const PrefsetRecord> data,
                       const EvalContext& ctx) {
  TrainingConfig c = TrainingConfig::defaults(stage);
  c.beta = g_run_beta;
  const auto t0 = Clock::now();
  const TrainResult r = run_preference_stage(c, sft, data, &ctx);
  DeskRun out;
  out.seconds = seconds_since(t0);
  out.start = r.log.evals.front();
  out.end = r.log.evals.back();
  const std::size_t n = std::min<std::size_t>(100, r.log.steps.size());
  for (std::size_t i = r.log.steps.size() - n; i < r.log.steps.size(); ++i) {
    out.final_dpo += r.log.steps[i].dpo / static_cast<double>(n);
  }
  for (const auto& rec : data) out.pairs += rec.example ? 1 : 0;
  return out;
}

DeskRuns desk_runs() {
  const SynthWorld world = make_world(1);
  const auto all = make_corpus(world, kTrainItems + kHeldoutItems + kPrefItems, 11);
  const std::span<const CorpusItem> items(all);
  const auto train = items.first(kTrainItems);
  const auto heldout = items.subspan(kTrainItems, kHeldoutItems);
  const auto pref = items.subspan(kTrainItems + kHeldoutItems, kPrefItems);

  DeskRuns out;
  auto t0 = Clock::now();
  const TrainingConfig sft_config = TrainingConfig::defaults(Stage::Sft);
  const Policy sft = run_sft(sft_config, train).policy;
  out.sft_seconds = seconds_since(t0);
  std::printf("  SFT: %d steps in %.1fs\n", sft_config.steps, out.sft_seconds);

  const TrainingConfig pc = TrainingConfig::defaults(Stage::Mpo);
  t0 = Clock::now();
  const auto cands = generate_candidates(sft, world, pref, static_cast<std::size_t>(pc.n_candidates),
                                         pc.sampling, pc.seed);
  std::printf("  candidates: %zu prompts x %d in %.1fs\n", pref.size(), pc.n_candidates,
              seconds_since(t0));
  const auto multi = build_dataset(cands, Selection::Mpo, pc.constraints);
  const auto cer_only = build_dataset(cands, Selection::Cer, pc.constraints);

  const EvalContext ctx{&world, heldout};
  out.dpo_only = preference_run(Stage::DpoOnly, sft, multi, ctx);
  out.mpo = preference_run(Stage::Mpo, sft, multi, ctx);
  out.cer_only = preference_run(Stage::Mpo, sft, cer_only, ctx);
  for (const auto* r : {&out.dpo_only, &out.mpo, &out.cer_only}) {
    std::printf("  run (%zu pairs, %.1fs): start cer %.4f sim %.4f pros %.4f ce %.4f -> "
                "end cer %.4f sim %.4f pros %.4f ce %.4f, final dpo %.4f\n",
                r->pairs, r->seconds, r->start.mean.cer, r->start.mean.spk_sim,
                r->start.mean.prosody_rmse, r->start.heldout_ce, r->end.mean.cer,
                r->end.mean.spk_sim, r->end.mean.prosody_rmse, r->end.heldout_ce, r->final_dpo);
  }
  return out;
}

Outcome degradation(const DeskRun& r) {
  const double ratio = r.end.heldout_ce / r.start.heldout_ce;
  Outcome o;
  o.pass = r.final_dpo < 0.05 && ratio >= 2.0 && r.end.mean.cer > r.start.mean.cer &&
           r.seconds < 600.0;
  o.detail = fmt("dpo-only: final dpo %.4f (< 0.05), held-out CE %.3f -> %.3f = %.2fx (>= 2x), "
                 "CER %.4f -> %.4f (must rise), %.0fs (limit 600s)",
                 r.final_dpo, r.start.heldout_ce, r.end.heldout_ce, ratio, r.start.mean.cer,
                 r.end.mean.cer, r.seconds);
  return o;
}

Outcome rescue(const DeskRun& r) {
  const double ratio = r.end.heldout_ce / r.start.heldout_ce;
  Outcome o;
  o.pass = ratio <= 1.5 && r.end.mean.cer <= r.start.mean.cer && r.seconds < 600.0;
  o.detail = fmt("mpo lambda 10: held-out CE %.3f -> %.3f = %.2fx (<= 1.5x), CER %.4f -> %.4f "
                 "(must not rise), %.0fs (limit 600s)",
                 r.start.heldout_ce, r.end.heldout_ce, ratio, r.start.mean.cer, r.end.mean.cer,
                 r.seconds);
  return o;
}

int improved(const DeskRun& r) {
  int n = 0;
  for (Metric m : kAllMetrics) {
    n += better(m, r.end.mean.get(m), r.start.mean.get(m)) ? 1 : 0;
  }
  return n;
}

Outcome multidimensional(const DeskRuns& r) {
  const int mpo = improved(r.mpo), cer = improved(r.cer_only);
  Outcome o;
  o.pass = mpo >= 2 && mpo > cer;
  o.detail = fmt("metrics improved vs SFT: mpo %d/3 (cer %+.4f, sim %+.4f, prosody %+.4f), "
                 "cer-only %d/3; need mpo >= 2 and mpo > cer-only",
                 mpo, r.mpo.end.mean.cer - r.mpo.start.mean.cer,
                 r.mpo.end.mean.spk_sim - r.mpo.start.mean.spk_sim,
                 r.mpo.end.mean.prosody_rmse - r.mpo.start.mean.prosody_rmse, cer);
  return o;
}

// ---------------------------------------------------------------------------
// 6. Preference sets against the exhaustive oracle.

Outcome prefset_oracle() {
  std::mt19937_64 rng(601);
  std::uniform_int_distribution<std::size_t> count(2, 10);
  std::uniform_int_distribution<int> cer(0, 3), sim(0, 10), pros(0, 6);
  const std::vector<Metric> all(kAllMetrics.begin(), kAllMetrics.end());
  const std::vector<Metric> two = {Metric::Cer, Metric::SpeakerSim};
  std::size_t mismatches = 0, accepted = 0;
  for (int t = 0; t < 1000; ++t) {
    // Coarse values so ties, overlaps and zero CER are common.
    std::vector<MetricScores> table(count(rng));
    for (auto& x : table) {
      x.cer = cer(rng) == 0 ? 0.0 : 0.25 * cer(rng);
      x.spk_sim = 0.1 * sim(rng) - 0.2;
      x.prosody_rmse = 0.05 * pros(rng);
    }
    const Constraints c = t % 2 == 0 ? Constraints{} : Constraints::none();
    const auto& metrics = t % 3 == 0 ? two : all;
    const auto want = oracle::preference_set(table, metrics, c);
    const auto got = build_preference_set(table, metrics, c);
    bool same = want.accepted == got.example.has_value();
    if (same && got.example) {
      ++accepted;
      const auto& ex = *got.example;
      same = ex.w_set == want.w_set && ex.l_set == want.l_set &&
             ex.provenance.size() == want.provenance.size();
      for (std::size_t i = 0; same && i < want.provenance.size(); ++i) {
        same = ex.provenance[i].metric == want.provenance[i].metric &&
               ex.provenance[i].w == want.provenance[i].w &&
               ex.provenance[i].l == want.provenance[i].l;
      }
    }
    mismatches += same ? 0 : 1;
  }
  Outcome o;
  o.pass = mismatches == 0;
  o.detail = fmt("1000 tables of 2-10 candidates (%zu accepted), %zu mismatches (need 0)",
                 accepted, mismatches);
  return o;
}

// ---------------------------------------------------------------------------
// 7. Metric oracles.

Outcome metric_oracles() {
  std::mt19937_64 rng(701);
  std::uniform_int_distribution<std::size_t> len(0, 16);
  std::uniform_int_distribution<int> sym(0, 5);
  std::size_t cer_mismatch = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<int> a(len(rng)), b(1 + len(rng));
    for (auto& x : a) x = sym(rng);
    for (auto& x : b) x = sym(rng);
    const double want =
        static_cast<double>(oracle::edit_distance(a, b)) / static_cast<double>(b.size());
    if (cer(a, b) != want) ++cer_mismatch;
  }
  std::uniform_real_distribution<double> f0(80.0, 400.0);
  double worst = 0.0;
  std::size_t dtw_cases = 0, dtw_mismatch = 0;
  for (std::size_t n = 1; n <= 6; ++n) {
    for (std::size_t m = 1; m <= 6; ++m) {
      for (int t = 0; t < 20; ++t) {
        std::vector<double> g(n), r(m);
        for (auto& x : g) x = f0(rng);
        for (auto& x : r) x = f0(rng);
        const auto bf = oracle::dtw_brute_force(g, r);
        const double got = log_f0_rmse_dtw(g, r);
        double best = INFINITY;
        for (double e : bf.rmse_at_min) best = std::min(best, std::abs(e - got));
        worst = std::max(worst, best);
        dtw_mismatch += best <= 1e-10 ? 0 : 1;
        ++dtw_cases;
      }
    }
  }
  Outcome o;
  o.pass = cer_mismatch == 0 && dtw_mismatch == 0;
  o.detail = fmt("CER: %zu/1000 mismatches (exact); DTW: %zu contour pairs over lengths 1-6, "
                 "worst |diff| %.1e (tol 1e-10), %zu mismatches",
                 cer_mismatch, dtw_cases, worst, dtw_mismatch);
  return o;
}

// ---------------------------------------------------------------------------
// 8. KL estimator.

ArchConfig toy_arch() {
  ArchConfig a;
  a.vocab = Vocabulary{5, 8};
  a.layers = 1;
  a.dim = 8;
  a.heads = 2;
  a.context = 24;
  a.max_response = 2;  // at most one speech token, then EOS
  a.seed = 3;
  return a;
}

Outcome kl_sanity() {
  const ArchConfig desk;
  Policy model = Policy::build(desk);
  add_noise(model, 0.05, 801);
  const std::vector<TokenSequence> prompts = {prompt({1, 2, 3}), prompt({4, 5}), prompt({7})};
  const auto self = kl_estimate(model, model.clone_frozen(), prompts, 100, 802);
  const bool self_ok = std::abs(self.mean) <= 3.0 * self.stderr_ + 1e-12;

  const ArchConfig a = toy_arch();
  Policy p = Policy::build(a);
  Tensor head = p.parameter("head");
  head.assign(head.value() * 100.0);
  const Policy ref = p.clone_frozen();
  add_noise(p, 0.5, 803);
  const TokenSequence x = prompt({1, 4});
  const Vocabulary& v = a.vocab;
  std::vector<TokenSequence> every = {response({v.eos()})};
  for (int s = 0; s < v.speech_count; ++s) every.push_back(response({v.speech_begin() + s, v.eos()}));
  double exact = 0.0, mass = 0.0;
  {
    NoGradGuard guard;
    for (const auto& y : every) {
      const double lp = sequence_logprob(p, x, y).total.item();
      const double lr = sequence_logprob(ref, x, y).total.item();
      mass += std::exp(lp);
      exact += std::exp(lp) * (lp - lr);
    }
  }
  const std::vector<TokenSequence> one = {x};
  const auto est = kl_estimate(p, ref, one, 4000, 804);
  const bool toy_ok = std::abs(mass - 1.0) < 1e-12 &&
                      std::abs(est.mean - exact) <= 3.0 * est.stderr_;
  Outcome o;
  o.pass = self_ok && toy_ok;
  o.detail = fmt("self: %.2e +- %.2e (within 3 SE); perturbed toy: estimate %.4f +- %.4f vs "
                 "exact %.4f over %zu sequences (mass %.12f), within 3 SE: %s",
                 self.mean, self.stderr_, est.mean, est.stderr_, exact, every.size(), mass,
                 toy_ok ? "yes" : "no");
  return o;
}

// ---------------------------------------------------------------------------
// 9. Bit-exact pipeline replay through the CLI.

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool run_cli(const std::string& cli, const std::string& args, const fs::path& log) {
  const std::string cmd = cli + " " + args + " >> " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) && WEXITSTATUS(raw) == 0;
}

bool cli_pipeline(const std::string& cli, const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const WorldConfig wc = testing::tiny_world_config();
  const SynthWorld world = make_world(wc);
  TrainingConfig sft = testing::tiny_config(world, Stage::Sft);
  sft.steps = 30;
  sft.eval_interval = 10;
  sft.save(dir / "sft.config");
  TrainingConfig pref = testing::tiny_config(world, Stage::Mpo);
  pref.steps = 20;
  pref.eval_interval = 10;
  pref.constraints.enforce = false;
  pref.save(dir / "pref.config");

  const auto f = [&](const std::string& n) { return (dir / n).string(); };
  const fs::path log = dir / "cli.log";
  const std::string world_flags = "--seed " + std::to_string(wc.seed) + " --symbols " +
                                  std::to_string(wc.symbols) + " --speakers " +
                                  std::to_string(wc.speakers) + " --speech-count " +
                                  std::to_string(wc.speech_count);
  bool ok = run_cli(cli, "make-world --out " + f("world.json") + " " + world_flags, log);
  ok = ok && run_cli(cli,
                     "make-corpus --world " + f("world.json") + " --train-out " +
                         f("train.jsonl") + " --heldout-out " + f("heldout.jsonl") +
                         " --pref-out " + f("pref.jsonl") +
                         " --train-items 40 --heldout-items 8 --pref-items 16 --seed 3",
                     log);
  ok = ok && run_cli(cli,
                     "sft --config " + f("sft.config") + " --world " + f("world.json") +
                         " --corpus " + f("train.jsonl") + " --heldout " + f("heldout.jsonl") +
                         " --out " + f("sft.ckpt"),
                     log);
  ok = ok && run_cli(cli,
                     "gen-candidates --config " + f("pref.config") + " --checkpoint " +
                         f("sft.ckpt") + " --world " + f("world.json") + " --corpus " +
                         f("pref.jsonl") + " --out " + f("cands.jsonl") + " --workers 2",
                     log);
  ok = ok && run_cli(cli,
                     "build-prefset --config " + f("pref.config") + " --candidates " +
                         f("cands.jsonl") + " --out " + f("prefset.jsonl"),
                     log);
  std::string reports = f("sft.report.json");
  ok = ok && run_cli(cli,
                     "eval --checkpoint " + f("sft.ckpt") + " --world " + f("world.json") +
                         " --heldout " + f("heldout.jsonl") + " --out " + reports,
                     log);
  for (const std::string mode : {"dpo-only", "mpo", "combined-rankings"}) {
    ok = ok && run_cli(cli,
                       "train --mode " + mode + " --config " + f("pref.config") +
                           " --checkpoint " + f("sft.ckpt") + " --prefset " +
                           f("prefset.jsonl") + " --world " + f("world.json") + " --heldout " +
                           f("heldout.jsonl") + " --out " + f(mode + ".ckpt"),
                       log);
    ok = ok && run_cli(cli,
                       "eval --checkpoint " + f(mode + ".ckpt") + " --world " + f("world.json") +
                           " --heldout " + f("heldout.jsonl") + " --out " +
                           f(mode + ".report.json"),
                       log);
    reports += " " + f(mode + ".report.json");
  }
  ok = ok && run_cli(cli, "compare --reports " + reports + " --out " + f("compare.csv"), log);
  return ok;
}

Outcome determinism(const std::string& cli, const fs::path& root) {
  const fs::path a = root / "run_a", b = root / "run_b";
  if (!cli_pipeline(cli, a) || !cli_pipeline(cli, b)) {
    return {false, "pipeline command failed; see " + (root / "run_a" / "cli.log").string()};
  }
  std::size_t csvs = 0, differing = 0;
  std::string which;
  for (const auto& entry : fs::directory_iterator(a)) {
    if (entry.path().extension() != ".csv") continue;
    ++csvs;
    const fs::path other = b / entry.path().filename();
    if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) {
      ++differing;
      which += " " + entry.path().filename().string();
    }
  }
  const bool ckpt_same = file_sha256(a / "mpo.ckpt") == file_sha256(b / "mpo.ckpt");
  Outcome o;
  o.pass = csvs >= 9 && differing == 0 && ckpt_same;
  o.detail = fmt("all 8 subcommands run twice: %zu CSV logs compared, %zu differ%s; "
                 "mpo checkpoint sha256 %s",
                 csvs, differing, which.c_str(), ckpt_same ? "identical" : "differs");
  return o;
}

}  // namespace
}  // namespace mpo

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string cli = MPO_CLI_PATH;
  std::string work = (std::filesystem::temp_directory_path() / "mpo_acceptance").string();
  std::vector<int> allow_fail;
  std::vector<int> only;
  app.add_option("--cli", cli, "Path to the mpo executable");
  app.add_option("--work-dir", work, "Scratch directory for pipeline runs");
  app.add_option("--allow-fail", allow_fail,
                 "Criteria whose failure is documented and does not fail the run");
  app.add_option("--only", only, "Run just these criteria");
  app.add_option("--beta", mpo::g_run_beta, "Beta for the desk training runs");
  CLI11_PARSE(app, argc, argv);

  const auto wanted = [&](int k) {
    return only.empty() || std::find(only.begin(), only.end(), k) != only.end();
  };
  std::map<int, std::pair<std::string, mpo::Outcome>> results;
  const auto record = [&](int k, const std::string& name, mpo::Outcome o) {
    std::printf("[%s] %d. %s: %s\n", o.pass ? "PASS" : "FAIL", k, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    results[k] = {name, std::move(o)};
  };

  if (wanted(1)) record(1, "gradient correctness", mpo::gradient_correctness());
  if (wanted(2)) record(2, "DPO identities", mpo::dpo_identities());
  if (wanted(3) || wanted(4) || wanted(5)) {
    const auto runs = mpo::desk_runs();
    if (wanted(3)) record(3, "degradation reproduction", mpo::degradation(runs.dpo_only));
    if (wanted(4)) record(4, "regularization rescue", mpo::rescue(runs.mpo));
    if (wanted(5)) record(5, "multidimensional improvement", mpo::multidimensional(runs));
  }
  if (wanted(6)) record(6, "preference-set correctness", mpo::prefset_oracle());
  if (wanted(7)) record(7, "metric oracles", mpo::metric_oracles());
  if (wanted(8)) record(8, "KL sanity", mpo::kl_sanity());
  if (wanted(9)) record(9, "determinism", mpo::determinism(cli, work));

  std::printf("\nSummary:\n");
  int unexpected = 0;
  for (const auto& [k, r] : results) {
    const bool allowed =
        std::find(allow_fail.begin(), allow_fail.end(), k) != allow_fail.end();
    std::printf("  %d %-30s %s%s\n", k, r.first.c_str(), r.second.pass ? "PASS" : "FAIL",
                !r.second.pass && allowed ? " (documented)" : "");
    if (!r.second.pass && !allowed) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
