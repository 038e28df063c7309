// Command-line pipeline: world -> corpus -> sft -> candidates -> prefset ->
// preference training -> eval -> compare.

#include "mpo/digest.hpp"
#include "mpo/parallel.hpp"
#include "mpo/seeds.hpp"
#include "mpo/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace mpo;

namespace {

constexpr const char* kVersion = "0.1.0";

constexpr int kExitInput = 2;
constexpr int kExitConfig = 3;
constexpr int kExitDiverged = 4;

std::string version_text() {
  return std::string("mpo ") + kVersion + " (checkpoint format " +
         std::to_string(kCheckpointFormatVersion) + ", config schema " +
         std::to_string(TrainingConfig::kSchemaVersion) +
         ", corpus jsonl 1, prefset jsonl 1, eval report 1)";
}

/// Missing or unreadable input; exit status 2.
class InputError : public std::runtime_error {
 public:
  InputError(const fs::path& path, const std::string& what)
      : std::runtime_error(path.string() + ": " + what) {}
};

template <typename F>
auto load_input(const fs::path& path, F&& load) {
  if (!fs::exists(path)) throw InputError(path, "file not found");
  try {
    return load(path);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw InputError(path, e.what());
  }
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Records one command invocation next to its primary output.
class Manifest {
 public:
  explicit Manifest(std::string command)
      : command_(std::move(command)), started_(utc_now()) {}

  void input(const std::string& role, const fs::path& path) {
    inputs_[role] = {{"path", path.string()}, {"sha256", file_sha256(path)}};
  }
  void output(const fs::path& path) { outputs_.push_back(path.string()); }
  void set(const std::string& key, nlohmann::json value) { extra_[key] = std::move(value); }
  void config_hash(std::string h) { config_hash_ = std::move(h); }

  void write(const fs::path& primary) const {
    nlohmann::json outputs = nlohmann::json::array();
    for (const auto& o : outputs_) {
      outputs.push_back({{"path", o}, {"sha256", file_sha256(o)}});
    }
    nlohmann::json j = {{"command", command_},
                        {"version", kVersion},
                        {"config_hash", config_hash_},
                        {"inputs", inputs_},
                        {"outputs", outputs},
                        {"started", started_},
                        {"finished", utc_now()}};
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    const fs::path path = manifest_path(primary);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
    out << j.dump(1) << "\n";
  }

  static fs::path manifest_path(const fs::path& primary) {
    return fs::path(primary.string() + ".manifest.json");
  }

 private:
  std::string command_;
  std::string started_;
  std::string config_hash_;
  nlohmann::json inputs_ = nlohmann::json::object();
  std::vector<std::string> outputs_;
  nlohmann::json extra_ = nlohmann::json::object();
};

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p.replace_extension();
  return fs::path(p.string() + suffix);
}

SynthWorld load_world(const fs::path& p) {
  return load_input(p, [](const fs::path& q) { return SynthWorld::load(q); });
}

std::vector<CorpusItem> load_corpus_file(const fs::path& p, const SynthWorld& world) {
  return load_input(p, [&](const fs::path& q) {
    auto c = load_corpus(q, world);
    if (c.empty()) throw std::runtime_error("corpus is empty");
    return c;
  });
}

Policy load_policy(const fs::path& p) {
  return load_input(p, [](const fs::path& q) { return Policy::load(q); });
}

void check_vocab(const Policy& policy, const SynthWorld& world, const fs::path& ckpt) {
  if (!(policy.vocab() == world.vocab)) {
    throw InputError(ckpt, "checkpoint vocabulary does not match the world");
  }
}

/// Base config for a stage: the file if given, else stage defaults.
TrainingConfig base_config(const std::string& path, Stage stage) {
  if (path.empty()) return TrainingConfig::defaults(stage);
  return load_input(fs::path(path),
                    [](const fs::path& q) { return TrainingConfig::load(q); });
}

void add_workers(CLI::App* cmd, int& workers) {
  cmd->add_option("--workers", workers, "Worker threads for sampling and evaluation")
      ->check(CLI::PositiveNumber);
}

void print_eval(const EvalRecord& e) {
  std::printf("  step %6lld  cer %.4f  spk_sim %.4f  prosody %.4f  heldout_ce %.4f  kl %.4f\n",
              static_cast<long long>(e.step), e.mean.cer, e.mean.spk_sim,
              e.mean.prosody_rmse, e.heldout_ce, e.kl);
}

void write_logs(const TrainingLog& log, const fs::path& out, Manifest& m) {
  const fs::path steps = sibling(out, ".steps.csv");
  const fs::path evals = sibling(out, ".evals.csv");
  log.write_steps_csv(steps);
  m.output(steps);
  if (!log.evals.empty()) {
    log.write_evals_csv(evals);
    m.output(evals);
  }
}

/// Saves the last good policy and logs of a diverged run; returns exit 4.
int handle_divergence(const TrainingDiverged& d, const fs::path& out, Manifest& m) {
  const fs::path last_good = sibling(out, ".last-good.ckpt");
  d.last_good.save(last_good);
  m.output(last_good);
  write_logs(d.log, out, m);
  m.set("status", "diverged");
  m.write(last_good);
  std::cerr << "error: " << d.what() << "\nlast good checkpoint: " << last_good.string()
            << "\n";
  return kExitDiverged;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multidimensional preference optimization on a synthetic TTS task"};
  app.set_version_flag("--version", version_text());
  app.require_subcommand(1);

  int workers = 1;

  // make-world
  auto* mw = app.add_subcommand("make-world", "Sample a synthetic world");
  WorldConfig wc;
  std::string world_out;
  mw->add_option("--out", world_out, "World JSON path")->required();
  mw->add_option("--seed", wc.seed, "World seed");
  mw->add_option("--symbols", wc.symbols);
  mw->add_option("--speakers", wc.speakers);
  mw->add_option("--speech-count", wc.speech_count);
  mw->add_option("--embed-dim", wc.embed_dim);

  // make-corpus
  auto* mc = app.add_subcommand("make-corpus", "Sample train and held-out corpora");
  std::string mc_world, mc_train, mc_heldout, mc_pref;
  std::size_t n_train = 500, n_heldout = 100, n_pref = 500;
  std::uint64_t mc_seed = 1;
  mc->add_option("--world", mc_world)->required();
  mc->add_option("--train-out", mc_train)->required();
  mc->add_option("--heldout-out", mc_heldout)->required();
  mc->add_option("--train-items", n_train)->check(CLI::PositiveNumber);
  mc->add_option("--heldout-items", n_heldout)->check(CLI::PositiveNumber);
  mc->add_option("--pref-out", mc_pref, "Optional corpus of fresh prompts for preference data");
  mc->add_option("--pref-items", n_pref)->check(CLI::PositiveNumber);
  mc->add_option("--seed", mc_seed);

  // sft
  auto* sft = app.add_subcommand("sft", "Supervised training from scratch");
  std::string sft_config, sft_world, sft_corpus, sft_heldout, sft_out;
  std::optional<std::uint64_t> sft_seed;
  std::optional<int> sft_steps;
  sft->add_option("--config", sft_config, "Config file (key = value)");
  sft->add_option("--world", sft_world)->required();
  sft->add_option("--corpus", sft_corpus)->required();
  sft->add_option("--heldout", sft_heldout, "Held-out corpus for periodic evaluation");
  sft->add_option("--out", sft_out, "Checkpoint path")->required();
  sft->add_option("--seed", sft_seed);
  sft->add_option("--steps", sft_steps);
  add_workers(sft, workers);

  // gen-candidates
  auto* gc = app.add_subcommand("gen-candidates", "Sample and score candidate responses");
  std::string gc_config, gc_ckpt, gc_world, gc_corpus, gc_out;
  std::optional<std::uint64_t> gc_seed;
  std::optional<int> gc_n, gc_top_k;
  std::optional<double> gc_temp;
  gc->add_option("--config", gc_config);
  gc->add_option("--checkpoint", gc_ckpt)->required();
  gc->add_option("--world", gc_world)->required();
  gc->add_option("--corpus", gc_corpus)->required();
  gc->add_option("--out", gc_out)->required();
  gc->add_option("--seed", gc_seed);
  gc->add_option("--n", gc_n, "Candidates per prompt");
  gc->add_option("--temperature", gc_temp);
  gc->add_option("--top-k", gc_top_k);
  add_workers(gc, workers);

  // build-prefset
  auto* bp = app.add_subcommand("build-prefset", "Build preference sets from candidates");
  std::string bp_config, bp_candidates, bp_out, bp_selection = "mpo";
  bool bp_no_constraints = false;
  bp->add_option("--config", bp_config);
  bp->add_option("--candidates", bp_candidates)->required();
  bp->add_option("--selection", bp_selection,
                 "mpo | cer | spk_sim | prosody | combined-rankings");
  bp->add_option("--out", bp_out)->required();
  bp->add_flag("--no-constraints", bp_no_constraints);

  // train
  auto* tr = app.add_subcommand("train", "Preference training from an SFT checkpoint");
  std::string tr_mode, tr_config, tr_ckpt, tr_prefset, tr_world, tr_heldout, tr_sft_corpus,
      tr_out;
  std::optional<std::uint64_t> tr_seed;
  std::optional<double> tr_lambda, tr_beta, tr_lr;
  std::optional<int> tr_steps;
  tr->add_option("--mode", tr_mode, "dpo-only | mpo | combined-rankings")->required();
  tr->add_option("--config", tr_config);
  tr->add_option("--checkpoint", tr_ckpt, "SFT checkpoint (also the reference)")->required();
  tr->add_option("--prefset", tr_prefset)->required();
  tr->add_option("--world", tr_world)->required();
  tr->add_option("--heldout", tr_heldout);
  tr->add_option("--sft-corpus", tr_sft_corpus, "CE data when ce_source = sft-data");
  tr->add_option("--out", tr_out)->required();
  tr->add_option("--seed", tr_seed);
  tr->add_option("--lambda", tr_lambda);
  tr->add_option("--beta", tr_beta);
  tr->add_option("--learning-rate", tr_lr);
  tr->add_option("--steps", tr_steps);
  add_workers(tr, workers);

  // eval
  auto* ev = app.add_subcommand("eval", "Greedy evaluation on held-out items");
  std::string ev_ckpt, ev_world, ev_heldout, ev_out, ev_name;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--world", ev_world)->required();
  ev->add_option("--heldout", ev_heldout)->required();
  ev->add_option("--out", ev_out, "Report JSON path")->required();
  ev->add_option("--name", ev_name, "Row name (default: checkpoint file stem)");
  add_workers(ev, workers);

  // compare
  auto* cmp = app.add_subcommand("compare", "Tabulate eval reports");
  std::vector<std::string> cmp_reports;
  std::string cmp_out;
  cmp->add_option("--reports", cmp_reports, "Eval reports; the first is the baseline")
      ->required();
  cmp->add_option("--out", cmp_out, "Comparison CSV (text table goes next to it)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  set_workers(workers);

  try {
    if (*mw) {
      Manifest m("make-world");
      wc.validate();
      const SynthWorld world = make_world(wc);
      ensure_parent(world_out);
      world.save(world_out);
      m.output(world_out);
      m.set("seed", wc.seed);
      m.write(world_out);
      std::printf("world: %d symbols, %d speakers, %d speech tokens -> %s\n",
                  wc.symbols, wc.speakers, wc.speech_count, world_out.c_str());
    } else if (*mc) {
      Manifest m("make-corpus");
      const SynthWorld world = load_world(mc_world);
      m.input("world", mc_world);
      // Items are laid out as train, held-out, then preference prompts.
      const std::size_t n_pref_used = mc_pref.empty() ? 0 : n_pref;
      auto all = make_corpus(world, n_train + n_heldout + n_pref_used, mc_seed);
      const auto held_end = all.begin() + static_cast<long>(n_train + n_heldout);
      std::vector<CorpusItem> train(all.begin(), all.begin() + static_cast<long>(n_train));
      std::vector<CorpusItem> pref(held_end, all.end());
      std::vector<CorpusItem> held;
      std::size_t dropped = 0;
      for (std::size_t i = n_train; i < n_train + n_heldout; ++i) {
        auto same = [&](const CorpusItem& t) { return t.prompt == all[i].prompt; };
        const bool seen = std::any_of(train.begin(), train.end(), same) ||
                          std::any_of(pref.begin(), pref.end(), same);
        if (seen) {
          ++dropped;
        } else {
          held.push_back(all[i]);
        }
      }
      ensure_parent(mc_train);
      ensure_parent(mc_heldout);
      save_corpus(mc_train, train);
      save_corpus(mc_heldout, held);
      m.output(mc_train);
      m.output(mc_heldout);
      if (!mc_pref.empty()) {
        ensure_parent(mc_pref);
        save_corpus(mc_pref, pref);
        m.output(mc_pref);
      }
      m.set("seed", mc_seed);
      m.set("heldout_digest", corpus_digest(held));
      m.write(mc_train);
      std::printf("corpus: %zu train, %zu held-out (%zu dropped as duplicates), %zu preference\n",
                  train.size(), held.size(), dropped, pref.size());
    } else if (*sft) {
      Manifest m("sft");
      TrainingConfig c = base_config(sft_config, Stage::Sft);
      if (c.stage != Stage::Sft) throw ConfigError("stage", "sft needs stage = sft");
      if (sft_seed) c.seed = *sft_seed;
      if (sft_steps) c.steps = *sft_steps;
      c.validate();
      const SynthWorld world = load_world(sft_world);
      if (!(world.vocab == c.arch.vocab)) {
        throw ConfigError("arch.text_count", "vocabulary does not match the world");
      }
      const auto corpus = load_corpus_file(sft_corpus, world);
      m.input("world", sft_world);
      m.input("corpus", sft_corpus);
      std::vector<CorpusItem> heldout;
      std::optional<EvalContext> ctx;
      if (!sft_heldout.empty()) {
        heldout = load_corpus_file(sft_heldout, world);
        m.input("heldout", sft_heldout);
        ctx = EvalContext{&world, heldout};
      }
      m.config_hash(c.hash());
      ensure_parent(sft_out);
      const fs::path cfg_out = sibling(sft_out, ".config");
      c.save(cfg_out);
      m.output(cfg_out);
      try {
        TrainResult r = run_sft(c, corpus, ctx ? &*ctx : nullptr);
        r.policy.save(sft_out);
        m.output(sft_out);
        write_logs(r.log, sft_out, m);
        m.write(sft_out);
        std::printf("sft: %d steps, final train ce %.4f -> %s\n", c.steps,
                    r.log.steps.empty() ? 0.0 : r.log.steps.back().ce, sft_out.c_str());
        for (const auto& e : r.log.evals) print_eval(e);
      } catch (const TrainingDiverged& d) {
        return handle_divergence(d, sft_out, m);
      }
    } else if (*gc) {
      Manifest m("gen-candidates");
      TrainingConfig c = base_config(gc_config, Stage::Mpo);
      if (gc_seed) c.seed = *gc_seed;
      if (gc_n) c.n_candidates = *gc_n;
      if (gc_temp) c.sampling.temperature = *gc_temp;
      if (gc_top_k) c.sampling.top_k = *gc_top_k;
      c.validate();
      const SynthWorld world = load_world(gc_world);
      const Policy policy = load_policy(gc_ckpt);
      check_vocab(policy, world, gc_ckpt);
      c.sampling.validate(policy.vocab());
      const auto corpus = load_corpus_file(gc_corpus, world);
      m.input("world", gc_world);
      m.input("checkpoint", gc_ckpt);
      m.input("corpus", gc_corpus);
      m.config_hash(c.hash());
      const auto items =
          generate_candidates(policy, world, corpus, static_cast<std::size_t>(c.n_candidates),
                              c.sampling, derive_seed(c.seed, "gen-candidates"));
      ensure_parent(gc_out);
      save_candidates(gc_out, items);
      m.output(gc_out);
      m.set("seed", c.seed);
      m.write(gc_out);
      std::printf("candidates: %zu items x %d -> %s\n", items.size(), c.n_candidates,
                  gc_out.c_str());
    } else if (*bp) {
      Manifest m("build-prefset");
      TrainingConfig c = base_config(bp_config, Stage::Mpo);
      Selection selection;
      try {
        selection = parse_selection(bp_selection);
      } catch (const std::invalid_argument& e) {
        throw ConfigError("selection", e.what());
      }
      const Constraints constraints = bp_no_constraints ? Constraints::none() : c.constraints;
      const auto items = load_input(fs::path(bp_candidates), [](const fs::path& q) {
        return load_candidates(q);
      });
      m.input("candidates", bp_candidates);
      m.config_hash(c.hash());
      PrefsetReport report;
      const auto records = build_dataset(items, selection, constraints, &report);
      ensure_parent(bp_out);
      save_prefset(bp_out, records, selection);
      m.output(bp_out);
      m.set("selection", std::string(selection_name(selection)));
      m.set("accepted", report.accepted);
      m.set("rejected", report.rejected);
      m.write(bp_out);
      std::printf("prefset (%s): %zu accepted, %zu rejected -> %s\n",
                  std::string(selection_name(selection)).c_str(), report.accepted,
                  report.rejected, bp_out.c_str());
      if (report.accepted == 0) {
        std::fprintf(stderr, "warning: no item was accepted\n");
      }
    } else if (*tr) {
      Manifest m("train");
      Stage stage;
      try {
        stage = parse_stage(tr_mode);
      } catch (const std::invalid_argument& e) {
        throw ConfigError("mode", e.what());
      }
      if (stage == Stage::Sft) throw ConfigError("mode", "use the sft subcommand");
      TrainingConfig c = base_config(tr_config, stage);
      c.stage = stage;
      if (tr_seed) c.seed = *tr_seed;
      if (tr_lambda) c.lambda = *tr_lambda;
      if (tr_beta) c.beta = *tr_beta;
      if (tr_lr) c.learning_rate = *tr_lr;
      if (tr_steps) c.steps = *tr_steps;
      c.validate();
      const SynthWorld world = load_world(tr_world);
      const Policy sft_policy = load_policy(tr_ckpt);
      check_vocab(sft_policy, world, tr_ckpt);
      if (!(sft_policy.config() == c.arch)) {
        throw ConfigError("arch", "checkpoint architecture does not match the config");
      }
      const auto records = load_input(fs::path(tr_prefset), [](const fs::path& q) {
        return load_prefset(q);
      });
      m.input("world", tr_world);
      m.input("checkpoint", tr_ckpt);
      m.input("prefset", tr_prefset);
      std::vector<CorpusItem> heldout;
      std::optional<EvalContext> ctx;
      if (!tr_heldout.empty()) {
        heldout = load_corpus_file(tr_heldout, world);
        m.input("heldout", tr_heldout);
        ctx = EvalContext{&world, heldout};
      }
      std::vector<CorpusItem> sft_corpus;
      if (!tr_sft_corpus.empty()) {
        sft_corpus = load_corpus_file(tr_sft_corpus, world);
        m.input("sft_corpus", tr_sft_corpus);
      }
      m.config_hash(c.hash());
      ensure_parent(tr_out);
      const fs::path cfg_out = sibling(tr_out, ".config");
      c.save(cfg_out);
      m.output(cfg_out);
      try {
        TrainResult r =
            run_preference_stage(c, sft_policy, records, ctx ? &*ctx : nullptr, sft_corpus);
        r.policy.save(tr_out);
        m.output(tr_out);
        write_logs(r.log, tr_out, m);
        m.write(tr_out);
        const auto& last = r.log.steps.empty() ? StepRecord{} : r.log.steps.back();
        std::printf("train (%s): %d steps, dpo %.4f, ce %.4f -> %s\n",
                    std::string(stage_name(stage)).c_str(), c.steps, last.dpo, last.ce,
                    tr_out.c_str());
        for (const auto& e : r.log.evals) print_eval(e);
      } catch (const TrainingDiverged& d) {
        return handle_divergence(d, tr_out, m);
      }
    } else if (*ev) {
      Manifest m("eval");
      const SynthWorld world = load_world(ev_world);
      const Policy policy = load_policy(ev_ckpt);
      check_vocab(policy, world, ev_ckpt);
      const auto heldout = load_corpus_file(ev_heldout, world);
      m.input("world", ev_world);
      m.input("checkpoint", ev_ckpt);
      m.input("heldout", ev_heldout);
      const std::string name =
          ev_name.empty() ? fs::path(ev_ckpt).stem().string() : ev_name;
      const EvalReport report = evaluate(policy, world, heldout, name);
      ensure_parent(ev_out);
      report.save(ev_out);
      m.output(ev_out);
      m.set("heldout_digest", report.heldout_digest);
      m.write(ev_out);
      std::printf("eval %s: cer %.4f  spk_sim %.4f  prosody %.4f  heldout_ce %.4f (%zu items)\n",
                  name.c_str(), report.mean.cer, report.mean.spk_sim,
                  report.mean.prosody_rmse, report.heldout_ce, report.items.size());
    } else if (*cmp) {
      Manifest m("compare");
      std::vector<EvalReport> reports;
      std::optional<std::string> manifest_digest;
      std::string manifest_source;
      for (const auto& p : cmp_reports) {
        reports.push_back(
            load_input(fs::path(p), [](const fs::path& q) { return EvalReport::load(q); }));
        m.input(p, p);
        const fs::path mp = Manifest::manifest_path(p);
        if (fs::exists(mp)) {
          const auto j = load_input(mp, [](const fs::path& q) {
            std::ifstream in(q);
            return nlohmann::json::parse(in);
          });
          const std::string d = j.value("heldout_digest", std::string{});
          if (!manifest_digest) {
            manifest_digest = d;
            manifest_source = mp.string();
          } else if (d != *manifest_digest) {
            throw InputError(mp, "held-out digest differs from " + manifest_source);
          }
        }
      }
      for (std::size_t i = 1; i < reports.size(); ++i) {
        if (reports[i].heldout_digest != reports[0].heldout_digest) {
          throw InputError(cmp_reports[i], "held-out digest differs from " + cmp_reports[0]);
        }
      }
      const ComparisonTable table = compare_experiments(reports);
      ensure_parent(cmp_out);
      const fs::path text_out = sibling(cmp_out, ".txt");
      {
        std::ofstream csv(cmp_out, std::ios::trunc);
        csv << table.to_csv();
        std::ofstream txt(text_out, std::ios::trunc);
        txt << table.to_text();
        if (!csv || !txt) throw std::runtime_error("cannot write comparison output");
      }
      m.output(cmp_out);
      m.output(text_out);
      m.set("heldout_digest", reports[0].heldout_digest);
      m.write(cmp_out);
      std::cout << table.to_text();
    }
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const ConfigError& e) {
    std::cerr << "config error in field '" << e.field() << "': " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
