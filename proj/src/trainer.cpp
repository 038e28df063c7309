#include "mpo/trainer.hpp"

#include "mpo/digest.hpp"
#include "mpo/parallel.hpp"
#include "mpo/seeds.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace mpo {

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::Sft: return "sft";
    case Stage::DpoOnly: return "dpo-only";
    case Stage::Mpo: return "mpo";
    case Stage::CombinedRankings: return "combined-rankings";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  for (Stage s : {Stage::Sft, Stage::DpoOnly, Stage::Mpo, Stage::CombinedRankings}) {
    if (stage_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown stage '" + std::string(name) + "'");
}

namespace {

std::string_view ce_source_name(CeSource s) {
  return s == CeSource::PreferredResponses ? "preferred" : "sft-data";
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc{} || r.ptr != text.data() + text.size()) {
    throw ConfigError(key, "invalid value '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError(key, "expected true or false, got '" + text + "'");
}

/// Binds each config key to its member for printing and parsing.
struct Field {
  std::string key;
  std::function<std::string(const TrainingConfig&)> get;
  std::function<void(TrainingConfig&, const std::string&)> set;
};

template <typename T>
Field number_field(std::string key, T TrainingConfig::*member) {
  return {key,
          [member](const TrainingConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          },
          [member, key](TrainingConfig& c, const std::string& v) {
            c.*member = parse_number<T>(key, v);
          }};
}

template <typename T>
Field arch_field(std::string key, T ArchConfig::*member) {
  return {key,
          [member](const TrainingConfig& c) { return std::to_string(c.arch.*member); },
          [member, key](TrainingConfig& c, const std::string& v) {
            c.arch.*member = parse_number<T>(key, v);
          }};
}

template <typename T>
Field constraint_field(std::string key, T Constraints::*member) {
  return {key,
          [member](const TrainingConfig& c) {
            if constexpr (std::is_same_v<T, bool>) {
              return std::string(c.constraints.*member ? "true" : "false");
            } else {
              return format_double(c.constraints.*member);
            }
          },
          [member, key](TrainingConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, bool>) {
              c.constraints.*member = parse_bool(key, v);
            } else {
              c.constraints.*member = parse_number<T>(key, v);
            }
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back({"stage",
                 [](const TrainingConfig& c) { return std::string(stage_name(c.stage)); },
                 [](TrainingConfig& c, const std::string& s) {
                   try {
                     c.stage = parse_stage(s);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError("stage", e.what());
                   }
                 }});
    v.push_back({"arch.text_count",
                 [](const TrainingConfig& c) { return std::to_string(c.arch.vocab.text_count); },
                 [](TrainingConfig& c, const std::string& s) {
                   c.arch.vocab.text_count = parse_number<int>("arch.text_count", s);
                 }});
    v.push_back({"arch.speech_count",
                 [](const TrainingConfig& c) { return std::to_string(c.arch.vocab.speech_count); },
                 [](TrainingConfig& c, const std::string& s) {
                   c.arch.vocab.speech_count = parse_number<int>("arch.speech_count", s);
                 }});
    v.push_back(arch_field("arch.layers", &ArchConfig::layers));
    v.push_back(arch_field("arch.dim", &ArchConfig::dim));
    v.push_back(arch_field("arch.heads", &ArchConfig::heads));
    v.push_back(arch_field("arch.context", &ArchConfig::context));
    v.push_back(arch_field("arch.ffn_mult", &ArchConfig::ffn_mult));
    v.push_back(arch_field("arch.max_response", &ArchConfig::max_response));
    v.push_back(arch_field("arch.seed", &ArchConfig::seed));
    v.push_back(number_field("beta", &TrainingConfig::beta));
    v.push_back(number_field("lambda", &TrainingConfig::lambda));
    v.push_back(number_field("learning_rate", &TrainingConfig::learning_rate));
    v.push_back(number_field("weight_decay", &TrainingConfig::weight_decay));
    v.push_back(number_field("adam_beta1", &TrainingConfig::adam_beta1));
    v.push_back(number_field("adam_beta2", &TrainingConfig::adam_beta2));
    v.push_back(number_field("adam_eps", &TrainingConfig::adam_eps));
    v.push_back(number_field("warmup_steps", &TrainingConfig::warmup_steps));
    v.push_back(number_field("grad_clip", &TrainingConfig::grad_clip));
    v.push_back(number_field("steps", &TrainingConfig::steps));
    v.push_back(number_field("batch_size", &TrainingConfig::batch_size));
    v.push_back(number_field("eval_interval", &TrainingConfig::eval_interval));
    v.push_back(number_field("seed", &TrainingConfig::seed));
    v.push_back({"sampling.temperature",
                 [](const TrainingConfig& c) { return format_double(c.sampling.temperature); },
                 [](TrainingConfig& c, const std::string& s) {
                   c.sampling.temperature = parse_number<double>("sampling.temperature", s);
                 }});
    v.push_back({"sampling.top_k",
                 [](const TrainingConfig& c) { return std::to_string(c.sampling.top_k); },
                 [](TrainingConfig& c, const std::string& s) {
                   c.sampling.top_k = parse_number<int>("sampling.top_k", s);
                 }});
    v.push_back(number_field("n_candidates", &TrainingConfig::n_candidates));
    v.push_back(constraint_field("constraints.enforce", &Constraints::enforce));
    v.push_back(constraint_field("constraints.winner_cer_zero", &Constraints::winner_cer_zero));
    v.push_back(constraint_field("constraints.cer_gap", &Constraints::cer_gap));
    v.push_back(constraint_field("constraints.sim_gap", &Constraints::sim_gap));
    v.push_back(constraint_field("constraints.prosody_gap", &Constraints::prosody_gap));
    v.push_back({"ce_source",
                 [](const TrainingConfig& c) { return std::string(ce_source_name(c.ce_source)); },
                 [](TrainingConfig& c, const std::string& s) {
                   if (s == "preferred") {
                     c.ce_source = CeSource::PreferredResponses;
                   } else if (s == "sft-data") {
                     c.ce_source = CeSource::HeldOutSftData;
                   } else {
                     throw ConfigError("ce_source",
                                       "expected preferred or sft-data, got '" + s + "'");
                   }
                 }});
    v.push_back(number_field("eval_items", &TrainingConfig::eval_items));
    v.push_back(number_field("kl_prompts", &TrainingConfig::kl_prompts));
    v.push_back(number_field("kl_samples", &TrainingConfig::kl_samples));
    return v;
  }();
  return f;
}

void require(bool ok, const char* field, const std::string& what) {
  if (!ok) throw ConfigError(field, what);
}

}  // namespace

TrainingConfig TrainingConfig::defaults(Stage stage) {
  TrainingConfig c;
  c.stage = stage;
  if (stage == Stage::Sft) {
    c.learning_rate = 1e-3;
    c.warmup_steps = 100;
    c.steps = 3000;
    c.batch_size = 16;
    c.eval_interval = 500;
  } else {
    c.learning_rate = 1e-4;
    c.warmup_steps = 0;
    c.weight_decay = 0.0;
    c.steps = 2000;
    c.batch_size = 8;
    c.eval_interval = 250;
  }
  return c;
}

void TrainingConfig::validate() const {
  require(arch.vocab.text_count >= 1, "arch.text_count", "must be >= 1");
  require(arch.vocab.speech_count >= 8, "arch.speech_count", "must be >= 8");
  require(arch.layers >= 1, "arch.layers", "must be >= 1");
  require(arch.dim >= 8, "arch.dim", "must be >= 8");
  require(arch.heads >= 1 && arch.dim % std::max(arch.heads, 1) == 0, "arch.heads",
          "must be >= 1 and divide arch.dim");
  require(arch.context >= 4, "arch.context", "must be >= 4");
  require(arch.ffn_mult >= 1, "arch.ffn_mult", "must be >= 1");
  require(arch.max_response >= 1 && arch.max_response < arch.context,
          "arch.max_response", "must be in [1, arch.context)");
  require(beta > 0.0 && std::isfinite(beta), "beta", "must be > 0");
  require(lambda >= 0.0 && std::isfinite(lambda), "lambda", "must be >= 0");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate",
          "must be > 0");
  require(weight_decay >= 0.0, "weight_decay", "must be >= 0");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1", "must be in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2", "must be in [0, 1)");
  require(adam_eps > 0.0, "adam_eps", "must be > 0");
  require(warmup_steps >= 0, "warmup_steps", "must be >= 0");
  require(grad_clip >= 0.0, "grad_clip", "must be >= 0 (0 disables clipping)");
  require(steps >= 0, "steps", "must be >= 0");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(eval_interval >= 1, "eval_interval", "must be >= 1");
  require(sampling.temperature > 0.0 && std::isfinite(sampling.temperature),
          "sampling.temperature", "must be > 0");
  require(sampling.top_k >= 0 && sampling.top_k <= arch.vocab.response_size(),
          "sampling.top_k", "must be in [0, response vocabulary size]");
  require(n_candidates >= 2, "n_candidates", "must be >= 2");
  require(constraints.cer_gap >= 0.0, "constraints.cer_gap", "must be >= 0");
  require(constraints.sim_gap >= 0.0, "constraints.sim_gap", "must be >= 0");
  require(constraints.prosody_gap >= 0.0, "constraints.prosody_gap", "must be >= 0");
  require(eval_items >= 0, "eval_items", "must be >= 0");
  require(kl_prompts >= 1, "kl_prompts", "must be >= 1");
  require(kl_samples >= 1, "kl_samples", "must be >= 1");
}

std::string TrainingConfig::to_text() const {
  std::string out = "schema_version = " + std::to_string(kSchemaVersion) + "\n";
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

TrainingConfig TrainingConfig::from_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    }
    entries.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }

  std::map<std::string, std::string> seen;
  for (const auto& [k, v] : entries) {
    if (!seen.emplace(k, v).second) throw ConfigError(k, "duplicate key");
  }
  const auto sv = seen.find("schema_version");
  if (sv == seen.end()) throw ConfigError("schema_version", "missing");
  if (parse_number<int>("schema_version", sv->second) != kSchemaVersion) {
    throw ConfigError("schema_version", "unsupported version " + sv->second);
  }

  TrainingConfig c;
  if (const auto st = seen.find("stage"); st != seen.end()) {
    try {
      c = defaults(parse_stage(st->second));
    } catch (const std::invalid_argument& e) {
      throw ConfigError("stage", e.what());
    }
  }
  for (const auto& [k, v] : entries) {
    if (k == "schema_version") continue;
    const auto& fs = fields();
    const auto it = std::find_if(fs.begin(), fs.end(),
                                 [&](const Field& f) { return f.key == k; });
    if (it == fs.end()) throw ConfigError(k, "unknown key");
    it->set(c, v);
  }
  c.validate();
  return c;
}

TrainingConfig TrainingConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

void TrainingConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write config " + path.string());
  out << to_text();
}

std::string TrainingConfig::hash() const { return sha256_hex(to_text()); }

// ---------------------------------------------------------------------------

namespace {

void write_or_throw(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainingLog::write_steps_csv(const std::filesystem::path& path) const {
  std::string out = "stage,step,dpo,ce,combined,reward_margin,grad_norm,config_hash\n";
  for (const auto& r : steps) {
    out += r.stage + "," + std::to_string(r.step) + "," + csv_number(r.dpo) + "," +
           csv_number(r.ce) + "," + csv_number(r.combined) + "," +
           csv_number(r.reward_margin) + "," + csv_number(r.grad_norm) + "," +
           config_hash + "\n";
  }
  write_or_throw(path, out);
}

void TrainingLog::write_evals_csv(const std::filesystem::path& path) const {
  std::string out = "step,cer,spk_sim,prosody,heldout_ce,kl,kl_stderr,stage,config_hash\n";
  for (const auto& r : evals) {
    out += std::to_string(r.step) + "," + csv_number(r.mean.cer) + "," +
           csv_number(r.mean.spk_sim) + "," + csv_number(r.mean.prosody_rmse) + "," +
           csv_number(r.heldout_ce) + "," + csv_number(r.kl) + "," +
           csv_number(r.kl_stderr) + "," + stage + "," + config_hash + "\n";
  }
  write_or_throw(path, out);
}

// ---------------------------------------------------------------------------

namespace {

/// AdamW with decoupled weight decay. One-row parameters (norm gains) are
/// not decayed.
class AdamW {
 public:
  AdamW(const TrainingConfig& c, const Policy& policy) : c_(c) {
    for (const auto& p : policy.parameters()) {
      m_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
      v_.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }

  double rate(std::int64_t t) const {
    if (c_.warmup_steps > 0 && t < c_.warmup_steps) {
      return c_.learning_rate * static_cast<double>(t + 1) /
             static_cast<double>(c_.warmup_steps);
    }
    return c_.learning_rate;
  }

  /// Computes updated values without touching the policy; returns false if
  /// any would be non-finite.
  bool propose(const Policy& policy, const std::vector<Matrix>& grads,
               std::vector<Matrix>& values, std::vector<Matrix>& m,
               std::vector<Matrix>& v) const {
    const double t = static_cast<double>(t_ + 1);
    const double bc1 = 1.0 - std::pow(c_.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(c_.adam_beta2, t);
    const double lr = rate(t_);
    const auto params = policy.parameters();
    values.resize(params.size());
    m.resize(params.size());
    v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix& g = grads[i];
      m[i] = c_.adam_beta1 * m_[i] + (1.0 - c_.adam_beta1) * g;
      v[i] = c_.adam_beta2 * v_[i] + (1.0 - c_.adam_beta2) * g.cwiseProduct(g);
      const Matrix& w = params[i].tensor.value();
      Matrix step = (m[i] / bc1).array() / ((v[i] / bc2).array().sqrt() + c_.adam_eps);
      values[i] = w - lr * step;
      if (w.rows() > 1 && c_.weight_decay > 0.0) {
        values[i] -= lr * c_.weight_decay * w;
      }
      if (!values[i].allFinite()) return false;
    }
    return true;
  }

  void commit(Policy& policy, const std::vector<Matrix>& values, std::vector<Matrix> m,
              std::vector<Matrix> v) {
    const auto params = policy.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor t = params[i].tensor;
      t.assign(values[i]);
    }
    m_ = std::move(m);
    v_ = std::move(v);
    ++t_;
  }

 private:
  const TrainingConfig& c_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t t_ = 0;
};

struct StepLoss {
  Tensor loss;
  double dpo = 0.0;
  double ce = 0.0;
  double combined = 0.0;
  double reward_margin = 0.0;
};

using StepFn = std::function<StepLoss(const Policy&, std::int64_t)>;

std::span<const CorpusItem> eval_slice(const TrainingConfig& c,
                                       std::span<const CorpusItem> heldout) {
  if (c.eval_items > 0 && static_cast<std::size_t>(c.eval_items) < heldout.size()) {
    return heldout.first(static_cast<std::size_t>(c.eval_items));
  }
  return heldout;
}

EvalRecord eval_record(const TrainingConfig& c, const Policy& policy,
                       const EvalContext& eval, const Policy* reference,
                       std::int64_t step) {
  const auto items = eval_slice(c, eval.heldout);
  const EvalReport report = evaluate(policy, *eval.world, items);
  EvalRecord r;
  r.step = step;
  r.mean = report.mean;
  r.heldout_ce = report.heldout_ce;
  if (reference) {
    const std::size_t n =
        std::min(items.size(), static_cast<std::size_t>(c.kl_prompts));
    std::vector<TokenSequence> prompts;
    for (std::size_t i = 0; i < n; ++i) prompts.push_back(items[i].prompt);
    const KlEstimate kl =
        kl_estimate(policy, *reference, prompts, static_cast<std::size_t>(c.kl_samples),
                    derive_seed(c.seed, "kl-eval", static_cast<std::uint64_t>(step)));
    r.kl = kl.mean;
    r.kl_stderr = kl.stderr_;
  }
  return r;
}

bool finite_loss(const StepLoss& s) {
  return std::isfinite(s.dpo) && std::isfinite(s.ce) && std::isfinite(s.combined);
}

TrainResult train_loop(const TrainingConfig& c, Policy policy, const StepFn& step_fn,
                       const EvalContext* eval, const Policy* reference) {
  c.validate();
  TrainingLog log;
  log.stage = std::string(stage_name(c.stage));
  log.config_hash = c.hash();
  policy.seed_lineage.push_back(c.seed);
  AdamW opt(c, policy);

  auto diverged = [&](const std::string& why, std::int64_t step) -> TrainingDiverged {
    return TrainingDiverged(log.stage + " diverged at step " + std::to_string(step) +
                                ": " + why,
                            policy.clone(), log);
  };

  std::vector<Matrix> grads;
  std::vector<Matrix> values, m, v;
  for (std::int64_t step = 0; step < c.steps; ++step) {
    if (eval && step % c.eval_interval == 0) {
      log.evals.push_back(eval_record(c, policy, *eval, reference, step));
    }
    policy.zero_grad();
    StepLoss s;
    try {
      s = step_fn(policy, step);
    } catch (const std::domain_error& e) {
      throw diverged(e.what(), step);
    }
    if (!finite_loss(s)) throw diverged("non-finite loss", step);
    try {
      backward(s.loss);
    } catch (const std::domain_error& e) {
      throw diverged(e.what(), step);
    }

    grads.clear();
    double sq = 0.0;
    for (const auto& p : policy.parameters()) {
      grads.push_back(p.tensor.grad());
      sq += grads.back().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw diverged("non-finite gradient", step);
    if (c.grad_clip > 0.0 && norm > c.grad_clip) {
      const double f = c.grad_clip / norm;
      for (auto& g : grads) g *= f;
    }
    if (!opt.propose(policy, grads, values, m, v)) {
      throw diverged("non-finite parameter update", step);
    }
    opt.commit(policy, values, std::move(m), std::move(v));
    policy.zero_grad();
    ++policy.step;

    log.steps.push_back({log.stage, step, s.dpo, s.ce, s.combined, s.reward_margin, norm});
  }
  if (eval) log.evals.push_back(eval_record(c, policy, *eval, reference, c.steps));
  return {std::move(policy), std::move(log)};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, "epoch", epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

SftStream corpus_stream(std::span<const CorpusItem> corpus, int batch_size,
                        std::uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("corpus_stream: empty corpus");
  if (batch_size < 1) throw std::invalid_argument("corpus_stream: batch_size < 1");
  std::vector<SftExample> examples;
  for (const auto& item : corpus) examples.push_back({item.prompt, item.reference});
  return [examples = std::move(examples), batch_size, seed](std::int64_t step) {
    const std::size_t n = examples.size();
    std::vector<SftExample> batch;
    std::uint64_t cached_epoch = static_cast<std::uint64_t>(-1);
    std::vector<std::size_t> order;
    for (int j = 0; j < batch_size; ++j) {
      const auto g = static_cast<std::uint64_t>(step) * batch_size + j;
      const std::uint64_t epoch = g / n;
      if (epoch != cached_epoch) {
        order = epoch_order(n, seed, epoch);
        cached_epoch = epoch;
      }
      batch.push_back(examples[order[g % n]]);
    }
    return batch;
  };
}

TrainResult continue_sft(const TrainingConfig& config, const Policy& start,
                         const SftStream& stream, const EvalContext* eval) {
  StepFn fn = [&](const Policy& policy, std::int64_t step) {
    const auto batch = stream(step);
    StepLoss s;
    s.loss = ce_loss(policy, batch);
    s.ce = s.loss.item();
    s.combined = s.ce;
    return s;
  };
  return train_loop(config, start.clone(), fn, eval, nullptr);
}

TrainResult run_sft(const TrainingConfig& config, std::span<const CorpusItem> corpus,
                    const EvalContext* eval) {
  config.validate();
  Policy policy = Policy::build(config.arch);
  return continue_sft(config, policy,
                      corpus_stream(corpus, config.batch_size,
                                    derive_seed(config.seed, "sft-data")),
                      eval);
}

// ---------------------------------------------------------------------------

PairStream::PairStream(std::span<const PrefsetRecord> records, int batch_size,
                       std::uint64_t seed)
    : records_(records), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw std::invalid_argument("PairStream: batch_size < 1");
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].example) accepted_.push_back(i);
  }
  if (accepted_.empty()) {
    throw std::invalid_argument("PairStream: no accepted preference records");
  }
}

std::vector<PairDraw> PairStream::batch(std::int64_t step) const {
  const std::size_t n = accepted_.size();
  std::vector<PairDraw> out;
  std::uint64_t cached_epoch = static_cast<std::uint64_t>(-1);
  std::vector<std::size_t> order;
  for (int j = 0; j < batch_size_; ++j) {
    const auto g = static_cast<std::uint64_t>(step) * batch_size_ + j;
    const std::uint64_t epoch = g / n;
    if (epoch != cached_epoch) {
      order = epoch_order(n, seed_, epoch);
      cached_epoch = epoch;
    }
    const std::size_t rec = accepted_[order[g % n]];
    const auto [w, l] = sample_pair(*records_[rec].example, seed_, epoch);
    out.push_back({rec, w, l});
  }
  return out;
}

std::vector<PrefsetRecord> training_records(std::span<const PrefsetRecord> records,
                                            Stage stage) {
  if (stage == Stage::Sft) {
    throw std::invalid_argument("training_records: sft has no preference pairs");
  }
  if (stage != Stage::CombinedRankings) {
    return {records.begin(), records.end()};
  }
  std::vector<ItemCandidates> items;
  items.reserve(records.size());
  for (const auto& r : records) items.push_back(r.candidates);
  return build_dataset(items, Selection::CombinedRankings, Constraints::none());
}

TrainResult run_preference_stage(const TrainingConfig& config,
                                 const Policy& sft_checkpoint,
                                 std::span<const PrefsetRecord> dataset,
                                 const EvalContext* eval,
                                 std::span<const CorpusItem> sft_corpus) {
  config.validate();
  if (config.stage == Stage::Sft) {
    throw ConfigError("stage", "preference training needs dpo-only, mpo or combined-rankings");
  }
  if (sft_checkpoint.config() != config.arch) {
    throw ConfigError("arch", "checkpoint architecture does not match the config");
  }
  const std::vector<PrefsetRecord> records = training_records(dataset, config.stage);
  const PairStream pairs(records, config.batch_size,
                         derive_seed(config.seed, "pairs"));
  const Policy reference = sft_checkpoint.clone_frozen();

  SftStream ce_stream;
  if (config.ce_source == CeSource::HeldOutSftData) {
    if (sft_corpus.empty()) {
      throw ConfigError("ce_source", "sft-data needs an SFT corpus");
    }
    ce_stream = corpus_stream(sft_corpus, config.batch_size,
                              derive_seed(config.seed, "ce-data"));
  }

  // Reference log-probabilities are fixed; cache them per candidate.
  std::vector<std::map<std::size_t, double>> ref_cache(records.size());
  auto ref_logprob = [&](std::size_t rec, std::size_t cand) {
    auto& cache = ref_cache[rec];
    if (auto it = cache.find(cand); it != cache.end()) return it->second;
    NoGradGuard no_grad;
    const auto& ic = records[rec].candidates;
    const double lp =
        sequence_logprob(reference, ic.prompt, ic.candidates[cand].y).total.item();
    cache.emplace(cand, lp);
    return lp;
  };

  const bool dpo_only = config.stage == Stage::DpoOnly;
  StepFn fn = [&](const Policy& policy, std::int64_t step) {
    const auto draws = pairs.batch(step);
    std::vector<PreferencePair> batch;
    std::vector<ReferenceLogProbs> ref;
    for (const auto& d : draws) {
      const auto& ic = records[d.record].candidates;
      batch.push_back({ic.prompt, ic.candidates[d.w].y, ic.candidates[d.l].y});
      ref.push_back({ref_logprob(d.record, d.w), ref_logprob(d.record, d.l)});
    }
    std::vector<SftExample> ce_batch;
    if (ce_stream) ce_batch = ce_stream(step);
    const LossBreakdown b =
        mpo_loss(policy, batch, ref, ce_batch, config.beta, dpo_only ? 1.0 : config.lambda);
    StepLoss s;
    s.dpo = b.dpo;
    s.ce = b.ce;
    s.reward_margin = b.reward_margin;
    if (dpo_only) {
      s.loss = b.dpo_term;
      s.combined = b.dpo;
    } else {
      s.loss = b.loss;
      s.combined = b.combined;
    }
    return s;
  };
  return train_loop(config, sft_checkpoint.clone(), fn, eval, &reference);
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json scores_json(const MetricScores& s) {
  return {{"cer", s.cer}, {"spk_sim", s.spk_sim}, {"prosody", s.prosody_rmse}};
}

MetricScores scores_from_json(const nlohmann::json& j) {
  MetricScores s;
  s.cer = j.at("cer").get<double>();
  s.spk_sim = j.at("spk_sim").get<double>();
  s.prosody_rmse = j.at("prosody").get<double>();
  return s;
}

}  // namespace

void EvalReport::save(const std::filesystem::path& path) const {
  nlohmann::json items_json = nlohmann::json::array();
  for (const auto& s : items) items_json.push_back(scores_json(s));
  const nlohmann::json j = {{"format", "mpo-eval"},
                            {"version", 1},
                            {"name", name},
                            {"heldout_digest", heldout_digest},
                            {"mean", scores_json(mean)},
                            {"heldout_ce", heldout_ce},
                            {"items", items_json}};
  write_or_throw(path, j.dump(1) + "\n");
}

EvalReport EvalReport::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open eval report " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != "mpo-eval") {
      throw std::runtime_error("not an eval report");
    }
    EvalReport r;
    r.name = j.at("name").get<std::string>();
    r.heldout_digest = j.at("heldout_digest").get<std::string>();
    r.mean = scores_from_json(j.at("mean"));
    r.heldout_ce = j.at("heldout_ce").get<double>();
    for (const auto& s : j.at("items")) r.items.push_back(scores_from_json(s));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed eval report " + path.string() + ": " + e.what());
  }
}

std::string corpus_digest(std::span<const CorpusItem> corpus) {
  std::string text;
  for (const auto& item : corpus) text += corpus_line(item) + "\n";
  return sha256_hex(text);
}

double heldout_ce(const Policy& policy, std::span<const CorpusItem> heldout) {
  if (heldout.empty()) throw std::invalid_argument("heldout_ce: no items");
  std::vector<double> ce(heldout.size());
  parallel_for(heldout.size(), [&](std::size_t i) {
    NoGradGuard no_grad;
    ce[i] = ce_loss(policy, heldout[i].prompt, heldout[i].reference).item();
  });
  return std::accumulate(ce.begin(), ce.end(), 0.0) / static_cast<double>(ce.size());
}

EvalReport evaluate(const Policy& policy, const SynthWorld& world,
                    std::span<const CorpusItem> heldout, std::string name) {
  if (heldout.empty()) throw std::invalid_argument("evaluate: no held-out items");
  EvalReport r;
  r.name = std::move(name);
  r.heldout_digest = corpus_digest(heldout);
  r.items.resize(heldout.size());
  parallel_for(heldout.size(), [&](std::size_t i) {
    NoGradGuard no_grad;
    r.items[i] = score(world, heldout[i], greedy(policy, heldout[i].prompt));
  });
  r.mean = MetricScores{0.0, 0.0, 0.0};
  for (const auto& s : r.items) {
    r.mean.cer += s.cer;
    r.mean.spk_sim += s.spk_sim;
    r.mean.prosody_rmse += s.prosody_rmse;
  }
  const double n = static_cast<double>(r.items.size());
  r.mean.cer /= n;
  r.mean.spk_sim /= n;
  r.mean.prosody_rmse /= n;
  r.heldout_ce = heldout_ce(policy, heldout);
  return r;
}

// ---------------------------------------------------------------------------

ComparisonTable compare_experiments(std::span<const EvalReport> reports) {
  if (reports.empty()) throw std::invalid_argument("compare: no reports");
  for (const auto& r : reports) {
    if (r.heldout_digest != reports.front().heldout_digest) {
      throw std::invalid_argument("compare: held-out digest of '" + r.name +
                                  "' differs from '" + reports.front().name + "'");
    }
  }
  ComparisonTable t;
  for (const auto& r : reports) {
    ComparisonRow row;
    row.name = r.name;
    row.scores = r.mean;
    const MetricScores& base = reports.front().mean;
    row.delta.cer = r.mean.cer - base.cer;
    row.delta.spk_sim = r.mean.spk_sim - base.spk_sim;
    row.delta.prosody_rmse = r.mean.prosody_rmse - base.prosody_rmse;
    t.rows.push_back(row);
  }
  for (std::size_t k = 0; k < kAllMetrics.size(); ++k) {
    const Metric m = kAllMetrics[k];
    double best = t.rows.front().scores.get(m);
    for (const auto& row : t.rows) {
      if (better(m, row.scores.get(m), best)) best = row.scores.get(m);
    }
    for (auto& row : t.rows) row.best[k] = row.scores.get(m) == best;
  }
  return t;
}

std::string ComparisonTable::to_csv() const {
  std::string out = "name";
  for (Metric m : kAllMetrics) out += "," + std::string(metric_name(m));
  for (Metric m : kAllMetrics) out += ",delta_" + std::string(metric_name(m));
  for (Metric m : kAllMetrics) out += ",best_" + std::string(metric_name(m));
  out += "\n";
  for (const auto& r : rows) {
    out += r.name;
    for (Metric m : kAllMetrics) out += "," + csv_number(r.scores.get(m));
    for (Metric m : kAllMetrics) out += "," + csv_number(r.delta.get(m));
    for (bool b : r.best) out += b ? ",1" : ",0";
    out += "\n";
  }
  return out;
}

std::string ComparisonTable::to_text() const {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"experiment"};
  for (Metric m : kAllMetrics) header.emplace_back(metric_name(m));
  for (Metric m : kAllMetrics) header.push_back("d_" + std::string(metric_name(m)));
  cells.push_back(header);
  for (const auto& r : rows) {
    std::vector<std::string> line{r.name};
    for (std::size_t k = 0; k < kAllMetrics.size(); ++k) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(4) << r.scores.get(kAllMetrics[k])
        << (r.best[k] ? " *" : "  ");
      line.push_back(s.str());
    }
    for (Metric m : kAllMetrics) {
      std::ostringstream s;
      s << std::showpos << std::fixed << std::setprecision(4) << r.delta.get(m);
      line.push_back(s.str());
    }
    cells.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::string out;
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      std::string cell = line[i];
      if (i == 0) {
        cell.append(width[i] - cell.size(), ' ');
      } else {
        cell.insert(0, width[i] - cell.size(), ' ');
      }
      out += (i ? "  " : "") + cell;
    }
    out += "\n";
  }
  out += "* best per metric; deltas relative to " +
         (rows.empty() ? std::string("-") : rows.front().name) + "\n";
  return out;
}

}  // namespace mpo
