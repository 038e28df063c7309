#pragma once

#include "mpo/metrics.hpp"
#include "mpo/model.hpp"
#include "mpo/objectives.hpp"
#include "mpo/prefset.hpp"
#include "mpo/synthtask.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpo {

enum class Stage { Sft, DpoOnly, Mpo, CombinedRankings };
enum class CeSource { PreferredResponses, HeldOutSftData };

std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);

/// A configuration value failed validation; `field()` names the key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct TrainingConfig {
  static constexpr int kSchemaVersion = 1;

  Stage stage = Stage::Sft;
  ArchConfig arch;

  double beta = 0.1;
  double lambda = 10.0;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 0;
  double grad_clip = 1.0;

  int steps = 3000;
  int batch_size = 16;
  int eval_interval = 500;
  std::uint64_t seed = 1;

  SamplingConfig sampling{1.0, 0};
  int n_candidates = 10;
  Constraints constraints;
  CeSource ce_source = CeSource::PreferredResponses;

  int eval_items = 0;  // 0 evaluates every held-out item
  int kl_prompts = 16;
  int kl_samples = 2;

  /// Desk-scale defaults for a stage.
  static TrainingConfig defaults(Stage stage);

  void validate() const;
  /// Flat `key = value` text with a schema_version line; lossless.
  std::string to_text() const;
  static TrainingConfig from_text(const std::string& text);
  static TrainingConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  /// Stable hex digest of to_text().
  std::string hash() const;
};

struct StepRecord {
  std::string stage;
  std::int64_t step = 0;
  double dpo = 0.0;
  double ce = 0.0;
  double combined = 0.0;
  double reward_margin = 0.0;
  double grad_norm = 0.0;
};

struct EvalRecord {
  std::int64_t step = 0;
  MetricScores mean;
  double heldout_ce = 0.0;
  double kl = 0.0;
  double kl_stderr = 0.0;
};

struct TrainingLog {
  std::string stage;
  std::string config_hash;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  /// Header: stage,step,dpo,ce,combined,reward_margin,grad_norm,config_hash
  void write_steps_csv(const std::filesystem::path& path) const;
  /// Header: step,cer,spk_sim,prosody,heldout_ce,kl,kl_stderr,stage,config_hash
  void write_evals_csv(const std::filesystem::path& path) const;
};

/// Thrown when a loss or update stops being finite. Holds the policy as it
/// was before the failing step.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, Policy last_good, TrainingLog log)
      : std::runtime_error(what), last_good(std::move(last_good)), log(std::move(log)) {}
  Policy last_good;
  TrainingLog log;
};

/// Held-out data for periodic evaluation.
struct EvalContext {
  const SynthWorld* world = nullptr;
  std::span<const CorpusItem> heldout;
};

struct TrainResult {
  Policy policy;
  TrainingLog log;
};

/// Supplies the cross-entropy batch for a step.
using SftStream = std::function<std::vector<SftExample>(std::int64_t step)>;

/// Epoch-shuffled batches over a corpus, reshuffled every pass.
SftStream corpus_stream(std::span<const CorpusItem> corpus, int batch_size,
                        std::uint64_t seed);

TrainResult run_sft(const TrainingConfig& config, std::span<const CorpusItem> corpus,
                    const EvalContext* eval = nullptr);

/// Cross-entropy training from `start` on an arbitrary batch stream.
TrainResult continue_sft(const TrainingConfig& config, const Policy& start,
                         const SftStream& stream, const EvalContext* eval = nullptr);

/// One drawn preference pair, by record and candidate index.
struct PairDraw {
  std::size_t record = 0;
  std::size_t w = 0;
  std::size_t l = 0;
};

/// Batches of pairs over the accepted records: record order is reshuffled
/// per epoch and each record's pair is redrawn per epoch with sample_pair.
class PairStream {
 public:
  PairStream(std::span<const PrefsetRecord> records, int batch_size,
             std::uint64_t seed);
  std::vector<PairDraw> batch(std::int64_t step) const;
  std::size_t size() const { return accepted_.size(); }

 private:
  std::span<const PrefsetRecord> records_;
  std::vector<std::size_t> accepted_;
  int batch_size_;
  std::uint64_t seed_;
};

/// Pairs to train on for the given stage. CombinedRankings rebuilds the
/// records with the rank-sum baseline from the stored candidate scores.
std::vector<PrefsetRecord> training_records(std::span<const PrefsetRecord> records,
                                            Stage stage);

TrainResult run_preference_stage(const TrainingConfig& config,
                                 const Policy& sft_checkpoint,
                                 std::span<const PrefsetRecord> dataset,
                                 const EvalContext* eval = nullptr,
                                 std::span<const CorpusItem> sft_corpus = {});

struct EvalReport {
  std::string name;
  std::string heldout_digest;
  MetricScores mean;
  double heldout_ce = 0.0;
  std::vector<MetricScores> items;

  void save(const std::filesystem::path& path) const;
  static EvalReport load(const std::filesystem::path& path);
};

/// SHA-256 of the corpus in its on-disk line format.
std::string corpus_digest(std::span<const CorpusItem> corpus);

/// Greedy decoding of every held-out item, scored against its reference.
EvalReport evaluate(const Policy& policy, const SynthWorld& world,
                    std::span<const CorpusItem> heldout, std::string name = "");

/// Mean per-token cross-entropy of the held-out references.
double heldout_ce(const Policy& policy, std::span<const CorpusItem> heldout);

struct ComparisonRow {
  std::string name;
  MetricScores scores;
  MetricScores delta;              // vs the first row
  std::array<bool, 3> best{};      // per metric, in kAllMetrics order
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
  std::string to_csv() const;
  std::string to_text() const;
};

ComparisonTable compare_experiments(std::span<const EvalReport> reports);

}  // namespace mpo
