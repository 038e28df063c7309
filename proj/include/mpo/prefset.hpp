#pragma once

#include "mpo/metrics.hpp"
#include "mpo/model.hpp"
#include "mpo/synthtask.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mpo {

struct CandidateRecord {
  TokenSequence y;
  MetricScores scores;
  std::size_t index = 0;
  std::uint64_t seed = 0;
};

struct ItemCandidates {
  std::size_t item = 0;
  TokenSequence prompt;
  std::vector<CandidateRecord> candidates;
};

/// Samples `n_per_prompt` responses per item, candidate k of item i using
/// derive_seed(seed, "candidate", i, k), and scores each against the item's
/// reference.
std::vector<ItemCandidates> generate_candidates(const Policy& model,
                                                const SynthWorld& world,
                                                std::span<const CorpusItem> corpus,
                                                std::size_t n_per_prompt,
                                                const SamplingConfig& sampling,
                                                std::uint64_t seed);

/// Filtering applied after overlap resolution. A metric's contribution
/// (its w pick and l pick) survives only if the w pick has CER 0, the w pick
/// is strictly better than the l pick, and their gap reaches the metric's
/// threshold.
struct Constraints {
  bool enforce = true;
  bool winner_cer_zero = true;
  double cer_gap = 0.0;
  double sim_gap = 0.1;
  double prosody_gap = 0.1;

  double gap(Metric m) const {
    switch (m) {
      case Metric::Cer: return cer_gap;
      case Metric::SpeakerSim: return sim_gap;
      case Metric::Prosody: return prosody_gap;
    }
    return 0.0;
  }
  static Constraints none() {
    Constraints c;
    c.enforce = false;
    return c;
  }
};

inline constexpr std::size_t kNoCandidate = static_cast<std::size_t>(-1);

/// Which candidates a metric put into each set.
struct Contribution {
  Metric metric = Metric::Cer;
  std::size_t w = kNoCandidate;
  std::size_t l = kNoCandidate;
};

struct PreferenceExample {
  std::size_t item = 0;
  std::vector<std::size_t> w_set;
  std::vector<std::size_t> l_set;
  std::vector<Contribution> provenance;
};

struct PrefsetOutcome {
  std::optional<PreferenceExample> example;
  std::string rejection;  // empty when accepted
};

/// Candidate indices from best to worst under `m`; ties by lower index.
std::vector<std::size_t> best_first(std::span<const MetricScores> scores, Metric m);
/// Candidate indices from worst to best under `m`; ties by lower index.
std::vector<std::size_t> worst_first(std::span<const MetricScores> scores, Metric m);

/// Replaces every l-set pick that also sits in the w set with the next-worst
/// candidate of the nominating metric that is not in the w set. A metric with
/// no such candidate loses its l pick. The w set is never touched.
void resolve_overlap(std::vector<Contribution>& contributions,
                     std::span<const MetricScores> scores);

/// Preference set for one item: best and worst per enabled metric,
/// deduplicated, overlap-resolved, then filtered by `constraints`.
PrefsetOutcome build_preference_set(std::span<const MetricScores> scores,
                                    std::span<const Metric> metrics,
                                    const Constraints& constraints,
                                    std::size_t item = 0);

/// Uniform independent draw of (w, l) candidate indices, fixed by
/// (seed, item, epoch).
std::pair<std::size_t, std::size_t> sample_pair(const PreferenceExample& example,
                                                std::uint64_t seed,
                                                std::uint64_t epoch);

/// Competition rank per metric (0 = best, ties share the lower rank).
std::vector<std::size_t> competition_ranks(std::span<const MetricScores> scores,
                                           Metric m);

/// Rank-sum baseline: y_w has the lowest total (ties: lowest index), y_l the
/// highest (ties: highest index).
std::pair<std::size_t, std::size_t> combined_rankings_baseline(
    std::span<const MetricScores> scores, std::span<const Metric> metrics);

enum class Selection { Mpo, Cer, SpeakerSim, Prosody, CombinedRankings };

Selection parse_selection(std::string_view name);
std::string_view selection_name(Selection s);
std::vector<Metric> selection_metrics(Selection s);

/// A preference dataset entry as stored on disk: the item's candidates and
/// either its sets or the reason it was rejected.
struct PrefsetRecord {
  ItemCandidates candidates;
  std::optional<PreferenceExample> example;
  std::string rejection;
};

struct PrefsetReport {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<std::pair<std::size_t, std::string>> reasons;
};

std::vector<PrefsetRecord> build_dataset(std::span<const ItemCandidates> items,
                                         Selection selection,
                                         const Constraints& constraints,
                                         PrefsetReport* report = nullptr);

void save_candidates(const std::filesystem::path& path,
                     std::span<const ItemCandidates> items);
std::vector<ItemCandidates> load_candidates(const std::filesystem::path& path);

void save_prefset(const std::filesystem::path& path,
                  std::span<const PrefsetRecord> records, Selection selection);
std::vector<PrefsetRecord> load_prefset(const std::filesystem::path& path);

}  // namespace mpo
