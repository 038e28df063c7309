#include "mpo/prefset.hpp"

#include "mpo/parallel.hpp"
#include "mpo/seeds.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace mpo {

std::vector<ItemCandidates> generate_candidates(const Policy& model,
                                                const SynthWorld& world,
                                                std::span<const CorpusItem> corpus,
                                                std::size_t n_per_prompt,
                                                const SamplingConfig& sampling,
                                                std::uint64_t seed) {
  if (n_per_prompt < 2) {
    throw std::invalid_argument("generate_candidates: n_per_prompt must be >= 2");
  }
  std::vector<ItemCandidates> out(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    ItemCandidates ic;
    ic.item = i;
    ic.prompt = corpus[i].prompt;
    for (std::size_t k = 0; k < n_per_prompt; ++k) {
      CandidateRecord r;
      r.index = k;
      r.seed = derive_seed(seed, "candidate", i, k);
      r.y = sample(model, corpus[i].prompt, sampling, r.seed);
      r.scores = score(world, corpus[i], r.y);
      ic.candidates.push_back(std::move(r));
    }
    out[i] = std::move(ic);
  });
  return out;
}

namespace {

std::vector<std::size_t> ordered(std::span<const MetricScores> scores, Metric m,
                                 bool best) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double sa = scores[a].get(m);
    const double sb = scores[b].get(m);
    return best ? better(m, sa, sb) : better(m, sb, sa);
  });
  return idx;
}

bool contains(const std::vector<std::size_t>& v, std::size_t x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

void push_unique(std::vector<std::size_t>& v, std::size_t x) {
  if (x != kNoCandidate && !contains(v, x)) v.push_back(x);
}

}  // namespace

std::vector<std::size_t> best_first(std::span<const MetricScores> scores, Metric m) {
  return ordered(scores, m, true);
}

std::vector<std::size_t> worst_first(std::span<const MetricScores> scores, Metric m) {
  return ordered(scores, m, false);
}

void resolve_overlap(std::vector<Contribution>& contributions,
                     std::span<const MetricScores> scores) {
  std::vector<std::size_t> w_set;
  for (const auto& c : contributions) push_unique(w_set, c.w);
  for (auto& c : contributions) {
    if (c.l == kNoCandidate || !contains(w_set, c.l)) continue;
    c.l = kNoCandidate;
    for (std::size_t cand : worst_first(scores, c.metric)) {
      if (!contains(w_set, cand)) {
        c.l = cand;
        break;
      }
    }
  }
}

PrefsetOutcome build_preference_set(std::span<const MetricScores> scores,
                                    std::span<const Metric> metrics,
                                    const Constraints& constraints,
                                    std::size_t item) {
  if (scores.size() < 2) {
    throw std::invalid_argument("build_preference_set: needs >= 2 candidates");
  }
  if (metrics.empty()) {
    throw std::invalid_argument("build_preference_set: no metric enabled");
  }
  std::vector<Contribution> contributions;
  for (Metric m : metrics) {
    contributions.push_back({m, best_first(scores, m).front(),
                             worst_first(scores, m).front()});
  }
  resolve_overlap(contributions, scores);

  std::vector<Contribution> kept;
  std::string reason;
  for (const auto& c : contributions) {
    if (!constraints.enforce) {
      kept.push_back(c);
      continue;
    }
    const std::string name(metric_name(c.metric));
    if (c.l == kNoCandidate) {
      reason += name + ": no dispreferred candidate after overlap resolution; ";
      continue;
    }
    if (constraints.winner_cer_zero && scores[c.w].cer != 0.0) {
      reason += name + ": preferred candidate has non-zero CER; ";
      continue;
    }
    const double sw = scores[c.w].get(c.metric);
    const double sl = scores[c.l].get(c.metric);
    if (!better(c.metric, sw, sl) || std::abs(sw - sl) < constraints.gap(c.metric)) {
      reason += name + ": score gap below threshold; ";
      continue;
    }
    kept.push_back(c);
  }

  PreferenceExample ex;
  ex.item = item;
  for (const auto& c : kept) {
    push_unique(ex.w_set, c.w);
    if (c.l != kNoCandidate) push_unique(ex.l_set, c.l);
  }
  ex.provenance = std::move(kept);
  PrefsetOutcome out;
  if (ex.w_set.empty() || ex.l_set.empty()) {
    if (reason.empty()) reason = "empty preferred or dispreferred set; ";
    reason.resize(reason.size() - 2);
    out.rejection = std::move(reason);
    return out;
  }
  out.example = std::move(ex);
  return out;
}

std::pair<std::size_t, std::size_t> sample_pair(const PreferenceExample& example,
                                                std::uint64_t seed,
                                                std::uint64_t epoch) {
  if (example.w_set.empty() || example.l_set.empty()) {
    throw std::invalid_argument("sample_pair: empty preference set");
  }
  std::mt19937_64 rng(derive_seed(seed, "pair", example.item, epoch));
  std::uniform_int_distribution<std::size_t> w(0, example.w_set.size() - 1);
  std::uniform_int_distribution<std::size_t> l(0, example.l_set.size() - 1);
  const std::size_t wi = w(rng);
  const std::size_t li = l(rng);
  return {example.w_set[wi], example.l_set[li]};
}

std::vector<std::size_t> competition_ranks(std::span<const MetricScores> scores,
                                           Metric m) {
  std::vector<std::size_t> ranks(scores.size(), 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (better(m, scores[j].get(m), scores[i].get(m))) ++ranks[i];
    }
  }
  return ranks;
}

std::pair<std::size_t, std::size_t> combined_rankings_baseline(
    std::span<const MetricScores> scores, std::span<const Metric> metrics) {
  if (scores.size() < 2) {
    throw std::invalid_argument("combined_rankings_baseline: needs >= 2 candidates");
  }
  std::vector<std::size_t> total(scores.size(), 0);
  for (Metric m : metrics) {
    const auto r = competition_ranks(scores, m);
    for (std::size_t i = 0; i < r.size(); ++i) total[i] += r[i];
  }
  std::size_t w = 0;
  std::size_t l = 0;
  for (std::size_t i = 1; i < total.size(); ++i) {
    if (total[i] < total[w]) w = i;
    if (total[i] >= total[l]) l = i;
  }
  return {w, l};
}

Selection parse_selection(std::string_view name) {
  for (Selection s : {Selection::Mpo, Selection::Cer, Selection::SpeakerSim,
                      Selection::Prosody, Selection::CombinedRankings}) {
    if (selection_name(s) == name) return s;
  }
  throw std::invalid_argument("unknown selection '" + std::string(name) + "'");
}

std::string_view selection_name(Selection s) {
  switch (s) {
    case Selection::Mpo: return "mpo";
    case Selection::Cer: return "cer";
    case Selection::SpeakerSim: return "spk_sim";
    case Selection::Prosody: return "prosody";
    case Selection::CombinedRankings: return "combined-rankings";
  }
  return "?";
}

std::vector<Metric> selection_metrics(Selection s) {
  switch (s) {
    case Selection::Cer: return {Metric::Cer};
    case Selection::SpeakerSim: return {Metric::SpeakerSim};
    case Selection::Prosody: return {Metric::Prosody};
    case Selection::Mpo:
    case Selection::CombinedRankings:
      return {kAllMetrics.begin(), kAllMetrics.end()};
  }
  return {};
}

namespace {

std::vector<MetricScores> scores_of(const ItemCandidates& ic) {
  std::vector<MetricScores> s;
  s.reserve(ic.candidates.size());
  for (const auto& c : ic.candidates) s.push_back(c.scores);
  return s;
}

}  // namespace

std::vector<PrefsetRecord> build_dataset(std::span<const ItemCandidates> items,
                                         Selection selection,
                                         const Constraints& constraints,
                                         PrefsetReport* report) {
  const auto metrics = selection_metrics(selection);
  std::vector<PrefsetRecord> out;
  out.reserve(items.size());
  PrefsetReport local;
  for (const auto& ic : items) {
    PrefsetRecord rec;
    rec.candidates = ic;
    const auto scores = scores_of(ic);
    if (selection == Selection::CombinedRankings) {
      const auto [w, l] = combined_rankings_baseline(scores, metrics);
      PreferenceExample ex;
      ex.item = ic.item;
      ex.w_set = {w};
      ex.l_set = {l};
      rec.example = std::move(ex);
    } else {
      auto outcome = build_preference_set(scores, metrics, constraints, ic.item);
      rec.example = std::move(outcome.example);
      rec.rejection = std::move(outcome.rejection);
    }
    // Distinct indices can carry the same token sequence; such l members
    // would form degenerate pairs.
    if (rec.example) {
      auto& ex = *rec.example;
      auto same_as_winner = [&](std::size_t l) {
        return std::any_of(ex.w_set.begin(), ex.w_set.end(), [&](std::size_t w) {
          return ic.candidates[w].y == ic.candidates[l].y;
        });
      };
      std::erase_if(ex.l_set, same_as_winner);
      for (auto& c : ex.provenance) {
        if (c.l != kNoCandidate && same_as_winner(c.l)) c.l = kNoCandidate;
      }
      if (ex.l_set.empty()) {
        rec.example.reset();
        rec.rejection = "dispreferred responses duplicate preferred ones";
      }
    }
    if (rec.example) {
      ++local.accepted;
    } else {
      ++local.rejected;
      local.reasons.emplace_back(ic.item, rec.rejection);
    }
    out.push_back(std::move(rec));
  }
  if (report) *report = std::move(local);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json candidates_json(const ItemCandidates& ic) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : ic.candidates) {
    cands.push_back({{"index", c.index},
                     {"seed", c.seed},
                     {"y", c.y.ids},
                     {"cer", c.scores.cer},
                     {"spk_sim", c.scores.spk_sim},
                     {"prosody", c.scores.prosody_rmse}});
  }
  return {{"item", ic.item}, {"prompt", ic.prompt.ids}, {"candidates", cands}};
}

ItemCandidates candidates_from_json(const nlohmann::json& j) {
  ItemCandidates ic;
  ic.item = j.at("item").get<std::size_t>();
  ic.prompt = prompt(j.at("prompt").get<std::vector<TokenId>>());
  for (const auto& c : j.at("candidates")) {
    CandidateRecord r;
    r.index = c.at("index").get<std::size_t>();
    r.seed = c.at("seed").get<std::uint64_t>();
    r.y = response(c.at("y").get<std::vector<TokenId>>());
    r.scores.cer = c.at("cer").get<double>();
    r.scores.spk_sim = c.at("spk_sim").get<double>();
    r.scores.prosody_rmse = c.at("prosody").get<double>();
    if (r.index != ic.candidates.size()) {
      throw std::runtime_error("candidate indices are not consecutive");
    }
    ic.candidates.push_back(std::move(r));
  }
  return ic;
}

template <typename F>
void read_lines(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      f(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + " line " + std::to_string(lineno) +
                               ": " + e.what());
    }
  }
}

}  // namespace

void save_candidates(const std::filesystem::path& path,
                     std::span<const ItemCandidates> items) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ic : items) out << candidates_json(ic).dump() << "\n";
}

std::vector<ItemCandidates> load_candidates(const std::filesystem::path& path) {
  std::vector<ItemCandidates> out;
  read_lines(path, [&](const nlohmann::json& j) { out.push_back(candidates_from_json(j)); });
  if (out.empty()) throw std::runtime_error(path.string() + " has no candidates");
  return out;
}

void save_prefset(const std::filesystem::path& path,
                  std::span<const PrefsetRecord> records, Selection selection) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::json j = candidates_json(r.candidates);
    j["selection"] = selection_name(selection);
    if (r.example) {
      j["status"] = "accepted";
      j["w_set"] = r.example->w_set;
      j["l_set"] = r.example->l_set;
      auto& prov = j["provenance"] = nlohmann::json::array();
      for (const auto& c : r.example->provenance) {
        nlohmann::json p = {{"metric", metric_name(c.metric)}};
        p["w"] = c.w == kNoCandidate ? nlohmann::json() : nlohmann::json(c.w);
        p["l"] = c.l == kNoCandidate ? nlohmann::json() : nlohmann::json(c.l);
        prov.push_back(p);
      }
    } else {
      j["status"] = "rejected";
      j["reason"] = r.rejection;
    }
    out << j.dump() << "\n";
  }
}

std::vector<PrefsetRecord> load_prefset(const std::filesystem::path& path) {
  std::vector<PrefsetRecord> out;
  read_lines(path, [&](const nlohmann::json& j) {
    PrefsetRecord r;
    r.candidates = candidates_from_json(j);
    const auto status = j.at("status").get<std::string>();
    if (status == "accepted") {
      PreferenceExample ex;
      ex.item = r.candidates.item;
      ex.w_set = j.at("w_set").get<std::vector<std::size_t>>();
      ex.l_set = j.at("l_set").get<std::vector<std::size_t>>();
      for (const auto& p : j.at("provenance")) {
        Contribution c;
        c.metric = parse_metric(p.at("metric").get<std::string>());
        c.w = p.at("w").is_null() ? kNoCandidate : p.at("w").get<std::size_t>();
        c.l = p.at("l").is_null() ? kNoCandidate : p.at("l").get<std::size_t>();
        ex.provenance.push_back(c);
      }
      const std::size_t n = r.candidates.candidates.size();
      for (std::size_t w : ex.w_set) {
        if (w >= n || contains(ex.l_set, w)) {
          throw std::runtime_error("invalid w_set index");
        }
      }
      for (std::size_t l : ex.l_set) {
        if (l >= n) throw std::runtime_error("invalid l_set index");
      }
      if (ex.w_set.empty() || ex.l_set.empty()) {
        throw std::runtime_error("accepted record with an empty set");
      }
      r.example = std::move(ex);
    } else if (status == "rejected") {
      r.rejection = j.at("reason").get<std::string>();
    } else {
      throw std::runtime_error("unknown record status '" + status + "'");
    }
    out.push_back(std::move(r));
  });
  if (out.empty()) throw std::runtime_error(path.string() + " has no records");
  return out;
}

}  // namespace mpo
