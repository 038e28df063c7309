#include "mpo/synthtask.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace mpo {

namespace {

constexpr double kOffColorPenalty = 0.5;
constexpr double kCentroidMaxCosine = 0.5;

Eigen::VectorXd random_unit(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(dim);
  do {
    for (int i = 0; i < dim; ++i) v(i) = normal(rng);
  } while (v.norm() < 1e-8);
  return v / v.norm();
}

double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

}  // namespace

void WorldConfig::validate() const {
  if (symbols < 1) throw std::invalid_argument("world.symbols must be >= 1");
  if (speakers < 1) throw std::invalid_argument("world.speakers must be >= 1");
  if (speech_count < symbols) {
    throw std::invalid_argument("world.speech_count must cover every symbol");
  }
  if (embed_dim < 2) throw std::invalid_argument("world.embed_dim must be >= 2");
  if (!(f0_min > 0.0) || !(f0_max > f0_min)) {
    throw std::invalid_argument("world F0 range must satisfy 0 < min < max");
  }
}

std::vector<int> SynthWorld::tokens_for_symbol(int symbol) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(symbol_of.size()); ++i) {
    if (symbol_of[i] == symbol) out.push_back(i);
  }
  return out;
}

SynthWorld make_world(const WorldConfig& config) {
  config.validate();
  SynthWorld w;
  w.config = config;
  w.vocab.text_count = config.symbols + config.speakers;
  w.vocab.speech_count = config.speech_count;
  w.vocab.validate();

  std::mt19937_64 rng(config.seed);
  const int n = config.speech_count;

  // Surjective symbol map: one token per symbol, the rest uniform.
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  w.symbol_of.assign(n, 0);
  std::uniform_int_distribution<int> any_symbol(0, config.symbols - 1);
  for (int i = 0; i < n; ++i) {
    w.symbol_of[order[i]] = i < config.symbols ? i : any_symbol(rng);
  }

  std::uniform_int_distribution<int> any_speaker(0, config.speakers - 1);
  w.color_of.resize(n);
  for (int i = 0; i < n; ++i) w.color_of[i] = any_speaker(rng);

  w.embeddings.resize(n, config.embed_dim);
  for (int i = 0; i < n; ++i) {
    w.embeddings.row(i) = random_unit(rng, config.embed_dim).transpose();
  }

  w.f0.resize(n);
  for (int i = 0; i < n; ++i) w.f0[i] = log_uniform(rng, config.f0_min, config.f0_max);

  // Centroids are redrawn until every pair is dissimilar enough.
  for (int s = 0; s < config.speakers; ++s) {
    Eigen::VectorXd c;
    bool ok = false;
    while (!ok) {
      c = random_unit(rng, config.embed_dim);
      ok = true;
      for (const auto& other : w.speakers) {
        if (c.dot(other.centroid) >= kCentroidMaxCosine) ok = false;
      }
    }
    const double lo = config.f0_min * 1.5;
    const double hi = config.f0_max / 1.5;
    w.speakers.push_back({c, log_uniform(rng, lo, hi)});
  }
  return w;
}

Decoded decode(const SynthWorld& world, const TokenSequence& y) {
  std::size_t n = y.ids.size();
  if (n > 0 && y.ids.back() == world.vocab.eos()) --n;
  if (n == 0) throw std::invalid_argument("decode: response has no speech tokens");

  Decoded d;
  d.transcript.reserve(n);
  d.contour.reserve(n);
  Eigen::VectorXd token_mean = Eigen::VectorXd::Zero(world.config.embed_dim);
  Eigen::VectorXd color_mean = Eigen::VectorXd::Zero(world.config.embed_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId t = y.ids[i];
    if (!world.vocab.is_speech(t)) {
      throw std::invalid_argument("decode: token " + std::to_string(t) +
                                  " is not a speech id");
    }
    const int s = world.speech_index(t);
    d.transcript.push_back(world.symbol_of[s]);
    d.contour.push_back(world.f0[s]);
    token_mean += world.embeddings.row(s).transpose();
    color_mean += world.speakers[world.color_of[s]].centroid;
  }
  d.embedding = 0.5 * token_mean / static_cast<double>(n) +
                0.5 * color_mean / static_cast<double>(n);
  return d;
}

int reference_speech_index(const SynthWorld& world, int symbol, int speaker,
                           std::size_t position, std::size_t length) {
  const double r = length > 1 ? static_cast<double>(position) /
                                    static_cast<double>(length - 1)
                              : 0.0;
  const double target =
      std::log(world.speakers[speaker].f0_scale * (1.15 - 0.3 * r));
  int best = -1;
  double best_cost = 0.0;
  for (int s : world.tokens_for_symbol(symbol)) {
    const double cost = (world.color_of[s] == speaker ? 0.0 : kOffColorPenalty) +
                        std::abs(std::log(world.f0[s]) - target);
    if (best < 0 || cost < best_cost) {
      best = s;
      best_cost = cost;
    }
  }
  return best;
}

CorpusItem make_item(const SynthWorld& world, TokenSequence prompt_seq,
                     TokenSequence reference) {
  if (prompt_seq.ids.size() < 2) {
    throw std::invalid_argument("corpus prompt needs symbols and a speaker");
  }
  CorpusItem item;
  const TokenId spk = prompt_seq.ids.back();
  item.speaker = spk - world.config.symbols;
  if (item.speaker < 0 || item.speaker >= world.config.speakers) {
    throw std::invalid_argument("corpus prompt must end with a speaker token");
  }
  for (std::size_t i = 0; i + 1 < prompt_seq.ids.size(); ++i) {
    const TokenId t = prompt_seq.ids[i];
    if (t < 0 || t >= world.config.symbols) {
      throw std::invalid_argument("corpus prompt token " + std::to_string(t) +
                                  " is not a symbol");
    }
    item.transcript.push_back(t);
  }
  item.prompt = std::move(prompt_seq);
  item.prompt.role = Role::Prompt;
  item.reference = std::move(reference);
  item.reference.role = Role::Response;
  validate(item.reference, world.vocab, item.reference.size());
  item.decoded = decode(world, item.reference);
  return item;
}

std::vector<CorpusItem> make_corpus(const SynthWorld& world, std::size_t n_items,
                                    std::uint64_t seed) {
  if (n_items < 1) throw std::invalid_argument("make_corpus: n_items must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> length(4, 16);
  std::uniform_int_distribution<int> symbol(0, world.config.symbols - 1);
  std::vector<CorpusItem> corpus;
  corpus.reserve(n_items);
  for (std::size_t i = 0; i < n_items; ++i) {
    const int speaker = static_cast<int>(i % world.config.speakers);
    const int len = length(rng);
    std::vector<TokenId> p;
    std::vector<TokenId> y;
    for (int j = 0; j < len; ++j) {
      const int k = symbol(rng);
      p.push_back(world.symbol_token(k));
      y.push_back(world.speech_token(reference_speech_index(
          world, k, speaker, static_cast<std::size_t>(j),
          static_cast<std::size_t>(len))));
    }
    p.push_back(world.speaker_token(speaker));
    y.push_back(world.vocab.eos());
    corpus.push_back(make_item(world, prompt(std::move(p)), response(std::move(y))));
  }
  return corpus;
}

MetricScores worst_scores(const SynthWorld& world, const CorpusItem& item) {
  MetricScores s;
  s.cer = cer(std::vector<int>{}, item.transcript);
  s.spk_sim = -1.0;
  s.prosody_rmse = std::log(world.config.f0_max / world.config.f0_min);
  return s;
}

MetricScores score(const SynthWorld& world, const CorpusItem& item,
                   const TokenSequence& y) {
  const bool empty =
      y.ids.empty() || (y.ids.size() == 1 && y.ids[0] == world.vocab.eos());
  if (empty) return worst_scores(world, item);
  const Decoded d = decode(world, y);
  MetricScores s;
  s.cer = cer(d.transcript, item.transcript);
  s.spk_sim = speaker_similarity(d.embedding, item.decoded.embedding);
  s.prosody_rmse = log_f0_rmse_dtw(d.contour, item.decoded.contour);
  return s;
}

// ---------------------------------------------------------------------------

void SynthWorld::save(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["format"] = "mpo-world";
  j["format_version"] = 1;
  j["config"] = {{"seed", config.seed},         {"symbols", config.symbols},
                 {"speakers", config.speakers}, {"speech_count", config.speech_count},
                 {"embed_dim", config.embed_dim}, {"f0_min", config.f0_min},
                 {"f0_max", config.f0_max}};
  j["symbol_of"] = symbol_of;
  j["color_of"] = color_of;
  j["f0"] = f0;
  auto& emb = j["embeddings"] = nlohmann::json::array();
  for (Index i = 0; i < embeddings.rows(); ++i) {
    emb.push_back(std::vector<double>(embeddings.row(i).begin(),
                                      embeddings.row(i).end()));
  }
  auto& spk = j["speakers"] = nlohmann::json::array();
  for (const auto& s : speakers) {
    spk.push_back({{"centroid", std::vector<double>(s.centroid.begin(),
                                                    s.centroid.end())},
                   {"f0_scale", s.f0_scale}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write world " + path.string());
  out << j.dump() << "\n";
}

SynthWorld SynthWorld::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open world " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed world file " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "mpo-world") {
    throw std::runtime_error("not a world file: " + path.string());
  }
  WorldConfig c;
  const auto& jc = j.at("config");
  c.seed = jc.at("seed").get<std::uint64_t>();
  c.symbols = jc.at("symbols").get<int>();
  c.speakers = jc.at("speakers").get<int>();
  c.speech_count = jc.at("speech_count").get<int>();
  c.embed_dim = jc.at("embed_dim").get<int>();
  c.f0_min = jc.at("f0_min").get<double>();
  c.f0_max = jc.at("f0_max").get<double>();
  c.validate();

  SynthWorld w;
  w.config = c;
  w.vocab.text_count = c.symbols + c.speakers;
  w.vocab.speech_count = c.speech_count;
  w.symbol_of = j.at("symbol_of").get<std::vector<int>>();
  w.color_of = j.at("color_of").get<std::vector<int>>();
  w.f0 = j.at("f0").get<std::vector<double>>();
  const auto emb = j.at("embeddings").get<std::vector<std::vector<double>>>();
  const auto n = static_cast<std::size_t>(c.speech_count);
  if (w.symbol_of.size() != n || w.color_of.size() != n || w.f0.size() != n ||
      emb.size() != n) {
    throw std::runtime_error("world tables do not cover the speech vocabulary");
  }
  w.embeddings.resize(c.speech_count, c.embed_dim);
  for (std::size_t i = 0; i < n; ++i) {
    if (emb[i].size() != static_cast<std::size_t>(c.embed_dim)) {
      throw std::runtime_error("world embedding row has wrong dimension");
    }
    for (int k = 0; k < c.embed_dim; ++k) w.embeddings(i, k) = emb[i][k];
  }
  for (const auto& s : j.at("speakers")) {
    const auto v = s.at("centroid").get<std::vector<double>>();
    w.speakers.push_back(
        {Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size())),
         s.at("f0_scale").get<double>()});
  }
  if (static_cast<int>(w.speakers.size()) != c.speakers) {
    throw std::runtime_error("world speaker table has wrong size");
  }
  return w;
}

std::string corpus_line(const CorpusItem& item) {
  const nlohmann::json j = {{"prompt", item.prompt.ids},
                            {"reference", item.reference.ids},
                            {"speaker", item.speaker},
                            {"transcript", item.transcript}};
  return j.dump();
}

void save_corpus(const std::filesystem::path& path,
                 const std::vector<CorpusItem>& corpus) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write corpus " + path.string());
  for (const auto& item : corpus) out << corpus_line(item) << "\n";
}

std::vector<CorpusItem> load_corpus(const std::filesystem::path& path,
                                    const SynthWorld& world) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::vector<CorpusItem> corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CorpusItem item =
          make_item(world, prompt(j.at("prompt").get<std::vector<TokenId>>()),
                    response(j.at("reference").get<std::vector<TokenId>>()));
      if (item.speaker != j.at("speaker").get<int>() ||
          item.transcript != j.at("transcript").get<std::vector<int>>()) {
        throw std::runtime_error("derived fields disagree with the record");
      }
      corpus.push_back(std::move(item));
    } catch (const std::exception& e) {
      throw std::runtime_error("corpus " + path.string() + " line " +
                               std::to_string(lineno) + ": " + e.what());
    }
  }
  if (corpus.empty()) throw std::runtime_error("corpus " + path.string() + " is empty");
  return corpus;
}

}  // namespace mpo
