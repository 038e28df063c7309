#pragma once

#include "mpo/metrics.hpp"
#include "mpo/model.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mpo {

struct WorldConfig {
  std::uint64_t seed = 1;
  int symbols = 25;
  int speakers = 4;
  int speech_count = 96;
  int embed_dim = 16;
  double f0_min = 80.0;
  double f0_max = 400.0;

  void validate() const;
  bool operator==(const WorldConfig&) const = default;
};

struct SpeakerProfile {
  Eigen::VectorXd centroid;  // unit norm
  double f0_scale = 0.0;     // utterance-initial pitch target
};

/// Fixed tables that stand in for codec, ASR, speaker model and pitch
/// tracker. Every speech token has a transcript symbol, a unit embedding, a
/// speaker color and an F0 value, drawn independently.
struct SynthWorld {
  WorldConfig config;
  Vocabulary vocab;
  std::vector<int> symbol_of;   // per speech index
  std::vector<int> color_of;    // per speech index, a speaker id
  Matrix embeddings;            // speech_count x embed_dim, unit rows
  std::vector<double> f0;       // per speech index
  std::vector<SpeakerProfile> speakers;

  TokenId symbol_token(int symbol) const { return symbol; }
  TokenId speaker_token(int speaker) const { return config.symbols + speaker; }
  TokenId speech_token(int index) const { return vocab.speech_begin() + index; }
  int speech_index(TokenId t) const { return t - vocab.speech_begin(); }
  /// Speech indices whose transcript symbol is `symbol`, ascending.
  std::vector<int> tokens_for_symbol(int symbol) const;

  void save(const std::filesystem::path& path) const;
  static SynthWorld load(const std::filesystem::path& path);
};

SynthWorld make_world(const WorldConfig& config);
inline SynthWorld make_world(std::uint64_t seed) {
  WorldConfig c;
  c.seed = seed;
  return make_world(c);
}

struct Decoded {
  std::vector<int> transcript;
  Eigen::VectorXd embedding;
  std::vector<double> contour;
};

/// Deterministic transcript, speaker embedding and pitch contour of a
/// response. A trailing EOS is ignored; at least one speech token is needed.
Decoded decode(const SynthWorld& world, const TokenSequence& y);

struct CorpusItem {
  TokenSequence prompt;       // symbols followed by the speaker token
  TokenSequence reference;    // speech tokens + EOS
  int speaker = 0;
  std::vector<int> transcript;
  Decoded decoded;            // decode(reference)
};

/// Reference token choice for one position: prefers the speaker's color and
/// the F0 closest to the speaker's declining pitch target.
int reference_speech_index(const SynthWorld& world, int symbol, int speaker,
                           std::size_t position, std::size_t length);

std::vector<CorpusItem> make_corpus(const SynthWorld& world, std::size_t n_items,
                                    std::uint64_t seed);

/// Rebuilds the derived fields of an item from its prompt and reference.
CorpusItem make_item(const SynthWorld& world, TokenSequence prompt,
                     TokenSequence reference);

/// Scores for a response against an item's reference. A response with no
/// speech tokens gets the worst value of every metric.
MetricScores score(const SynthWorld& world, const CorpusItem& item,
                   const TokenSequence& y);

/// Scores returned for empty responses.
MetricScores worst_scores(const SynthWorld& world, const CorpusItem& item);

/// One JSONL line (no newline) of the corpus file format.
std::string corpus_line(const CorpusItem& item);

void save_corpus(const std::filesystem::path& path,
                 const std::vector<CorpusItem>& corpus);
std::vector<CorpusItem> load_corpus(const std::filesystem::path& path,
                                    const SynthWorld& world);

}  // namespace mpo
