#include "mpo/synthtask.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

namespace mpo {
namespace {

const SynthWorld& world() {
  static const SynthWorld w = make_world(1);
  return w;
}

TEST(World, Deterministic) {
  const SynthWorld a = make_world(5), b = make_world(5);
  EXPECT_EQ(a.symbol_of, b.symbol_of);
  EXPECT_EQ(a.color_of, b.color_of);
  EXPECT_EQ(a.embeddings, b.embeddings);
  EXPECT_EQ(a.f0, b.f0);
  EXPECT_NE(make_world(6).f0, a.f0);
}

TEST(World, TablesAreValid) {
  const auto& w = world();
  const int n = w.config.speech_count;
  ASSERT_EQ(static_cast<int>(w.f0.size()), n);
  for (int i = 0; i < n; ++i) {
    EXPECT_GT(w.f0[i], 0.0);
    EXPECT_NEAR(w.embeddings.row(i).norm(), 1.0, 1e-12);
    EXPECT_GE(w.symbol_of[i], 0);
    EXPECT_LT(w.symbol_of[i], w.config.symbols);
  }
  // Every symbol is producible.
  for (int s = 0; s < w.config.symbols; ++s) EXPECT_FALSE(w.tokens_for_symbol(s).empty());
}

TEST(World, SpeakerCentroidsAreDiscriminative) {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const auto w = make_world(seed);
    for (std::size_t a = 0; a < w.speakers.size(); ++a) {
      for (std::size_t b = a + 1; b < w.speakers.size(); ++b) {
        EXPECT_LT(speaker_similarity(w.speakers[a].centroid, w.speakers[b].centroid), 0.5);
      }
    }
  }
}

TEST(Decode, SingleTokenGivesLengthOneContour) {
  const auto& w = world();
  const TokenSequence y = response({w.speech_token(3), w.vocab.eos()});
  const Decoded d = decode(w, y);
  EXPECT_EQ(d.contour.size(), 1u);
  EXPECT_EQ(d.transcript, (std::vector<int>{w.symbol_of[3]}));
  EXPECT_EQ(d.contour[0], w.f0[3]);
}

TEST(Decode, TranscriptCollisionExists) {
  // The token-to-symbol map is not injective, so two different responses
  // can share a transcript.
  const auto& w = world();
  bool found = false;
  for (int s = 0; s < w.config.symbols && !found; ++s) {
    const auto toks = w.tokens_for_symbol(s);
    if (toks.size() < 2) continue;
    const TokenSequence a = response({w.speech_token(toks[0]), w.vocab.eos()});
    const TokenSequence b = response({w.speech_token(toks[1]), w.vocab.eos()});
    EXPECT_NE(a, b);
    EXPECT_EQ(decode(w, a).transcript, decode(w, b).transcript);
    found = true;
  }
  EXPECT_TRUE(found);
}

TEST(Corpus, DeterministicAndSelfConsistent) {
  const auto& w = world();
  const auto a = make_corpus(w, 100, 9);
  const auto b = make_corpus(w, 100, 9);
  ASSERT_EQ(a.size(), 100u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].prompt, b[i].prompt);
    EXPECT_EQ(a[i].reference, b[i].reference);
    const std::size_t text = a[i].prompt.size() - 1;
    EXPECT_GE(text, 4u);
    EXPECT_LE(text, 16u);
    EXPECT_EQ(a[i].prompt.ids.back(), w.speaker_token(a[i].speaker));
    const Decoded d = decode(w, a[i].reference);
    EXPECT_EQ(d.transcript, a[i].transcript);
    EXPECT_EQ(cer(d.transcript, a[i].transcript), 0.0);
    EXPECT_EQ(a[i].reference.ids.back(), w.vocab.eos());
  }
}

TEST(Corpus, ReferenceScoresAgainstItselfArePerfect) {
  const auto& w = world();
  for (const auto& item : make_corpus(w, 50, 3)) {
    const MetricScores s = score(w, item, item.reference);
    EXPECT_EQ(s.cer, 0.0);
    EXPECT_EQ(s.spk_sim, 1.0);
    EXPECT_EQ(s.prosody_rmse, 0.0);
  }
}

TEST(Corpus, SpeakersAreBalanced) {
  const auto& w = world();
  for (std::size_t n : {97u, 100u, 500u}) {
    std::map<int, int> counts;
    for (const auto& item : make_corpus(w, n, 4)) ++counts[item.speaker];
    const double uniform = static_cast<double>(n) / w.config.speakers;
    for (const auto& [spk, k] : counts) EXPECT_LE(std::abs(k - uniform), 1.0) << spk;
  }
}

TEST(Corpus, CorruptionIncreasesCerMonotonically) {
  const auto& w = world();
  const auto items = make_corpus(w, 100, 5);
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> tok(0, w.config.speech_count - 1);
  double prev = 0.0;
  for (std::size_t k = 1; k <= 4; ++k) {
    double total = 0.0;
    for (const auto& item : items) {
      TokenSequence y = item.reference;
      const std::size_t len = y.size() - 1;
      std::vector<std::size_t> pos(len);
      std::iota(pos.begin(), pos.end(), 0);
      std::shuffle(pos.begin(), pos.end(), rng);
      for (std::size_t j = 0; j < std::min(k, len); ++j) y.ids[pos[j]] = w.speech_token(tok(rng));
      total += score(w, item, y).cer;
    }
    const double mean = total / static_cast<double>(items.size());
    EXPECT_GT(mean, prev) << "k=" << k;
    prev = mean;
  }
}

TEST(Corpus, EmptyResponseGetsWorstScores) {
  const auto& w = world();
  const auto item = make_corpus(w, 1, 2)[0];
  const MetricScores s = score(w, item, response({w.vocab.eos()}));
  EXPECT_EQ(s, worst_scores(w, item));
  EXPECT_EQ(s.cer, 1.0);
}

TEST(Corpus, FileRoundTripAndGarbage) {
  const auto& w = world();
  const auto dir = std::filesystem::temp_directory_path() / "mpo_test_synth";
  std::filesystem::create_directories(dir);
  const auto items = make_corpus(w, 20, 6);
  save_corpus(dir / "c.jsonl", items);
  const auto back = load_corpus(dir / "c.jsonl", w);
  ASSERT_EQ(back.size(), items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    EXPECT_EQ(back[i].prompt, items[i].prompt);
    EXPECT_EQ(back[i].reference, items[i].reference);
    EXPECT_EQ(back[i].transcript, items[i].transcript);
  }
  std::ofstream(dir / "bad.jsonl") << "{not json\n";
  EXPECT_ANY_THROW(load_corpus(dir / "bad.jsonl", w));
  EXPECT_ANY_THROW(load_corpus(dir / "missing.jsonl", w));
  w.save(dir / "w.json");
  const SynthWorld wb = SynthWorld::load(dir / "w.json");
  EXPECT_EQ(wb.f0, w.f0);
  EXPECT_EQ(wb.embeddings, w.embeddings);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace mpo
