#pragma once

#include "mpo/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mpo {

using TokenId = int;

/// Shared id space: text ids, then speech ids, then BOS, EOS, SEP.
struct Vocabulary {
  int text_count = 29;
  int speech_count = 96;

  int speech_begin() const { return text_count; }
  TokenId bos() const { return text_count + speech_count; }
  TokenId eos() const { return bos() + 1; }
  TokenId sep() const { return bos() + 2; }
  int size() const { return text_count + speech_count + 3; }

  bool is_text(TokenId t) const { return t >= 0 && t < text_count; }
  bool is_speech(TokenId t) const {
    return t >= speech_begin() && t < speech_begin() + speech_count;
  }

  /// Responses are scored over speech ids plus EOS.
  int response_size() const { return speech_count + 1; }
  Index output_index(TokenId t) const;
  TokenId output_token(Index i) const;

  void validate() const;
  bool operator==(const Vocabulary&) const = default;
};

enum class Role { Prompt, Response };

struct TokenSequence {
  std::vector<TokenId> ids;
  Role role = Role::Prompt;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSequence&) const = default;
};

TokenSequence prompt(std::vector<TokenId> ids);
TokenSequence response(std::vector<TokenId> ids);

/// Checks ids against the vocabulary; responses must end with EOS and carry
/// only speech ids before it.
void validate(const TokenSequence& seq, const Vocabulary& vocab,
              std::size_t max_length);

struct ArchConfig {
  Vocabulary vocab;
  int layers = 2;
  int dim = 64;
  int heads = 4;
  int context = 128;
  int ffn_mult = 4;
  int max_response = 64;
  std::uint64_t seed = 7;

  void validate() const;
  /// Closed-form parameter count for this architecture.
  std::size_t parameter_count() const;
  bool operator==(const ArchConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Model parameters plus training metadata. A frozen policy holds constant
/// leaves, so no gradient can reach it.
class Policy {
 public:
  static Policy build(const ArchConfig& config);

  const ArchConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return config_.vocab; }
  std::span<const NamedTensor> parameters() const { return params_; }
  const Tensor& parameter(std::string_view name) const;
  std::size_t parameter_count() const;
  bool frozen() const { return frozen_; }

  void zero_grad();
  /// Deep copy whose parameters are constants.
  Policy clone_frozen() const;
  /// Deep copy that stays trainable.
  Policy clone() const;

  std::int64_t step = 0;
  std::vector<std::uint64_t> seed_lineage;

  void save(const std::filesystem::path& path) const;
  static Policy load(const std::filesystem::path& path);

  // Fixed positions inside params_.
  struct Layout {
    static constexpr std::size_t kTokEmb = 0;
    static constexpr std::size_t kPosEmb = 1;
    static constexpr std::size_t kPerLayer = 8;
    static constexpr std::size_t kLayerBase = 2;
  };

 private:
  Policy() = default;
  Policy copy(bool freeze) const;

  ArchConfig config_;
  std::vector<NamedTensor> params_;
  bool frozen_ = false;
};

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// Log-softmax over the response vocabulary for every stream row from
/// `first_row` on. Rows predict the token that follows them.
Tensor output_log_probs(const Policy& policy, std::span<const TokenId> stream,
                        Index first_row);

/// BOS x SEP y[0..n-2]: the teacher-forcing input for scoring y.
std::vector<TokenId> scoring_stream(const Vocabulary& vocab,
                                    const TokenSequence& x,
                                    const TokenSequence& y);

struct SequenceLogProb {
  Tensor total;      // 1x1, differentiable
  Tensor per_token;  // n x 1, includes EOS
  Tensor full;       // n x response_size log-softmax rows
};

/// True when decoding must end with EOS at response `position` (0-based)
/// because of the length cap or the context window. Such an EOS is not
/// sampled, and sequence_logprob scores it with probability 1.
bool eos_forced(const ArchConfig& config, std::size_t prompt_length, std::size_t position);

SequenceLogProb sequence_logprob(const Policy& policy, const TokenSequence& x,
                                 const TokenSequence& y);

struct SamplingConfig {
  double temperature = 1.0;
  int top_k = 0;  // 0 means the whole response vocabulary

  void validate(const Vocabulary& vocab) const;
};

/// Ancestral sampling from the temperature-scaled, top-k truncated
/// distribution. Stops at EOS; at max_response tokens EOS is appended.
TokenSequence sample(const Policy& policy, const TokenSequence& x,
                     const SamplingConfig& sampling, std::uint64_t seed);

TokenSequence greedy(const Policy& policy, const TokenSequence& x);

}  // namespace mpo
