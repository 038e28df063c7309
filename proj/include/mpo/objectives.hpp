#pragma once

#include "mpo/model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mpo {

struct PreferencePair {
  TokenSequence x;
  TokenSequence y_w;
  TokenSequence y_l;
};

/// Non-empty list of pairs with y_w != y_l.
using PreferencePairBatch = std::vector<PreferencePair>;

void validate_batch(std::span<const PreferencePair> batch);

struct SftExample {
  TokenSequence x;
  TokenSequence y;
};

/// Mean per-token negative log-likelihood of y under teacher forcing.
Tensor ce_loss(const Policy& model, const TokenSequence& x, const TokenSequence& y);

/// Mean of ce_loss over the examples.
Tensor ce_loss(const Policy& model, std::span<const SftExample> batch);

/// sigma(beta * (logratio_w - logratio_l)).
double bt_probability(double logratio_w, double logratio_l, double beta);

/// log pi_ref(y_w|x) and log pi_ref(y_l|x) for one pair.
struct ReferenceLogProbs {
  double w = 0.0;
  double l = 0.0;
};

std::vector<ReferenceLogProbs> reference_logprobs(const Policy& ref_model,
                                                  std::span<const PreferencePair> batch);

/// Mean over pairs of -log sigma(beta * margin). The reference model is
/// evaluated without recording, so no gradient can reach it.
Tensor dpo_loss(const Policy& model, const Policy& ref_model,
                std::span<const PreferencePair> batch, double beta);

/// beta * log(pi_theta(y|x) / pi_ref(y|x)); the partition term is omitted.
double implicit_reward(const Policy& model, const Policy& ref_model,
                       const TokenSequence& x, const TokenSequence& y, double beta);

struct LossBreakdown {
  Tensor loss;                 // differentiable combined objective
  Tensor dpo_term;
  Tensor ce_term;
  double dpo = 0.0;
  double ce = 0.0;
  double combined = 0.0;
  double reward_margin = 0.0;  // mean of beta * (logratio_w - logratio_l)
};

/// Preferred responses of the batch as cross-entropy targets.
std::vector<SftExample> preferred_responses(std::span<const PreferencePair> batch);

/// lambda * dpo + ce, with the CE term taken over `ce_batch`.
LossBreakdown mpo_loss(const Policy& model, const Policy& ref_model,
                       std::span<const PreferencePair> batch,
                       std::span<const SftExample> ce_batch, double beta,
                       double lambda);

/// Same objective with the reference log-probabilities supplied. When
/// `ce_batch` is empty the CE term uses the batch's preferred responses and
/// shares their forward pass with the DPO term.
LossBreakdown mpo_loss(const Policy& model, std::span<const PreferencePair> batch,
                       std::span<const ReferenceLogProbs> ref,
                       std::span<const SftExample> ce_batch, double beta,
                       double lambda);

struct KlEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t samples = 0;
};

/// Monte Carlo estimate of E_x E_{y ~ pi_theta}[log pi_theta - log pi_ref].
/// Samples use temperature 1 over the full response vocabulary.
KlEstimate kl_estimate(const Policy& model, const Policy& ref_model,
                       std::span<const TokenSequence> prompts,
                       std::size_t n_samples, std::uint64_t seed);

}  // namespace mpo
