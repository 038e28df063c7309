#include "mpo/objectives.hpp"

#include "mpo/seeds.hpp"

#include <cmath>
#include <stdexcept>

namespace mpo {

void validate_batch(std::span<const PreferencePair> batch) {
  if (batch.empty()) throw std::invalid_argument("preference batch is empty");
  for (const auto& p : batch) {
    if (p.y_w == p.y_l) {
      throw std::invalid_argument("preference pair has y_w == y_l");
    }
  }
}

Tensor ce_loss(const Policy& model, const TokenSequence& x, const TokenSequence& y) {
  if (y.empty()) throw std::invalid_argument("ce_loss: empty response");
  return scale(mean(sequence_logprob(model, x, y).per_token), -1.0);
}

Tensor ce_loss(const Policy& model, std::span<const SftExample> batch) {
  if (batch.empty()) throw std::invalid_argument("ce_loss: empty batch");
  Tensor total;
  for (const auto& ex : batch) {
    Tensor l = ce_loss(model, ex.x, ex.y);
    total = total.defined() ? total + l : l;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

double bt_probability(double logratio_w, double logratio_l, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
  if (!std::isfinite(logratio_w) || !std::isfinite(logratio_l)) {
    throw std::invalid_argument("bt_probability: non-finite log-ratio");
  }
  // Computing the upper half directly and the lower half as its complement
  // makes swapping w and l give exactly 1 - p.
  const double h = beta * (logratio_w - logratio_l);
  return h >= 0.0 ? stable_sigmoid(h) : 1.0 - stable_sigmoid(-h);
}

std::vector<ReferenceLogProbs> reference_logprobs(
    const Policy& ref_model, std::span<const PreferencePair> batch) {
  NoGradGuard no_grad;
  std::vector<ReferenceLogProbs> out;
  out.reserve(batch.size());
  for (const auto& p : batch) {
    out.push_back({sequence_logprob(ref_model, p.x, p.y_w).total.item(),
                   sequence_logprob(ref_model, p.x, p.y_l).total.item()});
  }
  return out;
}

namespace {

struct DpoTerms {
  Tensor loss;           // mean -log sigma(beta * margin)
  double reward_margin;  // mean beta * margin
  std::vector<SequenceLogProb> winners;
};

DpoTerms dpo_terms(const Policy& model, std::span<const PreferencePair> batch,
                   std::span<const ReferenceLogProbs> ref, double beta) {
  validate_batch(batch);
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
  if (ref.size() != batch.size()) {
    throw std::invalid_argument("reference log-probs do not match the batch");
  }
  DpoTerms t;
  t.reward_margin = 0.0;
  Tensor total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    SequenceLogProb w = sequence_logprob(model, batch[i].x, batch[i].y_w);
    SequenceLogProb l = sequence_logprob(model, batch[i].x, batch[i].y_l);
    // h = (log pi(y_w) - log ref(y_w)) - (log pi(y_l) - log ref(y_l))
    Tensor h = sub(w.total, l.total);
    const double ref_shift = ref[i].w - ref[i].l;
    Tensor z = add(scale(h, beta), Tensor::scalar(-beta * ref_shift));
    t.reward_margin += z.item();
    Tensor term = scale(log_sigmoid(z), -1.0);
    total = total.defined() ? total + term : term;
    t.winners.push_back(std::move(w));
  }
  const double n = static_cast<double>(batch.size());
  t.loss = scale(total, 1.0 / n);
  t.reward_margin /= n;
  return t;
}

}  // namespace

Tensor dpo_loss(const Policy& model, const Policy& ref_model,
                std::span<const PreferencePair> batch, double beta) {
  const auto ref = reference_logprobs(ref_model, batch);
  return dpo_terms(model, batch, ref, beta).loss;
}

double implicit_reward(const Policy& model, const Policy& ref_model,
                       const TokenSequence& x, const TokenSequence& y, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
  NoGradGuard no_grad;
  const double lp = sequence_logprob(model, x, y).total.item();
  const double lr = sequence_logprob(ref_model, x, y).total.item();
  return beta * (lp - lr);
}

std::vector<SftExample> preferred_responses(std::span<const PreferencePair> batch) {
  std::vector<SftExample> out;
  out.reserve(batch.size());
  for (const auto& p : batch) out.push_back({p.x, p.y_w});
  return out;
}

LossBreakdown mpo_loss(const Policy& model, std::span<const PreferencePair> batch,
                       std::span<const ReferenceLogProbs> ref,
                       std::span<const SftExample> ce_batch, double beta,
                       double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  DpoTerms d = dpo_terms(model, batch, ref, beta);
  Tensor ce;
  if (ce_batch.empty()) {
    Tensor total;
    for (const auto& w : d.winners) {
      Tensor l = scale(mean(w.per_token), -1.0);
      total = total.defined() ? total + l : l;
    }
    ce = scale(total, 1.0 / static_cast<double>(d.winners.size()));
  } else {
    ce = ce_loss(model, ce_batch);
  }
  LossBreakdown out;
  out.loss = add(scale(d.loss, lambda), ce);
  out.dpo_term = d.loss;
  out.ce_term = ce;
  out.dpo = d.loss.item();
  out.ce = ce.item();
  out.combined = out.loss.item();
  out.reward_margin = d.reward_margin;
  return out;
}

LossBreakdown mpo_loss(const Policy& model, const Policy& ref_model,
                       std::span<const PreferencePair> batch,
                       std::span<const SftExample> ce_batch, double beta,
                       double lambda) {
  const auto ref = reference_logprobs(ref_model, batch);
  return mpo_loss(model, batch, ref, ce_batch, beta, lambda);
}

KlEstimate kl_estimate(const Policy& model, const Policy& ref_model,
                       std::span<const TokenSequence> prompts,
                       std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw std::invalid_argument("kl_estimate: n_samples must be >= 1");
  if (prompts.empty()) throw std::invalid_argument("kl_estimate: no prompts");
  NoGradGuard no_grad;
  const SamplingConfig sampling{1.0, 0};
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (std::size_t k = 0; k < n_samples; ++k) {
      const TokenSequence y =
          sample(model, prompts[i], sampling, derive_seed(seed, "kl", i, k));
      const double v = sequence_logprob(model, prompts[i], y).total.item() -
                       sequence_logprob(ref_model, prompts[i], y).total.item();
      sum += v;
      sum_sq += v * v;
      ++n;
    }
  }
  KlEstimate e;
  e.samples = n;
  e.mean = sum / static_cast<double>(n);
  if (n > 1) {
    const double var =
        std::max(0.0, (sum_sq - sum * e.mean) / static_cast<double>(n - 1));
    e.stderr_ = std::sqrt(var / static_cast<double>(n));
  }
  return e;
}

}  // namespace mpo
