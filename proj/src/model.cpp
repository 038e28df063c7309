#include "mpo/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace mpo {

Index Vocabulary::output_index(TokenId t) const {
  if (t == eos()) return speech_count;
  if (!is_speech(t)) {
    throw std::out_of_range("token " + std::to_string(t) +
                            " is not a response token");
  }
  return t - speech_begin();
}

TokenId Vocabulary::output_token(Index i) const {
  if (i < 0 || i > speech_count) {
    throw std::out_of_range("response index " + std::to_string(i));
  }
  return i == speech_count ? eos() : speech_begin() + static_cast<int>(i);
}

void Vocabulary::validate() const {
  if (text_count < 1) throw std::invalid_argument("vocab.text_count must be >= 1");
  if (speech_count < 8) {
    throw std::invalid_argument("vocab.speech_count must be >= 8");
  }
}

TokenSequence prompt(std::vector<TokenId> ids) {
  return {std::move(ids), Role::Prompt};
}

TokenSequence response(std::vector<TokenId> ids) {
  return {std::move(ids), Role::Response};
}

void validate(const TokenSequence& seq, const Vocabulary& vocab,
              std::size_t max_length) {
  if (seq.ids.size() > max_length) {
    throw std::invalid_argument("sequence length " +
                                std::to_string(seq.ids.size()) +
                                " exceeds maximum " + std::to_string(max_length));
  }
  if (seq.role == Role::Prompt) {
    for (TokenId t : seq.ids) {
      if (!vocab.is_text(t)) {
        throw std::invalid_argument("prompt token " + std::to_string(t) +
                                    " is not a text id");
      }
    }
    return;
  }
  if (seq.ids.empty() || seq.ids.back() != vocab.eos()) {
    throw std::invalid_argument("response must end with EOS");
  }
  for (std::size_t i = 0; i + 1 < seq.ids.size(); ++i) {
    if (!vocab.is_speech(seq.ids[i])) {
      throw std::invalid_argument("response token " +
                                  std::to_string(seq.ids[i]) +
                                  " is not a speech id");
    }
  }
}

void ArchConfig::validate() const {
  vocab.validate();
  if (layers < 1) throw std::invalid_argument("arch.layers must be >= 1");
  if (dim < 8) throw std::invalid_argument("arch.dim must be >= 8");
  if (heads < 1 || dim % heads != 0) {
    throw std::invalid_argument("arch.heads must divide arch.dim");
  }
  if (context < 4) throw std::invalid_argument("arch.context must be >= 4");
  if (ffn_mult < 1) throw std::invalid_argument("arch.ffn_mult must be >= 1");
  if (max_response < 1) {
    throw std::invalid_argument("arch.max_response must be >= 1");
  }
}

std::size_t ArchConfig::parameter_count() const {
  const std::size_t d = dim;
  const std::size_t per_layer = 2 * d + 4 * d * d + 2 * ffn_mult * d * d;
  return vocab.size() * d + context * d + layers * per_layer + d +
         d * vocab.response_size();
}

// ---------------------------------------------------------------------------

Policy Policy::build(const ArchConfig& config) {
  config.validate();
  Policy p;
  p.config_ = config;
  p.seed_lineage = {config.seed};

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random = [&](Index r, Index c, double stddev) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal(rng);
    return Tensor::parameter(std::move(m));
  };
  auto ones = [](Index c) { return Tensor::parameter(Matrix::Ones(1, c)); };

  const Index d = config.dim;
  const Index hidden = static_cast<Index>(config.ffn_mult) * d;
  const double base = 0.02;
  const double residual = base / std::sqrt(2.0 * config.layers);

  p.params_.push_back({"tok_emb", random(config.vocab.size(), d, base)});
  p.params_.push_back({"pos_emb", random(config.context, d, base)});
  for (int l = 0; l < config.layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    p.params_.push_back({prefix + "attn_norm", ones(d)});
    p.params_.push_back({prefix + "wq", random(d, d, base)});
    p.params_.push_back({prefix + "wk", random(d, d, base)});
    p.params_.push_back({prefix + "wv", random(d, d, base)});
    p.params_.push_back({prefix + "wo", random(d, d, residual)});
    p.params_.push_back({prefix + "ffn_norm", ones(d)});
    p.params_.push_back({prefix + "w1", random(d, hidden, base)});
    p.params_.push_back({prefix + "w2", random(hidden, d, residual)});
  }
  p.params_.push_back({"final_norm", ones(d)});
  p.params_.push_back({"head", random(d, config.vocab.response_size(), base)});
  return p;
}

const Tensor& Policy::parameter(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

std::size_t Policy::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.tensor.size());
  return n;
}

void Policy::zero_grad() {
  for (auto& p : params_) {
    if (p.tensor.requires_grad()) p.tensor.zero_grad();
  }
}

Policy Policy::copy(bool freeze) const {
  Policy out;
  out.config_ = config_;
  out.step = step;
  out.seed_lineage = seed_lineage;
  out.frozen_ = freeze;
  out.params_.reserve(params_.size());
  for (const auto& p : params_) {
    out.params_.push_back({p.name, freeze ? Tensor::constant(p.tensor.value())
                                          : Tensor::parameter(p.tensor.value())});
  }
  return out;
}

Policy Policy::clone_frozen() const { return copy(true); }
Policy Policy::clone() const { return copy(false); }

namespace {

constexpr char kMagic[8] = {'M', 'P', 'O', 'C', 'K', 'P', 'T', '\0'};

nlohmann::json arch_to_json(const ArchConfig& c) {
  return {{"text_count", c.vocab.text_count},
          {"speech_count", c.vocab.speech_count},
          {"layers", c.layers},
          {"dim", c.dim},
          {"heads", c.heads},
          {"context", c.context},
          {"ffn_mult", c.ffn_mult},
          {"max_response", c.max_response},
          {"seed", c.seed}};
}

ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig c;
  c.vocab.text_count = j.at("text_count").get<int>();
  c.vocab.speech_count = j.at("speech_count").get<int>();
  c.layers = j.at("layers").get<int>();
  c.dim = j.at("dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.context = j.at("context").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.max_response = j.at("max_response").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as little-endian doubles");

}  // namespace

void Policy::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["config"] = arch_to_json(config_);
  header["step"] = step;
  header["seed_lineage"] = seed_lineage;
  header["frozen"] = frozen_;
  auto& arrays = header["arrays"] = nlohmann::json::array();
  for (const auto& p : params_) {
    arrays.push_back({{"name", p.name},
                      {"shape", {p.tensor.rows(), p.tensor.cols()}}});
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kCheckpointFormatVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params_) {
    const Matrix& v = p.tensor.value();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Policy Policy::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || version != kCheckpointFormatVersion || len > (1u << 26)) {
    throw std::runtime_error("unsupported checkpoint header in " + path.string());
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint " + path.string());

  const auto header = nlohmann::json::parse(text);
  const ArchConfig config = arch_from_json(header.at("config"));
  Policy reference = Policy::build(config);
  const bool frozen = header.at("frozen").get<bool>();

  Policy p;
  p.config_ = config;
  p.step = header.at("step").get<std::int64_t>();
  p.seed_lineage = header.at("seed_lineage").get<std::vector<std::uint64_t>>();
  p.frozen_ = frozen;
  const auto& arrays = header.at("arrays");
  if (arrays.size() != reference.params_.size()) {
    throw std::runtime_error("checkpoint parameter list does not match config");
  }
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto& expect = reference.params_[i];
    const auto name = arrays[i].at("name").get<std::string>();
    const auto shape = arrays[i].at("shape").get<std::vector<Index>>();
    if (name != expect.name || shape.size() != 2 ||
        shape[0] != expect.tensor.rows() || shape[1] != expect.tensor.cols()) {
      throw std::runtime_error("checkpoint array " + name +
                               " does not match the architecture");
    }
    Matrix m(shape[0], shape[1]);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint " + path.string());
    p.params_.push_back(
        {name, frozen ? Tensor::constant(std::move(m)) : Tensor::parameter(std::move(m))});
  }
  return p;
}

// ---------------------------------------------------------------------------

Tensor output_log_probs(const Policy& policy, std::span<const TokenId> stream,
                        Index first_row) {
  const ArchConfig& c = policy.config();
  const auto params = policy.parameters();
  const Index t = static_cast<Index>(stream.size());
  if (t == 0) throw std::invalid_argument("empty token stream");
  if (t > c.context) {
    throw std::length_error("stream of " + std::to_string(t) +
                            " tokens overflows context " +
                            std::to_string(c.context));
  }
  if (first_row < 0 || first_row >= t) {
    throw std::out_of_range("first_row outside stream");
  }

  std::vector<Index> ids(stream.begin(), stream.end());
  for (Index id : ids) {
    if (id < 0 || id >= c.vocab.size()) {
      throw std::out_of_range("token id " + std::to_string(id) +
                              " outside vocabulary");
    }
  }
  std::vector<Index> positions(static_cast<std::size_t>(t));
  std::iota(positions.begin(), positions.end(), Index{0});

  using L = Policy::Layout;
  Tensor h = rows(params[L::kTokEmb].tensor, ids) +
             rows(params[L::kPosEmb].tensor, positions);

  const Index head_dim = c.dim / c.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> heads(static_cast<std::size_t>(c.heads));
  for (int l = 0; l < c.layers; ++l) {
    const std::size_t base = L::kLayerBase + L::kPerLayer * l;
    const Tensor& attn_norm = params[base + 0].tensor;
    const Tensor& wq = params[base + 1].tensor;
    const Tensor& wk = params[base + 2].tensor;
    const Tensor& wv = params[base + 3].tensor;
    const Tensor& wo = params[base + 4].tensor;
    const Tensor& ffn_norm = params[base + 5].tensor;
    const Tensor& w1 = params[base + 6].tensor;
    const Tensor& w2 = params[base + 7].tensor;

    Tensor a = rms_norm(h, attn_norm);
    Tensor q = matmul(a, wq);
    Tensor k = matmul(a, wk);
    Tensor v = matmul(a, wv);
    for (int hh = 0; hh < c.heads; ++hh) {
      const Index off = hh * head_dim;
      Tensor scores = scale(matmul_nt(slice_cols(q, off, head_dim),
                                      slice_cols(k, off, head_dim)),
                            inv_sqrt);
      heads[static_cast<std::size_t>(hh)] =
          matmul(causal_softmax(scores), slice_cols(v, off, head_dim));
    }
    Tensor attended = c.heads == 1 ? heads[0] : concat_cols(heads);
    h = h + matmul(attended, wo);
    Tensor b = rms_norm(h, ffn_norm);
    h = h + matmul(gelu(matmul(b, w1)), w2);
  }
  const std::size_t tail = L::kLayerBase + L::kPerLayer * c.layers;
  Tensor selected = first_row == 0 ? h : slice_rows(h, first_row, t - first_row);
  Tensor normed = rms_norm(selected, params[tail].tensor);
  return log_softmax(matmul(normed, params[tail + 1].tensor));
}

std::vector<TokenId> scoring_stream(const Vocabulary& vocab,
                                    const TokenSequence& x,
                                    const TokenSequence& y) {
  std::vector<TokenId> s;
  s.reserve(x.size() + y.size() + 1);
  s.push_back(vocab.bos());
  s.insert(s.end(), x.ids.begin(), x.ids.end());
  s.push_back(vocab.sep());
  if (!y.ids.empty()) s.insert(s.end(), y.ids.begin(), y.ids.end() - 1);
  return s;
}

bool eos_forced(const ArchConfig& config, std::size_t prompt_length,
                std::size_t position) {
  const std::size_t stream = prompt_length + 2 + position;
  return static_cast<int>(position) + 1 >= config.max_response ||
         static_cast<int>(stream) >= config.context;
}

SequenceLogProb sequence_logprob(const Policy& policy, const TokenSequence& x,
                                 const TokenSequence& y) {
  const Vocabulary& vocab = policy.vocab();
  validate(x, vocab, static_cast<std::size_t>(policy.config().context));
  validate(y, vocab, static_cast<std::size_t>(policy.config().context));
  const auto stream = scoring_stream(vocab, x, y);
  const Index first = static_cast<Index>(x.size()) + 1;
  Tensor full = output_log_probs(policy, stream, first);
  std::vector<Index> targets;
  targets.reserve(y.size());
  for (TokenId t : y.ids) targets.push_back(vocab.output_index(t));
  Tensor per_token = gather(full, targets);
  const std::size_t last = y.size() - 1;
  if (y.ids[last] == vocab.eos() && eos_forced(policy.config(), x.size(), last)) {
    Matrix mask = Matrix::Ones(per_token.rows(), 1);
    mask(static_cast<Index>(last), 0) = 0.0;
    per_token = mul(Tensor::constant(std::move(mask)), per_token);
  }
  return {sum(per_token), per_token, full};
}

void SamplingConfig::validate(const Vocabulary& vocab) const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("sampling.temperature must be > 0");
  }
  if (top_k < 0 || top_k > vocab.response_size()) {
    throw std::invalid_argument("sampling.top_k must be in [0 (all), " +
                                std::to_string(vocab.response_size()) + "]");
  }
}

namespace {

// Response-vocabulary indices ordered by descending score, ties by index.
std::vector<Index> ranked(const RowVector& scores) {
  std::vector<Index> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return scores(a) > scores(b); });
  return order;
}

template <typename Pick>
TokenSequence decode_loop(const Policy& policy, const TokenSequence& x,
                          Pick&& pick) {
  const Vocabulary& vocab = policy.vocab();
  const ArchConfig& c = policy.config();
  validate(x, vocab, static_cast<std::size_t>(c.context));
  NoGradGuard no_grad;
  std::vector<TokenId> stream;
  stream.push_back(vocab.bos());
  stream.insert(stream.end(), x.ids.begin(), x.ids.end());
  stream.push_back(vocab.sep());

  TokenSequence y = response({});
  while (true) {
    if (eos_forced(c, x.size(), y.size())) {
      y.ids.push_back(vocab.eos());
      break;
    }
    const Index last = static_cast<Index>(stream.size()) - 1;
    RowVector logp = output_log_probs(policy, stream, last).value().row(0);
    const TokenId next = vocab.output_token(pick(logp));
    y.ids.push_back(next);
    if (next == vocab.eos()) break;
    stream.push_back(next);
  }
  return y;
}

}  // namespace

TokenSequence sample(const Policy& policy, const TokenSequence& x,
                     const SamplingConfig& sampling, std::uint64_t seed) {
  sampling.validate(policy.vocab());
  const int k = sampling.top_k == 0 ? policy.vocab().response_size()
                                    : sampling.top_k;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  return decode_loop(policy, x, [&](const RowVector& logp) -> Index {
    const RowVector scaled = logp / sampling.temperature;
    const auto order = ranked(scaled);
    const double top = scaled(order[0]);
    std::vector<double> weights(static_cast<std::size_t>(k));
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
      weights[static_cast<std::size_t>(i)] = std::exp(scaled(order[i]) - top);
      total += weights[static_cast<std::size_t>(i)];
    }
    const double u = uniform(rng) * total;
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
      acc += weights[static_cast<std::size_t>(i)];
      if (u < acc) return order[i];
    }
    return order[k - 1];
  });
}

TokenSequence greedy(const Policy& policy, const TokenSequence& x) {
  return decode_loop(policy, x, [](const RowVector& logp) -> Index {
    Index best = 0;
    for (Index i = 1; i < logp.size(); ++i) {
      if (logp(i) > logp(best)) best = i;
    }
    return best;
  });
}

}  // namespace mpo
