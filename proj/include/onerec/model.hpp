#pragma once

// Decoder-only transformer over the unified vocabulary.
//
// Pre-norm blocks (LayerNorm -> causal multi-head attention -> residual,
// LayerNorm -> GELU MLP -> residual), learned absolute position embeddings,
// final LayerNorm and an output projection that is either the token
// embedding (tied) or a separate matrix. All parameters live in one flat
// vector described by ParamLayout; gradients use the same layout.
//
// The model is templated on the scalar type: training runs in float,
// gradient checks in double.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "onerec/common.hpp"

namespace onerec::model {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 48;
  int d_ff = 192;
  int context_len = 128;
  int vocab_size = 0;
  bool tied_embeddings = true;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamKind { embedding, position, attention, feedforward, norm, output_head };

std::string_view param_kind_name(ParamKind k);

struct TensorInfo {
  std::string name;
  ParamKind kind = ParamKind::embedding;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  /// Weight decay applies to matrices, not to gains and biases.
  bool decays() const { return rows > 1 && cols > 1; }
};

class ParamLayout {
 public:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };

  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& cfg);

  std::size_t size() const { return size_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& at(std::string_view name) const;

  std::size_t tok_emb = 0;
  std::size_t pos_emb = 0;
  std::size_t lnf_g = 0;
  std::size_t lnf_b = 0;
  std::size_t lm_head = npos;  // npos when tied
  std::vector<Layer> layers;

 private:
  std::size_t add(std::string name, ParamKind kind, int rows, int cols);
  std::vector<TensorInfo> tensors_;
  std::size_t size_ = 0;
};

template <typename T>
struct Parameters {
  ModelConfig config;
  ParamLayout layout;
  std::vector<T> values;

  T* at(std::size_t offset) { return values.data() + offset; }
  const T* at(std::size_t offset) const { return values.data() + offset; }
  std::span<T> tensor(std::string_view name) {
    const auto& t = layout.at(name);
    return {values.data() + t.offset, t.size()};
  }
  std::span<const T> tensor(std::string_view name) const {
    const auto& t = layout.at(name);
    return {values.data() + t.offset, t.size()};
  }
  /// Output projection (token embedding when tied).
  const T* output_weights() const { return at(config.tied_embeddings ? layout.tok_emb : layout.lm_head); }
  std::size_t count() const { return values.size(); }
};

template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg);

template <typename To, typename From>
Parameters<To> convert(const Parameters<From>& p) {
  Parameters<To> out{p.config, p.layout, {}};
  out.values.assign(p.values.begin(), p.values.end());
  return out;
}

/// One supervised or regularised prediction inside a sequence. The term
/// concerns the distribution that predicts tokens[index] from the prefix.
///   loss += -weight * log p(tokens[index])      (normalised over `allowed` if non-empty)
///   loss += kl_weight * KL(p || exp(ref_logprobs))   (full vocabulary, unmasked p)
struct TokenTerm {
  int index = 0;
  double weight = 0.0;
  std::span<const int> allowed;  // sorted token ids; non-owning
  double kl_weight = 0.0;
  std::vector<double> ref_logprobs;  // vocab_size entries when kl_weight != 0
};

struct SequenceObjective {
  std::vector<int> tokens;
  std::vector<int> positions;  // empty: 0..n-1
  std::vector<int> segments;   // empty: one segment; attention never crosses segments
  std::vector<TokenTerm> terms;
};

struct ObjectiveResult {
  double loss = 0.0;
  std::vector<std::vector<double>> logprobs;  // per sequence, per term
  std::vector<std::vector<double>> kl;        // per sequence, per term (0 when kl_weight == 0)
};

/// Evaluates the summed term objective over a batch and, when `grad` is
/// non-null, writes its gradient (resized to the parameter count). Sequences
/// are processed in parallel; the reduction runs in sequence order, so the
/// result does not depend on the thread count.
template <typename T>
ObjectiveResult evaluate(const Parameters<T>& params, std::span<const SequenceObjective> batch,
                         std::vector<T>* grad);

/// Full logits (positions x vocab) for one unpacked sequence.
template <typename T>
Mat<T> forward(const Parameters<T>& params, std::span<const int> tokens);

/// Mean negative log-likelihood over masked targets; mask[i] marks tokens[i]
/// as supervised (mask[0] must be false).
template <typename T>
double nll_loss(const Parameters<T>& params, std::span<const int> tokens, std::span<const std::uint8_t> mask,
                std::vector<T>* grad);

/// Teacher-forced log-probabilities of each response token.
template <typename T>
std::vector<double> sequence_logprob(const Parameters<T>& params, std::span<const int> prompt,
                                     std::span<const int> response);

/// Full-vocabulary log-softmax rows predicting tokens[first..n) of prompt+response, i.e.
/// the distributions used for each response token.
template <typename T>
std::vector<std::vector<double>> response_distributions(const Parameters<T>& params, std::span<const int> prompt,
                                                        std::span<const int> response);

/// Log-softmax in double of one logits row.
template <typename T>
std::vector<double> log_softmax(std::span<const T> logits);

/// Incremental (cached) inference for one sequence. Produces logits that are
/// bitwise identical to the corresponding rows of forward().
template <typename T>
class Decoder {
 public:
  explicit Decoder(const Parameters<T>& params);
  /// Appends a token and returns the logits predicting the next one.
  std::span<const T> step(int token);
  std::span<const T> logits() const { return logits_; }
  int length() const { return length_; }

 private:
  const Parameters<T>* params_;
  int length_ = 0;
  std::vector<std::vector<T>> keys_;    // per layer, length x d_model
  std::vector<std::vector<T>> values_;  // per layer, length x d_model
  std::vector<T> logits_;
};

struct SampleResult {
  std::vector<int> tokens;
  std::vector<double> logprobs;  // temperature-1 log-probabilities of the sampled tokens
};

/// Autoregressive sampling at `temperature`; stops after `max_new` tokens or
/// right after emitting `stop_token` (if >= 0).
template <typename T>
SampleResult sample(const Parameters<T>& params, std::span<const int> prompt, double temperature, int max_new,
                    std::uint64_t seed, int stop_token = -1);

void save_checkpoint(const Parameters<float>& params, const std::filesystem::path& path,
                     const std::string& provenance_json = "{}");
struct Checkpoint {
  Parameters<float> params;
  std::string provenance_json;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace onerec::model
