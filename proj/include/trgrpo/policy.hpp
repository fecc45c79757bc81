#pragma once

#include "trgrpo/graph.hpp"
#include "trgrpo/linalg.hpp"
#include "trgrpo/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace trgrpo {

class Vocabulary {
 public:
  static constexpr int kMaxSize = 64;

  Vocabulary(std::vector<std::string> tokens, const std::string& eos);

  int size() const { return static_cast<int>(tokens_.size()); }
  int eos() const { return eos_; }
  const std::string& symbol(int index) const { return tokens_.at(static_cast<std::size_t>(index)); }
  int index_of(const std::string& symbol) const;
  bool contains(int index) const { return index >= 0 && index < size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  int eos_ = -1;
};

struct PolicyShape {
  int vocab_size = 0;
  int embedding_dim = 8;
  int context_window = 8;
  int hidden_width = 32;
  int hidden_layers = 1;

  int layer_input_width(int layer) const { return layer == 0 ? context_window * embedding_dim : hidden_width; }
  void validate() const;
  bool operator==(const PolicyShape&) const = default;
};

// Fixed-window MLP: the last `context_window` token embeddings are
// concatenated (pad positions contribute zeros), passed through
// `hidden_layers` tanh layers a = tanh(W a_prev + b), and projected to logits
// h = U a_L. Weights are stored output-major (out x in).
struct PolicyParams {
  PolicyShape shape;
  Matrix embedding;             // vocab x embedding_dim
  std::vector<Matrix> weights;  // hidden_width x layer_input_width(l)
  std::vector<Matrix> biases;   // 1 x hidden_width
  Matrix unembedding;           // vocab x hidden_width

  static PolicyParams zeros(const PolicyShape& shape);
  /// Weights and embeddings uniform in [-0.08, 0.08], biases zero.
  static PolicyParams initialize(const PolicyShape& shape, std::uint64_t seed, double scale = 0.08);

  std::size_t parameter_count() const;
  std::vector<std::string> names() const;
  const Matrix& array(const std::string& name) const;
  Matrix& array(const std::string& name);

  /// Name -> array map suitable for binding a policy graph.
  Bindings bindings() const;

  /// Concatenation of all arrays in names() order.
  Vector flatten() const;
  void assign(const Vector& flat);
  Vector flatten(const Gradients& grads) const;

  bool operator==(const PolicyParams&) const = default;
};

std::string hidden_weight_name(int layer);
std::string hidden_bias_name(int layer);

struct ForwardTrace {
  RowVector input;                     // concatenated window embedding
  std::vector<RowVector> activations;  // a_1 .. a_L
  RowVector logits;
  RowVector probs;
  RowVector log_probs;
};

/// Last `window` tokens of `history`, left-padded with kPadIndex.
std::vector<int> context_window(std::span<const int> history, int window);

ForwardTrace token_distribution(const PolicyParams& params, std::span<const int> context);

/// Entry t is log pi(output[t] | prompt ++ output[<t]).
std::vector<double> sequence_log_probs(const PolicyParams& params, std::span<const int> prompt,
                                       std::span<const int> output);

enum class SnapshotRole { Old, Ref };

class PolicySnapshot {
 public:
  PolicySnapshot(const PolicyParams& params, SnapshotRole role)
      : params_(std::make_shared<const PolicyParams>(params)), role_(role) {}
  const PolicyParams& params() const { return *params_; }
  SnapshotRole role() const { return role_; }

 private:
  std::shared_ptr<const PolicyParams> params_;
  SnapshotRole role_;
};

struct SamplingOptions {
  double temperature = 1.0;  // 0 selects greedy argmax decoding
  int max_length = 16;
  bool record_tempered = false;  // record log-probs of the tempered sampling distribution
};

struct SampledSequence {
  std::vector<int> tokens;
  std::vector<double> log_probs;
};

/// G rollouts from `snapshot`; rollout i draws from Rng::stream(seed, {i}).
std::vector<SampledSequence> sample_group(const PolicySnapshot& snapshot, std::span<const int> prompt, int group_size,
                                          const SamplingOptions& options, int eos, std::uint64_t seed);

// Graph form of the policy for batched training losses.
struct PolicyGraph {
  Expr embedding;
  std::vector<Expr> weights;
  std::vector<Expr> biases;
  Expr unembedding;
};

PolicyGraph declare_policy(GraphBuilder& builder, const PolicyShape& shape);

struct PolicyOutputs {
  Expr logits;           // T x vocab
  Expr log_probs;        // T x vocab
  Expr token_log_probs;  // T x 1
};

/// `contexts` holds one window per row (T x context_window).
PolicyOutputs policy_forward(const PolicyGraph& policy, IndexMatrix contexts, const std::vector<int>& tokens);

/// Context windows for every position of `output` given `prompt`.
IndexMatrix rollout_contexts(std::span<const int> prompt, std::span<const int> output, int window);

enum class JacobianMethod { ChainRule, FiniteDifference };

// Jacobians in derivative layout (rows index outputs): gradients of a scalar
// propagate as row vectors multiplied on the right, g_prev = g_next * J.
struct LayerJacobians {
  Matrix unembedding;             // d logits / d a_L (vocab x hidden)
  std::vector<Matrix> hidden;     // hidden[j] = d a_{j+2} / d a_{j+1}, L-1 entries
  std::vector<Matrix> parameter;  // parameter[l] = d a_{l+1} / d theta_{l+1}, theta = [weight row-major, bias]
  ForwardTrace trace;
};

inline constexpr int kJacobianMaxWidth = 32;
inline constexpr int kJacobianMaxLayerParams = 4096;

LayerJacobians numerical_layer_jacobians(const PolicyParams& params, std::span<const int> context,
                                         JacobianMethod method = JacobianMethod::ChainRule, double step = 1e-6);

// Checkpoints: versioned text, shortest round-trip decimal per value.
std::string checkpoint_string(const PolicyParams& params);
PolicyParams parse_checkpoint(const std::string& text);
void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_checkpoint(const std::filesystem::path& path);

}  // namespace trgrpo
