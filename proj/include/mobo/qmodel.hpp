#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mobo/rng.hpp"

namespace mobo {

// Raised when training produces non-finite values.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int n_layers = 8;
  int n_heads = 4;
  int hidden = 128;
  double dropout = 0.1;
  int window = 31;  // w: the model sees at most w-1 history frames + 1 candidate
  int k = 2;        // objectives

  int feature_dim() const { return 3 * k + 1; }
  bool operator==(const ModelConfig& o) const {
    return n_layers == o.n_layers && n_heads == o.n_heads && hidden == o.hidden &&
           dropout == o.dropout && window == o.window && k == o.k;
  }
};

// One acquisition-step observation: features [mu_1..K, sd_1..K, y*_1..K, t/T].
// History frames carry the realized reward and the recursive target-Q value;
// the frame being scored (the candidate) carries neither.
struct ObservationFrame {
  Eigen::VectorXd features;
  double reward = 0.0;
  double target_q = 0.0;
};

// Named dense parameter tensors.  Kept as a flat registry so the optimizer,
// serializer, and gradient checks can iterate uniformly.
class ParameterStore {
 public:
  Eigen::MatrixXd& add(const std::string& name, int rows, int cols);
  Eigen::MatrixXd& at(const std::string& name);
  const Eigen::MatrixXd& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  void remove(const std::string& name);

  const std::vector<std::string>& names() const { return order_; }
  std::int64_t parameter_count() const;

  // Same shapes, all zeros: gradient / moment buffers.
  ParameterStore zeros_like() const;

 private:
  std::map<std::string, Eigen::MatrixXd> tensors_;
  std::vector<std::string> order_;  // insertion order, for stable iteration
};

// The sequence scorer: token embeddings for (frame, reward, target-q), a
// shared per-timestep positional table, a pre-norm causal self-attention
// stack with GELU feed-forward blocks, and a scalar output head read at the
// candidate position.
class SeqQModel {
 public:
  SeqQModel(ModelConfig cfg);

  // Weights ~ N(0, 0.02^2), biases zero, layer-norm gains one, output head
  // zero so a fresh model scores every input exactly 0.
  void init_params(Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Deterministic inference-mode score (dropout off).  History must hold at
  // most window-1 frames, oldest first.
  double forward(const std::vector<ObservationFrame>& history,
                 const ObservationFrame& candidate) const;

  // Scores many candidates against one shared history, reusing the prefix
  // attention state.  Agrees with a forward() loop within 1e-6.
  Eigen::VectorXd forward_candidates(const std::vector<ObservationFrame>& history,
                                     const Eigen::MatrixXd& candidate_features) const;

  struct BatchItem {
    std::vector<ObservationFrame> history;
    ObservationFrame candidate;
    double td_target = 0.0;
  };

  enum class Reduction { kMean, kSum };

  // Squared-TD-residual loss over the batch with exact reverse-mode gradients.
  // dropout_seed activates seeded dropout when the configured rate is > 0.
  // Throws TrainingError on non-finite loss.
  double backward(const std::vector<BatchItem>& batch, ParameterStore& grads,
                  Reduction reduction = Reduction::kMean,
                  std::optional<std::uint64_t> dropout_seed = std::nullopt) const;

  // Serialization: versioned header plus named float32 little-endian tensors.
  void save_checkpoint(const std::string& path, const std::string& extra_json = "") const;
  static SeqQModel load_checkpoint(const std::string& path, std::string* extra_json = nullptr);

 private:
  ModelConfig cfg_;
  ParameterStore params_;
};

// Adam with decoupled weight decay (applied after the adaptive step).
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(const ParameterStore& params);

  void step(ParameterStore& params, const ParameterStore& grads, double lr, double weight_decay,
            const std::vector<std::string>* skip = nullptr);

  std::int64_t t() const { return t_; }

  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

 private:
  ParameterStore m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace mobo
