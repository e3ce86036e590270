#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mobo/config.hpp"
#include "mobo/objectives.hpp"
#include "mobo/qmodel.hpp"

namespace mobo {

// One collected acquisition episode: the chosen grid indices, the chosen
// points' observation frames, normalized rewards, and (for steps 2..T) the
// candidate feature matrices needed for the bootstrapped max over next
// actions.  Candidate matrices are subsampled to bound memory; the chosen
// point is always retained.
struct Trajectory {
  std::vector<int> chosen;                  // length T
  std::vector<Eigen::VectorXd> frames;      // o_t(x_t) features, length T
  std::vector<double> rewards;              // normalized rewards, length T
  std::vector<Eigen::MatrixXd> candidates;  // index t-1 holds step t+1's matrix, length T-1
  std::uint64_t task_seed = 0;
  std::vector<double> hv_curve;             // archive value after each step

  int length() const { return static_cast<int>(rewards.size()); }

  // Lazy cache of the TD items; valid while the target network generation
  // matches.  Purely an evaluation cache: rebuilding yields identical values.
  mutable std::int64_t cached_target_gen = -1;
  mutable std::vector<SeqQModel::BatchItem> cached_items;
};

// Prioritized trajectory replay buffer: proportional sampling on priority^alpha,
// lowest-priority eviction when full.
class PTRB {
 public:
  PTRB(int capacity, double alpha);

  // Inserts the trajectory, evicting the lowest-priority resident when full.
  void push(Trajectory traj, double priority);

  // `count` indices drawn with replacement, P(i) proportional to p_i^alpha.
  std::vector<int> sample(Rng& rng, int count) const;

  void set_priority(int index, double priority);
  double priority(int index) const { return priorities_.at(index); }
  Trajectory& at(int index) { return entries_.at(index); }
  const Trajectory& at(int index) const { return entries_.at(index); }
  int size() const { return static_cast<int>(entries_.size()); }
  int capacity() const { return capacity_; }

 private:
  int capacity_;
  double alpha_;
  std::vector<Trajectory> entries_;
  std::vector<double> priorities_;
};

struct TrainerConfig {
  ModelConfig model;
  Config task;  // task.* keys consumed by make_task_from_config

  double gamma = 0.99;
  double lr = 1e-5;
  double weight_decay = 1e-5;
  int batch = 8;
  double r_demo = 0.01;
  double eps_greedy = 0.1;
  int target_sync_every = 5;
  int episodes = 300;
  int horizon = 50;
  double temperature = 1.0;  // <= 0 selects greedy argmax (evaluation mode)
  int buffer_capacity = 64;
  double priority_alpha = 0.6;
  int checkpoint_every = 50;
  int demo_ehvi_samples = 128;
  int max_stored_candidates = 256;
  int gp_refit_every = 0;  // 0: keep the task's generating lengthscales fixed

  std::string out_checkpoint;  // empty: keep the model in memory only
  std::string log_path;        // empty: no CSV, rows returned either way
};

struct EpisodeLogRow {
  int episode = 0;
  double loss = 0.0;
  double episode_hv = 0.0;
  int buffer_size = 0;
  double epsilon_used = 0.0;
  int demo_used = 0;
};

// Recursive target-network values along a trajectory: qbar[0] scores the first
// chosen point against an empty history; qbar[t] scores chosen point t against
// the window of earlier frames augmented with their rewards and earlier qbar
// values.
std::vector<double> recursive_target_q(const SeqQModel& target, const Trajectory& traj);

// The T-1 temporal-difference items of a trajectory: prediction inputs for the
// policy network and bootstrapped targets r_t + gamma * max over next-step
// candidates under the target network.
std::vector<SeqQModel::BatchItem> build_td_items(const SeqQModel& target, const Trajectory& traj,
                                                 double gamma);

// Summed squared TD residual of the policy network over one trajectory.
double trajectory_td_error(const SeqQModel& policy, const SeqQModel& target,
                           const Trajectory& traj, double gamma);

struct CollectResult {
  Trajectory traj;
  bool demo_used = false;
  double epsilon_used = 0.0;
};

// Runs one acquisition episode on the task.  With probability r_demo the whole
// episode follows the expected-hypervolume demo policy; otherwise actions are
// softmax draws over policy Q-values with an eps_greedy chance of a uniform
// index (temperature <= 0: plain argmax, no exploration).  History tokens are
// augmented with rewards and recursive target-network values.
CollectResult collect_episode(const SeqQModel& policy, const SeqQModel& target,
                              const EpisodeTask& task, const TrainerConfig& cfg,
                              std::uint64_t task_seed, Rng& rng);

// The training loop driver.  Episode seeds derive from the master seed and the
// episode index alone, so runs are reproducible and interruptible.
class Trainer {
 public:
  Trainer(TrainerConfig cfg, std::uint64_t seed);
  // Warm start (checkpoint resume / transfer): `frozen` tensors are excluded
  // from optimization entirely.
  Trainer(TrainerConfig cfg, std::uint64_t seed, SeqQModel policy,
          std::vector<std::string> frozen, int start_episode = 0);

  // Off-policy loop: collect, sync target on schedule, push with TD priority,
  // sample a batch by priority, one optimizer step, refresh sampled
  // priorities.  Returns one log row per episode.
  std::vector<EpisodeLogRow> train();

  // On-policy loop: greedy actions, one single-transition optimizer step per
  // environment step, no buffer and no demo policy.
  std::vector<EpisodeLogRow> train_onpolicy();

  SeqQModel& policy() { return policy_; }
  const SeqQModel& policy() const { return policy_; }
  const SeqQModel& target() const { return target_; }
  const PTRB& buffer() const { return buffer_; }
  std::int64_t target_generation() const { return target_gen_; }
  int episodes_done() const { return episodes_done_; }

 private:
  void sync_target();
  void maybe_checkpoint(int episode, bool force = false);
  EpisodeLogRow run_offpolicy_episode(int episode);
  EpisodeLogRow run_onpolicy_episode(int episode);

  TrainerConfig cfg_;
  std::uint64_t seed_;
  SeqQModel policy_;
  SeqQModel target_;
  AdamState adam_;
  PTRB buffer_;
  std::vector<std::string> frozen_;
  std::int64_t target_gen_ = 0;
  int episodes_done_ = 0;
};

// Retrains only the frame-feature embedding of a trained model for a new
// objective count: the embedding is rebuilt at width 3*new_k + 1 — seeded
// from the source's rows, with extra objective slots starting at their
// feature block's mean row — and every other tensor is copied from the
// source and frozen.  cfg.model and the task settings must describe the
// new_k problem.
SeqQModel transfer_retrain_embedding(const SeqQModel& source, int new_k, TrainerConfig cfg,
                                     std::uint64_t seed, std::vector<EpisodeLogRow>* log = nullptr);

}  // namespace mobo
