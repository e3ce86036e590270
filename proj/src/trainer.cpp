#include "mobo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "mobo/acquisition.hpp"
#include "mobo/gp.hpp"
#include "mobo/pareto.hpp"

namespace mobo {

namespace {

// Most recent window-1 frames, oldest first.
std::vector<ObservationFrame> window_of(const std::vector<ObservationFrame>& frames,
                                        int window) {
  const int keep = std::min<int>(static_cast<int>(frames.size()), window - 1);
  return {frames.end() - keep, frames.end()};
}

double td_error_from_items(const SeqQModel& policy,
                           const std::vector<SeqQModel::BatchItem>& items) {
  double total = 0.0;
  for (const auto& item : items) {
    double r = policy.forward(item.history, item.candidate) - item.td_target;
    total += r * r;
  }
  return total;
}

// Shared episode state: archive, per-objective surrogates, reward bookkeeping.
class EpisodeSim {
 public:
  EpisodeSim(const EpisodeTask& task, const TrainerConfig& cfg) : task_(task), cfg_(cfg),
        archive_(task.reference_point) {
    KernelSpec spec;
    spec.kind = KernelSpec::Kind::kRbf;
    spec.signal_variance = 1.0;
    spec.noise_variance = std::max(task.noise_std * task.noise_std, 1e-8);
    for (int j = 0; j < task_.k; ++j) {
      double ls = task_.gen_lengthscales.size() == task_.k ? task_.gen_lengthscales[j] : 0.2;
      spec.lengthscale = ls;
      gps_.emplace_back(spec, task_.dim);
    }
  }

  // Candidate observation matrix for 1-based step t: per-objective posterior
  // mean and sd over the grid, running best observations, and episode phase.
  Eigen::MatrixXd step_features(int t) {
    if (cfg_.gp_refit_every > 0 && t > 1 && (t - 1) % cfg_.gp_refit_every == 0) {
      for (auto& gp : gps_) gp.fit_lengthscale_mll(0.05, 2.0);
    }
    const int n = task_.grid_n();
    const int k = task_.k;
    posterior_ = MultiPosterior{};
    posterior_.mean.resize(n, k);
    posterior_.sd.resize(n, k);
    posterior_.best.resize(k);
    for (int j = 0; j < k; ++j) {
      PosteriorSummary s = gps_[j].posterior(task_.grid);
      posterior_.mean.col(j) = s.mean;
      posterior_.sd.col(j) = s.sd;
      posterior_.best[j] = s.best_observed;
    }
    Eigen::MatrixXd feats(n, 3 * k + 1);
    feats.leftCols(k) = posterior_.mean;
    feats.middleCols(k, k) = posterior_.sd;
    feats.middleCols(2 * k, k) = posterior_.best.transpose().replicate(n, 1);
    feats.col(3 * k).setConstant(static_cast<double>(t) / cfg_.horizon);
    return feats;
  }

  // Applies the chosen index: observe, push, record, learn.  Returns the
  // normalized reward.
  double apply(int idx, Rng& rng) {
    Eigen::VectorXd y = evaluate(task_, idx, rng);
    double raw = archive_.push(y);
    double reward = normalized_reward(raw, task_.hv_star, archive_.hv());
    for (int j = 0; j < task_.k; ++j) gps_[j].add(task_.grid.row(idx).transpose(), y[j]);
    return reward;
  }

  const MultiPosterior& posterior() const { return posterior_; }
  const ParetoArchive& archive() const { return archive_; }
  double hv() const { return archive_.hv(); }

 private:
  const EpisodeTask& task_;
  const TrainerConfig& cfg_;
  ParetoArchive archive_;
  std::vector<GPModel> gps_;
  MultiPosterior posterior_;
};

int softmax_draw(const Eigen::VectorXd& scores, double temperature, Rng& rng) {
  Eigen::ArrayXd logits = scores.array() / temperature;
  Eigen::ArrayXd p = (logits - logits.maxCoeff()).exp();
  p /= p.sum();
  double u = runif(rng);
  double acc = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return static_cast<int>(p.size()) - 1;
}

// Subsampled candidate matrix: at most cap rows, the chosen row always first.
Eigen::MatrixXd subsample_candidates(const Eigen::MatrixXd& feats, int chosen, int cap,
                                     Rng& rng) {
  const int n = static_cast<int>(feats.rows());
  if (n <= cap) return feats;
  std::vector<int> others;
  others.reserve(n - 1);
  for (int i = 0; i < n; ++i)
    if (i != chosen) others.push_back(i);
  for (int i = 0; i < cap - 1; ++i) {  // partial Fisher-Yates
    int j = i + rint(rng, static_cast<int>(others.size()) - i);
    std::swap(others[i], others[j]);
  }
  Eigen::MatrixXd out(cap, feats.cols());
  out.row(0) = feats.row(chosen);
  for (int i = 0; i < cap - 1; ++i) out.row(i + 1) = feats.row(others[i]);
  return out;
}

std::string checkpoint_meta(int episodes, int k) {
  return "{\"episodes\":" + std::to_string(episodes) + ",\"k\":" + std::to_string(k) + "}";
}

}  // namespace

// --- PTRB ---------------------------------------------------------------------

PTRB::PTRB(int capacity, double alpha) : capacity_(capacity), alpha_(alpha) {
  if (capacity < 1) throw std::invalid_argument("PTRB capacity must be >= 1");
  if (alpha < 0.0) throw std::invalid_argument("PTRB alpha must be >= 0");
}

void PTRB::push(Trajectory traj, double priority) {
  if (!(priority > 0.0)) throw std::invalid_argument("PTRB priorities must be > 0");
  if (size() < capacity_) {
    entries_.push_back(std::move(traj));
    priorities_.push_back(priority);
    return;
  }
  int lowest = static_cast<int>(
      std::min_element(priorities_.begin(), priorities_.end()) - priorities_.begin());
  entries_[lowest] = std::move(traj);
  priorities_[lowest] = priority;
}

std::vector<int> PTRB::sample(Rng& rng, int count) const {
  if (entries_.empty()) throw std::logic_error("PTRB::sample on an empty buffer");
  std::vector<double> cdf(priorities_.size());
  double total = 0.0;
  for (std::size_t i = 0; i < priorities_.size(); ++i) {
    total += std::pow(priorities_[i], alpha_);
    cdf[i] = total;
  }
  std::vector<int> out(count);
  for (int s = 0; s < count; ++s) {
    double u = runif(rng, 0.0, total);
    out[s] = static_cast<int>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    out[s] = std::min<int>(out[s], static_cast<int>(cdf.size()) - 1);
  }
  return out;
}

void PTRB::set_priority(int index, double priority) {
  if (!(priority > 0.0)) throw std::invalid_argument("PTRB priorities must be > 0");
  priorities_.at(index) = priority;
}

// --- TD machinery ---------------------------------------------------------------

std::vector<double> recursive_target_q(const SeqQModel& target, const Trajectory& traj) {
  const int t_len = traj.length();
  const int window = target.config().window;
  std::vector<double> qbar(t_len);
  std::vector<ObservationFrame> aug;
  aug.reserve(t_len);
  for (int t = 0; t < t_len; ++t) {
    ObservationFrame cand;
    cand.features = traj.frames[t];
    qbar[t] = target.forward(window_of(aug, window), cand);
    aug.push_back({traj.frames[t], traj.rewards[t], qbar[t]});
  }
  return qbar;
}

std::vector<SeqQModel::BatchItem> build_td_items(const SeqQModel& target, const Trajectory& traj,
                                                 double gamma) {
  const int t_len = traj.length();
  const int window = target.config().window;
  std::vector<double> qbar = recursive_target_q(target, traj);
  std::vector<ObservationFrame> aug(t_len);
  for (int t = 0; t < t_len; ++t) aug[t] = {traj.frames[t], traj.rewards[t], qbar[t]};

  std::vector<SeqQModel::BatchItem> items;
  items.reserve(std::max(t_len - 1, 0));
  for (int s = 0; s + 1 < t_len; ++s) {
    SeqQModel::BatchItem item;
    item.history = window_of({aug.begin(), aug.begin() + s}, window);
    item.candidate.features = traj.frames[s];
    std::vector<ObservationFrame> next_hist =
        window_of({aug.begin(), aug.begin() + s + 1}, window);
    Eigen::VectorXd scores = target.forward_candidates(next_hist, traj.candidates[s]);
    item.td_target = traj.rewards[s] + gamma * scores.maxCoeff();
    items.push_back(std::move(item));
  }
  return items;
}

double trajectory_td_error(const SeqQModel& policy, const SeqQModel& target,
                           const Trajectory& traj, double gamma) {
  return td_error_from_items(policy, build_td_items(target, traj, gamma));
}

// --- Episode collection ----------------------------------------------------------

CollectResult collect_episode(const SeqQModel& policy, const SeqQModel& target,
                              const EpisodeTask& task, const TrainerConfig& cfg,
                              std::uint64_t task_seed, Rng& rng) {
  const int t_len = cfg.horizon;
  const int window = policy.config().window;
  if (policy.config().feature_dim() != 3 * task.k + 1)
    throw std::invalid_argument("collect_episode: model objectives do not match the task");

  CollectResult result;
  result.demo_used = runif(rng) < cfg.r_demo;
  const bool eval_mode = cfg.temperature <= 0.0;
  result.epsilon_used = (result.demo_used || eval_mode) ? 0.0 : cfg.eps_greedy;

  Trajectory& traj = result.traj;
  traj.task_seed = task_seed;
  EpisodeSim sim(task, cfg);
  std::vector<ObservationFrame> aug;

  for (int t = 1; t <= t_len; ++t) {
    Eigen::MatrixXd feats = sim.step_features(t);
    int idx = 0;
    if (result.demo_used) {
      idx = demo_select(sim.posterior(), sim.archive(), rng, cfg.demo_ehvi_samples);
    } else {
      Eigen::VectorXd q = policy.forward_candidates(window_of(aug, window), feats);
      if (eval_mode) {
        idx = argmax_lowest(q);
      } else if (runif(rng) < cfg.eps_greedy) {
        idx = rint(rng, static_cast<int>(feats.rows()));
      } else {
        idx = softmax_draw(q, cfg.temperature, rng);
      }
    }
    double reward = sim.apply(idx, rng);

    traj.chosen.push_back(idx);
    traj.frames.push_back(feats.row(idx).transpose());
    traj.rewards.push_back(reward);
    traj.hv_curve.push_back(sim.hv());
    if (t >= 2)
      traj.candidates.push_back(
          subsample_candidates(feats, idx, cfg.max_stored_candidates, rng));

    ObservationFrame chosen_frame;
    chosen_frame.features = traj.frames.back();
    double qbar = target.forward(window_of(aug, window), chosen_frame);
    aug.push_back({traj.frames.back(), reward, qbar});
  }
  return result;
}

// --- Trainer -----------------------------------------------------------------------

Trainer::Trainer(TrainerConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), seed_(seed), policy_(cfg_.model), target_(cfg_.model),
      buffer_(cfg_.buffer_capacity, cfg_.priority_alpha) {
  Rng init_rng(derive_seed(seed_, 1));
  policy_.init_params(init_rng);
  target_.params() = policy_.params();
  adam_ = AdamState(policy_.params());
}

Trainer::Trainer(TrainerConfig cfg, std::uint64_t seed, SeqQModel policy,
                 std::vector<std::string> frozen, int start_episode)
    : cfg_(std::move(cfg)), seed_(seed), policy_(std::move(policy)), target_(policy_.config()),
      buffer_(cfg_.buffer_capacity, cfg_.priority_alpha), frozen_(std::move(frozen)),
      episodes_done_(start_episode) {
  if (!(policy_.config() == cfg_.model))
    throw std::invalid_argument("Trainer: supplied model does not match the configuration");
  target_.params() = policy_.params();
  adam_ = AdamState(policy_.params());
}

void Trainer::sync_target() {
  target_.params() = policy_.params();
  ++target_gen_;
}

void Trainer::maybe_checkpoint(int episode, bool force) {
  if (cfg_.out_checkpoint.empty()) return;
  if (force || (cfg_.checkpoint_every > 0 && episode % cfg_.checkpoint_every == 0))
    policy_.save_checkpoint(cfg_.out_checkpoint, checkpoint_meta(episode, cfg_.model.k));
}

namespace {

const std::vector<SeqQModel::BatchItem>& items_for(const Trajectory& traj,
                                                   const SeqQModel& target, double gamma,
                                                   std::int64_t target_gen) {
  if (traj.cached_target_gen != target_gen) {
    traj.cached_items = build_td_items(target, traj, gamma);
    traj.cached_target_gen = target_gen;
  }
  return traj.cached_items;
}

void append_log_row(const std::string& path, const EpisodeLogRow& row, bool header) {
  if (path.empty()) return;
  std::ofstream out(path, header ? std::ios::trunc : std::ios::app);
  if (header) out << "episode,loss,episode_hv,buffer_size,epsilon_used,demo_used\n";
  char line[256];
  std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%d,%.17g,%d\n", row.episode, row.loss,
                row.episode_hv, row.buffer_size, row.epsilon_used, row.demo_used);
  out << line;
}

}  // namespace

EpisodeLogRow Trainer::run_offpolicy_episode(int episode) {
  const std::uint64_t base = 4ull * static_cast<std::uint64_t>(episode);
  const std::uint64_t task_seed = derive_seed(seed_, base);
  EpisodeTask task = make_task_from_config(cfg_.task, task_seed);
  Rng ep_rng(derive_seed(seed_, base + 1));
  CollectResult col = collect_episode(policy_, target_, task, cfg_, task_seed, ep_rng);

  if (cfg_.target_sync_every > 0 && episode % cfg_.target_sync_every == 0) sync_target();

  double push_priority = std::max(
      td_error_from_items(policy_, items_for(col.traj, target_, cfg_.gamma, target_gen_)),
      1e-12);
  double episode_hv = col.traj.hv_curve.back();
  buffer_.push(std::move(col.traj), push_priority);

  Rng sample_rng(derive_seed(seed_, base + 2));
  std::vector<int> picks = buffer_.sample(sample_rng, cfg_.batch);

  ParameterStore total = policy_.params().zeros_like();
  double loss = 0.0;
  const std::uint64_t dropout_base = derive_seed(seed_, base + 3);
  for (std::size_t slot = 0; slot < picks.size(); ++slot) {
    const Trajectory& traj = buffer_.at(picks[slot]);
    const auto& items = items_for(traj, target_, cfg_.gamma, target_gen_);
    ParameterStore grads;
    double traj_loss = 0.0;
    try {
      traj_loss = policy_.backward(items, grads, SeqQModel::Reduction::kSum,
                                   derive_seed(dropout_base, slot));
    } catch (const TrainingError& err) {
      throw TrainingError(std::string(err.what()) + " [episode " + std::to_string(episode) +
                          ", trajectory task seed " + std::to_string(traj.task_seed) + "]");
    }
    loss += traj_loss;
    for (const auto& name : total.names()) total.at(name) += grads.at(name);
  }
  if (!std::isfinite(loss))
    throw TrainingError("non-finite training loss at episode " + std::to_string(episode));
  adam_.step(policy_.params(), total, cfg_.lr, cfg_.weight_decay,
             frozen_.empty() ? nullptr : &frozen_);

  std::set<int> unique(picks.begin(), picks.end());
  for (int idx : unique) {
    const Trajectory& traj = buffer_.at(idx);
    double refreshed = std::max(
        td_error_from_items(policy_, items_for(traj, target_, cfg_.gamma, target_gen_)), 1e-12);
    buffer_.set_priority(idx, refreshed);
  }

  return {episode, loss, episode_hv, buffer_.size(), col.epsilon_used, col.demo_used ? 1 : 0};
}

std::vector<EpisodeLogRow> Trainer::train() {
  std::vector<EpisodeLogRow> rows;
  bool fresh_log = episodes_done_ == 0;
  for (int e = episodes_done_ + 1; e <= cfg_.episodes; ++e) {
    EpisodeLogRow row = run_offpolicy_episode(e);
    episodes_done_ = e;
    rows.push_back(row);
    append_log_row(cfg_.log_path, row, fresh_log && rows.size() == 1);
    maybe_checkpoint(e);
  }
  maybe_checkpoint(episodes_done_, true);
  return rows;
}

EpisodeLogRow Trainer::run_onpolicy_episode(int episode) {
  const std::uint64_t base = 4ull * static_cast<std::uint64_t>(episode);
  const std::uint64_t task_seed = derive_seed(seed_, base);
  EpisodeTask task = make_task_from_config(cfg_.task, task_seed);
  Rng rng(derive_seed(seed_, base + 1));
  const int window = policy_.config().window;

  EpisodeSim sim(task, cfg_);
  std::vector<ObservationFrame> aug;
  std::vector<Eigen::VectorXd> frames;
  std::vector<double> rewards;
  double loss = 0.0;

  for (int t = 1; t <= cfg_.horizon; ++t) {
    Eigen::MatrixXd feats = sim.step_features(t);

    if (t >= 2) {
      // One optimizer step on the previous transition, bootstrapped against
      // this step's candidates.
      const int s = t - 2;
      SeqQModel::BatchItem item;
      item.history = window_of({aug.begin(), aug.begin() + s}, window);
      item.candidate.features = frames[s];
      std::vector<ObservationFrame> next_hist =
          window_of({aug.begin(), aug.begin() + s + 1}, window);
      Eigen::VectorXd next_q = target_.forward_candidates(next_hist, feats);
      item.td_target = rewards[s] + cfg_.gamma * next_q.maxCoeff();

      ParameterStore grads;
      double step_loss = 0.0;
      try {
        step_loss = policy_.backward({item}, grads, SeqQModel::Reduction::kSum,
                                     derive_seed(seed_, base + 3 + 4ull * t));
      } catch (const TrainingError& err) {
        throw TrainingError(std::string(err.what()) + " [episode " + std::to_string(episode) +
                            ", task seed " + std::to_string(task_seed) + "]");
      }
      loss += step_loss;
      adam_.step(policy_.params(), grads, cfg_.lr, cfg_.weight_decay,
                 frozen_.empty() ? nullptr : &frozen_);
    }

    Eigen::VectorXd q = policy_.forward_candidates(window_of(aug, window), feats);
    int idx = argmax_lowest(q);
    double reward = sim.apply(idx, rng);
    frames.push_back(feats.row(idx).transpose());
    rewards.push_back(reward);

    ObservationFrame chosen;
    chosen.features = frames.back();
    double qbar = target_.forward(window_of(aug, window), chosen);
    aug.push_back({frames.back(), reward, qbar});
  }
  if (!std::isfinite(loss))
    throw TrainingError("non-finite training loss at episode " + std::to_string(episode));
  if (cfg_.target_sync_every > 0 && episode % cfg_.target_sync_every == 0) sync_target();
  return {episode, loss, sim.hv(), 0, 0.0, 0};
}

std::vector<EpisodeLogRow> Trainer::train_onpolicy() {
  std::vector<EpisodeLogRow> rows;
  bool fresh_log = episodes_done_ == 0;
  for (int e = episodes_done_ + 1; e <= cfg_.episodes; ++e) {
    EpisodeLogRow row = run_onpolicy_episode(e);
    episodes_done_ = e;
    rows.push_back(row);
    append_log_row(cfg_.log_path, row, fresh_log && rows.size() == 1);
    maybe_checkpoint(e);
  }
  maybe_checkpoint(episodes_done_, true);
  return rows;
}

// --- Transfer -------------------------------------------------------------------

SeqQModel transfer_retrain_embedding(const SeqQModel& source, int new_k, TrainerConfig cfg,
                                     std::uint64_t seed, std::vector<EpisodeLogRow>* log) {
  if (new_k < 2) throw std::invalid_argument("transfer requires new_k >= 2");
  ModelConfig mc = source.config();
  mc.k = new_k;
  cfg.model = mc;

  SeqQModel fresh(mc);
  Rng init_rng(derive_seed(seed, 11));
  fresh.init_params(init_rng);
  std::vector<std::string> frozen;
  for (const auto& name : fresh.params().names()) {
    if (name == "embed_frame.w" || name == "embed_frame.b") continue;
    fresh.params().at(name) = source.params().at(name);
    frozen.push_back(name);
  }

  // Seed the regrown embedding from the source rows instead of leaving it at
  // the random init: objective slots present in both models copy their source
  // row, extra slots take their feature block's mean row, and the temporal
  // feature keeps its row.  The frozen backbone then starts from tokens drawn
  // from the latent distribution it was trained on, which the embedding-only
  // episodes refine; a cold random embedding feeds it unrecognizable tokens
  // and wastes most of the short transfer budget recovering.
  {
    const int ks = source.config().k;
    const Eigen::MatrixXd& src_w = source.params().at("embed_frame.w");
    Eigen::MatrixXd& w = fresh.params().at("embed_frame.w");
    for (int block = 0; block < 3; ++block) {
      Eigen::RowVectorXd block_mean = src_w.middleRows(block * ks, ks).colwise().mean();
      for (int j = 0; j < new_k; ++j)
        w.row(block * new_k + j) = j < ks ? src_w.row(block * ks + j) : block_mean;
    }
    w.row(3 * new_k) = src_w.row(3 * ks);
    fresh.params().at("embed_frame.b") = source.params().at("embed_frame.b");
  }

  Trainer trainer(std::move(cfg), seed, std::move(fresh), std::move(frozen));
  std::vector<EpisodeLogRow> rows = trainer.train();
  if (log) *log = std::move(rows);
  return std::move(trainer.policy());
}

}  // namespace mobo
