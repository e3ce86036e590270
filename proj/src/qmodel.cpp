#include "mobo/qmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mobo {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));           // CDF
  double dens = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);  // PDF
  return phi + x * dens;
}

// Row-wise layer norm, recording normalized values and reciprocal stddevs.
void layer_norm(const Eigen::MatrixXd& x, const Eigen::MatrixXd& gain,
                const Eigen::MatrixXd& bias, Eigen::MatrixXd& out, Eigen::MatrixXd& xhat,
                Eigen::VectorXd& rstd) {
  const int rows = static_cast<int>(x.rows());
  const int cols = static_cast<int>(x.cols());
  out.resize(rows, cols);
  xhat.resize(rows, cols);
  rstd.resize(rows);
  for (int i = 0; i < rows; ++i) {
    double mean = x.row(i).mean();
    double var = (x.row(i).array() - mean).square().mean();
    double r = 1.0 / std::sqrt(var + kLnEps);
    rstd[i] = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    out.row(i) = xhat.row(i).cwiseProduct(gain.row(0)) + bias.row(0);
  }
}

// Backward of layer_norm; accumulates parameter grads, returns input grad.
Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& xhat,
                                    const Eigen::VectorXd& rstd, const Eigen::MatrixXd& gain,
                                    Eigen::MatrixXd& dgain, Eigen::MatrixXd& dbias) {
  const int rows = static_cast<int>(dy.rows());
  const int cols = static_cast<int>(dy.cols());
  Eigen::MatrixXd dx(rows, cols);
  for (int i = 0; i < rows; ++i) {
    dgain.row(0) += dy.row(i).cwiseProduct(xhat.row(i));
    dbias.row(0) += dy.row(i);
    Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(gain.row(0));
    double m1 = dxhat.mean();
    double m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i) = rstd[i] * (dxhat.array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

// Seeded inverted dropout.  When inactive (rate 0 or no seed), mask stays
// empty and apply() is the identity, drawing nothing from any stream.
struct Dropout {
  double rate = 0.0;
  Rng* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }

  void apply(Eigen::MatrixXd& x, Eigen::MatrixXd& mask) {
    if (!active()) return;
    mask.resize(x.rows(), x.cols());
    const double keep = 1.0 - rate;
    for (int i = 0; i < x.rows(); ++i)
      for (int j = 0; j < x.cols(); ++j)
        mask(i, j) = runif(*rng) < rate ? 0.0 : 1.0 / keep;
    x = x.cwiseProduct(mask);
  }

  static void backward(Eigen::MatrixXd& dx, const Eigen::MatrixXd& mask) {
    if (mask.size()) dx = dx.cwiseProduct(mask);
  }
};

struct LayerCache {
  Eigen::MatrixXd x_in;           // block input
  Eigen::MatrixXd ln1_xhat, ln2_xhat;
  Eigen::VectorXd ln1_rstd, ln2_rstd;
  Eigen::MatrixXd a;              // post-LN1
  Eigen::MatrixXd q, k, v;        // S x H each
  std::vector<Eigen::MatrixXd> probs;       // per head, post-softmax pre-dropout
  std::vector<Eigen::MatrixXd> attn_masks;  // per head dropout masks
  Eigen::MatrixXd attn_concat;    // S x H, heads concatenated
  Eigen::MatrixXd resid1_mask;
  Eigen::MatrixXd x_mid;          // after attention residual
  Eigen::MatrixXd m2;             // post-LN2
  Eigen::MatrixXd f1;             // pre-GELU
  Eigen::MatrixXd g;              // post-GELU
  Eigen::MatrixXd resid2_mask;
};

struct ForwardCache {
  Eigen::MatrixXd x0;  // embedded tokens
  Eigen::MatrixXd embed_mask;
  std::vector<LayerCache> layers;
  Eigen::MatrixXd xf;        // block-stack output
  Eigen::RowVectorXd lnf_xhat_last;
  double lnf_rstd_last = 0.0;
  Eigen::RowVectorXd lnf_out_last;
};

}  // namespace

// --- ParameterStore ---------------------------------------------------------

Eigen::MatrixXd& ParameterStore::add(const std::string& name, int rows, int cols) {
  auto [it, fresh] = tensors_.emplace(name, Eigen::MatrixXd::Zero(rows, cols));
  if (!fresh) throw std::invalid_argument("ParameterStore: duplicate tensor " + name);
  order_.push_back(name);
  return it->second;
}

Eigen::MatrixXd& ParameterStore::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("ParameterStore: no tensor " + name);
  return it->second;
}

const Eigen::MatrixXd& ParameterStore::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("ParameterStore: no tensor " + name);
  return it->second;
}

void ParameterStore::remove(const std::string& name) {
  tensors_.erase(name);
  order_.erase(std::remove(order_.begin(), order_.end(), name), order_.end());
}

std::int64_t ParameterStore::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& name : order_) n += tensors_.at(name).size();
  return n;
}

ParameterStore ParameterStore::zeros_like() const {
  ParameterStore out;
  for (const auto& name : order_) {
    const auto& t = tensors_.at(name);
    out.add(name, static_cast<int>(t.rows()), static_cast<int>(t.cols()));
  }
  return out;
}

// --- SeqQModel: construction and parameters ---------------------------------

SeqQModel::SeqQModel(ModelConfig cfg) : cfg_(cfg) {
  if (cfg_.hidden % cfg_.n_heads != 0)
    throw std::invalid_argument("SeqQModel: hidden must be divisible by n_heads");
  if (cfg_.window < 1) throw std::invalid_argument("SeqQModel: window must be >= 1");
  if (cfg_.k < 1) throw std::invalid_argument("SeqQModel: k must be >= 1");

  const int h = cfg_.hidden;
  const int f = cfg_.feature_dim();
  params_.add("embed_frame.w", f, h);
  params_.add("embed_frame.b", 1, h);
  params_.add("embed_reward.w", 1, h);
  params_.add("embed_reward.b", 1, h);
  params_.add("embed_q.w", 1, h);
  params_.add("embed_q.b", 1, h);
  params_.add("pos", cfg_.window, h);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    params_.add(p + "ln1.g", 1, h);
    params_.add(p + "ln1.b", 1, h);
    params_.add(p + "attn.wqkv", h, 3 * h);
    params_.add(p + "attn.bqkv", 1, 3 * h);
    params_.add(p + "attn.wproj", h, h);
    params_.add(p + "attn.bproj", 1, h);
    params_.add(p + "ln2.g", 1, h);
    params_.add(p + "ln2.b", 1, h);
    params_.add(p + "mlp.wfc", h, 4 * h);
    params_.add(p + "mlp.bfc", 1, 4 * h);
    params_.add(p + "mlp.wproj", 4 * h, h);
    params_.add(p + "mlp.bproj", 1, h);
  }
  params_.add("lnf.g", 1, h);
  params_.add("lnf.b", 1, h);
  params_.add("head.w", h, 1);
  params_.add("head.b", 1, 1);
}

void SeqQModel::init_params(Rng& rng) {
  for (const auto& name : params_.names()) {
    Eigen::MatrixXd& t = params_.at(name);
    bool is_gain = name.ends_with("ln1.g") || name.ends_with("ln2.g") || name == "lnf.g";
    bool is_bias = name.ends_with(".b") && !is_gain;
    bool is_head = name.starts_with("head.");
    if (is_head || is_bias) {
      t.setZero();
    } else if (is_gain) {
      t.setOnes();
    } else {
      for (int i = 0; i < t.rows(); ++i)
        for (int j = 0; j < t.cols(); ++j) t(i, j) = rnorm(rng, 0.0, 0.02);
    }
  }
}

// --- Forward pass -----------------------------------------------------------

namespace {

// Assembles the embedded token matrix for one (history, candidate) input.
// Token order per history step: frame, reward, target-q; candidate last.
Eigen::MatrixXd embed_tokens(const ParameterStore& params, const ModelConfig& cfg,
                             const std::vector<ObservationFrame>& history,
                             const Eigen::RowVectorXd& candidate_features) {
  const int m = static_cast<int>(history.size());
  if (m > cfg.window - 1)
    throw std::invalid_argument("history exceeds window - 1 frames; truncate before calling");
  const int s = 3 * m + 1;
  const auto& wf = params.at("embed_frame.w");
  const auto& bf = params.at("embed_frame.b");
  const auto& wr = params.at("embed_reward.w");
  const auto& br = params.at("embed_reward.b");
  const auto& wq = params.at("embed_q.w");
  const auto& bq = params.at("embed_q.b");
  const auto& pos = params.at("pos");

  Eigen::MatrixXd x(s, cfg.hidden);
  for (int t = 0; t < m; ++t) {
    const auto& fr = history[t];
    if (fr.features.size() != cfg.feature_dim())
      throw std::invalid_argument("frame feature width mismatch");
    x.row(3 * t) = fr.features.transpose() * wf + bf.row(0) + pos.row(t);
    x.row(3 * t + 1) = fr.reward * wr.row(0) + br.row(0) + pos.row(t);
    x.row(3 * t + 2) = fr.target_q * wq.row(0) + bq.row(0) + pos.row(t);
  }
  if (candidate_features.size() != cfg.feature_dim())
    throw std::invalid_argument("candidate feature width mismatch");
  x.row(s - 1) = candidate_features * wf + bf.row(0) + pos.row(m);
  return x;
}

// Runs the block stack over embedded tokens.  Returns the final hidden state;
// fills the cache when one is supplied (training) and applies dropout through
// `drop` when active.
Eigen::MatrixXd run_blocks(const ParameterStore& params, const ModelConfig& cfg,
                           Eigen::MatrixXd x, Dropout& drop, ForwardCache* cache) {
  const int s = static_cast<int>(x.rows());
  const int h = cfg.hidden;
  const int nh = cfg.n_heads;
  const int dh = h / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (cache) cache->embed_mask.resize(0, 0);
  Eigen::MatrixXd embed_mask;
  drop.apply(x, embed_mask);
  if (cache) {
    cache->x0 = x;
    cache->embed_mask = embed_mask;
    cache->layers.resize(cfg.n_layers);
  }

  Eigen::MatrixXd xhat, a, out;
  Eigen::VectorXd rstd;
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    LayerCache* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) lc->x_in = x;

    layer_norm(x, params.at(p + "ln1.g"), params.at(p + "ln1.b"), a, xhat, rstd);
    if (lc) {
      lc->ln1_xhat = xhat;
      lc->ln1_rstd = rstd;
      lc->a = a;
    }
    Eigen::MatrixXd qkv = a * params.at(p + "attn.wqkv");
    qkv.rowwise() += params.at(p + "attn.bqkv").row(0);
    Eigen::MatrixXd q = qkv.leftCols(h);
    Eigen::MatrixXd k = qkv.middleCols(h, h);
    Eigen::MatrixXd v = qkv.rightCols(h);
    if (lc) {
      lc->q = q;
      lc->k = k;
      lc->v = v;
      lc->probs.resize(nh);
      lc->attn_masks.resize(nh);
    }

    Eigen::MatrixXd concat(s, h);
    for (int hd = 0; hd < nh; ++hd) {
      auto qh = q.middleCols(hd * dh, dh);
      auto kh = k.middleCols(hd * dh, dh);
      auto vh = v.middleCols(hd * dh, dh);
      Eigen::MatrixXd scores = scale * (qh * kh.transpose());
      // Causal softmax: row i sees columns 0..i.
      Eigen::MatrixXd probs = Eigen::MatrixXd::Zero(s, s);
      for (int i = 0; i < s; ++i) {
        double mx = scores.row(i).head(i + 1).maxCoeff();
        Eigen::ArrayXd e = (scores.row(i).head(i + 1).array() - mx).exp();
        probs.row(i).head(i + 1) = (e / e.sum()).matrix();
      }
      if (lc) lc->probs[hd] = probs;
      Eigen::MatrixXd mask;
      drop.apply(probs, mask);
      if (lc) lc->attn_masks[hd] = mask;
      concat.middleCols(hd * dh, dh) = probs * vh;
    }
    if (lc) lc->attn_concat = concat;

    Eigen::MatrixXd attn_out = concat * params.at(p + "attn.wproj");
    attn_out.rowwise() += params.at(p + "attn.bproj").row(0);
    Eigen::MatrixXd mask1;
    drop.apply(attn_out, mask1);
    if (lc) lc->resid1_mask = mask1;
    x += attn_out;
    if (lc) lc->x_mid = x;

    layer_norm(x, params.at(p + "ln2.g"), params.at(p + "ln2.b"), a, xhat, rstd);
    if (lc) {
      lc->ln2_xhat = xhat;
      lc->ln2_rstd = rstd;
      lc->m2 = a;
    }
    Eigen::MatrixXd f1 = a * params.at(p + "mlp.wfc");
    f1.rowwise() += params.at(p + "mlp.bfc").row(0);
    Eigen::MatrixXd g = f1.unaryExpr([](double t) { return gelu(t); });
    if (lc) {
      lc->f1 = f1;
      lc->g = g;
    }
    Eigen::MatrixXd f2 = g * params.at(p + "mlp.wproj");
    f2.rowwise() += params.at(p + "mlp.bproj").row(0);
    Eigen::MatrixXd mask2;
    drop.apply(f2, mask2);
    if (lc) lc->resid2_mask = mask2;
    x += f2;
  }
  if (cache) cache->xf = x;
  return x;
}

// Final layer norm + head at one row.
double readout(const ParameterStore& params, const Eigen::MatrixXd& xf, int row,
               ForwardCache* cache) {
  const auto& g = params.at("lnf.g");
  const auto& b = params.at("lnf.b");
  Eigen::RowVectorXd xr = xf.row(row);
  double mean = xr.mean();
  double var = (xr.array() - mean).square().mean();
  double rstd = 1.0 / std::sqrt(var + kLnEps);
  Eigen::RowVectorXd xhat = (xr.array() - mean) * rstd;
  Eigen::RowVectorXd y = xhat.cwiseProduct(g.row(0)) + b.row(0);
  if (cache) {
    cache->lnf_xhat_last = xhat;
    cache->lnf_rstd_last = rstd;
    cache->lnf_out_last = y;
  }
  return (y * params.at("head.w"))(0, 0) + params.at("head.b")(0, 0);
}

}  // namespace

double SeqQModel::forward(const std::vector<ObservationFrame>& history,
                          const ObservationFrame& candidate) const {
  Eigen::MatrixXd x =
      embed_tokens(params_, cfg_, history, candidate.features.transpose());
  Dropout off;
  Eigen::MatrixXd xf = run_blocks(params_, cfg_, std::move(x), off, nullptr);
  return readout(params_, xf, static_cast<int>(xf.rows()) - 1, nullptr);
}

Eigen::VectorXd SeqQModel::forward_candidates(const std::vector<ObservationFrame>& history,
                                              const Eigen::MatrixXd& candidate_features) const {
  const int m = static_cast<int>(history.size());
  if (m > cfg_.window - 1)
    throw std::invalid_argument("history exceeds window - 1 frames; truncate before calling");
  const int n_cand = static_cast<int>(candidate_features.rows());
  const int h = cfg_.hidden;
  const int nh = cfg_.n_heads;
  const int dh = h / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Eigen::VectorXd out(n_cand);
  if (n_cand == 0) return out;

  // Prefix pass: run the history tokens through the stack once, recording each
  // layer's keys and values (the only prefix state candidates attend to).
  const int ps = 3 * m;
  std::vector<Eigen::MatrixXd> pre_k(cfg_.n_layers), pre_v(cfg_.n_layers);
  if (ps > 0) {
    // Reuse embed_tokens by passing a dummy candidate, then dropping its row.
    Eigen::MatrixXd full = embed_tokens(params_, cfg_, history,
                                        Eigen::RowVectorXd::Zero(cfg_.feature_dim()));
    Eigen::MatrixXd x = full.topRows(ps);
    Eigen::MatrixXd xhat, a;
    Eigen::VectorXd rstd;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string p = "layer" + std::to_string(l) + ".";
      layer_norm(x, params_.at(p + "ln1.g"), params_.at(p + "ln1.b"), a, xhat, rstd);
      Eigen::MatrixXd qkv = a * params_.at(p + "attn.wqkv");
      qkv.rowwise() += params_.at(p + "attn.bqkv").row(0);
      pre_k[l] = qkv.middleCols(h, h);
      pre_v[l] = qkv.rightCols(h);
      Eigen::MatrixXd q = qkv.leftCols(h);

      Eigen::MatrixXd concat(ps, h);
      for (int hd = 0; hd < nh; ++hd) {
        auto qh = q.middleCols(hd * dh, dh);
        auto kh = pre_k[l].middleCols(hd * dh, dh);
        auto vh = pre_v[l].middleCols(hd * dh, dh);
        Eigen::MatrixXd scores = scale * (qh * kh.transpose());
        for (int i = 0; i < ps; ++i) {
          double mx = scores.row(i).head(i + 1).maxCoeff();
          Eigen::ArrayXd e = (scores.row(i).head(i + 1).array() - mx).exp();
          Eigen::RowVectorXd probs = Eigen::RowVectorXd::Zero(ps);
          probs.head(i + 1) = (e / e.sum()).matrix().transpose();
          concat.block(i, hd * dh, 1, dh) = probs * vh;
        }
      }
      Eigen::MatrixXd attn_out = concat * params_.at(p + "attn.wproj");
      attn_out.rowwise() += params_.at(p + "attn.bproj").row(0);
      x += attn_out;

      layer_norm(x, params_.at(p + "ln2.g"), params_.at(p + "ln2.b"), a, xhat, rstd);
      Eigen::MatrixXd f1 = a * params_.at(p + "mlp.wfc");
      f1.rowwise() += params_.at(p + "mlp.bfc").row(0);
      Eigen::MatrixXd g = f1.unaryExpr([](double t) { return gelu(t); });
      Eigen::MatrixXd f2 = g * params_.at(p + "mlp.wproj");
      f2.rowwise() += params_.at(p + "mlp.bproj").row(0);
      x += f2;
    }
  }

  // Candidate pass: all candidates as a batch of single-token sequences that
  // attend to the shared prefix keys/values plus themselves.
  const auto& wf = params_.at("embed_frame.w");
  const auto& bf = params_.at("embed_frame.b");
  const auto& pos = params_.at("pos");
  Eigen::MatrixXd xc = candidate_features * wf;
  xc.rowwise() += bf.row(0) + pos.row(m);

  Eigen::MatrixXd xhat, ac;
  Eigen::VectorXd rstd;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    layer_norm(xc, params_.at(p + "ln1.g"), params_.at(p + "ln1.b"), ac, xhat, rstd);
    Eigen::MatrixXd qkv = ac * params_.at(p + "attn.wqkv");
    qkv.rowwise() += params_.at(p + "attn.bqkv").row(0);
    Eigen::MatrixXd q = qkv.leftCols(h);
    Eigen::MatrixXd k = qkv.middleCols(h, h);
    Eigen::MatrixXd v = qkv.rightCols(h);

    Eigen::MatrixXd concat(n_cand, h);
    for (int hd = 0; hd < nh; ++hd) {
      auto qh = q.middleCols(hd * dh, dh);
      auto kh = k.middleCols(hd * dh, dh);
      auto vh = v.middleCols(hd * dh, dh);
      // Scores against prefix tokens (shared) and the candidate itself.
      Eigen::MatrixXd pscores;
      if (ps > 0) pscores = scale * (qh * pre_k[l].middleCols(hd * dh, dh).transpose());
      Eigen::VectorXd self = scale * (qh.array() * kh.array()).rowwise().sum().matrix();
      for (int c = 0; c < n_cand; ++c) {
        double mx = self[c];
        if (ps > 0) mx = std::max(mx, pscores.row(c).maxCoeff());
        double denom = std::exp(self[c] - mx);
        Eigen::RowVectorXd pe;
        if (ps > 0) {
          pe = (pscores.row(c).array() - mx).exp().matrix();
          denom += pe.sum();
        }
        Eigen::RowVectorXd o = (std::exp(self[c] - mx) / denom) * vh.row(c);
        if (ps > 0) o += (pe / denom) * pre_v[l].middleCols(hd * dh, dh);
        concat.block(c, hd * dh, 1, dh) = o;
      }
    }
    Eigen::MatrixXd attn_out = concat * params_.at(p + "attn.wproj");
    attn_out.rowwise() += params_.at(p + "attn.bproj").row(0);
    xc += attn_out;

    layer_norm(xc, params_.at(p + "ln2.g"), params_.at(p + "ln2.b"), ac, xhat, rstd);
    Eigen::MatrixXd f1 = ac * params_.at(p + "mlp.wfc");
    f1.rowwise() += params_.at(p + "mlp.bfc").row(0);
    Eigen::MatrixXd g = f1.unaryExpr([](double t) { return gelu(t); });
    Eigen::MatrixXd f2 = g * params_.at(p + "mlp.wproj");
    f2.rowwise() += params_.at(p + "mlp.bproj").row(0);
    xc += f2;
  }
  for (int c = 0; c < n_cand; ++c) out[c] = readout(params_, xc, c, nullptr);
  return out;
}

// --- Backward pass -----------------------------------------------------------

double SeqQModel::backward(const std::vector<BatchItem>& batch, ParameterStore& grads,
                           Reduction reduction, std::optional<std::uint64_t> dropout_seed) const {
  grads = params_.zeros_like();
  if (batch.empty()) return 0.0;
  const int h = cfg_.hidden;
  const int nh = cfg_.n_heads;
  const int dh = h / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double item_scale =
      reduction == Reduction::kMean ? 1.0 / static_cast<double>(batch.size()) : 1.0;

  // Each item accumulates into a scratch store folded into the total with one
  // add per tensor, so duplicated items contribute exactly twice.
  ParameterStore acc = params_.zeros_like();
  double loss = 0.0;
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    const BatchItem& item = batch[bi];
    for (const auto& name : acc.names()) acc.at(name).setZero();

    Rng drop_rng;
    Dropout drop;
    if (dropout_seed && cfg_.dropout > 0.0) {
      drop_rng.seed(derive_seed(*dropout_seed, bi));
      drop.rate = cfg_.dropout;
      drop.rng = &drop_rng;
    }

    ForwardCache cache;
    Eigen::MatrixXd x0 =
        embed_tokens(params_, cfg_, item.history, item.candidate.features.transpose());
    Eigen::MatrixXd xf = run_blocks(params_, cfg_, std::move(x0), drop, &cache);
    const int s = static_cast<int>(xf.rows());
    double qv = readout(params_, xf, s - 1, &cache);

    double resid = qv - item.td_target;
    loss += resid * resid;
    double dq = 2.0 * resid;

    // Head and final layer norm (gradient lives on the last row only).
    acc.at("head.w") += cache.lnf_out_last.transpose() * dq;
    acc.at("head.b")(0, 0) += dq;
    Eigen::RowVectorXd dy = dq * params_.at("head.w").transpose();

    Eigen::MatrixXd dxf = Eigen::MatrixXd::Zero(s, h);
    {
      Eigen::RowVectorXd dxhat = dy.cwiseProduct(params_.at("lnf.g").row(0));
      acc.at("lnf.g").row(0) += dy.cwiseProduct(cache.lnf_xhat_last);
      acc.at("lnf.b").row(0) += dy;
      double m1 = dxhat.mean();
      double m2 = dxhat.cwiseProduct(cache.lnf_xhat_last).mean();
      dxf.row(s - 1) =
          cache.lnf_rstd_last * (dxhat.array() - m1 - cache.lnf_xhat_last.array() * m2);
    }

    // Reverse the block stack.
    Eigen::MatrixXd dx = dxf;
    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
      std::string p = "layer" + std::to_string(l) + ".";
      LayerCache& lc = cache.layers[l];

      // MLP branch.
      Eigen::MatrixXd df2 = dx;
      Dropout::backward(df2, lc.resid2_mask);
      acc.at(p + "mlp.wproj") += lc.g.transpose() * df2;
      acc.at(p + "mlp.bproj").row(0) += df2.colwise().sum();
      Eigen::MatrixXd dg = df2 * params_.at(p + "mlp.wproj").transpose();
      Eigen::MatrixXd df1 =
          dg.cwiseProduct(lc.f1.unaryExpr([](double t) { return gelu_grad(t); }));
      acc.at(p + "mlp.wfc") += lc.m2.transpose() * df1;
      acc.at(p + "mlp.bfc").row(0) += df1.colwise().sum();
      Eigen::MatrixXd dm2 = df1 * params_.at(p + "mlp.wfc").transpose();
      dx += layer_norm_backward(dm2, lc.ln2_xhat, lc.ln2_rstd, params_.at(p + "ln2.g"),
                                acc.at(p + "ln2.g"), acc.at(p + "ln2.b"));

      // Attention branch.
      Eigen::MatrixXd dattn = dx;
      Dropout::backward(dattn, lc.resid1_mask);
      acc.at(p + "attn.wproj") += lc.attn_concat.transpose() * dattn;
      acc.at(p + "attn.bproj").row(0) += dattn.colwise().sum();
      Eigen::MatrixXd dconcat = dattn * params_.at(p + "attn.wproj").transpose();

      Eigen::MatrixXd dqkv = Eigen::MatrixXd::Zero(s, 3 * h);
      for (int hd = 0; hd < nh; ++hd) {
        auto vh = lc.v.middleCols(hd * dh, dh);
        auto qh = lc.q.middleCols(hd * dh, dh);
        auto kh = lc.k.middleCols(hd * dh, dh);
        Eigen::MatrixXd dout = dconcat.middleCols(hd * dh, dh);
        // probs were dropped out in-place during forward: reconstruct the
        // post-dropout matrix for the dV product.
        Eigen::MatrixXd probs_used = lc.probs[hd];
        if (lc.attn_masks[hd].size()) probs_used = probs_used.cwiseProduct(lc.attn_masks[hd]);
        Eigen::MatrixXd dprobs = dout * vh.transpose();
        dqkv.middleCols(2 * h + hd * dh, dh) += probs_used.transpose() * dout;
        Dropout::backward(dprobs, lc.attn_masks[hd]);
        // Softmax backward, row by causal row.
        Eigen::MatrixXd dscores = Eigen::MatrixXd::Zero(s, s);
        for (int i = 0; i < s; ++i) {
          auto prow = lc.probs[hd].row(i).head(i + 1);
          auto dprow = dprobs.row(i).head(i + 1);
          double dot = prow.dot(dprow);
          dscores.row(i).head(i + 1) = prow.cwiseProduct(dprow.array().matrix()) - dot * prow;
        }
        dqkv.middleCols(hd * dh, dh) += scale * (dscores * kh);
        dqkv.middleCols(h + hd * dh, dh) += scale * (dscores.transpose() * qh);
      }
      acc.at(p + "attn.wqkv") += lc.a.transpose() * dqkv;
      acc.at(p + "attn.bqkv").row(0) += dqkv.colwise().sum();
      Eigen::MatrixXd da = dqkv * params_.at(p + "attn.wqkv").transpose();
      dx += layer_norm_backward(da, lc.ln1_xhat, lc.ln1_rstd, params_.at(p + "ln1.g"),
                                acc.at(p + "ln1.g"), acc.at(p + "ln1.b"));
    }

    // Embedding backward.
    Dropout::backward(dx, cache.embed_mask);
    const int m = static_cast<int>(item.history.size());
    auto& dwf = acc.at("embed_frame.w");
    auto& dbf = acc.at("embed_frame.b");
    auto& dpos = acc.at("pos");
    for (int t = 0; t < m; ++t) {
      const auto& fr = item.history[t];
      dwf += fr.features * dx.row(3 * t);
      dbf.row(0) += dx.row(3 * t);
      acc.at("embed_reward.w").row(0) += fr.reward * dx.row(3 * t + 1);
      acc.at("embed_reward.b").row(0) += dx.row(3 * t + 1);
      acc.at("embed_q.w").row(0) += fr.target_q * dx.row(3 * t + 2);
      acc.at("embed_q.b").row(0) += dx.row(3 * t + 2);
      dpos.row(t) += dx.row(3 * t) + dx.row(3 * t + 1) + dx.row(3 * t + 2);
    }
    dwf += item.candidate.features * dx.row(s - 1);
    dbf.row(0) += dx.row(s - 1);
    dpos.row(m) += dx.row(s - 1);

    for (const auto& name : grads.names()) grads.at(name) += acc.at(name);
  }

  if (reduction == Reduction::kMean) {
    loss *= item_scale;
    for (const auto& name : grads.names()) grads.at(name) *= item_scale;
  }

  if (!std::isfinite(loss))
    throw TrainingError("backward: non-finite loss over batch of " +
                        std::to_string(batch.size()) + " items");
  return loss;
}

// --- Adam --------------------------------------------------------------------

AdamState::AdamState(const ParameterStore& params)
    : m_(params.zeros_like()), v_(params.zeros_like()) {}

void AdamState::step(ParameterStore& params, const ParameterStore& grads, double lr,
                     double weight_decay, const std::vector<std::string>* skip) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (const auto& name : params.names()) {
    if (skip && std::find(skip->begin(), skip->end(), name) != skip->end()) continue;
    auto& p = params.at(name);
    const auto& g = grads.at(name);
    auto& m = m_.at(name);
    auto& v = v_.at(name);
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    Eigen::MatrixXd mhat = m / bc1;
    Eigen::MatrixXd vhat = v / bc2;
    p -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
    if (weight_decay != 0.0) p -= lr * weight_decay * p;
  }
}

// --- Checkpoint I/O ----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'O', 'B', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  std::uint32_t n = read_u32(in);
  if (n > (1u << 24)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

}  // namespace

void SeqQModel::save_checkpoint(const std::string& path, const std::string& extra_json) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 8);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(cfg_.n_layers));
  write_u32(out, static_cast<std::uint32_t>(cfg_.n_heads));
  write_u32(out, static_cast<std::uint32_t>(cfg_.hidden));
  write_u32(out, static_cast<std::uint32_t>(cfg_.window));
  write_u32(out, static_cast<std::uint32_t>(cfg_.k));
  double dr = cfg_.dropout;
  out.write(reinterpret_cast<const char*>(&dr), 8);
  write_string(out, extra_json);
  write_u32(out, static_cast<std::uint32_t>(params_.names().size()));
  for (const auto& name : params_.names()) {
    const auto& t = params_.at(name);
    write_string(out, name);
    write_u32(out, static_cast<std::uint32_t>(t.rows()));
    write_u32(out, static_cast<std::uint32_t>(t.cols()));
    for (int i = 0; i < t.rows(); ++i)
      for (int j = 0; j < t.cols(); ++j) {
        float f = static_cast<float>(t(i, j));
        out.write(reinterpret_cast<const char*>(&f), 4);
      }
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

SeqQModel SeqQModel::load_checkpoint(const std::string& path, std::string* extra_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a model checkpoint: " + path);
  if (read_u32(in) != kVersion) throw std::runtime_error("unsupported checkpoint version");
  ModelConfig cfg;
  cfg.n_layers = static_cast<int>(read_u32(in));
  cfg.n_heads = static_cast<int>(read_u32(in));
  cfg.hidden = static_cast<int>(read_u32(in));
  cfg.window = static_cast<int>(read_u32(in));
  cfg.k = static_cast<int>(read_u32(in));
  in.read(reinterpret_cast<char*>(&cfg.dropout), 8);
  std::string extra = read_string(in);
  if (extra_json) *extra_json = extra;

  SeqQModel model(cfg);
  std::uint32_t count = read_u32(in);
  if (count != model.params_.names().size())
    throw std::runtime_error("checkpoint tensor count mismatch");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(in);
    if (!model.params_.has(name))
      throw std::runtime_error("checkpoint holds unknown tensor: " + name);
    auto& t = model.params_.at(name);
    int rows = static_cast<int>(read_u32(in));
    int cols = static_cast<int>(read_u32(in));
    if (rows != t.rows() || cols != t.cols())
      throw std::runtime_error("checkpoint shape mismatch for tensor: " + name);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        float f = 0;
        in.read(reinterpret_cast<char*>(&f), 4);
        t(r, c) = static_cast<double>(f);
      }
  }
  if (!in) throw std::runtime_error("checkpoint truncated: " + path);
  return model;
}

}  // namespace mobo
