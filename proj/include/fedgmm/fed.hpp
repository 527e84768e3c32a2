#pragma once

// Deterministic simulation of collaborative pre-training: m clients share a
// backbone mean vector, each keeps a private mixing-weight logit. Clients run
// tau_sync local DDPM gradient steps per round; the server averages the
// uploaded backbone replicas and broadcasts the result. Every stochastic draw
// is keyed by (seed, purpose, client, step), so sequential and parallel
// schedules produce bitwise-identical traces. Embeddings never enter any
// server-side structure; uploads carry the backbone slice only.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedgmm/mat.hpp"
#include "fedgmm/mixture.hpp"
#include "fedgmm/rng.hpp"
#include "fedgmm/score_model.hpp"

namespace fedgmm {

enum class OptimizerKind { sgd, adam };

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  void reset(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    t = 0;
  }
};

/// Per-client true mixing weights: a constant, an explicit list, or iid
/// uniform draws on [lo, hi] keyed by (seed, client id).
struct WeightsSpec {
  enum class Kind { constant, explicit_list, uniform };
  Kind kind = Kind::constant;
  double value = 0.5;
  std::vector<double> list;
  double lo = 0.2;
  double hi = 0.8;

  double weight_for(std::size_t client, std::uint64_t seed) const {
    switch (kind) {
      case Kind::constant:
        return value;
      case Kind::explicit_list:
        if (client >= list.size())
          throw std::invalid_argument("WeightsSpec: list shorter than m");
        return list[client];
      case Kind::uniform: {
        RngStream rng = keyed_stream(seed, StreamKind::client_weights, client);
        return rng.uniform(lo, hi);
      }
    }
    throw std::logic_error("WeightsSpec: unknown kind");
  }

  static WeightsSpec constant(double w) {
    WeightsSpec s;
    s.kind = Kind::constant;
    s.value = w;
    return s;
  }
  static WeightsSpec uniform(double lo, double hi) {
    WeightsSpec s;
    s.kind = Kind::uniform;
    s.lo = lo;
    s.hi = hi;
    return s;
  }
  static WeightsSpec explicit_list(std::vector<double> ws) {
    WeightsSpec s;
    s.kind = Kind::explicit_list;
    s.list = std::move(ws);
    return s;
  }
};

struct FedConfig {
  std::size_t m = 1;
  std::size_t n = 1000;
  std::size_t K = 1000;        // local iterations per client in total
  std::size_t tau_sync = 50;   // local iterations between synchronizations
  std::size_t batch = 32;
  double eta_mu = 1e-2;
  double eta_logit = 1e-2;
  DiffusionSchedule schedule;
  std::uint64_t seed = 0;
  WeightsSpec weights;
  OptimizerKind optimizer = OptimizerKind::sgd;
  AdamParams adam;
  double init_mu_sd = 0.31622776601683794;  // sqrt(0.1)
  int threads = 1;
  // Tail (Polyak) average of the post-aggregation backbone over the last
  // fraction of rounds; 0 disables it.
  double polyak_tail_frac = 0.0;
  // Fraction of clients participating per round. 1 = full participation
  // (the default protocol); below 1, the per-round subset is drawn from a
  // keyed stream and at least one client always participates. The broadcast
  // still reaches every client.
  double participation = 1.0;

  void validate() const {
    if (m < 1) throw std::invalid_argument("FedConfig: m must be >= 1");
    if (batch < 1 || batch > n)
      throw std::invalid_argument("FedConfig: need 1 <= batch <= n");
    if (tau_sync < 1) throw std::invalid_argument("FedConfig: tau_sync >= 1");
    if (K % tau_sync != 0)
      throw std::invalid_argument("FedConfig: tau_sync must divide K");
    if (!(eta_mu > 0.0) || !(eta_logit > 0.0))
      throw std::invalid_argument("FedConfig: learning rates must be > 0");
    if (!(polyak_tail_frac >= 0.0 && polyak_tail_frac <= 1.0))
      throw std::invalid_argument("FedConfig: polyak_tail_frac in [0, 1]");
    if (!(participation > 0.0 && participation <= 1.0))
      throw std::invalid_argument("FedConfig: participation in (0, 1]");
    schedule.validate();
  }
};

struct ClientState {
  std::size_t client_id = 0;
  Matrix data;  // immutable for the run
  ScoreParams params;
  double true_w = 0.5;  // diagnostics only; never used by training
  std::size_t steps_done = 0;
  std::vector<std::uint32_t> perm;
  std::size_t cursor = 0;
  AdamState adam_mu;
  AdamState adam_logit;
};

/// One synchronization round of metrics. mean_error and weight_mse are
/// flip-adjusted: the mixture is identifiable only up to
/// (mu, w) <-> (-mu, 1-w), so errors are reported for the better-matching
/// orientation. train_loss is NaN on the initialization row.
struct RunRecord {
  std::size_t round = 0;
  double mean_error = 0.0;
  double weight_mse = 0.0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double score_error = std::numeric_limits<double>::quiet_NaN();
};

/// +1 if backbone matches +mu better, -1 for the flipped orientation.
inline int flip_sign(std::span<const double> backbone,
                     std::span<const double> mu_true) {
  double plus = 0.0, minus = 0.0;
  for (std::size_t j = 0; j < backbone.size(); ++j) {
    const double dp = backbone[j] - mu_true[j];
    const double dm = backbone[j] + mu_true[j];
    plus += dp * dp;
    minus += dm * dm;
  }
  return plus <= minus ? 1 : -1;
}

inline double flip_adjusted_mean_error(std::span<const double> backbone,
                                       std::span<const double> mu_true) {
  const int s = flip_sign(backbone, mu_true);
  double err = 0.0;
  for (std::size_t j = 0; j < backbone.size(); ++j) {
    const double d = s * backbone[j] - mu_true[j];
    err += d * d;
  }
  return std::sqrt(err);
}

/// Unweighted coordinatewise mean of the replicas, summed in ascending
/// client order. Identical replicas are returned verbatim so the mean of m
/// equal vectors is bitwise that vector for any m.
inline std::vector<double> aggregate(
    std::span<const std::vector<double>> replicas) {
  if (replicas.empty()) throw std::invalid_argument("aggregate: no replicas");
  const std::size_t d = replicas.front().size();
  bool all_equal = true;
  for (const auto& r : replicas) {
    if (r.size() != d)
      throw std::invalid_argument("aggregate: replica dimension mismatch");
    if (all_equal && r != replicas.front()) all_equal = false;
  }
  if (all_equal) return replicas.front();
  std::vector<double> out(d, 0.0);
  for (const auto& r : replicas)
    for (std::size_t j = 0; j < d; ++j) out[j] += r[j];
  const double inv_m = 1.0 / static_cast<double>(replicas.size());
  for (double& v : out) v *= inv_m;
  return out;
}

struct StepOptions {
  DiffusionSchedule schedule;
  double eta_mu = 1e-2;
  double eta_logit = 1e-2;
  std::size_t batch = 32;
  OptimizerKind optimizer = OptimizerKind::sgd;
  AdamParams adam;
  bool train_mu = true;
  bool train_logit = true;
};

namespace detail {

inline void adam_update(std::span<double> theta, std::span<const double> grad,
                        AdamState& state, double eta, const AdamParams& p) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(state.t));
  for (std::size_t j = 0; j < theta.size(); ++j) {
    state.m[j] = p.beta1 * state.m[j] + (1.0 - p.beta1) * grad[j];
    state.v[j] = p.beta2 * state.v[j] + (1.0 - p.beta2) * grad[j] * grad[j];
    const double mhat = state.m[j] / bc1;
    const double vhat = state.v[j] / bc2;
    theta[j] -= eta * mhat / (std::sqrt(vhat) + p.eps);
  }
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) {
  return n / batch;  // batch <= n enforced upstream; leftover rows wait a round
}

}  // namespace detail

/// Reset a client's epoch permutation and cursor to what they must be at
/// steps_done, re-deriving the current epoch's shuffle from its key. Used at
/// init and when restoring a checkpoint.
inline void restore_shuffle_state(ClientState& client, std::size_t batch,
                                  std::uint64_t seed) {
  const std::size_t n = client.data.rows;
  const std::size_t spe = detail::steps_per_epoch(n, batch);
  const std::size_t epoch = client.steps_done / spe;
  const std::size_t step_in_epoch = client.steps_done % spe;
  client.perm.resize(n);
  std::iota(client.perm.begin(), client.perm.end(), 0);
  RngStream rng =
      keyed_stream(seed, StreamKind::epoch_shuffle, client.client_id, epoch);
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = rng.uniform_below(i + 1);
    std::swap(client.perm[i], client.perm[j]);
  }
  client.cursor = step_in_epoch * batch;
}

/// One gradient step on the client's local DDPM loss: draw the next
/// without-replacement minibatch, fresh timesteps and noise, and update both
/// parameters (or the enabled subset). Returns the minibatch loss.
/// `shuffle_rng` is consumed only at epoch boundaries.
inline double local_step(ClientState& client, const StepOptions& opt,
                         RngStream noise_rng, RngStream shuffle_rng) {
  const std::size_t n = client.data.rows;
  const std::size_t d = client.data.cols;
  if (opt.batch < 1 || opt.batch > n)
    throw std::invalid_argument("local_step: need 1 <= batch <= n");
  const std::size_t spe = detail::steps_per_epoch(n, opt.batch);
  if (client.steps_done % spe == 0) {
    client.perm.resize(n);
    std::iota(client.perm.begin(), client.perm.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) {
      const std::size_t j = shuffle_rng.uniform_below(i + 1);
      std::swap(client.perm[i], client.perm[j]);
    }
    client.cursor = 0;
  }

  Matrix x0(opt.batch, d);
  for (std::size_t i = 0; i < opt.batch; ++i) {
    const auto src = client.data.row(client.perm[client.cursor + i]);
    auto dst = x0.row(i);
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
  }
  client.cursor += opt.batch;

  const Minibatch batch = make_minibatch(x0, opt.schedule, noise_rng);
  const LossGrads g = ddpm_loss_and_grads(client.params, batch);

  if (opt.optimizer == OptimizerKind::sgd) {
    if (opt.train_mu)
      for (std::size_t j = 0; j < d; ++j)
        client.params.mu_hat[j] -= opt.eta_mu * g.d_mu[j];
    if (opt.train_logit)
      client.params.logit_hat =
          clamp_logit(client.params.logit_hat - opt.eta_logit * g.d_logit);
  } else {
    if (opt.train_mu) {
      if (client.adam_mu.m.size() != d) client.adam_mu.reset(d);
      detail::adam_update(client.params.mu_hat, g.d_mu, client.adam_mu,
                          opt.eta_mu, opt.adam);
    }
    if (opt.train_logit) {
      if (client.adam_logit.m.size() != 1) client.adam_logit.reset(1);
      double b = client.params.logit_hat;
      const double db = g.d_logit;
      detail::adam_update(std::span<double>(&b, 1),
                          std::span<const double>(&db, 1), client.adam_logit,
                          opt.eta_logit, opt.adam);
      client.params.logit_hat = clamp_logit(b);
    }
  }
  ++client.steps_done;
  return g.loss;
}

struct Population {
  std::vector<double> backbone;
  std::vector<ClientState> clients;
};

/// Fresh population: per-client data from (mu, w_j), backbone ~ N(0, sd^2 I),
/// all embeddings at logit 0 (w = 1/2).
inline Population init_population(const FedConfig& cfg,
                                  const std::vector<double>& mu_true) {
  cfg.validate();
  if (mu_true.empty())
    throw std::invalid_argument("init_population: mu_true must be non-empty");
  Population pop;
  RngStream init_rng = keyed_stream(cfg.seed, StreamKind::backbone_init);
  pop.backbone.resize(mu_true.size());
  for (double& v : pop.backbone) v = cfg.init_mu_sd * init_rng.normal();

  pop.clients.resize(cfg.m);
  for (std::size_t j = 0; j < cfg.m; ++j) {
    ClientState& c = pop.clients[j];
    c.client_id = j;
    c.true_w = cfg.weights.weight_for(j, cfg.seed);
    MixtureParams truth{mu_true, c.true_w};
    RngStream data_rng = keyed_stream(cfg.seed, StreamKind::client_data, j);
    c.data = sample_data(truth, cfg.n, data_rng).x;
    c.params.mu_hat = pop.backbone;
    c.params.logit_hat = 0.0;
    restore_shuffle_state(c, cfg.batch, cfg.seed);
  }
  return pop;
}

struct RunResult {
  std::vector<double> backbone;
  std::vector<double> backbone_tail_avg;
  std::vector<ClientState> clients;
  std::vector<RunRecord> records;
  // Per record, per client: trained weight sigma(2 logit). Diagnostics only.
  std::vector<std::vector<double>> weight_trace;
};

using ServerTap =
    std::function<void(std::size_t round, std::span<const double> upload)>;
using ScoreErrorHook = std::function<double(
    std::span<const double> backbone, const std::vector<ClientState>& clients)>;

/// Runs Algorithm-style pre-training round by round. Holds all state;
/// checkpointable between rounds.
class FedEngine {
 public:
  FedEngine(FedConfig cfg, std::vector<double> mu_true)
      : cfg_(std::move(cfg)), mu_true_(std::move(mu_true)) {
    pop_ = init_population(cfg_, mu_true_);
    rounds_total_ = cfg_.K / cfg_.tau_sync;
    record_metrics(0, std::numeric_limits<double>::quiet_NaN());
  }

  const FedConfig& config() const { return cfg_; }
  const std::vector<double>& mu_true() const { return mu_true_; }
  std::vector<double>& backbone() { return pop_.backbone; }
  std::vector<ClientState>& clients() { return pop_.clients; }
  std::size_t rounds_done() const { return rounds_done_; }
  std::size_t rounds_total() const { return rounds_total_; }
  const std::vector<RunRecord>& records() const { return records_; }

  void set_server_tap(ServerTap tap) { tap_ = std::move(tap); }
  void set_score_error_hook(ScoreErrorHook hook) { hook_ = std::move(hook); }

  void run_rounds(std::size_t count) {
    for (std::size_t i = 0; i < count && rounds_done_ < rounds_total_; ++i)
      do_round();
  }

  void run() { run_rounds(rounds_total_ - rounds_done_); }

  RunResult result() const {
    RunResult res;
    res.backbone = pop_.backbone;
    res.backbone_tail_avg = tail_count_ > 0 ? tail_avg() : pop_.backbone;
    res.clients = pop_.clients;
    res.records = records_;
    res.weight_trace = weight_trace_;
    return res;
  }

  // -- checkpoint support (mutable state only; data re-derives from keys) --

  struct Snapshot {
    std::size_t rounds_done = 0;
    std::vector<double> backbone;
    std::vector<double> tail_sum;
    std::size_t tail_count = 0;
    struct Client {
      double logit = 0.0;
      std::vector<double> mu_hat;
      std::size_t steps_done = 0;
      AdamState adam_mu;
      AdamState adam_logit;
    };
    std::vector<Client> clients;
  };

  Snapshot snapshot() const {
    Snapshot s;
    s.rounds_done = rounds_done_;
    s.backbone = pop_.backbone;
    s.tail_sum = tail_sum_;
    s.tail_count = tail_count_;
    s.clients.resize(pop_.clients.size());
    for (std::size_t j = 0; j < pop_.clients.size(); ++j) {
      const ClientState& c = pop_.clients[j];
      Snapshot::Client& sc = s.clients[j];
      sc.logit = c.params.logit_hat;
      sc.mu_hat = c.params.mu_hat;
      sc.steps_done = c.steps_done;
      sc.adam_mu = c.adam_mu;
      sc.adam_logit = c.adam_logit;
    }
    return s;
  }

  void restore(const Snapshot& s) {
    if (s.clients.size() != pop_.clients.size())
      throw std::invalid_argument("FedEngine::restore: client count mismatch");
    rounds_done_ = s.rounds_done;
    pop_.backbone = s.backbone;
    tail_sum_ = s.tail_sum;
    tail_count_ = s.tail_count;
    for (std::size_t j = 0; j < pop_.clients.size(); ++j) {
      ClientState& c = pop_.clients[j];
      const Snapshot::Client& sc = s.clients[j];
      c.params.logit_hat = sc.logit;
      c.params.mu_hat = sc.mu_hat;
      c.steps_done = sc.steps_done;
      c.adam_mu = sc.adam_mu;
      c.adam_logit = sc.adam_logit;
      restore_shuffle_state(c, cfg_.batch, cfg_.seed);
    }
    records_.clear();
    weight_trace_.clear();
    // the resumed trace starts with the restore-point state, mirroring the
    // initialization row of a fresh run
    record_metrics(rounds_done_, std::numeric_limits<double>::quiet_NaN());
  }

 private:
  StepOptions step_options() const {
    StepOptions opt;
    opt.schedule = cfg_.schedule;
    opt.eta_mu = cfg_.eta_mu;
    opt.eta_logit = cfg_.eta_logit;
    opt.batch = cfg_.batch;
    opt.optimizer = cfg_.optimizer;
    opt.adam = cfg_.adam;
    return opt;
  }

  void do_round() {
    const std::size_t round = rounds_done_;
    const StepOptions opt = step_options();

    std::vector<std::size_t> participants;
    if (cfg_.participation >= 1.0) {
      participants.resize(pop_.clients.size());
      std::iota(participants.begin(), participants.end(), 0);
    } else {
      RngStream sel = keyed_stream(cfg_.seed, StreamKind::participation, round);
      for (std::size_t j = 0; j < pop_.clients.size(); ++j)
        if (sel.uniform() < cfg_.participation) participants.push_back(j);
      if (participants.empty())
        participants.push_back(round % pop_.clients.size());
    }

    std::vector<double> last_loss(participants.size(), 0.0);
    auto run_client = [&](std::size_t idx) {
      ClientState& c = pop_.clients[participants[idx]];
      const std::size_t j = c.client_id;
      double loss = 0.0;
      for (std::size_t s = 0; s < cfg_.tau_sync; ++s) {
        const std::size_t k = c.steps_done;
        const std::size_t spe = detail::steps_per_epoch(cfg_.n, cfg_.batch);
        RngStream noise = keyed_stream(cfg_.seed, StreamKind::local_step, j, k);
        RngStream shuffle =
            keyed_stream(cfg_.seed, StreamKind::epoch_shuffle, j, k / spe);
        loss = local_step(c, opt, noise, shuffle);
      }
      last_loss[idx] = loss;
    };

    if (cfg_.threads <= 1 || participants.size() == 1) {
      for (std::size_t idx = 0; idx < participants.size(); ++idx) run_client(idx);
    } else {
      const std::size_t nt = static_cast<std::size_t>(cfg_.threads);
      std::vector<std::thread> pool;
      const std::size_t count = participants.size();
      for (std::size_t kth = 0; kth < nt; ++kth) {
        const std::size_t lo = count * kth / nt;
        const std::size_t hi = count * (kth + 1) / nt;
        if (lo < hi)
          pool.emplace_back([&, lo, hi] {
            for (std::size_t idx = lo; idx < hi; ++idx) run_client(idx);
          });
      }
      for (auto& th : pool) th.join();
    }

    // upload backbone slices only, in ascending client order
    std::vector<std::vector<double>> replicas(participants.size());
    for (std::size_t idx = 0; idx < participants.size(); ++idx) {
      replicas[idx] = pop_.clients[participants[idx]].params.mu_hat;
      if (tap_) tap_(round, replicas[idx]);
    }
    pop_.backbone = aggregate(replicas);
    if (!all_finite(pop_.backbone))
      throw std::runtime_error("pretraining diverged: non-finite backbone at round " +
                               std::to_string(round + 1));
    for (ClientState& c : pop_.clients) c.params.mu_hat = pop_.backbone;

    const std::size_t tail_start = rounds_total_ -
        static_cast<std::size_t>(cfg_.polyak_tail_frac * static_cast<double>(rounds_total_));
    if (cfg_.polyak_tail_frac > 0.0 && round + 1 > tail_start) {
      if (tail_sum_.empty()) tail_sum_.assign(pop_.backbone.size(), 0.0);
      for (std::size_t jj = 0; jj < pop_.backbone.size(); ++jj)
        tail_sum_[jj] += pop_.backbone[jj];
      ++tail_count_;
    }

    double loss_sum = 0.0;
    for (double v : last_loss) loss_sum += v;
    ++rounds_done_;
    record_metrics(rounds_done_, loss_sum / static_cast<double>(last_loss.size()));
    for (const ClientState& c : pop_.clients)
      if (!std::isfinite(c.params.logit_hat))
        throw std::runtime_error("pretraining diverged: non-finite logit at round " +
                                 std::to_string(round + 1));
  }

  void record_metrics(std::size_t round, double train_loss) {
    RunRecord rec;
    rec.round = round;
    rec.train_loss = train_loss;
    const int s = flip_sign(pop_.backbone, mu_true_);
    rec.mean_error = flip_adjusted_mean_error(pop_.backbone, mu_true_);
    double mse = 0.0;
    std::vector<double> weights(pop_.clients.size());
    for (std::size_t j = 0; j < pop_.clients.size(); ++j) {
      const double w = pop_.clients[j].params.weight();
      weights[j] = w;
      const double adj = s == 1 ? w : 1.0 - w;
      const double e = adj - pop_.clients[j].true_w;
      mse += e * e;
    }
    rec.weight_mse = mse / static_cast<double>(pop_.clients.size());
    if (hook_) rec.score_error = hook_(pop_.backbone, pop_.clients);
    records_.push_back(rec);
    weight_trace_.push_back(std::move(weights));
  }

  std::vector<double> tail_avg() const {
    std::vector<double> avg(tail_sum_);
    for (double& v : avg) v /= static_cast<double>(tail_count_);
    return avg;
  }

  FedConfig cfg_;
  std::vector<double> mu_true_;
  Population pop_;
  std::vector<RunRecord> records_;
  std::vector<std::vector<double>> weight_trace_;
  std::vector<double> tail_sum_;
  std::size_t tail_count_ = 0;
  std::size_t rounds_done_ = 0;
  std::size_t rounds_total_ = 0;
  ServerTap tap_;
  ScoreErrorHook hook_;
};

/// End-to-end pre-training: K iterations with synchronization every
/// tau_sync, returning the final backbone, final embeddings, and the full
/// metric trace.
inline RunResult run_pretraining(const FedConfig& cfg,
                                 const std::vector<double>& mu_true) {
  FedEngine engine(cfg, mu_true);
  engine.run();
  return engine.result();
}

}  // namespace fedgmm
