#pragma once

// New-client adaptation: download the backbone once, freeze it, and train
// only the scalar embedding logit on local data. No communication happens
// after the download, and the backbone cannot drift by construction; the
// sweep quantifies robustness to epoch and learning-rate choices.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedgmm/fed.hpp"
#include "fedgmm/mat.hpp"
#include "fedgmm/mixture.hpp"
#include "fedgmm/rng.hpp"
#include "fedgmm/score_model.hpp"

namespace fedgmm {

struct FinetuneConfig {
  std::size_t K_ft = 500;
  double eta_ft = 5e-2;
  std::size_t batch = 0;  // 0 means full batch
  DiffusionSchedule schedule;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  AdamParams adam;

  void validate() const {
    if (!(eta_ft >= 0.0))
      throw std::invalid_argument("FinetuneConfig: eta_ft must be >= 0");
    schedule.validate();
  }
};

struct FinetuneResult {
  std::vector<double> logit_trajectory;  // K_ft + 1 entries, starts at 0
  std::vector<double> loss_trajectory;   // K_ft entries
  double final_logit = 0.0;
  double final_w = 0.5;
};

/// Train only the embedding for K_ft steps against a frozen backbone.
/// The logit starts at 0 (w = 1/2); trajectories are fully returned.
inline FinetuneResult finetune_new_client(std::span<const double> backbone,
                                          const Matrix& data,
                                          const FinetuneConfig& cfg) {
  cfg.validate();
  if (backbone.size() != data.cols)
    throw std::invalid_argument("finetune_new_client: dimension mismatch");
  const std::size_t batch = cfg.batch == 0 ? data.rows : cfg.batch;

  ClientState client;
  client.client_id = 0;
  client.data = data;
  client.params.mu_hat.assign(backbone.begin(), backbone.end());
  client.params.logit_hat = 0.0;
  restore_shuffle_state(client, batch, cfg.seed);

  StepOptions opt;
  opt.schedule = cfg.schedule;
  opt.eta_mu = 1.0;  // unused: the backbone path is disabled below
  opt.eta_logit = cfg.eta_ft;
  opt.batch = batch;
  opt.optimizer = cfg.optimizer;
  opt.adam = cfg.adam;
  opt.train_mu = false;
  opt.train_logit = true;

  const std::size_t spe = data.rows / batch;
  FinetuneResult res;
  res.logit_trajectory.reserve(cfg.K_ft + 1);
  res.logit_trajectory.push_back(0.0);
  res.loss_trajectory.reserve(cfg.K_ft);
  for (std::size_t k = 0; k < cfg.K_ft; ++k) {
    RngStream noise = keyed_stream(cfg.seed, StreamKind::finetune_step, k);
    RngStream shuffle =
        keyed_stream(cfg.seed, StreamKind::finetune_shuffle, k / spe);
    const double loss = local_step(client, opt, noise, shuffle);
    res.loss_trajectory.push_back(loss);
    res.logit_trajectory.push_back(client.params.logit_hat);
  }
  res.final_logit = client.params.logit_hat;
  res.final_w = client.params.weight();

  for (std::size_t j = 0; j < backbone.size(); ++j)
    if (client.params.mu_hat[j] != backbone[j])
      throw std::logic_error("finetune_new_client: backbone changed");
  return res;
}

struct SweepRow {
  std::size_t epochs = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  double weight_error = 0.0;   // |w_hat - w_new|
  double backbone_drift = 0.0; // always 0 for a frozen backbone
};

/// One fine-tune run per (epochs, lr) cell on shared data. Runs use full
/// batch, so one epoch is one step; within a seed, per-step draws are keyed
/// by step index alone and cells replay a common trajectory prefix.
inline std::vector<SweepRow> robustness_sweep(
    std::span<const double> backbone, const Matrix& data, double w_new,
    std::span<const std::size_t> epoch_grid, std::span<const double> lr_grid,
    std::span<const std::uint64_t> seeds, const DiffusionSchedule& schedule) {
  if (epoch_grid.empty() || lr_grid.empty())
    throw std::invalid_argument("robustness_sweep: grids must be non-empty");
  std::vector<SweepRow> rows;
  rows.reserve(epoch_grid.size() * lr_grid.size() * seeds.size());
  std::vector<double> backbone_before(backbone.begin(), backbone.end());
  for (const std::uint64_t seed : seeds) {
    for (const std::size_t epochs : epoch_grid) {
      for (const double lr : lr_grid) {
        FinetuneConfig cfg;
        cfg.K_ft = epochs;
        cfg.eta_ft = lr;
        cfg.batch = 0;
        cfg.schedule = schedule;
        cfg.seed = seed;
        const FinetuneResult res = finetune_new_client(backbone, data, cfg);
        SweepRow row;
        row.epochs = epochs;
        row.lr = lr;
        row.seed = seed;
        row.weight_error = std::abs(res.final_w - w_new);
        double drift = 0.0;
        for (std::size_t j = 0; j < backbone.size(); ++j) {
          const double d = backbone[j] - backbone_before[j];
          drift += d * d;
        }
        row.backbone_drift = std::sqrt(drift);
        rows.push_back(row);
      }
    }
  }
  return rows;
}

}  // namespace fedgmm
