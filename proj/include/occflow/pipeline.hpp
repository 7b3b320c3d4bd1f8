#pragma once

#include <optional>
#include <string>
#include <vector>

#include "occflow/cfm.hpp"
#include "occflow/checkpoint.hpp"
#include "occflow/config.hpp"
#include "occflow/likelihood.hpp"
#include "occflow/metrics.hpp"
#include "occflow/occupancy.hpp"
#include "occflow/optim.hpp"
#include "occflow/vae.hpp"

namespace occflow {

// Resolved experiment settings. Every field has a desk-scale default and a
// dotted config key; the raw Config is kept for hashing and report
// provenance.
struct ExperimentConfig {
  Config raw;

  // data
  std::string source_domain = "outdoor";
  std::string target_domain = "semantic";
  int64_t n_source_clips = 48;
  int64_t n_target_clips = 40;
  int64_t n_val_clips = 12;
  int64_t frames_per_clip = 8;
  uint64_t data_seed = 1234;
  uint64_t split_seed = 77;

  // models
  VaeConfig vae;
  std::vector<int64_t> cfm_hidden = {256};
  int64_t traj_emb_dim = 8;
  int64_t time_dim = 16;
  FlowConfig flow;
  OdeConfig ode;
  ProbeConfig probes;
  VaeTrainConfig vae_train;
  int64_t lora_rank = 8;
  double lora_alpha = 8.0;

  // optimization
  AdamWConfig adam_vae;
  AdamWConfig adam_cfm;
  double peak_lr_vae = 2e-3;
  double peak_lr_cfm = 1e-3;
  double warmup_frac = 0.05;
  double ema_decay = 0.99;

  // step budgets (equal across fine-tuning strategies by construction)
  int64_t vae_pretrain_steps = 1500;
  int64_t cfm_pretrain_steps = 1500;
  int64_t vae_align_steps = 800;
  int64_t vae_finetune_steps = 400;
  int64_t cfm_finetune_steps = 600;
  int64_t vae_batch = 8;
  int64_t cfm_batch = 8;

  // study grid
  std::vector<std::string> study_domains = {"high_res", "indoor", "semantic"};
  std::vector<std::string> strategies = {"full", "lora", "cfm_only", "scratch"};
  std::vector<double> fractions = {0.10, 0.25, 0.50, 1.00};
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};

  bool eval_nll = false;
  int64_t eval_nll_probes = 16;
  uint64_t seed = 1;

  static ExperimentConfig from_config(Config c);
  std::string hash() const { return raw.canonical_hash(); }
};

struct ReportRow {
  std::string metric;
  int64_t horizon = 0;
  std::string region = "global";
  double value = 0.0;
  uint64_t seed = 0;
};

struct Report {
  std::vector<ReportRow> rows;
  nlohmann::json provenance;

  std::string to_csv(const std::string& config_hash) const;
  void write(const std::string& out_dir, const std::string& config_hash) const;
  double value_of(const std::string& metric, int64_t horizon) const;
};

// Synthetic dataset handles. Semantic targets are paired 1:1 with geometry
// clips generated from the same seeds.
struct ClipSet {
  std::vector<SequenceClip> clips;
  std::vector<SequenceClip> paired_geometry;  // semantic domain only
};

ClipSet make_clips(const std::string& domain, int64_t n, int64_t frames, uint64_t seed_base);

// Trained module bundles; optimizer moments ride along so checkpoints can
// carry the full training state.
struct TrainedVae {
  VaeModel model;
  VaeModel ema_model;
  std::vector<Tensor> opt_m, opt_v;
  int64_t opt_step = 0;
  int64_t steps = 0;
};

struct TrainedCfm {
  VelocityModel model;
  VelocityModel ema_model;
  std::vector<Tensor> opt_m, opt_v;
  int64_t opt_step = 0;
  int64_t steps = 0;
};

TrainedVae train_vae(VaeModel init, const std::vector<const OccupancyGrid*>& frames,
                     const std::vector<Tensor>* align_targets, const VaeTrainConfig& tc,
                     int64_t steps, double peak_lr, double warmup_frac, AdamWConfig adam,
                     double ema_decay, int64_t batch, Rng& rng);

// Per-frame latents (VAE mu) plus trajectories, flattened for the flow.
struct LatentDataset {
  std::vector<std::vector<Tensor>> latents;  // [clip][frame], flattened (h*w*c)
  std::vector<std::vector<std::array<double, 3>>> trajs;
  int64_t latent_dim = 0;
};

LatentDataset encode_clips(const VaeModel& vae, const std::vector<SequenceClip>& clips);
std::vector<CfmSample> make_cfm_samples(const LatentDataset& data, const FlowConfig& flow);

TrainedCfm train_cfm(VelocityModel init, const std::vector<CfmSample>& samples,
                     const FlowConfig& flow, int64_t steps, double peak_lr, double warmup_frac,
                     AdamWConfig adam, double ema_decay, int64_t batch, bool lora_only, Rng& rng);

// Checkpoint assembly/restore. Checkpoints bundle one VAE and one CFM with
// their EMA shadows plus enough manifest metadata to rebuild both.
Checkpoint build_checkpoint(const ExperimentConfig& cfg, const TrainedVae& vae,
                            const TrainedCfm& cfm, const std::string& stage, uint64_t seed);
struct RestoredState {
  VaeModel vae;
  VaeModel vae_ema;
  VelocityModel cfm;
  VelocityModel cfm_ema;
};
RestoredState restore_checkpoint(const Checkpoint& ckpt);

// Pipeline commands (the CLI wraps these 1:1).
Checkpoint cmd_pretrain(const ExperimentConfig& cfg);
Checkpoint cmd_align_vae(const Checkpoint& pretrained, const ExperimentConfig& cfg,
                         double fraction, uint64_t seed);
Checkpoint cmd_finetune(const Checkpoint& pretrained, const ExperimentConfig& cfg,
                        const std::string& strategy, double fraction, uint64_t seed);

struct ForecastResult {
  SequenceClip forecast;          // decoded future frames
  std::vector<Tensor> latents;    // per future frame, VAE scale
};
ForecastResult cmd_sample(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                          const SequenceClip& clip, int64_t nfe, double cfg_scale, uint64_t seed);

struct NllRow {
  int64_t clip = 0;
  uint64_t seed = 0;
  double logp = 0.0;
  double bpd = 0.0;
  int64_t probes = 0;
  double step = 0.0;
};
std::vector<NllRow> cmd_nll(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                            const std::vector<SequenceClip>& clips, int64_t n_probes,
                            const std::vector<uint64_t>& seeds);
std::string nll_rows_to_csv(const std::vector<NllRow>& rows, const std::string& config_hash);

Report cmd_evaluate(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                    const std::vector<SequenceClip>& val_clips, uint64_t seed);

// Metric assembly behind cmd_evaluate, parameterized over the forecaster so
// reference predictors (e.g. a ground-truth copier) can be scored too.
using ForecastFn = std::function<ForecastResult(const SequenceClip&, uint64_t)>;
Report evaluate_forecasts(const ExperimentConfig& cfg, const VaeModel& feature_vae,
                          const std::vector<SequenceClip>& val_clips, const ForecastFn& forecast,
                          uint64_t seed);

struct StudyCell {
  std::string domain;
  std::string strategy;
  double fraction = 0.0;
  uint64_t seed = 0;
  std::vector<double> iou_per_horizon;
  std::vector<double> miou_per_horizon;
};

struct StudyResult {
  std::vector<StudyCell> cells;
  // wins[domain][fraction][horizon] = count of seeds where the strategy beat
  // scratch on held-out mIoU
  nlohmann::json win_matrix;
  std::string to_csv(const std::string& config_hash) const;
};

StudyResult cmd_transfer_study(const ExperimentConfig& cfg);

// Validation clips for a domain (seeds disjoint from the train pool).
std::vector<SequenceClip> make_val_clips(const ExperimentConfig& cfg, const std::string& domain);

}  // namespace occflow
