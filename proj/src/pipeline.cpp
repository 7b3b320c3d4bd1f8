#include "occflow/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace occflow {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Activation act_from_cfg(const Config& c, const std::string& key) {
  return activation_from_string(c.get_str(key, "silu"));
}

}  // namespace

ExperimentConfig ExperimentConfig::from_config(Config c) {
  c.apply_env_overrides();
  ExperimentConfig e;
  e.raw = c;

  e.source_domain = c.get_str("data.source_domain", e.source_domain);
  e.target_domain = c.get_str("data.target_domain", e.target_domain);
  e.n_source_clips = c.get_int("data.source_clips", e.n_source_clips);
  e.n_target_clips = c.get_int("data.target_clips", e.n_target_clips);
  e.n_val_clips = c.get_int("data.val_clips", e.n_val_clips);
  e.frames_per_clip = c.get_int("data.frames_per_clip", e.frames_per_clip);
  e.data_seed = static_cast<uint64_t>(c.get_int("data.seed", static_cast<int64_t>(e.data_seed)));
  e.split_seed = static_cast<uint64_t>(c.get_int("data.split_seed", static_cast<int64_t>(e.split_seed)));

  e.vae.latent_channels = c.get_int("vae.latent_channels", 8);
  e.vae.downsample = c.get_int("vae.downsample", 4);
  e.vae.sub_x = c.get_int("vae.sub_x", 4);
  e.vae.sub_y = c.get_int("vae.sub_y", 4);
  e.vae.sub_z = c.get_int("vae.sub_z", 8);
  e.vae.enc_hidden = c.get_int_list("vae.enc_hidden", {96});
  e.vae.dec_hidden = c.get_int_list("vae.dec_hidden", {96});
  e.vae.activation = act_from_cfg(c, "vae.activation");

  e.vae_train.beta = c.get_double("vae.beta", 1e-4);
  e.vae_train.lambda = c.get_double("vae.lambda", 1.0);
  e.vae_train.kappa = c.get_double("vae.kappa", 1.0);

  e.cfm_hidden = c.get_int_list("cfm.hidden", {256});
  e.traj_emb_dim = c.get_int("cfm.traj_emb_dim", e.traj_emb_dim);
  e.time_dim = c.get_int("cfm.time_dim", e.time_dim);
  e.flow.sigma_scale = c.get_double("cfm.latent_scale", 10.0);
  e.flow.cfg_drop_prob = c.get_double("cfm.cfg_drop", 0.25);
  e.flow.cfg_scale = c.get_double("cfm.cfg_scale", 2.0);
  e.flow.nfe = c.get_int("cfm.nfe", 10);
  e.flow.history_len = c.get_int("cfm.history_len", 3);
  e.flow.horizon_len = c.get_int("cfm.horizon_len", 3);
  e.lora_rank = c.get_int("cfm.lora_rank", e.lora_rank);
  e.lora_alpha = c.get_double("cfm.lora_alpha", static_cast<double>(e.lora_rank));

  e.ode.step = c.get_double("nll.step", 0.02);
  e.ode.rtol = c.get_double("nll.rtol", 1e-5);
  e.ode.atol = c.get_double("nll.atol", 1e-5);
  e.probes.n_probes = c.get_int("nll.probes", 64);

  e.adam_vae.beta1 = c.get_double("opt.vae_beta1", 0.99);
  e.adam_vae.beta2 = c.get_double("opt.vae_beta2", 0.999);
  e.adam_vae.weight_decay = c.get_double("opt.weight_decay", 1e-3);
  e.adam_cfm.beta1 = c.get_double("opt.cfm_beta1", 0.9);
  e.adam_cfm.beta2 = c.get_double("opt.cfm_beta2", 0.99);
  e.adam_cfm.weight_decay = e.adam_vae.weight_decay;
  e.peak_lr_vae = c.get_double("opt.vae_lr", e.peak_lr_vae);
  e.peak_lr_cfm = c.get_double("opt.cfm_lr", e.peak_lr_cfm);
  e.warmup_frac = c.get_double("opt.warmup_frac", e.warmup_frac);
  e.ema_decay = c.get_double("opt.ema_decay", e.ema_decay);

  e.vae_pretrain_steps = c.get_int("steps.vae_pretrain", e.vae_pretrain_steps);
  e.cfm_pretrain_steps = c.get_int("steps.cfm_pretrain", e.cfm_pretrain_steps);
  e.vae_align_steps = c.get_int("steps.vae_align", e.vae_align_steps);
  e.vae_finetune_steps = c.get_int("steps.vae_finetune", e.vae_finetune_steps);
  e.cfm_finetune_steps = c.get_int("steps.cfm_finetune", e.cfm_finetune_steps);
  e.vae_batch = c.get_int("steps.vae_batch", e.vae_batch);
  e.cfm_batch = c.get_int("steps.cfm_batch", e.cfm_batch);

  e.study_domains = c.get_str_list("study.domains", e.study_domains);
  e.strategies = c.get_str_list("study.strategies", e.strategies);
  e.fractions = c.get_double_list("study.fractions", e.fractions);
  std::vector<int64_t> seed_list = c.get_int_list("study.seeds", {1, 2, 3, 4, 5});
  e.seeds.clear();
  for (int64_t s : seed_list) e.seeds.push_back(static_cast<uint64_t>(s));

  e.eval_nll = c.get_bool("eval.nll", e.eval_nll);
  e.eval_nll_probes = c.get_int("eval.nll_probes", e.eval_nll_probes);
  e.seed = static_cast<uint64_t>(c.get_int("seed", static_cast<int64_t>(e.seed)));
  return e;
}

namespace {

int64_t cfg_grid_h(const ExperimentConfig& e) { return e.raw.get_int("data.grid_h", 16); }
int64_t cfg_grid_w(const ExperimentConfig& e) { return e.raw.get_int("data.grid_w", 16); }
int64_t cfg_grid_d(const ExperimentConfig& e) { return e.raw.get_int("data.grid_d", 8); }

SceneParams scene_params_for(const ExperimentConfig& e, const std::string& domain) {
  Domain d = domain_from_string(domain);
  SceneParams p = SceneParams::for_domain(d);
  int64_t ratio = (d == Domain::HighRes) ? 2 : 1;
  p.H = cfg_grid_h(e) * ratio;
  p.W = cfg_grid_w(e) * ratio;
  p.D = cfg_grid_d(e) * ratio;
  return p;
}

// Clip seeds: train pool at seed_base + i, validation far away.
constexpr uint64_t kValSeedOffset = 1000000;

VaeConfig vae_config_for(const ExperimentConfig& e, const std::string& domain) {
  Domain d = domain_from_string(domain);
  VaeConfig cfg = e.vae;
  cfg.n_classes = SceneParams::for_domain(d).n_classes;
  if (d == Domain::HighRes) cfg.downsample = e.vae.downsample * 2;
  return cfg;
}

}  // namespace

ClipSet make_clips(const std::string& domain, int64_t n, int64_t frames, uint64_t seed_base) {
  ClipSet out;
  Domain d = domain_from_string(domain);
  SceneParams p = SceneParams::for_domain(d);
  for (int64_t i = 0; i < n; ++i) {
    out.clips.push_back(synth_scene(p, seed_base + static_cast<uint64_t>(i), frames));
    if (d == Domain::Semantic) {
      SceneParams geo = p;
      geo.semantic = false;
      geo.n_classes = 2;
      out.paired_geometry.push_back(synth_scene(geo, seed_base + static_cast<uint64_t>(i), frames));
    }
  }
  return out;
}

namespace {

ClipSet make_clips_cfg(const ExperimentConfig& e, const std::string& domain, int64_t n,
                       uint64_t seed_base) {
  ClipSet out;
  Domain d = domain_from_string(domain);
  SceneParams p = scene_params_for(e, domain);
  for (int64_t i = 0; i < n; ++i) {
    out.clips.push_back(synth_scene(p, seed_base + static_cast<uint64_t>(i), e.frames_per_clip));
    if (d == Domain::Semantic) {
      SceneParams geo = p;
      geo.semantic = false;
      geo.n_classes = 2;
      out.paired_geometry.push_back(
          synth_scene(geo, seed_base + static_cast<uint64_t>(i), e.frames_per_clip));
    }
  }
  return out;
}

}  // namespace

std::vector<SequenceClip> make_val_clips(const ExperimentConfig& cfg, const std::string& domain) {
  return make_clips_cfg(cfg, domain, cfg.n_val_clips, cfg.data_seed + kValSeedOffset).clips;
}

TrainedVae train_vae(VaeModel init, const std::vector<const OccupancyGrid*>& frames,
                     const std::vector<Tensor>* align_targets, const VaeTrainConfig& tc,
                     int64_t steps, double peak_lr, double warmup_frac, AdamWConfig adam,
                     double ema_decay, int64_t batch, Rng& rng) {
  if (frames.empty()) throw std::invalid_argument("train_vae: no training frames");
  if (align_targets && align_targets->size() != frames.size())
    throw std::invalid_argument("train_vae: target count mismatch");

  TrainedVae out;
  out.model = std::move(init);
  auto refs = out.model.params();
  AdamWState opt = AdamWState::init(refs, adam);
  EmaState ema = EmaState::init(refs, ema_decay);
  LrSchedule sched{peak_lr, std::max<int64_t>(1, static_cast<int64_t>(warmup_frac * steps)),
                   std::max<int64_t>(1, steps), 0.2};

  int64_t n = static_cast<int64_t>(frames.size());
  for (int64_t step = 0; step < steps; ++step) {
    std::vector<Tensor> grads;
    for (auto& r : refs) grads.push_back(Tensor::zeros(r.value->shape));
    double inv_b = 1.0 / static_cast<double>(batch);
    for (int64_t b = 0; b < batch; ++b) {
      int64_t idx = rng.uniform_int(n);
      std::optional<Tensor> target;
      if (align_targets) target = (*align_targets)[static_cast<size_t>(idx)];
      VaeLossResult res = vae_loss(out.model, *frames[static_cast<size_t>(idx)], target, tc, rng);
      for (size_t p = 0; p < grads.size(); ++p) axpy(grads[p], res.grads[p], inv_b);
    }
    adamw_step(refs, grads, opt, lr_at_step(sched, step));
    ema_update(ema, refs);
  }
  out.steps = steps;
  out.ema_model = out.model;
  auto ema_refs = out.ema_model.params();
  ema_write_to(ema, ema_refs);
  out.opt_m = opt.m;
  out.opt_v = opt.v;
  out.opt_step = opt.step;
  return out;
}

LatentDataset encode_clips(const VaeModel& vae, const std::vector<SequenceClip>& clips) {
  LatentDataset d;
  for (const auto& clip : clips) {
    std::vector<Tensor> lat;
    for (const auto& frame : clip.frames) {
      auto [mu, sigma] = encode(vae, frame);
      (void)sigma;
      lat.push_back(mu.reshaped({mu.size()}));
    }
    d.latent_dim = lat.front().size();
    d.latents.push_back(std::move(lat));
    d.trajs.push_back(clip.trajectory);
  }
  return d;
}

std::vector<CfmSample> make_cfm_samples(const LatentDataset& data, const FlowConfig& flow) {
  std::vector<CfmSample> out;
  int64_t Th = flow.history_len, Tf = flow.horizon_len;
  for (size_t c = 0; c < data.latents.size(); ++c) {
    int64_t F = static_cast<int64_t>(data.latents[c].size());
    for (int64_t w = 0; w + Th + Tf <= F; ++w) {
      CfmSample s;
      s.history = Tensor({Th * data.latent_dim});
      for (int64_t f = 0; f < Th; ++f)
        for (int64_t i = 0; i < data.latent_dim; ++i)
          s.history[f * data.latent_dim + i] =
              flow.sigma_scale * data.latents[c][static_cast<size_t>(w + f)][i];
      s.future = Tensor({Tf * data.latent_dim});
      for (int64_t f = 0; f < Tf; ++f)
        for (int64_t i = 0; i < data.latent_dim; ++i)
          s.future[f * data.latent_dim + i] = data.latents[c][static_cast<size_t>(w + Th + f)][i];
      s.trajectory = Tensor({Th * 3});
      for (int64_t f = 0; f < Th; ++f)
        for (int64_t k = 0; k < 3; ++k)
          s.trajectory[f * 3 + k] = data.trajs[c][static_cast<size_t>(w + f)][static_cast<size_t>(k)];
      out.push_back(std::move(s));
    }
  }
  if (out.empty()) throw std::runtime_error("make_cfm_samples: clips shorter than history+horizon");
  return out;
}

TrainedCfm train_cfm(VelocityModel init, const std::vector<CfmSample>& samples,
                     const FlowConfig& flow, int64_t steps, double peak_lr, double warmup_frac,
                     AdamWConfig adam, double ema_decay, int64_t batch, bool lora_only, Rng& rng) {
  if (samples.empty()) throw std::invalid_argument("train_cfm: no samples");
  TrainedCfm out;
  out.model = std::move(init);

  auto full_refs = out.model.params();
  auto train_refs = lora_only ? out.model.lora_params() : out.model.params();
  if (train_refs.empty()) throw std::invalid_argument("train_cfm: nothing to train");
  std::vector<size_t> grad_index;
  for (const auto& tr : train_refs) {
    size_t found = full_refs.size();
    for (size_t i = 0; i < full_refs.size(); ++i)
      if (full_refs[i].name == tr.name) {
        found = i;
        break;
      }
    if (found == full_refs.size()) throw std::logic_error("train_cfm: param name mismatch");
    grad_index.push_back(found);
  }

  AdamWState opt = AdamWState::init(train_refs, adam);
  EmaState ema = EmaState::init(full_refs, ema_decay);
  LrSchedule sched{peak_lr, std::max<int64_t>(1, static_cast<int64_t>(warmup_frac * steps)),
                   std::max<int64_t>(1, steps), 0.2};

  int64_t n = static_cast<int64_t>(samples.size());
  for (int64_t step = 0; step < steps; ++step) {
    CfmBatch b;
    for (int64_t i = 0; i < batch; ++i) b.push_back(samples[static_cast<size_t>(rng.uniform_int(n))]);
    CfmLossResult res = cfm_loss(out.model, b, flow, rng);
    std::vector<Tensor> grads;
    for (size_t i = 0; i < train_refs.size(); ++i) grads.push_back(res.grads[grad_index[i]]);
    adamw_step(train_refs, grads, opt, lr_at_step(sched, step));
    ema_update(ema, full_refs);
  }
  out.steps = steps;
  out.ema_model = out.model;
  auto ema_refs = out.ema_model.params();
  ema_write_to(ema, ema_refs);
  out.opt_m = opt.m;
  out.opt_v = opt.v;
  out.opt_step = opt.step;
  return out;
}

namespace {

void add_params(Checkpoint& ck, const std::string& prefix, std::vector<ParamRef> refs) {
  for (auto& r : refs) ck.add(prefix + "." + r.name, *r.value);
}

void add_moments(Checkpoint& ck, const std::string& prefix, const std::vector<ParamRef>& refs,
                 const std::vector<Tensor>& m, const std::vector<Tensor>& v) {
  for (size_t i = 0; i < refs.size() && i < m.size(); ++i) {
    ck.add(prefix + ".m." + refs[i].name, m[i]);
    ck.add(prefix + ".v." + refs[i].name, v[i]);
  }
}

void load_params(const Checkpoint& ck, const std::string& prefix, std::vector<ParamRef> refs) {
  for (auto& r : refs) {
    const Tensor& src = ck.require(prefix + "." + r.name);
    if (!src.same_shape(*r.value))
      throw std::runtime_error("checkpoint: shape mismatch for " + prefix + "." + r.name);
    *r.value = src;
  }
}

}  // namespace

Checkpoint build_checkpoint(const ExperimentConfig& cfg, const TrainedVae& vae,
                            const TrainedCfm& cfm, const std::string& stage, uint64_t seed) {
  Checkpoint ck;
  nlohmann::json& m = ck.manifest;
  m["stage"] = stage;
  m["seed"] = seed;
  m["config_hash"] = cfg.hash();
  m["module_versions"] = {{"numerics", 1}, {"vae", 1}, {"cfm", 1}};
  m["steps"] = {{"vae", vae.steps}, {"cfm", cfm.steps}};
  m["opt_steps"] = {{"vae", vae.opt_step}, {"cfm", cfm.opt_step}};

  const VaeConfig& vc = vae.model.cfg;
  m["vae"] = {{"latent_channels", vc.latent_channels}, {"downsample", vc.downsample},
              {"sub_x", vc.sub_x},       {"sub_y", vc.sub_y},
              {"sub_z", vc.sub_z},       {"n_classes", vc.n_classes},
              {"enc_hidden", vc.enc_hidden}, {"dec_hidden", vc.dec_hidden},
              {"activation", activation_name(vc.activation)}};

  const VelocityModel& vm = cfm.model;
  std::vector<int64_t> hidden;
  for (size_t l = 0; l + 1 < vm.backbone.layers.size(); ++l)
    hidden.push_back(vm.backbone.layers[l].fan_out());
  bool has_lora = !vm.backbone.layers.empty() && vm.backbone.layers[0].adapter.has_value();
  m["cfm"] = {{"x_dim", vm.x_dim},
              {"hist_dim", vm.hist_dim},
              {"traj_in_dim", vm.traj_in_dim},
              {"traj_emb_dim", vm.traj_emb_dim},
              {"time_dim", vm.time_dim},
              {"hidden", hidden},
              {"activation", activation_name(vm.backbone.activation)},
              {"lora", has_lora},
              {"lora_rank", has_lora ? vm.backbone.layers[0].adapter->rank : 0},
              {"lora_alpha", has_lora ? vm.backbone.layers[0].adapter->alpha : 0.0}};

  VaeModel vae_live = vae.model, vae_ema = vae.ema_model;
  VelocityModel cfm_live = cfm.model, cfm_ema = cfm.ema_model;
  add_params(ck, "vae", vae_live.params());
  add_params(ck, "vae_ema", vae_ema.params());
  add_params(ck, "cfm", cfm_live.params());
  add_params(ck, "cfm_ema", cfm_ema.params());
  add_moments(ck, "vae_opt", vae_live.params(), vae.opt_m, vae.opt_v);
  {
    // optimizer moments align with the trained subset for LoRA runs
    VelocityModel tmp = cfm.model;
    auto refs = cfm.opt_m.size() == tmp.params().size() ? tmp.params() : tmp.lora_params();
    add_moments(ck, "cfm_opt", refs, cfm.opt_m, cfm.opt_v);
  }
  return ck;
}

RestoredState restore_checkpoint(const Checkpoint& ck) {
  const nlohmann::json& m = ck.manifest;
  Rng dummy(0);

  VaeConfig vc;
  vc.latent_channels = m["vae"]["latent_channels"].get<int64_t>();
  vc.downsample = m["vae"]["downsample"].get<int64_t>();
  vc.sub_x = m["vae"]["sub_x"].get<int64_t>();
  vc.sub_y = m["vae"]["sub_y"].get<int64_t>();
  vc.sub_z = m["vae"]["sub_z"].get<int64_t>();
  vc.n_classes = m["vae"]["n_classes"].get<uint32_t>();
  vc.enc_hidden = m["vae"]["enc_hidden"].get<std::vector<int64_t>>();
  vc.dec_hidden = m["vae"]["dec_hidden"].get<std::vector<int64_t>>();
  vc.activation = activation_from_string(m["vae"]["activation"].get<std::string>());

  RestoredState st;
  st.vae = VaeModel::init(vc, dummy);
  st.vae_ema = VaeModel::init(vc, dummy);
  load_params(ck, "vae", st.vae.params());
  load_params(ck, "vae_ema", st.vae_ema.params());

  const nlohmann::json& cm = m["cfm"];
  st.cfm = VelocityModel::init(cm["x_dim"].get<int64_t>(), cm["hist_dim"].get<int64_t>(),
                               cm["traj_in_dim"].get<int64_t>(), cm["traj_emb_dim"].get<int64_t>(),
                               cm["time_dim"].get<int64_t>(),
                               cm["hidden"].get<std::vector<int64_t>>(),
                               activation_from_string(cm["activation"].get<std::string>()), dummy);
  if (cm["lora"].get<bool>())
    st.cfm.attach_lora(cm["lora_rank"].get<int64_t>(), cm["lora_alpha"].get<double>(), dummy);
  st.cfm_ema = st.cfm;
  load_params(ck, "cfm", st.cfm.params());
  load_params(ck, "cfm_ema", st.cfm_ema.params());
  return st;
}

namespace {

std::vector<const OccupancyGrid*> all_frames(const std::vector<SequenceClip>& clips) {
  std::vector<const OccupancyGrid*> out;
  for (const auto& c : clips)
    for (const auto& f : c.frames) out.push_back(&f);
  return out;
}

// Fraction subset of clip indices; the split seed is shared across strategies
// so every run sees the same data subset.
std::vector<int64_t> fraction_indices(const ExperimentConfig& cfg, int64_t n, double fraction) {
  std::vector<int64_t> ids(static_cast<size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  if (fraction >= 1.0) return ids;
  return split_fraction(ids, fraction, cfg.split_seed).train;
}

VelocityModel init_velocity(const ExperimentConfig& cfg, int64_t latent_dim, Rng& rng) {
  return VelocityModel::init(cfg.flow.horizon_len * latent_dim, cfg.flow.history_len * latent_dim,
                             cfg.flow.history_len * 3, cfg.traj_emb_dim, cfg.time_dim,
                             cfg.cfm_hidden, Activation::SiLU, rng);
}

// Dense-VAE latent targets for the alignment loss: one (h, w, c) tensor per
// target frame, produced by the pretrained compressor on the paired geometry
// frame and treated as a constant.
std::vector<Tensor> alignment_targets(const VaeModel& dense_vae,
                                      const std::vector<SequenceClip>& geometry_clips) {
  std::vector<Tensor> out;
  for (const auto& clip : geometry_clips)
    for (const auto& frame : clip.frames) {
      auto [mu, sigma] = encode(dense_vae, frame);
      (void)sigma;
      out.push_back(mu);
    }
  return out;
}

}  // namespace

Checkpoint cmd_pretrain(const ExperimentConfig& cfg) {
  Rng root(cfg.seed);
  Rng vae_rng = root.fork(1);
  Rng cfm_rng = root.fork(2);

  ClipSet data = make_clips_cfg(cfg, cfg.source_domain, cfg.n_source_clips, cfg.data_seed);
  VaeConfig vc = vae_config_for(cfg, cfg.source_domain);

  VaeModel vae0 = VaeModel::init(vc, vae_rng);
  VaeTrainConfig tc = cfg.vae_train;
  tc.mode = VaeMode::Pretrain;
  TrainedVae vae = train_vae(std::move(vae0), all_frames(data.clips), nullptr, tc,
                             cfg.vae_pretrain_steps, cfg.peak_lr_vae, cfg.warmup_frac, cfg.adam_vae,
                             cfg.ema_decay, cfg.vae_batch, vae_rng);

  LatentDataset lat = encode_clips(vae.ema_model, data.clips);
  std::vector<CfmSample> samples = make_cfm_samples(lat, cfg.flow);
  VelocityModel cfm0 = init_velocity(cfg, lat.latent_dim, cfm_rng);
  TrainedCfm cfm = train_cfm(std::move(cfm0), samples, cfg.flow, cfg.cfm_pretrain_steps,
                             cfg.peak_lr_cfm, cfg.warmup_frac, cfg.adam_cfm, cfg.ema_decay,
                             cfg.cfm_batch, /*lora_only=*/false, cfm_rng);

  return build_checkpoint(cfg, vae, cfm, "pretrain", cfg.seed);
}

Checkpoint cmd_align_vae(const Checkpoint& pretrained, const ExperimentConfig& cfg,
                         double fraction, uint64_t seed) {
  RestoredState st = restore_checkpoint(pretrained);
  Rng rng(seed ^ 0xa119ULL);

  ClipSet target = make_clips_cfg(cfg, cfg.target_domain, cfg.n_target_clips, cfg.data_seed + 500000);
  std::vector<int64_t> idx = fraction_indices(cfg, cfg.n_target_clips, fraction);

  std::vector<SequenceClip> clips, geometry;
  for (int64_t i : idx) {
    clips.push_back(target.clips[static_cast<size_t>(i)]);
    if (!target.paired_geometry.empty())
      geometry.push_back(target.paired_geometry[static_cast<size_t>(i)]);
  }

  bool semantic = domain_from_string(cfg.target_domain) == Domain::Semantic;
  TrainedVae aligned;
  if (semantic) {
    if (geometry.empty())
      throw std::runtime_error("cmd_align_vae: semantic mode requires paired geometry clips");
    std::vector<Tensor> targets = alignment_targets(st.vae_ema, geometry);
    VaeConfig vc = vae_config_for(cfg, cfg.target_domain);
    VaeModel fresh = VaeModel::init(vc, rng);
    VaeTrainConfig tc = cfg.vae_train;
    tc.mode = VaeMode::FinetuneAligned;
    aligned = train_vae(std::move(fresh), all_frames(clips), &targets, tc, cfg.vae_align_steps,
                        cfg.peak_lr_vae, cfg.warmup_frac, cfg.adam_vae, cfg.ema_decay,
                        cfg.vae_batch, rng);
  } else {
    // beam / indoor: continue the pretrained compressor on target data
    VaeModel cont = st.vae;
    cont.cfg = vae_config_for(cfg, cfg.target_domain);
    VaeTrainConfig tc = cfg.vae_train;
    tc.mode = VaeMode::Pretrain;
    aligned = train_vae(std::move(cont), all_frames(clips), nullptr, tc, cfg.vae_align_steps,
                        cfg.peak_lr_vae, cfg.warmup_frac, cfg.adam_vae, cfg.ema_decay,
                        cfg.vae_batch, rng);
  }

  // carry the pretrained flow model over unchanged
  TrainedCfm cfm;
  cfm.model = st.cfm;
  cfm.ema_model = st.cfm_ema;
  cfm.steps = pretrained.manifest["steps"]["cfm"].get<int64_t>();
  Checkpoint out = build_checkpoint(cfg, aligned, cfm, "align", seed);
  out.manifest["fraction"] = fraction;
  return out;
}

Checkpoint cmd_finetune(const Checkpoint& pretrained, const ExperimentConfig& cfg,
                        const std::string& strategy, double fraction, uint64_t seed) {
  if (strategy != "full" && strategy != "lora" && strategy != "cfm_only" && strategy != "scratch")
    throw std::invalid_argument("cmd_finetune: unknown strategy " + strategy);

  RestoredState st = restore_checkpoint(pretrained);
  Rng rng(seed ^ 0xf17eULL);

  ClipSet target = make_clips_cfg(cfg, cfg.target_domain, cfg.n_target_clips, cfg.data_seed + 500000);
  std::vector<int64_t> idx = fraction_indices(cfg, cfg.n_target_clips, fraction);
  std::vector<SequenceClip> clips;
  for (int64_t i : idx) clips.push_back(target.clips[static_cast<size_t>(i)]);
  VaeConfig tvc = vae_config_for(cfg, cfg.target_domain);

  // Stage A: the target-domain compressor. Budgets are equalized: strategies
  // that train a VAE from scratch get align+finetune steps, the aligned VAE
  // continues for finetune steps, LoRA freezes it.
  TrainedVae vae;
  if (strategy == "full") {
    // Continue the aligned compressor on the target fraction. Alignment
    // itself happened in cmd_align_vae; the dense-domain VAE that produced
    // the targets is not part of the aligned checkpoint, so this stage runs
    // the plain reconstruction loss.
    VaeModel m = st.vae;
    if (m.cfg.n_classes != tvc.n_classes)
      throw std::invalid_argument("cmd_finetune: checkpoint VAE does not match the target domain");
    VaeTrainConfig tc = cfg.vae_train;
    tc.mode = VaeMode::Pretrain;
    vae = train_vae(std::move(m), all_frames(clips), nullptr, tc, cfg.vae_finetune_steps,
                    cfg.peak_lr_vae * 0.5, cfg.warmup_frac, cfg.adam_vae, cfg.ema_decay,
                    cfg.vae_batch, rng);
  } else if (strategy == "lora") {
    if (st.vae.cfg.n_classes != tvc.n_classes)
      throw std::invalid_argument("cmd_finetune: checkpoint VAE does not match the target domain");
    vae.model = st.vae;
    vae.ema_model = st.vae_ema;
    vae.steps = 0;
  } else {
    // cfm_only and scratch train a fresh target VAE with the full target
    // budget (align + finetune steps)
    VaeModel fresh = VaeModel::init(tvc, rng);
    VaeTrainConfig tc = cfg.vae_train;
    tc.mode = VaeMode::Pretrain;
    vae = train_vae(std::move(fresh), all_frames(clips), nullptr, tc,
                    cfg.vae_align_steps + cfg.vae_finetune_steps, cfg.peak_lr_vae, cfg.warmup_frac,
                    cfg.adam_vae, cfg.ema_decay, cfg.vae_batch, rng);
  }

  // Stage B: the forecaster, with an equal step budget for every strategy.
  LatentDataset lat = encode_clips(vae.ema_model, clips);
  std::vector<CfmSample> samples = make_cfm_samples(lat, cfg.flow);

  TrainedCfm cfm;
  int64_t budget = cfg.cfm_finetune_steps;
  std::cerr << "[occflow] finetune strategy=" << strategy << " fraction=" << fraction
            << " cfm_steps=" << budget << " (equal across strategies)\n";
  if (strategy == "scratch") {
    VelocityModel fresh = init_velocity(cfg, lat.latent_dim, rng);
    cfm = train_cfm(std::move(fresh), samples, cfg.flow, budget, cfg.peak_lr_cfm, cfg.warmup_frac,
                    cfg.adam_cfm, cfg.ema_decay, cfg.cfm_batch, false, rng);
  } else if (strategy == "lora") {
    VelocityModel m = st.cfm;
    m.attach_lora(cfg.lora_rank, cfg.lora_alpha, rng);
    cfm = train_cfm(std::move(m), samples, cfg.flow, budget, cfg.peak_lr_cfm, cfg.warmup_frac,
                    cfg.adam_cfm, cfg.ema_decay, cfg.cfm_batch, true, rng);
  } else {
    VelocityModel m = st.cfm;  // full or cfm_only: continue all weights
    cfm = train_cfm(std::move(m), samples, cfg.flow, budget, cfg.peak_lr_cfm * 0.5,
                    cfg.warmup_frac, cfg.adam_cfm, cfg.ema_decay, cfg.cfm_batch, false, rng);
  }

  Checkpoint out = build_checkpoint(cfg, vae, cfm, "finetune:" + strategy, seed);
  out.manifest["fraction"] = fraction;
  out.manifest["strategy"] = strategy;
  out.manifest["cfm_finetune_steps"] = budget;
  return out;
}

namespace {

struct Forecaster {
  RestoredState st;
  FlowConfig flow;

  Condition condition_for(const SequenceClip& clip) const {
    int64_t Th = flow.history_len;
    if (clip.n_frames() < Th)
      throw std::invalid_argument("forecast: clip shorter than the history length");
    Condition cond;
    std::vector<Tensor> hist;
    int64_t lat_dim = 0;
    for (int64_t f = 0; f < Th; ++f) {
      auto [mu, sigma] = encode(st.vae_ema, clip.frames[static_cast<size_t>(f)]);
      (void)sigma;
      lat_dim = mu.size();
      hist.push_back(std::move(mu));
    }
    cond.history = Tensor({Th * lat_dim});
    for (int64_t f = 0; f < Th; ++f)
      for (int64_t i = 0; i < lat_dim; ++i)
        cond.history[f * lat_dim + i] = flow.sigma_scale * hist[static_cast<size_t>(f)][i];
    cond.trajectory = Tensor({Th * 3});
    for (int64_t f = 0; f < Th; ++f)
      for (int64_t k = 0; k < 3; ++k)
        cond.trajectory[f * 3 + k] = clip.trajectory[static_cast<size_t>(f)][static_cast<size_t>(k)];
    return cond;
  }

  ForecastResult forecast(const SequenceClip& clip, uint64_t seed) const {
    Condition cond = condition_for(clip);
    Rng rng(seed);
    Tensor x = euler_sample(st.cfm_ema, cond, flow, rng);  // VAE scale

    int64_t Th = flow.history_len, Tf = flow.horizon_len;
    const OccupancyGrid& proto = clip.frames.front();
    int64_t lat_dim = x.size() / Tf;

    ForecastResult out;
    for (int64_t f = 0; f < Tf; ++f) {
      Tensor z({lat_dim});
      for (int64_t i = 0; i < lat_dim; ++i) z[i] = x[f * lat_dim + i];
      out.latents.push_back(z);
      DecodeResult dec = decode(st.vae_ema, z, proto.H, proto.W, proto.D);
      dec.grid.resolution = proto.resolution;
      dec.grid.origin = proto.origin;
      out.forecast.frames.push_back(std::move(dec.grid));
      int64_t src = Th + f;
      if (src < clip.n_frames()) {
        out.forecast.ego_poses.push_back(clip.ego_poses[static_cast<size_t>(src)]);
        out.forecast.timestamps.push_back(clip.timestamps[static_cast<size_t>(src)]);
      } else {
        Se2Pose last = out.forecast.ego_poses.empty() ? clip.ego_poses.back()
                                                      : out.forecast.ego_poses.back();
        out.forecast.ego_poses.push_back(last);
        double t_last = out.forecast.timestamps.empty() ? clip.timestamps.back()
                                                        : out.forecast.timestamps.back();
        out.forecast.timestamps.push_back(t_last + 0.5);
      }
    }
    out.forecast.recompute_trajectory();
    return out;
  }
};

}  // namespace

ForecastResult cmd_sample(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                          const SequenceClip& clip, int64_t nfe, double cfg_scale, uint64_t seed) {
  Forecaster fc{restore_checkpoint(ckpt), cfg.flow};
  fc.flow.nfe = nfe;
  fc.flow.cfg_scale = cfg_scale;
  return fc.forecast(clip, seed);
}

std::vector<NllRow> cmd_nll(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                            const std::vector<SequenceClip>& clips, int64_t n_probes,
                            const std::vector<uint64_t>& seeds) {
  Forecaster fc{restore_checkpoint(ckpt), cfg.flow};
  std::vector<NllRow> rows;
  int64_t Th = cfg.flow.history_len, Tf = cfg.flow.horizon_len;

  for (size_t ci = 0; ci < clips.size(); ++ci) {
    const SequenceClip& clip = clips[ci];
    if (clip.n_frames() < Th + Tf)
      throw std::invalid_argument("cmd_nll: clip shorter than history+horizon");
    Condition cond = fc.condition_for(clip);

    // ground-truth future latents in the flow's scaled space
    std::vector<Tensor> fut;
    int64_t lat_dim = 0;
    for (int64_t f = 0; f < Tf; ++f) {
      auto [mu, sigma] = encode(fc.st.vae_ema, clip.frames[static_cast<size_t>(Th + f)]);
      (void)sigma;
      lat_dim = mu.size();
      fut.push_back(std::move(mu));
    }
    Tensor x({Tf * lat_dim});
    for (int64_t f = 0; f < Tf; ++f)
      for (int64_t i = 0; i < lat_dim; ++i)
        x[f * lat_dim + i] = cfg.flow.sigma_scale * fut[static_cast<size_t>(f)][i];

    VelocityOdeField field(fc.st.cfm_ema, cond);
    for (uint64_t s : seeds) {
      NllRow row;
      row.clip = static_cast<int64_t>(ci);
      row.seed = s;
      row.probes = n_probes;
      row.step = cfg.ode.step;
      if (n_probes > 0) {
        Rng rng(s ^ 0x9e11ULL);
        ProbeConfig pc{n_probes};
        row.logp = solve_logprob(field, x, cfg.ode, pc, &rng).logp;
      } else {
        row.logp = solve_logprob(field, x, cfg.ode).logp;
      }
      row.bpd = bits_per_dim(row.logp, x.size());
      rows.push_back(row);
    }
  }
  return rows;
}

std::string nll_rows_to_csv(const std::vector<NllRow>& rows, const std::string& config_hash) {
  std::ostringstream os;
  os << "clip,seed,logp,bpd,probes,step,config_hash\n";
  for (const auto& r : rows)
    os << r.clip << "," << r.seed << "," << fmt_double(r.logp) << "," << fmt_double(r.bpd) << ","
       << r.probes << "," << fmt_double(r.step) << "," << config_hash << "\n";
  return os.str();
}

std::string Report::to_csv(const std::string& config_hash) const {
  std::ostringstream os;
  os << "metric,horizon,region,value,seed,config_hash\n";
  for (const auto& r : rows)
    os << r.metric << "," << r.horizon << "," << r.region << "," << fmt_double(r.value) << ","
       << r.seed << "," << config_hash << "\n";
  return os.str();
}

void Report::write(const std::string& out_dir, const std::string& config_hash) const {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream os(out_dir + "/report.csv", std::ios::binary);
    os << to_csv(config_hash);
  }
  nlohmann::json j = provenance;
  j["config_hash"] = config_hash;
  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& r : rows)
    jrows.push_back({{"metric", r.metric},
                     {"horizon", r.horizon},
                     {"region", r.region},
                     {"value", r.value},
                     {"seed", r.seed}});
  j["rows"] = jrows;
  std::ofstream os(out_dir + "/report.json", std::ios::binary);
  os << j.dump(2) << "\n";
}

double Report::value_of(const std::string& metric, int64_t horizon) const {
  for (const auto& r : rows)
    if (r.metric == metric && r.horizon == horizon) return r.value;
  throw std::out_of_range("report: no row " + metric + "@" + std::to_string(horizon));
}

namespace {

// BEV non-empty mask at latent resolution: a cell counts when any voxel in
// its column block is occupied.
std::vector<uint8_t> latent_nonempty_mask(const OccupancyGrid& g, int64_t f) {
  int64_t h = g.H / f, w = g.W / f;
  std::vector<uint8_t> mask(static_cast<size_t>(h * w), 0);
  for (int64_t x = 0; x < g.H; ++x)
    for (int64_t y = 0; y < g.W; ++y)
      for (int64_t z = 0; z < g.D; ++z)
        if (g.at(x, y, z)) mask[static_cast<size_t>((x / f) * w + (y / f))] = 1;
  return mask;
}

Tensor masked_mean_feature(const Tensor& mu, const std::vector<uint8_t>& mask) {
  int64_t h = mu.dim(0), w = mu.dim(1), c = mu.dim(2);
  Tensor out({c});
  int64_t n = 0;
  for (int64_t i = 0; i < h * w; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    ++n;
    for (int64_t k = 0; k < c; ++k) out[k] += mu[i * c + k];
  }
  if (n > 0)
    for (int64_t k = 0; k < c; ++k) out[k] /= static_cast<double>(n);
  return out;
}

struct EvalAccum {
  // per horizon collections
  std::vector<std::vector<double>> ious, mious;
  std::vector<std::vector<Tensor>> feat_fc, feat_gt;          // frame features
  std::vector<std::vector<Tensor>> rfeat_fc, rfeat_gt;        // region features
  std::vector<std::vector<OccupancyGrid>> grids_fc, grids_gt;
  std::vector<Tensor> cell_mu_fc, cell_mu_gt;                 // paired latent cells
  std::vector<Tensor> cell_sig_fc, cell_sig_gt;
  std::vector<Tensor> clip_feat_fc, clip_feat_gt;             // (Tf, c) per clip
};

}  // namespace

Report cmd_evaluate(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                    const std::vector<SequenceClip>& val_clips, uint64_t seed) {
  auto fc = std::make_shared<Forecaster>(Forecaster{restore_checkpoint(ckpt), cfg.flow});
  Report rep = evaluate_forecasts(
      cfg, fc->st.vae_ema, val_clips,
      [fc](const SequenceClip& clip, uint64_t s) { return fc->forecast(clip, s); }, seed);
  if (cfg.eval_nll) {
    std::vector<NllRow> nll = cmd_nll(ckpt, cfg, val_clips, cfg.eval_nll_probes, {seed});
    double mean_bpd = 0.0;
    for (const auto& r : nll) mean_bpd += r.bpd;
    mean_bpd /= static_cast<double>(nll.size());
    for (int64_t h = 0; h < cfg.flow.horizon_len; ++h)
      rep.rows.push_back({"bpd", h + 1, "global", mean_bpd, seed});
  }
  return rep;
}

Report evaluate_forecasts(const ExperimentConfig& cfg, const VaeModel& feature_vae,
                          const std::vector<SequenceClip>& val_clips, const ForecastFn& forecast,
                          uint64_t seed) {
  if (val_clips.empty()) throw std::invalid_argument("cmd_evaluate: empty validation set");
  auto t_start = std::chrono::steady_clock::now();

  int64_t Th = cfg.flow.history_len, Tf = cfg.flow.horizon_len;
  int64_t f = feature_vae.cfg.downsample;
  uint32_t n_classes = feature_vae.cfg.n_classes;
  int64_t c = feature_vae.cfg.latent_channels;

  const OccupancyGrid& proto = val_clips.front().frames.front();
  RegionBinning bins;
  bins.cell_size = static_cast<double>(f) * proto.resolution;
  double half_extent = 0.5 * static_cast<double>(proto.H) * proto.resolution;
  bins.edges = cfg.raw.get_double_list(
      "metrics.region_edges", {0.2 * half_extent, 0.6 * half_extent, half_extent});
  int64_t knn_k = cfg.raw.get_int("metrics.cknna_k", 10);

  EvalAccum acc;
  acc.ious.resize(static_cast<size_t>(Tf));
  acc.mious.resize(static_cast<size_t>(Tf));
  acc.feat_fc.resize(static_cast<size_t>(Tf));
  acc.feat_gt.resize(static_cast<size_t>(Tf));
  acc.rfeat_fc.resize(static_cast<size_t>(Tf));
  acc.rfeat_gt.resize(static_cast<size_t>(Tf));
  acc.grids_fc.resize(static_cast<size_t>(Tf));
  acc.grids_gt.resize(static_cast<size_t>(Tf));

  for (size_t ci = 0; ci < val_clips.size(); ++ci) {
    const SequenceClip& clip = val_clips[ci];
    if (clip.n_frames() < Th + Tf)
      throw std::invalid_argument("cmd_evaluate: clip shorter than history+horizon");
    ForecastResult fr = forecast(clip, seed + 1000 * static_cast<uint64_t>(ci));

    Tensor clip_f_fc({Tf, c}), clip_f_gt({Tf, c});
    for (int64_t h = 0; h < Tf; ++h) {
      const OccupancyGrid& gt = clip.frames[static_cast<size_t>(Th + h)];
      const OccupancyGrid& pr = fr.forecast.frames[static_cast<size_t>(h)];
      acc.ious[static_cast<size_t>(h)].push_back(iou(pr, gt));
      acc.mious[static_cast<size_t>(h)].push_back(miou(pr, gt, n_classes).mean);
      acc.grids_fc[static_cast<size_t>(h)].push_back(pr);
      acc.grids_gt[static_cast<size_t>(h)].push_back(gt);

      auto [mu_gt, sig_gt] = encode(feature_vae, gt);
      auto [mu_fc, sig_fc] = encode(feature_vae, pr);
      std::vector<uint8_t> mask_gt = latent_nonempty_mask(gt, f);
      std::vector<uint8_t> mask_fc = latent_nonempty_mask(pr, f);

      Tensor ffc = masked_mean_feature(mu_fc, mask_fc);
      Tensor fgt = masked_mean_feature(mu_gt, mask_gt);
      acc.feat_fc[static_cast<size_t>(h)].push_back(ffc);
      acc.feat_gt[static_cast<size_t>(h)].push_back(fgt);
      for (int64_t k = 0; k < c; ++k) {
        clip_f_fc.at2(h, k, c) = ffc[k];
        clip_f_gt.at2(h, k, c) = fgt[k];
      }

      acc.rfeat_fc[static_cast<size_t>(h)].push_back(region_features(mu_fc, mask_fc, bins).features);
      acc.rfeat_gt[static_cast<size_t>(h)].push_back(region_features(mu_gt, mask_gt, bins).features);

      // paired per-cell latents (subsampled later)
      int64_t cells = mu_gt.size() / c;
      Tensor mg = mu_gt.reshaped({cells, c}), mf = mu_fc.reshaped({cells, c});
      Tensor sg = sig_gt.reshaped({cells, c}), sf = sig_fc.reshaped({cells, c});
      acc.cell_mu_gt.push_back(mg);
      acc.cell_mu_fc.push_back(mf);
      acc.cell_sig_gt.push_back(sg);
      acc.cell_sig_fc.push_back(sf);
    }
    acc.clip_feat_fc.push_back(clip_f_fc);
    acc.clip_feat_gt.push_back(clip_f_gt);
  }

  // pool paired cells across clips/horizons with a deterministic stride
  int64_t total_cells = 0;
  for (const auto& t : acc.cell_mu_gt) total_cells += t.dim(0);
  const int64_t max_cells = cfg.raw.get_int("metrics.max_cells", 160);
  int64_t stride = std::max<int64_t>(1, total_cells / max_cells);
  std::vector<std::array<const Tensor*, 4>> blocks;
  for (size_t b = 0; b < acc.cell_mu_gt.size(); ++b)
    blocks.push_back({&acc.cell_mu_gt[b], &acc.cell_mu_fc[b], &acc.cell_sig_gt[b], &acc.cell_sig_fc[b]});
  std::vector<double> mg_rows, mf_rows, sg_rows, sf_rows;
  int64_t picked = 0, cursor = 0;
  for (const auto& blk : blocks) {
    int64_t rows = blk[0]->dim(0);
    for (int64_t r = 0; r < rows; ++r, ++cursor) {
      if (cursor % stride != 0) continue;
      for (int64_t k = 0; k < c; ++k) {
        mg_rows.push_back(blk[0]->at2(r, k, c));
        mf_rows.push_back(blk[1]->at2(r, k, c));
        sg_rows.push_back(blk[2]->at2(r, k, c));
        sf_rows.push_back(blk[3]->at2(r, k, c));
      }
      ++picked;
    }
  }
  Tensor MG = Tensor::from({picked, c}, mg_rows);
  Tensor MF = Tensor::from({picked, c}, mf_rows);
  Tensor SG = Tensor::from({picked, c}, sg_rows);
  Tensor SF = Tensor::from({picked, c}, sf_rows);
  for (int64_t i = 0; i < SG.size(); ++i) {
    SG[i] = std::max(SG[i], 1e-9);
    SF[i] = std::max(SF[i], 1e-9);
  }

  double sigma = median_pairwise_distance(MG);
  int64_t k_used = std::min<int64_t>(knn_k, picked - 2);
  double v_cka = cka(MG, MF, sigma);
  double v_cknna = cknna(MG, MF, std::max<int64_t>(1, k_used), sigma);
  double v_cos = mean_cosine(MF, MG).value;
  double v_symkl = gaussian_sym_kl(MF, SF, MG, SG);
  double v_w2 = gaussian_w2(MF, SF, MG, SG);

  Report rep;
  auto add_row = [&](const std::string& metric, int64_t horizon, const std::string& region,
                     double value) {
    rep.rows.push_back({metric, horizon, region, value, seed});
  };

  double kid_sigma = 0.0;
  for (int64_t h = 0; h < Tf; ++h) {
    auto mean_of = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    };
    int64_t horizon = h + 1;
    add_row("iou", horizon, "global", mean_of(acc.ious[static_cast<size_t>(h)]));
    add_row("miou", horizon, "global", mean_of(acc.mious[static_cast<size_t>(h)]));

    auto to_set = [&](const std::vector<Tensor>& feats, const char* prov) {
      int64_t n = static_cast<int64_t>(feats.size());
      int64_t d = feats.front().size();
      Tensor m({n, d});
      for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < d; ++k) m.at2(i, k, d) = feats[static_cast<size_t>(i)][k];
      return FeatureSet(m, prov);
    };
    FeatureSet fg = to_set(acc.feat_fc[static_cast<size_t>(h)], "latent_mean");
    FeatureSet fe = to_set(acc.feat_gt[static_cast<size_t>(h)], "latent_mean");
    if (kid_sigma == 0.0) kid_sigma = median_pairwise_distance(fe.features);
    add_row("fid", horizon, "global", frechet_distance(fg, fe));
    add_row("kid", horizon, "global", kid(fg, fe, kid_sigma));

    FeatureSet rg = to_set(acc.rfeat_fc[static_cast<size_t>(h)], "latent_region");
    FeatureSet re = to_set(acc.rfeat_gt[static_cast<size_t>(h)], "latent_region");
    add_row("fid_r", horizon, "regions", frechet_distance(rg, re));
    add_row("kid_r", horizon, "regions", kid(rg, re, kid_sigma));

    add_row("class_variance", horizon, "global",
            class_variance(acc.grids_fc[static_cast<size_t>(h)], n_classes));
    add_row("class_variance_gt", horizon, "global",
            class_variance(acc.grids_gt[static_cast<size_t>(h)], n_classes));

    // representation metrics are pooled over horizons; repeated per row so
    // the table stays horizon x metric shaped
    add_row("cka", horizon, "global", v_cka);
    add_row("cknna", horizon, "global", v_cknna);
    add_row("cosine", horizon, "global", v_cos);
    add_row("sym_kl", horizon, "global", v_symkl);
    add_row("w2", horizon, "global", v_w2);
    add_row("seq_frechet", horizon, "global",
            sequence_frechet(acc.clip_feat_fc, acc.clip_feat_gt, TemporalPool::LinearWeighted));
  }

  auto t_end = std::chrono::steady_clock::now();
  rep.provenance["sigma"] = sigma;
  rep.provenance["kid_sigma"] = kid_sigma;
  rep.provenance["cknna_k"] = k_used;
  rep.provenance["region_edges"] = bins.edges;
  rep.provenance["region_cell_size"] = bins.cell_size;
  rep.provenance["paired_cells"] = picked;
  rep.provenance["seed"] = seed;
  rep.provenance["n_val_clips"] = val_clips.size();
  rep.provenance["runtime_seconds"] =
      std::chrono::duration<double>(t_end - t_start).count();
  return rep;
}

std::string StudyResult::to_csv(const std::string& config_hash) const {
  std::ostringstream os;
  os << "domain,strategy,fraction,seed,horizon,iou,miou,config_hash\n";
  for (const auto& cell : cells)
    for (size_t h = 0; h < cell.iou_per_horizon.size(); ++h)
      os << cell.domain << "," << cell.strategy << "," << fmt_double(cell.fraction) << ","
         << cell.seed << "," << (h + 1) << "," << fmt_double(cell.iou_per_horizon[h]) << ","
         << fmt_double(cell.miou_per_horizon[h]) << "," << config_hash << "\n";
  return os.str();
}

StudyResult cmd_transfer_study(const ExperimentConfig& cfg) {
  StudyResult result;
  Checkpoint pretrained = cmd_pretrain(cfg);

  for (const std::string& domain : cfg.study_domains) {
    ExperimentConfig dcfg = cfg;
    dcfg.target_domain = domain;

    std::vector<SequenceClip> val = make_val_clips(dcfg, domain);

    for (double fraction : cfg.fractions) {
      // one aligned compressor per (domain, fraction), shared across seeds
      Checkpoint aligned = cmd_align_vae(pretrained, dcfg, fraction, cfg.seed ^ 0xa11c0deULL);

      for (const std::string& strategy : cfg.strategies) {
        for (uint64_t seed : cfg.seeds) {
          Checkpoint tuned = cmd_finetune(aligned, dcfg, strategy, fraction, seed);
          Report rep = cmd_evaluate(tuned, dcfg, val, seed);

          StudyCell cell;
          cell.domain = domain;
          cell.strategy = strategy;
          cell.fraction = fraction;
          cell.seed = seed;
          for (int64_t h = 1; h <= cfg.flow.horizon_len; ++h) {
            cell.iou_per_horizon.push_back(rep.value_of("iou", h));
            cell.miou_per_horizon.push_back(rep.value_of("miou", h));
          }
          result.cells.push_back(std::move(cell));
        }
      }
    }
  }

  // win counts vs scratch on the domain's headline metric
  nlohmann::json wins = nlohmann::json::array();
  for (const std::string& domain : cfg.study_domains) {
    bool semantic = domain_from_string(domain) == Domain::Semantic;
    for (double fraction : cfg.fractions) {
      for (const std::string& strategy : cfg.strategies) {
        if (strategy == "scratch") continue;
        for (int64_t h = 0; h < cfg.flow.horizon_len; ++h) {
          int win = 0, total = 0;
          for (uint64_t seed : cfg.seeds) {
            const StudyCell *a = nullptr, *b = nullptr;
            for (const auto& cell : result.cells) {
              if (cell.domain != domain || cell.fraction != fraction || cell.seed != seed) continue;
              if (cell.strategy == strategy) a = &cell;
              if (cell.strategy == "scratch") b = &cell;
            }
            if (!a || !b) continue;
            double va = semantic ? a->miou_per_horizon[static_cast<size_t>(h)]
                                 : a->iou_per_horizon[static_cast<size_t>(h)];
            double vb = semantic ? b->miou_per_horizon[static_cast<size_t>(h)]
                                 : b->iou_per_horizon[static_cast<size_t>(h)];
            win += va > vb;
            ++total;
          }
          if (total > 0)
            wins.push_back({{"domain", domain},
                            {"strategy", strategy},
                            {"fraction", fraction},
                            {"horizon", h + 1},
                            {"metric", semantic ? "miou" : "iou"},
                            {"wins", win},
                            {"seeds", total}});
        }
      }
    }
  }
  result.win_matrix = wins;
  return result;
}

}  // namespace occflow
