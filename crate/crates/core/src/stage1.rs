//! Prior learning stage: learn the real/forgery prompt embeddings against a
//! frozen denoiser, finetune the denoiser against frozen prompts, and
//! alternate between the two until the loss plateaus.

use crate::autodiff::{Arr, Graph, NodeId};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffusion::{Autoencoder, CondUnet, DiffusionError, NoiseSchedule, UnetNodes};
use crate::imgio::{stack_batch, RgbTensor};
use crate::nn::{params_checksum, Adam};
use crate::rng::{derive_rng, fill_normal, string_tag};
use crate::steplog::{StepLog, StepRecord};
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const REAL_PROMPT_DEFAULT: &str = "A photo of document with real seal";
pub const FORGERY_PROMPT_DEFAULT: &str = "A photo of document with fake seal";

const DRAWS_TAG: u64 = 0x51a1_d0a7;
const BATCH_TAG: u64 = 0x51a1_ba7c;

#[derive(Debug, Error)]
pub enum Stage1Error {
    #[error("prompt init string is empty")]
    EmptyString,
    #[error("bad prompt dims: N={n}, d={d}")]
    BadDims { n: usize, d: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("step called in phase {got:?}, expected {expected:?}")]
    PhaseViolation {
        got: Stage1Phase,
        expected: Stage1Phase,
    },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Real,
    Forgery,
}

impl PromptRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptRole::Real => "real",
            PromptRole::Forgery => "forgery",
        }
    }
}

/// Learnable N x d prompt matrix, deterministically initialized from its
/// init string and a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub role: PromptRole,
    pub matrix: Arr,
    pub init_string: String,
}

impl PromptEmbedding {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        self.matrix
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }
}

/// Build the real/forgery prompt pair. Per-row Gaussian from a generator
/// seeded by `(string hash, role, seed)`, so equal inputs reproduce the
/// matrices bit-exactly.
pub fn init_prompts(
    real_str: &str,
    forgery_str: &str,
    n: usize,
    d: usize,
    seed: u64,
) -> Result<(PromptEmbedding, PromptEmbedding), Stage1Error> {
    if real_str.is_empty() || forgery_str.is_empty() {
        return Err(Stage1Error::EmptyString);
    }
    if n < 1 || d < 1 {
        return Err(Stage1Error::BadDims { n, d });
    }
    let make = |s: &str, role: PromptRole| {
        let mut rng = derive_rng(seed, &[string_tag(s), role as u64]);
        let mut m = Arr::zeros(ndarray::IxDyn(&[n, d]));
        fill_normal(&mut rng, m.as_slice_mut().unwrap());
        PromptEmbedding {
            role,
            matrix: m,
            init_string: s.to_string(),
        }
    };
    Ok((
        make(real_str, PromptRole::Real),
        make(forgery_str, PromptRole::Forgery),
    ))
}

// ---------------------------------------------------------------------------
// Noise-prediction loss on the graph (shared with stage 2)
// ---------------------------------------------------------------------------

/// One `(t, eps)` draw per batch item.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    pub t: Vec<usize>,
    pub eps: Array4<f64>,
}

pub fn sample_noise_draws(
    rng: &mut ChaCha8Rng,
    n: usize,
    latent: (usize, usize, usize),
    t_max: usize,
) -> NoiseDraws {
    let t: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=t_max)).collect();
    let mut eps = Array4::zeros((n, latent.0, latent.1, latent.2));
    fill_normal(rng, eps.as_slice_mut().unwrap());
    NoiseDraws { t, eps }
}

/// Draws for the paired (real, synthetic) objective.
#[derive(Debug, Clone)]
pub struct PairDraws {
    pub real: NoiseDraws,
    pub synth: NoiseDraws,
}

/// `mean((unet(q_sample(z0, t, eps), t, prompt) - eps)^2)` built on the
/// graph, so it differentiates with respect to the denoiser, the prompt, and
/// `z0` alike.
pub fn noise_pred_loss(
    g: &mut Graph,
    unet: &CondUnet,
    nodes: &UnetNodes,
    sched: &NoiseSchedule,
    z0: NodeId,
    draws: &NoiseDraws,
    prompt: NodeId,
) -> NodeId {
    let sqrt_ab: Vec<f64> = draws
        .t
        .iter()
        .map(|&t| sched.alpha_bar_at(t).sqrt())
        .collect();
    let mut eps_scaled = draws.eps.clone();
    for (i, &t) in draws.t.iter().enumerate() {
        let s = (1.0 - sched.alpha_bar_at(t)).sqrt();
        eps_scaled
            .index_axis_mut(ndarray::Axis(0), i)
            .mapv_inplace(|v| v * s);
    }
    let scaled_z0 = g.scale_rows(z0, sqrt_ab);
    let eps_term = g.leaf(eps_scaled.into_dyn());
    let z_t = g.add(scaled_z0, eps_term);
    let pred = unet.forward_graph(g, nodes, z_t, &draws.t, prompt);
    let eps_target = g.leaf(draws.eps.clone().into_dyn());
    let diff = g.sub(pred, eps_target);
    let sq = g.mul(diff, diff);
    g.mean_all(sq)
}

// ---------------------------------------------------------------------------
// Stage-1 state and steps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Phase {
    Prompt,
    Unet,
}

impl Stage1Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage1Phase::Prompt => "prompt",
            Stage1Phase::Unet => "unet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub real_prompt: String,
    pub forgery_prompt: String,
    /// Prompt token count N.
    pub prompt_len: usize,
    pub unet: crate::diffusion::UnetConfig,
    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub lr_prompts: f64,
    pub lr_unet: f64,
    /// Images per side (real and synthetic) per step.
    pub batch_per_side: usize,
    pub k_prompt: u64,
    pub k_unet: u64,
    pub max_steps: u64,
    pub ema_decay: f64,
    pub eps_stop: f64,
    pub patience: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            real_prompt: REAL_PROMPT_DEFAULT.to_string(),
            forgery_prompt: FORGERY_PROMPT_DEFAULT.to_string(),
            prompt_len: 8,
            unet: crate::diffusion::UnetConfig::default(),
            schedule_steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            lr_prompts: 1e-4,
            lr_unet: 1e-4,
            batch_per_side: 4,
            k_prompt: 50,
            k_unet: 50,
            max_steps: 4000,
            ema_decay: 0.99,
            eps_stop: 1e-3,
            patience: 500,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn phase_for_step(&self, step: u64) -> Stage1Phase {
        let cycle = self.k_prompt + self.k_unet;
        if cycle == 0 || step % cycle < self.k_prompt {
            Stage1Phase::Prompt
        } else {
            Stage1Phase::Unet
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1State {
    pub cfg: Stage1Config,
    pub unet: CondUnet,
    pub ae: Autoencoder,
    pub sched: NoiseSchedule,
    pub real_prompt: PromptEmbedding,
    pub forgery_prompt: PromptEmbedding,
    pub opt_prompts: Adam,
    pub opt_unet: Adam,
    pub step: u64,
    pub phase: Stage1Phase,
    pub ema: Option<f64>,
    pub best_ema: f64,
    pub best_step: u64,
}

impl Stage1State {
    /// Fresh state; the autoencoder is pretrained (or identity) and stays
    /// frozen through both training stages.
    pub fn new(cfg: Stage1Config, ae: Autoencoder) -> Result<Self, Stage1Error> {
        if ae.cfg.latent_channels != cfg.unet.in_channels {
            return Err(Stage1Error::Config(format!(
                "autoencoder latent channels {} != denoiser input channels {}",
                ae.cfg.latent_channels, cfg.unet.in_channels
            )));
        }
        if cfg.unet.timesteps != cfg.schedule_steps {
            return Err(Stage1Error::Config(format!(
                "denoiser timesteps {} != schedule steps {}",
                cfg.unet.timesteps, cfg.schedule_steps
            )));
        }
        let sched = NoiseSchedule::linear(cfg.schedule_steps, cfg.beta_min, cfg.beta_max)?;
        let (real_prompt, forgery_prompt) = init_prompts(
            &cfg.real_prompt,
            &cfg.forgery_prompt,
            cfg.prompt_len,
            cfg.unet.prompt_dim,
            cfg.seed,
        )?;
        let unet = CondUnet::new(cfg.unet, cfg.seed);
        let opt_prompts = Adam::for_params(
            cfg.lr_prompts,
            &[&real_prompt.matrix, &forgery_prompt.matrix],
        );
        let unet_params: Vec<&Arr> = unet.named_params().into_iter().map(|(_, p)| p).collect();
        let opt_unet = Adam::for_params(cfg.lr_unet, &unet_params);
        let phase = cfg.phase_for_step(0);
        Ok(Self {
            cfg,
            unet,
            ae,
            sched,
            real_prompt,
            forgery_prompt,
            opt_prompts,
            opt_unet,
            step: 0,
            phase,
            ema: None,
            best_ema: f64::INFINITY,
            best_step: 0,
        })
    }

    fn encode(&self, images: &[RgbTensor]) -> Result<Array4<f64>, Stage1Error> {
        Ok(self.ae.encode_batch(&stack_batch(images))?)
    }

    fn latent_dims(&self, z: &Array4<f64>) -> (usize, usize, usize) {
        let (_, c, h, w) = z.dim();
        (c, h, w)
    }

    /// Per-step draw stream: a pure function of `(seed, step)`, so resumed
    /// runs replay identical noise.
    pub fn pair_draws_for_step(
        &self,
        step: u64,
        n_real: usize,
        n_synth: usize,
        latent: (usize, usize, usize),
    ) -> PairDraws {
        let mut rng = derive_rng(self.cfg.seed, &[DRAWS_TAG, step]);
        let real = sample_noise_draws(&mut rng, n_real, latent, self.sched.steps());
        let synth = sample_noise_draws(&mut rng, n_synth, latent, self.sched.steps());
        PairDraws { real, synth }
    }

    /// Both squared-error terms and their sum at the given draws, via the
    /// same forward used for training. Pure: no state change.
    pub fn pair_loss(
        &self,
        batch_real: &[RgbTensor],
        batch_synth: &[RgbTensor],
        draws: &PairDraws,
    ) -> Result<(f64, f64, f64), Stage1Error> {
        let z_r = self.encode(batch_real)?;
        let z_s = self.encode(batch_synth)?;
        let mut g = Graph::inference();
        let nodes = self.unet.insert(&mut g);
        let pr = g.leaf(self.real_prompt.matrix.clone());
        let pf = g.leaf(self.forgery_prompt.matrix.clone());
        let zr = g.leaf(z_r.into_dyn());
        let zs = g.leaf(z_s.into_dyn());
        let lr = noise_pred_loss(&mut g, &self.unet, &nodes, &self.sched, zr, &draws.real, pr);
        let ls = noise_pred_loss(&mut g, &self.unet, &nodes, &self.sched, zs, &draws.synth, pf);
        let (a, b) = (g.scalar(lr), g.scalar(ls));
        Ok((a + b, a, b))
    }

    #[allow(clippy::type_complexity)]
    fn paired_backward(
        &mut self,
        batch_real: &[RgbTensor],
        batch_synth: &[RgbTensor],
        draws: &PairDraws,
    ) -> Result<(Graph, UnetNodes, NodeId, NodeId, NodeId, f64, f64), Stage1Error> {
        if batch_real.is_empty() || batch_synth.is_empty() {
            return Err(Stage1Error::EmptyBatch);
        }
        let z_r = self.encode(batch_real)?;
        let z_s = self.encode(batch_synth)?;
        let mut g = Graph::new();
        let nodes = self.unet.insert(&mut g);
        let pr = g.leaf(self.real_prompt.matrix.clone());
        let pf = g.leaf(self.forgery_prompt.matrix.clone());
        let zr = g.leaf(z_r.into_dyn());
        let zs = g.leaf(z_s.into_dyn());
        let lr = noise_pred_loss(&mut g, &self.unet, &nodes, &self.sched, zr, &draws.real, pr);
        let ls = noise_pred_loss(&mut g, &self.unet, &nodes, &self.sched, zs, &draws.synth, pf);
        let (loss_r, loss_s) = (g.scalar(lr), g.scalar(ls));
        let total = g.add(lr, ls);
        Ok((g, nodes, pr, pf, total, loss_r, loss_s))
    }

    /// One optimizer step on the prompt pair with the denoiser frozen.
    pub fn prompt_step_with_draws(
        &mut self,
        batch_real: &[RgbTensor],
        batch_synth: &[RgbTensor],
        draws: &PairDraws,
    ) -> Result<StepRecord, Stage1Error> {
        if self.phase != Stage1Phase::Prompt {
            return Err(Stage1Error::PhaseViolation {
                got: self.phase,
                expected: Stage1Phase::Prompt,
            });
        }
        let (g, _nodes, pr, pf, total, loss_r, loss_s) =
            self.paired_backward(batch_real, batch_synth, draws)?;
        let grads = g.backward(total);
        let g_pr = grads.get_or_zeros(pr, self.real_prompt.matrix.shape());
        let g_pf = grads.get_or_zeros(pf, self.forgery_prompt.matrix.shape());
        self.opt_prompts.step(
            &mut [
                &mut self.real_prompt.matrix,
                &mut self.forgery_prompt.matrix,
            ],
            &[Some(g_pr), Some(g_pf)],
        );
        Ok(self.record("prompt", loss_r, loss_s, draws))
    }

    /// One optimizer step on the denoiser with the prompts frozen.
    pub fn unet_step_with_draws(
        &mut self,
        batch_real: &[RgbTensor],
        batch_synth: &[RgbTensor],
        draws: &PairDraws,
    ) -> Result<StepRecord, Stage1Error> {
        if self.phase != Stage1Phase::Unet {
            return Err(Stage1Error::PhaseViolation {
                got: self.phase,
                expected: Stage1Phase::Unet,
            });
        }
        let (g, nodes, _pr, _pf, total, loss_r, loss_s) =
            self.paired_backward(batch_real, batch_synth, draws)?;
        let grads = g.backward(total);
        let param_grads: Vec<Option<Arr>> = {
            let params = self.unet.named_params();
            nodes
                .ids()
                .iter()
                .zip(params.iter())
                .map(|(id, (_, p))| Some(grads.get_or_zeros(*id, p.shape())))
                .collect()
        };
        let mut params_mut = self.unet.named_params_mut();
        let mut refs: Vec<&mut Arr> = params_mut.iter_mut().map(|(_, p)| &mut **p).collect();
        self.opt_unet.step(&mut refs, &param_grads);
        Ok(self.record("unet", loss_r, loss_s, draws))
    }

    pub fn prompt_step(
        &mut self,
        batch_real: &[RgbTensor],
        batch_synth: &[RgbTensor],
    ) -> Result<StepRecord, Stage1Error> {
        if batch_real.is_empty() || batch_synth.is_empty() {
            return Err(Stage1Error::EmptyBatch);
        }
        let z = self.encode(&batch_real[..1])?;
        let latent = self.latent_dims(&z);
        let draws = self.pair_draws_for_step(self.step, batch_real.len(), batch_synth.len(), latent);
        self.prompt_step_with_draws(batch_real, batch_synth, &draws)
    }

    pub fn unet_step(
        &mut self,
        batch_real: &[RgbTensor],
        batch_synth: &[RgbTensor],
    ) -> Result<StepRecord, Stage1Error> {
        if batch_real.is_empty() || batch_synth.is_empty() {
            return Err(Stage1Error::EmptyBatch);
        }
        let z = self.encode(&batch_real[..1])?;
        let latent = self.latent_dims(&z);
        let draws = self.pair_draws_for_step(self.step, batch_real.len(), batch_synth.len(), latent);
        self.unet_step_with_draws(batch_real, batch_synth, &draws)
    }

    fn record(&self, phase: &str, loss_r: f64, loss_s: f64, draws: &PairDraws) -> StepRecord {
        let mut rec = StepRecord::new(self.step, phase, loss_r + loss_s);
        rec.loss_real = Some(loss_r);
        rec.loss_synth = Some(loss_s);
        rec.t_real = draws.real.t.clone();
        rec.t_synth = draws.synth.t.clone();
        rec
    }

    pub fn prompts_checksum(&self) -> [u8; 32] {
        params_checksum([&self.real_prompt.matrix, &self.forgery_prompt.matrix])
    }

    pub fn unet_checksum(&self) -> [u8; 32] {
        params_checksum(self.unet.named_params().into_iter().map(|(_, p)| p))
    }

    // -- checkpointing ------------------------------------------------------

    pub(crate) fn meta(&self) -> Stage1Meta {
        Stage1Meta {
            cfg: self.cfg.clone(),
            ae_cfg: self.ae.cfg,
            latent_scale: self.ae.latent_scale,
            step: self.step,
            phase: self.phase,
            opt_prompts_t: self.opt_prompts.t,
            opt_unet_t: self.opt_unet.t,
            ema: self.ema,
            best_ema: self.best_ema.is_finite().then_some(self.best_ema),
            best_step: self.best_step,
        }
    }

    /// Write every stage-1 tensor (models, prompts, optimizer moments,
    /// schedule) into a checkpoint; shared with the stage-2 container.
    pub(crate) fn write_tensors(&self, ck: &mut Checkpoint) {
        ck.insert_all(
            self.unet
                .named_params()
                .into_iter()
                .map(|(n, p)| (n, p)),
        );
        ck.insert_all(self.ae.named_params().into_iter().map(|(n, p)| (n, p)));
        ck.insert("prompt.real", self.real_prompt.matrix.clone());
        ck.insert("prompt.forgery", self.forgery_prompt.matrix.clone());
        for (i, (m, v)) in self
            .opt_prompts
            .m
            .iter()
            .zip(self.opt_prompts.v.iter())
            .enumerate()
        {
            ck.insert(&format!("opt.prompts.m.{i}"), m.clone());
            ck.insert(&format!("opt.prompts.v.{i}"), v.clone());
        }
        for (i, (m, v)) in self.opt_unet.m.iter().zip(self.opt_unet.v.iter()).enumerate() {
            ck.insert(&format!("opt.unet.m.{i}"), m.clone());
            ck.insert(&format!("opt.unet.v.{i}"), v.clone());
        }
        ck.insert_vec("sched.beta", &self.sched.beta);
        ck.insert_vec("sched.alpha_bar", &self.sched.alpha_bar);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = self.meta();
        let mut ck = Checkpoint::new("stage1", &meta, self.cfg.seed, self.step);
        self.write_tensors(&mut ck);
        ck
    }

    /// Rebuild from tensors written by [`Stage1State::write_tensors`].
    pub(crate) fn read_tensors(ck: &Checkpoint, meta: Stage1Meta) -> Result<Self, Stage1Error> {
        let mut ae = Autoencoder::new(meta.ae_cfg, 0);
        ae.latent_scale = meta.latent_scale;
        for (name, p) in ae.named_params_mut() {
            *p = ck.tensor(&name)?.clone();
        }
        let mut state = Stage1State::new(meta.cfg, ae)?;
        for (name, p) in state.unet.named_params_mut() {
            *p = ck.tensor(&name)?.clone();
        }
        state.real_prompt.matrix = ck.tensor("prompt.real")?.clone();
        state.forgery_prompt.matrix = ck.tensor("prompt.forgery")?.clone();
        for i in 0..state.opt_prompts.m.len() {
            state.opt_prompts.m[i] = ck.tensor(&format!("opt.prompts.m.{i}"))?.clone();
            state.opt_prompts.v[i] = ck.tensor(&format!("opt.prompts.v.{i}"))?.clone();
        }
        for i in 0..state.opt_unet.m.len() {
            state.opt_unet.m[i] = ck.tensor(&format!("opt.unet.m.{i}"))?.clone();
            state.opt_unet.v[i] = ck.tensor(&format!("opt.unet.v.{i}"))?.clone();
        }
        state.sched = NoiseSchedule::from_parts(ck.vec("sched.beta")?, ck.vec("sched.alpha_bar")?);
        state.opt_prompts.t = meta.opt_prompts_t;
        state.opt_unet.t = meta.opt_unet_t;
        state.step = meta.step;
        state.phase = meta.phase;
        state.ema = meta.ema;
        state.best_ema = meta.best_ema.unwrap_or(f64::INFINITY);
        state.best_step = meta.best_step;
        Ok(state)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, Stage1Error> {
        ck.expect_kind("stage1")?;
        let meta: Stage1Meta = ck.meta()?;
        Self::read_tensors(ck, meta)
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub(crate) struct Stage1Meta {
    pub(crate) cfg: Stage1Config,
    pub(crate) ae_cfg: crate::diffusion::AeConfig,
    pub(crate) latent_scale: f64,
    pub(crate) step: u64,
    pub(crate) phase: Stage1Phase,
    pub(crate) opt_prompts_t: u64,
    pub(crate) opt_unet_t: u64,
    pub(crate) ema: Option<f64>,
    /// `None` encodes "no improvement yet" (+inf does not survive JSON).
    pub(crate) best_ema: Option<f64>,
    pub(crate) best_step: u64,
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn sample_batch_indices(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..len)).collect()
}

fn gather(images: &[RgbTensor], idx: &[usize]) -> Vec<RgbTensor> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

/// Alternate prompt and denoiser blocks until `max_steps` or an EMA plateau.
/// Returns the final state and the full step log. When `out_dir` is given,
/// checkpoints and the step log are written there.
pub fn run_stage1(
    cfg: Stage1Config,
    data_real: &[RgbTensor],
    data_synth: &[RgbTensor],
    ae: Autoencoder,
    state0: Option<Stage1State>,
    out_dir: Option<&Path>,
) -> Result<(Stage1State, Vec<StepRecord>), Stage1Error> {
    if data_real.is_empty() {
        return Err(Stage1Error::EmptyDataset("real".into()));
    }
    if data_synth.is_empty() {
        return Err(Stage1Error::EmptyDataset("synthetic".into()));
    }
    let mut state = match state0 {
        Some(s) => s,
        None => Stage1State::new(cfg.clone(), ae)?,
    };
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("stage1_steps.jsonl");
            Some(if state.step > 0 {
                StepLog::append_to(&path)?
            } else {
                StepLog::create(&path)?
            })
        }
        None => None,
    };
    let mut records = Vec::new();

    while state.step < cfg.max_steps {
        let step = state.step;
        state.phase = cfg.phase_for_step(step);
        let mut rng = derive_rng(cfg.seed, &[BATCH_TAG, step]);
        let br = gather(
            data_real,
            &sample_batch_indices(&mut rng, data_real.len(), cfg.batch_per_side),
        );
        let bs = gather(
            data_synth,
            &sample_batch_indices(&mut rng, data_synth.len(), cfg.batch_per_side),
        );
        let rec = match state.phase {
            Stage1Phase::Prompt => state.prompt_step(&br, &bs)?,
            Stage1Phase::Unet => state.unet_step(&br, &bs)?,
        };

        let ema = match state.ema {
            None => rec.loss,
            Some(e) => cfg.ema_decay * e + (1.0 - cfg.ema_decay) * rec.loss,
        };
        state.ema = Some(ema);
        if ema < state.best_ema - cfg.eps_stop {
            state.best_ema = ema;
            state.best_step = step;
        }
        if let Some(log) = log_file.as_mut() {
            log.push(&rec)?;
        }
        records.push(rec);
        state.step += 1;

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                state
                    .to_checkpoint()
                    .save(&dir.join(format!("stage1_{:06}.ckpt", state.step)))?;
            }
        }
        if step.saturating_sub(state.best_step) > cfg.patience {
            break;
        }
    }

    if let Some(log) = log_file.as_mut() {
        log.flush()?;
    }
    if let Some(dir) = out_dir {
        state.to_checkpoint().save(&dir.join("stage1_final.ckpt"))?;
    }
    Ok((state, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::UnetConfig;
    use ndarray::Array3;

    fn tiny_cfg() -> Stage1Config {
        Stage1Config {
            prompt_len: 3,
            unet: UnetConfig {
                in_channels: 3,
                base: 4,
                prompt_dim: 6,
                attn_dim: 4,
                time_dim: 4,
                timesteps: 10,
            },
            schedule_steps: 10,
            beta_min: 1e-4,
            beta_max: 0.05,
            lr_prompts: 1e-3,
            lr_unet: 1e-3,
            batch_per_side: 2,
            k_prompt: 1,
            k_unet: 1,
            max_steps: 10,
            patience: 10_000,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    fn tiny_images(seed: u64, n: usize) -> Vec<RgbTensor> {
        let mut rng = derive_rng(seed, &[77]);
        (0..n)
            .map(|_| {
                let mut img = Array3::zeros((3, 8, 8));
                for v in img.iter_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
                img
            })
            .collect()
    }

    #[test]
    fn init_prompts_contract() {
        let (r, f) = init_prompts(REAL_PROMPT_DEFAULT, FORGERY_PROMPT_DEFAULT, 8, 16, 0).unwrap();
        assert_eq!(r.matrix.shape(), &[8, 16]);
        assert_eq!(f.matrix.shape(), &[8, 16]);
        assert_ne!(r.matrix, f.matrix);
        assert_eq!(r.role, PromptRole::Real);

        let (r2, f2) = init_prompts(REAL_PROMPT_DEFAULT, FORGERY_PROMPT_DEFAULT, 8, 16, 0).unwrap();
        assert_eq!(r.matrix, r2.matrix);
        assert_eq!(f.matrix, f2.matrix);

        assert!(matches!(
            init_prompts("", "x", 8, 16, 0),
            Err(Stage1Error::EmptyString)
        ));
        assert!(matches!(
            init_prompts("a", "b", 0, 16, 0),
            Err(Stage1Error::BadDims { .. })
        ));
    }

    #[test]
    fn prompt_step_freezes_the_denoiser() {
        let mut state = Stage1State::new(tiny_cfg(), Autoencoder::identity()).unwrap();
        let real = tiny_images(1, 4);
        let synth = tiny_images(2, 4);
        let theta_before = state.unet_checksum();
        let prompts_before = state.prompts_checksum();
        let rec = state.prompt_step(&real[..2], &synth[..2]).unwrap();
        assert_eq!(state.unet_checksum(), theta_before);
        assert_ne!(state.prompts_checksum(), prompts_before);
        assert_eq!(rec.phase, "prompt");
        assert!(rec.loss > 0.0);
        assert_eq!(rec.t_real.len(), 2);
    }

    #[test]
    fn unet_step_freezes_the_prompts() {
        let mut state = Stage1State::new(tiny_cfg(), Autoencoder::identity()).unwrap();
        state.phase = Stage1Phase::Unet;
        let real = tiny_images(3, 4);
        let synth = tiny_images(4, 4);
        let prompts_before = state.prompts_checksum();
        let theta_before = state.unet_checksum();
        state.unet_step(&real[..2], &synth[..2]).unwrap();
        assert_eq!(state.prompts_checksum(), prompts_before);
        assert_ne!(state.unet_checksum(), theta_before);
    }

    #[test]
    fn phase_violations_and_empty_batches_error() {
        let mut state = Stage1State::new(tiny_cfg(), Autoencoder::identity()).unwrap();
        let imgs = tiny_images(5, 2);
        state.phase = Stage1Phase::Unet;
        assert!(matches!(
            state.prompt_step(&imgs, &imgs),
            Err(Stage1Error::PhaseViolation { .. })
        ));
        state.phase = Stage1Phase::Prompt;
        assert!(matches!(
            state.unet_step(&imgs, &imgs),
            Err(Stage1Error::PhaseViolation { .. })
        ));
        assert!(matches!(
            state.prompt_step(&[], &imgs),
            Err(Stage1Error::EmptyBatch)
        ));
    }

    #[test]
    fn zeroed_conditioning_leaves_prompts_bit_identical() {
        let mut state = Stage1State::new(tiny_cfg(), Autoencoder::identity()).unwrap();
        state.unet.zero_conditioning();
        let before = state.prompts_checksum();
        let real = tiny_images(6, 2);
        let synth = tiny_images(7, 2);
        state.prompt_step(&real, &synth).unwrap();
        assert_eq!(state.prompts_checksum(), before);
    }

    #[test]
    fn logged_loss_matches_recomputation_at_same_draws() {
        let mut state = Stage1State::new(tiny_cfg(), Autoencoder::identity()).unwrap();
        let real = tiny_images(8, 2);
        let synth = tiny_images(9, 2);
        let draws = state.pair_draws_for_step(0, 2, 2, (3, 8, 8));
        let (total, lr, ls) = state.pair_loss(&real, &synth, &draws).unwrap();
        let rec = state.prompt_step_with_draws(&real, &synth, &draws).unwrap();
        assert!((rec.loss - total).abs() <= 1e-12 * total.abs());
        assert_eq!(rec.loss_real, Some(lr));
        assert_eq!(rec.loss_synth, Some(ls));
    }

    #[test]
    fn run_produces_the_alternating_phase_log() {
        let real = tiny_images(10, 3);
        let synth = tiny_images(11, 3);
        let (state, records) = run_stage1(
            tiny_cfg(),
            &real,
            &synth,
            Autoencoder::identity(),
            None,
            None,
        )
        .unwrap();
        assert_eq!(state.step, 10);
        let phases: Vec<&str> = records.iter().map(|r| r.phase.as_str()).collect();
        assert_eq!(
            phases,
            vec!["prompt", "unet", "prompt", "unet", "prompt", "unet", "prompt", "unet", "prompt", "unet"]
        );
        // Fresh (t, eps) draws between consecutive steps.
        assert_ne!(records[0].t_real, records[2].t_real);
    }

    #[test]
    fn resume_replays_identical_losses() {
        let real = tiny_images(12, 3);
        let synth = tiny_images(13, 3);
        let cfg = tiny_cfg();
        let (_, full) = run_stage1(
            cfg.clone(),
            &real,
            &synth,
            Autoencoder::identity(),
            None,
            None,
        )
        .unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.max_steps = 5;
        let (half_state, _) = run_stage1(
            half_cfg,
            &real,
            &synth,
            Autoencoder::identity(),
            None,
            None,
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        half_state.to_checkpoint().save(&path).unwrap();
        let resumed = Stage1State::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(resumed.step, 5);

        let (_, tail) = run_stage1(
            cfg,
            &real,
            &synth,
            Autoencoder::identity(),
            Some(resumed),
            None,
        )
        .unwrap();
        assert_eq!(tail.len(), 5);
        for (a, b) in full[5..].iter().zip(tail.iter()) {
            assert_eq!(a.step, b.step);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
        }
    }
}
