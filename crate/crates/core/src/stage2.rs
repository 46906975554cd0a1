//! Forger network learning stage: realize synthetic seal images against the
//! stage-1 prompt prior, anchored by a multi-scale content loss, alternating
//! with adversarial finetuning of the prompts and the denoiser.

use crate::autodiff::{Arr, Graph, NodeId};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::diffusion::{ConvLayer as DiffConv, DiffusionError};
use crate::imgio::{stack_batch, RgbTensor};
use crate::nn::{conv_init, params_checksum, zeros, Adam};
use crate::rng::{derive_rng, fill_normal};
use crate::stage1::{
    noise_pred_loss, sample_noise_draws, NoiseDraws, Stage1Error, Stage1State,
};
use crate::steplog::{StepLog, StepRecord};
use ndarray::{Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

const DRAWS_TAG: u64 = 0x52a2_d0a7;
const BATCH_TAG: u64 = 0x52a2_ba7c;

#[derive(Debug, Error)]
pub enum Stage2Error {
    #[error("empty batch")]
    EmptyBatch,
    #[error("step called in phase {got:?}, expected {expected}")]
    PhaseViolation { got: Stage2Phase, expected: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("stage-1 state unavailable: {0}")]
    MissingStage1State(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Stage1(#[from] Stage1Error),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Forger network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgerConfig {
    pub channels: usize,
}

impl Default for ForgerConfig {
    fn default() -> Self {
        Self { channels: 16 }
    }
}

/// Image-to-image encoder/decoder with one skip connection and a
/// zero-initialized residual head, so training starts from the identity map
/// and the seal's position, size, and text are preserved at step 0.
#[derive(Debug, Clone)]
pub struct ForgerNet {
    pub cfg: ForgerConfig,
    conv_in: DiffConv,
    down: DiffConv,
    mid: DiffConv,
    up: DiffConv,
    fuse: DiffConv,
    head: DiffConv,
}

pub struct ForgerNodes {
    ids: Vec<NodeId>,
}

impl ForgerNet {
    pub fn new(cfg: ForgerConfig, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &[0xf0e9]);
        let g = cfg.channels;
        let conv = |rng: &mut ChaCha8Rng, cout: usize, cin: usize| DiffConv {
            w: conv_init(rng, cout, cin, 3, 3),
            b: zeros(&[cout]),
        };
        let head = DiffConv {
            w: zeros(&[3, g, 3, 3]),
            b: zeros(&[3]),
        };
        Self {
            cfg,
            conv_in: conv(&mut rng, g, 3),
            down: conv(&mut rng, 2 * g, g),
            mid: conv(&mut rng, 2 * g, 2 * g),
            up: conv(&mut rng, g, 2 * g),
            fuse: conv(&mut rng, g, 2 * g),
            head,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Arr)> {
        let mut out = Vec::new();
        for (name, l) in [
            ("forger.conv_in", &self.conv_in),
            ("forger.down", &self.down),
            ("forger.mid", &self.mid),
            ("forger.up", &self.up),
            ("forger.fuse", &self.fuse),
            ("forger.head", &self.head),
        ] {
            out.push((format!("{name}.w"), &l.w));
            out.push((format!("{name}.b"), &l.b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Arr)> {
        let mut out = Vec::new();
        for (name, l) in [
            ("forger.conv_in", &mut self.conv_in),
            ("forger.down", &mut self.down),
            ("forger.mid", &mut self.mid),
            ("forger.up", &mut self.up),
            ("forger.fuse", &mut self.fuse),
            ("forger.head", &mut self.head),
        ] {
            out.push((format!("{name}.w"), &mut l.w));
            out.push((format!("{name}.b"), &mut l.b));
        }
        out
    }

    pub fn insert(&self, g: &mut Graph) -> ForgerNodes {
        ForgerNodes {
            ids: self
                .named_params()
                .into_iter()
                .map(|(_, p)| g.leaf(p.clone()))
                .collect(),
        }
    }

    /// `clamp01(x + residual(x))` on the graph; `x` is `[B, 3, H, W]` with
    /// even spatial dims.
    pub fn forward_graph(&self, g: &mut Graph, nodes: &ForgerNodes, x: NodeId) -> NodeId {
        let p = &nodes.ids;
        let apply = |g: &mut Graph, wi: usize, x: NodeId, stride: usize| -> NodeId {
            let y = g.conv2d(x, p[wi], stride, 1);
            g.add_bias(y, p[wi + 1])
        };
        let e0 = apply(g, 0, x, 1);
        let e0 = g.silu(e0);
        let e1 = apply(g, 2, e0, 2);
        let e1 = g.silu(e1);
        let m = apply(g, 4, e1, 1);
        let m = g.silu(m);
        let u = g.upsample2x(m);
        let u = apply(g, 6, u, 1);
        let u = g.silu(u);
        let cat = g.concat_c(u, e0);
        let f = apply(g, 8, cat, 1);
        let f = g.silu(f);
        let r = apply(g, 10, f, 1);
        let sum = g.add(x, r);
        g.clamp01(sum)
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<(), Stage2Error> {
        if h % 2 != 0 || w % 2 != 0 || h < 4 || w < 4 {
            return Err(Stage2Error::ShapeMismatch(format!(
                "forger needs even spatial dims >= 4, got {h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn forge_batch(&self, images: &Array4<f64>) -> Result<Array4<f64>, Stage2Error> {
        let (_, c, h, w) = images.dim();
        if c != 3 {
            return Err(Stage2Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
        }
        self.check_dims(h, w)?;
        let mut g = Graph::inference();
        let nodes = self.insert(&mut g);
        let x = g.leaf(images.clone().into_dyn());
        let y = self.forward_graph(&mut g, &nodes, x);
        Ok(g.value(y).clone().into_dimensionality().unwrap())
    }

    /// Realize one synthetic image.
    pub fn forge(&self, image: &RgbTensor) -> Result<RgbTensor, Stage2Error> {
        let out = self.forge_batch(&stack_batch(std::slice::from_ref(image)))?;
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }
}

// ---------------------------------------------------------------------------
// Frozen feature pyramid + content loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidMode {
    /// Frozen random strided conv pyramid (desk-scale perceptual features).
    Random,
    /// Level 0 is the raw image; for the closed-form L2 oracle.
    IdentityDiagnostic,
}

/// Frozen 5-level feature extractor. Level `l` has spatial dims `input/2^l`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub mode: PyramidMode,
    /// Per-level weights, all >= 0 with a positive sum.
    pub weights: [f64; 5],
    pub channels: usize,
    pub seed: u64,
    convs: Vec<DiffConv>,
}

pub const PYRAMID_LEVELS: usize = 5;

impl FeaturePyramid {
    pub fn random(channels: usize, weights: [f64; 5], seed: u64) -> Result<Self, Stage2Error> {
        check_weights(&weights)?;
        let mut rng = derive_rng(seed, &[0xfea7]);
        let mut convs = Vec::with_capacity(PYRAMID_LEVELS);
        convs.push(DiffConv {
            w: conv_init(&mut rng, channels, 3, 3, 3),
            b: zeros(&[channels]),
        });
        for _ in 1..PYRAMID_LEVELS {
            convs.push(DiffConv {
                w: conv_init(&mut rng, channels, channels, 3, 3),
                b: zeros(&[channels]),
            });
        }
        Ok(Self {
            mode: PyramidMode::Random,
            weights,
            channels,
            seed,
            convs,
        })
    }

    /// Diagnostic: `phi^0 = identity`, weights `(1, 0, 0, 0, 0)`, so the
    /// content loss reduces to the plain L2 distance between the images.
    pub fn identity_diagnostic() -> Self {
        Self {
            mode: PyramidMode::IdentityDiagnostic,
            weights: [1.0, 0.0, 0.0, 0.0, 0.0],
            channels: 3,
            seed: 0,
            convs: Vec::new(),
        }
    }

    fn insert(&self, g: &mut Graph) -> Vec<(NodeId, NodeId)> {
        self.convs
            .iter()
            .map(|l| (g.leaf(l.w.clone()), g.leaf(l.b.clone())))
            .collect()
    }

    /// Feature maps at each level (graph nodes).
    fn features(
        &self,
        g: &mut Graph,
        nodes: &[(NodeId, NodeId)],
        x: NodeId,
    ) -> Vec<NodeId> {
        match self.mode {
            PyramidMode::IdentityDiagnostic => vec![x],
            PyramidMode::Random => {
                let mut out = Vec::with_capacity(PYRAMID_LEVELS);
                let mut h = x;
                for (l, (wn, bn)) in nodes.iter().enumerate() {
                    let stride = if l == 0 { 1 } else { 2 };
                    let y = g.conv2d(h, *wn, stride, 1);
                    let y = g.add_bias(y, *bn);
                    let y = g.silu(y);
                    out.push(y);
                    h = y;
                }
                out
            }
        }
    }

    /// Weighted sum over levels of per-sample L2 feature distances,
    /// averaged over the batch. Zero iff feature maps coincide; symmetric.
    pub fn content_loss_graph(&self, g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
        let nodes = self.insert(g);
        let fa = self.features(g, &nodes, a);
        let fb = self.features(g, &nodes, b);
        let mut total: Option<NodeId> = None;
        for (l, (na, nb)) in fa.into_iter().zip(fb).enumerate() {
            if self.weights[l] == 0.0 && self.mode == PyramidMode::Random {
                continue;
            }
            let diff = g.sub(na, nb);
            let n = g.norm2_rows_mean(diff);
            let n = g.scale(n, self.weights[l]);
            total = Some(match total {
                None => n,
                Some(t) => g.add(t, n),
            });
        }
        total.expect("at least one pyramid level")
    }

    pub fn named_params(&self) -> Vec<(String, &Arr)> {
        let mut out = Vec::new();
        for (i, l) in self.convs.iter().enumerate() {
            out.push((format!("pyramid.{i}.w"), &l.w));
            out.push((format!("pyramid.{i}.b"), &l.b));
        }
        out
    }

    pub fn checksum(&self) -> [u8; 32] {
        params_checksum(self.convs.iter().flat_map(|l| [&l.w, &l.b]))
    }
}

fn check_weights(weights: &[f64; 5]) -> Result<(), Stage2Error> {
    if weights.iter().any(|w| *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Stage2Error::Config(
            "pyramid weights must be nonnegative with a positive sum".into(),
        ));
    }
    Ok(())
}

/// Content loss between two equally shaped images (inference path).
pub fn content_loss(
    fx: &FeaturePyramid,
    img_a: &RgbTensor,
    img_b: &RgbTensor,
) -> Result<f64, Stage2Error> {
    if img_a.dim() != img_b.dim() {
        return Err(Stage2Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            img_a.dim(),
            img_b.dim()
        )));
    }
    let mut g = Graph::inference();
    let a = g.leaf(stack_batch(std::slice::from_ref(img_a)).into_dyn());
    let b = g.leaf(stack_batch(std::slice::from_ref(img_b)).into_dyn());
    let loss = fx.content_loss_graph(&mut g, a, b);
    Ok(g.scalar(loss))
}

// ---------------------------------------------------------------------------
// Stage-2 state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Phase {
    Warmup,
    Forger,
    Adversarial,
}

impl Stage2Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage2Phase::Warmup => "warmup",
            Stage2Phase::Forger => "forger",
            Stage2Phase::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub forger: ForgerConfig,
    pub pyramid_channels: usize,
    pub pyramid_weights: [f64; 5],
    pub pyramid_mode: PyramidMode,
    /// Content-loss weight `w` in the combined forger objective.
    pub content_weight: f64,
    pub lr_forger: f64,
    pub lr_adversarial: f64,
    pub batch: usize,
    pub warmup_steps: u64,
    pub k_forger: u64,
    pub k_adversarial: u64,
    pub max_steps: u64,
    pub ema_decay: f64,
    pub eps_stop: f64,
    pub patience: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            forger: ForgerConfig::default(),
            pyramid_channels: 8,
            pyramid_weights: [0.2; 5],
            pyramid_mode: PyramidMode::Random,
            content_weight: 1.0,
            lr_forger: 1e-4,
            lr_adversarial: 1e-4,
            batch: 4,
            warmup_steps: 500,
            k_forger: 100,
            k_adversarial: 100,
            max_steps: 3000,
            ema_decay: 0.99,
            eps_stop: 1e-3,
            patience: 500,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn phase_for_step(&self, step: u64) -> Stage2Phase {
        if step < self.warmup_steps {
            return Stage2Phase::Warmup;
        }
        let cycle = self.k_forger + self.k_adversarial;
        if cycle == 0 || (step - self.warmup_steps) % cycle < self.k_forger {
            Stage2Phase::Forger
        } else {
            Stage2Phase::Adversarial
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2State {
    pub cfg: Stage2Config,
    /// Stage-1 outputs: denoiser, prompts, frozen autoencoder, schedule.
    pub stage1: Stage1State,
    pub forger: ForgerNet,
    pub pyramid: FeaturePyramid,
    pub opt_forger: Adam,
    /// Joint group over the denoiser and both prompt matrices.
    pub opt_adversarial: Adam,
    pub step: u64,
    pub phase: Stage2Phase,
    pub ema: Option<f64>,
    pub best_ema: f64,
    pub best_step: u64,
}

impl Stage2State {
    pub fn new(cfg: Stage2Config, stage1: Stage1State) -> Result<Self, Stage2Error> {
        let forger = ForgerNet::new(cfg.forger, cfg.seed);
        let pyramid = match cfg.pyramid_mode {
            PyramidMode::Random => {
                FeaturePyramid::random(cfg.pyramid_channels, cfg.pyramid_weights, cfg.seed)?
            }
            PyramidMode::IdentityDiagnostic => FeaturePyramid::identity_diagnostic(),
        };
        let opt_forger = {
            let params: Vec<&Arr> = forger.named_params().into_iter().map(|(_, p)| p).collect();
            Adam::for_params(cfg.lr_forger, &params)
        };
        let opt_adversarial = {
            let mut params: Vec<&Arr> = stage1
                .unet
                .named_params()
                .into_iter()
                .map(|(_, p)| p)
                .collect();
            params.push(&stage1.real_prompt.matrix);
            params.push(&stage1.forgery_prompt.matrix);
            Adam::for_params(cfg.lr_adversarial, &params)
        };
        let phase = cfg.phase_for_step(0);
        Ok(Self {
            cfg,
            stage1,
            forger,
            pyramid,
            opt_forger,
            opt_adversarial,
            step: 0,
            phase,
            ema: None,
            best_ema: f64::INFINITY,
            best_step: 0,
        })
    }

    pub fn forger_checksum(&self) -> [u8; 32] {
        params_checksum(self.forger.named_params().into_iter().map(|(_, p)| p))
    }

    /// Checksum over the adversarial group {denoiser, both prompts}.
    pub fn adversarial_group_checksum(&self) -> [u8; 32] {
        let mut params: Vec<&Arr> = self
            .stage1
            .unet
            .named_params()
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        params.push(&self.stage1.real_prompt.matrix);
        params.push(&self.stage1.forgery_prompt.matrix);
        params_checksum(params)
    }

    fn latent_dims_for(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let f = self.stage1.ae.cfg.factor;
        (self.stage1.ae.cfg.latent_channels, h / f, w / f)
    }

    pub fn draws_for_step(&self, step: u64, n: usize, latent: (usize, usize, usize)) -> NoiseDraws {
        let mut rng = derive_rng(self.cfg.seed, &[DRAWS_TAG, step]);
        sample_noise_draws(&mut rng, n, latent, self.stage1.sched.steps())
    }

    /// Prompt-prior loss of a synthetic batch at the given draws: the forged
    /// images are scored by the denoiser under the REAL prompt. Pure
    /// evaluation (inference graph).
    pub fn prior_loss_at(
        &self,
        batch_synth: &[RgbTensor],
        draws: &NoiseDraws,
    ) -> Result<f64, Stage2Error> {
        if batch_synth.is_empty() {
            return Err(Stage2Error::EmptyBatch);
        }
        let mut g = Graph::inference();
        let (loss, _, _) = self.prior_loss_graph(&mut g, batch_synth, draws)?;
        Ok(g.scalar(loss))
    }

    /// Prompt-prior loss with caller-supplied RNG (samples fresh draws).
    pub fn prior_loss(
        &self,
        batch_synth: &[RgbTensor],
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, Stage2Error> {
        if batch_synth.is_empty() {
            return Err(Stage2Error::EmptyBatch);
        }
        let (_, h, w) = batch_synth[0].dim();
        let latent = self.latent_dims_for(h, w);
        let draws = sample_noise_draws(rng, batch_synth.len(), latent, self.stage1.sched.steps());
        self.prior_loss_at(batch_synth, &draws)
    }

    /// Prior loss of raw images (no forger), for before/after probes.
    pub fn prior_loss_raw_at(
        &self,
        batch: &[RgbTensor],
        draws: &NoiseDraws,
    ) -> Result<f64, Stage2Error> {
        if batch.is_empty() {
            return Err(Stage2Error::EmptyBatch);
        }
        let z0 = self.stage1.ae.encode_batch(&stack_batch(batch))?;
        let mut g = Graph::inference();
        let nodes = self.stage1.unet.insert(&mut g);
        let prompt = g.leaf(self.stage1.real_prompt.matrix.clone());
        let z = g.leaf(z0.into_dyn());
        let loss = noise_pred_loss(
            &mut g,
            &self.stage1.unet,
            &nodes,
            &self.stage1.sched,
            z,
            draws,
            prompt,
        );
        Ok(g.scalar(loss))
    }

    /// Shared builder: forge -> encode -> noise-prediction loss under the
    /// real prompt. Returns (loss node, forger nodes, forged image node).
    fn prior_loss_graph(
        &self,
        g: &mut Graph,
        batch_synth: &[RgbTensor],
        draws: &NoiseDraws,
    ) -> Result<(NodeId, ForgerNodes, NodeId), Stage2Error> {
        let (_, h, w) = batch_synth[0].dim();
        self.forger.check_dims(h, w)?;
        let x = g.leaf(stack_batch(batch_synth).into_dyn());
        let f_nodes = self.forger.insert(g);
        let forged = self.forger.forward_graph(g, &f_nodes, x);
        let ae_nodes = self.stage1.ae.insert(g);
        let z0 = self.stage1.ae.encode_graph(g, &ae_nodes, forged);
        let unet_nodes = self.stage1.unet.insert(g);
        let prompt = g.leaf(self.stage1.real_prompt.matrix.clone());
        let loss = noise_pred_loss(
            g,
            &self.stage1.unet,
            &unet_nodes,
            &self.stage1.sched,
            z0,
            draws,
            prompt,
        );
        Ok((loss, f_nodes, forged))
    }

    /// One optimizer step on the forger. Warmup optimizes the content loss
    /// alone; the forger phase optimizes `prior + w * content`. Only the
    /// forger parameters move.
    pub fn forger_step_with_draws(
        &mut self,
        batch_synth: &[RgbTensor],
        draws: &NoiseDraws,
    ) -> Result<StepRecord, Stage2Error> {
        if !matches!(self.phase, Stage2Phase::Warmup | Stage2Phase::Forger) {
            return Err(Stage2Error::PhaseViolation {
                got: self.phase,
                expected: "warmup|forger".into(),
            });
        }
        if batch_synth.is_empty() {
            return Err(Stage2Error::EmptyBatch);
        }

        let mut g = Graph::new();
        let (prior, f_nodes, forged) = self.prior_loss_graph(&mut g, batch_synth, draws)?;
        let x_orig = g.leaf(stack_batch(batch_synth).into_dyn());
        let content = self.pyramid.content_loss_graph(&mut g, forged, x_orig);
        let (prior_v, content_v) = (g.scalar(prior), g.scalar(content));

        let (loss_id, loss_v) = match self.phase {
            Stage2Phase::Warmup => (content, content_v),
            Stage2Phase::Forger => {
                let wc = g.scale(content, self.cfg.content_weight);
                let total = g.add(prior, wc);
                (total, g.scalar(total))
            }
            Stage2Phase::Adversarial => unreachable!(),
        };

        let grads = g.backward(loss_id);
        let param_grads: Vec<Option<Arr>> = {
            let params = self.forger.named_params();
            f_nodes
                .ids
                .iter()
                .zip(params.iter())
                .map(|(id, (_, p))| Some(grads.get_or_zeros(*id, p.shape())))
                .collect()
        };
        let mut params_mut = self.forger.named_params_mut();
        let mut refs: Vec<&mut Arr> = params_mut.iter_mut().map(|(_, p)| &mut **p).collect();
        self.opt_forger.step(&mut refs, &param_grads);

        let mut rec = StepRecord::new(self.step, self.phase.as_str(), loss_v);
        rec.loss_prior = Some(prior_v);
        rec.loss_content = Some(content_v);
        rec.t_real = draws.t.clone();
        rec.prompt_role = Some("real".into());
        Ok(rec)
    }

    pub fn forger_step(&mut self, batch_synth: &[RgbTensor]) -> Result<StepRecord, Stage2Error> {
        if batch_synth.is_empty() {
            return Err(Stage2Error::EmptyBatch);
        }
        let (_, h, w) = batch_synth[0].dim();
        let latent = self.latent_dims_for(h, w);
        let draws = self.draws_for_step(self.step, batch_synth.len(), latent);
        self.forger_step_with_draws(batch_synth, &draws)
    }

    /// One optimizer step on {denoiser, both prompts}: real images under the
    /// real prompt, forged images (constants, no forger gradient) under the
    /// forgery prompt. The forger is untouched.
    pub fn adversarial_step_with_draws(
        &mut self,
        batch_real: &[RgbTensor],
        batch_forged: &[RgbTensor],
        draws_real: &NoiseDraws,
        draws_forged: &NoiseDraws,
    ) -> Result<StepRecord, Stage2Error> {
        if self.phase != Stage2Phase::Adversarial {
            return Err(Stage2Error::PhaseViolation {
                got: self.phase,
                expected: "adversarial".into(),
            });
        }
        if batch_real.is_empty() || batch_forged.is_empty() {
            return Err(Stage2Error::EmptyBatch);
        }
        let z_r = self.stage1.ae.encode_batch(&stack_batch(batch_real))?;
        let z_f = self.stage1.ae.encode_batch(&stack_batch(batch_forged))?;

        let mut g = Graph::new();
        let nodes = self.stage1.unet.insert(&mut g);
        let pr = g.leaf(self.stage1.real_prompt.matrix.clone());
        let pf = g.leaf(self.stage1.forgery_prompt.matrix.clone());
        let zr = g.leaf(z_r.into_dyn());
        let zf = g.leaf(z_f.into_dyn());
        let lr = noise_pred_loss(
            &mut g,
            &self.stage1.unet,
            &nodes,
            &self.stage1.sched,
            zr,
            draws_real,
            pr,
        );
        let lf = noise_pred_loss(
            &mut g,
            &self.stage1.unet,
            &nodes,
            &self.stage1.sched,
            zf,
            draws_forged,
            pf,
        );
        let (loss_r, loss_f) = (g.scalar(lr), g.scalar(lf));
        let total = g.add(lr, lf);
        let grads = g.backward(total);

        let mut param_grads: Vec<Option<Arr>> = {
            let params = self.stage1.unet.named_params();
            nodes
                .ids()
                .iter()
                .zip(params.iter())
                .map(|(id, (_, p))| Some(grads.get_or_zeros(*id, p.shape())))
                .collect()
        };
        param_grads.push(Some(
            grads.get_or_zeros(pr, self.stage1.real_prompt.matrix.shape()),
        ));
        param_grads.push(Some(
            grads.get_or_zeros(pf, self.stage1.forgery_prompt.matrix.shape()),
        ));

        let mut params_mut = self.stage1.unet.named_params_mut();
        let mut refs: Vec<&mut Arr> = params_mut.iter_mut().map(|(_, p)| &mut **p).collect();
        refs.push(&mut self.stage1.real_prompt.matrix);
        refs.push(&mut self.stage1.forgery_prompt.matrix);
        self.opt_adversarial.step(&mut refs, &param_grads);

        let mut rec = StepRecord::new(self.step, "adversarial", loss_r + loss_f);
        rec.loss_real = Some(loss_r);
        rec.loss_synth = Some(loss_f);
        rec.t_real = draws_real.t.clone();
        rec.t_synth = draws_forged.t.clone();
        Ok(rec)
    }

    pub fn adversarial_step(
        &mut self,
        batch_real: &[RgbTensor],
        batch_forged: &[RgbTensor],
    ) -> Result<StepRecord, Stage2Error> {
        if batch_real.is_empty() || batch_forged.is_empty() {
            return Err(Stage2Error::EmptyBatch);
        }
        let (_, h, w) = batch_real[0].dim();
        let latent = self.latent_dims_for(h, w);
        let mut rng = derive_rng(self.cfg.seed, &[DRAWS_TAG, self.step]);
        let dr = sample_noise_draws(&mut rng, batch_real.len(), latent, self.stage1.sched.steps());
        let df = sample_noise_draws(
            &mut rng,
            batch_forged.len(),
            latent,
            self.stage1.sched.steps(),
        );
        self.adversarial_step_with_draws(batch_real, batch_forged, &dr, &df)
    }

    // -- checkpointing ------------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = Stage2Meta {
            cfg: self.cfg.clone(),
            stage1: self.stage1.meta(),
            opt_forger_t: self.opt_forger.t,
            opt_adversarial_t: self.opt_adversarial.t,
            step: self.step,
            phase: self.phase,
            ema: self.ema,
            best_ema: self.best_ema.is_finite().then_some(self.best_ema),
            best_step: self.best_step,
        };
        let mut ck = Checkpoint::new("stage2", &meta, self.cfg.seed, self.step);
        self.stage1.write_tensors(&mut ck);
        ck.insert_all(self.forger.named_params().into_iter().map(|(n, p)| (n, p)));
        ck.insert_all(self.pyramid.named_params().into_iter().map(|(n, p)| (n, p)));
        for (i, (m, v)) in self
            .opt_forger
            .m
            .iter()
            .zip(self.opt_forger.v.iter())
            .enumerate()
        {
            ck.insert(&format!("opt.forger.m.{i}"), m.clone());
            ck.insert(&format!("opt.forger.v.{i}"), v.clone());
        }
        for (i, (m, v)) in self
            .opt_adversarial
            .m
            .iter()
            .zip(self.opt_adversarial.v.iter())
            .enumerate()
        {
            ck.insert(&format!("opt.adv.m.{i}"), m.clone());
            ck.insert(&format!("opt.adv.v.{i}"), v.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, Stage2Error> {
        ck.expect_kind("stage2")?;
        let meta: Stage2Meta = ck.meta()?;
        let stage1 = Stage1State::read_tensors(ck, meta.stage1)
            .map_err(|e| Stage2Error::MissingStage1State(e.to_string()))?;
        let mut state = Stage2State::new(meta.cfg, stage1)?;
        for (name, p) in state.forger.named_params_mut() {
            *p = ck.tensor(&name)?.clone();
        }
        if state.pyramid.mode == PyramidMode::Random {
            for (i, l) in state.pyramid.convs.iter_mut().enumerate() {
                l.w = ck.tensor(&format!("pyramid.{i}.w"))?.clone();
                l.b = ck.tensor(&format!("pyramid.{i}.b"))?.clone();
            }
        }
        for i in 0..state.opt_forger.m.len() {
            state.opt_forger.m[i] = ck.tensor(&format!("opt.forger.m.{i}"))?.clone();
            state.opt_forger.v[i] = ck.tensor(&format!("opt.forger.v.{i}"))?.clone();
        }
        for i in 0..state.opt_adversarial.m.len() {
            state.opt_adversarial.m[i] = ck.tensor(&format!("opt.adv.m.{i}"))?.clone();
            state.opt_adversarial.v[i] = ck.tensor(&format!("opt.adv.v.{i}"))?.clone();
        }
        state.opt_forger.t = meta.opt_forger_t;
        state.opt_adversarial.t = meta.opt_adversarial_t;
        state.step = meta.step;
        state.phase = meta.phase;
        state.ema = meta.ema;
        state.best_ema = meta.best_ema.unwrap_or(f64::INFINITY);
        state.best_step = meta.best_step;
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct Stage2Meta {
    cfg: Stage2Config,
    stage1: crate::stage1::Stage1Meta,
    opt_forger_t: u64,
    opt_adversarial_t: u64,
    step: u64,
    phase: Stage2Phase,
    ema: Option<f64>,
    best_ema: Option<f64>,
    best_step: u64,
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Warmup (content only), then alternating forger / adversarial blocks until
/// `max_steps` or an EMA plateau of the forger objective.
pub fn run_stage2(
    cfg: Stage2Config,
    data_synth: &[RgbTensor],
    data_real: &[RgbTensor],
    stage1: Stage1State,
    state0: Option<Stage2State>,
    out_dir: Option<&Path>,
) -> Result<(Stage2State, Vec<StepRecord>), Stage2Error> {
    if data_synth.is_empty() {
        return Err(Stage2Error::EmptyDataset("synthetic".into()));
    }
    if data_real.is_empty() {
        return Err(Stage2Error::EmptyDataset("real".into()));
    }
    let mut state = match state0 {
        Some(s) => s,
        None => Stage2State::new(cfg.clone(), stage1)?,
    };
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("stage2_steps.jsonl");
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
        let pick = |rng: &mut ChaCha8Rng, data: &[RgbTensor], n: usize| -> Vec<RgbTensor> {
            (0..n).map(|_| data[rng.gen_range(0..data.len())].clone()).collect()
        };
        let rec = match state.phase {
            Stage2Phase::Warmup | Stage2Phase::Forger => {
                let bs = pick(&mut rng, data_synth, cfg.batch);
                state.forger_step(&bs)?
            }
            Stage2Phase::Adversarial => {
                let br = pick(&mut rng, data_real, cfg.batch);
                let bs = pick(&mut rng, data_synth, cfg.batch);
                // Forged inputs refreshed from the current forger each step,
                // detached from the forger's parameters.
                let forged = state.forger.forge_batch(&stack_batch(&bs))?;
                let forged_vec: Vec<RgbTensor> = (0..forged.dim().0)
                    .map(|i| forged.index_axis(Axis(0), i).to_owned())
                    .collect();
                state.adversarial_step(&br, &forged_vec)?
            }
        };

        // The plateau criterion tracks the forger objective only.
        if state.phase != Stage2Phase::Adversarial {
            let ema = match state.ema {
                None => rec.loss,
                Some(e) => cfg.ema_decay * e + (1.0 - cfg.ema_decay) * rec.loss,
            };
            state.ema = Some(ema);
            if ema < state.best_ema - cfg.eps_stop {
                state.best_ema = ema;
                state.best_step = step;
            }
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
                    .save(&dir.join(format!("stage2_{:06}.ckpt", state.step)))?;
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
        state.to_checkpoint().save(&dir.join("stage2_final.ckpt"))?;
    }
    Ok((state, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Autoencoder, UnetConfig};
    use crate::stage1::Stage1Config;
    use ndarray::Array3;

    fn tiny_stage1() -> Stage1State {
        let cfg = Stage1Config {
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
            ..Default::default()
        };
        Stage1State::new(cfg, Autoencoder::identity()).unwrap()
    }

    fn tiny_cfg() -> Stage2Config {
        Stage2Config {
            forger: ForgerConfig { channels: 4 },
            pyramid_channels: 4,
            content_weight: 0.5,
            lr_forger: 1e-3,
            lr_adversarial: 1e-3,
            batch: 2,
            warmup_steps: 5,
            k_forger: 3,
            k_adversarial: 2,
            max_steps: 15,
            patience: 10_000,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    fn tiny_images(seed: u64, n: usize) -> Vec<RgbTensor> {
        let mut rng = derive_rng(seed, &[88]);
        (0..n)
            .map(|_| {
                let mut img = Array3::zeros((3, 8, 8));
                for v in img.iter_mut() {
                    *v = rng.gen_range(0.05..0.95);
                }
                img
            })
            .collect()
    }

    #[test]
    fn fresh_forger_is_the_identity() {
        let forger = ForgerNet::new(ForgerConfig { channels: 4 }, 1);
        let img = &tiny_images(1, 1)[0];
        let out = forger.forge(img).unwrap();
        assert_eq!(&out, img);
    }

    #[test]
    fn forger_output_stays_in_range() {
        let mut forger = ForgerNet::new(ForgerConfig { channels: 4 }, 2);
        // Randomize the head so the residual actually acts.
        let mut rng = derive_rng(3, &[4]);
        for (_, p) in forger.named_params_mut() {
            fill_normal(&mut rng, p.as_slice_mut().unwrap());
        }
        let img = &tiny_images(5, 1)[0];
        let out = forger.forge(img).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(&out, img);
    }

    #[test]
    fn forger_rejects_odd_dims() {
        let forger = ForgerNet::new(ForgerConfig { channels: 4 }, 1);
        let img = Array3::<f64>::zeros((3, 7, 8));
        assert!(matches!(
            forger.forge(&img),
            Err(Stage2Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn content_loss_is_a_pseudometric() {
        let fx = FeaturePyramid::random(4, [0.2; 5], 9).unwrap();
        let imgs = tiny_images(6, 2);
        let (a, b) = (&imgs[0], &imgs[1]);
        assert_eq!(content_loss(&fx, a, a).unwrap(), 0.0);
        let ab = content_loss(&fx, a, b).unwrap();
        let ba = content_loss(&fx, b, a).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn identity_mode_equals_plain_l2() {
        let fx = FeaturePyramid::identity_diagnostic();
        let imgs = tiny_images(7, 2);
        let (a, b) = (&imgs[0], &imgs[1]);
        let got = content_loss(&fx, a, b).unwrap();
        let want = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((got - want).abs() / want < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn zeroed_denoiser_gives_zero_prior_loss_for_any_forger() {
        let mut s1 = tiny_stage1();
        for (_, p) in s1.unet.named_params_mut() {
            p.fill(0.0);
        }
        let mut state = Stage2State::new(tiny_cfg(), s1).unwrap();
        let batch = tiny_images(8, 2);
        let latent = (3, 8, 8);
        let mut draws = state.draws_for_step(0, 2, latent);
        draws.eps.fill(0.0);
        let l0 = state.prior_loss_at(&batch, &draws).unwrap();
        assert_eq!(l0, 0.0);
        // Change the forger: the oracle denoiser still matches the noise.
        let mut rng = derive_rng(9, &[1]);
        for (_, p) in state.forger.named_params_mut() {
            fill_normal(&mut rng, p.as_slice_mut().unwrap());
        }
        assert_eq!(state.prior_loss_at(&batch, &draws).unwrap(), 0.0);
    }

    #[test]
    fn prior_loss_uses_the_real_prompt() {
        let state = Stage2State::new(tiny_cfg(), tiny_stage1()).unwrap();
        let batch = tiny_images(10, 2);
        let draws = state.draws_for_step(0, 2, (3, 8, 8));
        let with_real = state.prior_loss_at(&batch, &draws).unwrap();
        // Swap prompts and recompute: the value must change.
        let mut swapped = state.clone();
        std::mem::swap(
            &mut swapped.stage1.real_prompt.matrix,
            &mut swapped.stage1.forgery_prompt.matrix,
        );
        let with_fake = swapped.prior_loss_at(&batch, &draws).unwrap();
        assert_ne!(with_real, with_fake);
    }

    #[test]
    fn forger_step_only_moves_the_forger() {
        let mut state = Stage2State::new(tiny_cfg(), tiny_stage1()).unwrap();
        let batch = tiny_images(11, 2);
        let adv_before = state.adversarial_group_checksum();
        let pyr_before = state.pyramid.checksum();
        let forger_before = state.forger_checksum();
        state.phase = Stage2Phase::Forger;
        state.forger_step(&batch).unwrap();
        assert_eq!(state.adversarial_group_checksum(), adv_before);
        assert_eq!(state.pyramid.checksum(), pyr_before);
        assert_ne!(state.forger_checksum(), forger_before);
    }

    #[test]
    fn warmup_at_identity_init_is_a_fixed_point() {
        // Content loss is exactly zero at the identity-initialized forger,
        // so the warmup subgradient vanishes and nothing moves.
        let mut state = Stage2State::new(tiny_cfg(), tiny_stage1()).unwrap();
        let batch = tiny_images(11, 2);
        let forger_before = state.forger_checksum();
        state.phase = Stage2Phase::Warmup;
        let rec = state.forger_step(&batch).unwrap();
        assert_eq!(rec.loss, 0.0);
        assert_eq!(state.forger_checksum(), forger_before);
    }

    #[test]
    fn forger_phase_total_decomposes_exactly() {
        let mut state = Stage2State::new(tiny_cfg(), tiny_stage1()).unwrap();
        state.phase = Stage2Phase::Forger;
        let batch = tiny_images(12, 2);
        let rec = state.forger_step(&batch).unwrap();
        let total = rec.loss_prior.unwrap() + state.cfg.content_weight * rec.loss_content.unwrap();
        assert!((rec.loss - total).abs() <= f64::EPSILON * total.abs().max(1.0));
        assert_eq!(rec.prompt_role.as_deref(), Some("real"));

        // Degenerate weight: the logged total equals the prior exactly.
        let mut state0 = Stage2State::new(
            Stage2Config {
                content_weight: 0.0,
                ..tiny_cfg()
            },
            tiny_stage1(),
        )
        .unwrap();
        state0.phase = Stage2Phase::Forger;
        let rec0 = state0.forger_step(&batch).unwrap();
        assert_eq!(rec0.loss.to_bits(), rec0.loss_prior.unwrap().to_bits());
    }

    #[test]
    fn adversarial_step_freezes_the_forger() {
        let mut state = Stage2State::new(tiny_cfg(), tiny_stage1()).unwrap();
        state.phase = Stage2Phase::Adversarial;
        let real = tiny_images(13, 2);
        let forged = tiny_images(14, 2);
        let forger_before = state.forger_checksum();
        let adv_before = state.adversarial_group_checksum();
        state.adversarial_step(&real, &forged).unwrap();
        assert_eq!(state.forger_checksum(), forger_before);
        assert_ne!(state.adversarial_group_checksum(), adv_before);
    }

    #[test]
    fn adversarial_terms_are_symmetric_under_equal_inputs() {
        let mut state = Stage2State::new(tiny_cfg(), tiny_stage1()).unwrap();
        state.phase = Stage2Phase::Adversarial;
        state.stage1.forgery_prompt.matrix = state.stage1.real_prompt.matrix.clone();
        let batch = tiny_images(15, 2);
        let draws = state.draws_for_step(3, 2, (3, 8, 8));
        let rec = state
            .adversarial_step_with_draws(&batch, &batch, &draws, &draws)
            .unwrap();
        assert_eq!(
            rec.loss_real.unwrap().to_bits(),
            rec.loss_synth.unwrap().to_bits()
        );
    }

    #[test]
    fn phase_violations_error() {
        let mut state = Stage2State::new(tiny_cfg(), tiny_stage1()).unwrap();
        let batch = tiny_images(16, 2);
        state.phase = Stage2Phase::Adversarial;
        assert!(matches!(
            state.forger_step(&batch),
            Err(Stage2Error::PhaseViolation { .. })
        ));
        state.phase = Stage2Phase::Forger;
        assert!(matches!(
            state.adversarial_step(&batch, &batch),
            Err(Stage2Error::PhaseViolation { .. })
        ));
        state.phase = Stage2Phase::Warmup;
        assert!(matches!(
            state.forger_step(&[]),
            Err(Stage2Error::EmptyBatch)
        ));
    }

    #[test]
    fn run_produces_the_documented_phase_schedule() {
        let synth = tiny_images(17, 3);
        let real = tiny_images(18, 3);
        let (state, records) =
            run_stage2(tiny_cfg(), &synth, &real, tiny_stage1(), None, None).unwrap();
        assert_eq!(state.step, 15);
        let phases: Vec<&str> = records.iter().map(|r| r.phase.as_str()).collect();
        let mut want = vec!["warmup"; 5];
        want.extend(["forger"; 3]);
        want.extend(["adversarial"; 2]);
        want.extend(["forger"; 3]);
        want.extend(["adversarial"; 2]);
        assert_eq!(phases, want);
    }

    #[test]
    fn run_is_deterministic_and_checkpoint_round_trips() {
        let synth = tiny_images(19, 3);
        let real = tiny_images(20, 3);
        let (a, ra) = run_stage2(tiny_cfg(), &synth, &real, tiny_stage1(), None, None).unwrap();
        let (b, rb) = run_stage2(tiny_cfg(), &synth, &real, tiny_stage1(), None, None).unwrap();
        for (x, y) in ra.iter().zip(rb.iter()) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        assert_eq!(a.forger_checksum(), b.forger_checksum());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s2.ckpt");
        a.to_checkpoint().save(&path).unwrap();
        let back = Stage2State::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back.forger_checksum(), a.forger_checksum());
        assert_eq!(
            back.adversarial_group_checksum(),
            a.adversarial_group_checksum()
        );
        assert_eq!(back.step, a.step);
    }
}
