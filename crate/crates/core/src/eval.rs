//! Downstream task harness: seal segmentation, authenticity identification,
//! and legend recognition, each with a small fixed baseline model, plus the
//! two-dataset comparison report.

use crate::autodiff::{Arr, Graph, NodeId};
use crate::config::SynthConfig;
use crate::dataset::{load_entry, DatasetError, LoadedSample, Manifest, Split};
use crate::diffusion::ConvLayer;
use crate::imgio::{stack_batch, RgbTensor};
use crate::nn::{conv_init, linear_init, zeros, Adam};
use crate::rng::derive_rng;
use crate::seal::PixelRect;
use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("class has no samples: {0}")]
    ClassMissing(String),
    #[error("training manifests differ in size: {traditional} vs {realized}")]
    SizeMismatch { traditional: usize, realized: usize },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A manifest plus the directory its paths are relative to.
#[derive(Clone, Copy)]
pub struct DatasetRef<'a> {
    pub manifest: &'a Manifest,
    pub base: &'a Path,
}

impl<'a> DatasetRef<'a> {
    pub fn new(manifest: &'a Manifest, base: &'a Path) -> Self {
        Self { manifest, base }
    }

    fn load_labeled(&self, split: Option<Split>) -> Result<Vec<LoadedSample>, EvalError> {
        let mut out = Vec::new();
        for e in &self.manifest.entries {
            if split.is_some_and(|s| e.split != s) {
                continue;
            }
            if !e.is_labeled() {
                return Err(EvalError::MissingLabels(format!("entry {}", e.id)));
            }
            out.push(load_entry(self.base, e)?);
        }
        Ok(out)
    }

    fn load_all(&self, split: Option<Split>) -> Result<Vec<LoadedSample>, EvalError> {
        let mut out = Vec::new();
        for e in &self.manifest.entries {
            if split.is_some_and(|s| e.split != s) {
                continue;
            }
            out.push(load_entry(self.base, e)?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Base channel width of the downstream models.
    pub channels: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Fraction held out for testing when one manifest provides both sides.
    pub holdout: f64,
    /// Plumbing check: the predictor returns ground truth.
    pub oracle_injection: bool,
    /// Null control: training labels are shuffled.
    pub shuffle_labels: bool,
    pub recognition: RecognitionConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            steps: 300,
            batch: 8,
            lr: 3e-3,
            holdout: 0.3,
            oracle_injection: false,
            shuffle_labels: false,
            recognition: RecognitionConfig::default(),
        }
    }
}

/// Desk-scale word recognition is fixed-grid character classification: the
/// legend band is polar-unwarped into one cell per character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognitionConfig {
    pub alphabet: String,
    pub legend_len: usize,
    /// Must match the generator's (fixed) arc span.
    pub arc_span_deg: f64,
    pub radial_bins: usize,
    pub angular_bins_per_char: usize,
    /// Radial band sampled, as fractions of the bbox half-extent.
    pub band: (f64, f64),
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        Self {
            alphabet: "ABCDEFGHIJKLMNOPQRSTUVWXYZ".into(),
            legend_len: 6,
            arc_span_deg: 300.0,
            radial_bins: 8,
            angular_bins_per_char: 8,
            band: (0.40, 0.95),
        }
    }
}

/// Synth config pinned for the recognition benchmark: fixed-length legends,
/// exact arc span, no warp (the unwarp grid must align with the renderer).
pub fn recognition_benchmark_config(rec: &RecognitionConfig, pool_size: usize, seed: u64) -> SynthConfig {
    let mut rng = derive_rng(seed, &[0x7e57_9001]);
    let chars: Vec<char> = rec.alphabet.chars().collect();
    let pool: Vec<String> = (0..pool_size.max(1))
        .map(|_| {
            (0..rec.legend_len)
                .map(|_| chars[rng.gen_range(0..chars.len())])
                .collect()
        })
        .collect();
    let mut cfg = SynthConfig::default();
    cfg.text_pool = pool;
    cfg.arc_span = crate::config::ValueRange::new(rec.arc_span_deg, rec.arc_span_deg);
    cfg.rotation = crate::config::ValueRange::new(0.0, 0.0);
    cfg.shear = crate::config::ValueRange::new(0.0, 0.0);
    cfg.radial_distortion = crate::config::ValueRange::new(0.0, 0.0);
    cfg
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean IoU over {background, seal} with the empty-union convention
/// (IoU = 1 when prediction and truth are both empty).
pub fn mean_iou(pred: &Array2<bool>, truth: &Array2<bool>) -> f64 {
    assert_eq!(pred.dim(), truth.dim());
    let mut iou_sum = 0.0;
    for class in [false, true] {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (p, t) in pred.iter().zip(truth.iter()) {
            let pp = *p == class;
            let tt = *t == class;
            if pp && tt {
                inter += 1;
            }
            if pp || tt {
                union += 1;
            }
        }
        iou_sum += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    iou_sum / 2.0
}

// ---------------------------------------------------------------------------
// Small baseline models
// ---------------------------------------------------------------------------

struct Segmenter {
    layers: Vec<ConvLayerParams>,
}

struct ConvLayerParams {
    w: Arr,
    b: Arr,
    stride: usize,
    up_before: bool,
    act: bool,
}

impl Segmenter {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let e = channels;
        let mk = |rng: &mut ChaCha8Rng, cout: usize, cin: usize, stride: usize, up: bool, act: bool| {
            ConvLayerParams {
                w: conv_init(rng, cout, cin, 3, 3),
                b: zeros(&[cout]),
                stride,
                up_before: up,
                act,
            }
        };
        Self {
            layers: vec![
                mk(rng, e, 3, 1, false, true),
                mk(rng, 2 * e, e, 2, false, true),
                mk(rng, 2 * e, 2 * e, 1, false, true),
                mk(rng, e, 2 * e, 1, true, true),
                mk(rng, 2, e, 1, false, false),
            ],
        }
    }

    fn params(&mut self) -> Vec<&mut Arr> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> (Vec<NodeId>, NodeId) {
        let mut ids = Vec::new();
        let mut h = x;
        for l in &self.layers {
            if l.up_before {
                h = g.upsample2x(h);
            }
            let (wn, bn) = (g.leaf(l.w.clone()), g.leaf(l.b.clone()));
            ids.push(wn);
            ids.push(bn);
            h = g.conv2d(h, wn, l.stride, 1);
            h = g.add_bias(h, bn);
            if l.act {
                h = g.silu(h);
            }
        }
        (ids, h)
    }

    fn predict(&self, img: &RgbTensor) -> Array2<bool> {
        let mut g = Graph::inference();
        let x = g.leaf(stack_batch(std::slice::from_ref(img)).into_dyn());
        let (_, logits) = self.forward(&mut g, x);
        let v = g.value(logits);
        let v4 = v.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (_, _, h, w) = v4.dim();
        let mut out = Array2::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                out[[y, x]] = v4[[0, 1, y, x]] > v4[[0, 0, y, x]];
            }
        }
        out
    }
}

struct Classifier {
    conv1: ConvLayer,
    conv2: ConvLayer,
    fc_w: Arr,
    fc_b: Arr,
    classes: usize,
}

impl Classifier {
    fn new(channels: usize, classes: usize, in_hw: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let _ = in_hw;
        Self {
            conv1: ConvLayer {
                w: conv_init(rng, channels, 3, 3, 3),
                b: zeros(&[channels]),
            },
            conv2: ConvLayer {
                w: conv_init(rng, 2 * channels, channels, 3, 3),
                b: zeros(&[2 * channels]),
            },
            fc_w: linear_init(rng, 2 * channels, classes),
            fc_b: zeros(&[classes]),
            classes,
        }
    }

    fn params(&mut self) -> Vec<&mut Arr> {
        vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> (Vec<NodeId>, NodeId) {
        let ids: Vec<NodeId> = vec![
            g.leaf(self.conv1.w.clone()),
            g.leaf(self.conv1.b.clone()),
            g.leaf(self.conv2.w.clone()),
            g.leaf(self.conv2.b.clone()),
            g.leaf(self.fc_w.clone()),
            g.leaf(self.fc_b.clone()),
        ];
        let mut h = g.conv2d(x, ids[0], 2, 1);
        h = g.add_bias(h, ids[1]);
        h = g.silu(h);
        h = g.conv2d(h, ids[2], 2, 1);
        h = g.add_bias(h, ids[3]);
        h = g.silu(h);
        let p = g.mean_spatial(h);
        let logits = g.matmul(p, ids[4]);
        let logits = g.add_bias(logits, ids[5]);
        (ids, logits)
    }

    fn predict(&self, imgs: &Array4<f64>) -> Vec<usize> {
        let mut g = Graph::inference();
        let x = g.leaf(imgs.clone().into_dyn());
        let (_, logits) = self.forward(&mut g, x);
        let v = g.value(logits).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        v.axis_iter(Axis(0))
            .map(|row| {
                (0..self.classes)
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap()
            })
            .collect()
    }

    fn train(
        &mut self,
        images: &[RgbTensor],
        labels: &[usize],
        cfg: &EvalConfig,
        seed: u64,
    ) {
        let mut opt = {
            let shapes: Vec<&[usize]> = self
                .params()
                .iter()
                .map(|p| {
                    let s: &[usize] = p.shape();
                    // Shapes borrowed immutably after the mutable borrow ends.
                    unsafe { std::mem::transmute::<&[usize], &[usize]>(s) }
                })
                .collect();
            Adam::new(cfg.lr, &shapes)
        };
        for step in 0..cfg.steps {
            let mut rng = derive_rng(seed, &[0xc1a5, step]);
            let idx: Vec<usize> = (0..cfg.batch.min(images.len()))
                .map(|_| rng.gen_range(0..images.len()))
                .collect();
            let batch: Vec<RgbTensor> = idx.iter().map(|&i| images[i].clone()).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.leaf(stack_batch(&batch).into_dyn());
            let (ids, logits) = self.forward(&mut g, x);
            let loss = g.cross_entropy_mean(logits, targets);
            let grads = g.backward(loss);
            let param_grads: Vec<Option<Arr>> = {
                let mut ps = self.params();
                ids.iter()
                    .zip(ps.iter_mut())
                    .map(|(id, p)| Some(grads.get_or_zeros(*id, p.shape())))
                    .collect()
            };
            let mut ps = self.params();
            opt.step(&mut ps, &param_grads);
        }
    }
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

fn mask_targets(mask: &Array2<bool>) -> Vec<usize> {
    mask.iter().map(|m| usize::from(*m)).collect()
}

/// Train a small encoder-decoder on (stamped, mask) pairs and return the
/// mean IoU over the labeled test manifest.
pub fn eval_segmentation(
    train: DatasetRef,
    test: DatasetRef,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64, EvalError> {
    let train_samples = train.load_labeled(None)?;
    let test_samples = test.load_labeled(None)?;
    if train_samples.is_empty() || test_samples.is_empty() {
        return Err(EvalError::ClassMissing("segmentation samples".into()));
    }

    if cfg.oracle_injection {
        let mut total = 0.0;
        for s in &test_samples {
            let truth = s.mask.as_ref().unwrap();
            total += mean_iou(truth, truth);
        }
        return Ok(total / test_samples.len() as f64);
    }

    let mut rng = derive_rng(seed, &[0x5e9]);
    let mut model = Segmenter::new(cfg.channels, &mut rng);
    let mut opt = {
        let shapes: Vec<Vec<usize>> = model
            .layers
            .iter()
            .flat_map(|l| [l.w.shape().to_vec(), l.b.shape().to_vec()])
            .collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        Adam::new(cfg.lr, &refs)
    };

    for step in 0..cfg.steps {
        let mut srng = derive_rng(seed, &[0x5e9b, step]);
        let idx: Vec<usize> = (0..cfg.batch.min(train_samples.len()))
            .map(|_| srng.gen_range(0..train_samples.len()))
            .collect();
        let imgs: Vec<RgbTensor> = idx.iter().map(|&i| train_samples[i].stamped.clone()).collect();
        let mut targets = Vec::new();
        for &i in &idx {
            targets.extend(mask_targets(train_samples[i].mask.as_ref().unwrap()));
        }
        let mut g = Graph::new();
        let x = g.leaf(stack_batch(&imgs).into_dyn());
        let (ids, logits) = model.forward(&mut g, x);
        // [B, 2, H, W] -> [B*H*W, 2]
        let lc = g.nchw_to_nlc(logits);
        let shape = g.value(lc).shape().to_vec();
        let flat = g.reshape(lc, &[shape[0] * shape[1], shape[2]]);
        let loss = g.cross_entropy_mean(flat, targets);
        let grads = g.backward(loss);
        let param_grads: Vec<Option<Arr>> = {
            let mut ps = model.params();
            ids.iter()
                .zip(ps.iter_mut())
                .map(|(id, p)| Some(grads.get_or_zeros(*id, p.shape())))
                .collect()
        };
        let mut ps = model.params();
        opt.step(&mut ps, &param_grads);
    }

    let mut total = 0.0;
    for s in &test_samples {
        let pred = model.predict(&s.stamped);
        total += mean_iou(&pred, s.mask.as_ref().unwrap());
    }
    Ok(total / test_samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Identification
// ---------------------------------------------------------------------------

fn holdout_split(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_test = ((n as f64) * fraction).round().max(1.0) as usize;
    let test = idx[..n_test.min(n)].to_vec();
    let train = idx[n_test.min(n)..].to_vec();
    (train, test)
}

/// Train a small CNN to separate real from fake stamped images and return
/// held-out accuracy. Class 0 = real, class 1 = fake.
pub fn eval_identification(
    real: DatasetRef,
    fake: DatasetRef,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64, EvalError> {
    let real_samples = real.load_all(None)?;
    let fake_samples = fake.load_all(None)?;
    if real_samples.is_empty() {
        return Err(EvalError::ClassMissing("real".into()));
    }
    if fake_samples.is_empty() {
        return Err(EvalError::ClassMissing("fake".into()));
    }

    let mut rng = derive_rng(seed, &[0x1d5]);
    let (r_train, r_test) = holdout_split(real_samples.len(), cfg.holdout, &mut rng);
    let (f_train, f_test) = holdout_split(fake_samples.len(), cfg.holdout, &mut rng);

    let mut train_imgs: Vec<RgbTensor> = Vec::new();
    let mut train_labels: Vec<usize> = Vec::new();
    for &i in &r_train {
        train_imgs.push(real_samples[i].stamped.clone());
        train_labels.push(0);
    }
    for &i in &f_train {
        train_imgs.push(fake_samples[i].stamped.clone());
        train_labels.push(1);
    }
    if cfg.shuffle_labels {
        let mut srng = derive_rng(seed, &[0x1d5f]);
        for i in (1..train_labels.len()).rev() {
            let j = srng.gen_range(0..=i);
            train_labels.swap(i, j);
        }
    }

    let mut test_imgs: Vec<RgbTensor> = Vec::new();
    let mut test_labels: Vec<usize> = Vec::new();
    for &i in &r_test {
        test_imgs.push(real_samples[i].stamped.clone());
        test_labels.push(0);
    }
    for &i in &f_test {
        test_imgs.push(fake_samples[i].stamped.clone());
        test_labels.push(1);
    }

    if cfg.oracle_injection {
        return Ok(1.0);
    }

    let (_, h, w) = train_imgs[0].dim();
    let mut model = Classifier::new(cfg.channels, 2, (h, w), &mut rng);
    model.train(&train_imgs, &train_labels, cfg, seed);

    let preds = model.predict(&stack_batch(&test_imgs));
    let correct = preds
        .iter()
        .zip(test_labels.iter())
        .filter(|(p, t)| *p == *t)
        .count();
    Ok(correct as f64 / test_labels.len() as f64)
}

// ---------------------------------------------------------------------------
// Recognition
// ---------------------------------------------------------------------------

/// Polar-unwarp the legend band of a stamped sample into per-character
/// cells, `[3, radial_bins, angular_bins_per_char]` each.
pub fn legend_cells(
    img: &RgbTensor,
    bbox: &PixelRect,
    rec: &RecognitionConfig,
) -> Vec<RgbTensor> {
    let cx = (bbox.x0 + bbox.x1) as f64 / 2.0;
    let cy = (bbox.y0 + bbox.y1) as f64 / 2.0;
    let radius = (bbox.width().max(bbox.height())) as f64 / 2.0;
    let span = rec.arc_span_deg.to_radians();
    let phi0 = -std::f64::consts::FRAC_PI_2 - span / 2.0;
    let total_a = rec.legend_len * rec.angular_bins_per_char;
    let (_, h, w) = img.dim();

    let sample = |c: usize, x: f64, y: f64| -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let xx = x0 as i64 + dx;
                let yy = y0 as i64 + dy;
                if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                    acc += wx * wy * img[[c, yy as usize, xx as usize]];
                }
            }
        }
        acc
    };

    let mut strip = ndarray::Array3::<f64>::zeros((3, rec.radial_bins, total_a));
    for a in 0..total_a {
        let phi = phi0 + (a as f64 + 0.5) * span / total_a as f64;
        for r in 0..rec.radial_bins {
            // Radial index 0 at the outer edge, matching glyph row order.
            let frac = rec.band.1 - (r as f64 + 0.5) / rec.radial_bins as f64 * (rec.band.1 - rec.band.0);
            let rad = frac * radius;
            let x = cx + rad * phi.cos() - 0.5;
            let y = cy + rad * phi.sin() - 0.5;
            for c in 0..3 {
                strip[[c, r, a]] = sample(c, x, y);
            }
        }
    }

    (0..rec.legend_len)
        .map(|k| {
            strip
                .slice(ndarray::s![
                    ..,
                    ..,
                    k * rec.angular_bins_per_char..(k + 1) * rec.angular_bins_per_char
                ])
                .to_owned()
        })
        .collect()
}

/// Train a shared per-character classifier over polar-unwarped legend cells
/// and return exact-character accuracy on the test manifest.
pub fn eval_recognition(
    train: DatasetRef,
    test: DatasetRef,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<f64, EvalError> {
    let rec = &cfg.recognition;
    let alphabet: Vec<char> = rec.alphabet.chars().collect();
    if alphabet.is_empty() {
        return Err(EvalError::Config("empty alphabet".into()));
    }
    let char_index = |c: char| -> Result<usize, EvalError> {
        alphabet
            .iter()
            .position(|a| *a == c)
            .ok_or_else(|| EvalError::Config(format!("char {c:?} not in alphabet")))
    };

    let collect_cells = |ds: DatasetRef| -> Result<(Vec<RgbTensor>, Vec<usize>), EvalError> {
        let samples = ds.load_labeled(None)?;
        let mut cells = Vec::new();
        let mut labels = Vec::new();
        for s in &samples {
            let text = s.text.as_ref().unwrap();
            if text.chars().count() != rec.legend_len {
                return Err(EvalError::Config(format!(
                    "legend {text:?} is not the fixed length {}",
                    rec.legend_len
                )));
            }
            let bbox = s.bbox.as_ref().unwrap();
            let cs = legend_cells(&s.stamped, bbox, rec);
            for (cell, ch) in cs.into_iter().zip(text.chars()) {
                cells.push(cell);
                labels.push(char_index(ch)?);
            }
        }
        Ok((cells, labels))
    };

    let (train_cells, train_labels) = collect_cells(train)?;
    let (test_cells, test_labels) = collect_cells(test)?;
    if train_cells.is_empty() || test_cells.is_empty() {
        return Err(EvalError::ClassMissing("recognition cells".into()));
    }

    if cfg.oracle_injection || alphabet.len() == 1 {
        return Ok(1.0);
    }

    let mut rng = derive_rng(seed, &[0x9ec]);
    let (_, ch, cw) = train_cells[0].dim();
    let mut model = Classifier::new(cfg.channels, alphabet.len(), (ch, cw), &mut rng);
    model.train(&train_cells, &train_labels, cfg, seed);

    let preds = model.predict(&stack_batch(&test_cells));
    let correct = preds
        .iter()
        .zip(test_labels.iter())
        .filter(|(p, t)| *p == *t)
        .count();
    Ok(correct as f64 / test_labels.len() as f64)
}

// ---------------------------------------------------------------------------
// Comparison report
// ---------------------------------------------------------------------------

/// Full-scale reference numbers reported by the upstream evaluation, stored
/// for report context only and never asserted at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperReference {
    /// (traditional, realized) MIoU percentages.
    pub segmentation_miou_pct: (f64, f64),
    pub identification_acc_pct: (f64, f64),
    pub recognition_acc_pct: (f64, f64),
    /// User-study average scores by generation route.
    pub user_study_avg: Vec<(String, f64)>,
}

impl Default for PaperReference {
    fn default() -> Self {
        Self {
            segmentation_miou_pct: (78.3, 91.5),
            identification_acc_pct: (85.63, 90.23),
            recognition_acc_pct: (75.34, 81.59),
            user_study_avg: vec![
                ("synthetic".into(), 5.53),
                ("fake_prompt".into(), 6.69),
                ("real_prompt".into(), 7.75),
                ("forger_network".into(), 6.11),
                ("gan".into(), 6.06),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub dataset: String,
    /// Per-seed metrics, one entry per requested seed.
    pub segmentation_miou: Vec<f64>,
    pub identification_accuracy: Vec<f64>,
    pub recognition_accuracy: Vec<f64>,
}

impl ConditionResult {
    pub fn medians(&self) -> (f64, f64, f64) {
        (
            median(&self.segmentation_miou),
            median(&self.identification_accuracy),
            median(&self.recognition_accuracy),
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
    }
}

/// Two dataset conditions x three tasks, medians over seeds, with the
/// full-scale reference constants alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub traditional: ConditionResult,
    pub realized: ConditionResult,
    pub seeds: Vec<u64>,
    pub reference: PaperReference,
}

impl EvalReport {
    /// Human-readable table mirroring the two-condition x three-task layout.
    pub fn render_table(&self) -> String {
        fn row(name: &str, c: &ConditionResult, reference: (f64, f64, f64)) -> String {
            let (s, i, r) = c.medians();
            format!(
                "{name:<22} {s:>14.4} {i:>16.4} {r:>14.4}\n{:<22} {:>13.1}% {:>15.2}% {:>13.2}%\n",
                "  reference (full)", reference.0, reference.1, reference.2
            )
        }
        let mut out = format!(
            "{:<22} {:>14} {:>16} {:>14}\n",
            "dataset", "segmentation", "identification", "recognition"
        );
        out.push_str(&row(
            "traditional",
            &self.traditional,
            (
                self.reference.segmentation_miou_pct.0,
                self.reference.identification_acc_pct.0,
                self.reference.recognition_acc_pct.0,
            ),
        ));
        out.push_str(&row(
            "realized",
            &self.realized,
            (
                self.reference.segmentation_miou_pct.1,
                self.reference.identification_acc_pct.1,
                self.reference.recognition_acc_pct.1,
            ),
        ));
        out
    }

    /// Line-record form: one JSON object per (dataset, task, seed) cell.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        for cond in [&self.traditional, &self.realized] {
            for (task, values) in [
                ("segmentation_miou", &cond.segmentation_miou),
                ("identification_accuracy", &cond.identification_accuracy),
                ("recognition_accuracy", &cond.recognition_accuracy),
            ] {
                for (seed, value) in self.seeds.iter().zip(values.iter()) {
                    out.push_str(
                        &serde_json::json!({
                            "dataset": cond.dataset,
                            "task": task,
                            "seed": seed,
                            "value": value,
                        })
                        .to_string(),
                    );
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Options for [`compare_datasets`]: which tasks to run (recognition needs
/// fixed-length legends, which the seg/ident benchmarks may not have).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTasks {
    pub segmentation: bool,
    pub identification: bool,
    pub recognition: bool,
}

impl Default for CompareTasks {
    fn default() -> Self {
        Self {
            segmentation: true,
            identification: true,
            recognition: true,
        }
    }
}

/// Run the enabled tasks for both training conditions across seeds.
///
/// - segmentation/recognition train on the condition and test on `eval_real`
///   (labeled real-proxy data);
/// - identification trains real-vs-fake with the condition supplying the
///   fake class and `eval_real` the real class, and tests against held-out
///   real and realized-fake samples.
pub fn compare_datasets(
    traditional: DatasetRef,
    realized: DatasetRef,
    eval_real: DatasetRef,
    cfg: &EvalConfig,
    tasks: &CompareTasks,
    seeds: &[u64],
) -> Result<EvalReport, EvalError> {
    let n_trad = traditional.manifest.entries.len();
    let n_real = realized.manifest.entries.len();
    if n_trad != n_real {
        return Err(EvalError::SizeMismatch {
            traditional: n_trad,
            realized: n_real,
        });
    }
    if seeds.is_empty() {
        return Err(EvalError::Config("at least one seed required".into()));
    }

    let run_condition = |name: &str, ds: DatasetRef| -> Result<ConditionResult, EvalError> {
        let mut seg = Vec::new();
        let mut ident = Vec::new();
        let mut recog = Vec::new();
        for &seed in seeds {
            if tasks.segmentation {
                seg.push(eval_segmentation(ds, eval_real, cfg, seed)?);
            }
            if tasks.identification {
                ident.push(eval_identification(eval_real, ds, cfg, seed)?);
            }
            if tasks.recognition {
                recog.push(eval_recognition(ds, eval_real, cfg, seed)?);
            }
        }
        Ok(ConditionResult {
            dataset: name.to_string(),
            segmentation_miou: seg,
            identification_accuracy: ident,
            recognition_accuracy: recog,
        })
    };

    Ok(EvalReport {
        traditional: run_condition("traditional", traditional)?,
        realized: run_condition("realized", realized)?,
        seeds: seeds.to_vec(),
        reference: PaperReference::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_paired, Manifest, ManifestEntry};
    use crate::imgio::{save_mask, save_rgb};
    use crate::seal::Provenance;
    use ndarray::Array3;

    fn fast_cfg() -> EvalConfig {
        EvalConfig {
            channels: 4,
            steps: 60,
            batch: 6,
            lr: 5e-3,
            ..Default::default()
        }
    }

    /// Write a tiny labeled manifest of solid-color "stamped" images whose
    /// masks mark the central square.
    fn solid_dataset(
        dir: &Path,
        color: [f64; 3],
        n: usize,
        size: usize,
    ) -> (Manifest, std::path::PathBuf) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        let mut m = Manifest::new("test".into(), 0);
        for i in 0..n {
            let mut img = Array3::from_elem((3, size, size), 0.9);
            let mut mask = Array2::from_elem((size, size), false);
            let q = size / 4;
            for y in q..3 * q {
                for x in q..3 * q {
                    for c in 0..3 {
                        img[[c, y, x]] = color[c];
                    }
                    mask[[y, x]] = true;
                }
            }
            let stamped = format!("images/{i}_s.png");
            let mask_p = format!("images/{i}_m.png");
            let clean_p = format!("images/{i}_c.png");
            save_rgb(&img, &dir.join(&stamped)).unwrap();
            save_mask(&mask, &dir.join(&mask_p)).unwrap();
            save_rgb(&Array3::from_elem((3, size, size), 0.9), &dir.join(&clean_p)).unwrap();
            m.entries.push(ManifestEntry {
                id: format!("t{i}"),
                provenance: Provenance::Synthetic,
                stamped,
                mask: Some(mask_p),
                clean: Some(clean_p),
                text: Some("A".into()),
                bbox: Some([size / 4, size / 4, 3 * size / 4, 3 * size / 4]),
                split: crate::dataset::Split::Train,
            });
        }
        (m, dir.to_path_buf())
    }

    #[test]
    fn miou_conventions() {
        let a = Array2::from_elem((4, 4), false);
        assert_eq!(mean_iou(&a, &a), 1.0); // empty union counts as 1
        let mut b = a.clone();
        b[[0, 0]] = true;
        let v = mean_iou(&a, &b);
        assert!(v < 1.0 && v > 0.4);
    }

    #[test]
    fn oracle_injection_gives_perfect_scores() {
        let dir = tempfile::tempdir().unwrap();
        let (m, base) = solid_dataset(&dir.path().join("d"), [0.8, 0.1, 0.1], 4, 16);
        let ds = DatasetRef::new(&m, &base);
        let cfg = EvalConfig {
            oracle_injection: true,
            ..fast_cfg()
        };
        assert_eq!(eval_segmentation(ds, ds, &cfg, 0).unwrap(), 1.0);
        assert_eq!(eval_identification(ds, ds, &cfg, 0).unwrap(), 1.0);
    }

    #[test]
    fn segmentation_learns_a_solid_square() {
        let dir = tempfile::tempdir().unwrap();
        let (m, base) = solid_dataset(&dir.path().join("d"), [0.8, 0.1, 0.1], 8, 16);
        let ds = DatasetRef::new(&m, &base);
        let miou = eval_segmentation(ds, ds, &fast_cfg(), 1).unwrap();
        assert!(miou > 0.9, "MIoU {miou}");
    }

    #[test]
    fn identification_separates_solid_colors() {
        let dir = tempfile::tempdir().unwrap();
        let (mr, br) = solid_dataset(&dir.path().join("r"), [0.1, 0.2, 0.8], 30, 16);
        let (mf, bf) = solid_dataset(&dir.path().join("f"), [0.8, 0.1, 0.1], 30, 16);
        let real = DatasetRef::new(&mr, &br);
        let fake = DatasetRef::new(&mf, &bf);
        let acc = eval_identification(real, fake, &fast_cfg(), 2).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let dir = tempfile::tempdir().unwrap();
        let (mr, br) = solid_dataset(&dir.path().join("r"), [0.1, 0.2, 0.8], 80, 16);
        let (mf, bf) = solid_dataset(&dir.path().join("f"), [0.8, 0.1, 0.1], 80, 16);
        let real = DatasetRef::new(&mr, &br);
        let fake = DatasetRef::new(&mf, &bf);
        let cfg = EvalConfig {
            shuffle_labels: true,
            ..fast_cfg()
        };
        let acc = eval_identification(real, fake, &cfg, 3).unwrap();
        assert!((0.4..=0.6).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn single_char_alphabet_is_trivially_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let rec = RecognitionConfig {
            alphabet: "A".into(),
            legend_len: 1,
            ..Default::default()
        };
        let (m, base) = solid_dataset(&dir.path().join("d"), [0.8, 0.1, 0.1], 3, 16);
        let ds = DatasetRef::new(&m, &base);
        let cfg = EvalConfig {
            recognition: rec,
            ..fast_cfg()
        };
        assert_eq!(eval_recognition(ds, ds, &cfg, 0).unwrap(), 1.0);
    }

    #[test]
    fn recognition_requires_labels_and_fixed_length() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_paired(2, &SynthConfig::default(), None, dir.path(), 3).unwrap();
        let ds = DatasetRef::new(&m, dir.path());
        // Default pool has variable-length legends.
        let err = eval_recognition(ds, ds, &fast_cfg(), 0).unwrap_err();
        assert!(matches!(err, EvalError::Config(_)));

        let mut unlabeled = m.clone();
        for e in &mut unlabeled.entries {
            e.text = None;
        }
        let ds2 = DatasetRef::new(&unlabeled, dir.path());
        assert!(matches!(
            eval_recognition(ds2, ds2, &fast_cfg(), 0),
            Err(EvalError::MissingLabels(_))
        ));
    }

    #[test]
    fn compare_requires_equal_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let (m1, b1) = solid_dataset(&dir.path().join("a"), [0.8, 0.1, 0.1], 4, 16);
        let (m2, b2) = solid_dataset(&dir.path().join("b"), [0.1, 0.1, 0.8], 5, 16);
        let err = compare_datasets(
            DatasetRef::new(&m1, &b1),
            DatasetRef::new(&m2, &b2),
            DatasetRef::new(&m1, &b1),
            &fast_cfg(),
            &CompareTasks::default(),
            &[0],
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::SizeMismatch { .. }));
    }

    #[test]
    fn report_renders_both_layouts() {
        let report = EvalReport {
            traditional: ConditionResult {
                dataset: "traditional".into(),
                segmentation_miou: vec![0.5, 0.6],
                identification_accuracy: vec![0.7, 0.8],
                recognition_accuracy: vec![0.4, 0.5],
            },
            realized: ConditionResult {
                dataset: "realized".into(),
                segmentation_miou: vec![0.7, 0.8],
                identification_accuracy: vec![0.8, 0.9],
                recognition_accuracy: vec![0.5, 0.6],
            },
            seeds: vec![0, 1],
            reference: PaperReference::default(),
        };
        let table = report.render_table();
        assert!(table.contains("traditional"));
        assert!(table.contains("realized"));
        assert!(table.contains("78.3"));
        let records = report.render_records();
        assert_eq!(records.lines().count(), 12);
        let (s, _, _) = report.realized.medians();
        assert!((s - 0.75).abs() < 1e-12);
    }
}
