//! Parametric seal rendering, geometric perturbation, and alpha compositing
//! onto documents with exact labels.
//!
//! Rendering is 4x supersampled and fully deterministic: equal specs give
//! bit-identical rasters. Compositing never clips; a stamp that would exceed
//! the document is rejected so the changed-pixel set always equals the
//! positive-alpha set.

use crate::config::{ConfigError, SynthConfig};
use crate::glyphs;
use crate::imgio::{f64_to_u8, u8_to_f64, RgbTensor, RgbaRaster};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROTATION_LIMIT: f64 = 180.0;
pub const SHEAR_LIMIT: f64 = 0.2;
pub const RADIAL_LIMIT: f64 = 0.1;

/// Minimum nonzero stamp alpha (u8 scale). Together with grayscale documents
/// and the truncated ink law this guarantees every positive-alpha pixel
/// changes the quantized composite.
pub const ALPHA_FLOOR: u8 = 4;

const SUPERSAMPLE: usize = 4;
/// Canvas half-extent factor over `outer_radius`; covers the worst-case
/// warp growth (|shear| 0.2, |radial| 0.1).
const CANVAS_FACTOR: f64 = 1.4;
/// A glyph may occupy at most this fraction of its angular slot.
const GLYPH_PACKING: f64 = 0.95;
const STAR_INNER_RATIO: f64 = 0.381_966;

#[derive(Debug, Error)]
pub enum SealError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid seal spec: {0}")]
    InvalidSpec(String),
    #[error("text {text:?} does not fit the {arc_span} degree arc at radius {radius}")]
    TextTooLongForArc {
        text: String,
        arc_span: f64,
        radius: f64,
    },
    #[error("warp parameter out of bounds: {0}")]
    WarpOutOfBounds(String),
    #[error("stamp content (bbox {bbox:?}) falls outside the {width}x{height} document")]
    OutOfBounds {
        bbox: PixelRect,
        width: usize,
        height: usize,
    },
}

/// Geometric perturbation: rotation, shear, and radial (barrel/pincushion)
/// distortion, all about the stamp center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpParams {
    pub rotation_deg: f64,
    pub shear: f64,
    pub radial_distortion: f64,
}

impl WarpParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shear: 0.0,
            radial_distortion: 0.0,
        }
    }

    pub fn new(rotation_deg: f64, shear: f64, radial_distortion: f64) -> Result<Self, SealError> {
        let w = Self {
            rotation_deg,
            shear,
            radial_distortion,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), SealError> {
        if !self.rotation_deg.is_finite() || self.rotation_deg.abs() > ROTATION_LIMIT {
            return Err(SealError::WarpOutOfBounds(format!(
                "rotation {}",
                self.rotation_deg
            )));
        }
        if !self.shear.is_finite() || self.shear.abs() > SHEAR_LIMIT {
            return Err(SealError::WarpOutOfBounds(format!("shear {}", self.shear)));
        }
        if !self.radial_distortion.is_finite() || self.radial_distortion.abs() > RADIAL_LIMIT {
            return Err(SealError::WarpOutOfBounds(format!(
                "radial {}",
                self.radial_distortion
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.shear == 0.0 && self.radial_distortion == 0.0
    }
}

/// Parametric description of one seal on a target document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SealSpec {
    /// Legend along the arc; characters must come from the built-in glyph set.
    pub text: String,
    /// Placement on the target document, in pixels.
    pub center: (f64, f64),
    pub outer_radius: f64,
    pub ring_width: f64,
    pub glyph_height: f64,
    /// Degrees of arc the legend occupies, centered at the top.
    pub arc_span_deg: f64,
    /// Central star outer radius as a fraction of `outer_radius`; 0 = none.
    pub star_scale: f64,
    pub ink_rgb: [f64; 3],
    /// Peak ink opacity; texture modulates below it.
    pub base_opacity: f64,
    /// Ink speckle amplitude in `[0, 1)`.
    pub texture_amp: f64,
    pub texture_seed: u64,
    pub warp: WarpParams,
}

impl SealSpec {
    pub fn validate(&self) -> Result<(), SealError> {
        if !(self.ring_width >= 1.0 && self.outer_radius > self.ring_width) {
            return Err(SealError::InvalidSpec(format!(
                "outer_radius {} must exceed ring_width {} >= 1",
                self.outer_radius, self.ring_width
            )));
        }
        if !(self.arc_span_deg > 0.0 && self.arc_span_deg <= 360.0) {
            return Err(SealError::InvalidSpec(format!(
                "arc_span {} outside (0, 360]",
                self.arc_span_deg
            )));
        }
        for v in self.ink_rgb {
            if !(0.0..=1.0).contains(&v) {
                return Err(SealError::InvalidSpec(format!("ink channel {v}")));
            }
        }
        if !(self.base_opacity > 0.0 && self.base_opacity <= 1.0) {
            return Err(SealError::InvalidSpec(format!(
                "base_opacity {}",
                self.base_opacity
            )));
        }
        if !(0.0..=1.0).contains(&self.star_scale) {
            return Err(SealError::InvalidSpec(format!(
                "star_scale {}",
                self.star_scale
            )));
        }
        if !(0.0..1.0).contains(&self.texture_amp) {
            return Err(SealError::InvalidSpec(format!(
                "texture_amp {}",
                self.texture_amp
            )));
        }
        if !self.text.is_empty() {
            for c in self.text.chars() {
                if !glyphs::supported(c) {
                    return Err(SealError::InvalidSpec(format!("unsupported glyph {c:?}")));
                }
            }
            if self.glyph_height < 1.0
                || self.text_radius() - self.glyph_height / 2.0 <= self.star_scale * self.outer_radius
            {
                return Err(SealError::InvalidSpec(format!(
                    "glyph_height {} leaves no text band inside the ring",
                    self.glyph_height
                )));
            }
        }
        self.warp.validate()
    }

    /// Radial center of the legend band, just inside the ring.
    pub fn text_radius(&self) -> f64 {
        self.outer_radius - self.ring_width - self.glyph_height / 2.0 - 1.0
    }

    /// Square canvas side for rendering this spec (even, warp-proof).
    pub fn canvas_side(&self) -> usize {
        2 * ((self.outer_radius * CANVAS_FACTOR).ceil() as usize + 1)
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn empty() -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: 0,
            y1: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }
}

/// Rendered seal: RGBA raster whose alpha is ink coverage, plus the spec it
/// came from and the tight content bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct SealStamp {
    pub raster: RgbaRaster,
    pub spec: SealSpec,
    pub tight_bbox: PixelRect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Forged,
    Real,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Synthetic => write!(f, "synthetic"),
            Provenance::Forged => write!(f, "forged"),
            Provenance::Real => write!(f, "real"),
        }
    }
}

/// Paired record: clean document, stamped image, mask, legend text, bbox.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub clean_doc: RgbTensor,
    pub stamped: RgbTensor,
    pub mask: Array2<bool>,
    pub text: String,
    pub bbox: PixelRect,
    pub provenance: Provenance,
}

/// Largest glyph height whose legend of `n_chars` still packs into the arc
/// at the given geometry (the text band sits just inside the ring).
pub fn max_glyph_height(
    outer_radius: f64,
    ring_width: f64,
    arc_span_deg: f64,
    n_chars: usize,
) -> f64 {
    if n_chars == 0 {
        return f64::INFINITY;
    }
    let slot = arc_span_deg.to_radians() / n_chars as f64;
    let aspect = glyphs::GLYPH_COLS as f64 / glyphs::GLYPH_ROWS as f64;
    let num = GLYPH_PACKING * slot * (outer_radius - ring_width - 1.0);
    let den = aspect + GLYPH_PACKING * slot / 2.0;
    num / den
}

/// Draw a seal spec from the configured ranges. Deterministic in
/// `(rng state, cfg)`; the draw order is fixed. The glyph height draw is
/// clamped to what the sampled (radius, ring, span, text) can fit, which the
/// config validation guarantees is never below the configured minimum.
pub fn sample_seal_spec(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<SealSpec, SealError> {
    cfg.validate()?;
    let text = cfg.text_pool[rng.gen_range(0..cfg.text_pool.len())].clone();
    let outer_radius = cfg.outer_radius.sample(rng);
    let ring_width = cfg.ring_width.sample(rng);
    let arc_span_deg = cfg.arc_span.sample(rng);
    let glyph_height = {
        let feasible =
            0.98 * max_glyph_height(outer_radius, ring_width, arc_span_deg, text.chars().count());
        let hi = cfg.glyph_height.max.min(feasible).max(cfg.glyph_height.min);
        crate::rng::uniform_in(rng, cfg.glyph_height.min, hi).max(1.0)
    };
    let star_scale = cfg.star_scale.sample(rng);
    let ink_rgb = cfg.ink.sample(rng);
    let base_opacity = cfg.base_opacity.sample(rng);
    let texture_amp = cfg.texture_amp.sample(rng);
    let texture_seed: u64 = rng.gen();
    let warp = WarpParams {
        rotation_deg: cfg.rotation.sample(rng),
        shear: cfg.shear.sample(rng),
        radial_distortion: cfg.radial_distortion.sample(rng),
    };

    let margin = (outer_radius * 1.35).ceil() + 1.0;
    let (w, h) = (cfg.doc.width as f64, cfg.doc.height as f64);
    if 2.0 * margin >= w || 2.0 * margin >= h {
        return Err(SealError::Config(ConfigError::InvalidRange(format!(
            "document {w}x{h} too small for outer_radius {outer_radius}"
        ))));
    }
    let center = (
        crate::rng::uniform_in(rng, margin, w - margin),
        crate::rng::uniform_in(rng, margin, h - margin),
    );

    let spec = SealSpec {
        text,
        center,
        outer_radius,
        ring_width,
        glyph_height,
        arc_span_deg,
        star_scale,
        ink_rgb,
        base_opacity,
        texture_amp,
        texture_seed,
        warp,
    };
    spec.validate()?;
    Ok(spec)
}

/// Render the unwarped stamp: ring annulus, optional central star, and the
/// legend along the arc. 4x supersampled coverage, ink-speckle texture on
/// alpha, constant ink color.
pub fn render_seal(spec: &SealSpec) -> Result<SealStamp, SealError> {
    spec.validate()?;
    let chars: Vec<char> = spec.text.chars().collect();
    let n = chars.len();
    let span = spec.arc_span_deg.to_radians();
    let r_text = spec.text_radius();
    let glyph_w = spec.glyph_height * glyphs::GLYPH_COLS as f64 / glyphs::GLYPH_ROWS as f64;

    if n > 0 {
        let slot_arc = span / n as f64 * r_text;
        if glyph_w > GLYPH_PACKING * slot_arc {
            return Err(SealError::TextTooLongForArc {
                text: spec.text.clone(),
                arc_span: spec.arc_span_deg,
                radius: spec.outer_radius,
            });
        }
    }

    let side = spec.canvas_side();
    let c = side as f64 / 2.0;
    let mut raster = RgbaRaster::new(side, side);
    let ink = [
        f64_to_u8(spec.ink_rgb[0]),
        f64_to_u8(spec.ink_rgb[1]),
        f64_to_u8(spec.ink_rgb[2]),
    ];

    let star_outer = spec.star_scale * spec.outer_radius;
    let star = (spec.star_scale > 0.0).then(|| star_vertices(star_outer));
    let phi0 = -std::f64::consts::FRAC_PI_2 - span / 2.0;
    let slot = if n > 0 { span / n as f64 } else { 0.0 };

    let inside = |px: f64, py: f64| -> bool {
        let dx = px - c;
        let dy = py - c;
        let r = (dx * dx + dy * dy).sqrt();
        if r > spec.outer_radius {
            return false;
        }
        if r >= spec.outer_radius - spec.ring_width {
            return true;
        }
        if let Some(v) = &star {
            if r <= star_outer && point_in_polygon(dx, dy, v) {
                return true;
            }
        }
        if n > 0 && (r - r_text).abs() <= spec.glyph_height / 2.0 {
            let phi = dy.atan2(dx);
            let phi_rel = (phi - phi0).rem_euclid(std::f64::consts::TAU);
            if phi_rel < span {
                let k = (phi_rel / slot) as usize;
                if k < n {
                    let u = (phi_rel - (k as f64 + 0.5) * slot) * r_text;
                    let col = (u / glyph_w * glyphs::GLYPH_COLS as f64
                        + glyphs::GLYPH_COLS as f64 / 2.0)
                        .floor();
                    let row = ((r_text + spec.glyph_height / 2.0 - r) / spec.glyph_height
                        * glyphs::GLYPH_ROWS as f64)
                        .floor();
                    if col >= 0.0
                        && col < glyphs::GLYPH_COLS as f64
                        && row >= 0.0
                        && row < glyphs::GLYPH_ROWS as f64
                    {
                        if let Some(bitmap) = glyphs::glyph(chars[k]) {
                            return glyphs::glyph_pixel(bitmap, row as usize, col as usize);
                        }
                    }
                }
            }
        }
        false
    };

    let ss = SUPERSAMPLE as f64;
    let reach = spec.outer_radius + 1.0;
    for y in 0..side {
        for x in 0..side {
            let (pcx, pcy) = (x as f64 + 0.5, y as f64 + 0.5);
            let dist = ((pcx - c).powi(2) + (pcy - c).powi(2)).sqrt();
            if dist > reach {
                continue;
            }
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / ss;
                    let py = y as f64 + (sy as f64 + 0.5) / ss;
                    if inside(px, py) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let coverage = hits as f64 / (ss * ss);
            let tex = 1.0 - spec.texture_amp * value_noise(spec.texture_seed, x, y);
            let alpha = coverage * spec.base_opacity * tex;
            let a8 = quantize_alpha(alpha);
            if a8 > 0 {
                raster.set_pixel(y, x, [ink[0], ink[1], ink[2], a8]);
            }
        }
    }

    let tight_bbox = alpha_bbox(&raster);
    Ok(SealStamp {
        raster,
        spec: spec.clone(),
        tight_bbox,
    })
}

/// Apply rotation, shear, and radial distortion by inverse-mapped bilinear
/// resampling of the alpha plane. The all-zero warp short-circuits to a
/// bit-identical stamp.
pub fn perturb_geometry(stamp: &SealStamp, warp: &WarpParams) -> Result<SealStamp, SealError> {
    warp.validate()?;
    if warp.is_identity() {
        return Ok(stamp.clone());
    }

    let side = stamp.raster.height;
    let c = side as f64 / 2.0;
    let radius = stamp.spec.outer_radius;
    let k = warp.radial_distortion;
    let theta = warp.rotation_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let s = warp.shear;

    // Forward: d = radial(R(theta) * Shear(s) * u). Inverse per output pixel.
    let mut out = RgbaRaster::new(side, side);
    let ink = {
        let px = [
            f64_to_u8(stamp.spec.ink_rgb[0]),
            f64_to_u8(stamp.spec.ink_rgb[1]),
            f64_to_u8(stamp.spec.ink_rgb[2]),
        ];
        px
    };
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 + 0.5 - c;
            let dy = y as f64 + 0.5 - c;
            let m = (dx * dx + dy * dy).sqrt();
            // Undo radial distortion: solve rho * (1 + k (rho/R)^2) = m.
            let (wx, wy) = if m == 0.0 || k == 0.0 {
                (dx, dy)
            } else {
                let mut rho = m;
                for _ in 0..8 {
                    let f = rho * (1.0 + k * (rho / radius).powi(2)) - m;
                    let fp = 1.0 + 3.0 * k * (rho / radius).powi(2);
                    rho -= f / fp;
                }
                (dx * rho / m, dy * rho / m)
            };
            // Undo rotation then shear: u = Shear(-s) * R(-theta) * w.
            let rx = cos_t * wx + sin_t * wy;
            let ry = -sin_t * wx + cos_t * wy;
            let ux = rx - s * ry;
            let uy = ry;

            let a = bilinear_alpha(&stamp.raster, c + ux - 0.5, c + uy - 0.5);
            let a8 = quantize_alpha(a);
            if a8 > 0 {
                out.set_pixel(y, x, [ink[0], ink[1], ink[2], a8]);
            }
        }
    }

    let tight_bbox = alpha_bbox(&out);
    Ok(SealStamp {
        raster: out,
        spec: stamp.spec.clone(),
        tight_bbox,
    })
}

/// Alpha-over the stamp onto the document at `spec.center`, producing the
/// labeled sample. Stamps whose content would exceed the document are
/// rejected, never clipped.
pub fn composite(
    doc: &RgbTensor,
    stamp: &SealStamp,
    tau_mask: f64,
) -> Result<LabeledSample, SealError> {
    debug_assert!((0.0..=1.0).contains(&tau_mask));
    let (_, h, w) = doc.dim();
    let side = stamp.raster.height as i64;
    let left = (stamp.spec.center.0 - side as f64 / 2.0).round() as i64;
    let top = (stamp.spec.center.1 - side as f64 / 2.0).round() as i64;

    let bb = stamp.tight_bbox;
    let doc_bbox = if bb.is_empty() {
        PixelRect::empty()
    } else {
        let x0 = left + bb.x0 as i64;
        let y0 = top + bb.y0 as i64;
        let x1 = left + bb.x1 as i64;
        let y1 = top + bb.y1 as i64;
        if x0 < 0 || y0 < 0 || x1 > w as i64 || y1 > h as i64 {
            return Err(SealError::OutOfBounds {
                bbox: bb,
                width: w,
                height: h,
            });
        }
        PixelRect {
            x0: x0 as usize,
            y0: y0 as usize,
            x1: x1 as usize,
            y1: y1 as usize,
        }
    };

    let mut stamped = doc.clone();
    let mut mask = Array2::from_elem((h, w), false);
    for sy in bb.y0..bb.y1 {
        for sx in bb.x0..bb.x1 {
            let a8 = stamp.raster.alpha(sy, sx);
            if a8 == 0 {
                continue;
            }
            let a = u8_to_f64(a8);
            let dy = (top + sy as i64) as usize;
            let dx = (left + sx as i64) as usize;
            for ch in 0..3 {
                // Quantize in place so the in-memory sample matches its PNG.
                let v = (1.0 - a) * stamped[[ch, dy, dx]] + a * stamp.spec.ink_rgb[ch];
                stamped[[ch, dy, dx]] = u8_to_f64(f64_to_u8(v));
            }
            if a > tau_mask {
                mask[[dy, dx]] = true;
            }
        }
    }

    Ok(LabeledSample {
        clean_doc: doc.clone(),
        stamped,
        mask,
        text: stamp.spec.text.clone(),
        bbox: doc_bbox,
        provenance: Provenance::Synthetic,
    })
}

fn quantize_alpha(alpha: f64) -> u8 {
    let a8 = (alpha.clamp(0.0, 1.0) * 255.0).round() as u8;
    if a8 < ALPHA_FLOOR {
        0
    } else {
        a8
    }
}

fn alpha_bbox(raster: &RgbaRaster) -> PixelRect {
    let (mut x0, mut y0) = (usize::MAX, usize::MAX);
    let (mut x1, mut y1) = (0usize, 0usize);
    for y in 0..raster.height {
        for x in 0..raster.width {
            if raster.alpha(y, x) > 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        PixelRect::empty()
    } else {
        PixelRect { x0, y0, x1, y1 }
    }
}

fn bilinear_alpha(raster: &RgbaRaster, sx: f64, sy: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let xx = x0 as i64 + dx;
            let yy = y0 as i64 + dy;
            if xx >= 0 && yy >= 0 && (xx as usize) < raster.width && (yy as usize) < raster.height {
                acc += wx * wy * u8_to_f64(raster.alpha(yy as usize, xx as usize));
            }
        }
    }
    acc
}

/// Ten vertices of a five-point star, one point up, in center-relative
/// coordinates (y down).
fn star_vertices(outer: f64) -> Vec<(f64, f64)> {
    let inner = outer * STAR_INNER_RATIO;
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let ang = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (r * ang.cos(), r * ang.sin())
        })
        .collect()
}

/// Even-odd ray casting.
fn point_in_polygon(px: f64, py: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash01(seed: u64, gx: i64, gy: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(gx as u64 ^ splitmix64(gy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise in `[0, 1]` on a 4-pixel lattice.
fn value_noise(seed: u64, x: usize, y: usize) -> f64 {
    const CELL: f64 = 4.0;
    let fx = x as f64 / CELL;
    let fy = y as f64 / CELL;
    let gx = fx.floor() as i64;
    let gy = fy.floor() as i64;
    let tx = fx - gx as f64;
    let ty = fy - gy as f64;
    let v00 = hash01(seed, gx, gy);
    let v10 = hash01(seed, gx + 1, gy);
    let v01 = hash01(seed, gx, gy + 1);
    let v11 = hash01(seed, gx + 1, gy + 1);
    (v00 * (1.0 - tx) + v10 * tx) * (1.0 - ty) + (v01 * (1.0 - tx) + v11 * tx) * ty
}

/// Total alpha mass of a stamp in `[0,1]` units; warp tests use it.
pub fn alpha_mass(stamp: &SealStamp) -> f64 {
    let mut sum = 0.0;
    for y in 0..stamp.raster.height {
        for x in 0..stamp.raster.width {
            sum += u8_to_f64(stamp.raster.alpha(y, x));
        }
    }
    sum
}
