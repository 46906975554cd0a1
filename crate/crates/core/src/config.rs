//! Generator configuration: value ranges, ink/texture law, document layout,
//! and the plain-text (TOML) config file loader. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("text pool is empty")]
    EmptyTextPool,
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("unsupported glyph {0:?} in text pool")]
    UnsupportedGlyph(char),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Closed interval `[min, max]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn check(&self, name: &str) -> Result<(), ConfigError> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(ConfigError::InvalidRange(format!(
                "{name}: [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn check_within(&self, name: &str, lo: f64, hi: f64) -> Result<(), ConfigError> {
        self.check(name)?;
        if self.min < lo || self.max > hi {
            return Err(ConfigError::InvalidRange(format!(
                "{name}: [{}, {}] outside [{lo}, {hi}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
        crate::rng::uniform_in(rng, self.min, self.max)
    }
}

/// Truncated Gaussian per channel around a base ink color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InkModel {
    pub mean: [f64; 3],
    pub sigma: f64,
    /// Truncation half-width in sigmas.
    pub truncate: f64,
}

impl InkModel {
    pub fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, mean) in out.iter_mut().zip(self.mean) {
            let lo = (mean - self.truncate * self.sigma).max(0.0);
            let hi = (mean + self.truncate * self.sigma).min(1.0);
            // Rejection with a clamp fallback keeps the draw count bounded.
            let mut v = mean + self.sigma * crate::rng::next_normal(rng);
            for _ in 0..16 {
                if v >= lo && v <= hi {
                    break;
                }
                v = mean + self.sigma * crate::rng::next_normal(rng);
            }
            *o = v.clamp(lo, hi);
        }
        out
    }

    fn check(&self) -> Result<(), ConfigError> {
        for m in self.mean {
            if !(0.0..=1.0).contains(&m) {
                return Err(ConfigError::InvalidRange(format!("ink mean {m}")));
            }
        }
        if self.sigma < 0.0 || self.truncate <= 0.0 {
            return Err(ConfigError::InvalidRange("ink sigma/truncate".into()));
        }
        Ok(())
    }
}

/// Procedural "text page" backgrounds: off-white paper with horizontal
/// dark-gray word blocks and a little grain. Grayscale by construction so
/// any sampled ink color stays clearly separated from the page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocConfig {
    pub width: usize,
    pub height: usize,
    pub background: ValueRange,
    pub line_gray: ValueRange,
    pub line_height: ValueRange,
    pub line_gap: ValueRange,
    /// Fraction of a line advanced per word block, and the gap between words.
    pub word_len: ValueRange,
    pub word_gap: ValueRange,
    pub grain: f64,
    pub side_margin: usize,
}

impl Default for DocConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            background: ValueRange::new(0.90, 0.97),
            line_gray: ValueRange::new(0.35, 0.55),
            line_height: ValueRange::new(2.0, 4.0),
            line_gap: ValueRange::new(2.0, 5.0),
            word_len: ValueRange::new(4.0, 12.0),
            word_gap: ValueRange::new(2.0, 5.0),
            grain: 0.015,
            side_margin: 3,
        }
    }
}

impl DocConfig {
    pub fn check(&self) -> Result<(), ConfigError> {
        if self.width < 8 || self.height < 8 {
            return Err(ConfigError::InvalidRange("document dims".into()));
        }
        self.background.check_within("background", 0.0, 1.0)?;
        self.line_gray.check_within("line_gray", 0.0, 1.0)?;
        self.line_height.check("line_height")?;
        self.line_gap.check("line_gap")?;
        self.word_len.check("word_len")?;
        self.word_gap.check("word_gap")?;
        if !(0.0..=0.2).contains(&self.grain) {
            return Err(ConfigError::InvalidRange("grain".into()));
        }
        Ok(())
    }
}

/// Scanner-style degradation for the real-proxy part: box blur, luminance
/// noise, and a global gain/offset jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub blur_passes: usize,
    pub noise_sigma: f64,
    pub gain: ValueRange,
    pub offset: ValueRange,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            blur_passes: 1,
            noise_sigma: 0.02,
            gain: ValueRange::new(0.95, 1.03),
            offset: ValueRange::new(-0.02, 0.02),
        }
    }
}

/// Full synthetic-seal generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub doc: DocConfig,
    pub text_pool: Vec<String>,
    pub outer_radius: ValueRange,
    pub ring_width: ValueRange,
    pub glyph_height: ValueRange,
    pub arc_span: ValueRange,
    pub star_scale: ValueRange,
    pub base_opacity: ValueRange,
    pub ink: InkModel,
    pub texture_amp: ValueRange,
    pub rotation: ValueRange,
    pub shear: ValueRange,
    pub radial_distortion: ValueRange,
    /// Mask threshold on ink coverage.
    pub tau_mask: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            doc: DocConfig::default(),
            text_pool: default_text_pool(),
            outer_radius: ValueRange::new(15.0, 19.0),
            ring_width: ValueRange::new(1.5, 2.2),
            glyph_height: ValueRange::new(4.0, 6.5),
            arc_span: ValueRange::new(240.0, 330.0),
            star_scale: ValueRange::new(0.25, 0.40),
            base_opacity: ValueRange::new(0.75, 0.95),
            ink: InkModel {
                mean: [0.78, 0.08, 0.10],
                sigma: 0.05,
                truncate: 3.0,
            },
            texture_amp: ValueRange::new(0.20, 0.35),
            rotation: ValueRange::new(-12.0, 12.0),
            shear: ValueRange::new(-0.06, 0.06),
            radial_distortion: ValueRange::new(-0.04, 0.04),
            tau_mask: 0.05,
        }
    }
}

fn default_text_pool() -> Vec<String> {
    [
        "ACME", "GLOBEX", "INITECH", "UMBRELLA", "STARK CO", "WAYNE CO", "HOOLI", "VANDELAY",
        "TYRELL", "OSCORP", "WONKA", "NAKATOMI", "SOYLENT", "VIRTUCON", "ZORG LTD", "MASSIVE",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

impl SynthConfig {
    /// The real-proxy generator: a held-out color/texture law standing in
    /// for scanned real seals (blue-violet ink, heavier speckle, wider warp).
    pub fn real_proxy_defaults() -> Self {
        Self {
            ink: InkModel {
                mean: [0.14, 0.16, 0.55],
                sigma: 0.06,
                truncate: 3.0,
            },
            texture_amp: ValueRange::new(0.35, 0.55),
            base_opacity: ValueRange::new(0.65, 0.90),
            rotation: ValueRange::new(-15.0, 15.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.doc.check()?;
        if self.text_pool.is_empty() {
            return Err(ConfigError::EmptyTextPool);
        }
        for t in &self.text_pool {
            for c in t.chars() {
                if !crate::glyphs::supported(c) {
                    return Err(ConfigError::UnsupportedGlyph(c));
                }
            }
        }
        self.ring_width.check_within("ring_width", 1.0, f64::INFINITY)?;
        self.outer_radius.check("outer_radius")?;
        if self.outer_radius.min <= self.ring_width.max {
            return Err(ConfigError::InvalidRange(
                "outer_radius must exceed ring_width".into(),
            ));
        }
        self.glyph_height.check_within("glyph_height", 1.0, f64::INFINITY)?;
        self.arc_span.check_within("arc_span", f64::MIN_POSITIVE, 360.0)?;
        self.star_scale.check_within("star_scale", 0.0, 1.0)?;
        self.base_opacity.check_within("base_opacity", 1e-9, 1.0)?;
        self.ink.check()?;
        self.texture_amp.check_within("texture_amp", 0.0, 0.9)?;
        self.rotation
            .check_within("rotation", -crate::seal::ROTATION_LIMIT, crate::seal::ROTATION_LIMIT)?;
        self.shear
            .check_within("shear", -crate::seal::SHEAR_LIMIT, crate::seal::SHEAR_LIMIT)?;
        self.radial_distortion.check_within(
            "radial_distortion",
            -crate::seal::RADIAL_LIMIT,
            crate::seal::RADIAL_LIMIT,
        )?;
        if !(0.0..=1.0).contains(&self.tau_mask) {
            return Err(ConfigError::InvalidRange("tau_mask".into()));
        }
        // Joint feasibility: the longest legend must fit the worst-case
        // geometry corner at the minimum glyph height (the sampler clamps
        // the glyph height down toward that bound, never below it).
        let longest = self.text_pool.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        let worst = 0.98
            * crate::seal::max_glyph_height(
                self.outer_radius.min,
                self.ring_width.max,
                self.arc_span.min,
                longest,
            );
        if self.glyph_height.min > worst {
            return Err(ConfigError::InvalidRange(format!(
                "glyph_height min {} cannot fit a {longest}-glyph legend at outer_radius {},                  ring_width {}, arc_span {} (max feasible {worst:.2})",
                self.glyph_height.min, self.outer_radius.min, self.ring_width.max, self.arc_span.min
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Hex SHA-256 of the canonical JSON encoding, recorded in manifests for
/// provenance.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
