//! Procedural document backgrounds and scanner-style degradation.
//!
//! Pages are grayscale: an off-white sheet with horizontal dark word blocks
//! standing in for body text, plus mild grain. Grayscale pages guarantee the
//! sampled ink colors stay separated from every page value, which the
//! compositing locality oracle relies on.

use crate::config::{DocConfig, ScanConfig};
use crate::imgio::RgbTensor;
use crate::rng::next_normal;
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;

/// Generate one text-page background.
pub fn generate_document(rng: &mut ChaCha8Rng, cfg: &DocConfig) -> RgbTensor {
    let (w, h) = (cfg.width, cfg.height);
    let bg = cfg.background.sample(rng);
    let mut gray = ndarray::Array2::from_elem((h, w), bg);

    let margin = cfg.side_margin.min(w / 4);
    let mut y = cfg.line_gap.sample(rng).round() as usize + 1;
    while y + 1 < h {
        let lh = (cfg.line_height.sample(rng).round() as usize).max(1);
        if y + lh + 1 >= h {
            break;
        }
        let shade = cfg.line_gray.sample(rng);
        let mut x = margin;
        while x + 1 < w - margin {
            let word = (cfg.word_len.sample(rng).round() as usize).max(2);
            let gap = (cfg.word_gap.sample(rng).round() as usize).max(1);
            let end = (x + word).min(w - margin);
            for yy in y..y + lh {
                for xx in x..end {
                    gray[[yy, xx]] = shade;
                }
            }
            x = end + gap;
        }
        y += lh + (cfg.line_gap.sample(rng).round() as usize).max(1);
    }

    let mut out = Array3::zeros((3, h, w));
    for yy in 0..h {
        for xx in 0..w {
            let g = (gray[[yy, xx]] + cfg.grain * next_normal(rng)).clamp(0.0, 1.0);
            for c in 0..3 {
                out[[c, yy, xx]] = g;
            }
        }
    }
    out
}

/// Scanner degradation: separable box blur passes, per-pixel luminance
/// noise, and a global gain/offset jitter. Used on the unpaired real-proxy
/// part (it carries no labels, so the whole frame may change).
pub fn apply_scan_noise(rng: &mut ChaCha8Rng, cfg: &ScanConfig, img: &RgbTensor) -> RgbTensor {
    let (c, h, w) = img.dim();
    let mut out = img.clone();
    for _ in 0..cfg.blur_passes {
        out = box_blur3(&out);
    }
    let gain = cfg.gain.sample(rng);
    let offset = cfg.offset.sample(rng);
    for y in 0..h {
        for x in 0..w {
            let n = cfg.noise_sigma * next_normal(rng);
            for ci in 0..c {
                out[[ci, y, x]] = (out[[ci, y, x]] * gain + offset + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn box_blur3(img: &RgbTensor) -> RgbTensor {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            sum += img[[ci, yy as usize, xx as usize]];
                            n += 1.0;
                        }
                    }
                }
                out[[ci, y, x]] = sum / n;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn documents_are_grayscale_and_deterministic() {
        let cfg = DocConfig::default();
        let a = generate_document(&mut derive_rng(3, &[0]), &cfg);
        let b = generate_document(&mut derive_rng(3, &[0]), &cfg);
        assert_eq!(a, b);
        let (_, h, w) = a.dim();
        for y in 0..h {
            for x in 0..w {
                assert_eq!(a[[0, y, x]], a[[1, y, x]]);
                assert_eq!(a[[0, y, x]], a[[2, y, x]]);
            }
        }
        // Both light paper and dark line pixels should exist.
        let vals: Vec<f64> = a.iter().cloned().collect();
        assert!(vals.iter().cloned().fold(f64::MIN, f64::max) > 0.85);
        assert!(vals.iter().cloned().fold(f64::MAX, f64::min) < 0.6);
    }

    #[test]
    fn scan_noise_changes_pixels_but_stays_in_range() {
        let cfg = DocConfig::default();
        let doc = generate_document(&mut derive_rng(4, &[0]), &cfg);
        let noisy = apply_scan_noise(&mut derive_rng(4, &[1]), &ScanConfig::default(), &doc);
        assert_ne!(doc, noisy);
        assert!(noisy.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
