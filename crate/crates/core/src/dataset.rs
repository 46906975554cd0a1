//! Dataset assembly: paired synthetic/forged samples with labels, unpaired
//! real(-proxy) images, line-oriented manifests, and deterministic splits.
//!
//! A manifest is JSONL: one header line (schema version, generator config
//! hash, seed) followed by one entry per line. Image paths are relative to
//! the manifest's directory. Manifest writes are atomic (temp file+rename).

use crate::config::{config_hash, ConfigError, ScanConfig, SynthConfig};
use crate::document::{apply_scan_noise, generate_document};
use crate::imgio::{load_mask, load_rgb, save_mask, save_rgb, ImgError, RgbTensor};
use crate::rng::derive_rng;
use crate::seal::{
    composite, perturb_geometry, render_seal, LabeledSample, PixelRect, Provenance, SealError,
};
use crate::stage2::{ForgerNet, Stage2Error};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const PAIR_TAG: u64 = 0xda7a_9a12;
const SPLIT_TAG: u64 = 0xda7a_5911;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Seal(#[from] SealError),
    #[error(transparent)]
    Forger(#[from] Stage2Error),
    #[error("no readable images in {0}")]
    EmptyDirectory(PathBuf),
    #[error("bad split ratios ({train}, {val}, {test}): must be positive and sum to 1")]
    BadRatios { train: f64, val: f64, test: f64 },
    #[error("manifest parse: {0}")]
    Parse(String),
}

impl From<ConfigError> for DatasetError {
    fn from(e: ConfigError) -> Self {
        DatasetError::InvalidConfig(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

pub use crate::seal::Provenance as EntryProvenance;

/// One dataset record. Labeled provenances carry mask/clean/text/bbox; real
/// entries are unpaired and carry none of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub provenance: Provenance,
    pub stamped: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clean: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub text: Option<String>,
    /// `[x0, y0, x1, y1]`, half-open.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bbox: Option<[usize; 4]>,
    pub split: Split,
}

impl ManifestEntry {
    pub fn is_labeled(&self) -> bool {
        self.mask.is_some() && self.clean.is_some() && self.text.is_some() && self.bbox.is_some()
    }

    /// Siblings (synthetic/forged pairs) share their mask artifact; real
    /// entries are their own unit.
    fn pair_key(&self) -> String {
        self.mask.clone().unwrap_or_else(|| self.id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    schema_version: u32,
    config_hash: String,
    seed: u64,
}

const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash,
            seed,
            entries: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut buf = Vec::new();
        serde_json::to_writer(
            &mut buf,
            &ManifestHeader {
                schema_version: self.schema_version,
                config_hash: self.config_hash.clone(),
                seed: self.seed,
            },
        )
        .map_err(|e| DatasetError::Parse(e.to_string()))?;
        buf.push(b'\n');
        for e in &self.entries {
            serde_json::to_writer(&mut buf, e).map_err(|e| DatasetError::Parse(e.to_string()))?;
            buf.push(b'\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| DatasetError::Parse("empty manifest".into()))??;
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|e| DatasetError::Parse(e.to_string()))?;
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries
                .push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse(e.to_string()))?);
        }
        Ok(Self {
            schema_version: header.schema_version,
            config_hash: header.config_hash,
            seed: header.seed,
            entries,
        })
    }

    /// Check that every referenced artifact exists under `base`.
    pub fn verify_complete(&self, base: &Path) -> Result<(), DatasetError> {
        for e in &self.entries {
            for p in [Some(&e.stamped), e.mask.as_ref(), e.clean.as_ref()]
                .into_iter()
                .flatten()
            {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(DatasetError::Parse(format!(
                        "entry {}: missing artifact {}",
                        e.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn by_provenance(&self, p: Provenance) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.provenance == p)
    }

    pub fn by_split(&self, s: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == s)
    }
}

/// A labeled sample loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub provenance: Provenance,
    pub stamped: RgbTensor,
    pub mask: Option<Array2<bool>>,
    pub clean: Option<RgbTensor>,
    pub text: Option<String>,
    pub bbox: Option<PixelRect>,
    pub split: Split,
}

pub fn load_entry(base: &Path, e: &ManifestEntry) -> Result<LoadedSample, DatasetError> {
    Ok(LoadedSample {
        id: e.id.clone(),
        provenance: e.provenance,
        stamped: load_rgb(&base.join(&e.stamped))?,
        mask: e.mask.as_ref().map(|p| load_mask(&base.join(p))).transpose()?,
        clean: e.clean.as_ref().map(|p| load_rgb(&base.join(p))).transpose()?,
        text: e.text.clone(),
        bbox: e.bbox.map(|[x0, y0, x1, y1]| PixelRect { x0, y0, x1, y1 }),
        split: e.split,
    })
}

/// Load the stamped images of all matching entries.
pub fn load_stamped(
    manifest: &Manifest,
    base: &Path,
    provenance: Option<Provenance>,
    split: Option<Split>,
) -> Result<Vec<RgbTensor>, DatasetError> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        if provenance.is_some_and(|p| e.provenance != p) {
            continue;
        }
        if split.is_some_and(|s| e.split != s) {
            continue;
        }
        out.push(load_rgb(&base.join(&e.stamped))?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn one_labeled_sample(
    cfg: &SynthConfig,
    seed: u64,
    index: u64,
    pre_noise: Option<&ScanConfig>,
) -> Result<LabeledSample, DatasetError> {
    let mut rng = derive_rng(seed, &[PAIR_TAG, index]);
    let mut doc = generate_document(&mut rng, &cfg.doc);
    if let Some(scan) = pre_noise {
        doc = apply_scan_noise(&mut rng, scan, &doc);
    }
    let spec = crate::seal::sample_seal_spec(&mut rng, cfg)?;
    let stamp = render_seal(&spec)?;
    let stamp = perturb_geometry(&stamp, &spec.warp)?;
    Ok(composite(&doc, &stamp, cfg.tau_mask)?)
}

/// Merge a forged frame onto the clean document so only masked (ink) pixels
/// change: the labeled-sample contract (`stamped == clean` off-mask) holds
/// for forged entries too.
pub fn merge_within_mask(
    clean: &RgbTensor,
    forged: &RgbTensor,
    mask: &Array2<bool>,
) -> RgbTensor {
    let mut out = clean.clone();
    let (_, h, w) = out.dim();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                for c in 0..3 {
                    let q = crate::imgio::f64_to_u8(forged[[c, y, x]]);
                    out[[c, y, x]] = crate::imgio::u8_to_f64(q);
                }
            }
        }
    }
    out
}

/// Generate `n` labeled synthetic samples (and, with a forger, a realized
/// sibling per sample that shares mask/clean/text/bbox byte-identically).
/// Artifacts land under `out_dir/images/`, the manifest is written last.
pub fn generate_paired(
    n: usize,
    cfg: &SynthConfig,
    forger: Option<&ForgerNet>,
    out_dir: &Path,
    seed: u64,
) -> Result<Manifest, DatasetError> {
    if n < 1 {
        return Err(DatasetError::InvalidConfig("n must be >= 1".into()));
    }
    cfg.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images)?;

    let mut manifest = Manifest::new(config_hash(cfg), seed);
    for i in 0..n {
        let sample = one_labeled_sample(cfg, seed, i as u64, None)?;
        let stem = format!("{i:06}");
        let stamped_rel = format!("images/{stem}_stamped.png");
        let mask_rel = format!("images/{stem}_mask.png");
        let clean_rel = format!("images/{stem}_clean.png");
        save_rgb(&sample.stamped, &out_dir.join(&stamped_rel))?;
        save_mask(&sample.mask, &out_dir.join(&mask_rel))?;
        save_rgb(&sample.clean_doc, &out_dir.join(&clean_rel))?;
        let bbox = [
            sample.bbox.x0,
            sample.bbox.y0,
            sample.bbox.x1,
            sample.bbox.y1,
        ];
        manifest.entries.push(ManifestEntry {
            id: format!("s{stem}"),
            provenance: Provenance::Synthetic,
            stamped: stamped_rel,
            mask: Some(mask_rel.clone()),
            clean: Some(clean_rel.clone()),
            text: Some(sample.text.clone()),
            bbox: Some(bbox),
            split: Split::Train,
        });

        if let Some(f) = forger {
            let forged_raw = f.forge(&sample.stamped)?;
            let merged = merge_within_mask(&sample.clean_doc, &forged_raw, &sample.mask);
            let forged_rel = format!("images/{stem}_forged.png");
            save_rgb(&merged, &out_dir.join(&forged_rel))?;
            manifest.entries.push(ManifestEntry {
                id: format!("f{stem}"),
                provenance: Provenance::Forged,
                stamped: forged_rel,
                mask: Some(mask_rel),
                clean: Some(clean_rel),
                text: Some(sample.text),
                bbox: Some(bbox),
                split: Split::Train,
            });
        }
    }
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Real-proxy generation. Unlabeled mode (the Seal-DB "real part"): scanner
/// noise is applied to the finished stamped frame and no labels are kept.
/// Labeled mode (evaluation benchmarks): the document is degraded first and
/// the seal composited after, so every label invariant still holds.
pub fn generate_real_proxy(
    n: usize,
    cfg: &SynthConfig,
    scan: &ScanConfig,
    labeled: bool,
    out_dir: &Path,
    seed: u64,
) -> Result<Manifest, DatasetError> {
    if n < 1 {
        return Err(DatasetError::InvalidConfig("n must be >= 1".into()));
    }
    cfg.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut manifest = Manifest::new(config_hash(&(cfg, scan, labeled)), seed);

    for i in 0..n {
        let stem = format!("{i:06}");
        if labeled {
            let sample = one_labeled_sample(cfg, seed, i as u64, Some(scan))?;
            let stamped_rel = format!("images/{stem}_stamped.png");
            let mask_rel = format!("images/{stem}_mask.png");
            let clean_rel = format!("images/{stem}_clean.png");
            save_rgb(&sample.stamped, &out_dir.join(&stamped_rel))?;
            save_mask(&sample.mask, &out_dir.join(&mask_rel))?;
            save_rgb(&sample.clean_doc, &out_dir.join(&clean_rel))?;
            manifest.entries.push(ManifestEntry {
                id: format!("p{stem}"),
                provenance: Provenance::Synthetic,
                stamped: stamped_rel,
                mask: Some(mask_rel),
                clean: Some(clean_rel),
                text: Some(sample.text),
                bbox: Some([
                    sample.bbox.x0,
                    sample.bbox.y0,
                    sample.bbox.x1,
                    sample.bbox.y1,
                ]),
                split: Split::Train,
            });
        } else {
            let sample = one_labeled_sample(cfg, seed, i as u64, None)?;
            let mut rng = derive_rng(seed, &[PAIR_TAG, i as u64, 0x5ca7]);
            let noisy = apply_scan_noise(&mut rng, scan, &sample.stamped);
            let stamped_rel = format!("images/{stem}_real.png");
            save_rgb(&noisy, &out_dir.join(&stamped_rel))?;
            manifest.entries.push(ManifestEntry {
                id: format!("r{stem}"),
                provenance: Provenance::Real,
                stamped: stamped_rel,
                mask: None,
                clean: None,
                text: None,
                bbox: None,
                split: Split::Train,
            });
        }
    }
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Ingest user-supplied scans: one unlabeled real entry per readable image;
/// unreadable files are skipped and reported in the returned warnings.
pub fn ingest_real(dir: &Path, out_dir: &Path) -> Result<(Manifest, Vec<String>), DatasetError> {
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    names.sort();

    let mut manifest = Manifest::new(config_hash(&"ingest"), 0);
    let mut warnings = Vec::new();
    let mut count = 0usize;
    for path in names {
        match load_rgb(&path) {
            Ok(img) => {
                let rel = format!("images/{count:06}_real.png");
                save_rgb(&img, &out_dir.join(&rel))?;
                manifest.entries.push(ManifestEntry {
                    id: format!("r{count:06}"),
                    provenance: Provenance::Real,
                    stamped: rel,
                    mask: None,
                    clean: None,
                    text: None,
                    bbox: None,
                    split: Split::Train,
                });
                count += 1;
            }
            Err(e) => warnings.push(format!("skipped {}: {e}", path.display())),
        }
    }
    if count == 0 {
        return Err(DatasetError::EmptyDirectory(dir.to_path_buf()));
    }
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok((manifest, warnings))
}

/// Deterministic shuffled split assignment. Synthetic/forged siblings always
/// land in the same split (units are grouped by shared mask artifact);
/// counts follow largest-remainder rounding on units.
pub fn split(
    manifest: &Manifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Manifest, DatasetError> {
    let (tr, va, te) = ratios;
    let sum = tr + va + te;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios {
            train: tr,
            val: va,
            test: te,
        });
    }

    let mut units: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        units.entry(e.pair_key()).or_default().push(i);
    }
    let mut keys: Vec<String> = units.keys().cloned().collect();
    let mut rng = derive_rng(seed, &[SPLIT_TAG]);
    // Fisher-Yates over the sorted key list.
    for i in (1..keys.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        keys.swap(i, j);
    }

    let u = keys.len();
    let mut counts = largest_remainder(&[tr, va, te], u);
    let mut out = manifest.clone();
    for key in keys {
        let s = if counts[0] > 0 {
            counts[0] -= 1;
            Split::Train
        } else if counts[1] > 0 {
            counts[1] -= 1;
            Split::Val
        } else {
            counts[2] -= 1;
            Split::Test
        };
        for &i in &units[&key] {
            out.entries[i].split = s;
        }
    }
    Ok(out)
}

fn largest_remainder(ratios: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut rem: usize = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter() {
        if rem == 0 {
            break;
        }
        counts[i] += 1;
        rem -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage2::ForgerConfig;

    fn small_cfg() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn paired_generation_without_forger() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_paired(10, &small_cfg(), None, dir.path(), 7).unwrap();
        assert_eq!(m.entries.len(), 10);
        for e in &m.entries {
            assert_eq!(e.provenance, Provenance::Synthetic);
            assert!(e.is_labeled(), "entry {} lost labels", e.id);
        }
        m.verify_complete(dir.path()).unwrap();

        let loaded = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded, m);
        assert!(!dir.path().join("manifest.jsonl.tmp").exists());
    }

    #[test]
    fn forged_siblings_share_labels_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let forger = ForgerNet::new(ForgerConfig { channels: 4 }, 3);
        let m = generate_paired(5, &small_cfg(), Some(&forger), dir.path(), 8).unwrap();
        assert_eq!(m.entries.len(), 10);
        let synth: Vec<_> = m.by_provenance(Provenance::Synthetic).collect();
        let forged: Vec<_> = m.by_provenance(Provenance::Forged).collect();
        assert_eq!(synth.len(), 5);
        assert_eq!(forged.len(), 5);
        for (s, f) in synth.iter().zip(forged.iter()) {
            assert_eq!(s.mask, f.mask);
            assert_eq!(s.clean, f.clean);
            assert_eq!(s.text, f.text);
            assert_eq!(s.bbox, f.bbox);
            let ms = std::fs::read(dir.path().join(s.mask.as_ref().unwrap())).unwrap();
            let mf = std::fs::read(dir.path().join(f.mask.as_ref().unwrap())).unwrap();
            assert_eq!(ms, mf);
        }
    }

    #[test]
    fn forged_entries_match_clean_outside_mask() {
        let dir = tempfile::tempdir().unwrap();
        // Randomized forger so forged != synthetic inside the mask.
        let mut forger = ForgerNet::new(ForgerConfig { channels: 4 }, 4);
        let mut rng = derive_rng(5, &[1]);
        for (_, p) in forger.named_params_mut() {
            crate::rng::fill_normal(&mut rng, p.as_slice_mut().unwrap());
        }
        let m = generate_paired(2, &small_cfg(), Some(&forger), dir.path(), 9).unwrap();
        for e in m.by_provenance(Provenance::Forged) {
            let s = load_entry(dir.path(), e).unwrap();
            let mask = s.mask.unwrap();
            let clean = s.clean.unwrap();
            let (_, h, w) = clean.dim();
            for y in 0..h {
                for x in 0..w {
                    if !mask[[y, x]] {
                        for c in 0..3 {
                            assert_eq!(s.stamped[[c, y, x]], clean[[c, y, x]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_paired(3, &small_cfg(), None, d1.path(), 11).unwrap();
        let m2 = generate_paired(3, &small_cfg(), None, d2.path(), 11).unwrap();
        assert_eq!(m1, m2);
        let b1 = std::fs::read(d1.path().join("images/000000_stamped.png")).unwrap();
        let b2 = std::fs::read(d2.path().join("images/000000_stamped.png")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn real_proxy_modes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::real_proxy_defaults();
        let scan = ScanConfig::default();

        let unl = generate_real_proxy(3, &cfg, &scan, false, &dir.path().join("u"), 1).unwrap();
        for e in &unl.entries {
            assert_eq!(e.provenance, Provenance::Real);
            assert!(e.mask.is_none() && e.text.is_none() && e.clean.is_none() && e.bbox.is_none());
        }

        let lab = generate_real_proxy(2, &cfg, &scan, true, &dir.path().join("l"), 1).unwrap();
        for e in &lab.entries {
            assert!(e.is_labeled());
            let s = load_entry(&dir.path().join("l"), e).unwrap();
            let mask = s.mask.unwrap();
            let clean = s.clean.unwrap();
            let (_, h, w) = clean.dim();
            // Sub-threshold antialias ink may sit within one pixel of the
            // mask; beyond that dilation the document must be untouched.
            let near_mask = |y: usize, x: usize| -> bool {
                (y.saturating_sub(1)..=(y + 1).min(h - 1)).any(|yy| {
                    (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| mask[[yy, xx]])
                })
            };
            for y in 0..h {
                for x in 0..w {
                    if !near_mask(y, x) {
                        for c in 0..3 {
                            assert_eq!(s.stamped[[c, y, x]], clean[[c, y, x]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ingestion_skips_unreadable_files() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let img = generate_document(&mut derive_rng(1, &[1]), &Default::default());
        save_rgb(&img, &src.path().join("a.png")).unwrap();
        save_rgb(&img, &src.path().join("b.png")).unwrap();
        std::fs::write(src.path().join("notes.txt"), "not an image").unwrap();

        let (m, warnings) = ingest_real(src.path(), out.path()).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("notes.txt"));
        for e in &m.entries {
            assert_eq!(e.provenance, Provenance::Real);
            assert!(!e.is_labeled());
        }
        m.verify_complete(out.path()).unwrap();

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_real(empty.path(), out.path()),
            Err(DatasetError::EmptyDirectory(_))
        ));
    }

    #[test]
    fn split_counts_and_sibling_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let forger = ForgerNet::new(ForgerConfig { channels: 4 }, 3);
        // 50 pairs -> 100 entries.
        let m = generate_paired(50, &small_cfg(), Some(&forger), dir.path(), 13).unwrap();
        let s = split(&m, (0.8, 0.1, 0.1), 99).unwrap();
        let count = |sp: Split| s.by_split(sp).count();
        assert_eq!(count(Split::Train), 80);
        assert_eq!(count(Split::Val), 10);
        assert_eq!(count(Split::Test), 10);

        let mut by_mask: BTreeMap<&String, Vec<Split>> = BTreeMap::new();
        for e in &s.entries {
            by_mask.entry(e.mask.as_ref().unwrap()).or_default().push(e.split);
        }
        for (mask, splits) in by_mask {
            assert!(
                splits.windows(2).all(|w| w[0] == w[1]),
                "pair {mask} crosses splits"
            );
        }

        let s2 = split(&m, (0.8, 0.1, 0.1), 99).unwrap();
        assert_eq!(s, s2);
        let s3 = split(&m, (0.8, 0.1, 0.1), 100).unwrap();
        assert_ne!(s, s3);
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let m = Manifest::new("h".into(), 0);
        assert!(matches!(
            split(&m, (0.5, 0.5, 0.5), 0),
            Err(DatasetError::BadRatios { .. })
        ));
        assert!(matches!(
            split(&m, (1.0, 0.0, 0.0), 0),
            Err(DatasetError::BadRatios { .. })
        ));
    }
}
