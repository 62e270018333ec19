//! Synthetic stroke-glyph image datasets written as IDX files.
//!
//! Each class is a template of line strokes mirrored about the vertical
//! axis, so horizontal flips preserve the label. Samples jitter the stroke
//! endpoints, shift the glyph, vary thickness and intensity, and add pixel
//! noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_idx_images, write_idx_labels};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub strokes: usize,
    /// Std of per-sample endpoint jitter, pixels.
    pub jitter: f64,
    /// Largest whole-glyph shift, pixels.
    pub max_shift: f64,
    /// Std of additive pixel noise on the `[0, 1]` scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 500,
            test_per_class: 200,
            height: 28,
            width: 28,
            strokes: 3,
            jitter: 1.0,
            max_shift: 2.0,
            noise: 0.1,
            seed: 0,
        }
    }
}

type Segment = ((f64, f64), (f64, f64));

#[derive(Debug, Clone)]
struct Template {
    segments: Vec<Segment>,
}

impl Template {
    fn random(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let mut segments = Vec::with_capacity(cfg.strokes * 2);
        let point = |rng: &mut ChaCha8Rng| {
            (
                rng.random_range(0.15 * h..0.85 * h),
                rng.random_range(0.15 * w..0.5 * w),
            )
        };
        for _ in 0..cfg.strokes {
            let a = point(rng);
            let b = point(rng);
            segments.push((a, b));
        }
        Self { segments }
    }
}

fn mirror(p: (f64, f64), width: usize) -> (f64, f64) {
    (p.0, width as f64 - 1.0 - p.1)
}

fn segment_distance(p: (f64, f64), seg: Segment) -> f64 {
    let ((ay, ax), (by, bx)) = seg;
    let (dy, dx) = (by - ay, bx - ax);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((p.0 - ay) * dy + (p.1 - ax) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qy, qx) = (ay + t * dy, ax + t * dx);
    ((p.0 - qy).powi(2) + (p.1 - qx).powi(2)).sqrt()
}

fn render(template: &Template, cfg: &SynthConfig, rng: &mut ChaCha8Rng, out: &mut [u8]) {
    let jitter = Normal::new(0.0, cfg.jitter.max(1e-9)).expect("finite std");
    let noise = Normal::new(0.0, cfg.noise.max(1e-9)).expect("finite std");
    let shift = (
        rng.random_range(-cfg.max_shift..=cfg.max_shift),
        rng.random_range(-cfg.max_shift..=cfg.max_shift),
    );
    let thickness = rng.random_range(0.9..1.5);
    let intensity = rng.random_range(0.75..1.0);
    let mut segs = Vec::with_capacity(template.segments.len() * 2);
    for &(a, b) in &template.segments {
        let mut j = |p: (f64, f64)| (p.0 + jitter.sample(rng), p.1 + jitter.sample(rng));
        let (a, b) = (j(a), j(b));
        segs.push((a, b));
        segs.push((mirror(a, cfg.width), mirror(b, cfg.width)));
    }
    for seg in &mut segs {
        seg.0 .0 += shift.0;
        seg.1 .0 += shift.0;
        seg.0 .1 += shift.1;
        seg.1 .1 += shift.1;
    }
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let p = (y as f64, x as f64);
            let d = segs.iter().map(|&s| segment_distance(p, s)).fold(f64::INFINITY, f64::min);
            let v = intensity * (-(d * d) / (2.0 * thickness * thickness)).exp() + noise.sample(rng);
            out[y * cfg.width + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
}

/// Generated pixels (`n × h × w`, row-major bytes) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

pub fn generate(cfg: &SynthConfig) -> Result<(SynthSplit, SynthSplit)> {
    if cfg.classes == 0 || cfg.classes > 256 {
        return Err(Error::InvalidParameter(format!(
            "synthetic class count must lie in 1..=256, got {}",
            cfg.classes
        )));
    }
    if cfg.height < 4 || cfg.width < 4 || cfg.strokes == 0 {
        return Err(Error::InvalidParameter("synthetic glyphs need at least 4x4 pixels and one stroke".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates: Vec<Template> = (0..cfg.classes).map(|_| Template::random(cfg, &mut rng)).collect();
    let per = cfg.height * cfg.width;
    let mut make = |per_class: usize| {
        let n = per_class * cfg.classes;
        let mut split = SynthSplit {
            pixels: vec![0; n * per],
            labels: Vec::with_capacity(n),
        };
        // interleave classes so file order is not grouped by label
        for i in 0..n {
            let class = i % cfg.classes;
            render(&templates[class], cfg, &mut rng, &mut split.pixels[i * per..(i + 1) * per]);
            split.labels.push(class as u8);
        }
        split
    };
    let train = make(cfg.train_per_class);
    let test = make(cfg.test_per_class);
    Ok((train, test))
}

/// Generate a dataset into `dir` (IDX files plus `manifest.txt`) and return
/// the manifest path.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (train, test) = generate(cfg)?;
    let (h, w) = (cfg.height, cfg.width);
    write_idx_images(&dir.join("train-images.idx"), train.labels.len(), h, w, &train.pixels)?;
    write_idx_labels(&dir.join("train-labels.idx"), &train.labels)?;
    write_idx_images(&dir.join("test-images.idx"), test.labels.len(), h, w, &test.pixels)?;
    write_idx_labels(&dir.join("test-labels.idx"), &test.labels)?;
    let manifest = dir.join("manifest.txt");
    let names: Vec<String> = (0..cfg.classes).map(|c| format!("glyph{c}")).collect();
    let text = format!(
        "# synthetic glyphs, seed {}\nformat=idx\ntrain_images=train-images.idx\ntrain_labels=train-labels.idx\n\
         test_images=test-images.idx\ntest_labels=test-labels.idx\nimage_shape={h}x{w}x1\nclass_names={}\n",
        cfg.seed,
        names.join(",")
    );
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::load_dataset;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            height: 12,
            width: 12,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn templates_are_mirror_symmetric() {
        let cfg = SynthConfig { jitter: 0.0, max_shift: 0.0, noise: 0.0, ..small() };
        let (train, _) = generate(&cfg).unwrap();
        let (h, w) = (cfg.height, cfg.width);
        let img = &train.pixels[..h * w];
        for y in 0..h {
            for x in 0..w {
                let a = img[y * w + x] as i32;
                let b = img[y * w + (w - 1 - x)] as i32;
                assert!((a - b).abs() <= 1, "({y},{x}) {a} vs {b}");
            }
        }
    }

    #[test]
    fn roundtrip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &small()).unwrap();
        let ds = load_dataset(&manifest).unwrap();
        assert_eq!(ds.num_classes, 3);
        assert_eq!(ds.class_counts(), vec![4, 4, 4]);
        assert_eq!(ds.test.len(), 6);
        assert_eq!(ds.input_dim(), 144);
        assert_eq!(ds.class_names[2], "glyph2");
    }
}
