//! Gated collaborative prediction from the conservative and radical
//! analytic heads.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_temp, sym_kl, Matrix, ProbVector};

/// Welford accumulator for streaming divergence statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Population standard deviation; zero until two values are seen.
    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub tau: f64,
    pub lambda: f64,
    pub running: RunningStats,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.5,
            running: RunningStats::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Forget streaming statistics at the start of a session.
    pub fn reset_running(&mut self) {
        self.running = RunningStats::default();
    }

    /// Threshold from the streaming statistics.
    pub fn running_threshold(&self) -> f64 {
        self.running.mean + self.lambda * self.running.std()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedPrediction {
    pub z_cr: Vec<f64>,
    pub y_star: usize,
    /// `true` when the learners disagree beyond the threshold and are fused.
    pub gate: bool,
    pub d_sym: f64,
    pub alpha_c: f64,
    pub alpha_r: f64,
    /// Top-1 probability of each learner.
    pub conf_c: f64,
    pub conf_r: f64,
}

/// `mean + λ·std` over the batch, population std.
pub fn divergence_threshold(d_values: &[f64], lambda: f64) -> Result<f64> {
    if d_values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = d_values.len() as f64;
    let mean = d_values.iter().sum::<f64>() / n;
    let var = d_values.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok(mean + lambda * var.sqrt())
}

pub fn confidence(pi: &ProbVector) -> f64 {
    pi.max()
}

/// Symmetric KL between the two temperature softmaxes.
pub fn divergence(z_c: &[f64], z_r: &[f64], tau: f64) -> Result<f64> {
    check_lengths(z_c, z_r)?;
    sym_kl(&softmax_temp(z_c, tau)?, &softmax_temp(z_r, tau)?)
}

fn check_lengths(z_c: &[f64], z_r: &[f64]) -> Result<()> {
    if z_c.len() != z_r.len() {
        return Err(Error::shape("fuse", format!("{} logits", z_c.len()), z_r.len()));
    }
    Ok(())
}

pub fn fuse(z_c: &[f64], z_r: &[f64], cfg: &FusionConfig, theta_div: f64) -> Result<FusedPrediction> {
    check_lengths(z_c, z_r)?;
    let pi_c = softmax_temp(z_c, cfg.tau)?;
    let pi_r = softmax_temp(z_r, cfg.tau)?;
    let d_sym = sym_kl(&pi_c, &pi_r)?;
    let conf_c = confidence(&pi_c);
    let conf_r = confidence(&pi_r);
    let alpha_c = conf_c / (conf_c + conf_r);
    let alpha_r = 1.0 - alpha_c;
    let gate = d_sym > theta_div;
    let z_cr = if gate {
        z_c.iter()
            .zip(z_r)
            .map(|(&a, &b)| (alpha_c * a + alpha_r * b).clamp(a.min(b), a.max(b)))
            .collect()
    } else if conf_r > conf_c {
        z_r.to_vec()
    } else {
        z_c.to_vec()
    };
    Ok(FusedPrediction {
        y_star: argmax(&z_cr),
        z_cr,
        gate,
        d_sym,
        alpha_c,
        alpha_r,
        conf_c,
        conf_r,
    })
}

/// Fuse a whole evaluation batch: all divergences first, then the batch
/// threshold, then per-row fusion.
pub fn fuse_batch(z_c: &Matrix, z_r: &Matrix, cfg: &FusionConfig) -> Result<(Vec<FusedPrediction>, f64)> {
    cfg.validate()?;
    if z_c.shape() != z_r.shape() {
        return Err(Error::shape(
            "fuse_batch",
            format!("{}x{}", z_c.rows(), z_c.cols()),
            format!("{}x{}", z_r.rows(), z_r.cols()),
        ));
    }
    let d: Vec<f64> = (0..z_c.rows())
        .into_par_iter()
        .map(|i| divergence(z_c.row(i), z_r.row(i), cfg.tau))
        .collect::<Result<_>>()?;
    let theta = divergence_threshold(&d, cfg.lambda)?;
    let fused = (0..z_c.rows())
        .into_par_iter()
        .map(|i| fuse(z_c.row(i), z_r.row(i), cfg, theta))
        .collect::<Result<_>>()?;
    Ok((fused, theta))
}

/// Single-sample inference: the sample's divergence joins the running
/// statistics before the threshold is read.
pub fn fuse_streaming(z_c: &[f64], z_r: &[f64], cfg: &mut FusionConfig) -> Result<FusedPrediction> {
    cfg.validate()?;
    cfg.running.push(divergence(z_c, z_r, cfg.tau)?);
    fuse(z_c, z_r, cfg, cfg.running_threshold())
}

/// CSV with one row per sample: id, prediction, gate and fusion weights.
pub fn write_prediction_record(path: &Path, ids: &[usize], predictions: &[FusedPrediction]) -> Result<()> {
    if ids.len() != predictions.len() {
        return Err(Error::shape("write_prediction_record", ids.len(), predictions.len()));
    }
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "sample_id,y_star,gate,d_sym,alpha_c,alpha_r,top1_c,top1_r").map_err(io)?;
    for (id, p) in ids.iter().zip(predictions) {
        writeln!(
            out,
            "{id},{},{},{:e},{},{},{},{}",
            p.y_star,
            u8::from(p.gate),
            p.d_sym,
            p.alpha_c,
            p.alpha_r,
            p.conf_c,
            p.conf_r
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_arithmetic() {
        assert_eq!(divergence_threshold(&[0.3, 0.3, 0.3], 0.5).unwrap(), 0.3);
        assert_eq!(divergence_threshold(&[0.0, 2.0], 0.5).unwrap(), 1.5);
        assert_eq!(divergence_threshold(&[4.0], 3.0).unwrap(), 4.0);
        assert!(matches!(divergence_threshold(&[], 0.5), Err(Error::EmptyBatch)));
    }

    #[test]
    fn threshold_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d: Vec<f64> = (0..257).map(|_| rng.random_range(0.0..5.0)).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
        let got = divergence_threshold(&d, 0.5).unwrap();
        assert!((got - (mean + 0.5 * var.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn running_stats_match_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut cfg = FusionConfig::default();
        d.iter().for_each(|&x| cfg.running.push(x));
        let batch = divergence_threshold(&d, cfg.lambda).unwrap();
        assert!((cfg.running_threshold() - batch).abs() < 1e-12);
        cfg.reset_running();
        assert_eq!(cfg.running.count, 0);
    }

    #[test]
    fn confidence_examples() {
        assert!((confidence(&ProbVector::new(vec![0.25; 4]).unwrap()) - 0.25).abs() < 1e-15);
        assert_eq!(confidence(&ProbVector::new(vec![0.0, 1.0]).unwrap()), 1.0);
        assert_eq!(confidence(&ProbVector::new(vec![0.2, 0.5, 0.3]).unwrap()), 0.5);
    }

    #[test]
    fn agreement_returns_conservative() {
        let z = [0.4, 1.5, -0.2];
        let p = fuse(&z, &z, &FusionConfig::default(), 0.0).unwrap();
        assert!(!p.gate);
        assert_eq!(p.d_sym, 0.0);
        assert_eq!(p.z_cr, z.to_vec());
        assert_eq!(p.y_star, 1);
    }

    #[test]
    fn symmetric_disagreement_hand_case() {
        let p = fuse(&[2.0, 0.0], &[0.0, 2.0], &FusionConfig::default(), 0.0).unwrap();
        assert!(p.gate);
        assert_eq!((p.alpha_c, p.alpha_r), (0.5, 0.5));
        assert_eq!(p.z_cr, vec![1.0, 1.0]);
        assert_eq!(p.y_star, 0);
    }

    #[test]
    fn low_gate_picks_more_confident() {
        let z_c = [1.0, 0.9];
        let z_r = [3.0, 0.0];
        let p = fuse(&z_c, &z_r, &FusionConfig::default(), f64::INFINITY).unwrap();
        assert!(!p.gate);
        assert_eq!(p.z_cr, z_r.to_vec());
    }

    #[test]
    fn length_mismatch() {
        assert!(fuse(&[1.0], &[1.0, 2.0], &FusionConfig::default(), 0.0).is_err());
    }

    #[test]
    fn batch_and_streaming() {
        let z_c = Matrix::new(2, 2, vec![2.0, 0.0, 1.0, 0.0]).unwrap();
        let z_r = Matrix::new(2, 2, vec![0.0, 2.0, 1.0, 0.0]).unwrap();
        let (preds, theta) = fuse_batch(&z_c, &z_r, &FusionConfig::default()).unwrap();
        assert_eq!(preds.len(), 2);
        assert!(preds[0].gate && !preds[1].gate);
        assert!(theta > 0.0);

        let mut cfg = FusionConfig::default();
        let first = fuse_streaming(z_c.row(0), z_r.row(0), &mut cfg).unwrap();
        // one sample: threshold equals its own divergence, so no fusion
        assert!(!first.gate);
        assert_eq!(cfg.running.count, 1);
    }

    #[test]
    fn record_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        let p = fuse(&[2.0, 0.0], &[0.0, 2.0], &FusionConfig::default(), 0.0).unwrap();
        write_prediction_record(&path, &[7], &[p]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("sample_id,"));
        assert!(lines.next().unwrap().starts_with("7,0,1,"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn logits() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (1usize..8).prop_flat_map(|k| {
                (prop::collection::vec(-5.0f64..5.0, k), prop::collection::vec(-5.0f64..5.0, k))
            })
        }

        proptest! {
            #[test]
            fn alphas_sum_to_one((z_c, z_r) in logits(), theta in 0.0f64..2.0) {
                let p = fuse(&z_c, &z_r, &FusionConfig::default(), theta).unwrap();
                prop_assert!((p.alpha_c + p.alpha_r - 1.0).abs() < 1e-15);
                prop_assert_eq!(p.y_star, argmax(&p.z_cr));
            }

            #[test]
            fn branches((z_c, z_r) in logits(), theta in 0.0f64..2.0) {
                let p = fuse(&z_c, &z_r, &FusionConfig::default(), theta).unwrap();
                if p.gate {
                    for ((v, a), b) in p.z_cr.iter().zip(&z_c).zip(&z_r) {
                        prop_assert!(*v >= a.min(*b) && *v <= a.max(*b));
                    }
                } else {
                    prop_assert!(p.z_cr == z_c || p.z_cr == z_r);
                }
            }
        }
    }
}
