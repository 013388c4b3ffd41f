//! Desk-scale evaluation: duration divergence between voiced-segment
//! histograms and masked-region reconstruction error.
//!
//! These are synthetic-data analogs; their values are not comparable with
//! published numbers on real speech.

use std::io::Write;
use std::path::Path;

use cosync_autograd::Mat;
use ndarray::{s, Zip};

use crate::conditioning::MaskSpec;
use crate::error::{Error, Result};

/// Voiced-frame threshold as a fraction of the utterance's peak frame energy.
pub const RELATIVE_ENERGY_THRESHOLD: f64 = 0.2;
pub const DURATION_BINS: usize = 10;
pub const SMOOTHING_EPS: f64 = 1e-6;

/// Mean over mel bins for each frame of a `[L × F]` mel.
pub fn frame_energy(mel: &Mat) -> Vec<f64> {
    mel.rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect()
}

/// Maximal runs of frames whose energy exceeds `threshold`, as `[start, end)`.
pub fn segment_speech(mel: &Mat, threshold: f64) -> Vec<(usize, usize)> {
    runs_above(&frame_energy(mel), threshold)
}

/// [`segment_speech`] with the threshold at a fraction of the peak energy.
pub fn segment_speech_relative(mel: &Mat, fraction: f64) -> Vec<(usize, usize)> {
    let energy = frame_energy(mel);
    let peak = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    runs_above(&energy, fraction * peak)
}

fn runs_above(energy: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &e) in energy.iter().enumerate() {
        match (e > threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s0)) => {
                out.push((s0, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s0) = start {
        out.push((s0, energy.len()));
    }
    out
}

/// Smoothed histogram of segment durations over equal-width bins spanning
/// `[1, max_duration]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationHistogram {
    pub bin_edges: Vec<f64>,
    pub probs: Vec<f64>,
    pub smoothing_eps: f64,
}

impl DurationHistogram {
    /// Mixes the empirical distribution with a uniform one at weight `eps`, so
    /// every bin holds at least `eps / bins`. No durations gives the uniform.
    pub fn new(durations: &[usize], max_duration: usize, bins: usize, eps: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Metric("histogram needs at least one bin".into()));
        }
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Metric(format!("smoothing eps {eps} outside [0, 1]")));
        }
        let hi = max_duration.max(1) as f64;
        let width = (hi - 1.0) / bins as f64;
        let bin_edges = (0..=bins).map(|k| 1.0 + width * k as f64).collect();
        let mut counts = vec![0usize; bins];
        for &d in durations {
            let k = if width > 0.0 {
                (((d as f64 - 1.0) / width).floor() as usize).min(bins - 1)
            } else {
                0
            };
            counts[k] += 1;
        }
        let total = durations.len();
        let uniform = 1.0 / bins as f64;
        let probs = counts
            .iter()
            .map(|&c| {
                let p = if total == 0 { uniform } else { c as f64 / total as f64 };
                (1.0 - eps) * p + eps * uniform
            })
            .collect();
        Ok(Self {
            bin_edges,
            probs,
            smoothing_eps: eps,
        })
    }
}

/// `Σ p log(p / q)`
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

fn durations(segments: &[(usize, usize)]) -> Vec<usize> {
    segments.iter().map(|&(a, b)| b - a).collect()
}

/// KL(P_gt ‖ P_gen) between smoothed voiced-segment duration histograms.
pub fn sync_kl(gt_mel: &Mat, gen_mel: &Mat, bins: usize) -> Result<f64> {
    let gt = durations(&segment_speech_relative(gt_mel, RELATIVE_ENERGY_THRESHOLD));
    if gt.is_empty() {
        return Err(Error::Metric("ground truth has no voiced segments".into()));
    }
    let gen = durations(&segment_speech_relative(gen_mel, RELATIVE_ENERGY_THRESHOLD));
    let max_d = gt.iter().chain(&gen).copied().max().unwrap_or(1);
    let p = DurationHistogram::new(&gt, max_d, bins, SMOOTHING_EPS)?;
    let q = DurationHistogram::new(&gen, max_d, bins, SMOOTHING_EPS)?;
    Ok(kl_divergence(&p.probs, &q.probs))
}

/// Mean squared error over the frames of `mask`.
pub fn region_mse(gen: &Mat, gt: &Mat, mask: &MaskSpec) -> Result<f64> {
    if gen.dim() != gt.dim() {
        return Err(Error::shape("region_mse", format!("{:?} vs {:?}", gen.dim(), gt.dim())));
    }
    mask.check(gen.nrows())?;
    let a = gen.slice(s![mask.start..mask.end, ..]);
    let b = gt.slice(s![mask.start..mask.end, ..]);
    let sum = Zip::from(&a).and(&b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    Ok(sum / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub utt_id: String,
    pub nfe: usize,
    pub region_mse: f64,
    pub sync_kl: f64,
}

pub const EVAL_CSV_HEADER: &str = "utt_id,nfe,region_mse,sync_kl";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.utt_id, r.nfe, r.region_mse, r.sync_kl));
    }
    out
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(eval_csv(rows).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean of each numeric column per NFE, in ascending NFE order.
pub fn summarize_by_nfe(rows: &[EvalRow]) -> Vec<(usize, f64, f64)> {
    let mut nfes: Vec<usize> = rows.iter().map(|r| r.nfe).collect();
    nfes.sort_unstable();
    nfes.dedup();
    nfes.into_iter()
        .map(|n| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.nfe == n).collect();
            let k = sel.len() as f64;
            (
                n,
                sel.iter().map(|r| r.region_mse).sum::<f64>() / k,
                sel.iter().map(|r| r.sync_kl).sum::<f64>() / k,
            )
        })
        .collect()
}
