//! Pixel-perturbation game: perturb the most salient regions first and watch
//! the model score fall. A faster fall (lower AUPC) means a better attribution.

use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::autodiff::{Model, ScoreTarget};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::saliency::abs_channel_sum;
use crate::tensor::{Tensor, ValueRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbEvalConfig {
    pub kernel: usize,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for PerturbEvalConfig {
    fn default() -> Self {
        PerturbEvalConfig {
            kernel: 15,
            steps: 30,
            samples: 50,
            seed: 0,
        }
    }
}

impl PerturbEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.steps == 0 || self.samples == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel, steps and samples must be positive (got {}, {}, {})",
                self.kernel, self.steps, self.samples
            )));
        }
        Ok(())
    }
}

/// Top-left anchors of non-overlapping `kernel x kernel` windows, most salient
/// first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegionSequence {
    pub regions: Vec<(usize, usize)>,
    pub kernel: usize,
}

fn overlaps(a: (usize, usize), b: (usize, usize), k: usize) -> bool {
    a.0.abs_diff(b.0) < k && a.1.abs_diff(b.1) < k
}

/// Mean of `plane` over every stride-1 `k x k` window, row-major by anchor.
fn window_means(plane: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (nr, nc) = (h - k + 1, w - k + 1);
    let area = (k * k) as f64;
    let mut out = Vec::with_capacity(nr * nc);
    for r in 0..nr {
        for c in 0..nc {
            let mut s = 0.0;
            for y in r..r + k {
                s += plane[y * w + c..y * w + c + k].iter().sum::<f64>();
            }
            out.push(s / area);
        }
    }
    out
}

/// Scores every stride-1 window by its mean absolute attribution (summed over
/// channels) and greedily keeps the best window that does not overlap any
/// window already kept. Ties go to the earliest anchor in row-major order.
pub fn order_regions(values: &Tensor, kernel: usize, steps: usize) -> Result<RegionSequence> {
    let (h, w, plane) = abs_channel_sum(values)?;
    if kernel == 0 || kernel > h || kernel > w {
        return Err(Error::InvalidArgument(format!(
            "{kernel}x{kernel} window does not fit a {h}x{w} map"
        )));
    }
    let nc = w - kernel + 1;
    let scores = window_means(&plane, h, w, kernel);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut regions: Vec<(usize, usize)> = Vec::new();
    for idx in order {
        let anchor = (idx / nc, idx % nc);
        if regions.iter().all(|&r| !overlaps(r, anchor, kernel)) {
            regions.push(anchor);
        }
    }
    if regions.len() < steps {
        return Err(Error::InsufficientRegions {
            requested: steps,
            available: regions.len(),
            kernel,
        });
    }
    regions.truncate(steps);
    Ok(RegionSequence { regions, kernel })
}

/// Copy of `x` with every channel of the window at `region` replaced by
/// uniform draws over that channel's valid range. Draw order is channel, row,
/// column.
pub fn perturb_region(
    x: &Tensor,
    region: (usize, usize),
    kernel: usize,
    range: &ValueRange,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor> {
    let (c, h, w) = x.spatial_dims()?;
    range.check_channels(c)?;
    let (r0, c0) = region;
    if kernel == 0 || r0 + kernel > h || c0 + kernel > w {
        return Err(Error::InvalidArgument(format!(
            "region at ({r0}, {c0}) with kernel {kernel} exceeds {h}x{w}"
        )));
    }
    let mut data = x.data().to_vec();
    for ch in 0..c {
        let (lo, hi) = range.channel(ch);
        for y in r0..r0 + kernel {
            for xx in c0..c0 + kernel {
                data[(ch * h + y) * w + xx] = rng::uniform(rng, lo as f64, hi as f64) as f32;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationCurve {
    /// Normalized mean score per step; `points[0] == 1.0`.
    pub points: Vec<f64>,
    pub seed: u64,
}

impl PerturbationCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,normalized_score\n");
        for (l, v) in self.points.iter().enumerate() {
            out.push_str(&format!("{l},{v}\n"));
        }
        out
    }
}

/// Everything a game run produces.
#[derive(Debug, Clone)]
pub struct GameOutcome {
    pub curve: PerturbationCurve,
    pub regions: RegionSequence,
    /// The committed input after the last step.
    pub final_input: Tensor,
    /// Raw scores of the committed candidates, one per step.
    pub committed_scores: Vec<f64>,
}

/// Index of the committed candidate: the lower median by score, ties broken
/// by sample index.
fn lower_median(scores: &[f64]) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx[scores.len().div_ceil(2) - 1]
}

pub fn play_game(
    model: &Model,
    x: &Tensor,
    attr: &AttributionMap,
    target: ScoreTarget,
    range: &ValueRange,
    cfg: &PerturbEvalConfig,
) -> Result<GameOutcome> {
    cfg.validate()?;
    if attr.values.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "attribution shape {:?} does not match input {:?}",
            attr.values.shape(),
            x.shape()
        )));
    }
    let predicted = model.predict(x)?;
    if predicted != target.class_index {
        return Err(Error::InvalidArgument(format!(
            "target class {} is not the predicted class {predicted}",
            target.class_index
        )));
    }
    let f0 = model.score(x, target)?;
    if !(f0.abs() >= 1e-12) {
        return Err(Error::UnstableNormalization(f0));
    }
    let regions = order_regions(&attr.values, cfg.kernel, cfg.steps)?;

    let candidate = |state: &Tensor, step: usize, p: usize, region: (usize, usize)| {
        let mut r = rng::substream(cfg.seed, tags::PERTURB, &[step as u64, p as u64]);
        perturb_region(state, region, cfg.kernel, range, &mut r)
    };

    let mut state = x.clone();
    let mut points = vec![1.0];
    let mut committed_scores = Vec::with_capacity(cfg.steps);
    for (i, &region) in regions.regions.iter().enumerate() {
        let step = i + 1;
        let scores = (0..cfg.samples)
            .into_par_iter()
            .map(|p| model.score(&candidate(&state, step, p, region)?, target))
            .collect::<Result<Vec<f64>>>()?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        points.push(mean / f0);
        let chosen = lower_median(&scores);
        committed_scores.push(scores[chosen]);
        state = candidate(&state, step, chosen, region)?;
    }
    Ok(GameOutcome {
        curve: PerturbationCurve { points, seed: cfg.seed },
        regions,
        final_input: state,
        committed_scores,
    })
}

/// Runs the game and returns the normalized mean-score curve.
pub fn perturbation_game(
    model: &Model,
    x: &Tensor,
    attr: &AttributionMap,
    target: ScoreTarget,
    range: &ValueRange,
    cfg: &PerturbEvalConfig,
) -> Result<PerturbationCurve> {
    play_game(model, x, attr, target, range, cfg).map(|o| o.curve)
}

/// Composite Simpson's rule over uniformly spaced points. With an odd number
/// of intervals the last one uses the trapezoid rule.
pub fn simpson_auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "area needs at least 2 points, got {}",
            points.len()
        )));
    }
    let dt = points[1].0 - points[0].0;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("abscissae must be increasing".into()));
    }
    for (i, pair) in points.windows(2).enumerate() {
        let step = pair[1].0 - pair[0].0;
        if (step - dt).abs() > 1e-9 * dt.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "non-uniform spacing at interval {i}: {step} vs {dt}"
            )));
        }
    }
    let n = points.len() - 1;
    let mut area = 0.0;
    let mut i = 0;
    while i + 2 <= n {
        area += dt / 3.0 * (points[i].1 + 4.0 * points[i + 1].1 + points[i + 2].1);
        i += 2;
    }
    if i < n {
        area += dt / 2.0 * (points[i].1 + points[i + 1].1);
    }
    Ok(area)
}

pub fn aupc(curve: &PerturbationCurve) -> Result<f64> {
    let points: Vec<(f64, f64)> = curve.points.iter().enumerate().map(|(l, &v)| (l as f64, v)).collect();
    simpson_auc(&points)
}
