//! Gradient checking against central finite differences.
//!
//! Two levels are checked. Each layer's vector-Jacobian product is compared
//! with finite differences of `v · layer(a)` for a fixed random cotangent `v`,
//! which pins a failure on a specific layer. The end-to-end input gradient is
//! then compared coordinate by coordinate with
//! [`Model::finite_diff_gradient`].

use serde::Serialize;

use super::layer::Layer;
use super::model::{Model, ScoreKind, ScoreTarget};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub h: f64,
    pub rel_tol: f64,
    /// Absolute error always accepted.
    pub abs_tol: f64,
    /// Fraction of end-to-end coordinates that must agree.
    pub min_pass_fraction: f64,
    /// Cap on probed coordinates per layer and sample.
    pub max_coords: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            rel_tol: 1e-3,
            abs_tol: 1e-5,
            min_pass_fraction: 0.99,
            max_coords: 512,
        }
    }
}

impl GradCheckConfig {
    /// Relative error with the absolute floor folded in: `<= rel_tol` exactly
    /// when the pair is accepted.
    pub fn rel_err(&self, a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs()).max(self.abs_tol / self.rel_tol);
        (a - b).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub index: usize,
    pub kind: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose difference stencil straddled a kink.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub layers: Vec<LayerCheck>,
    pub model_max_rel_err: f64,
    pub model_pass_fraction: f64,
    pub model_checked: usize,
    /// End-to-end coordinates whose stencil `x ± h` changed some ReLU sign
    /// or maxpool winner; central differences are meaningless there.
    pub model_skipped: usize,
    pub passed: bool,
}

impl GradCheckReport {
    /// Max relative error per layer type, in first-appearance order.
    pub fn by_kind(&self) -> Vec<(&'static str, f64, bool)> {
        let mut out: Vec<(&'static str, f64, bool)> = Vec::new();
        for l in &self.layers {
            match out.iter_mut().find(|(k, _, _)| *k == l.kind) {
                Some(entry) => {
                    entry.1 = entry.1.max(l.max_rel_err);
                    entry.2 &= l.passed;
                }
                None => out.push((l.kind, l.max_rel_err, l.passed)),
            }
        }
        out
    }

    pub fn failing_layers(&self) -> Vec<&LayerCheck> {
        self.layers.iter().filter(|l| !l.passed).collect()
    }
}

/// Signature of a layer backward rule: `(layer, input_shape, x, y, gy) -> gx`.
pub type BackwardRule<'a> = dyn Fn(&Layer, &[usize], &[f64], &[f64], &[f64]) -> Vec<f64> + Sync + 'a;

pub fn gradcheck(model: &Model, inputs: &[Tensor], kind: ScoreKind, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    gradcheck_with(model, inputs, kind, cfg, &|l, s, x, y, gy| l.backward(s, x, y, gy))
}

/// As [`gradcheck`], with the layer backward rules supplied by the caller.
/// The end-to-end check also uses `rule`.
pub fn gradcheck_with(
    model: &Model,
    inputs: &[Tensor],
    kind: ScoreKind,
    cfg: &GradCheckConfig,
    rule: &BackwardRule,
) -> Result<GradCheckReport> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "gradient check needs at least one input sample".into(),
        ));
    }
    let n_layers = model.layers().len();
    let mut layers: Vec<LayerCheck> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(index, l)| LayerCheck {
            index,
            kind: l.kind(),
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
            passed: true,
        })
        .collect();
    let shapes = model.layer_shapes();
    let (mut model_max, mut model_ok, mut model_n, mut model_skipped) = (0.0f64, 0usize, 0usize, 0usize);

    for (s, x) in inputs.iter().enumerate() {
        if x.shape() != model.input_shape() {
            return Err(Error::Shape(format!(
                "sample {s} has shape {:?}, model expects {:?}",
                x.shape(),
                model.input_shape()
            )));
        }
        let acts = model.trace(&x.to_f64(), n_layers)?;
        for (t, layer) in model.layers().iter().enumerate() {
            let a = &acts[t];
            let y = &acts[t + 1];
            let mut r = rng::substream(s as u64, 0x006c_6179_6572, &[t as u64]);
            let v: Vec<f64> = (0..y.len()).map(|_| rng::standard_normal(&mut r)).collect();
            let analytic = rule(layer, &shapes[t], a, y, &v);
            let phi = |p: &[f64]| -> f64 { layer.forward(&shapes[t], p).iter().zip(&v).map(|(a, b)| a * b).sum() };
            let entry = &mut layers[t];
            let mut probe = a.clone();
            let phi0 = phi(a);
            for i in probe_coords(a.len(), cfg.max_coords) {
                probe[i] = a[i] + cfg.h;
                let up = phi(&probe);
                probe[i] = a[i] - cfg.h;
                let down = phi(&probe);
                probe[i] = a[i];
                if layer.has_kinks() {
                    let fwd = (up - phi0) / cfg.h;
                    let bwd = (phi0 - down) / cfg.h;
                    if (fwd - bwd).abs() > 1e-6 * (1.0 + fwd.abs() + bwd.abs()) {
                        entry.skipped += 1;
                        continue;
                    }
                }
                let fd = (up - down) / (2.0 * cfg.h);
                let e = cfg.rel_err(analytic[i], fd);
                entry.max_rel_err = entry.max_rel_err.max(e);
                entry.checked += 1;
                if e > cfg.rel_tol {
                    entry.passed = false;
                }
            }
        }

        let straddles = kink_straddles(model, &acts[0], cfg.h)?;
        for class in 0..model.output_dim().min(2) {
            let target = ScoreTarget {
                class_index: class,
                kind,
            };
            let analytic = gradient_with_rule(model, &acts, target, rule);
            let fd = model.finite_diff_f64(&acts[0], target, cfg.h)?;
            for ((a, b), &skip) in analytic.iter().zip(&fd).zip(&straddles) {
                if skip {
                    model_skipped += 1;
                    continue;
                }
                let e = cfg.rel_err(*a, *b);
                model_max = model_max.max(e);
                model_n += 1;
                if e <= cfg.rel_tol {
                    model_ok += 1;
                }
            }
        }
    }

    let model_pass_fraction = if model_n == 0 {
        1.0
    } else {
        model_ok as f64 / model_n as f64
    };
    let passed = layers.iter().all(|l| l.passed) && model_pass_fraction >= cfg.min_pass_fraction;
    Ok(GradCheckReport {
        layers,
        model_max_rel_err: model_max,
        model_pass_fraction,
        model_checked: model_n,
        model_skipped,
        passed,
    })
}

fn branch_patterns(model: &Model, x: &[f64]) -> Result<Vec<Vec<usize>>> {
    let acts = model.trace(x, model.layers().len())?;
    Ok(model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.has_kinks())
        .map(|(t, l)| l.branch_pattern(&model.layer_shapes()[t], &acts[t]))
        .collect())
}

/// For each input coordinate, whether moving it by `±h` switches any
/// piecewise-linear branch.
fn kink_straddles(model: &Model, x: &[f64], h: f64) -> Result<Vec<bool>> {
    if !model.layers().iter().any(Layer::has_kinks) {
        return Ok(vec![false; x.len()]);
    }
    let center = branch_patterns(model, x)?;
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = branch_patterns(model, &probe)?;
        probe[i] = x[i] - h;
        let down = branch_patterns(model, &probe)?;
        probe[i] = x[i];
        out.push(up != center || down != center);
    }
    Ok(out)
}

fn probe_coords(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

fn gradient_with_rule(model: &Model, acts: &[Vec<f64>], target: ScoreTarget, rule: &BackwardRule) -> Vec<f64> {
    let layers = model.layers();
    let end = match layers.last() {
        Some(Layer::Softmax) => layers.len() - 1,
        _ => layers.len(),
    };
    let logits = &acts[end];
    let mut g = vec![0.0; logits.len()];
    match target.kind {
        ScoreKind::Logit => g[target.class_index] = 1.0,
        ScoreKind::Probability => {
            let p = super::layer::softmax(logits);
            let pc = p[target.class_index];
            for (j, gj) in g.iter_mut().enumerate() {
                let delta = if j == target.class_index { 1.0 } else { 0.0 };
                *gj = pc * (delta - p[j]);
            }
        }
    }
    for t in (0..end).rev() {
        g = rule(&layers[t], &model.layer_shapes()[t], &acts[t], &acts[t + 1], &g);
    }
    g
}
