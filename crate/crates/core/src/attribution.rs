//! Gradient-based attribution methods: Integrated Gradients (single baseline
//! and averaged over uniform-noise baselines), SmoothGrad over an arbitrary
//! base method, and SmoothTaylor.
//!
//! Per-sample gradient evaluations run on the rayon pool; partial results are
//! always summed in sample-index order so the output does not depend on
//! scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Model, ScoreTarget};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::{Tensor, ValueRange};

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub target: ScoreTarget,
    pub method_tag: String,
}

impl AttributionMap {
    fn build(shape: &[usize], values: &[f64], target: ScoreTarget, method_tag: String) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{method_tag} attribution")));
        }
        Ok(AttributionMap {
            values: Tensor::from_f64(shape.to_vec(), values)?,
            target,
            method_tag,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// Gaussian noise scale and sample count: `R` roots for SmoothTaylor, `N'`
/// noisy copies for SmoothGrad.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub count: usize,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(sigma: f64, count: usize, seed: u64) -> Self {
        NoiseConfig { sigma, count, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.count == 0 {
            return Err(Error::InvalidArgument("noise sample count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Zero,
    UniformNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IGConfig {
    /// Riemann steps `M`.
    pub steps: usize,
    pub baseline_kind: BaselineKind,
    /// Number of noise baselines `N`.
    pub baseline_count: usize,
    pub seed: u64,
}

impl IGConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("IG needs at least one step".into()));
        }
        if self.baseline_count == 0 {
            return Err(Error::InvalidArgument("IG needs at least one baseline".into()));
        }
        Ok(())
    }
}

/// Mean of `count` per-sample vectors of length `n`, evaluated in parallel
/// chunks and accumulated in index order.
fn ordered_mean<F>(count: usize, n: usize, sample: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    const CHUNK: usize = 64;
    let mut acc = vec![0.0f64; n];
    let mut start = 0;
    while start < count {
        let end = (start + CHUNK).min(count);
        let parts: Vec<Vec<f64>> = (start..end).into_par_iter().map(&sample).collect::<Result<_>>()?;
        for part in parts {
            for (a, v) in acc.iter_mut().zip(part) {
                *a += v;
            }
        }
        start = end;
    }
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

fn check_same_shape(model: &Model, x: &Tensor, other: &Tensor, what: &str) -> Result<()> {
    if x.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match model input {:?}",
            x.shape(),
            model.input_shape()
        )));
    }
    if other.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "{what} shape {:?} does not match input shape {:?}",
            other.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// Right-endpoint Riemann approximation of Integrated Gradients,
/// `(x - z) * (1/M) Σ_{m=1..M} ∇f(z + (m/M)(x - z))`.
pub fn integrated_gradients(
    model: &Model,
    x: &Tensor,
    z: &Tensor,
    target: ScoreTarget,
    steps: usize,
) -> Result<AttributionMap> {
    check_same_shape(model, x, z, "baseline")?;
    let grads = ig_path_mean(model, &x.to_f64(), &z.to_f64(), target, steps)?;
    let values: Vec<f64> = x
        .data()
        .iter()
        .zip(z.data())
        .zip(&grads)
        .map(|((&xi, &zi), g)| (xi as f64 - zi as f64) * g)
        .collect();
    AttributionMap::build(x.shape(), &values, target, format!("ig(M={steps})"))
}

fn ig_path_mean(model: &Model, x: &[f64], z: &[f64], target: ScoreTarget, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("IG needs at least one step".into()));
    }
    let m_total = steps as f64;
    ordered_mean(steps, x.len(), |m| {
        let alpha = (m + 1) as f64 / m_total;
        let point: Vec<f64> = z.iter().zip(x).map(|(&zi, &xi)| zi + alpha * (xi - zi)).collect();
        Ok(model.score_and_gradient_f64(&point, target)?.1)
    })
}

/// The `n`-th uniform-noise baseline for `x`.
pub fn noise_baseline(x: &Tensor, range: &ValueRange, seed: u64, n: usize) -> Result<Tensor> {
    let (c, h, w) = x.spatial_dims()?;
    range.check_channels(c)?;
    let mut r = rng::substream(seed, tags::BASELINE, &[n as u64]);
    let plane = h * w;
    let data = (0..x.len())
        .map(|i| {
            let (lo, hi) = range.channel(i / plane);
            rng::uniform(&mut r, lo as f64, hi as f64) as f32
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Integrated Gradients averaged over `N` uniform-noise baselines drawn from
/// `range`.
pub fn integrated_gradients_noise_avg(
    model: &Model,
    x: &Tensor,
    target: ScoreTarget,
    cfg: &IGConfig,
    range: &ValueRange,
) -> Result<AttributionMap> {
    cfg.validate()?;
    if cfg.baseline_kind != BaselineKind::UniformNoise {
        return Err(Error::InvalidArgument(
            "noise-averaged IG requires uniform_noise baselines".into(),
        ));
    }
    let mut acc = vec![0.0f64; x.len()];
    for n in 0..cfg.baseline_count {
        let z = noise_baseline(x, range, cfg.seed, n)?;
        let map = integrated_gradients(model, x, &z, target, cfg.steps)?;
        for (a, v) in acc.iter_mut().zip(map.values.data()) {
            *a += *v as f64;
        }
    }
    let inv = 1.0 / cfg.baseline_count as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    AttributionMap::build(
        x.shape(),
        &acc,
        target,
        format!("ig-noise(M={},N={})", cfg.steps, cfg.baseline_count),
    )
}

/// The `r`-th root `x + ε`, `ε ~ N(0, σ²)` elementwise. Root `r` depends only
/// on `(seed, r)`, so a run with more roots extends a run with fewer.
pub fn root(x: &Tensor, cfg: &NoiseConfig, r: usize) -> Result<Tensor> {
    let mut g = rng::substream(cfg.seed, tags::ROOT, &[r as u64]);
    let data = x
        .data()
        .iter()
        .map(|&v| (v as f64 + cfg.sigma * rng::standard_normal(&mut g)) as f32)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn generate_roots(x: &Tensor, cfg: &NoiseConfig) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    (0..cfg.count).map(|r| root(x, cfg, r)).collect()
}

/// Plain input gradient as an attribution map.
pub fn gradient_map(model: &Model, x: &Tensor, target: ScoreTarget) -> Result<AttributionMap> {
    let g = model.gradient(x, target)?;
    Ok(AttributionMap {
        values: g,
        target,
        method_tag: "gradient".into(),
    })
}

/// Averages `base` over noisy copies `x + ε`. The copies are exactly the
/// roots of [`generate_roots`] for the same config.
pub fn smooth_grad<F>(x: &Tensor, target: ScoreTarget, cfg: &NoiseConfig, base: F) -> Result<AttributionMap>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    cfg.validate()?;
    let mean = ordered_mean(cfg.count, x.len(), |r| {
        let noisy = root(x, cfg, r)?;
        let out = base(&noisy)?;
        if out.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "base method returned shape {:?} for input {:?}",
                out.shape(),
                x.shape()
            )));
        }
        Ok(out.to_f64())
    })?;
    AttributionMap::build(
        x.shape(),
        &mean,
        target,
        format!("smoothgrad(sigma={},N={})", cfg.sigma, cfg.count),
    )
}

/// SmoothTaylor: `(1/R) Σ_r (x - z_r) ⊙ ∇f(z_r)` over Gaussian roots.
pub fn smooth_taylor(model: &Model, x: &Tensor, target: ScoreTarget, cfg: &NoiseConfig) -> Result<AttributionMap> {
    cfg.validate()?;
    check_same_shape(model, x, x, "input")?;
    let xs = x.to_f64();
    let mean = ordered_mean(cfg.count, x.len(), |r| {
        let z = root(x, cfg, r)?;
        let zs = z.to_f64();
        let (_, g) = model.score_and_gradient_f64(&zs, target)?;
        Ok(xs.iter().zip(&zs).zip(g).map(|((xi, zi), gi)| (xi - zi) * gi).collect())
    })?;
    AttributionMap::build(
        x.shape(),
        &mean,
        target,
        format!("smoothtaylor(sigma={},R={})", cfg.sigma, cfg.count),
    )
}

/// Base method of SmoothGrad under which it reproduces SmoothTaylor:
/// `x' ↦ ∇f(x') ⊙ (x - x')`. With `sign = -1.0` the product uses
/// `(x' - x)` instead.
pub fn taylor_term_base<'a>(
    model: &'a Model,
    x: &'a Tensor,
    target: ScoreTarget,
    sign: f64,
) -> impl Fn(&Tensor) -> Result<Tensor> + Sync + 'a {
    move |xp: &Tensor| {
        let (_, g) = model.score_and_gradient_f64(&xp.to_f64(), target)?;
        let v: Vec<f64> = x
            .data()
            .iter()
            .zip(xp.data())
            .zip(g)
            .map(|((&a, &b), gi)| sign * (a as f64 - b as f64) * gi)
            .collect();
        Tensor::from_f64(x.shape().to_vec(), &v)
    }
}

/// L∞ distance between SmoothTaylor and SmoothGrad with the Taylor-term base
/// method on the same noise stream.
pub fn verify_smoothgrad_equivalence(model: &Model, x: &Tensor, target: ScoreTarget, cfg: &NoiseConfig) -> Result<f64> {
    let st = smooth_taylor(model, x, target, cfg)?;
    let sg = smooth_grad(x, target, cfg, taylor_term_base(model, x, target, 1.0))?;
    Ok(st.values.max_abs_diff(&sg.values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Layer;
    use crate::toy;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    fn square() -> Model {
        Model::new(vec![1], vec![Layer::Square]).unwrap()
    }

    #[test]
    fn ig_linear_single_step() {
        let m = toy::linear(&[2.0, 3.0], 0.0);
        let a = integrated_gradients(&m, &t(&[1.0, 1.0]), &t(&[0.0, 0.0]), ScoreTarget::logit(0), 1).unwrap();
        assert_eq!(a.values.data(), &[2.0, 3.0]);
        assert_eq!(a.values.sum(), 5.0);
    }

    #[test]
    fn ig_zero_when_input_equals_baseline() {
        let m = toy::random_mlp(1, 4, &[5], 2, toy::Activation::Relu);
        let x = toy::random_input(2, &[4], 1.0);
        for steps in [1, 7] {
            let a = integrated_gradients(&m, &x, &x, ScoreTarget::logit(1), steps).unwrap();
            assert!(a.values.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ig_square_against_analytic_integral() {
        // ∫_0^1 2(2α) dα · 2 = 4; right-endpoint sums overshoot by 4/M.
        let m = square();
        let x = t(&[2.0]);
        let z = t(&[0.0]);
        let two = integrated_gradients(&m, &x, &z, ScoreTarget::logit(0), 2).unwrap();
        assert!((two.values.data()[0] - 6.0).abs() < 1e-6);
        let many = integrated_gradients(&m, &x, &z, ScoreTarget::logit(0), 200).unwrap();
        assert!((many.values.data()[0] - 4.0).abs() < 0.05);
    }

    #[test]
    fn ig_rejects_shape_mismatch_and_zero_steps() {
        let m = toy::linear(&[2.0, 3.0], 0.0);
        assert!(integrated_gradients(&m, &t(&[1.0, 1.0]), &t(&[0.0]), ScoreTarget::logit(0), 1).is_err());
        assert!(integrated_gradients(&m, &t(&[1.0, 1.0]), &t(&[0.0, 0.0]), ScoreTarget::logit(0), 0).is_err());
    }

    #[test]
    fn noise_ig_with_one_baseline_is_plain_ig() {
        let m = toy::random_mlp(4, 3, &[6], 2, toy::Activation::Softplus);
        let x = toy::random_input(9, &[3], 1.0);
        let range = ValueRange::uniform(-1.0, 1.0).unwrap();
        let cfg = IGConfig {
            steps: 20,
            baseline_kind: BaselineKind::UniformNoise,
            baseline_count: 1,
            seed: 77,
        };
        let avg = integrated_gradients_noise_avg(&m, &x, ScoreTarget::logit(0), &cfg, &range).unwrap();
        let z = noise_baseline(&x, &range, 77, 0).unwrap();
        let single = integrated_gradients(&m, &x, &z, ScoreTarget::logit(0), 20).unwrap();
        assert_eq!(avg.values, single.values);
        assert!(z.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn noise_ig_rejects_zero_baseline_kind() {
        let m = toy::linear(&[1.0], 0.0);
        let cfg = IGConfig {
            steps: 1,
            baseline_kind: BaselineKind::Zero,
            baseline_count: 1,
            seed: 0,
        };
        let range = ValueRange::uniform(0.0, 1.0).unwrap();
        assert!(integrated_gradients_noise_avg(&m, &t(&[1.0]), ScoreTarget::logit(0), &cfg, &range).is_err());
    }

    #[test]
    fn constant_model_gives_zero_maps() {
        let m = toy::constant(&[4], 2.5);
        let x = toy::random_input(1, &[4], 1.0);
        let range = ValueRange::uniform(-1.0, 1.0).unwrap();
        let cfg = IGConfig {
            steps: 5,
            baseline_kind: BaselineKind::UniformNoise,
            baseline_count: 3,
            seed: 1,
        };
        let target = ScoreTarget::logit(0);
        let maps = [
            integrated_gradients_noise_avg(&m, &x, target, &cfg, &range).unwrap(),
            smooth_grad(&x, target, &NoiseConfig::new(0.3, 4, 2), |xp| m.gradient(xp, target)).unwrap(),
            smooth_taylor(&m, &x, target, &NoiseConfig::new(0.3, 4, 2)).unwrap(),
        ];
        for map in maps {
            assert!(map.values.data().iter().all(|&v| v == 0.0), "{}", map.method_tag);
        }
    }

    #[test]
    fn smooth_grad_linear_returns_weights() {
        let m = toy::linear(&[0.5, -1.5, 2.0], 1.0);
        let x = t(&[0.1, 0.2, 0.3]);
        let target = ScoreTarget::logit(0);
        for (sigma, n) in [(0.01, 1), (3.0, 17)] {
            let map = smooth_grad(&x, target, &NoiseConfig::new(sigma, n, 5), |xp| m.gradient(xp, target)).unwrap();
            assert_eq!(map.values.data(), &[0.5, -1.5, 2.0]);
        }
    }

    #[test]
    fn smooth_grad_vanishing_noise_is_raw_gradient() {
        let m = toy::random_mlp(8, 5, &[7, 7], 3, toy::Activation::Softplus);
        let x = toy::random_input(3, &[5], 1.0);
        let target = ScoreTarget::logit(2);
        let map = smooth_grad(&x, target, &NoiseConfig::new(1e-12, 1, 5), |xp| m.gradient(xp, target)).unwrap();
        assert!(map.values.max_abs_diff(&m.gradient(&x, target).unwrap()) < 1e-4);
    }

    #[test]
    fn roots_are_reproducible_and_prefix_stable() {
        let x = toy::random_input(1, &[6], 1.0);
        let a = generate_roots(&x, &NoiseConfig::new(0.5, 5, 3)).unwrap();
        let b = generate_roots(&x, &NoiseConfig::new(0.5, 5, 3)).unwrap();
        assert_eq!(a, b);
        let longer = generate_roots(&x, &NoiseConfig::new(0.5, 9, 3)).unwrap();
        assert_eq!(&longer[..5], &a[..]);
        let other = generate_roots(&x, &NoiseConfig::new(0.5, 5, 4)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn roots_with_vanishing_noise_equal_input() {
        let x = toy::random_input(1, &[16], 2.0);
        for z in generate_roots(&x, &NoiseConfig::new(1e-12, 10, 0)).unwrap() {
            assert!(z.max_abs_diff(&x) < 1e-10);
        }
    }

    #[test]
    fn root_noise_mean_obeys_lln_bound() {
        let sigma = 0.5;
        let count = 10_000;
        let x = toy::random_input(1, &[4], 1.0);
        let roots = generate_roots(&x, &NoiseConfig::new(sigma, count, 21)).unwrap();
        for i in 0..4 {
            let mean: f64 = roots
                .iter()
                .map(|z| z.data()[i] as f64 - x.data()[i] as f64)
                .sum::<f64>()
                / count as f64;
            assert!(mean.abs() <= 4.0 * sigma / (count as f64).sqrt(), "element {i}: {mean}");
        }
    }

    #[test]
    fn noise_config_validation() {
        assert!(NoiseConfig::new(0.0, 1, 0).validate().is_err());
        assert!(NoiseConfig::new(-1.0, 1, 0).validate().is_err());
        assert!(NoiseConfig::new(f64::NAN, 1, 0).validate().is_err());
        assert!(NoiseConfig::new(0.1, 0, 0).validate().is_err());
        assert!(NoiseConfig::new(0.1, 1, 0).validate().is_ok());
    }

    #[test]
    fn smooth_taylor_linear_sums_to_mean_score_gap() {
        let w = [0.5f32, -1.25, 2.0, 0.75];
        let m = toy::linear(&w, 0.3);
        let x = t(&[0.2, -0.4, 0.6, 1.0]);
        let cfg = NoiseConfig::new(0.4, 50, 8);
        let target = ScoreTarget::logit(0);
        let map = smooth_taylor(&m, &x, target, &cfg).unwrap();
        let fx = m.score(&x, target).unwrap();
        let gap: f64 = generate_roots(&x, &cfg)
            .unwrap()
            .iter()
            .map(|z| fx - m.score(z, target).unwrap())
            .sum::<f64>()
            / cfg.count as f64;
        assert!((map.values.sum() - gap).abs() < 1e-6, "{} vs {gap}", map.values.sum());
    }

    #[test]
    fn smooth_taylor_vanishing_noise_is_zero() {
        let m = toy::random_mlp(2, 6, &[8], 2, toy::Activation::Relu);
        let x = toy::random_input(5, &[6], 1.0);
        let target = ScoreTarget::logit(0);
        let map = smooth_taylor(&m, &x, target, &NoiseConfig::new(1e-12, 10, 1)).unwrap();
        let gmax = m
            .gradient(&x, target)
            .unwrap()
            .data()
            .iter()
            .fold(0.0f32, |a, v| a.max(v.abs())) as f64;
        let linf = map.values.data().iter().fold(0.0f32, |a, v| a.max(v.abs())) as f64;
        assert!(linf < 1e-8 * gmax, "{linf} vs {gmax}");
    }

    #[test]
    fn equivalence_on_linear_model_is_tight() {
        let m = toy::linear(&[1.5, -0.5, 0.25], 0.0);
        let x = t(&[0.3, 0.1, -0.2]);
        let d = verify_smoothgrad_equivalence(&m, &x, ScoreTarget::logit(0), &NoiseConfig::new(0.2, 10, 4)).unwrap();
        assert!(d < 1e-7, "{d}");
    }

    #[test]
    fn different_seeds_give_different_maps() {
        let m = toy::random_mlp(6, 4, &[8], 2, toy::Activation::Relu);
        let x = toy::random_input(6, &[4], 1.0);
        let target = ScoreTarget::logit(0);
        let a = smooth_taylor(&m, &x, target, &NoiseConfig::new(0.5, 10, 1)).unwrap();
        let b = smooth_grad(
            &x,
            target,
            &NoiseConfig::new(0.5, 10, 2),
            taylor_term_base(&m, &x, target, 1.0),
        )
        .unwrap();
        assert!(a.values.max_abs_diff(&b.values) > 0.0);
    }
}
