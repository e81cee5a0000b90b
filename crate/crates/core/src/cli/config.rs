//! Experiment configuration files.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::{AdaptiveConfig, Objective};
use crate::autodiff::{GradCheckConfig, ScoreKind};
use crate::error::{Error, Result};
use crate::perturbation::PerturbEvalConfig;
use crate::saliency::PyramidOptions;
use crate::tensor::ValueRange;

pub const SCHEMA_VERSION: u32 = 1;

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_score_kind() -> ScoreKind {
    ScoreKind::Probability
}

fn default_eval() -> Vec<EvalSpec> {
    vec![EvalSpec::default()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model_path: PathBuf,
    #[serde(default)]
    pub input_paths: Vec<PathBuf>,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_eval")]
    pub eval: Vec<EvalSpec>,
    #[serde(default)]
    pub adaptive: Option<AdaptiveSpec>,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Valid range of input values, one `[lo, hi]` pair per channel or a
    /// single pair for all channels. Defaults to `[0, 1]` mapped through
    /// `normalization` when that is set.
    #[serde(default)]
    pub input_value_range: Option<ValueRange>,
    /// Per-channel normalization applied to PNG inputs after scaling to
    /// `[0, 1]`.
    #[serde(default)]
    pub normalization: Option<Normalization>,
    /// Scalar explained and evaluated: the predicted class's probability or
    /// logit.
    #[serde(default = "default_score_kind")]
    pub score_kind: ScoreKind,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub gradcheck: GradCheckSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// One attribution method with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Gradient,
    /// Integrated Gradients from the all-zero baseline, `M` steps.
    IgZero {
        steps: usize,
    },
    /// Integrated Gradients averaged over `N` uniform-noise baselines.
    IgNoise {
        steps: usize,
        baselines: usize,
    },
    /// SmoothGrad over the plain gradient, or over zero-baseline IG when
    /// `ig_steps` is set.
    Smoothgrad {
        sigma: f64,
        samples: usize,
        #[serde(default)]
        ig_steps: Option<usize>,
    },
    Smoothtaylor {
        sigma: f64,
        roots: usize,
    },
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Gradient => "gradient",
            MethodSpec::IgZero { .. } => "ig_zero",
            MethodSpec::IgNoise { .. } => "ig_noise",
            MethodSpec::Smoothgrad { .. } => "smoothgrad",
            MethodSpec::Smoothtaylor { .. } => "smoothtaylor",
        }
    }

    /// Hyperparameters as `key=value` pairs joined by `;`.
    pub fn params(&self) -> String {
        match self {
            MethodSpec::Gradient => String::new(),
            MethodSpec::IgZero { steps } => format!("M={steps}"),
            MethodSpec::IgNoise { steps, baselines } => format!("M={steps};N={baselines}"),
            MethodSpec::Smoothgrad {
                sigma,
                samples,
                ig_steps,
            } => match ig_steps {
                Some(m) => format!("sigma={sigma};N={samples};M={m}"),
                None => format!("sigma={sigma};N={samples}"),
            },
            MethodSpec::Smoothtaylor { sigma, roots } => format!("sigma={sigma};R={roots}"),
        }
    }

    /// File-name friendly label, unique per distinct spec.
    pub fn label(&self) -> String {
        let params = self.params().replace('=', "").replace(';', "-");
        if params.is_empty() {
            self.name().to_string()
        } else {
            format!("{}-{params}", self.name())
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{}: {what} must be at least 1", self.name())))
            } else {
                Ok(())
            }
        };
        let sigma_ok = |s: f64| {
            if s > 0.0 && s.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{}: sigma must be positive, got {s}",
                    self.name()
                )))
            }
        };
        match *self {
            MethodSpec::Gradient => Ok(()),
            MethodSpec::IgZero { steps } => positive("steps", steps),
            MethodSpec::IgNoise { steps, baselines } => {
                positive("steps", steps)?;
                positive("baselines", baselines)
            }
            MethodSpec::Smoothgrad {
                sigma,
                samples,
                ig_steps,
            } => {
                sigma_ok(sigma)?;
                positive("samples", samples)?;
                ig_steps.map_or(Ok(()), |m| positive("ig_steps", m))
            }
            MethodSpec::Smoothtaylor { sigma, roots } => {
                sigma_ok(sigma)?;
                positive("roots", roots)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSpec {
    pub kernel: usize,
    pub steps: usize,
    pub samples: usize,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        let d = PerturbEvalConfig::default();
        PerturbSpec {
            kernel: d.kernel,
            steps: d.steps,
            samples: d.samples,
        }
    }
}

impl PerturbSpec {
    pub fn with_seed(&self, seed: u64) -> PerturbEvalConfig {
        PerturbEvalConfig {
            kernel: self.kernel,
            steps: self.steps,
            samples: self.samples,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub perturbation: PerturbSpec,
    pub tv: PyramidOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveSpec {
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub learning_decay: f64,
    pub max_stop_count: usize,
    pub objective: Objective,
    pub roots: usize,
    /// Which `eval` entry supplies the perturbation and pyramid settings.
    pub eval_index: usize,
}

impl Default for AdaptiveSpec {
    fn default() -> Self {
        let d = AdaptiveConfig::default();
        AdaptiveSpec {
            max_iterations: d.max_iterations,
            learning_rate: d.learning_rate,
            learning_decay: d.learning_decay,
            max_stop_count: d.max_stop_count,
            objective: d.objective,
            roots: d.roots,
            eval_index: 0,
        }
    }
}

impl AdaptiveSpec {
    pub fn with_seed(&self, seed: u64) -> AdaptiveConfig {
        AdaptiveConfig {
            max_iterations: self.max_iterations,
            learning_rate: self.learning_rate,
            learning_decay: self.learning_decay,
            max_stop_count: self.max_stop_count,
            objective: self.objective,
            roots: self.roots,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSpec {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub min_pass_fraction: f64,
    pub max_coords: usize,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        let d = GradCheckConfig::default();
        GradCheckSpec {
            h: d.h,
            rel_tol: d.rel_tol,
            abs_tol: d.abs_tol,
            min_pass_fraction: d.min_pass_fraction,
            max_coords: d.max_coords,
        }
    }
}

impl From<GradCheckSpec> for GradCheckConfig {
    fn from(s: GradCheckSpec) -> Self {
        GradCheckConfig {
            h: s.h,
            rel_tol: s.rel_tol,
            abs_tol: s.abs_tol,
            min_pass_fraction: s.min_pass_fraction,
            max_coords: s.max_coords,
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config. Relative paths inside it are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.model_path = resolve(&cfg.model_path);
        cfg.input_paths = cfg.input_paths.iter().map(|p| resolve(p)).collect();
        cfg.output_dir = resolve(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut labels = HashSet::new();
        for m in &self.methods {
            m.validate()?;
            if !labels.insert(m.label()) {
                return Err(Error::Config(format!("method {} listed twice", m.label())));
            }
        }
        for (i, e) in self.eval.iter().enumerate() {
            e.perturbation
                .with_seed(0)
                .validate()
                .map_err(|err| Error::Config(format!("eval[{i}]: {err}")))?;
        }
        if let Some(a) = &self.adaptive {
            a.with_seed(0)
                .validate()
                .map_err(|e| Error::Config(format!("adaptive: {e}")))?;
            if a.eval_index >= self.eval.len() {
                return Err(Error::Config(format!(
                    "adaptive.eval_index {} but only {} eval entries",
                    a.eval_index,
                    self.eval.len()
                )));
            }
        }
        if let Some(n) = &self.normalization {
            if n.mean.len() != n.std.len() || n.mean.is_empty() || n.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(
                    "normalization needs matching non-empty mean and positive std lists".into(),
                ));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.input_ids()?;
        Ok(())
    }

    /// Input identifiers: file stems, which must be unique.
    pub fn input_ids(&self) -> Result<Vec<String>> {
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        for p in &self.input_paths {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("input path {} has no file name", p.display())))?
                .to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Config(format!("two inputs share the name {id}")));
            }
            ids.push(id);
        }
        Ok(ids)
    }

    /// Valid input range; `[0, 1]` pushed through the normalization when no
    /// range is configured.
    pub fn value_range(&self) -> Result<ValueRange> {
        if let Some(r) = &self.input_value_range {
            return Ok(r.clone());
        }
        match &self.normalization {
            None => ValueRange::uniform(0.0, 1.0),
            Some(n) => ValueRange::per_channel(
                n.mean
                    .iter()
                    .zip(&n.std)
                    .map(|(&m, &s)| ((0.0 - m) / s, (1.0 - m) / s))
                    .collect(),
            ),
        }
    }

    /// SHA-256 of the effective config serialized as JSON. The output
    /// directory and worker count do not change results and are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}
