//! The `attribute`, `evaluate`, `adaptive`, `gradcheck` and `report`
//! subcommands.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EvalSpec, ExperimentConfig, MethodSpec};
use crate::adaptive::{adaptive_noise_search, EvalContext, Objective};
use crate::attribution::{
    gradient_map, integrated_gradients, integrated_gradients_noise_avg, smooth_grad, smooth_taylor, AttributionMap,
    BaselineKind, IGConfig, NoiseConfig,
};
use crate::autodiff::{gradcheck, load_model, GradCheckReport, Model, ScoreTarget};
use crate::error::{Error, Result};
use crate::perturbation::{aupc, perturbation_game};
use crate::rng::{derive_seed, PRNG_ID};
use crate::saliency::{autvc, multiscale_tv_curve, to_saliency, TVCurve};
use crate::tensor::{Tensor, ValueRange};

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit PNG into a `[C, H, W]` tensor scaled to `[0, 1]`, dropping
/// any alpha channel.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let bad = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0.0f32; channels * h * w];
    for y in 0..h {
        let line = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = line[x * stride + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// A loaded experiment: config, model and inputs.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub model: Model,
    pub ids: Vec<String>,
    pub inputs: Vec<Tensor>,
    pub range: ValueRange,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub prng: String,
    pub model_fingerprint: String,
    pub inputs: usize,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMeta {
    pub image_id: String,
    pub method: String,
    pub params: String,
    pub target_class: usize,
    pub score_kind: crate::autodiff::ScoreKind,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub degenerate_saliency: bool,
}

fn load_input(path: &Path, cfg: &ExperimentConfig) -> Result<Tensor> {
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return Tensor::read(path);
    }
    let t = read_png(path)?;
    let Some(norm) = &cfg.normalization else {
        return Ok(t);
    };
    let (c, h, w) = t.spatial_dims()?;
    if norm.mean.len() != 1 && norm.mean.len() != c {
        return Err(Error::Config(format!(
            "normalization has {} channels, {} has {c}",
            norm.mean.len(),
            path.display()
        )));
    }
    let pick = |v: &[f32], ch: usize| if v.len() == 1 { v[0] } else { v[ch] };
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / (h * w);
            (v - pick(&norm.mean, ch)) / pick(&norm.std, ch)
        })
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

impl Run {
    pub fn load(cfg: ExperimentConfig) -> Result<Run> {
        let model = load_model(&cfg.model_path)?;
        let ids = cfg.input_ids()?;
        let mut inputs = Vec::with_capacity(cfg.input_paths.len());
        for p in &cfg.input_paths {
            let x = load_input(p, &cfg)?;
            if x.shape() != model.input_shape() {
                return Err(Error::Shape(format!(
                    "{}: input shape {:?}, model expects {:?}",
                    p.display(),
                    x.shape(),
                    model.input_shape()
                )));
            }
            inputs.push(x);
        }
        let range = cfg.value_range()?;
        if let Some(x) = inputs.first() {
            range.check_channels(x.spatial_dims()?.0)?;
        }
        let config_hash = cfg.hash();
        Ok(Run {
            cfg,
            model,
            ids,
            inputs,
            range,
            config_hash,
        })
    }

    fn out(&self) -> &Path {
        &self.cfg.output_dir
    }

    fn target(&self, i: usize) -> Result<ScoreTarget> {
        Ok(ScoreTarget {
            class_index: self.model.predict(&self.inputs[i])?,
            kind: self.cfg.score_kind,
        })
    }

    /// Noise seed of input `i`, shared by every method so that sample sets
    /// are paired across methods.
    fn input_seed(&self, i: usize) -> u64 {
        derive_seed(self.cfg.seed, &[i as u64])
    }

    fn perturb_seed(&self, i: usize, e: usize) -> u64 {
        derive_seed(self.cfg.seed, &[i as u64, 1, e as u64])
    }

    fn write_meta(&self, command: &str) -> Result<()> {
        let meta = RunMeta {
            command: command.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            prng: PRNG_ID.to_string(),
            model_fingerprint: self.model.fingerprint(),
            inputs: self.inputs.len(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        write_atomic(&self.out().join(format!("{command}.meta.json")), text.as_bytes())
    }

    fn attribution_path(&self, id: &str, label: &str, ext: &str) -> PathBuf {
        self.out().join("attributions").join(format!("{id}__{label}.{ext}"))
    }

    fn compute(&self, i: usize, spec: &MethodSpec) -> Result<AttributionMap> {
        let (model, x) = (&self.model, &self.inputs[i]);
        let target = self.target(i)?;
        let seed = self.input_seed(i);
        match *spec {
            MethodSpec::Gradient => gradient_map(model, x, target),
            MethodSpec::IgZero { steps } => {
                integrated_gradients(model, x, &Tensor::zeros(x.shape().to_vec()), target, steps)
            }
            MethodSpec::IgNoise { steps, baselines } => {
                let cfg = IGConfig {
                    steps,
                    baseline_kind: BaselineKind::UniformNoise,
                    baseline_count: baselines,
                    seed,
                };
                integrated_gradients_noise_avg(model, x, target, &cfg, &self.range)
            }
            MethodSpec::Smoothgrad {
                sigma,
                samples,
                ig_steps,
            } => {
                let noise = NoiseConfig::new(sigma, samples, seed);
                match ig_steps {
                    None => smooth_grad(x, target, &noise, |xp| model.gradient(xp, target)),
                    Some(m) => smooth_grad(x, target, &noise, |xp| {
                        Ok(integrated_gradients(model, xp, &Tensor::zeros(xp.shape().to_vec()), target, m)?.values)
                    }),
                }
            }
            MethodSpec::Smoothtaylor { sigma, roots } => {
                smooth_taylor(model, x, target, &NoiseConfig::new(sigma, roots, seed))
            }
        }
    }

    fn write_attribution(&self, i: usize, method: &str, params: &str, label: &str, map: &AttributionMap) -> Result<()> {
        let id = &self.ids[i];
        let saliency = to_saliency(map)?;
        let meta = AttributionMeta {
            image_id: id.clone(),
            method: method.to_string(),
            params: params.to_string(),
            target_class: map.target.class_index,
            score_kind: map.target.kind,
            seed: self.input_seed(i),
            shape: map.values.shape().to_vec(),
            degenerate_saliency: saliency.degenerate,
        };
        write_atomic(&self.attribution_path(id, label, "tsr"), &map.values.to_bytes())?;
        write_atomic(&self.attribution_path(id, label, "pgm"), &saliency.to_pgm())?;
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        write_atomic(&self.attribution_path(id, label, "json"), text.as_bytes())
    }

    /// Reuses a stored attribution when its sidecar matches this run,
    /// otherwise computes and stores it.
    fn attribution(&self, i: usize, spec: &MethodSpec) -> Result<AttributionMap> {
        let label = spec.label();
        let (id, x) = (&self.ids[i], &self.inputs[i]);
        let tsr = self.attribution_path(id, &label, "tsr");
        let json = self.attribution_path(id, &label, "json");
        let target = self.target(i)?;
        if tsr.exists() && json.exists() {
            let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
            let meta: AttributionMeta = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
            if meta.params == spec.params()
                && meta.seed == self.input_seed(i)
                && meta.target_class == target.class_index
                && meta.score_kind == target.kind
            {
                let values = Tensor::read(&tsr)?;
                if values.shape() != x.shape() {
                    return Err(Error::Shape(format!(
                        "{}: attribution shape {:?} does not match input {:?}",
                        tsr.display(),
                        values.shape(),
                        x.shape()
                    )));
                }
                return Ok(AttributionMap {
                    values,
                    target,
                    method_tag: label,
                });
            }
        }
        let map = self.compute(i, spec)?;
        self.write_attribution(i, spec.name(), &spec.params(), &label, &map)?;
        Ok(map)
    }

    fn eval_params(&self, spec: &MethodSpec, e: usize) -> String {
        if self.cfg.eval.len() > 1 {
            format!("{};eval={e}", spec.params())
        } else {
            spec.params()
        }
    }
}

/// Per-input work runs on the rayon pool; results come back in input order.
fn per_input<T: Send>(run: &Run, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..run.inputs.len()).into_par_iter().map(f).collect()
}

pub fn cmd_attribute(run: &Run) -> Result<usize> {
    let counts = per_input(run, |i| {
        for spec in &run.cfg.methods {
            let map = run.compute(i, spec)?;
            run.write_attribution(i, spec.name(), &spec.params(), &spec.label(), &map)?;
        }
        Ok(run.cfg.methods.len())
    })?;
    run.write_meta("attribute")?;
    Ok(counts.iter().sum())
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub image_id: String,
    pub method: String,
    pub params: String,
    pub aupc: f64,
    pub autvc: f64,
}

fn tv_auc(map: &AttributionMap, spec: &EvalSpec) -> Result<(TVCurve, f64)> {
    let s = to_saliency(map)?;
    let curve = multiscale_tv_curve(&s, &spec.tv);
    let area = autvc(&curve)?;
    Ok((curve, area))
}

pub fn cmd_evaluate(run: &Run) -> Result<Vec<EvalRow>> {
    if run.cfg.methods.is_empty() {
        return Err(Error::Config("evaluate needs at least one method".into()));
    }
    let per_image = per_input(run, |i| {
        let id = &run.ids[i];
        let target = run.target(i)?;
        let mut rows = Vec::new();
        for spec in &run.cfg.methods {
            let map = run.attribution(i, spec)?;
            for (e, ev) in run.cfg.eval.iter().enumerate() {
                let pcfg = ev.perturbation.with_seed(run.perturb_seed(i, e));
                let curve = perturbation_game(&run.model, &run.inputs[i], &map, target, &run.range, &pcfg)?;
                let (tv, area) = tv_auc(&map, ev)?;
                let stem = format!("{id}__{}__e{e}", spec.label());
                let dir = run.out().join("curves");
                write_atomic(&dir.join(format!("{stem}__aupc.csv")), curve.to_csv().as_bytes())?;
                write_atomic(&dir.join(format!("{stem}__tv.csv")), tv.to_csv().as_bytes())?;
                rows.push(EvalRow {
                    image_id: id.clone(),
                    method: spec.name().to_string(),
                    params: run.eval_params(spec, e),
                    aupc: aupc(&curve)?,
                    autvc: area,
                });
            }
        }
        Ok(rows)
    })?;
    let rows: Vec<EvalRow> = per_image.into_iter().flatten().collect();

    let mut aupc_csv = String::from("image_id,method,params,aupc\n");
    let mut autvc_csv = String::from("image_id,method,params,autvc\n");
    for r in &rows {
        aupc_csv.push_str(&format!("{},{},{},{}\n", r.image_id, r.method, r.params, r.aupc));
        autvc_csv.push_str(&format!("{},{},{},{}\n", r.image_id, r.method, r.params, r.autvc));
    }
    write_atomic(&run.out().join("aupc.csv"), aupc_csv.as_bytes())?;
    write_atomic(&run.out().join("autvc.csv"), autvc_csv.as_bytes())?;
    write_atomic(&run.out().join("table.csv"), table_csv(&rows).as_bytes())?;
    run.write_meta("evaluate")?;
    Ok(rows)
}

/// Mean AUPC and AUTVC per (method, params), in first-appearance order.
pub fn table_csv(rows: &[EvalRow]) -> String {
    let mut groups: Vec<(String, String, Vec<f64>, Vec<f64>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|g| g.0 == r.method && g.1 == r.params) {
            Some(g) => {
                g.2.push(r.aupc);
                g.3.push(r.autvc);
            }
            None => groups.push((r.method.clone(), r.params.clone(), vec![r.aupc], vec![r.autvc])),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut out = String::from("method,params,mean_aupc,mean_autvc\n");
    for (m, p, a, t) in &groups {
        out.push_str(&format!("{m},{p},{},{}\n", mean(a), mean(t)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptiveRow {
    pub image_id: String,
    pub objective: Objective,
    pub initial_sigma: f64,
    pub initial_auc: f64,
    pub best_sigma: f64,
    pub best_auc: f64,
    pub iterations: usize,
    pub stopped_early: bool,
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Aupc => "aupc",
        Objective::Autvc => "autvc",
    }
}

pub fn cmd_adaptive(run: &Run) -> Result<Vec<AdaptiveRow>> {
    let spec = run
        .cfg
        .adaptive
        .ok_or_else(|| Error::Config("no adaptive section in config".into()))?;
    let ev = run.cfg.eval[spec.eval_index];
    let name = objective_name(spec.objective);
    let rows = per_input(run, |i| {
        let id = &run.ids[i];
        let target = run.target(i)?;
        let acfg = spec.with_seed(run.input_seed(i));
        let ctx = EvalContext {
            perturb: ev.perturbation.with_seed(run.perturb_seed(i, spec.eval_index)),
            pyramid: ev.tv,
            range: run.range.clone(),
        };
        let trace = adaptive_noise_search(&run.model, &run.inputs[i], target, &acfg, &ctx)?;
        debug_assert!(trace.best_auc <= trace.initial_auc);
        write_atomic(
            &run.out().join("adaptive").join(format!("{id}__trace.csv")),
            trace.to_csv().as_bytes(),
        )?;
        let noise = NoiseConfig::new(trace.best_sigma, spec.roots, acfg.seed);
        let map = smooth_taylor(&run.model, &run.inputs[i], target, &noise)?;
        let params = format!("sigma={};R={}", trace.best_sigma, spec.roots);
        run.write_attribution(
            i,
            &format!("adaptive_{name}"),
            &params,
            &format!("adaptive_{name}"),
            &map,
        )?;
        Ok(AdaptiveRow {
            image_id: id.clone(),
            objective: spec.objective,
            initial_sigma: trace.initial_sigma,
            initial_auc: trace.initial_auc,
            best_sigma: trace.best_sigma,
            best_auc: trace.best_auc,
            iterations: trace.iterations.len(),
            stopped_early: trace.stopped_early,
        })
    })?;
    let mut csv =
        String::from("image_id,objective,initial_sigma,initial_auc,best_sigma,best_auc,iterations,stopped_early\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{name},{},{},{},{},{},{}\n",
            r.image_id, r.initial_sigma, r.initial_auc, r.best_sigma, r.best_auc, r.iterations, r.stopped_early
        ));
    }
    write_atomic(&run.out().join("adaptive").join("summary.csv"), csv.as_bytes())?;
    run.write_meta("adaptive")?;
    Ok(rows)
}

pub fn cmd_gradcheck(run: &Run) -> Result<GradCheckReport> {
    let report = gradcheck(&run.model, &run.inputs, run.cfg.score_kind, &run.cfg.gradcheck.into())?;
    let mut csv = String::from("layer_index,layer,max_rel_err,checked,skipped,passed\n");
    for l in &report.layers {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.index, l.kind, l.max_rel_err, l.checked, l.skipped, l.passed
        ));
    }
    write_atomic(&run.out().join("gradcheck.csv"), csv.as_bytes())?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&run.out().join("gradcheck.json"), text.as_bytes())?;
    run.write_meta("gradcheck")?;
    Ok(report)
}

fn csv_to_markdown(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols = header.split(',').count();
    let mut out = format!("| {} |\n|{}\n", header.replace(',', " | "), "---|".repeat(cols));
    for l in lines {
        out.push_str(&format!("| {} |\n", l.replace(',', " | ")));
    }
    out
}

pub fn cmd_report(run: &Run) -> Result<String> {
    let out = run.out();
    let read = |name: &str| fs::read_to_string(out.join(name)).ok();
    let mut md = String::from("# Attribution report\n\n");
    md.push_str(&format!("- config hash: `{}`\n", run.config_hash));
    md.push_str(&format!("- seed: {}\n", run.cfg.seed));
    md.push_str(&format!("- PRNG: `{PRNG_ID}`\n"));
    md.push_str(&format!("- model fingerprint: `{}`\n", run.model.fingerprint()));
    md.push_str(&format!("- inputs: {}\n", run.inputs.len()));
    md.push_str(&format!("- score: {:?}\n\n", run.cfg.score_kind));

    md.push_str("## Area under the curves\n\n");
    match read("table.csv") {
        Some(t) => md.push_str(&csv_to_markdown(&t)),
        None => md.push_str("Not run.\n"),
    }
    md.push_str("\n## Adaptive noising\n\n");
    match read("adaptive/summary.csv") {
        Some(t) => md.push_str(&csv_to_markdown(&t)),
        None => md.push_str("Not run.\n"),
    }
    md.push_str("\n## Gradient check\n\n");
    match read("gradcheck.json").and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok()) {
        Some(v) => {
            let passed = v["passed"].as_bool().unwrap_or(false);
            md.push_str(&format!(
                "{} (end-to-end max relative error {}, pass fraction {})\n",
                if passed { "PASS" } else { "FAIL" },
                v["model_max_rel_err"],
                v["model_pass_fraction"]
            ));
            if let Some(t) = read("gradcheck.csv") {
                md.push('\n');
                md.push_str(&csv_to_markdown(&t));
            }
        }
        None => md.push_str("Not run.\n"),
    }
    write_atomic(&out.join("report.md"), md.as_bytes())?;
    Ok(md)
}
