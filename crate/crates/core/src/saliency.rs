//! Saliency maps and their noisiness: average total variation (ATV) and the
//! multi-scale ATV curve over a Gaussian pyramid.

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::perturbation::simpson_auc;
use crate::tensor::Tensor;

/// Row-major 2-D map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    /// Set when normalization collapsed to a constant map.
    pub degenerate: bool,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} saliency map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(SaliencyMap {
            height,
            width,
            values,
            degenerate: false,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn transpose(&self) -> SaliencyMap {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.width {
            for r in 0..self.height {
                values.push(self.get(r, c));
            }
        }
        SaliencyMap {
            height: self.width,
            width: self.height,
            values,
            degenerate: self.degenerate,
        }
    }

    /// 8-bit binary PGM (`P5`), each value scaled by 255 and rounded half up.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8),
        );
        out
    }

    /// `[1, H, W]` tensor of the values.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(vec![1, self.height, self.width], &self.values)
    }
}

/// Sum of absolute values over channels, giving an `H x W` plane.
pub fn abs_channel_sum(values: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = values.spatial_dims()?;
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&values.data()[ch * plane..(ch + 1) * plane]) {
            *o += (*v as f64).abs();
        }
    }
    Ok((h, w, out))
}

/// Percentile by linear interpolation between order statistics (the inclusive
/// definition: position `q (n - 1)` in the sorted data). `q` is in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const CLIP_PERCENTILE: f64 = 0.99;

/// Absolute values summed over channels, clipped at the 99th percentile, then
/// min-max scaled to `[0, 1]`. A map that is constant after clipping becomes
/// all zeros with `degenerate` set.
pub fn to_saliency(attr: &AttributionMap) -> Result<SaliencyMap> {
    plane_to_saliency(&attr.values)
}

pub fn plane_to_saliency(values: &Tensor) -> Result<SaliencyMap> {
    let (h, w, mut plane) = abs_channel_sum(values)?;
    let cap = percentile(&plane, CLIP_PERCENTILE);
    plane.iter_mut().for_each(|v| *v = v.min(cap));
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        let mut s = SaliencyMap::new(h, w, vec![0.0; h * w])?;
        s.degenerate = true;
        return Ok(s);
    }
    let values = plane.into_iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect();
    SaliencyMap::new(h, w, values)
}

/// `Σ |S_i - S_j|` over horizontally and vertically adjacent pairs, divided
/// by `h * w`.
pub fn average_total_variation(s: &SaliencyMap) -> f64 {
    let (h, w) = (s.height, s.width);
    let v = &s.values;
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let here = v[r * w + c];
            if c + 1 < w {
                total += (here - v[r * w + c + 1]).abs();
            }
            if r + 1 < h {
                total += (here - v[(r + 1) * w + c]).abs();
            }
        }
    }
    total / (h * w) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidOptions {
    /// Smallest height and width a level may have.
    pub min_size: usize,
    /// Also keep the first level that falls below `min_size`.
    pub include_terminal_level: bool,
}

impl Default for PyramidOptions {
    fn default() -> Self {
        PyramidOptions {
            min_size: 30,
            include_terminal_level: false,
        }
    }
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable 5x5 binomial blur with symmetric reflection at the borders.
pub fn blur(s: &SaliencyMap) -> SaliencyMap {
    let (h, w) = (s.height, s.width);
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = BINOMIAL5
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * s.values[r * w + reflect(c as isize + k as isize - 2, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = BINOMIAL5
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * tmp[reflect(r as isize + k as isize - 2, h) * w + c])
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
    }
    SaliencyMap {
        height: h,
        width: w,
        values: out,
        degenerate: s.degenerate,
    }
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(s: &SaliencyMap, height: usize, width: usize) -> SaliencyMap {
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = axis(height, s.height);
    let cols = axis(width, s.width);
    let mut values = Vec::with_capacity(height * width);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = s.get(r0, c0) * (1.0 - fc) + s.get(r0, c1) * fc;
            let bottom = s.get(r1, c0) * (1.0 - fc) + s.get(r1, c1) * fc;
            values.push((top * (1.0 - fr) + bottom * fr).clamp(0.0, 1.0));
        }
    }
    SaliencyMap {
        height,
        width,
        values,
        degenerate: s.degenerate,
    }
}

/// `⌊n / 1.5⌋`, computed exactly.
pub fn downscale_dim(n: usize) -> usize {
    2 * n / 3
}

/// Level 0 is `s`; each further level is the previous one blurred and
/// resampled to `⌊h/1.5⌋ x ⌊w/1.5⌋`. Generation stops at the first level
/// smaller than `min_size` in either dimension, which is dropped unless
/// `include_terminal_level` is set.
pub fn gaussian_pyramid(s: &SaliencyMap, opts: &PyramidOptions) -> Vec<SaliencyMap> {
    let mut levels = vec![s.clone()];
    if s.height < opts.min_size || s.width < opts.min_size {
        return levels;
    }
    loop {
        let prev = levels.last().unwrap();
        let (h, w) = (downscale_dim(prev.height), downscale_dim(prev.width));
        if h == 0 || w == 0 {
            break;
        }
        let next = resize_bilinear(&blur(prev), h, w);
        if h < opts.min_size || w < opts.min_size {
            if opts.include_terminal_level {
                levels.push(next);
            }
            break;
        }
        levels.push(next);
    }
    levels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TVLevel {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub atv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TVCurve {
    pub levels: Vec<TVLevel>,
}

impl TVCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,height,width,atv\n");
        for l in &self.levels {
            out.push_str(&format!("{},{},{},{}\n", l.level, l.height, l.width, l.atv));
        }
        out
    }

    pub fn from_values(values: &[f64]) -> TVCurve {
        TVCurve {
            levels: values
                .iter()
                .enumerate()
                .map(|(level, &atv)| TVLevel {
                    level,
                    height: 0,
                    width: 0,
                    atv,
                })
                .collect(),
        }
    }
}

pub fn multiscale_tv_curve(s: &SaliencyMap, opts: &PyramidOptions) -> TVCurve {
    TVCurve {
        levels: gaussian_pyramid(s, opts)
            .iter()
            .enumerate()
            .map(|(level, m)| TVLevel {
                level,
                height: m.height,
                width: m.width,
                atv: average_total_variation(m),
            })
            .collect(),
    }
}

/// Simpson-rule area under the multi-scale ATV curve.
pub fn autvc(curve: &TVCurve) -> Result<f64> {
    if curve.levels.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "AUTVC needs at least 2 pyramid levels, got {}",
            curve.levels.len()
        )));
    }
    let points: Vec<(f64, f64)> = curve.levels.iter().map(|l| (l.level as f64, l.atv)).collect();
    simpson_auc(&points)
}
