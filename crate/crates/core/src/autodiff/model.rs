use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layer::{softmax, Layer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which scalar of the model output an attribution explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// Pre-softmax value of the class.
    Logit,
    /// Softmax probability of the class.
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreTarget {
    pub class_index: usize,
    pub kind: ScoreKind,
}

impl ScoreTarget {
    pub fn logit(class_index: usize) -> Self {
        ScoreTarget {
            class_index,
            kind: ScoreKind::Logit,
        }
    }

    pub fn probability(class_index: usize) -> Self {
        ScoreTarget {
            class_index,
            kind: ScoreKind::Probability,
        }
    }
}

/// An immutable feed-forward network with validated layer shapes.
///
/// Activations are carried in `f64` between layers; weights, inputs and
/// returned tensors are `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// `shapes[t]` is the input shape of layer `t`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Model> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid model input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.clone()];
        for (t, layer) in layers.iter().enumerate() {
            let current = shapes.last().unwrap();
            let next = layer.output_shape(current).map_err(|expected| Error::LayerShape {
                layer: t,
                kind: layer.kind(),
                expected,
                got: current.clone(),
            })?;
            shapes.push(next);
        }
        if shapes.last().unwrap().len() != 1 {
            return Err(Error::Shape(format!(
                "model output must be a vector, got shape {:?}",
                shapes.last().unwrap()
            )));
        }
        Ok(Model {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of every layer followed by the output shape.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// Number of leading layers that produce logits (a trailing softmax is
    /// excluded).
    fn logits_end(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Softmax) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    fn check_input_len(&self, n: usize) -> Result<()> {
        let want: usize = self.input_shape.iter().product();
        if n != want {
            return Err(Error::LayerShape {
                layer: 0,
                kind: self.layers.first().map_or("input", Layer::kind),
                expected: self.input_shape.clone(),
                got: vec![n],
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::LayerShape {
                layer: 0,
                kind: self.layers.first().map_or("input", Layer::kind),
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the first `end` layers, keeping every activation.
    pub(crate) fn trace(&self, x: &[f64], end: usize) -> Result<Vec<Vec<f64>>> {
        self.check_input_len(x.len())?;
        let mut acts = Vec::with_capacity(end + 1);
        acts.push(x.to_vec());
        for t in 0..end {
            let y = self.layers[t].forward(&self.shapes[t], &acts[t]);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "forward pass at layer {t} ({})",
                    self.layers[t].kind()
                )));
            }
            acts.push(y);
        }
        Ok(acts)
    }

    pub(crate) fn forward_f64(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x, self.layers.len())?.pop().unwrap())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let y = self.forward_f64(&x.to_f64())?;
        Tensor::from_f64(vec![y.len()], &y)
    }

    /// Index of the largest output, first one on ties.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        self.check_input(x)?;
        let y = self.forward_f64(&x.to_f64())?;
        Ok(argmax(&y))
    }

    fn check_target(&self, target: ScoreTarget) -> Result<()> {
        if target.class_index >= self.output_dim() {
            return Err(Error::ClassOutOfRange {
                index: target.class_index,
                dim: self.output_dim(),
            });
        }
        Ok(())
    }

    pub(crate) fn score_f64(&self, x: &[f64], target: ScoreTarget) -> Result<f64> {
        self.check_target(target)?;
        let logits = self.trace(x, self.logits_end())?.pop().unwrap();
        Ok(select(&logits, target))
    }

    pub fn score(&self, x: &Tensor, target: ScoreTarget) -> Result<f64> {
        self.check_input(x)?;
        self.score_f64(&x.to_f64(), target)
    }

    /// Score and its gradient with respect to the input, by reverse
    /// accumulation of per-layer vector-Jacobian products.
    pub(crate) fn score_and_gradient_f64(&self, x: &[f64], target: ScoreTarget) -> Result<(f64, Vec<f64>)> {
        self.check_target(target)?;
        let end = self.logits_end();
        let acts = self.trace(x, end)?;
        let logits = &acts[end];
        let score = select(logits, target);
        let mut g = vec![0.0; logits.len()];
        match target.kind {
            ScoreKind::Logit => g[target.class_index] = 1.0,
            ScoreKind::Probability => {
                let p = softmax(logits);
                let pc = p[target.class_index];
                for (j, gj) in g.iter_mut().enumerate() {
                    let delta = if j == target.class_index { 1.0 } else { 0.0 };
                    *gj = pc * (delta - p[j]);
                }
            }
        }
        for t in (0..end).rev() {
            g = self.layers[t].backward(&self.shapes[t], &acts[t], &acts[t + 1], &g);
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input gradient".into()));
        }
        Ok((score, g))
    }

    pub fn gradient(&self, x: &Tensor, target: ScoreTarget) -> Result<Tensor> {
        self.check_input(x)?;
        let (_, g) = self.score_and_gradient_f64(&x.to_f64(), target)?;
        Tensor::from_f64(x.shape().to_vec(), &g)
    }

    /// Central-difference estimate of [`Model::gradient`]. Perturbations and
    /// evaluation are carried out in `f64`.
    pub fn finite_diff_gradient(&self, x: &Tensor, target: ScoreTarget, h: f64) -> Result<Tensor> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
        }
        self.check_input(x)?;
        let g = self.finite_diff_f64(&x.to_f64(), target, h)?;
        Tensor::from_f64(x.shape().to_vec(), &g)
    }

    pub(crate) fn finite_diff_f64(&self, x: &[f64], target: ScoreTarget, h: f64) -> Result<Vec<f64>> {
        let mut probe = x.to_vec();
        let mut g = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            probe[i] = x[i] + h;
            let up = self.score_f64(&probe, target)?;
            probe[i] = x[i] - h;
            let down = self.score_f64(&probe, target)?;
            probe[i] = x[i];
            g.push((up - down) / (2.0 * h));
        }
        Ok(g)
    }

    /// SHA-256 over the architecture and weights, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for d in &self.input_shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        for layer in &self.layers {
            hasher.update(layer.kind().as_bytes());
            let mut put = |t: &Tensor| {
                for d in t.shape() {
                    hasher.update((*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    hasher.update(v.to_le_bytes());
                }
            };
            match layer {
                Layer::Dense { weight, bias } => {
                    put(weight);
                    put(bias);
                }
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    put(weight);
                    put(bias);
                    for v in stride.iter().chain(padding) {
                        hasher.update((*v as u64).to_le_bytes());
                    }
                }
                Layer::MaxPool2d { kernel, stride } | Layer::AvgPool2d { kernel, stride } => {
                    for v in kernel.iter().chain(stride) {
                        hasher.update((*v as u64).to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

fn select(logits: &[f64], target: ScoreTarget) -> f64 {
    match target.kind {
        ScoreKind::Logit => logits[target.class_index],
        ScoreKind::Probability => softmax(logits)[target.class_index],
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn linear_2_3() -> Model {
        Model::new(
            vec![2],
            vec![Layer::Dense {
                weight: t(vec![1, 2], vec![2.0, 3.0]),
                bias: t(vec![1], vec![0.0]),
            }],
        )
        .unwrap()
    }

    fn identity_softmax() -> Model {
        Model::new(
            vec![2],
            vec![
                Layer::Dense {
                    weight: t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
                    bias: t(vec![2], vec![0.0, 0.0]),
                },
                Layer::Softmax,
            ],
        )
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        let m = linear_2_3();
        assert_eq!(m.forward(&t(vec![2], vec![1.0, 1.0])).unwrap().data(), &[5.0]);

        let relu = Model::new(vec![3], vec![Layer::Relu]).unwrap();
        let y = relu.forward(&t(vec![3], vec![-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let sm = Model::new(vec![2], vec![Layer::Softmax]).unwrap();
        assert_eq!(sm.forward(&t(vec![2], vec![0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let err = Model::new(
            vec![3],
            vec![
                Layer::Relu,
                Layer::Dense {
                    weight: Tensor::zeros(vec![1, 2]),
                    bias: Tensor::zeros(vec![1]),
                },
            ],
        )
        .unwrap_err();
        match err {
            Error::LayerShape { layer, kind, .. } => {
                assert_eq!(layer, 1);
                assert_eq!(kind, "dense");
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = linear_2_3();
        assert!(matches!(
            m.forward(&t(vec![3], vec![0.0; 3])),
            Err(Error::LayerShape { layer: 0, .. })
        ));
    }

    #[test]
    fn score_selection() {
        let m = identity_softmax();
        let x = t(vec![2], vec![1.0, 3.0]);
        assert_eq!(m.score(&x, ScoreTarget::logit(1)).unwrap(), 3.0);
        let p = m.score(&x, ScoreTarget::probability(1)).unwrap();
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p - expected).abs() < 1e-12);
        assert!((p - 0.8808).abs() < 1e-4);
        assert!(matches!(
            m.score(&x, ScoreTarget::logit(5)),
            Err(Error::ClassOutOfRange { index: 5, dim: 2 })
        ));
    }

    #[test]
    fn gradient_examples() {
        let m = linear_2_3();
        for x in [[0.0, 0.0], [-4.0, 7.5]] {
            let g = m.gradient(&t(vec![2], x.to_vec()), ScoreTarget::logit(0)).unwrap();
            assert_eq!(g.data(), &[2.0, 3.0]);
        }
        let relu = Model::new(vec![1], vec![Layer::Relu]).unwrap();
        let g = relu.gradient(&t(vec![1], vec![-1.0]), ScoreTarget::logit(0)).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn probability_gradient_matches_finite_differences() {
        let m = identity_softmax();
        let x = t(vec![2], vec![0.3, -0.2]);
        let target = ScoreTarget::probability(0);
        let g = m.gradient(&x, target).unwrap();
        let fd = m.finite_diff_gradient(&x, target, 1e-4).unwrap();
        assert!(g.max_abs_diff(&fd) < 1e-6);
    }

    #[test]
    fn finite_diff_examples() {
        let sq = Model::new(vec![1], vec![Layer::Square]).unwrap();
        let fd = sq
            .finite_diff_gradient(&t(vec![1], vec![3.0]), ScoreTarget::logit(0), 1e-3)
            .unwrap();
        assert!((fd.data()[0] as f64 - 6.0).abs() < 1e-5);

        let constant = Model::new(
            vec![3],
            vec![Layer::Dense {
                weight: Tensor::zeros(vec![1, 3]),
                bias: t(vec![1], vec![4.0]),
            }],
        )
        .unwrap();
        let fd = constant
            .finite_diff_gradient(&t(vec![3], vec![1.0, 2.0, 3.0]), ScoreTarget::logit(0), 1e-3)
            .unwrap();
        assert!(fd.data().iter().all(|&v| v == 0.0));

        let lin = linear_2_3();
        for h in [1e-3, 0.5, 2.0] {
            let fd = lin
                .finite_diff_gradient(&t(vec![2], vec![0.5, 0.25]), ScoreTarget::logit(0), h)
                .unwrap();
            assert_eq!(fd.data(), &[2.0, 3.0]);
        }
        assert!(lin
            .finite_diff_gradient(&t(vec![2], vec![0.0, 0.0]), ScoreTarget::logit(0), 0.0)
            .is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let m = identity_softmax();
        let x = t(vec![2], vec![0.1, 0.7]);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!((a.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let m = Model::new(
            vec![1],
            vec![
                Layer::Dense {
                    weight: t(vec![1, 1], vec![3.0e38]),
                    bias: t(vec![1], vec![0.0]),
                },
                Layer::Square,
                Layer::Square,
                Layer::Square,
                Layer::Square,
                Layer::Square,
                Layer::Square,
                Layer::Square,
                Layer::Square,
                Layer::Square,
            ],
        )
        .unwrap();
        assert!(matches!(m.forward(&t(vec![1], vec![1.0])), Err(Error::NonFinite(_))));
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let a = linear_2_3();
        let b = Model::new(
            vec![2],
            vec![Layer::Dense {
                weight: t(vec![1, 2], vec![2.0, 3.5]),
                bias: t(vec![1], vec![0.0]),
            }],
        )
        .unwrap();
        assert_eq!(a.fingerprint(), linear_2_3().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
