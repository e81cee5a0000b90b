//! Small synthetic models and inputs for tests, demos and the acceptance
//! suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Layer, Model};
use crate::rng::standard_normal;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    fn layer(self) -> Layer {
        match self {
            Activation::Relu => Layer::Relu,
            Activation::Softplus => Layer::Softplus,
        }
    }
}

fn normal_tensor(rng: &mut ChaCha20Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (standard_normal(rng) * std) as f32).collect();
    Tensor::new(shape, data).unwrap()
}

fn dense(rng: &mut ChaCha20Rng, n_in: usize, n_out: usize) -> Layer {
    Layer::Dense {
        weight: normal_tensor(rng, vec![n_out, n_in], (2.0 / n_in as f64).sqrt()),
        bias: normal_tensor(rng, vec![n_out], 0.1),
    }
}

fn conv3x3(rng: &mut ChaCha20Rng, c_in: usize, c_out: usize) -> Layer {
    Layer::Conv2d {
        weight: normal_tensor(rng, vec![c_out, c_in, 3, 3], (2.0 / (9 * c_in) as f64).sqrt()),
        bias: normal_tensor(rng, vec![c_out], 0.1),
        stride: [1, 1],
        padding: [1, 1],
    }
}

/// `f(x) = w · x + b` on a rank-1 input.
pub fn linear(weights: &[f32], bias: f32) -> Model {
    Model::new(
        vec![weights.len()],
        vec![Layer::Dense {
            weight: Tensor::new(vec![1, weights.len()], weights.to_vec()).unwrap(),
            bias: Tensor::new(vec![1], vec![bias]).unwrap(),
        }],
    )
    .unwrap()
}

/// `f(x) = value` for any input of `input_shape`.
pub fn constant(input_shape: &[usize], value: f32) -> Model {
    let n: usize = input_shape.iter().product();
    let mut layers = Vec::new();
    if input_shape.len() != 1 {
        layers.push(Layer::Flatten);
    }
    layers.push(Layer::Dense {
        weight: Tensor::zeros(vec![1, n]),
        bias: Tensor::new(vec![1], vec![value]).unwrap(),
    });
    Model::new(input_shape.to_vec(), layers).unwrap()
}

/// Fully connected network with He-scaled Gaussian weights.
pub fn random_mlp(seed: u64, n_in: usize, hidden: &[usize], n_out: usize, act: Activation) -> Model {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut width = n_in;
    for &h in hidden {
        layers.push(dense(&mut rng, width, h));
        layers.push(act.layer());
        width = h;
    }
    layers.push(dense(&mut rng, width, n_out));
    Model::new(vec![n_in], layers).unwrap()
}

/// conv-relu-maxpool, conv-relu-avgpool, dense-relu, dense, softmax. Spatial
/// dimensions must be divisible by 4.
pub fn random_conv_net(seed: u64, input: [usize; 3], classes: usize) -> Model {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let [c, h, w] = input;
    let flat = 4 * (h / 4) * (w / 4);
    let layers = vec![
        conv3x3(&mut rng, c, 4),
        Layer::Relu,
        Layer::MaxPool2d {
            kernel: [2, 2],
            stride: [2, 2],
        },
        conv3x3(&mut rng, 4, 4),
        Layer::Relu,
        Layer::AvgPool2d {
            kernel: [2, 2],
            stride: [2, 2],
        },
        Layer::Flatten,
        dense(&mut rng, flat, 16),
        Layer::Relu,
        dense(&mut rng, 16, classes),
        Layer::Softmax,
    ];
    Model::new(input.to_vec(), layers).unwrap()
}

/// conv-relu, conv-relu, dense-relu, dense. No pooling, so the only kinks
/// are ReLU ones.
pub fn random_conv_relu_net(seed: u64, input: [usize; 3], classes: usize) -> Model {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let [c, h, w] = input;
    let layers = vec![
        conv3x3(&mut rng, c, 4),
        Layer::Relu,
        conv3x3(&mut rng, 4, 2),
        Layer::Relu,
        Layer::Flatten,
        dense(&mut rng, 2 * h * w, 16),
        Layer::Relu,
        dense(&mut rng, 16, classes),
    ];
    Model::new(input.to_vec(), layers).unwrap()
}

/// Uniform input on `[-scale, scale)`.
pub fn random_input(seed: u64, shape: &[usize], scale: f32) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed_1234);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform input on `[0, 1)`.
pub fn random_image(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x1a6e_0001);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random::<f32>()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A single-channel scene whose score is carried by planted square regions.
///
/// The score is `Σ_{i in mask} min(x_i, threshold) + Σ_i d_i x_i` with small
/// random distractor weights `d`. Masked pixels sit at 1.0, above the
/// threshold, so the input gradient there is zero and only the distractor term
/// shows up in the local gradient. Replacing masked pixels with uniform noise
/// on `[0, 1]` lowers the score.
#[derive(Debug, Clone)]
pub struct PlantedScene {
    pub model: Model,
    pub input: Tensor,
    pub mask: Vec<bool>,
    /// Top-left anchors of the planted `kernel x kernel` squares.
    pub regions: Vec<(usize, usize)>,
    pub kernel: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SceneParams {
    pub size: usize,
    pub kernel: usize,
    pub regions: usize,
    pub threshold: f32,
    pub distractor_std: f64,
    /// Background pixels are uniform on `[0, background_max)`.
    pub background_max: f32,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            size: 96,
            kernel: 4,
            regions: 30,
            threshold: 0.9,
            distractor_std: 0.01,
            background_max: 0.8,
        }
    }
}

impl PlantedScene {
    pub fn new(seed: u64, p: SceneParams) -> PlantedScene {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9a47_0000);
        let cell = 2 * p.kernel;
        let per_side = p.size / cell;
        assert!(
            per_side * per_side >= p.regions,
            "scene too small for {} regions",
            p.regions
        );
        let mut cells: Vec<usize> = (0..per_side * per_side).collect();
        // partial Fisher-Yates
        for i in 0..p.regions {
            let j = rng.random_range(i..cells.len());
            cells.swap(i, j);
        }
        let offset = p.kernel / 2;
        let mut regions: Vec<(usize, usize)> = cells[..p.regions]
            .iter()
            .map(|&c| ((c / per_side) * cell + offset, (c % per_side) * cell + offset))
            .collect();
        regions.sort_unstable();

        let n = p.size * p.size;
        let mut mask = vec![false; n];
        for &(r, c) in &regions {
            for y in r..r + p.kernel {
                for x in c..c + p.kernel {
                    mask[y * p.size + x] = true;
                }
            }
        }
        let data: Vec<f32> = mask
            .iter()
            .map(|&m| if m { 1.0 } else { rng.random::<f32>() * p.background_max })
            .collect();
        let input = Tensor::new(vec![1, p.size, p.size], data).unwrap();

        let distractor: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng) * p.distractor_std).collect();
        // channel 0: relu(threshold - x); channel 1: relu(x + 10) == x + 10 on the valid range
        let conv = Layer::Conv2d {
            weight: Tensor::new(vec![2, 1, 1, 1], vec![-1.0, 1.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![p.threshold, 10.0]).unwrap(),
            stride: [1, 1],
            padding: [0, 0],
        };
        let mut w = Vec::with_capacity(2 * n);
        w.extend(mask.iter().map(|&m| if m { -1.0f32 } else { 0.0 }));
        w.extend(distractor.iter().map(|&d| d as f32));
        let masked = mask.iter().filter(|&&m| m).count() as f64;
        let d_sum: f64 = distractor.iter().map(|&d| d as f32 as f64).sum();
        let bias = (p.threshold as f64 * masked - 10.0 * d_sum) as f32;
        let model = Model::new(
            vec![1, p.size, p.size],
            vec![
                conv,
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense {
                    weight: Tensor::new(vec![1, 2 * n], w).unwrap(),
                    bias: Tensor::new(vec![1], vec![bias]).unwrap(),
                },
            ],
        )
        .unwrap();
        PlantedScene {
            model,
            input,
            mask,
            regions,
            kernel: p.kernel,
            size: p.size,
        }
    }

    /// Indicator of the planted mask.
    pub fn ground_truth(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![1, self.size, self.size], data).unwrap()
    }
}
