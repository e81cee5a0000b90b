use crate::tensor::Tensor;

/// One stage of a feed-forward model.
///
/// Spatial layers work on `CHW` activations. `Dense` and `Softmax` expect a
/// rank-1 input, so image models place a `Flatten` in front of them.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight` is `[out, in]`, `bias` is `[out]`.
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    /// `weight` is `[out_channels, in_channels, kh, kw]`, `bias` is
    /// `[out_channels]`. Zero padding, no dilation.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Relu,
    Softplus,
    /// Elementwise `x^2`.
    Square,
    MaxPool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    AvgPool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Flatten,
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Softplus => "softplus",
            Layer::Square => "square",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::AvgPool2d { .. } => "avgpool2d",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax",
        }
    }

    /// True for layers whose derivative jumps somewhere (ReLU at 0, max-pool
    /// at ties).
    pub fn has_kinks(&self) -> bool {
        matches!(self, Layer::Relu | Layer::MaxPool2d { .. })
    }

    /// Which linear piece each output sits on: ReLU signs, maxpool winners.
    /// Empty for smooth layers. Two inputs with equal patterns lie on the same
    /// piece, so a difference stencil between them crosses no kink.
    pub(crate) fn branch_pattern(&self, in_shape: &[usize], x: &[f64]) -> Vec<usize> {
        match self {
            Layer::Relu => x.iter().map(|&v| (v > 0.0) as usize).collect(),
            Layer::MaxPool2d { kernel, stride } => {
                let g = PoolGeom::new(in_shape, *kernel, *stride);
                (0..g.c * g.oh * g.ow).map(|o| g.argmax(x, o)).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Output shape for `input`, or the input shape the layer expected.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, Vec<usize>> {
        match self {
            Layer::Dense { weight, bias } => {
                if weight.rank() != 2 {
                    return Err(input.to_vec());
                }
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if bias.shape() != [out] {
                    return Err(vec![inp]);
                }
                if input != [inp] {
                    return Err(vec![inp]);
                }
                Ok(vec![out])
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let ws = weight.shape();
                if ws.len() != 4 || bias.shape() != [ws[0]] || stride.contains(&0) {
                    return Err(input.to_vec());
                }
                let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                match *input {
                    [c, h, w] if c == ic && h + 2 * padding[0] >= kh && w + 2 * padding[1] >= kw => Ok(vec![
                        oc,
                        (h + 2 * padding[0] - kh) / stride[0] + 1,
                        (w + 2 * padding[1] - kw) / stride[1] + 1,
                    ]),
                    _ => Err(vec![ic, kh.max(1), kw.max(1)]),
                }
            }
            Layer::MaxPool2d { kernel, stride } | Layer::AvgPool2d { kernel, stride } => {
                if kernel.contains(&0) || stride.contains(&0) {
                    return Err(input.to_vec());
                }
                match *input {
                    [c, h, w] if h >= kernel[0] && w >= kernel[1] => Ok(vec![
                        c,
                        (h - kernel[0]) / stride[0] + 1,
                        (w - kernel[1]) / stride[1] + 1,
                    ]),
                    _ => Err(vec![input.first().copied().unwrap_or(1), kernel[0], kernel[1]]),
                }
            }
            Layer::Softmax => match input {
                [n] => Ok(vec![*n]),
                _ => Err(vec![input.iter().product()]),
            },
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Relu | Layer::Softplus | Layer::Square => Ok(input.to_vec()),
        }
    }

    /// Forward pass on a validated input shape.
    pub(crate) fn forward(&self, in_shape: &[usize], x: &[f64]) -> Vec<f64> {
        match self {
            Layer::Dense { weight, bias } => {
                let n_in = x.len();
                let w = weight.data();
                bias.data()
                    .iter()
                    .enumerate()
                    .map(|(o, &b)| {
                        let row = &w[o * n_in..(o + 1) * n_in];
                        row.iter().zip(x).fold(b as f64, |acc, (&wi, &xi)| acc + wi as f64 * xi)
                    })
                    .collect()
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let g = ConvGeom::new(in_shape, weight.shape(), *stride, *padding);
                let plane = g.oh * g.ow;
                let mut y = vec![0.0; g.oc * plane];
                for (oc, out) in y.chunks_exact_mut(plane).enumerate() {
                    out.fill(bias.data()[oc] as f64);
                }
                g.for_each_span(weight.data(), |wv, xi, yi, n, step| {
                    if step == 1 {
                        for (o, &v) in y[yi..yi + n].iter_mut().zip(&x[xi..xi + n]) {
                            *o += wv * v;
                        }
                    } else {
                        for j in 0..n {
                            y[yi + j] += wv * x[xi + j * step];
                        }
                    }
                });
                y
            }
            Layer::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Layer::Softplus => x.iter().map(|&v| softplus(v)).collect(),
            Layer::Square => x.iter().map(|&v| v * v).collect(),
            Layer::MaxPool2d { kernel, stride } => {
                let g = PoolGeom::new(in_shape, *kernel, *stride);
                (0..g.c * g.oh * g.ow).map(|o| x[g.argmax(x, o)]).collect()
            }
            Layer::AvgPool2d { kernel, stride } => {
                let g = PoolGeom::new(in_shape, *kernel, *stride);
                let area = (kernel[0] * kernel[1]) as f64;
                (0..g.c * g.oh * g.ow)
                    .map(|o| g.window(o).map(|i| x[i]).sum::<f64>() / area)
                    .collect()
            }
            Layer::Flatten => x.to_vec(),
            Layer::Softmax => softmax(x),
        }
    }

    /// Vector-Jacobian product: given the layer input `x`, its output `y` and
    /// the cotangent `gy` of the output, returns the cotangent of the input.
    pub(crate) fn backward(&self, in_shape: &[usize], x: &[f64], y: &[f64], gy: &[f64]) -> Vec<f64> {
        match self {
            Layer::Dense { weight, .. } => {
                let n_in = x.len();
                let w = weight.data();
                let mut gx = vec![0.0; n_in];
                for (o, &g) in gy.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    for (gxi, &wi) in gx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *gxi += wi as f64 * g;
                    }
                }
                gx
            }
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let g = ConvGeom::new(in_shape, weight.shape(), *stride, *padding);
                let mut gx = vec![0.0; x.len()];
                g.for_each_span(weight.data(), |wv, xi, yi, n, step| {
                    if step == 1 {
                        for (o, &v) in gx[xi..xi + n].iter_mut().zip(&gy[yi..yi + n]) {
                            *o += wv * v;
                        }
                    } else {
                        for j in 0..n {
                            gx[xi + j * step] += wv * gy[yi + j];
                        }
                    }
                });
                gx
            }
            // Subgradient 0 at exactly 0.
            Layer::Relu => x.iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
            Layer::Softplus => x.iter().zip(gy).map(|(&v, &g)| sigmoid(v) * g).collect(),
            Layer::Square => x.iter().zip(gy).map(|(&v, &g)| 2.0 * v * g).collect(),
            Layer::MaxPool2d { kernel, stride } => {
                let g = PoolGeom::new(in_shape, *kernel, *stride);
                let mut gx = vec![0.0; x.len()];
                for (o, &go) in gy.iter().enumerate() {
                    gx[g.argmax(x, o)] += go;
                }
                gx
            }
            Layer::AvgPool2d { kernel, stride } => {
                let g = PoolGeom::new(in_shape, *kernel, *stride);
                let area = (kernel[0] * kernel[1]) as f64;
                let mut gx = vec![0.0; x.len()];
                for (o, &go) in gy.iter().enumerate() {
                    for i in g.window(o) {
                        gx[i] += go / area;
                    }
                }
                gx
            }
            Layer::Flatten => gy.to_vec(),
            Layer::Softmax => {
                let dot: f64 = gy.iter().zip(y).map(|(g, p)| g * p).sum();
                y.iter().zip(gy).map(|(&p, &g)| p * (g - dot)).collect()
            }
        }
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct ConvGeom {
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: [usize; 2],
    padding: [usize; 2],
}

impl ConvGeom {
    fn new(in_shape: &[usize], wshape: &[usize], stride: [usize; 2], padding: [usize; 2]) -> Self {
        let (ic, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (oc, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        ConvGeom {
            ic,
            h,
            w,
            oc,
            kh,
            kw,
            oh: (h + 2 * padding[0] - kh) / stride[0] + 1,
            ow: (w + 2 * padding[1] - kw) / stride[1] + 1,
            stride,
            padding,
        }
    }

    /// Range of output positions along one axis whose input coordinate
    /// `o * stride + k - pad` lands inside `0..n`.
    fn valid(n: usize, n_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if n + pad > k {
            (n + pad - k).div_ceil(stride).min(n_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Walks every weight tap and, for each output row it touches, calls
    /// `f(weight, input_start, output_start, len, input_step)`. For a fixed
    /// output element the taps arrive in `(ic, ky, kx)` order.
    fn for_each_span(&self, w: &[f32], mut f: impl FnMut(f64, usize, usize, usize, usize)) {
        let [sy, sx] = self.stride;
        let [py, px] = self.padding;
        for oc in 0..self.oc {
            for ic in 0..self.ic {
                for ky in 0..self.kh {
                    let (oy_lo, oy_hi) = Self::valid(self.h, self.oh, ky, sy, py);
                    for kx in 0..self.kw {
                        let (ox_lo, ox_hi) = Self::valid(self.w, self.ow, kx, sx, px);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let wv = w[((oc * self.ic + ic) * self.kh + ky) * self.kw + kx] as f64;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * sy + ky - py;
                            let xi = (ic * self.h + iy) * self.w + ox_lo * sx + kx - px;
                            let yi = (oc * self.oh + oy) * self.ow + ox_lo;
                            f(wv, xi, yi, ox_hi - ox_lo, sx);
                        }
                    }
                }
            }
        }
    }
}

struct PoolGeom {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
}

impl PoolGeom {
    fn new(in_shape: &[usize], kernel: [usize; 2], stride: [usize; 2]) -> Self {
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        PoolGeom {
            c,
            h,
            w,
            oh: (h - kernel[0]) / stride[0] + 1,
            ow: (w - kernel[1]) / stride[1] + 1,
            kernel,
            stride,
        }
    }

    /// Input indices of the window behind flat output index `o`, row-major.
    fn window(&self, o: usize) -> impl Iterator<Item = usize> + '_ {
        let c = o / (self.oh * self.ow);
        let oy = (o / self.ow) % self.oh;
        let ox = o % self.ow;
        let (y0, x0) = (oy * self.stride[0], ox * self.stride[1]);
        (0..self.kernel[0])
            .flat_map(move |ky| (0..self.kernel[1]).map(move |kx| (c * self.h + y0 + ky) * self.w + x0 + kx))
    }

    /// First maximal element of the window in row-major scan order.
    fn argmax(&self, x: &[f64], o: usize) -> usize {
        let mut best = usize::MAX;
        for i in self.window(o) {
            if best == usize::MAX || x[i] > x[best] {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn dense_forward() {
        let l = Layer::Dense {
            weight: t(vec![1, 2], vec![2.0, 3.0]),
            bias: t(vec![1], vec![0.0]),
        };
        assert_eq!(l.forward(&[2], &[1.0, 1.0]), vec![5.0]);
    }

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let x = [-1.0, 0.0, 2.0];
        assert_eq!(Layer::Relu.forward(&[3], &x), vec![0.0, 0.0, 2.0]);
        let y = Layer::Relu.forward(&[3], &x);
        assert_eq!(Layer::Relu.backward(&[3], &x, &y, &[1.0; 3]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_symmetric_input() {
        assert_eq!(Layer::Softmax.forward(&[2], &[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let l = Layer::MaxPool2d {
            kernel: [2, 2],
            stride: [2, 2],
        };
        let x = [1.0, 3.0, 3.0, 3.0];
        let y = l.forward(&[1, 2, 2], &x);
        assert_eq!(y, vec![3.0]);
        assert_eq!(l.backward(&[1, 2, 2], &x, &y, &[1.0]), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_with_padding_matches_hand_values() {
        // 1x2x2 input, single 3x3 all-ones kernel, padding 1: every output is the
        // sum of the whole input.
        let l = Layer::Conv2d {
            weight: Tensor::full(vec![1, 1, 3, 3], 1.0),
            bias: t(vec![1], vec![0.5]),
            stride: [1, 1],
            padding: [1, 1],
        };
        assert_eq!(l.output_shape(&[1, 2, 2]).unwrap(), vec![1, 2, 2]);
        let y = l.forward(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y, vec![10.5; 4]);
        let gx = l.backward(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0], &y, &[1.0; 4]);
        assert_eq!(gx, vec![4.0; 4]);
    }

    #[test]
    fn strided_conv_shape() {
        let l = Layer::Conv2d {
            weight: Tensor::zeros(vec![4, 3, 3, 3]),
            bias: Tensor::zeros(vec![4]),
            stride: [2, 2],
            padding: [0, 0],
        };
        assert_eq!(l.output_shape(&[3, 9, 7]).unwrap(), vec![4, 4, 3]);
        assert!(l.output_shape(&[2, 9, 7]).is_err());
        assert!(l.output_shape(&[3, 2, 2]).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
