//! Minimal layers with hand-written backward passes: dense layers, MLPs,
//! 2D convolutions and nearest-neighbor upsampling.
//!
//! A network's gradient is stored in a value of the same type (see
//! [`Parameterized::zeros_like`]), so optimizers and checkpoints walk
//! parameters and gradients through the same tensor ordering.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

/// A flat view of one named parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub trait Parameterized {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|t| t.data.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// (out, in)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.output_dim()));
        general_mat_mul(1.0, &x, &self.weight.t(), 0.0, &mut y);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad`; returns dL/dx.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Activations saved by [`Mlp::forward_tape`]; `values[0]` is the input and
/// `values[i + 1]` the post-activation output of layer `i`.
pub struct MlpTape {
    pub values: Vec<Array2<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("tape holds the input")
    }

    /// On/off state of every ReLU unit of `mlp` in this pass.
    pub fn relu_pattern(&self, mlp: &Mlp) -> Vec<bool> {
        (0..mlp.layers.len())
            .filter(|&i| mlp.activation(i) == Activation::Relu)
            .flat_map(|i| self.values[i + 1].iter().map(|v| *v > 0.0))
            .collect()
    }
}

impl Mlp {
    /// Layer widths `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn xavier<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = dims.windows(2).map(|w| Linear::xavier(w[0], w[1], rng)).collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Linear::output_dim).unwrap_or(0)
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward_tape(&self, x: Array2<f64>) -> MlpTape {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation(i);
            let mut y = layer.forward(values[i].view());
            if act != Activation::Identity {
                y.mapv_inplace(|v| act.apply(v));
            }
            values.push(y);
        }
        MlpTape { values }
    }

    pub fn forward(&self, x: Array2<f64>) -> Array2<f64> {
        let mut tape = self.forward_tape(x);
        tape.values.pop().expect("non-empty tape")
    }

    pub fn backward(&self, tape: &MlpTape, dy: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dy;
        for i in (0..self.layers.len()).rev() {
            let act = self.activation(i);
            if act != Activation::Identity {
                ndarray::Zip::from(&mut d)
                    .and(&tape.values[i + 1])
                    .for_each(|g, &y| *g *= act.derivative_from_output(y));
            }
            d = self.layers[i].backward(tape.values[i].view(), d.view(), &mut grad.layers[i]);
        }
        d
    }
}

impl Parameterized for Mlp {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(TensorRef {
                name: format!("layer{i}.weight"),
                shape: l.weight.shape().to_vec(),
                data: l.weight.as_slice().expect("standard layout"),
            });
            out.push(TensorRef {
                name: format!("layer{i}.bias"),
                shape: l.bias.shape().to_vec(),
                data: l.bias.as_slice().expect("standard layout"),
            });
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }
}

/// Square-kernel convolution over a single (C, H, W) tensor, zero padding of
/// `kernel / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// (out, in * k * k)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn he<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((out_channels, fan_in), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(out_channels),
            in_channels,
            kernel,
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    /// For each kernel tap, the output range whose input index stays inside
    /// `0..n`, as (first output, count, first input).
    fn tap_span(&self, k: usize, n: usize, out: usize) -> (usize, usize, isize) {
        let pad = (self.kernel / 2) as isize;
        let st = self.stride as isize;
        let off = k as isize - pad;
        let lo = ((-off).max(0) + st - 1) / st;
        let hi = ((n as isize - 1 - off).div_euclid(st) + 1).clamp(0, out as isize);
        let lo = lo.min(hi);
        (lo as usize, (hi - lo) as usize, lo * st + off)
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let st = self.stride;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        let cs = cols.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, ny, iy0) = self.tap_span(ky, h, oh);
                for kx in 0..k {
                    let (ox0, nx, ix0) = self.tap_span(kx, w, ow);
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                    for j in 0..ny {
                        let oy = oy0 + j;
                        let src = &plane[(iy0 as usize + j * st) * w..];
                        let d = &mut dst[oy * ow + ox0..oy * ow + ox0 + nx];
                        for (i, v) in d.iter_mut().enumerate() {
                            *v = src[ix0 as usize + i * st];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let st = self.stride;
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().expect("standard layout");
        let mut x = Array3::zeros((c, h, w));
        let xs = x.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (oy0, ny, iy0) = self.tap_span(ky, h, oh);
                for kx in 0..k {
                    let (ox0, nx, ix0) = self.tap_span(kx, w, ow);
                    let row = (ci * k + ky) * k + kx;
                    let src = &cs[row * oh * ow..(row + 1) * oh * ow];
                    for j in 0..ny {
                        let oy = oy0 + j;
                        let dst = &mut plane[(iy0 as usize + j * st) * w..];
                        let s = &src[oy * ow + ox0..oy * ow + ox0 + nx];
                        for (i, v) in s.iter().enumerate() {
                            dst[ix0 as usize + i * st] += v;
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the im2col buffer needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.out_size(h, w);
        let cols = self.im2col(x);
        let mut y = Array2::zeros((self.out_channels(), oh * ow));
        general_mat_mul(1.0, &self.weight, &cols, 0.0, &mut y);
        for (mut row, b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row += *b;
        }
        let y = y
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("contiguous conv output");
        (y, cols)
    }

    pub fn backward(
        &self,
        cols: &Array2<f64>,
        input_shape: (usize, usize, usize),
        dy: &Array3<f64>,
        grad: &mut Conv2d,
    ) -> Array3<f64> {
        let (oc, oh, ow) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((oc, oh * ow))
            .expect("contiguous conv gradient");
        general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut grad.weight);
        grad.bias += &dy2.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(&dy2);
        let (c, h, w) = input_shape;
        self.col2im(&dcols, c, h, w)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            in_channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
        }
    }
}

pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[(ci, y / 2, xx / 2)])
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::zeros((c, h2 / 2, w2 / 2));
    for ((ci, y, x), v) in dy.indexed_iter() {
        dx[(ci, y / 2, x / 2)] += v;
    }
    dx
}

pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial size")
}

pub fn split_channels(x: &Array3<f64>, at: usize) -> (Array3<f64>, Array3<f64>) {
    (
        x.slice(s![..at, .., ..]).to_owned(),
        x.slice(s![at.., .., ..]).to_owned(),
    )
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `dy` by the ReLU output `y`.
pub fn relu_backward_inplace(dy: &mut Array3<f64>, y: &Array3<f64>) {
    ndarray::Zip::from(dy).and(y).for_each(|g, &v| {
        if v <= 0.0 {
            *g = 0.0
        }
    });
}
