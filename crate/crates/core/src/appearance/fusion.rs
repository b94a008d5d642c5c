//! Fusion network M_f (intrinsic ⊕ dynamic ⊕ encoded position → af) and the
//! color decoder M_c (af ⊕ view direction → RGB).

use nalgebra::Vector3;
use ndarray::{s, Array2};
use rand::Rng;

use super::nn::{Activation, Mlp, MlpTape, Parameterized, TensorRef};
use super::{AF_DIM, FEATURE_CHANNELS, PE_FREQUENCIES};
use crate::error::{Error, Result};
use crate::scene::SF_DIM;

/// Length of the positional encoding of a 3-vector.
pub const PE_DIM: usize = 3 + 3 * 2 * PE_FREQUENCIES;

/// `(x, sin(2^k x), cos(2^k x))` for k in 0..10, written into `out`.
pub fn positional_encoding_into(x: &Vector3<f64>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), PE_DIM);
    out[..3].copy_from_slice(x.as_slice());
    let mut freq = 1.0;
    for k in 0..PE_FREQUENCIES {
        let base = 3 + k * 6;
        for a in 0..3 {
            let (s, c) = (freq * x[a]).sin_cos();
            out[base + a] = s;
            out[base + 3 + a] = c;
        }
        freq *= 2.0;
    }
}

pub fn positional_encoding(x: &Vector3<f64>) -> Vec<f64> {
    let mut out = vec![0.0; PE_DIM];
    positional_encoding_into(x, &mut out);
    out
}

pub fn positional_encoding_backward(x: &Vector3<f64>, d_out: &[f64]) -> Vector3<f64> {
    let mut d = Vector3::new(d_out[0], d_out[1], d_out[2]);
    let mut freq = 1.0;
    for k in 0..PE_FREQUENCIES {
        let base = 3 + k * 6;
        for a in 0..3 {
            let (s, c) = (freq * x[a]).sin_cos();
            d[a] += freq * (c * d_out[base + a] - s * d_out[base + 3 + a]);
        }
        freq *= 2.0;
    }
    d
}

/// Unit direction from the camera center to the point and its backward.
pub fn view_direction(x: &Vector3<f64>, camera_center: &Vector3<f64>) -> Vector3<f64> {
    (x - camera_center).normalize()
}

pub fn view_direction_backward(
    x: &Vector3<f64>,
    camera_center: &Vector3<f64>,
    d_dir: &Vector3<f64>,
) -> Vector3<f64> {
    let v = x - camera_center;
    let n = v.norm();
    let dir = v / n;
    (d_dir - dir * dir.dot(d_dir)) / n
}

/// Which auxiliary signal the color decoder receives next to `af`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderInput {
    /// Normalized camera-to-point direction (3 values).
    ViewDirection,
    /// Positional encoding of the point (synthetic fixed-color scenes).
    Position,
}

impl DecoderInput {
    pub fn dim(self) -> usize {
        match self {
            DecoderInput::ViewDirection => 3,
            DecoderInput::Position => PE_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNets {
    pub k: usize,
    /// First fusion MLP: (sf ⊕ df ⊕ PE(X)) → 128 → 96 → 64.
    pub fuse_in: Mlp,
    /// Second fusion MLP: 64 → 48 → 48 → af.
    pub fuse_out: Mlp,
    /// Color decoder: (af ⊕ aux) → 48 → RGB (sigmoid).
    pub decoder: Mlp,
    pub decoder_input: DecoderInput,
}

pub struct FuseTape {
    first: MlpTape,
    second: MlpTape,
}

impl FuseTape {
    pub fn af(&self) -> &Array2<f64> {
        self.second.output()
    }

    pub fn relu_pattern(&self, nets: &FusionNets) -> Vec<bool> {
        let mut out = self.first.relu_pattern(&nets.fuse_in);
        out.extend(self.second.relu_pattern(&nets.fuse_out));
        out
    }
}

impl FusionNets {
    pub fn new<R: Rng + ?Sized>(k: usize, decoder_input: DecoderInput, rng: &mut R) -> Self {
        let in_dim = SF_DIM + FEATURE_CHANNELS * (k + 1) + PE_DIM;
        Self {
            k,
            fuse_in: Mlp::xavier(&[in_dim, 128, 96, 64], Activation::Relu, Activation::Relu, rng),
            fuse_out: Mlp::xavier(&[64, 48, 48, AF_DIM], Activation::Relu, Activation::Identity, rng),
            decoder: Mlp::xavier(
                &[AF_DIM + decoder_input.dim(), 48, 3],
                Activation::Relu,
                Activation::Sigmoid,
                rng,
            ),
            decoder_input,
        }
    }

    pub fn df_dim(&self) -> usize {
        FEATURE_CHANNELS * (self.k + 1)
    }

    pub fn fuse_input_dim(&self) -> usize {
        SF_DIM + self.df_dim() + PE_DIM
    }

    /// Builds the fusion input rows `sf ⊕ df ⊕ PE(X)`.
    pub fn fuse_inputs(
        &self,
        intrinsic: &Array2<f64>,
        dynamic: &Array2<f64>,
        positions: &[Vector3<f64>],
    ) -> Result<Array2<f64>> {
        let n = positions.len();
        if intrinsic.dim() != (n, SF_DIM) {
            return Err(Error::contract(format!(
                "intrinsic features {:?}, expected ({n}, {SF_DIM})",
                intrinsic.dim()
            )));
        }
        if dynamic.dim() != (n, self.df_dim()) {
            return Err(Error::contract(format!(
                "dynamic features {:?}, expected ({n}, {})",
                dynamic.dim(),
                self.df_dim()
            )));
        }
        let mut x = Array2::zeros((n, self.fuse_input_dim()));
        x.slice_mut(s![.., ..SF_DIM]).assign(intrinsic);
        x.slice_mut(s![.., SF_DIM..SF_DIM + self.df_dim()]).assign(dynamic);
        let pe_start = SF_DIM + self.df_dim();
        for (i, p) in positions.iter().enumerate() {
            let mut row = x.row_mut(i);
            positional_encoding_into(p, row.as_slice_mut().expect("row-major").split_at_mut(pe_start).1);
        }
        Ok(x)
    }

    pub fn fuse_batch_tape(&self, inputs: Array2<f64>) -> FuseTape {
        let first = self.fuse_in.forward_tape(inputs);
        let second = self.fuse_out.forward_tape(first.output().clone());
        FuseTape { first, second }
    }

    /// af for every row of `sf ⊕ df ⊕ PE(X)`.
    pub fn fuse_batch(&self, inputs: Array2<f64>) -> Array2<f64> {
        self.fuse_out.forward(self.fuse_in.forward(inputs))
    }

    /// Gradient w.r.t. the fusion input rows; parameter gradients are added to
    /// `grad`.
    pub fn fuse_backward(&self, tape: &FuseTape, d_af: Array2<f64>, grad: &mut FusionNets) -> Array2<f64> {
        let d_mid = self.fuse_out.backward(&tape.second, d_af, &mut grad.fuse_out);
        self.fuse_in.backward(&tape.first, d_mid, &mut grad.fuse_in)
    }

    pub fn decoder_inputs(
        &self,
        af: &Array2<f64>,
        positions: &[Vector3<f64>],
        camera_center: &Vector3<f64>,
    ) -> Array2<f64> {
        let n = positions.len();
        let aux = self.decoder_input.dim();
        let mut x = Array2::zeros((n, AF_DIM + aux));
        x.slice_mut(s![.., ..AF_DIM]).assign(af);
        for (i, p) in positions.iter().enumerate() {
            let mut row = x.row_mut(i);
            let tail = row.as_slice_mut().expect("row-major").split_at_mut(AF_DIM).1;
            match self.decoder_input {
                DecoderInput::ViewDirection => {
                    tail.copy_from_slice(view_direction(p, camera_center).as_slice())
                }
                DecoderInput::Position => positional_encoding_into(p, tail),
            }
        }
        x
    }

    pub fn decode_batch_tape(&self, inputs: Array2<f64>) -> MlpTape {
        self.decoder.forward_tape(inputs)
    }

    pub fn decode_batch(&self, inputs: Array2<f64>) -> Array2<f64> {
        self.decoder.forward(inputs)
    }

    pub fn decode_backward(&self, tape: &MlpTape, d_rgb: Array2<f64>, grad: &mut FusionNets) -> Array2<f64> {
        self.decoder.backward(tape, d_rgb, &mut grad.decoder)
    }

    /// Position gradient contributed by the decoder's auxiliary input.
    pub fn decoder_aux_backward(
        &self,
        position: &Vector3<f64>,
        camera_center: &Vector3<f64>,
        d_aux: &[f64],
    ) -> Vector3<f64> {
        match self.decoder_input {
            DecoderInput::ViewDirection => view_direction_backward(
                position,
                camera_center,
                &Vector3::new(d_aux[0], d_aux[1], d_aux[2]),
            ),
            DecoderInput::Position => positional_encoding_backward(position, d_aux),
        }
    }
}

impl Parameterized for FusionNets {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (prefix, mlp) in [
            ("fuse_in", &self.fuse_in),
            ("fuse_out", &self.fuse_out),
            ("decoder", &self.decoder),
        ] {
            out.extend(mlp.tensors().into_iter().map(|t| TensorRef {
                name: format!("{prefix}.{}", t.name),
                ..t
            }));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.fuse_in.tensors_mut();
        out.extend(self.fuse_out.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            k: self.k,
            fuse_in: self.fuse_in.zeros_like(),
            fuse_out: self.fuse_out.zeros_like(),
            decoder: self.decoder.zeros_like(),
            decoder_input: self.decoder_input,
        }
    }
}

/// af = M_f(sf, df, PE(X)) for a single point.
pub fn fuse(sf: &[f64], df: &[f64], x: &Vector3<f64>, nets: &FusionNets) -> Result<Vec<f64>> {
    let sf = Array2::from_shape_vec((1, sf.len()), sf.to_vec())
        .map_err(|e| Error::contract(e.to_string()))?;
    let df = Array2::from_shape_vec((1, df.len()), df.to_vec())
        .map_err(|e| Error::contract(e.to_string()))?;
    let inputs = nets.fuse_inputs(&sf, &df, std::slice::from_ref(x))?;
    Ok(nets.fuse_batch(inputs).row(0).to_vec())
}

/// Color of a single point at `position` seen from `camera_center`. The
/// decoder uses the view direction or the positional encoding per its
/// configuration.
pub fn decode_color(
    af: &[f64],
    position: &Vector3<f64>,
    camera_center: &Vector3<f64>,
    nets: &FusionNets,
) -> Result<[f64; 3]> {
    if af.len() != AF_DIM {
        return Err(Error::contract(format!("af has length {}, expected {AF_DIM}", af.len())));
    }
    let af = Array2::from_shape_vec((1, AF_DIM), af.to_vec()).expect("checked length");
    let inputs = nets.decoder_inputs(&af, std::slice::from_ref(position), camera_center);
    let rgb = nets.decode_batch(inputs);
    Ok([rgb[(0, 0)], rgb[(0, 1)], rgb[(0, 2)]])
}
