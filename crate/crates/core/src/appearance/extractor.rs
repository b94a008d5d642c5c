//! Compact encoder-decoder producing the K + 1 feature maps and the
//! visibility map from a reference image.
//!
//! Encoder: three stride-2 3x3 conv blocks (16, 32, 64 channels, ReLU).
//! Feature decoder: three nearest-upsample + conv blocks (32, 16, 16) with
//! skips from the two finer encoder blocks, then a 1x1 head emitting
//! `16 (K + 1)` channels. Visibility decoder: two upsample + conv blocks from
//! the quarter-resolution encoder feature, no skips, then a 1x1 head and a
//! sigmoid.

use ndarray::{s, Array2, Array3};
use rand::Rng;

use super::nn::{
    concat_channels, relu_backward_inplace, relu_inplace, split_channels, upsample2,
    upsample2_backward, Conv2d, Parameterized, TensorRef,
};
use super::FEATURE_CHANNELS;
use crate::frame::Image;

/// Spatial sizes must be divisible by this; inputs are edge-padded otherwise.
pub const DOWNSAMPLE_FACTOR: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    /// F¹..F^K, each (16, H, W).
    pub maps: Vec<Array3<f64>>,
    /// F^P, (16, H, W).
    pub projection: Array3<f64>,
    /// Visibility map (H, W), strictly inside (0, 1).
    pub visibility: Array2<f64>,
}

impl FeatureStack {
    pub fn k(&self) -> usize {
        self.maps.len()
    }

    pub fn height(&self) -> usize {
        self.visibility.nrows()
    }

    pub fn width(&self) -> usize {
        self.visibility.ncols()
    }

    pub fn zeros(k: usize, height: usize, width: usize) -> Self {
        Self {
            maps: vec![Array3::zeros((FEATURE_CHANNELS, height, width)); k],
            projection: Array3::zeros((FEATURE_CHANNELS, height, width)),
            visibility: Array2::zeros((height, width)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorNet {
    pub k: usize,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec3: Conv2d,
    dec2: Conv2d,
    dec1: Conv2d,
    head: Conv2d,
    vis2: Conv2d,
    vis1: Conv2d,
    vis_head: Conv2d,
}

/// Intermediate values kept for the backward pass.
pub struct ExtractorTape {
    height: usize,
    width: usize,
    input: Array3<f64>,
    e1: (Array3<f64>, Array2<f64>),
    e2: (Array3<f64>, Array2<f64>),
    e3: (Array3<f64>, Array2<f64>),
    d3: (Array3<f64>, Array2<f64>),
    d2: (Array3<f64>, Array2<f64>),
    d1: (Array3<f64>, Array2<f64>),
    head_cols: Array2<f64>,
    v2: (Array3<f64>, Array2<f64>),
    v1: (Array3<f64>, Array2<f64>),
    vis_cols: Array2<f64>,
    /// Padded visibility output after the sigmoid.
    vis: Array2<f64>,
}

impl ExtractorTape {
    /// On/off state of every ReLU unit in the pass.
    pub fn relu_pattern(&self) -> Vec<bool> {
        [&self.e1, &self.e2, &self.e3, &self.d3, &self.d2, &self.d1, &self.v2, &self.v1]
            .iter()
            .flat_map(|(y, _)| y.iter().map(|v| *v > 0.0))
            .collect()
    }
}

impl ExtractorNet {
    pub fn new<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let out = FEATURE_CHANNELS * (k + 1);
        Self {
            k,
            enc1: Conv2d::he(3, 16, 3, 2, rng),
            enc2: Conv2d::he(16, 32, 3, 2, rng),
            enc3: Conv2d::he(32, 64, 3, 2, rng),
            dec3: Conv2d::he(64 + 32, 32, 3, 1, rng),
            dec2: Conv2d::he(32 + 16, 16, 3, 1, rng),
            dec1: Conv2d::he(16, 16, 3, 1, rng),
            head: Conv2d::he(16, out, 1, 1, rng),
            vis2: Conv2d::he(32, 16, 3, 1, rng),
            vis1: Conv2d::he(16, 8, 3, 1, rng),
            vis_head: Conv2d::he(8, 1, 1, 1, rng),
        }
    }

    fn convs(&self) -> [(&'static str, &Conv2d); 10] {
        [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("enc3", &self.enc3),
            ("dec3", &self.dec3),
            ("dec2", &self.dec2),
            ("dec1", &self.dec1),
            ("head", &self.head),
            ("vis2", &self.vis2),
            ("vis1", &self.vis1),
            ("vis_head", &self.vis_head),
        ]
    }

    fn convs_mut(&mut self) -> [&mut Conv2d; 10] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.enc3,
            &mut self.dec3,
            &mut self.dec2,
            &mut self.dec1,
            &mut self.head,
            &mut self.vis2,
            &mut self.vis1,
            &mut self.vis_head,
        ]
    }

    pub fn forward(&self, image: &Image) -> (FeatureStack, ExtractorTape) {
        let (h, w) = (image.height, image.width);
        let ph = h.div_ceil(DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR;
        let pw = w.div_ceil(DOWNSAMPLE_FACTOR) * DOWNSAMPLE_FACTOR;
        let input = Array3::from_shape_fn((3, ph, pw), |(c, y, x)| {
            image.data[(y.min(h - 1) * w + x.min(w - 1)) * 3 + c]
        });

        let conv_relu = |conv: &Conv2d, x: &Array3<f64>| {
            let (mut y, cols) = conv.forward(x);
            relu_inplace(&mut y);
            (y, cols)
        };

        let e1 = conv_relu(&self.enc1, &input);
        let e2 = conv_relu(&self.enc2, &e1.0);
        let e3 = conv_relu(&self.enc3, &e2.0);
        let d3 = conv_relu(&self.dec3, &concat_channels(&upsample2(&e3.0), &e2.0));
        let d2 = conv_relu(&self.dec2, &concat_channels(&upsample2(&d3.0), &e1.0));
        let d1 = conv_relu(&self.dec1, &upsample2(&d2.0));
        let (features, head_cols) = self.head.forward(&d1.0);

        let v2 = conv_relu(&self.vis2, &upsample2(&e2.0));
        let v1 = conv_relu(&self.vis1, &upsample2(&v2.0));
        let (vis_logit, vis_cols) = self.vis_head.forward(&v1.0);
        let vis = vis_logit
            .index_axis(ndarray::Axis(0), 0)
            .mapv(|v| 1.0 / (1.0 + (-v).exp()));

        let crop = features.slice(s![.., ..h, ..w]);
        let maps = (0..self.k)
            .map(|i| {
                crop.slice(s![i * FEATURE_CHANNELS..(i + 1) * FEATURE_CHANNELS, .., ..])
                    .to_owned()
            })
            .collect();
        let projection = crop
            .slice(s![self.k * FEATURE_CHANNELS.., .., ..])
            .to_owned();
        let visibility = vis.slice(s![..h, ..w]).to_owned();

        let stack = FeatureStack {
            maps,
            projection,
            visibility,
        };
        let tape = ExtractorTape {
            height: h,
            width: w,
            input,
            e1,
            e2,
            e3,
            d3,
            d2,
            d1,
            head_cols,
            v2,
            v1,
            vis_cols,
            vis,
        };
        (stack, tape)
    }

    pub fn extract(&self, image: &Image) -> FeatureStack {
        self.forward(image).0
    }

    /// Parameter gradients from gradients on the feature stack.
    pub fn backward(&self, tape: &ExtractorTape, d_stack: &FeatureStack) -> ExtractorNet {
        let mut grad = self.zeros_like();
        let (h, w) = (tape.height, tape.width);
        let (_, ph, pw) = tape.input.dim();

        let mut d_features = Array3::zeros((FEATURE_CHANNELS * (self.k + 1), ph, pw));
        for (i, m) in d_stack.maps.iter().enumerate() {
            d_features
                .slice_mut(s![i * FEATURE_CHANNELS..(i + 1) * FEATURE_CHANNELS, ..h, ..w])
                .assign(m);
        }
        d_features
            .slice_mut(s![self.k * FEATURE_CHANNELS.., ..h, ..w])
            .assign(&d_stack.projection);

        // Feature branch.
        let mut d_d1 = self
            .head
            .backward(&tape.head_cols, tape.d1.0.dim(), &d_features, &mut grad.head);
        relu_backward_inplace(&mut d_d1, &tape.d1.0);
        let d_up2 = self
            .dec1
            .backward(&tape.d1.1, (16, ph, pw), &d_d1, &mut grad.dec1);
        let mut d_d2 = upsample2_backward(&d_up2);
        relu_backward_inplace(&mut d_d2, &tape.d2.0);
        let d_cat2 = self.dec2.backward(
            &tape.d2.1,
            (32 + 16, ph / 2, pw / 2),
            &d_d2,
            &mut grad.dec2,
        );
        let (d_up3, mut d_e1) = split_channels(&d_cat2, 32);
        let mut d_d3 = upsample2_backward(&d_up3);
        relu_backward_inplace(&mut d_d3, &tape.d3.0);
        let d_cat3 = self.dec3.backward(
            &tape.d3.1,
            (64 + 32, ph / 4, pw / 4),
            &d_d3,
            &mut grad.dec3,
        );
        let (d_up_e3, mut d_e2) = split_channels(&d_cat3, 64);
        let mut d_e3 = upsample2_backward(&d_up_e3);

        // Visibility branch.
        let mut d_vis = Array3::zeros((1, ph, pw));
        for y in 0..h {
            for x in 0..w {
                let v = tape.vis[(y, x)];
                d_vis[(0, y, x)] = d_stack.visibility[(y, x)] * v * (1.0 - v);
            }
        }
        let mut d_v1 = self
            .vis_head
            .backward(&tape.vis_cols, tape.v1.0.dim(), &d_vis, &mut grad.vis_head);
        relu_backward_inplace(&mut d_v1, &tape.v1.0);
        let d_up_v2 = self
            .vis1
            .backward(&tape.v1.1, (16, ph, pw), &d_v1, &mut grad.vis1);
        let mut d_v2 = upsample2_backward(&d_up_v2);
        relu_backward_inplace(&mut d_v2, &tape.v2.0);
        let d_up_e2 = self
            .vis2
            .backward(&tape.v2.1, (32, ph / 2, pw / 2), &d_v2, &mut grad.vis2);
        d_e2 += &upsample2_backward(&d_up_e2);

        // Encoder.
        relu_backward_inplace(&mut d_e3, &tape.e3.0);
        d_e2 += &self
            .enc3
            .backward(&tape.e3.1, tape.e2.0.dim(), &d_e3, &mut grad.enc3);
        relu_backward_inplace(&mut d_e2, &tape.e2.0);
        d_e1 += &self
            .enc2
            .backward(&tape.e2.1, tape.e1.0.dim(), &d_e2, &mut grad.enc2);
        relu_backward_inplace(&mut d_e1, &tape.e1.0);
        self.enc1
            .backward(&tape.e1.1, tape.input.dim(), &d_e1, &mut grad.enc1);
        grad
    }
}

impl Parameterized for ExtractorNet {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (name, c) in self.convs() {
            out.push(TensorRef {
                name: format!("{name}.weight"),
                shape: c.weight.shape().to_vec(),
                data: c.weight.as_slice().expect("standard layout"),
            });
            out.push(TensorRef {
                name: format!("{name}.bias"),
                shape: c.bias.shape().to_vec(),
                data: c.bias.as_slice().expect("standard layout"),
            });
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in self.convs_mut() {
            out.push(c.weight.as_slice_mut().expect("standard layout"));
            out.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            k: self.k,
            enc1: self.enc1.zeros_like(),
            enc2: self.enc2.zeros_like(),
            enc3: self.enc3.zeros_like(),
            dec3: self.dec3.zeros_like(),
            dec2: self.dec2.zeros_like(),
            dec1: self.dec1.zeros_like(),
            head: self.head.zeros_like(),
            vis2: self.vis2.zeros_like(),
            vis1: self.vis1.zeros_like(),
            vis_head: self.vis_head.zeros_like(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn channel_split_for_k3() {
        let net = ExtractorNet::new(3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(net.head.out_channels(), 64);
        let stack = net.extract(&test_image(16, 16, 1));
        assert_eq!(stack.maps.len(), 3);
        for m in &stack.maps {
            assert_eq!(m.dim(), (16, 16, 16));
        }
        assert_eq!(stack.projection.dim(), (16, 16, 16));
    }

    #[test]
    fn visibility_in_open_unit_interval_and_padding() {
        let net = ExtractorNet::new(2, &mut ChaCha8Rng::seed_from_u64(0));
        let stack = net.extract(&test_image(13, 10, 2));
        assert_eq!(stack.visibility.dim(), (10, 13));
        assert_eq!(stack.projection.dim(), (16, 10, 13));
        assert!(stack.visibility.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn deterministic() {
        let net = ExtractorNet::new(3, &mut ChaCha8Rng::seed_from_u64(4));
        let img = test_image(16, 8, 3);
        assert_eq!(net.extract(&img), net.extract(&img));
    }
}
