//! Layer building blocks shared by the generator and the discriminator:
//! 3×3 convolutions, affine maps, and the three-stage conv trunk used by
//! every encoder and decoder in the model.
//!
//! Layers own their parameters as plain tensors. To run a forward pass they
//! are first *bound* into a [`Graph`], which installs the parameters as
//! leaves exactly once and records `(name, id)` pairs so the trainer can
//! route gradients back to the owning tensors afterward.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, VarId};

/// `(parameter name, graph leaf)` pairs recorded while binding a model.
pub type ParamBindings = Vec<(String, VarId)>;

/// How a parameter tensor becomes a graph leaf during binding. The default
/// implementation ([`record_leaves`]) clones the owned tensor; the gradient
/// checker substitutes one that hands out pre-installed leaves instead, so
/// the same forward-construction code serves both training and verification.
pub type Leafer<'a, T> = dyn FnMut(&mut Graph<T>, String, &Tensor<T>) -> VarId + 'a;

/// The standard leafer: clone each parameter into a gradient-carrying leaf
/// and record `(name, id)`.
pub fn record_leaves<'a, T: Scalar>(reg: &'a mut ParamBindings) -> impl FnMut(&mut Graph<T>, String, &Tensor<T>) -> VarId + 'a {
    |graph, name, param| {
        let id = graph.leaf(param.clone().with_requires_grad(true));
        reg.push((name, id));
        id
    }
}

/// Truncated-normal draws: standard normals rejected outside ±2 then scaled
/// by `std`, so every weight lies in [−2·std, 2·std].
pub fn truncated_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    return T::from_f64(z * std);
                }
            }
        })
        .collect()
}

pub const INIT_STD: f64 = 0.02;

// ---- convolution layer -----------------------------------------------------

pub struct Conv2dLayer<T: Scalar> {
    pub kernel: Tensor<T>, // [out_ch, in_ch, k, k]
    pub bias: Tensor<T>,   // [out_ch]
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let kernel = Tensor::new(
            vec![out_ch, in_ch, ksize, ksize],
            truncated_normal(rng, out_ch * in_ch * ksize * ksize, INIT_STD),
        )
        .expect("kernel shape is consistent");
        let bias = Tensor::zeros(vec![out_ch]);
        Conv2dLayer { kernel, bias, stride, padding }
    }

    pub fn bind(&self, graph: &mut Graph<T>, reg: &mut ParamBindings, name: &str) -> BoundConv2d {
        self.bind_with(graph, name, &mut record_leaves(reg))
    }

    pub fn bind_with(&self, graph: &mut Graph<T>, name: &str, leafer: &mut Leafer<T>) -> BoundConv2d {
        BoundConv2d {
            kernel: leafer(graph, format!("{name}.kernel"), &self.kernel),
            bias: leafer(graph, format!("{name}.bias"), &self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.kernel"), &self.kernel);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.kernel"), &mut self.kernel);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

pub struct BoundConv2d {
    kernel: VarId,
    bias: VarId,
    stride: usize,
    padding: usize,
}

impl BoundConv2d {
    pub fn apply<T: Scalar>(&self, graph: &mut Graph<T>, x: VarId) -> Result<VarId> {
        let y = graph.conv2d(x, self.kernel, self.stride, self.padding)?;
        graph.channel_bias(y, self.bias)
    }
}

// ---- affine layer ------------------------------------------------------------

pub struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>, // [in, out]
    pub bias: Tensor<T>,   // [out]
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        LinearLayer {
            weight: Tensor::new(vec![inputs, outputs], truncated_normal(rng, inputs * outputs, INIT_STD))
                .expect("weight shape is consistent"),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    /// All-zero affine map (used for heads that must start at the origin).
    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        LinearLayer {
            weight: Tensor::zeros(vec![inputs, outputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn bind(&self, graph: &mut Graph<T>, reg: &mut ParamBindings, name: &str) -> BoundLinear {
        self.bind_with(graph, name, &mut record_leaves(reg))
    }

    pub fn bind_with(&self, graph: &mut Graph<T>, name: &str, leafer: &mut Leafer<T>) -> BoundLinear {
        BoundLinear {
            weight: leafer(graph, format!("{name}.weight"), &self.weight),
            bias: leafer(graph, format!("{name}.bias"), &self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

pub struct BoundLinear {
    weight: VarId,
    bias: VarId,
}

impl BoundLinear {
    pub fn apply<T: Scalar>(&self, graph: &mut Graph<T>, x: VarId) -> Result<VarId> {
        graph.linear(x, self.weight, self.bias)
    }
}

// ---- conv trunk ----------------------------------------------------------

/// Which way the trunk resamples after each conv pair.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Halve,
    Double,
}

/// Three stages of (conv → ELU → conv → ELU → resample). The encoder trunk
/// halves the spatial extent per stage; the decoder trunk doubles it.
pub struct ConvTrunk<T: Scalar> {
    pub stages: Vec<[Conv2dLayer<T>; 2]>,
    pub resample: Resample,
}

impl<T: Scalar> ConvTrunk<T> {
    /// `channels` lists the input width followed by each stage's width, e.g.
    /// `[3, 32, 64, 128]` for an encoder trunk.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, channels: &[usize], resample: Resample) -> Self {
        assert!(channels.len() >= 2);
        let stages = channels
            .windows(2)
            .map(|pair| {
                [
                    Conv2dLayer::new(rng, pair[0], pair[1], 3, 1, 1),
                    Conv2dLayer::new(rng, pair[1], pair[1], 3, 1, 1),
                ]
            })
            .collect();
        ConvTrunk { stages, resample }
    }

    pub fn bind(&self, graph: &mut Graph<T>, reg: &mut ParamBindings, name: &str) -> BoundTrunk {
        self.bind_with(graph, name, &mut record_leaves(reg))
    }

    pub fn bind_with(&self, graph: &mut Graph<T>, name: &str, leafer: &mut Leafer<T>) -> BoundTrunk {
        BoundTrunk {
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, [a, b])| {
                    [
                        a.bind_with(graph, &format!("{name}.stage{i}.a"), leafer),
                        b.bind_with(graph, &format!("{name}.stage{i}.b"), leafer),
                    ]
                })
                .collect(),
            resample: self.resample,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, [a, b]) in self.stages.iter().enumerate() {
            a.visit(&format!("{prefix}.stage{i}.a"), f);
            b.visit(&format!("{prefix}.stage{i}.b"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, [a, b]) in self.stages.iter_mut().enumerate() {
            a.visit_mut(&format!("{prefix}.stage{i}.a"), f);
            b.visit_mut(&format!("{prefix}.stage{i}.b"), f);
        }
    }
}

pub struct BoundTrunk {
    stages: Vec<[BoundConv2d; 2]>,
    resample: Resample,
}

impl BoundTrunk {
    pub fn apply<T: Scalar>(&self, graph: &mut Graph<T>, mut x: VarId) -> Result<VarId> {
        for [a, b] in &self.stages {
            x = a.apply(graph, x)?;
            x = graph.elu(x)?;
            x = b.apply(graph, x)?;
            x = graph.elu(x)?;
            x = match self.resample {
                Resample::Halve => graph.downsample2(x)?,
                Resample::Double => graph.upsample2(x)?,
            };
        }
        Ok(x)
    }
}

// ---- image decoder ---------------------------------------------------------

/// Latents → images: an affine seed map to a small feature grid, a doubling
/// conv trunk, and an output convolution squashed to (0,1). The generator and
/// the discriminator both decode through this backbone (with separate
/// parameters).
pub struct ImageDecoder<T: Scalar> {
    pub seed: LinearLayer<T>,
    pub trunk: ConvTrunk<T>,
    pub output: Conv2dLayer<T>,
    latent_dim: usize,
    seed_extent: usize,
    inner_width: usize,
}

impl<T: Scalar> ImageDecoder<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let [w1, w2, w3] = cfg.widths;
        let s = cfg.image_size / 8;
        ImageDecoder {
            seed: LinearLayer::new(rng, cfg.latent_dim, w3 * s * s),
            trunk: ConvTrunk::new(rng, &[w3, w3, w2, w1], Resample::Double),
            output: Conv2dLayer::new(rng, w1, cfg.channels, 3, 1, 1),
            latent_dim: cfg.latent_dim,
            seed_extent: s,
            inner_width: w3,
        }
    }

    pub fn bind(&self, graph: &mut Graph<T>, reg: &mut ParamBindings, prefix: &str) -> BoundImageDecoder {
        self.bind_with(graph, prefix, &mut record_leaves(reg))
    }

    pub fn bind_with(&self, graph: &mut Graph<T>, prefix: &str, leafer: &mut Leafer<T>) -> BoundImageDecoder {
        BoundImageDecoder {
            seed: self.seed.bind_with(graph, &format!("{prefix}.seed"), leafer),
            trunk: self.trunk.bind_with(graph, &format!("{prefix}.trunk"), leafer),
            output: self.output.bind_with(graph, &format!("{prefix}.out"), leafer),
            latent_dim: self.latent_dim,
            seed_extent: self.seed_extent,
            inner_width: self.inner_width,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.seed.visit(&format!("{prefix}.seed"), f);
        self.trunk.visit(&format!("{prefix}.trunk"), f);
        self.output.visit(&format!("{prefix}.out"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.seed.visit_mut(&format!("{prefix}.seed"), f);
        self.trunk.visit_mut(&format!("{prefix}.trunk"), f);
        self.output.visit_mut(&format!("{prefix}.out"), f);
    }
}

pub struct BoundImageDecoder {
    seed: BoundLinear,
    trunk: BoundTrunk,
    output: BoundConv2d,
    latent_dim: usize,
    seed_extent: usize,
    inner_width: usize,
}

impl BoundImageDecoder {
    pub fn decode<T: Scalar>(&self, graph: &mut Graph<T>, z: VarId) -> Result<VarId> {
        let shape = graph.shape(z);
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::Dimension(format!(
                "decoder expects [B,{}] latents, got {:?}",
                self.latent_dim, shape
            )));
        }
        let batch = shape[0];
        let seeded = self.seed.apply(graph, z)?;
        let s = self.seed_extent;
        let map = graph.reshape(seeded, vec![batch, self.inner_width, s, s])?;
        let grown = self.trunk.apply(graph, map)?;
        let logits = self.output.apply(graph, grown)?;
        graph.sigmoid(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_respects_the_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<f32> = truncated_normal(&mut rng, 10_000, 0.02);
        assert!(draws.iter().all(|v| v.abs() <= 0.04 + 1e-9));
        let mean: f32 = draws.iter().sum::<f32>() / draws.len() as f32;
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!(draws.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a: Vec<f32> = truncated_normal(&mut ChaCha8Rng::seed_from_u64(3), 64, 0.02);
        let b: Vec<f32> = truncated_normal(&mut ChaCha8Rng::seed_from_u64(3), 64, 0.02);
        assert_eq!(a, b);
    }

    #[test]
    fn trunk_halves_and_doubles_spatial_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc: ConvTrunk<f32> = ConvTrunk::new(&mut rng, &[3, 4, 5, 6], Resample::Halve);
        let mut g = Graph::new();
        let mut reg = ParamBindings::new();
        let bound = enc.bind(&mut g, &mut reg, "enc");
        let x = g.constant(Tensor::zeros(vec![2, 3, 16, 16]));
        let y = bound.apply(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 6, 2, 2]);

        let dec: ConvTrunk<f32> = ConvTrunk::new(&mut rng, &[6, 5, 4, 3], Resample::Double);
        let bound = dec.bind(&mut g, &mut reg, "dec");
        let z = bound.apply(&mut g, y).unwrap();
        assert_eq!(g.shape(z), &[2, 3, 16, 16]);
    }

    #[test]
    fn binding_registers_every_parameter_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trunk: ConvTrunk<f32> = ConvTrunk::new(&mut rng, &[1, 2, 2, 2], Resample::Halve);
        let mut g = Graph::new();
        let mut reg = ParamBindings::new();
        trunk.bind(&mut g, &mut reg, "t");
        // 3 stages × 2 convs × (kernel + bias).
        assert_eq!(reg.len(), 12);
        let mut names: Vec<&str> = reg.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 12, "parameter names are unique");

        // The gradient-check harness zips visit order against bind order, so
        // the two traversals must agree exactly.
        let mut visit_order = Vec::new();
        trunk.visit("t", &mut |name, _| visit_order.push(name.to_string()));
        let bind_order: Vec<String> = reg.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(visit_order, bind_order);
    }

    #[test]
    fn biases_start_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer: Conv2dLayer<f32> = Conv2dLayer::new(&mut rng, 3, 8, 3, 1, 1);
        assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        let lin: LinearLayer<f32> = LinearLayer::new(&mut rng, 4, 4);
        assert!(lin.bias.data().iter().all(|&b| b == 0.0));
    }
}
