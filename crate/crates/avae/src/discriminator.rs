//! The discriminator: a second auto-encoder over the same image domain. It
//! scores a batch by how well it reconstructs it — low energy for images it
//! has learned to auto-encode (real data), high energy for everything else.
//! Its latent space doubles as a perceptual embedding: the distance between
//! the codes of a real image and of its VAE reconstruction is the
//! latent-similarity loss.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{BoundImageDecoder, BoundLinear, BoundTrunk, ConvTrunk, ImageDecoder, Leafer, LinearLayer, ParamBindings, Resample, record_leaves};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, VarId};

/// Canonical parameter-name prefixes (shared by trainer and checkpoints).
pub const PREFIX_DISC_ENCODER: &str = "disc.enc";
pub const PREFIX_DISC_DECODER: &str = "disc.dec";

/// Graph handles produced by one discriminator pass over the three inputs:
/// real images, decoded prior samples, and VAE reconstructions.
#[derive(Debug)]
pub struct DiscPass {
    pub z_real: VarId,
    pub z_fake_prior: VarId,
    pub z_fake_vae: VarId,
    pub recon_real: VarId,
    pub recon_fake_prior: VarId,
    pub recon_fake_vae: VarId,
}

/// The three reconstruction energies of one pass.
#[derive(Debug)]
pub struct Energies {
    pub real: VarId,       // L_d
    pub fake_prior: VarId, // L_g
    pub fake_vae: VarId,   // L_v
}

// ---- encoder -----------------------------------------------------------------

/// Image → deterministic latent. Same trunk as the generator's encoder but a
/// single affine head instead of a Gaussian one.
pub struct DiscEncoder<T: Scalar> {
    pub trunk: ConvTrunk<T>,
    pub head: LinearLayer<T>,
    image_size: usize,
    channels: usize,
    inner_width: usize,
}

impl<T: Scalar> DiscEncoder<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let [w1, w2, w3] = cfg.widths;
        let trunk = ConvTrunk::new(rng, &[cfg.channels, w1, w2, w3], Resample::Halve);
        let s = cfg.image_size / 8;
        DiscEncoder {
            trunk,
            head: LinearLayer::new(rng, w3 * s * s, cfg.latent_dim),
            image_size: cfg.image_size,
            channels: cfg.channels,
            inner_width: w3,
        }
    }

    pub fn bind(&self, graph: &mut Graph<T>, reg: &mut ParamBindings, prefix: &str) -> BoundDiscEncoder {
        self.bind_with(graph, prefix, &mut record_leaves(reg))
    }

    pub fn bind_with(&self, graph: &mut Graph<T>, prefix: &str, leafer: &mut Leafer<T>) -> BoundDiscEncoder {
        BoundDiscEncoder {
            trunk: self.trunk.bind_with(graph, &format!("{prefix}.trunk"), leafer),
            head: self.head.bind_with(graph, &format!("{prefix}.latent"), leafer),
            image_size: self.image_size,
            channels: self.channels,
            inner_width: self.inner_width,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.trunk.visit(&format!("{prefix}.trunk"), f);
        self.head.visit(&format!("{prefix}.latent"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.trunk.visit_mut(&format!("{prefix}.trunk"), f);
        self.head.visit_mut(&format!("{prefix}.latent"), f);
    }
}

pub struct BoundDiscEncoder {
    trunk: BoundTrunk,
    head: BoundLinear,
    image_size: usize,
    channels: usize,
    inner_width: usize,
}

impl BoundDiscEncoder {
    pub fn encode<T: Scalar>(&self, graph: &mut Graph<T>, x: VarId) -> Result<VarId> {
        let shape = graph.shape(x);
        if shape.len() != 4
            || shape[1] != self.channels
            || shape[2] != self.image_size
            || shape[3] != self.image_size
        {
            return Err(Error::Dimension(format!(
                "discriminator expects [B,{},{},{}], got {:?}",
                self.channels, self.image_size, self.image_size, shape
            )));
        }
        let batch = shape[0];
        let h = self.trunk.apply(graph, x)?;
        let s = self.image_size / 8;
        let flat = graph.reshape(h, vec![batch, self.inner_width * s * s])?;
        self.head.apply(graph, flat)
    }
}

// ---- whole discriminator -------------------------------------------------------

pub struct DiscModel<T: Scalar> {
    pub encoder: DiscEncoder<T>,
    pub decoder: ImageDecoder<T>,
}

impl<T: Scalar> DiscModel<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        DiscModel { encoder: DiscEncoder::new(rng, cfg), decoder: ImageDecoder::new(rng, cfg) }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.encoder.visit(PREFIX_DISC_ENCODER, f);
        self.decoder.visit(PREFIX_DISC_DECODER, f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.encoder.visit_mut(PREFIX_DISC_ENCODER, f);
        self.decoder.visit_mut(PREFIX_DISC_DECODER, f);
    }

    /// Auto-encodes a batch outside any training step (inference path).
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let mut reg = ParamBindings::new();
        let bound = BoundDisc::bind(self, &mut graph, &mut reg);
        let xid = graph.constant(x.clone());
        let (_, recon) = bound.auto_encode(&mut graph, xid)?;
        Ok(graph.value(recon).clone().with_requires_grad(false))
    }
}

pub struct BoundDisc {
    pub encoder: BoundDiscEncoder,
    pub decoder: BoundImageDecoder,
}

impl BoundDisc {
    pub fn bind<T: Scalar>(model: &DiscModel<T>, graph: &mut Graph<T>, reg: &mut ParamBindings) -> Self {
        BoundDisc {
            encoder: model.encoder.bind(graph, reg, PREFIX_DISC_ENCODER),
            decoder: model.decoder.bind(graph, reg, PREFIX_DISC_DECODER),
        }
    }

    /// Encode → decode one batch.
    pub fn auto_encode<T: Scalar>(&self, graph: &mut Graph<T>, x: VarId) -> Result<(VarId, VarId)> {
        let z = self.encoder.encode(graph, x)?;
        let recon = self.decoder.decode(graph, z)?;
        Ok((z, recon))
    }

    /// One full pass over real images, decoded prior samples and VAE
    /// reconstructions, returning the three energies.
    ///
    /// By default each energy compares an input with its own reconstruction.
    /// With `literal_fake_energy` the prior-sample energy instead compares
    /// the *real* batch against the fake's reconstruction.
    pub fn energies<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        x: VarId,
        x_fake_prior: VarId,
        x_fake_vae: VarId,
        literal_fake_energy: bool,
    ) -> Result<(Energies, DiscPass)> {
        let shape = graph.shape(x).to_vec();
        for other in [x_fake_prior, x_fake_vae] {
            if graph.shape(other) != shape {
                return Err(Error::Dimension(format!(
                    "discriminator inputs disagree: {:?} vs {:?}",
                    shape,
                    graph.shape(other)
                )));
            }
        }
        let (z_real, recon_real) = self.auto_encode(graph, x)?;
        let (z_fake_prior, recon_fake_prior) = self.auto_encode(graph, x_fake_prior)?;
        let (z_fake_vae, recon_fake_vae) = self.auto_encode(graph, x_fake_vae)?;

        let real = graph.l1_mean(x, recon_real)?;
        let fake_prior = if literal_fake_energy {
            graph.l1_mean(x, recon_fake_prior)?
        } else {
            graph.l1_mean(x_fake_prior, recon_fake_prior)?
        };
        let fake_vae = graph.l1_mean(x_fake_vae, recon_fake_vae)?;

        Ok((
            Energies { real, fake_prior, fake_vae },
            DiscPass { z_real, z_fake_prior, z_fake_vae, recon_real, recon_fake_prior, recon_fake_vae },
        ))
    }
}

/// Mean over the batch of the per-row ℓ1 distance divided by the latent
/// width — identical reduction to the image energies, so the loss scales
/// match.
pub fn latent_similarity<T: Scalar>(graph: &mut Graph<T>, a: VarId, b: VarId) -> Result<VarId> {
    let (sa, sb) = (graph.shape(a), graph.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::Dimension(format!(
            "latent similarity expects matching [B,N] tensors, got {sa:?} vs {sb:?}"
        )));
    }
    graph.l1_mean(a, b)
}
