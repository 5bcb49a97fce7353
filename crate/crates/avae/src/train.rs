//! The training loop. Each iteration binds every parameter into one fresh
//! computation graph, runs the whole forward pass (posterior encode, prior
//! draw, both decodes, discriminator auto-encoding of the real / generated /
//! reconstructed batches), then applies three gradient phases in order:
//!
//! 1. the VAE encoder descends `kl + β·latent_sim + γ·vae_recon`;
//! 2. the VAE decoder descends `fake + α·vae_energy + β·latent_sim + γ·vae_recon`;
//! 3. the discriminator descends `real − k·(fake + α·vae_energy)` with the
//!    generated and reconstructed images detached, so adversarial pressure
//!    never reaches generator parameters.
//!
//! Between phases 2 and 3 the equilibrium controller converts the measured
//! energies into the next gain `k`; the discriminator phase always uses the
//! gain that was current when its graph was built. Updates land on the
//! models' owned tensors, never on the live graph, so every value in an
//! iteration is computed from the parameters as they stood at its start.
//!
//! Determinism: all randomness is drawn from seeded counter-mode streams.
//! The top byte of the stream id tags the purpose — epoch shuffles use the
//! epoch index itself (small), per-iteration lanes use `1<<56 | iter`
//! (reparametrization noise) and `2<<56 | iter` (prior draws), the holdout
//! split uses `3<<56`, and parameter initialization uses `4<<56` — so a
//! resumed run replays the exact byte stream of an uninterrupted one.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{Config, LossConfig};
use crate::controller::{Controller, RunningMeans};
use crate::data::{self, Dataset};
use crate::discriminator::{latent_similarity, BoundDisc, DiscModel, Energies};
use crate::error::{Error, Result};
use crate::nn::ParamBindings;
use crate::scalar::Scalar;
use crate::tensor::{Adam, AdamSlot, Graph, Tensor, VarId};
use crate::vae::{
    data_loss, kl_loss, reparametrize, sample_prior, VaeModel, PREFIX_DECODER, PREFIX_ENCODER,
};

/// Stream lane for per-iteration reparametrization noise.
const STREAM_NOISE: u64 = 1 << 56;
/// Stream lane for per-iteration prior draws.
const STREAM_PRIOR: u64 = 2 << 56;
/// Stream lane for parameter initialization (epoch shuffles own the small
/// stream ids; the holdout split owns `3 << 56`).
const STREAM_INIT: u64 = 4 << 56;

/// Common stem of every discriminator parameter name.
const DISC_PREFIX: &str = "disc.";

/// Rolling checkpoint filename inside the run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.avae";
/// Metrics log filename inside the run directory.
pub const METRICS_FILE: &str = "metrics.csv";

/// Fixed header of the metrics log. Columns map to [`LossBundle`] fields:
/// `L_e` vae_recon, `L_n` kl, `L_d` real_energy, `L_g` fake_energy,
/// `L_v` vae_energy, `L_s` latent_sim, then the three composites, the
/// controller error and gain, and the convergence measure `M`.
pub const METRICS_HEADER: &str = "iter,L_e,L_n,L_d,L_g,L_v,L_s,L_dis,L_gen,L_enc,e_t,k_t,M";

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---- loss bookkeeping --------------------------------------------------------

/// The six per-term scalars measured by one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// Pixel reconstruction error of the VAE (`L_e`).
    pub vae_recon: f64,
    /// Posterior-to-prior divergence (`L_n`).
    pub kl: f64,
    /// Discriminator energy on real images (`L_d`).
    pub real_energy: f64,
    /// Discriminator energy on decoded prior samples (`L_g`).
    pub fake_energy: f64,
    /// Discriminator energy on VAE reconstructions (`L_v`).
    pub vae_energy: f64,
    /// Latent distance between real images and their reconstructions (`L_s`).
    pub latent_sim: f64,
}

/// Everything one training step produces, in metrics-log column order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub vae_recon: f64,
    pub kl: f64,
    pub real_energy: f64,
    pub fake_energy: f64,
    pub vae_energy: f64,
    pub latent_sim: f64,
    /// Discriminator phase loss (`L_dis`), built with the pre-step gain.
    pub disc_loss: f64,
    /// Decoder phase loss (`L_gen`).
    pub gen_loss: f64,
    /// Encoder phase loss (`L_enc`).
    pub enc_loss: f64,
    /// Controller error `e_t` for this step.
    pub error: f64,
    /// Gain `k_t` after this step's controller update.
    pub gain: f64,
    /// Convergence measure `M`.
    pub convergence: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [
            self.vae_recon,
            self.kl,
            self.real_energy,
            self.fake_energy,
            self.vae_energy,
            self.latent_sim,
            self.disc_loss,
            self.gen_loss,
            self.enc_loss,
            self.error,
            self.gain,
            self.convergence,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// One metrics-log row, matching [`METRICS_HEADER`] column for column.
    pub fn metrics_row(&self, iteration: u64) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            iteration,
            self.vae_recon,
            self.kl,
            self.real_energy,
            self.fake_energy,
            self.vae_energy,
            self.latent_sim,
            self.disc_loss,
            self.gen_loss,
            self.enc_loss,
            self.error,
            self.gain,
            self.convergence,
        )
    }
}

/// Combines the six measured terms into the three phase losses, using the
/// gain that was current *before* this step's controller update.
///
/// Returns `(disc, gen, enc)`:
/// `disc = real − k·(fake + α·vae_energy)`,
/// `gen  = fake + α·vae_energy + β·latent_sim + γ·vae_recon`,
/// `enc  = kl + β·latent_sim + γ·vae_recon`.
pub fn composite_losses(terms: &LossTerms, gain_prev: f64, loss: &LossConfig) -> (f64, f64, f64) {
    let fake_side = terms.fake_energy + loss.alpha * terms.vae_energy;
    let disc = terms.real_energy - gain_prev * fake_side;
    let gen = fake_side + loss.beta * terms.latent_sim + loss.gamma * terms.vae_recon;
    let enc = terms.kl + loss.beta * terms.latent_sim + loss.gamma * terms.vae_recon;
    (disc, gen, enc)
}

/// Graph handles of the three phase losses.
pub struct CompositeNodes {
    pub disc: VarId,
    pub gen: VarId,
    pub enc: VarId,
}

/// Builds the three phase losses as graph nodes over the per-term nodes,
/// mirroring [`composite_losses`] operation for operation so the scalar and
/// graph paths agree bitwise.
pub fn composite_nodes<T: Scalar>(
    graph: &mut Graph<T>,
    vae_recon: VarId,
    kl: VarId,
    energies: &Energies,
    latent_sim: VarId,
    gain_prev: f64,
    loss: &LossConfig,
) -> Result<CompositeNodes> {
    let weighted_vae_energy = graph.scale(energies.fake_vae, T::from_f64(loss.alpha))?;
    let fake_side = graph.add(energies.fake_prior, weighted_vae_energy)?;
    let weighted_sim = graph.scale(latent_sim, T::from_f64(loss.beta))?;
    let weighted_recon = graph.scale(vae_recon, T::from_f64(loss.gamma))?;

    let pressure = graph.scale(fake_side, T::from_f64(gain_prev))?;
    let disc = graph.sub(energies.real, pressure)?;

    let gen_partial = graph.add(fake_side, weighted_sim)?;
    let gen = graph.add(gen_partial, weighted_recon)?;

    let enc_partial = graph.add(kl, weighted_sim)?;
    let enc = graph.add(enc_partial, weighted_recon)?;

    Ok(CompositeNodes { disc, gen, enc })
}

// ---- gradient routing ----------------------------------------------------------

/// Callback that receives every named parameter tensor of one model family.
pub(crate) type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Tensor<T>) + 'a;

/// Copies the gradients accumulated on the graph leaves whose names start
/// with `prefix` back to the owning tensors (reached through `visit_owner`)
/// and applies one optimizer step to each.
pub(crate) fn apply_phase<T: Scalar>(
    optimizer: &mut Adam<T>,
    graph: &Graph<T>,
    bindings: &ParamBindings,
    prefix: &str,
    visit_owner: &mut dyn FnMut(&mut ParamVisitor<T>),
) -> Result<()> {
    let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for (name, id) in bindings.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let g = graph
            .grad(*id)
            .ok_or_else(|| Error::Numeric(format!("no gradient reached parameter '{name}'")))?;
        grads.insert(name.clone(), g.to_vec());
    }
    if grads.is_empty() {
        return Err(Error::Usage(format!("no parameters bound under prefix '{prefix}'")));
    }
    let mut outcome: Result<()> = Ok(());
    visit_owner(&mut |name, tensor| {
        if outcome.is_err() {
            return;
        }
        let Some(g) = grads.remove(name) else { return };
        outcome = tensor.set_grad(g).and_then(|()| optimizer.step(name, tensor));
    });
    outcome?;
    if let Some(name) = grads.keys().next() {
        return Err(Error::Usage(format!(
            "gradient for '{name}' found no matching parameter tensor"
        )));
    }
    Ok(())
}

// ---- trainer -------------------------------------------------------------------

/// Owns both models, the optimizer, and the controller, and advances them
/// one batch at a time. All persistent state round-trips through
/// [`Trainer::save_checkpoint`] / [`Trainer::from_checkpoint`].
pub struct Trainer {
    pub vae: VaeModel<f32>,
    pub disc: DiscModel<f32>,
    pub controller: Controller,
    pub running: RunningMeans,
    optimizer: Adam<f32>,
    config: Config,
    iteration: u64,
    /// Attribute-vector bookkeeping carried through re-saves untouched.
    attribute_counts: BTreeMap<String, [u64; 2]>,
    /// Non-parameter tensors (stored attribute vectors) carried verbatim.
    extra_tensors: BTreeMap<String, Tensor<f32>>,
}

impl Trainer {
    /// Fresh models drawn from the seed's initialization lane.
    pub fn new(config: Config) -> Result<Trainer> {
        config.validate()?;
        let mut rng = stream_rng(config.train.seed, STREAM_INIT);
        let vae = VaeModel::new(&mut rng, &config.model);
        let disc = DiscModel::new(&mut rng, &config.model);
        let controller = Controller::new(&config.controller, &config.loss);
        let optimizer = Adam::new(config.train.learning_rate as f32);
        Ok(Trainer {
            vae,
            disc,
            controller,
            running: RunningMeans::default(),
            optimizer,
            config,
            iteration: 0,
            attribute_counts: BTreeMap::new(),
            extra_tensors: BTreeMap::new(),
        })
    }

    /// Restores state from a checkpoint while taking run settings (learning
    /// rate, iteration budget, loss weights …) from `config`. The model
    /// shape must match the one the checkpoint was written with.
    pub fn from_checkpoint(path: &Path, config: Config) -> Result<Trainer> {
        let (meta, tensors) = checkpoint::load_checkpoint(path)?;
        if meta.config.model != config.model {
            return Err(Error::Usage(format!(
                "checkpoint '{}' holds a {:?} model but the run asks for {:?}",
                path.display(),
                meta.config.model,
                config.model
            )));
        }
        Trainer::from_parts(meta, tensors, config)
    }

    /// Restores a checkpoint entirely under its own stored configuration.
    pub fn from_checkpoint_stored(path: &Path) -> Result<Trainer> {
        let (meta, tensors) = checkpoint::load_checkpoint(path)?;
        let config = meta.config.clone();
        Trainer::from_parts(meta, tensors, config)
    }

    fn from_parts(
        meta: CheckpointMeta,
        mut tensors: BTreeMap<String, Tensor<f32>>,
        config: Config,
    ) -> Result<Trainer> {
        let mut trainer = Trainer::new(config)?;

        fn install(
            tensors: &mut BTreeMap<String, Tensor<f32>>,
            visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor<f32>)),
        ) -> Result<()> {
            let mut broken: Option<Error> = None;
            visit(&mut |name, param| {
                if broken.is_some() {
                    return;
                }
                match tensors.remove(name) {
                    Some(saved) if saved.shape() == param.shape() => *param = saved,
                    Some(saved) => {
                        broken = Some(Error::Format(format!(
                            "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                            saved.shape(),
                            param.shape()
                        )))
                    }
                    None => {
                        broken =
                            Some(Error::Format(format!("checkpoint is missing parameter '{name}'")))
                    }
                }
            });
            broken.map_or(Ok(()), Err)
        }
        install(&mut tensors, |f| trainer.vae.visit_mut(f))?;
        install(&mut tensors, |f| trainer.disc.visit_mut(f))?;

        for (name, step) in &meta.adam_steps {
            let moment = |tag: &str, tensors: &mut BTreeMap<String, Tensor<f32>>| {
                tensors.remove(&format!("adam.{tag}.{name}")).ok_or_else(|| {
                    Error::Format(format!("checkpoint lacks adam.{tag} data for '{name}'"))
                })
            };
            let m1 = moment("m1", &mut tensors)?;
            let m2 = moment("m2", &mut tensors)?;
            trainer.optimizer.restore(
                name.clone(),
                AdamSlot {
                    step: *step,
                    first_moment: m1.into_data(),
                    second_moment: m2.into_data(),
                },
            );
        }

        let mut extra = BTreeMap::new();
        for (name, tensor) in tensors {
            if name.starts_with("attr.") {
                extra.insert(name, tensor);
            } else {
                return Err(Error::Format(format!(
                    "checkpoint holds unrecognized tensor '{name}'"
                )));
            }
        }

        trainer.controller.restore(meta.controller);
        trainer.running = meta.running;
        trainer.iteration = meta.iteration;
        trainer.attribute_counts = meta.attribute_counts;
        trainer.extra_tensors = extra;
        Ok(trainer)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn optimizer(&self) -> &Adam<f32> {
        &self.optimizer
    }

    /// Stores an attribute vector so the next checkpoint save carries it,
    /// replacing any previous vector of the same name.
    pub fn put_attribute(&mut self, attribute: &crate::latent::AttributeVector<f32>) {
        crate::latent::store_attribute(&mut self.extra_tensors, &mut self.attribute_counts, attribute);
    }

    /// Recovers a stored attribute vector by name.
    pub fn attribute(&self, name: &str) -> Result<crate::latent::AttributeVector<f32>> {
        crate::latent::load_attribute(&self.extra_tensors, &self.attribute_counts, name)
    }

    /// Names of the attribute vectors currently stored.
    pub fn attribute_names(&self) -> Vec<String> {
        self.attribute_counts.keys().cloned().collect()
    }

    /// Runs one full three-phase update on `batch` (shape `[B, C, S, S]`,
    /// pixels in [0,1]) and returns every scalar the step produced.
    /// A non-finite loss aborts before any parameter changes.
    pub fn train_step(&mut self, batch: &Tensor<f32>) -> Result<LossBundle> {
        let iter = self.iteration;
        let seed = self.config.train.seed;
        let loss_cfg = self.config.loss.clone();
        let gain_prev = self.controller.gain();

        // One graph per step: every parameter becomes a named leaf.
        let mut graph: Graph<f32> = Graph::new();
        let mut reg = ParamBindings::new();
        let enc = self.vae.encoder.bind(&mut graph, &mut reg, PREFIX_ENCODER);
        let dec = self.vae.decoder.bind(&mut graph, &mut reg, PREFIX_DECODER);
        let bound_disc = BoundDisc::bind(&self.disc, &mut graph, &mut reg);

        let x = graph.constant(batch.clone());
        let posterior = enc.encode(&mut graph, x)?;

        let rows = batch.dim(0);
        let latent_dim = self.config.model.latent_dim;
        let epsilon =
            sample_prior::<f32, _>(&mut stream_rng(seed, STREAM_NOISE | iter), rows, latent_dim);
        let sample = reparametrize(&mut graph, &posterior, &epsilon)?;
        let recon_image = dec.decode(&mut graph, sample.z)?;

        let prior =
            sample_prior::<f32, _>(&mut stream_rng(seed, STREAM_PRIOR | iter), rows, latent_dim);
        let z_prior = graph.constant(prior);
        let generated_image = dec.decode(&mut graph, z_prior)?;

        let (energies, pass) = bound_disc.energies(
            &mut graph,
            x,
            generated_image,
            recon_image,
            loss_cfg.literal_fake_energy,
        )?;
        let sim = latent_similarity(&mut graph, pass.z_real, pass.z_fake_vae)?;
        let recon_term = data_loss(&mut graph, x, recon_image)?;
        let kl_term = kl_loss(&mut graph, &posterior)?;
        let nodes =
            composite_nodes(&mut graph, recon_term, kl_term, &energies, sim, gain_prev, &loss_cfg)?;

        let terms = LossTerms {
            vae_recon: f64::from(graph.scalar(recon_term)),
            kl: f64::from(graph.scalar(kl_term)),
            real_energy: f64::from(graph.scalar(energies.real)),
            fake_energy: f64::from(graph.scalar(energies.fake_prior)),
            vae_energy: f64::from(graph.scalar(energies.fake_vae)),
            latent_sim: f64::from(graph.scalar(sim)),
        };
        let disc_loss = f64::from(graph.scalar(nodes.disc));
        let gen_loss = f64::from(graph.scalar(nodes.gen));
        let enc_loss = f64::from(graph.scalar(nodes.enc));
        if ![
            terms.vae_recon,
            terms.kl,
            terms.real_energy,
            terms.fake_energy,
            terms.vae_energy,
            terms.latent_sim,
            disc_loss,
            gen_loss,
            enc_loss,
        ]
        .iter()
        .all(|v| v.is_finite())
        {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {iter}: {terms:?}, \
                 disc={disc_loss}, gen={gen_loss}, enc={enc_loss}"
            )));
        }

        // Phase 1: VAE encoder.
        graph.backward(nodes.enc)?;
        {
            let Trainer { vae, optimizer, .. } = &mut *self;
            let prefix = format!("{PREFIX_ENCODER}.");
            apply_phase(optimizer, &graph, &reg, &prefix, &mut |f| vae.visit_mut(f))?;
        }
        graph.zero_grads();

        // Phase 2: VAE decoder (adversarial pressure flows *through* the
        // frozen discriminator activations but lands only on decoder leaves).
        graph.backward(nodes.gen)?;
        {
            let Trainer { vae, optimizer, .. } = &mut *self;
            let prefix = format!("{PREFIX_DECODER}.");
            apply_phase(optimizer, &graph, &reg, &prefix, &mut |f| vae.visit_mut(f))?;
        }
        graph.zero_grads();

        // Controller sees this step's measured energies before the
        // discriminator phase; the phase itself keeps the pre-step gain.
        self.running.update(terms.real_energy, terms.fake_energy, terms.vae_energy);
        if loss_cfg.adaptive_eta {
            if let Ok(eta) = self.controller.diversity_ratio(
                self.running.fake_prior,
                self.running.fake_vae,
                self.running.real,
            ) {
                if eta.is_finite() && eta > 0.0 {
                    self.controller.set_eta(eta);
                }
            }
        }
        let error =
            self.controller.error_signal(terms.real_energy, terms.fake_energy, terms.vae_energy)?;
        let gain = self.controller.update_k(error);
        let convergence = self
            .controller
            .convergence_measure(terms.real_energy, terms.fake_energy, terms.vae_energy);

        // Phase 3: discriminator, with both fake batches detached.
        graph.backward_stopping(nodes.disc, &[recon_image, generated_image])?;
        {
            let Trainer { disc, optimizer, .. } = &mut *self;
            apply_phase(optimizer, &graph, &reg, DISC_PREFIX, &mut |f| disc.visit_mut(f))?;
        }

        self.iteration = iter + 1;
        Ok(LossBundle {
            vae_recon: terms.vae_recon,
            kl: terms.kl,
            real_energy: terms.real_energy,
            fake_energy: terms.fake_energy,
            vae_energy: terms.vae_energy,
            latent_sim: terms.latent_sim,
            disc_loss,
            gen_loss,
            enc_loss,
            error,
            gain,
            convergence,
        })
    }

    /// Writes the full training state (parameters, optimizer moments,
    /// controller, carried attribute vectors) atomically to `path`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        self.vae.visit(&mut |name, t| {
            tensors.insert(name.to_string(), t.clone());
        });
        self.disc.visit(&mut |name, t| {
            tensors.insert(name.to_string(), t.clone());
        });
        let mut adam_steps = BTreeMap::new();
        for (name, slot) in self.optimizer.slots() {
            adam_steps.insert(name.to_string(), slot.step);
            tensors.insert(
                format!("adam.m1.{name}"),
                Tensor::new(vec![slot.first_moment.len()], slot.first_moment.clone())?,
            );
            tensors.insert(
                format!("adam.m2.{name}"),
                Tensor::new(vec![slot.second_moment.len()], slot.second_moment.clone())?,
            );
        }
        for (name, tensor) in &self.extra_tensors {
            tensors.insert(name.clone(), tensor.clone());
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            iteration: self.iteration,
            controller: self.controller.snapshot(),
            running: self.running,
            adam_steps,
            attribute_counts: self.attribute_counts.clone(),
        };
        checkpoint::save_checkpoint(path, &meta, &tensors)
    }
}

// ---- evaluation ---------------------------------------------------------------

/// Mean absolute reconstruction error over the given dataset rows, decoding
/// from the posterior mean (no sampling noise). Batched to bound memory; the
/// result is the element mean over all rows regardless of chunking.
pub fn holdout_recon_loss(
    vae: &VaeModel<f32>,
    dataset: &Dataset,
    indices: &[usize],
    batch: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Usage("held-out evaluation needs at least one image".into()));
    }
    let mut total_abs = 0.0f64;
    let mut total_elems = 0usize;
    for chunk in indices.chunks(batch.max(1)) {
        let x = dataset.batch(chunk)?;
        let recon = vae.reconstruct(&x)?;
        for (a, b) in x.data().iter().zip(recon.data()) {
            total_abs += f64::from((a - b).abs());
        }
        total_elems += x.numel();
    }
    Ok(total_abs / total_elems as f64)
}

// ---- metrics log ---------------------------------------------------------------

struct MetricsLog {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    /// Appends to an existing log or starts a new one with the header.
    fn open(path: &Path) -> Result<MetricsLog> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = MetricsLog { writer: BufWriter::new(file), path: path.to_path_buf() };
        if fresh {
            log.write_line(METRICS_HEADER)?;
        }
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.writer, "{line}")
            .and_then(|()| self.writer.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    fn record(&mut self, iteration: u64, bundle: &LossBundle) -> Result<()> {
        self.write_line(&bundle.metrics_row(iteration))
    }
}

// ---- the run -------------------------------------------------------------------

/// What a finished (or zero-length) run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub iterations_completed: u64,
    /// The last step's scalars; `None` when no step ran.
    pub final_bundle: Option<LossBundle>,
    /// Held-out reconstruction error before the first step (when a holdout
    /// split exists).
    pub initial_holdout_recon: Option<f64>,
    /// Held-out reconstruction error after the final step.
    pub final_holdout_recon: Option<f64>,
}

/// Trains for `config.train.iterations` *total* steps (a resumed run
/// continues counting from the checkpoint's iteration), writing a metrics
/// log and a rolling checkpoint into `out_dir`.
pub fn run_training(
    dataset: &Dataset,
    config: &Config,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.image_size() != config.model.image_size
        || dataset.channels() != config.model.channels
    {
        return Err(Error::Usage(format!(
            "dataset images are {}×{} with {} channel(s) but the model expects {}×{} with {}",
            dataset.image_size(),
            dataset.image_size(),
            dataset.channels(),
            config.model.image_size,
            config.model.image_size,
            config.model.channels,
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(path, config.clone())?,
        None => Trainer::new(config.clone())?,
    };

    let seed = config.train.seed;
    let batch = config.train.batch;
    let (train_idx, holdout_idx) = dataset.split_holdout(config.train.holdout_fraction, seed);
    if train_idx.len() < batch {
        return Err(Error::Usage(format!(
            "{} training images cannot fill a batch of {batch}",
            train_idx.len()
        )));
    }
    let batches_per_epoch = (train_idx.len() / batch) as u64;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = MetricsLog::open(&metrics_path)?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);

    let initial_holdout_recon = match holdout_idx.is_empty() {
        true => None,
        false => Some(holdout_recon_loss(&trainer.vae, dataset, &holdout_idx, batch)?),
    };

    let total = config.train.iterations as u64;
    let mut final_bundle = None;
    let mut epoch_cache: Option<(u64, Vec<usize>)> = None;
    let mut last_saved: Option<u64> = None;
    while trainer.iteration() < total {
        let iter = trainer.iteration();
        let epoch = iter / batches_per_epoch;
        let slot = (iter % batches_per_epoch) as usize;
        if !matches!(&epoch_cache, Some((e, _)) if *e == epoch) {
            epoch_cache = Some((epoch, data::shuffled_indices(seed, epoch, train_idx.len())));
        }
        let order = &epoch_cache.as_ref().expect("epoch order just computed").1;
        let rows: Vec<usize> =
            order[slot * batch..(slot + 1) * batch].iter().map(|&j| train_idx[j]).collect();
        let x = dataset.batch(&rows)?;

        let bundle = trainer.train_step(&x)?;
        let done = trainer.iteration();
        if done % config.train.metrics_interval as u64 == 0 {
            metrics.record(done, &bundle)?;
        }
        if done % config.train.checkpoint_interval as u64 == 0 {
            trainer.save_checkpoint(&checkpoint_path)?;
            last_saved = Some(done);
            let diversity = trainer
                .controller
                .diversity_ratio(
                    trainer.running.fake_prior,
                    trainer.running.fake_vae,
                    trainer.running.real,
                )
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|_| "n/a".into());
            eprintln!(
                "[train] {done}/{total} recon={:.4} kl={:.3} real={:.4} gain={:.4} \
                 converge={:.4} diversity={diversity}",
                bundle.vae_recon, bundle.kl, bundle.real_energy, bundle.gain, bundle.convergence,
            );
        }
        final_bundle = Some(bundle);
    }
    if last_saved != Some(trainer.iteration()) {
        trainer.save_checkpoint(&checkpoint_path)?;
    }

    let final_holdout_recon = match holdout_idx.is_empty() {
        true => None,
        false => Some(holdout_recon_loss(&trainer.vae, dataset, &holdout_idx, batch)?),
    };

    Ok(TrainOutcome {
        checkpoint_path,
        metrics_path,
        iterations_completed: trainer.iteration(),
        final_bundle,
        initial_holdout_recon,
        final_holdout_recon,
    })
}
