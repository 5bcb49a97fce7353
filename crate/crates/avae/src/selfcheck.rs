//! Self-contained verification that reverse-mode gradients match central
//! finite differences: one focused check per differentiable operation, then
//! each composite training loss on a tiny double-precision network. The CLI
//! exposes the suite as `grad-check`; the acceptance tests run it directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, ModelConfig};
use crate::discriminator::{
    BoundDisc, DiscModel, PREFIX_DISC_DECODER, PREFIX_DISC_ENCODER, latent_similarity,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::gradcheck::{grad_check, probe};
use crate::tensor::{Graph, Tensor, VarId};
use crate::train::composite_nodes;
use crate::vae::{PREFIX_DECODER, PREFIX_ENCODER, VaeModel, data_loss, kl_loss, reparametrize, sample_prior};

/// Every reported relative error must stay under this bound.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Central-difference step for the small per-op checks.
const FD_STEP: f64 = 1e-5;

/// A finite-difference probe must not sit closer than this to any ELU, L1 or
/// clamp kink, or the two-sided difference could straddle it.
const MARGIN_FLOOR: f64 = 1e-3;

/// The composite graphs evaluate tens of thousands of kinked activations, so
/// the closest approach to a kink is far smaller than in the per-op cases.
/// A finer step keeps the probe on one side; f64 roundoff at this step is
/// still ~1e-10 on the difference quotient, orders below the tolerance.
const COMPOSITE_FD_STEP: f64 = 1e-6;
const COMPOSITE_MARGIN_FLOOR: f64 = 1e-4;

/// One named comparison between reverse-mode and finite differences.
pub struct CheckOutcome {
    pub name: &'static str,
    pub rel_err: f64,
}

/// Results for the whole suite.
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.rel_err < self.tolerance)
    }

    /// Plain-text block: one `name: error` line per check plus a verdict.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for check in &self.checks {
            out.push_str(&format!("{}: {:e}\n", check.name, check.rel_err));
        }
        out.push_str(&format!("max_rel_err: {:e}\n", self.max_rel_err()));
        out.push_str(&format!("tolerance: {:e}\n", self.tolerance));
        out.push_str(if self.passed() { "result: pass\n" } else { "result: fail\n" });
        out
    }
}

/// Deterministic values in (−1, 1) for building fixed test tensors.
fn unit_stream(mut state: u64) -> impl FnMut() -> f64 {
    move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        2.0 * ((state >> 33) as f64 / f64::from(1u32 << 31)) - 1.0
    }
}

fn tensor_from(shape: Vec<usize>, next: &mut dyn FnMut() -> f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| next()).collect()).expect("nonzero dims")
}

/// Runs one per-op check: verify the probe sits clear of every kink, then
/// compare gradients.
fn run_case<F>(name: &'static str, build: F, params: &[Tensor<f64>]) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<f64>, &[VarId]) -> Result<VarId>,
{
    let (_, margin) = probe(&build, params)?;
    if margin < MARGIN_FLOOR {
        return Err(Error::Numeric(format!(
            "check '{name}' sits {margin:e} from a kink; the finite-difference \
             step needs at least {MARGIN_FLOOR:e}"
        )));
    }
    let rel_err = grad_check(&build, params, FD_STEP)?;
    Ok(CheckOutcome { name, rel_err })
}

/// Scalarizes a non-scalar op output against a constant far below its range,
/// keeping the L1 kink out of reach.
fn far_target(graph: &mut Graph<f64>, like: VarId) -> VarId {
    let shape = graph.shape(like).to_vec();
    graph.constant(Tensor::filled(shape, -5.0))
}

fn per_op_checks() -> Result<Vec<CheckOutcome>> {
    let mut checks = Vec::new();
    let mut s = unit_stream(0x5DEE_CE66_D1CE_5EED);

    let a23 = tensor_from(vec![2, 3], &mut s);
    let b23 = tensor_from(vec![2, 3], &mut s);
    checks.push(run_case(
        "add",
        |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[a23.clone(), b23.clone()],
    )?);
    checks.push(run_case(
        "sub",
        |g, ids| {
            let y = g.sub(ids[0], ids[1])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[a23.clone(), b23.clone()],
    )?);
    checks.push(run_case(
        "mul",
        |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[a23.clone(), b23.clone()],
    )?);
    checks.push(run_case(
        "scale",
        |g, ids| {
            let y = g.scale(ids[0], 1.7)?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        std::slice::from_ref(&a23),
    )?);
    checks.push(run_case(
        "exp",
        |g, ids| {
            let y = g.exp(ids[0])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        std::slice::from_ref(&a23),
    )?);
    checks.push(run_case(
        "sigmoid",
        |g, ids| {
            let y = g.sigmoid(ids[0])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        std::slice::from_ref(&a23),
    )?);

    // ELU inputs pushed off the origin so both branches appear with margin.
    let elu_in = {
        let mut raw = tensor_from(vec![2, 4], &mut s);
        for v in raw.data_mut() {
            *v += if *v < 0.0 { -0.5 } else { 0.5 };
        }
        raw
    };
    checks.push(run_case(
        "elu",
        |g, ids| {
            let y = g.elu(ids[0])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[elu_in],
    )?);

    // Clamp bounds at ±0.75; inputs cycle through both saturated sides and
    // the interior, none within 0.4 of a bound.
    let clamp_in = Tensor::new(vec![8], vec![-1.4, -0.35, 0.3, 1.25, -1.2, 0.1, -0.2, 1.4])?;
    checks.push(run_case(
        "clamp",
        |g, ids| {
            let y = g.clamp(ids[0], -0.75, 0.75)?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[clamp_in],
    )?);

    let a26 = tensor_from(vec![2, 6], &mut s);
    checks.push(run_case(
        "reshape",
        |g, ids| {
            let y = g.reshape(ids[0], vec![3, 4])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[a26],
    )?);

    let img = tensor_from(vec![1, 2, 4, 4], &mut s);
    let kernel = tensor_from(vec![3, 2, 3, 3], &mut s);
    checks.push(run_case(
        "conv2d",
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 1, 1)?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[img.clone(), kernel],
    )?);
    let kernel2 = tensor_from(vec![2, 2, 3, 3], &mut s);
    checks.push(run_case(
        "conv2d_strided",
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 2, 1)?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[img.clone(), kernel2],
    )?);

    let feat = tensor_from(vec![2, 3, 2, 2], &mut s);
    let bias3 = tensor_from(vec![3], &mut s);
    checks.push(run_case(
        "channel_bias",
        |g, ids| {
            let y = g.channel_bias(ids[0], ids[1])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[feat, bias3],
    )?);

    let rows = tensor_from(vec![2, 3], &mut s);
    let weight = tensor_from(vec![3, 4], &mut s);
    let bias4 = tensor_from(vec![4], &mut s);
    checks.push(run_case(
        "linear",
        |g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[rows, weight, bias4],
    )?);

    checks.push(run_case(
        "downsample2",
        |g, ids| {
            let y = g.downsample2(ids[0])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        std::slice::from_ref(&img),
    )?);
    let small = tensor_from(vec![1, 2, 2, 2], &mut s);
    checks.push(run_case(
        "upsample2",
        |g, ids| {
            let y = g.upsample2(ids[0])?;
            let t = far_target(g, y);
            g.l1_mean(y, t)
        },
        &[small],
    )?);

    // L1 operands separated by at least 0.4 everywhere.
    let l1_a = tensor_from(vec![2, 3], &mut s);
    let l1_b = {
        let mut shifted = l1_a.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            *v += if i % 2 == 0 { 0.8 } else { -0.6 };
        }
        shifted
    };
    checks.push(run_case(
        "l1_mean",
        |g, ids| g.l1_mean(ids[0], ids[1]),
        &[l1_a, l1_b],
    )?);

    let mean = tensor_from(vec![2, 4], &mut s);
    let log_var = {
        let mut lv = tensor_from(vec![2, 4], &mut s);
        for v in lv.data_mut() {
            *v *= 0.8;
        }
        lv
    };
    checks.push(run_case(
        "gaussian_kl",
        |g, ids| g.gaussian_kl(ids[0], ids[1]),
        &[mean, log_var],
    )?);

    let logits = tensor_from(vec![3, 4], &mut s);
    checks.push(run_case(
        "softmax_cross_entropy",
        |g, ids| g.softmax_cross_entropy(ids[0], &[0, 2, 1]),
        &[logits],
    )?);

    Ok(checks)
}

/// Which parameter family a composite check differentiates.
#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Encoder,
    Generator,
    Discriminator,
}

/// Builds the full three-loss training graph on a tiny double-precision
/// network and checks the selected composite against finite differences.
/// Seeds are scanned until the probe clears every kink.
fn composite_check(name: &'static str, phase: Phase) -> Result<CheckOutcome> {
    let cfg = ModelConfig { image_size: 8, channels: 1, latent_dim: 4, widths: [2, 3, 4] };
    let loss_cfg = LossConfig::default();
    let gain = 0.5;

    for seed in 0..32u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let mut vae: VaeModel<f64> = VaeModel::new(&mut rng, &cfg);
        let mut disc: DiscModel<f64> = DiscModel::new(&mut rng, &cfg);
        // The production init (std 0.02) parks every ELU input almost on its
        // kink; rescale so the margin scan has room to succeed.
        vae.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = 0.3 * f64::standard_normal(&mut rng);
            }
        });
        disc.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = 0.3 * f64::standard_normal(&mut rng);
            }
        });

        let pixels = 2 * cfg.channels * cfg.image_size * cfg.image_size;
        let x = Tensor::new(
            vec![2, cfg.channels, cfg.image_size, cfg.image_size],
            (0..pixels).map(|_| rng.random_range(0.0..1.0)).collect(),
        )?;
        let eps = sample_prior::<f64, _>(&mut rng, 2, cfg.latent_dim);
        let z_prior = sample_prior::<f64, _>(&mut rng, 2, cfg.latent_dim);

        let mut params: Vec<Tensor<f64>> = Vec::new();
        match phase {
            Phase::Encoder => vae.encoder.visit(PREFIX_ENCODER, &mut |_, t| params.push(t.clone())),
            Phase::Generator => vae.decoder.visit(PREFIX_DECODER, &mut |_, t| params.push(t.clone())),
            Phase::Discriminator => {
                disc.encoder.visit(PREFIX_DISC_ENCODER, &mut |_, t| params.push(t.clone()));
                disc.decoder.visit(PREFIX_DISC_DECODER, &mut |_, t| params.push(t.clone()));
            }
        }

        let build = |g: &mut Graph<f64>, ids: &[VarId]| {
            let mut it = ids.iter().copied();
            let enc = if phase == Phase::Encoder {
                vae.encoder.bind_with(g, PREFIX_ENCODER, &mut |_, _, _| it.next().expect("leaf"))
            } else {
                vae.encoder.bind_with(g, PREFIX_ENCODER, &mut |g, _, t| g.constant(t.clone()))
            };
            let dec = if phase == Phase::Generator {
                vae.decoder.bind_with(g, PREFIX_DECODER, &mut |_, _, _| it.next().expect("leaf"))
            } else {
                vae.decoder.bind_with(g, PREFIX_DECODER, &mut |g, _, t| g.constant(t.clone()))
            };
            let bound_disc = if phase == Phase::Discriminator {
                let de = disc.encoder.bind_with(g, PREFIX_DISC_ENCODER, &mut |_, _, _| {
                    it.next().expect("leaf")
                });
                let dd = disc.decoder.bind_with(g, PREFIX_DISC_DECODER, &mut |_, _, _| {
                    it.next().expect("leaf")
                });
                BoundDisc { encoder: de, decoder: dd }
            } else {
                let de = disc
                    .encoder
                    .bind_with(g, PREFIX_DISC_ENCODER, &mut |g, _, t| g.constant(t.clone()));
                let dd = disc
                    .decoder
                    .bind_with(g, PREFIX_DISC_DECODER, &mut |g, _, t| g.constant(t.clone()));
                BoundDisc { encoder: de, decoder: dd }
            };

            let xid = g.constant(x.clone());
            let posterior = enc.encode(g, xid)?;
            let sample = reparametrize(g, &posterior, &eps)?;
            let recon_image = dec.decode(g, sample.z)?;
            let zp = g.constant(z_prior.clone());
            let generated = dec.decode(g, zp)?;
            let (energies, pass) = bound_disc.energies(g, xid, generated, recon_image, false)?;
            let sim = latent_similarity(g, pass.z_real, pass.z_fake_vae)?;
            let recon_term = data_loss(g, xid, recon_image)?;
            let kl_term = kl_loss(g, &posterior)?;
            let nodes = composite_nodes(g, recon_term, kl_term, &energies, sim, gain, &loss_cfg)?;
            Ok(match phase {
                Phase::Encoder => nodes.enc,
                Phase::Generator => nodes.gen,
                Phase::Discriminator => nodes.disc,
            })
        };

        let (_, margin) = probe(&build, &params)?;
        if margin < COMPOSITE_MARGIN_FLOOR {
            continue;
        }
        let rel_err = grad_check(&build, &params, COMPOSITE_FD_STEP)?;
        return Ok(CheckOutcome { name, rel_err });
    }
    Err(Error::Numeric(format!("no seed produced a kink-safe configuration for '{name}'")))
}

/// Runs the whole gradient suite: every differentiable operation, then the
/// three composite training losses.
pub fn reference_suite() -> Result<SuiteReport> {
    let mut checks = per_op_checks()?;
    checks.push(composite_check("encoder_composite", Phase::Encoder)?);
    checks.push(composite_check("generator_composite", Phase::Generator)?);
    checks.push(composite_check("discriminator_composite", Phase::Discriminator)?);
    Ok(SuiteReport { checks, tolerance: GRAD_TOLERANCE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_suite_passes_everywhere() {
        let report = reference_suite().unwrap();
        assert!(report.checks.len() >= 20, "only {} checks ran", report.checks.len());
        for check in &report.checks {
            assert!(
                check.rel_err < GRAD_TOLERANCE,
                "{} at {:e}",
                check.name,
                check.rel_err
            );
        }
        assert!(report.passed());

        let mut names: Vec<&str> = report.checks.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), report.checks.len(), "check names must be unique");
    }

    #[test]
    fn report_text_carries_verdict_and_every_line() {
        let report = SuiteReport {
            checks: vec![
                CheckOutcome { name: "alpha", rel_err: 1e-7 },
                CheckOutcome { name: "beta", rel_err: 2e-5 },
            ],
            tolerance: GRAD_TOLERANCE,
        };
        let text = report.to_text();
        assert!(text.contains("alpha: 1e-7\n"));
        assert!(text.contains("beta: 2e-5\n"));
        assert!(text.contains("max_rel_err: 2e-5\n"));
        assert!(text.ends_with("result: pass\n"));

        let failing = SuiteReport {
            checks: vec![CheckOutcome { name: "gamma", rel_err: 5e-3 }],
            tolerance: GRAD_TOLERANCE,
        };
        assert!(!failing.passed());
        assert!(failing.to_text().ends_with("result: fail\n"));
    }
}
