//! Feedback control of the generator/discriminator balance. The controller
//! tracks how far the fake-side losses sit from their target share of the
//! real reconstruction loss and adjusts the gain `k` that weights the
//! fake-side term in the discriminator objective. The update combines an
//! integral term with first- and second-difference corrections — a discrete
//! velocity-form PID.

use serde::{Deserialize, Serialize};

use crate::config::{ControllerConfig, LossConfig};
use crate::error::{Error, Result};

/// The mutable controller variables persisted across checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSnapshot {
    pub gain: f64,
    pub error_prev: f64,
    pub error_prev2: f64,
}

/// Cumulative means of the three discriminator energies, feeding the
/// diversity-ratio diagnostic and the optional adaptive diversity factor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningMeans {
    pub real: f64,
    pub fake_prior: f64,
    pub fake_vae: f64,
    pub count: u64,
}

impl RunningMeans {
    pub fn update(&mut self, real: f64, fake_prior: f64, fake_vae: f64) {
        self.count += 1;
        let w = 1.0 / self.count as f64;
        self.real += (real - self.real) * w;
        self.fake_prior += (fake_prior - self.fake_prior) * w;
        self.fake_vae += (fake_vae - self.fake_vae) * w;
    }
}

pub struct Controller {
    gain: f64,
    error_prev: f64,
    error_prev2: f64,
    lambda_integral: f64,
    lambda_proportional: f64,
    lambda_derivative: f64,
    eta: f64,
    alpha: f64,
    literal_error_sign: bool,
}

impl Controller {
    pub fn new(ctrl: &ControllerConfig, loss: &LossConfig) -> Self {
        Controller::with_parameters(
            ctrl.initial_gain,
            [ctrl.lambda_integral, ctrl.lambda_proportional, ctrl.lambda_derivative],
            loss.eta,
            loss.alpha,
            loss.literal_error_sign,
        )
    }

    pub fn with_parameters(
        initial_gain: f64,
        lambdas: [f64; 3],
        eta: f64,
        alpha: f64,
        literal_error_sign: bool,
    ) -> Self {
        Controller {
            gain: initial_gain.clamp(0.0, 1.0),
            error_prev: 0.0,
            error_prev2: 0.0,
            lambda_integral: lambdas[0],
            lambda_proportional: lambdas[1],
            lambda_derivative: lambdas[2],
            eta,
            alpha,
            literal_error_sign,
        }
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Replaces the diversity factor (used when it is re-estimated from
    /// running loss means instead of staying a constant).
    pub fn set_eta(&mut self, eta: f64) {
        self.eta = eta;
    }

    pub fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot { gain: self.gain, error_prev: self.error_prev, error_prev2: self.error_prev2 }
    }

    pub fn restore(&mut self, snap: ControllerSnapshot) {
        self.gain = snap.gain;
        self.error_prev = snap.error_prev;
        self.error_prev2 = snap.error_prev2;
    }

    /// How far the fake-side losses are below their target share of the real
    /// loss: `e_t = η·L_d − (L_g + α·L_v)`. Positive error means the fakes
    /// reconstruct too well and `k` should rise.
    pub fn error_signal(&self, real: f64, fake_prior: f64, fake_vae: f64) -> Result<f64> {
        if !(real.is_finite() && fake_prior.is_finite() && fake_vae.is_finite()) {
            return Err(Error::Numeric(format!(
                "controller received non-finite losses: L_d={real}, L_g={fake_prior}, L_v={fake_vae}"
            )));
        }
        let e = if self.literal_error_sign {
            self.eta * real - fake_prior + self.alpha * fake_vae
        } else {
            self.eta * real - (fake_prior + self.alpha * fake_vae)
        };
        Ok(e)
    }

    /// Velocity-form PID step:
    /// `k ← k + λ₁e_t + λ₂(e_t − e_{t−1}) + λ₃(e_t + e_{t−2} − 2e_{t−1})`,
    /// clamped to [0,1]. Returns the new gain.
    pub fn update_k(&mut self, e_t: f64) -> f64 {
        let delta = self.lambda_integral * e_t
            + self.lambda_proportional * (e_t - self.error_prev)
            + self.lambda_derivative * (e_t + self.error_prev2 - 2.0 * self.error_prev);
        self.gain = (self.gain + delta).clamp(0.0, 1.0);
        self.error_prev2 = self.error_prev;
        self.error_prev = e_t;
        self.gain
    }

    /// Diagnostic estimate of the diversity factor from running loss means:
    /// `(E[L_g] + α·E[L_v]) / E[L_d]`.
    pub fn diversity_ratio(&self, mean_fake_prior: f64, mean_fake_vae: f64, mean_real: f64) -> Result<f64> {
        if !(mean_fake_prior.is_finite() && mean_fake_vae.is_finite() && mean_real.is_finite()) {
            return Err(Error::Numeric("diversity ratio received non-finite loss means".into()));
        }
        if mean_real <= 0.0 {
            return Err(Error::Numeric(format!(
                "diversity ratio needs a positive real-loss mean, got {mean_real}"
            )));
        }
        Ok((mean_fake_prior + self.alpha * mean_fake_vae) / mean_real)
    }

    /// Equilibrium distance `M = L_d + |η·L_d − L_g − α·L_v|`; small when the
    /// discriminator reconstructs real data well *and* the balance holds.
    pub fn convergence_measure(&self, real: f64, fake_prior: f64, fake_vae: f64) -> f64 {
        real + (self.eta * real - fake_prior - self.alpha * fake_vae).abs()
    }
}

// ---- synthetic plant -------------------------------------------------------

/// Outcome of a closed-loop run against the synthetic plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantOutcome {
    /// First step after which |e| stays below 1% of the initial error.
    pub settling_step: Option<usize>,
    /// Largest swing past the equilibrium (max of −e_t over the run).
    pub peak_overshoot: f64,
    /// Whether the gain stayed inside [0,1] the whole run.
    pub gain_in_bounds: bool,
}

/// Drives the controller against a first-order plant: the combined fake loss
/// relaxes toward a level that rises linearly with `k` (a larger fake-side
/// weight pushes the discriminator to inflate fake reconstruction error).
/// The real loss is held constant, so the equilibrium error is zero exactly
/// when the fake loss reaches `η·L_d`.
pub fn simulate_first_order_plant(lambdas: [f64; 3], steps: usize) -> PlantOutcome {
    const ETA: f64 = 0.5;
    const ALPHA: f64 = 0.3;
    const REAL_LOSS: f64 = 1.0;
    const PLANT_POLE: f64 = 0.04; // fraction of the gap closed per step
    const PLANT_SLOPE: f64 = 60.0; // steady-state fake loss per unit of k

    let mut ctrl = Controller::with_parameters(0.0, lambdas, ETA, ALPHA, false);
    let mut fake = 0.0f64;
    let mut errors = Vec::with_capacity(steps);
    let mut gain_in_bounds = true;
    for _ in 0..steps {
        let e = ctrl.error_signal(REAL_LOSS, fake, 0.0).expect("plant losses are finite");
        errors.push(e);
        let k = ctrl.update_k(e);
        gain_in_bounds &= (0.0..=1.0).contains(&k);
        fake += PLANT_POLE * (PLANT_SLOPE * k - fake);
    }

    let tolerance = 0.01 * errors[0].abs();
    let mut settling_step = None;
    for t in (0..steps).rev() {
        if errors[t].abs() >= tolerance {
            break;
        }
        settling_step = Some(t);
    }
    let peak_overshoot = errors.iter().fold(0.0f64, |m, &e| m.max(-e));
    PlantOutcome { settling_step, peak_overshoot, gain_in_bounds }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_controller() -> Controller {
        Controller::with_parameters(0.0, [1e-3, 1e-5, 1e-5], 0.5, 0.3, false)
    }

    #[test]
    fn error_signal_hand_value() {
        let c = default_controller();
        let e = c.error_signal(1.0, 0.2, 0.1).unwrap();
        assert!((e - 0.27).abs() < 1e-12, "e_t = {e}");
    }

    #[test]
    fn error_signal_vanishes_at_equilibrium() {
        let c = default_controller();
        assert_eq!(c.error_signal(1.0, 0.5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn error_signal_is_homogeneous() {
        let c = default_controller();
        let e1 = c.error_signal(0.75, 0.3, 0.125).unwrap();
        let e2 = c.error_signal(1.5, 0.6, 0.25).unwrap();
        assert_eq!(e2, 2.0 * e1);
    }

    #[test]
    fn literal_sign_flips_the_vae_term() {
        let lit = Controller::with_parameters(0.0, [1e-3, 1e-5, 1e-5], 0.5, 0.3, true);
        let e = lit.error_signal(1.0, 0.2, 0.1).unwrap();
        assert!((e - 0.33).abs() < 1e-12, "literal e_t = {e}");
    }

    #[test]
    fn error_signal_rejects_non_finite_losses() {
        let c = default_controller();
        for bad in [f64::NAN, f64::INFINITY] {
            assert!(matches!(c.error_signal(bad, 0.0, 0.0), Err(Error::Numeric(_))));
            assert!(matches!(c.error_signal(0.0, bad, 0.0), Err(Error::Numeric(_))));
            assert!(matches!(c.error_signal(0.0, 0.0, bad), Err(Error::Numeric(_))));
        }
    }

    #[test]
    fn update_k_hand_value() {
        let mut c = default_controller();
        let k = c.update_k(0.27);
        assert!((k - 2.754e-4).abs() < 1e-12, "k = {k}");
    }

    #[test]
    fn zero_error_history_leaves_gain_unchanged() {
        let mut c = Controller::with_parameters(0.42, [1e-3, 1e-5, 1e-5], 0.5, 0.3, false);
        assert_eq!(c.update_k(0.0), 0.42);
        assert_eq!(c.update_k(0.0), 0.42);
        assert_eq!(c.update_k(0.0), 0.42);
    }

    #[test]
    fn gain_clamps_at_both_ends() {
        let mut hi = Controller::with_parameters(1.0, [1e-3, 1e-5, 1e-5], 0.5, 0.3, false);
        assert_eq!(hi.update_k(1e9), 1.0);
        let mut lo = Controller::with_parameters(0.0, [1e-3, 1e-5, 1e-5], 0.5, 0.3, false);
        assert_eq!(lo.update_k(-1e9), 0.0);
    }

    #[test]
    fn zero_gains_freeze_k_under_any_errors() {
        let mut c = Controller::with_parameters(0.7, [0.0, 0.0, 0.0], 0.5, 0.3, false);
        for e in [0.5, -3.0, 100.0, -0.001, 42.0] {
            assert_eq!(c.update_k(e), 0.7);
        }
    }

    #[test]
    fn update_depends_only_on_gain_and_error_history() {
        let mut a = Controller::with_parameters(0.3, [1e-3, 1e-5, 1e-5], 0.5, 0.3, false);
        a.update_k(0.9);
        a.update_k(-0.2);
        let snap = a.snapshot();

        let mut b = default_controller();
        b.restore(snap);
        assert_eq!(a.update_k(0.11), b.update_k(0.11));
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn diversity_ratio_hand_values() {
        let c = default_controller();
        let r = c.diversity_ratio(0.2, 0.1, 0.5).unwrap();
        assert!((r - 0.46).abs() < 1e-12, "ratio {r}");
        assert_eq!(c.diversity_ratio(0.0, 0.0, 0.4).unwrap(), 0.0);
        // Combined fake mean equal to the real mean → exactly 1.
        assert_eq!(c.diversity_ratio(0.5, 0.0, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn diversity_ratio_rejects_a_zero_denominator() {
        let c = default_controller();
        assert!(matches!(c.diversity_ratio(0.2, 0.1, 0.0), Err(Error::Numeric(_))));
        assert!(matches!(c.diversity_ratio(0.2, 0.1, -1.0), Err(Error::Numeric(_))));
        assert!(matches!(c.diversity_ratio(f64::NAN, 0.1, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn convergence_measure_hand_values() {
        let c = default_controller();
        assert_eq!(c.convergence_measure(0.0, 0.0, 0.0), 0.0);
        let m = c.convergence_measure(1.0, 0.2, 0.1);
        assert!((m - 1.27).abs() < 1e-12, "M = {m}");
    }

    #[test]
    fn convergence_measure_dominates_the_real_loss() {
        let c = default_controller();
        let mut x = 0.37f64;
        for _ in 0..200 {
            // Cheap deterministic pseudo-random probe values.
            x = (x * 997.0 + 0.1234).fract();
            let (ld, lg, lv) = (x * 2.0, (x * 7.0).fract(), (x * 13.0).fract());
            assert!(c.convergence_measure(ld, lg, lv) >= ld);
        }
    }

    #[test]
    fn pid_settles_faster_than_integral_only_with_less_overshoot() {
        let steps = 4000;
        let pid = simulate_first_order_plant([0.1, 1e-3, 1e-3], steps);
        let integral = simulate_first_order_plant([0.1, 0.0, 0.0], steps);

        assert!(pid.gain_in_bounds);
        assert!(integral.gain_in_bounds);
        let (pid_t, int_t) = (
            pid.settling_step.expect("PID loop settles"),
            integral.settling_step.expect("integral-only loop settles"),
        );
        assert!(pid_t < int_t, "PID settles at {pid_t}, integral-only at {int_t}");
        assert!(
            pid.peak_overshoot < integral.peak_overshoot,
            "overshoot: PID {} vs integral-only {}",
            pid.peak_overshoot,
            integral.peak_overshoot
        );
        assert!(pid.peak_overshoot > 0.0, "the plant is tuned to ring, so overshoot is nonzero");
    }
}
