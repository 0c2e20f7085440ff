//! Stochastic per-covariate gates.
//!
//! A gate relaxes the binary inclusion decision for covariate `j` into the
//! smooth variable `a_j = 1 / (1 + exp((logit(u_j) - w_j) / tau))` with
//! `u_j` uniform on (0, 1). As `tau -> 0` the gate sharpens to the indicator
//! `1{logit(u_j) < w_j}`, which is Bernoulli with success probability
//! `sigmoid(w_j)`; since `logit(U)` is standard logistic (the difference of
//! two independent Gumbel draws), this is the usual Gumbel-style relaxation.
//! The gradient in `w` is the pathwise derivative `a (1 - a) / tau`.

use crate::error::{Error, Result};
use rand::distributions::Open01;
use rand::Rng;

/// Logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

/// Gate logits and the current relaxation temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    pub logits: Vec<f64>,
    pub tau: f64,
}

impl GateState {
    pub fn new(logits: Vec<f64>, tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::invalid("gate temperature must be positive"));
        }
        if logits.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("gate logits must be finite"));
        }
        Ok(GateState { logits, tau })
    }

    /// All-zero logits (each gate open with probability one half).
    pub fn zeros(dim: usize, tau: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], tau)
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    /// Inclusion probabilities `sigmoid(w_j)`.
    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&w| sigmoid(w)).collect()
    }
}

/// Evaluate one gate coordinate.
#[inline]
pub fn gate_value(u: f64, w: f64, tau: f64) -> f64 {
    sigmoid((w - logit(u)) / tau)
}

/// Gate values for a vector of uniforms in the open interval (0, 1).
pub fn gate_sample(state: &GateState, uniforms: &[f64]) -> Result<Vec<f64>> {
    if uniforms.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            context: "gate sample",
            expected: state.dim(),
            found: uniforms.len(),
        });
    }
    if uniforms.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
        return Err(Error::invalid("gate uniforms must lie strictly in (0, 1)"));
    }
    Ok(uniforms
        .iter()
        .zip(&state.logits)
        .map(|(&u, &w)| gate_value(u, w, state.tau))
        .collect())
}

/// Pathwise derivatives `da_j/dw_j = a_j (1 - a_j) / tau` (cross-terms are
/// zero, so only the diagonal is returned).
pub fn gate_grad(state: &GateState, uniforms: &[f64]) -> Result<Vec<f64>> {
    let a = gate_sample(state, uniforms)?;
    Ok(a.iter().map(|&aj| aj * (1.0 - aj) / state.tau).collect())
}

/// Draw fresh uniforms for every gate from the open interval (0, 1).
pub fn draw_uniforms(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(Open01)).collect()
}

/// Geometric temperature schedule from `tau0` down to `tau_final` over
/// `total_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub tau_final: f64,
    pub total_steps: u64,
}

impl AnnealSchedule {
    pub fn new(tau0: f64, tau_final: f64, total_steps: u64) -> Result<Self> {
        if !tau_final.is_finite() || tau_final <= 0.0 || tau0 < tau_final {
            return Err(Error::invalid("schedule requires tau0 >= tau_final > 0"));
        }
        if total_steps == 0 {
            return Err(Error::invalid("schedule requires at least one step"));
        }
        Ok(AnnealSchedule {
            tau0,
            tau_final,
            total_steps,
        })
    }

    /// `tau_t = tau0 * (tau_final / tau0)^(t / T)`, clamped to `tau_final`
    /// for `t > T` so extra fine-tuning steps stay valid.
    pub fn tau_at(&self, t: u64) -> f64 {
        if t >= self.total_steps {
            return self.tau_final;
        }
        let frac = t as f64 / self.total_steps as f64;
        self.tau0 * (self.tau_final / self.tau0).powf(frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_critical, ks_statistic};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_at_the_median_is_one_half() {
        for &tau in &[0.01, 0.5, 3.0] {
            let s = GateState::new(vec![0.0], tau).unwrap();
            assert_abs_diff_eq!(gate_sample(&s, &[0.5]).unwrap()[0], 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn cold_gate_with_positive_logit_saturates() {
        let s = GateState::new(vec![5.0], 0.01).unwrap();
        assert!(gate_sample(&s, &[0.5]).unwrap()[0] > 1.0 - 1e-9);
    }

    #[test]
    fn unit_logit_uniform() {
        // u with logit(u) = 1, w = 0, tau = 1 gives 1 / (1 + e).
        let u = std::f64::consts::E / (1.0 + std::f64::consts::E);
        let s = GateState::new(vec![0.0], 1.0).unwrap();
        let a = gate_sample(&s, &[u]).unwrap()[0];
        assert_abs_diff_eq!(a, 1.0 / (1.0 + std::f64::consts::E), epsilon = 1e-12);
        assert_abs_diff_eq!(a, 0.268941, epsilon = 1e-6);
    }

    #[test]
    fn boundary_uniforms_are_rejected() {
        let s = GateState::new(vec![0.0], 1.0).unwrap();
        assert!(gate_sample(&s, &[0.0]).is_err());
        assert!(gate_sample(&s, &[1.0]).is_err());
    }

    #[test]
    fn grad_at_midpoint() {
        let s = GateState::new(vec![0.0], 1.0).unwrap();
        assert_abs_diff_eq!(gate_grad(&s, &[0.5]).unwrap()[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w = rng.gen_range(-2.0..2.0);
            let u: f64 = rng.gen_range(0.05..0.95);
            let tau = rng.gen_range(0.05..2.0);
            let s = GateState::new(vec![w], tau).unwrap();
            let an = gate_grad(&s, &[u]).unwrap()[0];
            let h = 1e-6;
            let sp = GateState::new(vec![w + h], tau).unwrap();
            let sm = GateState::new(vec![w - h], tau).unwrap();
            let fd = (gate_sample(&sp, &[u]).unwrap()[0] - gate_sample(&sm, &[u]).unwrap()[0])
                / (2.0 * h);
            let denom = fd.abs().max(an.abs()).max(1e-12);
            assert!((fd - an).abs() / denom < 1e-6, "fd={fd} an={an}");
        }
    }

    #[test]
    fn grad_vanishes_as_temperature_grows() {
        let s = GateState::new(vec![1.3], 1e6).unwrap();
        let g = gate_grad(&s, &[0.7]).unwrap()[0];
        assert!(g <= 0.25 / 1e6 && g >= 0.0);
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let s = AnnealSchedule::new(0.5, 0.005, 100).unwrap();
        assert_abs_diff_eq!(s.tau_at(0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.tau_at(100), 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(s.tau_at(50), 0.05, epsilon = 1e-12);
        // geometric midpoint = sqrt(tau0 * tauT)
        assert_abs_diff_eq!(s.tau_at(50), (0.5_f64 * 0.005).sqrt(), epsilon = 1e-12);
        assert_eq!(s.tau_at(250), 0.005);
    }

    #[test]
    fn probs_examples() {
        let s = GateState::new(vec![0.0, 50.0, -2.0], 1.0).unwrap();
        let p = s.probs();
        assert_eq!(p[0], 0.5);
        assert!(1.0 - p[1] < 1e-20);
        assert_abs_diff_eq!(p[2], 0.119203, epsilon = 1e-6);
    }

    #[test]
    fn monotone_in_logit_and_uniform() {
        let tau = 0.7;
        let u = 0.3;
        let mut prev = -1.0;
        for k in 0..20 {
            let w = -3.0 + 0.3 * k as f64;
            let v = gate_value(u, w, tau);
            assert!(v > prev, "not increasing in w");
            prev = v;
        }
        let w = 0.4;
        let mut prev = 2.0;
        for k in 1..20 {
            let u = k as f64 / 20.0;
            let v = gate_value(u, w, tau);
            assert!(v < prev, "not decreasing in u");
            prev = v;
        }
    }

    #[test]
    fn sharp_gates_approach_the_indicator() {
        let tau = 1e-3;
        for &w in &[-1.0, 0.0, 0.8] {
            let boundary = sigmoid(w);
            let mut total = 0.0;
            let mut count = 0usize;
            for k in 1..1000 {
                let u = k as f64 / 1000.0;
                if (u - boundary).abs() <= 1e-3 {
                    continue;
                }
                let ind = if logit(u) < w { 1.0 } else { 0.0 };
                total += (gate_value(u, w, tau) - ind).abs();
                count += 1;
            }
            assert!(total / (count as f64) < 0.01, "w={w}");
        }
    }

    /// The event {V > 1/2} is exactly {logit(U) < w}, so its probability is
    /// sigmoid(w) for every temperature.
    #[test]
    fn open_gate_event_has_sigmoid_probability()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = 0.9;
        for &tau in &[1e-3, 0.3, 5.0] {
            let mut hits = 0usize;
            let n = 60_000;
            for _ in 0..n {
                let u: f64 = rng.sample(Open01);
                let v = gate_value(u, w, tau);
                assert_eq!(v > 0.5, logit(u) < w);
                if v > 0.5 {
                    hits += 1;
                }
            }
            let p_hat = hits as f64 / n as f64;
            let p = sigmoid(w);
            assert!((p_hat - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
        }
    }

    proptest::proptest! {
        /// Strict monotonicity: increasing the logit opens the gate,
        /// increasing the uniform closes it, for any temperature.
        #[test]
        fn gate_is_monotone(
            u in 0.01f64..0.99,
            w in -5.0f64..5.0,
            tau in 0.01f64..10.0,
            dw in 1e-3f64..2.0,
            du in 1e-3f64..0.009,
        ) {
            proptest::prop_assert!(gate_value(u, w + dw, tau) > gate_value(u, w, tau));
            proptest::prop_assert!(gate_value(u + du, w, tau) < gate_value(u, w, tau));
        }
    }

    /// logit(U) has the standard logistic law, i.e. the law of the
    /// difference of two independent Gumbel(0, 1) draws.
    #[test]
    fn logit_uniform_matches_gumbel_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 100_000;
        let a: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.sample(Open01);
                logit(u)
            })
            .collect();
        let b: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.sample(Open01);
                let u2: f64 = rng.sample(Open01);
                let g1 = -(-u1.ln()).ln();
                let g2 = -(-u2.ln()).ln();
                g1 - g2
            })
            .collect();
        let d = ks_statistic(&a, &b);
        assert!(
            d < ks_critical(0.001, n, n),
            "KS statistic {d} exceeds the 0.001-level critical value"
        );
    }
}
