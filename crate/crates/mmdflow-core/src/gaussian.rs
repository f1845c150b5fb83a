//! Closed-form MMD quantities between isotropic Gaussians under the
//! normalized Gaussian kernel `k_a(x, y) = a^-d exp(-||x-y||^2 / (2 a^2))`,
//! the optimal-bandwidth formula, and a gradient flow on the Gaussian mean.
//!
//! These are the independent ground truth for the sample-based estimators:
//! every quantity here is checked against Monte Carlo and finite differences
//! in the test suite, and the estimators are checked against these.

use crate::error::{Error, Result};

/// Isotropic Gaussian `N(mu, sigma^2 Id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoGaussian {
    pub mean: Vec<f64>,
    pub sigma: f64,
}

impl IsoGaussian {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        if mean.is_empty() {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        Ok(IsoGaussian { mean, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_pos(alpha: f64, sigma: f64) -> Result<()> {
    if alpha <= 0.0 || sigma <= 0.0 {
        return Err(Error::Config(format!(
            "alpha and sigma must be positive, got alpha={alpha} sigma={sigma}"
        )));
    }
    Ok(())
}

/// Expected kernel value `E[k_a(X, Y)]` for `X ~ N(mu0, s^2 Id)`,
/// `Y ~ N(mu1, s^2 Id)`, via the full closed form:
///
/// `D = [a^2 s^2 (1/kap^2 + 1/a^2)]^{-d/2} exp[ ||m0^||^2/(2 kap^2)
///      + ||m1^||^2/(2 kap^2) - <m0^, m1^>/a^2 - ||mu0||^2/(2 s^2)
///      - ||mu1||^2/(2 s^2) ]`
///
/// with `kap = (1/s^2 + 1/a^2)^{-1/2}`,
/// `m0^ = (a^2 mu0 + kap^2 mu1) / (kap^2 + a^2)` and symmetrically `m1^`.
pub fn gaussian_cross_term(alpha: f64, sigma: f64, mu0: &[f64], mu1: &[f64]) -> Result<f64> {
    check_pos(alpha, sigma)?;
    if mu0.len() != mu1.len() || mu0.is_empty() {
        return Err(Error::Shape("means must share a positive dimension".into()));
    }
    let d = mu0.len() as f64;
    let a2 = alpha * alpha;
    let s2 = sigma * sigma;
    let kap2 = 1.0 / (1.0 / s2 + 1.0 / a2);

    let denom = kap2 + a2;
    let mut mu0_hat = vec![0.0; mu0.len()];
    let mut mu1_hat = vec![0.0; mu0.len()];
    for i in 0..mu0.len() {
        mu0_hat[i] = (a2 * mu0[i] + kap2 * mu1[i]) / denom;
        mu1_hat[i] = (a2 * mu1[i] + kap2 * mu0[i]) / denom;
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let dot: f64 = mu0_hat.iter().zip(&mu1_hat).map(|(a, b)| a * b).sum();

    let prefactor = (a2 * s2 * (1.0 / kap2 + 1.0 / a2)).powf(-d / 2.0);
    let exponent = sq(&mu0_hat) / (2.0 * kap2) + sq(&mu1_hat) / (2.0 * kap2)
        - dot / a2
        - sq(mu0) / (2.0 * s2)
        - sq(mu1) / (2.0 * s2);
    Ok(prefactor * exponent.exp())
}

/// Closed-form `MMD^2(N(0, s^2 Id), N(mu0, s^2 Id))` under `k_a`:
/// `2 (a^2 + 2 s^2)^{-d/2} (1 - exp[-||mu0||^2 / (2 (a^2 + 2 s^2))])`.
pub fn gaussian_mmd2(alpha: f64, sigma: f64, mu0: &[f64], d: usize) -> Result<f64> {
    check_pos(alpha, sigma)?;
    if d == 0 {
        return Err(Error::Config("dimension must be at least 1".into()));
    }
    let u = alpha * alpha + 2.0 * sigma * sigma;
    let m2: f64 = mu0.iter().map(|x| x * x).sum();
    Ok(2.0 * u.powf(-(d as f64) / 2.0) * (1.0 - (-m2 / (2.0 * u)).exp()))
}

/// Closed-form gradient of [`gaussian_mmd2`] in the mean:
/// `2 (a^2 + 2 s^2)^{-d/2 - 1} exp[-||mu0||^2 / (2 (a^2 + 2 s^2))] mu0`.
///
/// This is the true derivative of [`gaussian_mmd2`] (a positive multiple of
/// `mu0`: the discrepancy grows as the means separate), so the descent
/// update `mu <- mu - eta * grad` contracts the mean toward the target.
///
/// `alpha = 0` is admitted (the bandwidth formula returns it inside the
/// phase-transition region); the expression stays well defined.
pub fn gaussian_mmd2_grad_mu(alpha: f64, sigma: f64, mu0: &[f64], d: usize) -> Result<Vec<f64>> {
    if alpha < 0.0 || sigma <= 0.0 || d == 0 {
        return Err(Error::Config(format!(
            "need alpha >= 0, sigma > 0, d >= 1; got alpha={alpha} sigma={sigma} d={d}"
        )));
    }
    let u = alpha * alpha + 2.0 * sigma * sigma;
    let m2: f64 = mu0.iter().map(|x| x * x).sum();
    let coef = 2.0 * u.powf(-(d as f64) / 2.0 - 1.0) * (-m2 / (2.0 * u)).exp();
    Ok(mu0.iter().map(|x| coef * x).collect())
}

/// Bandwidth maximizing the displacement `|| grad_mu MMD^2_a ||`:
/// `a* = ReLU(||mu0||^2 / (d + 2) - 2 sigma^2)^{1/2}`.
///
/// Zero exactly when `||mu0||^2 <= 2 sigma^2 (d + 2)` (the phase transition).
pub fn optimal_bandwidth(mu_norm: f64, sigma: f64, d: usize) -> Result<f64> {
    if sigma < 0.0 || d == 0 || mu_norm < 0.0 {
        return Err(Error::Config(format!(
            "need mu_norm >= 0, sigma >= 0, d >= 1; got mu_norm={mu_norm} sigma={sigma} d={d}"
        )));
    }
    let inner = mu_norm * mu_norm / (d as f64 + 2.0) - 2.0 * sigma * sigma;
    Ok(inner.max(0.0).sqrt())
}

/// Bandwidth policy for the mean flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowMode {
    /// `alpha_t = optimal_bandwidth(||mu||, sigma, d)` at every step.
    Adaptive,
    /// Constant bandwidth.
    Fixed(f64),
}

/// Trajectory of the gradient flow on the Gaussian mean.
#[derive(Debug, Clone)]
pub struct MeanFlowTrajectory {
    /// `||mu||` before any step (index 0) and after each step.
    pub mu_norms: Vec<f64>,
    /// Bandwidth used at each step (one entry per step taken).
    pub alphas: Vec<f64>,
    /// True when `||mu||` exceeded the divergence guard and iteration stopped.
    pub diverged: bool,
}

const DIVERGENCE_GUARD: f64 = 1e6;

/// Iterate `mu <- mu - eta * grad_mu MMD^2_alpha(N(0, s^2), N(mu, s^2))`,
/// choosing `alpha` per step according to `mode`. Returns the `||mu||`
/// sequence (initial value plus one entry per step).
pub fn simulate_mean_flow(
    mu_init: &[f64],
    sigma: f64,
    eta: f64,
    steps: usize,
    mode: FlowMode,
) -> Result<MeanFlowTrajectory> {
    if steps < 1 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if eta <= 0.0 {
        return Err(Error::Config("eta must be positive".into()));
    }
    if sigma <= 0.0 || mu_init.is_empty() {
        return Err(Error::Config("need sigma > 0 and d >= 1".into()));
    }
    if let FlowMode::Fixed(a) = mode {
        if a < 0.0 {
            return Err(Error::Config("fixed bandwidth must be non-negative".into()));
        }
    }
    let d = mu_init.len();
    let mut mu = mu_init.to_vec();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut mu_norms = Vec::with_capacity(steps + 1);
    let mut alphas = Vec::with_capacity(steps);
    mu_norms.push(norm(&mu));
    let mut diverged = false;
    for _ in 0..steps {
        let alpha = match mode {
            FlowMode::Adaptive => optimal_bandwidth(norm(&mu), sigma, d)?,
            FlowMode::Fixed(a) => a,
        };
        let grad = gaussian_mmd2_grad_mu(alpha, sigma, &mu, d)?;
        for (m, g) in mu.iter_mut().zip(&grad) {
            *m -= eta * g;
        }
        let n = norm(&mu);
        alphas.push(alpha);
        mu_norms.push(n);
        if n > DIVERGENCE_GUARD {
            diverged = true;
            break;
        }
    }
    Ok(MeanFlowTrajectory {
        mu_norms,
        alphas,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_term_at_equal_means() {
        // D(a, s, mu, mu) = (a^2 + 2 s^2)^{-d/2}; d = 2, a = s = 1 -> 1/3
        let v = gaussian_cross_term(1.0, 1.0, &[0.7, -0.3], &[0.7, -0.3]).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_term_translation_invariant_self() {
        for mu in [vec![0.0], vec![2.5], vec![-7.0]] {
            let v = gaussian_cross_term(0.8, 1.3, &mu, &mu).unwrap();
            let v0 = gaussian_cross_term(0.8, 1.3, &[0.0], &[0.0]).unwrap();
            assert!((v - v0).abs() < 1e-12 * v0.abs());
        }
    }

    #[test]
    fn cross_term_hand_value_mu1_zero() {
        // d = 1, a = s = 1, ||mu0||^2 = 3: 3^{-1/2} e^{-3/6}
        let v = gaussian_cross_term(1.0, 1.0, &[3f64.sqrt()], &[0.0]).unwrap();
        let expect = 3f64.powf(-0.5) * (-0.5f64).exp();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.35021).abs() < 1e-4);
    }

    #[test]
    fn cross_term_rejects_bad_params() {
        assert!(gaussian_cross_term(0.0, 1.0, &[0.0], &[0.0]).is_err());
        assert!(gaussian_cross_term(1.0, -1.0, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn mmd2_zero_at_equal_means() {
        let v = gaussian_mmd2(1.0, 1.0, &[0.0, 0.0], 2).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn mmd2_hand_value() {
        // d = 1, a = s = 1, ||mu0||^2 = 3: (2 / sqrt(3)) (1 - e^{-1/2})
        let v = gaussian_mmd2(1.0, 1.0, &[3f64.sqrt()], 1).unwrap();
        let expect = 2.0 / 3f64.sqrt() * (1.0 - (-0.5f64).exp());
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.45436).abs() < 1e-4);
    }

    #[test]
    fn mmd2_saturates_at_large_separation() {
        let v = gaussian_mmd2(1.0, 1.0, &[1e6], 1).unwrap();
        let cap = 2.0 * 3f64.powf(-0.5);
        assert!((v - cap).abs() < 1e-12);
    }

    #[test]
    fn mmd2_three_term_assembly() {
        // MMD^2 = D(0,0) - 2 D(0, mu0) + D(mu0, mu0)
        for (alpha, sigma, mu) in [
            (1.0, 1.0, vec![1.5, -0.5]),
            (0.6, 2.0, vec![3.0]),
            (2.5, 0.4, vec![0.3, 0.3, 0.3]),
        ] {
            let d = mu.len();
            let zero = vec![0.0; d];
            let direct = gaussian_mmd2(alpha, sigma, &mu, d).unwrap();
            let assembled = gaussian_cross_term(alpha, sigma, &zero, &zero).unwrap()
                - 2.0 * gaussian_cross_term(alpha, sigma, &zero, &mu).unwrap()
                + gaussian_cross_term(alpha, sigma, &mu, &mu).unwrap();
            assert!(
                (direct - assembled).abs() <= 1e-12 * (1.0 + direct.abs()),
                "direct {direct} vs assembled {assembled}"
            );
        }
    }

    #[test]
    fn grad_mu_zero_at_origin() {
        let g = gaussian_mmd2_grad_mu(1.0, 1.0, &[0.0, 0.0], 2).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_mu_matches_finite_differences() {
        let h = 1e-6;
        for (alpha, sigma, mu) in [
            (1.0, 1.0, vec![1.5, -0.5]),
            (0.7, 1.8, vec![2.0, 1.0, -1.0]),
            (2.0, 0.5, vec![0.2]),
        ] {
            let d = mu.len();
            let g = gaussian_mmd2_grad_mu(alpha, sigma, &mu, d).unwrap();
            for i in 0..d {
                let mut up = mu.clone();
                up[i] += h;
                let mut down = mu.clone();
                down[i] -= h;
                let fd = (gaussian_mmd2(alpha, sigma, &up, d).unwrap()
                    - gaussian_mmd2(alpha, sigma, &down, d).unwrap())
                    / (2.0 * h);
                let denom = g[i].abs().max(fd.abs()).max(1e-12);
                assert!(
                    (g[i] - fd).abs() / denom < 1e-8,
                    "dim {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn grad_mu_descent_points_at_target() {
        let mu = vec![2.0, -1.0];
        let g = gaussian_mmd2_grad_mu(1.0, 1.0, &mu, 2).unwrap();
        // gradient is a positive multiple of mu, so the descent direction
        // -grad points toward the target at the origin
        let scale = g[0] / mu[0];
        assert!(scale > 0.0);
        assert!((g[1] - scale * mu[1]).abs() < 1e-14);
    }

    #[test]
    fn bandwidth_phase_transition() {
        // d = 1, sigma = 1: threshold at ||mu||^2 = 2 (1 + 2) = 6
        assert_eq!(optimal_bandwidth(3f64.sqrt(), 1.0, 1).unwrap(), 0.0);
        let a = optimal_bandwidth(3.0, 1.0, 1).unwrap();
        assert!((a - 1.0).abs() < 1e-12); // sqrt(9/3 - 2) = 1
        // boundary: exactly zero at the threshold
        assert_eq!(optimal_bandwidth(6f64.sqrt(), 1.0, 1).unwrap(), 0.0);
        assert!(optimal_bandwidth(6f64.sqrt() + 1e-6, 1.0, 1).unwrap() > 0.0);
    }

    #[test]
    fn mean_flow_fixed_point_at_origin() {
        let tr = simulate_mean_flow(&[0.0], 1.0, 0.5, 20, FlowMode::Adaptive).unwrap();
        assert!(tr.mu_norms.iter().all(|v| *v == 0.0));
        assert!(!tr.diverged);
    }

    #[test]
    fn adaptive_beats_fixed_bandwidth() {
        let mu = vec![15.0];
        let eta = 1.0;
        let steps = 5000;
        let target = 1.5; // 0.1 * ||mu_init||
        let first_below = |tr: &MeanFlowTrajectory| {
            tr.mu_norms
                .iter()
                .position(|v| *v < target)
                .unwrap_or(usize::MAX)
        };
        let adaptive = simulate_mean_flow(&mu, 1.0, eta, steps, FlowMode::Adaptive).unwrap();
        let fixed = simulate_mean_flow(&mu, 1.0, eta, steps, FlowMode::Fixed(1.0)).unwrap();
        assert!(first_below(&adaptive) < first_below(&fixed));
    }

    #[test]
    fn mean_flow_monotone_for_small_eta() {
        for mode in [FlowMode::Adaptive, FlowMode::Fixed(1.0)] {
            let tr = simulate_mean_flow(&[5.0, 1.0], 1.0, 0.3, 500, mode).unwrap();
            for w in tr.mu_norms.windows(2) {
                assert!(w[1] <= w[0] + 1e-15, "{} -> {}", w[0], w[1]);
            }
            assert!(!tr.diverged);
        }
    }
}
