//! Base kernels, optional composition with a feature network, and input
//! gradients.

use crate::error::{Error, Result};
use crate::nn::{feature_grad_input, FeatureNet};
use crate::scalar::Scalar;

/// Kernel family on raw vectors.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BaseKernel {
    Linear,
    Rbf { sigma: f64 },
    RationalQuadratic { alpha: f64 },
    /// `alpha^-d * exp(-||x-y||^2 / (2 alpha^2))`.
    NormalizedGaussian { alpha: f64, dim: usize },
}

impl BaseKernel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BaseKernel::Linear => true,
            BaseKernel::Rbf { sigma } => sigma > 0.0,
            BaseKernel::RationalQuadratic { alpha } => alpha > 0.0,
            BaseKernel::NormalizedGaussian { alpha, dim } => alpha > 0.0 && dim >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid kernel parameters: {self:?}")))
        }
    }

    /// Kernel value, generic so kernels can run inside dual-number passes.
    pub fn eval_s<S: Scalar>(&self, x: &[S], y: &[S]) -> S {
        match *self {
            BaseKernel::Linear => dot_s(x, y),
            BaseKernel::Rbf { sigma } => {
                let s = sq_dist_s(x, y);
                (-s / S::from_f64(2.0 * sigma * sigma)).exp()
            }
            BaseKernel::RationalQuadratic { alpha } => {
                let s = sq_dist_s(x, y);
                (S::one() + s / S::from_f64(2.0 * alpha)).powf_const(-alpha)
            }
            BaseKernel::NormalizedGaussian { alpha, dim } => {
                let s = sq_dist_s(x, y);
                let norm = S::from_f64(alpha.powi(-(dim as i32)));
                norm * (-s / S::from_f64(2.0 * alpha * alpha)).exp()
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_s::<f64>(x, y)
    }

    /// Gradient in the second argument, generic for nested differentiation.
    pub fn grad_y_s<S: Scalar>(&self, x: &[S], y: &[S]) -> Vec<S> {
        match *self {
            BaseKernel::Linear => x.to_vec(),
            BaseKernel::Rbf { sigma } => {
                let k = self.eval_s(x, y);
                let inv = S::from_f64(1.0 / (sigma * sigma));
                x.iter()
                    .zip(y.iter())
                    .map(|(&xi, &yi)| k * (xi - yi) * inv)
                    .collect()
            }
            BaseKernel::RationalQuadratic { alpha } => {
                let s = sq_dist_s(x, y);
                let f = (S::one() + s / S::from_f64(2.0 * alpha)).powf_const(-alpha - 1.0);
                x.iter()
                    .zip(y.iter())
                    .map(|(&xi, &yi)| f * (xi - yi))
                    .collect()
            }
            BaseKernel::NormalizedGaussian { alpha, .. } => {
                let k = self.eval_s(x, y);
                let inv = S::from_f64(1.0 / (alpha * alpha));
                x.iter()
                    .zip(y.iter())
                    .map(|(&xi, &yi)| k * (xi - yi) * inv)
                    .collect()
            }
        }
    }

    pub fn grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad_y_s::<f64>(x, y)
    }
}

/// A base kernel, optionally composed with noise-conditional features
/// evaluated at a noise level bound at construction:
/// `k(x, y) = k_base(phi(x, t), phi(y, t))`.
#[derive(Clone)]
pub struct KernelSpec<'a> {
    pub base: BaseKernel,
    pub features: Option<(&'a FeatureNet, f64)>,
}

impl<'a> KernelSpec<'a> {
    pub fn plain(base: BaseKernel) -> Self {
        KernelSpec {
            base,
            features: None,
        }
    }

    pub fn composed(base: BaseKernel, net: &'a FeatureNet, t: f64) -> Self {
        KernelSpec {
            base,
            features: Some((net, t)),
        }
    }
}

fn dot_s<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = S::zero();
    for (a, b) in x.iter().zip(y.iter()) {
        acc = acc + *a * *b;
    }
    acc
}

fn sq_dist_s<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = S::zero();
    for (a, b) in x.iter().zip(y.iter()) {
        let d = *a - *b;
        acc = acc + d * d;
    }
    acc
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "kernel arguments have dims {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `k(x, y)` for a plain or composed kernel.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    spec.base.validate()?;
    match spec.features {
        None => Ok(spec.base.eval(x, y)),
        Some((net, t)) => {
            let fx = net.forward(x, t)?;
            let fy = net.forward(y, t)?;
            Ok(spec.base.eval(&fx, &fy))
        }
    }
}

/// `grad_y k(x, y)`; for composed kernels this is the feature-network
/// pullback of the base-kernel gradient.
pub fn kernel_grad_y(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_dims(x, y)?;
    spec.base.validate()?;
    let out = match spec.features {
        None => spec.base.grad_y(x, y),
        Some((net, t)) => {
            let fx = net.forward(x, t)?;
            let fy = net.forward(y, t)?;
            let cot = spec.base.grad_y(&fx, &fy);
            feature_grad_input(net, y, t, &cot)?
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite kernel gradient".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rbf_at_zero_distance() {
        let spec = KernelSpec::plain(BaseKernel::Rbf { sigma: 1.0 });
        let v = kernel_eval(&spec, &[0.3, 0.4], &[0.3, 0.4]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rbf_hand_value() {
        // sigma = sqrt(2), x = 0, y = 2 (1-D): exp(-4 / (2*2)) = e^-1
        let spec = KernelSpec::plain(BaseKernel::Rbf {
            sigma: 2f64.sqrt(),
        });
        let v = kernel_eval(&spec, &[0.0], &[2.0]).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-12);
        assert!((v - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn normalized_gaussian_at_zero_distance() {
        let spec = KernelSpec::plain(BaseKernel::NormalizedGaussian { alpha: 2.0, dim: 1 });
        let v = kernel_eval(&spec, &[1.0], &[1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_grad_is_first_argument() {
        let spec = KernelSpec::plain(BaseKernel::Linear);
        let g = kernel_grad_y(&spec, &[1.0, 2.0], &[-3.0, 0.5]).unwrap();
        assert_eq!(g, vec![1.0, 2.0]);
    }

    #[test]
    fn rbf_grad_hand_value() {
        // sigma = 1, 1-D, x = 0, y = 1: -(y-x) e^-0.5 = -e^-0.5
        let spec = KernelSpec::plain(BaseKernel::Rbf { sigma: 1.0 });
        let g = kernel_grad_y(&spec, &[0.0], &[1.0]).unwrap();
        assert!((g[0] + (-0.5f64).exp()).abs() < 1e-12);
        assert!((g[0] + 0.60653).abs() < 1e-5);
    }

    #[test]
    fn stationary_at_equal_points() {
        for base in [
            BaseKernel::Rbf { sigma: 0.7 },
            BaseKernel::NormalizedGaussian { alpha: 1.3, dim: 2 },
        ] {
            let spec = KernelSpec::plain(base);
            let g = kernel_grad_y(&spec, &[0.2, -0.4], &[0.2, -0.4]).unwrap();
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let spec = KernelSpec::plain(BaseKernel::Linear);
        assert!(kernel_eval(&spec, &[1.0], &[1.0, 2.0]).is_err());
    }

    fn random_specs(rng: &mut ChaCha8Rng) -> Vec<BaseKernel> {
        vec![
            BaseKernel::Linear,
            BaseKernel::Rbf {
                sigma: rng.gen_range(0.5..2.0),
            },
            BaseKernel::RationalQuadratic {
                alpha: rng.gen_range(0.5..3.0),
            },
            BaseKernel::NormalizedGaussian {
                alpha: rng.gen_range(0.5..2.0),
                dim: 3,
            },
        ]
    }

    #[test]
    fn symmetry_plain_and_composed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = FeatureNet::mlp(3, 4, &[6], 3, Activation::Gelu).unwrap();
        net.init(&mut rng);
        for base in random_specs(&mut rng) {
            for _ in 0..10 {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let plain = KernelSpec::plain(base);
                assert_eq!(
                    kernel_eval(&plain, &x, &y).unwrap(),
                    kernel_eval(&plain, &y, &x).unwrap()
                );
                let comp = KernelSpec::composed(base, &net, 0.3);
                assert_eq!(
                    kernel_eval(&comp, &x, &y).unwrap(),
                    kernel_eval(&comp, &y, &x).unwrap()
                );
            }
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = FeatureNet::mlp(3, 4, &[6], 3, Activation::Gelu).unwrap();
        net.init(&mut rng);
        let h = 1e-6;
        for base in random_specs(&mut rng) {
            for composed in [false, true] {
                for _ in 0..10 {
                    let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
                    let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
                    let spec = if composed {
                        KernelSpec::composed(base, &net, 0.4)
                    } else {
                        KernelSpec::plain(base)
                    };
                    let g = kernel_grad_y(&spec, &x, &y).unwrap();
                    for i in 0..3 {
                        let mut yp = y.clone();
                        yp[i] += h;
                        let mut ym = y.clone();
                        ym[i] -= h;
                        let fd = (kernel_eval(&spec, &x, &yp).unwrap()
                            - kernel_eval(&spec, &x, &ym).unwrap())
                            / (2.0 * h);
                        let denom = g[i].abs().max(fd.abs()).max(1e-6);
                        assert!(
                            (g[i] - fd).abs() / denom < 1e-6,
                            "{base:?} composed={composed} dim {i}: {} vs {fd}",
                            g[i]
                        );
                    }
                }
            }
        }
    }

    /// Jacobi eigenvalue sweep for the small PSD spot check.
    fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[i][j] * a[i][j];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-18 {
                        continue;
                    }
                    let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i][i]).collect()
    }

    #[test]
    fn gram_matrices_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for base in [
            BaseKernel::Rbf { sigma: 1.0 },
            BaseKernel::NormalizedGaussian { alpha: 1.5, dim: 2 },
        ] {
            let pts: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let spec = KernelSpec::plain(base);
            let gram: Vec<Vec<f64>> = pts
                .iter()
                .map(|x| {
                    pts.iter()
                        .map(|y| kernel_eval(&spec, x, y).unwrap())
                        .collect()
                })
                .collect();
            let eigs = symmetric_eigenvalues(gram);
            for e in eigs {
                assert!(e >= -1e-10, "{base:?} eigenvalue {e}");
            }
        }
    }
}
