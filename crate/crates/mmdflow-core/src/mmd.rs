//! Unbiased MMD^2 estimation, the empirical witness function, and the
//! discriminator penalties.

use crate::error::{Error, Result};
use crate::kernels::{kernel_eval, kernel_grad_y, KernelSpec};
use crate::nn::FeatureNet;
use crate::particles::Particles;
use rand::Rng;

/// Unbiased MMD^2 U-statistic between two samples. May be negative.
pub fn mmd2_unbiased(spec: &KernelSpec, x: &Particles, y: &Particles) -> Result<f64> {
    let n = x.len();
    let m = y.len();
    if n < 2 || m < 2 {
        return Err(Error::Estimator(format!(
            "unbiased MMD^2 needs at least 2 samples per side, got {n} and {m}"
        )));
    }
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kxx += kernel_eval(spec, x.row(i), x.row(j))?;
            }
        }
    }
    kxx /= (n * (n - 1)) as f64;

    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kyy += kernel_eval(spec, y.row(i), y.row(j))?;
            }
        }
    }
    kyy /= (m * (m - 1)) as f64;

    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            kxy += kernel_eval(spec, x.row(i), y.row(j))?;
        }
    }
    kxy /= (n * m) as f64;

    Ok(kxx + kyy - 2.0 * kxy)
}

/// Per-sample feature statistics that make the linear-kernel MMD^2 an O(N)
/// computation: mean feature vector, mean squared feature norm, and count.
#[derive(Debug, Clone)]
pub struct MeanFeatureSummary {
    pub mean: Vec<f64>,
    pub mean_sq_norm: f64,
    pub count: usize,
    /// Noise level the features were extracted at.
    pub t: f64,
}

impl MeanFeatureSummary {
    pub fn from_feature_rows<I>(rows: I, t: f64) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<f64>>,
    {
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut mean_sq = 0.0;
        for r in rows {
            if mean.is_empty() {
                mean = vec![0.0; r.len()];
            }
            if r.len() != mean.len() {
                return Err(Error::Shape("ragged feature rows".into()));
            }
            for (m, v) in mean.iter_mut().zip(&r) {
                *m += v;
            }
            mean_sq += r.iter().map(|v| v * v).sum::<f64>();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Estimator("summary of an empty sample".into()));
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        Ok(MeanFeatureSummary {
            mean,
            mean_sq_norm: mean_sq / count as f64,
            count,
            t,
        })
    }

    /// Summarize `phi(x_i, t)` over a particle set; `net = None` uses the
    /// particles themselves as features (identity map).
    pub fn from_particles(net: Option<&FeatureNet>, set: &Particles, t: f64) -> Result<Self> {
        match net {
            None => Self::from_feature_rows(set.rows().map(|r| r.to_vec()), t),
            Some(n) => {
                let mut rows = Vec::with_capacity(set.len());
                for r in set.rows() {
                    rows.push(n.forward(r, t)?);
                }
                Self::from_feature_rows(rows, t)
            }
        }
    }
}

/// Unbiased MMD^2 for a linear kernel on the summarized features, computed
/// from the O(N) statistics. Algebraically identical to [`mmd2_unbiased`]
/// with a composed linear kernel:
///
/// `(N ||m_x||^2 - q_x) / (N - 1) + (M ||m_y||^2 - q_y) / (M - 1) - 2 <m_x, m_y>`
pub fn mmd2_unbiased_linear_fast(
    sx: &MeanFeatureSummary,
    sy: &MeanFeatureSummary,
) -> Result<f64> {
    if sx.t != sy.t {
        return Err(Error::Contract(format!(
            "summaries taken at different noise levels: {} vs {}",
            sx.t, sy.t
        )));
    }
    if sx.count < 2 || sy.count < 2 {
        return Err(Error::Estimator(
            "unbiased MMD^2 needs at least 2 samples per side".into(),
        ));
    }
    if sx.mean.len() != sy.mean.len() {
        return Err(Error::Shape("summary feature dims differ".into()));
    }
    let n = sx.count as f64;
    let m = sy.count as f64;
    let mx2: f64 = sx.mean.iter().map(|v| v * v).sum();
    let my2: f64 = sy.mean.iter().map(|v| v * v).sum();
    let cross: f64 = sx.mean.iter().zip(&sy.mean).map(|(a, b)| a * b).sum();
    Ok((n * mx2 - sx.mean_sq_norm) / (n - 1.0) + (m * my2 - sy.mean_sq_norm) / (m - 1.0)
        - 2.0 * cross)
}

/// Empirical witness between a noisy and a clean sample evaluated at `z`:
/// `mean_i k(xn_i, z) - mean_j k(xc_j, z)` (proportionality constant fixed
/// to 1; scale folds into the flow learning rate).
pub fn witness_eval(
    spec: &KernelSpec,
    xnoisy: &Particles,
    xclean: &Particles,
    z: &[f64],
) -> Result<f64> {
    if xnoisy.is_empty() || xclean.is_empty() {
        return Err(Error::Estimator("witness over an empty sample".into()));
    }
    let mut acc = 0.0;
    for r in xnoisy.rows() {
        acc += kernel_eval(spec, r, z)?;
    }
    acc /= xnoisy.len() as f64;
    let mut neg = 0.0;
    for r in xclean.rows() {
        neg += kernel_eval(spec, r, z)?;
    }
    neg /= xclean.len() as f64;
    Ok(acc - neg)
}

/// `grad_z` of [`witness_eval`].
pub fn witness_grad(
    spec: &KernelSpec,
    xnoisy: &Particles,
    xclean: &Particles,
    z: &[f64],
) -> Result<Vec<f64>> {
    if xnoisy.is_empty() || xclean.is_empty() {
        return Err(Error::Estimator("witness over an empty sample".into()));
    }
    // Accumulate the two kernel-mean gradients separately so identical sets
    // cancel exactly.
    let mut pos = vec![0.0; z.len()];
    for r in xnoisy.rows() {
        for (g, d) in pos.iter_mut().zip(kernel_grad_y(spec, r, z)?) {
            *g += d;
        }
    }
    let mut neg = vec![0.0; z.len()];
    for r in xclean.rows() {
        for (g, d) in neg.iter_mut().zip(kernel_grad_y(spec, r, z)?) {
            *g += d;
        }
    }
    let wn = 1.0 / xnoisy.len() as f64;
    let wc = 1.0 / xclean.len() as f64;
    Ok(pos
        .iter()
        .zip(&neg)
        .map(|(p, n)| p * wn - n * wc)
        .collect())
}

/// Feature-norm penalty: `mean ||phi(xn_i, t)||^2 + mean ||phi(xc_j, t)||^2`.
pub fn l2_penalty(
    net: &FeatureNet,
    xnoisy: &Particles,
    xclean: &Particles,
    t: f64,
) -> Result<f64> {
    if xnoisy.is_empty() || xclean.is_empty() {
        return Err(Error::Estimator("penalty over an empty sample".into()));
    }
    let mut acc = 0.0;
    for r in xnoisy.rows() {
        acc += net.forward(r, t)?.iter().map(|v| v * v).sum::<f64>();
    }
    acc /= xnoisy.len() as f64;
    let mut acc2 = 0.0;
    for r in xclean.rows() {
        acc2 += net.forward(r, t)?.iter().map(|v| v * v).sum::<f64>();
    }
    acc2 /= xclean.len() as f64;
    Ok(acc + acc2)
}

/// Gradient penalty at explicit interpolation weights:
/// `mean_i (|| grad witness(a_i xn_i + (1 - a_i) xc_i) || - 1)^2`.
///
/// Pairs are aligned: `xn_i` is the noised version of `xc_i`.
pub fn grad_penalty_at(
    spec: &KernelSpec,
    xnoisy: &Particles,
    xclean: &Particles,
    alphas: &[f64],
) -> Result<f64> {
    if xnoisy.len() != xclean.len() {
        return Err(Error::Shape(format!(
            "gradient penalty needs aligned pairs, got {} noisy and {} clean",
            xnoisy.len(),
            xclean.len()
        )));
    }
    if alphas.len() != xnoisy.len() {
        return Err(Error::Shape("one interpolation weight per pair".into()));
    }
    if xnoisy.is_empty() {
        return Err(Error::Estimator("penalty over an empty sample".into()));
    }
    let dim = xnoisy.dim();
    let mut acc = 0.0;
    for (i, &a) in alphas.iter().enumerate() {
        let mut z = vec![0.0; dim];
        for k in 0..dim {
            z[k] = a * xnoisy.row(i)[k] + (1.0 - a) * xclean.row(i)[k];
        }
        let g = witness_grad(spec, xnoisy, xclean, &z)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc += (norm - 1.0) * (norm - 1.0);
    }
    Ok(acc / xnoisy.len() as f64)
}

/// Gradient penalty with `a_i ~ U[0, 1]` drawn from `rng`.
pub fn grad_penalty<R: Rng>(
    spec: &KernelSpec,
    xnoisy: &Particles,
    xclean: &Particles,
    rng: &mut R,
) -> Result<f64> {
    let alphas: Vec<f64> = (0..xnoisy.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    grad_penalty_at(spec, xnoisy, xclean, &alphas)
}
