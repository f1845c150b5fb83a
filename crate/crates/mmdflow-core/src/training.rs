//! Non-adversarial training of noise-conditional discriminators.
//!
//! One loop serves both objectives: sample a clean batch, corrupt it at
//! several noise levels drawn uniformly, accumulate the per-level losses and
//! take a single Adam step on the averaged gradient. The loss at each level
//! is `-MMD^2_u + lambda_l2 * L_l2 + lambda_grad * L_grad` (or the negated
//! KALE objective plus penalties), differentiated exactly through the
//! expression graph — including the witness-gradient inside the gradient
//! penalty.

use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{BaseKernel, KernelSpec};
use crate::nn::{AdamConfig, AdamState, FeatureNet};
use crate::particles::Particles;
use rand::seq::index::sample as index_sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A trained (or trainable) noise-conditional discriminator.
#[derive(Debug, Clone)]
pub enum Discriminator {
    /// Base kernel composed with learned features `phi(x, t)`.
    Deep { net: FeatureNet, base: BaseKernel },
    /// RBF kernel directly on data space with a learned width
    /// `sigma(t) = sigma_min + relu(g(t))`.
    BandwidthRbf { net: FeatureNet, sigma_min: f64 },
    /// Parametric witness `h(x; t) = <phi(x, t), head(t)>`.
    Kale { net: FeatureNet, head: FeatureNet },
}

impl Discriminator {
    /// Kernel bound at noise level `t`, for witness-based flows.
    pub fn kernel_at(&self, t: f64) -> Result<KernelSpec<'_>> {
        match self {
            Discriminator::Deep { net, base } => Ok(KernelSpec::composed(*base, net, t)),
            Discriminator::BandwidthRbf { .. } => Ok(KernelSpec::plain(BaseKernel::Rbf {
                sigma: self.sigma_at(t)?,
            })),
            Discriminator::Kale { .. } => Err(Error::Unsupported(
                "the KALE witness is not kernel-based; use the KALE flow".into(),
            )),
        }
    }

    /// Learned RBF width at `t` (bandwidth models only).
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        match self {
            Discriminator::BandwidthRbf { net, sigma_min } => {
                let g = net.forward(&[], t)?;
                Ok(sigma_min + g[0].max(0.0))
            }
            _ => Err(Error::Unsupported(
                "sigma(t) only exists for the learned-bandwidth model".into(),
            )),
        }
    }

    /// Feature network (the `phi` of deep and KALE models, the width net of
    /// bandwidth models).
    pub fn feature_net(&self) -> &FeatureNet {
        match self {
            Discriminator::Deep { net, .. } => net,
            Discriminator::BandwidthRbf { net, .. } => net,
            Discriminator::Kale { net, .. } => net,
        }
    }

    pub fn head_net(&self) -> Option<&FeatureNet> {
        match self {
            Discriminator::Kale { head, .. } => Some(head),
            _ => None,
        }
    }

    /// Data dimension the discriminator operates on, when it is tied to one.
    pub fn data_dim(&self) -> Option<usize> {
        match self {
            Discriminator::Deep { net, .. } | Discriminator::Kale { net, .. } => {
                Some(net.input_dim())
            }
            Discriminator::BandwidthRbf { .. } => None,
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.feature_net().params().to_vec();
        if let Some(h) = self.head_net() {
            p.extend_from_slice(h.params());
        }
        p
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.feature_net().num_params();
        match self {
            Discriminator::Deep { net, .. } | Discriminator::BandwidthRbf { net, .. } => {
                net.set_params(flat)
            }
            Discriminator::Kale { net, head } => {
                net.set_params(&flat[..n])?;
                head.set_params(&flat[n..])
            }
        }
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mmd,
    Kale { lambda: f64 },
}

/// Hyperparameters of the training loop.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub n_iter: usize,
    pub batch_size: usize,
    pub n_noise: usize,
    pub lambda_grad: f64,
    pub lambda_l2: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub objective: Objective,
    /// When false (the default), uniformly drawn noise levels are snapped to
    /// the schedule grid before use.
    pub continuous_t: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter < 1 {
            return Err(Error::Config("n_iter must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.n_noise < 1 {
            return Err(Error::Config("n_noise must be at least 1".into()));
        }
        if self.lambda_grad < 0.0 || self.lambda_l2 < 0.0 {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        if let Objective::Kale { lambda } = self.objective {
            if lambda < 0.0 {
                return Err(Error::Config("kale lambda must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Loss components at one noise level.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// MMD^2 estimate (or the KALE objective value for KALE training).
    pub objective: f64,
    pub grad_penalty: f64,
    pub l2: f64,
    /// True when the KALE exponential clamp fired.
    pub clamp_fired: bool,
}

/// Flat parameter gradients for the model (feature net, then head if any).
pub type ModelGrads = Vec<f64>;

const KALE_CLAMP: f64 = 20.0;

/// Per-level loss and exact parameter gradient. Draws the forward-process
/// noise and the gradient-penalty interpolation weights from `rng`.
pub fn noise_conditional_loss(
    model: &Discriminator,
    t: f64,
    x0: &Particles,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, ModelGrads)> {
    if x0.len() < 2 {
        return Err(Error::Estimator(
            "noise-conditional loss needs a batch of at least 2".into(),
        ));
    }
    let n = x0.len();
    let dim = x0.dim();
    let (a_t, b_t) = schedule.coefficients(t)?;
    let mut noisy = Particles::zeros(n, dim);
    for i in 0..n {
        for k in 0..dim {
            let eps: f64 = rng.sample(StandardNormal);
            noisy.row_mut(i)[k] = a_t * x0.row(i)[k] + b_t * eps;
        }
    }
    let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();

    match (model, cfg.objective) {
        (Discriminator::Deep { net, base }, Objective::Mmd) => {
            deep_mmd_loss(net, *base, t, &noisy, x0, &alphas, cfg)
        }
        (Discriminator::BandwidthRbf { net, sigma_min }, Objective::Mmd) => {
            bandwidth_rbf_loss(net, *sigma_min, t, &noisy, x0, &alphas, cfg)
        }
        (Discriminator::Kale { net, head }, Objective::Kale { lambda }) => {
            kale_loss(net, head, lambda, t, &noisy, x0, &alphas, cfg)
        }
        _ => Err(Error::Config(
            "objective does not match the discriminator kind".into(),
        )),
    }
}

/// Unbiased linear-kernel MMD^2 from per-sample feature nodes, O(N) algebra:
/// `(N ||m_u||^2 - q_u) / (N - 1) + (M ||m_v||^2 - q_v) / (M - 1) - 2 <m_u, m_v>`.
///
/// Also returns the shared `mean ||.||^2` sum (the l2 penalty) and the
/// feature-mean difference (the linear witness cotangent).
fn linear_mmd2_node(
    g: &mut Graph,
    us: &[NodeId],
    vs: &[NodeId],
) -> Result<(NodeId, NodeId, NodeId)> {
    let n = us.len() as f64;
    let m = vs.len() as f64;
    let mu = g.mean_vectors(us)?;
    let mv = g.mean_vectors(vs)?;
    let sq_u: Vec<NodeId> = us
        .iter()
        .map(|&u| g.norm_sq(u))
        .collect::<Result<Vec<_>>>()?;
    let sq_v: Vec<NodeId> = vs
        .iter()
        .map(|&v| g.norm_sq(v))
        .collect::<Result<Vec<_>>>()?;
    let qu = g.mean_scalars(&sq_u)?;
    let qv = g.mean_scalars(&sq_v)?;
    let mu2 = g.norm_sq(mu)?;
    let mv2 = g.norm_sq(mv)?;
    let nu = g.scale(mu2, n)?;
    let nu = g.sub(nu, qu)?;
    let term_u = g.scale(nu, 1.0 / (n - 1.0))?;
    let nv = g.scale(mv2, m)?;
    let nv = g.sub(nv, qv)?;
    let term_v = g.scale(nv, 1.0 / (m - 1.0))?;
    let cross = g.dot(mu, mv)?;
    let cross2 = g.scale(cross, 2.0)?;
    let s = g.add(term_u, term_v)?;
    let mmd2 = g.sub(s, cross2)?;
    let l2 = g.add(qu, qv)?;
    let mdiff = g.sub_vec(mu, mv)?;
    Ok((mmd2, l2, mdiff))
}

/// Base-kernel value on two feature nodes, as a graph expression.
fn base_kernel_node(g: &mut Graph, base: BaseKernel, u: NodeId, v: NodeId) -> Result<NodeId> {
    match base {
        BaseKernel::Linear => g.dot(u, v),
        BaseKernel::Rbf { sigma } => {
            let d = g.sub_vec(u, v)?;
            let s = g.norm_sq(d)?;
            let e = g.scale(s, -1.0 / (2.0 * sigma * sigma))?;
            g.exp(e)
        }
        BaseKernel::RationalQuadratic { .. } | BaseKernel::NormalizedGaussian { .. } => {
            Err(Error::Unsupported(format!(
                "training with base kernel {base:?} is not supported; use linear or rbf"
            )))
        }
    }
}

/// `grad_v k_base(u, v)` as a graph expression (witness cotangent of the
/// gradient penalty under a non-linear base kernel).
fn base_kernel_grad_v_node(
    g: &mut Graph,
    base: BaseKernel,
    u: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    match base {
        BaseKernel::Linear => Ok(u),
        BaseKernel::Rbf { sigma } => {
            let k = base_kernel_node(g, base, u, v)?;
            let coef = g.scale(k, 1.0 / (sigma * sigma))?;
            let diff = g.sub_vec(u, v)?;
            g.mul_scalar_vec(coef, diff)
        }
        _ => Err(Error::Unsupported(format!(
            "training with base kernel {base:?} is not supported"
        ))),
    }
}

fn deep_mmd_loss(
    net: &FeatureNet,
    base: BaseKernel,
    t: f64,
    noisy: &Particles,
    clean: &Particles,
    alphas: &[f64],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ModelGrads)> {
    let n = noisy.len();
    let nets = [net];
    let mut g = Graph::new(&nets);

    let us: Vec<NodeId> = noisy
        .rows()
        .map(|r| g.feature(0, r, t))
        .collect::<Result<Vec<_>>>()?;
    let vs: Vec<NodeId> = clean
        .rows()
        .map(|r| g.feature(0, r, t))
        .collect::<Result<Vec<_>>>()?;

    let (mmd2, l2, lin_cot) = if matches!(base, BaseKernel::Linear) {
        let (mmd2, l2, mdiff) = linear_mmd2_node(&mut g, &us, &vs)?;
        (mmd2, l2, Some(mdiff))
    } else {
        // quadratic path
        let mut kuu = Vec::new();
        let mut kvv = Vec::new();
        let mut kuv = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    kuu.push(base_kernel_node(&mut g, base, us[i], us[j])?);
                    kvv.push(base_kernel_node(&mut g, base, vs[i], vs[j])?);
                }
                kuv.push(base_kernel_node(&mut g, base, us[i], vs[j])?);
            }
        }
        let muu = g.mean_scalars(&kuu)?;
        let mvv = g.mean_scalars(&kvv)?;
        let muv = g.mean_scalars(&kuv)?;
        let s = g.add(muu, mvv)?;
        let muv2 = g.scale(muv, 2.0)?;
        let mmd2 = g.sub(s, muv2)?;
        let sq_u: Vec<NodeId> = us
            .iter()
            .map(|&u| g.norm_sq(u))
            .collect::<Result<Vec<_>>>()?;
        let sq_v: Vec<NodeId> = vs
            .iter()
            .map(|&v| g.norm_sq(v))
            .collect::<Result<Vec<_>>>()?;
        let qu = g.mean_scalars(&sq_u)?;
        let qv = g.mean_scalars(&sq_v)?;
        let l2 = g.add(qu, qv)?;
        (mmd2, l2, None)
    };

    // gradient penalty on the witness between noisy and clean
    let gp = if cfg.lambda_grad > 0.0 {
        let mut terms = Vec::with_capacity(n);
        for (i, &a) in alphas.iter().enumerate() {
            let z: Vec<f64> = noisy
                .row(i)
                .iter()
                .zip(clean.row(i))
                .map(|(xn, xc)| a * xn + (1.0 - a) * xc)
                .collect();
            let cot = match lin_cot {
                Some(mdiff) => mdiff,
                None => {
                    // mean_j grad_v k(u_j, phi(z)) - mean_j grad_v k(v_j, phi(z))
                    let fz = g.feature(0, &z, t)?;
                    let gu: Vec<NodeId> = us
                        .iter()
                        .map(|&u| base_kernel_grad_v_node(&mut g, base, u, fz))
                        .collect::<Result<Vec<_>>>()?;
                    let gv: Vec<NodeId> = vs
                        .iter()
                        .map(|&v| base_kernel_grad_v_node(&mut g, base, v, fz))
                        .collect::<Result<Vec<_>>>()?;
                    let mu = g.mean_vectors(&gu)?;
                    let mv = g.mean_vectors(&gv)?;
                    g.sub_vec(mu, mv)?
                }
            };
            let gi = g.grad_input(0, &z, t, cot)?;
            let nm = g.norm(gi)?;
            let nm1 = g.add_const(nm, -1.0)?;
            terms.push(g.mul(nm1, nm1)?);
        }
        Some(g.mean_scalars(&terms)?)
    } else {
        None
    };

    // total = -mmd2 + lambda_l2 * l2 + lambda_grad * gp
    let mut total = g.scale(mmd2, -1.0)?;
    if cfg.lambda_l2 > 0.0 {
        let w = g.scale(l2, cfg.lambda_l2)?;
        total = g.add(total, w)?;
    }
    if let Some(gp) = gp {
        let w = g.scale(gp, cfg.lambda_grad)?;
        total = g.add(total, w)?;
    }

    let breakdown = LossBreakdown {
        total: g.scalar_value(total)?,
        objective: g.scalar_value(mmd2)?,
        grad_penalty: gp.map(|id| g.scalar_value(id)).transpose()?.unwrap_or(0.0),
        l2: g.scalar_value(l2)?,
        clamp_fired: false,
    };
    let grads = g.backward(total)?;
    Ok((breakdown, grads.into_iter().next().expect("one net")))
}

/// Learned-bandwidth RBF loss on raw data. The single trainable scalar per
/// level is `sigma(t)`, so all kernel derivatives are taken analytically and
/// only the final scalar is backpropagated through the width network. The
/// nested penalty derivative uses
/// `d/dsigma [k (x - z) / sigma^2] = k (x - z) (s - 2 sigma^2) / sigma^5`.
fn bandwidth_rbf_loss(
    net: &FeatureNet,
    sigma_min: f64,
    t: f64,
    noisy: &Particles,
    clean: &Particles,
    alphas: &[f64],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ModelGrads)> {
    let n = noisy.len();
    let dim = noisy.dim();
    let trace = net.forward_trace::<f64>(&[], t)?;
    let g_out = trace.output()[0];
    let sigma = sigma_min + g_out.max(0.0);
    let s2 = sigma * sigma;
    let inv_2s2 = 1.0 / (2.0 * s2);

    let sqd = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    };

    // MMD^2 and d MMD^2 / d sigma over the three blocks
    let mut sum_uu = 0.0;
    let mut dsum_uu = 0.0;
    let mut sum_vv = 0.0;
    let mut dsum_vv = 0.0;
    let mut sum_uv = 0.0;
    let mut dsum_uv = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = sqd(noisy.row(i), noisy.row(j));
            let k = (-s * inv_2s2).exp();
            sum_uu += 2.0 * k;
            dsum_uu += 2.0 * k * s;
            let s = sqd(clean.row(i), clean.row(j));
            let k = (-s * inv_2s2).exp();
            sum_vv += 2.0 * k;
            dsum_vv += 2.0 * k * s;
        }
        for j in 0..n {
            let s = sqd(noisy.row(i), clean.row(j));
            let k = (-s * inv_2s2).exp();
            sum_uv += k;
            dsum_uv += k * s;
        }
    }
    let pair_w = 1.0 / (n * (n - 1)) as f64;
    let cross_w = 2.0 / (n * n) as f64;
    let mmd2 = pair_w * (sum_uu + sum_vv) - cross_w * sum_uv;
    // d k / d sigma = k s / sigma^3
    let dmmd2 = (pair_w * (dsum_uu + dsum_vv) - cross_w * dsum_uv) / (s2 * sigma);

    // identity features: the l2 penalty does not depend on sigma
    let l2 = {
        let mean_sq = |p: &Particles| {
            p.rows()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                / p.len() as f64
        };
        mean_sq(noisy) + mean_sq(clean)
    };

    // gradient penalty
    let mut gp = 0.0;
    let mut dgp = 0.0;
    if cfg.lambda_grad > 0.0 {
        let inv_n = 1.0 / n as f64;
        let mut z = vec![0.0; dim];
        let mut grad = vec![0.0; dim];
        let mut dgrad = vec![0.0; dim];
        for (i, &a) in alphas.iter().enumerate() {
            for k in 0..dim {
                z[k] = a * noisy.row(i)[k] + (1.0 - a) * clean.row(i)[k];
            }
            grad.iter_mut().for_each(|v| *v = 0.0);
            dgrad.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..n {
                let row = noisy.row(j);
                let s = sqd(row, &z);
                let k = (-s * inv_2s2).exp();
                let dk = k * (s - 2.0 * s2); // 1/sigma^5 applied below
                for m in 0..dim {
                    let d = row[m] - z[m];
                    grad[m] += k * d;
                    dgrad[m] += dk * d;
                }
                let row = clean.row(j);
                let s = sqd(row, &z);
                let k = (-s * inv_2s2).exp();
                let dk = k * (s - 2.0 * s2);
                for m in 0..dim {
                    let d = row[m] - z[m];
                    grad[m] -= k * d;
                    dgrad[m] -= dk * d;
                }
            }
            let inv_s2 = 1.0 / s2;
            let inv_s5 = 1.0 / (s2 * s2 * sigma);
            let mut norm_sq = 0.0;
            let mut dot = 0.0;
            for m in 0..dim {
                let gm = grad[m] * inv_n * inv_s2;
                let dgm = dgrad[m] * inv_n * inv_s5;
                norm_sq += gm * gm;
                dot += gm * dgm;
            }
            let norm = norm_sq.sqrt();
            gp += (norm - 1.0) * (norm - 1.0);
            if norm > 0.0 {
                dgp += 2.0 * (norm - 1.0) / norm * dot;
            }
        }
        gp *= inv_n;
        dgp *= inv_n;
    }

    let total = -mmd2 + cfg.lambda_l2 * l2 + cfg.lambda_grad * gp;
    let dtotal_dsigma = -dmmd2 + cfg.lambda_grad * dgp;
    // through sigma = sigma_min + relu(g)
    let dtotal_dg = if g_out > 0.0 { dtotal_dsigma } else { 0.0 };

    let mut grads = vec![0.0; net.num_params()];
    net.backward(&trace, &[dtotal_dg], Some(&mut grads))?;

    Ok((
        LossBreakdown {
            total,
            objective: mmd2,
            grad_penalty: gp,
            l2,
            clamp_fired: false,
        },
        grads,
    ))
}

#[allow(clippy::too_many_arguments)]
fn kale_loss(
    net: &FeatureNet,
    head: &FeatureNet,
    lambda: f64,
    t: f64,
    noisy: &Particles,
    clean: &Particles,
    alphas: &[f64],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ModelGrads)> {
    let n = noisy.len();
    let nets = [net, head];
    let mut g = Graph::new(&nets);

    let a_t = g.feature(1, &[], t)?;
    let us: Vec<NodeId> = noisy
        .rows()
        .map(|r| g.feature(0, r, t))
        .collect::<Result<Vec<_>>>()?;
    let vs: Vec<NodeId> = clean
        .rows()
        .map(|r| g.feature(0, r, t))
        .collect::<Result<Vec<_>>>()?;

    // KALE(P_t, P) = (1 + lambda)(mean h(noisy) - mean e^{h(clean)} - lambda/2 ||a||^2)
    let hu: Vec<NodeId> = us
        .iter()
        .map(|&u| g.dot(u, a_t))
        .collect::<Result<Vec<_>>>()?;
    let mut clamp_fired = false;
    let mut ev = Vec::with_capacity(n);
    for &v in &vs {
        let h = g.dot(v, a_t)?;
        if g.scalar_value(h)? > KALE_CLAMP {
            clamp_fired = true;
        }
        let hc = g.clamp_max(h, KALE_CLAMP)?;
        ev.push(g.exp(hc)?);
    }
    let mean_hu = g.mean_scalars(&hu)?;
    let mean_ev = g.mean_scalars(&ev)?;
    let a_sq = g.norm_sq(a_t)?;
    let reg = g.scale(a_sq, lambda / 2.0)?;
    let inner = g.sub(mean_hu, mean_ev)?;
    let inner = g.sub(inner, reg)?;
    let kale = g.scale(inner, 1.0 + lambda)?;

    // l2 penalty with the 1/2 factor
    let sq_u: Vec<NodeId> = us
        .iter()
        .map(|&u| g.norm_sq(u))
        .collect::<Result<Vec<_>>>()?;
    let sq_v: Vec<NodeId> = vs
        .iter()
        .map(|&v| g.norm_sq(v))
        .collect::<Result<Vec<_>>>()?;
    let qu = g.mean_scalars(&sq_u)?;
    let qv = g.mean_scalars(&sq_v)?;
    let l2sum = g.add(qu, qv)?;
    let l2 = g.scale(l2sum, 0.5)?;

    // gradient penalty on h: grad_z h(z) = J_phi(z)^T a(t)
    let gp = if cfg.lambda_grad > 0.0 {
        let mut terms = Vec::with_capacity(n);
        for (i, &a) in alphas.iter().enumerate() {
            let z: Vec<f64> = noisy
                .row(i)
                .iter()
                .zip(clean.row(i))
                .map(|(xn, xc)| a * xn + (1.0 - a) * xc)
                .collect();
            let gi = g.grad_input(0, &z, t, a_t)?;
            let nm = g.norm(gi)?;
            let nm1 = g.add_const(nm, -1.0)?;
            terms.push(g.mul(nm1, nm1)?);
        }
        Some(g.mean_scalars(&terms)?)
    } else {
        None
    };

    let mut total = g.scale(kale, -1.0)?;
    if cfg.lambda_l2 > 0.0 {
        let w = g.scale(l2, cfg.lambda_l2)?;
        total = g.add(total, w)?;
    }
    if let Some(gp) = gp {
        let w = g.scale(gp, cfg.lambda_grad)?;
        total = g.add(total, w)?;
    }

    let breakdown = LossBreakdown {
        total: g.scalar_value(total)?,
        objective: g.scalar_value(kale)?,
        grad_penalty: gp.map(|id| g.scalar_value(id)).transpose()?.unwrap_or(0.0),
        l2: g.scalar_value(l2)?,
        clamp_fired,
    };
    let grads = g.backward(total)?;
    let mut flat = Vec::with_capacity(net.num_params() + head.num_params());
    let mut it = grads.into_iter();
    flat.extend(it.next().expect("feature net grads"));
    flat.extend(it.next().expect("head grads"));
    Ok((breakdown, flat))
}

/// Plain (non-differentiated) empirical parametric KALE between two samples,
/// for evaluation: `(1 + lambda)(mean h(q) - mean e^{h(p)} - lambda/2 ||a||^2)`.
pub fn kale_value(
    net: &FeatureNet,
    head: &FeatureNet,
    lambda: f64,
    t: f64,
    q_side: &Particles,
    p_side: &Particles,
) -> Result<f64> {
    if q_side.is_empty() || p_side.is_empty() {
        return Err(Error::Estimator("KALE over an empty sample".into()));
    }
    let a_t = head.forward(&[], t)?;
    let h = |x: &[f64]| -> Result<f64> {
        let f = net.forward(x, t)?;
        Ok(f.iter().zip(&a_t).map(|(a, b)| a * b).sum())
    };
    let mut mean_q = 0.0;
    for r in q_side.rows() {
        mean_q += h(r)?;
    }
    mean_q /= q_side.len() as f64;
    let mut mean_e = 0.0;
    for r in p_side.rows() {
        mean_e += h(r)?.min(KALE_CLAMP).exp();
    }
    mean_e /= p_side.len() as f64;
    let a_sq: f64 = a_t.iter().map(|v| v * v).sum();
    Ok((1.0 + lambda) * (mean_q - mean_e - lambda / 2.0 * a_sq))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct IterStats {
    pub iter: usize,
    pub mean_loss: f64,
    pub mean_objective: f64,
    pub mean_grad_penalty: f64,
    pub mean_l2: f64,
}

/// Training result: the final model and the per-iteration log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Discriminator,
    pub log: Vec<IterStats>,
    /// True if the KALE clamp ever fired during training.
    pub clamp_fired: bool,
}

/// The training loop: per iteration, one clean batch, `n_noise` fresh noise
/// levels, one Adam step on the level-averaged gradient.
pub fn train_discriminator(
    dataset: &Particles,
    model: Discriminator,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    match (&model, cfg.objective) {
        (Discriminator::Kale { .. }, Objective::Kale { .. }) => {}
        (Discriminator::Kale { .. }, _) | (_, Objective::Kale { .. }) => {
            return Err(Error::Config(
                "KALE objective requires (only) the KALE discriminator".into(),
            ))
        }
        _ => {}
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset of {} is smaller than the batch size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let mut model = model;
    let mut params = model.flat_params();
    let mut adam = AdamState::new(params.len(), cfg.adam);
    let mut log = Vec::with_capacity(cfg.n_iter);
    let mut clamp_fired = false;

    for iter in 0..cfg.n_iter {
        let idx = index_sample(rng, dataset.len(), cfg.batch_size).into_vec();
        let batch = dataset.select(&idx);
        // One independent stream per level keeps runs reproducible however
        // the levels are evaluated.
        let level_seeds: Vec<u64> = (0..cfg.n_noise).map(|_| rng.next_u64()).collect();

        let mut grad_acc = vec![0.0; params.len()];
        let mut stats = IterStats {
            iter,
            mean_loss: 0.0,
            mean_objective: 0.0,
            mean_grad_penalty: 0.0,
            mean_l2: 0.0,
        };
        for (lvl, &seed) in level_seeds.iter().enumerate() {
            let mut level_rng = ChaCha8Rng::seed_from_u64(seed);
            let t_raw: f64 = level_rng.gen_range(0.0..1.0);
            let t = if cfg.continuous_t {
                t_raw
            } else {
                schedule.snap(t_raw)?.0
            };
            let (breakdown, grads) =
                noise_conditional_loss(&model, t, &batch, schedule, cfg, &mut level_rng)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {iter}, level {lvl} (t = {t:.6}): {breakdown:?}"
                )));
            }
            clamp_fired |= breakdown.clamp_fired;
            let w = 1.0 / cfg.n_noise as f64;
            for (a, gr) in grad_acc.iter_mut().zip(&grads) {
                *a += w * gr;
            }
            stats.mean_loss += w * breakdown.total;
            stats.mean_objective += w * breakdown.objective;
            stats.mean_grad_penalty += w * breakdown.grad_penalty;
            stats.mean_l2 += w * breakdown.l2;
        }
        adam.step(&mut params, &grad_acc)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite parameters after iteration {iter}"
            )));
        }
        model.set_flat_params(&params)?;
        log.push(stats);
    }
    Ok(TrainOutcome {
        model,
        log,
        clamp_fired,
    })
}

/// KALE-objective training; same loop as [`train_discriminator`].
pub fn train_kale(
    dataset: &Particles,
    net: FeatureNet,
    head: FeatureNet,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if !matches!(cfg.objective, Objective::Kale { .. }) {
        return Err(Error::Config(
            "train_kale requires the KALE objective".into(),
        ));
    }
    train_discriminator(
        dataset,
        Discriminator::Kale { net, head },
        schedule,
        cfg,
        rng,
    )
}
