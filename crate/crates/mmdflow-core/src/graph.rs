//! Eager expression tape over feature networks.
//!
//! Training losses are assembled from a small node set (feature forward,
//! witness-gradient, inner products, norms, exp, means and arithmetic) and
//! differentiated exactly with respect to every network parameter by a
//! reverse sweep over the tape.
//!
//! The [`Op::GradInput`] node is the one second-order citizen: its value is
//! the input-space pullback `J^T c` of a feature network, and its backward
//! rule pushes a tangent through the network's reverse pass with dual
//! numbers. Seeding the tangent on the evaluation point and reading the
//! tangent of the parameter gradients yields the exact mixed derivative that
//! the gradient penalty needs — no finite differences anywhere.

use crate::error::{Error, Result};
use crate::nn::{FeatureNet, Trace};
use crate::scalar::Dual;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Payload {
    S(f64),
    V(Vec<f64>),
}

#[derive(Debug, Clone)]
enum Op {
    ConstS,
    ConstV,
    /// `phi(x, t)` of net `net`; the f64 trace is cached for the reverse pass.
    Feature {
        net: usize,
        t: f64,
    },
    /// `J_phi(x, t)^T * cot`: gradient of `<phi(x, t), cot>` with respect to x.
    GradInput {
        net: usize,
        t: f64,
        cot: NodeId,
    },
    Dot(NodeId, NodeId),
    NormSq(NodeId),
    Norm(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    /// `min(a, cap)`; used to guard `exp` overflow in the KALE objective.
    ClampMax(NodeId, f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    MeanS(Vec<NodeId>),
    MeanV(Vec<NodeId>),
    AddV(NodeId, NodeId),
    SubV(NodeId, NodeId),
    ScaleV(NodeId, f64),
    /// scalar * vector
    MulSV(NodeId, NodeId),
}

struct NodeData {
    op: Op,
    val: Payload,
    /// Evaluation point for Feature/GradInput nodes.
    point: Option<Vec<f64>>,
    /// Cached forward trace for Feature nodes.
    trace: Option<Trace<f64>>,
}

/// Per-network flat parameter gradients produced by [`Graph::backward`].
pub type NetGrads = Vec<Vec<f64>>;

pub struct Graph<'a> {
    nets: Vec<&'a FeatureNet>,
    nodes: Vec<NodeData>,
}

impl<'a> Graph<'a> {
    pub fn new(nets: &[&'a FeatureNet]) -> Self {
        Graph {
            nets: nets.to_vec(),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, val: Payload) -> NodeId {
        self.nodes.push(NodeData {
            op,
            val,
            point: None,
            trace: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        match &self.nodes[id.0].val {
            Payload::S(v) => Ok(*v),
            Payload::V(_) => Err(Error::Shape("expected scalar node".into())),
        }
    }

    pub fn vector_value(&self, id: NodeId) -> Result<&[f64]> {
        match &self.nodes[id.0].val {
            Payload::V(v) => Ok(v),
            Payload::S(_) => Err(Error::Shape("expected vector node".into())),
        }
    }

    fn s(&self, id: NodeId) -> f64 {
        match &self.nodes[id.0].val {
            Payload::S(v) => *v,
            Payload::V(_) => unreachable!("type-checked at construction"),
        }
    }

    fn v(&self, id: NodeId) -> &[f64] {
        match &self.nodes[id.0].val {
            Payload::V(v) => v,
            Payload::S(_) => unreachable!("type-checked at construction"),
        }
    }

    fn want_scalar(&self, id: NodeId) -> Result<()> {
        self.scalar_value(id).map(|_| ())
    }

    fn want_vector(&self, id: NodeId) -> Result<usize> {
        self.vector_value(id).map(|v| v.len())
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.push(Op::ConstS, Payload::S(v))
    }

    pub fn constant_vec(&mut self, v: &[f64]) -> NodeId {
        self.push(Op::ConstV, Payload::V(v.to_vec()))
    }

    pub fn feature(&mut self, net: usize, x: &[f64], t: f64) -> Result<NodeId> {
        let n = self
            .nets
            .get(net)
            .ok_or_else(|| Error::Config(format!("net index {net} out of range")))?;
        let trace = n.forward_trace::<f64>(x, t)?;
        let val = trace.output().to_vec();
        self.nodes.push(NodeData {
            op: Op::Feature { net, t },
            val: Payload::V(val),
            point: Some(x.to_vec()),
            trace: Some(trace),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Witness-gradient node: `J_phi(x, t)^T * cot`, differentiable in the
    /// network parameters and in `cot`.
    pub fn grad_input(&mut self, net: usize, x: &[f64], t: f64, cot: NodeId) -> Result<NodeId> {
        let n = self
            .nets
            .get(net)
            .ok_or_else(|| Error::Config(format!("net index {net} out of range")))?;
        let k = self.want_vector(cot)?;
        if k != n.output_dim() {
            return Err(Error::Shape(format!(
                "cotangent dim {k} does not match feature dim {}",
                n.output_dim()
            )));
        }
        let trace = n.forward_trace::<f64>(x, t)?;
        let cot_val = self.v(cot).to_vec();
        let val = n.backward(&trace, &cot_val, None)?;
        self.nodes.push(NodeData {
            op: Op::GradInput { net, t, cot },
            val: Payload::V(val),
            point: Some(x.to_vec()),
            trace: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let la = self.want_vector(a)?;
        let lb = self.want_vector(b)?;
        if la != lb {
            return Err(Error::Shape(format!("dot of dims {la} and {lb}")));
        }
        let v = self
            .v(a)
            .iter()
            .zip(self.v(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot(a, b), Payload::S(v)))
    }

    pub fn norm_sq(&mut self, a: NodeId) -> Result<NodeId> {
        self.want_vector(a)?;
        let v = self.v(a).iter().map(|x| x * x).sum();
        Ok(self.push(Op::NormSq(a), Payload::S(v)))
    }

    pub fn norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.want_vector(a)?;
        let v = self.v(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(self.push(Op::Norm(a), Payload::S(v)))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.want_scalar(a)?;
        let v = self.s(a).exp();
        Ok(self.push(Op::Exp(a), Payload::S(v)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.want_scalar(a)?;
        let v = self.s(a).max(0.0);
        Ok(self.push(Op::Relu(a), Payload::S(v)))
    }

    pub fn clamp_max(&mut self, a: NodeId, cap: f64) -> Result<NodeId> {
        self.want_scalar(a)?;
        let v = self.s(a).min(cap);
        Ok(self.push(Op::ClampMax(a, cap), Payload::S(v)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_scalar(a)?;
        self.want_scalar(b)?;
        let v = self.s(a) + self.s(b);
        Ok(self.push(Op::Add(a, b), Payload::S(v)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_scalar(a)?;
        self.want_scalar(b)?;
        let v = self.s(a) - self.s(b);
        Ok(self.push(Op::Sub(a, b), Payload::S(v)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_scalar(a)?;
        self.want_scalar(b)?;
        let v = self.s(a) * self.s(b);
        Ok(self.push(Op::Mul(a, b), Payload::S(v)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_scalar(a)?;
        self.want_scalar(b)?;
        let v = self.s(a) / self.s(b);
        Ok(self.push(Op::Div(a, b), Payload::S(v)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.want_scalar(a)?;
        let v = self.s(a) * k;
        Ok(self.push(Op::Scale(a, k), Payload::S(v)))
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.want_scalar(a)?;
        let v = self.s(a) + k;
        Ok(self.push(Op::AddConst(a, k), Payload::S(v)))
    }

    pub fn mean_scalars(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Error::Shape("mean over empty set".into()));
        }
        let mut acc = 0.0;
        for &id in items {
            self.want_scalar(id)?;
            acc += self.s(id);
        }
        let v = acc / items.len() as f64;
        Ok(self.push(Op::MeanS(items.to_vec()), Payload::S(v)))
    }

    pub fn mean_vectors(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Error::Shape("mean over empty set".into()));
        }
        let dim = self.want_vector(items[0])?;
        let mut acc = vec![0.0; dim];
        for &id in items {
            let d = self.want_vector(id)?;
            if d != dim {
                return Err(Error::Shape("mean over ragged vectors".into()));
            }
            for (a, x) in acc.iter_mut().zip(self.v(id)) {
                *a += x;
            }
        }
        for a in acc.iter_mut() {
            *a /= items.len() as f64;
        }
        Ok(self.push(Op::MeanV(items.to_vec()), Payload::V(acc)))
    }

    pub fn add_vec(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let la = self.want_vector(a)?;
        if la != self.want_vector(b)? {
            return Err(Error::Shape("vector add dim mismatch".into()));
        }
        let v: Vec<f64> = self.v(a).iter().zip(self.v(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::AddV(a, b), Payload::V(v)))
    }

    pub fn sub_vec(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let la = self.want_vector(a)?;
        if la != self.want_vector(b)? {
            return Err(Error::Shape("vector sub dim mismatch".into()));
        }
        let v: Vec<f64> = self.v(a).iter().zip(self.v(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::SubV(a, b), Payload::V(v)))
    }

    pub fn scale_vec(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.want_vector(a)?;
        let v: Vec<f64> = self.v(a).iter().map(|x| x * k).collect();
        Ok(self.push(Op::ScaleV(a, k), Payload::V(v)))
    }

    pub fn mul_scalar_vec(&mut self, s: NodeId, a: NodeId) -> Result<NodeId> {
        self.want_scalar(s)?;
        self.want_vector(a)?;
        let sv = self.s(s);
        let v: Vec<f64> = self.v(a).iter().map(|x| x * sv).collect();
        Ok(self.push(Op::MulSV(s, a), Payload::V(v)))
    }

    /// Reverse sweep from a scalar loss node. Returns flat parameter
    /// gradients for every net registered with the graph, in order.
    pub fn backward(&mut self, loss: NodeId) -> Result<NetGrads> {
        self.want_scalar(loss)?;
        let mut grads: NetGrads = self.nets.iter().map(|n| vec![0.0; n.num_params()]).collect();
        let mut adj: Vec<Payload> = self
            .nodes
            .iter()
            .map(|n| match &n.val {
                Payload::S(_) => Payload::S(0.0),
                Payload::V(v) => Payload::V(vec![0.0; v.len()]),
            })
            .collect();
        if let Payload::S(a) = &mut adj[loss.0] {
            *a = 1.0;
        }

        for i in (0..self.nodes.len()).rev() {
            let node_adj = adj[i].clone();
            let skip = match &node_adj {
                Payload::S(a) => *a == 0.0,
                Payload::V(v) => v.iter().all(|x| *x == 0.0),
            };
            if skip {
                continue;
            }
            // Mutation below only touches *earlier* adjoints and the grad
            // buffers, so cloning the op is safe and keeps the borrowck happy.
            let op = self.nodes[i].op.clone();
            match (op, node_adj) {
                (Op::ConstS, _) | (Op::ConstV, _) => {}
                (Op::Feature { net, .. }, Payload::V(c)) => {
                    let point = self.nodes[i].point.as_ref().expect("feature keeps point");
                    let trace = self.nodes[i].trace.as_ref().expect("feature keeps trace");
                    let _ = point;
                    self.nets[net].backward(trace, &c, Some(&mut grads[net]))?;
                }
                (Op::GradInput { net, t, cot }, Payload::V(w)) => {
                    // Value is v(theta, c) = J_phi(x; theta)^T c. For incoming
                    // cotangent w we need:
                    //   d<v, w>/dc     = J_phi w            (tangent of the dual forward)
                    //   d<v, w>/dtheta = tangent part of the dual reverse pass
                    // with the input tangent seeded along w.
                    let netref = self.nets[net];
                    let x = self.nodes[i].point.as_ref().expect("grad_input keeps point");
                    let xd: Vec<Dual> = x
                        .iter()
                        .zip(w.iter())
                        .map(|(&xv, &wv)| Dual::new(xv, wv))
                        .collect();
                    let trace_d = netref.forward_trace::<Dual>(&xd, t)?;
                    let jvp: Vec<f64> = trace_d.output().iter().map(|d| d.dv).collect();
                    // theta path
                    let cot_val: Vec<Dual> = self
                        .v(cot)
                        .iter()
                        .map(|&c| Dual::constant(c))
                        .collect();
                    let mut dp = vec![Dual::constant(0.0); netref.num_params()];
                    netref.backward(&trace_d, &cot_val, Some(&mut dp))?;
                    for (g, d) in grads[net].iter_mut().zip(dp.iter()) {
                        *g += d.dv;
                    }
                    // cot path
                    match &mut adj[cot.0] {
                        Payload::V(a) => {
                            for (slot, j) in a.iter_mut().zip(jvp.iter()) {
                                *slot += j;
                            }
                        }
                        Payload::S(_) => unreachable!("cot is a vector node"),
                    }
                }
                (Op::Dot(a, b), Payload::S(c)) => {
                    let bv = self.v(b).to_vec();
                    let av = self.v(a).to_vec();
                    self.add_vec_adj(&mut adj, a, &bv, c);
                    self.add_vec_adj(&mut adj, b, &av, c);
                }
                (Op::NormSq(a), Payload::S(c)) => {
                    let av = self.v(a).to_vec();
                    self.add_vec_adj(&mut adj, a, &av, 2.0 * c);
                }
                (Op::Norm(a), Payload::S(c)) => {
                    let av = self.v(a).to_vec();
                    let r = self.s_of(i);
                    if r > 0.0 {
                        self.add_vec_adj(&mut adj, a, &av, c / r);
                    }
                    // r == 0: subgradient 0
                }
                (Op::Exp(a), Payload::S(c)) => {
                    let y = self.s_of(i);
                    self.add_s_adj(&mut adj, a, c * y);
                }
                (Op::Relu(a), Payload::S(c)) => {
                    if self.s(a) > 0.0 {
                        self.add_s_adj(&mut adj, a, c);
                    }
                }
                (Op::ClampMax(a, cap), Payload::S(c)) => {
                    if self.s(a) <= cap {
                        self.add_s_adj(&mut adj, a, c);
                    }
                }
                (Op::Add(a, b), Payload::S(c)) => {
                    self.add_s_adj(&mut adj, a, c);
                    self.add_s_adj(&mut adj, b, c);
                }
                (Op::Sub(a, b), Payload::S(c)) => {
                    self.add_s_adj(&mut adj, a, c);
                    self.add_s_adj(&mut adj, b, -c);
                }
                (Op::Mul(a, b), Payload::S(c)) => {
                    let (av, bv) = (self.s(a), self.s(b));
                    self.add_s_adj(&mut adj, a, c * bv);
                    self.add_s_adj(&mut adj, b, c * av);
                }
                (Op::Div(a, b), Payload::S(c)) => {
                    let (av, bv) = (self.s(a), self.s(b));
                    self.add_s_adj(&mut adj, a, c / bv);
                    self.add_s_adj(&mut adj, b, -c * av / (bv * bv));
                }
                (Op::Scale(a, k), Payload::S(c)) => {
                    self.add_s_adj(&mut adj, a, c * k);
                }
                (Op::AddConst(a, _), Payload::S(c)) => {
                    self.add_s_adj(&mut adj, a, c);
                }
                (Op::MeanS(items), Payload::S(c)) => {
                    let share = c / items.len() as f64;
                    for id in items {
                        self.add_s_adj(&mut adj, id, share);
                    }
                }
                (Op::MeanV(items), Payload::V(c)) => {
                    let share: Vec<f64> = c.iter().map(|x| x / items.len() as f64).collect();
                    for id in items {
                        self.add_vec_adj(&mut adj, id, &share, 1.0);
                    }
                }
                (Op::AddV(a, b), Payload::V(c)) => {
                    self.add_vec_adj(&mut adj, a, &c, 1.0);
                    self.add_vec_adj(&mut adj, b, &c, 1.0);
                }
                (Op::SubV(a, b), Payload::V(c)) => {
                    self.add_vec_adj(&mut adj, a, &c, 1.0);
                    self.add_vec_adj(&mut adj, b, &c, -1.0);
                }
                (Op::ScaleV(a, k), Payload::V(c)) => {
                    self.add_vec_adj(&mut adj, a, &c, k);
                }
                (Op::MulSV(s, a), Payload::V(c)) => {
                    let av = self.v(a).to_vec();
                    let sv = self.s(s);
                    let dot: f64 = c.iter().zip(av.iter()).map(|(x, y)| x * y).sum();
                    self.add_s_adj(&mut adj, s, dot);
                    self.add_vec_adj(&mut adj, a, &c, sv);
                }
                _ => {
                    return Err(Error::Unsupported(
                        "node payload does not match operation".into(),
                    ))
                }
            }
        }
        Ok(grads)
    }

    fn s_of(&self, idx: usize) -> f64 {
        match &self.nodes[idx].val {
            Payload::S(v) => *v,
            Payload::V(_) => unreachable!(),
        }
    }

    fn add_s_adj(&self, adj: &mut [Payload], id: NodeId, c: f64) {
        match &mut adj[id.0] {
            Payload::S(a) => *a += c,
            Payload::V(_) => unreachable!("scalar adjoint into vector node"),
        }
    }

    fn add_vec_adj(&self, adj: &mut [Payload], id: NodeId, c: &[f64], k: f64) {
        match &mut adj[id.0] {
            Payload::V(a) => {
                for (slot, x) in a.iter_mut().zip(c.iter()) {
                    *slot += k * x;
                }
            }
            Payload::S(_) => unreachable!("vector adjoint into scalar node"),
        }
    }
}

/// Evaluate a scalar program over feature networks and return its value and
/// the exact gradient with respect to every parameter of every net.
///
/// The program may contain one level of nested differentiation through
/// [`Graph::grad_input`] (the gradient-penalty pattern).
pub fn loss_grad_params<F>(nets: &[&FeatureNet], build: F) -> Result<(f64, NetGrads)>
where
    F: FnOnce(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new(nets);
    let loss = build(&mut g)?;
    let value = g.scalar_value(loss)?;
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, FeatureNet, LayerSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(dim: usize) -> FeatureNet {
        let mut net = FeatureNet::new(
            dim,
            0,
            vec![LayerSpec {
                in_dim: dim,
                out_dim: dim,
                activation: Activation::Identity,
            }],
        )
        .unwrap();
        let mut p = vec![0.0; net.num_params()];
        for i in 0..dim {
            p[i * dim + i] = 1.0;
        }
        net.set_params(&p).unwrap();
        net
    }

    #[test]
    fn norm_sq_bias_gradient_hand_value() {
        // loss = ||phi(x)||^2 for identity net, x = [3, 4]: d/d bias = 2 [3, 4]
        let net = identity_net(2);
        let (value, grads) = loss_grad_params(&[&net], |g| {
            let f = g.feature(0, &[3.0, 4.0], 0.0)?;
            g.norm_sq(f)
        })
        .unwrap();
        assert!((value - 25.0).abs() < 1e-12);
        // layout: W (4 entries) then bias (2)
        assert!((grads[0][4] - 6.0).abs() < 1e-12);
        assert!((grads[0][5] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let net = identity_net(2);
        let (value, grads) = loss_grad_params(&[&net], |g| Ok(g.constant(7.5))).unwrap();
        assert_eq!(value, 7.5);
        assert!(grads[0].iter().all(|g| *g == 0.0));
    }

    fn loss_value(net: &FeatureNet, builder: impl Fn(&mut Graph) -> Result<NodeId>) -> f64 {
        let mut g = Graph::new(&[net]);
        let id = builder(&mut g).unwrap();
        g.scalar_value(id).unwrap()
    }

    /// Generic finite-difference check over all parameters of `net`.
    fn assert_fd(
        net: &FeatureNet,
        builder: impl Fn(&mut Graph) -> Result<NodeId> + Copy,
        rel_tol: f64,
    ) {
        let (_, grads) = loss_grad_params(&[net], builder).unwrap();
        let h = 1e-5;
        let mut pert = net.clone();
        for p in 0..net.num_params() {
            let orig = net.params()[p];
            pert.params_mut()[p] = orig + h;
            let up = loss_value(&pert, builder);
            pert.params_mut()[p] = orig - h;
            let down = loss_value(&pert, builder);
            pert.params_mut()[p] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = grads[0][p].abs().max(fd.abs()).max(1e-4);
            assert!(
                (grads[0][p] - fd).abs() / denom < rel_tol,
                "param {p}: analytic {} vs fd {fd}",
                grads[0][p]
            );
        }
    }

    #[test]
    fn first_order_program_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let mut net = FeatureNet::mlp(2, 4, &[6, 6], 3, Activation::Gelu).unwrap();
            net.init(&mut rng);
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = rng.gen_range(0.0..1.0);
            let xb = x.clone();
            let yb = y.clone();
            // loss = exp(<phi(x), phi(y)>) + mean(||phi(x)||^2, ||phi(y)||^2)
            let builder = move |g: &mut Graph| -> Result<NodeId> {
                let fx = g.feature(0, &xb, t)?;
                let fy = g.feature(0, &yb, t)?;
                let d = g.dot(fx, fy)?;
                let e = g.exp(d)?;
                let nx = g.norm_sq(fx)?;
                let ny = g.norm_sq(fy)?;
                let m = g.mean_scalars(&[nx, ny])?;
                g.add(e, m)
            };
            assert_fd(&net, &builder, 1e-5);
        }
    }

    #[test]
    fn nested_gradient_program_matches_fd() {
        // loss = (||J^T c(theta)|| - 1)^2 with c = phi(y): full gradient-penalty shape
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let mut net = FeatureNet::mlp(2, 4, &[6, 5], 3, Activation::Gelu).unwrap();
            net.init(&mut rng);
            let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = rng.gen_range(0.0..1.0);
            let zb = z.clone();
            let yb = y.clone();
            let builder = move |g: &mut Graph| -> Result<NodeId> {
                let c = g.feature(0, &yb, t)?;
                let gi = g.grad_input(0, &zb, t, c)?;
                let n = g.norm(gi)?;
                let n1 = g.add_const(n, -1.0)?;
                g.mul(n1, n1)
            };
            assert_fd(&net, &builder, 1e-4);
        }
    }

    #[test]
    fn grad_input_constant_cotangent_matches_fd() {
        // Pure second-order path: cotangent independent of parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut net = FeatureNet::mlp(3, 0, &[7], 4, Activation::Gelu).unwrap();
            net.init(&mut rng);
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zb = z.clone();
            let cb = c.clone();
            let builder = move |g: &mut Graph| -> Result<NodeId> {
                let cn = g.constant_vec(&cb);
                let gi = g.grad_input(0, &zb, 0.0, cn)?;
                g.norm_sq(gi)
            };
            assert_fd(&net, &builder, 1e-4);
        }
    }

    #[test]
    fn clamp_guards_exp() {
        let net = identity_net(1);
        let (value, grads) = loss_grad_params(&[&net], |g| {
            let f = g.feature(0, &[50.0], 0.0)?;
            let c = g.constant_vec(&[1.0]);
            let h = g.dot(f, c)?;
            let hc = g.clamp_max(h, 20.0)?;
            g.exp(hc)
        })
        .unwrap();
        assert!((value - 20f64.exp()).abs() < 1e-6);
        // clamp active -> zero gradient through it
        assert!(grads[0].iter().all(|g| *g == 0.0));
    }
}
