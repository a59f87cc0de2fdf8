//! Layer-aware mask modulation.
//!
//! One shared controller runs once per layer. It pools the block input into a
//! global feature, fuses it with a learned layer-position row into a context
//! vector `C_l`, and from that context produces:
//!
//! * region scores `α_l = σ(RSE(C_l))`,
//! * memory gates `(γ_l, β_l) = σ(MCU(C_l, W_{l−1}, α_l))`,
//! * head weights `W_l = γ_l ⊙ α_l + β_l ⊙ W_{l−1}` with `W_0 = 1`,
//! * gate strengths `λ_l = softplus(FC(C_l)) ⊙ softplus(MLP(C_l, W_l))`,
//! * thresholds `θ_l = θ_base + 0.25·tanh(MLP(C_l, W_l))`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{LayerNorm, Linear, Mlp, NodeId, ParamId, ParamStore, Tape, Tensor};

/// Maximum deviation of `θ_l` from `θ_base`.
pub const THETA_RANGE: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Lamm {
    pub pool_query: ParamId,
    pub pool_proj: Linear,
    pub pool_norm: LayerNorm,
    pub layer_embedding: ParamId,
    pub context_mlp: Mlp,
    pub context_norm: LayerNorm,
    pub rse: Mlp,
    pub mcu: Mlp,
    pub mpg_fc: Linear,
    pub mpg_lambda: Mlp,
    pub mpg_theta: Mlp,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub theta_base: f64,
}

/// Everything one controller step records on the tape; all `1×·` rows.
#[derive(Clone, Copy, Debug)]
pub struct LayerModulation {
    pub global: NodeId,
    pub context: NodeId,
    pub alpha: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub weights: NodeId,
    pub lambda: NodeId,
    pub theta: NodeId,
}

impl Lamm {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        layers: usize,
        theta_base: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 {
            return Err(Error::Config("controller needs at least one layer and one head".into()));
        }
        let std = (1.0 / dim as f64).sqrt();
        Ok(Self {
            pool_query: store.add_normal("lamm.lce.pool_query", &[1, dim], std, rng)?,
            pool_proj: Linear::new(store, "lamm.lce.pool_proj", 2 * dim, dim, rng)?,
            pool_norm: LayerNorm::new(store, "lamm.lce.pool_norm", dim)?,
            layer_embedding: store.add_normal("lamm.lce.layer_embedding", &[layers, dim], 1.0, rng)?,
            context_mlp: Mlp::standard(store, "lamm.lce.context", 2 * dim, dim, rng)?,
            context_norm: LayerNorm::new(store, "lamm.lce.context_norm", dim)?,
            rse: Mlp::standard(store, "lamm.rse", dim, heads, rng)?,
            mcu: Mlp::standard(store, "lamm.mcu", dim + 2 * heads, 2 * heads, rng)?,
            mpg_fc: Linear::new(store, "lamm.mpg.fc", dim, heads, rng)?,
            mpg_lambda: Mlp::standard(store, "lamm.mpg.lambda", dim + heads, heads, rng)?,
            mpg_theta: Mlp::standard(store, "lamm.mpg.theta", dim + heads, heads, rng)?,
            dim,
            heads,
            layers,
            theta_base,
        })
    }

    /// Sets the output biases of both strength factors to `softplus⁻¹(√λ0)`,
    /// so that λ starts near `λ0` while the weights are small.
    pub fn set_initial_strength(&self, store: &mut ParamStore, lambda0: f64) -> Result<()> {
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return Err(Error::Config(format!("initial gate strength must be positive, got {lambda0}")));
        }
        let b = lambda0.sqrt().exp_m1().ln();
        for linear in [self.mpg_fc, self.mpg_lambda.out] {
            let id = linear.bias.expect("strength layers have biases");
            store.get_mut(id).value = Tensor::filled(&[1, self.heads], b);
        }
        Ok(())
    }

    /// Softmax-weighted token average with scores `X·q/√D`.
    pub fn attention_pool(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        let q = t.param(self.pool_query);
        let scores = t.matmul_t(q, x)?;
        let scores = t.scale(scores, 1.0 / (self.dim as f64).sqrt())?;
        let weights = t.softmax_rows(scores)?;
        t.matmul(weights, x)
    }

    /// `g_l = LN(Linear([mean(X), attnpool(X)]))`.
    pub fn pool_global(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        let avg = t.mean_rows(x)?;
        let att = self.attention_pool(t, x)?;
        let both = t.concat_cols(&[avg, att])?;
        let proj = self.pool_proj.forward(t, both)?;
        self.pool_norm.forward(t, proj)
    }

    /// `C_l = LN(MLP([g_l, PE_l]))`.
    pub fn layer_context(&self, t: &mut Tape, global: NodeId, layer: usize) -> Result<NodeId> {
        if layer >= self.layers {
            return Err(Error::Config(format!("layer {layer} out of range for {} layers", self.layers)));
        }
        let table = t.param(self.layer_embedding);
        let pe = t.slice_rows(table, layer, 1)?;
        let joined = t.concat_cols(&[global, pe])?;
        let hidden = self.context_mlp.forward(t, joined)?;
        self.context_norm.forward(t, hidden)
    }

    pub fn rse(&self, t: &mut Tape, context: NodeId) -> Result<NodeId> {
        let s = self.rse.forward(t, context)?;
        t.sigmoid(s)
    }

    /// Returns `(γ, β)`.
    pub fn mcu(&self, t: &mut Tape, context: NodeId, w_prev: NodeId, alpha: NodeId) -> Result<(NodeId, NodeId)> {
        let joined = t.concat_cols(&[context, w_prev, alpha])?;
        let s = self.mcu.forward(t, joined)?;
        let s = t.sigmoid(s)?;
        Ok((t.slice_cols(s, 0, self.heads)?, t.slice_cols(s, self.heads, self.heads)?))
    }

    pub fn mpg_lambda(&self, t: &mut Tape, context: NodeId, weights: NodeId) -> Result<NodeId> {
        let direct = self.mpg_fc.forward(t, context)?;
        let direct = t.softplus(direct)?;
        let joined = t.concat_cols(&[context, weights])?;
        let mixed = self.mpg_lambda.forward(t, joined)?;
        let mixed = t.softplus(mixed)?;
        t.mul(direct, mixed)
    }

    pub fn mpg_theta(&self, t: &mut Tape, context: NodeId, weights: NodeId) -> Result<NodeId> {
        let joined = t.concat_cols(&[context, weights])?;
        let raw = self.mpg_theta.forward(t, joined)?;
        let bounded = t.tanh(raw)?;
        let offset = t.scale(bounded, THETA_RANGE)?;
        let base = t.input(Tensor::scalar(self.theta_base))?;
        t.add_scalar(offset, base)
    }

    /// Initial head weights `W_0`.
    pub fn initial_weights(&self, t: &mut Tape) -> Result<NodeId> {
        t.input(Tensor::ones(&[1, self.heads]))
    }

    /// One controller step for block `layer` given its input tokens.
    pub fn step(&self, t: &mut Tape, x: NodeId, layer: usize, w_prev: NodeId) -> Result<LayerModulation> {
        let global = self.pool_global(t, x)?;
        let context = self.layer_context(t, global, layer)?;
        let alpha = self.rse(t, context)?;
        let (gamma, beta) = self.mcu(t, context, w_prev, alpha)?;
        let weights = update_weights_on_tape(t, alpha, gamma, beta, w_prev)?;
        let lambda = self.mpg_lambda(t, context, weights)?;
        let theta = self.mpg_theta(t, context, weights)?;
        Ok(LayerModulation {
            global,
            context,
            alpha,
            gamma,
            beta,
            weights,
            lambda,
            theta,
        })
    }
}

/// `W = γ ⊙ α + β ⊙ W_prev`.
pub fn update_weights(alpha: &[f64], gamma: &[f64], beta: &[f64], w_prev: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .zip(gamma)
        .zip(beta.iter().zip(w_prev))
        .map(|((a, g), (b, w))| g * a + b * w)
        .collect()
}

pub fn update_weights_on_tape(t: &mut Tape, alpha: NodeId, gamma: NodeId, beta: NodeId, w_prev: NodeId) -> Result<NodeId> {
    let fresh = t.mul(gamma, alpha)?;
    let kept = t.mul(beta, w_prev)?;
    t.add(fresh, kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, softplus, LN_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;
    const H: usize = 4;
    const L: usize = 3;

    fn build(seed: u64) -> (ParamStore, Lamm) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lamm = Lamm::new(&mut store, D, H, L, 0.3, &mut rng).unwrap();
        // Non-zero biases so every path is exercised.
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.get(id).name().ends_with(".bias") {
                let n = store.value(id).len();
                store.get_mut(id).value = Tensor::row((0..n).map(|_| rng.random_range(-0.2..0.2)).collect());
            }
        }
        (store, lamm)
    }

    fn tokens(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, D], (0..n * D).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_all(store: &mut ParamStore, prefix: &str) {
        for p in store.iter_mut() {
            if p.name().starts_with(prefix) {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }

    #[test]
    fn attention_pool_examples() {
        let (mut store, lamm) = build(0);
        let row: Vec<f64> = (0..D).map(|i| i as f64 * 0.1 - 0.3).collect();
        let same = Tensor::from_rows(&vec![row.clone(); 5]).unwrap();
        let mut t = Tape::new(&store);
        let x = t.input(same).unwrap();
        let p = lamm.attention_pool(&mut t, x).unwrap();
        for (a, b) in t.value(p).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }

        store.get_mut(lamm.pool_query).value = Tensor::zeros(&[1, D]);
        let x = tokens(3, 6);
        let mut t = Tape::new(&store);
        let xi = t.input(x.clone()).unwrap();
        let p = lamm.attention_pool(&mut t, xi).unwrap();
        let mean = t.mean_rows(xi).unwrap();
        for (a, b) in t.value(p).data().iter().zip(t.value(mean).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_weights_sum_to_one() {
        let (store, lamm) = build(1);
        let x = tokens(5, 7);
        let q = store.value(lamm.pool_query);
        let scores: Vec<f64> = (0..7)
            .map(|i| x.row_slice(i).iter().zip(q.data()).map(|(a, b)| a * b).sum::<f64>() / (D as f64).sqrt())
            .collect();
        let w = Tensor::row(scores).softmax_rows();
        assert!((w.sum() - 1.0).abs() < 1e-9);
        let expected = w.matmul(&x).unwrap();
        let mut t = Tape::new(&store);
        let xi = t.input(x).unwrap();
        let p = lamm.attention_pool(&mut t, xi).unwrap();
        for (a, b) in t.value(p).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_pool_is_permutation_invariant() {
        let (store, lamm) = build(2);
        let x = tokens(8, 5);
        let perm = [4, 2, 0, 3, 1];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let g = |x: Tensor| {
            let mut t = Tape::new(&store);
            let xi = t.input(x).unwrap();
            let g = lamm.pool_global(&mut t, xi).unwrap();
            t.value(g).clone()
        };
        let (a, b) = (g(x), g(xp));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }

        // One token: both pools return it.
        let one = tokens(9, 1);
        let mut t = Tape::new(&store);
        let xi = t.input(one.clone()).unwrap();
        let avg = t.mean_rows(xi).unwrap();
        let att = lamm.attention_pool(&mut t, xi).unwrap();
        assert_eq!(t.value(avg), &one);
        for (u, v) in t.value(att).data().iter().zip(one.data()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn context_depends_on_layer_and_is_normalized() {
        let (mut store, lamm) = build(3);
        store.get_mut(lamm.context_norm.bias).value = Tensor::zeros(&[1, D]);
        let mut t = Tape::new(&store);
        let xi = t.input(tokens(1, 5)).unwrap();
        let g = lamm.pool_global(&mut t, xi).unwrap();
        let c: Vec<_> = (0..L).map(|l| lamm.layer_context(&mut t, g, l).unwrap()).collect();
        for i in 0..L {
            for j in i + 1..L {
                assert_ne!(t.value(c[i]), t.value(c[j]));
            }
        }
        // Recompute the pre-norm activations and compare the resulting variance.
        for (l, &ci) in c.iter().enumerate() {
            let pe = store.value(lamm.layer_embedding).row_slice(l).to_vec();
            let mut joined = t.value(g).data().to_vec();
            joined.extend(pe);
            let hid = lamm.context_mlp.hidden.apply(&store, &Tensor::row(joined)).unwrap().map(crate::numerics::gelu);
            let pre = lamm.context_mlp.out.apply(&store, &hid).unwrap();
            let m = pre.sum() / D as f64;
            let v = pre.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / D as f64;
            let out = t.value(ci);
            let om = out.sum() / D as f64;
            let ov = out.data().iter().map(|x| (x - om).powi(2)).sum::<f64>() / D as f64;
            assert!((ov - v / (v + LN_EPS)).abs() < 1e-6);
            assert!((ov - 1.0).abs() < 1e-3);
        }
        assert!(matches!(lamm.layer_context(&mut t, g, L), Err(Error::Config(_))));
    }

    #[test]
    fn zero_parameter_outputs() {
        let (mut store, lamm) = build(4);
        for prefix in ["lamm.rse", "lamm.mcu", "lamm.mpg"] {
            zero_all(&mut store, prefix);
        }
        let mut t = Tape::new(&store);
        let xi = t.input(tokens(2, 5)).unwrap();
        let w0 = lamm.initial_weights(&mut t).unwrap();
        let m = lamm.step(&mut t, xi, 0, w0).unwrap();
        let ln2sq = softplus(0.0) * softplus(0.0);
        assert!((ln2sq - 0.4805).abs() < 1e-4);
        for h in 0..H {
            assert_eq!(t.value(m.alpha).data()[h], 0.5);
            assert_eq!(t.value(m.gamma).data()[h], 0.5);
            assert_eq!(t.value(m.beta).data()[h], 0.5);
            assert_eq!(t.value(m.weights).data()[h], 0.75);
            assert_eq!(t.value(m.lambda).data()[h], ln2sq);
            assert_eq!(t.value(m.theta).data()[h], 0.3);
        }
    }

    #[test]
    fn update_weights_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let store = ParamStore::new();
        for _ in 0..200 {
            let n = rng.random_range(1..10);
            let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
            let (a, g, b, w) = (draw(0.0, 1.0), draw(0.0, 1.0), draw(0.0, 1.0), draw(-3.0, 3.0));
            let mut oracle = vec![0.0; n];
            for i in 0..n {
                oracle[i] = g[i] * a[i] + b[i] * w[i];
            }
            assert_eq!(update_weights(&a, &g, &b, &w), oracle);
            let mut t = Tape::new(&store);
            let ids: Vec<_> = [&a, &g, &b, &w].iter().map(|v| t.input(Tensor::row(v.to_vec())).unwrap()).collect();
            let out = update_weights_on_tape(&mut t, ids[0], ids[1], ids[2], ids[3]).unwrap();
            assert_eq!(t.value(out).data(), &oracle[..]);

            let ones = vec![1.0; n];
            let zeros = vec![0.0; n];
            assert_eq!(update_weights(&a, &ones, &zeros, &w), a);
            assert_eq!(update_weights(&a, &zeros, &ones, &w), w);
        }
    }

    #[test]
    fn recurrence_is_bounded_and_deterministic() {
        let (store, lamm) = build(5);
        let run = || {
            let mut t = Tape::new(&store);
            let xi = t.input(tokens(6, 5)).unwrap();
            let mut w = lamm.initial_weights(&mut t).unwrap();
            let mut out = Vec::new();
            for l in 0..L {
                let m = lamm.step(&mut t, xi, l, w).unwrap();
                let prev = t.value(w).max_abs();
                assert!(t.value(m.weights).max_abs() < prev + 1.0);
                for (&lam, &th) in t.value(m.lambda).data().iter().zip(t.value(m.theta).data()) {
                    assert!(lam >= 0.0);
                    assert!((th - 0.3).abs() <= THETA_RANGE);
                }
                for node in [m.alpha, m.gamma, m.beta] {
                    assert!(t.value(node).data().iter().all(|&v| v > 0.0 && v < 1.0));
                }
                out.push((t.value(m.weights).clone(), t.value(m.lambda).clone(), t.value(m.theta).clone()));
                w = m.weights;
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradients_pass_grad_check_and_reach_every_parameter() {
        let (mut store, lamm) = build(7);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = store.add_normal("x", &[5, D], 1.0, &mut rng).unwrap();
        let probes: Vec<Tensor> = (0..3 * L).map(|_| Tensor::row((0..H).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let run = |s: &ParamStore| -> Result<(f64, Vec<Tensor>)> {
            let mut t = Tape::new(s);
            let xi = t.param(x);
            let mut w = lamm.initial_weights(&mut t)?;
            let mut terms = Vec::new();
            for l in 0..L {
                let m = lamm.step(&mut t, xi, l, w)?;
                for (k, node) in [m.weights, m.lambda, m.theta].into_iter().enumerate() {
                    let p = t.input(probes[3 * l + k].clone())?;
                    let y = t.mul(node, p)?;
                    terms.push(t.sum_all(y)?);
                }
                w = m.weights;
            }
            let all = t.concat_cols(&terms)?;
            let total = t.sum_all(all)?;
            Ok((t.value(total).item(), t.backward_scalar(total)?.into_dense(s)))
        };
        let (_, grads) = run(&store).unwrap();
        let report = grad_check(&store, &grads, 1e-5, |s| Ok(run(s)?.0)).unwrap();
        assert!(report.max_rel_error() <= 1e-4, "{report}");
        for (p, g) in store.iter().zip(&grads) {
            assert!(g.max_abs() > 0.0, "{} has no gradient", p.name());
        }
    }
}
