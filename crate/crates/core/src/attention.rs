//! Region-guided multi-head attention and the plain head-interaction
//! attention that follows it.
//!
//! Per head `h` the gating mask is the outer product `M = m mᵀ` of the head's
//! mask vector, the region gate is `G = σ(λ(M − θ))`, and the gate multiplies
//! the scaled scores before the softmax. Head contexts are scaled by the
//! layer's head weights, concatenated, and projected.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Linear, NodeId, ParamStore, Tape, Tensor};

/// Query/key/value/output projections of one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    /// `key_bias = false` drops the key bias, which plain softmax attention
    /// cannot see (it shifts every score in a row by the same amount).
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, key_bias: bool, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let key = if key_bias {
            Linear::new(store, &format!("{name}.key"), dim, dim, rng)?
        } else {
            Linear::without_bias(store, &format!("{name}.key"), dim, dim, rng)?
        };
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// How pre-softmax scores are gated.
#[derive(Clone, Copy, Debug)]
pub enum Gating {
    /// Ordinary attention.
    Plain,
    /// Scores multiplied by an all-ones gate.
    Ones,
    /// Scores multiplied by the raw gating mask `M^h`.
    Static { mask: NodeId },
    /// `G^h = σ(λ^h (M^h − θ^h))`; `lambda` and `theta` are `1×H` rows.
    Region {
        mask: NodeId,
        lambda: NodeId,
        theta: NodeId,
        log_domain: bool,
    },
}

#[derive(Clone, Debug)]
pub struct AttentionNodes {
    pub output: NodeId,
    /// Per-head gate `G^h` (absent for [`Gating::Plain`]).
    pub gates: Vec<NodeId>,
    /// Per-head attention weights after the softmax.
    pub weights: Vec<NodeId>,
}

/// `M = m mᵀ` for a mask vector `m`.
pub fn gating_mask(m: &[f64]) -> Tensor {
    let n = m.len();
    let mut data = Vec::with_capacity(n * n);
    for &a in m {
        data.extend(m.iter().map(|&b| a * b));
    }
    Tensor::new(vec![n, n], data).expect("square gate")
}

/// `G = σ(λ(M − θ))` elementwise.
pub fn region_gate(mask: &Tensor, lambda: f64, theta: f64) -> Tensor {
    mask.map(|m| sigmoid(lambda * (m - theta)))
}

/// Gate logits `λ(M − θ)`.
fn gate_logits(t: &mut Tape, m: NodeId, lambda: NodeId, theta: NodeId) -> Result<NodeId> {
    let neg_theta = t.scale(theta, -1.0)?;
    let shifted = t.add_scalar(m, neg_theta)?;
    t.mul_scalar(shifted, lambda)
}

/// Multi-head self-attention over `x: T×D` with optional region gating and
/// per-head output weights `head_weights: 1×H`.
pub fn rg_mha(
    t: &mut Tape,
    x: NodeId,
    gating: Gating,
    head_weights: Option<NodeId>,
    params: &AttentionParams,
) -> Result<AttentionNodes> {
    let tokens = t.value(x).rows();
    let heads = params.heads;
    let d = params.head_dim();
    let mask = match gating {
        Gating::Static { mask } | Gating::Region { mask, .. } => Some(mask),
        _ => None,
    };
    if let Some(mask) = mask {
        let shape = t.value(mask).shape();
        if shape != [heads, tokens] {
            return Err(Error::shape("rg_mha mask", shape, &[heads, tokens]));
        }
    }
    if let Some(w) = head_weights {
        if t.value(w).shape() != [1, heads] {
            return Err(Error::shape("rg_mha head weights", t.value(w).shape(), &[1, heads]));
        }
    }

    let q = params.query.forward(t, x)?;
    let k = params.key.forward(t, x)?;
    let v = params.value.forward(t, x)?;
    let ones = match gating {
        Gating::Ones => Some(t.input(Tensor::ones(&[tokens, tokens]))?),
        _ => None,
    };
    let scale = 1.0 / (d as f64).sqrt();

    let mut contexts = Vec::with_capacity(heads);
    let mut gates = Vec::new();
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * d, d)?;
        let kh = t.slice_cols(k, h * d, d)?;
        let vh = t.slice_cols(v, h * d, d)?;
        let raw = t.matmul_t(qh, kh)?;
        let scores = t.scale(raw, scale)?;
        let gated = match gating {
            Gating::Plain => scores,
            Gating::Ones => {
                let g = ones.expect("ones gate");
                gates.push(g);
                t.mul(scores, g)?
            }
            Gating::Static { mask } => {
                let mh = t.slice_rows(mask, h, 1)?;
                let m = t.outer(mh, mh)?;
                gates.push(m);
                t.mul(scores, m)?
            }
            Gating::Region {
                mask,
                lambda,
                theta,
                log_domain,
            } => {
                let mh = t.slice_rows(mask, h, 1)?;
                let m = t.outer(mh, mh)?;
                let lh = t.index(lambda, h)?;
                let th = t.index(theta, h)?;
                let z = gate_logits(t, m, lh, th)?;
                let g = t.sigmoid(z)?;
                gates.push(g);
                if log_domain {
                    let log_g = t.log_sigmoid(z)?;
                    t.add(scores, log_g)?
                } else {
                    t.mul(scores, g)?
                }
            }
        };
        let attn = t.softmax_rows(gated)?;
        weights.push(attn);
        let mut ctx = t.matmul(attn, vh)?;
        if let Some(w) = head_weights {
            let wh = t.index(w, h)?;
            ctx = t.mul_scalar(ctx, wh)?;
        }
        contexts.push(ctx);
    }
    let merged = t.concat_cols(&contexts)?;
    let output = params.output.forward(t, merged)?;
    Ok(AttentionNodes { output, gates, weights })
}

/// Ungated multi-head self-attention with its own parameters.
pub fn head_interaction(t: &mut Tape, x: NodeId, params: &AttentionParams) -> Result<NodeId> {
    Ok(rg_mha(t, x, Gating::Plain, None, params)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, heads: usize, seed: u64) -> (ParamStore, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "attn", dim, heads, true, &mut rng).unwrap();
        for lin in [p.query, p.key, p.value, p.output] {
            let b = lin.bias.unwrap();
            let n = store.value(b).len();
            store.get_mut(b).value = Tensor::row((0..n).map(|_| rng.random_range(-0.3..0.3)).collect());
        }
        (store, p)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn gating_mask_examples() {
        assert_eq!(gating_mask(&[0.0, 1.0]).data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(gating_mask(&[0.0; 3]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn region_gate_examples() {
        let m = Tensor::from_rows(&[vec![0.3, 1.0], vec![0.0, 0.7]]).unwrap();
        assert_eq!(region_gate(&m, 7.0, 0.3).get(0, 0), 0.5);
        assert!(region_gate(&m, 0.0, 0.3).data().iter().all(|&g| g == 0.5));
        let g = region_gate(&m, 10.0, 0.5).get(0, 1);
        assert!((g - sigmoid(5.0)).abs() < 1e-15 && (g - 0.99331).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn gating_mask_is_rank_one_psd(m in proptest::collection::vec(0.0f64..=1.0, 1..12),
                                       v in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let n = m.len();
            let mm = gating_mask(&m);
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(mm.get(i, j), mm.get(j, i));
                    quad += v[i] * mm.get(i, j) * v[j];
                }
            }
            let dot: f64 = m.iter().zip(&v).map(|(a, b)| a * b).sum();
            prop_assert!((quad - dot * dot).abs() <= 1e-10);
            prop_assert!(quad >= -1e-12);
        }

        #[test]
        fn gate_order_follows_mask(m in proptest::collection::vec(0.0f64..=1.0, 2..10),
                                   lambda in 0.01f64..20.0, theta in 0.0f64..1.0) {
            let mm = gating_mask(&m);
            let g = region_gate(&mm, lambda, theta);
            for (a, ga) in mm.data().iter().zip(g.data()) {
                prop_assert!(*ga > 0.0 && *ga < 1.0 || lambda * (a - theta).abs() > 30.0);
                for (b, gb) in mm.data().iter().zip(g.data()) {
                    if a < b {
                        prop_assert!(ga <= gb);
                    }
                }
            }
        }
    }

    /// Independent plain multi-head attention on tensors.
    fn reference_mha(store: &ParamStore, p: &AttentionParams, x: &Tensor) -> Tensor {
        let q = p.query.apply(store, x).unwrap();
        let k = p.key.apply(store, x).unwrap();
        let v = p.value.apply(store, x).unwrap();
        let (n, d) = (x.rows(), p.head_dim());
        let mut merged = Tensor::zeros(&[n, p.dim]);
        for h in 0..p.heads {
            for i in 0..n {
                let mut s: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|c| q.get(i, h * d + c) * k.get(j, h * d + c)).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter_mut().map(|v| {
                    *v = (*v - mx).exp();
                    *v
                }).sum();
                for c in 0..d {
                    let val: f64 = (0..n).map(|j| s[j] / z * v.get(j, h * d + c)).sum();
                    merged.set(i, h * d + c, val);
                }
            }
        }
        p.output.apply(store, &merged).unwrap()
    }

    #[test]
    fn unit_gates_reduce_to_plain_attention() {
        for seed in 0..10 {
            let (store, p) = setup(12, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = random(&mut rng, 5, 12, -1.0, 1.0);
            let mut t = Tape::new(&store);
            let xi = t.input(x.clone()).unwrap();
            let w = t.input(Tensor::ones(&[1, 3])).unwrap();
            let out = rg_mha(&mut t, xi, Gating::Ones, Some(w), &p).unwrap();
            let reference = reference_mha(&store, &p, &x);
            for (a, b) in t.value(out.output).data().iter().zip(reference.data()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_head_weight_silences_value_path() {
        let (mut store, p) = setup(8, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 4, 8, -1.0, 1.0);
        let run = |store: &ParamStore| {
            let mut t = Tape::new(store);
            let xi = t.input(x.clone()).unwrap();
            let w = t.input(Tensor::row(vec![0.0, 1.3])).unwrap();
            let out = rg_mha(&mut t, xi, Gating::Plain, Some(w), &p).unwrap();
            t.value(out.output).clone()
        };
        let before = run(&store);
        // Zero the value weights and bias feeding head 0 (columns 0..4).
        let wv = store.get_mut(p.value.weight);
        for r in 0..8 {
            for c in 0..4 {
                wv.value.set(r, c, 0.0);
            }
        }
        let bv = store.get_mut(p.value.bias.unwrap());
        for c in 0..4 {
            bv.value.set(0, c, 0.0);
        }
        assert_eq!(before, run(&store));
    }

    #[test]
    fn single_token_returns_value_row() {
        let (store, p) = setup(6, 2, 1);
        let x = Tensor::row(vec![0.2, -0.1, 0.5, 0.9, -0.4, 0.3]);
        let mut t = Tape::new(&store);
        let xi = t.input(x.clone()).unwrap();
        let out = rg_mha(&mut t, xi, Gating::Plain, None, &p).unwrap();
        for w in &out.weights {
            assert_eq!(t.value(*w).data(), &[1.0]);
        }
        let v = p.value.apply(&store, &x).unwrap();
        let expected = p.output.apply(&store, &v).unwrap();
        for (a, b) in t.value(out.output).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_gate_row_is_constant() {
        let (store, p) = setup(8, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 5, 8, -1.0, 1.0);
        let mut masks = random(&mut rng, 2, 5, 0.0, 1.0);
        masks.set(0, 0, 0.0);
        masks.set(1, 0, 0.0);
        let (lam, th) = ([3.5, 0.7], [0.3, 0.45]);
        let mut t = Tape::new(&store);
        let xi = t.input(x).unwrap();
        let mask = t.input(masks).unwrap();
        let lambda = t.input(Tensor::row(lam.to_vec())).unwrap();
        let theta = t.input(Tensor::row(th.to_vec())).unwrap();
        let gating = Gating::Region {
            mask,
            lambda,
            theta,
            log_domain: false,
        };
        let out = rg_mha(&mut t, xi, gating, None, &p).unwrap();
        for h in 0..2 {
            let g = t.value(out.gates[h]);
            let expected = sigmoid(-lam[h] * th[h]);
            for j in 0..5 {
                assert_eq!(g.get(0, j), expected);
                assert_eq!(g.get(j, 0), expected);
            }
            assert_eq!(g, &g.transpose().unwrap());
        }
    }

    #[test]
    fn head_interaction_properties() {
        let (mut store, p) = setup(8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 6, 8, -1.0, 1.0);

        let mut t = Tape::new(&store);
        let xi = t.input(x.clone()).unwrap();
        let out = rg_mha(&mut t, xi, Gating::Plain, None, &p).unwrap();
        for w in &out.weights {
            for r in 0..6 {
                assert!((t.value(*w).row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let base = t.value(out.output).clone();

        // Permuting tokens permutes outputs.
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut t = Tape::new(&store);
        let xi = t.input(xp).unwrap();
        let y = head_interaction(&mut t, xi, &p).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((t.value(y).get(r, c) - base.get(i, c)).abs() < 1e-12);
            }
        }

        // Zero value weights leave only the bias path.
        let zero = Tensor::zeros(&[8, 8]);
        store.get_mut(p.value.weight).value = zero.clone();
        let bias_v = store.value(p.value.bias.unwrap()).clone();
        let bias_o = store.value(p.output.bias.unwrap()).clone();
        store.get_mut(p.output.weight).value = {
            let mut eye = zero;
            for i in 0..8 {
                eye.set(i, i, 1.0);
            }
            eye
        };
        let mut t = Tape::new(&store);
        let xi = t.input(x).unwrap();
        let y = head_interaction(&mut t, xi, &p).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                let expected = bias_v.data()[c] + bias_o.data()[c];
                assert!((t.value(y).get(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "attn", 8, 2, true, &mut rng).unwrap();
        let x = store.add_normal("x", &[5, 8], 1.0, &mut rng).unwrap();
        let mut mv = random(&mut rng, 2, 5, 0.0, 1.0);
        mv.set(0, 0, 0.0);
        mv.set(1, 0, 0.0);
        let mask = store.add("mask", mv).unwrap();
        let lambda = store.add("lambda", Tensor::row(vec![2.0, 4.5])).unwrap();
        let theta = store.add("theta", Tensor::row(vec![0.3, 0.2])).unwrap();
        let w = store.add("w", Tensor::row(vec![0.8, 1.2])).unwrap();
        let probe = random(&mut rng, 5, 8, -1.0, 1.0);
        for log_domain in [false, true] {
            let run = |s: &ParamStore| -> Result<(f64, Vec<Tensor>)> {
                let mut t = Tape::new(s);
                let xi = t.param(x);
                let gating = Gating::Region {
                    mask: t.param(mask),
                    lambda: t.param(lambda),
                    theta: t.param(theta),
                    log_domain,
                };
                let wi = t.param(w);
                let out = rg_mha(&mut t, xi, gating, Some(wi), &p)?;
                let pr = t.input(probe.clone())?;
                let y = t.mul(out.output, pr)?;
                let l = t.sum_all(y)?;
                Ok((t.value(l).item(), t.backward_scalar(l)?.into_dense(s)))
            };
            let (_, grads) = run(&store).unwrap();
            let report = grad_check(&store, &grads, 1e-5, |s| Ok(run(s)?.0)).unwrap();
            for c in &report.params {
                if log_domain && c.name == "attn.key.bias" {
                    // Additive gating leaves the key bias as a per-row score shift.
                    assert!(grads[p.key.bias.unwrap().index()].max_abs() < 1e-12);
                } else {
                    assert!(c.max_rel_error <= 1e-6, "{report}");
                }
            }
        }
    }

    #[test]
    fn mask_width_mismatch_is_an_error() {
        let (store, p) = setup(8, 2, 0);
        let mut t = Tape::new(&store);
        let xi = t.input(Tensor::zeros(&[5, 8])).unwrap();
        let mask = t.input(Tensor::zeros(&[2, 4])).unwrap();
        let r = rg_mha(&mut t, xi, Gating::Static { mask }, None, &p);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
