use rand::Rng;

use super::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::Result;

/// `x·W + b`, with `W: in×out` and `b: 1×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/fan_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_std(store, name, fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), true, rng)
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_std(store, name, fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), false, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = t.param(self.weight);
        let y = t.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Plain tensor evaluation, used by reference implementations in tests.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(store.value(self.weight))?;
        if let Some(b) = self.bias {
            let bias = store.value(b).data().to_vec();
            let c = y.cols();
            for row in y.data_mut().chunks_mut(c) {
                for (v, b) in row.iter_mut().zip(&bias) {
                    *v += b;
                }
            }
        }
        Ok(y)
    }
}

/// Two-layer perceptron: linear → GELU → linear.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), fan_in, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.fc2"), hidden, fan_out, rng)?,
        })
    }

    /// Hidden width of twice the input width.
    pub fn standard(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(store, name, fan_in, 2 * fan_in, fan_out, rng)
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(t, x)?;
        let h = t.gelu(h)?;
        self.out.forward(t, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[1, dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
        let n = t.standardize(x)?;
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        let y = t.mul_row(n, g)?;
        t.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_and_zero_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 3, 3, &mut rng).unwrap();
        let mlp = Mlp::standard(&mut store, "mlp", 3, 2, &mut rng).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        store.get_mut(lin.weight).value = eye;
        for p in [mlp.hidden.weight, mlp.out.weight] {
            let shape = store.value(p).shape().to_vec();
            store.get_mut(p).value = Tensor::zeros(&shape);
        }
        store.get_mut(mlp.out.bias.unwrap()).value = Tensor::row(vec![0.25, -1.5]);

        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.1, 0.2, 0.3]]).unwrap();
        let mut t = Tape::new(&store);
        let xi = t.input(x.clone()).unwrap();
        let y = lin.forward(&mut t, xi).unwrap();
        assert_eq!(t.value(y), &x);
        let z = mlp.forward(&mut t, xi).unwrap();
        assert_eq!(t.value(z).data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    fn sum_mlp(store: &ParamStore, mlp: &Mlp, x: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut t = Tape::new(store);
        let xi = t.input(x.clone())?;
        let y = mlp.forward(&mut t, xi)?;
        let out = t.sum_all(y)?;
        let value = t.value(out).item();
        Ok((value, t.backward_scalar(out)?.into_dense(store)))
    }

    #[test]
    fn mlp_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mlp = Mlp::standard(&mut store, "mlp", 4, 3, &mut rng).unwrap();
        store.get_mut(mlp.hidden.bias.unwrap()).value = Tensor::row(vec![0.1, -0.2, 0.3, 0.05, -0.4, 0.2, 0.0, 0.6]);
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1, 0.05], vec![-0.4, 0.9, 0.2, -1.3]]).unwrap();
        let (_, grads) = sum_mlp(&store, &mlp, &x).unwrap();
        let report = grad_check(&store, &grads, 1e-5, |s| Ok(sum_mlp(s, &mlp, &x)?.0)).unwrap();
        assert!(report.max_rel_error() <= 1e-6, "{report}");
    }

    #[test]
    fn layer_norm_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5).unwrap();
        store.get_mut(ln.gain).value = Tensor::row(vec![0.5, 1.5, -0.3, 1.0, 2.0]);
        let x = store.add_normal("x", &[3, 5], 1.0, &mut rng).unwrap();
        let probe = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = |s: &ParamStore| -> Result<(f64, Vec<Tensor>)> {
            let mut t = Tape::new(s);
            let xi = t.param(x);
            let y = ln.forward(&mut t, xi)?;
            let p = t.input(probe.clone())?;
            let y = t.mul(y, p)?;
            let out = t.sum_all(y)?;
            Ok((t.value(out).item(), t.backward_scalar(out)?.into_dense(s)))
        };
        let (_, grads) = run(&store).unwrap();
        let report = grad_check(&store, &grads, 1e-5, |s| Ok(run(s)?.0)).unwrap();
        assert!(report.max_rel_error() <= 1e-6, "{report}");
    }
}
