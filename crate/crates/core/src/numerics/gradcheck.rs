use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Worst element of one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Maximum error over the parameters whose name starts with `prefix`.
    pub fn max_rel_error_for(&self, prefix: &str) -> Option<f64> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.max_rel_error)
            .reduce(f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<40} max_rel={:.3e} at [{}] analytic={:.6e} numeric={:.6e}",
                p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric
            )?;
        }
        Ok(())
    }
}

/// Finite-difference estimate used by [`grad_check_sampled`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+ε) − f(x−ε)) / 2ε`
    #[default]
    Central,
    /// `(4·D(ε/2) − D(ε)) / 3` with `D` the central difference; O(ε⁴) truncation error.
    Richardson,
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences
/// `(f(x+ε) − f(x−ε)) / 2ε` for every scalar of every parameter.
///
/// Parameters are checked in parallel; each worker perturbs its own copy of
/// the store.
pub fn grad_check<F>(store: &ParamStore, analytic: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync + Send,
{
    grad_check_sampled(store, analytic, eps, None, Stencil::Central, f)
}

/// Like [`grad_check`], but with `Some((k, seed))` tensors larger than `k`
/// are checked at `k` distinct coordinates drawn from a seeded generator.
pub fn grad_check_sampled<F>(
    store: &ParamStore,
    analytic: &[Tensor],
    eps: f64,
    sample: Option<(usize, u64)>,
    stencil: Stencil,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync + Send,
{
    if analytic.len() != store.len() {
        return Err(Error::Config(format!(
            "grad_check: {} analytic gradients for {} parameters",
            analytic.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    let results = par::map(&ids, |&id| -> Result<ParamCheck> {
        let mut local = store.clone();
        let name = store.get(id).name().to_string();
        let grad = &analytic[id.index()];
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let eval = |s: &ParamStore, i: usize| -> Result<f64> {
            let v = f(s).map_err(|e| Error::NonFinite(format!("objective failed perturbing {name}[{i}]: {e}")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("objective non-finite perturbing {name}[{i}]")));
            }
            Ok(v)
        };
        let coords: Vec<usize> = match sample {
            Some((k, seed)) if grad.len() > k => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(id.index() as u64));
                let mut c = rand::seq::index::sample(&mut rng, grad.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..grad.len()).collect(),
        };
        for (n, &i) in coords.iter().enumerate() {
            let x0 = store.value(id).data()[i];
            let mut central = |h: f64| -> Result<f64> {
                local.get_mut(id).value.data_mut()[i] = x0 + h;
                let fp = eval(&local, i)?;
                local.get_mut(id).value.data_mut()[i] = x0 - h;
                let fm = eval(&local, i)?;
                local.get_mut(id).value.data_mut()[i] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let numeric = match stencil {
                Stencil::Central => central(eps)?,
                Stencil::Richardson => {
                    let coarse = central(eps)?;
                    (4.0 * central(eps / 2.0)? - coarse) / 3.0
                }
            };
            let a = grad.data()[i];
            let rel = relative_error(a, numeric);
            if rel > worst.max_rel_error || n == 0 {
                worst.max_rel_error = rel;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        Ok(worst)
    });
    Ok(GradCheckReport {
        params: results.into_iter().collect::<Result<_>>()?,
    })
}
