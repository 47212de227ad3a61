//! Reverse-mode gradients and their central finite-difference check.

use super::element::Element;
use super::store::ParamStore;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use super::CounterRng;
use crate::error::{Error, Result};

/// Gradients of the scalar returned by `loss_fn` with respect to every tensor
/// in `params`.
pub fn grad<T, F>(params: &ParamStore<T>, loss_fn: F) -> Result<Gradients<T>>
where
    T: Element,
    F: Fn(&Tape<T>, &ParamStore<T>) -> Result<Var<T>>,
{
    let tape = Tape::new();
    let loss = loss_fn(&tape, params)?;
    let mut grads = tape.backward(&loss)?;
    // Parameters the closure never bound are constants with respect to the loss.
    for (name, t) in params.iter() {
        if grads.get(name).is_none() {
            grads.insert(name.clone(), Tensor::zeros(t.shape().to_vec())?);
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error per element.
    pub tolerance: f64,
    /// Denominator floor: `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many elements per tensor (sampled with `seed`).
    pub max_elements: Option<usize>,
    pub seed: u64,
    /// Perturb the analytic gradient of this tensor (negative control).
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_elements: None,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| t.max_rel_err > self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare reverse-mode gradients against central differences in 64-bit.
pub fn gradcheck<F>(params: &ParamStore<f64>, loss_fn: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
{
    let mut grads = grad(params, &loss_fn)?;
    if let Some(name) = &cfg.corrupt {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Usage(format!("cannot corrupt unknown tensor `{name}`")))?;
        let bad = g.map(|v| v * 1.01 + 1e-3)?;
        grads.insert(name.clone(), bad);
    }

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::inference();
        let loss = loss_fn(&tape, store)?;
        if loss.value().numel() != 1 {
            return Err(Error::Usage("gradcheck needs a scalar loss".into()));
        }
        Ok(loss.value().data()[0])
    };

    let mut rng = CounterRng::new(cfg.seed);
    let mut tensors = Vec::new();
    for (name, t) in params.iter() {
        let analytic = grads.get(name).expect("gradient for every parameter");
        let n = t.numel();
        let indices: Vec<usize> = match cfg.max_elements {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let mut check = TensorCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let base = t.to_vec();
        for &i in &indices {
            let mut probe = params.clone();
            let mut v = base.clone();
            v[i] = base[i] + cfg.step;
            probe.insert(name.clone(), Tensor::from_vec(t.shape().to_vec(), v.clone())?);
            let up = eval(&probe)?;
            v[i] = base[i] - cfg.step;
            probe.insert(name.clone(), Tensor::from_vec(t.shape().to_vec(), v)?);
            let down = eval(&probe)?;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, cfg.floor);
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_f64(vec![3], &[0.3, -1.2, 2.0]).unwrap());
        s
    }

    fn cube_loss(tape: &Tape<f64>, s: &ParamStore<f64>) -> Result<Var<f64>> {
        let p = s.bind(tape, "p")?;
        let sq = tape.mul(&p, &p)?;
        tape.sum_all(&tape.mul(&sq, &p)?)
    }

    #[test]
    fn passes_on_correct_gradients() {
        let report = gradcheck(&store(), cube_loss, &GradcheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wrong_vjp_is_caught_and_named() {
        // d(p²)/dp reported as p instead of 2p.
        let loss = |tape: &Tape<f64>, s: &ParamStore<f64>| {
            let p = s.bind(tape, "p")?;
            let v = crate::numerics::ops::mul(p.value(), p.value())?;
            let pv = p.value().clone();
            let sq = tape.custom(v, &[&p], Box::new(move |g| Ok(vec![Some(crate::numerics::ops::mul(g, &pv)?)])));
            tape.sum_all(&sq)
        };
        let report = gradcheck(&store(), loss, &GradcheckConfig::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().name, "p");
    }

    #[test]
    fn corruption_flag_fails_named_tensor() {
        let cfg = GradcheckConfig {
            corrupt: Some("p".into()),
            ..Default::default()
        };
        let report = gradcheck(&store(), cube_loss, &cfg).unwrap();
        assert_eq!(report.failures().next().unwrap().name, "p");
    }
}
