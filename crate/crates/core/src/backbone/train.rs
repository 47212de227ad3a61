//! Desk-scale training: AdamW with linear warm-up and cosine decay on a
//! synthetic pattern-classification set.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::model::Backbone;
use crate::error::{Error, Result};
use crate::numerics::{CounterRng, Element, ParamStore, Tape, Tensor};

pub const PATTERN_CLASSES: usize = 4;

/// Images `[n, 3, size, size]` of oriented stripe and checker patterns with
/// random period, phase, colour and pixel noise; `labels[i]` is the pattern.
pub fn synthetic_patterns<T: Element>(
    n: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if classes == 0 || classes > PATTERN_CLASSES {
        return Err(Error::Data(format!(
            "synthetic patterns support 1..={PATTERN_CLASSES} classes, got {classes}"
        )));
    }
    if n == 0 || size == 0 {
        return Err(Error::Data("empty synthetic dataset".into()));
    }
    let mut rng = CounterRng::new(seed).stream("patterns");
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let period = 4.0 + 4.0 * rng.uniform_f64();
        let phase = 2.0 * PI * rng.uniform_f64();
        let colour: Vec<f64> = (0..3).map(|_| 0.5 + rng.uniform_f64()).collect();
        for &tint in &colour {
            for y in 0..size {
                for x in 0..size {
                    let (xf, yf) = (x as f64, y as f64);
                    let w = 2.0 * PI / period;
                    let v = match label {
                        0 => (w * yf + phase).sin(),
                        1 => (w * xf + phase).sin(),
                        2 => (w * xf + phase).sin() * (w * yf + phase).sin(),
                        _ => (w * (xf + yf) / 2f64.sqrt() + phase).sin(),
                    };
                    data.push(T::from_f64_lossy(tint * v + 0.1 * rng.standard_normal()));
                }
            }
        }
        labels.push(label);
    }
    Ok((Tensor::from_vec(vec![n, 3, size, size], data)?, labels))
}

/// Linear warm-up over `warmup` steps, then cosine decay to zero.
pub fn learning_rate(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam with decoupled weight decay, applied to matrices and kernels only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn update<T: Element>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &crate::numerics::Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get(&name)?;
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let mut next = Vec::with_capacity(p.numel());
            for (i, (&pi, &gi)) in p.data().iter().zip(g.data()).enumerate() {
                let (pi, gi) = (pi.as_f64(), gi.as_f64());
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                next.push(T::from_f64_lossy(pi - lr * (update + decay * pi)));
            }
            let shape = p.shape().to_vec();
            store.insert(name, Tensor::from_vec(shape, next)?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Samples per step; `None` trains on the full set every step.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 2e-3,
            warmup: 25,
            weight_decay: 0.05,
            batch_size: None,
            seed: 0,
        }
    }
}

/// Train `store` in place; returns the loss before each update.
pub fn toy_train<T: Element>(
    model: &Backbone,
    store: &mut ParamStore<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.config.num_classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            model.config.num_classes
        )));
    }
    let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let sample = images.numel() / n;
    let order = CounterRng::new(cfg.seed).stream("batches");
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, y) = if batch == n {
            (images.clone(), labels.to_vec())
        } else {
            let mut rng = order.stream(&format!("step{step}"));
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                idx.swap(i, rng.below(i + 1));
            }
            idx.truncate(batch);
            let mut data = Vec::with_capacity(batch * sample);
            for &i in &idx {
                data.extend_from_slice(&images.data()[i * sample..(i + 1) * sample]);
            }
            let mut shape = images.shape().to_vec();
            shape[0] = batch;
            (Tensor::from_vec(shape, data)?, idx.iter().map(|&i| labels[i]).collect())
        };

        let tape = Tape::new();
        // Non-finite activations are rejected by the softmax kernels; during
        // training that is divergence.
        let loss = model
            .logits(&tape, store, &tape.constant(x))
            .and_then(|logits| tape.cross_entropy(&logits, &y))
            .map_err(|e| match e {
                Error::Numeric(_) => Error::Training { step, loss: f64::NAN },
                other => other,
            })?;
        let value = loss.value().data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Training { step, loss: value });
        }
        losses.push(value);
        let grads = tape.backward(&loss)?;
        opt.update(store, &grads, learning_rate(step, cfg.steps, cfg.warmup, cfg.lr))?;
    }
    Ok(losses)
}
