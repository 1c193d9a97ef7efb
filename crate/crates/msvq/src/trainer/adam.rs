//! Adam with bias correction over named parameter tensors. Moment buffers are
//! keyed by parameter name so optimizer state survives checkpointing.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewMutD};

use crate::error::{Error, Result};
use crate::model::GradStore;
use crate::nn::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("adam {name} must be in [0, 1)")));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::InvalidConfig("adam eps must be finite and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// Restores an optimizer from persisted moment tensors.
    pub fn from_state(
        cfg: AdamConfig,
        step: u64,
        m: BTreeMap<String, ArrayD<F>>,
        v: BTreeMap<String, ArrayD<F>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if m.len() != v.len() || m.keys().zip(v.keys()).any(|(a, b)| a != b) {
            return Err(Error::Checkpoint("adam moment maps name mismatch".into()));
        }
        for (name, mt) in &m {
            if mt.shape() != v[name].shape() {
                return Err(Error::Checkpoint(format!("adam moment shapes differ for {name}")));
            }
        }
        Ok(Self { cfg, step, m, v })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &BTreeMap<String, ArrayD<F>> {
        &self.m
    }

    pub fn second_moments(&self) -> &BTreeMap<String, ArrayD<F>> {
        &self.v
    }

    /// One update over all parameters. Every parameter must have exactly one
    /// gradient and vice versa; moment buffers appear on first use.
    pub fn apply(
        &mut self,
        mut params: Vec<(String, ArrayViewMutD<'_, F>)>,
        grads: &GradStore<F>,
        lr: f64,
    ) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidInput("learning rate must be finite and >= 0".into()));
        }
        grads.check_finite()?;
        if grads.len() != params.len() {
            let param_names: std::collections::BTreeSet<&str> =
                params.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = grads
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| !param_names.contains(n))
                .collect();
            return Err(Error::InvalidInput(format!(
                "{} gradients for {} parameters (unmatched: {:?})",
                grads.len(),
                params.len(),
                extra
            )));
        }
        for (name, p) in &params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidInput(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!("gradient shape mismatch for {name}")));
            }
            if let Some(m) = self.m.get(name) {
                if m.shape() != g.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "restored moment shape mismatch for {name}"
                    )));
                }
            }
        }

        self.step += 1;
        let b1 = F::from_f(self.cfg.beta1);
        let b2 = F::from_f(self.cfg.beta2);
        let one = F::one();
        let bc1 = F::from_f(1.0 - self.cfg.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let bc2 = F::from_f(1.0 - self.cfg.beta2.powi(self.step.min(i32::MAX as u64) as i32));
        let eps = F::from_f(self.cfg.eps);
        let lr_f = F::from_f(lr);

        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("validated above");
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            azip_update(m, v, p, g, b1, b2, one, bc1, bc2, eps, lr_f);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update<F: Scalar>(
    m: &mut ArrayD<F>,
    v: &mut ArrayD<F>,
    p: &mut ArrayViewMutD<'_, F>,
    g: &ArrayD<F>,
    b1: F,
    b2: F,
    one: F,
    bc1: F,
    bc2: F,
    eps: F,
    lr: F,
) {
    ndarray::Zip::from(m).and(v).and(p).and(g).for_each(|mi, vi, pi, &gi| {
        *mi = b1 * *mi + (one - b1) * gi;
        *vi = b2 * *vi + (one - b2) * gi * gi;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
    });
}
