//! Binary cross-entropy on logits and AdamW with per-group hyperparameters.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logistic, Classifier, Gradients};
use crate::tensor::{Scalar, Tensor};

/// Loss `softplus(z) − y·z` and its derivative `σ(z) − y`.
pub fn bce_with_logits(logit: f64, label: u8) -> Result<(f64, f64)> {
    if label > 1 {
        return Err(Error::argument(format!("label must be 0 or 1, got {label}")));
    }
    let y = label as f64;
    let loss = logit.max(0.0) - y * logit + (-logit.abs()).exp().ln_1p();
    Ok((loss, logistic(logit) - y))
}

/// Mean loss over a batch and the per-logit gradient of that mean.
pub fn bce_batch(logits: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::argument(format!(
            "{} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let (l, g) = bce_with_logits(z, y)?;
        total += l;
        grads.push(g / n);
    }
    Ok((total / n, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub members: BTreeSet<String>,
    pub lr: f64,
    pub weight_decay: f64,
}

/// Split registry names into the adapter group (`*.lora_a`, `*.lora_b`) and
/// the head group (`head.*`). Any other name is a registry error.
pub fn default_groups(
    names: &[String],
    lr_lora: f64,
    lr_head: f64,
    weight_decay: f64,
) -> Result<Vec<ParamGroup>> {
    let mut lora = BTreeSet::new();
    let mut head = BTreeSet::new();
    for n in names {
        if n.ends_with(".lora_a") || n.ends_with(".lora_b") {
            lora.insert(n.clone());
        } else if n.starts_with("head.") {
            head.insert(n.clone());
        } else {
            return Err(Error::Registry(format!("{n:?} belongs to no parameter group")));
        }
    }
    Ok(vec![
        ParamGroup {
            name: "lora".into(),
            members: lora,
            lr: lr_lora,
            weight_decay,
        },
        ParamGroup {
            name: "head".into(),
            members: head,
            lr: lr_head,
            weight_decay,
        },
    ])
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay:
///
/// ```text
/// m ← β₁m + (1−β₁)g          v ← β₂v + (1−β₂)g²
/// m̂ = m/(1−β₁ᵗ)              v̂ = v/(1−β₂ᵗ)
/// θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ
/// ```
///
/// Moments are kept in `f64` regardless of the parameter type.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    groups: Vec<ParamGroup>,
    state: BTreeMap<String, Moments>,
    step: u64,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>, config: AdamWConfig) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for g in &groups {
            if !(g.lr > 0.0) || !(g.weight_decay >= 0.0) {
                return Err(Error::Config(format!(
                    "group {}: lr must be > 0 and weight decay >= 0",
                    g.name
                )));
            }
            for m in &g.members {
                if !seen.insert(m.clone()) {
                    return Err(Error::Registry(format!("{m:?} is in more than one group")));
                }
            }
        }
        Ok(Self {
            config,
            groups,
            state: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    fn check_coverage(&self, grads: &BTreeSet<&String>) -> Result<()> {
        let members: BTreeSet<&String> = self.groups.iter().flat_map(|g| g.members.iter()).collect();
        if let Some(extra) = grads.difference(&members).next() {
            return Err(Error::Registry(format!("gradient for unregistered {extra:?}")));
        }
        if let Some(missing) = members.difference(grads).next() {
            return Err(Error::Registry(format!("no gradient for {missing:?}")));
        }
        Ok(())
    }

    /// Apply one update to named parameters.
    pub fn step<T: Scalar>(&mut self, params: &mut [(&str, &mut Tensor<T>)], grads: &Gradients<T>) -> Result<()> {
        let grad_names: BTreeSet<&String> = grads.keys().collect();
        self.check_coverage(&grad_names)?;
        let param_names: BTreeSet<&str> = params.iter().map(|(n, _)| *n).collect();
        if let Some(missing) = grad_names.iter().find(|n| !param_names.contains(n.as_str())) {
            return Err(Error::Registry(format!("no parameter named {missing:?}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, param) in params.iter_mut() {
            let grad = grads
                .get(*name)
                .ok_or_else(|| Error::Registry(format!("no gradient for parameter {name:?}")))?;
            if grad.shape() != param.shape() {
                return Err(Error::Registry(format!(
                    "gradient for {name:?} has shape {:?}, parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let group = self
                .groups
                .iter()
                .find(|g| g.members.contains(*name))
                .expect("coverage checked");
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                let g = g.to_f64();
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let theta = p.to_f64();
                let next = theta - group.lr * (m_hat / (v_hat.sqrt() + c.eps)) - group.lr * group.weight_decay * theta;
                *p = T::from_f64(next);
            }
        }
        Ok(())
    }

    /// Update every trainable tensor of a classifier.
    pub fn step_model<T: Scalar>(&mut self, model: &mut Classifier<T>, grads: &Gradients<T>) -> Result<()> {
        // Collect owned copies, update, then write back in registry order.
        let mut owned: Vec<(String, Tensor<T>)> = Vec::new();
        model.visit_trainable_mut(|n, t| owned.push((n.to_string(), t.clone())));
        {
            let mut refs: Vec<(&str, &mut Tensor<T>)> =
                owned.iter_mut().map(|(n, t)| (n.as_str(), t)).collect();
            self.step(&mut refs, grads)?;
        }
        let mut it = owned.into_iter();
        model.visit_trainable_mut(|_, t| *t = it.next().expect("same registry").1);
        Ok(())
    }
}
