use serde::{Deserialize, Serialize};

use super::model::{GradientSet, ModelState};
use crate::error::{CrlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// Optimizer hyperparameters, independent of any model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-2,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CrlError::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Live optimizer: configuration, current learning rate and the moment
/// accumulators for one model.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Current learning rate after schedule multipliers.
    pub learning_rate: f64,
    first_moment: GradientSet,
    second_moment: Option<GradientSet>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, model: &ModelState) -> Result<Self> {
        config.validate()?;
        let second_moment = match config.kind {
            OptimizerKind::Adam => Some(GradientSet::zeros_like(model)),
            OptimizerKind::SgdMomentum => None,
        };
        Ok(Self {
            learning_rate: config.learning_rate,
            first_moment: GradientSet::zeros_like(model),
            second_moment,
            config,
            step: 0,
        })
    }
}

/// Applies one update in place. Nothing is modified if any gradient is
/// non-finite or shapes disagree.
pub fn optimizer_update(
    model: &mut ModelState,
    grads: &GradientSet,
    opt: &mut OptimizerState,
) -> Result<()> {
    if !grads.is_congruent(model) || !opt.first_moment.is_congruent(model) {
        return Err(CrlError::shape(
            "optimizer_update",
            model.classifier.shape(),
            grads.classifier.shape(),
        ));
    }
    for (g, (name, _)) in grads.tensors().iter().zip(model.params()) {
        g.check_finite(&format!("{name} gradient"))?;
    }
    opt.step += 1;
    let lr = opt.learning_rate;
    let cfg = opt.config.clone();
    let params = model.params_mut();
    let firsts = opt.first_moment.tensors_mut();
    match cfg.kind {
        OptimizerKind::SgdMomentum => {
            for ((p, g), v) in params.into_iter().zip(grads.tensors()).zip(firsts) {
                for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vv = cfg.momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
        }
        OptimizerKind::Adam => {
            let t = opt.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let seconds = opt
                .second_moment
                .as_mut()
                .expect("adam state has second moments")
                .tensors_mut();
            for (((p, g), m), v) in params
                .into_iter()
                .zip(grads.tensors())
                .zip(firsts)
                .zip(seconds)
            {
                for (((pv, &gv), mv), vv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                    *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                    let m_hat = *mv / c1;
                    let v_hat = *vv / c2;
                    *pv -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
                }
            }
        }
    }
    for (name, p) in model.params() {
        p.check_finite(&name)?;
    }
    Ok(())
}
