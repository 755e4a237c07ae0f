//! First-order optimizers over a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{AutodiffError, ParamStore, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    /// Adam with bias correction.
    Adaptive,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adaptive => "adaptive",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adaptive" | "adam" => Ok(OptimizerKind::Adaptive),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(format!("unknown optimizer {s:?} (expected adaptive or sgd)")),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, step: u64, m: ParamStore, v: ParamStore },
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Adaptive => {
                Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: params.zeros_like(), v: params.zeros_like() }
            }
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    /// Applies one update with `grads`, which must have the layout of `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => {
                for (name, p) in params.iter_mut() {
                    let g = grads.get(name)?;
                    check_len(name, p.len(), g.len())?;
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= *lr * d;
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, step, m, v } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step as i32);
                let c2 = 1.0 - beta2.powi(*step as i32);
                for (name, p) in params.iter_mut() {
                    let g = grads.get(name)?;
                    check_len(name, p.len(), g.len())?;
                    let m = m.get_mut(name)?.data_mut();
                    let v = v.get_mut(name)?.data_mut();
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        let d = g.data()[k];
                        m[k] = *beta1 * m[k] + (1.0 - *beta1) * d;
                        v[k] = *beta2 * v[k] + (1.0 - *beta2) * d * d;
                        let mhat = m[k] / c1;
                        let vhat = v[k] / c2;
                        *w -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_len(name: &str, p: usize, g: usize) -> Result<()> {
    if p != g {
        return Err(AutodiffError::ShapeMismatch { op: "optimizer", detail: format!("{name}: {p} parameters, {g} gradients") });
    }
    Ok(())
}
