//! SGD with momentum, weight decay, and Frobenius decay.
//!
//! Update rule per parameter: `v ← μv + (g + decay)`, `p ← p − ηv`.
//! The decay term is `wd·p` for unfactorized conv/dense weights and the
//! Frobenius-decay gradient for factorized pairs; biases and batch-norm
//! scale/shift receive no decay.

use crate::error::{Error, Result};
use crate::factorize::{frobenius_decay_grad, FactorizedPair};
use crate::nn::model::{Gradients, Layer, LayerGrads, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdHyper {
    /// Learning rate η.
    pub lr: f64,
    /// Momentum μ in [0, 1).
    pub momentum: f64,
    /// Weight decay for unfactorized weights.
    pub weight_decay: f64,
    /// Frobenius decay λ for factorized pairs.
    pub frobenius_decay: f64,
}

impl SgdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.frobenius_decay < 0.0 {
            return Err(Error::InvalidArgument("decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state: hyper-parameters plus one velocity tensor per trainable
/// parameter, in the model's canonical layer order.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub hyper: SgdHyper,
    velocity: Vec<Vec<Tensor>>,
}

impl SgdState {
    pub fn new(model: &Model, hyper: SgdHyper) -> Result<Self> {
        hyper.validate()?;
        let velocity = model
            .visit_layers()
            .into_iter()
            .map(|layer| {
                trainable_shapes(layer)
                    .into_iter()
                    .map(|s| Tensor::zeros(&s))
                    .collect()
            })
            .collect();
        Ok(SgdState { hyper, velocity })
    }

    /// Applies one SGD step in place. Gradients must align with the model.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let layers = model.visit_layers_mut();
        if layers.len() != grads.len() || layers.len() != self.velocity.len() {
            return Err(Error::dimension(
                "gradients do not align with model layers",
            ));
        }
        let h = self.hyper;
        for ((layer, grad), vel) in layers
            .into_iter()
            .zip(grads.iter())
            .zip(self.velocity.iter_mut())
        {
            match (layer, grad) {
                (Layer::Dense { w, b }, LayerGrads::Dense { dw, db }) => {
                    apply(w, dw, Some(h.weight_decay), &mut vel[0], h)?;
                    if let (Some(b), Some(db)) = (b.as_mut(), db.as_ref()) {
                        apply(b, db, None, &mut vel[1], h)?;
                    }
                }
                (
                    Layer::FactorizedDense { u, v, b, rank },
                    LayerGrads::FactorizedDense { du, dv, db },
                ) => {
                    let pair = FactorizedPair {
                        u: u.clone(),
                        v: v.clone(),
                        rank: *rank,
                    };
                    let (fd_u, fd_v) = frobenius_decay_grad(&pair, h.frobenius_decay)?;
                    let mut gu = du.clone();
                    gu.add_scaled(&fd_u, 1.0)?;
                    let mut gv = dv.clone();
                    gv.add_scaled(&fd_v, 1.0)?;
                    apply(u, &gu, None, &mut vel[0], h)?;
                    apply(v, &gv, None, &mut vel[1], h)?;
                    if let (Some(b), Some(db)) = (b.as_mut(), db.as_ref()) {
                        apply(b, db, None, &mut vel[2], h)?;
                    }
                }
                (Layer::Conv { w, .. }, LayerGrads::Conv { dw }) => {
                    apply(w, dw, Some(h.weight_decay), &mut vel[0], h)?;
                }
                (
                    Layer::FactorizedConv { u, v, rank, .. },
                    LayerGrads::FactorizedConv { du, dv },
                ) => {
                    let pair = FactorizedPair {
                        u: u.clone(),
                        v: v.clone(),
                        rank: *rank,
                    };
                    let (fd_u, fd_v) = frobenius_decay_grad(&pair, h.frobenius_decay)?;
                    let mut gu = du.clone();
                    gu.add_scaled(&fd_u, 1.0)?;
                    let mut gv = dv.clone();
                    gv.add_scaled(&fd_v, 1.0)?;
                    apply(u, &gu, None, &mut vel[0], h)?;
                    apply(v, &gv, None, &mut vel[1], h)?;
                }
                (
                    Layer::BatchNorm { gamma, beta, .. },
                    LayerGrads::BatchNorm { dgamma, dbeta },
                ) => {
                    apply(gamma, dgamma, None, &mut vel[0], h)?;
                    apply(beta, dbeta, None, &mut vel[1], h)?;
                }
                (Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten, LayerGrads::None) => {}
                _ => {
                    return Err(Error::dimension(
                        "gradient kind does not match layer kind",
                    ))
                }
            }
        }
        Ok(())
    }
}

fn apply(
    param: &mut Tensor,
    grad: &Tensor,
    weight_decay: Option<f64>,
    vel: &mut Tensor,
    h: SgdHyper,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dimension(format!(
            "gradient shape {:?} vs parameter {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    let wd = weight_decay.unwrap_or(0.0);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data().iter())
        .zip(vel.data_mut().iter_mut())
    {
        let total = g + wd * *p;
        *v = h.momentum * *v + total;
        *p -= h.lr * *v;
    }
    Ok(())
}

fn trainable_shapes(layer: &Layer) -> Vec<Vec<usize>> {
    match layer {
        Layer::Dense { w, b } => {
            let mut v = vec![w.shape().to_vec()];
            if let Some(b) = b {
                v.push(b.shape().to_vec());
            }
            v
        }
        Layer::FactorizedDense { u, v: vt, b, .. } => {
            let mut v = vec![u.shape().to_vec(), vt.shape().to_vec()];
            if let Some(b) = b {
                v.push(b.shape().to_vec());
            }
            v
        }
        Layer::Conv { w, .. } => vec![w.shape().to_vec()],
        Layer::FactorizedConv { u, v, .. } => vec![u.shape().to_vec(), v.shape().to_vec()],
        Layer::BatchNorm { gamma, beta, .. } => {
            vec![gamma.shape().to_vec(), beta.shape().to_vec()]
        }
        Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => vec![],
    }
}
