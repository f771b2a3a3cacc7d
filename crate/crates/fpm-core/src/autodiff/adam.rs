//! Adam with bias correction. Complex parameters keep a complex first
//! moment and a componentwise second moment, so the update treats the
//! real and imaginary parts as independent real parameters.

use ndarray::ArrayD;
use num_complex::Complex64;

use super::{DiffGraph, NodeId, Tensor};
use crate::error::{FpmError, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

enum Moments {
    Real {
        m: ArrayD<f64>,
        v: ArrayD<f64>,
    },
    Complex {
        m: ArrayD<Complex64>,
        v_re: ArrayD<f64>,
        v_im: ArrayD<f64>,
    },
}

/// Optimizer state for one set of leaf parameters.
pub struct AdamState {
    params: Vec<NodeId>,
    moments: Vec<Moments>,
    lr: f64,
    step: u64,
}

impl AdamState {
    pub fn new(graph: &DiffGraph, params: &[NodeId], lr: f64) -> Self {
        let moments = params
            .iter()
            .map(|&p| match graph.value(p) {
                Tensor::Real(a) => Moments::Real {
                    m: ArrayD::zeros(a.raw_dim()),
                    v: ArrayD::zeros(a.raw_dim()),
                },
                Tensor::Complex(a) => Moments::Complex {
                    m: ArrayD::from_elem(a.raw_dim(), Complex64::new(0.0, 0.0)),
                    v_re: ArrayD::zeros(a.raw_dim()),
                    v_im: ArrayD::zeros(a.raw_dim()),
                },
            })
            .collect();
        AdamState {
            params: params.to_vec(),
            moments,
            lr,
            step: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update from the gradients of the latest backward pass
    /// and writes the new values back into the graph leaves.
    pub fn step(&mut self, graph: &mut DiffGraph) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (idx, &p) in self.params.iter().enumerate() {
            let grad = graph
                .grad(p)
                .ok_or_else(|| {
                    FpmError::Domain(format!("parameter node {} has no gradient", p.0))
                })?
                .clone();
            let mut value = graph.value(p).clone();
            match (&mut value, &grad, &mut self.moments[idx]) {
                (Tensor::Real(x), Tensor::Real(g), Moments::Real { m, v }) => {
                    ndarray::Zip::from(x).and(m).and(v).and(g).for_each(
                        |xv, mv, vv, &gv| {
                            *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                            *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                            let mh = *mv / bc1;
                            let vh = *vv / bc2;
                            *xv -= self.lr * mh / (vh.sqrt() + EPS);
                        },
                    );
                }
                (
                    Tensor::Complex(x),
                    Tensor::Complex(g),
                    Moments::Complex { m, v_re, v_im },
                ) => {
                    ndarray::Zip::from(x).and(m).and(v_re).and(v_im).and(g).for_each(
                        |xv, mv, vre, vim, &gv| {
                            *mv = *mv * BETA1 + gv * (1.0 - BETA1);
                            *vre = BETA2 * *vre + (1.0 - BETA2) * gv.re * gv.re;
                            *vim = BETA2 * *vim + (1.0 - BETA2) * gv.im * gv.im;
                            let mh = *mv / bc1;
                            let vre_h = *vre / bc2;
                            let vim_h = *vim / bc2;
                            xv.re -= self.lr * mh.re / (vre_h.sqrt() + EPS);
                            xv.im -= self.lr * mh.im / (vim_h.sqrt() + EPS);
                        },
                    );
                }
                _ => {
                    return Err(FpmError::Domain(
                        "parameter and gradient dtype mismatch".into(),
                    ))
                }
            }
            graph.set_leaf(p, value)?;
        }
        Ok(())
    }
}
