//! Adam and cosine annealing with warm restarts (SGDR).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias-corrected moments.
///
/// Moment buffers are created lazily on the first step and keyed by
/// parameter name, in the order parameters are passed in.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `(name, m, v)` per parameter.
    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.names
            .iter()
            .zip(&self.m)
            .zip(&self.v)
            .map(|((n, m), v)| (n.as_str(), m, v))
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn restore(&mut self, t: u64, moments: Vec<(String, Tensor, Tensor)>) -> Result<()> {
        for (name, m, v) in &moments {
            if m.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam restore",
                    left: m.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            if v.data().iter().any(|&x| x < 0.0) {
                return Err(Error::Format(format!("negative second moment for {name}")));
            }
        }
        self.t = t;
        self.names.clear();
        self.m.clear();
        self.v.clear();
        for (name, m, v) in moments {
            self.names.push(name);
            self.m.push(m);
            self.v.push(v);
        }
        Ok(())
    }

    /// One update over all parameters.
    ///
    /// `params` and `grads` are matched by position and must carry the same
    /// names and shapes. Nothing is modified if any check fails.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[(String, Tensor)]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((pn, p), (gn, g)) in params.iter().zip(grads) {
            if pn != gn {
                return Err(Error::InvalidArgument(format!(
                    "adam: parameter {pn} paired with gradient {gn}"
                )));
            }
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {gn}")));
            }
        }
        if self.names.is_empty() {
            for (name, p) in params.iter() {
                self.names.push(name.clone());
                self.m.push(Tensor::zeros(p.shape()));
                self.v.push(Tensor::zeros(p.shape()));
            }
        } else if self.names.len() != params.len()
            || self.names.iter().zip(params.iter()).any(|(a, (b, _))| a != b)
            || self.m.iter().zip(params.iter()).any(|(m, (_, p))| m.shape() != p.shape())
        {
            return Err(Error::InvalidArgument(
                "adam: parameter set differs from the one the optimizer state was built for".into(),
            ));
        }

        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (((_, p), (_, g)), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for (((pv, &gv), mv), vv) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts.
///
/// Within a period of length `T_i` the rate follows
/// `eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / T_i)) / 2`
/// and jumps back to `eta_max` when the period ends. Each restart
/// multiplies the period by `t_mult`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdrSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub period: f64,
    pub t_mult: f64,
}

impl Default for SgdrSchedule {
    fn default() -> Self {
        Self {
            eta_max: 1e-3,
            eta_min: 1e-6,
            period: 50.0,
            t_mult: 1.0,
        }
    }
}

impl SgdrSchedule {
    pub fn new(eta_max: f64, eta_min: f64, period: f64, t_mult: f64) -> Result<Self> {
        if !(eta_min < eta_max) || eta_min < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= eta_min < eta_max, got {eta_min} and {eta_max}"
            )));
        }
        if !(period >= 1.0) || !(t_mult >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need period >= 1 and t_mult >= 1, got {period} and {t_mult}"
            )));
        }
        Ok(Self {
            eta_max,
            eta_min,
            period,
            t_mult,
        })
    }

    /// Returns `(t_cur, t_i)` for a position measured in epochs.
    fn locate(&self, epoch: f64) -> (f64, f64) {
        if self.t_mult == 1.0 {
            let t_cur = epoch % self.period;
            return (t_cur, self.period);
        }
        let mut t_cur = epoch;
        let mut t_i = self.period;
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= self.t_mult;
        }
        (t_cur, t_i)
    }

    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(epoch >= 0.0) || !epoch.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epoch must be finite and non-negative, got {epoch}"
            )));
        }
        let (t_cur, t_i) = self.locate(epoch);
        let lr = self.eta_min
            + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (PI * t_cur / t_i).cos());
        Ok(lr.clamp(self.eta_min, self.eta_max))
    }
}
