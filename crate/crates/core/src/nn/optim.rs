//! First-order optimizers over any [`ParamSet`].

use super::params::{congruent, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Algorithm {
    pub const ADAM: Algorithm = Algorithm::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::ADAM),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::config(format!("unknown optimizer `{other}` (expected adam or sgd)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Adam { .. } => "adam",
            Self::Sgd => "sgd",
        }
    }
}

impl Default for Algorithm {
    fn default() -> Self {
        Self::ADAM
    }
}

/// Optimizer state for one parameter set. Moment buffers are allocated
/// exactly when the algorithm is Adam.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    algorithm: Algorithm,
    lr: f64,
    moments: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    step: u64,
}

impl OptimizerState {
    pub fn new<P: ParamSet + ?Sized>(algorithm: Algorithm, lr: f64, params: &P) -> Self {
        let moments = match algorithm {
            Algorithm::Adam { .. } => {
                let zeros: Vec<Vec<f64>> = params.segment_lens().into_iter().map(|n| vec![0.0; n]).collect();
                Some((zeros.clone(), zeros))
            }
            Algorithm::Sgd => None,
        };
        Self {
            algorithm,
            lr,
            moments,
            step: 0,
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self) -> bool {
        self.moments.is_some()
    }

    /// Applies one update. A gradient containing NaN or infinity is refused
    /// and leaves both parameters and state untouched.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamSet + ?Sized,
        G: ParamSet + ?Sized,
    {
        if !congruent(params, grads) {
            return Err(Error::shape("gradient layout does not match parameters"));
        }
        if let Some((s, i)) = grads
            .segments()
            .iter()
            .enumerate()
            .find_map(|(s, seg)| seg.iter().position(|v| !v.is_finite()).map(|i| (s, i)))
        {
            return Err(Error::Numeric(format!(
                "non-finite gradient at segment {s}, index {i}; step refused"
            )));
        }
        if let Some((m, _)) = &self.moments {
            if m.iter().map(Vec::len).ne(params.segment_lens()) {
                return Err(Error::shape("optimizer state does not match parameters"));
            }
        }
        self.step += 1;
        let lr = self.lr;
        let grads = grads.segments();
        match (self.algorithm, &mut self.moments) {
            (Algorithm::Sgd, _) => {
                for (p, g) in params.segments_mut().into_iter().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= lr * gi;
                    }
                }
            }
            (Algorithm::Adam { beta1, beta2, eps }, Some((m, v))) => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), ms), vs) in params.segments_mut().into_iter().zip(grads).zip(m).zip(v) {
                    for i in 0..p.len() {
                        let gi = g[i];
                        ms[i] = beta1 * ms[i] + (1.0 - beta1) * gi;
                        vs[i] = beta2 * vs[i] + (1.0 - beta2) * gi * gi;
                        let mhat = ms[i] / bc1;
                        let vhat = vs[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            (Algorithm::Adam { .. }, None) => unreachable!("adam state always carries moments"),
        }
        Ok(())
    }
}
