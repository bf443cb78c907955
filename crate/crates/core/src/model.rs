//! Hierarchical probabilistic model over K related systems: Gaussian
//! conditional priors on per-system parameters, log-normal hyperprior on the
//! population variance, Gaussian likelihoods through a forward map, and the
//! exact gradient of the log joint with respect to the stacked latent state.
//!
//! State layout (hierarchical): [theta^(1) .. theta^(K), mu, log tau],
//! system-major; dimension K*P + 2P. The non-hierarchical ablation drops the
//! hyperparameter block and uses the fixed prior N(m_mu, s_mu I) per system.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// All Gaussian widths in this file are variances.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HyperPriorConfig {
    pub m_mu: Vec<f64>,
    pub s_mu: Vec<f64>,
    pub m_tau: Vec<f64>,
    pub s_tau: Vec<f64>,
}

impl HyperPriorConfig {
    /// Defaults: m_mu = 0, s_mu = 4, m_tau = log 0.5, s_tau = 1.
    pub fn default_for(p_dims: usize) -> Self {
        HyperPriorConfig {
            m_mu: vec![0.0; p_dims],
            s_mu: vec![4.0; p_dims],
            m_tau: vec![0.5f64.ln(); p_dims],
            s_tau: vec![1.0; p_dims],
        }
    }

    pub fn p_dims(&self) -> usize {
        self.m_mu.len()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct StateLayout {
    pub k_systems: usize,
    pub p_dims: usize,
    pub hierarchical: bool,
}

impl StateLayout {
    pub fn dim(&self) -> usize {
        if self.hierarchical {
            self.k_systems * self.p_dims + 2 * self.p_dims
        } else {
            self.k_systems * self.p_dims
        }
    }

    pub fn theta<'a>(&self, x: &'a [f64], k: usize) -> &'a [f64] {
        &x[k * self.p_dims..(k + 1) * self.p_dims]
    }

    pub fn mu<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        debug_assert!(self.hierarchical);
        let off = self.k_systems * self.p_dims;
        &x[off..off + self.p_dims]
    }

    pub fn log_tau<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        debug_assert!(self.hierarchical);
        let off = self.k_systems * self.p_dims + self.p_dims;
        &x[off..off + self.p_dims]
    }
}

/// A forward map from per-system parameters to predicted observations.
/// Implemented by the numerical solvers and by the trained surrogates.
pub trait Forward: Sync {
    fn p_dims(&self) -> usize;
    fn n_obs(&self, k: usize) -> usize;

    /// Predicted observations for system k.
    fn predict(&self, k: usize, theta: &[f64]) -> Result<Vec<f64>>;

    /// Predictions plus the Jacobian d pred / d theta, (n_obs x P) row-major.
    fn predict_with_jac(&self, k: usize, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Number of closure parameters reachable through this forward map
    /// (zero when the map does not consume the closure directly).
    fn n_alpha(&self) -> usize {
        0
    }

    /// Accumulate d(sum_i w_i pred_i)/d alpha for system k.
    fn alpha_grad(
        &self,
        _k: usize,
        _theta: &[f64],
        _weights: &[f64],
        _accum: &mut [f64],
    ) -> Result<()> {
        Ok(())
    }

    /// Number of surrogate parameters reachable through this forward map.
    fn n_beta(&self) -> usize {
        0
    }

    /// Accumulate d(sum_i w_i pred_i)/d beta for system k.
    fn beta_grad(
        &self,
        _k: usize,
        _theta: &[f64],
        _weights: &[f64],
        _accum: &mut [f64],
    ) -> Result<()> {
        Ok(())
    }

    /// Batched prediction across all systems; forward maps that can share
    /// work across the population override this. Failures carry the system
    /// index.
    fn predict_all(&self, thetas: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        thetas
            .iter()
            .enumerate()
            .map(|(k, th)| self.predict(k, th).map_err(|e| e.tag_system(k)))
            .collect()
    }

    /// Batched prediction + Jacobians across all systems.
    fn predict_with_jac_all(&self, thetas: &[&[f64]]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        thetas
            .iter()
            .enumerate()
            .map(|(k, th)| self.predict_with_jac(k, th).map_err(|e| e.tag_system(k)))
            .collect()
    }

    /// Batched alpha-gradient accumulation with per-system upstream weights.
    fn alpha_grad_all(
        &self,
        thetas: &[&[f64]],
        weights: &[Vec<f64>],
        accum: &mut [f64],
    ) -> Result<()> {
        for (k, (th, w)) in thetas.iter().zip(weights).enumerate() {
            self.alpha_grad(k, th, w, accum)?;
        }
        Ok(())
    }
}

pub struct HierModel<'a, F: Forward + ?Sized> {
    pub forward: &'a F,
    /// observations per system
    pub data: &'a [Vec<f64>],
    /// observation noise standard deviation (known)
    pub sigma: f64,
    pub hyper: HyperPriorConfig,
    pub layout: StateLayout,
}

#[inline]
fn ln_normal(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * PI * variance).ln() - (x - mean) * (x - mean) / (2.0 * variance)
}

impl<'a, F: Forward + ?Sized> HierModel<'a, F> {
    pub fn new(
        forward: &'a F,
        data: &'a [Vec<f64>],
        sigma: f64,
        hyper: HyperPriorConfig,
        hierarchical: bool,
    ) -> Self {
        let layout = StateLayout {
            k_systems: data.len(),
            p_dims: forward.p_dims(),
            hierarchical,
        };
        HierModel {
            forward,
            data,
            sigma,
            hyper,
            layout,
        }
    }

    fn prior_terms(&self, x: &[f64]) -> f64 {
        let lay = self.layout;
        let p = lay.p_dims;
        let mut total = 0.0;
        if lay.hierarchical {
            let mu = lay.mu(x);
            let log_tau = lay.log_tau(x);
            for i in 0..p {
                total += ln_normal(mu[i], self.hyper.m_mu[i], self.hyper.s_mu[i]);
                total += ln_normal(log_tau[i], self.hyper.m_tau[i], self.hyper.s_tau[i]);
            }
            for k in 0..lay.k_systems {
                let th = lay.theta(x, k);
                for i in 0..p {
                    let tau = log_tau[i].exp();
                    total += ln_normal(th[i], mu[i], tau);
                }
            }
        } else {
            for k in 0..lay.k_systems {
                let th = lay.theta(x, k);
                for i in 0..p {
                    total += ln_normal(th[i], self.hyper.m_mu[i], self.hyper.s_mu[i]);
                }
            }
        }
        total
    }

    fn theta_slices<'b>(&self, x: &'b [f64]) -> Vec<&'b [f64]> {
        (0..self.layout.k_systems)
            .map(|k| self.layout.theta(x, k))
            .collect()
    }

    /// log p(y, x) up to nothing: all normalization kept.
    pub fn log_joint(&self, x: &[f64]) -> Result<f64> {
        debug_assert_eq!(x.len(), self.layout.dim());
        let mut total = self.prior_terms(x);
        let s2 = self.sigma * self.sigma;
        let preds = self.forward.predict_all(&self.theta_slices(x))?;
        for (k, pred) in preds.iter().enumerate() {
            let y = &self.data[k];
            debug_assert_eq!(pred.len(), y.len());
            let mut ss = 0.0;
            for (p, o) in pred.iter().zip(y) {
                ss += (o - p) * (o - p);
            }
            total += -0.5 * y.len() as f64 * (2.0 * PI * s2).ln() - ss / (2.0 * s2);
        }
        Ok(total)
    }

    /// log p and its gradient with respect to the stacked state.
    pub fn log_joint_with_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let lay = self.layout;
        let p = lay.p_dims;
        debug_assert_eq!(x.len(), lay.dim());
        let mut grad = vec![0.0; lay.dim()];
        let mut total = self.prior_terms(x);
        let s2 = self.sigma * self.sigma;

        let results = self.forward.predict_with_jac_all(&self.theta_slices(x))?;
        for (k, (pred, jac)) in results.iter().enumerate() {
            let y = &self.data[k];
            let n = y.len();
            let mut ss = 0.0;
            for i in 0..n {
                let r = y[i] - pred[i];
                ss += r * r;
                for j in 0..p {
                    grad[k * p + j] += r * jac[i * p + j] / s2;
                }
            }
            total += -0.5 * n as f64 * (2.0 * PI * s2).ln() - ss / (2.0 * s2);
        }

        if lay.hierarchical {
            let mu = lay.mu(x).to_vec();
            let log_tau = lay.log_tau(x).to_vec();
            let mu_off = lay.k_systems * p;
            let tau_off = mu_off + p;
            for i in 0..p {
                let tau = log_tau[i].exp();
                let mut sum_dev = 0.0;
                let mut sum_quad = 0.0;
                for k in 0..lay.k_systems {
                    let d = x[k * p + i] - mu[i];
                    grad[k * p + i] += -d / tau;
                    sum_dev += d;
                    sum_quad += d * d;
                }
                grad[mu_off + i] +=
                    sum_dev / tau - (mu[i] - self.hyper.m_mu[i]) / self.hyper.s_mu[i];
                // d/d log tau of the K conditional priors: -K/2 + quad/(2 tau),
                // plus the Gaussian hyperprior on log tau itself.
                grad[tau_off + i] += -0.5 * lay.k_systems as f64 + sum_quad / (2.0 * tau)
                    - (log_tau[i] - self.hyper.m_tau[i]) / self.hyper.s_tau[i];
            }
        } else {
            for k in 0..lay.k_systems {
                for i in 0..p {
                    grad[k * p + i] +=
                        -(x[k * p + i] - self.hyper.m_mu[i]) / self.hyper.s_mu[i];
                }
            }
        }
        Ok((total, grad))
    }

    /// Residual-weighted upstream for the likelihood of system k at theta:
    /// w = (y - pred)/sigma^2, the gradient of log lik with respect to pred.
    pub fn likelihood_upstream(&self, k: usize, pred: &[f64]) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        self.data[k]
            .iter()
            .zip(pred)
            .map(|(y, p)| (y - p) / s2)
            .collect()
    }

    /// Fisher-identity contribution: accumulate
    /// d(sum_k log p(y^k | theta^k, alpha))/d alpha at one latent state.
    /// Prior and hyperprior terms carry no alpha dependence and drop out.
    pub fn alpha_grad_into(&self, x: &[f64], accum: &mut [f64]) -> Result<()> {
        let thetas = self.theta_slices(x);
        let preds = self.forward.predict_all(&thetas)?;
        let weights: Vec<Vec<f64>> = preds
            .iter()
            .enumerate()
            .map(|(k, pred)| self.likelihood_upstream(k, pred))
            .collect();
        self.forward.alpha_grad_all(&thetas, &weights, accum)
    }

    /// Same for surrogate parameters: d(sum_k log lik)/d beta.
    pub fn beta_grad_into(&self, x: &[f64], accum: &mut [f64]) -> Result<()> {
        for k in 0..self.layout.k_systems {
            let th = self.layout.theta(x, k);
            let pred = self.forward.predict(k, th).map_err(|e| e.for_system(k))?;
            let w = self.likelihood_upstream(k, &pred);
            self.forward
                .beta_grad(k, th, &w, accum)
                .map_err(|e| e.for_system(k))?;
        }
        Ok(())
    }

    /// Fisher-identity gradient of L_LML = -sum_m log p(y, X^m | alpha) over a
    /// set of ensemble states (post-acceptance samples, treated as constants).
    pub fn lml_alpha_grad(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut accum = vec![0.0; self.forward.n_alpha()];
        for x in states {
            self.alpha_grad_into(x, &mut accum)?;
        }
        // negative log-likelihood sum
        for g in accum.iter_mut() {
            *g = -*g;
        }
        Ok(accum)
    }
}

/// Linear-Gaussian toy forward G(theta) = a * theta used by the conjugate
/// and Fisher-identity oracles.
pub struct LinearForward {
    pub a: f64,
    pub n_obs: usize,
}

impl Forward for LinearForward {
    fn p_dims(&self) -> usize {
        1
    }
    fn n_obs(&self, _k: usize) -> usize {
        self.n_obs
    }
    fn predict(&self, _k: usize, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.a * theta[0]; self.n_obs])
    }
    fn predict_with_jac(&self, _k: usize, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            vec![self.a * theta[0]; self.n_obs],
            vec![self.a; self.n_obs],
        ))
    }
    fn n_alpha(&self) -> usize {
        1
    }
    fn alpha_grad(
        &self,
        _k: usize,
        theta: &[f64],
        weights: &[f64],
        accum: &mut [f64],
    ) -> Result<()> {
        // d pred_i / d a = theta
        accum[0] += weights.iter().sum::<f64>() * theta[0];
        Ok(())
    }
}

/// Map forward-model failures to -inf so samplers can auto-reject.
pub fn eval_or_reject<F: Forward + ?Sized>(
    model: &HierModel<'_, F>,
    x: &[f64],
) -> (f64, Vec<f64>) {
    match model.log_joint_with_grad(x) {
        Ok((lp, g)) if lp.is_finite() && g.iter().all(|v| v.is_finite()) => (lp, g),
        _ => (f64::NEG_INFINITY, vec![0.0; model.layout.dim()]),
    }
}

impl Error {
    pub fn is_forward_failure(&self) -> bool {
        matches!(self, Error::Forward { .. } | Error::Divergence { .. })
    }
}

impl Error {
    /// Keep an existing system tag rather than nesting a second one.
    pub fn tag_system(self, system: usize) -> Error {
        match self {
            Error::Forward { .. } => self,
            other => other.for_system(system),
        }
    }
}
