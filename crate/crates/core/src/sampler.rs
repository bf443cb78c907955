//! Ensemble-preconditioned MALA: M interacting chains sharing the empirical
//! covariance of the ensemble as a preconditioner, each with a Metropolis
//! correction. The covariance is recomputed once per outer iteration and
//! frozen within the step, so the proposal density is a valid MH kernel.

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::rng::StreamRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Log-density with gradient; non-finite values signal auto-rejection.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn log_density_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
}

/// A diagnostic-friendly Gaussian target used by calibration tests.
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    /// additive constant, to exercise the unnormalized-density contract
    pub log_offset: f64,
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn log_density_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut lp = self.log_offset;
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            lp -= d * d / (2.0 * self.variances[i]);
            g[i] = -d / self.variances[i];
        }
        (lp, g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_chains: usize,
    pub step_size: f64,
    pub base_jitter: f64,
    pub max_jitter: f64,
    /// Drift cap in units of the proposal noise scale sqrt(2 gamma tr C).
    /// Far from the mode raw Langevin drifts explode and every proposal
    /// auto-rejects; capping the drift (identically in the forward and
    /// reverse densities) keeps the kernel a valid MH scheme while leaving
    /// near-mode behavior untouched.
    pub drift_clip: f64,
    /// test-only switches
    pub metropolis: bool,
    pub identity_preconditioner: bool,
}

impl EnsembleConfig {
    pub fn new(n_chains: usize, step_size: f64) -> Self {
        EnsembleConfig {
            n_chains,
            step_size,
            base_jitter: 1e-6,
            max_jitter: 1e-2,
            drift_clip: 1.0,
            metropolis: true,
            identity_preconditioner: false,
        }
    }
}

pub struct Ensemble {
    pub cfg: EnsembleConfig,
    pub dim: usize,
    /// chain states, (M x D)
    pub states: Vec<Vec<f64>>,
    pub logp: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
    pub rngs: Vec<StreamRng>,
    pub accepted: Vec<u64>,
    pub proposed: Vec<u64>,
    pub auto_rejected: u64,
    /// frozen preconditioner (dense D x D) and its jittered factor
    cov: Vec<f64>,
    chol: Option<Cholesky>,
    cov_trace: f64,
    pub jitter_used: f64,
}

/// Biased (1/M) empirical covariance of the chain states, symmetrized.
pub fn ensemble_covariance(states: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = states.len();
    if m < 2 {
        return Err(Error::Ensemble(format!(
            "covariance needs at least 2 chains, got {m}"
        )));
    }
    let d = states[0].len();
    let mut mean = vec![0.0; d];
    for x in states {
        for i in 0..d {
            mean[i] += x[i];
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut cov = vec![0.0; d * d];
    for x in states {
        for i in 0..d {
            let di = x[i] - mean[i];
            for j in 0..=i {
                cov[i * d + j] += di * (x[j] - mean[j]);
            }
        }
    }
    let scale = 1.0 / m as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[i * d + j] * scale;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(cov)
}

impl Ensemble {
    /// Initialize chains from a caller-provided sampler of initial states.
    pub fn init(
        cfg: EnsembleConfig,
        dim: usize,
        seed_rng: &StreamRng,
        mut draw_initial: impl FnMut(&mut StreamRng) -> Vec<f64>,
    ) -> Ensemble {
        let m = cfg.n_chains;
        let mut states = Vec::with_capacity(m);
        let mut rngs = Vec::with_capacity(m);
        for c in 0..m {
            let mut rng = seed_rng.named("chain", &[c as u64]);
            let x = draw_initial(&mut rng);
            debug_assert_eq!(x.len(), dim);
            states.push(x);
            rngs.push(rng);
        }
        Ensemble {
            cfg,
            dim,
            states,
            logp: vec![f64::NEG_INFINITY; m],
            grads: vec![vec![0.0; dim]; m],
            rngs,
            accepted: vec![0; m],
            proposed: vec![0; m],
            auto_rejected: 0,
            cov: vec![0.0; dim * dim],
            chol: None,
            cov_trace: 0.0,
            jitter_used: 0.0,
        }
    }

    pub fn n_chains(&self) -> usize {
        self.states.len()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let a: u64 = self.accepted.iter().sum();
        let p: u64 = self.proposed.iter().sum();
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }

    /// Recompute logp/grad caches (required whenever the target changed).
    pub fn reevaluate<T: Target>(&mut self, target: &T) {
        let results: Vec<(f64, Vec<f64>)> = self
            .states
            .par_iter()
            .map(|x| target.log_density_and_grad(x))
            .collect();
        for (c, (lp, g)) in results.into_iter().enumerate() {
            self.logp[c] = lp;
            self.grads[c] = g;
        }
    }

    /// Recompute and factor the shared preconditioner from current states.
    pub fn refresh_covariance(&mut self) -> Result<()> {
        let d = self.dim;
        let mut cov = if self.cfg.identity_preconditioner {
            let mut c = vec![0.0; d * d];
            for i in 0..d {
                c[i * d + i] = 1.0;
            }
            c
        } else {
            ensemble_covariance(&self.states)?
        };
        let mut jitter = self.cfg.base_jitter;
        loop {
            let mut jittered = cov.clone();
            for i in 0..d {
                jittered[i * d + i] += jitter;
            }
            match Cholesky::factor(&jittered, d) {
                Ok(ch) => {
                    for i in 0..d {
                        cov[i * d + i] += jitter;
                    }
                    self.jitter_used = jitter;
                    self.chol = Some(ch);
                    self.cov_trace = (0..d).map(|i| cov[i * d + i]).sum();
                    self.cov = cov;
                    return Ok(());
                }
                Err(_) if jitter < self.cfg.max_jitter => {
                    jitter *= 10.0;
                }
                Err(e) => {
                    return Err(Error::Sampler(format!(
                        "preconditioner factorization failed at jitter {jitter:.1e}: {e}"
                    )))
                }
            }
        }
    }

    /// Pre-jitter covariance from the last refresh (test support).
    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    /// Robbins-Monro step-size adaptation toward a target acceptance rate;
    /// used during the training phase only.
    pub fn adapt_step_size(&mut self, step_acceptance: f64, target: f64, rate: f64) {
        let factor = (rate * (step_acceptance - target)).exp();
        self.cfg.step_size = (self.cfg.step_size * factor).clamp(1e-6, 10.0);
    }

    /// One MALA step for every chain against a frozen preconditioner.
    /// Caches must be fresh for the current target. Returns this step's
    /// acceptance fraction across chains.
    pub fn mala_step<T: Target>(&mut self, target: &T) -> Result<f64> {
        let chol = self
            .chol
            .as_ref()
            .ok_or_else(|| Error::Sampler("mala_step before refresh_covariance".into()))?;
        let d = self.dim;
        let gamma = self.cfg.step_size;
        let cov = &self.cov;
        let metropolis = self.cfg.metropolis;
        // drift cap shared by the forward and reverse proposal means
        let clip = self.cfg.drift_clip * (2.0 * gamma * self.cov_trace).sqrt();
        let capped_drift = move |g: &[f64]| -> Vec<f64> {
            let mut drift = vec![0.0; d];
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += cov[i * d + j] * g[j];
                }
                drift[i] = gamma * s;
            }
            let norm = crate::linalg::norm2(&drift);
            if clip > 0.0 && norm > clip {
                let sc = clip / norm;
                for v in drift.iter_mut() {
                    *v *= sc;
                }
            }
            drift
        };

        struct ChainResult {
            state: Option<Vec<f64>>,
            logp: f64,
            grad: Vec<f64>,
            auto_rejected: bool,
        }

        let results: Vec<ChainResult> = self
            .states
            .par_iter()
            .zip(self.logp.par_iter())
            .zip(self.grads.par_iter())
            .zip(self.rngs.par_iter_mut())
            .map(|(((x, &lp_x), g_x), rng)| {
                // proposal mean: x + capped(gamma C grad)
                let drift = capped_drift(g_x);
                let mean_fwd: Vec<f64> =
                    x.iter().zip(&drift).map(|(a, b)| a + b).collect();
                let mut eps = vec![0.0; d];
                rng.fill_normal(&mut eps);
                let mut noise = vec![0.0; d];
                chol.mul_l(&eps, &mut noise);
                let scale = (2.0 * gamma).sqrt();
                let prop: Vec<f64> = mean_fwd
                    .iter()
                    .zip(&noise)
                    .map(|(m, n)| m + scale * n)
                    .collect();
                let accept_u = rng.uniform_open();

                let (lp_p, g_p) = target.log_density_and_grad(&prop);
                if !lp_p.is_finite() || g_p.iter().any(|v| !v.is_finite()) {
                    return ChainResult {
                        state: None,
                        logp: lp_x,
                        grad: g_x.clone(),
                        auto_rejected: true,
                    };
                }

                let log_alpha = if metropolis {
                    // reverse mean with the same capped drift rule
                    let rev_drift = capped_drift(&g_p);
                    let mean_rev: Vec<f64> =
                        prop.iter().zip(&rev_drift).map(|(a, b)| a + b).collect();
                    let dev_fwd: Vec<f64> = prop
                        .iter()
                        .zip(&mean_fwd)
                        .map(|(a, b)| a - b)
                        .collect();
                    let dev_rev: Vec<f64> =
                        x.iter().zip(&mean_rev).map(|(a, b)| a - b).collect();
                    let q_fwd = -chol.quad_form_inv(&dev_fwd) / (4.0 * gamma);
                    let q_rev = -chol.quad_form_inv(&dev_rev) / (4.0 * gamma);
                    (lp_p - lp_x) + (q_rev - q_fwd)
                } else {
                    f64::INFINITY // unadjusted Langevin: always move
                };

                if accept_u.ln() < log_alpha {
                    ChainResult {
                        state: Some(prop),
                        logp: lp_p,
                        grad: g_p,
                        auto_rejected: false,
                    }
                } else {
                    ChainResult {
                        state: None,
                        logp: lp_x,
                        grad: g_x.clone(),
                        auto_rejected: false,
                    }
                }
            })
            .collect();

        let mut step_accepts = 0usize;
        for (c, r) in results.into_iter().enumerate() {
            self.proposed[c] += 1;
            if r.auto_rejected {
                self.auto_rejected += 1;
            }
            if let Some(s) = r.state {
                self.states[c] = s;
                self.accepted[c] += 1;
                step_accepts += 1;
            }
            self.logp[c] = r.logp;
            self.grads[c] = r.grad;
        }
        Ok(step_accepts as f64 / self.states.len() as f64)
    }
}

/// Per-chain state trace: `states[step][chain]` is a D-vector.
pub struct Trace {
    pub states: Vec<Vec<Vec<f64>>>,
}

impl Trace {
    pub fn n_steps(&self) -> usize {
        self.states.len()
    }

    /// Pool one coordinate across all chains and steps.
    pub fn pooled_coord(&self, dim: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.states.len() * self.states[0].len());
        for step in &self.states {
            for chain in step {
                out.push(chain[dim]);
            }
        }
        out
    }
}

/// Post-training phase: advance the chains with everything frozen (the
/// preconditioner is not refreshed) and record the trace, including the
/// starting states.
pub fn freeze_and_sample<T: Target>(
    ens: &mut Ensemble,
    target: &T,
    n_steps: usize,
) -> Result<Trace> {
    if ens.chol.is_none() {
        ens.refresh_covariance()?;
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(ens.states.clone());
    for _ in 0..n_steps {
        ens.mala_step(target)?;
        states.push(ens.states.clone());
    }
    Ok(Trace { states })
}

pub fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}
