//! Orchestration of the joint scheme: per outer iteration one ensemble MALA
//! step for all chains, N surrogate updates on one random chain's parameters,
//! and one closure update from all chains; then the frozen post-training
//! sampling phase. Solver mode skips the lower level and routes the closure
//! update through the solver adjoints (Fisher identity); surrogate modes
//! route it through the recorded lower-level steps (truncated first-order
//! differentiation through training, with Adam's per-coordinate step
//! sensitivities).

use crate::closure::{ClosureFn, ClosureModel};
use crate::config::{ForwardMode, RunConfig};
use crate::error::{Error, Result};
use crate::forward::{ExperimentFamily, FamilyBase, SolverForward};
use crate::model::{eval_or_reject, Forward, HierModel, HyperPriorConfig, StateLayout};
use crate::nn::AdamState;
use crate::population::SystemPopulation;
use crate::rng::StreamRng;
use crate::sampler::{freeze_and_sample, Ensemble, EnsembleConfig, Target, Trace};
use crate::surrogate::losses::{self, CollocationSet};
use crate::surrogate::{Surrogate, SurrogateArch, SurrogateFamily, SurrogateForward};
use serde::{Deserialize, Serialize};
use std::path::Path;

struct ModelTarget<'a, F: Forward + ?Sized> {
    model: HierModel<'a, F>,
}

impl<'a, F: Forward + ?Sized> Target for ModelTarget<'a, F> {
    fn dim(&self) -> usize {
        self.model.layout.dim()
    }
    fn log_density_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        eval_or_reject(&self.model, x)
    }
}

pub struct RunArtifacts {
    pub layout: StateLayout,
    pub post_trace: Trace,
    /// thinned training-phase snapshots: (iteration, chain states)
    pub train_trace: Vec<(usize, Vec<Vec<f64>>)>,
    pub acceptance_history: Vec<f64>,
    pub lml_history: Vec<f64>,
    pub surrogate_loss_history: Vec<f64>,
    pub closure: ClosureModel,
    pub surrogate: Option<Surrogate>,
    pub auto_rejections: u64,
    pub skipped_updates: usize,
    pub skipped_ref_solves: usize,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: u64,
    iteration: usize,
    step_size: f64,
    states: Vec<Vec<f64>>,
    rngs: Vec<StreamRng>,
    accepted: Vec<u64>,
    proposed: Vec<u64>,
    auto_rejected: u64,
    closure: ClosureModel,
    surrogate: Option<Surrogate>,
    beta_adam: Option<AdamState>,
    orch_rng: StreamRng,
    acceptance_history: Vec<f64>,
    lml_history: Vec<f64>,
    surrogate_loss_history: Vec<f64>,
    train_trace: Vec<(usize, Vec<Vec<f64>>)>,
    skipped_updates: usize,
    skipped_ref_solves: usize,
}

const CHECKPOINT_VERSION: u32 = 1;

/// A lower-level step record used by the closure hypergradient.
struct StepRecord {
    beta: Vec<f64>,
    /// Adam per-coordinate gradient-to-step sensitivity at this update
    rates: Vec<f64>,
    colloc: Option<CollocationSet>,
}

fn surrogate_family(mode: ForwardMode) -> Option<SurrogateFamily> {
    match mode {
        ForwardMode::Solver => None,
        ForwardMode::FnoSup => Some(SurrogateFamily::SpectralSupervised),
        ForwardMode::FnoPhys => Some(SurrogateFamily::SpectralPhysics),
        ForwardMode::Pinn => Some(SurrogateFamily::CollocationPhysics),
    }
}

fn base_for(cfg: &RunConfig, pop: &SystemPopulation) -> FamilyBase {
    match pop.config.family {
        ExperimentFamily::Darcy => {
            let mut base = pop.config.base();
            if let FamilyBase::Darcy(s) = &mut base {
                // allow a mesh override, e.g. reduced desk meshes
                if cfg.n_side != 0 {
                    s.n_side = cfg.n_side;
                }
            }
            base
        }
        _ => pop.config.base(),
    }
}

fn init_state(
    layout: &StateLayout,
    hyper: &HyperPriorConfig,
    rng: &mut StreamRng,
) -> Vec<f64> {
    let p = layout.p_dims;
    let mut x = Vec::with_capacity(layout.dim());
    for _ in 0..layout.k_systems {
        for i in 0..p {
            x.push(rng.normal_with(hyper.m_mu[i], hyper.s_mu[i].sqrt()));
        }
    }
    if layout.hierarchical {
        for i in 0..p {
            x.push(rng.normal_with(hyper.m_mu[i], hyper.s_mu[i].sqrt()));
        }
        for i in 0..p {
            x.push(rng.normal_with(hyper.m_tau[i], hyper.s_tau[i].sqrt()));
        }
    }
    x
}

fn thetas_of_chain(layout: &StateLayout, x: &[f64]) -> Vec<Vec<f64>> {
    (0..layout.k_systems)
        .map(|k| layout.theta(x, k).to_vec())
        .collect()
}

#[cfg(debug_assertions)]
fn checksum(v: &[f64]) -> f64 {
    v.iter().enumerate().map(|(i, x)| x * (i as f64 + 1.0)).sum()
}

pub struct Runner<'a> {
    pub cfg: &'a RunConfig,
    pub pop: &'a SystemPopulation,
    pub checkpoint_dir: Option<&'a Path>,
}

impl<'a> Runner<'a> {
    pub fn run(&self) -> Result<RunArtifacts> {
        self.run_inner(None)
    }

    pub fn resume(&self, checkpoint: &Path) -> Result<RunArtifacts> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(checkpoint)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} unsupported",
                ck.version
            )));
        }
        if ck.config_hash != self.cfg.config_hash() {
            return Err(Error::Checkpoint(
                "config hash mismatch: the checkpoint was written by a different configuration"
                    .into(),
            ));
        }
        self.run_inner(Some(ck))
    }

    fn run_inner(&self, resume_from: Option<Checkpoint>) -> Result<RunArtifacts> {
        let cfg = self.cfg;
        let pop = self.pop;
        cfg.validate()?;
        let mode = cfg.forward_mode()?;
        let family = cfg.family()?;
        if family != pop.config.family {
            return Err(Error::Config(
                "config experiment does not match the population family".into(),
            ));
        }
        if cfg.k_systems > pop.theta_gt.len() {
            return Err(Error::Config(format!(
                "config wants {} systems, population has {}",
                cfg.k_systems,
                pop.theta_gt.len()
            )));
        }
        let base = base_for(cfg, pop);
        let data: Vec<Vec<f64>> = pop.observations[..cfg.k_systems].to_vec();
        let layouts = pop.layouts[..cfg.k_systems].to_vec();
        let sigma = pop.config.sigma;
        let hyper = cfg.hyperprior();
        let layout = StateLayout {
            k_systems: cfg.k_systems,
            p_dims: family.p_dims(),
            hierarchical: cfg.hierarchical,
        };

        let root = StreamRng::new(cfg.seed);
        let mut orch_rng = root.named("orchestrator", &[]);

        // closure model
        let mut closure_model = {
            let mut rng = root.named("alpha-init", &[]);
            ClosureModel::new(
                cfg.closure.hidden_layers,
                cfg.closure.hidden_width,
                cfg.eta_alpha,
                &mut rng,
            )
        };

        // surrogate
        let (mut surrogate, mut beta_adam) = if let Some(fam) = surrogate_family(mode) {
            let arch = SurrogateArch {
                width: cfg.surrogate.width,
                modes: cfg.surrogate.modes.clone(),
                n_layers: cfg.surrogate.n_layers,
                pinn_hidden_layers: cfg.surrogate.pinn_hidden_layers,
                pinn_hidden_width: cfg.surrogate.pinn_hidden_width,
            };
            let (center, scale) = cfg.normalization();
            let mut rng = root.named("beta-init", &[]);
            let s = Surrogate::init(fam, &base, &arch, center, scale, &mut rng)?;
            let n = s.net.n_params();
            (Some(s), Some(AdamState::new(n, cfg.eta_beta)))
        } else {
            (None, None)
        };

        // ensemble
        let mut ens = {
            let ens_cfg = EnsembleConfig::new(cfg.n_chains, cfg.step_size);
            let hyper_ref = &hyper;
            let layout_ref = &layout;
            Ensemble::init(ens_cfg, layout.dim(), &root, move |rng| {
                init_state(layout_ref, hyper_ref, rng)
            })
        };

        let mut start_iter = 0usize;
        let mut acceptance_history: Vec<f64> = Vec::new();
        let mut lml_history: Vec<f64> = Vec::new();
        let mut surrogate_loss_history: Vec<f64> = Vec::new();
        let mut train_trace: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
        let mut skipped_updates = 0usize;
        let mut skipped_ref_solves = 0usize;

        if let Some(ck) = resume_from {
            start_iter = ck.iteration;
            ens.cfg.step_size = ck.step_size;
            ens.states = ck.states;
            ens.rngs = ck.rngs;
            ens.accepted = ck.accepted;
            ens.proposed = ck.proposed;
            ens.auto_rejected = ck.auto_rejected;
            closure_model = ck.closure;
            surrogate = ck.surrogate;
            beta_adam = ck.beta_adam;
            orch_rng = ck.orch_rng;
            acceptance_history = ck.acceptance_history;
            lml_history = ck.lml_history;
            surrogate_loss_history = ck.surrogate_loss_history;
            train_trace = ck.train_trace;
            skipped_updates = ck.skipped_updates;
            skipped_ref_solves = ck.skipped_ref_solves;
        }

        // optional surrogate warm-up on prior-drawn parameters (default off)
        if start_iter == 0 && cfg.surrogate_warmup > 0 {
            if let (Some(s), Some(adam)) = (surrogate.as_mut(), beta_adam.as_mut()) {
                let closure_fn = closure_model.as_fn();
                for _ in 0..cfg.surrogate_warmup {
                    let p = orch_rng.index(ens.states.len());
                    let thetas = thetas_of_chain(&layout, &ens.states[p]);
                    let refs = if mode == ForwardMode::FnoSup {
                        let r = losses::supervised_refs(&base, &thetas, &closure_fn);
                        skipped_ref_solves += r.skipped;
                        Some(r)
                    } else {
                        None
                    };
                    let (loss, grad) = self.surrogate_loss(
                        mode, s, &base, &thetas, &closure_fn, &mut orch_rng, refs.as_ref(), None,
                    )?;
                    surrogate_loss_history.push(loss);
                    if grad.iter().all(|g| g.is_finite()) {
                        adam.step(s.net.params_mut(), &grad)?;
                    }
                }
            }
        }

        for t in start_iter..cfg.t_train {
            let closure_fn = closure_model.as_fn();
            #[cfg(debug_assertions)]
            let alpha_sum_before_sampling = checksum(&closure_model.net.params);

            // (a) one ensemble MALA step against the current (alpha, beta)
            match (&surrogate, mode) {
                (None, _) => {
                    let fwd = SolverForward::new(base.clone(), &closure_fn, &layouts);
                    let model =
                        HierModel::new(&fwd, &data, sigma, hyper.clone(), cfg.hierarchical);
                    let target = ModelTarget { model };
                    ens.refresh_covariance()?;
                    ens.reevaluate(&target);
                    let acc = ens.mala_step(&target)?;
                    if cfg.adapt_step_size {
                        ens.adapt_step_size(acc, 0.4, 0.05);
                    }
                }
                (Some(s), _) => {
                    let fwd = SurrogateForward {
                        surrogate: s,
                        base: &base,
                        layouts: &layouts,
                    };
                    let model =
                        HierModel::new(&fwd, &data, sigma, hyper.clone(), cfg.hierarchical);
                    let target = ModelTarget { model };
                    ens.refresh_covariance()?;
                    ens.reevaluate(&target);
                    let acc = ens.mala_step(&target)?;
                    if cfg.adapt_step_size {
                        ens.adapt_step_size(acc, 0.4, 0.05);
                    }
                }
            }
            acceptance_history.push(ens.acceptance_rate());

            #[cfg(debug_assertions)]
            {
                // sampling must not have touched the closure
                assert_eq!(
                    alpha_sum_before_sampling,
                    checksum(&closure_model.net.params)
                );
            }

            // (b) lower level: N surrogate updates on one random chain
            let mut window: Vec<StepRecord> = Vec::new();
            let mut chain_thetas: Vec<Vec<f64>> = Vec::new();
            let mut sup_refs: Option<losses::SupervisedRefs> = None;
            if let (Some(s), Some(adam)) = (surrogate.as_mut(), beta_adam.as_mut()) {
                #[cfg(debug_assertions)]
                let chains_sum: f64 = ens.states.iter().map(|x| checksum(x)).sum();

                let p = orch_rng.index(ens.states.len());
                chain_thetas = thetas_of_chain(&layout, &ens.states[p]);
                if mode == ForwardMode::FnoSup {
                    let r = losses::supervised_refs(&base, &chain_thetas, &closure_fn);
                    skipped_ref_solves += r.skipped;
                    sup_refs = Some(r);
                }
                let h = cfg.hypergrad_window.max(1);
                for n in 0..cfg.lower_level_iters {
                    let record_this = n + h >= cfg.lower_level_iters;
                    let mut colloc_for_record = None;
                    let beta_before = if record_this {
                        Some(s.net.params().to_vec())
                    } else {
                        None
                    };
                    let (loss, grad) = self.surrogate_loss(
                        mode,
                        s,
                        &base,
                        &chain_thetas,
                        &closure_fn,
                        &mut orch_rng,
                        sup_refs.as_ref(),
                        Some(&mut colloc_for_record),
                    )?;
                    surrogate_loss_history.push(loss);
                    if grad.iter().all(|g| g.is_finite()) {
                        adam.step(s.net.params_mut(), &grad)?;
                        if let Some(beta) = beta_before {
                            window.push(StepRecord {
                                beta,
                                rates: adam_rates(adam),
                                colloc: colloc_for_record,
                            });
                        }
                    } else {
                        skipped_updates += 1;
                    }
                }

                #[cfg(debug_assertions)]
                {
                    let after: f64 = ens.states.iter().map(|x| checksum(x)).sum();
                    assert_eq!(chains_sum, after);
                }
            }

            // (c) upper level: one closure update from all chains
            let alpha_grad: Option<Vec<f64>> = match &surrogate {
                None => {
                    let fwd = SolverForward::new(base.clone(), &closure_fn, &layouts);
                    let model =
                        HierModel::new(&fwd, &data, sigma, hyper.clone(), cfg.hierarchical);
                    match model.lml_alpha_grad(&ens.states) {
                        Ok(g) => {
                            lml_history.push(-sum_logp(&ens.logp));
                            Some(g)
                        }
                        Err(_) => None,
                    }
                }
                Some(s) => {
                    lml_history.push(-sum_logp(&ens.logp));
                    let fwd = SurrogateForward {
                        surrogate: s,
                        base: &base,
                        layouts: &layouts,
                    };
                    let model =
                        HierModel::new(&fwd, &data, sigma, hyper.clone(), cfg.hierarchical);
                    // g_J = grad_beta of L_LML at the post-acceptance states
                    let mut g_j = vec![0.0; s.net.n_params()];
                    let mut ok = true;
                    for x in &ens.states {
                        if model.beta_grad_into(x, &mut g_j).is_err() {
                            ok = false;
                            break;
                        }
                    }
                    if ok {
                        for v in g_j.iter_mut() {
                            *v = -*v;
                        }
                        self.closure_hypergrad(
                            mode,
                            s,
                            &base,
                            &chain_thetas,
                            &closure_fn,
                            &window,
                            &g_j,
                            cfg.lower_level_iters,
                            sup_refs.as_ref(),
                        )
                        .ok()
                    } else {
                        None
                    }
                }
            };
            match alpha_grad {
                Some(g) if g.iter().all(|v| v.is_finite()) => {
                    if !closure_model.apply_grad(&g)? {
                        skipped_updates += 1;
                    }
                }
                _ => skipped_updates += 1,
            }

            if t % cfg.trace_stride == 0 {
                train_trace.push((t, ens.states.clone()));
            }
            if cfg.checkpoint_every > 0
                && (t + 1) % cfg.checkpoint_every == 0
                && (t + 1) < cfg.t_train
            {
                if let Some(dir) = self.checkpoint_dir {
                    self.write_checkpoint(
                        dir,
                        t + 1,
                        &ens,
                        &closure_model,
                        &surrogate,
                        &beta_adam,
                        &orch_rng,
                        &acceptance_history,
                        &lml_history,
                        &surrogate_loss_history,
                        &train_trace,
                        skipped_updates,
                        skipped_ref_solves,
                    )?;
                }
            }
        }

        // post-training phase: alpha, beta and the preconditioner frozen
        let closure_fn = closure_model.as_fn();
        ens.refresh_covariance()?;
        let post_trace = match &surrogate {
            None => {
                let fwd = SolverForward::new(base.clone(), &closure_fn, &layouts);
                let model = HierModel::new(&fwd, &data, sigma, hyper.clone(), cfg.hierarchical);
                let target = ModelTarget { model };
                ens.reevaluate(&target);
                freeze_and_sample(&mut ens, &target, cfg.t_post)?
            }
            Some(s) => {
                let fwd = SurrogateForward {
                    surrogate: s,
                    base: &base,
                    layouts: &layouts,
                };
                let model = HierModel::new(&fwd, &data, sigma, hyper.clone(), cfg.hierarchical);
                let target = ModelTarget { model };
                ens.reevaluate(&target);
                freeze_and_sample(&mut ens, &target, cfg.t_post)?
            }
        };

        Ok(RunArtifacts {
            layout,
            post_trace,
            train_trace,
            acceptance_history,
            lml_history,
            surrogate_loss_history,
            closure: closure_model,
            surrogate,
            auto_rejections: ens.auto_rejected,
            skipped_updates,
            skipped_ref_solves,
        })
    }

    /// One surrogate-loss evaluation with gradient, dispatched by mode.
    /// Supervised references are computed once per outer iteration by the
    /// caller (theta and alpha are fixed across the N lower-level steps).
    #[allow(clippy::too_many_arguments)]
    fn surrogate_loss(
        &self,
        mode: ForwardMode,
        s: &Surrogate,
        base: &FamilyBase,
        thetas: &[Vec<f64>],
        closure_fn: &ClosureFn,
        rng: &mut StreamRng,
        sup_refs: Option<&losses::SupervisedRefs>,
        record_colloc: Option<&mut Option<CollocationSet>>,
    ) -> Result<(f64, Vec<f64>)> {
        match mode {
            ForwardMode::FnoSup => {
                let refs = sup_refs.expect("supervised refs provided per outer iteration");
                Ok(losses::loss_supervised(s, base, thetas, refs))
            }
            ForwardMode::FnoPhys => match base {
                FamilyBase::MassDamper(_) => {
                    Ok(losses::loss_physics_ode(s, base, thetas, closure_fn))
                }
                FamilyBase::Darcy(_) => losses::loss_weakform_darcy(s, base, thetas, closure_fn),
                FamilyBase::Burgers(_) => Err(Error::Config(
                    "physics spectral loss unavailable for Burgers".into(),
                )),
            },
            ForwardMode::Pinn => {
                let pts = losses::sample_collocation(
                    base,
                    self.cfg.surrogate.colloc_interior,
                    self.cfg.surrogate.colloc_boundary,
                    rng,
                );
                let out = match base {
                    FamilyBase::MassDamper(_) => {
                        losses::loss_collocation_ode(s, base, thetas, closure_fn, &pts)
                    }
                    FamilyBase::Darcy(_) => {
                        losses::loss_collocation_darcy(s, base, thetas, closure_fn, &pts)
                    }
                    FamilyBase::Burgers(_) => {
                        return Err(Error::Config(
                            "collocation surrogate unavailable for Burgers".into(),
                        ))
                    }
                };
                if let Some(slot) = record_colloc {
                    *slot = Some(pts);
                }
                Ok(out)
            }
            ForwardMode::Solver => unreachable!(),
        }
    }

    /// dJ/d alpha through the recorded lower-level steps.
    #[allow(clippy::too_many_arguments)]
    fn closure_hypergrad(
        &self,
        mode: ForwardMode,
        s: &Surrogate,
        base: &FamilyBase,
        thetas: &[Vec<f64>],
        closure_fn: &ClosureFn,
        window: &[StepRecord],
        g_j: &[f64],
        n_lower: usize,
        sup_refs: Option<&losses::SupervisedRefs>,
    ) -> Result<Vec<f64>> {
        let n_alpha = closure_fn.n_params();
        let mut accum = vec![0.0; n_alpha];
        if window.is_empty() || n_alpha == 0 {
            return Ok(accum);
        }
        let mut s_at = s.clone();
        for rec in window {
            s_at.net.params_mut().copy_from_slice(&rec.beta);
            let g_eff: Vec<f64> = g_j.iter().zip(&rec.rates).map(|(g, r)| g * r).collect();
            match mode {
                ForwardMode::FnoSup => {
                    let refs = sup_refs.expect("supervised refs available");
                    losses::supervised_alpha_hypergrad(
                        &s_at, base, thetas, refs, closure_fn, &g_eff, &mut accum,
                    )?;
                }
                ForwardMode::FnoPhys => match base {
                    FamilyBase::MassDamper(_) => losses::physics_ode_alpha_hypergrad(
                        &s_at, base, thetas, closure_fn, &g_eff, &mut accum,
                    ),
                    FamilyBase::Darcy(_) => losses::weakform_alpha_hypergrad(
                        &s_at, base, thetas, closure_fn, &g_eff, &mut accum,
                    )?,
                    FamilyBase::Burgers(_) => {}
                },
                ForwardMode::Pinn => {
                    if let Some(pts) = &rec.colloc {
                        losses::collocation_ode_alpha_hypergrad(
                            &s_at, base, thetas, closure_fn, pts, &g_eff, &mut accum,
                        );
                    }
                }
                ForwardMode::Solver => unreachable!(),
            }
        }
        // scale the windowed sum up to the full unroll length and negate
        let scale = -(n_lower as f64) / window.len() as f64;
        for v in accum.iter_mut() {
            *v *= scale;
        }
        Ok(accum)
    }

    #[allow(clippy::too_many_arguments)]
    fn write_checkpoint(
        &self,
        dir: &Path,
        iteration: usize,
        ens: &Ensemble,
        closure: &ClosureModel,
        surrogate: &Option<Surrogate>,
        beta_adam: &Option<AdamState>,
        orch_rng: &StreamRng,
        acceptance_history: &[f64],
        lml_history: &[f64],
        surrogate_loss_history: &[f64],
        train_trace: &[(usize, Vec<Vec<f64>>)],
        skipped_updates: usize,
        skipped_ref_solves: usize,
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.cfg.config_hash(),
            iteration,
            step_size: ens.cfg.step_size,
            states: ens.states.clone(),
            rngs: ens.rngs.clone(),
            accepted: ens.accepted.clone(),
            proposed: ens.proposed.clone(),
            auto_rejected: ens.auto_rejected,
            closure: closure.clone(),
            surrogate: surrogate.clone(),
            beta_adam: beta_adam.clone(),
            orch_rng: orch_rng.clone(),
            acceptance_history: acceptance_history.to_vec(),
            lml_history: lml_history.to_vec(),
            surrogate_loss_history: surrogate_loss_history.to_vec(),
            train_trace: train_trace.to_vec(),
            skipped_updates,
            skipped_ref_solves,
        };
        let tmp = dir.join(format!("checkpoint_{iteration}.json.tmp"));
        std::fs::write(&tmp, serde_json::to_string(&ck)?)?;
        std::fs::rename(&tmp, dir.join(format!("checkpoint_{iteration}.json")))?;
        Ok(())
    }
}

fn adam_rates(adam: &AdamState) -> Vec<f64> {
    let t = adam.step.max(1) as i32;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);
    adam.v
        .iter()
        .map(|&v| adam.lr * ((1.0 - adam.beta1) / bc1) / ((v / bc2).sqrt() + adam.eps))
        .collect()
}

fn sum_logp(logp: &[f64]) -> f64 {
    logp.iter().filter(|v| v.is_finite()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::desk_config;
    use crate::population::{gen_population, PopulationConfig};

    fn tiny_pop(k: usize, seed: u64) -> SystemPopulation {
        let cfg = PopulationConfig::defaults(ExperimentFamily::MassDamper, k, seed);
        gen_population(&cfg).unwrap()
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = desk_config("exp1-solver").unwrap();
        cfg.k_systems = 1;
        cfg.n_chains = 2;
        cfg.t_train = 1;
        cfg.t_post = 3;
        cfg.trace_stride = 1;
        cfg
    }

    #[test]
    fn smoke_run_bookkeeping() {
        let pop = tiny_pop(1, 4);
        let cfg = tiny_cfg();
        let runner = Runner {
            cfg: &cfg,
            pop: &pop,
            checkpoint_dir: None,
        };
        let art = runner.run().unwrap();
        assert_eq!(art.post_trace.n_steps(), 4); // post + initial states
        assert_eq!(art.acceptance_history.len(), 1);
        assert_eq!(art.lml_history.len(), 1);
        assert!(art.surrogate.is_none());
        assert!(art.surrogate_loss_history.is_empty());
    }

    #[test]
    fn pinn_smoke_has_lower_level_history() {
        let pop = tiny_pop(2, 5);
        let mut cfg = desk_config("exp1-pinn").unwrap();
        cfg.k_systems = 2;
        cfg.n_chains = 3;
        cfg.t_train = 2;
        cfg.t_post = 1;
        cfg.lower_level_iters = 3;
        cfg.surrogate.colloc_interior = 8;
        cfg.surrogate.pinn_hidden_layers = 2;
        cfg.surrogate.pinn_hidden_width = 8;
        cfg.closure.hidden_layers = 1;
        cfg.closure.hidden_width = 6;
        let runner = Runner {
            cfg: &cfg,
            pop: &pop,
            checkpoint_dir: None,
        };
        let art = runner.run().unwrap();
        // one surrogate-loss entry per lower-level step
        assert_eq!(art.surrogate_loss_history.len(), 2 * 3);
        assert!(art.surrogate.is_some());
    }

    #[test]
    fn deterministic_and_resumable() {
        let pop = tiny_pop(2, 6);
        let mut cfg = desk_config("exp1-solver").unwrap();
        cfg.k_systems = 2;
        cfg.n_chains = 4;
        cfg.t_train = 6;
        cfg.t_post = 2;
        cfg.checkpoint_every = 3;
        cfg.closure.hidden_layers = 1;
        cfg.closure.hidden_width = 6;

        let dir = std::env::temp_dir().join("cb_ckpt_test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();

        let runner = Runner {
            cfg: &cfg,
            pop: &pop,
            checkpoint_dir: Some(&dir),
        };
        let full = runner.run().unwrap();

        // resume from the iteration-3 checkpoint and compare the tail
        let resumed = runner.resume(&dir.join("checkpoint_3.json")).unwrap();
        assert_eq!(full.post_trace.states, resumed.post_trace.states);
        assert_eq!(full.closure.net.params, resumed.closure.net.params);

        // altered config is rejected
        let mut cfg2 = cfg.clone();
        cfg2.step_size *= 2.0;
        let runner2 = Runner {
            cfg: &cfg2,
            pop: &pop,
            checkpoint_dir: None,
        };
        let err = match runner2.resume(&dir.join("checkpoint_3.json")) {
            Err(e) => e,
            Ok(_) => panic!("resume with altered config should fail"),
        };
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn non_hierarchical_layout_shrinks_state() {
        let pop = tiny_pop(2, 8);
        let mut cfg = tiny_cfg();
        cfg.k_systems = 2;
        cfg.hierarchical = false;
        let runner = Runner {
            cfg: &cfg,
            pop: &pop,
            checkpoint_dir: None,
        };
        let art = runner.run().unwrap();
        assert_eq!(art.layout.dim(), 2 * 3);
        assert!(!art.layout.hierarchical);
    }
}
