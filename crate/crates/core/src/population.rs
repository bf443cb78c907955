//! Synthetic population generation: draw per-system parameters from the
//! ground-truth hyperprior, simulate fields with the ground-truth closure,
//! and observe them through per-system layouts. Serializes to a directory:
//! population.json, fields/{k}.f64, obs/{k}.csv.

use crate::closure::ClosureFn;
use crate::error::{Error, Result};
use crate::forward::{ExperimentFamily, FamilyBase};
use crate::rng::StreamRng;
use crate::solvers::burgers::BurgersSpec;
use crate::solvers::darcy::DarcySpec;
use crate::solvers::mass_damper::MassDamperSpec;
use crate::solvers::observe::{self, ObservationLayout};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PopulationConfig {
    pub family: ExperimentFamily,
    pub k_systems: usize,
    /// ground-truth population mean (log-space where parameters are
    /// log-transformed) and variance per dimension
    pub mu_gt: Vec<f64>,
    pub tau_gt: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
    /// Darcy mesh nodes per side
    pub n_side: usize,
    /// Darcy observation points per system
    pub obs_per_system: usize,
    /// Burgers fixed spatial observation stride
    pub space_stride: usize,
}

impl PopulationConfig {
    pub fn defaults(family: ExperimentFamily, k_systems: usize, seed: u64) -> Self {
        match family {
            ExperimentFamily::MassDamper => PopulationConfig {
                family,
                k_systems,
                mu_gt: vec![5.0f64.ln(), 0.0, 2.0],
                tau_gt: vec![0.03, 2.0, 2.0],
                sigma: 0.15,
                seed,
                n_side: 0,
                obs_per_system: 0,
                space_stride: 0,
            },
            ExperimentFamily::Darcy => PopulationConfig {
                family,
                k_systems,
                mu_gt: vec![0.2, -0.1, 0.2],
                tau_gt: vec![0.5, 0.5, 0.5],
                sigma: 0.1,
                seed,
                n_side: 33,
                obs_per_system: 60,
                space_stride: 0,
            },
            ExperimentFamily::Burgers => PopulationConfig {
                family,
                k_systems,
                mu_gt: vec![0.05f64.ln(), 1.4],
                tau_gt: vec![0.07, 0.2],
                sigma: 0.2,
                seed,
                n_side: 0,
                obs_per_system: 0,
                space_stride: 5,
            },
        }
    }

    pub fn gt_closure(&self) -> ClosureFn {
        match self.family {
            ExperimentFamily::MassDamper => ClosureFn::Cubic { a: 0.08, b: 0.08 },
            ExperimentFamily::Darcy => ClosureFn::HalfSquare,
            ExperimentFamily::Burgers => ClosureFn::SigmoidJump {
                scale: 7.0,
                gain: 3.0,
            },
        }
    }

    pub fn base(&self) -> FamilyBase {
        match self.family {
            ExperimentFamily::MassDamper => {
                FamilyBase::MassDamper(MassDamperSpec::paper(0.0, 0.0, 0.0))
            }
            ExperimentFamily::Darcy => {
                FamilyBase::Darcy(DarcySpec::with_mesh([0.0; 3], self.n_side))
            }
            ExperimentFamily::Burgers => FamilyBase::Burgers(BurgersSpec::paper(0.0, 0.0)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemPopulation {
    pub config: PopulationConfig,
    /// per-system parameters in the inference parameterization
    pub theta_gt: Vec<Vec<f64>>,
    pub layouts: Vec<ObservationLayout>,
    pub observations: Vec<Vec<f64>>,
    /// noiseless ground-truth fields in the solver layout
    pub fields_gt: Vec<Vec<f64>>,
}

fn draw_layout(cfg: &PopulationConfig, base: &FamilyBase, k: usize, root: &StreamRng) -> ObservationLayout {
    match base {
        FamilyBase::MassDamper(s) => observe::mass_damper_layout(s.n_nodes()),
        FamilyBase::Darcy(s) => {
            let mut rng = root.named("layout", &[k as u64]);
            let n = s.n_side;
            let interior: Vec<usize> = (0..n * n)
                .filter(|id| {
                    let (i, j) = (id / n, id % n);
                    i > 0 && i < n - 1 && j > 0 && j < n - 1
                })
                .collect();
            let picks = rng.distinct_indices(interior.len(), cfg.obs_per_system.min(interior.len()));
            ObservationLayout {
                indices: picks.into_iter().map(|p| interior[p]).collect(),
                sigma: cfg.sigma,
            }
        }
        FamilyBase::Burgers(s) => {
            let mut rng = root.named("layout", &[k as u64]);
            let n_t = 5 + rng.index(6); // 5..=10 temporal observations
            let frames = rng.distinct_indices(s.n_frames() - 1, n_t);
            let locs: Vec<usize> = (0..s.nx).step_by(cfg.space_stride.max(1)).collect();
            let mut indices = Vec::with_capacity(n_t * locs.len());
            for f in frames {
                let frame = f + 1; // skip the initial condition frame
                for &x in &locs {
                    indices.push(frame * s.nx + x);
                }
            }
            ObservationLayout {
                indices,
                sigma: cfg.sigma,
            }
        }
    }
}

/// Draw the population, simulate, observe. Redraws a system's parameters on
/// solver divergence, up to a bounded retry count.
pub fn gen_population(cfg: &PopulationConfig) -> Result<SystemPopulation> {
    let base = cfg.base();
    let gt_closure = cfg.gt_closure();
    let root = StreamRng::new(cfg.seed);
    let p = cfg.family.p_dims();

    let mut theta_gt = Vec::with_capacity(cfg.k_systems);
    let mut fields = Vec::with_capacity(cfg.k_systems);
    for k in 0..cfg.k_systems {
        let mut rng = root.named("theta", &[k as u64]);
        let mut drawn = None;
        for _attempt in 0..20 {
            let theta: Vec<f64> = (0..p)
                .map(|i| rng.normal_with(cfg.mu_gt[i], cfg.tau_gt[i].sqrt()))
                .collect();
            match base.solve_field(&theta, &gt_closure) {
                Ok(field) => {
                    drawn = Some((theta, field));
                    break;
                }
                Err(_) => continue,
            }
        }
        let (theta, field) = drawn.ok_or_else(|| {
            Error::Config(format!("system {k}: solver diverged for 20 parameter draws"))
        })?;
        theta_gt.push(theta);
        fields.push(field);
    }

    let mut layouts = Vec::with_capacity(cfg.k_systems);
    let mut observations = Vec::with_capacity(cfg.k_systems);
    for k in 0..cfg.k_systems {
        let layout = draw_layout(cfg, &base, k, &root);
        let mut rng = root.named("obs", &[k as u64]);
        let y = observe::observe(&fields[k], &layout, &mut rng, true)?;
        layouts.push(layout);
        observations.push(y);
    }

    Ok(SystemPopulation {
        config: cfg.clone(),
        theta_gt,
        layouts,
        observations,
        fields_gt: fields,
    })
}

#[derive(Serialize, Deserialize)]
struct PopulationManifest {
    config: PopulationConfig,
    theta_gt: Vec<Vec<f64>>,
    layouts: Vec<ObservationLayout>,
}

impl SystemPopulation {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("fields"))?;
        fs::create_dir_all(dir.join("obs"))?;
        let manifest = PopulationManifest {
            config: self.config.clone(),
            theta_gt: self.theta_gt.clone(),
            layouts: self.layouts.clone(),
        };
        fs::write(
            dir.join("population.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        for (k, field) in self.fields_gt.iter().enumerate() {
            crate::nn::snapshot::write_f64_blob(&dir.join(format!("fields/{k}.f64")), field)?;
        }
        for (k, y) in self.observations.iter().enumerate() {
            let mut f = fs::File::create(dir.join(format!("obs/{k}.csv")))?;
            writeln!(f, "index,value")?;
            for (ix, v) in self.layouts[k].indices.iter().zip(y) {
                writeln!(f, "{ix},{v:.17e}")?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SystemPopulation> {
        let manifest: PopulationManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("population.json"))?)?;
        let k = manifest.config.k_systems;
        let mut fields = Vec::with_capacity(k);
        let mut observations = Vec::with_capacity(k);
        for i in 0..k {
            fields.push(crate::nn::snapshot::read_f64_blob(
                &dir.join(format!("fields/{i}.f64")),
            )?);
            let text = fs::read_to_string(dir.join(format!("obs/{i}.csv")))?;
            let mut y = Vec::new();
            for line in text.lines().skip(1) {
                let mut parts = line.split(',');
                let _ix = parts.next();
                let v: f64 = parts
                    .next()
                    .ok_or_else(|| Error::Config(format!("malformed obs row: {line}")))?
                    .parse()
                    .map_err(|e| Error::Config(format!("bad float in obs: {e}")))?;
                y.push(v);
            }
            observations.push(y);
        }
        Ok(SystemPopulation {
            config: manifest.config,
            theta_gt: manifest.theta_gt,
            layouts: manifest.layouts,
            observations,
            fields_gt: fields,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_means_within_clt_band() {
        let cfg = PopulationConfig::defaults(ExperimentFamily::MassDamper, 20, 7);
        let pop = gen_population(&cfg).unwrap();
        assert_eq!(pop.theta_gt.len(), 20);
        for i in 0..3 {
            let mean: f64 =
                pop.theta_gt.iter().map(|t| t[i]).sum::<f64>() / pop.theta_gt.len() as f64;
            let band = 3.0 * (cfg.tau_gt[i] / 20.0).sqrt();
            assert!(
                (mean - cfg.mu_gt[i]).abs() < band,
                "dim {i}: mean {mean} vs {} (band {band})",
                cfg.mu_gt[i]
            );
        }
    }

    #[test]
    fn zero_variance_makes_identical_systems() {
        let mut cfg = PopulationConfig::defaults(ExperimentFamily::MassDamper, 5, 3);
        cfg.tau_gt = vec![1e-30; 3];
        let pop = gen_population(&cfg).unwrap();
        for t in &pop.theta_gt {
            for i in 0..3 {
                assert!((t[i] - cfg.mu_gt[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn burgers_layout_has_5_to_10_temporal_observations() {
        let cfg = PopulationConfig::defaults(ExperimentFamily::Burgers, 8, 11);
        let pop = gen_population(&cfg).unwrap();
        let nx = 50;
        for layout in &pop.layouts {
            let mut frames: Vec<usize> = layout.indices.iter().map(|ix| ix / nx).collect();
            frames.dedup();
            assert!((5..=10).contains(&frames.len()), "{} frames", frames.len());
            // never the initial frame
            assert!(frames.iter().all(|&f| f >= 1));
        }
    }

    #[test]
    fn roundtrips_through_disk() {
        let cfg = PopulationConfig::defaults(ExperimentFamily::MassDamper, 3, 5);
        let pop = gen_population(&cfg).unwrap();
        let dir = std::env::temp_dir().join("cb_pop_roundtrip");
        let _ = fs::remove_dir_all(&dir);
        pop.save(&dir).unwrap();
        let back = SystemPopulation::load(&dir).unwrap();
        assert_eq!(pop.theta_gt, back.theta_gt);
        assert_eq!(pop.fields_gt, back.fields_gt);
        for (a, b) in pop.observations.iter().zip(&back.observations) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = PopulationConfig::defaults(ExperimentFamily::Darcy, 2, 9);
        let mut small = cfg.clone();
        small.n_side = 9;
        small.obs_per_system = 12;
        let a = gen_population(&small).unwrap();
        let b = gen_population(&small).unwrap();
        assert_eq!(a.theta_gt, b.theta_gt);
        assert_eq!(a.observations, b.observations);
    }
}
