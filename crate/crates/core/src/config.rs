//! Run configuration: a TOML file describing one experiment run. Desk-scale
//! defaults live here; the paper-scale settings ship as config files.

use crate::error::{Error, Result};
use crate::forward::ExperimentFamily;
use crate::model::HyperPriorConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardMode {
    Solver,
    FnoSup,
    FnoPhys,
    Pinn,
}

impl ForwardMode {
    pub fn parse(s: &str) -> Result<ForwardMode> {
        match s {
            "solver" => Ok(ForwardMode::Solver),
            "fno-sup" => Ok(ForwardMode::FnoSup),
            "fno-phys" => Ok(ForwardMode::FnoPhys),
            "pinn" => Ok(ForwardMode::Pinn),
            other => Err(Error::Config(format!(
                "unknown forward mode '{other}' (expected solver|fno-sup|fno-phys|pinn)"
            ))),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ClosureConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for ClosureConfig {
    fn default() -> Self {
        ClosureConfig {
            hidden_layers: 2,
            hidden_width: 24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SurrogateConfig {
    pub width: usize,
    pub modes: Vec<usize>,
    pub n_layers: usize,
    pub pinn_hidden_layers: usize,
    pub pinn_hidden_width: usize,
    pub colloc_interior: usize,
    pub colloc_boundary: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            width: 16,
            modes: vec![12],
            n_layers: 3,
            pinn_hidden_layers: 4,
            pinn_hidden_width: 48,
            colloc_interior: 128,
            colloc_boundary: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HyperPriorToml {
    pub m_mu: Option<Vec<f64>>,
    pub s_mu: Option<Vec<f64>>,
    pub m_tau: Option<Vec<f64>>,
    pub s_tau: Option<Vec<f64>>,
}

impl Default for HyperPriorToml {
    fn default() -> Self {
        HyperPriorToml {
            m_mu: None,
            s_mu: None,
            m_tau: None,
            s_tau: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub experiment: String,
    #[serde(default = "RunConfig::default_forward")]
    pub forward: String,
    #[serde(default = "default_true")]
    pub hierarchical: bool,
    pub k_systems: usize,
    pub n_chains: usize,
    pub step_size: f64,
    pub t_train: usize,
    pub t_post: usize,
    #[serde(default)]
    pub lower_level_iters: usize,
    pub eta_alpha: f64,
    #[serde(default)]
    pub eta_beta: f64,
    pub seed: u64,
    #[serde(default = "RunConfig::default_hypergrad_window")]
    pub hypergrad_window: usize,
    #[serde(default = "RunConfig::default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "RunConfig::default_trace_stride")]
    pub trace_stride: usize,
    /// adapt the MALA step size toward ~0.4 acceptance during training
    #[serde(default = "default_true")]
    pub adapt_step_size: bool,
    /// Darcy mesh override
    #[serde(default)]
    pub n_side: usize,
    /// surrogate warm-up steps before the first MALA iteration (default off)
    #[serde(default)]
    pub surrogate_warmup: usize,
    #[serde(default)]
    pub closure: ClosureConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub hyperprior: HyperPriorToml,
    #[serde(default)]
    pub theta_center: Option<Vec<f64>>,
    #[serde(default)]
    pub theta_scale: Option<Vec<f64>>,
    /// population overrides used by `gen`
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub mu_gt: Option<Vec<f64>>,
    #[serde(default)]
    pub tau_gt: Option<Vec<f64>>,
}

impl RunConfig {
    fn default_forward() -> String {
        "solver".into()
    }
    fn default_hypergrad_window() -> usize {
        4
    }
    fn default_checkpoint_every() -> usize {
        500
    }
    fn default_trace_stride() -> usize {
        10
    }

    pub fn family(&self) -> Result<ExperimentFamily> {
        match self.experiment.as_str() {
            "mass-damper" | "exp1" => Ok(ExperimentFamily::MassDamper),
            "darcy" | "exp2" => Ok(ExperimentFamily::Darcy),
            "burgers" | "exp3" => Ok(ExperimentFamily::Burgers),
            other => Err(Error::Config(format!(
                "unknown experiment '{other}' (expected mass-damper|darcy|burgers)"
            ))),
        }
    }

    pub fn forward_mode(&self) -> Result<ForwardMode> {
        ForwardMode::parse(&self.forward)
    }

    pub fn validate(&self) -> Result<()> {
        let family = self.family()?;
        let mode = self.forward_mode()?;
        if self.t_train == 0 {
            return Err(Error::Config("t_train must be positive".into()));
        }
        if self.n_chains < 2 {
            return Err(Error::Config("n_chains must be at least 2".into()));
        }
        if self.step_size <= 0.0 || self.eta_alpha <= 0.0 {
            return Err(Error::Config("rates must be positive".into()));
        }
        if mode != ForwardMode::Solver {
            if self.lower_level_iters == 0 {
                return Err(Error::Config(
                    "surrogate modes need lower_level_iters > 0".into(),
                ));
            }
            if self.eta_beta <= 0.0 {
                return Err(Error::Config("surrogate modes need eta_beta > 0".into()));
            }
        }
        if mode == ForwardMode::Pinn && family == ExperimentFamily::Burgers {
            return Err(Error::Config(
                "the Burgers family has no collocation surrogate".into(),
            ));
        }
        if mode == ForwardMode::FnoPhys && family == ExperimentFamily::Burgers {
            return Err(Error::Config(
                "the Burgers family trains its spectral surrogate supervised only".into(),
            ));
        }
        if let Some(c) = &self.theta_center {
            if c.len() != family.p_dims() {
                return Err(Error::Config("theta_center dimension mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn hyperprior(&self) -> HyperPriorConfig {
        let p = self
            .family()
            .map(|f| f.p_dims())
            .unwrap_or(self.theta_center.as_ref().map_or(1, |c| c.len()));
        let mut hp = HyperPriorConfig::default_for(p);
        if let Some(v) = &self.hyperprior.m_mu {
            hp.m_mu = v.clone();
        }
        if let Some(v) = &self.hyperprior.s_mu {
            hp.s_mu = v.clone();
        }
        if let Some(v) = &self.hyperprior.m_tau {
            hp.m_tau = v.clone();
        }
        if let Some(v) = &self.hyperprior.s_tau {
            hp.s_tau = v.clone();
        }
        hp
    }

    /// Default input normalization per family.
    pub fn normalization(&self) -> (Vec<f64>, Vec<f64>) {
        if let (Some(c), Some(s)) = (&self.theta_center, &self.theta_scale) {
            return (c.clone(), s.clone());
        }
        match self.family().unwrap_or(ExperimentFamily::MassDamper) {
            ExperimentFamily::MassDamper => (vec![1.6, 0.0, 2.0], vec![1.5, 3.0, 3.0]),
            ExperimentFamily::Darcy => (vec![0.0; 3], vec![2.0; 3]),
            ExperimentFamily::Burgers => (vec![-3.0, 1.4], vec![1.5, 1.5]),
        }
    }

    pub fn mesh_n_side(&self) -> usize {
        if self.n_side != 0 {
            self.n_side
        } else {
            33
        }
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Stable hash of the serialized config, used to guard resumes.
    pub fn config_hash(&self) -> u64 {
        let text = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Baked-in desk-scale configurations for the acceptance experiments.
pub fn desk_config(name: &str) -> Result<RunConfig> {
    let text = match name {
        "exp1-solver" => EXP1_SOLVER,
        "exp1-pinn" => EXP1_PINN,
        "exp1-hyper-k20" => EXP1_HYPER_K20,
        "exp2-fno-sup" => EXP2_FNO_SUP,
        "exp3-fno-sup" => EXP3_FNO_SUP,
        other => {
            return Err(Error::Config(format!("unknown desk config '{other}'")));
        }
    };
    RunConfig::from_toml_str(text)
}

pub const EXP1_SOLVER: &str = r#"
experiment = "mass-damper"
forward = "solver"
k_systems = 10
n_chains = 56
step_size = 0.12
t_train = 900
t_post = 500
eta_alpha = 4e-3
seed = 1
"#;

pub const EXP1_PINN: &str = r#"
experiment = "mass-damper"
forward = "pinn"
k_systems = 10
n_chains = 56
step_size = 0.12
t_train = 1200
t_post = 600
lower_level_iters = 8
eta_alpha = 4e-3
eta_beta = 3e-3
seed = 1
hypergrad_window = 4

[surrogate]
pinn_hidden_layers = 4
pinn_hidden_width = 48
colloc_interior = 96
colloc_boundary = 0
"#;

pub const EXP1_HYPER_K20: &str = r#"
experiment = "mass-damper"
forward = "pinn"
k_systems = 20
n_chains = 88
step_size = 0.10
t_train = 1200
t_post = 600
lower_level_iters = 8
eta_alpha = 4e-3
eta_beta = 3e-3
seed = 2
hypergrad_window = 4

[surrogate]
colloc_interior = 96
colloc_boundary = 0
"#;

pub const EXP2_FNO_SUP: &str = r#"
experiment = "darcy"
forward = "fno-sup"
k_systems = 10
n_chains = 56
step_size = 0.10
t_train = 900
t_post = 450
lower_level_iters = 6
eta_alpha = 4e-3
eta_beta = 4e-3
seed = 1
n_side = 17
hypergrad_window = 2

[surrogate]
width = 10
modes = [6, 6]
n_layers = 3
"#;

pub const EXP3_FNO_SUP: &str = r#"
experiment = "burgers"
forward = "fno-sup"
k_systems = 10
n_chains = 40
step_size = 0.10
t_train = 900
t_post = 450
lower_level_iters = 6
eta_alpha = 4e-3
eta_beta = 4e-3
seed = 1
hypergrad_window = 2

[closure]
hidden_layers = 1
hidden_width = 16

[surrogate]
width = 16
modes = [10]
n_layers = 3
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_configs_parse_and_validate() {
        for name in [
            "exp1-solver",
            "exp1-pinn",
            "exp1-hyper-k20",
            "exp2-fno-sup",
            "exp3-fno-sup",
        ] {
            let cfg = desk_config(name).unwrap();
            assert!(cfg.k_systems >= 10, "{name}");
        }
    }

    #[test]
    fn rejects_bad_modes() {
        let text = EXP1_SOLVER.replace("\"solver\"", "\"warp-drive\"");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = EXP3_FNO_SUP.replace("\"fno-sup\"", "\"pinn\"");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn hash_changes_with_config() {
        let a = desk_config("exp1-solver").unwrap();
        let mut b = a.clone();
        b.step_size *= 2.0;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
