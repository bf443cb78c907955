//! Numerical-solver implementations of the [`Forward`](crate::model::Forward)
//! contract for the three experiment families. The mass-damper path batches
//! whole populations through the shared closure; the PDE families loop.

use crate::closure::ClosureFn;
use crate::error::Result;
use crate::model::Forward;
use crate::solvers::burgers::{
    rk4_adjoint, rk4_solve_for_adjoint, rk4_solve_with_sensitivity, BurgersSpec,
};
use crate::solvers::darcy::{
    darcy_fixed_point, darcy_grad, darcy_theta_sensitivities, DarcySpec,
};
use crate::solvers::mass_damper::{
    leapfrog_adjoint, leapfrog_solve_population, leapfrog_solve_with_sensitivity, MassDamperSpec,
};
use crate::solvers::observe::ObservationLayout;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentFamily {
    MassDamper,
    Darcy,
    Burgers,
}

impl ExperimentFamily {
    pub fn p_dims(&self) -> usize {
        match self {
            ExperimentFamily::MassDamper | ExperimentFamily::Darcy => 3,
            ExperimentFamily::Burgers => 2,
        }
    }
}

/// Template specs carrying everything except the inferred parameters.
#[derive(Debug, Clone)]
pub enum FamilyBase {
    MassDamper(MassDamperSpec),
    Darcy(DarcySpec),
    Burgers(BurgersSpec),
}

impl FamilyBase {
    pub fn family(&self) -> ExperimentFamily {
        match self {
            FamilyBase::MassDamper(_) => ExperimentFamily::MassDamper,
            FamilyBase::Darcy(_) => ExperimentFamily::Darcy,
            FamilyBase::Burgers(_) => ExperimentFamily::Burgers,
        }
    }

    pub fn mass_damper_spec(&self, theta: &[f64]) -> MassDamperSpec {
        match self {
            FamilyBase::MassDamper(base) => MassDamperSpec {
                log_k: theta[0],
                u0: theta[1],
                v0: theta[2],
                ..base.clone()
            },
            _ => panic!("not a mass-damper base"),
        }
    }

    pub fn darcy_spec(&self, theta: &[f64]) -> DarcySpec {
        match self {
            FamilyBase::Darcy(base) => DarcySpec {
                z: [theta[0], theta[1], theta[2]],
                ..base.clone()
            },
            _ => panic!("not a darcy base"),
        }
    }

    pub fn burgers_spec(&self, theta: &[f64]) -> BurgersSpec {
        match self {
            FamilyBase::Burgers(base) => BurgersSpec {
                log_nu: theta[0],
                z: theta[1],
                ..base.clone()
            },
            _ => panic!("not a burgers base"),
        }
    }

    /// Full solution field for one system (carrier layout per family:
    /// mass-damper = positions over time nodes; darcy = nodal field;
    /// burgers = flattened frames).
    pub fn solve_field(&self, theta: &[f64], closure: &ClosureFn) -> Result<Vec<f64>> {
        match self {
            FamilyBase::MassDamper(_) => {
                let spec = self.mass_damper_spec(theta);
                let tr = crate::solvers::mass_damper::leapfrog_solve(&spec, closure)?;
                Ok(tr.w)
            }
            FamilyBase::Darcy(_) => {
                let spec = self.darcy_spec(theta);
                let (u, _) = darcy_fixed_point(&spec, closure)?;
                Ok(u)
            }
            FamilyBase::Burgers(_) => {
                let spec = self.burgers_spec(theta);
                let sol = crate::solvers::burgers::rk4_burgers_solve(&spec, closure)?;
                Ok(sol.frames.into_data())
            }
        }
    }
}

pub struct SolverForward<'a> {
    pub base: FamilyBase,
    pub closure: &'a ClosureFn,
    pub layouts: &'a [ObservationLayout],
}

impl<'a> SolverForward<'a> {
    pub fn new(
        base: FamilyBase,
        closure: &'a ClosureFn,
        layouts: &'a [ObservationLayout],
    ) -> Self {
        SolverForward {
            base,
            closure,
            layouts,
        }
    }

    fn field_len(&self) -> usize {
        match &self.base {
            FamilyBase::MassDamper(s) => s.n_nodes(),
            FamilyBase::Darcy(s) => s.n_side * s.n_side,
            FamilyBase::Burgers(s) => s.n_frames() * s.nx,
        }
    }
}

impl<'a> Forward for SolverForward<'a> {
    fn p_dims(&self) -> usize {
        self.base.family().p_dims()
    }

    fn n_obs(&self, k: usize) -> usize {
        self.layouts[k].len()
    }

    fn predict(&self, k: usize, theta: &[f64]) -> Result<Vec<f64>> {
        let field = self.base.solve_field(theta, self.closure)?;
        self.layouts[k].restrict(&field)
    }

    fn predict_with_jac(&self, k: usize, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.p_dims();
        let layout = &self.layouts[k];
        match &self.base {
            FamilyBase::MassDamper(_) => {
                let spec = self.base.mass_damper_spec(theta);
                let (trs, sens) =
                    leapfrog_solve_with_sensitivity(std::slice::from_ref(&spec), self.closure)?;
                let pred = layout.restrict(&trs[0].w)?;
                let mut jac = vec![0.0; layout.len() * p];
                for (row, &ix) in layout.indices.iter().enumerate() {
                    for j in 0..p {
                        jac[row * p + j] = sens[0].dw[j][ix];
                    }
                }
                Ok((pred, jac))
            }
            FamilyBase::Darcy(_) => {
                let spec = self.base.darcy_spec(theta);
                let (u, _) = darcy_fixed_point(&spec, self.closure)?;
                let sens = darcy_theta_sensitivities(&spec, self.closure, &u)?;
                let pred = layout.restrict(&u)?;
                let mut jac = vec![0.0; layout.len() * p];
                for (row, &ix) in layout.indices.iter().enumerate() {
                    for j in 0..p {
                        jac[row * p + j] = sens[j][ix];
                    }
                }
                Ok((pred, jac))
            }
            FamilyBase::Burgers(_) => {
                let spec = self.base.burgers_spec(theta);
                let (sol, sens) = rk4_solve_with_sensitivity(&spec, self.closure)?;
                let pred = layout.restrict(sol.frames.data())?;
                let mut jac = vec![0.0; layout.len() * p];
                for (row, &ix) in layout.indices.iter().enumerate() {
                    jac[row * p] = sens.d_log_nu[ix];
                    jac[row * p + 1] = sens.d_z[ix];
                }
                Ok((pred, jac))
            }
        }
    }

    fn predict_all(&self, thetas: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        match &self.base {
            FamilyBase::MassDamper(_) => {
                let specs: Vec<MassDamperSpec> = thetas
                    .iter()
                    .map(|th| self.base.mass_damper_spec(th))
                    .collect();
                let trs = leapfrog_solve_population(&specs, self.closure)?;
                trs.iter()
                    .enumerate()
                    .map(|(k, tr)| self.layouts[k].restrict(&tr.w))
                    .collect()
            }
            _ => thetas
                .iter()
                .enumerate()
                .map(|(k, th)| self.predict(k, th))
                .collect(),
        }
    }

    fn predict_with_jac_all(&self, thetas: &[&[f64]]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        match &self.base {
            FamilyBase::MassDamper(_) => {
                let specs: Vec<MassDamperSpec> = thetas
                    .iter()
                    .map(|th| self.base.mass_damper_spec(th))
                    .collect();
                let (trs, sens) = leapfrog_solve_with_sensitivity(&specs, self.closure)?;
                let p = self.p_dims();
                (0..thetas.len())
                    .map(|k| {
                        let layout = &self.layouts[k];
                        let pred = layout.restrict(&trs[k].w)?;
                        let mut jac = vec![0.0; layout.len() * p];
                        for (row, &ix) in layout.indices.iter().enumerate() {
                            for j in 0..p {
                                jac[row * p + j] = sens[k].dw[j][ix];
                            }
                        }
                        Ok((pred, jac))
                    })
                    .collect()
            }
            _ => thetas
                .iter()
                .enumerate()
                .map(|(k, th)| self.predict_with_jac(k, th))
                .collect(),
        }
    }

    fn alpha_grad_all(
        &self,
        thetas: &[&[f64]],
        weights: &[Vec<f64>],
        accum: &mut [f64],
    ) -> Result<()> {
        match &self.base {
            FamilyBase::MassDamper(_) => {
                let specs: Vec<MassDamperSpec> = thetas
                    .iter()
                    .map(|th| self.base.mass_damper_spec(th))
                    .collect();
                let trs = leapfrog_solve_population(&specs, self.closure)?;
                // collect all (velocity, weight) pairs across systems and run
                // a single batched closure backprop
                let mut pts = Vec::new();
                let mut ws = Vec::new();
                for (k, spec) in specs.iter().enumerate() {
                    let upstream = self.layouts[k].scatter(&weights[k], spec.n_nodes());
                    let gv = vec![0.0; spec.n_nodes()];
                    let parts = crate::solvers::mass_damper::leapfrog_adjoint_parts(
                        spec,
                        &trs[k],
                        self.closure,
                        &upstream,
                        &gv,
                    );
                    pts.extend(parts.alpha_points);
                    ws.extend(parts.alpha_weights);
                }
                self.closure.accumulate_param_grad(&pts, &ws, accum);
                Ok(())
            }
            _ => {
                for (k, (th, w)) in thetas.iter().zip(weights).enumerate() {
                    self.alpha_grad(k, th, w, accum)?;
                }
                Ok(())
            }
        }
    }

    fn n_alpha(&self) -> usize {
        self.closure.n_params()
    }

    fn alpha_grad(
        &self,
        k: usize,
        theta: &[f64],
        weights: &[f64],
        accum: &mut [f64],
    ) -> Result<()> {
        let layout = &self.layouts[k];
        let upstream = layout.scatter(weights, self.field_len());
        match &self.base {
            FamilyBase::MassDamper(_) => {
                let spec = self.base.mass_damper_spec(theta);
                let trs = leapfrog_solve_population(std::slice::from_ref(&spec), self.closure)?;
                let gv = vec![0.0; spec.n_nodes()];
                let g = leapfrog_adjoint(&spec, &trs[0], self.closure, &upstream, &gv);
                for (a, v) in accum.iter_mut().zip(&g.alpha) {
                    *a += v;
                }
            }
            FamilyBase::Darcy(_) => {
                let spec = self.base.darcy_spec(theta);
                let (u, _) = darcy_fixed_point(&spec, self.closure)?;
                let g = darcy_grad(&spec, self.closure, &u, &upstream)?;
                for (a, v) in accum.iter_mut().zip(&g.alpha) {
                    *a += v;
                }
            }
            FamilyBase::Burgers(_) => {
                let spec = self.base.burgers_spec(theta);
                let sol = rk4_solve_for_adjoint(&spec, self.closure)?;
                let g = rk4_adjoint(&spec, &sol, self.closure, &upstream);
                for (a, v) in accum.iter_mut().zip(&g.alpha) {
                    *a += v;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HierModel, HyperPriorConfig};
    use crate::rng::StreamRng;
    use crate::solvers::observe::mass_damper_layout;

    #[test]
    fn log_joint_gradient_matches_fd_with_solver_forward() {
        let mut rng = StreamRng::new(33);
        let net = crate::nn::MlpParams::init(&[1, 6, 1], crate::nn::Activation::SiLU, &mut rng);
        let closure = ClosureFn::Net(net);
        let layouts = vec![mass_damper_layout(101); 2];
        let fwd = SolverForward::new(
            FamilyBase::MassDamper(MassDamperSpec::paper(0.0, 0.0, 0.0)),
            &closure,
            &layouts,
        );
        let data: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..13).map(|_| 0.3 * rng.normal()).collect())
            .collect();
        let model = HierModel::new(&fwd, &data, 0.15, HyperPriorConfig::default_for(3), true);
        let d = model.layout.dim();
        let mut x: Vec<f64> = vec![
            5.0f64.ln(),
            0.3,
            2.1,
            5.2f64.ln(),
            -0.2,
            1.8,
            // mu
            1.5,
            0.1,
            1.9,
            // log tau
            -2.0,
            0.5,
            0.4,
        ];
        assert_eq!(x.len(), d);
        let (_, grad) = model.log_joint_with_grad(&x).unwrap();
        let h = 1e-6;
        for j in 0..d {
            let keep = x[j];
            x[j] = keep + h;
            let up = model.log_joint(&x).unwrap();
            x[j] = keep - h;
            let dn = model.log_joint(&x).unwrap();
            x[j] = keep;
            let fd = (up - dn) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / fd.abs().max(1e-2);
            assert!(rel < 1e-4, "dim {j}: an={} fd={fd}", grad[j]);
        }
    }

    #[test]
    fn fisher_alpha_grad_matches_monolithic_fd() {
        // single sample, single system: the Fisher contribution must equal
        // the finite difference of log_joint in alpha.
        let mut rng = StreamRng::new(34);
        let net = crate::nn::MlpParams::init(&[1, 5, 1], crate::nn::Activation::SiLU, &mut rng);
        let layouts = vec![mass_damper_layout(101)];
        let data: Vec<Vec<f64>> = vec![(0..13).map(|_| 0.5 * rng.normal()).collect()];
        let x = vec![5.0f64.ln(), 0.4, 2.0, 1.6, 0.0, 2.0, -3.0, 0.7, 0.7];

        let eval = |net: &crate::nn::MlpParams| -> f64 {
            let closure = ClosureFn::Net(net.clone());
            let fwd = SolverForward::new(
                FamilyBase::MassDamper(MassDamperSpec::paper(0.0, 0.0, 0.0)),
                &closure,
                &layouts,
            );
            let model = HierModel::new(&fwd, &data, 0.15, HyperPriorConfig::default_for(3), true);
            model.log_joint(&x).unwrap()
        };
        let closure = ClosureFn::Net(net.clone());
        let fwd = SolverForward::new(
            FamilyBase::MassDamper(MassDamperSpec::paper(0.0, 0.0, 0.0)),
            &closure,
            &layouts,
        );
        let model = HierModel::new(&fwd, &data, 0.15, HyperPriorConfig::default_for(3), true);
        // lml_alpha_grad returns the gradient of minus log joint
        let g = model.lml_alpha_grad(std::slice::from_ref(&x)).unwrap();
        let h = 1e-5;
        let stride = (net.params.len() / 11).max(1);
        for j in (0..net.params.len()).step_by(stride) {
            let mut up = net.clone();
            up.params[j] += h;
            let mut dn = net.clone();
            dn.params[j] -= h;
            let fd = -(eval(&up) - eval(&dn)) / (2.0 * h);
            let rel = (g[j] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "alpha {j}: an={} fd={fd}", g[j]);
        }
    }
}
