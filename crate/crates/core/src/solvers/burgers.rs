//! Generalized Burgers equation u_t + f(u) u_x = nu u_xx on the periodic
//! interval [-1, 1): second-order central differences in space, classic RK4
//! in time, snapshots stored every `store_stride` steps.

use crate::closure::ClosureFn;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BurgersSpec {
    pub log_nu: f64,
    /// initial-condition amplitude
    pub z: f64,
    pub nx: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub store_stride: usize,
}

impl BurgersSpec {
    pub fn paper(log_nu: f64, z: f64) -> Self {
        BurgersSpec {
            log_nu,
            z,
            nx: 50,
            dt: 0.001_25,
            n_steps: 400,
            store_stride: 10,
        }
    }

    pub fn dx(&self) -> f64 {
        2.0 / self.nx as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|j| -1.0 + j as f64 * self.dx()).collect()
    }

    pub fn n_frames(&self) -> usize {
        self.n_steps / self.store_stride + 1
    }

    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.n_frames())
            .map(|f| (f * self.store_stride) as f64 * self.dt)
            .collect()
    }

    pub fn initial_condition(&self) -> Vec<f64> {
        self.xs()
            .iter()
            .map(|&x| self.z * (2.0 * PI * x).sin() * (PI * x).sin())
            .collect()
    }
}

pub struct BurgersSolution {
    /// stored frames as (n_frames, nx)
    pub frames: Tensor,
    /// max |f(u)| dt / dx observed over the run
    pub cfl_max: f64,
    /// per-step stage states (y1..y4), kept when requested for the adjoint
    stages: Option<Vec<[Vec<f64>; 4]>>,
}

impl BurgersSolution {
    pub fn frame(&self, f: usize) -> &[f64] {
        let nx = self.frames.shape()[1];
        &self.frames.data()[f * nx..(f + 1) * nx]
    }
}

#[inline]
fn rhs(
    u: &[f64],
    f_u: &[f64],
    nu: f64,
    inv_2dx: f64,
    inv_dx2: f64,
    out: &mut [f64],
) {
    let n = u.len();
    for j in 0..n {
        let jm = if j == 0 { n - 1 } else { j - 1 };
        let jp = if j == n - 1 { 0 } else { j + 1 };
        let d1 = (u[jp] - u[jm]) * inv_2dx;
        let d2 = (u[jp] - 2.0 * u[j] + u[jm]) * inv_dx2;
        out[j] = -f_u[j] * d1 + nu * d2;
    }
}

fn solve_inner(
    spec: &BurgersSpec,
    ic: &[f64],
    closure: &ClosureFn,
    keep_stages: bool,
) -> Result<BurgersSolution> {
    let nx = spec.nx;
    debug_assert_eq!(ic.len(), nx);
    let nu = spec.log_nu.exp();
    let dx = spec.dx();
    let (inv_2dx, inv_dx2) = (0.5 / dx, 1.0 / (dx * dx));
    let dt = spec.dt;

    let mut u = ic.to_vec();
    let mut frames = Vec::with_capacity(spec.n_frames() * nx);
    frames.extend_from_slice(&u);
    let mut stages = if keep_stages {
        Some(Vec::with_capacity(spec.n_steps))
    } else {
        None
    };
    let mut cfl_max: f64 = 0.0;

    let prep = closure.prepare();
    let mut k = [vec![0.0; nx], vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]];
    let mut y = [vec![0.0; nx], vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]];

    for step in 0..spec.n_steps {
        y[0].copy_from_slice(&u);
        for s in 0..4 {
            if s > 0 {
                let c = if s < 3 { 0.5 * dt } else { dt };
                let ks = &k[s - 1];
                let ys = &mut y[s];
                for j in 0..nx {
                    ys[j] = u[j] + c * ks[j];
                }
            }
            let f_u = prep.values(&y[s]);
            for &fv in &f_u {
                cfl_max = cfl_max.max(fv.abs() * dt / dx);
            }
            let (ys, ks) = (&y[s], &mut k[s]);
            rhs(ys, &f_u, nu, inv_2dx, inv_dx2, ks);
        }
        for j in 0..nx {
            u[j] += dt / 6.0 * (k[0][j] + 2.0 * k[1][j] + 2.0 * k[2][j] + k[3][j]);
            if !u[j].is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("burgers state non-finite (CFL max {cfl_max:.3})"),
                });
            }
        }
        if let Some(st) = stages.as_mut() {
            st.push([y[0].clone(), y[1].clone(), y[2].clone(), y[3].clone()]);
        }
        if (step + 1) % spec.store_stride == 0 {
            frames.extend_from_slice(&u);
        }
    }
    Ok(BurgersSolution {
        frames: Tensor::new(vec![spec.n_frames(), nx], frames).unwrap(),
        cfl_max,
        stages,
    })
}

pub fn rk4_burgers_solve(spec: &BurgersSpec, closure: &ClosureFn) -> Result<BurgersSolution> {
    solve_inner(spec, &spec.initial_condition(), closure, false)
}

/// Solve with an explicit initial condition (oracle and surrogate support).
pub fn rk4_solve_custom_ic(
    spec: &BurgersSpec,
    ic: &[f64],
    closure: &ClosureFn,
) -> Result<BurgersSolution> {
    solve_inner(spec, ic, closure, false)
}

/// Forward solve keeping per-step stage states for the adjoint pass.
pub fn rk4_solve_for_adjoint(
    spec: &BurgersSpec,
    closure: &ClosureFn,
) -> Result<BurgersSolution> {
    solve_inner(spec, &spec.initial_condition(), closure, true)
}

/// Sensitivities of all stored frames with respect to (log nu, z):
/// shape (2, n_frames, nx) each flattened.
pub struct BurgersSensitivities {
    pub d_log_nu: Vec<f64>,
    pub d_z: Vec<f64>,
}

pub fn rk4_solve_with_sensitivity(
    spec: &BurgersSpec,
    closure: &ClosureFn,
) -> Result<(BurgersSolution, BurgersSensitivities)> {
    let nx = spec.nx;
    let nu = spec.log_nu.exp();
    let dx = spec.dx();
    let (inv_2dx, inv_dx2) = (0.5 / dx, 1.0 / (dx * dx));
    let dt = spec.dt;

    let mut u = spec.initial_condition();
    // d u / d log nu starts at 0; d u / d z = ic / z (ic is linear in z)
    let mut du_nu = vec![0.0; nx];
    let mut du_z: Vec<f64> = spec
        .xs()
        .iter()
        .map(|&x| (2.0 * PI * x).sin() * (PI * x).sin())
        .collect();

    let mut frames = Vec::with_capacity(spec.n_frames() * nx);
    frames.extend_from_slice(&u);
    let mut sens_nu = Vec::with_capacity(spec.n_frames() * nx);
    sens_nu.extend_from_slice(&du_nu);
    let mut sens_z = Vec::with_capacity(spec.n_frames() * nx);
    sens_z.extend_from_slice(&du_z);
    let mut cfl_max: f64 = 0.0;

    let prep = closure.prepare();
    let mut y = vec![0.0; nx];
    let mut k = [vec![0.0; nx], vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]];
    let mut dk_nu = k.clone();
    let mut dk_z = k.clone();
    let mut dy_nu = vec![0.0; nx];
    let mut dy_z = vec![0.0; nx];

    for step in 0..spec.n_steps {
        for s in 0..4 {
            let c = match s {
                0 => 0.0,
                1 | 2 => 0.5 * dt,
                _ => dt,
            };
            for j in 0..nx {
                y[j] = if s == 0 { u[j] } else { u[j] + c * k[s - 1][j] };
                dy_nu[j] = if s == 0 {
                    du_nu[j]
                } else {
                    du_nu[j] + c * dk_nu[s - 1][j]
                };
                dy_z[j] = if s == 0 {
                    du_z[j]
                } else {
                    du_z[j] + c * dk_z[s - 1][j]
                };
            }
            let (f_u, fp_u) = prep.values_and_derivs(&y);
            for &fv in &f_u {
                cfl_max = cfl_max.max(fv.abs() * dt / dx);
            }
            rhs(&y, &f_u, nu, inv_2dx, inv_dx2, &mut k[s]);
            // tangent of rhs: -f'(u) du * d1(u) - f(u) d1(du) + nu d2(du) [+ dnu d2(u)]
            for j in 0..nx {
                let jm = if j == 0 { nx - 1 } else { j - 1 };
                let jp = if j == nx - 1 { 0 } else { j + 1 };
                let d1u = (y[jp] - y[jm]) * inv_2dx;
                let d2u = (y[jp] - 2.0 * y[j] + y[jm]) * inv_dx2;
                let d1d_nu = (dy_nu[jp] - dy_nu[jm]) * inv_2dx;
                let d2d_nu = (dy_nu[jp] - 2.0 * dy_nu[j] + dy_nu[jm]) * inv_dx2;
                let d1d_z = (dy_z[jp] - dy_z[jm]) * inv_2dx;
                let d2d_z = (dy_z[jp] - 2.0 * dy_z[j] + dy_z[jm]) * inv_dx2;
                // d(nu)/d(log nu) = nu
                dk_nu[s][j] =
                    -fp_u[j] * dy_nu[j] * d1u - f_u[j] * d1d_nu + nu * d2d_nu + nu * d2u;
                dk_z[s][j] = -fp_u[j] * dy_z[j] * d1u - f_u[j] * d1d_z + nu * d2d_z;
            }
        }
        for j in 0..nx {
            u[j] += dt / 6.0 * (k[0][j] + 2.0 * k[1][j] + 2.0 * k[2][j] + k[3][j]);
            du_nu[j] +=
                dt / 6.0 * (dk_nu[0][j] + 2.0 * dk_nu[1][j] + 2.0 * dk_nu[2][j] + dk_nu[3][j]);
            du_z[j] += dt / 6.0 * (dk_z[0][j] + 2.0 * dk_z[1][j] + 2.0 * dk_z[2][j] + dk_z[3][j]);
            if !u[j].is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("burgers state non-finite (CFL max {cfl_max:.3})"),
                });
            }
        }
        if (step + 1) % spec.store_stride == 0 {
            frames.extend_from_slice(&u);
            sens_nu.extend_from_slice(&du_nu);
            sens_z.extend_from_slice(&du_z);
        }
    }
    Ok((
        BurgersSolution {
            frames: Tensor::new(vec![spec.n_frames(), nx], frames).unwrap(),
            cfl_max,
            stages: None,
        },
        BurgersSensitivities {
            d_log_nu: sens_nu,
            d_z: sens_z,
        },
    ))
}

pub struct BurgersAdjointGrads {
    pub d_log_nu: f64,
    pub d_z: f64,
    pub alpha: Vec<f64>,
}

/// Reverse pass over a stored solution. `g_frames` holds upstream weights for
/// every stored frame, shape (n_frames, nx) flattened.
pub fn rk4_adjoint(
    spec: &BurgersSpec,
    sol: &BurgersSolution,
    closure: &ClosureFn,
    g_frames: &[f64],
) -> BurgersAdjointGrads {
    let stages = sol
        .stages
        .as_ref()
        .expect("rk4_adjoint needs a solution from rk4_solve_for_adjoint");
    let nx = spec.nx;
    let nu = spec.log_nu.exp();
    let dx = spec.dx();
    let (inv_2dx, inv_dx2) = (0.5 / dx, 1.0 / (dx * dx));
    let dt = spec.dt;
    debug_assert_eq!(g_frames.len(), spec.n_frames() * nx);

    let mut lam = vec![0.0; nx];
    // incoming weight at the final frame
    let last = spec.n_frames() - 1;
    for j in 0..nx {
        lam[j] += g_frames[last * nx + j];
    }

    let mut grad_nu = 0.0;
    let n_alpha = closure.n_params();
    let mut alpha_pts: Vec<f64> = Vec::new();
    let mut alpha_ws: Vec<f64> = Vec::new();
    if n_alpha > 0 {
        alpha_pts.reserve(spec.n_steps * 4 * nx);
        alpha_ws.reserve(spec.n_steps * 4 * nx);
    }

    // F'(y)^T g and parameter pieces for one stage
    let prep = closure.prepare();
    let mut scratch_g = vec![0.0; nx];
    let stage_coeff = [dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0];
    let lead_in = [0.0, 0.5 * dt, 0.5 * dt, dt];

    for step in (0..spec.n_steps).rev() {
        let ys = &stages[step];
        // g_k[s] accumulated backwards through stage dependencies
        let mut g_k = [vec![0.0; nx], vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]];
        let mut g_y_total = vec![0.0; nx];
        for s in (0..4).rev() {
            // direct contribution from the update formula
            for j in 0..nx {
                g_k[s][j] += stage_coeff[s] * lam[j];
            }
            // y_{s+1} = u + c_{s+1} k_s contributes to g_k[s] via g_y[s+1]
            // handled below after computing g_y[s+1]; here compute g_y[s]:
            let y = &ys[s];
            let (f_u, fp_u) = prep.values_and_derivs(y);
            // F_j = -f(u_j) d1_j + nu d2_j
            // (F'^T g)_i = g_i(-f'(u_i) d1_i - 2 nu/dx^2)
            //   + g_{i-1}(-f(u_{i-1})(-inv2dx)... expanded directly below
            for i in 0..nx {
                let im = if i == 0 { nx - 1 } else { i - 1 };
                let ip = if i == nx - 1 { 0 } else { i + 1 };
                let d1_i = (y[ip] - y[im]) * inv_2dx;
                let g_i = g_k[s][i];
                let g_im = g_k[s][im];
                let g_ip = g_k[s][ip];
                scratch_g[i] = g_i * (-fp_u[i] * d1_i - 2.0 * nu * inv_dx2)
                    + g_im * (-f_u[im] * (inv_2dx) + nu * inv_dx2)
                    + g_ip * (f_u[ip] * inv_2dx + nu * inv_dx2);
                // nu gradient: g . d2(y)
                let d2_i = (y[ip] - 2.0 * y[i] + y[im]) * inv_dx2;
                grad_nu += g_i * d2_i;
            }
            if n_alpha > 0 {
                for i in 0..nx {
                    let im = if i == 0 { nx - 1 } else { i - 1 };
                    let ip = if i == nx - 1 { 0 } else { i + 1 };
                    let d1_i = (y[ip] - y[im]) * inv_2dx;
                    alpha_pts.push(y[i]);
                    alpha_ws.push(-g_k[s][i] * d1_i);
                }
            }
            // propagate g_y[s] into u and into k[s-1]
            for j in 0..nx {
                g_y_total[j] += scratch_g[j];
            }
            if s > 0 {
                let c = lead_in[s];
                for j in 0..nx {
                    g_k[s - 1][j] += c * scratch_g[j];
                }
            }
        }
        for j in 0..nx {
            lam[j] += g_y_total[j];
        }
        // add stored-frame upstream hitting state u_step
        if step % spec.store_stride == 0 && step > 0 {
            let f = step / spec.store_stride;
            for j in 0..nx {
                lam[j] += g_frames[f * nx + j];
            }
        }
    }
    // frame 0 weight lands on the IC
    for j in 0..nx {
        lam[j] += g_frames[j];
    }
    let d_z: f64 = spec
        .xs()
        .iter()
        .zip(&lam)
        .map(|(&x, &l)| l * (2.0 * PI * x).sin() * (PI * x).sin())
        .sum();

    let mut alpha = vec![0.0; n_alpha];
    closure.accumulate_param_grad(&alpha_pts, &alpha_ws, &mut alpha);

    BurgersAdjointGrads {
        d_log_nu: grad_nu * nu,
        d_z,
        alpha,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_is_identically_zero() {
        let spec = BurgersSpec::paper(0.05f64.ln(), 0.0);
        let gt = ClosureFn::SigmoidJump {
            scale: 7.0,
            gain: 3.0,
        };
        let sol = rk4_burgers_solve(&spec, &gt).unwrap();
        assert!(sol.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_diffusion_matches_discrete_mode_decay() {
        // closure = 0, IC sin(pi x): the discrete second-difference operator
        // has eigenvalue -4 sin^2(pi dx/2)/dx^2 on this mode.
        let nu: f64 = 0.05;
        let mut spec = BurgersSpec::paper(nu.ln(), 1.0);
        spec.n_steps = 400;
        let ic: Vec<f64> = spec.xs().iter().map(|&x| (PI * x).sin()).collect();
        let sol = rk4_solve_custom_ic(&spec, &ic, &ClosureFn::Zero).unwrap();
        let dx = spec.dx();
        let lam = 4.0 * (PI * dx / 2.0).sin().powi(2) / (dx * dx);
        let t_end = spec.n_steps as f64 * spec.dt;
        let decay = (-nu * lam * t_end).exp();
        let last = sol.frame(spec.n_frames() - 1);
        let mut worst: f64 = 0.0;
        for (j, &x) in spec.xs().iter().enumerate() {
            let want = decay * (PI * x).sin();
            worst = worst.max((last[j] - want).abs());
        }
        assert!(worst < 1e-4, "max abs err {worst}");
    }

    #[test]
    fn fourth_order_time_self_convergence() {
        let gt = ClosureFn::SigmoidJump {
            scale: 7.0,
            gain: 3.0,
        };
        let run = |dt: f64, n_steps: usize, stride: usize| -> Vec<f64> {
            let spec = BurgersSpec {
                log_nu: 0.05f64.ln(),
                z: 1.4,
                nx: 50,
                dt,
                n_steps,
                store_stride: stride,
            };
            rk4_burgers_solve(&spec, &gt)
                .unwrap()
                .frame(spec.n_frames() - 1)
                .to_vec()
        };
        let a = run(0.005, 100, 100);
        let b = run(0.0025, 200, 200);
        let c = run(0.00125, 400, 400);
        let d1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let d2: f64 = b.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let ratio = d1 / d2;
        assert!(
            (12.0..=20.0).contains(&ratio),
            "fourth-order ratio {ratio} (d1={d1:.3e}, d2={d2:.3e})"
        );
    }

    #[test]
    fn cfl_diagnostic_reported() {
        let spec = BurgersSpec::paper(0.05f64.ln(), 1.4);
        let gt = ClosureFn::SigmoidJump {
            scale: 7.0,
            gain: 3.0,
        };
        let sol = rk4_burgers_solve(&spec, &gt).unwrap();
        assert!(sol.cfl_max > 0.0 && sol.cfl_max < 1.0, "CFL {}", sol.cfl_max);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let gt = ClosureFn::SigmoidJump {
            scale: 7.0,
            gain: 3.0,
        };
        let mut spec = BurgersSpec::paper(0.05f64.ln(), 1.3);
        spec.n_steps = 100; // shorter run keeps the test quick
        let (_, sens) = rk4_solve_with_sensitivity(&spec, &gt).unwrap();
        let h = 1e-6;
        let probe = [(2usize, 7usize), (5, 20), (10, 44)];
        for (which, label) in [(0usize, "log_nu"), (1, "z")] {
            let mut su = spec.clone();
            let mut sd = spec.clone();
            if which == 0 {
                su.log_nu += h;
                sd.log_nu -= h;
            } else {
                su.z += h;
                sd.z -= h;
            }
            let fu = rk4_burgers_solve(&su, &gt).unwrap();
            let fd_sol = rk4_burgers_solve(&sd, &gt).unwrap();
            for &(fr, j) in &probe {
                let fd = (fu.frame(fr)[j] - fd_sol.frame(fr)[j]) / (2.0 * h);
                let an = if which == 0 {
                    sens.d_log_nu[fr * spec.nx + j]
                } else {
                    sens.d_z[fr * spec.nx + j]
                };
                let rel = (an - fd).abs() / fd.abs().max(1e-4);
                assert!(rel < 1e-4, "{label} frame {fr} cell {j}: an={an} fd={fd}");
            }
        }
    }

    #[test]
    fn adjoint_matches_sensitivities_and_closure_fd() {
        use crate::nn::{Activation, MlpParams};
        use crate::rng::StreamRng;
        let mut rng = StreamRng::new(14);
        let net = MlpParams::init(&[1, 6, 1], Activation::SiLU, &mut rng);
        let closure = ClosureFn::Net(net.clone());
        let mut spec = BurgersSpec::paper(0.05f64.ln(), 1.2);
        spec.n_steps = 60;
        spec.store_stride = 10;

        let sol = rk4_solve_for_adjoint(&spec, &closure).unwrap();
        let g: Vec<f64> = (0..spec.n_frames() * spec.nx)
            .map(|_| rng.normal())
            .collect();
        let grads = rk4_adjoint(&spec, &sol, &closure, &g);

        // theta against forward sensitivities
        let (_, sens) = rk4_solve_with_sensitivity(&spec, &closure).unwrap();
        let want_nu: f64 = g.iter().zip(&sens.d_log_nu).map(|(a, b)| a * b).sum();
        let want_z: f64 = g.iter().zip(&sens.d_z).map(|(a, b)| a * b).sum();
        assert!(
            (grads.d_log_nu - want_nu).abs() < 1e-9 * want_nu.abs().max(1.0),
            "{} vs {want_nu}",
            grads.d_log_nu
        );
        assert!(
            (grads.d_z - want_z).abs() < 1e-9 * want_z.abs().max(1.0),
            "{} vs {want_z}",
            grads.d_z
        );

        // alpha against finite differences
        let value = |c: &ClosureFn| -> f64 {
            let s = rk4_burgers_solve(&spec, c).unwrap();
            s.frames.data().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let stride = (net.params.len() / 7).max(1);
        for j in (0..net.params.len()).step_by(stride) {
            let mut up = net.clone();
            up.params[j] += h;
            let mut dn = net.clone();
            dn.params[j] -= h;
            let fd = (value(&ClosureFn::Net(up)) - value(&ClosureFn::Net(dn))) / (2.0 * h);
            let rel = (grads.alpha[j] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "alpha[{j}]: an={} fd={fd}", grads.alpha[j]);
        }
    }
}
