//! Surrogate training losses and their derivative pathways.
//!
//! Every loss provides (value, d/d beta). For the upper-level closure update
//! each loss also provides the mixed pathway
//!     grad_alpha < grad_beta L_S(alpha, beta), g >
//! for a fixed direction g, which is the ingredient of the truncated
//! first-order differentiation through the lower-level training steps.

use super::{grid_info, subgrid_to_full, Surrogate, SurrogateNet};
use crate::closure::ClosureFn;
use crate::error::Result;
use crate::forward::FamilyBase;
use crate::linalg::dot;
use crate::nn::mlp::{self, MlpParams};
use crate::nn::real::{Dual, Real};
use crate::rng::StreamRng;
use crate::solvers::burgers::{rk4_adjoint, rk4_solve_for_adjoint, BurgersSolution};
use crate::solvers::darcy::{self, DarcyMesh};
use crate::solvers::mass_damper::{leapfrog_adjoint, leapfrog_solve, Trajectory};

// ---------------------------------------------------------------------------
// supervised loss
// ---------------------------------------------------------------------------

/// Solver reference states for one theta batch, with the handles the
/// alpha-pathway needs to adjoint through them.
pub struct SupervisedRefs {
    /// channel-layout targets matching the spectral output
    pub targets: Vec<Option<Vec<f64>>>,
    pub skipped: usize,
    md_trajs: Vec<Option<Trajectory>>,
    darcy_fields: Vec<Option<Vec<f64>>>,
    burgers_sols: Vec<Option<BurgersSolution>>,
}

/// Run the numerical solver at every theta of the batch with the current
/// closure. Failed solves are skipped and counted.
pub fn supervised_refs(
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    closure: &ClosureFn,
) -> SupervisedRefs {
    let k = thetas.len();
    let mut refs = SupervisedRefs {
        targets: Vec::with_capacity(k),
        skipped: 0,
        md_trajs: Vec::with_capacity(k),
        darcy_fields: Vec::with_capacity(k),
        burgers_sols: Vec::with_capacity(k),
    };
    for theta in thetas {
        match base {
            FamilyBase::MassDamper(_) => {
                let spec = base.mass_damper_spec(theta);
                match leapfrog_solve(&spec, closure) {
                    Ok(tr) => {
                        let mut target = tr.w.clone();
                        target.extend_from_slice(&tr.v);
                        refs.targets.push(Some(target));
                        refs.md_trajs.push(Some(tr));
                    }
                    Err(_) => {
                        refs.skipped += 1;
                        refs.targets.push(None);
                        refs.md_trajs.push(None);
                    }
                }
                refs.darcy_fields.push(None);
                refs.burgers_sols.push(None);
            }
            FamilyBase::Darcy(s) => {
                let spec = base.darcy_spec(theta);
                match darcy::darcy_fixed_point(&spec, closure) {
                    Ok((u, _)) => {
                        refs.targets
                            .push(Some(super::full_to_subgrid(s.n_side, &u)));
                        refs.darcy_fields.push(Some(u));
                    }
                    Err(_) => {
                        refs.skipped += 1;
                        refs.targets.push(None);
                        refs.darcy_fields.push(None);
                    }
                }
                refs.md_trajs.push(None);
                refs.burgers_sols.push(None);
            }
            FamilyBase::Burgers(_) => {
                let spec = base.burgers_spec(theta);
                match rk4_solve_for_adjoint(&spec, closure) {
                    Ok(sol) => {
                        refs.targets.push(Some(sol.frames.data().to_vec()));
                        refs.burgers_sols.push(Some(sol));
                    }
                    Err(_) => {
                        refs.skipped += 1;
                        refs.targets.push(None);
                        refs.burgers_sols.push(None);
                    }
                }
                refs.md_trajs.push(None);
                refs.darcy_fields.push(None);
            }
        }
    }
    refs
}

/// (1/K) sum_k |F_beta(theta_k) - ref_k|^2 over grid points, with the
/// beta gradient. Skipped systems contribute nothing.
pub fn loss_supervised(
    surrogate: &Surrogate,
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    refs: &SupervisedRefs,
) -> (f64, Vec<f64>) {
    let op = match &surrogate.net {
        SurrogateNet::Spectral(op) => op,
        SurrogateNet::Mlp(_) => panic!("supervised loss is defined for the spectral family"),
    };
    let gi = grid_info(base);
    let k_count = thetas.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; op.params.len()];
    for (theta, target) in thetas.iter().zip(&refs.targets) {
        let Some(target) = target else { continue };
        let input = surrogate.spectral_features(&gi, theta);
        let (out, cache) = op.forward_cached(&input);
        debug_assert_eq!(out.len(), target.len());
        let mut up = vec![0.0; out.len()];
        for i in 0..out.len() {
            let d = out[i] - target[i];
            loss += d * d / k_count;
            up[i] = 2.0 * d / k_count;
        }
        let g = op.vjp(&cache, &up);
        for (a, v) in grad.iter_mut().zip(&g.params) {
            *a += v;
        }
    }
    (loss, grad)
}

/// alpha-pathway of the supervised loss: accumulate
/// grad_alpha <grad_beta L, g> = -(2/K) sum_k <grad_alpha F_dagger(theta_k), dF_beta[g]>
/// using the solver adjoints at the reference solutions.
pub fn supervised_alpha_hypergrad(
    surrogate: &Surrogate,
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    refs: &SupervisedRefs,
    closure: &ClosureFn,
    g_dir: &[f64],
    accum: &mut [f64],
) -> Result<()> {
    let op = match &surrogate.net {
        SurrogateNet::Spectral(op) => op,
        SurrogateNet::Mlp(_) => return Ok(()),
    };
    let gi = grid_info(base);
    let k_count = thetas.len().max(1) as f64;
    for (k, theta) in thetas.iter().enumerate() {
        if refs.targets[k].is_none() {
            continue;
        }
        let input = surrogate.spectral_features(&gi, theta);
        let (_, dout) = op.jvp(&input, None, Some(g_dir));
        let scale = -2.0 / k_count;
        match base {
            FamilyBase::MassDamper(s) => {
                let n = s.n_nodes();
                let gu: Vec<f64> = dout[..n].iter().map(|v| scale * v).collect();
                let gv: Vec<f64> = dout[n..2 * n].iter().map(|v| scale * v).collect();
                let spec = base.mass_damper_spec(theta);
                let traj = refs.md_trajs[k].as_ref().unwrap();
                let g = leapfrog_adjoint(&spec, traj, closure, &gu, &gv);
                for (a, v) in accum.iter_mut().zip(&g.alpha) {
                    *a += v;
                }
            }
            FamilyBase::Darcy(s) => {
                let up_full = subgrid_to_full(s.n_side, &dout)
                    .iter()
                    .map(|v| scale * v)
                    .collect::<Vec<f64>>();
                let spec = base.darcy_spec(theta);
                let u = refs.darcy_fields[k].as_ref().unwrap();
                let g = darcy::darcy_grad(&spec, closure, u, &up_full)?;
                for (a, v) in accum.iter_mut().zip(&g.alpha) {
                    *a += v;
                }
            }
            FamilyBase::Burgers(_) => {
                let spec = base.burgers_spec(theta);
                let sol = refs.burgers_sols[k].as_ref().unwrap();
                let up: Vec<f64> = dout.iter().map(|v| scale * v).collect();
                let g = rk4_adjoint(&spec, sol, closure, &up);
                for (a, v) in accum.iter_mut().zip(&g.alpha) {
                    *a += v;
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// physics residual for the oscillator (two-channel spectral family)
// ---------------------------------------------------------------------------

/// Centered first difference on a uniform grid, one-sided at the ends.
fn time_derivative<S: Real>(x: &[S], dt: f64) -> Vec<S> {
    let n = x.len();
    let mut d = vec![S::zero(); n];
    d[0] = (x[1] - x[0]).scale(1.0 / dt);
    for i in 1..n - 1 {
        d[i] = (x[i + 1] - x[i - 1]).scale(0.5 / dt);
    }
    d[n - 1] = (x[n - 1] - x[n - 2]).scale(1.0 / dt);
    d
}

/// Adjoint of `time_derivative`: y = D^T w.
fn time_derivative_transpose(w: &[f64], dt: f64) -> Vec<f64> {
    let n = w.len();
    let mut y = vec![0.0; n];
    // row 0: (x1 - x0)/dt
    y[0] -= w[0] / dt;
    y[1] += w[0] / dt;
    for i in 1..n - 1 {
        y[i + 1] += w[i] * 0.5 / dt;
        y[i - 1] -= w[i] * 0.5 / dt;
    }
    y[n - 1] += w[n - 1] / dt;
    y[n - 2] -= w[n - 1] / dt;
    y
}

/// Oscillator residual loss of a two-channel (displacement, velocity)
/// spectral prediction:
///   R1 = |dw/dt - v|^2, R2 = |dv/dt - (F(t) - f(v) - k w)|^2,
/// plus initial-condition anchors |w(0)-u0|^2 + |v(0)-v0|^2.
pub fn loss_physics_ode(
    surrogate: &Surrogate,
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    closure: &ClosureFn,
) -> (f64, Vec<f64>) {
    let op = match &surrogate.net {
        SurrogateNet::Spectral(op) => op,
        SurrogateNet::Mlp(_) => panic!("physics-ode loss is defined for the spectral family"),
    };
    let spec0 = match base {
        FamilyBase::MassDamper(s) => s,
        _ => panic!("physics-ode loss applies to the mass-damper family"),
    };
    let gi = grid_info(base);
    let n = spec0.n_nodes();
    let dt = spec0.dt;
    let times = spec0.times();
    let k_count = thetas.len().max(1) as f64;

    let mut loss = 0.0;
    let mut grad = vec![0.0; op.params.len()];
    for theta in thetas {
        let (log_k, u0, v0) = (theta[0], theta[1], theta[2]);
        let kk = log_k.exp();
        let input = surrogate.spectral_features(&gi, theta);
        let (out, cache) = op.forward_cached(&input);
        let (w, v) = out.split_at(n);
        let wd = time_derivative(w, dt);
        let vd = time_derivative(v, dt);
        let (f_v, fp_v) = closure.eval_batch_with_grad(v);

        let mut r1 = vec![0.0; n];
        let mut r2 = vec![0.0; n];
        for i in 0..n {
            r1[i] = wd[i] - v[i];
            let forcing = spec0.forcing_amp * (spec0.forcing_freq * times[i]).sin();
            r2[i] = vd[i] - (forcing - f_v[i] - kk * w[i]);
            loss += (r1[i] * r1[i] + r2[i] * r2[i]) / k_count;
        }
        let ic_w = w[0] - u0;
        let ic_v = v[0] - v0;
        loss += (ic_w * ic_w + ic_v * ic_v) / k_count;

        // upstream on (w, v)
        let s = 2.0 / k_count;
        let w1: Vec<f64> = r1.iter().map(|r| s * r).collect();
        let w2: Vec<f64> = r2.iter().map(|r| s * r).collect();
        let mut gw = time_derivative_transpose(&w1, dt);
        let mut gv = time_derivative_transpose(&w2, dt);
        for i in 0..n {
            gv[i] += -w1[i] + w2[i] * fp_v[i];
            gw[i] += w2[i] * kk;
        }
        gw[0] += s * ic_w;
        gv[0] += s * ic_v;
        let mut up = gw;
        up.extend_from_slice(&gv);
        let g = op.vjp(&cache, &up);
        for (a, gg) in grad.iter_mut().zip(&g.params) {
            *a += gg;
        }
    }
    (loss, grad)
}

/// alpha-pathway of the oscillator physics loss along direction `g_dir`:
/// dual residuals (value + tangent under beta + eps g) feed a dual-valued
/// closure backprop whose epsilon part is the mixed derivative.
pub fn physics_ode_alpha_hypergrad(
    surrogate: &Surrogate,
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    closure: &ClosureFn,
    g_dir: &[f64],
    accum: &mut [f64],
) {
    let op = match &surrogate.net {
        SurrogateNet::Spectral(op) => op,
        SurrogateNet::Mlp(_) => return,
    };
    let spec0 = match base {
        FamilyBase::MassDamper(s) => s,
        _ => return,
    };
    let gi = grid_info(base);
    let n = spec0.n_nodes();
    let dt = spec0.dt;
    let k_count = thetas.len().max(1) as f64;
    let times = spec0.times();

    for theta in thetas {
        let kk = theta[0].exp();
        let input = surrogate.spectral_features(&gi, theta);
        let (out, dout) = op.jvp(&input, None, Some(g_dir));
        let v: Vec<Dual<f64>> = (0..n)
            .map(|i| Dual::new(out[n + i], dout[n + i]))
            .collect();
        let w: Vec<Dual<f64>> = (0..n).map(|i| Dual::new(out[i], dout[i])).collect();
        let vd = time_derivative(&v, dt);
        let f_v: Vec<Dual<f64>> = match closure {
            ClosureFn::Net(net) => {
                let lifted: Vec<Dual<f64>> = net.lift();
                let cache = mlp::forward_cached(&net.widths, net.activation, &lifted, &v);
                cache.acts.last().unwrap().clone()
            }
            other => v.iter().map(|&x| other.eval_generic(x)).collect(),
        };
        // R2 is the only residual containing the closure
        let mut ws = Vec::with_capacity(n);
        for i in 0..n {
            let forcing = spec0.forcing_amp * (spec0.forcing_freq * times[i]).sin();
            let r2 = vd[i] - (Dual::from_f64(forcing) - f_v[i] - w[i].scale(kk));
            ws.push(r2.scale(2.0 / k_count));
        }
        closure.accumulate_param_grad_dual(&v, &ws, accum);
    }
}

// ---------------------------------------------------------------------------
// weak-form residual for Darcy (spectral family)
// ---------------------------------------------------------------------------

/// J^T w over all nodes for the weak residual R(u) = A(u)u - b, where w is an
/// interior-sized weight vector. Includes boundary columns (the surrogate
/// also predicts on part of the boundary).
fn weak_jacobian_transpose_full(
    mesh: &DarcyMesh,
    z: &[f64; 3],
    u_full: &[f64],
    closure: &ClosureFn,
    w_int: &[f64],
) -> Vec<f64> {
    let coeffs = darcy::element_coeffs(mesh, z, u_full, closure);
    let (_, dfdu) = closure.eval_batch_with_grad(&coeffs.u_bar);
    let mut out = vec![0.0; mesh.n_nodes()];
    for (e, tri) in mesh.tris.iter().enumerate() {
        let sig = coeffs.f[e].sigmoid();
        let da_dubar = coeffs.exp_z[e] * sig * (1.0 - sig) * dfdu[e] / 3.0;
        // s_e = sum_{i in e, interior} w_i (K^e u)_i  and flux rows
        let mut s_e = 0.0;
        let mut row_w = [0.0; 3]; // sum_i w_i K^e_{i,b} coefficient for column b
        for ai in 0..3 {
            let ii = mesh.interior_of_node[tri.nodes[ai]];
            if ii == usize::MAX {
                continue;
            }
            let wi = w_int[ii];
            let mut keu = 0.0;
            for bi in 0..3 {
                let kab = dot(&tri.grads[ai], &tri.grads[bi]) * tri.area;
                keu += kab * u_full[tri.nodes[bi]];
                row_w[bi] += wi * kab;
            }
            s_e += wi * keu;
        }
        for bi in 0..3 {
            out[tri.nodes[bi]] += coeffs.a[e] * row_w[bi] + s_e * da_dubar;
        }
    }
    out
}

/// (1/K) sum_k |A(u_hat) u_hat - b|^2 with the surrogate's own prediction as
/// the coefficient state, plus its beta gradient.
pub fn loss_weakform_darcy(
    surrogate: &Surrogate,
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    closure: &ClosureFn,
) -> Result<(f64, Vec<f64>)> {
    let op = match &surrogate.net {
        SurrogateNet::Spectral(op) => op,
        SurrogateNet::Mlp(_) => panic!("weak-form loss is defined for the spectral family"),
    };
    let spec0 = match base {
        FamilyBase::Darcy(s) => s,
        _ => panic!("weak-form loss applies to the Darcy family"),
    };
    let mesh = DarcyMesh::build(spec0.n_side)?;
    let gi = grid_info(base);
    let k_count = thetas.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; op.params.len()];
    for theta in thetas {
        let z = [theta[0], theta[1], theta[2]];
        let input = surrogate.spectral_features(&gi, theta);
        let (out, cache) = op.forward_cached(&input);
        let u_full = subgrid_to_full(spec0.n_side, &out);
        let r = darcy::weak_residual_generic::<f64>(&mesh, &z, &u_full, None, Some(closure));
        loss += r.iter().map(|v| v * v).sum::<f64>() / k_count;
        let w_int: Vec<f64> = r.iter().map(|v| 2.0 * v / k_count).collect();
        let jt_w = weak_jacobian_transpose_full(&mesh, &z, &u_full, closure, &w_int);
        let up_sub = super::full_to_subgrid(spec0.n_side, &jt_w);
        let g = op.vjp(&cache, &up_sub);
        for (a, v) in grad.iter_mut().zip(&g.params) {
            *a += v;
        }
    }
    Ok((loss, grad))
}

/// alpha-pathway of the weak-form loss: the dual weak residual under
/// beta + eps g feeds a dual closure backprop per element.
pub fn weakform_alpha_hypergrad(
    surrogate: &Surrogate,
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    closure: &ClosureFn,
    g_dir: &[f64],
    accum: &mut [f64],
) -> Result<()> {
    let op = match &surrogate.net {
        SurrogateNet::Spectral(op) => op,
        SurrogateNet::Mlp(_) => return Ok(()),
    };
    let spec0 = match base {
        FamilyBase::Darcy(s) => s,
        _ => return Ok(()),
    };
    let ClosureFn::Net(net) = closure else {
        return Ok(());
    };
    let mesh = DarcyMesh::build(spec0.n_side)?;
    let gi = grid_info(base);
    let k_count = thetas.len().max(1) as f64;
    let lifted: Vec<Dual<f64>> = net.lift();

    for theta in thetas {
        let z = [theta[0], theta[1], theta[2]];
        let input = surrogate.spectral_features(&gi, theta);
        let (out, dout) = op.jvp(&input, None, Some(g_dir));
        let u_full_v = subgrid_to_full(spec0.n_side, &out);
        let u_full_d = subgrid_to_full(spec0.n_side, &dout);
        let u_dual: Vec<Dual<f64>> = u_full_v
            .iter()
            .zip(&u_full_d)
            .map(|(&a, &b)| Dual::new(a, b))
            .collect();
        // dual element averages and closure values
        let ne = mesh.tris.len();
        let mut u_bar = Vec::with_capacity(ne);
        for tri in &mesh.tris {
            u_bar.push(
                (u_dual[tri.nodes[0]] + u_dual[tri.nodes[1]] + u_dual[tri.nodes[2]])
                    .scale(1.0 / 3.0),
            );
        }
        let cache = mlp::forward_cached(&net.widths, net.activation, &lifted, &u_bar);
        let f_vals = cache.acts.last().unwrap();
        // dual residual over interior nodes
        let ni = mesh.n_interior();
        let mut r = vec![Dual::<f64>::from_f64(0.0); ni];
        // per-element flux sums per interior vertex, reused for the weights
        let mut elem_flux: Vec<[Dual<f64>; 3]> = Vec::with_capacity(ne);
        for (e, tri) in mesh.tris.iter().enumerate() {
            let phi = darcy::basis_values(tri.centroid.0, tri.centroid.1);
            let exp_z = (z[0] * phi[0] + z[1] * phi[1] + z[2] * phi[2]).exp();
            let a_e = f_vals[e].sigmoid().scale(exp_z * tri.area);
            let sl = darcy::source(tri.centroid.0, tri.centroid.1) * tri.area / 3.0;
            let mut fluxes = [Dual::<f64>::from_f64(0.0); 3];
            for ai in 0..3 {
                let mut flux = Dual::<f64>::from_f64(0.0);
                for bi in 0..3 {
                    flux =
                        flux + u_dual[tri.nodes[bi]].scale(dot(&tri.grads[ai], &tri.grads[bi]));
                }
                fluxes[ai] = flux;
                let ii = mesh.interior_of_node[tri.nodes[ai]];
                if ii != usize::MAX {
                    r[ii] = r[ii] + a_e * flux - Dual::from_f64(sl);
                }
            }
            elem_flux.push(fluxes);
        }
        // per-element weight: W_e = sum_{i in e int} 2 r_i * exp_z*area*sig'(f)*flux_i
        let mut ws = Vec::with_capacity(ne);
        for (e, tri) in mesh.tris.iter().enumerate() {
            let phi = darcy::basis_values(tri.centroid.0, tri.centroid.1);
            let exp_z = (z[0] * phi[0] + z[1] * phi[1] + z[2] * phi[2]).exp();
            let sig = f_vals[e].sigmoid();
            let dsig = sig * (Dual::from_f64(1.0) - sig);
            let mut w_e = Dual::<f64>::from_f64(0.0);
            for ai in 0..3 {
                let ii = mesh.interior_of_node[tri.nodes[ai]];
                if ii != usize::MAX {
                    w_e = w_e + r[ii].scale(2.0 / k_count) * elem_flux[e][ai];
                }
            }
            ws.push(w_e * dsig.scale(exp_z * tri.area));
        }
        closure.accumulate_param_grad_dual(&u_bar, &ws, accum);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// strong-form collocation loss (PINN families)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CollocationSet {
    /// interior coordinates in physical units, row-major (n_interior x dims)
    pub interior: Vec<f64>,
    pub n_interior: usize,
    /// boundary points for Dirichlet penalties (Darcy only)
    pub boundary: Vec<f64>,
    pub n_boundary: usize,
}

pub fn sample_collocation(
    base: &FamilyBase,
    n_interior: usize,
    n_boundary: usize,
    rng: &mut StreamRng,
) -> CollocationSet {
    match base {
        FamilyBase::MassDamper(s) => {
            let interior: Vec<f64> = (0..n_interior)
                .map(|_| rng.uniform_in(0.0, s.t_end))
                .collect();
            CollocationSet {
                interior,
                n_interior,
                boundary: Vec::new(),
                n_boundary: 0,
            }
        }
        FamilyBase::Darcy(_) => {
            let mut interior = Vec::with_capacity(2 * n_interior);
            for _ in 0..n_interior {
                interior.push(rng.uniform_in(1e-3, 1.0 - 1e-3));
                interior.push(rng.uniform_in(1e-3, 1.0 - 1e-3));
            }
            let mut boundary = Vec::with_capacity(2 * n_boundary);
            for i in 0..n_boundary {
                let t = rng.uniform();
                match i % 4 {
                    0 => boundary.extend_from_slice(&[t, 0.0]),
                    1 => boundary.extend_from_slice(&[t, 1.0]),
                    2 => boundary.extend_from_slice(&[0.0, t]),
                    _ => boundary.extend_from_slice(&[1.0, t]),
                }
            }
            CollocationSet {
                interior,
                n_interior,
                boundary,
                n_boundary,
            }
        }
        FamilyBase::Burgers(_) => CollocationSet {
            interior: Vec::new(),
            n_interior: 0,
            boundary: Vec::new(),
            n_boundary: 0,
        },
    }
}

/// u, u_t, u_tt of the collocation net at one (theta, t), generic in the
/// scalar so the epsilon level can ride along.
fn pinn_time_derivs<S: Real>(
    net: &MlpParams,
    lifted: &[S],
    theta_norm: &[S],
    t_norm: S,
    dt_norm_dt: f64,
) -> (S, S, S) {
    type D2<S> = Dual<Dual<S>>;
    let mut xin: Vec<D2<S>> = theta_norm
        .iter()
        .map(|&v| Dual::constant(Dual::constant(v)))
        .collect();
    // seed d/dt twice through the normalized coordinate
    xin.push(Dual::new(
        Dual::new(t_norm, S::from_f64(dt_norm_dt)),
        Dual::new(S::from_f64(dt_norm_dt), S::zero()),
    ));
    let lifted2: Vec<D2<S>> = lifted
        .iter()
        .map(|&p| Dual::constant(Dual::constant(p)))
        .collect();
    let y = mlp::forward(&net.widths, net.activation, &lifted2, &xin)[0];
    (y.v.v, y.v.d, y.d.d)
}

/// Strong-form oscillator residual loss for the collocation family:
/// mean_i (u_tt + f(u_t) + k u - F(t))^2 + (u(0)-u0)^2 + (u_t(0)-v0)^2.
pub fn loss_collocation_ode(
    surrogate: &Surrogate,
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    closure: &ClosureFn,
    pts: &CollocationSet,
) -> (f64, Vec<f64>) {
    let net = match &surrogate.net {
        SurrogateNet::Mlp(net) => net,
        SurrogateNet::Spectral(_) => panic!("collocation loss needs the collocation family"),
    };
    let spec0 = match base {
        FamilyBase::MassDamper(s) => s,
        _ => panic!("ode collocation loss applies to the mass-damper family"),
    };
    let scale_t = 2.0 / spec0.t_end;
    let k_count = thetas.len().max(1) as f64;
    let n_int = pts.n_interior.max(1) as f64;

    let mut loss = 0.0;
    let mut grad = vec![0.0; net.params.len()];
    type D2 = Dual<Dual<f64>>;
    let lifted2: Vec<D2> = net
        .params
        .iter()
        .map(|&p| Dual::constant(Dual::constant(p)))
        .collect();

    for theta in thetas {
        let kk = theta[0].exp();
        let tn = surrogate.norm_theta(theta);
        // batched D2 forward over interior points + the IC point
        let mut all_t: Vec<f64> = pts.interior.clone();
        all_t.push(0.0);
        let d_in = net.d_in();
        let mut xs: Vec<D2> = Vec::with_capacity(all_t.len() * d_in);
        for &t in &all_t {
            for &v in &tn {
                xs.push(Dual::constant(Dual::constant(v)));
            }
            xs.push(Dual::new(
                Dual::new(2.0 * t / spec0.t_end - 1.0, scale_t),
                Dual::new(scale_t, 0.0),
            ));
        }
        let cache = mlp::forward_cached(&net.widths, net.activation, &lifted2, &xs);
        let ys = cache.acts.last().unwrap().clone();

        let u_dot: Vec<f64> = ys.iter().map(|y| y.v.d).collect();
        let (f_v, fp_v) = closure.eval_batch_with_grad(&u_dot);

        // residual weights: a = dL/du, b = dL/du_t, c = dL/du_tt per point
        let mut upstream: Vec<D2> = Vec::with_capacity(ys.len());
        let n_pts = pts.n_interior;
        for (i, y) in ys.iter().enumerate() {
            let (u, ut, utt) = (y.v.v, y.v.d, y.d.d);
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            if i < n_pts {
                let t = all_t[i];
                let forcing = spec0.forcing_amp * (spec0.forcing_freq * t).sin();
                let r = utt + f_v[i] + kk * u - forcing;
                loss += r * r / (n_int * k_count);
                let w = 2.0 * r / (n_int * k_count);
                a += w * kk;
                b += w * fp_v[i];
                c += w;
            } else {
                // IC anchor at t = 0
                let ic_u = u - theta[1];
                let ic_v = ut - theta[2];
                loss += (ic_u * ic_u + ic_v * ic_v) / k_count;
                a += 2.0 * ic_u / k_count;
                b += 2.0 * ic_v / k_count;
            }
            upstream.push(Dual::new(
                Dual::new(c, 0.5 * b),
                Dual::new(0.5 * b, a),
            ));
        }
        let g = mlp::backprop(&net.widths, net.activation, &lifted2, &cache, &upstream);
        for (acc, gd) in grad.iter_mut().zip(&g.params) {
            // the .d.d component carries a*du + b*du_t + c*du_tt
            *acc += gd.d.d;
        }
    }
    (loss, grad)
}

/// alpha-pathway of the collocation ODE loss along `g_dir`.
pub fn collocation_ode_alpha_hypergrad(
    surrogate: &Surrogate,
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    closure: &ClosureFn,
    pts: &CollocationSet,
    g_dir: &[f64],
    accum: &mut [f64],
) {
    let net = match &surrogate.net {
        SurrogateNet::Mlp(net) => net,
        SurrogateNet::Spectral(_) => return,
    };
    let spec0 = match base {
        FamilyBase::MassDamper(s) => s,
        _ => return,
    };
    let scale_t = 2.0 / spec0.t_end;
    let k_count = thetas.len().max(1) as f64;
    let n_int = pts.n_interior.max(1) as f64;
    // epsilon level innermost: params lifted with tangent g
    type E = Dual<f64>;
    let lifted_e: Vec<E> = net.lift_dual(g_dir);

    for theta in thetas {
        let kk = theta[0].exp();
        let tn: Vec<E> = surrogate
            .norm_theta(theta)
            .iter()
            .map(|&v| E::from_f64(v))
            .collect();
        let mut vs: Vec<Dual<f64>> = Vec::with_capacity(pts.n_interior);
        let mut ws: Vec<Dual<f64>> = Vec::with_capacity(pts.n_interior);
        for i in 0..pts.n_interior {
            let t = pts.interior[i];
            let (u, ut, utt) = pinn_time_derivs(
                net,
                &lifted_e,
                &tn,
                E::from_f64(2.0 * t / spec0.t_end - 1.0),
                scale_t,
            );
            let f_ut = closure.eval_generic(ut);
            let forcing = spec0.forcing_amp * (spec0.forcing_freq * t).sin();
            let r = utt + f_ut + u.scale(kk) - E::from_f64(forcing);
            vs.push(ut);
            ws.push(r.scale(2.0 / (n_int * k_count)));
        }
        closure.accumulate_param_grad_dual(&vs, &ws, accum);
    }
}

/// u and its first/second spatial derivatives along one coordinate axis for
/// the Darcy collocation net. `axis` is 0 for x, 1 for y.
#[allow(clippy::too_many_arguments)]
fn pinn_axis_derivs(
    net: &MlpParams,
    lifted2: &[Dual<Dual<f64>>],
    tn: &[f64],
    x: f64,
    y: f64,
    axis: usize,
    cacheable: &mut Vec<Dual<Dual<f64>>>,
) -> (f64, f64, f64) {
    type D2 = Dual<Dual<f64>>;
    cacheable.clear();
    for &v in tn {
        cacheable.push(D2::from_f64(v));
    }
    let xn = 2.0 * x - 1.0;
    let yn = 2.0 * y - 1.0;
    let seed = |v: f64| Dual::new(Dual::new(v, 2.0), Dual::new(2.0, 0.0));
    if axis == 0 {
        cacheable.push(seed(xn));
        cacheable.push(D2::from_f64(yn));
    } else {
        cacheable.push(D2::from_f64(xn));
        cacheable.push(seed(yn));
    }
    let yv = mlp::forward(&net.widths, net.activation, lifted2, cacheable)[0];
    (yv.v.v, yv.v.d, yv.d.d)
}

/// Strong-form Darcy residual loss for the collocation family:
/// mean_i (-div(a grad u) - s)^2 + mean_bnd u^2 (homogeneous Dirichlet).
pub fn loss_collocation_darcy(
    surrogate: &Surrogate,
    base: &FamilyBase,
    thetas: &[Vec<f64>],
    closure: &ClosureFn,
    pts: &CollocationSet,
) -> (f64, Vec<f64>) {
    let net = match &surrogate.net {
        SurrogateNet::Mlp(net) => net,
        SurrogateNet::Spectral(_) => panic!("collocation loss needs the collocation family"),
    };
    if !matches!(base, FamilyBase::Darcy(_)) {
        panic!("darcy collocation loss applies to the Darcy family");
    }
    let k_count = thetas.len().max(1) as f64;
    let n_int = pts.n_interior.max(1) as f64;
    let n_bnd = pts.n_boundary.max(1) as f64;

    type D2 = Dual<Dual<f64>>;
    let lifted2: Vec<D2> = net
        .params
        .iter()
        .map(|&p| Dual::constant(Dual::constant(p)))
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.params.len()];
    let mut buf: Vec<D2> = Vec::new();

    for theta in thetas {
        let z = [theta[0], theta[1], theta[2]];
        let tn = surrogate.norm_theta(theta);
        // interior points: two directional passes each
        let mut xs_x: Vec<D2> = Vec::new();
        let mut xs_y: Vec<D2> = Vec::new();
        for i in 0..pts.n_interior {
            let (x, y) = (pts.interior[2 * i], pts.interior[2 * i + 1]);
            pinn_axis_derivs(net, &lifted2, &tn, x, y, 0, &mut buf);
            xs_x.extend_from_slice(&buf);
            pinn_axis_derivs(net, &lifted2, &tn, x, y, 1, &mut buf);
            xs_y.extend_from_slice(&buf);
        }
        let cache_x = mlp::forward_cached(&net.widths, net.activation, &lifted2, &xs_x);
        let cache_y = mlp::forward_cached(&net.widths, net.activation, &lifted2, &xs_y);
        let ys_x = cache_x.acts.last().unwrap().clone();
        let ys_y = cache_y.acts.last().unwrap().clone();

        let u_vals: Vec<f64> = ys_x.iter().map(|v| v.v.v).collect();
        // f, f', f'' at u via nested duals of the closure
        let mut f = vec![0.0; u_vals.len()];
        let mut fp = vec![0.0; u_vals.len()];
        let mut fpp = vec![0.0; u_vals.len()];
        for (i, &u) in u_vals.iter().enumerate() {
            let y = closure.eval_generic(crate::nn::real::dual2_seed(u));
            let (a, b, c) = crate::nn::real::dual2_unpack(y);
            f[i] = a;
            fp[i] = b;
            fpp[i] = c;
        }

        let mut up_x: Vec<D2> = Vec::with_capacity(ys_x.len());
        let mut up_y: Vec<D2> = Vec::with_capacity(ys_y.len());
        for i in 0..pts.n_interior {
            let (x, y) = (pts.interior[2 * i], pts.interior[2 * i + 1]);
            let (ux, uxx) = (ys_x[i].v.d, ys_x[i].d.d);
            let (_, uy, uyy) = (ys_y[i].v.v, ys_y[i].v.d, ys_y[i].d.d);
            let phi = darcy::basis_values(x, y);
            let zval = z[0] * phi[0] + z[1] * phi[1] + z[2] * phi[2];
            let e = zval.exp();
            // spatial gradient of z(x)
            use std::f64::consts::PI;
            let mut zx = 0.0;
            let mut zy = 0.0;
            for (c, (m, nfreq)) in darcy::BASIS_MN.iter().enumerate() {
                zx += z[c] * m * PI * (m * PI * x).cos() * (nfreq * PI * y).sin();
                zy += z[c] * nfreq * PI * (m * PI * x).sin() * (nfreq * PI * y).cos();
            }
            let sig = f[i].sigmoid();
            let dsig = sig * (1.0 - sig);
            let ddsig = dsig * (1.0 - 2.0 * sig);
            let a_coef = e * sig;
            let lap = uxx + uyy;
            let grad2 = ux * ux + uy * uy;
            let e_dot_grad = zx * ux + zy * uy;
            let div = a_coef * lap + e * sig * e_dot_grad + e * dsig * fp[i] * grad2;
            let r = -div - darcy::source(x, y);
            loss += r * r / (n_int * k_count);
            let w = 2.0 * r / (n_int * k_count);
            // partials of r
            let dr_du = -(e * dsig * fp[i] * lap
                + e * dsig * fp[i] * e_dot_grad
                + e * (ddsig * fp[i] * fp[i] + dsig * fpp[i]) * grad2);
            let dr_dux = -(e * sig * zx + 2.0 * e * dsig * fp[i] * ux);
            let dr_duy = -(e * sig * zy + 2.0 * e * dsig * fp[i] * uy);
            let dr_dlap = -a_coef;
            up_x.push(Dual::new(
                Dual::new(w * dr_dlap, 0.5 * w * dr_dux),
                Dual::new(0.5 * w * dr_dux, w * dr_du),
            ));
            up_y.push(Dual::new(
                Dual::new(w * dr_dlap, 0.5 * w * dr_duy),
                Dual::new(0.5 * w * dr_duy, 0.0),
            ));
        }
        let gx = mlp::backprop(&net.widths, net.activation, &lifted2, &cache_x, &up_x);
        let gy = mlp::backprop(&net.widths, net.activation, &lifted2, &cache_y, &up_y);
        for ((acc, a), b) in grad.iter_mut().zip(&gx.params).zip(&gy.params) {
            *acc += a.d.d + b.d.d;
        }

        // boundary penalty: plain forward
        if pts.n_boundary > 0 {
            let d_in = net.d_in();
            let mut xs: Vec<f64> = Vec::with_capacity(pts.n_boundary * d_in);
            for ib in 0..pts.n_boundary {
                let (x, y) = (pts.boundary[2 * ib], pts.boundary[2 * ib + 1]);
                xs.extend_from_slice(&tn);
                xs.push(2.0 * x - 1.0);
                xs.push(2.0 * y - 1.0);
            }
            let cache = mlp::forward_cached(&net.widths, net.activation, &net.params, &xs);
            let uvals = cache.acts.last().unwrap().clone();
            let mut up = vec![0.0; uvals.len()];
            for (i, &u) in uvals.iter().enumerate() {
                loss += u * u / (n_bnd * k_count);
                up[i] = 2.0 * u / (n_bnd * k_count);
            }
            let g = mlp::backprop(&net.widths, net.activation, &net.params, &cache, &up);
            for (acc, v) in grad.iter_mut().zip(&g.params) {
                *acc += v;
            }
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::FamilyBase;
    use crate::solvers::darcy::DarcySpec;
    use crate::solvers::mass_damper::MassDamperSpec;
    use crate::surrogate::{SurrogateArch, SurrogateFamily};

    fn exp1_base() -> FamilyBase {
        FamilyBase::MassDamper(MassDamperSpec::paper(0.0, 0.0, 0.0))
    }

    fn exp2_base() -> FamilyBase {
        FamilyBase::Darcy(DarcySpec::with_mesh([0.0; 3], 9))
    }

    fn small_arch() -> SurrogateArch {
        SurrogateArch {
            width: 3,
            modes: vec![3],
            n_layers: 2,
            pinn_hidden_layers: 2,
            pinn_hidden_width: 10,
        }
    }

    fn mk(family: SurrogateFamily, base: &FamilyBase, seed: u64) -> Surrogate {
        let mut rng = StreamRng::new(seed);
        let p = base.family().p_dims();
        Surrogate::init(
            family,
            base,
            &small_arch(),
            vec![0.5; p],
            vec![1.5; p],
            &mut rng,
        )
        .unwrap()
    }

    fn closure_net(seed: u64) -> ClosureFn {
        let mut rng = StreamRng::new(seed);
        ClosureFn::Net(crate::nn::MlpParams::init(
            &[1, 6, 1],
            crate::nn::Activation::SiLU,
            &mut rng,
        ))
    }

    #[test]
    fn supervised_zero_when_surrogate_equals_solver() {
        // loss vanishes iff the surrogate reproduces the reference exactly;
        // verified through the zero-output case + direct norm computation.
        let base = exp1_base();
        let closure = ClosureFn::Cubic { a: 0.08, b: 0.08 };
        let thetas = vec![vec![5.0f64.ln(), 0.5, 2.0]];
        let refs = supervised_refs(&base, &thetas, &closure);
        assert_eq!(refs.skipped, 0);
        // zero-output surrogate: loss equals the mean squared field norm
        let mut s = mk(SurrogateFamily::SpectralSupervised, &base, 5);
        for v in s.net.params_mut().iter_mut() {
            *v = 0.0;
        }
        let (loss, grad) = loss_supervised(&s, &base, &thetas, &refs);
        let want: f64 = refs.targets[0]
            .as_ref()
            .unwrap()
            .iter()
            .map(|v| v * v)
            .sum();
        assert!((loss - want).abs() < 1e-10 * want.max(1.0));
        // zero net, zero activation derivative structure: gradient may be
        // nonzero through biases; just check finiteness here
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn supervised_beta_gradient_matches_fd() {
        let base = exp1_base();
        let closure = closure_net(7);
        let thetas = vec![vec![5.0f64.ln(), 0.2, 1.8], vec![5.2f64.ln(), -0.3, 2.2]];
        let refs = supervised_refs(&base, &thetas, &closure);
        let s = mk(SurrogateFamily::SpectralSupervised, &base, 6);
        let (_, grad) = loss_supervised(&s, &base, &thetas, &refs);
        let h = 1e-6;
        let n = s.net.n_params();
        let stride = (n / 19).max(1);
        for j in (0..n).step_by(stride) {
            let mut up = s.clone();
            up.net.params_mut()[j] += h;
            let mut dn = s.clone();
            dn.net.params_mut()[j] -= h;
            let (lu, _) = loss_supervised(&up, &base, &thetas, &refs);
            let (ld, _) = loss_supervised(&dn, &base, &thetas, &refs);
            let fd = (lu - ld) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-4, "beta[{j}]: an={} fd={fd}", grad[j]);
        }
    }

    #[test]
    fn supervised_hypergrad_matches_fd_in_alpha() {
        // d/d alpha of <grad_beta L, g> compared against central differences
        // of <grad_beta L(alpha +- h), g>.
        let base = exp1_base();
        let net = match closure_net(8) {
            ClosureFn::Net(n) => n,
            _ => unreachable!(),
        };
        let thetas = vec![vec![5.0f64.ln(), 0.4, 2.1]];
        let s = mk(SurrogateFamily::SpectralSupervised, &base, 9);
        let mut rng = StreamRng::new(10);
        let g_dir: Vec<f64> = (0..s.net.n_params()).map(|_| rng.normal()).collect();

        let closure = ClosureFn::Net(net.clone());
        let refs = supervised_refs(&base, &thetas, &closure);
        let mut hyper = vec![0.0; net.params.len()];
        supervised_alpha_hypergrad(&s, &base, &thetas, &refs, &closure, &g_dir, &mut hyper)
            .unwrap();

        let inner = |c: &ClosureFn| -> f64 {
            let refs = supervised_refs(&base, &thetas, c);
            let (_, grad) = loss_supervised(&s, &base, &thetas, &refs);
            dot(&grad, &g_dir)
        };
        let h = 1e-5;
        let stride = (net.params.len() / 9).max(1);
        for j in (0..net.params.len()).step_by(stride) {
            let mut up = net.clone();
            up.params[j] += h;
            let mut dn = net.clone();
            dn.params[j] -= h;
            let fd = (inner(&ClosureFn::Net(up)) - inner(&ClosureFn::Net(dn))) / (2.0 * h);
            let rel = (hyper[j] - fd).abs() / fd.abs().max(1e-2);
            assert!(rel < 1e-3, "alpha[{j}]: an={} fd={fd}", hyper[j]);
        }
    }

    #[test]
    fn physics_ode_residual_on_exact_trajectory_is_small_and_second_order() {
        // substitute the solver trajectory for (w, v): residual is O(dt^2)
        // and shrinks ~4x when dt halves. Evaluated directly on the residual
        // formula with fields injected through a zero-layer trick: compute
        // residuals by hand here rather than through a surrogate.
        let closure = ClosureFn::Cubic { a: 0.08, b: 0.08 };
        let resid = |dt: f64| -> f64 {
            let spec = MassDamperSpec {
                dt,
                ..MassDamperSpec::paper(5.0f64.ln(), 0.5, 2.0)
            };
            let tr = leapfrog_solve(&spec, &closure).unwrap();
            let n = spec.n_nodes();
            let wd = time_derivative(&tr.w, dt);
            let vd = time_derivative(&tr.v, dt);
            let (f_v, _) = closure.eval_batch_with_grad(&tr.v);
            let times = spec.times();
            let mut ss = 0.0;
            // interior residuals only: the one-sided ends are first order
            for i in 1..n - 1 {
                let r1 = wd[i] - tr.v[i];
                let forcing = 10.0 * (times[i]).sin();
                let r2 = vd[i] - (forcing - f_v[i] - 5.0 * tr.w[i]);
                ss += r1 * r1 + r2 * r2;
            }
            (ss / (n - 2) as f64).sqrt()
        };
        let r1 = resid(0.08);
        let r2 = resid(0.04);
        let ratio = r1 / r2;
        assert!(
            (3.0..=5.0).contains(&ratio),
            "consistency ratio {ratio} ({r1:.2e} vs {r2:.2e})"
        );
    }

    #[test]
    fn physics_ode_zero_fields_zero_forcing() {
        let mut base_spec = MassDamperSpec::paper(0.0, 0.0, 0.0);
        base_spec.forcing_amp = 0.0;
        let base = FamilyBase::MassDamper(base_spec);
        let mut s = mk(SurrogateFamily::SpectralPhysics, &base, 11);
        for v in s.net.params_mut().iter_mut() {
            *v = 0.0;
        }
        // u0 = v0 = 0 so the anchors vanish too
        let thetas = vec![vec![0.3, 0.0, 0.0]];
        let (loss, _) = loss_physics_ode(&s, &base, &thetas, &ClosureFn::Zero);
        assert!(loss.abs() < 1e-24, "loss {loss}");
    }

    #[test]
    fn physics_ode_beta_gradient_matches_fd() {
        let base = exp1_base();
        let closure = closure_net(12);
        let thetas = vec![vec![5.0f64.ln(), 0.3, 2.0]];
        let s = mk(SurrogateFamily::SpectralPhysics, &base, 13);
        let (_, grad) = loss_physics_ode(&s, &base, &thetas, &closure);
        let h = 1e-6;
        let n = s.net.n_params();
        let stride = (n / 17).max(1);
        for j in (0..n).step_by(stride) {
            let mut up = s.clone();
            up.net.params_mut()[j] += h;
            let mut dn = s.clone();
            dn.net.params_mut()[j] -= h;
            let (lu, _) = loss_physics_ode(&up, &base, &thetas, &closure);
            let (ld, _) = loss_physics_ode(&dn, &base, &thetas, &closure);
            let fd = (lu - ld) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-4, "beta[{j}]: an={} fd={fd}", grad[j]);
        }
    }

    #[test]
    fn physics_ode_hypergrad_matches_fd() {
        let base = exp1_base();
        let net = match closure_net(14) {
            ClosureFn::Net(n) => n,
            _ => unreachable!(),
        };
        let thetas = vec![vec![5.1f64.ln(), -0.2, 2.3]];
        let s = mk(SurrogateFamily::SpectralPhysics, &base, 15);
        let mut rng = StreamRng::new(16);
        let g_dir: Vec<f64> = (0..s.net.n_params()).map(|_| rng.normal()).collect();
        let mut hyper = vec![0.0; net.params.len()];
        physics_ode_alpha_hypergrad(
            &s,
            &base,
            &thetas,
            &ClosureFn::Net(net.clone()),
            &g_dir,
            &mut hyper,
        );
        let inner = |c: &ClosureFn| -> f64 {
            let (_, grad) = loss_physics_ode(&s, &base, &thetas, c);
            dot(&grad, &g_dir)
        };
        let h = 1e-5;
        let stride = (net.params.len() / 9).max(1);
        for j in (0..net.params.len()).step_by(stride) {
            let mut up = net.clone();
            up.params[j] += h;
            let mut dn = net.clone();
            dn.params[j] -= h;
            let fd = (inner(&ClosureFn::Net(up)) - inner(&ClosureFn::Net(dn))) / (2.0 * h);
            let rel = (hyper[j] - fd).abs() / fd.abs().max(1e-2);
            assert!(rel < 1e-3, "alpha[{j}]: an={} fd={fd}", hyper[j]);
        }
    }

    #[test]
    fn weakform_near_zero_at_converged_solution_and_normized_at_zero() {
        let spec = DarcySpec::with_mesh([0.2, -0.1, 0.2], 9);
        let base = FamilyBase::Darcy(spec.clone());
        let gt = ClosureFn::HalfSquare;
        // converged solution -> residual below solver tolerance
        let (u, info) = darcy::darcy_fixed_point(&spec, &gt).unwrap();
        let mesh = DarcyMesh::build(9).unwrap();
        let r = darcy::weak_residual_generic::<f64>(&mesh, &spec.z, &u, None, Some(&gt));
        let rn: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rn <= info.residual + 1e-12);
        assert!(rn < spec.fp_tol * 10.0);

        // zero surrogate output -> loss = |b|^2 (load-vector norm)
        let mut s = mk(SurrogateFamily::SpectralPhysics, &base, 17);
        for v in s.net.params_mut().iter_mut() {
            *v = 0.0;
        }
        let thetas = vec![vec![0.2, -0.1, 0.2]];
        let (loss, _) = loss_weakform_darcy(&s, &base, &thetas, &gt).unwrap();
        let b = mesh.load_vector();
        let want: f64 = b.iter().map(|v| v * v).sum();
        assert!((loss - want).abs() < 1e-12 * want);
    }

    #[test]
    fn weakform_beta_gradient_matches_fd() {
        let base = exp2_base();
        let closure = closure_net(18);
        let thetas = vec![vec![0.2, -0.1, 0.25]];
        let s = mk(SurrogateFamily::SpectralPhysics, &base, 19);
        let (_, grad) = loss_weakform_darcy(&s, &base, &thetas, &closure).unwrap();
        let h = 1e-6;
        let n = s.net.n_params();
        let stride = (n / 17).max(1);
        for j in (0..n).step_by(stride) {
            let mut up = s.clone();
            up.net.params_mut()[j] += h;
            let mut dn = s.clone();
            dn.net.params_mut()[j] -= h;
            let (lu, _) = loss_weakform_darcy(&up, &base, &thetas, &closure).unwrap();
            let (ld, _) = loss_weakform_darcy(&dn, &base, &thetas, &closure).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-4, "beta[{j}]: an={} fd={fd}", grad[j]);
        }
    }

    #[test]
    fn weakform_hypergrad_matches_fd() {
        let base = exp2_base();
        let net = match closure_net(20) {
            ClosureFn::Net(n) => n,
            _ => unreachable!(),
        };
        let thetas = vec![vec![0.15, -0.05, 0.2]];
        let s = mk(SurrogateFamily::SpectralPhysics, &base, 21);
        let mut rng = StreamRng::new(22);
        let g_dir: Vec<f64> = (0..s.net.n_params()).map(|_| rng.normal()).collect();
        let mut hyper = vec![0.0; net.params.len()];
        weakform_alpha_hypergrad(
            &s,
            &base,
            &thetas,
            &ClosureFn::Net(net.clone()),
            &g_dir,
            &mut hyper,
        )
        .unwrap();
        let inner = |c: &ClosureFn| -> f64 {
            let (_, grad) = loss_weakform_darcy(&s, &base, &thetas, c).unwrap();
            dot(&grad, &g_dir)
        };
        let h = 1e-5;
        let stride = (net.params.len() / 9).max(1);
        for j in (0..net.params.len()).step_by(stride) {
            let mut up = net.clone();
            up.params[j] += h;
            let mut dn = net.clone();
            dn.params[j] -= h;
            let fd = (inner(&ClosureFn::Net(up)) - inner(&ClosureFn::Net(dn))) / (2.0 * h);
            let rel = (hyper[j] - fd).abs() / fd.abs().max(1e-2);
            assert!(rel < 1e-3, "alpha[{j}]: an={} fd={fd}", hyper[j]);
        }
    }

    #[test]
    fn collocation_ode_beta_gradient_matches_fd() {
        let base = exp1_base();
        let closure = closure_net(23);
        let thetas = vec![vec![5.0f64.ln(), 0.3, 2.0]];
        let s = mk(SurrogateFamily::CollocationPhysics, &base, 24);
        let mut rng = StreamRng::new(25);
        let pts = sample_collocation(&base, 12, 0, &mut rng);
        let (_, grad) = loss_collocation_ode(&s, &base, &thetas, &closure, &pts);
        let h = 1e-6;
        let n = s.net.n_params();
        let stride = (n / 19).max(1);
        for j in (0..n).step_by(stride) {
            let mut up = s.clone();
            up.net.params_mut()[j] += h;
            let mut dn = s.clone();
            dn.net.params_mut()[j] -= h;
            let (lu, _) = loss_collocation_ode(&up, &base, &thetas, &closure, &pts);
            let (ld, _) = loss_collocation_ode(&dn, &base, &thetas, &closure, &pts);
            let fd = (lu - ld) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-4, "beta[{j}]: an={} fd={fd}", grad[j]);
        }
    }

    #[test]
    fn collocation_ode_hypergrad_matches_fd() {
        let base = exp1_base();
        let net = match closure_net(26) {
            ClosureFn::Net(n) => n,
            _ => unreachable!(),
        };
        let thetas = vec![vec![5.0f64.ln(), 0.1, 1.9]];
        let s = mk(SurrogateFamily::CollocationPhysics, &base, 27);
        let mut rng = StreamRng::new(28);
        let pts = sample_collocation(&base, 10, 0, &mut rng);
        let g_dir: Vec<f64> = (0..s.net.n_params()).map(|_| rng.normal()).collect();
        let mut hyper = vec![0.0; net.params.len()];
        collocation_ode_alpha_hypergrad(
            &s,
            &base,
            &thetas,
            &ClosureFn::Net(net.clone()),
            &pts,
            &g_dir,
            &mut hyper,
        );
        let inner = |c: &ClosureFn| -> f64 {
            let (_, grad) = loss_collocation_ode(&s, &base, &thetas, c, &pts);
            dot(&grad, &g_dir)
        };
        let h = 1e-5;
        let stride = (net.params.len() / 9).max(1);
        for j in (0..net.params.len()).step_by(stride) {
            let mut up = net.clone();
            up.params[j] += h;
            let mut dn = net.clone();
            dn.params[j] -= h;
            let fd = (inner(&ClosureFn::Net(up)) - inner(&ClosureFn::Net(dn))) / (2.0 * h);
            let rel = (hyper[j] - fd).abs() / fd.abs().max(1e-2);
            assert!(rel < 1e-3, "alpha[{j}]: an={} fd={fd}", hyper[j]);
        }
    }

    #[test]
    fn collocation_darcy_zero_net_gives_source_norm_and_zero_bc() {
        let base = exp2_base();
        let mut s = mk(SurrogateFamily::CollocationPhysics, &base, 29);
        for v in s.net.params_mut().iter_mut() {
            *v = 0.0;
        }
        let mut rng = StreamRng::new(30);
        let pts = sample_collocation(&base, 40, 16, &mut rng);
        let thetas = vec![vec![0.2, -0.1, 0.2]];
        let (loss, _) = loss_collocation_darcy(&s, &base, &thetas, &ClosureFn::Zero, &pts);
        // physics part: mean s(x)^2 over interior points; BC part zero
        let want: f64 = (0..pts.n_interior)
            .map(|i| {
                let (x, y) = (pts.interior[2 * i], pts.interior[2 * i + 1]);
                let sv = darcy::source(x, y);
                sv * sv
            })
            .sum::<f64>()
            / pts.n_interior as f64;
        assert!(
            (loss - want).abs() < 1e-12 * want.max(1.0),
            "{loss} vs {want}"
        );
    }

    #[test]
    fn collocation_darcy_manufactured_solution_residual_small() {
        // a == 1 via a saturating closure is impossible with sigmoid; instead
        // check the residual formula against the exact operator for a known
        // net-free field by finite differences on a tiny net trained... here
        // we verify the beta gradient against FD, which exercises every term.
        let base = exp2_base();
        let closure = closure_net(31);
        let thetas = vec![vec![0.1, -0.2, 0.3]];
        let s = mk(SurrogateFamily::CollocationPhysics, &base, 32);
        let mut rng = StreamRng::new(33);
        let pts = sample_collocation(&base, 8, 6, &mut rng);
        let (_, grad) = loss_collocation_darcy(&s, &base, &thetas, &closure, &pts);
        let h = 1e-6;
        let n = s.net.n_params();
        let stride = (n / 23).max(1);
        for j in (0..n).step_by(stride) {
            let mut up = s.clone();
            up.net.params_mut()[j] += h;
            let mut dn = s.clone();
            dn.net.params_mut()[j] -= h;
            let (lu, _) = loss_collocation_darcy(&up, &base, &thetas, &closure, &pts);
            let (ld, _) = loss_collocation_darcy(&dn, &base, &thetas, &closure, &pts);
            let fd = (lu - ld) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-4, "beta[{j}]: an={} fd={fd}", grad[j]);
        }
    }

    #[test]
    fn collocation_boundary_points_on_domain_edge() {
        let base = exp2_base();
        let mut rng = StreamRng::new(34);
        let pts = sample_collocation(&base, 4, 20, &mut rng);
        for i in 0..pts.n_boundary {
            let (x, y) = (pts.boundary[2 * i], pts.boundary[2 * i + 1]);
            let on_edge = x == 0.0 || x == 1.0 || y == 0.0 || y == 1.0;
            assert!(on_edge, "({x}, {y}) not on the boundary");
        }
        // zero-valued net -> BC loss 0 (covered in the zero-net test above)
    }
}
