//! Nonlinear Darcy flow on the unit square: P1 triangular FEM with a
//! solution-dependent permeability a(u, x) = exp(z . phi(x)) sigmoid(f(u)),
//! solved by fixed-point iteration on the linearized system A(u_k) u_{k+1} = b.
//!
//! Coefficients are evaluated at element centroids with the element-average
//! of u, which makes A exact for element-constant data under the one-point
//! quadrature used here.

use crate::closure::ClosureFn;
use crate::error::{Error, Result};
use crate::linalg::{cg_solve, dot, norm2, Csr, Lu};
use crate::nn::mlp;
use crate::nn::real::Real;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const BASIS_MN: [(f64, f64); 3] = [(2.0, 2.0), (2.0, 1.0), (1.0, 2.0)];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DarcySpec {
    pub z: [f64; 3],
    /// nodes per side of the structured grid (33 -> h = 1/32)
    pub n_side: usize,
    pub fp_tol: f64,
    pub fp_max_iters: usize,
}

impl DarcySpec {
    pub fn with_mesh(z: [f64; 3], n_side: usize) -> Self {
        DarcySpec {
            z,
            n_side,
            fp_tol: 1e-8,
            fp_max_iters: 50,
        }
    }

    pub fn paper(z: [f64; 3]) -> Self {
        Self::with_mesh(z, 33)
    }
}

pub fn basis_values(x: f64, y: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, (m, n)) in BASIS_MN.iter().enumerate() {
        out[i] = (m * PI * x).sin() * (n * PI * y).sin();
    }
    out
}

pub fn source(x: f64, y: f64) -> f64 {
    2.0 * PI * PI * (PI * x).sin() * (PI * y).sin()
}

#[derive(Debug, Clone)]
pub struct Tri {
    pub nodes: [usize; 3],
    pub area: f64,
    /// constant P1 basis gradients, one (dx, dy) per vertex
    pub grads: [[f64; 2]; 3],
    pub centroid: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct DarcyMesh {
    pub n_side: usize,
    pub h: f64,
    pub tris: Vec<Tri>,
    /// interior index per node, usize::MAX for boundary nodes
    pub interior_of_node: Vec<usize>,
    pub node_of_interior: Vec<usize>,
}

impl DarcyMesh {
    pub fn build(n_side: usize) -> Result<DarcyMesh> {
        if n_side < 3 {
            return Err(Error::Mesh(format!("mesh needs n_side >= 3, got {n_side}")));
        }
        let n = n_side;
        let h = 1.0 / (n - 1) as f64;
        let coord = |id: usize| -> (f64, f64) {
            let (i, j) = (id / n, id % n);
            (j as f64 * h, i as f64 * h)
        };
        let mut tris = Vec::with_capacity(2 * (n - 1) * (n - 1));
        let mk_tri = |nodes: [usize; 3]| -> Result<Tri> {
            let p: Vec<(f64, f64)> = nodes.iter().map(|&id| coord(id)).collect();
            let (e1x, e1y) = (p[1].0 - p[0].0, p[1].1 - p[0].1);
            let (e2x, e2y) = (p[2].0 - p[0].0, p[2].1 - p[0].1);
            let det = e1x * e2y - e1y * e2x;
            let area = 0.5 * det.abs();
            if area < 1e-14 {
                return Err(Error::Mesh(format!("degenerate element {nodes:?}")));
            }
            // grad of barycentric coords: J^{-T} ref-gradients
            let inv = 1.0 / det;
            // J^{-1} rows
            let (a, b, c, d) = (e2y * inv, -e2x * inv, -e1y * inv, e1x * inv);
            let g1 = [a, c];
            let g2 = [b, d];
            let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
            let centroid = (
                (p[0].0 + p[1].0 + p[2].0) / 3.0,
                (p[0].1 + p[1].1 + p[2].1) / 3.0,
            );
            Ok(Tri {
                nodes,
                area,
                grads: [g0, g1, g2],
                centroid,
            })
        };
        for i in 0..n - 1 {
            for j in 0..n - 1 {
                let n00 = i * n + j;
                let n01 = i * n + j + 1;
                let n10 = (i + 1) * n + j;
                let n11 = (i + 1) * n + j + 1;
                tris.push(mk_tri([n00, n01, n10])?);
                tris.push(mk_tri([n11, n10, n01])?);
            }
        }
        let mut interior_of_node = vec![usize::MAX; n * n];
        let mut node_of_interior = Vec::new();
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let id = i * n + j;
                interior_of_node[id] = node_of_interior.len();
                node_of_interior.push(id);
            }
        }
        Ok(DarcyMesh {
            n_side,
            h,
            tris,
            interior_of_node,
            node_of_interior,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_side * self.n_side
    }

    pub fn n_interior(&self) -> usize {
        self.node_of_interior.len()
    }

    pub fn node_coord(&self, id: usize) -> (f64, f64) {
        let (i, j) = (id / self.n_side, id % self.n_side);
        (j as f64 * self.h, i as f64 * self.h)
    }

    /// Load vector over interior nodes: one-point centroid quadrature of s.
    pub fn load_vector(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.n_interior()];
        for tri in &self.tris {
            let s = source(tri.centroid.0, tri.centroid.1) * tri.area / 3.0;
            for &node in &tri.nodes {
                let ii = self.interior_of_node[node];
                if ii != usize::MAX {
                    b[ii] += s;
                }
            }
        }
        b
    }
}

/// Per-element pieces of the permeability, kept for derivative reuse.
pub struct ElementCoeffs {
    /// exp(z . phi(centroid))
    pub exp_z: Vec<f64>,
    /// element-average of u
    pub u_bar: Vec<f64>,
    /// f(u_bar)
    pub f: Vec<f64>,
    /// full coefficient a_e = exp_z * sigmoid(f)
    pub a: Vec<f64>,
}

pub fn element_coeffs(
    mesh: &DarcyMesh,
    z: &[f64; 3],
    u_full: &[f64],
    closure: &ClosureFn,
) -> ElementCoeffs {
    let ne = mesh.tris.len();
    let mut exp_z = Vec::with_capacity(ne);
    let mut u_bar = Vec::with_capacity(ne);
    for tri in &mesh.tris {
        let phi = basis_values(tri.centroid.0, tri.centroid.1);
        exp_z.push((z[0] * phi[0] + z[1] * phi[1] + z[2] * phi[2]).exp());
        u_bar.push((u_full[tri.nodes[0]] + u_full[tri.nodes[1]] + u_full[tri.nodes[2]]) / 3.0);
    }
    let f = closure.eval_batch(&u_bar);
    let a = exp_z
        .iter()
        .zip(&f)
        .map(|(e, fi)| e * fi.sigmoid())
        .collect();
    ElementCoeffs { exp_z, u_bar, f, a }
}

/// Stiffness over interior nodes for given element coefficients.
pub fn assemble_from_coeffs(mesh: &DarcyMesh, a_e: &[f64]) -> Csr {
    let mut triplets = Vec::with_capacity(mesh.tris.len() * 9);
    for (e, tri) in mesh.tris.iter().enumerate() {
        let c = a_e[e] * tri.area;
        for ai in 0..3 {
            let ii = mesh.interior_of_node[tri.nodes[ai]];
            if ii == usize::MAX {
                continue;
            }
            for bi in 0..3 {
                let jj = mesh.interior_of_node[tri.nodes[bi]];
                if jj == usize::MAX {
                    continue;
                }
                let k = c * dot(&tri.grads[ai], &tri.grads[bi]);
                triplets.push((ii, jj, k));
            }
        }
    }
    Csr::from_triplets(mesh.n_interior(), &triplets)
}

/// Stiffness and load with the physics coefficient evaluated at `u_full`.
pub fn fem_assemble(
    spec: &DarcySpec,
    u_full: &[f64],
    closure: &ClosureFn,
) -> Result<(Csr, Vec<f64>)> {
    let mesh = DarcyMesh::build(spec.n_side)?;
    let coeffs = element_coeffs(&mesh, &spec.z, u_full, closure);
    Ok((assemble_from_coeffs(&mesh, &coeffs.a), mesh.load_vector()))
}

pub struct FixedPointInfo {
    pub iters: usize,
    pub residual: f64,
}

/// Scatter an interior vector into a full nodal vector (boundary zero).
pub fn to_full(mesh: &DarcyMesh, u_int: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; mesh.n_nodes()];
    for (ii, &node) in mesh.node_of_interior.iter().enumerate() {
        full[node] = u_int[ii];
    }
    full
}

pub fn restrict(mesh: &DarcyMesh, u_full: &[f64]) -> Vec<f64> {
    mesh.node_of_interior.iter().map(|&n| u_full[n]).collect()
}

/// Fixed-point solve from u = 0. Returns the full nodal solution.
pub fn darcy_fixed_point(
    spec: &DarcySpec,
    closure: &ClosureFn,
) -> Result<(Vec<f64>, FixedPointInfo)> {
    let mesh = DarcyMesh::build(spec.n_side)?;
    let b = mesh.load_vector();
    let mut u_full = vec![0.0; mesh.n_nodes()];
    let mut coeffs = element_coeffs(&mesh, &spec.z, &u_full, closure);
    let mut a = assemble_from_coeffs(&mesh, &coeffs.a);
    let mut residual = f64::INFINITY;
    for it in 1..=spec.fp_max_iters {
        let u_int = cg_solve(&a, &b, 1e-12, 40 * mesh.n_interior())?;
        u_full = to_full(&mesh, &u_int);
        coeffs = element_coeffs(&mesh, &spec.z, &u_full, closure);
        a = assemble_from_coeffs(&mesh, &coeffs.a);
        let mut au = vec![0.0; u_int.len()];
        a.mul_vec(&u_int, &mut au);
        residual = au
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if !residual.is_finite() {
            return Err(Error::NonFinite("darcy fixed-point residual".into()));
        }
        if residual < spec.fp_tol {
            return Ok((u_full, FixedPointInfo { iters: it, residual }));
        }
    }
    Err(Error::FixedPoint {
        iters: spec.fp_max_iters,
        residual,
    })
}

/// d sigmoid(f)/df robustly through the shared exp.
#[inline]
fn sigmoid_and_grad(f: f64) -> (f64, f64) {
    let s = f.sigmoid();
    (s, s * (1.0 - s))
}

/// Dense Jacobian of the interior residual R(u) = A(u) u - b at u.
pub fn residual_jacobian_dense(
    mesh: &DarcyMesh,
    z: &[f64; 3],
    u_full: &[f64],
    closure: &ClosureFn,
) -> Vec<f64> {
    let ni = mesh.n_interior();
    let coeffs = element_coeffs(mesh, z, u_full, closure);
    let (_, dfdu) = closure.eval_batch_with_grad(&coeffs.u_bar);
    let a = assemble_from_coeffs(mesh, &coeffs.a);
    let mut jac = a.to_dense();
    // coefficient-dependence term: dR_i/du_j += (K^e u)_i * da_e/du_j
    for (e, tri) in mesh.tris.iter().enumerate() {
        let (_, dsig) = sigmoid_and_grad(coeffs.f[e]);
        let da_dubar = coeffs.exp_z[e] * dsig * dfdu[e];
        // K^e u restricted to this element
        let mut keu = [0.0; 3];
        for ai in 0..3 {
            let mut s = 0.0;
            for bi in 0..3 {
                s += dot(&tri.grads[ai], &tri.grads[bi]) * u_full[tri.nodes[bi]];
            }
            keu[ai] = s * tri.area;
        }
        for ai in 0..3 {
            let ii = mesh.interior_of_node[tri.nodes[ai]];
            if ii == usize::MAX {
                continue;
            }
            for bi in 0..3 {
                let jj = mesh.interior_of_node[tri.nodes[bi]];
                if jj == usize::MAX {
                    continue;
                }
                jac[ii * ni + jj] += keu[ai] * da_dubar / 3.0;
            }
        }
    }
    jac
}

/// Damped Newton solve of R(u) = 0 on the same discretization; reference
/// for validating the fixed-point solver.
pub fn newton_solve(spec: &DarcySpec, closure: &ClosureFn, tol: f64) -> Result<Vec<f64>> {
    let mesh = DarcyMesh::build(spec.n_side)?;
    let b = mesh.load_vector();
    let ni = mesh.n_interior();
    let mut u_full = vec![0.0; mesh.n_nodes()];
    let residual = |u_full: &[f64]| -> Vec<f64> {
        let coeffs = element_coeffs(&mesh, &spec.z, u_full, closure);
        let a = assemble_from_coeffs(&mesh, &coeffs.a);
        let u_int = restrict(&mesh, u_full);
        let mut r = vec![0.0; ni];
        a.mul_vec(&u_int, &mut r);
        for (ri, bi) in r.iter_mut().zip(&b) {
            *ri -= bi;
        }
        r
    };
    for _ in 0..100 {
        let r = residual(&u_full);
        let rn = norm2(&r);
        if rn < tol {
            return Ok(u_full);
        }
        let jac = residual_jacobian_dense(&mesh, &spec.z, &u_full, closure);
        let lu = Lu::factor(&jac, ni)?;
        let step = lu.solve(&r);
        // backtracking line search on |R|
        let mut t = 1.0;
        let u_int = restrict(&mesh, &u_full);
        loop {
            let trial: Vec<f64> = u_int.iter().zip(&step).map(|(u, s)| u - t * s).collect();
            let trial_full = to_full(&mesh, &trial);
            if norm2(&residual(&trial_full)) < rn || t < 1e-6 {
                u_full = trial_full;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::FixedPoint {
        iters: 100,
        residual: norm2(&residual(&u_full)),
    })
}

/// Nodal sensitivities du/dz_i (full nodes x 3, column i per parameter) at a
/// converged solution, via the implicit function theorem: J s_i = -dR/dz_i.
pub fn darcy_theta_sensitivities(
    spec: &DarcySpec,
    closure: &ClosureFn,
    u_full: &[f64],
) -> Result<[Vec<f64>; 3]> {
    let mesh = DarcyMesh::build(spec.n_side)?;
    let ni = mesh.n_interior();
    let jac = residual_jacobian_dense(&mesh, &spec.z, u_full, closure);
    let lu = Lu::factor(&jac, ni)?;
    let coeffs = element_coeffs(&mesh, &spec.z, u_full, closure);
    let mut out: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; mesh.n_nodes()]);
    for i in 0..3 {
        // dR/dz_i = sum_e phi_i(c_e) a_e K^e u
        let mut rhs = vec![0.0; ni];
        for (e, tri) in mesh.tris.iter().enumerate() {
            let phi = basis_values(tri.centroid.0, tri.centroid.1);
            for ai in 0..3 {
                let ii = mesh.interior_of_node[tri.nodes[ai]];
                if ii == usize::MAX {
                    continue;
                }
                let mut keu = 0.0;
                for bi in 0..3 {
                    keu += dot(&tri.grads[ai], &tri.grads[bi]) * u_full[tri.nodes[bi]];
                }
                rhs[ii] += phi[i] * coeffs.a[e] * keu * tri.area;
            }
        }
        let mut s = lu.solve(&rhs);
        for v in s.iter_mut() {
            *v = -*v;
        }
        out[i] = to_full(&mesh, &s);
    }
    Ok(out)
}

pub struct DarcyGrads {
    pub z: [f64; 3],
    pub alpha: Vec<f64>,
}

/// Implicit-function gradients at a converged solution: for upstream weights
/// `g_full` on nodal values (boundary entries contribute zero), returns
/// gradients of sum_i g_i u_i with respect to z and the closure parameters.
pub fn darcy_grad(
    spec: &DarcySpec,
    closure: &ClosureFn,
    u_full: &[f64],
    g_full: &[f64],
) -> Result<DarcyGrads> {
    let mesh = DarcyMesh::build(spec.n_side)?;
    let ni = mesh.n_interior();
    let jac = residual_jacobian_dense(&mesh, &spec.z, u_full, closure);
    // J^T lambda = g   (interior restriction)
    let mut jt = vec![0.0; ni * ni];
    for i in 0..ni {
        for j in 0..ni {
            jt[i * ni + j] = jac[j * ni + i];
        }
    }
    let g_int = restrict(&mesh, g_full);
    let lu = Lu::factor(&jt, ni)?;
    let lambda = lu.solve(&g_int);

    // dL/dp = -lambda^T dR/dp accumulated per element
    let coeffs = element_coeffs(&mesh, &spec.z, u_full, closure);
    let mut z_grad = [0.0; 3];
    let mut alpha_pts = Vec::with_capacity(mesh.tris.len());
    let mut alpha_ws = Vec::with_capacity(mesh.tris.len());
    for (e, tri) in mesh.tris.iter().enumerate() {
        // s_e = sum_{i in e, interior} lambda_i (K^e u)_i
        let mut s_e = 0.0;
        for ai in 0..3 {
            let ii = mesh.interior_of_node[tri.nodes[ai]];
            if ii == usize::MAX {
                continue;
            }
            let mut keu = 0.0;
            for bi in 0..3 {
                keu += dot(&tri.grads[ai], &tri.grads[bi]) * u_full[tri.nodes[bi]];
            }
            s_e += lambda[ii] * keu * tri.area;
        }
        let phi = basis_values(tri.centroid.0, tri.centroid.1);
        let (_, dsig) = sigmoid_and_grad(coeffs.f[e]);
        for i in 0..3 {
            z_grad[i] -= s_e * coeffs.a[e] * phi[i];
        }
        alpha_pts.push(coeffs.u_bar[e]);
        alpha_ws.push(-s_e * coeffs.exp_z[e] * dsig);
    }
    let mut alpha = vec![0.0; closure.n_params()];
    closure.accumulate_param_grad(&alpha_pts, &alpha_ws, &mut alpha);
    Ok(DarcyGrads {
        z: z_grad,
        alpha,
    })
}

/// Interior weak-form residual R(u) = A(u)u - b, generic over the scalar so
/// surrogate losses can push dual numbers through it. Cross-checked against
/// the CSR assembly in the tests.
pub fn weak_residual_generic<S: Real>(
    mesh: &DarcyMesh,
    z: &[f64; 3],
    u_full: &[S],
    closure_net: Option<(&crate::nn::MlpParams, &[S])>,
    analytic: Option<&ClosureFn>,
) -> Vec<S> {
    let ne = mesh.tris.len();
    // element averages
    let mut u_bar = Vec::with_capacity(ne);
    for tri in &mesh.tris {
        let s = (u_full[tri.nodes[0]] + u_full[tri.nodes[1]] + u_full[tri.nodes[2]])
            .scale(1.0 / 3.0);
        u_bar.push(s);
    }
    // f(u_bar)
    let f_vals: Vec<S> = match (closure_net, analytic) {
        (Some((net, lifted)), _) => {
            let cache = mlp::forward_cached(&net.widths, net.activation, lifted, &u_bar);
            cache.acts.last().unwrap().clone()
        }
        (None, Some(cf)) => u_bar.iter().map(|&u| cf.eval_generic(u)).collect(),
        _ => panic!("weak_residual_generic needs a closure"),
    };
    let ni = mesh.n_interior();
    let mut r = vec![S::zero(); ni];
    for (e, tri) in mesh.tris.iter().enumerate() {
        let phi = basis_values(tri.centroid.0, tri.centroid.1);
        let exp_z = (z[0] * phi[0] + z[1] * phi[1] + z[2] * phi[2]).exp();
        let a_e = f_vals[e].sigmoid().scale(exp_z * tri.area);
        let sl = source(tri.centroid.0, tri.centroid.1) * tri.area / 3.0;
        for ai in 0..3 {
            let ii = mesh.interior_of_node[tri.nodes[ai]];
            if ii == usize::MAX {
                continue;
            }
            let mut flux = S::zero();
            for bi in 0..3 {
                flux = flux + u_full[tri.nodes[bi]].scale(dot(&tri.grads[ai], &tri.grads[bi]));
            }
            r[ii] = r[ii] + a_e * flux - S::from_f64(sl);
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpParams};
    use crate::rng::StreamRng;

    /// fixed unit coefficient via a closure whose sigmoid saturates to ~1
    fn one_coeff_stiffness(n_side: usize) -> (DarcyMesh, Csr, Vec<f64>) {
        let mesh = DarcyMesh::build(n_side).unwrap();
        let a_e = vec![1.0; mesh.tris.len()];
        let a = assemble_from_coeffs(&mesh, &a_e);
        let b = mesh.load_vector();
        (mesh, a, b)
    }

    #[test]
    fn stiffness_is_symmetric_and_matches_laplacian() {
        let (_, a, _) = one_coeff_stiffness(9);
        assert!(a.max_asymmetry() < 1e-12);
        // structured P1 mesh with unit coefficient: diagonal entries of the
        // five-point-stencil form 4, off-diagonal -1 (scaled by 1)
        let d = a.diagonal();
        for &v in &d {
            assert!((v - 4.0).abs() < 1e-12, "diag {v}");
        }
    }

    #[test]
    fn stiffness_spd_for_positive_coefficients() {
        let mesh = DarcyMesh::build(9).unwrap();
        let mut rng = StreamRng::new(2);
        let a_e: Vec<f64> = (0..mesh.tris.len())
            .map(|_| 0.1 + rng.uniform() * 3.0)
            .collect();
        let a = assemble_from_coeffs(&mesh, &a_e);
        let lam = crate::linalg::smallest_eigenvalue(&a, 200).unwrap();
        assert!(lam > 0.0, "smallest eigenvalue {lam}");
    }

    #[test]
    fn manufactured_solution_converges_at_second_order() {
        // a ≡ 1, s = 2 pi^2 sin sin -> u* = sin(pi x) sin(pi y)
        let l2_error = |n_side: usize| -> f64 {
            let (mesh, a, b) = one_coeff_stiffness(n_side);
            let u = cg_solve(&a, &b, 1e-13, 20000).unwrap();
            let mut err2 = 0.0;
            for (ii, &node) in mesh.node_of_interior.iter().enumerate() {
                let (x, y) = mesh.node_coord(node);
                let exact = (PI * x).sin() * (PI * y).sin();
                err2 += (u[ii] - exact) * (u[ii] - exact);
            }
            (err2 * mesh.h * mesh.h).sqrt()
        };
        let e1 = l2_error(17);
        let e2 = l2_error(33);
        let ratio = e1 / e2;
        assert!(
            (3.5..=4.5).contains(&ratio),
            "L2 ratio {ratio} (e(h)={e1:.3e}, e(h/2)={e2:.3e})"
        );
    }

    #[test]
    fn constant_closure_scales_like_sigmoid() {
        // z = 0, closure output constant c -> A = sigmoid(c) * Laplacian
        let mesh = DarcyMesh::build(9).unwrap();
        let spec = DarcySpec::with_mesh([0.0; 3], 9);
        let mut net = MlpParams::zeros(&[1, 4, 1], Activation::SiLU);
        let np = net.params.len();
        net.params[np - 1] = 0.7; // constant output 0.7
        let u0 = vec![0.0; mesh.n_nodes()];
        let (a, _) = fem_assemble(&spec, &u0, &ClosureFn::Net(net)).unwrap();
        let (_, lap, _) = one_coeff_stiffness(9);
        let scale = 0.7f64.sigmoid();
        for (v, l) in a.values.iter().zip(&lap.values) {
            assert!((v - scale * l).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_case_converges_in_one_iteration() {
        // closure Zero: sigmoid(0) = 1/2 constant, coefficient independent of u
        let spec = DarcySpec::with_mesh([0.1, -0.2, 0.3], 17);
        let (u, info) = darcy_fixed_point(&spec, &ClosureFn::Zero).unwrap();
        assert_eq!(info.iters, 1);
        assert!(info.residual < 1e-9);
        assert!(u.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn infinite_tolerance_returns_first_iterate() {
        let mut spec = DarcySpec::with_mesh([0.2, -0.1, 0.2], 9);
        spec.fp_tol = f64::INFINITY;
        let gt = ClosureFn::HalfSquare;
        let (u1, info) = darcy_fixed_point(&spec, &gt).unwrap();
        assert_eq!(info.iters, 1);
        // first iterate = linear solve with coefficient at u = 0
        let mesh = DarcyMesh::build(9).unwrap();
        let coeffs = element_coeffs(&mesh, &spec.z, &vec![0.0; mesh.n_nodes()], &gt);
        let a = assemble_from_coeffs(&mesh, &coeffs.a);
        let u_int = cg_solve(&a, &mesh.load_vector(), 1e-12, 10000).unwrap();
        let full = to_full(&mesh, &u_int);
        for (x, y) in u1.iter().zip(&full) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn fixed_point_agrees_with_newton() {
        let mut spec = DarcySpec::with_mesh([0.2, -0.1, 0.2], 17);
        spec.fp_tol = 1e-12;
        let gt = ClosureFn::HalfSquare;
        let (u_fp, _) = darcy_fixed_point(&spec, &gt).unwrap();
        let u_newton = newton_solve(&spec, &gt, 1e-12).unwrap();
        let worst = u_fp
            .iter()
            .zip(&u_newton)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "nodal max difference {worst}");
    }

    #[test]
    fn implicit_gradients_match_finite_differences() {
        let mut rng = StreamRng::new(8);
        let net = MlpParams::init(&[1, 6, 1], Activation::SiLU, &mut rng);
        let closure = ClosureFn::Net(net.clone());
        let mut spec = DarcySpec::with_mesh([0.2, -0.1, 0.2], 9);
        spec.fp_tol = 1e-12;
        let mesh = DarcyMesh::build(9).unwrap();

        // upstream on a few interior nodes
        let mut g_full = vec![0.0; mesh.n_nodes()];
        for &node in mesh.node_of_interior.iter().step_by(7) {
            g_full[node] = rng.normal();
        }
        let (u, _) = darcy_fixed_point(&spec, &closure).unwrap();
        let grads = darcy_grad(&spec, &closure, &u, &g_full).unwrap();

        let value = |spec: &DarcySpec, c: &ClosureFn| -> f64 {
            let (u, _) = darcy_fixed_point(spec, c).unwrap();
            u.iter().zip(&g_full).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..3 {
            let mut su = spec.clone();
            su.z[i] += h;
            let mut sd = spec.clone();
            sd.z[i] -= h;
            let fd = (value(&su, &closure) - value(&sd, &closure)) / (2.0 * h);
            let rel = (grads.z[i] - fd).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-4, "z[{i}]: an={} fd={fd}", grads.z[i]);
        }
        let stride = (net.params.len() / 9).max(1);
        for j in (0..net.params.len()).step_by(stride) {
            let mut up = net.clone();
            up.params[j] += h;
            let mut dn = net.clone();
            dn.params[j] -= h;
            let fd =
                (value(&spec, &ClosureFn::Net(up)) - value(&spec, &ClosureFn::Net(dn))) / (2.0 * h);
            let rel = (grads.alpha[j] - fd).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-4, "alpha[{j}]: an={} fd={fd}", grads.alpha[j]);
        }
    }

    #[test]
    fn boundary_node_gradient_is_zero() {
        let spec = DarcySpec::with_mesh([0.2, -0.1, 0.2], 9);
        let gt = ClosureFn::HalfSquare;
        let (u, _) = darcy_fixed_point(&spec, &gt).unwrap();
        let mesh = DarcyMesh::build(9).unwrap();
        let mut g_full = vec![0.0; mesh.n_nodes()];
        g_full[0] = 1.0; // corner boundary node
        g_full[3] = 1.0; // edge boundary node
        let grads = darcy_grad(&spec, &gt, &u, &g_full).unwrap();
        for v in grads.z {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn generic_residual_matches_assembly() {
        let mut rng = StreamRng::new(4);
        let mesh = DarcyMesh::build(9).unwrap();
        let z = [0.3, -0.2, 0.1];
        let gt = ClosureFn::HalfSquare;
        let u_full: Vec<f64> = (0..mesh.n_nodes())
            .map(|id| {
                if mesh.interior_of_node[id] == usize::MAX {
                    0.0
                } else {
                    rng.normal()
                }
            })
            .collect();
        let r_gen = weak_residual_generic::<f64>(&mesh, &z, &u_full, None, Some(&gt));
        let coeffs = element_coeffs(&mesh, &z, &u_full, &gt);
        let a = assemble_from_coeffs(&mesh, &coeffs.a);
        let u_int = restrict(&mesh, &u_full);
        let mut au = vec![0.0; u_int.len()];
        a.mul_vec(&u_int, &mut au);
        let b = mesh.load_vector();
        for i in 0..u_int.len() {
            assert!((r_gen[i] - (au[i] - b[i])).abs() < 1e-12);
        }
    }
}
