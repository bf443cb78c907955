//! Parametric surrogate forward models F^beta and their online training
//! losses: supervised (matched to solver references), physics residuals
//! (centered finite differences for the oscillator, the discrete weak form
//! for Darcy), and strong-form collocation with boundary/initial penalties.

pub mod losses;

use crate::error::{Error, Result};
use crate::forward::FamilyBase;
use crate::model::Forward;
use crate::nn::mlp::{self, Activation, MlpParams};
use crate::nn::spectral::SpectralOperatorParams;
use crate::rng::StreamRng;
use crate::solvers::observe::ObservationLayout;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateFamily {
    SpectralSupervised,
    SpectralPhysics,
    CollocationPhysics,
}

impl SurrogateFamily {
    pub fn is_spectral(&self) -> bool {
        !matches!(self, SurrogateFamily::CollocationPhysics)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum SurrogateNet {
    Spectral(SpectralOperatorParams),
    Mlp(MlpParams),
}

impl SurrogateNet {
    pub fn params(&self) -> &[f64] {
        match self {
            SurrogateNet::Spectral(op) => &op.params,
            SurrogateNet::Mlp(net) => &net.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        match self {
            SurrogateNet::Spectral(op) => &mut op.params,
            SurrogateNet::Mlp(net) => &mut net.params,
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().len()
    }
}

/// Architecture knobs; experiment configs override the desk defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SurrogateArch {
    pub width: usize,
    pub modes: Vec<usize>,
    pub n_layers: usize,
    /// collocation net: hidden layers x hidden width
    pub pinn_hidden_layers: usize,
    pub pinn_hidden_width: usize,
}

impl Default for SurrogateArch {
    fn default() -> Self {
        SurrogateArch {
            width: 16,
            modes: vec![12],
            n_layers: 3,
            pinn_hidden_layers: 4,
            pinn_hidden_width: 48,
        }
    }
}

/// A surrogate forward model for one experiment family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Surrogate {
    pub family: SurrogateFamily,
    pub net: SurrogateNet,
    /// per-theta-dim normalization: (theta - center) / scale
    pub theta_center: Vec<f64>,
    pub theta_scale: Vec<f64>,
}

/// Geometry of the experiment the surrogate predicts on.
pub struct GridInfo {
    /// grid extents of the spectral operator (1-D or 2-D)
    pub grid: Vec<usize>,
    /// physical coordinates per grid axis, normalized for net input
    pub coord_channels: Vec<Vec<f64>>,
    /// output channels of the spectral net
    pub out_channels: usize,
}

pub fn grid_info(base: &FamilyBase) -> GridInfo {
    match base {
        FamilyBase::MassDamper(s) => {
            let n = s.n_nodes();
            let t_norm: Vec<f64> = s
                .times()
                .iter()
                .map(|&t| 2.0 * t / s.t_end - 1.0)
                .collect();
            GridInfo {
                grid: vec![n],
                coord_channels: vec![t_norm],
                out_channels: 2, // displacement and velocity
            }
        }
        FamilyBase::Darcy(s) => {
            // power-of-two node subgrid [0, n-1) x [0, n-1); the omitted last
            // row/column is Dirichlet boundary (zero)
            let m = s.n_side - 1;
            let h = 1.0 / (s.n_side - 1) as f64;
            let mut xs = Vec::with_capacity(m * m);
            let mut ys = Vec::with_capacity(m * m);
            for i in 0..m {
                for j in 0..m {
                    xs.push(2.0 * (j as f64 * h) - 1.0);
                    ys.push(2.0 * (i as f64 * h) - 1.0);
                }
            }
            GridInfo {
                grid: vec![m, m],
                coord_channels: vec![ys, xs],
                out_channels: 1,
            }
        }
        FamilyBase::Burgers(s) => {
            // one spatial spectral axis; stored time frames as channels
            GridInfo {
                grid: vec![s.nx],
                coord_channels: vec![s.xs()],
                out_channels: s.n_frames(),
            }
        }
    }
}

impl Surrogate {
    pub fn init(
        family: SurrogateFamily,
        base: &FamilyBase,
        arch: &SurrogateArch,
        theta_center: Vec<f64>,
        theta_scale: Vec<f64>,
        rng: &mut StreamRng,
    ) -> Result<Surrogate> {
        let p = base.family().p_dims();
        debug_assert_eq!(theta_center.len(), p);
        let net = if family.is_spectral() {
            let gi = grid_info(base);
            let in_ch = p + gi.coord_channels.len();
            let mut modes = arch.modes.clone();
            modes.resize(gi.grid.len(), *arch.modes.last().unwrap());
            // clamp modes to fft/2 per axis
            for (m, &g) in modes.iter_mut().zip(&gi.grid) {
                let half = crate::fft::next_pow2(g) / 2;
                *m = (*m).min(half).max(1);
            }
            SurrogateNet::Spectral(SpectralOperatorParams::init(
                &gi.grid,
                &modes,
                arch.width,
                in_ch,
                gi.out_channels,
                arch.n_layers,
                Activation::SiLU,
                rng,
            )?)
        } else {
            let coords = match base.family() {
                crate::forward::ExperimentFamily::MassDamper => 1,
                crate::forward::ExperimentFamily::Darcy => 2,
                crate::forward::ExperimentFamily::Burgers => {
                    return Err(Error::Config(
                        "collocation surrogate not provided for the Burgers family".into(),
                    ))
                }
            };
            let mut widths = vec![p + coords];
            widths.extend(std::iter::repeat(arch.pinn_hidden_width).take(arch.pinn_hidden_layers));
            widths.push(1);
            SurrogateNet::Mlp(MlpParams::init(&widths, Activation::Tanh, rng))
        };
        Ok(Surrogate {
            family,
            net,
            theta_center,
            theta_scale,
        })
    }

    pub fn norm_theta(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(self.theta_center.iter().zip(&self.theta_scale))
            .map(|(&t, (&c, &s))| (t - c) / s)
            .collect()
    }

    /// Channel-major input features for the spectral net.
    pub fn spectral_features(&self, gi: &GridInfo, theta: &[f64]) -> Vec<f64> {
        let npts: usize = gi.grid.iter().product();
        let tn = self.norm_theta(theta);
        let mut input = Vec::with_capacity((tn.len() + gi.coord_channels.len()) * npts);
        for &v in &tn {
            input.extend(std::iter::repeat(v).take(npts));
        }
        for ch in &gi.coord_channels {
            input.extend_from_slice(ch);
        }
        input
    }

    /// Tangent of the features along one theta dimension.
    pub fn spectral_feature_tangent(&self, gi: &GridInfo, dim: usize) -> Vec<f64> {
        let npts: usize = gi.grid.iter().product();
        let n_ch = self.theta_center.len() + gi.coord_channels.len();
        let mut d = vec![0.0; n_ch * npts];
        let scale = 1.0 / self.theta_scale[dim];
        d[dim * npts..(dim + 1) * npts]
            .iter_mut()
            .for_each(|v| *v = scale);
        d
    }

    /// Full-field prediction, channel-major on the experiment's field layout.
    /// For the mass-damper family channel 0 is displacement, channel 1
    /// velocity; for Darcy the (n-1)^2 subgrid field; for Burgers one
    /// channel per stored frame.
    pub fn predict_channels(&self, base: &FamilyBase, theta: &[f64]) -> Vec<f64> {
        match &self.net {
            SurrogateNet::Spectral(op) => {
                let gi = grid_info(base);
                op.forward(&self.spectral_features(&gi, theta))
            }
            SurrogateNet::Mlp(net) => self.collocation_field(base, theta, net),
        }
    }

    fn collocation_field(&self, base: &FamilyBase, theta: &[f64], net: &MlpParams) -> Vec<f64> {
        let tn = self.norm_theta(theta);
        match base {
            FamilyBase::MassDamper(s) => {
                let times = s.times();
                let mut xs = Vec::with_capacity(times.len() * net.d_in());
                for &t in &times {
                    xs.extend_from_slice(&tn);
                    xs.push(2.0 * t / s.t_end - 1.0);
                }
                let cache = mlp::forward_cached(&net.widths, net.activation, &net.params, &xs);
                cache.acts.last().unwrap().clone()
            }
            FamilyBase::Darcy(s) => {
                let n = s.n_side;
                let h = 1.0 / (n - 1) as f64;
                let mut xs = Vec::with_capacity(n * n * net.d_in());
                for i in 0..n {
                    for j in 0..n {
                        xs.extend_from_slice(&tn);
                        xs.push(2.0 * (j as f64 * h) - 1.0);
                        xs.push(2.0 * (i as f64 * h) - 1.0);
                    }
                }
                let cache = mlp::forward_cached(&net.widths, net.activation, &net.params, &xs);
                cache.acts.last().unwrap().clone()
            }
            FamilyBase::Burgers(_) => unreachable!("no collocation surrogate for Burgers"),
        }
    }

    /// Field in the solver's own layout (what observations index into).
    pub fn predict_field(&self, base: &FamilyBase, theta: &[f64]) -> Vec<f64> {
        let ch = self.predict_channels(base, theta);
        match base {
            FamilyBase::MassDamper(s) => match &self.net {
                SurrogateNet::Spectral(_) => ch[..s.n_nodes()].to_vec(), // displacement channel
                SurrogateNet::Mlp(_) => ch,
            },
            FamilyBase::Darcy(s) => match &self.net {
                SurrogateNet::Spectral(_) => subgrid_to_full(s.n_side, &ch),
                SurrogateNet::Mlp(_) => ch,
            },
            FamilyBase::Burgers(_) => ch,
        }
    }
}

/// Expand the (n-1)^2 spectral subgrid into the full n^2 nodal field with a
/// zero final row and column.
pub fn subgrid_to_full(n_side: usize, sub: &[f64]) -> Vec<f64> {
    let m = n_side - 1;
    debug_assert_eq!(sub.len(), m * m);
    let mut full = vec![0.0; n_side * n_side];
    for i in 0..m {
        for j in 0..m {
            full[i * n_side + j] = sub[i * m + j];
        }
    }
    full
}

/// Restrict a full nodal field to the spectral subgrid.
pub fn full_to_subgrid(n_side: usize, full: &[f64]) -> Vec<f64> {
    let m = n_side - 1;
    let mut sub = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            sub[i * m + j] = full[i * n_side + j];
        }
    }
    sub
}

/// Scatter field-layout upstream weights into spectral output channels.
fn field_upstream_to_channels(
    base: &FamilyBase,
    out_channels: usize,
    npts: usize,
    field_upstream: &[f64],
) -> Vec<f64> {
    match base {
        FamilyBase::MassDamper(_) => {
            // weights act on the displacement channel only
            let mut up = vec![0.0; out_channels * npts];
            up[..npts].copy_from_slice(field_upstream);
            up
        }
        FamilyBase::Darcy(s) => full_to_subgrid(s.n_side, field_upstream),
        FamilyBase::Burgers(_) => field_upstream.to_vec(), // frames == channels x nx
    }
}

/// Sampler-facing adapter: surrogate predictions at the observation indices
/// with theta gradients and surrogate-parameter (beta) gradients.
pub struct SurrogateForward<'a> {
    pub surrogate: &'a Surrogate,
    pub base: &'a FamilyBase,
    pub layouts: &'a [ObservationLayout],
}

impl<'a> SurrogateForward<'a> {
    fn field_len(&self) -> usize {
        match self.base {
            FamilyBase::MassDamper(s) => s.n_nodes(),
            FamilyBase::Darcy(s) => s.n_side * s.n_side,
            FamilyBase::Burgers(s) => s.n_frames() * s.nx,
        }
    }

    /// Batched collocation-net evaluation at the observation points only.
    fn pinn_obs_inputs(&self, k: usize, theta: &[f64]) -> (Vec<f64>, usize) {
        let tn = self.surrogate.norm_theta(theta);
        let layout = &self.layouts[k];
        match self.base {
            FamilyBase::MassDamper(s) => {
                let times = s.times();
                let d_in = tn.len() + 1;
                let mut xs = Vec::with_capacity(layout.len() * d_in);
                for &ix in &layout.indices {
                    xs.extend_from_slice(&tn);
                    xs.push(2.0 * times[ix] / s.t_end - 1.0);
                }
                (xs, d_in)
            }
            FamilyBase::Darcy(s) => {
                let n = s.n_side;
                let h = 1.0 / (n - 1) as f64;
                let d_in = tn.len() + 2;
                let mut xs = Vec::with_capacity(layout.len() * d_in);
                for &ix in &layout.indices {
                    let (i, j) = (ix / n, ix % n);
                    xs.extend_from_slice(&tn);
                    xs.push(2.0 * (j as f64 * h) - 1.0);
                    xs.push(2.0 * (i as f64 * h) - 1.0);
                }
                (xs, d_in)
            }
            FamilyBase::Burgers(_) => unreachable!(),
        }
    }
}

impl<'a> Forward for SurrogateForward<'a> {
    fn p_dims(&self) -> usize {
        self.base.family().p_dims()
    }

    fn n_obs(&self, k: usize) -> usize {
        self.layouts[k].len()
    }

    fn predict(&self, k: usize, theta: &[f64]) -> Result<Vec<f64>> {
        match &self.surrogate.net {
            SurrogateNet::Mlp(net) => {
                let (xs, _) = self.pinn_obs_inputs(k, theta);
                let cache = mlp::forward_cached(&net.widths, net.activation, &net.params, &xs);
                Ok(cache.acts.last().unwrap().clone())
            }
            SurrogateNet::Spectral(_) => {
                let field = self.surrogate.predict_field(self.base, theta);
                self.layouts[k].restrict(&field)
            }
        }
    }

    fn predict_with_jac(&self, k: usize, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.p_dims();
        match &self.surrogate.net {
            SurrogateNet::Mlp(net) => {
                use crate::nn::real::Dual;
                let (xs, d_in) = self.pinn_obs_inputs(k, theta);
                let n_pts = xs.len() / d_in;
                let lifted: Vec<Dual<f64>> = net.lift();
                let mut pred = vec![0.0; n_pts];
                let mut jac = vec![0.0; n_pts * p];
                for j in 0..p {
                    let scale = 1.0 / self.surrogate.theta_scale[j];
                    for i in 0..n_pts {
                        let mut xin: Vec<Dual<f64>> = xs[i * d_in..(i + 1) * d_in]
                            .iter()
                            .map(|&v| Dual::constant(v))
                            .collect();
                        xin[j].d = scale;
                        let y = mlp::forward(&net.widths, net.activation, &lifted, &xin);
                        pred[i] = y[0].v;
                        jac[i * p + j] = y[0].d;
                    }
                }
                Ok((pred, jac))
            }
            SurrogateNet::Spectral(op) => {
                let gi = grid_info(self.base);
                let input = self.surrogate.spectral_features(&gi, theta);
                let layout = &self.layouts[k];
                let mut pred = Vec::new();
                let mut jac = vec![0.0; layout.len() * p];
                for j in 0..p {
                    let dinput = self.surrogate.spectral_feature_tangent(&gi, j);
                    let (out, dout) = op.jvp(&input, Some(&dinput), None);
                    let field = match self.base {
                        FamilyBase::MassDamper(s) => out[..s.n_nodes()].to_vec(),
                        FamilyBase::Darcy(s) => subgrid_to_full(s.n_side, &out),
                        FamilyBase::Burgers(_) => out,
                    };
                    let dfield = match self.base {
                        FamilyBase::MassDamper(s) => dout[..s.n_nodes()].to_vec(),
                        FamilyBase::Darcy(s) => subgrid_to_full(s.n_side, &dout),
                        FamilyBase::Burgers(_) => dout,
                    };
                    if j == 0 {
                        pred = layout.restrict(&field)?;
                    }
                    let dpred = layout.restrict(&dfield)?;
                    for (i, d) in dpred.iter().enumerate() {
                        jac[i * p + j] = *d;
                    }
                }
                Ok((pred, jac))
            }
        }
    }

    fn n_beta(&self) -> usize {
        self.surrogate.net.n_params()
    }

    fn beta_grad(
        &self,
        k: usize,
        theta: &[f64],
        weights: &[f64],
        accum: &mut [f64],
    ) -> Result<()> {
        match &self.surrogate.net {
            SurrogateNet::Mlp(net) => {
                let (xs, _) = self.pinn_obs_inputs(k, theta);
                let cache = mlp::forward_cached(&net.widths, net.activation, &net.params, &xs);
                let grads = mlp::backprop(&net.widths, net.activation, &net.params, &cache, weights);
                for (a, g) in accum.iter_mut().zip(&grads.params) {
                    *a += g;
                }
            }
            SurrogateNet::Spectral(op) => {
                let gi = grid_info(self.base);
                let input = self.surrogate.spectral_features(&gi, theta);
                let (_, cache) = op.forward_cached(&input);
                let field_up = self.layouts[k].scatter(weights, self.field_len());
                let npts: usize = gi.grid.iter().product();
                let up = field_upstream_to_channels(self.base, gi.out_channels, npts, &field_up);
                let grads = op.vjp(&cache, &up);
                for (a, g) in accum.iter_mut().zip(&grads.params) {
                    *a += g;
                }
            }
        }
        Ok(())
    }
}
