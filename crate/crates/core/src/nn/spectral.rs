//! Spectral operator network: pointwise lift, L layers of truncated-mode
//! spectral convolution plus pointwise linear skip, activation, projection.
//!
//! Works on 1-D or 2-D grids. Each axis is zero-padded to a power of two for
//! the radix-2 FFT; retained-mode weights are complex and Hermitian symmetry
//! is enforced so real fields map to real fields. All three derivative passes
//! are hand-rolled: `vjp` (reverse, for parameter and input gradients) and
//! `jvp` (forward, for directional derivatives in parameters or inputs).

use super::mlp::Activation;
use crate::error::{Error, Result};
use crate::fft::{next_pow2, FftPlan};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

/// Retained frequency cell (one per complex weight matrix).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cell {
    freq: [usize; 2], // (a, b); 1-D uses b only, a = 0
    self_mirror: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpectralOperatorParams {
    pub grid: Vec<usize>,
    pub modes: Vec<usize>,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub n_layers: usize,
    pub activation: Activation,
    pub params: Vec<f64>,
}

fn enumerate_cells(fft: &[usize], modes: &[usize]) -> Vec<Cell> {
    match fft.len() {
        1 => {
            let m = modes[0];
            (0..m)
                .map(|k| Cell {
                    freq: [0, k],
                    self_mirror: k == 0,
                })
                .collect()
        }
        2 => {
            let (n0, m0, m1) = (fft[0], modes[0], modes[1]);
            let mut cells = Vec::new();
            // b = 0 line: canonical a in [0, m0)
            for a in 0..m0 {
                cells.push(Cell {
                    freq: [a, 0],
                    self_mirror: a == 0,
                });
            }
            // b in [1, m1): both frequency corners on axis 0
            for b in 1..m1 {
                for a in (0..m0).chain(n0 - m0 + 1..n0) {
                    cells.push(Cell {
                        freq: [a, b],
                        self_mirror: false,
                    });
                }
            }
            cells
        }
        d => panic!("spectral operator supports 1-D/2-D grids, got {d} axes"),
    }
}

impl SpectralOperatorParams {
    pub fn fft_sizes(&self) -> Vec<usize> {
        self.grid.iter().map(|&g| next_pow2(g)).collect()
    }

    fn cells(&self) -> Vec<Cell> {
        enumerate_cells(&self.fft_sizes(), &self.modes)
    }

    pub fn n_cells(&self) -> usize {
        self.cells().len()
    }

    pub fn n_points(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn param_count(
        grid: &[usize],
        modes: &[usize],
        width: usize,
        in_ch: usize,
        out_ch: usize,
        n_layers: usize,
    ) -> usize {
        let fft: Vec<usize> = grid.iter().map(|&g| next_pow2(g)).collect();
        let cells = enumerate_cells(&fft, modes).len();
        let lift = width * in_ch + width;
        let per_layer = cells * width * width * 2 + width * width + width;
        let proj = out_ch * width + out_ch;
        lift + n_layers * per_layer + proj
    }

    pub fn init(
        grid: &[usize],
        modes: &[usize],
        width: usize,
        in_channels: usize,
        out_channels: usize,
        n_layers: usize,
        activation: Activation,
        rng: &mut StreamRng,
    ) -> Result<SpectralOperatorParams> {
        let fft: Vec<usize> = grid.iter().map(|&g| next_pow2(g)).collect();
        for (i, (&m, &n)) in modes.iter().zip(&fft).enumerate() {
            if m == 0 || m > n / 2 {
                return Err(Error::Dimension(format!(
                    "modes[{i}]={m} must be in [1, {}] for fft size {n}",
                    n / 2
                )));
            }
        }
        if grid.len() != modes.len() || grid.is_empty() || grid.len() > 2 {
            return Err(Error::Dimension(format!(
                "grid {grid:?} / modes {modes:?} must both be 1-D or 2-D"
            )));
        }
        let n = Self::param_count(grid, modes, width, in_channels, out_channels, n_layers);
        let mut params = vec![0.0; n];
        let mut op = SpectralOperatorParams {
            grid: grid.to_vec(),
            modes: modes.to_vec(),
            width,
            in_channels,
            out_channels,
            n_layers,
            activation,
            params,
        };
        // lift / proj / pointwise: glorot uniform, zero bias.
        // spectral: uniform complex with 1/width scale.
        let lay = op.layout();
        params = std::mem::take(&mut op.params);
        let glorot = |rng: &mut StreamRng, dst: &mut [f64], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in dst.iter_mut() {
                *v = rng.uniform_in(-bound, bound);
            }
        };
        glorot(
            rng,
            &mut params[lay.lift_w..lay.lift_w + width * in_channels],
            in_channels,
            width,
        );
        let s = 1.0 / width as f64;
        for l in 0..n_layers {
            let sw = lay.spec_w(l);
            for v in &mut params[sw..sw + lay.cells * width * width * 2] {
                *v = rng.uniform_in(-s, s);
            }
            let pw = lay.point_w(l);
            glorot(rng, &mut params[pw..pw + width * width], width, width);
        }
        glorot(
            rng,
            &mut params[lay.proj_w..lay.proj_w + out_channels * width],
            width,
            out_channels,
        );
        op.params = params;
        Ok(op)
    }

    fn layout(&self) -> Layout {
        let w = self.width;
        let cells = self.n_cells();
        let lift_w = 0;
        let lift_b = lift_w + w * self.in_channels;
        let layers_start = lift_b + w;
        let per_layer = cells * w * w * 2 + w * w + w;
        let proj_w = layers_start + self.n_layers * per_layer;
        let proj_b = proj_w + self.out_channels * w;
        Layout {
            cells,
            width: w,
            lift_w,
            lift_b,
            layers_start,
            per_layer,
            proj_w,
            proj_b,
        }
    }

    pub fn check(&self, in_points: usize) -> Result<()> {
        let lay = self.layout();
        if self.params.len() != lay.proj_b + self.out_channels {
            return Err(Error::Dimension(format!(
                "spectral params {} vs layout {}",
                self.params.len(),
                lay.proj_b + self.out_channels
            )));
        }
        if in_points != self.n_points() {
            return Err(Error::Dimension(format!(
                "input has {in_points} grid points, operator built for {}",
                self.n_points()
            )));
        }
        Ok(())
    }
}

struct Layout {
    cells: usize,
    width: usize,
    lift_w: usize,
    lift_b: usize,
    layers_start: usize,
    per_layer: usize,
    proj_w: usize,
    proj_b: usize,
}

impl Layout {
    fn spec_w(&self, layer: usize) -> usize {
        self.layers_start + layer * self.per_layer
    }
    fn point_w(&self, layer: usize) -> usize {
        self.spec_w(layer) + self.cells * self.width * self.width * 2
    }
    fn point_b(&self, layer: usize) -> usize {
        self.point_w(layer) + self.width * self.width
    }
}

/// Intermediates for the reverse pass.
pub struct SpectralCache {
    input: Vec<f64>,
    /// Per layer: channel activations entering the layer (width x npts).
    layer_in: Vec<Vec<f64>>,
    /// Per layer: retained-cell input spectra (cells x width x 2).
    vhat: Vec<Vec<f64>>,
    /// Per layer: pre-activation (width x npts).
    pre: Vec<Vec<f64>>,
    /// Final hidden activations (width x npts).
    last: Vec<f64>,
}

pub struct SpectralGrads {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Padded FFT helpers over the (possibly rectangular) grid.
struct GridFft {
    grid: [usize; 2],
    fft: [usize; 2],
    plan0: Option<FftPlan>,
    plan1: FftPlan,
}

impl GridFft {
    fn new(grid: &[usize]) -> GridFft {
        match grid.len() {
            1 => GridFft {
                grid: [1, grid[0]],
                fft: [1, next_pow2(grid[0])],
                plan0: None,
                plan1: FftPlan::new(next_pow2(grid[0])),
            },
            2 => GridFft {
                grid: [grid[0], grid[1]],
                fft: [next_pow2(grid[0]), next_pow2(grid[1])],
                plan0: Some(FftPlan::new(next_pow2(grid[0]))),
                plan1: FftPlan::new(next_pow2(grid[1])),
            },
            _ => unreachable!(),
        }
    }

    fn padded_len(&self) -> usize {
        self.fft[0] * self.fft[1]
    }

    /// Zero-pad a real grid field into the complex buffers and transform.
    fn forward_real(&self, field: &[f64], re: &mut [f64], im: &mut [f64]) {
        re.iter_mut().for_each(|v| *v = 0.0);
        im.iter_mut().for_each(|v| *v = 0.0);
        let (g0, g1, n1) = (self.grid[0], self.grid[1], self.fft[1]);
        for r in 0..g0 {
            re[r * n1..r * n1 + g1].copy_from_slice(&field[r * g1..(r + 1) * g1]);
        }
        self.fft2(re, im, false);
    }

    /// Inverse-transform and return the real part truncated to the grid.
    fn inverse_to_grid(&self, re: &mut [f64], im: &mut [f64], out: &mut [f64]) {
        self.fft2(re, im, true);
        let scale = 1.0 / self.padded_len() as f64;
        let (g0, g1, n1) = (self.grid[0], self.grid[1], self.fft[1]);
        for r in 0..g0 {
            for c in 0..g1 {
                out[r * g1 + c] = re[r * n1 + c] * scale;
            }
        }
    }

    fn fft2(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let (n0, n1) = (self.fft[0], self.fft[1]);
        // rows
        for r in 0..n0 {
            let (rr, ri) = (&mut re[r * n1..(r + 1) * n1], &mut im[r * n1..(r + 1) * n1]);
            if inverse {
                self.plan1.inverse_unnormalized(rr, ri);
            } else {
                self.plan1.forward(rr, ri);
            }
        }
        // columns
        if let Some(plan0) = &self.plan0 {
            let mut cr = vec![0.0; n0];
            let mut ci = vec![0.0; n0];
            for c in 0..n1 {
                for r in 0..n0 {
                    cr[r] = re[r * n1 + c];
                    ci[r] = im[r * n1 + c];
                }
                if inverse {
                    plan0.inverse_unnormalized(&mut cr, &mut ci);
                } else {
                    plan0.forward(&mut cr, &mut ci);
                }
                for r in 0..n0 {
                    re[r * n1 + c] = cr[r];
                    im[r * n1 + c] = ci[r];
                }
            }
        }
    }

    fn mirror(&self, f: [usize; 2]) -> [usize; 2] {
        [
            if f[0] == 0 { 0 } else { self.fft[0] - f[0] },
            if f[1] == 0 { 0 } else { self.fft[1] - f[1] },
        ]
    }

    fn index(&self, f: [usize; 2]) -> usize {
        f[0] * self.fft[1] + f[1]
    }
}

impl SpectralOperatorParams {
    /// Forward pass; input and output are channel-major (ch x npts).
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).0
    }

    pub fn forward_cached(&self, input: &[f64]) -> (Vec<f64>, SpectralCache) {
        let npts = self.n_points();
        debug_assert_eq!(input.len(), self.in_channels * npts);
        let lay = self.layout();
        let gfft = GridFft::new(&self.grid);
        let w = self.width;
        let p = &self.params;

        // lift
        let mut h = vec![0.0; w * npts];
        for o in 0..w {
            let row = &p[lay.lift_w + o * self.in_channels..lay.lift_w + (o + 1) * self.in_channels];
            let b = p[lay.lift_b + o];
            let dst = &mut h[o * npts..(o + 1) * npts];
            dst.iter_mut().for_each(|v| *v = b);
            for (c, &wc) in row.iter().enumerate() {
                let src = &input[c * npts..(c + 1) * npts];
                for i in 0..npts {
                    dst[i] += wc * src[i];
                }
            }
        }

        let cells = self.cells();
        let n_cells = cells.len();
        let padded = gfft.padded_len();
        let mut layer_in = Vec::with_capacity(self.n_layers);
        let mut vhat_all = Vec::with_capacity(self.n_layers);
        let mut pre_all = Vec::with_capacity(self.n_layers);

        let mut re = vec![0.0; padded];
        let mut im = vec![0.0; padded];

        for l in 0..self.n_layers {
            layer_in.push(h.clone());
            // spectra of all input channels at retained cells
            let mut vhat = vec![0.0; n_cells * w * 2];
            for ch in 0..w {
                gfft.forward_real(&h[ch * npts..(ch + 1) * npts], &mut re, &mut im);
                for (ci, cell) in cells.iter().enumerate() {
                    let ix = gfft.index(cell.freq);
                    vhat[(ci * w + ch) * 2] = re[ix];
                    vhat[(ci * w + ch) * 2 + 1] = im[ix];
                }
            }
            vhat_all.push(vhat);
            let vhat = vhat_all.last().unwrap();

            // z = spectral conv + pointwise skip
            let mut z = vec![0.0; w * npts];
            // spectral part, channel by channel on the output side
            let sw = lay.spec_w(l);
            let mut spec_re = vec![0.0; padded];
            let mut spec_im = vec![0.0; padded];
            let mut grid_buf = vec![0.0; npts];
            for out in 0..w {
                spec_re.iter_mut().for_each(|v| *v = 0.0);
                spec_im.iter_mut().for_each(|v| *v = 0.0);
                for (ci, cell) in cells.iter().enumerate() {
                    let base = sw + (ci * w * w + out * w) * 2;
                    let mut zr = 0.0;
                    let mut zi = 0.0;
                    if cell.self_mirror {
                        for inp in 0..w {
                            let wr = p[base + inp * 2];
                            let vr = vhat[(ci * w + inp) * 2];
                            zr += wr * vr;
                        }
                    } else {
                        for inp in 0..w {
                            let wr = p[base + inp * 2];
                            let wi = p[base + inp * 2 + 1];
                            let vr = vhat[(ci * w + inp) * 2];
                            let vi = vhat[(ci * w + inp) * 2 + 1];
                            zr += wr * vr - wi * vi;
                            zi += wr * vi + wi * vr;
                        }
                    }
                    let ix = gfft.index(cell.freq);
                    spec_re[ix] = zr;
                    spec_im[ix] = zi;
                    if !cell.self_mirror {
                        let mx = gfft.index(gfft.mirror(cell.freq));
                        spec_re[mx] = zr;
                        spec_im[mx] = -zi;
                    }
                }
                gfft.inverse_to_grid(&mut spec_re, &mut spec_im, &mut grid_buf);
                z[out * npts..(out + 1) * npts].copy_from_slice(&grid_buf);
            }
            // pointwise skip
            let pw = lay.point_w(l);
            let pb = lay.point_b(l);
            for out in 0..w {
                let row = &p[pw + out * w..pw + (out + 1) * w];
                let b = p[pb + out];
                let dst = &mut z[out * npts..(out + 1) * npts];
                for v in dst.iter_mut() {
                    *v += b;
                }
                for (inp, &wc) in row.iter().enumerate() {
                    let src = &h[inp * npts..(inp + 1) * npts];
                    let dst = &mut z[out * npts..(out + 1) * npts];
                    for i in 0..npts {
                        dst[i] += wc * src[i];
                    }
                }
            }
            pre_all.push(z.clone());
            for v in z.iter_mut() {
                *v = self.activation.apply(*v);
            }
            h = z;
        }

        // projection
        let mut out = vec![0.0; self.out_channels * npts];
        for o in 0..self.out_channels {
            let row = &p[lay.proj_w + o * w..lay.proj_w + (o + 1) * w];
            let b = p[lay.proj_b + o];
            let dst = &mut out[o * npts..(o + 1) * npts];
            dst.iter_mut().for_each(|v| *v = b);
            for (c, &wc) in row.iter().enumerate() {
                let src = &h[c * npts..(c + 1) * npts];
                for i in 0..npts {
                    dst[i] += wc * src[i];
                }
            }
        }

        (
            out,
            SpectralCache {
                input: input.to_vec(),
                layer_in,
                vhat: vhat_all,
                pre: pre_all,
                last: h,
            },
        )
    }

    /// Reverse pass: gradients of <upstream, output> w.r.t. params and input.
    pub fn vjp(&self, cache: &SpectralCache, upstream: &[f64]) -> SpectralGrads {
        let npts = self.n_points();
        debug_assert_eq!(upstream.len(), self.out_channels * npts);
        let lay = self.layout();
        let gfft = GridFft::new(&self.grid);
        let w = self.width;
        let p = &self.params;
        let cells = self.cells();
        let padded = gfft.padded_len();
        let inv_n = 1.0 / padded as f64;

        let mut pg = vec![0.0; p.len()];

        // projection
        let mut gh = vec![0.0; w * npts];
        for o in 0..self.out_channels {
            let up = &upstream[o * npts..(o + 1) * npts];
            pg[lay.proj_b + o] += up.iter().sum::<f64>();
            for c in 0..w {
                let hl = &cache.last[c * npts..(c + 1) * npts];
                let mut s = 0.0;
                for i in 0..npts {
                    s += up[i] * hl[i];
                }
                pg[lay.proj_w + o * w + c] += s;
                let wc = p[lay.proj_w + o * w + c];
                let dst = &mut gh[c * npts..(c + 1) * npts];
                for i in 0..npts {
                    dst[i] += wc * up[i];
                }
            }
        }

        let mut re = vec![0.0; padded];
        let mut im = vec![0.0; padded];
        let mut sre = vec![0.0; padded];
        let mut sim = vec![0.0; padded];
        let mut grid_buf = vec![0.0; npts];

        for l in (0..self.n_layers).rev() {
            let pre = &cache.pre[l];
            let h_in = &cache.layer_in[l];
            let vhat = &cache.vhat[l];
            // activation
            let mut gz = gh;
            for (g, &z) in gz.iter_mut().zip(pre.iter()) {
                *g *= self.activation.grad(z);
            }
            // pointwise skip
            let pw = lay.point_w(l);
            let pb = lay.point_b(l);
            let mut gh_prev = vec![0.0; w * npts];
            for out in 0..w {
                let g = &gz[out * npts..(out + 1) * npts];
                pg[pb + out] += g.iter().sum::<f64>();
                for inp in 0..w {
                    let src = &h_in[inp * npts..(inp + 1) * npts];
                    let mut s = 0.0;
                    for i in 0..npts {
                        s += g[i] * src[i];
                    }
                    pg[pw + out * w + inp] += s;
                    let wc = p[pw + out * w + inp];
                    let dst = &mut gh_prev[inp * npts..(inp + 1) * npts];
                    for i in 0..npts {
                        dst[i] += wc * g[i];
                    }
                }
            }
            // spectral adjoint
            let sw = lay.spec_w(l);
            // gradient w.r.t. input spectra at cells, (cells x width x 2)
            let mut gvhat = vec![0.0; cells.len() * w * 2];
            for out in 0..w {
                gfft.forward_real(&gz[out * npts..(out + 1) * npts], &mut re, &mut im);
                for (ci, cell) in cells.iter().enumerate() {
                    let ix = gfft.index(cell.freq);
                    // dL/d Yhat(cell) plus the mirror contribution
                    let (gr, gi);
                    if cell.self_mirror {
                        gr = re[ix] * inv_n;
                        gi = 0.0;
                    } else {
                        let mx = gfft.index(gfft.mirror(cell.freq));
                        gr = (re[ix] + re[mx]) * inv_n;
                        gi = (im[ix] - im[mx]) * inv_n;
                    }
                    let base = sw + (ci * w * w + out * w) * 2;
                    if cell.self_mirror {
                        for inp in 0..w {
                            let vr = vhat[(ci * w + inp) * 2];
                            pg[base + inp * 2] += gr * vr;
                            let wr = p[base + inp * 2];
                            gvhat[(ci * w + inp) * 2] += wr * gr;
                        }
                    } else {
                        for inp in 0..w {
                            let vr = vhat[(ci * w + inp) * 2];
                            let vi = vhat[(ci * w + inp) * 2 + 1];
                            // dW = G conj(v)
                            pg[base + inp * 2] += gr * vr + gi * vi;
                            pg[base + inp * 2 + 1] += gi * vr - gr * vi;
                            // dv = conj(W) G
                            let wr = p[base + inp * 2];
                            let wi = p[base + inp * 2 + 1];
                            gvhat[(ci * w + inp) * 2] += wr * gr + wi * gi;
                            gvhat[(ci * w + inp) * 2 + 1] += wr * gi - wi * gr;
                        }
                    }
                }
            }
            // back through the channel FFTs: g_x = Re(unnormalized inverse of gvhat)
            for inp in 0..w {
                sre.iter_mut().for_each(|v| *v = 0.0);
                sim.iter_mut().for_each(|v| *v = 0.0);
                for (ci, cell) in cells.iter().enumerate() {
                    let ix = gfft.index(cell.freq);
                    sre[ix] = gvhat[(ci * w + inp) * 2];
                    sim[ix] = gvhat[(ci * w + inp) * 2 + 1];
                }
                gfft.fft2(&mut sre, &mut sim, true);
                let (g0, g1, n1) = (gfft.grid[0], gfft.grid[1], gfft.fft[1]);
                for r in 0..g0 {
                    for c in 0..g1 {
                        grid_buf[r * g1 + c] = sre[r * n1 + c];
                    }
                }
                let dst = &mut gh_prev[inp * npts..(inp + 1) * npts];
                for i in 0..npts {
                    dst[i] += grid_buf[i];
                }
            }
            gh = gh_prev;
        }

        // lift
        let mut ginput = vec![0.0; self.in_channels * npts];
        for o in 0..w {
            let g = &gh[o * npts..(o + 1) * npts];
            pg[lay.lift_b + o] += g.iter().sum::<f64>();
            for c in 0..self.in_channels {
                let src = &cache.input[c * npts..(c + 1) * npts];
                let mut s = 0.0;
                for i in 0..npts {
                    s += g[i] * src[i];
                }
                pg[lay.lift_w + o * self.in_channels + c] += s;
                let wc = p[lay.lift_w + o * self.in_channels + c];
                let dst = &mut ginput[c * npts..(c + 1) * npts];
                for i in 0..npts {
                    dst[i] += wc * g[i];
                }
            }
        }

        SpectralGrads {
            params: pg,
            input: ginput,
        }
    }

    /// Forward directional derivative. `dinput` and `dparams` may each be
    /// None (treated as zero). Returns (output, doutput).
    pub fn jvp(&self, input: &[f64], dinput: Option<&[f64]>, dparams: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let npts = self.n_points();
        let lay = self.layout();
        let gfft = GridFft::new(&self.grid);
        let w = self.width;
        let p = &self.params;
        let zeros;
        let dp: &[f64] = match dparams {
            Some(d) => d,
            None => {
                zeros = vec![0.0; p.len()];
                &zeros
            }
        };
        let dzeros;
        let din: &[f64] = match dinput {
            Some(d) => d,
            None => {
                dzeros = vec![0.0; input.len()];
                &dzeros
            }
        };

        // lift with product rule
        let mut h = vec![0.0; w * npts];
        let mut dh = vec![0.0; w * npts];
        for o in 0..w {
            let hv = &mut h[o * npts..(o + 1) * npts];
            hv.iter_mut().for_each(|v| *v = p[lay.lift_b + o]);
            for c in 0..self.in_channels {
                let wc = p[lay.lift_w + o * self.in_channels + c];
                let src = &input[c * npts..(c + 1) * npts];
                for i in 0..npts {
                    hv[i] += wc * src[i];
                }
            }
        }
        for o in 0..w {
            let dv = &mut dh[o * npts..(o + 1) * npts];
            dv.iter_mut().for_each(|v| *v = dp[lay.lift_b + o]);
            for c in 0..self.in_channels {
                let wc = p[lay.lift_w + o * self.in_channels + c];
                let dwc = dp[lay.lift_w + o * self.in_channels + c];
                let src = &input[c * npts..(c + 1) * npts];
                let dsrc = &din[c * npts..(c + 1) * npts];
                for i in 0..npts {
                    dv[i] += wc * dsrc[i] + dwc * src[i];
                }
            }
        }

        let cells = self.cells();
        let padded = gfft.padded_len();
        let mut re = vec![0.0; padded];
        let mut im = vec![0.0; padded];
        let mut sre = vec![0.0; padded];
        let mut sim = vec![0.0; padded];
        let mut grid_buf = vec![0.0; npts];

        for l in 0..self.n_layers {
            // spectra of h and dh
            let mut vhat = vec![0.0; cells.len() * w * 2];
            let mut dvhat = vec![0.0; cells.len() * w * 2];
            for (buf, field) in [(&mut vhat, &h), (&mut dvhat, &dh)] {
                for ch in 0..w {
                    gfft.forward_real(&field[ch * npts..(ch + 1) * npts], &mut re, &mut im);
                    for (ci, cell) in cells.iter().enumerate() {
                        let ix = gfft.index(cell.freq);
                        buf[(ci * w + ch) * 2] = re[ix];
                        buf[(ci * w + ch) * 2 + 1] = im[ix];
                    }
                }
            }
            let sw = lay.spec_w(l);
            let mut z = vec![0.0; w * npts];
            let mut dz = vec![0.0; w * npts];
            for out in 0..w {
                // value spectrum and tangent spectrum
                for (dst_re, dst_im, use_tangent) in
                    [(&mut re, &mut im, false), (&mut sre, &mut sim, true)]
                {
                    dst_re.iter_mut().for_each(|v| *v = 0.0);
                    dst_im.iter_mut().for_each(|v| *v = 0.0);
                    for (ci, cell) in cells.iter().enumerate() {
                        let base = sw + (ci * w * w + out * w) * 2;
                        let mut zr = 0.0;
                        let mut zi = 0.0;
                        for inp in 0..w {
                            let wr = p[base + inp * 2];
                            let wi = if cell.self_mirror {
                                0.0
                            } else {
                                p[base + inp * 2 + 1]
                            };
                            let vr = vhat[(ci * w + inp) * 2];
                            let vi = if cell.self_mirror {
                                0.0
                            } else {
                                vhat[(ci * w + inp) * 2 + 1]
                            };
                            if use_tangent {
                                let dwr = dp[base + inp * 2];
                                let dwi = if cell.self_mirror {
                                    0.0
                                } else {
                                    dp[base + inp * 2 + 1]
                                };
                                let dvr = dvhat[(ci * w + inp) * 2];
                                let dvi = if cell.self_mirror {
                                    0.0
                                } else {
                                    dvhat[(ci * w + inp) * 2 + 1]
                                };
                                zr += dwr * vr - dwi * vi + wr * dvr - wi * dvi;
                                zi += dwr * vi + dwi * vr + wr * dvi + wi * dvr;
                            } else {
                                zr += wr * vr - wi * vi;
                                zi += wr * vi + wi * vr;
                            }
                        }
                        let ix = gfft.index(cell.freq);
                        dst_re[ix] = zr;
                        dst_im[ix] = zi;
                        if !cell.self_mirror {
                            let mx = gfft.index(gfft.mirror(cell.freq));
                            dst_re[mx] = zr;
                            dst_im[mx] = -zi;
                        }
                    }
                }
                gfft.inverse_to_grid(&mut re, &mut im, &mut grid_buf);
                z[out * npts..(out + 1) * npts].copy_from_slice(&grid_buf);
                gfft.inverse_to_grid(&mut sre, &mut sim, &mut grid_buf);
                dz[out * npts..(out + 1) * npts].copy_from_slice(&grid_buf);
            }
            // pointwise skip with product rule
            let pw = lay.point_w(l);
            let pb = lay.point_b(l);
            for out in 0..w {
                let zch = &mut z[out * npts..(out + 1) * npts];
                for v in zch.iter_mut() {
                    *v += p[pb + out];
                }
            }
            for out in 0..w {
                let dch = &mut dz[out * npts..(out + 1) * npts];
                for v in dch.iter_mut() {
                    *v += dp[pb + out];
                }
            }
            for out in 0..w {
                for inp in 0..w {
                    let wc = p[pw + out * w + inp];
                    let dwc = dp[pw + out * w + inp];
                    let hsrc = &h[inp * npts..(inp + 1) * npts];
                    let dhsrc = &dh[inp * npts..(inp + 1) * npts];
                    for i in 0..npts {
                        z[out * npts + i] += wc * hsrc[i];
                        dz[out * npts + i] += wc * dhsrc[i] + dwc * hsrc[i];
                    }
                }
            }
            // activation chain rule
            for i in 0..w * npts {
                let zi = z[i];
                h[i] = self.activation.apply(zi);
                dh[i] = dz[i] * self.activation.grad(zi);
            }
        }

        // projection
        let mut out = vec![0.0; self.out_channels * npts];
        let mut dout = vec![0.0; self.out_channels * npts];
        for o in 0..self.out_channels {
            let dst = &mut out[o * npts..(o + 1) * npts];
            dst.iter_mut().for_each(|v| *v = p[lay.proj_b + o]);
            let ddst = &mut dout[o * npts..(o + 1) * npts];
            ddst.iter_mut().for_each(|v| *v = dp[lay.proj_b + o]);
            for c in 0..w {
                let wc = p[lay.proj_w + o * w + c];
                let dwc = dp[lay.proj_w + o * w + c];
                let hsrc = &h[c * npts..(c + 1) * npts];
                let dhsrc = &dh[c * npts..(c + 1) * npts];
                for i in 0..npts {
                    out[o * npts + i] += wc * hsrc[i];
                    dout[o * npts + i] += wc * dhsrc[i] + dwc * hsrc[i];
                }
            }
        }
        (out, dout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_dft_1d(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (j, &v) in x.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    /// width-1, single-layer operator with identity lift/proj and zero skip.
    fn bare_operator(n: usize, m: usize) -> SpectralOperatorParams {
        let mut rng = StreamRng::new(0);
        let mut op = SpectralOperatorParams::init(
            &[n],
            &[m],
            1,
            1,
            1,
            1,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        op.params.iter_mut().for_each(|v| *v = 0.0);
        let lay = op.layout();
        op.params[lay.lift_w] = 1.0;
        op.params[lay.proj_w] = 1.0;
        op
    }

    #[test]
    fn zero_weights_zero_output() {
        let mut rng = StreamRng::new(5);
        let mut op = SpectralOperatorParams::init(
            &[8],
            &[3],
            2,
            1,
            1,
            2,
            Activation::SiLU,
            &mut rng,
        )
        .unwrap();
        op.params.iter_mut().for_each(|v| *v = 0.0);
        let y = op.forward(&[0.4, -1.0, 2.0, 0.0, 1.0, 1.0, -0.5, 0.3]);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_weights_identity_on_bandlimited_input() {
        let n = 16;
        let m = 4;
        let mut op = bare_operator(n, m);
        let lay = op.layout();
        let sw = lay.spec_w(0);
        // weight = 1 + 0i on all retained cells
        for ci in 0..lay.cells {
            op.params[sw + ci * 2] = 1.0;
        }
        // band-limited input: frequencies 0..m only
        let x: Vec<f64> = (0..n)
            .map(|j| {
                let t = j as f64 / n as f64;
                1.3 + (2.0 * std::f64::consts::PI * t).cos()
                    + 0.5 * (2.0 * std::f64::consts::PI * 3.0 * t).sin()
            })
            .collect();
        let y = op.forward(&x);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_direct_circular_convolution() {
        for &n in &[8usize, 16] {
            let m = n / 2;
            let mut rng = StreamRng::new(42 + n as u64);
            let mut op = bare_operator(n, m);
            let lay = op.layout();
            let sw = lay.spec_w(0);
            for ci in 0..lay.cells {
                op.params[sw + ci * 2] = rng.normal();
                // self-mirror cell (k=0) ignores the imaginary part
                op.params[sw + ci * 2 + 1] = if ci == 0 { 0.0 } else { rng.normal() };
            }
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let y = op.forward(&x);

            // Equivalent kernel: inverse DFT of the Hermitian-filled weight spectrum.
            let mut wre = vec![0.0; n];
            let mut wim = vec![0.0; n];
            for k in 0..m {
                wre[k] = op.params[sw + k * 2];
                wim[k] = op.params[sw + k * 2 + 1];
                if k > 0 {
                    wre[n - k] = wre[k];
                    wim[n - k] = -wim[k];
                }
            }
            let kernel: Vec<f64> = (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..n {
                        let ang = 2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64;
                        s += wre[k] * ang.cos() - wim[k] * ang.sin();
                    }
                    s / n as f64
                })
                .collect();
            // y_direct = kernel (*) x, circular
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..n {
                    s += kernel[l] * x[(j + n - l) % n];
                }
                assert!((y[j] - s).abs() < 1e-10, "n={n} j={j}: {} vs {s}", y[j]);
            }
        }
    }

    #[test]
    fn superposition_with_identity_activation() {
        let mut rng = StreamRng::new(7);
        let op = SpectralOperatorParams::init(
            &[12],
            &[3],
            3,
            2,
            2,
            2,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let npts = 12;
        let a: Vec<f64> = (0..2 * npts).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..2 * npts).map(|_| rng.normal()).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let fa = op.forward(&a);
        let fb = op.forward(&b);
        let fs = op.forward(&sum);
        for i in 0..fs.len() {
            assert!((fs[i] - fa[i] - fb[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn output_spectrum_is_hermitian_real_output() {
        // On a padded, rectangular 2-D grid the output must stay real.
        let mut rng = StreamRng::new(8);
        let op = SpectralOperatorParams::init(
            &[5, 6],
            &[2, 2],
            3,
            2,
            1,
            2,
            Activation::SiLU,
            &mut rng,
        )
        .unwrap();
        let npts = 30;
        let x: Vec<f64> = (0..2 * npts).map(|_| rng.normal()).collect();
        let y = op.forward(&x);
        assert_eq!(y.len(), npts);
        assert!(y.iter().all(|v| v.is_finite()));
        // determinism
        let y2 = op.forward(&x);
        assert_eq!(y, y2);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = StreamRng::new(21);
        let op = SpectralOperatorParams::init(
            &[4, 6],
            &[2, 2],
            2,
            2,
            2,
            2,
            Activation::SiLU,
            &mut rng,
        )
        .unwrap();
        let npts = 24;
        let x: Vec<f64> = (0..2 * npts).map(|_| rng.normal() * 0.5).collect();
        let up: Vec<f64> = (0..2 * npts).map(|_| rng.normal()).collect();
        let (_, cache) = op.forward_cached(&x);
        let g = op.vjp(&cache, &up);

        let loss = |op: &SpectralOperatorParams, x: &[f64]| -> f64 {
            op.forward(x).iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        // parameters: spot-check a spread of indices (full sweep is slow)
        let stride = (op.params.len() / 97).max(1);
        let mut op2 = op.clone();
        for j in (0..op.params.len()).step_by(stride) {
            op2.params[j] = op.params[j] + h;
            let upv = loss(&op2, &x);
            op2.params[j] = op.params[j] - h;
            let dnv = loss(&op2, &x);
            op2.params[j] = op.params[j];
            let fd = (upv - dnv) / (2.0 * h);
            let rel = (g.params[j] - fd).abs() / fd.abs().max(1e-2);
            assert!(rel < 1e-5, "param {j}: an={} fd={}", g.params[j], fd);
        }
        // inputs
        let mut x2 = x.clone();
        for j in (0..x.len()).step_by(5) {
            x2[j] = x[j] + h;
            let upv = loss(&op, &x2);
            x2[j] = x[j] - h;
            let dnv = loss(&op, &x2);
            x2[j] = x[j];
            let fd = (upv - dnv) / (2.0 * h);
            let rel = (g.input[j] - fd).abs() / fd.abs().max(1e-2);
            assert!(rel < 1e-5, "input {j}: an={} fd={}", g.input[j], fd);
        }
    }

    #[test]
    fn jvp_consistent_with_vjp() {
        // <u, J d> must equal <J^T u, d> for random directions.
        let mut rng = StreamRng::new(31);
        let op = SpectralOperatorParams::init(
            &[10],
            &[3],
            3,
            2,
            1,
            2,
            Activation::Tanh,
            &mut rng,
        )
        .unwrap();
        let npts = 10;
        let x: Vec<f64> = (0..2 * npts).map(|_| rng.normal() * 0.3).collect();
        let dparams: Vec<f64> = (0..op.params.len()).map(|_| rng.normal()).collect();
        let dx: Vec<f64> = (0..x.len()).map(|_| rng.normal()).collect();
        let up: Vec<f64> = (0..npts).map(|_| rng.normal()).collect();

        let (y0, dy) = op.jvp(&x, Some(&dx), Some(&dparams));
        let (y1, cache) = op.forward_cached(&x);
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = op.vjp(&cache, &up);
        let lhs: f64 = up.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = g
            .params
            .iter()
            .zip(&dparams)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + g.input.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>();
        assert!(
            (lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0),
            "{lhs} vs {rhs}"
        );
    }
}
