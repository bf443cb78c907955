//! Fixed-topology multilayer perceptron with closed-form layerwise backprop.
//!
//! Parameters live in one flat vector (per layer: row-major weight matrix,
//! then bias). Forward and backward passes are generic over [`Real`] so the
//! same code yields values, input derivatives (dual inputs), parameter
//! directional derivatives (dual parameters), and the dual-valued backprop
//! needed by the bilevel hypergradient.

use super::real::{Dual, Real};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    SiLU,
    Tanh,
    /// Pass-through; used by linearity tests and linear output layers.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<S: Real>(self, x: S) -> S {
        match self {
            Activation::SiLU => x.silu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Fused value and derivative sharing the transcendental evaluation.
    #[inline]
    pub fn value_and_grad(self, x: f64) -> (f64, f64) {
        match self {
            Activation::SiLU => {
                let s = x.sigmoid();
                (x * s, s + x * s * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Identity => (x, 1.0),
        }
    }

    /// Derivative at pre-activation `x`.
    #[inline]
    pub fn grad<S: Real>(self, x: S) -> S {
        match self {
            Activation::SiLU => {
                let s = x.sigmoid();
                s + x * s * (S::one() - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
            Activation::Identity => S::one(),
        }
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum::<usize>()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpParams {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(widths: &[usize], activation: Activation, rng: &mut StreamRng) -> MlpParams {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut params = Vec::with_capacity(param_count(widths));
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.uniform_in(-bound, bound));
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        MlpParams {
            widths: widths.to_vec(),
            activation,
            params,
        }
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> MlpParams {
        MlpParams {
            widths: widths.to_vec(),
            activation,
            params: vec![0.0; param_count(widths)],
        }
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn check(&self) -> Result<()> {
        if self.params.len() != param_count(&self.widths) {
            return Err(Error::Dimension(format!(
                "mlp has {} params, widths {:?} want {}",
                self.params.len(),
                self.widths,
                param_count(&self.widths)
            )));
        }
        Ok(())
    }

    /// Lift the flat parameter vector into any scalar type.
    pub fn lift<S: Real>(&self) -> Vec<S> {
        self.params.iter().map(|&p| S::from_f64(p)).collect()
    }

    /// Lift with a tangent direction: params + eps * dir.
    pub fn lift_dual(&self, dir: &[f64]) -> Vec<Dual<f64>> {
        debug_assert_eq!(dir.len(), self.params.len());
        self.params
            .iter()
            .zip(dir)
            .map(|(&p, &d)| Dual::new(p, d))
            .collect()
    }
}

/// One sample through the net. The activation is applied to all layers
/// except the last, which stays linear.
pub fn forward<S: Real>(widths: &[usize], act: Activation, params: &[S], x: &[S]) -> Vec<S> {
    debug_assert_eq!(x.len(), widths[0]);
    let n_layers = widths.len() - 1;
    let mut cur = x.to_vec();
    let mut off = 0;
    for (l, w) in widths.windows(2).enumerate() {
        let (w_in, w_out) = (w[0], w[1]);
        let weights = &params[off..off + w_in * w_out];
        let biases = &params[off + w_in * w_out..off + w_in * w_out + w_out];
        off += w_in * w_out + w_out;
        let mut next = Vec::with_capacity(w_out);
        for o in 0..w_out {
            let mut s = biases[o];
            let row = &weights[o * w_in..(o + 1) * w_in];
            for (wi, xi) in row.iter().zip(&cur) {
                s = s + *wi * *xi;
            }
            next.push(if l + 1 < n_layers { act.apply(s) } else { s });
        }
        cur = next;
    }
    cur
}

/// Stored intermediates for a batched pass: per layer, pre-activations.
pub struct Cache<S: Real> {
    pub batch: usize,
    /// inputs, then post-activation values of each hidden layer (n_layers entries
    /// where the last is the network output).
    pub acts: Vec<Vec<S>>,
    /// pre-activation values per layer.
    pub pre: Vec<Vec<S>>,
}

/// Batched forward keeping intermediates. `xs` is (batch, d_in) row-major.
pub fn forward_cached<S: Real>(
    widths: &[usize],
    act: Activation,
    params: &[S],
    xs: &[S],
) -> Cache<S> {
    let d_in = widths[0];
    debug_assert_eq!(xs.len() % d_in, 0);
    let batch = xs.len() / d_in;
    let n_layers = widths.len() - 1;
    let mut acts: Vec<Vec<S>> = Vec::with_capacity(n_layers + 1);
    let mut pre: Vec<Vec<S>> = Vec::with_capacity(n_layers);
    acts.push(xs.to_vec());
    let mut off = 0;
    for (l, w) in widths.windows(2).enumerate() {
        let (w_in, w_out) = (w[0], w[1]);
        let weights = &params[off..off + w_in * w_out];
        let biases = &params[off + w_in * w_out..off + w_in * w_out + w_out];
        off += w_in * w_out + w_out;
        let prev = acts.last().unwrap();
        let mut z = vec![S::zero(); batch * w_out];
        for i in 0..batch {
            let xi = &prev[i * w_in..(i + 1) * w_in];
            let zi = &mut z[i * w_out..(i + 1) * w_out];
            for o in 0..w_out {
                let mut s = biases[o];
                let row = &weights[o * w_in..(o + 1) * w_in];
                for c in 0..w_in {
                    s = s + row[c] * xi[c];
                }
                zi[o] = s;
            }
        }
        let a = if l + 1 < n_layers {
            z.iter().map(|&v| act.apply(v)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        acts.push(a);
    }
    Cache { batch, acts, pre }
}

/// Batched forward without retained intermediates; ping-pong buffers keep
/// allocations to two per call.
pub fn forward_batch<S: Real>(
    widths: &[usize],
    act: Activation,
    params: &[S],
    xs: &[S],
) -> Vec<S> {
    let d_in = widths[0];
    debug_assert_eq!(xs.len() % d_in, 0);
    let batch = xs.len() / d_in;
    let n_layers = widths.len() - 1;
    let mut cur = xs.to_vec();
    let mut next: Vec<S> = Vec::new();
    let mut off = 0;
    for (l, w) in widths.windows(2).enumerate() {
        let (w_in, w_out) = (w[0], w[1]);
        let weights = &params[off..off + w_in * w_out];
        let biases = &params[off + w_in * w_out..off + w_in * w_out + w_out];
        off += w_in * w_out + w_out;
        let last = l + 1 == n_layers;
        next.clear();
        next.resize(batch * w_out, S::zero());
        for (xi, zi) in cur.chunks_exact(w_in).zip(next.chunks_exact_mut(w_out)) {
            for (o, zo) in zi.iter_mut().enumerate() {
                let mut s = biases[o];
                let row = &weights[o * w_in..(o + 1) * w_in];
                for (wv, xv) in row.iter().zip(xi) {
                    s = s + *wv * *xv;
                }
                *zo = if last { s } else { act.apply(s) };
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Batched forward propagating one input tangent per sample, with plain f64
/// parameters. Equivalent to running `forward_batch` over `Dual<f64>` with
/// constant-lifted parameters, but without the dead tangent multiplies.
pub fn forward_batch_with_input_tangent(
    widths: &[usize],
    act: Activation,
    params: &[f64],
    xs: &[f64],
    dxs: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d_in = widths[0];
    debug_assert_eq!(xs.len() % d_in, 0);
    debug_assert_eq!(xs.len(), dxs.len());
    let batch = xs.len() / d_in;
    let n_layers = widths.len() - 1;
    let mut cur = xs.to_vec();
    let mut dcur = dxs.to_vec();
    let mut next: Vec<f64> = Vec::new();
    let mut dnext: Vec<f64> = Vec::new();
    let mut off = 0;
    for (l, w) in widths.windows(2).enumerate() {
        let (w_in, w_out) = (w[0], w[1]);
        let weights = &params[off..off + w_in * w_out];
        let biases = &params[off + w_in * w_out..off + w_in * w_out + w_out];
        off += w_in * w_out + w_out;
        let last = l + 1 == n_layers;
        next.clear();
        next.resize(batch * w_out, 0.0);
        dnext.clear();
        dnext.resize(batch * w_out, 0.0);
        for i in 0..batch {
            let xi = &cur[i * w_in..(i + 1) * w_in];
            let di = &dcur[i * w_in..(i + 1) * w_in];
            for o in 0..w_out {
                let row = &weights[o * w_in..(o + 1) * w_in];
                let mut s = biases[o];
                let mut ds = 0.0;
                for ((wv, xv), dv) in row.iter().zip(xi).zip(di) {
                    s += wv * xv;
                    ds += wv * dv;
                }
                if last {
                    next[i * w_out + o] = s;
                    dnext[i * w_out + o] = ds;
                } else {
                    let (a, da) = act.value_and_grad(s);
                    next[i * w_out + o] = a;
                    dnext[i * w_out + o] = ds * da;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
        std::mem::swap(&mut dcur, &mut dnext);
    }
    (cur, dcur)
}

pub struct Grads<S: Real> {
    pub params: Vec<S>,
    pub inputs: Vec<S>,
}

/// Reverse pass. `upstream` is (batch, d_out) row-major; returns gradients of
/// sum_i <upstream_i, output_i> with respect to parameters and inputs.
pub fn backprop<S: Real>(
    widths: &[usize],
    act: Activation,
    params: &[S],
    cache: &Cache<S>,
    upstream: &[S],
) -> Grads<S> {
    let n_layers = widths.len() - 1;
    let batch = cache.batch;
    debug_assert_eq!(upstream.len(), batch * widths[n_layers]);
    let mut pgrad = vec![S::zero(); params.len()];
    let mut g = upstream.to_vec();

    // Offsets of each layer's parameter block.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for w in widths.windows(2) {
        offsets.push(off);
        off += w[0] * w[1] + w[1];
    }

    for l in (0..n_layers).rev() {
        let (w_in, w_out) = (widths[l], widths[l + 1]);
        let off = offsets[l];
        let weights = &params[off..off + w_in * w_out];
        // d/d pre-activation.
        if l + 1 < n_layers {
            let pre = &cache.pre[l];
            for (gi, &zi) in g.iter_mut().zip(pre.iter()) {
                *gi = *gi * act.grad(zi);
            }
        }
        let below = &cache.acts[l];
        {
            let (wg, bg) = pgrad[off..off + w_in * w_out + w_out].split_at_mut(w_in * w_out);
            for i in 0..batch {
                let gi = &g[i * w_out..(i + 1) * w_out];
                let xi = &below[i * w_in..(i + 1) * w_in];
                for o in 0..w_out {
                    let go = gi[o];
                    bg[o] = bg[o] + go;
                    let row = &mut wg[o * w_in..(o + 1) * w_in];
                    for c in 0..w_in {
                        row[c] = row[c] + go * xi[c];
                    }
                }
            }
        }
        // Push to previous layer.
        let mut g_prev = vec![S::zero(); batch * w_in];
        for i in 0..batch {
            let gi = &g[i * w_out..(i + 1) * w_out];
            let gp = &mut g_prev[i * w_in..(i + 1) * w_in];
            for o in 0..w_out {
                let go = gi[o];
                let row = &weights[o * w_in..(o + 1) * w_in];
                for c in 0..w_in {
                    gp[c] = gp[c] + go * row[c];
                }
            }
        }
        g = g_prev;
    }
    Grads {
        params: pgrad,
        inputs: g,
    }
}

impl MlpParams {
    /// Value at a single input.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        forward(&self.widths, self.activation, &self.params, x)
    }

    /// Scalar-in/scalar-out convenience for closure nets.
    pub fn eval_scalar(&self, v: f64) -> f64 {
        debug_assert_eq!(self.d_in(), 1);
        debug_assert_eq!(self.d_out(), 1);
        self.eval(&[v])[0]
    }

    /// Batched value + input-derivative for a scalar-in/scalar-out net.
    pub fn eval_scalar_batch_with_grad(&self, vs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let lifted: Vec<Dual<f64>> = self.lift();
        let mut vals = Vec::with_capacity(vs.len());
        let mut ders = Vec::with_capacity(vs.len());
        for &v in vs {
            let y = forward(&self.widths, self.activation, &lifted, &[Dual::seeded(v)]);
            vals.push(y[0].v);
            ders.push(y[0].d);
        }
        (vals, ders)
    }

    /// Accumulate d(sum_i w_i * f(v_i))/d(params) into `accum` for a
    /// scalar-in/scalar-out net. Processed in chunks so arbitrarily large
    /// batches stay within a bounded cache footprint.
    pub fn accumulate_weighted_param_grad(&self, vs: &[f64], ws: &[f64], accum: &mut [f64]) {
        debug_assert_eq!(vs.len(), ws.len());
        debug_assert_eq!(accum.len(), self.params.len());
        const CHUNK: usize = 4096;
        for (vc, wc) in vs.chunks(CHUNK).zip(ws.chunks(CHUNK)) {
            let cache = forward_cached(&self.widths, self.activation, &self.params, vc);
            let grads = backprop(&self.widths, self.activation, &self.params, &cache, wc);
            for (a, g) in accum.iter_mut().zip(&grads.params) {
                *a += *g;
            }
        }
    }
}
