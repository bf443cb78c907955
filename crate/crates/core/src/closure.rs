//! The scalar closure term: ground-truth analytic forms used for data
//! generation and oracles, the neural closure being learned, and the
//! maximum-marginal-likelihood learner that updates it from ensemble samples.

use crate::error::Result;
use crate::nn::mlp::{self, Activation, MlpParams};
use crate::nn::real::{Dual, Real};
use crate::nn::AdamState;
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

/// A scalar-in/scalar-out nonlinearity f(v).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum ClosureFn {
    Zero,
    /// a v^3 + b v (mass-damper ground truth with a = b = 0.08)
    Cubic { a: f64, b: f64 },
    /// v^2 / 2 (Darcy ground truth)
    HalfSquare,
    /// scale (sigmoid(gain v) - 1/2) (Burgers ground truth, scale 7, gain 3)
    SigmoidJump { scale: f64, gain: f64 },
    Net(MlpParams),
}

impl ClosureFn {
    pub fn eval_generic<S: Real>(&self, v: S) -> S {
        match self {
            ClosureFn::Zero => S::zero(),
            ClosureFn::Cubic { a, b } => v * v * v.scale(*a) + v.scale(*b),
            ClosureFn::HalfSquare => v * v.scale(0.5),
            ClosureFn::SigmoidJump { scale, gain } => {
                (v.scale(*gain).sigmoid() - S::from_f64(0.5)).scale(*scale)
            }
            ClosureFn::Net(net) => {
                let lifted: Vec<S> = net.lift();
                mlp::forward(&net.widths, net.activation, &lifted, &[v])[0]
            }
        }
    }

    pub fn eval(&self, v: f64) -> f64 {
        match self {
            // Fast path avoids re-lifting the net per call.
            ClosureFn::Net(net) => net.eval_scalar(v),
            other => other.eval_generic(v),
        }
    }

    /// Batched value + derivative with respect to the input.
    pub fn eval_batch_with_grad(&self, vs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            ClosureFn::Net(net) => net.eval_scalar_batch_with_grad(vs),
            other => {
                let mut f = Vec::with_capacity(vs.len());
                let mut df = Vec::with_capacity(vs.len());
                for &v in vs {
                    let y = other.eval_generic(Dual::seeded(v));
                    f.push(y.v);
                    df.push(y.d);
                }
                (f, df)
            }
        }
    }

    pub fn eval_batch(&self, vs: &[f64]) -> Vec<f64> {
        match self {
            ClosureFn::Net(net) => {
                let cache = mlp::forward_cached(&net.widths, net.activation, &net.params, vs);
                cache.acts.last().unwrap().clone()
            }
            other => vs.iter().map(|&v| other.eval(v)).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            ClosureFn::Net(net) => net.params.len(),
            _ => 0,
        }
    }

    /// Accumulate d(sum_i w_i f(v_i))/d(params). No-op for analytic closures.
    pub fn accumulate_param_grad(&self, vs: &[f64], ws: &[f64], accum: &mut [f64]) {
        if let ClosureFn::Net(net) = self {
            net.accumulate_weighted_param_grad(vs, ws, accum);
        }
    }

    /// Dual-valued gradient accumulation: inputs and weights carry tangents,
    /// and the epsilon part of the parameter gradient is accumulated into
    /// `accum_tangent`. This is the mixed second derivative needed by the
    /// bilevel hypergradient.
    pub fn accumulate_param_grad_dual(
        &self,
        vs: &[Dual<f64>],
        ws: &[Dual<f64>],
        accum_tangent: &mut [f64],
    ) {
        if let ClosureFn::Net(net) = self {
            let lifted: Vec<Dual<f64>> = net.lift();
            let cache = mlp::forward_cached(&net.widths, net.activation, &lifted, vs);
            let grads = mlp::backprop(&net.widths, net.activation, &lifted, &cache, ws);
            for (a, g) in accum_tangent.iter_mut().zip(&grads.params) {
                *a += g.d;
            }
        }
    }
}

/// Reusable evaluator: lifts a closure net's parameters once so repeated
/// batched calls inside solver loops avoid per-call lifting.
pub struct PreparedClosure<'a> {
    f: &'a ClosureFn,
    lifted: Option<Vec<Dual<f64>>>,
}

impl ClosureFn {
    pub fn prepare(&self) -> PreparedClosure<'_> {
        let lifted = match self {
            ClosureFn::Net(net) => Some(net.lift()),
            _ => None,
        };
        PreparedClosure { f: self, lifted }
    }
}

impl<'a> PreparedClosure<'a> {
    /// Batched values.
    pub fn values(&self, vs: &[f64]) -> Vec<f64> {
        match self.f {
            ClosureFn::Net(net) => {
                mlp::forward_batch(&net.widths, net.activation, &net.params, vs)
            }
            other => vs.iter().map(|&v| other.eval(v)).collect(),
        }
    }

    /// Batched values and input derivatives.
    pub fn values_and_derivs(&self, vs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self.f {
            ClosureFn::Net(net) => {
                let ones = vec![1.0; vs.len()];
                mlp::forward_batch_with_input_tangent(
                    &net.widths,
                    net.activation,
                    &net.params,
                    vs,
                    &ones,
                )
            }
            other => other.eval_batch_with_grad(vs),
        }
    }
}

/// The learnable closure: an MLP plus its optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosureModel {
    pub net: MlpParams,
    pub adam: AdamState,
    /// Input range the model is reported over, for diagnostics.
    pub report_range: (f64, f64),
}

impl ClosureModel {
    pub fn new(hidden_layers: usize, hidden_width: usize, lr: f64, rng: &mut StreamRng) -> Self {
        let mut widths = vec![1];
        widths.extend(std::iter::repeat(hidden_width).take(hidden_layers));
        widths.push(1);
        let net = MlpParams::init(&widths, Activation::SiLU, rng);
        let dim = net.params.len();
        ClosureModel {
            net,
            adam: AdamState::new(dim, lr),
            report_range: (-5.0, 5.0),
        }
    }

    pub fn as_fn(&self) -> ClosureFn {
        ClosureFn::Net(self.net.clone())
    }

    pub fn eval(&self, v: f64) -> f64 {
        self.net.eval_scalar(v)
    }

    pub fn eval_batch(&self, vs: &[f64]) -> Vec<f64> {
        let cache = mlp::forward_cached(
            &self.net.widths,
            self.net.activation,
            &self.net.params,
            vs,
        );
        cache.acts.last().unwrap().clone()
    }

    /// One Adam step on the provided loss gradient. Skips (and reports) on
    /// non-finite gradients.
    pub fn apply_grad(&mut self, grad: &[f64]) -> Result<bool> {
        if !grad.iter().all(|g| g.is_finite()) {
            return Ok(false);
        }
        self.adam.step(&mut self.net.params, grad)?;
        Ok(true)
    }
}

/// Uniform-grid evaluation of a closure against a reference, plus the MSE.
pub struct ClosureReport {
    pub inputs: Vec<f64>,
    pub predicted: Vec<f64>,
    pub reference: Vec<f64>,
    pub mse: f64,
}

pub fn closure_report(
    model_fn: &ClosureFn,
    range: (f64, f64),
    n_grid: usize,
    reference: &ClosureFn,
) -> ClosureReport {
    assert!(n_grid >= 2);
    let (lo, hi) = range;
    let inputs: Vec<f64> = (0..n_grid)
        .map(|i| lo + (hi - lo) * i as f64 / (n_grid - 1) as f64)
        .collect();
    let predicted = model_fn.eval_batch(&inputs);
    let refv = reference.eval_batch(&inputs);
    let mse = predicted
        .iter()
        .zip(&refv)
        .map(|(p, r)| (p - r) * (p - r))
        .sum::<f64>()
        / n_grid as f64;
    ClosureReport {
        inputs,
        predicted,
        reference: refv,
        mse,
    }
}
