//! Solution-to-data map: restriction to an index set plus i.i.d. Gaussian
//! noise drawn from a counter-based stream.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObservationLayout {
    /// flattened indices into the solution field
    pub indices: Vec<usize>,
    pub sigma: f64,
}

impl ObservationLayout {
    pub fn new(indices: Vec<usize>, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Config(format!("observation sigma {sigma} must be > 0")));
        }
        Ok(ObservationLayout { indices, sigma })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Exact restriction H x (no noise).
    pub fn restrict(&self, field: &[f64]) -> Result<Vec<f64>> {
        self.indices
            .iter()
            .map(|&ix| {
                field.get(ix).copied().ok_or_else(|| {
                    Error::Dimension(format!(
                        "observation index {ix} out of bounds for field of {}",
                        field.len()
                    ))
                })
            })
            .collect()
    }

    /// Scatter observation-space weights back onto the field: H^T w.
    pub fn scatter(&self, weights: &[f64], field_len: usize) -> Vec<f64> {
        debug_assert_eq!(weights.len(), self.indices.len());
        let mut out = vec![0.0; field_len];
        for (&ix, &w) in self.indices.iter().zip(weights) {
            out[ix] += w;
        }
        out
    }
}

/// y = H field + sigma * xi with xi from the given stream. Pass
/// `with_noise = false` for the exact restriction.
pub fn observe(
    field: &[f64],
    layout: &ObservationLayout,
    rng: &mut StreamRng,
    with_noise: bool,
) -> Result<Vec<f64>> {
    let mut y = layout.restrict(field)?;
    if with_noise {
        for v in y.iter_mut() {
            *v += layout.sigma * rng.normal();
        }
    }
    Ok(y)
}

/// Exp-1 layout: every 8th node of the 101-node time grid, sigma 0.15.
pub fn mass_damper_layout(n_nodes: usize) -> ObservationLayout {
    ObservationLayout {
        indices: (0..n_nodes).step_by(8).collect(),
        sigma: 0.15,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_path_is_exact_restriction() {
        let field: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let layout = ObservationLayout::new(vec![0, 3, 19], 0.5).unwrap();
        let mut rng = StreamRng::new(0);
        let y = observe(&field, &layout, &mut rng, false).unwrap();
        assert_eq!(y, vec![0.0, 3.0, 19.0]);
    }

    #[test]
    fn exp1_layout_matches_paper() {
        let layout = mass_damper_layout(101);
        assert_eq!(layout.sigma, 0.15);
        assert_eq!(layout.indices[0], 0);
        assert_eq!(layout.indices[1], 8);
        assert_eq!(*layout.indices.last().unwrap(), 96);
        assert_eq!(layout.len(), 13);
    }

    #[test]
    fn fixed_seed_reproduces_exactly() {
        let field = vec![1.0; 10];
        let layout = ObservationLayout::new(vec![1, 4, 7], 0.3).unwrap();
        let draw = || {
            let mut rng = StreamRng::new(99).named("obs", &[2]);
            observe(&field, &layout, &mut rng, true).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn out_of_bounds_index_errors() {
        let layout = ObservationLayout::new(vec![10], 0.1).unwrap();
        let mut rng = StreamRng::new(0);
        assert!(observe(&[0.0; 5], &layout, &mut rng, false).is_err());
    }
}
