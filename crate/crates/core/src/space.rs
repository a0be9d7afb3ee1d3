//! Mixed continuous/discrete search spaces.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::FactorGraph;

/// A point `(c, v)`: continuous coordinates plus one vertex index per factor graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedPoint {
    pub cont: Vec<f64>,
    pub disc: Vec<usize>,
}

impl MixedPoint {
    pub fn new(cont: Vec<f64>, disc: Vec<usize>) -> Self {
        Self { cont, disc }
    }
}

/// Box bounds for the continuous part and one [`FactorGraph`] per discrete variable.
///
/// Cloning is cheap: factor graphs are shared.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    bounds: Vec<(f64, f64)>,
    factors: Vec<Arc<FactorGraph>>,
}

impl SearchSpace {
    pub fn new(bounds: Vec<(f64, f64)>, factors: Vec<FactorGraph>) -> Result<Self> {
        Self::from_shared(bounds, factors.into_iter().map(Arc::new).collect())
    }

    pub fn from_shared(bounds: Vec<(f64, f64)>, factors: Vec<Arc<FactorGraph>>) -> Result<Self> {
        for (d, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "continuous dimension {d} has invalid bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { bounds, factors })
    }

    pub fn dim_cont(&self) -> usize {
        self.bounds.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn widths(&self) -> Vec<f64> {
        self.bounds.iter().map(|(lo, hi)| hi - lo).collect()
    }

    pub fn factors(&self) -> &[Arc<FactorGraph>] {
        &self.factors
    }

    pub fn factor_sizes(&self) -> Vec<usize> {
        self.factors.iter().map(|g| g.n()).collect()
    }

    /// Number of distinct discrete configurations, saturating.
    pub fn discrete_cardinality(&self) -> u128 {
        self.factors
            .iter()
            .fold(1u128, |acc, g| acc.saturating_mul(g.n() as u128))
    }

    pub fn validate(&self, x: &MixedPoint) -> Result<()> {
        if x.cont.len() != self.dim_cont() {
            return Err(Error::Shape {
                expected: self.dim_cont(),
                got: x.cont.len(),
            });
        }
        if x.disc.len() != self.n_factors() {
            return Err(Error::Shape {
                expected: self.n_factors(),
                got: x.disc.len(),
            });
        }
        for (d, (&c, &(lo, hi))) in x.cont.iter().zip(&self.bounds).enumerate() {
            if !(c >= lo && c <= hi) {
                return Err(Error::InvalidPoint(format!(
                    "continuous coordinate {d} = {c} outside [{lo}, {hi}]"
                )));
            }
        }
        for (p, (&v, g)) in x.disc.iter().zip(&self.factors).enumerate() {
            if v >= g.n() {
                return Err(Error::InvalidPoint(format!(
                    "factor {p} vertex {v} out of range (|V| = {})",
                    g.n()
                )));
            }
        }
        Ok(())
    }

    /// Uniform in the box, uniform over vertices of each factor.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> MixedPoint {
        let cont = self
            .bounds
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..=hi))
            .collect();
        let disc = self.factors.iter().map(|g| rng.random_range(0..g.n())).collect();
        MixedPoint { cont, disc }
    }

    pub fn clip_cont(&self, cont: &mut [f64]) {
        for (c, &(lo, hi)) in cont.iter_mut().zip(&self.bounds) {
            *c = c.clamp(lo, hi);
        }
    }
}
