use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// How clipping candidates are generated around an observed range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Shrink factors per side, log-spaced from 1 down to `floor`.
    pub steps: usize,
    pub floor: f64,
    /// Half-width, in grid steps, of the asymmetric refinement around the
    /// symmetric winner; 0 disables it.
    pub refine: usize,
    /// Before refining, sweep each side's full ladder with the other side
    /// held at the symmetric winner. Needed when the outliers sit on one
    /// side only: shrinking both ends together then clips the bulk on the
    /// clean side long before the outlier side is tight.
    pub per_side: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            floor: 0.005,
            refine: 3,
            per_side: true,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(Error::Config(format!("bad clip grid: {} steps, floor {}", self.steps, self.floor)));
        }
        Ok(())
    }

    /// `f_i = floor^(i / (steps - 1))`, so `f_0 = 1`.
    pub fn factors(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![1.0];
        }
        (0..self.steps)
            .map(|i| self.floor.powf(i as f64 / (self.steps - 1) as f64))
            .collect()
    }
}

/// Candidate `(x_low, x_up)` pairs; the first is the observed range.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSearchGrid<T> {
    pub candidates: Vec<(T, T)>,
    /// `(low factor index, up factor index)` of each candidate.
    pub index: Vec<(usize, usize)>,
    pub min: T,
    pub max: T,
    pub factors: Vec<f64>,
}

/// Replaces an empty range by a small interval around it.
pub fn widen_degenerate<T: Scalar>(min: T, max: T) -> (T, T) {
    if max > min {
        return (min, max);
    }
    let d = (min.abs() * T::lit(1e-3)).max(T::lit(1e-8));
    (min - d, max + d)
}

impl<T: Scalar> ClipSearchGrid<T> {
    /// Both sides shrunk by the same factor.
    pub fn symmetric(min: T, max: T, cfg: &GridConfig) -> Result<Self> {
        cfg.validate()?;
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::NonFinite(format!("observed range [{min}, {max}]")));
        }
        let (min, max) = widen_degenerate(min, max);
        let factors = cfg.factors();
        let mut g = Self {
            candidates: Vec::with_capacity(factors.len()),
            index: Vec::with_capacity(factors.len()),
            min,
            max,
            factors,
        };
        for i in 0..g.factors.len() {
            g.push(i, i);
        }
        Ok(g)
    }

    pub fn pair_at(&self, a: usize, b: usize) -> (T, T) {
        (self.min * T::lit(self.factors[a]), self.max * T::lit(self.factors[b]))
    }

    fn push(&mut self, a: usize, b: usize) {
        let (lo, up) = self.pair_at(a, b);
        if up > lo {
            self.candidates.push((lo, up));
            self.index.push((a, b));
        }
    }

    /// Independent per-side factors within `radius` steps of `(a, b)`.
    pub fn refinement(&self, a: usize, b: usize, radius: usize) -> Self {
        let n = self.factors.len();
        let span = |c: usize| c.saturating_sub(radius)..=(c + radius).min(n - 1);
        let mut g = Self {
            candidates: Vec::new(),
            index: Vec::new(),
            min: self.min,
            max: self.max,
            factors: self.factors.clone(),
        };
        for i in span(a) {
            for j in span(b) {
                g.push(i, j);
            }
        }
        g
    }

    /// `(i, b)` and `(a, j)` for every factor index: one side moves, the
    /// other stays at the given index.
    pub fn side_sweep(&self, a: usize, b: usize) -> Self {
        let mut g = Self {
            candidates: Vec::new(),
            index: Vec::new(),
            min: self.min,
            max: self.max,
            factors: self.factors.clone(),
        };
        for i in 0..self.factors.len() {
            g.push(i, b);
        }
        for j in 0..self.factors.len() {
            if j != b {
                g.push(a, j);
            }
        }
        g
    }

    /// Factor indices of a candidate pair, if it is on this grid.
    pub fn index_of(&self, c: (T, T)) -> Option<(usize, usize)> {
        self.candidates.iter().position(|&x| x == c).map(|i| self.index[i])
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Grid without candidate `i`.
    pub fn without(&self, i: usize) -> Self {
        let mut g = self.clone();
        g.candidates.remove(i);
        g.index.remove(i);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contains_observed_range() {
        let g = ClipSearchGrid::symmetric(-3.0f64, 7.0, &GridConfig::default()).unwrap();
        assert_eq!(g.candidates[0], (-3.0, 7.0));
        assert_eq!(g.len(), 100);
        let (lo, up) = *g.candidates.last().unwrap();
        assert!((lo + 0.015).abs() < 1e-12 && (up - 0.035).abs() < 1e-12);
    }

    #[test]
    fn degenerate_range_widened() {
        let g = ClipSearchGrid::symmetric(0.0f64, 0.0, &GridConfig::default()).unwrap();
        assert!(g.candidates.iter().all(|(l, u)| u > l));
    }

    #[test]
    fn refinement_is_local() {
        let g = ClipSearchGrid::symmetric(-1.0f64, 1.0, &GridConfig::default()).unwrap();
        let r = g.refinement(0, 50, 3);
        assert_eq!(r.len(), 4 * 7);
        assert!(r.index.iter().all(|&(a, b)| a <= 3 && (47..=53).contains(&b)));
    }

    #[test]
    fn side_sweep_moves_one_side() {
        let g = ClipSearchGrid::symmetric(-1.0f64, 1.0, &GridConfig::default()).unwrap();
        let s = g.side_sweep(10, 20);
        assert_eq!(s.len(), 199);
        assert!(s.index.iter().all(|&(a, b)| a == 10 || b == 20));
        assert_eq!(s.index_of(g.candidates[0]), None);
        assert_eq!(s.index_of(s.candidates[0]), Some((0, 20)));
    }
}
