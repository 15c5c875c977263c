//! Joint Bayesian inference over the hidden state and the transition rates
//! `(r21, r10, r_repump)` on a static grid.
//!
//! Every rate cell carries its own 3-vector over α. An update advances each
//! cell's vector with that cell's transition matrix, weights it by the count
//! likelihood (which depends on α only) and renormalizes the whole grid. Rate
//! information therefore enters only through how well each cell's dynamics
//! predict the observed state sequence.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, Propagation};
use crate::error::{Error, Result};
use crate::filter::scaled_likelihoods;
use crate::state::{normalize, BeliefVector, PhotonCountModel, TransitionRates, N_STATES};

pub const DEFAULT_MAX_CELLS: usize = 4_000_000;

/// Linear axis of candidate rates in s⁻¹. A single-point axis has `min == max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateAxis {
    pub min: f64,
    pub max: f64,
    pub n_points: usize,
}

impl RateAxis {
    pub fn new(min: f64, max: f64, n_points: usize) -> Result<Self> {
        let axis = RateAxis { min, max, n_points };
        axis.validate()?;
        Ok(axis)
    }

    pub fn point(rate: f64) -> Self {
        RateAxis {
            min: rate,
            max: rate,
            n_points: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min >= 0.0) {
            return Err(Error::InvalidGrid(format!(
                "axis bounds {} .. {} must be finite and >= 0",
                self.min, self.max
            )));
        }
        match self.n_points {
            0 => Err(Error::InvalidGrid("axis needs at least one point".into())),
            1 if self.max != self.min => Err(Error::InvalidGrid(
                "a single-point axis needs min == max".into(),
            )),
            1 => Ok(()),
            _ if self.max <= self.min => Err(Error::InvalidGrid(format!(
                "axis max {} must exceed min {}",
                self.max, self.min
            ))),
            _ => Ok(()),
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.n_points == 1 {
            self.min
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.n_points - 1) as f64
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.value(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub r21: RateAxis,
    pub r10: RateAxis,
    pub r_repump: RateAxis,
    pub max_cells: usize,
}

impl Default for GridSpec {
    /// 25 points per rate over [2, 150] s⁻¹.
    fn default() -> Self {
        let axis = RateAxis {
            min: 2.0,
            max: 150.0,
            n_points: 25,
        };
        GridSpec {
            r21: axis,
            r10: axis,
            r_repump: axis,
            max_cells: DEFAULT_MAX_CELLS,
        }
    }
}

impl GridSpec {
    pub fn single_cell(rates: &TransitionRates) -> Self {
        GridSpec {
            r21: RateAxis::point(rates.r21),
            r10: RateAxis::point(rates.r10),
            r_repump: RateAxis::point(rates.r_repump),
            max_cells: DEFAULT_MAX_CELLS,
        }
    }

    pub fn uniform(min: f64, max: f64, n_points: usize) -> Result<Self> {
        let axis = RateAxis::new(min, max, n_points)?;
        Ok(GridSpec {
            r21: axis,
            r10: axis,
            r_repump: axis,
            max_cells: DEFAULT_MAX_CELLS,
        })
    }

    pub fn n_rate_cells(&self) -> usize {
        self.r21.n_points * self.r10.n_points * self.r_repump.n_points
    }

    pub fn validate(&self) -> Result<()> {
        self.r21.validate()?;
        self.r10.validate()?;
        self.r_repump.validate()?;
        let cells = N_STATES * self.n_rate_cells();
        if cells > self.max_cells {
            return Err(Error::CapExceeded {
                cells,
                cap: self.max_cells,
            });
        }
        Ok(())
    }

    fn axes(&self) -> [&RateAxis; 3] {
        [&self.r21, &self.r10, &self.r_repump]
    }

    /// Axis indices of a flat cell index.
    pub fn cell_indices(&self, cell: usize) -> [usize; 3] {
        let nr = self.r_repump.n_points;
        let n10 = self.r10.n_points;
        [cell / (n10 * nr), (cell / nr) % n10, cell % nr]
    }

    pub fn cell_rates(&self, cell: usize) -> TransitionRates {
        let [i21, i10, ir] = self.cell_indices(cell);
        TransitionRates {
            r21: self.r21.value(i21),
            r10: self.r10.value(i10),
            r_repump: self.r_repump.value(ir),
            r_depump: 0.0,
        }
    }
}

/// Mean and standard deviation of one rate's marginal posterior, in s⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePosterior {
    pub mean: f64,
    pub rms: f64,
}

impl RatePosterior {
    pub fn relative_uncertainty(&self) -> f64 {
        self.rms / self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePosteriors {
    pub r21: RatePosterior,
    pub r10: RatePosterior,
    pub r_repump: RatePosterior,
}

impl RatePosteriors {
    pub fn as_array(&self) -> [(&'static str, RatePosterior); 3] {
        [
            ("r21", self.r21),
            ("r10", self.r10),
            ("r_repump", self.r_repump),
        ]
    }
}

#[derive(Debug, Clone)]
struct TransitionCache {
    dt: f64,
    mode: Propagation,
    matrices: Vec<Matrix3<f64>>,
}

/// Joint posterior `p(α, r21, r10, r_repump)`.
#[derive(Debug, Clone)]
pub struct RateGrid {
    spec: GridSpec,
    propagation: Propagation,
    joint: Vec<[f64; N_STATES]>,
    cache: Option<TransitionCache>,
    updates: u64,
}

impl RateGrid {
    /// Flat over rate cells, `initial_states` over α.
    pub fn init_flat(spec: GridSpec, initial_states: &BeliefVector) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_rate_cells();
        let p = initial_states.probs().map(|x| x / n as f64);
        Ok(RateGrid {
            spec,
            propagation: Propagation::Linearized,
            joint: vec![p; n],
            cache: None,
            updates: 0,
        })
    }

    pub fn with_propagation(mut self, propagation: Propagation) -> Self {
        self.propagation = propagation;
        self.cache = None;
        self
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// `p(α, cell)`.
    pub fn joint(&self, state: crate::HiddenState, cell: usize) -> f64 {
        self.joint[cell][state.index()]
    }

    fn ensure_cache(&mut self, dt: f64) -> Result<()> {
        if let Some(c) = &self.cache {
            if c.dt == dt && c.mode == self.propagation {
                return Ok(());
            }
        }
        let matrices = (0..self.spec.n_rate_cells())
            .map(|cell| dynamics::transition(&self.spec.cell_rates(cell), dt, self.propagation))
            .collect::<Result<Vec<_>>>()?;
        self.cache = Some(TransitionCache {
            dt,
            mode: self.propagation,
            matrices,
        });
        Ok(())
    }

    /// Advances every cell by `dt` with its own rates, then conditions on the
    /// count `n` and renormalizes.
    pub fn update(&mut self, n: u64, model: &PhotonCountModel, dt: f64) -> Result<()> {
        self.ensure_cache(dt)?;
        let matrices = &self.cache.as_ref().expect("cache built").matrices;

        let mut marginal = [0.0; N_STATES];
        for (v, m) in self.joint.iter_mut().zip(matrices) {
            let [a, b, c] = *v;
            let p = [
                (m[(0, 0)] * a + m[(0, 1)] * b + m[(0, 2)] * c).max(0.0),
                (m[(1, 0)] * a + m[(1, 1)] * b + m[(1, 2)] * c).max(0.0),
                (m[(2, 0)] * a + m[(2, 1)] * b + m[(2, 2)] * c).max(0.0),
            ];
            for i in 0..N_STATES {
                marginal[i] += p[i];
            }
            *v = p;
        }
        let (lik, _) = scaled_likelihoods(model.log_likelihoods(n), marginal.map(|x| x > 0.0));

        let mut total = 0.0;
        for v in self.joint.iter_mut() {
            for i in 0..N_STATES {
                v[i] *= lik[i];
                total += v[i];
            }
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::AllZero);
        }
        let inv = 1.0 / total;
        for v in self.joint.iter_mut() {
            for x in v.iter_mut() {
                *x *= inv;
            }
        }
        self.updates += 1;
        Ok(())
    }

    fn marginal_states_raw(&self) -> [f64; N_STATES] {
        let mut m = [0.0; N_STATES];
        for v in &self.joint {
            for i in 0..N_STATES {
                m[i] += v[i];
            }
        }
        m
    }

    /// `p(α) = Σ_cells p(α, cell)`.
    pub fn marginal_states(&self) -> BeliefVector {
        let m = self.marginal_states_raw();
        if self.joint.len() == 1 {
            return BeliefVector::from_raw_unchecked(m);
        }
        normalize(m).expect("grid keeps positive mass")
    }

    /// 1-D marginal of each rate axis, as `(rate, probability)` pairs.
    pub fn rate_marginals(&self) -> [Vec<(f64, f64)>; 3] {
        let mut out: [Vec<f64>; 3] = self.spec.axes().map(|a| vec![0.0; a.n_points]);
        for (cell, v) in self.joint.iter().enumerate() {
            let mass: f64 = v.iter().sum();
            let idx = self.spec.cell_indices(cell);
            for k in 0..3 {
                out[k][idx[k]] += mass;
            }
        }
        let axes = self.spec.axes();
        [0, 1, 2].map(|k| {
            out[k]
                .iter()
                .enumerate()
                .map(|(i, p)| (axes[k].value(i), *p))
                .collect()
        })
    }

    pub fn marginal_rates(&self) -> RatePosteriors {
        let [a, b, c] = self.rate_marginals().map(|m| moments(&m));
        RatePosteriors {
            r21: a,
            r10: b,
            r_repump: c,
        }
    }

    /// True iff `rms / mean ≤ threshold` for all three rates.
    pub fn stopping_check(&self, threshold: f64) -> Result<bool> {
        let post = self.marginal_rates();
        let mut ok = true;
        for (name, p) in post.as_array() {
            if p.mean <= 0.0 {
                if p.rms > 0.0 {
                    return Err(Error::ZeroMean { rate: name });
                }
                continue;
            }
            ok &= p.rms / p.mean <= threshold;
        }
        Ok(ok)
    }
}

fn moments(marginal: &[(f64, f64)]) -> RatePosterior {
    let total: f64 = marginal.iter().map(|(_, p)| p).sum();
    let mean = marginal.iter().map(|(r, p)| r * p).sum::<f64>() / total;
    let var = marginal
        .iter()
        .map(|(r, p)| p * (r - mean).powi(2))
        .sum::<f64>()
        / total;
    RatePosterior {
        mean,
        rms: var.max(0.0).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::HiddenState;

    fn flat_150() -> GridSpec {
        GridSpec::uniform(0.0, 150.0, 7).unwrap()
    }

    #[test]
    fn fresh_grid_examples() {
        let grid = RateGrid::init_flat(flat_150(), &BeliefVector::default()).unwrap();
        assert_eq!(grid.marginal_states().probs(), [0.0, 0.0, 1.0]);
        let n = flat_150().n_rate_cells() as f64;
        for cell in 0..flat_150().n_rate_cells() {
            assert_eq!(grid.joint(HiddenState::TWO, cell), 1.0 / n);
            assert_eq!(grid.joint(HiddenState::ONE, cell), 0.0);
        }
        for (_, p) in grid.marginal_rates().as_array() {
            assert!((p.mean - 75.0).abs() < 1e-9);
        }
        assert!(!grid.stopping_check(0.10).unwrap());

        let mixed = BeliefVector::new([0.2, 0.3, 0.5]).unwrap();
        let grid = RateGrid::init_flat(GridSpec::default(), &mixed).unwrap();
        for (a, b) in grid.marginal_states().probs().iter().zip(mixed.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_grid_relative_uncertainty() {
        // discrete uniform on n points over [0, 150]: sd = 150/(n−1)·sqrt((n²−1)/12)
        let n = 1001usize;
        // 1001³ cells exceed the cap; check the 1-D moments directly instead
        let grid = RateGrid::init_flat(
            GridSpec::uniform(0.0, 150.0, n).unwrap(),
            &BeliefVector::default(),
        );
        assert!(matches!(grid, Err(Error::CapExceeded { .. })));
        let axis = RateAxis::new(0.0, 150.0, n).unwrap();
        let m: Vec<(f64, f64)> = axis
            .values()
            .into_iter()
            .map(|r| (r, 1.0 / n as f64))
            .collect();
        let p = moments(&m);
        let sd = 150.0 / (n - 1) as f64 * (((n * n - 1) as f64) / 12.0).sqrt();
        assert!((p.rms - sd).abs() < 1e-9);
        assert!((p.rms / p.mean - 0.5774).abs() < 1e-3);
    }

    #[test]
    fn single_cell_grid() {
        let spec = GridSpec::single_cell(&TransitionRates::measured());
        let grid = RateGrid::init_flat(spec, &BeliefVector::default()).unwrap();
        let post = grid.marginal_rates();
        assert_eq!(
            post.r10,
            RatePosterior {
                mean: 50.0,
                rms: 0.0
            }
        );
        assert!(grid.stopping_check(0.10).unwrap());
    }

    #[test]
    fn zero_dt_uninformative_update_is_identity() {
        let spec = GridSpec::uniform(2.0, 150.0, 5).unwrap();
        let start = BeliefVector::new([0.2, 0.3, 0.5]).unwrap();
        let mut grid = RateGrid::init_flat(spec, &start).unwrap();
        let before = grid.joint.clone();
        let model = PhotonCountModel::uninformative(20.0, 1e-3).unwrap();
        grid.update(17, &model, 0.0).unwrap();
        for (a, b) in grid.joint.iter().zip(&before) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-14 * b[k]);
            }
        }
    }

    #[test]
    fn zero_mean_rate_axis_errors() {
        let spec = GridSpec {
            r21: RateAxis::point(0.0),
            r10: RateAxis::new(0.0, 10.0, 3).unwrap(),
            r_repump: RateAxis::point(5.0),
            max_cells: DEFAULT_MAX_CELLS,
        };
        let grid = RateGrid::init_flat(spec, &BeliefVector::default()).unwrap();
        // r21 has mean 0 with rms 0: not an error; r10 is still wide
        assert!(!grid.stopping_check(0.1).unwrap());
        let spec = GridSpec {
            r10: RateAxis::new(0.0, 0.0, 1).unwrap(),
            ..spec
        };
        let grid = RateGrid::init_flat(spec, &BeliefVector::default()).unwrap();
        assert!(grid.stopping_check(0.1).unwrap());
    }

    #[test]
    fn invalid_specs() {
        assert!(RateAxis::new(5.0, 5.0, 3).is_err());
        assert!(RateAxis::new(5.0, 6.0, 1).is_err());
        assert!(RateAxis::new(-1.0, 6.0, 3).is_err());
        let spec = GridSpec {
            max_cells: 100,
            ..GridSpec::default()
        };
        assert_eq!(
            RateGrid::init_flat(spec, &BeliefVector::default()).err(),
            Some(Error::CapExceeded {
                cells: 3 * 25 * 25 * 25,
                cap: 100
            })
        );
    }

    #[test]
    fn guard_applies_to_every_cell() {
        let mut grid = RateGrid::init_flat(GridSpec::default(), &BeliefVector::default()).unwrap();
        let model = PhotonCountModel::default_for_bin_time(3e-3).unwrap();
        assert!(matches!(
            grid.update(100, &model, 3e-3),
            Err(Error::GuardViolated { .. })
        ));
        let mut exact = grid.with_propagation(Propagation::Exact);
        exact.update(100, &model, 3e-3).unwrap();
    }

    #[test]
    fn cell_index_layout() {
        let spec = GridSpec {
            r21: RateAxis::new(1.0, 2.0, 2).unwrap(),
            r10: RateAxis::new(10.0, 30.0, 3).unwrap(),
            r_repump: RateAxis::new(100.0, 400.0, 4).unwrap(),
            max_cells: DEFAULT_MAX_CELLS,
        };
        let mut seen = std::collections::HashSet::new();
        for cell in 0..spec.n_rate_cells() {
            let r = spec.cell_rates(cell);
            seen.insert((r.r21 as i64, r.r10 as i64, r.r_repump as i64));
        }
        assert_eq!(seen.len(), 24);
        assert_eq!(spec.cell_rates(23).r_repump, 400.0);
    }
}
