//! Self-paced schedule: pace thresholds, binary priorities and the two
//! selection regularizers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::Modality;
use crate::error::{MsrlError, Result};
use crate::relevance::RelevanceMatrixSet;

/// Initial value of both pace thresholds and of the group weight.
pub const INITIAL_PACE: f64 = 0.5;

/// Fixed constants of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConstants {
    pub tau: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub eta: f64,
    pub delta_margin: f64,
    /// Iterations between two schedule updates.
    pub update_period: usize,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        ScheduleConstants { tau: 0.1, mu1: 0.1, mu2: 0.1, eta: 1.1, delta_margin: 0.1, update_period: 1000 }
    }
}

impl ScheduleConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("mu1", self.mu1), ("mu2", self.mu2), ("eta", self.eta), ("delta_margin", self.delta_margin)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(MsrlError::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.update_period == 0 {
            return Err(MsrlError::validation("update_period must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    lambda1: f64,
    lambda2: f64,
    gamma: f64,
    constants: ScheduleConstants,
}

impl ScheduleState {
    pub fn new(constants: ScheduleConstants) -> Result<Self> {
        Self::with_values(INITIAL_PACE, INITIAL_PACE, INITIAL_PACE, constants)
    }

    pub fn with_values(lambda1: f64, lambda2: f64, gamma: f64, constants: ScheduleConstants) -> Result<Self> {
        constants.validate()?;
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2), ("gamma", gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MsrlError::validation(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(ScheduleState { lambda1, lambda2, gamma, constants })
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn constants(&self) -> &ScheduleConstants {
        &self.constants
    }

    /// `λ1` for visual entries, `λ2` for textual ones.
    pub fn lambda(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Visual => self.lambda1,
            Modality::Textual => self.lambda2,
        }
    }

    /// Selection threshold `λ_α + τγ`.
    pub fn threshold(&self, modality: Modality) -> f64 {
        self.lambda(modality) + self.constants.tau * self.gamma
    }

    pub fn is_update_step(&self, iteration: usize) -> bool {
        iteration > 0 && iteration.is_multiple_of(self.constants.update_period)
    }
}

/// Per-group binary selection matrices sharing the relevance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PrioritySet {
    selected: Vec<Array2<bool>>,
}

impl PrioritySet {
    /// Checks that no masked entry is selected.
    pub fn new(selected: Vec<Array2<bool>>, relevance: &RelevanceMatrixSet) -> Result<Self> {
        if selected.len() != relevance.n_groups() {
            return Err(MsrlError::Dimension { context: "priority groups", expected: relevance.n_groups(), got: selected.len() });
        }
        for (g, u) in selected.iter().enumerate() {
            if u.dim() != relevance.shape() {
                return Err(MsrlError::validation(format!("priority shape {:?} != relevance shape {:?}", u.dim(), relevance.shape())));
            }
            if u.iter().zip(relevance.mask(g).iter()).any(|(&s, &m)| s && !m) {
                return Err(MsrlError::validation(format!("group {g} selects a masked entry")));
            }
        }
        Ok(PrioritySet { selected })
    }

    /// Restores stored selections. Only shapes are checked, since the mask is
    /// not available without recomputing relevance.
    pub fn from_selected(selected: Vec<Array2<bool>>) -> Result<Self> {
        if let Some(first) = selected.first() {
            if let Some(bad) = selected.iter().find(|u| u.dim() != first.dim()) {
                return Err(MsrlError::validation(format!("priority shapes {:?} and {:?} differ", first.dim(), bad.dim())));
            }
        }
        Ok(PrioritySet { selected })
    }

    /// Every unmasked entry selected.
    pub fn all_unmasked(relevance: &RelevanceMatrixSet) -> Self {
        PrioritySet { selected: (0..relevance.n_groups()).map(|g| relevance.mask(g).clone()).collect() }
    }

    pub fn empty(n_groups: usize, shape: (usize, usize)) -> Self {
        PrioritySet { selected: vec![Array2::from_elem(shape, false); n_groups] }
    }

    pub fn n_groups(&self) -> usize {
        self.selected.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.selected.first().map_or((0, 0), |u| u.dim())
    }

    pub fn get(&self, g: usize, i: usize, j: usize) -> bool {
        self.selected[g][[i, j]]
    }

    pub fn group(&self, g: usize) -> &Array2<bool> {
        &self.selected[g]
    }

    /// Selected `(g, i, j)` in group-major, row-major order.
    pub fn selected(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.selected
            .iter()
            .enumerate()
            .flat_map(|(g, u)| u.indexed_iter().filter(|(_, &s)| s).map(move |((i, j), _)| (g, i, j)))
    }

    pub fn counts(&self) -> Vec<usize> {
        self.selected.iter().map(|u| u.iter().filter(|&&s| s).count()).collect()
    }
}

/// Binary priorities: `U_ij = 1` iff the entry is unmasked and
/// `R_ij < λ_α + τγ`.
pub fn update_priorities(relevance: &RelevanceMatrixSet, state: &ScheduleState) -> PrioritySet {
    select_below(relevance, |m| state.threshold(m))
}

/// Selects every unmasked entry strictly below its modality's threshold.
pub fn select_below(relevance: &RelevanceMatrixSet, threshold: impl Fn(Modality) -> f64) -> PrioritySet {
    let thresholds: Vec<f64> = relevance.modalities().iter().map(|&m| threshold(m)).collect();
    let (m, m_neg) = relevance.shape();
    let selected = (0..relevance.n_groups())
        .map(|g| Array2::from_shape_fn((m, m_neg), |(i, j)| relevance.get(g, i, j).is_some_and(|r| r < thresholds[j])))
        .collect();
    PrioritySet { selected }
}

/// Raises each pace threshold by `μ/(M M')` times the summed counter-relevance
/// of its own modality, capped at 1.
pub fn update_lambda(state: &ScheduleState, relevance: &RelevanceMatrixSet, m: usize, m_neg: usize) -> ScheduleState {
    let (visual, textual) = relevance.fold_unmasked((0.0, 0.0), |(v, t), _, _, j, r| {
        let counter = (1.0 - r).max(0.0);
        match relevance.modality(j) {
            Modality::Visual => (v + counter, t),
            Modality::Textual => (v, t + counter),
        }
    });
    let scale = (m * m_neg) as f64;
    let c = state.constants;
    ScheduleState {
        lambda1: (state.lambda1 + c.mu1 / scale * visual).min(1.0),
        lambda2: (state.lambda2 + c.mu2 / scale * textual).min(1.0),
        ..*state
    }
}

pub fn update_gamma(state: &ScheduleState) -> ScheduleState {
    ScheduleState { gamma: (state.constants.eta * state.gamma).min(1.0), ..*state }
}

/// Number of selected pairs.
pub fn l1_norm(u: &PrioritySet) -> f64 {
    u.counts().iter().sum::<usize>() as f64
}

/// `Σ_g sqrt(count_g)`, the sum of per-group Frobenius norms.
pub fn group_frobenius_norm(u: &PrioritySet) -> f64 {
    u.counts().iter().map(|&c| (c as f64).sqrt()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(values: Array2<f64>, modality: Modality) -> RelevanceMatrixSet {
        let mask = values.mapv(|_| true);
        let cols = values.ncols();
        RelevanceMatrixSet::from_parts(vec![values], vec![mask], vec![modality; cols]).unwrap()
    }

    fn state() -> ScheduleState {
        ScheduleState::new(ScheduleConstants::default()).unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        let r = single(array![[0.54, 0.55, 0.56]], Modality::Visual);
        let u = update_priorities(&r, &state());
        assert_eq!(u.group(0), &array![[true, false, false]]);
    }

    #[test]
    fn masked_entries_never_selected() {
        let r = RelevanceMatrixSet::from_parts(
            vec![array![[0.0, 0.0]]],
            vec![array![[true, false]]],
            vec![Modality::Textual; 2],
        )
        .unwrap();
        let u = update_priorities(&r, &state());
        assert!(u.get(0, 0, 0) && !u.get(0, 0, 1));
        assert!(PrioritySet::new(vec![array![[true, true]]], &r).is_err());
    }

    #[test]
    fn lambda_updates_by_modality() {
        let r = single(array![[0.2, 0.4], [0.6, 0.8]], Modality::Visual);
        let next = update_lambda(&state(), &r, 2, 2);
        assert!((next.lambda1() - 0.55).abs() < 1e-15);
        assert_eq!(next.lambda2(), 0.5);
        let ones = single(Array2::ones((2, 2)), Modality::Textual);
        assert_eq!(update_lambda(&state(), &ones, 2, 2), state());
        let near = ScheduleState::with_values(0.99, 0.5, 0.5, ScheduleConstants::default()).unwrap();
        let big = single(Array2::zeros((2, 2)), Modality::Visual);
        assert_eq!(update_lambda(&near, &big, 1, 1).lambda1(), 1.0);
    }

    #[test]
    fn gamma_geometric_then_capped() {
        let mut s = state();
        s = update_gamma(&s);
        assert!((s.gamma() - 0.55).abs() < 1e-15);
        for _ in 1..8 {
            s = update_gamma(&s);
        }
        assert_eq!(s.gamma(), 1.0);
        assert_eq!(update_gamma(&s).gamma(), 1.0);
    }

    #[test]
    fn norm_examples() {
        let u = PrioritySet { selected: vec![Array2::from_elem((2, 2), true), Array2::from_elem((2, 2), false)] };
        assert_eq!(l1_norm(&u), 4.0);
        assert_eq!(group_frobenius_norm(&u), 2.0);
        let v = PrioritySet { selected: vec![array![[true, true], [false, false]], array![[false, true], [true, false]]] };
        assert!((group_frobenius_norm(&v) - 2.0 * 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l1_norm(&PrioritySet::empty(2, (2, 3))), 0.0);
    }

    #[test]
    fn rejects_out_of_range_state() {
        assert!(ScheduleState::with_values(1.2, 0.5, 0.5, ScheduleConstants::default()).is_err());
        let bad = ScheduleConstants { update_period: 0, ..Default::default() };
        assert!(ScheduleState::new(bad).is_err());
    }
}
