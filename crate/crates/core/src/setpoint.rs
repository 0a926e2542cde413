//! Stacked active/reactive setpoints for the controllable units.

use std::ops::{Index, IndexMut};

/// Setpoints `(P_0, Q_0, P_1, Q_1, ...)` in per-unit, one pair per
/// controllable unit, in device-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct SetpointVector(Vec<f64>);

impl SetpointVector {
    pub fn zeros(units: usize) -> Self {
        Self(vec![0.0; 2 * units])
    }

    /// Panics if `values` has odd length.
    pub fn from_vec(values: Vec<f64>) -> Self {
        assert!(values.len() % 2 == 0, "setpoint vector must hold (P, Q) pairs");
        Self(values)
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self(pairs.iter().flat_map(|&(p, q)| [p, q]).collect())
    }

    pub fn units(&self) -> usize {
        self.0.len() / 2
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn p(&self, unit: usize) -> f64 {
        self.0[2 * unit]
    }

    pub fn q(&self, unit: usize) -> f64 {
        self.0[2 * unit + 1]
    }

    pub fn set_p(&mut self, unit: usize, value: f64) {
        self.0[2 * unit] = value;
    }

    pub fn set_q(&mut self, unit: usize, value: f64) {
        self.0[2 * unit + 1] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<usize> for SetpointVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

impl IndexMut<usize> for SetpointVector {
    fn index_mut(&mut self, index: usize) -> &mut f64 {
        &mut self.0[index]
    }
}
