use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};

/// Named parameter (or gradient) arrays, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet(BTreeMap<String, ArrayD<f64>>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from set"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.0
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from set"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.0.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.0.values().map(ArrayD::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        )
    }

    /// Parameters whose name starts with any of `prefixes` followed by a dot.
    pub fn subset(&self, prefixes: &[&str]) -> Self {
        Self(
            self.0
                .iter()
                .filter(|(k, _)| has_prefix(k, prefixes))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    /// `self += alpha * other`, over the names both sets share.
    pub fn add_scaled(&mut self, other: &ParamSet, alpha: f64) {
        for (name, value) in self.0.iter_mut() {
            if let Some(o) = other.0.get(name) {
                value.scaled_add(alpha, o);
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for value in self.0.values_mut() {
            value.mapv_inplace(|v| v * alpha);
        }
    }

    /// Euclidean norm over the parameters whose names match `prefixes`.
    pub fn norm_of(&self, prefixes: &[&str]) -> f64 {
        self.0
            .iter()
            .filter(|(k, _)| has_prefix(k, prefixes))
            .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute entry over the parameters whose names match `prefixes`.
    pub fn max_abs_of(&self, prefixes: &[&str]) -> f64 {
        self.0
            .iter()
            .filter(|(k, _)| has_prefix(k, prefixes))
            .flat_map(|(_, v)| v.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.0.len() != other.0.len() || self.0.keys().zip(other.0.keys()).any(|(a, b)| a != b) {
            let mine: Vec<_> = self.names().collect();
            let theirs: Vec<_> = other.names().collect();
            return Err(Error::Shape(format!("parameter names differ: {mine:?} vs {theirs:?}")));
        }
        for (name, value) in &self.0 {
            let o = &other.0[name];
            if value.shape() != o.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    o.shape(),
                    value.shape()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn has_prefix(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| {
        name.len() > p.len() && name.starts_with(p) && name.as_bytes()[p.len()] == b'.'
    })
}

impl FromIterator<(String, ArrayD<f64>)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, ArrayD<f64>)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}
