use crate::error::{Error, Result};

use super::params::{has_prefix, ParamSet};

/// `shadow <- m * shadow + (1 - m) * student`, elementwise over every shadow
/// parameter. The student must hold each of those names with the same shape.
pub fn momentum_update(student: &ParamSet, shadow: &mut ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum must lie in [0, 1], got {m}")));
    }
    for (name, value) in shadow.iter_mut() {
        let src = student
            .try_get(name)
            .ok_or_else(|| Error::Shape(format!("student has no parameter `{name}`")))?;
        if src.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}`: student {:?} vs shadow {:?}",
                src.shape(),
                value.shape()
            )));
        }
        value.zip_mut_with(src, |s, &q| *s = m * *s + (1.0 - m) * q);
    }
    Ok(())
}

/// Slowly updated copy of the sub-networks that produce appearance keys.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumEncoder {
    pub params: ParamSet,
    pub momentum: f64,
    prefixes: Vec<String>,
}

impl MomentumEncoder {
    /// Start as an exact copy of the student's parameters under `prefixes`.
    pub fn new(student: &ParamSet, prefixes: &[&str], momentum: f64) -> Self {
        Self {
            params: student.subset(prefixes),
            momentum,
            prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
        }
    }

    pub fn prefixes(&self) -> Vec<&str> {
        self.prefixes.iter().map(String::as_str).collect()
    }

    pub fn covers(&self, name: &str) -> bool {
        has_prefix(name, &self.prefixes())
    }

    pub fn update(&mut self, student: &ParamSet) -> Result<()> {
        momentum_update(student, &mut self.params, self.momentum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("f_l.0.weight", ArrayD::from_elem(IxDyn(&[2]), v));
        p
    }

    #[test]
    fn recurrence_examples() {
        let student = single(0.0);
        let mut shadow = single(1.0);
        momentum_update(&student, &mut shadow, 0.999).unwrap();
        assert!((shadow.get("f_l.0.weight")[0] - 0.999).abs() < 1e-15);

        let mut frozen = single(0.3);
        momentum_update(&single(5.0), &mut frozen, 1.0).unwrap();
        assert_eq!(frozen, single(0.3));

        let mut copied = single(0.3);
        momentum_update(&single(5.0), &mut copied, 0.0).unwrap();
        assert_eq!(copied, single(5.0));
    }

    #[test]
    fn closed_form_over_many_steps() {
        let (s0, q, m) = (2.0, -0.5, 0.9);
        let mut shadow = single(s0);
        for k in 1..=100 {
            momentum_update(&single(q), &mut shadow, m).unwrap();
            let expect = q + (s0 - q) * m.powi(k);
            assert!((shadow.get("f_l.0.weight")[0] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut shadow = single(1.0);
        let mut other = ParamSet::new();
        other.insert("f_l.0.weight", ArrayD::zeros(IxDyn(&[3])));
        assert!(momentum_update(&other, &mut shadow, 0.5).is_err());
        assert!(momentum_update(&ParamSet::new(), &mut shadow, 0.5).is_err());
    }

    #[test]
    fn encoder_tracks_only_its_prefixes() {
        let mut student = single(1.0);
        student.insert("h_h.0.weight", ArrayD::zeros(IxDyn(&[1])));
        let enc = MomentumEncoder::new(&student, &["f_l"], 0.99);
        assert_eq!(enc.params.len(), 1);
        assert!(enc.covers("f_l.0.weight"));
        assert!(!enc.covers("h_h.0.weight"));
    }
}
