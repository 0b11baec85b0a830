use std::collections::BTreeMap;

use ndarray::Array2;

use crate::arrayfile::ArrayFile;
use crate::error::{Error, Result};

/// Named float64 matrices. Names are unique and shapes are fixed once inserted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Precondition(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    /// Replaces the value of an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Precondition(format!("unknown parameter `{name}`")))?;
        if slot.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "parameter `{name}` is {:?}, got {:?}",
                slot.dim(),
                value.dim()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|a| a.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.dim() == b.dim())
    }

    pub fn check_layout(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what} does not mirror the parameter layout")))
        }
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().flatten().map(|x| x * x).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.tensors.values_mut() {
            v.mapv_inplace(|x| x * factor);
        }
    }

    pub fn write_into(&self, file: &mut ArrayFile, prefix: &str) {
        for (name, v) in &self.tensors {
            file.insert(format!("{prefix}{name}"), v.clone());
        }
    }

    /// Collects every array whose name starts with `prefix`, stripping it.
    pub fn read_from(file: &ArrayFile, prefix: &str) -> ParamSet {
        let tensors = file
            .arrays
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect();
        ParamSet { tensors }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn names_are_unique_and_shapes_fixed() {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0, 2.0]]).unwrap();
        assert!(p.insert("w", array![[0.0]]).is_err());
        assert!(matches!(p.set("w", array![[1.0]]), Err(Error::Shape(_))));
        p.set("w", array![[3.0, 4.0]]).unwrap();
        assert_eq!(p.get("w").unwrap(), &array![[3.0, 4.0]]);
    }
}
