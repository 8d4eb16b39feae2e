use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub const EMBED: &str = "embed";
pub const CLASSIFIER_HEAD: &str = "classifier_head";
pub const DECODER_CORE: &str = "decoder_core";
pub const DECODER_OUTPUT: &str = "decoder_output";

pub fn block_group(l: usize) -> String {
    format!("block_{l}")
}

/// Parses `block_<l>` into its 1-based index.
pub fn parse_block_group(name: &str) -> Option<usize> {
    name.strip_prefix("block_")?.parse().ok().filter(|&l| l >= 1)
}

/// All group names for a `k`-block model, in storage order.
pub fn group_names(k: usize) -> Vec<String> {
    (1..=k)
        .map(block_group)
        .chain([EMBED, CLASSIFIER_HEAD, DECODER_CORE, DECODER_OUTPUT].map(String::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            data: vec![T::zero(); n],
        }
    }

    /// Length of one leading-axis row.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup<T> {
    pub name: String,
    pub tensors: Vec<Tensor<T>>,
}

/// Named parameter groups in fixed order (see [`group_names`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub groups: Vec<ParamGroup<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup {
                    name: g.name.clone(),
                    tensors: g
                        .tensors
                        .iter()
                        .map(|t| Tensor::zeros(&t.name, t.shape.clone()))
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup<T>> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup<T>> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.groups
            .iter()
            .flat_map(|g| &g.tensors)
            .map(|t| t.data.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `self += other`, elementwise in storage order.
    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, &y)| *x = *x + y);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = *x * s);
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.groups.iter().flat_map(|g| g.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.groups.iter_mut().flat_map(|g| g.tensors.iter_mut())
    }

    /// Flat view across all tensors, used by gradient checks.
    pub fn flat(&self) -> Vec<T> {
        self.tensors().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn flat_get_mut(&mut self, mut index: usize) -> Option<&mut T> {
        for t in self.tensors_mut() {
            if index < t.data.len() {
                return t.data.get_mut(index);
            }
            index -= t.data.len();
        }
        None
    }

    /// Bit patterns of a group's parameters, for identity checks.
    pub fn group_bits(&self, name: &str) -> Option<Vec<u64>> {
        self.group(name).map(|g| {
            g.tensors
                .iter()
                .flat_map(|t| t.data.iter().map(|v| v.to_f64_lossless().to_bits()))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_parsing() {
        assert_eq!(group_names(2), vec![
            "block_1",
            "block_2",
            "embed",
            "classifier_head",
            "decoder_core",
            "decoder_output"
        ]);
        assert_eq!(parse_block_group("block_5"), Some(5));
        assert_eq!(parse_block_group("block_0"), None);
        assert_eq!(parse_block_group("embed"), None);
    }
}
