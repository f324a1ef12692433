//! Named parameter storage partitioned into backbone, prediction-head and
//! projection-head groups.

use std::fmt;

use ndarray::{ArrayD, Zip};

use super::Real;

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// θ_f
    Backbone,
    /// θ_g
    Prediction,
    /// θ_h
    Projection,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Backbone, ParamGroup::Prediction, ParamGroup::Projection];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "f",
            ParamGroup::Prediction => "g",
            ParamGroup::Projection => "h",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Index of a parameter in a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<T>,
}

/// Every trainable tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamVector<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, group: ParamGroup, value: ArrayD<T>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn group_numel(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// ‖θ_group‖².
    pub fn squared_norm(&self, group: ParamGroup) -> T {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.iter().map(|&v| v * v).sum::<T>())
            .sum()
    }

    /// Scalar `index` of the flattened vector (parameters in order, row-major).
    pub fn flat_get(&self, mut index: usize) -> T {
        for p in &self.params {
            if index < p.value.len() {
                return *p.value.iter().nth(index).unwrap();
            }
            index -= p.value.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_set(&mut self, mut index: usize, v: T) {
        for p in &mut self.params {
            if index < p.value.len() {
                *p.value.iter_mut().nth(index).unwrap() = v;
                return;
            }
            index -= p.value.len();
        }
        panic!("flat index out of range")
    }

    /// Group of scalar `index` of the flattened vector.
    pub fn flat_group(&self, mut index: usize) -> ParamGroup {
        for p in &self.params {
            if index < p.value.len() {
                return p.group;
            }
            index -= p.value.len();
        }
        panic!("flat index out of range")
    }

    pub fn zeros_like(&self) -> Gradients<T> {
        Gradients {
            tensors: self.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    /// Same names, groups and shapes.
    pub fn same_layout<U: Real>(&self, other: &ParamVector<U>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.value.shape() == b.value.shape())
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.mapv(|v| U::from(v).unwrap()),
                })
                .collect(),
        }
    }

    /// Order-sensitive hash of the exact bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.iter() {
                let bits = v.to_f64().unwrap().to_bits();
                h = (h ^ bits).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

impl<T: Real> Default for ParamVector<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient tensors, index-aligned with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<ArrayD<T>>,
}

impl<T: Real> Gradients<T> {
    /// `self += scale · params`.
    pub fn add_scaled_params(&mut self, params: &ParamVector<T>, scale: T) {
        for (g, p) in self.tensors.iter_mut().zip(params.iter()) {
            Zip::from(g).and(&p.value).for_each(|g, &v| *g += scale * v);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.tensors {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn add(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> T {
        self.tensors
            .iter()
            .map(|g| g.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    /// L2 norm of the gradient restricted to one group.
    pub fn group_norm(&self, params: &ParamVector<T>, group: ParamGroup) -> T {
        self.tensors
            .iter()
            .zip(params.iter())
            .filter(|(_, p)| p.group == group)
            .map(|(g, _)| g.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn flat_get(&self, mut index: usize) -> T {
        for g in &self.tensors {
            if index < g.len() {
                return *g.iter().nth(index).unwrap();
            }
            index -= g.len();
        }
        panic!("flat index out of range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn small() -> ParamVector<f64> {
        let mut p = ParamVector::new();
        p.push("f.a".into(), ParamGroup::Backbone, ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        p.push("g.w".into(), ParamGroup::Prediction, ArrayD::from_elem(IxDyn(&[3]), 2.0));
        p.push("h.w".into(), ParamGroup::Projection, ArrayD::from_elem(IxDyn(&[1]), -1.0));
        p
    }

    #[test]
    fn flat_indexing_walks_parameters_in_order() {
        let mut p = small();
        assert_eq!(p.numel(), 8);
        assert_eq!(p.flat_get(3), 1.0);
        assert_eq!(p.flat_get(4), 2.0);
        assert_eq!(p.flat_get(7), -1.0);
        assert_eq!(p.flat_group(5), ParamGroup::Prediction);
        p.flat_set(7, 5.0);
        assert_eq!(p.get(ParamId(2))[[0]], 5.0);
    }

    #[test]
    fn group_norms() {
        let p = small();
        assert_eq!(p.squared_norm(ParamGroup::Backbone), 4.0);
        assert_eq!(p.squared_norm(ParamGroup::Prediction), 12.0);
        assert_eq!(p.squared_norm(ParamGroup::Projection), 1.0);
        let mut g = p.zeros_like();
        g.add_scaled_params(&p, 0.5);
        assert_eq!(g.flat_get(4), 1.0);
        assert!((g.norm() - (17.0f64 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut p = small();
        p.push("f.a".into(), ParamGroup::Backbone, ArrayD::zeros(IxDyn(&[1])));
    }
}
