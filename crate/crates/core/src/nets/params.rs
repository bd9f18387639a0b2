//! Named parameters and their binding onto a tape.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const GROUP_ENC2D: &str = "enc2d";
pub const GROUP_DEC2D: &str = "dec2d";
pub const GROUP_FUSION: &str = "fusion";
pub const GROUP_ENC3D: &str = "enc3d";
pub const GROUP_DEC3D: &str = "dec3d";

/// Groups needed to run the 3D branch alone.
pub const GROUPS_3D: [&str; 2] = [GROUP_ENC3D, GROUP_DEC3D];
/// Groups that exist only for training with the image branch.
pub const GROUPS_TRAINING_ONLY: [&str; 3] = [GROUP_ENC2D, GROUP_DEC2D, GROUP_FUSION];

/// Leading component of a dotted parameter name.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Parameter values keyed by dotted name (`group.scale.layer.{w,b}`).
///
/// Iteration is in name order, which fixes the layout of flattened vectors
/// and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Equal when names, shapes and values all match exactly.
impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape() && a.data() == b.data())
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value.detach());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.names().any(|n| group_of(n) == group)
    }

    /// Copy restricted to parameters whose group is listed.
    pub fn subset(&self, groups: &[&str]) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| groups.contains(&group_of(k)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// All values concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inserts a `fan_in × fan_out` weight and `fan_out` bias, both drawn
    /// from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let w = draw(fan_in * fan_out);
        self.insert(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("shape matches"));
        if bias {
            let b = draw(fan_out);
            self.insert(format!("{prefix}.b"), Tensor::new(vec![fan_out], b).expect("shape matches"));
        }
    }

    /// Replaces a parameter's values keeping its shape.
    pub fn set_values(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let shape = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .shape()
            .to_vec();
        self.params.insert(name.to_string(), Tensor::new(shape, values)?);
        Ok(())
    }

    /// Sets every listed parameter (matched by exact name or `prefix.`) to zero.
    pub fn zero(&mut self, prefixes: &[&str]) {
        for (name, t) in self.params.iter_mut() {
            if prefixes.iter().any(|p| name == p || name.starts_with(&format!("{p}."))) {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
    }
}

/// Parameter source for one forward pass.
///
/// In training mode every parameter becomes a leaf on the tape the first
/// time it is requested; in inference mode parameters are plain constants.
/// Every request is counted per group, which lets callers prove that a pass
/// never touched a given part of the model.
pub struct Binder<'a> {
    store: &'a ParamStore,
    tape: Option<Tape>,
    bound: RefCell<BTreeMap<String, Tensor>>,
    access: RefCell<BTreeMap<String, usize>>,
}

impl<'a> Binder<'a> {
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            store,
            tape: None,
            bound: RefCell::default(),
            access: RefCell::default(),
        }
    }

    pub fn training(store: &'a ParamStore, tape: &Tape) -> Self {
        Self {
            tape: Some(tape.clone()),
            ..Self::inference(store)
        }
    }

    /// Binds every parameter to a slice of `flat`, a vector laid out as
    /// [`ParamStore::flatten`]. Gradients with respect to `flat` then cover
    /// the whole model, which is what a whole-model gradient check needs.
    pub fn from_flat(store: &'a ParamStore, flat: &Tensor) -> Result<Self> {
        if flat.len() != store.num_values() {
            return Err(Error::len_mismatch("Binder::from_flat", store.num_values(), flat.len()));
        }
        let column = flat.reshape(vec![flat.len(), 1])?;
        let mut bound = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in store.iter() {
            let rows: Vec<usize> = (offset..offset + t.len()).collect();
            offset += t.len();
            bound.insert(name.to_string(), column.gather_rows(&rows)?.reshape(t.shape().to_vec())?);
        }
        Ok(Self {
            bound: RefCell::new(bound),
            ..Self::inference(store)
        })
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Tensor> {
        *self.access.borrow_mut().entry(group_of(name).to_string()).or_default() += 1;
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("model has no parameter `{name}`")))?;
        let t = match &self.tape {
            Some(tape) => tape.leaf(value),
            None => value.clone(),
        };
        self.bound.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Number of parameter requests made so far for `group`.
    pub fn accesses(&self, group: &str) -> usize {
        self.access.borrow().get(group).copied().unwrap_or(0)
    }

    pub fn access_counts(&self) -> BTreeMap<String, usize> {
        self.access.borrow().clone()
    }

    /// Gradient per requested parameter after `backward`; parameters that
    /// received none map to zeros.
    pub fn gradients(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, t)| (name.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.len()])))
            .collect()
    }
}

/// `x · W + b` using parameters `{prefix}.w` and, if present, `{prefix}.b`.
pub fn linear(binder: &Binder, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let y = x.matmul(&binder.param(&format!("{prefix}.w"))?)?;
    let bias = format!("{prefix}.b");
    if binder.store().contains(&bias) {
        y.add(&binder.param(&bias)?)
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = SplitRng::seed(0);
        s.init_linear("enc3d.s1.fc1", 3, 2, true, &mut rng);
        s.init_linear("fusion.s1.gate", 2, 2, false, &mut rng);
        s
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let s = store();
        let bound = 1.0 / 3f64.sqrt();
        assert!(s.get("enc3d.s1.fc1.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(s.get("enc3d.s1.fc1.b").unwrap().shape(), &[2]);
        assert!(!s.contains("fusion.s1.gate.b"));
    }

    #[test]
    fn access_is_counted_per_group() {
        let s = store();
        let b = Binder::inference(&s);
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        linear(&b, "enc3d.s1.fc1", &x).unwrap();
        assert_eq!(b.accesses(GROUP_ENC3D), 2);
        assert_eq!(b.accesses(GROUP_FUSION), 0);
    }

    #[test]
    fn subset_keeps_only_listed_groups() {
        let s = store().subset(&GROUPS_3D);
        assert_eq!(s.len(), 2);
        assert!(!s.has_group(GROUP_FUSION));
    }

    #[test]
    fn flat_binding_matches_store_values() {
        let s = store();
        let flat = Tensor::new(vec![s.num_values()], s.flatten()).unwrap();
        let b = Binder::from_flat(&s, &flat).unwrap();
        for (name, t) in s.iter() {
            assert_eq!(b.param(name).unwrap().data(), t.data());
        }
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let s = store();
        assert!(Binder::inference(&s).param("dec3d.cls.w").is_err());
    }
}
