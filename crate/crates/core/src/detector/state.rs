//! Named parameter collection of the detector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::arch::{ArchDescriptor, ArchError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    BnAffine,
    /// Running mean / variance: never touched by the optimizer.
    BnStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnStat)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("parameter `{0}` not found")]
    Missing(String),
    #[error("parameter `{name}`: shape {expected:?} expected, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter layouts differ at entry {index}: `{left}` vs `{right}`")]
    Layout { index: usize, left: String, right: String },
    #[error(transparent)]
    Arch(#[from] ArchError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<R = f32> {
    arch: ArchDescriptor,
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor<R>>,
}

/// One entry per parameter of a [`ModelState`], same order and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<R = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

/// (name, kind, shape, init std) in canonical order.
fn layout(arch: &ArchDescriptor) -> Vec<(String, ParamKind, Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut c_in = arch.input_channels;
    for (i, &c) in arch.backbone_channels.iter().enumerate() {
        let fan_in = (c_in * 9) as f64;
        out.push((format!("backbone.{i}.conv.weight"), ParamKind::Weight, vec![c, c_in, 3, 3], (2.0 / fan_in).sqrt()));
        out.push((format!("backbone.{i}.conv.bias"), ParamKind::Weight, vec![c], 0.0));
        out.push((format!("backbone.{i}.bn.gamma"), ParamKind::BnAffine, vec![c], 0.0));
        out.push((format!("backbone.{i}.bn.beta"), ParamKind::BnAffine, vec![c], 0.0));
        out.push((format!("backbone.{i}.bn.running_mean"), ParamKind::BnStat, vec![c], 0.0));
        out.push((format!("backbone.{i}.bn.running_var"), ParamKind::BnStat, vec![c], 0.0));
        c_in = c;
    }
    let a = arch.anchors_per_cell();
    let rc = arch.rpn_channels;
    out.push(("rpn.conv.weight".into(), ParamKind::Weight, vec![rc, c_in, 3, 3], (2.0 / (c_in * 9) as f64).sqrt()));
    out.push(("rpn.conv.bias".into(), ParamKind::Weight, vec![rc], 0.0));
    out.push(("rpn.cls.weight".into(), ParamKind::Weight, vec![2 * a, rc, 1, 1], 0.01));
    out.push(("rpn.cls.bias".into(), ParamKind::Weight, vec![2 * a], 0.0));
    out.push(("rpn.reg.weight".into(), ParamKind::Weight, vec![4 * a, rc, 1, 1], 0.01));
    out.push(("rpn.reg.bias".into(), ParamKind::Weight, vec![4 * a], 0.0));
    let pooled = c_in * arch.roi_pool_size * arch.roi_pool_size;
    let h = arch.roi_hidden;
    let k = arch.num_classes;
    out.push(("roi.fc1.weight".into(), ParamKind::Weight, vec![h, pooled], (2.0 / pooled as f64).sqrt()));
    out.push(("roi.fc1.bias".into(), ParamKind::Weight, vec![h], 0.0));
    out.push(("roi.fc2.weight".into(), ParamKind::Weight, vec![h, h], (2.0 / h as f64).sqrt()));
    out.push(("roi.fc2.bias".into(), ParamKind::Weight, vec![h], 0.0));
    out.push(("roi.cls.weight".into(), ParamKind::Weight, vec![k + 1, h], 0.01));
    out.push(("roi.cls.bias".into(), ParamKind::Weight, vec![k + 1], 0.0));
    out.push(("roi.reg.weight".into(), ParamKind::Weight, vec![4 * k, h], 0.001));
    out.push(("roi.reg.bias".into(), ParamKind::Weight, vec![4 * k], 0.0));
    out
}

impl<R: Real> ModelState<R> {
    /// Fresh parameters: He-normal convolutions and hidden layers, small
    /// normal heads, zero biases, identity batch norm.
    pub fn init(arch: &ArchDescriptor, rng: &mut impl Rng) -> Result<Self, StateError> {
        arch.validate()?;
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        let mut tensors = Vec::new();
        for (name, kind, shape, std) in layout(arch) {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with("gamma") || name.ends_with("running_var") {
                t.fill(R::ONE);
            } else if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("positive std");
                t.data_mut().iter_mut().for_each(|v| *v = R::from_f64(normal.sample(rng)));
            }
            names.push(name);
            kinds.push(kind);
            tensors.push(t);
        }
        Ok(Self {
            arch: arch.clone(),
            names,
            kinds,
            tensors,
        })
    }

    /// Rebuilds a state from named arrays, checking them against `arch`.
    pub fn from_named(arch: &ArchDescriptor, mut arrays: Vec<(String, Tensor<R>)>) -> Result<Self, StateError> {
        arch.validate()?;
        let spec = layout(arch);
        let mut names = Vec::with_capacity(spec.len());
        let mut kinds = Vec::with_capacity(spec.len());
        let mut tensors = Vec::with_capacity(spec.len());
        for (name, kind, shape, _) in spec {
            let pos = arrays.iter().position(|(n, _)| *n == name).ok_or_else(|| StateError::Missing(name.clone()))?;
            let (_, t) = arrays.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(StateError::Shape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            names.push(name);
            kinds.push(kind);
            tensors.push(t);
        }
        if let Some((extra, _)) = arrays.first() {
            return Err(StateError::Missing(format!("unexpected extra array `{extra}`")));
        }
        Ok(Self {
            arch: arch.clone(),
            names,
            kinds,
            tensors,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.kinds
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<R>)> {
        self.names.iter().zip(&self.kinds).zip(&self.tensors).map(|((n, &k), t)| (n.as_str(), k, t))
    }

    pub fn index_of(&self, name: &str) -> Result<usize, StateError> {
        self.names.iter().position(|n| n == name).ok_or_else(|| StateError::Missing(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>, StateError> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<R>, StateError> {
        let i = self.index_of(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn num_bn_layers(&self) -> usize {
        self.arch.backbone_channels.len()
    }

    pub fn cast<S: Real>(&self) -> ModelState<S> {
        ModelState {
            arch: self.arch.clone(),
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Fails unless `other` has the same names, kinds and shapes in order.
    pub fn check_compatible(&self, other: &ModelState<R>) -> Result<(), StateError> {
        if self.names.len() != other.names.len() {
            return Err(StateError::Layout {
                index: self.names.len().min(other.names.len()),
                left: format!("{} entries", self.names.len()),
                right: format!("{} entries", other.names.len()),
            });
        }
        for (i, (a, b)) in self.names.iter().zip(&other.names).enumerate() {
            if a != b || self.kinds[i] != other.kinds[i] {
                return Err(StateError::Layout {
                    index: i,
                    left: a.clone(),
                    right: b.clone(),
                });
            }
            if self.tensors[i].shape() != other.tensors[i].shape() {
                return Err(StateError::Shape {
                    name: a.clone(),
                    expected: self.tensors[i].shape().to_vec(),
                    found: other.tensors[i].shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// True when every entry not of kind [`ParamKind::BnStat`] is bitwise equal.
    pub fn same_non_statistics(&self, other: &ModelState<R>) -> bool
    where
        R: PartialEq,
    {
        self.check_compatible(other).is_ok()
            && self
                .kinds
                .iter()
                .zip(self.tensors.iter().zip(&other.tensors))
                .filter(|(k, _)| **k != ParamKind::BnStat)
                .all(|(_, (a, b))| bitwise_eq(a.data(), b.data()))
    }
}

pub(crate) fn bitwise_eq<R: Real>(a: &[R], b: &[R]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
}

impl<R: Real> Grads<R> {
    pub fn zeros_like(state: &ModelState<R>) -> Self {
        Self {
            names: state.names.clone(),
            tensors: state.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<R>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub(crate) fn slot(&mut self, index: usize) -> &mut Tensor<R> {
        &mut self.tensors[index]
    }

    pub fn check_finite(&self) -> Result<(), (String, usize)> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                return Err((n.clone(), i));
            }
        }
        Ok(())
    }
}
