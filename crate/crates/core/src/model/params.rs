use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Shape, Tensor, Var};

/// Index of a parameter in a [`ParamLayout`] / [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He(usize),
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Names, shapes and initializers of every parameter of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.numel()).sum()
    }

    fn add(&mut self, name: String, shape: Shape, init: Init) -> ParamId {
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter name {name}"
        );
        self.specs.push(ParamSpec { name, shape, init });
        ParamId(self.specs.len() - 1)
    }

    pub fn conv(&mut self, name: &str, in_c: usize, out_c: usize, kernel: usize) -> ConvLayer {
        let fan_in = in_c * kernel * kernel;
        let weight = self.add(
            format!("{name}.weight"),
            Shape::new(out_c, in_c, kernel, kernel),
            Init::He(fan_in),
        );
        let bias = self.add(format!("{name}.bias"), Shape::new(1, out_c, 1, 1), Init::FanIn(fan_in));
        ConvLayer {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize, groups: usize, eps: f64) -> NormLayer {
        let gamma = self.add(format!("{name}.gamma"), Shape::new(1, channels, 1, 1), Init::Ones);
        let beta = self.add(format!("{name}.beta"), Shape::new(1, channels, 1, 1), Init::Zeros);
        NormLayer {
            gamma,
            beta,
            groups,
            eps,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut entries = IndexMap::with_capacity(self.specs.len());
        for spec in &self.specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::full(spec.shape, T::one()),
                Init::He(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let data = (0..spec.shape.numel()).map(|_| T::from_f64(normal.sample(rng))).collect();
                    Tensor::from_vec(spec.shape, data).expect("shape")
                }
                Init::FanIn(fan_in) => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let data = (0..spec.shape.numel())
                        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                        .collect();
                    Tensor::from_vec(spec.shape, data).expect("shape")
                }
            };
            entries.insert(spec.name.clone(), t);
        }
        ParamStore { entries }
    }
}

/// Named parameter tensors, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Checks that names and shapes match `layout` exactly, in order.
    pub fn check_layout(&self, layout: &ParamLayout) -> Result<()> {
        if self.len() != layout.len() {
            return Err(Error::invalid(format!(
                "parameter store has {} tensors, model expects {}",
                self.len(),
                layout.len()
            )));
        }
        for ((name, t), spec) in self.entries.iter().zip(layout.specs()) {
            if *name != spec.name || t.shape() != spec.shape {
                return Err(Error::invalid(format!(
                    "parameter `{name}` {} does not match expected `{}` {}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.values().map(|t| g.param(t.clone())).collect()
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.values().map(|t| g.constant(t.clone())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A convolution whose kernel and bias live in a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight.0], p[self.bias.0], self.stride, self.pad)
    }

    pub fn forward_act<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var, slope: T) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        Ok(g.leaky_relu(y, slope))
    }

    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel + self.out_c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl NormLayer {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        g.group_norm(x, p[self.gamma.0], p[self.beta.0], self.groups, T::from_f64(self.eps))
    }
}
