//! Parameter storage and the small layers everything else is assembled from.

use rand::Rng;

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// The shared convolutional patch embedder.
    Embedder,
    /// Attention layers, rectification and fusion.
    Main,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Embedder => "embedder",
            ParamGroup::Main => "main",
        }
    }
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: current.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Puts every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] placed on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Registers parameters under a common name prefix.
pub struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
    group: ParamGroup,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group: ParamGroup::Main,
        }
    }

    /// Runs `f` with `name` appended to the prefix and `group` applied.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn with_group<T>(&mut self, group: ParamGroup, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.group;
        self.group = group;
        let out = f(self);
        self.group = saved;
        out
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, value, self.group)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }
}

/// `y = x·W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, input: usize, output: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.normal("weight", &[input, output], (1.0 / input as f64).sqrt()),
            bias: b.zeros("bias", &[output]),
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.matmul(&p[self.weight])?.add(&p[self.bias])
    }
}

/// Normalization over the last axis of an `N×D` input.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| Self {
            gain: b.ones("gain", &[dim]),
            shift: b.zeros("shift", &[dim]),
        })
    }

    /// Like [`LayerNorm::new`] with every gain entry set to `gain`.
    pub fn with_gain<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, gain: f64) -> Self {
        b.scoped(name, |b| Self {
            gain: b.add("gain", Tensor::full(&[dim], gain)),
            shift: b.zeros("shift", &[dim]),
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        layer_norm(x, &p[self.gain], &p[self.shift])
    }
}

pub fn layer_norm(x: &Var, gain: &Var, shift: &Var) -> Result<Var> {
    let axis = x.shape().len() - 1;
    let centered = x.sub(&x.mean_axis(axis, true)?)?;
    let var = centered.square().mean_axis(axis, true)?;
    let normed = centered.div(&var.add_scalar(LAYER_NORM_EPS).sqrt()?)?;
    normed.mul(gain)?.add(shift)
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        b.scoped(name, |b| Self {
            fc1: Linear::new(b, "fc1", input, hidden),
            fc2: Linear::new(b, "fc2", hidden, output),
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let h = self.fc1.forward(p, x)?.gelu();
        self.fc2.forward(p, &h)
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, input: usize, output: usize, geom: ConvGeometry) -> Self {
        let fan_in = input * geom.kernel * geom.kernel;
        b.scoped(name, |b| Self {
            weight: b.normal(
                "weight",
                &[output, input, geom.kernel, geom.kernel],
                (2.0 / fan_in as f64).sqrt(),
            ),
            bias: b.zeros("bias", &[output]),
            geom,
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.conv2d(&p[self.weight], &p[self.bias], self.geom)
    }
}

/// Transposed convolution with kernel equal to stride (exact upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub factor: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, input: usize, output: usize, factor: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.normal("weight", &[input, output, factor, factor], (1.0 / input as f64).sqrt()),
            bias: b.zeros("bias", &[output]),
            factor,
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.conv_transpose2d(&p[self.weight], &p[self.bias], self.factor, self.factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_standardizes_rows() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 4], vec![1., 2., 3., 4., -1., 0., 5., 9.]).unwrap());
        let y = layer_norm(
            &x,
            &tape.constant(Tensor::ones(&[4])),
            &tape.constant(Tensor::zeros(&[4])),
        )
        .unwrap();
        for row in y.value().data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn store_names_are_scoped() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let lin = b.scoped("block", |b| Linear::new(b, "proj", 3, 2));
        assert_eq!(store.name(lin.weight), "block.proj.weight");
        assert_eq!(store.find("block.proj.bias"), Some(lin.bias));
        assert!(store.set(lin.bias, Tensor::zeros(&[3])).is_err());
    }
}
