//! Named parameters and the small set of layers the model is assembled from.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::conv::Conv3dSpec;
use crate::ops::LAYERNORM_EPS;
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal(0, std²) truncated to ±2 std.
    TruncNormal { std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    /// Dot-separated module path, e.g. `encoder.stage0.embed.weight`.
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Ordered, name-unique list of parameter declarations.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
    names: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> String {
        let name = name.into();
        assert!(
            !self.names.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.names.insert(name.clone(), self.specs.len());
        self.specs.push(ParamSpec {
            name: name.clone(),
            shape: shape.to_vec(),
            init,
        });
        name
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Deterministically materializes every parameter from `seed`, in
    /// declaration order.
    pub fn initialize<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for spec in &self.specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Const(c) => vec![T::lit(c); n],
                Init::TruncNormal { std } => (0..n)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break T::lit(z * std);
                        }
                    })
                    .collect(),
            };
            store.insert(
                spec.name.clone(),
                Tensor::new(spec.shape.clone(), data).expect("spec shape"),
            );
        }
        store
    }
}

/// Parameter values keyed by name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: String, value: Tensor<T>) {
        self.tensors.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, |_| true)
    }

    /// Records parameters as constants (inference, no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, |_| false)
    }

    pub fn bind_with(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// True when names, shapes and every bit of every value agree.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    /// Overrides (or adds) the variable bound to `name`.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Truncated-normal std used for fully connected weights.
pub const LINEAR_INIT_STD: f64 = 0.02;

/// `y = x W + b` on token rows `x: [N, in]`, with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::with_init(reg, prefix, d_in, d_out, bias, Init::TruncNormal { std: LINEAR_INIT_STD })
    }

    pub fn with_init(
        reg: &mut ParamRegistry,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        Self {
            weight: reg.declare(format!("{prefix}.weight"), &[d_in, d_out], init),
            bias: bias.then(|| reg.declare(format!("{prefix}.bias"), &[d_out], Init::Zeros)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(&self.weight)?)?;
        match &self.bias {
            Some(b) => tape.add_bias_last(y, p.var(b)?),
            None => Ok(y),
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }
}

/// 3D convolution with bias over `[C, D, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    weight: String,
    bias: String,
    spec: Conv3dSpec,
}

impl Conv3d {
    /// Weight init is truncated normal with std `1/sqrt(fan_in)`.
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv3dSpec,
    ) -> Self {
        let fan_in = (c_in / spec.groups) * kernel * kernel * kernel;
        let std = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(reg, prefix, c_in, c_out, kernel, spec, Init::TruncNormal { std })
    }

    pub fn with_init(
        reg: &mut ParamRegistry,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv3dSpec,
        init: Init,
    ) -> Self {
        let shape = [c_out, c_in / spec.groups, kernel, kernel, kernel];
        Self {
            weight: reg.declare(format!("{prefix}.weight"), &shape, init),
            bias: reg.declare(format!("{prefix}.bias"), &[c_out], Init::Zeros),
            spec,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv3d(x, p.var(&self.weight)?, Some(p.var(&self.bias)?), self.spec)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }
}

/// Layer normalization over the last (channel) axis of token rows.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: reg.declare(format!("{prefix}.gamma"), &[dim], Init::Const(1.0)),
            beta: reg.declare(format!("{prefix}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layernorm(x, p.var(&self.gamma)?, p.var(&self.beta)?, LAYERNORM_EPS)
    }

    /// Per-voxel normalization of a `[C, D, H, W]` volume over channels.
    pub fn forward_volume<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let tokens = tape.volume_to_tokens(x)?;
        let y = self.forward(tape, p, tokens)?;
        tape.tokens_to_volume(y, [s[1], s[2], s[3]])
    }
}
