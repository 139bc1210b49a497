//! Named parameters and the basic layers built from them.

use std::cell::{Cell, Ref, RefCell};

use rand::Rng;

use crate::autograd::{Gradients, Var};
use crate::conv::ConvSpec;
use crate::error::TensorError;
use crate::ops::{conv3d, conv_transpose3d};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with a stable hierarchical name.
///
/// The value lives in a leaf [`Var`]; updating the value swaps in a fresh
/// leaf, so graphs built earlier keep seeing the old value.
pub struct Param<T: Scalar> {
    name: String,
    leaf: RefCell<Var<T>>,
    grad: RefCell<Option<Tensor<T>>>,
    frozen: Cell<bool>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            leaf: RefCell::new(Var::leaf(value)),
            grad: RefCell::new(None),
            frozen: Cell::new(false),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The leaf to use in a forward pass.
    pub fn var(&self) -> Var<T> {
        self.leaf.borrow().clone()
    }

    pub fn value(&self) -> Tensor<T> {
        self.leaf.borrow().value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.leaf.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.leaf.borrow().value().numel()
    }

    pub fn set_value(&self, value: Tensor<T>) -> Result<(), TensorError> {
        let expected = self.shape();
        if value.shape() != expected.as_slice() {
            return Err(TensorError::ParamShape {
                name: self.name.clone(),
                expected,
                got: value.shape().to_vec(),
            });
        }
        self.replace_leaf(value);
        Ok(())
    }

    fn replace_leaf(&self, value: Tensor<T>) {
        let leaf = if self.frozen.get() {
            Var::constant(value)
        } else {
            Var::leaf(value)
        };
        *self.leaf.borrow_mut() = leaf;
    }

    /// A frozen parameter still lets gradients flow through the ops that use
    /// it, but it never receives a gradient and optimizers skip it.
    pub fn set_frozen(&self, frozen: bool) {
        if self.frozen.replace(frozen) != frozen {
            self.replace_leaf(self.value());
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.get()
    }

    pub fn grad(&self) -> Ref<'_, Option<Tensor<T>>> {
        self.grad.borrow()
    }

    /// Adds this parameter's gradient from `grads` (if any) to its buffer.
    pub fn accumulate(&self, grads: &Gradients<T>) {
        let leaf = self.leaf.borrow();
        if let Some(g) = grads.get(&leaf) {
            let mut slot = self.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.add_assign(g),
                None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    /// Parameters in a fixed, deterministic order.
    fn params(&self) -> Vec<&Param<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn set_frozen(&self, frozen: bool) {
        self.params().iter().for_each(|p| p.set_frozen(frozen));
    }

    fn accumulate_grads(&self, grads: &Gradients<T>) {
        self.params().iter().for_each(|p| p.accumulate(grads));
    }

    fn zero_grad(&self) {
        self.params().iter().for_each(|p| p.zero_grad());
    }

    fn state_dict(&self) -> Vec<(String, Tensor<T>)> {
        self.params()
            .iter()
            .map(|p| (p.name().to_string(), p.value()))
            .collect()
    }

    /// Loads every parameter from `entries`; extra entries are rejected.
    fn load_state_dict(&self, entries: &[(String, Tensor<T>)]) -> Result<(), TensorError> {
        let params = self.params();
        for (name, _) in entries {
            if !params.iter().any(|p| p.name() == name) {
                return Err(TensorError::UnknownParam(name.clone()));
            }
        }
        for p in params {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == p.name())
                .ok_or_else(|| TensorError::MissingParam(p.name().to_string()))?;
            p.set_value(t.clone())?;
        }
        Ok(())
    }
}

pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

/// Dense or depthwise 3D convolution with optional bias.
pub struct Conv3d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv3d<T> {
    /// Uniform `±1/sqrt(fan_in)` initialization for weight and bias.
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            cin % spec.groups == 0 && cout % spec.groups == 0,
            "{name}: bad groups"
        );
        let shape = [cout, cin / spec.groups, kernel[0], kernel[1], kernel[2]];
        let fan_in = (cin / spec.groups) * kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Param::new(format!("{name}.weight"), uniform(&shape, bound, rng));
        let bias = bias.then(|| Param::new(format!("{name}.bias"), uniform(&[cout], bound, rng)));
        Self { weight, bias, spec }
    }

    pub fn pointwise(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::new(name, cin, cout, [1, 1, 1], ConvSpec::new(1, 0), true, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.spec.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let b = self.bias.as_ref().map(Param::var);
        conv3d(x, &self.weight.var(), b.as_ref(), self.spec)
    }
}

impl<T: Scalar> Module<T> for Conv3d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }
}

/// Transposed 3D convolution with bias.
pub struct ConvTranspose3d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvTranspose3d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [cin, cout / groups, kernel, kernel, kernel];
        let fan_in = (cout / groups) * kernel.pow(3);
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(&shape, bound, rng)),
            bias: Param::new(format!("{name}.bias"), uniform(&[cout], bound, rng)),
            stride,
            padding,
            output_padding,
            groups,
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        conv_transpose3d(
            x,
            &self.weight.var(),
            Some(&self.bias.var()),
            self.stride,
            self.padding,
            self.output_padding,
            self.groups,
        )
    }
}

impl<T: Scalar> Module<T> for ConvTranspose3d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}

/// Instance normalization with optional learned per-channel affine.
pub struct InstanceNorm3d<T: Scalar> {
    pub affine: Option<(Param<T>, Param<T>)>,
    pub eps: f64,
}

impl<T: Scalar> InstanceNorm3d<T> {
    pub fn new(name: &str, channels: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                Param::new(format!("{name}.weight"), Tensor::ones(&[channels])),
                Param::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
            )
        });
        Self { affine, eps: 1e-5 }
    }

    /// Standardized activations before the affine transform.
    pub fn normalize(&self, x: &Var<T>) -> Var<T> {
        x.instance_norm(T::lit(self.eps))
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let y = self.normalize(x);
        match &self.affine {
            Some((g, b)) => y.channel_affine(&g.var(), &b.var()),
            None => y,
        }
    }
}

impl<T: Scalar> Module<T> for InstanceNorm3d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match &self.affine {
            Some((g, b)) => vec![g, b],
            None => vec![],
        }
    }
}
