//! Parameter storage and the handful of layers shared by the model modules.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{init, Padding, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Rebinds one parameter, e.g. to a probe variable during gradient checks.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.0[id.0] = v;
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
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

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Places every parameter on `tape`; frozen ones become constants.
    pub fn attach(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .zip(&self.trainable)
                .map(|(t, &tr)| {
                    if tr {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Places every parameter on `tape` as a constant.
    pub fn attach_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        )
    }

    /// Gradients after `tape.backward`, aligned with [`ParamStore::tensors`].
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        bound
            .0
            .iter()
            .zip(&self.trainable)
            .map(|(&v, &tr)| if tr { tape.grad(v) } else { None })
            .collect()
    }

    /// Replaces a tensor by name, checking the shape.
    pub fn load(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| dim_err!("unknown parameter {name}"))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(dim_err!(
                "parameter {name}: stored {:?}, loaded {:?}",
                self.tensors[id.0].shape(),
                t.shape()
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::trunc_normal(&[dout, din], 0.02, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]), true);
        Self {
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.get(self.weight), Some(p.get(self.bias)))
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store
            .get_mut(self.weight)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::zero());
        store
            .get_mut(self.bias)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::zero());
    }

    pub fn param_count(din: usize, dout: usize) -> usize {
        din * dout + dout
    }
}

/// Layer norm with affine parameters over one axis.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axis: usize,
    pub eps: f64,
}

impl Norm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        axis: usize,
        eps: f64,
    ) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[c]), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true);
        Self {
            gamma,
            beta,
            axis,
            eps,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta), self.eps, self.axis)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub padding: Padding,
    pub groups: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin / groups * kernel.iter().product::<usize>();
        let shape = [cout, cin / groups, kernel[0], kernel[1], kernel[2]];
        let weight = store.add(
            format!("{name}.weight"),
            init::fan_in_uniform(&shape, fan_in, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv3d(
            x,
            p.get(self.weight),
            Some(p.get(self.bias)),
            self.stride,
            self.padding,
            self.groups,
        )
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store
            .get_mut(self.weight)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::zero());
        store
            .get_mut(self.bias)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::zero());
    }

    /// Weights plus biases of a grouped conv.
    pub fn param_count(cin: usize, cout: usize, kernel: [usize; 3], groups: usize) -> usize {
        cout * (cin / groups) * kernel.iter().product::<usize>() + cout
    }
}
