use std::collections::HashMap;

use super::{ParamSet, Parameter, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&[f64], &[Tensor], &mut Grads)>;

/// Wengert list of op records. Values are immutable once pushed; gradients
/// live in a separate [`Grads`] produced by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
    requires: Vec<bool>,
    params: HashMap<String, Var>,
    training: bool,
}

/// Gradient buffers indexed by [`Var`]; only nodes that depend on a
/// differentiable leaf get a buffer.
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    requires: Vec<bool>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    /// Mutable accumulation buffer for `v`, or `None` when `v` is constant.
    pub(crate) fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let size = self.sizes[v.0];
        Some(self.bufs[v.0].get_or_insert_with(|| vec![0.0; size]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose stochastic layers (dropout) are active.
    pub fn training() -> Self {
        Self { training: true, ..Self::default() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, false, None)
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t, true, None)
    }

    /// Records `p` as a leaf; repeated requests for the same name share one node.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let mut t = p.tensor.clone();
        t.zero_grad();
        let v = self.push_raw(t, p.learnable, None);
        self.params.insert(p.name.clone(), v);
        v
    }

    /// Looks a parameter up by name and records it.
    pub fn p(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        Ok(self.param(p))
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn push_raw(&mut self, t: Tensor, requires: bool, back: Option<BackFn>) -> Var {
        self.values.push(t);
        self.backs.push(back);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    /// Pushes an op result. The backward closure receives the upstream
    /// gradient, every recorded value and the gradient store.
    pub(crate) fn push_op<F>(&mut self, value: Tensor, parents: &[Var], back: F) -> Var
    where
        F: Fn(&[f64], &[Tensor], &mut Grads) + 'static,
    {
        let requires = parents.iter().any(|p| self.requires[p.0]);
        let back: Option<BackFn> = if requires { Some(Box::new(back)) } else { None };
        self.push_raw(value, requires, back)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads = Grads {
            bufs: vec![None; n],
            sizes: self.values[..n].iter().map(Tensor::numel).collect(),
            requires: self.requires[..n].to_vec(),
        };
        if !self.requires[loss.0] {
            return Ok(grads);
        }
        grads.bufs[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(back) = &self.backs[i] else { continue };
            let Some(g) = grads.bufs[i].take() else { continue };
            back(&g, &self.values, &mut grads);
            grads.bufs[i] = Some(g);
        }
        Ok(grads)
    }

    /// Copies gradients of every recorded parameter into `params`.
    pub fn accumulate_param_grads(&self, grads: &Grads, params: &mut ParamSet) -> Result<()> {
        for (name, v) in &self.params {
            if let (Some(g), Some(p)) = (grads.get(*v), params.get_mut(name)) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
