use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

/// Named learnable tensors. Every stored tensor has `requires_grad` set.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, decay: bool) -> ParamId {
        tensor.set_requires_grad(true);
        self.params.push(Param { name: name.into(), tensor, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replaces the values of a parameter, keeping its gradient slot.
    pub fn assign(&mut self, id: ParamId, values: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != values.shape() {
            return Err(Error::dim(format!(
                "cannot assign {:?} to parameter {} of shape {:?}",
                values.shape(),
                p.name,
                p.tensor.shape()
            )));
        }
        p.tensor.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Copies adjoints from a tape after `backward`. Parameters the loss did
    /// not reach receive zeros.
    pub fn load_grads(&mut self, tape: &Tape) -> Result<()> {
        let mut fresh: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        for (slot, grad) in tape.param_grads()? {
            if slot >= fresh.len() {
                return Err(Error::Contract(format!("tape refers to unknown parameter slot {slot}")));
            }
            match &mut fresh[slot] {
                Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
                none => *none = Some(grad.to_vec()),
            }
        }
        for (p, g) in self.params.iter_mut().zip(fresh) {
            let g = g.unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }
}
