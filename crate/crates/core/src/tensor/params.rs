use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use super::{read_tensor, write_tensor, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub learnable: bool,
}

/// Named parameters, iterated in name order so that serialization and
/// gradient reports are reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

const PARAMS_MAGIC: &[u8; 8] = b"RBEVPRMS";

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params
            .insert(name.clone(), Parameter { name, tensor, learnable: true });
        Ok(())
    }

    /// Uniform init in `[-bound, bound]` with `bound = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_xavier<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Sets every element to zero (handy for constant-network checks).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for p in out.params.values_mut() {
            p.tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in self.params.values() {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[u8::from(p.learnable)])?;
            write_tensor(w, &p.tensor)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("bad parameter file magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word);
        let mut out = Self::new();
        for _ in 0..count {
            r.read_exact(&mut word)?;
            let mut name = vec![0u8; u32::from_le_bytes(word) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let tensor = read_tensor(r)?;
            out.insert(name.clone(), tensor)?;
            out.get_mut(&name).unwrap().learnable = flag[0] != 0;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.insert("w", Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let mut ps = ParamSet::new();
        ps.insert("b", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        ps.insert("a", Tensor::zeros(&[1, 3])).unwrap();
        ps.get_mut("a").unwrap().learnable = false;
        let mut buf = Vec::new();
        ps.save(&mut buf).unwrap();
        assert_eq!(ParamSet::load(&mut buf.as_slice()).unwrap(), ps);
    }
}
