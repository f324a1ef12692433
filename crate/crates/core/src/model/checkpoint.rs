//! Named-tensor checkpoint archive.
//!
//! Layout (little endian): magic `DMCKPT01`, step `u64`, config-hash string,
//! tensor count `u32`, then per tensor: name string, rank `u32`, dims `u64`s
//! and `f64` values. Strings are `u32` length + UTF-8 bytes. Values are stored
//! as `f64`, which round-trips `f32` exactly.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};

use super::{ModelError, NormState, ParamVector, Real};

const MAGIC: &[u8; 8] = b"DMCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: String,
    pub tensors: Vec<NamedTensor>,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String, ModelError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| corrupt("non-UTF-8 string"))
}

fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

impl Checkpoint {
    pub fn new(step: u64, config_hash: impl Into<String>) -> Self {
        Self {
            step,
            config_hash: config_hash.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, value: &ArrayD<T>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: value.shape().to_vec(),
            data: value.iter().map(|v| v.to_f64().unwrap()).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn take_array<T: Real>(&self, name: &str, shape: &[usize]) -> Result<ArrayD<T>, ModelError> {
        let t = self.get(name).ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
        if t.shape != shape {
            return Err(corrupt(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape, shape
            )));
        }
        Ok(ArrayD::from_shape_vec(IxDyn(shape), t.data.iter().map(|&v| T::from(v).unwrap()).collect()).unwrap())
    }

    /// Store every parameter under `prefix/name`.
    pub fn push_params<T: Real>(&mut self, prefix: &str, params: &ParamVector<T>) {
        for p in params.iter() {
            self.push(format!("{prefix}/{}", p.name), &p.value);
        }
    }

    /// Overwrite `params` from tensors stored under `prefix/`.
    pub fn restore_params<T: Real>(&self, prefix: &str, params: &mut ParamVector<T>) -> Result<(), ModelError> {
        for p in params.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.value = self.take_array(&format!("{prefix}/{}", p.name), &shape)?;
        }
        Ok(())
    }

    pub fn push_norm<T: Real>(&mut self, norm: &NormState<T>) {
        for layer in &norm.layers {
            self.push(format!("norm/{}.mean", layer.name), &layer.mean.clone().into_dyn());
            self.push(format!("norm/{}.var", layer.name), &layer.var.clone().into_dyn());
        }
    }

    pub fn restore_norm<T: Real>(&self, norm: &mut NormState<T>) -> Result<(), ModelError> {
        for layer in &mut norm.layers {
            let n = layer.mean.len();
            let to1 = |a: ArrayD<T>| -> Array1<T> { a.into_dimensionality().unwrap() };
            layer.mean = to1(self.take_array(&format!("norm/{}.mean", layer.name), &[n])?);
            layer.var = to1(self.take_array(&format!("norm/{}.var", layer.name), &[n])?);
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.step.to_le_bytes())?;
        write_string(w, &self.config_hash)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            write_string(w, &t.name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let step = read_u64(r)?;
        let config_hash = read_string(r)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(r)?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self {
            step,
            config_hash,
            tensors,
        })
    }

    /// Write to a temporary sibling file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelBundle, ModelSpec};

    #[test]
    fn round_trip_restores_bits() {
        let mut spec = ModelSpec::new(Arch::DeskCnn { feature_dim: 8 }, 3);
        spec.input_size = 8;
        let a: ModelBundle<f32> = ModelBundle::build(spec.clone(), 1);
        let mut ck = Checkpoint::new(17, "abc");
        ck.push_params("param", &a.params);
        ck.push_norm(&a.norm);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);

        let mut b: ModelBundle<f32> = ModelBundle::build(spec, 2);
        assert_ne!(a.params, b.params);
        back.restore_params("param", &mut b.params).unwrap();
        back.restore_norm(&mut b.norm).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.norm, b.norm);
        assert_eq!(back.step, 17);
        assert_eq!(back.config_hash, "abc");
    }

    #[test]
    fn missing_and_corrupt() {
        let ck = Checkpoint::new(0, "");
        let mut spec = ModelSpec::new(Arch::DeskCnn { feature_dim: 8 }, 3);
        spec.input_size = 8;
        let mut m: ModelBundle<f32> = ModelBundle::build(spec, 1);
        assert!(ck.restore_params("param", &mut m.params).is_err());
        assert!(Checkpoint::read_from(&mut &b"NOTACKPT"[..]).is_err());
    }
}
