//! Named parameter tensors, gradient buffers, and the AdamW optimizer.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Component a parameter belongs to; freezing rules are stated per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Understanding encoder (patch embedding).
    Encoder,
    /// Token embedding table.
    TextEmbed,
    /// Answer-logit head.
    TextHead,
    /// Shared transformer trunk.
    Trunk,
    /// Paradigm-specific generation head.
    GenHead,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Encoder, Group::TextEmbed, Group::TextHead, Group::Trunk, Group::GenHead];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::TextEmbed => "text_embed",
            Group::TextHead => "text_head",
            Group::Trunk => "trunk",
            Group::GenHead => "gen_head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Mat,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Mat) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_by_group(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    /// SHA-256 over the raw little-endian bytes of every parameter in `groups`.
    pub fn hash_groups(&self, groups: &[Group]) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            h.update(p.name.as_bytes());
            for v in &p.value.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Flat copy of all parameter values in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data.iter().copied()).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            write_mat(w, &p.name, &p.value)?;
        }
        Ok(())
    }

    /// Overwrites values from a blob written by `write_to`; names and shapes must match.
    pub fn read_from(&mut self, r: &mut impl Read) -> Result<()> {
        let n = read_u64(r)? as usize;
        if n != self.params.len() {
            return Err(Error::config(format!("checkpoint has {n} tensors, model has {}", self.params.len())));
        }
        for p in &mut self.params {
            let (name, m) = read_mat(r)?;
            if name != p.name || m.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "checkpoint tensor {name} {:?} does not match model tensor {} {:?}",
                    m.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = m;
        }
        Ok(())
    }
}

pub(crate) fn write_mat(w: &mut impl Write, name: &str, m: &Mat) -> std::io::Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.cols as u64).to_le_bytes())?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io("<blob>", e))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_mat(r: &mut impl Read) -> Result<(String, Mat)> {
    let nlen = read_u64(r)? as usize;
    let mut name = vec![0u8; nlen];
    r.read_exact(&mut name).map_err(|e| Error::io("<blob>", e))?;
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b).map_err(|e| Error::io("<blob>", e))?;
        data.push(f64::from_le_bytes(b));
    }
    let name = String::from_utf8(name).map_err(|_| Error::config("tensor name is not UTF-8"))?;
    Ok((name, Mat::from_vec(rows, cols, data)))
}

/// Gradient buffers aligned with a `ParamStore`; `None` means no contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Grads { slots: vec![None; n] }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat, scale: f64) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_scaled(g, scale),
            slot @ None => *slot = Some(if scale == 1.0 { g.clone() } else { g.scale(scale) }),
        }
    }

    pub fn merge(&mut self, other: &Grads, scale: f64) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g, scale);
            }
        }
    }

    pub fn scale_all(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.slots.iter().flatten().map(Mat::sum_sq).sum::<f64>().sqrt()
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots[id.0].as_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(Mat::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched (their moments are not decayed either).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let m: Vec<Mat> = params.params.iter().map(|p| Mat::zeros(p.value.rows, p.value.cols)).collect();
        AdamW { config, step: 0, v: m.clone(), m }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.slots.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params.params[i].value;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = c.beta1 * m.data[j] + (1.0 - c.beta1) * gj;
                v.data[j] = c.beta2 * v.data[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p.data[j]);
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.m.len() as u64).to_le_bytes())?;
        for (m, v) in self.m.iter().zip(&self.v) {
            write_mat(w, "m", m)?;
            write_mat(w, "v", v)?;
        }
        Ok(())
    }

    pub fn read_from(&mut self, r: &mut impl Read) -> Result<()> {
        self.step = read_u64(r)?;
        let n = read_u64(r)? as usize;
        if n != self.m.len() {
            return Err(Error::config("optimizer state does not match the model"));
        }
        for i in 0..n {
            self.m[i] = read_mat(r)?.1;
            self.v[i] = read_mat(r)?.1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Group::Trunk, Mat::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &ps);
        let mut g = Grads::new(1);
        g.accumulate(id, &Mat::from_vec(1, 2, vec![0.5, -2.0]), 1.0);
        opt.update(&mut ps, &g);
        let v = ps.value(id);
        assert!((v.data[0] - (1.0 - 3e-4)).abs() < 1e-9);
        assert!((v.data[1] - (-1.0 + 3e-4)).abs() < 1e-9);
    }

    #[test]
    fn blob_round_trip() {
        let mut ps = ParamStore::new();
        ps.add("a", Group::Encoder, Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.5]));
        ps.add("b", Group::Trunk, Mat::from_vec(1, 3, vec![-1.0, 0.25, 9.0]));
        let mut buf = Vec::new();
        ps.write_to(&mut buf).unwrap();
        let mut other = ps.clone();
        *other.value_mut(ParamId(0)) = Mat::zeros(2, 2);
        other.read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(other, ps);
    }
}
