//! Generation objectives and samplers for the five supported paradigms:
//! causal AR, MaskGit, DDPM, flow matching and per-token-diffusion MAR.
//!
//! Loss functions here are plain-value references. The model builds the same
//! quantities on the autodiff graph (`Graph::cross_entropy`, `Graph::sq_err`)
//! and its tests compare the two.

mod objectives;
mod samplers;
mod schedule;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use objectives::*;
pub use samplers::*;
pub use schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Ar,
    Maskgit,
    Ddpm,
    Fm,
    Mar,
}

impl Paradigm {
    pub const ALL: [Paradigm; 5] = [Paradigm::Ar, Paradigm::Maskgit, Paradigm::Ddpm, Paradigm::Fm, Paradigm::Mar];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Ar => "ar",
            Paradigm::Maskgit => "maskgit",
            Paradigm::Ddpm => "ddpm",
            Paradigm::Fm => "fm",
            Paradigm::Mar => "mar",
        }
    }

    /// Discrete paradigms generate VQ token ids; the rest generate continuous
    /// patch latents.
    pub fn is_discrete(self) -> bool {
        matches!(self, Paradigm::Ar | Paradigm::Maskgit)
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown paradigm {s:?}; expected ar|maskgit|ddpm|fm|mar")))
    }
}

/// Flattened sequence of codebook indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub ids: Vec<usize>,
    pub codebook_size: usize,
}

impl TokenGrid {
    pub fn new(ids: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::Range(format!("token id {bad} not in [0, {codebook_size})")));
        }
        Ok(TokenGrid { ids, codebook_size })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `visible[i]` is true for tokens the model may see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    pub visible: Vec<bool>,
}

impl MaskPattern {
    pub fn all_masked(len: usize) -> Self {
        MaskPattern { visible: vec![false; len] }
    }

    pub fn masked_count(&self) -> usize {
        self.visible.iter().filter(|v| !**v).count()
    }
}
