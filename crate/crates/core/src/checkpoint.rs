//! Checkpoint directories: `params.bin`, `optim.bin`, `codebook.bin` and a
//! `manifest.json` describing how to rebuild the model around them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io::{create_dir, read_json, write_json};
use crate::model::{Model, ModelConfig};
use crate::params::{read_mat, write_mat, AdamW, AdamWConfig};
use crate::vq::ToyVq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub kind: String,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub step: usize,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub n_answers: usize,
    pub codebook_hash: String,
    pub schedule: ScheduleInfo,
    pub param_counts: BTreeMap<String, usize>,
}

pub fn save(dir: &Path, model: &Model, opt: &AdamW, config: &TrainConfig, step: usize, vocab_hash: &str) -> Result<()> {
    create_dir(dir)?;
    let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))
    };
    write("params.bin", &|w| model.params.write_to(w))?;
    write("optim.bin", &|w| opt.write_to(w))?;
    let codebook = model.vq.codebook()?;
    write("codebook.bin", &|w| write_mat(w, "codebook", codebook))?;
    let manifest = CheckpointManifest {
        config: config.clone(),
        model: model.config.clone(),
        step,
        vocab_hash: vocab_hash.to_string(),
        vocab_size: model.vocab_size,
        n_answers: model.n_answers,
        codebook_hash: model.vq.hash(),
        schedule: ScheduleInfo {
            kind: "linear".into(),
            steps: model.schedule.steps,
            beta_start: model.schedule.beta(1),
            beta_end: model.schedule.beta(model.schedule.steps),
        },
        param_counts: model.param_report(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::config(format!("no checkpoint at {} (manifest.json missing)", dir.display())));
    }
    read_json(&path)
}

fn reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

/// Rebuilds the model and optimizer stored in `dir`.
pub fn load(dir: &Path) -> Result<(CheckpointManifest, Model, AdamW)> {
    let manifest = read_manifest(dir)?;
    let (_, codebook) = read_mat(&mut reader(&dir.join("codebook.bin"))?)?;
    let vq = ToyVq::from_codebook(manifest.model.patch, codebook)?;
    if vq.hash() != manifest.codebook_hash {
        return Err(Error::config("codebook.bin does not match the manifest's codebook hash"));
    }
    let mut model = Model::new(manifest.model.clone(), manifest.vocab_size, manifest.n_answers, vq)?;
    model.params.read_from(&mut reader(&dir.join("params.bin"))?)?;
    let mut opt = AdamW::new(
        AdamWConfig { lr: manifest.config.lr, weight_decay: manifest.config.weight_decay, ..Default::default() },
        &model.params,
    );
    opt.read_from(&mut reader(&dir.join("optim.bin"))?)?;
    Ok((manifest, model, opt))
}
