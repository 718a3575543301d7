//! Building, writing and loading the scene dataset.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json  vocab.json  prompts/<task>.txt
//! scenes/<id>.png        8-bit RGB
//! depth_raw/<id>.png     16-bit gray, depth in [0,1] mapped to [0,65535]
//! masks/<id>_<k>.png     8-bit, 255 inside object k
//! meta/<id>.json         objects, caption, qa
//! depth_target/<id>.png  8-bit RGB, min-max normalized depth
//! seg_target/<id>.png    8-bit RGB, white boundaries on black
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_gray16, read_png, save_gray16, save_gray8, RgbImage};
use crate::io::{create_dir, read_json, write_json};
use crate::rng;
use crate::scene::{generate_scene, render, QaPair, SceneObject, SceneSpec};
use crate::targets::{boundary_map, normalize_depth};
use crate::task::Task;
use crate::text::{PromptPool, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Constant depth field; the depth target is all zeros.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub root_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub train: Vec<ManifestEntry>,
    pub eval: Vec<ManifestEntry>,
    pub vocab_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub caption: String,
    pub qa: Vec<QaPair>,
}

/// One scene with its training targets, as held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub meta: SceneMeta,
    pub rgb: RgbImage,
    pub depth_raw: Vec<f64>,
    pub masks: Vec<Vec<u8>>,
    pub depth: RgbImage,
    pub seg: RgbImage,
    pub degenerate: bool,
}

impl Example {
    pub fn target(&self, task: Task) -> &RgbImage {
        match task {
            Task::Pixel => &self.rgb,
            Task::Depth => &self.depth,
            Task::Seg => &self.seg,
            Task::Und => panic!("the understanding task has no image target"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
    pub prompts: Vec<PromptPool>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    pub fn pool(&self, task: Task) -> &PromptPool {
        self.prompts.iter().find(|p| p.task == task).expect("pool for every generation task")
    }

    pub fn image_size(&self) -> usize {
        self.manifest.spec.image_size
    }
}

/// Scene seed of item `index` in `split`.
pub fn scene_seed(root_seed: u64, split: Split, index: usize) -> u64 {
    rng::derive(root_seed, &[rng::stream::SCENE, split as u64, index as u64])
}

pub fn make_example(spec: &SceneSpec, id: String, seed: u64) -> Result<Example> {
    let scene = generate_scene(spec, seed)?;
    let r = render(&scene);
    let n = spec.image_size;
    let depth = normalize_depth(n, n, &r.depth_raw)?;
    let seg = boundary_map(n, n, &r.masks)?;
    Ok(Example {
        meta: SceneMeta { id, seed, objects: scene.objects, caption: r.caption, qa: r.qa },
        rgb: RgbImage::new(n, n, r.rgb)?,
        depth_raw: r.depth_raw,
        masks: r.masks,
        depth: RgbImage::new(n, n, depth.target.map)?,
        seg: RgbImage::new(n, n, seg.map)?,
        degenerate: depth.degenerate,
    })
}

/// Generates the full dataset in memory.
pub fn generate_dataset(spec: &SceneSpec, n_train: usize, n_eval: usize, root_seed: u64) -> Result<Dataset> {
    if n_train == 0 {
        return Err(Error::config("n_train must be >= 1"));
    }
    if n_eval == 0 {
        return Err(Error::config("n_eval must be >= 1"));
    }
    spec.validate()?;
    let mut seen = BTreeSet::new();
    let mut build = |split: Split, count: usize| -> Result<Vec<Example>> {
        (0..count)
            .map(|i| {
                let seed = scene_seed(root_seed, split, i);
                if !seen.insert(seed) {
                    return Err(Error::config(format!("scene seed {seed} is used twice; train and eval must be disjoint")));
                }
                make_example(spec, format!("{}_{i:05}", split.name()), seed)
            })
            .collect()
    };
    let train = build(Split::Train, n_train)?;
    let eval = build(Split::Eval, n_eval)?;
    let vocab = Vocabulary::builtin();
    let entries =
        |xs: &[Example]| xs.iter().map(|e| ManifestEntry { id: e.meta.id.clone(), seed: e.meta.seed, degenerate: e.degenerate }).collect();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        root_seed,
        n_train,
        n_eval,
        train: entries(&train),
        eval: entries(&eval),
        vocab_hash: vocab.hash(),
    };
    let prompts = Task::GENERATION.iter().map(|&t| PromptPool::builtin(t)).collect();
    Ok(Dataset { manifest, vocab, prompts, train, eval })
}

const SUBDIRS: [&str; 7] = ["scenes", "depth_raw", "masks", "meta", "depth_target", "seg_target", "prompts"];

/// Writes `ds` under `dir` (which should not contain an older dataset).
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in SUBDIRS {
        create_dir(&dir.join(sub))?;
    }
    for ex in ds.train.iter().chain(&ds.eval) {
        let id = &ex.meta.id;
        let n = ex.rgb.width;
        ex.rgb.save_png(&dir.join("scenes").join(format!("{id}.png")))?;
        let raw: Vec<u16> = ex.depth_raw.iter().map(|&d| (d.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        save_gray16(&dir.join("depth_raw").join(format!("{id}.png")), n, n, &raw)?;
        for (k, m) in ex.masks.iter().enumerate() {
            let bytes: Vec<u8> = m.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
            save_gray8(&dir.join("masks").join(format!("{id}_{k}.png")), n, n, &bytes)?;
        }
        write_json(&dir.join("meta").join(format!("{id}.json")), &ex.meta)?;
        ex.depth.save_png(&dir.join("depth_target").join(format!("{id}.png")))?;
        ex.seg.save_png(&dir.join("seg_target").join(format!("{id}.png")))?;
    }
    ds.vocab.save(&dir.join("vocab.json"))?;
    for pool in &ds.prompts {
        pool.save(&dir.join("prompts"))?;
    }
    write_json(&dir.join("manifest.json"), &ds.manifest)
}

/// Generates and writes a dataset; returns its manifest.
pub fn build_dataset(spec: &SceneSpec, n_train: usize, n_eval: usize, root_seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let ds = generate_dataset(spec, n_train, n_eval, root_seed)?;
    write_dataset(&ds, dir)?;
    Ok(ds.manifest)
}

fn load_example(dir: &Path, entry: &ManifestEntry) -> Result<Example> {
    let id = &entry.id;
    let meta: SceneMeta = read_json(&dir.join("meta").join(format!("{id}.json")))?;
    let rgb = RgbImage::load_png(&dir.join("scenes").join(format!("{id}.png")))?;
    let (_, _, raw) = load_gray16(&dir.join("depth_raw").join(format!("{id}.png")))?;
    let mut masks = Vec::with_capacity(meta.objects.len());
    for k in 0..meta.objects.len() {
        let path = dir.join("masks").join(format!("{id}_{k}.png"));
        let (_, _, _, _, bytes) = read_png(&path)?;
        masks.push(bytes.iter().map(|&v| u8::from(v != 0)).collect());
    }
    Ok(Example {
        meta,
        rgb,
        depth_raw: raw.iter().map(|&v| v as f64 / 65535.0).collect(),
        masks,
        depth: RgbImage::load_png(&dir.join("depth_target").join(format!("{id}.png")))?,
        seg: RgbImage::load_png(&dir.join("seg_target").join(format!("{id}.png")))?,
        degenerate: entry.degenerate,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::config(format!("no dataset at {} (manifest.json missing)", dir.display())));
    }
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
    if vocab.hash() != manifest.vocab_hash {
        return Err(Error::config("vocab.json does not match the manifest's vocab hash"));
    }
    let prompts = Task::GENERATION.iter().map(|&t| PromptPool::load(&dir.join("prompts"), t)).collect::<Result<_>>()?;
    let train = manifest.train.iter().map(|e| load_example(dir, e)).collect::<Result<_>>()?;
    let eval = manifest.eval.iter().map(|e| load_example(dir, e)).collect::<Result<_>>()?;
    Ok(Dataset { manifest, vocab, prompts, train, eval })
}
