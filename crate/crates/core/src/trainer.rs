//! Joint multi-task training: one batch per active task per step, per-task
//! mean losses, weighted sum, one optimizer update.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{to_flat, TrainConfig};
use crate::dataset::{Dataset, Example};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::io::{create_dir, write_json};
use crate::model::{task_prompt, Draw, GenTarget, Model};
use crate::params::{AdamW, AdamWConfig, Grads, Group};
use crate::rng::{self, stream};
use crate::scene::{answer_vocabulary, QaCategory};
use crate::task::Task;
use crate::tensor::Mat;
use crate::vq::ToyVq;

/// λ per task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub depth: f64,
    pub seg: f64,
    pub und: f64,
}

impl LossWeights {
    pub fn new(pixel: f64, depth: f64, seg: f64, und: f64) -> Self {
        LossWeights { pixel, depth, seg, und }
    }

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Und => self.und,
            Task::Pixel => self.pixel,
            Task::Depth => self.depth,
            Task::Seg => self.seg,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        LossWeights::new(self.pixel * s, self.depth * s, self.seg * s, self.und * s)
    }

    pub fn active(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|&t| self.get(t) > 0.0).collect()
    }
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        LossWeights::new(c.lambda_pixel, c.lambda_depth, c.lambda_seg, c.lambda_und)
    }
}

/// One training example of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub example: usize,
    /// Question (und) or prompt (generation) token ids.
    pub text: Vec<usize>,
    pub answer: Option<usize>,
    pub draw: Option<Draw>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub task: Task,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: usize,
    pub l_und: Option<f64>,
    pub l_pixel: Option<f64>,
    pub l_depth: Option<f64>,
    pub l_seg: Option<f64>,
    pub l_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub active: Vec<Task>,
}

impl TrainStepReport {
    pub fn loss(&self, task: Task) -> Option<f64> {
        match task {
            Task::Und => self.l_und,
            Task::Pixel => self.l_pixel,
            Task::Depth => self.l_depth,
            Task::Seg => self.l_seg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutRecord {
    pub step: usize,
    pub pixel: f64,
    pub depth: f64,
    pub seg: f64,
}

/// Model-ready tensors for a list of examples.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub inputs: Vec<Mat>,
    /// Indexed by generation task (pixel, depth, seg), then example.
    pub targets: [Vec<GenTarget>; 3],
    /// Per example: (question ids, answer id, category).
    pub qa: Vec<Vec<(Vec<usize>, usize, QaCategory)>>,
}

fn gen_slot(task: Task) -> usize {
    task.index() - 1
}

impl Prepared {
    pub fn new(model: &Model, data: &Dataset, examples: &[Example]) -> Result<Self> {
        let answers = answer_vocabulary();
        let patch = model.config.patch;
        let inputs = examples.iter().map(|e| e.rgb.to_latent(patch)).collect::<Result<_>>()?;
        let targets = Task::GENERATION.map(|t| examples.iter().map(|e| model.target_for(e.target(t))).collect::<Result<Vec<_>>>());
        let [a, b, c] = targets;
        let qa = examples
            .iter()
            .map(|e| {
                e.meta
                    .qa
                    .iter()
                    .map(|q| {
                        let ids = task_prompt(&data.vocab, Task::Und, &q.question, model.config.task_token)?;
                        let ans = answers
                            .iter()
                            .position(|a| *a == q.answer)
                            .ok_or_else(|| Error::OutOfVocabulary(q.answer.clone()))?;
                        Ok((ids, ans, q.category))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Prepared { inputs, targets: [a?, b?, c?], qa })
    }

    pub fn target(&self, task: Task, example: usize) -> &GenTarget {
        &self.targets[gen_slot(task)][example]
    }
}

/// Fits the shared VQ codebook on rgb, depth and seg targets of the first
/// `max_scenes` training scenes.
pub fn fit_vq(data: &Dataset, config: &TrainConfig) -> Result<ToyVq> {
    let n = data.train.len().min(config.vq_fit_scenes);
    let images: Vec<_> =
        data.train[..n].iter().flat_map(|e| [e.rgb.clone(), e.depth.clone(), e.seg.clone()]).collect();
    ToyVq::fit(&images, config.patch, config.codebook_size, rng::derive(config.seed, &[stream::KMEANS]))
}

pub fn new_model(config: &TrainConfig, data: &Dataset) -> Result<Model> {
    config.validate()?;
    let vq = fit_vq(data, config)?;
    Model::new(config.model_config(data.image_size()), data.vocab.len(), answer_vocabulary().len(), vq)
}

fn adamw(config: &TrainConfig, model: &Model) -> AdamW {
    AdamW::new(AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..Default::default() }, &model.params)
}

/// Keys that may differ between a checkpoint's config and a resumed run.
const RESUME_FREE_KEYS: [&str; 6] = ["steps", "out_dir", "resume", "checkpoint_every", "eval_every", "init_from"];

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub data: &'a Dataset,
    pub model: Model,
    pub opt: AdamW,
    /// Number of updates applied so far.
    pub step: usize,
    train: Prepared,
    heldout: Prepared,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        let model = new_model(&config, data)?;
        Self::with_model(config, data, model)
    }

    /// Starts from existing weights with a fresh optimizer.
    pub fn with_model(config: TrainConfig, data: &'a Dataset, model: Model) -> Result<Self> {
        config.validate()?;
        let expect = config.model_config(data.image_size());
        if model.config != expect {
            let a = to_flat(&model.config);
            let b = to_flat(&expect);
            let diff: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
            return Err(Error::config(format!("model does not match the config; differing keys: {diff:?}")));
        }
        let opt = adamw(&config, &model);
        let train = Prepared::new(&model, data, &data.train)?;
        let n = config.n_heldout.min(data.eval.len());
        let heldout = Prepared::new(&model, data, &data.eval[..n])?;
        Ok(Trainer { config, data, model, opt, step: 0, train, heldout })
    }

    pub fn prepared(&self) -> &Prepared {
        &self.train
    }

    /// The batch of `task` for update number `step` (1-based). Item q is a
    /// pure function of (seed, task, step, q), so accumulation only changes
    /// how the items are grouped.
    pub fn make_batch(&self, task: Task, step: usize) -> TaskBatch {
        let n = self.config.batch_size * self.config.accum;
        let items = (0..n).map(|q| self.make_item(task, step, q)).collect();
        TaskBatch { task, items }
    }

    fn make_item(&self, task: Task, step: usize, q: usize) -> Item {
        let mut r = rng::rng(self.config.seed, &[stream::BATCH, task.index() as u64, step as u64, q as u64]);
        let example = r.random_range(0..self.data.train.len());
        if task == Task::Und {
            let qa = &self.train.qa[example];
            let (ids, ans, _) = &qa[r.random_range(0..qa.len())];
            Item { example, text: ids.clone(), answer: Some(*ans), draw: None }
        } else {
            let prompt = self.data.pool(task).sample(r.random());
            let text = task_prompt(&self.data.vocab, task, prompt, self.model.config.task_token)
                .expect("builtin prompts are in the vocabulary");
            Item { example, text, answer: None, draw: Some(self.model.draw(&mut r)) }
        }
    }

    pub fn make_batches(&self, weights: &LossWeights, step: usize) -> Vec<TaskBatch> {
        weights.active().into_iter().map(|t| self.make_batch(t, step)).collect()
    }

    fn item_loss(&self, g: &mut Graph, task: Task, item: &Item) -> Result<Var> {
        let x = &self.train.inputs[item.example];
        match task {
            Task::Und => {
                let ans = item.answer.ok_or_else(|| Error::config("understanding item without an answer"))?;
                self.model.und_loss(g, x, &item.text, ans)
            }
            _ => {
                let draw = item.draw.as_ref().ok_or_else(|| Error::config("generation item without a draw"))?;
                self.model.gen_loss(g, x, &item.text, self.train.target(task, item.example), draw)
            }
        }
    }

    /// Per-task mean losses and the gradient of Σ λ_k l_k. Tasks with zero
    /// weight are skipped entirely, even when a batch is supplied.
    pub fn gradients(&self, batches: &[TaskBatch], weights: &LossWeights, trainable: &[bool]) -> Result<([Option<f64>; 4], Grads)> {
        let mut grads = Grads::new(self.model.params.len());
        let mut losses = [None; 4];
        for task in weights.active() {
            let batch = batches
                .iter()
                .find(|b| b.task == task)
                .ok_or_else(|| Error::config(format!("no batch supplied for active task {task}")))?;
            let n = batch.items.len();
            if n == 0 {
                return Err(Error::config(format!("empty batch for task {task}")));
            }
            let mut value = 0.0;
            for chunk in batch.items.chunks(self.config.batch_size) {
                let mut g = Graph::new(&self.model.params, trainable);
                let mut terms = Vec::with_capacity(chunk.len());
                for item in chunk {
                    terms.push((self.item_loss(&mut g, task, item)?, 1.0 / n as f64));
                }
                let root = g.weighted_sum(&terms);
                value += g.value(root).item();
                g.backward_into(root, weights.get(task), &mut grads);
            }
            losses[task.index()] = Some(value);
        }
        Ok((losses, grads))
    }

    fn text_trainable(&self, step: usize) -> bool {
        step <= self.config.text_warmup_steps
    }

    /// One optimizer update on the supplied batches.
    pub fn train_step(&mut self, batches: &[TaskBatch], weights: &LossWeights) -> Result<TrainStepReport> {
        let step = self.step + 1;
        let trainable = self.model.trainable_mask(self.text_trainable(step));
        self.update(step, batches, weights, &trainable)
    }

    fn update(&mut self, step: usize, batches: &[TaskBatch], weights: &LossWeights, trainable: &[bool]) -> Result<TrainStepReport> {
        let (losses, mut grads) = self.gradients(batches, weights, trainable)?;
        let l_total: f64 = Task::ALL.iter().filter_map(|&t| losses[t.index()].map(|l| weights.get(t) * l)).sum();
        let grad_norm = grads.norm();
        if !l_total.is_finite() || !grad_norm.is_finite() {
            let detail = Task::ALL
                .iter()
                .map(|&t| format!("l_{t}={}", losses[t.index()].map_or("inactive".into(), |l| l.to_string())))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(Error::NonFinite { step, detail });
        }
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            grads.scale_all(self.config.grad_clip / grad_norm);
        }
        self.opt.update(&mut self.model.params, &grads);
        self.step = step;
        Ok(TrainStepReport {
            step,
            l_und: losses[0],
            l_pixel: losses[1],
            l_depth: losses[2],
            l_seg: losses[3],
            l_total,
            grad_norm,
            lr: self.config.lr,
            active: weights.active(),
        })
    }

    /// Samples the next step's batches from the configured weights and applies them.
    pub fn step_once(&mut self) -> Result<TrainStepReport> {
        let weights = LossWeights::from(&self.config);
        let batches = self.make_batches(&weights, self.step + 1);
        self.train_step(&batches, &weights)
    }

    /// Generation-only update of the generation head on the pixel task, with
    /// the understanding side frozen.
    pub fn post_phase_step(&mut self) -> Result<TrainStepReport> {
        let weights = LossWeights::new(1.0, 0.0, 0.0, 0.0);
        let step = self.step + 1;
        let batches = self.make_batches(&weights, step);
        let trainable: Vec<bool> = self.model.params.iter().map(|(_, p)| p.group == Group::GenHead).collect();
        self.update(step, &batches, &weights, &trainable)
    }

    /// Mean generation loss per task over the held-out scenes with fixed
    /// draws and prompts, so values are comparable across steps and runs.
    pub fn heldout(&self) -> Result<HeldoutRecord> {
        let mut out = [0.0; 3];
        let n = self.heldout.inputs.len();
        for task in Task::GENERATION {
            let mut sum = 0.0;
            for i in 0..n {
                let mut r = rng::rng(0, &[stream::EVAL, task.index() as u64, i as u64]);
                let prompt = self.data.pool(task).sample(r.random());
                let text = task_prompt(&self.data.vocab, task, prompt, self.model.config.task_token)?;
                let draw = self.model.draw(&mut r);
                sum += self.model.gen_loss_value(&self.heldout.inputs[i], &text, self.heldout.target(task, i), &draw)?;
            }
            out[gen_slot(task)] = if n == 0 { f64::NAN } else { sum / n as f64 };
        }
        Ok(HeldoutRecord { step: self.step, pixel: out[0], depth: out[1], seg: out[2] })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.model, &self.opt, &self.config, self.step, &self.data.vocab.hash())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub reports: Vec<TrainStepReport>,
    pub heldout: Vec<HeldoutRecord>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path, keep: impl Fn(&T) -> bool) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: T = serde_json::from_str(line).map_err(|e| Error::Json { path: path.into(), source: e })?;
        if keep(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut body = String::new();
    for r in rows {
        body.push_str(&json_line(r));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(row: &T) -> String {
    let v = serde_json::to_value(row).expect("serializable row");
    let mut s = serde_json::to_string(&v).expect("json");
    s.push('\n');
    s
}

fn append_line<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(json_line(row).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Builds (or restores) a trainer according to `init_from` / `resume`.
pub fn start<'a>(config: &TrainConfig, data: &'a Dataset) -> Result<Trainer<'a>> {
    if let Some(dir) = config.resume.as_deref() {
        let (manifest, model, opt) = checkpoint::load(Path::new(dir))?;
        let a = to_flat(&manifest.config);
        let b = to_flat(config);
        let diff: Vec<&str> =
            a.keys().filter(|k| !RESUME_FREE_KEYS.contains(&k.as_str()) && a[*k] != b[*k]).map(String::as_str).collect();
        if !diff.is_empty() {
            return Err(Error::config(format!("resume config differs from the checkpoint in: {}", diff.join(", "))));
        }
        if manifest.vocab_hash != data.vocab.hash() {
            return Err(Error::config("checkpoint vocab hash does not match the dataset"));
        }
        let mut t = Trainer::with_model(config.clone(), data, model)?;
        t.opt = opt;
        t.step = manifest.step;
        return Ok(t);
    }
    if let Some(dir) = config.init_from.as_deref() {
        let (manifest, model, _) = checkpoint::load(Path::new(dir))?;
        if manifest.vocab_hash != data.vocab.hash() {
            return Err(Error::config("checkpoint vocab hash does not match the dataset"));
        }
        return Trainer::with_model(config.clone(), data, model);
    }
    Trainer::new(config.clone(), data)
}

/// Trains to `config.steps`, writing `metrics.jsonl`, `heldout.jsonl`,
/// periodic checkpoints under `checkpoints/` and the final one under
/// `checkpoint/`.
pub fn run(config: &TrainConfig, data: &Dataset, out: &Path) -> Result<RunOutput> {
    config.validate()?;
    create_dir(out)?;
    write_json(&out.join("resolved_config.json"), config)?;
    let mut t = start(config, data)?;
    let metrics_path = out.join("metrics.jsonl");
    let heldout_path = out.join("heldout.jsonl");
    let done = t.step;
    let mut reports: Vec<TrainStepReport> = read_lines(&metrics_path, |r: &TrainStepReport| r.step <= done)?;
    let mut heldout: Vec<HeldoutRecord> = read_lines(&heldout_path, |r: &HeldoutRecord| r.step <= done)?;
    write_lines(&metrics_path, &reports)?;
    write_lines(&heldout_path, &heldout)?;

    let log_heldout = |t: &Trainer, heldout: &mut Vec<HeldoutRecord>| -> Result<()> {
        let h = t.heldout()?;
        append_line(&heldout_path, &h)?;
        heldout.push(h);
        Ok(())
    };
    if config.eval_every > 0 && done == 0 {
        log_heldout(&t, &mut heldout)?;
    }
    let total = config.steps + config.post_phase_pixel_steps;
    while t.step < total {
        let report = if t.step < config.steps { t.step_once()? } else { t.post_phase_step()? };
        append_line(&metrics_path, &report)?;
        reports.push(report);
        if config.eval_every > 0 && (t.step % config.eval_every == 0 || t.step == total) {
            log_heldout(&t, &mut heldout)?;
        }
        if config.checkpoint_every > 0 && t.step % config.checkpoint_every == 0 {
            t.save(&out.join("checkpoints").join(format!("step_{:06}", t.step)))?;
        }
    }
    t.save(&out.join("checkpoint"))?;
    Ok(RunOutput { reports, heldout })
}
