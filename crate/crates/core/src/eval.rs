//! Evaluation: VQA accuracy per category, generation metrics (reconstruction
//! MSE, depth 1−MAE, boundary F1) and a template-matching compositional probe.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::{task_prompt, Model};
use crate::rng::{self, stream};
use crate::scene::{answer_vocabulary, shaded_rgb, Color, QaCategory, QaPair, Shape, BACKGROUND_RGB};
use crate::task::Task;
use crate::text::{PromptPool, Vocabulary};

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// 1 − mean |pred − target| after scaling to [0, 1] and averaging channels.
/// Channel sums are integers, so the error is a single exact division.
pub fn depth_similarity(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    check_dims(pred, target)?;
    let sum = |px: &[u8]| px.iter().map(|&v| v as i64).sum::<i64>();
    let total: i64 = pred.data.chunks_exact(3).zip(target.data.chunks_exact(3)).map(|(a, b)| (sum(a) - sum(b)).abs()).sum();
    let n = (pred.width * pred.height) as f64;
    Ok(1.0 - total as f64 / (3.0 * 255.0 * n))
}

/// Mean squared error over all channels on the [0, 1] scale.
pub fn pixel_mse(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    check_dims(pred, target)?;
    let sum: f64 = pred.data.iter().zip(&target.data).map(|(&a, &b)| ((a as f64 - b as f64) / 255.0).powi(2)).sum();
    Ok(sum / pred.data.len() as f64)
}

/// Boundary pixels of a map: channel mean ≥ 128.
pub fn binarize(img: &RgbImage) -> Vec<bool> {
    img.gray().iter().map(|&v| v >= 128.0).collect()
}

/// Fraction of `from` pixels with a `to` pixel within Chebyshev distance `tol`.
fn matched_fraction(from: &[bool], to: &[bool], w: usize, h: usize, tol: usize) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for y in 0..h {
        for x in 0..w {
            if !from[y * w + x] {
                continue;
            }
            total += 1;
            let found = (y.saturating_sub(tol)..=(y + tol).min(h - 1))
                .any(|yy| (x.saturating_sub(tol)..=(x + tol).min(w - 1)).any(|xx| to[yy * w + xx]));
            hit += usize::from(found);
        }
    }
    (hit, total)
}

/// F1 of boundary pixels with a Chebyshev matching tolerance. Two empty maps
/// score 1; exactly one empty map scores 0.
pub fn boundary_f1(pred: &[bool], target: &[bool], w: usize, h: usize, tol: usize) -> Result<f64> {
    if pred.len() != w * h || target.len() != w * h {
        return Err(Error::Shape("boundary maps do not match the stated size".into()));
    }
    let (ph, pt) = matched_fraction(pred, target, w, h, tol);
    let (th, tt) = matched_fraction(target, pred, w, h, tol);
    Ok(match (pt, tt) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let p = ph as f64 / pt as f64;
            let r = th as f64 / tt as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    })
}

pub fn seg_similarity(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    check_dims(pred, target)?;
    boundary_f1(&binarize(pred), &binarize(target), pred.width, pred.height, 1)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    /// Exact fraction, or `None` when there were no questions.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VqaScores {
    pub spatial: Tally,
    pub presence: Tally,
    pub attribute: Tally,
    /// Answers outside the answer vocabulary (counted as wrong).
    pub invalid: usize,
}

impl VqaScores {
    pub fn tally_mut(&mut self, c: QaCategory) -> &mut Tally {
        match c {
            QaCategory::Spatial => &mut self.spatial,
            QaCategory::Presence => &mut self.presence,
            QaCategory::Attribute => &mut self.attribute,
        }
    }
}

/// Scores an answerer by exact match. The answerer returns an index into
/// the answer vocabulary; out-of-range indices count as wrong.
pub fn vqa_eval_with(examples: &[Example], mut answer: impl FnMut(usize, &QaPair) -> Result<usize>) -> Result<VqaScores> {
    let answers = answer_vocabulary();
    let mut s = VqaScores::default();
    for (i, ex) in examples.iter().enumerate() {
        for qa in &ex.meta.qa {
            let id = answer(i, qa)?;
            let ok = match answers.get(id) {
                Some(a) => *a == qa.answer,
                None => {
                    s.invalid += 1;
                    false
                }
            };
            let t = s.tally_mut(qa.category);
            t.total += 1;
            t.correct += usize::from(ok);
        }
    }
    Ok(s)
}

pub fn vqa_eval(model: &Model, vocab: &Vocabulary, examples: &[Example]) -> Result<VqaScores> {
    let latents: Vec<_> = examples.iter().map(|e| e.rgb.to_latent(model.config.patch)).collect::<Result<_>>()?;
    vqa_eval_with(examples, |i, qa| {
        let ids = task_prompt(vocab, Task::Und, &qa.question, model.config.task_token)?;
        model.answer(&latents[i], &ids)
    })
}

/// Generates `task` outputs for each example with a seeded prompt and sampler seed.
pub fn generate_outputs(model: &Model, vocab: &Vocabulary, pool: &PromptPool, examples: &[Example], seed: u64) -> Result<Vec<RgbImage>> {
    let task = pool.task;
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut r = rng::rng(seed, &[stream::EVAL, task.index() as u64, i as u64]);
            let prompt = pool.sample(r.random());
            let ids = task_prompt(vocab, task, prompt, model.config.task_token)?;
            let x = ex.rgb.to_latent(model.config.patch)?;
            let out = model.generate(&x, &ids, r.random())?;
            RgbImage::from_latent(&out, ex.rgb.width, ex.rgb.height, model.config.patch)
        })
        .collect()
}

/// Mean score of generated outputs against the oracle targets: MSE for pixel,
/// 1−MAE for depth, boundary F1 for seg.
pub fn score_outputs(task: Task, outputs: &[RgbImage], examples: &[Example]) -> Result<f64> {
    let mut sum = 0.0;
    for (out, ex) in outputs.iter().zip(examples) {
        sum += match task {
            Task::Pixel => pixel_mse(out, &ex.rgb)?,
            Task::Depth => depth_similarity(out, &ex.depth)?,
            Task::Seg => seg_similarity(out, &ex.seg)?,
            Task::Und => return Err(Error::config("und is not a generation task")),
        };
    }
    Ok(sum / outputs.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Compositional probe

/// Pixel class: 0 = background, 1 + color index otherwise.
fn classify(img: &RgbImage, layers: &[f64]) -> Vec<u8> {
    let mut palette: Vec<([u8; 3], u8)> = vec![(BACKGROUND_RGB, 0)];
    for (ci, &c) in Color::ALL.iter().enumerate() {
        palette.push((c.rgb(), ci as u8 + 1));
        for &d in layers {
            palette.push((shaded_rgb(c, d), ci as u8 + 1));
        }
    }
    img.data
        .chunks_exact(3)
        .map(|px| {
            let dist = |p: &[u8; 3]| (0..3).map(|k| (px[k] as i32 - p[k] as i32).pow(2)).sum::<i32>();
            palette.iter().min_by_key(|(p, _)| dist(p)).expect("non-empty palette").1
        })
        .collect()
}

/// Best template fit of `shape` to the pixels of class `cls`. Pixels of other
/// object classes are treated as possible occluders and ignored, but a
/// placement that is mostly occluded is rejected. Returns (IoU, center x).
fn fit_shape(classes: &[u8], size: usize, cls: u8, shape: Shape, max_r: i64) -> Option<(f64, i64)> {
    let n = size as i64;
    let region: Vec<(i64, i64)> = (0..n * n).filter(|&i| classes[i as usize] == cls).map(|i| (i % n, i / n)).collect();
    if region.is_empty() {
        return None;
    }
    let (x0, x1) = (region.iter().map(|p| p.0).min()?, region.iter().map(|p| p.0).max()?);
    let (y0, y1) = (region.iter().map(|p| p.1).min()?, region.iter().map(|p| p.1).max()?);
    let mut best: Option<(f64, i64)> = None;
    for r in 2..=max_r {
        for cy in (y0 - r).max(r)..=(y1 + r).min(n - 1 - r) {
            for cx in (x0 - r).max(r)..=(x1 + r).min(n - 1 - r) {
                let (mut inter, mut tmpl, mut area) = (0usize, 0usize, 0usize);
                for dy in -r..=r {
                    for dx in -r..=r {
                        if !shape.covers(dx, dy, r) {
                            continue;
                        }
                        area += 1;
                        let c = classes[((cy + dy) * n + cx + dx) as usize];
                        if c == cls {
                            inter += 1;
                            tmpl += 1;
                        } else if c == 0 {
                            tmpl += 1;
                        }
                    }
                }
                if 2 * tmpl < area {
                    continue;
                }
                let iou = inter as f64 / (tmpl + region.len() - inter) as f64;
                if best.is_none_or(|b| iou > b.0) {
                    best = Some((iou, cx));
                }
            }
        }
    }
    best
}

pub const PROBE_MIN_IOU: f64 = 0.5;

/// Parses "a red circle left of a blue square ..." into (color, shape) pairs.
pub fn parse_caption(caption: &str) -> Option<Vec<(Color, Shape)>> {
    caption
        .split(" left of ")
        .map(|part| {
            let words: Vec<&str> = part.split_whitespace().collect();
            let [_, c, s] = words.as_slice() else { return None };
            let color = Color::ALL.into_iter().find(|x| x.name() == *c)?;
            let shape = Shape::ALL.into_iter().find(|x| x.name() == *s)?;
            Some((color, shape))
        })
        .collect()
}

/// True when every object of the caption is found with its color and shape
/// and the detected centers follow the caption's left-to-right order.
pub fn probe(img: &RgbImage, caption: &str, layers: &[f64]) -> bool {
    let Some(objects) = parse_caption(caption) else { return false };
    let classes = classify(img, layers);
    let max_r = (img.width as i64 - 1) / 2;
    let mut xs = Vec::with_capacity(objects.len());
    for (color, shape) in objects {
        let cls = Color::ALL.iter().position(|&c| c == color).expect("known color") as u8 + 1;
        let fits: Vec<Option<(f64, i64)>> = Shape::ALL.iter().map(|&s| fit_shape(&classes, img.width, cls, s, max_r)).collect();
        let own = Shape::ALL.iter().position(|&s| s == shape).expect("known shape");
        let Some((iou, cx)) = fits[own] else { return false };
        let beaten = fits.iter().flatten().any(|f| f.0 > iou);
        if iou < PROBE_MIN_IOU || beaten {
            return false;
        }
        xs.push(cx);
    }
    xs.windows(2).all(|w| w[0] < w[1])
}

/// Fraction of (image, caption) pairs that pass the probe.
pub fn compositional_check(images: &[RgbImage], captions: &[String], layers: &[f64]) -> f64 {
    let pass = images.iter().zip(captions).filter(|(img, cap)| probe(img, cap, layers)).count();
    pass as f64 / images.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub vqa_spatial_acc: Option<f64>,
    pub vqa_presence_acc: Option<f64>,
    pub vqa_attribute_acc: Option<f64>,
    pub depth_sim: f64,
    pub seg_sim: f64,
    pub recon_mse: f64,
    pub comp_score: f64,
    pub n_eval: usize,
    pub n_questions: BTreeMap<String, usize>,
}

pub const REPORT_FIELDS: [&str; 9] = [
    "vqa_spatial_acc",
    "vqa_presence_acc",
    "vqa_attribute_acc",
    "depth_sim",
    "seg_sim",
    "recon_mse",
    "comp_score",
    "n_eval",
    "n_questions",
];

/// Outputs produced during evaluation, kept for the image grid.
pub struct EvalOutputs {
    pub report: EvalReport,
    pub generated: BTreeMap<Task, Vec<RgbImage>>,
}

/// Full evaluation on `examples`; generation metrics use the first
/// `n_gen` examples (all when 0).
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    pools: &[PromptPool],
    examples: &[Example],
    layers: &[f64],
    n_gen: usize,
    seed: u64,
) -> Result<EvalOutputs> {
    if examples.is_empty() {
        return Err(Error::config("evaluation needs at least one example"));
    }
    let vqa = vqa_eval(model, vocab, examples)?;
    let n_gen = if n_gen == 0 { examples.len() } else { n_gen.min(examples.len()) };
    let gen_ex = &examples[..n_gen];
    let mut generated = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for pool in pools {
        let outs = generate_outputs(model, vocab, pool, gen_ex, seed)?;
        scores.insert(pool.task, score_outputs(pool.task, &outs, gen_ex)?);
        generated.insert(pool.task, outs);
    }
    let captions: Vec<String> = gen_ex.iter().map(|e| e.meta.caption.clone()).collect();
    let comp = generated.get(&Task::Pixel).map_or(0.0, |imgs| compositional_check(imgs, &captions, layers));
    let n_questions = [("spatial", &vqa.spatial), ("presence", &vqa.presence), ("attribute", &vqa.attribute)]
        .into_iter()
        .map(|(k, t)| (k.to_string(), t.total))
        .collect();
    let report = EvalReport {
        vqa_spatial_acc: vqa.spatial.accuracy(),
        vqa_presence_acc: vqa.presence.accuracy(),
        vqa_attribute_acc: vqa.attribute.accuracy(),
        depth_sim: scores.get(&Task::Depth).copied().unwrap_or(f64::NAN),
        seg_sim: scores.get(&Task::Seg).copied().unwrap_or(f64::NAN),
        recon_mse: scores.get(&Task::Pixel).copied().unwrap_or(f64::NAN),
        comp_score: comp,
        n_eval: examples.len(),
        n_questions,
    };
    Ok(EvalOutputs { report, generated })
}

/// Rows of (input | pixel | depth | seg | depth target with boundaries in red).
pub fn eval_grid(examples: &[Example], generated: &BTreeMap<Task, Vec<RgbImage>>, rows: usize) -> Result<RgbImage> {
    let rows = rows.min(examples.len());
    if rows == 0 {
        return Err(Error::config("grid needs at least one row"));
    }
    let s = examples[0].rgb.width;
    let w = 5 * s;
    let mut data = vec![0u8; w * rows * s * 3];
    let blank = RgbImage::filled(s, s, [0, 0, 0]);
    for (r, ex) in examples.iter().take(rows).enumerate() {
        let mut target = ex.depth.clone();
        for (px, seg) in target.data.chunks_exact_mut(3).zip(ex.seg.data.chunks_exact(3)) {
            if seg[0] >= 128 {
                px.copy_from_slice(&[255, 0, 0]);
            }
        }
        let panel = |t: Task| generated.get(&t).and_then(|v| v.get(r)).unwrap_or(&blank);
        let panels = [&ex.rgb, panel(Task::Pixel), panel(Task::Depth), panel(Task::Seg), &target];
        for (p, img) in panels.iter().enumerate() {
            for y in 0..s {
                let dst = ((r * s + y) * w + p * s) * 3;
                data[dst..dst + s * 3].copy_from_slice(&img.data[y * s * 3..(y + 1) * s * 3]);
            }
        }
    }
    RgbImage::new(w, rows * s, data)
}

/// Distinct line colors for plots.
pub const PLOT_COLORS: [[u8; 3]; 6] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [148, 103, 189], [255, 127, 14], [0, 0, 0]];

/// Line plot of several series on shared axes (white background, gray frame).
pub fn line_plot(series: &[Vec<(f64, f64)>], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::filled(width, height, [255, 255, 255]);
    let pts = series.iter().flatten().filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return img;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let m = 8usize;
    let (pw, ph) = ((width - 2 * m) as f64, (height - 2 * m) as f64);
    let put = |img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            let i = (y as usize * width + x as usize) * 3;
            img.data[i..i + 3].copy_from_slice(&c);
        }
    };
    for x in m..width - m {
        put(&mut img, x as i64, (height - m) as i64, [128, 128, 128]);
    }
    for y in m..height - m {
        put(&mut img, m as i64, y as i64, [128, 128, 128]);
    }
    let to_px = |(x, y): (f64, f64)| {
        (m as f64 + (x - x0) / (x1 - x0) * pw, (height - m) as f64 - (y - y0) / (y1 - y0) * ph)
    };
    for (si, s) in series.iter().enumerate() {
        let c = PLOT_COLORS[si % PLOT_COLORS.len()];
        for w in s.windows(2) {
            let (a, b) = (to_px(w[0]), to_px(w[1]));
            let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for k in 0..=n {
                let t = k as f64 / n as f64;
                put(&mut img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, render, SceneSpec};

    fn gray(w: usize, h: usize, f: impl Fn(usize) -> u8) -> RgbImage {
        RgbImage::new(w, h, (0..w * h).flat_map(|i| [f(i); 3]).collect()).unwrap()
    }

    #[test]
    fn depth_similarity_cases() {
        let a = gray(4, 4, |i| (i * 13) as u8);
        assert_eq!(depth_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(depth_similarity(&gray(4, 4, |_| 0), &gray(4, 4, |_| 255)).unwrap(), 0.0);
        let shifted = gray(4, 4, |i| (i * 13) as u8 + 51);
        assert_eq!(depth_similarity(&shifted, &a).unwrap(), 0.8);
        assert!(depth_similarity(&a, &gray(3, 4, |_| 0)).is_err());
    }

    /// Brute force: compare every pixel pair.
    fn f1_oracle(p: &[bool], t: &[bool], w: usize, tol: i64) -> f64 {
        let pos = |m: &[bool]| -> Vec<(i64, i64)> { (0..m.len()).filter(|&i| m[i]).map(|i| ((i % w) as i64, (i / w) as i64)).collect() };
        let (pp, tp) = (pos(p), pos(t));
        if pp.is_empty() && tp.is_empty() {
            return 1.0;
        }
        if pp.is_empty() || tp.is_empty() {
            return 0.0;
        }
        let near = |a: &(i64, i64), set: &[(i64, i64)]| set.iter().any(|b| (a.0 - b.0).abs().max((a.1 - b.1).abs()) <= tol);
        let prec = pp.iter().filter(|a| near(a, &tp)).count() as f64 / pp.len() as f64;
        let rec = tp.iter().filter(|a| near(a, &pp)).count() as f64 / tp.len() as f64;
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    }

    #[test]
    fn boundary_f1_shift_tolerance() {
        let w = 9;
        let square = |ox: usize| -> Vec<bool> {
            (0..81).map(|i| {
                let (x, y) = (i % w, i / w);
                (2..=6).contains(&y) && (ox..=ox + 4).contains(&x) && (y == 2 || y == 6 || x == ox || x == ox + 4)
            }).collect()
        };
        let (t, p) = (square(2), square(3));
        assert_eq!(boundary_f1(&p, &t, 9, 9, 1).unwrap(), 1.0);
        let strict = boundary_f1(&p, &t, 9, 9, 0).unwrap();
        assert!(strict < 1.0);
        assert_eq!(strict, f1_oracle(&p, &t, 9, 0));
        assert_eq!(boundary_f1(&t, &t, 9, 9, 0).unwrap(), 1.0);
        assert_eq!(boundary_f1(&[false; 81], &[false; 81], 9, 9, 1).unwrap(), 1.0);
        assert_eq!(boundary_f1(&[false; 81], &t, 9, 9, 1).unwrap(), 0.0);
    }

    #[test]
    fn boundary_f1_matches_brute_force_on_random_maps() {
        let mut r = rng::rng(8, &[]);
        for _ in 0..200 {
            let p: Vec<bool> = (0..64).map(|_| r.random_bool(0.2)).collect();
            let t: Vec<bool> = (0..64).map(|_| r.random_bool(0.2)).collect();
            for tol in [0usize, 1, 2] {
                let a = boundary_f1(&p, &t, 8, 8, tol).unwrap();
                assert!((a - f1_oracle(&p, &t, 8, tol as i64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_and_channel_convention_free() {
        let a = gray(5, 5, |i| (i * 10) as u8);
        let b = gray(5, 5, |i| 250 - (i * 7) as u8);
        assert_eq!(depth_similarity(&a, &b).unwrap(), depth_similarity(&b, &a).unwrap());
        // Same plane written only into channel 0 ×3 average gives the same mean.
        let mut c = a.clone();
        for px in c.data.chunks_exact_mut(3) {
            let v = px[0];
            px.copy_from_slice(&[v, v, v]);
        }
        assert_eq!(depth_similarity(&c, &b).unwrap(), depth_similarity(&a, &b).unwrap());
    }

    fn examples(n: u64, size: usize) -> Vec<Example> {
        let spec = SceneSpec { min_objects: Some(1), ..SceneSpec::with_size(size, 3) };
        (0..n).map(|s| crate::dataset::make_example(&spec, format!("x{s}"), s).unwrap()).collect()
    }

    #[test]
    fn oracle_answerer_scores_one() {
        let ex = examples(40, 16);
        let answers = answer_vocabulary();
        let s = vqa_eval_with(&ex, |_, qa| Ok(answers.iter().position(|a| *a == qa.answer).unwrap())).unwrap();
        for t in [&s.spatial, &s.presence, &s.attribute] {
            assert_eq!(t.accuracy(), Some(1.0));
        }
        let bad = vqa_eval_with(&ex, |_, _| Ok(999)).unwrap();
        assert_eq!(bad.invalid, bad.spatial.total + bad.presence.total + bad.attribute.total);
    }

    #[test]
    fn empty_category_is_absent() {
        let spec = SceneSpec::with_size(16, 1);
        let ex: Vec<Example> = (0..5).map(|s| crate::dataset::make_example(&spec, format!("x{s}"), s).unwrap()).collect();
        let s = vqa_eval_with(&ex, |_, _| Ok(0)).unwrap();
        assert_eq!(s.spatial.accuracy(), None);
    }

    #[test]
    fn probe_is_sound_on_oracle_renderings() {
        for size in [16, 32] {
            let ex = examples(150, size);
            let imgs: Vec<RgbImage> = ex.iter().map(|e| e.rgb.clone()).collect();
            let caps: Vec<String> = ex.iter().map(|e| e.meta.caption.clone()).collect();
            let layers = SceneSpec::default().depth_layers;
            for (i, (img, cap)) in imgs.iter().zip(&caps).enumerate() {
                assert!(probe(img, cap, &layers), "size {size} scene {i}: {cap}");
            }
        }
    }

    #[test]
    fn probe_rejects_noise() {
        let mut r = rng::rng(1, &[]);
        let ex = examples(100, 16);
        let layers = SceneSpec::default().depth_layers;
        let noise: Vec<RgbImage> =
            (0..100).map(|_| RgbImage::new(16, 16, (0..768).map(|_| r.random_range(0..=255u8)).collect()).unwrap()).collect();
        let caps: Vec<String> = ex.iter().map(|e| e.meta.caption.clone()).collect();
        assert!(compositional_check(&noise, &caps, &layers) < 0.05);
    }

    #[test]
    fn probe_checks_order_and_color() {
        let scene = generate_scene(&SceneSpec::with_size(32, 2), 3).unwrap();
        let r = render(&scene);
        let img = RgbImage::new(32, 32, r.rgb).unwrap();
        let layers = SceneSpec::default().depth_layers;
        assert!(probe(&img, &r.caption, &layers));
        let parts: Vec<&str> = r.caption.split(" left of ").collect();
        let swapped = format!("{} left of {}", parts[1], parts[0]);
        assert!(!probe(&img, &swapped, &layers));
    }

    #[test]
    fn grid_has_five_panels_per_row() {
        let ex = examples(3, 16);
        let g = eval_grid(&ex, &BTreeMap::new(), 3).unwrap();
        assert_eq!((g.width, g.height), (80, 48));
    }
}
