//! Browser bindings: scene synthesis with its oracle targets, a forward-noise
//! explorer for the diffusion and flow paths, and the MaskGIT unmasking
//! schedule.

use wasm_bindgen::prelude::*;

use repgen::dataset::make_example;
use repgen::heads::{cosine_mask_ratio, fm_interpolate, q_sample_with, NoiseSchedule};
use repgen::image::RgbImage;
use repgen::rng::{self, stream};
use repgen::scene::SceneSpec;
use repgen::tensor::Mat;

const PATCH: usize = 4;

fn js_err(e: repgen::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.data.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn spec(size: usize, n_objects: usize) -> Result<SceneSpec, JsValue> {
    if size == 0 || !size.is_multiple_of(PATCH) {
        return Err(JsValue::from_str(&format!("size must be a positive multiple of {PATCH}")));
    }
    let s = SceneSpec { min_objects: Some(1), ..SceneSpec::with_size(size, n_objects) };
    s.validate().map_err(js_err)?;
    Ok(s)
}

/// A rendered scene and its training targets, as RGBA buffers.
#[wasm_bindgen]
pub struct SceneView {
    size: usize,
    rgb: Vec<u8>,
    depth: Vec<u8>,
    seg: Vec<u8>,
    caption: String,
    qa: String,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgb.clone()
    }

    pub fn depth_rgba(&self) -> Vec<u8> {
        self.depth.clone()
    }

    pub fn seg_rgba(&self) -> Vec<u8> {
        self.seg.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn caption(&self) -> String {
        self.caption.clone()
    }

    /// One "question -> answer" per line.
    #[wasm_bindgen(getter)]
    pub fn qa(&self) -> String {
        self.qa.clone()
    }
}

#[wasm_bindgen]
pub fn synthesize(seed: u32, size: usize, n_objects: usize) -> Result<SceneView, JsValue> {
    let ex = make_example(&spec(size, n_objects)?, format!("demo_{seed}"), seed as u64).map_err(js_err)?;
    let qa = ex.meta.qa.iter().map(|q| format!("{} -> {}", q.question, q.answer)).collect::<Vec<_>>().join("\n");
    Ok(SceneView {
        size,
        rgb: rgba(&ex.rgb),
        depth: rgba(&ex.depth),
        seg: rgba(&ex.seg),
        caption: ex.meta.caption,
        qa,
    })
}

/// The scene pushed along a forward path. `kind` is "ddpm" (level = step
/// t of a 100-step linear schedule) or "fm" (level = percent along the
/// noise-to-data line, 100 being the clean image).
#[wasm_bindgen]
pub fn noised(seed: u32, size: usize, n_objects: usize, kind: &str, level: usize) -> Result<Vec<u8>, JsValue> {
    let ex = make_example(&spec(size, n_objects)?, String::new(), seed as u64).map_err(js_err)?;
    let x = ex.rgb.to_latent(PATCH).map_err(js_err)?;
    let mut r = rng::rng(seed as u64, &[stream::NOISE]);
    let eps = Mat::randn(x.rows, x.cols, 1.0, &mut r);
    let y = match kind {
        "ddpm" => {
            let sched = NoiseSchedule::default_linear(100);
            if level == 0 {
                x
            } else {
                sched.check_step(level).map_err(js_err)?;
                q_sample_with(sched.alpha_bar(level), &x, &eps).map_err(js_err)?
            }
        }
        "fm" => fm_interpolate(&eps, &x, level.min(100) as f64 / 100.0).map_err(js_err)?,
        other => return Err(JsValue::from_str(&format!("unknown path {other:?}"))),
    };
    Ok(rgba(&RgbImage::from_latent(&y, size, size, PATCH).map_err(js_err)?))
}

/// Tokens still masked after each MaskGIT iteration for `n_tokens` tokens.
/// Every iteration reveals at least one token; the last reveals the rest.
#[wasm_bindgen]
pub fn mask_schedule(n_tokens: usize, iters: usize) -> Vec<u32> {
    let mut masked = n_tokens;
    let mut out = Vec::with_capacity(iters);
    for i in 1..=iters {
        if masked > 0 {
            masked = if i == iters { 0 } else { ((n_tokens as f64 * cosine_mask_ratio(i, iters)).floor() as usize).min(masked - 1) };
        }
        out.push(masked as u32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_buffers_are_rgba() {
        let v = synthesize(3, 32, 3).ok().unwrap();
        assert_eq!(v.rgba().len(), 32 * 32 * 4);
        assert_eq!(v.depth_rgba().len(), v.seg_rgba().len());
        assert!(!v.caption().is_empty());
    }

    #[test]
    fn clean_ends_of_both_paths_return_the_scene() {
        let v = synthesize(5, 16, 2).ok().unwrap();
        assert_eq!(noised(5, 16, 2, "ddpm", 0).ok().unwrap(), v.rgba());
        assert_eq!(noised(5, 16, 2, "fm", 100).ok().unwrap(), v.rgba());
        assert_ne!(noised(5, 16, 2, "ddpm", 100).ok().unwrap(), v.rgba());
    }

    #[test]
    fn schedule_ends_fully_unmasked() {
        let s = mask_schedule(64, 8);
        assert_eq!(s.len(), 8);
        assert_eq!(*s.last().unwrap(), 0);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }
}
