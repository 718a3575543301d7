//! Procedural toy scenes with exact ground truth.
//!
//! A scene is a handful of flat-colored primitives on a light gray background.
//! Each object sits on one of a few depth layers; nearer objects are drawn
//! larger and with less atmospheric haze, so depth is recoverable from the
//! image alone. Rendering is integer rasterization, so the RGB image, depth
//! field and instance masks agree bit-exactly.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const BACKGROUND_RGB: [u8; 3] = [200, 200, 200];
pub const BACKGROUND_DEPTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the offset (dx, dy) from the center lies inside a primitive of
    /// the given radius.
    pub fn covers(self, dx: i64, dy: i64, radius: i64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= radius * radius + radius,
            Shape::Square => dx.abs() < radius && dy.abs() < radius,
            Shape::Triangle => dy >= -radius && dy < radius && 2 * dx.abs() <= dy + radius,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 70, 220],
            Color::Yellow => [235, 215, 30],
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Haze percentage applied to an object at `depth`: its color is blended this
/// far toward the background.
pub fn haze_percent(depth: f64) -> u32 {
    (depth * 50.0).round() as u32
}

/// Rendered color of `color` at `depth` (integer blend toward the background).
pub fn shaded_rgb(color: Color, depth: f64) -> [u8; 3] {
    let f = haze_percent(depth);
    let base = color.rgb();
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = base[c] as u32 * (100 - f) + BACKGROUND_RGB[c] as u32 * f;
        out[c] = ((v + 50) / 100) as u8;
    }
    out
}

/// Pixel radius of an object at `depth` in an image with side `image_size`.
pub fn radius_for_depth(image_size: usize, depth: f64) -> i64 {
    let r = (image_size as f64 * (3.0 - 2.0 * depth) / 10.0).round() as i64;
    r.max(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    /// Maximum object count.
    pub n_objects: usize,
    /// Minimum object count; defaults to `n_objects` (fixed count).
    #[serde(default)]
    pub min_objects: Option<usize>,
    pub depth_layers: Vec<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 32,
            n_objects: 3,
            min_objects: None,
            depth_layers: vec![0.2, 0.4, 0.6, 0.8],
        }
    }
}

impl SceneSpec {
    pub fn with_size(image_size: usize, n_objects: usize) -> Self {
        SceneSpec { image_size, n_objects, ..Default::default() }
    }

    pub fn min_count(&self) -> usize {
        self.min_objects.unwrap_or(self.n_objects)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config(format!(
                "image_size must be >= 16 (got {})",
                self.image_size
            )));
        }
        if !(1..=3).contains(&self.n_objects) {
            return Err(Error::config(format!(
                "n_objects must be in [1,3] (got {})",
                self.n_objects
            )));
        }
        let min = self.min_count();
        if min < 1 || min > self.n_objects {
            return Err(Error::config(format!(
                "min_objects must be in [1, n_objects] (got {min})"
            )));
        }
        if self.n_objects > self.depth_layers.len() {
            return Err(Error::config(format!(
                "n_objects ({}) exceeds the number of depth layers ({})",
                self.n_objects,
                self.depth_layers.len()
            )));
        }
        if self.n_objects > Color::ALL.len() {
            return Err(Error::config("n_objects exceeds the color vocabulary"));
        }
        for (i, &d) in self.depth_layers.iter().enumerate() {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config(format!("depth layer {i} = {d} not in (0,1)")));
            }
            if self.depth_layers[..i].contains(&d) {
                return Err(Error::config(format!("depth layer {d} is not distinct")));
            }
        }
        let largest = self
            .depth_layers
            .iter()
            .map(|&d| radius_for_depth(self.image_size, d))
            .max()
            .unwrap_or(0);
        if (2 * largest + 1) as usize > self.image_size {
            return Err(Error::config("largest object does not fit in the image"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub center: [i64; 2],
    pub radius: i64,
    pub depth: f64,
}

impl SceneObject {
    pub fn covers(&self, x: i64, y: i64) -> bool {
        self.shape.covers(x - self.center[0], y - self.center[1], self.radius)
    }

    /// "<color> <shape>", the answer-vocabulary name of this object.
    pub fn label(&self) -> String {
        format!("{} {}", self.color, self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Sorted near-to-far.
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaCategory {
    Spatial,
    Presence,
    Attribute,
}

impl QaCategory {
    pub const ALL: [QaCategory; 3] = [QaCategory::Spatial, QaCategory::Presence, QaCategory::Attribute];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub category: QaCategory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub size: usize,
    /// Row-major H×W×3.
    pub rgb: Vec<u8>,
    /// Row-major H×W.
    pub depth_raw: Vec<f64>,
    /// One H×W 0/1 mask per object, in object order.
    pub masks: Vec<Vec<u8>>,
    pub caption: String,
    pub qa: Vec<QaPair>,
}

const MAX_PLACEMENT_TRIES: usize = 10_000;

fn placement_ok(placed: &[SceneObject], cand: &SceneObject) -> bool {
    placed.iter().all(|o| {
        let dx = o.center[0] - cand.center[0];
        let dy = o.center[1] - cand.center[1];
        let min_dist = o.radius.max(cand.radius) + 2;
        dx.abs() >= 3 && dx * dx + dy * dy >= min_dist * min_dist
    })
}

/// Generates a scene as a pure function of `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng::rng(seed, &[stream::SCENE]);
    let n = rng.random_range(spec.min_count()..=spec.n_objects);

    let mut layers = spec.depth_layers.clone();
    layers.shuffle(&mut rng);
    let mut colors = Color::ALL.to_vec();
    colors.shuffle(&mut rng);

    let size = spec.image_size as i64;
    'attempt: loop {
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for i in 0..n {
            let depth = layers[i];
            let radius = radius_for_depth(spec.image_size, depth);
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let mut found = false;
            for _ in 0..MAX_PLACEMENT_TRIES {
                let cx = rng.random_range(radius..size - radius);
                let cy = rng.random_range(radius..size - radius);
                let cand = SceneObject { shape, color: colors[i], center: [cx, cy], radius, depth };
                if placement_ok(&objects, &cand) {
                    objects.push(cand);
                    found = true;
                    break;
                }
            }
            if !found {
                continue 'attempt;
            }
        }
        objects.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        return Ok(Scene { spec: spec.clone(), objects, seed });
    }
}

/// Index of the nearest object covering (x, y), if any. Objects are sorted
/// near-to-far so the first hit wins.
fn nearest_covering(objects: &[SceneObject], x: i64, y: i64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, o) in objects.iter().enumerate() {
        if o.covers(x, y) && best.is_none_or(|b| o.depth < objects[b].depth) {
            best = Some(k);
        }
    }
    best
}

/// Left-to-right caption, e.g. "a red circle left of a blue square".
pub fn caption(scene: &Scene) -> String {
    let mut objs: Vec<&SceneObject> = scene.objects.iter().collect();
    objs.sort_by_key(|o| o.center[0]);
    objs.iter()
        .map(|o| format!("a {}", o.label()))
        .collect::<Vec<_>>()
        .join(" left of ")
}

pub fn render(scene: &Scene) -> RenderedScene {
    let size = scene.spec.image_size;
    let n = scene.objects.len();
    let mut rgb = vec![0u8; size * size * 3];
    let mut depth_raw = vec![BACKGROUND_DEPTH; size * size];
    let mut masks = vec![vec![0u8; size * size]; n];
    let shades: Vec<[u8; 3]> = scene.objects.iter().map(|o| shaded_rgb(o.color, o.depth)).collect();

    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let px = match nearest_covering(&scene.objects, x as i64, y as i64) {
                Some(k) => {
                    depth_raw[p] = scene.objects[k].depth;
                    masks[k][p] = 1;
                    shades[k]
                }
                None => BACKGROUND_RGB,
            };
            rgb[p * 3..p * 3 + 3].copy_from_slice(&px);
        }
    }

    RenderedScene {
        size,
        rgb,
        depth_raw,
        masks,
        caption: caption(scene),
        qa: make_qa(scene, scene.seed),
    }
}

pub fn spatial_question(a: &SceneObject, b: &SceneObject) -> String {
    format!("Which is closer, the {} or the {}?", a.label(), b.label())
}

pub fn presence_question(color: Color, shape: Shape) -> String {
    format!("Is there a {color} {shape}?")
}

pub fn attribute_question(shape: Shape) -> String {
    format!("What color is the {shape}?")
}

/// Question/answer pairs derivable from the object list alone.
///
/// Spatial: one per object pair, mention order randomized. Presence: one,
/// about a present object or an absent color-shape combination with equal
/// probability. Attribute: one per shape that occurs exactly once.
pub fn make_qa(scene: &Scene, seed: u64) -> Vec<QaPair> {
    let mut rng = rng::rng(seed, &[stream::QA]);
    let objs = &scene.objects;
    let mut qa = Vec::new();

    for i in 0..objs.len() {
        for j in i + 1..objs.len() {
            let (a, b) = if rng.random_bool(0.5) { (&objs[i], &objs[j]) } else { (&objs[j], &objs[i]) };
            let closer = if a.depth < b.depth { a } else { b };
            qa.push(QaPair {
                question: spatial_question(a, b),
                answer: closer.label(),
                category: QaCategory::Spatial,
            });
        }
    }

    let present: Vec<(Color, Shape)> = objs.iter().map(|o| (o.color, o.shape)).collect();
    let absent: Vec<(Color, Shape)> = Color::ALL
        .iter()
        .flat_map(|&c| Shape::ALL.iter().map(move |&s| (c, s)))
        .filter(|cs| !present.contains(cs))
        .collect();
    let ask_present = !objs.is_empty() && rng.random_bool(0.5);
    let (c, s, ans) = if ask_present {
        let (c, s) = present[rng.random_range(0..present.len())];
        (c, s, "yes")
    } else {
        let (c, s) = absent[rng.random_range(0..absent.len())];
        (c, s, "no")
    };
    qa.push(QaPair {
        question: presence_question(c, s),
        answer: ans.to_string(),
        category: QaCategory::Presence,
    });

    for shape in Shape::ALL {
        let matching: Vec<&SceneObject> = objs.iter().filter(|o| o.shape == shape).collect();
        if let [only] = matching.as_slice() {
            qa.push(QaPair {
                question: attribute_question(shape),
                answer: only.color.name().to_string(),
                category: QaCategory::Attribute,
            });
        }
    }
    qa
}

/// The closed answer vocabulary: yes/no, colors, then "<color> <shape>" bigrams.
pub fn answer_vocabulary() -> Vec<String> {
    let mut v = vec!["yes".to_string(), "no".to_string()];
    v.extend(Color::ALL.iter().map(|c| c.name().to_string()));
    for c in Color::ALL {
        for s in Shape::ALL {
            v.push(format!("{c} {s}"));
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: Shape, color: Color, c: [i64; 2], r: i64, depth: f64) -> SceneObject {
        SceneObject { shape, color, center: c, radius: r, depth }
    }

    fn scene_of(size: usize, objects: Vec<SceneObject>) -> Scene {
        Scene { spec: SceneSpec::with_size(size, objects.len().max(1)), objects, seed: 0 }
    }

    #[test]
    fn single_object_inside_bounds() {
        let spec = SceneSpec::with_size(32, 1);
        let s = generate_scene(&spec, 0).unwrap();
        assert_eq!(s.objects.len(), 1);
        let o = &s.objects[0];
        assert!(o.center[0] - o.radius >= 0 && o.center[0] + o.radius < 32);
        assert!(o.center[1] - o.radius >= 0 && o.center[1] + o.radius < 32);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 42).unwrap();
        let b = generate_scene(&spec, 42).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn three_objects_distinct_colors_and_depths() {
        let spec = SceneSpec::default();
        let s = generate_scene(&spec, 7).unwrap();
        assert_eq!(s.objects.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(s.objects[i].color, s.objects[j].color);
                assert_ne!(s.objects[i].depth, s.objects[j].depth);
            }
        }
        assert!(s.objects.windows(2).all(|w| w[0].depth < w[1].depth));
    }

    #[test]
    fn invalid_spec_names_invariant() {
        let mut spec = SceneSpec::with_size(8, 1);
        let err = generate_scene(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("image_size"), "{err}");
        spec = SceneSpec::with_size(32, 4);
        assert!(generate_scene(&spec, 0).unwrap_err().to_string().contains("n_objects"));
        spec = SceneSpec { depth_layers: vec![0.2, 0.2, 0.4], ..SceneSpec::default() };
        assert!(generate_scene(&spec, 0).unwrap_err().to_string().contains("distinct"));
    }

    #[test]
    fn red_circle_pixels_match_mask() {
        let s = scene_of(32, vec![obj(Shape::Circle, Color::Red, [16, 16], 6, 0.2)]);
        let r = render(&s);
        let red = shaded_rgb(Color::Red, 0.2);
        for p in 0..32 * 32 {
            let is_red = r.rgb[p * 3..p * 3 + 3] == red;
            assert_eq!(is_red, r.masks[0][p] == 1);
        }
    }

    #[test]
    fn overlap_carries_nearest_depth() {
        let s = scene_of(
            32,
            vec![
                obj(Shape::Square, Color::Red, [12, 12], 6, 0.2),
                obj(Shape::Square, Color::Blue, [16, 16], 6, 0.6),
            ],
        );
        let r = render(&s);
        let mut overlaps = 0;
        for y in 0..32i64 {
            for x in 0..32i64 {
                if s.objects[0].covers(x, y) && s.objects[1].covers(x, y) {
                    overlaps += 1;
                    let p = (y * 32 + x) as usize;
                    assert_eq!(r.depth_raw[p], 0.2);
                    assert_eq!(r.masks[0][p], 1);
                    assert_eq!(r.masks[1][p], 0);
                }
            }
        }
        assert!(overlaps > 0);
    }

    #[test]
    fn disjoint_mask_area_equals_foreground_count() {
        let s = scene_of(
            32,
            vec![
                obj(Shape::Circle, Color::Red, [7, 7], 4, 0.2),
                obj(Shape::Triangle, Color::Green, [22, 22], 5, 0.4),
            ],
        );
        let r = render(&s);
        let mask_area: usize = r.masks.iter().map(|m| m.iter().map(|&v| v as usize).sum::<usize>()).sum();
        let fg = (0..32 * 32).filter(|&p| r.rgb[p * 3..p * 3 + 3] != BACKGROUND_RGB).count();
        // brute-force count straight from the primitives
        let brute = (0..32i64)
            .flat_map(|y| (0..32i64).map(move |x| (x, y)))
            .filter(|&(x, y)| s.objects.iter().any(|o| o.covers(x, y)))
            .count();
        assert_eq!(mask_area, fg);
        assert_eq!(mask_area, brute);
    }

    #[test]
    fn qa_examples() {
        let s = scene_of(
            32,
            vec![
                obj(Shape::Circle, Color::Red, [8, 8], 6, 0.2),
                obj(Shape::Square, Color::Blue, [22, 22], 4, 0.6),
            ],
        );
        let qa = make_qa(&s, 3);
        let spatial = qa.iter().find(|q| q.category == QaCategory::Spatial).unwrap();
        assert_eq!(spatial.answer, "red circle");
        assert!(
            spatial.question == "Which is closer, the red circle or the blue square?"
                || spatial.question == "Which is closer, the blue square or the red circle?"
        );

        let single = scene_of(32, vec![obj(Shape::Square, Color::Green, [16, 16], 5, 0.4)]);
        let qa = make_qa(&single, 0);
        let attr = qa.iter().find(|q| q.category == QaCategory::Attribute).unwrap();
        assert_eq!(attr.question, "What color is the square?");
        assert_eq!(attr.answer, "green");
        assert!(qa.iter().all(|q| q.category != QaCategory::Spatial));
    }

    #[test]
    fn absent_combination_answers_no() {
        // Over several seeds a presence question about an absent object must say "no".
        let s = scene_of(32, vec![obj(Shape::Circle, Color::Red, [16, 16], 6, 0.2)]);
        let mut saw_no = false;
        for seed in 0..50 {
            for q in make_qa(&s, seed).into_iter().filter(|q| q.category == QaCategory::Presence) {
                if q.question != "Is there a red circle?" {
                    assert_eq!(q.answer, "no");
                    saw_no = true;
                } else {
                    assert_eq!(q.answer, "yes");
                }
            }
        }
        assert!(saw_no);
    }

    #[test]
    fn answers_are_in_closed_vocabulary() {
        let vocab = answer_vocabulary();
        assert_eq!(vocab.len(), 18);
        for seed in 0..50 {
            let s = generate_scene(&SceneSpec::default(), seed).unwrap();
            for q in render(&s).qa {
                assert!(vocab.contains(&q.answer), "{}", q.answer);
            }
        }
    }
}
