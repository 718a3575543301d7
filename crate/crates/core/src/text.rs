//! Word-level tokenization over a closed vocabulary, and the per-task prompt
//! pools used to phrase generation requests.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::scene::{Color, Shape};
use crate::task::Task;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

pub const SPECIALS: [&str; 7] = [BOS, EOS, PAD, "<task_und>", "<task_pixel>", "<task_depth>", "<task_seg>"];

pub const DEPTH_PROMPTS: [&str; 10] = [
    "Generate the depth map of this image.",
    "Produce a depth estimation for this image.",
    "Compute the depth map from this photograph.",
    "Extract depth information from this picture.",
    "Show me the depth map.",
    "What is the depth of this image?",
    "Provide the depth estimation.",
    "Perform depth estimation on this image.",
    "Apply monocular depth prediction.",
    "Generate per-pixel depth values.",
];

pub const SEG_PROMPTS: [&str; 10] = [
    "Generate the segmentation mask of this image.",
    "Create a segmentation map for this image.",
    "Produce a semantic segmentation mask from this image.",
    "Segment this image into different regions.",
    "Predict the object masks in this image.",
    "Compute the segmentation from this photograph.",
    "Produce an object separation mask.",
    "Segment the foreground from background.",
    "Segment everything in this image.",
    "Generate automatic masks for all objects.",
];

/// Reconstruction prompts: the canonical request plus paraphrases of our own.
pub const PIXEL_PROMPTS: [&str; 6] = [
    "Generate original image for the input image",
    "Reconstruct the input image.",
    "Reproduce this image exactly.",
    "Generate an identical copy of this image.",
    "Redraw the input picture.",
    "Recreate this photograph.",
];

/// Words used by the question and caption grammars.
const GRAMMAR_WORDS: [&str; 15] = [
    "which", "is", "closer", "the", "or", "there", "a", "what", "color", "left", "of", "yes", "no", "and", "right",
];

/// Lowercases, strips punctuation (hyphens inside words are kept) and splits
/// on whitespace.
pub fn canonical_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn canonicalize(text: &str) -> String {
    canonical_words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::config(format!("vocabulary must start with special token {s} at id {i}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// The built-in vocabulary: specials, then every word of the grammars and
    /// prompt pools in sorted order.
    pub fn builtin() -> Self {
        let mut words: Vec<String> = GRAMMAR_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        for p in DEPTH_PROMPTS.iter().chain(SEG_PROMPTS.iter()).chain(PIXEL_PROMPTS.iter()) {
            words.extend(canonical_words(p));
        }
        words.sort();
        words.dedup();
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Vocabulary::from_tokens(tokens).expect("builtin vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn pad(&self) -> usize {
        2
    }

    pub fn task_token(&self, task: Task) -> usize {
        3 + task.index()
    }

    /// Token ids bracketed by BOS/EOS.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = vec![self.bos()];
        for w in canonical_words(text) {
            out.push(self.id(&w).ok_or(Error::OutOfVocabulary(w))?);
        }
        out.push(self.eos());
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != self.bos() && i != self.eos() && i != self.pad())
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("string list serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&s).map_err(|e| Error::Json { path: path.into(), source: e })?;
        Vocabulary::from_tokens(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPool {
    pub task: Task,
    pub prompts: Vec<String>,
}

impl PromptPool {
    pub fn new(task: Task, prompts: Vec<String>) -> Result<Self> {
        if !task.is_generation() {
            return Err(Error::config("prompt pools exist only for generation tasks"));
        }
        if prompts.is_empty() {
            return Err(Error::config(format!("prompt pool for {task} is empty")));
        }
        Ok(PromptPool { task, prompts })
    }

    pub fn builtin(task: Task) -> Self {
        let list: &[&str] = match task {
            Task::Pixel => &PIXEL_PROMPTS,
            Task::Depth => &DEPTH_PROMPTS,
            Task::Seg => &SEG_PROMPTS,
            Task::Und => panic!("no prompt pool for the understanding task"),
        };
        PromptPool { task, prompts: list.iter().map(|s| s.to_string()).collect() }
    }

    /// Uniform draw, deterministic in `seed`.
    pub fn sample(&self, seed: u64) -> &str {
        let mut rng = rng::rng(seed, &[stream::PROMPT, self.task.index() as u64]);
        &self.prompts[rng.random_range(0..self.prompts.len())]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}.txt", self.task));
        let mut body = self.prompts.join("\n");
        body.push('\n');
        fs::write(&path, body).map_err(|e| Error::io(path, e))
    }

    /// Loads `<dir>/<task>.txt`, one prompt per line, verbatim.
    pub fn load(dir: &Path, task: Task) -> Result<Self> {
        let path = dir.join(format!("{task}.txt"));
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let prompts = body.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
        PromptPool::new(task, prompts)
    }
}

pub fn sample_prompt(pool: &PromptPool, seed: u64) -> &str {
    pool.sample(seed)
}
