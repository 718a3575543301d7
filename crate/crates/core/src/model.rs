//! The unified toy model: a patch encoder producing the visual embedding `h`,
//! a transformer trunk over `[h ; prompt]`, a single-token answer head, and a
//! paradigm-specific generation head conditioned on the trunk's image rows.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, Var};
use crate::heads::{ddpm_sample, fm_sample, maskgit_decode, NoiseSchedule, Paradigm, TokenGrid};
use crate::image::RgbImage;
use crate::params::{Group, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::task::Task;
use crate::tensor::{argmax, Mat};
use crate::text::Vocabulary;
use crate::vq::ToyVq;

const TIME_FEATURES: usize = 16;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub paradigm: Paradigm,
    pub shared_encoder: bool,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub head_layers: usize,
    pub codebook_size: usize,
    pub patch: usize,
    pub image_size: usize,
    pub max_text_len: usize,
    pub diffusion_steps: usize,
    pub fm_steps: usize,
    pub maskgit_iters: usize,
    pub mar_mlp_layers: usize,
    pub task_token: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            paradigm: Paradigm::Fm,
            shared_encoder: true,
            d: 128,
            layers: 4,
            heads: 4,
            enc_layers: 1,
            head_layers: 1,
            codebook_size: 64,
            patch: 4,
            image_size: 32,
            max_text_len: 32,
            diffusion_steps: 100,
            fm_steps: 20,
            maskgit_iters: 8,
            mar_mlp_layers: 2,
            task_token: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_layers", self.head_layers),
            ("patch", self.patch),
            ("image_size", self.image_size),
            ("max_text_len", self.max_text_len),
            ("diffusion_steps", self.diffusion_steps),
            ("fm_steps", self.fm_steps),
            ("maskgit_iters", self.maskgit_iters),
            ("mar_mlp_layers", self.mar_mlp_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!("d = {} is not divisible by heads = {}", self.d, self.heads)));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "image_size = {} is not divisible by patch = {}",
                self.image_size, self.patch
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook_size must be >= 2"));
        }
        Ok(())
    }

    /// Number of image tokens N.
    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    /// Width of one continuous patch latent.
    pub fn latent_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
enum GenIds {
    Discrete {
        /// K code rows, then a start row and a mask row.
        code_emb: ParamId,
        out: (ParamId, ParamId),
    },
    Continuous {
        input: (ParamId, ParamId),
        time: (ParamId, ParamId),
        /// Time-dependent per-coordinate gain on x_t added to the output.
        skip: (ParamId, ParamId),
        out: (ParamId, ParamId),
    },
    Mar {
        input: (ParamId, ParamId),
        /// Source-position table: row N is the start slot.
        src_pos: ParamId,
        mlp_in: (ParamId, ParamId),
        mlp_time: (ParamId, ParamId),
        mlp_skip: (ParamId, ParamId),
        mlp_hidden: Vec<(ParamId, ParamId)>,
        mlp_out: (ParamId, ParamId),
    },
}

#[derive(Debug, Clone)]
struct Ids {
    enc_in: (ParamId, ParamId),
    enc_pos: ParamId,
    enc_blocks: Vec<Block>,
    enc_ln: (ParamId, ParamId),
    tok_emb: ParamId,
    answer: (ParamId, ParamId),
    type_emb: ParamId,
    trunk_pos: ParamId,
    trunk_blocks: Vec<Block>,
    trunk_ln: (ParamId, ParamId),
    head_pos: ParamId,
    head_blocks: Vec<Block>,
    head_ln: (ParamId, ParamId),
    gen: GenIds,
}

/// Ground truth for one generation example.
#[derive(Debug, Clone, PartialEq)]
pub struct GenTarget {
    pub latent: Mat,
    /// VQ ids; present for discrete paradigms.
    pub tokens: Option<Vec<usize>>,
}

/// The random quantities a generation loss depends on, drawn up front so a
/// loss is a pure function of (parameters, example, draw).
#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    Ar,
    Maskgit { visible: Vec<bool> },
    Ddpm { t: usize, eps: Mat },
    Fm { t: f64, x0: Mat },
    Mar { order: Vec<usize>, k: usize, eps: Mat },
}

/// Sinusoidal features of a scalar time in [0, 1].
pub fn time_features(s: f64) -> Mat {
    let half = TIME_FEATURES / 2;
    let mut out = Mat::zeros(1, TIME_FEATURES);
    for i in 0..half {
        let f = (1000f64.ln() * i as f64 / (half - 1) as f64).exp();
        out.data[i] = (s * f).sin();
        out.data[half + i] = (s * f).cos();
    }
    out
}

/// Tokenizes a prompt or question, inserting the task token after BOS.
pub fn task_prompt(vocab: &Vocabulary, task: Task, text: &str, with_task_token: bool) -> Result<Vec<usize>> {
    let mut ids = vocab.encode(text)?;
    if with_task_token {
        ids.insert(1, vocab.task_token(task));
    }
    Ok(ids)
}

struct Init<'a> {
    ps: &'a mut ParamStore,
    rng: Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, group: Group, rows: usize, cols: usize, std: f64) -> ParamId {
        let m = Mat::randn(rows, cols, std, &mut self.rng);
        self.ps.add(name, group, m)
    }

    fn linear(&mut self, name: &str, group: Group, fan_in: usize, fan_out: usize, gain: f64) -> (ParamId, ParamId) {
        let w = self.normal(format!("{name}.w"), group, fan_in, fan_out, gain / (fan_in as f64).sqrt());
        let b = self.ps.add(format!("{name}.b"), group, Mat::zeros(1, fan_out));
        (w, b)
    }

    fn norm(&mut self, name: &str, group: Group, d: usize) -> (ParamId, ParamId) {
        let g = self.ps.add(format!("{name}.g"), group, Mat::filled(1, d, 1.0));
        let b = self.ps.add(format!("{name}.b"), group, Mat::zeros(1, d));
        (g, b)
    }

    fn block(&mut self, name: &str, group: Group, d: usize, depth: usize) -> Block {
        let res = 1.0 / (2.0 * depth as f64).sqrt();
        Block {
            ln1: self.norm(&format!("{name}.ln1"), group, d),
            q: self.linear(&format!("{name}.q"), group, d, d, 1.0),
            k: self.linear(&format!("{name}.k"), group, d, d, 1.0),
            v: self.linear(&format!("{name}.v"), group, d, d, 1.0),
            o: self.linear(&format!("{name}.o"), group, d, d, res),
            ln2: self.norm(&format!("{name}.ln2"), group, d),
            fc1: self.linear(&format!("{name}.fc1"), group, d, 2 * d, 1.0),
            fc2: self.linear(&format!("{name}.fc2"), group, 2 * d, d, res),
        }
    }

    fn blocks(&mut self, name: &str, group: Group, d: usize, n: usize) -> Vec<Block> {
        (0..n).map(|i| self.block(&format!("{name}.{i}"), group, d, n)).collect()
    }
}

fn block_forward(g: &mut Graph, x: Var, b: &Block, heads: usize, mask: AttnMask) -> Var {
    let a = g.layer_norm(x, b.ln1.0, b.ln1.1);
    let q = g.linear(a, b.q.0, b.q.1);
    let k = g.linear(a, b.k.0, b.k.1);
    let v = g.linear(a, b.v.0, b.v.1);
    let att = g.attention(q, k, v, heads, mask);
    let o = g.linear(att, b.o.0, b.o.1);
    let x = g.add(x, o);
    let a = g.layer_norm(x, b.ln2.0, b.ln2.1);
    let h = g.linear(a, b.fc1.0, b.fc1.1);
    let h = g.silu(h);
    let h = g.linear(h, b.fc2.0, b.fc2.1);
    g.add(x, h)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vq: ToyVq,
    pub schedule: NoiseSchedule,
    pub vocab_size: usize,
    pub n_answers: usize,
    ids: Ids,
    frozen: Vec<bool>,
}

impl Model {
    /// Builds a freshly initialized model. `vq` must be fit with the model's
    /// patch size and codebook size.
    pub fn new(config: ModelConfig, vocab_size: usize, n_answers: usize, vq: ToyVq) -> Result<Self> {
        config.validate()?;
        if vq.patch != config.patch {
            return Err(Error::config(format!("VQ patch {} differs from model patch {}", vq.patch, config.patch)));
        }
        if vq.size() != config.codebook_size {
            return Err(Error::config(format!(
                "VQ has {} codes but codebook_size = {}",
                vq.size(),
                config.codebook_size
            )));
        }
        let c = &config;
        let (d, n, p, k) = (c.d, c.tokens(), c.latent_dim(), c.codebook_size);
        let mut ps = ParamStore::new();
        let mut init = Init { ps: &mut ps, rng: rng::rng(c.seed, &[rng::stream::INIT]) };

        let enc_in = init.linear("enc.in", Group::Encoder, p, d, 1.0);
        let enc_pos = init.normal("enc.pos".into(), Group::Encoder, n, d, INIT_STD);
        let enc_blocks = init.blocks("enc.block", Group::Encoder, d, c.enc_layers);
        let enc_ln = init.norm("enc.ln", Group::Encoder, d);

        let tok_emb = init.normal("text.emb".into(), Group::TextEmbed, vocab_size, d, INIT_STD);
        let answer = init.linear("text.answer", Group::TextHead, d, n_answers, 1.0);

        let type_emb = init.normal("trunk.type".into(), Group::Trunk, 2, d, INIT_STD);
        let trunk_pos = init.normal("trunk.pos".into(), Group::Trunk, n + c.max_text_len, d, INIT_STD);
        let trunk_blocks = init.blocks("trunk.block", Group::Trunk, d, c.layers);
        let trunk_ln = init.norm("trunk.ln", Group::Trunk, d);

        let head_pos = init.normal("gen.pos".into(), Group::GenHead, n, d, INIT_STD);
        let head_blocks = init.blocks("gen.block", Group::GenHead, d, c.head_layers);
        let head_ln = init.norm("gen.ln", Group::GenHead, d);
        let gen = match c.paradigm {
            Paradigm::Ar | Paradigm::Maskgit => GenIds::Discrete {
                code_emb: init.normal("gen.code".into(), Group::GenHead, k + 2, d, INIT_STD),
                out: init.linear("gen.out", Group::GenHead, d, k, 1.0),
            },
            Paradigm::Ddpm | Paradigm::Fm => GenIds::Continuous {
                input: init.linear("gen.in", Group::GenHead, p, d, 1.0),
                time: init.linear("gen.time", Group::GenHead, TIME_FEATURES, d, 1.0),
                skip: init.linear("gen.skip", Group::GenHead, TIME_FEATURES, p, 1.0),
                out: init.linear("gen.out", Group::GenHead, d, p, 1.0),
            },
            Paradigm::Mar => GenIds::Mar {
                input: init.linear("gen.in", Group::GenHead, p, d, 1.0),
                src_pos: init.normal("gen.src_pos".into(), Group::GenHead, n + 1, d, INIT_STD),
                mlp_in: init.linear("gen.mlp.in", Group::GenHead, p, d, 1.0),
                mlp_time: init.linear("gen.mlp.time", Group::GenHead, TIME_FEATURES, d, 1.0),
                mlp_skip: init.linear("gen.mlp.skip", Group::GenHead, TIME_FEATURES, p, 1.0),
                mlp_hidden: (0..c.mar_mlp_layers - 1)
                    .map(|i| init.linear(&format!("gen.mlp.{i}"), Group::GenHead, d, d, 1.0))
                    .collect(),
                mlp_out: init.linear("gen.mlp.out", Group::GenHead, d, p, 1.0),
            },
        };
        let ids = Ids {
            enc_in,
            enc_pos,
            enc_blocks,
            enc_ln,
            tok_emb,
            answer,
            type_emb,
            trunk_pos,
            trunk_blocks,
            trunk_ln,
            head_pos,
            head_blocks,
            head_ln,
            gen,
        };
        let frozen = vec![false; ps.len()];
        let schedule = NoiseSchedule::default_linear(c.diffusion_steps);
        Ok(Model { config, params: ps, vq, schedule, vocab_size, n_answers, ids, frozen })
    }

    /// Per-parameter trainability for one step.
    pub fn trainable_mask(&self, text_trainable: bool) -> Vec<bool> {
        self.params
            .iter()
            .map(|(_, p)| match p.group {
                Group::Encoder => self.config.shared_encoder,
                Group::TextEmbed | Group::TextHead => text_trainable,
                Group::Trunk | Group::GenHead => true,
            })
            .collect()
    }

    /// Scalar counts per group plus the total; a function of the config alone.
    pub fn param_report(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for group in Group::ALL {
            out.insert(group.name().to_string(), self.params.count_by_group(group));
        }
        out.insert("total".into(), self.params.num_scalars());
        out
    }

    /// Continuous latent (and VQ ids for discrete paradigms) of a target image.
    pub fn target_for(&self, image: &RgbImage) -> Result<GenTarget> {
        let latent = image.to_latent(self.config.patch)?;
        let tokens = if self.config.paradigm.is_discrete() { Some(self.vq.encode_latent(&latent)?.ids) } else { None };
        Ok(GenTarget { latent, tokens })
    }

    fn check_input(&self, latent: &Mat) -> Result<()> {
        let want = (self.config.tokens(), self.config.latent_dim());
        if latent.shape() != want {
            return Err(Error::Shape(format!("input latent {:?}, expected {want:?}", latent.shape())));
        }
        Ok(())
    }

    fn check_text(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_text_len {
            return Err(Error::config(format!(
                "text of {} tokens; limit is {}",
                ids.len(),
                self.config.max_text_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::OutOfVocabulary(format!("token id {bad}")));
        }
        Ok(())
    }

    /// Visual embedding h (N×d) of an image given as patch latents.
    pub fn encode(&self, g: &mut Graph, latent: &Mat) -> Var {
        let x = g.constant(latent.clone());
        let mut h = g.linear(x, self.ids.enc_in.0, self.ids.enc_in.1);
        let pos = g.param(self.ids.enc_pos);
        h = g.add(h, pos);
        for b in &self.ids.enc_blocks {
            h = block_forward(g, h, b, self.config.heads, AttnMask::Full);
        }
        g.layer_norm(h, self.ids.enc_ln.0, self.ids.enc_ln.1)
    }

    /// Trunk over [h ; text]; returns all (N + len)×d output rows.
    pub fn trunk(&self, g: &mut Graph, h: Var, text: &[usize]) -> Var {
        let n = self.config.tokens();
        let t = g.gather(self.ids.tok_emb, text);
        let x = g.concat(&[h, t]);
        let types: Vec<usize> = (0..n + text.len()).map(|i| usize::from(i >= n)).collect();
        let ty = g.gather(self.ids.type_emb, &types);
        let positions: Vec<usize> = (0..n + text.len()).collect();
        let pos = g.gather(self.ids.trunk_pos, &positions);
        let mut x = g.add(x, ty);
        x = g.add(x, pos);
        for b in &self.ids.trunk_blocks {
            x = block_forward(g, x, b, self.config.heads, AttnMask::Full);
        }
        g.layer_norm(x, self.ids.trunk_ln.0, self.ids.trunk_ln.1)
    }

    /// 1×A answer logits for a question about the image.
    pub fn und_logits(&self, g: &mut Graph, latent: &Mat, question: &[usize]) -> Result<Var> {
        self.check_input(latent)?;
        self.check_text(question)?;
        let h = self.encode(g, latent);
        let out = self.trunk(g, h, question);
        let last = g.rows(out, self.config.tokens() + question.len() - 1, 1);
        Ok(g.linear(last, self.ids.answer.0, self.ids.answer.1))
    }

    pub fn und_loss(&self, g: &mut Graph, latent: &Mat, question: &[usize], answer: usize) -> Result<Var> {
        if answer >= self.n_answers {
            return Err(Error::Range(format!("answer id {answer} not in [0, {})", self.n_answers)));
        }
        let logits = self.und_logits(g, latent, question)?;
        Ok(g.cross_entropy(logits, &[Some(answer)]))
    }

    /// Conditioning state for the generation head: the trunk's N image rows.
    pub fn cond(&self, g: &mut Graph, latent: &Mat, prompt: &[usize]) -> Result<Var> {
        self.check_input(latent)?;
        self.check_text(prompt)?;
        let h = self.encode(g, latent);
        let out = self.trunk(g, h, prompt);
        Ok(g.rows(out, 0, self.config.tokens()))
    }

    fn head_stack(&self, g: &mut Graph, mut x: Var, mask: AttnMask) -> Var {
        for b in &self.ids.head_blocks {
            x = block_forward(g, x, b, self.config.heads, mask);
        }
        g.layer_norm(x, self.ids.head_ln.0, self.ids.head_ln.1)
    }

    /// N×K logits from code inputs (K = start, K+1 = mask).
    fn discrete_logits(&self, g: &mut Graph, cond: Var, inputs: &[usize], mask: AttnMask) -> Var {
        let GenIds::Discrete { code_emb, out } = &self.ids.gen else { unreachable!("discrete head") };
        let e = g.gather(*code_emb, inputs);
        let pos = g.param(self.ids.head_pos);
        let x = g.add(e, cond);
        let x = g.add(x, pos);
        let y = self.head_stack(g, x, mask);
        g.linear(y, out.0, out.1)
    }

    /// N×p prediction (noise for DDPM, velocity for FM) at time s ∈ [0, 1].
    fn continuous_pred(&self, g: &mut Graph, cond: Var, x_t: &Mat, s: f64) -> Var {
        let GenIds::Continuous { input, time, skip, out } = &self.ids.gen else { unreachable!("continuous head") };
        let xv = g.constant(x_t.clone());
        let e = g.linear(xv, input.0, input.1);
        let tf = g.constant(time_features(s));
        let te = g.linear(tf, time.0, time.1);
        let pos = g.param(self.ids.head_pos);
        let x = g.add(e, cond);
        let x = g.add(x, pos);
        let x = g.add_row(x, te);
        let y = self.head_stack(g, x, AttnMask::Full);
        let y = g.linear(y, out.0, out.1);
        Self::add_skip(g, y, xv, tf, *skip)
    }

    /// y + s(t) ⊙ x_t with s a linear function of the time features. The
    /// hidden width can be smaller than the latent, so the noise has to be
    /// able to bypass it.
    fn add_skip(g: &mut Graph, y: Var, xv: Var, tf: Var, skip: (ParamId, ParamId)) -> Var {
        let s = g.linear(tf, skip.0, skip.1);
        let ones = g.constant(Mat::filled(g.value(xv).rows, 1, 1.0));
        let gain = g.matmul(ones, s);
        let sx = g.mul(gain, xv);
        g.add(y, sx)
    }

    /// Causal conditioning vectors in generation order; row j may only depend
    /// on the clean tokens `z[order[..j]]`. Rows of `z` past the known prefix
    /// are ignored.
    fn mar_cond(&self, g: &mut Graph, cond: Var, z: &Mat, order: &[usize]) -> Var {
        let GenIds::Mar { input, src_pos, .. } = &self.ids.gen else { unreachable!("mar head") };
        let n = order.len();
        let mut inp = Mat::zeros(n, z.cols);
        for j in 1..n {
            inp.row_mut(j).copy_from_slice(z.row(order[j - 1]));
        }
        let src: Vec<usize> = std::iter::once(n).chain(order[..n - 1].iter().copied()).collect();
        let iv = g.constant(inp);
        let e = g.linear(iv, input.0, input.1);
        let sp = g.gather(*src_pos, &src);
        let pos = g.param(self.ids.head_pos);
        let cp = g.add(cond, pos);
        let tgt = g.select_rows(cp, order);
        let x = g.add(e, sp);
        let x = g.add(x, tgt);
        self.head_stack(g, x, AttnMask::Causal)
    }

    /// Per-token denoiser ε_θ(z^{(k)}, k, c).
    fn mar_denoise(&self, g: &mut Graph, c: Var, noisy: &Mat, k: usize) -> Var {
        let GenIds::Mar { mlp_in, mlp_time, mlp_skip, mlp_hidden, mlp_out, .. } = &self.ids.gen else {
            unreachable!("mar head")
        };
        let nv = g.constant(noisy.clone());
        let e = g.linear(nv, mlp_in.0, mlp_in.1);
        let tf = g.constant(time_features(k as f64 / self.schedule.steps as f64));
        let te = g.linear(tf, mlp_time.0, mlp_time.1);
        let mut y = g.add(e, c);
        y = g.add_row(y, te);
        for (w, b) in mlp_hidden {
            let a = g.silu(y);
            y = g.linear(a, *w, *b);
        }
        let a = g.silu(y);
        let y = g.linear(a, mlp_out.0, mlp_out.1);
        Self::add_skip(g, y, nv, tf, *mlp_skip)
    }

    /// Samples the random inputs of one generation loss evaluation.
    pub fn draw(&self, r: &mut Rng) -> Draw {
        let (n, p) = (self.config.tokens(), self.config.latent_dim());
        match self.config.paradigm {
            Paradigm::Ar => Draw::Ar,
            Paradigm::Maskgit => {
                let u: f64 = r.random_range(0.0..1.0);
                let masked = ((FRAC_PI_2 * u).cos() * n as f64).ceil().clamp(1.0, n as f64) as usize;
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(r);
                let mut visible = vec![true; n];
                for &i in &idx[..masked] {
                    visible[i] = false;
                }
                Draw::Maskgit { visible }
            }
            Paradigm::Ddpm => {
                let t = r.random_range(1..=self.schedule.steps);
                Draw::Ddpm { t, eps: Mat::randn(n, p, 1.0, r) }
            }
            Paradigm::Fm => {
                let t = r.random_range(0.0..1.0);
                Draw::Fm { t, x0: Mat::randn(n, p, 1.0, r) }
            }
            Paradigm::Mar => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(r);
                let k = r.random_range(1..=self.schedule.steps);
                Draw::Mar { order, k, eps: Mat::randn(n, p, 1.0, r) }
            }
        }
    }

    /// Generation loss of the configured paradigm for one example. Continuous
    /// losses are per-coordinate means, so they sit on the same scale as the
    /// cross-entropy terms regardless of patch size.
    pub fn gen_loss(&self, g: &mut Graph, latent: &Mat, prompt: &[usize], target: &GenTarget, draw: &Draw) -> Result<Var> {
        let n = self.config.tokens();
        if target.latent.shape() != (n, self.config.latent_dim()) {
            return Err(Error::Shape("target latent does not match the model".into()));
        }
        let cond = self.cond(g, latent, prompt)?;
        let tokens = || target.tokens.as_ref().ok_or_else(|| Error::config("discrete paradigm needs VQ target ids"));
        let k = self.config.codebook_size;
        let per_dim = 1.0 / self.config.latent_dim() as f64;
        Ok(match (self.config.paradigm, draw) {
            (Paradigm::Ar, Draw::Ar) => {
                let ids = tokens()?;
                let inputs: Vec<usize> = std::iter::once(k).chain(ids[..n - 1].iter().copied()).collect();
                let logits = self.discrete_logits(g, cond, &inputs, AttnMask::Causal);
                let targets: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
                g.cross_entropy(logits, &targets)
            }
            (Paradigm::Maskgit, Draw::Maskgit { visible }) => {
                let ids = tokens()?;
                if visible.iter().all(|v| *v) {
                    return Err(Error::config("mask pattern has no masked positions"));
                }
                let inputs: Vec<usize> = ids.iter().zip(visible).map(|(&i, &v)| if v { i } else { k + 1 }).collect();
                let logits = self.discrete_logits(g, cond, &inputs, AttnMask::Full);
                let targets: Vec<Option<usize>> =
                    ids.iter().zip(visible).map(|(&i, &v)| if v { None } else { Some(i) }).collect();
                g.cross_entropy(logits, &targets)
            }
            (Paradigm::Ddpm, Draw::Ddpm { t, eps }) => {
                let x_t = crate::heads::ddpm_q_sample(&self.schedule, &target.latent, *t, eps)?;
                let pred = self.continuous_pred(g, cond, &x_t, *t as f64 / self.schedule.steps as f64);
                let l = g.sq_err(pred, eps);
                g.scale(l, per_dim)
            }
            (Paradigm::Fm, Draw::Fm { t, x0 }) => {
                let x_t = crate::heads::fm_interpolate(x0, &target.latent, *t)?;
                let pred = self.continuous_pred(g, cond, &x_t, *t);
                let l = g.sq_err(pred, &crate::heads::fm_target(x0, &target.latent));
                g.scale(l, per_dim)
            }
            (Paradigm::Mar, Draw::Mar { order, k, eps }) => {
                let (noisy, eps_ord) = crate::heads::mar_noisy_tokens(&self.schedule, &target.latent, order, *k, eps)?;
                let c = self.mar_cond(g, cond, &target.latent, order);
                let pred = self.mar_denoise(g, c, &noisy, *k);
                let l = g.sq_err(pred, &eps_ord);
                g.scale(l, per_dim)
            }
            (p, _) => return Err(Error::config(format!("draw does not match paradigm {p}"))),
        })
    }

    fn inference_graph(&self) -> Graph<'_> {
        Graph::new(&self.params, &self.frozen)
    }

    /// Answer logits without gradient bookkeeping.
    pub fn answer_logits(&self, latent: &Mat, question: &[usize]) -> Result<Mat> {
        let mut g = self.inference_graph();
        let v = self.und_logits(&mut g, latent, question)?;
        Ok(g.value(v).clone())
    }

    pub fn answer(&self, latent: &Mat, question: &[usize]) -> Result<usize> {
        Ok(argmax(self.answer_logits(latent, question)?.row(0)))
    }

    /// Loss value for fixed inputs, without gradients.
    pub fn gen_loss_value(&self, latent: &Mat, prompt: &[usize], target: &GenTarget, draw: &Draw) -> Result<f64> {
        let mut g = self.inference_graph();
        let v = self.gen_loss(&mut g, latent, prompt, target, draw)?;
        Ok(g.value(v).item())
    }

    /// Runs the paradigm's sampler and returns the generated patch latent.
    pub fn generate(&self, latent: &Mat, prompt: &[usize], seed: u64) -> Result<Mat> {
        let (n, p, k) = (self.config.tokens(), self.config.latent_dim(), self.config.codebook_size);
        let cond_val = {
            let mut g = self.inference_graph();
            let c = self.cond(&mut g, latent, prompt)?;
            g.value(c).clone()
        };
        let with_cond = |g: &mut Graph| g.constant(cond_val.clone());
        match self.config.paradigm {
            Paradigm::Ar => {
                let mut ids: Vec<usize> = Vec::with_capacity(n);
                for i in 0..n {
                    let inputs: Vec<usize> =
                        std::iter::once(k).chain(ids.iter().copied()).chain(std::iter::repeat(k)).take(n).collect();
                    let mut g = self.inference_graph();
                    let c = with_cond(&mut g);
                    let logits = self.discrete_logits(&mut g, c, &inputs, AttnMask::Causal);
                    ids.push(argmax(g.value(logits).row(i)));
                }
                self.vq.decode_latent(&TokenGrid::new(ids, k)?)
            }
            Paradigm::Maskgit => {
                let grid = maskgit_decode(
                    |cur| {
                        let inputs: Vec<usize> = cur.iter().map(|t| t.unwrap_or(k + 1)).collect();
                        let mut g = self.inference_graph();
                        let c = with_cond(&mut g);
                        let logits = self.discrete_logits(&mut g, c, &inputs, AttnMask::Full);
                        g.value(logits).clone()
                    },
                    n,
                    k,
                    self.config.maskgit_iters,
                    1.0,
                    seed,
                )?;
                self.vq.decode_latent(&grid)
            }
            Paradigm::Ddpm => {
                let steps = self.schedule.steps as f64;
                Ok(ddpm_sample(
                    |x, t| {
                        let mut g = self.inference_graph();
                        let c = with_cond(&mut g);
                        let v = self.continuous_pred(&mut g, c, x, t as f64 / steps);
                        g.value(v).clone()
                    },
                    &self.schedule,
                    n,
                    p,
                    seed,
                ))
            }
            Paradigm::Fm => fm_sample(
                |x, t| {
                    let mut g = self.inference_graph();
                    let c = with_cond(&mut g);
                    let v = self.continuous_pred(&mut g, c, x, t);
                    g.value(v).clone()
                },
                n,
                p,
                self.config.fm_steps,
                seed,
            ),
            Paradigm::Mar => {
                let mut r = rng::rng(seed, &[rng::stream::SAMPLE]);
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut r);
                let mut z = Mat::zeros(n, p);
                for j in 0..n {
                    let cj = {
                        let mut g = self.inference_graph();
                        let c = with_cond(&mut g);
                        let all = self.mar_cond(&mut g, c, &z, &order);
                        g.value(all).rows_range(j, 1)
                    };
                    let token = ddpm_sample(
                        |x, t| {
                            let mut g = self.inference_graph();
                            let c = g.constant(cj.clone());
                            let v = self.mar_denoise(&mut g, c, x, t);
                            g.value(v).clone()
                        },
                        &self.schedule,
                        1,
                        p,
                        rng::derive(seed, &[j as u64]),
                    );
                    z.row_mut(order[j]).copy_from_slice(token.row(0));
                }
                Ok(z)
            }
        }
    }
}
