//! The report generator network.
//!
//! A strided convolutional encoder turns each view into a grid of tokens.
//! Depending on the ablation, the image tokens are concatenated with frozen
//! topic embeddings and mixed by a stack of `LN(X + MHA(X))` layers before a
//! transformer decoder cross-attends to them. The alignment branch (pooled
//! image projection, report encoder, temperature) exists only to shape the
//! encoder during training and is never read at inference.

pub mod checkpoint;
mod decode;
mod params;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use decode::IncrementalDecoder;
pub use params::{group_of, ParamGroup, ParamStore};

use crate::autograd::{ConvGeom, Graph, Real, Var};
use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeBase, RegionTag, TopicEmbedder};
use crate::tokenizer::{BOS, NUM_SPECIALS};
use params::{ones, zeros, Init};

/// Total downsampling of the image encoder.
pub const ENCODER_STRIDE: usize = 32;
const ENCODER_STAGES: usize = 5;

/// Which branches of the model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Encoder and decoder only.
    Base,
    /// Knowledge aggregation over every topic, ignoring the region tag.
    RadkaStar,
    /// Knowledge aggregation over the tagged region's topics.
    Radka,
    /// Region knowledge aggregation plus the training-time alignment branch.
    S4m,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Base, Ablation::RadkaStar, Ablation::Radka, Ablation::S4m];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::RadkaStar => "radka_star",
            Ablation::Radka => "radka",
            Ablation::S4m => "s4m",
        }
    }

    pub fn uses_knowledge(self) -> bool {
        self != Ablation::Base
    }

    pub fn uses_indicator(self) -> bool {
        matches!(self, Ablation::Radka | Ablation::S4m)
    }

    pub fn uses_ipg(self) -> bool {
        self == Ablation::S4m
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown ablation {s:?}; expected one of base, radka_star, radka, s4m"
            ))
        })
    }
}

/// Reduction of image tokens to one vector before the alignment projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Mean,
    Max,
    /// A learned query attending over the tokens.
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub ablation: Ablation,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    pub agg_layers: usize,
    /// Depth of the report encoder used by the alignment branch.
    pub text_layers: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Input side length; must be a multiple of 32.
    pub image_size: usize,
    pub in_channels: usize,
    /// Output widths of the first four encoder stages (the fifth emits `d`).
    pub encoder_channels: Vec<usize>,
    /// Kernel size per encoder stage; every stage has stride 2.
    pub encoder_kernels: Vec<usize>,
    /// Width of the frozen topic embeddings; a learned adapter maps them to
    /// `d` only when the widths differ.
    pub topic_dim: usize,
    pub topic_seed: u64,
    pub shared_dim: usize,
    pub lambda: f64,
    pub tau_init: f64,
    pub pool: Pool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ablation: Ablation::S4m,
            d: 128,
            heads: 8,
            d_ff: 512,
            decoder_layers: 3,
            agg_layers: 3,
            text_layers: 1,
            dropout: 0.1,
            vocab_size: 0,
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
            image_size: 224,
            in_channels: 1,
            encoder_channels: vec![16, 32, 64, 128],
            encoder_kernels: vec![2, 2, 3, 3, 3],
            topic_dim: 128,
            topic_seed: 0,
            shared_dim: 128,
            lambda: 1.0,
            tau_init: 0.07,
            pool: Pool::Mean,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.tau_init > 0.0) {
            return bad(format!("tau_init must be positive, got {}", self.tau_init));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(ENCODER_STRIDE) {
            return bad(format!("image_size {} must be a positive multiple of {ENCODER_STRIDE}", self.image_size));
        }
        if self.encoder_channels.len() != ENCODER_STAGES - 1 || self.encoder_channels.contains(&0) {
            return bad(format!("encoder_channels needs {} positive widths", ENCODER_STAGES - 1));
        }
        if self.encoder_kernels.len() != ENCODER_STAGES || self.encoder_kernels.iter().any(|&k| k < 2) {
            return bad(format!("encoder_kernels needs {ENCODER_STAGES} sizes of at least 2"));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.in_channels == 0 || self.d_ff == 0 || self.decoder_layers == 0 {
            return bad("in_channels, d_ff and decoder_layers must be positive".into());
        }
        if self.ablation.uses_knowledge() && (self.agg_layers == 0 || self.topic_dim == 0) {
            return bad("knowledge aggregation needs agg_layers ≥ 1 and topic_dim ≥ 1".into());
        }
        if self.ablation.uses_ipg() && (self.shared_dim == 0 || self.text_layers == 0) {
            return bad("the alignment branch needs shared_dim ≥ 1 and text_layers ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Side length of each view's token grid.
    pub fn grid(&self) -> usize {
        self.image_size / ENCODER_STRIDE
    }

    /// Image tokens per example (both views).
    pub fn p(&self) -> usize {
        2 * self.grid() * self.grid()
    }

    fn has_adapter(&self) -> bool {
        self.ablation.uses_knowledge() && self.topic_dim != self.d
    }
}

/// Network parameters plus the frozen knowledge needed to run them.
#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    knowledge: KnowledgeBase,
    /// One frozen row per topic of the general set, in knowledge-base order.
    topics: Array2<F>,
}

impl<F: Real> Model<F> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, knowledge: &KnowledgeBase, embedder: &TopicEmbedder, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.ablation.uses_knowledge() && embedder.dim() != config.topic_dim {
            return Err(Error::Shape(format!(
                "topic embedder width {} differs from topic_dim {}",
                embedder.dim(),
                config.topic_dim
            )));
        }
        let topics = embedder.embed(&knowledge.all())?.matrix.mapv(|v| F::from_f32(v).expect("finite"));
        let params = init_params(&config, seed);
        Ok(Model { config, params, knowledge: knowledge.clone(), topics })
    }

    /// Reassembles a model from stored parts, checking every tensor against
    /// the shapes the config implies. The alignment branch may be absent.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore<F>,
        knowledge: KnowledgeBase,
        topics: Array2<F>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = init_params::<F>(&config, 0);
        for (name, value) in params.iter() {
            match expected.get(name) {
                Some(e) if e.dim() == value.dim() => {}
                Some(e) => {
                    return Err(Error::Shape(format!("{name}: expected {:?}, found {:?}", e.dim(), value.dim())))
                }
                None => return Err(Error::Shape(format!("unexpected parameter {name}"))),
            }
        }
        let absent: Vec<&str> = expected.names().iter().map(String::as_str).filter(|n| !params.contains(n)).collect();
        if absent.iter().any(|n| !n.starts_with("ipg.")) {
            return Err(Error::Shape(format!("missing parameters: {}", absent.join(", "))));
        }
        let ipg_present = params.names().iter().any(|n| n.starts_with("ipg."));
        if ipg_present && !absent.is_empty() {
            return Err(Error::Shape(format!("incomplete alignment branch: missing {}", absent.join(", "))));
        }
        if topics.dim() != (knowledge.general().len(), config.topic_dim) {
            return Err(Error::Shape(format!(
                "topic table is {:?}, expected ({}, {})",
                topics.dim(),
                knowledge.general().len(),
                config.topic_dim
            )));
        }
        Ok(Model { config, params, knowledge, topics })
    }

    pub fn knowledge(&self) -> &KnowledgeBase {
        &self.knowledge
    }

    pub fn topics(&self) -> &Array2<F> {
        &self.topics
    }

    /// Whether the alignment heads are still present.
    pub fn has_ipg(&self) -> bool {
        self.params.contains("ipg.log_tau")
    }

    /// Deletes the alignment branch; returns the number of tensors removed.
    pub fn strip_ipg(&mut self) -> usize {
        self.params.remove_prefix("ipg.")
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            knowledge: self.knowledge.clone(),
            topics: self.topics.mapv(|x| G::lit(x.as_f64())),
        }
    }

    /// Topic rows fed to aggregation for `tag`, or `None` when the ablation
    /// has no knowledge branch. A missing tag selects every topic.
    pub fn topic_indices(&self, tag: Option<RegionTag>) -> Option<Vec<usize>> {
        let all = || (0..self.topics.nrows()).collect();
        match (self.config.ablation, tag) {
            (Ablation::Base, _) => None,
            (Ablation::RadkaStar, _) | (_, None) => Some(all()),
            (Ablation::Radka | Ablation::S4m, Some(t)) => Some(self.knowledge.select(t).indices),
        }
    }

    /// Starts a forward pass recorded on `g`.
    pub fn session(&self, g: Graph<F>) -> Session<'_, F> {
        Session { model: self, bound: vec![None; self.params.len()], g }
    }
}

fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> ParamStore<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let mut p = ParamStore::default();
    let d = cfg.d;

    let mut cin = cfg.in_channels;
    for (i, &k) in cfg.encoder_kernels.iter().enumerate() {
        let cout = cfg.encoder_channels.get(i).copied().unwrap_or(d);
        let w = if i + 1 < ENCODER_STAGES { init.he(k * k * cin, cout) } else { init.xavier(k * k * cin, cout) };
        p.insert(&format!("encoder.conv{i}.w"), w);
        p.insert(&format!("encoder.conv{i}.b"), zeros(1, cout));
        cin = cout;
    }
    let grid = cfg.grid();
    p.insert("encoder.pos.row", init.embedding(grid, d));
    p.insert("encoder.pos.col", init.embedding(grid, d));
    p.insert("encoder.pos.view", init.embedding(2, d));

    if cfg.ablation.uses_knowledge() {
        if cfg.has_adapter() {
            linear_params(&mut p, &mut init, "agg.adapter", cfg.topic_dim, d);
        }
        for l in 0..cfg.agg_layers {
            attn_params(&mut p, &mut init, &format!("agg.{l}.attn"), d);
            ln_params(&mut p, &format!("agg.{l}.ln"), d);
        }
    }

    p.insert("decoder.tok", init.embedding(cfg.vocab_size, d));
    p.insert("decoder.pos", init.embedding(cfg.max_len, d));
    for l in 0..cfg.decoder_layers {
        let pre = format!("decoder.{l}");
        ln_params(&mut p, &format!("{pre}.ln1"), d);
        attn_params(&mut p, &mut init, &format!("{pre}.self"), d);
        ln_params(&mut p, &format!("{pre}.ln2"), d);
        attn_params(&mut p, &mut init, &format!("{pre}.cross"), d);
        ln_params(&mut p, &format!("{pre}.ln3"), d);
        linear_params(&mut p, &mut init, &format!("{pre}.ff1"), d, cfg.d_ff);
        linear_params(&mut p, &mut init, &format!("{pre}.ff2"), cfg.d_ff, d);
    }
    ln_params(&mut p, "decoder.ln_f", d);
    linear_params(&mut p, &mut init, "decoder.out", d, cfg.vocab_size);

    if cfg.ablation.uses_ipg() {
        if cfg.pool == Pool::Cls {
            p.insert("ipg.pool.cls", init.embedding(1, d));
        }
        linear_params(&mut p, &mut init, "ipg.img_proj", d, cfg.shared_dim);
        p.insert("ipg.text.tok", init.embedding(cfg.vocab_size, d));
        p.insert("ipg.text.pos", init.embedding(cfg.max_len, d));
        for l in 0..cfg.text_layers {
            let pre = format!("ipg.text.{l}");
            ln_params(&mut p, &format!("{pre}.ln1"), d);
            attn_params(&mut p, &mut init, &format!("{pre}.attn"), d);
            ln_params(&mut p, &format!("{pre}.ln2"), d);
            linear_params(&mut p, &mut init, &format!("{pre}.ff1"), d, cfg.d_ff);
            linear_params(&mut p, &mut init, &format!("{pre}.ff2"), cfg.d_ff, d);
        }
        ln_params(&mut p, "ipg.text.ln_f", d);
        linear_params(&mut p, &mut init, "ipg.txt_proj", d, cfg.shared_dim);
        p.insert("ipg.log_tau", Array2::from_elem((1, 1), F::lit(cfg.tau_init.ln())));
    }
    p
}

fn linear_params<F: Real>(p: &mut ParamStore<F>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(&format!("{name}.w"), init.xavier(fan_in, fan_out));
    p.insert(&format!("{name}.b"), zeros(1, fan_out));
}

fn attn_params<F: Real>(p: &mut ParamStore<F>, init: &mut Init, name: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear_params(p, init, &format!("{name}.{proj}"), d, d);
    }
}

fn ln_params<F: Real>(p: &mut ParamStore<F>, name: &str, d: usize) {
    p.insert(&format!("{name}.g"), ones(1, d));
    p.insert(&format!("{name}.b"), zeros(1, d));
}

/// Encoder output for a batch: raw features and the rows the decoder reads.
#[derive(Clone, Debug)]
pub struct Memory {
    /// `B·p × d` encoder features before positional embeddings.
    pub features: Var,
    /// Rows the decoder cross-attends to: image tokens, or fused image and
    /// topic tokens when the knowledge branch is on.
    pub tokens: Var,
    /// Segment offsets of `tokens`, one segment per example.
    pub seg: Vec<usize>,
}

/// Loss terms of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub joint: Var,
    pub gen: f64,
    /// Contrastive term, when the alignment branch is active.
    pub ctr: Option<f64>,
}

/// One forward pass over a model; parameters are bound to the graph lazily.
pub struct Session<'m, F: Real> {
    model: &'m Model<F>,
    bound: Vec<Option<Var>>,
    pub g: Graph<F>,
}

fn offsets(lengths: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut seg = vec![0];
    for n in lengths {
        seg.push(seg.last().unwrap() + n);
    }
    seg
}

impl<'m, F: Real> Session<'m, F> {
    pub fn model(&self) -> &'m Model<F> {
        self.model
    }

    /// The graph node holding parameter `name`.
    pub fn param(&mut self, name: &str) -> Var {
        let slot = self.model.params.slot(name).unwrap_or_else(|| panic!("no parameter {name}"));
        if let Some(v) = self.bound[slot] {
            return v;
        }
        let v = self.g.param(slot, self.model.params.value(slot).clone());
        self.bound[slot] = Some(v);
        v
    }

    pub(crate) fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.param(&format!("{name}.w"));
        let b = self.param(&format!("{name}.b"));
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    pub(crate) fn norm(&mut self, x: Var, name: &str) -> Var {
        let gm = self.param(&format!("{name}.g"));
        let bt = self.param(&format!("{name}.b"));
        self.g.layer_norm(x, gm, bt)
    }

    fn drop(&mut self, x: Var) -> Var {
        self.g.dropout(x, self.model.config.dropout)
    }

    fn mha(&mut self, xq: Var, xkv: Var, q_seg: &[usize], k_seg: &[usize], name: &str, causal: bool) -> Var {
        let q = self.linear(xq, &format!("{name}.q"));
        let k = self.linear(xkv, &format!("{name}.k"));
        let v = self.linear(xkv, &format!("{name}.v"));
        let a = self.g.attention(q, k, v, q_seg, k_seg, self.model.config.heads, causal);
        self.linear(a, &format!("{name}.o"))
    }

    fn feed_forward(&mut self, x: Var, name: &str) -> Var {
        let h = self.linear(x, &format!("{name}.ff1"));
        let h = self.g.gelu(h);
        self.linear(h, &format!("{name}.ff2"))
    }

    /// Runs the convolutional encoder over `batch` examples of two views.
    /// `pixels` is channels-last with rows ordered `(example, view, y, x)`.
    /// Returns `B·p × d` token features; the first half of each example's
    /// rows comes from view 0.
    pub fn encode_image(&mut self, pixels: Array2<F>, batch: usize) -> Result<Var> {
        let cfg = &self.model.config;
        let s = cfg.image_size;
        if pixels.dim() != (batch * 2 * s * s, cfg.in_channels) {
            return Err(Error::Shape(format!(
                "expected {batch} examples of 2 × {s}×{s}×{} pixels, got a {:?} matrix",
                cfg.in_channels,
                pixels.dim()
            )));
        }
        let (mut size, mut channels) = (s, cfg.in_channels);
        let mut x = self.g.constant(pixels);
        for (i, &k) in cfg.encoder_kernels.iter().enumerate() {
            let geom = ConvGeom {
                batch: 2 * batch,
                height: size,
                width: size,
                channels,
                kernel: k,
                stride: 2,
                pad: (k - 1) / 2,
            };
            let cols = self.g.im2col(x, geom);
            x = self.linear(cols, &format!("encoder.conv{i}"));
            if i + 1 < ENCODER_STAGES {
                x = self.g.relu(x);
            }
            size = geom.out_height();
            channels = cfg.encoder_channels.get(i).copied().unwrap_or(cfg.d);
        }
        debug_assert_eq!(size, cfg.grid());
        Ok(x)
    }

    /// Adds learned row, column and view embeddings to image tokens.
    pub fn add_positions(&mut self, features: Var) -> Var {
        let grid = self.model.config.grid();
        let cells = grid * grid;
        let p = 2 * cells;
        let ys: Vec<usize> = (0..p).map(|j| (j % cells) / grid).collect();
        let xs: Vec<usize> = (0..p).map(|j| j % grid).collect();
        let vs: Vec<usize> = (0..p).map(|j| j / cells).collect();
        let (rt, ct, vt) = (self.param("encoder.pos.row"), self.param("encoder.pos.col"), self.param("encoder.pos.view"));
        let r = self.g.rows(rt, &ys);
        let c = self.g.rows(ct, &xs);
        let v = self.g.rows(vt, &vs);
        let rc = self.g.add(r, c);
        let pos = self.g.add(rc, v);
        self.g.add_tiled(features, pos)
    }

    /// Concatenates each example's `p` image tokens with its topic rows and
    /// mixes them with `agg_layers` rounds of `LN(X + MHA(X))`. Topic rows get
    /// no positional signal. Returns the fused rows and their segments
    /// (`p + k_b` rows for example `b`).
    pub fn aggregate(&mut self, image_tokens: Var, topic_lists: &[Vec<usize>]) -> Result<(Var, Vec<usize>)> {
        let cfg = &self.model.config;
        if !cfg.ablation.uses_knowledge() {
            return Err(Error::InvalidArgument("the base model has no aggregation layers".into()));
        }
        let p = cfg.p();
        let b = topic_lists.len();
        if self.g.value(image_tokens).dim() != (b * p, cfg.d) {
            return Err(Error::Shape(format!(
                "aggregate expects {b}×{p} image tokens of width {}, got {:?}",
                cfg.d,
                self.g.value(image_tokens).dim()
            )));
        }
        let n_topics = self.model.topics.nrows();
        if topic_lists.iter().any(Vec::is_empty) {
            return Err(Error::EmptyTopicSet);
        }
        if let Some(&t) = topic_lists.iter().flatten().find(|&&t| t >= n_topics) {
            return Err(Error::InvalidArgument(format!("topic index {t} out of range")));
        }
        let table = self.g.constant(self.model.topics.clone());
        let table = if cfg.has_adapter() { self.linear(table, "agg.adapter") } else { table };
        let mut index = Vec::new();
        for (e, topics) in topic_lists.iter().enumerate() {
            index.extend((0..p).map(|j| (0, e * p + j)));
            index.extend(topics.iter().map(|&t| (1, t)));
        }
        let seg = offsets(topic_lists.iter().map(|t| p + t.len()));
        let mut x = self.g.gather(&[image_tokens, table], index);
        for l in 0..cfg.agg_layers {
            let a = self.mha(x, x, &seg, &seg, &format!("agg.{l}.attn"), false);
            let a = self.drop(a);
            let r = self.g.add(x, a);
            x = self.norm(r, &format!("agg.{l}.ln"));
        }
        Ok((x, seg))
    }

    /// Encoder plus (when enabled) knowledge aggregation for a batch.
    pub fn memory(&mut self, pixels: Array2<F>, tags: &[RegionTag]) -> Result<Memory> {
        let tags: Vec<Option<RegionTag>> = tags.iter().copied().map(Some).collect();
        self.memory_with(pixels, &tags)
    }

    /// As [`Session::memory`]; untagged examples see the whole topic set.
    pub fn memory_with(&mut self, pixels: Array2<F>, tags: &[Option<RegionTag>]) -> Result<Memory> {
        let features = self.encode_image(pixels, tags.len())?;
        let tokens = self.add_positions(features);
        let lists: Option<Vec<Vec<usize>>> = tags.iter().map(|&t| self.model.topic_indices(t)).collect();
        match lists {
            Some(lists) => {
                let (tokens, seg) = self.aggregate(tokens, &lists)?;
                Ok(Memory { features, tokens, seg })
            }
            None => {
                let seg = offsets(tags.iter().map(|_| self.model.config.p()));
                Ok(Memory { features, tokens, seg })
            }
        }
    }

    /// Teacher-forced decoder pass. Each prefix starts with BOS; returns the
    /// stacked next-token logits, one row per prefix position.
    pub fn decode(&mut self, memory: Var, mem_seg: &[usize], prefixes: &[&[usize]]) -> Result<Var> {
        let cfg = &self.model.config;
        if mem_seg.len() != prefixes.len() + 1 {
            return Err(Error::Shape(format!("{} prefixes for {} memory segments", prefixes.len(), mem_seg.len() - 1)));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for pre in prefixes {
            if pre.first() != Some(&BOS) {
                return Err(Error::InvalidArgument("decoder prefix must start with BOS".into()));
            }
            if pre.len() > cfg.max_len {
                return Err(Error::PrefixTooLong { len: pre.len(), max_len: cfg.max_len });
            }
            if let Some(&t) = pre.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::UnknownTokenId(t));
            }
            ids.extend_from_slice(pre);
            pos.extend(0..pre.len());
        }
        let seg = offsets(prefixes.iter().map(|p| p.len()));
        let (tok, pe) = (self.param("decoder.tok"), self.param("decoder.pos"));
        let te = self.g.rows(tok, &ids);
        let pe = self.g.rows(pe, &pos);
        let x = self.g.add(te, pe);
        let mut x = self.drop(x);
        for l in 0..cfg.decoder_layers {
            let pre = format!("decoder.{l}");
            let h = self.norm(x, &format!("{pre}.ln1"));
            let a = self.mha(h, h, &seg, &seg, &format!("{pre}.self"), true);
            let a = self.drop(a);
            x = self.g.add(x, a);
            let h = self.norm(x, &format!("{pre}.ln2"));
            let a = self.mha(h, memory, &seg, mem_seg, &format!("{pre}.cross"), false);
            let a = self.drop(a);
            x = self.g.add(x, a);
            let h = self.norm(x, &format!("{pre}.ln3"));
            let f = self.feed_forward(h, &pre);
            let f = self.drop(f);
            x = self.g.add(x, f);
        }
        let x = self.norm(x, "decoder.ln_f");
        Ok(self.linear(x, "decoder.out"))
    }

    fn require_ipg(&self) -> Result<()> {
        if self.model.has_ipg() {
            Ok(())
        } else {
            Err(Error::NoAlignmentHeads)
        }
    }

    /// Pools each example's `p` feature rows, projects to the shared space
    /// and normalises to unit length.
    pub fn pool_image(&mut self, features: Var) -> Result<Var> {
        self.require_ipg()?;
        let p = self.model.config.p();
        let rows = self.g.value(features).nrows();
        if rows == 0 || !rows.is_multiple_of(p) {
            return Err(Error::Shape(format!("{rows} feature rows is not a multiple of p = {p}")));
        }
        let b = rows / p;
        let seg = offsets((0..b).map(|_| p));
        let pooled = match self.model.config.pool {
            Pool::Mean => self.g.segment_mean(features, &seg),
            Pool::Max => self.g.segment_max(features, &seg),
            Pool::Cls => {
                let cls = self.param("ipg.pool.cls");
                let q = self.g.gather(&[cls], vec![(0, 0); b]);
                let q_seg: Vec<usize> = (0..=b).collect();
                self.g.attention(q, features, features, &q_seg, &seg, self.model.config.heads, false)
            }
        };
        let z = self.linear(pooled, "ipg.img_proj");
        Ok(self.g.l2_normalize(z))
    }

    /// Encodes full reports (BOS … EOS) with the alignment branch's text
    /// encoder, pooling at the BOS position; unit-norm rows.
    pub fn embed_report(&mut self, seqs: &[&[usize]]) -> Result<Var> {
        self.require_ipg()?;
        let cfg = &self.model.config;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            if s.is_empty() {
                return Err(Error::InvalidArgument("cannot embed an empty token sequence".into()));
            }
            if s.len() > cfg.max_len {
                return Err(Error::PrefixTooLong { len: s.len(), max_len: cfg.max_len });
            }
            if let Some(&t) = s.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::UnknownTokenId(t));
            }
            ids.extend_from_slice(s);
            pos.extend(0..s.len());
        }
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("no reports to embed".into()));
        }
        let seg = offsets(seqs.iter().map(|s| s.len()));
        let (tok, pe) = (self.param("ipg.text.tok"), self.param("ipg.text.pos"));
        let te = self.g.rows(tok, &ids);
        let pe = self.g.rows(pe, &pos);
        let x = self.g.add(te, pe);
        let mut x = self.drop(x);
        for l in 0..cfg.text_layers {
            let pre = format!("ipg.text.{l}");
            let h = self.norm(x, &format!("{pre}.ln1"));
            let a = self.mha(h, h, &seg, &seg, &format!("{pre}.attn"), false);
            let a = self.drop(a);
            x = self.g.add(x, a);
            let h = self.norm(x, &format!("{pre}.ln2"));
            let f = self.feed_forward(h, &pre);
            let f = self.drop(f);
            x = self.g.add(x, f);
        }
        let x = self.norm(x, "ipg.text.ln_f");
        let first: Vec<(usize, usize)> = seg[..seg.len() - 1].iter().map(|&r| (0, r)).collect();
        let cls = self.g.gather(&[x], first);
        let z = self.linear(cls, "ipg.txt_proj");
        Ok(self.g.l2_normalize(z))
    }

    /// Generation loss plus, for the full model, `λ ·` the contrastive term.
    pub fn joint_loss(&mut self, batch: &Batch) -> Result<LossParts> {
        let pixels = batch.pixels.mapv(|v| F::from_f32(v).expect("finite pixel"));
        let memory = self.memory(pixels, &batch.tags)?;
        let seqs = batch.target_seqs();
        let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len().saturating_sub(1)]).collect();
        let targets: Vec<usize> = seqs.iter().flat_map(|s| s.iter().skip(1).copied()).collect();
        if targets.is_empty() || inputs.iter().any(|i| i.is_empty()) {
            return Err(Error::AllPad);
        }
        let logits = self.decode(memory.tokens, &memory.seg, &inputs)?;
        let gen = self.g.cross_entropy(logits, &targets);
        let gen_v = self.g.scalar(gen).as_f64();
        let cfg = &self.model.config;
        if !cfg.ablation.uses_ipg() {
            return Ok(LossParts { joint: gen, gen: gen_v, ctr: None });
        }
        let iv = self.pool_image(memory.features)?;
        let full: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let tv = self.embed_report(&full)?;
        let log_tau = self.param("ipg.log_tau");
        let ctr = contrastive_loss(&mut self.g, iv, tv, log_tau)?;
        let ctr_v = self.g.scalar(ctr).as_f64();
        let joint = if cfg.lambda == 0.0 {
            gen
        } else {
            let weighted = self.g.scale(ctr, F::lit(cfg.lambda));
            self.g.add(gen, weighted)
        };
        Ok(LossParts { joint, gen: gen_v, ctr: Some(ctr_v) })
    }
}

/// Mean token cross-entropy over the positions where `mask` is set. Row
/// `b·T + t` of `logits` predicts `targets[[b, t]]`.
pub fn generation_loss<F: Real>(
    g: &mut Graph<F>,
    logits: Var,
    targets: &Array2<usize>,
    mask: &Array2<bool>,
) -> Result<Var> {
    let (b, t) = targets.dim();
    if mask.dim() != (b, t) || g.value(logits).nrows() != b * t {
        return Err(Error::Shape("logits, targets and mask disagree".into()));
    }
    let mut rows = Vec::new();
    let mut tgt = Vec::new();
    for ((i, j), &m) in mask.indexed_iter() {
        if m {
            rows.push(i * t + j);
            tgt.push(targets[[i, j]]);
        }
    }
    if rows.is_empty() {
        return Err(Error::AllPad);
    }
    let vocab = g.value(logits).ncols();
    if let Some(&bad) = tgt.iter().find(|&&x| x >= vocab) {
        return Err(Error::UnknownTokenId(bad));
    }
    let sel = g.rows(logits, &rows);
    Ok(g.cross_entropy(sel, &tgt))
}

/// Symmetric InfoNCE between matched rows of `img` and `txt` with
/// temperature `exp(log_tau)`; other rows of the batch are the negatives.
pub fn contrastive_loss<F: Real>(g: &mut Graph<F>, img: Var, txt: Var, log_tau: Var) -> Result<Var> {
    let b = g.value(img).nrows();
    if b < 2 {
        return Err(Error::NeedNegatives(b));
    }
    if g.value(txt).dim() != g.value(img).dim() {
        return Err(Error::Shape("image and report embeddings differ in shape".into()));
    }
    let sim = g.matmul_t(img, txt, false, true);
    let neg = g.scale(log_tau, -F::one());
    let inv_tau = g.exp(neg);
    let logits = g.scale_by(sim, inv_tau);
    let diag: Vec<usize> = (0..b).collect();
    let rows = g.cross_entropy(logits, &diag);
    let lt = g.transpose(logits);
    let cols = g.cross_entropy(lt, &diag);
    let both = g.add(rows, cols);
    Ok(g.scale(both, F::lit(0.5)))
}
