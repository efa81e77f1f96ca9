//! Joint optimisation of the generation and alignment objectives.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataset::{epoch_order, Batch, Dataset, Example};
use crate::error::{Error, Result};
use crate::generator::{generate_tokens, GenerateOptions};
use crate::knowledge::{KnowledgeBase, RegionTag, TopicEmbedder};
use crate::metrics::{bleu, tokenize};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{group_of, Ablation, Model, ModelConfig, ParamGroup};
use crate::tokenizer::{Vocab, DEFAULT_MAX_LEN, DEFAULT_MIN_FREQ};

/// Lower bound on the learned contrastive temperature.
pub const MIN_TAU: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ablation: Ablation,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stops after this many optimiser steps when set.
    pub max_steps: Option<usize>,
    pub lr_encoders: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    /// Weight of the contrastive term; forced to 0 without the alignment branch.
    pub lambda: f64,
    pub seed: u64,
    /// Validation interval in steps; 0 evaluates at the end of every epoch.
    pub eval_every: usize,
    /// Caps the validation examples decoded per evaluation.
    pub eval_max_examples: Option<usize>,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Random crop and flip on training views.
    pub augment: bool,
    pub min_freq: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ablation: Ablation::S4m,
            batch_size: 16,
            max_epochs: 100,
            max_steps: None,
            lr_encoders: 5e-5,
            lr_rest: 1e-4,
            weight_decay: 1e-4,
            lambda: 1.0,
            seed: 0,
            eval_every: 0,
            eval_max_examples: None,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: true,
            min_freq: DEFAULT_MIN_FREQ,
            model: ModelConfig { max_len: DEFAULT_MAX_LEN, ..ModelConfig::default() },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.ablation.uses_ipg() && self.batch_size < 2 {
            return bad("the contrastive term needs batch_size >= 2");
        }
        if self.max_epochs == 0 && self.max_steps.is_none() {
            return bad("max_epochs must be positive");
        }
        if !(self.lr_encoders >= 0.0 && self.lr_rest >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("learning rates, weight decay and grad_clip must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("beta1 and beta2 must lie in [0, 1) and eps must be positive");
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad("lambda must be a non-negative number");
        }
        Ok(())
    }

    /// Model configuration with the run-level ablation, λ and vocabulary size.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            ablation: self.ablation,
            lambda: if self.ablation.uses_ipg() { self.lambda } else { 0.0 },
            vocab_size,
            ..self.model.clone()
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub gen_loss: f64,
    pub ctr_loss: Option<f64>,
    pub joint: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub epoch: usize,
    pub val_bleu4: f64,
}

struct Moments {
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    t: i32,
}

/// Model plus optimiser state; one call to [`Trainer::step`] per batch.
pub struct Trainer {
    pub config: TrainConfig,
    model: Model<f32>,
    opt: Moments,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: &Vocab, kb: &KnowledgeBase, embedder: &TopicEmbedder) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(vocab.len()), kb, embedder, config.seed)?;
        Ok(Self::from_model(config, model))
    }

    /// Continues from an existing model (optimiser state starts fresh).
    pub fn from_model(config: TrainConfig, model: Model<f32>) -> Self {
        let zeros = |m: &Model<f32>| m.params.iter().map(|(_, v)| Array2::zeros(v.raw_dim())).collect::<Vec<_>>();
        let opt = Moments { m: zeros(&model), v: zeros(&model), t: 0 };
        // Separate stream from parameter initialisation.
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00_0000);
        Trainer { config, model, opt, rng, step: 0 }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn lr_of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoders => self.config.lr_encoders,
            ParamGroup::Rest => self.config.lr_rest,
        }
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepLog> {
        let dropout_rng = ChaCha8Rng::from_rng(&mut self.rng);
        let mut sess = self.model.session(Graph::training(dropout_rng));
        let parts = sess.joint_loss(batch)?;
        let joint = sess.g.scalar(parts.joint) as f64;
        let step = self.step + 1;
        if !joint.is_finite() || !parts.gen.is_finite() || parts.ctr.is_some_and(|c| !c.is_finite()) {
            return Err(Error::NonFiniteLoss { step, gen_loss: parts.gen, ctr_loss: parts.ctr });
        }
        let mut grads = sess.g.param_grads(&sess.g.backward(parts.joint));
        drop(sess);

        let cfg = &self.config;
        if cfg.grad_clip > 0.0 {
            let norm = grads.iter().map(|(_, g)| g.iter().map(|&x| (x as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss { step, gen_loss: parts.gen, ctr_loss: parts.ctr });
            }
            if norm > cfg.grad_clip {
                let s = (cfg.grad_clip / norm) as f32;
                for (_, g) in &mut grads {
                    g.mapv_inplace(|x| x * s);
                }
            }
        }
        self.opt.t += 1;
        let (b1, b2, eps, wd) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.eps as f32, cfg.weight_decay as f32);
        let c1 = 1.0 - b1.powi(self.opt.t);
        let c2 = 1.0 - b2.powi(self.opt.t);
        for (slot, mut g) in grads {
            let lr = self.lr_of(group_of(self.model.params.name(slot))) as f32;
            let theta = self.model.params.value_mut(slot);
            if wd > 0.0 {
                g.scaled_add(wd, theta);
            }
            let m = &mut self.opt.m[slot];
            let v = &mut self.opt.v[slot];
            ndarray::Zip::from(theta).and(m).and(v).and(&g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        if let Some(slot) = self.model.params.slot("ipg.log_tau") {
            let floor = MIN_TAU.ln() as f32;
            self.model.params.value_mut(slot).mapv_inplace(|x| x.max(floor));
        }
        self.step = step;
        Ok(StepLog { step, gen_loss: parts.gen, ctr_loss: parts.ctr, joint, lr: self.config.lr_rest })
    }
}

/// Where training writes its artifacts; every field is optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Per-step JSONL log.
    pub log: Option<PathBuf>,
    /// Receives `best.ckpt` (by validation BLEU-4) and `last.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation BLEU-4 (the last ones when no
    /// evaluation ran).
    pub best: Model<f32>,
    pub last: Model<f32>,
    pub best_bleu4: Option<f64>,
    pub best_step: usize,
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
}

/// Corpus BLEU-4 of greedy generations against the references.
pub fn validation_bleu4(model: &Model<f32>, vocab: &Vocab, examples: &[&Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Dataset("no validation examples".into()));
    }
    let tags: Vec<Option<RegionTag>> = examples.iter().map(|e| Some(e.tag)).collect();
    let seqs = generate_tokens(model, examples, &tags, &GenerateOptions::default())?;
    let cands = seqs.iter().map(|s| vocab.decode(s).map(|t| tokenize(&t))).collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| vec![tokenize(&e.report)]).collect();
    bleu(&cands, &refs, 4)
}

type Best = Option<(f64, usize, Model<f32>)>;

fn run_eval(
    trainer: &Trainer,
    vocab: &Vocab,
    val: &[&Example],
    epoch: usize,
    best: &mut Best,
    evals: &mut Vec<EvalLog>,
    outputs: &TrainOutputs,
) -> Result<()> {
    let score = validation_bleu4(trainer.model(), vocab, val)?;
    let step = trainer.steps_taken();
    log::info!("step {step} epoch {epoch}: val BLEU-4 {score:.4}");
    evals.push(EvalLog { step, epoch, val_bleu4: score });
    if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
        *best = Some((score, step, trainer.model().clone()));
        if let Some(dir) = &outputs.checkpoint_dir {
            save_checkpoint(trainer.model(), vocab, &dir.join("best.ckpt"))?;
        }
    }
    Ok(())
}

/// Trains on `data.train`, evaluating greedy BLEU-4 on `data.val`.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    kb: &KnowledgeBase,
    embedder: &TopicEmbedder,
    vocab: &Vocab,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let mut trainer = Trainer::new(config.clone(), vocab, kb, embedder)?;
    let cfg = trainer.config.clone();
    let mut log = match &outputs.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let val: Vec<&Example> = data.val.iter().take(cfg.eval_max_examples.unwrap_or(usize::MAX)).collect();
    let max_len = trainer.model().config.max_len;
    let image_size = trainer.model().config.image_size;
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let mut best: Best = None;
    let limit = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 1..=cfg.max_epochs.max(1) {
        let order = epoch_order(data.train.len(), cfg.batch_size, trainer.rng());
        for idx in order {
            if trainer.steps_taken() >= limit {
                break 'epochs;
            }
            // A lone example has no in-batch negatives.
            if idx.len() < 2 && cfg.ablation.uses_ipg() {
                continue;
            }
            let examples: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            let mut aug = ChaCha8Rng::from_rng(trainer.rng());
            let batch = Batch::assemble(
                &examples,
                vocab,
                max_len,
                image_size,
                &data.finding_labels,
                cfg.augment.then_some(&mut aug),
            )?;
            let entry = trainer.step(&batch)?;
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
            }
            steps.push(entry);
            if cfg.eval_every > 0 && trainer.steps_taken() % cfg.eval_every == 0 {
                run_eval(&trainer, vocab, &val, epoch, &mut best, &mut evals, outputs)?;
            }
        }
        if cfg.eval_every == 0 {
            run_eval(&trainer, vocab, &val, epoch, &mut best, &mut evals, outputs)?;
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if evals.last().is_none_or(|e| e.step != trainer.steps_taken()) {
        let epoch = evals.last().map_or(0, |e| e.epoch);
        run_eval(&trainer, vocab, &val, epoch, &mut best, &mut evals, outputs)?;
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        save_checkpoint(trainer.model(), vocab, &dir.join("last.ckpt"))?;
    }
    let last = trainer.into_model();
    let (best_bleu4, best_step, best) = match best {
        Some((b, s, m)) => (Some(b), s, m),
        None => (None, steps.len(), last.clone()),
    };
    Ok(TrainOutcome { best, last, best_bleu4, best_step, steps, evals })
}
