use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use s4m::dataset::{
    export_manifest, load_manifest, read_rows, synthesize_dataset, Dataset, Example, ManifestOptions, Split, SynthSpec,
};
use s4m::generator::{generate_tokens, GenerateOptions};
use s4m::knowledge::{KnowledgeBase, RegionTag, TopicEmbedder};
use s4m::metrics::{encoder_features, evaluate as score, linear_probe, ProbeConfig, ScoredExample};
use s4m::model::checkpoint::load_checkpoint;
use s4m::model::Model;
use s4m::tokenizer::Vocab;
use s4m::trainer::{train as run_training, TrainConfig, TrainOutputs};

use crate::config;
use crate::{EvaluateArgs, GenerateArgs, ProbeArgs, SynthArgs, TrainArgs};

/// Errors in how the command was invoked (exit status 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    UsageError(format!("{e:#}")).into()
}

pub fn synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let spec: SynthSpec = config::load(args.spec.as_deref(), &args.overrides).map_err(usage)?;
    let kb = KnowledgeBase::bundled();
    spec.validate(&kb).map_err(|e| usage(e.into()))?;
    let ds = synthesize_dataset(&spec, &kb, seed.unwrap_or(0))?;
    std::fs::create_dir_all(&args.out)?;
    let manifest = export_manifest(&ds, &args.out)?;
    std::fs::write(args.out.join("synth_spec.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    println!(
        "wrote {} examples ({} train / {} val / {} test) to {}",
        ds.len(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        manifest.display()
    );
    Ok(())
}

fn manifest_path(data: Option<PathBuf>) -> Result<PathBuf> {
    let p = match data {
        Some(p) => p,
        None => match std::env::var_os("S4M_DATA_DIR") {
            Some(d) => PathBuf::from(d),
            None => return Err(UsageError("no --data given and S4M_DATA_DIR is unset".into()).into()),
        },
    };
    Ok(if p.is_dir() { p.join("manifest.jsonl") } else { p })
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(4).map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Generates greedy reports for `examples` and scores them by region.
fn score_split(model: &Model<f32>, vocab: &Vocab, examples: &[&Example]) -> Result<s4m::metrics::EvalReport> {
    let tags: Vec<Option<RegionTag>> = examples.iter().map(|e| Some(e.tag)).collect();
    let seqs = generate_tokens(model, examples, &tags, &GenerateOptions::default())?;
    let scored = examples
        .iter()
        .zip(seqs)
        .map(|(e, s)| {
            Ok(ScoredExample { tag: e.tag, hypothesis: vocab.decode(&s)?, references: vec![e.report.clone()] })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(score(&scored)?)
}

pub fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainConfig = config::load(Some(&args.config), &args.overrides).map_err(usage)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.into()))?;
    let manifest = manifest_path(args.data)?;
    let kb = match &args.knowledge {
        Some(p) => KnowledgeBase::load(p)?,
        None => KnowledgeBase::bundled(),
    };
    let embedder = match &args.topic_embeddings {
        Some(p) => TopicEmbedder::from_file(p)?,
        None => TopicEmbedder::hashed(cfg.model.topic_seed, cfg.model.topic_dim),
    };
    let opts = ManifestOptions { channels: cfg.model.in_channels, ..ManifestOptions::default() };
    let data: Dataset = load_manifest(&manifest, &opts).with_context(|| format!("loading {}", manifest.display()))?;
    let vocab = Vocab::build(&data.train_reports(), cfg.min_freq)?;

    let resolved = serde_json::to_string_pretty(&cfg)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let run_dir = args.runs.join(format!("{stamp}-{}", short_hash(resolved.as_bytes())));
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.json"), resolved + "\n")?;
    eprintln!("run directory {}", run_dir.display());

    let outputs = TrainOutputs { log: Some(run_dir.join("train_log.jsonl")), checkpoint_dir: Some(run_dir.clone()) };
    let outcome = run_training(&cfg, &data, &kb, &embedder, &vocab, &outputs)?;
    let val: Vec<&Example> = data.val.iter().collect();
    let mut report = score_split(&outcome.best, &vocab, &val)?;
    report.checkpoint = Some(run_dir.join("best.ckpt").display().to_string());
    report.dataset_hash = Some(data.content_hash());
    std::fs::write(run_dir.join("val_eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("best step {} (validation BLEU-4 {:.4})", outcome.best_step, outcome.best_bleu4.unwrap_or(0.0));
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Serialize, Deserialize, Debug)]
struct HypothesisLine {
    id: String,
    #[serde(default)]
    tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(UsageError(format!("unknown split {s:?}; expected train, val or test")).into()),
    }
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    if args.beam == 0 {
        return Err(UsageError("--beam must be at least 1".into()).into());
    }
    let forced: Option<RegionTag> = match &args.tag {
        Some(t) => Some(t.parse().map_err(|e: s4m::Error| usage(e.into()))?),
        None => None,
    };
    let split = args.split.as_deref().map(parse_split).transpose()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = &ckpt.model;
    let base = args.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let opts = ManifestOptions { channels: model.config.in_channels, ..ManifestOptions::default() };
    let rows = read_rows(&args.manifest)?;

    let mut lines: Vec<HypothesisLine> = Vec::new();
    let mut todo: Vec<(usize, Example, Option<RegionTag>)> = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        if split.is_some_and(|s| s != row.split) {
            continue;
        }
        let id = row.id.clone().unwrap_or_else(|| format!("row{:05}", i + 1));
        let tag = match forced {
            Some(t) => Ok(Some(t)),
            None => match &row.tag {
                Some(t) => t.parse::<RegionTag>().map(Some).map_err(|e| e.to_string()),
                None if args.fallback_full_set => Ok(None),
                None => Err("example has no region tag".to_string()),
            },
        };
        let mut line =
            HypothesisLine { id: id.clone(), tag: row.tag.clone(), hypothesis: None, reference: None, error: None };
        line.reference = Some(row.report.clone());
        match tag.and_then(|t| row.load_images(&base, &opts).map(|im| (t, im)).map_err(|e| e.to_string())) {
            Ok((t, images)) => {
                line.tag = t.map(|t| t.to_string());
                let ex = Example { id, images, report: row.report, tag: t.unwrap_or(RegionTag::Chest), findings: None };
                todo.push((lines.len(), ex, t));
            }
            Err(e) => line.error = Some(e),
        }
        lines.push(line);
    }
    let examples: Vec<&Example> = todo.iter().map(|(_, e, _)| e).collect();
    let tags: Vec<Option<RegionTag>> = todo.iter().map(|(_, _, t)| *t).collect();
    let gen_opts = GenerateOptions {
        max_len: args.max_len,
        beam_size: args.beam,
        length_penalty: args.length_penalty,
        ..GenerateOptions::default()
    };
    let seqs = generate_tokens(model, &examples, &tags, &gen_opts)?;
    for ((slot, _, _), seq) in todo.iter().zip(seqs) {
        lines[*slot].hypothesis = Some(ckpt.vocab.decode(&seq)?);
    }
    let mut w = BufWriter::new(File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?);
    for l in &lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let failed = lines.iter().filter(|l| l.error.is_some()).count();
    eprintln!("wrote {} reports to {}", lines.len() - failed, args.out.display());
    if failed > 0 {
        bail!("{failed} of {} examples failed; see the error records in {}", lines.len(), args.out.display());
    }
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let refs: HashMap<String, (String, Option<String>)> = read_rows(&args.refs)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| (r.id.unwrap_or_else(|| format!("row{:05}", i + 1)), (r.report, r.tag)))
        .collect();
    let file = File::open(&args.hyps).with_context(|| format!("opening {}", args.hyps.display()))?;
    let mut scored = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let h: HypothesisLine = serde_json::from_str(&line).with_context(|| format!("hypotheses line {}", n + 1))?;
        let Some(hyp) = h.hypothesis else {
            log::warn!("skipping {}: no hypothesis", h.id);
            continue;
        };
        let Some((reference, ref_tag)) = refs.get(&h.id) else {
            bail!("no reference for example {:?}", h.id);
        };
        let tag = h.tag.as_ref().or(ref_tag.as_ref()).with_context(|| format!("example {:?} has no region tag", h.id))?;
        scored.push(ScoredExample { tag: tag.parse()?, hypothesis: hyp, references: vec![reference.clone()] });
    }
    let mut report = score(&scored)?;
    report.dataset_hash = Some(file_digest(&args.refs)?);
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = report.to_table();
    std::fs::write(args.out.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn label_matrix(examples: &[&Example], labels: &[String]) -> Result<Array2<bool>> {
    let mut y = Array2::from_elem((examples.len(), labels.len()), false);
    for (i, e) in examples.iter().enumerate() {
        let v = e.label_vector(labels).with_context(|| format!("example {:?} has no finding labels", e.id))?;
        for (j, &b) in v.iter().enumerate() {
            y[[i, j]] = b == 1;
        }
    }
    Ok(y)
}

pub fn probe(args: ProbeArgs, seed: Option<u64>) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = &ckpt.model;
    let opts = ManifestOptions { channels: model.config.in_channels, ..ManifestOptions::default() };
    let data = load_manifest(&args.manifest, &opts)?;
    let train: Vec<&Example> = data.train.iter().collect();
    let test: Vec<&Example> = if data.test.is_empty() { data.val.iter().collect() } else { data.test.iter().collect() };
    if train.is_empty() || test.is_empty() {
        bail!("the probe needs a train split and a test (or val) split");
    }
    let labels = &data.finding_labels;
    if labels.is_empty() {
        bail!("the manifest carries no finding labels");
    }
    let xtr = encoder_features(model, &train, 32)?;
    let xte = encoder_features(model, &test, 32)?;
    let cfg = ProbeConfig { epochs: args.epochs, seed: seed.unwrap_or(0), ..ProbeConfig::default() };
    let report = linear_probe(&xtr, &label_matrix(&train, labels)?, &xte, &label_matrix(&test, labels)?, labels, &cfg)?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    print!("{}", report.to_table());
    Ok(())
}
