//! Report decoding: batched greedy search and length-normalised beam search.
//!
//! Search is written against the [`Scorer`] trait so it can be checked on
//! hand-built toy decoders; [`ModelScorer`] adapts a trained model.

use std::cmp::Ordering;

use crate::autograd::Real;
use crate::dataset::{stack_views, Example};
use crate::error::{Error, Result};
use crate::knowledge::RegionTag;
use crate::model::{IncrementalDecoder, Model};
use crate::tokenizer::{Vocab, BOS, EOS, PAD};

/// Next-token distribution provider with a hypothesis set.
///
/// Initially hypothesis `i` is the empty prefix of source `i`. Each call
/// replaces the set: new hypothesis `j` is old hypothesis `parents[j]`
/// extended by `tokens[j]`.
pub trait Scorer {
    /// Log-probabilities over the vocabulary, one row per new hypothesis.
    fn advance(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// Token-level rules shared by every search.
#[derive(Clone, Debug)]
pub struct SearchConfig {
    pub bos: usize,
    pub eos: usize,
    /// Maximum sequence length including BOS and EOS.
    pub max_len: usize,
    /// Tokens that are never emitted.
    pub banned: Vec<usize>,
}

impl SearchConfig {
    /// Project token ids; PAD and BOS are never emitted.
    pub fn reports(max_len: usize) -> Self {
        SearchConfig { bos: BOS, eos: EOS, max_len, banned: vec![PAD, BOS] }
    }

    fn check(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(Error::InvalidArgument("max_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// Highest-scoring allowed token; ties go to the lowest id.
fn argmax(row: &[f64], banned: &[usize]) -> usize {
    let mut best: Option<usize> = None;
    for (t, &v) in row.iter().enumerate() {
        if banned.contains(&t) {
            continue;
        }
        match best {
            Some(b) if row[b] >= v => {}
            _ => best = Some(t),
        }
    }
    best.expect("vocabulary has an allowed token")
}

/// Greedy decoding of `sources` independent inputs. Every sequence starts
/// with BOS and ends with EOS, either chosen or forced at `max_len`.
pub fn greedy_search<S: Scorer>(scorer: &mut S, sources: usize, cfg: &SearchConfig) -> Result<Vec<Vec<usize>>> {
    cfg.check()?;
    let mut seqs = vec![vec![cfg.bos]; sources];
    let mut live: Vec<usize> = (0..sources).collect();
    let mut slot: Vec<usize> = (0..sources).collect();
    loop {
        let mut next = Vec::new();
        let mut parents = Vec::new();
        let mut tokens = Vec::new();
        for (&src, &s) in live.iter().zip(&slot) {
            if seqs[src].len() >= cfg.max_len - 1 {
                seqs[src].push(cfg.eos);
            } else {
                next.push(src);
                parents.push(s);
                tokens.push(*seqs[src].last().expect("non-empty"));
            }
        }
        if next.is_empty() {
            return Ok(seqs);
        }
        let rows = scorer.advance(&parents, &tokens)?;
        live.clear();
        slot.clear();
        for (i, &src) in next.iter().enumerate() {
            let t = argmax(&rows[i], &cfg.banned);
            seqs[src].push(t);
            if t != cfg.eos {
                live.push(src);
                slot.push(i);
            }
        }
    }
}

/// A finished beam hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

/// `log_prob / ((5 + T) / 6)^alpha` for `T` generated tokens.
pub fn length_normalised(log_prob: f64, generated: usize, alpha: f64) -> f64 {
    log_prob / ((5.0 + generated as f64) / 6.0).powf(alpha)
}

struct Cand {
    score: f64,
    log_prob: f64,
    parent: usize,
    token: usize,
}

fn by_score(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Beam search for source `source` of the scorer. At every step the best
/// `beam_size` entries among new extensions and already finished hypotheses
/// survive; finished ones stay finished. With `beam_size = 1` this makes the
/// same choices as [`greedy_search`].
pub fn beam_search<S: Scorer>(
    scorer: &mut S,
    source: usize,
    beam_size: usize,
    alpha: f64,
    cfg: &SearchConfig,
) -> Result<Hypothesis> {
    cfg.check()?;
    if beam_size == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![cfg.bos], 0.0)];
    let mut slots = vec![source];
    let mut finished: Vec<Hypothesis> = Vec::new();
    loop {
        let tokens: Vec<usize> = live.iter().map(|(s, _)| *s.last().expect("non-empty")).collect();
        let rows = scorer.advance(&slots, &tokens)?;
        let generated = live[0].0.len();
        if generated >= cfg.max_len - 1 {
            for ((seq, lp), row) in live.into_iter().zip(&rows) {
                let log_prob = lp + row[cfg.eos];
                let mut tokens = seq;
                tokens.push(cfg.eos);
                finished.push(Hypothesis { tokens, log_prob, score: length_normalised(log_prob, generated, alpha) });
            }
            break;
        }
        let mut cands = Vec::new();
        for (i, ((_, lp), row)) in live.iter().zip(&rows).enumerate() {
            for (t, &l) in row.iter().enumerate() {
                if cfg.banned.contains(&t) || l == f64::NEG_INFINITY {
                    continue;
                }
                let log_prob = lp + l;
                cands.push(Cand { score: length_normalised(log_prob, generated, alpha), log_prob, parent: i, token: t });
            }
        }
        cands.sort_by(|a, b| by_score(a.score, b.score).then(a.parent.cmp(&b.parent)).then(a.token.cmp(&b.token)));
        // Finished hypotheses occupy slots they outscore.
        let mut done_scores: Vec<f64> = finished.iter().map(|h| h.score).collect();
        done_scores.sort_by(|a, b| by_score(*a, *b));
        let mut next_live = Vec::new();
        let mut next_slots = Vec::new();
        let mut taken = 0;
        let mut di = 0;
        for c in cands {
            while di < done_scores.len() && done_scores[di] > c.score && taken < beam_size {
                di += 1;
                taken += 1;
            }
            if taken >= beam_size {
                break;
            }
            taken += 1;
            let mut seq = live[c.parent].0.clone();
            seq.push(c.token);
            if c.token == cfg.eos {
                finished.push(Hypothesis { tokens: seq, log_prob: c.log_prob, score: c.score });
            } else {
                next_live.push((seq, c.log_prob));
                next_slots.push(c.parent);
            }
        }
        if next_live.is_empty() {
            break;
        }
        live = next_live;
        slots = next_slots;
    }
    finished
        .into_iter()
        .min_by(|a, b| by_score(a.score, b.score).then(a.tokens.cmp(&b.tokens)))
        .ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))
}

fn log_softmax(row: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|&v| v - lse).collect()
}

/// [`Scorer`] over a model's cached decoder.
pub struct ModelScorer<'m, F: Real> {
    decoder: IncrementalDecoder<'m, F>,
}

impl<'m, F: Real> ModelScorer<'m, F> {
    pub fn new(model: &'m Model<F>, pixels: ndarray::Array2<F>, tags: &[Option<RegionTag>]) -> Result<Self> {
        Ok(ModelScorer { decoder: IncrementalDecoder::new(model, pixels, tags)? })
    }
}

impl<F: Real> Scorer for ModelScorer<'_, F> {
    fn advance(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let logits = self.decoder.advance(parents, tokens)?.mapv(|v| v.as_f64());
        Ok(logits.rows().into_iter().map(log_softmax).collect())
    }
}

/// Decoding options for report generation.
#[derive(Clone, Debug)]
pub struct GenerateOptions {
    /// Maximum length including BOS/EOS; `None` uses the model's limit.
    pub max_len: Option<usize>,
    /// 1 selects greedy decoding.
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Examples encoded together during greedy decoding.
    pub batch_size: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { max_len: None, beam_size: 1, length_penalty: 0.6, batch_size: 32 }
    }
}

/// Generates token sequences for `examples`, conditioning the knowledge
/// branch on `tags[i]` (`None` = full topic set).
pub fn generate_tokens<F: Real>(
    model: &Model<F>,
    examples: &[&Example],
    tags: &[Option<RegionTag>],
    opts: &GenerateOptions,
) -> Result<Vec<Vec<usize>>> {
    if examples.len() != tags.len() {
        return Err(Error::InvalidArgument("one tag per example".into()));
    }
    let max_len = opts.max_len.unwrap_or(model.config.max_len).min(model.config.max_len);
    let cfg = SearchConfig::reports(max_len);
    let size = model.config.image_size;
    let to_f = |p: ndarray::Array2<f32>| p.mapv(|v| F::lit(v as f64));
    let mut out = Vec::with_capacity(examples.len());
    if opts.beam_size <= 1 {
        for (chunk, tchunk) in examples.chunks(opts.batch_size.max(1)).zip(tags.chunks(opts.batch_size.max(1))) {
            let pixels = to_f(stack_views(chunk, size, None)?);
            let mut scorer = ModelScorer::new(model, pixels, tchunk)?;
            out.extend(greedy_search(&mut scorer, chunk.len(), &cfg)?);
        }
    } else {
        for (ex, &tag) in examples.iter().zip(tags) {
            let pixels = to_f(stack_views(&[*ex], size, None)?);
            let mut scorer = ModelScorer::new(model, pixels, &[tag])?;
            out.push(beam_search(&mut scorer, 0, opts.beam_size, opts.length_penalty, &cfg)?.tokens);
        }
    }
    Ok(out)
}

/// Generates report strings, each example conditioned on its own tag.
pub fn generate_reports<F: Real>(
    model: &Model<F>,
    vocab: &Vocab,
    examples: &[&Example],
    opts: &GenerateOptions,
) -> Result<Vec<String>> {
    let tags: Vec<Option<RegionTag>> = examples.iter().map(|e| Some(e.tag)).collect();
    generate_tokens(model, examples, &tags, opts)?.iter().map(|s| vocab.decode(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Toy decoder whose distribution depends on the whole prefix through a
    /// fixed table (unlisted prefixes get `default`).
    struct Toy {
        table: HashMap<Vec<usize>, Vec<f64>>,
        default: Vec<f64>,
        hyps: Vec<Vec<usize>>,
    }

    impl Toy {
        fn new(table: HashMap<Vec<usize>, Vec<f64>>, default: Vec<f64>) -> Self {
            Toy { table, default, hyps: vec![vec![]; 4] }
        }

        fn dist(&self, prefix: &[usize]) -> Vec<f64> {
            let logits = self.table.get(prefix).unwrap_or(&self.default);
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            logits.iter().map(|l| l - z.ln()).collect()
        }
    }

    impl Scorer for Toy {
        fn advance(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
            self.hyps = parents
                .iter()
                .zip(tokens)
                .map(|(&p, &t)| {
                    let mut h = self.hyps[p].clone();
                    h.push(t);
                    h
                })
                .collect();
            Ok(self.hyps.iter().map(|h| self.dist(h)).collect())
        }
    }

    // Toy ids: 0 = EOS, 1 = "a", 2 = "b"; BOS is the out-of-vocabulary id 3.
    const T_BOS: usize = 3;

    fn toy_cfg(max_len: usize) -> SearchConfig {
        SearchConfig { bos: T_BOS, eos: 0, max_len, banned: vec![] }
    }

    /// Every EOS-terminated continuation with at most `max_tokens` tokens,
    /// scored by summed log-probability and the length normalisation.
    fn exhaustive(toy: &Toy, max_tokens: usize, alpha: f64) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut stack = vec![(vec![T_BOS], 0.0)];
        while let Some((seq, lp)) = stack.pop() {
            let dist = toy.dist(&seq);
            let generated = seq.len();
            let end_lp = lp + dist[0];
            let mut full = seq.clone();
            full.push(0);
            let score = length_normalised(end_lp, generated, alpha);
            if best.as_ref().is_none_or(|(_, s)| score > *s) {
                best = Some((full, score));
            }
            if generated < max_tokens {
                for t in 1..3 {
                    let mut next = seq.clone();
                    next.push(t);
                    stack.push((next, lp + dist[t]));
                }
            }
        }
        best.unwrap()
    }

    fn trap() -> Toy {
        // Greedy takes "a" (0.55) but every continuation after "a" is flat;
        // "b" leads to a near-certain "b b EOS".
        let mut t = HashMap::new();
        t.insert(vec![T_BOS], vec![-5.0, 0.2, 0.0]);
        t.insert(vec![T_BOS, 1], vec![0.0, 0.0, 0.0]);
        t.insert(vec![T_BOS, 2], vec![-5.0, -5.0, 5.0]);
        t.insert(vec![T_BOS, 2, 2], vec![5.0, -5.0, -5.0]);
        Toy::new(t, vec![0.0, 0.0, 0.0])
    }

    #[test]
    fn beam_three_finds_the_exhaustive_optimum() {
        let (best, _) = exhaustive(&trap(), 4, 0.0);
        assert_eq!(best, vec![T_BOS, 2, 2, 0]);
        let hyp = beam_search(&mut trap(), 0, 3, 0.0, &toy_cfg(5)).unwrap();
        assert_eq!(hyp.tokens, best);
        let greedy = greedy_search(&mut trap(), 1, &toy_cfg(5)).unwrap();
        assert_eq!(greedy[0][1], 1, "the trap defeats greedy");
    }

    #[test]
    fn wide_beam_matches_exhaustive_search_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..30 {
            let mut table = HashMap::new();
            let mut prefixes = vec![vec![T_BOS]];
            for _ in 0..3 {
                let mut next = Vec::new();
                for p in &prefixes {
                    table.insert(p.clone(), (0..3).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
                    for t in 1..3 {
                        let mut q = p.clone();
                        q.push(t);
                        next.push(q);
                    }
                }
                prefixes = next;
            }
            for p in &prefixes {
                table.insert(p.clone(), (0..3).map(|_| rng.random_range(-2.0..2.0)).collect());
            }
            let alpha = if case % 2 == 0 { 0.0 } else { 0.6 };
            let toy = Toy::new(table.clone(), vec![0.0; 3]);
            let (best, score) = exhaustive(&toy, 4, alpha);
            let hyp = beam_search(&mut Toy::new(table, vec![0.0; 3]), 0, 27, alpha, &toy_cfg(5)).unwrap();
            assert_eq!(hyp.tokens, best, "case {case}");
            assert!((hyp.score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let default: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut table = HashMap::new();
            for p in [vec![T_BOS], vec![T_BOS, 1], vec![T_BOS, 2], vec![T_BOS, 1, 1], vec![T_BOS, 2, 1]] {
                table.insert(p, (0..3).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            }
            let g = greedy_search(&mut Toy::new(table.clone(), default.clone()), 1, &toy_cfg(6)).unwrap();
            let b = beam_search(&mut Toy::new(table, default), 0, 1, 0.6, &toy_cfg(6)).unwrap();
            assert_eq!(g[0], b.tokens);
        }
    }

    #[test]
    fn alpha_zero_ranks_by_log_probability() {
        // A short sequence with higher total probability beats a long one.
        let mut t = HashMap::new();
        t.insert(vec![T_BOS], vec![0.0, 0.1, -9.0]);
        t.insert(vec![T_BOS, 1], vec![-9.0, 3.0, -9.0]);
        t.insert(vec![T_BOS, 1, 1], vec![3.0, -9.0, -9.0]);
        let toy = || Toy::new(t.clone(), vec![0.0; 3]);
        let hyp = beam_search(&mut toy(), 0, 3, 0.0, &toy_cfg(5)).unwrap();
        let (best, score) = exhaustive(&toy(), 4, 0.0);
        assert_eq!(hyp.tokens, best);
        assert!((hyp.log_prob - score).abs() < 1e-12);
        assert_eq!(hyp.log_prob, hyp.score);
    }

    #[test]
    fn greedy_terminates_and_ties_go_low() {
        let flat = || Toy::new(HashMap::new(), vec![0.0, 0.0, 0.0]);
        // Ties pick id 0 (EOS) immediately.
        assert_eq!(greedy_search(&mut flat(), 2, &toy_cfg(10)).unwrap(), vec![vec![T_BOS, 0]; 2]);
        let never_end = || Toy::new(HashMap::new(), vec![-9.0, 0.0, 0.0]);
        let cfg = SearchConfig { banned: vec![], ..toy_cfg(4) };
        assert_eq!(greedy_search(&mut never_end(), 1, &cfg).unwrap()[0], vec![T_BOS, 1, 1, 0]);
        assert_eq!(greedy_search(&mut never_end(), 1, &toy_cfg(2)).unwrap()[0], vec![T_BOS, 0]);
        let banned = SearchConfig { banned: vec![1], ..toy_cfg(4) };
        assert_eq!(greedy_search(&mut never_end(), 1, &banned).unwrap()[0], vec![T_BOS, 2, 2, 0]);
    }

    mod with_model {
        use super::super::*;
        use crate::model::tests::{random_pixels, tiny_model};
        use crate::model::Ablation;

        fn pixels(n: usize, seed: u64) -> ndarray::Array2<f64> {
            random_pixels(n * 2 * 64 * 64, 1, seed)
        }

        fn cfg() -> SearchConfig {
            SearchConfig::reports(8)
        }

        #[test]
        fn batched_greedy_matches_one_at_a_time() {
            let model = tiny_model::<f64>(Ablation::S4m, 3);
            let tags = [Some(RegionTag::Chest), Some(RegionTag::Knee), None];
            let px = pixels(3, 1);
            let batched = greedy_search(&mut ModelScorer::new(&model, px.clone(), &tags).unwrap(), 3, &cfg()).unwrap();
            let rows = 2 * 64 * 64;
            for i in 0..3 {
                let one = px.slice(ndarray::s![i * rows..(i + 1) * rows, ..]).to_owned();
                let single = greedy_search(&mut ModelScorer::new(&model, one, &tags[i..=i]).unwrap(), 1, &cfg()).unwrap();
                assert_eq!(single[0], batched[i]);
            }
            for s in &batched {
                assert_eq!(s[0], BOS);
                assert_eq!(*s.last().unwrap(), EOS);
                assert!(s.len() <= 8);
                assert!(!s[1..].contains(&PAD) && !s[1..].contains(&BOS));
            }
        }

        #[test]
        fn model_beam_of_one_is_greedy_and_wide_beam_is_no_worse() {
            let model = tiny_model::<f64>(Ablation::Radka, 5);
            let tags = [Some(RegionTag::Hip)];
            let px = pixels(1, 2);
            let g = greedy_search(&mut ModelScorer::new(&model, px.clone(), &tags).unwrap(), 1, &cfg()).unwrap();
            let b1 = beam_search(&mut ModelScorer::new(&model, px.clone(), &tags).unwrap(), 0, 1, 0.6, &cfg()).unwrap();
            assert_eq!(g[0], b1.tokens);
            let b4 = beam_search(&mut ModelScorer::new(&model, px, &tags).unwrap(), 0, 4, 0.6, &cfg()).unwrap();
            assert!(b4.score >= b1.score - 1e-12);
        }

        #[test]
        fn ipg_branch_does_not_affect_generation() {
            let model = tiny_model::<f64>(Ablation::S4m, 9);
            let mut stripped = model.clone();
            stripped.strip_ipg();
            let tags = [Some(RegionTag::Wrist), Some(RegionTag::Chest)];
            let px = pixels(2, 4);
            let a = greedy_search(&mut ModelScorer::new(&model, px.clone(), &tags).unwrap(), 2, &cfg()).unwrap();
            let b = greedy_search(&mut ModelScorer::new(&stripped, px.clone(), &tags).unwrap(), 2, &cfg()).unwrap();
            assert_eq!(a, b);
            let la = ModelScorer::new(&model, px.clone(), &tags).unwrap().advance(&[0, 1], &[BOS, BOS]).unwrap();
            let lb = ModelScorer::new(&stripped, px, &tags).unwrap().advance(&[0, 1], &[BOS, BOS]).unwrap();
            assert_eq!(la, lb);
        }

        #[test]
        fn decoding_is_deterministic() {
            let model = tiny_model::<f64>(Ablation::Base, 1);
            let px = pixels(2, 6);
            let tags = [None, None];
            let run = || beam_search(&mut ModelScorer::new(&model, px.clone(), &tags).unwrap(), 1, 3, 0.6, &cfg()).unwrap();
            assert_eq!(run(), run());
        }
    }
}
