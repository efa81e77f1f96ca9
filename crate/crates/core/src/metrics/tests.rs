use super::*;
use crate::knowledge::RegionTag;
use crate::model::tests::{random_pixels, tiny_model};
use crate::model::Ablation;
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> Vec<String> {
    const WORDS: [&str; 5] = ["a", "b", "c", "d", "e"];
    let n = rng.random_range(1..=max);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect()
}

/// Random corpus: candidates with 1 to 3 references each.
fn random_corpus(rng: &mut ChaCha8Rng, max_len: usize) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let n = rng.random_range(1..=4);
    let cands = (0..n).map(|_| random_text(rng, max_len)).collect();
    let refs = (0..n).map(|_| (0..rng.random_range(1..=3)).map(|_| random_text(rng, max_len)).collect()).collect();
    (cands, refs)
}

// Brute-force oracles: plain loops over explicit n-gram lists.

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn oracle_bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n_max: usize) -> f64 {
    let mut logp = 0.0;
    for n in 1..=n_max {
        let (mut num, mut den) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = grams(c, n);
            den += cg.len();
            let mut done: Vec<Vec<String>> = vec![];
            for g in &cg {
                if done.contains(g) {
                    continue;
                }
                done.push(g.clone());
                let mut best = 0;
                for r in rs {
                    best = best.max(count(&grams(r, n), g));
                }
                num += count(&cg, g).min(best);
            }
        }
        if num == 0 {
            return 0.0;
        }
        logp += (num as f64 / den as f64).ln() / n_max as f64;
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let mut r = 0usize;
    for (cand, rs) in cands.iter().zip(refs) {
        let mut best = rs[0].len();
        for x in rs {
            let (d, bd) = ((x.len() as i64 - cand.len() as i64).abs(), (best as i64 - cand.len() as i64).abs());
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * logp.exp()
}

fn oracle_cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let n_docs = cands.len() as f64;
    let mut total = 0.0;
    for (i, c) in cands.iter().enumerate() {
        let mut per_n = 0.0;
        for n in 1..=4 {
            // Dimension list: every n-gram anywhere in the corpus.
            let mut dims: Vec<Vec<String>> = vec![];
            for t in cands.iter().chain(refs.iter().flatten()) {
                for g in grams(t, n) {
                    if !dims.contains(&g) {
                        dims.push(g);
                    }
                }
            }
            let df = |g: &Vec<String>| refs.iter().filter(|rs| rs.iter().any(|r| count(&grams(r, n), g) > 0)).count();
            let vec_of = |t: &[String]| -> Vec<f64> {
                let tg = grams(t, n);
                dims.iter().map(|g| count(&tg, g) as f64 * (n_docs.ln() - (df(g).max(1) as f64).ln())).collect()
            };
            let vc = vec_of(c);
            let mut sim = 0.0;
            for r in &refs[i] {
                let vr = vec_of(r);
                let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a * b).sum();
                let na: f64 = vc.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = vr.iter().map(|a| a * a).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    sim += dot / (na * nb);
                }
            }
            per_n += sim / refs[i].len() as f64;
        }
        total += 10.0 * per_n / 4.0;
    }
    total / n_docs
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

/// LCS by enumerating every subsequence of the candidate.
fn oracle_rouge(c: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        let mut l = 0;
        for mask in 0u32..(1 << c.len()) {
            let sub: Vec<&String> = (0..c.len()).filter(|i| mask >> i & 1 == 1).map(|i| &c[i]).collect();
            if sub.len() > l && is_subsequence(&sub, r) {
                l = sub.len();
            }
        }
        if l > 0 {
            let p = l as f64 / c.len() as f64;
            let rc = l as f64 / r.len() as f64;
            best = best.max(2.2 * p * rc / (rc + 1.2 * p));
        }
    }
    best
}

#[test]
fn bleu_matches_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..60 {
        let (c, r) = random_corpus(&mut rng, 9);
        let got = bleu_scores(&c, &r, 4).unwrap();
        for n in 1..=4 {
            let want = oracle_bleu(&c, &r, n);
            assert!((got[n - 1] - want).abs() < 1e-6, "case {case} n={n}: {} vs {want}", got[n - 1]);
        }
    }
}

#[test]
fn cider_matches_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..40 {
        let (c, r) = random_corpus(&mut rng, 7);
        let got = cider(&c, &r).unwrap();
        let want = oracle_cider(&c, &r);
        assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
    }
}

#[test]
fn rouge_matches_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..60 {
        let c = random_text(&mut rng, 10);
        let refs: Vec<Vec<String>> = (0..rng.random_range(1..=3)).map(|_| random_text(&mut rng, 10)).collect();
        let (got, want) = (rouge_l(&c, &refs), oracle_rouge(&c, &refs));
        assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
    }
}

#[test]
fn identity_and_disjoint_cases() {
    let c = vec![toks("the heart size is normal .")];
    let r = vec![vec![toks("the heart size is normal .")]];
    for s in bleu_scores(&c, &r, 4).unwrap() {
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert_eq!(rouge_l(&c[0], &r[0]), 1.0);
    let d = vec![vec![toks("no fracture seen")]];
    assert_eq!(bleu_scores(&c, &d, 4).unwrap(), vec![0.0; 4]);
    assert_eq!(rouge_l(&c[0], &d[0]), 0.0);
    let c2 = vec![toks("x y z"), toks("p q")];
    let r2 = vec![vec![toks("a b c")], vec![toks("d e")]];
    assert_eq!(cider(&c2, &r2).unwrap(), 0.0);
}

#[test]
fn rouge_direction_of_precision_and_recall() {
    // LCS 2; precision over the 3-token candidate, recall over the 2-token reference.
    let f = rouge_l(&toks("a b c"), &[toks("a c")]);
    let (p, r) = (2.0 / 3.0, 1.0);
    assert!((f - 2.2 * p * r / (r + 1.2 * p)).abs() < 1e-12);
    assert!((f - 0.814_814_814_8).abs() < 1e-9);
}

#[test]
fn cider_identity_on_two_documents_and_duplication() {
    let c = vec![toks("the heart is normal"), toks("both lungs are clear")];
    let r: Vec<Vec<Vec<String>>> = c.iter().map(|x| vec![x.clone()]).collect();
    let got = cider(&c, &r).unwrap();
    assert!((got - oracle_cider(&c, &r)).abs() < 1e-9);
    // Fully disjoint documents: every n-gram is unique, so every cosine is 1.
    assert!((got - 10.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        // Candidates reuse reference texts, so every candidate n-gram has a
        // document frequency and doubling scales N and df together.
        let (_, r) = random_corpus(&mut rng, 7);
        let pool: Vec<Vec<String>> = r.iter().flatten().cloned().collect();
        let c: Vec<Vec<String>> = r.iter().map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        let (c2, r2) = ([c.clone(), c.clone()].concat(), [r.clone(), r.clone()].concat());
        let once = cider(&c, &r).unwrap();
        assert!((once - cider(&c2, &r2).unwrap()).abs() < 1e-9);
        assert!((cider(&c2, &r2).unwrap() - oracle_cider(&c2, &r2)).abs() < 1e-9);
    }
}

#[test]
fn empty_inputs_are_rejected() {
    assert!(matches!(bleu(&[], &[], 4), Err(Error::EmptyCandidates)));
    assert!(matches!(cider(&[], &[]), Err(Error::EmptyCandidates)));
    assert!(bleu(&[toks("a")], &[], 1).is_err());
}

proptest! {
    #[test]
    fn corpus_metrics_ignore_example_and_reference_order(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, r) = random_corpus(&mut rng, 8);
        let mut idx: Vec<usize> = (0..c.len()).collect();
        idx.shuffle(&mut rng);
        let c2: Vec<_> = idx.iter().map(|&i| c[i].clone()).collect();
        let r2: Vec<_> = idx
            .iter()
            .map(|&i| {
                let mut rs = r[i].clone();
                rs.reverse();
                rs
            })
            .collect();
        let (a, b) = (bleu_scores(&c, &r, 4).unwrap(), bleu_scores(&c2, &r2, 4).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((cider(&c, &r).unwrap() - cider(&c2, &r2).unwrap()).abs() < 1e-9);
        prop_assert!((rouge_l_corpus(&c, &r).unwrap() - rouge_l_corpus(&c2, &r2).unwrap()).abs() < 1e-12);
        for s in a {
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-3.0..3.0f64) * 4.0).round() / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let a = auc(&scores, &labels);
        let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 7.0).collect();
        prop_assert_eq!(a, auc(&mapped, &labels));
        if let Some(a) = a {
            // Pairwise counting oracle.
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if labels[i] && !labels[j] {
                        den += 1.0;
                        num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            prop_assert!((a - num / den).abs() < 1e-12);
        }
    }
}

#[test]
fn auc_edge_cases() {
    assert_eq!(auc(&[0.1, 0.2, 0.9], &[false, false, true]), Some(1.0));
    assert_eq!(auc(&[0.9, 0.2], &[false, true]), Some(0.0));
    assert_eq!(auc(&[1.0, 1.0, 1.0, 1.0], &[true, false, true, false]), Some(0.5));
    assert_eq!(auc(&[1.0, 2.0], &[true, true]), None);
}

#[test]
fn probe_on_separable_features_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let x = Array2::from_shape_fn((n, 5), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { x[[i, 0]] > 0.0 } else { x[[i, 1]] + x[[i, 2]] > 0.0 });
        (x, y)
    };
    let (xtr, ytr) = make(&mut rng, 200);
    let (xte, yte) = make(&mut rng, 100);
    let names = vec!["p".to_string(), "q".to_string()];
    let rep = linear_probe(&xtr, &ytr, &xte, &yte, &names, &ProbeConfig::default()).unwrap();
    assert!(rep.mean_auc > 0.995, "{rep:?}");
}

#[test]
fn probe_skips_single_class_labels() {
    let x = Array2::from_shape_fn((20, 2), |(i, j)| (i * 3 + j) as f64);
    let y = Array2::from_shape_fn((20, 2), |(i, j)| j == 0 && i % 2 == 0);
    let names = vec!["mixed".to_string(), "never".to_string()];
    let rep = linear_probe(&x, &y, &x, &y, &names, &ProbeConfig::default()).unwrap();
    assert!(rep.auc[0].is_some());
    assert_eq!(rep.auc[1], None);
    assert!(rep.to_table().contains("skipped"));
}

#[test]
fn random_encoder_with_random_labels_is_at_chance() {
    let model = tiny_model::<f32>(Ablation::Base, 2);
    let mut means = vec![];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let feats = |n: usize, s: u64| -> Array2<f64> {
            let px: Array2<f32> = random_pixels(n * 2 * 64 * 64, 1, s);
            let mut sess = model.session(crate::autograd::Graph::new());
            let f = sess.encode_image(px, n).unwrap();
            let p = model.config.p();
            let v = sess.g.value(f).mapv(|x| x as f64);
            Array2::from_shape_fn((n, v.ncols()), |(b, c)| (0..p).map(|r| v[[b * p + r, c]]).sum::<f64>() / p as f64)
        };
        let xtr = feats(150, seed * 2);
        let xte = feats(150, seed * 2 + 1);
        let ytr = Array2::from_shape_fn((150, 3), |_| rng.random_bool(0.5));
        let yte = Array2::from_shape_fn((150, 3), |_| rng.random_bool(0.5));
        let names: Vec<String> = (0..3).map(|i| format!("l{i}")).collect();
        let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
        means.push(linear_probe(&xtr, &ytr, &xte, &yte, &names, &cfg).unwrap().mean_auc);
    }
    let avg = means.iter().sum::<f64>() / means.len() as f64;
    assert!((avg - 0.5).abs() < 0.05, "{means:?}");
}

#[test]
fn alignment_needs_heads_and_is_a_cosine() {
    let mut model = tiny_model::<f64>(Ablation::S4m, 6);
    let px = random_pixels(3 * 2 * 64 * 64, 1, 9);
    let reports: Vec<&[usize]> = vec![&[1, 5, 6, 2], &[1, 7, 2], &[1, 8, 9, 10, 2]];
    let s = alignment_score(&model, px.clone(), &reports).unwrap();
    assert_eq!(s.len(), 3);
    assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
    model.strip_ipg();
    assert!(matches!(alignment_score(&model, px, &reports), Err(Error::NoAlignmentHeads)));
    let base = tiny_model::<f64>(Ablation::Base, 6);
    let e = alignment_score(&base, random_pixels(2 * 64 * 64, 1, 1), &reports[..1]).unwrap_err();
    assert_eq!(e.to_string(), "checkpoint has no alignment heads");
}

fn scored(tag: RegionTag, hyp: &str, reference: &str) -> ScoredExample {
    ScoredExample { tag, hypothesis: hyp.into(), references: vec![reference.into()] }
}

#[test]
fn eval_report_identity_and_missing_regions() {
    let texts = ["the heart size is normal .", "no acute fracture or dislocation is seen .", "joint space is preserved ."];
    let all: Vec<ScoredExample> =
        RegionTag::ALL.iter().flat_map(|&t| texts.iter().map(move |s| scored(t, s, s))).collect();
    let rep = evaluate(&all).unwrap();
    for tag in RegionTag::ALL {
        assert!((rep.region(tag).unwrap().bleu4 - 1.0).abs() < 1e-12);
    }
    let table = rep.to_table();
    assert_eq!(table.lines().count(), 8, "{table}");
    assert!(table.lines().last().unwrap().starts_with("Ave"));

    let partial: Vec<ScoredExample> = vec![
        scored(RegionTag::Chest, "the heart size is normal .", "the heart size is normal ."),
        scored(RegionTag::Knee, "joint space is narrowed here .", "joint space is preserved here ."),
    ];
    let rep = evaluate(&partial).unwrap();
    assert!(rep.region(RegionTag::Hip).is_none());
    let (c, k) = (rep.region(RegionTag::Chest).unwrap(), rep.region(RegionTag::Knee).unwrap());
    assert!((rep.average.bleu1 - (c.bleu1 + k.bleu1) / 2.0).abs() < 1e-12);
    assert!(rep.to_table().contains("absent"));
    let json = serde_json::to_string(&rep).unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert!((back.average.bleu1 - rep.average.bleu1).abs() < 1e-12);
}
