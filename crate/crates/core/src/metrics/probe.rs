//! Linear probing of a frozen image encoder.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Real};
use crate::dataset::{stack_views, Example};
use crate::error::{Error, Result};
use crate::model::Model;

/// Mean-pooled encoder token features, one row per example (center crop,
/// no augmentation, inference mode).
pub fn encoder_features<F: Real>(model: &Model<F>, examples: &[&Example], batch_size: usize) -> Result<Array2<f64>> {
    let p = model.config.p();
    let mut out = Array2::zeros((examples.len(), model.config.d));
    let mut row = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let pixels = stack_views(chunk, model.config.image_size, None)?.mapv(|v| F::lit(v as f64));
        let mut sess = model.session(Graph::new());
        let feats = sess.encode_image(pixels, chunk.len())?;
        let feats = sess.g.value(feats);
        for b in 0..chunk.len() {
            let block = feats.slice(ndarray::s![b * p..(b + 1) * p, ..]);
            let mean = block.mapv(|v| v.as_f64()).mean_axis(Axis(0)).expect("p > 0");
            out.row_mut(row).assign(&mean);
            row += 1;
        }
    }
    Ok(out)
}

/// Area under the ROC curve via the Mann-Whitney statistic, ties counted
/// half. `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks (1-based) over tied groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    /// Full-batch optimisation steps.
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, lr: 0.05, l2: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub labels: Vec<String>,
    /// Test AUC per label; `None` for labels skipped as single-class.
    pub auc: Vec<Option<f64>>,
    /// Mean over the labels that were scored.
    pub mean_auc: f64,
}

impl ProbeReport {
    pub fn to_table(&self) -> String {
        let w = self.labels.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut s = format!("{:<w$}  {:>7}\n", "label", "AUC");
        for (l, a) in self.labels.iter().zip(&self.auc) {
            match a {
                Some(a) => s.push_str(&format!("{l:<w$}  {a:>7.4}\n")),
                None => s.push_str(&format!("{l:<w$}  {:>7}\n", "skipped")),
            }
        }
        s.push_str(&format!("{:<w$}  {:>7.4}\n", "mean", self.mean_auc));
        s
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Trains one logistic head per label on frozen features (standardised with
/// training statistics) and reports test AUC. Labels with a single class in
/// either split are skipped with a warning.
pub fn linear_probe(
    train_x: &Array2<f64>,
    train_y: &Array2<bool>,
    test_x: &Array2<f64>,
    test_y: &Array2<bool>,
    names: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let (n, d) = train_x.dim();
    let k = names.len();
    if n == 0 || test_x.nrows() == 0 {
        return Err(Error::InvalidArgument("linear probe needs training and test examples".into()));
    }
    if train_y.dim() != (n, k) || test_y.dim() != (test_x.nrows(), k) || test_x.ncols() != d {
        return Err(Error::Shape("probe features and labels disagree in shape".into()));
    }
    let mean = train_x.mean_axis(Axis(0)).expect("n > 0");
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let xs = (train_x - &mean) / &std;
    let xt = (test_x - &mean) / &std;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut auc_out = Vec::with_capacity(k);
    for j in 0..k {
        let yj: Vec<bool> = train_y.column(j).to_vec();
        let tj: Vec<bool> = test_y.column(j).to_vec();
        let single = |v: &[bool]| v.iter().all(|&b| b) || v.iter().all(|&b| !b);
        if single(&yj) || single(&tj) {
            log::warn!("label {:?} has a single class; skipped", names[j]);
            auc_out.push(None);
            continue;
        }
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = Array1::from_shape_fn(d, |_| rng.random_range(-bound..bound));
        let mut b = 0.0;
        let (mut mw, mut vw) = (Array1::<f64>::zeros(d), Array1::<f64>::zeros(d));
        let (mut mb, mut vb) = (0.0, 0.0);
        let y = Array1::from_iter(yj.iter().map(|&t| if t { 1.0 } else { 0.0 }));
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for step in 1..=cfg.epochs {
            let z = xs.dot(&w) + b;
            let err = z.mapv(sigmoid) - &y;
            let gw = xs.t().dot(&err) / n as f64 + &w * cfg.l2;
            let gb = err.sum() / n as f64;
            mw = &mw * b1 + &gw * (1.0 - b1);
            vw = &vw * b2 + &gw.mapv(|g| g * g) * (1.0 - b2);
            mb = b1 * mb + (1.0 - b1) * gb;
            vb = b2 * vb + (1.0 - b2) * gb * gb;
            let c1 = 1.0 - b1.powi(step as i32);
            let c2 = 1.0 - b2.powi(step as i32);
            w = w - (&mw / c1) * cfg.lr / ((&vw / c2).mapv(f64::sqrt) + eps);
            b -= cfg.lr * (mb / c1) / ((vb / c2).sqrt() + eps);
        }
        let scores = (xt.dot(&w) + b).to_vec();
        auc_out.push(auc(&scores, &tj));
    }
    let scored: Vec<f64> = auc_out.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::InvalidArgument("every probe label is single-class".into()));
    }
    let mean_auc = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(ProbeReport { labels: names.to_vec(), auc: auc_out, mean_auc })
}
