//! Per-region evaluation reports (regions × metrics plus an average row).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{bleu_scores, cider, rouge_l_corpus, tokenize};
use crate::error::{Error, Result};
use crate::knowledge::RegionTag;

/// One generated report with its references.
#[derive(Clone, Debug)]
pub struct ScoredExample {
    pub tag: RegionTag,
    pub hypothesis: String,
    pub references: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricRow {
    fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.cider]
    }

    fn from_values(v: [f64; 6]) -> Self {
        MetricRow { bleu1: v[0], bleu2: v[1], bleu3: v[2], bleu4: v[3], rouge_l: v[4], cider: v[5] }
    }

    /// Corpus metrics over one set of examples.
    pub fn score(examples: &[&ScoredExample]) -> Result<Self> {
        let cands: Vec<Vec<String>> = examples.iter().map(|e| tokenize(&e.hypothesis)).collect();
        let refs: Vec<Vec<Vec<String>>> =
            examples.iter().map(|e| e.references.iter().map(|r| tokenize(r)).collect()).collect();
        let b = bleu_scores(&cands, &refs, 4)?;
        Ok(MetricRow {
            bleu1: b[0],
            bleu2: b[1],
            bleu3: b[2],
            bleu4: b[3],
            rouge_l: rouge_l_corpus(&cands, &refs)?,
            cider: cider(&cands, &refs)?,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionResult {
    pub region: RegionTag,
    pub examples: usize,
    /// `None` when the region has no examples.
    pub metrics: Option<MetricRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub regions: Vec<RegionResult>,
    /// Unweighted mean over regions that are present.
    pub average: MetricRow,
    pub checkpoint: Option<String>,
    pub dataset_hash: Option<String>,
}

/// Scores each region separately and averages the present regions.
pub fn evaluate(examples: &[ScoredExample]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut by_region: BTreeMap<RegionTag, Vec<&ScoredExample>> = BTreeMap::new();
    for e in examples {
        by_region.entry(e.tag).or_default().push(e);
    }
    let mut regions = Vec::new();
    let mut sum = [0.0; 6];
    let mut present = 0;
    for tag in RegionTag::ALL {
        let group = by_region.get(&tag);
        let metrics = match group {
            Some(g) => {
                let row = MetricRow::score(g)?;
                for (s, v) in sum.iter_mut().zip(row.values()) {
                    *s += v;
                }
                present += 1;
                Some(row)
            }
            None => {
                log::warn!("no examples for region {tag}; excluded from the average");
                None
            }
        };
        regions.push(RegionResult { region: tag, examples: group.map_or(0, Vec::len), metrics });
    }
    let average = MetricRow::from_values(sum.map(|s| s / present as f64));
    Ok(EvalReport { regions, average, checkpoint: None, dataset_hash: None })
}

impl EvalReport {
    pub fn region(&self, tag: RegionTag) -> Option<&MetricRow> {
        self.regions.iter().find(|r| r.region == tag).and_then(|r| r.metrics.as_ref())
    }

    /// Aligned text table: one row per region plus "Ave".
    pub fn to_table(&self) -> String {
        let header = ["Region", "N", "B1", "B2", "B3", "B4", "ROUGE-L", "CIDEr"];
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        let fmt = |m: &MetricRow| m.values().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>();
        for r in &self.regions {
            let mut row = vec![r.region.to_string(), r.examples.to_string()];
            match &r.metrics {
                Some(m) => row.extend(fmt(m)),
                None => row.extend(std::iter::repeat_n("absent".to_string(), 6)),
            }
            rows.push(row);
        }
        let total: usize = self.regions.iter().map(|r| r.examples).sum();
        let mut ave = vec!["Ave".to_string(), total.to_string()];
        ave.extend(fmt(&self.average));
        rows.push(ave);
        let widths: Vec<usize> =
            (0..header.len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        if let Some(h) = &self.dataset_hash {
            out.push_str(&format!("dataset {h}\n"));
        }
        if let Some(c) = &self.checkpoint {
            out.push_str(&format!("checkpoint {c}\n"));
        }
        out
    }
}
