//! Procedural multi-region corpus.
//!
//! Each example gets a region-coded background texture and 0–3 finding
//! glyphs drawn into both views. The report mentions exactly the rendered
//! findings ("there is <finding> .") and is padded with region-specific
//! normal statements to 30–60 words. A glyph's shape is the finding's
//! position in its region's list, so the same shape means different findings
//! in different regions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Image};
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeBase, RegionTag};
use crate::tokenizer::normalize;

pub const MAX_GLYPHS: usize = 8;
const MIN_WORDS: usize = 30;
const MAX_WORDS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Examples per region.
    pub counts: BTreeMap<RegionTag, usize>,
    /// Renderable findings per region; each must belong to the region's topics.
    pub findings: BTreeMap<RegionTag, Vec<String>>,
    pub image_size: usize,
    pub max_findings: usize,
    /// Amplitude of the region background texture (intensity units).
    pub region_contrast: f32,
    /// Amplitude of uniform pixel noise.
    pub noise: f32,
    /// Train / val / test fractions per region.
    pub split: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        let findings: [(RegionTag, [&str; 4]); 6] = [
            (RegionTag::Chest, ["cardiomegaly", "effusion", "pneumothorax", "opacity"]),
            (RegionTag::Abdomen, ["obstruction", "consolidation", "gas", "degenerative"]),
            (RegionTag::Knee, ["effusion", "fracture", "prosthesis", "swelling"]),
            (RegionTag::Hip, ["fracture", "sclerosis", "lucency", "degenerative"]),
            (RegionTag::Wrist, ["fracture", "swelling", "angulation", "cast"]),
            (RegionTag::Shoulder, ["dislocation", "fracture", "calcification", "degenerative"]),
        ];
        SynthSpec {
            counts: RegionTag::ALL.iter().map(|&t| (t, 100)).collect(),
            findings: findings
                .iter()
                .map(|(t, f)| (*t, f.iter().map(|s| s.to_string()).collect()))
                .collect(),
            image_size: 224,
            max_findings: 3,
            region_contrast: 0.08,
            noise: 0.12,
            split: [0.70, 0.15, 0.15],
        }
    }
}

impl SynthSpec {
    /// Default spec with `n` examples for every region.
    pub fn uniform(n: usize) -> Self {
        SynthSpec { counts: RegionTag::ALL.iter().map(|&t| (t, n)).collect(), ..Default::default() }
    }

    pub fn validate(&self, kb: &KnowledgeBase) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.counts.is_empty() {
            return bad("synthesis spec lists no regions".into());
        }
        for (tag, &n) in &self.counts {
            if n == 0 {
                return bad(format!("count for {tag} must be positive"));
            }
            let Some(f) = self.findings.get(tag) else {
                return bad(format!("no findings listed for {tag}"));
            };
            if f.is_empty() || f.len() > MAX_GLYPHS {
                return bad(format!("{tag} needs 1..={MAX_GLYPHS} findings, got {}", f.len()));
            }
            let region = kb.region(*tag);
            if let Some(x) = f.iter().find(|x| !region.contains(x)) {
                return bad(format!("finding {x:?} is not a {tag} topic"));
            }
            if f.iter().collect::<BTreeSet<_>>().len() != f.len() {
                return bad(format!("duplicate findings for {tag}"));
            }
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(32) {
            return bad(format!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        if self.max_findings > 3 {
            return bad("at most 3 findings per example are supported".into());
        }
        let s: f64 = self.split.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.split.iter().any(|&x| x < 0.0) {
            return bad("split fractions must be non-negative and sum to 1".into());
        }
        Ok(())
    }

    /// Sorted union of all renderable findings.
    pub fn label_space(&self) -> Vec<String> {
        let set: BTreeSet<&String> =
            self.counts.keys().filter_map(|t| self.findings.get(t)).flatten().collect();
        set.into_iter().cloned().collect()
    }
}

/// Deterministic synthetic dataset for `(spec, seed)`.
pub fn synthesize_dataset(spec: &SynthSpec, kb: &KnowledgeBase, seed: u64) -> Result<Dataset> {
    spec.validate(kb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset { finding_labels: spec.label_space(), ..Default::default() };
    for (&tag, &n) in &spec.counts {
        let names = &spec.findings[&tag];
        let n_train = (n as f64 * spec.split[0]).round() as usize;
        let n_val = ((n as f64 * spec.split[1]).round() as usize).min(n - n_train);
        for i in 0..n {
            let k = rng.random_range(0..=spec.max_findings.min(names.len()));
            let mut chosen: Vec<usize> = (0..names.len()).collect();
            chosen.shuffle(&mut rng);
            chosen.truncate(k);
            chosen.sort_unstable();
            let found: Vec<String> = chosen.iter().map(|&j| names[j].clone()).collect();
            let views = [
                render_view(tag, &chosen, spec, &mut rng),
                render_view(tag, &chosen, spec, &mut rng),
            ];
            let ex = Example {
                id: format!("{tag}-{i:04}"),
                images: views,
                report: compose_report(tag, &found),
                tag,
                findings: Some(found),
            };
            if i < n_train {
                ds.train.push(ex);
            } else if i < n_train + n_val {
                ds.val.push(ex);
            } else {
                ds.test.push(ex);
            }
        }
    }
    Ok(ds)
}

fn normal_statements(tag: RegionTag) -> &'static [&'static str] {
    match tag {
        RegionTag::Chest => &[
            "the cardiac silhouette is within expected size .",
            "the mediastinal outline is unremarkable .",
            "both hemidiaphragms are well defined .",
            "the pulmonary vasculature appears unremarkable .",
            "the costophrenic angles are clear .",
            "the visible ribs are unremarkable .",
        ],
        RegionTag::Abdomen => &[
            "the small intestine is not dilated .",
            "the liver outline appears unremarkable .",
            "no free intraperitoneal air is seen .",
            "the renal outlines are unremarkable .",
            "the psoas margins are preserved .",
            "the visible vertebrae are unremarkable .",
        ],
        RegionTag::Knee => &[
            "the femorotibial articulation is preserved .",
            "the tibial plateau appears unremarkable .",
            "no loose body is seen .",
            "the fabella is noted incidentally .",
            "the quadriceps tendon outline is preserved .",
            "the fibular articulation is unremarkable .",
        ],
        RegionTag::Hip => &[
            "the trochanters appear unremarkable .",
            "the sacrum appears unremarkable .",
            "the obturator foramina are symmetric .",
            "the articular surfaces are congruent .",
            "the neck-shaft angle is preserved .",
            "no heterotopic ossification is seen .",
        ],
        RegionTag::Wrist => &[
            "the metacarpal bases appear unremarkable .",
            "the lunate is well seated .",
            "the carpometacarpal articulations are preserved .",
            "the trapezium appears unremarkable .",
            "the triangular fibrocartilage region is unremarkable .",
            "no radiopaque foreign body is seen .",
        ],
        RegionTag::Shoulder => &[
            "the acromion appears unremarkable .",
            "the coracoid process is unremarkable .",
            "the scapular body appears unremarkable .",
            "the articular surfaces are congruent .",
            "the ribs in view are unremarkable .",
            "no calcific tendinopathy is seen .",
        ],
    }
}

/// Finding sentences first, then normal statements until the report holds
/// at least 30 words.
pub(crate) fn compose_report(tag: RegionTag, findings: &[String]) -> String {
    let mut sentences: Vec<String> = if findings.is_empty() {
        vec!["no focal abnormality is seen .".to_string()]
    } else {
        findings.iter().map(|f| format!("there is {f} .")).collect()
    };
    let mut words: usize = sentences.iter().map(|s| normalize(s).len()).sum();
    for s in normal_statements(tag) {
        if words >= MIN_WORDS {
            break;
        }
        words += normalize(s).len();
        sentences.push(s.to_string());
    }
    debug_assert!((MIN_WORDS..=MAX_WORDS).contains(&words));
    sentences.join(" ")
}

fn texture(tag: RegionTag, u: f32, v: f32, phase: f32) -> f32 {
    use std::f32::consts::TAU;
    match tag {
        RegionTag::Chest => (TAU * 6.0 * v + phase).sin(),
        RegionTag::Abdomen => (TAU * 6.0 * u + phase).sin(),
        RegionTag::Knee => ((TAU * 4.0 * u + phase).sin() * (TAU * 4.0 * v + phase).sin()).signum(),
        RegionTag::Hip => {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            (TAU * 5.0 * r + phase).sin()
        }
        RegionTag::Wrist => (TAU * 4.0 * (u + v) + phase).sin(),
        RegionTag::Shoulder => (TAU * 4.0 * (u - v) + phase).sin(),
    }
}

/// Whether pixel offset `(dy, dx)` from a glyph center lies on glyph `shape`
/// of half-size `r`.
fn on_glyph(shape: usize, dy: i32, dx: i32, r: i32) -> bool {
    let t = (r / 3).max(1);
    let inside = dy.abs() <= r && dx.abs() <= r;
    let d2 = dy * dy + dx * dx;
    match shape {
        0 => d2 <= r * r,
        1 => inside && (dy.abs() > r - t || dx.abs() > r - t),
        2 => inside && (dy.abs() <= t / 2 + 1 || dx.abs() <= t / 2 + 1),
        3 => dx.abs() <= r && dy.abs() <= t,
        4 => inside && dy >= -r && 2 * dx.abs() <= dy + r,
        5 => d2 <= r * r && d2 >= (r - t) * (r - t),
        6 => dy.abs() <= r && dx.abs() <= t,
        _ => inside && ((dy - dx).abs() <= t / 2 + 1 || (dy + dx).abs() <= t / 2 + 1),
    }
}

fn render_view(tag: RegionTag, glyphs: &[usize], spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Image {
    let size = spec.image_size;
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let mut px = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 / size as f32, y as f32 / size as f32);
            let n = rng.random_range(-1.0f32..1.0);
            px[y * size + x] = 0.35 + spec.region_contrast * texture(tag, u, v, phase) + spec.noise * n;
        }
    }
    let cell = size / 3;
    let r = (size / 16) as i32;
    let slack = (cell as i32 / 2 - r - 2).max(0);
    let mut cells: Vec<usize> = (0..9).collect();
    cells.shuffle(rng);
    for (&shape, &c) in glyphs.iter().zip(&cells) {
        let cy = (c / 3 * cell + cell / 2) as i32 + rng.random_range(-slack..=slack);
        let cx = (c % 3 * cell + cell / 2) as i32 + rng.random_range(-slack..=slack);
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cy + dy, cx + dx);
                if y < 0 || x < 0 || y >= size as i32 || x >= size as i32 {
                    continue;
                }
                if on_glyph(shape, dy, dx, r) {
                    px[y as usize * size + x as usize] = 0.9;
                }
            }
        }
    }
    let data = px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Image { channels: 1, height: size, width: size, data }
}
