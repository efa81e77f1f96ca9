//! Examples, splits, augmentation and batching.

mod manifest;
mod synth;

pub use manifest::{export_manifest, load_manifest, read_rows, ManifestOptions, ManifestRow};
pub use synth::{synthesize_dataset, SynthSpec};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::knowledge::RegionTag;
use crate::tokenizer::{TokenSeq, Vocab, PAD};

/// An 8-bit image stored channel-major (`c, y, x`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Image { channels, height, width, data: vec![0; channels * height * width] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// The `size × size` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Image {
        let mut out = Image::new(self.channels, size, size);
        for c in 0..self.channels {
            for y in 0..size {
                let src = (c * self.height + top + y) * self.width + left;
                let dst = (c * size + y) * size;
                out.data[dst..dst + size].copy_from_slice(&self.data[src..src + size]);
            }
        }
        out
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }
}

/// Training-time random crop to `size` plus a horizontal flip with p = 0.5;
/// with `rng = None` (evaluation) a deterministic center crop.
pub fn augment(image: &Image, size: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Image> {
    if image.height < size || image.width < size {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than crop {size}",
            image.height, image.width
        )));
    }
    match rng {
        Some(rng) => {
            let top = rng.random_range(0..=image.height - size);
            let left = rng.random_range(0..=image.width - size);
            let cropped = image.crop(top, left, size);
            if rng.random::<f64>() < 0.5 {
                Ok(cropped.flip_horizontal())
            } else {
                Ok(cropped)
            }
        }
        None => Ok(image.crop((image.height - size) / 2, (image.width - size) / 2, size)),
    }
}

/// Two views of one study, its report and its body-part tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub images: [Image; 2],
    pub report: String,
    pub tag: RegionTag,
    /// Positive finding names, when the example is labelled.
    pub findings: Option<Vec<String>>,
}

impl Example {
    /// Reduces a list of views to exactly two: a single view is duplicated,
    /// extra views beyond the first two are dropped.
    pub fn two_views(mut views: Vec<Image>) -> Result<[Image; 2]> {
        match views.len() {
            0 => Err(Error::Dataset("example has no images".into())),
            1 => {
                let v = views.pop().unwrap();
                Ok([v.clone(), v])
            }
            _ => {
                views.truncate(2);
                let second = views.pop().unwrap();
                let first = views.pop().unwrap();
                Ok([first, second])
            }
        }
    }

    /// Binary label per entry of `labels`.
    pub fn label_vector(&self, labels: &[String]) -> Option<Vec<u8>> {
        let f = self.findings.as_ref()?;
        Some(labels.iter().map(|l| f.contains(l) as u8).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    /// Label space for finding vectors, sorted.
    pub finding_labels: Vec<String>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = (Split, &Example)> {
        self.train
            .iter()
            .map(|e| (Split::Train, e))
            .chain(self.val.iter().map(|e| (Split::Val, e)))
            .chain(self.test.iter().map(|e| (Split::Test, e)))
    }

    /// Training reports, for vocabulary construction.
    pub fn train_reports(&self) -> Vec<&str> {
        self.train.iter().map(|e| e.report.as_str()).collect()
    }

    /// SHA-256 over ids, tags, reports and pixels, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (split, e) in self.all() {
            h.update(format!("{split:?}|{}|{}|{}\n", e.id, e.tag, e.report).as_bytes());
            for img in &e.images {
                h.update(&img.data);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A training or evaluation batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Channels-last pixels for `2·B` images of `image_size²`, ordered
    /// `(example, view, y, x)`; values in `[0, 1]`.
    pub pixels: Array2<f32>,
    pub image_size: usize,
    pub channels: usize,
    /// Encoded targets, `B × T_max`, right-padded with PAD.
    pub targets: Array2<usize>,
    pub lengths: Vec<usize>,
    pub tags: Vec<RegionTag>,
    /// Finding label vectors when every example is labelled.
    pub labels: Option<Vec<Vec<u8>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Target sequences with PAD removed.
    pub fn target_seqs(&self) -> Vec<Vec<usize>> {
        self.targets
            .rows()
            .into_iter()
            .zip(&self.lengths)
            .map(|(r, &n)| r.iter().take(n).copied().collect())
            .collect()
    }

    /// `true` where the target matrix holds a real token.
    pub fn loss_mask(&self) -> Array2<bool> {
        self.targets.mapv(|t| t != PAD)
    }

    /// Assembles examples into a batch. With `rng`, views are augmented
    /// (random crop + flip); otherwise center-cropped.
    pub fn assemble(
        examples: &[&Example],
        vocab: &Vocab,
        max_len: usize,
        image_size: usize,
        finding_labels: &[String],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let pixels = stack_views(examples, image_size, rng)?;
        let channels = pixels.ncols();
        let seqs = examples.iter().map(|ex| vocab.encode(&ex.report, max_len)).collect::<Result<Vec<TokenSeq>>>()?;
        let t_max = seqs.iter().map(TokenSeq::len).max().unwrap_or(0);
        let mut targets = Array2::from_elem((examples.len(), t_max), PAD);
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.ids.iter().enumerate() {
                targets[[b, t]] = id;
            }
        }
        let labels: Option<Vec<Vec<u8>>> =
            examples.iter().map(|e| e.label_vector(finding_labels)).collect();
        Ok(Batch {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            pixels,
            image_size,
            channels,
            targets,
            lengths: seqs.iter().map(TokenSeq::len).collect(),
            tags: examples.iter().map(|e| e.tag).collect(),
            labels,
        })
    }
}

/// Crops both views of every example to `image_size` (augmenting when `rng`
/// is given) and stacks them channels-last, rows ordered
/// `(example, view, y, x)`, values scaled to `[0, 1]`.
pub fn stack_views(examples: &[&Example], image_size: usize, mut rng: Option<&mut ChaCha8Rng>) -> Result<Array2<f32>> {
    let Some(first) = examples.first() else {
        return Err(Error::Dataset("no examples to stack".into()));
    };
    let channels = first.images[0].channels;
    let hw = image_size * image_size;
    let mut pixels = Array2::<f32>::zeros((examples.len() * 2 * hw, channels));
    for (b, ex) in examples.iter().enumerate() {
        for (v, img) in ex.images.iter().enumerate() {
            if img.channels != channels {
                return Err(Error::Shape("mixed channel counts in batch".into()));
            }
            let view = augment(img, image_size, rng.as_deref_mut())?;
            let base = (b * 2 + v) * hw;
            for c in 0..channels {
                for (i, &px) in view.data[c * hw..(c + 1) * hw].iter().enumerate() {
                    pixels[[base + i, c]] = px as f32 / 255.0;
                }
            }
        }
    }
    Ok(pixels)
}

/// Shuffled minibatch order over one epoch; the sequence of index lists is
/// a pure function of the rng state.
pub fn epoch_order(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(size: usize) -> Image {
        let mut img = Image::new(1, size, size);
        for y in 0..size {
            for x in 0..size {
                img.set(0, y, x, ((x + 3 * y) % 251) as u8);
            }
        }
        img
    }

    #[test]
    fn augment_crops_to_size() {
        let img = ramp(256);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&img, 224, Some(&mut rng)).unwrap();
        assert_eq!((out.height, out.width), (224, 224));
        assert!(augment(&ramp(100), 224, None).is_err());
    }

    #[test]
    fn eval_mode_is_a_deterministic_center_crop() {
        let img = ramp(256);
        let a = augment(&img, 224, None).unwrap();
        let b = augment(&img, 224, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, img.crop(16, 16, 224));
    }

    #[test]
    fn flip_follows_the_rng_draw() {
        let img = ramp(224);
        // Replay the draws augment makes: crop offsets (both 0 here), then the flip draw.
        for seed in 0..20 {
            let mut probe = ChaCha8Rng::seed_from_u64(seed);
            let _ = probe.random_range(0..=0usize);
            let _ = probe.random_range(0..=0usize);
            let flip = probe.random::<f64>() < 0.5;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&img, 224, Some(&mut rng)).unwrap();
            if flip {
                assert_eq!(out, img.flip_horizontal());
                assert_eq!(out.get(0, 5, 0), img.get(0, 5, 223));
            } else {
                assert_eq!(out, img);
            }
        }
    }

    #[test]
    fn view_rule_duplicates_or_truncates() {
        let a = ramp(8);
        let mut b = ramp(8);
        b.set(0, 0, 0, 77);
        let one = Example::two_views(vec![a.clone()]).unwrap();
        assert_eq!(one[0], one[1]);
        let mut c = ramp(8);
        c.set(0, 1, 1, 99);
        let many = Example::two_views(vec![a.clone(), b.clone(), c.clone(), a.clone()]).unwrap();
        assert_eq!(many[0], a);
        assert_eq!(many[1], b);
        assert!(Example::two_views(vec![]).is_err());
    }

    #[test]
    fn batch_pads_targets_and_masks_pad() {
        let vocab = Vocab::build(&["there is effusion .", "normal"], 1).unwrap();
        let mk = |report: &str| Example {
            id: report.into(),
            images: [ramp(32), ramp(32)],
            report: report.into(),
            tag: RegionTag::Knee,
            findings: Some(vec!["effusion".into()]),
        };
        let (e1, e2) = (mk("there is effusion ."), mk("normal"));
        let labels = vec!["effusion".to_string(), "fracture".to_string()];
        let b = Batch::assemble(&[&e1, &e2], &vocab, 60, 32, &labels, None).unwrap();
        assert_eq!(b.targets.dim(), (2, 6));
        assert_eq!(b.lengths, vec![6, 3]);
        assert_eq!(b.loss_mask().iter().filter(|&&m| m).count(), 9);
        assert_eq!(b.target_seqs()[1], vec![1, vocab.id("normal").unwrap(), 2]);
        assert_eq!(b.pixels.dim(), (2 * 2 * 32 * 32, 1));
        assert_eq!(b.labels.unwrap()[0], vec![1, 0]);
    }

    #[test]
    fn epoch_order_is_reproducible() {
        let a = epoch_order(10, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let b = epoch_order(10, 3, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
