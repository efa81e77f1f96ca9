//! JSONL manifests: one example per line,
//! `{"id", "image_paths", "report", "tag", "split", "findings"?}`.
//! Image paths are resolved relative to the manifest's directory.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Image, Split};
use crate::error::{Error, Result};
use crate::knowledge::RegionTag;
use crate::tokenizer::normalize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image_paths: Vec<String>,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub findings: Option<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct ManifestOptions {
    /// Drop reports whose word count falls outside `min_tokens..=max_tokens`.
    pub filter_length: bool,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Resize every view to `resize × resize` after decoding.
    pub resize: Option<usize>,
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        ManifestOptions { filter_length: false, min_tokens: 30, max_tokens: 60, resize: None, channels: 1 }
    }
}

impl ManifestRow {
    /// Decodes the row's views and applies the two-view rule.
    pub fn load_images(&self, base: &Path, opts: &ManifestOptions) -> Result<[Image; 2]> {
        let views = self
            .image_paths
            .iter()
            .take(2)
            .map(|p| load_image(&base.join(p), opts))
            .collect::<Result<Vec<_>>>()?;
        Example::two_views(views)
    }

    pub fn region(&self) -> Result<RegionTag> {
        self.tag.as_deref().ok_or_else(|| Error::UnknownRegionTag(String::new()))?.parse()
    }
}

fn load_image(path: &PathBuf, opts: &ManifestOptions) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingImage(path.clone()));
    }
    let img_err = |e: image::ImageError| Error::Image { path: path.clone(), msg: e.to_string() };
    let mut dynimg = image::open(path).map_err(img_err)?;
    if let Some(s) = opts.resize {
        if dynimg.width() as usize != s || dynimg.height() as usize != s {
            dynimg = dynimg.resize_exact(s as u32, s as u32, image::imageops::FilterType::Triangle);
        }
    }
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    match opts.channels {
        1 => Ok(Image { channels: 1, height: h, width: w, data: dynimg.to_luma8().into_raw() }),
        3 => {
            let rgb = dynimg.to_rgb8().into_raw();
            let mut out = Image::new(3, h, w);
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    out.data[c * h * w + i] = px[c];
                }
            }
            Ok(out)
        }
        c => Err(Error::InvalidArgument(format!("unsupported channel count {c}"))),
    }
}

/// Reads the raw rows without touching image files.
pub fn read_rows(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest { line: i + 1, msg: e.to_string() })?;
        if row.image_paths.is_empty() {
            return Err(Error::Manifest { line: i + 1, msg: "no image paths".into() });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Loads a manifest into train/val/test partitions.
pub fn load_manifest(path: &Path, opts: &ManifestOptions) -> Result<Dataset> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let rows = read_rows(path)?;
    let mut ds = Dataset::default();
    let mut labels = BTreeSet::new();
    for (i, row) in rows.into_iter().enumerate() {
        let tag = row.region().map_err(|e| Error::Manifest { line: i + 1, msg: e.to_string() })?;
        if opts.filter_length {
            let n = normalize(&row.report).len();
            if n < opts.min_tokens || n > opts.max_tokens {
                continue;
            }
        }
        let images = row.load_images(&base, opts)?;
        if let Some(f) = &row.findings {
            labels.extend(f.iter().cloned());
        }
        let ex = Example {
            id: row.id.clone().unwrap_or_else(|| format!("row{:05}", i + 1)),
            images,
            report: row.report,
            tag,
            findings: row.findings,
        };
        match row.split {
            Split::Train => ds.train.push(ex),
            Split::Val => ds.val.push(ex),
            Split::Test => ds.test.push(ex),
        }
    }
    ds.finding_labels = labels.into_iter().collect();
    Ok(ds)
}

/// Writes `manifest.jsonl` plus one PNG per view under `out_dir/images`.
pub fn export_manifest(ds: &Dataset, out_dir: &Path) -> Result<PathBuf> {
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let manifest = out_dir.join("manifest.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&manifest)?);
    for (split, ex) in ds.all() {
        let mut paths = Vec::with_capacity(2);
        for (v, img) in ex.images.iter().enumerate() {
            let rel = format!("images/{}_v{v}.png", ex.id);
            save_png(img, &out_dir.join(&rel))?;
            paths.push(rel);
        }
        let row = ManifestRow {
            id: Some(ex.id.clone()),
            image_paths: paths,
            report: ex.report.clone(),
            tag: Some(ex.tag.to_string()),
            split,
            findings: ex.findings.clone(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(manifest)
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let err = |e: image::ImageError| Error::Image { path: path.to_path_buf(), msg: e.to_string() };
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => image::GrayImage::from_raw(w, h, img.data.clone())
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(err),
        3 => {
            let n = img.height * img.width;
            let mut rgb = vec![0u8; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    rgb[3 * i + c] = img.data[c * n + i];
                }
            }
            image::RgbImage::from_raw(w, h, rgb).expect("buffer matches dimensions").save(path).map_err(err)
        }
        c => Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
    }
}
