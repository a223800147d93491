//! Dataset manifests, image files and heatmap export.
//!
//! A synthetic dataset is a manifest of `(index, labels, seed)` rows; images
//! are regenerated from it on demand. User images are read from a directory
//! holding PGM or CSV files and a `labels.csv` of `file,labels` rows. Multiple
//! labels are joined with `;`.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::data::{gen_bag, SynthLesionSpec};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::train::Sample;

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: u64,
    pub labels: Vec<u8>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    index: u64,
    label: String,
    seed: u64,
}

fn format_labels(labels: &[u8]) -> String {
    labels
        .iter()
        .map(u8::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_labels(s: &str) -> Result<Vec<u8>> {
    let labels = s
        .split(';')
        .map(|t| match t.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::Format(format!(
                "label must be 0 or 1, got {other:?}"
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(labels)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn manifest_entries(
    spec: &SynthLesionSpec,
    start: u64,
    count: usize,
) -> Result<Vec<ManifestEntry>> {
    (start..start + count as u64)
        .map(|index| {
            let b = gen_bag(spec, index)?;
            Ok(ManifestEntry {
                index,
                labels: b.labels,
                seed: spec.seed,
            })
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for e in entries {
        w.serialize(ManifestRow {
            index: e.index,
            label: format_labels(&e.labels),
            seed: e.seed,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize::<ManifestRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok(ManifestEntry {
                index: row.index,
                labels: parse_labels(&row.label)?,
                seed: row.seed,
            })
        })
        .collect()
}

/// Regenerates the images of a manifest. Each row's seed replaces the spec's.
pub fn materialize(spec: &SynthLesionSpec, entries: &[ManifestEntry]) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            let b = gen_bag(
                &SynthLesionSpec {
                    seed: e.seed,
                    ..spec.clone()
                },
                e.index,
            )?;
            if b.labels != e.labels {
                return Err(Error::Format(format!(
                    "manifest row {} says labels {:?}, generator gives {:?}",
                    e.index, e.labels, b.labels
                )));
            }
            Ok(Sample {
                image: b.image,
                labels: b.labels,
            })
        })
        .collect()
}

/// Reads a grayscale PGM (scaled to `[0, 1]`) or a 2-D CSV as `[1, H, W]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let t = match ext.as_str() {
        "pgm" => {
            let img = image::open(path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
                .into_luma16();
            let (w, h) = img.dimensions();
            let data = img
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / u16::MAX as f64)
                .collect();
            Tensor::from_vec(&[h as usize, w as usize], data)?
        }
        "csv" => Tensor::from_csv(&fs::read_to_string(path)?)?,
        _ => return Err(arg_err!("unsupported image file {}", path.display())),
    };
    let (h, w) = (t.shape()[0], t.shape()[1]);
    t.reshape(&[1, h, w])
}

/// Reads every row of `dir/labels.csv`.
pub fn load_directory(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut r = csv::Reader::from_path(dir.join(LABELS_FILE)).map_err(csv_err)?;
    let mut out: Vec<Sample> = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != 2 {
            return Err(Error::Format(format!(
                "{LABELS_FILE} rows need file,labels"
            )));
        }
        let image = load_image(dir.join(&row[0]))?;
        if let Some(first) = out.first() {
            if first.image.shape() != image.shape()
                || first.labels.len() != parse_labels(&row[1])?.len()
            {
                return Err(shape_err!(
                    "{} differs in size or label count from the first image",
                    &row[0]
                ));
            }
        }
        out.push(Sample {
            image,
            labels: parse_labels(&row[1])?,
        });
    }
    if out.is_empty() {
        return Err(arg_err!(
            "{} lists no images",
            dir.join(LABELS_FILE).display()
        ));
    }
    Ok(out)
}

/// Writes an 8-bit PGM of a 2-D map with values in `[0, max]`, each cell
/// repeated `upscale` times in both directions.
pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor, max: f64, upscale: usize) -> Result<()> {
    if map.rank() != 2 || upscale == 0 || !(max > 0.0) {
        return Err(shape_err!(
            "write_pgm needs a 2-D map, positive max and upscale"
        ));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let img = GrayImage::from_fn((w * upscale) as u32, (h * upscale) as u32, |x, y| {
        let v = map.data()[(y as usize / upscale) * w + x as usize / upscale] / max;
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save_with_format(path.as_ref(), image::ImageFormat::Pnm)
        .map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))
}

/// `dir/{stem}.csv` and `dir/{stem}.pgm` for one patch-probability map.
pub fn write_heatmap(
    dir: impl AsRef<Path>,
    stem: &str,
    map: &Tensor,
    upscale: usize,
) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.as_ref().join(format!("{stem}.csv"));
    let pgm = dir.as_ref().join(format!("{stem}.pgm"));
    fs::write(&csv, map.to_csv()?)?;
    write_pgm(&pgm, map, 1.0, upscale)?;
    Ok((csv, pgm))
}
