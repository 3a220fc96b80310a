//! Dataset manifest.
//!
//! ```text
//! # ssod-manifest v1 seed=42 scenes=1000 labeled_fraction=0.1
//! 0	unlabeled	3:10.5,4,22,17.25;0:40,40,52,50
//! 1	labeled	1:...
//! ```
//!
//! One tab-separated record per scene: id, split, then `;`-separated
//! annotations of the form `class:x1,y1,x2,y2`. Coordinates are written with
//! Rust's shortest round-trip float formatting so parsing is exact. Images are
//! not stored: they are regenerated from `(seed, id)`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use super::{Annotation, Image, Scene, Split};
use crate::boxes::BBox;
use crate::error::{Error, Result};

const HEADER: &str = "# ssod-manifest v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: u64,
    pub split: Split,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub labeled_fraction: f64,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn from_scenes(scenes: &[Scene], seed: u64, labeled_fraction: f64) -> Self {
        Manifest {
            seed,
            labeled_fraction,
            records: scenes
                .iter()
                .map(|s| ManifestRecord { id: s.id, split: s.split, annotations: s.annotations.clone() })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER} seed={} scenes={} labeled_fraction={}\n",
            self.seed,
            self.records.len(),
            self.labeled_fraction
        );
        for r in &self.records {
            let _ = write!(out, "{}\t{}\t", r.id, r.split.as_str());
            for (i, a) in r.annotations.iter().enumerate() {
                if i > 0 {
                    out.push(';');
                }
                let b = a.bbox;
                let _ = write!(out, "{}:{},{},{},{}", a.class_id, b.x1, b.y1, b.x2, b.y2);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { what: "manifest", line, msg };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty manifest".into()))?;
        let rest = header
            .strip_prefix(HEADER)
            .ok_or_else(|| perr(1, format!("expected header `{HEADER}`")))?;
        let mut seed = None;
        let mut fraction = None;
        for kv in rest.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| perr(1, format!("bad header field `{kv}`")))?;
            match k {
                "seed" => seed = Some(v.parse().map_err(|_| perr(1, format!("bad seed `{v}`")))?),
                "labeled_fraction" => {
                    fraction = Some(v.parse().map_err(|_| perr(1, format!("bad labeled_fraction `{v}`")))?)
                }
                _ => {}
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let id = cols
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| perr(ln, "bad id".into()))?;
            let split = match cols.next() {
                Some("labeled") => Split::Labeled,
                Some("unlabeled") => Split::Unlabeled,
                other => return Err(perr(ln, format!("bad split {other:?}"))),
            };
            let ann = cols.next().unwrap_or("");
            let mut annotations = Vec::new();
            for item in ann.split(';').filter(|s| !s.is_empty()) {
                let (c, coords) = item.split_once(':').ok_or_else(|| perr(ln, format!("bad annotation `{item}`")))?;
                let class_id = c.parse().map_err(|_| perr(ln, format!("bad class `{c}`")))?;
                let v: Vec<f64> = coords
                    .split(',')
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| perr(ln, format!("bad coordinates `{coords}`")))?;
                if v.len() != 4 {
                    return Err(perr(ln, format!("expected 4 coordinates, got {}", v.len())));
                }
                let bbox = BBox::new(v[0], v[1], v[2], v[3]);
                if !bbox.is_valid() {
                    return Err(perr(ln, format!("degenerate box `{coords}`")));
                }
                annotations.push(Annotation { class_id, bbox });
            }
            records.push(ManifestRecord { id, split, annotations });
        }
        Ok(Manifest {
            seed: seed.ok_or_else(|| perr(1, "header lacks seed".into()))?,
            labeled_fraction: fraction.ok_or_else(|| perr(1, "header lacks labeled_fraction".into()))?,
            records,
        })
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::write(path, manifest.to_text())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Manifest::from_text(&std::fs::read_to_string(path)?)
}

/// Binary PPM (P6) dump of an RGB image, values quantized to 8 bits.
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::invalid(format!("ppm needs 3 channels, got {}", img.channels)));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
