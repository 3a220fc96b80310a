//! Detection dump: one tab-separated record per detection.
//!
//! ```text
//! # image_id	class	score	x1	y1	x2	y2	sigma1	sigma2	sigma3	sigma4	sigma_mean
//! 17	3	0.912	10.2	4.0	22.9	17.5	0.21	0.30	0.18	0.25	0.235
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::Detection;
use crate::boxes::BBox;
use crate::error::{Error, Result};

const HEADER: &str = "# image_id\tclass\tscore\tx1\ty1\tx2\ty2\tsigma1\tsigma2\tsigma3\tsigma4\tsigma_mean";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub detection: Detection,
}

pub fn detections_to_text(records: &[DetectionRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in records {
        let d = &r.detection;
        let b = d.bbox;
        let _ = write!(out, "{}\t{}\t{}\t{}\t{}\t{}\t{}", r.image_id, d.class_id, d.score, b.x1, b.y1, b.x2, b.y2);
        for s in d.sigma {
            let _ = write!(out, "\t{s}");
        }
        let _ = writeln!(out, "\t{}", d.sigma_mean);
    }
    out
}

pub fn detections_from_text(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { what: "detection dump", line: i + 1, msg };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 12 {
            return Err(perr(format!("expected 12 columns, got {}", cols.len())));
        }
        let image_id = cols[0].parse().map_err(|_| perr(format!("bad image id `{}`", cols[0])))?;
        let class_id = cols[1].parse().map_err(|_| perr(format!("bad class `{}`", cols[1])))?;
        let v: Vec<f64> = cols[2..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| perr(e.to_string()))?;
        out.push(DetectionRecord {
            image_id,
            detection: Detection {
                class_id,
                score: v[0],
                bbox: BBox::new(v[1], v[2], v[3], v[4]),
                sigma: [v[5], v[6], v[7], v[8]],
                sigma_mean: v[9],
                iou_estimate: None,
            },
        });
    }
    Ok(out)
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    std::fs::write(path, detections_to_text(records))?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    detections_from_text(&std::fs::read_to_string(path)?)
}
