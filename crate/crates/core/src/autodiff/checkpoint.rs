//! Plain-text parameter checkpoints.
//!
//! ```text
//! ssod-checkpoint v1
//! <kind> <name> <rank> <dim0> .. <dimN> : <hex bits> <hex bits> ...
//! ```
//!
//! `kind` is `param` or `buffer`; every value is the 16-digit hexadecimal
//! IEEE-754 bit pattern of the `f64`, so `load(save(x)) == x` bit for bit.
//! Gradients are not stored.

use std::fmt::Write as _;
use std::path::Path;

use super::params::{ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "ssod-checkpoint v1";

pub fn to_text(store: &ParamStore) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for p in store.iter() {
        let kind = match p.kind {
            ParamKind::Trainable => "param",
            ParamKind::Buffer => "buffer",
        };
        let _ = write!(out, "{kind} {} {}", p.name, p.value.shape().len());
        for d in p.value.shape() {
            let _ = write!(out, " {d}");
        }
        out.push_str(" :");
        for v in p.value.data() {
            let _ = write!(out, " {:016x}", v.to_bits());
        }
        out.push('\n');
    }
    out
}

pub fn from_text(text: &str) -> Result<ParamStore> {
    let err = |line: usize, msg: &str| Error::Parse {
        what: "checkpoint",
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(err(1, "missing header")),
    }
    let mut store = ParamStore::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (head, values) = line
            .split_once(" :")
            .ok_or_else(|| err(lineno, "missing ':' separator"))?;
        let mut fields = head.split_whitespace();
        let kind = match fields.next() {
            Some("param") => ParamKind::Trainable,
            Some("buffer") => ParamKind::Buffer,
            _ => return Err(err(lineno, "unknown entry kind")),
        };
        let name = fields.next().ok_or_else(|| err(lineno, "missing name"))?;
        let rank: usize = fields
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| err(lineno, "bad rank"))?;
        let shape = fields
            .map(|d| d.parse::<usize>().map_err(|_| err(lineno, "bad dimension")))
            .collect::<Result<Vec<_>>>()?;
        if shape.len() != rank {
            return Err(err(lineno, "rank does not match dimensions"));
        }
        let data = values
            .split_whitespace()
            .map(|h| {
                u64::from_str_radix(h, 16)
                    .map(f64::from_bits)
                    .map_err(|_| err(lineno, "bad value"))
            })
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, data).map_err(|e| err(lineno, &e.to_string()))?;
        store.add(name, tensor, kind)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    from_text(&std::fs::read_to_string(path)?)
}
