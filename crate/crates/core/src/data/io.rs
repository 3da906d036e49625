//! Plain-text dataset files.
//!
//! ```text
//! F <dim> V <vocab>
//! U <N> <M>
//! <N lines of dim floats>
//! <M token ids>
//! ...
//! ```

use super::Utterance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub utterances: Vec<Utterance>,
}

pub fn write_dataset<W: Write>(mut w: W, data: &Dataset) -> Result<()> {
    writeln!(w, "F {} V {}", data.feature_dim, data.vocab_size)?;
    for u in &data.utterances {
        writeln!(w, "U {} {}", u.features.rows(), u.target.len())?;
        for r in 0..u.features.rows() {
            let row: Vec<String> = u.features.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        let ids: Vec<String> = u.target.iter().map(|t| t.to_string()).collect();
        writeln!(w, "{}", ids.join(" "))?;
    }
    Ok(())
}

fn format_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("dataset line {line}: {msg}"))
}

fn parse_all<T: std::str::FromStr>(text: &str, line: usize) -> Result<Vec<T>> {
    text.split_whitespace()
        .map(|t| t.parse().map_err(|_| format_err(line, format!("cannot parse `{t}`"))))
        .collect()
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i, l?)),
            None => Err(Error::Format(format!("dataset ended early, expected {what}"))),
        }
    };
    let (ln, header) = next("header")?;
    let h: Vec<&str> = header.split_whitespace().collect();
    let (feature_dim, vocab_size) = match h.as_slice() {
        ["F", f, "V", v] => (
            f.parse::<usize>().map_err(|_| format_err(ln, "bad feature dim"))?,
            v.parse::<usize>().map_err(|_| format_err(ln, "bad vocab size"))?,
        ),
        _ => return Err(format_err(ln, "expected `F <dim> V <vocab>`")),
    };
    let mut utterances = Vec::new();
    while let Some((ln, line)) = lines_next_nonempty(&mut next)? {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let (n, m) = match parts.as_slice() {
            ["U", n, m] => (
                n.parse::<usize>().map_err(|_| format_err(ln, "bad frame count"))?,
                m.parse::<usize>().map_err(|_| format_err(ln, "bad target length"))?,
            ),
            _ => return Err(format_err(ln, "expected `U <N> <M>`")),
        };
        if n == 0 || m == 0 {
            return Err(format_err(ln, "utterances need frames and targets"));
        }
        let mut data = Vec::with_capacity(n * feature_dim);
        for _ in 0..n {
            let (ln, row) = next("feature row")?;
            let row: Vec<f64> = parse_all(&row, ln)?;
            if row.len() != feature_dim {
                return Err(format_err(
                    ln,
                    format!("{} features, header says {feature_dim}", row.len()),
                ));
            }
            data.extend(row);
        }
        let (ln, tl) = next("target line")?;
        let target: Vec<usize> = parse_all(&tl, ln)?;
        if target.len() != m {
            return Err(format_err(ln, format!("{} targets, expected {m}", target.len())));
        }
        if let Some(bad) = target.iter().find(|&&t| t >= vocab_size) {
            return Err(format_err(
                ln,
                format!("token {bad} outside vocabulary of {vocab_size}"),
            ));
        }
        utterances.push(Utterance {
            features: Tensor::new(vec![n, feature_dim], data)?,
            target,
            pad_left: 0,
            pad_right: 0,
            speed: 1.0,
        });
    }
    Ok(Dataset {
        feature_dim,
        vocab_size,
        utterances,
    })
}

fn lines_next_nonempty(next: &mut impl FnMut(&str) -> Result<(usize, String)>) -> Result<Option<(usize, String)>> {
    loop {
        match next("utterance") {
            Ok((ln, l)) if !l.trim().is_empty() => return Ok(Some((ln, l))),
            Ok(_) => continue,
            Err(Error::Format(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        read_dataset(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        write_dataset(&mut w, self)?;
        w.flush()?;
        Ok(())
    }
}
