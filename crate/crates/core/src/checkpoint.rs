//! Versioned textual checkpoint of named matrices.
//!
//! Values are written as the 16-hex-digit IEEE-754 bit pattern of each `f64`,
//! so a round trip through text reproduces every matrix bit for bit,
//! including signed zeros and subnormals.  Layout:
//!
//! ```text
//! raglab-ckpt v1
//! mat <name> <rows> <cols>
//! <hex> <hex> ...        one line per matrix row
//! ```

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::error::{CoreError, Result};
use crate::mat::Mat;

const MAGIC: &str = "raglab-ckpt v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { entries: Vec::new() }
    }

    /// Append a named matrix.  Names must be unique and whitespace-free.
    pub fn push(&mut self, name: String, mat: Mat) {
        assert!(!name.is_empty() && !name.contains(char::is_whitespace), "bad checkpoint name");
        assert!(self.get(&name).is_none(), "duplicate checkpoint name {name}");
        self.entries.push((name, mat));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (name, mat) in &self.entries {
            out.push_str(&format!("mat {} {} {}\n", name, mat.rows(), mat.cols()));
            for r in 0..mat.rows() {
                let row = mat.row(r);
                for (j, v) in row.iter().enumerate() {
                    if j > 0 {
                        out.push(' ');
                    }
                    out.push_str(&format!("{:016x}", v.to_bits()));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l == MAGIC => {}
            Some(l) => {
                return Err(CoreError::BadCheckpoint(format!("unknown header '{l}'")));
            }
            None => return Err(CoreError::BadCheckpoint("empty checkpoint".to_string())),
        }
        let mut ck = Checkpoint::new();
        while let Some(line) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("mat") {
                return Err(CoreError::BadCheckpoint(format!("expected 'mat' line, got '{line}'")));
            }
            let name = parts
                .next()
                .ok_or_else(|| CoreError::BadCheckpoint("mat line missing name".to_string()))?;
            let rows: usize = parse_dim(parts.next(), "rows")?;
            let cols: usize = parse_dim(parts.next(), "cols")?;
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                let row_line = lines.next().ok_or_else(|| {
                    CoreError::BadCheckpoint(format!("{name}: missing row {r} of {rows}"))
                })?;
                let mut count = 0;
                for (j, tok) in row_line.split_whitespace().enumerate() {
                    if j >= cols {
                        return Err(CoreError::BadCheckpoint(format!("{name}: row {r} too long")));
                    }
                    let bits = u64::from_str_radix(tok, 16).map_err(|_| {
                        CoreError::BadCheckpoint(format!("{name}: bad hex value '{tok}'"))
                    })?;
                    data[r * cols + j] = f64::from_bits(bits);
                    count += 1;
                }
                if count != cols {
                    return Err(CoreError::BadCheckpoint(format!(
                        "{name}: row {r} has {count} values, expected {cols}"
                    )));
                }
            }
            if ck.get(name).is_some() {
                return Err(CoreError::BadCheckpoint(format!("duplicate matrix '{name}'")));
            }
            ck.push(name.to_string(), Mat::from_vec(rows, cols, data));
        }
        Ok(ck)
    }
}

fn parse_dim(tok: Option<&str>, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| CoreError::BadCheckpoint(format!("bad or missing {what}")))
}
