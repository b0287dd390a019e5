//! Binary field dumps.
//!
//! Layout, little endian: the 16-byte magic, then `version u32, n u32, m u32,
//! dims n×u64, h f64, origin n×f64`, then one class byte per grid node, then
//! `m` f64 values per grid node (zero at exterior nodes). Nodes are listed
//! in row-major order, the last axis varying fastest.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use mingraph::domain::NodeClass;
use mingraph::jetcalc::VectorField;
use thiserror::Error;

pub const MAGIC: &[u8; 16] = b"MINGRAPH-FIELD\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("malformed field dump: {0}")]
    Format(String),
}

/// A field as stored on disk, detached from its grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDump {
    pub n: usize,
    pub m: usize,
    pub dims: Vec<usize>,
    pub h: f64,
    pub origin: Vec<f64>,
    pub classes: Vec<u8>,
    pub values: Vec<f64>,
}

/// Grid indices in row-major order.
fn row_major(dims: &[usize]) -> Vec<usize> {
    let n = dims.len();
    let total: usize = dims.iter().product();
    let mut stride = vec![1usize; n];
    for k in 1..n {
        stride[k] = stride[k - 1] * dims[k - 1];
    }
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        out.push(idx.iter().zip(&stride).map(|(i, s)| i * s).sum());
        for k in (0..n).rev() {
            idx[k] += 1;
            if idx[k] < dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

impl FieldDump {
    pub fn from_field(f: &VectorField) -> Self {
        let g = &f.grid;
        let n = g.dim;
        let dims = g.shape[..n].to_vec();
        let classes_all = g.node_classes();
        let order = row_major(&dims);
        let mut classes = Vec::with_capacity(order.len());
        let mut values = Vec::with_capacity(order.len() * f.m);
        for gi in order {
            classes.push(classes_all[gi] as u8);
            match g.inside_index(gi) {
                Some(i) => values.extend((0..f.m).map(|a| f.get(i, a))),
                None => values.extend(std::iter::repeat(0.0).take(f.m)),
            }
        }
        Self { n, m: f.m, dims, h: g.h, origin: g.origin[..n].to_vec(), classes, values }
    }

    pub fn header_len(n: usize) -> usize {
        16 + 4 + 4 + 4 + 8 * n + 8 + 8 * n
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(Self::header_len(self.n) + self.classes.len() + 8 * self.values.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.n as u32).to_le_bytes());
        b.extend_from_slice(&(self.m as u32).to_le_bytes());
        for d in &self.dims {
            b.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        b.extend_from_slice(&self.h.to_le_bytes());
        for o in &self.origin {
            b.extend_from_slice(&o.to_le_bytes());
        }
        b.extend_from_slice(&self.classes);
        for v in &self.values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DumpError> {
        let bad = |s: &str| DumpError::Format(s.to_string());
        if b.len() < 28 || &b[..16] != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut at = 16;
        let mut take = |k: usize| -> Result<&[u8], DumpError> {
            let s = b.get(at..at + k).ok_or_else(|| bad("truncated"))?;
            at += k;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(DumpError::Format(format!("unsupported version {version}")));
        }
        let n = u32_at(take(4)?) as usize;
        let m = u32_at(take(4)?) as usize;
        if !(1..=4).contains(&n) || m == 0 {
            return Err(DumpError::Format(format!("implausible shape n = {n}, m = {m}")));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let f64_at = |s: &[u8]| f64::from_le_bytes(s.try_into().unwrap());
        let h = f64_at(take(8)?);
        let mut origin = Vec::with_capacity(n);
        for _ in 0..n {
            origin.push(f64_at(take(8)?));
        }
        let total = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| bad("dims overflow"))?;
        let classes = take(total)?.to_vec();
        if classes.iter().any(|c| *c > NodeClass::Exterior as u8) {
            return Err(bad("unknown node class"));
        }
        let raw = take(total * m * 8)?;
        let values = raw.chunks_exact(8).map(f64_at).collect();
        if at != b.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { n, m, dims, h, origin, classes, values })
    }

    /// Writes the stored values into `base`, which must live on the same
    /// grid; cut values of `base` are kept.
    pub fn restore_into(&self, base: &mut VectorField) -> Result<(), DumpError> {
        let g = base.grid.clone();
        let same = self.n == g.dim
            && self.m == base.m
            && self.dims == g.shape[..g.dim]
            && self.h.to_bits() == g.h.to_bits()
            && self.origin.iter().zip(&g.origin).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(DumpError::Format("dump does not match the configured grid".into()));
        }
        for (p, gi) in row_major(&self.dims).into_iter().enumerate() {
            if let Some(i) = g.inside_index(gi) {
                for a in 0..self.m {
                    base.set(i, a, self.values[p * self.m + a]);
                }
            }
        }
        Ok(())
    }

    /// One line per non-exterior node: coordinates, class, then the values.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let axes = ["x", "y", "z", "w"];
        let mut head: Vec<String> = axes[..self.n].iter().map(|s| s.to_string()).collect();
        head.push("class".into());
        head.extend((0..self.m).map(|a| format!("u{}", a + 1)));
        writeln!(w, "{}", head.join(","))?;
        let mut idx = vec![0usize; self.n];
        for (p, c) in self.classes.iter().enumerate() {
            if *c != NodeClass::Exterior as u8 {
                let mut row: Vec<String> =
                    (0..self.n).map(|k| format!("{}", self.origin[k] + idx[k] as f64 * self.h)).collect();
                row.push(c.to_string());
                row.extend(self.values[p * self.m..(p + 1) * self.m].iter().map(|v| format!("{v:e}")));
                writeln!(w, "{}", row.join(","))?;
            }
            for k in (0..self.n).rev() {
                idx[k] += 1;
                if idx[k] < self.dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(())
    }
}

pub fn dump_field(f: &VectorField, path: &Path) -> Result<(), DumpError> {
    fs::write(path, FieldDump::from_field(f).to_bytes())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FieldDump, DumpError> {
    FieldDump::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_runs_the_last_axis_fastest() {
        // axis 0 has stride 1 in the grid numbering
        assert_eq!(row_major(&[2, 3]), vec![0, 2, 4, 1, 3, 5]);
    }

    #[test]
    fn header_accounting() {
        assert_eq!(FieldDump::header_len(2), 68);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let d = FieldDump { n: 2, m: 1, dims: vec![2, 2], h: 0.5, origin: vec![0.0, 0.0], classes: vec![2; 4], values: vec![0.0; 4] };
        let b = d.to_bytes();
        assert_eq!(FieldDump::from_bytes(&b).unwrap(), d);
        assert!(matches!(FieldDump::from_bytes(&b[..b.len() - 1]), Err(DumpError::Format(_))));
    }
}
