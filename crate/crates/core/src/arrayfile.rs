//! Versioned plain-text container of named float64 arrays.
//!
//! Layout (one record per line, `\n` endings):
//!
//! ```text
//! cycleflow-arrays 1
//! kind <kind>
//! meta <key> <value>
//! array <name> <rows> <cols>
//! <cols values, row-major, one matrix row per line>
//! end
//! ```
//!
//! Floats are written in shortest round-trip exponent form, so a
//! load/save cycle reproduces the bytes exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &str = "cycleflow-arrays";
pub const VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArrayFile {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Array2<f64>>,
}

impl ArrayFile {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!value.contains('\n'));
        self.meta.insert(key.into(), value);
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array2<f64>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Corrupt(format!("missing meta key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta_str(key)?;
        raw.parse()
            .map_err(|_| Error::Corrupt(format!("bad value `{raw}` for meta key `{key}`")))
    }

    pub fn array(&self, name: &str) -> Result<&Array2<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Corrupt(format!("missing array `{name}`")))
    }

    pub fn take_array(&mut self, name: &str) -> Result<Array2<f64>> {
        self.arrays
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("missing array `{name}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Corrupt(format!(
                "expected file kind `{kind}`, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "kind {}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, a) in &self.arrays {
            let _ = writeln!(out, "array {name} {} {}", a.nrows(), a.ncols());
            for row in a.rows() {
                let mut first = true;
                for v in row {
                    if !first {
                        out.push(' ');
                    }
                    first = false;
                    let _ = write!(out, "{v:e}");
                }
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Corrupt("empty file".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(Error::Corrupt("bad magic header".into()));
        }
        let version = parts.next().unwrap_or("");
        if version != VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                expected: VERSION.to_string(),
            });
        }
        let kind_line = lines.next().ok_or_else(|| Error::Corrupt("missing kind line".into()))?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::Corrupt("missing kind line".into()))?
            .to_string();
        let mut file = ArrayFile::new(kind);
        let mut finished = false;
        while let Some(line) = lines.next() {
            if line == "end" {
                finished = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                file.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("array ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                if fields.len() != 3 {
                    return Err(Error::Corrupt(format!("bad array header `{line}`")));
                }
                let dim = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Corrupt(format!("bad array header `{line}`")))
                };
                let (rows, cols) = (dim(fields[1])?, dim(fields[2])?);
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let row = lines
                        .next()
                        .ok_or_else(|| Error::Corrupt(format!("array `{}` truncated at row {r}", fields[0])))?;
                    let before = data.len();
                    if cols > 0 {
                        for tok in row.split(' ') {
                            let v: f64 = tok
                                .parse()
                                .map_err(|_| Error::Corrupt(format!("bad float `{tok}` in `{}`", fields[0])))?;
                            data.push(v);
                        }
                    }
                    if data.len() - before != cols {
                        return Err(Error::Corrupt(format!(
                            "array `{}` row {r} has {} values, expected {cols}",
                            fields[0],
                            data.len() - before
                        )));
                    }
                }
                let a = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Corrupt(e.to_string()))?;
                file.arrays.insert(fields[0].to_string(), a);
            } else {
                return Err(Error::Corrupt(format!("unexpected line `{line}`")));
            }
        }
        if !finished {
            return Err(Error::Corrupt("missing end marker (truncated file?)".into()));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
