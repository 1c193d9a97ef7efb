//! Line-delimited dataset manifests: one tab-separated record per clip.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRecord {
    pub id: String,
    pub class: String,
    /// Clip directory, relative to the manifest location.
    pub path: String,
    pub frames: u32,
    pub fps: u32,
    pub split: Split,
}

impl ClipRecord {
    fn validate(&self) -> Result<()> {
        for (name, value) in [("id", &self.id), ("class", &self.class), ("path", &self.path)] {
            if value.is_empty() {
                return Err(Error::Data(format!("record {name} is empty")));
            }
            if value.contains(['\t', '\n', '\r']) {
                return Err(Error::Data(format!("record {name} contains tab or newline")));
            }
        }
        if self.frames == 0 || self.fps == 0 {
            return Err(Error::Data(format!("record {}: frames and fps must be positive", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
    /// Seed of the split assignment, recorded for reproducibility.
    pub split_seed: Option<u64>,
}

impl Manifest {
    pub fn new(records: Vec<ClipRecord>) -> Result<Self> {
        let m = Self { records, split_seed: None };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(&r.id) {
                return Err(Error::Data(format!("duplicate clip id '{}'", r.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_string(&self) -> String {
        let mut out = String::new();
        if let Some(seed) = self.split_seed {
            out.push_str(&format!("# split_seed={seed}\n"));
        }
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id, r.class, r.path, r.frames, r.fps, r.split
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut split_seed = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(seed) = comment.trim().strip_prefix("split_seed=") {
                    split_seed = Some(seed.parse().map_err(|_| {
                        Error::Data(format!("line {}: bad split_seed", lineno + 1))
                    })?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(Error::Data(format!(
                    "line {}: expected 6 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let record = ClipRecord {
                id: fields[0].to_string(),
                class: fields[1].to_string(),
                path: fields[2].to_string(),
                frames: fields[3]
                    .parse()
                    .map_err(|_| Error::Data(format!("line {}: bad frame count", lineno + 1)))?,
                fps: fields[4]
                    .parse()
                    .map_err(|_| Error::Data(format!("line {}: bad fps", lineno + 1)))?,
                split: fields[5].parse()?,
            };
            records.push(record);
        }
        let m = Self { records, split_seed };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
