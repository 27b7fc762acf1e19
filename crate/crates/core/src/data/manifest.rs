//! Line-oriented dataset manifests.
//!
//! ```text
//! # comment
//! root = images
//! resolution = 64
//! bucket = 20-40
//! seed = 7
//! masks = masks        # optional; <stem>.png per image, otherwise generated
//! [train]
//! a.png
//! [test]
//! b.ppm
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::mask::Bucket;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub resolution: usize,
    pub bucket: Bucket,
    pub seed: u64,
    pub masks: Option<PathBuf>,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m = Manifest {
            root: base.to_path_buf(),
            resolution: 64,
            bucket: Bucket::B20_40,
            seed: 0,
            masks: None,
            train: Vec::new(),
            test: Vec::new(),
        };
        let mut section: Option<Split> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Config(format!("manifest line {}: {msg}", n + 1));
            match line {
                "[train]" => section = Some(Split::Train),
                "[test]" => section = Some(Split::Test),
                _ if line.starts_with('[') => return Err(bad(format!("unknown section {line}"))),
                _ => match section {
                    Some(Split::Train) => m.train.push(PathBuf::from(line)),
                    Some(Split::Test) => m.test.push(PathBuf::from(line)),
                    None => {
                        let (k, v) = line
                            .split_once('=')
                            .map(|(k, v)| (k.trim(), v.trim()))
                            .ok_or_else(|| bad("expected `key = value`".into()))?;
                        match k {
                            "root" => m.root = base.join(v),
                            "resolution" => {
                                m.resolution = v.parse().map_err(|_| bad(format!("bad resolution `{v}`")))?
                            }
                            "bucket" => m.bucket = v.parse()?,
                            "seed" => m.seed = v.parse().map_err(|_| bad(format!("bad seed `{v}`")))?,
                            "masks" => m.masks = Some(base.join(v)),
                            _ => return Err(bad(format!("unknown key `{k}`"))),
                        }
                    }
                },
            }
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn files(&self, split: Split) -> &[PathBuf] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_keys() {
        let m = Manifest::parse(
            "root = img\nresolution = 32 # px\nbucket = 0-20\nseed = 9\n[train]\na.png\nb.png\n\n[test]\nc.ppm\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(m.root, PathBuf::from("/data/img"));
        assert_eq!(m.resolution, 32);
        assert_eq!(m.bucket, Bucket::B0_20);
        assert_eq!(m.seed, 9);
        assert_eq!(m.train.len(), 2);
        assert_eq!(m.files(Split::Test), &[PathBuf::from("c.ppm")]);
    }

    #[test]
    fn rejects_unknown_keys() {
        let e = Manifest::parse("colour = red\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("colour"));
        assert!(Manifest::parse("[val]\n", Path::new(".")).is_err());
    }
}
