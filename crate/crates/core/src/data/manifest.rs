use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tiling::{tile_named, TilingSpec};
use crate::error::{Error, Result};
use crate::types::{DomainTag, ShapeSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub parent: String,
    pub row: usize,
    pub col: usize,
    pub split: Split,
}

impl ManifestEntry {
    /// `<parent>@<row>,<col>`
    pub fn sample_id(&self) -> String {
        format!("{}@{},{}", self.parent, self.row, self.col)
    }
}

/// Inverse of [`ManifestEntry::sample_id`].
pub fn parse_sample_id(id: &str) -> Result<(String, usize, usize)> {
    let bad = || Error::Parse {
        location: "sample id".into(),
        reason: format!("malformed {id:?}"),
    };
    let (parent, origin) = id.rsplit_once('@').ok_or_else(bad)?;
    let (r, c) = origin.split_once(',').ok_or_else(bad)?;
    Ok((parent.to_string(), r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
}

/// Size of one parent image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParentImage {
    pub id: String,
    pub height: usize,
    pub width: usize,
}

/// How parents are assigned to splits. With explicit lists, parents in
/// neither list are left out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitRule {
    AllTrain,
    AllTest,
    Lists { train: Vec<String>, test: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub domain: DomainTag,
    /// Height and width equal the crop size.
    pub shape: ShapeSpec,
    pub class_names: Vec<String>,
    /// Directory holding `images/` and `labels/`; defaults to the
    /// manifest's own directory when loaded from disk.
    pub root: Option<PathBuf>,
    pub entries: Vec<ManifestEntry>,
}

/// Dataset-level facts recorded alongside the tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestMeta {
    pub domain: DomainTag,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub root: Option<PathBuf>,
}

pub fn build_manifest(
    images: &[ParentImage],
    spec: &TilingSpec,
    rule: &SplitRule,
    meta: ManifestMeta,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let shape = ShapeSpec::new(spec.crop, spec.crop, meta.channels, meta.class_names.len())?;
    let known: BTreeSet<&str> = images.iter().map(|p| p.id.as_str()).collect();
    if known.len() != images.len() {
        return Err(Error::Config("duplicate parent image id".into()));
    }
    let split_of = |id: &str| -> Option<Split> {
        match rule {
            SplitRule::AllTrain => Some(Split::Train),
            SplitRule::AllTest => Some(Split::Test),
            SplitRule::Lists { train, test } => {
                if train.iter().any(|t| t == id) {
                    Some(Split::Train)
                } else if test.iter().any(|t| t == id) {
                    Some(Split::Test)
                } else {
                    None
                }
            }
        }
    };
    if let SplitRule::Lists { train, test } = rule {
        for id in train.iter().chain(test) {
            if !known.contains(id.as_str()) {
                return Err(Error::UnknownImageId(id.clone()));
            }
        }
        if let Some(dup) = train.iter().find(|id| test.contains(id)) {
            return Err(Error::Config(format!("image {dup} is in both train and test lists")));
        }
    }
    let mut parents: Vec<&ParentImage> = images.iter().collect();
    parents.sort_by(|a, b| a.id.cmp(&b.id));
    let mut entries = Vec::new();
    for p in parents {
        let Some(split) = split_of(&p.id) else { continue };
        for (row, col) in tile_named(&p.id, p.height, p.width, spec)? {
            entries.push(ManifestEntry {
                parent: p.id.clone(),
                row,
                col,
                split,
            });
        }
    }
    Ok(DatasetManifest {
        domain: meta.domain,
        shape,
        class_names: meta.class_names,
        root: meta.root,
        entries,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn crop(&self) -> usize {
        self.shape.height
    }

    pub fn entry(&self, index: usize) -> Result<&ManifestEntry> {
        self.entries.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.entries.len(),
        })
    }

    /// Entries of one split, in manifest order.
    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn position_of(&self, sample_id: &str) -> Option<usize> {
        let (parent, row, col) = parse_sample_id(sample_id).ok()?;
        self.entries
            .iter()
            .position(|e| e.parent == parent && e.row == row && e.col == col)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let sh = &self.shape;
        let _ = writeln!(s, "# domain\t{}", self.domain.as_str());
        let _ = writeln!(s, "# shape\t{}\t{}\t{}\t{}", sh.height, sh.width, sh.channels, sh.num_classes);
        let _ = writeln!(s, "# classes\t{}", self.class_names.join("\t"));
        if let Some(root) = &self.root {
            let _ = writeln!(s, "# root\t{}", root.display());
        }
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.parent, e.row, e.col, e.split.as_str());
        }
        s
    }

    pub fn from_tsv(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            location: format!("{origin}:{line}"),
            reason,
        };
        let mut domain = None;
        let mut shape = None;
        let mut class_names = None;
        let mut root = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix("# ") {
                let mut parts = header.split('\t');
                match parts.next() {
                    Some("domain") => {
                        let v = parts.next().ok_or_else(|| err(n, "missing domain".into()))?;
                        domain = Some(v.parse::<DomainTag>().map_err(|e| err(n, e.to_string()))?);
                    }
                    Some("shape") => {
                        let v: Vec<usize> = parts
                            .map(|p| p.parse().map_err(|_| err(n, format!("bad shape field {p:?}"))))
                            .collect::<Result<_>>()?;
                        if v.len() != 4 {
                            return Err(err(n, "shape needs 4 fields".into()));
                        }
                        shape = Some(ShapeSpec::new(v[0], v[1], v[2], v[3]).map_err(|e| err(n, e.to_string()))?);
                    }
                    Some("classes") => class_names = Some(parts.map(str::to_string).collect::<Vec<_>>()),
                    Some("root") => root = parts.next().map(PathBuf::from),
                    _ => {}
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(n, format!("expected 4 tab-separated fields, found {}", f.len())));
            }
            entries.push(ManifestEntry {
                parent: f[0].to_string(),
                row: f[1].parse().map_err(|_| err(n, format!("bad row {:?}", f[1])))?,
                col: f[2].parse().map_err(|_| err(n, format!("bad col {:?}", f[2])))?,
                split: f[3].parse().map_err(|e: Error| err(n, e.to_string()))?,
            });
        }
        let shape = shape.ok_or_else(|| err(0, "missing '# shape' header".into()))?;
        let class_names = class_names.ok_or_else(|| err(0, "missing '# classes' header".into()))?;
        if class_names.len() != shape.num_classes {
            return Err(err(0, "class list length differs from shape".into()));
        }
        Ok(Self {
            domain: domain.ok_or_else(|| err(0, "missing '# domain' header".into()))?,
            shape,
            class_names,
            root,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_tsv(&text, &path.display().to_string())?;
        let dir = path.parent().unwrap_or(Path::new("."));
        m.root = Some(match m.root.take() {
            Some(r) if r.is_absolute() => r,
            Some(r) => dir.join(r),
            None => dir.to_path_buf(),
        });
        Ok(m)
    }
}
