//! Adapters that turn benchmark folders into [`EvalSample`]s.
//!
//! * CUFED5-style: `<id>_0.png` is the target, `<id>_1.png` .. `<id>_5.png`
//!   its references, stitched into one 2500x500 canvas.
//! * Self-reference: every PNG is a target and its own LR is the reference
//!   (bicubically brought back to HR scale so the encoder sees the usual size).
//! * Random-reference: every PNG is a target; the reference is another image
//!   of the same folder drawn with a fixed seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, stitch_references, EvalSample, PairPaths};
use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, load_png, Scale};

pub const CUFED5_CELL: usize = 500;
pub const CUFED5_REFS: usize = 5;

/// Benchmark adapters selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Cufed5,
    SelfReference,
    RandomReference,
    Pairs,
    Synthetic,
}

impl Dataset {
    pub const ALL: [Dataset; 5] = [
        Dataset::Cufed5,
        Dataset::SelfReference,
        Dataset::RandomReference,
        Dataset::Pairs,
        Dataset::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Cufed5 => "cufed5",
            Dataset::SelfReference => "self-ref",
            Dataset::RandomReference => "random-ref",
            Dataset::Pairs => "pairs",
            Dataset::Synthetic => "synthetic",
        }
    }

    /// `root` is required for every adapter except `synthetic`, which reads
    /// `count`, `size` and `seed` instead.
    pub fn load(self, root: Option<&Path>, count: usize, size: usize, seed: u64) -> Result<Vec<EvalSample>> {
        let need_root = || root.ok_or_else(|| Error::config("root", format!("dataset `{}` needs --root", self.name())));
        match self {
            Dataset::Cufed5 => cufed5(need_root()?),
            Dataset::SelfReference => self_reference(need_root()?),
            Dataset::RandomReference => random_reference(need_root()?, seed),
            Dataset::Pairs => from_pairs(&data::load_pair_dataset(need_root()?)?),
            Dataset::Synthetic => Ok(synthetic(count, size, seed)),
        }
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dataset::ALL.into_iter().find(|d| d.name() == s).ok_or_else(|| {
            let names: Vec<_> = Dataset::ALL.iter().map(|d| d.name()).collect();
            Error::config("dataset", format!("unknown dataset `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned()
}

fn list_pngs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn cufed5(root: impl AsRef<Path>) -> Result<Vec<EvalSample>> {
    let root = root.as_ref();
    let mut items: BTreeMap<String, BTreeMap<usize, PathBuf>> = BTreeMap::new();
    for path in list_pngs(root)? {
        let stem = stem_of(&path);
        let parsed = stem.rsplit_once('_').and_then(|(id, k)| Some((id.to_owned(), k.parse::<usize>().ok()?)));
        let Some((id, k)) = parsed else {
            return Err(Error::MalformedDataset(format!("{}: expected `<id>_<k>.png`", path.display())));
        };
        items.entry(id).or_default().insert(k, path);
    }
    items
        .into_iter()
        .map(|(id, files)| {
            let expected: Vec<usize> = (0..=CUFED5_REFS).collect();
            if files.keys().copied().collect::<Vec<_>>() != expected {
                return Err(Error::MalformedDataset(format!(
                    "item `{id}` in {} needs files _0 .. _{CUFED5_REFS}, found {:?}",
                    root.display(),
                    files.keys().collect::<Vec<_>>()
                )));
            }
            let hr = load_png(&files[&0])?;
            let refs = (1..=CUFED5_REFS).map(|k| load_png(&files[&k])).collect::<Result<Vec<_>>>()?;
            let canvas = stitch_references(&refs, CUFED5_CELL, CUFED5_REFS)
                .map_err(|e| Error::MalformedDataset(format!("item `{id}`: {e}")))?;
            EvalSample::from_hr(id, hr, canvas)
        })
        .collect()
}

pub fn self_reference(root: impl AsRef<Path>) -> Result<Vec<EvalSample>> {
    list_pngs(root.as_ref())?
        .into_iter()
        .map(|path| {
            let hr = load_png(&path)?;
            let mut s = EvalSample::from_hr(stem_of(&path), hr.clone(), hr)?;
            s.reference = bicubic_resize(&s.lr, Scale::up(4))?;
            Ok(s)
        })
        .collect()
}

pub fn random_reference(root: impl AsRef<Path>, seed: u64) -> Result<Vec<EvalSample>> {
    let paths = list_pngs(root.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = paths.len();
    (0..n)
        .map(|i| {
            // draw from the others when there are any
            let j = if n > 1 { (i + rng.gen_range(1..n)) % n } else { i };
            EvalSample::from_hr(stem_of(&paths[i]), load_png(&paths[i])?, load_png(&paths[j])?)
        })
        .collect()
}

pub fn from_pairs(pairs: &[PairPaths]) -> Result<Vec<EvalSample>> {
    pairs
        .iter()
        .map(|p| {
            let name = stem_of(&p.hr);
            let name = name.strip_suffix("_hr").unwrap_or(&name).to_owned();
            EvalSample::from_hr(name, load_png(&p.hr)?, load_png(&p.reference)?)
        })
        .collect()
}

/// The desk training pairs, for train-set scoring.
pub fn synthetic(count: usize, size: usize, seed: u64) -> Vec<EvalSample> {
    data::synthetic::desk_pairs(count, size, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (hr, r))| EvalSample::from_hr(format!("synthetic_{i:03}"), hr, r).expect("synthetic sizes are valid"))
        .collect()
}
