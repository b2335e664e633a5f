use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::flight_log::{load_log, FlightLog};
use super::window::{make_windows, SequenceWindow};
use crate::dynamics::PhysicalParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Whole-log assignment to splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    /// `(log id, split)` in input order.
    pub logs: Vec<(String, Split)>,
    /// Windows per split.
    pub windows: [usize; 3],
    /// Share of windows per split.
    pub achieved: [f64; 3],
}

impl SplitAssignment {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.logs.iter().find(|(i, _)| i == id).map(|(_, s)| *s)
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.logs
            .iter()
            .filter(move |(_, s)| *s == split)
            .map(|(i, _)| i.as_str())
    }
}

/// Assign whole logs to train/validation/test so that window counts
/// approach `fractions`.
///
/// Logs are visited largest first (ties broken by a seeded shuffle) and each
/// goes to the split whose window count is furthest below its target,
/// relative to that target.
pub fn assign_splits(
    counts: &[(String, usize)],
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if counts.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 logs to fill train/validation/test, got {}",
            counts.len()
        )));
    }
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::Config(format!("split fractions must be > 0, got {fractions:?}")));
    }
    let fsum: f64 = fractions.iter().sum();
    let target: Vec<f64> = fractions.iter().map(|f| f / fsum).collect();
    let total: usize = counts.iter().map(|(_, c)| c).sum();

    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by(|&a, &b| counts[b].1.cmp(&counts[a].1));

    let mut assigned = vec![Split::Train; counts.len()];
    let mut windows = [0usize; 3];
    let mut members = [0usize; 3];
    for &i in &order {
        let deficit = |s: usize| {
            let want = target[s] * total.max(1) as f64;
            (want - windows[s] as f64) / want
        };
        let best = (0..3)
            .max_by(|&a, &b| deficit(a).total_cmp(&deficit(b)).then(b.cmp(&a)))
            .expect("three splits");
        assigned[i] = Split::ALL[best];
        windows[best] += counts[i].1;
        members[best] += 1;
    }

    // A split can only stay empty when most logs carry no windows; move the
    // smallest log of the most populated split into it.
    for s in 0..3 {
        if members[s] == 0 {
            let donor = (0..3).max_by_key(|&d| members[d]).expect("three splits");
            let pick = (0..counts.len())
                .filter(|&i| assigned[i].index() == donor)
                .min_by_key(|&i| counts[i].1)
                .expect("donor has members");
            assigned[pick] = Split::ALL[s];
            members[donor] -= 1;
            members[s] += 1;
            windows[donor] -= counts[pick].1;
            windows[s] += counts[pick].1;
        }
    }

    let achieved = windows.map(|w| if total == 0 { 0.0 } else { w as f64 / total as f64 });
    Ok(SplitAssignment {
        logs: counts
            .iter()
            .zip(&assigned)
            .map(|((id, _), s)| (id.clone(), *s))
            .collect(),
        windows,
        achieved,
    })
}

/// Window collections per split.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplits {
    pub train: Vec<SequenceWindow>,
    pub validation: Vec<SequenceWindow>,
    pub test: Vec<SequenceWindow>,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &[SequenceWindow] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<SequenceWindow> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }
}

/// Window the logs and assign them to splits.
pub fn split(
    logs: &[FlightLog],
    fractions: [f64; 3],
    seed: u64,
    windowing: &Windowing,
    params: &PhysicalParams,
) -> Result<(DatasetSplits, SplitAssignment)> {
    let per_log: Vec<Vec<SequenceWindow>> = logs
        .iter()
        .map(|l| make_windows(l, windowing.history, windowing.horizon, windowing.stride, params))
        .collect::<Result<_>>()?;
    let counts: Vec<(String, usize)> = logs
        .iter()
        .zip(&per_log)
        .map(|(l, w)| (l.id.clone(), w.len()))
        .collect();
    let assignment = assign_splits(&counts, fractions, seed)?;
    let mut splits = DatasetSplits::default();
    for ((_, s), windows) in assignment.logs.iter().zip(per_log) {
        splits.get_mut(*s).extend(windows);
    }
    Ok((splits, assignment))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windowing {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub split: Split,
    pub windows: usize,
}

/// Text description of a dataset: its log files, their split and the
/// windowing used to count them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
    pub fractions: [f64; 3],
    pub achieved: [f64; 3],
    pub logs: Vec<ManifestEntry>,
}

/// Loaded manifest together with its location.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub logs: Vec<(FlightLog, Split)>,
}

impl DatasetManifest {
    pub fn windowing(&self) -> Windowing {
        Windowing {
            history: self.history,
            horizon: self.horizon,
            stride: self.stride,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.logs
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.windows)
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, format!("# slungload dataset manifest\n{body}"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let logs = manifest
            .logs
            .iter()
            .map(|e| Ok((load_log(&root.join(&e.path))?, e.split)))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            manifest,
            root,
            logs,
        })
    }

    /// Windows of every split under the manifest's windowing, with `horizon`
    /// overriding the stored horizon (longer evaluation horizons).
    pub fn windows(&self, horizon: Option<usize>, params: &PhysicalParams) -> Result<DatasetSplits> {
        let w = self.manifest.windowing();
        self.windows_with(
            &Windowing {
                horizon: horizon.unwrap_or(w.horizon),
                ..w
            },
            params,
        )
    }

    /// Windows of every split under an arbitrary windowing; the split of each
    /// log is kept.
    pub fn windows_with(&self, w: &Windowing, params: &PhysicalParams) -> Result<DatasetSplits> {
        let mut splits = DatasetSplits::default();
        for (log, s) in &self.logs {
            splits
                .get_mut(*s)
                .extend(make_windows(log, w.history, w.horizon, w.stride, params)?);
        }
        Ok(splits)
    }

    /// SHA-256 over the manifest and the log files it lists.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(toml::to_string(&self.manifest).map_err(|e| Error::Config(e.to_string()))?);
        for e in &self.manifest.logs {
            h.update(std::fs::read(self.root.join(&e.path))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
