//! Offline transition buffers with reward-to-go labels.
//!
//! On disk a dataset is JSON-lines, one transition per line with keys
//! `episode, t, s, a, r, done`. Reward-to-go labels are derived on load
//! from the discount factor and never written back.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bucket::compute_rtg;
use crate::error::{Error, Result};

/// A state: a tabular index or a fixed feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Obs {
    Index(usize),
    Features(Vec<f64>),
}

impl Obs {
    pub fn index(&self) -> Option<usize> {
        match self {
            Obs::Index(i) => Some(*i),
            Obs::Features(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    #[serde(rename = "episode")]
    pub episode_id: u64,
    pub t: usize,
    #[serde(rename = "s")]
    pub state: Obs,
    #[serde(rename = "a")]
    pub action: Action,
    #[serde(rename = "r")]
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    transitions: Vec<Transition>,
    rtg: Vec<f64>,
    episodes: Vec<Range<usize>>,
    gamma: f64,
}

impl Dataset {
    pub fn empty(gamma: f64) -> Self {
        Self {
            transitions: Vec::new(),
            rtg: Vec::new(),
            episodes: Vec::new(),
            gamma,
        }
    }

    /// Validates episode structure and computes reward-to-go labels.
    pub fn new(transitions: Vec<Transition>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "discount must lie in (0, 1], got {gamma}"
            )));
        }
        let mut episodes = Vec::new();
        let mut seen = HashSet::new();
        let mut start = 0;
        while start < transitions.len() {
            let id = transitions[start].episode_id;
            if !seen.insert(id) {
                return Err(Error::InvalidDataset(format!(
                    "episode {id} is not contiguous"
                )));
            }
            let mut end = start + 1;
            while end < transitions.len() && transitions[end].episode_id == id {
                if transitions[end].t <= transitions[end - 1].t {
                    return Err(Error::InvalidDataset(format!(
                        "timesteps not strictly increasing in episode {id}"
                    )));
                }
                end += 1;
            }
            let dones = transitions[start..end].iter().filter(|tr| tr.done).count();
            if dones != 1 || !transitions[end - 1].done {
                return Err(Error::InvalidDataset(format!(
                    "episode {id} must end with exactly one done flag"
                )));
            }
            episodes.push(start..end);
            start = end;
        }
        let mut rtg = Vec::with_capacity(transitions.len());
        for ep in &episodes {
            let rewards: Vec<f64> = transitions[ep.clone()].iter().map(|t| t.reward).collect();
            rtg.extend(compute_rtg(&rewards, gamma));
        }
        Ok(Self {
            transitions,
            rtg,
            episodes,
            gamma,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn rtg(&self) -> &[f64] {
        &self.rtg
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode_ranges(&self) -> &[Range<usize>] {
        &self.episodes
    }

    /// Reward-to-go at the first step of each episode.
    pub fn episode_returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|r| self.rtg[r.start]).collect()
    }

    pub fn max_episode_rtg(&self) -> Option<f64> {
        self.episode_returns().into_iter().reduce(f64::max)
    }

    /// Keeps the episodes whose initial RTG ranks in the top `fraction`
    /// (ties broken toward the lower episode id), in their original order.
    pub fn filter_top_fraction(&self, fraction: f64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "fraction must lie in (0, 1], got {fraction}"
            )));
        }
        if self.is_empty() {
            return Err(Error::InvalidDataset("cannot filter an empty dataset".into()));
        }
        let n = self.n_episodes();
        let keep = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
        let returns = self.episode_returns();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            returns[j]
                .total_cmp(&returns[i])
                .then(self.transitions[self.episodes[i].start]
                    .episode_id
                    .cmp(&self.transitions[self.episodes[j].start].episode_id))
        });
        let mut chosen = order[..keep].to_vec();
        chosen.sort_unstable();
        let transitions = chosen
            .into_iter()
            .flat_map(|e| self.transitions[self.episodes[e].clone()].iter().cloned())
            .collect();
        Dataset::new(transitions, self.gamma)
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        for tr in &self.transitions {
            serde_json::to_writer(&mut w, tr)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(File::create(path)?)
    }

    pub fn read_jsonl<R: BufRead>(r: R, gamma: f64) -> Result<Self> {
        let mut transitions = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let tr: Transition = serde_json::from_str(&line).map_err(|e| {
                Error::InvalidDataset(format!("line {}: {e}", lineno + 1))
            })?;
            transitions.push(tr);
        }
        Dataset::new(transitions, gamma)
    }

    pub fn load_jsonl(path: impl AsRef<Path>, gamma: f64) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::read_jsonl(BufReader::new(file), gamma)
    }
}
