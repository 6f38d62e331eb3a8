//! Trajectory JSONL: one episode object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use beliefnet_core::sim::{basketball_episode, CourtExtent, Episode, Provenance, Role, SimError, Split, TrajectorySet};
use beliefnet_core::Rect;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Wire form of an [`Episode`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub k: usize,
    pub roles: Vec<String>,
    pub frames: Vec<Vec<[f64; 2]>>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Vec<[f64; 4]>>,
}

impl From<&Episode> for EpisodeRecord {
    fn from(ep: &Episode) -> Self {
        EpisodeRecord {
            k: ep.k(),
            roles: ep.roles.iter().map(Role::to_string).collect(),
            frames: ep.frames.clone(),
            seed: ep.seed,
            camera: ep.camera.as_ref().map(|c| c.iter().map(Rect::as_array).collect()),
        }
    }
}

impl EpisodeRecord {
    fn roles(&self) -> Result<Vec<Role>, SimError> {
        self.roles.iter().map(|r| r.parse()).collect()
    }

    fn check_k(&self) -> Result<(), String> {
        if self.roles.len() != self.k {
            return Err(format!("`k` is {} but {} roles are listed", self.k, self.roles.len()));
        }
        Ok(())
    }

    pub fn into_episode(self) -> Result<Episode, SimError> {
        let roles = self.roles()?;
        let ep = Episode {
            roles,
            frames: self.frames,
            camera: self.camera.map(|c| c.into_iter().map(Rect::from_array).collect()),
            seed: self.seed,
        };
        ep.validate(None)?;
        Ok(ep)
    }
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.to_string() }
}

fn records(path: &Path) -> Result<Vec<(usize, EpisodeRecord)>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e))?;
        rec.check_k().map_err(|m| parse_err(path, i + 1, m))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Reads episodes already in unit-field coordinates.
pub fn load_trajectories(path: &Path, split: Split, provenance: Provenance) -> Result<TrajectorySet, Error> {
    let mut episodes = Vec::new();
    for (line, rec) in records(path)? {
        episodes.push(rec.into_episode().map_err(|e| parse_err(path, line, e))?);
    }
    TrajectorySet::new(episodes, split, provenance).map_err(|e| parse_err(path, 0, e))
}

/// Reads raw basketball episodes: court coordinates scaled by `extent`,
/// offense and ball kept, one 50-frame window per episode.
pub fn load_basketball(path: &Path, extent: CourtExtent, split: Split) -> Result<TrajectorySet, Error> {
    let mut episodes = Vec::new();
    for (index, (line, rec)) in records(path)?.into_iter().enumerate() {
        let roles = rec.roles().map_err(|e| parse_err(path, line, e))?;
        let ep = basketball_episode(&roles, &rec.frames, extent, rec.seed, index).map_err(|e| parse_err(path, line, e))?;
        episodes.push(ep);
    }
    TrajectorySet::new(episodes, split, Provenance::Loaded).map_err(|e| parse_err(path, 0, e))
}

/// Writes one LF-terminated JSON object per episode.
pub fn save_trajectories<'a>(path: &Path, episodes: impl IntoIterator<Item = &'a Episode>) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        let line = serde_json::to_string(&EpisodeRecord::from(ep)).expect("records always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
