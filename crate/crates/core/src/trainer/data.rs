//! In-memory training data.

use std::path::Path;

use crate::error::{CovarError, Result};
use crate::model::Conditioning;
use crate::tensor::Tensor;
use crate::toyworld::io::{load_split, Manifest, Split};
use crate::toyworld::{sample_scene, Episode, Resolution, SceneSpec};

/// Fraction of unreadable files above which loading aborts.
pub const MAX_UNREADABLE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub cond: Vec<Conditioning<f32>>,
    /// Validation scenes used for periodic rollouts.
    pub val_scenes: Vec<SceneSpec>,
    pub unreadable: usize,
}

impl Dataset {
    pub fn from_episodes(episodes: Vec<Episode>, val_scenes: Vec<SceneSpec>) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| CovarError::Dataset("no training episodes".into()))?;
        let (t, res) = (first.frame_count(), first.resolution());
        if let Some(bad) = episodes.iter().find(|e| e.frame_count() != t || e.resolution() != res) {
            return Err(CovarError::Dataset(format!(
                "episode {} has a different shape from the rest",
                bad.scene.seed
            )));
        }
        let cond = episodes
            .iter()
            .map(|e| Conditioning::from_scene(&e.scene, res))
            .collect();
        Ok(Self {
            episodes,
            cond,
            val_scenes,
            unreadable: 0,
        })
    }

    /// Loads the train split of a COVR1 dataset directory. Unreadable files
    /// are skipped and counted; more than 1% of them is an error.
    pub fn load(dir: &Path, max_episodes: Option<usize>) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let split = load_split(dir, &manifest, &[Split::Train]);
        let listed = manifest.seeds(Split::Train).count();
        if listed > 0 && split.unreadable as f64 > MAX_UNREADABLE * listed as f64 {
            return Err(CovarError::Dataset(format!(
                "{} of {listed} training episodes are unreadable",
                split.unreadable
            )));
        }
        if split.unreadable > 0 {
            log::warn!("skipped {} unreadable episodes", split.unreadable);
        }
        let mut episodes = split.episodes;
        if let Some(n) = max_episodes {
            episodes.truncate(n);
        }
        let val_scenes = manifest
            .episodes
            .iter()
            .filter(|e| e.split == Split::Val)
            .map(|e| sample_scene(e.seed, e.task))
            .collect::<Result<_>>()?;
        let mut ds = Self::from_episodes(episodes, val_scenes)?;
        ds.unreadable = split.unreadable;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.episodes[0].frame_count()
    }

    pub fn resolution(&self) -> Resolution {
        self.episodes[0].resolution()
    }

    pub fn action_dim(&self) -> usize {
        self.episodes[0].actions.shape()[1]
    }

    /// Stacked `B×T×3×H×W` frames of the given episodes.
    pub fn video_batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let parts: Vec<_> = idx.iter().map(|&i| self.episodes[i].frames.clone()).collect();
        Tensor::stack(&parts)
    }

    /// Stacked `B×T×L` actions.
    pub fn action_batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let parts: Vec<_> = idx.iter().map(|&i| self.episodes[i].actions.clone()).collect();
        Tensor::stack(&parts)
    }

    pub fn cond_batch(&self, idx: &[usize]) -> Vec<Conditioning<f32>> {
        idx.iter().map(|&i| self.cond[i].clone()).collect()
    }
}
