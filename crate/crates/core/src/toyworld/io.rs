//! COVR1 episode files and dataset manifests.
//!
//! Episode layout (all little-endian):
//!
//! ```text
//! "COVR" | u32 version=1 | u32 T | u32 H | u32 W | u32 L | u32 token_len
//! f32 frames[T·3·H·W] | f32 actions[T·L] | i32 tokens[token_len] | u64 seed
//! ```
//!
//! The task family is not stored per episode; the manifest records it so the
//! scene can be rebuilt from `(seed, task)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::env::ACTION_DIM;
use super::expert::Episode;
use super::render::Resolution;
use super::scene::{sample_scene, Task, TaskFamily};
use super::tokenizer::{TokenSeq, TOKEN_LEN};
use crate::error::{CovarError, Result};
use crate::par::Execution;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"COVR";
pub const VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Contents of one COVR1 file, before the scene is reattached.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEpisode {
    pub frames: Tensor<f32>,
    pub actions: Tensor<f32>,
    pub tokens: Vec<i32>,
    pub seed: u64,
}

pub fn encode_episode(frames: &Tensor<f32>, actions: &Tensor<f32>, tokens: &[i32], seed: u64) -> Result<Vec<u8>> {
    let fs_ = frames.shape();
    let as_ = actions.shape();
    if fs_.len() != 4 || fs_[1] != 3 || as_.len() != 2 || as_[0] != fs_[0] {
        return Err(CovarError::Shape(format!(
            "episode frames {fs_:?} / actions {as_:?} are not T×3×H×W / T×L"
        )));
    }
    let (t, h, w, l) = (fs_[0], fs_[2], fs_[3], as_[1]);
    let mut out = Vec::with_capacity(28 + 4 * (frames.numel() + actions.numel() + tokens.len()) + 8);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, t as u32, h as u32, w as u32, l as u32, tokens.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in frames.data().iter().chain(actions.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in tokens {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&seed.to_le_bytes());
    Ok(out)
}

pub fn decode_episode(bytes: &[u8], path: &Path) -> Result<RawEpisode> {
    let bad = |reason: String| CovarError::Format {
        kind: "COVR1",
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 28 || &bytes[..4] != MAGIC {
        return Err(bad("missing COVR magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (t, h, w, l, k) = (
        u32_at(8) as usize,
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
        u32_at(24) as usize,
    );
    let n_frames = t * 3 * h * w;
    let n_actions = t * l;
    let expected = 28 + 4 * (n_frames + n_actions + k) + 8;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for T={t} H={h} W={w} L={l}, found {}",
            bytes.len()
        )));
    }
    let mut off = 28;
    let mut f32s = |n: usize| {
        let v: Vec<f32> = bytes[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 4 * n;
        v
    };
    let frames = Tensor::new(vec![t, 3, h, w], f32s(n_frames))?;
    let actions = Tensor::new(vec![t, l], f32s(n_actions))?;
    let tokens: Vec<i32> = bytes[off..off + 4 * k]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    off += 4 * k;
    let seed = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    Ok(RawEpisode {
        frames,
        actions,
        tokens,
        seed,
    })
}

pub fn write_episode(path: &Path, episode: &Episode) -> Result<()> {
    let bytes = encode_episode(&episode.frames, &episode.actions, &episode.tokens, episode.scene.seed)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_raw_episode(path: &Path) -> Result<RawEpisode> {
    decode_episode(&fs::read(path)?, path)
}

/// Reads a COVR1 file and rebuilds its scene from `(seed, task)`.
pub fn read_episode(path: &Path, task: Task) -> Result<Episode> {
    let raw = read_raw_episode(path)?;
    let scene = sample_scene(raw.seed, task)?;
    let tokens: TokenSeq = raw.tokens.as_slice().try_into().map_err(|_| CovarError::Format {
        kind: "COVR1",
        path: path.to_path_buf(),
        reason: format!("expected {TOKEN_LEN} tokens, found {}", raw.tokens.len()),
    })?;
    Ok(Episode {
        frames: raw.frames,
        actions: raw.actions,
        tokens,
        scene,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub task: Task,
    pub split: Split,
}

/// Half-open seed range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn contains(&self, seed: u64) -> bool {
        (self.start..self.end).contains(&seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: SeedRange,
    pub val: SeedRange,
    pub test: SeedRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub action_dim: usize,
    pub token_len: usize,
    pub task_family: TaskFamily,
    pub splits: SplitRanges,
    pub episodes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| {
            CovarError::Dataset(format!("cannot read {}: {e}", path.display()))
        })?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != "COVR1" || m.version != VERSION {
            return Err(CovarError::Dataset(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }

    pub fn seeds(&self, split: Split) -> impl Iterator<Item = u64> + '_ {
        self.episodes
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| e.seed)
    }
}

/// Episodes of one dataset split held in memory.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub episodes: Vec<Episode>,
    pub unreadable: usize,
}

/// Loads the entries of `splits`; unreadable files are counted, not fatal.
pub fn load_split(dir: &Path, manifest: &Manifest, splits: &[Split]) -> LoadedSplit {
    let mut episodes = Vec::new();
    let mut unreadable = 0;
    for entry in manifest.episodes.iter().filter(|e| splits.contains(&e.split)) {
        match read_episode(&dir.join(&entry.file), entry.task) {
            Ok(ep) if ep.scene.seed == entry.seed => episodes.push(ep),
            Ok(_) | Err(_) => {
                log::warn!("skipping unreadable episode {}", entry.file);
                unreadable += 1;
            }
        }
    }
    LoadedSplit {
        episodes,
        unreadable,
    }
}

/// Episodes generated per batch by [`write_dataset`].
const GEN_CHUNK: usize = 64;

pub fn episode_file(seed: u64) -> String {
    format!("ep_{seed:08}.covr")
}

/// Generates a dataset into `dir`: consecutive seeds from `seed`, the first
/// `counts[0]` for training, then `counts[1]` validation and `counts[2]` test.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    counts: [usize; 3],
    family: TaskFamily,
    frames: usize,
    res: Resolution,
    exec: Execution,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let range = |start: u64, n: usize| SeedRange {
        start,
        end: start + n as u64,
    };
    let [n_train, n_val, n_test] = counts;
    let splits = SplitRanges {
        train: range(seed, n_train),
        val: range(seed + n_train as u64, n_val),
        test: range(seed + (n_train + n_val) as u64, n_test),
    };
    let seeds: Vec<u64> = (seed..splits.test.end).collect();
    let mut entries = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(GEN_CHUNK) {
        for ep in super::generate_episodes(chunk, family, frames, res, exec)? {
            let s = ep.scene.seed;
            let file = episode_file(s);
            write_episode(&dir.join(&file), &ep)?;
            let split = if splits.train.contains(s) {
                Split::Train
            } else if splits.val.contains(s) {
                Split::Val
            } else {
                Split::Test
            };
            entries.push(ManifestEntry {
                file,
                seed: s,
                task: ep.scene.task,
                split,
            });
        }
    }
    let manifest = Manifest {
        format: "COVR1".into(),
        version: VERSION,
        frames,
        height: res.height,
        width: res.width,
        action_dim: ACTION_DIM,
        token_len: TOKEN_LEN,
        task_family: family,
        splits,
        episodes: entries,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
