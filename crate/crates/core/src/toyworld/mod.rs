//! Synthetic 2D tabletop: scenes, dynamics, rendering, scripted experts and
//! the on-disk episode format.

mod env;
mod expert;
pub mod io;
mod render;
mod scene;
mod tokenizer;

pub use env::{
    check_success, execute, step, Action, EnvState, ACTION_DIM, GRIP_THRESHOLD, PICKUP_RADIUS,
    PUSH_RADIUS, SUCCESS_RADIUS,
};
pub use expert::{
    actions_from_tensor, actions_to_tensor, expert_actions, expert_demo, interpolate_waypoints,
    render_rollout, waypoints, Episode, MIN_FRAMES, PUSH_STANDOFF,
};
pub use render::{render, render_layers, Layers, Resolution, BACKGROUND};
pub use scene::{
    distance, fill_template, sample_scene, sample_scene_with, templates, Color, ObjectShape,
    Point, SceneConstraints, SceneObject, SceneSpec, Task, TaskFamily,
};
pub use tokenizer::{detokenize, tokenize, word_id, TokenSeq, PAD_ID, TOKEN_LEN, VOCAB};

use crate::error::Result;
use crate::par::{self, Execution};

/// Generates expert episodes for `seeds` (one task per seed from `family`).
pub fn generate_episodes(
    seeds: &[u64],
    family: TaskFamily,
    frames: usize,
    res: Resolution,
    exec: Execution,
) -> Result<Vec<Episode>> {
    par::map_indexed(seeds.len(), exec, |i| {
        let seed = seeds[i];
        let scene = sample_scene(seed, family.task_for(seed))?;
        expert_demo(&scene, frames, res)
    })
    .into_iter()
    .collect()
}
