//! Scripted waypoint demonstrations.

use super::env::{check_success, execute, Action, EnvState, ACTION_DIM};
use super::render::{render, Resolution};
use super::scene::{distance, Point, SceneSpec, Task};
use super::tokenizer::TokenSeq;
use crate::error::{CovarError, Result};
use crate::tensor::Tensor;

/// Shortest supported demonstration.
pub const MIN_FRAMES: usize = 6;
/// Effector standoff behind the target while pushing.
pub const PUSH_STANDOFF: f32 = 0.08;

/// One paired sample: `frames` is `T×3×H×W`, `actions` is `T×L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub frames: Tensor<f32>,
    pub actions: Tensor<f32>,
    pub tokens: TokenSeq,
    pub scene: SceneSpec,
}

impl Episode {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn resolution(&self) -> Resolution {
        Resolution {
            height: self.frames.shape()[2],
            width: self.frames.shape()[3],
        }
    }

    pub fn action_rows(&self) -> Vec<Action> {
        actions_from_tensor(&self.actions)
    }
}

pub fn actions_from_tensor(t: &Tensor<f32>) -> Vec<Action> {
    t.data()
        .chunks(ACTION_DIM)
        .map(|c| Action([c[0], c[1], c[2]]))
        .collect()
}

pub fn actions_to_tensor(actions: &[Action]) -> Tensor<f32> {
    Tensor::new(
        vec![actions.len(), ACTION_DIM],
        actions.iter().flat_map(|a| a.0).collect(),
    )
    .expect("rows have ACTION_DIM entries")
}

fn unit(from: Point, to: Point) -> Point {
    let d = distance(from, to).max(1e-6);
    [(to[0] - from[0]) / d, (to[1] - from[1]) / d]
}

/// Key poses `(x, y, grip)` of the scripted policy.
pub fn waypoints(scene: &SceneSpec) -> Vec<[f32; 3]> {
    let s = scene.effector_start;
    let target = scene.target().position;
    let goal = scene.goal;
    match scene.task {
        Task::PickPlace => vec![
            [s[0], s[1], 0.0],
            [target[0], target[1], 0.0],
            [target[0], target[1], 1.0],
            [goal[0], goal[1], 1.0],
            [goal[0], goal[1], 0.0],
        ],
        Task::Push => {
            let dir = unit(target, goal);
            let contact = [
                target[0] - PUSH_STANDOFF * dir[0],
                target[1] - PUSH_STANDOFF * dir[1],
            ];
            let end = [goal[0] - PUSH_STANDOFF * dir[0], goal[1] - PUSH_STANDOFF * dir[1]];
            // travel with the grip closed so nothing is pushed on the way
            vec![
                [s[0], s[1], 0.0],
                [s[0], s[1], 1.0],
                [contact[0], contact[1], 1.0],
                [contact[0], contact[1], 0.0],
                [end[0], end[1], 0.0],
            ]
        }
    }
}

/// Piecewise-linear resampling of `points` onto exactly `t` steps; every
/// waypoint lands on an integer step.
pub fn interpolate_waypoints(points: &[[f32; 3]], t: usize) -> Vec<Action> {
    let segments = points.len() - 1;
    let knots: Vec<usize> = (0..=segments)
        .map(|j| ((j * (t - 1)) as f64 / segments as f64).round() as usize)
        .collect();
    let mut out = Vec::with_capacity(t);
    for step in 0..t {
        let j = (0..segments)
            .find(|&j| step <= knots[j + 1])
            .unwrap_or(segments - 1);
        let (k0, k1) = (knots[j], knots[j + 1]);
        let u = if k1 == k0 {
            1.0
        } else {
            (step - k0) as f32 / (k1 - k0) as f32
        };
        let (a, b) = (points[j], points[j + 1]);
        let mut v = [0.0; 3];
        for c in 0..3 {
            v[c] = if u == 0.0 {
                a[c]
            } else if u == 1.0 {
                b[c]
            } else {
                a[c] + u * (b[c] - a[c])
            };
        }
        out.push(Action(v));
    }
    out
}

/// Renders the initial frame followed by the state after each action in
/// `actions[1..]`. The first action is the initial joint state, a fixed point.
pub fn render_rollout(scene: &SceneSpec, actions: &[Action], res: Resolution) -> (Tensor<f32>, EnvState) {
    let states = execute(scene, actions);
    let frames: Vec<Tensor<f32>> = states.iter().map(|s| render(s, scene, res)).collect();
    let last = states
        .last()
        .cloned()
        .unwrap_or_else(|| EnvState::initial(scene));
    (Tensor::stack(&frames).expect("frames share a shape"), last)
}

pub fn expert_actions(scene: &SceneSpec, t: usize) -> Result<Vec<Action>> {
    if t < MIN_FRAMES {
        return Err(CovarError::Config(format!(
            "expert demonstrations need at least {MIN_FRAMES} frames, got {t}"
        )));
    }
    Ok(interpolate_waypoints(&waypoints(scene), t))
}

pub fn expert_demo(scene: &SceneSpec, t: usize, res: Resolution) -> Result<Episode> {
    let actions = expert_actions(scene, t)?;
    let (frames, last) = render_rollout(scene, &actions, res);
    if !check_success(scene, &last) {
        return Err(CovarError::Unreachable(format!(
            "scripted policy failed on seed {} ({})",
            scene.seed,
            scene.task.name()
        )));
    }
    Ok(Episode {
        frames,
        actions: actions_to_tensor(&actions),
        tokens: scene.tokens(),
        scene: scene.clone(),
    })
}
