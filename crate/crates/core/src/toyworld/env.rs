use serde::{Deserialize, Serialize};

use super::scene::{distance, Point, SceneSpec, Task};

pub const ACTION_DIM: usize = 3;
pub const PICKUP_RADIUS: f32 = 0.1;
pub const SUCCESS_RADIUS: f32 = 0.12;
pub const GRIP_THRESHOLD: f32 = 0.5;
/// Contact distance for the push rule.
pub const PUSH_RADIUS: f32 = 0.1;

/// `(x, y, grip)`: effector target in table coordinates and grip closure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action(pub [f32; ACTION_DIM]);

impl Action {
    pub fn new(x: f32, y: f32, grip: f32) -> Self {
        Self([x, y, grip])
    }

    pub fn position(&self) -> Point {
        [self.0[0], self.0[1]]
    }

    pub fn grip(&self) -> f32 {
        self.0[2]
    }

    /// Clamps into bounds; non-finite components fall back to `current`.
    pub fn sanitized(&self, current: &EnvState) -> Action {
        let fallback = [current.effector[0], current.effector[1], current.grip];
        let mut out = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            let v = if self.0[i].is_finite() {
                self.0[i]
            } else {
                fallback[i]
            };
            out[i] = if i < 2 { v.clamp(-1.0, 1.0) } else { v.clamp(0.0, 1.0) };
        }
        Action(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub effector: Point,
    pub grip: f32,
    pub held: Option<usize>,
    pub objects: Vec<Point>,
    /// Contact pushing is active only in push scenes.
    pub push_enabled: bool,
}

impl EnvState {
    pub fn initial(scene: &SceneSpec) -> Self {
        Self {
            effector: scene.effector_start,
            grip: 0.0,
            held: None,
            objects: scene.objects.iter().map(|o| o.position).collect(),
            push_enabled: scene.task == Task::Push,
        }
    }

    /// Joint state `a₀ = (x, y, grip)`.
    pub fn as_action(&self) -> Action {
        Action::new(self.effector[0], self.effector[1], self.grip)
    }

    fn closed(&self) -> bool {
        self.grip > GRIP_THRESHOLD
    }
}

/// Teleport kinematics with threshold grasping and contact pushing.
pub fn step(state: &EnvState, action: &Action) -> EnvState {
    let a = action.sanitized(state);
    let target = a.position();
    let motion = [target[0] - state.effector[0], target[1] - state.effector[1]];
    let mut next = state.clone();
    next.effector = target;

    if state.push_enabled && !state.closed() {
        for (i, p) in next.objects.iter_mut().enumerate() {
            if Some(i) != state.held && distance(*p, state.effector) <= PUSH_RADIUS {
                p[0] = (p[0] + motion[0]).clamp(-1.0, 1.0);
                p[1] = (p[1] + motion[1]).clamp(-1.0, 1.0);
            }
        }
    }

    next.grip = a.grip();
    let now_closed = next.closed();
    if state.closed() && !now_closed {
        next.held = None;
    } else if !state.closed() && now_closed && next.held.is_none() {
        next.held = next
            .objects
            .iter()
            .enumerate()
            .map(|(i, p)| (i, distance(*p, target)))
            .filter(|&(_, d)| d <= PICKUP_RADIUS)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i);
    }
    if let Some(h) = next.held {
        next.objects[h] = target;
    }
    next
}

/// Applies every action in order; element `i` is the state after action `i`.
pub fn execute(scene: &SceneSpec, actions: &[Action]) -> Vec<EnvState> {
    let mut state = EnvState::initial(scene);
    actions
        .iter()
        .map(|a| {
            state = step(&state, a);
            state.clone()
        })
        .collect()
}

pub fn check_success(scene: &SceneSpec, state: &EnvState) -> bool {
    let Some(pos) = state.objects.get(scene.target_index) else {
        return false;
    };
    let near = distance(*pos, scene.goal) <= SUCCESS_RADIUS;
    match scene.task {
        Task::PickPlace => near && state.held != Some(scene.target_index),
        Task::Push => near,
    }
}
