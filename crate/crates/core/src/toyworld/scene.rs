use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{tokenize, TokenSeq};
use crate::error::{CovarError, Result};

/// Table coordinates; both axes in `[-1, 1]`.
pub type Point = [f32; 2];

pub fn distance(a: Point, b: Point) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    PickPlace,
    Push,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::PickPlace => "PICK_PLACE",
            Task::Push => "PUSH",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Task::PickPlace => 1,
            Task::Push => 2,
        }
    }
}

/// Task selection for a whole dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    PickPlace,
    Push,
    /// Even seeds pick-and-place, odd seeds push.
    Mixed,
}

impl TaskFamily {
    pub fn task_for(self, seed: u64) -> Task {
        match self {
            TaskFamily::PickPlace => Task::PickPlace,
            TaskFamily::Push => Task::Push,
            TaskFamily::Mixed if seed % 2 == 0 => Task::PickPlace,
            TaskFamily::Mixed => Task::Push,
        }
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = CovarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pick_place" => Ok(TaskFamily::PickPlace),
            "push" => Ok(TaskFamily::Push),
            "mixed" => Ok(TaskFamily::Mixed),
            other => Err(CovarError::Config(format!(
                "unknown task family {other:?} (expected pick-place, push or mixed)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Square,
    Disc,
}

impl ObjectShape {
    pub const ALL: [ObjectShape; 2] = [ObjectShape::Square, ObjectShape::Disc];

    pub fn word(self) -> &'static str {
        match self {
            ObjectShape::Square => "square",
            ObjectShape::Disc => "disc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Color {
    pub const PALETTE: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.8, 0.2],
            Color::Blue => [0.2, 0.3, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::Cyan => [0.1, 0.85, 0.9],
            Color::Magenta => [0.9, 0.2, 0.85],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ObjectShape,
    pub color: Color,
    pub position: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub task: Task,
    pub target_index: usize,
    pub goal: Point,
    /// Initial effector position (the x,y part of the initial joint state).
    pub effector_start: Point,
    pub instruction: String,
}

impl SceneSpec {
    pub fn target(&self) -> &SceneObject {
        &self.objects[self.target_index]
    }

    pub fn tokens(&self) -> TokenSeq {
        tokenize(&self.instruction).expect("scene instructions come from the template vocabulary")
    }

    pub fn min_pairwise_distance(&self) -> f32 {
        let mut best = f32::INFINITY;
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                best = best.min(distance(a.position, b.position));
            }
        }
        best
    }
}

/// Layout rules enforced by rejection sampling.
#[derive(Clone, Debug)]
pub struct SceneConstraints {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Objects and goal are drawn uniformly from `[-extent, extent]²`.
    pub extent: f32,
    pub min_separation: f32,
    pub min_goal_distance: f32,
    pub min_goal_clearance: f32,
    pub min_start_clearance: f32,
    pub max_tries: usize,
}

impl Default for SceneConstraints {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 4,
            extent: 0.75,
            min_separation: 0.3,
            min_goal_distance: 0.4,
            min_goal_clearance: 0.15,
            min_start_clearance: 0.2,
            max_tries: 1000,
        }
    }
}

const PICK_TEMPLATES: [&str; 3] = [
    "pick the {color} {shape}",
    "place the {color} {shape} on the goal",
    "move the {color} {shape} to the goal",
];
const PUSH_TEMPLATES: [&str; 2] = ["push the {color} {shape}", "push the {color} {shape} to the goal"];

pub fn templates(task: Task) -> &'static [&'static str] {
    match task {
        Task::PickPlace => &PICK_TEMPLATES,
        Task::Push => &PUSH_TEMPLATES,
    }
}

pub fn fill_template(template: &str, color: Color, shape: ObjectShape) -> String {
    template
        .replace("{color}", color.word())
        .replace("{shape}", shape.word())
}

fn uniform_point(rng: &mut ChaCha8Rng, extent: f32) -> Point {
    [
        rng.random_range(-extent..=extent),
        rng.random_range(-extent..=extent),
    ]
}

/// Deterministic scene for `(seed, task)` under the default constraints.
pub fn sample_scene(seed: u64, task: Task) -> Result<SceneSpec> {
    sample_scene_with(seed, task, &SceneConstraints::default())
}

pub fn sample_scene_with(seed: u64, task: Task, rules: &SceneConstraints) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.stream());
    'attempt: for _ in 0..rules.max_tries {
        let n = rng.random_range(rules.min_objects..=rules.max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = ObjectShape::ALL[rng.random_range(0..ObjectShape::ALL.len())];
            let color = Color::PALETTE[rng.random_range(0..Color::PALETTE.len())];
            let position = uniform_point(&mut rng, rules.extent);
            if objects
                .iter()
                .any(|o| distance(o.position, position) < rules.min_separation)
            {
                continue 'attempt;
            }
            objects.push(SceneObject {
                shape,
                color,
                position,
            });
        }
        let target_index = rng.random_range(0..n);
        let target = objects[target_index];
        let ambiguous = objects.iter().enumerate().any(|(i, o)| {
            i != target_index && o.color == target.color && o.shape == target.shape
        });
        if ambiguous {
            continue;
        }
        let goal = uniform_point(&mut rng, rules.extent);
        if distance(goal, target.position) < rules.min_goal_distance {
            continue;
        }
        if objects.iter().enumerate().any(|(i, o)| {
            i != target_index && distance(o.position, goal) < rules.min_goal_clearance
        }) {
            continue;
        }
        let effector_start = uniform_point(&mut rng, rules.extent + 0.1);
        if objects
            .iter()
            .any(|o| distance(o.position, effector_start) < rules.min_start_clearance)
        {
            continue;
        }
        let list = templates(task);
        let template = list[rng.random_range(0..list.len())];
        return Ok(SceneSpec {
            seed,
            objects,
            task,
            target_index,
            goal,
            effector_start,
            instruction: fill_template(template, target.color, target.shape),
        });
    }
    Err(CovarError::SceneSampling {
        seed,
        tries: rules.max_tries,
    })
}
