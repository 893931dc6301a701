//! Deterministic rasterizer for tabletop states.

use serde::{Deserialize, Serialize};

use super::env::{EnvState, GRIP_THRESHOLD};
use super::scene::{ObjectShape, Point, SceneSpec};
use crate::tensor::Tensor;

pub const BACKGROUND: f32 = 0.5;
pub const GOAL_SHADE: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
        }
    }
}

impl Resolution {
    /// Object side/diameter in pixels: 6 px at height 32.
    pub fn object_px(&self) -> usize {
        ((6 * self.height) as f32 / 32.0).round().max(1.0) as usize
    }

    fn goal_px(&self) -> usize {
        ((8 * self.height) as f32 / 32.0).round().max(3.0) as usize
    }

    /// Continuous pixel coordinates `(col, row)` of a table point.
    pub fn to_pixel(&self, p: Point) -> (f32, f32) {
        (
            (p[0] + 1.0) * self.width as f32 / 2.0,
            (p[1] + 1.0) * self.height as f32 / 2.0,
        )
    }
}

/// Which overlays to draw on top of the background.
#[derive(Clone, Copy, Debug)]
pub struct Layers {
    pub goal: bool,
    pub objects: bool,
    pub effector: bool,
}

impl Layers {
    pub const ALL: Layers = Layers {
        goal: true,
        objects: true,
        effector: true,
    };
    pub const BACKGROUND_ONLY: Layers = Layers {
        goal: false,
        objects: false,
        effector: false,
    };
}

struct Canvas<'a> {
    res: Resolution,
    data: &'a mut [f32],
}

impl Canvas<'_> {
    fn put(&mut self, row: isize, col: isize, rgb: [f32; 3]) {
        let (h, w) = (self.res.height as isize, self.res.width as isize);
        if row < 0 || col < 0 || row >= h || col >= w {
            return;
        }
        let plane = (h * w) as usize;
        let idx = (row * w + col) as usize;
        for (c, v) in rgb.iter().enumerate() {
            self.data[c * plane + idx] = *v;
        }
    }

    fn square(&mut self, center: (f32, f32), side: usize, rgb: [f32; 3]) {
        let c0 = (center.0 - side as f32 / 2.0 + 0.5).floor() as isize;
        let r0 = (center.1 - side as f32 / 2.0 + 0.5).floor() as isize;
        for r in r0..r0 + side as isize {
            for c in c0..c0 + side as isize {
                self.put(r, c, rgb);
            }
        }
    }

    fn outline(&mut self, center: (f32, f32), side: usize, rgb: [f32; 3]) {
        let c0 = (center.0 - side as f32 / 2.0 + 0.5).floor() as isize;
        let r0 = (center.1 - side as f32 / 2.0 + 0.5).floor() as isize;
        let last = side as isize - 1;
        for d in 0..side as isize {
            self.put(r0, c0 + d, rgb);
            self.put(r0 + last, c0 + d, rgb);
            self.put(r0 + d, c0, rgb);
            self.put(r0 + d, c0 + last, rgb);
        }
    }

    fn disc(&mut self, center: (f32, f32), diameter: usize, rgb: [f32; 3]) {
        let r = diameter as f32 / 2.0;
        let (r_min, r_max) = ((center.1 - r).floor() as isize, (center.1 + r).ceil() as isize);
        let (c_min, c_max) = ((center.0 - r).floor() as isize, (center.0 + r).ceil() as isize);
        for row in r_min..=r_max {
            for col in c_min..=c_max {
                let dy = row as f32 + 0.5 - center.1;
                let dx = col as f32 + 0.5 - center.0;
                if dx * dx + dy * dy <= r * r {
                    self.put(row, col, rgb);
                }
            }
        }
    }

    fn crosshair(&mut self, center: (f32, f32), filled: bool) {
        let white = [1.0; 3];
        let (c, r) = (center.0.floor() as isize, center.1.floor() as isize);
        for d in -2..=2 {
            self.put(r, c + d, white);
            self.put(r + d, c, white);
        }
        if filled {
            for dr in -1..=1 {
                for dc in -1..=1 {
                    self.put(r + dr, c + dc, white);
                }
            }
        }
    }
}

/// Renders a `3×H×W` frame with values in `[0, 1]`.
pub fn render(state: &EnvState, scene: &SceneSpec, res: Resolution) -> Tensor<f32> {
    render_layers(state, scene, res, Layers::ALL)
}

pub fn render_layers(
    state: &EnvState,
    scene: &SceneSpec,
    res: Resolution,
    layers: Layers,
) -> Tensor<f32> {
    let mut frame = Tensor::full([3, res.height, res.width], BACKGROUND);
    let mut canvas = Canvas {
        res,
        data: frame.data_mut(),
    };
    if layers.goal && !scene.objects.is_empty() {
        canvas.outline(res.to_pixel(scene.goal), res.goal_px(), [GOAL_SHADE; 3]);
    }
    if layers.objects {
        let mut order: Vec<usize> = (0..scene.objects.len().min(state.objects.len())).collect();
        if let Some(h) = state.held {
            order.retain(|&i| i != h);
            order.push(h);
        }
        for i in order {
            let obj = &scene.objects[i];
            let center = res.to_pixel(state.objects[i]);
            let rgb = obj.color.rgb();
            match obj.shape {
                ObjectShape::Square => canvas.square(center, res.object_px(), rgb),
                ObjectShape::Disc => canvas.disc(center, res.object_px(), rgb),
            }
        }
    }
    if layers.effector {
        canvas.crosshair(res.to_pixel(state.effector), state.grip > GRIP_THRESHOLD);
    }
    frame
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::scene::{sample_scene, Color, SceneObject, Task};

    fn two_object_scene(shape: ObjectShape) -> SceneSpec {
        SceneSpec {
            seed: 0,
            objects: vec![
                SceneObject {
                    shape,
                    color: Color::Red,
                    position: [-0.5, 0.0],
                },
                SceneObject {
                    shape: ObjectShape::Square,
                    color: Color::Blue,
                    position: [0.5, 0.5],
                },
            ],
            task: Task::PickPlace,
            target_index: 0,
            goal: [0.5, -0.5],
            effector_start: [-0.8, -0.8],
            instruction: "pick the red square".into(),
        }
    }

    #[test]
    fn deterministic() {
        let s = sample_scene(11, Task::Push).unwrap();
        let st = EnvState::initial(&s);
        let a = render(&st, &s, Resolution::default());
        let b = render(&st, &s, Resolution::default());
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    /// Pixel-diff oracle: isolate the object's blob by rendering with and
    /// without it, then compare blob positions.
    fn blob(state: &EnvState, scene: &SceneSpec) -> Vec<(usize, usize)> {
        let res = Resolution::default();
        let only = Layers {
            goal: false,
            objects: true,
            effector: false,
        };
        let f = render_layers(state, scene, res, only);
        let plane = res.height * res.width;
        let red = Color::Red.rgb();
        (0..plane)
            .filter(|&i| f.data()[i] == red[0] && f.data()[plane + i] == red[1])
            .map(|i| (i / res.width, i % res.width))
            .collect()
    }

    #[test]
    fn translation_moves_blob_by_whole_pixels() {
        for shape in ObjectShape::ALL {
            let s = two_object_scene(shape);
            let st = EnvState::initial(&s);
            let mut moved = st.clone();
            moved.objects[0][0] += 0.5;
            let (a, b) = (blob(&st, &s), blob(&moved, &s));
            let shift = (0.5f32 * 32.0 / 2.0).round() as usize;
            assert_eq!(a.len(), b.len());
            assert!(!a.is_empty());
            for ((ra, ca), (rb, cb)) in a.iter().zip(&b) {
                assert_eq!(ra, rb);
                assert_eq!(ca + shift, *cb);
            }
        }
    }

    #[test]
    fn object_extent_is_six_pixels() {
        let s = two_object_scene(ObjectShape::Square);
        let b = blob(&EnvState::initial(&s), &s);
        assert_eq!(b.len(), 36);
    }

    #[test]
    fn empty_scene_background_is_uniform() {
        let mut s = two_object_scene(ObjectShape::Disc);
        s.objects.clear();
        let mut st = EnvState::initial(&s);
        st.objects.clear();
        let f = render_layers(&st, &s, Resolution::default(), Layers::BACKGROUND_ONLY);
        assert!(f.data().iter().all(|&v| v == BACKGROUND));
        let g = render(&st, &s, Resolution::default());
        // no objects means no goal marker either; only the crosshair differs
        let lit = g.data().iter().filter(|&&v| v != BACKGROUND).count();
        assert_eq!(lit, 3 * 9);
    }

    #[test]
    fn closed_grip_is_filled() {
        let s = two_object_scene(ObjectShape::Disc);
        let mut st = EnvState::initial(&s);
        let open = render(&st, &s, Resolution::default());
        st.grip = 1.0;
        let closed = render(&st, &s, Resolution::default());
        let white = |f: &Tensor<f32>| f.data().iter().filter(|&&v| v == 1.0).count();
        assert!(white(&closed) > white(&open));
    }
}
