//! Times one forward/backward pass of the default model at batch 32.

use std::time::Instant;

use covar_core::autograd::Graph;
use covar_core::flowcore::{velocity_target, LossMask, LossWeights};
use covar_core::model::{Conditioning, CovarModel, ForwardOptions, ModelConfig};
use covar_core::toyworld::{sample_scene, Resolution, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let model = CovarModel::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = model.init_params::<f32, _>(&mut rng);
    let cond: Vec<Conditioning<f32>> = (0..batch as u64)
        .map(|s| Conditioning::from_scene(&sample_scene(s, Task::PickPlace).unwrap(), Resolution::default()))
        .collect();
    let x1 = model.noise_state::<f32, _>(batch, &mut rng);
    let x0 = model.noise_state::<f32, _>(batch, &mut rng);
    let target = velocity_target(&x0, &x1).unwrap();
    let mut x = x1.clone();
    x.t = vec![0.5; batch];
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::new(&params);
        let l = model
            .loss(&mut g, &x, &cond, &target, &LossMask::conditioning(8), LossWeights::default(), ForwardOptions::default())
            .unwrap();
        let t1 = Instant::now();
        let _ = g.backward(l.total).unwrap();
        println!("forward {:?} backward {:?}", t1 - t0, t1.elapsed());
    }
}
