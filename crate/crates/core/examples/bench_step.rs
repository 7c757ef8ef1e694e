//! Times one forward/backward pass of the default model on a 64x64 image.

use std::time::Instant;

use dpafnet::model::{Model, ModelConfig};
use dpafnet::nn::gradcheck::random_tensor;
use dpafnet::Tensor;

fn main() {
    let cfg = ModelConfig::default();
    let mut m = Model::<f32>::build(&cfg, 1).unwrap();
    println!("params {}", m.num_params());
    let x: Tensor<f32> = random_tensor::<f32>(&[1, 3, 64, 64], 2).map(|v| 0.5 + 0.5 * v);
    for _ in 0..3 {
        let t = Instant::now();
        let (y, cache) = m.forward_train(&x).unwrap();
        let tf = t.elapsed();
        m.backward(&cache, &y).unwrap();
        println!("fwd {:?} total {:?}", tf, t.elapsed());
    }
}
