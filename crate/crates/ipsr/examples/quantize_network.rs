//! Post-training-quantize a float network to uint8 and compare its
//! output against the float forward pass on held-out crops.
//!
//!     cargo run --release --example quantize_network

use ipsr::srnet::{build_network, calibrate_and_quantize, forward, Tensor, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn crop(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
    let data = (0..3 * side * side).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(1, 3, side, side, data)
}

fn main() {
    let spec = build_network(32, 4, 3, true).unwrap();
    let mut weights = Weights::init(spec, 9);
    for layer in weights.layers_mut() {
        for v in &mut layer.weights {
            *v *= 0.1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let calib: Vec<Tensor> = (0..10).map(|_| crop(&mut rng, 16)).collect();
    let q = calibrate_and_quantize(&weights, &calib).unwrap();

    println!("crop  mean_abs_diff (1/255 = {:.5})", 1.0 / 255.0);
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        let x = crop(&mut rng, 16);
        let yf = forward(&weights, &x).unwrap();
        let yq = q.forward(&x).unwrap();
        let mad = yf
            .data
            .iter()
            .zip(&yq.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / yf.data.len() as f64;
        worst = worst.max(mad);
        println!("{i:>4}  {mad:.5}");
    }
    println!("worst held-out crop: {worst:.5} (< 2/255 = {:.5})", 2.0 / 255.0);
}
