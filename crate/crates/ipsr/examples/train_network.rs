//! Train a small super-resolution network on synthetic LR/HR pairs and
//! print the per-epoch loss curve.
//!
//!     cargo run --release --example train_network

use ipsr::filters::{resample, ResampleMethod};
use ipsr::imgcore::PlanarImage;
use ipsr::srnet::{build_network, train, Tensor, TrainConfig, Weights};

/// Smooth synthetic HR images and their antialiased bicubic downscales.
fn toy_pairs(count: usize, size: usize, scale: usize) -> Vec<(Tensor, Tensor)> {
    (0..count)
        .map(|i| {
            let phase = i as f32 * 0.7;
            let hr = PlanarImage::new(
                3,
                size,
                size,
                (0..3 * size * size)
                    .map(|j| {
                        let (c, y, x) = (j / (size * size), (j / size) % size, j % size);
                        0.5 + 0.35
                            * (0.11 * x as f32 + phase + c as f32).sin()
                            * (0.09 * y as f32 + phase).cos()
                    })
                    .collect(),
            )
            .unwrap();
            let lr = resample(&hr, size / scale, size / scale, ResampleMethod::Bicubic).unwrap();
            (Tensor::from_image(&lr), Tensor::from_image(&hr))
        })
        .collect()
}

fn main() {
    let pairs = toy_pairs(16, 48, 3);
    let spec = build_network(16, 2, 3, true).unwrap();
    let mut initial = Weights::init(spec, 0);
    for layer in initial.layers_mut() {
        for v in &mut layer.weights {
            *v *= 0.3;
        }
    }

    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let (_, log) = train(&initial, &pairs, &cfg, None).unwrap();
    println!("epoch  loss      l1        psnr_db");
    for (i, ep) in log.epochs.iter().enumerate() {
        println!(
            "{:>5}  {:.5}  {:.5}  {:.2}",
            i + 1,
            ep.loss,
            ep.l1,
            ep.psnr_db
        );
    }
    let (first, last) = (log.epochs[0].l1, log.epochs.last().unwrap().l1);
    println!("L1 reduced to {:.0}% of the first epoch", 100.0 * last / first);
}
