//! Harvest low-variance noise patches from a "real" noisy image into a
//! bank, then inject one into a clean image.
//!
//!     cargo run --example noise_bank

use ipsr::degrade::{collect_noise_patches, inject_noise_patch};
use ipsr::imgcore::PlanarImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    // flat gray plus mild sensor-like noise: every window passes the
    // variance gate and carries pure noise residual
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noisy = PlanarImage::new(
        3,
        64,
        64,
        (0..3 * 64 * 64)
            .map(|_| 0.5 + rng.gen_range(-0.04..0.04))
            .collect(),
    )
    .unwrap();

    let bank = collect_noise_patches(&[noisy], 8, 8, 0.002).unwrap();
    println!(
        "collected {} patches of {}x{} px under variance cap {}",
        bank.len(),
        bank.patch_size(),
        bank.patch_size(),
        bank.variance_cap()
    );

    let clean = PlanarImage::constant(3, 32, 32, 0.5);
    let out = inject_noise_patch(&clean, &bank, &mut rng).unwrap();
    let delta: f32 = out
        .data()
        .iter()
        .zip(clean.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f32>()
        / out.data().len() as f32;
    println!("mean absolute perturbation after injection: {delta:.5}");
}
