//! Score image pairs with PSNR and SSIM under the Y-channel protocol and
//! print a CSV report.
//!
//!     cargo run --example evaluate

use ipsr::degrade::{add_noise, NoiseSpec};
use ipsr::imgcore::PlanarImage;
use ipsr::metrics::{psnr, ssim, EvalProtocol};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let (h, w) = (64, 64);
    let reference = PlanarImage::new(
        3,
        h,
        w,
        (0..3 * h * w)
            .map(|i| {
                let (y, x) = ((i / w) % h, i % w);
                0.5 + 0.3 * (0.2 * x as f32).sin() * (0.15 * y as f32).cos()
            })
            .collect(),
    )
    .unwrap();

    let proto = EvalProtocol::y(3);
    println!("sigma  psnr_db  ssim");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.01, 0.02, 0.05] {
        let noisy = add_noise(
            &reference,
            &NoiseSpec::Gaussian { sigma, gray: false },
            &mut rng,
        )
        .unwrap();
        let p = psnr(&reference, &noisy, &proto).unwrap();
        let s = ssim(&reference, &noisy, &proto).unwrap();
        println!("{sigma:.2}   {p:.2}    {s:.4}");
    }
    // a perfect pair scores SSIM exactly 1 and infinite PSNR
    let s = ssim(&reference, &reference, &proto).unwrap();
    let p = psnr(&reference, &reference, &proto).unwrap();
    println!("self   {p}      {s}");
}
