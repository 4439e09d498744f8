//! Recover a known Gaussian blur kernel from an (HR, LR) pair where
//! LR = downsample(HR * k).
//!
//!     cargo run --release --example estimate_kernel

use ipsr::filters::{convolve, make_blur_kernel, resample, BlurSpec, ResampleMethod};
use ipsr::imgcore::PlanarImage;
use ipsr::kernest::{estimate_kernel, EstimationProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    // a broadband source: sinusoids alone are spectrally too sparse for
    // the downsampling operator to be observable
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (192, 192);
    let hr = PlanarImage::new(
        1,
        h,
        w,
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let base = 0.5
                    + 0.2 * (0.35 * x as f32).sin()
                    + 0.15 * (0.23 * y as f32 + 0.4 * x as f32).cos();
                (base + rng.gen_range(-0.25..0.25)).clamp(0.0, 1.0)
            })
            .collect(),
    )
    .unwrap();

    let truth = make_blur_kernel(&BlurSpec::Iso {
        sigma: 1.2,
        size: 13,
    })
    .unwrap();
    let blurred = convolve(&hr, &truth).unwrap();
    let lr = resample(&blurred, h / 3, w / 3, ResampleMethod::Bicubic).unwrap();

    let problem = EstimationProblem::new(hr, 3, 13).with_lr(lr);
    let result = estimate_kernel(&problem).unwrap();

    let l1: f64 = result
        .kernel
        .weights()
        .iter()
        .zip(truth.weights())
        .map(|(a, b)| (a - b).abs())
        .sum();
    println!("recovered kernel (sum {:.4}):", result.kernel.sum());
    println!("{}", result.kernel.to_text());
    println!("L1 distance to the true sigma=1.2 Gaussian: {l1:.4}");
}
