//! Blur kernels, antialiased bicubic resampling, and unsharp masking.
//!
//!     cargo run --example filters_resample

use ipsr::filters::{
    convolve, make_blur_kernel, resample, unsharp_mask, BlurSpec, ResampleMethod,
};
use ipsr::imgcore::PlanarImage;

fn main() {
    let (h, w) = (60, 60);
    let img = PlanarImage::new(
        3,
        h,
        w,
        (0..3 * h * w)
            .map(|i| {
                let x = i % w;
                if (x / 2) % 2 == 0 { 0.2 } else { 0.8 }
            })
            .collect(),
    )
    .unwrap();

    for spec in [
        BlurSpec::Iso { sigma: 1.2, size: 13 },
        BlurSpec::Aniso {
            sigma_x: 2.0,
            sigma_y: 0.6,
            theta: 0.5,
            size: 13,
        },
        BlurSpec::Sinc {
            cutoff: std::f64::consts::PI / 2.0,
            size: 13,
        },
    ] {
        let k = make_blur_kernel(&spec).unwrap();
        let blurred = convolve(&img, &k).unwrap();
        let contrast = |im: &PlanarImage| {
            let p = im.plane(0);
            p.iter().cloned().fold(f32::MIN, f32::max)
                - p.iter().cloned().fold(f32::MAX, f32::min)
        };
        println!(
            "{spec:?}: kernel sum {:.4}, stripe contrast {:.3} -> {:.3}",
            k.sum(),
            contrast(&img),
            contrast(&blurred)
        );
    }

    // MATLAB-convention antialiased downscale, then sharpen
    let small = resample(&img, h / 3, w / 3, ResampleMethod::Bicubic).unwrap();
    let sharp = unsharp_mask(&small, 1.0, 0.5, 0.01).unwrap();
    println!(
        "downscaled to {}x{}, unsharp mask applied ({} samples)",
        small.height(),
        small.width(),
        sharp.data().len()
    );
}
