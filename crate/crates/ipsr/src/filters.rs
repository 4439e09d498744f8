//! Deterministic signal-processing primitives: blur-kernel construction,
//! 2D convolution, resampling, and unsharp masking.
//!
//! Border handling is reflect-101 everywhere (`cba|abcd|cba` style,
//! edge sample not repeated).

use std::fmt::Write as _;

use thiserror::Error;

use crate::imgcore::PlanarImage;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("kernel size must be odd and >= 1, got {0}")]
    EvenKernelSize(usize),
    #[error("blur width must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("sinc cutoff must lie in (0, pi], got {0}")]
    CutoffOutOfRange(f64),
    #[error("kernel {ksize}x{ksize} larger than {height}x{width} image")]
    KernelLargerThanImage {
        ksize: usize,
        height: usize,
        width: usize,
    },
    #[error("output dims must be >= 1")]
    ZeroOutputDims,
    #[error("bad kernel text: {0}")]
    BadKernelText(String),
}

/// Odd-sized 2D blur kernel; for blur use the weights sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self, FilterError> {
        if size % 2 == 0 || size == 0 {
            return Err(FilterError::EvenKernelSize(size));
        }
        assert_eq!(weights.len(), size * size);
        assert!(weights.iter().all(|w| w.is_finite()));
        Ok(Self { size, weights })
    }

    /// Single-tap identity kernel of the given odd size.
    pub fn delta(size: usize) -> Result<Self, FilterError> {
        let mut weights = vec![0.0; size * size];
        let c = size / 2;
        if size % 2 == 1 {
            weights[c * size + c] = 1.0;
        }
        Self::new(size, weights)
    }

    pub fn size(&self) -> usize {
        self.size
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.size + x]
    }
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Rescale so the weights sum to exactly 1.
    pub fn normalized(&self) -> Kernel2D {
        let s = self.sum();
        assert!(s.abs() > 1e-12, "cannot normalize zero-sum kernel");
        Kernel2D {
            size: self.size,
            weights: self.weights.iter().map(|w| w / s).collect(),
        }
    }

    /// Text-grid serialization: first line the size, then one row per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.size);
        for row in self.weights.chunks(self.size) {
            for (i, w) in row.iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{w:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, FilterError> {
        let bad = |msg: &str| FilterError::BadKernelText(msg.to_string());
        let mut lines = text.lines();
        let size: usize = lines
            .next()
            .ok_or_else(|| bad("empty input"))?
            .trim()
            .parse()
            .map_err(|_| bad("first line is not a size"))?;
        let mut weights = Vec::with_capacity(size * size);
        for line in lines.by_ref().take(size) {
            for tok in line.split_whitespace() {
                weights.push(tok.parse::<f64>().map_err(|_| bad("bad weight"))?);
            }
        }
        if weights.len() != size * size {
            return Err(bad("weight count does not match size"));
        }
        Self::new(size, weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlurSpec {
    /// Isotropic Gaussian with standard deviation `sigma`.
    Iso { sigma: f64, size: usize },
    /// Anisotropic Gaussian: axis sigmas and rotation in radians.
    Aniso {
        sigma_x: f64,
        sigma_y: f64,
        theta: f64,
        size: usize,
    },
    /// Separable Hamming-windowed sinc with angular cutoff in (0, pi].
    Sinc { cutoff: f64, size: usize },
}

/// Default Gaussian kernel size: `2*ceil(3*sigma)+1`, capped at 21.
pub fn default_gaussian_size(sigma: f64) -> usize {
    (2 * (3.0 * sigma).ceil() as usize + 1).clamp(3, 21)
}

pub fn make_blur_kernel(spec: &BlurSpec) -> Result<Kernel2D, FilterError> {
    let size = match *spec {
        BlurSpec::Iso { size, .. } | BlurSpec::Aniso { size, .. } | BlurSpec::Sinc { size, .. } => {
            size
        }
    };
    if size % 2 == 0 || size == 0 {
        return Err(FilterError::EvenKernelSize(size));
    }
    let c = (size / 2) as f64;
    let mut weights = vec![0.0f64; size * size];
    match *spec {
        BlurSpec::Iso { sigma, .. } => {
            if sigma <= 0.0 {
                return Err(FilterError::NonPositiveSigma(sigma));
            }
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 - c, x as f64 - c);
                    weights[y * size + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        BlurSpec::Aniso {
            sigma_x,
            sigma_y,
            theta,
            ..
        } => {
            if sigma_x <= 0.0 || sigma_y <= 0.0 {
                return Err(FilterError::NonPositiveSigma(sigma_x.min(sigma_y)));
            }
            // Sigma = R diag(sx^2, sy^2) R^T; evaluate d^T Sigma^-1 d directly.
            let (sin, cos) = theta.sin_cos();
            let (inv_sx2, inv_sy2) = (1.0 / (sigma_x * sigma_x), 1.0 / (sigma_y * sigma_y));
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 - c, x as f64 - c);
                    // rotate into the kernel's principal frame
                    let u = cos * dx + sin * dy;
                    let v = -sin * dx + cos * dy;
                    weights[y * size + x] = (-0.5 * (u * u * inv_sx2 + v * v * inv_sy2)).exp();
                }
            }
        }
        BlurSpec::Sinc { cutoff, .. } => {
            if !(cutoff > 0.0 && cutoff <= std::f64::consts::PI) {
                return Err(FilterError::CutoffOutOfRange(cutoff));
            }
            let taps: Vec<f64> = (0..size)
                .map(|i| {
                    let t = i as f64 - c;
                    let s = if t == 0.0 {
                        1.0
                    } else {
                        (cutoff * t).sin() / (cutoff * t)
                    };
                    let window = if size == 1 {
                        1.0
                    } else {
                        0.54 + 0.46 * (2.0 * std::f64::consts::PI * t / (size as f64 - 1.0)).cos()
                    };
                    s * window
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    weights[y * size + x] = taps[y] * taps[x];
                }
            }
        }
    }
    Ok(Kernel2D { size, weights }.normalized())
}

/// Reflect-101 index into `[0, n)`.
#[inline]
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Per-channel 2D correlation with reflect-101 borders; output same size.
pub fn convolve(img: &PlanarImage, k: &Kernel2D) -> Result<PlanarImage, FilterError> {
    let (h, w) = (img.height(), img.width());
    if k.size > h || k.size > w {
        return Err(FilterError::KernelLargerThanImage {
            ksize: k.size,
            height: h,
            width: w,
        });
    }
    let r = (k.size / 2) as isize;
    let mut data = Vec::with_capacity(img.channels() * h * w);
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f64;
                for ky in -r..=r {
                    let sy = reflect101(y + ky, h);
                    let krow = ((ky + r) as usize) * k.size;
                    for kx in -r..=r {
                        let sx = reflect101(x + kx, w);
                        acc += k.weights[krow + (kx + r) as usize] * plane[sy * w + sx] as f64;
                    }
                }
                data.push(acc as f32);
            }
        }
    }
    Ok(PlanarImage::new(img.channels(), h, w, data).expect("convolve output finite"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMethod {
    Nearest,
    Bilinear,
    Bicubic,
    Area,
}

#[inline]
fn cubic(x: f64) -> f64 {
    // Keys cubic, a = -0.5
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

#[inline]
fn linear(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.0 - x
    } else {
        0.0
    }
}

/// Per-output-pixel taps along one axis: source indices (reflect-101
/// resolved) and normalized weights.
fn axis_taps(
    n_in: usize,
    n_out: usize,
    kernel: fn(f64) -> f64,
    radius: f64,
    antialias: bool,
) -> Vec<(Vec<usize>, Vec<f64>)> {
    let ratio = n_in as f64 / n_out as f64;
    // When downscaling, widen the kernel by the scale ratio.
    let kscale = if antialias && ratio > 1.0 {
        1.0 / ratio
    } else {
        1.0
    };
    let support = radius / kscale;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (src - support).ceil() as isize;
            let hi = (src + support).floor() as isize;
            let mut idx = Vec::with_capacity((hi - lo + 1) as usize);
            let mut wts = Vec::with_capacity((hi - lo + 1) as usize);
            let mut sum = 0.0;
            for i in lo..=hi {
                let w = kernel((src - i as f64) * kscale) * kscale;
                if w != 0.0 {
                    idx.push(reflect101(i, n_in));
                    wts.push(w);
                    sum += w;
                }
            }
            if idx.is_empty() {
                idx.push(reflect101(src.round() as isize, n_in));
                wts.push(1.0);
                sum = 1.0;
            }
            for w in &mut wts {
                *w /= sum;
            }
            (idx, wts)
        })
        .collect()
}

/// Box-average taps with exact fractional coverage of the source footprint.
fn area_taps(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let left = o as f64 * ratio;
            let right = (o as f64 + 1.0) * ratio;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            let mut sum = 0.0;
            let mut i = left.floor() as isize;
            while (i as f64) < right - 1e-12 {
                let cover = (right.min(i as f64 + 1.0) - left.max(i as f64)).max(0.0);
                if cover > 0.0 {
                    idx.push((i.max(0) as usize).min(n_in - 1));
                    wts.push(cover);
                    sum += cover;
                }
                i += 1;
            }
            for w in &mut wts {
                *w /= sum;
            }
            (idx, wts)
        })
        .collect()
}

/// Resize with half-pixel-center coordinate mapping. Bicubic and bilinear
/// widen their support by the scale ratio when downscaling (antialiasing,
/// the convention the bicubic PSNR baselines assume).
pub fn resample(
    img: &PlanarImage,
    out_h: usize,
    out_w: usize,
    method: ResampleMethod,
) -> Result<PlanarImage, FilterError> {
    if out_h == 0 || out_w == 0 {
        return Err(FilterError::ZeroOutputDims);
    }
    let (h, w) = (img.height(), img.width());

    if method == ResampleMethod::Nearest {
        let mut data = Vec::with_capacity(img.channels() * out_h * out_w);
        for c in 0..img.channels() {
            let plane = img.plane(c);
            for y in 0..out_h {
                let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize).min(h - 1);
                for x in 0..out_w {
                    let sx =
                        (((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize).min(w - 1);
                    data.push(plane[sy * w + sx]);
                }
            }
        }
        return PlanarImage::new(img.channels(), out_h, out_w, data)
            .map_err(|_| FilterError::ZeroOutputDims);
    }

    let (ytaps, xtaps) = match method {
        ResampleMethod::Bilinear => (
            axis_taps(h, out_h, linear, 1.0, true),
            axis_taps(w, out_w, linear, 1.0, true),
        ),
        ResampleMethod::Bicubic => (
            axis_taps(h, out_h, cubic, 2.0, true),
            axis_taps(w, out_w, cubic, 2.0, true),
        ),
        ResampleMethod::Area => (area_taps(h, out_h), area_taps(w, out_w)),
        ResampleMethod::Nearest => unreachable!(),
    };

    // separable: rows first, then columns
    let mut data = Vec::with_capacity(img.channels() * out_h * out_w);
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let mut tmp = vec![0.0f64; h * out_w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, (idx, wts)) in xtaps.iter().enumerate() {
                let mut acc = 0.0;
                for (&i, &wt) in idx.iter().zip(wts) {
                    acc += row[i] as f64 * wt;
                }
                tmp[y * out_w + x] = acc;
            }
        }
        for (idx, wts) in &ytaps {
            let base: Vec<usize> = idx.iter().map(|&i| i * out_w).collect();
            for x in 0..out_w {
                let mut acc = 0.0;
                for (&b, &wt) in base.iter().zip(wts) {
                    acc += tmp[b + x] * wt;
                }
                data.push(acc as f32);
            }
        }
    }
    PlanarImage::new(img.channels(), out_h, out_w, data).map_err(|_| FilterError::ZeroOutputDims)
}

/// `out = img + amount * mask` where `mask = img - gaussian_blur(img, sigma)`,
/// applied only where `|mask| > threshold`; clamped to `[0, 1]`.
pub fn unsharp_mask(
    img: &PlanarImage,
    sigma: f64,
    amount: f64,
    threshold: f64,
) -> Result<PlanarImage, FilterError> {
    if sigma <= 0.0 {
        return Err(FilterError::NonPositiveSigma(sigma));
    }
    let size = default_gaussian_size(sigma).min(img.height().min(img.width()) / 2 * 2 + 1);
    let k = make_blur_kernel(&BlurSpec::Iso { sigma, size })?;
    let blurred = convolve(img, &k)?;
    let data = img
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(&v, &b)| {
            let mask = (v - b) as f64;
            if mask.abs() > threshold {
                ((v as f64 + amount * mask) as f32).clamp(0.0, 1.0)
            } else {
                v
            }
        })
        .collect();
    Ok(PlanarImage::new(img.channels(), img.height(), img.width(), data).unwrap())
}
