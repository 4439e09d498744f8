//! The practical degradation pipeline: noise synthesis and injection,
//! JPEG simulation, stage shuffling, and LR/HR dataset-pair generation.
//!
//! Every random choice flows from a caller-supplied seeded generator and
//! is recorded in a [`PipelineTrace`]; replaying a trace reproduces the
//! LR output bit for bit.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::{
    convolve, default_gaussian_size, make_blur_kernel, resample, unsharp_mask, BlurSpec,
    ResampleMethod,
};
use crate::imgcore::{load_image, save_image, PlanarImage};

#[derive(Debug, Error)]
pub enum DegradeError {
    #[error("invalid noise spec: {0}")]
    InvalidNoiseSpec(String),
    #[error("no patch qualified under variance cap {cap}; raise the cap")]
    NoQualifyingPatch { cap: f64 },
    #[error("noise patch bank is empty")]
    EmptyBank,
    #[error("patch size {patch} exceeds image dims {height}x{width}")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("JPEG quality {0} out of [0, 100]")]
    QualityOutOfRange(i64),
    #[error("JPEG simulation needs a 3-channel image")]
    NotRgb,
    #[error("image dims {height}x{width} not divisible by scale {scale}")]
    IndivisibleDims {
        height: usize,
        width: usize,
        scale: usize,
    },
    #[error("input directory {0} contains no loadable images")]
    EmptyInputDir(PathBuf),
    #[error("bad trace: {0}")]
    BadTrace(String),
    #[error("bad patch bank file: {0}")]
    BadBankFile(String),
    #[error("filter error: {0}")]
    Filter(#[from] crate::filters::FilterError),
    #[error("image error: {0}")]
    Image(#[from] crate::imgcore::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Noise

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Gaussian { sigma: f64, gray: bool },
    Poisson { lambda: f64 },
}

/// Additive noise; output intentionally not clamped (clamping happens at save).
pub fn add_noise(
    img: &PlanarImage,
    spec: &NoiseSpec,
    rng: &mut impl Rng,
) -> Result<PlanarImage, DegradeError> {
    match *spec {
        NoiseSpec::Gaussian { sigma, gray } => {
            if sigma < 0.0 {
                return Err(DegradeError::InvalidNoiseSpec(format!("sigma={sigma}")));
            }
            let n = img.height() * img.width();
            let mut data = img.data().to_vec();
            if gray && img.channels() == 3 {
                for i in 0..n {
                    let z: f64 = StandardNormal.sample(rng);
                    let noise = (sigma * z) as f32;
                    for c in 0..3 {
                        data[c * n + i] += noise;
                    }
                }
            } else {
                for v in &mut data {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += (sigma * z) as f32;
                }
            }
            Ok(PlanarImage::new(img.channels(), img.height(), img.width(), data).unwrap())
        }
        NoiseSpec::Poisson { lambda } => {
            if lambda <= 0.0 {
                return Err(DegradeError::InvalidNoiseSpec(format!("lambda={lambda}")));
            }
            let data = img
                .data()
                .iter()
                .map(|&v| {
                    let rate = (v as f64 * lambda).max(0.0);
                    if rate == 0.0 {
                        0.0
                    } else {
                        let p = Poisson::new(rate).unwrap();
                        (p.sample(rng) / lambda) as f32
                    }
                })
                .collect();
            Ok(PlanarImage::new(img.channels(), img.height(), img.width(), data).unwrap())
        }
    }
}

/// Zero-mean flat-region residual patches harvested from real LR images.
#[derive(Debug, Clone)]
pub struct NoisePatchBank {
    patch_size: usize,
    channels: usize,
    variance_cap: f64,
    /// channel-planar residuals, `patch_size * patch_size * channels` each
    patches: Vec<Vec<f32>>,
}

fn patch_channel_stats(data: &[f32]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n;
    (mean, var)
}

impl NoisePatchBank {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn variance_cap(&self) -> f64 {
        self.variance_cap
    }
    pub fn len(&self) -> usize {
        self.patches.len()
    }
    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
    pub fn patches(&self) -> &[Vec<f32>] {
        &self.patches
    }

    /// Every stored patch must be zero-mean with per-channel variance
    /// under the cap; checked on construction and after deserialization.
    fn check_invariants(&self) -> Result<(), DegradeError> {
        let np = self.patch_size * self.patch_size;
        for (i, p) in self.patches.iter().enumerate() {
            for c in 0..self.channels {
                let (mean, var) = patch_channel_stats(&p[c * np..(c + 1) * np]);
                if mean.abs() > 1e-6 || var >= self.variance_cap {
                    return Err(DegradeError::BadBankFile(format!(
                        "patch {i} channel {c}: mean={mean} var={var} cap={}",
                        self.variance_cap
                    )));
                }
            }
        }
        Ok(())
    }

    /// Binary serialization: magic `NPB1`, then patch_size, channels,
    /// count as little-endian u32, variance cap f32, raw f32 residuals.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DegradeError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"NPB1")?;
        w.write_all(&(self.patch_size as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        w.write_all(&(self.patches.len() as u32).to_le_bytes())?;
        w.write_all(&(self.variance_cap as f32).to_le_bytes())?;
        for p in &self.patches {
            for &v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DegradeError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| DegradeError::BadBankFile(m.to_string());
        if bytes.len() < 20 || &bytes[..4] != b"NPB1" {
            return Err(bad("missing NPB1 magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let patch_size = u32_at(4);
        let channels = u32_at(8);
        let count = u32_at(12);
        let variance_cap = f32::from_le_bytes(bytes[16..20].try_into().unwrap()) as f64;
        let per_patch = patch_size * patch_size * channels;
        if bytes.len() != 20 + 4 * per_patch * count {
            return Err(bad("payload length mismatch"));
        }
        let mut patches = Vec::with_capacity(count);
        let mut off = 20;
        for _ in 0..count {
            let p: Vec<f32> = (0..per_patch)
                .map(|i| f32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap()))
                .collect();
            off += 4 * per_patch;
            patches.push(p);
        }
        let bank = NoisePatchBank {
            patch_size,
            channels,
            variance_cap,
            patches,
        };
        bank.check_invariants()?;
        Ok(bank)
    }
}

/// Slides a `patch_size` window with the given stride over each image and
/// keeps windows whose per-channel variance stays under `variance_cap`,
/// stored minus their per-channel mean.
pub fn collect_noise_patches(
    lr_images: &[PlanarImage],
    patch_size: usize,
    stride: usize,
    variance_cap: f64,
) -> Result<NoisePatchBank, DegradeError> {
    assert!(variance_cap > 0.0 && stride > 0);
    let channels = lr_images.first().map_or(3, |i| i.channels());
    let np = patch_size * patch_size;
    let mut patches = Vec::new();
    for img in lr_images {
        if patch_size > img.height() || patch_size > img.width() {
            return Err(DegradeError::PatchTooLarge {
                patch: patch_size,
                height: img.height(),
                width: img.width(),
            });
        }
        let mut y = 0;
        while y + patch_size <= img.height() {
            let mut x = 0;
            while x + patch_size <= img.width() {
                let crop = img.crop(y, x, patch_size, patch_size);
                let qualifies = (0..channels).all(|c| {
                    let (_, var) = patch_channel_stats(&crop.data()[c * np..(c + 1) * np]);
                    var < variance_cap
                });
                if qualifies {
                    let mut residual = crop.data().to_vec();
                    for c in 0..channels {
                        let (mean, _) = patch_channel_stats(&residual[c * np..(c + 1) * np]);
                        for v in &mut residual[c * np..(c + 1) * np] {
                            *v -= mean as f32;
                        }
                    }
                    patches.push(residual);
                }
                x += stride;
            }
            y += stride;
        }
    }
    if patches.is_empty() {
        return Err(DegradeError::NoQualifyingPatch { cap: variance_cap });
    }
    let bank = NoisePatchBank {
        patch_size,
        channels,
        variance_cap,
        patches,
    };
    bank.check_invariants()?;
    Ok(bank)
}

/// Tiles randomly chosen (and randomly flipped) zero-mean patches over the
/// image and adds them; expected pixel change is zero.
pub fn inject_noise_patch(
    img: &PlanarImage,
    bank: &NoisePatchBank,
    rng: &mut impl Rng,
) -> Result<PlanarImage, DegradeError> {
    if bank.is_empty() {
        return Err(DegradeError::EmptyBank);
    }
    let ps = bank.patch_size;
    if ps > img.height() || ps > img.width() {
        return Err(DegradeError::PatchTooLarge {
            patch: ps,
            height: img.height(),
            width: img.width(),
        });
    }
    let (h, w) = (img.height(), img.width());
    let channels = img.channels().min(bank.channels);
    let n = h * w;
    let np = ps * ps;
    let mut data = img.data().to_vec();
    let mut ty = 0;
    while ty < h {
        let mut tx = 0;
        while tx < w {
            let patch = &bank.patches[rng.gen_range(0..bank.patches.len())];
            let flip_h = rng.gen::<bool>();
            let flip_v = rng.gen::<bool>();
            let bh = ps.min(h - ty);
            let bw = ps.min(w - tx);
            for c in 0..channels {
                for y in 0..bh {
                    let py = if flip_v { ps - 1 - y } else { y };
                    for x in 0..bw {
                        let px = if flip_h { ps - 1 - x } else { x };
                        data[c * n + (ty + y) * w + tx + x] += patch[c * np + py * ps + px];
                    }
                }
            }
            tx += ps;
        }
        ty += ps;
    }
    Ok(PlanarImage::new(img.channels(), h, w, data).unwrap())
}

// ---------------------------------------------------------------------------
// JPEG simulation

/// ITU-T T.81 Annex K base luminance table, row-major.
const JPEG_LUMA_BASE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K base chrominance table.
const JPEG_CHROMA_BASE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// libjpeg quality scaling: `5000/q` below 50, `200 - 2q` above.
pub fn scaled_quant_table(base: &[u16; 64], quality: u32) -> [u16; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

fn dct8_coeffs() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// DCT round trip of one plane (values on the 0..255 scale) through the
/// given quantization table. Plane is padded to 8x8 blocks by edge replicate.
fn dct_quant_plane(plane: &[f64], h: usize, w: usize, table: &[u16; 64]) -> Vec<f64> {
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let mut padded = vec![0.0f64; ph * pw];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            padded[y * pw + x] = plane[sy * w + x.min(w - 1)] - 128.0;
        }
    }
    let c = dct8_coeffs();
    let mut block = [[0.0f64; 8]; 8];
    let mut coef = [[0.0f64; 8]; 8];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y][x] = padded[(by + y) * pw + bx + x];
                }
            }
            // separable forward DCT-II
            for (u, coef_row) in coef.iter_mut().enumerate() {
                for (v, cv) in coef_row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (y, block_row) in block.iter().enumerate() {
                        for (x, &bv) in block_row.iter().enumerate() {
                            acc += c[u][y] * c[v][x] * bv;
                        }
                    }
                    *cv = acc;
                }
            }
            // quantize / dequantize
            for u in 0..8 {
                for v in 0..8 {
                    let q = table[u * 8 + v] as f64;
                    coef[u][v] = (coef[u][v] / q).round() * q;
                }
            }
            // inverse DCT
            for (y, block_row) in block.iter_mut().enumerate() {
                for (x, bv) in block_row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (u, coef_row) in coef.iter().enumerate() {
                        for (v, &cv) in coef_row.iter().enumerate() {
                            acc += c[u][y] * c[v][x] * cv;
                        }
                    }
                    *bv = acc;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    padded[(by + y) * pw + bx + x] = block[y][x];
                }
            }
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = padded[y * pw + x] + 128.0;
        }
    }
    out
}

/// JPEG artifact simulation: full-swing YCbCr, 4:2:0 box subsampling,
/// per-block DCT quantization round trip, bilinear chroma upsampling.
/// Entropy coding is skipped; it is lossless, so artifacts come entirely
/// from quantization and subsampling.
pub fn jpeg_simulate(img: &PlanarImage, quality: i64) -> Result<PlanarImage, DegradeError> {
    if !(0..=100).contains(&quality) {
        return Err(DegradeError::QualityOutOfRange(quality));
    }
    if img.channels() != 3 {
        return Err(DegradeError::NotRgb);
    }
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let (r, g, b) = (
        &img.data()[..n],
        &img.data()[n..2 * n],
        &img.data()[2 * n..],
    );
    // full-swing BT.601 YCbCr on the 0..255 scale
    let mut yp = vec![0.0f64; n];
    let mut cb = vec![0.0f64; n];
    let mut cr = vec![0.0f64; n];
    for i in 0..n {
        let (rf, gf, bf) = (r[i] as f64 * 255.0, g[i] as f64 * 255.0, b[i] as f64 * 255.0);
        yp[i] = 0.299 * rf + 0.587 * gf + 0.114 * bf;
        cb[i] = -0.168736 * rf - 0.331264 * gf + 0.5 * bf + 128.0;
        cr[i] = 0.5 * rf - 0.418688 * gf - 0.081312 * bf + 128.0;
    }
    // 4:2:0 box subsample
    let (ch, cw) = (h.div_ceil(2), w.div_ceil(2));
    let subsample = |plane: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0f64; ch * cw];
        for sy in 0..ch {
            for sx in 0..cw {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, x) = (2 * sy + dy, 2 * sx + dx);
                        if y < h && x < w {
                            acc += plane[y * w + x];
                            cnt += 1.0;
                        }
                    }
                }
                out[sy * cw + sx] = acc / cnt;
            }
        }
        out
    };
    let cb_s = subsample(&cb);
    let cr_s = subsample(&cr);

    let luma_t = scaled_quant_table(&JPEG_LUMA_BASE, quality.max(1) as u32);
    let chroma_t = scaled_quant_table(&JPEG_CHROMA_BASE, quality.max(1) as u32);
    let yq = dct_quant_plane(&yp, h, w, &luma_t);
    let cbq = dct_quant_plane(&cb_s, ch, cw, &chroma_t);
    let crq = dct_quant_plane(&cr_s, ch, cw, &chroma_t);

    // bilinear chroma upsample back to full resolution
    let upsample = |plane: Vec<f64>| -> Vec<f64> {
        let data: Vec<f32> = plane.iter().map(|&v| v as f32).collect();
        let p = PlanarImage::new(1, ch, cw, data).unwrap();
        let up = resample(&p, h, w, ResampleMethod::Bilinear).unwrap();
        up.data().iter().map(|&v| v as f64).collect()
    };
    let cbu = upsample(cbq);
    let cru = upsample(crq);

    let mut out = vec![0.0f32; 3 * n];
    for i in 0..n {
        let (yv, cbv, crv) = (yq[i], cbu[i] - 128.0, cru[i] - 128.0);
        let rf = yv + 1.402 * crv;
        let gf = yv - 0.344136 * cbv - 0.714136 * crv;
        let bf = yv + 1.772 * cbv;
        out[i] = (rf / 255.0).clamp(0.0, 1.0) as f32;
        out[n + i] = (gf / 255.0).clamp(0.0, 1.0) as f32;
        out[2 * n + i] = (bf / 255.0).clamp(0.0, 1.0) as f32;
    }
    Ok(PlanarImage::new(3, h, w, out).unwrap())
}

// ---------------------------------------------------------------------------
// Pipeline configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurStage {
    pub prob: f64,
    /// relative weights for iso / aniso / sinc kernel families
    pub iso_weight: f64,
    pub aniso_weight: f64,
    pub sinc_weight: f64,
    pub sigma_range: [f64; 2],
    pub sinc_cutoff_range: [f64; 2],
    /// odd sinc kernel sizes to sample from
    pub sinc_sizes: Vec<usize>,
}

impl Default for BlurStage {
    fn default() -> Self {
        Self {
            prob: 1.0,
            iso_weight: 0.5,
            aniso_weight: 0.3,
            sinc_weight: 0.2,
            sigma_range: [0.2, 3.0],
            sinc_cutoff_range: [std::f64::consts::PI / 3.0, std::f64::consts::PI],
            sinc_sizes: vec![7, 9, 11, 13, 15, 17, 19, 21],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseStage {
    pub prob: f64,
    pub gaussian_weight: f64,
    pub poisson_weight: f64,
    /// relative weight of patch-bank injection; needs `bank_path`
    pub patch_weight: f64,
    pub gaussian_sigma_range: [f64; 2],
    pub gray_prob: f64,
    pub poisson_lambda_range: [f64; 2],
    pub bank_path: Option<PathBuf>,
}

impl Default for NoiseStage {
    fn default() -> Self {
        Self {
            prob: 1.0,
            gaussian_weight: 0.6,
            poisson_weight: 0.4,
            patch_weight: 0.0,
            gaussian_sigma_range: [0.0, 0.06],
            gray_prob: 0.4,
            poisson_lambda_range: [50.0, 2000.0],
            bank_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ResampleStage {
    pub prob: f64,
    pub nearest_weight: f64,
    pub bilinear_weight: f64,
    pub bicubic_weight: f64,
    pub area_weight: f64,
}

impl Default for ResampleStage {
    fn default() -> Self {
        Self {
            prob: 1.0,
            nearest_weight: 0.1,
            bilinear_weight: 0.3,
            bicubic_weight: 0.4,
            area_weight: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct JpegStage {
    pub prob: f64,
    pub quality_range: [i64; 2],
}

impl Default for JpegStage {
    fn default() -> Self {
        Self {
            prob: 1.0,
            quality_range: [30, 95],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SharpenConfig {
    pub sigma: f64,
    pub amount: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub scale: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub blur: BlurStage,
    pub noise: NoiseStage,
    pub resample: ResampleStage,
    pub jpeg: JpegStage,
    pub gt_sharpen: Option<SharpenConfig>,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            scale: 3,
            seed: 0,
            shuffle: true,
            blur: BlurStage::default(),
            noise: NoiseStage::default(),
            resample: ResampleStage::default(),
            jpeg: JpegStage::default(),
            gt_sharpen: None,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<(), DegradeError> {
        let [q_lo, q_hi] = self.jpeg.quality_range;
        if !(0 <= q_lo && q_lo <= q_hi && q_hi <= 100) {
            return Err(DegradeError::QualityOutOfRange(q_lo.min(q_hi)));
        }
        for p in [
            self.blur.prob,
            self.noise.prob,
            self.resample.prob,
            self.jpeg.prob,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DegradeError::BadTrace(format!(
                    "stage probability {p} outside [0,1]"
                )));
            }
        }
        if self.scale < 2 {
            return Err(DegradeError::BadTrace(format!(
                "scale must be >= 2, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trace

/// One applied stage and the exact parameters it ran with.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStage {
    pub name: String,
    /// ordered key=value pairs; floats use shortest round-trip formatting
    pub params: Vec<(String, String)>,
}

impl TraceStage {
    fn param(&self, key: &str) -> Result<&str, DegradeError> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| DegradeError::BadTrace(format!("stage {} missing {key}", self.name)))
    }

    fn f64(&self, key: &str) -> Result<f64, DegradeError> {
        self.param(key)?
            .parse()
            .map_err(|_| DegradeError::BadTrace(format!("bad float for {key}")))
    }

    fn u64(&self, key: &str) -> Result<u64, DegradeError> {
        self.param(key)?
            .parse()
            .map_err(|_| DegradeError::BadTrace(format!("bad integer for {key}")))
    }
}

/// Exact record of a pipeline run; replaying it reproduces the LR output
/// bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTrace {
    pub seed: u64,
    pub scale: usize,
    pub stages: Vec<TraceStage>,
}

impl PipelineTrace {
    /// Text format: header `seed=<u64> scale=<n>`, then one
    /// `stage=<name> params=<k=v,...>` line per applied stage.
    pub fn to_text(&self) -> String {
        let mut s = format!("seed={} scale={}\n", self.seed, self.scale);
        for st in &self.stages {
            let params: Vec<String> = st.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(s, "stage={} params={}", st.name, params.join(","));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DegradeError> {
        let bad = |m: String| DegradeError::BadTrace(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty trace".into()))?;
        let mut seed = None;
        let mut scale = None;
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("scale", v)) => scale = v.parse().ok(),
                _ => return Err(bad(format!("bad header token {tok}"))),
            }
        }
        let (seed, scale) = (
            seed.ok_or_else(|| bad("missing seed".into()))?,
            scale.ok_or_else(|| bad("missing scale".into()))?,
        );
        let mut stages = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let rest = line
                .strip_prefix("stage=")
                .ok_or_else(|| bad(format!("bad stage line: {line}")))?;
            let (name, params_s) = rest
                .split_once(" params=")
                .ok_or_else(|| bad(format!("missing params: {line}")))?;
            let params = if params_s.is_empty() {
                Vec::new()
            } else {
                params_s
                    .split(',')
                    .map(|kv| {
                        kv.split_once('=')
                            .map(|(k, v)| (k.to_string(), v.to_string()))
                            .ok_or_else(|| bad(format!("bad param {kv}")))
                    })
                    .collect::<Result<_, _>>()?
            };
            stages.push(TraceStage {
                name: name.to_string(),
                params,
            });
        }
        Ok(PipelineTrace {
            seed,
            scale,
            stages,
        })
    }
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StageKind {
    Blur,
    Resize,
    Noise,
    Jpeg,
}

/// Uniformly random permutation of the four stage slots when `shuffle` is
/// set, the fixed blur -> downsample -> noise -> JPEG order otherwise.
pub fn sample_stage_order(rng: &mut impl Rng, shuffle: bool) -> [usize; 4] {
    let mut order = [0usize, 1, 2, 3];
    if shuffle {
        // Fisher-Yates
        for i in (1..4).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    order
}

fn weighted_pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut t = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        t -= w;
        if t < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn apply_blur(
    img: &PlanarImage,
    cfg: &BlurStage,
    rng: &mut impl Rng,
) -> Result<(PlanarImage, TraceStage), DegradeError> {
    let pick = weighted_pick(
        rng,
        &[cfg.iso_weight, cfg.aniso_weight, cfg.sinc_weight],
    );
    let (spec, params) = match pick {
        0 => {
            let sigma = rng.gen_range(cfg.sigma_range[0].max(1e-3)..=cfg.sigma_range[1]);
            let size = default_gaussian_size(sigma);
            (
                BlurSpec::Iso { sigma, size },
                vec![
                    ("kind".into(), "iso".into()),
                    ("sigma".into(), fmt_f64(sigma)),
                    ("size".into(), size.to_string()),
                ],
            )
        }
        1 => {
            let sx = rng.gen_range(cfg.sigma_range[0].max(1e-3)..=cfg.sigma_range[1]);
            let sy = rng.gen_range(cfg.sigma_range[0].max(1e-3)..=cfg.sigma_range[1]);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let size = default_gaussian_size(sx.max(sy));
            (
                BlurSpec::Aniso {
                    sigma_x: sx,
                    sigma_y: sy,
                    theta,
                    size,
                },
                vec![
                    ("kind".into(), "aniso".into()),
                    ("sigma_x".into(), fmt_f64(sx)),
                    ("sigma_y".into(), fmt_f64(sy)),
                    ("theta".into(), fmt_f64(theta)),
                    ("size".into(), size.to_string()),
                ],
            )
        }
        _ => {
            let cutoff = rng.gen_range(cfg.sinc_cutoff_range[0]..=cfg.sinc_cutoff_range[1]);
            let size = cfg.sinc_sizes[rng.gen_range(0..cfg.sinc_sizes.len())];
            (
                BlurSpec::Sinc { cutoff, size },
                vec![
                    ("kind".into(), "sinc".into()),
                    ("cutoff".into(), fmt_f64(cutoff)),
                    ("size".into(), size.to_string()),
                ],
            )
        }
    };
    let mut spec = spec;
    // shrink the kernel if the current image is small
    let max_odd = ((img.height().min(img.width())).saturating_sub(1) | 1).max(1);
    match &mut spec {
        BlurSpec::Iso { size, .. } | BlurSpec::Aniso { size, .. } | BlurSpec::Sinc { size, .. } => {
            *size = (*size).min(max_odd);
        }
    }
    let k = make_blur_kernel(&spec)?;
    let out = convolve(img, &k)?;
    Ok((
        out,
        TraceStage {
            name: "blur".into(),
            params,
        },
    ))
}

fn method_name(m: ResampleMethod) -> &'static str {
    match m {
        ResampleMethod::Nearest => "nearest",
        ResampleMethod::Bilinear => "bilinear",
        ResampleMethod::Bicubic => "bicubic",
        ResampleMethod::Area => "area",
    }
}

fn method_from_name(s: &str) -> Result<ResampleMethod, DegradeError> {
    Ok(match s {
        "nearest" => ResampleMethod::Nearest,
        "bilinear" => ResampleMethod::Bilinear,
        "bicubic" => ResampleMethod::Bicubic,
        "area" => ResampleMethod::Area,
        other => return Err(DegradeError::BadTrace(format!("unknown method {other}"))),
    })
}

fn resize_stage(method: ResampleMethod, h: usize, w: usize) -> TraceStage {
    TraceStage {
        name: "resize".into(),
        params: vec![
            ("method".into(), method_name(method).into()),
            ("h".into(), h.to_string()),
            ("w".into(), w.to_string()),
        ],
    }
}

fn apply_noise_stage(
    img: &PlanarImage,
    cfg: &NoiseStage,
    bank: Option<&NoisePatchBank>,
    rng: &mut impl Rng,
) -> Result<(PlanarImage, TraceStage), DegradeError> {
    let patch_w = if bank.is_some() { cfg.patch_weight } else { 0.0 };
    let pick = weighted_pick(rng, &[cfg.gaussian_weight, cfg.poisson_weight, patch_w]);
    // dedicated substream so the stage replays from its recorded seed alone
    let sub_seed = rng.next_u64();
    let mut sub = ChaCha8Rng::seed_from_u64(sub_seed);
    match pick {
        0 => {
            let sigma = rng.gen_range(cfg.gaussian_sigma_range[0]..=cfg.gaussian_sigma_range[1]);
            let gray = rng.gen::<f64>() < cfg.gray_prob;
            let out = add_noise(img, &NoiseSpec::Gaussian { sigma, gray }, &mut sub)?;
            Ok((
                out,
                TraceStage {
                    name: "noise".into(),
                    params: vec![
                        ("kind".into(), "gaussian".into()),
                        ("sigma".into(), fmt_f64(sigma)),
                        ("gray".into(), (gray as u8).to_string()),
                        ("rng".into(), sub_seed.to_string()),
                    ],
                },
            ))
        }
        1 => {
            let lambda = rng.gen_range(cfg.poisson_lambda_range[0]..=cfg.poisson_lambda_range[1]);
            let out = add_noise(img, &NoiseSpec::Poisson { lambda }, &mut sub)?;
            Ok((
                out,
                TraceStage {
                    name: "noise".into(),
                    params: vec![
                        ("kind".into(), "poisson".into()),
                        ("lambda".into(), fmt_f64(lambda)),
                        ("rng".into(), sub_seed.to_string()),
                    ],
                },
            ))
        }
        _ => {
            let bank = bank.ok_or(DegradeError::EmptyBank)?;
            let out = inject_noise_patch(img, bank, &mut sub)?;
            let path = cfg
                .bank_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            Ok((
                out,
                TraceStage {
                    name: "noise".into(),
                    params: vec![
                        ("kind".into(), "patch".into()),
                        ("bank".into(), path),
                        ("rng".into(), sub_seed.to_string()),
                    ],
                },
            ))
        }
    }
}

/// Applies the four degradation stages in sampled order and returns the LR
/// image plus the trace that reproduces it.
pub fn degrade_pipeline(
    hr: &PlanarImage,
    cfg: &DegradationConfig,
    rng: &mut impl Rng,
) -> Result<(PlanarImage, PipelineTrace), DegradeError> {
    degrade_pipeline_with_bank(hr, cfg, None, rng)
}

pub fn degrade_pipeline_with_bank(
    hr: &PlanarImage,
    cfg: &DegradationConfig,
    bank: Option<&NoisePatchBank>,
    rng: &mut impl Rng,
) -> Result<(PlanarImage, PipelineTrace), DegradeError> {
    cfg.validate()?;
    if hr.height() % cfg.scale != 0 || hr.width() % cfg.scale != 0 {
        return Err(DegradeError::IndivisibleDims {
            height: hr.height(),
            width: hr.width(),
            scale: cfg.scale,
        });
    }
    let (lr_h, lr_w) = (hr.height() / cfg.scale, hr.width() / cfg.scale);
    let order = sample_stage_order(rng, cfg.shuffle);
    let kinds = [
        StageKind::Blur,
        StageKind::Resize,
        StageKind::Noise,
        StageKind::Jpeg,
    ];
    let mut img = hr.clone();
    let mut stages = Vec::new();
    for &slot in &order {
        let apply_prob = match kinds[slot] {
            StageKind::Blur => cfg.blur.prob,
            StageKind::Resize => cfg.resample.prob,
            StageKind::Noise => cfg.noise.prob,
            StageKind::Jpeg => cfg.jpeg.prob,
        };
        if rng.gen::<f64>() >= apply_prob {
            continue;
        }
        match kinds[slot] {
            StageKind::Blur => {
                let (out, st) = apply_blur(&img, &cfg.blur, rng)?;
                img = out;
                stages.push(st);
            }
            StageKind::Resize => {
                let method = [
                    ResampleMethod::Nearest,
                    ResampleMethod::Bilinear,
                    ResampleMethod::Bicubic,
                    ResampleMethod::Area,
                ][weighted_pick(
                    rng,
                    &[
                        cfg.resample.nearest_weight,
                        cfg.resample.bilinear_weight,
                        cfg.resample.bicubic_weight,
                        cfg.resample.area_weight,
                    ],
                )];
                img = resample(&img, lr_h, lr_w, method)?;
                stages.push(resize_stage(method, lr_h, lr_w));
            }
            StageKind::Noise => {
                let (out, st) = apply_noise_stage(&img, &cfg.noise, bank, rng)?;
                img = out;
                stages.push(st);
            }
            StageKind::Jpeg => {
                if img.channels() == 3 {
                    let [lo, hi] = cfg.jpeg.quality_range;
                    let quality = rng.gen_range(lo..=hi);
                    img = jpeg_simulate(&img, quality)?;
                    stages.push(TraceStage {
                        name: "jpeg".into(),
                        params: vec![("quality".into(), quality.to_string())],
                    });
                }
            }
        }
    }
    // exact output size enforcement
    if img.height() != lr_h || img.width() != lr_w {
        img = resample(&img, lr_h, lr_w, ResampleMethod::Bicubic)?;
        stages.push(resize_stage(ResampleMethod::Bicubic, lr_h, lr_w));
    }
    Ok((
        img,
        PipelineTrace {
            seed: cfg.seed,
            scale: cfg.scale,
            stages,
        },
    ))
}

/// Re-applies the recorded stages; output is bit-identical to the
/// original run.
pub fn replay_trace(
    hr: &PlanarImage,
    trace: &PipelineTrace,
    bank: Option<&NoisePatchBank>,
) -> Result<PlanarImage, DegradeError> {
    let mut img = hr.clone();
    for st in &trace.stages {
        img = match st.name.as_str() {
            "blur" => {
                let size = st.u64("size")? as usize;
                let spec = match st.param("kind")? {
                    "iso" => BlurSpec::Iso {
                        sigma: st.f64("sigma")?,
                        size,
                    },
                    "aniso" => BlurSpec::Aniso {
                        sigma_x: st.f64("sigma_x")?,
                        sigma_y: st.f64("sigma_y")?,
                        theta: st.f64("theta")?,
                        size,
                    },
                    "sinc" => BlurSpec::Sinc {
                        cutoff: st.f64("cutoff")?,
                        size,
                    },
                    other => {
                        return Err(DegradeError::BadTrace(format!("unknown blur kind {other}")))
                    }
                };
                convolve(&img, &make_blur_kernel(&spec)?)?
            }
            "resize" => {
                let method = method_from_name(st.param("method")?)?;
                resample(
                    &img,
                    st.u64("h")? as usize,
                    st.u64("w")? as usize,
                    method,
                )?
            }
            "noise" => {
                let mut sub = ChaCha8Rng::seed_from_u64(st.u64("rng")?);
                match st.param("kind")? {
                    "gaussian" => add_noise(
                        &img,
                        &NoiseSpec::Gaussian {
                            sigma: st.f64("sigma")?,
                            gray: st.u64("gray")? != 0,
                        },
                        &mut sub,
                    )?,
                    "poisson" => add_noise(
                        &img,
                        &NoiseSpec::Poisson {
                            lambda: st.f64("lambda")?,
                        },
                        &mut sub,
                    )?,
                    "patch" => {
                        let bank = bank.ok_or(DegradeError::EmptyBank)?;
                        inject_noise_patch(&img, bank, &mut sub)?
                    }
                    other => {
                        return Err(DegradeError::BadTrace(format!(
                            "unknown noise kind {other}"
                        )))
                    }
                }
            }
            "jpeg" => jpeg_simulate(&img, st.u64("quality")? as i64)?,
            other => return Err(DegradeError::BadTrace(format!("unknown stage {other}"))),
        };
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// Dataset generation

#[derive(Debug, Default)]
pub struct DatasetSummary {
    pub hr_written: usize,
    pub lr_written: usize,
    pub failures: Vec<(PathBuf, String)>,
}

/// Derives an independent generator per (seed, image index, variant) so
/// parallel generation never changes outputs.
pub fn derive_rng(seed: u64, image_index: u64, variant: u64) -> ChaCha8Rng {
    // splitmix64 over the combined identifier
    let mut z = seed
        .wrapping_add(image_index.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(variant.wrapping_mul(0xD1B54A32D192ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Writes `{name}_hr.png`, `{name}_{k}_lr.png` and `{name}_{k}.trace` for
/// every HR image in `hr_dir`. Per-file failures are reported in the
/// summary; the run continues.
pub fn generate_dataset(
    hr_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    cfg: &DegradationConfig,
    count_per_image: usize,
    jobs: Option<usize>,
) -> Result<DatasetSummary, DegradeError> {
    cfg.validate()?;
    let hr_dir = hr_dir.as_ref();
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(hr_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pgm")
            )
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(DegradeError::EmptyInputDir(hr_dir.to_path_buf()));
    }
    let bank = match &cfg.noise.bank_path {
        Some(p) => Some(NoisePatchBank::load(p)?),
        None => None,
    };

    let process = |(idx, path): (usize, &PathBuf)| -> Result<(usize, usize), String> {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let hr = load_image(path).map_err(|e| e.to_string())?;
        // crop to a scale multiple so the pipeline precondition holds
        let (ch, cw) = (
            hr.height() / cfg.scale * cfg.scale,
            hr.width() / cfg.scale * cfg.scale,
        );
        if ch == 0 || cw == 0 {
            return Err(format!("image smaller than scale {}", cfg.scale));
        }
        let hr = hr.crop(0, 0, ch, cw);
        let hr_out = match cfg.gt_sharpen {
            Some(s) => {
                unsharp_mask(&hr, s.sigma, s.amount, s.threshold).map_err(|e| e.to_string())?
            }
            None => hr.clone(),
        };
        save_image(&hr_out, out_dir.join(format!("{name}_hr.png"))).map_err(|e| e.to_string())?;
        let mut lr_count = 0;
        for k in 0..count_per_image {
            let mut rng = derive_rng(cfg.seed, idx as u64, k as u64);
            let (lr, trace) = degrade_pipeline_with_bank(&hr, cfg, bank.as_ref(), &mut rng)
                .map_err(|e| e.to_string())?;
            save_image(&lr, out_dir.join(format!("{name}_{k}_lr.png")))
                .map_err(|e| e.to_string())?;
            std::fs::write(out_dir.join(format!("{name}_{k}.trace")), trace.to_text())
                .map_err(|e| e.to_string())?;
            lr_count += 1;
        }
        Ok((1, lr_count))
    };

    let indexed: Vec<(usize, &PathBuf)> = entries.iter().enumerate().collect();
    let results: Vec<(usize, Result<(usize, usize), String>)> = if jobs == Some(1) {
        indexed.iter().map(|&(i, p)| (i, process((i, p)))).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.unwrap_or(0))
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        pool.install(|| {
            indexed
                .par_iter()
                .map(|&(i, p)| (i, process((i, p))))
                .collect()
        })
    };

    let mut summary = DatasetSummary::default();
    for (i, r) in results {
        match r {
            Ok((hr, lr)) => {
                summary.hr_written += hr;
                summary.lr_written += lr;
            }
            Err(msg) => summary.failures.push((entries[i].clone(), msg)),
        }
    }
    Ok(summary)
}
