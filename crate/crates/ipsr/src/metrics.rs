//! PSNR and SSIM under the evaluation protocol used by the SR literature:
//! optional Y-channel conversion, border shaving, peak 1.0.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::filters::FilterError;
use crate::imgcore::{load_image, rgb_to_y, shave_border, ImageError, PlanarImage};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("image {height}x{width} smaller than the {window}x{window} SSIM window")]
    TooSmallForWindow {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("image error: {0}")]
    Image(#[from] ImageError),
    #[error("filter error: {0}")]
    Filter(#[from] FilterError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    Rgb,
    Y,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalProtocol {
    pub mode: ChannelMode,
    pub shave: usize,
    pub peak: f64,
}

impl EvalProtocol {
    /// Y-channel protocol; conventional shave equals the SR scale.
    pub fn y(shave: usize) -> Self {
        Self {
            mode: ChannelMode::Y,
            shave,
            peak: 1.0,
        }
    }

    pub fn rgb(shave: usize) -> Self {
        Self {
            mode: ChannelMode::Rgb,
            shave,
            peak: 1.0,
        }
    }

    fn prepare(&self, img: &PlanarImage) -> Result<PlanarImage, MetricError> {
        let img = match self.mode {
            ChannelMode::Y if img.channels() == 3 => rgb_to_y(img)?,
            _ => img.clone(),
        };
        if self.shave > 0 {
            Ok(shave_border(&img, self.shave)?)
        } else {
            Ok(img)
        }
    }
}

fn check_dims(a: &PlanarImage, b: &PlanarImage) -> Result<(), MetricError> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(MetricError::DimMismatch(
            a.height(),
            a.width(),
            b.height(),
            b.width(),
        ));
    }
    Ok(())
}

/// `10*log10(peak^2 / MSE)`; equal images report `+inf`.
pub fn psnr(a: &PlanarImage, b: &PlanarImage, proto: &EvalProtocol) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (a, b) = (proto.prepare(a)?, proto.prepare(b)?);
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (proto.peak * proto.peak / mse).log10())
    }
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

pub(crate) fn ssim_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filtering of one plane; output is
/// `(h - window + 1) x (w - window + 1)`.
pub(crate) fn filter_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = ssim_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * plane[y * w + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let mu_a = filter_valid(a, h, w);
    let mu_b = filter_valid(b, h, w);
    let aa: Vec<f64> = a.iter().map(|&v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let m_aa = filter_valid(&aa, h, w);
    let m_bb = filter_valid(&bb, h, w);
    let m_ab = filter_valid(&ab, h, w);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    sum / mu_a.len() as f64
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), valid-mode
/// filtering, `C1=(0.01 peak)^2`, `C2=(0.03 peak)^2`.
pub fn ssim(a: &PlanarImage, b: &PlanarImage, proto: &EvalProtocol) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (a, b) = (proto.prepare(a)?, proto.prepare(b)?);
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(MetricError::TooSmallForWindow {
            height: a.height(),
            width: a.width(),
            window: SSIM_WINDOW,
        });
    }
    let (h, w) = (a.height(), a.width());
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        total += ssim_plane(&pa, &pb, h, w, proto.peak);
    }
    Ok(total / a.channels() as f64)
}

#[derive(Debug, Clone)]
pub struct PairScore {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Default)]
pub struct EvalReport {
    pub scores: Vec<PairScore>,
    pub unmatched: Vec<PathBuf>,
    pub failures: Vec<(String, String)>,
}

impl EvalReport {
    /// Mean PSNR; infinity if any pair is identical.
    pub fn mean_psnr(&self) -> f64 {
        if self.scores.is_empty() {
            return f64::NAN;
        }
        self.scores.iter().map(|s| s.psnr_db).sum::<f64>() / self.scores.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        if self.scores.is_empty() {
            return f64::NAN;
        }
        self.scores.iter().map(|s| s.ssim).sum::<f64>() / self.scores.len() as f64
    }

    /// `name,psnr_db,ssim` rows plus a mean row; infinity renders as `inf`.
    pub fn to_csv(&self) -> String {
        fn num(v: f64) -> String {
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v:.4}")
            }
        }
        let mut s = String::from("name,psnr_db,ssim\n");
        for sc in &self.scores {
            let _ = writeln!(s, "{},{},{}", sc.name, num(sc.psnr_db), num(sc.ssim));
        }
        let _ = writeln!(s, "mean,{},{}", num(self.mean_psnr()), num(self.mean_ssim()));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>9} {:>7}\n", "name", "psnr_db", "ssim");
        for sc in &self.scores {
            let _ = writeln!(s, "{:<24} {:>9.3} {:>7.4}", sc.name, sc.psnr_db, sc.ssim);
        }
        let _ = writeln!(
            s,
            "{:<24} {:>9.3} {:>7.4}",
            "mean",
            self.mean_psnr(),
            self.mean_ssim()
        );
        for p in &self.unmatched {
            let _ = writeln!(s, "unmatched: {}", p.display());
        }
        for (name, err) in &self.failures {
            let _ = writeln!(s, "failed: {name}: {err}");
        }
        s
    }
}

/// Scores every filename present in both directories; unmatched files are
/// listed and the run continues.
pub fn evaluate_pairs(
    sr_dir: impl AsRef<Path>,
    hr_dir: impl AsRef<Path>,
    proto: &EvalProtocol,
) -> Result<EvalReport, MetricError> {
    let (sr_dir, hr_dir) = (sr_dir.as_ref(), hr_dir.as_ref());
    let list = |dir: &Path| -> Result<Vec<PathBuf>, MetricError> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "ppm" | "pgm")
                )
            })
            .collect();
        v.sort();
        Ok(v)
    };
    let sr_files = list(sr_dir)?;
    let mut report = EvalReport::default();
    let mut matched_hr = std::collections::HashSet::new();
    for sr_path in &sr_files {
        let fname = sr_path.file_name().unwrap();
        let hr_path = hr_dir.join(fname);
        if !hr_path.exists() {
            report.unmatched.push(sr_path.clone());
            continue;
        }
        matched_hr.insert(hr_path.clone());
        let name = sr_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("?")
            .to_string();
        let result = (|| -> Result<PairScore, MetricError> {
            let sr = load_image(sr_path)?;
            let hr = load_image(&hr_path)?;
            Ok(PairScore {
                psnr_db: psnr(&sr, &hr, proto)?,
                ssim: ssim(&sr, &hr, proto)?,
                name: name.clone(),
            })
        })();
        match result {
            Ok(score) => report.scores.push(score),
            Err(e) => report.failures.push((name, e.to_string())),
        }
    }
    for hr_path in list(hr_dir)? {
        if !matched_hr.contains(&hr_path) {
            report.unmatched.push(hr_path);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{add_noise, NoiseSpec};
    use crate::imgcore::save_image;
    use rand::SeedableRng;

    fn textured(h: usize, w: usize) -> PlanarImage {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                (0.5 + 0.4 * ((x as f32 * 0.7).sin() * (y as f32 * 0.5).cos())).clamp(0.0, 1.0)
            })
            .collect();
        PlanarImage::new(1, h, w, data).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let img = textured(16, 16);
        let p = psnr(&img, &img, &EvalProtocol::rgb(0)).unwrap();
        assert!(p.is_infinite());
    }

    #[test]
    fn psnr_uniform_difference() {
        // every pixel differs by 0.1 -> MSE 0.01 -> 20.0 dB
        let a = PlanarImage::constant(1, 8, 8, 0.5);
        let b = PlanarImage::constant(1, 8, 8, 0.6);
        let p = psnr(&a, &b, &EvalProtocol::rgb(0)).unwrap();
        // f32 pixel storage cannot represent 0.1 exactly; the MSE is
        // 0.01 to within one ulp of the stored difference
        assert!((p - 20.0).abs() < 1e-5, "p={p}");
    }

    #[test]
    fn psnr_symmetric() {
        let a = textured(16, 16);
        let b = a.map(|v| (v + 0.03).clamp(0.0, 1.0));
        let proto = EvalProtocol::rgb(2);
        assert_eq!(
            psnr(&a, &b, &proto).unwrap(),
            psnr(&b, &a, &proto).unwrap()
        );
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let img = textured(32, 32);
        let mut prev = f64::INFINITY;
        for (i, sigma) in [0.01, 0.02, 0.05].iter().enumerate() {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(i as u64);
            let noisy = add_noise(
                &img,
                &NoiseSpec::Gaussian {
                    sigma: *sigma,
                    gray: false,
                },
                &mut rng,
            )
            .unwrap();
            let p = psnr(&img, &noisy, &EvalProtocol::rgb(0)).unwrap();
            assert!(p < prev, "sigma={sigma}: {p} !< {prev}");
            prev = p;
        }
    }

    #[test]
    fn psnr_dim_mismatch() {
        let a = textured(8, 8);
        let b = textured(8, 9);
        assert!(matches!(
            psnr(&a, &b, &EvalProtocol::rgb(0)),
            Err(MetricError::DimMismatch(..))
        ));
    }

    #[test]
    fn ssim_self_is_one() {
        let img = textured(20, 24);
        let s = ssim(&img, &img, &EvalProtocol::rgb(0)).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "s={s}");
    }

    #[test]
    fn ssim_negative_for_anticorrelated() {
        let img = textured(32, 32);
        let neg = img.map(|v| 1.0 - v);
        let s = ssim(&img, &neg, &EvalProtocol::rgb(0)).unwrap();
        assert!(s < 0.0, "s={s}");
    }

    #[test]
    fn ssim_matches_direct_formula_oracle() {
        // independent implementation: per-window direct evaluation with
        // explicitly materialized Gaussian weights
        let a = textured(16, 16);
        let b = a.map(|v| (v * 0.9 + 0.05).clamp(0.0, 1.0));
        let got = ssim(&a, &b, &EvalProtocol::rgb(0)).unwrap();

        let sigma = 1.5f64;
        let mut w2 = [[0.0f64; 11]; 11];
        let mut sum = 0.0;
        for (i, row) in w2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                sum += *v;
            }
        }
        for row in &mut w2 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
        let mut acc = 0.0;
        let mut count = 0;
        for oy in 0..6 {
            for ox in 0..6 {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let av = a.get(0, oy + i, ox + j) as f64;
                        let bv = b.get(0, oy + i, ox + j) as f64;
                        ma += w2[i][j] * av;
                        mb += w2[i][j] * bv;
                        maa += w2[i][j] * av * av;
                        mbb += w2[i][j] * bv * bv;
                        mab += w2[i][j] * av * bv;
                    }
                }
                let (va, vb, cov) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let expect = acc / count as f64;
        assert!((got - expect).abs() < 1e-6, "got={got} expect={expect}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = textured(10, 10);
        assert!(matches!(
            ssim(&a, &a, &EvalProtocol::rgb(0)),
            Err(MetricError::TooSmallForWindow { .. })
        ));
    }

    #[test]
    fn evaluate_identical_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir_all(&d1).unwrap();
        std::fs::create_dir_all(&d2).unwrap();
        for name in ["x.png", "y.png"] {
            let img = textured(16, 16);
            save_image(&img, d1.join(name)).unwrap();
            save_image(&img, d2.join(name)).unwrap();
        }
        let report = evaluate_pairs(&d1, &d2, &EvalProtocol::rgb(0)).unwrap();
        assert_eq!(report.scores.len(), 2);
        assert!(report.mean_psnr().is_infinite());
        assert!((report.mean_ssim() - 1.0).abs() < 1e-12);
        assert!(report.to_csv().contains("mean,inf,1.0000"));
    }

    #[test]
    fn evaluate_flags_unmatched_and_cross_checks_mean() {
        let dir = tempfile::tempdir().unwrap();
        let (d1, d2) = (dir.path().join("sr"), dir.path().join("hr"));
        std::fs::create_dir_all(&d1).unwrap();
        std::fs::create_dir_all(&d2).unwrap();
        let img = textured(16, 16);
        for (i, name) in ["p.png", "q.png", "r.png"].iter().enumerate() {
            let shifted = img.map(|v| (v + 0.02 * (i as f32 + 1.0)).clamp(0.0, 1.0));
            save_image(&shifted, d1.join(name)).unwrap();
            save_image(&img, d2.join(name)).unwrap();
        }
        save_image(&img, d1.join("only_sr.png")).unwrap();
        let proto = EvalProtocol::rgb(0);
        let report = evaluate_pairs(&d1, &d2, &proto).unwrap();
        assert_eq!(report.scores.len(), 3);
        assert_eq!(report.unmatched.len(), 1);
        // hand-average the per-image values
        let hand: f64 =
            report.scores.iter().map(|s| s.psnr_db).sum::<f64>() / report.scores.len() as f64;
        assert!((report.mean_psnr() - hand).abs() < 1e-12);
    }
}
