//! Training loss: L1 + SSIM + optional feature distance, with its exact
//! gradient with respect to the network output.
//!
//! The SSIM term shares the 11x11 Gaussian window with the metrics
//! module (valid-mode filtering, so the adjoint is a plain scatter).

use super::tensor::Tensor;
use super::SrnetError;
use crate::metrics::{filter_valid, ssim_window, SSIM_WINDOW};

/// Weights of the three loss terms. Defaults follow the toolkit-wide
/// convention lambda1=1, lambda2=0.3, lambda3=0.3.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 0.3,
        }
    }
}

/// High-level representation distance, pluggable so a pretrained
/// classifier can supply the perceptual term. `extract_vjp` must apply
/// the Jacobian-transpose of `extract` at `x` to `d_feat`.
pub trait FeatureExtractor {
    fn extract(&self, x: &Tensor) -> Tensor;
    fn extract_vjp(&self, x: &Tensor, d_feat: &Tensor) -> Tensor;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub l1: f64,
    /// 1 - SSIM(sr, hr)
    pub ssim: f64,
    pub feat: f64,
}

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_pair(sr: &Tensor, hr: &Tensor, cfg: &LossConfig) -> Result<(), SrnetError> {
    if !sr.same_shape(hr) {
        return Err(SrnetError::ShapeMismatch(format!(
            "loss shapes ({},{},{},{}) vs ({},{},{},{})",
            sr.n, sr.c, sr.h, sr.w, hr.n, hr.c, hr.h, hr.w
        )));
    }
    if cfg.lambda2 != 0.0 && (sr.h < SSIM_WINDOW || sr.w < SSIM_WINDOW) {
        return Err(SrnetError::ShapeMismatch(format!(
            "{}x{} too small for the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            sr.h, sr.w
        )));
    }
    Ok(())
}

fn plane<'a>(t: &'a Tensor, n: usize, c: usize) -> &'a [f64] {
    let sz = t.h * t.w;
    &t.data[(n * t.c + c) * sz..(n * t.c + c + 1) * sz]
}

fn mean_plane_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
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
        let a1 = 2.0 * ma * mb + C1;
        let a2 = 2.0 * (m_ab[i] - ma * mb) + C2;
        let b1 = ma * ma + mb * mb + C1;
        let b2 = (m_aa[i] - ma * ma) + (m_bb[i] - mb * mb) + C2;
        sum += (a1 * a2) / (b1 * b2);
    }
    sum / mu_a.len() as f64
}

/// Total loss and its components.
pub fn compute_loss(
    sr: &Tensor,
    hr: &Tensor,
    cfg: &LossConfig,
    feat: Option<&dyn FeatureExtractor>,
) -> Result<(f64, LossComponents), SrnetError> {
    check_pair(sr, hr, cfg)?;
    let l1 = sr
        .data
        .iter()
        .zip(&hr.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / sr.len() as f64;

    let ssim_term = if cfg.lambda2 != 0.0 {
        let mut total = 0.0;
        for n in 0..sr.n {
            for c in 0..sr.c {
                total += mean_plane_ssim(plane(sr, n, c), plane(hr, n, c), sr.h, sr.w);
            }
        }
        1.0 - total / (sr.n * sr.c) as f64
    } else {
        0.0
    };

    let feat_term = match (cfg.lambda3 != 0.0, feat) {
        (true, Some(fx)) => {
            let fa = fx.extract(sr);
            let fb = fx.extract(hr);
            fa.data
                .iter()
                .zip(&fb.data)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / fa.len() as f64
        }
        _ => 0.0,
    };

    let total = cfg.lambda1 * l1 + cfg.lambda2 * ssim_term + cfg.lambda3 * feat_term;
    Ok((
        total,
        LossComponents {
            l1,
            ssim: ssim_term,
            feat: feat_term,
        },
    ))
}

/// d(mean plane SSIM)/d(a) for one plane pair; `a` is the moving side.
fn plane_ssim_grad(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mu_a = filter_valid(a, h, w);
    let mu_b = filter_valid(b, h, w);
    let aa: Vec<f64> = a.iter().map(|&v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|&v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    let m_aa = filter_valid(&aa, h, w);
    let m_bb = filter_valid(&bb, h, w);
    let m_ab = filter_valid(&ab, h, w);
    let n_win = mu_a.len();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);

    // window-level partials of S wrt the three moving statistics
    let mut f_mu = vec![0.0f64; n_win];
    let mut f_maa = vec![0.0f64; n_win];
    let mut f_mab = vec![0.0f64; n_win];
    for i in 0..n_win {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let a1 = 2.0 * ma * mb + C1;
        let a2 = 2.0 * (m_ab[i] - ma * mb) + C2;
        let b1 = ma * ma + mb * mb + C1;
        let b2 = (m_aa[i] - ma * ma) + (m_bb[i] - mb * mb) + C2;
        let nm = a1 * a2;
        let d = b1 * b2;
        f_mu[i] = (2.0 * mb * (a2 - a1) * d - 2.0 * ma * (b2 - b1) * nm) / (d * d);
        f_maa[i] = -nm * b1 / (d * d);
        f_mab[i] = 2.0 * a1 / d;
    }

    // adjoint of valid-mode filtering: scatter each window's value back
    // through the separable Gaussian
    let win = ssim_window();
    let scatter = |field: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0f64; h * w];
        for wy in 0..oh {
            for wx in 0..ow {
                let v = field[wy * ow + wx];
                if v == 0.0 {
                    continue;
                }
                for (ky, &gy) in win.iter().enumerate() {
                    let row = (wy + ky) * w + wx;
                    let gv = gy * v;
                    for (kx, &gx) in win.iter().enumerate() {
                        out[row + kx] += gv * gx;
                    }
                }
            }
        }
        out
    };
    let s_mu = scatter(&f_mu);
    let s_maa = scatter(&f_maa);
    let s_mab = scatter(&f_mab);
    (0..h * w)
        .map(|p| (s_mu[p] + 2.0 * a[p] * s_maa[p] + b[p] * s_mab[p]) / n_win as f64)
        .collect()
}

/// Exact gradient of [`compute_loss`] with respect to `sr`.
pub fn loss_backward(
    sr: &Tensor,
    hr: &Tensor,
    cfg: &LossConfig,
    feat: Option<&dyn FeatureExtractor>,
) -> Result<Tensor, SrnetError> {
    check_pair(sr, hr, cfg)?;
    let n_total = sr.len() as f64;
    let mut grad: Vec<f64> = sr
        .data
        .iter()
        .zip(&hr.data)
        .map(|(a, b)| cfg.lambda1 * (a - b).signum() / n_total)
        .collect();

    if cfg.lambda2 != 0.0 {
        let scale = -cfg.lambda2 / (sr.n * sr.c) as f64;
        let sz = sr.h * sr.w;
        for n in 0..sr.n {
            for c in 0..sr.c {
                let g = plane_ssim_grad(plane(sr, n, c), plane(hr, n, c), sr.h, sr.w);
                let off = (n * sr.c + c) * sz;
                for (p, gv) in g.iter().enumerate() {
                    grad[off + p] += scale * gv;
                }
            }
        }
    }

    if cfg.lambda3 != 0.0 {
        if let Some(fx) = feat {
            let fa = fx.extract(sr);
            let fb = fx.extract(hr);
            let m = fa.len() as f64;
            let d_feat = Tensor {
                n: fa.n,
                c: fa.c,
                h: fa.h,
                w: fa.w,
                data: fa
                    .data
                    .iter()
                    .zip(&fb.data)
                    .map(|(a, b)| cfg.lambda3 * (a - b).signum() / m)
                    .collect(),
            };
            let dx = fx.extract_vjp(sr, &d_feat);
            for (g, d) in grad.iter_mut().zip(&dx.data) {
                *g += d;
            }
        }
    }

    Ok(Tensor {
        n: sr.n,
        c: sr.c,
        h: sr.h,
        w: sr.w,
        data: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_pair(seed: u64, h: usize, w: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new(1, 2, h, w, (0..2 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
        };
        (mk(&mut rng), mk(&mut rng))
    }

    #[test]
    fn identical_pair_zero_loss() {
        let (sr, _) = rand_pair(1, 16, 16);
        let (l, comp) = compute_loss(&sr, &sr, &LossConfig::default(), None).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(comp.ssim.abs() < 1e-12);
    }

    #[test]
    fn pure_l1_case() {
        let hr = Tensor::new(1, 3, 4, 4, vec![1.0; 48]);
        let sr = Tensor::new(1, 3, 4, 4, vec![0.9; 48]);
        let cfg = LossConfig {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let (l, _) = compute_loss(&sr, &hr, &cfg, None).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
    }

    /// Independent scalar re-implementation of the full formula.
    #[test]
    fn matches_direct_formula() {
        let (sr, hr) = rand_pair(2, 14, 15);
        let cfg = LossConfig::default();
        let (l, _) = compute_loss(&sr, &hr, &cfg, None).unwrap();

        // second implementation: direct 2D-window statistics
        let win1 = ssim_window();
        let mut w2 = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
        for i in 0..SSIM_WINDOW {
            for j in 0..SSIM_WINDOW {
                w2[i * SSIM_WINDOW + j] = win1[i] * win1[j];
            }
        }
        let (h, w) = (sr.h, sr.w);
        let mut ssim_total = 0.0;
        for c in 0..sr.c {
            let (pa, pb) = (plane(&sr, 0, c), plane(&hr, 0, c));
            let mut plane_sum = 0.0;
            let mut count = 0usize;
            for wy in 0..=h - SSIM_WINDOW {
                for wx in 0..=w - SSIM_WINDOW {
                    let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let g = w2[i * SSIM_WINDOW + j];
                            let av = pa[(wy + i) * w + wx + j];
                            let bv = pb[(wy + i) * w + wx + j];
                            ma += g * av;
                            mb += g * bv;
                            maa += g * av * av;
                            mbb += g * bv * bv;
                            mab += g * av * bv;
                        }
                    }
                    let (va, vb, cov) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                    plane_sum += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                        / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                    count += 1;
                }
            }
            ssim_total += plane_sum / count as f64;
        }
        let ssim_mean = ssim_total / sr.c as f64;
        let l1: f64 = sr
            .data
            .iter()
            .zip(&hr.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / sr.len() as f64;
        let want = cfg.lambda1 * l1 + cfg.lambda2 * (1.0 - ssim_mean);
        assert!((l - want).abs() < 1e-6, "{l} vs {want}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut sr, hr) = rand_pair(3, 12, 12);
        let cfg = LossConfig {
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 0.0,
        };
        let grad = loss_backward(&sr, &hr, &cfg, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 1e-6;
        for _ in 0..60 {
            let i = rng.gen_range(0..sr.len());
            let orig = sr.data[i];
            sr.data[i] = orig + eps;
            let (lp, _) = compute_loss(&sr, &hr, &cfg, None).unwrap();
            sr.data[i] = orig - eps;
            let (lm, _) = compute_loss(&sr, &hr, &cfg, None).unwrap();
            sr.data[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let got = grad.data[i];
            let denom = num.abs().max(got.abs()).max(1e-8);
            assert!(
                (num - got).abs() / denom < 1e-4,
                "index {i}: fd {num} vs analytic {got}"
            );
        }
    }

    /// Feature term: identity extractor doubles as an integration check
    /// of the vjp plumbing.
    struct Identity;
    impl FeatureExtractor for Identity {
        fn extract(&self, x: &Tensor) -> Tensor {
            x.clone()
        }
        fn extract_vjp(&self, _x: &Tensor, d: &Tensor) -> Tensor {
            d.clone()
        }
    }

    #[test]
    fn feature_term_with_identity_extractor() {
        let hr = Tensor::new(1, 3, 4, 4, vec![1.0; 48]);
        let sr = Tensor::new(1, 3, 4, 4, vec![0.75; 48]);
        let cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 2.0,
        };
        let (l, comp) = compute_loss(&sr, &hr, &cfg, Some(&Identity)).unwrap();
        assert!((comp.feat - 0.25).abs() < 1e-12);
        assert!((l - 0.5).abs() < 1e-12);
        let g = loss_backward(&sr, &hr, &cfg, Some(&Identity)).unwrap();
        // d/dsr of 2*mean|hr-sr| = 2*sign(sr-hr)/48 = -2/48
        for v in &g.data {
            assert!((v + 2.0 / 48.0).abs() < 1e-12);
        }
    }

    #[test]
    fn without_extractor_feat_term_is_zero() {
        let (sr, hr) = rand_pair(5, 12, 12);
        let (_, comp) = compute_loss(&sr, &hr, &LossConfig::default(), None).unwrap();
        assert_eq!(comp.feat, 0.0);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let a = Tensor::zeros(1, 3, 12, 12);
        let b = Tensor::zeros(1, 3, 12, 13);
        assert!(compute_loss(&a, &b, &LossConfig::default(), None).is_err());
    }
}
