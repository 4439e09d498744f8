//! The seven permitted operators plus their reverse-mode companions.
//! Convolutions pad "same" with reflect-101 to match the rest of the
//! toolkit's border policy.

use super::tensor::Tensor;
use crate::filters::reflect101;

/// Parameters of one convolution layer. Weight layout is
/// [c_out][c_in][ky][kx], bias one value per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        ConvParams {
            c_in,
            c_out,
            k,
            weights: vec![0.0; c_out * c_in * k * k],
            bias: vec![0.0; c_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    pub fn w_at(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((co * self.c_in + ci) * self.k + ky) * self.k + kx]
    }
}

/// Same-size convolution with reflect-101 padding.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Tensor {
    assert_eq!(x.c, p.c_in, "conv2d input channels");
    let r = (p.k / 2) as isize;
    let mut out = Tensor::zeros(x.n, p.c_out, x.h, x.w);
    for n in 0..x.n {
        for co in 0..p.c_out {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = p.bias[co];
                    for ci in 0..p.c_in {
                        for ky in 0..p.k {
                            let sy = reflect101(y as isize + ky as isize - r, x.h);
                            for kx in 0..p.k {
                                let sx = reflect101(xx as isize + kx as isize - r, x.w);
                                acc += p.w_at(co, ci, ky, kx) * x.at(n, ci, sy, sx);
                            }
                        }
                    }
                    *out.at_mut(n, co, y, xx) = acc;
                }
            }
        }
    }
    out
}

/// Gradients of conv2d: returns (d_input, d_weights, d_bias).
pub fn conv2d_backward(x: &Tensor, p: &ConvParams, dout: &Tensor) -> (Tensor, ConvParams, Vec<f64>) {
    assert_eq!(dout.c, p.c_out);
    assert!(dout.h == x.h && dout.w == x.w && dout.n == x.n);
    let r = (p.k / 2) as isize;
    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut dw = ConvParams::zeros(p.c_in, p.c_out, p.k);
    let mut db = vec![0.0; p.c_out];
    for n in 0..x.n {
        for co in 0..p.c_out {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let g = dout.at(n, co, y, xx);
                    db[co] += g;
                    for ci in 0..p.c_in {
                        for ky in 0..p.k {
                            let sy = reflect101(y as isize + ky as isize - r, x.h);
                            for kx in 0..p.k {
                                let sx = reflect101(xx as isize + kx as isize - r, x.w);
                                dw.weights[((co * p.c_in + ci) * p.k + ky) * p.k + kx] +=
                                    g * x.at(n, ci, sy, sx);
                                *dx.at_mut(n, ci, sy, sx) += g * p.w_at(co, ci, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution (zero-insertion upsampling), output size
/// (H-1)*stride + k. No padding; present as an operator with oracle
/// coverage, the default architecture upsamples with depth_to_space.
pub fn transposed_conv2d(x: &Tensor, p: &ConvParams, stride: usize) -> Tensor {
    assert_eq!(x.c, p.c_in, "transposed_conv2d input channels");
    assert!(stride >= 1);
    let oh = (x.h - 1) * stride + p.k;
    let ow = (x.w - 1) * stride + p.k;
    let mut out = Tensor::zeros(x.n, p.c_out, oh, ow);
    for n in 0..x.n {
        for co in 0..p.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    *out.at_mut(n, co, oy, ox) = p.bias[co];
                }
            }
        }
        for ci in 0..p.c_in {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = x.at(n, ci, y, xx);
                    for co in 0..p.c_out {
                        for ky in 0..p.k {
                            for kx in 0..p.k {
                                *out.at_mut(n, co, y * stride + ky, xx * stride + kx) +=
                                    v * p.w_at(co, ci, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        n: x.n,
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// dx = dout where the forward input was positive.
pub fn relu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    assert!(x.same_shape(dout));
    Tensor {
        n: x.n,
        c: x.c,
        h: x.h,
        w: x.w,
        data: x
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.same_shape(b), "add shape mismatch");
    Tensor {
        n: a.n,
        c: a.c,
        h: a.h,
        w: a.w,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

/// Channel concatenation.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shape mismatch");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let plane = a.h * a.w;
    for n in 0..a.n {
        let dst = &mut out.data[n * (a.c + b.c) * plane..];
        dst[..a.c * plane].copy_from_slice(&a.data[n * a.c * plane..(n + 1) * a.c * plane]);
        dst[a.c * plane..(a.c + b.c) * plane]
            .copy_from_slice(&b.data[n * b.c * plane..(n + 1) * b.c * plane]);
    }
    out
}

/// out[c, y*r+i, x*r+j] = in[c*r^2 + i*r + j, y, x]
pub fn depth_to_space(x: &Tensor, r: usize) -> Tensor {
    assert!(x.c % (r * r) == 0, "channels not divisible by r^2");
    let oc = x.c / (r * r);
    let mut out = Tensor::zeros(x.n, oc, x.h * r, x.w * r);
    for n in 0..x.n {
        for c in 0..oc {
            for i in 0..r {
                for j in 0..r {
                    let ic = c * r * r + i * r + j;
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            *out.at_mut(n, c, y * r + i, xx * r + j) = x.at(n, ic, y, xx);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of depth_to_space with the same channel convention.
pub fn space_to_depth(x: &Tensor, r: usize) -> Tensor {
    assert!(x.h % r == 0 && x.w % r == 0, "spatial dims not divisible by r");
    let mut out = Tensor::zeros(x.n, x.c * r * r, x.h / r, x.w / r);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..r {
                for j in 0..r {
                    let oc = c * r * r + i * r + j;
                    for y in 0..x.h / r {
                        for xx in 0..x.w / r {
                            *out.at_mut(n, oc, y, xx) = x.at(n, c, y * r + i, xx * r + j);
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn rand_conv(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize) -> ConvParams {
        let mut p = ConvParams::zeros(c_in, c_out, k);
        for w in &mut p.weights {
            *w = rng.gen_range(-1.0..1.0);
        }
        for b in &mut p.bias {
            *b = rng.gen_range(-1.0..1.0);
        }
        p
    }

    /// Literal-definition convolution with explicit padded copy.
    fn conv_oracle(x: &Tensor, p: &ConvParams) -> Tensor {
        let r = p.k / 2;
        // materialize the reflect-101 padded input
        let ph = x.h + 2 * r;
        let pw = x.w + 2 * r;
        let mut padded = vec![0.0f64; x.n * x.c * ph * pw];
        for n in 0..x.n {
            for c in 0..x.c {
                for y in 0..ph {
                    for xx in 0..pw {
                        let sy = reflect101(y as isize - r as isize, x.h);
                        let sx = reflect101(xx as isize - r as isize, x.w);
                        padded[((n * x.c + c) * ph + y) * pw + xx] = x.at(n, c, sy, sx);
                    }
                }
            }
        }
        let mut out = Tensor::zeros(x.n, p.c_out, x.h, x.w);
        for n in 0..x.n {
            for co in 0..p.c_out {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = p.bias[co];
                        for ci in 0..p.c_in {
                            for ky in 0..p.k {
                                for kx in 0..p.k {
                                    acc += p.w_at(co, ci, ky, kx)
                                        * padded[((n * x.c + ci) * ph + y + ky) * pw + xx + kx];
                                }
                            }
                        }
                        *out.at_mut(n, co, y, xx) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_padded_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (c_in, c_out) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let (h, w) = (rng.gen_range(3..9), rng.gen_range(3..9));
            let n = rng.gen_range(1..3);
            let x = rand_tensor(&mut rng, n, c_in, h, w);
            let p = rand_conv(&mut rng, c_in, c_out, k);
            let got = conv2d(&x, &p);
            let want = conv_oracle(&x, &p);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    /// Transposed conv oracle: scatter each input pixel's stamp.
    #[test]
    fn transposed_conv_matches_zero_insertion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (c_in, c_out) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let k = [1, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..4);
            let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
            let x = rand_tensor(&mut rng, 1, c_in, h, w);
            let p = rand_conv(&mut rng, c_in, c_out, k);
            let got = transposed_conv2d(&x, &p, stride);
            // oracle: zero-insert then full correlation with flipped kernel
            // computed positionally: out[oy][ox] = bias + sum over input
            // pixels (y,x) and taps (ky,kx) with oy = y*s+ky
            let oh = (x.h - 1) * stride + k;
            let ow = (x.w - 1) * stride + k;
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias[co];
                        for ci in 0..c_in {
                            for y in 0..x.h {
                                for xx in 0..x.w {
                                    let (ky, kx) =
                                        (oy as isize - (y * stride) as isize, ox as isize - (xx * stride) as isize);
                                    if ky >= 0 && kx >= 0 && (ky as usize) < k && (kx as usize) < k {
                                        acc += x.at(0, ci, y, xx)
                                            * p.w_at(co, ci, ky as usize, kx as usize);
                                    }
                                }
                            }
                        }
                        let g = got.at(0, co, oy, ox);
                        assert!((g - acc).abs() < 1e-12, "{g} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn depth_to_space_stated_convention() {
        let x = Tensor::new(1, 9, 1, 1, (1..=9).map(|v| v as f64).collect());
        let out = depth_to_space(&x, 3);
        assert_eq!((out.c, out.h, out.w), (1, 3, 3));
        assert_eq!(out.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn space_depth_inverse_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let r = rng.gen_range(1..4);
            let (n, c, h, w) = (
                rng.gen_range(1..3),
                rng.gen_range(1..4) * r * r,
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            let x = rand_tensor(&mut rng, n, c, h, w);
            let back = space_to_depth(&depth_to_space(&x, r), r);
            assert_eq!(back.data, x.data);
            let (c2, h2, w2) = (
                rng.gen_range(1..4),
                rng.gen_range(1..4) * r,
                rng.gen_range(1..4) * r,
            );
            let y = rand_tensor(&mut rng, 1, c2, h2, w2);
            let back2 = depth_to_space(&space_to_depth(&y, r), r);
            assert_eq!(back2.data, y.data);
        }
    }

    #[test]
    fn concat_and_add() {
        let a = Tensor::new(1, 1, 1, 2, vec![1.0, 2.0]);
        let b = Tensor::new(1, 2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = concat(&a, &b);
        assert_eq!((c.c, c.h, c.w), (3, 1, 2));
        assert_eq!(c.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = add(&a, &a);
        assert_eq!(s.data, vec![2.0, 4.0]);
    }

    #[test]
    fn relu_and_mask() {
        let x = Tensor::new(1, 1, 1, 4, vec![-1.0, 0.0, 0.5, 2.0]);
        assert_eq!(relu(&x).data, vec![0.0, 0.0, 0.5, 2.0]);
        let dout = Tensor::new(1, 1, 1, 4, vec![1.0; 4]);
        assert_eq!(relu_backward(&x, &dout).data, vec![0.0, 0.0, 1.0, 1.0]);
    }

    /// conv2d_backward against finite differences on a tiny instance.
    #[test]
    fn conv_backward_finite_difference()
    {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_tensor(&mut rng, 1, 2, 4, 4);
        let p = rand_conv(&mut rng, 2, 2, 3);
        let dout = rand_tensor(&mut rng, 1, 2, 4, 4);
        // scalar objective sum(conv(x) .* dout)
        let f = |x: &Tensor, p: &ConvParams| -> f64 {
            conv2d(x, p).data.iter().zip(&dout.data).map(|(a, b)| a * b).sum()
        };
        let (dx, dw, db) = conv2d_backward(&x, &p, &dout);
        let eps = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let num = (f(&xp, &p) - f(&xm, &p)) / (2.0 * eps);
            assert!((num - dx.data[i]).abs() < 1e-6, "dx[{i}]: {num} vs {}", dx.data[i]);
        }
        for i in 0..p.weights.len() {
            let mut pp = p.clone();
            pp.weights[i] += eps;
            let mut pm = p.clone();
            pm.weights[i] -= eps;
            let num = (f(&x, &pp) - f(&x, &pm)) / (2.0 * eps);
            assert!((num - dw.weights[i]).abs() < 1e-6);
        }
        for i in 0..p.bias.len() {
            let mut pp = p.clone();
            pp.bias[i] += eps;
            let mut pm = p.clone();
            pm.bias[i] -= eps;
            let num = (f(&x, &pp) - f(&x, &pm)) / (2.0 * eps);
            assert!((num - db[i]).abs() < 1e-6);
        }
    }
}
