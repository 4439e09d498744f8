//! uint8 quantization: fake-quantize (QAT mechanics) and a
//! post-training-quantized inference engine with 32-bit integer
//! accumulation. Per-tensor asymmetric parameters; rounding is
//! round-half-away-from-zero throughout (f64::round).

use super::net::{forward_cached, NetworkSpec, Weights};
use super::ops::ConvParams;
use super::tensor::Tensor;
use super::SrnetError;
use crate::filters::reflect101;

/// Per-tensor affine quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: u8,
}

impl QuantParams {
    /// Parameters covering [lo, hi]; the range is widened to include 0
    /// so zero padding and relu cut-offs are exactly representable.
    pub fn from_range(lo: f64, hi: f64) -> QuantParams {
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        let scale = if hi > lo { (hi - lo) / 255.0 } else { 1.0 / 255.0 };
        let zp = (-lo / scale).round().clamp(0.0, 255.0) as u8;
        QuantParams {
            scale,
            zero_point: zp,
        }
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> u8 {
        ((x / self.scale).round() + self.zero_point as f64).clamp(0.0, 255.0) as u8
    }

    #[inline]
    pub fn dequantize(&self, q: u8) -> f64 {
        (q as f64 - self.zero_point as f64) * self.scale
    }
}

/// Quantize-dequantize round trip with straight-through semantics in
/// training (the gradient mask lives with the training loop).
pub fn fake_quantize(x: &Tensor, qp: &QuantParams) -> Result<Tensor, SrnetError> {
    if qp.scale <= 0.0 {
        return Err(SrnetError::NonPositiveScale(qp.scale));
    }
    Ok(Tensor {
        n: x.n,
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| qp.dequantize(qp.quantize(v))).collect(),
    })
}

/// One convolution layer in quantized form. Biases are folded into the
/// 32-bit accumulator in (input scale x weight scale) units.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub weights: Vec<u8>,
    pub w_qp: QuantParams,
    pub bias_q: Vec<i32>,
}

impl QuantizedLayer {
    pub fn from_float(p: &ConvParams, in_scale: f64) -> QuantizedLayer {
        let lo = p.weights.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w_qp = QuantParams::from_range(lo.min(0.0), hi.max(0.0));
        QuantizedLayer {
            c_in: p.c_in,
            c_out: p.c_out,
            k: p.k,
            weights: p.weights.iter().map(|&v| w_qp.quantize(v)).collect(),
            w_qp,
            bias_q: p
                .bias
                .iter()
                .map(|&b| (b / (in_scale * w_qp.scale)).round() as i32)
                .collect(),
        }
    }
}

/// uint8 activation tensor.
#[derive(Debug, Clone)]
pub struct QTensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl QTensor {
    #[inline]
    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> u8 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }
}

/// Same-padding quantized convolution: u8 inputs/weights, i32
/// accumulation, requantization through a real-valued multiplier.
pub fn quantized_conv2d(
    x: &QTensor,
    layer: &QuantizedLayer,
    in_qp: &QuantParams,
    out_qp: &QuantParams,
    apply_relu: bool,
) -> QTensor {
    assert_eq!(x.c, layer.c_in);
    let r = (layer.k / 2) as isize;
    let zp_x = in_qp.zero_point as i32;
    let zp_w = layer.w_qp.zero_point as i32;
    let multiplier = in_qp.scale * layer.w_qp.scale / out_qp.scale;
    let zp_out = out_qp.zero_point;
    let mut out = QTensor {
        n: x.n,
        c: layer.c_out,
        h: x.h,
        w: x.w,
        data: vec![0; x.n * layer.c_out * x.h * x.w],
    };
    for n in 0..x.n {
        for co in 0..layer.c_out {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc: i32 = layer.bias_q[co];
                    for ci in 0..layer.c_in {
                        for ky in 0..layer.k {
                            let sy = reflect101(y as isize + ky as isize - r, x.h);
                            for kx in 0..layer.k {
                                let sx = reflect101(xx as isize + kx as isize - r, x.w);
                                let xv = x.at(n, ci, sy, sx) as i32 - zp_x;
                                let wv = layer.weights
                                    [((co * layer.c_in + ci) * layer.k + ky) * layer.k + kx]
                                    as i32
                                    - zp_w;
                                acc += xv * wv;
                            }
                        }
                    }
                    let mut q = ((multiplier * acc as f64).round() + zp_out as f64)
                        .clamp(0.0, 255.0) as u8;
                    if apply_relu {
                        q = q.max(zp_out);
                    }
                    out.data[((n * layer.c_out + co) * x.h + y) * x.w + xx] = q;
                }
            }
        }
    }
    out
}

/// The default network graph with every tensor in uint8.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    pub spec: NetworkSpec,
    pub input_qp: QuantParams,
    pub head: QuantizedLayer,
    pub head_qp: QuantParams,
    pub body: Vec<(QuantizedLayer, QuantParams)>,
    pub skip_qp: QuantParams,
    pub tail: QuantizedLayer,
    /// pre-depth_to_space tensor (after the anchor add when enabled);
    /// depth_to_space only permutes, so this is also the output scale
    pub out_qp: QuantParams,
}

fn range_of(data: &[f64]) -> (f64, f64) {
    data.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Per-tensor min/max calibration over the given images, then uint8
/// conversion of every weight and activation tensor.
pub fn calibrate_and_quantize(
    w: &Weights,
    calibration: &[Tensor],
) -> Result<QuantizedNetwork, SrnetError> {
    if calibration.is_empty() {
        return Err(SrnetError::EmptyCalibration);
    }
    let b = w.spec.body;
    let mut ranges: Vec<(f64, f64)> = vec![(f64::INFINITY, f64::NEG_INFINITY); b + 4];
    for img in calibration {
        let cache = forward_cached(w, img)?;
        let mut upd = |slot: usize, data: &[f64]| {
            let (lo, hi) = range_of(data);
            ranges[slot].0 = ranges[slot].0.min(lo);
            ranges[slot].1 = ranges[slot].1.max(hi);
        };
        upd(0, &cache.x.data);
        upd(1, &cache.h0.data);
        for (i, t) in cache.b_body.iter().enumerate() {
            upd(2 + i, &t.data);
        }
        upd(2 + b, &cache.skip.data);
        // the cached output is post-depth_to_space, a pure permutation
        // of the pre-d2s tensor, so its range is identical
        upd(3 + b, &cache.output.data);
    }
    let qp = |slot: usize| QuantParams::from_range(ranges[slot].0, ranges[slot].1);
    let input_qp = qp(0);
    let head_qp = qp(1);
    let skip_qp = qp(2 + b);
    let out_qp = qp(3 + b);
    let head = QuantizedLayer::from_float(&w.head, input_qp.scale);
    let mut body = Vec::with_capacity(b);
    let mut prev_scale = head_qp.scale;
    for (i, layer) in w.body.iter().enumerate() {
        let ql = QuantizedLayer::from_float(layer, prev_scale);
        let aqp = qp(2 + i);
        prev_scale = aqp.scale;
        body.push((ql, aqp));
    }
    let tail = QuantizedLayer::from_float(&w.tail, skip_qp.scale);
    Ok(QuantizedNetwork {
        spec: w.spec,
        input_qp,
        head,
        head_qp,
        body,
        skip_qp,
        tail,
        out_qp,
    })
}

impl QuantizedNetwork {
    /// Full uint8 forward; the result is dequantized to a float tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, SrnetError> {
        if x.c != 3 {
            return Err(SrnetError::ShapeMismatch(format!(
                "expected 3 input channels, got {}",
                x.c
            )));
        }
        let r = self.spec.scale;
        let xq = QTensor {
            n: x.n,
            c: x.c,
            h: x.h,
            w: x.w,
            data: x.data.iter().map(|&v| self.input_qp.quantize(v)).collect(),
        };
        let h0 = quantized_conv2d(&xq, &self.head, &self.input_qp, &self.head_qp, true);
        let mut cur = h0.clone();
        let mut cur_qp = self.head_qp;
        for (layer, aqp) in &self.body {
            cur = quantized_conv2d(&cur, layer, &cur_qp, aqp, true);
            cur_qp = *aqp;
        }
        // skip add in the integer domain via real multipliers
        let mut skip = QTensor {
            n: h0.n,
            c: h0.c,
            h: h0.h,
            w: h0.w,
            data: vec![0; h0.data.len()],
        };
        for i in 0..skip.data.len() {
            let v = self.head_qp.dequantize(h0.data[i]) + cur_qp.dequantize(cur.data[i]);
            skip.data[i] = self.skip_qp.quantize(v);
        }
        let mut t = quantized_conv2d(&skip, &self.tail, &self.skip_qp, &self.out_qp, false);
        if self.spec.anchor {
            // anchor add: input channel c repeated r^2 times
            let plane = x.h * x.w;
            for n in 0..x.n {
                for c in 0..3 {
                    for rep in 0..r * r {
                        let oc = c * r * r + rep;
                        for p in 0..plane {
                            let i = (n * t.c + oc) * plane + p;
                            let v = self.out_qp.dequantize(t.data[i])
                                + self.input_qp.dequantize(xq.data[(n * 3 + c) * plane + p]);
                            t.data[i] = self.out_qp.quantize(v);
                        }
                    }
                }
            }
        }
        // depth_to_space on the u8 tensor, then dequantize
        let mut out = Tensor::zeros(x.n, 3, x.h * r, x.w * r);
        for n in 0..x.n {
            for c in 0..3 {
                for i in 0..r {
                    for j in 0..r {
                        let ic = c * r * r + i * r + j;
                        for y in 0..x.h {
                            for xx in 0..x.w {
                                *out.at_mut(n, c, y * r + i, xx * r + j) =
                                    self.out_qp.dequantize(t.at(n, ic, y, xx));
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::net::{build_network, forward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fake_quantize_definition_cases() {
        let qp = QuantParams {
            scale: 0.1,
            zero_point: 0,
        };
        let t = |v: f64| Tensor::new(1, 1, 1, 1, vec![v]);
        assert!((fake_quantize(&t(0.25), &qp).unwrap().data[0] - 0.3).abs() < 1e-12);
        assert!((fake_quantize(&t(0.2), &qp).unwrap().data[0] - 0.2).abs() < 1e-12);
        assert!((fake_quantize(&t(30.0), &qp).unwrap().data[0] - 25.5).abs() < 1e-12);
    }

    #[test]
    fn fake_quantize_rejects_bad_scale() {
        let qp = QuantParams {
            scale: 0.0,
            zero_point: 0,
        };
        assert!(fake_quantize(&Tensor::zeros(1, 1, 1, 1), &qp).is_err());
    }

    #[test]
    fn fake_quantize_idempotent_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qp = QuantParams::from_range(-1.0, 2.0);
        let x = Tensor::new(1, 1, 8, 8, (0..64).map(|_| rng.gen_range(-1.0..2.0)).collect());
        let fq = fake_quantize(&x, &qp).unwrap();
        let fq2 = fake_quantize(&fq, &qp).unwrap();
        assert_eq!(fq.data, fq2.data);
        for (orig, q) in x.data.iter().zip(&fq.data) {
            assert!((orig - q).abs() <= qp.scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn round_half_away_convention() {
        let qp = QuantParams {
            scale: 1.0,
            zero_point: 128,
        };
        assert_eq!(qp.quantize(0.5), 129);
        assert_eq!(qp.quantize(-0.5), 127);
        assert_eq!(qp.quantize(1.5), 130);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = build_network(8, 1, 2, false).unwrap();
        let w = Weights::zeros(spec);
        let calib = vec![Tensor::new(1, 3, 6, 6, vec![0.5; 108])];
        let q = calibrate_and_quantize(&w, &calib).unwrap();
        let out = q.forward(&calib[0]).unwrap();
        for v in &out.data {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn identity_one_by_one_conv_within_half_scale() {
        // single 1x1 quantized conv with identity weights: quantized
        // forward within scale/2 per pixel of the float values
        let mut p = ConvParams::zeros(1, 1, 1);
        p.weights[0] = 1.0;
        let in_qp = QuantParams::from_range(0.0, 1.0);
        let out_qp = QuantParams::from_range(0.0, 1.0);
        let layer = QuantizedLayer::from_float(&p, in_qp.scale);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let xq = QTensor {
            n: 1,
            c: 1,
            h: 8,
            w: 8,
            data: x.iter().map(|&v| in_qp.quantize(v)).collect(),
        };
        let out = quantized_conv2d(&xq, &layer, &in_qp, &out_qp, false);
        for (f, q) in x.iter().zip(&out.data) {
            let deq = out_qp.dequantize(*q);
            // one input quantization plus one requantization rounding
            assert!((f - deq).abs() <= out_qp.scale / 2.0 + in_qp.scale / 2.0 + 1e-12);
        }
    }

    fn crop_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        // smooth content with mild detail, like the real inputs
        let data = (0..3 * h * w)
            .map(|i| {
                let (c, rest) = (i / (h * w), i % (h * w));
                let (y, x) = ((rest / w) as f64, (rest % w) as f64);
                (0.5 + 0.3 * ((x * 0.3 + c as f64).sin() * (y * 0.2).cos())
                    + rng.gen_range(-0.05..0.05))
                    .clamp(0.0, 1.0)
            })
            .collect();
        Tensor::new(1, 3, h, w, data)
    }

    #[test]
    fn default_net_quantized_close_to_float() {
        // anchor on, small residual weights: the regime quantization is
        // meant for (paper's stated motivation for anchor nets)
        let spec = build_network(32, 4, 3, true).unwrap();
        let mut w = Weights::init(spec, 9);
        for layer in w.layers_mut() {
            for v in &mut layer.weights {
                *v *= 0.1;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let calib: Vec<Tensor> = (0..10).map(|_| crop_tensor(&mut rng, 16, 16)).collect();
        let q = calibrate_and_quantize(&w, &calib).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..4 {
            let x = crop_tensor(&mut rng, 16, 16);
            let f = forward(&w, &x).unwrap();
            let qo = q.forward(&x).unwrap();
            let mean_abs: f64 = f
                .data
                .iter()
                .zip(&qo.data)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / f.data.len() as f64;
            worst = worst.max(mean_abs);
        }
        assert!(worst < 2.0 / 255.0, "mean abs diff {worst}");
    }

    #[test]
    fn empty_calibration_rejected() {
        let w = Weights::zeros(build_network(8, 1, 2, false).unwrap());
        assert!(matches!(
            calibrate_and_quantize(&w, &[]),
            Err(SrnetError::EmptyCalibration)
        ));
    }
}
