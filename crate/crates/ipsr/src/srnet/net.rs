//! The default super-resolution graph: head conv + relu, B body convs
//! with relu, a skip add, a tail conv to 3*r^2 channels, optional anchor
//! add of the nearest-upscaled input, and depth_to_space(r).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    add, conv2d, conv2d_backward, depth_to_space, relu, relu_backward, space_to_depth, ConvParams,
};
use super::tensor::Tensor;
use super::SrnetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    /// feature width C
    pub channels: usize,
    /// number of body convolutions B
    pub body: usize,
    /// upscale factor r
    pub scale: usize,
    /// add the nearest-upscaled input before depth_to_space
    pub anchor: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            channels: 32,
            body: 4,
            scale: 3,
            anchor: false,
        }
    }
}

pub fn build_network(channels: usize, body: usize, scale: usize, anchor: bool) -> Result<NetworkSpec, SrnetError> {
    if channels == 0 || scale == 0 {
        return Err(SrnetError::InvalidArchitecture { channels, scale });
    }
    Ok(NetworkSpec {
        channels,
        body,
        scale,
        anchor,
    })
}

impl NetworkSpec {
    pub fn param_count(&self) -> usize {
        let (c, r) = (self.channels, self.scale);
        let head = 9 * 3 * c + c;
        let body = self.body * (9 * c * c + c);
        let tail = 9 * c * (3 * r * r) + 3 * r * r;
        head + body + tail
    }
}

/// All learnable parameters of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub spec: NetworkSpec,
    pub head: ConvParams,
    pub body: Vec<ConvParams>,
    pub tail: ConvParams,
}

impl Weights {
    pub fn zeros(spec: NetworkSpec) -> Self {
        let c = spec.channels;
        Weights {
            spec,
            head: ConvParams::zeros(3, c, 3),
            body: (0..spec.body).map(|_| ConvParams::zeros(c, c, 3)).collect(),
            tail: ConvParams::zeros(c, 3 * spec.scale * spec.scale, 3),
        }
    }

    /// Kaiming-uniform init, biases zero, deterministic in the seed.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::zeros(spec);
        for layer in w.layers_mut() {
            let bound = (6.0 / (layer.c_in as f64 * (layer.k * layer.k) as f64)).sqrt();
            for v in &mut layer.weights {
                *v = rng.gen_range(-bound..bound);
            }
        }
        w
    }

    pub fn layers(&self) -> Vec<&ConvParams> {
        let mut v = vec![&self.head];
        v.extend(self.body.iter());
        v.push(&self.tail);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvParams> {
        let mut v = vec![&mut self.head];
        v.extend(self.body.iter_mut());
        v.push(&mut self.tail);
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }
}

/// Per-layer gradients, same shapes as [`Weights`].
pub type Gradients = Weights;

/// Forward activations retained for the backward pass.
pub struct ForwardCache {
    pub x: Tensor,
    /// head conv output before relu
    pub a_head: Tensor,
    pub h0: Tensor,
    /// body conv outputs before relu
    pub a_body: Vec<Tensor>,
    /// body outputs after relu
    pub b_body: Vec<Tensor>,
    pub skip: Tensor,
    pub output: Tensor,
}

/// Nearest-upscale of x expressed in pre-depth_to_space channel layout:
/// every input channel repeated r^2 times.
fn anchor_tensor(x: &Tensor, r: usize) -> Tensor {
    let mut out = Tensor::zeros(x.n, x.c * r * r, x.h, x.w);
    let plane = x.h * x.w;
    for n in 0..x.n {
        for c in 0..x.c {
            let src = &x.data[(n * x.c + c) * plane..(n * x.c + c + 1) * plane];
            for rep in 0..r * r {
                let oc = c * r * r + rep;
                out.data[(n * x.c * r * r + oc) * plane..(n * x.c * r * r + oc + 1) * plane]
                    .copy_from_slice(src);
            }
        }
    }
    out
}

fn check_input(w: &Weights, x: &Tensor) -> Result<(), SrnetError> {
    if x.c != 3 {
        return Err(SrnetError::ShapeMismatch(format!(
            "expected 3 input channels, got {}",
            x.c
        )));
    }
    if x.h < 3 || x.w < 3 {
        return Err(SrnetError::ShapeMismatch(format!(
            "input {}x{} smaller than the 3x3 kernels",
            x.h, x.w
        )));
    }
    let _ = w;
    Ok(())
}

/// Fake-quantize an activation against its own batch range. The range
/// covers every value, so the straight-through gradient is exactly the
/// identity and the standard backward pass stays valid.
fn fq_activation(t: &Tensor) -> Tensor {
    let (lo, hi) = t
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let qp = super::quant::QuantParams::from_range(lo, hi);
    super::quant::fake_quantize(t, &qp).expect("positive scale")
}

/// Forward pass retaining every intermediate activation. With `act_fq`
/// every activation tensor is passed through fake quantization (the QAT
/// forward path).
pub fn forward_cached_with(w: &Weights, x: &Tensor, act_fq: bool) -> Result<ForwardCache, SrnetError> {
    check_input(w, x)?;
    let q = |t: Tensor| if act_fq { fq_activation(&t) } else { t };
    let a_head = conv2d(x, &w.head);
    let h0 = q(relu(&a_head));
    let mut a_body = Vec::with_capacity(w.body.len());
    let mut b_body = Vec::with_capacity(w.body.len());
    let mut cur = h0.clone();
    for layer in &w.body {
        let a = conv2d(&cur, layer);
        cur = q(relu(&a));
        a_body.push(a);
        b_body.push(cur.clone());
    }
    let skip = q(add(&h0, &cur));
    let mut t = conv2d(&skip, &w.tail);
    if w.spec.anchor {
        t = add(&t, &anchor_tensor(x, w.spec.scale));
    }
    let output = q(depth_to_space(&t, w.spec.scale));
    Ok(ForwardCache {
        x: x.clone(),
        a_head,
        h0,
        a_body,
        b_body,
        skip,
        output,
    })
}

/// Forward pass retaining every intermediate activation.
pub fn forward_cached(w: &Weights, x: &Tensor) -> Result<ForwardCache, SrnetError> {
    forward_cached_with(w, x, false)
}

pub fn forward(w: &Weights, x: &Tensor) -> Result<Tensor, SrnetError> {
    Ok(forward_cached(w, x)?.output)
}

/// Reverse-mode gradients of a scalar loss with respect to every weight,
/// given dL/d(output).
pub fn backward_from_output_grad(w: &Weights, cache: &ForwardCache, d_output: &Tensor) -> Gradients {
    let r = w.spec.scale;
    // depth_to_space is a permutation; its adjoint is the inverse
    let dt = space_to_depth(d_output, r);
    // the anchor add passes the gradient through to the tail unchanged
    let (d_skip, dw_tail, db_tail) = conv2d_backward(&cache.skip, &w.tail, &dt);

    let mut grads = Weights::zeros(w.spec);
    grads.tail.weights = dw_tail.weights;
    grads.tail.bias = db_tail;

    // skip add fans the gradient out to both the head and the body tail
    let mut d_h0 = d_skip.clone();
    let mut d_cur = d_skip;
    for i in (0..w.body.len()).rev() {
        let da = relu_backward(&cache.a_body[i], &d_cur);
        let input = if i == 0 { &cache.h0 } else { &cache.b_body[i - 1] };
        let (dx, dw, db) = conv2d_backward(input, &w.body[i], &da);
        grads.body[i].weights = dw.weights;
        grads.body[i].bias = db;
        d_cur = dx;
    }
    // when B=0 the body contributes the skip gradient directly
    for (a, b) in d_h0.data.iter_mut().zip(&d_cur.data) {
        *a += b;
    }
    let da_head = relu_backward(&cache.a_head, &d_h0);
    let (_, dw_head, db_head) = conv2d_backward(&cache.x, &w.head, &da_head);
    grads.head.weights = dw_head.weights;
    grads.head.bias = db_head;
    grads
}

/// Forward, loss, and full reverse-mode sweep in one call. Returns the
/// loss value, its components, and per-weight gradients.
pub fn backward_gradients(
    w: &Weights,
    x: &Tensor,
    hr: &Tensor,
    cfg: &super::loss::LossConfig,
    feat: Option<&dyn super::loss::FeatureExtractor>,
) -> Result<(f64, super::loss::LossComponents, Gradients), SrnetError> {
    let cache = forward_cached(w, x)?;
    let (loss, comps) = super::loss::compute_loss(&cache.output, hr, cfg, feat)?;
    let d_out = super::loss::loss_backward(&cache.output, hr, cfg, feat)?;
    Ok((loss, comps, backward_from_output_grad(w, &cache, &d_out)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_match_formula() {
        let spec = build_network(32, 4, 3, false).unwrap();
        assert_eq!(spec.param_count(), 45_691);
        assert_eq!(Weights::zeros(spec).param_count(), 45_691);
        let spec5 = build_network(32, 5, 3, false).unwrap();
        assert_eq!(spec5.param_count(), 54_939);
    }

    #[test]
    fn degenerate_body_is_shape_valid() {
        let spec = build_network(8, 0, 2, false).unwrap();
        let w = Weights::init(spec, 1);
        let x = Tensor::zeros(1, 3, 5, 4);
        let y = forward(&w, &x).unwrap();
        assert_eq!((y.n, y.c, y.h, y.w), (1, 3, 10, 8));
    }

    #[test]
    fn output_shape_is_n3_rh_rw() {
        let spec = build_network(16, 2, 3, true).unwrap();
        let w = Weights::init(spec, 2);
        let x = Tensor::zeros(2, 3, 6, 7);
        let y = forward(&w, &x).unwrap();
        assert_eq!((y.n, y.c, y.h, y.w), (2, 3, 18, 21));
    }

    #[test]
    fn anchor_zero_weights_is_nearest_upscale() {
        let spec = build_network(8, 1, 3, true).unwrap();
        let w = Weights::zeros(spec);
        let x = Tensor::new(1, 3, 3, 3, (0..27).map(|i| i as f64 * 0.03).collect());
        let y = forward(&w, &x).unwrap();
        for c in 0..3 {
            for oy in 0..9 {
                for ox in 0..9 {
                    assert_eq!(y.at(0, c, oy, ox), x.at(0, c, oy / 3, ox / 3));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = Weights::init(NetworkSpec::default(), 0);
        assert!(matches!(
            forward(&w, &Tensor::zeros(1, 4, 8, 8)),
            Err(SrnetError::ShapeMismatch(_))
        ));
        assert!(matches!(
            forward(&w, &Tensor::zeros(1, 3, 2, 8)),
            Err(SrnetError::ShapeMismatch(_))
        ));
        assert!(build_network(0, 1, 3, false).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = NetworkSpec::default();
        assert_eq!(Weights::init(spec, 42), Weights::init(spec, 42));
        assert_ne!(Weights::init(spec, 42), Weights::init(spec, 43));
    }
}
