//! Adam training loop. Deterministic given the seed; QAT fake-quantizes
//! weights and activations in the forward pass and applies the
//! straight-through gradients to the float master weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{compute_loss, loss_backward, FeatureExtractor, LossConfig};
use super::net::{backward_from_output_grad, forward_cached_with, Gradients, Weights};
use super::quant::{fake_quantize, QuantParams};
use super::tensor::Tensor;
use super::SrnetError;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// learning-rate multiplier applied every `decay_every` epochs
    pub decay: f64,
    pub decay_every: usize,
    pub loss: LossConfig,
    /// fake-quantize weights and activations during training
    pub qat: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 50,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            decay: 0.8,
            decay_every: 10,
            loss: LossConfig::default(),
            qat: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub loss: f64,
    pub l1: f64,
    /// training-batch PSNR in dB, computed from the epoch's outputs
    pub psnr_db: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(w: &Weights) -> Adam {
        let sizes: Vec<usize> = w
            .layers()
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, w: &mut Weights, g: &Gradients, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let mut slot = 0;
        let mut layers = w.layers_mut();
        let g_layers = g.layers();
        for (layer, gl) in layers.iter_mut().zip(g_layers) {
            for (params, grads) in [
                (&mut layer.weights, &gl.weights),
                (&mut layer.bias, &gl.bias),
            ] {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..params.len() {
                    let gi = grads[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                    params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                }
                slot += 1;
            }
        }
    }
}

/// Per-layer weight fake quantization for the QAT forward pass; biases
/// stay float (they fold into the 32-bit accumulator at inference).
fn fq_weights(w: &Weights) -> Weights {
    let mut out = w.clone();
    for layer in out.layers_mut() {
        let (lo, hi) = layer
            .weights
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let qp = QuantParams::from_range(lo, hi);
        let t = Tensor::new(1, 1, 1, layer.weights.len(), layer.weights.clone());
        layer.weights = fake_quantize(&t, &qp).expect("positive scale").data;
    }
    out
}

fn accumulate(total: &mut Gradients, part: &Gradients) {
    let mut tl = total.layers_mut();
    let pl = part.layers();
    for (t, p) in tl.iter_mut().zip(pl) {
        for (a, b) in t.weights.iter_mut().zip(&p.weights) {
            *a += b;
        }
        for (a, b) in t.bias.iter_mut().zip(&p.bias) {
            *a += b;
        }
    }
}

fn scale_grads(g: &mut Gradients, s: f64) {
    for l in g.layers_mut() {
        for v in &mut l.weights {
            *v *= s;
        }
        for v in &mut l.bias {
            *v *= s;
        }
    }
}

/// Train `initial` on (lr, hr) pairs. Returns the final weights and a
/// per-epoch log. Bit-for-bit deterministic in (initial, pairs, config).
pub fn train(
    initial: &Weights,
    pairs: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
    feat: Option<&dyn FeatureExtractor>,
) -> Result<(Weights, TrainLog), SrnetError> {
    if pairs.is_empty() {
        return Err(SrnetError::EmptyData);
    }
    let mut w = initial.clone();
    let mut adam = Adam::new(&w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let batch = cfg.batch_size.max(1).min(pairs.len());

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.decay.powi((epoch / cfg.decay_every.max(1)) as i32);
        // seeded shuffle of the pair order
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut epoch_loss = 0.0;
        let mut epoch_l1 = 0.0;
        let mut epoch_sq = 0.0;
        let mut epoch_px = 0usize;
        let mut n_batches = 0usize;

        for chunk in order.chunks(batch) {
            let fw = if cfg.qat { fq_weights(&w) } else { w.clone() };
            let mut total = Weights::zeros(w.spec);
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let (x, hr) = &pairs[idx];
                let cache = forward_cached_with(&fw, x, cfg.qat)?;
                let (loss, comps) = compute_loss(&cache.output, hr, &cfg.loss, feat)?;
                if !loss.is_finite() {
                    return Err(SrnetError::NonFiniteLoss {
                        step: log.steps,
                        value: loss,
                    });
                }
                let d_out = loss_backward(&cache.output, hr, &cfg.loss, feat)?;
                let g = backward_from_output_grad(&fw, &cache, &d_out);
                accumulate(&mut total, &g);
                batch_loss += loss;
                epoch_l1 += comps.l1;
                for (a, b) in cache.output.data.iter().zip(&hr.data) {
                    epoch_sq += (a - b) * (a - b);
                }
                epoch_px += hr.len();
            }
            scale_grads(&mut total, 1.0 / chunk.len() as f64);
            adam.step(&mut w, &total, cfg, lr);
            epoch_loss += batch_loss / chunk.len() as f64;
            n_batches += 1;
            log.steps += 1;
        }

        let mse = epoch_sq / epoch_px as f64;
        log.epochs.push(EpochStats {
            loss: epoch_loss / n_batches as f64,
            l1: epoch_l1 / pairs.len() as f64,
            psnr_db: if mse > 0.0 {
                10.0 * (1.0 / mse).log10()
            } else {
                f64::INFINITY
            },
            learning_rate: lr,
        });
    }
    Ok((w, log))
}
