use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::paramvec::{ParamVector, Shape};
use crate::rng::{substream, Purpose};

use super::{argmax, check_params, check_tokens, softmax_in_place, BatchStats, Model};

const MAX_PARAMS: usize = 10_000;
const INIT_SCALE: f64 = 0.1;

/// Single-cell tanh RNN with tied input/output embeddings:
///
/// ```text
/// h_t    = tanh(E[x_t] + R h_{t-1} + b_h)
/// logits = E h_t + b_o
/// ```
///
/// Layers: `embedding` (V x d), `recurrent` (d x d), `recurrent_bias` (d),
/// `output_bias` (V). The state starts at zero for every sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyRnn {
    vocab: usize,
    hidden: usize,
}

impl TinyRnn {
    pub fn new(vocab: usize, hidden: usize) -> Result<Self> {
        if vocab < 2 || hidden == 0 {
            return Err(Error::config("tiny_rnn needs vocab >= 2 and hidden >= 1"));
        }
        let m = TinyRnn { vocab, hidden };
        let n = m.shape().num_params();
        if n > MAX_PARAMS {
            return Err(Error::config(format!(
                "tiny_rnn with vocab {vocab} and hidden {hidden} has {n} parameters (limit {MAX_PARAMS})"
            )));
        }
        Ok(m)
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }
}

impl Model for TinyRnn {
    fn name(&self) -> &str {
        "tiny_rnn"
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn shape(&self) -> Shape {
        let (v, d) = (self.vocab, self.hidden);
        Shape::new([
            ("embedding", v * d),
            ("recurrent", d * d),
            ("recurrent_bias", d),
            ("output_bias", v),
        ])
    }

    fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = substream(seed, 0, Purpose::Init, 0);
        let mut p = ParamVector::zeros(&self.shape());
        for layer in &mut p.layers_mut()[..2] {
            for x in &mut layer.values {
                *x = INIT_SCALE * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    fn forward_backward(
        &self,
        params: &ParamVector,
        seqs: &[&[u32]],
        mut grad: Option<&mut ParamVector>,
    ) -> Result<BatchStats> {
        check_params(self, params)?;
        if let Some(g) = grad.as_deref() {
            check_params(self, g)?;
        }
        let (v, d) = (self.vocab, self.hidden);
        let layers = params.layers();
        let emb = &layers[0].values;
        let rec = &layers[1].values;
        let bias_h = &layers[2].values;
        let bias_o = &layers[3].values;

        let mut stats = BatchStats::default();
        let mut logits = vec![0.0; v];
        let mut dh = vec![0.0; d];
        let mut dh_next = vec![0.0; d];
        let mut da = vec![0.0; d];

        for seq in seqs {
            check_tokens(seq, v)?;
            if seq.len() < 2 {
                continue;
            }
            let steps = seq.len() - 1;
            // hs[t + 1] is the state after consuming seq[t]; hs[0] = 0
            let mut hs: Vec<f64> = vec![0.0; (steps + 1) * d];
            let mut probs: Vec<f64> = vec![0.0; steps * v];

            for t in 0..steps {
                let x = seq[t] as usize;
                let (prev, cur) = hs.split_at_mut((t + 1) * d);
                let h_prev = &prev[t * d..];
                let h = &mut cur[..d];
                for i in 0..d {
                    let mut a = emb[x * d + i] + bias_h[i];
                    for (w, hp) in rec[i * d..(i + 1) * d].iter().zip(h_prev) {
                        a += w * hp;
                    }
                    h[i] = libm::tanh(a);
                }
                for (o, l) in logits.iter_mut().enumerate() {
                    let row = &emb[o * d..(o + 1) * d];
                    *l = bias_o[o] + row.iter().zip(h.iter()).map(|(e, hv)| e * hv).sum::<f64>();
                }
                let target = seq[t + 1] as usize;
                let target_logit = logits[target];
                let log_z = softmax_in_place(&mut logits);
                stats.loss_sum += log_z - target_logit;
                stats.correct += usize::from(argmax(&logits) == target);
                stats.predictions += 1;
                probs[t * v..(t + 1) * v].copy_from_slice(&logits);
            }

            let Some(g) = grad.as_deref_mut() else { continue };
            let gl = g.layers_mut();
            let (g_emb, rest) = gl.split_at_mut(1);
            let (g_rec, rest) = rest.split_at_mut(1);
            let (g_bh, g_bo) = rest.split_at_mut(1);
            let (g_emb, g_rec, g_bh, g_bo) = (
                &mut g_emb[0].values,
                &mut g_rec[0].values,
                &mut g_bh[0].values,
                &mut g_bo[0].values,
            );

            dh_next.iter_mut().for_each(|x| *x = 0.0);
            for t in (0..steps).rev() {
                let h = &hs[(t + 1) * d..(t + 2) * d];
                let h_prev = &hs[t * d..(t + 1) * d];
                let p = &mut probs[t * v..(t + 1) * v];
                p[seq[t + 1] as usize] -= 1.0;

                dh.copy_from_slice(&dh_next);
                for (o, dl) in p.iter().enumerate() {
                    g_bo[o] += dl;
                    let row = o * d;
                    for i in 0..d {
                        g_emb[row + i] += dl * h[i];
                        dh[i] += dl * emb[row + i];
                    }
                }
                for i in 0..d {
                    da[i] = dh[i] * (1.0 - h[i] * h[i]);
                }
                let x = seq[t] as usize;
                for i in 0..d {
                    g_emb[x * d + i] += da[i];
                    g_bh[i] += da[i];
                    for j in 0..d {
                        g_rec[i * d + j] += da[i] * h_prev[j];
                    }
                }
                for j in 0..d {
                    dh_next[j] = (0..d).map(|i| rec[i * d + j] * da[i]).sum();
                }
            }
        }
        Ok(stats)
    }
}
