use alloc::vec;

use crate::error::{Error, Result};
use crate::paramvec::{ParamVector, Shape};

use super::{argmax, check_params, check_tokens, softmax_in_place, BatchStats, Model};

/// `p(next | prev) = softmax(table[prev] + bias)`.
///
/// Layers: `embedding` (V x V logit table, row-major by previous token) and
/// `bias` (V). The loss is convex in the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramSoftmax {
    vocab: usize,
}

impl BigramSoftmax {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::config("vocabulary needs at least two tokens"));
        }
        Ok(BigramSoftmax { vocab })
    }
}

impl Model for BigramSoftmax {
    fn name(&self) -> &str {
        "bigram_softmax"
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn shape(&self) -> Shape {
        Shape::new([("embedding", self.vocab * self.vocab), ("bias", self.vocab)])
    }

    /// All zeros: the uniform predictor.
    fn init_params(&self, _seed: u64) -> ParamVector {
        ParamVector::zeros(&self.shape())
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
        let v = self.vocab;
        let table = &params.layers()[0].values;
        let bias = &params.layers()[1].values;
        let mut probs = vec![0.0; v];
        let mut stats = BatchStats::default();

        for seq in seqs {
            check_tokens(seq, v)?;
            for pair in seq.windows(2) {
                let (prev, next) = (pair[0] as usize, pair[1] as usize);
                let row = &table[prev * v..(prev + 1) * v];
                for ((p, t), b) in probs.iter_mut().zip(row).zip(bias) {
                    *p = t + b;
                }
                let log_z = softmax_in_place(&mut probs);
                // probs now holds softmax; recover the target logit for the loss
                stats.loss_sum += log_z - (row[next] + bias[next]);
                stats.correct += usize::from(argmax(&probs) == next);
                stats.predictions += 1;

                if let Some(g) = grad.as_deref_mut() {
                    probs[next] -= 1.0;
                    let layers = g.layers_mut();
                    for (gt, p) in layers[0].values[prev * v..(prev + 1) * v].iter_mut().zip(&probs) {
                        *gt += p;
                    }
                    for (gb, p) in layers[1].values.iter_mut().zip(&probs) {
                        *gb += p;
                    }
                }
            }
        }
        Ok(stats)
    }
}
