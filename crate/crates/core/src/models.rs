//! Parameterized predictors: a scalar linear regressor for the
//! one-dimensional analysis, a pooled embedding classifier for the
//! sequence-level experiments, and a per-token embedding tagger for the
//! neuron association analysis.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor};

/// Reserved padding id. Its embedding row is zero-initialized and is
/// excluded from mean pooling, so it never receives gradient.
pub const PAD_ID: usize = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const UNK_ID: usize = 1;

/// A token sequence with its class label.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, label: usize) -> Self {
        Self { tokens, label }
    }
}

/// Classifier dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            embed_dim: 32,
            hidden_dim: 64,
            num_classes: 2,
        }
    }
}

fn glorot_uniform(rng: &mut DetRng, fan_in: usize, fan_out: usize) -> f64 {
    let limit = fmath::sqrt(6.0 / (fan_in + fan_out) as f64);
    rng.uniform(-limit, limit)
}

fn init_embedding(rng: &mut DetRng, vocab: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; vocab * dim];
    // Row PAD_ID stays zero.
    for v in data.iter_mut().skip(dim) {
        *v = rng.normal(0.0, 0.1);
    }
    Tensor::param(data, &[vocab, dim]).expect("embedding shape")
}

fn init_dense(rng: &mut DetRng, rows: usize, cols: usize) -> (Tensor, Tensor) {
    let w: Vec<f64> = (0..rows * cols)
        .map(|_| glorot_uniform(rng, rows, cols))
        .collect();
    (
        Tensor::param(w, &[rows, cols]).expect("dense shape"),
        Tensor::param(vec![0.0; cols], &[cols]).expect("bias shape"),
    )
}

/// A batch of sequences encoded for the classifier: padded token ids, the
/// pooling mask, and one-hot targets.
pub struct EncodedBatch {
    pub ids: Tensor,
    pub mask: Tensor,
    pub targets: Tensor,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

/// Mean-pooled embedding classifier: embedding table, one hidden tanh
/// layer, and a linear output head.
pub struct EmbeddingClassifier {
    pub dims: ModelDims,
    pub embedding: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl EmbeddingClassifier {
    pub fn new(dims: ModelDims, rng: &mut DetRng) -> Self {
        let embedding = init_embedding(rng, dims.vocab_size, dims.embed_dim);
        let (w1, b1) = init_dense(rng, dims.embed_dim, dims.hidden_dim);
        let (w2, b2) = init_dense(rng, dims.hidden_dim, dims.num_classes);
        Self {
            dims,
            embedding,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![
            self.embedding.clone(),
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    pub fn named_parameters(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("embedding", self.embedding.clone()),
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("b2", self.b2.clone()),
        ]
    }

    pub fn zero_grads(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    /// Pads a batch to its longest sequence and builds ids, mask, and
    /// one-hot targets. Rejects empty sequences, out-of-vocabulary ids
    /// (naming id and position), and out-of-range labels.
    pub fn encode(&self, seqs: &[TokenSequence]) -> Result<EncodedBatch> {
        if seqs.is_empty() {
            return Err(Error::Empty {
                what: "batch of sequences",
            });
        }
        let batch = seqs.len();
        let mut seq_len = 0;
        for (sample, s) in seqs.iter().enumerate() {
            let content = s.tokens.iter().filter(|t| **t != PAD_ID).count();
            if content == 0 {
                return Err(Error::Empty {
                    what: "token sequence (no content tokens)",
                });
            }
            for (position, &id) in s.tokens.iter().enumerate() {
                if id >= self.dims.vocab_size {
                    return Err(Error::OutOfVocab {
                        id,
                        position,
                        sample,
                        vocab: self.dims.vocab_size,
                    });
                }
            }
            if s.label >= self.dims.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: self.dims.num_classes,
                });
            }
            seq_len = seq_len.max(s.tokens.len());
        }
        let mut ids = vec![PAD_ID as f64; batch * seq_len];
        let mut mask = vec![0.0; batch * seq_len];
        let mut targets = vec![0.0; batch * self.dims.num_classes];
        let mut labels = Vec::with_capacity(batch);
        for (bi, s) in seqs.iter().enumerate() {
            for (si, &id) in s.tokens.iter().enumerate() {
                ids[bi * seq_len + si] = id as f64;
                if id != PAD_ID {
                    mask[bi * seq_len + si] = 1.0;
                }
            }
            targets[bi * self.dims.num_classes + s.label] = 1.0;
            labels.push(s.label);
        }
        Ok(EncodedBatch {
            ids: Tensor::new(ids, &[batch, seq_len])?,
            mask: Tensor::new(mask, &[batch, seq_len])?,
            targets: Tensor::new(targets, &[batch, self.dims.num_classes])?,
            labels,
            batch,
            seq: seq_len,
        })
    }

    /// Expected perturbation shape for an encoded batch.
    pub fn delta_shape(&self, enc: &EncodedBatch) -> Vec<usize> {
        vec![enc.batch, enc.seq, self.dims.embed_dim]
    }

    fn head(&self, tape: &mut Tape, pooled: &Tensor) -> Result<Tensor> {
        let h = tape.matmul(pooled, &self.w1)?;
        let h = tape.add(&h, &self.b1)?;
        let h = tape.tanh(&h)?;
        let logits = tape.matmul(&h, &self.w2)?;
        tape.add(&logits, &self.b2)
    }

    /// Logits for an encoded batch.
    pub fn forward_encoded(&self, tape: &mut Tape, enc: &EncodedBatch) -> Result<Tensor> {
        let looked = tape.embedding_lookup(&self.embedding, &enc.ids)?;
        let pooled = tape.mean_pool(&looked, &enc.mask)?;
        self.head(tape, &pooled)
    }

    /// Logits with an additive perturbation on the looked-up embeddings.
    /// `delta` must have shape `[batch, seq, embed_dim]`. With a zero
    /// delta this reproduces [`Self::forward_encoded`] bit-exactly.
    pub fn forward_perturbed_encoded(
        &self,
        tape: &mut Tape,
        enc: &EncodedBatch,
        delta: &Tensor,
    ) -> Result<Tensor> {
        let expected = self.delta_shape(enc);
        if delta.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "forward_perturbed",
                shapes: vec![delta.shape(), expected],
            });
        }
        let looked = tape.embedding_lookup(&self.embedding, &enc.ids)?;
        let perturbed = tape.add(&looked, delta)?;
        let pooled = tape.mean_pool(&perturbed, &enc.mask)?;
        self.head(tape, &pooled)
    }

    /// Convenience forward over raw sequences on a throwaway tape.
    pub fn forward(&self, seqs: &[TokenSequence]) -> Result<Tensor> {
        let enc = self.encode(seqs)?;
        let mut tape = Tape::new();
        self.forward_encoded(&mut tape, &enc)
    }

    /// Perturbed forward over raw sequences on a throwaway tape.
    pub fn forward_perturbed(&self, seqs: &[TokenSequence], delta: &Tensor) -> Result<Tensor> {
        let enc = self.encode(seqs)?;
        let mut tape = Tape::new();
        self.forward_perturbed_encoded(&mut tape, &enc, delta)
    }

    /// Predicted class: index of the maximal logit, ties broken by the
    /// lowest index.
    pub fn predict(&self, seq: &TokenSequence) -> Result<usize> {
        let logits = self.forward(core::slice::from_ref(seq))?;
        Ok(argmax_row(&logits.data()))
    }

    pub fn predict_batch(&self, seqs: &[TokenSequence]) -> Result<Vec<usize>> {
        let logits = self.forward(seqs)?;
        let classes = self.dims.num_classes;
        Ok(logits
            .data()
            .chunks(classes)
            .map(argmax_row)
            .collect())
    }
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// A batch of individual tokens encoded for the tagger.
pub struct TaggedBatch {
    pub ids: Tensor,
    pub targets: Tensor,
    pub tags: Vec<usize>,
    pub count: usize,
}

/// Per-token tagger: embedding table, one hidden tanh layer (the probed
/// layer for neuron analysis), and a linear tag head. Each token is
/// classified independently of its context.
pub struct EmbeddingTagger {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_tags: usize,
    pub embedding: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl EmbeddingTagger {
    pub fn new(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        num_tags: usize,
        rng: &mut DetRng,
    ) -> Self {
        let embedding = init_embedding(rng, vocab_size, embed_dim);
        let (w1, b1) = init_dense(rng, embed_dim, hidden_dim);
        let (w2, b2) = init_dense(rng, hidden_dim, num_tags);
        Self {
            vocab_size,
            embed_dim,
            hidden_dim,
            num_tags,
            embedding,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        vec![
            self.embedding.clone(),
            self.w1.clone(),
            self.b1.clone(),
            self.w2.clone(),
            self.b2.clone(),
        ]
    }

    pub fn named_parameters(&self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("embedding", self.embedding.clone()),
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("b2", self.b2.clone()),
        ]
    }

    pub fn zero_grads(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    pub fn encode(&self, tokens: &[usize], tags: &[usize]) -> Result<TaggedBatch> {
        if tokens.is_empty() {
            return Err(Error::Empty {
                what: "token batch",
            });
        }
        if tokens.len() != tags.len() {
            return Err(Error::ShapeMismatch {
                op: "tagger_encode",
                shapes: vec![vec![tokens.len()], vec![tags.len()]],
            });
        }
        let n = tokens.len();
        let mut ids = vec![0.0; n];
        let mut targets = vec![0.0; n * self.num_tags];
        for (i, (&tok, &tag)) in tokens.iter().zip(tags).enumerate() {
            if tok >= self.vocab_size {
                return Err(Error::OutOfVocab {
                    id: tok,
                    position: i,
                    sample: 0,
                    vocab: self.vocab_size,
                });
            }
            if tag >= self.num_tags {
                return Err(Error::LabelOutOfRange {
                    label: tag,
                    classes: self.num_tags,
                });
            }
            ids[i] = tok as f64;
            targets[i * self.num_tags + tag] = 1.0;
        }
        Ok(TaggedBatch {
            ids: Tensor::new(ids, &[n])?,
            targets: Tensor::new(targets, &[n, self.num_tags])?,
            tags: tags.to_vec(),
            count: n,
        })
    }

    /// Hidden activations and tag logits for a batch of token ids.
    pub fn hidden_and_logits(
        &self,
        tape: &mut Tape,
        ids: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let embedded = tape.embedding_lookup(&self.embedding, ids)?;
        let h = tape.matmul(&embedded, &self.w1)?;
        let h = tape.add(&h, &self.b1)?;
        let hidden = tape.tanh(&h)?;
        let logits = tape.matmul(&hidden, &self.w2)?;
        let logits = tape.add(&logits, &self.b2)?;
        Ok((hidden, logits))
    }

    /// Tag logits with a per-token embedding perturbation `[n, embed_dim]`.
    pub fn logits_perturbed(
        &self,
        tape: &mut Tape,
        ids: &Tensor,
        delta: &Tensor,
    ) -> Result<Tensor> {
        let expected = vec![ids.numel(), self.embed_dim];
        if delta.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "tagger_forward_perturbed",
                shapes: vec![delta.shape(), expected],
            });
        }
        let embedded = tape.embedding_lookup(&self.embedding, ids)?;
        let perturbed = tape.add(&embedded, delta)?;
        let h = tape.matmul(&perturbed, &self.w1)?;
        let h = tape.add(&h, &self.b1)?;
        let hidden = tape.tanh(&h)?;
        let logits = tape.matmul(&hidden, &self.w2)?;
        tape.add(&logits, &self.b2)
    }

    pub fn predict_tags(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let ids = Tensor::new(tokens.iter().map(|&t| t as f64).collect(), &[tokens.len()])?;
        let mut tape = Tape::new();
        let (_, logits) = self.hidden_and_logits(&mut tape, &ids)?;
        Ok(logits.data().chunks(self.num_tags).map(argmax_row).collect())
    }
}

/// The one-dimensional linear model `y = theta * x`.
pub struct LinearRegressor {
    pub theta: Tensor,
}

impl LinearRegressor {
    pub fn new(theta: f64) -> Self {
        Self {
            theta: Tensor::param(vec![theta], &[1]).expect("scalar theta"),
        }
    }

    pub fn theta_value(&self) -> f64 {
        self.theta.scalar_value()
    }

    /// Predictions for a vector of inputs: `theta * xs`.
    pub fn forward(&self, tape: &mut Tape, xs: &Tensor) -> Result<Tensor> {
        tape.mul(xs, &self.theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn tiny_model(seed: u64) -> EmbeddingClassifier {
        let mut rng = DetRng::from_seed(seed);
        EmbeddingClassifier::new(
            ModelDims {
                vocab_size: 12,
                embed_dim: 4,
                hidden_dim: 6,
                num_classes: 3,
            },
            &mut rng,
        )
    }

    fn seqs(raw: &[(&[usize], usize)]) -> Vec<TokenSequence> {
        raw.iter()
            .map(|(toks, label)| TokenSequence::new(toks.to_vec(), *label))
            .collect()
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let model = tiny_model(1);
        model.w2.map_data(|d| d.fill(0.0));
        model.b2.map_data(|d| d.fill(0.0));
        let logits = model
            .forward(&seqs(&[(&[2, 3, 4], 0)]))
            .unwrap()
            .data();
        for v in &logits {
            assert_eq!(*v, logits[0]);
        }
    }

    #[test]
    fn single_token_pool_is_that_row() {
        let model = tiny_model(2);
        let enc = model.encode(&seqs(&[(&[5], 0)])).unwrap();
        let mut tape = Tape::new();
        let looked = tape
            .embedding_lookup(&model.embedding, &enc.ids)
            .unwrap();
        let pooled = tape.mean_pool(&looked, &enc.mask).unwrap();
        let row = model
            .embedding
            .with_data(|d| d[5 * 4..6 * 4].to_vec());
        assert_eq!(pooled.data(), row);
    }

    #[test]
    fn permuting_tokens_leaves_logits_unchanged() {
        let model = tiny_model(3);
        let a = model.forward(&seqs(&[(&[2, 5, 7, 9], 0)])).unwrap().data();
        let b = model.forward(&seqs(&[(&[9, 2, 7, 5], 0)])).unwrap().data();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_delta_matches_forward_bit_exactly() {
        let model = tiny_model(4);
        let batch = seqs(&[(&[2, 3], 1), (&[4, 5, 6], 0)]);
        let enc = model.encode(&batch).unwrap();
        let clean = model.forward(&batch).unwrap().data();
        let delta = Tensor::zeros(&model.delta_shape(&enc));
        let perturbed = model.forward_perturbed(&batch, &delta).unwrap().data();
        for (c, p) in clean.iter().zip(&perturbed) {
            assert_eq!(c.to_bits(), p.to_bits());
        }
    }

    #[test]
    fn delta_on_padding_position_is_inert() {
        let model = tiny_model(5);
        // Two sequences: the first is shorter, so position 2 of sample 0
        // is padding.
        let batch = seqs(&[(&[2, 3], 1), (&[4, 5, 6], 0)]);
        let enc = model.encode(&batch).unwrap();
        let clean = model.forward(&batch).unwrap().data();
        let shape = model.delta_shape(&enc);
        let mut data = vec![0.0; shape.iter().product()];
        // Perturb only sample 0, position 2 (padding).
        for d in 0..model.dims.embed_dim {
            data[(0 * shape[1] + 2) * shape[2] + d] = 7.5;
        }
        let delta = Tensor::new(data, &shape).unwrap();
        let perturbed = model.forward_perturbed(&batch, &delta).unwrap().data();
        for (c, p) in clean.iter().zip(&perturbed) {
            assert_eq!(c.to_bits(), p.to_bits());
        }
    }

    #[test]
    fn oov_id_is_reported_with_location() {
        let model = tiny_model(6);
        let err = model
            .forward(&seqs(&[(&[2, 3], 0), (&[4, 99, 6], 1)]))
            .unwrap_err();
        assert_eq!(
            err,
            Error::OutOfVocab {
                id: 99,
                position: 1,
                sample: 1,
                vocab: 12
            }
        );
    }

    #[test]
    fn predict_breaks_ties_toward_lowest_index() {
        assert_eq!(argmax_row(&[0.1, 0.9]), 1);
        assert_eq!(argmax_row(&[0.5, 0.5]), 0);
        assert_eq!(argmax_row(&[0.0, 0.0, 0.0]), 0);

        let model = tiny_model(7);
        model.w2.map_data(|d| d.fill(0.0));
        model.b2.map_data(|d| d.fill(0.0));
        assert_eq!(model.predict(&TokenSequence::new(vec![2, 3], 0)).unwrap(), 0);
    }

    #[test]
    fn classifier_gradients_pass_fd_for_theta_and_delta() {
        let model = tiny_model(8);
        let batch = seqs(&[(&[2, 3, 4], 1), (&[5, 6], 0)]);
        let enc = model.encode(&batch).unwrap();

        // Parameter leaves.
        for (name, param) in model.named_parameters() {
            let err = finite_difference_check(
                |tape, _p| {
                    let logits = model.forward_encoded(tape, &enc)?;
                    tape.softmax_cross_entropy(&logits, &enc.targets)
                },
                &param,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{name}: err {err}");
        }

        // Perturbation leaf.
        let delta = Tensor::param(
            vec![0.01; model.delta_shape(&enc).iter().product()],
            &model.delta_shape(&enc),
        )
        .unwrap();
        let err = finite_difference_check(
            |tape, d| {
                let logits = model.forward_perturbed_encoded(tape, &enc, d)?;
                tape.softmax_cross_entropy(&logits, &enc.targets)
            },
            &delta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "delta: err {err}");
    }

    #[test]
    fn tiny_delta_along_gradient_increases_loss() {
        let model = tiny_model(9);
        let batch = seqs(&[(&[2, 3, 4], 1)]);
        let enc = model.encode(&batch).unwrap();
        let shape = model.delta_shape(&enc);
        let delta = Tensor::param(vec![0.0; shape.iter().product()], &shape).unwrap();

        let mut tape = Tape::new();
        let logits = model
            .forward_perturbed_encoded(&mut tape, &enc, &delta)
            .unwrap();
        let loss = tape.softmax_cross_entropy(&logits, &enc.targets).unwrap();
        let base = loss.scalar_value();
        tape.backward(&loss).unwrap();
        let grad = delta.grad().unwrap();
        let norm = fmath::sqrt(grad.iter().map(|g| g * g).sum());
        assert!(norm > 0.0);

        let step = 1e-4;
        let stepped: Vec<f64> = grad.iter().map(|g| step * g / norm).collect();
        let delta2 = Tensor::new(stepped, &shape).unwrap();
        let mut tape = Tape::new();
        let logits = model
            .forward_perturbed_encoded(&mut tape, &enc, &delta2)
            .unwrap();
        let loss2 = tape
            .softmax_cross_entropy(&logits, &enc.targets)
            .unwrap()
            .scalar_value();
        assert!(
            loss2 >= base - 1e-12,
            "first-order ascent failed: {base} -> {loss2}"
        );
    }

    #[test]
    fn tagger_hidden_is_deterministic_per_token() {
        let mut rng = DetRng::from_seed(10);
        let tagger = EmbeddingTagger::new(10, 4, 6, 3, &mut rng);
        let ids = Tensor::new(vec![3.0, 5.0, 3.0], &[3]).unwrap();
        let mut tape = Tape::new();
        let (hidden, logits) = tagger.hidden_and_logits(&mut tape, &ids).unwrap();
        assert_eq!(hidden.shape(), vec![3, 6]);
        assert_eq!(logits.shape(), vec![3, 3]);
        let h = hidden.data();
        // Identical tokens get identical activation vectors.
        assert_eq!(&h[0..6], &h[12..18]);
    }

    #[test]
    fn regressor_prediction_is_theta_times_x() {
        let model = LinearRegressor::new(0.5);
        let xs = Tensor::new(vec![1.0, 2.0, -4.0], &[3]).unwrap();
        let mut tape = Tape::new();
        let pred = model.forward(&mut tape, &xs).unwrap();
        assert_eq!(pred.data(), vec![0.5, 1.0, -2.0]);
    }

    #[test]
    fn empty_sequence_rejected() {
        let model = tiny_model(11);
        let err = model.forward(&seqs(&[(&[], 0)])).unwrap_err();
        assert!(matches!(err, Error::Empty { .. }));
    }
}
