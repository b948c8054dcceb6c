//! Sentence encoder, the main classification head and the two auxiliary
//! heads (word cloze and conditional sentiment prediction).
//!
//! Parameter shapes, with `d` the hidden size, `C` the sentence classes,
//! `Y` = 2 ascription labels and `Z` = 2 word polarities:
//!
//! | name                 | shape       |
//! |----------------------|-------------|
//! | `embedding`          | `V x d`     |
//! | `polarity_embedding` | `Z x d`     |
//! | `encoder.weight`     | `d x d`     |
//! | `encoder.bias`       | `d`         |
//! | `main.weight`        | `d x C`     |
//! | `main.bias`          | `C`         |
//! | `swc.weight`         | `Y·d x C·Y` |
//! | `swc.bias`           | `C·Y`       |
//! | `csp.weight`         | `d x Z·C`   |
//! | `csp.bias`           | `Z·C`       |
//! | `combine.weight`     | `2 x 1`     |
//! | `combine.bias`       | `1`         |
//!
//! The cloze head sees `h` concatenated with `e + e'` (input width `2d`);
//! the conditional head sees `h + e + e'` (input width `d`).

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PAD_ID;
use crate::diffgraph::{GraphError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::lexicon::Polarity;

/// Number of ascription labels (word in sentence or not).
pub const ASCRIPTION_LABELS: usize = 2;
/// Number of word polarities.
pub const POLARITY_LABELS: usize = 2;

const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing parameter `{0}`")]
    Missing(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub classes: usize,
}

impl ModelConfig {
    /// Expected `(name, shape)` for every parameter, in registration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (v, d, c) = (self.vocab_size, self.dim, self.classes);
        let (y, z) = (ASCRIPTION_LABELS, POLARITY_LABELS);
        vec![
            ("embedding", vec![v, d]),
            ("polarity_embedding", vec![z, d]),
            ("encoder.weight", vec![d, d]),
            ("encoder.bias", vec![d]),
            ("main.weight", vec![d, c]),
            ("main.bias", vec![c]),
            ("swc.weight", vec![y * d, c * y]),
            ("swc.bias", vec![c * y]),
            ("csp.weight", vec![d, z * c]),
            ("csp.bias", vec![z * c]),
            ("combine.weight", vec![2, 1]),
            ("combine.bias", vec![1]),
        ]
    }
}

/// Handles of all model parameters.
#[derive(Clone, Copy, Debug)]
pub struct ParamIds {
    pub embedding: ParamId,
    pub polarity_embedding: ParamId,
    pub encoder_weight: ParamId,
    pub encoder_bias: ParamId,
    pub main_weight: ParamId,
    pub main_bias: ParamId,
    pub swc_weight: ParamId,
    pub swc_bias: ParamId,
    pub csp_weight: ParamId,
    pub csp_bias: ParamId,
    pub combine_weight: ParamId,
    pub combine_bias: ParamId,
}

impl ParamIds {
    fn resolve(store: &ParamStore) -> Result<Self, ModelError> {
        let get = |name: &str| store.find(name).ok_or_else(|| ModelError::Missing(name.to_string()));
        Ok(Self {
            embedding: get("embedding")?,
            polarity_embedding: get("polarity_embedding")?,
            encoder_weight: get("encoder.weight")?,
            encoder_bias: get("encoder.bias")?,
            main_weight: get("main.weight")?,
            main_bias: get("main.bias")?,
            swc_weight: get("swc.weight")?,
            swc_bias: get("swc.bias")?,
            csp_weight: get("csp.weight")?,
            csp_bias: get("csp.bias")?,
            combine_weight: get("combine.weight")?,
            combine_bias: get("combine.bias")?,
        })
    }

    /// Parameters used only by the auxiliary objectives.
    pub fn auxiliary(&self) -> [ParamId; 7] {
        [
            self.polarity_embedding,
            self.swc_weight,
            self.swc_bias,
            self.csp_weight,
            self.csp_bias,
            self.combine_weight,
            self.combine_bias,
        ]
    }

    /// Parameters on the inference path.
    pub fn inference(&self) -> [ParamId; 5] {
        [
            self.embedding,
            self.encoder_weight,
            self.encoder_bias,
            self.main_weight,
            self.main_bias,
        ]
    }
}

/// Maps a padded id sequence to the sentence state `h`.
pub trait SentenceEncoder {
    fn encode(&self, tape: &mut Tape<'_>, ids: &[usize], len: usize) -> Result<Var, ModelError>;
}

/// `h = tanh(W · mean(E[ids[..len]]) + b)`.
#[derive(Clone, Copy, Debug)]
pub struct MeanPoolEncoder {
    pub embedding: ParamId,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SentenceEncoder for MeanPoolEncoder {
    fn encode(&self, tape: &mut Tape<'_>, ids: &[usize], len: usize) -> Result<Var, ModelError> {
        if len == 0 || ids[..len.min(ids.len())].iter().all(|&i| i == PAD_ID) {
            return Err(ModelError::Usage("cannot encode an all-padding sequence".into()));
        }
        if len > ids.len() {
            return Err(ModelError::Usage(format!("true length {len} exceeds {} ids", ids.len())));
        }
        let rows = tape.embed_gather(self.embedding, &ids[..len])?;
        let pooled = tape.mean_pool(rows, len)?;
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        let pre = tape.affine(w, pooled, b)?;
        Ok(tape.tanh(pre)?)
    }
}

#[derive(Clone, Debug)]
pub struct KesaModel {
    config: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
    encoder: MeanPoolEncoder,
}

impl KesaModel {
    /// Weights and embeddings uniform in [-0.1, 0.1], biases zero, padding
    /// row zero. Draw order is fixed so every configuration sharing a seed
    /// starts from the same point.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE)).collect()
            };
            let mut t = Tensor::new(shape, data).expect("shape from config");
            if name == "embedding" {
                t.row_mut(PAD_ID).iter_mut().for_each(|v| *v = 0.0);
                store.add_table(name, t);
            } else if name == "polarity_embedding" {
                store.add_table(name, t);
            } else {
                store.add(name, t);
            }
        }
        Self::from_store(config, store).expect("freshly built store is valid")
    }

    /// Wraps an existing store after checking every shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self, ModelError> {
        if config.vocab_size < 2 || config.dim == 0 || config.classes < 2 {
            return Err(ModelError::Usage(format!("invalid model config {config:?}")));
        }
        for (name, expected) in config.param_shapes() {
            let id = store.find(name).ok_or_else(|| ModelError::Missing(name.to_string()))?;
            let got = store.get(id).shape();
            if got != expected.as_slice() {
                return Err(ModelError::Shape {
                    name: name.to_string(),
                    expected,
                    got: got.to_vec(),
                });
            }
        }
        let ids = ParamIds::resolve(&store)?;
        let encoder = MeanPoolEncoder {
            embedding: ids.embedding,
            weight: ids.encoder_weight,
            bias: ids.encoder_bias,
        };
        Ok(Self {
            config,
            store,
            ids,
            encoder,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn encode_sentence(&self, tape: &mut Tape<'_>, ids: &[usize], len: usize) -> Result<Var, ModelError> {
        self.encoder.encode(tape, ids, len)
    }

    /// Main-task class logits `W₁ᵀh + b₁`.
    pub fn main_logits(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var, ModelError> {
        let w = tape.param(self.ids.main_weight)?;
        let b = tape.param(self.ids.main_bias)?;
        Ok(tape.affine(w, h, b)?)
    }

    /// Main-task class distribution.
    pub fn main_head(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var, ModelError> {
        let z = self.main_logits(tape, h)?;
        Ok(tape.softmax(z)?)
    }

    /// `E[word] + E_p[polarity]` as a `d`-vector.
    fn word_channel(&self, tape: &mut Tape<'_>, word_id: usize, polarity: Polarity) -> Result<Var, ModelError> {
        let d = self.config.dim;
        let e = tape.embed_gather(self.ids.embedding, &[word_id])?;
        let e = tape.reshape(e, &[d])?;
        let p = tape.embed_gather(self.ids.polarity_embedding, &[polarity.index()])?;
        let p = tape.reshape(p, &[d])?;
        Ok(tape.add(e, p)?)
    }

    /// Raw cloze logits over the `(sentence label, ascription)` grid,
    /// row-major, length `C·Y`.
    pub fn swc_head(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        word_id: usize,
        polarity: Polarity,
    ) -> Result<Var, ModelError> {
        let channel = self.word_channel(tape, word_id, polarity)?;
        let x = tape.concat(h, channel)?;
        let w = tape.param(self.ids.swc_weight)?;
        let b = tape.param(self.ids.swc_bias)?;
        Ok(tape.affine(w, x, b)?)
    }

    /// Raw conditional-prediction logits over the `(word polarity, sentence
    /// label)` grid, row-major, length `Z·C`.
    pub fn csp_head(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        word_id: usize,
        polarity: Polarity,
    ) -> Result<Var, ModelError> {
        let channel = self.word_channel(tape, word_id, polarity)?;
        let x = tape.add(h, channel)?;
        let w = tape.param(self.ids.csp_weight)?;
        let b = tape.param(self.ids.csp_bias)?;
        Ok(tape.affine(w, x, b)?)
    }

    /// Main-task class probabilities for one padded id sequence.
    pub fn predict(&self, ids: &[usize], len: usize) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new(&self.store);
        let h = self.encode_sentence(&mut tape, ids, len)?;
        let p = self.main_head(&mut tape, h)?;
        Ok(tape.value(p).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::softmax;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(v: usize, d: usize, c: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            dim: d,
            classes: c,
        }
    }

    fn fill(model: &mut KesaModel, id: ParamId, f: impl Fn(usize) -> f64) {
        model
            .params_mut()
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = f(i));
    }

    fn zeroed(cfg: ModelConfig) -> KesaModel {
        let mut m = KesaModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let ids: Vec<ParamId> = m.params().ids().collect();
        for id in ids {
            fill(&mut m, id, |_| 0.0);
        }
        m
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = config(10, 4, 2);
        let a = KesaModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = KesaModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let ids = *a.ids();
        assert_eq!(a.params().get(ids.swc_weight).shape(), &[8, 4]);
        assert_eq!(a.params().get(ids.csp_weight).shape(), &[4, 4]);
        assert_eq!(a.params().get(ids.combine_weight).shape(), &[2, 1]);
        assert_eq!(a.params().get(ids.combine_bias).data(), &[0.0]);
        assert!(a.params().get(ids.embedding).row(PAD_ID).iter().all(|&v| v == 0.0));
        for ((_, _, x), (_, _, y)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x, y);
        }
        let all_in_range = a
            .params()
            .iter()
            .all(|(_, _, t)| t.data().iter().all(|v| v.abs() <= INIT_RANGE));
        assert!(all_in_range);
    }

    #[test]
    fn from_store_rejects_wrong_shapes() {
        let cfg = config(10, 4, 2);
        let m = KesaModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let err = KesaModel::from_store(config(10, 4, 3), m.params().clone()).unwrap_err();
        assert!(matches!(err, ModelError::Shape { .. }), "{err}");
    }

    #[test]
    fn zero_embedding_gives_zero_state() {
        let mut m = KesaModel::init(config(6, 3, 2), &mut ChaCha8Rng::seed_from_u64(1));
        let e = m.ids().embedding;
        fill(&mut m, e, |_| 0.0);
        let mut tape = Tape::new(m.params());
        let h = m.encode_sentence(&mut tape, &[4, 0, 0], 1).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_permutation_and_padding_invariant() {
        let m = KesaModel::init(config(8, 5, 2), &mut ChaCha8Rng::seed_from_u64(2));
        let state = |ids: &[usize], len| {
            let mut tape = Tape::new(m.params());
            let h = m.encode_sentence(&mut tape, ids, len).unwrap();
            tape.value(h).data().to_vec()
        };
        let a = state(&[2, 5, 7, 0], 3);
        let b = state(&[7, 2, 5, 0, 0, 0], 3);
        let c = state(&[5, 7, 2, 3, 4, 6], 3);
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
            assert_abs_diff_eq!(x, z, epsilon = 1e-15);
        }
        let mut tape = Tape::new(m.params());
        assert!(m.encode_sentence(&mut tape, &[0, 0], 2).is_err());
        assert!(m.encode_sentence(&mut tape, &[3], 0).is_err());
    }

    #[test]
    fn encoder_matches_hand_computation() {
        // V = 4, d = 2: E[2] = (1, 2), E[3] = (3, -2); W = [[0.5, -1], [0.25, 2]], b = (0.1, -0.1).
        let mut m = zeroed(config(4, 2, 2));
        let ids = *m.ids();
        fill(&mut m, ids.embedding, |i| [0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, -2.0][i]);
        fill(&mut m, ids.encoder_weight, |i| [0.5, -1.0, 0.25, 2.0][i]);
        fill(&mut m, ids.encoder_bias, |i| [0.1, -0.1][i]);
        let mut tape = Tape::new(m.params());
        let h = m.encode_sentence(&mut tape, &[2, 3], 2).unwrap();
        // mean = (2, 0); pre = (2*0.5 + 0*0.25 + 0.1, 2*-1 + 0*2 - 0.1) = (1.1, -2.1)
        let got = tape.value(h).data();
        assert_abs_diff_eq!(got[0], 1.1f64.tanh(), epsilon = 1e-15);
        assert_abs_diff_eq!(got[1], (-2.1f64).tanh(), epsilon = 1e-15);
    }

    #[test]
    fn main_head_cases() {
        let m = zeroed(config(5, 3, 4));
        let mut tape = Tape::new(m.params());
        let h = tape.constant(Tensor::vector(vec![0.3, -0.2, 0.9])).unwrap();
        let p = m.main_head(&mut tape, h).unwrap();
        assert!(tape.value(p).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let mut m = zeroed(config(5, 3, 2));
        let ids = *m.ids();
        fill(&mut m, ids.main_bias, |_| 1.0);
        let mut tape = Tape::new(m.params());
        let h = tape.constant(Tensor::vector(vec![0.3, -0.2, 0.9])).unwrap();
        let p = m.main_head(&mut tape, h).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

        let m = KesaModel::init(config(5, 3, 3), &mut ChaCha8Rng::seed_from_u64(9));
        let hv = [0.4, -0.7, 0.2];
        let mut tape = Tape::new(m.params());
        let h = tape.constant(Tensor::vector(hv.to_vec())).unwrap();
        let p = m.main_head(&mut tape, h).unwrap();
        let w = m.params().get(m.ids().main_weight);
        let b = m.params().get(m.ids().main_bias).data();
        let logits: Vec<f64> = (0..3)
            .map(|j| (0..3).map(|i| hv[i] * w.data()[i * 3 + j]).sum::<f64>() + b[j])
            .collect();
        for (x, y) in tape.value(p).data().iter().zip(softmax(&logits)) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn aux_heads_zero_params_and_lengths() {
        let m = zeroed(config(6, 3, 5));
        let mut tape = Tape::new(m.params());
        let h = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let swc = m.swc_head(&mut tape, h, 4, Polarity::Positive).unwrap();
        assert_eq!(tape.value(swc).data(), &[0.0; 10]);
        let m = zeroed(config(6, 3, 2));
        let mut tape = Tape::new(m.params());
        let h = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let csp = m.csp_head(&mut tape, h, 4, Polarity::Negative).unwrap();
        assert_eq!(tape.value(csp).data(), &[0.0; 4]);
    }

    /// Recomputes both heads with plain loops from the raw parameter arrays.
    #[test]
    fn aux_heads_match_hand_affine() {
        let cfg = config(6, 3, 2);
        let m = KesaModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let p = m.params();
        let ids = *m.ids();
        let hv = [0.2, -0.5, 0.8];
        let (word, pol) = (3usize, Polarity::Negative);
        let e = p.get(ids.embedding).row(word).to_vec();
        let ep = p.get(ids.polarity_embedding).row(pol.index()).to_vec();
        let channel: Vec<f64> = e.iter().zip(&ep).map(|(a, b)| a + b).collect();
        let affine = |x: &[f64], w: &Tensor, b: &[f64]| -> Vec<f64> {
            let out = w.shape()[1];
            (0..out)
                .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.data()[i * out + j]).sum::<f64>() + b[j])
                .collect()
        };
        let swc_in: Vec<f64> = hv.iter().chain(&channel).copied().collect();
        let swc_expected = affine(&swc_in, p.get(ids.swc_weight), p.get(ids.swc_bias).data());
        let csp_in: Vec<f64> = hv.iter().zip(&channel).map(|(a, b)| a + b).collect();
        let csp_expected = affine(&csp_in, p.get(ids.csp_weight), p.get(ids.csp_bias).data());

        let mut tape = Tape::new(p);
        let h = tape.constant(Tensor::vector(hv.to_vec())).unwrap();
        let swc = m.swc_head(&mut tape, h, word, pol).unwrap();
        let csp = m.csp_head(&mut tape, h, word, pol).unwrap();
        for (a, b) in tape.value(swc).data().iter().zip(&swc_expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        for (a, b) in tape.value(csp).data().iter().zip(&csp_expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn swc_word_channel_is_additive() {
        let m = KesaModel::init(config(6, 3, 2), &mut ChaCha8Rng::seed_from_u64(4));
        let ids = *m.ids();
        let p = m.params();
        let mut tape = Tape::new(p);
        let h = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        let a = m.swc_head(&mut tape, h, 2, Polarity::Positive).unwrap();
        let b = m.swc_head(&mut tape, h, 5, Polarity::Negative).unwrap();
        let delta: Vec<f64> = (0..3)
            .map(|k| {
                p.get(ids.embedding).row(2)[k] + p.get(ids.polarity_embedding).row(1)[k]
                    - p.get(ids.embedding).row(5)[k]
                    - p.get(ids.polarity_embedding).row(0)[k]
            })
            .collect();
        let w = p.get(ids.swc_weight);
        for j in 0..4 {
            let expected: f64 = (0..3).map(|k| delta[k] * w.data()[(3 + k) * 4 + j]).sum();
            let got = tape.value(a).data()[j] - tape.value(b).data()[j];
            assert_abs_diff_eq!(got, expected, epsilon = 1e-14);
        }
    }
}
