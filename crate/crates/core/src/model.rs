//! Whole-recognizer configuration and parameter container.
//!
//! The model owns plain tensors; a forward pass binds them onto a fresh
//! graph. `visit_params` walks every tensor in the same order `bind`
//! registers them, which is what keeps optimizer state, checkpoints, and
//! gradient maps aligned by name.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::decoder::{DecoderParams, DecoderVars};
use crate::encoder::{ChunkConfig, EncodeError, EncoderParams, EncoderVars};
use crate::tensor::{self, Graph, Tensor, TensorError, Var};

/// CTC blank class; class ids used as labels start above it.
pub const BLANK: usize = 0;
/// Shared sentence start/end symbol on the attention side.
pub const BOUNDARY: usize = 1;
/// Layer normalization stabilizer used everywhere.
pub const LN_EPS: f64 = 1e-6;

/// Forward-pass switches. Training applies dropout and perturbs stopping
/// logits; evaluation is deterministic and adds nothing to the tape.
pub enum Phase<'r> {
    Train {
        dropout: f64,
        mta_noise: bool,
        rng: &'r mut ChaCha8Rng,
    },
    Eval,
}

impl Phase<'_> {
    pub(crate) fn apply_dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        match self {
            Phase::Train { dropout, rng, .. } if *dropout > 0.0 => {
                g.dropout(x, *dropout, &mut **rng)
            }
            _ => x,
        }
    }

    /// Standard-normal logit noise for the stopping probabilities, train
    /// phase only.
    pub(crate) fn mta_noise_var(&mut self, g: &mut Graph, n: usize, m: usize) -> Option<Var> {
        match self {
            Phase::Train {
                mta_noise: true,
                rng,
                ..
            } => {
                let data: Vec<f64> = (0..n * m)
                    .map(|_| StandardNormal.sample(&mut **rng))
                    .collect();
                Some(g.leaf(Tensor::matrix(n, m, data).unwrap()))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Sizes and chunking for one recognizer instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Output classes including blank (0) and the boundary symbol (1).
    pub vocab: usize,
    pub feat_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub chunk: ChunkConfig,
}

impl ModelConfig {
    /// Small desk-scale defaults; only vocabulary and feature width vary
    /// with the data.
    pub fn desk(vocab: usize, feat_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab,
            feat_dim,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            enc_layers: 2,
            dec_layers: 2,
            conv_channels: 4,
            conv_kernel: 3,
            chunk: ChunkConfig::new(16, 16, 16).unwrap(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab < 3 {
            return Err(ModelError::BadConfig(
                "vocab must cover blank, boundary, and at least one token",
            ));
        }
        if self.feat_dim == 0 {
            return Err(ModelError::BadConfig("feature width must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::BadConfig(
                "model width must be a positive multiple of the head count",
            ));
        }
        if self.d_ff == 0 {
            return Err(ModelError::BadConfig("feed-forward width must be positive"));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(ModelError::BadConfig("need at least one layer per stack"));
        }
        if self.conv_channels == 0 {
            return Err(ModelError::BadConfig("front-end channels must be positive"));
        }
        Ok(())
    }
}

/// All trainable tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    /// Frame classifier for the CTC branch, `d_model x vocab` plus bias.
    pub ctc_w: Tensor,
    pub ctc_b: Tensor,
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
    pub ctc_w: Var,
    pub ctc_b: Var,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(
            cfg.feat_dim,
            cfg.conv_channels,
            cfg.conv_kernel,
            cfg.d_model,
            cfg.heads,
            cfg.d_ff,
            cfg.enc_layers,
            &mut rng,
        )?;
        let decoder = DecoderParams::init(
            cfg.vocab,
            cfg.d_model,
            cfg.heads,
            cfg.d_ff,
            cfg.dec_layers,
            &mut rng,
        );
        let ctc_w = crate::attention::init_matrix(cfg.d_model, cfg.vocab, &mut rng);
        let ctc_b = crate::attention::init_vector(cfg.vocab, 0.0);
        Ok(Model {
            cfg,
            encoder,
            decoder,
            ctc_w,
            ctc_b,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(g, "enc"),
            decoder: self.decoder.bind(g, "dec"),
            ctc_w: g.param("ctc_w", &self.ctc_w),
            ctc_b: g.param("ctc_b", &self.ctc_b),
        }
    }

    /// Walk every parameter tensor in bind order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit("enc", f);
        self.decoder.visit("dec", f);
        f("ctc_w", &self.ctc_w);
        f("ctc_b", &self.ctc_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut("enc", f);
        self.decoder.visit_mut("dec", f);
        f("ctc_w", &mut self.ctc_w);
        f("ctc_b", &mut self.ctc_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    /// Log-probability rows for the CTC branch from already-detached
    /// encoder outputs; the pure twin of the tape-side head used in
    /// training.
    pub fn ctc_log_probs(&self, enc: &Tensor) -> Result<Tensor, TensorError> {
        if enc.shape().len() != 2 || enc.cols() != self.cfg.d_model {
            return Err(TensorError::DimMismatch {
                op: "ctc_log_probs",
                lhs: enc.shape().to_vec(),
                rhs: self.ctc_w.shape().to_vec(),
            });
        }
        let (n, vocab) = (enc.rows(), self.cfg.vocab);
        let mut logits = tensor::matmul(enc.data(), n, self.cfg.d_model, self.ctc_w.data(), vocab);
        for r in 0..n {
            for (c, b) in self.ctc_b.data().iter().enumerate() {
                logits[r * vocab + c] += b;
            }
        }
        Tensor::matrix(n, vocab, tensor::log_softmax_rows(&logits, n, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 5,
            feat_dim: 6,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            enc_layers: 2,
            dec_layers: 2,
            conv_channels: 2,
            conv_kernel: 3,
            chunk: ChunkConfig::new(8, 8, 8).unwrap(),
        }
    }

    #[test]
    fn bind_and_visit_agree_on_names_and_order() {
        let model = Model::init(tiny_cfg(), 3).unwrap();
        let mut g = Graph::new();
        model.bind(&mut g);
        let bound: Vec<String> = g.param_vars().iter().map(|(n, _)| n.clone()).collect();
        let mut visited = Vec::new();
        model.visit_params(&mut |name, _| visited.push(name.to_string()));
        assert_eq!(bound, visited);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::init(tiny_cfg(), 7).unwrap();
        let b = Model::init(tiny_cfg(), 7).unwrap();
        let c = Model::init(tiny_cfg(), 8).unwrap();
        let flat = |m: &Model| {
            let mut v = Vec::new();
            m.visit_params(&mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn param_count_sums_tensor_lengths() {
        let model = Model::init(tiny_cfg(), 0).unwrap();
        let mut total = 0;
        model.visit_params(&mut |_, t| total += t.len());
        assert_eq!(model.param_count(), total);
        assert!(total > 0);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = tiny_cfg();
        cfg.vocab = 2;
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
        let mut cfg = tiny_cfg();
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
        let mut cfg = tiny_cfg();
        cfg.enc_layers = 0;
        assert!(matches!(cfg.validate(), Err(ModelError::BadConfig(_))));
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn ctc_head_rows_are_distributions() {
        let model = Model::init(tiny_cfg(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let enc = Tensor::matrix(3, 8, data).unwrap();
        let lp = model.ctc_log_probs(&enc).unwrap();
        for r in 0..3 {
            let sum: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let bad = Tensor::matrix(3, 7, vec![0.0; 21]).unwrap();
        assert!(model.ctc_log_probs(&bad).is_err());
    }

    #[test]
    fn eval_phase_adds_nothing() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = Phase::Eval.apply_dropout(&mut g, x);
        assert_eq!(x, y);
        assert!(Phase::Eval.mta_noise_var(&mut g, 2, 2).is_none());
    }
}
