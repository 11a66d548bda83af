//! Transformer decoder: causal self-attention, monotonic truncated
//! cross-attention over encoder outputs, and a feed-forward block per
//! layer. Training runs all positions in parallel on the tape; decoding
//! advances one position at a time against a possibly still-growing
//! stream of encoder outputs, caching per-layer inputs per hypothesis.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{
    feed_forward, feed_forward_var, init_matrix, init_vector, multi_head_attention,
    multi_head_attention_var, sinusoidal_positions, FeedForwardParams, FeedForwardVars,
    MultiHeadParams, MultiHeadVars,
};
use crate::model::{Phase, LN_EPS};
use crate::mta::{
    mta_attend_var, mta_decode_step, AvailableOutputs, MtaError, MtaParams, MtaStep, MtaVars,
    TruncationState,
};
use crate::tensor::{self, Graph, Mask, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("token id {token} outside the {vocab}-entry vocabulary")]
    BadToken { token: usize, vocab: usize },
    #[error(transparent)]
    Mta(#[from] MtaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub self_attn: MultiHeadParams,
    pub cross_attn: MtaParams,
    pub ff: FeedForwardParams,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub norm3_gain: Tensor,
    pub norm3_bias: Tensor,
}

pub struct DecoderLayerVars {
    self_attn: MultiHeadVars,
    cross_attn: MtaVars,
    ff: FeedForwardVars,
    norm1_gain: Var,
    norm1_bias: Var,
    norm2_gain: Var,
    norm2_bias: Var,
    norm3_gain: Var,
    norm3_bias: Var,
}

impl DecoderLayerParams {
    fn init(d_model: usize, heads: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayerParams {
            self_attn: MultiHeadParams::init(d_model, heads, rng).unwrap(),
            cross_attn: MtaParams::init(d_model, rng),
            ff: FeedForwardParams::init(d_model, d_ff, rng),
            norm1_gain: init_vector(d_model, 1.0),
            norm1_bias: init_vector(d_model, 0.0),
            norm2_gain: init_vector(d_model, 1.0),
            norm2_bias: init_vector(d_model, 0.0),
            norm3_gain: init_vector(d_model, 1.0),
            norm3_bias: init_vector(d_model, 0.0),
        }
    }

    fn bind(&self, g: &mut Graph, prefix: &str) -> DecoderLayerVars {
        DecoderLayerVars {
            self_attn: self.self_attn.bind(g, &format!("{prefix}.attn")),
            cross_attn: self.cross_attn.bind(g, &format!("{prefix}.cross")),
            ff: self.ff.bind(g, &format!("{prefix}.ff")),
            norm1_gain: g.param(&format!("{prefix}.norm1_gain"), &self.norm1_gain),
            norm1_bias: g.param(&format!("{prefix}.norm1_bias"), &self.norm1_bias),
            norm2_gain: g.param(&format!("{prefix}.norm2_gain"), &self.norm2_gain),
            norm2_bias: g.param(&format!("{prefix}.norm2_bias"), &self.norm2_bias),
            norm3_gain: g.param(&format!("{prefix}.norm3_gain"), &self.norm3_gain),
            norm3_bias: g.param(&format!("{prefix}.norm3_bias"), &self.norm3_bias),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.self_attn.visit(&format!("{prefix}.attn"), f);
        self.cross_attn.visit(&format!("{prefix}.cross"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
        f(&format!("{prefix}.norm1_gain"), &self.norm1_gain);
        f(&format!("{prefix}.norm1_bias"), &self.norm1_bias);
        f(&format!("{prefix}.norm2_gain"), &self.norm2_gain);
        f(&format!("{prefix}.norm2_bias"), &self.norm2_bias);
        f(&format!("{prefix}.norm3_gain"), &self.norm3_gain);
        f(&format!("{prefix}.norm3_bias"), &self.norm3_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.self_attn.visit_mut(&format!("{prefix}.attn"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
        f(&format!("{prefix}.norm1_gain"), &mut self.norm1_gain);
        f(&format!("{prefix}.norm1_bias"), &mut self.norm1_bias);
        f(&format!("{prefix}.norm2_gain"), &mut self.norm2_gain);
        f(&format!("{prefix}.norm2_bias"), &mut self.norm2_bias);
        f(&format!("{prefix}.norm3_gain"), &mut self.norm3_gain);
        f(&format!("{prefix}.norm3_bias"), &mut self.norm3_bias);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub embed: Tensor,
    pub layers: Vec<DecoderLayerParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub d_model: usize,
}

pub struct DecoderVars {
    embed: Var,
    layers: Vec<DecoderLayerVars>,
    out_w: Var,
    out_b: Var,
}

impl DecoderParams {
    pub fn init(
        vocab: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DecoderParams {
            embed: init_matrix(vocab, d_model, rng),
            layers: (0..layers)
                .map(|_| DecoderLayerParams::init(d_model, heads, d_ff, rng))
                .collect(),
            out_w: init_matrix(d_model, vocab, rng),
            out_b: init_vector(vocab, 0.0),
            d_model,
        }
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> DecoderVars {
        DecoderVars {
            embed: g.param(&format!("{prefix}.embed"), &self.embed),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.bind(g, &format!("{prefix}.l{l}")))
                .collect(),
            out_w: g.param(&format!("{prefix}.out_w"), &self.out_w),
            out_b: g.param(&format!("{prefix}.out_b"), &self.out_b),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.embed"), &self.embed);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.l{l}"), f);
        }
        f(&format!("{prefix}.out_w"), &self.out_w);
        f(&format!("{prefix}.out_b"), &self.out_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.embed"), &mut self.embed);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.l{l}"), f);
        }
        f(&format!("{prefix}.out_w"), &mut self.out_w);
        f(&format!("{prefix}.out_b"), &mut self.out_b);
    }
}

// ── Parallel training path ─────────────────────────────────────────────

/// Teacher-forced forward over all positions at once. `inputs` are the
/// right-shifted token ids (start symbol first); the result is a row of
/// log-probabilities per position.
pub fn decoder_train_forward(
    g: &mut Graph,
    vars: &DecoderVars,
    inputs: &[usize],
    enc: Var,
    phase: &mut Phase,
) -> Result<Var, DecoderError> {
    if inputs.is_empty() {
        return Err(TensorError::EmptyInput {
            op: "decoder_train_forward",
        }
        .into());
    }
    let vocab = g.value(vars.embed).rows();
    if let Some(&bad) = inputs.iter().find(|&&t| t >= vocab) {
        return Err(DecoderError::BadToken { token: bad, vocab });
    }
    let d_model = g.value(vars.embed).cols();
    let n = inputs.len();

    let emb = g.embed_rows(vars.embed, inputs)?;
    let scaled = g.affine(emb, (d_model as f64).sqrt(), 0.0);
    let pe = g.leaf(sinusoidal_positions(n, 0, d_model));
    let mut x = g.add(scaled, pe)?;

    let mask = Mask::causal(n);
    for layer in &vars.layers {
        let sa = multi_head_attention_var(g, &layer.self_attn, x, x, x, Some(&mask))?;
        let sa = phase.apply_dropout(g, sa);
        let s1 = g.add(x, sa)?;
        let x1 = g.layer_norm(s1, layer.norm1_gain, layer.norm1_bias, LN_EPS)?;

        let cross = mta_attend_var(g, &layer.cross_attn, x1, enc, enc, phase)?;
        let cross = phase.apply_dropout(g, cross);
        let s2 = g.add(x1, cross)?;
        let x2 = g.layer_norm(s2, layer.norm2_gain, layer.norm2_bias, LN_EPS)?;

        let ff = feed_forward_var(g, &layer.ff, x2)?;
        let ff = phase.apply_dropout(g, ff);
        let s3 = g.add(x2, ff)?;
        x = g.layer_norm(s3, layer.norm3_gain, layer.norm3_bias, LN_EPS)?;
    }

    let logits = g.matmul(x, vars.out_w)?;
    let logits = g.add_row(logits, vars.out_b)?;
    Ok(g.log_softmax_rows(logits)?)
}

// ── Incremental decode path ────────────────────────────────────────────

/// Per-hypothesis decoder memory: the input rows each layer has seen
/// (self-attention keys and values) plus the per-layer truncation
/// end-points. Cloning is cheap enough at desk scale and keeps beam
/// hypotheses independent.
#[derive(Debug, Clone)]
pub struct DecoderState {
    levels: Vec<Vec<Vec<f64>>>,
    trunc: TruncationState,
    positions: usize,
}

impl DecoderState {
    pub fn new(layers: usize) -> Self {
        DecoderState {
            levels: vec![Vec::new(); layers],
            trunc: TruncationState::new(layers),
            positions: 0,
        }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn truncation(&self) -> &TruncationState {
        &self.trunc
    }

    /// Furthest encoder position any layer has committed to; the
    /// hypothesis-level truncation horizon.
    pub fn receptive_field(&self) -> usize {
        self.trunc.receptive_field()
    }
}

pub enum StepOutcome {
    /// Log-probabilities over the vocabulary for the next output token,
    /// plus the advanced state.
    LogProbs {
        log_probs: Vec<f64>,
        state: DecoderState,
    },
    /// Some layer's end-point scan ran off the end of the open stream;
    /// retry the identical step once more outputs arrive.
    NeedMoreOutputs,
}

/// Advance one hypothesis by one position. `token` is the input at this
/// position (the start symbol or the previously emitted token). The given
/// state is never mutated, so a `NeedMoreOutputs` step can be retried.
pub fn decoder_step(
    params: &DecoderParams,
    state: &DecoderState,
    token: usize,
    enc: &AvailableOutputs,
) -> Result<StepOutcome, DecoderError> {
    let vocab = params.embed.rows();
    if token >= vocab {
        return Err(DecoderError::BadToken { token, vocab });
    }
    let d = params.d_model;
    let pos = state.positions;
    let pe = sinusoidal_positions(1, pos, d);
    let scale = (d as f64).sqrt();
    let mut x: Vec<f64> = params
        .embed
        .row(token)
        .iter()
        .zip(pe.row(0))
        .map(|(e, p)| e * scale + p)
        .collect();

    let mut next = state.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        next.levels[l].push(x.clone());
        let q = Tensor::matrix(1, d, x)?;
        let kv = Tensor::from_rows(&next.levels[l])?;
        let sa = multi_head_attention(&layer.self_attn, &q, &kv, &kv, None)?;
        let s1 = add_rows(q.row(0), sa.row(0));
        let x1 = tensor::layer_norm_row(
            &s1,
            layer.norm1_gain.data(),
            layer.norm1_bias.data(),
            LN_EPS,
        );

        let (context, endpoint) =
            match mta_decode_step(&layer.cross_attn, &x1, enc, state.trunc.endpoint(l))? {
                MtaStep::NeedMoreOutputs => return Ok(StepOutcome::NeedMoreOutputs),
                MtaStep::Context { context, endpoint } => (context, endpoint),
            };
        next.trunc.advance(l, endpoint);
        let s2 = add_rows(&x1, &context);
        let x2 = tensor::layer_norm_row(
            &s2,
            layer.norm2_gain.data(),
            layer.norm2_bias.data(),
            LN_EPS,
        );

        let ff = feed_forward(&layer.ff, &Tensor::matrix(1, d, x2.clone())?)?;
        let s3 = add_rows(&x2, ff.row(0));
        x = tensor::layer_norm_row(
            &s3,
            layer.norm3_gain.data(),
            layer.norm3_bias.data(),
            LN_EPS,
        );
    }
    next.positions += 1;

    let mut logits = tensor::vecmat(&x, params.out_w.data(), d, vocab);
    for (v, b) in logits.iter_mut().zip(params.out_b.data()) {
        *v += b;
    }
    let log_probs = tensor::log_softmax_rows(&logits, 1, vocab);
    Ok(StepOutcome::LogProbs {
        log_probs,
        state: next,
    })
}

fn add_rows(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(31)
    }

    fn rand_matrix(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(n, m, data).unwrap()
    }

    fn small_decoder(rng: &mut ChaCha8Rng) -> DecoderParams {
        DecoderParams::init(5, 8, 2, 16, 2, rng)
    }

    /// Pin the stopping offset low enough that no probability crosses 0.5,
    /// so a closed-stream decode attends the full span like training does.
    fn pin_offsets(params: &mut DecoderParams, value: f64) {
        for layer in &mut params.layers {
            layer.cross_attn.offset = Tensor::scalar(value);
        }
    }

    fn train_log_probs(
        params: &DecoderParams,
        inputs: &[usize],
        enc: &Tensor,
    ) -> Tensor {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, "dec");
        let encv = g.leaf(enc.clone());
        let out = decoder_train_forward(&mut g, &vars, inputs, encv, &mut Phase::Eval).unwrap();
        g.detach(out)
    }

    #[test]
    fn train_forward_rows_are_distributions() {
        let mut r = rng();
        let params = small_decoder(&mut r);
        let enc = rand_matrix(6, 8, &mut r);
        let lp = train_log_probs(&params, &[1, 2, 3], &enc);
        assert_eq!(lp.shape(), &[3, 5]);
        for i in 0..3 {
            let total: f64 = lp.row(i).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_hides_future_inputs() {
        let mut r = rng();
        let params = small_decoder(&mut r);
        let enc = rand_matrix(6, 8, &mut r);
        let base = train_log_probs(&params, &[1, 2, 3, 4], &enc);
        let poked = train_log_probs(&params, &[1, 2, 0, 4], &enc);
        assert_eq!(base.row(0), poked.row(0));
        assert_eq!(base.row(1), poked.row(1));
        assert_ne!(base.row(2), poked.row(2));
    }

    #[test]
    fn incremental_steps_match_parallel_forward() {
        let mut r = rng();
        let mut params = small_decoder(&mut r);
        pin_offsets(&mut params, -6.0);
        let enc = rand_matrix(6, 8, &mut r);
        let inputs = [1usize, 2, 3, 4];
        let train = train_log_probs(&params, &inputs, &enc);

        let mut outputs = AvailableOutputs::new(8);
        outputs.push_rows(&enc).unwrap();
        outputs.close();
        let mut state = DecoderState::new(2);
        for (i, &tok) in inputs.iter().enumerate() {
            match decoder_step(&params, &state, tok, &outputs).unwrap() {
                StepOutcome::LogProbs { log_probs, state: s } => {
                    for (a, b) in log_probs.iter().zip(train.row(i)) {
                        assert!((a - b).abs() < 1e-12, "position {i}");
                    }
                    state = s;
                }
                StepOutcome::NeedMoreOutputs => panic!("closed stream must step"),
            }
        }
    }

    #[test]
    fn suspended_step_retries_identically() {
        let mut r = rng();
        let mut params = small_decoder(&mut r);
        pin_offsets(&mut params, -50.0);
        let enc = rand_matrix(6, 8, &mut r);

        // Full-stream reference.
        let mut full = AvailableOutputs::new(8);
        full.push_rows(&enc).unwrap();
        full.close();
        let state = DecoderState::new(2);
        let want = match decoder_step(&params, &state, 1, &full).unwrap() {
            StepOutcome::LogProbs { log_probs, .. } => log_probs,
            _ => panic!(),
        };

        // Streamed: no crossing ever happens, so an open stream suspends.
        let mut streamed = AvailableOutputs::new(8);
        let head = Tensor::from_rows(&(0..3).map(|i| enc.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        streamed.push_rows(&head).unwrap();
        let state = DecoderState::new(2);
        assert!(matches!(
            decoder_step(&params, &state, 1, &streamed).unwrap(),
            StepOutcome::NeedMoreOutputs
        ));
        let tail = Tensor::from_rows(&(3..6).map(|i| enc.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        streamed.push_rows(&tail).unwrap();
        streamed.close();
        match decoder_step(&params, &state, 1, &streamed).unwrap() {
            StepOutcome::LogProbs { log_probs, .. } => {
                assert_eq!(log_probs, want);
            }
            _ => panic!("stream closed; step must complete"),
        }
    }

    #[test]
    fn endpoints_never_regress_across_steps() {
        let mut r = rng();
        let params = small_decoder(&mut r);
        let enc = rand_matrix(10, 8, &mut r);
        let mut outputs = AvailableOutputs::new(8);
        outputs.push_rows(&enc).unwrap();
        outputs.close();

        let mut state = DecoderState::new(2);
        let mut prev = vec![1usize; 2];
        for tok in [1usize, 2, 3, 4, 2] {
            match decoder_step(&params, &state, tok, &outputs).unwrap() {
                StepOutcome::LogProbs { state: s, .. } => {
                    for l in 0..2 {
                        assert!(s.truncation().endpoint(l) >= prev[l]);
                        prev[l] = s.truncation().endpoint(l);
                    }
                    state = s;
                }
                _ => panic!(),
            }
        }
        assert_eq!(state.receptive_field(), *prev.iter().max().unwrap());
    }

    #[test]
    fn bad_token_is_rejected() {
        let mut r = rng();
        let params = small_decoder(&mut r);
        let enc = rand_matrix(4, 8, &mut r);
        let mut outputs = AvailableOutputs::new(8);
        outputs.push_rows(&enc).unwrap();
        outputs.close();
        let state = DecoderState::new(2);
        assert!(matches!(
            decoder_step(&params, &state, 7, &outputs),
            Err(DecoderError::BadToken { token: 7, vocab: 5 })
        ));
        let mut g = Graph::new();
        let vars = params.bind(&mut g, "dec");
        let encv = g.leaf(enc);
        assert!(matches!(
            decoder_train_forward(&mut g, &vars, &[1, 9], encv, &mut Phase::Eval),
            Err(DecoderError::BadToken { token: 9, vocab: 5 })
        ));
    }
}
