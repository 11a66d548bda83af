//! Chunked streaming encoder. A two-layer stride-2 conv front end reduces
//! time by 4x, then self-attention layers run over sliding chunk windows.
//! Each chunk sees `history` frames of left context and `future` frames of
//! lookahead; in state-reuse mode the left context comes from cached layer
//! inputs instead of recomputation, and gradients never flow into the cache.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{
    feed_forward_var, init_matrix, init_vector, multi_head_attention_var, sinusoidal_positions,
    FeedForwardParams, FeedForwardVars, MultiHeadParams, MultiHeadVars,
};
use crate::model::{Phase, LN_EPS};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Time reduction of the conv front end (two stride-2 layers).
pub const TIME_REDUCTION: usize = 4;

/// Input frame shift in milliseconds.
pub const FRAME_SHIFT_MS: usize = 10;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error(
        "chunk sizes must be multiples of {TIME_REDUCTION} with a nonzero central span: \
         history={history}, central={central}, future={future}"
    )]
    BadChunkConfig {
        history: usize,
        central: usize,
        future: usize,
    },
    #[error("front-end kernel must be 1 or 3, got {0}")]
    BadKernel(usize),
    #[error("expected chunk {expected}, got chunk {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("chunk {index} window needs {expected} frames, got {got}")]
    WindowSize {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("encoder input must contain at least one frame")]
    EmptyInput,
    #[error("feature width {got} does not match the front end ({expected})")]
    FeatureWidth { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Reduced sequence length after the front end.
pub fn reduced_len(frames: usize) -> usize {
    frames.div_ceil(TIME_REDUCTION)
}

/// Chunk geometry in input frames. All spans must be multiples of the
/// front-end time reduction so chunk boundaries stay aligned with the
/// reduced grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkConfig {
    pub history: usize,
    pub central: usize,
    pub future: usize,
}

impl ChunkConfig {
    pub fn new(history: usize, central: usize, future: usize) -> Result<Self, EncodeError> {
        let aligned = |v: usize| v % TIME_REDUCTION == 0;
        if central == 0 || !aligned(history) || !aligned(central) || !aligned(future) {
            return Err(EncodeError::BadChunkConfig {
                history,
                central,
                future,
            });
        }
        Ok(ChunkConfig {
            history,
            central,
            future,
        })
    }

    /// Algorithmic latency contributed by the future context.
    pub fn latency_ms(&self) -> usize {
        self.future * FRAME_SHIFT_MS
    }
}

/// Which frames one chunk covers. `history_start..central_start` is left
/// context, `central_start..central_end` is emitted, and
/// `central_end..future_end` is lookahead.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSpec {
    pub index: usize,
    pub history_start: usize,
    pub central_start: usize,
    pub central_end: usize,
    pub future_end: usize,
}

impl ChunkSpec {
    /// Frames the encoder must be fed for this chunk in the given mode.
    /// State reuse serves the history span from the cache, so its window
    /// starts at the central span.
    pub fn window(&self, mode: EncodeMode) -> Range<usize> {
        match mode {
            EncodeMode::Isolated => self.history_start..self.future_end,
            EncodeMode::StateReuse => self.central_start..self.future_end,
        }
    }
}

/// Cover `total_frames` with consecutive central spans, clipping at both
/// ends of the stream. Empty input yields no chunks.
pub fn split_chunks(total_frames: usize, cfg: &ChunkConfig) -> Vec<ChunkSpec> {
    let mut specs = Vec::new();
    let mut start = 0;
    while start < total_frames {
        let central_end = (start + cfg.central).min(total_frames);
        specs.push(ChunkSpec {
            index: specs.len(),
            history_start: start.saturating_sub(cfg.history),
            central_start: start,
            central_end,
            future_end: (central_end + cfg.future).min(total_frames),
        });
        start = central_end;
    }
    specs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Recompute history context from raw frames for every chunk.
    Isolated,
    /// Serve history context from cached per-layer states.
    StateReuse,
}

/// How many input frames can influence one emitted position, beyond its
/// own chunk window. With state reuse each layer reaches one cache hop
/// further back.
pub fn receptive_field_frames(cfg: &ChunkConfig, layers: usize, mode: EncodeMode) -> usize {
    match mode {
        EncodeMode::Isolated => cfg.history,
        EncodeMode::StateReuse => layers * cfg.history,
    }
}

// ── Front end ──────────────────────────────────────────────────────────

/// Two stride-2 square convolutions with relu, flattened and projected to
/// the model width. The kernel is 3 (one frame of edge padding, three
/// input frames of lookahead after reduction) or 1 (strictly frame-wise).
#[derive(Debug, Clone)]
pub struct FrontEndParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub kernel: usize,
    pub channels: usize,
    pub feat_dim: usize,
}

impl FrontEndParams {
    pub fn init(
        feat_dim: usize,
        channels: usize,
        kernel: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncodeError> {
        if kernel != 1 && kernel != 3 {
            return Err(EncodeError::BadKernel(kernel));
        }
        if feat_dim == 0 || channels == 0 {
            return Err(EncodeError::EmptyInput);
        }
        let conv1_w = {
            let t = init_matrix(channels, kernel * kernel, rng);
            Tensor::new(vec![channels, 1, kernel, kernel], t.data().to_vec()).unwrap()
        };
        let conv2_w = {
            let t = init_matrix(channels, channels * kernel * kernel, rng);
            Tensor::new(
                vec![channels, channels, kernel, kernel],
                t.data().to_vec(),
            )
            .unwrap()
        };
        let width = channels * reduced_width(feat_dim);
        Ok(FrontEndParams {
            conv1_w,
            conv1_b: init_vector(channels, 0.0),
            conv2_w,
            conv2_b: init_vector(channels, 0.0),
            proj_w: init_matrix(width, d_model, rng),
            proj_b: init_vector(d_model, 0.0),
            kernel,
            channels,
            feat_dim,
        })
    }

    /// Input frames of lookahead introduced by edge padding: each stride-2
    /// conv with kernel 3 looks one step ahead, compounding to 3 frames.
    pub fn lookahead_frames(&self) -> usize {
        3 * (self.kernel / 2)
    }

    pub fn lookahead_ms(&self) -> usize {
        self.lookahead_frames() * FRAME_SHIFT_MS
    }
}

fn reduced_width(feat_dim: usize) -> usize {
    feat_dim.div_ceil(2).div_ceil(2)
}

pub struct FrontEndVars {
    conv1_w: Var,
    conv1_b: Var,
    conv2_w: Var,
    conv2_b: Var,
    proj_w: Var,
    proj_b: Var,
    kernel: usize,
    feat_dim: usize,
}

impl FrontEndParams {
    pub fn bind(&self, g: &mut Graph, prefix: &str) -> FrontEndVars {
        FrontEndVars {
            conv1_w: g.param(&format!("{prefix}.conv1_w"), &self.conv1_w),
            conv1_b: g.param(&format!("{prefix}.conv1_b"), &self.conv1_b),
            conv2_w: g.param(&format!("{prefix}.conv2_w"), &self.conv2_w),
            conv2_b: g.param(&format!("{prefix}.conv2_b"), &self.conv2_b),
            proj_w: g.param(&format!("{prefix}.proj_w"), &self.proj_w),
            proj_b: g.param(&format!("{prefix}.proj_b"), &self.proj_b),
            kernel: self.kernel,
            feat_dim: self.feat_dim,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.conv1_w"), &self.conv1_w);
        f(&format!("{prefix}.conv1_b"), &self.conv1_b);
        f(&format!("{prefix}.conv2_w"), &self.conv2_w);
        f(&format!("{prefix}.conv2_b"), &self.conv2_b);
        f(&format!("{prefix}.proj_w"), &self.proj_w);
        f(&format!("{prefix}.proj_b"), &self.proj_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.conv1_w"), &mut self.conv1_w);
        f(&format!("{prefix}.conv1_b"), &mut self.conv1_b);
        f(&format!("{prefix}.conv2_w"), &mut self.conv2_w);
        f(&format!("{prefix}.conv2_b"), &mut self.conv2_b);
        f(&format!("{prefix}.proj_w"), &mut self.proj_w);
        f(&format!("{prefix}.proj_b"), &mut self.proj_b);
    }
}

/// Run raw frames (`T x feat_dim`) through the front end, producing
/// `ceil(T / 4) x d_model` rows.
pub fn front_end_var(g: &mut Graph, vars: &FrontEndVars, frames: Var) -> Result<Var, EncodeError> {
    let t = g.value(frames);
    if t.shape().len() != 2 {
        return Err(TensorError::NotAMatrix {
            op: "front_end",
            shape: t.shape().to_vec(),
        }
        .into());
    }
    let (n, f) = (t.rows(), t.cols());
    if n == 0 {
        return Err(EncodeError::EmptyInput);
    }
    if f != vars.feat_dim {
        return Err(EncodeError::FeatureWidth {
            expected: vars.feat_dim,
            got: f,
        });
    }
    let pad = vars.kernel / 2;
    let img = g.reshape(frames, vec![1, n, f])?;
    let c1 = g.conv2d(img, vars.conv1_w, vars.conv1_b, pad)?;
    let r1 = g.relu(c1);
    let c2 = g.conv2d(r1, vars.conv2_w, vars.conv2_b, pad)?;
    let r2 = g.relu(c2);
    let flat = g.flatten_chw(r2)?;
    let proj = g.matmul(flat, vars.proj_w)?;
    Ok(g.add_row(proj, vars.proj_b)?)
}

// ── Encoder stack ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub self_attn: MultiHeadParams,
    pub ff: FeedForwardParams,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

pub struct EncoderLayerVars {
    self_attn: MultiHeadVars,
    ff: FeedForwardVars,
    norm1_gain: Var,
    norm1_bias: Var,
    norm2_gain: Var,
    norm2_bias: Var,
}

impl EncoderLayerParams {
    fn init(d_model: usize, heads: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayerParams {
            self_attn: MultiHeadParams::init(d_model, heads, rng).unwrap(),
            ff: FeedForwardParams::init(d_model, d_ff, rng),
            norm1_gain: init_vector(d_model, 1.0),
            norm1_bias: init_vector(d_model, 0.0),
            norm2_gain: init_vector(d_model, 1.0),
            norm2_bias: init_vector(d_model, 0.0),
        }
    }

    fn bind(&self, g: &mut Graph, prefix: &str) -> EncoderLayerVars {
        EncoderLayerVars {
            self_attn: self.self_attn.bind(g, &format!("{prefix}.attn")),
            ff: self.ff.bind(g, &format!("{prefix}.ff")),
            norm1_gain: g.param(&format!("{prefix}.norm1_gain"), &self.norm1_gain),
            norm1_bias: g.param(&format!("{prefix}.norm1_bias"), &self.norm1_bias),
            norm2_gain: g.param(&format!("{prefix}.norm2_gain"), &self.norm2_gain),
            norm2_bias: g.param(&format!("{prefix}.norm2_bias"), &self.norm2_bias),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.self_attn.visit(&format!("{prefix}.attn"), f);
        self.ff.visit(&format!("{prefix}.ff"), f);
        f(&format!("{prefix}.norm1_gain"), &self.norm1_gain);
        f(&format!("{prefix}.norm1_bias"), &self.norm1_bias);
        f(&format!("{prefix}.norm2_gain"), &self.norm2_gain);
        f(&format!("{prefix}.norm2_bias"), &self.norm2_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.self_attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
        f(&format!("{prefix}.norm1_gain"), &mut self.norm1_gain);
        f(&format!("{prefix}.norm1_bias"), &mut self.norm1_bias);
        f(&format!("{prefix}.norm2_gain"), &mut self.norm2_gain);
        f(&format!("{prefix}.norm2_bias"), &mut self.norm2_bias);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub front_end: FrontEndParams,
    pub layers: Vec<EncoderLayerParams>,
    pub d_model: usize,
}

pub struct EncoderVars {
    pub front_end: FrontEndVars,
    layers: Vec<EncoderLayerVars>,
}

impl EncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        feat_dim: usize,
        channels: usize,
        kernel: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, EncodeError> {
        let front_end = FrontEndParams::init(feat_dim, channels, kernel, d_model, rng)?;
        let layers = (0..layers)
            .map(|_| EncoderLayerParams::init(d_model, heads, d_ff, rng))
            .collect();
        Ok(EncoderParams {
            front_end,
            layers,
            d_model,
        })
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> EncoderVars {
        EncoderVars {
            front_end: self.front_end.bind(g, &format!("{prefix}.fe")),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.bind(g, &format!("{prefix}.l{l}")))
                .collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.front_end.visit(&format!("{prefix}.fe"), f);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.l{l}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.front_end.visit_mut(&format!("{prefix}.fe"), f);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.l{l}"), f);
        }
    }
}

// ── Streaming session ──────────────────────────────────────────────────

struct LayerCache {
    rows: Vec<Vec<f64>>,
}

/// One chunk's encoded central span.
#[derive(Debug)]
pub struct EncodedChunk {
    /// Final-layer states for the central positions only.
    pub outputs: Var,
    /// Absolute reduced index of the first output row.
    pub reduced_start: usize,
    /// Attention query positions each layer computed for this chunk.
    pub queries_per_layer: usize,
}

/// Per-chunk totals for an utterance.
pub struct EncodeStats {
    pub queries_per_chunk: Vec<usize>,
    pub layers: usize,
}

/// Feeds chunks through the encoder in order, carrying the state cache
/// across chunks in state-reuse mode. Cached rows re-enter later chunks
/// as constants, so no gradient ever flows into a previous chunk.
pub struct EncoderSession {
    mode: EncodeMode,
    capacity: usize,
    cache: Vec<LayerCache>,
    next_index: usize,
}

impl EncoderSession {
    pub fn new(params: &EncoderParams, cfg: ChunkConfig, mode: EncodeMode) -> EncoderSession {
        EncoderSession {
            mode,
            capacity: cfg.history / TIME_REDUCTION,
            cache: (0..params.layers.len())
                .map(|_| LayerCache { rows: Vec::new() })
                .collect(),
            next_index: 0,
        }
    }

    pub fn expected_index(&self) -> usize {
        self.next_index
    }

    /// Encode one chunk. `window` must hold exactly the frames of
    /// `spec.window(mode)` and chunks must arrive in stream order.
    pub fn encode_chunk(
        &mut self,
        g: &mut Graph,
        vars: &EncoderVars,
        phase: &mut Phase,
        spec: &ChunkSpec,
        window: Var,
    ) -> Result<EncodedChunk, EncodeError> {
        if spec.index != self.next_index {
            return Err(EncodeError::OutOfOrder {
                expected: self.next_index,
                got: spec.index,
            });
        }
        let range = spec.window(self.mode);
        let got = g.value(window).rows();
        if got != range.len() {
            return Err(EncodeError::WindowSize {
                index: spec.index,
                expected: range.len(),
                got,
            });
        }

        let red_start = range.start / TIME_REDUCTION;
        let mut h = front_end_var(g, &vars.front_end, window)?;
        let n_red = g.value(h).rows();
        let d_model = g.value(h).cols();
        let pe = g.leaf(sinusoidal_positions(n_red, red_start, d_model));
        h = g.add(h, pe)?;

        let central_lo = spec.central_start / TIME_REDUCTION - red_start;
        let central_hi = spec.central_end.div_ceil(TIME_REDUCTION) - red_start;

        for (l, layer) in vars.layers.iter().enumerate() {
            let kv = match self.mode {
                EncodeMode::Isolated => h,
                EncodeMode::StateReuse => {
                    let entry = &self.cache[l];
                    if entry.rows.is_empty() {
                        h
                    } else {
                        let cached = g.leaf(Tensor::from_rows(&entry.rows)?);
                        g.concat_rows(cached, h)?
                    }
                }
            };
            if self.mode == EncodeMode::StateReuse && self.capacity > 0 {
                let value = g.value(h);
                let entry = &mut self.cache[l];
                for r in central_lo..central_hi {
                    entry.rows.push(value.row(r).to_vec());
                }
                let extra = entry.rows.len().saturating_sub(self.capacity);
                if extra > 0 {
                    entry.rows.drain(..extra);
                }
            }

            let attn = multi_head_attention_var(g, &layer.self_attn, h, kv, kv, None)?;
            let attn = phase.apply_dropout(g, attn);
            let sum1 = g.add(h, attn)?;
            let x = g.layer_norm(sum1, layer.norm1_gain, layer.norm1_bias, LN_EPS)?;
            let ff = feed_forward_var(g, &layer.ff, x)?;
            let ff = phase.apply_dropout(g, ff);
            let sum2 = g.add(x, ff)?;
            h = g.layer_norm(sum2, layer.norm2_gain, layer.norm2_bias, LN_EPS)?;
        }

        self.next_index += 1;
        let outputs = g.slice_rows(h, central_lo, central_hi)?;
        Ok(EncodedChunk {
            outputs,
            reduced_start: spec.central_start / TIME_REDUCTION,
            queries_per_layer: n_red,
        })
    }
}

/// Encode a whole utterance chunk by chunk on one tape, concatenating the
/// central spans; the result covers reduced positions `0..ceil(T / 4)`.
pub fn encode_utterance(
    g: &mut Graph,
    vars: &EncoderVars,
    params: &EncoderParams,
    cfg: &ChunkConfig,
    mode: EncodeMode,
    phase: &mut Phase,
    features: Var,
) -> Result<(Var, EncodeStats), EncodeError> {
    let total = g.value(features).rows();
    let specs = split_chunks(total, cfg);
    if specs.is_empty() {
        return Err(EncodeError::EmptyInput);
    }
    let mut session = EncoderSession::new(params, *cfg, mode);
    let mut out: Option<Var> = None;
    let mut stats = EncodeStats {
        queries_per_chunk: Vec::with_capacity(specs.len()),
        layers: params.layers.len(),
    };
    for spec in &specs {
        let range = spec.window(mode);
        let window = g.slice_rows(features, range.start, range.end)?;
        let chunk = session.encode_chunk(g, vars, phase, spec, window)?;
        stats.queries_per_chunk.push(chunk.queries_per_layer);
        out = Some(match out {
            None => chunk.outputs,
            Some(acc) => g.concat_rows(acc, chunk.outputs)?,
        });
    }
    Ok((out.unwrap(), stats))
}
