//! Joint beam decoding over a live encoder stream.
//!
//! Hypotheses combine three scores: attention-decoder log-probability,
//! truncated CTC prefix mass evaluated at the hypothesis's own truncation
//! horizon, and an optional n-gram language model. The per-hypothesis
//! horizon is the furthest encoder position any decoder layer committed
//! to during that hypothesis's steps, so a score never depends on frames
//! the stream has not produced. Steps that would need unseen outputs
//! suspend without side effects and retry when more chunks arrive, which
//! makes the streaming and whole-utterance drivers land on identical
//! hypotheses, scores, and end-points.

use std::cmp::Ordering;

use thiserror::Error;

use crate::ctc::{CtcError, CtcPrefix, CtcTable};
use crate::decoder::{decoder_step, DecoderError, DecoderState, StepOutcome};
use crate::encoder::{
    split_chunks, EncodeError, EncodeMode, EncoderSession, FRAME_SHIFT_MS, TIME_REDUCTION,
};
use crate::lm::NgramModel;
use crate::model::{Model, Phase, BLANK, BOUNDARY};
use crate::mta::{AvailableOutputs, MtaError};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Mta(#[from] MtaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad decode config: {0}")]
    BadConfig(&'static str),
    #[error("feature width {got}, model expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    /// Decoder-branch weight; the truncated CTC branch gets `1 - lambda`.
    pub lambda: f64,
    /// Language-model weight.
    pub gamma: f64,
    pub beam: usize,
    /// Candidates kept per hypothesis from the decoder distribution.
    pub prune: usize,
    /// Output length cap; defaults to twice the reduced frame count.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            lambda: 0.5,
            gamma: 0.3,
            beam: 10,
            prune: 15,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub dec_score: f64,
    pub ctc_score: f64,
    pub lm_score: f64,
    pub total: f64,
    /// Truncation end-point (reduced frames) in force as each output step
    /// committed; one entry per token plus one for the end symbol.
    pub endpoints: Vec<usize>,
    /// Input frames the stream had produced when each output step
    /// committed.
    pub emitted_at_frames: Vec<usize>,
    pub frames: usize,
    pub reduced_frames: usize,
    /// Highest encoder row (1-based) any scorer ever touched.
    pub max_read: usize,
}

impl DecodeResult {
    /// Per-step emission lag in milliseconds: wall position of the newest
    /// input frame at commit time minus the end of the step's truncation
    /// span.
    pub fn emission_lag_ms(&self) -> Vec<usize> {
        self.endpoints
            .iter()
            .zip(&self.emitted_at_frames)
            .map(|(&e, &f)| f.saturating_sub(e * TIME_REDUCTION) * FRAME_SHIFT_MS)
            .collect()
    }
}

struct Hyp {
    tokens: Vec<usize>,
    dec: f64,
    lm: f64,
    horizon: usize,
    state: DecoderState,
    prefix: CtcPrefix,
    endpoints: Vec<usize>,
    emitted_at: Vec<usize>,
}

struct Finished {
    tokens: Vec<usize>,
    dec: f64,
    ctc: f64,
    lm: f64,
    total: f64,
    endpoints: Vec<usize>,
    emitted_at: Vec<usize>,
}

/// An end-symbol proposal on a stream that is still open. Its terminal
/// CTC mass is only meaningful over the whole utterance, so it waits for
/// close without occupying a beam slot or blocking other hypotheses.
struct PendingEnd {
    tokens: Vec<usize>,
    dec: f64,
    lm: f64,
    prefix: CtcPrefix,
    endpoints: Vec<usize>,
    emitted_at: Vec<usize>,
}

pub struct DecodeSession<'a> {
    model: &'a Model,
    lm: Option<&'a NgramModel>,
    cfg: DecodeConfig,
    outputs: AvailableOutputs,
    table: CtcTable,
    beam: Vec<Hyp>,
    finished: Vec<Finished>,
    pending: Vec<PendingEnd>,
    frames_seen: usize,
    stopped: bool,
}

impl<'a> DecodeSession<'a> {
    pub fn new(
        model: &'a Model,
        lm: Option<&'a NgramModel>,
        cfg: &DecodeConfig,
    ) -> Result<DecodeSession<'a>, DecodeError> {
        if cfg.beam == 0 || cfg.prune == 0 {
            return Err(DecodeError::BadConfig(
                "beam and prune widths must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&cfg.lambda) || !(cfg.gamma >= 0.0) {
            return Err(DecodeError::BadConfig(
                "lambda must lie in [0, 1] and gamma be nonnegative",
            ));
        }
        let root = Hyp {
            tokens: Vec::new(),
            dec: 0.0,
            lm: 0.0,
            horizon: 0,
            state: DecoderState::new(model.cfg.dec_layers),
            prefix: CtcPrefix::root(),
            endpoints: Vec::new(),
            emitted_at: Vec::new(),
        };
        Ok(DecodeSession {
            model,
            lm,
            cfg: cfg.clone(),
            outputs: AvailableOutputs::new(model.cfg.d_model),
            table: CtcTable::new(model.cfg.vocab),
            beam: vec![root],
            finished: Vec::new(),
            pending: Vec::new(),
            frames_seen: 0,
            stopped: false,
        })
    }

    /// Reveal one chunk's encoder outputs: rows enter both the attention
    /// buffer and the CTC log-prob table.
    pub fn accept_chunk(&mut self, enc: &Tensor, frames_consumed: usize) -> Result<(), DecodeError> {
        let lp = self.model.ctc_log_probs(enc)?;
        for r in 0..lp.rows() {
            self.table.push_frame(lp.row(r))?;
        }
        self.outputs.push_rows(enc)?;
        self.frames_seen = self.frames_seen.max(frames_consumed);
        Ok(())
    }

    /// Mark the stream complete and settle parked end proposals against
    /// the full-utterance terminal mass.
    pub fn close(&mut self) -> Result<(), DecodeError> {
        self.outputs.close();
        let horizon = self.table.frames();
        for p in self.pending.drain(..) {
            let term = p.prefix.terminal_mass(&self.table, horizon)?;
            let total =
                self.cfg.lambda * p.dec + (1.0 - self.cfg.lambda) * term + self.cfg.gamma * p.lm;
            let mut emitted_at = p.emitted_at;
            emitted_at.push(self.frames_seen);
            self.finished.push(Finished {
                tokens: p.tokens,
                dec: p.dec,
                ctc: term,
                lm: p.lm,
                total,
                endpoints: p.endpoints,
                emitted_at,
            });
        }
        Ok(())
    }

    fn lm_step(&self, history: &[usize], next: usize) -> f64 {
        self.lm.map_or(0.0, |m| m.log_prob(history, next))
    }

    /// Run beam expansions until the stream runs dry (open) or search
    /// provably cannot beat the best finished hypothesis (closed). Every
    /// expansion either commits fully or suspends with no side effects.
    pub fn run_steps(&mut self) -> Result<(), DecodeError> {
        loop {
            if self.stopped || self.beam.is_empty() {
                return Ok(());
            }
            let closed = self.outputs.is_closed();
            let avail = self.outputs.available();
            // One output per reduced frame is the most CTC can align;
            // on an open stream, wait for input instead of running ahead.
            if !closed && self.beam.iter().any(|h| h.tokens.len() >= avail) {
                return Ok(());
            }

            let mut stepped = Vec::with_capacity(self.beam.len());
            for h in &self.beam {
                let input = *h.tokens.last().unwrap_or(&BOUNDARY);
                match decoder_step(&self.model.decoder, &h.state, input, &self.outputs)? {
                    StepOutcome::NeedMoreOutputs => {
                        debug_assert!(!closed);
                        return Ok(());
                    }
                    StepOutcome::LogProbs { log_probs, state } => stepped.push((log_probs, state)),
                }
            }

            let hard_cap = if closed {
                self.cfg.max_len.unwrap_or(2 * avail)
            } else {
                usize::MAX
            };

            struct Cand {
                parent: usize,
                token: usize,
                dec: f64,
                lm: f64,
                total: f64,
            }
            let mut pool: Vec<Cand> = Vec::new();
            // (parent, horizon, dec, lm) of end-symbol candidates.
            let mut ends: Vec<(usize, usize, f64, f64)> = Vec::new();

            for (i, h) in self.beam.iter().enumerate() {
                let (lp, state) = &stepped[i];
                let horizon = state.receptive_field();
                debug_assert!(horizon >= h.horizon);

                if closed && h.tokens.len() >= hard_cap {
                    ends.push((i, horizon, h.dec + lp[BOUNDARY], h.lm + self.lm_step(&h.tokens, BOUNDARY)));
                    continue;
                }

                let mut ranked: Vec<usize> = (0..lp.len()).filter(|&c| c != BLANK).collect();
                ranked.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
                for &c in ranked.iter().take(self.cfg.prune) {
                    let dec = h.dec + lp[c];
                    let lm = h.lm + self.lm_step(&h.tokens, c);
                    if c == BOUNDARY {
                        ends.push((i, horizon, dec, lm));
                    } else {
                        let ctc = h.prefix.extension_mass(&self.table, c, horizon)?;
                        let total = self.cfg.lambda * dec
                            + (1.0 - self.cfg.lambda) * ctc
                            + self.cfg.gamma * lm;
                        pool.push(Cand {
                            parent: i,
                            token: c,
                            dec,
                            lm,
                            total,
                        });
                    }
                }
            }

            for (i, horizon, dec, lm) in ends {
                let h = &self.beam[i];
                let mut endpoints = h.endpoints.clone();
                endpoints.push(horizon);
                if closed {
                    let term = h.prefix.terminal_mass(&self.table, self.table.frames())?;
                    let total =
                        self.cfg.lambda * dec + (1.0 - self.cfg.lambda) * term + self.cfg.gamma * lm;
                    let mut emitted_at = h.emitted_at.clone();
                    emitted_at.push(self.frames_seen);
                    self.finished.push(Finished {
                        tokens: h.tokens.clone(),
                        dec,
                        ctc: term,
                        lm,
                        total,
                        endpoints,
                        emitted_at,
                    });
                } else {
                    self.pending.push(PendingEnd {
                        tokens: h.tokens.clone(),
                        dec,
                        lm,
                        prefix: h.prefix.clone(),
                        endpoints,
                        emitted_at: h.emitted_at.clone(),
                    });
                }
            }

            let child_cmp = |a: &Cand, b: &Cand| -> Ordering {
                let ta = self.beam[a.parent].tokens.iter().chain([&a.token]);
                let tb = self.beam[b.parent].tokens.iter().chain([&b.token]);
                ta.cmp(tb)
            };
            pool.sort_by(|a, b| b.total.total_cmp(&a.total).then_with(|| child_cmp(a, b)));
            pool.truncate(self.cfg.beam);

            let mut next_beam = Vec::with_capacity(pool.len());
            for c in &pool {
                let h = &self.beam[c.parent];
                let (_, state) = &stepped[c.parent];
                let horizon = state.receptive_field();
                let mut tokens = h.tokens.clone();
                tokens.push(c.token);
                let mut endpoints = h.endpoints.clone();
                endpoints.push(horizon);
                let mut emitted_at = h.emitted_at.clone();
                emitted_at.push(self.frames_seen);
                next_beam.push(Hyp {
                    tokens,
                    dec: c.dec,
                    lm: c.lm,
                    horizon,
                    state: state.clone(),
                    prefix: h.prefix.child(c.token),
                    endpoints,
                    emitted_at,
                });
            }
            self.beam = next_beam;

            if closed {
                if self.beam.is_empty() {
                    self.stopped = true;
                    return Ok(());
                }
                // Admissible stop: every future score increment from the
                // decoder and LM is nonpositive, and any continuation's
                // CTC mass at any horizon is bounded by the current
                // prefix mass over the whole stream. If even the most
                // optimistic unfinished bound cannot beat the best
                // finished total, the search is over.
                if let Some(best) = self
                    .finished
                    .iter()
                    .map(|f| f.total)
                    .max_by(f64::total_cmp)
                {
                    let horizon = self.table.frames();
                    let mut best_bound = f64::NEG_INFINITY;
                    for h in &self.beam {
                        let mass = h.prefix.prefix_mass(&self.table, horizon)?;
                        let bound = self.cfg.lambda * h.dec
                            + (1.0 - self.cfg.lambda) * mass
                            + self.cfg.gamma * h.lm;
                        best_bound = best_bound.max(bound);
                    }
                    if best_bound <= best {
                        self.stopped = true;
                        return Ok(());
                    }
                }
            }
        }
    }

    /// Best finished hypothesis; ties break toward the lexicographically
    /// smaller token sequence.
    pub fn result(self, frames: usize) -> Result<DecodeResult, DecodeError> {
        let reduced_frames = self.table.frames();
        let max_read = self.outputs.max_read();
        let mut best: Option<&Finished> = None;
        for f in &self.finished {
            best = Some(match best {
                None => f,
                Some(b) => match f.total.total_cmp(&b.total) {
                    Ordering::Greater => f,
                    Ordering::Equal if f.tokens < b.tokens => f,
                    _ => b,
                },
            });
        }
        Ok(match best {
            Some(b) => DecodeResult {
                tokens: b.tokens.clone(),
                dec_score: b.dec,
                ctc_score: b.ctc,
                lm_score: b.lm,
                total: b.total,
                endpoints: b.endpoints.clone(),
                emitted_at_frames: b.emitted_at.clone(),
                frames,
                reduced_frames,
                max_read,
            },
            // Only reachable when the stream never produced a chunk.
            None => DecodeResult {
                tokens: Vec::new(),
                dec_score: 0.0,
                ctc_score: 0.0,
                lm_score: 0.0,
                total: 0.0,
                endpoints: Vec::new(),
                emitted_at_frames: Vec::new(),
                frames,
                reduced_frames,
                max_read,
            },
        })
    }
}

fn feature_rows(features: &Tensor, start: usize, end: usize) -> Tensor {
    let m = features.cols();
    Tensor::matrix(
        end - start,
        m,
        features.data()[start * m..end * m].to_vec(),
    )
    .unwrap()
}

fn drive(
    model: &Model,
    lm: Option<&NgramModel>,
    cfg: &DecodeConfig,
    features: &Tensor,
    interleave: bool,
) -> Result<DecodeResult, DecodeError> {
    if features.shape().len() != 2 || features.cols() != model.cfg.feat_dim {
        return Err(DecodeError::FeatureWidth {
            expected: model.cfg.feat_dim,
            got: features.shape().last().copied().unwrap_or(0),
        });
    }
    let frames = features.rows();
    let mut sess = DecodeSession::new(model, lm, cfg)?;
    let specs = split_chunks(frames, &model.cfg.chunk);
    if specs.is_empty() {
        sess.close()?;
        return sess.result(frames);
    }
    let mut enc_sess = EncoderSession::new(&model.encoder, model.cfg.chunk, EncodeMode::StateReuse);
    for spec in &specs {
        let mut g = Graph::new();
        let vars = model.encoder.bind(&mut g, "enc");
        let range = spec.window(EncodeMode::StateReuse);
        let window = g.leaf(feature_rows(features, range.start, range.end));
        let chunk = enc_sess.encode_chunk(&mut g, &vars, &mut Phase::Eval, spec, window)?;
        let out = g.detach(chunk.outputs);
        sess.accept_chunk(&out, spec.future_end)?;
        if interleave {
            sess.run_steps()?;
        }
    }
    sess.close()?;
    sess.run_steps()?;
    sess.result(frames)
}

/// Decode while chunks arrive: beam expansions interleave with encoding,
/// so tokens commit before the utterance ends.
pub fn decode_streaming(
    model: &Model,
    lm: Option<&NgramModel>,
    cfg: &DecodeConfig,
    features: &Tensor,
) -> Result<DecodeResult, DecodeError> {
    drive(model, lm, cfg, features, true)
}

/// Encode the whole utterance first, then search. Yields the same
/// hypotheses, scores, and end-points as the streaming driver.
pub fn decode_offline(
    model: &Model,
    lm: Option<&NgramModel>,
    cfg: &DecodeConfig,
    features: &Tensor,
) -> Result<DecodeResult, DecodeError> {
    drive(model, lm, cfg, features, false)
}

/// Width-one search on the decoder branch alone.
pub fn greedy_transcript(model: &Model, features: &Tensor) -> Result<Vec<usize>, DecodeError> {
    let cfg = DecodeConfig {
        lambda: 1.0,
        gamma: 0.0,
        beam: 1,
        prune: 1,
        max_len: None,
    };
    Ok(decode_offline(model, None, &cfg, features)?.tokens)
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut cur = Vec::with_capacity(b.len() + 1);
        cur.push(i + 1);
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}
