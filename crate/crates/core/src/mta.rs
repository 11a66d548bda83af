//! Monotonic truncated attention. Every decoding step computes a stopping
//! probability against each encoder output; the first position to cross
//! 0.5, scanned forward from the previous step's end-point, becomes the
//! truncation end-point, and attention weights cover only outputs up to
//! it. Training runs the same recurrence in parallel over all positions
//! with no truncation, so the two paths share their kernels and agree to
//! machine precision.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::init_matrix;
use crate::model::Phase;
use crate::tensor::{self, Graph, Tensor, TensorError, Var};

/// Initial additive logit offset; keeps early stopping probabilities
/// around 0.018 so end-points move slowly at the start of training.
pub const OFFSET_INIT: f64 = -4.0;

#[derive(Debug, Error)]
pub enum MtaError {
    #[error("end-point {prev} exceeds the {available} outputs of a closed stream")]
    EndpointBeyondStream { prev: usize, available: usize },
    #[error("outputs buffer is closed")]
    Closed,
    #[error("row width {got} does not match buffer width {expected}")]
    Width { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct MtaParams {
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    /// Shape `[1]`; added to every stopping logit.
    pub offset: Tensor,
}

impl MtaParams {
    pub fn init(d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        MtaParams {
            q_proj: init_matrix(d_model, d_model, rng),
            k_proj: init_matrix(d_model, d_model, rng),
            v_proj: init_matrix(d_model, d_model, rng),
            offset: Tensor::scalar(OFFSET_INIT),
        }
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> MtaVars {
        MtaVars {
            q_proj: g.param(&format!("{prefix}.q_proj"), &self.q_proj),
            k_proj: g.param(&format!("{prefix}.k_proj"), &self.k_proj),
            v_proj: g.param(&format!("{prefix}.v_proj"), &self.v_proj),
            offset: g.param(&format!("{prefix}.offset"), &self.offset),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.q_proj"), &self.q_proj);
        f(&format!("{prefix}.k_proj"), &self.k_proj);
        f(&format!("{prefix}.v_proj"), &self.v_proj);
        f(&format!("{prefix}.offset"), &self.offset);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.q_proj"), &mut self.q_proj);
        f(&format!("{prefix}.k_proj"), &mut self.k_proj);
        f(&format!("{prefix}.v_proj"), &mut self.v_proj);
        f(&format!("{prefix}.offset"), &mut self.offset);
    }
}

pub struct MtaVars {
    pub q_proj: Var,
    pub k_proj: Var,
    pub v_proj: Var,
    pub offset: Var,
}

// ── Training path ──────────────────────────────────────────────────────

/// Stopping probabilities for all query rows against all keys:
/// `sigmoid(Q Wq Wkᵀ Kᵀ / sqrt(d) + offset [+ noise])`. Training noise
/// (standard normal, added to the logits) discourages overconfident
/// stopping probabilities; it is active only in the train phase.
pub fn stop_probs_var(
    g: &mut Graph,
    vars: &MtaVars,
    queries: Var,
    keys: Var,
    phase: &mut Phase,
) -> Result<Var, TensorError> {
    let d = g.value(queries).cols();
    let (n, m) = (g.value(queries).rows(), g.value(keys).rows());
    let qp = g.matmul(queries, vars.q_proj)?;
    let wkt = g.transpose(vars.k_proj)?;
    let u = g.matmul(qp, wkt)?;
    let kt = g.transpose(keys)?;
    let scores = g.matmul(u, kt)?;
    let scaled = g.affine(scores, 1.0 / (d as f64).sqrt(), 0.0);
    let shifted = g.add_scalar(scaled, vars.offset)?;
    let logits = match phase.mta_noise_var(g, n, m) {
        Some(noise) => g.add(shifted, noise)?,
        None => shifted,
    };
    Ok(g.sigmoid(logits))
}

/// Full parallel attention: weights `p_j * prod_{k<j} (1 - p_k)` over all
/// positions, applied to raw values and projected. Weight rows sum to
/// `1 - prod_j (1 - p_j)`, which is strictly below 1.
pub fn mta_attend_var(
    g: &mut Graph,
    vars: &MtaVars,
    queries: Var,
    keys: Var,
    values: Var,
    phase: &mut Phase,
) -> Result<Var, TensorError> {
    let p = stop_probs_var(g, vars, queries, keys, phase)?;
    let one_minus = g.affine(p, -1.0, 1.0);
    let keep = g.exclusive_cumprod_rows(one_minus)?;
    let weights = g.mul(p, keep)?;
    let ctx = g.matmul(weights, values)?;
    g.matmul(ctx, vars.v_proj)
}

// ── Decode path ────────────────────────────────────────────────────────

/// Encoder outputs revealed so far, with read instrumentation. `row`
/// records the highest index touched, so tests can assert that decoding
/// never looks past what the stream has produced.
pub struct AvailableOutputs {
    rows: Vec<Vec<f64>>,
    width: usize,
    closed: bool,
    max_read: Cell<usize>,
}

impl AvailableOutputs {
    pub fn new(width: usize) -> Self {
        AvailableOutputs {
            rows: Vec::new(),
            width,
            closed: false,
            max_read: Cell::new(0),
        }
    }

    pub fn push_rows(&mut self, t: &Tensor) -> Result<(), MtaError> {
        if self.closed {
            return Err(MtaError::Closed);
        }
        if t.cols() != self.width {
            return Err(MtaError::Width {
                expected: self.width,
                got: t.cols(),
            });
        }
        for i in 0..t.rows() {
            self.rows.push(t.row(i).to_vec());
        }
        Ok(())
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn available(&self) -> usize {
        self.rows.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// 0-based row access; records the 1-based high-water mark.
    pub fn row(&self, j: usize) -> &[f64] {
        if j + 1 > self.max_read.get() {
            self.max_read.set(j + 1);
        }
        &self.rows[j]
    }

    /// Highest 1-based row index any reader has touched.
    pub fn max_read(&self) -> usize {
        self.max_read.get()
    }
}

/// Per-layer truncation end-points, 1-based; a fresh state starts at 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncationState {
    endpoints: Vec<usize>,
}

impl TruncationState {
    pub fn new(layers: usize) -> Self {
        TruncationState {
            endpoints: vec![1; layers],
        }
    }

    pub fn endpoint(&self, layer: usize) -> usize {
        self.endpoints[layer]
    }

    pub fn endpoints(&self) -> &[usize] {
        &self.endpoints
    }

    pub fn advance(&mut self, layer: usize, endpoint: usize) {
        debug_assert!(endpoint >= self.endpoints[layer], "end-point moved backwards");
        self.endpoints[layer] = endpoint;
    }

    /// The furthest encoder position any layer has committed to reading.
    pub fn receptive_field(&self) -> usize {
        self.endpoints.iter().copied().max().unwrap_or(1)
    }
}

pub enum MtaStep {
    /// Attended context over outputs `1..=endpoint`.
    Context { context: Vec<f64>, endpoint: usize },
    /// The scan ran past every available output without a stopping
    /// probability crossing 0.5 and the stream is still open.
    NeedMoreOutputs,
}

/// One decode-time step for a single query. Scans stopping probabilities
/// forward from `prev_endpoint` (1-based, inclusive); on a closed stream
/// a scan that never crosses 0.5 truncates at the final output.
pub fn mta_decode_step(
    params: &MtaParams,
    query: &[f64],
    enc: &AvailableOutputs,
    prev_endpoint: usize,
) -> Result<MtaStep, MtaError> {
    debug_assert!(prev_endpoint >= 1);
    let d = query.len();
    let avail = enc.available();
    if prev_endpoint > avail {
        return if enc.is_closed() {
            Err(MtaError::EndpointBeyondStream {
                prev: prev_endpoint,
                available: avail,
            })
        } else {
            Ok(MtaStep::NeedMoreOutputs)
        };
    }

    let qp = tensor::vecmat(query, params.q_proj.data(), d, d);
    let wkt = tensor::transpose(params.k_proj.data(), d, d);
    let u = tensor::vecmat(&qp, &wkt, d, d);
    let scale = 1.0 / (d as f64).sqrt();
    let offset = params.offset.data()[0];
    let stop_prob = |j: usize| {
        let logit = tensor::dot(&u, enc.row(j - 1)) * scale + offset;
        tensor::sigmoid_scalar(logit)
    };

    let mut endpoint = None;
    for j in prev_endpoint..=avail {
        if stop_prob(j) > 0.5 {
            endpoint = Some(j);
            break;
        }
    }
    let endpoint = match endpoint {
        Some(j) => j,
        None if enc.is_closed() => avail,
        None => return Ok(MtaStep::NeedMoreOutputs),
    };

    // Same recurrence as the parallel path: weight_j = p_j * keep_j with
    // keep the exclusive running product of (1 - p).
    let mut context = vec![0.0; d];
    let mut keep = 1.0;
    for j in 1..=endpoint {
        let p = stop_prob(j);
        let w = p * keep;
        keep *= 1.0 - p;
        let row = enc.row(j - 1);
        for c in 0..d {
            context[c] += w * row[c];
        }
    }
    let context = tensor::vecmat(&context, params.v_proj.data(), d, d);
    Ok(MtaStep::Context { context, endpoint })
}

/// Decode-time attention weights over `1..=endpoint`, exposed for the
/// train/decode agreement checks.
pub fn decode_weights(
    params: &MtaParams,
    query: &[f64],
    enc: &AvailableOutputs,
    endpoint: usize,
) -> Vec<f64> {
    let d = query.len();
    let qp = tensor::vecmat(query, params.q_proj.data(), d, d);
    let wkt = tensor::transpose(params.k_proj.data(), d, d);
    let u = tensor::vecmat(&qp, &wkt, d, d);
    let scale = 1.0 / (d as f64).sqrt();
    let offset = params.offset.data()[0];
    let mut weights = Vec::with_capacity(endpoint);
    let mut keep = 1.0;
    for j in 1..=endpoint {
        let logit = tensor::dot(&u, enc.row(j - 1)) * scale + offset;
        let p = tensor::sigmoid_scalar(logit);
        weights.push(p * keep);
        keep *= 1.0 - p;
    }
    weights
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(23)
    }

    fn rand_matrix(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(n, m, data).unwrap()
    }

    fn outputs_from(t: &Tensor, closed: bool) -> AvailableOutputs {
        let mut enc = AvailableOutputs::new(t.cols());
        enc.push_rows(t).unwrap();
        if closed {
            enc.close();
        }
        enc
    }

    #[test]
    fn fresh_offset_keeps_stopping_probability_small() {
        let mut r = rng();
        let d = 4;
        let params = MtaParams::init(d, &mut r);
        assert_eq!(params.offset.data()[0], -4.0);
        // A zero logit plus the offset lands at sigmoid(-4).
        let p = tensor::sigmoid_scalar(OFFSET_INIT);
        assert!((p - 0.0179862099620916).abs() < 1e-13);
    }

    #[test]
    fn weight_rows_sum_below_one() {
        let mut r = rng();
        let d = 6;
        let params = MtaParams::init(d, &mut r);
        let queries = rand_matrix(3, d, &mut r);
        let keys = rand_matrix(5, d, &mut r);

        let mut g = Graph::new();
        let vars = params.bind(&mut g, "mta");
        let qv = g.leaf(queries);
        let kv = g.leaf(keys);
        let p = stop_probs_var(&mut g, &vars, qv, kv, &mut Phase::Eval).unwrap();
        let one_minus = g.affine(p, -1.0, 1.0);
        let keep = g.exclusive_cumprod_rows(one_minus).unwrap();
        let w = g.mul(p, keep).unwrap();

        let pt = g.detach(p);
        let wt = g.detach(w);
        for i in 0..3 {
            let sum: f64 = wt.row(i).iter().sum();
            let survive: f64 = pt.row(i).iter().map(|p| 1.0 - p).product();
            assert!(wt.row(i).iter().all(|x| *x >= 0.0));
            assert!(sum < 1.0);
            assert!((sum - (1.0 - survive)).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_perturbs_training_probabilities_only() {
        let mut r = rng();
        let d = 4;
        let params = MtaParams::init(d, &mut r);
        let queries = rand_matrix(2, d, &mut r);
        let keys = rand_matrix(3, d, &mut r);
        let run = |phase: &mut Phase| {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, "mta");
            let qv = g.leaf(queries.clone());
            let kv = g.leaf(keys.clone());
            let p = stop_probs_var(&mut g, &vars, qv, kv, phase).unwrap();
            g.detach(p)
        };
        let eval1 = run(&mut Phase::Eval);
        let eval2 = run(&mut Phase::Eval);
        assert_eq!(eval1.data(), eval2.data());
        let mut noise_rng = ChaCha8Rng::seed_from_u64(1);
        let mut train = Phase::Train {
            dropout: 0.0,
            mta_noise: true,
            rng: &mut noise_rng,
        };
        let noisy = run(&mut train);
        assert!(eval1.data().iter().zip(noisy.data()).any(|(a, b)| a != b));
    }

    #[test]
    fn decode_weights_match_parallel_weights() {
        let mut r = rng();
        let d = 6;
        let m = 7;
        let params = MtaParams::init(d, &mut r);
        let queries = rand_matrix(3, d, &mut r);
        let keys = rand_matrix(m, d, &mut r);

        let mut g = Graph::new();
        let vars = params.bind(&mut g, "mta");
        let qv = g.leaf(queries.clone());
        let kv = g.leaf(keys.clone());
        let p = stop_probs_var(&mut g, &vars, qv, kv, &mut Phase::Eval).unwrap();
        let one_minus = g.affine(p, -1.0, 1.0);
        let keep = g.exclusive_cumprod_rows(one_minus).unwrap();
        let w = g.mul(p, keep).unwrap();
        let train_w = g.detach(w);

        let enc = outputs_from(&keys, true);
        for i in 0..3 {
            let dec = decode_weights(&params, queries.row(i), &enc, m);
            for (a, b) in dec.iter().zip(train_w.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_stream_truncates_at_final_output() {
        let mut r = rng();
        let d = 4;
        let mut params = MtaParams::init(d, &mut r);
        // Hugely negative offset: no stopping probability ever crosses 0.5.
        params.offset = Tensor::scalar(-50.0);
        let keys = rand_matrix(5, d, &mut r);
        let q = rand_matrix(1, d, &mut r);

        let enc = outputs_from(&keys, true);
        match mta_decode_step(&params, q.row(0), &enc, 1).unwrap() {
            MtaStep::Context { endpoint, .. } => assert_eq!(endpoint, 5),
            MtaStep::NeedMoreOutputs => panic!("closed stream must truncate"),
        }

        let open = outputs_from(&keys, false);
        assert!(matches!(
            mta_decode_step(&params, q.row(0), &open, 1).unwrap(),
            MtaStep::NeedMoreOutputs
        ));
    }

    #[test]
    fn truncated_context_matches_full_attention_on_closed_stream() {
        let mut r = rng();
        let d = 6;
        let m = 5;
        let mut params = MtaParams::init(d, &mut r);
        // Low enough that no probability crosses 0.5, high enough that the
        // compared weights stay far from underflow.
        params.offset = Tensor::scalar(-6.0);
        let queries = rand_matrix(2, d, &mut r);
        let keys = rand_matrix(m, d, &mut r);

        let mut g = Graph::new();
        let vars = params.bind(&mut g, "mta");
        let qv = g.leaf(queries.clone());
        let kv = g.leaf(keys.clone());
        let full = mta_attend_var(&mut g, &vars, qv, kv, kv, &mut Phase::Eval).unwrap();
        let full = g.detach(full);

        let enc = outputs_from(&keys, true);
        for i in 0..2 {
            match mta_decode_step(&params, queries.row(i), &enc, 1).unwrap() {
                MtaStep::Context { context, endpoint } => {
                    assert_eq!(endpoint, m);
                    for (a, b) in context.iter().zip(full.row(i)) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
                MtaStep::NeedMoreOutputs => panic!("closed stream must produce context"),
            }
        }
    }

    #[test]
    fn scan_starts_at_previous_endpoint() {
        let d = 2;
        // Identity projections, zero offset: logit is q.k / sqrt(2).
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let params = MtaParams {
            q_proj: eye.clone(),
            k_proj: eye.clone(),
            v_proj: eye,
            offset: Tensor::scalar(0.0),
        };
        // Keys 0 and 2 produce positive logits, key 1 negative.
        let keys = Tensor::matrix(3, d, vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap();
        let q = [1.0, 0.0];
        let enc = outputs_from(&keys, true);
        match mta_decode_step(&params, &q, &enc, 1).unwrap() {
            MtaStep::Context { endpoint, .. } => assert_eq!(endpoint, 1),
            _ => panic!(),
        }
        // Starting past position 1, the next crossing is position 3.
        match mta_decode_step(&params, &q, &enc, 2).unwrap() {
            MtaStep::Context { endpoint, .. } => assert_eq!(endpoint, 3),
            _ => panic!(),
        }
    }

    #[test]
    fn stale_endpoint_on_closed_stream_is_an_error() {
        let mut r = rng();
        let params = MtaParams::init(4, &mut r);
        let keys = rand_matrix(2, 4, &mut r);
        let q = rand_matrix(1, 4, &mut r);
        let enc = outputs_from(&keys, true);
        assert!(matches!(
            mta_decode_step(&params, q.row(0), &enc, 3),
            Err(MtaError::EndpointBeyondStream { prev: 3, available: 2 })
        ));
        let open = outputs_from(&keys, false);
        assert!(matches!(
            mta_decode_step(&params, q.row(0), &open, 3).unwrap(),
            MtaStep::NeedMoreOutputs
        ));
    }

    #[test]
    fn reads_never_pass_the_endpoint_scan() {
        let mut r = rng();
        let d = 4;
        let mut params = MtaParams::init(d, &mut r);
        params.offset = Tensor::scalar(50.0); // stop immediately
        let keys = rand_matrix(6, d, &mut r);
        let q = rand_matrix(1, d, &mut r);
        let enc = outputs_from(&keys, false);
        match mta_decode_step(&params, q.row(0), &enc, 1).unwrap() {
            MtaStep::Context { endpoint, .. } => {
                assert_eq!(endpoint, 1);
                assert_eq!(enc.max_read(), 1);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn truncation_state_tracks_the_furthest_layer() {
        let mut st = TruncationState::new(2);
        assert_eq!(st.receptive_field(), 1);
        st.advance(0, 3);
        st.advance(1, 2);
        assert_eq!(st.endpoint(0), 3);
        assert_eq!(st.receptive_field(), 3);
    }

    #[test]
    fn outputs_buffer_guards_width_and_close() {
        let mut enc = AvailableOutputs::new(3);
        let bad = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            enc.push_rows(&bad),
            Err(MtaError::Width { expected: 3, got: 2 })
        ));
        let good = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        enc.push_rows(&good).unwrap();
        enc.close();
        assert!(matches!(enc.push_rows(&good), Err(MtaError::Closed)));
        assert_eq!(enc.available(), 2);
    }
}
