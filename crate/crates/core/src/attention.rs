//! Scaled dot-product attention, multi-head projections, sinusoidal
//! positions and the position-wise feed-forward block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{self, ops, Graph, Mask, Tensor, TensorError, Var};

/// Xavier-style uniform init.
pub(crate) fn init_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub(crate) fn init_vector(len: usize, value: f64) -> Tensor {
    Tensor::new(vec![len], vec![value; len]).unwrap()
}

/// One attention head's projections, each `d_model x d_head`.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
}

/// Multi-head attention parameters; `d_head = d_model / heads`.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub out_proj: Tensor,
}

impl MultiHeadParams {
    pub fn init(d_model: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        if heads == 0 || d_model % heads != 0 {
            return Err(TensorError::DimMismatch {
                op: "multi_head_init",
                lhs: vec![d_model],
                rhs: vec![heads],
            });
        }
        let d_head = d_model / heads;
        let heads = (0..heads)
            .map(|_| HeadParams {
                q_proj: init_matrix(d_model, d_head, rng),
                k_proj: init_matrix(d_model, d_head, rng),
                v_proj: init_matrix(d_model, d_head, rng),
            })
            .collect();
        Ok(MultiHeadParams {
            heads,
            out_proj: init_matrix(d_model, d_model, rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.out_proj.rows()
    }
}

pub struct HeadVars {
    pub q_proj: Var,
    pub k_proj: Var,
    pub v_proj: Var,
}

pub struct MultiHeadVars {
    pub heads: Vec<HeadVars>,
    pub out_proj: Var,
}

impl MultiHeadParams {
    pub fn bind(&self, g: &mut Graph, prefix: &str) -> MultiHeadVars {
        MultiHeadVars {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(h, head)| HeadVars {
                    q_proj: g.param(&format!("{prefix}.h{h}.q_proj"), &head.q_proj),
                    k_proj: g.param(&format!("{prefix}.h{h}.k_proj"), &head.k_proj),
                    v_proj: g.param(&format!("{prefix}.h{h}.v_proj"), &head.v_proj),
                })
                .collect(),
            out_proj: g.param(&format!("{prefix}.out_proj"), &self.out_proj),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (h, head) in self.heads.iter().enumerate() {
            f(&format!("{prefix}.h{h}.q_proj"), &head.q_proj);
            f(&format!("{prefix}.h{h}.k_proj"), &head.k_proj);
            f(&format!("{prefix}.h{h}.v_proj"), &head.v_proj);
        }
        f(&format!("{prefix}.out_proj"), &self.out_proj);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (h, head) in self.heads.iter_mut().enumerate() {
            f(&format!("{prefix}.h{h}.q_proj"), &mut head.q_proj);
            f(&format!("{prefix}.h{h}.k_proj"), &mut head.k_proj);
            f(&format!("{prefix}.h{h}.v_proj"), &mut head.v_proj);
        }
        f(&format!("{prefix}.out_proj"), &mut self.out_proj);
    }
}

/// Position-wise feed-forward parameters: expand, rectify, contract.
#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForwardParams {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForwardParams {
            w1: init_matrix(d_model, d_ff, rng),
            b1: init_vector(d_ff, 0.0),
            w2: init_matrix(d_ff, d_model, rng),
            b2: init_vector(d_model, 0.0),
        }
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> FeedForwardVars {
        FeedForwardVars {
            w1: g.param(&format!("{prefix}.w1"), &self.w1),
            b1: g.param(&format!("{prefix}.b1"), &self.b1),
            w2: g.param(&format!("{prefix}.w2"), &self.w2),
            b2: g.param(&format!("{prefix}.b2"), &self.b2),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

// ── Plain forward ──────────────────────────────────────────────────────

/// Attention output plus indices of query rows whose mask allowed nothing;
/// those rows are all zeros.
pub struct Attended {
    pub output: Tensor,
    pub empty_rows: Vec<usize>,
}

/// Softmax(Q Kᵀ / sqrt(width)) V with an optional allow-mask. The scale
/// comes from the width of the given queries, so callers that pre-project
/// to a head dimension get the per-head scale automatically.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Mask>,
) -> Result<Attended, TensorError> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(TensorError::NotAMatrix {
            op: "scaled_dot_attention",
            shape: q.shape().to_vec(),
        });
    }
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(TensorError::DimMismatch {
            op: "scaled_dot_attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let scores = attention_scores(q, k)?;
    let soft = ops::softmax_rows(&scores, mask)?;
    Ok(Attended {
        output: ops::matmul(&soft.probs, v)?,
        empty_rows: soft.empty_rows,
    })
}

/// The pre-softmax score matrix Q Kᵀ / sqrt(width); exposed so tests can
/// check the weight simplex directly.
pub fn attention_scores(q: &Tensor, k: &Tensor) -> Result<Tensor, TensorError> {
    let kt = Tensor::new(
        vec![k.cols(), k.rows()],
        tensor::transpose(k.data(), k.rows(), k.cols()),
    )?;
    let mut scores = ops::matmul(q, &kt)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    for s in scores.data_mut() {
        *s *= scale;
    }
    Ok(scores)
}

/// Multi-head attention on plain tensors; used by the incremental decode
/// path where no gradients are needed.
pub fn multi_head_attention(
    params: &MultiHeadParams,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Mask>,
) -> Result<Tensor, TensorError> {
    let mut head_outs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let qh = ops::matmul(q, &head.q_proj)?;
        let kh = ops::matmul(k, &head.k_proj)?;
        let vh = ops::matmul(v, &head.v_proj)?;
        head_outs.push(scaled_dot_attention(&qh, &kh, &vh, mask)?.output);
    }
    let n = q.rows();
    let d_head = head_outs[0].cols();
    let d_model = d_head * head_outs.len();
    let mut concat = vec![0.0; n * d_model];
    for (h, out) in head_outs.iter().enumerate() {
        for i in 0..n {
            concat[i * d_model + h * d_head..i * d_model + (h + 1) * d_head]
                .copy_from_slice(out.row(i));
        }
    }
    ops::matmul(&Tensor::new(vec![n, d_model], concat)?, &params.out_proj)
}

/// Sinusoidal position rows for absolute positions `start .. start + len`.
/// Position 0 is `[0, 1, 0, 1, ...]`.
pub fn sinusoidal_positions(len: usize, start: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d_model);
    for r in 0..len {
        let pos = (start + r) as f64;
        for j in 0..d_model {
            let pair = (j - j % 2) as f64;
            let rate = 10000f64.powf(pair / d_model as f64);
            let angle = pos / rate;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d_model], data).unwrap()
}

/// relu(x W1 + b1) W2 + b2 on plain tensors.
pub fn feed_forward(params: &FeedForwardParams, x: &Tensor) -> Result<Tensor, TensorError> {
    let mut h = ops::matmul(x, &params.w1)?;
    for i in 0..h.rows() {
        for j in 0..h.cols() {
            let idx = i * params.b1.len() + j;
            h.data_mut()[idx] = (h.data()[idx] + params.b1.data()[j]).max(0.0);
        }
    }
    let mut out = ops::matmul(&h, &params.w2)?;
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            out.data_mut()[i * params.b2.len() + j] += params.b2.data()[j];
        }
    }
    Ok(out)
}

// ── Tape forward ───────────────────────────────────────────────────────

/// Tape version of [`scaled_dot_attention`].
pub fn scaled_dot_attention_var(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var, TensorError> {
    let width = g.value(q).cols();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.affine(scores, 1.0 / (width as f64).sqrt(), 0.0);
    let probs = g.softmax_rows(scaled, mask)?;
    g.matmul(probs, v)
}

/// Tape version of [`multi_head_attention`].
pub fn multi_head_attention_var(
    g: &mut Graph,
    vars: &MultiHeadVars,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var, TensorError> {
    let mut head_outs = Vec::with_capacity(vars.heads.len());
    for head in &vars.heads {
        let qh = g.matmul(q, head.q_proj)?;
        let kh = g.matmul(k, head.k_proj)?;
        let vh = g.matmul(v, head.v_proj)?;
        head_outs.push(scaled_dot_attention_var(g, qh, kh, vh, mask)?);
    }
    let concat = g.concat_cols(&head_outs)?;
    g.matmul(concat, vars.out_proj)
}

/// Tape version of [`feed_forward`].
pub fn feed_forward_var(
    g: &mut Graph,
    vars: &FeedForwardVars,
    x: Var,
) -> Result<Var, TensorError> {
    let h = g.matmul(x, vars.w1)?;
    let h = g.add_row(h, vars.b1)?;
    let h = g.relu(h);
    let out = g.matmul(h, vars.w2)?;
    g.add_row(out, vars.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_matrix(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, m], data).unwrap()
    }

    #[test]
    fn single_key_returns_that_value() {
        let q = Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap();
        let k = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let v = Tensor::matrix(1, 2, vec![5.0, -2.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert_eq!(out.output.data(), v.data());
    }

    #[test]
    fn one_hot_mask_selects_exact_rows() {
        let mut r = rng();
        let q = rand_matrix(3, 4, &mut r);
        let k = rand_matrix(3, 4, &mut r);
        let v = rand_matrix(3, 4, &mut r);
        let mask = Mask::from_fn(3, 3, |i, j| i == j);
        let out = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        for i in 0..3 {
            assert_eq!(out.output.row(i), v.row(i));
        }
    }

    #[test]
    fn empty_mask_row_is_zero_and_flagged() {
        let mut r = rng();
        let q = rand_matrix(2, 4, &mut r);
        let k = rand_matrix(3, 4, &mut r);
        let v = rand_matrix(3, 4, &mut r);
        let mask = Mask::from_fn(2, 3, |i, _| i == 0);
        let out = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(out.empty_rows, vec![1]);
        assert!(out.output.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_weights_form_a_simplex() {
        let mut r = rng();
        let q = rand_matrix(4, 6, &mut r);
        let k = rand_matrix(5, 6, &mut r);
        let scores = attention_scores(&q, &k).unwrap();
        let probs = crate::tensor::ops::softmax_rows(&scores, None).unwrap().probs;
        for i in 0..4 {
            let row = probs.row(i);
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_rows_cannot_leak_through() {
        let mut r = rng();
        let q = rand_matrix(2, 4, &mut r);
        let k = rand_matrix(4, 4, &mut r);
        let v = rand_matrix(4, 4, &mut r);
        let mask = Mask::from_fn(2, 4, |_, j| j < 2);
        let base = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 2..4 {
            for c in 0..4 {
                k2.data_mut()[j * 4 + c] = 1e9;
                v2.data_mut()[j * 4 + c] = -1e9;
            }
        }
        let perturbed = scaled_dot_attention(&q, &k2, &v2, Some(&mask)).unwrap();
        assert_eq!(base.output.data(), perturbed.output.data());
    }

    #[test]
    fn key_value_permutation_equivariance() {
        let mut r = rng();
        let q = rand_matrix(3, 4, &mut r);
        let k = rand_matrix(5, 4, &mut r);
        let v = rand_matrix(5, 4, &mut r);
        let base = scaled_dot_attention(&q, &k, &v, None).unwrap();
        let perm = [4, 2, 0, 1, 3];
        let kp = Tensor::from_rows(&perm.iter().map(|&i| k.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let vp = Tensor::from_rows(&perm.iter().map(|&i| v.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let shuf = scaled_dot_attention(&q, &kp, &vp, None).unwrap();
        for (a, b) in base.output.data().iter().zip(shuf.output.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_head_identity_projections_reduce_to_scaled_dot() {
        let mut r = rng();
        let d = 4;
        let eye = |n: usize| {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                m[i * n + i] = 1.0;
            }
            Tensor::new(vec![n, n], m).unwrap()
        };
        let params = MultiHeadParams {
            heads: vec![HeadParams {
                q_proj: eye(d),
                k_proj: eye(d),
                v_proj: eye(d),
            }],
            out_proj: eye(d),
        };
        let q = rand_matrix(3, d, &mut r);
        let k = rand_matrix(4, d, &mut r);
        let v = rand_matrix(4, d, &mut r);
        let mh = multi_head_attention(&params, &q, &k, &v, None).unwrap();
        let sd = scaled_dot_attention(&q, &k, &v, None).unwrap();
        for (a, b) in mh.data().iter().zip(sd.output.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_matches_per_head_assembly() {
        let mut r = rng();
        let params = MultiHeadParams::init(8, 2, &mut r).unwrap();
        let q = rand_matrix(3, 8, &mut r);
        let k = rand_matrix(5, 8, &mut r);
        let v = rand_matrix(5, 8, &mut r);
        let got = multi_head_attention(&params, &q, &k, &v, None).unwrap();

        // Assemble by hand, head by head.
        let mut concat = vec![vec![0.0; 8]; 3];
        for (h, head) in params.heads.iter().enumerate() {
            let qh = ops::matmul(&q, &head.q_proj).unwrap();
            let kh = ops::matmul(&k, &head.k_proj).unwrap();
            let vh = ops::matmul(&v, &head.v_proj).unwrap();
            let out = scaled_dot_attention(&qh, &kh, &vh, None).unwrap().output;
            for i in 0..3 {
                for j in 0..4 {
                    concat[i][h * 4 + j] = out.at(i, j);
                }
            }
        }
        let want =
            ops::matmul(&Tensor::from_rows(&concat).unwrap(), &params.out_proj).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_width_mismatch_rejected() {
        let mut r = rng();
        assert!(MultiHeadParams::init(6, 4, &mut r).is_err());
    }

    #[test]
    fn position_zero_alternates_zero_one() {
        let pe = sinusoidal_positions(1, 0, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positions_are_absolute() {
        let long = sinusoidal_positions(8, 0, 10);
        let tail = sinusoidal_positions(3, 5, 10);
        for r in 0..3 {
            assert_eq!(long.row(5 + r), tail.row(r));
        }
    }

    #[test]
    fn position_values_bounded() {
        let pe = sinusoidal_positions(50, 13, 8);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn feed_forward_zero_weights_yield_bias() {
        let params = FeedForwardParams {
            w1: Tensor::zeros(vec![3, 5]),
            b1: init_vector(5, 0.0),
            w2: Tensor::zeros(vec![5, 3]),
            b2: Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
        };
        let x = Tensor::matrix(2, 3, vec![0.5; 6]).unwrap();
        let out = feed_forward(&params, &x).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(out.row(1), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn feed_forward_is_position_wise() {
        let mut r = rng();
        let params = FeedForwardParams::init(4, 6, &mut r);
        let x = rand_matrix(3, 4, &mut r);
        let full = feed_forward(&params, &x).unwrap();
        for i in 0..3 {
            let single = Tensor::matrix(1, 4, x.row(i).to_vec()).unwrap();
            let one = feed_forward(&params, &single).unwrap();
            assert_eq!(one.row(0), full.row(i));
        }
    }

    #[test]
    fn tape_attention_matches_plain() {
        let mut r = rng();
        let params = MultiHeadParams::init(8, 2, &mut r).unwrap();
        let q = rand_matrix(3, 8, &mut r);
        let k = rand_matrix(5, 8, &mut r);
        let v = rand_matrix(5, 8, &mut r);
        let plain = multi_head_attention(&params, &q, &k, &v, None).unwrap();

        let mut g = Graph::new();
        let vars = params.bind(&mut g, "attn");
        let qv = g.leaf(q);
        let kv = g.leaf(k);
        let vv = g.leaf(v);
        let out = multi_head_attention_var(&mut g, &vars, qv, kv, vv, None).unwrap();
        for (a, b) in g.value(out).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
