//! CTC loss and incremental prefix scoring.
//!
//! Everything is log-space with a finite floor instead of -inf. Blank is
//! class 0 throughout. Prefix scores are maintained per hypothesis and
//! extended frame-by-frame as more encoder outputs arrive, so a growing
//! stream never forces a recompute from scratch.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{log_add, Graph, Tensor, Var, LOG_ZERO};

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("label sequence needs at least {needed} frames, table has {got}")]
    Infeasible { needed: usize, got: usize },
    #[error("label {label} out of range for vocab {vocab} (blank=0 not allowed)")]
    BadLabel { label: usize, vocab: usize },
    #[error("log-prob table must be a matrix, got shape {shape:?}")]
    BadTable { shape: Vec<usize> },
    #[error("frame row has {got} entries, table vocab is {vocab}")]
    BadFrame { got: usize, vocab: usize },
    #[error("scoring horizon {horizon} exceeds available frames {frames}")]
    HorizonBeyondTable { horizon: usize, frames: usize },
    #[error("scoring horizon {new} is below an earlier horizon {old} for the same prefix")]
    HorizonRegression { old: usize, new: usize },
}

/// Minimum frame count that can align a label sequence: one frame per
/// label plus a separating blank between adjacent repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn validate_labels(vocab: usize, labels: &[usize]) -> Result<(), CtcError> {
    for &l in labels {
        if l == 0 || l >= vocab {
            return Err(CtcError::BadLabel { label: l, vocab });
        }
    }
    Ok(())
}

/// Symbol of state `s` in the blank-interleaved label sequence.
fn ext_sym(labels: &[usize], s: usize) -> usize {
    if s % 2 == 0 {
        0
    } else {
        labels[s / 2]
    }
}

/// Forward (alpha) recursion; returns the negative log-likelihood of the
/// label sequence under the table.
pub(crate) fn nll_from_table(log_probs: &Tensor, labels: &[usize]) -> Result<f64, CtcError> {
    if log_probs.shape().len() != 2 {
        return Err(CtcError::BadTable {
            shape: log_probs.shape().to_vec(),
        });
    }
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    validate_labels(vocab, labels)?;
    let needed = min_frames(labels);
    if frames < needed {
        return Err(CtcError::Infeasible {
            needed,
            got: frames,
        });
    }
    if frames == 0 {
        return Ok(0.0);
    }
    let alpha = alpha_table(log_probs, labels);
    let states = 2 * labels.len() + 1;
    let last = &alpha[(frames - 1) * states..frames * states];
    let mut total = last[states - 1];
    if states >= 2 {
        total = log_add(total, last[states - 2]);
    }
    Ok(-total)
}

fn alpha_table(log_probs: &Tensor, labels: &[usize]) -> Vec<f64> {
    let (frames, _) = (log_probs.rows(), log_probs.cols());
    let states = 2 * labels.len() + 1;
    let mut alpha = vec![LOG_ZERO; frames * states];
    alpha[0] = log_probs.at(0, 0);
    if states > 1 {
        alpha[1] = log_probs.at(0, ext_sym(labels, 1));
    }
    for t in 1..frames {
        for s in 0..states {
            let sym = ext_sym(labels, s);
            let mut m = alpha[(t - 1) * states + s];
            if s >= 1 {
                m = log_add(m, alpha[(t - 1) * states + s - 1]);
            }
            if s >= 2 && sym != 0 && sym != ext_sym(labels, s - 2) {
                m = log_add(m, alpha[(t - 1) * states + s - 2]);
            }
            alpha[t * states + s] = if m <= LOG_ZERO {
                LOG_ZERO
            } else {
                m + log_probs.at(t, sym)
            };
        }
    }
    alpha
}

/// Per-frame class posteriors under the label alignment lattice; the
/// gradient of the nll with respect to entry (t, k) is minus this.
pub(crate) fn label_posteriors(log_probs: &Tensor, labels: &[usize]) -> Vec<f64> {
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    let states = 2 * labels.len() + 1;
    if frames == 0 {
        return vec![];
    }
    let alpha = alpha_table(log_probs, labels);

    // Beta excludes the current frame: suffix mass over frames t+1..
    let mut beta = vec![LOG_ZERO; frames * states];
    beta[(frames - 1) * states + states - 1] = 0.0;
    if states >= 2 {
        beta[(frames - 1) * states + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut m = beta[(t + 1) * states + s] + log_probs.at(t + 1, ext_sym(labels, s));
            if s + 1 < states {
                m = log_add(
                    m,
                    beta[(t + 1) * states + s + 1] + log_probs.at(t + 1, ext_sym(labels, s + 1)),
                );
            }
            if s + 2 < states {
                let sym2 = ext_sym(labels, s + 2);
                if sym2 != 0 && sym2 != ext_sym(labels, s) {
                    m = log_add(m, beta[(t + 1) * states + s + 2] + log_probs.at(t + 1, sym2));
                }
            }
            beta[t * states + s] = m;
        }
    }

    let last = &alpha[(frames - 1) * states..frames * states];
    let mut log_p = last[states - 1];
    if states >= 2 {
        log_p = log_add(log_p, last[states - 2]);
    }

    let mut post = vec![0.0; frames * vocab];
    for t in 0..frames {
        for s in 0..states {
            let joint = alpha[t * states + s] + beta[t * states + s];
            if joint <= LOG_ZERO {
                continue;
            }
            post[t * vocab + ext_sym(labels, s)] += (joint - log_p).exp();
        }
    }
    post
}

/// Differentiable CTC negative log-likelihood over a `frames x vocab`
/// log-prob table already on the tape.
pub fn ctc_loss(graph: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Var, CtcError> {
    let nll = nll_from_table(graph.value(log_probs), labels)?;
    Ok(graph.ctc_nll_node(log_probs, labels.to_vec(), nll))
}

// ── Prefix scoring ─────────────────────────────────────────────────────

/// Per-frame log-probability table that grows as encoder outputs arrive.
#[derive(Debug, Clone)]
pub struct CtcTable {
    vocab: usize,
    logp: Vec<f64>,
    frames: usize,
}

impl CtcTable {
    pub fn new(vocab: usize) -> Self {
        CtcTable {
            vocab,
            logp: Vec::new(),
            frames: 0,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, CtcError> {
        if t.shape().len() != 2 {
            return Err(CtcError::BadTable {
                shape: t.shape().to_vec(),
            });
        }
        Ok(CtcTable {
            vocab: t.cols(),
            logp: t.data().to_vec(),
            frames: t.rows(),
        })
    }

    pub fn push_frame(&mut self, row: &[f64]) -> Result<(), CtcError> {
        if row.len() != self.vocab {
            return Err(CtcError::BadFrame {
                got: row.len(),
                vocab: self.vocab,
            });
        }
        self.logp.extend_from_slice(row);
        self.frames += 1;
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn lp(&self, t: usize, k: usize) -> f64 {
        self.logp[t * self.vocab + k]
    }

    /// Truncate to the first `frames` rows; test support for consistency
    /// checks against streams that genuinely end early.
    pub fn truncated(&self, frames: usize) -> CtcTable {
        CtcTable {
            vocab: self.vocab,
            logp: self.logp[..frames * self.vocab].to_vec(),
            frames,
        }
    }
}

struct PrefixNode {
    parent: Option<Rc<RefCell<PrefixNode>>>,
    token: usize,
    // gamma_*[t]: log mass of length-(t+1) frame paths collapsing to exactly
    // this prefix, split by whether the path ends in a non-blank or a blank.
    gamma_n: Vec<f64>,
    gamma_b: Vec<f64>,
    // psi[t]: log mass of paths whose collapse *starts with* this prefix,
    // using frames 0..=t. Cumulative, so any earlier horizon stays readable.
    psi: Vec<f64>,
    // Horizons must not move backwards for a given prefix.
    max_horizon: usize,
}

impl PrefixNode {
    fn is_root(&self) -> bool {
        self.parent.is_none()
    }

    fn gamma_n_before(&self, t: usize) -> f64 {
        if t == 0 {
            LOG_ZERO
        } else {
            self.gamma_n[t - 1]
        }
    }

    fn gamma_b_before(&self, t: usize) -> f64 {
        if t == 0 {
            if self.is_root() {
                0.0
            } else {
                LOG_ZERO
            }
        } else {
            self.gamma_b[t - 1]
        }
    }
}

/// Handle to one prefix in the scoring lattice. Cloning is cheap; children
/// keep their parent alive so late extensions can replay the recursion.
#[derive(Clone)]
pub struct CtcPrefix {
    node: Rc<RefCell<PrefixNode>>,
}

impl CtcPrefix {
    /// The empty prefix. Its score is 0 (log of probability 1) at every
    /// horizon.
    pub fn root() -> Self {
        CtcPrefix {
            node: Rc::new(RefCell::new(PrefixNode {
                parent: None,
                token: 0,
                gamma_n: Vec::new(),
                gamma_b: Vec::new(),
                psi: Vec::new(),
                max_horizon: 0,
            })),
        }
    }

    pub fn last_token(&self) -> Option<usize> {
        let n = self.node.borrow();
        if n.is_root() {
            None
        } else {
            Some(n.token)
        }
    }

    /// Child prefix `self . token`. Forward variables materialize lazily.
    pub fn child(&self, token: usize) -> CtcPrefix {
        CtcPrefix {
            node: Rc::new(RefCell::new(PrefixNode {
                parent: Some(self.node.clone()),
                token,
                gamma_n: Vec::new(),
                gamma_b: Vec::new(),
                psi: Vec::new(),
                max_horizon: 0,
            })),
        }
    }

    /// Materialize forward variables up to `horizon` frames, recursively
    /// extending ancestors first.
    pub fn extend_to(&self, table: &CtcTable, horizon: usize) -> Result<(), CtcError> {
        if horizon > table.frames() {
            return Err(CtcError::HorizonBeyondTable {
                horizon,
                frames: table.frames(),
            });
        }
        let parent = self.node.borrow().parent.clone();
        if let Some(p) = &parent {
            CtcPrefix { node: p.clone() }.extend_to(table, horizon)?;
        }
        let mut n = self.node.borrow_mut();
        let from = n.gamma_n.len();
        if from >= horizon {
            return Ok(());
        }
        if n.is_root() {
            for t in from..horizon {
                let prev = if t == 0 { 0.0 } else { n.gamma_b[t - 1] };
                n.gamma_b.push(prev + table.lp(t, 0));
                n.gamma_n.push(LOG_ZERO);
                n.psi.push(0.0);
            }
            return Ok(());
        }
        let p = parent.unwrap();
        let p = p.borrow();
        let c = n.token;
        let same_as_parent_last = !p.is_root() && p.token == c;
        for t in from..horizon {
            let mut phi = p.gamma_b_before(t);
            if !same_as_parent_last {
                phi = log_add(phi, p.gamma_n_before(t));
            }
            let gn_prev = n.gamma_n_before(t);
            let gb_prev = n.gamma_b_before(t);
            let gn = {
                let m = log_add(phi, gn_prev);
                if m <= LOG_ZERO {
                    LOG_ZERO
                } else {
                    m + table.lp(t, c)
                }
            };
            let gb = {
                let m = log_add(gb_prev, gn_prev);
                if m <= LOG_ZERO {
                    LOG_ZERO
                } else {
                    m + table.lp(t, 0)
                }
            };
            let new_mass = if phi <= LOG_ZERO {
                LOG_ZERO
            } else {
                phi + table.lp(t, c)
            };
            let psi_prev = if t == 0 { LOG_ZERO } else { n.psi[t - 1] };
            n.gamma_n.push(gn);
            n.gamma_b.push(gb);
            n.psi.push(log_add(psi_prev, new_mass));
        }
        Ok(())
    }

    fn check_horizon(&self, horizon: usize) -> Result<(), CtcError> {
        let mut n = self.node.borrow_mut();
        if horizon < n.max_horizon {
            return Err(CtcError::HorizonRegression {
                old: n.max_horizon,
                new: horizon,
            });
        }
        n.max_horizon = horizon;
        Ok(())
    }

    /// Log mass of outputs starting with this prefix, over exactly the
    /// first `horizon` frames.
    pub fn prefix_score(&self, table: &CtcTable, horizon: usize) -> Result<f64, CtcError> {
        self.check_horizon(horizon)?;
        self.prefix_mass(table, horizon)
    }

    /// Log mass of outputs starting with `self . token`, over exactly the
    /// first `horizon` frames. Equals `child(token).prefix_score(...)`
    /// without materializing the child.
    pub fn extension_score(
        &self,
        table: &CtcTable,
        token: usize,
        horizon: usize,
    ) -> Result<f64, CtcError> {
        self.check_horizon(horizon)?;
        self.extension_mass(table, token, horizon)
    }

    /// [`CtcPrefix::extension_score`] without the monotone-horizon
    /// bookkeeping.
    pub fn extension_mass(
        &self,
        table: &CtcTable,
        token: usize,
        horizon: usize,
    ) -> Result<f64, CtcError> {
        if token == 0 || token >= table.vocab() {
            return Err(CtcError::BadLabel {
                label: token,
                vocab: table.vocab(),
            });
        }
        self.extend_to(table, horizon)?;
        let n = self.node.borrow();
        let same = !n.is_root() && n.token == token;
        let mut psi = LOG_ZERO;
        for t in 0..horizon {
            let mut phi = n.gamma_b_before(t);
            if !same {
                phi = log_add(phi, n.gamma_n_before(t));
            }
            let mass = if phi <= LOG_ZERO {
                LOG_ZERO
            } else {
                phi + table.lp(t, token)
            };
            psi = log_add(psi, mass);
        }
        Ok(psi)
    }

    /// Like [`CtcPrefix::prefix_score`] but without the monotone-horizon
    /// bookkeeping: a pure read, usable at horizons ahead of where the
    /// hypothesis itself is being scored (upper-bound pruning needs this).
    pub fn prefix_mass(&self, table: &CtcTable, horizon: usize) -> Result<f64, CtcError> {
        self.extend_to(table, horizon)?;
        let n = self.node.borrow();
        if n.is_root() {
            return Ok(0.0);
        }
        if horizon == 0 {
            return Ok(LOG_ZERO);
        }
        Ok(n.psi[horizon - 1])
    }

    /// Log mass of outputs equal to exactly this prefix over the first
    /// `horizon` frames; the score of terminating here.
    pub fn terminal_score(&self, table: &CtcTable, horizon: usize) -> Result<f64, CtcError> {
        self.check_horizon(horizon)?;
        self.terminal_mass(table, horizon)
    }

    /// [`CtcPrefix::terminal_score`] without the monotone-horizon
    /// bookkeeping.
    pub fn terminal_mass(&self, table: &CtcTable, horizon: usize) -> Result<f64, CtcError> {
        self.extend_to(table, horizon)?;
        let n = self.node.borrow();
        if horizon == 0 {
            return Ok(if n.is_root() { 0.0 } else { LOG_ZERO });
        }
        Ok(log_add(n.gamma_n[horizon - 1], n.gamma_b[horizon - 1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_table(frames: usize, vocab: usize) -> CtcTable {
        let lp = (1.0 / vocab as f64).ln();
        let mut t = CtcTable::new(vocab);
        for _ in 0..frames {
            t.push_frame(&vec![lp; vocab]).unwrap();
        }
        t
    }

    fn table_tensor(t: &CtcTable) -> Tensor {
        Tensor::matrix(t.frames(), t.vocab(), t.logp.clone()).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let lp = Tensor::matrix(1, 3, vec![(0.2f64).ln(), (0.5f64).ln(), (0.3f64).ln()]).unwrap();
        let nll = nll_from_table(&lp, &[1]).unwrap();
        assert!((nll - -(0.5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_labels_is_all_blank_mass() {
        let lp = Tensor::matrix(3, 3, vec![(1.0f64 / 3.0).ln(); 9]).unwrap();
        let nll = nll_from_table(&lp, &[]).unwrap();
        assert!((nll - 3.0 * (3.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn infeasible_label_length() {
        let lp = Tensor::matrix(2, 3, vec![(1.0f64 / 3.0).ln(); 6]).unwrap();
        // "aa" needs 3 frames (a, blank, a).
        let err = nll_from_table(&lp, &[1, 1]).unwrap_err();
        assert!(matches!(err, CtcError::Infeasible { needed: 3, got: 2 }));
    }

    #[test]
    fn blank_inside_labels_rejected() {
        let lp = Tensor::matrix(3, 3, vec![(1.0f64 / 3.0).ln(); 9]).unwrap();
        assert!(matches!(
            nll_from_table(&lp, &[0]),
            Err(CtcError::BadLabel { .. })
        ));
    }

    #[test]
    fn posteriors_sum_to_one_per_frame() {
        let lp = Tensor::matrix(
            4,
            3,
            crate::tensor::log_softmax_rows(
                &[0.3, -0.7, 1.1, 0.0, 0.2, -0.1, 1.5, 0.4, -2.0, 0.9, 0.1, 0.3],
                4,
                3,
            ),
        )
        .unwrap();
        let post = label_posteriors(&lp, &[1, 2]);
        for t in 0..4 {
            let s: f64 = post[t * 3..(t + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "frame {t}: {s}");
        }
    }

    #[test]
    fn prefix_mass_small_case() {
        // Two frames, uniform over {blank, a}: P(output starts with "a")
        // after one frame is 1/2, after two frames 3/4.
        let table = uniform_table(2, 2);
        let root = CtcPrefix::root();
        assert!((root.extension_score(&table, 1, 1).unwrap() - (0.5f64).ln()).abs() < 1e-12);
        let root2 = CtcPrefix::root();
        assert!((root2.extension_score(&table, 1, 2).unwrap() - (0.75f64).ln()).abs() < 1e-12);
        let child = root2.child(1);
        assert!((child.prefix_score(&table, 2).unwrap() - (0.75f64).ln()).abs() < 1e-12);
        assert!((child.terminal_score(&table, 2).unwrap() - (0.75f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_prefix_scores_zero_at_any_horizon() {
        let table = uniform_table(5, 3);
        let root = CtcPrefix::root();
        for h in 0..=5 {
            assert_eq!(root.prefix_score(&table, h).unwrap(), 0.0);
        }
    }

    #[test]
    fn horizon_regression_is_an_error() {
        let table = uniform_table(4, 3);
        let root = CtcPrefix::root();
        let child = root.child(1);
        child.prefix_score(&table, 3).unwrap();
        assert!(matches!(
            child.prefix_score(&table, 2),
            Err(CtcError::HorizonRegression { old: 3, new: 2 })
        ));
    }

    #[test]
    fn mass_bookkeeping_splits_exactly() {
        let table = uniform_table(4, 3);
        let root = CtcPrefix::root();
        let g = root.child(2);
        let tau = 4;
        let prefix = g.prefix_score(&table, tau).unwrap();
        let mut mass = g.terminal_score(&table, tau).unwrap().exp();
        for c in 1..3 {
            mass += g.extension_score(&table, c, tau).unwrap().exp();
        }
        assert!((mass - prefix.exp()).abs() < 1e-9, "{mass} vs {}", prefix.exp());
    }

    #[test]
    fn loss_matches_truncated_full_computation() {
        let table = uniform_table(5, 3);
        let t3 = table.truncated(3);
        let full = nll_from_table(&table_tensor(&t3), &[1]).unwrap();
        // Terminal mass at horizon 3 is the same quantity from the prefix side.
        let root = CtcPrefix::root();
        let child = root.child(1);
        let term = child.terminal_score(&table, 3).unwrap();
        assert!((full + term).abs() < 1e-9);
    }
}
