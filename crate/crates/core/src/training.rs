//! Joint training of the two branches: label-smoothed attention loss plus
//! CTC loss on the shared encoder, a warmup learning-rate schedule, Adam,
//! and trailing-snapshot parameter averaging.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ctc::{self, CtcError};
use crate::decoder::{decoder_train_forward, DecoderError};
use crate::encoder::{encode_utterance, EncodeError, EncodeMode};
use crate::model::{Model, ModelVars, Phase, BOUNDARY};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} must lie in 2..{vocab}: 0 is the blank, 1 the boundary")]
    BadLabel { label: usize, vocab: usize },
    #[error("bad training config: {0}")]
    BadConfig(&'static str),
    #[error("empty training set")]
    NoData,
    #[error("snapshot does not match the model at {name}")]
    SnapshotMismatch { name: String },
    #[error("cannot average zero snapshots")]
    NoSnapshots,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Weight of the attention branch; the CTC branch gets the rest.
    pub alpha: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
    /// Perturb stopping logits with unit normal noise during training.
    pub mta_noise: bool,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Average the final model over this many trailing epoch snapshots.
    pub average_last: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.7,
            label_smoothing: 0.1,
            dropout: 0.1,
            mta_noise: true,
            warmup_steps: 200,
            lr_scale: 1.0,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            average_last: 5,
        }
    }
}

/// Inverse-square-root schedule with linear warmup; peaks exactly at the
/// warmup step.
pub fn noam_lr(scale: f64, d_model: usize, step: usize, warmup: usize) -> f64 {
    debug_assert!(step >= 1 && warmup >= 1);
    let s = step as f64;
    let w = warmup as f64;
    scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Target rows for label-smoothed cross entropy: the true class keeps
/// `1 - smoothing` extra mass on top of a uniform `smoothing / vocab`.
pub fn smoothed_targets(labels: &[usize], vocab: usize, smoothing: f64) -> Tensor {
    let n = labels.len();
    let off = smoothing / vocab as f64;
    let mut data = vec![off; n * vocab];
    for (i, &l) in labels.iter().enumerate() {
        data[i * vocab + l] += 1.0 - smoothing;
    }
    Tensor::matrix(n, vocab, data).unwrap()
}

/// Mean over rows of the cross entropy between target rows and
/// log-probability rows already on the tape.
pub fn label_smoothed_ce(
    g: &mut Graph,
    log_probs: Var,
    targets: &Tensor,
) -> Result<Var, TensorError> {
    if g.value(log_probs).shape() != targets.shape() {
        return Err(TensorError::DimMismatch {
            op: "label_smoothed_ce",
            lhs: g.value(log_probs).shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let n = targets.rows();
    let q = g.leaf(targets.clone());
    let prod = g.mul(log_probs, q)?;
    let total = g.sum_all(prod);
    Ok(g.affine(total, -1.0 / n as f64, 0.0))
}

pub struct LossParts {
    /// Scalar joint loss, ready for `backward`.
    pub total: Var,
    pub attention_nll: f64,
    pub ctc_nll: f64,
    /// Teacher-forced argmax hits over the target positions.
    pub correct: usize,
    pub positions: usize,
}

/// One utterance forward pass through both branches on a shared encoder.
pub fn joint_loss(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    phase: &mut Phase,
    features: Var,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<LossParts, TrainError> {
    let vocab = model.cfg.vocab;
    if let Some(&bad) = labels.iter().find(|&&l| l <= BOUNDARY || l >= vocab) {
        return Err(TrainError::BadLabel { label: bad, vocab });
    }

    let (enc, _) = encode_utterance(
        g,
        &vars.encoder,
        &model.encoder,
        &model.cfg.chunk,
        EncodeMode::StateReuse,
        phase,
        features,
    )?;

    let logits = g.matmul(enc, vars.ctc_w)?;
    let logits = g.add_row(logits, vars.ctc_b)?;
    let ctc_lp = g.log_softmax_rows(logits)?;
    let ctc_nll = ctc::ctc_loss(g, ctc_lp, labels)?;

    let mut inputs = Vec::with_capacity(labels.len() + 1);
    inputs.push(BOUNDARY);
    inputs.extend_from_slice(labels);
    let mut targets = labels.to_vec();
    targets.push(BOUNDARY);

    let dec_lp = decoder_train_forward(g, &vars.decoder, &inputs, enc, phase)?;
    let q = smoothed_targets(&targets, vocab, cfg.label_smoothing);
    let att_nll = label_smoothed_ce(g, dec_lp, &q)?;

    let att_part = g.affine(att_nll, cfg.alpha, 0.0);
    let ctc_part = g.affine(ctc_nll, 1.0 - cfg.alpha, 0.0);
    let total = g.add(att_part, ctc_part)?;

    let lp = g.value(dec_lp);
    let mut correct = 0;
    for (i, &t) in targets.iter().enumerate() {
        let row = lp.row(i);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        if best == t {
            correct += 1;
        }
    }
    Ok(LossParts {
        total,
        attention_nll: g.value(att_nll).data()[0],
        ctc_nll: g.value(ctc_nll).data()[0],
        correct,
        positions: targets.len(),
    })
}

/// Gradients keyed by parameter name; parameters the loss never reached
/// get zeros.
pub fn collect_grads(g: &Graph) -> HashMap<String, Vec<f64>> {
    g.param_vars()
        .iter()
        .map(|(name, v)| {
            let data = g
                .grad(*v)
                .map_or_else(|| vec![0.0; g.value(*v).len()], |s| s.to_vec());
            (name.clone(), data)
        })
        .collect()
}

/// Adam with bias correction. Moment buffers are keyed by parameter name
/// and created on first use.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: usize,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            steps: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update over every model parameter; missing gradients count as
    /// zero so the moment estimates keep decaying.
    pub fn apply(&mut self, model: &mut Model, grads: &HashMap<String, Vec<f64>>, lr: f64) {
        self.steps += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.steps as i32);
        let bc2 = 1.0 - b2.powi(self.steps as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |name, w| {
            let n = w.len();
            let gbuf = grads.get(name);
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let data = w.data_mut();
            for i in 0..n {
                let gi = gbuf.map_or(0.0, |gv| gv[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        });
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

// ── Snapshots ──────────────────────────────────────────────────────────

pub type Snapshot = Vec<(String, Tensor)>;

pub fn snapshot(model: &Model) -> Snapshot {
    let mut out = Vec::new();
    model.visit_params(&mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Elementwise mean of structurally identical snapshots.
pub fn average_snapshots(snaps: &[Snapshot]) -> Result<Snapshot, TrainError> {
    let first = snaps.first().ok_or(TrainError::NoSnapshots)?;
    let mut acc = first.clone();
    for snap in &snaps[1..] {
        if snap.len() != acc.len() {
            return Err(TrainError::SnapshotMismatch {
                name: "<entry count>".to_string(),
            });
        }
        for ((an, at), (bn, bt)) in acc.iter_mut().zip(snap) {
            if an != bn || at.shape() != bt.shape() {
                return Err(TrainError::SnapshotMismatch { name: bn.clone() });
            }
            for (a, b) in at.data_mut().iter_mut().zip(bt.data()) {
                *a += b;
            }
        }
    }
    let n = snaps.len() as f64;
    for (_, t) in &mut acc {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    Ok(acc)
}

/// Overwrite model parameters from a snapshot, matched by name and order.
pub fn load_snapshot(model: &mut Model, snap: &[(String, Tensor)]) -> Result<(), TrainError> {
    let mut idx = 0;
    let mut fail: Option<String> = None;
    model.visit_params_mut(&mut |name, t| {
        if fail.is_some() {
            return;
        }
        match snap.get(idx) {
            Some((sn, st)) if sn == name && st.shape() == t.shape() => *t = st.clone(),
            _ => fail = Some(name.to_string()),
        }
        idx += 1;
    });
    if let Some(name) = fail {
        return Err(TrainError::SnapshotMismatch { name });
    }
    if idx != snap.len() {
        return Err(TrainError::SnapshotMismatch {
            name: "<extra entries>".to_string(),
        });
    }
    Ok(())
}

// ── Loop ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_attention_nll: f64,
    pub mean_ctc_nll: f64,
    pub teacher_accuracy: f64,
    pub lr: f64,
    /// Utterances whose labels cannot align to the reduced frame count.
    pub skipped: usize,
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Mean of the trailing epoch snapshots.
    pub averaged: Snapshot,
}

/// Epoch loop: shuffle, batch, accumulate mean gradients per batch, one
/// optimizer step per batch. Infeasible utterances are skipped, not
/// fatal.
pub fn train(
    model: &mut Model,
    data: &[(Tensor, Vec<usize>)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::NoData);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.warmup_steps == 0 {
        return Err(TrainError::BadConfig(
            "epochs, batch size, and warmup must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut snaps: VecDeque<Snapshot> = VecDeque::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_att, mut sum_ctc) = (0.0, 0.0, 0.0);
        let (mut correct, mut positions) = (0usize, 0usize);
        let mut used = 0usize;
        let mut skipped = 0usize;
        let mut last_lr = 0.0;

        for batch in order.chunks(cfg.batch_size) {
            let mut acc: HashMap<String, Vec<f64>> = HashMap::new();
            let mut in_batch = 0usize;
            for &i in batch {
                let (feats, labels) = &data[i];
                let mut g = Graph::new();
                let vars = model.bind(&mut g);
                let fv = g.leaf(feats.clone());
                let mut phase = Phase::Train {
                    dropout: cfg.dropout,
                    mta_noise: cfg.mta_noise,
                    rng: &mut rng,
                };
                let parts = match joint_loss(&mut g, model, &vars, &mut phase, fv, labels, cfg) {
                    Ok(p) => p,
                    Err(TrainError::Ctc(CtcError::Infeasible { .. })) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                g.backward(parts.total)?;
                sum_loss += g.value(parts.total).data()[0];
                sum_att += parts.attention_nll;
                sum_ctc += parts.ctc_nll;
                correct += parts.correct;
                positions += parts.positions;
                for (name, gvec) in collect_grads(&g) {
                    acc.entry(name)
                        .and_modify(|a| {
                            for (x, y) in a.iter_mut().zip(&gvec) {
                                *x += y;
                            }
                        })
                        .or_insert(gvec);
                }
                in_batch += 1;
            }
            if in_batch == 0 {
                continue;
            }
            for vals in acc.values_mut() {
                for v in vals.iter_mut() {
                    *v /= in_batch as f64;
                }
            }
            step += 1;
            let lr = noam_lr(cfg.lr_scale, model.cfg.d_model, step, cfg.warmup_steps);
            adam.apply(model, &acc, lr);
            last_lr = lr;
            used += in_batch;
        }

        let denom = used.max(1) as f64;
        records.push(EpochRecord {
            epoch,
            mean_loss: sum_loss / denom,
            mean_attention_nll: sum_att / denom,
            mean_ctc_nll: sum_ctc / denom,
            teacher_accuracy: correct as f64 / positions.max(1) as f64,
            lr: last_lr,
            skipped,
        });
        snaps.push_back(snapshot(model));
        if snaps.len() > cfg.average_last.max(1) {
            snaps.pop_front();
        }
    }

    let averaged = average_snapshots(snaps.make_contiguous())?;
    Ok(TrainOutcome { records, averaged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ChunkConfig;
    use crate::model::ModelConfig;
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

    fn feats(frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(frames, dim, data).unwrap()
    }

    #[test]
    fn warmup_schedule_peaks_at_warmup_step() {
        let (d, w) = (32, 200);
        let peak = noam_lr(1.0, d, w, w);
        let expect = (32f64).powf(-0.5) * (200f64).powf(-0.5);
        assert!((peak - expect).abs() < 1e-15);
        for s in 1..w {
            assert!(noam_lr(1.0, d, s, w) <= noam_lr(1.0, d, s + 1, w));
        }
        for s in w..3 * w {
            assert!(noam_lr(1.0, d, s, w) >= noam_lr(1.0, d, s + 1, w));
        }
    }

    #[test]
    fn smoothed_targets_split_the_mass() {
        let t = smoothed_targets(&[0, 2], 4, 0.1);
        let expect0 = [0.925, 0.025, 0.025, 0.025];
        for (a, b) in t.row(0).iter().zip(expect0) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((t.row(1)[2] - 0.925).abs() < 1e-15);
        for r in 0..2 {
            let sum: f64 = t.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_predictions_cost_log_vocab() {
        let mut g = Graph::new();
        let lp = g.leaf(Tensor::matrix(3, 4, vec![(0.25f64).ln(); 12]).unwrap());
        let q = smoothed_targets(&[1, 2, 3], 4, 0.1);
        let ce = label_smoothed_ce(&mut g, lp, &q).unwrap();
        assert!((g.value(ce).data()[0] - (4f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn adam_drives_a_quadratic_to_its_minimum() {
        let mut model = Model::init(tiny_cfg(), 0).unwrap();
        let frozen = model.encoder.clone();
        let mut adam = Adam::new();
        for _ in 0..300 {
            let grad: Vec<f64> = model.ctc_b.data().iter().map(|w| 2.0 * (w - 3.0)).collect();
            let mut gmap = HashMap::new();
            gmap.insert("ctc_b".to_string(), grad);
            adam.apply(&mut model, &gmap, 0.05);
        }
        for w in model.ctc_b.data() {
            assert!((w - 3.0).abs() < 0.05, "{w}");
        }
        // Parameters with zero gradient never move.
        let mut before = Vec::new();
        frozen.visit("enc", &mut |_, t| before.push(t.clone()));
        let mut after = Vec::new();
        model.encoder.visit("enc", &mut |_, t| after.push(t.clone()));
        assert_eq!(before, after);
    }

    #[test]
    fn snapshot_average_is_the_midpoint() {
        let a = Model::init(tiny_cfg(), 1).unwrap();
        let b = Model::init(tiny_cfg(), 2).unwrap();
        let avg = average_snapshots(&[snapshot(&a), snapshot(&b)]).unwrap();
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        for (i, (name, t)) in avg.iter().enumerate() {
            assert_eq!(name, &sa[i].0);
            for (j, v) in t.data().iter().enumerate() {
                let mid = (sa[i].1.data()[j] + sb[i].1.data()[j]) / 2.0;
                assert!((v - mid).abs() < 1e-15);
            }
        }
        let mut c = a.clone();
        load_snapshot(&mut c, &avg).unwrap();
        assert_eq!(snapshot(&c), avg);
    }

    #[test]
    fn joint_loss_reaches_every_parameter() {
        let model = Model::init(tiny_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = feats(12, 6, &mut rng);
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let fv = g.leaf(x);
        let cfg = TrainConfig::default();
        let parts = joint_loss(
            &mut g,
            &model,
            &vars,
            &mut Phase::Eval,
            fv,
            &[2, 3],
            &cfg,
        )
        .unwrap();
        assert!(parts.attention_nll.is_finite() && parts.ctc_nll.is_finite());
        g.backward(parts.total).unwrap();
        for (name, v) in g.param_vars() {
            assert!(g.grad(*v).is_some(), "no gradient reached {name}");
        }
    }

    #[test]
    fn joint_loss_rejects_reserved_labels() {
        let model = Model::init(tiny_cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = feats(12, 6, &mut rng);
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let fv = g.leaf(x);
        let cfg = TrainConfig::default();
        let err = joint_loss(&mut g, &model, &vars, &mut Phase::Eval, fv, &[1, 2], &cfg);
        assert!(matches!(err, Err(TrainError::BadLabel { label: 1, .. })));
    }

    #[test]
    fn training_is_seed_deterministic_and_skips_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = vec![
            (feats(12, 6, &mut rng), vec![2, 3]),
            (feats(16, 6, &mut rng), vec![3, 2, 4]),
            // 4 frames reduce to a single step: cannot fit two labels.
            (feats(4, 6, &mut rng), vec![2, 3]),
        ];
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            warmup_steps: 4,
            average_last: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = Model::init(tiny_cfg(), 3).unwrap();
            let out = train(&mut model, &data, &cfg).unwrap();
            (snapshot(&model), out)
        };
        let (pa, oa) = run();
        let (pb, ob) = run();
        assert_eq!(pa, pb);
        assert_eq!(oa.records.len(), 2);
        assert!(oa.records.iter().all(|r| r.mean_loss.is_finite()));
        assert!(oa.records.iter().all(|r| r.skipped == 1));
        assert_eq!(
            oa.records.last().unwrap().mean_loss,
            ob.records.last().unwrap().mean_loss
        );
        assert_eq!(oa.averaged.len(), pa.len());
    }
}
