//! Subcommand implementations behind the `stfx` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use stfx_core::decoding::{decode_offline, decode_streaming, edit_distance, DecodeConfig};
use stfx_core::encoder::{split_chunks, EncodeMode, EncoderSession};
use stfx_core::lm::NgramModel;
use stfx_core::model::{Model, Phase};
use stfx_core::training::{load_snapshot, train};
use stfx_core::Tensor;

use crate::config::TrainSpec;
use crate::formats;
use crate::synth;

pub fn cmd_synth(out_dir: &Path, seed: u64, utts: usize, grammar: usize) -> Result<()> {
    let entries = synth::synth_dataset(out_dir, seed, utts, grammar)?;
    println!(
        "wrote {} utterances to {} (seed={seed} grammar={grammar})",
        entries.len(),
        out_dir.display()
    );
    Ok(())
}

/// Read `transcripts.txt` plus one feature file per utterance id.
fn load_dataset(dir: &Path) -> Result<Vec<(String, Tensor, Vec<usize>)>> {
    let entries = formats::read_transcripts(&dir.join("transcripts.txt"))?;
    let mut data = Vec::with_capacity(entries.len());
    for (id, text) in entries {
        let feats = formats::read_features(&dir.join(format!("{id}.stfx")))?;
        let tokens = formats::tokens_of_text(&text)
            .with_context(|| format!("transcript for {id}"))?;
        data.push((id, feats, tokens));
    }
    Ok(data)
}

pub fn cmd_train(config_path: &Path) -> Result<()> {
    let spec = TrainSpec::load(config_path)?;
    let all = load_dataset(&spec.data_dir)?;
    if let Some((id, feats, _)) = all.iter().find(|(_, f, _)| f.cols() != spec.feat_dim) {
        bail!(
            "feature dim mismatch for {id}: file has {}, config expects {}",
            feats.cols(),
            spec.feat_dim
        );
    }
    if spec.holdout >= all.len() {
        bail!(
            "holdout of {} leaves no training data ({} utterances)",
            spec.holdout,
            all.len()
        );
    }
    let split = all.len() - spec.holdout;
    let train_set: Vec<(Tensor, Vec<usize>)> = all[..split]
        .iter()
        .map(|(_, f, t)| (f.clone(), t.clone()))
        .collect();

    let mut model = Model::init(spec.model_config()?, spec.seed)?;
    println!(
        "training on {} utterances ({} held out), {} params",
        train_set.len(),
        spec.holdout,
        model.param_count()
    );
    let outcome = train(&mut model, &train_set, &spec.train_config())?;

    let mut metrics = String::new();
    for r in &outcome.records {
        let line = format!(
            "epoch={} loss={:.6} att={:.6} ctc={:.6} acc={:.4} lr={:.6} skipped={}",
            r.epoch, r.mean_loss, r.mean_attention_nll, r.mean_ctc_nll, r.teacher_accuracy,
            r.lr, r.skipped
        );
        println!("{line}");
        metrics.push_str(&line);
        metrics.push('\n');
    }
    if let Some(path) = &spec.metrics {
        std::fs::write(path, &metrics).with_context(|| format!("writing {}", path.display()))?;
    }

    load_snapshot(&mut model, &outcome.averaged)?;
    formats::save_checkpoint(&spec.checkpoint, &model)?;
    println!("checkpoint written to {}", spec.checkpoint.display());

    if spec.holdout > 0 {
        // Width-one joint decode: the greedy form of the shipping search,
        // not the attention branch alone.
        let greedy = DecodeConfig {
            beam: 1,
            prune: formats::VOCAB,
            gamma: 0.0,
            ..DecodeConfig::default()
        };
        let (mut errors, mut chars) = (0usize, 0usize);
        for (_, feats, tokens) in &all[split..] {
            let hyp = decode_offline(&model, None, &greedy, feats)?.tokens;
            errors += edit_distance(&hyp, tokens);
            chars += tokens.len();
        }
        let acc = if chars == 0 {
            1.0
        } else {
            1.0 - errors as f64 / chars as f64
        };
        println!("holdout utts={} token_accuracy={:.4}", spec.holdout, acc);
    }
    Ok(())
}

/// A single `.stfx` file, or every `.stfx` inside a directory, sorted by
/// name so batch output order is stable.
fn collect_feature_files(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "utt".to_string())
    };
    if path.is_dir() {
        let mut files: Vec<(String, PathBuf)> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "stfx").unwrap_or(false))
            .map(|p| (stem(&p), p))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no .stfx files in {}", path.display());
        }
        Ok(files)
    } else {
        Ok(vec![(stem(path), path.to_path_buf())])
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_decode(
    checkpoint: &Path,
    features: &Path,
    stream: bool,
    cfg: &DecodeConfig,
    lm_path: Option<&Path>,
    out: Option<&Path>,
    hyp: Option<&Path>,
) -> Result<()> {
    let model = formats::load_checkpoint(checkpoint)?;
    let lm = lm_path.map(formats::load_lm).transpose()?;
    let files = collect_feature_files(features)?;

    let mut records = String::new();
    let mut hyps: Vec<(String, String)> = Vec::new();
    // A downstream `head` closing the pipe must not abort the run: stop
    // printing but still decode everything and write --out/--hyp files.
    let mut stdout_open = true;
    for (id, path) in &files {
        let feats = formats::read_features(path)?;
        if feats.cols() != model.cfg.feat_dim {
            bail!(
                "feature dim mismatch for {id}: file has {}, checkpoint expects {}",
                feats.cols(),
                model.cfg.feat_dim
            );
        }
        let res = if stream {
            decode_streaming(&model, lm.as_ref(), cfg, &feats)?
        } else {
            decode_offline(&model, lm.as_ref(), cfg, &feats)?
        };
        let text = formats::text_of_tokens(&res.tokens)?;
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let lags = res.emission_lag_ms();
        let mean_lag = if lags.is_empty() {
            0.0
        } else {
            lags.iter().sum::<usize>() as f64 / lags.len() as f64
        };
        let line = format!(
            "{id} tokens={text} dec={:.6} ctc={:.6} lm={:.6} total={:.6} \
             endpoints={} emitted_at={} alg_latency_ms={} lookahead_ms={} mean_lag_ms={:.1}",
            res.dec_score,
            res.ctc_score,
            res.lm_score,
            res.total,
            join(&res.endpoints),
            join(&res.emitted_at_frames),
            model.cfg.chunk.latency_ms(),
            model.encoder.front_end.lookahead_ms(),
            mean_lag
        );
        if stdout_open {
            use std::io::Write as _;
            let mut fd = std::io::stdout().lock();
            if let Err(e) = writeln!(fd, "{line}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
                stdout_open = false;
            }
        }
        records.push_str(&line);
        records.push('\n');
        hyps.push((id.clone(), text));
    }
    if let Some(path) = out {
        std::fs::write(path, &records).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = hyp {
        formats::write_transcripts(path, &hyps)?;
    }
    Ok(())
}

fn bench_mode(
    model: &Model,
    utts: &[(String, Tensor)],
    mode: EncodeMode,
    reps: usize,
) -> Result<(usize, f64)> {
    let mut samples: Vec<f64> = Vec::new();
    for _ in 0..reps {
        for (_, feats) in utts {
            let mut g = stfx_core::Graph::new();
            let vars = model.encoder.bind(&mut g, "enc");
            let fv = g.leaf(feats.clone());
            let mut session = EncoderSession::new(&model.encoder, model.cfg.chunk, mode);
            for spec in &split_chunks(feats.rows(), &model.cfg.chunk) {
                let range = spec.window(mode);
                let window = g.slice_rows(fv, range.start, range.end)?;
                let t0 = Instant::now();
                session.encode_chunk(&mut g, &vars, &mut Phase::Eval, spec, window)?;
                samples.push(t0.elapsed().as_secs_f64() * 1e6);
            }
        }
    }
    let chunks = samples.len() / reps;
    samples.sort_by(f64::total_cmp);
    Ok((chunks, samples[samples.len() / 2]))
}

pub fn cmd_bench(checkpoint: &Path, features: &Path, mode: &str, reps: usize) -> Result<()> {
    let model = formats::load_checkpoint(checkpoint)?;
    let files = collect_feature_files(features)?;
    let mut utts = Vec::with_capacity(files.len());
    for (id, path) in files {
        let feats = formats::read_features(&path)?;
        if feats.cols() != model.cfg.feat_dim {
            bail!(
                "feature dim mismatch for {id}: file has {}, checkpoint expects {}",
                feats.cols(),
                model.cfg.feat_dim
            );
        }
        utts.push((id, feats));
    }

    let mut medians = BTreeMap::new();
    if mode == "isolated" || mode == "both" {
        let (chunks, median) = bench_mode(&model, &utts, EncodeMode::Isolated, reps)?;
        println!("mode=isolated chunks={chunks} reps={reps} median_chunk_us={median:.1}");
        medians.insert("isolated", median);
    }
    if mode == "reuse" || mode == "both" {
        let (chunks, median) = bench_mode(&model, &utts, EncodeMode::StateReuse, reps)?;
        println!("mode=reuse chunks={chunks} reps={reps} median_chunk_us={median:.1}");
        medians.insert("reuse", median);
    }
    if let (Some(iso), Some(reuse)) = (medians.get("isolated"), medians.get("reuse")) {
        println!("speed_ratio={:.3}", iso / reuse);
    }
    Ok(())
}

pub fn cmd_cer(hyp_path: &Path, ref_path: &Path) -> Result<()> {
    let to_map = |entries: Vec<(String, String)>| -> BTreeMap<String, String> {
        entries.into_iter().collect()
    };
    let hyps = to_map(formats::read_transcripts(hyp_path)?);
    let refs = to_map(formats::read_transcripts(ref_path)?);
    for id in hyps.keys() {
        if !refs.contains_key(id) {
            bail!("hypothesis id {id} missing from reference file");
        }
    }
    for id in refs.keys() {
        if !hyps.contains_key(id) {
            bail!("reference id {id} missing from hypothesis file");
        }
    }
    // Scored over raw characters, so references are not limited to the
    // model alphabet.
    let codepoints = |s: &str| s.chars().map(|c| c as usize).collect::<Vec<_>>();
    let (mut errors, mut chars) = (0usize, 0usize);
    for (id, ref_text) in &refs {
        let r = codepoints(ref_text);
        errors += edit_distance(&codepoints(&hyps[id]), &r);
        chars += r.len();
    }
    if chars == 0 {
        bail!("reference file has no characters to score against");
    }
    println!("cer={:.6} errors={errors} chars={chars}", errors as f64 / chars as f64);
    Ok(())
}

pub fn cmd_lm_train(transcripts: &Path, out: &Path, order: usize, k: f64) -> Result<()> {
    let entries = formats::read_transcripts(transcripts)?;
    let mut seqs = Vec::with_capacity(entries.len());
    for (id, text) in &entries {
        seqs.push(formats::tokens_of_text(text).with_context(|| format!("transcript {id}"))?);
    }
    let lm = NgramModel::train(order, formats::VOCAB, k, 1, &seqs)?;
    formats::save_lm(out, &lm)?;
    println!(
        "trained order-{order} model on {} sequences -> {}",
        seqs.len(),
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_collection_sorts_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.stfx", "a.stfx", "notes.txt"] {
            std::fs::write(dir.path().join(name), b"x").unwrap();
        }
        let files = collect_feature_files(dir.path()).unwrap();
        let ids: Vec<&str> = files.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn empty_feature_directories_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(collect_feature_files(dir.path()).is_err());
    }
}
