//! On-disk containers: feature tensors, checkpoints, LM counts, and
//! transcript tables. All multi-byte integers and floats are little-endian
//! so files move between platforms unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use stfx_core::encoder::ChunkConfig;
use stfx_core::lm::NgramModel;
use stfx_core::model::{Model, ModelConfig};
use stfx_core::training::load_snapshot;
use stfx_core::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"STFX";
pub const FEATURE_VERSION: u32 = 1;

/// The renderable characters, in token-id order. Ids 0 and 1 are the
/// blank and the boundary symbol; characters start at 2.
pub const ALPHABET: &str = "abcdefgh";
pub const VOCAB: usize = ALPHABET.len() + 2;

pub fn token_of_char(c: char) -> Option<usize> {
    ALPHABET.find(c).map(|i| i + 2)
}

pub fn char_of_token(t: usize) -> Option<char> {
    ALPHABET.as_bytes().get(t.checked_sub(2)?).map(|&b| b as char)
}

pub fn tokens_of_text(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| token_of_char(c).with_context(|| format!("character {c:?} is outside a-h")))
        .collect()
}

pub fn text_of_tokens(tokens: &[usize]) -> Result<String> {
    tokens
        .iter()
        .map(|&t| char_of_token(t).with_context(|| format!("token id {t} has no character")))
        .collect()
}

// ── Feature files ──────────────────────────────────────────────────────

pub fn write_features(path: &Path, feats: &Tensor) -> Result<()> {
    if feats.shape().len() != 2 {
        bail!("features must be a frames x dim matrix, got {:?}", feats.shape());
    }
    let frames = u32::try_from(feats.rows()).context("too many frames for the container")?;
    let dim = u32::try_from(feats.cols()).context("feature dim too large for the container")?;
    let mut buf = Vec::with_capacity(16 + feats.len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&frames.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    for &v in feats.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let parse = || -> Result<Tensor> {
        if bytes.len() < 16 {
            bail!("file is shorter than the header");
        }
        if bytes[..4] != FEATURE_MAGIC {
            bail!("bad magic, not a feature file");
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FEATURE_VERSION {
            bail!("unsupported feature version {version}");
        }
        let frames = word(8) as usize;
        let dim = word(12) as usize;
        let want = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .context("frame count overflows")?;
        if bytes.len() - 16 != want {
            bail!(
                "payload is {} bytes but {frames} x {dim} frames need {want}",
                bytes.len() - 16
            );
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Tensor::matrix(frames, dim, data)?)
    };
    parse().with_context(|| format!("parsing {}", path.display()))
}

// ── Checkpoints ────────────────────────────────────────────────────────
//
// A text manifest (key=value lines, blank-line terminated) describing the
// architecture, followed by one block per parameter in visitation order:
// u32 name length, the name, u32 rank, u32 per dimension, then the values
// as little-endian f64 bits. Reload is therefore bit-exact.

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let c = &model.cfg;
    let mut blocks = 0usize;
    model.visit_params(&mut |_, _| blocks += 1);
    let mut manifest = String::new();
    let mut put = |k: &str, v: usize| writeln!(manifest, "{k}={v}").unwrap();
    put("vocab", c.vocab);
    put("feat_dim", c.feat_dim);
    put("d_model", c.d_model);
    put("heads", c.heads);
    put("d_ff", c.d_ff);
    put("enc_layers", c.enc_layers);
    put("dec_layers", c.dec_layers);
    put("conv_channels", c.conv_channels);
    put("conv_kernel", c.conv_kernel);
    put("chunk_history", c.chunk.history);
    put("chunk_central", c.chunk.central);
    put("chunk_future", c.chunk.future);
    put("params", blocks);

    let mut buf = manifest.into_bytes();
    buf.push(b'\n');
    model.visit_params(&mut |name, tensor| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_checkpoint(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn parse_checkpoint(bytes: &[u8]) -> Result<Model> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .context("no blank line after the manifest")?;
    let manifest = std::str::from_utf8(&bytes[..split + 1]).context("manifest is not UTF-8")?;
    let mut fields = std::collections::HashMap::new();
    for line in manifest.lines() {
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("manifest line {line:?} is not key=value"))?;
        let v: usize = v
            .parse()
            .with_context(|| format!("manifest value in {line:?} is not a number"))?;
        fields.insert(k.to_string(), v);
    }
    let mut get = |k: &str| {
        fields
            .remove(k)
            .with_context(|| format!("manifest is missing {k}"))
    };
    let cfg = ModelConfig {
        vocab: get("vocab")?,
        feat_dim: get("feat_dim")?,
        d_model: get("d_model")?,
        heads: get("heads")?,
        d_ff: get("d_ff")?,
        enc_layers: get("enc_layers")?,
        dec_layers: get("dec_layers")?,
        conv_channels: get("conv_channels")?,
        conv_kernel: get("conv_kernel")?,
        chunk: ChunkConfig::new(
            get("chunk_history")?,
            get("chunk_central")?,
            get("chunk_future")?,
        )?,
    };
    let expected = get("params")?;

    let mut pos = split + 2;
    let mut snapshot = Vec::new();
    let word = |pos: &mut usize| -> Result<usize> {
        if *pos + 4 > bytes.len() {
            bail!("checkpoint truncated inside a parameter block");
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
        *pos += 4;
        Ok(v)
    };
    while pos < bytes.len() {
        let name_len = word(&mut pos)?;
        if pos + name_len > bytes.len() {
            bail!("checkpoint truncated inside a parameter name");
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .context("parameter name is not UTF-8")?
            .to_string();
        pos += name_len;
        let rank = word(&mut pos)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(word(&mut pos)?);
        }
        let len: usize = shape.iter().product();
        if pos + len * 8 > bytes.len() {
            bail!("checkpoint truncated inside the values of {name}");
        }
        let data: Vec<f64> = bytes[pos..pos + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += len * 8;
        snapshot.push((name, Tensor::new(shape, data)?));
    }
    if snapshot.len() != expected {
        bail!("manifest promises {expected} parameters, found {}", snapshot.len());
    }
    let mut model = Model::init(cfg, 0)?;
    load_snapshot(&mut model, &snapshot)?;
    Ok(model)
}

// ── Language models ────────────────────────────────────────────────────

pub fn save_lm(path: &Path, lm: &NgramModel) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "order={}", lm.order()).unwrap();
    writeln!(text, "vocab={}", lm.vocab()).unwrap();
    writeln!(text, "k={}", lm.smoothing()).unwrap();
    writeln!(text, "boundary={}", lm.boundary()).unwrap();
    let join = |counts: &[u64]| {
        counts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    writeln!(text, "uni={}", join(lm.uni_counts())).unwrap();
    writeln!(text, "bi={}", join(lm.bi_counts())).unwrap();
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_lm(path: &Path) -> Result<NgramModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parse = || -> Result<NgramModel> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {line:?} is not key=value"))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let mut get = |k: &str| {
            fields
                .remove(k)
                .with_context(|| format!("missing field {k}"))
        };
        let order: usize = get("order")?.parse()?;
        let vocab: usize = get("vocab")?.parse()?;
        let k: f64 = get("k")?.parse()?;
        let boundary: usize = get("boundary")?.parse()?;
        let counts = |s: String| -> Result<Vec<u64>> {
            s.split_whitespace()
                .map(|w| w.parse().context("count is not an integer"))
                .collect()
        };
        let uni = counts(get("uni")?)?;
        let bi = counts(get("bi")?)?;
        Ok(NgramModel::from_counts(order, vocab, k, boundary, uni, bi)?)
    };
    parse().with_context(|| format!("parsing {}", path.display()))
}

// ── Transcripts ────────────────────────────────────────────────────────

pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, chars) = line.split_once('\t').with_context(|| {
            format!("{}:{}: expected <id><TAB><text>", path.display(), i + 1)
        })?;
        out.push((id.to_string(), chars.to_string()));
    }
    Ok(out)
}

pub fn write_transcripts(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (id, chars) in entries {
        writeln!(text, "{id}\t{chars}").unwrap();
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use stfx_core::model::ModelConfig;

    #[test]
    fn alphabet_round_trips() {
        let tokens = tokens_of_text("habcd").unwrap();
        assert_eq!(tokens, vec![9, 2, 3, 4, 5]);
        assert_eq!(text_of_tokens(&tokens).unwrap(), "habcd");
        assert!(tokens_of_text("xyz").is_err());
        assert!(char_of_token(0).is_none());
        assert!(char_of_token(1).is_none());
        assert!(char_of_token(VOCAB).is_none());
    }

    #[test]
    fn feature_files_round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.stfx");
        // Values chosen representable in f32 so quantization is exact.
        let t = Tensor::matrix(3, 2, vec![0.5, -1.25, 2.0, 0.0, -0.75, 8.5]).unwrap();
        write_features(&path, &t).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());

        let bytes = fs::read(&path).unwrap();
        write_features(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn feature_reader_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.stfx");
        fs::write(&path, b"NOPE").unwrap();
        assert!(read_features(&path).is_err());

        let t = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        write_features(&path, &t).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(read_features(&path).is_err());
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::init(ModelConfig::desk(VOCAB, 8), 42).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        let mut params = Vec::new();
        model.visit_params(&mut |name, t| params.push((name.to_string(), t.clone())));
        let mut restored = Vec::new();
        back.visit_params(&mut |name, t| restored.push((name.to_string(), t.clone())));
        assert_eq!(params.len(), restored.len());
        for ((na, ta), (nb, tb)) in params.iter().zip(&restored) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{na} must reload bit-exactly");
        }

        // And the file itself is stable under a save-load-save cycle.
        let bytes = fs::read(&path).unwrap();
        save_checkpoint(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn language_models_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.txt");
        let seqs = vec![vec![2, 3, 4], vec![3, 3, 2]];
        let lm = NgramModel::train(2, VOCAB, 0.5, 1, &seqs).unwrap();
        save_lm(&path, &lm).unwrap();
        let back = load_lm(&path).unwrap();
        assert_eq!(back, lm);
    }

    #[test]
    fn transcripts_round_trip_and_report_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let entries = vec![
            ("utt0000".to_string(), "abc".to_string()),
            ("utt0001".to_string(), "hgf".to_string()),
        ];
        write_transcripts(&path, &entries).unwrap();
        assert_eq!(read_transcripts(&path).unwrap(), entries);

        fs::write(&path, "utt0000 no tab here\n").unwrap();
        let err = read_transcripts(&path).unwrap_err();
        assert!(format!("{err:#}").contains(":1:"));
    }
}
