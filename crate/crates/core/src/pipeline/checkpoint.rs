//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "KESDTCKP" | u32 version | u64 header_len | header JSON
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 data[prod(dims)]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Featurizer;
use super::params::{ModelParams, ModelShape};
use super::train::{TrainConfig, TrainedModel};
use crate::embedding::Vocab;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lexicon::build_trie;

pub const MAGIC: &[u8; 8] = b"KESDTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    shape: ModelShape,
    vocab: Vec<String>,
    lexicon: Vec<String>,
    synonym_words: Vec<String>,
    synonym_map: BTreeMap<String, Vec<usize>>,
}

pub fn encode_checkpoint(model: &TrainedModel) -> Result<Vec<u8>> {
    let f = &model.featurizer;
    let header = Header {
        config: model.config.clone(),
        shape: model.params.shape(),
        vocab: (0..f.vocab.len() as u32)
            .map(|i| f.vocab.word(i).unwrap_or_default().to_owned())
            .collect(),
        lexicon: f.lexicon.words(),
        synonym_words: f.synonym_words.clone(),
        synonym_map: f.synonym_map.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(json.len() + 4 * model.params.num_parameters() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes: not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version: file has format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let header_len = r.len("header length")?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.config.validate().map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let model_cfg = header.config.model_config();
    let expected = ModelShape {
        vocab_size: header.vocab.len(),
        max_len: model_cfg.max_len,
        d_model: model_cfg.encoder.d_model,
        d_ff: model_cfg.encoder.d_ff,
        layers: model_cfg.encoder.layers,
        d_w: header.shape.d_w,
        synonym_rows: header.synonym_words.len(),
    };
    if header.shape != expected {
        return Err(Error::Checkpoint(format!(
            "shape: header declares {:?}, config and vocabulary imply {expected:?}",
            header.shape
        )));
    }
    let vocab = Vocab::from_words(header.vocab).map_err(|e| Error::Checkpoint(format!("vocab: {e}")))?;
    for (kw, rows) in &header.synonym_map {
        if rows.is_empty() || rows.len() > model_cfg.h_max || rows.iter().any(|&i| i >= expected.synonym_rows) {
            return Err(Error::Checkpoint(format!("synonym_map: invalid rows for {kw:?}")));
        }
    }

    let remaining = bytes.len() - r.pos;
    match expected.num_parameters().and_then(|n| n.checked_mul(4)) {
        Some(need) if need <= remaining => {}
        _ => {
            return Err(Error::Checkpoint(format!(
                "truncated file: header shape {expected:?} needs more tensor data than the {remaining} bytes present"
            )))
        }
    }
    let mut params = ModelParams::<f32>::zeros(&expected);
    let want: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32("tensor count")? as usize;
    if count != want.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count: file has {count}, model needs {}",
            want.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let Some((_, shape)) = want.iter().find(|(n, _)| *n == name) else {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        };
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        let ndim = r.u32("tensor rank")? as usize;
        if ndim != shape.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: rank {ndim} in file, expected {}",
                shape.len()
            )));
        }
        let dims = (0..ndim).map(|_| r.len("tensor dimension")).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            if name == "embeddings.token" && dims.len() == 2 && dims[1] != shape[1] {
                return Err(Error::Checkpoint(format!(
                    "d_model: tensor data has {}, header config has {}",
                    dims[1], shape[1]
                )));
            }
            return Err(Error::Checkpoint(format!("tensor `{name}`: shape {dims:?} in file, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &format!("tensor `{name}` data"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.set_tensor(&name, &dims, &data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    if let Some(t) = params.first_non_finite() {
        return Err(Error::Checkpoint(format!("tensor `{t}` contains non-finite values")));
    }
    let featurizer = Featurizer {
        config: model_cfg,
        preprocess: header.config.preprocess.clone(),
        vocab,
        lexicon: build_trie(&header.lexicon),
        synonym_words: header.synonym_words,
        synonym_map: header.synonym_map,
        d_w: expected.d_w,
    };
    Ok(TrainedModel {
        config: header.config,
        featurizer,
        params,
    })
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Rejects a checkpoint whose architecture differs from `expected`,
/// reporting both values of the first differing field.
pub fn check_compatible(model: &TrainedModel, expected: &EncoderConfig) -> Result<()> {
    let got = &model.config.encoder;
    let fields = [
        ("d_model", got.d_model, expected.d_model),
        ("n_heads", got.n_heads, expected.n_heads),
        ("d_ff", got.d_ff, expected.d_ff),
        ("layers", got.layers, expected.layers),
        ("fusion_layer", got.fusion_layer, expected.fusion_layer),
    ];
    for (name, have, want) in fields {
        if have != want {
            return Err(Error::Checkpoint(format!(
                "{name} mismatch: checkpoint has {have}, configuration expects {want}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{generate_synthetic, SynthSpec};
    use crate::pipeline::train::{train, Resources};

    fn trained() -> TrainedModel {
        let data = generate_synthetic(&SynthSpec {
            n_pos: 6,
            n_neg: 6,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            encoder: EncoderConfig {
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                layers: 2,
                fusion_layer: 1,
                dropout_rate: 0.1,
                layer_norm_eps: 1e-12,
            },
            max_len: 12,
            epochs: 1,
            ..Default::default()
        };
        let res = Resources {
            lexicon: build_trie(&data.lexicon),
            embeddings: Some(data.vectors),
        };
        train(&cfg, &res, &data.dataset, None).unwrap().model
    }

    #[test]
    fn round_trip_bitwise() {
        let m = trained();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        for ((n, a), (_, b)) in m.params.tensors().into_iter().zip(back.params.tensors()) {
            let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{n}");
        }
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode_checkpoint(&trained()).unwrap();
        for cut in [0, 5, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated") || msg.contains("header"), "{msg}"),
                other => panic!("cut {cut}: {:?}", other.map(|_| ())),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn version_and_magic() {
        let mut bytes = encode_checkpoint(&trained()).unwrap();
        bytes[8] = 9;
        let msg = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(msg.contains("version"), "{msg}");
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn d_model_mismatch_reports_both() {
        let m = trained();
        let other = EncoderConfig {
            d_model: 16,
            ..m.config.encoder.clone()
        };
        let msg = check_compatible(&m, &other).unwrap_err().to_string();
        assert!(msg.contains("d_model") && msg.contains('8') && msg.contains("16"), "{msg}");

        // A header claiming d_model 16 over 8-wide tensors.
        let mut m16 = m.clone();
        m16.config.encoder.d_model = 16;
        m16.config.encoder.n_heads = 2;
        let bytes = encode_checkpoint(&TrainedModel { params: m.params.clone(), ..m16 }).unwrap();
        let msg = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(msg.contains("d_model") || msg.contains("shape"), "{msg}");
    }

    #[test]
    fn file_round_trip() {
        let m = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
