//! Checkpoint format: magic `MICAR1`, a length-prefixed JSON header
//! (format version, model config, step, optimizer hyperparameters,
//! vocabulary), then four binary sections — parameters, running buffers,
//! first moments, second moments — as named little-endian f64 blobs.
//! Everything is ordered, so save -> load -> save is byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"MICAR1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    step: u64,
    optim: AdamWConfig,
    vocab_tokens: Vec<String>,
    vocab_min_freq: usize,
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub model: Model,
    pub optim: AdamW,
    pub vocab: Vocabulary,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("section size fits u32").to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(u8::try_from(dims.len()).expect("rank fits u8"));
    for &d in dims {
        put_u32(out, d);
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(path: &Path, model: &Model, optim: &AdamW, vocab: &Vocabulary, step: u64) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.cfg.clone(),
        step,
        optim: optim.cfg,
        vocab_tokens: vocab.tokens().to_vec(),
        vocab_min_freq: vocab.min_freq,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, header_json.len());
    out.extend_from_slice(&header_json);

    put_u32(&mut out, model.params.len());
    for (name, t) in model.params.iter() {
        put_entry(&mut out, name, &t.shape, &t.data);
    }
    put_u32(&mut out, model.bufs.len());
    for (name, t) in model.bufs.iter() {
        put_entry(&mut out, name, &t.shape, &t.data);
    }
    for moments in [&optim.m, &optim.v] {
        put_u32(&mut out, moments.len());
        for (name, data) in moments {
            put_entry(&mut out, name, &[data.len()], data);
        }
    }

    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "`{}` is truncated while reading {what}",
                self.path
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn entry(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u32("entry name length")?;
        let name = String::from_utf8(self.take(name_len, "entry name")?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("`{}`: entry name is not UTF-8", self.path)))?;
        let ndim = self.take(1, "entry rank")?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32("entry dimension")?);
        }
        let numel: usize = dims.iter().product();
        let raw = self.take(numel * 8, &format!("data of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, dims, data))
    }

    fn section(&mut self, what: &str) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        let count = self.u32(&format!("{what} count"))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(self.entry()?);
        }
        Ok(entries)
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path: path.display().to_string() };

    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "`{}` is not a checkpoint (bad magic {magic:?})",
            cur.path
        )));
    }
    let header_len = cur.u32("header length")?;
    let header: Header = serde_json::from_slice(cur.take(header_len, "header")?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (this build reads {FORMAT_VERSION})",
            header.format_version
        )));
    }
    header.config.validate()?;
    let vocab = Vocabulary::from_tokens(header.vocab_tokens, header.vocab_min_freq)?;

    // register freshly, then overwrite with the stored values; this is what
    // catches config/shape drift with the parameter path named
    let (mut params, mut bufs) = model::register_params(&header.config, 0);

    let stored_params = cur.section("parameter")?;
    if stored_params.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} parameters but the config registers {}",
            stored_params.len(),
            params.len()
        )));
    }
    for (name, dims, data) in stored_params {
        let t = params.try_get(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint parameter `{name}` does not exist in the model"))
        })?;
        if t.shape != dims {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?} in the model but {dims:?} in the checkpoint",
                t.shape
            )));
        }
        *params.get_mut(&name) = Tensor::new(&dims, data);
    }

    let stored_bufs = cur.section("buffer")?;
    if stored_bufs.len() != bufs.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} buffers but the config registers {}",
            stored_bufs.len(),
            bufs.len()
        )));
    }
    for (name, dims, data) in stored_bufs {
        let t = bufs.iter().find(|(n, _)| **n == name).map(|(_, t)| t).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint buffer `{name}` does not exist in the model"))
        })?;
        if t.shape != dims {
            return Err(Error::Checkpoint(format!(
                "buffer `{name}` has shape {:?} in the model but {dims:?} in the checkpoint",
                t.shape
            )));
        }
        *bufs.get_mut(&name) = Tensor::new(&dims, data);
    }

    let mut optim = AdamW::new(header.optim);
    optim.step = header.step;
    for (which, slot) in [("first", &mut optim.m), ("second", &mut optim.v)] {
        for (name, dims, data) in cur.section(&format!("{which}-moment"))? {
            let t = params.try_get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("{which} moment `{name}` has no matching parameter"))
            })?;
            if dims != [t.data.len()] {
                return Err(Error::Checkpoint(format!(
                    "{which} moment `{name}` holds {dims:?} values but the parameter has {}",
                    t.data.len()
                )));
            }
            slot.insert(name, data);
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "`{}` has {} trailing bytes after the last section",
            cur.path,
            bytes.len() - cur.pos
        )));
    }

    Ok(Loaded {
        model: Model { cfg: header.config, params, bufs },
        optim,
        vocab,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::VisionConfig;
    use crate::data::vocab::SOS;
    use crate::session::{Phase, Session};

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            d_latent: 8,
            heads: 2,
            d_nope: 2,
            d_rope: 2,
            d_ff: 16,
            n_enc: 1,
            n_dec: 1,
            experts: 2,
            top_k: 1,
            vocab_size: 8,
            max_len: 6,
            vision: VisionConfig {
                base_channels: 2,
                blocks_per_stage: 1,
                d_pyramid: 4,
                d_fused: 8,
                grid: 2,
                ..VisionConfig::default()
            },
            ..ModelConfig::default()
        };
        Model::new(cfg, seed).unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["left left left right right right"]).unwrap()
    }

    /// An optimizer with populated moments, so the moment sections are
    /// exercised too.
    fn stepped_optimizer(model: &mut Model) -> AdamW {
        let mut opt = AdamW::new(AdamWConfig::default());
        model.params.zero_grads();
        for (_, t) in model.params.iter_mut() {
            let g: Vec<f64> = (0..t.data.len()).map(|i| (i % 5) as f64 / 10.0 - 0.2).collect();
            t.grad = Some(g);
        }
        opt.apply(&mut model.params, 1.0).unwrap();
        opt
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(3);
        let opt = stepped_optimizer(&mut model);
        let first = dir.path().join("a.ckpt");
        let second = dir.path().join("b.ckpt");

        save(&first, &model, &opt, &vocab(), 17).unwrap();
        let loaded = load(&first).unwrap();
        save(&second, &loaded.model, &loaded.optim, &loaded.vocab, loaded.step).unwrap();

        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap(),
            "save -> load -> save must reproduce the file byte for byte"
        );
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.optim.step, 17);
    }

    #[test]
    fn round_trip_preserves_every_value_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(5);
        let opt = stepped_optimizer(&mut model);
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &opt, &vocab(), 2).unwrap();
        let loaded = load(&path).unwrap();

        for (name, t) in model.params.iter() {
            assert_eq!(t.data, loaded.model.params.get(name).data, "parameter `{name}` changed");
        }
        for (name, t) in model.bufs.iter() {
            assert_eq!(t.data, loaded.model.bufs.get(name).data, "buffer `{name}` changed");
        }
        assert_eq!(opt.m, loaded.optim.m, "first moments changed");
        assert_eq!(opt.v, loaded.optim.v, "second moments changed");
        assert_eq!(loaded.vocab, vocab());
    }

    #[test]
    fn generation_is_identical_after_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(7);
        let opt = AdamW::new(AdamWConfig::default());
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &opt, &vocab(), 0).unwrap();
        let loaded = load(&path).unwrap();

        let image = Tensor::full(&[3, 32, 32], 0.25);
        let logits_of = |m: &Model| {
            let mut sess = Session::new(Phase::Eval, 0, 0);
            let mut bufs = m.bufs.clone();
            let out =
                model::forward(&mut sess, &m.params, &mut bufs, &m.cfg, &image, &[SOS, 4, 5]).unwrap();
            sess.tape.data(out.logits).to_vec()
        };
        assert_eq!(
            logits_of(&model),
            logits_of(&loaded.model),
            "a restored model must produce bitwise-identical logits"
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model(1);
        save(&path, &model, &AdamW::new(AdamWConfig::default()), &vocab(), 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();

        let err = load(&path).unwrap_err();
        assert!(
            matches!(&err, Error::Checkpoint(msg) if msg.contains("magic")),
            "expected a magic complaint, got {err:?}"
        );
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model(1);
        save(&path, &model, &AdamW::new(AdamWConfig::default()), &vocab(), 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();

        let err = load(&path).unwrap_err();
        assert!(
            matches!(&err, Error::Checkpoint(msg) if msg.contains("truncated")),
            "expected a truncation complaint, got {err:?}"
        );
    }

    #[test]
    fn config_drift_is_rejected_with_the_parameter_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model(1);
        save(&path, &model, &AdamW::new(AdamWConfig::default()), &vocab(), 0).unwrap();

        // rewrite the header with a wider d_ff; the stored expert blobs no
        // longer match what that config registers
        let bytes = std::fs::read(&path).unwrap();
        let header_len =
            u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header_text = std::str::from_utf8(&bytes[10..10 + header_len]).unwrap();
        let tampered = header_text.replace("\"d_ff\":16", "\"d_ff\":32");
        assert_ne!(header_text, tampered, "the tamper must hit the header");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[10 + header_len..]);
        std::fs::write(&path, out).unwrap();

        let err = load(&path).unwrap_err();
        assert!(
            matches!(&err, Error::Checkpoint(msg) if msg.contains(".w1") || msg.contains(".w2") || msg.contains(".w3")),
            "the offending parameter path must be named, got {err:?}"
        );
    }
}
