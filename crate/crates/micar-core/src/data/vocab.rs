//! Token vocabulary: reserved markers, lowercase whitespace tokenization
//! with de-identification stripping, and frequency-filtered id assignment.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Reserved marker strings, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// A token must appear this often in the training split to earn an id.
pub const MIN_FREQ: usize = 3;

/// Bidirectional token/id map. Ids 0..=3 are the reserved markers; content
/// tokens follow, ordered by (frequency descending, token ascending) so the
/// assignment is a pure function of the training corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: BTreeMap<String, usize>,
    token_of: Vec<String>,
    pub min_freq: usize,
}

/// Serialized form (`vocab.json`).
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
    min_freq: usize,
}

/// Lowercase whitespace tokenization. Tokens mixing letters and digits are
/// de-identification artifacts (`xxxx1`, `0042y`) and are dropped; purely
/// alphabetic and purely numeric tokens pass through.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(str::to_lowercase)
        .filter(|t| {
            let letters = t.chars().any(char::is_alphabetic);
            let digits = t.chars().any(|c| c.is_ascii_digit());
            !(letters && digits)
        })
        .collect()
}

impl Vocabulary {
    /// Build from training texts with the default frequency threshold.
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Result<Vocabulary> {
        Vocabulary::build_with_min_freq(texts, MIN_FREQ)
    }

    pub fn build_with_min_freq<S: AsRef<str>>(texts: &[S], min_freq: usize) -> Result<Vocabulary> {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text.as_ref()) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::Contract(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|&(_, n)| n >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut token_of: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        token_of.extend(kept.into_iter().map(|(t, _)| t));
        Vocabulary::from_tokens(token_of, min_freq)
    }

    /// Rebuild the map from an id-ordered token list (the serialized form).
    pub fn from_tokens(token_of: Vec<String>, min_freq: usize) -> Result<Vocabulary> {
        for (i, want) in RESERVED.iter().enumerate() {
            if token_of.get(i).map(String::as_str) != Some(want) {
                return Err(Error::Vocab(format!(
                    "token list must start with the reserved markers {RESERVED:?}, got {:?}",
                    &token_of[..token_of.len().min(4)]
                )));
            }
        }
        let mut id_of = BTreeMap::new();
        for (id, tok) in token_of.iter().enumerate() {
            if id_of.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{tok}` in vocabulary")));
            }
        }
        Ok(Vocabulary { id_of, token_of, min_freq })
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    /// Id of `token`, or `UNK` for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> usize {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.token_of[id]
    }

    /// Id-ordered token list (the serialized form).
    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    /// Tokenize and wrap in `<sos>`/`<eos>`, pad with `<pad>` to exactly
    /// `max_len` ids. Text longer than `max_len - 2` tokens is truncated.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenizedReport {
        assert!(max_len >= 2, "max_len {max_len} cannot hold <sos> and <eos>");
        let mut ids = vec![SOS];
        for tok in tokenize(text).into_iter().take(max_len - 2) {
            ids.push(self.id(&tok));
        }
        ids.push(EOS);
        ids.resize(max_len, PAD);
        TokenizedReport { text: text.to_string(), ids }
    }

    /// Join content tokens back into text, skipping `<sos>` and stopping at
    /// the first `<eos>` or `<pad>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                SOS => continue,
                EOS | PAD => break,
                _ => words.push(self.token(id)),
            }
        }
        words.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile { tokens: self.token_of.clone(), min_freq: self.min_freq };
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        let file: VocabFile = serde_json::from_str(&text)?;
        Vocabulary::from_tokens(file.tokens, file.min_freq)
    }
}

/// A caption in id form: `<sos>`, content ids, `<eos>`, then `<pad>` up to
/// the fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedReport {
    pub text: String,
    pub ids: Vec<usize>,
}

impl TokenizedReport {
    /// Teacher-forcing view with padding trimmed: the model reads
    /// `[<sos>, w1..wk]` and is scored against `[w1..wk, <eos>]`.
    pub fn shifted(&self) -> (Vec<usize>, Vec<usize>) {
        let end = self
            .ids
            .iter()
            .position(|&i| i == EOS)
            .expect("a tokenized report always carries an <eos>");
        (self.ids[..end].to_vec(), self.ids[1..=end].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_pinned() {
        let v = Vocabulary::build(&["a b a b a c c c"]).unwrap();
        assert_eq!(v.id("<pad>"), PAD, "pad marker owns id 0");
        assert_eq!(v.id("<sos>"), SOS, "start marker owns id 1");
        assert_eq!(v.id("<eos>"), EOS, "end marker owns id 2");
        assert_eq!(v.id("<unk>"), UNK, "unknown marker owns id 3");
    }

    #[test]
    fn frequency_threshold_keeps_a_drops_b() {
        let v = Vocabulary::build(&["a b a b a"]).unwrap();
        assert!(v.contains("a"), "freq-3 token must be kept");
        assert!(!v.contains("b"), "freq-2 token must be dropped at min_freq 3");
        assert_eq!(v.id("b"), UNK, "dropped token maps to <unk>");
    }

    #[test]
    fn ids_are_assigned_by_frequency_then_alphabetically() {
        // zz appears 4 times; aa and mm 3 each (tie broken alphabetically)
        let v = Vocabulary::build(&["zz zz zz zz mm mm mm aa aa aa"]).unwrap();
        assert_eq!(v.id("zz"), 4, "most frequent token gets the first free id");
        assert_eq!(v.id("aa"), 5, "ties go in ascending token order");
        assert_eq!(v.id("mm"), 6);
    }

    #[test]
    fn tokenize_lowercases_and_strips_mixed_alphanumerics() {
        let toks = tokenize("The Lungs xxxx1 are 99 Clear x9y");
        assert_eq!(
            toks,
            vec!["the", "lungs", "are", "99", "clear"],
            "letter+digit tokens are de-identification noise; pure words and pure numbers stay"
        );
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = Vocabulary::build(&[""; 3]).unwrap_err();
        assert!(
            matches!(err, Error::Contract(_)),
            "expected contract error, got {err:?}"
        );
    }

    #[test]
    fn bijection_between_map_and_list() {
        let v = Vocabulary::build(&["x x x y y y z z z"]).unwrap();
        for (id, tok) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(tok), id, "token `{tok}` must map back to its id");
            assert_eq!(v.token(id), tok, "id {id} must map back to its token");
        }
    }

    #[test]
    fn encode_wraps_pads_and_truncates() {
        let v = Vocabulary::build(&["cat cat cat sat sat sat"]).unwrap();
        let r = v.encode("cat sat", 6);
        assert_eq!(r.ids[0], SOS, "first id is <sos>");
        assert_eq!(
            r.ids,
            vec![SOS, v.id("cat"), v.id("sat"), EOS, PAD, PAD],
            "body, <eos>, then padding to the fixed length"
        );
        assert_eq!(
            r.ids.iter().filter(|&&i| i == EOS).count(),
            1,
            "exactly one <eos>"
        );

        let truncated = v.encode("cat sat cat sat cat", 4);
        assert_eq!(
            truncated.ids,
            vec![SOS, v.id("cat"), v.id("sat"), EOS],
            "over-long text is cut to max_len - 2 content tokens"
        );
    }

    #[test]
    fn unseen_token_encodes_to_unk() {
        let v = Vocabulary::build(&["cat cat cat"]).unwrap();
        let r = v.encode("cat dog", 6);
        assert_eq!(r.ids[2], UNK, "out-of-vocabulary token maps to <unk>");
    }

    #[test]
    fn decode_inverts_encode_on_in_vocab_text() {
        let v = Vocabulary::build(&["a a a big big big cat cat cat"]).unwrap();
        let r = v.encode("a  Big cat", 8);
        assert_eq!(
            v.decode(&r.ids),
            "a big cat",
            "round-trip is identity modulo whitespace and case normalization"
        );
    }

    #[test]
    fn shifted_pairs_inputs_with_next_tokens() {
        let v = Vocabulary::build(&["cat cat cat sat sat sat"]).unwrap();
        let r = v.encode("cat sat", 7);
        let (input, target) = r.shifted();
        assert_eq!(input, vec![SOS, v.id("cat"), v.id("sat")]);
        assert_eq!(target, vec![v.id("cat"), v.id("sat"), EOS]);
        assert_eq!(input.len(), target.len(), "teacher forcing aligns row for row");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocabulary::build(&["left left left right right right"]).unwrap();
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v, "vocabulary survives the JSON round-trip");
    }

    #[test]
    fn load_rejects_missing_reserved_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        std::fs::write(&path, r#"{"tokens": ["a", "b"], "min_freq": 3}"#).unwrap();
        let err = Vocabulary::load(&path).unwrap_err();
        assert!(
            matches!(err, Error::Vocab(_)),
            "expected vocabulary error, got {err:?}"
        );
    }
}
