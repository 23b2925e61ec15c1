//! Beam-search caption generation. The search is generic over a scorer
//! closure so tests can drive it with enumerable toy distributions; the
//! model adapter encodes the image once and replays only the decoder per
//! candidate prefix.

use crate::data::vocab::{EOS, SOS, UNK};
use crate::error::Result;
use crate::model::{self, Model};
use crate::session::Session;
use crate::tensor::Tensor;

/// One search hypothesis. `tokens` always starts with `<sos>`; a finished
/// beam ends with `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub tokens: Vec<usize>,
    /// Cumulative log-probability of every token after `<sos>`.
    pub logprob: f64,
    pub finished: bool,
}

impl Beam {
    /// Number of tokens the score accumulated over.
    pub fn scored_len(&self) -> usize {
        self.tokens.len().saturating_sub(1).max(1)
    }

    /// Final-ranking score: cumulative log-probability per generated token.
    pub fn normalized(&self) -> f64 {
        self.logprob / self.scored_len() as f64
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Width-limited best-first search. `score` maps a `<sos>`-prefixed token
/// prefix to next-token logits; `banned` ids are masked out before
/// normalization (`<eos>` must not be banned).
///
/// Expansion competes on raw cumulative log-probability; the final winner is
/// chosen by length-normalized score over everything that survived. All ties
/// break toward the lexicographically smaller token sequence, so the search
/// is fully deterministic.
pub fn beam_search<F>(score: &mut F, width: usize, max_len: usize, banned: &[usize]) -> Beam
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    assert!(width >= 1, "beam width must be at least 1");
    assert!(max_len >= 2, "max_len {max_len} cannot hold <sos> and one token");
    assert!(!banned.contains(&EOS), "banning <eos> would make the search non-terminating");

    let mut pool = vec![Beam { tokens: vec![SOS], logprob: 0.0, finished: false }];
    // every pass extends each live beam by one token, so max_len - 1 passes
    // bring everything to <eos> or the cap
    for _ in 1..max_len {
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &pool {
            if beam.finished || beam.tokens.len() >= max_len {
                candidates.push(beam.clone());
                continue;
            }
            let mut logits = score(&beam.tokens);
            for &b in banned {
                logits[b] = crate::attention::MASK_VALUE;
            }
            let logprobs = log_softmax(&logits);
            for (tok, &lp) in logprobs.iter().enumerate() {
                if banned.contains(&tok) {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                candidates.push(Beam {
                    tokens,
                    logprob: beam.logprob + lp,
                    finished: tok == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.logprob
                .partial_cmp(&a.logprob)
                .expect("finite scores")
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(width);
        pool = candidates;
        if pool.iter().all(|b| b.finished || b.tokens.len() >= max_len) {
            break;
        }
    }

    pool.into_iter()
        .max_by(|a, b| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .expect("finite scores")
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .expect("the pool is never empty")
}

/// Greedy reference: repeatedly take the argmax next token (first index on
/// ties, matching the search's lexicographic rule).
pub fn greedy<F>(score: &mut F, max_len: usize, banned: &[usize]) -> Vec<usize>
where
    F: FnMut(&[usize]) -> Vec<f64>,
{
    let mut tokens = vec![SOS];
    while tokens.len() < max_len {
        let mut logits = score(&tokens);
        for &b in banned {
            logits[b] = crate::attention::MASK_VALUE;
        }
        let best = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc })
            .0;
        tokens.push(best);
        if best == EOS {
            break;
        }
    }
    tokens
}

/// Generate one caption with a frozen model. The image is encoded once; each
/// scorer call replays only the decoder over the candidate prefix.
pub fn generate_caption(
    model: &Model,
    image: &Tensor,
    width: usize,
    max_len: usize,
    ban_unk: bool,
) -> Result<Vec<usize>> {
    // eval-phase encoding never updates the running statistics, so the
    // buffer clone is only to satisfy the shared signature
    let mut bufs = model.bufs.clone();
    let mut sess = Session::eval();
    let (encoded, _grid) = model::encode_image(&mut sess, &model.params, &mut bufs, &model.cfg, image)?;
    let patch_data = sess.tape.data(encoded).to_vec();
    let patch_shape = sess.tape.shape(encoded).to_vec();
    drop(sess);

    let mut failure: Option<crate::error::Error> = None;
    let mut score = |prefix: &[usize]| -> Vec<f64> {
        let mut sess = Session::eval();
        let img = sess.tape.constant(patch_data.clone(), &patch_shape);
        match model::decode_tokens(&mut sess, &model.params, &model.cfg, img, prefix) {
            Ok(out) => {
                let v = model.cfg.vocab_size;
                let data = sess.tape.data(out.logits);
                data[data.len() - v..].to_vec()
            }
            Err(e) => {
                failure = Some(e);
                vec![0.0; model.cfg.vocab_size]
            }
        }
    };
    let banned: &[usize] = if ban_unk { &[UNK] } else { &[] };
    let beam = beam_search(&mut score, width, max_len.min(model.cfg.max_len), banned);
    match failure {
        Some(e) => Err(e),
        None => Ok(beam.tokens),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, VisionConfig};
    use crate::rng;
    use rand::Rng;

    /// A fixed toy distribution: logits are a pure function of the prefix.
    fn toy_scorer(seed: u64, vocab: usize) -> impl FnMut(&[usize]) -> Vec<f64> {
        move |prefix: &[usize]| {
            let mut key = seed;
            for &t in prefix {
                key = key.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
            }
            let mut r = rng::stream(key, "toy-logits", 0);
            (0..vocab).map(|_| r.gen_range(-2.0..2.0)).collect()
        }
    }

    /// Exhaustively enumerate every sequence of up to `max_len` tokens and
    /// return the best by the search's own final-ranking rule.
    fn exhaustive_best(seed: u64, vocab: usize, max_len: usize) -> Beam {
        let mut score = toy_scorer(seed, vocab);
        let mut best: Option<Beam> = None;
        let mut stack = vec![Beam { tokens: vec![SOS], logprob: 0.0, finished: false }];
        while let Some(beam) = stack.pop() {
            if beam.finished || beam.tokens.len() >= max_len {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        beam.normalized() > b.normalized()
                            || (beam.normalized() == b.normalized() && beam.tokens < b.tokens)
                    }
                };
                if better {
                    best = Some(beam);
                }
                continue;
            }
            let logprobs = log_softmax(&score(&beam.tokens));
            for (tok, &lp) in logprobs.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                stack.push(Beam { tokens, logprob: beam.logprob + lp, finished: tok == EOS });
            }
        }
        best.expect("enumeration visits at least the cap-length sequences")
    }

    #[test]
    fn width_one_equals_greedy_exactly() {
        for seed in 0..20 {
            let beam = beam_search(&mut toy_scorer(seed, 6), 1, 8, &[]);
            let g = greedy(&mut toy_scorer(seed, 6), 8, &[]);
            assert_eq!(beam.tokens, g, "width-1 beam diverged from greedy at seed {seed}");
        }
    }

    #[test]
    fn wider_beams_never_score_worse_on_enumerable_toys() {
        for seed in 0..10 {
            let best = exhaustive_best(seed, 5, 5);
            let mut prev = f64::NEG_INFINITY;
            for width in [1, 2, 3] {
                let beam = beam_search(&mut toy_scorer(seed, 5), width, 5, &[]);
                assert!(
                    beam.normalized() >= prev - 1e-12,
                    "seed {seed}: widening to {width} lowered the score"
                );
                assert!(
                    beam.normalized() <= best.normalized() + 1e-12,
                    "seed {seed}: beam beat the exhaustive optimum, ranking rules disagree"
                );
                prev = beam.normalized();
            }
        }
    }

    #[test]
    fn hand_built_case_where_greedy_is_suboptimal() {
        // ids: 4 = "a", 5 = "b". At the root, b is locally better, but the
        // a-branch continues near-deterministically while the b-branch goes
        // flat, so the best full sequence starts with a.
        let mut score = |prefix: &[usize]| -> Vec<f64> {
            let mut l = vec![-30.0; 6];
            match prefix {
                [SOS] => {
                    l[4] = 2.0; // ln-odds just below b
                    l[5] = 2.2;
                }
                [SOS, 4] => {
                    l[4] = 5.0; // a a then certain <eos>
                    l[EOS] = 0.0;
                }
                [SOS, 4, 4] => {
                    l[EOS] = 10.0;
                }
                [SOS, 5] => {
                    // flat continuation: everything mediocre
                    l[4] = 0.0;
                    l[5] = 0.0;
                    l[EOS] = 0.0;
                }
                _ => {
                    l[EOS] = 0.0;
                    l[4] = 0.0;
                    l[5] = 0.0;
                }
            }
            l
        };

        let g = greedy(&mut score, 6, &[]);
        assert_eq!(g[1], 5, "greedy takes the locally better first token");

        let beam = beam_search(&mut score, 2, 6, &[]);
        assert_eq!(
            beam.tokens,
            vec![SOS, 4, 4, EOS],
            "width 2 must recover the globally better a-branch"
        );
        let best = {
            // enumerate by hand over this tiny table via the toy harness
            let mut all = Vec::new();
            let mut stack = vec![Beam { tokens: vec![SOS], logprob: 0.0, finished: false }];
            while let Some(b) = stack.pop() {
                if b.finished || b.tokens.len() >= 6 {
                    all.push(b);
                    continue;
                }
                let lp = log_softmax(&score(&b.tokens));
                for (tok, &l) in lp.iter().enumerate() {
                    let mut t = b.tokens.clone();
                    t.push(tok);
                    stack.push(Beam { tokens: t, logprob: b.logprob + l, finished: tok == EOS });
                }
            }
            all.into_iter()
                .max_by(|a, b| a.normalized().partial_cmp(&b.normalized()).unwrap())
                .unwrap()
        };
        assert_eq!(beam.tokens, best.tokens, "width 2 matches exhaustive enumeration");
    }

    #[test]
    fn eos_as_immediate_argmax_yields_the_empty_report() {
        let mut score = |_: &[usize]| {
            let mut l = vec![0.0; 5];
            l[EOS] = 9.0;
            l
        };
        let beam = beam_search(&mut score, 3, 8, &[]);
        assert_eq!(beam.tokens, vec![SOS, EOS], "an immediate <eos> is a valid empty report");
        assert!(beam.finished);
    }

    #[test]
    fn banned_tokens_are_never_emitted() {
        // make <unk> the runaway favorite everywhere, then ban it
        let mut score = |_: &[usize]| {
            let mut l = vec![0.0; 6];
            l[UNK] = 50.0;
            l[4] = 1.0;
            l
        };
        let beam = beam_search(&mut score, 2, 6, &[UNK]);
        assert!(
            !beam.tokens.contains(&UNK),
            "banned <unk> leaked into {:?}",
            beam.tokens
        );
    }

    #[test]
    fn ties_break_toward_the_lexicographically_smaller_sequence() {
        // two tokens with identical logits everywhere; <eos> reachable only
        // at the cap, so the tie decides the whole sequence
        let mut score = |_: &[usize]| vec![-30.0, -30.0, -30.0, -30.0, 1.0, 1.0];
        let beam = beam_search(&mut score, 2, 4, &[]);
        assert_eq!(
            beam.tokens,
            vec![SOS, 4, 4, 4],
            "equal scores must resolve to the smallest token sequence"
        );
    }

    #[test]
    fn model_adapter_is_deterministic_and_respects_ban() {
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
        let model = Model::new(cfg, 19).unwrap();
        let mut r = rng::stream(19, "decode-image", 0);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| r.gen_range(0.0..1.0)).collect();
        let image = Tensor::new(&[3, 32, 32], data);

        let a = generate_caption(&model, &image, 3, 6, true).unwrap();
        let b = generate_caption(&model, &image, 3, 6, true).unwrap();
        assert_eq!(a, b, "generation must be deterministic for a frozen model");
        assert_eq!(a[0], SOS);
        assert!(!a.contains(&UNK), "--ban-unk semantics: <unk> never emitted");

        let g = generate_caption(&model, &image, 1, 6, true).unwrap();
        let mut bufs = model.bufs.clone();
        let mut sess = Session::eval();
        let (enc, _) =
            model::encode_image(&mut sess, &model.params, &mut bufs, &model.cfg, &image).unwrap();
        let patch_data = sess.tape.data(enc).to_vec();
        let patch_shape = sess.tape.shape(enc).to_vec();
        let mut score = |prefix: &[usize]| -> Vec<f64> {
            let mut s = Session::eval();
            let img = s.tape.constant(patch_data.clone(), &patch_shape);
            let out = model::decode_tokens(&mut s, &model.params, &model.cfg, img, prefix).unwrap();
            let v = model.cfg.vocab_size;
            let d = s.tape.data(out.logits);
            d[d.len() - v..].to_vec()
        };
        assert_eq!(
            g,
            greedy(&mut score, 6, &[UNK]),
            "width-1 generation equals greedy decoding on the real model"
        );
    }
}
