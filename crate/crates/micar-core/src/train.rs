//! Teacher-forced training: a single optimizer step over a mini-batch, and
//! the epoch loop around it — seeded shuffling, a step-decay learning-rate
//! schedule, per-step metrics CSV, `last`/`best` checkpoints, and a lock
//! file so exactly one process trains into a checkpoint directory. Resuming
//! from a checkpoint replays the identical schedule: the optimizer's step
//! count locates the epoch and batch to continue from.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::data::dataset::{Dataset, Example, Split};
use crate::data::vocab;
use crate::decode;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::model::{self, Model};
use crate::optim::{AdamW, StepLr};
use crate::session::{Phase, Session};
use crate::tensor::Tensor;

/// One teacher-forced example: the decoder reads `input` and is scored
/// against `target`, which is `input` shifted left by one plus `<eos>`.
pub struct Sample<'a> {
    pub image: &'a Tensor,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl<'a> Sample<'a> {
    pub fn of(ex: &'a Example) -> Sample<'a> {
        let (input, target) = ex.report.shifted();
        Sample { image: &ex.image, input, target }
    }
}

/// Batch-mean losses of one optimizer step, plus the token count the
/// language term summed over (for per-token normalization).
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub total: f64,
    pub lang: f64,
    pub balance: f64,
    pub tokens: usize,
}

/// Forward, backward, and one AdamW update over `batch` on a fresh tape.
/// The losses of every sample are averaged before differentiation. A
/// non-finite loss aborts before any parameter moves, naming the first
/// parameter whose gradient went non-finite.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[Sample],
    seed: u64,
    step: u64,
    lr_scale: f64,
) -> Result<StepMetrics> {
    assert!(!batch.is_empty(), "a training step needs at least one sample");
    let mut sess = Session::new(Phase::Train, seed, step);

    let mut totals = Vec::with_capacity(batch.len());
    let mut lang_sum = 0.0;
    let mut balance_sum = 0.0;
    let mut tokens = 0;
    for s in batch {
        let out = model.forward(&mut sess, s.image, &s.input)?;
        let losses = model::total_loss(&mut sess, &model.cfg, out.logits, &s.target, &out.load_balance)?;
        totals.push(losses.total);
        lang_sum += sess.tape.scalar(losses.lang);
        balance_sum += sess.tape.scalar(losses.balance);
        tokens += losses.active;
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = sess.tape.add(acc, t);
    }
    let inv = 1.0 / batch.len() as f64;
    let loss = sess.tape.affine_scalar(acc, inv, 0.0);
    let total = sess.tape.scalar(loss);

    sess.tape.backward(loss)?;
    model.params.zero_grads();
    sess.accumulate_grads(&mut model.params, 1.0);
    if !total.is_finite() {
        for (name, t) in model.params.iter() {
            if let Some(g) = &t.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { what: "gradient", param: name.clone() });
                }
            }
        }
        return Err(Error::Contract(format!(
            "the batch loss is {total} yet every parameter gradient is finite"
        )));
    }
    opt.apply(&mut model.params, lr_scale)?;

    Ok(StepMetrics {
        total,
        lang: lang_sum * inv,
        balance: balance_sum * inv,
        tokens,
    })
}

/// Epoch-loop configuration. `step_epochs == 0` derives one decay per third
/// of the run; `max_steps == 0` means no cap; `val_every == 0` disables
/// validation (and with it `best.ckpt`).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub step_epochs: usize,
    pub seed: u64,
    pub max_steps: u64,
    pub val_every: usize,
    pub val_beam_width: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            gamma: 0.1,
            step_epochs: 0,
            seed: 0,
            max_steps: 0,
            val_every: 1,
            val_beam_width: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Optimizer steps completed over the whole run, including resumed ones.
    pub steps: u64,
    pub last: Option<StepMetrics>,
    pub best_val_bleu1: Option<f64>,
    pub metrics_path: PathBuf,
}

/// Holds `<dir>/.lock` for the duration of a training run.
struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "`{}` exists: another run owns this checkpoint directory (delete the file if that run is gone)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Beam-search the given split and score it against its own references.
pub fn evaluate_split(
    model: &Model,
    data: &Dataset,
    split: Split,
    beam_width: usize,
) -> Result<MetricReport> {
    let indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Contract(format!("the {split} split is empty")));
    }
    let mut predictions = Vec::with_capacity(indices.len());
    let mut references = Vec::with_capacity(indices.len());
    for i in indices {
        let ex = &data.examples[i];
        let ids = decode::generate_caption(model, &ex.image, beam_width, data.max_len, true)?;
        let text = data.vocab.decode(&ids);
        predictions.push((ex.id.clone(), vocab::tokenize(&text)));
        references.push((ex.id.clone(), vocab::tokenize(&ex.report.text)));
    }
    metrics::evaluate_corpus(&predictions, &references)
}

/// Trains for `cfg.epochs` epochs (or until `cfg.max_steps`), writing
/// `metrics.csv`, `last.ckpt` each epoch, and `best.ckpt` whenever the
/// validation BLEU-1 improves. Resume by loading a checkpoint and passing
/// its model and optimizer back in: `opt.step` marks where to continue.
pub fn fit(
    model: &mut Model,
    opt: &mut AdamW,
    data: &Dataset,
    cfg: &TrainConfig,
    ckpt_dir: &Path,
) -> Result<FitReport> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config(
            "batch_size and epochs must both be at least 1".into(),
        ));
    }
    let n_train = data.split_indices(Split::Train).len();
    if n_train == 0 {
        return Err(Error::Contract("the training split is empty".into()));
    }
    std::fs::create_dir_all(ckpt_dir)?;
    let _lock = Lock::acquire(ckpt_dir)?;

    let steps_per_epoch = n_train.div_ceil(cfg.batch_size) as u64;
    let schedule = if cfg.step_epochs == 0 {
        StepLr::thirds(cfg.gamma, cfg.epochs)
    } else {
        StepLr { gamma: cfg.gamma, step_epochs: cfg.step_epochs }
    };

    let start_step = opt.step;
    let mut global = start_step;
    let metrics_path = ckpt_dir.join("metrics.csv");
    let mut log = if start_step > 0 && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "step,L_total,L_lang,L_balance,lr")?;
        f
    };

    let mut best_val_bleu1: Option<f64> = None;
    let mut last = None;
    let first_epoch = (start_step / steps_per_epoch) as usize;
    let mut capped = false;
    for epoch in first_epoch..cfg.epochs {
        let order = data.epoch_order(Split::Train, cfg.seed, epoch as u64);
        let skip = if epoch == first_epoch { (start_step % steps_per_epoch) as usize } else { 0 };
        let lr_scale = schedule.scale(epoch);
        for b in skip..steps_per_epoch as usize {
            if cfg.max_steps > 0 && global >= cfg.max_steps {
                capped = true;
                break;
            }
            let lo = b * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(order.len());
            let batch: Vec<Sample> =
                order[lo..hi].iter().map(|&i| Sample::of(&data.examples[i])).collect();
            let m = train_step(model, opt, &batch, cfg.seed, global, lr_scale)?;
            global += 1;
            writeln!(
                log,
                "{},{},{},{},{}",
                global,
                m.total,
                m.lang,
                m.balance,
                opt.cfg.lr * lr_scale
            )?;
            last = Some(m);
        }
        checkpoint::save(&ckpt_dir.join("last.ckpt"), model, opt, &data.vocab, global)?;
        if capped {
            break;
        }
        if cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0 {
            let report = evaluate_split(model, data, Split::Val, cfg.val_beam_width)?;
            if best_val_bleu1.is_none_or(|b| report.bleu_1 > b) {
                best_val_bleu1 = Some(report.bleu_1);
                checkpoint::save(&ckpt_dir.join("best.ckpt"), model, opt, &data.vocab, global)?;
            }
        }
    }

    Ok(FitReport { steps: global, last, best_val_bleu1, metrics_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, VisionConfig};
    use crate::data::synth::{self, SyntheticSpec};
    use crate::optim::AdamWConfig;

    /// A corpus of 10 examples (8 train / 1 val / 1 test) rendered to disk.
    fn tiny_corpus(dir: &Path, max_len: usize) -> Dataset {
        synth::generate(&SyntheticSpec { size: 32, seed: 7 }, 10, dir).unwrap();
        Dataset::open(dir, max_len).unwrap()
    }

    /// Small model sized to the synthetic captions; dropout off so loss
    /// trajectories are smooth deterministic functions of the parameters.
    fn fixture_cfg(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_latent: 16,
            heads: 2,
            d_nope: 4,
            d_rope: 4,
            d_ff: 32,
            n_enc: 1,
            n_dec: 1,
            experts: 2,
            top_k: 1,
            vocab_size,
            max_len: 10,
            attn_dropout: 0.0,
            block_dropout: 0.0,
            vision: VisionConfig {
                base_channels: 2,
                blocks_per_stage: 1,
                d_pyramid: 4,
                d_fused: 16,
                grid: 2,
                ..VisionConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn fixture(dir: &Path) -> (Model, AdamW, Dataset) {
        let data = tiny_corpus(dir, 10);
        let model = Model::new(fixture_cfg(data.vocab.len()), 7).unwrap();
        let opt = AdamW::new(AdamWConfig { lr: 3e-3, ..AdamWConfig::default() });
        (model, opt, data)
    }

    #[test]
    fn loss_strictly_decreases_over_twenty_steps_on_a_fixed_batch() {
        let dir = tempfile::tempdir().unwrap();
        let (mut model, mut opt, data) = fixture(dir.path());
        let train = data.split_indices(Split::Train);
        assert_eq!(train.len(), 8);

        let mut previous = f64::INFINITY;
        for step in 0..20 {
            let batch: Vec<Sample> = train.iter().map(|&i| Sample::of(&data.examples[i])).collect();
            let m = train_step(&mut model, &mut opt, &batch, 7, step, 1.0).unwrap();
            assert!(
                m.total < previous,
                "step {step}: loss {} did not improve on {previous}",
                m.total
            );
            previous = m.total;
        }
    }

    #[test]
    fn ten_step_runs_write_identical_metrics_files() {
        let data_dir = tempfile::tempdir().unwrap();
        let data = tiny_corpus(data_dir.path(), 10);
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 4,
            seed: 7,
            max_steps: 10,
            val_every: 0,
            ..TrainConfig::default()
        };

        let mut csvs = Vec::new();
        for _ in 0..2 {
            let run_dir = tempfile::tempdir().unwrap();
            let mut model = Model::new(fixture_cfg(data.vocab.len()), 7).unwrap();
            let mut opt = AdamW::new(AdamWConfig::default());
            let report = fit(&mut model, &mut opt, &data, &cfg, run_dir.path()).unwrap();
            assert_eq!(report.steps, 10);
            csvs.push(std::fs::read(report.metrics_path).unwrap());
        }
        assert_eq!(csvs[0], csvs[1], "seed-pinned runs must log identical metrics");

        let text = String::from_utf8(csvs[0].clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11, "header plus one row per step");
        assert_eq!(lines[0], "step,L_total,L_lang,L_balance,lr");
        assert!(lines[1].starts_with("1,"), "steps are logged 1-based");
    }

    #[test]
    fn resuming_from_a_checkpoint_matches_the_uninterrupted_run() {
        let data_dir = tempfile::tempdir().unwrap();
        let data = tiny_corpus(data_dir.path(), 10);
        // dropout left at its defaults: resume must also replay the masks
        let model_cfg = ModelConfig { vocab_size: data.vocab.len(), ..fixture_cfg(0) };
        let mk_cfg = |max_steps| TrainConfig {
            epochs: 100,
            batch_size: 4,
            seed: 7,
            max_steps,
            val_every: 0,
            ..TrainConfig::default()
        };

        let solo_dir = tempfile::tempdir().unwrap();
        let mut solo = Model::new(model_cfg.clone(), 7).unwrap();
        let mut solo_opt = AdamW::new(AdamWConfig::default());
        fit(&mut solo, &mut solo_opt, &data, &mk_cfg(20), solo_dir.path()).unwrap();

        let resumed_dir = tempfile::tempdir().unwrap();
        let mut first = Model::new(model_cfg, 7).unwrap();
        let mut first_opt = AdamW::new(AdamWConfig::default());
        fit(&mut first, &mut first_opt, &data, &mk_cfg(10), resumed_dir.path()).unwrap();

        let loaded = checkpoint::load(&resumed_dir.path().join("last.ckpt")).unwrap();
        assert_eq!(loaded.step, 10);
        let mut resumed = loaded.model;
        let mut resumed_opt = loaded.optim;
        let report =
            fit(&mut resumed, &mut resumed_opt, &data, &mk_cfg(20), resumed_dir.path()).unwrap();
        assert_eq!(report.steps, 20);

        for (name, t) in solo.params.iter() {
            let other = &resumed.params.get(name).data;
            for (i, (a, b)) in t.data.iter().zip(other.iter()).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-10,
                    "parameter `{name}`[{i}] diverged after resume: {a} vs {b}"
                );
            }
        }
        for (name, t) in solo.bufs.iter() {
            let other = &resumed.bufs.get(name).data;
            for (i, (a, b)) in t.data.iter().zip(other.iter()).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-10,
                    "buffer `{name}`[{i}] diverged after resume: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn a_second_writer_is_locked_out_of_the_checkpoint_directory() {
        let data_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let (mut model, mut opt, data) = fixture(data_dir.path());
        std::fs::write(run_dir.path().join(".lock"), b"").unwrap();

        let cfg = TrainConfig { max_steps: 1, val_every: 0, ..TrainConfig::default() };
        let err = fit(&mut model, &mut opt, &data, &cfg, run_dir.path()).unwrap_err();
        assert!(
            matches!(&err, Error::Contract(msg) if msg.contains(".lock")),
            "expected a lock complaint, got {err:?}"
        );
    }

    #[test]
    fn the_lock_is_released_when_training_finishes() {
        let data_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let (mut model, mut opt, data) = fixture(data_dir.path());
        let cfg = TrainConfig {
            batch_size: 8,
            seed: 7,
            max_steps: 1,
            val_every: 0,
            ..TrainConfig::default()
        };
        fit(&mut model, &mut opt, &data, &cfg, run_dir.path()).unwrap();
        assert!(
            !run_dir.path().join(".lock").exists(),
            "the lock must be dropped when fit returns"
        );
        assert!(run_dir.path().join("last.ckpt").exists());

        // re-acquiring the directory works, and a run already at its step
        // cap completes without training further
        let report = fit(&mut model, &mut opt, &data, &cfg, run_dir.path()).unwrap();
        assert_eq!(report.steps, 1, "no extra steps may run past max_steps");
        assert!(report.last.is_none());
    }

    #[test]
    fn validation_tracks_the_best_checkpoint() {
        let data_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let (mut model, mut opt, data) = fixture(data_dir.path());
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 7,
            val_every: 1,
            val_beam_width: 1,
            ..TrainConfig::default()
        };
        let report = fit(&mut model, &mut opt, &data, &cfg, run_dir.path()).unwrap();
        assert!(report.best_val_bleu1.is_some(), "validation ran, so a best score exists");
        assert!(run_dir.path().join("best.ckpt").exists());
        let best = report.best_val_bleu1.unwrap();
        assert!((0.0..=1.0).contains(&best), "BLEU-1 out of range: {best}");
    }

    #[test]
    fn a_poisoned_parameter_aborts_with_a_non_finite_diagnostic() {
        let data_dir = tempfile::tempdir().unwrap();
        let (mut model, mut opt, data) = fixture(data_dir.path());
        model.params.get_mut("head.b").data[0] = f64::INFINITY;

        let batch = vec![Sample::of(&data.examples[0])];
        let err = train_step(&mut model, &mut opt, &batch, 7, 0, 1.0).unwrap_err();
        assert!(
            matches!(&err, Error::NonFinite { .. }),
            "expected a non-finite diagnostic, got {err:?}"
        );
    }

    #[test]
    fn fit_last_checkpoint_resumes_exactly_at_the_cap() {
        let data_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let (mut model, mut opt, data) = fixture(data_dir.path());
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 7,
            max_steps: 2,
            val_every: 0,
            ..TrainConfig::default()
        };
        fit(&mut model, &mut opt, &data, &cfg, run_dir.path()).unwrap();
        let loaded = checkpoint::load(&run_dir.path().join("last.ckpt")).unwrap();
        assert_eq!(loaded.step, 2, "the capped run checkpoints at exactly max_steps");
        assert_eq!(loaded.optim.step, 2);
    }
}
