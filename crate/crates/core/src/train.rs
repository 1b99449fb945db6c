//! Training loop with alternating TransE and recommendation phases, early
//! stopping on validation F1, checkpoints and ablation runs.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{Dataset, TravelRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate_trips, MetricReport, SeedRow};
use crate::model::{LossParts, Model, Variant};
use crate::optim::AdamW;
use crate::rng::{derive_seed, stream_rng, Stream};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const CHECKPOINT_VERSION: u32 = 1;

/// What early stopping compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Intermediate F1 on the validation split.
    ValidF1,
    /// Negative training loss, used when the validation split is empty.
    TrainLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub transe_loss: f64,
    pub loss: LossParts,
    pub selection_metric: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub model: Model,
    pub optimizer: AdamW,
    pub transe_optimizer: AdamW,
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub selection: Selection,
    pub stale_epochs: usize,
    pub history: Vec<EpochLog>,
    pub finished: bool,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        if ckpt.config_hash != ckpt.config.hash() {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        Ok(ckpt)
    }

    /// A fresh state before the first epoch.
    pub fn initial(config: &RunConfig, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        if ds.train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let model = Model::new(&config.model, ds, config.seed)?;
        let n = model.params.len();
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            config_hash: config.hash(),
            epoch: 0,
            optimizer: AdamW::new(config.train.optimizer, n),
            transe_optimizer: AdamW::new(config.train.transe_optimizer, n),
            best_model: model.clone(),
            model,
            best_epoch: 0,
            best_metric: None,
            selection: if ds.valid.is_empty() {
                Selection::TrainLoss
            } else {
                Selection::ValidF1
            },
            stale_epochs: 0,
            history: Vec::new(),
            finished: false,
        })
    }
}

/// Trains from scratch. When `out_dir` is given, checkpoints are written to
/// `out_dir/checkpoint.json`.
pub fn train(
    config: &RunConfig,
    ds: &Dataset,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    run(Checkpoint::initial(config, ds)?, ds, out_dir, on_epoch)
}

/// Continues a checkpoint. `config` must hash to the checkpoint's config.
pub fn resume(
    ckpt: Checkpoint,
    config: &RunConfig,
    ds: &Dataset,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let found = config.hash();
    if found != ckpt.config_hash {
        return Err(Error::ConfigHashMismatch {
            expected: ckpt.config_hash,
            found,
        });
    }
    let mut ckpt = ckpt;
    ckpt.config = config.clone();
    run(ckpt, ds, out_dir, on_epoch)
}

/// Validation intermediate F1 with the evaluation settings and a sampling
/// stream fixed by the run seed, so it is reproducible from a checkpoint.
pub fn validation_f1(model: &Model, config: &RunConfig, records: &[TravelRecord]) -> Result<f64> {
    let seed = derive_seed(config.seed, Stream::Sampling, u64::MAX, 0);
    let s = evaluate_trips(
        model,
        records,
        config.eval.top_p,
        config.eval.dedup,
        seed,
        config.execution,
    )?;
    Ok(s.scores.f1)
}

fn transe_epoch(state: &mut Checkpoint, ds: &Dataset, epoch: usize) -> Result<f64> {
    let cfg = &state.config;
    if !cfg.model.variant.uses_knowledge() || ds.kg.triples.is_empty() {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..ds.kg.triples.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, Stream::TransEShuffle, epoch as u64, 0));
    let tables = state.model.kg.tables();
    let mut total = 0.0;
    for (b, chunk) in order.chunks(cfg.train.transe_batch_size).enumerate() {
        let batch: Vec<_> = chunk.iter().map(|&i| ds.kg.triples[i]).collect();
        let neg_seed = derive_seed(cfg.seed, Stream::TransE, epoch as u64, b as u64);
        let mut grads = {
            let mut g = Graph::new(&state.model.params);
            let loss = state
                .model
                .kg
                .transe_loss(&mut g, &batch, state.model.num_entities, neg_seed)?;
            total += g.item(loss);
            g.backward(loss)
        };
        grads.retain(&tables);
        state.transe_optimizer.step(&mut state.model.params, &grads);
    }
    Ok(total)
}

fn main_epoch(state: &mut Checkpoint, ds: &Dataset, epoch: usize) -> Result<LossParts> {
    let cfg = state.config.clone();
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64, 0));
    let mut epoch_loss = LossParts::default();
    for (b, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
        let records: Vec<&TravelRecord> = chunk.iter().map(|&i| &ds.train[i]).collect();
        let noise: Vec<_> = chunk
            .iter()
            .map(|&i| state.model.draw_noise(cfg.seed, epoch as u64, i as u64))
            .collect();
        let result = state
            .model
            .batch_gradients(&records, &noise, cfg.train.betas, cfg.execution)?;
        if !result.loss.is_finite() || !result.grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: b,
                l_s: result.loss.l_s,
                l_d: result.loss.l_d,
                l_r: result.loss.l_r,
            });
        }
        state.optimizer.step(&mut state.model.params, &result.grads);
        epoch_loss.add(&result.loss);
    }
    Ok(epoch_loss)
}

fn run(
    mut state: Checkpoint,
    ds: &Dataset,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    let path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let every = state.config.train.checkpoint_every;
    while !state.finished {
        if state.epoch >= state.config.train.epochs || state.stale_epochs >= state.config.train.patience {
            state.finished = true;
            break;
        }
        let epoch = state.epoch + 1;
        let transe_loss = transe_epoch(&mut state, ds, epoch)?;
        let loss = main_epoch(&mut state, ds, epoch)?;
        let metric = match state.selection {
            Selection::ValidF1 => validation_f1(&state.model, &state.config, &ds.valid)?,
            Selection::TrainLoss => -loss.total,
        };
        let improved = state.best_metric.is_none_or(|best| metric > best);
        if improved {
            state.best_metric = Some(metric);
            state.best_epoch = epoch;
            state.best_model = state.model.clone();
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        state.epoch = epoch;
        let log = EpochLog {
            epoch,
            transe_loss,
            loss,
            selection_metric: metric,
            improved,
        };
        on_epoch(&log);
        state.history.push(log);
        if let Some(p) = &path {
            if every > 0 && epoch.is_multiple_of(every) {
                state.save(p)?;
            }
        }
    }
    if let Some(p) = &path {
        state.save(p)?;
    }
    Ok(state)
}

/// Trains `variant` once per training seed under otherwise identical settings
/// and scores the best model on the test split. Each row's seed is the
/// training seed; sampling uses the same seed.
pub fn run_ablation(
    config: &RunConfig,
    ds: &Dataset,
    variant: Variant,
    train_seeds: &[u64],
    on_epoch: &mut dyn FnMut(u64, &EpochLog),
) -> Result<MetricReport> {
    let mut rows = Vec::new();
    let mut hash = String::new();
    for &seed in train_seeds {
        let mut cfg = config.with_variant(variant);
        cfg.seed = seed;
        hash = cfg.hash();
        let ckpt = train(&cfg, ds, None, &mut |log| on_epoch(seed, log))?;
        let summary = evaluate_trips(
            &ckpt.best_model,
            &ds.test,
            cfg.eval.top_p,
            cfg.eval.dedup,
            seed,
            cfg.execution,
        )?;
        rows.push(SeedRow { seed, summary });
    }
    Ok(MetricReport::from_rows(
        &variant.to_string(),
        "test",
        config.eval.top_p,
        &hash,
        rows,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SynthSpec};
    use crate::data::{build_dataset, FilterConfig};

    fn tiny() -> Dataset {
        let spec = SynthSpec {
            users: 20,
            ..Default::default()
        };
        let synth = generate_synthetic(&spec).unwrap();
        build_dataset(&synth.checkins, &synth.triples, &FilterConfig::default(), 1).unwrap()
    }

    fn quick_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.dim = 8;
        c.model.dynamic.encoder_layers = 1;
        c.train.epochs = 2;
        c.eval.seeds = vec![0];
        c
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = tiny();
        let mut cfg = quick_config();
        cfg.train.optimizer.lr = 0.0;
        cfg.train.transe_optimizer.lr = 0.0;
        let init = Model::new(&cfg.model, &ds, cfg.seed).unwrap();
        let ckpt = train(&cfg, &ds, None, &mut |_| {}).unwrap();
        assert_eq!(ckpt.model.params, init.params);
        assert_eq!(ckpt.epoch, 2);
    }

    #[test]
    fn patience_stops_training() {
        let ds = tiny();
        let mut cfg = quick_config();
        cfg.train.optimizer.lr = 0.0;
        cfg.train.transe_optimizer.lr = 0.0;
        cfg.train.epochs = 50;
        cfg.train.patience = 3;
        let ckpt = train(&cfg, &ds, None, &mut |_| {}).unwrap();
        // Nothing changes, so only the first epoch counts as an improvement.
        assert_eq!(ckpt.epoch, 4);
        assert_eq!(ckpt.best_epoch, 1);
    }

    #[test]
    fn resume_rejects_changed_config() {
        let ds = tiny();
        let cfg = quick_config();
        let ckpt = Checkpoint::initial(&cfg, &ds).unwrap();
        let mut other = cfg.clone();
        other.train.batch_size = 7;
        let err = resume(ckpt, &other, &ds, None, &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::ConfigHashMismatch { .. }));
    }

    #[test]
    fn empty_validation_falls_back_to_training_loss() {
        let mut ds = tiny();
        ds.train.append(&mut ds.valid);
        let ckpt = Checkpoint::initial(&quick_config(), &ds).unwrap();
        assert_eq!(ckpt.selection, Selection::TrainLoss);
    }
}
