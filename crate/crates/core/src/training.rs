//! Epoch loop with validation-based early stopping and best-checkpoint
//! selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::binio;
use crate::config::RunConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model, Optimizer, SaveInfo};
use crate::ops::Mode;
use crate::pipeline::{brain_batch, prepare, Prepared, SplitData};

/// RNG stream ids, so each consumer of the run seed is independent.
const STREAM_INIT: u64 = 0;
const STREAM_DROPOUT: u64 = 1;
const STREAM_BATCHES: u64 = 1 << 32;

pub const HISTORY_HEADER: &str = "epoch,train_loss,valid_loss,valid_top10";

/// Shuffles `0..n` with a seed derived from `(seed, epoch)` and cuts it into
/// full batches; the short tail is dropped.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size", "must be at least 2"));
    }
    if n < batch_size {
        return Err(Error::invalid(
            "batch_size",
            format!("{n} training samples cannot fill one batch of {batch_size}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_BATCHES + epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    Ok(idx.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Patience bookkeeping; improvement means strictly lower loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_top10: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub epochs: usize,
    pub updates: u64,
    pub stopped_early: bool,
    pub num_params: usize,
    pub train_windows: usize,
    pub valid_windows: usize,
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.valid_loss, r.valid_top10).unwrap();
    }
    s
}

/// Trains on the train split, selecting by validation loss. Writes
/// `history.csv` and `best/` under `out`.
pub fn train(ds: &Dataset, cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let prepared = prepare(ds, cfg, &[Split::Train, Split::Valid], None)?;
    train_prepared(&prepared, cfg, out)
}

pub fn train_prepared(p: &Prepared, cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let tc = &cfg.training;
    let train = p.split(Split::Train)?;
    let valid = p.split(Split::Valid)?;
    if valid.is_empty() {
        return Err(Error::State("the valid split has no windows".into()));
    }
    let mut init = ChaCha8Rng::seed_from_u64(tc.seed);
    init.set_stream(STREAM_INIT);
    let mut model = Model::new(cfg, &p.frozen, &mut init)?;
    let mut opt = Optimizer::new(&model, cfg);
    let mut dropout = ChaCha8Rng::seed_from_u64(tc.seed);
    dropout.set_stream(STREAM_DROPOUT);
    info!(
        "training {} parameters on {} windows ({} valid)",
        model.num_params(),
        train.len(),
        valid.len()
    );

    let best_dir = out.join("best");
    let history_path = out.join("history.csv");
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=tc.max_epochs {
        let batches = make_batches(train.len(), tc.batch_size, tc.seed, epoch as u64)?;
        let updates = batches.len().min(tc.updates_per_epoch);
        let mut total = 0.0;
        for idx in &batches[..updates] {
            let loss = match step(&mut model, &mut opt, p, train, idx, cfg, &mut dropout) {
                Ok(l) => l,
                Err(e) => {
                    binio::write_atomic(&history_path, history_csv(&history).as_bytes())?;
                    return Err(e);
                }
            };
            total += loss;
        }
        let train_loss = total / updates as f64;
        let (valid_loss, valid_top10) = validate(&mut model, p, valid, cfg)?;
        if !valid_loss.is_finite() {
            binio::write_atomic(&history_path, history_csv(&history).as_bytes())?;
            return Err(Error::NonFinite {
                location: format!("validation loss at epoch {epoch}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_top10,
        });
        binio::write_atomic(&history_path, history_csv(&history).as_bytes())?;
        let (improved, stop) = stopper.update(epoch, valid_loss);
        info!(
            "epoch {epoch}: train {train_loss:.4} valid {valid_loss:.4} top10 {valid_top10:.1}%{}",
            if improved { " *" } else { "" }
        );
        if improved {
            save_checkpoint(
                &best_dir,
                &model,
                &opt,
                &SaveInfo {
                    config: cfg,
                    frozen: &p.frozen,
                    epoch,
                    valid_loss,
                    split_reads: &p.reads,
                },
            )?;
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainSummary {
        best_epoch: stopper.best_epoch,
        best_valid_loss: stopper.best,
        epochs: history.len(),
        updates: opt.brain.step,
        stopped_early,
        num_params: model.num_params(),
        train_windows: train.len(),
        valid_windows: valid.len(),
        checkpoint: best_dir,
        history,
    })
}

fn step(
    model: &mut Model,
    opt: &mut Optimizer,
    p: &Prepared,
    data: &SplitData,
    idx: &[usize],
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (x, y, subjects, layout_of) = data.batch(idx)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let batch = brain_batch(&x, &subjects, &layout_of, &p.layouts);
    let z = model.encode_brain(&mut g, &vars, &batch, Mode::Train, rng)?;
    let yv = model.encode_speech(&mut g, &vars, &y, Mode::Train, rng)?;
    let loss = g.objective_loss(cfg.training.objective, z, yv)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            location: format!("training loss at update {}", opt.brain.step + 1),
        });
    }
    let grads = g.backward(loss);
    let gb: Vec<_> = vars.brain.iter().map(|&v| grads.get(v).cloned()).collect();
    opt.brain.step(&mut model.brain.params, &gb)?;
    if let (Some(net), Some(st)) = (model.speech.as_mut(), opt.speech.as_mut()) {
        let gs: Vec<_> = vars.speech.iter().map(|&v| grads.get(v).cloned()).collect();
        st.step(&mut net.params, &gs)?;
    }
    Ok(value)
}

/// Validation loss over the whole split in fixed consecutive chunks of
/// `batch_size` (the last chunk may be shorter), weighted by chunk size,
/// plus the within-chunk top-10 accuracy as a diagnostic.
pub fn validate(model: &mut Model, p: &Prepared, data: &SplitData, cfg: &RunConfig) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = data.len();
    let bs = cfg.training.batch_size;
    let (mut loss_sum, mut hits, mut counted) = (0.0, 0usize, 0usize);
    for start in (0..n).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
        if idx.len() < 2 {
            continue;
        }
        let (x, y, subjects, layout_of) = data.batch(&idx)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let batch = brain_batch(&x, &subjects, &layout_of, &p.layouts);
        let z = model.encode_brain(&mut g, &vars, &batch, Mode::Eval, &mut rng)?;
        let yv = model.encode_speech(&mut g, &vars, &y, Mode::Eval, &mut rng)?;
        let loss = g.objective_loss(cfg.training.objective, z, yv)?;
        loss_sum += g.value(loss).item() as f64 * idx.len() as f64;
        let logits = g.pairwise_inner(z, yv)?;
        let l = g.value(logits).data();
        let b = idx.len();
        for i in 0..b {
            let row = &l[i * b..(i + 1) * b];
            // rank with ties going to the lower index
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > row[i] || (v == row[i] && j < i))
                .count();
            hits += usize::from(rank < 10);
        }
        counted += b;
    }
    if counted == 0 {
        return Err(Error::State("validation split needs at least two windows".into()));
    }
    Ok((loss_sum / counted as f64, 100.0 * hits as f64 / counted as f64))
}
