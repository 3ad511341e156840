//! Mini-batch training with per-epoch learning-rate decay and early stopping
//! on validation HR@10.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::{init_model, ModelState};
use crate::objective::{loss_and_gradients, Adam, Graphs, LossBreakdown, LossMeter, Sampler, TrainConfig};

/// Cutoff that drives early stopping.
pub const STOP_CUTOFF: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val_hr: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best model by validation HR@10, encoded.
    pub model: ModelState,
    pub graphs: Graphs,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

impl TrainOutcome {
    /// `epoch lr total rec soc ssl reg val_hr10 seconds` per line.
    pub fn history_text(&self) -> String {
        let mut out = String::from("# epoch lr total rec soc ssl reg val_hr10 seconds\n");
        for e in &self.history {
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {:.3}\n",
                e.epoch,
                e.lr,
                e.loss.total,
                e.loss.rec,
                e.loss.soc,
                e.loss.ssl,
                e.loss.reg,
                e.val_hr.map_or("-".to_owned(), |h| h.to_string()),
                e.seconds
            ));
        }
        out
    }
}

/// Fresh model configured for `cfg`'s aggregation and variant.
pub fn initial_model(ds: &Dataset, cfg: &TrainConfig) -> ModelState {
    let mut ms = init_model(ds.num_users, ds.num_items, cfg.dim, cfg.seed);
    ms.aggregation = cfg.aggregation;
    ms.fuse_social = cfg.variant.fuses_social();
    ms
}

/// Trains on `ds.train`. `on_improve` sees every new best model (already
/// encoded), e.g. to checkpoint it.
pub fn train(
    ds: &Dataset,
    cfg: &TrainConfig,
    eval_opts: &EvalOptions,
    mut on_improve: impl FnMut(&ModelState, usize) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let graphs = Graphs::from_dataset(ds);
    let sampler = Sampler::new(ds)?;
    let mut ms = initial_model(ds, cfg);
    ms.retain_layers = false;
    let mut adam = Adam::new(&ms);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let stop_opts = EvalOptions {
        cutoffs: vec![STOP_CUTOFF],
        ..eval_opts.clone()
    };
    let steps_per_epoch = ds.train.len().div_ceil(cfg.batch_size).max(1);

    let mut best: Option<(ModelState, usize, f64)> = None;
    let mut history = Vec::new();
    let mut diverged = None;
    let mut stale = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut meter = LossMeter::default();
        for _ in 0..steps_per_epoch {
            ms.encode(&graphs.interaction, &graphs.social, cfg.layers)?;
            let batch = sampler.sample(cfg.batch_size, &mut rng);
            let (loss, grads) = match loss_and_gradients(&batch, &ms, cfg, &graphs) {
                Ok(out) => out,
                Err(Error::NonFinite(what)) => {
                    diverged = Some(format!("epoch {epoch}: non-finite {what} loss"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !grads.is_finite() {
                diverged = Some(format!("epoch {epoch}: non-finite gradient"));
                break 'epochs;
            }
            meter.add(&loss);
            adam.step(&mut ms, &grads, lr);
        }
        ms.encode(&graphs.interaction, &graphs.social, cfg.layers)?;
        let val_hr = (!ds.val.is_empty()).then(|| evaluate(&ms, ds, Split::Validation, &stop_opts).hr_at(STOP_CUTOFF));
        let log = EpochLog {
            epoch,
            lr,
            loss: meter.mean(),
            val_hr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} {} val_hr@10={} ({:.2}s)",
            log.loss,
            val_hr.map_or("-".into(), |h| format!("{h:.4}")),
            log.seconds
        );
        history.push(log);

        // Without a validation split the latest epoch is kept.
        let score = val_hr.unwrap_or(f64::INFINITY);
        let improved = best.as_ref().is_none_or(|(_, _, b)| score > *b || val_hr.is_none());
        if improved {
            on_improve(&ms, epoch)?;
            best = Some((ms.clone(), epoch, score));
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }

    let (mut model, best_epoch) = match best {
        Some((m, e, _)) => (m, Some(e)),
        None => (initial_model(ds, cfg), None),
    };
    model.retain_layers = true;
    model.encode(&graphs.interaction, &graphs.social, cfg.layers)?;
    if let Some(msg) = &diverged {
        log::warn!("training diverged: {msg}; keeping last good model");
    }
    Ok(TrainOutcome {
        model,
        graphs,
        best_epoch,
        history,
        diverged,
    })
}
