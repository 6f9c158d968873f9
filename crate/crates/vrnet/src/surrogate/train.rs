//! Training loop: AdamW with reduce-on-plateau scheduling on the mean
//! gap-normalized loss, best-validation checkpointing and per-step
//! admissibility verification.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, PreparedSample, Split, TrainSample};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::netgraph::{AdamW, Graph, LrSchedule};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub min_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// stop as soon as the validation loss reaches this value
    pub val_target: Option<f64>,
    pub time_limit: Option<Duration>,
    /// verify every prediction against the Loewner predicates each step
    pub check_admissibility: bool,
    /// print epoch metrics to stderr every n epochs (0 = silent)
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            initial_lr: 1e-1,
            lr_factor: 0.5,
            lr_patience: 50,
            min_lr: 1e-7,
            epochs: 200,
            seed: 0,
            weight_decay: 1e-4,
            val_target: None,
            time_limit: None,
            check_admissibility: true,
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochMetric {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetric>,
    pub best_val: f64,
    pub best_epoch: usize,
    /// count of in-envelope violations observed at any training step
    pub admissibility_violations: usize,
    pub stopped_early: bool,
}

/// Mean loss over samples in eval mode (batched, no gradients).
pub(crate) fn evaluate(model: &mut Model, samples: &[&PreparedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let mut g = Graph::new();
        let xi = model.forward_prepared(&mut g, chunk, false)?;
        let (loss, _) = model.batch_loss(&mut g, xi, chunk);
        total += g.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains the model in place; on return the best-validation parameters are
/// loaded. Deterministic for a fixed seed and thread-independent.
pub fn train(model: &mut Model, dataset: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if cfg.batch_size < 4 {
        return Err(Error::InvalidArgument(
            "batch size below 4 degenerates the batch statistics".into(),
        ));
    }
    let prepared = model.prepare(dataset)?;
    let train_idx: Vec<usize> = (0..prepared.len())
        .filter(|&i| prepared[i].split == Split::Train)
        .collect();
    let val_refs: Vec<&PreparedSample> =
        prepared.iter().filter(|s| s.split == Split::Val).collect();
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("no training samples in dataset".into()));
    }

    let optimizer = AdamW::new(cfg.initial_lr, cfg.weight_decay)?;
    let mut schedule = LrSchedule::new(cfg.initial_lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Option<Vec<f64>> = None;
    let mut violations = 0usize;
    let mut stopped_early = false;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 4 {
                continue; // too small for stable batch statistics
            }
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            model.store.zero_grads();
            let mut g = Graph::new();
            let xi = model.forward_prepared(&mut g, &batch, true)?;
            let (loss, ytildes) = model.batch_loss(&mut g, xi, &batch);
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became {loss_val} at epoch {epoch} after {seen} samples; \
                     last lr {:.3e}",
                    schedule.lr()
                )));
            }
            if cfg.check_admissibility {
                for (yt, s) in ytildes.iter().zip(&batch) {
                    let m = Mat::from_vec(3, 3, g.value(*yt).data().to_vec());
                    if !model.admissible(&m, s.c0, 1e-9)? {
                        violations += 1;
                    }
                }
            }
            g.backward(loss, &mut model.store);
            optimizer.step(&mut model.store, schedule.lr());
            epoch_loss += loss_val * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let val_loss = if val_refs.is_empty() {
            train_loss
        } else {
            evaluate(model, &val_refs)?
        };
        schedule.plateau_step(val_loss);
        metrics.push(EpochMetric { epoch, lr: schedule.lr(), train_loss, val_loss });
        if cfg.log_every > 0 && epoch % cfg.log_every == 0 {
            eprintln!(
                "epoch {epoch:4}: lr {:.3e}, train {:.5}, val {:.5} ({:.1}s)",
                schedule.lr(),
                train_loss,
                val_loss,
                started.elapsed().as_secs_f64()
            );
        }

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = Some(model.store.flat_values());
        }
        if let Some(target) = cfg.val_target {
            if val_loss <= target {
                stopped_early = true;
                break;
            }
        }
        if let Some(limit) = cfg.time_limit {
            if started.elapsed() >= limit {
                stopped_early = true;
                break;
            }
        }
    }

    if let Some(best) = best_params {
        model.store.load_flat_values(&best)?;
    }
    Ok(TrainReport {
        metrics,
        best_val,
        best_epoch,
        admissibility_violations: violations,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{hill_average, PhasePair};
    use crate::mandel::{plane_strain_stiffness, IsotropicPhase};
    use crate::microgen::{field, range_normalize, threshold_hard, AmplitudeGrid, MicroSpec};
    use crate::surrogate::ModelConfig;
    use rand::Rng;

    fn phases() -> (IsotropicPhase, IsotropicPhase) {
        (IsotropicPhase::new(1e9, 0.3).unwrap(), IsotropicPhase::new(1e6, 0.49).unwrap())
    }

    fn synthetic_dataset(n: usize, resolution: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let grid = AmplitudeGrid::sample(&mut rng, 3, 3).unwrap();
                let tau = rng.gen_range(0.25..0.75);
                let spec = MicroSpec::new(&grid, tau, 1e-4).unwrap();
                let f = range_normalize(&field(&spec, resolution, resolution).unwrap());
                let img = threshold_hard(&f, tau).unwrap();
                let pair = PhasePair::new(
                    plane_strain_stiffness(&phases().0),
                    plane_strain_stiffness(&phases().1),
                    img.c0(),
                )
                .unwrap();
                TrainSample {
                    grid,
                    tau,
                    c0: img.c0(),
                    cbar: hill_average(&pair).unwrap(),
                    split: if i % 5 == 4 { Split::Val } else { Split::Train },
                }
            })
            .collect()
    }

    #[test]
    fn short_training_run_decreases_loss_and_is_deterministic() {
        let cfg = ModelConfig { resolution: 32, scale: 0.25, seed: 3, ..Default::default() };
        let data = synthetic_dataset(20, 32, 11);
        let tcfg = TrainConfig {
            batch_size: 8,
            epochs: 6,
            initial_lr: 0.02,
            weight_decay: 0.0,
            ..Default::default()
        };

        let mut m1 = Model::new(cfg.clone(), phases()).unwrap();
        let r1 = train(&mut m1, &data, &tcfg).unwrap();
        assert_eq!(r1.admissibility_violations, 0);
        let first = r1.metrics.first().unwrap().train_loss;
        let last = r1.metrics.last().unwrap().train_loss;
        assert!(last < first, "loss should decrease: {first} -> {last}");

        let mut m2 = Model::new(cfg, phases()).unwrap();
        let r2 = train(&mut m2, &data, &tcfg).unwrap();
        for (a, b) in r1.metrics.iter().zip(&r2.metrics) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits(), "training must be deterministic");
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
        assert_eq!(m1.store.flat_values(), m2.store.flat_values());
    }

    #[test]
    fn rejects_degenerate_batch_size() {
        let cfg = ModelConfig { resolution: 32, scale: 0.25, ..Default::default() };
        let mut m = Model::new(cfg, phases()).unwrap();
        let data = synthetic_dataset(8, 32, 1);
        let tcfg = TrainConfig { batch_size: 1, epochs: 1, ..Default::default() };
        assert!(train(&mut m, &data, &tcfg).is_err());
    }
}
