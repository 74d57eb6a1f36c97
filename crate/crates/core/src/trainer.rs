//! Mini-batch cross-entropy training with Adam, plus evaluation into the
//! per-domain metrics report.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tape, Var};
use crate::embedding::EmbeddedClaim;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{EccwModel, ModelConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Clamped to the dataset size, so the large default works on toy sets.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many epochs without train-loss improvement.
    /// `None` disables early stopping.
    #[serde(default = "default_patience")]
    pub early_stop_patience: Option<usize>,
    #[serde(flatten)]
    pub model: ModelConfig,
}

fn default_learning_rate() -> f64 {
    1e-4
}

fn default_batch_size() -> usize {
    1024
}

fn default_epochs() -> usize {
    50
}

fn default_patience() -> Option<usize> {
    Some(10)
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            early_stop_patience: default_patience(),
            model: ModelConfig::default(),
        }
    }
}

/// A trained model plus its per-epoch mean train loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EccwModel,
    pub epoch_losses: Vec<f64>,
}

/// Train on embedded claims. Initialization, shuffling and updates are all
/// pinned by `cfg.seed`; identical seed, data and config give bit-identical
/// parameters.
pub fn train(train_set: &[EmbeddedClaim], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Train("training set is empty".into()));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be positive".into()));
    }
    let d = cfg.model.d;
    for claim in train_set {
        if claim.vector.len() != d {
            return Err(Error::data(format!(
                "claim \"{}\" has vector length {}, expected {}",
                claim.record.id,
                claim.vector.len(),
                d
            )));
        }
        if claim.record.label >= cfg.model.classes {
            return Err(Error::data(format!(
                "claim \"{}\" has label {} outside {} classes",
                claim.record.id, claim.record.label, cfg.model.classes
            )));
        }
    }

    let mut model = EccwModel::new(cfg.model.clone(), cfg.seed)?;
    let batch_size = cfg.batch_size.min(train_set.len());

    // One Adam state per trainable parameter, aligned by params() index.
    let mut adam: Vec<Option<AdamState>> = model
        .params()
        .iter()
        .map(|p| {
            p.trainable
                .then(|| AdamState::new(p.numel(), cfg.learning_rate))
        })
        .collect();

    // The shuffle stream is separate from the init stream so that adding
    // parameters never perturbs batch order.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5155_4646_4c45_u64);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best_loss = f64::INFINITY;
    let mut stale_epochs = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            let j = (shuffle_rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }

        let mut epoch_loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(batch_size).enumerate() {
            let loss = train_batch(&mut model, &mut adam, train_set, batch)?;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "NaN loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_loss_sum += loss * batch.len() as f64;
        }
        let epoch_loss = epoch_loss_sum / train_set.len() as f64;
        epoch_losses.push(epoch_loss);

        if let Some(patience) = cfg.early_stop_patience {
            if epoch_loss + 1e-12 < best_loss {
                best_loss = epoch_loss;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= patience {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

fn train_batch(
    model: &mut EccwModel,
    adam: &mut [Option<AdamState>],
    train_set: &[EmbeddedClaim],
    batch: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let mut sample_losses = Vec::with_capacity(batch.len());
    for &idx in batch {
        let claim = &train_set[idx];
        let s = tape.constant_vector(&claim.vector);
        let probs = model.forward_on(&mut tape, &vars, s)?;
        sample_losses.push(tape.nll_loss(probs, claim.record.label)?);
    }
    let loss = tape.mean_stack(&sample_losses)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss)[0];

    let param_vars: Vec<Var> = model.param_vars(&vars);
    for ((param, var), state) in model
        .params_mut()
        .into_iter()
        .zip(param_vars)
        .zip(adam.iter_mut())
    {
        if let Some(state) = state {
            let grad = tape
                .grad(var)
                .ok_or_else(|| Error::Train(format!("no gradient for {}", param.name)))?;
            adam_step(&mut param.data, grad, state)?;
        }
    }
    Ok(loss_value)
}

/// Predict every claim and aggregate per-domain metrics. Domains unseen
/// during training simply form their own rows.
pub fn evaluate(model: &EccwModel, test_set: &[EmbeddedClaim]) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(Error::data("cannot evaluate an empty set"));
    }
    let mut outcomes = Vec::with_capacity(test_set.len());
    for claim in test_set {
        let verdict = model.forward_full(&claim.vector)?;
        outcomes.push((claim.record.domain.clone(), claim.record.label, verdict.label));
    }
    MetricsReport::from_outcomes(model.config.classes, &outcomes)
}

/// Fraction of claims whose argmax prediction matches the gold label.
pub fn accuracy(model: &EccwModel, set: &[EmbeddedClaim]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::data("cannot score an empty set"));
    }
    let mut correct = 0usize;
    for claim in set {
        if model.forward_full(&claim.vector)?.label == claim.record.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ClaimRecord;
    use crate::model::AblationVariant;
    use crate::synthetic;

    fn toy_train_config(d: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.02,
            batch_size: 16,
            epochs: 150,
            seed,
            early_stop_patience: None,
            model: ModelConfig {
                d,
                experts: 3,
                top_k: 2,
                citizens: 2,
                classes: 2,
                lstm_hidden: Some(d / 2),
                ..ModelConfig::default()
            },
        }
    }

    #[test]
    fn memorizes_a_tiny_dataset() {
        let claims = synthetic::two_gaussian_claims(10, 8, 1.6, 0.4, 99);
        let cfg = toy_train_config(8, 5);
        let outcome = train(&claims, &cfg).unwrap();
        let acc = accuracy(&outcome.model, &claims).unwrap();
        assert_eq!(acc, 1.0, "train accuracy {acc}");
    }

    #[test]
    fn loss_is_non_increasing_after_epoch_three_on_separable_data() {
        let claims = synthetic::two_gaussian_claims(60, 8, 2.0, 0.3, 41);
        let mut cfg = toy_train_config(8, 3);
        cfg.epochs = 25;
        cfg.batch_size = 60; // full batch keeps the loss curve smooth
        let outcome = train(&claims, &cfg).unwrap();
        let losses = &outcome.epoch_losses;
        for e in 3..losses.len() - 1 {
            assert!(
                losses[e + 1] <= losses[e] + 1e-9,
                "loss rose at epoch {}: {} -> {}",
                e,
                losses[e],
                losses[e + 1]
            );
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let claims = synthetic::two_gaussian_claims(24, 8, 1.5, 0.5, 7);
        let mut cfg = toy_train_config(8, 11);
        cfg.epochs = 5;
        let a = train(&claims, &cfg).unwrap();
        let b = train(&claims, &cfg).unwrap();
        for (pa, pb) in a.model.params().iter().zip(b.model.params().iter()) {
            assert_eq!(pa.data, pb.data, "parameter {} diverged", pa.name);
        }
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn rejects_wrong_vector_length() {
        let claims = vec![EmbeddedClaim {
            record: ClaimRecord {
                id: "c".into(),
                text: "t".into(),
                label: 0,
                domain: "D".into(),
                evidence: None,
            },
            vector: vec![0.0; 4],
        }];
        let cfg = toy_train_config(8, 0);
        let err = train(&claims, &cfg).unwrap_err();
        assert!(err.to_string().contains("vector length"));
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let mut claims = synthetic::two_gaussian_claims(4, 8, 1.0, 0.4, 1);
        claims[0].record.label = 7;
        let cfg = toy_train_config(8, 0);
        assert!(train(&claims, &cfg).is_err());
    }

    #[test]
    fn evaluate_reports_per_domain_rows() {
        let claims = synthetic::two_gaussian_claims(30, 8, 2.0, 0.3, 13);
        let mut cfg = toy_train_config(8, 2);
        cfg.epochs = 40;
        let outcome = train(&claims, &cfg).unwrap();
        let report = evaluate(&outcome.model, &claims).unwrap();
        assert!(!report.domains.is_empty());
        assert_eq!(report.total.confusion.total(), 30);
    }

    #[test]
    fn ablated_variants_train_too() {
        let claims = synthetic::two_gaussian_claims(20, 8, 2.0, 0.3, 17);
        for variant in [AblationVariant::NoCitizen, AblationVariant::NoExpert] {
            let mut cfg = toy_train_config(8, 4);
            cfg.epochs = 10;
            cfg.model.variant = variant;
            let outcome = train(&claims, &cfg).unwrap();
            assert_eq!(outcome.epoch_losses.len(), 10);
        }
    }

    #[test]
    fn early_stopping_truncates_the_loss_history() {
        let claims = synthetic::two_gaussian_claims(12, 8, 0.1, 1.0, 23);
        let mut cfg = toy_train_config(8, 6);
        cfg.learning_rate = 1e-300; // updates vanish in rounding, loss is flat
        cfg.epochs = 100;
        cfg.early_stop_patience = Some(5);
        let outcome = train(&claims, &cfg).unwrap();
        assert_eq!(outcome.epoch_losses.len(), 6);
    }
}
