use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ModelInput;
use crate::error::{Error, Result};
use crate::model::graph::{mix_seed, ModelGraph};
use crate::nn::{softmax, softmax_cross_entropy, Mode, Rmsprop, RmspropConfig};
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmspropConfig,
    pub seed: u64,
    /// Stop after this many epochs without a lower validation loss. Off when `None`.
    pub early_stopping: Option<usize>,
    /// Stop once the (infer-mode) training loss is at or below this value.
    pub target_train_loss: Option<f64>,
    /// After each epoch, overwrite BN moving statistics with statistics
    /// pooled over the training set. Off: plain momentum averages.
    pub recalibrate_batchnorm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 600,
            batch_size: 8,
            optimizer: RmspropConfig::default(),
            seed: 0,
            early_stopping: None,
            target_train_loss: None,
            recalibrate_batchnorm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(o.lr > 0.0 && o.epsilon > 0.0 && (0.0..1.0).contains(&o.rho)) {
            return Err(Error::invalid("optimizer needs lr > 0, eps > 0 and rho in [0, 1)"));
        }
        if self.early_stopping == Some(0) {
            return Err(Error::invalid("early-stopping patience must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingHistory {
    pub batch_size: usize,
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn has_validation(&self) -> bool {
        self.records.first().is_some_and(|r| r.val_loss.is_some())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_loss,train_acc[,val_loss,val_acc],batch_size`; the
    /// validation columns are left out when there was no validation set.
    pub fn to_csv(&self) -> String {
        let val = self.has_validation();
        let mut out = String::from("epoch,train_loss,train_acc");
        if val {
            out.push_str(",val_loss,val_acc");
        }
        out.push_str(",batch_size\n");
        for r in &self.records {
            write!(out, "{},{},{}", r.epoch, r.train_loss, r.train_acc).unwrap();
            if let (true, Some(l), Some(a)) = (val, r.val_loss, r.val_acc) {
                write!(out, ",{l},{a}").unwrap();
            }
            writeln!(out, ",{}", self.batch_size).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(Error::at_path(path))
    }
}

/// Infer-mode pass over a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

fn batch_tensor(inputs: &[&ModelInput]) -> Result<Tensor<f32>> {
    let vols: Vec<&Tensor<f32>> = inputs.iter().map(|i| &i.volume).collect();
    Tensor::stack(&vols)
}

fn check_labels(inputs: &[ModelInput], classes: usize) -> Result<()> {
    match inputs.iter().find(|i| i.label >= classes) {
        Some(bad) => Err(Error::LabelOutOfRange {
            label: bad.label,
            classes,
        }),
        None => Ok(()),
    }
}

pub fn evaluate(model: &ModelGraph<f32>, inputs: &[ModelInput], batch_size: usize) -> Result<Evaluation> {
    if inputs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    check_labels(inputs, model.arch().num_classes)?;
    let mut loss_sum = 0.0;
    let mut eval = Evaluation {
        loss: 0.0,
        accuracy: 0.0,
        labels: Vec::with_capacity(inputs.len()),
        predictions: Vec::with_capacity(inputs.len()),
        probabilities: Vec::with_capacity(inputs.len()),
    };
    for chunk in inputs.chunks(batch_size.max(1)) {
        let refs: Vec<&ModelInput> = chunk.iter().collect();
        let labels: Vec<usize> = chunk.iter().map(|i| i.label).collect();
        let logits = model.forward(&batch_tensor(&refs)?, Mode::Infer, 0)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += f64::from(loss) * chunk.len() as f64;
        let probs = softmax(&logits)?;
        for (row, &label) in probs.data().chunks_exact(logits.dims()[1]).zip(&labels) {
            let p: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            eval.predictions.push(argmax(&p));
            eval.probabilities.push(p);
            eval.labels.push(label);
        }
    }
    let n = inputs.len() as f64;
    eval.loss = loss_sum / n;
    let correct = eval
        .labels
        .iter()
        .zip(&eval.predictions)
        .filter(|(a, b)| a == b)
        .count();
    eval.accuracy = correct as f64 / n;
    Ok(eval)
}

/// Class index (first maximum) and softmax probabilities per input.
pub fn predict(model: &ModelGraph<f32>, inputs: &[ModelInput], batch_size: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let refs: Vec<&ModelInput> = chunk.iter().collect();
        let logits = model.forward(&batch_tensor(&refs)?, Mode::Infer, 0)?;
        let probs = softmax(&logits)?;
        for row in probs.data().chunks_exact(logits.dims()[1]) {
            let p: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            out.push((argmax(&p), p));
        }
    }
    Ok(out)
}

fn order_batches(inputs: &[ModelInput], batch_size: usize) -> Result<Vec<Tensor<f32>>> {
    inputs
        .chunks(batch_size)
        .map(|c| batch_tensor(&c.iter().collect::<Vec<_>>()))
        .collect()
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Minibatch RMSprop. After each epoch both sets are re-scored in infer mode,
/// so a history row matches what [`evaluate`] reports for the same weights.
pub fn fit(
    model: &mut ModelGraph<f32>,
    train: &[ModelInput],
    val: &[ModelInput],
    config: &TrainConfig,
) -> Result<TrainingHistory> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    check_labels(train, model.arch().num_classes)?;
    check_labels(val, model.arch().num_classes)?;
    let mut optimizer = Rmsprop::new(config.optimizer);
    let mut history = TrainingHistory {
        batch_size: config.batch_size,
        records: Vec::with_capacity(config.epochs),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&ModelInput> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|i| i.label).collect();
            let x = batch_tensor(&refs)?;
            let (logits, tape) =
                model.forward_with_tape(&x, Mode::Train, mix_seed(config.seed ^ DROPOUT_STREAM, step))?;
            let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
            let (grads, _) = model.backward(&tape, &grad)?;
            model.update_batch_stats(&tape);
            optimizer.step(&mut model.params_mut(), &grads)?;
            step += 1;
        }
        if config.recalibrate_batchnorm {
            let batches = order_batches(train, config.batch_size)?;
            model.recalibrate_batchnorm(&batches)?;
        }
        let tr = evaluate(model, train, config.batch_size)?;
        let va = if val.is_empty() {
            None
        } else {
            Some(evaluate(model, val, config.batch_size)?)
        };
        info!(
            "epoch {epoch}/{}: train_loss={:.4} train_acc={:.3}{}",
            config.epochs,
            tr.loss,
            tr.accuracy,
            va.as_ref()
                .map(|v| format!(" val_loss={:.4} val_acc={:.3}", v.loss, v.accuracy))
                .unwrap_or_default()
        );
        let val_loss = va.as_ref().map(|v| v.loss);
        history.records.push(EpochRecord {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            val_loss,
            val_acc: va.as_ref().map(|v| v.accuracy),
        });
        if config.target_train_loss.is_some_and(|t| tr.loss <= t) {
            info!("training loss target reached after epoch {epoch}");
            break;
        }
        if let (Some(patience), Some(vl)) = (config.early_stopping, val_loss) {
            if vl < best_val {
                best_val = vl;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;

    fn inputs(n: usize, extent: usize, seed: u64) -> Vec<ModelInput> {
        (0..n)
            .map(|i| ModelInput {
                volume: Tensor::uniform(&[extent, extent, extent, 1], 0.0, 1.0, seed + i as u64).unwrap(),
                label: i % 6,
                sources: vec![format!("s{i}")],
            })
            .collect()
    }

    #[test]
    fn history_length_and_csv_columns() {
        let mut m = ModelGraph::<f32>::new(ArchConfig::tiny(1), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let h = fit(&mut m, &inputs(6, 16, 0), &[], &cfg).unwrap();
        assert_eq!(h.records.len(), 3);
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,train_loss,train_acc,batch_size\n"));
        assert_eq!(csv.lines().count(), 4);

        let h = fit(&mut m, &inputs(6, 16, 0), &inputs(2, 16, 50), &cfg).unwrap();
        assert!(h
            .to_csv()
            .starts_with("epoch,train_loss,train_acc,val_loss,val_acc,batch_size\n"));
    }

    #[test]
    fn last_row_matches_evaluate() {
        let mut m = ModelGraph::<f32>::new(ArchConfig::tiny(1), 1).unwrap();
        let data = inputs(6, 16, 0);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let h = fit(&mut m, &data, &[], &cfg).unwrap();
        let e = evaluate(&m, &data, 3).unwrap();
        assert_eq!(h.last().unwrap().train_acc, e.accuracy);
        assert!((h.last().unwrap().train_loss - e.loss).abs() < 1e-6);
    }

    #[test]
    fn predictions_are_distributions() {
        let m = ModelGraph::<f32>::new(ArchConfig::tiny(1), 1).unwrap();
        for (class, p) in predict(&m, &inputs(5, 16, 3), 2).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(class, argmax(&p));
        }
    }

    #[test]
    fn empty_inputs() {
        let mut m = ModelGraph::<f32>::new(ArchConfig::tiny(1), 1).unwrap();
        assert!(matches!(evaluate(&m, &[], 4), Err(Error::EmptyEvaluation)));
        assert!(fit(&mut m, &[], &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn bad_label_rejected_before_training() {
        let mut m = ModelGraph::<f32>::new(ArchConfig::tiny(1), 1).unwrap();
        let mut data = inputs(2, 16, 0);
        data[1].label = 6;
        let before = m.clone();
        assert!(matches!(
            fit(&mut m, &data, &[], &TrainConfig::default()),
            Err(Error::LabelOutOfRange { label: 6, .. })
        ));
        assert_eq!(m, before);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }
}
