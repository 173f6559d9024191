use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{VideoClassifier, VideoClip};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::{OptimizerState, SgdConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub oversample: bool,
    /// Weight moved from the true label to a uniform target.
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 150,
            batch_size: 4,
            patience: 15,
            oversample: true,
            label_smoothing: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Weights from the best validation epoch.
    pub model: VideoClassifier,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Sample order for one epoch over items with the given `labels`.
///
/// With `oversample`, every class is topped up by sampling its own members
/// with replacement until it matches the largest class; the result is then
/// shuffled. Without it the items are just shuffled.
pub fn make_epoch_schedule(
    labels: &[usize],
    num_classes: usize,
    oversample: bool,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut members = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or_else(|| {
                Error::Contract(format!("label {l} out of range for {num_classes} classes"))
            })?
            .push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("class {empty} has no samples")));
    }
    let mut order: Vec<usize> = Vec::new();
    if oversample {
        let target = members.iter().map(Vec::len).max().unwrap_or(0);
        for class in &members {
            order.extend_from_slice(class);
            for _ in class.len()..target {
                order.push(class[rng.gen_range(0..class.len())]);
            }
        }
    } else {
        order.extend(0..labels.len());
    }
    order.shuffle(rng);
    Ok(order)
}

fn clip_gradients(
    model: &VideoClassifier,
    clip: &VideoClip,
    smoothing: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let x = tape.constant(clip.frames.clone());
    let logits = model.forward(&mut tape, x, &params)?;
    let mut loss = tape.cross_entropy(logits, clip.label)?;
    if smoothing > 0.0 {
        let k = model.config.num_classes;
        loss = tape.scale(loss, 1.0 - smoothing);
        for c in 0..k {
            let term = tape.cross_entropy(logits, c)?;
            let term = tape.scale(term, smoothing / k as f64);
            loss = tape.add(loss, term)?;
        }
    }
    tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|&p| {
            tape.grad(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(p)))
        })
        .collect();
    Ok((tape.value(loss).item(), grads))
}

/// SGD training with oversampling and early stopping on validation accuracy.
///
/// Returns the weights of the best validation epoch (earliest on ties).
pub fn fit(
    train: &[VideoClip],
    val: &[VideoClip],
    model: VideoClassifier,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(
            "training and validation splits must be non-empty".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(Error::Parameter(format!(
            "label smoothing must lie in [0, 1), got {}",
            cfg.label_smoothing
        )));
    }
    let k = model.config.num_classes;
    let labels: Vec<usize> = train.iter().map(|c| c.label).collect();
    let mut model = model;
    let mut opt = OptimizerState::sgd(SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    });
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, VideoClassifier)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let order = make_epoch_schedule(&labels, k, cfg.oversample, &mut rng)?;
        let mut loss_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (loss, grads) = clip_gradients(&model, &train[i], cfg.label_smoothing)?;
                if !loss.is_finite() {
                    return Err(Error::Training { epoch });
                }
                loss_total += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = sum
                .expect("non-empty batch")
                .into_iter()
                .map(|g| g.map(|v| v * scale))
                .collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut model.params_mut(), &grad_refs)?;
        }
        let train_loss = loss_total / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Training { epoch });
        }
        let val_accuracy = evaluate(val, &model)?.accuracy;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
        let improved = best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc);
        if improved {
            best = Some((epoch, val_accuracy, model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience {
            break;
        }
    }
    match best {
        Some((best_epoch, _, model)) => Ok(FitResult {
            model,
            best_epoch,
            history,
        }),
        // zero epochs requested
        None => Ok(FitResult {
            model,
            best_epoch: 0,
            history,
        }),
    }
}

/// Anything that maps a clip volume to a class index.
pub trait Predictor {
    fn predict(&self, frames: &Tensor) -> Result<usize>;
    fn num_classes(&self) -> usize;
}

impl Predictor for VideoClassifier {
    fn predict(&self, frames: &Tensor) -> Result<usize> {
        self.predict_clip(frames)
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Clip-level accuracy and confusion counts from paired predictions.
pub fn accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::Contract(format!(
                "class index out of range ({l} → {p})"
            )));
        }
        confusion[l][p] += 1;
    }
    let correct = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        confusion,
    })
}

pub fn evaluate<P: Predictor + ?Sized>(test: &[VideoClip], model: &P) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Contract("test split is empty".into()));
    }
    let predictions = test
        .iter()
        .map(|c| model.predict(&c.frames))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.iter().map(|c| c.label).collect();
    accuracy(&predictions, &labels, model.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_from_counts(counts: &[usize]) -> Vec<usize> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect()
    }

    fn per_class(order: &[usize], labels: &[usize], k: usize) -> Vec<usize> {
        let mut n = vec![0; k];
        for &i in order {
            n[labels[i]] += 1;
        }
        n
    }

    #[test]
    fn balanced_counts_stay_balanced() {
        let labels = labels_from_counts(&[2, 2]);
        let order =
            make_epoch_schedule(&labels, 2, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(order.len(), 4);
        assert_eq!(per_class(&order, &labels, 2), vec![2, 2]);
    }

    #[test]
    fn minority_class_is_topped_up() {
        let labels = labels_from_counts(&[1, 3]);
        let order =
            make_epoch_schedule(&labels, 2, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(order.len(), 6);
        assert_eq!(per_class(&order, &labels, 2), vec![3, 3]);
    }

    #[test]
    fn plain_shuffle_is_a_permutation() {
        let labels = labels_from_counts(&[1, 3, 2]);
        let mut order =
            make_epoch_schedule(&labels, 3, false, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        order.sort_unstable();
        assert_eq!(order, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn empty_class_is_a_contract_error() {
        let labels = labels_from_counts(&[2, 0, 1]);
        assert!(matches!(
            make_epoch_schedule(&labels, 3, true, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn always_first_class_on_imbalanced_test_counts() {
        let labels = labels_from_counts(&[13, 10, 30, 30]);
        let preds = vec![0; labels.len()];
        let r = accuracy(&preds, &labels, 4).unwrap();
        assert!((r.accuracy - 13.0 / 83.0).abs() < 1e-15);
        assert!((r.accuracy - 0.1566).abs() < 1e-4);
        let row_sums: Vec<usize> = r.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, vec![13, 10, 30, 30]);
    }

    #[test]
    fn perfect_and_disjoint_predictions() {
        let labels = labels_from_counts(&[2, 3, 1]);
        assert_eq!(accuracy(&labels, &labels, 3).unwrap().accuracy, 1.0);
        let wrong: Vec<usize> = labels.iter().map(|l| (l + 1) % 3).collect();
        assert_eq!(accuracy(&wrong, &labels, 3).unwrap().accuracy, 0.0);
    }
}
