//! AdamW training with early stopping, evaluation and the four-variant
//! ablation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GestureModel, ModelConfig, Weights};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::tensor::ops::cross_entropy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 60,
            patience: 10,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(Error::config("learning rate, weight decay and eps must be non-negative"));
        }
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs, patience and batch size must be positive"));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam moments with decoupled weight decay. Decay applies to tensors of
/// rank 2 and above; biases, gains and other vectors are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Weights,
    v: Weights,
}

impl AdamW {
    pub fn new(weights: &Weights, tc: &TrainConfig) -> Self {
        AdamW {
            lr: tc.lr,
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.eps,
            weight_decay: tc.weight_decay,
            step: 0,
            m: weights.zeros_like(),
            v: weights.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, weights: &mut Weights, grads: &Weights) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let grads: Vec<&[f64]> = grads.named().into_iter().map(|(_, t)| t.data()).collect();
        let params = weights.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    /// Mean gradient over the batch.
    pub grads: Weights,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and gradient over `batch`. Per-sample work may run in
/// parallel; the reduction runs in batch order so results do not depend on
/// the thread count.
pub fn batch_grad(model: &GestureModel, batch: &[&Sample]) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let results = batch
        .par_iter()
        .map(|s| model.sample_grad(s))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = model.weights.zeros_like();
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, s) in results.iter().zip(batch) {
        loss += r.loss;
        correct += usize::from(argmax(&r.probs) == s.label);
        grads.add_assign(&r.grads);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok(BatchStats {
        loss: loss / n,
        correct,
        count: batch.len(),
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains in place. Early stopping watches validation loss (training loss
/// when `val` is empty); the best weights are restored at the end.
pub fn train(model: &mut GestureModel, train_set: &[Sample], val: &[Sample], tc: &TrainConfig) -> Result<TrainLog> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(&model.weights, tc);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best = (f64::INFINITY, model.weights.clone());
    let mut wait = 0;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (step, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let stats = batch_grad(model, &batch)?;
            if !stats.loss.is_finite() || !stats.grads.all_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch} step {step}: loss {}", stats.loss)));
            }
            loss_sum += stats.loss * stats.count as f64;
            correct += stats.correct;
            opt.step(&mut model.weights, &stats.grads);
        }
        let n = train_set.len() as f64;
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(model, val)?;
            (Some(r.loss), Some(r.accuracy))
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        let monitored = val_loss.unwrap_or(entry.train_loss);
        log.epochs.push(entry);
        if monitored < best.0 {
            best = (monitored, model.weights.clone());
            log.best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= tc.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    model.weights = best.1;
    Ok(log)
}

/// Counts with rows indexed by true class and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut m = Self::new(classes);
        for &(t, p) in pairs {
            if t >= classes || p >= classes {
                return Err(Error::shape(format!("class pair ({t}, {p}) outside {classes} classes")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        trace as f64 / self.total().max(1) as f64
    }

    /// Each row divided by its sum; rows without samples stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
    pub confusion: ConfusionMatrix,
    pub confusion_normalized: Vec<Vec<f64>>,
}

pub fn evaluate(model: &GestureModel, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probs = samples
        .par_iter()
        .map(|s| model.predict(&s.volume))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut pairs = Vec::with_capacity(samples.len());
    for (p, s) in probs.iter().zip(samples) {
        loss += cross_entropy(p, s.label)?.loss;
        pairs.push((s.label, argmax(p)));
    }
    let confusion = ConfusionMatrix::from_pairs(model.config().num_classes, &pairs)?;
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        loss: loss / samples.len() as f64,
        samples: samples.len(),
        confusion_normalized: confusion.row_normalized(),
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub use_btsm: bool,
    pub use_ssm: bool,
    pub params: usize,
    /// Test accuracy per seed.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("+btsm", true, false),
    ("+ssm", false, true),
    ("full", true, true),
];

/// Trains the four variants once per seed on identical data. Only the two
/// module flags differ between variants; each seed sets both the model
/// and the training seed.
pub fn ablate(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    seeds: &[u64],
    train_set: &[Sample],
    val: &[Sample],
    test: &[Sample],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (name, use_btsm, use_ssm) in VARIANTS {
        let mut accuracies = Vec::with_capacity(seeds.len());
        let mut params = 0;
        for &seed in seeds {
            let mc = ModelConfig {
                use_btsm,
                use_ssm,
                seed,
                ..cfg.clone()
            };
            let mut model = GestureModel::new(mc)?;
            params = model.param_count();
            train(&mut model, train_set, val, &TrainConfig { seed, ..tc.clone() })?;
            accuracies.push(evaluate(&model, test)?.accuracy);
        }
        rows.push(AblationRow {
            variant: name.into(),
            use_btsm,
            use_ssm,
            params,
            mean_accuracy: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
            accuracies,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Geometry;
    use crate::lnes::LnesVolume;
    use rand::Rng;

    fn tiny_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            num_classes: 3,
            widths: vec![4, 8],
            kernel: 3,
            state: 2,
            bins: 2,
            frames_per_bin: 2,
            bin_len_us: 200_000,
            use_ssm: true,
            use_btsm: true,
            seed,
        }
    }

    fn random_samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let data = (0..4 * 128).map(|_| if rng.gen::<f32>() < 0.3 { rng.gen() } else { 0.0 }).collect();
                Sample {
                    volume: LnesVolume::new(2, 2, Geometry::new(8, 8), data).unwrap(),
                    label: i % 3,
                }
            })
            .collect()
    }

    #[test]
    fn overfits_one_sample() {
        let mut m = GestureModel::new(tiny_cfg(1)).unwrap();
        let s = random_samples(1, 2);
        let tc = TrainConfig { lr: 1e-2, ..TrainConfig::default() };
        let mut opt = AdamW::new(&m.weights, &tc);
        let mut losses = Vec::new();
        for _ in 0..4 {
            let st = batch_grad(&m, &[&s[0]]).unwrap();
            losses.push(st.loss);
            opt.step(&mut m.weights, &st.grads);
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut m = GestureModel::new(tiny_cfg(2)).unwrap();
        let before = m.weights.clone();
        let data = random_samples(6, 3);
        let tc = TrainConfig { lr: 0.0, epochs: 3, batch_size: 2, ..TrainConfig::default() };
        train(&mut m, &data, &[], &tc).unwrap();
        assert_eq!(m.weights, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = random_samples(6, 4);
        let tc = TrainConfig { lr: 1e-3, epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let run = || {
            let mut m = GestureModel::new(tiny_cfg(5)).unwrap();
            let log = train(&mut m, &data[..4], &data[4..], &tc).unwrap();
            (log, m.weights)
        };
        let (a, wa) = run();
        let (b, wb) = run();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), a.epochs.len());
    }

    #[test]
    fn early_stopping_restores_best() {
        // Four training samples overfit quickly, so validation loss turns.
        let data = random_samples(8, 6);
        let tc = TrainConfig { lr: 3e-2, epochs: 40, patience: 3, batch_size: 4, ..TrainConfig::default() };
        let mut m = GestureModel::new(tiny_cfg(6)).unwrap();
        let log = train(&mut m, &data[..4], &data[4..], &tc).unwrap();
        assert!(log.stopped_early, "{log:?}");
        assert_eq!(log.epochs.len(), log.best_epoch + tc.patience);
        let losses: Vec<f64> = log.epochs.iter().map(|e| e.val_loss.unwrap()).collect();
        let best = losses[log.best_epoch - 1];
        assert!(losses.iter().all(|&l| l >= best));
        let r = evaluate(&m, &data[4..]).unwrap();
        assert!((r.loss - best).abs() < 1e-12);
    }

    #[test]
    fn confusion_examples() {
        let perfect: Vec<(usize, usize)> = (0..9).map(|i| (i % 3, i % 3)).collect();
        let m = ConfusionMatrix::from_pairs(3, &perfect).unwrap();
        assert_eq!(m.accuracy(), 1.0);
        for (i, row) in m.row_normalized().iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
        let constant: Vec<(usize, usize)> = (0..8).map(|i| (i % 4, 0)).collect();
        let m = ConfusionMatrix::from_pairs(4, &constant).unwrap();
        assert_eq!(m.accuracy(), 0.25);
        let m = ConfusionMatrix::from_pairs(3, &[(0, 1), (0, 0), (1, 1)]).unwrap();
        let rows = m.row_normalized();
        assert_eq!(rows[0], vec![0.5, 0.5, 0.0]);
        assert_eq!(rows[2], vec![0.0; 3]);
        assert!(ConfusionMatrix::from_pairs(2, &[(2, 0)]).is_err());
    }

    #[test]
    fn empty_inputs_are_errors() {
        let m = GestureModel::new(tiny_cfg(0)).unwrap();
        assert!(matches!(evaluate(&m, &[]), Err(Error::EmptyDataset)));
        let mut m2 = m.clone();
        assert!(train(&mut m2, &[], &[], &TrainConfig::default()).is_err());
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(train(&mut m2, &random_samples(2, 0), &[], &bad).is_err());
    }

    #[test]
    fn ablation_table_shape() {
        let data = random_samples(6, 8);
        let tc = TrainConfig { lr: 1e-3, epochs: 1, batch_size: 3, ..TrainConfig::default() };
        let rows = ablate(&tiny_cfg(0), &tc, &[1], &data[..3], &[], &data[3..]).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["baseline", "+btsm", "+ssm", "full"]);
        assert_eq!(rows[0].params, rows[1].params);
        assert_eq!(rows[2].params, rows[3].params);
        assert!(rows[3].params > rows[0].params);
    }
}
