//! ADAM optimization with mask-aware updates, early stopping, and
//! learning-rate decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, MaskedNetwork};
use crate::tensor::{Tape, Tensor};

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>], lr: f64) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_network(net: &MaskedNetwork, lr: f64) -> Self {
        let shapes: Vec<Vec<usize>> = net
            .parameters()
            .map(|p| p.values.shape().to_vec())
            .collect();
        AdamState::new(&shapes, lr)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected ADAM update over `(values, mask)` pairs.
    ///
    /// Updates at mask-zero positions are forced to exactly zero so pruned
    /// weights stay pruned.
    pub fn step(&mut self, params: &mut [(&mut Tensor, &Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam state tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (values, mask)) in params.iter_mut().enumerate() {
            if values.shape() != grads[i].shape() {
                return Err(Error::Contract(format!(
                    "parameter {} shape {:?} vs grad shape {:?}",
                    i,
                    values.shape(),
                    grads[i].shape()
                )));
            }
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            let gv = grads[i].data();
            let mk = mask.data();
            let pv = values.data_mut();
            for j in 0..pv.len() {
                let g = gv[j] * mk[j];
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * g;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * g * g;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pv[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                if mk[j] == 0.0 {
                    pv[j] = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Apply one step to every parameter of the network.
    pub fn step_network(&mut self, net: &mut MaskedNetwork, grads: &[Tensor]) -> Result<()> {
        let mut params: Vec<(&mut Tensor, &Tensor)> = Vec::new();
        for layer in net.layers.iter_mut() {
            params.push((&mut layer.weights.values, &layer.weights.mask));
            params.push((&mut layer.bias.values, &layer.bias.mask));
        }
        self.step(&mut params, grads)
    }
}

/// Training hyperparameters; defaults follow the experiment recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            max_epochs: 150,
            patience_epochs: 5,
            lr_decay_factor: 0.3,
            lr_patience: 12,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience_epochs < 1 {
            return Err(Error::Contract("patience must be >= 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Contract("lr_decay_factor must be in (0,1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Contract("batch_size and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStat>,
    /// epoch index (1-based) whose weights were restored
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr
            ));
        }
        s
    }
}

/// Mean cross-entropy loss and parameter gradients over one batch.
pub fn batch_gradient(
    net: &MaskedNetwork,
    images: &Tensor,
    labels: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone());
    let (logits, params) = net.forward(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.gradient(loss, &params)?;
    Ok((tape.value(loss).data()[0], grads))
}

/// Mean loss and accuracy over a dataset, computed in batches.
pub fn evaluate(net: &MaskedNetwork, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut i = 0;
    while i < ds.len() {
        let end = (i + batch_size).min(ds.len());
        let idx: Vec<usize> = (i..end).collect();
        let batch = ds.gather(&idx);
        let mut tape = Tape::new();
        let x = tape.leaf(batch.images.clone());
        let (logits, _) = net.forward(&mut tape, x)?;
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        loss_sum += tape.value(loss).data()[0] * (end - i) as f64;
        let preds = argmax_rows(tape.value(logits));
        correct += preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        i = end;
    }
    Ok((loss_sum / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Train until the validation loss stops improving, then restore the
/// best-validation-loss weights.
pub fn train_to_convergence(
    net: &mut MaskedNetwork,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("train and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::for_network(net, cfg.lr0);
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut best_weights = net.clone();
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut since_decay = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.gather(chunk);
            let (loss, grads) = batch_gradient(net, &batch.images, &batch.labels)?;
            adam.step_network(net, &grads)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;
        let (val_loss, val_acc) = evaluate(net, val, 256)?;
        history.epochs.push(EpochStat {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr: adam.lr,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_weights = net.clone();
            best_epoch = epoch;
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
        }
        if since_best >= cfg.patience_epochs {
            break;
        }
        if since_decay >= cfg.lr_patience {
            adam.lr *= cfg.lr_decay_factor;
            since_decay = 0;
        }
    }

    *net = best_weights;
    history.best_epoch = best_epoch;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_cnn5;

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut adam = AdamState::new(&[vec![1]], 0.001);
        let mut w = Tensor::scalar(1.0);
        let mask = Tensor::scalar(1.0);
        let g = Tensor::scalar(0.3);
        adam.step(&mut [(&mut w, &mask)], &[g]).unwrap();
        // bias corrections cancel on the first step: delta ~= lr * sign(g)
        assert!((w.data()[0] - (1.0 - 0.001)).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_no_motion() {
        let mut adam = AdamState::new(&[vec![3]], 0.01);
        let mut w = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let before = w.clone();
        let mask = Tensor::filled(&[3], 1.0);
        adam.step(&mut [(&mut w, &mask)], &[Tensor::zeros(&[3])])
            .unwrap();
        assert_eq!(w, before);
    }

    // independent scalar recursion oracle for f(w) = w^2
    #[test]
    fn adam_minimizes_quadratic() {
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut expect = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * expect;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            expect -= lr * mhat / (vhat.sqrt() + eps);
        }
        assert!(expect.abs() < 0.1, "oracle ended at {}", expect);

        let mut adam = AdamState::new(&[vec![1]], lr);
        let mut w = Tensor::scalar(1.0);
        let mask = Tensor::scalar(1.0);
        for _ in 0..50 {
            let g = Tensor::scalar(2.0 * w.data()[0]);
            adam.step(&mut [(&mut w, &mask)], &[g]).unwrap();
        }
        assert!((w.data()[0] - expect).abs() < 1e-12);
        assert!(w.data()[0].abs() < 0.1);
    }

    #[test]
    fn adam_shape_mismatch_errors() {
        let mut adam = AdamState::new(&[vec![2]], 0.01);
        let mut w = Tensor::from_vec(vec![1.0, 2.0]);
        let mask = Tensor::filled(&[2], 1.0);
        let bad = Tensor::zeros(&[3]);
        assert!(matches!(
            adam.step(&mut [(&mut w, &mask)], &[bad]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masked_positions_stay_exactly_zero() {
        let mut net = build_cnn5((28, 28, 1), 10, 0).unwrap();
        // prune half of the second conv kernel
        let n = net.layers[1].weights.values.len();
        for i in 0..n / 2 {
            net.layers[1].weights.mask.data_mut()[i] = 0.0;
            net.layers[1].weights.values.data_mut()[i] = 0.0;
        }
        let ds = crate::data::synthetic_glyphs(32, 0);
        let mut adam = AdamState::for_network(&net, 0.01);
        for _ in 0..3 {
            let (_, grads) = batch_gradient(&net, &ds.images, &ds.labels).unwrap();
            adam.step_network(&mut net, &grads).unwrap();
        }
        for i in 0..n / 2 {
            assert_eq!(net.layers[1].weights.values.data()[i], 0.0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = build_cnn5((28, 28, 1), 10, 7).unwrap();
            let g = crate::data::synthetic_glyphs(64, 3);
            let (gt, gv) = crate::data::split(&g, 0.25, 0).unwrap();
            train_to_convergence(&mut net, &gt, &gv, &cfg, 11).unwrap();
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_data_errors() {
        let ds = crate::data::synthetic_glyphs(10, 0);
        let empty = ds.gather(&[]);
        let mut net = build_cnn5((28, 28, 1), 10, 0).unwrap();
        assert!(matches!(
            train_to_convergence(&mut net, &empty, &ds, &TrainConfig::default(), 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn patience_semantics_restore_best() {
        // drive the loop with a crafted validation set is impractical; instead
        // check the bookkeeping on a short glyph run: the restored weights
        // must achieve the minimum recorded validation loss.
        let g = crate::data::synthetic_glyphs(80, 5);
        let (gt, gv) = crate::data::split(&g, 0.25, 0).unwrap();
        let cfg = TrainConfig {
            max_epochs: 4,
            patience_epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut net = build_cnn5((28, 28, 1), 10, 2).unwrap();
        let hist = train_to_convergence(&mut net, &gt, &gv, &cfg, 3).unwrap();
        let best = hist
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        let (val_loss, _) = evaluate(&net, &gv, 64).unwrap();
        assert!((val_loss - best).abs() < 1e-9);
        assert_eq!(
            hist.best_epoch,
            hist.epochs
                .iter()
                .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
                .unwrap()
                .epoch
        );
    }

    #[test]
    fn history_csv_header() {
        let hist = TrainHistory {
            epochs: vec![EpochStat {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.4,
                val_acc: 0.9,
                lr: 0.001,
            }],
            best_epoch: 1,
        };
        let csv = hist.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,val_acc,lr\n"));
        assert!(csv.contains("1,0.500000,0.400000,0.900000,0.001000"));
    }
}
