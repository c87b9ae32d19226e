//! Adam optimizer and the seeded mini-batch trainer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::TverskyParams;
use super::net::{UNet, UNetParams};
use crate::error::{Error, Result};
use crate::features::PolarImage;
use crate::labeling::BinaryMask;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tversky: TverskyParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, tversky: TverskyParams::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

pub const LOSS_CSV_HEADER: &str = "epoch,train_loss,val_loss";

pub fn loss_history_csv(h: &[EpochLoss]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for e in h {
        let v = e.validation.map_or(String::new(), |v| format!("{v}"));
        s.push_str(&format!("{},{},{}\n", e.epoch, e.train, v));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters at the epoch with the lowest validation loss (training
    /// loss when no validation set is given).
    pub best: UNetParams<T>,
    pub best_epoch: usize,
    pub last: UNetParams<T>,
    pub history: Vec<EpochLoss>,
}

pub type Sample<T> = (PolarImage<T>, BinaryMask);

/// Seeded training: the shuffling stream depends only on the config seed,
/// and a non-finite loss aborts with [`Error::Divergence`].
pub fn train<T: Scalar>(
    net: &UNet,
    init: UNetParams<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    let mut params = init;
    let mut opt = Adam::new(params.data.len(), net.config().learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(net.config().seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let val: Vec<(&PolarImage<T>, &BinaryMask)> = val_set.iter().map(|(x, y)| (x, y)).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, UNetParams<T>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&train_set[i].0, &train_set[i].1)).collect();
            let (loss, grad) = net.loss_and_grad(&params, &batch, &cfg.tversky)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, detail: format!("non-finite loss or gradient (loss {loss})") });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut params.data, &grad);
        }
        let train_loss = total / train_set.len() as f64;
        let validation = if val.is_empty() { None } else { Some(net.mean_loss(&params, &val, &cfg.tversky)?.to_f64_lossy()) };
        if let Some(v) = validation {
            if !v.is_finite() {
                return Err(Error::Divergence { epoch, detail: format!("non-finite validation loss {v}") });
            }
        }
        let score = validation.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, params.clone()));
        }
        let e = EpochLoss { epoch, train: train_loss, validation };
        on_epoch(&e);
        history.push(e);
    }
    let (best_epoch, best) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params.clone()),
    };
    Ok(TrainOutcome { best, best_epoch, last: params, history })
}
