//! Mini-batch training with Adam, best-validation selection and metrics.

use rand::seq::SliceRandom;

use super::layers::Param;
use super::{
    loss_bce, loss_ce, loss_mse, top_k_hit, Adam, GainBounds, GainScale, Model, NnError, Outputs,
};
use crate::config::BeamLoss;
use crate::rng::{stream, TAG_SHUFFLE};

/// One training record: bit-packed BEM sequence plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub bits: Vec<u8>,
    /// Optimal beamforming gain (watts).
    pub gain: f64,
    pub beam: usize,
}

/// Unpacks LSB-first bits into `len` floats.
pub fn unpack_bits(bits: &[u8], len: usize, out: &mut Vec<f64>) {
    out.extend((0..len).map(|k| ((bits[k / 8] >> (k % 8)) & 1) as f64));
}

/// Anything trainable by [`train`].
pub trait Network: Clone {
    fn input_len(&self) -> usize;
    fn n_beams(&self) -> usize;
    fn bounds(&self) -> GainBounds;
    fn set_bounds(&mut self, b: GainBounds);
    fn forward_train(&mut self, x: &[f64], batch: usize) -> Result<Outputs, NnError>;
    fn forward_eval(&self, x: &[f64], batch: usize) -> Result<Outputs, NnError>;
    fn backward(&mut self, dz_gain: &[f64], dz_beam: &[f64]) -> Result<(), NnError>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    /// Copy without any recorded graph.
    fn snapshot(&self) -> Self;
}

impl Network for Model {
    fn input_len(&self) -> usize {
        self.config.input_len()
    }
    fn n_beams(&self) -> usize {
        self.config.n_beams
    }
    fn bounds(&self) -> GainBounds {
        self.bounds
    }
    fn set_bounds(&mut self, b: GainBounds) {
        self.bounds = b;
    }
    fn forward_train(&mut self, x: &[f64], batch: usize) -> Result<Outputs, NnError> {
        Model::forward_train(self, x, batch)
    }
    fn forward_eval(&self, x: &[f64], batch: usize) -> Result<Outputs, NnError> {
        Model::forward_eval(self, x, batch)
    }
    fn backward(&mut self, dz_gain: &[f64], dz_beam: &[f64]) -> Result<(), NnError> {
        Model::backward(self, dz_gain, dz_beam)
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Model::params_mut(self)
    }
    fn snapshot(&self) -> Self {
        Model::snapshot(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beam_loss: BeamLoss,
    pub gain_scale: GainScale,
    /// Stop once training Top-1 (confirmed in eval mode) reaches this; 1.0 or more never stops.
    pub stop_train_top1: f64,
}

impl TrainOptions {
    pub fn from_config(t: &crate::config::TrainingConfig, seed: u64) -> Self {
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed,
            beam_loss: t.beam_loss,
            gain_scale: t.gain_scale,
            stop_train_top1: t.stop_train_top1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    /// NaN when there is no validation split.
    pub valid_loss: f64,
    pub valid_top1: f64,
    pub valid_top3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were retained.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Training labels clamped by the gain bounds (always 0 when the bounds come from the same split).
    pub clamps: usize,
}

/// Aggregate metrics of a network over a labeled set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub gain_mse: f64,
    /// Top-k accuracy for each requested k.
    pub top_k: Vec<f64>,
    pub count: usize,
}

fn beam_loss(kind: BeamLoss, probs: &[f64], label: usize) -> f64 {
    match kind {
        BeamLoss::Bce => loss_bce(probs, label),
        BeamLoss::Ce => loss_ce(probs, label),
    }
}

fn batch_input<N: Network>(net: &N, batch: &[&Example]) -> Vec<f64> {
    let len = net.input_len();
    let mut x = Vec::with_capacity(batch.len() * len);
    for e in batch {
        unpack_bits(&e.bits, len, &mut x);
    }
    x
}

/// Eval-mode metrics; `ks` selects the Top-k accuracies to report.
pub fn evaluate<N: Network>(
    net: &N,
    data: &[Example],
    batch_size: usize,
    beam: BeamLoss,
    ks: &[usize],
) -> Result<EvalStats, NnError> {
    let bounds = net.bounds();
    let mut clamps = 0;
    let (mut loss, mut mse) = (0.0, 0.0);
    let mut hits = vec![0usize; ks.len()];
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let out = net.forward_eval(&batch_input(net, &refs), refs.len())?;
        for (i, e) in chunk.iter().enumerate() {
            let target = bounds.normalize(e.gain, &mut clamps);
            let m = loss_mse(out.gain[i], target);
            mse += m;
            loss += m + beam_loss(beam, out.beam_row(i), e.beam);
            for (h, &k) in hits.iter_mut().zip(ks) {
                *h += top_k_hit(out.beam_row(i), e.beam, k) as usize;
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalStats {
        loss: loss / n,
        gain_mse: mse / n,
        top_k: hits.iter().map(|&h| h as f64 / n).collect(),
        count: data.len(),
    })
}

/// Gradients of the mean joint loss with respect to the head logits.
pub fn loss_gradients(
    out: &Outputs,
    targets: &[f64],
    labels: &[usize],
    kind: BeamLoss,
) -> (Vec<f64>, Vec<f64>) {
    let b = targets.len() as f64;
    let dz_gain = out
        .gain
        .iter()
        .zip(targets)
        .map(|(&g, &t)| 2.0 * (g - t) * g * (1.0 - g) / b)
        .collect();
    let nb = out.n_beams;
    let mut dz_beam = vec![0.0; out.beam.len()];
    for (i, &label) in labels.iter().enumerate() {
        let p = out.beam_row(i);
        let d = &mut dz_beam[i * nb..(i + 1) * nb];
        match kind {
            BeamLoss::Bce => {
                for (n, (dn, &pn)) in d.iter_mut().zip(p).enumerate() {
                    *dn = (pn - (n == label) as u8 as f64) / b;
                }
            }
            BeamLoss::Ce => d[label] = (p[label] - 1.0) / b,
        }
    }
    (dz_gain, dz_beam)
}

/// Trains `net` in place. Gain bounds are fitted to the training split.
/// With a validation split the parameters of the epoch with the lowest
/// validation loss are retained; otherwise the final parameters are kept.
pub fn train<N: Network>(
    net: &mut N,
    train_set: &[Example],
    valid_set: &[Example],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport, NnError> {
    if train_set.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let gains: Vec<f64> = train_set.iter().map(|e| e.gain).collect();
    net.set_bounds(GainBounds::from_gains(&gains, opts.gain_scale));
    let bounds = net.bounds();
    let mut clamps = 0;
    let targets: Vec<f64> = gains
        .iter()
        .map(|&g| bounds.normalize(g, &mut clamps))
        .collect();

    let mut opt = Adam::new(opts.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, N)> = None;
    let mut stopped_early = false;

    for epoch in 0..opts.epochs {
        order.shuffle(&mut stream(opts.seed, &[TAG_SHUFFLE, epoch as u64]));
        let (mut loss, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let t: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|e| e.beam).collect();
            let out = net.forward_train(&batch_input(net, &refs), refs.len())?;
            for (i, &label) in labels.iter().enumerate() {
                loss +=
                    loss_mse(out.gain[i], t[i]) + beam_loss(opts.beam_loss, out.beam_row(i), label);
                hits += top_k_hit(out.beam_row(i), label, 1) as usize;
            }
            let (dg, db) = loss_gradients(&out, &t, &labels, opts.beam_loss);
            let mut params = net.params_mut();
            params.iter_mut().for_each(|p| p.zero_grad());
            drop(params);
            net.backward(&dg, &db)?;
            opt.step(&mut net.params_mut());
        }
        let n = train_set.len() as f64;
        let mut stats = EpochStats {
            epoch,
            train_loss: loss / n,
            train_top1: hits as f64 / n,
            valid_loss: f64::NAN,
            valid_top1: f64::NAN,
            valid_top3: f64::NAN,
        };
        if !valid_set.is_empty() {
            let v = evaluate(net, valid_set, opts.batch_size, opts.beam_loss, &[1, 3])?;
            stats.valid_loss = v.loss;
            stats.valid_top1 = v.top_k[0];
            stats.valid_top3 = v.top_k[1];
            if best.as_ref().map_or(true, |b| v.loss < b.0) {
                best = Some((v.loss, epoch, net.snapshot()));
            }
        }
        on_epoch(&stats);
        history.push(stats);
        if history.last().unwrap().train_top1 >= opts.stop_train_top1 {
            let check = evaluate(net, train_set, opts.batch_size, opts.beam_loss, &[1])?;
            if check.top_k[0] >= opts.stop_train_top1 {
                stopped_early = true;
                break;
            }
        }
    }
    let last = history.len().saturating_sub(1);
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *net = params;
            epoch
        }
        None => last,
    };
    Ok(TrainReport {
        history,
        best_epoch,
        stopped_early,
        clamps,
    })
}
