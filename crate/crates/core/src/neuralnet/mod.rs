//! BEM-GBPN: per-frame CNN feature extractor, stacked GRU, mixture of
//! experts with two linear routers, and sigmoid gain/beam heads.

pub mod baseline;
pub mod layers;
pub mod train;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::config::GainScale;
use crate::config::RunConfig;
use crate::rng::{stream, TAG_INIT};
use layers::{
    maxpool_backward, maxpool_dims, maxpool_forward, relu_backward, relu_inplace, sigmoid,
    BatchNorm, BatchNormCache, Conv2d, Dims, Gru, GruStep, Linear, Param,
};

pub use train::{
    evaluate, train, EpochStats, EvalStats, Example, Network, TrainOptions, TrainReport,
};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a recorded forward pass")]
    GraphNotRecorded,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub t_p: usize,
    pub n_beams: usize,
    /// (out_channels, kernel, stride) per cell.
    pub cnn_cells: Vec<[usize; 3]>,
    pub fc_size: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub expert_hidden: usize,
    pub expert_out: usize,
    pub experts: usize,
    pub router_softmax: bool,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        let t = &cfg.training;
        Self {
            grid_width: cfg.sensing.grid_width,
            grid_height: cfg.sensing.grid_height,
            t_p: cfg.sensing.t_p,
            n_beams: cfg.radio.n_antennas,
            cnn_cells: t.cnn_cells.clone(),
            fc_size: t.fc_size,
            gru_hidden: t.gru_hidden,
            gru_layers: t.gru_layers,
            expert_hidden: t.expert_hidden,
            expert_out: t.expert_out,
            experts: t.experts,
            router_softmax: t.router_softmax,
        }
    }

    /// Values per input sequence: `t_p * 2 * height * width`.
    pub fn input_len(&self) -> usize {
        self.t_p * self.frame_dims().size()
    }

    pub fn frame_dims(&self) -> Dims {
        Dims {
            channels: 2,
            height: self.grid_height,
            width: self.grid_width,
        }
    }
}

/// Range used to map gains into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainBounds {
    pub p_min: f64,
    pub p_max: f64,
    pub scale: GainScale,
}

impl GainBounds {
    pub fn new(p_min: f64, p_max: f64, scale: GainScale) -> Self {
        assert!(p_max > p_min, "p_max must exceed p_min");
        Self {
            p_min,
            p_max,
            scale,
        }
    }

    /// Bounds spanning the given gains (watts).
    pub fn from_gains(gains: &[f64], scale: GainScale) -> Self {
        let lo = gains.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = match scale {
            GainScale::Linear if lo.is_finite() && hi > lo => (lo, hi),
            GainScale::Linear => (0.0, hi.max(1e-30) * 2.0),
            GainScale::Db => {
                let lo = lo.max(1e-30);
                if hi > lo {
                    (lo, hi)
                } else {
                    (lo, lo * 2.0)
                }
            }
        };
        Self::new(lo, hi, scale)
    }

    fn map(&self, r: f64) -> f64 {
        match self.scale {
            GainScale::Linear => r,
            GainScale::Db => 10.0 * r.max(1e-30).log10(),
        }
    }

    /// `(r - p_min) / (p_max - p_min)`, clamped to [0, 1]; clamps are counted.
    pub fn normalize(&self, r: f64, clamps: &mut usize) -> f64 {
        let (lo, hi) = (self.map(self.p_min), self.map(self.p_max));
        let v = (self.map(r) - lo) / (hi - lo);
        if !(0.0..=1.0).contains(&v) {
            *clamps += 1;
        }
        v.clamp(0.0, 1.0)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        let (lo, hi) = (self.map(self.p_min), self.map(self.p_max));
        let x = lo + v * (hi - lo);
        match self.scale {
            GainScale::Linear => x,
            GainScale::Db => 10f64.powf(x / 10.0),
        }
    }
}

/// Network outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    /// Normalized gain per sample.
    pub gain: Vec<f64>,
    /// Beam probabilities, `[batch][n_beams]`.
    pub beam: Vec<f64>,
    pub n_beams: usize,
}

impl Outputs {
    pub fn beam_row(&self, i: usize) -> &[f64] {
        &self.beam[i * self.n_beams..(i + 1) * self.n_beams]
    }
}

pub fn loss_mse(pred: f64, target: f64) -> f64 {
    (target - pred).powi(2)
}

const PROB_EPS: f64 = 1e-12;

/// Negative log-probability of the label entry.
pub fn loss_ce(probs: &[f64], label: usize) -> f64 {
    -probs[label].clamp(PROB_EPS, 1.0).ln()
}

/// Binary cross-entropy summed over all entries against a one-hot label.
pub fn loss_bce(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(n, &p)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if n == label {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Whether `label` is among the `k` largest entries (ties favor lower indices).
pub fn top_k_hit(probs: &[f64], label: usize, k: usize) -> bool {
    let p = probs[label];
    let rank = probs
        .iter()
        .enumerate()
        .filter(|&(n, &q)| q > p || (q == p && n < label))
        .count();
    rank < k
}

#[derive(Debug, Clone, Default)]
struct CellCache {
    input: Vec<f64>,
    bn: BatchNormCache,
    act: Vec<f64>,
    arg: Vec<u32>,
}

#[derive(Debug, Clone, Default)]
struct Tape {
    batch: usize,
    cells: Vec<CellCache>,
    flat: Vec<f64>,
    embed: Vec<f64>,
    gru: Vec<Vec<GruStep>>,
    v: Vec<f64>,
    expert_hidden: Vec<Vec<f64>>,
    expert_out: Vec<Vec<f64>>,
    eta: [Vec<f64>; 2],
    comb: [Vec<f64>; 2],
}

/// The full prediction network.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub convs: Vec<Conv2d>,
    pub bns: Vec<BatchNorm>,
    pub fc: Linear,
    pub grus: Vec<Gru>,
    pub experts: Vec<(Linear, Linear)>,
    pub routers: [Param; 2],
    pub gain_head: Linear,
    pub beam_head: Linear,
    pub bounds: GainBounds,
    tape: Option<Tape>,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, NnError> {
        let mut rng = stream(seed, &[TAG_INIT]);
        let mut dims = config.frame_dims();
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for (i, &[out, k, s]) in config.cnn_cells.iter().enumerate() {
            if out == 0 || k == 0 || s == 0 {
                return Err(NnError::ShapeMismatch(format!("cell {i} has a zero size")));
            }
            let conv = Conv2d::new(&format!("cell{i}.conv"), dims, out, k, s, &mut rng);
            let o = conv.output();
            if o.height == 0 || o.width == 0 {
                return Err(NnError::ShapeMismatch(format!("cell {i} output is empty")));
            }
            convs.push(conv);
            bns.push(BatchNorm::new(&format!("cell{i}.bn"), out));
            dims = maxpool_dims(o);
        }
        let flat = dims.size();
        let fc = Linear::he("fc", flat, config.fc_size, &mut rng);
        let mut grus = Vec::new();
        for l in 0..config.gru_layers {
            let inp = if l == 0 {
                config.fc_size
            } else {
                config.gru_hidden
            };
            grus.push(Gru::new(
                &format!("gru{l}"),
                inp,
                config.gru_hidden,
                &mut rng,
            ));
        }
        let experts = (0..config.experts)
            .map(|i| {
                (
                    Linear::he(
                        &format!("expert{i}.l1"),
                        config.gru_hidden,
                        config.expert_hidden,
                        &mut rng,
                    ),
                    Linear::he(
                        &format!("expert{i}.l2"),
                        config.expert_hidden,
                        config.expert_out,
                        &mut rng,
                    ),
                )
            })
            .collect();
        let rb = 1.0 / (config.gru_hidden as f64).sqrt();
        let routers = [
            Param::new(
                "router1",
                &[config.experts, config.gru_hidden],
                rb,
                &mut rng,
            ),
            Param::new(
                "router2",
                &[config.experts, config.gru_hidden],
                rb,
                &mut rng,
            ),
        ];
        let hb = 1.0 / (config.expert_out as f64).sqrt();
        let gain_head = Linear::new("gain_head", config.expert_out, 1, hb, &mut rng);
        let beam_head = Linear::new("beam_head", config.expert_out, config.n_beams, hb, &mut rng);
        Ok(Self {
            config: config.clone(),
            convs,
            bns,
            fc,
            grus,
            experts,
            routers,
            gain_head,
            beam_head,
            bounds: GainBounds::new(0.0, 1.0, GainScale::Linear),
            tape: None,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for (c, b) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            out.push(&mut c.w);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.extend(self.fc.params_mut());
        for g in &mut self.grus {
            out.extend(g.params_mut());
        }
        for (a, b) in &mut self.experts {
            out.extend(a.params_mut());
            out.extend(b.params_mut());
        }
        let [r1, r2] = &mut self.routers;
        out.push(r1);
        out.push(r2);
        out.extend(self.gain_head.params_mut());
        out.extend(self.beam_head.params_mut());
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_input(&self, x: &[f64], batch: usize) -> Result<(), NnError> {
        let want = batch * self.config.input_len();
        if x.len() != want {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} values, expected {want}",
                x.len()
            )));
        }
        Ok(())
    }

    /// Per-frame embeddings `[batch * t_p][fc_size]` (sample-major).
    fn sfe(&mut self, x: &[f64], n: usize, train: bool, tape: &mut Option<Tape>) -> Vec<f64> {
        let mut a = x.to_vec();
        for i in 0..self.convs.len() {
            let o = self.convs[i].output();
            let mut y = self.convs[i].forward(&a, n);
            let plane = o.height * o.width;
            let bn_cache = if train {
                self.bns[i].forward_train(&mut y, n, plane)
            } else {
                self.bns[i].forward_eval(&mut y, n, plane);
                BatchNormCache::default()
            };
            relu_inplace(&mut y);
            let (pooled, arg) = maxpool_forward(&y, n, o);
            if let Some(t) = tape.as_mut() {
                t.cells.push(CellCache {
                    input: std::mem::take(&mut a),
                    bn: bn_cache,
                    act: y,
                    arg,
                });
            }
            a = pooled;
        }
        let mut e = self.fc.forward(&a, n);
        relu_inplace(&mut e);
        if let Some(t) = tape.as_mut() {
            t.flat = a;
            t.embed = e.clone();
        }
        e
    }

    fn run(&mut self, x: &[f64], batch: usize, train: bool) -> Result<Outputs, NnError> {
        self.check_input(x, batch)?;
        let cfg = self.config.clone();
        let t_p = cfg.t_p;
        let n = batch * t_p;
        let mut tape = train.then(|| Tape {
            batch,
            ..Default::default()
        });
        let embed = self.sfe(x, n, train, &mut tape);

        // Stacked GRU over time; inputs per step are rows b * t_p + t.
        let mut seq: Vec<Vec<f64>> = (0..t_p)
            .map(|t| {
                (0..batch)
                    .flat_map(|b| {
                        embed[(b * t_p + t) * cfg.fc_size..(b * t_p + t + 1) * cfg.fc_size]
                            .iter()
                            .copied()
                    })
                    .collect()
            })
            .collect();
        for g in &self.grus {
            let mut h = vec![0.0; batch * cfg.gru_hidden];
            let mut steps = Vec::with_capacity(t_p);
            let mut outs = Vec::with_capacity(t_p);
            for xt in &seq {
                let (hn, s) = g.step(xt, &h, batch);
                if tape.is_some() {
                    steps.push(s);
                }
                outs.push(hn.clone());
                h = hn;
            }
            if let Some(t) = tape.as_mut() {
                t.gru.push(steps);
            }
            seq = outs;
        }
        let v = seq.pop().expect("t_p >= 1");

        let mut ks = Vec::with_capacity(cfg.experts);
        for (l1, l2) in &self.experts {
            let mut h1 = l1.forward(&v, batch);
            relu_inplace(&mut h1);
            let k = l2.forward(&h1, batch);
            if let Some(t) = tape.as_mut() {
                t.expert_hidden.push(h1);
            }
            ks.push(k);
        }

        let mut combs: [Vec<f64>; 2] = Default::default();
        let mut etas: [Vec<f64>; 2] = Default::default();
        for r in 0..2 {
            let mut eta = vec![0.0; batch * cfg.experts];
            layers::gemm(
                false,
                true,
                batch,
                cfg.experts,
                cfg.gru_hidden,
                1.0,
                &v,
                &self.routers[r].value,
                0.0,
                &mut eta,
            );
            if cfg.router_softmax {
                for row in eta.chunks_mut(cfg.experts) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.iter_mut().for_each(|e| *e = (*e - m).exp());
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|e| *e /= s);
                }
            }
            let mut comb = vec![0.0; batch * cfg.expert_out];
            for b in 0..batch {
                for (i, k) in ks.iter().enumerate() {
                    let w = eta[b * cfg.experts + i];
                    for j in 0..cfg.expert_out {
                        comb[b * cfg.expert_out + j] += w * k[b * cfg.expert_out + j];
                    }
                }
            }
            combs[r] = comb;
            etas[r] = eta;
        }

        let gain: Vec<f64> = self
            .gain_head
            .forward(&combs[0], batch)
            .into_iter()
            .map(sigmoid)
            .collect();
        let beam: Vec<f64> = self
            .beam_head
            .forward(&combs[1], batch)
            .into_iter()
            .map(sigmoid)
            .collect();
        if let Some(mut t) = tape {
            t.v = v;
            t.expert_out = ks;
            t.eta = etas;
            t.comb = combs;
            self.tape = Some(t);
        } else {
            self.tape = None;
        }
        Ok(Outputs {
            gain,
            beam,
            n_beams: cfg.n_beams,
        })
    }

    /// Training-mode forward pass (batch statistics); records the graph for `backward`.
    pub fn forward_train(&mut self, x: &[f64], batch: usize) -> Result<Outputs, NnError> {
        self.run(x, batch, true)
    }

    /// Inference with running batchnorm statistics.
    pub fn forward_eval(&self, x: &[f64], batch: usize) -> Result<Outputs, NnError> {
        let mut m = self.clone_without_tape();
        m.run(x, batch, false)
    }

    fn clone_without_tape(&self) -> Self {
        Self {
            tape: None,
            ..self.clone_shallow()
        }
    }

    fn clone_shallow(&self) -> Self {
        Self {
            config: self.config.clone(),
            convs: self.convs.clone(),
            bns: self.bns.clone(),
            fc: self.fc.clone(),
            grus: self.grus.clone(),
            experts: self.experts.clone(),
            routers: self.routers.clone(),
            gain_head: self.gain_head.clone(),
            beam_head: self.beam_head.clone(),
            bounds: self.bounds,
            tape: None,
        }
    }

    /// A copy of the weights without any recorded graph.
    pub fn snapshot(&self) -> Self {
        self.clone_shallow()
    }

    /// Single-sequence inference: (normalized gain, beam probabilities).
    pub fn predict(&self, input: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
        let out = self.forward_eval(input, 1)?;
        Ok((out.gain[0], out.beam))
    }

    /// Backpropagates gradients of the loss with respect to the head logits
    /// (`dz_gain[batch]`, `dz_beam[batch][n_beams]`), accumulating into every
    /// parameter's `grad`. Consumes the recorded graph.
    pub fn backward(&mut self, dz_gain: &[f64], dz_beam: &[f64]) -> Result<(), NnError> {
        let tape = self.tape.take().ok_or(NnError::GraphNotRecorded)?;
        let cfg = self.config.clone();
        let batch = tape.batch;
        if dz_gain.len() != batch || dz_beam.len() != batch * cfg.n_beams {
            return Err(NnError::ShapeMismatch(
                "loss gradient does not match the batch".into(),
            ));
        }
        let eo = cfg.expert_out;
        let dcomb = [
            self.gain_head.backward(&tape.comb[0], dz_gain, batch),
            self.beam_head.backward(&tape.comb[1], dz_beam, batch),
        ];

        let mut dk = vec![vec![0.0; batch * eo]; cfg.experts];
        let mut dv = vec![0.0; batch * cfg.gru_hidden];
        for r in 0..2 {
            let eta = &tape.eta[r];
            let mut deta = vec![0.0; batch * cfg.experts];
            for b in 0..batch {
                let dc = &dcomb[r][b * eo..(b + 1) * eo];
                for i in 0..cfg.experts {
                    let k = &tape.expert_out[i][b * eo..(b + 1) * eo];
                    deta[b * cfg.experts + i] = dc.iter().zip(k).map(|(a, c)| a * c).sum();
                    let w = eta[b * cfg.experts + i];
                    for (g, d) in dk[i][b * eo..(b + 1) * eo].iter_mut().zip(dc) {
                        *g += w * d;
                    }
                }
            }
            if cfg.router_softmax {
                for b in 0..batch {
                    let e = &eta[b * cfg.experts..(b + 1) * cfg.experts];
                    let d = &mut deta[b * cfg.experts..(b + 1) * cfg.experts];
                    let dot: f64 = e.iter().zip(d.iter()).map(|(a, c)| a * c).sum();
                    for (di, ei) in d.iter_mut().zip(e) {
                        *di = ei * (*di - dot);
                    }
                }
            }
            layers::gemm(
                true,
                false,
                cfg.experts,
                cfg.gru_hidden,
                batch,
                1.0,
                &deta,
                &tape.v,
                1.0,
                &mut self.routers[r].grad,
            );
            layers::gemm(
                false,
                false,
                batch,
                cfg.gru_hidden,
                cfg.experts,
                1.0,
                &deta,
                &self.routers[r].value,
                1.0,
                &mut dv,
            );
        }
        for (i, (l1, l2)) in self.experts.iter_mut().enumerate() {
            let mut dh1 = l2.backward(&tape.expert_hidden[i], &dk[i], batch);
            relu_backward(&tape.expert_hidden[i], &mut dh1);
            let dvi = l1.backward(&tape.v, &dh1, batch);
            dv.iter_mut().zip(dvi).for_each(|(a, b)| *a += b);
        }

        // GRU layers, top to bottom.
        let t_p = cfg.t_p;
        let mut ext: Vec<Vec<f64>> = vec![vec![0.0; batch * cfg.gru_hidden]; t_p];
        ext[t_p - 1] = dv;
        for (l, g) in self.grus.iter_mut().enumerate().rev() {
            let steps = &tape.gru[l];
            let mut carry = vec![0.0; batch * cfg.gru_hidden];
            let mut below = vec![Vec::new(); t_p];
            for t in (0..t_p).rev() {
                let dout: Vec<f64> = ext[t].iter().zip(&carry).map(|(a, b)| a + b).collect();
                let (dx, dh) = g.step_backward(&steps[t], &dout, batch);
                below[t] = dx;
                carry = dh;
            }
            ext = below;
        }

        let n = batch * t_p;
        let mut dembed = vec![0.0; n * cfg.fc_size];
        for (t, dx) in ext.iter().enumerate() {
            for b in 0..batch {
                dembed[(b * t_p + t) * cfg.fc_size..(b * t_p + t + 1) * cfg.fc_size]
                    .copy_from_slice(&dx[b * cfg.fc_size..(b + 1) * cfg.fc_size]);
            }
        }
        relu_backward(&tape.embed, &mut dembed);
        let mut da = self.fc.backward(&tape.flat, &dembed, n);

        for i in (0..self.convs.len()).rev() {
            let c = &tape.cells[i];
            let o = self.convs[i].output();
            let mut dy = maxpool_backward(&da, &c.arg, c.act.len());
            relu_backward(&c.act, &mut dy);
            let dbn = self.bns[i].backward(&c.bn, &dy, n, o.height * o.width);
            match self.convs[i].backward(&c.input, &dbn, n, i > 0) {
                Some(dx) => da = dx,
                None => break,
            }
        }
        Ok(())
    }

    /// Every stored tensor in declaration order, batchnorm running statistics included.
    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, &mut Vec<f64>)> = Vec::new();
        let n_cells = self.convs.len();
        let (convs, bns) = (&mut self.convs, &mut self.bns);
        for (c, b) in convs.iter_mut().zip(bns.iter_mut()).take(n_cells) {
            out.push((c.w.name.clone(), c.w.shape.clone(), &mut c.w.value));
            out.push((
                b.gamma.name.clone(),
                b.gamma.shape.clone(),
                &mut b.gamma.value,
            ));
            out.push((b.beta.name.clone(), b.beta.shape.clone(), &mut b.beta.value));
            let ch = b.running_mean.len();
            let base = b.gamma.name.trim_end_matches(".gamma").to_string();
            out.push((
                format!("{base}.running_mean"),
                vec![ch],
                &mut b.running_mean,
            ));
            out.push((format!("{base}.running_var"), vec![ch], &mut b.running_var));
        }
        let mut rest: Vec<&mut Param> = self.fc.params_mut();
        for g in &mut self.grus {
            rest.extend(g.params_mut());
        }
        for (a, b) in &mut self.experts {
            rest.extend(a.params_mut());
            rest.extend(b.params_mut());
        }
        let [r1, r2] = &mut self.routers;
        rest.push(r1);
        rest.push(r2);
        rest.extend(self.gain_head.params_mut());
        rest.extend(self.beam_head.params_mut());
        for p in rest {
            out.push((p.name.clone(), p.shape.clone(), &mut p.value));
        }
        out
    }

    /// Checkpoint: one JSON header line, then raw little-endian f64 tensors.
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        let mut copy = self.snapshot();
        let tensors = copy.tensors_mut();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            bounds: self.bounds,
            tensors: tensors
                .iter()
                .map(|(n, s, _)| TensorInfo {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| NnError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for (_, _, v) in tensors {
            for x in v.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<Self, NnError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| NnError::Format(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != 1 {
            return Err(NnError::Format("not a v1 model checkpoint".into()));
        }
        let mut model = Model::new(&header.config, 0)?;
        model.bounds = header.bounds;
        let tensors = model.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(NnError::Format("tensor count mismatch".into()));
        }
        let mut buf = [0u8; 8];
        for ((name, shape, v), info) in tensors.into_iter().zip(&header.tensors) {
            if name != info.name || shape != info.shape {
                return Err(NnError::Format(format!(
                    "tensor {} does not match {}",
                    info.name, name
                )));
            }
            for x in v.iter_mut() {
                r.read_exact(&mut buf)?;
                *x = f64::from_le_bytes(buf);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(NnError::Format("trailing bytes after tensors".into()));
        }
        Ok(model)
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and index of the worst entry.
    pub worst: (String, usize),
}

/// Compares analytic gradients of the joint training loss against central
/// differences for every parameter entry. Uses train mode throughout.
pub fn gradient_check(
    model: &mut Model,
    x: &[f64],
    targets: &[f64],
    labels: &[usize],
    step: f64,
) -> Result<GradCheck, NnError> {
    let batch = targets.len();
    let loss = |m: &mut Model| -> Result<f64, NnError> {
        let out = m.forward_train(x, batch)?;
        Ok((0..batch)
            .map(|i| loss_mse(out.gain[i], targets[i]) + loss_bce(out.beam_row(i), labels[i]))
            .sum::<f64>()
            / batch as f64)
    };
    let out = model.forward_train(x, batch)?;
    let (dg, db) = train::loss_gradients(&out, targets, labels, crate::config::BeamLoss::Bce);
    model.zero_grad();
    model.backward(&dg, &db)?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params_mut()
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
    };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = model.params_mut()[pi].value[k];
            model.params_mut()[pi].value[k] = orig + step;
            let up = loss(model)?;
            model.params_mut()[pi].value[k] = orig - step;
            let down = loss(model)?;
            model.params_mut()[pi].value[k] = orig;
            let n = (up - down) / (2.0 * step);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (name.clone(), k);
            }
        }
    }
    model.tape = None;
    Ok(report)
}

const CHECKPOINT_FORMAT: &str = "oms-model";

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    bounds: GainBounds,
    tensors: Vec<TensorInfo>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                p.value[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }

    pub fn moments(&self, k: usize) -> (&[f64], &[f64]) {
        (&self.m[k], &self.v[k])
    }
}
