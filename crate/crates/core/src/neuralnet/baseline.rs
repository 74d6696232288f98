//! Bounding-box-vector MLP baseline. Instead of the BEM rasters it sees only
//! the user's box per frame (extent of channel 0), so scatterers are invisible.

use super::layers::{relu_backward, relu_inplace, sigmoid, Linear, Param};
use super::train::Network;
use super::{GainBounds, GainScale, NnError, Outputs};
use crate::rng::{stream, TAG_INIT};

pub const BASELINE_WIDTHS: [usize; 4] = [128, 256, 512, 128];
const FEATURES_PER_FRAME: usize = 5;

#[derive(Debug, Clone, Default)]
struct Tape {
    batch: usize,
    acts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BbMlp {
    pub t_p: usize,
    pub grid: (usize, usize),
    pub n_beams: usize,
    pub layers: Vec<Linear>,
    pub gain_head: Linear,
    pub beam_head: Linear,
    pub bounds: GainBounds,
    tape: Option<Tape>,
}

/// Per frame: user box center x/y, width, height (grid fractions) and a presence flag.
pub fn box_features(x: &[f64], t_p: usize, grid: (usize, usize)) -> Vec<f64> {
    let (w, h) = grid;
    let per = 2 * w * h;
    let mut out = Vec::with_capacity(t_p * FEATURES_PER_FRAME);
    for t in 0..t_p {
        let ch0 = &x[t * per..t * per + w * h];
        let (mut c0, mut c1, mut r0, mut r1) = (usize::MAX, 0, usize::MAX, 0);
        for (k, &v) in ch0.iter().enumerate() {
            if v > 0.5 {
                let (r, c) = (k / w, k % w);
                c0 = c0.min(c);
                c1 = c1.max(c + 1);
                r0 = r0.min(r);
                r1 = r1.max(r + 1);
            }
        }
        if c0 == usize::MAX {
            out.extend([0.0; FEATURES_PER_FRAME]);
        } else {
            out.extend([
                (c0 + c1) as f64 / (2.0 * w as f64),
                (r0 + r1) as f64 / (2.0 * h as f64),
                (c1 - c0) as f64 / w as f64,
                (r1 - r0) as f64 / h as f64,
                1.0,
            ]);
        }
    }
    out
}

impl BbMlp {
    pub fn new(
        t_p: usize,
        grid: (usize, usize),
        n_beams: usize,
        widths: &[usize],
        seed: u64,
    ) -> Self {
        let mut rng = stream(seed, &[TAG_INIT, 1]);
        let mut inp = t_p * FEATURES_PER_FRAME;
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::he(&format!("mlp{i}"), inp, w, &mut rng));
            inp = w;
        }
        let hb = 1.0 / (inp as f64).sqrt();
        Self {
            t_p,
            grid,
            n_beams,
            layers,
            gain_head: Linear::new("gain_head", inp, 1, hb, &mut rng),
            beam_head: Linear::new("beam_head", inp, n_beams, hb, &mut rng),
            bounds: GainBounds::new(0.0, 1.0, GainScale::Linear),
            tape: None,
        }
    }

    fn run(&self, x: &[f64], batch: usize) -> Result<(Outputs, Tape), NnError> {
        let len = self.input_len();
        if x.len() != batch * len {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} values, expected {}",
                x.len(),
                batch * len
            )));
        }
        let mut a: Vec<f64> = x
            .chunks(len)
            .flat_map(|s| box_features(s, self.t_p, self.grid))
            .collect();
        let mut acts = vec![a.clone()];
        for l in &self.layers {
            a = l.forward(&a, batch);
            relu_inplace(&mut a);
            acts.push(a.clone());
        }
        let gain = self
            .gain_head
            .forward(&a, batch)
            .into_iter()
            .map(sigmoid)
            .collect();
        let beam = self
            .beam_head
            .forward(&a, batch)
            .into_iter()
            .map(sigmoid)
            .collect();
        Ok((
            Outputs {
                gain,
                beam,
                n_beams: self.n_beams,
            },
            Tape { batch, acts },
        ))
    }
}

impl Network for BbMlp {
    fn input_len(&self) -> usize {
        self.t_p * 2 * self.grid.0 * self.grid.1
    }
    fn n_beams(&self) -> usize {
        self.n_beams
    }
    fn bounds(&self) -> GainBounds {
        self.bounds
    }
    fn set_bounds(&mut self, b: GainBounds) {
        self.bounds = b;
    }
    fn forward_train(&mut self, x: &[f64], batch: usize) -> Result<Outputs, NnError> {
        let (out, tape) = self.run(x, batch)?;
        self.tape = Some(tape);
        Ok(out)
    }
    fn forward_eval(&self, x: &[f64], batch: usize) -> Result<Outputs, NnError> {
        Ok(self.run(x, batch)?.0)
    }
    fn backward(&mut self, dz_gain: &[f64], dz_beam: &[f64]) -> Result<(), NnError> {
        let tape = self.tape.take().ok_or(NnError::GraphNotRecorded)?;
        let b = tape.batch;
        let top = tape.acts.last().unwrap();
        let mut d = self.gain_head.backward(top, dz_gain, b);
        let db = self.beam_head.backward(top, dz_beam, b);
        d.iter_mut().zip(db).for_each(|(x, y)| *x += y);
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            relu_backward(&tape.acts[i + 1], &mut d);
            d = l.backward(&tape.acts[i], &d, b);
        }
        Ok(())
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.extend(self.gain_head.params_mut());
        out.extend(self.beam_head.params_mut());
        out
    }
    fn snapshot(&self) -> Self {
        Self {
            tape: None,
            ..self.clone()
        }
    }
}
