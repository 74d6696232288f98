//! Training/test records cut from a simulated trace, and their file format.
//!
//! File layout: one JSON header line, then `count` records. Each record is a
//! little-endian `u32` byte length followed by
//! `bs u16 | vehicle u32 | end_frame u32 | split u8 | identified u8 |
//! packed BEM bits | gain f64 | beam u16`.
//! The BEM sequence is `t_p * 2 * height * width` bits, LSB-first, in
//! `[t][channel][row][column]` order.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::bem::{encode_frame, BemSequence};
use crate::channel::{best_beam, make_codebook, Codebook};
use crate::config::RunConfig;
use crate::geometry::{Bsm, CameraRig};
use crate::identification::{MatchParams, OmsUit, TrackerParams, UitParams};
use crate::neuralnet::Example;
use crate::rng::{stream, TAG_DATASET};
use crate::scenario::{emit_bsm_for, ScenarioError, Trace, TraceFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train = 0,
    Valid = 1,
    Test = 2,
}

impl Split {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Valid),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub bs: u16,
    pub vehicle: u32,
    pub end_frame: u32,
    pub split: Split,
    /// False when the user box at the end frame came from nowhere (test sets only).
    pub identified: bool,
    pub bits: Vec<u8>,
    pub gain: f64,
    pub beam: u16,
}

impl Record {
    pub fn example(&self) -> Example {
        Example {
            bits: self.bits.clone(),
            gain: self.gain,
            beam: self.beam as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub t_p: usize,
    pub t_f: usize,
    pub n_t: usize,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

const DATASET_FORMAT: &str = "oms-dataset";

impl Dataset {
    pub fn examples(&self, split: Split) -> Vec<Example> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(Record::example)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    fn bits_len(&self) -> usize {
        (self.header.t_p * 2 * self.header.width * self.header.height).div_ceil(8)
    }

    pub fn sequence(&self, r: &Record) -> BemSequence {
        let h = &self.header;
        BemSequence::unpack(
            &r.bits,
            h.t_p,
            (h.width, h.height),
            r.bs as usize,
            r.vehicle,
            r.end_frame as u64,
        )
        .expect("record length checked on load")
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ScenarioError> {
        let mut header = self.header.clone();
        header.count = self.records.len();
        serde_json::to_writer(&mut w, &header).map_err(|e| ScenarioError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        let bits = self.bits_len();
        for r in &self.records {
            if r.bits.len() != bits {
                return Err(ScenarioError::Format(
                    "record BEM length does not match header".into(),
                ));
            }
            let len = (2 + 4 + 4 + 1 + 1 + bits + 8 + 2) as u32;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(&r.bs.to_le_bytes())?;
            w.write_all(&r.vehicle.to_le_bytes())?;
            w.write_all(&r.end_frame.to_le_bytes())?;
            w.write_all(&[r.split as u8, r.identified as u8])?;
            w.write_all(&r.bits)?;
            w.write_all(&r.gain.to_le_bytes())?;
            w.write_all(&r.beam.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self, ScenarioError> {
        let bad = |m: &str| ScenarioError::Format(m.to_string());
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: DatasetHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| ScenarioError::Format(format!("dataset header: {e}")))?;
        if header.format != DATASET_FORMAT || header.version != 1 {
            return Err(bad("not a v1 dataset"));
        }
        let mut ds = Dataset {
            header,
            records: Vec::with_capacity(0),
        };
        let bits = ds.bits_len();
        let expected = 2 + 4 + 4 + 1 + 1 + bits + 8 + 2;
        for _ in 0..ds.header.count {
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            if u32::from_le_bytes(len) as usize != expected {
                return Err(bad("record length does not match header"));
            }
            let mut buf = vec![0u8; expected];
            r.read_exact(&mut buf)?;
            let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
            let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
            let b = 12 + bits;
            ds.records.push(Record {
                bs: u16_at(0),
                vehicle: u32_at(2),
                end_frame: u32_at(6),
                split: Split::from_u8(buf[10]).ok_or_else(|| bad("unknown split"))?,
                identified: buf[11] != 0,
                bits: buf[12..b].to_vec(),
                gain: f64::from_le_bytes(buf[b..b + 8].try_into().unwrap()),
                beam: u16_at(b + 8),
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after records"));
        }
        Ok(ds)
    }
}

pub fn uit_params(cfg: &RunConfig, rig: &CameraRig) -> UitParams {
    UitParams {
        matching: MatchParams::two_step(cfg.sensing.gamma2, rig.focal),
        tracker: TrackerParams {
            iou_threshold: cfg.sensing.iou_threshold,
            max_age: cfg.sensing.max_age,
        },
    }
}

/// BSMs of the vehicles occupying the first `users` user slots.
pub fn slot_bsms(
    frame: &TraceFrame,
    seed: u64,
    users: usize,
    interval: usize,
    jitter: f64,
) -> Vec<Bsm> {
    emit_bsm_for(&frame.vehicles, frame.frame, seed, interval, jitter, |v| {
        v.is_user && (v.slot as usize) < users
    })
}

/// Runs OMS-UIT at every BS over the whole trace with the first `users` user
/// slots reporting every `interval` frames. Result is `[frame][bs]`: user id -> box index.
pub fn identify_trace(
    trace: &Trace,
    users: usize,
    interval: usize,
) -> Vec<Vec<BTreeMap<u32, usize>>> {
    let cfg = &trace.config;
    let world = trace.world();
    let mut uits: Vec<OmsUit> = world
        .rigs
        .iter()
        .enumerate()
        .map(|(b, rig)| OmsUit::new(*rig, uit_params(cfg, rig), trace.seed, b))
        .collect();
    trace
        .frames
        .iter()
        .map(|f| {
            let bsms = slot_bsms(f, trace.seed, users, interval, cfg.scenario.bsm_jitter);
            uits.iter_mut()
                .enumerate()
                .map(|(b, u)| u.step(f.frame, &f.observation.boxes(b), &bsms))
                .collect()
        })
        .collect()
}

/// BEM sequence ending at frame index `end`; `user_box(i)` picks the user's box in frame `i`.
pub fn encode_window(
    trace: &Trace,
    bs: usize,
    end: usize,
    vehicle: u32,
    user_box: impl Fn(usize) -> Option<usize>,
) -> BemSequence {
    let cfg = &trace.config;
    let grid = (cfg.sensing.grid_width, cfg.sensing.grid_height);
    let image = (
        cfg.scenario.image_width as f64,
        cfg.scenario.image_height as f64,
    );
    let t_p = cfg.sensing.t_p;
    let frames = (end + 1 - t_p..=end)
        .map(|i| {
            encode_frame(
                trace.frames[i].frame,
                user_box(i),
                &trace.frames[i].observation.boxes(bs),
                grid,
                image,
            )
        })
        .collect();
    BemSequence {
        frames,
        bs,
        user: vehicle,
        end_frame: trace.frames[end].frame,
    }
}

/// Index of `vehicle`'s detection at `bs` in `frame`.
pub fn true_box(frame: &TraceFrame, bs: usize, vehicle: u32) -> Option<usize> {
    frame.observation.per_bs[bs]
        .iter()
        .position(|d| d.vehicle_id == vehicle)
}

/// Optimal (gain, beam) of `vehicle` at `bs` in `frame`; None if the vehicle is absent.
pub fn optimal_link(
    frame: &TraceFrame,
    bs: usize,
    vehicle: u32,
    cb: &Codebook,
) -> Option<(f64, usize)> {
    let idx = frame.vehicle_index(vehicle)?;
    let h = frame.channel(bs, idx, cb.n_antennas(), cb.spacing_ratio);
    let (beam, gain) = best_beam(&h, cb).expect("codebook matches channel size");
    Some((gain, beam))
}

fn present_throughout(trace: &Trace, vehicle: u32, from: usize, to: usize) -> bool {
    (from..=to).all(|i| trace.frames[i].vehicle_index(vehicle).is_some())
}

fn header(trace: &Trace, count: usize) -> DatasetHeader {
    let cfg = &trace.config;
    DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: 1,
        width: cfg.sensing.grid_width,
        height: cfg.sensing.grid_height,
        t_p: cfg.sensing.t_p,
        t_f: cfg.sensing.t_f,
        n_t: cfg.radio.n_antennas,
        count,
        seed: trace.seed,
    }
}

fn check_length(trace: &Trace) -> Result<(), ScenarioError> {
    let needed = trace.config.sensing.t_p + trace.config.sensing.t_f;
    if trace.frames.len() < needed {
        return Err(ScenarioError::InsufficientHistory {
            needed,
            available: trace.frames.len(),
        });
    }
    Ok(())
}

/// Candidate end frames: every `record_stride` frames once a full window fits.
fn end_frames(trace: &Trace) -> impl Iterator<Item = usize> {
    let s = &trace.config.sensing;
    let last = trace.frames.len() - s.t_f;
    (s.t_p - 1..last).step_by(trace.config.training.record_stride)
}

/// Training and validation records. A (BS, vehicle, t) triple qualifies when
/// the vehicle exists over `[t - t_p + 1, t + t_f]` and the BS detects it at `t`.
/// Inputs use ground-truth user boxes; `training.samples` triples are drawn
/// with a seeded sampler and the latest `valid_fraction` of them (by end
/// frame) form the validation split.
pub fn build_dataset(trace: &Trace) -> Result<Dataset, ScenarioError> {
    check_length(trace)?;
    let cfg = &trace.config;
    let (t_p, t_f) = (cfg.sensing.t_p, cfg.sensing.t_f);
    let mut candidates = Vec::new();
    for t in end_frames(trace) {
        for bs in 0..trace.n_bs() {
            for d in &trace.frames[t].observation.per_bs[bs] {
                if present_throughout(trace, d.vehicle_id, t + 1 - t_p, t + t_f) {
                    candidates.push((t, bs, d.vehicle_id));
                }
            }
        }
    }
    let n = cfg.training.samples.min(candidates.len());
    let mut chosen =
        sample(&mut stream(trace.seed, &[TAG_DATASET]), candidates.len(), n).into_vec();
    chosen.sort_unstable();
    let n_valid = (n as f64 * cfg.training.valid_fraction).round() as usize;
    let cb = make_codebook(cfg.radio.n_antennas, cfg.radio.spacing_ratio);
    let records = chosen
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let (t, bs, v) = candidates[c];
            let seq = encode_window(trace, bs, t, v, |i| true_box(&trace.frames[i], bs, v));
            let (gain, beam) =
                optimal_link(&trace.frames[t + t_f], bs, v, &cb).expect("presence checked");
            Record {
                bs: bs as u16,
                vehicle: v,
                end_frame: t as u32,
                split: if k >= n - n_valid {
                    Split::Valid
                } else {
                    Split::Train
                },
                identified: true,
                bits: seq.pack(),
                gain,
                beam: beam as u16,
            }
        })
        .collect::<Vec<_>>();
    Ok(Dataset {
        header: header(trace, records.len()),
        records,
    })
}

/// Test records for a user count and BSM interval. The probe is the vehicle in
/// user slot 0; inputs use the boxes OMS-UIT assigns to it, so identification
/// mistakes show up in the BEMs. The candidate triples depend only on ground
/// truth, so every `users` value yields the same sample set.
pub fn build_test_set(
    trace: &Trace,
    users: usize,
    interval: usize,
) -> Result<Dataset, ScenarioError> {
    check_length(trace)?;
    let cfg = &trace.config;
    let (t_p, t_f) = (cfg.sensing.t_p, cfg.sensing.t_f);
    let ident = identify_trace(trace, users, interval);
    let cb = make_codebook(cfg.radio.n_antennas, cfg.radio.spacing_ratio);
    let mut records = Vec::new();
    for t in end_frames(trace) {
        let Some(probe) = trace.frames[t]
            .vehicles
            .iter()
            .find(|v| v.slot == 0 && v.is_user)
        else {
            continue;
        };
        let v = probe.id;
        if !present_throughout(trace, v, t + 1 - t_p, t + t_f) {
            continue;
        }
        for bs in 0..trace.n_bs() {
            if true_box(&trace.frames[t], bs, v).is_none() {
                continue;
            }
            let seq = encode_window(trace, bs, t, v, |i| ident[i][bs].get(&v).copied());
            let (gain, beam) =
                optimal_link(&trace.frames[t + t_f], bs, v, &cb).expect("presence checked");
            records.push(Record {
                bs: bs as u16,
                vehicle: v,
                end_frame: t as u32,
                split: Split::Test,
                identified: ident[t][bs].contains_key(&v),
                bits: seq.pack(),
                gain,
                beam: beam as u16,
            });
        }
    }
    Ok(Dataset {
        header: header(trace, records.len()),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::simulate;

    fn small_trace(frames: usize, seed: u64) -> Trace {
        let mut cfg = RunConfig::default();
        cfg.scenario.vehicles = 12;
        cfg.sensing.grid_width = 16;
        cfg.sensing.grid_height = 10;
        cfg.sensing.t_p = 6;
        cfg.sensing.t_f = 4;
        cfg.training.samples = 60;
        simulate(&cfg, seed, frames).unwrap()
    }

    #[test]
    fn records_respect_windows_and_labels() {
        let trace = small_trace(200, 3);
        let ds = build_dataset(&trace).unwrap();
        assert_eq!(ds.records.len(), 60);
        assert_eq!(ds.count(Split::Valid), 6);
        for r in &ds.records {
            let t = r.end_frame as usize;
            assert!(t + 1 >= 6 && t + 4 < 200);
            assert!((r.beam as usize) < 64);
            assert!(true_box(&trace.frames[t], r.bs as usize, r.vehicle).is_some());
            assert_eq!(ds.sequence(r).len(), 6);
            let cb = make_codebook(64, 0.5);
            assert_eq!(
                optimal_link(&trace.frames[t + 4], r.bs as usize, r.vehicle, &cb),
                Some((r.gain, r.beam as usize))
            );
        }
        let last_train = ds
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.end_frame)
            .max()
            .unwrap();
        let first_valid = ds
            .records
            .iter()
            .filter(|r| r.split == Split::Valid)
            .map(|r| r.end_frame)
            .min()
            .unwrap();
        assert!(last_train <= first_valid);
    }

    #[test]
    fn short_lived_vehicle_yields_nothing() {
        // With a 200-frame window requirement nothing in a 150-frame trace qualifies.
        let mut trace = small_trace(150, 4);
        trace.config.sensing.t_p = 140;
        trace.config.sensing.t_f = 10;
        let ds = build_dataset(&trace).unwrap();
        assert!(ds.records.iter().all(|r| r.end_frame == 139));
        trace.config.sensing.t_f = 11;
        assert!(matches!(
            build_dataset(&trace),
            Err(ScenarioError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn file_round_trip_is_byte_stable() {
        let trace = small_trace(120, 5);
        let ds = build_dataset(&trace).unwrap();
        let mut a = Vec::new();
        ds.write(&mut a).unwrap();
        let back = Dataset::read(std::io::Cursor::new(&a)).unwrap();
        assert_eq!(back, ds);
        let mut b = Vec::new();
        build_dataset(&trace).unwrap().write(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(Dataset::read(std::io::Cursor::new(&a[..a.len() - 1])).is_err());
    }

    #[test]
    fn test_sets_share_samples_across_user_counts() {
        let trace = small_trace(300, 6);
        let one = build_test_set(&trace, 1, 10).unwrap();
        let three = build_test_set(&trace, 3, 10).unwrap();
        let key = |d: &Dataset| {
            d.records
                .iter()
                .map(|r| (r.bs, r.vehicle, r.end_frame, r.beam))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&one), key(&three));
        assert!(one.records.iter().all(|r| r.split == Split::Test));
    }
}
