//! Binary encoding maps: two-channel box rasters (user, scatterers) and
//! their time sequences.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BemError {
    #[error("insufficient history: need {needed} frames, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("packed BEM has {got} bytes, expected {expected}")]
    BadLength { expected: usize, got: usize },
}

/// One frame: channel 0 is the user's box, channel 1 everything else.
/// Layout is `[channel][row][column]`, rows following the pixel `v` axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bem {
    pub frame: u64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Bem {
    pub fn zeros(frame: u64, width: usize, height: usize) -> Self {
        Self {
            frame,
            width,
            height,
            data: vec![0; 2 * width * height],
        }
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> u8 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn channel_sum(&self, channel: usize) -> usize {
        let n = self.width * self.height;
        self.data[channel * n..(channel + 1) * n]
            .iter()
            .map(|&b| b as usize)
            .sum()
    }

    fn fill(&mut self, channel: usize, bbox: &BoundingBox, image: (f64, f64)) {
        let (sx, sy) = (image.0 / self.width as f64, image.1 / self.height as f64);
        // A cell is set iff its center lies in [min, max).
        let span = |lo: f64, hi: f64, s: f64, n: usize| {
            let a = (lo / s - 0.5).ceil().clamp(0.0, n as f64) as usize;
            let b = (hi / s - 0.5).ceil().clamp(0.0, n as f64) as usize;
            a..b.max(a)
        };
        let (lo, hi) = (bbox.min(), bbox.max());
        let cols = span(lo.0, hi.0, sx, self.width);
        for row in span(lo.1, hi.1, sy, self.height) {
            let base = (channel * self.height + row) * self.width;
            self.data[base + cols.start..base + cols.end].fill(1);
        }
    }
}

/// Rasterizes `boxes` onto a `grid` (width, height) covering an image of size `image`.
/// The box at `user` goes to channel 0, all others to channel 1.
pub fn encode_frame(
    frame: u64,
    user: Option<usize>,
    boxes: &[BoundingBox],
    grid: (usize, usize),
    image: (f64, f64),
) -> Bem {
    assert!(grid.0 >= 1 && grid.1 >= 1, "grid must be at least 1x1");
    let mut bem = Bem::zeros(frame, grid.0, grid.1);
    for (i, b) in boxes.iter().enumerate() {
        let channel = if Some(i) == user { 0 } else { 1 };
        bem.fill(channel, b, image);
    }
    bem
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BemSequence {
    pub frames: Vec<Bem>,
    pub bs: usize,
    pub user: u32,
    pub end_frame: u64,
}

impl BemSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Network input, `[t][channel][row][column]` as floats.
    pub fn to_input(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.data.iter().map(|&b| b as f64))
            .collect()
    }

    /// LSB-first bit packing of all frames in order.
    pub fn pack(&self) -> Vec<u8> {
        let bits: usize = self.frames.iter().map(|f| f.data.len()).sum();
        let mut out = vec![0u8; bits.div_ceil(8)];
        for (k, &b) in self.frames.iter().flat_map(|f| f.data.iter()).enumerate() {
            out[k / 8] |= (b & 1) << (k % 8);
        }
        out
    }

    pub fn unpack(
        bytes: &[u8],
        t_p: usize,
        grid: (usize, usize),
        bs: usize,
        user: u32,
        end_frame: u64,
    ) -> Result<Self, BemError> {
        let per = 2 * grid.0 * grid.1;
        let expected = (per * t_p).div_ceil(8);
        if bytes.len() != expected {
            return Err(BemError::BadLength {
                expected,
                got: bytes.len(),
            });
        }
        let first = end_frame + 1 - t_p as u64;
        let frames = (0..t_p)
            .map(|t| {
                let data = (0..per)
                    .map(|i| {
                        let k = t * per + i;
                        (bytes[k / 8] >> (k % 8)) & 1
                    })
                    .collect();
                Bem {
                    frame: first + t as u64,
                    width: grid.0,
                    height: grid.1,
                    data,
                }
            })
            .collect();
        Ok(Self {
            frames,
            bs,
            user,
            end_frame,
        })
    }
}

/// The most recent `t_p` frames of `history` (chronological order).
pub fn assemble_sequence(
    history: &[Bem],
    t_p: usize,
    bs: usize,
    user: u32,
) -> Result<BemSequence, BemError> {
    if history.len() < t_p || t_p == 0 {
        return Err(BemError::InsufficientHistory {
            needed: t_p.max(1),
            available: history.len(),
        });
    }
    let frames = history[history.len() - t_p..].to_vec();
    let end_frame = frames.last().map(|f| f.frame).unwrap_or(0);
    Ok(BemSequence {
        frames,
        bs,
        user,
        end_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const IMG: (f64, f64) = (1280.0, 720.0);

    /// Counts cells whose center lies inside any of the boxes, by brute force.
    fn area_oracle(boxes: &[BoundingBox], grid: (usize, usize)) -> usize {
        let mut n = 0;
        for r in 0..grid.1 {
            for c in 0..grid.0 {
                let x = (c as f64 + 0.5) * IMG.0 / grid.0 as f64;
                let y = (r as f64 + 0.5) * IMG.1 / grid.1 as f64;
                if boxes.iter().any(|b| {
                    let (lo, hi) = (b.min(), b.max());
                    x >= lo.0 && x < hi.0 && y >= lo.1 && y < hi.1
                }) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn empty_grid() {
        let b = encode_frame(0, None, &[], (60, 40), IMG);
        assert_eq!(b.channel_sum(0) + b.channel_sum(1), 0);
    }

    #[test]
    fn full_image_user_box() {
        let full = BoundingBox::new((640.0, 360.0), 1280.0, 720.0).unwrap();
        let b = encode_frame(0, Some(0), &[full], (60, 40), IMG);
        assert_eq!(b.channel_sum(0), 2400);
        assert_eq!(b.channel_sum(1), 0);
    }

    #[test]
    fn left_half() {
        let half = BoundingBox::from_corners((0.0, 0.0), (640.0, 720.0)).unwrap();
        let b = encode_frame(0, Some(0), &[half], (60, 40), IMG);
        assert_eq!(b.channel_sum(0), 30 * 40);
        assert_eq!(area_oracle(&[half], (60, 40)), 1200);
        assert!((0..40).all(|r| b.get(0, r, 29) == 1 && b.get(0, r, 30) == 0));
    }

    #[test]
    fn sequence_windows() {
        let hist: Vec<Bem> = (0..25).map(|t| Bem::zeros(t, 4, 3)).collect();
        let s = assemble_sequence(&hist[..20], 20, 0, 1).unwrap();
        assert_eq!(s.frames.first().unwrap().frame, 0);
        let s = assemble_sequence(&hist, 20, 0, 1).unwrap();
        assert_eq!(s.frames.first().unwrap().frame, 5);
        assert_eq!(s.end_frame, 24);
        assert!(s.frames.windows(2).all(|w| w[0].frame < w[1].frame));
        assert_eq!(
            assemble_sequence(&hist[..3], 20, 0, 1),
            Err(BemError::InsufficientHistory {
                needed: 20,
                available: 3
            })
        );
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..1280.0f64, 0.0..720.0f64, 1.0..600.0f64, 1.0..400.0f64)
            .prop_map(|(u, v, w, h)| BoundingBox::new((u, v), w, h).unwrap())
    }

    proptest! {
        #[test]
        fn channel_sums_match_union_area(boxes in proptest::collection::vec(arb_box(), 0..6), user in 0usize..6) {
            let grid = (30, 20);
            let user = (user < boxes.len()).then_some(user);
            let b = encode_frame(0, user, &boxes, grid, IMG);
            let mine: Vec<_> = user.map(|u| vec![boxes[u]]).unwrap_or_default();
            let rest: Vec<_> = boxes.iter().enumerate().filter(|(i, _)| Some(*i) != user).map(|(_, b)| *b).collect();
            prop_assert_eq!(b.channel_sum(0), area_oracle(&mine, grid));
            prop_assert_eq!(b.channel_sum(1), area_oracle(&rest, grid));
            prop_assert!(b.data.iter().all(|&x| x <= 1));
            prop_assert_eq!(encode_frame(0, user, &boxes, grid, IMG), b);
        }

        #[test]
        fn pack_round_trip(boxes in proptest::collection::vec(arb_box(), 0..4), t_p in 1usize..5) {
            let frames: Vec<Bem> = (0..t_p as u64).map(|t| encode_frame(t + 10, Some(0), &boxes, (7, 5), IMG)).collect();
            let s = BemSequence { frames, bs: 2, user: 3, end_frame: 9 + t_p as u64 };
            let back = BemSequence::unpack(&s.pack(), t_p, (7, 5), 2, 3, s.end_frame).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn coarse_encoding_tracks_fine_encoding(b in arb_box().prop_filter("wider than a fine cell", |b| b.width > 11.0 && b.height > 10.0)) {
            // Encode at 120x80, downsample by 2x2 "any", compare with 60x40 encoding:
            // they may differ only on the box boundary (one cell).
            let fine = encode_frame(0, Some(0), &[b], (120, 80), IMG);
            let coarse = encode_frame(0, Some(0), &[b], (60, 40), IMG);
            for r in 0..40 {
                for c in 0..60 {
                    let any = (0..2).any(|dr| (0..2).any(|dc| fine.get(0, 2 * r + dr, 2 * c + dc) == 1));
                    let all = (0..2).all(|dr| (0..2).all(|dc| fine.get(0, 2 * r + dr, 2 * c + dc) == 1));
                    let v = coarse.get(0, r, c) == 1;
                    if all { prop_assert!(v); }
                    if !any { prop_assert!(!v); }
                }
            }
        }
    }
}
