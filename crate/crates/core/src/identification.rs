//! BSM-to-box user identification, IoU tracking and the combined
//! identify-then-track state kept by each base station.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    camera_to_pixel, iou, world_to_camera, BoundingBox, Bsm, CameraRig, GeometryError,
};
use crate::rng::{stream, TAG_IDENTIFY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedBsm {
    pub pixel: (f64, f64),
    /// Distance from the camera to the reported position.
    pub range: f64,
    pub physical_height: f64,
    pub user_id: u32,
}

pub fn project_bsm(bsm: &Bsm, rig: &CameraRig) -> Result<ProjectedBsm, GeometryError> {
    let pc = world_to_camera(bsm.position, rig);
    let pixel = camera_to_pixel(pc, rig)?;
    Ok(ProjectedBsm {
        pixel,
        range: pc.norm(),
        physical_height: bsm.height,
        user_id: bsm.user_id,
    })
}

/// Pixel-distance threshold of the first matching step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Gamma1 {
    /// Width plus height of the candidate box.
    BoxSize,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub gamma1: Gamma1,
    /// Range tolerance of the second step, meters.
    pub gamma2: f64,
    /// Disable to get the pixel-distance-only matcher.
    pub use_range_check: bool,
    pub focal: f64,
}

impl MatchParams {
    pub fn two_step(gamma2: f64, focal: f64) -> Self {
        Self {
            gamma1: Gamma1::BoxSize,
            gamma2,
            use_range_check: true,
            focal,
        }
    }

    pub fn pixel_only(focal: f64) -> Self {
        Self {
            gamma1: Gamma1::BoxSize,
            gamma2: f64::INFINITY,
            use_range_check: false,
            focal,
        }
    }
}

/// Matches BSMs to boxes. Returns user id -> box index.
///
/// Every (BSM, box) pair passing both checks is a candidate; candidates are
/// accepted greedily by pixel distance, then range residual, then a seeded
/// random BSM order. Each box and each user is used at most once.
pub fn identify_users<R: Rng + ?Sized>(
    boxes: &[BoundingBox],
    bsms: &[ProjectedBsm],
    params: &MatchParams,
    rng: &mut R,
) -> BTreeMap<u32, usize> {
    assert!(params.gamma2 > 0.0, "gamma2 must be positive");
    let mut rank: Vec<usize> = (0..bsms.len()).collect();
    rank.shuffle(rng);
    let mut order = vec![0usize; bsms.len()];
    for (r, &i) in rank.iter().enumerate() {
        order[i] = r;
    }

    let mut cands = Vec::new();
    for (i, m) in bsms.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            let d1 = (b.center.0 - m.pixel.0).abs() + (b.center.1 - m.pixel.1).abs();
            let g1 = match params.gamma1 {
                Gamma1::BoxSize => b.width + b.height,
                Gamma1::Fixed(g) => g,
            };
            if !(d1 < g1) {
                continue;
            }
            let residual = (m.physical_height * params.focal / b.height - m.range).abs();
            if params.use_range_check && !(residual < params.gamma2) {
                continue;
            }
            let residual = if params.use_range_check {
                residual
            } else {
                0.0
            };
            cands.push((d1, residual, order[i], j, i));
        }
    }
    cands.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });

    let mut used_box = vec![false; boxes.len()];
    let mut out = BTreeMap::new();
    for (_, _, _, j, i) in cands {
        let user = bsms[i].user_id;
        if used_box[j] || out.contains_key(&user) {
            continue;
        }
        used_box[j] = true;
        out.insert(user, j);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub last_box: BoundingBox,
    /// Frames since the last matched detection.
    pub age: usize,
    pub bound_user: Option<u32>,
    /// Index of the detection matched in the current frame.
    pub box_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerParams {
    pub iou_threshold: f64,
    pub max_age: usize,
}

/// Greedy highest-IoU-first association. Ties prefer the lower box index,
/// then the lower track index.
pub fn associate_tracks(
    prev: &[Track],
    boxes: &[BoundingBox],
    params: &TrackerParams,
    next_id: &mut u64,
) -> Vec<Track> {
    let mut pairs = Vec::new();
    for (ti, t) in prev.iter().enumerate() {
        for (bj, b) in boxes.iter().enumerate() {
            let o = iou(&t.last_box, b);
            if o > params.iou_threshold {
                pairs.push((o, bj, ti));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut track_box = vec![None; prev.len()];
    let mut box_taken = vec![false; boxes.len()];
    for (_, bj, ti) in pairs {
        if track_box[ti].is_none() && !box_taken[bj] {
            track_box[ti] = Some(bj);
            box_taken[bj] = true;
        }
    }

    let mut out = Vec::with_capacity(prev.len() + boxes.len());
    for (t, m) in prev.iter().zip(track_box) {
        match m {
            Some(bj) => out.push(Track {
                last_box: boxes[bj],
                age: 0,
                box_index: Some(bj),
                ..t.clone()
            }),
            None if t.age < params.max_age => out.push(Track {
                age: t.age + 1,
                box_index: None,
                ..t.clone()
            }),
            None => {}
        }
    }
    for (bj, b) in boxes.iter().enumerate() {
        if !box_taken[bj] {
            out.push(Track {
                track_id: *next_id,
                last_box: *b,
                age: 0,
                bound_user: None,
                box_index: Some(bj),
            });
            *next_id += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UitParams {
    pub matching: MatchParams,
    pub tracker: TrackerParams,
}

/// Per-BS identification and tracking state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmsUit {
    pub tracks: Vec<Track>,
    next_id: u64,
    rig: CameraRig,
    params: UitParams,
    seed: u64,
    bs: u64,
}

impl OmsUit {
    pub fn new(rig: CameraRig, params: UitParams, seed: u64, bs: usize) -> Self {
        Self {
            tracks: Vec::new(),
            next_id: 0,
            rig,
            params,
            seed,
            bs: bs as u64,
        }
    }

    /// Advances one frame. Returns user id -> index into `boxes`.
    pub fn step(
        &mut self,
        frame: u64,
        boxes: &[BoundingBox],
        bsms: &[Bsm],
    ) -> BTreeMap<u32, usize> {
        self.tracks =
            associate_tracks(&self.tracks, boxes, &self.params.tracker, &mut self.next_id);
        if !bsms.is_empty() {
            let projected: Vec<ProjectedBsm> = bsms
                .iter()
                .filter_map(|b| project_bsm(b, &self.rig).ok())
                .collect();
            let mut rng = stream(self.seed, &[TAG_IDENTIFY, frame, self.bs]);
            let matched = identify_users(boxes, &projected, &self.params.matching, &mut rng);
            for b in bsms {
                // A fresh report overrides whatever the user was bound to before.
                for t in self
                    .tracks
                    .iter_mut()
                    .filter(|t| t.bound_user == Some(b.user_id))
                {
                    t.bound_user = None;
                }
            }
            for (&user, &j) in &matched {
                if let Some(t) = self.tracks.iter_mut().find(|t| t.box_index == Some(j)) {
                    t.bound_user = Some(user);
                }
            }
        }
        self.current()
    }

    /// Users whose bound track was matched this frame.
    pub fn current(&self) -> BTreeMap<u32, usize> {
        self.tracks
            .iter()
            .filter_map(|t| Some((t.bound_user?, t.box_index?)))
            .collect()
    }
}
