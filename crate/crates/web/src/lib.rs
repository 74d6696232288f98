//! wasm bindings for the static demo page in `www/`.

use oms_core::bem::encode_frame;
use oms_core::channel::{make_codebook, steering_vector, Codebook};
use oms_core::config::RunConfig;
use oms_core::dataset::{optimal_link, true_box};
use oms_core::scenario::{simulate, Trace};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct SiteView {
    x: f64,
    y: f64,
    axis: [f64; 2],
}

#[derive(Serialize)]
struct Serving {
    bs: usize,
    beam: usize,
    gain: f64,
}

#[derive(Serialize)]
struct VehicleView {
    id: u32,
    x: f64,
    y: f64,
    /// Footprint extent along x and y.
    dx: f64,
    dy: f64,
    user: bool,
    serving: Option<Serving>,
}

#[derive(Serialize)]
struct SceneView {
    frame: u64,
    buildings: Vec<[f64; 4]>,
    sites: Vec<SiteView>,
    vehicles: Vec<VehicleView>,
}

/// A short simulated run held in memory for the page to browse.
#[wasm_bindgen]
pub struct Demo {
    trace: Trace,
    codebook: Codebook,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, frames: usize) -> Result<Demo, JsError> {
        let cfg = RunConfig::default();
        let trace =
            simulate(&cfg, seed, frames.max(1)).map_err(|e| JsError::new(&e.to_string()))?;
        let codebook = make_codebook(cfg.radio.n_antennas, cfg.radio.spacing_ratio);
        Ok(Demo { trace, codebook })
    }

    pub fn frames(&self) -> usize {
        self.trace.frames.len()
    }

    pub fn n_bs(&self) -> usize {
        self.trace.n_bs()
    }

    pub fn grid_width(&self) -> usize {
        self.trace.config.sensing.grid_width
    }

    pub fn grid_height(&self) -> usize {
        self.trace.config.sensing.grid_height
    }

    /// Top-down scene as JSON; users carry their best (bs, beam) link.
    pub fn scene(&self, frame: usize) -> String {
        serde_json::to_string(&self.scene_view(frame)).expect("scene serializes")
    }

    /// BEM of `vehicle` seen from `bs`: `[channel][row][col]`, empty if not detected.
    pub fn bem(&self, frame: usize, bs: usize, vehicle: u32) -> Vec<u8> {
        let f = &self.trace.frames[frame.min(self.frames() - 1)];
        if bs >= self.n_bs() {
            return Vec::new();
        }
        let Some(user) = true_box(f, bs, vehicle) else {
            return Vec::new();
        };
        let s = &self.trace.config.scenario;
        let boxes = f.observation.boxes(bs);
        let grid = (self.grid_width(), self.grid_height());
        encode_frame(
            f.frame,
            Some(user),
            &boxes,
            grid,
            (s.image_width as f64, s.image_height as f64),
        )
        .data
    }
}

impl Demo {
    fn scene_view(&self, frame: usize) -> SceneView {
        let f = &self.trace.frames[frame.min(self.frames() - 1)];
        let world = self.trace.world();
        let vehicles = f
            .vehicles
            .iter()
            .map(|v| {
                let body = v.body();
                let serving = v.is_user.then(|| {
                    (0..self.n_bs())
                        .filter_map(|bs| {
                            optimal_link(f, bs, v.id, &self.codebook).map(|(g, b)| (bs, b, g))
                        })
                        .fold(None::<(usize, usize, f64)>, |best, c| match best {
                            Some(b) if b.2 >= c.2 => Some(b),
                            _ => Some(c),
                        })
                        .map(|(bs, beam, gain)| Serving { bs, beam, gain })
                });
                VehicleView {
                    id: v.id,
                    x: v.pose.position.x,
                    y: v.pose.position.y,
                    dx: body.max.x - body.min.x,
                    dy: body.max.y - body.min.y,
                    user: v.is_user,
                    serving: serving.flatten(),
                }
            })
            .collect();
        SceneView {
            frame: f.frame,
            buildings: world
                .buildings
                .iter()
                .map(|b| [b.min.x, b.min.y, b.max.x, b.max.y])
                .collect(),
            sites: world
                .sites
                .iter()
                .map(|s| SiteView {
                    x: s.position.x,
                    y: s.position.y,
                    axis: [s.axis.x, s.axis.y],
                })
                .collect(),
            vehicles,
        }
    }
}

/// Gain of codebook beam `beam` against a unit path at `samples` departure
/// angles spread evenly over [0, pi].
#[wasm_bindgen]
pub fn beam_pattern(
    n_antennas: usize,
    spacing_ratio: f64,
    beam: usize,
    samples: usize,
) -> Vec<f64> {
    if n_antennas == 0 || beam >= n_antennas || samples < 2 {
        return Vec::new();
    }
    let cb = make_codebook(n_antennas, spacing_ratio);
    let f = &cb.beams[beam];
    (0..samples)
        .map(|i| {
            let theta = std::f64::consts::PI * i as f64 / (samples - 1) as f64;
            let a = steering_vector(theta, n_antennas, spacing_ratio);
            a.iter()
                .zip(f)
                .map(|(ak, fk)| ak.conj() * fk)
                .sum::<oms_core::channel::Complex64>()
                .norm_sqr()
        })
        .collect()
}
