//! Crossroad traffic engine: lanes, kinematics, synthetic detections, BSMs
//! and per-frame propagation paths.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    assemble_channel, synthesize_paths, ChannelError, ChannelVector, PathParams, PropagationConfig,
    PropagationScene, RadioSite, Wall, WallAxis,
};
use crate::config::{ConfigError, RunConfig, ScenarioConfig};
use crate::geometry::{
    camera_to_pixel, world_to_camera, Aabb, BoundingBox, Bsm, CameraRig, GeometryError, Vec3,
    WorldPose,
};
use crate::rng::{stream, TAG_BSM, TAG_CHANNEL, TAG_DETECT, TAG_SPAWN};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("insufficient history: need {needed} frames, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

/// Four straight lanes, right-hand traffic. Lanes 0/1 run along x, 2/3 along y.
pub const LANES: usize = 4;

fn lane_heading(lane: u8) -> f64 {
    match lane {
        0 => 0.0,
        1 => PI,
        2 => FRAC_PI_2,
        _ => -FRAC_PI_2,
    }
}

fn lane_axis(lane: u8) -> u8 {
    lane / 2
}

/// Ground point of lane coordinate `s` (distance along travel direction from the center).
fn lane_point(cfg: &ScenarioConfig, lane: u8, s: f64) -> Vec3 {
    let (cx, cy, o) = (cfg.center[0], cfg.center[1], cfg.lane_offset);
    match lane {
        0 => Vec3::new(cx + s, cy - o, 0.0),
        1 => Vec3::new(cx - s, cy + o, 0.0),
        2 => Vec3::new(cx + o, cy + s, 0.0),
        _ => Vec3::new(cx - o, cy - s, 0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSize {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    /// Unique over the whole run; a respawned vehicle gets a fresh id.
    pub id: u32,
    /// Persistent slot; users occupy the low slots.
    pub slot: u32,
    pub class: u16,
    pub pose: WorldPose,
    pub speed: f64,
    pub desired_speed: f64,
    pub size: VehicleSize,
    pub lane: u8,
    /// Position of the body center along the lane.
    pub s: f64,
    pub is_user: bool,
}

impl Vehicle {
    pub fn roof_center(&self) -> Vec3 {
        self.pose.position + Vec3::new(0.0, 0.0, self.size.height)
    }

    pub fn antenna(&self, above_roof: f64) -> Vec3 {
        self.roof_center() + Vec3::new(0.0, 0.0, above_roof)
    }

    pub fn body(&self) -> Aabb {
        let (hl, hw) = (self.size.length / 2.0, self.size.width / 2.0);
        let (dx, dy) = if lane_axis(self.lane) == 0 {
            (hl, hw)
        } else {
            (hw, hl)
        };
        let p = self.pose.position;
        Aabb::new(
            Vec3::new(p.x - dx, p.y - dy, 0.0),
            Vec3::new(p.x + dx, p.y + dy, self.size.height),
        )
    }

    fn rear(&self) -> f64 {
        self.s - self.size.length / 2.0
    }

    fn front(&self) -> f64 {
        self.s + self.size.length / 2.0
    }
}

/// Static part of the scene: camera rigs, radio sites and buildings.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub rigs: Vec<CameraRig>,
    pub sites: Vec<RadioSite>,
    pub buildings: Vec<Aabb>,
    pub walls: Vec<Wall>,
}

impl World {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        let mut rigs = Vec::new();
        let mut sites = Vec::new();
        for cam in &cfg.cameras {
            let p = Vec3::new(cam.position[0], cam.position[1], cam.position[2]);
            let rig = CameraRig::new(
                p,
                cam.yaw_deg.to_radians(),
                cam.pitch_deg.to_radians(),
                cfg.image_width,
                cfg.image_height,
                cfg.fov_deg.to_radians(),
            )?;
            let a = rig.azimuth;
            let fwd = Vec3::new(a.cos(), -a.sin(), 0.0);
            let left = Vec3::new(a.sin(), a.cos(), 0.0);
            let off = cfg.array_axis_offset_deg.to_radians();
            sites.push(RadioSite {
                position: p + Vec3::new(0.0, 0.0, cfg.antenna_above_camera),
                axis: (fwd * off.cos() - left * off.sin()).normalized(),
                facing: Vec3::new(fwd.x, fwd.y, 0.0).normalized(),
                half_sector: cfg.sector_deg.to_radians() / 2.0,
            });
            rigs.push(rig);
        }
        let (cx, cy) = (cfg.center[0], cfg.center[1]);
        let (a, b, h) = (cfg.building_inner, cfg.building_outer, cfg.building_height);
        let mut buildings = Vec::new();
        let mut walls = Vec::new();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                let xs = (cx + sx * a, cx + sx * b);
                let ys = (cy + sy * a, cy + sy * b);
                buildings.push(Aabb::new(
                    Vec3::new(xs.0, ys.0, 0.0),
                    Vec3::new(xs.1, ys.1, h),
                ));
                walls.push(Wall {
                    axis: WallAxis::X,
                    offset: xs.0,
                    facing: -sx,
                    span: (ys.0.min(ys.1), ys.0.max(ys.1)),
                    height: h,
                });
                walls.push(Wall {
                    axis: WallAxis::Y,
                    offset: ys.0,
                    facing: -sy,
                    span: (xs.0.min(xs.1), xs.0.max(xs.1)),
                    height: h,
                });
            }
        }
        Ok(Self {
            rigs,
            sites,
            buildings,
            walls,
        })
    }

    pub fn n_bs(&self) -> usize {
        self.rigs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Pending {
    slot: u32,
    is_user: bool,
    lane: u8,
    class: u16,
    desired_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioState {
    pub frame: u64,
    pub vehicles: Vec<Vehicle>,
    pending: Vec<Pending>,
    next_id: u32,
    respawns: u64,
    seed: u64,
}

fn draw_kind<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> (u8, u16, f64) {
    let weights = WeightedIndex::new(cfg.vehicle_classes.iter().map(|c| c.weight))
        .expect("validated weights");
    let lane = rng.gen_range(0..LANES as u8);
    let class = weights.sample(rng) as u16;
    let (lo, hi) = (cfg.min_speed_kmh / 3.6, cfg.max_speed_kmh / 3.6);
    let speed = if hi > lo { rng.gen_range(lo..=hi) } else { hi };
    (lane, class, speed)
}

fn make_vehicle(
    cfg: &ScenarioConfig,
    id: u32,
    slot: u32,
    is_user: bool,
    lane: u8,
    class: u16,
    speed: f64,
    s: f64,
) -> Vehicle {
    let c = &cfg.vehicle_classes[class as usize];
    Vehicle {
        id,
        slot,
        class,
        pose: WorldPose::new(lane_point(cfg, lane, s), lane_heading(lane)),
        speed,
        desired_speed: speed,
        size: VehicleSize {
            length: c.length,
            width: c.width,
            height: c.height,
        },
        lane,
        s,
        is_user,
    }
}

/// Initial traffic: vehicles scattered over the lanes outside the junction.
pub fn spawn_traffic(cfg: &ScenarioConfig, seed: u64) -> Result<ScenarioState, ScenarioError> {
    let mut rng = stream(seed, &[TAG_SPAWN, u64::MAX]);
    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(cfg.vehicles);
    let j = cfg.junction_half_width;
    for slot in 0..cfg.vehicles as u32 {
        let mut placed = None;
        for _ in 0..1000 {
            let (lane, class, speed) = draw_kind(cfg, &mut rng);
            let len = cfg.vehicle_classes[class as usize].length;
            let lo = -cfg.arm_length + len / 2.0;
            let hi = cfg.arm_length - len / 2.0;
            if hi <= lo {
                continue;
            }
            let s = rng.gen_range(lo..hi);
            let (rear, front) = (s - len / 2.0, s + len / 2.0);
            if front > -j - 1.0 && rear < j {
                continue;
            }
            let clear = vehicles
                .iter()
                .filter(|v| v.lane == lane)
                .all(|v| front + cfg.min_gap <= v.rear() || v.front() + cfg.min_gap <= rear);
            if clear {
                placed = Some((lane, class, speed, s));
                break;
            }
        }
        let Some((lane, class, speed, s)) = placed else {
            return Err(ConfigError::Invalid {
                field: "scenario.vehicles".into(),
                reason: format!("could not place vehicle {slot} without overlapping others"),
            }
            .into());
        };
        vehicles.push(make_vehicle(
            cfg,
            slot,
            slot,
            (slot as usize) < cfg.users,
            lane,
            class,
            speed,
            s,
        ));
    }
    Ok(ScenarioState {
        frame: 0,
        next_id: cfg.vehicles as u32,
        vehicles,
        pending: Vec::new(),
        respawns: 0,
        seed,
    })
}

fn junction_held_by(vehicles: &[Vehicle], axis: u8, j: f64) -> bool {
    vehicles
        .iter()
        .any(|v| lane_axis(v.lane) == axis && v.front() > -j && v.rear() < j)
}

/// Advances every vehicle by one frame interval.
pub fn step(cfg: &ScenarioConfig, state: &ScenarioState) -> ScenarioState {
    let mut next = state.clone();
    let dt = cfg.frame_interval;
    let j = cfg.junction_half_width;
    for lane in 0..LANES as u8 {
        let mut order: Vec<usize> = (0..next.vehicles.len())
            .filter(|&i| next.vehicles[i].lane == lane)
            .collect();
        order.sort_by(|&a, &b| next.vehicles[b].s.total_cmp(&next.vehicles[a].s));
        let mut leader_rear = f64::INFINITY;
        for i in order {
            let v = &next.vehicles[i];
            let front = v.front();
            let mut gap = leader_rear - front;
            if front <= -j && junction_held_by(&next.vehicles, 1 - lane_axis(lane), j) {
                gap = gap.min(-j - front);
            }
            let safe = ((gap - cfg.min_gap) / cfg.headway.max(dt)).max(0.0);
            let target = v.desired_speed.min(safe);
            let mut speed = target.clamp(
                (v.speed - cfg.decel * dt).max(0.0),
                v.speed + cfg.accel * dt,
            );
            // Hard stop short of the obstacle regardless of the braking limit.
            speed = speed.min(((gap - 0.1) / dt).max(0.0));
            let v = &mut next.vehicles[i];
            v.speed = speed;
            v.s += speed * dt;
            v.pose = WorldPose::new(lane_point(cfg, lane, v.s), lane_heading(lane));
            leader_rear = v.rear();
        }
    }

    let mut kept = Vec::with_capacity(next.vehicles.len());
    for v in next.vehicles.drain(..) {
        if v.rear() > cfg.arm_length {
            let mut rng = stream(next.seed, &[TAG_SPAWN, next.respawns]);
            next.respawns += 1;
            let (lane, class, desired_speed) = draw_kind(cfg, &mut rng);
            next.pending.push(Pending {
                slot: v.slot,
                is_user: v.is_user,
                lane,
                class,
                desired_speed,
            });
        } else {
            kept.push(v);
        }
    }
    next.vehicles = kept;

    let mut waiting = Vec::new();
    for p in std::mem::take(&mut next.pending) {
        let len = cfg.vehicle_classes[p.class as usize].length;
        let s = -cfg.arm_length + len / 2.0;
        let free = next
            .vehicles
            .iter()
            .filter(|v| v.lane == p.lane)
            .all(|v| v.rear() >= s + len / 2.0 + cfg.min_gap);
        if free {
            let mut v = make_vehicle(
                cfg,
                next.next_id,
                p.slot,
                p.is_user,
                p.lane,
                p.class,
                p.desired_speed,
                s,
            );
            // Enter no faster than the vehicle ahead allows.
            let ahead = next
                .vehicles
                .iter()
                .filter(|o| o.lane == p.lane)
                .map(|o| o.rear())
                .fold(f64::INFINITY, f64::min);
            v.speed = v
                .desired_speed
                .min(((ahead - v.front() - cfg.min_gap) / cfg.headway.max(dt)).max(0.0));
            next.next_id += 1;
            next.vehicles.push(v);
        } else {
            waiting.push(p);
        }
    }
    next.pending = waiting;
    next.vehicles.sort_by_key(|v| v.id);
    next.frame += 1;
    next
}

/// One synthetic detection with its hidden ground-truth vehicle id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub vehicle_id: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameObservation {
    pub frame: u64,
    pub per_bs: Vec<Vec<Detection>>,
}

impl FrameObservation {
    pub fn boxes(&self, bs: usize) -> Vec<BoundingBox> {
        self.per_bs[bs].iter().map(|d| d.bbox).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionNoise {
    pub sigma_px: f64,
    pub size_jitter: f64,
    pub occlusion_threshold: f64,
}

impl DetectionNoise {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            sigma_px: cfg.sigma_px,
            size_jitter: cfg.size_jitter,
            occlusion_threshold: cfg.occlusion_threshold,
        }
    }

    pub fn noiseless(occlusion_threshold: f64) -> Self {
        Self {
            sigma_px: 0.0,
            size_jitter: 0.0,
            occlusion_threshold,
        }
    }
}

/// Pixel box of a vehicle: centered on its projected roof center, sized by
/// its angular extent (height and line-of-sight-perpendicular width over range).
pub fn vehicle_box(v: &Vehicle, rig: &CameraRig) -> Option<(BoundingBox, f64)> {
    let roof = v.roof_center();
    let pc = world_to_camera(roof, rig);
    let pixel = camera_to_pixel(pc, rig).ok()?;
    let range = pc.norm();
    let los = roof - rig.position;
    let los_h = Vec3::new(los.x, los.y, 0.0).normalized();
    let dir = v.pose.direction();
    let cos_phi = dir.dot(los_h).abs();
    let sin_phi = (dir.x * los_h.y - dir.y * los_h.x).abs();
    let width = v.size.length * sin_phi + v.size.width * cos_phi;
    let bbox = BoundingBox {
        center: pixel,
        width: rig.focal * width / range,
        height: rig.focal * v.size.height / range,
    };
    Some((bbox, range))
}

/// Area of `target` covered by the union of `others`.
fn covered_area(target: &BoundingBox, others: &[BoundingBox]) -> f64 {
    let clipped: Vec<BoundingBox> = others.iter().filter_map(|o| o.clipped_to(target)).collect();
    if clipped.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = clipped
        .iter()
        .flat_map(|b| [b.min().0, b.max().0])
        .collect();
    let mut ys: Vec<f64> = clipped
        .iter()
        .flat_map(|b| [b.min().1, b.max().1])
        .collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut area = 0.0;
    for wx in xs.windows(2) {
        for wy in ys.windows(2) {
            let (mx, my) = ((wx[0] + wx[1]) / 2.0, (wy[0] + wy[1]) / 2.0);
            let hit = clipped.iter().any(|b| {
                let (lo, hi) = (b.min(), b.max());
                mx >= lo.0 && mx <= hi.0 && my >= lo.1 && my <= hi.1
            });
            if hit {
                area += (wx[1] - wx[0]) * (wy[1] - wy[0]);
            }
        }
    }
    area
}

/// Synthetic detector for one camera.
pub fn render_camera<R: Rng>(
    vehicles: &[Vehicle],
    rig: &CameraRig,
    noise: &DetectionNoise,
    rng: &mut R,
) -> Vec<Detection> {
    let mut seen: Vec<(usize, BoundingBox, f64)> = vehicles
        .iter()
        .enumerate()
        .filter_map(|(i, v)| vehicle_box(v, rig).map(|(b, r)| (i, b, r)))
        .collect();
    seen.sort_by(|a, b| {
        a.2.total_cmp(&b.2)
            .then(vehicles[a.0].id.cmp(&vehicles[b.0].id))
    });
    let mut visible = vec![false; vehicles.len()];
    let mut nearer: Vec<BoundingBox> = Vec::new();
    let mut nominal: Vec<Option<BoundingBox>> = vec![None; vehicles.len()];
    for (i, b, _) in &seen {
        let occluded =
            b.area() > 0.0 && covered_area(b, &nearer) >= noise.occlusion_threshold * b.area();
        if rig.in_image(b.center) && !occluded {
            visible[*i] = true;
            nominal[*i] = Some(*b);
        }
        nearer.push(*b);
    }
    let bounds = rig.image_bounds();
    let center_noise = Normal::new(0.0, noise.sigma_px.max(0.0)).expect("finite sigma");
    let mut out = Vec::new();
    for (i, v) in vehicles.iter().enumerate() {
        // Fixed draw count per vehicle keeps other vehicles' noise stable.
        let (du, dv) = (center_noise.sample(rng), center_noise.sample(rng));
        let (sw, sh): (f64, f64) = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
        let Some(b) = nominal[i] else { continue };
        let b = if noise.sigma_px > 0.0 || noise.size_jitter > 0.0 {
            BoundingBox {
                center: (b.center.0 + du, b.center.1 + dv),
                width: b.width * (1.0 + noise.size_jitter * sw),
                height: b.height * (1.0 + noise.size_jitter * sh),
            }
        } else {
            b
        };
        if let Some(c) = b.clipped_to(&bounds) {
            out.push(Detection {
                bbox: c,
                vehicle_id: v.id,
            });
        }
    }
    out
}

pub fn render_detections(
    state: &ScenarioState,
    world: &World,
    noise: &DetectionNoise,
) -> FrameObservation {
    let per_bs = world
        .rigs
        .iter()
        .enumerate()
        .map(|(b, rig)| {
            let mut rng = stream(state.seed, &[TAG_DETECT, state.frame, b as u64]);
            render_camera(&state.vehicles, rig, noise, &mut rng)
        })
        .collect();
    FrameObservation {
        frame: state.frame,
        per_bs,
    }
}

/// BSMs of all user vehicles on frames where `frame % interval == 0`.
pub fn emit_bsm(state: &ScenarioState, interval: usize, jitter: f64) -> Vec<Bsm> {
    emit_bsm_for(
        &state.vehicles,
        state.frame,
        state.seed,
        interval,
        jitter,
        |v| v.is_user,
    )
}

/// BSMs of the vehicles selected by `is_user`.
pub fn emit_bsm_for(
    vehicles: &[Vehicle],
    frame: u64,
    seed: u64,
    interval: usize,
    jitter: f64,
    is_user: impl Fn(&Vehicle) -> bool,
) -> Vec<Bsm> {
    assert!(interval >= 1, "BSM interval must be at least one frame");
    if frame % interval as u64 != 0 {
        return Vec::new();
    }
    let noise = Normal::new(0.0, jitter.max(0.0)).expect("finite jitter");
    vehicles
        .iter()
        .filter(|v| is_user(v))
        .map(|v| {
            let mut rng = stream(seed, &[TAG_BSM, frame, v.id as u64]);
            let offset = Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), 0.0);
            Bsm {
                user_id: v.id,
                position: v.roof_center() + offset,
                width: v.size.width,
                height: v.size.height,
            }
        })
        .collect()
}

pub fn propagation_config(cfg: &RunConfig) -> PropagationConfig {
    PropagationConfig {
        wavelength: cfg.wavelength(),
        blockage_db: cfg.radio.blockage_db,
        reflection_factor: cfg.radio.reflection_factor,
        max_paths: cfg.radio.max_paths,
        amplitude_floor: cfg.radio.amplitude_floor,
        front_to_back_db: cfg.radio.front_to_back_db,
    }
}

/// Paths from every BS to every vehicle, `[bs][vehicle index]`; empty when no path survives.
pub fn frame_paths(
    cfg: &RunConfig,
    state: &ScenarioState,
    world: &World,
) -> Vec<Vec<Vec<PathParams>>> {
    let prop = propagation_config(cfg);
    let blockers: Vec<(u32, Aabb)> = state.vehicles.iter().map(|v| (v.id, v.body())).collect();
    let scene = PropagationScene {
        blockers: &blockers,
        buildings: &world.buildings,
        walls: &world.walls,
    };
    world
        .sites
        .iter()
        .enumerate()
        .map(|(b, site)| {
            state
                .vehicles
                .iter()
                .map(|v| {
                    let mut rng = stream(
                        state.seed,
                        &[TAG_CHANNEL, state.frame, b as u64, v.id as u64],
                    );
                    let target = v.antenna(cfg.scenario.antenna_above_roof);
                    match synthesize_paths(site, target, Some(v.id), &scene, &prop, &mut rng) {
                        Ok(p) => p,
                        Err(ChannelError::NoPath) => Vec::new(),
                        Err(e) => panic!("path synthesis failed: {e}"),
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub frame: u64,
    pub vehicles: Vec<Vehicle>,
    pub observation: FrameObservation,
    /// `[bs][vehicle index]`, aligned with `vehicles`.
    pub paths: Vec<Vec<Vec<PathParams>>>,
}

impl TraceFrame {
    pub fn vehicle_index(&self, id: u32) -> Option<usize> {
        self.vehicles.binary_search_by_key(&id, |v| v.id).ok()
    }

    pub fn channel(
        &self,
        bs: usize,
        index: usize,
        n_antennas: usize,
        spacing: f64,
    ) -> ChannelVector {
        let paths = &self.paths[bs][index];
        if paths.is_empty() {
            ChannelVector::zeros(n_antennas)
        } else {
            assemble_channel(paths, n_antennas, spacing).expect("non-empty path list")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub seed: u64,
    pub config: RunConfig,
    pub frames: Vec<TraceFrame>,
}

impl Trace {
    pub fn n_bs(&self) -> usize {
        self.config.scenario.cameras.len()
    }

    pub fn world(&self) -> World {
        World::new(&self.config.scenario).expect("trace config was validated")
    }
}

/// Runs the scenario for `frames` frames and records everything downstream needs.
pub fn simulate(cfg: &RunConfig, seed: u64, frames: usize) -> Result<Trace, ScenarioError> {
    cfg.validate()?;
    let world = World::new(&cfg.scenario)?;
    let noise = DetectionNoise::from_config(&cfg.scenario);
    let mut state = spawn_traffic(&cfg.scenario, seed)?;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 {
            state = step(&cfg.scenario, &state);
        }
        out.push(TraceFrame {
            frame: state.frame,
            vehicles: state.vehicles.clone(),
            observation: render_detections(&state, &world, &noise),
            paths: frame_paths(cfg, &state, &world),
        });
    }
    Ok(Trace {
        seed,
        config: cfg.clone(),
        frames: out,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceHeader {
    format: String,
    version: u32,
    seed: u64,
    frames: usize,
    base_stations: usize,
}

const TRACE_FORMAT: &str = "oms-trace";

/// One JSON header line, then the bincode-encoded trace.
pub fn write_trace<W: Write>(trace: &Trace, mut w: W) -> Result<(), ScenarioError> {
    let header = TraceHeader {
        format: TRACE_FORMAT.into(),
        version: 1,
        seed: trace.seed,
        frames: trace.frames.len(),
        base_stations: trace.n_bs(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| ScenarioError::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    bincode::serialize_into(&mut w, trace).map_err(|e| ScenarioError::Format(e.to_string()))?;
    Ok(())
}

pub fn read_trace<R: BufRead>(mut r: R) -> Result<Trace, ScenarioError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: TraceHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| ScenarioError::Format(format!("trace header: {e}")))?;
    if header.format != TRACE_FORMAT || header.version != 1 {
        return Err(ScenarioError::Format(format!(
            "not a v1 trace: {}",
            header.format
        )));
    }
    let trace: Trace =
        bincode::deserialize_from(r).map_err(|e| ScenarioError::Format(e.to_string()))?;
    if trace.frames.len() != header.frames {
        return Err(ScenarioError::Format(
            "frame count does not match header".into(),
        ));
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_cfg(vehicles: usize) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.scenario.vehicles = vehicles;
        cfg.scenario.users = vehicles.min(4);
        cfg
    }

    fn lone_vehicle(cfg: &ScenarioConfig, lane: u8, s: f64, speed: f64) -> ScenarioState {
        let mut st = spawn_traffic(cfg, 0).unwrap();
        st.vehicles = vec![make_vehicle(cfg, 0, 0, true, lane, 0, speed, s)];
        st
    }

    #[test]
    fn spawn_is_deterministic_and_sized() {
        let cfg = small_cfg(30);
        let a = spawn_traffic(&cfg.scenario, 3).unwrap();
        let b = spawn_traffic(&cfg.scenario, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vehicles.len(), 30);
        assert_eq!(a.vehicles.iter().filter(|v| v.is_user).count(), 4);
        let empty = spawn_traffic(&small_cfg(0).scenario, 3).unwrap();
        assert!(empty.vehicles.is_empty());
    }

    #[test]
    fn overcrowded_spawn_is_a_config_error() {
        let mut cfg = small_cfg(10);
        cfg.scenario.arm_length = 8.0;
        assert!(matches!(
            spawn_traffic(&cfg.scenario, 1),
            Err(ScenarioError::Config(_))
        ));
    }

    #[test]
    fn free_vehicle_moves_speed_times_dt() {
        let cfg = RunConfig::default().scenario;
        let st = lone_vehicle(&cfg, 0, -40.0, 10.0);
        let n = step(&cfg, &st);
        assert_relative_eq!(n.vehicles[0].s, -40.0 + 0.2, epsilon = 1e-12);
        assert_relative_eq!(
            n.vehicles[0].pose.position.x,
            cfg.center[0] - 40.0 + 0.2,
            epsilon = 1e-12
        );
        assert_eq!(n.frame, 1);
    }

    #[test]
    fn stationary_vehicle_stays() {
        let cfg = RunConfig::default().scenario;
        let mut st = lone_vehicle(&cfg, 2, 20.0, 0.0);
        st.vehicles[0].desired_speed = 0.0;
        let n = step(&cfg, &st);
        assert_eq!(n.vehicles[0].pose, st.vehicles[0].pose);
    }

    #[test]
    fn traffic_never_overlaps_and_respects_speed_limit() {
        let cfg = small_cfg(30);
        let mut st = spawn_traffic(&cfg.scenario, 9).unwrap();
        let j = cfg.scenario.junction_half_width;
        for _ in 0..3000 {
            st = step(&cfg.scenario, &st);
            for v in &st.vehicles {
                assert!(v.speed >= 0.0 && v.speed <= 40.0 / 3.6 + 1e-9);
            }
            for (i, a) in st.vehicles.iter().enumerate() {
                for b in &st.vehicles[i + 1..] {
                    let (ba, bb) = (a.body(), b.body());
                    let overlap = ba.min.x < bb.max.x
                        && bb.min.x < ba.max.x
                        && ba.min.y < bb.max.y
                        && bb.min.y < ba.max.y;
                    assert!(
                        !overlap,
                        "vehicles {} and {} overlap at frame {}",
                        a.id, b.id, st.frame
                    );
                }
            }
            assert!(
                !(junction_held_by(&st.vehicles, 0, j) && junction_held_by(&st.vehicles, 1, j))
            );
        }
        assert_eq!(st.vehicles.len() + st.pending.len(), 30);
        assert!(st.next_id > 30, "no vehicle ever left the map");
    }

    #[test]
    fn lone_vehicle_box_centered_on_roof_projection() {
        let cfg = RunConfig::default();
        let world = World::new(&cfg.scenario).unwrap();
        let st = lone_vehicle(&cfg.scenario, 0, 5.0, 0.0);
        let obs = render_detections(&st, &world, &DetectionNoise::noiseless(0.9));
        let rig = &world.rigs[0];
        let d = obs.per_bs[0][0];
        let want =
            camera_to_pixel(world_to_camera(st.vehicles[0].roof_center(), rig), rig).unwrap();
        assert_eq!(d.bbox.center, want);
        assert_eq!(d.vehicle_id, 0);
        // Noiseless height-derived range equals the true range to the roof center.
        let r = world_to_camera(st.vehicles[0].roof_center(), rig).norm();
        let est = crate::geometry::estimate_distance_from_height(
            &d.bbox,
            st.vehicles[0].size.height,
            rig,
        );
        assert_relative_eq!(est, r, epsilon = 1e-9);
    }

    #[test]
    fn vehicle_behind_camera_not_detected() {
        let cfg = RunConfig::default();
        let world = World::new(&cfg.scenario).unwrap();
        // Lane 1 far west passes behind camera 0 (which faces the center from the north-west).
        let st = lone_vehicle(&cfg.scenario, 1, 55.0, 0.0);
        let obs = render_detections(&st, &world, &DetectionNoise::noiseless(0.9));
        let pc = world_to_camera(st.vehicles[0].roof_center(), &world.rigs[0]);
        assert!(
            pc.x <= 0.0 || !world.rigs[0].in_image(camera_to_pixel(pc, &world.rigs[0]).unwrap())
        );
        assert!(obs.per_bs[0].is_empty());
    }

    #[test]
    fn rear_vehicle_fully_covered_is_suppressed() {
        let cfg = RunConfig::default();
        let world = World::new(&cfg.scenario).unwrap();
        let rig = world.rigs[0];
        let bus = make_vehicle(&cfg.scenario, 2, 2, false, 0, 2, 0.0, 12.0);
        // A car whose roof center sits on the same ray, 1.5x farther away.
        let ray = bus.roof_center() - rig.position;
        let roof = rig.position + ray * 1.5;
        let mut car = make_vehicle(&cfg.scenario, 1, 1, false, 0, 0, 0.0, 12.0);
        car.pose.position = roof - Vec3::new(0.0, 0.0, car.size.height);
        let (bb, br) = vehicle_box(&bus, &rig).unwrap();
        let (cb, cr) = vehicle_box(&car, &rig).unwrap();
        // Depth-order oracle: the bus is nearer and its box covers the car's.
        assert!(br < cr);
        assert!(bb.intersection_area(&cb) >= 0.9 * cb.area());
        let mut st = spawn_traffic(&cfg.scenario, 0).unwrap();
        st.vehicles = vec![car.clone(), bus];
        let obs = render_detections(&st, &world, &DetectionNoise::noiseless(0.9));
        assert_eq!(obs.per_bs[0].len(), 1);
        assert_eq!(obs.per_bs[0][0].vehicle_id, 2);
        st.vehicles = vec![car];
        assert_eq!(
            render_detections(&st, &world, &DetectionNoise::noiseless(0.9)).per_bs[0].len(),
            1
        );
    }

    #[test]
    fn union_coverage_oracle() {
        let t = BoundingBox::new((5.0, 5.0), 10.0, 10.0).unwrap();
        let left = BoundingBox::from_corners((0.0, 0.0), (6.0, 10.0)).unwrap();
        let right = BoundingBox::from_corners((4.0, 0.0), (10.0, 10.0)).unwrap();
        assert_relative_eq!(covered_area(&t, &[left, right]), 100.0, epsilon = 1e-12);
        assert_relative_eq!(covered_area(&t, &[left]), 60.0, epsilon = 1e-12);
        assert_eq!(covered_area(&t, &[]), 0.0);
    }

    #[test]
    fn bsm_intervals() {
        let cfg = small_cfg(6);
        let mut st = spawn_traffic(&cfg.scenario, 1).unwrap();
        assert_eq!(emit_bsm(&st, 1, 0.0).len(), 4);
        st.frame = 50;
        assert!(emit_bsm(&st, 100, 0.0).is_empty());
        let mut counts = std::collections::BTreeMap::new();
        for f in 0..100 {
            st.frame = f;
            for b in emit_bsm(&st, 10, 0.5) {
                *counts.entry(b.user_id).or_insert(0) += 1;
            }
        }
        assert!(counts.values().all(|&c| c == 10));
    }

    #[test]
    fn simulation_reproducible() {
        let mut cfg = small_cfg(12);
        cfg.frames = 40;
        let a = simulate(&cfg, 5, 40).unwrap();
        let b = simulate(&cfg, 5, 40).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_trace(&a, &mut buf).unwrap();
        let back = read_trace(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back, a);
        for f in &a.frames {
            for dets in &f.observation.per_bs {
                for d in dets {
                    let (lo, hi) = (d.bbox.min(), d.bbox.max());
                    assert!(lo.0 >= 0.0 && lo.1 >= 0.0 && hi.0 <= 1280.0 && hi.1 <= 720.0);
                }
            }
        }
    }
}
