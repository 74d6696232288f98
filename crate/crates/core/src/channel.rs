//! Geometric multipath channels for a base-station ULA, the analog codebook,
//! beamforming gains and achievable rates.

use std::f64::consts::PI;

pub use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("channel needs at least one path")]
    EmptyPathList,
    #[error("no propagation path above the amplitude floor")]
    NoPath,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    Los,
    Reflected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub gain: Complex64,
    /// Angle between the array axis and the departure direction, radians.
    pub aod: f64,
    pub kind: PathKind,
}

/// Per-antenna complex gains between one BS array and one vehicle antenna.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelVector(pub Vec<Complex64>);

impl ChannelVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        Self(self.0.iter().map(|c| c * s).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub noise_power: f64,
    pub carrier_wavelength: f64,
}

impl LinkBudget {
    pub fn new(noise_power: f64, carrier_wavelength: f64) -> Result<Self, ChannelError> {
        if !(noise_power > 0.0 && noise_power.is_finite()) {
            return Err(ChannelError::ConstraintViolation(format!(
                "noise power must be positive, got {noise_power}"
            )));
        }
        if !(carrier_wavelength > 0.0) {
            return Err(ChannelError::ConstraintViolation(format!(
                "wavelength must be positive, got {carrier_wavelength}"
            )));
        }
        Ok(Self {
            noise_power,
            carrier_wavelength,
        })
    }
}

/// Array response `exp(j 2 pi (d/lambda) k cos(aod))`, `k = 0..n`.
pub fn steering_vector(aod: f64, n_antennas: usize, spacing_ratio: f64) -> Vec<Complex64> {
    let phase = 2.0 * PI * spacing_ratio * aod.cos();
    (0..n_antennas)
        .map(|k| Complex64::from_polar(1.0, phase * k as f64))
        .collect()
}

/// `h = sqrt(1/L) * sum_l gain_l * a(aod_l)`.
pub fn assemble_channel(
    paths: &[PathParams],
    n_antennas: usize,
    spacing_ratio: f64,
) -> Result<ChannelVector, ChannelError> {
    if paths.is_empty() {
        return Err(ChannelError::EmptyPathList);
    }
    let mut h = vec![Complex64::new(0.0, 0.0); n_antennas];
    for p in paths {
        for (hk, ak) in h
            .iter_mut()
            .zip(steering_vector(p.aod, n_antennas, spacing_ratio))
        {
            *hk += p.gain * ak;
        }
    }
    let norm = (1.0 / paths.len() as f64).sqrt();
    h.iter_mut().for_each(|c| *c *= norm);
    Ok(ChannelVector(h))
}

/// The analog codebook: `n_antennas` unit-norm beams.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub beams: Vec<Vec<Complex64>>,
    pub spacing_ratio: f64,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn n_antennas(&self) -> usize {
        self.beams.first().map_or(0, Vec::len)
    }

    /// Gain of every beam for one channel.
    pub fn gains(&self, h: &ChannelVector) -> Result<Vec<f64>, ChannelError> {
        self.beams.iter().map(|f| beam_gain(h, f)).collect()
    }
}

/// Beam `n`, element `k`: `exp(j 2 pi (d/lambda) n k / N) / sqrt(N)`.
pub fn make_codebook(n_antennas: usize, spacing_ratio: f64) -> Codebook {
    let n_t = n_antennas as f64;
    let scale = 1.0 / n_t.sqrt();
    let beams = (0..n_antennas)
        .map(|n| {
            (0..n_antennas)
                .map(|k| {
                    Complex64::from_polar(scale, 2.0 * PI * spacing_ratio * (n * k) as f64 / n_t)
                })
                .collect()
        })
        .collect();
    Codebook {
        beams,
        spacing_ratio,
    }
}

/// `|h^H f|^2`.
pub fn beam_gain(h: &ChannelVector, beam: &[Complex64]) -> Result<f64, ChannelError> {
    if h.len() != beam.len() {
        return Err(ChannelError::DimensionMismatch {
            expected: h.len(),
            got: beam.len(),
        });
    }
    let inner: Complex64 = h.0.iter().zip(beam).map(|(hk, fk)| hk.conj() * fk).sum();
    Ok(inner.norm_sqr())
}

/// Exhaustive beam search; ties resolve to the lowest index.
pub fn best_beam(h: &ChannelVector, cb: &Codebook) -> Result<(usize, f64), ChannelError> {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (n, f) in cb.beams.iter().enumerate() {
        let g = beam_gain(h, f)?;
        if g > best.1 {
            best = (n, g);
        }
    }
    if cb.is_empty() {
        best.1 = 0.0;
    }
    Ok(best)
}

/// `log2(1 + S / (sum I + noise))`.
pub fn achievable_rate(signal_gain: f64, interference: &[f64], noise: f64) -> f64 {
    let i: f64 = interference.iter().sum();
    (1.0 + signal_gain / (i + noise)).log2()
}

/// One served user: index into the channel table plus its serving BS and beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub user: usize,
    pub bs: usize,
    pub beam: usize,
}

/// `channels[bs][user]`.
pub type ChannelTable = Vec<Vec<ChannelVector>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interference {
    /// Intra- and inter-BS terms from every other served user.
    Full,
    None,
}

pub fn check_links(links: &[Link], n_bs: usize, n_rf: usize) -> Result<(), ChannelError> {
    let mut per_bs = vec![0usize; n_bs];
    let mut seen = std::collections::BTreeSet::new();
    for l in links {
        if l.bs >= n_bs {
            return Err(ChannelError::ConstraintViolation(format!(
                "unknown BS {}",
                l.bs
            )));
        }
        if !seen.insert(l.user) {
            return Err(ChannelError::ConstraintViolation(format!(
                "user {} is connected to more than one BS",
                l.user
            )));
        }
        per_bs[l.bs] += 1;
        if per_bs[l.bs] > n_rf {
            return Err(ChannelError::ConstraintViolation(format!(
                "BS {} serves more than {} users",
                l.bs, n_rf
            )));
        }
    }
    Ok(())
}

/// Per-link achievable rates, in the order of `links`.
pub fn link_rates(
    links: &[Link],
    channels: &ChannelTable,
    cb: &Codebook,
    noise: f64,
    n_rf: usize,
    interference: Interference,
) -> Result<Vec<f64>, ChannelError> {
    check_links(links, channels.len(), n_rf)?;
    links
        .iter()
        .map(|l| {
            let signal = beam_gain(&channels[l.bs][l.user], &cb.beams[l.beam])?;
            let mut terms = Vec::new();
            if interference == Interference::Full {
                for o in links.iter().filter(|o| o.user != l.user) {
                    // The other user's stream leaves its own BS through its own beam.
                    terms.push(beam_gain(&channels[o.bs][l.user], &cb.beams[o.beam])?);
                }
            }
            Ok(achievable_rate(signal, &terms, noise))
        })
        .collect()
}

pub fn sum_rate(
    links: &[Link],
    channels: &ChannelTable,
    cb: &Codebook,
    noise: f64,
    n_rf: usize,
) -> Result<f64, ChannelError> {
    Ok(
        link_rates(links, channels, cb, noise, n_rf, Interference::Full)?
            .iter()
            .sum(),
    )
}

/// Which horizontal axis a wall's plane is normal to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WallAxis {
    X,
    Y,
}

/// Vertical reflecting face of a building block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub axis: WallAxis,
    /// Plane coordinate along `axis`.
    pub offset: f64,
    /// +1 or -1: the side of the plane that faces the street.
    pub facing: f64,
    /// Extent along the other horizontal axis.
    pub span: (f64, f64),
    pub height: f64,
}

impl Wall {
    fn signed_distance(&self, p: Vec3) -> f64 {
        let c = match self.axis {
            WallAxis::X => p.x,
            WallAxis::Y => p.y,
        };
        self.facing * (c - self.offset)
    }

    fn mirror(&self, p: Vec3) -> Vec3 {
        match self.axis {
            WallAxis::X => Vec3::new(2.0 * self.offset - p.x, p.y, p.z),
            WallAxis::Y => Vec3::new(p.x, 2.0 * self.offset - p.y, p.z),
        }
    }

    /// Specular reflection point for the pair, if it lands on the face.
    pub fn reflection_point(&self, src: Vec3, dst: Vec3) -> Option<Vec3> {
        let (ds, dd) = (self.signed_distance(src), self.signed_distance(dst));
        if ds <= 0.0 || dd <= 0.0 {
            return None;
        }
        let image = self.mirror(src);
        let t = ds / (ds + dd);
        let p = image + (dst - image) * t;
        let along = match self.axis {
            WallAxis::X => p.y,
            WallAxis::Y => p.x,
        };
        (along >= self.span.0 && along <= self.span.1 && p.z >= 0.0 && p.z <= self.height)
            .then_some(p)
    }
}

/// Transmit array placement. `axis` is the horizontal unit vector along which
/// the elements are spaced. The panel radiates into a horizontal sector of
/// half-width `half_sector` (radians) around `facing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioSite {
    pub position: Vec3,
    pub axis: Vec3,
    pub facing: Vec3,
    pub half_sector: f64,
}

impl RadioSite {
    /// Angle between the array axis and the horizontal projection of `dir`.
    pub fn departure_angle(&self, dir: Vec3) -> f64 {
        let h = Vec3::new(dir.x, dir.y, 0.0).normalized();
        h.dot(self.axis).clamp(-1.0, 1.0).acos()
    }

    /// True when `dir` leaves outside the panel's sector.
    pub fn outside_sector(&self, dir: Vec3) -> bool {
        let h = Vec3::new(dir.x, dir.y, 0.0).normalized();
        h.dot(self.facing) < self.half_sector.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub wavelength: f64,
    /// Extra loss of a path that crosses a vehicle body or building, dB.
    pub blockage_db: f64,
    /// Amplitude factor per reflection.
    pub reflection_factor: f64,
    pub max_paths: usize,
    /// Paths weaker than this amplitude are dropped.
    pub amplitude_floor: f64,
    /// Extra loss of a path leaving outside the panel's sector, dB.
    pub front_to_back_db: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            wavelength: 299_792_458.0 / 28e9,
            blockage_db: 30.0,
            reflection_factor: 0.3,
            max_paths: 5,
            amplitude_floor: 1e-12,
            front_to_back_db: 0.0,
        }
    }
}

/// Static and moving obstacles seen by the ray model.
#[derive(Debug, Clone, Copy, Default)]
pub struct PropagationScene<'a> {
    /// Vehicle bodies keyed by vehicle id.
    pub blockers: &'a [(u32, Aabb)],
    pub buildings: &'a [Aabb],
    pub walls: &'a [Wall],
}

impl PropagationScene<'_> {
    fn blocked(&self, a: Vec3, b: Vec3, ignore: Option<u32>) -> bool {
        const EPS: f64 = 1e-9;
        self.blockers
            .iter()
            .filter(|(id, _)| Some(*id) != ignore)
            .any(|(_, bx)| bx.blocks_segment(a, b, EPS))
            || self.buildings.iter().any(|bx| bx.blocks_segment(a, b, EPS))
    }
}

/// Line-of-sight plus first-order wall reflections between `site` and the
/// antenna at `target`. A blocked segment is attenuated, not dropped. Phases
/// are uniform draws from `rng`, one per candidate path in a fixed order.
pub fn synthesize_paths<R: Rng + ?Sized>(
    site: &RadioSite,
    target: Vec3,
    target_id: Option<u32>,
    scene: &PropagationScene<'_>,
    cfg: &PropagationConfig,
    rng: &mut R,
) -> Result<Vec<PathParams>, ChannelError> {
    let penalty = 10f64.powf(-cfg.blockage_db / 20.0);
    let back = 10f64.powf(-cfg.front_to_back_db / 20.0);
    let free_space = |d: f64| cfg.wavelength / (4.0 * PI * d.max(1e-3));
    let mut out = Vec::with_capacity(1 + scene.walls.len());

    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let d = (target - site.position).norm();
    let mut amp = free_space(d);
    if scene.blocked(site.position, target, target_id) {
        amp *= penalty;
    }
    if site.outside_sector(target - site.position) {
        amp *= back;
    }
    out.push(PathParams {
        gain: Complex64::from_polar(amp, phase),
        aod: site.departure_angle(target - site.position),
        kind: PathKind::Los,
    });

    for wall in scene.walls {
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        let Some(p) = wall.reflection_point(site.position, target) else {
            continue;
        };
        let (d1, d2) = ((p - site.position).norm(), (target - p).norm());
        let mut amp = cfg.reflection_factor * free_space(d1 + d2);
        if scene.blocked(site.position, p, target_id) || scene.blocked(p, target, target_id) {
            amp *= penalty;
        }
        if site.outside_sector(p - site.position) {
            amp *= back;
        }
        out.push(PathParams {
            gain: Complex64::from_polar(amp, phase),
            aod: site.departure_angle(p - site.position),
            kind: PathKind::Reflected,
        });
    }

    out.retain(|p| p.gain.norm() >= cfg.amplitude_floor);
    if out.is_empty() {
        return Err(ChannelError::NoPath);
    }
    // Stable sort keeps the LOS path first among equals.
    out.sort_by(|a, b| b.gain.norm().total_cmp(&a.gain.norm()));
    out.truncate(cfg.max_paths.max(1));
    Ok(out)
}
