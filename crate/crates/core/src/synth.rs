//! Seeded synthetic highway scenes with closed-form trajectories.
//!
//! Every vehicle drives at constant longitudinal speed. A vehicle may make
//! one lane change whose lateral offset follows a logistic curve, so the
//! exact position at any instant is available from [`Motion`] without
//! touching the sampled track.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{RecordingMeta, Track, VehicleId, VehicleState, HIGHD_FRAME_RATE, HIGHD_METERS_PER_PIXEL};
use crate::window::{DOWNSAMPLE, FUTURE_STEPS};

pub const LENGTH_RANGE: (f64, f64) = (4.0, 5.5);
pub const WIDTH_RANGE: (f64, f64) = (1.8, 2.2);
/// Minimum bumper-to-bumper gap at spawn time.
pub const MIN_SPAWN_GAP: f64 = 2.0;
/// The logistic lane-change profile covers 1%..99% of the offset over its duration.
const LANE_CHANGE_SPAN_QUANTILE: f64 = 99.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_vehicles: usize,
    pub n_lanes: usize,
    pub lane_width: f64,
    /// Seconds; at least 8.
    pub duration: f64,
    pub speed_range: (f64, f64),
    pub lane_change_probability: f64,
    /// Seconds spanned by a lane change.
    pub lane_change_duration: f64,
    /// Longitudinal extent of the zone vehicles are spawned in, meters.
    pub spawn_length: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            n_vehicles: 8,
            n_lanes: 3,
            lane_width: 3.75,
            duration: 12.0,
            speed_range: (22.0, 32.0),
            lane_change_probability: 0.3,
            lane_change_duration: 4.0,
            spawn_length: 150.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_lanes < 1 {
            return bad("scene needs at least one lane".into());
        }
        if !(self.duration >= 8.0) {
            return bad(format!("duration must be at least 8 s, got {}", self.duration));
        }
        let (lo, hi) = self.speed_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
            return bad(format!("invalid speed range [{lo}, {hi}]"));
        }
        if !(0.0..=1.0).contains(&self.lane_change_probability) {
            return bad(format!(
                "lane change probability must be in [0, 1], got {}",
                self.lane_change_probability
            ));
        }
        if !(self.lane_width > WIDTH_RANGE.1) {
            return bad(format!("lane width {} cannot fit a vehicle", self.lane_width));
        }
        if !(self.lane_change_duration > 0.0) {
            return bad("lane change duration must be positive".into());
        }
        if !(self.spawn_length > 0.0) {
            return bad("spawn length must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneChange {
    /// Seconds from scene start to the midpoint of the manoeuvre.
    pub center: f64,
    pub duration: f64,
    /// Signed lateral offset, meters.
    pub offset: f64,
}

impl LaneChange {
    /// Logistic lateral displacement at time `t` seconds.
    pub fn lateral(&self, t: f64) -> f64 {
        let scale = self.duration / (2.0 * LANE_CHANGE_SPAN_QUANTILE.ln());
        self.offset / (1.0 + (-(t - self.center) / scale).exp())
    }
}

/// Closed-form motion of one synthetic vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub id: VehicleId,
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub length: f64,
    pub width: f64,
    pub lane_change: Option<LaneChange>,
}

impl Motion {
    pub fn position(&self, t: f64) -> (f64, f64) {
        let dy = self.lane_change.map_or(0.0, |lc| lc.lateral(t));
        (self.x0 + self.vx * t, self.y0 + dy)
    }

    pub fn lateral_velocity(&self, t: f64) -> f64 {
        self.lane_change.map_or(0.0, |lc| {
            let scale = lc.duration / (2.0 * LANE_CHANGE_SPAN_QUANTILE.ln());
            let s = 1.0 / (1.0 + (-(t - lc.center) / scale).exp());
            lc.offset * s * (1.0 - s) / scale
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub tracks: Vec<Track>,
    pub meta: RecordingMeta,
    pub motions: Vec<Motion>,
}

impl SyntheticScene {
    pub fn motion(&self, id: VehicleId) -> Option<&Motion> {
        self.motions.iter().find(|m| m.id == id)
    }

    /// Exact relative future positions at frames `t + 4k`, `k = 1..=31`,
    /// evaluated from the closed-form motion.
    pub fn oracle_future(&self, id: VehicleId, t: i64) -> Result<Vec<(f64, f64)>> {
        let motion = self
            .motion(id)
            .ok_or_else(|| Error::Integrity(format!("vehicle {id} not in scene")))?;
        let track = self
            .tracks
            .iter()
            .find(|tr| tr.id == id)
            .ok_or_else(|| Error::Integrity(format!("vehicle {id} not in scene")))?;
        let last_needed = t + DOWNSAMPLE * FUTURE_STEPS as i64;
        if t < track.first_frame() || last_needed > track.last_frame() {
            return Err(Error::Range(format!(
                "vehicle {id}: frames {t}..={last_needed} not all inside {}..={}",
                track.first_frame(),
                track.last_frame()
            )));
        }
        let rate = self.meta.frame_rate;
        let (x_t, y_t) = motion.position(t as f64 / rate);
        Ok((1..=FUTURE_STEPS as i64)
            .map(|k| {
                let (x, y) = motion.position((t + DOWNSAMPLE * k) as f64 / rate);
                (x - x_t, y - y_t)
            })
            .collect())
    }
}

fn lane_of(center_y: f64, lane_width: f64, n_lanes: usize) -> i64 {
    ((center_y / lane_width).floor() as i64).clamp(0, n_lanes as i64 - 1) + 1
}

fn overlaps(a: &Motion, b: &Motion, t: f64) -> bool {
    let (ax, ay) = a.position(t);
    let (bx, by) = b.position(t);
    ax < bx + b.length && bx < ax + a.length && ay < by + b.width && by < ay + a.width
}

fn collides(a: &Motion, others: &[Motion], frames: i64, rate: f64) -> bool {
    (0..frames).any(|f| {
        let t = f as f64 / rate;
        others.iter().any(|b| b.id != a.id && overlaps(a, b, t))
    })
}

/// Generates a scene sampled at 25 Hz. All vehicles are visible for the
/// whole duration.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rate = HIGHD_FRAME_RATE;
    let frames = (spec.duration * rate).round() as i64;

    // Assign lanes and sizes, then pack each lane.
    let mut lanes: Vec<Vec<(f64, f64)>> = vec![Vec::new(); spec.n_lanes];
    let mut lane_order = Vec::with_capacity(spec.n_vehicles);
    for _ in 0..spec.n_vehicles {
        let lane = rng.gen_range(0..spec.n_lanes);
        let length = rng.gen_range(LENGTH_RANGE.0..=LENGTH_RANGE.1);
        let width = rng.gen_range(WIDTH_RANGE.0..=WIDTH_RANGE.1);
        lanes[lane].push((length, width));
        lane_order.push(lane);
    }

    let mut motions = Vec::with_capacity(spec.n_vehicles);
    let mut next_id: VehicleId = 1;
    for (lane, vehicles) in lanes.iter().enumerate() {
        if vehicles.is_empty() {
            continue;
        }
        let occupied: f64 = vehicles.iter().map(|(l, _)| l + MIN_SPAWN_GAP).sum();
        let slack = spec.spawn_length - occupied;
        if slack < 0.0 {
            return Err(Error::Generation(format!(
                "lane {lane}: {} vehicles need {occupied:.1} m but the spawn zone is {} m",
                vehicles.len(),
                spec.spawn_length
            )));
        }
        // Split the slack at sorted uniform cut points.
        let mut cuts: Vec<f64> = (0..vehicles.len()).map(|_| rng.gen_range(0.0..=slack)).collect();
        cuts.sort_by(|a, b| a.total_cmp(b));
        let mut speeds: Vec<f64> = (0..vehicles.len())
            .map(|_| rng.gen_range(spec.speed_range.0..=spec.speed_range.1))
            .collect();
        // Slower vehicles behind faster ones: gaps never shrink.
        speeds.sort_by(|a, b| a.total_cmp(b));

        let mut cursor = 0.0;
        let mut previous_cut = 0.0;
        for (i, &(length, width)) in vehicles.iter().enumerate() {
            cursor += cuts[i] - previous_cut;
            previous_cut = cuts[i];
            let lane_center = (lane as f64 + 0.5) * spec.lane_width;
            motions.push(Motion {
                id: next_id,
                x0: cursor,
                y0: lane_center - width / 2.0,
                vx: speeds[i],
                length,
                width,
                lane_change: None,
            });
            next_id += 1;
            cursor += length + MIN_SPAWN_GAP;
        }
    }

    // Lane changes, kept only when the manoeuvre is collision-free.
    let change_window = (spec.lane_change_duration / 2.0, spec.duration - spec.lane_change_duration / 2.0);
    for i in 0..motions.len() {
        if rng.gen::<f64>() >= spec.lane_change_probability {
            continue;
        }
        let center_y = motions[i].y0 + motions[i].width / 2.0;
        let lane = ((center_y / spec.lane_width).floor() as i64).clamp(0, spec.n_lanes as i64 - 1);
        let mut choices = Vec::new();
        if lane > 0 {
            choices.push(-spec.lane_width);
        }
        if lane + 1 < spec.n_lanes as i64 {
            choices.push(spec.lane_width);
        }
        let center = if change_window.0 < change_window.1 {
            rng.gen_range(change_window.0..=change_window.1)
        } else {
            spec.duration / 2.0
        };
        if choices.is_empty() {
            continue;
        }
        let offset = choices[rng.gen_range(0..choices.len())];
        let mut candidate = motions[i];
        candidate.lane_change = Some(LaneChange {
            center,
            duration: spec.lane_change_duration,
            offset,
        });
        if !collides(&candidate, &motions, frames, rate) {
            motions[i] = candidate;
        }
    }

    let tracks = motions
        .iter()
        .map(|m| {
            let states = (0..frames)
                .map(|f| {
                    let t = f as f64 / rate;
                    let (x, y) = m.position(t);
                    VehicleState {
                        frame: f,
                        x,
                        y,
                        w: m.length,
                        h: m.width,
                        vx: m.vx,
                        vy: m.lateral_velocity(t),
                        lane_id: lane_of(y + m.width / 2.0, spec.lane_width, spec.n_lanes),
                    }
                })
                .collect();
            Track::new(m.id, states)
        })
        .collect::<Result<Vec<_>>>()?;

    let far_end = motions
        .iter()
        .map(|m| m.position(frames as f64 / rate).0 + m.length)
        .fold(spec.spawn_length, f64::max);
    let meta = RecordingMeta {
        frame_rate: rate,
        meters_per_pixel: HIGHD_METERS_PER_PIXEL,
        lane_boundaries: (0..=spec.n_lanes).map(|i| i as f64 * spec.lane_width).collect(),
        road_length: far_end.ceil() + 10.0,
    };
    Ok(SyntheticScene { tracks, meta, motions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_tracks, write_tracks};

    fn straight(seed: u64, n: usize) -> SceneSpec {
        SceneSpec {
            seed,
            n_vehicles: n,
            lane_change_probability: 0.0,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn single_vehicle_is_constant_velocity() {
        let scene = generate_scene(&straight(7, 1)).unwrap();
        assert_eq!(scene.tracks.len(), 1);
        let m = scene.motions[0];
        for s in &scene.tracks[0].states {
            let t = s.frame as f64 / 25.0;
            assert_eq!(s.x, m.x0 + m.vx * t);
            assert_eq!(s.y, m.y0);
        }
    }

    #[test]
    fn seeded_determinism() {
        let spec = SceneSpec { seed: 11, ..SceneSpec::default() };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = SceneSpec { seed: 12, ..spec.clone() };
        assert_ne!(generate_scene(&spec).unwrap().tracks, generate_scene(&other).unwrap().tracks);
    }

    #[test]
    fn no_same_lane_overlap_brute_force() {
        for seed in 0..20 {
            let spec = SceneSpec {
                seed,
                n_vehicles: 8,
                n_lanes: 3,
                lane_change_probability: 0.5,
                ..SceneSpec::default()
            };
            let scene = generate_scene(&spec).unwrap();
            let frames = scene.tracks[0].states.len();
            for f in 0..frames {
                let states: Vec<&VehicleState> = scene.tracks.iter().map(|t| &t.states[f]).collect();
                for (i, a) in states.iter().enumerate() {
                    for b in &states[i + 1..] {
                        if a.lane_id != b.lane_id {
                            continue;
                        }
                        let gap = if a.x <= b.x { b.x - (a.x + a.w) } else { a.x - (b.x + b.w) };
                        let lateral_clear = a.y + a.h <= b.y || b.y + b.h <= a.y;
                        assert!(gap >= 0.0 || lateral_clear, "seed {seed} frame {f}: gap {gap}");
                    }
                }
            }
        }
    }

    #[test]
    fn overpacked_lane_is_rejected() {
        let spec = SceneSpec {
            n_vehicles: 60,
            n_lanes: 1,
            spawn_length: 100.0,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SceneSpec { n_lanes: 0, ..SceneSpec::default() },
            SceneSpec { duration: 7.9, ..SceneSpec::default() },
            SceneSpec { speed_range: (30.0, 20.0), ..SceneSpec::default() },
            SceneSpec { lane_change_probability: 1.5, ..SceneSpec::default() },
        ] {
            assert!(generate_scene(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn oracle_constant_velocity() {
        let mut scene = generate_scene(&straight(3, 1)).unwrap();
        scene.motions[0].vx = 20.0;
        scene.motions[0].x0 = 0.0;
        let future = scene.oracle_future(scene.motions[0].id, 40).unwrap();
        assert_eq!(future.len(), 31);
        for (k, (dx, dy)) in future.iter().enumerate() {
            let expected = 20.0 * 0.16 * (k + 1) as f64;
            assert!((dx - expected).abs() < 1e-9, "{dx} vs {expected}");
            assert_eq!(*dy, 0.0);
        }
    }

    #[test]
    fn oracle_near_stationary() {
        let mut scene = generate_scene(&straight(3, 1)).unwrap();
        let eps = 1e-3;
        scene.motions[0].vx = eps;
        let future = scene.oracle_future(scene.motions[0].id, 0).unwrap();
        for (k, (dx, dy)) in future.iter().enumerate() {
            assert!((dx - eps * 0.16 * (k + 1) as f64).abs() < 1e-12);
            assert_eq!(*dy, 0.0);
        }
    }

    #[test]
    fn oracle_lane_change_matches_sigmoid() {
        let spec = SceneSpec {
            seed: 5,
            n_vehicles: 1,
            lane_change_probability: 1.0,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let m = scene.motions[0];
        let lc = m.lane_change.expect("single vehicle always has room to change lanes");
        let t = 50;
        let future = scene.oracle_future(m.id, t).unwrap();
        for (k, (_, dy)) in future.iter().enumerate() {
            let later = (t + 4 * (k as i64 + 1)) as f64 / 25.0;
            let expected = lc.lateral(later) - lc.lateral(t as f64 / 25.0);
            assert!((dy - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_range_error() {
        let scene = generate_scene(&straight(3, 1)).unwrap();
        let last = scene.tracks[0].last_frame();
        assert!(matches!(scene.oracle_future(1, last - 123), Err(Error::Range(_))));
        assert!(scene.oracle_future(1, last - 124).is_ok());
    }

    #[test]
    fn round_trip_through_ingester() {
        let scene = generate_scene(&SceneSpec { seed: 2, ..SceneSpec::default() }).unwrap();
        let mut buf = Vec::new();
        write_tracks(&scene.tracks, &mut buf).unwrap();
        assert_eq!(parse_tracks(buf.as_slice()).unwrap(), scene.tracks);
    }
}
