//! Reading and writing tracks in the HighD comma-separated layout.
//!
//! Geometry stays in meters throughout; conversion to pixels happens once,
//! at rasterization time, through [`meters_to_pixels`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type VehicleId = u64;

/// Default ground sampling distance of the HighD aerial footage.
pub const HIGHD_METERS_PER_PIXEL: f64 = 0.10106;
pub const HIGHD_FRAME_RATE: f64 = 25.0;
pub const HIGHD_ROAD_LENGTH: f64 = 420.0;

/// Seconds of continuous visibility a target vehicle needs: 3 s of history
/// plus 5 s of future.
pub const TARGET_VISIBILITY_SECONDS: f64 = 8.0;

const REQUIRED_COLUMNS: [&str; 9] = [
    "frame",
    "id",
    "x",
    "y",
    "width",
    "height",
    "xVelocity",
    "yVelocity",
    "laneId",
];

/// One vehicle at one frame. `(x, y)` is the upper-left corner of the
/// bounding box; `w` runs along x and `h` along y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub vx: f64,
    pub vy: f64,
    pub lane_id: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    PositiveX,
    NegativeX,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: VehicleId,
    pub states: Vec<VehicleState>,
    pub direction: Direction,
}

impl Track {
    /// Builds a track, checking that frames are consecutive and sizes positive.
    pub fn new(id: VehicleId, mut states: Vec<VehicleState>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Integrity(format!("track {id} has no states")));
        }
        states.sort_by_key(|s| s.frame);
        for pair in states.windows(2) {
            if pair[1].frame != pair[0].frame + 1 {
                return Err(Error::Integrity(format!(
                    "track {id} has non-contiguous frames {} -> {}",
                    pair[0].frame, pair[1].frame
                )));
            }
        }
        for s in &states {
            if !(s.w > 0.0 && s.h > 0.0) {
                return Err(Error::Integrity(format!(
                    "track {id} has non-positive size at frame {}",
                    s.frame
                )));
            }
            if s.frame < 0 {
                return Err(Error::Integrity(format!("track {id} has negative frame {}", s.frame)));
            }
        }
        let direction = if median(states.iter().map(|s| s.vx)) >= 0.0 {
            Direction::PositiveX
        } else {
            Direction::NegativeX
        };
        Ok(Track { id, states, direction })
    }

    pub fn first_frame(&self) -> i64 {
        self.states[0].frame
    }

    pub fn last_frame(&self) -> i64 {
        self.states[self.states.len() - 1].frame
    }

    pub fn state_at(&self, frame: i64) -> Option<&VehicleState> {
        let offset = frame.checked_sub(self.first_frame())?;
        usize::try_from(offset).ok().and_then(|i| self.states.get(i))
    }

    pub fn median_vx(&self) -> f64 {
        median(self.states.iter().map(|s| s.vx))
    }
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingMeta {
    pub frame_rate: f64,
    pub meters_per_pixel: f64,
    /// Lateral lane-marking offsets in meters, ascending.
    pub lane_boundaries: Vec<f64>,
    pub road_length: f64,
}

impl Default for RecordingMeta {
    fn default() -> Self {
        RecordingMeta {
            frame_rate: HIGHD_FRAME_RATE,
            meters_per_pixel: HIGHD_METERS_PER_PIXEL,
            lane_boundaries: Vec::new(),
            road_length: HIGHD_ROAD_LENGTH,
        }
    }
}

impl RecordingMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Integrity(format!("frame rate must be positive, got {}", self.frame_rate)));
        }
        if !(self.meters_per_pixel > 0.0 && self.meters_per_pixel.is_finite()) {
            return Err(Error::Integrity(format!(
                "meters per pixel must be positive, got {}",
                self.meters_per_pixel
            )));
        }
        Ok(())
    }

    /// Lateral road extent `[min, max]` in meters, if lane markings are known.
    pub fn lateral_extent(&self) -> Option<(f64, f64)> {
        let min = self.lane_boundaries.iter().copied().reduce(f64::min)?;
        let max = self.lane_boundaries.iter().copied().reduce(f64::max)?;
        Some((min, max))
    }
}

/// Converts meters to whole pixels, rounding down.
///
/// Quotients within a few ulps of an integer snap to it, so that
/// `meters_to_pixels(k * s) == k` despite `k * s / s` landing just below `k`.
pub fn meters_to_pixels(v: f64, meta: &RecordingMeta) -> i64 {
    let ratio = v / meta.meters_per_pixel;
    let nearest = ratio.round();
    if (ratio - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest as i64
    } else {
        ratio.floor() as i64
    }
}

/// Parses a HighD `tracks.csv` stream. Extra columns are ignored.
pub fn parse_tracks<R: Read>(source: R) -> Result<Vec<Track>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    let mut index = [0usize; REQUIRED_COLUMNS.len()];
    for (slot, name) in index.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing required column `{name}`")))?;
    }
    let [c_frame, c_id, c_x, c_y, c_w, c_h, c_vx, c_vy, c_lane] = index;

    let mut by_id: BTreeMap<VehicleId, Vec<VehicleState>> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("row {}: {e}", row + 2)))?;
        let field = |col: usize| -> Result<&str> {
            record
                .get(col)
                .ok_or_else(|| Error::Format(format!("row {}: too few fields", row + 2)))
        };
        let float = |col: usize| -> Result<f64> {
            let raw = field(col)?;
            raw.parse::<f64>()
                .map_err(|_| Error::Format(format!("row {}: `{}` is not a number ({raw})", row + 2, &headers[col])))
        };
        let int = |col: usize| -> Result<i64> {
            let raw = field(col)?;
            raw.parse::<i64>()
                .or_else(|_| {
                    // Some exports write integral columns as `3.0`.
                    raw.parse::<f64>()
                        .ok()
                        .filter(|v| v.fract() == 0.0)
                        .map(|v| v as i64)
                        .ok_or(())
                })
                .map_err(|_| Error::Format(format!("row {}: `{}` is not an integer ({raw})", row + 2, &headers[col])))
        };
        let id = int(c_id)?;
        let id = VehicleId::try_from(id).map_err(|_| Error::Format(format!("row {}: negative id {id}", row + 2)))?;
        let state = VehicleState {
            frame: int(c_frame)?,
            x: float(c_x)?,
            y: float(c_y)?,
            w: float(c_w)?,
            h: float(c_h)?,
            vx: float(c_vx)?,
            vy: float(c_vy)?,
            lane_id: int(c_lane)?,
        };
        by_id.entry(id).or_default().push(state);
    }

    by_id.into_iter().map(|(id, states)| Track::new(id, states)).collect()
}

/// Writes tracks in the same layout [`parse_tracks`] reads. Floats are
/// written in shortest round-trip form, so re-parsing is lossless.
pub fn write_tracks<W: Write>(tracks: &[Track], sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    let to_fmt = |e: csv::Error| Error::Format(format!("writing tracks: {e}"));
    writer.write_record(REQUIRED_COLUMNS).map_err(to_fmt)?;
    let mut rows: Vec<(i64, VehicleId, &VehicleState)> = tracks
        .iter()
        .flat_map(|t| t.states.iter().map(move |s| (s.frame, t.id, s)))
        .collect();
    rows.sort_by_key(|&(frame, id, _)| (frame, id));
    for (_, id, s) in rows {
        writer
            .write_record([
                s.frame.to_string(),
                id.to_string(),
                s.x.to_string(),
                s.y.to_string(),
                s.w.to_string(),
                s.h.to_string(),
                s.vx.to_string(),
                s.vy.to_string(),
                s.lane_id.to_string(),
            ])
            .map_err(to_fmt)?;
    }
    writer.flush().map_err(|e| Error::Format(format!("writing tracks: {e}")))?;
    Ok(())
}

/// Parses a HighD `recordingMeta.csv` stream (first data row).
///
/// `frameRate` is required. `upperLaneMarkings` / `lowerLaneMarkings` are
/// `;`-separated offsets. The optional `metersPerPixel` and `roadLength`
/// columns default to the HighD values.
pub fn parse_meta<R: Read>(source: R) -> Result<RecordingMeta> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    let record = reader
        .records()
        .next()
        .ok_or_else(|| Error::Format("recording metadata has no data row".into()))?
        .map_err(|e| Error::Format(format!("recording metadata: {e}")))?;
    let get = |name: &str| headers.iter().position(|h| h == name).and_then(|i| record.get(i));
    let number = |name: &str, default: Option<f64>| -> Result<f64> {
        match (get(name), default) {
            (Some(raw), _) => raw
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("`{name}` is not a number ({raw})"))),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(Error::Format(format!("missing required column `{name}`"))),
        }
    };

    let mut lane_boundaries = Vec::new();
    for name in ["upperLaneMarkings", "lowerLaneMarkings"] {
        if let Some(raw) = get(name) {
            for part in raw.split(';').map(str::trim).filter(|p| !p.is_empty()) {
                let v = part
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("`{name}` has a non-numeric entry ({part})")))?;
                lane_boundaries.push(v);
            }
        }
    }
    lane_boundaries.sort_by(|a, b| a.total_cmp(b));

    let meta = RecordingMeta {
        frame_rate: number("frameRate", None)?,
        meters_per_pixel: number("metersPerPixel", Some(HIGHD_METERS_PER_PIXEL))?,
        lane_boundaries,
        road_length: number("roadLength", Some(HIGHD_ROAD_LENGTH))?,
    };
    meta.validate()?;
    Ok(meta)
}

pub fn write_meta<W: Write>(meta: &RecordingMeta, sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    let to_fmt = |e: csv::Error| Error::Format(format!("writing metadata: {e}"));
    writer
        .write_record(["id", "frameRate", "lowerLaneMarkings", "metersPerPixel", "roadLength"])
        .map_err(to_fmt)?;
    let markings = meta
        .lane_boundaries
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(";");
    writer
        .write_record([
            "1".to_string(),
            meta.frame_rate.to_string(),
            markings,
            meta.meters_per_pixel.to_string(),
            meta.road_length.to_string(),
        ])
        .map_err(to_fmt)?;
    writer.flush().map_err(|e| Error::Format(format!("writing metadata: {e}")))?;
    Ok(())
}

/// File names of a recording directory as written by [`write_recording`].
pub const TRACKS_FILE: &str = "tracks.csv";
pub const META_FILE: &str = "recordingMeta.csv";

pub fn read_tracks_file(path: &Path) -> Result<Vec<Track>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tracks(io::BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Record {
            path: path.to_path_buf(),
            reason: m,
        },
        other => other,
    })
}

pub fn read_meta_file(path: &Path) -> Result<RecordingMeta> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_meta(f).map_err(|e| match e {
        Error::Format(m) => Error::Record {
            path: path.to_path_buf(),
            reason: m,
        },
        other => other,
    })
}

/// Reads `tracks.csv` and `recordingMeta.csv` from `dir`.
pub fn read_recording(dir: &Path) -> Result<(Vec<Track>, RecordingMeta)> {
    Ok((read_tracks_file(&dir.join(TRACKS_FILE))?, read_meta_file(&dir.join(META_FILE))?))
}

pub fn write_recording(dir: &Path, tracks: &[Track], meta: &RecordingMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tp = dir.join(TRACKS_FILE);
    let f = fs::File::create(&tp).map_err(|e| Error::io(&tp, e))?;
    write_tracks(tracks, io::BufWriter::new(f))?;
    let mp = dir.join(META_FILE);
    let f = fs::File::create(&mp).map_err(|e| Error::io(&mp, e))?;
    write_meta(meta, f)
}

/// Keeps tracks driving toward +x.
pub fn filter_direction(tracks: Vec<Track>) -> Vec<Track> {
    tracks
        .into_iter()
        .filter(|t| t.direction == Direction::PositiveX)
        .collect()
}

/// Minimum number of frames a target vehicle must be visible.
pub fn min_target_frames(meta: &RecordingMeta) -> usize {
    (TARGET_VISIBILITY_SECONDS * meta.frame_rate).ceil() as usize
}

/// Ids of tracks moving forward that stay visible long enough to yield at
/// least one full history + future window.
pub fn select_target_vehicles(tracks: &[Track], meta: &RecordingMeta) -> Vec<VehicleId> {
    let min_frames = min_target_frames(meta);
    tracks
        .iter()
        .filter(|t| t.direction == Direction::PositiveX)
        .filter(|t| t.median_vx() > 0.0 && t.states.len() >= min_frames)
        .map(|t| t.id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "frame,id,x,y,width,height,xVelocity,yVelocity,laneId\n";

    fn state(frame: i64, vx: f64) -> VehicleState {
        VehicleState {
            frame,
            x: 10.0 + frame as f64,
            y: 4.0,
            w: 5.0,
            h: 2.0,
            vx,
            vy: 0.0,
            lane_id: 2,
        }
    }

    fn track(id: VehicleId, frames: i64, vx: f64) -> Track {
        Track::new(id, (0..frames).map(|f| state(f, vx)).collect()).unwrap()
    }

    #[test]
    fn single_row() {
        let src = format!("{HEADER}0,1,10.0,4.0,5.0,2.0,30.0,0.0,2\n");
        let tracks = parse_tracks(src.as_bytes()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].id, 1);
        assert_eq!(tracks[0].states.len(), 1);
        assert_eq!(tracks[0].states[0].x, 10.0);
        assert_eq!(tracks[0].states[0].w, 5.0);
    }

    #[test]
    fn interleaved_ids_are_grouped_and_sorted() {
        let src = format!(
            "{HEADER}1,2,0,0,5,2,20,0,1\n0,1,0,0,5,2,20,0,1\n1,1,1,0,5,2,20,0,1\n0,2,0,0,5,2,20,0,1\n"
        );
        let tracks = parse_tracks(src.as_bytes()).unwrap();
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            let frames: Vec<i64> = t.states.iter().map(|s| s.frame).collect();
            assert_eq!(frames, vec![0, 1]);
        }
    }

    #[test]
    fn gap_is_an_integrity_error_naming_the_id() {
        let src = format!("{HEADER}0,3,0,0,5,2,20,0,1\n2,3,1,0,5,2,20,0,1\n");
        let err = parse_tracks(src.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Integrity(ref m) if m.contains("track 3")), "{err}");
    }

    #[test]
    fn missing_column_is_named() {
        let src = "frame,id,x,y,width,height,xVelocity,yVelocity\n0,1,0,0,5,2,20,0\n";
        let err = parse_tracks(src.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("laneId")), "{err}");
    }

    #[test]
    fn extra_columns_ignored() {
        let src = "id,frame,xAcceleration,x,y,width,height,xVelocity,yVelocity,laneId\n1,0,0.3,10,4,5,2,30,0,2\n";
        let tracks = parse_tracks(src.as_bytes()).unwrap();
        assert_eq!(tracks[0].states[0].x, 10.0);
    }

    #[test]
    fn direction_filter() {
        let forward = track(1, 3, 30.0);
        let backward = track(2, 3, -28.0);
        assert_eq!(backward.direction, Direction::NegativeX);
        let kept = filter_direction(vec![forward.clone(), backward]);
        assert_eq!(kept, vec![forward.clone()]);
        assert!(filter_direction(Vec::new()).is_empty());
        let all = vec![forward.clone(), track(3, 2, 12.0)];
        assert_eq!(filter_direction(all.clone()), all);
    }

    #[test]
    fn pixel_conversion() {
        let meta = RecordingMeta::default();
        assert_eq!(meters_to_pixels(0.0, &meta), 0);
        assert_eq!(meters_to_pixels(0.10106, &meta), 1);
        // 27 / 0.10106 = 267.168...
        assert_eq!(meters_to_pixels(27.0, &meta), 267);
        assert_eq!(meters_to_pixels(6.0, &meta), 59);
        assert_eq!(meters_to_pixels(-27.0, &meta), -268);
    }

    #[test]
    fn target_selection_threshold() {
        let meta = RecordingMeta::default();
        assert_eq!(min_target_frames(&meta), 200);
        let tracks = vec![track(1, 199, 30.0), track(2, 200, 30.0), track(3, 400, 0.0)];
        assert_eq!(select_target_vehicles(&tracks, &meta), vec![2]);
    }

    #[test]
    fn meta_parsing() {
        let src = "id,frameRate,locationId,upperLaneMarkings,lowerLaneMarkings\n1,25,2,8.51;12.59;16.43,21.68;25.8;29.94\n";
        let meta = parse_meta(src.as_bytes()).unwrap();
        assert_eq!(meta.frame_rate, 25.0);
        assert_eq!(meta.meters_per_pixel, HIGHD_METERS_PER_PIXEL);
        assert_eq!(meta.lane_boundaries.len(), 6);
        assert_eq!(meta.lateral_extent(), Some((8.51, 29.94)));

        let mut out = Vec::new();
        write_meta(&meta, &mut out).unwrap();
        assert_eq!(parse_meta(out.as_slice()).unwrap(), meta);
    }

    #[test]
    fn meta_rejects_nonpositive_scale() {
        let src = "id,frameRate,metersPerPixel\n1,25,0\n";
        assert!(parse_meta(src.as_bytes()).is_err());
    }

    fn arb_track(id: VehicleId) -> impl Strategy<Value = Track> {
        (0i64..50, 1usize..30, -40.0f64..40.0, 0.1f64..8.0, 0.1f64..3.0).prop_flat_map(move |(start, n, vx, w, h)| {
            proptest::collection::vec((-1e4f64..1e4, -50.0f64..50.0, -3.0f64..3.0, -5i64..10), n).prop_map(
                move |rows| {
                    let states = rows
                        .into_iter()
                        .enumerate()
                        .map(|(i, (x, y, vy, lane_id))| VehicleState {
                            frame: start + i as i64,
                            x,
                            y,
                            w,
                            h,
                            vx,
                            vy,
                            lane_id,
                        })
                        .collect();
                    Track::new(id, states).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn write_parse_round_trip(a in arb_track(4), b in arb_track(9)) {
            let tracks = vec![a, b];
            let mut buf = Vec::new();
            write_tracks(&tracks, &mut buf).unwrap();
            let parsed = parse_tracks(buf.as_slice()).unwrap();
            prop_assert_eq!(parsed, tracks);
        }

        #[test]
        fn pixels_monotone(a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let meta = RecordingMeta::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(meters_to_pixels(lo, &meta) <= meters_to_pixels(hi, &meta));
        }

        #[test]
        fn pixels_exact_on_multiples(k in 0i64..100_000) {
            let meta = RecordingMeta::default();
            prop_assert_eq!(meters_to_pixels(k as f64 * meta.meters_per_pixel, &meta), k);
        }

        #[test]
        fn targets_subset_of_forward(vxs in proptest::collection::vec(-30.0f64..30.0, 1..8)) {
            let meta = RecordingMeta::default();
            let tracks: Vec<Track> = vxs.iter().enumerate().map(|(i, &vx)| track(i as u64, 200 + i as i64, vx)).collect();
            let forward: Vec<VehicleId> = filter_direction(tracks.clone()).iter().map(|t| t.id).collect();
            for id in select_target_vehicles(&tracks, &meta) {
                prop_assert!(forward.contains(&id));
            }
        }
    }
}
