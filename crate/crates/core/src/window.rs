//! Training samples: 19 downsampled history rasters plus 31 future
//! positions relative to the target at the anchor frame.
//!
//! On disk each window lives in `<root>/<split>/<tv_id>/<t>/` as a
//! `window.txt` key/value file and one `raster_NN.bin` per history frame
//! (`u32` height, `u32` width, then little-endian `f32` values).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::{select_target_vehicles, RecordingMeta, Track, VehicleId};
use crate::raster::{compute_roi, rasterize_frame, FrameVehicle, RoiBox, SceneRaster};

pub const DOWNSAMPLE: i64 = 4;
pub const HISTORY_FRAMES: usize = 19;
pub const FUTURE_STEPS: usize = 31;
/// Frames from the oldest history raster to the anchor.
pub const HISTORY_SPAN: i64 = DOWNSAMPLE * (HISTORY_FRAMES as i64 - 1);
pub const FUTURE_SPAN: i64 = DOWNSAMPLE * FUTURE_STEPS as i64;
pub const DEFAULT_STRIDE: i64 = 25;

const FORMAT_TAG: &str = "bevtraj-window-1";
const METADATA_FILE: &str = "window.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Test,
    Eval,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Test, SplitTag::Eval];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::Eval => "eval",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            "eval" => Ok(SplitTag::Eval),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub tv_id: VehicleId,
    /// Anchor frame.
    pub t: i64,
    /// Rasters at frames `t - 72, t - 68, ..., t`.
    pub history: Vec<SceneRaster>,
    /// Target positions at the history frames, relative to the anchor.
    pub history_xy: Vec<(f64, f64)>,
    /// Relative positions at `t + 4k`, `k = 1..=31`, meters.
    pub future: Vec<(f64, f64)>,
    /// Target velocity at the anchor frame, m/s.
    pub velocity: (f64, f64),
    pub split: Option<SplitTag>,
}

impl Window {
    pub fn history_frames(&self) -> impl Iterator<Item = i64> + '_ {
        self.history.iter().map(|r| r.frame)
    }
}

/// All vehicles present at `frame`.
pub fn vehicles_at(tracks: &[Track], frame: i64) -> Vec<FrameVehicle> {
    tracks
        .iter()
        .filter_map(|t| t.state_at(frame).map(|s| FrameVehicle { id: t.id, state: *s }))
        .collect()
}

pub fn extract_window(track: &Track, all_tracks: &[Track], t: i64, meta: &RecordingMeta) -> Result<Window> {
    let (first, last) = (t - HISTORY_SPAN, t + FUTURE_SPAN);
    if first < track.first_frame() || last > track.last_frame() {
        return Err(Error::Range(format!(
            "track {} covers frames {}..={}, window at t={t} needs {first}..={last}",
            track.id,
            track.first_frame(),
            track.last_frame()
        )));
    }
    let state = |frame: i64| {
        track
            .state_at(frame)
            .ok_or_else(|| Error::Integrity(format!("track {} absent at frame {frame}", track.id)))
    };
    let anchor = *state(t)?;

    let mut history = Vec::with_capacity(HISTORY_FRAMES);
    let mut history_xy = Vec::with_capacity(HISTORY_FRAMES);
    for frame in (first..=t).step_by(DOWNSAMPLE as usize) {
        let tv = state(frame)?;
        let roi = compute_roi(tv, meta);
        history.push(rasterize_frame(&vehicles_at(all_tracks, frame), &roi, track.id, frame, meta)?);
        history_xy.push((tv.x - anchor.x, tv.y - anchor.y));
    }
    let future = (1..=FUTURE_STEPS as i64)
        .map(|k| state(t + DOWNSAMPLE * k).map(|s| (s.x - anchor.x, s.y - anchor.y)))
        .collect::<Result<Vec<_>>>()?;

    Ok(Window {
        tv_id: track.id,
        t,
        history,
        history_xy,
        future,
        velocity: (anchor.vx, anchor.vy),
        split: None,
    })
}

/// Admissible anchors for a track, `stride` frames apart.
pub fn anchor_frames(track: &Track, stride: i64) -> Vec<i64> {
    let lo = track.first_frame() + HISTORY_SPAN;
    let hi = track.last_frame() - FUTURE_SPAN;
    if lo > hi || stride <= 0 {
        return Vec::new();
    }
    (lo..=hi).step_by(stride as usize).collect()
}

/// Windows for every selected target vehicle in a recording.
pub fn extract_all(tracks: &[Track], meta: &RecordingMeta, stride: i64) -> Result<Vec<Window>> {
    extract_targets(tracks, meta, &select_target_vehicles(tracks, meta), stride)
}

/// Windows for the given target ids, in id order then anchor order.
pub fn extract_targets(tracks: &[Track], meta: &RecordingMeta, ids: &[VehicleId], stride: i64) -> Result<Vec<Window>> {
    if stride <= 0 {
        return Err(Error::Config(format!("window stride must be positive, got {stride}")));
    }
    let mut out = Vec::new();
    for &id in ids {
        let track = tracks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Integrity(format!("no track with id {id}")))?;
        for t in anchor_frames(track, stride) {
            out.push(extract_window(track, tracks, t, meta)?);
        }
    }
    Ok(out)
}

/// A seeded subset of at most `n` ids, returned sorted.
pub fn sample_ids(ids: &[VehicleId], n: usize, seed: u64) -> Vec<VehicleId> {
    let mut picked = ids.to_vec();
    if picked.len() > n {
        picked.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        picked.truncate(n);
    }
    picked.sort_unstable();
    picked
}

/// Assigns 60/20/20 train/test/eval tags at the vehicle level.
pub fn assign_splits(ids: &BTreeSet<VehicleId>, seed: u64) -> Result<BTreeMap<VehicleId, SplitTag>> {
    let n = ids.len();
    if n < 5 {
        return Err(Error::Split(format!("need at least 5 target vehicles to split 60/20/20, got {n}")));
    }
    let mut order: Vec<VehicleId> = ids.iter().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.6 * n as f64).round() as usize;
    let n_test = (0.2 * n as f64).round() as usize;
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let tag = if i < n_train {
                SplitTag::Train
            } else if i < n_train + n_test {
                SplitTag::Test
            } else {
                SplitTag::Eval
            };
            (id, tag)
        })
        .collect())
}

pub fn split_dataset(mut windows: Vec<Window>, seed: u64) -> Result<Vec<Window>> {
    let ids: BTreeSet<VehicleId> = windows.iter().map(|w| w.tv_id).collect();
    let tags = assign_splits(&ids, seed)?;
    for w in &mut windows {
        w.split = Some(tags[&w.tv_id]);
    }
    Ok(windows)
}

pub fn window_dir(root: &Path, window: &Window) -> PathBuf {
    let split = window.split.map_or("unsplit", |s| s.as_str());
    root.join(split).join(window.tv_id.to_string()).join(window.t.to_string())
}

fn raster_file(i: usize) -> String {
    format!("raster_{i:02}.bin")
}

/// Writes a window record into `dir`, creating it if needed.
pub fn save_window(window: &Window, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = String::new();
    let mut line = |s: String| {
        text.push_str(&s);
        text.push('\n');
    };
    line(format!("format = {FORMAT_TAG}"));
    line(format!("tv_id = {}", window.tv_id));
    line(format!("t = {}", window.t));
    if let Some(split) = window.split {
        line(format!("split = {split}"));
    }
    line(format!("velocity = {} {}", window.velocity.0, window.velocity.1));
    line(format!("history_frames = {}", window.history.len()));
    line(format!("future_steps = {}", window.future.len()));
    for (i, (r, (x, y))) in window.history.iter().zip(&window.history_xy).enumerate() {
        line(format!(
            "history {i} = {} {} {} {} {} {} {} {x} {y}",
            r.frame, r.tv_id, r.roi.back, r.roi.front, r.roi.top, r.roi.bottom, r.occupancy.len()
        ));
    }
    for (k, (x, y)) in window.future.iter().enumerate() {
        line(format!("future {} = {x} {y}", k + 1));
    }
    let meta_path = dir.join(METADATA_FILE);
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

    for (i, raster) in window.history.iter().enumerate() {
        let path = dir.join(raster_file(i));
        let mut bytes = Vec::with_capacity(8 + 4 * raster.occupancy.len());
        bytes.extend_from_slice(&(raster.height as u32).to_le_bytes());
        bytes.extend_from_slice(&(raster.width as u32).to_le_bytes());
        for v in &raster.occupancy {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read_raster(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |reason: String| Error::Record {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(bad("truncated shape header".into()));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * h * w {
        return Err(bad(format!("expected {} bytes of {h}x{w} data, found {}", 4 * h * w, body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, values))
}

pub fn load_window(dir: &Path) -> Result<Window> {
    let meta_path = dir.join(METADATA_FILE);
    let bad = |reason: String| Error::Record {
        path: meta_path.clone(),
        reason,
    };
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected `key = value`", n + 1)))?;
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    let field = |key: &str| fields.get(key).ok_or_else(|| bad(format!("missing `{key}`")));
    fn parse<T: FromStr>(raw: &str, what: &str) -> std::result::Result<T, String> {
        raw.parse::<T>().map_err(|_| format!("bad {what}: `{raw}`"))
    }
    let pair = |raw: &str, what: &str| -> Result<(f64, f64)> {
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(bad(format!("{what} needs two numbers")));
        }
        Ok((parse(parts[0], what).map_err(bad)?, parse(parts[1], what).map_err(bad)?))
    };

    if field("format")? != FORMAT_TAG {
        return Err(bad(format!("unsupported format `{}`", field("format")?)));
    }
    let tv_id: VehicleId = parse(field("tv_id")?, "tv_id").map_err(bad)?;
    let t: i64 = parse(field("t")?, "t").map_err(bad)?;
    let split = fields.get("split").map(|s| s.parse::<SplitTag>()).transpose()?;
    let velocity = pair(field("velocity")?, "velocity")?;
    let n_history: usize = parse(field("history_frames")?, "history_frames").map_err(bad)?;
    let n_future: usize = parse(field("future_steps")?, "future_steps").map_err(bad)?;
    if n_history != HISTORY_FRAMES {
        return Err(bad(format!("expected {HISTORY_FRAMES} history rasters, record has {n_history}")));
    }
    if n_future != FUTURE_STEPS {
        return Err(bad(format!("expected {FUTURE_STEPS} future steps, record has {n_future}")));
    }

    let mut history = Vec::with_capacity(n_history);
    let mut history_xy = Vec::with_capacity(n_history);
    for i in 0..n_history {
        let raw = field(&format!("history {i}"))?;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.len() != 9 {
            return Err(bad(format!("history {i}: expected 9 fields")));
        }
        let int = |j: usize| parse::<i64>(parts[j], "history field").map_err(bad);
        let frame = int(0)?;
        let raster_tv: VehicleId = parse(parts[1], "history tv").map_err(bad)?;
        let roi = RoiBox {
            back: int(2)?,
            front: int(3)?,
            top: int(4)?,
            bottom: int(5)?,
        };
        let len: usize = parse(parts[6], "history length").map_err(bad)?;
        let xy = (
            parse(parts[7], "history x").map_err(bad)?,
            parse(parts[8], "history y").map_err(bad)?,
        );
        let (height, width, occupancy) = read_raster(&dir.join(raster_file(i)))?;
        if occupancy.len() != len {
            return Err(bad(format!("history {i}: metadata says {len} values, file has {}", occupancy.len())));
        }
        history.push(SceneRaster {
            height,
            width,
            occupancy,
            roi,
            tv_id: raster_tv,
            frame,
        });
        history_xy.push(xy);
    }
    if dir.join(raster_file(n_history)).exists() {
        return Err(bad(format!("unexpected extra raster {}", raster_file(n_history))));
    }
    let future = (1..=n_future)
        .map(|k| pair(field(&format!("future {k}"))?, "future"))
        .collect::<Result<Vec<_>>>()?;

    Ok(Window {
        tv_id,
        t,
        history,
        history_xy,
        future,
        velocity,
        split,
    })
}

/// Saves windows under `root` in the split/tv/t layout. Returns the
/// directories written, in input order.
pub fn save_windows(root: &Path, windows: &[Window]) -> Result<Vec<PathBuf>> {
    windows
        .iter()
        .map(|w| {
            let dir = window_dir(root, w);
            save_window(w, &dir).map(|_| dir)
        })
        .collect()
}

/// Window directories of one split, sorted by (tv_id, t).
pub fn list_split(root: &Path, split: SplitTag) -> Result<Vec<PathBuf>> {
    let base = root.join(split.as_str());
    if !base.exists() {
        return Ok(Vec::new());
    }
    let numeric_dirs = |dir: &Path| -> Result<Vec<(i64, PathBuf)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if let Some(n) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<i64>().ok()) {
                if path.is_dir() {
                    out.push((n, path));
                }
            }
        }
        out.sort();
        Ok(out)
    };
    let mut out = Vec::new();
    for (_, tv_dir) in numeric_dirs(&base)? {
        for (_, t_dir) in numeric_dirs(&tv_dir)? {
            if t_dir.join(METADATA_FILE).exists() {
                out.push(t_dir);
            }
        }
    }
    Ok(out)
}

pub fn load_split(root: &Path, split: SplitTag) -> Result<Vec<Window>> {
    list_split(root, split)?.iter().map(|d| load_window(d)).collect()
}
