//! Per-horizon RMSE, kinematic baselines and report artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::decoder::{predicted_means, GaussianSequence, STEP_SECONDS};
use crate::error::{Error, Result};
use crate::ingest::{meters_to_pixels, RecordingMeta};
use crate::raster::{save_png, RASTER_HEIGHT, RASTER_WIDTH};
use crate::window::{Window, FUTURE_STEPS};

pub const HORIZONS_SECONDS: [u32; 5] = [1, 2, 3, 4, 5];

/// Published per-second RMSE (meters) of comparison methods on HighD, for display.
pub const REFERENCE_ROWS: [(&str, [f64; 5]); 5] = [
    ("S-LSTM", [0.22, 0.62, 1.27, 2.15, 3.41]),
    ("CS-LSTM", [0.22, 0.61, 1.24, 2.10, 3.27]),
    ("CS-LSTM(M)", [0.23, 0.615, 1.29, 2.18, 3.31]),
    ("NLS-LSTM", [0.20, 0.57, 1.14, 1.9, 2.91]),
    ("reference", [0.42, 0.88, 1.26, 1.57, 1.91]),
];

/// Future step (1-based) closest to `seconds`: `round(25 s / 4)`, half up,
/// clamped to `[1, 31]`.
pub fn horizon_step(seconds: f64) -> usize {
    let k = (25.0 * seconds / 4.0 + 0.5).floor();
    (k.max(1.0) as usize).min(FUTURE_STEPS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonRow {
    pub seconds: u32,
    pub step: usize,
    pub rmse: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonReport {
    pub label: String,
    pub rows: Vec<HorizonRow>,
}

impl HorizonReport {
    pub fn rmse(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.rmse).collect()
    }

    pub fn at(&self, seconds: u32) -> Option<f64> {
        self.rows.iter().find(|r| r.seconds == seconds).map(|r| r.rmse)
    }
}

/// RMSE of point predictions against truths at each horizon; `N` is the
/// number of windows.
pub fn rmse_per_horizon(label: &str, predictions: &[Vec<(f64, f64)>], truths: &[Vec<(f64, f64)>]) -> Result<HorizonReport> {
    if predictions.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut rows = Vec::with_capacity(HORIZONS_SECONDS.len());
    for &s in &HORIZONS_SECONDS {
        let k = horizon_step(s as f64);
        let mut sum = 0.0;
        for (i, (p, t)) in predictions.iter().zip(truths).enumerate() {
            let (Some(a), Some(b)) = (p.get(k - 1), t.get(k - 1)) else {
                return Err(Error::Evaluation(format!("window {i} has no step {k}")));
            };
            sum += (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
        }
        rows.push(HorizonRow {
            seconds: s,
            step: k,
            rmse: (sum / predictions.len() as f64).sqrt(),
            sample_count: predictions.len(),
        });
    }
    Ok(HorizonReport { label: label.to_string(), rows })
}

pub fn rmse_of_sequences(label: &str, predictions: &[GaussianSequence], windows: &[Window]) -> Result<HorizonReport> {
    let means: Vec<_> = predictions.iter().map(predicted_means).collect();
    let truths: Vec<_> = windows.iter().map(|w| w.future.clone()).collect();
    rmse_per_horizon(label, &means, &truths)
}

pub fn constant_velocity_baseline(window: &Window) -> Vec<(f64, f64)> {
    let (vx, vy) = window.velocity;
    (1..=FUTURE_STEPS)
        .map(|k| {
            let dt = STEP_SECONDS * k as f64;
            (vx * dt, vy * dt)
        })
        .collect()
}

pub fn constant_position_baseline(_window: &Window) -> Vec<(f64, f64)> {
    vec![(0.0, 0.0); FUTURE_STEPS]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    ConstantVelocity,
    ConstantPosition,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::ConstantVelocity => "constant-velocity",
            Baseline::ConstantPosition => "constant-position",
        }
    }

    pub fn predict(self, window: &Window) -> Vec<(f64, f64)> {
        match self {
            Baseline::ConstantVelocity => constant_velocity_baseline(window),
            Baseline::ConstantPosition => constant_position_baseline(window),
        }
    }

    /// Parses `cv`/`cp` (or the full labels).
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "cv" | "constant-velocity" => Ok(Baseline::ConstantVelocity),
            "cp" | "constant-position" => Ok(Baseline::ConstantPosition),
            other => Err(Error::Config(format!("unknown baseline `{other}` (expected cv or cp)"))),
        }
    }
}

pub fn evaluate_baseline(baseline: Baseline, windows: &[Window]) -> Result<HorizonReport> {
    let preds: Vec<_> = windows.iter().map(|w| baseline.predict(w)).collect();
    let truths: Vec<_> = windows.iter().map(|w| w.future.clone()).collect();
    rmse_per_horizon(baseline.label(), &preds, &truths)
}

/// Comma-separated table: one row per report, then optionally the
/// published rows.
pub fn report_table(reports: &[HorizonReport], include_reference: bool) -> String {
    let mut s = String::from("model");
    for h in HORIZONS_SECONDS {
        let _ = write!(s, ",rmse_{h}s");
    }
    s.push_str(",windows\n");
    for r in reports {
        s.push_str(&r.label);
        for h in HORIZONS_SECONDS {
            match r.at(h) {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push(','),
            }
        }
        let n = r.rows.first().map_or(0, |row| row.sample_count);
        let _ = writeln!(s, ",{n}");
    }
    if include_reference {
        for (name, vals) in REFERENCE_ROWS {
            s.push_str(name);
            for v in vals {
                let _ = write!(s, ",{v}");
            }
            s.push_str(",\n");
        }
    }
    s
}

const PALETTE: [Rgb<u8>; 8] = [
    Rgb([220, 40, 40]),
    Rgb([40, 120, 220]),
    Rgb([40, 170, 60]),
    Rgb([230, 150, 20]),
    Rgb([140, 60, 190]),
    Rgb([20, 170, 170]),
    Rgb([120, 120, 120]),
    Rgb([200, 90, 150]),
];

/// RMSE-vs-horizon line chart, one polyline per series. Axes start at zero;
/// the vertical scale fits the largest value.
pub fn render_rmse_chart(series: &[(String, [f64; 5])]) -> RgbImage {
    let (w, h) = (640u32, 400u32);
    let (left, right, top, bottom) = (50.0f32, 20.0f32, 20.0f32, 40.0f32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.05;
    let x_of = |i: usize| left + (i as f32 + 0.5) * (w as f32 - left - right) / 5.0;
    let y_of = |v: f64| h as f32 - bottom - (v / ymax) as f32 * (h as f32 - top - bottom);
    let axis = Rgb([0, 0, 0]);
    let grid = Rgb([225, 225, 225]);
    for g in 1..=4 {
        let y = y_of(ymax * g as f64 / 5.0);
        draw_line_segment_mut(&mut img, (left, y), (w as f32 - right, y), grid);
    }
    draw_line_segment_mut(&mut img, (left, top), (left, h as f32 - bottom), axis);
    draw_line_segment_mut(&mut img, (left, h as f32 - bottom), (w as f32 - right, h as f32 - bottom), axis);
    for i in 0..5 {
        let x = x_of(i);
        draw_line_segment_mut(&mut img, (x, h as f32 - bottom), (x, h as f32 - bottom + 6.0), axis);
    }
    for (n, (_, vals)) in series.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        for i in 0..5 {
            if !vals[i].is_finite() {
                continue;
            }
            let p = (x_of(i), y_of(vals[i]));
            draw_filled_circle_mut(&mut img, (p.0 as i32, p.1 as i32), 3, color);
            if i + 1 < 5 && vals[i + 1].is_finite() {
                draw_line_segment_mut(&mut img, p, (x_of(i + 1), y_of(vals[i + 1])), color);
            }
        }
    }
    img
}

pub const HISTORY_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
pub const TRUTH_COLOR: Rgb<u8> = Rgb([0, 200, 0]);
pub const PREDICTION_COLOR: Rgb<u8> = Rgb([230, 0, 0]);

/// The window's last history raster in gray, widened to the right when the
/// future leaves the region, with history (white), ground truth (green) and
/// predicted means (red) as dots. Coordinates are relative to the target at
/// the anchor frame.
pub fn render_overlay(window: &Window, prediction: Option<&[(f64, f64)]>, meta: &RecordingMeta, scale: u32) -> Result<RgbImage> {
    let last = window
        .history
        .last()
        .ok_or_else(|| Error::Evaluation("window has no history".into()))?;
    let roi = last.roi;
    let mpp = meta.meters_per_pixel;
    let sx = RASTER_WIDTH as f64 / roi.width() as f64;
    let sy = RASTER_HEIGHT as f64 / roi.height() as f64;
    // The target's upper-left corner sits one margin in from the ROI corner.
    let margin_long = meters_to_pixels(crate::raster::LONGITUDINAL_MARGIN_M, meta) as f64;
    let margin_lat = meters_to_pixels(crate::raster::LATERAL_MARGIN_M, meta) as f64;
    let to_canvas = |(x, y): (f64, f64)| (((margin_long + x / mpp) * sx), ((margin_lat + y / mpp) * sy));

    let all_x = window
        .future
        .iter()
        .chain(prediction.unwrap_or(&[]))
        .map(|p| to_canvas(*p).0)
        .fold(RASTER_WIDTH as f64, f64::max);
    let width = (all_x.ceil() as u32 + 4).min(RASTER_WIDTH as u32 * 4);
    let height = RASTER_HEIGHT as u32;
    let mut img = RgbImage::from_pixel(width * scale, height * scale, Rgb([0, 0, 0]));
    for r in 0..RASTER_HEIGHT {
        for c in 0..RASTER_WIDTH {
            let g = (last.at(r, c).clamp(0.0, 1.0) * 110.0) as u8;
            if g == 0 {
                continue;
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(c as u32 * scale + dx, r as u32 * scale + dy, Rgb([g, g, g]));
                }
            }
        }
    }
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(0, 0).of_size(RASTER_WIDTH as u32 * scale, height * scale),
        Rgb([70, 70, 70]),
    );
    let mut dots = |pts: &[(f64, f64)], color: Rgb<u8>| {
        for &p in pts {
            let (cx, cy) = to_canvas(p);
            if !(cx.is_finite() && cy.is_finite()) {
                continue;
            }
            let (px, py) = ((cx * scale as f64) as i32, (cy * scale as f64) as i32);
            draw_filled_circle_mut(&mut img, (px, py), scale.max(2) as i32 / 2 + 1, color);
        }
    };
    dots(&window.history_xy, HISTORY_COLOR);
    dots(&window.future, TRUTH_COLOR);
    if let Some(p) = prediction {
        dots(p, PREDICTION_COLOR);
    }
    Ok(img)
}

/// What [`write_report`] produced.
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub chart: PathBuf,
    pub overlays: Vec<PathBuf>,
}

/// Writes `rmse.csv`, `rmse_vs_horizon.png` and one overlay per qualitative window.
pub fn write_report(
    dir: &Path,
    reports: &[HorizonReport],
    include_reference: bool,
    overlays: &[(Window, Option<Vec<(f64, f64)>>)],
    meta: &RecordingMeta,
) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = dir.join("rmse.csv");
    fs::write(&table, report_table(reports, include_reference)).map_err(|e| Error::io(&table, e))?;

    let mut series: Vec<(String, [f64; 5])> = reports
        .iter()
        .map(|r| {
            let mut v = [f64::NAN; 5];
            for (i, h) in HORIZONS_SECONDS.iter().enumerate() {
                v[i] = r.at(*h).unwrap_or(f64::NAN);
            }
            (r.label.clone(), v)
        })
        .collect();
    if include_reference {
        series.extend(REFERENCE_ROWS.iter().map(|(n, v)| (n.to_string(), *v)));
    }
    let chart = dir.join("rmse_vs_horizon.png");
    save_png(&render_rmse_chart(&series), &chart)?;

    let mut paths = Vec::new();
    for (w, pred) in overlays {
        let img = render_overlay(w, pred.as_deref(), meta, 3)?;
        let path = dir.join(format!("overlay_{}_{}.png", w.tv_id, w.t));
        save_png(&img, &path)?;
        paths.push(path);
    }
    Ok(ReportFiles {
        table,
        chart,
        overlays: paths,
    })
}
