//! Target-centred top-view occupancy rasters.
//!
//! Pixel frame conventions: columns run along the road (x), rows run across
//! it (y, growing downward as in the HighD footage). A [`RoiBox`] is a pair of
//! half-open pixel intervals in the full-road pixel frame.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::ingest::{meters_to_pixels, RecordingMeta, VehicleId, VehicleState};

pub const RASTER_HEIGHT: usize = 48;
pub const RASTER_WIDTH: usize = 416;
/// Longitudinal margin ahead of and behind the target vehicle (90 ft).
pub const LONGITUDINAL_MARGIN_M: f64 = 27.0;
pub const LATERAL_MARGIN_M: f64 = 6.0;

pub const TARGET_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
const BACKGROUND: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiBox {
    pub back: i64,
    pub front: i64,
    pub top: i64,
    pub bottom: i64,
}

impl RoiBox {
    pub fn width(&self) -> usize {
        (self.front - self.back) as usize
    }

    pub fn height(&self) -> usize {
        (self.bottom - self.top) as usize
    }
}

/// One vehicle as seen at a single frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameVehicle {
    pub id: VehicleId,
    pub state: VehicleState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRaster {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height * width` values in `[0, 1]`.
    pub occupancy: Vec<f32>,
    pub roi: RoiBox,
    pub tv_id: VehicleId,
    pub frame: i64,
}

impl SceneRaster {
    pub fn is_canonical(&self) -> bool {
        self.height == RASTER_HEIGHT && self.width == RASTER_WIDTH && self.occupancy.len() == RASTER_HEIGHT * RASTER_WIDTH
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.occupancy[row * self.width + col]
    }

    pub fn mass(&self) -> f64 {
        self.occupancy.iter().map(|&v| v as f64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub patch_height: usize,
    pub patch_width: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 3,
            cols: 13,
            patch_height: 16,
            patch_width: 32,
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Region of interest around the target: 27 m behind its rear and ahead of
/// its front, 6 m beyond each side. Margins are converted once from meters.
pub fn compute_roi(tv: &VehicleState, meta: &RecordingMeta) -> RoiBox {
    let px = |v: f64| meters_to_pixels(v, meta);
    let long = px(LONGITUDINAL_MARGIN_M);
    let lat = px(LATERAL_MARGIN_M);
    RoiBox {
        back: px(tv.x) - long,
        front: px(tv.x + tv.w) + long,
        top: px(tv.y) - lat,
        bottom: px(tv.y + tv.h) + lat,
    }
}

/// Pixel rectangle `(col0, col1, row0, row1)`, half-open, in the road frame.
fn pixel_rect(state: &VehicleState, meta: &RecordingMeta) -> (i64, i64, i64, i64) {
    let px = |v: f64| meters_to_pixels(v, meta);
    (px(state.x), px(state.x + state.w), px(state.y), px(state.y + state.h))
}

/// Road extent in pixels, as half-open `(col0, col1, row0, row1)`.
fn road_pixels(meta: &RecordingMeta) -> (i64, i64, i64, i64) {
    let px = |v: f64| meters_to_pixels(v, meta);
    let (row0, row1) = meta
        .lateral_extent()
        .map_or((i64::MIN, i64::MAX), |(lo, hi)| (px(lo), px(hi)));
    (0, px(meta.road_length), row0, row1)
}

/// Draws every vehicle rectangle, clipped to the ROI and road, into an
/// ROI-sized binary image (row-major, `roi.height() * roi.width()`).
pub fn rasterize_rectangles(vehicles: &[FrameVehicle], roi: &RoiBox, meta: &RecordingMeta) -> Vec<f32> {
    let (w, h) = (roi.width(), roi.height());
    let mut image = vec![0.0f32; w * h];
    let (road_c0, road_c1, road_r0, road_r1) = road_pixels(meta);
    let c_lo = roi.back.max(road_c0);
    let c_hi = roi.front.min(road_c1);
    let r_lo = roi.top.max(road_r0);
    let r_hi = roi.bottom.min(road_r1);
    for v in vehicles {
        let (c0, c1, r0, r1) = pixel_rect(&v.state, meta);
        let (c0, c1) = (c0.max(c_lo), c1.min(c_hi));
        let (r0, r1) = (r0.max(r_lo), r1.min(r_hi));
        if c0 >= c1 || r0 >= r1 {
            continue;
        }
        for r in r0..r1 {
            let row = (r - roi.top) as usize * w;
            image[row + (c0 - roi.back) as usize..row + (c1 - roi.back) as usize].fill(1.0);
        }
    }
    image
}

/// Per-destination-cell coverage weights of a 1-D area-averaging resize.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            if src == dst {
                return vec![(o, 1.0)];
            }
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Resizes a row-major image by exact area averaging. Same-size input is
/// returned unchanged.
pub fn resize_area(src: &[f32], src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<f32> {
    if src_h == dst_h && src_w == dst_w {
        return src.to_vec();
    }
    let col_w = area_weights(src_w, dst_w);
    let row_w = area_weights(src_h, dst_h);
    let mut horizontal = vec![0.0f64; src_h * dst_w];
    for r in 0..src_h {
        let line = &src[r * src_w..(r + 1) * src_w];
        for (c, weights) in col_w.iter().enumerate() {
            horizontal[r * dst_w + c] = weights.iter().map(|&(i, wt)| line[i] as f64 * wt).sum();
        }
    }
    let mut out = vec![0.0f32; dst_h * dst_w];
    for (r, weights) in row_w.iter().enumerate() {
        for c in 0..dst_w {
            let v: f64 = weights.iter().map(|&(i, wt)| horizontal[i * dst_w + c] * wt).sum();
            out[r * dst_w + c] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Rasterizes one frame around the target and resizes it to 48x416.
pub fn rasterize_frame(
    vehicles: &[FrameVehicle],
    roi: &RoiBox,
    tv_id: VehicleId,
    frame: i64,
    meta: &RecordingMeta,
) -> Result<SceneRaster> {
    if !vehicles.iter().any(|v| v.id == tv_id) {
        return Err(Error::Integrity(format!("target {tv_id} absent at frame {frame}")));
    }
    let native = rasterize_rectangles(vehicles, roi, meta);
    Ok(SceneRaster {
        height: RASTER_HEIGHT,
        width: RASTER_WIDTH,
        occupancy: resize_area(&native, roi.height(), roi.width(), RASTER_HEIGHT, RASTER_WIDTH),
        roi: *roi,
        tv_id,
        frame,
    })
}

/// Seeded per-vehicle colour. The id is pushed through a keyed bijection of
/// 24-bit integers, so distinct ids below 2^24 get distinct colours.
pub fn vehicle_color(id: VehicleId, seed: u64) -> Rgb<u8> {
    const MASK: u64 = 0xFF_FFFF;
    let key = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) & MASK;
    let mut x = (id ^ key) & MASK;
    x = x.wrapping_mul(0x5BD1E9) & MASK;
    x ^= x >> 12;
    x = x.wrapping_mul(0x2C1B3D) & MASK;
    x ^= x >> 7;
    let mut rgb = [(x >> 16) as u8, (x >> 8) as u8, x as u8];
    if Rgb(rgb) == TARGET_COLOR || Rgb(rgb) == BACKGROUND {
        rgb[2] ^= 0x80;
    }
    Rgb(rgb)
}

/// Human-inspection rendering at native ROI resolution: neighbours in seeded
/// colours, the target in yellow on a black background.
pub fn render_preview(
    vehicles: &[FrameVehicle],
    roi: &RoiBox,
    tv_id: VehicleId,
    meta: &RecordingMeta,
    seed: u64,
) -> RgbImage {
    let mut img = RgbImage::from_pixel(roi.width() as u32, roi.height() as u32, BACKGROUND);
    let ordered = vehicles
        .iter()
        .filter(|v| v.id != tv_id)
        .chain(vehicles.iter().filter(|v| v.id == tv_id));
    for v in ordered {
        let color = if v.id == tv_id { TARGET_COLOR } else { vehicle_color(v.id, seed) };
        let mask = rasterize_rectangles(std::slice::from_ref(v), roi, meta);
        for (i, &m) in mask.iter().enumerate() {
            if m > 0.0 {
                img.put_pixel((i % roi.width()) as u32, (i / roi.width()) as u32, color);
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// A `patch_height x patch_width` tile of a raster, row-major.
pub type Patch = Vec<f32>;

/// Splits a canonical raster into `rows x cols` patches, indexed
/// `[row * cols + col]`.
pub fn partition_grid(raster: &SceneRaster, grid: &GridSpec) -> Result<Vec<Patch>> {
    let (h, w) = (grid.rows * grid.patch_height, grid.cols * grid.patch_width);
    if raster.height != h || raster.width != w || raster.occupancy.len() != h * w {
        return Err(Error::shape(
            format!("{h}x{w} raster"),
            format!("{}x{} ({} values)", raster.height, raster.width, raster.occupancy.len()),
        ));
    }
    let mut patches = Vec::with_capacity(grid.cells());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let mut patch = Vec::with_capacity(grid.patch_height * grid.patch_width);
            for r in 0..grid.patch_height {
                let start = (gr * grid.patch_height + r) * w + gc * grid.patch_width;
                patch.extend_from_slice(&raster.occupancy[start..start + grid.patch_width]);
            }
            patches.push(patch);
        }
    }
    Ok(patches)
}

/// Inverse of [`partition_grid`].
pub fn assemble_grid(patches: &[Patch], grid: &GridSpec) -> Vec<f32> {
    let w = grid.cols * grid.patch_width;
    let mut out = vec![0.0f32; grid.rows * grid.patch_height * w];
    for (i, patch) in patches.iter().enumerate() {
        let (gr, gc) = (i / grid.cols, i % grid.cols);
        for r in 0..grid.patch_height {
            let start = (gr * grid.patch_height + r) * w + gc * grid.patch_width;
            out[start..start + grid.patch_width]
                .copy_from_slice(&patch[r * grid.patch_width..(r + 1) * grid.patch_width]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn state(x: f64, y: f64, w: f64, h: f64) -> VehicleState {
        VehicleState {
            frame: 0,
            x,
            y,
            w,
            h,
            vx: 25.0,
            vy: 0.0,
            lane_id: 1,
        }
    }

    fn open_road() -> RecordingMeta {
        RecordingMeta {
            road_length: 10_000.0,
            ..RecordingMeta::default()
        }
    }

    #[test]
    fn roi_worked_example() {
        let meta = RecordingMeta::default();
        let roi = compute_roi(&state(100.0, 8.0, 5.0, 2.0), &meta);
        assert_eq!(
            roi,
            RoiBox {
                back: 722,
                front: 1305,
                top: 20,
                bottom: 157
            }
        );
    }

    #[test]
    fn roi_may_start_behind_road() {
        let roi = compute_roi(&state(0.0, 8.0, 5.0, 2.0), &RecordingMeta::default());
        assert_eq!(roi.back, -267);
    }

    #[test]
    fn widening_by_one_pixel_moves_front_by_one() {
        let meta = RecordingMeta::default();
        let a = compute_roi(&state(100.0, 8.0, 5.0, 2.0), &meta);
        let b = compute_roi(&state(100.0, 8.0, 5.0 + meta.meters_per_pixel, 2.0), &meta);
        assert_eq!(b.front - a.front, 1);
        assert_eq!(b.back, a.back);
    }

    #[test]
    fn missing_target_is_integrity_error() {
        let meta = open_road();
        let s = state(100.0, 8.0, 5.0, 2.0);
        let roi = compute_roi(&s, &meta);
        let err = rasterize_frame(&[FrameVehicle { id: 2, state: s }], &roi, 1, 0, &meta).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn lone_target_mass_is_its_footprint() {
        let meta = open_road();
        let s = state(100.0, 8.0, 5.0, 2.0);
        let roi = compute_roi(&s, &meta);
        let raster = rasterize_frame(&[FrameVehicle { id: 1, state: s }], &roi, 1, 0, &meta).unwrap();
        assert!(raster.is_canonical());
        // (1038 - 989) x (98 - 79) native pixels, scaled by the resize area ratio.
        let native = 49.0 * 19.0;
        let ratio = (RASTER_HEIGHT * RASTER_WIDTH) as f64 / (roi.width() * roi.height()) as f64;
        assert!((raster.mass() - native * ratio).abs() < 1e-3, "{}", raster.mass());
        assert!(raster.occupancy.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn no_vehicles_is_all_zero() {
        let meta = open_road();
        let roi = compute_roi(&state(100.0, 8.0, 5.0, 2.0), &meta);
        let native = rasterize_rectangles(&[], &roi, &meta);
        let raster = resize_area(&native, roi.height(), roi.width(), RASTER_HEIGHT, RASTER_WIDTH);
        assert!(raster.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_vehicles_without_resize_brute_force() {
        let meta = open_road();
        let s = meta.meters_per_pixel;
        let roi = RoiBox {
            back: 1000,
            front: 1000 + RASTER_WIDTH as i64,
            top: 10,
            bottom: 10 + RASTER_HEIGHT as i64,
        };
        // One vehicle fully inside, one hanging off the front edge.
        let vehicles = [
            FrameVehicle { id: 1, state: state(1100.5 * s, 20.5 * s, 45.2 * s, 19.7 * s) },
            FrameVehicle { id: 2, state: state(1390.3 * s, 40.1 * s, 50.0 * s, 30.0 * s) },
        ];
        let raster = rasterize_frame(&vehicles, &roi, 1, 0, &meta).unwrap();
        let ones = raster.occupancy.iter().filter(|&&v| v == 1.0).count();
        assert!(raster.occupancy.iter().all(|&v| v == 0.0 || v == 1.0));

        let mut expected = 0;
        for r in 0..RASTER_HEIGHT as i64 {
            for c in 0..RASTER_WIDTH as i64 {
                let (pc, pr) = (roi.back + c, roi.top + r);
                // Pixel (pc, pr) is lit when its index lies in some rectangle's floor-bounds.
                let hit = vehicles.iter().any(|v| {
                    let st = &v.state;
                    let inside_c = (st.x / s).floor() as i64 <= pc && pc < ((st.x + st.w) / s).floor() as i64;
                    let inside_r = (st.y / s).floor() as i64 <= pr && pr < ((st.y + st.h) / s).floor() as i64;
                    inside_c && inside_r
                });
                expected += hit as usize;
            }
        }
        assert_eq!(ones, expected);
        assert!(expected > 0);
    }

    #[test]
    fn beyond_road_is_background() {
        let meta = RecordingMeta {
            road_length: 101.0,
            lane_boundaries: vec![0.0, 9.0],
            ..RecordingMeta::default()
        };
        let s = state(100.0, 8.0, 5.0, 2.0);
        let roi = compute_roi(&s, &meta);
        let native = rasterize_rectangles(&[FrameVehicle { id: 1, state: s }], &roi, &meta);
        let lit = native.iter().filter(|&&v| v > 0.0).count();
        // Columns 989..999 and rows 79..89 survive the clip.
        assert_eq!(lit, (999 - 989) * (89 - 79));
    }

    #[test]
    fn preview_is_deterministic_and_marks_target_yellow() {
        let meta = open_road();
        let tv = state(100.0, 8.0, 5.0, 2.0);
        let roi = compute_roi(&tv, &meta);
        let vehicles = [
            FrameVehicle { id: 1, state: tv },
            FrameVehicle { id: 7, state: state(110.0, 8.0, 4.5, 2.0) },
        ];
        let a = render_preview(&vehicles, &roi, 1, &meta, 42);
        let b = render_preview(&vehicles, &roi, 1, &meta, 42);
        assert_eq!(a.as_raw(), b.as_raw());

        let cx = ((100.0 + 2.5) / meta.meters_per_pixel).floor() as i64 - roi.back;
        let cy = ((8.0 + 1.0) / meta.meters_per_pixel).floor() as i64 - roi.top;
        assert_eq!(*a.get_pixel(cx as u32, cy as u32), TARGET_COLOR);

        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save_png(&a, &p1).unwrap();
        save_png(&b, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn palette_distinct_over_thousand_ids() {
        for seed in [0u64, 1, 99] {
            let colors: HashSet<[u8; 3]> = (0..1000u64).map(|id| vehicle_color(id, seed).0).collect();
            assert_eq!(colors.len(), 1000);
            assert!(!colors.contains(&TARGET_COLOR.0));
        }
    }

    fn blank() -> SceneRaster {
        SceneRaster {
            height: RASTER_HEIGHT,
            width: RASTER_WIDTH,
            occupancy: vec![0.0; RASTER_HEIGHT * RASTER_WIDTH],
            roi: RoiBox { back: 0, front: 416, top: 0, bottom: 48 },
            tv_id: 1,
            frame: 0,
        }
    }

    #[test]
    fn partition_zero_and_single_pixel() {
        let grid = GridSpec::default();
        let patches = partition_grid(&blank(), &grid).unwrap();
        assert_eq!(patches.len(), 39);
        assert!(patches.iter().all(|p| p.len() == 512 && p.iter().all(|&v| v == 0.0)));

        let mut r = blank();
        r.occupancy[17 * RASTER_WIDTH + 33] = 1.0;
        let patches = partition_grid(&r, &grid).unwrap();
        for (i, p) in patches.iter().enumerate() {
            let nonzero = p.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, i == 13 + 1, "patch {i}");
        }
    }

    #[test]
    fn partition_rejects_wrong_shape() {
        let mut r = blank();
        r.width = 400;
        r.occupancy.truncate(48 * 400);
        assert!(matches!(partition_grid(&r, &GridSpec::default()), Err(Error::Shape { .. })));
    }

    #[test]
    fn grid_spec_tiles_canonical_raster() {
        let g = GridSpec::default();
        assert_eq!(g.rows * g.patch_height, RASTER_HEIGHT);
        assert_eq!(g.cols * g.patch_width, RASTER_WIDTH);
    }

    proptest! {
        #[test]
        fn partition_reassembles_exactly(values in proptest::collection::vec(0.0f32..=1.0, RASTER_HEIGHT * RASTER_WIDTH)) {
            let mut r = blank();
            r.occupancy = values;
            let grid = GridSpec::default();
            let patches = partition_grid(&r, &grid).unwrap();
            prop_assert_eq!(assemble_grid(&patches, &grid), r.occupancy);
        }

        #[test]
        fn roi_span_formula(x in 0.0f64..400.0, w in 3.0f64..20.0, y in 0.0f64..30.0, h in 1.5f64..3.0) {
            let meta = RecordingMeta::default();
            let roi = compute_roi(&state(x, y, w, h), &meta);
            let px = |v: f64| meters_to_pixels(v, &meta);
            prop_assert!(roi.front > roi.back && roi.bottom > roi.top);
            // floor(x + w) - floor(x) is floor(w) or floor(w) + 1.
            let span = roi.front - roi.back - 2 * px(27.0);
            prop_assert!(span == px(x + w) - px(x));
            prop_assert!(span == px(w) || span == px(w) + 1);
        }

        #[test]
        fn translation_by_whole_pixels_is_exact(
            k in 0i64..2000,
            xs in proptest::collection::vec((0.0f64..30.0, 0.0f64..10.0), 0..4),
        ) {
            let meta = open_road();
            let s = meta.meters_per_pixel;
            let build = |shift: f64| -> Vec<FrameVehicle> {
                let mut v = vec![FrameVehicle { id: 1, state: state(500.37 + shift, 8.21, 4.73, 1.93) }];
                for (i, &(dx, y)) in xs.iter().enumerate() {
                    v.push(FrameVehicle { id: 2 + i as u64, state: state(490.0 + dx + 0.031 + shift, y + 0.017, 4.4, 1.9) });
                }
                v
            };
            let a = build(0.0);
            let b = build(k as f64 * s);
            let ra = rasterize_frame(&a, &compute_roi(&a[0].state, &meta), 1, 0, &meta).unwrap();
            let rb = rasterize_frame(&b, &compute_roi(&b[0].state, &meta), 1, 0, &meta).unwrap();
            prop_assert_eq!(ra.occupancy, rb.occupancy);
        }

        #[test]
        fn mass_never_exceeds_unclipped_area(
            rects in proptest::collection::vec((80.0f64..130.0, 0.0f64..16.0, 3.0f64..6.0, 1.5f64..2.5), 0..6),
        ) {
            let meta = open_road();
            let tv = state(100.0, 8.0, 5.0, 2.0);
            let roi = compute_roi(&tv, &meta);
            let mut vehicles = vec![FrameVehicle { id: 1, state: tv }];
            for (i, &(x, y, w, h)) in rects.iter().enumerate() {
                vehicles.push(FrameVehicle { id: 2 + i as u64, state: state(x, y, w, h) });
            }
            let raster = rasterize_frame(&vehicles, &roi, 1, 0, &meta).unwrap();
            let unclipped: f64 = vehicles.iter().map(|v| {
                let (c0, c1, r0, r1) = pixel_rect(&v.state, &meta);
                ((c1 - c0) * (r1 - r0)) as f64
            }).sum();
            let ratio = (RASTER_HEIGHT * RASTER_WIDTH) as f64 / (roi.width() * roi.height()) as f64;
            prop_assert!(raster.mass() <= unclipped * ratio + 1e-2);
        }
    }
}
