//! Weight-shared convolutional encoder applied to every grid cell.
//!
//! Each cell's 19 history frames enter as input channels:
//! `19x16x32 -> conv5x5/2 -> 16x8x16 -> conv5x5/2 -> 8x4x8 -> maxpool2x2/2 -> 8x2x4`,
//! flattened channel-major into a 64-vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_backward, Conv2d, FeatureMap, MaxPool2d};
use crate::raster::{partition_grid, GridSpec, SceneRaster};
use crate::window::HISTORY_FRAMES;

pub const PATCH_HEIGHT: usize = 16;
pub const PATCH_WIDTH: usize = 32;
pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 8;
pub const FEATURE_DIM: usize = 64;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

const POOL: MaxPool2d = MaxPool2d {
    kernel: (2, 2),
    stride: (2, 2),
};

/// One grid cell's history, time as channels: `19 x 16 x 32`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStack(FeatureMap);

impl PatchStack {
    pub fn new(values: FeatureMap) -> Result<Self> {
        if values.shape() != (HISTORY_FRAMES, PATCH_HEIGHT, PATCH_WIDTH) {
            return Err(Error::shape(
                format!("{HISTORY_FRAMES}x{PATCH_HEIGHT}x{PATCH_WIDTH} patch stack"),
                format!("{:?}", values.shape()),
            ));
        }
        if values.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("patch stack has non-finite values".into()));
        }
        Ok(PatchStack(values))
    }

    pub fn values(&self) -> &FeatureMap {
        &self.0
    }
}

/// Splits 19 history rasters into per-cell stacks, indexed `row * cols + col`.
pub fn patch_stacks(history: &[SceneRaster], grid: &GridSpec) -> Result<Vec<PatchStack>> {
    if history.len() != HISTORY_FRAMES {
        return Err(Error::shape(format!("{HISTORY_FRAMES} history rasters"), history.len()));
    }
    if (grid.patch_height, grid.patch_width) != (PATCH_HEIGHT, PATCH_WIDTH) {
        return Err(Error::shape(
            format!("{PATCH_HEIGHT}x{PATCH_WIDTH} patches"),
            format!("{}x{}", grid.patch_height, grid.patch_width),
        ));
    }
    let per_frame = history
        .iter()
        .map(|r| partition_grid(r, grid))
        .collect::<Result<Vec<_>>>()?;
    let plane = PATCH_HEIGHT * PATCH_WIDTH;
    (0..grid.cells())
        .map(|cell| {
            let mut data = Vec::with_capacity(HISTORY_FRAMES * plane);
            for frame in &per_frame {
                data.extend(frame[cell].iter().map(|&v| v as f64));
            }
            PatchStack::new(FeatureMap::from_vec(HISTORY_FRAMES, PATCH_HEIGHT, PATCH_WIDTH, data))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub leaky_slope: f64,
}

impl EncoderParams {
    pub fn zeros(leaky_slope: f64) -> Self {
        EncoderParams {
            conv1: Conv2d::zeros(HISTORY_FRAMES, CONV1_CHANNELS, (5, 5), (2, 2), (2, 2)),
            conv2: Conv2d::zeros(CONV1_CHANNELS, CONV2_CHANNELS, (5, 5), (2, 2), (2, 2)),
            leaky_slope,
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.conv1.init(rng);
        self.conv2.init(rng);
    }
}

/// Intermediate activations of one patch, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct PatchTrace {
    pub z1: FeatureMap,
    pub a1: FeatureMap,
    pub z2: FeatureMap,
    pub a2: FeatureMap,
    pub pooled: FeatureMap,
    argmax: Vec<usize>,
}

pub fn encode_patch_traced(patch: &PatchStack, params: &EncoderParams) -> PatchTrace {
    let z1 = params.conv1.forward(patch.values());
    let a1 = leaky_relu(&z1, params.leaky_slope);
    let z2 = params.conv2.forward(&a1);
    let a2 = leaky_relu(&z2, params.leaky_slope);
    let (pooled, argmax) = POOL.forward(&a2);
    PatchTrace {
        z1,
        a1,
        z2,
        a2,
        pooled,
        argmax,
    }
}

/// 64-dimensional summary of one cell's history.
pub fn encode_patch(patch: &PatchStack, params: &EncoderParams) -> Vec<f64> {
    encode_patch_traced(patch, params).pooled.data
}

/// Accumulates parameter gradients for one patch given `d loss / d feature`.
pub fn encode_patch_backward(patch: &PatchStack, trace: &PatchTrace, params: &EncoderParams, grad_feature: &[f64], grad: &mut EncoderParams) {
    let p = &trace.pooled;
    let g_pooled = FeatureMap::from_vec(p.c, p.h, p.w, grad_feature.to_vec());
    let g_a2 = MaxPool2d::backward(trace.a2.shape(), &trace.argmax, &g_pooled);
    let g_z2 = leaky_relu_backward(&trace.z2, &g_a2, params.leaky_slope);
    let g_a1 = params
        .conv2
        .backward(&trace.a1, &g_z2, &mut grad.conv2, true)
        .expect("input gradient requested");
    let g_z1 = leaky_relu_backward(&trace.z1, &g_a1, params.leaky_slope);
    // The raster input is data; no gradient needed past conv1.
    params.conv1.backward(patch.values(), &g_z1, &mut grad.conv1, false);
}

/// `rows x cols x 64` grid of cell features, indexed `[row][col][feature]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialTensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SocialTensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols * FEATURE_DIM {
            return Err(Error::shape(format!("{rows}x{cols}x{FEATURE_DIM} social tensor"), values.len()));
        }
        Ok(SocialTensor { rows, cols, values })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, FEATURE_DIM)
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * FEATURE_DIM;
        &self.values[start..start + FEATURE_DIM]
    }
}

pub fn encode_stacks(stacks: &[PatchStack], params: &EncoderParams, grid: &GridSpec) -> Result<(SocialTensor, Vec<PatchTrace>)> {
    if stacks.len() != grid.cells() {
        return Err(Error::shape(format!("{} patch stacks", grid.cells()), stacks.len()));
    }
    let traces: Vec<PatchTrace> = stacks.iter().map(|s| encode_patch_traced(s, params)).collect();
    let values = traces.iter().flat_map(|t| t.pooled.data.iter().copied()).collect();
    Ok((SocialTensor::new(grid.rows, grid.cols, values)?, traces))
}

/// Encodes each grid cell of the history and lays the features out in grid order.
pub fn encode_scene(history: &[SceneRaster], params: &EncoderParams, grid: &GridSpec) -> Result<SocialTensor> {
    let stacks = patch_stacks(history, grid)?;
    Ok(encode_stacks(&stacks, params, grid)?.0)
}
