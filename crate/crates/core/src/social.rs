//! Convolution and pooling over the social tensor.
//!
//! The 64 features act as channels over a 13 (longitudinal) x 3 (lateral)
//! map: `conv3x3 -> 11x1`, `conv3x1 -> 9x1`, `maxpool3x1/2 -> 4x1`, with 16
//! output channels flattened channel-major into the 64-dim context.
//!
//! The pool window is 3 long so the four windows cover all nine positions;
//! a 2-long window would drop the last one and with it grid column 12.

use rand::Rng;

use crate::encoder::{SocialTensor, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_backward, Conv2d, FeatureMap, MaxPool2d};

pub const CONTEXT_DIM: usize = 64;
pub const POOL_CONV2_CHANNELS: usize = 16;
const GRID_ROWS: usize = 3;
const GRID_COLS: usize = 13;

const POOL: MaxPool2d = MaxPool2d {
    kernel: (3, 1),
    stride: (2, 1),
};

#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub leaky_slope: f64,
}

impl PoolParams {
    pub fn zeros(leaky_slope: f64) -> Self {
        PoolParams {
            conv1: Conv2d::zeros(FEATURE_DIM, FEATURE_DIM, (3, 3), (1, 1), (0, 0)),
            conv2: Conv2d::zeros(FEATURE_DIM, POOL_CONV2_CHANNELS, (3, 1), (1, 1), (0, 0)),
            leaky_slope,
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.conv1.init(rng);
        self.conv2.init(rng);
    }
}

/// Social tensor re-laid out as `64 x 13 x 3` (channels, longitudinal, lateral).
fn to_feature_map(tensor: &SocialTensor) -> Result<FeatureMap> {
    if tensor.shape() != (GRID_ROWS, GRID_COLS, FEATURE_DIM) || tensor.values.len() != GRID_ROWS * GRID_COLS * FEATURE_DIM {
        return Err(Error::shape(
            format!("{GRID_ROWS}x{GRID_COLS}x{FEATURE_DIM} social tensor"),
            format!("{:?} ({} values)", tensor.shape(), tensor.values.len()),
        ));
    }
    let mut fm = FeatureMap::zeros(FEATURE_DIM, GRID_COLS, GRID_ROWS);
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            for (f, &v) in tensor.cell(r, c).iter().enumerate() {
                let at = fm.idx(f, c, r);
                fm.data[at] = v;
            }
        }
    }
    Ok(fm)
}

fn from_feature_map(fm: &FeatureMap) -> Vec<f64> {
    let mut out = vec![0.0; GRID_ROWS * GRID_COLS * FEATURE_DIM];
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            for f in 0..FEATURE_DIM {
                out[(r * GRID_COLS + c) * FEATURE_DIM + f] = fm.data[fm.idx(f, c, r)];
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PoolTrace {
    input: FeatureMap,
    pub z1: FeatureMap,
    a1: FeatureMap,
    pub z2: FeatureMap,
    a2: FeatureMap,
    pub pooled: FeatureMap,
    argmax: Vec<usize>,
}

pub fn pool_social_traced(tensor: &SocialTensor, params: &PoolParams) -> Result<(ContextVector, PoolTrace)> {
    let input = to_feature_map(tensor)?;
    if input.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("social tensor has non-finite values".into()));
    }
    let z1 = params.conv1.forward(&input);
    let a1 = leaky_relu(&z1, params.leaky_slope);
    let z2 = params.conv2.forward(&a1);
    let a2 = leaky_relu(&z2, params.leaky_slope);
    let (pooled, argmax) = POOL.forward(&a2);
    debug_assert_eq!(pooled.data.len(), CONTEXT_DIM);
    let context = ContextVector(pooled.data.clone());
    Ok((
        context,
        PoolTrace {
            input,
            z1,
            a1,
            z2,
            a2,
            pooled,
            argmax,
        },
    ))
}

pub fn pool_social(tensor: &SocialTensor, params: &PoolParams) -> Result<ContextVector> {
    pool_social_traced(tensor, params).map(|(c, _)| c)
}

/// Accumulates parameter gradients and returns `d loss / d tensor` in the
/// tensor's `[row][col][feature]` layout.
pub fn pool_social_backward(trace: &PoolTrace, params: &PoolParams, grad_context: &[f64], grad: &mut PoolParams) -> Vec<f64> {
    let p = &trace.pooled;
    let g_pooled = FeatureMap::from_vec(p.c, p.h, p.w, grad_context.to_vec());
    let g_a2 = MaxPool2d::backward(trace.a2.shape(), &trace.argmax, &g_pooled);
    let g_z2 = leaky_relu_backward(&trace.z2, &g_a2, params.leaky_slope);
    let g_a1 = params
        .conv2
        .backward(&trace.a1, &g_z2, &mut grad.conv2, true)
        .expect("input gradient requested");
    let g_z1 = leaky_relu_backward(&trace.z1, &g_a1, params.leaky_slope);
    let g_in = params
        .conv1
        .backward(&trace.input, &g_z1, &mut grad.conv1, true)
        .expect("input gradient requested");
    from_feature_map(&g_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> PoolParams {
        let mut p = PoolParams::zeros(0.1);
        p.init(&mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    fn tensor(seed: u64) -> SocialTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SocialTensor::new(3, 13, (0..3 * 13 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shape_chain() {
        // (n - k) / s + 1 along the longitudinal axis: 13 -> 11 -> 9 -> 4.
        let size = |n: usize, k: usize, s: usize| (n - k) / s + 1;
        assert_eq!(size(13, 3, 1), 11);
        assert_eq!(size(11, 3, 1), 9);
        assert_eq!(size(9, 3, 2), 4);
        assert_eq!(size(3, 3, 1), 1);

        let (ctx, trace) = pool_social_traced(&tensor(1), &params(0)).unwrap();
        assert_eq!(trace.z1.shape(), (64, 11, 1));
        assert_eq!(trace.z2.shape(), (16, 9, 1));
        assert_eq!(trace.pooled.shape(), (16, 4, 1));
        assert_eq!(ctx.0.len(), CONTEXT_DIM);
    }

    #[test]
    fn zero_in_zero_out() {
        let mut p = params(2);
        p.conv1.bias.fill(0.0);
        p.conv2.bias.fill(0.0);
        let zero = SocialTensor::new(3, 13, vec![0.0; 3 * 13 * 64]).unwrap();
        assert!(pool_social(&zero, &p).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_shape_rejected() {
        let t = SocialTensor::new(3, 12, vec![0.0; 3 * 12 * 64]).unwrap();
        assert!(matches!(pool_social(&t, &params(0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn every_cell_reaches_the_context() {
        for seed in 0..3 {
            let p = params(seed);
            let base = tensor(10 + seed);
            let reference = pool_social(&base, &p).unwrap();
            for r in 0..3 {
                for c in 0..13 {
                    let mut t = base.clone();
                    for f in 0..FEATURE_DIM {
                        t.values[(r * 13 + c) * FEATURE_DIM + f] += 0.5;
                    }
                    assert_ne!(pool_social(&t, &p).unwrap(), reference, "cell ({r}, {c})");
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = params(4);
        let t = tensor(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let wts: Vec<f64> = (0..CONTEXT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |t: &SocialTensor| pool_social(t, &p).unwrap().0.iter().zip(&wts).map(|(a, b)| a * b).sum::<f64>();
        let (_, trace) = pool_social_traced(&t, &p).unwrap();
        let mut grad = PoolParams::zeros(0.1);
        let g = pool_social_backward(&trace, &p, &wts, &mut grad);
        let h = 1e-6;
        for idx in (0..t.values.len()).step_by(11) {
            let (mut tp, mut tm) = (t.clone(), t.clone());
            tp.values[idx] += h;
            tm.values[idx] -= h;
            let fd = (f(&tp) - f(&tm)) / (2.0 * h);
            let scale = fd.abs().max(g[idx].abs());
            if scale < 1e-7 {
                continue;
            }
            assert!((fd - g[idx]).abs() / scale < 1e-4, "entry {idx}: {fd} vs {}", g[idx]);
        }
    }
}
