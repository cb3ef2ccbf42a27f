//! The full network: patch encoder, social pooling and the Gaussian decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{decode_backward, decode_traced, nll_with_raw_grad, DecoderParams, GaussianSequence};
use crate::encoder::{encode_patch_backward, encode_stacks, patch_stacks, EncoderParams, PatchStack, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::raster::GridSpec;
use crate::social::{pool_social_backward, pool_social_traced, PoolParams};
use crate::window::Window;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub pool: PoolParams,
    pub decoder: DecoderParams,
}

/// A named view of one parameter array.
pub struct Block<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

pub struct BlockMut<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: &'a mut Vec<f64>,
}

impl ModelParams {
    pub fn zeros(leaky_slope: f64) -> Self {
        ModelParams {
            encoder: EncoderParams::zeros(leaky_slope),
            pool: PoolParams::zeros(leaky_slope),
            decoder: DecoderParams::zeros(),
        }
    }

    /// Uniform fan-in initialisation drawn from a seeded stream.
    pub fn new(seed: u64, leaky_slope: f64) -> Self {
        let mut p = Self::zeros(leaky_slope);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.encoder.init(&mut rng);
        p.pool.init(&mut rng);
        p.decoder.init(&mut rng);
        p
    }

    pub fn leaky_slope(&self) -> f64 {
        self.encoder.leaky_slope
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.leaky_slope());
        z.decoder.mean_head = self.decoder.mean_head;
        z
    }

    pub fn blocks(&self) -> Vec<Block<'_>> {
        let e = &self.encoder;
        let p = &self.pool;
        let d = &self.decoder;
        let conv = |c: &crate::nn::Conv2d| vec![c.out_ch, c.in_ch, c.kernel.0, c.kernel.1];
        let h4 = 4 * d.lstm.hidden;
        vec![
            Block { name: "encoder.conv1.weight", shape: conv(&e.conv1), values: &e.conv1.weight },
            Block { name: "encoder.conv1.bias", shape: vec![e.conv1.out_ch], values: &e.conv1.bias },
            Block { name: "encoder.conv2.weight", shape: conv(&e.conv2), values: &e.conv2.weight },
            Block { name: "encoder.conv2.bias", shape: vec![e.conv2.out_ch], values: &e.conv2.bias },
            Block { name: "pool.conv1.weight", shape: conv(&p.conv1), values: &p.conv1.weight },
            Block { name: "pool.conv1.bias", shape: vec![p.conv1.out_ch], values: &p.conv1.bias },
            Block { name: "pool.conv2.weight", shape: conv(&p.conv2), values: &p.conv2.weight },
            Block { name: "pool.conv2.bias", shape: vec![p.conv2.out_ch], values: &p.conv2.bias },
            Block { name: "decoder.lstm.w_ih", shape: vec![h4, d.lstm.input_dim], values: &d.lstm.w_ih },
            Block { name: "decoder.lstm.w_hh", shape: vec![h4, d.lstm.hidden], values: &d.lstm.w_hh },
            Block { name: "decoder.lstm.bias", shape: vec![h4], values: &d.lstm.bias },
            Block { name: "decoder.head.weight", shape: vec![d.head.out_dim, d.head.in_dim], values: &d.head.weight },
            Block { name: "decoder.head.bias", shape: vec![d.head.out_dim], values: &d.head.bias },
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let shapes: Vec<(&'static str, Vec<usize>)> = self.blocks().into_iter().map(|b| (b.name, b.shape)).collect();
        let e = &mut self.encoder;
        let p = &mut self.pool;
        let d = &mut self.decoder;
        let values: Vec<&mut Vec<f64>> = vec![
            &mut e.conv1.weight,
            &mut e.conv1.bias,
            &mut e.conv2.weight,
            &mut e.conv2.bias,
            &mut p.conv1.weight,
            &mut p.conv1.bias,
            &mut p.conv2.weight,
            &mut p.conv2.bias,
            &mut d.lstm.w_ih,
            &mut d.lstm.w_hh,
            &mut d.lstm.bias,
            &mut d.head.weight,
            &mut d.head.bias,
        ];
        shapes
            .into_iter()
            .zip(values)
            .map(|((name, shape), values)| BlockMut { name, shape, values })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }

    /// All parameters concatenated in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.values.iter().all(|v| v.is_finite()))
    }
}

/// Model input prepared from a window's history.
pub fn window_stacks(window: &Window) -> Result<Vec<PatchStack>> {
    patch_stacks(&window.history, &GridSpec::default())
}

pub fn forward(params: &ModelParams, stacks: &[PatchStack]) -> Result<GaussianSequence> {
    let (tensor, _) = encode_stacks(stacks, &params.encoder, &GridSpec::default())?;
    let context = pool_social_traced(&tensor, &params.pool)?.0;
    Ok(decode_traced(&context, &params.decoder)?.0)
}

pub fn predict(params: &ModelParams, window: &Window) -> Result<GaussianSequence> {
    forward(params, &window_stacks(window)?)
}

/// Mean per-step NLL of `target` and its gradient with respect to every parameter.
pub fn loss_and_gradient(params: &ModelParams, stacks: &[PatchStack], target: &[(f64, f64)]) -> Result<(f64, ModelParams)> {
    let grid = GridSpec::default();
    let (tensor, patch_traces) = encode_stacks(stacks, &params.encoder, &grid)?;
    let (context, pool_trace) = pool_social_traced(&tensor, &params.pool)?;
    let (seq, dec_trace) = decode_traced(&context, &params.decoder)?;
    let (loss, grad_raw) = nll_with_raw_grad(&seq, target)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }

    let mut grad = params.zeros_like();
    let d_context = decode_backward(&dec_trace, &params.decoder, &grad_raw, &mut grad.decoder);
    let d_tensor = pool_social_backward(&pool_trace, &params.pool, &d_context, &mut grad.pool);
    for (i, (stack, trace)) in stacks.iter().zip(&patch_traces).enumerate() {
        let g = &d_tensor[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        encode_patch_backward(stack, trace, &params.encoder, g, &mut grad.encoder);
    }
    Ok((loss, grad))
}

pub fn loss(params: &ModelParams, stacks: &[PatchStack], target: &[(f64, f64)]) -> Result<f64> {
    crate::decoder::nll(&forward(params, stacks)?, target)
}

/// Central difference of the loss along one parameter, `(block, index)` in
/// [`ModelParams::blocks`] order.
pub fn central_difference(params: &ModelParams, stacks: &[PatchStack], target: &[(f64, f64)], block: usize, index: usize, h: f64) -> Result<f64> {
    let eval = |delta: f64| {
        let mut q = params.clone();
        q.blocks_mut()[block].values[index] += delta;
        loss(&q, stacks, target)
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

/// Finite-difference estimate that refuses to answer near a kink: the
/// estimates at `h` and `h / 2` must agree to `agree` relative, otherwise
/// `None`.
pub fn smooth_difference(params: &ModelParams, stacks: &[PatchStack], target: &[(f64, f64)], block: usize, index: usize, h: f64, agree: f64) -> Result<Option<f64>> {
    let a = central_difference(params, stacks, target, block, index, h)?;
    let b = central_difference(params, stacks, target, block, index, h / 2.0)?;
    let scale = a.abs().max(b.abs()).max(1e-12);
    Ok(((a - b).abs() / scale <= agree).then_some(b))
}
