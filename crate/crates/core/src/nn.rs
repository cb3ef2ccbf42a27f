//! Minimal f64 layer primitives with explicit backward passes.
//!
//! Feature maps are channel-first (`c, h, w`). Convolutions iterate over
//! input positions and scatter into a channel-last scratch buffer, which
//! skips zero inputs for free; occupancy rasters are mostly zero.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "feature map data length");
        FeatureMap { c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
}

/// Uniform initialisation in `±1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_ch * in_ch * kernel.0 * kernel.1],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let fan_in = self.in_ch * self.kernel.0 * self.kernel.1;
        self.weight = init_uniform(rng, self.weight.len(), fan_in);
        self.bias = init_uniform(rng, self.bias.len(), fan_in);
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    /// Weights re-laid out as `[in][ky][kx][out]`.
    fn weight_channel_last(&self) -> Vec<f64> {
        let (kh, kw) = self.kernel;
        let mut out = vec![0.0; self.weight.len()];
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                for ky in 0..kh {
                    for kx in 0..kw {
                        out[((i * kh + ky) * kw + kx) * self.out_ch + o] = self.weight[((o * self.in_ch + i) * kh + ky) * kw + kx];
                    }
                }
            }
        }
        out
    }

    /// Output positions `(oy, ky)` reached by input row `iy` along one axis.
    #[inline]
    fn taps(i: usize, pad: usize, stride: usize, k: usize, out_len: usize, buf: &mut Vec<(usize, usize)>) {
        buf.clear();
        for kk in 0..k {
            let num = i as isize + pad as isize - kk as isize;
            if num < 0 || num as usize % stride != 0 {
                continue;
            }
            let o = num as usize / stride;
            if o < out_len {
                buf.push((o, kk));
            }
        }
    }

    pub fn forward(&self, input: &FeatureMap) -> FeatureMap {
        assert_eq!(input.c, self.in_ch, "conv input channels");
        let (oh, ow) = self.output_size(input.h, input.w);
        let (kh, kw) = self.kernel;
        let oc = self.out_ch;
        let wt = self.weight_channel_last();
        // Channel-last accumulator, bias-initialised.
        let mut acc = vec![0.0; oh * ow * oc];
        for cell in acc.chunks_exact_mut(oc) {
            cell.copy_from_slice(&self.bias);
        }
        let (mut ty, mut tx) = (Vec::with_capacity(kh), Vec::with_capacity(kw));
        for i in 0..self.in_ch {
            for iy in 0..input.h {
                Self::taps(iy, self.padding.0, self.stride.0, kh, oh, &mut ty);
                if ty.is_empty() {
                    continue;
                }
                for ix in 0..input.w {
                    let v = input.data[input.idx(i, iy, ix)];
                    if v == 0.0 {
                        continue;
                    }
                    Self::taps(ix, self.padding.1, self.stride.1, kw, ow, &mut tx);
                    for &(oy, ky) in &ty {
                        for &(ox, kx) in &tx {
                            let w = &wt[((i * kh + ky) * kw + kx) * oc..][..oc];
                            let out = &mut acc[(oy * ow + ox) * oc..][..oc];
                            for (o, &wv) in out.iter_mut().zip(w) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
        let mut out = FeatureMap::zeros(oc, oh, ow);
        for p in 0..oh * ow {
            for o in 0..oc {
                out.data[o * oh * ow + p] = acc[p * oc + o];
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(&self, input: &FeatureMap, grad_out: &FeatureMap, grad: &mut Conv2d, want_input: bool) -> Option<FeatureMap> {
        let (oh, ow) = (grad_out.h, grad_out.w);
        let (kh, kw) = self.kernel;
        let oc = self.out_ch;
        let mut go = vec![0.0; oh * ow * oc];
        for o in 0..oc {
            let plane = &grad_out.data[o * oh * ow..(o + 1) * oh * ow];
            grad.bias[o] += plane.iter().sum::<f64>();
            for (p, &g) in plane.iter().enumerate() {
                go[p * oc + o] = g;
            }
        }
        let wt = if want_input { self.weight_channel_last() } else { Vec::new() };
        let mut gw = vec![0.0; self.weight.len()];
        let mut grad_in = want_input.then(|| FeatureMap::zeros(input.c, input.h, input.w));
        let (mut ty, mut tx) = (Vec::with_capacity(kh), Vec::with_capacity(kw));
        for i in 0..self.in_ch {
            for iy in 0..input.h {
                Self::taps(iy, self.padding.0, self.stride.0, kh, oh, &mut ty);
                if ty.is_empty() {
                    continue;
                }
                for ix in 0..input.w {
                    let v = input.data[input.idx(i, iy, ix)];
                    if v == 0.0 && !want_input {
                        continue;
                    }
                    Self::taps(ix, self.padding.1, self.stride.1, kw, ow, &mut tx);
                    let mut gin = 0.0;
                    for &(oy, ky) in &ty {
                        for &(ox, kx) in &tx {
                            let base = ((i * kh + ky) * kw + kx) * oc;
                            let g = &go[(oy * ow + ox) * oc..][..oc];
                            if v != 0.0 {
                                for (a, &gv) in gw[base..base + oc].iter_mut().zip(g) {
                                    *a += gv * v;
                                }
                            }
                            if want_input {
                                gin += wt[base..base + oc].iter().zip(g).map(|(w, g)| w * g).sum::<f64>();
                            }
                        }
                    }
                    if let Some(gi) = grad_in.as_mut() {
                        let at = gi.idx(i, iy, ix);
                        gi.data[at] = gin;
                    }
                }
            }
        }
        for o in 0..oc {
            for i in 0..self.in_ch {
                for ky in 0..kh {
                    for kx in 0..kw {
                        grad.weight[((o * self.in_ch + i) * kh + ky) * kw + kx] += gw[((i * kh + ky) * kw + kx) * oc + o];
                    }
                }
            }
        }
        grad_in
    }
}

pub fn leaky_relu(x: &FeatureMap, slope: f64) -> FeatureMap {
    FeatureMap {
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
        ..*x
    }
}

/// Gradient through a leaky ReLU given its pre-activation.
pub fn leaky_relu_backward(pre: &FeatureMap, grad_out: &FeatureMap, slope: f64) -> FeatureMap {
    FeatureMap {
        data: pre
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&z, &g)| if z > 0.0 { g } else { slope * g })
            .collect(),
        ..*pre
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl MaxPool2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.kernel.0) / self.stride.0 + 1, (w - self.kernel.1) / self.stride.1 + 1)
    }

    /// Returns the pooled map and, per output value, the flat input index
    /// of the winning element (first maximum on ties).
    pub fn forward(&self, input: &FeatureMap) -> (FeatureMap, Vec<usize>) {
        let (oh, ow) = self.output_size(input.h, input.w);
        let mut out = FeatureMap::zeros(input.c, oh, ow);
        let mut arg = vec![0usize; out.data.len()];
        for c in 0..input.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..self.kernel.0 {
                        for kx in 0..self.kernel.1 {
                            let i = input.idx(c, oy * self.stride.0 + ky, ox * self.stride.1 + kx);
                            if input.data[i] > best {
                                best = input.data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = out.idx(c, oy, ox);
                    out.data[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        (out, arg)
    }

    pub fn backward(input_shape: (usize, usize, usize), argmax: &[usize], grad_out: &FeatureMap) -> FeatureMap {
        let (c, h, w) = input_shape;
        let mut g = FeatureMap::zeros(c, h, w);
        for (&i, &v) in argmax.iter().zip(&grad_out.data) {
            g.data[i] += v;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.weight = init_uniform(rng, self.weight.len(), self.in_dim);
        self.bias = init_uniform(rng, self.bias.len(), self.in_dim);
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for ((gw, &xv), (gxv, &wv)) in grow.iter_mut().zip(x).zip(gx.iter_mut().zip(row)) {
                *gw += g * xv;
                *gxv += g * wv;
            }
        }
        gx
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// LSTM cell with gate order input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden: usize,
    /// `[4 * hidden][input_dim]`
    pub w_ih: Vec<f64>,
    /// `[4 * hidden][hidden]`
    pub w_hh: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Activations kept from one LSTM step for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmStep {
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Post-nonlinearity gates, `[i | f | g | o]`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmCell {
            input_dim,
            hidden,
            w_ih: vec![0.0; 4 * hidden * input_dim],
            w_hh: vec![0.0; 4 * hidden * hidden],
            bias: vec![0.0; 4 * hidden],
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.w_ih = init_uniform(rng, self.w_ih.len(), self.input_dim);
        self.w_hh = init_uniform(rng, self.w_hh.len(), self.hidden);
        self.bias = init_uniform(rng, self.bias.len(), self.hidden);
    }

    /// `W_ih x + b`, constant across steps when the input is repeated.
    pub fn input_projection(&self, x: &[f64]) -> Vec<f64> {
        self.w_ih
            .chunks_exact(self.input_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    pub fn step(&self, projected_input: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
        let n = self.hidden;
        let mut gates: Vec<f64> = self
            .w_hh
            .chunks_exact(n)
            .zip(projected_input)
            .map(|(row, p)| p + dot(row, h_prev))
            .collect();
        for (j, g) in gates.iter_mut().enumerate() {
            *g = if (2 * n..3 * n).contains(&j) { g.tanh() } else { sigmoid(*g) };
        }
        let mut c = vec![0.0; n];
        let mut h = vec![0.0; n];
        for j in 0..n {
            let (i, f, g, o) = (gates[j], gates[n + j], gates[2 * n + j], gates[3 * n + j]);
            c[j] = f * c_prev[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        LstmStep {
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            c,
            h,
        }
    }

    /// Backward through one step. Accumulates `w_hh`/`bias` gradients and
    /// returns `(d pre-activation gates, dh_prev, dc_prev)`; the caller folds
    /// the gate gradient into `w_ih` for the (shared) input.
    pub fn step_backward(&self, step: &LstmStep, dh: &[f64], dc_next: &[f64], grad: &mut LstmCell) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.hidden;
        let mut dgates = vec![0.0; 4 * n];
        let mut dc_prev = vec![0.0; n];
        for j in 0..n {
            let (i, f, g, o) = (step.gates[j], step.gates[n + j], step.gates[2 * n + j], step.gates[3 * n + j]);
            let tc = step.c[j].tanh();
            let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
            dgates[j] = dc * g * i * (1.0 - i);
            dgates[n + j] = dc * step.c_prev[j] * f * (1.0 - f);
            dgates[2 * n + j] = dc * i * (1.0 - g * g);
            dgates[3 * n + j] = dh[j] * tc * o * (1.0 - o);
            dc_prev[j] = dc * f;
        }
        let mut dh_prev = vec![0.0; n];
        for (r, &dg) in dgates.iter().enumerate() {
            grad.bias[r] += dg;
            if dg == 0.0 {
                continue;
            }
            let row = &self.w_hh[r * n..(r + 1) * n];
            let grow = &mut grad.w_hh[r * n..(r + 1) * n];
            for k in 0..n {
                grow[k] += dg * step.h_prev[k];
                dh_prev[k] += dg * row[k];
            }
        }
        (dgates, dh_prev, dc_prev)
    }
}
