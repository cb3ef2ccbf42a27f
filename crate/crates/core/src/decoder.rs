//! LSTM decoder emitting one bivariate Gaussian per future step, and the
//! negative log-likelihood used to train it.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{LstmCell, LstmStep, Linear};
use crate::social::{ContextVector, CONTEXT_DIM};
use crate::window::FUTURE_STEPS;

pub const HIDDEN_DIM: usize = 128;
/// `mu_x, mu_y, log sigma_x, log sigma_y, atanh rho`
pub const RAW_OUTPUTS: usize = 5;
/// Seconds between consecutive decoded steps (4 frames at 25 Hz).
pub const STEP_SECONDS: f64 = 0.16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

impl GaussianParams {
    /// Maps unconstrained head outputs to a valid distribution.
    pub fn from_raw(raw: &[f64]) -> Self {
        GaussianParams {
            mu_x: raw[0],
            mu_y: raw[1],
            sigma_x: raw[2].exp(),
            sigma_y: raw[3].exp(),
            rho: raw[4].tanh(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, got ({}, {})", self.sigma_x, self.sigma_y)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Domain(format!("|rho| must be below 1, got {}", self.rho)));
        }
        Ok(())
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        (-self.neg_log_density(x, y)).exp()
    }

    /// `-log N((x, y); mu, Sigma)`
    pub fn neg_log_density(&self, x: f64, y: f64) -> f64 {
        let q = 1.0 - self.rho * self.rho;
        let a = (x - self.mu_x) / self.sigma_x;
        let b = (y - self.mu_y) / self.sigma_y;
        let z = a * a + b * b - 2.0 * self.rho * a * b;
        (2.0 * PI * self.sigma_x * self.sigma_y * q.sqrt()).ln() + z / (2.0 * q)
    }

    /// Gradient of [`Self::neg_log_density`] with respect to the raw head outputs.
    fn neg_log_density_raw_grad(&self, x: f64, y: f64) -> [f64; RAW_OUTPUTS] {
        let rho = self.rho;
        let q = 1.0 - rho * rho;
        let a = (x - self.mu_x) / self.sigma_x;
        let b = (y - self.mu_y) / self.sigma_y;
        let z = a * a + b * b - 2.0 * rho * a * b;
        [
            -(a - rho * b) / (q * self.sigma_x),
            -(b - rho * a) / (q * self.sigma_y),
            1.0 - (a * a - rho * a * b) / q,
            1.0 - (b * b - rho * a * b) / q,
            // d/d rho, times d rho / d raw = 1 - rho^2 = q
            -rho - a * b + rho * z / q,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSequence {
    pub steps: Vec<GaussianParams>,
}

impl GaussianSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// How the head's first two outputs become step means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanHead {
    /// `mu_k = raw_k`
    #[default]
    Absolute,
    /// `mu_k = raw_1 + ... + raw_k`: each step emits a displacement.
    Cumulative,
}

impl MeanHead {
    pub fn as_str(self) -> &'static str {
        match self {
            MeanHead::Absolute => "absolute",
            MeanHead::Cumulative => "cumulative",
        }
    }
}

impl std::str::FromStr for MeanHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "absolute" => Ok(MeanHead::Absolute),
            "cumulative" => Ok(MeanHead::Cumulative),
            other => Err(Error::Config(format!("unknown mean head `{other}` (absolute or cumulative)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub lstm: LstmCell,
    pub head: Linear,
    pub mean_head: MeanHead,
}

impl DecoderParams {
    pub fn zeros() -> Self {
        DecoderParams {
            lstm: LstmCell::zeros(CONTEXT_DIM, HIDDEN_DIM),
            head: Linear::zeros(HIDDEN_DIM, RAW_OUTPUTS),
            mean_head: MeanHead::Absolute,
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.lstm.init(rng);
        self.head.init(rng);
    }
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    context: Vec<f64>,
    steps: Vec<LstmStep>,
}

/// Unrolls the LSTM for 31 steps from a zero state, feeding the context
/// at every step.
pub fn decode_traced(context: &ContextVector, params: &DecoderParams) -> Result<(GaussianSequence, DecodeTrace)> {
    if context.0.len() != CONTEXT_DIM {
        return Err(Error::shape(format!("{CONTEXT_DIM}-dim context"), context.0.len()));
    }
    if context.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("context vector has non-finite values".into()));
    }
    let projected = params.lstm.input_projection(&context.0);
    let mut h = vec![0.0; HIDDEN_DIM];
    let mut c = vec![0.0; HIDDEN_DIM];
    let mut out = Vec::with_capacity(FUTURE_STEPS);
    let mut steps = Vec::with_capacity(FUTURE_STEPS);
    let mut offset = (0.0, 0.0);
    for _ in 0..FUTURE_STEPS {
        let step = params.lstm.step(&projected, &h, &c);
        h.clone_from(&step.h);
        c.clone_from(&step.c);
        let mut raw = params.head.forward(&step.h);
        if params.mean_head == MeanHead::Cumulative {
            raw[0] += offset.0;
            raw[1] += offset.1;
            offset = (raw[0], raw[1]);
        }
        out.push(GaussianParams::from_raw(&raw));
        steps.push(step);
    }
    Ok((
        GaussianSequence { steps: out },
        DecodeTrace {
            context: context.0.clone(),
            steps,
        },
    ))
}

pub fn decode(context: &ContextVector, params: &DecoderParams) -> Result<GaussianSequence> {
    decode_traced(context, params).map(|(s, _)| s)
}

/// Backpropagates per-step raw-output gradients through the head and the
/// unrolled LSTM. Returns `d loss / d context`.
pub fn decode_backward(trace: &DecodeTrace, params: &DecoderParams, grad_raw: &[[f64; RAW_OUTPUTS]], grad: &mut DecoderParams) -> Vec<f64> {
    let n = HIDDEN_DIM;
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut dgates_total = vec![0.0; 4 * n];
    let mut grad_raw = grad_raw.to_vec();
    if params.mean_head == MeanHead::Cumulative {
        // A step's displacement feeds every later mean.
        for k in (0..grad_raw.len().saturating_sub(1)).rev() {
            grad_raw[k][0] += grad_raw[k + 1][0];
            grad_raw[k][1] += grad_raw[k + 1][1];
        }
    }
    for (step, g_raw) in trace.steps.iter().zip(&grad_raw).rev() {
        let dh_head = params.head.backward(&step.h, g_raw, &mut grad.head);
        let dh: Vec<f64> = dh_head.iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let (dgates, dh_prev, dc_prev) = params.lstm.step_backward(step, &dh, &dc_next, &mut grad.lstm);
        for (t, g) in dgates_total.iter_mut().zip(&dgates) {
            *t += g;
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    // The input projection is shared by every step.
    let m = CONTEXT_DIM;
    let mut d_context = vec![0.0; m];
    for (r, &dg) in dgates_total.iter().enumerate() {
        let row = &params.lstm.w_ih[r * m..(r + 1) * m];
        let grow = &mut grad.lstm.w_ih[r * m..(r + 1) * m];
        for k in 0..m {
            grow[k] += dg * trace.context[k];
            d_context[k] += dg * row[k];
        }
    }
    d_context
}

fn check_lengths(params_seq: &GaussianSequence, target: &[(f64, f64)]) -> Result<()> {
    if params_seq.len() != target.len() || target.is_empty() {
        return Err(Error::shape(
            format!("{} target steps", params_seq.len()),
            target.len(),
        ));
    }
    Ok(())
}

/// Mean per-step negative log-likelihood of `target` under the sequence.
pub fn nll(params_seq: &GaussianSequence, target: &[(f64, f64)]) -> Result<f64> {
    check_lengths(params_seq, target)?;
    let mut total = 0.0;
    for (g, &(x, y)) in params_seq.steps.iter().zip(target) {
        g.validate()?;
        total += g.neg_log_density(x, y);
    }
    Ok(total / target.len() as f64)
}

/// [`nll`] together with its gradient with respect to every step's raw
/// head outputs.
pub fn nll_with_raw_grad(params_seq: &GaussianSequence, target: &[(f64, f64)]) -> Result<(f64, Vec<[f64; RAW_OUTPUTS]>)> {
    let loss = nll(params_seq, target)?;
    let scale = 1.0 / target.len() as f64;
    let grads = params_seq
        .steps
        .iter()
        .zip(target)
        .map(|(g, &(x, y))| g.neg_log_density_raw_grad(x, y).map(|v| v * scale))
        .collect();
    Ok((loss, grads))
}

/// Point prediction per step: the Gaussian means.
pub fn predicted_means(params_seq: &GaussianSequence) -> Vec<(f64, f64)> {
    params_seq.steps.iter().map(|g| (g.mu_x, g.mu_y)).collect()
}

#[cfg(test)]
mod tests {
    use super::{
        decode, decode_backward, decode_traced, nll, MeanHead, nll_with_raw_grad, predicted_means, ContextVector, DecoderParams, Error,
        GaussianParams, GaussianSequence, CONTEXT_DIM, PI, RAW_OUTPUTS, STEP_SECONDS,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(mu_x: f64, mu_y: f64) -> GaussianParams {
        GaussianParams {
            mu_x,
            mu_y,
            sigma_x: 1.0,
            sigma_y: 1.0,
            rho: 0.0,
        }
    }

    fn random_decoder(seed: u64) -> DecoderParams {
        let mut p = DecoderParams::zeros();
        p.init(&mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    #[test]
    fn zero_network_emits_standard_normals() {
        let seq = decode(&ContextVector(vec![0.0; CONTEXT_DIM]), &DecoderParams::zeros()).unwrap();
        assert_eq!(seq.len(), 31);
        for g in &seq.steps {
            assert_eq!(*g, unit(0.0, 0.0));
        }
        assert_eq!(predicted_means(&seq), vec![(0.0, 0.0); 31]);
    }

    #[test]
    fn recurrence_evolves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..5 {
            let ctx = ContextVector((0..CONTEXT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let seq = decode(&ctx, &random_decoder(seed)).unwrap();
            assert_eq!(seq.len(), 31);
            assert!(seq.steps.iter().any(|g| *g != seq.steps[0]));
        }
    }

    #[test]
    fn non_finite_context_is_numeric_error() {
        let mut ctx = vec![0.0; CONTEXT_DIM];
        ctx[3] = f64::NAN;
        assert!(matches!(decode(&ContextVector(ctx), &DecoderParams::zeros()), Err(Error::Numeric(_))));
    }

    #[test]
    fn closed_form_values() {
        let seq = GaussianSequence { steps: vec![unit(0.0, 0.0); 31] };
        let at_mean = nll(&seq, &vec![(0.0, 0.0); 31]).unwrap();
        assert!((at_mean - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((at_mean - 1.837877).abs() < 1e-6);
        let off = nll(&seq, &vec![(1.0, 0.0); 31]).unwrap();
        assert!((off - ((2.0 * PI).ln() + 0.5)).abs() < 1e-12);
        assert!((off - 2.337877).abs() < 1e-6);
    }

    #[test]
    fn domain_errors() {
        let target = vec![(0.0, 0.0); 31];
        let mut bad = GaussianSequence { steps: vec![unit(0.0, 0.0); 31] };
        bad.steps[4].rho = 1.0;
        assert!(matches!(nll(&bad, &target), Err(Error::Domain(_))));
        bad.steps[4].rho = 0.0;
        bad.steps[9].sigma_y = 0.0;
        assert!(matches!(nll(&bad, &target), Err(Error::Domain(_))));
        assert!(nll(&GaussianSequence { steps: vec![unit(0.0, 0.0); 30] }, &target).is_err());
    }

    #[test]
    fn means_projection() {
        let steps: Vec<GaussianParams> = (1..=31).map(|k| unit(STEP_SECONDS * k as f64 * 25.0, 0.0)).collect();
        let means = predicted_means(&GaussianSequence { steps });
        for (k, &(x, y)) in means.iter().enumerate() {
            assert_eq!(x, STEP_SECONDS * (k + 1) as f64 * 25.0);
            assert_eq!(y, 0.0);
        }
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let raw: Vec<f64> = vec![
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.5..1.5),
            ];
            let (x, y) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            let g = GaussianParams::from_raw(&raw).neg_log_density_raw_grad(x, y);
            let h = 1e-6;
            for j in 0..RAW_OUTPUTS {
                let (mut p, mut m) = (raw.clone(), raw.clone());
                p[j] += h;
                m[j] -= h;
                let fd = (GaussianParams::from_raw(&p).neg_log_density(x, y) - GaussianParams::from_raw(&m).neg_log_density(x, y)) / (2.0 * h);
                let scale = fd.abs().max(g[j].abs()).max(1e-8);
                assert!((fd - g[j]).abs() / scale < 1e-5, "output {j}: fd {fd} analytic {}", g[j]);
            }
        }
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        check_decoder_gradient(MeanHead::Absolute);
    }

    #[test]
    fn cumulative_decoder_gradient_matches_finite_differences() {
        check_decoder_gradient(MeanHead::Cumulative);
    }

    #[test]
    fn cumulative_means_are_running_sums() {
        let mut p = DecoderParams::zeros();
        p.head.bias[0] = 4.0;
        p.head.bias[1] = -0.5;
        let ctx = ContextVector(vec![0.0; CONTEXT_DIM]);
        let abs = predicted_means(&decode(&ctx, &p).unwrap());
        assert!(abs.iter().all(|&m| m == (4.0, -0.5)));
        p.mean_head = MeanHead::Cumulative;
        let cum = predicted_means(&decode(&ctx, &p).unwrap());
        for (k, m) in cum.iter().enumerate() {
            assert!((m.0 - 4.0 * (k + 1) as f64).abs() < 1e-12 && (m.1 + 0.5 * (k + 1) as f64).abs() < 1e-12);
        }
        assert_eq!("cumulative".parse::<MeanHead>().unwrap(), MeanHead::Cumulative);
        assert!("sum".parse::<MeanHead>().is_err());
    }

    fn check_decoder_gradient(mean_head: MeanHead) {
        let mut params = random_decoder(3);
        params.mean_head = mean_head;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctx = ContextVector((0..CONTEXT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let target: Vec<(f64, f64)> = (0..31).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect();
        let loss = |p: &DecoderParams, c: &ContextVector| nll(&decode(c, p).unwrap(), &target).unwrap();

        let (seq, trace) = decode_traced(&ctx, &params).unwrap();
        let (_, g_raw) = nll_with_raw_grad(&seq, &target).unwrap();
        let mut grad = DecoderParams::zeros();
        grad.mean_head = mean_head;
        let d_ctx = decode_backward(&trace, &params, &g_raw, &mut grad);

        let h = 1e-6;
        // Central differences on an O(1) loss carry ~1e-10 absolute noise.
        let rel = |fd: f64, an: f64| ((fd - an).abs() - 1e-9).max(0.0) / fd.abs().max(an.abs()).max(1e-8);
        for k in 0..CONTEXT_DIM {
            let (mut cp, mut cm) = (ctx.clone(), ctx.clone());
            cp.0[k] += h;
            cm.0[k] -= h;
            let fd = (loss(&params, &cp) - loss(&params, &cm)) / (2.0 * h);
            assert!(rel(fd, d_ctx[k]) < 1e-5, "context {k}");
        }
        type Pick = fn(&mut DecoderParams) -> &mut Vec<f64>;
        let groups: [(&str, Pick, Pick); 5] = [
            ("w_ih", |p| &mut p.lstm.w_ih, |p| &mut p.lstm.w_ih),
            ("w_hh", |p| &mut p.lstm.w_hh, |p| &mut p.lstm.w_hh),
            ("bias", |p| &mut p.lstm.bias, |p| &mut p.lstm.bias),
            ("head.w", |p| &mut p.head.weight, |p| &mut p.head.weight),
            ("head.b", |p| &mut p.head.bias, |p| &mut p.head.bias),
        ];
        for (name, pick, pick_grad) in groups {
            let len = pick(&mut params.clone()).len();
            for idx in (0..len).step_by((len / 25).max(1)) {
                let (mut p, mut m) = (params.clone(), params.clone());
                pick(&mut p)[idx] += h;
                pick(&mut m)[idx] -= h;
                let fd = (loss(&p, &ctx) - loss(&m, &ctx)) / (2.0 * h);
                let an = pick_grad(&mut grad)[idx];
                assert!(rel(fd, an) < 1e-5, "{name}[{idx}]: fd {fd} analytic {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn decoded_parameters_are_valid(seed in 0u64..1000, scale in 0.1f64..5.0) {
            let mut params = random_decoder(seed);
            for w in params.head.weight.iter_mut().chain(params.head.bias.iter_mut()) {
                *w *= scale;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let ctx = ContextVector((0..CONTEXT_DIM).map(|_| rng.gen_range(-5.0..5.0)).collect());
            for g in decode(&ctx, &params).unwrap().steps {
                prop_assert!(g.sigma_x > 0.0 && g.sigma_x.is_finite());
                prop_assert!(g.sigma_y > 0.0 && g.sigma_y.is_finite());
                prop_assert!(g.rho.abs() < 1.0);
            }
        }

        #[test]
        fn nll_translation_consistent(mx in -50.0f64..50.0, my in -50.0f64..50.0, x in -50.0f64..50.0, y in -50.0f64..50.0,
                                      sx in 0.1f64..5.0, sy in 0.1f64..5.0, rho in -0.95f64..0.95, ox in -100.0f64..100.0, oy in -100.0f64..100.0) {
            let g = GaussianParams { mu_x: mx, mu_y: my, sigma_x: sx, sigma_y: sy, rho };
            let shifted = GaussianParams { mu_x: mx + ox, mu_y: my + oy, ..g };
            let a = nll(&GaussianSequence { steps: vec![g] }, &[(x, y)]).unwrap();
            let b = nll(&GaussianSequence { steps: vec![shifted] }, &[(x + ox, y + oy)]).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn nll_decreases_toward_target(dx in 0.01f64..20.0, dy in -20.0f64..20.0, frac in 0.05f64..0.95, sx in 0.2f64..5.0, sy in 0.2f64..5.0) {
            let base = GaussianParams { mu_x: 0.0, mu_y: 0.0, sigma_x: sx, sigma_y: sy, rho: 0.0 };
            let closer = GaussianParams { mu_x: frac * dx, ..base };
            let far = nll(&GaussianSequence { steps: vec![base] }, &[(dx, dy)]).unwrap();
            let near = nll(&GaussianSequence { steps: vec![closer] }, &[(dx, dy)]).unwrap();
            prop_assert!(near < far);
            let closer_y = GaussianParams { mu_y: frac * dy, ..base };
            let near_y = nll(&GaussianSequence { steps: vec![closer_y] }, &[(dx, dy)]).unwrap();
            prop_assert!(near_y <= far);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let g = GaussianParams {
                mu_x: rng.gen_range(-2.0..2.0),
                mu_y: rng.gen_range(-2.0..2.0),
                sigma_x: rng.gen_range(0.3..2.0),
                sigma_y: rng.gen_range(0.3..2.0),
                rho: rng.gen_range(-0.8..0.8),
            };
            // Midpoint rule over +-8 sigma.
            let n = 400;
            let (x0, x1) = (g.mu_x - 8.0 * g.sigma_x, g.mu_x + 8.0 * g.sigma_x);
            let (y0, y1) = (g.mu_y - 8.0 * g.sigma_y, g.mu_y + 8.0 * g.sigma_y);
            let (hx, hy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
            let mut mass = 0.0;
            for i in 0..n {
                for j in 0..n {
                    mass += g.density(x0 + (i as f64 + 0.5) * hx, y0 + (j as f64 + 0.5) * hy) * hx * hy;
                }
            }
            assert!((mass - 1.0).abs() < 1e-2, "{mass}");
        }
    }
}
