//! Adam training over windows, loss logging and the checkpoint container.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::decoder::{nll, MeanHead};
use crate::encoder::DEFAULT_LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::model::{forward, loss_and_gradient, window_stacks, ModelParams};
use crate::window::Window;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub leaky_slope: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub mean_head: MeanHead,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 1,
            epochs: 30,
            seed: 0,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
            mean_head: MeanHead::Absolute,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.clip_norm >= 0.0) {
            return bad("epsilon must be positive and clip_norm non-negative");
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite");
        }
        Ok(())
    }

    /// Flat `key = value` lines, the same syntax as config files.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("mean_head", self.mean_head.as_str().to_string()),
        ]
    }

    /// Applies one `key = value` setting. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
        }
        match key {
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "leaky_slope" => self.leaky_slope = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "mean_head" => self.mean_head = value.parse()?,
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in parse_key_values(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }
}

/// Parses flat `key = value` text; `#` starts a comment line.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_nll: f64,
    /// `None` without an eval set.
    pub eval_nll: Option<f64>,
}

pub fn write_loss_log(log: &[EpochLoss], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,train_nll,eval_nll\n");
    for e in log {
        let eval = e.eval_nll.map(|v| format!("{v:e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:e},{}", e.epoch, e.train_nll, eval);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochLoss>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let bad = || Error::Format(format!("{}: malformed loss row {:?}", path.display(), row));
        let eval = field(2);
        out.push(EpochLoss {
            epoch: field(0).parse().map_err(|_| bad())?,
            train_nll: field(1).parse().map_err(|_| bad())?,
            eval_nll: if eval.is_empty() { None } else { Some(eval.parse().map_err(|_| bad())?) },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grad: &ModelParams, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let grads = grad.blocks();
        let ms = self.m.blocks_mut();
        let vs = self.v.blocks_mut();
        for (((p, g), m), v) in params.blocks_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.values.len() {
                let gi = g.values[i];
                m.values[i] = cfg.beta1 * m.values[i] + (1.0 - cfg.beta1) * gi;
                v.values[i] = cfg.beta2 * v.values[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m.values[i] / c1;
                let vh = v.values[i] / c2;
                p.values[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
    }
}

fn scale_gradient(grad: &mut ModelParams, factor: f64) {
    for b in grad.blocks_mut() {
        b.values.iter_mut().for_each(|v| *v *= factor);
    }
}

fn add_gradient(acc: &mut ModelParams, g: &ModelParams) {
    for (a, b) in acc.blocks_mut().into_iter().zip(g.blocks()) {
        for (x, y) in a.values.iter_mut().zip(b.values) {
            *x += y;
        }
    }
}

pub fn gradient_norm(grad: &ModelParams) -> f64 {
    grad.blocks()
        .iter()
        .flat_map(|b| b.values.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub log: Vec<EpochLoss>,
}

impl Checkpoint {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams::new(config.seed, config.leaky_slope);
        params.decoder.mean_head = config.mean_head;
        Ok(Checkpoint {
            config: config.clone(),
            adam: AdamState::new(&params),
            params,
            epoch: 0,
            // A separate stream from initialisation so shuffling does not
            // depend on the parameter count.
            rng: {
                let mut r = ChaCha8Rng::seed_from_u64(config.seed);
                r.set_stream(1);
                r
            },
            log: Vec::new(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest eval NLL (lowest train NLL without an eval set).
    pub best: Checkpoint,
    pub log: Vec<EpochLoss>,
}

fn loss_error(e: Error, w: &Window) -> Error {
    match e {
        Error::Numeric(_) | Error::Domain(_) => Error::NonFiniteLoss { tv_id: w.tv_id, frame: w.t },
        other => other,
    }
}

/// Mean NLL over windows with the given parameters.
pub fn mean_nll(params: &ModelParams, windows: &[Window]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Config("no windows to score".into()));
    }
    let mut total = 0.0;
    for w in windows {
        let seq = forward(params, &window_stacks(w)?).map_err(|e| loss_error(e, w))?;
        let l = nll(&seq, &w.future).map_err(|e| loss_error(e, w))?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { tv_id: w.tv_id, frame: w.t });
        }
        total += l;
    }
    Ok(total / windows.len() as f64)
}

/// Runs `epochs` further epochs from `state`, calling `on_epoch` after each.
pub fn resume(
    mut state: Checkpoint,
    epochs: usize,
    train: &[Window],
    eval: &[Window],
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    state.config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let cfg = state.config.clone();
    let score = |c: &Checkpoint| c.log.last().map(|e| e.eval_nll.unwrap_or(e.train_nll)).unwrap_or(f64::INFINITY);
    let mut best = state.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = state.params.zeros_like();
            for &i in batch {
                let w = &train[i];
                let stacks = window_stacks(w)?;
                let (l, g) = loss_and_gradient(&state.params, &stacks, &w.future).map_err(|e| loss_error(e, w))?;
                if !l.is_finite() || !g.is_finite() {
                    return Err(Error::NonFiniteLoss { tv_id: w.tv_id, frame: w.t });
                }
                total += l;
                add_gradient(&mut acc, &g);
            }
            scale_gradient(&mut acc, 1.0 / batch.len() as f64);
            let norm = gradient_norm(&acc);
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                scale_gradient(&mut acc, cfg.clip_norm / norm);
            }
            state.adam.update(&mut state.params, &acc, &cfg);
        }
        state.epoch += 1;
        let entry = EpochLoss {
            epoch: state.epoch,
            train_nll: total / train.len() as f64,
            eval_nll: if eval.is_empty() { None } else { Some(mean_nll(&state.params, eval)?) },
        };
        state.log.push(entry);
        on_epoch(&entry);
        if score(&state) < score(&best) || best.log.is_empty() {
            best = state.clone();
        }
    }
    let log = state.log.clone();
    Ok(TrainOutcome { last: state, best, log })
}

pub fn train(config: &TrainConfig, train_windows: &[Window], eval_windows: &[Window], on_epoch: impl FnMut(&EpochLoss)) -> Result<TrainOutcome> {
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    resume(Checkpoint::fresh(config)?, config.epochs, train_windows, eval_windows, on_epoch)
}

const MAGIC: &[u8; 8] = b"BVTJCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_block(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = ckpt.config.to_text();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(ckpt.epoch as u64).to_le_bytes());
    buf.extend_from_slice(&ckpt.adam.step.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.get_seed());
    buf.extend_from_slice(&ckpt.rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.get_word_pos().to_le_bytes());

    buf.extend_from_slice(&(ckpt.log.len() as u32).to_le_bytes());
    for e in &ckpt.log {
        buf.extend_from_slice(&(e.epoch as u64).to_le_bytes());
        buf.extend_from_slice(&e.train_nll.to_le_bytes());
        buf.extend_from_slice(&e.eval_nll.unwrap_or(f64::NAN).to_le_bytes());
    }

    let groups = [("param", &ckpt.params), ("adam.m", &ckpt.adam.m), ("adam.v", &ckpt.adam.v)];
    let count: usize = groups.iter().map(|(_, p)| p.blocks().len()).sum();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, p) in groups {
        for b in p.blocks() {
            put_block(&mut buf, &format!("{prefix}/{}", b.name), &b.shape, b.values);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

pub fn decode_checkpoint(data: &[u8]) -> Result<Checkpoint> {
    if data.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &data[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch (truncated or corrupted)".into()));
    }
    let mut cur = Cursor { data: body, pos: 12 };
    let cfg_len = cur.u32()? as usize;
    let cfg_text = std::str::from_utf8(cur.take(cfg_len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = TrainConfig::from_text(cfg_text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let epoch = cur.u64()? as usize;
    let step = cur.u64()?;
    let seed: [u8; 32] = cur.array()?;
    let stream = cur.u64()?;
    let word_pos = u128::from_le_bytes(cur.array()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let n_log = cur.u32()? as usize;
    let mut log = Vec::with_capacity(n_log.min(1 << 16));
    for _ in 0..n_log {
        let epoch = cur.u64()? as usize;
        let train_nll = cur.f64()?;
        let eval = cur.f64()?;
        log.push(EpochLoss {
            epoch,
            train_nll,
            eval_nll: (!eval.is_nan()).then_some(eval),
        });
    }

    let mut params = ModelParams::zeros(config.leaky_slope);
    params.decoder.mean_head = config.mean_head;
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    let count = cur.u32()? as usize;
    let expected = 3 * params.blocks().len();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} blocks, expected {expected}")));
    }
    for (prefix, target) in [("param", &mut params), ("adam.m", &mut m), ("adam.v", &mut v)] {
        for b in target.blocks_mut() {
            let name_len = u16::from_le_bytes(cur.array()?) as usize;
            let name = String::from_utf8_lossy(cur.take(name_len)?).into_owned();
            let want = format!("{prefix}/{}", b.name);
            if name != want {
                return Err(Error::Checkpoint(format!("block `{name}`, expected `{want}`")));
            }
            let ndim = cur.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != b.shape {
                return Err(Error::Checkpoint(format!("block `{name}` has shape {shape:?}, expected {:?}", b.shape)));
            }
            for x in b.values.iter_mut() {
                *x = cur.f64()?;
            }
        }
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        config,
        params,
        adam: AdamState { m, v, step },
        epoch,
        rng,
        log,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&data).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
