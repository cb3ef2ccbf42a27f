use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use bevtraj::decoder::predicted_means;
use bevtraj::eval::{evaluate_baseline, report_table, rmse_of_sequences, write_report, HorizonReport};
use bevtraj::ingest::{
    filter_direction, read_meta_file, read_recording, read_tracks_file, select_target_vehicles, write_recording, RecordingMeta,
    Track, VehicleId, META_FILE,
};
use bevtraj::model::predict;
use bevtraj::synth::generate_scene;
use bevtraj::train::{load_checkpoint, resume, save_checkpoint, train, write_loss_log, Checkpoint, TrainOutcome};
use bevtraj::window::{assign_splits, extract_targets, load_split, load_window, sample_ids, save_window, window_dir, SplitTag, Window};
use bevtraj::{Error, Result};

use crate::config::PipelineConfig;
use crate::manifest::Manifest;
use crate::{Cli, Command, EvalArgs, IngestArgs, PredictArgs, ReportArgs, SynthArgs, TrainArgs, WindowsArgs};

const ID_OFFSET: VehicleId = 1_000_000;
pub const LAST_CHECKPOINT: &str = "checkpoint.bin";
pub const BEST_CHECKPOINT: &str = "best.bin";
pub const LOSS_LOG: &str = "loss.csv";
pub const RMSE_TABLE: &str = "rmse.csv";

type Pairs = Vec<(&'static str, String)>;

fn push<T: ToString>(pairs: &mut Pairs, key: &'static str, value: &Option<T>) {
    if let Some(v) = value {
        pairs.push((key, v.to_string()));
    }
}

fn load_config(file: Option<&Path>, flags: &Pairs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_env();
    if let Some(f) = file {
        cfg.apply_file(f)?;
    }
    cfg.apply_pairs(flags)?;
    cfg.validate()?;
    Ok(cfg)
}

fn data_root(explicit: Option<&PathBuf>, cfg: &PipelineConfig, what: &str) -> Result<PathBuf> {
    explicit
        .cloned()
        .or_else(|| cfg.data_root.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given: pass --data/--out, set data_root, or set {}", crate::config::DATA_ROOT_ENV)))
}

fn existing_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => synth(file, a),
        Command::Ingest(a) => ingest(file, a),
        Command::Windows(a) => windows(file, a),
        Command::Train(a) => train_cmd(file, a),
        Command::Eval(a) => eval_cmd(file, a),
        Command::Predict(a) => predict_cmd(file, a),
        Command::Report(a) => report_cmd(file, a),
    }
}

fn synth(file: Option<&Path>, a: SynthArgs) -> Result<()> {
    let mut flags = Pairs::new();
    push(&mut flags, "seed", &a.seed);
    push(&mut flags, "vehicles", &a.vehicles);
    push(&mut flags, "lanes", &a.lanes);
    push(&mut flags, "duration", &a.duration);
    push(&mut flags, "speed_min", &a.speed_min);
    push(&mut flags, "speed_max", &a.speed_max);
    push(&mut flags, "lane_change_probability", &a.lane_change_probability);
    let cfg = load_config(file, &flags)?;
    let out = match a.out {
        Some(o) => o,
        None => data_root(None, &cfg, "output directory")?.join("synth"),
    };
    let scene = generate_scene(&cfg.scene)?;
    write_recording(&out, &scene.tracks, &scene.meta)?;
    Manifest::new("synth", &cfg).write(&out)?;
    println!("wrote {} vehicles to {}", scene.tracks.len(), out.display());
    Ok(())
}

fn ingest(file: Option<&Path>, a: IngestArgs) -> Result<()> {
    let cfg = load_config(file, &Pairs::new())?;
    let out = match a.out {
        Some(o) => o,
        None => data_root(None, &cfg, "output directory")?.join("ingest"),
    };
    let tracks = read_tracks_file(&a.tracks)?;
    let meta = read_meta_file(&a.meta)?;
    let total = tracks.len();
    let kept = filter_direction(tracks);
    let targets = select_target_vehicles(&kept, &meta).len();
    write_recording(&out, &kept, &meta)?;
    let mut m = Manifest::new("ingest", &cfg);
    m.input("tracks", &a.tracks)?;
    m.input("meta", &a.meta)?;
    m.write(&out)?;
    println!(
        "{total} tracks, {} moving in +x, {targets} target vehicles -> {}",
        kept.len(),
        out.display()
    );
    Ok(())
}

fn offset_ids(tracks: &mut [Track], index: usize, path: &Path) -> Result<()> {
    if index == 0 {
        return Ok(());
    }
    for t in tracks.iter_mut() {
        if t.id >= ID_OFFSET {
            return Err(Error::Record {
                path: path.to_path_buf(),
                reason: format!("vehicle id {} too large to combine recordings", t.id),
            });
        }
        t.id += ID_OFFSET * index as VehicleId;
    }
    Ok(())
}

fn windows(file: Option<&Path>, a: WindowsArgs) -> Result<()> {
    let mut flags = Pairs::new();
    push(&mut flags, "stride", &a.stride);
    push(&mut flags, "split_seed", &a.split_seed);
    push(&mut flags, "max_targets", &a.max_targets);
    let cfg = load_config(file, &flags)?;
    let out = a.out.clone().unwrap_or_else(|| a.inputs[0].join("windows"));

    // Targets first, so the split is decided over all recordings at once.
    let mut per_recording = Vec::new();
    let mut all_ids = BTreeSet::new();
    for (i, dir) in a.inputs.iter().enumerate() {
        existing_dir(dir)?;
        let (mut tracks, meta) = read_recording(dir)?;
        offset_ids(&mut tracks, i, dir)?;
        let mut ids = select_target_vehicles(&tracks, &meta);
        if let Some(n) = cfg.max_targets {
            ids = sample_ids(&ids, n, cfg.split_seed.wrapping_add(i as u64));
        }
        all_ids.extend(ids.iter().copied());
        per_recording.push((tracks, meta, ids));
    }
    let tags = assign_splits(&all_ids, cfg.split_seed)?;

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut counts = [0usize; 3];
    for (tracks, meta, ids) in &per_recording {
        for w in extract_targets(tracks, meta, ids, cfg.stride)? {
            let w = Window {
                split: Some(tags[&w.tv_id]),
                ..w
            };
            save_window(&w, &window_dir(&out, &w))?;
            counts[SplitTag::ALL.iter().position(|s| Some(*s) == w.split).expect("tagged")] += 1;
        }
    }
    let meta_src = a.inputs[0].join(META_FILE);
    fs::copy(&meta_src, out.join(META_FILE)).map_err(|e| Error::io(&meta_src, e))?;

    let mut m = Manifest::new("windows", &cfg);
    for (i, dir) in a.inputs.iter().enumerate() {
        m.input(&format!("recording{i}"), dir)?;
    }
    m.write(&out)?;
    println!(
        "{} target vehicles; windows train {} test {} eval {} -> {}",
        all_ids.len(),
        counts[0],
        counts[1],
        counts[2],
        out.display()
    );
    Ok(())
}

/// Recording metadata stored beside the windows, or defaults.
fn windows_meta(root: &Path) -> Result<RecordingMeta> {
    let p = root.join(META_FILE);
    if p.exists() {
        read_meta_file(&p)
    } else {
        Ok(RecordingMeta::default())
    }
}

fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(BEST_CHECKPOINT)
    } else {
        path.to_path_buf()
    }
}

fn train_cmd(file: Option<&Path>, a: TrainArgs) -> Result<()> {
    let mut flags = Pairs::new();
    push(&mut flags, "epochs", &a.epochs);
    push(&mut flags, "seed", &a.seed);
    push(&mut flags, "learning_rate", &a.learning_rate);
    push(&mut flags, "batch_size", &a.batch_size);
    push(&mut flags, "clip_norm", &a.clip_norm);
    push(&mut flags, "mean_head", &a.mean_head);
    let cfg = load_config(file, &flags)?;
    if cfg.train.epochs == 0 && a.resume.is_none() {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let data = data_root(a.data.as_ref(), &cfg, "window root")?;
    existing_dir(&data)?;
    let out = a.out.clone().unwrap_or_else(|| data.join("model"));
    let train_windows = load_split(&data, SplitTag::Train)?;
    let eval_windows = load_split(&data, SplitTag::Eval)?;
    println!(
        "training on {} windows, scoring on {} eval windows",
        train_windows.len(),
        eval_windows.len()
    );
    let log_line = |e: &bevtraj::train::EpochLoss| {
        let eval = e.eval_nll.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!("epoch {:>4}  train_nll {:.6}  eval_nll {eval}", e.epoch, e.train_nll);
    };
    let mut m = Manifest::new("train", &cfg);
    m.input("data", &data)?;
    let outcome: TrainOutcome = match &a.resume {
        Some(path) => {
            let state = load_checkpoint(&resolve_checkpoint(path))?;
            m.input("resume", &resolve_checkpoint(path))?;
            resume(state, cfg.train.epochs, &train_windows, &eval_windows, log_line)?
        }
        None => train(&cfg.train, &train_windows, &eval_windows, log_line)?,
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    save_checkpoint(&outcome.last, &out.join(LAST_CHECKPOINT))?;
    save_checkpoint(&outcome.best, &out.join(BEST_CHECKPOINT))?;
    write_loss_log(&outcome.log, &out.join(LOSS_LOG))?;
    m.write(&out)?;
    println!("checkpoints and loss log in {}", out.display());
    Ok(())
}

fn model_from(spec: &str) -> Result<Option<(PathBuf, Checkpoint)>> {
    if spec == "none" {
        return Ok(None);
    }
    let path = resolve_checkpoint(Path::new(spec));
    let ckpt = load_checkpoint(&path)?;
    Ok(Some((path, ckpt)))
}

fn score(cfg: &PipelineConfig, model: Option<&Checkpoint>, windows: &[Window]) -> Result<Vec<HorizonReport>> {
    let mut reports = Vec::new();
    if let Some(ckpt) = model {
        let preds = windows
            .iter()
            .map(|w| predict(&ckpt.params, w))
            .collect::<Result<Vec<_>>>()?;
        reports.push(rmse_of_sequences("model", &preds, windows)?);
    }
    for b in &cfg.baselines {
        reports.push(evaluate_baseline(*b, windows)?);
    }
    if reports.is_empty() {
        return Err(Error::Config("nothing to evaluate: no checkpoint and no baselines".into()));
    }
    Ok(reports)
}

fn eval_cmd(file: Option<&Path>, a: EvalArgs) -> Result<()> {
    let mut flags = Pairs::new();
    push(&mut flags, "baselines", &a.baselines);
    let cfg = load_config(file, &flags)?;
    let data = data_root(a.data.as_ref(), &cfg, "window root")?;
    existing_dir(&data)?;
    let split: SplitTag = a.split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let windows = load_split(&data, split)?;
    let model = model_from(&a.checkpoint)?;
    let reports = score(&cfg, model.as_ref().map(|m| &m.1), &windows)?;
    let table = report_table(&reports, cfg.reference);
    let out = a.out.clone().unwrap_or_else(|| data.join("eval"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let path = out.join(RMSE_TABLE);
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    let mut m = Manifest::new("eval", &cfg);
    m.input("data", &data)?;
    if let Some((p, _)) = &model {
        m.input("checkpoint", p)?;
    }
    m.write(&out)?;
    print!("{table}");
    Ok(())
}

fn predict_cmd(file: Option<&Path>, a: PredictArgs) -> Result<()> {
    load_config(file, &Pairs::new())?;
    let ckpt = load_checkpoint(&resolve_checkpoint(&a.checkpoint))?;
    let window = load_window(&a.window)?;
    let seq = predict(&ckpt.params, &window)?;
    let mut csv = String::from("step,seconds,mu_x,mu_y,sigma_x,sigma_y,rho\n");
    for (k, g) in seq.steps.iter().enumerate() {
        csv.push_str(&format!(
            "{},{:.2},{},{},{},{},{}\n",
            k + 1,
            bevtraj::decoder::STEP_SECONDS * (k + 1) as f64,
            g.mu_x,
            g.mu_y,
            g.sigma_x,
            g.sigma_y,
            g.rho
        ));
    }
    match a.out {
        Some(p) => fs::write(&p, csv).map_err(|e| Error::io(&p, e)),
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn report_cmd(file: Option<&Path>, a: ReportArgs) -> Result<()> {
    let mut flags = Pairs::new();
    push(&mut flags, "baselines", &a.baselines);
    push(&mut flags, "overlays", &a.overlays);
    if a.no_reference {
        flags.push(("reference", "false".to_string()));
    }
    let cfg = load_config(file, &flags)?;
    let data = data_root(a.data.as_ref(), &cfg, "window root")?;
    existing_dir(&data)?;
    let split: SplitTag = a.split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let windows = load_split(&data, split)?;
    let model = model_from(&a.checkpoint)?;
    let reports = score(&cfg, model.as_ref().map(|m| &m.1), &windows)?;
    let meta = windows_meta(&data)?;

    // Evenly spaced windows for the overlays.
    let n = cfg.overlays.min(windows.len());
    let picks: Vec<usize> = (0..n).map(|i| i * windows.len() / n.max(1)).collect();
    let overlays = picks
        .iter()
        .map(|&i| {
            let w = windows[i].clone();
            let pred = match &model {
                Some((_, c)) => Some(predicted_means(&predict(&c.params, &w)?)),
                None => None,
            };
            Ok((w, pred))
        })
        .collect::<Result<Vec<_>>>()?;

    let out = a.out.clone().unwrap_or_else(|| data.join("report"));
    let files = write_report(&out, &reports, cfg.reference, &overlays, &meta)?;
    let mut m = Manifest::new("report", &cfg);
    m.input("data", &data)?;
    if let Some((p, _)) = &model {
        m.input("checkpoint", p)?;
    }
    m.write(&out)?;
    print!("{}", report_table(&reports, cfg.reference));
    println!(
        "wrote {}, {} and {} overlays",
        files.table.display(),
        files.chart.display(),
        files.overlays.len()
    );
    Ok(())
}
