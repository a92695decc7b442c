use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vismem::checkpoint::{gates_from_archive, gates_to_archive, load_checkpoint, save_checkpoint, Archive};
use vismem::config::RunConfig;
use vismem::dataio::{
    generate_dataset, load_sequence, read_manifest, read_pgm, save_sequence, sliding_window_infer, write_manifest,
    write_pgm, VideoSample,
};
use vismem::metrics::{evaluate_sequence, report_table, SequenceReport};
use vismem::model::{MemoryKind, ModelConfig, ModelParams, Variant};
use vismem::tensor::upsample_nearest;
use vismem::training::{pretrain_streams, train_memory, TrainConfig, TrainScope};
use vismem::visualize::{render_gates, write_overlay, GateSignal, HeatmapSpec};
use vismem::{Error, Result};

use crate::{Cli, Command, TrainArgs};

/// Largest accepted gap between the conv stack and ConvGRU parameter
/// counts, relative to the ConvGRU.
const MATCH_TOLERANCE: f64 = 0.05;
const GATES_FILE: &str = "gates.bin";

pub fn run(cli: Cli) -> Result<()> {
    let explicit = cli.config.is_some();
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData { out, count, seed } => gen_data(&cfg, &out, count, seed),
        Command::Pretrain { data, out, common } => pretrain(&cfg, &data, &out, &common),
        Command::Train {
            data,
            init,
            out,
            common,
        } => train(&cfg, explicit, &data, &init, &out, &common, None).map(|_| ()),
        Command::Infer {
            ckpt,
            seq,
            out,
            window,
            step,
            record_gates,
            no_overlay,
        } => infer(&ckpt, &seq, &out, window, step, record_gates, !no_overlay),
        Command::Eval {
            pred,
            gt,
            report,
            tolerance,
        } => eval(&pred, &gt, &report, tolerance),
        Command::VisGates {
            records,
            channels,
            signals,
            scale,
            direction,
            out,
        } => vis_gates(&records, &channels, &signals, scale, &direction, &out),
        Command::Ablate {
            variant,
            data,
            init,
            out,
            val,
            audit_only,
            common,
        } => ablate(&cfg, explicit, variant, data, init, out, val, audit_only, &common),
    }
}

fn train_config(cfg: &RunConfig, args: &TrainArgs, pretraining: bool) -> Result<TrainConfig> {
    let mut tc = cfg.train.clone();
    if let Some(s) = args.seed {
        tc.rng_seed = s;
    }
    if let Some(n) = args.iterations {
        if pretraining {
            tc.pretrain_iterations = n;
        } else {
            tc.iterations = n;
        }
    }
    tc.validate()?;
    Ok(tc)
}

fn is_sequence(dir: &Path) -> bool {
    dir.join("meta.txt").is_file()
}

/// Sequence directories under `dir`: the manifest entries, or `dir` itself
/// when it is a single sequence.
fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if is_sequence(dir) {
        Ok(vec![dir.to_path_buf()])
    } else {
        read_manifest(dir)
    }
}

fn load_dataset(dir: &Path) -> Result<Vec<VideoSample>> {
    sequence_dirs(dir)?.iter().map(|d| load_sequence(d)).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(cfg: &RunConfig, out: &Path, count: usize, seed: u64) -> Result<()> {
    create_dir(out)?;
    let videos = generate_dataset(&cfg.synth, count, seed)?;
    let mut names = Vec::with_capacity(videos.len());
    for v in &videos {
        save_sequence(v, &out.join(&v.name))?;
        names.push(v.name.clone());
    }
    write_manifest(out, &names)?;
    println!("sequences={} out={}", names.len(), out.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig, data: &Path, out: &Path, args: &TrainArgs) -> Result<()> {
    let tc = train_config(cfg, args, true)?;
    let dataset = load_dataset(data)?;
    let mut params = ModelParams::<f32>::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(tc.rng_seed))?;
    let every = tc.log_every.max(1);
    pretrain_streams(&mut params, &dataset, &tc, |r| {
        if (r.iteration + 1) % every == 0 {
            println!("{r}");
        }
    })?;
    save_checkpoint(out, &params, &[("stage".into(), "pretrain".into())])?;
    println!("saved={}", out.display());
    Ok(())
}

/// Stage-two training shared by `train` and `ablate`. The model shape comes
/// from the configuration file when one was given, otherwise from `init`.
#[allow(clippy::too_many_arguments)]
fn train(
    cfg: &RunConfig,
    explicit: bool,
    data: &Path,
    init: &Path,
    out: &Path,
    args: &TrainArgs,
    variant: Option<Variant>,
) -> Result<ModelParams> {
    let tc = train_config(cfg, args, false)?;
    let base = load_checkpoint::<f32>(init)?;
    let dataset = load_dataset(data)?;
    let mut config = if explicit { cfg.model.clone() } else { base.config.clone() };
    if let Some(v) = variant {
        config = config.with_variant(v);
    }
    let mut params = ModelParams::<f32>::init(&config, &mut ChaCha8Rng::seed_from_u64(tc.rng_seed))?;
    let copied = params.load_matching(&base);
    println!("init={} tensors_loaded={copied}", init.display());
    let every = tc.log_every.max(1);
    train_memory(&mut params, &dataset, &tc, TrainScope::Memory, |r| {
        if (r.iteration + 1) % every == 0 {
            println!("{r}");
        }
    })?;
    let mut extra = vec![("stage".to_string(), "memory".to_string())];
    if let Some(v) = variant {
        extra.push(("variant".into(), v.to_string()));
    }
    save_checkpoint(out, &params, &extra)?;
    println!("saved={}", out.display());
    Ok(params)
}

fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("mask_{t:05}.pgm"))
}

fn infer(ckpt: &Path, seq: &Path, out: &Path, window: usize, step: usize, gates: bool, overlay: bool) -> Result<()> {
    let params = load_checkpoint::<f32>(ckpt)?;
    let dirs = sequence_dirs(seq)?;
    let single = is_sequence(seq);
    create_dir(out)?;
    let mut names = Vec::new();
    for dir in &dirs {
        let sample = load_sequence(dir)?;
        let dest = if single { out.to_path_buf() } else { out.join(&sample.name) };
        create_dir(&dest)?;
        let started = Instant::now();
        let res = sliding_window_infer(&params, &sample, window, step, gates)?;
        let secs = started.elapsed().as_secs_f64();
        for (t, m) in res.masks.iter().enumerate() {
            let full = upsample_nearest(m, params.config.stride)?;
            write_pgm(&mask_path(&dest, t), &full)?;
            if overlay {
                write_overlay(&dest, t, &sample.frames[t], m, 0.5)?;
            }
        }
        if let Some(trace) = &res.gates {
            gates_to_archive(trace).save(&dest.join(GATES_FILE))?;
        }
        println!(
            "sequence={} frames={} windows={} seconds={secs:.3}",
            sample.name,
            sample.len(),
            res.starts.len()
        );
        names.push(sample.name);
    }
    if !single {
        write_manifest(out, &names)?;
    }
    Ok(())
}

fn read_masks(dir: &Path, count: usize) -> Result<Vec<vismem::Tensor>> {
    (0..count).map(|t| read_pgm(&mask_path(dir, t))).collect()
}

fn eval(pred: &Path, gt: &Path, report: &Path, tolerance: f64) -> Result<()> {
    let single = is_sequence(gt);
    let mut reports: Vec<SequenceReport> = Vec::new();
    for dir in sequence_dirs(gt)? {
        let truth = load_sequence(&dir)?;
        let pdir = if single { pred.to_path_buf() } else { pred.join(&truth.name) };
        let preds = read_masks(&pdir, truth.len())?;
        let preds = preds
            .into_iter()
            .map(|p| p.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
            .collect::<Vec<_>>();
        reports.push(evaluate_sequence(&truth.name, &preds, &truth.masks, tolerance)?);
    }
    let table = report_table(&reports);
    let mut text = table.clone();
    text.push('\n');
    for r in &reports {
        text.push_str(&r.to_records());
    }
    write_text(report, &text)?;
    print!("{table}");
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Invalid(format!("{what}: cannot parse '{p}'")))
        })
        .collect()
}

fn vis_gates(records: &Path, channels: &str, signals: &str, scale: usize, direction: &str, out: &Path) -> Result<()> {
    let path = if records.is_dir() { records.join(GATES_FILE) } else { records.to_path_buf() };
    let trace = gates_from_archive(&Archive::load(&path)?)?;
    let recs = match direction {
        "fwd" => &trace.forward,
        "bwd" => &trace.backward,
        other => return Err(Error::Invalid(format!("direction must be fwd or bwd, got '{other}'"))),
    };
    let spec = HeatmapSpec {
        channels: parse_list("channels", channels)?,
        signals: parse_list::<GateSignal>("signals", signals)?,
        scale,
    };
    let written = render_gates(recs, &spec, out)?;
    println!("heatmaps={} out={}", written.len(), out.display());
    Ok(())
}

/// Prints the parameter audit of `variant` and fails when a conv-stack
/// replacement misses the ConvGRU's count by more than [`MATCH_TOLERANCE`].
fn audit(model: &ModelConfig, variant: Variant) -> Result<()> {
    let reference = ModelParams::<f32>::zeros(model)?;
    let ablated = ModelParams::<f32>::zeros(&model.clone().with_variant(variant))?;
    let gru = reference.memory_param_count();
    let mem = ablated.memory_param_count();
    let rel = (mem as f64 - gru as f64).abs() / gru.max(1) as f64;
    println!(
        "audit variant={variant} memory={} memory_params={mem} gru_params={gru} rel_diff={rel:.4} trainable={}",
        ablated.config.memory,
        ablated.memory_stage_param_count()
    );
    if ablated.config.memory == MemoryKind::None
        && model.memory == MemoryKind::Gru
        && ablated.config.input_channels() == model.input_channels()
        && rel > MATCH_TOLERANCE
    {
        return Err(Error::Invalid(format!(
            "conv stack has {mem} parameters against {gru} for the ConvGRU ({:.1}% apart, limit {:.0}%)",
            rel * 100.0,
            MATCH_TOLERANCE * 100.0
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    cfg: &RunConfig,
    explicit: bool,
    variant: Variant,
    data: Option<PathBuf>,
    init: Option<PathBuf>,
    out: Option<PathBuf>,
    val: Option<PathBuf>,
    audit_only: bool,
    args: &TrainArgs,
) -> Result<()> {
    let model = match &init {
        Some(p) if !explicit => load_checkpoint::<f32>(p)?.config,
        _ => cfg.model.clone(),
    };
    audit(&model, variant)?;
    if audit_only {
        return Ok(());
    }
    let need = |v: Option<PathBuf>, flag: &str| {
        v.ok_or_else(|| Error::Invalid(format!("--{flag} is required unless --audit-only is given")))
    };
    let (data, init, out) = (need(data, "data")?, need(init, "init")?, need(out, "out")?);
    let params = train(cfg, explicit, &data, &init, &out, args, Some(variant))?;
    if let Some(val) = val {
        let mut total = 0.0;
        let mut n = 0usize;
        for v in load_dataset(&val)? {
            let pass = params.forward_video(&v, Default::default())?;
            let preds = pass
                .object_probs()
                .iter()
                .map(|p| upsample_nearest(&vismem::model::threshold_mask(p), params.config.stride))
                .collect::<Result<Vec<_>>>()?;
            let r = evaluate_sequence(&v.name, &preds, &v.masks, vismem::metrics::DEFAULT_TOLERANCE)?;
            total += r.j_mean;
            n += 1;
        }
        println!("variant={variant} val_sequences={n} j_mean={:.6}", total / n.max(1) as f64);
    }
    Ok(())
}
