use std::io::Write;
use std::path::{Path, PathBuf};

use gatefuse::data::{
    dataset_dims, load_dataset, pad_batch, save_dataset, synth_generate, total_utterances, InteractionMode,
    SyntheticSpec, Video,
};
use gatefuse::model::{infer, ForwardOptions, Modality, ModelDims, ModelParams, VideoInput, FUSIONS};
use gatefuse::tape::BackwardFault;
use gatefuse::training::{
    grad_check_model, metrics_of, predict_dataset, train_with, write_history_csv, GradCheckOptions, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{EvalArgs, GradcheckArgs, InspectArgs, SynthArgs, TrainArgs};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::CliError;

fn report(out: &mut impl Write, line: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(CliError::io("<stdout>"))
}

fn required<'a>(flag: Option<&'a Path>, configured: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    flag.or(configured.as_deref())
        .ok_or_else(|| CliError::Usage(format!("no {what} given (flag or `paths` section of --config)")))
}

pub fn synth(config: &RunConfig, args: &SynthArgs, out: &mut impl Write) -> Result<(), CliError> {
    let mut spec = config.synth.clone();
    if let Some(v) = args.videos {
        spec.n_videos = v;
    }
    if let Some(m) = args.mode {
        spec.mode = m;
    }
    if let Some(v) = args.min_utterances {
        spec.min_utterances = v;
    }
    if let Some(v) = args.max_utterances {
        spec.max_utterances = v;
    }
    if let Some(v) = args.text_dim {
        spec.text_dim = v;
    }
    if let Some(v) = args.audio_dim {
        spec.audio_dim = v;
    }
    if let Some(v) = args.video_dim {
        spec.video_dim = v;
    }
    if let Some(n) = args.noise {
        spec.modality_noise = n.0;
    }
    if let Some(j) = args.jitter {
        spec.jitter = j;
    }
    let videos = synth_generate(&spec)?;
    save_dataset(&args.out, &videos)?;
    let [t, a, v] = spec.dims();
    report(
        out,
        format_args!(
            "wrote {}: videos={} utterances={} dims={t}/{a}/{v} mode={}",
            args.out.display(),
            videos.len(),
            total_utterances(&videos),
            mode_name(spec.mode)
        ),
    )
}

fn mode_name(m: InteractionMode) -> &'static str {
    match m {
        InteractionMode::Xor => "xor",
        InteractionMode::Majority => "majority",
        InteractionMode::Redundant => "redundant",
    }
}

fn train_config(base: &TrainConfig, args: &TrainArgs) -> TrainConfig {
    let mut cfg = base.clone();
    if let Some(a) = args.ablation {
        cfg.ablation = a;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = args.hidden {
        cfg.hidden = v;
    }
    if args.head_hidden.is_some() {
        cfg.head_hidden = args.head_hidden;
    }
    if args.clip_norm.is_some() {
        cfg.clip_norm = args.clip_norm;
    }
    cfg
}

fn dims_of(videos: &[Video], path: &Path) -> Result<[usize; 3], CliError> {
    dataset_dims(videos).ok_or_else(|| CliError::Usage(format!("{}: dataset is empty", path.display())))
}

fn check_dims(expected: [usize; 3], videos: &[Video], path: &Path) -> Result<(), CliError> {
    match dataset_dims(videos) {
        Some(d) if d != expected => Err(CliError::Usage(format!(
            "{}: feature dims {:?} do not match the model's {:?}",
            path.display(),
            d,
            expected
        ))),
        _ => Ok(()),
    }
}

pub fn train(config: &RunConfig, args: &TrainArgs, out: &mut impl Write) -> Result<(), CliError> {
    let cfg = train_config(&config.train, args);
    cfg.validate()?;
    let train_path = required(args.train.as_deref(), &config.paths.train, "training data")?;
    let train_set = load_dataset(train_path)?;
    let [t, a, v] = dims_of(&train_set, train_path)?;
    let val_path = args.val.as_deref().or(config.paths.val.as_deref());
    let val_set = match val_path {
        Some(p) => {
            let vs = load_dataset(p)?;
            check_dims([t, a, v], &vs, p)?;
            vs
        }
        None => Vec::new(),
    };
    let dims = ModelDims {
        head_hidden: cfg.head_hidden,
        ..ModelDims::new(t, a, v, cfg.hidden)
    };
    let model = ModelParams::<f64>::new(dims, cfg.ablation, cfg.seed)?;
    report(
        out,
        format_args!(
            "training {} ({} parameters) on {} videos / {} utterances for {} epochs",
            cfg.ablation,
            model.num_scalars(),
            train_set.len(),
            total_utterances(&train_set),
            cfg.epochs
        ),
    )?;

    let mut io_err = None;
    let outcome = train_with(model, &train_set, &val_set, &cfg, |r| {
        if io_err.is_none() {
            if let Err(e) = writeln!(
                out,
                "epoch {:>3}  train_loss={:.6}  val_acc={:.4}  val_f1={:.4}",
                r.epoch, r.train_loss, r.val_acc, r.val_f1
            ) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(CliError::io("<stdout>")(e));
    }

    let ckpt_path = args
        .checkpoint
        .clone()
        .or_else(|| config.paths.checkpoint.clone())
        .unwrap_or_else(|| config.output_path(None, "model.ckpt"));
    Checkpoint::new(outcome.model.clone(), cfg.clone()).save(&ckpt_path)?;
    let metrics_path = config.output_path(args.metrics.as_deref(), "metrics.csv");
    let file = std::fs::File::create(&metrics_path).map_err(CliError::io(&metrics_path))?;
    write_history_csv(file, &outcome.history).map_err(|e| CliError::io(&metrics_path)(std::io::Error::other(e)))?;

    let train_metrics = metrics_of(&predict_dataset(&outcome.model, &train_set)?);
    report(
        out,
        format_args!(
            "train_accuracy={:.6} train_f1={:.6}",
            train_metrics.accuracy, train_metrics.f1
        ),
    )?;
    if !val_set.is_empty() {
        let m = metrics_of(&predict_dataset(&outcome.model, &val_set)?);
        let best = outcome.best_epoch.map_or(String::new(), |e| format!(" best_epoch={e}"));
        report(
            out,
            format_args!("val_accuracy={:.6} val_f1={:.6}{best}", m.accuracy, m.f1),
        )?;
    }
    report(
        out,
        format_args!("checkpoint={} metrics={}", ckpt_path.display(), metrics_path.display()),
    )
}

fn load_checkpoint(config: &RunConfig, flag: Option<&Path>) -> Result<Checkpoint, CliError> {
    Checkpoint::load(required(flag, &config.paths.checkpoint, "checkpoint")?)
}

fn model_input_dims(d: &ModelDims) -> [usize; 3] {
    [d.text, d.audio, d.video]
}

pub fn eval(config: &RunConfig, args: &EvalArgs, out: &mut impl Write) -> Result<(), CliError> {
    let ckpt = load_checkpoint(config, args.checkpoint.as_deref())?;
    let data_path = required(args.data.as_deref(), &config.paths.test, "dataset")?;
    let videos = load_dataset(data_path)?;
    check_dims(model_input_dims(&ckpt.model.dims), &videos, data_path)?;
    let predictions = predict_dataset(&ckpt.model, &videos)?;
    let m = metrics_of(&predictions);
    let pred_path = config.output_path(args.predictions.as_deref(), "predictions.csv");
    let file = std::fs::File::create(&pred_path).map_err(CliError::io(&pred_path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let to_io = |e: csv::Error| CliError::io(&pred_path)(std::io::Error::other(e));
    w.write_record(["video_id", "utt_idx", "label", "pred", "p_pos"])
        .map_err(to_io)?;
    for p in &predictions {
        w.serialize(p).map_err(to_io)?;
    }
    w.flush().map_err(CliError::io(&pred_path))?;
    report(out, format_args!("accuracy={:.6} f1={:.6}", m.accuracy, m.f1))
}

#[derive(Debug, Serialize)]
struct UtteranceReport {
    index: usize,
    label: u8,
    pred: u8,
    p_pos: f64,
    /// `A_M[u, u]` per modality, `None` without self attention.
    self_diagonal: [Option<f64>; 3],
    self_column_mean: [Option<f64>; 3],
    /// One gate per entry of the fusion list, `None` when ungated.
    gates: [Option<f64>; 6],
}

#[derive(Debug, Serialize)]
struct InspectReport {
    video_id: String,
    ablation: String,
    modalities: [char; 3],
    fusions: Vec<String>,
    utterances: Vec<UtteranceReport>,
    mean_gates: [Option<f64>; 6],
}

fn inspect_report(ckpt: &Checkpoint, video: &Video) -> Result<InspectReport, CliError> {
    let feats = Modality::ALL.map(|m| video.matrix::<f64>(m));
    let mask = vec![true; video.len()];
    let input = VideoInput {
        features: [&feats[0], &feats[1], &feats[2]],
        mask: &mask,
    };
    let (probs, trace) = infer(
        &ckpt.model,
        &input,
        &ForwardOptions::eval(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let diag = Modality::ALL.map(|m| trace.self_scores_diagonal(m));
    let colmean = Modality::ALL.map(|m| trace.self_scores_column_mean(m));
    let utterances = video
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let p_pos = probs.get(i, 1);
            UtteranceReport {
                index: i,
                label: u.label,
                pred: u8::from(p_pos >= 0.5),
                p_pos,
                self_diagonal: std::array::from_fn(|m| diag[m].as_ref().map(|s| s[i])),
                self_column_mean: std::array::from_fn(|m| colmean[m].as_ref().map(|s| s[i])),
                gates: std::array::from_fn(|f| trace.gates[f].as_ref().map(|g| g[i])),
            }
        })
        .collect();
    Ok(InspectReport {
        video_id: video.id.clone(),
        ablation: ckpt.model.ablation.to_string(),
        modalities: Modality::ALL.map(Modality::letter),
        fusions: FUSIONS.iter().map(|f| f.label()).collect(),
        utterances,
        mean_gates: std::array::from_fn(|f| trace.mean_gate(f)),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn write_text_report(r: &InspectReport, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "video {}  ({})", r.video_id, r.ablation)?;
    let mut header = vec!["utt".to_string(), "label".into(), "pred".into(), "p_pos".into()];
    header.extend(r.modalities.iter().map(|m| format!("S_{m}")));
    header.extend(r.modalities.iter().map(|m| format!("S_{m}_mean")));
    header.extend(r.fusions.iter().map(|f| format!("G_{f}")));
    let rows: Vec<Vec<String>> = r
        .utterances
        .iter()
        .map(|u| {
            let mut row = vec![
                u.index.to_string(),
                u.label.to_string(),
                u.pred.to_string(),
                format!("{:.4}", u.p_pos),
            ];
            row.extend(u.self_diagonal.iter().map(|&v| cell(v)));
            row.extend(u.self_column_mean.iter().map(|&v| cell(v)));
            row.extend(u.gates.iter().map(|&v| cell(v)));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    for row in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        writeln!(out, "{}", line.join("  "))?;
    }
    let means: Vec<String> = r
        .fusions
        .iter()
        .zip(&r.mean_gates)
        .map(|(f, g)| format!("G_{f}={}", cell(*g)))
        .collect();
    writeln!(out, "mean gates: {}", means.join("  "))
}

pub fn inspect(config: &RunConfig, args: &InspectArgs, out: &mut impl Write) -> Result<(), CliError> {
    let ckpt = load_checkpoint(config, args.checkpoint.as_deref())?;
    let data_path = required(args.data.as_deref(), &config.paths.test, "dataset")?;
    let videos = load_dataset(data_path)?;
    check_dims(model_input_dims(&ckpt.model.dims), &videos, data_path)?;
    let video = videos
        .iter()
        .find(|v| v.id == args.video)
        .ok_or_else(|| CliError::Usage(format!("unknown video id {:?} in {}", args.video, data_path.display())))?;
    let r = inspect_report(&ckpt, video)?;
    if args.json {
        serde_json::to_writer_pretty(&mut *out, &r).map_err(|e| CliError::io("<stdout>")(e.into()))?;
        report(out, format_args!(""))
    } else {
        write_text_report(&r, out).map_err(CliError::io("<stdout>"))
    }
}

pub fn gradcheck(seed: u64, args: &GradcheckArgs, out: &mut impl Write) -> Result<(), CliError> {
    if args.batch == 0 || args.samples == 0 || args.hidden == 0 || args.dims == 0 {
        return Err(CliError::Usage(
            "--batch, --samples, --hidden and --dims must be positive".into(),
        ));
    }
    if [args.epsilon, args.threshold].iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(CliError::Usage("--epsilon and --threshold must be positive".into()));
    }
    let spec = SyntheticSpec {
        n_videos: args.batch,
        min_utterances: args.utterances,
        max_utterances: args.utterances,
        text_dim: args.dims,
        audio_dim: args.dims,
        video_dim: args.dims,
        seed,
        ..Default::default()
    };
    let videos = synth_generate(&spec)?;
    let batch = pad_batch::<f64, _>(&videos)?;
    let dims = ModelDims::new(args.dims, args.dims, args.dims, args.hidden);
    let model = ModelParams::<f64>::new(dims, args.ablation, seed)?;
    let opts = GradCheckOptions {
        epsilon: args.epsilon,
        samples: args.samples,
        seed,
        fault: args.inject_fault.then_some(BackwardFault::SigmoidDerivative),
    };
    let r = grad_check_model(&model, &batch, &opts)?;
    report(
        out,
        format_args!(
            "gradcheck {} h={} dims={} u={} batch={} params={} checked={} epsilon={:e}",
            args.ablation,
            args.hidden,
            args.dims,
            args.utterances,
            args.batch,
            model.num_scalars(),
            r.checked,
            args.epsilon
        ),
    )?;
    report(
        out,
        format_args!(
            "max_rel={:.3e} mean_rel={:.3e} threshold={:e}",
            r.max_rel, r.mean_rel, args.threshold
        ),
    )?;
    let worst = r
        .worst
        .as_ref()
        .map(|w| {
            format!(
                "{}[{}] analytic={:.6e} numeric={:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )
        })
        .unwrap_or_default();
    if r.passes(args.threshold) {
        report(out, format_args!("PASS worst={worst}"))
    } else {
        report(out, format_args!("FAIL worst={worst}"))?;
        Err(CliError::CheckFailed(format!(
            "max relative error {:.3e} is not below {:e} at {worst}",
            r.max_rel, args.threshold
        )))
    }
}
