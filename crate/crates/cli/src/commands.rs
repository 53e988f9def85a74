use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fan_core::annotate::{annotate, write_annotations};
use fan_core::arch::{count_parameters, size_sweep_from, Model};
use fan_core::batch::GuideSource;
use fan_core::checkpoint;
use fan_core::config::{DepthRegressorConfig, FanConfig, ModelKind, ModelSpec, RunConfig, TrainConfig};
use fan_core::data::manifest::{load_dataset, parse_manifest};
use fan_core::data::synth::{synth_generate, SynthConfig};
use fan_core::data::Sample;
use fan_core::eval::{
    ablation_report, evaluate, evaluate_depth, summarize, EvalOptions, Predictor, Protocol, NOISE_LEVELS,
    RESOLUTION_LADDER,
};
use fan_core::metrics::{balanced_subset, ced_curve, CED_STEP};
use fan_core::train::{prepare, split_validation, train, EpochLog, TrainState};
use fan_core::CoreError;
use fan_tensor::Scalar;
use log::info;

use crate::report::write_per_sample;
use crate::{AblateArgs, AnnotateArgs, Cli, Command, EvalArgs, Precision, ProtocolArg, SynthArgs, TrainArgs};

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.threads {
        Some(0) => return Err(config_error("--threads must be at least 1")),
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            fan_tensor::set_parallel(n > 1);
        }
        None => fan_tensor::set_parallel(true),
    }
    match cli.precision {
        Precision::F32 => dispatch::<f32>(&cli),
        Precision::F64 => dispatch::<f64>(&cli),
    }
}

fn dispatch<T: Scalar>(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Train(a) => train_cmd::<T>(cli, a),
        Command::Eval(a) => eval_cmd::<T>(cli, a),
        Command::Annotate(a) => annotate_cmd::<T>(cli, a),
        Command::Ablate(a) => ablate_cmd::<T>(cli, a),
        Command::Report(a) => crate::report::run(a),
        Command::Gradcheck(a) => crate::gradcheck::run(a, cli.seed.unwrap_or(0)),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    if a.yaw_min > a.yaw_max {
        return Err(config_error("--yaw-min exceeds --yaw-max"));
    }
    let cfg = SynthConfig::new(a.count, cli.seed.unwrap_or(0), a.landmarks, (a.yaw_min, a.yaw_max));
    let records = synth_generate(&cfg, &a.out)?;
    println!("wrote {} samples to {}", records.len(), a.out.display());
    Ok(())
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let run = RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(Some(run))
}

/// Tiny networks with the matching training preset.
pub fn default_run(kind: ModelKind, num_landmarks: usize) -> RunConfig {
    let model = match kind {
        ModelKind::Fan2d | ModelKind::Fan3d => ModelSpec::fan(kind, FanConfig::tiny(num_landmarks)),
        ModelKind::Guided => ModelSpec::fan(kind, FanConfig::tiny(num_landmarks).guided()),
        ModelKind::Depth => ModelSpec::depth(DepthRegressorConfig::tiny(num_landmarks)),
    };
    let train = match kind {
        ModelKind::Guided => TrainConfig::guided(),
        _ => TrainConfig::fan(),
    };
    RunConfig { model, train }
}

fn landmark_count(samples: &[Sample]) -> Result<usize> {
    let n = samples[0].landmarks.len();
    if let Some(s) = samples.iter().find(|s| s.landmarks.len() != n) {
        return Err(CoreError::Data(format!("sample {} has {} landmarks, expected {n}", s.id, s.landmarks.len())).into());
    }
    Ok(n)
}

fn check_landmarks<T: Scalar>(model: &Model<T>, n: usize) -> Result<()> {
    let m = model.spec.num_landmarks();
    if m != n {
        return Err(CoreError::Contract(format!("model predicts {m} landmarks, data has {n}")).into());
    }
    Ok(())
}

fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    Ok(checkpoint::load::<T>(path)?.model)
}

fn print_epoch(l: &EpochLog) {
    println!(
        "epoch {:>3}  lr {:.1e}  train loss {:.6}  val error {:.5}",
        l.epoch, l.learning_rate, l.train_loss, l.val_error
    );
}

fn train_cmd<T: Scalar>(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let samples = load_dataset(&a.data)?;
    let n = landmark_count(&samples)?;
    let (mut state, mut cfg) = if let Some(path) = &a.resume {
        let (state, run) = checkpoint::load::<T>(path)?.into_state()?;
        info!("resuming {} at epoch {}", path.display(), state.epoch);
        (state, run.train)
    } else if let Some(path) = &a.finetune {
        let (mut state, run) = checkpoint::load::<T>(path)?.into_state()?;
        let cfg = TrainConfig {
            learning_rate: run.train.final_lr(),
            drop_epochs: Vec::new(),
            epochs: a.finetune_epochs.expect("required by clap"),
            ..run.train
        };
        state.epoch = 0;
        state.optim.set_learning_rate(cfg.learning_rate)?;
        (state, cfg)
    } else {
        let kind: ModelKind = a
            .kind
            .as_deref()
            .ok_or_else(|| config_error("--kind is required for a new run"))?
            .parse()?;
        let run = match load_config(cli)? {
            Some(r) => r,
            None => default_run(kind, n),
        };
        if run.model.kind != kind {
            return Err(config_error(format!("config describes a {:?} model, --kind asks for {kind:?}", run.model.kind)));
        }
        let mut cfg = run.train;
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        let model = Model::<T>::build(&run.model, cfg.seed)?;
        info!("{:?} model with {} parameters", kind, count_parameters(&run.model));
        (TrainState::new(model, &cfg)?, cfg)
    };
    if let Some(k) = &a.kind {
        let kind: ModelKind = k.parse()?;
        if kind != state.model.spec.kind {
            return Err(config_error(format!("checkpoint holds a {:?} model", state.model.spec.kind)));
        }
    }
    if let (Some(e), None) = (a.epochs, &a.finetune) {
        cfg.epochs = e;
    }
    check_landmarks(&state.model, n)?;
    let crops = prepare(&samples, state.model.spec.input_resolution(), cfg.margin)?;
    let (tr, val) = split_validation(&crops);
    let guide = if a.zero_guides { GuideSource::Zero } else { GuideSource::GroundTruth };
    let mut log = String::from("epoch,learning_rate,train_loss,val_error\n");
    train(&mut state, &tr, &val, &cfg, guide, None, |l| {
        print_epoch(l);
        log.push_str(&format!("{},{},{},{}\n", l.epoch, l.learning_rate, l.train_loss, l.val_error));
    })?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    checkpoint::save(&a.out, &state, &cfg)?;
    if let Some(p) = &a.log {
        write(p, &log)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_options(cli: &Cli, noise: f64, face_px: Option<f64>) -> Result<EvalOptions> {
    if !(0.0..1.0).contains(&noise) {
        return Err(config_error("--noise must lie in [0, 1)"));
    }
    if face_px.is_some_and(|p| !(p > 0.0)) {
        return Err(config_error("--face-px must be positive"));
    }
    Ok(EvalOptions {
        noise,
        face_px,
        seed: cli.seed.unwrap_or(0),
        ..EvalOptions::default()
    })
}

fn eval_cmd<T: Scalar>(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let samples = load_dataset(&a.data)?;
    let opts = eval_options(cli, a.noise.unwrap_or(0.0), a.face_px)?;
    let model = a.ckpt.as_deref().map(load_model::<T>).transpose()?;
    if let Some(m) = &model {
        check_landmarks(m, landmark_count(&samples)?)?;
        if m.spec.kind == ModelKind::Depth {
            let errs = evaluate_depth(m, &samples, None, &opts)?;
            println!("samples {}", errs.len());
            println!("depth_error {:.6}", errs.iter().sum::<f64>() / errs.len() as f64);
            return Ok(());
        }
    }
    let guide = if a.zero_guides { GuideSource::Zero } else { GuideSource::GroundTruth };
    let predictor = match &model {
        Some(m) => Predictor::Network(m, guide),
        None => Predictor::Passthrough,
    };
    let results = evaluate(&predictor, &samples, &opts)?;
    let s = summarize(&results, a.auc_threshold)?;
    println!("samples {}", s.count);
    println!("nme {:.6}", s.mean_nme);
    println!("auc {:.6}", s.auc);
    println!("failure_rate {:.6}", s.failure_rate);
    if let Some(p) = &a.ced {
        write(p, &ced_curve(&results, CED_STEP)?.to_csv())?;
    }
    if let Some(p) = &a.per_sample {
        write(p, &write_per_sample(&results))?;
    }
    Ok(())
}

fn annotate_cmd<T: Scalar>(cli: &Cli, a: &AnnotateArgs) -> Result<()> {
    let m2 = load_model::<T>(&a.ckpt_2d)?;
    let mg = load_model::<T>(&a.ckpt_guided)?;
    let md = a.ckpt_depth.as_deref().map(load_model::<T>).transpose()?;
    let samples = load_dataset(&a.data)?;
    check_landmarks(&m2, landmark_count(&samples)?)?;
    let root = a.data.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let images = parse_manifest(&text)?
        .iter()
        .map(|r| {
            let p: PathBuf = std::path::absolute(root.join(&r.image))?;
            Ok(p.to_string_lossy().into_owned())
        })
        .collect::<std::io::Result<Vec<_>>>()?;
    let opts = EvalOptions {
        seed: cli.seed.unwrap_or(0),
        ..EvalOptions::default()
    };
    let run = annotate(&m2, &mg, md.as_ref(), &samples, &opts)?;
    println!(
        "guide digest fed {:016x} encoded {:016x}",
        run.fed_guide_digest, run.encoded_guide_digest
    );
    if run.fed_guide_digest != run.encoded_guide_digest {
        return Err(CoreError::Contract("guide maps fed to the guided network differ from the 2D output".into()).into());
    }
    write_annotations(&run, &images, &a.out)?;
    println!("annotated {} samples into {}", run.annotations.len(), a.out.display());
    Ok(())
}

fn ablate_cmd<T: Scalar>(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut samples = load_dataset(&a.data)?;
    if let Some(k) = a.per_bin {
        let yaws: Vec<Option<f64>> = samples.iter().map(|s| s.yaw).collect();
        let keep = balanced_subset(&yaws, k, seed)?;
        samples = keep.into_iter().map(|i| samples[i].clone()).collect();
    }
    let n = landmark_count(&samples)?;
    let opts = EvalOptions {
        seed,
        ..EvalOptions::default()
    };
    let table = if a.protocol == ProtocolArg::Size {
        let path = a
            .train_data
            .as_deref()
            .ok_or_else(|| config_error("the size protocol needs --train-data"))?;
        let run = load_config(cli)?.unwrap_or_else(|| default_run(ModelKind::Fan2d, n));
        let base = run
            .model
            .fan
            .clone()
            .ok_or_else(|| config_error("the size protocol needs a FAN model config"))?;
        let mut cfg = run.train.clone();
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(e) = a.epochs {
            cfg.epochs = e;
        }
        let train_samples = load_dataset(path)?;
        let crops = prepare(&train_samples, base.input_resolution, cfg.margin)?;
        let (tr, val) = split_validation(&crops);
        let mut models = Vec::new();
        for f in size_sweep_from(&base) {
            let spec = ModelSpec::fan(run.model.kind, f.clone());
            let label = format!("stacks{}-width{}-params{}", f.num_stacks, f.width, count_parameters(&spec));
            println!("training {label}");
            let model = Model::<T>::build(&spec, cfg.seed)?;
            check_landmarks(&model, n)?;
            let mut st = TrainState::new(model, &cfg)?;
            train(&mut st, &tr, &val, &cfg, GuideSource::GroundTruth, None, print_epoch)?;
            models.push((label, st.model));
        }
        let preds: Vec<(String, Predictor<'_, T>)> = models
            .iter()
            .map(|(l, m)| (l.clone(), Predictor::Network(m, GuideSource::GroundTruth)))
            .collect();
        ablation_report(&preds, &samples, &Protocol::Size, &opts)?
    } else {
        let path = a.ckpt.as_deref().ok_or_else(|| config_error("this protocol needs --ckpt"))?;
        let model = load_model::<T>(path)?;
        check_landmarks(&model, n)?;
        let protocol = match a.protocol {
            ProtocolArg::Yaw => Protocol::Yaw,
            ProtocolArg::Noise => Protocol::Noise(NOISE_LEVELS.to_vec()),
            ProtocolArg::Resolution => Protocol::Resolution(RESOLUTION_LADDER.to_vec()),
            ProtocolArg::Size => unreachable!("handled above"),
        };
        let preds = [("model".to_string(), Predictor::Network(&model, GuideSource::GroundTruth))];
        ablation_report(&preds, &samples, &protocol, &opts)?
    };
    let csv = table.to_csv();
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}
