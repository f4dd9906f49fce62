use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use skelae::checkpoint::Checkpoint;
use skelae::data::{
    decode_dataset, encode_dataset, normalize, ntu_split, parse_ntu_skeleton, resample_temporal, synth_dataset,
    DatasetSplit, NormalizeConfig, NtuName, SkeletonSequence, SplitKind,
};
use skelae::evaluation::{
    extract_features, fine_tune, knn1_eval, linear_eval, randomly_rotated, supervised_e2e, ClassifierConfig,
    EvalReport, FeatureBank,
};
use skelae::graph::SkeletonGraph;
use skelae::model::{Model, ModelConfig};
use skelae::training::{RunMeta, RunOptions, Trainer};

use crate::config::{parse_synthetic, Protocol, RunConfig, CHECKPOINT_FILE};
use crate::{CliError, Common, EvalArgs, InspectArgs, PrepareArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

const MANIFEST_FILE: &str = "manifest.json";
const LOG_FILE: &str = "train_log.jsonl";

/// Attaches `path` to errors that do not already name it.
fn at(path: &Path) -> impl FnOnce(skelae::Error) -> CliError + '_ {
    move |source| match source {
        skelae::Error::Io { .. } => CliError::Core(source),
        source => CliError::File { path: path.to_path_buf(), source },
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let out = cfg.out_dir(common.out.as_deref());
    Ok((cfg, out))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| skelae::Error::io(dir, e).into())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| skelae::Error::io(path, e).into())
}

fn load_dataset(path: &Path) -> Result<DatasetSplit> {
    let bytes = fs::read(path).map_err(|e| skelae::Error::io(path, e))?;
    decode_dataset(&bytes).map_err(at(path))
}

#[derive(Debug, Serialize)]
struct ClassCount {
    name: String,
    train: usize,
    test: usize,
}

/// Counts per class and split; contains nothing run-dependent, so reruns
/// write identical bytes.
#[derive(Debug, Serialize)]
struct Manifest {
    kind: SplitKind,
    joints: usize,
    frames: usize,
    train: usize,
    test: usize,
    classes: Vec<ClassCount>,
}

impl Manifest {
    fn of(split: &DatasetSplit) -> Self {
        let first = split.train.first().or(split.test.first());
        Manifest {
            kind: split.kind,
            joints: first.map_or(0, SkeletonSequence::joints),
            frames: first.map_or(0, SkeletonSequence::frames),
            train: split.train.len(),
            test: split.test.len(),
            classes: split
                .class_names
                .iter()
                .zip(split.class_counts())
                .map(|(name, (train, test))| ClassCount { name: name.clone(), train, test })
                .collect(),
        }
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

pub fn prepare(args: PrepareArgs) -> Result<()> {
    let (cfg, out) = load_config(&args.common)?;
    let mut data = cfg.data;
    data.split = args.split.unwrap_or(data.split);
    data.body = args.body.unwrap_or(data.body);
    data.frames = args.frames.unwrap_or(data.frames);
    data.normalize = args.normalize.map_or(data.normalize, |s| s.on());
    data.precision = args.precision.unwrap_or(data.precision);
    data.cache = args.cache.unwrap_or(data.cache);
    let ntu = args.ntu.or(if args.synthetic.is_some() { None } else { data.ntu.clone() });

    let split = match (ntu, args.synthetic) {
        (Some(dir), _) => load_ntu_dir(&dir, &data)?,
        (None, pairs) => {
            let base = data.synthetic.clone().unwrap_or_default();
            if pairs.is_none() && data.synthetic.is_none() {
                return Err(CliError::Usage(
                    "prepare needs --synthetic or --ntu (or a [data] source in --config)".into(),
                ));
            }
            let mut synth = parse_synthetic(&pairs.unwrap_or_default(), base)?;
            if let Some(seed) = args.common.seed.or(cfg.seed) {
                synth.seed = seed;
            }
            synth_dataset(&synth)?
        }
    };

    ensure_dir(&out)?;
    let cache = out.join(&data.cache);
    write_file(&cache, &encode_dataset(&split, data.precision))?;
    let manifest = Manifest::of(&split);
    write_file(&out.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    println!(
        "{}: {} train / {} test, {} classes, {} joints x {} frames",
        cache.display(),
        manifest.train,
        manifest.test,
        manifest.classes.len(),
        manifest.joints,
        manifest.frames
    );
    Ok(())
}

/// Every `.skeleton` file of `dir` in name order, resampled and optionally
/// normalized.
fn load_ntu_dir(dir: &Path, data: &crate::config::DataConfig) -> Result<DatasetSplit> {
    let entries = fs::read_dir(dir).map_err(|e| skelae::Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| skelae::Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "skeleton") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::File {
            path: dir.to_path_buf(),
            source: skelae::Error::Format { what: "ntu directory", msg: "no .skeleton files".into() },
        });
    }
    let mut files = Vec::with_capacity(paths.len());
    for path in &paths {
        let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let name: NtuName = file_name.parse().map_err(at(path))?;
        let text = fs::read_to_string(path).map_err(|e| skelae::Error::io(path, e))?;
        let mut seqs = Vec::new();
        for s in parse_ntu_skeleton(&text, data.body).map_err(at(path))? {
            let mut s = resample_temporal(&s, data.frames).map_err(at(path))?;
            if data.normalize {
                s = normalize(&s, NormalizeConfig::NTU).map_err(at(path))?;
            }
            seqs.push(s);
        }
        files.push((name, seqs));
    }
    Ok(ntu_split(files, data.split)?)
}

/// A path names a bone-list file when it exists; otherwise it must be a
/// built-in topology.
fn resolve_graph(topology: &str, joints: Option<usize>) -> Result<SkeletonGraph> {
    let path = Path::new(topology);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(|e| skelae::Error::io(path, e))?;
        return SkeletonGraph::parse_bone_list(&text, joints).map_err(at(path));
    }
    Ok(SkeletonGraph::builtin(topology)?)
}

fn default_graph(joints: usize) -> Result<SkeletonGraph> {
    match joints {
        25 => Ok(SkeletonGraph::ntu25()),
        9 => Ok(SkeletonGraph::stick9()),
        m => Err(CliError::Usage(format!("no built-in topology has {m} joints; pass --graph"))),
    }
}

fn check_dims(model: &ModelConfig, seq: Option<&SkeletonSequence>) -> Result<()> {
    match seq {
        Some(s) if (s.joints(), s.frames()) != (model.joints, model.frames) => Err(CliError::Usage(format!(
            "model expects {} joints x {} frames but the dataset has {} x {}",
            model.joints,
            model.frames,
            s.joints(),
            s.frames()
        ))),
        _ => Ok(()),
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let (cfg, out) = load_config(&args.common)?;
    let data_path = args.data.clone().unwrap_or_else(|| out.join(&cfg.data.cache));
    let data = load_dataset(&data_path)?;

    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(&Checkpoint::load(path).map_err(at(path))?).map_err(at(path))?,
        None => {
            let mut model_cfg = cfg.model.clone();
            let first = data.train.first().ok_or_else(|| CliError::File {
                path: data_path.clone(),
                source: skelae::Error::Format { what: "dataset cache", msg: "no training sequences".into() },
            })?;
            model_cfg.joints = first.joints();
            model_cfg.frames = first.frames();
            model_cfg.latent_dim = args.latent_dim.unwrap_or(model_cfg.latent_dim);
            if let Some(c) = &args.channels {
                model_cfg.channels = c.clone();
            }

            let mut tc = cfg.train.clone();
            if let Some(v) = args.variant.or(cfg.variant) {
                tc = tc.with_variant(v);
            }
            tc.laplacian = args.laplacian.map_or(tc.laplacian, |s| s.on());
            tc.ssvi = args.ssvi.map_or(tc.ssvi, |s| s.on());
            tc.seed = args.common.seed.or(cfg.seed).unwrap_or(tc.seed);
            tc.epochs = args.epochs.unwrap_or(tc.epochs);
            tc.batch_size = args.batch_size.unwrap_or(tc.batch_size);
            tc.lr = args.lr.unwrap_or(tc.lr);
            tc.grl_lambda = args.grl_lambda.unwrap_or(tc.grl_lambda);
            tc.ssvi_hidden = args.ssvi_hidden.unwrap_or(tc.ssvi_hidden);
            tc.combine = args.combine.unwrap_or(tc.combine);
            tc.mu = args.mu.unwrap_or(tc.mu);
            tc.checkpoint_every = args.checkpoint_every.unwrap_or(tc.checkpoint_every);
            tc.validate()?;
            let model = Model::build(&model_cfg, tc.seed)?;
            Trainer::new(model, tc)?
        }
    };
    check_dims(trainer.model.config(), data.train.first())?;

    let graph = if trainer.config.laplacian {
        Some(match args.graph.as_ref().or(cfg.graph.as_ref()) {
            Some(topology) => resolve_graph(topology, Some(trainer.model.config().joints))?,
            None => default_graph(trainer.model.config().joints)?,
        })
    } else {
        None
    };

    ensure_dir(&out)?;
    let opts = RunOptions { stop_at: None, checkpoint_path: Some(out.join(CHECKPOINT_FILE)) };
    let result = trainer.run(&data.train, graph.as_ref(), &opts);

    // The log is written even after divergence so the failing step is visible.
    let log_path = out.join(LOG_FILE);
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume.is_some())
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(|e| skelae::Error::io(&log_path, e))?;
    trainer.log.write_jsonl(&mut file).map_err(|e| skelae::Error::io(&log_path, e))?;
    result?;

    if let Some(last) = trainer.log.epoch_means().last() {
        let mut line = format!("{} epoch {}: mse {:.6}", trainer.config.variant().name(), last.epoch, last.mse);
        if let Some(r) = last.r_skel {
            line += &format!(", r_skel {r:.6}");
        }
        if let Some(s) = last.ssvi {
            line += &format!(", ssvi {s:.6}");
        }
        println!("{line}");
    }
    println!("checkpoint: {} (step {})", opts.checkpoint_path.as_ref().expect("set above").display(), trainer.step);
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path).map_err(at(path))?;
    let meta: RunMeta = serde_json::from_str(&ckpt.meta)
        .map_err(|e| skelae::Error::Format { what: "checkpoint", msg: format!("run metadata: {e}") })
        .map_err(at(path))?;
    Model::from_parts(&meta.model, ckpt.params, ckpt.buffers).map_err(at(path))
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (cfg, out) = load_config(&args.common)?;
    let data_path = args.data.clone().unwrap_or_else(|| out.join(&cfg.data.cache));
    let data = load_dataset(&data_path)?;
    let protocol = args.protocol.or(cfg.protocol).unwrap_or(Protocol::Knn1);
    let seed = args.common.seed.or(cfg.seed).unwrap_or(0);
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));

    // Supervised training starts from scratch; a checkpoint only lends its
    // architecture when one exists.
    let model = if protocol == Protocol::Supervised && args.checkpoint.is_none() && !ckpt_path.exists() {
        let mut mc = cfg.model.clone();
        if let Some(s) = data.train.first() {
            (mc.joints, mc.frames) = (s.joints(), s.frames());
        }
        Model::build(&mc, seed)?
    } else {
        load_model(&ckpt_path)?
    };
    check_dims(model.config(), data.train.first())?;

    let rotated = args.rotated_test || cfg.eval.rotated_test;
    let test = if rotated { randomly_rotated(&data.test, seed)? } else { data.test.clone() };
    let base = if protocol == Protocol::Lep { ClassifierConfig::LEP } else { ClassifierConfig::SUPERVISED };
    let cls = ClassifierConfig {
        epochs: args.epochs.or(cfg.eval.epochs).unwrap_or(base.epochs),
        lr: args.lr.or(cfg.eval.lr).unwrap_or(base.lr),
        batch_size: args.batch_size.or(cfg.eval.batch_size).unwrap_or(base.batch_size),
        seed,
    };

    ensure_dir(&out)?;
    let banks = |model: &Model| -> Result<(FeatureBank, FeatureBank)> {
        let train = extract_features(model, &data.train, "train")?;
        let test = extract_features(model, &test, "test")?;
        train.save(&out.join("features_train.bank"))?;
        test.save(&out.join("features_test.bank"))?;
        Ok((train, test))
    };
    let report: EvalReport = match protocol {
        Protocol::Knn1 => {
            let (train, test) = banks(&model)?;
            knn1_eval(&train, &test, args.distance.unwrap_or(cfg.eval.distance))?
        }
        Protocol::Lep => {
            let (train, test) = banks(&model)?;
            linear_eval(&train, &test, &cls)?
        }
        Protocol::Finetune => fine_tune(&mut model.clone(), &data.train, &test, &cls)?,
        Protocol::Supervised => supervised_e2e(model.config(), seed, &data.train, &test, &cls)?,
    };

    let name = protocol.name();
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&out.join(format!("eval_{name}.json")), json.as_bytes())?;
    write_file(&out.join(format!("confusion_{name}.txt")), report.confusion_grid().as_bytes())?;
    println!("{name}{}: accuracy {:.4}", if rotated { " (rotated test)" } else { "" }, report.accuracy);
    Ok(())
}

pub fn inspect(args: InspectArgs) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    let text = if let Some(topology) = &args.graph {
        resolve_graph(topology, args.joints)?.describe()
    } else if let Some(path) = &args.checkpoint {
        describe_checkpoint(path)?
    } else if let Some(path) = &args.dataset {
        Manifest::of(&load_dataset(path)?).to_json()
    } else if let Some(path) = &args.bank {
        let bank = FeatureBank::load(path).map_err(at(path))?;
        format!("split: {}\nrows: {}\ndim: {}\n", bank.split, bank.len(), bank.dim())
    } else {
        unreachable!("clap requires one artifact")
    };
    stdout.write_all(text.as_bytes()).map_err(|e| skelae::Error::io("<stdout>", e))?;
    Ok(())
}

fn describe_checkpoint(path: &Path) -> Result<String> {
    let ckpt = Checkpoint::load(path).map_err(at(path))?;
    let mut s = format!("step: {}\nmeta: {}\nparameters: {}\n", ckpt.step, ckpt.meta, ckpt.params.len());
    for (name, t) in ckpt.params.iter() {
        s += &format!("  {name} {:?}\n", t.shape());
    }
    s += &format!("buffers: {}\n", ckpt.buffers.len());
    for (name, stats) in &ckpt.buffers {
        s += &format!("  {name} [{}]\n", stats.mean.len());
    }
    s += &format!("scalars: {}\n", ckpt.params.scalar_count());
    Ok(s)
}
