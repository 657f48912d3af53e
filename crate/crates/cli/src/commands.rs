use std::path::{Path, PathBuf};

use blapose::augment::{
    align_bank_mean_with, gen_lengths_normal, gen_lengths_synthetic, gen_lengths_uniform,
    BankSource, LengthBank, Strategy,
};
use blapose::bench::{bench_online, BenchConfig};
use blapose::camera::KeypointSequence;
use blapose::corpus::{layout, mean_lengths, synthesize_corpus, Corpus, CorpusDir};
use blapose::eval::{
    adjust_poses, evaluate, finetune_toy_lifter, fingerprint, EvaluationReport, ToyLifter,
};
use blapose::io::{
    checkpoint_to_bundle, lifter_to_bundle, load_checkpoint, load_lifter, SequenceRecord,
    SequenceSet,
};
use blapose::model::train::{
    train, Augmentation, LengthGenerator, TrainContext, TrainExample, TrainLog,
};
use blapose::model::{forward_online, model_input, predict_sequence, OnlineState};
use blapose::plot;
use blapose::rng;
use blapose::skeleton::{BoneLengths, PoseSequence, SkeletonTopology};
use serde_json::{json, Value};

use crate::{CliError, Command, RunConfig, Split, StrategyArg};

/// Files produced by a command. Nothing touches the disk until the whole
/// command has succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    fn commit(self) -> Result<(), CliError> {
        for (path, bytes) in self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
            }
            std::fs::write(&path, bytes)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<CorpusDir, CliError> {
    if !path.join(layout::CONFIG).exists() {
        return Err(invalid(format!("{} is not a corpus directory", path.display())));
    }
    Ok(Corpus::load(path)?)
}

fn split_set(dir: &CorpusDir, split: Split) -> &SequenceSet {
    match split {
        Split::Train => &dir.corpus.train,
        Split::Test => &dir.corpus.test,
    }
}

fn examples(set: &SequenceSet) -> Result<Vec<TrainExample>, CliError> {
    set.records
        .iter()
        .map(|r| {
            Ok(TrainExample {
                poses: r.poses.clone(),
                keypoints: r.require_keypoints()?.clone(),
                lengths: r.require_lengths()?.clone(),
            })
        })
        .collect()
}

fn pairs(set: &SequenceSet) -> Result<Vec<(&KeypointSequence, &PoseSequence)>, CliError> {
    set.records
        .iter()
        .map(|r| Ok((r.require_keypoints()?, r.require_poses()?)))
        .collect()
}

fn lengths_stats(set: &SequenceSet) -> Result<LengthBank, CliError> {
    let rows = set
        .records
        .iter()
        .map(|r| r.require_lengths().map(|l| l.as_slice().to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LengthBank::new(rows, BankSource::Dataset)?)
}

fn source_bank(
    dir: &CorpusDir,
    bank: Option<&Path>,
    topo: &SkeletonTopology,
) -> Result<LengthBank, CliError> {
    Ok(match bank {
        Some(p) => LengthBank::load_csv(p, topo)?,
        None => dir.corpus.mesh_bank.clone(),
    })
}

fn normal_sigmas(cfg: &RunConfig, dir: &CorpusDir) -> Result<Vec<f64>, CliError> {
    match &cfg.normal_sigmas {
        Some(s) => Ok(s.clone()),
        None => Ok(lengths_stats(&dir.corpus.train)?.std().to_vec()),
    }
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn lengths_set(ids: &[&SequenceRecord], lengths: Vec<BoneLengths>) -> SequenceSet {
    SequenceSet::new(
        ids.iter()
            .zip(lengths)
            .map(|(r, l)| {
                let mut rec = SequenceRecord::new(r.meta.clone(), r.fps);
                rec.lengths = Some(l);
                rec
            })
            .collect(),
    )
}

fn poses_set(poses: Vec<PoseSequence>) -> SequenceSet {
    SequenceSet::new(
        poses
            .into_iter()
            .map(|p| {
                let mut rec = SequenceRecord::new(p.meta.clone(), p.fps);
                rec.poses = Some(p);
                rec
            })
            .collect(),
    )
}

pub(crate) fn dispatch(command: &Command, cfg: &RunConfig) -> Result<Value, CliError> {
    let mut out = Outputs::default();
    let summary = match command {
        Command::GenCorpus { out: dir } => gen_corpus(cfg, dir, &mut out)?,
        Command::GenLengths {
            corpus,
            strategy,
            count,
            bank,
            align_mean,
            out: path,
        } => gen_lengths(cfg, corpus, *strategy, *count, bank.as_deref(), *align_mean, path, &mut out)?,
        Command::Train {
            corpus,
            strategy,
            bank,
            unidirectional,
            epochs,
            no_flip,
            out: path,
            log,
        } => {
            let opts = TrainOpts {
                strategy: *strategy,
                bank: bank.as_deref(),
                unidirectional: *unidirectional,
                epochs: *epochs,
                no_flip: *no_flip,
            };
            train_cmd(cfg, corpus, &opts, path, log.as_deref(), &mut out)?
        }
        Command::PredictLengths {
            corpus,
            model,
            split,
            online,
            no_flip,
            out: path,
        } => predict_lengths(cfg, corpus, model, *split, *online, *no_flip, path, &mut out)?,
        Command::LiftToy {
            corpus,
            lifter,
            save_lifter,
            split,
            out: path,
        } => lift_toy(cfg, corpus, lifter.as_deref(), save_lifter.as_deref(), *split, path, &mut out)?,
        Command::Adjust {
            poses,
            lengths,
            out: path,
        } => adjust(cfg, poses, lengths, path, &mut out)?,
        Command::Eval {
            corpus,
            pred,
            split,
            out_dir,
        } => eval_cmd(cfg, corpus, pred, *split, out_dir, &mut out)?,
        Command::Finetune {
            corpus,
            lifter,
            model,
            out: path,
            log,
        } => finetune(cfg, corpus, lifter, model, path, log.as_deref(), &mut out)?,
        Command::Bench {
            corpus,
            model,
            lifter,
            steps,
            out: path,
        } => bench(cfg, corpus, model, lifter, *steps, path.as_deref(), &mut out)?,
        Command::Report {
            report,
            train_log,
            corpus,
            out_dir,
        } => report_cmd(report, train_log.as_deref(), corpus.as_deref(), out_dir, &mut out)?,
    };
    out.commit()?;
    Ok(summary)
}

fn gen_corpus(cfg: &RunConfig, dir: &Path, out: &mut Outputs) -> Result<Value, CliError> {
    let topo = cfg.topology()?;
    let cam = cfg.camera()?;
    let corpus = synthesize_corpus(&cfg.corpus, &topo, &cam)?;
    out.add(dir.join(layout::CONFIG), serde_json::to_string_pretty(&corpus.config).expect("config serializes"));
    out.add(dir.join(layout::TOPOLOGY), topo.to_json_string());
    out.add(dir.join(layout::CAMERA), cam.to_json_string());
    out.add(dir.join(layout::TRAIN), corpus.train.to_bundle(&topo)?.to_bytes());
    out.add(dir.join(layout::TEST), corpus.test.to_bundle(&topo)?.to_bytes());
    out.add(dir.join(layout::POPULATION), corpus.population.to_csv_string(&topo)?);
    out.add(dir.join(layout::MESH_BANK), corpus.mesh_bank.to_csv_string(&topo)?);
    let frames: usize = corpus
        .train
        .records
        .iter()
        .chain(&corpus.test.records)
        .filter_map(SequenceRecord::frames)
        .sum();
    Ok(json!({
        "train_sequences": corpus.train.len(),
        "test_sequences": corpus.test.len(),
        "frames": frames,
        "seed": cfg.corpus.seed,
    }))
}

#[allow(clippy::too_many_arguments)]
fn gen_lengths(
    cfg: &RunConfig,
    corpus: &Path,
    strategy: StrategyArg,
    count: usize,
    bank: Option<&Path>,
    align_mean: bool,
    path: &Path,
    out: &mut Outputs,
) -> Result<Value, CliError> {
    if count == 0 {
        return Err(invalid("--count must be positive"));
    }
    let dir = load_corpus(corpus)?;
    let topo = &dir.topology;
    let train_stats = lengths_stats(&dir.corpus.train)?;
    let train_mean = train_stats.mean_lengths();
    let aug = &cfg.augmentation;
    let mut rng = rng::stream(aug.seed, 4);
    let samples: Vec<Vec<f64>> = match strategy {
        StrategyArg::None => return Err(invalid("gen-lengths needs a strategy other than none")),
        StrategyArg::Synthetic => {
            let mut src = source_bank(&dir, bank, topo)?;
            if align_mean {
                src = align_bank_mean_with(&src, &train_mean, cfg.align_mode.into())?;
            }
            (0..count)
                .map(|_| gen_lengths_synthetic(&src, aug, topo, &mut rng).map(BoneLengths::into_vec))
                .collect::<Result<_, _>>()?
        }
        StrategyArg::Uniform | StrategyArg::Normal => {
            let sigmas = normal_sigmas(cfg, &dir)?;
            let rows = train_stats.samples();
            (0..count)
                .map(|_| {
                    let base = BoneLengths::from_raw(rows[rng_index(&mut rng, rows.len())].clone());
                    if strategy == StrategyArg::Uniform {
                        gen_lengths_uniform(&base, &train_mean, aug, topo, &mut rng)
                    } else {
                        gen_lengths_normal(&base, &sigmas, aug, topo, &mut rng)
                    }
                    .map(BoneLengths::into_vec)
                })
                .collect::<Result<_, _>>()?
        }
    };
    let source = match strategy {
        StrategyArg::Synthetic => BankSource::SyntheticMesh,
        _ => BankSource::Dataset,
    };
    let mut result = LengthBank::new(samples, source)?;
    if align_mean && strategy != StrategyArg::Synthetic {
        result = align_bank_mean_with(&result, &train_mean, cfg.align_mode.into())?;
    }
    out.add(path, result.to_csv_string(topo)?);
    Ok(json!({
        "count": result.len(),
        "strategy": format!("{strategy:?}").to_lowercase(),
        "mean": result.mean(),
        "std": result.std(),
    }))
}

fn rng_index(rng: &mut impl rand::Rng, len: usize) -> usize {
    rng.random_range(0..len)
}

struct TrainOpts<'a> {
    strategy: Option<StrategyArg>,
    bank: Option<&'a Path>,
    unidirectional: bool,
    epochs: Option<usize>,
    no_flip: bool,
}

fn train_cmd(
    cfg: &RunConfig,
    corpus: &Path,
    opts: &TrainOpts<'_>,
    path: &Path,
    log_path: Option<&Path>,
    out: &mut Outputs,
) -> Result<Value, CliError> {
    let dir = load_corpus(corpus)?;
    let topo = &dir.topology;
    let cam = &dir.camera;
    let strategy = match opts.strategy {
        Some(StrategyArg::None) => None,
        Some(StrategyArg::Uniform) => Some(Strategy::Uniform),
        Some(StrategyArg::Normal) => Some(Strategy::Normal),
        Some(StrategyArg::Synthetic) => Some(Strategy::Synthetic),
        None if cfg.no_augmentation => None,
        None => Some(cfg.augmentation.strategy),
    };
    let generator = match strategy {
        None => None,
        Some(Strategy::Uniform) => Some(LengthGenerator::Uniform),
        Some(Strategy::Normal) => Some(LengthGenerator::Normal {
            sigmas: normal_sigmas(cfg, &dir)?,
        }),
        Some(Strategy::Synthetic) => {
            let src = source_bank(&dir, opts.bank, topo)?;
            let mean = mean_lengths(&dir.corpus.train)?;
            Some(LengthGenerator::Synthetic {
                bank: align_bank_mean_with(&src, &mean, cfg.align_mode.into())?,
            })
        }
    };
    let augmentation = generator.map(|generator| Augmentation {
        config: cfg.augmentation.clone(),
        generator,
    });
    let mut tc = cfg.train.clone();
    if let Some(e) = opts.epochs {
        tc.epochs = e;
    }
    if opts.unidirectional {
        tc.bidirectional = false;
    }
    if opts.no_flip {
        tc.flip = false;
    }
    tc.validate()?;
    let train_set = examples(&dir.corpus.train)?;
    let valid_set = examples(&dir.corpus.test)?;
    let ctx = TrainContext {
        topo,
        cam,
        augmentation: augmentation.as_ref(),
    };
    let outcome = train(&train_set, &valid_set, &ctx, &tc)?;
    out.add(path, checkpoint_to_bundle(&outcome.params, tc.seed)?.to_bytes());
    if let Some(p) = log_path {
        out.add(p, pretty(&outcome.log));
    }
    let last = outcome.log.epochs.last();
    Ok(json!({
        "epochs": outcome.log.epochs.len(),
        "parameters": outcome.params.parameter_count(),
        "bidirectional": tc.bidirectional,
        "strategy": strategy.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
        "train_loss": last.map(|e| e.train_loss),
        "valid_loss": last.and_then(|e| e.valid_loss),
    }))
}

#[allow(clippy::too_many_arguments)]
fn predict_lengths(
    cfg: &RunConfig,
    corpus: &Path,
    model: &Path,
    split: Split,
    online: bool,
    no_flip: bool,
    path: &Path,
    out: &mut Outputs,
) -> Result<Value, CliError> {
    let dir = load_corpus(corpus)?;
    let params = load_checkpoint(model)?;
    let topo = &dir.topology;
    let cam = &dir.camera;
    let set = split_set(&dir, split);
    let flip = cfg.train.flip && !no_flip;
    let mut predicted = Vec::with_capacity(set.len());
    for rec in &set.records {
        let kps = rec.require_keypoints()?;
        let lengths = if online {
            let mut state = OnlineState::new(&params);
            let mut last = None;
            for x in model_input(kps, cam) {
                let (next, est) = forward_online(&state, &x, &params)?;
                state = next;
                last = Some(est);
            }
            last.ok_or_else(|| invalid(format!("sequence {:?} has no frames", rec.meta.id)))?
        } else {
            predict_sequence(&params, kps, cam, topo, flip)?
        };
        predicted.push(lengths);
    }
    let mut err_sum = 0.0;
    let mut scored = 0usize;
    for (rec, l) in set.records.iter().zip(&predicted) {
        if let Some(truth) = &rec.lengths {
            err_sum += blapose::eval::bone_length_error(l, truth)?;
            scored += 1;
        }
    }
    let records: Vec<&SequenceRecord> = set.records.iter().collect();
    out.add(path, lengths_set(&records, predicted).to_bundle(topo)?.to_bytes());
    Ok(json!({
        "sequences": set.len(),
        "online": online,
        "bone_len_err_mm": (scored > 0).then(|| err_sum / scored as f64),
    }))
}

fn lift_toy(
    cfg: &RunConfig,
    corpus: &Path,
    lifter_path: Option<&Path>,
    save: Option<&Path>,
    split: Split,
    path: &Path,
    out: &mut Outputs,
) -> Result<Value, CliError> {
    let dir = load_corpus(corpus)?;
    let topo = &dir.topology;
    let cam = &dir.camera;
    let lifter = match lifter_path {
        Some(p) => load_lifter(p)?,
        None => ToyLifter::fit(&pairs(&dir.corpus.train)?, cam, topo.joint_count(), &cfg.lifter)?,
    };
    if lifter.joints() != topo.joint_count() {
        return Err(invalid(format!(
            "lifter has {} joints, the corpus {}",
            lifter.joints(),
            topo.joint_count()
        )));
    }
    let set = split_set(&dir, split);
    let lifted = set
        .records
        .iter()
        .map(|r| {
            let mut p = lifter.predict(r.require_keypoints()?, cam, r.fps)?;
            p.meta = r.meta.clone();
            Ok(p)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if let Some(p) = save {
        out.add(p, lifter_to_bundle(&lifter)?.to_bytes());
    }
    out.add(path, poses_set(lifted).to_bundle(topo)?.to_bytes());
    Ok(json!({
        "sequences": set.len(),
        "fitted": lifter_path.is_none(),
        "feature_dim": lifter.feature_dim(),
    }))
}

fn adjust(
    cfg: &RunConfig,
    poses: &Path,
    lengths: &Path,
    path: &Path,
    out: &mut Outputs,
) -> Result<Value, CliError> {
    let topo = cfg.topology()?;
    let poses = SequenceSet::read(poses, &topo)?;
    let lengths = SequenceSet::read(lengths, &topo)?;
    let adjusted = poses
        .records
        .iter()
        .map(|r| {
            let l = lengths
                .records
                .iter()
                .find(|l| l.meta.id == r.meta.id)
                .ok_or_else(|| invalid(format!("no lengths for sequence {:?}", r.meta.id)))?;
            Ok(adjust_poses(r.require_poses()?, l.require_lengths()?, &topo)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    out.add(path, poses_set(adjusted).to_bundle(&topo)?.to_bytes());
    Ok(json!({ "sequences": poses.len() }))
}

fn eval_cmd(
    cfg: &RunConfig,
    corpus: &Path,
    pred_path: &Path,
    split: Split,
    out_dir: &Path,
    out: &mut Outputs,
) -> Result<Value, CliError> {
    let dir = load_corpus(corpus)?;
    let topo = &dir.topology;
    let pred_bytes = read_bytes(pred_path)?;
    let pred_set = SequenceSet::from_bundle(&blapose::io::TensorBundle::from_bytes(&pred_bytes)?, topo)?;
    let truth_set = split_set(&dir, split);
    if pred_set.len() != truth_set.len() {
        return Err(invalid(format!(
            "{} predicted sequences for {} truth sequences",
            pred_set.len(),
            truth_set.len()
        )));
    }
    let pred = pred_set
        .records
        .iter()
        .map(|r| r.require_poses().cloned())
        .collect::<Result<Vec<_>, _>>()?;
    let truth = truth_set
        .records
        .iter()
        .map(|r| r.require_poses().cloned())
        .collect::<Result<Vec<_>, _>>()?;
    let mut fp_input = cfg.to_json().into_bytes();
    fp_input.extend_from_slice(&pred_bytes);
    let report = evaluate(&pred, &truth, topo, &cfg.eval, &fingerprint(&fp_input))?;
    report.check_consistency()?;
    emit_report(&report, out_dir, out);
    out.add(out_dir.join("report.json"), report.to_json_string());
    Ok(overall_summary(&report))
}

fn emit_report(report: &EvaluationReport, out_dir: &Path, out: &mut Outputs) {
    out.add(out_dir.join("report.csv"), report.to_csv());
    out.add(out_dir.join("report.md"), report.to_markdown());
}

fn overall_summary(report: &EvaluationReport) -> Value {
    json!({
        "frames": report.overall.frames,
        "mpjpe_mm": report.overall.mpjpe_mm,
        "p_mpjpe_mm": report.overall.p_mpjpe_mm,
        "bone_len_err_mm": report.overall.bone_len_err_mm,
        "fingerprint": report.fingerprint,
    })
}

fn finetune(
    cfg: &RunConfig,
    corpus: &Path,
    lifter: &Path,
    model: &Path,
    path: &Path,
    log_path: Option<&Path>,
    out: &mut Outputs,
) -> Result<Value, CliError> {
    let dir = load_corpus(corpus)?;
    let lifter = load_lifter(lifter)?;
    let params = load_checkpoint(model)?;
    let data = pairs(&dir.corpus.train)?;
    let (tuned, log) = finetune_toy_lifter(&lifter, &params, &data, &dir.camera, &dir.topology, &cfg.finetune)?;
    out.add(path, lifter_to_bundle(&tuned)?.to_bytes());
    if let Some(p) = log_path {
        out.add(p, pretty(&log));
    }
    Ok(json!({
        "epochs": log.epoch_loss.len(),
        "epoch_loss": log.epoch_loss,
    }))
}

fn bench(
    cfg: &RunConfig,
    corpus: &Path,
    model: &Path,
    lifter: &Path,
    steps: Option<usize>,
    path: Option<&Path>,
    out: &mut Outputs,
) -> Result<Value, CliError> {
    let dir = load_corpus(corpus)?;
    let params = load_checkpoint(model)?;
    let lifter = load_lifter(lifter)?;
    let stream = dir
        .corpus
        .test
        .records
        .first()
        .or(dir.corpus.train.records.first())
        .ok_or_else(|| invalid("corpus has no sequences"))?
        .require_keypoints()?;
    let bench_cfg = BenchConfig {
        steps: steps.unwrap_or(cfg.bench.steps),
        ..cfg.bench.clone()
    };
    let report = bench_online(&params, &lifter, stream, &dir.camera, &dir.topology, &bench_cfg)?;
    if let Some(p) = path {
        out.add(p, pretty(&report));
    }
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

fn report_cmd(
    report_path: &Path,
    train_log: Option<&Path>,
    corpus: Option<&Path>,
    out_dir: &Path,
    out: &mut Outputs,
) -> Result<Value, CliError> {
    let text = String::from_utf8(read_bytes(report_path)?)
        .map_err(|e| invalid(format!("{}: {e}", report_path.display())))?;
    let report: EvaluationReport = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("{}: {e}", report_path.display())))?;
    report.check_consistency()?;
    emit_report(&report, out_dir, out);
    let mut charts = Vec::new();
    if let Some(p) = train_log {
        let text = String::from_utf8(read_bytes(p)?)
            .map_err(|e| invalid(format!("{}: {e}", p.display())))?;
        let log: TrainLog =
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
        let train: Vec<f64> = log.epochs.iter().map(|e| e.train_loss * 1000.0).collect();
        let mut series = vec![("train", train)];
        if log.epochs.iter().all(|e| e.valid_loss.is_some()) && !log.epochs.is_empty() {
            series.push((
                "validation",
                log.epochs.iter().filter_map(|e| e.valid_loss).map(|v| v * 1000.0).collect(),
            ));
        }
        out.add(
            out_dir.join("training_curve.svg"),
            plot::line_chart("Length-model training", "epoch", "bone length error (mm)", &series),
        );
        charts.push("training_curve.svg");
    }
    if let Some(c) = corpus {
        let dir = load_corpus(c)?;
        let pop = &dir.corpus.population;
        let mm = |v: &[f64]| v.iter().map(|x| x * 1000.0).collect::<Vec<_>>();
        out.add(
            out_dir.join("bone_lengths.svg"),
            plot::error_bars(
                "Population bone lengths",
                "length (mm)",
                dir.topology.bone_names(),
                &mm(pop.mean()),
                &mm(pop.std()),
            ),
        );
        charts.push("bone_lengths.svg");
    }
    let mut summary = overall_summary(&report);
    summary["charts"] = json!(charts);
    Ok(summary)
}
