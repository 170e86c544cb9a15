//! Command-line driver: gen-data, pretrain, probe, gradcheck, report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dinomm::augment::{make_views, view_rng};
use dinomm::checks;
use dinomm::config::{RunManifest, Settings};
use dinomm::data::{self, batch_indices, ChannelStats, Dataset, SynthConfig};
use dinomm::eval::{self, Modality, ProbeConfig, Report};
use dinomm::nn::{ParameterSet, VisionTransformer};
use dinomm::tensor::GradCase;
use dinomm::trainer::{Checkpoint, RunConfigs, StepMetrics, Trainer};
use dinomm::Error;

const TRAIN_FILE: &str = "train.dmm";
const TEST_FILE: &str = "test.dmm";
const CHECKPOINT_FILE: &str = "checkpoint.dmmc";
const METRICS_FILE: &str = "metrics.ndjson";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "dinomm", version, about = "Multimodal self-distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test dataset files.
    GenData(GenDataArgs),
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Linear-probe checkpoints over a modality x label-fraction grid.
    Probe(ProbeArgs),
    /// Finite-difference checks of every op, the network, and the objective.
    Gradcheck(GradcheckArgs),
    /// Summarize a pretraining metrics log and probe reports.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Mm,
    S1Only,
    S2Only,
}

/// Config file plus `--set key=value` overrides.
#[derive(clap::Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(clap::Args)]
struct PretrainArgs {
    /// Directory holding train.dmm.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum, default_value_t = Mode::Mm)]
    mode: Mode,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in this invocation.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Write the views of the first N samples of the first batch to views.json.
    #[arg(long)]
    dump_views: Option<usize>,
}

#[derive(clap::Args)]
struct ProbeArgs {
    /// Directory holding train.dmm and test.dmm.
    #[arg(long)]
    data: PathBuf,
    /// `path`, `tag=path`, or `random`. Repeatable; one report row each.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "s1,s2,s1+s2")]
    modalities: Vec<Modality>,
    #[arg(long, value_delimiter = ',', default_value = "1,0.01")]
    fractions: Vec<f64>,
    /// Side the images are resized to before encoding.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    /// Bound on the max relative error of single-op checks.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Bound for the network and full-objective checks.
    #[arg(long, default_value_t = 1e-4)]
    composite_tolerance: f64,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Add a case with a deliberately wrong backward pass.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Pretraining run directories (containing metrics.ndjson) or probe
    /// output directories (containing report.json).
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn threads() -> usize {
    std::env::var("DINOMM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn args_vec() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn load_settings(c: &ConfigArgs) -> Result<Settings, Failure> {
    let overrides = c
        .sets
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Settings::load(c.config.as_deref(), &overrides)?)
}

fn create_dir(p: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(p).map_err(|e| Failure {
        code: 1,
        msg: format!("cannot create {}: {e}", p.display()),
    })
}

fn load_split(dir: &Path, file: &str) -> Result<Dataset, Failure> {
    let path = dir.join(file);
    data::load(&path).map_err(|e| Failure {
        code: 1,
        msg: format!("{}: {e}", path.display()),
    })
}

/// Train split normalized with its own statistics, plus those statistics.
fn load_train(dir: &Path) -> Result<(Dataset, ChannelStats), Failure> {
    Ok(data::normalize(load_split(dir, TRAIN_FILE)?)?)
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    if a.classes == 0 {
        return Err(usage("--classes must be >= 1"));
    }
    if a.n == 0 || a.n_test == 0 {
        return Err(usage("--n and --n-test must be >= 1"));
    }
    let cfg = SynthConfig {
        n: a.n + a.n_test,
        num_classes: a.classes,
        size: a.size,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let (train, test) = data::generate(&cfg)?.split_tail(a.n_test)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("gen-data", args_vec(), None, a.seed, &a.out);
    manifest.config = serde_json::from_value(serde_json::to_value(&cfg).expect("serializes")).expect("object");
    for (ds, name) in [(&train, TRAIN_FILE), (&test, TEST_FILE)] {
        let path = a.out.join(name);
        data::save(ds, &path)?;
        manifest.record(&path)?;
    }
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DumpedView {
    sample_id: u64,
    view: usize,
    is_global: bool,
    drop_mode: char,
    crop: [usize; 4],
    flipped: bool,
    optical_zero: bool,
    sar_zero: bool,
}

fn dump_views(train: &Dataset, configs: &RunConfigs, n: usize, path: &Path) -> Result<(), Failure> {
    let cfg = &configs.train;
    let first = batch_indices(train.len(), cfg.batch_size, cfg.seed, 0)?.swap_remove(0);
    let split = &configs.aug.channels;
    let mut out = Vec::new();
    for &i in first.iter().take(n) {
        let s = &train.samples[i];
        let views = make_views(s, &configs.aug, &mut view_rng(cfg.seed, 0, s.id))?;
        for (v, r) in views.iter().enumerate() {
            let hw = r.image.shape()[1] * r.image.shape()[2];
            let d = r.image.data();
            let zero =
                |range: &std::ops::Range<usize>| d[range.start * hw..range.end * hw].iter().all(|x| x.to_bits() == 0);
            out.push(DumpedView {
                sample_id: s.id,
                view: v,
                is_global: r.is_global,
                drop_mode: r.drop_mode.letter(),
                crop: [r.crop.x, r.crop.y, r.crop.w, r.crop.h],
                flipped: r.flipped,
                optical_zero: zero(&split.optical),
                sar_zero: zero(&split.sar),
            });
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(&out).expect("serializes"))?;
    Ok(())
}

fn pretrain(a: PretrainArgs) -> CmdResult {
    let mut settings = load_settings(&a.cfg)?;
    match a.mode {
        Mode::Mm => {}
        Mode::S1Only => settings.aug.sensor_drop_probs = (0.0, 1.0, 0.0),
        Mode::S2Only => settings.aug.sensor_drop_probs = (1.0, 0.0, 0.0),
    }
    let (train, _) = load_train(&a.data)?;
    let configs = RunConfigs {
        vit: settings.vit.clone(),
        aug: settings.aug.clone(),
        train: settings.train.clone(),
        n_samples: train.len(),
    };
    create_dir(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let metrics_path = a.out.join(METRICS_FILE);

    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(|e| Failure {
                code: 1,
                msg: format!("{}: {e}", p.display()),
            })?;
            Trainer::resume(&train, configs.clone(), ck)?
        }
        None => Trainer::new(&train, configs.clone())?,
    };
    trainer.view_threads = threads();

    if let Some(n) = a.dump_views {
        dump_views(&train, &configs, n, &a.out.join("views.json"))?;
    }

    // Keep log lines for steps before the resume point, drop anything later.
    let kept: Vec<String> = if a.resume.is_some() && metrics_path.exists() {
        std::fs::read_to_string(&metrics_path)?
            .lines()
            .filter(|l| serde_json::from_str::<StepMetrics>(l).is_ok_and(|m| m.step < trainer.step))
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    let mut log = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    for l in &kept {
        writeln!(log, "{l}")?;
    }

    let spe = trainer.schedule.steps_per_epoch as u64;
    let limit = a.max_steps.map_or(u64::MAX, |m| trainer.step.saturating_add(m));
    log::info!(
        "pretraining {} steps ({} per epoch), starting at step {}",
        trainer.total_steps(),
        spe,
        trainer.step
    );
    let mut epoch_loss = 0.0;
    let mut outcome = Ok(());
    while !trainer.is_done() && trainer.step < limit {
        match trainer.train_step() {
            Ok(m) => {
                writeln!(log, "{}", serde_json::to_string(&m).expect("serializes"))?;
                epoch_loss += m.loss;
                if (m.step + 1) % spe == 0 {
                    log::info!(
                        "epoch {} mean loss {:.4} teacher entropy {:.3}",
                        m.epoch,
                        epoch_loss / spe as f64,
                        m.teacher_entropy
                    );
                    epoch_loss = 0.0;
                    log.flush()?;
                    trainer.checkpoint().save(&ckpt_path)?;
                }
            }
            Err(e) => {
                outcome = Err(Failure::from(e));
                break;
            }
        }
    }
    log.flush()?;
    drop(log);
    // On failure this is the last good state.
    trainer.checkpoint().save(&ckpt_path)?;

    let mut manifest = RunManifest::new(
        "pretrain",
        args_vec(),
        a.cfg.config.as_deref(),
        configs.train.seed,
        &a.out,
    );
    manifest.config = settings.resolved();
    manifest.record(&ckpt_path)?;
    manifest.record(&metrics_path)?;
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    outcome?;
    println!(
        "step {}/{}; checkpoint {}",
        trainer.step,
        trainer.total_steps(),
        ckpt_path.display()
    );
    Ok(())
}

fn probe(a: ProbeArgs) -> CmdResult {
    let settings = load_settings(&a.cfg)?;
    if a.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(usage("label fractions must lie in (0, 1]"));
    }
    let (train, stats) = load_train(&a.data)?;
    let mut test = load_split(&a.data, TEST_FILE)?;
    stats.apply(&mut test)?;
    create_dir(&a.out)?;

    let mut report = Report::new(&a.modalities, &a.fractions);
    let mut manifest = RunManifest::new(
        "probe",
        args_vec(),
        a.cfg.config.as_deref(),
        settings.probe.seed,
        &a.out,
    );
    manifest.config = settings.resolved();
    for spec in &a.checkpoints {
        let (tag, source) = match spec.split_once('=') {
            Some((t, s)) => (t.to_string(), s.to_string()),
            None if spec == "random" => ("random".to_string(), "random".to_string()),
            None => (
                Path::new(spec)
                    .file_stem()
                    .map_or(spec.clone(), |s| s.to_string_lossy().into_owned()),
                spec.clone(),
            ),
        };
        let (vit_cfg, params) = if source == "random" {
            let p = ParameterSet::init(&settings.vit, settings.train.seed)?;
            (settings.vit.clone(), p)
        } else {
            let path = Path::new(&source);
            if !path.exists() {
                return Err(Failure {
                    code: 1,
                    msg: format!("checkpoint {} not found", path.display()),
                });
            }
            let ck = Checkpoint::load(path)?;
            (ck.configs.vit.clone(), ck.state.teacher)
        };
        let vit = VisionTransformer::new(vit_cfg)?;
        let mut row = Vec::new();
        for &(m, f) in &report.columns {
            let cfg = ProbeConfig {
                modality: m,
                label_fraction: f,
                ..settings.probe.clone()
            };
            let r = eval::evaluate(&vit, &params, &train, &test, &cfg, a.image_size, threads())?;
            log::info!("{tag} {m} {f}: mAP {:.4}", r.map);
            row.push(r);
        }
        report.push_row(tag, row)?;
    }
    let text = report.to_text();
    print!("{text}");
    let txt = a.out.join("report.txt");
    let json = a.out.join("report.json");
    std::fs::write(&txt, &text)?;
    std::fs::write(&json, serde_json::to_string_pretty(&report).expect("serializes") + "\n")?;
    manifest.record(&txt)?;
    manifest.record(&json)?;
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if !(a.tolerance > 0.0 && a.composite_tolerance > 0.0 && a.step > 0.0) {
        return Err(usage("tolerances and step must be positive"));
    }
    let mut failures = Vec::new();
    let mut checked = 0usize;
    let mut run = |cases: Vec<GradCase>, tol: f64, seed: Option<u64>| -> Result<(), Failure> {
        for case in cases {
            let r = case.run(a.step)?;
            checked += 1;
            if !(r.max_rel_error < tol) {
                let at = seed.map_or(String::new(), |s| format!(" (seed {s})"));
                failures.push(format!(
                    "{}{at}: max rel. error {:.3e} > {tol:.1e}",
                    r.name, r.max_rel_error
                ));
            }
        }
        Ok(())
    };
    for seed in 0..a.seeds {
        run(GradCase::op_suite(seed), a.tolerance, Some(seed))?;
        let mut composite = checks::network_cases(seed)?;
        composite.extend(checks::composite_cases(seed)?);
        run(composite, a.composite_tolerance, Some(seed))?;
    }
    if a.inject_fault {
        run(vec![GradCase::faulty_fixture()], a.tolerance, None)?;
    }
    for f in &failures {
        println!("FAIL {f}");
    }
    println!("{checked} checks, {} failed", failures.len());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            msg: format!("{} gradient checks failed", failures.len()),
        })
    }
}

fn report(a: ReportArgs) -> CmdResult {
    for dir in &a.runs {
        let metrics = dir.join(METRICS_FILE);
        let probe = dir.join("report.json");
        if metrics.exists() {
            let mut rows: Vec<StepMetrics> = Vec::new();
            for (i, line) in std::fs::read_to_string(&metrics)?.lines().enumerate() {
                rows.push(serde_json::from_str(line).map_err(|e| Failure {
                    code: 1,
                    msg: format!("{}:{}: {e}", metrics.display(), i + 1),
                })?);
            }
            println!("{}: {} steps", dir.display(), rows.len());
            println!(
                "{:>5} {:>10} {:>10} {:>10} {:>9}",
                "epoch", "mean loss", "min H_t", "last H_t", "lr end"
            );
            let mut epoch = 0;
            while let Some(first) = rows.iter().position(|m| m.epoch == epoch) {
                let ep: Vec<&StepMetrics> = rows[first..].iter().take_while(|m| m.epoch == epoch).collect();
                let mean = ep.iter().map(|m| m.loss).sum::<f64>() / ep.len() as f64;
                let min_h = ep.iter().map(|m| m.teacher_entropy).fold(f64::INFINITY, f64::min);
                let last = ep.last().expect("non-empty");
                println!(
                    "{epoch:>5} {mean:>10.4} {min_h:>10.3} {:>10.3} {:>9.2e}",
                    last.teacher_entropy, last.lr
                );
                epoch += 1;
            }
        }
        if probe.exists() {
            let r: Report = serde_json::from_str(&std::fs::read_to_string(&probe)?).map_err(|e| Failure {
                code: 1,
                msg: format!("{}: {e}", probe.display()),
            })?;
            println!("{}:", probe.display());
            print!("{}", r.to_text());
        }
        if !metrics.exists() && !probe.exists() {
            return Err(Failure {
                code: 1,
                msg: format!("{} has neither {METRICS_FILE} nor report.json", dir.display()),
            });
        }
    }
    Ok(())
}
