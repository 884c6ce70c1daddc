//! Command-line entry point: data generation, the two training phases,
//! evaluation, mask inspection and the brute-force oracle suites.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualseg::maskops::{diff_mask, differr_mask, err_mask, BinaryMask, LabelMap};
use dualseg::metrics::{evaluate_prediction, evaluate_students, MetricsReport, METRICS_CSV_HEADER};
use dualseg::nets::{load_checkpoint, save_checkpoint};
use dualseg::oracle;
use dualseg::synthdata::{
    generate, read_dataset, write_dataset, DatasetSpec, Split, Volume, VolumeRecord,
};
use dualseg::trainer::{
    evaluate_on_test, load_state, pretrain, sample_step_inputs, save_state, train_ssl,
    write_run_manifest, TrainConfig, TrainData, TrainState, LOSS_CSV_HEADER,
};
use dualseg::TeacherNet64;

#[derive(Parser)]
#[command(name = "dualseg", about = "Dual-student semi-supervised segmentation on synthetic volumes", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (labeled, unlabeled and test volumes).
    GenData(GenDataArgs),
    /// Labeled-only pretraining of both students.
    Pretrain(PhaseArgs),
    /// Semi-supervised training from pretrained checkpoints.
    Train(TrainArgs),
    /// Evaluate checkpoints on a dataset split and print a metrics table.
    Eval(EvalArgs),
    /// Run one training step in dry-run mode and dump its masks.
    InspectMasks(InspectArgs),
    /// Run the brute-force oracle suites and report pass/fail counts.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    labeled: usize,
    #[arg(long, default_value_t = 20)]
    unlabeled: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    /// Cubic volume extent in voxels.
    #[arg(long, default_value_t = 32)]
    extent: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0.6)]
    contrast: f64,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    /// Ellipsoid radius bounds in voxels.
    #[arg(long, default_value_t = 4.0)]
    radius_min: f64,
    #[arg(long, default_value_t = 9.0)]
    radius_max: f64,
}

/// Config-file plus flag overrides shared by the training phases.
/// Flags take precedence over file values, which take precedence over defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    ema_momentum: Option<f64>,
    #[arg(long)]
    pretrain_iters: Option<u64>,
    #[arg(long)]
    ssl_iters: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    mask_mode: Option<String>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    net_width: Option<usize>,
    #[arg(long)]
    net_depth: Option<usize>,
    #[arg(long)]
    diff_gating: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => TrainConfig::from_path(path).map_err(CliError::usage)?,
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { config.$field = v; })*
            };
        }
        apply!(
            seed, alpha, beta, gamma, mu, learning_rate, ema_momentum, pretrain_iters, ssl_iters,
            batch_size, classes, mask_mode, log_every, net_width, net_depth, diff_gating
        );
        config.validate().map_err(CliError::usage)?;
        Ok(config)
    }
}

#[derive(Args)]
struct PhaseArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory holding pretrained student_a.ckpt / student_b.ckpt.
    #[arg(long)]
    pretrained: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from the state already saved in --out-dir.
    #[arg(long, default_value_t = false)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory holding student_a.ckpt / student_b.ckpt.
    #[arg(long)]
    state_dir: PathBuf,
    /// Dataset split to evaluate: test or labeled.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Directory holding student_a.ckpt / student_b.ckpt (teacher.ckpt if present).
    #[arg(long)]
    state_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Iteration whose sampled batch to reproduce.
    #[arg(long, default_value_t = 0)]
    iteration: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct OracleArgs {
    /// Random cases per suite.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Errors tagged with the exit code they should produce.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(err: impl std::fmt::Display) -> Self {
        CliError { code: 1, message: err.to_string() }
    }

    fn runtime(err: impl std::fmt::Display) -> Self {
        CliError { code: 2, message: err.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are successes; everything else is usage.
            let benign = matches!(
                err.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Pretrain(args) => run_pretrain(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::InspectMasks(args) => run_inspect(args),
        Command::OracleCheck(args) => run_oracle_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn load_data(dir: &Path) -> Result<(Vec<VolumeRecord<f64>>, TrainData<f64>), CliError> {
    let records = read_dataset::<f64>(dir).map_err(CliError::usage)?;
    let data = TrainData::from_records(&records).map_err(CliError::usage)?;
    Ok((records, data))
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let spec = DatasetSpec {
        n_labeled: args.labeled,
        m_unlabeled: args.unlabeled,
        test_count: args.test,
        shape: [args.extent; 3],
        classes: args.classes,
        contrast: args.contrast,
        noise_sigma: args.noise,
        radius: (args.radius_min, args.radius_max),
        ..DatasetSpec::desk_default(args.seed)
    };
    let records = generate::<f64>(&spec).map_err(CliError::usage)?;
    write_dataset(&args.out_dir, &records).map_err(CliError::runtime)?;
    println!(
        "wrote {} volumes ({} labeled, {} unlabeled, {} test) to {}",
        records.len(),
        args.labeled,
        args.unlabeled,
        args.test,
        args.out_dir.display()
    );
    Ok(())
}

fn run_pretrain(args: PhaseArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let (_, data) = load_data(&args.data_dir)?;
    write_run_manifest(&args.out_dir, &config).map_err(CliError::runtime)?;
    let (a, b) = pretrain::<f64>(&data, &config).map_err(CliError::runtime)?;
    save_checkpoint(&args.out_dir.join("student_a.ckpt"), &a, config.pretrain_iters)
        .map_err(CliError::runtime)?;
    save_checkpoint(&args.out_dir.join("student_b.ckpt"), &b, config.pretrain_iters)
        .map_err(CliError::runtime)?;
    if !data.test.is_empty() {
        let report = evaluate_on_test(&a, &b, &data, config.classes).map_err(CliError::runtime)?;
        print_report("pretrain (test split)", &report);
    }
    println!("pretrained checkpoints written to {}", args.out_dir.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let (_, data) = load_data(&args.data_dir)?;
    write_run_manifest(&args.out_dir, &config).map_err(CliError::runtime)?;

    let mut state = if args.resume {
        load_state::<f64>(&args.out_dir, &config).map_err(CliError::runtime)?
    } else {
        let (a, _) = load_checkpoint::<f64>(&args.pretrained.join("student_a.ckpt"))
            .map_err(CliError::usage)?;
        let (b, _) = load_checkpoint::<f64>(&args.pretrained.join("student_b.ckpt"))
            .map_err(CliError::usage)?;
        TrainState::from_pretrained(a, b, &config)
    };
    if state.iteration >= config.ssl_iters {
        println!("nothing to do: state is at iteration {}", state.iteration);
        return Ok(());
    }
    let remaining = config.ssl_iters - state.iteration;
    let run = train_ssl(&mut state, &data, &config, remaining).map_err(CliError::runtime)?;
    save_state(&args.out_dir, &state).map_err(CliError::runtime)?;

    let losses_path = args.out_dir.join("losses.csv");
    let mut losses = String::from(LOSS_CSV_HEADER);
    losses.push('\n');
    for rec in &run.loss_log {
        losses.push_str(&rec.csv_rows());
    }
    append_or_create(&losses_path, &losses, args.resume).map_err(CliError::runtime)?;

    let metrics_path = args.out_dir.join("metrics.csv");
    let mut metrics = String::from(METRICS_CSV_HEADER);
    metrics.push('\n');
    for (iter, report) in &run.metric_log {
        metrics.push_str(&report.csv_rows(*iter, "test"));
    }
    append_or_create(&metrics_path, &metrics, args.resume).map_err(CliError::runtime)?;

    if let Some((iter, report)) = run.metric_log.last() {
        print_report(&format!("iteration {iter} (test split)"), report);
    }
    println!("state and logs written to {}", args.out_dir.display());
    Ok(())
}

fn append_or_create(path: &Path, content: &str, append: bool) -> Result<(), std::io::Error> {
    if append && path.exists() {
        // Drop the duplicate header when extending an existing log.
        let body = content.split_once('\n').map(|(_, rest)| rest).unwrap_or("");
        let mut existing = fs::read_to_string(path)?;
        existing.push_str(body);
        fs::write(path, existing)
    } else {
        fs::write(path, content)
    }
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let (records, data) = load_data(&args.data_dir)?;
    let (a, iter_a) = load_checkpoint::<f64>(&args.state_dir.join("student_a.ckpt"))
        .map_err(CliError::usage)?;
    let (b, _) = load_checkpoint::<f64>(&args.state_dir.join("student_b.ckpt"))
        .map_err(CliError::usage)?;
    let classes = args.classes.unwrap_or(data.classes);
    let pairs: Vec<(&Volume<f64>, &LabelMap)> = match args.split.as_str() {
        "test" => data.test.iter().map(|(v, l)| (v, l)).collect(),
        "labeled" => data.labeled.iter().map(|(v, l)| (v, l)).collect(),
        other => {
            return Err(CliError::usage(format!(
                "split must be \"test\" or \"labeled\", got \"{other}\""
            )))
        }
    };
    if pairs.is_empty() {
        return Err(CliError::usage(format!("dataset has no {} volumes", args.split)));
    }
    let _ = records;
    let mut reports = Vec::new();
    for (vol, truth) in pairs {
        let pred = evaluate_students(&a, &b, vol).map_err(CliError::runtime)?;
        reports.push(evaluate_prediction(&pred, truth, classes).map_err(CliError::runtime)?);
    }
    let mean = dualseg::trainer::mean_reports(&reports);
    print_report(
        &format!("checkpoint at iteration {iter_a}, {} split, {} volumes", args.split, reports.len()),
        &mean,
    );
    Ok(())
}

fn print_report(title: &str, report: &MetricsReport) {
    println!("{title}");
    println!("{:>5}  {:>8}  {:>8}  {:>8}  {:>8}", "class", "dice", "jaccard", "hd95", "asd");
    for c in &report.per_class {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:8.4}")).unwrap_or_else(|| "     n/a".into());
        println!("{:>5}  {:8.4}  {:8.4}  {}  {}", c.class, c.dice, c.jaccard, fmt(c.hd95), fmt(c.asd));
    }
    println!("mean foreground dice: {:.4}", report.mean_dice());
}

fn run_inspect(args: InspectArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let (_, data) = load_data(&args.data_dir)?;
    let (a, _) = load_checkpoint::<f64>(&args.state_dir.join("student_a.ckpt"))
        .map_err(CliError::usage)?;
    let (b, _) = load_checkpoint::<f64>(&args.state_dir.join("student_b.ckpt"))
        .map_err(CliError::usage)?;
    let teacher = match load_checkpoint::<f64>(&args.state_dir.join("teacher.ckpt")) {
        Ok((net, _)) => TeacherNet64::from_student(&net),
        Err(_) => TeacherNet64::from_student(&a),
    };
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::runtime(format!("create {}: {e}", args.out_dir.display())))?;

    // Dry run: reproduce the batch the trainer would sample at this iteration
    // and compute every mask, without touching any weights.
    let inputs = sample_step_inputs(&teacher, &data, &config, args.iteration)
        .map_err(CliError::runtime)?;
    let dump = |name: &str, mask: &BinaryMask| -> Result<(), CliError> {
        let vol = Volume::new(mask.shape(), mask.data().iter().map(|&m| f64::from(m)).collect());
        let label = LabelMap::new(mask.shape(), mask.data().to_vec());
        let rec = VolumeRecord::new(name.to_string(), vol, Split::Test, 2, Some(label));
        dualseg::synthdata::write_volume(&args.out_dir.join(format!("{name}.vol")), &rec)
            .map_err(CliError::runtime)?;
        println!("{name}: ones={} zeros={}", mask.count_ones(), mask.count_zeros());
        Ok(())
    };
    for (g, group) in inputs.iter().enumerate() {
        let prefix = format!("g{g}");
        dump(&format!("{prefix}_mask"), &group.mask)?;
        for (dir, x, y) in [("in", &group.x_in, &group.y_in), ("out", &group.x_out, &group.y_out)] {
            let pred_a = LabelMap::from_probs(&a.predict(x).map_err(CliError::runtime)?);
            let pred_b = LabelMap::from_probs(&b.predict(x).map_err(CliError::runtime)?);
            let m_diff = diff_mask(&pred_a, &pred_b).map_err(CliError::runtime)?;
            dump(&format!("{prefix}_{dir}_m_diff"), &m_diff)?;
            for (student, pred) in [("a", &pred_a), ("b", &pred_b)] {
                let m_err = err_mask(pred, y).map_err(CliError::runtime)?;
                let m_differr = differr_mask(&m_diff, &m_err).map_err(CliError::runtime)?;
                dump(&format!("{prefix}_{dir}_{student}_m_err"), &m_err)?;
                dump(&format!("{prefix}_{dir}_{student}_m_differr"), &m_differr)?;
            }
        }
    }
    println!("mask volumes written to {}", args.out_dir.display());
    Ok(())
}

fn run_oracle_check(args: OracleArgs) -> Result<(), CliError> {
    let outcomes = [
        oracle::gradcheck_op_suite(args.cases / 10 + 1, args.seed),
        oracle::loss_oracle_suite(args.cases, args.seed.wrapping_add(1)),
        oracle::mask_algebra_suite(args.cases, args.seed.wrapping_add(2)),
        oracle::mixing_suite(args.cases, args.seed.wrapping_add(3)),
        oracle::metrics_suite(args.cases, args.seed.wrapping_add(4)),
    ];
    let mut failed = false;
    for o in &outcomes {
        println!(
            "{:<20} {:>5} cases  {:>3} failures  (worst deviation {:.3e})",
            o.name, o.cases, o.failures, o.worst
        );
        failed |= !o.passed();
    }
    if failed {
        return Err(CliError::runtime("oracle suites reported failures"));
    }
    println!("all oracle suites passed");
    Ok(())
}
