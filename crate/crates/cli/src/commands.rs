use std::path::Path;
use std::sync::Arc;

use protosplit::bundle::{read_bundle, read_json, write_bundle, write_json, PatchBundle};
use protosplit::detect::{detect, DetectionReport};
use protosplit::pipeline::{auto_split, compare, evaluate_metrics, split_with_labels, LabelSubmission, MetricsReport};
use protosplit::synth::{generate_bank, SynthConfig};
use protosplit::Execution;
use protosplit_server::{AppState, ServerConfig};

use crate::config::FileConfig;
use crate::{Cli, Command, DetectArgs, GenerateArgs, MetricsArgs, ServeArgs, SplitArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] protosplit::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Input(String),

    #[error("server: {0}")]
    Serve(#[from] std::io::Error),
}

impl CliError {
    /// 3 for rejected inputs (bad concepts, configs or files), 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        use protosplit::Error as E;
        match self {
            CliError::Core(E::InvalidConcepts(_) | E::InvalidConfig(_)) => 3,
            CliError::Config(_) | CliError::Input(_) => 3,
            _ => 1,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Generate(args) => generate(args, cli.seed),
        Command::Detect(args) => run_detect(args, cfg, exec),
        Command::Split(args) => split(args, cfg, cli.seed, exec),
        Command::Metrics(args) => metrics(args, cfg, exec),
        Command::Serve(args) => serve(args, cfg, cli.seed, exec),
    }
}

fn generate(args: GenerateArgs, seed: u64) -> Result<(), CliError> {
    let defaults = SynthConfig::with_seed(seed);
    let cfg = SynthConfig {
        prototypes: args.prototypes.unwrap_or(defaults.prototypes),
        entangled_count: args.entangled.unwrap_or(defaults.entangled_count),
        patches_per_cluster: args.patches_per_cluster.unwrap_or(defaults.patches_per_cluster),
        ..defaults
    };
    let wb = generate_bank(&cfg)?;
    let mut bundle = PatchBundle::from_workbench(&wb);
    if !args.no_thumbnails {
        bundle.render_feature_thumbnails();
    }
    write_bundle(&bundle, &args.out)?;
    println!(
        "wrote {}: {} prototypes ({} entangled), {} patches",
        args.out.display(),
        wb.bank.num_prototypes(),
        wb.truth.entangled.len(),
        wb.corpus.patches.len()
    );
    Ok(())
}

fn run_detect(args: DetectArgs, mut cfg: FileConfig, exec: Execution) -> Result<(), CliError> {
    let d = &mut cfg.detection;
    d.min_clique = args.min_clique.unwrap_or(d.min_clique);
    d.delta_min = args.delta_min.unwrap_or(d.delta_min);
    d.delta_max = args.delta_max.unwrap_or(d.delta_max);
    d.delta_step = args.delta_step.unwrap_or(d.delta_step);
    let bundle = read_bundle(&args.bundle)?;
    let report = detect(&bundle.corpus, &bundle.bank, &cfg.detection, exec)?;
    write_json(&report, &args.out)?;
    println!(
        "delta* {:.2}: {} of {} prototypes flagged; top: {:?}",
        report.delta_star,
        report.ranking.len(),
        bundle.bank.num_prototypes(),
        &report.ranking[..report.ranking.len().min(10)]
    );
    Ok(())
}

fn load_report(path: &Path, bundle: &PatchBundle) -> Result<DetectionReport, CliError> {
    let report: DetectionReport = read_json(path)?;
    if report.reports.len() != bundle.bank.num_prototypes() {
        return Err(CliError::Input(format!(
            "detection report covers {} prototypes but the bundle has {}; rerun detect",
            report.reports.len(),
            bundle.bank.num_prototypes()
        )));
    }
    Ok(report)
}

/// Everything is computed before anything is written, so a rejected split
/// leaves the bundle untouched.
fn split(args: SplitArgs, cfg: FileConfig, seed: u64, exec: Execution) -> Result<(), CliError> {
    let mut bundle = read_bundle(&args.bundle)?;
    let (bank, report) = match (&args.labels, &args.report) {
        (Some(labels), _) => {
            let submissions: Vec<LabelSubmission> = read_json(labels)?;
            split_with_labels(&bundle.corpus, &bundle.bank, &submissions, &cfg.split, seed, exec)?
        }
        (None, Some(report)) => {
            let detection = load_report(report, &bundle)?;
            auto_split(&bundle.corpus, &bundle.bank, &detection, args.top, &cfg.split, seed, exec)?
        }
        (None, None) => return Err(CliError::Input("--auto needs --report".into())),
    };
    bundle.bank = bank;
    bundle.lineage.extend(report.splits.iter().map(|s| s.lineage()));
    for p in &mut bundle.corpus.patches {
        p.activation_cache = None;
    }
    let out = args.out.as_deref().unwrap_or(&args.bundle);
    write_bundle(&bundle, out)?;
    write_json(&report, &args.split_report)?;
    let converged = report.splits.iter().filter(|s| s.converged).count();
    println!(
        "split {} prototypes ({converged} converged, {} skipped); bundle now has {} prototypes",
        report.splits.len(),
        report.skipped.len(),
        bundle.bank.num_prototypes()
    );
    Ok(())
}

fn bundle_metrics(bundle: &PatchBundle, cfg: &FileConfig, top_k: usize, exec: Execution) -> Result<MetricsReport, CliError> {
    let parts = bundle
        .patch_parts()
        .ok_or_else(|| CliError::Input("bundle has no part annotations".into()))?;
    Ok(evaluate_metrics(
        &bundle.corpus,
        &bundle.bank,
        &parts,
        &bundle.lineage,
        top_k,
        cfg.detection.dedup_per_image,
        exec,
    )?)
}

fn metrics(args: MetricsArgs, cfg: FileConfig, exec: Execution) -> Result<(), CliError> {
    let bundle = read_bundle(&args.bundle)?;
    let mut report = bundle_metrics(&bundle, &cfg, args.top_k, exec)?;
    if let Some(path) = &args.baseline {
        let baseline = read_bundle(path)?;
        let base = bundle_metrics(&baseline, &cfg, args.top_k, exec)?;
        compare(&mut report, &base, &bundle.lineage);
    }
    write_json(&report, &args.out)?;
    println!(
        "accuracy {:.4}, mean PP {:.3}, mean part purity {:.3}",
        report.accuracy, report.mean_pattern_purity, report.mean_part_purity
    );
    if let Some(c) = &report.comparison {
        println!(
            "vs baseline: accuracy {:+.4}, split-channel PP {:+.3}, part purity {:+.3}",
            c.accuracy_delta, c.split_pattern_purity_delta, c.split_part_purity_delta
        );
    }
    Ok(())
}

fn serve(args: ServeArgs, mut cfg: FileConfig, seed: u64, exec: Execution) -> Result<(), CliError> {
    if let Some(q) = args.min_concept {
        cfg.split.min_concept = q;
        cfg.detection.min_clique = q;
    }
    let bundle = read_bundle(&args.bundle)?;
    let report = args.report.as_deref().map(|p| load_report(p, &bundle)).transpose()?;
    let defaults = ServerConfig::default();
    let config = ServerConfig {
        split: cfg.split,
        detection: cfg.detection,
        workers: args.workers.unwrap_or(defaults.workers),
        seed,
        execution: exec,
    };
    let state = Arc::new(AppState::new(bundle, config, report, &args.log)?);
    let runtime = tokio::runtime::Runtime::new()?;
    println!("serving {} on http://{}/v1", args.bundle.display(), args.addr);
    runtime.block_on(protosplit_server::serve(state, args.addr))?;
    Ok(())
}
