use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use socratic_core::distill::{
    build_distill_dataset, build_preference_pairs, distill, dpo_train, export_instructions, write_instructions,
    DistillMethod, DistillReport, PairConstruction,
};
use socratic_core::expr::generate_tasks;
use socratic_core::meta::{estimate_score, ProbeSet};
use socratic_core::rng::{label, RngStream};
use socratic_core::run::{self, episodes_to_threshold, read_metrics, Arm, RunConfig};
use socratic_core::student::StudentPolicy;
use socratic_core::viewpoint::{ActiveViewpoints, ErrorClass, KnowledgeBase, Viewpoint};

#[derive(Parser)]
#[command(name = "socratic", version, about = "Teacher-student process supervision on arithmetic reduction")]
struct Cli {
    /// Master seed. Falls back to SOCRATIC_SEED, then to the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifacts.
    Run {
        #[arg(long, default_value = "socratic-run")]
        out: PathBuf,
        #[arg(long)]
        arm: Option<ArmArg>,
        #[arg(long)]
        episodes: Option<u64>,
    },
    /// Score a policy on the probe set.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        /// Condition on the knowledge base's most recent viewpoints.
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Second policy, scored without viewpoints, for a side-by-side table.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Distill a knowledge base into a viewpoint-free policy.
    Distill {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<MethodArg>,
        #[arg(long, default_value_t = 200)]
        tasks: usize,
    },
    /// Knowledge base utilities.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Compare metrics files from several runs.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// List viewpoints.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        class: Option<ClassArg>,
        /// Sort by utility estimate, highest first.
        #[arg(long)]
        by_utility: bool,
    },
    /// Write an instruction-tuning set in JSON Lines.
    ExportInstructions {
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    OutcomeOnly,
    ViewpointGuided,
    FullSocratic,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::OutcomeOnly => Arm::OutcomeOnly,
            ArmArg::ViewpointGuided => Arm::ViewpointGuided,
            ArmArg::FullSocratic => Arm::FullSocratic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Kl,
    Dpo,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    ParenViolation,
    PrecedenceViolation,
    Miscompute,
}

impl From<ClassArg> for ErrorClass {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::ParenViolation => ErrorClass::ParenViolation,
            ClassArg::PrecedenceViolation => ErrorClass::PrecedenceViolation,
            ClassArg::Miscompute => ErrorClass::Miscompute,
        }
    }
}

/// Exit 2 for anything the user can fix in their inputs, 1 otherwise.
enum Failure {
    Input(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn input<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Input(format!("{context}: {e}"))
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(input(path.display()))
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = read_input(path)?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize::<_, RunConfig>(de).map_err(|e| {
                let key = e.path().to_string();
                Failure::Input(format!("{}: config key `{key}`: {}", path.display(), e.inner()))
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    } else if let Ok(env) = std::env::var("SOCRATIC_SEED") {
        cfg.master_seed = env
            .trim()
            .parse()
            .map_err(input(format_args!("SOCRATIC_SEED={env:?}")))?;
    }
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate().map_err(|e| Failure::Input(e.to_string()))
}

fn load_policy(path: &Path) -> Result<StudentPolicy, Failure> {
    if !path.exists() {
        return Err(Failure::Input(format!("{}: no such file", path.display())));
    }
    StudentPolicy::load(path).map_err(input(path.display()))
}

fn load_kb(path: &Path) -> Result<KnowledgeBase, Failure> {
    if !path.exists() {
        return Err(Failure::Input(format!("{}: no such file", path.display())));
    }
    KnowledgeBase::load(path).map_err(input(path.display()))
}

/// The most recent viewpoints not flagged as significantly harmful, up to
/// the configured capacity.
fn active_from_kb(kb: &KnowledgeBase, capacity: usize) -> ActiveViewpoints {
    let keep: Vec<Viewpoint> = kb
        .iter()
        .filter(|v| v.utility.as_ref().is_none_or(|u| u.estimate + 2.0 * u.std_error >= 0.0))
        .cloned()
        .collect();
    let start = keep.len().saturating_sub(capacity);
    ActiveViewpoints::from_viewpoints(keep[start..].to_vec())
}

fn probes(cfg: &RunConfig) -> Result<ProbeSet, Failure> {
    ProbeSet::generate(cfg.master_seed, &cfg.probe).map_err(|e| Failure::Input(e.to_string()))
}

fn cmd_run(cli: &Cli, out: &Path, arm: Option<ArmArg>, episodes: Option<u64>) -> CmdResult {
    let mut cfg = load_config(cli)?;
    if let Some(a) = arm {
        cfg.arm = a.into();
    }
    if let Some(n) = episodes {
        cfg.episodes = n;
    }
    validate(&cfg)?;
    let artifacts = run::run(&cfg, out).context("run failed")?;
    println!(
        "arm {} seed {} episodes {}: final success rate (MA100) {:.4}, KB size {}",
        cfg.arm.as_str(),
        cfg.master_seed,
        cfg.episodes,
        artifacts.final_success_rate,
        artifacts.kb_size
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    policy: String,
    score: f64,
    viewpoints: usize,
    probe_tasks: usize,
    samples_per_task: usize,
    seed: u64,
}

fn cmd_eval(cli: &Cli, policy: &Path, kb: Option<&Path>, compare: Option<&Path>) -> CmdResult {
    let cfg = load_config(cli)?;
    validate(&cfg)?;
    let p = load_policy(policy)?;
    let active = match kb {
        Some(path) => active_from_kb(&load_kb(path)?, cfg.active_capacity),
        None => ActiveViewpoints::default(),
    };
    let other = compare.map(load_policy).transpose()?;
    let probes = probes(&cfg)?;
    let mut rows = vec![(policy, estimate_score(&p, &active, &probes), active.len())];
    if let (Some(path), Some(o)) = (compare, &other) {
        rows.push((path, estimate_score(o, &ActiveViewpoints::default(), &probes), 0));
    }
    if rows.len() > 1 {
        println!("{:<40} {:>10} {:>8}", "policy", "viewpoints", "score");
        for (path, score, n) in &rows {
            println!("{:<40} {:>10} {:>8.4}", path.display(), n, score);
        }
        if rows[0].1 > 0.0 {
            println!("retention {:.4}", rows[1].1 / rows[0].1);
        }
    } else {
        println!("score {:.4}", rows[0].1);
    }
    for (path, score, n) in rows {
        let out = EvalOutput {
            policy: path.display().to_string(),
            score,
            viewpoints: n,
            probe_tasks: probes.tasks.len(),
            samples_per_task: probes.samples_per_task,
            seed: cfg.master_seed,
        };
        println!("{}", serde_json::to_string(&out).expect("eval output serializes"));
    }
    Ok(())
}

fn cmd_distill(cli: &Cli, policy: &Path, kb: &Path, out: &Path, method: Option<MethodArg>, n_tasks: usize) -> CmdResult {
    let cfg = load_config(cli)?;
    validate(&cfg)?;
    let current = load_policy(policy)?;
    let active = active_from_kb(&load_kb(kb)?, cfg.active_capacity);
    let method = match method {
        Some(MethodArg::Kl) => DistillMethod::Kl,
        Some(MethodArg::Dpo) => DistillMethod::Dpo,
        None => cfg.distill.method,
    };
    let tasks = generate_tasks(cfg.master_seed, label::DISTILL, n_tasks, &cfg.generator)
        .map_err(|e| Failure::Input(e.0))?;
    let mut rng = RngStream::derived(cfg.master_seed, &[label::DISTILL]);
    let d = &cfg.distill;
    let (outcome, records) = match method {
        DistillMethod::Kl => {
            let ds = build_distill_dataset(&current, &active, &tasks, d.rollouts, &mut rng);
            (distill(&ds, &current, d.steps, d.lr).context("distillation failed")?, ds.len())
        }
        DistillMethod::Dpo => {
            let pairs = build_preference_pairs(
                &current,
                &active,
                &tasks,
                d.rollouts,
                PairConstruction::WithViewpointVsWithout,
                &mut rng,
            );
            let o = dpo_train(&pairs, &current, &current, d.beta, d.steps, d.lr).context("DPO failed")?;
            (o, pairs.len())
        }
    };
    let probes = probes(&cfg)?;
    let guided_score = estimate_score(&current, &active, &probes);
    let distilled_score = estimate_score(&outcome.policy, &ActiveViewpoints::default(), &probes);
    outcome.policy.save(out).with_context(|| format!("writing {}", out.display()))?;
    let report = DistillReport {
        episode: 0,
        method,
        records,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        steps: outcome.steps,
        lr: outcome.lr,
        guided_score,
        distilled_score,
        retention: (guided_score > 0.0).then(|| distilled_score / guided_score),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_kb_inspect(cli: &Cli, path: &Path, class: Option<ClassArg>, by_utility: bool) -> CmdResult {
    load_config(cli)?;
    let kb = load_kb(path)?;
    let mut entries: Vec<&Viewpoint> = kb
        .iter()
        .filter(|v| class.is_none_or(|c| v.error_class == ErrorClass::from(c)))
        .collect();
    if by_utility {
        let key = |v: &Viewpoint| v.utility.as_ref().map_or(f64::NEG_INFINITY, |u| u.estimate);
        entries.sort_by(|a, b| key(b).total_cmp(&key(a)));
    }
    let noun = if entries.len() == 1 { "viewpoint" } else { "viewpoints" };
    println!("{} {noun}", entries.len());
    for v in entries {
        let utility = v
            .utility
            .as_ref()
            .map_or("unmeasured".to_string(), |u| format!("U = {:+.4} ± {:.4} ({} probes)", u.estimate, u.std_error, u.probes));
        let bias: Vec<String> = v.bias_spec.iter().map(|(k, d)| format!("{k}:{d:+}")).collect();
        println!();
        println!("{}  [{}]  {}", v.id, v.error_class, utility);
        println!("  {}", v.principle_text);
        println!(
            "  bias {{{}}}  trigger {:?}  from {} (episode {}, template {})",
            bias.join(", "),
            v.trigger,
            v.provenance.trace_id,
            v.provenance.episode,
            v.provenance.template_id
        );
    }
    Ok(())
}

fn cmd_kb_export(cli: &Cli, path: &Path, out: Option<&Path>, n_tasks: usize) -> CmdResult {
    let cfg = load_config(cli)?;
    validate(&cfg)?;
    let kb = load_kb(path)?;
    let tasks =
        generate_tasks(cfg.master_seed, label::EXPORT, n_tasks, &cfg.generator).map_err(|e| Failure::Input(e.0))?;
    let records = export_instructions(&kb, &tasks);
    let mut buf = Vec::new();
    write_instructions(&mut buf, &records).context("formatting instructions")?;
    match out {
        Some(p) => socratic_core::write_atomic(p, &buf).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(&buf).context("writing stdout")?,
    }
    eprintln!("{} instruction records from {} viewpoints", records.len(), kb.len());
    Ok(())
}

fn cmd_report(cli: &Cli, files: &[PathBuf], threshold: f64) -> CmdResult {
    load_config(cli)?;
    println!("file,arm,episodes,final_ma100,episodes_to_threshold,kb_size");
    let mut per_arm: Vec<(Arm, Vec<Option<u64>>)> = Vec::new();
    for path in files {
        let text = read_input(path)?;
        let rows = read_metrics(&text).map_err(input(path.display()))?;
        let Some(last) = rows.last() else {
            return Err(Failure::Input(format!("{}: no episodes", path.display())));
        };
        let reached = episodes_to_threshold(&rows, threshold);
        println!(
            "{},{},{},{:.4},{},{}",
            path.display(),
            last.arm.as_str(),
            rows.len(),
            last.success_rate_ma100,
            reached.map(|e| e.to_string()).unwrap_or_default(),
            last.kb_size
        );
        match per_arm.iter_mut().find(|(a, _)| *a == last.arm) {
            Some((_, v)) => v.push(reached),
            None => per_arm.push((last.arm, vec![reached])),
        }
    }
    eprintln!();
    eprintln!("{:<18} {:>5} {:>8} {:>24}", "arm", "runs", "reached", "mean episodes to target");
    for (arm, reached) in &per_arm {
        let hit: Vec<u64> = reached.iter().flatten().copied().collect();
        let mean = if hit.is_empty() {
            "-".to_string()
        } else {
            format!("{:.1}", hit.iter().sum::<u64>() as f64 / hit.len() as f64)
        };
        eprintln!("{:<18} {:>5} {:>8} {:>24}", arm.as_str(), reached.len(), hit.len(), mean);
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Run { out, arm, episodes } => cmd_run(cli, out, *arm, *episodes),
        Command::Eval { policy, kb, compare } => cmd_eval(cli, policy, kb.as_deref(), compare.as_deref()),
        Command::Distill {
            policy,
            kb,
            out,
            method,
            tasks,
        } => cmd_distill(cli, policy, kb, out, *method, *tasks),
        Command::Kb { command } => match command {
            KbCommand::Inspect { path, class, by_utility } => cmd_kb_inspect(cli, path, *class, *by_utility),
            KbCommand::ExportInstructions { path, out, tasks } => cmd_kb_export(cli, path, out.as_deref(), *tasks),
        },
        Command::Report { metrics, threshold } => cmd_report(cli, metrics, *threshold),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

