mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use vsictl::bench::{
    ablation_markdown, ablation_table, builtin_scenarios, emit_report, metrics, metrics_markdown, read_metrics_csv,
    run_matrix, write_ablation_csv, ControllerSpec, MetricReport, ReportFormat, Scenario,
};
use vsictl::distill::{
    collect_dataset, collection_scenarios, evaluate_student, train_student, write_loss_curve, ExpertDataset,
    FidelityReport,
};
use vsictl::env::{ACTION_DIM, OBS_DIM};
use vsictl::nn::{load_checkpoint, save_checkpoint, MlpSpec, Precision, DSP_THROUGHPUT_MFLOPS};
use vsictl::sac::{train_with, write_training_log};

use config::{student_spec, RunConfig, StudentSection};

#[derive(Parser)]
#[command(name = "vsictl", version, about = "Train, distill and benchmark learned inverter voltage controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher policy with SAC.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Collect expert data from a teacher and distill a student.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Student architecture: S1, S2 or custom (overrides `student.name`).
        #[arg(long)]
        student: Option<String>,
    },
    /// Roll every controller on every scenario and write reports.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated controllers: pi, fcs-mpc, zero, feedforward or NAME=CHECKPOINT.
        #[arg(long, value_delimiter = ',')]
        controllers: Option<Vec<String>>,
        /// Comma-separated scenario names.
        #[arg(long, value_delimiter = ',')]
        scenarios: Option<Vec<String>>,
        /// Concurrent rollouts.
        #[arg(long)]
        jobs: Option<usize>,
        /// Also emit the network-cost ablation table.
        #[arg(long)]
        ablation: bool,
    },
    /// Re-render markdown reports from the CSV files in `--out`.
    Report {
        #[command(flatten)]
        common: Common,
        /// Also emit the network-cost ablation table.
        #[arg(long)]
        ablation: bool,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(cfg)
}

fn write_snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::write(out.join("config.resolved.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Distill {
            common,
            teacher,
            student,
        } => cmd_distill(&common, &teacher, student),
        Command::Bench {
            common,
            controllers,
            scenarios,
            jobs,
            ablation,
        } => cmd_bench(&common, controllers, scenarios, jobs, ablation),
        Command::Report { common, ablation } => cmd_report(&common, ablation),
    }
}

fn cmd_train(common: &Common) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let out = &common.out;
    let res = train_with(&cfg.episode, &cfg.reward, &cfg.circuit, &cfg.sac, |e| {
        eprintln!("episode {:>4}  return {:>14.4}  alpha {:.5}", e.episode, e.ret, e.alpha);
    })?;
    save_checkpoint(&res.final_actor(), out.join("teacher.ckpt"), Precision::F64)?;
    if cfg.train.save_best {
        save_checkpoint(&res.best_actor, out.join("teacher_best.ckpt"), Precision::F64)?;
    }
    write_training_log(out.join("train_log.csv"), &res.log)?;
    write_snapshot(&cfg, out)?;
    eprintln!("best return {:.4} at episode {}", res.best_return, res.best_episode);
    Ok(ExitCode::SUCCESS)
}

fn all_scenarios() -> Vec<Scenario> {
    let mut v = builtin_scenarios();
    v.extend(collection_scenarios().into_iter().filter(|s| !v.iter().any(|b| b.name == s.name)).collect::<Vec<_>>());
    v
}

fn resolve_scenarios(names: &[String]) -> Result<Vec<Scenario>> {
    let known = all_scenarios();
    names
        .iter()
        .map(|n| {
            known.iter().find(|s| &s.name == n).cloned().with_context(|| {
                let list: Vec<_> = known.iter().map(|s| s.name.as_str()).collect();
                format!("unknown scenario `{n}` (known: {})", list.join(", "))
            })
        })
        .collect()
}

fn load_policy(path: &Path) -> Result<vsictl::nn::Mlp> {
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    let net = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if net.input_dim() != OBS_DIM || net.output_dim() != ACTION_DIM {
        bail!(
            "checkpoint {} maps {} -> {}, expected {OBS_DIM} -> {ACTION_DIM}",
            path.display(),
            net.input_dim(),
            net.output_dim()
        );
    }
    Ok(net)
}

fn dataset_key(teacher: &Path, cfg: &RunConfig, scenarios: &[Scenario]) -> Result<String> {
    let key = (&cfg.circuit, &cfg.reward, cfg.collect_config(), scenarios);
    let mut h = Sha256::new();
    h.update(fs::read(teacher)?);
    h.update(format!("{key:?}").as_bytes());
    let digest = h.finalize();
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn cmd_distill(common: &Common, teacher_path: &Path, student: Option<String>) -> Result<ExitCode> {
    let mut cfg = load_config(common)?;
    if let Some(name) = student {
        cfg.student = StudentSection {
            name,
            hidden: cfg.student.hidden.clone(),
        };
    }
    let spec = student_spec(&cfg.student)?;
    let out = &common.out;
    let teacher = load_policy(teacher_path)?;
    let scenarios = resolve_scenarios(&cfg.collect.scenarios)?;
    for h in &cfg.collect.held_out {
        if !cfg.collect.scenarios.contains(h) {
            bail!("held-out scenario `{h}` is not listed in `collect.scenarios`");
        }
    }

    let cache = out.join(format!("dataset-{}.bin", dataset_key(teacher_path, &cfg, &scenarios)?));
    let dataset = if cache.exists() {
        eprintln!("reusing cached dataset {}", cache.display());
        ExpertDataset::load(&cache)?
    } else {
        let collected = collect_dataset(&teacher, &scenarios, &cfg.circuit, &cfg.reward, &cfg.collect_config())?;
        for (sc, ep) in &collected.discarded {
            eprintln!("warning: teacher diverged on scenario `{sc}` episode {ep}; trajectory discarded");
        }
        collected.dataset.save(&cache, Precision::F64)?;
        eprintln!("collected {} trajectories into {}", collected.dataset.len(), cache.display());
        collected.dataset
    };
    dataset.check_isolation()?;

    let trained = train_student(&spec, &dataset, &cfg.circuit, &cfg.distill)?;
    let name = &cfg.student.name;
    save_checkpoint(&trained.best, out.join(format!("student_{name}.ckpt")), Precision::F64)?;
    write_loss_curve(out.join(format!("loss_{name}.csv")), &trained.curve)?;

    let held = resolve_scenarios(&cfg.collect.held_out)?;
    let reports = held
        .iter()
        .map(|sc| evaluate_student(&trained.best, &teacher, sc, &cfg.circuit, &cfg.reward))
        .collect::<Result<Vec<_>, _>>()?;
    let best = &trained.curve[trained.best_epoch];
    write_fidelity(&out.join(format!("fidelity_{name}.csv")), &reports, best)?;
    write_snapshot(&cfg, out)?;
    println!(
        "student {name}: best epoch {}, train/test loss {:.4}/{:.4}, train/test mse {:.4}/{:.4}",
        best.epoch, best.train_loss, best.test_loss, best.train_mse, best.test_mse
    );
    for r in &reports {
        println!(
            "  {}: action mse {:.3e}, overshoot {:.2}% vs teacher {:.2}%",
            r.scenario, r.action_mse, r.student.relative_overshoot, r.teacher.relative_overshoot
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn write_fidelity(path: &Path, reports: &[FidelityReport], best: &vsictl::distill::LossPoint) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "scenario",
        "action_mse",
        "teacher_sse",
        "student_sse",
        "sse_delta",
        "teacher_overshoot",
        "student_overshoot",
        "overshoot_delta",
        "thd_voltage_delta",
        "settle_time_delta",
        "teacher_diverged",
        "student_diverged",
        "train_loss",
        "test_loss",
        "train_mse",
        "test_mse",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        w.write_record([
            r.scenario.clone(),
            r.action_mse.to_string(),
            r.teacher.sse.to_string(),
            r.student.sse.to_string(),
            r.sse_delta.to_string(),
            r.teacher.relative_overshoot.to_string(),
            r.student.relative_overshoot.to_string(),
            r.overshoot_delta.to_string(),
            opt(r.thd_voltage_delta),
            opt(r.settle_time_delta),
            r.teacher.diverged.to_string(),
            r.student.diverged.to_string(),
            best.train_loss.to_string(),
            best.test_loss.to_string(),
            best.train_mse.to_string(),
            best.test_mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_controller(item: &str, cfg: &RunConfig) -> Result<ControllerSpec> {
    Ok(match item {
        "pi" => ControllerSpec::Pi(cfg.bench.pi),
        "fcs-mpc" => ControllerSpec::FcsMpc(cfg.bench.mpc),
        "zero" => ControllerSpec::Zero,
        "feedforward" => ControllerSpec::Feedforward,
        other => match other.split_once('=') {
            Some((name, path)) if !name.is_empty() => ControllerSpec::Policy {
                name: name.to_string(),
                net: load_policy(Path::new(path))?,
            },
            _ => bail!("unknown controller `{other}` (expected pi, fcs-mpc, zero, feedforward or NAME=CHECKPOINT)"),
        },
    })
}

fn ablation_rows(cfg: &RunConfig) -> Vec<vsictl::bench::AblationRow> {
    let specs = vec![
        ("teacher".to_string(), MlpSpec::new(OBS_DIM, &cfg.sac.actor_hidden, ACTION_DIM)),
        ("S1".to_string(), MlpSpec::new(OBS_DIM, &[45, 30, 30], ACTION_DIM)),
        ("S2".to_string(), MlpSpec::new(OBS_DIM, &[20, 15], ACTION_DIM)),
    ];
    ablation_table(&specs, DSP_THROUGHPUT_MFLOPS)
}

fn cmd_bench(
    common: &Common,
    controllers: Option<Vec<String>>,
    scenarios: Option<Vec<String>>,
    jobs: Option<usize>,
    ablation: bool,
) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let names = controllers.unwrap_or_else(|| cfg.bench.controllers.clone());
    let specs = names.iter().map(|c| parse_controller(c, &cfg)).collect::<Result<Vec<_>>>()?;
    let scen = resolve_scenarios(&scenarios.unwrap_or_else(|| cfg.bench.scenarios.clone()))?;
    let traces = run_matrix(&specs, &scen, &cfg.circuit, &cfg.reward, jobs.unwrap_or(cfg.bench.jobs))?;
    let reports = traces
        .iter()
        .zip(scen.iter().flat_map(|s| specs.iter().map(move |_| s)))
        .map(|(t, s)| metrics(t, s))
        .collect::<Result<Vec<MetricReport>, _>>()?;
    let rows = (ablation || cfg.bench.ablation).then(|| ablation_rows(&cfg));
    emit_report(
        &common.out,
        &reports,
        &traces,
        rows.as_deref(),
        &[ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::PlotData],
    )?;
    write_snapshot(&cfg, &common.out)?;
    print!("{}", metrics_markdown(&reports));
    if let Some(rows) = &rows {
        print!("\n{}", ablation_markdown(rows));
    }
    let diverged: Vec<_> = reports.iter().filter(|r| r.diverged).collect();
    if diverged.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for r in diverged {
            eprintln!("diverged: {} on {}", r.controller, r.scenario);
        }
        Ok(ExitCode::from(2))
    }
}

fn cmd_report(common: &Common, ablation: bool) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let out = &common.out;
    let csv_path = out.join("metrics.csv");
    let mut wrote = false;
    if csv_path.exists() {
        let reports = read_metrics_csv(&csv_path)?;
        let md = metrics_markdown(&reports);
        fs::write(out.join("metrics.md"), &md)?;
        print!("{md}");
        wrote = true;
    }
    if ablation || cfg.bench.ablation {
        let rows = ablation_rows(&cfg);
        write_ablation_csv(out.join("ablation.csv"), &rows)?;
        let md = ablation_markdown(&rows);
        fs::write(out.join("ablation.md"), &md)?;
        print!("{md}");
        wrote = true;
    }
    if !wrote {
        bail!("nothing to report: {} not found and no ablation requested", csv_path.display());
    }
    write_snapshot(&cfg, out)?;
    Ok(ExitCode::SUCCESS)
}
