//! Command-line surface: generate data, train the black box and the
//! explainer/approximator pair, evaluate fidelity, export explanations,
//! sweep hyperparameter grids.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vibi::blackbox::{classifier_accuracy, train_classifier, BlackboxArtifact, BlackboxMeta};
use vibi::config::{Overrides, ResolvedRun, RunConfig, Task};
use vibi::data::{gen_synth, load_mnist_dir, Dataset};
use vibi::error::{Error, Result};
use vibi::eval;
use vibi::explain::export_explanation;
use vibi::nets::BlackBox;
use vibi::pipeline::{load_task, train_run};
use vibi::trainer::{grid_search, Checkpoint, LossMode};

#[derive(Parser)]
#[command(
    name = "vibi",
    about = "Brief-but-comprehensive explanations of black-box classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic planted-chunk dataset and write it with its
    /// ground truth.
    GenSynth(Common),
    /// Train the black-box classifier for the configured task.
    TrainBlackbox(Common),
    /// Train the explainer/approximator pair against the black box.
    TrainVibi(Common),
    /// Export the explanation of one instance (JSON, plus a PGM heatmap
    /// for grid chunks).
    Explain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (default <out_dir>/checkpoint.vibi).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Instance index within the chosen split.
        #[arg(long)]
        instance: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Evaluate approximator and/or rationale fidelity on the test split.
    EvalFidelity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::Both)]
        variant: VariantArg,
        /// F1 averaging printed alongside the report.
        #[arg(long, value_enum, default_value_t = F1Arg::Macro)]
        f1: F1Arg,
    },
    /// Train every cell of the configured hyperparameter grid and report
    /// the best by validation fidelity.
    GridSearch(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed override (beats config and VIBI_SEED).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    train_samples: Option<usize>,
    /// Objective: the full loss or its cross-entropy-only reduction.
    #[arg(long, value_enum)]
    loss_mode: Option<LossModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossModeArg {
    Vibi,
    CrossEntropyOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Approximator,
    Rationale,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum F1Arg {
    Macro,
    Micro,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version exit 0; argument errors are usage errors (1)
            let is_usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if is_usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        out_dir: c.out_dir.clone(),
        k: c.k,
        tau: c.tau,
        beta: c.beta,
        lr: c.lr,
        epochs: c.epochs,
        batch: c.batch,
        train_samples: c.train_samples,
        loss_mode: c.loss_mode.map(|m| match m {
            LossModeArg::Vibi => LossMode::Vibi,
            LossModeArg::CrossEntropyOnly => LossMode::CrossEntropyOnly,
        }),
    }
}

fn resolve(common: &Common) -> Result<ResolvedRun> {
    RunConfig::load(&common.config)?.resolve(&overrides(common))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenSynth(common) => {
            let run = resolve(&common)?;
            if run.config.task != Task::Synthetic {
                return Err(Error::Config("gen-synth requires task = \"synthetic\"".into()));
            }
            let spec = run.config.synthetic.clone().unwrap_or_default();
            let task = gen_synth(&spec, run.seed)?;
            let out = &run.config.out_dir;
            std::fs::create_dir_all(out)?;
            for (name, split) in [
                ("synth-train.csv", &task.splits.train),
                ("synth-val.csv", &task.splits.val),
                ("synth-test.csv", &task.splits.test),
            ] {
                write_csv(&out.join(name), split, &task.blackbox)?;
            }
            std::fs::write(
                out.join("truth.json"),
                serde_json::to_string_pretty(&task.relevant).expect("serializes"),
            )?;
            run.write(out)?;
            println!(
                "wrote synthetic task (d={}, n={}, relevant {:?}) to {}",
                spec.d,
                spec.n,
                task.relevant,
                out.display()
            );
            Ok(())
        }
        Cmd::TrainBlackbox(common) => {
            let run = resolve(&common)?;
            match run.config.task {
                Task::Synthetic => Err(Error::Config(
                    "the synthetic task uses a rule black box; nothing to train".into(),
                )),
                Task::Mnist => {
                    let m = run.config.mnist.as_ref().expect("resolved");
                    let splits = load_mnist_dir(&m.dir)?;
                    let model = train_classifier(
                        &splits.train,
                        run.blackbox_arch(),
                        &run.blackbox,
                        run.seed,
                    )?;
                    let test_acc = classifier_accuracy(&model, &splits.test)?;
                    let bb_path = m.blackbox_path.clone().expect("resolved");
                    std::fs::create_dir_all(&run.config.out_dir)?;
                    BlackboxArtifact {
                        meta: BlackboxMeta {
                            arch: model.spec().clone(),
                            seed: run.seed,
                            test_accuracy: Some(test_acc),
                        },
                        params: model.params().to_vec(),
                    }
                    .save(&bb_path)?;
                    run.write(&run.config.out_dir)?;
                    println!(
                        "black box trained: test accuracy {test_acc:.4}, saved to {}",
                        bb_path.display()
                    );
                    Ok(())
                }
            }
        }
        Cmd::TrainVibi(common) => {
            let run = resolve(&common)?;
            let env = load_task(&run)?;
            let out = train_run(&run, &env)?;
            let dir = &run.config.out_dir;
            std::fs::create_dir_all(dir)?;
            let ck_path = dir.join("checkpoint.vibi");
            out.checkpoint.save(&ck_path)?;
            run.write(dir)?;
            let first = out.checkpoint.loss_trace.first();
            let last = out.checkpoint.loss_trace.last();
            println!(
                "trained {} steps: loss {} -> {}, checkpoint {}",
                out.checkpoint.loss_trace.len(),
                first.map_or("-".into(), |t| format!("{:.4}", t.total)),
                last.map_or("-".into(), |t| format!("{:.4}", t.total)),
                ck_path.display()
            );
            if let Some(e) = out.stopped_at {
                println!("early stop at epoch {e}");
            }
            if let Some(f) = out.val_fidelity {
                println!("validation approximator fidelity {f:.4}");
            }
            Ok(())
        }
        Cmd::Explain {
            common,
            checkpoint,
            instance,
            split,
        } => {
            let run = resolve(&common)?;
            let env = load_task(&run)?;
            let ck_path = checkpoint.unwrap_or_else(|| run.config.out_dir.join("checkpoint.vibi"));
            let ck = Checkpoint::load(&ck_path)?;
            let data = match split {
                SplitArg::Train => &env.splits.train,
                SplitArg::Val => &env.splits.val,
                SplitArg::Test => &env.splits.test,
            };
            let expl = export_explanation(&ck, env.blackbox.as_ref(), data, instance)?;
            let dir = &run.config.out_dir;
            std::fs::create_dir_all(dir)?;
            run.write(dir)?;
            let json_path = dir.join(format!("explanation-{instance}.json"));
            std::fs::write(&json_path, expl.record_json())?;
            println!("wrote {}", json_path.display());
            if let Some(pgm) = &expl.heatmap {
                let pgm_path = dir.join(format!("explanation-{instance}.pgm"));
                std::fs::write(&pgm_path, pgm)?;
                println!("wrote {}", pgm_path.display());
            }
            if let Some(note) = &expl.note {
                println!("note: {note}");
            }
            println!(
                "selected chunks {:?} | black box {} | approximator {}",
                expl.record.selected, expl.record.black_box_label, expl.record.approximator_label
            );
            Ok(())
        }
        Cmd::EvalFidelity {
            common,
            checkpoint,
            variant,
            f1,
        } => {
            let run = resolve(&common)?;
            let env = load_task(&run)?;
            let ck_path = checkpoint.unwrap_or_else(|| run.config.out_dir.join("checkpoint.vibi"));
            let ck = Checkpoint::load(&ck_path)?;
            let dir = &run.config.out_dir;
            std::fs::create_dir_all(dir)?;
            run.write(dir)?;
            let data = &env.splits.test;
            let write_report = |r: &eval::FidelityReport, name: &str| -> Result<()> {
                let path = dir.join(format!("fidelity-{name}.json"));
                std::fs::write(&path, r.to_json())?;
                let f1v = match f1 {
                    F1Arg::Macro => r.f1_macro,
                    F1Arg::Micro => eval::micro_f1(&r.confusion),
                };
                println!(
                    "{name} fidelity: accuracy {:.4}, f1 {:.4} ({})",
                    r.accuracy,
                    f1v,
                    path.display()
                );
                Ok(())
            };
            if matches!(variant, VariantArg::Approximator | VariantArg::Both) {
                let r = eval::approximator_fidelity(
                    &ck,
                    env.blackbox.as_ref(),
                    data,
                    ck.config.eval_samples,
                    run.seed,
                )?;
                write_report(&r, "approximator")?;
            }
            if matches!(variant, VariantArg::Rationale | VariantArg::Both) {
                let r = eval::rationale_fidelity(&ck, env.blackbox.as_ref(), data)?;
                write_report(&r, "rationale")?;
            }
            if let Some(relevant) = &env.truth {
                let truth: Vec<Vec<usize>> = (0..data.n()).map(|_| relevant.clone()).collect();
                let sel = eval::selection_quality(&ck, data, &truth)?;
                println!(
                    "selection quality: precision {:.4}, recall {:.4}",
                    sel.mean_precision, sel.mean_recall
                );
                std::fs::write(
                    dir.join("selection.json"),
                    serde_json::to_string_pretty(&sel).expect("serializes"),
                )?;
            }
            Ok(())
        }
        Cmd::GridSearch(common) => {
            let run = resolve(&common)?;
            let space = run
                .config
                .grid
                .clone()
                .ok_or_else(|| Error::Config("grid-search requires a [grid] section".into()))?;
            let env = load_task(&run)?;
            let result = grid_search(&env.splits, env.blackbox.as_ref(), &run.vibi, &space)?;
            let dir = &run.config.out_dir;
            std::fs::create_dir_all(dir)?;
            std::fs::write(
                dir.join("grid.json"),
                serde_json::to_string_pretty(&result.table).expect("serializes"),
            )?;
            println!("tau      lr       beta     k    fidelity");
            for cell in &result.table {
                println!(
                    "{:<8} {:<8} {:<8} {:<4} {}",
                    cell.tau,
                    cell.lr,
                    cell.beta,
                    cell.k,
                    cell.fidelity.map_or_else(
                        || format!("failed: {}", cell.error.as_deref().unwrap_or("?")),
                        |f| format!("{f:.4}")
                    ),
                );
            }
            match result.best {
                Some(best) => {
                    let json = serde_json::to_string_pretty(&best).expect("serializes");
                    std::fs::write(dir.join("best-config.json"), json)?;
                    println!(
                        "best cell: tau {} lr {} beta {} k {}",
                        best.tau, best.lr, best.beta, best.k
                    );
                    run.write(dir)?;
                    Ok(())
                }
                None => Err(Error::Numeric("every grid cell failed".into())),
            }
        }
    }
}

fn write_csv(path: &PathBuf, data: &Dataset, bb: &dyn BlackBox) -> Result<()> {
    let labels = eval::blackbox_labels(bb, data)?;
    let mut s = String::new();
    let f = data.features();
    for i in 0..f {
        s.push_str(&format!("x{i},"));
    }
    s.push_str("label\n");
    for i in 0..data.n() {
        for v in data.row(i) {
            s.push_str(&format!("{v},"));
        }
        s.push_str(&format!("{}\n", labels[i]));
    }
    std::fs::write(path, s)?;
    Ok(())
}
