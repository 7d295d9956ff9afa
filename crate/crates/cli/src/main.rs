use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use synthseg::harness::{read_json, Config, Pipeline};
use synthseg::ingest::{read_labels, read_volume, write_labels, write_volume, Catalog, Contrast, Tissue};
use synthseg::metrics::{seg_metrics, MetricQuad};
use synthseg::phantom::{generate_phantom_dataset, PhantomSpec};
use synthseg::preprocess::preprocess_dataset;
use synthseg::report::{render_table, segmentation_table, TableFormat};
use synthseg::segmentation::{InputStack, SegmentorModel};
use synthseg::synthesis::GeneratorModel;

#[derive(Parser)]
#[command(name = "synthseg", version, about = "Missing-contrast thigh MRI synthesis and tissue segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<Config> {
        Ok(match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        })
    }
}

#[derive(Args)]
struct WorkArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Work directory holding data, fold plan, models, reports and tables.
    #[arg(long, default_value = "synthseg-work")]
    workdir: PathBuf,
}

impl WorkArgs {
    fn pipeline(&self) -> anyhow::Result<Pipeline> {
        Ok(Pipeline::prepare(self.config.load()?, &self.workdir)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Config,
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Bias correction, diffusion and whitening of every volume in a catalog.
    Preprocess {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Synth(SynthCmd),
    #[command(subcommand)]
    Seg(SegCmd),
    #[command(subcommand)]
    Metrics(MetricsCmd),
    #[command(subcommand)]
    Matrix(MatrixCmd),
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Write the phantom dataset described by the configuration.
    Generate {
        /// Phantom settings as JSON (the `phantom.json` a previous run wrote);
        /// overrides `[dataset.phantom]` of `--config`.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Train (or load from cache) one translation model for one fold.
    Train {
        #[command(flatten)]
        work: WorkArgs,
        /// Direction as SOURCE:TARGET, e.g. MRI1:MRI2.
        #[arg(long)]
        task: String,
        #[arg(long)]
        fold: usize,
    },
    /// Synthesize the target contrast from a source volume.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SegCmd {
    /// Train and evaluate one experiment on one fold.
    Train {
        #[command(flatten)]
        work: WorkArgs,
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        fold: usize,
    },
    /// Label a subject from one volume per model input contrast.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Input volumes, any order; contrasts are read from the files.
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// DSC, accuracy, sensitivity and specificity per tissue.
    Eval {
        /// A label image or a directory searched recursively for `.nii` files.
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth, matched to `--pred` by relative path.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "muscle,fat,bone,marrow")]
        classes: Vec<Tissue>,
        /// Writes CSV here; prints to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MatrixCmd {
    /// Run every experiment (or the named ones) on every fold.
    Run {
        #[command(flatten)]
        work: WorkArgs,
        #[arg(long = "only")]
        only: Vec<String>,
    },
    /// Rebuild the tables from stored reports and print them.
    Report {
        #[command(flatten)]
        work: WorkArgs,
    },
    /// Check that no test subject was read during training.
    Audit {
        #[command(flatten)]
        work: WorkArgs,
    },
    /// List experiment ids.
    List {
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn parse_task(s: &str) -> anyhow::Result<(Contrast, Contrast)> {
    let (a, b) = s.split_once(':').context("task must look like MRI1:MRI2")?;
    Ok((a.parse()?, b.parse()?))
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn label_files(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![PathBuf::new()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "nii") {
                out.push(p.strip_prefix(root)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// One row per label image plus a mean row; per tissue DSC, ACC, SENS, SPEC.
fn metrics_csv(pred: &Path, gt: &Path, classes: &[Tissue]) -> anyhow::Result<String> {
    let files = label_files(pred)?;
    if files.is_empty() {
        bail!("no .nii files under {}", pred.display());
    }
    let mut header = vec!["image".to_string()];
    for t in classes {
        for m in MetricQuad::NAMES {
            header.push(format!("{} {m}", t.heading()));
        }
    }
    let mut out = header.join(",") + "\n";
    let mut sums = vec![0.0; classes.len() * 4];
    for rel in &files {
        let at = |root: &Path| if rel.as_os_str().is_empty() { root.to_path_buf() } else { root.join(rel) };
        let (p, g) = (read_labels(&at(pred))?, read_labels(&at(gt))?);
        let name = if rel.as_os_str().is_empty() { pred.display().to_string() } else { rel.display().to_string() };
        let mut row = vec![name];
        for (i, &t) in classes.iter().enumerate() {
            for (j, v) in seg_metrics(&p, &g, t)?.as_array().into_iter().enumerate() {
                sums[i * 4 + j] += v;
                row.push(v.to_string());
            }
        }
        out += &(row.join(",") + "\n");
    }
    let n = files.len() as f64;
    let mean: Vec<String> = std::iter::once("mean".to_string()).chain(sums.iter().map(|s| (s / n).to_string())).collect();
    out += &(mean.join(",") + "\n");
    Ok(out)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Config => print!("{}", Config::default().to_toml()),
        Command::Phantom(PhantomCmd::Generate { spec, config, out }) => {
            let phantom = match spec {
                Some(p) => read_json::<PhantomSpec>(&p)?,
                None => config.load()?.dataset.phantom,
            };
            let catalog = generate_phantom_dataset(&phantom, &out)?;
            eprintln!("wrote {} files for {} subjects", catalog.file_count(), catalog.subject_ids().len());
        }
        Command::Preprocess { config, input, out } => {
            let cfg = config.load()?;
            let catalog = preprocess_dataset(&Catalog::load(&input)?, &out, &cfg.preprocess)?;
            eprintln!("preprocessed {} subjects into {}", catalog.subject_ids().len(), out.display());
        }
        Command::Synth(SynthCmd::Train { work, task, fold }) => {
            let (s, t) = parse_task(&task)?;
            let (_, record) = work.pipeline()?.synthesis_model(s, t, fold)?;
            print_json(&record.quality)?;
        }
        Command::Synth(SynthCmd::Apply { model, input, out }) => {
            let g = GeneratorModel::load(&model)?;
            write_volume(&g.synthesize(&read_volume(&input)?)?, &out)?;
        }
        Command::Seg(SegCmd::Train { work, experiment, fold }) => {
            let p = work.pipeline()?;
            let report = p.run_fold(&p.experiment(&experiment)?, fold)?;
            print_json(&report)?;
        }
        Command::Seg(SegCmd::Predict { model, inputs, out }) => {
            let m = SegmentorModel::load(&model)?;
            let mut volumes = inputs.iter().map(|p| read_volume(p)).collect::<Result<Vec<_>, _>>()?;
            volumes.sort_by_key(|v| v.contrast());
            let have: Vec<Contrast> = volumes.iter().map(|v| v.contrast()).collect();
            if have != m.contrasts() {
                bail!("model expects {:?}, inputs are {:?}", m.contrasts(), have);
            }
            write_labels(&m.predict(&InputStack::new(volumes)?)?, &out)?;
        }
        Command::Metrics(MetricsCmd::Eval { pred, gt, classes, out }) => {
            let csv = metrics_csv(&pred, &gt, &classes)?;
            match out {
                Some(p) => std::fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Matrix(MatrixCmd::Run { work, only }) => {
            let p = work.pipeline()?;
            let mut specs = p.experiments()?;
            if !only.is_empty() {
                for id in &only {
                    p.experiment(id)?;
                }
                specs.retain(|s| only.contains(&s.id));
            }
            let outcome = p.run_matrix(&specs)?;
            for f in &outcome.failures {
                eprintln!("failed {}: {}", f.job, f.error);
            }
            for t in &outcome.tables {
                eprintln!("wrote {}", t.display());
            }
            return Ok(outcome.succeeded());
        }
        Command::Matrix(MatrixCmd::Report { work }) => {
            let p = work.pipeline()?;
            let reports = p.load_reports(&p.experiments()?)?;
            p.write_tables(&reports)?;
            print!("{}", render_table(&segmentation_table(&reports), TableFormat::Markdown));
        }
        Command::Matrix(MatrixCmd::Audit { work }) => {
            let audit = work.pipeline()?.audit()?;
            eprintln!("{} reads, {} in training phases, {} violations", audit.records, audit.training_reads, audit.violations.len());
            for v in &audit.violations {
                eprintln!("violation: {v:?}");
            }
            return Ok(audit.is_clean());
        }
        Command::Matrix(MatrixCmd::List { config }) => {
            let cfg = config.load()?;
            for s in synthseg::harness::expand_experiment_matrix(&cfg.matrix, cfg.segmentation.mixed_ratio)? {
                println!("{}\t{}", s.id, s.label());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
