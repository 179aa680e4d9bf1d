use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use freqscan::eval::evaluate;
use freqscan::hilbert::ScanVariant;
use freqscan_harness::ablate::{ablate, scan_cases, toggle_cases, write_ablation};
use freqscan_harness::config::{resolve_output, RunConfig};
use freqscan_harness::data::{gen_dataset, NUM_CLASSES};
use freqscan_harness::erf::{erf_map, write_erf, ERF_VARIANTS};
use freqscan_harness::invariants::{format_report, run_invariants, to_json};
use freqscan_harness::records::{group_by_image, read_records, write_pgm, write_records, Record};
use freqscan_harness::scan_report::{scan_report, to_csv};
use freqscan_harness::train::{evaluate_scenes, load_checkpoint, load_detector, train, write_json, MetricsReport};

#[derive(Parser)]
#[command(name = "freqscan", version, about = "Frequency-aware Hilbert-scan state-space detector on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a field, `section.key=value`; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationTable {
    Toggles,
    Scans,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and evaluate it on the test split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a split, or score existing record files.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `checkpoint.bin` in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Score these predictions against `--gt` instead of running a model.
        #[arg(long, requires = "gt")]
        predictions: Option<PathBuf>,
        #[arg(long, requires = "predictions")]
        gt: Option<PathBuf>,
    },
    /// Train every toggle and scan-variant combination on shared seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "all")]
        table: AblationTable,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Run the property suite; exits nonzero when any case fails.
    Invariants {
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Effective receptive field maps of the first stage.
    Erf {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scan variants; defaults to the unidirectional, bidirectional and Y-flip four-direction curves.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<ScanVariant>,
    },
    /// Locality of every scan variant on a square grid, as CSV.
    ScanReport {
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic splits as graymaps plus ground-truth records.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `data` under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_eval(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    split: Split,
    predictions: Option<PathBuf>,
    gt: Option<PathBuf>,
) -> Result<()> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let (metrics, run) = if let (Some(p), Some(g)) = (predictions, gt) {
        let gt_recs = read_records(&g)?;
        let pred_recs = read_records(&p)?;
        let mut ids: Vec<u64> = gt_recs.iter().chain(&pred_recs).map(|r| r.image_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let classes = gt_recs.iter().chain(&pred_recs).map(|r| r.class + 1).max().unwrap_or(0).max(NUM_CLASSES);
        let m = evaluate(&group_by_image(&pred_recs, &ids), &group_by_image(&gt_recs, &ids), classes)?;
        (m, p.display().to_string())
    } else {
        let ck = checkpoint.unwrap_or_else(|| dir.join("checkpoint.bin"));
        let (det, store) = load_detector(cfg, &ck)?;
        let splits = gen_dataset(cfg.train.data_seed, cfg.train.dataset_size, cfg.train.image_size)?;
        let scenes = splits.get(split.name())?;
        let (m, preds) = evaluate_scenes(&det, &store, scenes, cfg)?;
        let pred_recs: Vec<Record> =
            scenes.iter().zip(&preds).flat_map(|(s, p)| p.iter().map(|b| Record::from_box(s.index, b))).collect();
        let gt_recs: Vec<Record> =
            scenes.iter().flat_map(|s| s.boxes.iter().map(|b| Record::from_box(s.index, b))).collect();
        write_records(&dir.join(format!("predictions_{}.jsonl", split.name())), &pred_recs)?;
        write_records(&dir.join(format!("gt_{}.jsonl", split.name())), &gt_recs)?;
        (m, cfg.output.dir.clone())
    };
    let report = MetricsReport { run, split: split.name().into(), metrics };
    let path = dir.join(format!("metrics_{}.json", split.name()));
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run_gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| resolve_output("data"));
    let splits = gen_dataset(cfg.train.data_seed, cfg.train.dataset_size, cfg.train.image_size)?;
    for name in ["train", "test", "val"] {
        let dir = out.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut recs = Vec::new();
        for s in splits.get(name)? {
            write_pgm(&dir.join(format!("{:05}.pgm", s.index)), s.size, s.size, &s.image)?;
            recs.extend(s.boxes.iter().map(|b| Record::from_box(s.index, b)));
        }
        write_records(&dir.join("gt.jsonl"), &recs)?;
    }
    eprintln!("wrote {} scenes to {}", cfg.train.dataset_size, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { cfg, quiet } => {
            let cfg = cfg.load()?;
            let out = train(&cfg, !quiet)?;
            let report = MetricsReport { run: cfg.output.dir.clone(), split: "test".into(), metrics: out.test };
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("run directory {}", out.run_dir.display());
        }
        Command::Eval { cfg, checkpoint, split, predictions, gt } => {
            run_eval(&cfg.load()?, checkpoint, split, predictions, gt)?;
        }
        Command::Ablate { cfg, table, quiet } => {
            let base = cfg.load()?;
            let cases = match table {
                AblationTable::Toggles => toggle_cases(),
                AblationTable::Scans => scan_cases(),
                AblationTable::All => toggle_cases().into_iter().chain(scan_cases()).collect(),
            };
            let rows = ablate(&base, &cases, !quiet)?;
            let dir = write_ablation(&base, &rows)?;
            print!("{}", freqscan_harness::ablate::format_table(&rows));
            eprintln!("wrote {}", dir.join("ablation.json").display());
        }
        Command::Invariants { json } => {
            let cases = run_invariants();
            print!("{}", format_report(&cases));
            if let Some(p) = json {
                fs::write(&p, to_json(&cases)?).with_context(|| format!("writing {}", p.display()))?;
            }
            return Ok(cases.iter().all(|c| c.passed()));
        }
        Command::Erf { cfg, checkpoint, variants } => {
            let cfg = cfg.load()?;
            let ck = checkpoint.as_deref().map(load_checkpoint::<f64>).transpose()?;
            let variants = if variants.is_empty() { ERF_VARIANTS.to_vec() } else { variants };
            let dir = cfg.run_dir().join("erf");
            for v in variants {
                let grid = erf_map(&cfg, v, ck.as_ref())?;
                let (csv, pgm) = write_erf(&dir, &grid)?;
                println!("{}\t{}\t{}", v, csv.display(), pgm.display());
            }
        }
        Command::ScanReport { size, out } => {
            let csv = to_csv(&scan_report(size, size)?);
            match out {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::GenData { cfg, out } => run_gen_data(&cfg.load()?, out)?,
    }
    Ok(true)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    if path.is_dir() {
        bail!("{} is a directory", path.display());
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
