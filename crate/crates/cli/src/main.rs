use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mtgrow::experiment::{
    self, AblationAxis, EvalTarget, ExperimentManifest, GrowPreset, Stamp, Workspace, OUTPUT_ROOT_ENV,
};
use mtgrow::metrics::EvalReport;
use mtgrow::Error;

#[derive(Parser)]
#[command(name = "mtgrow", version, about = "Grow a translation model to new languages")]
struct Cli {
    /// Experiment manifest (JSON). The built-in desk manifest is used when omitted.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Override a manifest leaf, e.g. `--set continual.train.total_steps=500`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,

    /// Directory that the manifest's `output_dir` is relative to.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = ".")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Plan {
    Manifest,
    Vocab,
    Wide,
    Deep,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Seed,
    Grown,
    Continual,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    RandomInitAll,
    RandomInitNew,
    NoUpsampling,
    NoLrScaling,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective manifest.
    Manifest,
    /// Generate synthetic corpora and both vocabularies.
    GenData,
    /// Train the seed model on the old directions.
    TrainSeed,
    /// Apply checkpoint surgery to the seed model.
    Grow {
        #[arg(long, value_enum, default_value = "manifest")]
        plan: Plan,
    },
    /// Train the grown model on old and new directions.
    TrainContinual,
    /// Score a checkpoint on the held-out test sets.
    Evaluate {
        #[arg(long, value_enum, default_value = "continual")]
        target: Target,
    },
    /// Embedding-substitution forgetting probe.
    ProbeForget,
    /// Frobenius drift of widened feed-forward blocks.
    AnalyzeNorms,
    /// Fisher information of the grown model on old-direction dev data.
    Fisher,
    /// Print a stored evaluation, or compare two with `--compare`.
    Report {
        #[arg(long, num_args = 2, value_names = ["BASELINE", "CANDIDATE"])]
        compare: Option<Vec<PathBuf>>,
        #[arg(long, value_enum, default_value = "continual")]
        target: Target,
    },
    /// Write the manifest with one recipe element switched off.
    Ablation {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Manifest { .. } => 3,
        Error::MissingArtifact { .. } => 4,
        Error::ProvenanceMismatch(_) => 5,
        Error::BadMagic(_) | Error::VersionMismatch { .. } | Error::Truncated { .. } | Error::IndexMismatch { .. } => 6,
        Error::Io { .. } => 7,
        Error::NonFiniteGradient { .. } => 8,
        Error::Json(_) => 9,
        _ => 1,
    }
}

fn load_manifest(cli: &Cli) -> mtgrow::Result<ExperimentManifest> {
    let mut m = match &cli.manifest {
        Some(p) => ExperimentManifest::load(p)?,
        None => ExperimentManifest::default(),
    };
    for o in &cli.overrides {
        let (path, value) = o.split_once('=').ok_or_else(|| Error::Manifest {
            path: o.clone(),
            message: "override must look like PATH=VALUE".into(),
        })?;
        m = m.with_override(path, value)?;
    }
    Ok(m)
}

fn read_report(path: &Path) -> mtgrow::Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EvalReport::from_json(&text)
}

fn print_stamp(stamp: &Stamp, ws: &Workspace) {
    for path in stamp.outputs.keys() {
        println!("{}", ws.dir.join(path).display());
    }
}

fn run(cli: &Cli) -> mtgrow::Result<()> {
    let manifest = load_manifest(cli)?;
    if let Command::Ablation { axis, out } = &cli.command {
        let axis = match axis {
            Axis::RandomInitAll => AblationAxis::RandomInitAll,
            Axis::RandomInitNew => AblationAxis::RandomInitNew,
            Axis::NoUpsampling => AblationAxis::NoUpsampling,
            Axis::NoLrScaling => AblationAxis::NoLrScaling,
        };
        let derived = experiment::ablation(&manifest, axis)?.to_json()?;
        match out {
            Some(p) => std::fs::write(p, derived).map_err(|source| Error::Io {
                path: p.clone(),
                source,
            })?,
            None => println!("{derived}"),
        }
        return Ok(());
    }
    if let Command::Report {
        compare: Some(paths), ..
    } = &cli.command
    {
        let base = read_report(&paths[0])?;
        let cand = read_report(&paths[1])?;
        let cmp = experiment::compare(&base, &cand);
        print!("{}", cmp.to_table(&base.checkpoint, &cand.checkpoint));
        println!("{}", serde_json::to_string_pretty(&cmp)?);
        return Ok(());
    }
    let ws = Workspace::new(manifest, &cli.output_root)?;
    let target = |t: &Target| match t {
        Target::Seed => EvalTarget::Seed,
        Target::Grown => EvalTarget::Grown,
        Target::Continual => EvalTarget::Continual,
    };
    let stamp = match &cli.command {
        Command::Manifest => {
            println!("{}", ws.manifest.to_json()?);
            println!("manifest hash {}", ws.manifest_hash());
            return Ok(());
        }
        Command::GenData => ws.gen_data()?,
        Command::TrainSeed => ws.train_seed()?,
        Command::Grow { plan } => ws.grow(match plan {
            Plan::Manifest => GrowPreset::Manifest,
            Plan::Vocab => GrowPreset::VocabOnly,
            Plan::Wide => GrowPreset::Wide,
            Plan::Deep => GrowPreset::Deep,
        })?,
        Command::TrainContinual => ws.train_continual()?,
        Command::Evaluate { target: t } => ws.evaluate(target(t))?,
        Command::ProbeForget => ws.probe_forget()?,
        Command::AnalyzeNorms => ws.analyze_norms()?,
        Command::Fisher => ws.fisher()?,
        Command::Report { target: t, .. } => {
            let report = ws.load_eval(target(t))?;
            print!("{}", report.to_csv());
            return Ok(());
        }
        Command::Ablation { .. } => unreachable!("handled above"),
    };
    print_stamp(&stamp, &ws);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
