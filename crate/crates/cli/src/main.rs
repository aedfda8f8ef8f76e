use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sparselearn::bench::{bench, generate, BenchMode, BenchOptions, BenchReport, GenSpec};
use sparselearn::count_engine::{all_pairs_counts, dense_counts, sparse_counts};
use sparselearn::dtree_learner::{learn_tree, write_predictions_csv, TreeConfig};
use sparselearn::nb_cluster::{assign_clusters, run_em, write_assignments_csv, EStepMode, EmConfig};
use sparselearn::sparse_store::ingest_dense;
use sparselearn::{DatasetView, DefaultPolicy, DenseTable, Error, SparseDataset};

#[derive(Parser)]
#[command(name = "sparselearn", version, about = "Counts, clustering and trees over sparse discrete data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Defaults {
    Auto,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dense,
    Sparse,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Counts,
    Estep,
    Tree,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a dense CSV table of value indices into the sparse format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// First line holds variable names.
        #[arg(long)]
        header: bool,
        #[arg(long, value_enum, default_value = "auto")]
        defaults: Defaults,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic sparse dataset.
    Gen {
        #[arg(long)]
        vars: usize,
        #[arg(long)]
        records: usize,
        #[arg(long)]
        density: f64,
        #[arg(long, default_value_t = 2)]
        card: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one-way and two-way counts as CSV.
    Counts {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long, value_enum, default_value = "sparse")]
        mode: Mode,
        /// Print two-way counts for every variable pair instead.
        #[arg(long)]
        all_pairs: bool,
    },
    /// Naive-Bayes EM clustering; prints the iteration trace as CSV.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clusters: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "sparse")]
        mode: Mode,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 1.0)]
        prior: f64,
        #[arg(long)]
        model_out: Option<PathBuf>,
        #[arg(long)]
        assign_out: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Learn a decision tree for a target variable; prints the tree.
    Tree {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 1.0)]
        prior: f64,
        #[arg(long, default_value_t = 1)]
        min_leaf: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Time dense and sparse variants on the same dataset.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: BenchKind,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Use the multi-threaded sparse scans.
        #[arg(long)]
        parallel: bool,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(command: Command) -> Result<(), Error> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match command {
        Command::Ingest {
            input,
            header,
            defaults,
            out: path,
        } => {
            let table = DenseTable::read_csv(BufReader::new(File::open(input)?), header)?;
            let policy = match defaults {
                Defaults::Auto => DefaultPolicy::MostFrequent,
                Defaults::Zero => DefaultPolicy::Zero,
            };
            let ds = ingest_dense(&table, None, &policy)?;
            ds.save(&path)?;
            eprintln!("n = {}, m = {}, l = {}", ds.n(), ds.m(), ds.l());
        }
        Command::Gen {
            vars,
            records,
            density,
            card,
            seed,
            out: path,
        } => {
            let spec = GenSpec {
                variables: vars,
                records,
                cardinality: card,
                density,
                seed,
            };
            let ds = generate(&spec)?;
            ds.save(&path)?;
            eprintln!("n = {}, m = {}, l = {}", ds.n(), ds.m(), ds.l());
        }
        Command::Counts {
            data,
            target,
            mode,
            all_pairs,
        } => {
            let ds = SparseDataset::load(data)?;
            let view = DatasetView::full(&ds);
            if all_pairs {
                all_pairs_counts(&view)?.write_csv(&ds, &mut out)?;
            } else {
                let counts = match mode {
                    Mode::Dense => dense_counts(&view, target)?,
                    Mode::Sparse => sparse_counts(&view, target)?,
                };
                counts.write_csv(&ds, &mut out)?;
            }
        }
        Command::Cluster {
            data,
            clusters,
            seed,
            mode,
            max_iters,
            tol,
            prior,
            model_out,
            assign_out,
            trace_out,
        } => {
            let ds = SparseDataset::load(data)?;
            let config = EmConfig {
                cluster_count: clusters,
                max_iterations: max_iters,
                tolerance: tol,
                seed,
                prior_strength: prior,
                estep_mode: match mode {
                    Mode::Dense => EStepMode::Dense,
                    Mode::Sparse => EStepMode::Sparse,
                },
            };
            let result = run_em(&ds, &config)?;
            result.write_trace_csv(&mut out)?;
            if let Some(path) = trace_out {
                result.write_trace_csv(create(&path)?)?;
            }
            if let Some(path) = model_out {
                result.model.write_to(create(&path)?)?;
            }
            if let Some(path) = assign_out {
                let posteriors = assign_clusters(&result.model, &ds)?;
                write_assignments_csv(&posteriors, create(&path)?)?;
            }
        }
        Command::Tree {
            data,
            target,
            prior,
            min_leaf,
            out: path,
            predictions,
        } => {
            let ds = SparseDataset::load(data)?;
            let config = TreeConfig {
                pseudo_count: prior,
                min_leaf_records: min_leaf,
                max_depth: None,
            };
            let tree = learn_tree(&ds, target, &config)?;
            match path {
                Some(p) => tree.write_to(create(&p)?)?,
                None => tree.write_to(&mut out)?,
            }
            if let Some(p) = predictions {
                write_predictions_csv(&tree, &ds, create(&p)?)?;
            }
        }
        Command::Bench {
            data,
            mode,
            repeat,
            out: path,
            target,
            parallel,
        } => {
            let ds = SparseDataset::load(data)?;
            let mode = match mode {
                BenchKind::Counts => BenchMode::Counts,
                BenchKind::Estep => BenchMode::EStep,
                BenchKind::Tree => BenchMode::Tree,
            };
            let options = BenchOptions {
                repetitions: repeat,
                target,
                parallel,
                ..BenchOptions::default()
            };
            let report = bench(&ds, mode, &options)?;
            report.write_csv(&mut out)?;
            if let Some(p) = path {
                let mut w = create(&p)?;
                writeln!(w, "{}", BenchReport::CSV_HEADER)?;
                writeln!(w, "{}", report.csv_row())?;
                w.flush()?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::IndexOutOfRange { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
