//! Synthetic sparse data and dense-vs-sparse timing.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::count_engine::{dense_counts, sparse_counts, sparse_counts_parallel, CountSet};
use crate::dtree_learner::{learn_tree_with, CountPath, CountSource, TreeConfig};
use crate::error::{Error, Result};
use crate::nb_cluster::{
    e_step_dense, e_step_sparse, e_step_sparse_parallel, init_model, m_step, relative_difference, ExpectedStats,
    NaiveBayesModel,
};
use crate::sparse_store::{DatasetView, Entry, SparseDataset, SparseRecord, VariableSchema};

/// Parameters of the synthetic generator. Every variable defaults to value 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub variables: usize,
    pub records: usize,
    pub cardinality: usize,
    /// Probability that a cell is non-default.
    pub density: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(variables: usize, records: usize, density: f64, seed: u64) -> Self {
        Self {
            variables,
            records,
            cardinality: 2,
            density,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables < 1 || self.records < 1 {
            return Err(Error::Config("need at least one variable and one record".into()));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return Err(Error::Config(format!("density {} outside [0, 1]", self.density)));
        }
        if self.cardinality < 2 {
            return Err(Error::Config("cardinality must be at least 2".into()));
        }
        Ok(())
    }
}

/// Each cell is independently non-default with probability `density`; a
/// non-default value is uniform over the `r - 1` alternatives.
pub fn generate(spec: &GenSpec) -> Result<SparseDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let schema = (0..spec.variables)
        .map(|i| VariableSchema::new(format!("x{i}"), spec.cardinality, 0))
        .collect();
    let records = (0..spec.records)
        .map(|_| {
            let mut entries = Vec::new();
            for var in 0..spec.variables {
                if rng.random::<f64>() < spec.density {
                    entries.push(Entry::new(var, rng.random_range(1..spec.cardinality)));
                }
            }
            SparseRecord::new(entries)
        })
        .collect();
    SparseDataset::new(schema, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Counts,
    EStep,
    Tree,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Counts => "counts",
            BenchMode::EStep => "estep",
            BenchMode::Tree => "tree",
        })
    }
}

impl std::str::FromStr for BenchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counts" => Ok(BenchMode::Counts),
            "estep" => Ok(BenchMode::EStep),
            "tree" => Ok(BenchMode::Tree),
            _ => Err(Error::Config(format!("unknown bench mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub repetitions: usize,
    /// Target variable for counts and tree modes.
    pub target: usize,
    pub clusters: usize,
    /// E-steps timed per repetition in estep mode.
    pub em_iterations: usize,
    pub seed: u64,
    /// Use the rayon variants of the sparse scans.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repetitions: 5,
            target: 0,
            clusters: 20,
            em_iterations: 3,
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub n: usize,
    pub m: usize,
    pub l: usize,
    /// `n·m/l` of the benchmarked dataset.
    pub ratio: f64,
    pub dense_ms: f64,
    pub sparse_ms: f64,
    pub repetitions: usize,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.dense_ms / self.sparse_ms
    }

    pub const CSV_HEADER: &'static str = "mode,n,m,l,ratio,dense_ms,sparse_ms,speedup";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
            self.mode,
            self.n,
            self.m,
            self.l,
            self.ratio,
            self.dense_ms,
            self.sparse_ms,
            self.speedup()
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

const ESTEP_TOLERANCE: f64 = 1e-9;

/// Times the dense and sparse variants of one operation on identical
/// inputs. Outputs are checked for agreement before any timing is reported.
pub fn bench(data: &SparseDataset, mode: BenchMode, options: &BenchOptions) -> Result<BenchReport> {
    if options.repetitions == 0 {
        return Err(Error::Config("repetitions must be positive".into()));
    }
    let mut dense = Vec::with_capacity(options.repetitions);
    let mut sparse = Vec::with_capacity(options.repetitions);
    for _ in 0..options.repetitions {
        let (d, s) = match mode {
            BenchMode::Counts => time_counts(data, options)?,
            BenchMode::EStep => time_estep(data, options)?,
            BenchMode::Tree => time_tree(data, options)?,
        };
        dense.push(d);
        sparse.push(s);
    }
    Ok(BenchReport {
        mode,
        n: data.n(),
        m: data.m(),
        l: data.l(),
        ratio: data.sparsity_ratio(),
        dense_ms: median(&mut dense),
        sparse_ms: median(&mut sparse),
        repetitions: options.repetitions,
    })
}

fn time_counts(data: &SparseDataset, options: &BenchOptions) -> Result<(f64, f64)> {
    let view = DatasetView::full(data);
    let start = Instant::now();
    let dense = dense_counts(&view, options.target)?;
    let dense_ms = ms_since(start);
    let start = Instant::now();
    let sparse = if options.parallel {
        sparse_counts_parallel(&view, options.target)?
    } else {
        sparse_counts(&view, options.target)?
    };
    let sparse_ms = ms_since(start);
    if dense != sparse {
        return Err(Error::Mismatch(format!("counts for target {}", options.target)));
    }
    Ok((dense_ms, sparse_ms))
}

fn time_estep(data: &SparseDataset, options: &BenchOptions) -> Result<(f64, f64)> {
    let initial = init_model(data.schema(), options.clusters, options.seed)?;
    let run = |sparse: bool| -> Result<(f64, Vec<(ExpectedStats, f64)>)> {
        let mut model: NaiveBayesModel = initial.clone();
        let mut elapsed = 0.0;
        let mut outputs = Vec::with_capacity(options.em_iterations);
        for _ in 0..options.em_iterations {
            let start = Instant::now();
            let out = match (sparse, options.parallel) {
                (false, _) => e_step_dense(&model, data)?,
                (true, false) => e_step_sparse(&model, data)?,
                (true, true) => e_step_sparse_parallel(&model, data)?,
            };
            elapsed += ms_since(start);
            model = m_step(&out.0, 1.0)?;
            outputs.push(out);
        }
        Ok((elapsed, outputs))
    };
    let (dense_ms, dense_out) = run(false)?;
    let (sparse_ms, sparse_out) = run(true)?;
    for (it, ((ds, dll), (ss, sll))) in dense_out.iter().zip(&sparse_out).enumerate() {
        let stat_diff = ds.max_relative_difference(ss);
        let ll_diff = relative_difference(*dll, *sll);
        if stat_diff > ESTEP_TOLERANCE || ll_diff > ESTEP_TOLERANCE {
            return Err(Error::Mismatch(format!(
                "E-step {it}: statistics differ by {stat_diff:e}, log-likelihood by {ll_diff:e}"
            )));
        }
    }
    Ok((dense_ms, sparse_ms))
}

/// Count source that accumulates time spent extracting counts.
struct Timed {
    path: CountPath,
    parallel: bool,
    elapsed_ms: f64,
}

impl CountSource for Timed {
    fn counts(&mut self, view: &DatasetView<'_>, target: usize) -> Result<CountSet> {
        let start = Instant::now();
        let out = match (self.path, self.parallel) {
            (CountPath::Sparse, true) => sparse_counts_parallel(view, target),
            _ => self.path.counts(view, target),
        };
        self.elapsed_ms += ms_since(start);
        out
    }
}

fn time_tree(data: &SparseDataset, options: &BenchOptions) -> Result<(f64, f64)> {
    let config = TreeConfig::default();
    let mut dense = Timed {
        path: CountPath::Dense,
        parallel: false,
        elapsed_ms: 0.0,
    };
    let mut sparse = Timed {
        path: CountPath::Sparse,
        parallel: options.parallel,
        elapsed_ms: 0.0,
    };
    let dense_tree = learn_tree_with(data, options.target, &config, &mut dense)?;
    let sparse_tree = learn_tree_with(data, options.target, &config, &mut sparse)?;
    if dense_tree != sparse_tree {
        return Err(Error::Mismatch(format!("trees for target {}", options.target)));
    }
    Ok((dense.elapsed_ms, sparse.elapsed_ms))
}
