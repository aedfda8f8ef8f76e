//! Naive-Bayes clustering by EM.
//!
//! The model has a hidden cluster variable `C` with prior `θ_C` and, for
//! every observed variable, a table `θ_{X_i | C}`. Two E-steps are provided:
//!
//! * [`e_step_dense`] evaluates `θ_C · Π_i θ(x_i | c)` over every variable of
//!   every record.
//! * [`e_step_sparse`] starts each record from the all-defaults joint
//!   `θ_C · Π_i θ(d_i | c)` and multiplies in one correction
//!   `θ(x_i | c) / θ(d_i | c)` per stored value. Expected two-way counts are
//!   accumulated only for stored values; the default-value column is derived
//!   afterwards from the cluster totals.
//!
//! All products are carried in the log domain and normalized with a max shift.

use std::fmt;
use std::io::{BufRead, Write};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::count_engine::derive_default_column;
use crate::error::{Error, Result};
use crate::sparse_store::{SparseDataset, SparseRecord, VariableSchema};

const SUM_TOLERANCE: f64 = 1e-9;
/// Relative slack for round-off when back-deriving default-value expected counts.
const DERIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveBayesModel {
    prior: Vec<f64>,
    /// One `r_C x r_i` table per variable.
    conditionals: Vec<Array2<f64>>,
}

impl NaiveBayesModel {
    pub fn new(prior: Vec<f64>, conditionals: Vec<Array2<f64>>) -> Result<Self> {
        let k = prior.len();
        if k == 0 {
            return Err(Error::Config("model needs at least one cluster".into()));
        }
        check_distribution(&prior, "cluster prior")?;
        for (i, table) in conditionals.iter().enumerate() {
            if table.nrows() != k || table.ncols() == 0 {
                return Err(Error::Config(format!(
                    "conditional table {i} has shape {:?}, expected ({k}, r_{i})",
                    table.dim()
                )));
            }
            for (c, row) in table.outer_iter().enumerate() {
                check_distribution(&row.to_vec(), &format!("variable {i} cluster {c}"))?;
            }
        }
        Ok(Self {
            prior,
            conditionals,
        })
    }

    pub fn cluster_count(&self) -> usize {
        self.prior.len()
    }

    pub fn variable_count(&self) -> usize {
        self.conditionals.len()
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn conditional(&self, var: usize) -> &Array2<f64> {
        &self.conditionals[var]
    }

    pub fn conditionals(&self) -> &[Array2<f64>] {
        &self.conditionals
    }

    fn check_shape(&self, data: &SparseDataset) -> Result<()> {
        let ok = self.conditionals.len() == data.n()
            && self
                .conditionals
                .iter()
                .zip(data.schema())
                .all(|(t, v)| t.ncols() == v.cardinality);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("model does not match the dataset schema".into()))
        }
    }

    /// `s · Σ log θ` over every parameter; zero when `s == 0`.
    pub fn log_prior_penalty(&self, prior_strength: f64) -> f64 {
        if prior_strength == 0.0 {
            return 0.0;
        }
        let logs: f64 = self.prior.iter().map(|p| p.ln()).sum::<f64>()
            + self
                .conditionals
                .iter()
                .flat_map(|t| t.iter())
                .map(|p| p.ln())
                .sum::<f64>();
        prior_strength * logs
    }

    /// Writes `NBMODEL 1`, `r_C`, the prior, then one line per
    /// (variable, cluster) row, with 17 significant digits.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "NBMODEL 1")?;
        writeln!(w, "{}", self.cluster_count())?;
        writeln!(w, "{}", join_reals(self.prior.iter()))?;
        for table in &self.conditionals {
            for row in table.outer_iter() {
                writeln!(w, "{}", join_reals(row.iter()))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
        let fmt_err = |line: usize, reason: String| Error::Format { line, reason };
        if lines.first().map(String::as_str) != Some("NBMODEL 1") {
            return Err(fmt_err(1, "expected `NBMODEL 1`".into()));
        }
        let k: usize = lines
            .get(1)
            .and_then(|l| l.trim().parse().ok())
            .filter(|&k| k >= 1)
            .ok_or_else(|| fmt_err(2, "expected a positive cluster count".into()))?;
        let prior = parse_reals(lines.get(2).map(String::as_str).unwrap_or(""), 3)?;
        if prior.len() != k {
            return Err(fmt_err(3, format!("prior has {} entries, expected {k}", prior.len())));
        }
        let rows = &lines[3.min(lines.len())..];
        if rows.len() % k != 0 {
            return Err(fmt_err(
                lines.len(),
                format!("{} conditional rows is not a multiple of {k}", rows.len()),
            ));
        }
        let mut conditionals = Vec::with_capacity(rows.len() / k);
        for (i, block) in rows.chunks(k).enumerate() {
            let mut data = Vec::new();
            let mut width = None;
            for (c, line) in block.iter().enumerate() {
                let no = 4 + i * k + c;
                let row = parse_reals(line, no)?;
                if *width.get_or_insert(row.len()) != row.len() {
                    return Err(fmt_err(no, "rows of one variable differ in length".into()));
                }
                data.extend(row);
            }
            let width = width.unwrap_or(0);
            conditionals.push(Array2::from_shape_vec((k, width), data).expect("shape checked"));
        }
        Self::new(prior, conditionals)
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Config(format!("{what}: entries must be finite and non-negative")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Config(format!("{what}: sums to {s}, not 1")));
    }
    Ok(())
}

fn join_reals<'a>(xs: impl Iterator<Item = &'a f64>) -> String {
    xs.map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ")
}

fn parse_reals(line: &str, no: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Format {
                line: no,
                reason: format!("bad number {t:?}"),
            })
        })
        .collect()
}

/// Uniform prior and Dirichlet(1) conditional rows from a seeded generator.
pub fn init_model(schema: &[VariableSchema], cluster_count: usize, seed: u64) -> Result<NaiveBayesModel> {
    if cluster_count == 0 {
        return Err(Error::Config("cluster_count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prior = vec![1.0 / cluster_count as f64; cluster_count];
    let conditionals = schema
        .iter()
        .map(|v| {
            let mut table = Array2::zeros((cluster_count, v.cardinality));
            for mut row in table.outer_iter_mut() {
                for cell in row.iter_mut() {
                    // Dirichlet(1) = normalized Exp(1); reject exact zeros
                    *cell = loop {
                        let g: f64 = Exp1.sample(&mut rng);
                        if g > 0.0 {
                            break g;
                        }
                    };
                }
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            table
        })
        .collect();
    NaiveBayesModel::new(prior, conditionals)
}

/// Expected `SS(C)` and `SS(C, X_i)` from an E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedStats {
    pub ss_c: Vec<f64>,
    /// One `r_C x r_i` table per variable.
    pub ss_cx: Vec<Array2<f64>>,
}

impl ExpectedStats {
    pub fn record_count(&self) -> f64 {
        self.ss_c.iter().sum()
    }

    /// Largest relative difference between matching entries, using
    /// `|a - b| / max(|a|, |b|, 1)`.
    pub fn max_relative_difference(&self, other: &Self) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.ss_c.iter().zip(&other.ss_c) {
            worst = worst.max(relative_difference(*a, *b));
        }
        for (ta, tb) in self.ss_cx.iter().zip(&other.ss_cx) {
            for (a, b) in ta.iter().zip(tb.iter()) {
                worst = worst.max(relative_difference(*a, *b));
            }
        }
        if self.ss_c.len() != other.ss_c.len() || self.ss_cx.len() != other.ss_cx.len() {
            return f64::INFINITY;
        }
        worst
    }
}

pub fn relative_difference(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// `log θ_C[c] + Σ_i log θ(d_i | c)` for every cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultPosterior(pub Vec<f64>);

/// `log θ(x | c) - log θ(d_i | c)` for every variable, value and cluster.
/// Default-value rows hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionTable {
    clusters: usize,
    offsets: Vec<usize>,
    log_ratio: Vec<f64>,
}

impl CorrectionTable {
    /// Log correction of value `value` of `var` in cluster `c`.
    pub fn log_correction(&self, var: usize, value: usize, c: usize) -> f64 {
        self.log_ratio[(self.offsets[var] + value) * self.clusters + c]
    }

    #[inline]
    fn row(&self, var: usize, value: usize) -> &[f64] {
        let start = (self.offsets[var] + value) * self.clusters;
        &self.log_ratio[start..start + self.clusters]
    }
}

pub fn build_default_posterior(model: &NaiveBayesModel, defaults: &[usize]) -> Result<DefaultPosterior> {
    let mut out = Vec::with_capacity(model.cluster_count());
    for (c, &p) in model.prior.iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::ZeroParameter(format!("prior of cluster {c}")));
        }
        let mut acc = p.ln();
        for (i, (table, &d)) in model.conditionals.iter().zip(defaults).enumerate() {
            let q = table[[c, d]];
            if q <= 0.0 {
                return Err(Error::ZeroParameter(format!("variable {i} default value, cluster {c}")));
            }
            acc += q.ln();
        }
        out.push(acc);
    }
    Ok(DefaultPosterior(out))
}

pub fn build_correction_table(model: &NaiveBayesModel, defaults: &[usize]) -> Result<CorrectionTable> {
    let k = model.cluster_count();
    let mut offsets = Vec::with_capacity(model.variable_count());
    let mut total = 0;
    for t in &model.conditionals {
        offsets.push(total);
        total += t.ncols();
    }
    let mut log_ratio = vec![0.0; total * k];
    for (i, (table, &d)) in model.conditionals.iter().zip(defaults).enumerate() {
        for c in 0..k {
            let base = table[[c, d]];
            if base <= 0.0 {
                return Err(Error::ZeroParameter(format!("variable {i} default value, cluster {c}")));
            }
            let log_base = base.ln();
            for x in (0..table.ncols()).filter(|&x| x != d) {
                log_ratio[(offsets[i] + x) * k + c] = table[[c, x]].ln() - log_base;
            }
        }
    }
    Ok(CorrectionTable {
        clusters: k,
        offsets,
        log_ratio,
    })
}

/// Operation counters for the instrumented E-steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EStepWork {
    /// Per-cluster factor multiplications (log-domain additions) in the
    /// per-record posterior loop.
    pub multiplies: u64,
    /// Per-record normalizations (each costs `r_C` exponentials).
    pub normalizations: u64,
}

trait WorkTally {
    fn multiplies(&mut self, _n: u64) {}
    fn normalization(&mut self) {}
}

struct NoWork;
impl WorkTally for NoWork {}

impl WorkTally for EStepWork {
    fn multiplies(&mut self, n: u64) {
        self.multiplies += n;
    }
    fn normalization(&mut self) {
        self.normalizations += 1;
    }
}

/// Normalizes log joints in place into posteriors; returns `log Σ_c joint`.
#[inline]
fn normalize(log_joint: &mut [f64], record: usize) -> Result<f64> {
    let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::Underflow(record));
    }
    let mut sum = 0.0;
    for v in log_joint.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in log_joint.iter_mut() {
        *v *= inv;
    }
    Ok(max + sum.ln())
}

/// Flat per-(variable, value, cluster) layout shared by both E-steps.
struct FlatLayout {
    k: usize,
    offsets: Vec<usize>,
    cards: Vec<usize>,
    width: usize,
}

impl FlatLayout {
    fn new(data: &SparseDataset, k: usize) -> Self {
        let cards = data.cardinalities();
        let mut offsets = Vec::with_capacity(cards.len());
        let mut width = 0;
        for &r in &cards {
            offsets.push(width);
            width += r;
        }
        Self {
            k,
            offsets,
            cards,
            width,
        }
    }

    #[inline]
    fn slot(&self, var: usize, value: usize) -> usize {
        (self.offsets[var] + value) * self.k
    }

    fn unpack(&self, flat: &[f64]) -> Vec<Array2<f64>> {
        let k = self.k;
        self.cards
            .iter()
            .zip(&self.offsets)
            .map(|(&r, &off)| Array2::from_shape_fn((k, r), |(c, x)| flat[(off + x) * k + c]))
            .collect()
    }
}

#[derive(Clone)]
struct Accum {
    ss_c: Vec<f64>,
    flat: Vec<f64>,
    log_likelihood: f64,
}

impl Accum {
    fn zeros(layout: &FlatLayout) -> Self {
        Self {
            ss_c: vec![0.0; layout.k],
            flat: vec![0.0; layout.width * layout.k],
            log_likelihood: 0.0,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.ss_c.iter_mut().zip(&other.ss_c).for_each(|(a, b)| *a += b);
        self.flat.iter_mut().zip(&other.flat).for_each(|(a, b)| *a += b);
        self.log_likelihood += other.log_likelihood;
        self
    }
}

fn e_step_dense_tallied<T: WorkTally>(
    model: &NaiveBayesModel,
    data: &SparseDataset,
    tally: &mut T,
) -> Result<(ExpectedStats, f64)> {
    model.check_shape(data)?;
    let k = model.cluster_count();
    let layout = FlatLayout::new(data, k);
    let mut log_theta = vec![0.0; layout.width * k];
    for (i, table) in model.conditionals.iter().enumerate() {
        for ((c, x), &p) in table.indexed_iter() {
            log_theta[layout.slot(i, x) + c] = p.ln();
        }
    }
    let log_prior: Vec<f64> = model.prior.iter().map(|p| p.ln()).collect();

    let mut acc = Accum::zeros(&layout);
    let mut row = data.defaults();
    let mut joint = vec![0.0; k];
    for (j, rec) in data.records().iter().enumerate() {
        data.densify_into(rec, &mut row);
        joint.copy_from_slice(&log_prior);
        tally.multiplies(k as u64);
        for (i, &x) in row.iter().enumerate() {
            let s = layout.slot(i, x);
            for (jc, lt) in joint.iter_mut().zip(&log_theta[s..s + k]) {
                *jc += lt;
            }
            tally.multiplies(k as u64);
        }
        tally.normalization();
        acc.log_likelihood += normalize(&mut joint, j)?;
        for (a, p) in acc.ss_c.iter_mut().zip(&joint) {
            *a += p;
        }
        for (i, &x) in row.iter().enumerate() {
            let s = layout.slot(i, x);
            for (a, p) in acc.flat[s..s + k].iter_mut().zip(&joint) {
                *a += p;
            }
        }
    }
    let stats = ExpectedStats {
        ss_c: acc.ss_c,
        ss_cx: layout.unpack(&acc.flat),
    };
    Ok((stats, acc.log_likelihood))
}

/// Dense-view E-step: every variable of every record enters the posterior.
pub fn e_step_dense(model: &NaiveBayesModel, data: &SparseDataset) -> Result<(ExpectedStats, f64)> {
    e_step_dense_tallied(model, data, &mut NoWork)
}

pub fn e_step_dense_instrumented(
    model: &NaiveBayesModel,
    data: &SparseDataset,
) -> Result<(ExpectedStats, f64, EStepWork)> {
    let mut work = EStepWork::default();
    let (stats, ll) = e_step_dense_tallied(model, data, &mut work)?;
    Ok((stats, ll, work))
}

struct SparsePass {
    layout: FlatLayout,
    default_posterior: DefaultPosterior,
    corrections: CorrectionTable,
}

impl SparsePass {
    fn prepare(model: &NaiveBayesModel, data: &SparseDataset) -> Result<Self> {
        model.check_shape(data)?;
        let defaults = data.defaults();
        Ok(Self {
            layout: FlatLayout::new(data, model.cluster_count()),
            default_posterior: build_default_posterior(model, &defaults)?,
            corrections: build_correction_table(model, &defaults)?,
        })
    }

    /// Posterior of one record into `joint`; returns the record's log-likelihood.
    #[inline]
    fn posterior<T: WorkTally>(&self, rec: &SparseRecord, j: usize, joint: &mut [f64], tally: &mut T) -> Result<f64> {
        joint.copy_from_slice(&self.default_posterior.0);
        for e in rec {
            for (jc, l) in joint.iter_mut().zip(self.corrections.row(e.var, e.value)) {
                *jc += l;
            }
            tally.multiplies(self.layout.k as u64);
        }
        tally.normalization();
        normalize(joint, j)
    }

    fn scan<'r, T: WorkTally>(
        &self,
        acc: &mut Accum,
        records: impl Iterator<Item = (usize, &'r SparseRecord)>,
        tally: &mut T,
    ) -> Result<()> {
        let k = self.layout.k;
        let mut joint = vec![0.0; k];
        for (j, rec) in records {
            acc.log_likelihood += self.posterior(rec, j, &mut joint, tally)?;
            for (a, p) in acc.ss_c.iter_mut().zip(&joint) {
                *a += p;
            }
            for e in rec {
                let s = self.layout.slot(e.var, e.value);
                for (a, p) in acc.flat[s..s + k].iter_mut().zip(&joint) {
                    *a += p;
                }
            }
        }
        Ok(())
    }

    fn finish(&self, data: &SparseDataset, acc: Accum) -> Result<(ExpectedStats, f64)> {
        let mut ss_cx = self.layout.unpack(&acc.flat);
        for (i, table) in ss_cx.iter_mut().enumerate() {
            // C has no default state, so every cluster row is derived
            derive_default_column(table, &acc.ss_c, data.default_value(i), None, DERIVE_TOLERANCE, i)?;
        }
        Ok((
            ExpectedStats {
                ss_c: acc.ss_c,
                ss_cx,
            },
            acc.log_likelihood,
        ))
    }
}

fn e_step_sparse_tallied<T: WorkTally>(
    model: &NaiveBayesModel,
    data: &SparseDataset,
    tally: &mut T,
) -> Result<(ExpectedStats, f64)> {
    let pass = SparsePass::prepare(model, data)?;
    let mut acc = Accum::zeros(&pass.layout);
    pass.scan(&mut acc, data.records().iter().enumerate(), tally)?;
    pass.finish(data, acc)
}

/// Sparse E-step: work per record proportional to its stored values.
pub fn e_step_sparse(model: &NaiveBayesModel, data: &SparseDataset) -> Result<(ExpectedStats, f64)> {
    e_step_sparse_tallied(model, data, &mut NoWork)
}

pub fn e_step_sparse_instrumented(
    model: &NaiveBayesModel,
    data: &SparseDataset,
) -> Result<(ExpectedStats, f64, EStepWork)> {
    let mut work = EStepWork::default();
    let (stats, ll) = e_step_sparse_tallied(model, data, &mut work)?;
    Ok((stats, ll, work))
}

/// Sparse E-step with records split across the rayon pool.
pub fn e_step_sparse_parallel(model: &NaiveBayesModel, data: &SparseDataset) -> Result<(ExpectedStats, f64)> {
    let pass = SparsePass::prepare(model, data)?;
    let records = data.records();
    let chunk = (records.len() / rayon::current_num_threads().max(1)).max(256);
    let acc = records
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, recs)| {
            let mut acc = Accum::zeros(&pass.layout);
            let base = ci * chunk;
            pass.scan(&mut acc, recs.iter().enumerate().map(|(o, r)| (base + o, r)), &mut NoWork)?;
            Ok::<_, Error>(acc)
        })
        .try_reduce(|| Accum::zeros(&pass.layout), |a, b| Ok(a.merge(b)))?;
    pass.finish(data, acc)
}

/// Normalized cluster posteriors for every record, via the sparse path.
pub fn assign_clusters(model: &NaiveBayesModel, data: &SparseDataset) -> Result<Vec<Vec<f64>>> {
    let pass = SparsePass::prepare(model, data)?;
    data.records()
        .iter()
        .enumerate()
        .map(|(j, rec)| {
            let mut joint = vec![0.0; model.cluster_count()];
            pass.posterior(rec, j, &mut joint, &mut NoWork)?;
            Ok(joint)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EStepMode {
    Dense,
    #[default]
    Sparse,
}

impl fmt::Display for EStepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EStepMode::Dense => "dense",
            EStepMode::Sparse => "sparse",
        })
    }
}

impl std::str::FromStr for EStepMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(EStepMode::Dense),
            "sparse" => Ok(EStepMode::Sparse),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

pub fn e_step(model: &NaiveBayesModel, data: &SparseDataset, mode: EStepMode) -> Result<(ExpectedStats, f64)> {
    match mode {
        EStepMode::Dense => e_step_dense(model, data),
        EStepMode::Sparse => e_step_sparse(model, data),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub cluster_count: usize,
    pub max_iterations: usize,
    /// Relative change of the objective below which EM stops.
    pub tolerance: f64,
    pub seed: u64,
    /// Dirichlet pseudo-count added to every cell; 0 gives maximum likelihood.
    pub prior_strength: f64,
    pub estep_mode: EStepMode,
}

impl EmConfig {
    pub fn new(cluster_count: usize) -> Self {
        Self {
            cluster_count,
            max_iterations: 200,
            tolerance: 1e-5,
            seed: 0,
            prior_strength: 1.0,
            estep_mode: EStepMode::Sparse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_count < 1 {
            return Err(Error::Config("cluster_count must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if !(self.prior_strength >= 0.0) || !self.prior_strength.is_finite() {
            return Err(Error::Config("prior_strength must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// ML (`s = 0`) or MAP (`s > 0`) parameter update.
pub fn m_step(stats: &ExpectedStats, prior_strength: f64) -> Result<NaiveBayesModel> {
    let s = prior_strength;
    let k = stats.ss_c.len();
    let m = stats.record_count();
    if !(m > 0.0) {
        return Err(Error::Config("M-step needs a positive record count".into()));
    }
    let prior: Vec<f64> = stats
        .ss_c
        .iter()
        .map(|&n| (n + s) / (m + s * k as f64))
        .collect();
    let mut conditionals = Vec::with_capacity(stats.ss_cx.len());
    for table in &stats.ss_cx {
        let r = table.ncols() as f64;
        let mut out = Array2::zeros(table.dim());
        for c in 0..k {
            let denom = stats.ss_c[c] + s * r;
            if s == 0.0 && stats.ss_c[c] <= 0.0 {
                return Err(Error::EmptyCluster(c));
            }
            for x in 0..table.ncols() {
                out[[c, x]] = (table[[c, x]] + s) / denom;
            }
        }
        conditionals.push(out);
    }
    NaiveBayesModel::new(prior, conditionals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub log_likelihood: f64,
    /// Log-likelihood plus `s · Σ log θ`, the quantity EM increases under MAP.
    pub objective: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub model: NaiveBayesModel,
    pub trace: Vec<TraceEntry>,
    /// Statistics from the last E-step; `None` if no iteration ran.
    pub stats: Option<ExpectedStats>,
}

impl EmRun {
    pub fn final_log_likelihood(&self) -> Option<f64> {
        self.trace.last().map(|t| t.log_likelihood)
    }

    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,log_likelihood,elapsed_ms")?;
        for t in &self.trace {
            writeln!(w, "{},{:.17e},{:.3}", t.iteration, t.log_likelihood, t.elapsed_ms)?;
        }
        Ok(())
    }
}

/// Alternates E- and M-steps from a seeded initial model until the relative
/// change of the objective falls below the tolerance.
pub fn run_em(data: &SparseDataset, config: &EmConfig) -> Result<EmRun> {
    config.validate()?;
    let start = Instant::now();
    let mut model = init_model(data.schema(), config.cluster_count, config.seed)?;
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut stats = None;
    for iteration in 0..config.max_iterations {
        let (st, ll) = e_step(&model, data, config.estep_mode)?;
        let objective = ll + model.log_prior_penalty(config.prior_strength);
        let converged = trace
            .last()
            .is_some_and(|prev| (objective - prev.objective).abs() <= config.tolerance * objective.abs());
        trace.push(TraceEntry {
            iteration,
            log_likelihood: ll,
            objective,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        model = m_step(&st, config.prior_strength)?;
        stats = Some(st);
        if converged {
            break;
        }
    }
    Ok(EmRun { model, trace, stats })
}

pub fn write_assignments_csv<W: Write>(posteriors: &[Vec<f64>], mut w: W) -> Result<()> {
    let k = posteriors.first().map_or(0, Vec::len);
    write!(w, "record")?;
    for c in 0..k {
        write!(w, ",c{c}")?;
    }
    writeln!(w)?;
    for (j, p) in posteriors.iter().enumerate() {
        write!(w, "{j}")?;
        for x in p {
            write!(w, ",{x:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::count_engine::sparse_counts;
    use crate::sparse_store::tests::figure1;
    use crate::sparse_store::{DatasetView, Entry};
    use ndarray::array;

    fn binary_schema(n: usize) -> Vec<VariableSchema> {
        (0..n).map(|i| VariableSchema::new(format!("v{i}"), 2, 0)).collect()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        relative_difference(a, b) <= tol
    }

    #[test]
    fn init_single_cluster_and_determinism() {
        let ds = figure1();
        let m = init_model(ds.schema(), 1, 3).unwrap();
        assert_eq!(m.prior(), &[1.0]);
        assert_eq!(init_model(ds.schema(), 4, 9).unwrap(), init_model(ds.schema(), 4, 9).unwrap());
        let a = init_model(ds.schema(), 2, 1).unwrap();
        let b = init_model(ds.schema(), 2, 2).unwrap();
        assert!(a.conditionals().iter().zip(b.conditionals()).any(|(x, y)| x != y));
        assert!(a.conditionals().iter().all(|t| t.iter().all(|&p| p > 0.0)));
    }

    #[test]
    fn default_posterior_direct_product() {
        let model = NaiveBayesModel::new(
            vec![0.5, 0.5],
            vec![array![[0.8, 0.2], [0.8, 0.2]]; 3],
        )
        .unwrap();
        let dp = build_default_posterior(&model, &[0, 0, 0]).unwrap();
        for v in dp.0 {
            assert!(close(v.exp(), 0.256, 1e-15));
        }
        let empty = NaiveBayesModel::new(vec![0.3, 0.7], vec![]).unwrap();
        let dp = build_default_posterior(&empty, &[]).unwrap();
        assert!(close(dp.0[0].exp(), 0.3, 1e-15) && close(dp.0[1].exp(), 0.7, 1e-15));
    }

    #[test]
    fn correction_terms() {
        let model = NaiveBayesModel::new(
            vec![0.5, 0.5],
            vec![array![[0.8, 0.1, 0.1], [0.5, 0.5, 0.0]]],
        )
        .unwrap();
        let t = build_correction_table(&model, &[0]).unwrap();
        assert!(close(t.log_correction(0, 1, 0).exp(), 0.125, 1e-15));
        assert!(close(t.log_correction(0, 1, 1).exp(), 1.0, 1e-15));
        assert_eq!(t.log_correction(0, 2, 1), f64::NEG_INFINITY);
        assert_eq!(t.log_correction(0, 0, 0), 0.0);
        // zero default-value parameter
        assert!(matches!(build_correction_table(&model, &[2]), Err(Error::ZeroParameter(_))));
        assert!(build_default_posterior(&model, &[2]).is_err());
    }

    #[test]
    fn single_cluster_estep_gives_counts() {
        let ds = figure1();
        let model = init_model(ds.schema(), 1, 0).unwrap();
        let counts = sparse_counts(&DatasetView::full(&ds), 0).unwrap();
        for (stats, _) in [e_step_dense(&model, &ds).unwrap(), e_step_sparse(&model, &ds).unwrap()] {
            assert_eq!(stats.ss_c, vec![7.0]);
            for i in 0..3 {
                let row: Vec<f64> = stats.ss_cx[i].row(0).to_vec();
                for (a, b) in row.iter().zip(counts.one_way.var(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_rows_return_the_prior() {
        let ds = figure1();
        let rows = |r: [f64; 3]| Array2::from_shape_fn((2, 3), |(_, x)| r[x]);
        let model = NaiveBayesModel::new(
            vec![0.25, 0.75],
            vec![rows([0.2, 0.5, 0.3]), rows([0.6, 0.3, 0.1]), rows([0.4, 0.4, 0.2])],
        )
        .unwrap();
        for p in assign_clusters(&model, &ds).unwrap() {
            assert!(close(p[0], 0.25, 1e-12) && close(p[1], 0.75, 1e-12));
        }
    }

    /// Two clusters, two binary variables (defaults 0), three records; the
    /// expected values are written out from the posterior formula by hand.
    #[test]
    fn hand_evaluated_instance() {
        let schema = binary_schema(2);
        let ds = SparseDataset::new(
            schema,
            vec![
                SparseRecord::new(vec![]),
                SparseRecord::new(vec![Entry::new(0, 1)]),
                SparseRecord::new(vec![Entry::new(0, 1), Entry::new(1, 1)]),
            ],
        )
        .unwrap();
        let model = NaiveBayesModel::new(
            vec![0.4, 0.6],
            vec![array![[0.9, 0.1], [0.3, 0.7]], array![[0.5, 0.5], [0.2, 0.8]]],
        )
        .unwrap();
        // record (0,0): 0.4*0.9*0.5 = 0.18 ; 0.6*0.3*0.2 = 0.036
        // record (1,0): 0.4*0.1*0.5 = 0.02 ; 0.6*0.7*0.2 = 0.084
        // record (1,1): 0.4*0.1*0.5 = 0.02 ; 0.6*0.7*0.8 = 0.336
        let joints = [[0.18, 0.036], [0.02, 0.084], [0.02, 0.336]];
        let post: Vec<[f64; 2]> = joints
            .iter()
            .map(|j| [j[0] / (j[0] + j[1]), j[1] / (j[0] + j[1])])
            .collect();
        let ll: f64 = joints.iter().map(|j| (j[0] + j[1]).ln()).sum();
        let ss_c = [post.iter().map(|p| p[0]).sum::<f64>(), post.iter().map(|p| p[1]).sum::<f64>()];
        // ss_cx[var 0][c][1] = posteriors of records 2 and 3
        let x0_1 = [post[1][0] + post[2][0], post[1][1] + post[2][1]];
        let x1_1 = [post[2][0], post[2][1]];
        for (stats, got_ll) in [e_step_dense(&model, &ds).unwrap(), e_step_sparse(&model, &ds).unwrap()] {
            assert!(close(got_ll, ll, 1e-12));
            for c in 0..2 {
                assert!(close(stats.ss_c[c], ss_c[c], 1e-12));
                assert!(close(stats.ss_cx[0][[c, 1]], x0_1[c], 1e-12));
                assert!(close(stats.ss_cx[0][[c, 0]], ss_c[c] - x0_1[c], 1e-12));
                assert!(close(stats.ss_cx[1][[c, 1]], x1_1[c], 1e-12));
            }
        }
    }

    #[test]
    fn all_default_dataset_sparse_estep() {
        let schema = binary_schema(3);
        let ds = SparseDataset::new(schema.clone(), vec![SparseRecord::default(); 4]).unwrap();
        let model = init_model(&schema, 3, 5).unwrap();
        let (stats, _) = e_step_sparse(&model, &ds).unwrap();
        let dp = build_default_posterior(&model, &ds.defaults()).unwrap();
        let mut p = dp.0.clone();
        normalize(&mut p, 0).unwrap();
        for c in 0..3 {
            assert!(close(stats.ss_c[c], 4.0 * p[c], 1e-12));
            for i in 0..3 {
                assert!(close(stats.ss_cx[i][[c, 0]], stats.ss_c[c], 1e-12));
                assert_eq!(stats.ss_cx[i][[c, 1]], 0.0);
            }
        }
    }

    #[test]
    fn figure1_dense_sparse_agree() {
        let ds = figure1();
        for seed in 0..5 {
            let model = init_model(ds.schema(), 2, seed).unwrap();
            let (sd, lld) = e_step_dense(&model, &ds).unwrap();
            let (ss, lls) = e_step_sparse(&model, &ds).unwrap();
            let (sp, llp) = e_step_sparse_parallel(&model, &ds).unwrap();
            assert!(sd.max_relative_difference(&ss) <= 1e-9);
            assert!(sd.max_relative_difference(&sp) <= 1e-9);
            assert!(close(lld, lls, 1e-9) && close(lld, llp, 1e-9));
        }
    }

    #[test]
    fn underflow_is_reported() {
        let schema = binary_schema(1);
        let ds = SparseDataset::new(schema, vec![SparseRecord::default(), SparseRecord::new(vec![Entry::new(0, 1)])])
            .unwrap();
        let model = NaiveBayesModel::new(vec![0.5, 0.5], vec![array![[1.0, 0.0], [1.0, 0.0]]]).unwrap();
        assert!(matches!(e_step_dense(&model, &ds), Err(Error::Underflow(1))));
        assert!(matches!(e_step_sparse(&model, &ds), Err(Error::Underflow(1))));
    }

    #[test]
    fn m_step_ml_hard_assignment() {
        let stats = ExpectedStats {
            ss_c: vec![4.0, 0.0],
            ss_cx: vec![array![[3.0, 1.0], [0.0, 0.0]]],
        };
        assert!(matches!(m_step(&stats, 0.0), Err(Error::EmptyCluster(1))));
        let prior_only = ExpectedStats {
            ss_c: vec![4.0, 0.0],
            ss_cx: vec![],
        };
        assert_eq!(m_step(&prior_only, 0.0).unwrap().prior(), &[1.0, 0.0]);
    }

    #[test]
    fn m_step_uniform_stats() {
        let stats = ExpectedStats {
            ss_c: vec![3.0, 3.0],
            ss_cx: vec![array![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]],
        };
        let m = m_step(&stats, 0.0).unwrap();
        assert_eq!(m.prior(), &[0.5, 0.5]);
        assert!(m.conditional(0).iter().all(|&p| close(p, 1.0 / 3.0, 1e-15)));
    }

    #[test]
    fn m_step_map_formula() {
        // hand-fixed statistics over the three-valued variables of the example data
        let stats = ExpectedStats {
            ss_c: vec![2.5, 4.5],
            ss_cx: vec![
                array![[0.5, 1.5, 0.5], [0.5, 3.5, 0.5]],
                array![[1.0, 1.0, 0.5], [3.0, 0.0, 1.5]],
                array![[2.0, 0.0, 0.5], [2.0, 1.0, 1.5]],
            ],
        };
        let m = m_step(&stats, 1.0).unwrap();
        assert!(close(m.prior()[0], 3.5 / 9.0, 1e-15));
        assert!(close(m.prior()[1], 5.5 / 9.0, 1e-15));
        assert!(close(m.conditional(0)[[0, 1]], 2.5 / 5.5, 1e-15));
        assert!(close(m.conditional(1)[[1, 1]], 1.0 / 7.5, 1e-15));
        assert!(close(m.conditional(2)[[1, 2]], 2.5 / 7.5, 1e-15));
    }

    #[test]
    fn em_zero_iterations_returns_initial_model() {
        let ds = figure1();
        let mut cfg = EmConfig::new(2);
        cfg.max_iterations = 0;
        cfg.seed = 11;
        let run = run_em(&ds, &cfg).unwrap();
        assert!(run.trace.is_empty() && run.stats.is_none());
        assert_eq!(run.model, init_model(ds.schema(), 2, 11).unwrap());
    }

    #[test]
    fn em_single_cluster_is_empirical() {
        let ds = figure1();
        let mut cfg = EmConfig::new(1);
        cfg.prior_strength = 0.0;
        let run = run_em(&ds, &cfg).unwrap();
        assert!(run.trace.len() <= 3);
        let counts = sparse_counts(&DatasetView::full(&ds), 0).unwrap();
        for i in 0..3 {
            for (x, &c) in counts.one_way.var(i).iter().enumerate() {
                assert!(close(run.model.conditional(i)[[0, x]], c / 7.0, 1e-12));
            }
        }
    }

    #[test]
    fn em_modes_agree_on_figure1() {
        let ds = figure1();
        let mut cfg = EmConfig::new(2);
        cfg.seed = 4;
        cfg.estep_mode = EStepMode::Dense;
        let dense = run_em(&ds, &cfg).unwrap();
        cfg.estep_mode = EStepMode::Sparse;
        let sparse = run_em(&ds, &cfg).unwrap();
        assert_eq!(dense.trace.len(), sparse.trace.len());
        for (a, b) in dense.trace.iter().zip(&sparse.trace) {
            assert!(close(a.log_likelihood, b.log_likelihood, 1e-6));
        }
        for w in sparse.trace.windows(2) {
            assert!(w[1].objective >= w[0].objective - 1e-10);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let ds = figure1();
        let model = init_model(ds.schema(), 3, 8).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("NBMODEL 1\n3\n"));
        assert_eq!(text.lines().count(), 3 + 3 * 3);
        assert_eq!(NaiveBayesModel::read_from(&buf[..]).unwrap(), model);
        assert!(NaiveBayesModel::read_from("NBMODEL 1\n2\n0.5 0.5\n0.5 0.5\n".as_bytes()).is_err());
        assert!(NaiveBayesModel::read_from("NBMODEL 1\n1\n0.9\n".as_bytes()).is_err());
    }

    #[test]
    fn work_counts() {
        let ds = figure1();
        let model = init_model(ds.schema(), 2, 0).unwrap();
        let (_, _, sw) = e_step_sparse_instrumented(&model, &ds).unwrap();
        assert_eq!(sw.multiplies, 2 * 8);
        assert_eq!(sw.normalizations, 7);
        let (_, _, dw) = e_step_dense_instrumented(&model, &ds).unwrap();
        assert_eq!(dw.multiplies, 2 * 4 * 7);
    }
}
