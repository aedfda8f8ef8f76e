//! One-way and two-way count extraction.
//!
//! [`dense_counts`] reads every cell of every record through the dense view.
//! [`sparse_counts`] only touches stored pairs and then derives the cells
//! that involve default values from the known record count:
//!
//! ```text
//! SS(X=d)        = m        - sum_{x != d} SS(X=x)
//! SS(T=td, X=x)  = SS(X=x)  - sum_{t != td} SS(T=t, X=x)      x != d
//! SS(T=t, X=d)   = SS(T=t)  - sum_{x != d}  SS(T=t, X=x)      t != td
//! SS(T=td, X=d)  = SS(X=d)  - sum_{t != td} SS(T=t, X=d)
//! ```
//!
//! Counts are stored as `f64` so the same types carry expected counts.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparse_store::{DatasetView, SparseDataset, SparseRecord};

/// Operation counters filled by the instrumented scans.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanWork {
    /// Stored pairs visited by the sparse scan.
    pub pair_updates: u64,
    /// Per-record lookups of the target value (sparse scan).
    pub target_lookups: u64,
    /// Cells visited by the dense scan.
    pub cell_updates: u64,
}

pub(crate) trait Tally {
    fn pair(&mut self) {}
    fn lookup(&mut self) {}
    fn cell(&mut self) {}
}

pub(crate) struct NoTally;
impl Tally for NoTally {}

impl Tally for ScanWork {
    fn pair(&mut self) {
        self.pair_updates += 1;
    }
    fn lookup(&mut self) {
        self.target_lookups += 1;
    }
    fn cell(&mut self) {
        self.cell_updates += 1;
    }
}

/// `SS(X_i = x)` for every variable and value.
#[derive(Debug, Clone, PartialEq)]
pub struct OneWayCounts {
    counts: Vec<Vec<f64>>,
}

impl OneWayCounts {
    pub fn zeros(cardinalities: &[usize]) -> Self {
        Self {
            counts: cardinalities.iter().map(|&r| vec![0.0; r]).collect(),
        }
    }

    pub fn var(&self, var: usize) -> &[f64] {
        &self.counts[var]
    }

    pub fn get(&self, var: usize, value: usize) -> f64 {
        self.counts[var][value]
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.counts.iter().map(Vec::as_slice)
    }
}

/// `SS(T, X_i)` for a fixed target and every other variable; rows are target values.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoWayCounts {
    target: usize,
    tables: Vec<Option<Array2<f64>>>,
}

impl TwoWayCounts {
    pub fn target(&self) -> usize {
        self.target
    }

    /// `None` for the target itself.
    pub fn table(&self, var: usize) -> Option<&Array2<f64>> {
        self.tables[var].as_ref()
    }

    pub fn tables(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.tables
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (i, t)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountSet {
    pub record_count: usize,
    pub one_way: OneWayCounts,
    pub two_way: TwoWayCounts,
}

impl CountSet {
    pub fn target(&self) -> usize {
        self.two_way.target
    }

    pub fn target_counts(&self) -> &[f64] {
        self.one_way.var(self.two_way.target)
    }

    /// Writes the counts as CSV blocks separated by blank lines.
    ///
    /// One-way blocks are `value,count` pairs; two-way blocks carry a header
    /// row of the other variable's values and one row per target value.
    pub fn write_csv<W: Write>(&self, schema: &SparseDataset, mut w: W) -> Result<()> {
        let names = |i: usize| schema.schema()[i].name.as_str();
        for (i, counts) in self.one_way.iter().enumerate() {
            writeln!(w, "one_way,{}", names(i))?;
            writeln!(w, "value,count")?;
            for (v, c) in counts.iter().enumerate() {
                writeln!(w, "{v},{c}")?;
            }
            writeln!(w)?;
        }
        let t = self.target();
        for (i, table) in self.two_way.tables() {
            write_table_csv(&mut w, names(t), names(i), table)?;
        }
        Ok(())
    }
}

fn write_table_csv<W: Write>(w: &mut W, row_name: &str, col_name: &str, table: &Array2<f64>) -> Result<()> {
    writeln!(w, "two_way,{row_name},{col_name}")?;
    write!(w, "{row_name}\\{col_name}")?;
    for x in 0..table.ncols() {
        write!(w, ",{x}")?;
    }
    writeln!(w)?;
    for (t, row) in table.outer_iter().enumerate() {
        write!(w, "{t}")?;
        for c in row {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
    }
    writeln!(w)?;
    Ok(())
}

fn check_target(data: &SparseDataset, target: usize) -> Result<()> {
    if target >= data.n() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: data.n(),
        });
    }
    Ok(())
}

/// Flat accumulators for one scan: one-way counts and target-by-variable tables.
#[derive(Clone)]
struct Accumulator {
    one: Vec<f64>,
    two: Vec<f64>,
}

struct Layout {
    one_off: Vec<usize>,
    two_off: Vec<usize>,
    card: Vec<usize>,
    target: usize,
    target_card: usize,
    target_default: usize,
}

impl Layout {
    fn new(data: &SparseDataset, target: usize) -> Self {
        let card = data.cardinalities();
        let target_card = card[target];
        let mut one_off = Vec::with_capacity(card.len() + 1);
        let mut two_off = Vec::with_capacity(card.len() + 1);
        let (mut o, mut t) = (0, 0);
        for (i, &r) in card.iter().enumerate() {
            one_off.push(o);
            two_off.push(t);
            o += r;
            if i != target {
                t += target_card * r;
            }
        }
        one_off.push(o);
        two_off.push(t);
        Self {
            one_off,
            two_off,
            card,
            target,
            target_card,
            target_default: data.default_value(target),
        }
    }

    fn zeros(&self) -> Accumulator {
        Accumulator {
            one: vec![0.0; *self.one_off.last().unwrap()],
            two: vec![0.0; *self.two_off.last().unwrap()],
        }
    }

    #[inline]
    fn two_index(&self, var: usize, t: usize, x: usize) -> usize {
        self.two_off[var] + t * self.card[var] + x
    }

    fn sparse_scan<'r, T: Tally>(
        &self,
        acc: &mut Accumulator,
        records: impl Iterator<Item = &'r SparseRecord>,
        tally: &mut T,
    ) {
        for rec in records {
            tally.lookup();
            let t = rec.stored_value(self.target).unwrap_or(self.target_default);
            let t_stored = t != self.target_default;
            for e in rec {
                tally.pair();
                acc.one[self.one_off[e.var] + e.value] += 1.0;
                if t_stored && e.var != self.target {
                    acc.two[self.two_index(e.var, t, e.value)] += 1.0;
                }
            }
        }
    }

    fn unpack(&self, acc: Accumulator) -> (Vec<Vec<f64>>, Vec<Option<Array2<f64>>>) {
        let one = (0..self.card.len())
            .map(|i| acc.one[self.one_off[i]..self.one_off[i + 1]].to_vec())
            .collect();
        let two = (0..self.card.len())
            .map(|i| {
                (i != self.target).then(|| {
                    let slice = &acc.two[self.two_off[i]..self.two_off[i + 1]];
                    Array2::from_shape_vec((self.target_card, self.card[i]), slice.to_vec())
                        .expect("table shape matches layout")
                })
            })
            .collect();
        (one, two)
    }
}

/// Rejects negative derived cells, clamping round-off below `tol * scale`.
fn settle(value: f64, tol: f64, scale: f64, variable: usize, row: usize, col: usize) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if -value <= tol * scale.abs().max(1.0) {
        Ok(0.0)
    } else {
        Err(Error::NegativeDerivedCount {
            variable,
            row,
            col,
            value,
        })
    }
}

/// Default one-way count from the record total.
pub(crate) fn derive_default_count(counts: &mut [f64], default: usize, total: f64, tol: f64, variable: usize) -> Result<()> {
    let rest: f64 = counts
        .iter()
        .enumerate()
        .filter(|&(v, _)| v != default)
        .map(|(_, c)| c)
        .sum();
    counts[default] = settle(total - rest, tol, total, variable, default, default)?;
    Ok(())
}

/// Fills column `default_col` of `table` from row totals, for every row
/// except `skip_row` (the target's default row, when the target has one).
pub(crate) fn derive_default_column(
    table: &mut Array2<f64>,
    row_totals: &[f64],
    default_col: usize,
    skip_row: Option<usize>,
    tol: f64,
    variable: usize,
) -> Result<()> {
    for (t, mut row) in table.outer_iter_mut().enumerate() {
        if Some(t) == skip_row {
            continue;
        }
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(x, _)| x != default_col)
            .map(|(_, c)| c)
            .sum();
        row[default_col] = settle(row_totals[t] - rest, tol, row_totals[t], variable, t, default_col)?;
    }
    Ok(())
}

/// Derives every default-valued cell of a `T x X` table whose scan only
/// filled the non-default rows and columns.
pub(crate) fn derive_two_way(
    table: &mut Array2<f64>,
    target_counts: &[f64],
    target_default: usize,
    var_counts: &[f64],
    var_default: usize,
    tol: f64,
    variable: usize,
) -> Result<()> {
    let (rows, cols) = table.dim();
    // default row, non-default columns
    for x in (0..cols).filter(|&x| x != var_default) {
        let rest: f64 = (0..rows)
            .filter(|&t| t != target_default)
            .map(|t| table[[t, x]])
            .sum();
        table[[target_default, x]] = settle(var_counts[x] - rest, tol, var_counts[x], variable, target_default, x)?;
    }
    // default column, non-default rows
    derive_default_column(table, target_counts, var_default, Some(target_default), tol, variable)?;
    // corner
    let rest: f64 = (0..rows)
        .filter(|&t| t != target_default)
        .map(|t| table[[t, var_default]])
        .sum();
    table[[target_default, var_default]] = settle(
        var_counts[var_default] - rest,
        tol,
        var_counts[var_default],
        variable,
        target_default,
        var_default,
    )?;
    Ok(())
}

fn finish_sparse(view: &DatasetView<'_>, layout: &Layout, acc: Accumulator) -> Result<CountSet> {
    let data = view.base();
    let m = view.record_count();
    let (mut one, mut two) = layout.unpack(acc);
    for (i, counts) in one.iter_mut().enumerate() {
        derive_default_count(counts, data.default_value(i), m as f64, 0.0, i)?;
    }
    let target_counts = one[layout.target].clone();
    for (i, table) in two.iter_mut().enumerate() {
        if let Some(table) = table {
            derive_two_way(
                table,
                &target_counts,
                layout.target_default,
                &one[i],
                data.default_value(i),
                0.0,
                i,
            )?;
        }
    }
    Ok(CountSet {
        record_count: m,
        one_way: OneWayCounts { counts: one },
        two_way: TwoWayCounts {
            target: layout.target,
            tables: two,
        },
    })
}

pub(crate) fn sparse_counts_tallied<T: Tally>(view: &DatasetView<'_>, target: usize, tally: &mut T) -> Result<CountSet> {
    check_target(view.base(), target)?;
    let layout = Layout::new(view.base(), target);
    let mut acc = layout.zeros();
    layout.sparse_scan(&mut acc, view.records(), tally);
    finish_sparse(view, &layout, acc)
}

/// Counts by scanning only stored pairs, then deriving default cells.
pub fn sparse_counts(view: &DatasetView<'_>, target: usize) -> Result<CountSet> {
    sparse_counts_tallied(view, target, &mut NoTally)
}

pub fn sparse_counts_instrumented(view: &DatasetView<'_>, target: usize) -> Result<(CountSet, ScanWork)> {
    let mut work = ScanWork::default();
    let counts = sparse_counts_tallied(view, target, &mut work)?;
    Ok((counts, work))
}

/// Parallel sparse scan over record chunks; per-chunk accumulators are
/// summed before the (sequential) derivation step.
pub fn sparse_counts_parallel(view: &DatasetView<'_>, target: usize) -> Result<CountSet> {
    check_target(view.base(), target)?;
    let layout = Layout::new(view.base(), target);
    let records = view.base().records();
    let chunk = (view.record_count() / rayon::current_num_threads().max(1)).max(256);
    let acc = view
        .indices()
        .par_chunks(chunk)
        .map(|idx| {
            let mut acc = layout.zeros();
            layout.sparse_scan(&mut acc, idx.iter().map(|&j| &records[j]), &mut NoTally);
            acc
        })
        .reduce(
            || layout.zeros(),
            |mut a, b| {
                a.one.iter_mut().zip(&b.one).for_each(|(x, y)| *x += y);
                a.two.iter_mut().zip(&b.two).for_each(|(x, y)| *x += y);
                a
            },
        );
    finish_sparse(view, &layout, acc)
}

pub(crate) fn dense_counts_tallied<T: Tally>(view: &DatasetView<'_>, target: usize, tally: &mut T) -> Result<CountSet> {
    let data = view.base();
    check_target(data, target)?;
    let layout = Layout::new(data, target);
    let mut acc = layout.zeros();
    let mut row = data.defaults();
    for rec in view.records() {
        data.densify_into(rec, &mut row);
        let t = row[target];
        for (i, &x) in row.iter().enumerate() {
            tally.cell();
            acc.one[layout.one_off[i] + x] += 1.0;
            if i != target {
                acc.two[layout.two_index(i, t, x)] += 1.0;
            }
        }
    }
    let (one, two) = layout.unpack(acc);
    Ok(CountSet {
        record_count: view.record_count(),
        one_way: OneWayCounts { counts: one },
        two_way: TwoWayCounts { target, tables: two },
    })
}

/// Counts by reading every cell through the dense view.
pub fn dense_counts(view: &DatasetView<'_>, target: usize) -> Result<CountSet> {
    dense_counts_tallied(view, target, &mut NoTally)
}

pub fn dense_counts_instrumented(view: &DatasetView<'_>, target: usize) -> Result<(CountSet, ScanWork)> {
    let mut work = ScanWork::default();
    let counts = dense_counts_tallied(view, target, &mut work)?;
    Ok((counts, work))
}

/// Two-way tables for every unordered variable pair `(i, j)`, `i < j`,
/// with rows indexed by the values of `X_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCounts {
    pub record_count: usize,
    pub one_way: OneWayCounts,
    n: usize,
    tables: Vec<Array2<f64>>,
}

impl PairCounts {
    fn pair_index(n: usize, i: usize, j: usize) -> usize {
        // row-major upper triangle without the diagonal
        i * (2 * n - i - 1) / 2 + (j - i - 1)
    }

    /// Table with rows over `X_i` and columns over `X_j`; `None` when `i == j`.
    pub fn get(&self, i: usize, j: usize) -> Option<Array2<f64>> {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Less => Some(self.tables[Self::pair_index(self.n, i, j)].clone()),
            Greater => Some(self.tables[Self::pair_index(self.n, j, i)].t().to_owned()),
            Equal => None,
        }
    }

    pub fn table(&self, i: usize, j: usize) -> Option<&Array2<f64>> {
        (i < j && j < self.n).then(|| &self.tables[Self::pair_index(self.n, i, j)])
    }

    pub fn pairs(&self) -> impl Iterator<Item = ((usize, usize), &Array2<f64>)> {
        let n = self.n;
        (0..n)
            .flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
            .zip(self.tables.iter())
    }

    pub fn write_csv<W: Write>(&self, schema: &SparseDataset, mut w: W) -> Result<()> {
        let names = |i: usize| schema.schema()[i].name.as_str();
        for ((i, j), table) in self.pairs() {
            write_table_csv(&mut w, names(i), names(j), table)?;
        }
        Ok(())
    }
}

/// Two-way counts between every pair of variables.
///
/// The scan visits every pair of stored entries within each record, so its
/// cost is the sum of squared record lengths.
pub fn all_pairs_counts(view: &DatasetView<'_>) -> Result<PairCounts> {
    let data = view.base();
    let n = data.n();
    let card = data.cardinalities();
    let mut one: Vec<Vec<f64>> = card.iter().map(|&r| vec![0.0; r]).collect();
    let mut tables: Vec<Array2<f64>> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            tables.push(Array2::zeros((card[i], card[j])));
        }
    }
    for rec in view.records() {
        let entries = rec.entries();
        for (a, ea) in entries.iter().enumerate() {
            one[ea.var][ea.value] += 1.0;
            for eb in &entries[a + 1..] {
                tables[PairCounts::pair_index(n, ea.var, eb.var)][[ea.value, eb.value]] += 1.0;
            }
        }
    }
    let m = view.record_count() as f64;
    for (i, counts) in one.iter_mut().enumerate() {
        derive_default_count(counts, data.default_value(i), m, 0.0, i)?;
    }
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            derive_two_way(
                &mut tables[k],
                &one[i],
                data.default_value(i),
                &one[j],
                data.default_value(j),
                0.0,
                j,
            )?;
            k += 1;
        }
    }
    Ok(PairCounts {
        record_count: view.record_count(),
        one_way: OneWayCounts { counts: one },
        n,
        tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_store::tests::figure1;
    use crate::sparse_store::{Entry, VariableSchema};
    use ndarray::array;

    #[test]
    fn figure2_from_both_scans() {
        let ds = figure1();
        let view = DatasetView::full(&ds);
        for counts in [dense_counts(&view, 0).unwrap(), sparse_counts(&view, 0).unwrap()] {
            // rows are A's values; the figure lays C down the rows, hence the transpose
            let ac = counts.two_way.table(2).unwrap();
            assert_eq!(ac.t(), array![[1.0, 2.0, 1.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]]);
            assert_eq!(counts.one_way.var(2), &[4.0, 1.0, 2.0]);
            assert!(counts.two_way.table(0).is_none());
        }
    }

    #[test]
    fn single_record_has_one_hot_tables() {
        let ds = SparseDataset::new(
            vec![
                VariableSchema::new("a", 3, 0),
                VariableSchema::new("b", 2, 1),
                VariableSchema::new("c", 4, 0),
            ],
            vec![SparseRecord::new(vec![Entry::new(0, 2), Entry::new(2, 3)])],
        )
        .unwrap();
        let view = DatasetView::full(&ds);
        for target in 0..3 {
            let dense = dense_counts(&view, target).unwrap();
            assert_eq!(dense, sparse_counts(&view, target).unwrap());
            for (_, table) in dense.two_way.tables() {
                assert_eq!(table.sum(), 1.0);
                assert_eq!(table.iter().filter(|&&c| c == 1.0).count(), 1);
            }
        }
    }

    #[test]
    fn all_default_data_puts_everything_in_the_corner() {
        let schema = vec![VariableSchema::new("a", 3, 2), VariableSchema::new("b", 2, 0)];
        let ds = SparseDataset::new(schema, vec![SparseRecord::default(); 5]).unwrap();
        let counts = sparse_counts(&DatasetView::full(&ds), 0).unwrap();
        let table = counts.two_way.table(1).unwrap();
        assert_eq!(table, &array![[0.0, 0.0], [0.0, 0.0], [5.0, 0.0]]);
        assert_eq!(counts.one_way.var(0), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn view_counts_use_view_size() {
        let ds = figure1();
        let view = DatasetView::subset(&ds, vec![1, 3, 6]).unwrap();
        let s = sparse_counts(&view, 1).unwrap();
        assert_eq!(s, dense_counts(&view, 1).unwrap());
        assert_eq!(s.record_count, 3);
        assert_eq!(s.one_way.var(0).iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn work_counters() {
        let ds = figure1();
        let view = DatasetView::full(&ds);
        let (_, sw) = sparse_counts_instrumented(&view, 2).unwrap();
        assert_eq!(sw.pair_updates, 8);
        assert_eq!(sw.target_lookups, 7);
        assert_eq!(sw.cell_updates, 0);
        let (_, dw) = dense_counts_instrumented(&view, 2).unwrap();
        assert_eq!(dw.cell_updates, 21);
    }

    #[test]
    fn pair_counts_match_figure2() {
        let ds = figure1();
        let pairs = all_pairs_counts(&DatasetView::full(&ds)).unwrap();
        let ca = pairs.get(2, 0).unwrap();
        assert_eq!(ca, array![[1.0, 2.0, 1.0], [0.0, 1.0, 0.0], [0.0, 2.0, 0.0]]);
        assert!(pairs.get(1, 1).is_none());
        assert_eq!(pairs.pairs().count(), 3);
    }

    #[test]
    fn corrupted_counts_are_reported() {
        // a stored count larger than the record total cannot be derived around
        let mut counts = vec![0.0, 5.0];
        let err = derive_default_count(&mut counts, 0, 3.0, 0.0, 4).unwrap_err();
        assert!(matches!(err, Error::NegativeDerivedCount { variable: 4, .. }));
    }

    #[test]
    fn bad_target_rejected() {
        let ds = figure1();
        assert!(sparse_counts(&DatasetView::full(&ds), 3).is_err());
        assert!(dense_counts(&DatasetView::full(&ds), 3).is_err());
    }

    #[test]
    fn csv_blocks() {
        let ds = figure1();
        let counts = sparse_counts(&DatasetView::full(&ds), 0).unwrap();
        let mut out = Vec::new();
        counts.write_csv(&ds, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("one_way,C\nvalue,count\n0,4\n1,1\n2,2\n"));
        assert!(text.contains("two_way,A,C\nA\\C,0,1,2\n0,1,0,0\n1,2,1,2\n2,1,0,0\n"));
    }
}
