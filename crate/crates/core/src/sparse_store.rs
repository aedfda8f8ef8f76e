//! Sparse record storage for discrete data.
//!
//! Every variable has a default value that is never stored. A record keeps
//! only its non-default `(variable, value)` pairs, sorted by variable index,
//! so iterating a record costs time proportional to its stored pairs.
//!
//! The text file format is line oriented:
//!
//! ```text
//! SPARSE 1
//! vars <n>
//! var <name> <cardinality> <default_index>    (n lines)
//! records <m>
//! <var>:<value> <var>:<value> ...             (m lines, empty = all defaults)
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "SPARSE 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableSchema {
    pub name: String,
    pub cardinality: usize,
    pub default_value: usize,
}

impl VariableSchema {
    pub fn new(name: impl Into<String>, cardinality: usize, default_value: usize) -> Self {
        Self {
            name: name.into(),
            cardinality,
            default_value,
        }
    }
}

/// A stored non-default value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Entry {
    pub var: usize,
    pub value: usize,
}

impl Entry {
    pub fn new(var: usize, value: usize) -> Self {
        Self { var, value }
    }
}

/// The non-default values of one record, in strictly increasing variable order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SparseRecord {
    entries: Vec<Entry>,
}

impl SparseRecord {
    /// Entries must be in canonical order; this is checked when the record
    /// is placed in a [`SparseDataset`].
    pub fn new(entries: Vec<Entry>) -> Self {
        Self { entries }
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self::new(pairs.iter().map(|&(var, value)| Entry { var, value }).collect())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Entry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stored value of `var`, or `None` when the variable is at its default.
    pub fn stored_value(&self, var: usize) -> Option<usize> {
        self.entries
            .binary_search_by_key(&var, |e| e.var)
            .ok()
            .map(|pos| self.entries[pos].value)
    }
}

impl<'a> IntoIterator for &'a SparseRecord {
    type Item = &'a Entry;
    type IntoIter = std::slice::Iter<'a, Entry>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

fn validate_schema(schema: &[VariableSchema]) -> Result<()> {
    let mut seen = HashSet::with_capacity(schema.len());
    for (i, v) in schema.iter().enumerate() {
        if v.name.is_empty() || v.name.chars().any(char::is_whitespace) {
            return Err(Error::Schema(format!(
                "variable {i}: name {:?} must be non-empty without whitespace",
                v.name
            )));
        }
        if !seen.insert(v.name.as_str()) {
            return Err(Error::Schema(format!("duplicate variable name {:?}", v.name)));
        }
        if v.cardinality < 2 {
            return Err(Error::Schema(format!(
                "variable {:?}: cardinality {} < 2",
                v.name, v.cardinality
            )));
        }
        if v.default_value >= v.cardinality {
            return Err(Error::Schema(format!(
                "variable {:?}: default {} not below cardinality {}",
                v.name, v.default_value, v.cardinality
            )));
        }
    }
    Ok(())
}

fn validate_record(schema: &[VariableSchema], index: usize, record: &SparseRecord) -> Result<()> {
    let mut prev: Option<usize> = None;
    for e in record.iter() {
        let fail = |reason: String| Error::Record {
            record: index,
            reason,
        };
        if prev.is_some_and(|p| e.var <= p) {
            return Err(fail(format!(
                "variable indices not strictly increasing at {}",
                e.var
            )));
        }
        let var = schema
            .get(e.var)
            .ok_or_else(|| fail(format!("variable {} not in schema", e.var)))?;
        if e.value >= var.cardinality {
            return Err(fail(format!(
                "value {} of {:?} exceeds cardinality {}",
                e.value, var.name, var.cardinality
            )));
        }
        if e.value == var.default_value {
            return Err(fail(format!(
                "value {} of {:?} is the default and must not be stored",
                e.value, var.name
            )));
        }
        prev = Some(e.var);
    }
    Ok(())
}

/// Schema plus sparse records. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseDataset {
    schema: Vec<VariableSchema>,
    records: Vec<SparseRecord>,
    nondefault_total: usize,
}

impl SparseDataset {
    pub fn new(schema: Vec<VariableSchema>, records: Vec<SparseRecord>) -> Result<Self> {
        validate_schema(&schema)?;
        for (j, r) in records.iter().enumerate() {
            validate_record(&schema, j, r)?;
        }
        let nondefault_total = records.iter().map(SparseRecord::len).sum();
        Ok(Self {
            schema,
            records,
            nondefault_total,
        })
    }

    pub fn schema(&self) -> &[VariableSchema] {
        &self.schema
    }

    pub fn records(&self) -> &[SparseRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> Result<&SparseRecord> {
        self.records.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.records.len(),
        })
    }

    /// Number of variables.
    pub fn n(&self) -> usize {
        self.schema.len()
    }

    /// Number of records.
    pub fn m(&self) -> usize {
        self.records.len()
    }

    /// Number of stored (non-default) values.
    pub fn l(&self) -> usize {
        self.nondefault_total
    }

    /// Dense-to-sparse size ratio `n·m/l`; infinite when nothing is stored.
    pub fn sparsity_ratio(&self) -> f64 {
        (self.n() * self.m()) as f64 / self.l() as f64
    }

    pub fn cardinality(&self, var: usize) -> usize {
        self.schema[var].cardinality
    }

    pub fn default_value(&self, var: usize) -> usize {
        self.schema[var].default_value
    }

    pub fn defaults(&self) -> Vec<usize> {
        self.schema.iter().map(|v| v.default_value).collect()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.schema.iter().map(|v| v.cardinality).collect()
    }

    /// Dense-view accessor: the value of `var` in `record`, falling back to the default.
    pub fn value(&self, record: usize, var: usize) -> usize {
        self.records[record]
            .stored_value(var)
            .unwrap_or(self.schema[var].default_value)
    }

    /// Full value vector of a record.
    pub fn densify(&self, record: usize) -> Result<Vec<usize>> {
        let mut out = self.defaults();
        self.densify_into(self.record(record)?, &mut out);
        Ok(out)
    }

    /// Overwrites `buf` (length n) with the dense values of `record`.
    pub(crate) fn densify_into(&self, record: &SparseRecord, buf: &mut [usize]) {
        for (slot, var) in buf.iter_mut().zip(&self.schema) {
            *slot = var.default_value;
        }
        for e in record {
            buf[e.var] = e.value;
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "vars {}", self.n())?;
        for v in &self.schema {
            writeln!(w, "var {} {} {}", v.name, v.cardinality, v.default_value)?;
        }
        writeln!(w, "records {}", self.m())?;
        for r in &self.records {
            let mut first = true;
            for e in r {
                if !first {
                    w.write_all(b" ")?;
                }
                write!(w, "{}:{}", e.var, e.value)?;
                first = false;
            }
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((no, line)) => Ok((no, line?)),
                None => Err(Error::Format {
                    line: 0,
                    reason: format!("unexpected end of input, expected {what}"),
                }),
            }
        };

        let (no, line) = next("header")?;
        if line != MAGIC {
            return Err(Error::Format {
                line: no,
                reason: format!("expected {MAGIC:?}, found {line:?}"),
            });
        }
        let (no, line) = next("vars line")?;
        let n = parse_keyword_count(no, &line, "vars")?;

        let mut schema = Vec::with_capacity(n);
        for _ in 0..n {
            let (no, line) = next("var line")?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 || parts[0] != "var" {
                return Err(Error::Format {
                    line: no,
                    reason: format!("expected `var <name> <cardinality> <default>`, found {line:?}"),
                });
            }
            schema.push(VariableSchema::new(
                parts[1],
                parse_usize(no, parts[2])?,
                parse_usize(no, parts[3])?,
            ));
        }
        validate_schema(&schema)?;

        let (no, line) = next("records line")?;
        let m = parse_keyword_count(no, &line, "records")?;
        let mut records = Vec::with_capacity(m);
        for _ in 0..m {
            let (no, line) = next("record line")
                .map_err(|_| Error::Format {
                    line: 0,
                    reason: format!("record count mismatch: header says {m}, found {}", records.len()),
                })?;
            let mut entries = Vec::new();
            if !line.is_empty() {
                for tok in line.split(' ') {
                    let (var, value) = tok.split_once(':').ok_or_else(|| Error::Format {
                        line: no,
                        reason: format!("bad pair {tok:?}"),
                    })?;
                    entries.push(Entry::new(parse_usize(no, var)?, parse_usize(no, value)?));
                }
            }
            let record = SparseRecord::new(entries);
            validate_record(&schema, records.len(), &record).map_err(|e| Error::Format {
                line: no,
                reason: e.to_string(),
            })?;
            records.push(record);
        }
        if let Ok((no, _)) = next("") {
            return Err(Error::Format {
                line: no,
                reason: format!("record count mismatch: header says {m}, found more"),
            });
        }
        Self::new(schema, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn parse_usize(line: usize, s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format {
        line,
        reason: format!("expected a non-negative integer, found {s:?}"),
    })
}

fn parse_keyword_count(line: usize, text: &str, keyword: &str) -> Result<usize> {
    match text.split_once(' ') {
        Some((k, v)) if k == keyword => parse_usize(line, v),
        _ => Err(Error::Format {
            line,
            reason: format!("expected `{keyword} <count>`, found {text:?}"),
        }),
    }
}

/// A subset of a dataset's records, used to count over decision-tree leaves.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    base: &'a SparseDataset,
    indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn full(base: &'a SparseDataset) -> Self {
        Self {
            base,
            indices: (0..base.m()).collect(),
        }
    }

    /// `indices` must be strictly increasing and in range.
    pub fn subset(base: &'a SparseDataset, indices: Vec<usize>) -> Result<Self> {
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "view indices must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= base.m() {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    len: base.m(),
                });
            }
        }
        Ok(Self { base, indices })
    }

    pub(crate) fn from_sorted_unchecked(base: &'a SparseDataset, indices: Vec<usize>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self { base, indices }
    }

    pub fn base(&self) -> &'a SparseDataset {
        self.base
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn into_indices(self) -> Vec<usize> {
        self.indices
    }

    /// `m_view`.
    pub fn record_count(&self) -> usize {
        self.indices.len()
    }

    pub fn records(&self) -> impl Iterator<Item = &'a SparseRecord> + '_ {
        let records = self.base.records();
        self.indices.iter().map(move |&j| &records[j])
    }

    /// Stored values in the view (`l_view`).
    pub fn stored_total(&self) -> usize {
        self.records().map(SparseRecord::len).sum()
    }
}

/// How default values are chosen during ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum DefaultPolicy {
    /// Most frequent value per variable, ties to the smallest index.
    #[default]
    MostFrequent,
    Zero,
    Explicit(Vec<usize>),
}

/// A dense table of value indices with optional column names.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DenseTable {
    pub names: Option<Vec<String>>,
    pub rows: Vec<Vec<usize>>,
}

impl DenseTable {
    pub fn new(rows: Vec<Vec<usize>>) -> Self {
        Self { names: None, rows }
    }

    /// Reads a comma-separated integer table, one record per line.
    pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let names = if has_header {
            Some(rdr.headers()?.iter().map(str::to_owned).collect())
        } else {
            None
        };
        let mut rows = Vec::new();
        for (j, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|cell| {
                    cell.parse::<usize>().map_err(|_| {
                        Error::Table(format!("row {j}: cell {cell:?} is not a value index"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { names, rows })
    }
}

/// Builds a sparse dataset from a dense table.
///
/// Cardinalities are inferred as `max(max observed + 1, 2)` unless declared.
pub fn ingest_dense(
    table: &DenseTable,
    cardinalities: Option<&[usize]>,
    defaults: &DefaultPolicy,
) -> Result<SparseDataset> {
    let rows = &table.rows;
    let n = match rows.first() {
        Some(r) if !r.is_empty() => r.len(),
        _ => return Err(Error::Table("empty table".into())),
    };
    if let Some((j, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::Table(format!(
            "ragged rows: row {j} has {} cells, expected {n}",
            r.len()
        )));
    }

    let cards: Vec<usize> = match cardinalities {
        Some(c) => {
            if c.len() != n {
                return Err(Error::Table(format!(
                    "{} cardinalities declared for {n} columns",
                    c.len()
                )));
            }
            for (j, r) in rows.iter().enumerate() {
                for (i, (&v, &card)) in r.iter().zip(c).enumerate() {
                    if v >= card {
                        return Err(Error::Table(format!(
                            "row {j} column {i}: value {v} out of declared range {card}"
                        )));
                    }
                }
            }
            c.to_vec()
        }
        None => (0..n)
            .map(|i| rows.iter().map(|r| r[i] + 1).max().unwrap_or(0).max(2))
            .collect(),
    };

    let defaults: Vec<usize> = match defaults {
        DefaultPolicy::Zero => vec![0; n],
        DefaultPolicy::Explicit(d) => {
            if d.len() != n {
                return Err(Error::Table(format!("{} defaults given for {n} columns", d.len())));
            }
            d.clone()
        }
        DefaultPolicy::MostFrequent => (0..n)
            .map(|i| {
                let mut freq = vec![0usize; cards[i]];
                for r in rows {
                    freq[r[i]] += 1;
                }
                // max_by_key keeps the last maximum; scan in reverse to favor the smallest index
                freq.iter()
                    .enumerate()
                    .rev()
                    .max_by_key(|&(_, &c)| c)
                    .map(|(v, _)| v)
                    .unwrap_or(0)
            })
            .collect(),
    };

    let names: Vec<String> = match &table.names {
        Some(names) if names.len() == n => names.clone(),
        Some(names) => {
            return Err(Error::Table(format!(
                "{} header names for {n} columns",
                names.len()
            )))
        }
        None => (0..n).map(|i| format!("x{i}")).collect(),
    };

    let schema: Vec<VariableSchema> = names
        .into_iter()
        .zip(cards.iter().zip(&defaults))
        .map(|(name, (&c, &d))| VariableSchema::new(name, c, d))
        .collect();

    let records = rows
        .iter()
        .map(|r| {
            SparseRecord::new(
                r.iter()
                    .enumerate()
                    .filter(|&(i, &v)| v != defaults[i])
                    .map(|(i, &v)| Entry::new(i, v))
                    .collect(),
            )
        })
        .collect();

    SparseDataset::new(schema, records)
}
