//! Greedy decision-tree induction from two-way counts.
//!
//! Each leaf owns a subset of records. Candidate splits on a leaf are scored
//! from `SS(T)` and `SS(T, X_i)` over that subset with a Dirichlet-multinomial
//! log Bayes factor; the best positive split over all leaves is applied until
//! none remains. Splits are complete: one child per value of the split variable.

use std::io::{BufRead, Write};

use ndarray::Array2;
use statrs::function::gamma::ln_gamma;

use crate::count_engine::{dense_counts, sparse_counts, CountSet};
use crate::error::{Error, Result};
use crate::sparse_store::{DatasetView, SparseDataset, SparseRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitScore {
    pub variable: usize,
    /// log p(data | split) - log p(data | leaf); positive favors the split.
    pub log_bayes_factor: f64,
}

/// Log marginal likelihood of a count vector under a symmetric Dirichlet
/// with `alpha` per cell.
pub fn log_dirichlet_marginal(counts: &[f64], alpha: f64) -> f64 {
    let total: f64 = counts.iter().sum();
    let alpha_sum = alpha * counts.len() as f64;
    let mut acc = ln_gamma(alpha_sum) - ln_gamma(alpha_sum + total);
    for &n in counts {
        if n > 0.0 {
            acc += ln_gamma(alpha + n) - ln_gamma(alpha);
        }
    }
    acc
}

/// Scores splitting a leaf with target counts `leaf_counts` on a variable
/// whose joint counts with the target are `table` (rows = target values).
pub fn score_split(variable: usize, leaf_counts: &[f64], table: &Array2<f64>, pseudo_count: f64) -> Result<SplitScore> {
    if !(pseudo_count > 0.0) || !pseudo_count.is_finite() {
        return Err(Error::Config(format!("pseudo_count must be positive, got {pseudo_count}")));
    }
    if table.nrows() != leaf_counts.len() {
        return Err(Error::Counts(format!(
            "table has {} rows for {} target values",
            table.nrows(),
            leaf_counts.len()
        )));
    }
    let bad = |x: &f64| !x.is_finite() || *x < 0.0;
    if leaf_counts.iter().any(bad) || table.iter().any(bad) {
        return Err(Error::Counts("counts must be finite and non-negative".into()));
    }
    for (t, row) in table.outer_iter().enumerate() {
        let s = row.sum();
        if (s - leaf_counts[t]).abs() > 1e-9 * leaf_counts[t].max(1.0) {
            return Err(Error::Counts(format!(
                "row {t} of the table sums to {s}, target count is {}",
                leaf_counts[t]
            )));
        }
    }
    let split: f64 = table
        .columns()
        .into_iter()
        .map(|col| log_dirichlet_marginal(&col.to_vec(), pseudo_count))
        .sum();
    Ok(SplitScore {
        variable,
        log_bayes_factor: split - log_dirichlet_marginal(leaf_counts, pseudo_count),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeConfig {
    pub pseudo_count: f64,
    /// Every non-empty child of a split must receive at least this many records.
    pub min_leaf_records: usize,
    pub max_depth: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            pseudo_count: 1.0,
            min_leaf_records: 1,
            max_depth: None,
        }
    }
}

/// Where the learner gets its counts from.
pub trait CountSource {
    fn counts(&mut self, view: &DatasetView<'_>, target: usize) -> Result<CountSet>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountPath {
    Dense,
    Sparse,
}

impl CountSource for CountPath {
    fn counts(&mut self, view: &DatasetView<'_>, target: usize) -> Result<CountSet> {
        match self {
            CountPath::Dense => dense_counts(view, target),
            CountPath::Sparse => sparse_counts(view, target),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split { variable: usize, children: Vec<usize> },
    Leaf { counts: Vec<f64>, distribution: Vec<f64> },
}

/// Nodes are stored in pre-order; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    target: usize,
    target_cardinality: usize,
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn target(&self) -> usize {
        self.target
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn root_split(&self) -> Option<usize> {
        match &self.nodes[0] {
            Node::Split { variable, .. } => Some(*variable),
            Node::Leaf { .. } => None,
        }
    }

    fn route(&self, mut value_of: impl FnMut(usize) -> usize) -> usize {
        let mut at = 0;
        while let Node::Split { variable, children } = &self.nodes[at] {
            at = children[value_of(*variable)];
        }
        at
    }

    /// Predictive distribution of the target for a record.
    pub fn predict(&self, record: &SparseRecord, defaults: &[usize]) -> &[f64] {
        let leaf = self.route(|v| record.stored_value(v).unwrap_or(defaults[v]));
        match &self.nodes[leaf] {
            Node::Leaf { distribution, .. } => distribution,
            Node::Split { .. } => unreachable!("routing ends at a leaf"),
        }
    }

    /// Leaf node id for every record of `data`, grouped by leaf in node order.
    pub fn leaf_partition(&self, data: &SparseDataset) -> Vec<(usize, Vec<usize>)> {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for j in 0..data.m() {
            groups[self.route(|v| data.value(j, v))].push(j);
        }
        groups
            .into_iter()
            .enumerate()
            .filter(|(id, _)| matches!(self.nodes[*id], Node::Leaf { .. }))
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "DTREE 1")?;
        writeln!(w, "target {} {}", self.target, self.target_cardinality)?;
        for node in &self.nodes {
            match node {
                Node::Split { variable, children } => writeln!(w, "split {variable} {}", children.len())?,
                Node::Leaf { counts, distribution } => {
                    let c: Vec<String> = counts.iter().map(|x| x.to_string()).collect();
                    let d: Vec<String> = distribution.iter().map(|x| format!("{x:.16e}")).collect();
                    writeln!(w, "leaf {} {}", c.join(","), d.join(","))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
        let err = |line: usize, reason: &str| Error::Format {
            line,
            reason: reason.to_string(),
        };
        if lines.first().map(String::as_str) != Some("DTREE 1") {
            return Err(err(1, "expected `DTREE 1`"));
        }
        let header: Vec<&str> = lines.get(1).map(|l| l.split(' ').collect()).unwrap_or_default();
        let (target, target_cardinality) = match header.as_slice() {
            ["target", t, r] => (
                t.parse().map_err(|_| err(2, "bad target index"))?,
                r.parse().map_err(|_| err(2, "bad target cardinality"))?,
            ),
            _ => return Err(err(2, "expected `target <index> <cardinality>`")),
        };

        let mut nodes = Vec::new();
        // pre-order: each split reserves slots that later lines fill
        let mut open: Vec<(usize, usize)> = Vec::new(); // (split node, children still expected)
        for (k, line) in lines.iter().enumerate().skip(2) {
            let no = k + 1;
            if nodes.len() > 0 && open.is_empty() {
                return Err(err(no, "trailing node after a complete tree"));
            }
            let id = nodes.len();
            if let Some((parent, _)) = open.last() {
                if let Node::Split { children, .. } = &mut nodes[*parent] {
                    children.push(id);
                }
            }
            if let Some(top) = open.last_mut() {
                top.1 -= 1;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["split", v, arity] => {
                    let variable = v.parse().map_err(|_| err(no, "bad split variable"))?;
                    let arity: usize = arity.parse().map_err(|_| err(no, "bad arity"))?;
                    if arity == 0 {
                        return Err(err(no, "split without children"));
                    }
                    nodes.push(Node::Split {
                        variable,
                        children: Vec::with_capacity(arity),
                    });
                    open.push((id, arity));
                }
                ["leaf", c, d] => {
                    let parse = |s: &str| -> Result<Vec<f64>> {
                        s.split(',')
                            .map(|x| x.parse::<f64>().map_err(|_| err(no, "bad number")))
                            .collect()
                    };
                    let counts = parse(c)?;
                    let distribution = parse(d)?;
                    if counts.len() != target_cardinality || distribution.len() != target_cardinality {
                        return Err(err(no, "leaf vector length differs from target cardinality"));
                    }
                    nodes.push(Node::Leaf { counts, distribution });
                }
                _ => return Err(err(no, "expected `split` or `leaf` line")),
            }
            while open.last().is_some_and(|&(_, left)| left == 0) {
                open.pop();
            }
        }
        if nodes.is_empty() || !open.is_empty() {
            return Err(err(lines.len(), "incomplete tree"));
        }
        Ok(Self {
            target,
            target_cardinality,
            nodes,
        })
    }
}

struct Growing {
    counts: Vec<f64>,
    records: Vec<usize>,
    path: Vec<usize>,
    depth: usize,
    best: Option<SplitScore>,
}

enum BuildNode {
    Leaf(Growing),
    Split { variable: usize, children: Vec<usize> },
}

fn leaf_distribution(counts: &[f64], pseudo: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + pseudo * counts.len() as f64;
    counts.iter().map(|c| (c + pseudo) / total).collect()
}

fn best_candidate(counts: &CountSet, path: &[usize], config: &TreeConfig) -> Result<Option<SplitScore>> {
    let mut best: Option<SplitScore> = None;
    for (var, table) in counts.two_way.tables() {
        if path.contains(&var) {
            continue;
        }
        let min = config.min_leaf_records as f64;
        if table.columns().into_iter().any(|c| {
            let s = c.sum();
            s > 0.0 && s < min
        }) {
            continue;
        }
        let score = score_split(var, counts.target_counts(), table, config.pseudo_count)?;
        // tables come in variable order, so strict improvement keeps the lowest index on ties
        if best.is_none_or(|b| score.log_bayes_factor > b.log_bayes_factor) {
            best = Some(score);
        }
    }
    Ok(best.filter(|b| b.log_bayes_factor > 0.0))
}

/// Greedy tree for `target`, scoring candidates with counts from `source`.
pub fn learn_tree_with<S: CountSource>(
    data: &SparseDataset,
    target: usize,
    config: &TreeConfig,
    source: &mut S,
) -> Result<DecisionTree> {
    if target >= data.n() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: data.n(),
        });
    }
    if !(config.pseudo_count > 0.0) || config.min_leaf_records == 0 {
        return Err(Error::Config("pseudo_count and min_leaf_records must be positive".into()));
    }

    let grow = |source: &mut S, records: Vec<usize>, path: Vec<usize>, depth: usize| -> Result<Growing> {
        let view = DatasetView::from_sorted_unchecked(data, records);
        let counts = source.counts(&view, target)?;
        let best = if config.max_depth.is_some_and(|d| depth >= d) {
            None
        } else {
            best_candidate(&counts, &path, config)?
        };
        Ok(Growing {
            counts: counts.target_counts().to_vec(),
            records: view.into_indices(),
            path,
            depth,
            best,
        })
    };

    // build-order arena; leaf creation order == arena index
    let mut arena = vec![BuildNode::Leaf(grow(source, (0..data.m()).collect(), Vec::new(), 0)?)];
    loop {
        let mut chosen: Option<(usize, SplitScore)> = None;
        for (id, node) in arena.iter().enumerate() {
            let BuildNode::Leaf(Growing { best: Some(s), .. }) = node else {
                continue;
            };
            let better = match chosen {
                None => true,
                Some((_, c)) => {
                    s.log_bayes_factor > c.log_bayes_factor
                        || (s.log_bayes_factor == c.log_bayes_factor && s.variable < c.variable)
                }
            };
            if better {
                chosen = Some((id, *s));
            }
        }
        let Some((id, split)) = chosen else { break };

        let placeholder = BuildNode::Split {
            variable: split.variable,
            children: Vec::new(),
        };
        let BuildNode::Leaf(leaf) = std::mem::replace(&mut arena[id], placeholder) else {
            unreachable!()
        };
        let arity = data.cardinality(split.variable);
        let mut buckets = vec![Vec::new(); arity];
        for &j in &leaf.records {
            buckets[data.value(j, split.variable)].push(j);
        }
        let mut path = leaf.path.clone();
        path.push(split.variable);
        let mut children = Vec::with_capacity(arity);
        for bucket in buckets {
            children.push(arena.len());
            let child = grow(source, bucket, path.clone(), leaf.depth + 1)?;
            arena.push(BuildNode::Leaf(child));
        }
        arena[id] = BuildNode::Split {
            variable: split.variable,
            children,
        };
    }

    // re-lay the arena in pre-order
    let mut nodes = Vec::with_capacity(arena.len());
    fn emit(arena: &[BuildNode], id: usize, pseudo: f64, out: &mut Vec<Node>) {
        match &arena[id] {
            BuildNode::Leaf(g) => out.push(Node::Leaf {
                counts: g.counts.clone(),
                distribution: leaf_distribution(&g.counts, pseudo),
            }),
            BuildNode::Split { variable, children } => {
                let at = out.len();
                out.push(Node::Split {
                    variable: *variable,
                    children: Vec::new(),
                });
                let mut ids = Vec::with_capacity(children.len());
                for &c in children {
                    ids.push(out.len());
                    emit(arena, c, pseudo, out);
                }
                out[at] = Node::Split {
                    variable: *variable,
                    children: ids,
                };
            }
        }
    }
    emit(&arena, 0, config.pseudo_count, &mut nodes);
    Ok(DecisionTree {
        target,
        target_cardinality: data.cardinality(target),
        nodes,
    })
}

/// Greedy tree using the sparse count extraction.
pub fn learn_tree(data: &SparseDataset, target: usize, config: &TreeConfig) -> Result<DecisionTree> {
    learn_tree_with(data, target, config, &mut CountPath::Sparse)
}

pub fn write_predictions_csv<W: Write>(tree: &DecisionTree, data: &SparseDataset, mut w: W) -> Result<()> {
    let defaults = data.defaults();
    write!(w, "record")?;
    for t in 0..tree.target_cardinality {
        write!(w, ",p{t}")?;
    }
    writeln!(w)?;
    for (j, rec) in data.records().iter().enumerate() {
        write!(w, "{j}")?;
        for p in tree.predict(rec, &defaults) {
            write!(w, ",{p:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse_store::tests::figure1;
    use crate::sparse_store::{Entry, VariableSchema};
    use ndarray::array;

    /// ln Γ(a + n) - ln Γ(a) as a rising-factorial sum, valid for integer n.
    fn log_rising(a: f64, n: f64) -> f64 {
        (0..n as usize).map(|k| (a + k as f64).ln()).sum()
    }

    fn oracle_marginal(counts: &[f64], alpha: f64) -> f64 {
        let total: f64 = counts.iter().sum();
        counts.iter().map(|&n| log_rising(alpha, n)).sum::<f64>() - log_rising(alpha * counts.len() as f64, total)
    }

    #[test]
    fn single_nonempty_column_scores_zero() {
        let t = array![[3.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let s = score_split(1, &[3.0, 5.0], &t, 1.0).unwrap();
        assert!(s.log_bayes_factor.abs() < 1e-12);
    }

    #[test]
    fn perfect_split_of_two_by_two() {
        // columns (2,0), (0,2): each marginal is 1/3; leaf (2,2) has 1/30
        let t = array![[2.0, 0.0], [0.0, 2.0]];
        let s = score_split(0, &[2.0, 2.0], &t, 1.0).unwrap();
        assert!((s.log_bayes_factor - (10.0f64 / 3.0).ln()).abs() < 1e-12);
        let oracle = 2.0 * oracle_marginal(&[2.0, 0.0], 1.0) - oracle_marginal(&[2.0, 2.0], 1.0);
        assert!((s.log_bayes_factor - oracle).abs() < 1e-12);
    }

    #[test]
    fn score_rejects_bad_inputs() {
        let t = array![[1.0, 1.0], [0.0, 2.0]];
        assert!(score_split(0, &[2.0, 2.0], &t, 0.0).is_err());
        assert!(score_split(0, &[2.0, 3.0], &t, 1.0).is_err());
        let neg = array![[-1.0, 3.0], [0.0, 2.0]];
        assert!(score_split(0, &[2.0, 2.0], &neg, 1.0).is_err());
        let nan = array![[f64::NAN, 2.0], [0.0, 2.0]];
        assert!(score_split(0, &[2.0, 2.0], &nan, 1.0).is_err());
    }

    fn copy_dataset(m: usize) -> SparseDataset {
        // T (var 0) copies X1 (var 1); X2 alternates independently-ish
        let schema = vec![
            VariableSchema::new("t", 2, 0),
            VariableSchema::new("x1", 2, 0),
            VariableSchema::new("x2", 2, 0),
        ];
        let records = (0..m)
            .map(|j| {
                let mut e = Vec::new();
                let v = usize::from(j % 2 == 0);
                if v == 1 {
                    e.push(Entry::new(0, 1));
                    e.push(Entry::new(1, 1));
                }
                if (j / 2) % 2 == 0 {
                    e.push(Entry::new(2, 1));
                }
                SparseRecord::new(e)
            })
            .collect();
        SparseDataset::new(schema, records).unwrap()
    }

    #[test]
    fn copied_variable_is_root_split() {
        let ds = copy_dataset(40);
        let tree = learn_tree(&ds, 0, &TreeConfig::default()).unwrap();
        assert_eq!(tree.root_split(), Some(1));
        assert_eq!(tree.leaf_count(), 2);
    }

    #[test]
    fn constant_columns_give_single_leaf() {
        let schema = vec![
            VariableSchema::new("t", 2, 0),
            VariableSchema::new("a", 3, 0),
            VariableSchema::new("b", 2, 1),
        ];
        let records = (0..30)
            .map(|j| SparseRecord::new(if j % 3 == 0 { vec![Entry::new(0, 1)] } else { vec![] }))
            .collect();
        let ds = SparseDataset::new(schema, records).unwrap();
        let tree = learn_tree(&ds, 0, &TreeConfig::default()).unwrap();
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(tree.root_split(), None);
    }

    #[test]
    fn figure1_sparse_and_dense_paths_agree() {
        let ds = figure1();
        for target in 0..3 {
            let sparse = learn_tree_with(&ds, target, &TreeConfig::default(), &mut CountPath::Sparse).unwrap();
            let dense = learn_tree_with(&ds, target, &TreeConfig::default(), &mut CountPath::Dense).unwrap();
            assert_eq!(sparse, dense);
        }
    }

    #[test]
    fn predict_routes_defaults_and_matches_dense_routing() {
        let ds = copy_dataset(40);
        let tree = learn_tree(&ds, 0, &TreeConfig::default()).unwrap();
        let defaults = ds.defaults();
        let all_default = SparseRecord::default();
        let p = tree.predict(&all_default, &defaults);
        assert!(p[0] > p[1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, rec) in ds.records().iter().enumerate() {
            let dense = ds.densify(j).unwrap();
            let leaf = tree.route(|v| dense[v]);
            let Node::Leaf { distribution, .. } = &tree.nodes()[leaf] else { panic!() };
            assert_eq!(tree.predict(rec, &defaults), distribution.as_slice());
        }
    }

    #[test]
    fn single_leaf_predicts_its_distribution() {
        let ds = figure1();
        let cfg = TreeConfig {
            max_depth: Some(0),
            ..TreeConfig::default()
        };
        let tree = learn_tree(&ds, 2, &cfg).unwrap();
        assert_eq!(tree.nodes().len(), 1);
        // SS(C) = (4,1,2), pseudo-count 1
        let expect = [5.0 / 10.0, 2.0 / 10.0, 3.0 / 10.0];
        for rec in ds.records() {
            let p = tree.predict(rec, &ds.defaults());
            for (a, b) in p.iter().zip(expect) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tree_file_round_trip() {
        let ds = copy_dataset(24);
        let tree = learn_tree(&ds, 0, &TreeConfig::default()).unwrap();
        let mut buf = Vec::new();
        tree.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("DTREE 1\ntarget 0 2\nsplit 1 2\nleaf "));
        assert_eq!(DecisionTree::read_from(&buf[..]).unwrap(), tree);
        assert!(DecisionTree::read_from("DTREE 1\ntarget 0 2\nsplit 1 2\nleaf 1,0 0.5,0.5\n".as_bytes()).is_err());
        assert!(DecisionTree::read_from("DTREE 1\ntarget 0 2\nleaf 1,0 0.5,0.5\nleaf 1,0 0.5,0.5\n".as_bytes()).is_err());
    }

    #[test]
    fn partition_covers_records() {
        let ds = copy_dataset(40);
        let tree = learn_tree(&ds, 0, &TreeConfig::default()).unwrap();
        let parts = tree.leaf_partition(&ds);
        let mut all: Vec<usize> = parts.iter().flat_map(|(_, r)| r.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        for (id, recs) in parts {
            let Node::Leaf { counts, .. } = &tree.nodes()[id] else { panic!() };
            assert_eq!(counts.iter().sum::<f64>(), recs.len() as f64);
        }
    }
}
