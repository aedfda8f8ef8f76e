#![allow(dead_code)]

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparselearn::{Entry, SparseDataset, SparseRecord, VariableSchema};

/// Random schema (cardinality 2..=max_card, random defaults) and records
/// where each cell is non-default with probability `density`.
pub fn random_dataset(rng: &mut ChaCha8Rng, max_n: usize, max_m: usize, max_card: usize, density: f64) -> SparseDataset {
    let n = rng.random_range(1..=max_n);
    let m = rng.random_range(1..=max_m);
    let schema: Vec<VariableSchema> = (0..n)
        .map(|i| {
            let r = rng.random_range(2..=max_card);
            VariableSchema::new(format!("v{i}"), r, rng.random_range(0..r))
        })
        .collect();
    let records = (0..m)
        .map(|_| {
            let mut entries = Vec::new();
            for (i, v) in schema.iter().enumerate() {
                if rng.random::<f64>() < density {
                    let mut x = rng.random_range(0..v.cardinality - 1);
                    if x >= v.default_value {
                        x += 1;
                    }
                    entries.push(Entry::new(i, x));
                }
            }
            SparseRecord::new(entries)
        })
        .collect();
    SparseDataset::new(schema, records).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_subset(rng: &mut ChaCha8Rng, m: usize) -> Vec<usize> {
    (0..m).filter(|_| rng.random::<f64>() < 0.5).collect()
}

/// Binary target copying variable 1, plus noise variables.
pub fn copy_dataset(m: usize, noise_vars: usize, seed: u64) -> SparseDataset {
    let mut r = rng(seed);
    let mut schema = vec![VariableSchema::new("t", 2, 0), VariableSchema::new("x1", 2, 0)];
    for k in 0..noise_vars {
        schema.push(VariableSchema::new(format!("z{k}"), 2, 0));
    }
    let records = (0..m)
        .map(|_| {
            let mut e = Vec::new();
            if r.random::<bool>() {
                e.push(Entry::new(0, 1));
                e.push(Entry::new(1, 1));
            }
            for k in 0..noise_vars {
                if r.random::<bool>() {
                    e.push(Entry::new(2 + k, 1));
                }
            }
            SparseRecord::new(e)
        })
        .collect();
    SparseDataset::new(schema, records).unwrap()
}

pub fn report(id: u32, name: &str, ok: bool, detail: &str) {
    // written to the raw handle so the line shows up without --nocapture
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id} [{status}] {name}: {detail}");
}
