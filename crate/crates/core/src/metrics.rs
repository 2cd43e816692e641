//! External clustering-quality metrics against held-out labels: NMI, ARI,
//! homogeneity/completeness/V-measure, per-class precision and recall under
//! majority mapping, and top-K cluster accuracy.

use crate::{Error, Result};
use std::collections::BTreeMap;

/// Cluster × class contingency counts with marginals.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub cluster_marginals: Vec<u64>,
    pub class_marginals: Vec<u64>,
    pub total: u64,
    cluster_index: BTreeMap<usize, usize>,
    class_index: BTreeMap<usize, usize>,
}

impl ContingencyTable {
    pub fn from_labels(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Contract(format!(
                "label lengths differ: {} vs {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut cluster_index = BTreeMap::new();
        let mut class_index = BTreeMap::new();
        for p in pred {
            let next = cluster_index.len();
            cluster_index.entry(*p).or_insert(next);
        }
        for t in truth {
            let next = class_index.len();
            class_index.entry(*t).or_insert(next);
        }
        let (nr, nc) = (cluster_index.len(), class_index.len());
        let mut counts = vec![vec![0u64; nc]; nr];
        for (p, t) in pred.iter().zip(truth) {
            counts[cluster_index[p]][class_index[t]] += 1;
        }
        let cluster_marginals: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let mut class_marginals = vec![0u64; nc];
        for row in &counts {
            for (j, c) in row.iter().enumerate() {
                class_marginals[j] += c;
            }
        }
        Ok(Self {
            counts,
            cluster_marginals,
            class_marginals,
            total: pred.len() as u64,
            cluster_index,
            class_index,
        })
    }

    /// Original class label for a column index.
    pub fn class_label(&self, col: usize) -> usize {
        *self
            .class_index
            .iter()
            .find(|(_, v)| **v == col)
            .map(|(k, _)| k)
            .expect("column in range")
    }

    fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let p = c as f64 / n;
                mi += p
                    * ((c as f64 * n)
                        / (self.cluster_marginals[i] as f64 * self.class_marginals[j] as f64))
                        .ln();
            }
        }
        mi.max(0.0)
    }

    fn cluster_entropy(&self) -> f64 {
        entropy_of(&self.cluster_marginals, self.total)
    }

    fn class_entropy(&self) -> f64 {
        entropy_of(&self.class_marginals, self.total)
    }

    /// H(class | cluster).
    fn conditional_class_entropy(&self) -> f64 {
        let n = self.total as f64;
        let mut h = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            let ni = self.cluster_marginals[i] as f64;
            for &c in row {
                if c == 0 {
                    continue;
                }
                h -= (c as f64 / n) * ((c as f64) / ni).ln();
            }
        }
        h
    }

    /// H(cluster | class).
    fn conditional_cluster_entropy(&self) -> f64 {
        let n = self.total as f64;
        let mut h = 0.0;
        for row in &self.counts {
            for (j, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                h -= (c as f64 / n) * ((c as f64) / self.class_marginals[j] as f64).ln();
            }
        }
        h
    }
}

fn entropy_of(marginals: &[u64], total: u64) -> f64 {
    let n = total as f64;
    marginals
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information I/√(H·H) with natural logs; degenerate
/// entropies give 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(pred, truth)?;
    let (hp, ht) = (table.cluster_entropy(), table.class_entropy());
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    Ok((table.mutual_information() / (hp * ht).sqrt()).min(1.0))
}

fn choose2(n: u64) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index via pair counts. Degenerate partitions that agree
/// trivially score 1.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::from_labels(pred, truth)?;
    let index: f64 = table
        .counts
        .iter()
        .flat_map(|row| row.iter())
        .map(|&c| choose2(c))
        .sum();
    let a: f64 = table.cluster_marginals.iter().map(|&c| choose2(c)).sum();
    let b: f64 = table.class_marginals.iter().map(|&c| choose2(c)).sum();
    let pairs = choose2(table.total);
    if pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / pairs;
    let max_index = 0.5 * (a + b);
    if (max_index - expected).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Homogeneity, completeness and V-measure. Degenerate entropies score 1;
/// the V-measure is the harmonic mean (0 when both components vanish).
pub fn homogeneity_completeness_v(pred: &[usize], truth: &[usize]) -> Result<(f64, f64, f64)> {
    let table = ContingencyTable::from_labels(pred, truth)?;
    let ht = table.class_entropy();
    let hp = table.cluster_entropy();
    let hs = if ht == 0.0 { 1.0 } else { 1.0 - table.conditional_class_entropy() / ht };
    let cs = if hp == 0.0 { 1.0 } else { 1.0 - table.conditional_cluster_entropy() / hp };
    let vm = if hs + cs == 0.0 { 0.0 } else { 2.0 * hs * cs / (hs + cs) };
    Ok((hs, cs, vm))
}

/// Per-class precision and recall with clusters mapped to their majority
/// class (ties toward the lower class id). Multiple clusters may map to one
/// class; classes that attract no cluster score (0, 0).
pub fn per_class_precision_recall(pred: &[usize], truth: &[usize]) -> Result<Vec<ClassScore>> {
    let table = ContingencyTable::from_labels(pred, truth)?;
    let mapping = majority_mapping(&table);
    let nc = table.class_marginals.len();
    // predicted[j] = samples landing in clusters mapped to class j;
    // hits[j] = those whose true class is j.
    let mut predicted = vec![0u64; nc];
    let mut hits = vec![0u64; nc];
    for (i, row) in table.counts.iter().enumerate() {
        let target = mapping[i];
        predicted[target] += table.cluster_marginals[i];
        hits[target] += row[target];
    }
    let mut out = Vec::with_capacity(nc);
    for j in 0..nc {
        let precision = if predicted[j] == 0 { 0.0 } else { hits[j] as f64 / predicted[j] as f64 };
        let recall = if table.class_marginals[j] == 0 {
            0.0
        } else {
            hits[j] as f64 / table.class_marginals[j] as f64
        };
        out.push(ClassScore { class: table.class_label(j), precision, recall });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
}

fn majority_mapping(table: &ContingencyTable) -> Vec<usize> {
    table
        .counts
        .iter()
        .map(|row| {
            let mut best = 0;
            let mut best_count = row[0];
            for (j, &c) in row.iter().enumerate().skip(1) {
                // Ties break toward the lower class id; columns are ordered
                // by class id, so strictly-greater keeps the earlier column.
                if c > best_count {
                    best = j;
                    best_count = c;
                }
            }
            best
        })
        .collect()
}

/// Keeps the K largest clusters (ties toward the earlier cluster), maps each
/// to its majority class, and counts matches over all samples; samples
/// outside the top K count as wrong.
pub fn topk_accuracy(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("top-K accuracy needs K >= 1".into()));
    }
    let table = ContingencyTable::from_labels(pred, truth)?;
    if table.total == 0 {
        return Ok(0.0);
    }
    let mapping = majority_mapping(&table);
    let mut order: Vec<usize> = (0..table.counts.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(table.cluster_marginals[i]), i));
    let kept = &order[..k.min(order.len())];
    let correct: u64 = kept.iter().map(|&i| table.counts[i][mapping[i]]).sum();
    Ok(correct as f64 / table.total as f64)
}
