//! Clustered count data and the proportion estimators built from it.
//!
//! A [`ClusteredSample`] holds `G` groups of clusters; every cluster in a
//! group has the same number of units `n_g`, and every cluster is summarized
//! as an `M`-cell table of counts.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Absolute tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Counts of one cluster over `M` cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTable {
    counts: Vec<u64>,
    cluster_size: u64,
}

impl ClusterTable {
    /// Builds a table whose cluster size is the sum of its counts.
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        let size = counts.iter().sum();
        Self::with_size(counts, size)
    }

    /// Builds a table and checks the counts add up to `cluster_size`.
    pub fn with_size(counts: Vec<u64>, cluster_size: u64) -> Result<Self> {
        if counts.len() < 2 {
            return invalid(format!("a table needs at least 2 cells, got {}", counts.len()));
        }
        if cluster_size == 0 {
            return invalid("cluster size must be positive");
        }
        let total: u64 = counts.iter().sum();
        if total != cluster_size {
            return invalid(format!(
                "counts sum to {total} but the cluster size is {cluster_size}"
            ));
        }
        Ok(Self {
            counts,
            cluster_size,
        })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn cluster_size(&self) -> u64 {
        self.cluster_size
    }

    pub fn num_cells(&self) -> usize {
        self.counts.len()
    }

    /// Per-cluster proportions `Y / n`.
    pub fn proportions(&self) -> ProportionVector {
        let n = self.cluster_size as f64;
        ProportionVector(self.counts.iter().map(|&c| c as f64 / n).collect())
    }
}

/// Clusters sharing one cluster size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterGroup {
    cluster_size: u64,
    tables: Vec<ClusterTable>,
}

impl ClusterGroup {
    pub fn new(tables: Vec<ClusterTable>) -> Result<Self> {
        let first = tables
            .first()
            .ok_or_else(|| Error::InvalidInput("a cluster group cannot be empty".into()))?;
        let cluster_size = first.cluster_size;
        let cells = first.num_cells();
        for t in &tables {
            if t.cluster_size != cluster_size {
                return invalid(format!(
                    "tables in a group must share the cluster size {cluster_size}, found {}",
                    t.cluster_size
                ));
            }
            if t.num_cells() != cells {
                return Err(Error::Dimension {
                    expected: cells,
                    found: t.num_cells(),
                });
            }
        }
        Ok(Self {
            cluster_size,
            tables,
        })
    }

    pub fn cluster_size(&self) -> u64 {
        self.cluster_size
    }

    pub fn tables(&self) -> &[ClusterTable] {
        &self.tables
    }

    pub fn num_clusters(&self) -> usize {
        self.tables.len()
    }

    pub fn num_cells(&self) -> usize {
        self.tables[0].num_cells()
    }

    /// Total number of units, `n_g N_g`.
    pub fn total_count(&self) -> u64 {
        self.cluster_size * self.tables.len() as u64
    }

    /// Cell totals summed over the clusters of the group.
    pub fn cell_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.num_cells()];
        for t in &self.tables {
            for (acc, &c) in totals.iter_mut().zip(&t.counts) {
                *acc += c;
            }
        }
        totals
    }

    /// Group proportions `p̂^(g) = Σ_ℓ Y^(g,ℓ) / (n_g N_g)`.
    pub fn proportions(&self) -> ProportionVector {
        let denom = self.total_count() as f64;
        ProportionVector(
            self.cell_totals()
                .into_iter()
                .map(|c| c as f64 / denom)
                .collect(),
        )
    }
}

/// The whole clustered sample: `G` groups over a common set of `M` cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusteredSample {
    groups: Vec<ClusterGroup>,
    num_cells: usize,
}

impl ClusteredSample {
    pub fn new(groups: Vec<ClusterGroup>) -> Result<Self> {
        let num_cells = groups
            .first()
            .ok_or_else(|| Error::InvalidInput("a sample needs at least one group".into()))?
            .num_cells();
        if let Some(g) = groups.iter().find(|g| g.num_cells() != num_cells) {
            return Err(Error::Dimension {
                expected: num_cells,
                found: g.num_cells(),
            });
        }
        Ok(Self { groups, num_cells })
    }

    /// Groups tables by cluster size, in order of first appearance.
    pub fn from_tables(tables: Vec<ClusterTable>) -> Result<Self> {
        let mut buckets: Vec<(u64, Vec<ClusterTable>)> = Vec::new();
        for t in tables {
            match buckets.iter_mut().find(|(n, _)| *n == t.cluster_size) {
                Some((_, v)) => v.push(t),
                None => buckets.push((t.cluster_size, vec![t])),
            }
        }
        let groups = buckets
            .into_iter()
            .map(|(_, v)| ClusterGroup::new(v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(groups)
    }

    pub fn groups(&self) -> &[ClusterGroup] {
        &self.groups
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Total number of clusters `N = Σ N_g`.
    pub fn num_clusters(&self) -> usize {
        self.groups.iter().map(ClusterGroup::num_clusters).sum()
    }

    /// Total number of units `Σ n_g N_g`.
    pub fn total_count(&self) -> u64 {
        self.groups.iter().map(ClusterGroup::total_count).sum()
    }

    /// All clusters in group order.
    pub fn clusters(&self) -> impl Iterator<Item = &ClusterTable> {
        self.groups.iter().flat_map(|g| g.tables.iter())
    }

    pub fn cell_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.num_cells];
        for g in &self.groups {
            for (acc, c) in totals.iter_mut().zip(g.cell_totals()) {
                *acc += c;
            }
        }
        totals
    }

    /// Group weights `w_g = n_g N_g / Σ_h n_h N_h`.
    pub fn group_weights(&self) -> Vec<f64> {
        let total = self.total_count() as f64;
        self.groups
            .iter()
            .map(|g| g.total_count() as f64 / total)
            .collect()
    }

    /// Pooled proportions `p̂ = Σ_g w_g p̂^(g)`.
    pub fn pooled_proportions(&self) -> ProportionVector {
        let mut p = vec![0.0; self.num_cells];
        for (w, g) in self.group_weights().into_iter().zip(&self.groups) {
            for (acc, q) in p.iter_mut().zip(g.proportions().0) {
                *acc += w * q;
            }
        }
        ProportionVector(p)
    }

    /// Effective cluster sizes `(n̂*, n̄̂)`: the `w_g`-weighted and the
    /// `N_g/N`-weighted mean cluster sizes.
    pub fn effective_cluster_sizes(&self) -> EffectiveSizes {
        let n_clusters = self.num_clusters() as f64;
        let mut n_star = 0.0;
        let mut n_bar = 0.0;
        for (w, g) in self.group_weights().into_iter().zip(&self.groups) {
            let n = g.cluster_size as f64;
            n_star += w * n;
            n_bar += g.num_clusters() as f64 / n_clusters * n;
        }
        EffectiveSizes { n_star, n_bar }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveSizes {
    /// `n̂* = Σ w_g n_g`.
    pub n_star: f64,
    /// `n̄̂ = Σ (N_g/N) n_g`.
    pub n_bar: f64,
}

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProportionVector(Vec<f64>);

impl ProportionVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return invalid("empty probability vector");
        }
        if let Some(x) = probs.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return invalid(format!("probabilities must be finite and >= 0, found {x}"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return invalid(format!("probabilities sum to {sum}, not 1"));
        }
        Ok(Self(probs))
    }

    /// Scales non-negative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return invalid("weights must be finite and >= 0");
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return invalid("weights must have a positive sum");
        }
        Ok(Self(weights.into_iter().map(|x| x / sum).collect()))
    }

    /// Uniform vector over `m` cells.
    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|&x| x > 0.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Index<usize> for ProportionVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ProportionVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProportionVector> for Vec<f64> {
    fn from(p: ProportionVector) -> Self {
        p.0
    }
}
