//! The ROI schema and the two ROI graphs.
//!
//! The first graph links naturally connected joints; the second links every
//! pair of ROIs in the same anatomy group. Both get self-loops before
//! normalization.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::NUM_ROIS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnatomyGroup {
    A,
    B,
    C,
    D,
}

impl AnatomyGroup {
    pub const ALL: [AnatomyGroup; 4] = [AnatomyGroup::A, AnatomyGroup::B, AnatomyGroup::C, AnatomyGroup::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" => Some(Self::A),
            "B" => Some(Self::B),
            "C" => Some(Self::C),
            "D" => Some(Self::D),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
            Self::D => "D",
        }
    }
}

/// The on-disk schema document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub rois: Vec<RoiEntry>,
    pub g1_edges: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub name: String,
    pub group: String,
}

/// Validated ROI set, anatomy groups and joint graph edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiSchema {
    names: Vec<String>,
    groups: Vec<AnatomyGroup>,
    /// Undirected joint edges, stored once with `u < v`, sorted.
    g1_edges: Vec<(usize, usize)>,
}

impl RoiSchema {
    /// The shipped 17-ROI schema.
    ///
    /// Fingers 1..5 form chains `A_i - B_i - C_i`; `C1..C3` attach to `D1`,
    /// `C4, C5` to `D2`, and `D1 - D2` are joined.
    pub fn default_hand() -> Self {
        Self::from_config(&default_schema_config()).expect("shipped schema is valid")
    }

    /// Parses and validates a schema document with exactly 17 ROIs.
    pub fn from_config(cfg: &SchemaConfig) -> Result<Self> {
        Self::from_config_with_count(cfg, NUM_ROIS)
    }

    /// Same validation with a different expected ROI count, for experiments
    /// on larger or smaller hands.
    pub fn from_config_with_count(cfg: &SchemaConfig, expected: usize) -> Result<Self> {
        if cfg.rois.len() != expected {
            return Err(Error::Schema(format!(
                "expected {} ROIs, found {}",
                expected,
                cfg.rois.len()
            )));
        }
        let mut index = BTreeMap::new();
        let mut groups = Vec::with_capacity(cfg.rois.len());
        for (i, roi) in cfg.rois.iter().enumerate() {
            if index.insert(roi.name.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate ROI name `{}`", roi.name)));
            }
            let g = AnatomyGroup::parse(&roi.group).ok_or_else(|| {
                Error::Schema(format!("ROI `{}` has unknown group `{}`", roi.name, roi.group))
            })?;
            groups.push(g);
        }
        let present: BTreeSet<_> = groups.iter().copied().collect();
        if present.len() != AnatomyGroup::ALL.len() {
            return Err(Error::Schema(format!(
                "all four anatomy groups must be used, found {}",
                present.len()
            )));
        }

        let mut directed = BTreeSet::new();
        for [a, b] in &cfg.g1_edges {
            let u = *index
                .get(a)
                .ok_or_else(|| Error::Schema(format!("edge references unknown ROI `{}`", a)))?;
            let v = *index
                .get(b)
                .ok_or_else(|| Error::Schema(format!("edge references unknown ROI `{}`", b)))?;
            if u == v {
                return Err(Error::Schema(format!("self-loop on `{}` in joint edges", a)));
            }
            if !directed.insert((u, v)) {
                return Err(Error::Schema(format!("duplicate edge `{}`-`{}`", a, b)));
            }
        }
        // Either every edge is listed once, or every edge is listed in both
        // directions. A mix means the list is not symmetric.
        let reversed = directed.iter().filter(|&&(u, v)| directed.contains(&(v, u))).count();
        if reversed != 0 && reversed != directed.len() {
            let (u, v) = *directed.iter().find(|&&(u, v)| !directed.contains(&(v, u))).unwrap();
            return Err(Error::Schema(format!(
                "asymmetric edge list: `{}`-`{}` has no reverse while other edges do",
                cfg.rois[u].name, cfg.rois[v].name
            )));
        }
        let g1_edges: BTreeSet<(usize, usize)> = directed.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
        Ok(Self {
            names: cfg.rois.iter().map(|r| r.name.clone()).collect(),
            groups,
            g1_edges: g1_edges.into_iter().collect(),
        })
    }

    pub fn to_config(&self) -> SchemaConfig {
        SchemaConfig {
            rois: self
                .names
                .iter()
                .zip(&self.groups)
                .map(|(n, g)| RoiEntry {
                    name: n.clone(),
                    group: g.as_str().to_string(),
                })
                .collect(),
            g1_edges: self
                .g1_edges
                .iter()
                .map(|&(u, v)| [self.names[u].clone(), self.names[v].clone()])
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[AnatomyGroup] {
        &self.groups
    }

    pub fn group_of(&self, roi: usize) -> AnatomyGroup {
        self.groups[roi]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn g1_edges(&self) -> &[(usize, usize)] {
        &self.g1_edges
    }

    /// Names of the joint-graph neighbours of `name`, sorted.
    pub fn g1_neighbors(&self, name: &str) -> Vec<&str> {
        let Some(i) = self.index_of(name) else {
            return Vec::new();
        };
        let mut out: Vec<&str> = self
            .g1_edges
            .iter()
            .filter_map(|&(u, v)| match (u == i, v == i) {
                (true, _) => Some(self.names[v].as_str()),
                (_, true) => Some(self.names[u].as_str()),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Names sharing `name`'s anatomy group, excluding `name`, sorted.
    pub fn g2_neighbors(&self, name: &str) -> Vec<&str> {
        let Some(i) = self.index_of(name) else {
            return Vec::new();
        };
        let mut out: Vec<&str> = (0..self.len())
            .filter(|&j| j != i && self.groups[j] == self.groups[i])
            .map(|j| self.names[j].as_str())
            .collect();
        out.sort_unstable();
        out
    }

    /// Relabels nodes: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.len())?;
        let mut inverse = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        let mut edges: Vec<(usize, usize)> = self
            .g1_edges
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (inverse[u], inverse[v]);
                (a.min(b), a.max(b))
            })
            .collect();
        edges.sort_unstable();
        Ok(Self {
            names: perm.iter().map(|&p| self.names[p].clone()).collect(),
            groups: perm.iter().map(|&p| self.groups[p]).collect(),
            g1_edges: edges,
        })
    }

    /// Canonical text used for schema fingerprints.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        for (n, g) in self.names.iter().zip(&self.groups) {
            s.push_str(&format!("{}:{};", n, g.as_str()));
        }
        s.push('|');
        for &(u, v) in &self.g1_edges {
            s.push_str(&format!("{}-{};", self.names[u], self.names[v]));
        }
        s
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || core::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidConfig(format!("not a permutation of 0..{}", n)));
    }
    Ok(())
}

pub fn default_schema_config() -> SchemaConfig {
    let mut rois = Vec::new();
    for g in ["A", "B", "C"] {
        for i in 1..=5 {
            rois.push(RoiEntry {
                name: format!("{}{}", g, i),
                group: g.to_string(),
            });
        }
    }
    for i in 1..=2 {
        rois.push(RoiEntry {
            name: format!("D{}", i),
            group: "D".to_string(),
        });
    }
    let mut edges = Vec::new();
    for i in 1..=5 {
        edges.push([format!("A{}", i), format!("B{}", i)]);
        edges.push([format!("B{}", i), format!("C{}", i)]);
        let d = if i <= 3 { "D1" } else { "D2" };
        edges.push([format!("C{}", i), d.to_string()]);
    }
    edges.push(["D1".to_string(), "D2".to_string()]);
    SchemaConfig {
        rois,
        g1_edges: edges,
    }
}

/// How the degree normalization is applied around `A + I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LaplacianMode {
    /// `D^-1/2 (A + I) D^-1/2`, symmetric.
    #[default]
    Symmetric,
    /// `D^-1/2 (A + I) D^+1/2`; not symmetric, but similar to `Symmetric`.
    Literal,
}

/// Adjacency, degree and propagation matrices of both ROI graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGraph {
    pub adjacency: [Tensor; 2],
    /// Row sums of `A + I`.
    pub degree: [Vec<f64>; 2],
    pub propagation: [Tensor; 2],
    pub mode: LaplacianMode,
}

impl DualGraph {
    pub fn build(schema: &RoiSchema, mode: LaplacianMode) -> Self {
        let n = schema.len();
        let mut a1 = Tensor::zeros(&[n, n]);
        for &(u, v) in schema.g1_edges() {
            a1.data_mut()[u * n + v] = 1.0;
            a1.data_mut()[v * n + u] = 1.0;
        }
        let mut a2 = Tensor::zeros(&[n, n]);
        for u in 0..n {
            for v in 0..n {
                if u != v && schema.group_of(u) == schema.group_of(v) {
                    a2.data_mut()[u * n + v] = 1.0;
                }
            }
        }
        let l1 = normalized_propagation(&a1, mode).expect("schema adjacency is symmetric");
        let l2 = normalized_propagation(&a2, mode).expect("group adjacency is symmetric");
        Self {
            degree: [self_loop_degree(&a1), self_loop_degree(&a2)],
            adjacency: [a1, a2],
            propagation: [l1, l2],
            mode,
        }
    }

    pub fn nodes(&self) -> usize {
        self.adjacency[0].shape()[0]
    }
}

fn self_loop_degree(a: &Tensor) -> Vec<f64> {
    let n = a.shape()[0];
    (0..n).map(|i| 1.0 + a.row(i).iter().sum::<f64>()).collect()
}

/// Degree-normalized `A + I` for a symmetric 0/1 adjacency with zero diagonal.
pub fn normalized_propagation(adjacency: &Tensor, mode: LaplacianMode) -> Result<Tensor> {
    let (n, m) = adjacency.dims2("normalized_propagation")?;
    if n != m {
        return Err(Error::shape("normalized_propagation", format!("{}x{} adjacency", n, m)));
    }
    for i in 0..n {
        if adjacency.get2(i, i) != 0.0 {
            return Err(Error::InvalidConfig(format!("adjacency has a self-loop at node {}", i)));
        }
        for j in 0..n {
            let v = adjacency.get2(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidConfig(format!("adjacency entry ({}, {}) is {}", i, j, v)));
            }
            if v != adjacency.get2(j, i) {
                return Err(Error::InvalidConfig(format!("adjacency is asymmetric at ({}, {})", i, j)));
            }
        }
    }
    let deg = self_loop_degree(adjacency);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = adjacency.get2(i, j) + if i == j { 1.0 } else { 0.0 };
            if a == 0.0 {
                continue;
            }
            out[i * n + j] = match mode {
                LaplacianMode::Symmetric => a / libm::sqrt(deg[i] * deg[j]),
                LaplacianMode::Literal => a * libm::sqrt(deg[j] / deg[i]),
            };
        }
    }
    Tensor::new(vec![n, n], out)
}
