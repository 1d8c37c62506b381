//! Hyperplane normals as concept directions and their pairwise cosines.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::Serialize;

use super::ProbeError;
use crate::logic::TreeLayout;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct DirectionKey {
    pub node_id: u32,
    pub anchor: String,
}

/// Unit vectors keyed by `(node, anchor)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DirectionSet {
    dirs: BTreeMap<DirectionKey, Array1<f64>>,
}

impl DirectionSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `v / ‖v‖`. All vectors must share a dimension.
    pub fn insert(&mut self, node_id: u32, anchor: impl Into<String>, v: Array1<f64>) -> Result<(), ProbeError> {
        let norm = v.dot(&v).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(ProbeError::ZeroDirection);
        }
        if let Some(first) = self.dirs.values().next() {
            if first.len() != v.len() {
                return Err(ProbeError::DimensionMismatch { expected: first.len(), got: v.len() });
            }
        }
        self.dirs.insert(DirectionKey { node_id, anchor: anchor.into() }, v / norm);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn get(&self, node_id: u32, anchor: &str) -> Option<&Array1<f64>> {
        self.dirs.get(&DirectionKey { node_id, anchor: anchor.to_string() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DirectionKey, &Array1<f64>)> {
        self.dirs.iter()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Grouping {
    None,
    /// Left children, then right children, then the root.
    ChildSide(TreeLayout),
}

impl Grouping {
    fn group_of(&self, node_id: u32) -> &'static str {
        match self {
            Grouping::None => "all",
            Grouping::ChildSide(layout) => match layout.parent_of(node_id).and_then(|p| layout.children_of(p)) {
                Some((left, _)) if left == node_id => "left",
                Some(_) => "right",
                None => "root",
            },
        }
    }
}

const GROUP_ORDER: [&str; 4] = ["left", "right", "root", "all"];

#[derive(Debug, Clone, PartialEq)]
pub struct CosineMatrix {
    pub keys: Vec<DirectionKey>,
    pub groups: Vec<&'static str>,
    pub values: Array2<f64>,
}

impl CosineMatrix {
    /// Mean cosine for each group pair, excluding the diagonal.
    pub fn block_means(&self) -> BTreeMap<(&'static str, &'static str), f64> {
        let mut acc: BTreeMap<(&'static str, &'static str), (f64, usize)> = BTreeMap::new();
        let n = self.keys.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let e = acc.entry((self.groups[i], self.groups[j])).or_insert((0.0, 0));
                e.0 += self.values[[i, j]];
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect()
    }
}

/// Symmetric cosine matrix, rows ordered by group and then by key.
pub fn cosine_matrix(dirs: &DirectionSet, grouping: Grouping) -> Result<CosineMatrix, ProbeError> {
    if dirs.len() < 2 {
        return Err(ProbeError::TooFewDirections(dirs.len()));
    }
    let mut entries: Vec<(&'static str, &DirectionKey, &Array1<f64>)> =
        dirs.iter().map(|(k, v)| (grouping.group_of(k.node_id), k, v)).collect();
    entries.sort_by_key(|(g, k, _)| (GROUP_ORDER.iter().position(|x| x == g), (*k).clone()));
    let n = entries.len();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in i + 1..n {
            let c = entries[i].2.dot(entries[j].2).clamp(-1.0, 1.0);
            values[[i, j]] = c;
            values[[j, i]] = c;
        }
    }
    Ok(CosineMatrix {
        keys: entries.iter().map(|(_, k, _)| (*k).clone()).collect(),
        groups: entries.iter().map(|(g, _, _)| *g).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_and_orthonormal() {
        let mut same = DirectionSet::new();
        for n in 1..=3 {
            same.insert(n, "r", array![2.0, 0.0, 1.0]).unwrap();
        }
        let m = cosine_matrix(&same, Grouping::None).unwrap();
        assert!(m.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let mut ortho = DirectionSet::new();
        for n in 0..3 {
            let mut v = Array1::zeros(3);
            v[n] = 3.0;
            ortho.insert(n as u32 + 1, "r", v).unwrap();
        }
        let m = cosine_matrix(&ortho, Grouping::None).unwrap();
        assert_eq!(m.values, Array2::<f64>::eye(3));
    }

    #[test]
    fn child_side_ordering() {
        let layout = TreeLayout::new(2).unwrap();
        let mut d = DirectionSet::new();
        for n in 1..=3 {
            d.insert(n, "r", array![1.0, n as f64]).unwrap();
        }
        let m = cosine_matrix(&d, Grouping::ChildSide(layout)).unwrap();
        assert_eq!(m.groups, vec!["left", "right", "root"]);
        assert_eq!(m.keys.iter().map(|k| k.node_id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn rejects_bad_vectors() {
        let mut d = DirectionSet::new();
        assert!(matches!(d.insert(1, "r", array![0.0, 0.0]), Err(ProbeError::ZeroDirection)));
        d.insert(1, "r", array![1.0, 0.0]).unwrap();
        assert!(matches!(d.insert(2, "r", array![1.0]), Err(ProbeError::DimensionMismatch { .. })));
        assert!(matches!(cosine_matrix(&d, Grouping::None), Err(ProbeError::TooFewDirections(1))));
    }
}
