//! Label forest.
//!
//! A hierarchy config lists one label per line, optionally followed by
//! `<- parent`. Blank lines and `#` comments are ignored. The order of the
//! label lines is the index order of every label vector in the toolkit.
//!
//! ```text
//! Lung Opacity
//! Consolidation <- Lung Opacity
//! Pneumonia <- Consolidation
//! ```
//!
//! Each label has at most one parent, so every label has a unique path from
//! its root. Unconditional inference multiplies conditional probabilities
//! along that path.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::seed::sha256_hex;

const CHEXPERT_CONFIG: &str = include_str!("../assets/chexpert.hier");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("line {line}: empty label name")]
    EmptyLabel { line: usize },
    #[error("duplicate label '{0}'")]
    DuplicateLabel(String),
    #[error("label '{label}' has more than one parent ('{first}' and '{second}')")]
    MultipleParents {
        label: String,
        first: String,
        second: String,
    },
    #[error("label '{label}' names unknown parent '{parent}'")]
    UnknownParent { label: String, parent: String },
    #[error("cycle through label '{0}'")]
    Cycle(String),
    #[error("unknown label '{0}'")]
    UnknownLabel(String),
    #[error("hierarchy has no labels")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHierarchy {
    labels: Vec<String>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root_paths: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

impl LabelHierarchy {
    /// Parses and validates a hierarchy config.
    pub fn parse(text: &str) -> Result<Self, HierarchyError> {
        let mut labels: Vec<String> = Vec::new();
        let mut parent_names: Vec<Option<String>> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (name, parent) = match line.split_once("<-") {
                Some((child, parent)) => (child.trim(), Some(parent.trim())),
                None => (line, None),
            };
            if name.is_empty() || parent.is_some_and(str::is_empty) {
                return Err(HierarchyError::EmptyLabel { line: lineno + 1 });
            }
            if let Some(&existing) = index.get(name) {
                return Err(match (&parent_names[existing], parent) {
                    (Some(first), Some(second)) if first != second => {
                        HierarchyError::MultipleParents {
                            label: name.to_string(),
                            first: first.clone(),
                            second: second.to_string(),
                        }
                    }
                    _ => HierarchyError::DuplicateLabel(name.to_string()),
                });
            }
            index.insert(name.to_string(), labels.len());
            labels.push(name.to_string());
            parent_names.push(parent.map(str::to_string));
        }

        let parent =
            labels
                .iter()
                .zip(&parent_names)
                .map(|(label, p)| match p {
                    None => Ok(None),
                    Some(p) => index.get(p).copied().map(Some).ok_or_else(|| {
                        HierarchyError::UnknownParent {
                            label: label.clone(),
                            parent: p.clone(),
                        }
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?;

        Self::from_parents(labels, parent)
    }

    /// Builds a hierarchy from label names and parent indices.
    pub fn from_parents(
        labels: Vec<String>,
        parent: Vec<Option<usize>>,
    ) -> Result<Self, HierarchyError> {
        assert_eq!(labels.len(), parent.len(), "one parent slot per label");
        if labels.is_empty() {
            return Err(HierarchyError::Empty);
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, name) in labels.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(HierarchyError::EmptyLabel { line: i + 1 });
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(HierarchyError::DuplicateLabel(name.clone()));
            }
        }
        let n = labels.len();
        let mut children = vec![Vec::new(); n];
        for (child, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(HierarchyError::UnknownParent {
                        label: labels[child].clone(),
                        parent: format!("#{p}"),
                    });
                }
                children[p].push(child);
            }
        }

        let mut root_paths = Vec::with_capacity(n);
        for (start, name) in labels.iter().enumerate() {
            let mut path = vec![start];
            let mut cur = start;
            while let Some(p) = parent[cur] {
                if path.len() > n || p == start {
                    return Err(HierarchyError::Cycle(name.clone()));
                }
                path.push(p);
                cur = p;
            }
            path.reverse();
            root_paths.push(path);
        }

        Ok(Self {
            labels,
            parent,
            children,
            root_paths,
            index,
        })
    }

    /// The CheXpert 14-observation hierarchy shipped with the crate.
    pub fn chexpert() -> Self {
        Self::parse(CHEXPERT_CONFIG).expect("shipped chexpert hierarchy is valid")
    }

    /// A hierarchy with no edges.
    pub fn flat<S: AsRef<str>>(labels: &[S]) -> Result<Self, HierarchyError> {
        let labels: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
        let parent = vec![None; labels.len()];
        Self::from_parents(labels, parent)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn parent(&self, idx: usize) -> Option<usize> {
        self.parent[idx]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn is_root(&self, idx: usize) -> bool {
        self.parent[idx].is_none()
    }

    /// Index path from the root down to `idx` (inclusive at both ends).
    pub fn root_path_indices(&self, idx: usize) -> &[usize] {
        &self.root_paths[idx]
    }

    /// Label names from the root down to `label`.
    pub fn root_path(&self, label: &str) -> Result<Vec<&str>, HierarchyError> {
        let idx = self
            .index_of(label)
            .ok_or_else(|| HierarchyError::UnknownLabel(label.to_string()))?;
        Ok(self.root_paths[idx]
            .iter()
            .map(|&i| self.labels[i].as_str())
            .collect())
    }

    /// Labels with at least one child, in index order.
    pub fn parent_labels(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.children[i].is_empty())
            .collect()
    }

    /// Parent-child index pairs in child index order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (p, c)))
            .collect()
    }

    /// True when no label has a parent.
    pub fn is_flat(&self) -> bool {
        self.parent.iter().all(Option::is_none)
    }

    /// Canonical config text; parsing it yields an equal hierarchy.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(label);
            if let Some(p) = self.parent[i] {
                out.push_str(" <- ");
                out.push_str(&self.labels[p]);
            }
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(self.serialize().as_bytes())
    }
}

impl fmt::Display for LabelHierarchy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

impl std::str::FromStr for LabelHierarchy {
    type Err = HierarchyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chexpert_default_structure() {
        let h = LabelHierarchy::chexpert();
        assert_eq!(h.len(), 14);
        assert_eq!(h.edges().len(), 6);
        let parents: Vec<&str> = h
            .parent_labels()
            .into_iter()
            .map(|i| h.labels()[i].as_str())
            .collect();
        assert_eq!(
            parents,
            [
                "Enlarged Cardiomediastinum",
                "Lung Opacity",
                "Consolidation"
            ]
        );
        assert_eq!(h.labels()[0], "No Finding");
        assert_eq!(h.labels()[13], "Support Devices");
    }

    #[test]
    fn chexpert_root_paths() {
        let h = LabelHierarchy::chexpert();
        assert_eq!(
            h.root_path("Pneumonia").unwrap(),
            ["Lung Opacity", "Consolidation", "Pneumonia"]
        );
        assert_eq!(h.root_path("Fracture").unwrap(), ["Fracture"]);
        assert_eq!(
            h.root_path("Cardiomegaly").unwrap(),
            ["Enlarged Cardiomediastinum", "Cardiomegaly"]
        );
        assert_eq!(
            h.root_path("Nope"),
            Err(HierarchyError::UnknownLabel("Nope".into()))
        );
    }

    #[test]
    fn zero_edges_is_all_roots() {
        let h = LabelHierarchy::parse("A\nB\n# comment\n\nC\n").unwrap();
        assert_eq!(h.len(), 3);
        assert!(h.is_flat());
        for i in 0..3 {
            assert_eq!(h.root_path_indices(i), &[i]);
        }
    }

    #[test]
    fn two_node_cycle_rejected() {
        let err = LabelHierarchy::parse("A <- B\nB <- A\n").unwrap_err();
        assert!(matches!(err, HierarchyError::Cycle(_)));
    }

    #[test]
    fn self_loop_rejected() {
        assert!(matches!(
            LabelHierarchy::parse("A <- A").unwrap_err(),
            HierarchyError::Cycle(_)
        ));
    }

    #[test]
    fn validation_errors_name_the_label() {
        assert_eq!(
            LabelHierarchy::parse("A\nA\n").unwrap_err(),
            HierarchyError::DuplicateLabel("A".into())
        );
        assert_eq!(
            LabelHierarchy::parse("A\nB <- Z\n").unwrap_err(),
            HierarchyError::UnknownParent {
                label: "B".into(),
                parent: "Z".into()
            }
        );
        assert_eq!(
            LabelHierarchy::parse("A\nB\nC <- A\nC <- B\n").unwrap_err(),
            HierarchyError::MultipleParents {
                label: "C".into(),
                first: "A".into(),
                second: "B".into()
            }
        );
        assert_eq!(
            LabelHierarchy::parse("# nothing\n").unwrap_err(),
            HierarchyError::Empty
        );
    }

    #[test]
    fn forward_parent_reference_is_allowed() {
        let h = LabelHierarchy::parse("B <- A\nA\n").unwrap();
        assert_eq!(h.root_path("B").unwrap(), ["A", "B"]);
        assert_eq!(h.labels(), ["B", "A"]);
    }

    #[test]
    fn trailing_comment_on_edge_line() {
        let h = LabelHierarchy::parse("A\nB <- A # child of A\n").unwrap();
        assert_eq!(h.parent(1), Some(0));
    }

    fn forest() -> impl Strategy<Value = Vec<Option<usize>>> {
        (1usize..20).prop_flat_map(|n| {
            (0..n)
                .map(|i| {
                    if i == 0 {
                        Just(None).boxed()
                    } else {
                        prop_oneof![Just(None), (0..i).prop_map(Some)].boxed()
                    }
                })
                .collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn root_paths_are_valid(parents in forest()) {
            let n = parents.len();
            let labels: Vec<String> = (0..n).map(|i| format!("L{i}")).collect();
            let h = LabelHierarchy::from_parents(labels, parents.clone()).unwrap();
            for k in 0..n {
                let path = h.root_path_indices(k);
                prop_assert!(path.len() <= n);
                prop_assert!(parents[path[0]].is_none());
                prop_assert_eq!(*path.last().unwrap(), k);
                for w in path.windows(2) {
                    prop_assert_eq!(parents[w[1]], Some(w[0]));
                }
                let mut seen = path.to_vec();
                seen.sort_unstable();
                seen.dedup();
                prop_assert_eq!(seen.len(), path.len());
            }
        }

        #[test]
        fn serialize_round_trips(parents in forest()) {
            let labels: Vec<String> = (0..parents.len()).map(|i| format!("label {i}")).collect();
            let h = LabelHierarchy::from_parents(labels, parents).unwrap();
            let again = LabelHierarchy::parse(&h.serialize()).unwrap();
            prop_assert_eq!(&again, &h);
            prop_assert_eq!(again.digest(), h.digest());
        }
    }
}
