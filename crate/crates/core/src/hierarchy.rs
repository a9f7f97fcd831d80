//! Class taxonomies and the LCA-height semantic similarity between leaf classes.
//!
//! The input format is a tab-separated edge list, one `parent<TAB>child` pair
//! per line. Blank lines and lines starting with `#` are skipped. Classes are
//! leaves; their label order comes from an optional class-list file (one name
//! per line, line number = label index) or, without one, from sorting the
//! leaf names.
//!
//! Similarity between classes `a` and `b` is `1 - height(lca(a, b)) / H`,
//! where `height` is the length of the longest downward path to a leaf and
//! `H` is the height of the root.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ClassHierarchy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    depth: Vec<usize>,
    height: Vec<usize>,
    classes: Vec<usize>,
}

impl ClassHierarchy {
    /// Parses an edge list. `class_list`, when given, fixes the label order.
    pub fn parse(text: &str, class_list: Option<&[String]>) -> Result<Self> {
        Self::parse_named(text, class_list, "<hierarchy>")
    }

    pub fn from_files(hierarchy: &Path, class_list: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(hierarchy).map_err(|e| Error::io(hierarchy, e))?;
        let classes = class_list.map(read_class_list).transpose()?;
        Self::parse_named(&text, classes.as_deref(), &hierarchy.display().to_string())
    }

    fn parse_named(text: &str, class_list: Option<&[String]>, source: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut parent: Vec<Option<usize>> = Vec::new();
        let mut children: Vec<Vec<usize>> = Vec::new();
        let mut seen_edges = HashSet::new();

        let mut intern = |name: &str,
                          names: &mut Vec<String>,
                          parent: &mut Vec<Option<usize>>,
                          children: &mut Vec<Vec<usize>>| {
            *index.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                parent.push(None);
                children.push(Vec::new());
                names.len() - 1
            })
        };

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let format_err = |message: String| Error::Format {
                path: source.to_string(),
                line: lineno + 1,
                message,
            };
            let mut fields = line.split('\t');
            let (Some(p), Some(c), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(format_err("expected exactly `parent<TAB>child`".into()));
            };
            let (p, c) = (p.trim(), c.trim());
            if p.is_empty() || c.is_empty() {
                return Err(format_err("empty or whitespace-only node name".into()));
            }
            if !seen_edges.insert((p.to_string(), c.to_string())) {
                return Err(Error::DuplicateEdge {
                    parent: p.into(),
                    child: c.into(),
                    line: lineno + 1,
                });
            }
            let pi = intern(p, &mut names, &mut parent, &mut children);
            let ci = intern(c, &mut names, &mut parent, &mut children);
            if let Some(existing) = parent[ci] {
                return Err(Error::MultipleParents {
                    child: c.into(),
                    first: names[existing].clone(),
                    second: p.into(),
                });
            }
            parent[ci] = Some(pi);
            children[pi].push(ci);
        }

        if names.is_empty() {
            return Err(Error::DegenerateHierarchy("no edges".into()));
        }
        if let Some(witness) = find_cycle(&parent, &names) {
            return Err(Error::Cycle { witness });
        }
        let roots: Vec<usize> = (0..names.len()).filter(|&i| parent[i].is_none()).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            _ => {
                return Err(Error::Forest {
                    roots: roots.iter().map(|&r| names[r].clone()).collect(),
                })
            }
        };

        let depth = depths(root, &children, names.len());
        let height = heights(root, &children, names.len());

        let leaves: Vec<usize> = (0..names.len())
            .filter(|&i| children[i].is_empty())
            .collect();
        let classes = match class_list {
            Some(list) => {
                let mut out = Vec::with_capacity(list.len());
                let mut dup = HashSet::new();
                for name in list {
                    let &i = index
                        .get(name.as_str())
                        .ok_or_else(|| Error::UnknownClass(name.clone()))?;
                    if !children[i].is_empty() {
                        return Err(Error::DegenerateHierarchy(format!(
                            "class {name} is not a leaf"
                        )));
                    }
                    if !dup.insert(i) {
                        return Err(Error::DegenerateHierarchy(format!(
                            "class {name} listed twice"
                        )));
                    }
                    out.push(i);
                }
                out
            }
            None => {
                let mut sorted = leaves;
                sorted.sort_by(|&a, &b| names[a].cmp(&names[b]));
                sorted
            }
        };

        Ok(Self {
            names,
            index,
            parent,
            children,
            root,
            depth,
            height,
            classes,
        })
    }

    /// Height of the root.
    pub fn height(&self) -> usize {
        self.height[self.root]
    }

    pub fn root(&self) -> &str {
        &self.names[self.root]
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Class names in label order.
    pub fn classes(&self) -> Vec<&str> {
        self.classes
            .iter()
            .map(|&i| self.names[i].as_str())
            .collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        let node = *self.index.get(name)?;
        self.classes.iter().position(|&c| c == node)
    }

    pub fn node_height(&self, name: &str) -> Result<usize> {
        Ok(self.height[self.node(name)?])
    }

    pub fn parent_of(&self, name: &str) -> Result<Option<&str>> {
        Ok(self.parent[self.node(name)?].map(|p| self.names[p].as_str()))
    }

    pub fn children_of(&self, name: &str) -> Result<Vec<&str>> {
        Ok(self.children[self.node(name)?]
            .iter()
            .map(|&c| self.names[c].as_str())
            .collect())
    }

    fn node(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    fn leaf(&self, name: &str) -> Result<usize> {
        let i = self.node(name)?;
        if !self.children[i].is_empty() {
            return Err(Error::UnknownClass(format!("{name} (not a leaf)")));
        }
        Ok(i)
    }

    /// Lowest common ancestor of two leaves.
    pub fn lca(&self, a: &str, b: &str) -> Result<&str> {
        let (a, b) = (self.leaf(a)?, self.leaf(b)?);
        Ok(&self.names[self.lca_node(a, b)])
    }

    fn lca_node(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("non-root has a parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("non-root has a parent");
        }
        while a != b {
            a = self.parent[a].expect("non-root has a parent");
            b = self.parent[b].expect("non-root has a parent");
        }
        a
    }

    /// Pairwise `1 - height(lca)/H` over the classes, in label order.
    pub fn semantic_similarity(&self) -> Result<SimilarityMatrix> {
        let h = self.height();
        if h == 0 {
            return Err(Error::DegenerateHierarchy("tree height is 0".into()));
        }
        let n = self.classes.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let l = self.lca_node(self.classes[i], self.classes[j]);
                let s = 1.0 - self.height[l] as f64 / h as f64;
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Ok(SimilarityMatrix {
            names: self.classes().into_iter().map(String::from).collect(),
            values,
        })
    }
}

/// One class name per non-empty line.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_class_list(&text))
}

pub fn parse_class_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

fn find_cycle(parent: &[Option<usize>], names: &[String]) -> Option<Vec<String>> {
    // Each node has at most one parent, so following parent links either
    // reaches a root or loops.
    let mut state = vec![0u8; parent.len()]; // 0 unvisited, 1 on path, 2 done
    for start in 0..parent.len() {
        let mut path: Vec<usize> = Vec::new();
        let mut cur = Some(start);
        while let Some(i) = cur {
            match state[i] {
                2 => break,
                1 => {
                    let pos = path.iter().position(|&p| p == i).unwrap_or(0);
                    // path[pos..] runs child -> parent; reverse it to read as edges.
                    let mut witness: Vec<String> = path[pos..]
                        .iter()
                        .rev()
                        .map(|&p: &usize| names[p].clone())
                        .collect();
                    witness.push(witness[0].clone());
                    return Some(witness);
                }
                _ => {
                    state[i] = 1;
                    path.push(i);
                    cur = parent[i];
                }
            }
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

fn depths(root: usize, children: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut depth = vec![0; n];
    let mut stack = vec![root];
    while let Some(i) = stack.pop() {
        for &c in &children[i] {
            depth[c] = depth[i] + 1;
            stack.push(c);
        }
    }
    depth
}

fn heights(root: usize, children: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![root];
    while let Some(i) = stack.pop() {
        order.push(i);
        stack.extend(&children[i]);
    }
    let mut height = vec![0; n];
    for &i in order.iter().rev() {
        height[i] = children[i]
            .iter()
            .map(|&c| height[c] + 1)
            .max()
            .unwrap_or(0);
    }
    height
}

/// Symmetric class-by-class similarity matrix in label order.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    names: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = names.len();
        if values.len() != n * n {
            return Err(Error::shape("similarity", &[n, n], &[values.len()]));
        }
        Ok(Self { names, values })
    }

    pub fn identity(names: Vec<String>) -> Self {
        let n = names.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self { names, values }
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.len();
        let m = nalgebra::DMatrix::from_row_slice(n, n, &self.values);
        m.symmetric_eigenvalues().min()
    }

    /// Reorders classes: row/column `i` of the result is `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let n = order.len();
        let mut values = vec![0.0; n * n];
        for (i, &oi) in order.iter().enumerate() {
            for (j, &oj) in order.iter().enumerate() {
                values[i * n + j] = self.get(oi, oj);
            }
        }
        Self {
            names: order.iter().map(|&i| self.names[i].clone()).collect(),
            values,
        }
    }

    /// CSV with a class-name header row and a class-name first column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for name in &self.names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in self.names.iter().enumerate() {
            out.push_str(name);
            for j in 0..self.len() {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

/// Counts leaves per depth; handy for describing ragged taxonomies.
pub fn leaf_depth_histogram(h: &ClassHierarchy) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for &c in &h.classes {
        *hist.entry(h.depth[c]).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIVE: &str = "r\tA\nr\tB\nA\ta1\nA\ta2\nB\tb1";

    #[test]
    fn star_hierarchy() {
        let h = ClassHierarchy::parse("root\ta\nroot\tb", None).unwrap();
        assert_eq!(h.classes(), vec!["a", "b"]);
        assert_eq!(h.height(), 1);
        let s = h.semantic_similarity().unwrap();
        assert_eq!(s.values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn five_node_tree() {
        let h = ClassHierarchy::parse(FIVE, None).unwrap();
        assert_eq!(h.classes(), vec!["a1", "a2", "b1"]);
        assert_eq!(h.height(), 2);
        assert_eq!(h.lca("a1", "a2").unwrap(), "A");
        assert_eq!(h.lca("a1", "b1").unwrap(), "r");
        assert_eq!(h.lca("a1", "a1").unwrap(), "a1");

        let s = h.semantic_similarity().unwrap();
        assert_eq!(s.get(0, 1), 0.5);
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.get(2, 2), 1.0);
        assert!(s.is_symmetric());
    }

    #[test]
    fn cycle_is_reported_with_witness() {
        match ClassHierarchy::parse("x\ty\ny\tx", None) {
            Err(Error::Cycle { witness }) => {
                assert_eq!(witness.first(), witness.last());
                assert!(witness.contains(&"x".to_string()));
                assert!(witness.contains(&"y".to_string()));
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            ClassHierarchy::parse("r\ta\ns\tb", None),
            Err(Error::Forest { .. })
        ));
        assert!(matches!(
            ClassHierarchy::parse("r\ta\nr\ta", None),
            Err(Error::DuplicateEdge { line: 2, .. })
        ));
        assert!(matches!(
            ClassHierarchy::parse("r\ta\ns\ta\nr\ts", None),
            Err(Error::MultipleParents { .. })
        ));
        assert!(matches!(
            ClassHierarchy::parse("r\t  \n", None),
            Err(Error::Format { line: 1, .. })
        ));
        assert!(matches!(
            ClassHierarchy::parse("r a\n", None),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            ClassHierarchy::parse("# only a comment\n", None),
            Err(Error::DegenerateHierarchy(_))
        ));
    }

    #[test]
    fn comments_and_crlf_are_tolerated() {
        let h = ClassHierarchy::parse("# taxonomy\r\nr\ta\r\n\r\nr\tb\r\n", None).unwrap();
        assert_eq!(h.classes(), vec!["a", "b"]);
    }

    #[test]
    fn class_list_fixes_order() {
        let list = vec!["b1".to_string(), "a1".into(), "a2".into()];
        let h = ClassHierarchy::parse(FIVE, Some(&list)).unwrap();
        assert_eq!(h.classes(), vec!["b1", "a1", "a2"]);
        let s = h.semantic_similarity().unwrap();
        assert_eq!(s.get(1, 2), 0.5);

        let bad = vec!["A".to_string()];
        assert!(ClassHierarchy::parse(FIVE, Some(&bad)).is_err());
        let unknown = vec!["zz".to_string()];
        assert!(matches!(
            ClassHierarchy::parse(FIVE, Some(&unknown)),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn lca_of_unknown_class_is_lookup_error() {
        let h = ClassHierarchy::parse(FIVE, None).unwrap();
        assert!(matches!(h.lca("a1", "nope"), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn ragged_tree_uses_global_height() {
        // r -> x -> y -> leaf1, r -> leaf2: H = 3.
        let h = ClassHierarchy::parse("r\tx\nx\ty\ny\tleaf1\nr\tleaf2\nx\tleaf3", None).unwrap();
        assert_eq!(h.height(), 3);
        let s = h.semantic_similarity().unwrap();
        let i1 = h.class_index("leaf1").unwrap();
        let i3 = h.class_index("leaf3").unwrap();
        // lca(leaf1, leaf3) = x with height 2.
        assert!((s.get(i1, i3) - (1.0 - 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(leaf_depth_histogram(&h).get(&3), Some(&1));
    }

    #[test]
    fn similarity_csv_has_name_header() {
        let h = ClassHierarchy::parse(FIVE, None).unwrap();
        let csv = h.semantic_similarity().unwrap().to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("class,a1,a2,b1"));
        assert_eq!(lines.next(), Some("a1,1,0.5,0"));
    }
}
