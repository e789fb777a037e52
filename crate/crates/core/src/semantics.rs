//! Concept taxonomy with information content, least common subsumers and
//! Lin similarity.
//!
//! The taxonomy is read from two tab-separated text files:
//!
//! ```text
//! # edges: child<TAB>parent, the root uses '-'
//! dog	animal
//! animal	entity
//! entity	-
//! ```
//!
//! ```text
//! # information content: concept<TAB>value (nats)
//! entity	0.0
//! animal	1.0
//! dog	2.3
//! ```

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Taxonomy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    ic: Vec<f64>,
    root: usize,
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn split_pair(line_no: usize, line: &str) -> Result<(&str, &str)> {
    let mut parts = line.split('\t');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => Ok((a.trim(), b.trim())),
        _ => Err(Error::Format {
            line: line_no,
            msg: format!("expected two tab-separated fields, got '{line}'"),
        }),
    }
}

/// Parses the edge and IC files and checks every taxonomy invariant.
pub fn load_taxonomy(edge_text: &str, ic_text: &str) -> Result<Taxonomy> {
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut intern = |name: &str, names: &mut Vec<String>| -> usize {
        *index.entry(name.to_string()).or_insert_with(|| {
            names.push(name.to_string());
            names.len() - 1
        })
    };

    let mut edges: Vec<(usize, Option<usize>, usize)> = Vec::new();
    for (line_no, line) in content_lines(edge_text) {
        let (child, parent) = split_pair(line_no, line)?;
        let c = intern(child, &mut names);
        let p = if parent == "-" {
            None
        } else {
            Some(intern(parent, &mut names))
        };
        edges.push((c, p, line_no));
    }
    drop(intern);

    let mut parent: Vec<Option<usize>> = vec![None; names.len()];
    let mut declared = vec![false; names.len()];
    for (c, p, line_no) in edges {
        if declared[c] && parent[c] != p {
            return Err(Error::Format {
                line: line_no,
                msg: format!("concept '{}' has more than one parent", names[c]),
            });
        }
        declared[c] = true;
        parent[c] = p;
    }

    // Cycles first: a pure cycle has no root at all, and the cycle is the
    // more useful diagnosis.
    for start in 0..names.len() {
        let mut seen = BTreeSet::new();
        let mut cur = start;
        while let Some(p) = parent[cur] {
            if !seen.insert(cur) {
                return Err(Error::Cycle(names[cur].clone()));
            }
            cur = p;
        }
    }

    let roots: Vec<usize> = (0..names.len()).filter(|&i| parent[i].is_none()).collect();
    if roots.len() != 1 {
        return Err(Error::Root(roots.iter().map(|&i| names[i].clone()).collect()));
    }

    let mut ic = vec![f64::NAN; names.len()];
    for (line_no, line) in content_lines(ic_text) {
        let (name, value) = split_pair(line_no, line)?;
        let v: f64 = value.parse().map_err(|_| Error::Format {
            line: line_no,
            msg: format!("invalid information content '{value}'"),
        })?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Format {
                line: line_no,
                msg: format!("information content must be finite and non-negative, got {v}"),
            });
        }
        // IC entries for concepts outside the hierarchy are ignored.
        if let Some(&i) = index.get(name) {
            ic[i] = v;
        }
    }
    if let Some(i) = ic.iter().position(|v| v.is_nan()) {
        return Err(Error::MissingIc(names[i].clone()));
    }
    for c in 0..names.len() {
        if let Some(p) = parent[c] {
            if ic[p] > ic[c] {
                return Err(Error::Monotonicity {
                    child: names[c].clone(),
                    parent: names[p].clone(),
                    child_ic: ic[c],
                    parent_ic: ic[p],
                });
            }
        }
    }

    Ok(Taxonomy {
        names,
        index,
        parent,
        ic,
        root: roots[0],
    })
}

impl Taxonomy {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> &str {
        &self.names[self.root]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn ic(&self, name: &str) -> Result<f64> {
        Ok(self.ic[self.resolve(name)?])
    }

    pub fn parent(&self, name: &str) -> Result<Option<&str>> {
        Ok(self.parent[self.resolve(name)?].map(|p| self.names[p].as_str()))
    }

    fn resolve(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    /// The concept itself followed by its ancestors up to the root.
    fn chain(&self, mut c: usize) -> Vec<usize> {
        let mut out = vec![c];
        while let Some(p) = self.parent[c] {
            out.push(p);
            c = p;
        }
        out
    }

    fn lcs_index(&self, a: usize, b: usize) -> usize {
        let ancestors_a: BTreeSet<usize> = self.chain(a).into_iter().collect();
        self.chain(b)
            .into_iter()
            .filter(|c| ancestors_a.contains(c))
            .min_by(|&x, &y| self.ic[y].total_cmp(&self.ic[x]).then(x.cmp(&y)))
            .expect("root is a common ancestor")
    }

    /// Least common subsumer: the shared ancestor with maximal information
    /// content, ties going to the concept interned first.
    pub fn lcs(&self, c1: &str, c2: &str) -> Result<&str> {
        let (a, b) = (self.resolve(c1)?, self.resolve(c2)?);
        Ok(&self.names[self.lcs_index(a, b)])
    }

    fn lin_index(&self, a: usize, b: usize) -> f64 {
        let denom = self.ic[a] + self.ic[b];
        if denom == 0.0 {
            return 0.0;
        }
        2.0 * self.ic[self.lcs_index(a, b)] / denom
    }

    /// `2 IC(lcs) / (IC(c1) + IC(c2))`, zero when both concepts have zero IC.
    pub fn lin_similarity(&self, c1: &str, c2: &str) -> Result<f64> {
        let (a, b) = (self.resolve(c1)?, self.resolve(c2)?);
        Ok(self.lin_index(a, b))
    }

    /// Dense Lin similarity matrix over `names`. Names missing from the
    /// taxonomy become isolated concepts: similarity 1 to themselves and 0 to
    /// everything else.
    pub fn similarity_matrix<S: AsRef<str> + Sync>(&self, names: &[S]) -> SimilarityMatrix {
        let ids: Vec<Option<usize>> = names
            .iter()
            .map(|n| self.index.get(n.as_ref()).copied())
            .collect();
        let values: Vec<Vec<f64>> = (0..ids.len())
            .into_par_iter()
            .map(|i| {
                (0..ids.len())
                    .map(|j| match (ids[i], ids[j]) {
                        (Some(a), Some(b)) => self.lin_index(a, b),
                        _ if i == j => 1.0,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        SimilarityMatrix {
            values,
            fallback: ids.iter().filter(|i| i.is_none()).count(),
        }
    }
}

/// Symmetric similarity matrix plus the number of names that fell back to an
/// isolated pseudo-concept.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Vec<Vec<f64>>,
    pub fallback: usize,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i]
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::{EDGES, IC};
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> Taxonomy {
        load_taxonomy(EDGES, IC).unwrap()
    }

    #[test]
    fn loads_fixture() {
        let t = fixture();
        assert_eq!(t.len(), 4);
        assert_eq!(t.root(), "entity");
        assert_eq!(t.parent("dog").unwrap(), Some("animal"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let edges = format!("# header\n\n{EDGES}");
        assert_eq!(load_taxonomy(&edges, IC).unwrap().len(), 4);
    }

    #[test]
    fn cycle_is_rejected() {
        let err = load_taxonomy("a\tb\nb\ta\n", "a\t1\nb\t1\n").unwrap_err();
        assert!(matches!(err, Error::Cycle(_)), "{err}");
    }

    #[test]
    fn multiple_roots_are_rejected() {
        let err = load_taxonomy("a\t-\nb\t-\n", "a\t0\nb\t0\n").unwrap_err();
        assert!(matches!(err, Error::Root(ref r) if r.len() == 2), "{err}");
    }

    #[test]
    fn missing_ic_is_rejected() {
        let err = load_taxonomy(EDGES, "entity\t0\nanimal\t1\ndog\t2\n").unwrap_err();
        assert!(matches!(err, Error::MissingIc(ref c) if c == "cat"), "{err}");
    }

    #[test]
    fn non_monotone_ic_names_the_edge() {
        let ic = "entity\t0.0\nanimal\t1.0\ndog\t0.5\ncat\t2.1\n";
        let err = load_taxonomy(EDGES, ic).unwrap_err();
        match err {
            Error::Monotonicity { child, parent, .. } => {
                assert_eq!((child.as_str(), parent.as_str()), ("dog", "animal"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn lcs_cases() {
        let t = fixture();
        assert_eq!(t.lcs("dog", "cat").unwrap(), "animal");
        assert_eq!(t.lcs("dog", "dog").unwrap(), "dog");
        assert_eq!(t.lcs("dog", "entity").unwrap(), "entity");
        assert!(matches!(t.lcs("dog", "car"), Err(Error::UnknownConcept(_))));
    }

    #[test]
    fn lin_cases() {
        let t = fixture();
        assert_eq!(t.lin_similarity("dog", "dog").unwrap(), 1.0);
        let expected = 2.0 * 1.0 / (2.3 + 2.1);
        assert!((t.lin_similarity("dog", "cat").unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.454_545_454_545).abs() < 1e-9);
        assert_eq!(t.lin_similarity("dog", "entity").unwrap(), 0.0);
        assert_eq!(t.lin_similarity("entity", "entity").unwrap(), 0.0);
    }

    #[test]
    fn similarity_matrix_cases() {
        let t = fixture();
        let m = t.similarity_matrix(&["dog", "cat"]);
        let x = 2.0 / 4.4;
        assert_eq!(m.values[0][0], 1.0);
        assert!((m.values[0][1] - x).abs() < 1e-12);
        assert_eq!(m.values[0][1], m.values[1][0]);
        assert_eq!(t.similarity_matrix(&["cat"]).values, vec![vec![1.0]]);

        let m = t.similarity_matrix(&["dog", "unicorn", "cat"]);
        assert_eq!(m.fallback, 1);
        assert_eq!(m.values[1], vec![0.0, 1.0, 0.0]);
        assert_eq!(m.values[0][1], 0.0);
    }

    /// Random tree over `n` nodes where node `i > 0` hangs below a node with a
    /// smaller index, and IC grows along every edge.
    fn random_taxonomy() -> impl Strategy<Value = (String, String, usize)> {
        (2usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<prop::sample::Index>(), n - 1),
                proptest::collection::vec(0.0f64..2.0, n),
            )
                .prop_map(move |(parents, incs)| {
                    let mut edges = String::from("c0\t-\n");
                    let mut ic = vec![incs[0]];
                    for i in 1..n {
                        let p = parents[i - 1].index(i);
                        edges.push_str(&format!("c{i}\tc{p}\n"));
                        ic.push(ic[p] + incs[i]);
                    }
                    let ic_text: String =
                        ic.iter().enumerate().map(|(i, v)| format!("c{i}\t{v}\n")).collect();
                    (edges, ic_text, n)
                })
        })
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_and_bounded((edges, ic, n) in random_taxonomy()) {
            let t = load_taxonomy(&edges, &ic).unwrap();
            let names: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
            let m = t.similarity_matrix(&names);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(m.values[i][j], m.values[j][i]);
                    prop_assert!((0.0..=1.0).contains(&m.values[i][j]));
                    let l = t.lcs(&names[i], &names[j]).unwrap();
                    let ic_l = t.ic(l).unwrap();
                    prop_assert!(ic_l <= t.ic(&names[i]).unwrap().min(t.ic(&names[j]).unwrap()));
                }
            }
        }
    }
}
