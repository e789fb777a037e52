//! Primitives, compositions, samples and composition-incremental benchmarks.
//!
//! A benchmark holds `T + 1` disjoint composition sets. Sets `1..=T` are the
//! learnable tasks; set `T + 1` is a held-out pool that stays unseen for the
//! whole run and gives every step a common yardstick for generalization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute and object names, sorted lexicographically so that indices are
/// stable across runs and files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrimitiveVocab {
    attributes: Vec<String>,
    objects: Vec<String>,
}

impl PrimitiveVocab {
    /// Builds a vocabulary from arbitrary name lists. Duplicates are removed and
    /// both lists are sorted.
    pub fn new<A, O>(attributes: A, objects: O) -> Result<Self>
    where
        A: IntoIterator,
        A::Item: Into<String>,
        O: IntoIterator,
        O::Item: Into<String>,
    {
        let attributes: BTreeSet<String> = attributes.into_iter().map(Into::into).collect();
        let objects: BTreeSet<String> = objects.into_iter().map(Into::into).collect();
        if attributes.is_empty() || objects.is_empty() {
            return Err(Error::Empty("vocabulary needs at least one attribute and one object".into()));
        }
        Ok(Self {
            attributes: attributes.into_iter().collect(),
            objects: objects.into_iter().collect(),
        })
    }

    /// Takes the lists as given; they must already be sorted and unique.
    pub fn from_sorted(attributes: Vec<String>, objects: Vec<String>) -> Result<Self> {
        let sorted_unique = |v: &[String]| v.windows(2).all(|w| w[0] < w[1]);
        if attributes.is_empty() || objects.is_empty() {
            return Err(Error::Empty("vocabulary needs at least one attribute and one object".into()));
        }
        if !sorted_unique(&attributes) || !sorted_unique(&objects) {
            return Err(Error::Format {
                line: 0,
                msg: "vocabulary lists must be sorted and unique".into(),
            });
        }
        Ok(Self { attributes, objects })
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objects.len()
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attributes.binary_search_by(|a| a.as_str().cmp(name)).ok()
    }

    pub fn obj_index(&self, name: &str) -> Option<usize> {
        self.objects.binary_search_by(|o| o.as_str().cmp(name)).ok()
    }

    pub fn contains(&self, c: Composition) -> bool {
        c.attr < self.attributes.len() && c.obj < self.objects.len()
    }

    /// Human readable `attr obj` label.
    pub fn label(&self, c: Composition) -> String {
        format!("{} {}", self.attributes[c.attr], self.objects[c.obj])
    }
}

/// An (attribute, object) pair stored as vocabulary indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub attr: usize,
    pub obj: usize,
}

impl Composition {
    pub const fn new(attr: usize, obj: usize) -> Self {
        Self { attr, obj }
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.attr, self.obj)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub comp: Composition,
    pub split: Split,
    /// Task index in `1..=T+1`.
    pub task: usize,
}

/// `T + 1` composition sets over a shared vocabulary plus per-task samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub vocab: PrimitiveVocab,
    /// `task_comps[i]` holds the compositions of task `i + 1`; the last entry is
    /// the held-out unseen set.
    pub task_comps: Vec<BTreeSet<Composition>>,
    pub samples: Vec<Sample>,
}

/// A single invariant violation found by [`validate_benchmark`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind")]
pub enum Violation {
    /// The same composition appears in two tasks.
    Disjointness { task_a: usize, task_b: usize, comp: Composition },
    /// A sample's composition is not in its task's set.
    Membership { sample: String, task: usize, comp: Composition },
    /// A held-out sample is marked as training data.
    HeldOutTrain { sample: String },
    /// A composition index lies outside the vocabulary.
    OutOfVocab { task: usize, comp: Composition },
    /// A sample refers to a task outside `1..=T+1`.
    TaskIndex { sample: String, task: usize },
    /// Two samples share an id.
    DuplicateId { sample: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Disjointness { task_a, task_b, comp } => {
                write!(f, "DISJOINTNESS({task_a},{task_b}) composition {comp}")
            }
            Violation::Membership { sample, task, comp } => {
                write!(f, "MEMBERSHIP sample '{sample}' composition {comp} not in task {task}")
            }
            Violation::HeldOutTrain { sample } => {
                write!(f, "HELDOUT_TRAIN sample '{sample}' of the held-out task is in the train split")
            }
            Violation::OutOfVocab { task, comp } => {
                write!(f, "OUT_OF_VOCAB composition {comp} in task {task}")
            }
            Violation::TaskIndex { sample, task } => {
                write!(f, "TASK_INDEX sample '{sample}' has task {task}")
            }
            Violation::DuplicateId { sample } => write!(f, "DUPLICATE_ID '{sample}'"),
        }
    }
}

/// List of violations; empty means the benchmark is valid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

impl Benchmark {
    /// Number of learnable tasks `T`.
    pub fn n_tasks(&self) -> usize {
        self.task_comps.len().saturating_sub(1)
    }

    /// Compositions of task `t` (1-based, `T + 1` is the held-out set).
    pub fn comps(&self, t: usize) -> &BTreeSet<Composition> {
        &self.task_comps[t - 1]
    }

    /// Union of the composition sets of tasks `lo..=hi`, ordered by task then
    /// composition.
    pub fn comps_in(&self, lo: usize, hi: usize) -> Vec<Composition> {
        (lo..=hi).flat_map(|t| self.comps(t).iter().copied()).collect()
    }

    /// All compositions, ordered by task then composition. This is the
    /// candidate ordering used for evaluation.
    pub fn all_comps(&self) -> Vec<Composition> {
        self.comps_in(1, self.task_comps.len())
    }

    /// Task of each composition.
    pub fn comp_task(&self) -> BTreeMap<Composition, usize> {
        let mut out = BTreeMap::new();
        for (i, set) in self.task_comps.iter().enumerate() {
            for &c in set {
                out.entry(c).or_insert(i + 1);
            }
        }
        out
    }

    pub fn samples_of(&self, task: usize, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples
            .iter()
            .filter(move |s| s.task == task && s.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BenchmarkFile {
            attributes: self.vocab.attributes().to_vec(),
            objects: self.vocab.objects().to_vec(),
            t: self.n_tasks(),
            tasks: self
                .task_comps
                .iter()
                .map(|set| set.iter().map(|c| [c.attr, c.obj]).collect())
                .collect(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleRecord {
                    id: s.id.clone(),
                    attr: s.comp.attr,
                    obj: s.comp.obj,
                    task: s.task - 1,
                    split: s.split,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BenchmarkFile = serde_json::from_str(text)?;
        if file.tasks.len() != file.t + 1 {
            return Err(Error::Format {
                line: 0,
                msg: format!("expected {} task sets, found {}", file.t + 1, file.tasks.len()),
            });
        }
        let vocab = PrimitiveVocab::from_sorted(file.attributes, file.objects)?;
        let task_comps = file
            .tasks
            .iter()
            .map(|set| set.iter().map(|p| Composition::new(p[0], p[1])).collect())
            .collect();
        let samples = file
            .samples
            .into_iter()
            .map(|r| Sample {
                id: r.id,
                comp: Composition::new(r.attr, r.obj),
                split: r.split,
                task: r.task + 1,
            })
            .collect();
        Ok(Self {
            vocab,
            task_comps,
            samples,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// On-disk layout of `benchmark.json`. Task indices are 0-based in files.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkFile {
    attributes: Vec<String>,
    objects: Vec<String>,
    #[serde(rename = "T")]
    t: usize,
    tasks: Vec<Vec<[usize; 2]>>,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    attr: usize,
    obj: usize,
    task: usize,
    split: Split,
}

/// Checks every structural invariant of a benchmark and reports all
/// violations rather than stopping at the first.
pub fn validate_benchmark(b: &Benchmark) -> ValidationReport {
    let mut violations = Vec::new();
    let n_sets = b.task_comps.len();

    for (i, set) in b.task_comps.iter().enumerate() {
        for &c in set {
            if !b.vocab.contains(c) {
                violations.push(Violation::OutOfVocab { task: i + 1, comp: c });
            }
        }
    }
    for i in 0..n_sets {
        for j in i + 1..n_sets {
            for &c in b.task_comps[i].intersection(&b.task_comps[j]) {
                violations.push(Violation::Disjointness {
                    task_a: i + 1,
                    task_b: j + 1,
                    comp: c,
                });
            }
        }
    }

    let mut ids = BTreeSet::new();
    for s in &b.samples {
        if !ids.insert(s.id.as_str()) {
            violations.push(Violation::DuplicateId { sample: s.id.clone() });
        }
        if s.task == 0 || s.task > n_sets {
            violations.push(Violation::TaskIndex {
                sample: s.id.clone(),
                task: s.task,
            });
            continue;
        }
        if !b.task_comps[s.task - 1].contains(&s.comp) {
            violations.push(Violation::Membership {
                sample: s.id.clone(),
                task: s.task,
                comp: s.comp,
            });
        }
        if s.task == n_sets && s.split == Split::Train {
            violations.push(Violation::HeldOutTrain { sample: s.id.clone() });
        }
    }
    ValidationReport { violations }
}

/// Seen and unseen candidate sets after learning task `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSets {
    pub seen: BTreeSet<Composition>,
    pub unseen: BTreeSet<Composition>,
}

/// Seen = tasks `1..=t`, unseen = tasks `t+1..=T+1`.
pub fn candidate_sets(b: &Benchmark, t: usize) -> Result<CandidateSets> {
    let n = b.n_tasks();
    if t < 1 || t > n {
        return Err(Error::Range {
            what: "step",
            value: t as i64,
            lo: 1,
            hi: n as i64,
        });
    }
    let seen = b.task_comps[..t].iter().flatten().copied().collect();
    let unseen = b.task_comps[t..].iter().flatten().copied().collect();
    Ok(CandidateSets { seen, unseen })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two tasks plus a held-out set with 3, 4 and 5 compositions.
    pub fn three_four_five() -> Benchmark {
        let vocab = PrimitiveVocab::new(
            ["a0", "a1", "a2", "a3"],
            ["o0", "o1", "o2", "o3"],
        )
        .unwrap();
        let c = Composition::new;
        let task_comps: Vec<BTreeSet<Composition>> = vec![
            [c(0, 0), c(0, 1), c(1, 0)].into_iter().collect(),
            [c(1, 1), c(2, 0), c(2, 1), c(2, 2)].into_iter().collect(),
            [c(3, 0), c(3, 1), c(3, 2), c(3, 3), c(0, 3)].into_iter().collect(),
        ];
        let mut samples = Vec::new();
        for (i, set) in task_comps.iter().enumerate() {
            for comp in set {
                for k in 0..2 {
                    let split = if i == 2 || k == 1 { Split::Test } else { Split::Train };
                    samples.push(Sample {
                        id: format!("t{}_{}_{}_{}", i + 1, comp.attr, comp.obj, k),
                        comp: *comp,
                        split,
                        task: i + 1,
                    });
                }
            }
        }
        Benchmark {
            vocab,
            task_comps,
            samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::three_four_five;
    use super::*;

    #[test]
    fn well_formed_fixture_is_valid() {
        let report = validate_benchmark(&three_four_five());
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn shared_composition_is_a_disjointness_violation() {
        let mut b = three_four_five();
        b.task_comps[1].insert(Composition::new(0, 0));
        let report = validate_benchmark(&b);
        assert!(report.violations.iter().any(|v| matches!(
            v,
            Violation::Disjointness { task_a: 1, task_b: 2, .. }
        )));
        assert!(report.to_string().contains("DISJOINTNESS(1,2)"));
    }

    #[test]
    fn foreign_sample_composition_is_a_membership_violation() {
        let mut b = three_four_five();
        b.samples[0].comp = Composition::new(3, 3);
        let report = validate_benchmark(&b);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::Membership { task: 1, .. })));
    }

    #[test]
    fn held_out_train_sample_is_reported() {
        let mut b = three_four_five();
        let s = b.samples.iter_mut().find(|s| s.task == 3).unwrap();
        s.split = Split::Train;
        let report = validate_benchmark(&b);
        assert!(matches!(report.violations[..], [Violation::HeldOutTrain { .. }]));
    }

    #[test]
    fn candidate_sets_counts() {
        let b = three_four_five();
        let cs = candidate_sets(&b, 2).unwrap();
        assert_eq!((cs.seen.len(), cs.unseen.len()), (7, 5));
        assert_eq!(cs.unseen, *b.comps(3));

        let cs1 = candidate_sets(&b, 1).unwrap();
        assert_eq!(cs1.seen, *b.comps(1));
        let expected: BTreeSet<_> = b.comps(2).union(b.comps(3)).copied().collect();
        assert_eq!(cs1.unseen, expected);
    }

    #[test]
    fn candidate_sets_range() {
        let b = three_four_five();
        assert!(matches!(candidate_sets(&b, 0), Err(Error::Range { .. })));
        assert!(matches!(candidate_sets(&b, 3), Err(Error::Range { .. })));
    }

    #[test]
    fn candidate_sets_nest_across_steps() {
        let b = three_four_five();
        let all: BTreeSet<_> = b.all_comps().into_iter().collect();
        let one = candidate_sets(&b, 1).unwrap();
        let two = candidate_sets(&b, 2).unwrap();
        for cs in [&one, &two] {
            assert!(cs.seen.is_disjoint(&cs.unseen));
            let union: BTreeSet<_> = cs.seen.union(&cs.unseen).copied().collect();
            assert_eq!(union, all);
            assert!(b.comps(3).is_subset(&cs.unseen));
        }
        assert!(one.seen.is_subset(&two.seen) && one.seen != two.seen);
        assert!(two.unseen.is_subset(&one.unseen) && two.unseen != one.unseen);
    }

    #[test]
    fn json_round_trip_uses_zero_based_tasks() {
        let b = three_four_five();
        let text = b.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["T"], 2);
        assert_eq!(v["tasks"].as_array().unwrap().len(), 3);
        assert_eq!(v["samples"][0]["task"], 0);
        assert_eq!(Benchmark::from_json(&text).unwrap(), b);
    }

    #[test]
    fn vocab_is_sorted_and_deduplicated() {
        let v = PrimitiveVocab::new(["wet", "dry", "wet"], ["dog"]).unwrap();
        assert_eq!(v.attributes(), ["dry", "wet"]);
        assert_eq!(v.attr_index("wet"), Some(1));
        assert!(PrimitiveVocab::new(Vec::<String>::new(), ["dog"]).is_err());
    }
}
