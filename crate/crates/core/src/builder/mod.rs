//! Benchmark construction: semantic mini-groups, task assignment and
//! benchmark emission.

mod assign;
mod kmeans;

pub use assign::{
    assign_tasks, brute_force_assign, objective_value, AssignOutcome, Assignment, MiniGroup,
    ENUMERATION_GUARD,
};
pub use kmeans::{kmeans, KMeans};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::domain::{Benchmark, Composition, PrimitiveVocab, Sample, Split};
use crate::error::{Error, Result};
use crate::numkernel::rng::RngStream;
use crate::semantics::SimilarityMatrix;

const KMEANS_MAX_ITERS: usize = 100;

/// Groups compositions by attribute, then splits each attribute's objects with
/// k-means on their similarity rows (restricted to that attribute's objects).
///
/// `sim` is indexed by object vocabulary index. Each attribute with `n` objects
/// gets `ceil(n / target_group_size)` groups. Group ids are assigned in
/// attribute order.
pub fn cluster_minigroups(
    comps: &BTreeSet<Composition>,
    sim: &SimilarityMatrix,
    target_group_size: usize,
    seed: u64,
) -> Result<Vec<MiniGroup>> {
    if target_group_size == 0 {
        return Err(Error::Range {
            what: "target_group_size",
            value: 0,
            lo: 1,
            hi: i64::MAX,
        });
    }
    let mut by_attr: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for c in comps {
        if c.obj >= sim.len() {
            return Err(Error::Shape(format!(
                "object {} outside the {}x{} similarity matrix",
                c.obj,
                sim.len(),
                sim.len()
            )));
        }
        by_attr.entry(c.attr).or_default().push(c.obj);
    }

    let mut groups = Vec::new();
    for (attr, objs) in by_attr {
        let k = objs.len().div_ceil(target_group_size);
        let points: Vec<Vec<f64>> = objs
            .iter()
            .map(|&o| objs.iter().map(|&p| sim.row(o)[p]).collect())
            .collect();
        let km = kmeans(&points, k, seed.wrapping_add(attr as u64), KMEANS_MAX_ITERS)?;
        let mut clusters: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); k];
        for (&o, &c) in objs.iter().zip(&km.assignment) {
            clusters[c].insert(o);
        }
        // Order clusters by their smallest object so ids do not depend on
        // centroid numbering.
        clusters.retain(|c| !c.is_empty());
        clusters.sort();
        for objs in clusters {
            groups.push(MiniGroup {
                id: groups.len(),
                attr,
                objs,
            });
        }
    }
    Ok(groups)
}

/// A sample of the source dataset before task assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceSample {
    pub id: String,
    pub comp: Composition,
}

/// Builds the benchmark from an assignment.
///
/// Tasks `1..=T` receive the compositions of their groups. Within each
/// composition, samples are shuffled (seeded) and `round(n * train_ratio)` go
/// to train, keeping at least one test sample when `n >= 2`; a composition
/// with a single sample keeps it for training. `unseen_comps` and their
/// samples form task `T + 1`, all in the test split. Samples of compositions
/// outside every task are dropped.
pub fn emit_benchmark(
    vocab: &PrimitiveVocab,
    groups: &[MiniGroup],
    asg: &Assignment,
    source: &[SourceSample],
    unseen_comps: &BTreeSet<Composition>,
    train_ratio: f64,
    seed: u64,
) -> Result<Benchmark> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Format {
            line: 0,
            msg: format!("train ratio must lie in (0, 1), got {train_ratio}"),
        });
    }
    let t = asg.t;
    let mut task_comps: Vec<BTreeSet<Composition>> = vec![BTreeSet::new(); t + 1];
    for g in groups {
        let k = *asg
            .group_task
            .get(&g.id)
            .ok_or_else(|| Error::Incomplete(format!("group {} is unassigned", g.id)))?;
        for &o in &g.objs {
            task_comps[k - 1].insert(Composition::new(g.attr, o));
        }
    }
    let overlap: Vec<String> = task_comps[..t]
        .iter()
        .flatten()
        .filter(|c| unseen_comps.contains(c))
        .map(|&c| vocab.label(c))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Disjointness(overlap.join(", ")));
    }
    if let Some(k) = task_comps[..t].iter().position(BTreeSet::is_empty) {
        return Err(Error::EmptyTask(k + 1));
    }
    task_comps[t] = unseen_comps.clone();

    let mut comp_task = BTreeMap::new();
    for (i, set) in task_comps.iter().enumerate() {
        for &c in set {
            comp_task.insert(c, i + 1);
        }
    }

    let mut per_comp: BTreeMap<Composition, Vec<&SourceSample>> = BTreeMap::new();
    for s in source {
        if comp_task.contains_key(&s.comp) {
            per_comp.entry(s.comp).or_default().push(s);
        }
    }

    let mut rng = RngStream::new(seed).substream("split");
    let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
    for (c, members) in &mut per_comp {
        if comp_task[c] == t + 1 {
            for s in members.iter() {
                split_of.insert(&s.id, Split::Test);
            }
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = if n < 2 {
            n
        } else {
            ((n as f64 * train_ratio).round() as usize).clamp(1, n - 1)
        };
        for (i, s) in members.iter().enumerate() {
            split_of.insert(&s.id, if i < n_train { Split::Train } else { Split::Test });
        }
    }

    let samples = source
        .iter()
        .filter_map(|s| {
            let split = *split_of.get(s.id.as_str())?;
            Some(Sample {
                id: s.id.clone(),
                comp: s.comp,
                split,
                task: comp_task[&s.comp],
            })
        })
        .collect();
    Ok(Benchmark {
        vocab: vocab.clone(),
        task_comps,
        samples,
    })
}

/// Source dataset read from the CSV format
/// `sample_id,attribute,object,split_hint`.
#[derive(Clone, Debug)]
pub struct SourceDataset {
    pub vocab: PrimitiveVocab,
    /// Samples whose composition belongs to the seen pool.
    pub seen: Vec<SourceSample>,
    /// Samples of the source dataset's unseen test pool.
    pub unseen: Vec<SourceSample>,
}

#[derive(Deserialize)]
struct CsvRow {
    sample_id: String,
    attribute: String,
    object: String,
    split_hint: String,
}

impl SourceDataset {
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let rows: Vec<CsvRow> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
        let vocab = PrimitiveVocab::new(
            rows.iter().map(|r| r.attribute.clone()),
            rows.iter().map(|r| r.object.clone()),
        )?;
        let mut seen = Vec::new();
        let mut unseen = Vec::new();
        for (i, r) in rows.into_iter().enumerate() {
            let comp = Composition::new(
                vocab.attr_index(&r.attribute).expect("interned"),
                vocab.obj_index(&r.object).expect("interned"),
            );
            let s = SourceSample { id: r.sample_id, comp };
            match r.split_hint.as_str() {
                "seen" => seen.push(s),
                "unseen" => unseen.push(s),
                other => {
                    return Err(Error::Format {
                        line: i + 2,
                        msg: format!("split_hint must be 'seen' or 'unseen', got '{other}'"),
                    })
                }
            }
        }
        Ok(Self { vocab, seen, unseen })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn seen_comps(&self) -> BTreeSet<Composition> {
        self.seen.iter().map(|s| s.comp).collect()
    }

    pub fn unseen_comps(&self) -> BTreeSet<Composition> {
        self.unseen.iter().map(|s| s.comp).collect()
    }

    pub fn all_samples(&self) -> Vec<SourceSample> {
        self.seen.iter().chain(&self.unseen).cloned().collect()
    }
}

/// Settings for the full construction pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuilderConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub target_group_size: usize,
    pub balance_tol: f64,
    pub train_ratio: f64,
    pub seed: u64,
    /// Local-search scans after greedy construction.
    pub search_iters: usize,
    /// Share of compositions held out as task T+1 when building from a
    /// synthetic world.
    pub unseen_fraction: f64,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            t: 5,
            target_group_size: 4,
            balance_tol: 0.25,
            train_ratio: 0.8,
            seed: 0,
            search_iters: 2000,
            unseen_fraction: 0.2,
        }
    }
}

/// Everything produced by [`build_benchmark`].
#[derive(Clone, Debug)]
pub struct BuildOutput {
    pub benchmark: Benchmark,
    pub groups: Vec<MiniGroup>,
    pub outcome: AssignOutcome,
}

/// Mini-grouping, assignment and emission in one call.
pub fn build_benchmark(
    vocab: &PrimitiveVocab,
    seen_comps: &BTreeSet<Composition>,
    unseen_comps: &BTreeSet<Composition>,
    source: &[SourceSample],
    obj_sim: &SimilarityMatrix,
    cfg: &BuilderConfig,
) -> Result<BuildOutput> {
    let overlap: Vec<String> = seen_comps
        .intersection(unseen_comps)
        .map(|&c| vocab.label(c))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Disjointness(overlap.join(", ")));
    }
    let groups = cluster_minigroups(seen_comps, obj_sim, cfg.target_group_size, cfg.seed)?;
    let outcome = assign_tasks(&groups, cfg.t, cfg.balance_tol, cfg.seed, cfg.search_iters)?;
    let benchmark = emit_benchmark(
        vocab,
        &groups,
        &outcome.assignment,
        source,
        unseen_comps,
        cfg.train_ratio,
        cfg.seed,
    )?;
    Ok(BuildOutput {
        benchmark,
        groups,
        outcome,
    })
}

/// Contents of `assignment.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssignmentFile {
    pub groups: Vec<MiniGroup>,
    pub assignment: Assignment,
    pub objective: usize,
    pub greedy_objective: usize,
}

#[cfg(test)]
mod tests {
    use super::assign::fixtures::group;
    use super::*;
    use crate::domain::validate_benchmark;
    use crate::semantics::load_taxonomy;

    fn vehicle_animal_sim() -> (PrimitiveVocab, SimilarityMatrix) {
        let edges = "dog\tanimal\ncat\tanimal\ncar\tvehicle\ntruck\tvehicle\n\
                     animal\tentity\nvehicle\tentity\nentity\t-\n";
        let ic = "entity\t0\nanimal\t1.5\nvehicle\t1.5\ndog\t2.3\ncat\t2.1\ncar\t2.2\ntruck\t2.4\n";
        let tax = load_taxonomy(edges, ic).unwrap();
        let vocab = PrimitiveVocab::new(["old", "wet"], ["car", "cat", "dog", "truck"]).unwrap();
        let sim = tax.similarity_matrix(vocab.objects());
        (vocab, sim)
    }

    #[test]
    fn single_object_attribute_gives_one_group() {
        let (_, sim) = vehicle_animal_sim();
        let comps = [Composition::new(0, 2)].into_iter().collect();
        let g = cluster_minigroups(&comps, &sim, 4, 0).unwrap();
        assert_eq!(g, vec![group(0, 0, &[2])]);
    }

    #[test]
    fn similar_objects_share_groups() {
        let (_, sim) = vehicle_animal_sim();
        let comps: BTreeSet<_> = (0..4).map(|o| Composition::new(0, o)).collect();
        for seed in 0..5 {
            let g = cluster_minigroups(&comps, &sim, 2, seed).unwrap();
            let sets: Vec<Vec<usize>> = g.iter().map(|g| g.objs.iter().copied().collect()).collect();
            // car=0, cat=1, dog=2, truck=3
            assert_eq!(sets, vec![vec![0, 3], vec![1, 2]], "seed {seed}");
        }
    }

    #[test]
    fn groups_never_mix_attributes() {
        let (_, sim) = vehicle_animal_sim();
        let comps: BTreeSet<_> = (0..2)
            .flat_map(|a| (0..4).map(move |o| Composition::new(a, o)))
            .filter(|c| c.attr + c.obj != 4)
            .collect();
        let g = cluster_minigroups(&comps, &sim, 2, 1).unwrap();
        // attr 0: 4 objects -> 2 groups; attr 1: 3 objects -> 2 groups.
        assert_eq!(g.len(), 4);
        let covered: BTreeSet<_> = g
            .iter()
            .flat_map(|g| g.objs.iter().map(move |&o| Composition::new(g.attr, o)))
            .collect();
        assert_eq!(covered, comps);
        let total: usize = g.iter().map(MiniGroup::size).sum();
        assert_eq!(total, comps.len());
    }

    fn source(comps: &[Composition], per: usize) -> Vec<SourceSample> {
        comps
            .iter()
            .flat_map(|&c| {
                (0..per).map(move |k| SourceSample {
                    id: format!("{}_{}_{k}", c.attr, c.obj),
                    comp: c,
                })
            })
            .collect()
    }

    fn two_task_setup() -> (PrimitiveVocab, Vec<MiniGroup>, Assignment) {
        let vocab = PrimitiveVocab::new(["a", "b", "c"], ["x", "y", "z"]).unwrap();
        let groups = vec![group(0, 0, &[0, 1]), group(1, 1, &[0, 2])];
        let asg = Assignment {
            group_task: [(0, 1), (1, 2)].into_iter().collect(),
            t: 2,
        };
        (vocab, groups, asg)
    }

    #[test]
    fn emits_valid_benchmark_with_exact_split_counts() {
        let (vocab, groups, asg) = two_task_setup();
        let unseen: BTreeSet<_> = [Composition::new(2, 1)].into_iter().collect();
        let comps = [
            Composition::new(0, 0),
            Composition::new(0, 1),
            Composition::new(1, 0),
            Composition::new(1, 2),
            Composition::new(2, 1),
        ];
        let b = emit_benchmark(&vocab, &groups, &asg, &source(&comps, 10), &unseen, 0.8, 3).unwrap();
        assert!(validate_benchmark(&b).is_valid());
        for c in &comps[..4] {
            let train = b.samples.iter().filter(|s| s.comp == *c && s.split == Split::Train).count();
            let test = b.samples.iter().filter(|s| s.comp == *c && s.split == Split::Test).count();
            assert_eq!((train, test), (8, 2));
        }
        assert_eq!(b.samples_of(3, Split::Test).count(), 10);
        assert_eq!(b.samples_of(3, Split::Train).count(), 0);
    }

    #[test]
    fn singleton_composition_goes_to_train() {
        let (vocab, groups, asg) = two_task_setup();
        let mut src = source(&[Composition::new(0, 0)], 1);
        src.extend(source(&[Composition::new(1, 0)], 2));
        let b = emit_benchmark(&vocab, &groups, &asg, &src, &BTreeSet::new(), 0.8, 0).unwrap();
        let s = b.samples.iter().find(|s| s.comp == Composition::new(0, 0)).unwrap();
        assert_eq!(s.split, Split::Train);
        let two: Vec<_> = b.samples.iter().filter(|s| s.comp == Composition::new(1, 0)).collect();
        assert_eq!(two.iter().filter(|s| s.split == Split::Test).count(), 1);
    }

    #[test]
    fn emission_errors() {
        let (vocab, groups, asg) = two_task_setup();
        let overlap: BTreeSet<_> = [Composition::new(0, 0)].into_iter().collect();
        assert!(matches!(
            emit_benchmark(&vocab, &groups, &asg, &[], &overlap, 0.8, 0),
            Err(Error::Disjointness(_))
        ));
        let asg3 = Assignment {
            group_task: asg.group_task.clone(),
            t: 3,
        };
        assert!(matches!(
            emit_benchmark(&vocab, &groups, &asg3, &[], &BTreeSet::new(), 0.8, 0),
            Err(Error::EmptyTask(3))
        ));
    }

    #[test]
    fn parses_source_csv() {
        let text = "sample_id,attribute,object,split_hint\n\
                    s1,wet,dog,seen\ns2,dry,dog,unseen\ns3,wet,cat,seen\n";
        let d = SourceDataset::parse(text).unwrap();
        assert_eq!(d.vocab.attributes(), ["dry", "wet"]);
        assert_eq!(d.seen.len(), 2);
        assert_eq!(d.unseen_comps(), [Composition::new(0, 1)].into_iter().collect());
        assert!(SourceDataset::parse("sample_id,attribute,object,split_hint\ns,a,b,maybe\n").is_err());
    }
}
