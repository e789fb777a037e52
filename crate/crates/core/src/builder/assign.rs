//! Mini-group to task assignment maximizing per-task primitive coverage.
//!
//! The objective counts, for every task, the distinct attributes plus the
//! distinct objects among the compositions it receives. Larger values mean the
//! primitives are spread over many tasks, so each task recombines primitives
//! that other tasks also see.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::rng::RngStream;

/// Compositions sharing one attribute with semantically close objects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniGroup {
    pub id: usize,
    pub attr: usize,
    pub objs: BTreeSet<usize>,
}

impl MiniGroup {
    pub fn size(&self) -> usize {
        self.objs.len()
    }
}

/// Task (1-based) of every mini-group, keyed by group id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub group_task: BTreeMap<usize, usize>,
    #[serde(rename = "T")]
    pub t: usize,
}

impl Assignment {
    fn from_vec(groups: &[MiniGroup], tasks: &[usize], t: usize) -> Self {
        Self {
            group_task: groups.iter().zip(tasks).map(|(g, &k)| (g.id, k)).collect(),
            t,
        }
    }

    fn to_vec(&self, groups: &[MiniGroup]) -> Result<Vec<usize>> {
        groups
            .iter()
            .map(|g| match self.group_task.get(&g.id) {
                Some(&k) if (1..=self.t).contains(&k) => Ok(k),
                Some(&k) => Err(Error::Range {
                    what: "task",
                    value: k as i64,
                    lo: 1,
                    hi: self.t as i64,
                }),
                None => Err(Error::Incomplete(format!("group {} is unassigned", g.id))),
            })
            .collect()
    }
}

/// Sum over tasks of distinct attributes plus distinct objects.
pub fn objective_value(groups: &[MiniGroup], asg: &Assignment) -> Result<usize> {
    let tasks = asg.to_vec(groups)?;
    Ok(objective_of(groups, &tasks, asg.t))
}

fn objective_of(groups: &[MiniGroup], tasks: &[usize], t: usize) -> usize {
    let mut attrs = vec![BTreeSet::new(); t];
    let mut objs = vec![BTreeSet::new(); t];
    for (g, &k) in groups.iter().zip(tasks) {
        attrs[k - 1].insert(g.attr);
        objs[k - 1].extend(g.objs.iter().copied());
    }
    attrs.iter().zip(&objs).map(|(a, o)| a.len() + o.len()).sum()
}

/// Inclusive per-task composition-count bounds.
#[derive(Clone, Copy, Debug)]
struct Balance {
    lo: f64,
    hi: f64,
}

impl Balance {
    fn new(groups: &[MiniGroup], t: usize, tol: f64) -> Self {
        let mean = groups.iter().map(MiniGroup::size).sum::<usize>() as f64 / t as f64;
        let slack = 1e-9 * mean.max(1.0);
        Self {
            lo: (1.0 - tol) * mean - slack,
            hi: (1.0 + tol) * mean + slack,
        }
    }

    fn ok(&self, load: usize) -> bool {
        let l = load as f64;
        l >= self.lo && l <= self.hi
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tol) {
        return Err(Error::Format {
            line: 0,
            msg: format!("balance tolerance must lie in [0, 1], got {tol}"),
        });
    }
    Ok(())
}

fn check_t(t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::Range {
            what: "T",
            value: 0,
            lo: 1,
            hi: i64::MAX,
        });
    }
    Ok(())
}

pub const ENUMERATION_GUARD: u128 = 10_000_000;

/// Exact maximizer by enumeration of all `T^|groups|` assignments, keeping
/// only those whose task loads lie within `(1 ± tol)` of the mean. Ties go to
/// the lexicographically smallest task vector.
pub fn brute_force_assign(
    groups: &[MiniGroup],
    t: usize,
    balance_tol: f64,
) -> Result<(Assignment, usize)> {
    check_t(t)?;
    check_tol(balance_tol)?;
    let total = (t as u128).checked_pow(groups.len() as u32).unwrap_or(u128::MAX);
    if total > ENUMERATION_GUARD {
        return Err(Error::TooLarge(total));
    }
    let balance = Balance::new(groups, t, balance_tol);
    let mut tasks = vec![1usize; groups.len()];
    let mut best: Option<(Vec<usize>, usize)> = None;
    loop {
        let mut loads = vec![0usize; t];
        for (g, &k) in groups.iter().zip(&tasks) {
            loads[k - 1] += g.size();
        }
        if loads.iter().all(|&l| balance.ok(l)) {
            let v = objective_of(groups, &tasks, t);
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((tasks.clone(), v));
            }
        }
        // Odometer increment, first group most significant.
        let mut pos = groups.len();
        loop {
            if pos == 0 {
                let (tasks, v) = best.ok_or_else(|| {
                    Error::Infeasible(format!("no assignment of {} groups to {t} tasks is balanced", groups.len()))
                })?;
                return Ok((Assignment::from_vec(groups, &tasks, t), v));
            }
            pos -= 1;
            if tasks[pos] < t {
                tasks[pos] += 1;
                break;
            }
            tasks[pos] = 1;
        }
    }
}

/// Incremental bookkeeping of the objective for local search.
struct Coverage<'a> {
    groups: &'a [MiniGroup],
    tasks: Vec<usize>,
    attr_count: Vec<BTreeMap<usize, usize>>,
    obj_count: Vec<BTreeMap<usize, usize>>,
    loads: Vec<usize>,
    value: usize,
}

impl<'a> Coverage<'a> {
    fn new(groups: &'a [MiniGroup], t: usize) -> Self {
        Self {
            groups,
            tasks: vec![0; groups.len()],
            attr_count: vec![BTreeMap::new(); t],
            obj_count: vec![BTreeMap::new(); t],
            loads: vec![0; t],
            value: 0,
        }
    }

    fn gain_if_added(&self, g: usize, k: usize) -> usize {
        let grp = &self.groups[g];
        let a = usize::from(!self.attr_count[k - 1].contains_key(&grp.attr));
        a + grp
            .objs
            .iter()
            .filter(|o| !self.obj_count[k - 1].contains_key(o))
            .count()
    }

    fn add(&mut self, g: usize, k: usize) {
        let grp = &self.groups[g];
        let slot = k - 1;
        let a = self.attr_count[slot].entry(grp.attr).or_insert(0);
        if *a == 0 {
            self.value += 1;
        }
        *a += 1;
        for &o in &grp.objs {
            let c = self.obj_count[slot].entry(o).or_insert(0);
            if *c == 0 {
                self.value += 1;
            }
            *c += 1;
        }
        self.loads[slot] += grp.size();
        self.tasks[g] = k;
    }

    fn remove(&mut self, g: usize) {
        let grp = &self.groups[g];
        let slot = self.tasks[g] - 1;
        let a = self.attr_count[slot].get_mut(&grp.attr).expect("assigned");
        *a -= 1;
        if *a == 0 {
            self.attr_count[slot].remove(&grp.attr);
            self.value -= 1;
        }
        for o in &grp.objs {
            let c = self.obj_count[slot].get_mut(o).expect("assigned");
            *c -= 1;
            if *c == 0 {
                self.obj_count[slot].remove(o);
                self.value -= 1;
            }
        }
        self.loads[slot] -= grp.size();
        self.tasks[g] = 0;
    }

    fn relocate(&mut self, g: usize, k: usize) {
        self.remove(g);
        self.add(g, k);
    }

    fn feasible(&self, balance: &Balance) -> bool {
        self.loads.iter().all(|&l| balance.ok(l))
    }

    /// First strictly improving feasible move in fixed scan order: single-group
    /// relocations, then pairwise swaps. Returns whether a move was applied.
    fn improve_once(&mut self, balance: &Balance) -> bool {
        let n = self.groups.len();
        let t = self.loads.len();
        for g in 0..n {
            let from = self.tasks[g];
            for k in 1..=t {
                if k == from {
                    continue;
                }
                let before = self.value;
                self.relocate(g, k);
                if self.value > before && self.feasible(balance) {
                    return true;
                }
                self.relocate(g, from);
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (ti, tj) = (self.tasks[i], self.tasks[j]);
                if ti == tj {
                    continue;
                }
                let before = self.value;
                self.relocate(i, tj);
                self.relocate(j, ti);
                if self.value > before && self.feasible(balance) {
                    return true;
                }
                self.relocate(j, tj);
                self.relocate(i, ti);
            }
        }
        false
    }
}

/// Result of [`assign_tasks`] with the intermediate greedy value kept for
/// reporting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignOutcome {
    pub assignment: Assignment,
    pub value: usize,
    pub greedy_value: usize,
    /// Objective before and after every accepted local-search move.
    pub trace: Vec<(usize, usize)>,
}

/// Greedy construction followed by first-improvement local search.
///
/// Greedy places groups in descending size order on the balance-feasible task
/// with the largest objective gain (ties to the lowest task). Local search then
/// spends up to `iters` scans; every accepted move strictly improves the
/// objective. When a scan finds no improving move, the search restarts from
/// the best assignment so far after a seeded random perturbation.
pub fn assign_tasks(
    groups: &[MiniGroup],
    t: usize,
    balance_tol: f64,
    seed: u64,
    iters: usize,
) -> Result<AssignOutcome> {
    check_t(t)?;
    check_tol(balance_tol)?;
    let balance = Balance::new(groups, t, balance_tol);

    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| groups[b].size().cmp(&groups[a].size()).then(a.cmp(&b)));
    let mut cov = Coverage::new(groups, t);
    for &g in &order {
        let best = (1..=t)
            .filter(|&k| (cov.loads[k - 1] + groups[g].size()) as f64 <= balance.hi)
            .map(|k| (k, cov.gain_if_added(g, k)))
            .fold(None, |acc: Option<(usize, usize)>, (k, gain)| match acc {
                Some((_, b)) if b >= gain => acc,
                _ => Some((k, gain)),
            });
        let Some((k, _)) = best else {
            return Err(Error::Infeasible(format!(
                "greedy cannot place group {} without exceeding the load bound",
                groups[g].id
            )));
        };
        cov.add(g, k);
    }
    if !cov.feasible(&balance) {
        return Err(Error::Infeasible(format!(
            "greedy loads {:?} violate the balance bounds [{:.2}, {:.2}]",
            cov.loads, balance.lo, balance.hi
        )));
    }
    let greedy_value = cov.value;

    let mut rng = RngStream::new(seed).substream("assign-kick");
    let mut best = (cov.tasks.clone(), cov.value);
    let mut trace = Vec::new();
    let mut remaining = iters;
    while remaining > 0 && groups.len() > 1 && t > 1 {
        remaining -= 1;
        let before = cov.value;
        if cov.improve_once(&balance) {
            trace.push((before, cov.value));
            if cov.value > best.1 {
                best = (cov.tasks.clone(), cov.value);
            }
            continue;
        }
        // Local optimum: perturb the incumbent with a few random feasible
        // relocations and search again.
        for (g, &k) in best.0.iter().enumerate() {
            if cov.tasks[g] != k {
                cov.relocate(g, k);
            }
        }
        let kicks = 1 + rng.random_range(0..groups.len().min(3));
        for _ in 0..kicks {
            let g = rng.random_range(0..groups.len());
            let k = rng.random_range(1..=t);
            let from = cov.tasks[g];
            cov.relocate(g, k);
            if !cov.feasible(&balance) {
                cov.relocate(g, from);
            }
        }
    }
    let (tasks, value) = best;
    debug_assert_eq!(value, objective_of(groups, &tasks, t));
    Ok(AssignOutcome {
        assignment: Assignment::from_vec(groups, &tasks, t),
        value,
        greedy_value,
        trace,
    })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn asg(pairs: &[(usize, usize)], t: usize) -> Assignment {
        Assignment {
            group_task: pairs.iter().copied().collect(),
            t,
        }
    }

    #[test]
    fn objective_examples() {
        let groups = vec![group(0, 0, &[0]), group(1, 1, &[0])];
        assert_eq!(objective_value(&groups, &asg(&[(0, 1), (1, 2)], 2)).unwrap(), 4);
        assert_eq!(objective_value(&groups, &asg(&[(0, 1), (1, 1)], 2)).unwrap(), 3);
        assert_eq!(objective_value(&groups, &asg(&[(0, 1), (1, 1)], 1)).unwrap(), 3);
        assert!(matches!(
            objective_value(&groups, &asg(&[(0, 1)], 2)),
            Err(Error::Incomplete(_))
        ));
    }

    #[test]
    fn brute_force_single_group() {
        let groups = vec![group(7, 2, &[1, 4])];
        let (a, v) = brute_force_assign(&groups, 1, 0.25).unwrap();
        assert_eq!(v, 3);
        assert_eq!(a.group_task[&7], 1);
    }

    #[test]
    fn brute_force_pairs_one_group_per_attribute() {
        // Two attributes, two object clusters. Splitting each attribute's
        // groups across tasks and crossing the object clusters puts both
        // attributes and all four objects in each task: 2 * (2 + 4).
        let groups = vec![
            group(0, 0, &[0, 1]),
            group(1, 0, &[2, 3]),
            group(2, 1, &[0, 1]),
            group(3, 1, &[2, 3]),
        ];
        let (a, v) = brute_force_assign(&groups, 2, 1.0).unwrap();
        assert_eq!(v, 12);
        assert_ne!(a.group_task[&0], a.group_task[&1]);
        assert_eq!(a.group_task[&0], a.group_task[&3]);
        // Enumerate by hand to be sure nothing beats 8.
        let mut best = 0;
        for code in 0..16usize {
            let pairs: Vec<(usize, usize)> = (0..4).map(|g| (g, 1 + (code >> (3 - g) & 1))).collect();
            best = best.max(objective_value(&groups, &asg(&pairs, 2)).unwrap());
        }
        assert_eq!(best, 12);
    }

    #[test]
    fn brute_force_infeasible_and_guard() {
        let groups = vec![group(0, 0, &[0, 1, 2]), group(1, 1, &[0])];
        assert!(matches!(brute_force_assign(&groups, 2, 0.0), Err(Error::Infeasible(_))));
        let many = random_instance(1, 30);
        assert!(matches!(brute_force_assign(&many, 3, 1.0), Err(Error::TooLarge(_))));
    }

    #[test]
    fn local_search_matches_enumeration() {
        for seed in 0..20u64 {
            let n = 3 + (seed as usize % 6);
            let t = 2 + (seed as usize % 2);
            let groups = random_instance(seed, n);
            let (_, exact) = brute_force_assign(&groups, t, 1.0).unwrap();
            let out = assign_tasks(&groups, t, 1.0, seed, 500).unwrap();
            assert_eq!(out.value, exact, "seed {seed}");
            assert_eq!(objective_value(&groups, &out.assignment).unwrap(), out.value);
        }
    }

    #[test]
    fn accepted_moves_strictly_improve() {
        let groups = random_instance(42, 24);
        let out = assign_tasks(&groups, 4, 0.5, 3, 200).unwrap();
        assert!(!out.trace.is_empty());
        for &(before, after) in &out.trace {
            assert!(after > before);
        }
        assert!(out.value >= out.greedy_value);
    }

    #[test]
    fn greedy_beats_random_on_average() {
        let groups = random_instance(9, 16);
        let t = 3;
        let greedy = assign_tasks(&groups, t, 1.0, 0, 0).unwrap();
        assert_eq!(greedy.value, greedy.greedy_value);
        let mut total = 0usize;
        for seed in 0..100u64 {
            let mut rng = RngStream::new(seed).substream("uniform");
            let tasks: Vec<usize> = groups.iter().map(|_| rng.random_range(1..=t)).collect();
            total += objective_of(&groups, &tasks, t);
        }
        assert!(greedy.value as f64 >= total as f64 / 100.0);
    }

    #[test]
    fn single_task_takes_everything() {
        let groups = random_instance(5, 6);
        let out = assign_tasks(&groups, 1, 0.25, 0, 10).unwrap();
        let attrs: BTreeSet<_> = groups.iter().map(|g| g.attr).collect();
        let objs: BTreeSet<_> = groups.iter().flat_map(|g| g.objs.iter()).collect();
        assert_eq!(out.value, attrs.len() + objs.len());
    }

    #[test]
    fn deterministic_given_seed() {
        let groups = random_instance(11, 20);
        let a = assign_tasks(&groups, 4, 0.3, 17, 100).unwrap();
        let b = assign_tasks(&groups, 4, 0.3, 17, 100).unwrap();
        assert_eq!(a, b);
    }
}
