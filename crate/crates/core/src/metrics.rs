//! Calibrated seen/unseen evaluation and the composition-incremental summary
//! metrics.
//!
//! A calibration bias is added to the scores of unseen candidates. Sweeping it
//! from very negative (unseen never wins) to very positive (unseen always
//! wins) traces seen accuracy against unseen accuracy; the best seen accuracy,
//! best unseen accuracy and the area under that curve summarize a step.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::Composition;
use crate::error::{Error, Result};

/// Scores of every evaluation sample against every candidate composition.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    /// Row-major `n_samples x n_candidates`; higher means more likely.
    pub scores: Vec<f64>,
    pub candidates: Vec<Composition>,
    pub seen_mask: Vec<bool>,
    /// Candidate index of each sample's true composition.
    pub labels: Vec<usize>,
    /// Task index of each sample.
    pub sample_task: Vec<usize>,
    pub sample_ids: Vec<String>,
}

impl ScoreTable {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.n_candidates();
        &self.scores[i * k..(i + 1) * k]
    }

    fn check(&self) -> Result<()> {
        let k = self.n_candidates();
        if self.n_samples() == 0 {
            return Err(Error::Empty("score table has no samples".into()));
        }
        if self.scores.len() != self.n_samples() * k
            || self.seen_mask.len() != k
            || self.sample_task.len() != self.n_samples()
        {
            return Err(Error::Shape("score table dimensions disagree".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Range {
                what: "label",
                value: bad as i64,
                lo: 0,
                hi: k as i64 - 1,
            });
        }
        if !self.seen_mask.iter().any(|&s| s) || self.seen_mask.iter().all(|&s| s) {
            return Err(Error::Degenerate(
                "evaluation needs at least one seen and one unseen candidate".into(),
            ));
        }
        Ok(())
    }

    /// Parses the text score-file format:
    ///
    /// ```text
    /// SCORES <n_samples> <n_candidates>
    /// <attr> <obj> <seen|unseen>            (one line per candidate)
    /// <sample_id> <task> <label_index> <score_1> ... <score_k>
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let fmt_err = |line: usize, msg: String| Error::Format { line, msg };

        let (ln, header) = lines.next().ok_or_else(|| fmt_err(1, "empty score file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let (n, k) = match h.as_slice() {
            ["SCORES", n, k] => (
                n.parse::<usize>().map_err(|_| fmt_err(ln, format!("bad sample count '{n}'")))?,
                k.parse::<usize>().map_err(|_| fmt_err(ln, format!("bad candidate count '{k}'")))?,
            ),
            _ => return Err(fmt_err(ln, "expected 'SCORES <n_samples> <n_candidates>'".into())),
        };

        let mut candidates = Vec::with_capacity(k);
        let mut seen_mask = Vec::with_capacity(k);
        for _ in 0..k {
            let (ln, line) = lines.next().ok_or_else(|| fmt_err(ln, "missing candidate lines".into()))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let [a, o, flag] = f.as_slice() else {
                return Err(fmt_err(ln, "expected '<attr> <obj> <seen|unseen>'".into()));
            };
            let a = a.parse().map_err(|_| fmt_err(ln, format!("bad attribute index '{a}'")))?;
            let o = o.parse().map_err(|_| fmt_err(ln, format!("bad object index '{o}'")))?;
            candidates.push(Composition::new(a, o));
            seen_mask.push(match *flag {
                "seen" => true,
                "unseen" => false,
                other => return Err(fmt_err(ln, format!("expected seen|unseen, got '{other}'"))),
            });
        }

        let mut scores = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n);
        let mut sample_task = Vec::with_capacity(n);
        let mut sample_ids = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = lines.next().ok_or_else(|| fmt_err(ln, "missing sample lines".into()))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 + k {
                return Err(fmt_err(ln, format!("expected {} fields, found {}", 3 + k, f.len())));
            }
            sample_ids.push(f[0].to_string());
            sample_task.push(f[1].parse().map_err(|_| fmt_err(ln, format!("bad task '{}'", f[1])))?);
            labels.push(f[2].parse().map_err(|_| fmt_err(ln, format!("bad label '{}'", f[2])))?);
            for s in &f[3..] {
                let v: f64 = s.parse().map_err(|_| fmt_err(ln, format!("bad score '{s}'")))?;
                scores.push(v);
            }
        }
        if let Some((ln, _)) = lines.next() {
            return Err(fmt_err(ln, "trailing content after the last sample".into()));
        }
        Ok(Self {
            scores,
            candidates,
            seen_mask,
            labels,
            sample_task,
            sample_ids,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("SCORES {} {}\n", self.n_samples(), self.n_candidates());
        for (c, &s) in self.candidates.iter().zip(&self.seen_mask) {
            let _ = writeln!(out, "{} {} {}", c.attr, c.obj, if s { "seen" } else { "unseen" });
        }
        for i in 0..self.n_samples() {
            let _ = write!(out, "{} {} {}", self.sample_ids[i], self.sample_task[i], self.labels[i]);
            for v in self.row(i) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }
}

/// One point of the calibration curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

/// Best seen candidate, best unseen candidate and their scores for one sample.
#[derive(Clone, Copy, Debug)]
struct Contest {
    seen_idx: usize,
    seen_score: f64,
    unseen_idx: usize,
    unseen_score: f64,
}

impl Contest {
    fn of(row: &[f64], seen_mask: &[bool]) -> Self {
        let mut c = Contest {
            seen_idx: usize::MAX,
            seen_score: f64::NEG_INFINITY,
            unseen_idx: usize::MAX,
            unseen_score: f64::NEG_INFINITY,
        };
        for (j, (&s, &is_seen)) in row.iter().zip(seen_mask).enumerate() {
            if is_seen {
                if s > c.seen_score || c.seen_idx == usize::MAX {
                    c.seen_idx = j;
                    c.seen_score = s;
                }
            } else if s > c.unseen_score || c.unseen_idx == usize::MAX {
                c.unseen_idx = j;
                c.unseen_score = s;
            }
        }
        c
    }

    /// Breakpoint: the bias at which the unseen candidate catches up.
    fn delta(&self) -> f64 {
        self.seen_score - self.unseen_score
    }

    /// Predicted candidate under `bias`, ties to the lower index.
    fn predict(&self, bias: f64) -> usize {
        let u = self.unseen_score + bias;
        if u > self.seen_score || (u == self.seen_score && self.unseen_idx < self.seen_idx) {
            self.unseen_idx
        } else {
            self.seen_idx
        }
    }
}

fn accuracies(st: &ScoreTable, predictions: impl Iterator<Item = usize>) -> (f64, f64) {
    let (mut seen_hit, mut seen_n, mut unseen_hit, mut unseen_n) = (0usize, 0usize, 0usize, 0usize);
    for (p, &label) in predictions.zip(&st.labels) {
        let hit = usize::from(p == label);
        if st.seen_mask[label] {
            seen_n += 1;
            seen_hit += hit;
        } else {
            unseen_n += 1;
            unseen_hit += hit;
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    (ratio(seen_hit, seen_n), ratio(unseen_hit, unseen_n))
}

/// Seen/unseen accuracy as a function of the calibration bias.
///
/// Per-sample breakpoints `delta = max seen score - max unseen score` are the
/// only biases at which a prediction can change. The curve is evaluated on
/// every plateau between consecutive distinct breakpoints (at their midpoint)
/// and at the two sentinels `min(delta) - 1` and `max(delta) + 1`, so each
/// distinct operating point appears exactly once. Points are sorted by bias.
/// A sample group (seen or unseen labels) with no members has accuracy 0.
pub fn calibrated_curve(st: &ScoreTable) -> Result<Vec<CurvePoint>> {
    st.check()?;
    let contests: Vec<Contest> = (0..st.n_samples())
        .map(|i| Contest::of(st.row(i), &st.seen_mask))
        .collect();
    let mut deltas: Vec<f64> = contests.iter().map(Contest::delta).collect();
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite score in table".into()));
    }
    deltas.sort_by(f64::total_cmp);
    deltas.dedup();

    let lo = deltas[0] - 1.0;
    let hi = deltas[deltas.len() - 1] + 1.0;
    let mut biases = Vec::with_capacity(deltas.len() + 1);
    biases.push(lo);
    biases.extend(deltas.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    biases.push(hi);

    Ok(biases
        .into_iter()
        .map(|bias| {
            let (seen_acc, unseen_acc) = accuracies(st, contests.iter().map(|c| c.predict(bias)));
            CurvePoint {
                bias,
                seen_acc,
                unseen_acc,
            }
        })
        .collect())
}

/// Trapezoidal area of the (seen, unseen) polyline along the seen axis.
pub fn curve_area(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[0].seen_acc - w[1].seen_acc).abs() * 0.5 * (w[0].unseen_acc + w[1].unseen_acc))
        .sum()
}

/// Metrics after learning task `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    #[serde(rename = "S")]
    pub seen: f64,
    #[serde(rename = "U")]
    pub unseen: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    /// Best seen accuracy restricted to the test samples of each task `i <= step`.
    #[serde(rename = "S_per_task")]
    pub seen_per_task: BTreeMap<usize, f64>,
}

/// Evaluates one step: best seen accuracy (unseen never wins), best unseen
/// accuracy (unseen always wins), curve area and per-task seen accuracy at the
/// best-seen operating point.
pub fn evaluate_step(st: &ScoreTable, step: usize) -> Result<StepMetrics> {
    let curve = calibrated_curve(st)?;
    for (i, &label) in st.labels.iter().enumerate() {
        if st.seen_mask[label] != (st.sample_task[i] <= step) {
            return Err(Error::Shape(format!(
                "sample {} of task {} disagrees with the seen mask at step {step}",
                st.sample_ids.get(i).map_or("?", String::as_str),
                st.sample_task[i]
            )));
        }
    }
    let first = curve[0];
    let last = curve[curve.len() - 1];

    let mut per_task: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for i in 0..st.n_samples() {
        let task = st.sample_task[i];
        if task > step {
            continue;
        }
        let c = Contest::of(st.row(i), &st.seen_mask);
        let e = per_task.entry(task).or_default();
        e.0 += usize::from(c.predict(first.bias) == st.labels[i]);
        e.1 += 1;
    }
    let seen_per_task = per_task
        .into_iter()
        .map(|(t, (hit, n))| (t, hit as f64 / n as f64))
        .collect();

    Ok(StepMetrics {
        step,
        seen: first.seen_acc,
        unseen: last.unseen_acc,
        auc: curve_area(&curve),
        seen_per_task,
    })
}

/// Dense-sweep reference for the curve area: accuracies at `grid` evenly
/// spaced biases over `[min delta - 1, max delta + 1]`, computed by a full
/// argmax over every candidate, integrated with the trapezoid rule.
pub fn auc_oracle(st: &ScoreTable, grid: usize) -> Result<f64> {
    st.check()?;
    if grid < 2 {
        return Err(Error::Range {
            what: "grid",
            value: grid as i64,
            lo: 2,
            hi: i64::MAX,
        });
    }
    let k = st.n_candidates();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..st.n_samples() {
        let row = st.row(i);
        let best = |seen: bool| {
            (0..k)
                .filter(|&j| st.seen_mask[j] == seen)
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let d = best(true) - best(false);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    let (lo, hi) = (lo - 1.0, hi + 1.0);
    let points: Vec<CurvePoint> = (0..grid)
        .map(|g| {
            let bias = lo + (hi - lo) * g as f64 / (grid - 1) as f64;
            let preds = (0..st.n_samples()).map(|i| {
                let row = st.row(i);
                let mut arg = 0;
                let mut best = f64::NEG_INFINITY;
                for j in 0..k {
                    let s = row[j] + if st.seen_mask[j] { 0.0 } else { bias };
                    if s > best {
                        best = s;
                        arg = j;
                    }
                }
                arg
            });
            let (seen_acc, unseen_acc) = accuracies(st, preds);
            CurvePoint {
                bias,
                seen_acc,
                unseen_acc,
            }
        })
        .collect();
    Ok(curve_area(&points))
}

/// Averages over the continual run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompilSummary {
    #[serde(rename = "mU")]
    pub mean_unseen: f64,
    #[serde(rename = "mAUC")]
    pub mean_auc: f64,
    /// Mean drop of each task's best seen accuracy between when it was
    /// learned and the end of the run.
    #[serde(rename = "fS")]
    pub forgetting: f64,
    #[serde(rename = "U")]
    pub final_unseen: f64,
    #[serde(rename = "S")]
    pub final_seen: f64,
    #[serde(rename = "AUC")]
    pub final_auc: f64,
}

pub fn compil_summary(steps: &[StepMetrics]) -> Result<CompilSummary> {
    let t = steps.len();
    if t == 0 {
        return Err(Error::Empty("no steps to summarize".into()));
    }
    for (i, s) in steps.iter().enumerate() {
        if s.step != i + 1 {
            return Err(Error::Incomplete(format!("step {} found at position {}", s.step, i + 1)));
        }
    }
    let last = &steps[t - 1];
    let mut forgetting = 0.0;
    for (i, s) in steps.iter().enumerate() {
        let task = i + 1;
        let learned = s
            .seen_per_task
            .get(&task)
            .ok_or_else(|| Error::Incomplete(format!("S_{{{task},{task}}} missing")))?;
        let end = last
            .seen_per_task
            .get(&task)
            .ok_or_else(|| Error::Incomplete(format!("S_{{{t},{task}}} missing")))?;
        forgetting += learned - end;
    }
    let n = t as f64;
    Ok(CompilSummary {
        mean_unseen: steps.iter().map(|s| s.unseen).sum::<f64>() / n,
        mean_auc: steps.iter().map(|s| s.auc).sum::<f64>() / n,
        forgetting: forgetting / n,
        final_unseen: last.unseen,
        final_seen: last.seen,
        final_auc: last.auc,
    })
}

/// Percent with two decimals, the reporting convention for tables.
pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl CompilSummary {
    pub fn header() -> &'static str {
        "U\tS\tAUC\tmU\tfS\tmAUC"
    }

    pub fn row(&self) -> String {
        [
            self.final_unseen,
            self.final_seen,
            self.final_auc,
            self.mean_unseen,
            self.forgetting,
            self.mean_auc,
        ]
        .map(pct)
        .join("\t")
    }
}
