//! The continual learning loop: zero-shot, joint, vanilla and pseudo-replay
//! strategies, per-step evaluation, run logs and checkpoints.

mod distill;
mod figure1;

pub use distill::{combined_loss, distill_loss, kd_terms, kd_value, Kd};
pub use figure1::{figure1_experiment, Fig1Config, Fig1Point, Fig1Report};

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{Benchmark, Composition, Split};
use crate::error::{Error, Result};
use crate::metrics::{compil_summary, evaluate_step, CompilSummary, ScoreTable, StepMetrics};
use crate::model::{unit_rows, Anchors, EmbeddingProvider, LeParams};
use crate::numkernel::{dot, AdamConfig, ParamStore, RngStream};
use crate::synthesizer::{train_synthesizer, FrozenLe, RecLoss, SemAnchors, SynthConfig, SynthState, SynthTrainOpts};

/// Which compositions the distillation term covers at step `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdScope {
    /// Tasks `1..=t`, current task included.
    #[serde(rename = "upto_t")]
    UptoT,
    /// Tasks `1..t`.
    #[serde(rename = "upto_t_minus_1")]
    UptoTMinus1,
}

/// Source of the primitive tokens on the synthesizer's frozen language path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTokens {
    /// Pretrained tokens, fixed for the whole run.
    Pretrained,
    /// Tokens of the encoder frozen at the latest task boundary.
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub lr: f64,
    /// Adam step size for the synthesizer.
    pub synth_lr: f64,
    /// Synthesizer epochs per boundary; `epochs_per_task` when absent.
    pub synth_epochs: Option<usize>,
    pub batch: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub prompt_len: usize,
    /// Pseudo-features per past composition; the mean number of real training
    /// samples per composition of the current task when absent.
    pub pseudo_per_comp: Option<usize>,
    /// Pseudo-batch size as a multiple of the real batch size.
    pub replay_mix: f64,
    pub seeds: Vec<u64>,
    pub kd_scope: KdScope,
    pub synth_tokens: SynthTokens,
    pub rec_loss: RecLoss,
    pub synth_hidden: usize,
    pub synth_z: usize,
    pub adapter_gate: f64,
    /// Token width; the feature dimension when absent.
    pub d_tok: Option<usize>,
    /// Standard deviation of the noise added to pretrained tokens and context.
    pub init_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 10,
            lr: 3e-3,
            synth_lr: 1e-3,
            synth_epochs: None,
            batch: 128,
            tau: 0.01,
            alpha: 0.1,
            beta: 0.003,
            prompt_len: 3,
            pseudo_per_comp: None,
            replay_mix: 2.0,
            seeds: vec![0, 1, 2],
            kd_scope: KdScope::UptoT,
            synth_tokens: SynthTokens::Previous,
            rec_loss: RecLoss::L2,
            synth_hidden: 256,
            synth_z: 64,
            adapter_gate: 0.2,
            d_tok: None,
            init_noise: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("train.{what}")));
        if self.epochs_per_task == 0 {
            return bad("epochs_per_task must be positive");
        }
        if !(self.lr > 0.0 && self.synth_lr > 0.0 && self.tau > 0.0) {
            return bad("lr, synth_lr and tau must be positive");
        }
        if self.batch == 0 || self.prompt_len == 0 || self.synth_hidden == 0 || self.synth_z == 0 {
            return bad("batch, prompt_len, synth_hidden and synth_z must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.replay_mix > 0.0 && self.replay_mix <= 4.0) {
            return bad("replay_mix must lie in (0, 4]");
        }
        if !(0.0..=1.0).contains(&self.adapter_gate) {
            return bad("adapter_gate must lie in [0, 1]");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.d_tok == Some(0) || !(self.init_noise >= 0.0) {
            return bad("d_tok must be positive and init_noise non-negative");
        }
        Ok(())
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            hidden: self.synth_hidden,
            z_dim: self.synth_z,
            prompt_len: self.prompt_len,
            gate: self.adapter_gate,
            rec_loss: self.rec_loss,
        }
    }

    pub(crate) fn d_tok_for(&self, dim: usize) -> usize {
        self.d_tok.unwrap_or(dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    Joint,
    Vanilla,
    PseudoReplay,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::ZeroShot, Self::Joint, Self::Vanilla, Self::PseudoReplay];

    pub fn name(self) -> &'static str {
        match self {
            Self::ZeroShot => "zero_shot",
            Self::Joint => "joint",
            Self::Vanilla => "vanilla",
            Self::PseudoReplay => "pseudo_replay",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown strategy '{s}'")))
    }
}

/// Inputs shared by every step of one run.
pub struct RunInputs<'a> {
    pub bench: &'a Benchmark,
    pub provider: &'a EmbeddingProvider,
    pub cfg: &'a TrainConfig,
    pub anchors: Anchors,
}

impl<'a> RunInputs<'a> {
    pub fn new(bench: &'a Benchmark, provider: &'a EmbeddingProvider, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.check()?;
        let anchors = provider.anchors(&bench.vocab, &bench.all_comps())?;
        if anchors.attr.first().map(Vec::len) != Some(provider.dim) {
            return Err(Error::Shape("anchor width differs from the provider dimension".into()));
        }
        let train: BTreeSet<&str> = bench
            .samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.id.as_str())
            .collect();
        if let Some(s) = bench.samples.iter().find(|s| s.split == Split::Test && train.contains(s.id.as_str())) {
            return Err(Error::Disjointness(format!("sample '{}' is in both splits", s.id)));
        }
        for s in &bench.samples {
            provider.sample(&s.id)?;
        }
        Ok(Self {
            bench,
            provider,
            cfg,
            anchors,
        })
    }

    fn features(&self, task: usize, split: Split) -> Vec<(&'a [f64], Composition)> {
        self.bench
            .samples_of(task, split)
            .map(|s| (self.provider.sample(&s.id).expect("checked in new"), s.comp))
            .collect()
    }

    fn sem(&self) -> SemAnchors<'_> {
        SemAnchors {
            attr: &self.anchors.attr,
            obj: &self.anchors.obj,
        }
    }

    /// Scores of all test samples against every composition; seen means
    /// tasks `1..=t`.
    pub fn score_table<F>(&self, t: usize, mut score: F) -> Result<ScoreTable>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let candidates = self.bench.all_comps();
        let comp_task = self.bench.comp_task();
        let seen_mask = candidates.iter().map(|c| comp_task[c] <= t).collect();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut sample_task = Vec::new();
        let mut sample_ids = Vec::new();
        for s in self.bench.samples.iter().filter(|s| s.split == Split::Test) {
            scores.extend(score(self.provider.sample(&s.id)?)?);
            labels.push(candidates.iter().position(|&c| c == s.comp).expect("benchmark comp"));
            sample_task.push(s.task);
            sample_ids.push(s.id.clone());
        }
        Ok(ScoreTable {
            scores,
            candidates,
            seen_mask,
            labels,
            sample_task,
            sample_ids,
        })
    }

    fn evaluate_le(&self, le: &LeParams, t: usize) -> Result<StepMetrics> {
        let set = le.encode_set(&self.bench.all_comps())?;
        let st = self.score_table(t, |x| {
            let u = &unit_rows([x])?[0];
            Ok(set.vecs.iter().map(|c| dot(u, c)).collect())
        })?;
        evaluate_step(&st, t)
    }

    fn evaluate_zero_shot(&self, t: usize) -> Result<StepMetrics> {
        let comps = self.bench.all_comps();
        let st = self.score_table(t, |x| {
            let u = &unit_rows([x])?[0];
            Ok(comps.iter().map(|c| dot(u, &self.anchors.comp[c])).collect())
        })?;
        evaluate_step(&st, t)
    }
}

/// State carried across tasks of one continual run.
#[derive(Clone, Debug)]
pub struct ContinualState {
    pub le: LeParams,
    /// Copy of `le` taken at the last task boundary.
    pub le_frozen: Option<LeParams>,
    pub synth: Option<SynthState>,
    pub step: usize,
    pub history: Vec<StepMetrics>,
    /// Generator checkpoint bytes at the end of the previous boundary.
    generator_bytes: Option<Vec<u8>>,
    stream: RngStream,
    seed: u64,
}

impl ContinualState {
    /// A fresh pretrained model for `seed`; pseudo-replay also gets a
    /// synthesizer built on the same pretrained language path.
    pub fn new(inputs: &RunInputs<'_>, seed: u64, strategy: Strategy) -> Result<Self> {
        let stream = RngStream::new(seed);
        let cfg = inputs.cfg;
        let le = LeParams::init(
            &inputs.anchors,
            cfg.d_tok_for(inputs.provider.dim),
            cfg.init_noise,
            &stream.child("le"),
        )?;
        let synth = match strategy {
            Strategy::PseudoReplay => Some(SynthState::new(&le, cfg.synth_config(), &stream.child("synth"))?),
            _ => None,
        };
        Ok(Self {
            le,
            le_frozen: None,
            synth,
            step: 0,
            history: Vec::new(),
            generator_bytes: None,
            stream,
            seed,
        })
    }

    /// Checkpoint of the language tokens plus, when present, the generator.
    pub fn checkpoint(&self) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        out.extend_prefixed("le.", &self.le.store)?;
        if let Some(s) = &self.synth {
            out.extend_prefixed("synth.", &s.generator())?;
        }
        Ok(out)
    }
}

/// One JSON line of the run log.
fn log_line(seed: u64, strategy: Strategy, step: usize, body: Value) -> Value {
    let mut line = json!({"seed": seed, "strategy": strategy.name(), "step": step});
    if let (Value::Object(m), Value::Object(b)) = (&mut line, body) {
        m.extend(b);
    }
    line
}

/// Trains one task in place. Vanilla sees only the current task. Pseudo-replay
/// freezes the encoder, refits the synthesizer on the previous task, and mixes
/// synthesized features of all past compositions into every batch together
/// with the distillation term.
pub fn train_task(
    state: &mut ContinualState,
    inputs: &RunInputs<'_>,
    t: usize,
    strategy: Strategy,
    log: &mut Vec<Value>,
) -> Result<()> {
    if t != state.step + 1 {
        return Err(Error::Order {
            expected: state.step + 1,
            got: t,
        });
    }
    if !matches!(strategy, Strategy::Vanilla | Strategy::PseudoReplay) {
        return Err(Error::Validation(format!("{strategy} does not train task by task")));
    }
    let cfg = inputs.cfg;
    let b = inputs.bench;
    let seed = state.seed;
    let task_stream = state.stream.child(&format!("task-{t}"));
    let real = inputs.features(t, Split::Train);
    if real.is_empty() {
        return Err(Error::EmptyTask(t));
    }

    let mut pseudo: Vec<(Vec<f64>, Composition)> = Vec::new();
    let replaying = strategy == Strategy::PseudoReplay && t >= 2;
    if replaying {
        state.le_frozen = Some(state.le.clone());
        log.push(log_line(seed, strategy, t, json!({"event": "freeze_le"})));

        let synth = state.synth.as_mut().expect("pseudo-replay state has a synthesizer");
        if cfg.synth_tokens == SynthTokens::Previous {
            synth.frozen = FrozenLe::from_le(&state.le);
        }
        let before = synth.generator().to_cpkt();
        if state.generator_bytes.as_ref().is_some_and(|prev| *prev != before) {
            log.push(log_line(seed, strategy, t, json!({"event": "generator_reset"})));
        }
        let prev_data = inputs.features(t - 1, Split::Train);
        let opts = SynthTrainOpts {
            epochs: cfg.synth_epochs.unwrap_or(cfg.epochs_per_task),
            lr: cfg.synth_lr,
            alpha: cfg.alpha,
            tau: cfg.tau,
            batch: cfg.batch,
        };
        let epochs = train_synthesizer(synth, &prev_data, &inputs.sem(), &opts, &task_stream.child("synth"))?;
        log.push(log_line(seed, strategy, t, json!({"event": "encoder_reinit"})));
        for e in epochs {
            log.push(log_line(
                seed,
                strategy,
                t,
                json!({"phase": "synthesizer", "epoch": e.epoch, "L_rec": e.l_rec, "L_kl": e.l_kl, "L_sem": e.l_sem}),
            ));
        }
        state.generator_bytes = Some(synth.generator().to_cpkt());

        let n_per = cfg.pseudo_per_comp.unwrap_or_else(|| {
            let comps = b.comps(t).len().max(1);
            ((real.len() as f64 / comps as f64).round() as usize).max(1)
        });
        if n_per > 0 {
            let past = b.comps_in(1, t - 1);
            pseudo = synth.synth_pseudo(&past, n_per, &task_stream.child("pseudo"))?;
        }
    }

    // Past compositions enter the candidate set only when they are replayed.
    let cand: Vec<Composition> = if pseudo.is_empty() {
        b.comps(t).iter().copied().collect()
    } else {
        b.comps_in(1, t)
    };
    let index = |c: &Composition| cand.iter().position(|k| k == c).expect("candidate");
    let real_lab: Vec<(&[f64], usize)> = real.iter().map(|(x, c)| (*x, index(c))).collect();
    let pseudo_lab: Vec<(&[f64], usize)> = pseudo.iter().map(|(x, c)| (x.as_slice(), index(c))).collect();
    let kd_comps: Vec<Composition> = match cfg.kd_scope {
        KdScope::UptoT => b.comps_in(1, t),
        KdScope::UptoTMinus1 => b.comps_in(1, t - 1),
    };
    let use_kd = replaying && !kd_comps.is_empty();
    log.push(log_line(seed, strategy, t, json!({"event": "candidates", "size": cand.len()})));

    let adam = AdamConfig::with_lr(cfg.lr);
    let pseudo_batch = ((cfg.batch as f64) * cfg.replay_mix).round().max(1.0) as usize;
    let mut real_rng = task_stream.substream("real-batches");
    let mut pseudo_rng = task_stream.substream("pseudo-batches");
    let mut real_order: Vec<usize> = (0..real_lab.len()).collect();
    let mut pseudo_order: Vec<usize> = (0..pseudo_lab.len()).collect();
    let mut pseudo_pos = pseudo_order.len();
    for epoch in 1..=cfg.epochs_per_task {
        real_order.shuffle(&mut real_rng);
        let (mut ms_sum, mut kd_sum, mut n_batches) = (0.0, 0.0, 0usize);
        for chunk in real_order.chunks(cfg.batch) {
            let mut batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| real_lab[i]).collect();
            if !pseudo_order.is_empty() {
                for _ in 0..pseudo_batch {
                    if pseudo_pos == pseudo_order.len() {
                        pseudo_order.shuffle(&mut pseudo_rng);
                        pseudo_pos = 0;
                    }
                    batch.push(pseudo_lab[pseudo_order[pseudo_pos]]);
                    pseudo_pos += 1;
                }
            }
            let kd = match (&state.le_frozen, use_kd) {
                (Some(frozen), true) => Some(Kd {
                    frozen,
                    comps: &kd_comps,
                    beta: cfg.beta,
                }),
                _ => None,
            };
            let (ms, kd) = combined_loss(&mut state.le, &batch, &cand, kd, cfg.tau)?;
            state.le.store.adam_step(&adam)?;
            ms_sum += ms;
            kd_sum += kd.unwrap_or(0.0);
            n_batches += 1;
        }
        let n = n_batches as f64;
        let mut body = json!({"phase": "recognition", "epoch": epoch, "L_ms": ms_sum / n});
        if use_kd {
            body["L_kd"] = json!(kd_sum / n);
        }
        log.push(log_line(seed, strategy, t, body));
    }
    state.step = t;
    Ok(())
}

/// Outcome of one seed.
#[derive(Clone, Debug, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub steps: Vec<StepMetrics>,
    pub summary: CompilSummary,
    #[serde(skip)]
    pub log: Vec<Value>,
    /// `(file name, CPKT bytes)` per trained task.
    #[serde(skip)]
    pub checkpoints: Vec<(String, Vec<u8>)>,
}

/// Outcome of all seeds of one strategy.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seeds: Vec<SeedRun>,
    /// Field-wise mean of the per-seed summaries.
    pub mean: CompilSummary,
}

fn mean_summary(runs: &[SeedRun]) -> CompilSummary {
    let n = runs.len() as f64;
    let avg = |f: fn(&CompilSummary) -> f64| runs.iter().map(|r| f(&r.summary)).sum::<f64>() / n;
    CompilSummary {
        mean_unseen: avg(|s| s.mean_unseen),
        mean_auc: avg(|s| s.mean_auc),
        forgetting: avg(|s| s.forgetting),
        final_unseen: avg(|s| s.final_unseen),
        final_seen: avg(|s| s.final_seen),
        final_auc: avg(|s| s.final_auc),
    }
}

fn ckpt_name(strategy: Strategy, seed: u64, t: usize) -> String {
    format!("ckpt_{strategy}_seed{seed}_task{t}.cpkt")
}

/// One continual run for a single seed.
pub fn run_seed(inputs: &RunInputs<'_>, seed: u64, strategy: Strategy) -> Result<SeedRun> {
    let b = inputs.bench;
    let n_tasks = b.n_tasks();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut steps = Vec::with_capacity(n_tasks);
    match strategy {
        Strategy::ZeroShot => {
            for t in 1..=n_tasks {
                steps.push(inputs.evaluate_zero_shot(t)?);
            }
        }
        Strategy::Joint => {
            let mut state = ContinualState::new(inputs, seed, strategy)?;
            let cand = b.comps_in(1, n_tasks);
            let data: Vec<(&[f64], usize)> = (1..=n_tasks)
                .flat_map(|t| inputs.features(t, Split::Train))
                .map(|(x, c)| (x, cand.iter().position(|k| *k == c).expect("candidate")))
                .collect();
            let cfg = inputs.cfg;
            let adam = AdamConfig::with_lr(cfg.lr);
            // Same shuffle stream as a first task, so a single-task joint run
            // coincides with vanilla.
            let mut rng = state.stream.child("task-1").substream("real-batches");
            let mut order: Vec<usize> = (0..data.len()).collect();
            for epoch in 1..=cfg.epochs_per_task * n_tasks {
                order.shuffle(&mut rng);
                let (mut sum, mut n) = (0.0, 0usize);
                for chunk in order.chunks(cfg.batch) {
                    let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| data[i]).collect();
                    sum += combined_loss(&mut state.le, &batch, &cand, None, cfg.tau)?.0;
                    state.le.store.adam_step(&adam)?;
                    n += 1;
                }
                log.push(log_line(
                    seed,
                    strategy,
                    n_tasks,
                    json!({"phase": "recognition", "epoch": epoch, "L_ms": sum / n as f64}),
                ));
            }
            checkpoints.push((ckpt_name(strategy, seed, n_tasks), state.checkpoint()?.to_cpkt()));
            for t in 1..=n_tasks {
                steps.push(inputs.evaluate_le(&state.le, t)?);
            }
        }
        Strategy::Vanilla | Strategy::PseudoReplay => {
            let mut state = ContinualState::new(inputs, seed, strategy)?;
            for t in 1..=n_tasks {
                train_task(&mut state, inputs, t, strategy, &mut log)?;
                let m = inputs.evaluate_le(&state.le, t)?;
                state.history.push(m.clone());
                steps.push(m);
                checkpoints.push((ckpt_name(strategy, seed, t), state.checkpoint()?.to_cpkt()));
            }
        }
    }
    let summary = compil_summary(&steps)?;
    Ok(SeedRun {
        seed,
        steps,
        summary,
        log,
        checkpoints,
    })
}

/// Runs every configured seed (in parallel) and averages the summaries.
pub fn run_compil(
    bench: &Benchmark,
    provider: &EmbeddingProvider,
    cfg: &TrainConfig,
    strategy: Strategy,
) -> Result<RunReport> {
    let inputs = RunInputs::new(bench, provider, cfg)?;
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(&inputs, s, strategy))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_summary(&seeds);
    Ok(RunReport {
        strategy,
        seeds,
        mean,
    })
}

impl RunReport {
    pub fn metrics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// JSON lines in seed order.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for line in self.seeds.iter().flat_map(|s| &s.log) {
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// Writes `metrics.json`, `run_log.jsonl` and every checkpoint into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        write("metrics.json", self.metrics_json()?.as_bytes())?;
        write("run_log.jsonl", self.log_jsonl().as_bytes())?;
        for (name, bytes) in self.seeds.iter().flat_map(|s| &s.checkpoints) {
            write(name, bytes)?;
        }
        Ok(())
    }
}
