//! Finite-difference checks of every hand-written loss gradient on small
//! seeded problems.

use serde::Serialize;

use crate::domain::Composition;
use crate::error::Result;
use crate::model::{generate_world, sample_id, E_ATTR, E_OBJ, LeParams, WorldSpec};
use crate::numkernel::{grad_check, normal_vec, RngStream};
use crate::synthesizer::{LossWeights, SemAnchors, SynthConfig, SynthState};
use crate::trainer::{combined_loss, distill_loss, Kd};

/// Central-difference step.
pub const EPS: f64 = 1e-4;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Temperature used during checks. Very sharp softmaxes make central
/// differences at `EPS` too coarse to say anything about the analytic side.
pub const CHECK_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermCheck {
    pub term: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
}

impl TermCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

struct Problem {
    le: LeParams,
    frozen: LeParams,
    synth: SynthState,
    comps: Vec<Composition>,
    /// `(feature, index into comps, latent noise)`.
    data: Vec<(Vec<f64>, usize, Vec<f64>)>,
    attr: Vec<Vec<f64>>,
    obj: Vec<Vec<f64>>,
}

fn jitter(values: &mut [f64], rng: &mut crate::numkernel::Rng, std: f64) {
    let noise = normal_vec(rng, values.len(), std);
    for (v, n) in values.iter_mut().zip(noise) {
        *v += n;
    }
}

fn problem(seed: u64) -> Result<Problem> {
    let spec = WorldSpec {
        n_attrs: 3,
        n_objs: 4,
        dim: 8,
        samples_per_composition: 2,
        seed,
        ..WorldSpec::default()
    };
    let comps = spec.all_comps();
    let provider = generate_world(&spec, &comps)?;
    let vocab = spec.vocab();
    let anchors = provider.anchors(&vocab, &comps)?;
    let stream = RngStream::new(seed);
    let frozen = LeParams::init(&anchors, 4, 0.01, &stream.child("le"))?;
    let mut rng = stream.substream("gradcheck-jitter");
    let mut le = frozen.clone();
    for name in [E_ATTR, E_OBJ] {
        jitter(&mut le.store.get_mut(name).value, &mut rng, 0.1);
    }
    let cfg = SynthConfig {
        hidden: 6,
        z_dim: 3,
        ..SynthConfig::default()
    };
    let mut synth = SynthState::new(&frozen, cfg, &stream.child("synth"))?;
    // Move every tensor away from its initializer so zero-initialized layers
    // are exercised too.
    let names: Vec<String> = synth.params.names().map(String::from).collect();
    for name in names {
        jitter(&mut synth.params.get_mut(&name).value, &mut rng, 0.3);
    }
    let data = [(0, 1), (2, 3), (1, 0)]
        .iter()
        .map(|&(a, o)| {
            let c = Composition::new(a, o);
            let x = provider.sample(&sample_id(&vocab, c, 0))?.to_vec();
            let label = comps.iter().position(|&k| k == c).expect("full grid");
            Ok((x, label, normal_vec(&mut rng, 3, 1.0)))
        })
        .collect::<Result<_>>()?;
    Ok(Problem {
        le,
        frozen,
        synth,
        comps,
        data,
        attr: anchors.attr,
        obj: anchors.obj,
    })
}

fn synth_term(p: &mut Problem, w: LossWeights) -> Result<f64> {
    let Problem {
        synth,
        comps,
        data,
        attr,
        obj,
        ..
    } = p;
    let sem = SemAnchors { attr, obj };
    let n = data.len() as f64;
    grad_check(synth, EPS, &[], |s| {
        let mut total = 0.0;
        for (x, label, eps) in data.iter() {
            let parts = s.loss_with_eps(x, comps[*label], eps.clone(), &sem, &w, CHECK_TAU, 1.0 / n)?;
            total += parts.total(&w) / n;
        }
        Ok(total)
    })
}

fn le_term(p: &mut Problem, term: &str) -> Result<f64> {
    let Problem {
        le,
        frozen,
        comps,
        data,
        ..
    } = p;
    let batch: Vec<(&[f64], usize)> = data.iter().map(|(x, l, _)| (x.as_slice(), *l)).collect();
    grad_check(le, EPS, &[], |le| match term {
        "L_ms" => le.ms_loss(&batch, comps, CHECK_TAU),
        "L_kd" => {
            let mut total = 0.0;
            for (x, _) in &batch {
                total += distill_loss(x, le, Some(frozen), comps, CHECK_TAU, 2)?;
            }
            Ok(total)
        }
        _ => {
            let beta = 0.3;
            let kd = Kd {
                frozen,
                comps: &comps[..6],
                beta,
            };
            let (ms, kd) = combined_loss(le, &batch, comps, Some(kd), CHECK_TAU)?;
            Ok(ms + beta * kd.unwrap_or(0.0))
        }
    })
}

/// Worst relative error per loss term over `seeds`.
pub fn run_gradchecks(seeds: &[u64]) -> Result<Vec<TermCheck>> {
    let terms: [&'static str; 7] = ["L_ms", "L_rec", "L_kl", "L_sem", "L_kd", "L_vs", "L_total"];
    let mut worst = [0.0f64; 7];
    for &seed in seeds {
        let mut p = problem(seed)?;
        let errs = [
            le_term(&mut p, "L_ms")?,
            synth_term(&mut p, LossWeights { rec: 1.0, kl: 0.0, sem: 0.0 })?,
            synth_term(&mut p, LossWeights { rec: 0.0, kl: 1.0, sem: 0.0 })?,
            synth_term(&mut p, LossWeights { rec: 0.0, kl: 0.0, sem: 1.0 })?,
            le_term(&mut p, "L_kd")?,
            synth_term(&mut p, LossWeights::full(0.1))?,
            le_term(&mut p, "L_total")?,
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    Ok(terms
        .iter()
        .zip(worst)
        .map(|(&term, max_rel_err)| TermCheck {
            term,
            seeds: seeds.len(),
            max_rel_err,
        })
        .collect())
}
