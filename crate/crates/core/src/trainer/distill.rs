//! Logit distillation against a frozen copy of the language encoder, and the
//! combined recognition objective.

use crate::domain::Composition;
use crate::error::{Error, Result};
use crate::model::{cosines, encoding_grads, ms_terms, unit_rows, EncodedSet, LeParams};
use crate::numkernel::norm;

/// `|l_cur - l_prev|` and its gradient with respect to `l_cur` (zero when the
/// logits coincide).
pub fn kd_value(l_cur: &[f64], l_prev: &[f64]) -> Result<(f64, Vec<f64>)> {
    if l_cur.len() != l_prev.len() {
        return Err(Error::Shape(format!(
            "distillation over {} and {} logits",
            l_cur.len(),
            l_prev.len()
        )));
    }
    let diff: Vec<f64> = l_cur.iter().zip(l_prev).map(|(a, b)| a - b).collect();
    let n = norm(&diff);
    let grad = if n > 0.0 {
        diff.iter().map(|v| v / n).collect()
    } else {
        vec![0.0; diff.len()]
    };
    Ok((n, grad))
}

/// Weighted distillation over unit inputs; returns the loss sum and
/// `dL/dcos` against the current encodings.
pub fn kd_terms(
    units: &[Vec<f64>],
    cur: &EncodedSet,
    prev: &EncodedSet,
    tau: f64,
    weight: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut loss = 0.0;
    let mut gcos = Vec::with_capacity(units.len());
    for u in units {
        let l_cur: Vec<f64> = cosines(u, cur).iter().map(|c| c / tau).collect();
        let l_prev: Vec<f64> = cosines(u, prev).iter().map(|c| c / tau).collect();
        let (v, g) = kd_value(&l_cur, &l_prev)?;
        loss += weight * v;
        gcos.push(g.iter().map(|g| weight * g / tau).collect());
    }
    Ok((loss, gcos))
}

/// Distillation loss of one input over `comps`; gradients go into `le_cur`
/// only. `le_frozen` is absent before the first task boundary.
pub fn distill_loss(
    x: &[f64],
    le_cur: &mut LeParams,
    le_frozen: Option<&LeParams>,
    comps: &[Composition],
    tau: f64,
    step: usize,
) -> Result<f64> {
    let frozen = le_frozen.ok_or(Error::MissingFrozen(step))?;
    if comps.is_empty() {
        return Err(Error::Empty("no compositions to distill".into()));
    }
    let cur = le_cur.encode_set(comps)?;
    let prev = frozen.encode_set(comps)?;
    let units = unit_rows([x])?;
    let (loss, gcos) = kd_terms(&units, &cur, &prev, tau, 1.0)?;
    let grads = encoding_grads(&units, &cur, &gcos);
    le_cur.backward_set(&cur, &grads);
    Ok(loss)
}

/// Distillation settings for [`combined_loss`].
#[derive(Clone, Copy, Debug)]
pub struct Kd<'a> {
    pub frozen: &'a LeParams,
    pub comps: &'a [Composition],
    pub beta: f64,
}

/// Batch-mean `L_ms + beta L_kd` with labels indexing `cand`. Returns the two
/// unweighted means and accumulates gradients into `le`.
pub fn combined_loss(
    le: &mut LeParams,
    batch: &[(&[f64], usize)],
    cand: &[Composition],
    kd: Option<Kd<'_>>,
    tau: f64,
) -> Result<(f64, Option<f64>)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let units = unit_rows(batch.iter().map(|(x, _)| *x))?;
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let set = le.encode_set(cand)?;
    let (ms, gcos) = ms_terms(&units, &labels, &set, tau, w)?;
    let grads = encoding_grads(&units, &set, &gcos);

    let kd_value = match kd {
        None => None,
        Some(kd) => {
            if kd.comps.is_empty() {
                return Err(Error::Empty("no compositions to distill".into()));
            }
            let cur = le.encode_set(kd.comps)?;
            let prev = kd.frozen.encode_set(kd.comps)?;
            let (v, gk) = kd_terms(&units, &cur, &prev, tau, w)?;
            if kd.beta != 0.0 {
                let gk: Vec<Vec<f64>> = gk
                    .iter()
                    .map(|row| row.iter().map(|g| kd.beta * g).collect())
                    .collect();
                let gk = encoding_grads(&units, &cur, &gk);
                le.backward_set(&cur, &gk);
            }
            Some(v)
        }
    };
    le.backward_set(&set, &grads);
    if !ms.is_finite() || kd_value.is_some_and(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("recognition loss {ms}, distillation {kd_value:?}")));
    }
    Ok((ms, kd_value))
}
