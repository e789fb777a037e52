//! Variational feature synthesizer.
//!
//! The encoder maps a visual feature to a Gaussian latent. The generator turns
//! a latent and a composition into a synthetic feature: the latent produces a
//! local bias that shifts every learnable prompt slot, the pooled slots are
//! concatenated with the frozen primitive tokens, passed through the frozen
//! projection, and refined by a gated residual adapter.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Composition;
use crate::error::{Error, Result};
use crate::model::LeParams;
use crate::numkernel::{
    add_outer, cosine_logits, cosine_logits_backward, gaussian_kl, kl_from_logits, matvec,
    matvec_t, norm, normal_vec, normalize, normalize_backward, softmax, AdamConfig, HasParams,
    Matrix, ParamStore, RngStream,
};

pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecLoss {
    /// Euclidean norm `|x - x_hat|`.
    L2,
    /// Mean squared error over coordinates.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub hidden: usize,
    pub z_dim: usize,
    pub prompt_len: usize,
    /// Residual weight of the adapter output.
    pub gate: f64,
    pub rec_loss: RecLoss,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            z_dim: 64,
            prompt_len: 3,
            gate: 0.2,
            rec_loss: RecLoss::L2,
        }
    }
}

mod names {
    pub const ENC_W1: &str = "enc.w1";
    pub const ENC_B1: &str = "enc.b1";
    pub const ENC_W2: &str = "enc.w2";
    pub const ENC_B2: &str = "enc.b2";
    pub const PROMPTS: &str = "gen.prompts";
    pub const BIAS_W: &str = "gen.bias_w";
    pub const BIAS_B: &str = "gen.bias_b";
    pub const AD_W1: &str = "gen.adapter_w1";
    pub const AD_B1: &str = "gen.adapter_b1";
    pub const AD_W2: &str = "gen.adapter_w2";
    pub const AD_B2: &str = "gen.adapter_b2";

    pub const ENCODER: [&str; 4] = [ENC_W1, ENC_B1, ENC_W2, ENC_B2];
    pub const GENERATOR: [&str; 7] = [PROMPTS, BIAS_W, BIAS_B, AD_W1, AD_B1, AD_W2, AD_B2];
}
pub use names::{ENCODER as ENCODER_PARAMS, GENERATOR as GENERATOR_PARAMS};
use names::*;

/// Frozen copy of the pretrained language path: primitive tokens and
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLe {
    pub e_attr: Vec<Vec<f64>>,
    pub e_obj: Vec<Vec<f64>>,
    pub proj: Matrix,
}

impl FrozenLe {
    pub fn from_le(le: &LeParams) -> Self {
        let dt = le.d_tok();
        let rows = |name: &str| -> Vec<Vec<f64>> {
            le.store.get(name).value.chunks(dt).map(<[f64]>::to_vec).collect()
        };
        Self {
            e_attr: rows(crate::model::E_ATTR),
            e_obj: rows(crate::model::E_OBJ),
            proj: le.proj.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthState {
    pub params: ParamStore,
    pub frozen: FrozenLe,
    pub cfg: SynthConfig,
}

impl HasParams for SynthState {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Encoder forward values.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub x: Vec<f64>,
    h1: Vec<f64>,
    pub mu: Vec<f64>,
    /// Clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
    pub logvar: Vec<f64>,
    inside: Vec<bool>,
    pub eps: Vec<f64>,
    pub z: Vec<f64>,
}

/// Generator forward values.
#[derive(Clone, Debug)]
pub struct Generated {
    z: Vec<f64>,
    pre_c: Vec<f64>,
    c_hat: Vec<f64>,
    ad_h: Vec<f64>,
    mix: Vec<f64>,
    pub x_hat: Vec<f64>,
}

/// Primitive anchors used by the semantic consistency term.
#[derive(Clone, Debug)]
pub struct SemAnchors<'a> {
    pub attr: &'a [Vec<f64>],
    pub obj: &'a [Vec<f64>],
}

/// Per-term multipliers of the synthesizer loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub kl: f64,
    pub sem: f64,
}

impl LossWeights {
    /// `L_rec + L_kl + alpha L_sem`.
    pub fn full(alpha: f64) -> Self {
        Self {
            rec: 1.0,
            kl: 1.0,
            sem: alpha,
        }
    }
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct VsParts {
    pub rec: f64,
    pub kl: f64,
    pub sem: f64,
}

impl VsParts {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.rec * self.rec + w.kl * self.kl + w.sem * self.sem
    }

    fn add_scaled(&mut self, o: &VsParts, s: f64) {
        self.rec += s * o.rec;
        self.kl += s * o.kl;
        self.sem += s * o.sem;
    }
}

fn tanh_vec(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::tanh).collect()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

impl SynthState {
    /// Duplicates the frozen language path from `le0`, starts the prompt slots
    /// at its context plus `N(0, 0.02^2)`, zero-initializes the bias head and
    /// the adapter's output layer, and draws a fresh encoder.
    pub fn new(le0: &LeParams, cfg: SynthConfig, stream: &RngStream) -> Result<Self> {
        if cfg.prompt_len == 0 || cfg.z_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Range {
                what: "synthesizer size",
                value: 0,
                lo: 1,
                hi: i64::MAX,
            });
        }
        let d = le0.dim();
        let dt = le0.d_tok();
        let da = (d / 4).max(1);
        let mut rng = stream.substream("generator-init");
        let mut prompts = Vec::with_capacity(cfg.prompt_len * dt);
        for _ in 0..cfg.prompt_len {
            let noise = normal_vec(&mut rng, dt, 0.02);
            prompts.extend(le0.ctx.iter().zip(noise).map(|(c, n)| c + n));
        }
        let mut params = ParamStore::new();
        params.insert(PROMPTS, vec![cfg.prompt_len, dt], prompts)?;
        params.insert(BIAS_W, vec![dt, cfg.z_dim], vec![0.0; dt * cfg.z_dim])?;
        params.insert(BIAS_B, vec![dt], vec![0.0; dt])?;
        params.insert(AD_W1, vec![da, d], normal_vec(&mut rng, da * d, 1.0 / (d as f64).sqrt()))?;
        params.insert(AD_B1, vec![da], vec![0.0; da])?;
        params.insert(AD_W2, vec![d, da], vec![0.0; d * da])?;
        params.insert(AD_B2, vec![d], vec![0.0; d])?;
        let mut s = Self {
            params,
            frozen: FrozenLe::from_le(le0),
            cfg,
        };
        s.reinit_encoder(stream)?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.frozen.proj.rows
    }

    pub fn d_tok(&self) -> usize {
        self.params.get(PROMPTS).dims[1]
    }

    /// Fresh encoder weights and optimizer state; the generator is untouched.
    pub fn reinit_encoder(&mut self, stream: &RngStream) -> Result<()> {
        let (d, h, z) = (self.dim(), self.cfg.hidden, self.cfg.z_dim);
        let mut rng = stream.substream("encoder-init");
        let w1 = normal_vec(&mut rng, h * d, 1.0 / (d as f64).sqrt());
        let w2 = normal_vec(&mut rng, 2 * z * h, 1.0 / (h as f64).sqrt());
        self.params.insert(ENC_W1, vec![h, d], w1)?;
        self.params.insert(ENC_B1, vec![h], vec![0.0; h])?;
        self.params.insert(ENC_W2, vec![2 * z, h], w2)?;
        self.params.insert(ENC_B2, vec![2 * z], vec![0.0; 2 * z])?;
        Ok(())
    }

    /// Generator tensors only, for persistence checks and checkpoints.
    pub fn generator(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for name in GENERATOR_PARAMS {
            let t = self.params.get(name);
            out.insert(name, t.dims.clone(), t.value.clone()).expect("same shape");
        }
        out
    }

    fn affine(&self, w: &str, b: &str, x: &[f64]) -> Vec<f64> {
        let (tw, tb) = (self.params.get(w), self.params.get(b));
        let mut y = matvec(&tw.value, tw.dims[0], tw.dims[1], x);
        add_into(&mut y, &tb.value);
        y
    }

    /// Encoder forward with a given standard-normal draw `eps`.
    pub fn encode_with_eps(&self, x: &[f64], eps: Vec<f64>) -> Result<Encoded> {
        let z_dim = self.cfg.z_dim;
        if x.len() != self.dim() || eps.len() != z_dim {
            return Err(Error::Shape(format!(
                "encoder expects x of {} and eps of {z_dim}, got {} and {}",
                self.dim(),
                x.len(),
                eps.len()
            )));
        }
        let h1 = tanh_vec(self.affine(ENC_W1, ENC_B1, x));
        let out = self.affine(ENC_W2, ENC_B2, &h1);
        let mu = out[..z_dim].to_vec();
        let raw = &out[z_dim..];
        let inside: Vec<bool> = raw.iter().map(|v| v.abs() < LOGVAR_CLAMP).collect();
        let logvar: Vec<f64> = raw.iter().map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).collect();
        let z = mu
            .iter()
            .zip(&logvar)
            .zip(&eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Ok(Encoded {
            x: x.to_vec(),
            h1,
            mu,
            logvar,
            inside,
            eps,
            z,
        })
    }

    /// `(mu, logvar, z)` with `z = mu + exp(logvar / 2) eps`, `eps ~ N(0, I)`.
    pub fn vs_encode(&self, x: &[f64], rng: &mut crate::numkernel::Rng) -> Result<Encoded> {
        let eps = normal_vec(rng, self.cfg.z_dim, 1.0);
        self.encode_with_eps(x, eps)
    }

    /// Synthetic feature for composition `c` from latent `z`.
    pub fn vs_generate(&self, z: &[f64], c: Composition) -> Result<Generated> {
        if c.attr >= self.frozen.e_attr.len() || c.obj >= self.frozen.e_obj.len() {
            return Err(Error::Range {
                what: "composition",
                value: c.attr.max(c.obj) as i64,
                lo: 0,
                hi: self.frozen.e_attr.len().max(self.frozen.e_obj.len()) as i64 - 1,
            });
        }
        if z.len() != self.cfg.z_dim {
            return Err(Error::Shape(format!("latent of {} values, expected {}", z.len(), self.cfg.z_dim)));
        }
        let r = self.affine(BIAS_W, BIAS_B, z);
        let prompts = self.params.get(PROMPTS);
        let l = prompts.dims[0];
        let mut pooled = r;
        for i in 0..l {
            for (p, v) in pooled.iter_mut().zip(prompts.row(i)) {
                *p += v / l as f64;
            }
        }
        let mut concat = pooled;
        concat.extend_from_slice(&self.frozen.e_attr[c.attr]);
        concat.extend_from_slice(&self.frozen.e_obj[c.obj]);
        let q = &self.frozen.proj;
        let pre_c = matvec(&q.data, q.rows, q.cols, &concat);
        let c_hat = normalize(&pre_c)?;
        let ad_h = tanh_vec(self.affine(AD_W1, AD_B1, &c_hat));
        let ad = self.affine(AD_W2, AD_B2, &ad_h);
        let g = self.cfg.gate;
        let mix: Vec<f64> = c_hat.iter().zip(&ad).map(|(c, a)| (1.0 - g) * c + g * a).collect();
        let x_hat = normalize(&mix)?;
        Ok(Generated {
            z: z.to_vec(),
            pre_c,
            c_hat,
            ad_h,
            mix,
            x_hat,
        })
    }

    /// Accumulates generator gradients for `dL/dx_hat`; returns `dL/dz`.
    fn backward_generate(&mut self, gen: &Generated, g_xhat: &[f64]) -> Vec<f64> {
        let g = self.cfg.gate;
        let g_mix = normalize_backward(&gen.x_hat, norm(&gen.mix), g_xhat);
        let g_ad: Vec<f64> = g_mix.iter().map(|v| g * v).collect();
        let mut g_chat: Vec<f64> = g_mix.iter().map(|v| (1.0 - g) * v).collect();

        let w2 = self.params.get(AD_W2);
        let g_h = matvec_t(&w2.value, w2.dims[0], w2.dims[1], &g_ad);
        add_outer(&mut self.params.get_mut(AD_W2).grad, &g_ad, &gen.ad_h);
        add_into(&mut self.params.get_mut(AD_B2).grad, &g_ad);
        let g_hpre: Vec<f64> = g_h.iter().zip(&gen.ad_h).map(|(g, h)| g * (1.0 - h * h)).collect();
        let w1 = self.params.get(AD_W1);
        add_into(&mut g_chat, &matvec_t(&w1.value, w1.dims[0], w1.dims[1], &g_hpre));
        add_outer(&mut self.params.get_mut(AD_W1).grad, &g_hpre, &gen.c_hat);
        add_into(&mut self.params.get_mut(AD_B1).grad, &g_hpre);

        let g_pre = normalize_backward(&gen.c_hat, norm(&gen.pre_c), &g_chat);
        let q = &self.frozen.proj;
        let g_cat = matvec_t(&q.data, q.rows, q.cols, &g_pre);
        let dt = self.d_tok();
        let g_pooled = &g_cat[..dt];
        let prompts = self.params.get_mut(PROMPTS);
        let l = prompts.dims[0];
        for i in 0..l {
            for (a, b) in prompts.grad_row_mut(i).iter_mut().zip(g_pooled) {
                *a += b / l as f64;
            }
        }
        add_outer(&mut self.params.get_mut(BIAS_W).grad, g_pooled, &gen.z);
        add_into(&mut self.params.get_mut(BIAS_B).grad, g_pooled);
        let bw = self.params.get(BIAS_W);
        matvec_t(&bw.value, bw.dims[0], bw.dims[1], g_pooled)
    }

    /// Accumulates encoder gradients for `dL/dmu` and `dL/dlogvar` (clamped
    /// coordinates pass no gradient).
    fn backward_encode(&mut self, enc: &Encoded, g_mu: &[f64], g_logvar: &[f64]) {
        let mut g_out = g_mu.to_vec();
        g_out.extend(g_logvar.iter().zip(&enc.inside).map(|(g, &ok)| if ok { *g } else { 0.0 }));
        let w2 = self.params.get(ENC_W2);
        let g_h = matvec_t(&w2.value, w2.dims[0], w2.dims[1], &g_out);
        add_outer(&mut self.params.get_mut(ENC_W2).grad, &g_out, &enc.h1);
        add_into(&mut self.params.get_mut(ENC_B2).grad, &g_out);
        let g_pre: Vec<f64> = g_h.iter().zip(&enc.h1).map(|(g, h)| g * (1.0 - h * h)).collect();
        add_outer(&mut self.params.get_mut(ENC_W1).grad, &g_pre, &enc.x);
        add_into(&mut self.params.get_mut(ENC_B1).grad, &g_pre);
    }

    /// Loss of one sample with a fixed latent draw; accumulates gradients
    /// scaled by `scale`.
    pub fn loss_with_eps(
        &mut self,
        x: &[f64],
        c: Composition,
        eps: Vec<f64>,
        sem: &SemAnchors<'_>,
        w: &LossWeights,
        tau: f64,
        scale: f64,
    ) -> Result<VsParts> {
        let enc = self.encode_with_eps(x, eps)?;
        let gen = self.vs_generate(&enc.z, c)?;
        let d = self.dim();

        let diff: Vec<f64> = x.iter().zip(&gen.x_hat).map(|(a, b)| a - b).collect();
        let dist = norm(&diff);
        let (rec, g_rec): (f64, Vec<f64>) = match self.cfg.rec_loss {
            RecLoss::L2 if dist > 0.0 => (dist, diff.iter().map(|v| -v / dist).collect()),
            RecLoss::L2 => (0.0, vec![0.0; d]),
            RecLoss::Mse => (
                dist * dist / d as f64,
                diff.iter().map(|v| -2.0 * v / d as f64).collect(),
            ),
        };
        let mut g_xhat: Vec<f64> = g_rec.iter().map(|v| scale * w.rec * v).collect();

        let mut sem_value = 0.0;
        for table in [sem.attr, sem.obj] {
            let target = softmax(&cosine_logits(x, table, tau)?);
            let logits = cosine_logits(&gen.x_hat, table, tau)?;
            let (kl, g_logits) = kl_from_logits(&logits, &target)?;
            sem_value += kl;
            if w.sem != 0.0 {
                let g_logits: Vec<f64> = g_logits.iter().map(|v| scale * w.sem * v).collect();
                let (gx, _) = cosine_logits_backward(&gen.x_hat, table, tau, &g_logits)?;
                add_into(&mut g_xhat, &gx);
            }
        }

        let (kl, g_mu_kl, g_lv_kl) = gaussian_kl(&enc.mu, &enc.logvar)?;
        let g_z = self.backward_generate(&gen, &g_xhat);
        let mut g_mu: Vec<f64> = g_mu_kl.iter().map(|v| scale * w.kl * v).collect();
        let mut g_lv: Vec<f64> = g_lv_kl.iter().map(|v| scale * w.kl * v).collect();
        for i in 0..g_z.len() {
            g_mu[i] += g_z[i];
            g_lv[i] += g_z[i] * enc.eps[i] * 0.5 * (0.5 * enc.logvar[i]).exp();
        }
        self.backward_encode(&enc, &g_mu, &g_lv);

        let parts = VsParts {
            rec,
            kl,
            sem: sem_value,
        };
        if !parts.total(w).is_finite() {
            return Err(Error::Numeric(format!("synthesizer loss is {}", parts.total(w))));
        }
        Ok(parts)
    }

    /// Full synthesizer loss for one sample, drawing the latent noise from
    /// `rng`; accumulates gradients.
    pub fn vs_loss(
        &mut self,
        x: &[f64],
        c: Composition,
        sem: &SemAnchors<'_>,
        alpha: f64,
        tau: f64,
        rng: &mut crate::numkernel::Rng,
    ) -> Result<VsParts> {
        let eps = normal_vec(rng, self.cfg.z_dim, 1.0);
        self.loss_with_eps(x, c, eps, sem, &LossWeights::full(alpha), tau, 1.0)
    }

    /// Pseudo-features: `n_per` prior draws per composition. Each composition
    /// uses its own substream, so results do not depend on thread scheduling
    /// or on which other compositions are requested.
    pub fn synth_pseudo(
        &self,
        comps: &[Composition],
        n_per: usize,
        stream: &RngStream,
    ) -> Result<Vec<(Vec<f64>, Composition)>> {
        if n_per == 0 {
            return Err(Error::Range {
                what: "pseudo samples per composition",
                value: 0,
                lo: 1,
                hi: i64::MAX,
            });
        }
        let per_comp: Vec<Result<Vec<(Vec<f64>, Composition)>>> = comps
            .par_iter()
            .map(|&c| {
                let mut rng = stream.substream(&format!("pseudo-{}-{}", c.attr, c.obj));
                (0..n_per)
                    .map(|_| {
                        let z = normal_vec(&mut rng, self.cfg.z_dim, 1.0);
                        Ok((self.vs_generate(&z, c)?.x_hat, c))
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(comps.len() * n_per);
        for r in per_comp {
            out.extend(r?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthTrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub tau: f64,
    pub batch: usize,
}

/// Mean loss components over one synthesizer epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SynthEpoch {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_sem: f64,
}

/// Draws a fresh encoder, then runs Adam over shuffled mini-batches of
/// `data`; the generator continues from its current state.
pub fn train_synthesizer(
    s: &mut SynthState,
    data: &[(&[f64], Composition)],
    sem: &SemAnchors<'_>,
    opts: &SynthTrainOpts,
    stream: &RngStream,
) -> Result<Vec<SynthEpoch>> {
    if data.is_empty() {
        return Err(Error::Empty("synthesizer training data".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Range {
            what: "batch",
            value: 0,
            lo: 1,
            hi: i64::MAX,
        });
    }
    s.reinit_encoder(stream)?;
    let adam = AdamConfig::with_lr(opts.lr);
    let w = LossWeights::full(opts.alpha);
    let mut shuffle = stream.substream("synth-shuffle");
    let mut noise = stream.substream("synth-eps");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut shuffle);
        let mut sums = VsParts::default();
        for chunk in order.chunks(opts.batch) {
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (x, c) = data[i];
                let eps = normal_vec(&mut noise, s.cfg.z_dim, 1.0);
                let parts = s.loss_with_eps(x, c, eps, sem, &w, opts.tau, scale)?;
                sums.add_scaled(&parts, 1.0 / data.len() as f64);
            }
            s.params.adam_step(&adam)?;
        }
        log.push(SynthEpoch {
            epoch,
            l_rec: sums.rec,
            l_kl: sums.kl,
            l_sem: sums.sem,
        });
    }
    Ok(log)
}

/// Fraction of pseudo-features whose nearest attribute anchor is the
/// requested attribute.
pub fn attribute_fidelity(pseudo: &[(Vec<f64>, Composition)], attr_anchors: &[Vec<f64>]) -> Result<f64> {
    if pseudo.is_empty() {
        return Err(Error::Empty("no pseudo-features".into()));
    }
    let mut hits = 0;
    for (x, c) in pseudo {
        let logits = cosine_logits(x, attr_anchors, 1.0)?;
        let best = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
            .expect("non-empty anchors");
        hits += usize::from(best == c.attr);
    }
    Ok(hits as f64 / pseudo.len() as f64)
}
