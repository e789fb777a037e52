//! Dense forward/backward kernels used by the model and the synthesizer.

use crate::error::{Error, Result};

/// Floor applied to norms and probabilities before division or logarithms.
pub const FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y = W x` for a row-major `rows x cols` weight slice.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|i| dot(&w[i * cols..(i + 1) * cols], x)).collect()
}

/// `y = W^T g`.
pub fn matvec_t(w: &[f64], rows: usize, cols: usize, g: &[f64]) -> Vec<f64> {
    debug_assert_eq!(g.len(), rows);
    let mut out = vec![0.0; cols];
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += gi * wij;
        }
    }
    out
}

/// `acc += g x^T`.
pub fn add_outer(acc: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (a, &xj) in acc[i * cols..(i + 1) * cols].iter_mut().zip(x) {
            *a += gi * xj;
        }
    }
}

pub fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

/// Unit vector in the direction of `x`.
pub fn normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n < FLOOR || !n.is_finite() {
        return Err(Error::Norm(format!("cannot normalize a vector of norm {n}")));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Backward of `y = x / |x|` given `y`, `|x|` and the upstream gradient.
pub fn normalize_backward(y: &[f64], x_norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let proj = dot(y, grad_y);
    grad_y
        .iter()
        .zip(y)
        .map(|(g, yi)| (g - proj * yi) / x_norm)
        .collect()
}

/// Values kept by [`affine_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct AffineCache {
    pub x: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

/// `y = W x + b`.
pub fn affine_forward(x: &[f64], w: &Matrix, b: &[f64]) -> Result<(Vec<f64>, AffineCache)> {
    if w.cols != x.len() || w.rows != b.len() {
        return Err(Error::Shape(format!(
            "affine: W is {}x{}, x has {}, b has {}",
            w.rows,
            w.cols,
            x.len(),
            b.len()
        )));
    }
    let mut y = matvec(&w.data, w.rows, w.cols, x);
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    Ok((
        y,
        AffineCache {
            x: x.to_vec(),
            rows: w.rows,
            cols: w.cols,
        },
    ))
}

/// Returns `(grad_x, grad_W, grad_b)`.
pub fn affine_backward(grad_out: &[f64], w: &Matrix, cache: &AffineCache) -> Result<(Vec<f64>, Matrix, Vec<f64>)> {
    if grad_out.len() != cache.rows || w.rows != cache.rows || w.cols != cache.cols {
        return Err(Error::Shape("affine backward: shapes disagree with the cache".into()));
    }
    let grad_x = matvec_t(&w.data, w.rows, w.cols, grad_out);
    let mut grad_w = Matrix::zeros(w.rows, w.cols);
    add_outer(&mut grad_w.data, grad_out, &cache.x);
    Ok((grad_x, grad_w, grad_out.to_vec()))
}

/// Cosine similarity with its gradients with respect to both arguments.
pub fn cosine_with_grads(x: &[f64], c: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let nx = norm(x);
    let nc = norm(c);
    if nx < FLOOR || nc < FLOOR {
        return Err(Error::Norm("cosine of a zero-norm vector".into()));
    }
    let cos = dot(x, c) / (nx * nc);
    let gx = x
        .iter()
        .zip(c)
        .map(|(xi, ci)| ci / (nx * nc) - cos * xi / (nx * nx))
        .collect();
    let gc = x
        .iter()
        .zip(c)
        .map(|(xi, ci)| xi / (nx * nc) - cos * ci / (nc * nc))
        .collect();
    Ok((cos, gx, gc))
}

pub fn cosine(x: &[f64], c: &[f64]) -> Result<f64> {
    let nx = norm(x);
    let nc = norm(c);
    if nx < FLOOR || nc < FLOOR {
        return Err(Error::Norm("cosine of a zero-norm vector".into()));
    }
    Ok(dot(x, c) / (nx * nc))
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Max-shifted log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Cosine logits `cos(x, c_i) / tau` against a candidate table.
pub fn cosine_logits(x: &[f64], candidates: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    candidates.iter().map(|c| Ok(cosine(x, c)? / tau)).collect()
}

/// Probabilities `softmax(cos(x, c_i) / tau)`.
pub fn cosine_softmax(x: &[f64], candidates: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::Range {
            what: "tau",
            value: 0,
            lo: 0,
            hi: i64::MAX,
        });
    }
    Ok(softmax(&cosine_logits(x, candidates, tau)?))
}

/// Gradients of a scalar through the cosine logits, given `dL/dlogit_i`.
/// Returns `(dL/dx, dL/dc_i)`.
pub fn cosine_logits_backward(
    x: &[f64],
    candidates: &[Vec<f64>],
    tau: f64,
    grad_logits: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut gx = vec![0.0; x.len()];
    let mut gcs = Vec::with_capacity(candidates.len());
    for (c, &g) in candidates.iter().zip(grad_logits) {
        let (_, dx, dc) = cosine_with_grads(x, c)?;
        axpy(&mut gx, g / tau, &dx);
        gcs.push(dc.into_iter().map(|v| v * g / tau).collect());
    }
    Ok((gx, gcs))
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Simplex(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// `KL(p || q) = sum p_i log(p_i / q_i)` with `q` floored at [`FLOOR`].
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("KL of lengths {} and {}", p.len(), q.len())));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(FLOOR).ln()))
        .sum::<f64>()
        .max(0.0))
}

/// KL between `softmax(logits)` and a fixed `q`, plus its gradient with respect
/// to the logits: `p_j (log p_j - log q_j - KL)`.
pub fn kl_from_logits(logits: &[f64], q: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != q.len() {
        return Err(Error::Shape(format!("KL of lengths {} and {}", logits.len(), q.len())));
    }
    check_simplex(q, "q")?;
    let logp = log_softmax(logits);
    let terms: Vec<f64> = logp
        .iter()
        .zip(q)
        .map(|(&lp, &qi)| lp - qi.max(FLOOR).ln())
        .collect();
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let kl: f64 = p.iter().zip(&terms).map(|(pi, t)| pi * t).sum();
    let grad = p.iter().zip(&terms).map(|(pi, t)| pi * (t - kl)).collect();
    Ok((kl, grad))
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))` with gradients
/// `(dmu, dlogvar)`.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape(format!(
            "mu has {} entries, logvar has {}",
            mu.len(),
            logvar.len()
        )));
    }
    let mut value = 0.0;
    let mut dmu = Vec::with_capacity(mu.len());
    let mut dlv = Vec::with_capacity(mu.len());
    for (&m, &lv) in mu.iter().zip(logvar) {
        let var = lv.exp();
        value += 0.5 * (m * m + var - lv - 1.0);
        dmu.push(m);
        dlv.push(0.5 * (var - 1.0));
    }
    Ok((value, dmu, dlv))
}
