//! Embedding providers and the toy recognition model: trainable primitive
//! tokens passed with a frozen context through a frozen projection, scored by
//! temperature-scaled cosine similarity.

mod provider;
mod world;

pub use provider::{load_embeddings, Anchors, EmbeddingProvider};
pub use world::{
    anchor_similarity, generate_world, sample_id, world_benchmark, world_source, WorldBenchmark,
    WorldSpec,
};

use crate::domain::Composition;
use crate::error::{Error, Result};
use crate::numkernel::{
    dot, log_softmax, matvec, matvec_t, norm, normal_vec, normalize, normalize_backward, softmax,
    HasParams, Matrix, ParamStore, RngStream, FLOOR,
};

pub const E_ATTR: &str = "e_attr";
pub const E_OBJ: &str = "e_obj";

/// Language-side parameters. Only the primitive token tables live in the
/// store and receive gradients; the context and projection are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct LeParams {
    pub store: ParamStore,
    pub ctx: Vec<f64>,
    /// `d x 3 d_tok`, rows orthonormal.
    pub proj: Matrix,
}

/// Random `rows x cols` matrix with orthonormal rows (`rows <= cols`).
pub fn row_orthonormal(rows: usize, cols: usize, stream: &RngStream) -> Result<Matrix> {
    if rows > cols {
        return Err(Error::Shape(format!(
            "cannot make {rows} orthonormal rows in dimension {cols}"
        )));
    }
    let mut rng = stream.substream("projection");
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        loop {
            let mut v = normal_vec(&mut rng, cols, 1.0);
            // Two Gram-Schmidt passes keep the rows orthogonal to rounding.
            for _ in 0..2 {
                for j in 0..i {
                    let p = dot(&v, m.row(j));
                    for (x, y) in v.iter_mut().zip(m.row(j)) {
                        *x -= p * y;
                    }
                }
            }
            if norm(&v) > 1e-6 {
                m.row_mut(i).copy_from_slice(&normalize(&v)?);
                break;
            }
        }
    }
    Ok(m)
}

/// Frozen `d x 3 d_tok` projection with orthonormal rows. When `d_tok >= d`
/// each block is a random row-orthonormal `d x d_tok` matrix scaled by
/// `1/sqrt(3)`, so a vector sent back through the transpose of one block and
/// forward again returns a third of itself. Narrower tokens get an
/// unstructured random projection.
pub fn token_projection(d: usize, d_tok: usize, stream: &RngStream) -> Result<Matrix> {
    if d_tok < d {
        return row_orthonormal(d, 3 * d_tok, stream);
    }
    let scale = 1.0 / 3f64.sqrt();
    let blocks = (0..3)
        .map(|k| row_orthonormal(d, d_tok, &stream.child(&format!("block-{k}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut m = Matrix::zeros(d, 3 * d_tok);
    for i in 0..d {
        for (k, b) in blocks.iter().enumerate() {
            for (dst, src) in m.row_mut(i)[k * d_tok..(k + 1) * d_tok].iter_mut().zip(b.row(i)) {
                *dst = scale * src;
            }
        }
    }
    Ok(m)
}

impl HasParams for LeParams {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Compositions encoded with one snapshot of the language parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSet {
    pub comps: Vec<Composition>,
    pub vecs: Vec<Vec<f64>>,
    pre_norms: Vec<f64>,
}

impl EncodedSet {
    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }
}

impl LeParams {
    /// Tokens start from the pretrained anchors mapped back through the
    /// transposed projection (attribute anchor into the attribute block,
    /// object anchor into the object block) plus `N(0, noise^2)`.
    pub fn init(anchors: &Anchors, d_tok: usize, noise: f64, stream: &RngStream) -> Result<Self> {
        let d = anchors
            .attr
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Empty("no attribute anchors".into()))?;
        let proj = token_projection(d, d_tok, stream)?;
        let mut rng = stream.substream("le-init");
        let ctx = normal_vec(&mut rng, d_tok, noise);
        let block = |v: &[f64], k: usize, rng: &mut _| -> Vec<f64> {
            let back = matvec_t(&proj.data, proj.rows, proj.cols, v);
            let eps = normal_vec(rng, d_tok, noise);
            back[k * d_tok..(k + 1) * d_tok]
                .iter()
                .zip(eps)
                .map(|(b, e)| b + e)
                .collect()
        };
        let e_attr: Vec<f64> = anchors.attr.iter().flat_map(|v| block(v, 1, &mut rng)).collect();
        let e_obj: Vec<f64> = anchors.obj.iter().flat_map(|v| block(v, 2, &mut rng)).collect();
        let mut store = ParamStore::new();
        store.insert(E_ATTR, vec![anchors.attr.len(), d_tok], e_attr)?;
        store.insert(E_OBJ, vec![anchors.obj.len(), d_tok], e_obj)?;
        Ok(Self { store, ctx, proj })
    }

    pub fn dim(&self) -> usize {
        self.proj.rows
    }

    pub fn d_tok(&self) -> usize {
        self.ctx.len()
    }

    pub fn n_attrs(&self) -> usize {
        self.store.get(E_ATTR).dims[0]
    }

    pub fn n_objs(&self) -> usize {
        self.store.get(E_OBJ).dims[0]
    }

    fn check(&self, c: Composition) -> Result<()> {
        if c.attr >= self.n_attrs() {
            return Err(Error::Range {
                what: "attribute",
                value: c.attr as i64,
                lo: 0,
                hi: self.n_attrs() as i64 - 1,
            });
        }
        if c.obj >= self.n_objs() {
            return Err(Error::Range {
                what: "object",
                value: c.obj as i64,
                lo: 0,
                hi: self.n_objs() as i64 - 1,
            });
        }
        Ok(())
    }

    /// `P [ctx; e_attr[a]; e_obj[o]]` before normalization.
    pub fn pre_encoding(&self, c: Composition) -> Result<Vec<f64>> {
        self.check(c)?;
        let mut concat = self.ctx.clone();
        concat.extend_from_slice(self.store.get(E_ATTR).row(c.attr));
        concat.extend_from_slice(self.store.get(E_OBJ).row(c.obj));
        Ok(matvec(&self.proj.data, self.proj.rows, self.proj.cols, &concat))
    }

    pub fn encode(&self, c: Composition) -> Result<Vec<f64>> {
        normalize(&self.pre_encoding(c)?)
    }

    pub fn encode_set(&self, comps: &[Composition]) -> Result<EncodedSet> {
        let mut vecs = Vec::with_capacity(comps.len());
        let mut pre_norms = Vec::with_capacity(comps.len());
        for &c in comps {
            let pre = self.pre_encoding(c)?;
            let n = norm(&pre);
            if n < FLOOR {
                return Err(Error::Norm(format!("composition {c} encodes to zero")));
            }
            vecs.push(pre.iter().map(|v| v / n).collect());
            pre_norms.push(n);
        }
        Ok(EncodedSet {
            comps: comps.to_vec(),
            vecs,
            pre_norms,
        })
    }

    /// Accumulates token gradients given `dL/dc` for every encoding in `set`.
    pub fn backward_set(&mut self, set: &EncodedSet, grads: &[Vec<f64>]) {
        let dt = self.d_tok();
        for ((c, g), (v, &n)) in set.comps.iter().zip(grads).zip(set.vecs.iter().zip(&set.pre_norms)) {
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            let g_pre = normalize_backward(v, n, g);
            let g_cat = matvec_t(&self.proj.data, self.proj.rows, self.proj.cols, &g_pre);
            for (a, b) in self.store.get_mut(E_ATTR).grad_row_mut(c.attr).iter_mut().zip(&g_cat[dt..2 * dt]) {
                *a += b;
            }
            for (a, b) in self.store.get_mut(E_OBJ).grad_row_mut(c.obj).iter_mut().zip(&g_cat[2 * dt..]) {
                *a += b;
            }
        }
    }

    /// `p(c_i | x)` over `cand`, in candidate order.
    pub fn recognition_probs(&self, x: &[f64], cand: &[Composition], tau: f64) -> Result<Vec<f64>> {
        if cand.is_empty() {
            return Err(Error::Empty("no candidates".into()));
        }
        let set = self.encode_set(cand)?;
        let u = normalize(x)?;
        Ok(softmax(&cosines(&u, &set).iter().map(|c| c / tau).collect::<Vec<_>>()))
    }

    /// Mean cross-entropy over `batch` (`(x, index into cand)`); accumulates
    /// gradients into the token tables.
    pub fn ms_loss(&mut self, batch: &[(&[f64], usize)], cand: &[Composition], tau: f64) -> Result<f64> {
        let set = self.encode_set(cand)?;
        let units = unit_rows(batch.iter().map(|(x, _)| *x))?;
        let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
        let (loss, gcos) = ms_terms(&units, &labels, &set, tau, 1.0 / batch.len() as f64)?;
        let grads = encoding_grads(&units, &set, &gcos);
        self.backward_set(&set, &grads);
        Ok(loss)
    }
}

/// Normalizes every input row.
pub fn unit_rows<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I) -> Result<Vec<Vec<f64>>> {
    rows.into_iter().map(normalize).collect()
}

/// Cosines between a unit input and every (unit) encoding of `set`.
pub fn cosines(u: &[f64], set: &EncodedSet) -> Vec<f64> {
    set.vecs.iter().map(|c| dot(u, c)).collect()
}

/// Cross-entropy terms for unit inputs. Returns the weighted loss sum and
/// `dL/dcos` per (input, candidate), all scaled by `weight`.
pub fn ms_terms(
    units: &[Vec<f64>],
    labels: &[usize],
    set: &EncodedSet,
    tau: f64,
    weight: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut loss = 0.0;
    let mut gcos = Vec::with_capacity(units.len());
    for (u, &label) in units.iter().zip(labels) {
        if label >= set.len() {
            return Err(Error::Range {
                what: "label",
                value: label as i64,
                lo: 0,
                hi: set.len() as i64 - 1,
            });
        }
        let logits: Vec<f64> = cosines(u, set).iter().map(|c| c / tau).collect();
        let logp = log_softmax(&logits);
        loss -= weight * logp[label];
        let g: Vec<f64> = logp
            .iter()
            .enumerate()
            .map(|(j, lp)| weight * (lp.exp() - f64::from(u8::from(j == label))) / tau)
            .collect();
        gcos.push(g);
    }
    Ok((loss, gcos))
}

/// `dL/dc_j = sum_i dL/dcos_ij (u_i - cos_ij c_j)` for unit inputs `u_i` and
/// unit encodings `c_j`.
pub fn encoding_grads(units: &[Vec<f64>], set: &EncodedSet, gcos: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = set.vecs.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; d]; set.len()];
    for (u, g_row) in units.iter().zip(gcos) {
        for (j, &g) in g_row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let c = &set.vecs[j];
            let cos = dot(u, c);
            for ((acc, ui), ci) in grads[j].iter_mut().zip(u).zip(c) {
                *acc += g * (ui - cos * ci);
            }
        }
    }
    grads
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::domain::PrimitiveVocab;

    pub fn small_spec() -> WorldSpec {
        WorldSpec {
            n_attrs: 3,
            n_objs: 4,
            dim: 8,
            samples_per_composition: 4,
            ..WorldSpec::default()
        }
    }

    /// A small world, its vocabulary, anchors for every composition and a
    /// freshly initialized encoder.
    pub fn small_model(seed: u64) -> (EmbeddingProvider, PrimitiveVocab, Anchors, LeParams) {
        let spec = WorldSpec {
            seed,
            ..small_spec()
        };
        let comps = spec.all_comps();
        let p = generate_world(&spec, &comps).unwrap();
        let vocab = spec.vocab();
        let anchors = p.anchors(&vocab, &comps).unwrap();
        let le = LeParams::init(&anchors, 4, 0.01, &RngStream::new(seed)).unwrap();
        (p, vocab, anchors, le)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::numkernel::grad_check;

    #[test]
    fn projection_rows_are_orthonormal() {
        let p = row_orthonormal(8, 12, &RngStream::new(3)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(p.row(i), p.row(j)) - want).abs() < 1e-12);
            }
        }
        assert!(row_orthonormal(5, 4, &RngStream::new(0)).is_err());
    }

    #[test]
    fn encodings_are_unit_and_deterministic() {
        let (_, _, _, le) = small_model(1);
        for a in 0..3 {
            for o in 0..4 {
                let c = le.encode(Composition::new(a, o)).unwrap();
                assert!((norm(&c) - 1.0).abs() < 1e-9);
                assert_eq!(c, le.encode(Composition::new(a, o)).unwrap());
            }
        }
        assert!(matches!(le.encode(Composition::new(3, 0)), Err(Error::Range { .. })));
    }

    #[test]
    fn object_tokens_do_not_touch_the_attribute_block() {
        let (_, _, _, mut le) = small_model(2);
        let dt = le.d_tok();
        le.proj = Matrix::identity(3 * dt);
        le.proj.rows = 3 * dt;
        le.ctx = vec![0.0; dt];
        let c = Composition::new(1, 2);
        let before = le.pre_encoding(c).unwrap();
        le.store.get_mut(E_OBJ).value[2 * dt] += 0.5;
        let after = le.pre_encoding(c).unwrap();
        assert_eq!(before[..2 * dt], after[..2 * dt]);
        assert_ne!(before[2 * dt..], after[2 * dt..]);
    }

    #[test]
    fn recognition_probability_examples() {
        let (_, _, _, le) = small_model(3);
        let c = Composition::new(0, 1);
        assert_eq!(le.recognition_probs(&[1.0; 8], &[c], 0.01).unwrap(), vec![1.0]);
        let x = le.encode(c).unwrap();
        let cand = [Composition::new(2, 3), c, Composition::new(1, 0)];
        let p = le.recognition_probs(&x, &cand, 1e-3).unwrap();
        assert!(p[1] > 0.99);

        // Hand evaluation: softmax of the two cosines over tau.
        let other = Composition::new(2, 2);
        let y: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let tau = 0.5;
        let yn = norm(&y);
        let l1 = dot(&y, &le.encode(c).unwrap()) / yn / tau;
        let l2 = dot(&y, &le.encode(other).unwrap()) / yn / tau;
        let want = l1.exp() / (l1.exp() + l2.exp());
        let p = le.recognition_probs(&y, &[c, other], tau).unwrap();
        assert!((p[0] - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_cosines_give_log_k() {
        let (_, _, _, mut le) = small_model(4);
        // Identical tokens for every object make all candidates sharing an
        // attribute encode identically.
        let row = le.store.get(E_OBJ).row(0).to_vec();
        let dt = le.d_tok();
        for o in 0..4 {
            le.store.get_mut(E_OBJ).value[o * dt..(o + 1) * dt].copy_from_slice(&row);
        }
        let cand: Vec<Composition> = (0..4).map(|o| Composition::new(1, o)).collect();
        let x = vec![0.3; 8];
        let loss = le.ms_loss(&[(&x, 2)], &cand, 0.01).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ms_loss_gradient_check() {
        for seed in 0..3 {
            let (p, vocab, _, mut le) = small_model(seed);
            let cand: Vec<Composition> = [(0, 0), (0, 1), (1, 2), (2, 3), (2, 0)]
                .iter()
                .map(|&(a, o)| Composition::new(a, o))
                .collect();
            let xs: Vec<Vec<f64>> = cand
                .iter()
                .map(|&c| p.sample(&sample_id(&vocab, c, 0)).unwrap().to_vec())
                .collect();
            let batch: Vec<(&[f64], usize)> = xs.iter().enumerate().map(|(i, x)| (x.as_slice(), i)).collect();
            let tau = 0.1;
            let err = grad_check(&mut le, 1e-4, &[], |le| le.ms_loss(&batch, &cand, tau)).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn ms_loss_rejects_bad_labels() {
        let (_, _, _, mut le) = small_model(5);
        let x = vec![1.0; 8];
        assert!(matches!(
            le.ms_loss(&[(&x, 3)], &[Composition::new(0, 0)], 0.01),
            Err(Error::Range { .. })
        ));
    }
}
