//! Synthetic world: latent primitive directions, noisy sample features and
//! noisy pretrained anchors.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::builder::{build_benchmark, BuildOutput, BuilderConfig, SourceSample};
use crate::domain::{Composition, PrimitiveVocab};
use crate::error::{Error, Result};
use crate::numkernel::{cosine, normal_vec, normalize, RngStream};
use crate::semantics::SimilarityMatrix;

use super::provider::EmbeddingProvider;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub n_attrs: usize,
    pub n_objs: usize,
    pub dim: usize,
    /// Standard deviation of per-sample feature noise.
    pub sample_noise: f64,
    /// Scale of the noise on pretrained anchors.
    pub anchor_noise: f64,
    pub samples_per_composition: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_attrs: 12,
            n_objs: 15,
            dim: 64,
            sample_noise: 0.4,
            anchor_noise: 0.2,
            samples_per_composition: 10,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn check(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Range {
                what: "dim",
                value: self.dim as i64,
                lo: 8,
                hi: i64::MAX,
            });
        }
        if self.n_attrs == 0 || self.n_objs == 0 {
            return Err(Error::Empty("world needs at least one attribute and one object".into()));
        }
        if !(self.sample_noise >= 0.0 && self.anchor_noise >= 0.0) {
            return Err(Error::Format {
                line: 0,
                msg: "noise scales must be non-negative".into(),
            });
        }
        Ok(())
    }

    pub fn vocab(&self) -> PrimitiveVocab {
        let attrs: Vec<String> = (0..self.n_attrs).map(|a| format!("a{a:02}")).collect();
        let objs: Vec<String> = (0..self.n_objs).map(|o| format!("o{o:02}")).collect();
        PrimitiveVocab::from_sorted(attrs, objs).expect("generated names are sorted and unique")
    }

    pub fn all_comps(&self) -> Vec<Composition> {
        (0..self.n_attrs)
            .flat_map(|a| (0..self.n_objs).map(move |o| Composition::new(a, o)))
            .collect()
    }
}

/// Identifier of the `k`-th sample of composition `c`.
pub fn sample_id(vocab: &PrimitiveVocab, c: Composition, k: usize) -> String {
    format!("{}_{}_{k:03}", vocab.attributes()[c.attr], vocab.objects()[c.obj])
}

/// Source samples for `comps`, `n_per` each, in composition order.
pub fn world_source(spec: &WorldSpec, comps: &[Composition], n_per: usize) -> Vec<SourceSample> {
    let vocab = spec.vocab();
    comps
        .iter()
        .flat_map(|&c| (0..n_per).map(move |k| (c, k)))
        .map(|(c, k)| SourceSample {
            id: sample_id(&vocab, c, k),
            comp: c,
        })
        .collect()
}

fn unit_or_axis(v: &[f64]) -> Vec<f64> {
    normalize(v).unwrap_or_else(|_| {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        e
    })
}

/// Draws the world and embeds `samples_per_composition` samples of each
/// composition in `comps`.
///
/// Anchors cover the whole vocabulary and every composition of it. Each
/// composition draws its samples from its own substream, so a sample's vector
/// does not depend on which other compositions are requested.
pub fn generate_world(spec: &WorldSpec, comps: &[Composition]) -> Result<EmbeddingProvider> {
    spec.check()?;
    let vocab = spec.vocab();
    if let Some(c) = comps.iter().find(|c| !vocab.contains(**c)) {
        return Err(Error::Range {
            what: "composition",
            value: c.attr.max(c.obj) as i64,
            lo: 0,
            hi: spec.n_attrs.max(spec.n_objs) as i64 - 1,
        });
    }
    let d = spec.dim;
    let root = RngStream::new(spec.seed);
    let mut rng = root.substream("world-attr");
    // Primitive directions are unit-norm Gaussian directions; noise is
    // per-coordinate, so its norm grows like sqrt(d) relative to the signal.
    let u: Vec<Vec<f64>> =
        (0..spec.n_attrs).map(|_| unit_or_axis(&normal_vec(&mut rng, d, 1.0))).collect();
    let mut rng = root.substream("world-obj");
    let w: Vec<Vec<f64>> =
        (0..spec.n_objs).map(|_| unit_or_axis(&normal_vec(&mut rng, d, 1.0))).collect();

    let mut p = EmbeddingProvider {
        dim: d,
        ..Default::default()
    };
    let mut rng = root.substream("world-attr-anchor");
    for (a, name) in vocab.attributes().iter().enumerate() {
        let nu = normal_vec(&mut rng, d, spec.anchor_noise);
        let v: Vec<f64> = u[a].iter().zip(&nu).map(|(x, n)| x + n).collect();
        p.attr_anchor.insert(name.clone(), unit_or_axis(&v));
    }
    let mut rng = root.substream("world-obj-anchor");
    for (o, name) in vocab.objects().iter().enumerate() {
        let nu = normal_vec(&mut rng, d, spec.anchor_noise);
        let v: Vec<f64> = w[o].iter().zip(&nu).map(|(x, n)| x + n).collect();
        p.obj_anchor.insert(name.clone(), unit_or_axis(&v));
    }
    let mut rng = root.substream("world-comp-anchor");
    for c in spec.all_comps() {
        let nu = normal_vec(&mut rng, d, spec.anchor_noise);
        let v: Vec<f64> = (0..d).map(|i| u[c.attr][i] + w[c.obj][i] + nu[i]).collect();
        p.comp_anchor.insert(
            (vocab.attributes()[c.attr].clone(), vocab.objects()[c.obj].clone()),
            unit_or_axis(&v),
        );
    }
    let samples = root.child("world-samples");
    for &c in comps {
        let mut rng = samples.substream(&vocab.label(c));
        for k in 0..spec.samples_per_composition {
            let eps = normal_vec(&mut rng, d, spec.sample_noise);
            let v: Vec<f64> = (0..d).map(|i| u[c.attr][i] + w[c.obj][i] + eps[i]).collect();
            p.samples.insert(sample_id(&vocab, c, k), unit_or_axis(&v));
        }
    }
    Ok(p)
}

/// Object similarity from the pretrained object anchors: cosine clamped to
/// `[0, 1]`, with a unit diagonal.
pub fn anchor_similarity(p: &EmbeddingProvider, vocab: &PrimitiveVocab) -> Result<SimilarityMatrix> {
    let anchors = p.anchors(vocab, &[])?;
    let n = anchors.obj.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            values[i][j] = if i == j {
                1.0
            } else {
                cosine(&anchors.obj[i], &anchors.obj[j])?.clamp(0.0, 1.0)
            };
        }
    }
    Ok(SimilarityMatrix { values, fallback: 0 })
}

/// A synthetic world turned into a benchmark.
#[derive(Clone, Debug)]
pub struct WorldBenchmark {
    pub build: BuildOutput,
    pub provider: EmbeddingProvider,
}

/// Holds out `unseen_fraction` of all compositions (seeded by the builder
/// seed) as task `T + 1` and builds tasks `1..=T` from the rest, using anchor
/// similarity between objects for the mini-groups.
pub fn world_benchmark(spec: &WorldSpec, cfg: &BuilderConfig) -> Result<WorldBenchmark> {
    let vocab = spec.vocab();
    let all = spec.all_comps();
    let mut order = all.clone();
    order.shuffle(&mut RngStream::new(cfg.seed).substream("holdout"));
    let n_unseen = ((cfg.unseen_fraction * all.len() as f64).round() as usize).clamp(1, all.len() - 1);
    let unseen: BTreeSet<Composition> = order[..n_unseen].iter().copied().collect();
    let seen: BTreeSet<Composition> = order[n_unseen..].iter().copied().collect();

    let provider = generate_world(spec, &all)?;
    let sim = anchor_similarity(&provider, &vocab)?;
    let source = world_source(spec, &all, spec.samples_per_composition);
    let build = build_benchmark(&vocab, &seen, &unseen, &source, &sim, cfg)?;
    Ok(WorldBenchmark { build, provider })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{validate_benchmark, Split};
    use crate::numkernel::dot;

    fn small() -> WorldSpec {
        WorldSpec {
            n_attrs: 4,
            n_objs: 5,
            dim: 16,
            samples_per_composition: 3,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let spec = small();
        let comps = spec.all_comps();
        let a = generate_world(&spec, &comps).unwrap();
        assert_eq!(a, generate_world(&spec, &comps).unwrap());
        assert_eq!(a.samples.len(), 60);
        assert_eq!(a.comp_anchor.len(), 20);
        for v in a.samples.values().chain(a.comp_anchor.values()).chain(a.attr_anchor.values()) {
            assert!((dot(v, v).sqrt() - 1.0).abs() < 1e-9);
        }
        let other = WorldSpec { seed: 1, ..spec };
        assert_ne!(a, generate_world(&other, &comps).unwrap());
    }

    #[test]
    fn samples_do_not_depend_on_the_requested_set() {
        let spec = small();
        let all = generate_world(&spec, &spec.all_comps()).unwrap();
        let one = generate_world(&spec, &[Composition::new(2, 3)]).unwrap();
        for (id, v) in &one.samples {
            assert_eq!(&all.samples[id], v);
        }
    }

    #[test]
    fn noiseless_world_matches_anchors_exactly() {
        let spec = WorldSpec {
            sample_noise: 0.0,
            anchor_noise: 0.0,
            ..small()
        };
        assert_eq!(zero_shot_accuracy(&spec), 1.0);
    }

    fn zero_shot_accuracy(spec: &WorldSpec) -> f64 {
        let comps = spec.all_comps();
        let p = generate_world(spec, &comps).unwrap();
        let vocab = spec.vocab();
        let anchors = p.anchors(&vocab, &comps).unwrap();
        let mut hits = 0;
        for &c in &comps {
            for k in 0..spec.samples_per_composition {
                let x = &p.samples[&sample_id(&vocab, c, k)];
                let best = comps
                    .iter()
                    .max_by(|a, b| {
                        dot(x, &anchors.comp[a]).total_cmp(&dot(x, &anchors.comp[b])).then(b.cmp(a))
                    })
                    .unwrap();
                hits += usize::from(*best == c);
            }
        }
        hits as f64 / (comps.len() * spec.samples_per_composition) as f64
    }

    /// Nearest-anchor accuracy over all 180 compositions of the default world
    /// sits at 0.18-0.21 across seeds; pinned here as a regression band.
    #[test]
    fn default_world_zero_shot_band() {
        for seed in 0..5 {
            let acc = zero_shot_accuracy(&WorldSpec {
                seed,
                ..WorldSpec::default()
            });
            assert!(acc > 0.15 && acc < 0.25, "seed {seed}: {acc}");
        }
    }

    #[test]
    fn world_benchmark_is_valid() {
        let spec = WorldSpec {
            samples_per_composition: 5,
            ..WorldSpec::default()
        };
        let cfg = BuilderConfig {
            t: 4,
            ..BuilderConfig::default()
        };
        let wb = world_benchmark(&spec, &cfg).unwrap();
        let b = &wb.build.benchmark;
        assert!(validate_benchmark(b).is_valid());
        assert_eq!(b.n_tasks(), 4);
        assert_eq!(b.task_comps[4].len(), 36);
        assert!(b.samples_of(5, Split::Test).count() == 36 * 5);
        for s in &b.samples {
            wb.provider.sample(&s.id).unwrap();
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_world(&WorldSpec { dim: 4, ..small() }, &[]).is_err());
        assert!(generate_world(&small(), &[Composition::new(9, 0)]).is_err());
    }
}
