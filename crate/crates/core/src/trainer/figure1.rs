//! Compositions versus samples: unseen accuracy as the number of training
//! compositions grows with fixed samples per composition, against growing
//! samples per composition with a fixed composition count.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Composition;
use crate::error::{Error, Result};
use crate::model::{generate_world, sample_id, unit_rows, EmbeddingProvider, LeParams, WorldSpec};
use crate::numkernel::{dot, AdamConfig, RngStream};

use super::{combined_loss, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    pub grid_comps: Vec<usize>,
    pub grid_samples: Vec<usize>,
    /// Samples per composition during the composition sweep.
    pub fixed_samples: usize,
    /// Compositions during the sample sweep.
    pub fixed_comps: usize,
    /// Compositions never trained on; accuracy is measured over them.
    pub heldout_comps: usize,
    pub test_per_comp: usize,
    /// Independently drawn training sets per point; each is run with every
    /// training seed.
    pub train_sets: usize,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            grid_comps: vec![20, 40, 80],
            grid_samples: vec![5, 10, 20],
            fixed_samples: 10,
            fixed_comps: 40,
            heldout_comps: 40,
            test_per_comp: 10,
            train_sets: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig1Point {
    pub count: usize,
    pub mean: f64,
    /// 95% normal-approximation half-width of the mean.
    pub half_width: f64,
    /// One unseen accuracy per (training set, seed), training set major.
    pub runs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig1Report {
    pub comps: Vec<Fig1Point>,
    pub samples: Vec<Fig1Point>,
    /// Least-squares slope of unseen accuracy against `ln(count)`; absent for
    /// fewer than two distinct counts.
    pub slope_comps: Option<f64>,
    pub slope_samples: Option<f64>,
}

impl Fig1Report {
    /// `sweep,count,mean,half_width` rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sweep,count,mean,half_width\n");
        for (name, pts) in [("comps", &self.comps), ("samples", &self.samples)] {
            for p in pts {
                out.push_str(&format!("{name},{},{},{}\n", p.count, p.mean, p.half_width));
            }
        }
        out
    }
}

/// Least-squares slope of `y` on `ln(x)`.
pub fn log_slope(xs: &[usize], ys: &[f64]) -> Option<f64> {
    let lx: Vec<f64> = xs.iter().map(|&x| (x as f64).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if lx.len() < 2 || sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn point(count: usize, runs: Vec<f64>) -> Fig1Point {
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    let half_width = if runs.len() > 1 {
        let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Fig1Point {
        count,
        mean,
        half_width,
        runs,
    }
}

struct Fig1World {
    spec: WorldSpec,
    provider: EmbeddingProvider,
    pool: Vec<Composition>,
    heldout: Vec<Composition>,
    test: Vec<(Vec<f64>, usize)>,
}

/// Trains a fresh model on `samples` per composition of `comps` and returns
/// its accuracy on the held-out test samples, choosing among held-out
/// compositions only.
fn train_and_score(w: &Fig1World, comps: &[Composition], samples: usize, seed: u64, cfg: &TrainConfig) -> Result<f64> {
    let vocab = w.spec.vocab();
    let all = w.spec.all_comps();
    let anchors = w.provider.anchors(&vocab, &all)?;
    let stream = RngStream::new(seed);
    let d_tok = cfg.d_tok_for(w.spec.dim);
    let mut le = LeParams::init(&anchors, d_tok, cfg.init_noise, &stream.child("le"))?;
    let mut data: Vec<(&[f64], usize)> = Vec::with_capacity(comps.len() * samples);
    for (j, &c) in comps.iter().enumerate() {
        for k in 0..samples {
            data.push((w.provider.sample(&sample_id(&vocab, c, k))?, j));
        }
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = stream.substream("fig1-batches");
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs_per_task {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| data[i]).collect();
            combined_loss(&mut le, &batch, comps, None, cfg.tau)?;
            le.store.adam_step(&adam)?;
        }
    }
    let set = le.encode_set(&w.heldout)?;
    let mut hits = 0;
    for (x, label) in &w.test {
        let u = &unit_rows([x.as_slice()])?[0];
        let scores: Vec<f64> = set.vecs.iter().map(|c| dot(u, c)).collect();
        let best = (0..scores.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .expect("non-empty held-out set");
        hits += usize::from(best == *label);
    }
    Ok(hits as f64 / w.test.len() as f64)
}

/// Runs both sweeps on the world described by `spec`; every point trains
/// `train_sets x seeds` fresh models.
pub fn figure1_experiment(spec: &WorldSpec, fig: &Fig1Config, cfg: &TrainConfig) -> Result<Fig1Report> {
    cfg.check()?;
    spec.check()?;
    if fig.grid_comps.is_empty() || fig.grid_samples.is_empty() {
        return Err(Error::Empty("figure grids must not be empty".into()));
    }
    if fig.train_sets == 0 || fig.test_per_comp == 0 || fig.heldout_comps == 0 {
        return Err(Error::Validation("train_sets, test_per_comp and heldout_comps must be positive".into()));
    }
    let all = spec.all_comps();
    let max_comps = fig.grid_comps.iter().copied().max().unwrap_or(0).max(fig.fixed_comps);
    if fig.heldout_comps + max_comps > all.len() || fig.grid_comps.contains(&0) || fig.fixed_comps == 0 {
        return Err(Error::Validation(format!(
            "{} held-out plus up to {max_comps} training compositions do not fit in {} (counts must be positive)",
            fig.heldout_comps,
            all.len()
        )));
    }
    let max_samples = fig.grid_samples.iter().copied().max().unwrap_or(0).max(fig.fixed_samples);
    if fig.grid_samples.contains(&0) || fig.fixed_samples == 0 {
        return Err(Error::Validation("sample counts must be positive".into()));
    }

    let root = RngStream::new(spec.seed).child("fig1");
    let mut shuffled = all.clone();
    shuffled.shuffle(&mut root.substream("heldout"));
    let heldout: Vec<Composition> = shuffled[..fig.heldout_comps].to_vec();
    let pool: Vec<Composition> = shuffled[fig.heldout_comps..].to_vec();

    // Held-out test samples come after every sample index a training set
    // could use, so the two never coincide.
    let world_spec = WorldSpec {
        samples_per_composition: max_samples + fig.test_per_comp,
        ..spec.clone()
    };
    let provider = generate_world(&world_spec, &all)?;
    let vocab = world_spec.vocab();
    let mut test = Vec::new();
    for (j, &c) in heldout.iter().enumerate() {
        for k in max_samples..max_samples + fig.test_per_comp {
            test.push((provider.sample(&sample_id(&vocab, c, k))?.to_vec(), j));
        }
    }
    let world = Fig1World {
        spec: world_spec,
        provider,
        pool,
        heldout,
        test,
    };
    let train_sets: Vec<Vec<Composition>> = (0..fig.train_sets)
        .map(|r| {
            let mut p = world.pool.clone();
            p.shuffle(&mut root.substream(&format!("train-set-{r}")));
            p
        })
        .collect();

    let sweep = |counts: &[usize], comps_of: &(dyn Fn(usize) -> usize + Sync), samples_of: &(dyn Fn(usize) -> usize + Sync)| {
        counts
            .iter()
            .map(|&n| {
                let jobs: Vec<(usize, u64)> = (0..fig.train_sets)
                    .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
                    .collect();
                let runs = jobs
                    .par_iter()
                    .map(|&(r, s)| {
                        let comps = &train_sets[r][..comps_of(n)];
                        train_and_score(&world, comps, samples_of(n), s, cfg)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(point(n, runs))
            })
            .collect::<Result<Vec<Fig1Point>>>()
    };
    let comps = sweep(&fig.grid_comps, &|n| n, &|_| fig.fixed_samples)?;
    let samples = sweep(&fig.grid_samples, &|_| fig.fixed_comps, &|n| n)?;
    let slope = |pts: &[Fig1Point]| {
        let xs: Vec<usize> = pts.iter().map(|p| p.count).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.mean).collect();
        log_slope(&xs, &ys)
    };
    Ok(Fig1Report {
        slope_comps: slope(&comps),
        slope_samples: slope(&samples),
        comps,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (WorldSpec, Fig1Config, TrainConfig) {
        let spec = WorldSpec {
            n_attrs: 4,
            n_objs: 5,
            dim: 16,
            ..WorldSpec::default()
        };
        let fig = Fig1Config {
            grid_comps: vec![4, 8],
            grid_samples: vec![2, 4],
            fixed_samples: 3,
            fixed_comps: 6,
            heldout_comps: 6,
            test_per_comp: 3,
            train_sets: 2,
        };
        let cfg = TrainConfig {
            epochs_per_task: 2,
            lr: 1e-2,
            batch: 8,
            tau: 0.1,
            seeds: vec![0, 1],
            ..TrainConfig::default()
        };
        (spec, fig, cfg)
    }

    #[test]
    fn slope_of_exact_log_line() {
        let xs = [2, 4, 8, 16];
        let ys: Vec<f64> = xs.iter().map(|&x| 0.3 * (x as f64).ln() + 0.1).collect();
        assert!((log_slope(&xs, &ys).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(log_slope(&[5], &[0.2]), None);
        assert_eq!(log_slope(&[5, 5], &[0.2, 0.4]), None);
    }

    #[test]
    fn report_shape_and_determinism() {
        let (spec, fig, cfg) = tiny();
        let a = figure1_experiment(&spec, &fig, &cfg).unwrap();
        assert_eq!(a.comps.len(), 2);
        assert_eq!(a.samples.len(), 2);
        assert!(a.comps.iter().chain(&a.samples).all(|p| p.runs.len() == 4));
        assert!(a.slope_comps.is_some() && a.slope_samples.is_some());
        assert_eq!(a, figure1_experiment(&spec, &fig, &cfg).unwrap());
        assert_eq!(a.to_csv().lines().count(), 5);
    }

    #[test]
    fn single_point_grids_have_no_slope() {
        let (spec, mut fig, cfg) = tiny();
        fig.grid_comps = vec![4];
        fig.grid_samples = vec![3];
        let r = figure1_experiment(&spec, &fig, &cfg).unwrap();
        assert_eq!(r.slope_comps, None);
        assert_eq!(r.slope_samples, None);
    }

    #[test]
    fn oversized_grids_are_rejected() {
        let (spec, mut fig, cfg) = tiny();
        fig.grid_comps = vec![15];
        assert!(matches!(figure1_experiment(&spec, &fig, &cfg), Err(Error::Validation(_))));
        fig.grid_comps = vec![];
        assert!(figure1_experiment(&spec, &fig, &cfg).is_err());
    }
}
