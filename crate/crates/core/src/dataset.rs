//! Corpus construction: the sampled timestep grid, prompt deduplication,
//! seed aggregation, densification and the train/eval split.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::Split;
use crate::types::{EmbeddingVector, MetricKind, MetricSample, MetricSeries, TimestepGrid};

/// Construction rule for the grid: `{1 + 2^(i-1) : 1 <= i <= max_i}`, the
/// extras, and optionally step 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub max_i: u32,
    pub extras: BTreeSet<u32>,
    pub include_one: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            max_i: 8,
            extras: [22, 27, 42].into_iter().collect(),
            include_one: true,
        }
    }
}

pub fn build_timestep_grid(spec: &GridSpec) -> Result<TimestepGrid> {
    if spec.max_i < 1 || spec.max_i > 31 {
        return Err(Error::Validation(format!("max_i must be in 1..=31, got {}", spec.max_i)));
    }
    if spec.extras.contains(&0) {
        return Err(Error::Validation("grid extras must be >= 1".into()));
    }
    let mut steps: BTreeSet<u32> = (1..=spec.max_i).map(|i| 1 + (1u32 << (i - 1))).collect();
    steps.extend(spec.extras.iter().copied());
    if spec.include_one {
        steps.insert(1);
    }
    TimestepGrid::new(steps.into_iter().collect())
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dims {} and {} differ", a.dim(), b.dim())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DedupConfig {
    pub threshold: f64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self { threshold: 0.75 }
    }
}

/// Greedy scan in ascending id order: a prompt is kept iff its similarity to
/// every already-kept prompt is below the threshold.
pub fn dedup_prompts(embeddings: &[(u64, EmbeddingVector)], cfg: &DedupConfig) -> Result<Vec<u64>> {
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(Error::Validation(format!(
            "dedup threshold must be in (0, 1], got {}",
            cfg.threshold
        )));
    }
    let mut order: Vec<&(u64, EmbeddingVector)> = embeddings.iter().collect();
    order.sort_by_key(|(id, _)| *id);
    if order.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Validation("duplicate prompt ids in dedup input".into()));
    }

    let mut kept: Vec<&(u64, EmbeddingVector)> = Vec::new();
    'candidates: for cand in order {
        for k in &kept {
            if cosine_similarity(&cand.1, &k.1)? >= cfg.threshold {
                continue 'candidates;
            }
        }
        kept.push(cand);
    }
    Ok(kept.into_iter().map(|(id, _)| *id).collect())
}

/// Averages per-seed samples into sparse on-grid series, one per (prompt, metric).
pub fn aggregate_seeds(samples: &[MetricSample], grid: &TimestepGrid) -> Result<Vec<MetricSeries>> {
    let mut cells: BTreeMap<(u64, MetricKind), BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for s in samples {
        if !grid.contains(s.timestep) {
            return Err(Error::Validation(format!(
                "sample for prompt {} at t={} is off the grid",
                s.prompt_id, s.timestep
            )));
        }
        if !seen.insert((s.prompt_id, s.metric, s.timestep, s.seed)) {
            return Err(Error::Validation(format!(
                "duplicate sample for prompt {} {} t={} seed {}",
                s.prompt_id, s.metric, s.timestep, s.seed
            )));
        }
        cells
            .entry((s.prompt_id, s.metric))
            .or_default()
            .entry(s.timestep)
            .or_default()
            .push(s.value);
    }

    // Every prompt must have every metric that appears anywhere, at every step.
    let prompts: BTreeSet<u64> = cells.keys().map(|(p, _)| *p).collect();
    let metrics: BTreeSet<MetricKind> = cells.keys().map(|(_, m)| *m).collect();
    let mut holes = Vec::new();
    for &p in &prompts {
        for &m in &metrics {
            let row = cells.get(&(p, m));
            for &t in grid.steps() {
                if row.is_none_or(|r| !r.contains_key(&t)) {
                    holes.push((p, m, t));
                }
            }
        }
    }
    if !holes.is_empty() {
        return Err(Error::IncompleteDataset { holes });
    }

    cells
        .into_iter()
        .map(|((p, m), row)| {
            let (steps, values): (Vec<u32>, Vec<f64>) = row
                .into_iter()
                .map(|(t, vs)| (t, vs.iter().sum::<f64>() / vs.len() as f64))
                .unzip();
            MetricSeries::new(p, m, steps, values)
        })
        .collect()
}

/// Piecewise-linear interpolation onto every integer step `1..=t_N`.
pub fn densify_series(s: &MetricSeries) -> Result<MetricSeries> {
    if s.len() < 2 {
        return Err(Error::Validation(format!(
            "prompt {} {}: need at least 2 points to densify",
            s.prompt_id, s.metric
        )));
    }
    if s.steps()[0] != 1 {
        return Err(Error::Validation(format!(
            "prompt {} {}: series must start at step 1",
            s.prompt_id, s.metric
        )));
    }
    let t_n = s.last_step();
    let mut values = Vec::with_capacity(t_n as usize);
    let (steps, vals) = (s.steps(), s.values());
    let mut seg = 0;
    for t in 1..=t_n {
        while steps[seg + 1] < t {
            seg += 1;
        }
        let (t0, t1) = (steps[seg], steps[seg + 1]);
        let v = if t == t0 {
            vals[seg]
        } else if t == t1 {
            vals[seg + 1]
        } else {
            let w = (t - t0) as f64 / (t1 - t0) as f64;
            vals[seg] + w * (vals[seg + 1] - vals[seg])
        };
        values.push(v);
    }
    MetricSeries::new(s.prompt_id, s.metric, (1..=t_n).collect(), values)
}

/// Deterministic shuffled split; `|train| = round(fraction * n)`, clamped so
/// that neither side is empty.
pub fn split_dataset(prompt_ids: &[u64], fraction: f64, rng_seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Validation(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut ids = prompt_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != prompt_ids.len() {
        return Err(Error::Validation("duplicate ids in split input".into()));
    }
    let n = ids.len();
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 prompts to split, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    ids.shuffle(&mut rng);
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let eval = ids.split_off(n_train);
    Ok(Split { train: ids, eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn emb(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<(u64, EmbeddingVector)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (i as u64, emb(&v.iter().map(|x| x / norm).collect::<Vec<_>>()))
            })
            .collect()
    }

    #[test]
    fn paper_grid() {
        let g = build_timestep_grid(&GridSpec::default()).unwrap();
        assert_eq!(g.steps(), &[1, 2, 3, 5, 9, 17, 22, 27, 33, 42, 65, 129]);
    }

    #[test]
    fn small_grids() {
        let spec = GridSpec { max_i: 1, extras: BTreeSet::new(), include_one: true };
        assert_eq!(build_timestep_grid(&spec).unwrap().steps(), &[1, 2]);
        let spec = GridSpec { max_i: 4, extras: BTreeSet::new(), include_one: false };
        assert_eq!(build_timestep_grid(&spec).unwrap().steps(), &[2, 3, 5, 9]);
        let spec = GridSpec { max_i: 0, extras: BTreeSet::new(), include_one: false };
        assert!(build_timestep_grid(&spec).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&emb(&[1.0, 2.0, 3.0]), &emb(&[4.0, 5.0, 6.0])).unwrap();
        let hand = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        assert!((c - hand).abs() < 1e-15);
        assert!((c - 0.974_631_846).abs() < 1e-9);
        assert!(matches!(
            cosine_similarity(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0])),
            Err(Error::UndefinedSimilarity)
        ));
        assert!(cosine_similarity(&emb(&[1.0]), &emb(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn dedup_identical_keeps_lower_id() {
        let e = vec![(9, emb(&[1.0, 1.0])), (4, emb(&[1.0, 1.0]))];
        assert_eq!(dedup_prompts(&e, &DedupConfig::default()).unwrap(), vec![4]);
    }

    #[test]
    fn dedup_orthogonal_keeps_all() {
        let e: Vec<_> = (0..5u64)
            .map(|i| {
                let mut v = vec![0.0; 5];
                v[i as usize] = 1.0;
                (i, emb(&v))
            })
            .collect();
        let cfg = DedupConfig { threshold: 1e-6 };
        assert_eq!(dedup_prompts(&e, &cfg).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn dedup_matches_brute_force_on_random_set() {
        // Tight clusters so the threshold actually bites.
        let base = random_unit_vectors(10, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e: Vec<(u64, EmbeddingVector)> = (0..50u64)
            .map(|i| {
                let b = &base[(i % 10) as usize].1;
                let v: Vec<f64> = b.values().iter().map(|x| x + 0.4 * rng.random::<f64>() - 0.2).collect();
                (i, emb(&v))
            })
            .collect();
        let cfg = DedupConfig { threshold: 0.75 };
        let kept = dedup_prompts(&e, &cfg).unwrap();
        assert!(kept.len() < 50);
        let kept_set: HashSet<u64> = kept.iter().copied().collect();
        for (i, a) in &e {
            if kept_set.contains(i) {
                for (j, b) in &e {
                    if j != i && kept_set.contains(j) {
                        assert!(cosine_similarity(a, b).unwrap() < 0.75);
                    }
                }
            } else {
                assert!(e.iter().any(|(j, b)| j < i
                    && kept_set.contains(j)
                    && cosine_similarity(a, b).unwrap() >= 0.75));
            }
        }
    }

    #[test]
    fn dedup_rejects_bad_threshold() {
        let e = vec![(1, emb(&[1.0]))];
        assert!(dedup_prompts(&e, &DedupConfig { threshold: 0.0 }).is_err());
        assert!(dedup_prompts(&e, &DedupConfig { threshold: 1.5 }).is_err());
    }

    fn sample(p: u64, seed: u32, t: u32, v: f64) -> MetricSample {
        MetricSample::new(p, seed, t, MetricKind::Lsnr, v).unwrap()
    }

    #[test]
    fn aggregate_mean_and_identity() {
        let grid = TimestepGrid::new(vec![1, 2]).unwrap();
        let s = vec![sample(1, 0, 1, 0.2), sample(1, 1, 1, 0.4), sample(1, 0, 2, 0.7)];
        let out = aggregate_seeds(&s, &grid).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].values()[0] - 0.3).abs() < 1e-15);
        assert_eq!(out[0].values()[1], 0.7);
    }

    #[test]
    fn aggregate_reports_holes() {
        let grid = TimestepGrid::new(vec![1, 2, 3]).unwrap();
        let s = vec![sample(1, 0, 1, 0.2), sample(1, 0, 3, 0.2), sample(2, 0, 1, 0.1)];
        match aggregate_seeds(&s, &grid) {
            Err(Error::IncompleteDataset { holes }) => {
                assert_eq!(
                    holes,
                    vec![(1, MetricKind::Lsnr, 2), (2, MetricKind::Lsnr, 2), (2, MetricKind::Lsnr, 3)]
                );
            }
            other => panic!("expected holes, got {other:?}"),
        }
    }

    #[test]
    fn aggregate_matches_naive_pass() {
        let grid = build_timestep_grid(&GridSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Vec::new();
        for p in 0..3u64 {
            for seed in 0..4u32 {
                for &t in grid.steps() {
                    for m in MetricKind::ALL {
                        samples.push(MetricSample::new(p, seed, t, m, rng.random()).unwrap());
                    }
                }
            }
        }
        let out = aggregate_seeds(&samples, &grid).unwrap();
        assert_eq!(out.len(), 9);
        for s in &out {
            for (&t, &v) in s.steps().iter().zip(s.values()) {
                let mut acc = 0.0;
                let mut n = 0;
                for x in &samples {
                    if x.prompt_id == s.prompt_id && x.metric == s.metric && x.timestep == t {
                        acc += x.value;
                        n += 1;
                    }
                }
                assert_eq!(n, 4);
                assert!((v - acc / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn densify_midpoint_and_constant() {
        let s = MetricSeries::new(1, MetricKind::Lsnr, vec![1, 3], vec![0.0, 1.0]).unwrap();
        let d = densify_series(&s).unwrap();
        assert_eq!(d.values(), &[0.0, 0.5, 1.0]);
        assert!(d.is_dense());

        let s = MetricSeries::new(1, MetricKind::Lsnr, vec![1, 5, 9], vec![0.4; 3]).unwrap();
        assert!(densify_series(&s).unwrap().values().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn densify_preconditions() {
        let s = MetricSeries::new(1, MetricKind::Lsnr, vec![1], vec![0.0]).unwrap();
        assert!(densify_series(&s).is_err());
        let s = MetricSeries::new(1, MetricKind::Lsnr, vec![2, 3], vec![0.0, 1.0]).unwrap();
        assert!(densify_series(&s).is_err());
    }

    #[test]
    fn densify_paper_grid_segment() {
        let grid = build_timestep_grid(&GridSpec::default()).unwrap();
        let vals: Vec<f64> = (0..grid.len()).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let s = MetricSeries::new(1, MetricKind::Dsim, grid.steps().to_vec(), vals).unwrap();
        let d = densify_series(&s).unwrap();
        assert_eq!(d.len(), 129);
        let (v42, v65) = (s.value_at(42).unwrap(), s.value_at(65).unwrap());
        let want = v42 + (50.0 - 42.0) / (65.0 - 42.0) * (v65 - v42);
        assert!((d.value_at(50).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<u64> = (0..10).collect();
        let s = split_dataset(&ids, 0.9, 1).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (9, 1));
        assert_eq!(s, split_dataset(&ids, 0.9, 1).unwrap());
        let s = split_dataset(&[1, 2], 0.5, 0).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (1, 1));
        assert!(split_dataset(&[1], 0.5, 0).is_err());
        assert!(split_dataset(&ids, 1.0, 0).is_err());
    }

    #[test]
    fn split_ignores_input_order() {
        let a: Vec<u64> = (0..20).collect();
        let b: Vec<u64> = a.iter().rev().copied().collect();
        assert_eq!(split_dataset(&a, 0.7, 9).unwrap(), split_dataset(&b, 0.7, 9).unwrap());
    }

    proptest! {
        #[test]
        fn grid_strictly_increasing(max_i in 1u32..20, extras in prop::collection::btree_set(1u32..5000, 0..6), one in any::<bool>()) {
            let g = build_timestep_grid(&GridSpec { max_i, extras, include_one: one }).unwrap();
            prop_assert!(g.steps().windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn densify_exact_on_grid_and_bounded(vals in prop::collection::vec(0.0f64..=1.0, 12)) {
            let grid = build_timestep_grid(&GridSpec::default()).unwrap();
            let s = MetricSeries::new(3, MetricKind::Iclip, grid.steps().to_vec(), vals.clone()).unwrap();
            let d = densify_series(&s).unwrap();
            for (&t, &v) in s.steps().iter().zip(s.values()) {
                prop_assert_eq!(d.value_at(t).unwrap().to_bits(), v.to_bits());
            }
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(d.values().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn dedup_kept_pairs_below_threshold(seed in 0u64..1000, thr in 0.1f64..1.0) {
            let e = random_unit_vectors(30, 4, seed);
            let kept = dedup_prompts(&e, &DedupConfig { threshold: thr }).unwrap();
            let map: BTreeMap<u64, &EmbeddingVector> = e.iter().map(|(i, v)| (*i, v)).collect();
            for (k, a) in kept.iter().enumerate() {
                for b in &kept[k + 1..] {
                    prop_assert!(cosine_similarity(map[a], map[b]).unwrap() < thr);
                }
            }
        }
    }
}
