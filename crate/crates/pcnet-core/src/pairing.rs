//! In-batch pair mining: P-classes-by-K-images batch composition and, per
//! anchor, selection of its intra-class and inter-class partner by feature
//! distance.
//!
//! Selection follows a fixed, documented contract so that an independent
//! brute-force scan can reproduce it exactly:
//!
//! * anchors are processed in ascending batch index;
//! * candidate lists are sorted by ascending batch index (intra: same label,
//!   excluding the anchor; inter: different label);
//! * distance-based choices take the argmin (or argmax for the "most
//!   different" intra variant), breaking ties toward the lowest index;
//! * random choices draw `gen_range(0..candidates.len())` on the sorted
//!   candidate list — per anchor the intra draw happens before the inter
//!   draw, and only random choices consume the generator;
//! * under [`Metric::Random`] every distance-based choice becomes a random
//!   choice, and recorded distances fall back to Euclidean.
//!
//! Features are treated as constants: no gradient flows through selection.

use crate::error::{Error, Result};
use crate::ops::dims2;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt;

/// Batch geometry: P classes per batch, K images per selected class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub classes_per_batch: usize,
    pub images_per_class: usize,
    /// Provenance seed for standalone use; the training loop threads its own
    /// named stream instead.
    pub seed: u64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec {
            classes_per_batch: 30,
            images_per_class: 6,
            seed: 0,
        }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 || self.images_per_class < 2 {
            return Err(Error::Config(format!(
                "batch needs at least 2 classes and 2 images per class, got P={} K={}",
                self.classes_per_batch, self.images_per_class
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.images_per_class
    }
}

/// Draws `count` distinct indices from `0..n` by partial Fisher-Yates.
fn sample_distinct<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

/// Samples a batch of exactly `P*K` `(dataset_index, label)` items: P distinct
/// classes, K images each. Classes with fewer than K images are drawn with
/// replacement (and logged).
pub fn sample_batch<R: Rng>(
    labels: &[usize],
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    if classes.len() < spec.classes_per_batch {
        return Err(Error::Config(format!(
            "dataset has {} classes but the batch needs {}",
            classes.len(),
            spec.classes_per_batch
        )));
    }
    let picked = sample_distinct(classes.len(), spec.classes_per_batch, rng);
    let mut out = Vec::with_capacity(spec.batch_size());
    for ci in picked {
        let class = classes[ci];
        let members = &by_class[&class];
        if members.len() >= spec.images_per_class {
            for mi in sample_distinct(members.len(), spec.images_per_class, rng) {
                out.push((members[mi], class));
            }
        } else {
            log::warn!(
                "class {} has only {} images; sampling {} with replacement",
                class,
                members.len(),
                spec.images_per_class
            );
            for _ in 0..spec.images_per_class {
                let mi = rng.gen_range(0..members.len());
                out.push((members[mi], class));
            }
        }
    }
    Ok(out)
}

fn class_count(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// `sqrt(sum((u_i - v_i)^2))` for rank-1 vectors of equal length.
pub fn euclidean_distance<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    if u.shape() != v.shape() {
        return Err(Error::shape(
            "euclidean_distance",
            format!("{:?} vs {:?}", u.shape(), v.shape()),
        ));
    }
    Ok(euclid_slices(u.data(), v.data()))
}

fn euclid_slices<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc.sqrt()
}

/// `1 - <u, v> / (|u| |v|)`; zero vectors are a domain error.
pub fn cosine_distance<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<T> {
    if u.shape() != v.shape() {
        return Err(Error::shape(
            "cosine_distance",
            format!("{:?} vs {:?}", u.shape(), v.shape()),
        ));
    }
    cosine_slices(u.data(), v.data())
}

fn cosine_slices<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (x, y) in a.iter().zip(b) {
        dot += *x * *y;
        na += *x * *x;
        nb += *y * *y;
    }
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Domain {
            op: "cosine_distance",
            details: "zero vector has no direction".into(),
        });
    }
    Ok(T::one() - dot / (na.sqrt() * nb.sqrt()))
}

/// Distance used to rank partner candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
    /// Ignore geometry entirely; every choice becomes a uniform draw.
    Random,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Euclidean => write!(f, "euclidean"),
            Metric::Cosine => write!(f, "cosine"),
            Metric::Random => write!(f, "random"),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            "random" => Ok(Metric::Random),
            other => Err(Error::Config(format!("unknown metric '{}'", other))),
        }
    }
}

/// How the (inter, intra) partners are picked; names read inter-then-intra.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Most similar inter partner, most similar intra partner.
    SimilarSimilar,
    /// Most similar inter partner, most *different* intra partner.
    SimilarDifferent,
    /// Most similar inter partner, random intra partner.
    SimilarRandom,
    /// Both partners random.
    RandomRandom,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::SimilarSimilar => write!(f, "SS"),
            Strategy::SimilarDifferent => write!(f, "SD"),
            Strategy::SimilarRandom => write!(f, "SRandom"),
            Strategy::RandomRandom => write!(f, "RandomRandom"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ss" => Ok(Strategy::SimilarSimilar),
            "sd" => Ok(Strategy::SimilarDifferent),
            "srandom" | "s-random" => Ok(Strategy::SimilarRandom),
            "randomrandom" | "random-random" => Ok(Strategy::RandomRandom),
            other => Err(Error::Config(format!("unknown strategy '{}'", other))),
        }
    }
}

/// Partner choice for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorPairs {
    pub anchor: usize,
    pub intra: usize,
    pub inter: usize,
    pub intra_distance: f64,
    pub inter_distance: f64,
}

/// The full per-batch assignment, one entry per anchor in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct PairAssignment {
    pub anchors: Vec<AnchorPairs>,
}

impl PairAssignment {
    /// CSV with header `anchor_id,intra_id,intra_dist,inter_id,inter_dist`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("anchor_id,intra_id,intra_dist,inter_id,inter_dist\n");
        for a in &self.anchors {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                a.anchor, a.intra, a.intra_distance, a.inter, a.inter_distance
            ));
        }
        out
    }
}

enum Choice {
    Closest,
    Farthest,
    Uniform,
}

/// Selects, for every anchor in the batch, its intra- and inter-class
/// partner. `features` is `[B, C]`, one pooled feature row per batch item.
pub fn select_pairs<T: Scalar, R: Rng>(
    features: &Tensor<T>,
    labels: &[usize],
    metric: Metric,
    strategy: Strategy,
    rng: &mut R,
) -> Result<PairAssignment> {
    let (b, _c) = dims2("select_pairs", features)?;
    if b != labels.len() {
        return Err(Error::shape(
            "select_pairs",
            format!("{} feature rows vs {} labels", b, labels.len()),
        ));
    }
    if class_count(labels) < 2 {
        return Err(Error::Config(
            "pair selection needs at least 2 distinct labels in the batch".into(),
        ));
    }
    for (i, &l) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, &m)| j != i && m == l) {
            return Err(Error::Config(format!(
                "label {} occurs only once in the batch; every label needs >= 2 items",
                l
            )));
        }
    }

    let row = |i: usize| -> &[T] {
        let c = features.shape()[1];
        &features.data()[i * c..(i + 1) * c]
    };
    let measured = |i: usize, j: usize| -> Result<T> {
        match metric {
            Metric::Euclidean | Metric::Random => Ok(euclid_slices(row(i), row(j))),
            Metric::Cosine => cosine_slices(row(i), row(j)),
        }
    };

    let (intra_choice, inter_choice) = match strategy {
        Strategy::SimilarSimilar => (Choice::Closest, Choice::Closest),
        Strategy::SimilarDifferent => (Choice::Farthest, Choice::Closest),
        Strategy::SimilarRandom => (Choice::Uniform, Choice::Closest),
        Strategy::RandomRandom => (Choice::Uniform, Choice::Uniform),
    };

    let mut anchors = Vec::with_capacity(b);
    for i in 0..b {
        let intra_cands: Vec<usize> = (0..b)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        let inter_cands: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();

        let intra = pick(i, &intra_cands, &intra_choice, metric, &measured, rng)?;
        let inter = pick(i, &inter_cands, &inter_choice, metric, &measured, rng)?;
        anchors.push(AnchorPairs {
            anchor: i,
            intra,
            inter,
            intra_distance: measured(i, intra)?.as_f64(),
            inter_distance: measured(i, inter)?.as_f64(),
        });
    }
    Ok(PairAssignment { anchors })
}

fn pick<T: Scalar, R: Rng>(
    anchor: usize,
    cands: &[usize],
    choice: &Choice,
    metric: Metric,
    measured: &impl Fn(usize, usize) -> Result<T>,
    rng: &mut R,
) -> Result<usize> {
    debug_assert!(!cands.is_empty());
    let random = matches!(metric, Metric::Random) || matches!(choice, Choice::Uniform);
    if random {
        return Ok(cands[rng.gen_range(0..cands.len())]);
    }
    let mut best = cands[0];
    let mut best_d = measured(anchor, best)?;
    for &j in &cands[1..] {
        let d = measured(anchor, j)?;
        let better = match choice {
            Choice::Closest => d < best_d,
            Choice::Farthest => d > best_d,
            Choice::Uniform => unreachable!(),
        };
        if better {
            best = j;
            best_d = d;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feat(rows: &[&[f64]]) -> Tensor<f64> {
        let c = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::from_vec(&[rows.len(), c], data).unwrap()
    }

    #[test]
    fn euclidean_reference_points() {
        let u = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let v = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(euclidean_distance(&u, &u).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&u, &v).unwrap(), 5.0);
        let w = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        assert!(euclidean_distance(&u, &w).is_err());
    }

    #[test]
    fn euclidean_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Tensor::<f64>::rand_uniform(&[64], -2.0, 2.0, &mut rng);
        let v = Tensor::<f64>::rand_uniform(&[64], -2.0, 2.0, &mut rng);
        let mut acc = 0.0f64;
        for (a, b) in u.data().iter().zip(v.data()) {
            acc += (a - b) * (a - b);
        }
        let got = euclidean_distance(&u, &v).unwrap();
        assert!((got - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_reference_points() {
        let u = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        assert!(f64::abs(cosine_distance(&u, &u).unwrap()) < 1e-15);
        let e1 = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_distance(&e1, &e2).unwrap(), 1.0);
        let z = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(cosine_distance(&e1, &z), Err(Error::Domain { .. })));
    }

    #[test]
    fn spec_example_assignment() {
        let f = feat(&[&[0.0, 0.0], &[0.0, 1.0], &[5.0, 5.0], &[5.0, 6.0]]);
        let labels = [0, 0, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_pairs(
            &f,
            &labels,
            Metric::Euclidean,
            Strategy::SimilarSimilar,
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.anchors[0].intra, 1);
        assert_eq!(a.anchors[0].inter, 2);
        assert!((a.anchors[0].intra_distance - 1.0).abs() < 1e-15);
        assert!((a.anchors[0].inter_distance - 50f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.anchors[1].intra, 0);
        assert_eq!(a.anchors[1].inter, 2);
        assert_eq!(a.anchors[2].intra, 3);
        assert_eq!(a.anchors[2].inter, 1);
        assert_eq!(a.anchors[3].intra, 2);
        assert_eq!(a.anchors[3].inter, 1);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        // Items 1 and 2 are identical in-class candidates for anchor 0.
        let f = feat(&[
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[1.0, 0.0],
            &[9.0, 9.0],
            &[8.0, 9.0],
        ]);
        let labels = [0, 0, 0, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_pairs(
            &f,
            &labels,
            Metric::Euclidean,
            Strategy::SimilarSimilar,
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.anchors[0].intra, 1);
    }

    #[test]
    fn most_different_intra_takes_argmax() {
        let f = feat(&[&[0.0], &[1.0], &[3.0], &[10.0], &[11.0]]);
        let labels = [0, 0, 0, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_pairs(
            &f,
            &labels,
            Metric::Euclidean,
            Strategy::SimilarDifferent,
            &mut rng,
        )
        .unwrap();
        assert_eq!(a.anchors[0].intra, 2); // farthest same-label item
        assert_eq!(a.anchors[0].inter, 3); // closest different-label item
    }

    #[test]
    fn random_strategy_is_reproducible_and_label_respecting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Tensor::<f64>::rand_uniform(&[12, 4], -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            select_pairs(&f, &labels, Metric::Euclidean, Strategy::RandomRandom, &mut r).unwrap()
        };
        let a = run(5);
        let b = run(5);
        assert_eq!(a, b);
        for p in &a.anchors {
            assert_ne!(p.anchor, p.intra);
            assert_ne!(p.anchor, p.inter);
            assert_eq!(labels[p.anchor], labels[p.intra]);
            assert_ne!(labels[p.anchor], labels[p.inter]);
        }
    }

    #[test]
    fn single_occurrence_label_is_named_in_error() {
        let f = feat(&[&[0.0], &[1.0], &[2.0]]);
        let labels = [0, 0, 7];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = select_pairs(
            &f,
            &labels,
            Metric::Euclidean,
            Strategy::SimilarSimilar,
            &mut rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains('7'), "error was: {}", err);
    }

    #[test]
    fn sample_batch_exhaustive_two_by_two() {
        let labels = vec![0, 0, 1, 1];
        let spec = BatchSpec {
            classes_per_batch: 2,
            images_per_class: 2,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&labels, &spec, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        let mut seen: Vec<usize> = batch.iter().map(|&(i, _)| i).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sample_batch_deterministic_and_exact_histogram() {
        let per_class = 10;
        let classes = 32;
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i / per_class).collect();
        let spec = BatchSpec {
            classes_per_batch: 30,
            images_per_class: 6,
            seed: 0,
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch(&labels, &spec, &mut rng).unwrap()
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 180);
        let mut hist = std::collections::BTreeMap::new();
        for &(_, l) in &a {
            *hist.entry(l).or_insert(0usize) += 1;
        }
        assert_eq!(hist.len(), 30);
        assert!(hist.values().all(|&c| c == 6));
        // Distinct images within each fully-populated class.
        let mut idxs: Vec<usize> = a.iter().map(|&(i, _)| i).collect();
        idxs.sort_unstable();
        idxs.dedup();
        assert_eq!(idxs.len(), 180);
    }

    #[test]
    fn sample_batch_rejects_too_few_classes() {
        let labels = vec![0, 0, 1, 1];
        let spec = BatchSpec {
            classes_per_batch: 3,
            images_per_class: 2,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_batch(&labels, &spec, &mut rng).is_err());
    }

    #[test]
    fn undersized_class_samples_with_replacement() {
        let labels = vec![0, 0, 0, 1]; // class 1 has a single image
        let spec = BatchSpec {
            classes_per_batch: 2,
            images_per_class: 3,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&labels, &spec, &mut rng).unwrap();
        assert_eq!(batch.len(), 6);
        assert_eq!(batch.iter().filter(|&&(_, l)| l == 1).count(), 3);
    }

    #[test]
    fn selection_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = Tensor::<f64>::rand_uniform(&[8, 3], -1.0, 1.0, &mut rng);
        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let mut r1 = ChaCha8Rng::seed_from_u64(9);
            let mut r2 = ChaCha8Rng::seed_from_u64(9);
            let a = select_pairs(&f, &labels, metric, Strategy::SimilarSimilar, &mut r1).unwrap();
            let b = select_pairs(&f, &labels, metric, Strategy::SimilarSimilar, &mut r2).unwrap();
            assert_eq!(a, b);
        }
    }
}
