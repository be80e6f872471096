//! Seeded synthetic source/target domain pairs.
//!
//! Class means sit on a circle of radius [`CLASS_RADIUS`] in a random 2-D
//! subspace of `R^d`. Geometry is built in a latent orthonormal frame whose
//! axes 0 and 1 span the class-mean plane; the observed features are that
//! frame rotated by a random proper rotation. The target domain applies, in
//! latent coordinates and in this order: a rotation by `rotation_angle`, a
//! scaling by `scale`, and a translation by `translation`.
//!
//! For `d = 2` the rotation is in the class-mean plane. For `d >= 3` it acts
//! in the plane of latent axes 0 and 2, tilting the class circle out of the
//! plane the source classifier was fit on.

use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::FeatureMatrix;

pub const CLASS_RADIUS: f64 = 5.0;

const STREAM_BASIS: u64 = 0;
const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_LABELED: u64 = 3;
const STREAM_IMBALANCE: u64 = 4;
const STREAM_BATCHES: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Uda,
    Pda,
    Ssda,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Uda => "uda",
            Scenario::Pda => "pda",
            Scenario::Ssda => "ssda",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uda" => Ok(Scenario::Uda),
            "pda" => Ok(Scenario::Pda),
            "ssda" => Ok(Scenario::Ssda),
            other => Err(Error::invalid(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Parameters of the synthetic covariate shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub class_count: usize,
    pub dim: usize,
    pub samples_per_class_source: usize,
    pub samples_per_class_target: usize,
    /// Radians.
    pub rotation_angle: f64,
    /// Latent-frame offset; must have `dim` entries.
    pub translation: Vec<f64>,
    pub scale: f64,
    pub source_noise_std: f64,
    pub target_noise_std: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::invalid("need at least 2 feature dimensions"));
        }
        if self.translation.len() != self.dim {
            return Err(Error::invalid(format!(
                "translation has {} entries, expected {}",
                self.translation.len(),
                self.dim
            )));
        }
        for (name, v) in [
            ("scale", self.scale),
            ("source_noise_std", self.source_noise_std),
            ("target_noise_std", self.target_noise_std),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.rotation_angle.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("non-finite shift parameter"));
        }
        if self.samples_per_class_source == 0 {
            return Err(Error::invalid("source needs at least one sample per class"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: FeatureMatrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!("label {bad} >= class count {class_count}")));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn empty(dim: usize, class_count: usize) -> Self {
        Self {
            features: Array2::zeros((0, dim)),
            labels: Vec::new(),
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row-wise concatenation of two datasets over the same label space.
    pub fn concat(&self, other: &LabeledDataset) -> Result<Self> {
        if self.class_count != other.class_count || self.features.ncols() != other.features.ncols() {
            return Err(Error::invalid("cannot concatenate datasets of different shape"));
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .map_err(|e| Error::invalid(e.to_string()))?;
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        Ok(Self {
            features,
            labels,
            class_count: self.class_count,
        })
    }
}

/// Source data, unlabeled target data with its hidden ground truth, and the
/// optional labeled target split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPair {
    pub source: LabeledDataset,
    pub target_unlabeled: FeatureMatrix,
    target_truth: Vec<usize>,
    pub target_labeled: LabeledDataset,
    pub scenario: Scenario,
    pub target_class_set: Vec<usize>,
    pub seed: u64,
}

/// The part of a [`DomainPair`] training code is allowed to see.
#[derive(Clone, Copy, Debug)]
pub struct TrainingView<'a> {
    pub source: &'a LabeledDataset,
    pub target_unlabeled: &'a FeatureMatrix,
    pub target_labeled: &'a LabeledDataset,
    pub scenario: Scenario,
}

impl DomainPair {
    pub fn class_count(&self) -> usize {
        self.source.class_count
    }

    pub fn dim(&self) -> usize {
        self.source.features.ncols()
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            source: &self.source,
            target_unlabeled: &self.target_unlabeled,
            target_labeled: &self.target_labeled,
            scenario: self.scenario,
        }
    }

    /// Hidden labels of `target_unlabeled`. Read only by evaluation code.
    pub(crate) fn target_truth(&self) -> &[usize] {
        &self.target_truth
    }

    /// Number of unlabeled target samples per class.
    pub fn target_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for &l in &self.target_truth {
            counts[l] += 1;
        }
        counts
    }

    /// Writes every sample as `f0..f{d-1},label,domain,split`. Unlabeled target
    /// rows carry their hidden label for inspection.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d)
            .map(|i| format!("f{i}"))
            .chain(["label", "domain", "split"].map(String::from))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        let mut emit = |features: &FeatureMatrix, labels: &[usize], domain: &str, split: &str| {
            for (row, label) in features.outer_iter().zip(labels) {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{},{label},{domain},{split}", cells.join(","))?;
            }
            Ok::<_, std::io::Error>(())
        };
        emit(&self.source.features, &self.source.labels, "source", "labeled")?;
        emit(&self.target_labeled.features, &self.target_labeled.labels, "target", "labeled")?;
        emit(&self.target_unlabeled, &self.target_truth, "target", "unlabeled")?;
        Ok(())
    }
}

/// The first `ceil(n/2)` entries of a class list.
pub fn leading_half(classes: &[usize]) -> &[usize] {
    &classes[..classes.len().div_ceil(2)]
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn determinant(m: &Array2<f64>) -> f64 {
    let mut a = m.clone();
    let n = a.nrows();
    let mut det = 1.0;
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| a[[i, k]].abs().total_cmp(&a[[j, k]].abs()))
            .unwrap();
        if a[[pivot, k]] == 0.0 {
            return 0.0;
        }
        if pivot != k {
            for c in 0..n {
                a.swap([k, c], [pivot, c]);
            }
            det = -det;
        }
        det *= a[[k, k]];
        for i in k + 1..n {
            let f = a[[i, k]] / a[[k, k]];
            for c in k..n {
                a[[i, c]] -= f * a[[k, c]];
            }
        }
    }
    det
}

/// Random proper rotation of `R^d`; row `i` is latent axis `i` in observed coordinates.
fn random_basis(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    loop {
        let mut b = Array2::<f64>::zeros((dim, dim));
        b.mapv_inplace(|_| StandardNormal.sample(rng));
        let mut ok = true;
        for i in 0..dim {
            for k in 0..i {
                let proj = b.row(i).dot(&b.row(k));
                let prev = b.row(k).to_owned();
                b.row_mut(i).scaled_add(-proj, &prev);
            }
            let n = b.row(i).dot(&b.row(i)).sqrt();
            if n < 1e-8 {
                ok = false;
                break;
            }
            b.row_mut(i).mapv_inplace(|v| v / n);
        }
        if !ok {
            continue;
        }
        if determinant(&b) < 0.0 {
            b.row_mut(dim - 1).mapv_inplace(|v| -v);
        }
        return b;
    }
}

struct Geometry {
    basis: Array2<f64>,
    source_means: Array2<f64>,
    target_means: Array2<f64>,
}

fn geometry(spec: &ShiftSpec) -> Geometry {
    let (c, d) = (spec.class_count, spec.dim);
    let basis = random_basis(d, &mut rng_for(spec.seed, STREAM_BASIS));
    let tilt_axis = if d == 2 { 1 } else { 2 };
    let (sin_r, cos_r) = spec.rotation_angle.sin_cos();
    let mut source_latent = Array2::<f64>::zeros((c, d));
    let mut target_latent = Array2::<f64>::zeros((c, d));
    for k in 0..c {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
        source_latent[[k, 0]] = CLASS_RADIUS * theta.cos();
        source_latent[[k, 1]] = CLASS_RADIUS * theta.sin();
        let mut t = source_latent.row(k).to_owned();
        let (a, b) = (t[0], t[tilt_axis]);
        t[0] = cos_r * a - sin_r * b;
        t[tilt_axis] = sin_r * a + cos_r * b;
        t *= spec.scale;
        t += &Array1::from_vec(spec.translation.clone());
        target_latent.row_mut(k).assign(&t);
    }
    Geometry {
        source_means: source_latent.dot(&basis),
        target_means: target_latent.dot(&basis),
        basis,
    }
}

/// Class means in observed coordinates: `(source, target)`, each `C x d`.
pub fn class_means(spec: &ShiftSpec) -> Result<(Array2<f64>, Array2<f64>)> {
    spec.validate()?;
    let g = geometry(spec);
    Ok((g.source_means, g.target_means))
}

/// Orthonormal latent frame used by [`make_domain_pair`]; row 0 and 1 span the class-mean plane.
pub fn latent_basis(spec: &ShiftSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    Ok(geometry(spec).basis)
}

fn sample_classes(
    means: &Array2<f64>,
    classes: &[usize],
    per_class: usize,
    std: f64,
    class_count: usize,
    rng: &mut ChaCha8Rng,
) -> LabeledDataset {
    let d = means.ncols();
    let n = classes.len() * per_class;
    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for &c in classes {
        for _ in 0..per_class {
            for k in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                features[[row, k]] = means[[c, k]] + std * z;
            }
            labels.push(c);
            row += 1;
        }
    }
    LabeledDataset {
        features,
        labels,
        class_count,
    }
}

/// Generates a domain pair. For PDA the target label space is the first
/// `ceil(C/2)` classes; for SSDA `shots_per_class` extra labeled target
/// samples are drawn for every class.
pub fn make_domain_pair(spec: &ShiftSpec, scenario: Scenario, shots_per_class: usize) -> Result<DomainPair> {
    spec.validate()?;
    if scenario == Scenario::Ssda && shots_per_class == 0 {
        return Err(Error::invalid("SSDA needs at least one labeled target shot per class"));
    }
    let c = spec.class_count;
    let all: Vec<usize> = (0..c).collect();
    let target_class_set = match scenario {
        Scenario::Pda => leading_half(&all).to_vec(),
        Scenario::Uda | Scenario::Ssda => all.clone(),
    };
    let g = geometry(spec);
    let source = sample_classes(
        &g.source_means,
        &all,
        spec.samples_per_class_source,
        spec.source_noise_std,
        c,
        &mut rng_for(spec.seed, STREAM_SOURCE),
    );
    let target = sample_classes(
        &g.target_means,
        &target_class_set,
        spec.samples_per_class_target,
        spec.target_noise_std,
        c,
        &mut rng_for(spec.seed, STREAM_TARGET),
    );
    let target_labeled = if scenario == Scenario::Ssda {
        sample_classes(
            &g.target_means,
            &all,
            shots_per_class,
            spec.target_noise_std,
            c,
            &mut rng_for(spec.seed, STREAM_LABELED),
        )
    } else {
        LabeledDataset::empty(spec.dim, c)
    };
    Ok(DomainPair {
        source,
        target_unlabeled: target.features,
        target_truth: target.labels,
        target_labeled,
        scenario,
        target_class_set,
        seed: spec.seed,
    })
}

/// Keeps `ceil(keep_fraction * n_c)` unlabeled target samples of each class in
/// the leading half of the target label space; everything else is untouched.
pub fn apply_class_imbalance(pair: &DomainPair, keep_fraction: f64) -> Result<DomainPair> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    let counts = pair.target_class_counts();
    if let Some(&empty) = pair.target_class_set.iter().find(|&&c| counts[c] == 0) {
        return Err(Error::invalid(format!("target class {empty} has no samples")));
    }
    let reduced = leading_half(&pair.target_class_set);
    let mut rng = rng_for(pair.seed, STREAM_IMBALANCE);
    let mut keep = Vec::with_capacity(pair.target_truth.len());
    for c in 0..pair.class_count() {
        let members: Vec<usize> = (0..pair.target_truth.len())
            .filter(|&j| pair.target_truth[j] == c)
            .collect();
        if reduced.contains(&c) {
            let n_keep = (keep_fraction * members.len() as f64).ceil() as usize;
            keep.extend(members.choose_multiple(&mut rng, n_keep).copied());
        } else {
            keep.extend(members);
        }
    }
    keep.sort_unstable();
    Ok(DomainPair {
        target_unlabeled: pair.target_unlabeled.select(Axis(0), &keep),
        target_truth: keep.iter().map(|&j| pair.target_truth[j]).collect(),
        ..pair.clone()
    })
}

/// A seeded permutation of `0..n` cut into batches of `batch_size`; the last
/// batch may be short. The order depends only on `(seed, epoch)`.
pub fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, STREAM_BATCHES + epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(c: usize, d: usize) -> ShiftSpec {
        ShiftSpec {
            class_count: c,
            dim: d,
            samples_per_class_source: 50,
            samples_per_class_target: 100,
            rotation_angle: 0.0,
            translation: vec![0.0; d],
            scale: 1.0,
            source_noise_std: 1.0,
            target_noise_std: 1.0,
            seed: 7,
        }
    }

    fn class_mean(x: &FeatureMatrix, labels: &[usize], c: usize) -> Array1<f64> {
        let idx: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == c).collect();
        x.select(Axis(0), &idx).mean_axis(Axis(0)).unwrap()
    }

    #[test]
    fn no_shift_domains_match() {
        let s = spec(4, 8);
        let pair = make_domain_pair(&s, Scenario::Uda, 0).unwrap();
        for c in 0..4 {
            let ms = class_mean(&pair.source.features, &pair.source.labels, c);
            let mt = class_mean(&pair.target_unlabeled, pair.target_truth(), c);
            // mean-difference standard error is sqrt(1/50 + 1/100) per coordinate
            let se = (1.0 / 50.0 + 1.0 / 100.0f64).sqrt();
            let z = (&ms - &mt).iter().map(|v| v.abs() / se).fold(0.0, f64::max);
            assert!(z < 4.0, "class {c}: max z = {z}");
        }
    }

    #[test]
    fn rotation_in_plane_for_two_dims() {
        let mut s = spec(6, 2);
        s.rotation_angle = std::f64::consts::PI / 6.0;
        let (src, tgt) = class_means(&s).unwrap();
        let (sin, cos) = (std::f64::consts::PI / 6.0).sin_cos();
        for c in 0..6 {
            let (x, y) = (src[[c, 0]], src[[c, 1]]);
            let expected = [cos * x - sin * y, sin * x + cos * y];
            assert!((tgt[[c, 0]] - expected[0]).abs() < 1e-9);
            assert!((tgt[[c, 1]] - expected[1]).abs() < 1e-9);
            assert!(((x * x + y * y).sqrt() - CLASS_RADIUS).abs() < 1e-9);
        }
    }

    #[test]
    fn ssda_counts_shots() {
        let pair = make_domain_pair(&spec(6, 4), Scenario::Ssda, 3).unwrap();
        assert_eq!(pair.target_labeled.len(), 18);
        assert!(make_domain_pair(&spec(6, 4), Scenario::Ssda, 0).is_err());
        let uda = make_domain_pair(&spec(6, 4), Scenario::Uda, 3).unwrap();
        assert!(uda.target_labeled.is_empty());
    }

    #[test]
    fn pda_restricts_target_labels() {
        let pair = make_domain_pair(&spec(5, 4), Scenario::Pda, 0).unwrap();
        assert_eq!(pair.target_class_set, vec![0, 1, 2]);
        assert!(pair.target_truth().iter().all(|l| pair.target_class_set.contains(l)));
        assert!(pair.target_labeled.is_empty());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(1, 4);
        assert!(make_domain_pair(&s, Scenario::Uda, 0).is_err());
        s = spec(3, 4);
        s.scale = 0.0;
        assert!(make_domain_pair(&s, Scenario::Uda, 0).is_err());
        s = spec(3, 4);
        s.translation = vec![0.0; 3];
        assert!(make_domain_pair(&s, Scenario::Uda, 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let mut s = spec(3, 5);
        s.rotation_angle = 0.4;
        let a = make_domain_pair(&s, Scenario::Ssda, 2).unwrap();
        let b = make_domain_pair(&s, Scenario::Ssda, 2).unwrap();
        assert_eq!(a, b);
        s.seed += 1;
        assert_ne!(a, make_domain_pair(&s, Scenario::Ssda, 2).unwrap());
    }

    #[test]
    fn imbalance_example() {
        let pair = make_domain_pair(&spec(6, 4), Scenario::Uda, 0).unwrap();
        assert_eq!(apply_class_imbalance(&pair, 1.0).unwrap(), pair);
        let imb = apply_class_imbalance(&pair, 0.3).unwrap();
        assert_eq!(imb.target_class_counts(), vec![30, 30, 30, 100, 100, 100]);
        assert_eq!(imb.source, pair.source);
        let total: usize = imb.target_class_counts().iter().sum();
        let prior: Vec<f64> = imb
            .target_class_counts()
            .iter()
            .map(|&n| n as f64 / total as f64)
            .collect();
        for (p, e) in prior.iter().zip([30.0, 30.0, 30.0, 100.0, 100.0, 100.0]) {
            assert!((p - e / 390.0).abs() < 1e-12);
        }
        assert!((prior[0] - 0.0769).abs() < 1e-4 && (prior[5] - 0.2564).abs() < 1e-4);
        assert!(apply_class_imbalance(&pair, 0.0).is_err());
    }

    #[test]
    fn imbalance_only_changes_membership() {
        let pair = make_domain_pair(&spec(4, 3), Scenario::Uda, 0).unwrap();
        let imb = apply_class_imbalance(&pair, 0.45).unwrap();
        let original: BTreeSet<Vec<u64>> = pair
            .target_unlabeled
            .outer_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        for (row, &label) in imb.target_unlabeled.outer_iter().zip(imb.target_truth()) {
            let bits: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            assert!(original.contains(&bits));
            let j = pair
                .target_unlabeled
                .outer_iter()
                .position(|r| r.iter().map(|v| v.to_bits()).eq(bits.iter().copied()))
                .unwrap();
            assert_eq!(pair.target_truth()[j], label);
        }
        assert_eq!(imb.target_class_counts(), vec![45, 45, 100, 100]);
    }

    #[test]
    fn minibatch_examples() {
        let b = minibatches(10, 4, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, minibatches(10, 4, 3, 0).unwrap());
        assert_ne!(b, minibatches(10, 4, 3, 1).unwrap());
        let all: BTreeSet<usize> = b.iter().flatten().copied().collect();
        assert_eq!(all, (0..10).collect());
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 10);
        assert!(minibatches(0, 4, 3, 0).unwrap().is_empty());
        assert!(minibatches(5, 0, 3, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let pair = make_domain_pair(&spec(2, 2), Scenario::Ssda, 1).unwrap();
        let mut buf = Vec::new();
        pair.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "f0,f1,label,domain,split");
        assert_eq!(text.lines().count(), 1 + 100 + 2 + 200);
        assert!(text.contains(",target,unlabeled"));
    }

    #[test]
    fn basis_is_proper_rotation() {
        let b = latent_basis(&spec(3, 5)).unwrap();
        let gram = b.dot(&b.t());
        for i in 0..5 {
            for k in 0..5 {
                let e = if i == k { 1.0 } else { 0.0 };
                assert!((gram[[i, k]] - e).abs() < 1e-12);
            }
        }
        assert!(determinant(&b) > 0.0);
    }
}
