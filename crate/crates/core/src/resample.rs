//! Class-imbalance resampling for the training split.
//!
//! All methods work on the preprocessed feature matrix with Euclidean
//! distance. Nearest-neighbour ties resolve to the lowest row index.

use rand::seq::{index, IndexedRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FeatureMatrix;
use crate::rng;

#[derive(Debug, Error)]
pub enum ResampleError {
    #[error("class {class} has {count} member(s); SMOTE needs at least 2")]
    TooFewMinoritySamples { class: usize, count: usize },
    #[error("class {0} has no rows left after cleaning")]
    DegenerateAfterCleaning(usize),
    #[error("resampling needs at least two classes present")]
    TooFewClasses,
    #[error("feature rows ({rows}) and labels ({labels}) differ")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("k_neighbors must be at least 1")]
    InvalidNeighbors,
    #[error("unknown resampling method `{0}`")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleMethod {
    None,
    Smote,
    RandomOver,
    RandomUnder,
    Tomek,
    KMeansCentroids,
    NeighborhoodCleaning,
}

impl ResampleMethod {
    pub const ALL: [ResampleMethod; 7] = [
        ResampleMethod::None,
        ResampleMethod::Smote,
        ResampleMethod::RandomOver,
        ResampleMethod::RandomUnder,
        ResampleMethod::Tomek,
        ResampleMethod::KMeansCentroids,
        ResampleMethod::NeighborhoodCleaning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ResampleMethod::None => "none",
            ResampleMethod::Smote => "smote",
            ResampleMethod::RandomOver => "random_over",
            ResampleMethod::RandomUnder => "random_under",
            ResampleMethod::Tomek => "tomek",
            ResampleMethod::KMeansCentroids => "kmeans",
            ResampleMethod::NeighborhoodCleaning => "knn",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ResampleError> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ResampleError::UnknownMethod(s.to_string()))
    }

    pub fn default_k(self) -> usize {
        match self {
            ResampleMethod::NeighborhoodCleaning => 3,
            _ => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub method: ResampleMethod,
    pub k_neighbors: usize,
    pub seed: u64,
}

impl ResampleSpec {
    pub fn new(method: ResampleMethod, seed: u64) -> Self {
        Self { method, k_neighbors: method.default_k(), seed }
    }

    pub fn none() -> Self {
        Self::new(ResampleMethod::None, 0)
    }
}

const KMEANS_ITERATIONS: usize = 20;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest candidates to `query` (excluding `query` itself when it is a
/// candidate), ordered by distance then index.
fn nearest(x: &FeatureMatrix, query: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let q = x.row(query);
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&c| c != query)
        .map(|&c| (sq_dist(q, x.row(c)), c))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, c)| c).collect()
}

fn members_by_class(y: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); n_classes];
    for (i, &c) in y.iter().enumerate() {
        by[c].push(i);
    }
    by
}

/// Smallest-count class among those present; lowest index on ties.
fn minority_class(by: &[Vec<usize>]) -> usize {
    let mut best = None;
    for (c, m) in by.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        match best {
            None => best = Some(c),
            Some(b) if m.len() < by[b].len() => best = Some(c),
            _ => {}
        }
    }
    best.expect("at least one class present")
}

fn plurality(labels: impl Iterator<Item = usize>, n_classes: usize) -> usize {
    let mut votes = vec![0usize; n_classes];
    for l in labels {
        votes[l] += 1;
    }
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    best
}

fn keep_rows(x: &FeatureMatrix, y: &[usize], keep: &[bool], n_classes: usize) -> Result<(FeatureMatrix, Vec<usize>), ResampleError> {
    let idx: Vec<usize> = (0..y.len()).filter(|&i| keep[i]).collect();
    let ny: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
    let before = members_by_class(y, n_classes);
    let after = members_by_class(&ny, n_classes);
    for c in 0..n_classes {
        if !before[c].is_empty() && after[c].is_empty() {
            return Err(ResampleError::DegenerateAfterCleaning(c));
        }
    }
    Ok((x.select_rows(&idx), ny))
}

pub fn resample(x: &FeatureMatrix, y: &[usize], spec: &ResampleSpec) -> Result<(FeatureMatrix, Vec<usize>), ResampleError> {
    if x.rows != y.len() {
        return Err(ResampleError::LengthMismatch { rows: x.rows, labels: y.len() });
    }
    if spec.method == ResampleMethod::None {
        return Ok((x.clone(), y.to_vec()));
    }
    if spec.k_neighbors == 0 {
        return Err(ResampleError::InvalidNeighbors);
    }
    let n_classes = y.iter().max().map_or(0, |m| m + 1);
    let by = members_by_class(y, n_classes);
    if by.iter().filter(|m| !m.is_empty()).count() < 2 {
        return Err(ResampleError::TooFewClasses);
    }
    let mut rng = rng::stream(spec.seed, spec.method.as_str());
    let max_count = by.iter().map(Vec::len).max().unwrap();
    let min_count = by.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap();

    match spec.method {
        ResampleMethod::None => unreachable!(),
        ResampleMethod::RandomOver => {
            let mut data = x.data.clone();
            let mut ny = y.to_vec();
            for (c, members) in by.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                for _ in members.len()..max_count {
                    let src = *members.choose(&mut rng).unwrap();
                    data.extend_from_slice(x.row(src));
                    ny.push(c);
                }
            }
            Ok((FeatureMatrix::new(ny.len(), x.cols, data), ny))
        }
        ResampleMethod::Smote => {
            for (c, members) in by.iter().enumerate() {
                if !members.is_empty() && members.len() < max_count && members.len() < 2 {
                    return Err(ResampleError::TooFewMinoritySamples { class: c, count: members.len() });
                }
            }
            let mut data = x.data.clone();
            let mut ny = y.to_vec();
            for (c, members) in by.iter().enumerate() {
                if members.is_empty() || members.len() == max_count {
                    continue;
                }
                let k = spec.k_neighbors.min(members.len() - 1);
                let neighbours: Vec<Vec<usize>> = members.iter().map(|&m| nearest(x, m, members, k)).collect();
                for _ in members.len()..max_count {
                    let pick = rng.random_range(0..members.len());
                    let base = x.row(members[pick]);
                    let nn = x.row(*neighbours[pick].choose(&mut rng).unwrap());
                    let u: f64 = rng.random();
                    data.extend(base.iter().zip(nn).map(|(a, b)| a + u * (b - a)));
                    ny.push(c);
                }
            }
            Ok((FeatureMatrix::new(ny.len(), x.cols, data), ny))
        }
        ResampleMethod::RandomUnder => {
            let mut keep = vec![false; y.len()];
            for members in &by {
                if members.is_empty() {
                    continue;
                }
                for i in index::sample(&mut rng, members.len(), min_count) {
                    keep[members[i]] = true;
                }
            }
            keep_rows(x, y, &keep, n_classes)
        }
        ResampleMethod::Tomek => {
            let all: Vec<usize> = (0..y.len()).collect();
            let nn: Vec<usize> = all.iter().map(|&i| nearest(x, i, &all, 1)[0]).collect();
            let mut keep = vec![true; y.len()];
            for i in 0..y.len() {
                let j = nn[i];
                if i < j && nn[j] == i && y[i] != y[j] {
                    // equal class sizes: the higher class index counts as larger
                    let (ci, cj) = (by[y[i]].len(), by[y[j]].len());
                    let drop_i = ci > cj || (ci == cj && y[i] > y[j]);
                    keep[if drop_i { i } else { j }] = false;
                }
            }
            keep_rows(x, y, &keep, n_classes)
        }
        ResampleMethod::KMeansCentroids => {
            let mut data = Vec::new();
            let mut ny = Vec::new();
            for (c, members) in by.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                if members.len() == min_count {
                    for &m in members {
                        data.extend_from_slice(x.row(m));
                        ny.push(c);
                    }
                    continue;
                }
                let centroids = kmeans(x, members, min_count, &mut rng);
                for cen in centroids {
                    data.extend(cen);
                    ny.push(c);
                }
            }
            Ok((FeatureMatrix::new(ny.len(), x.cols, data), ny))
        }
        ResampleMethod::NeighborhoodCleaning => {
            let k = spec.k_neighbors;
            let minority = minority_class(&by);
            let all: Vec<usize> = (0..y.len()).collect();
            let nn: Vec<Vec<usize>> = all.iter().map(|&i| nearest(x, i, &all, k)).collect();
            let mut keep = vec![true; y.len()];
            for i in 0..y.len() {
                let vote = plurality(nn[i].iter().map(|&j| y[j]), n_classes);
                if y[i] != minority {
                    if vote != y[i] {
                        keep[i] = false;
                    }
                } else if vote != y[i] {
                    for &j in &nn[i] {
                        if y[j] != minority {
                            keep[j] = false;
                        }
                    }
                }
            }
            keep_rows(x, y, &keep, n_classes)
        }
    }
}

fn kmeans(x: &FeatureMatrix, members: &[usize], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> =
        index::sample(rng, members.len(), k).into_iter().map(|i| x.row(members[i]).to_vec()).collect();
    let mut assign = vec![0usize; members.len()];
    for _ in 0..KMEANS_ITERATIONS {
        for (a, &m) in assign.iter_mut().zip(members) {
            let row = x.row(m);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, cen) in centers.iter().enumerate() {
                let d = sq_dist(row, cen);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            *a = best;
        }
        let mut sums = vec![vec![0.0; x.cols]; k];
        let mut counts = vec![0usize; k];
        for (&a, &m) in assign.iter().zip(members) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x.row(m)) {
                *s += v;
            }
        }
        for ci in 0..k {
            // empty clusters keep their previous centre
            if counts[ci] > 0 {
                centers[ci] = sums[ci].iter().map(|s| s / counts[ci] as f64).collect();
            }
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(y: &[usize]) -> Vec<usize> {
        let mut c = vec![0; y.iter().max().unwrap() + 1];
        for &l in y {
            c[l] += 1;
        }
        c
    }

    fn mat(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn none_is_identity() {
        let x = mat(&[&[1.0], &[2.0]]);
        let (nx, ny) = resample(&x, &[0, 1], &ResampleSpec::none()).unwrap();
        assert_eq!(nx, x);
        assert_eq!(ny, vec![0, 1]);
    }

    #[test]
    fn random_over_copies_minority() {
        let x = mat(&[&[0.0], &[1.0], &[2.0], &[3.0], &[10.0]]);
        let y = [0, 0, 0, 0, 1];
        let (nx, ny) = resample(&x, &y, &ResampleSpec::new(ResampleMethod::RandomOver, 3)).unwrap();
        assert_eq!(counts(&ny), vec![4, 4]);
        for r in 5..8 {
            assert_eq!(nx.row(r), &[10.0]);
            assert_eq!(ny[r], 1);
        }
    }

    #[test]
    fn smote_k1_stays_on_segment() {
        let x = mat(&[&[0.0, 0.0], &[2.0, 0.0], &[5.0, 5.0], &[6.0, 5.0], &[5.0, 6.0], &[6.0, 6.0], &[7.0, 7.0]]);
        let y = [1, 1, 0, 0, 0, 0, 0];
        let spec = ResampleSpec { method: ResampleMethod::Smote, k_neighbors: 1, seed: 11 };
        let (nx, ny) = resample(&x, &y, &spec).unwrap();
        assert_eq!(counts(&ny), vec![5, 5]);
        for r in 7..10 {
            let p = nx.row(r);
            assert!((0.0..=2.0).contains(&p[0]));
            assert_eq!(p[1], 0.0);
        }
    }

    #[test]
    fn smote_rejects_singleton_minority() {
        let x = mat(&[&[0.0], &[1.0], &[2.0]]);
        let err = resample(&x, &[0, 0, 1], &ResampleSpec::new(ResampleMethod::Smote, 0)).unwrap_err();
        assert!(matches!(err, ResampleError::TooFewMinoritySamples { class: 1, count: 1 }));
    }

    #[test]
    fn random_under_balances_to_min() {
        let x = mat(&[&[0.0], &[1.0], &[2.0], &[3.0], &[10.0], &[11.0]]);
        let (_, ny) = resample(&x, &[0, 0, 0, 0, 1, 1], &ResampleSpec::new(ResampleMethod::RandomUnder, 5)).unwrap();
        assert_eq!(counts(&ny), vec![2, 2]);
    }

    #[test]
    fn tomek_removes_link_member() {
        // class0 = {0.0, 0.4}, class1 = {0.5, 5.0}
        let x = mat(&[&[0.0], &[0.4], &[0.5], &[5.0]]);
        let y = [0, 0, 1, 1];
        let (nx, ny) = resample(&x, &y, &ResampleSpec::new(ResampleMethod::Tomek, 0)).unwrap();
        assert_eq!(ny, vec![0, 0, 1]);
        assert_eq!(nx.data, vec![0.0, 0.4, 5.0]);
        // with an actual majority, its member of the link goes
        let x = mat(&[&[0.0], &[0.4], &[0.5], &[5.0], &[-3.0]]);
        let y = [0, 0, 1, 1, 0];
        let (nx, _) = resample(&x, &y, &ResampleSpec::new(ResampleMethod::Tomek, 0)).unwrap();
        assert_eq!(nx.data, vec![0.0, 0.5, 5.0, -3.0]);
    }

    #[test]
    fn kmeans_replaces_majority_with_centroids() {
        let x = mat(&[&[0.0], &[0.1], &[10.0], &[10.1], &[50.0], &[51.0]]);
        let y = [0, 0, 0, 0, 1, 1];
        let (nx, ny) = resample(&x, &y, &ResampleSpec::new(ResampleMethod::KMeansCentroids, 2)).unwrap();
        assert_eq!(counts(&ny), vec![2, 2]);
        let mut cents: Vec<f64> = (0..2).map(|r| nx.row(r)[0]).collect();
        cents.sort_by(f64::total_cmp);
        assert!((cents[0] - 0.05).abs() < 1e-12 && (cents[1] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn ncr_cleans_majority_intruders() {
        // a majority point sitting inside the minority cluster is removed
        let x = mat(&[&[0.0], &[0.1], &[0.2], &[0.15], &[5.0], &[5.1], &[5.2], &[5.3], &[5.4]]);
        let y = [1, 1, 1, 0, 0, 0, 0, 0, 0];
        let (nx, ny) = resample(&x, &y, &ResampleSpec::new(ResampleMethod::NeighborhoodCleaning, 0)).unwrap();
        assert_eq!(counts(&ny), vec![5, 3]);
        assert!(!nx.data.contains(&0.15));
    }

    #[test]
    fn cleaning_that_empties_a_class_errors() {
        let x = mat(&[&[0.0], &[0.1], &[0.2], &[0.15]]);
        let y = [1, 1, 1, 0];
        let err = resample(&x, &y, &ResampleSpec::new(ResampleMethod::NeighborhoodCleaning, 0)).unwrap_err();
        assert!(matches!(err, ResampleError::DegenerateAfterCleaning(1)));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in ResampleMethod::ALL {
            assert_eq!(ResampleMethod::parse(m.as_str()).unwrap(), m);
        }
        assert!(ResampleMethod::parse("adasyn").is_err());
    }
}
