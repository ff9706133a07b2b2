//! Support/query episode sampling with contiguous label remapping.

use std::collections::BTreeMap;

use rand::seq::index;

use super::TuningError;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    /// Original class -> contiguous index, ascending in the original class.
    pub label_map: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sampled {
    Episode(Episode),
    /// A query label is absent from the support set.
    Skip,
}

/// Ascending map over the classes present in `labels`.
pub fn contiguous_map(labels: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut map: BTreeMap<usize, usize> = labels.into_iter().map(|c| (c, 0)).collect();
    for (i, v) in map.values_mut().enumerate() {
        *v = i;
    }
    map
}

impl Episode {
    /// Builds an episode from explicit index sets, or `None` when the query
    /// holds a class the support lacks.
    pub fn from_parts(y: &[usize], support: Vec<usize>, query: Vec<usize>) -> Option<Episode> {
        let label_map = contiguous_map(support.iter().map(|&i| y[i]));
        if query.iter().any(|&i| !label_map.contains_key(&y[i])) {
            return None;
        }
        Some(Episode { support, query, label_map })
    }

    pub fn n_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn remap(&self, y: &[usize], rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&i| self.label_map[&y[i]]).collect()
    }

    /// Disjointness and contiguity of the remapped support labels.
    pub fn check(&self, y: &[usize]) -> Result<(), String> {
        let support: std::collections::BTreeSet<usize> = self.support.iter().copied().collect();
        if support.len() != self.support.len() {
            return Err("duplicate support index".into());
        }
        if self.query.iter().any(|i| support.contains(i)) {
            return Err("support and query overlap".into());
        }
        let seen: std::collections::BTreeSet<usize> = self.remap(y, &self.support).into_iter().collect();
        if seen != (0..self.n_classes()).collect() {
            return Err("remapped support labels are not 0..K".into());
        }
        if self.query.iter().any(|&i| !self.label_map.contains_key(&y[i])) {
            return Err("query label missing from support".into());
        }
        Ok(())
    }
}

/// Draws `s + q` distinct rows uniformly; the first `s` form the support.
pub fn sample_episode(y: &[usize], s: usize, q: usize, rng: &mut Rng) -> Result<Sampled, TuningError> {
    if s == 0 || q == 0 || s + q > y.len() {
        return Err(TuningError::InfeasibleEpisode { support: s, query: q, rows: y.len() });
    }
    let picked = index::sample(rng, y.len(), s + q).into_vec();
    let (support, query) = picked.split_at(s);
    Ok(match Episode::from_parts(y, support.to_vec(), query.to_vec()) {
        Some(ep) => Sampled::Episode(ep),
        None => Sampled::Skip,
    })
}
