//! Finite atomic probability measures on the line and the distances used to compare them.

use serde::{Deserialize, Serialize};

use crate::error::{NpmleError, Result};

/// Input weight sums within this distance of 1 are renormalized; larger deviations are errors.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// A k-atom probability measure `Σ p_j δ_{y_j}` with strictly increasing locations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteMixture {
    weights: Vec<f64>,
    locations: Vec<f64>,
}

/// Serialized form used by mixture files: `{"weights":[...],"locations":[...]}`.
#[derive(Debug, Clone, Deserialize)]
struct RawMixture {
    weights: Vec<f64>,
    locations: Vec<f64>,
}

impl<'de> Deserialize<'de> for DiscreteMixture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMixture::deserialize(d)?;
        make_mixture(&raw.weights, &raw.locations).map_err(serde::de::Error::custom)
    }
}

impl DiscreteMixture {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    /// Number of atoms.
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Point mass at `y`.
    pub fn point_mass(y: f64) -> Self {
        Self {
            weights: vec![1.0],
            locations: vec![y],
        }
    }

    /// Iterator over `(weight, location)` pairs in location order.
    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.weights
            .iter()
            .copied()
            .zip(self.locations.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.atoms().map(|(p, y)| p * y).sum()
    }

    /// Mass assigned to the closed interval `[lo, hi]`.
    pub fn mass_in(&self, lo: f64, hi: f64) -> f64 {
        self.atoms()
            .filter(|&(_, y)| y >= lo && y <= hi)
            .map(|(p, _)| p)
            .sum()
    }

    /// Distance from `y` to the nearest atom.
    pub fn distance_to_support(&self, y: f64) -> f64 {
        let locs = &self.locations;
        let idx = locs.partition_point(|&z| z < y);
        let mut best = f64::INFINITY;
        if idx < locs.len() {
            best = best.min((locs[idx] - y).abs());
        }
        if idx > 0 {
            best = best.min((y - locs[idx - 1]).abs());
        }
        best
    }
}

/// Validate and build a mixture: atoms are sorted by location, weights renormalized when
/// their sum is within [`WEIGHT_SUM_TOL`] of 1.
pub fn make_mixture(weights: &[f64], locations: &[f64]) -> Result<DiscreteMixture> {
    if weights.len() != locations.len() {
        return Err(NpmleError::LengthMismatch {
            weights: weights.len(),
            locations: locations.len(),
        });
    }
    if weights.is_empty() {
        return Err(NpmleError::EmptyMixture);
    }
    if weights.iter().chain(locations).any(|v| !v.is_finite()) {
        return Err(NpmleError::NonFinite);
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, &w)| w <= 0.0) {
        return Err(NpmleError::NonPositiveWeight { index, value });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() >= WEIGHT_SUM_TOL {
        return Err(NpmleError::WeightSumMismatch(sum));
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| locations[a].total_cmp(&locations[b]));
    let locs: Vec<f64> = order.iter().map(|&i| locations[i]).collect();
    if let Some(w) = locs.windows(2).find(|w| w[0] == w[1]) {
        return Err(NpmleError::DuplicateLocation(w[0]));
    }
    let ws: Vec<f64> = order.iter().map(|&i| weights[i] / sum).collect();
    Ok(DiscreteMixture {
        weights: ws,
        locations: locs,
    })
}

/// Build a mixture from raw parameters that may carry a small weight-sum defect, e.g. a
/// relaxed Newton iterate. Weights are divided by their sum.
pub(crate) fn normalized_mixture(weights: &[f64], locations: &[f64]) -> Result<DiscreteMixture> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(NpmleError::WeightSumMismatch(sum));
    }
    let scaled: Vec<f64> = weights.iter().map(|w| w / sum).collect();
    make_mixture(&scaled, locations)
}

/// Exact Wasserstein-1 distance on the line: the integral of `|F_a − F_b|`.
pub fn w1_distance(a: &DiscreteMixture, b: &DiscreteMixture) -> f64 {
    let mut events: Vec<(f64, f64)> = a
        .atoms()
        .map(|(p, y)| (y, p))
        .chain(b.atoms().map(|(p, y)| (y, -p)))
        .collect();
    events.sort_by(|u, v| u.0.total_cmp(&v.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for w in events.windows(2) {
        diff += w[0].1;
        total += diff.abs() * (w[1].0 - w[0].0);
    }
    total
}

/// Euclidean distance between concatenated weight and sorted-location vectors.
pub fn param_distance(a: &DiscreteMixture, b: &DiscreteMixture) -> Result<f64> {
    if a.k() != b.k() {
        return Err(NpmleError::AtomCountMismatch(a.k(), b.k()));
    }
    let sq: f64 = a
        .atoms()
        .zip(b.atoms())
        .map(|((pa, ya), (pb, yb))| (pa - pb).powi(2) + (ya - yb).powi(2))
        .sum();
    Ok(sq.sqrt())
}

/// Hausdorff distance between the two supports.
pub fn hausdorff_support_distance(a: &DiscreteMixture, b: &DiscreteMixture) -> f64 {
    let one_way = |u: &DiscreteMixture, v: &DiscreteMixture| {
        u.locations()
            .iter()
            .map(|&y| v.distance_to_support(y))
            .fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

/// Replace every maximal run of atoms with consecutive gaps `≤ max_gap` by one atom carrying
/// the run's total weight at its weight-normalized mean location.
pub fn merge_adjacent(m: &DiscreteMixture, max_gap: f64) -> DiscreteMixture {
    let mut weights = Vec::new();
    let mut locations = Vec::new();
    let mut start = 0;
    let k = m.k();
    for j in 1..=k {
        if j == k || m.locations[j] - m.locations[j - 1] > max_gap {
            let run = start..j;
            let w: f64 = m.weights[run.clone()].iter().sum();
            let moment: f64 = run.clone().map(|i| m.weights[i] * m.locations[i]).sum();
            weights.push(w);
            locations.push(if j - start == 1 {
                m.locations[start]
            } else {
                moment / w
            });
            start = j;
        }
    }
    DiscreteMixture { weights, locations }
}

/// Separation statistics of a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparationStats {
    /// `min_j p_j d_j` with `d_j` the distance to the nearest other atom; `+∞` when k = 1.
    pub delta: f64,
    pub min_gap: f64,
    pub min_weight: f64,
}

pub fn separation_stats(m: &DiscreteMixture) -> SeparationStats {
    let k = m.k();
    let min_weight = m.weights.iter().copied().fold(f64::INFINITY, f64::min);
    if k == 1 {
        return SeparationStats {
            delta: f64::INFINITY,
            min_gap: f64::INFINITY,
            min_weight,
        };
    }
    let y = &m.locations;
    let gaps: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let delta = (0..k)
        .map(|j| {
            let left = if j > 0 { gaps[j - 1] } else { f64::INFINITY };
            let right = if j + 1 < k { gaps[j] } else { f64::INFINITY };
            m.weights[j] * left.min(right)
        })
        .fold(f64::INFINITY, f64::min);
    SeparationStats {
        delta,
        min_gap,
        min_weight,
    }
}
