//! Mutation directions in the latent space of a generator.
//!
//! At a latent point `z` the generator is locally `G(z + Δ) = G(z) + J Δ`.
//! The Gram matrix `JᵀJ` is split into a low-rank part `R*` and a residual
//! `E*`; the right singular vectors of `R*` give orthonormal directions. The
//! first `r` of them change the output ("mutating"), the remaining `d − r`
//! leave it (numerically) unchanged.
//!
//! Local mutations restrict the analysis to a pixel region: directions that
//! mutate the foreground are projected onto the non-mutating subspace of the
//! background.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, orthonormality_error, sorted_svd};
use crate::network::Network;

/// Projections shorter than this are treated as empty.
pub const MIN_PROJECTION_NORM: f64 = 1e-6;

/// `JᵀJ`, symmetrized so that it is exactly symmetric.
pub fn gram(j: &DMatrix<f64>) -> DMatrix<f64> {
    let m = j.tr_mul(j);
    (&m + m.transpose()) * 0.5
}

/// Which singular triples belong to the low-rank part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    /// Keep `σ_i > relative · σ_1`.
    pub relative: f64,
    /// Optional hard cap on the rank.
    #[serde(default)]
    pub max_rank: Option<usize>,
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy {
            relative: 1e-3,
            max_rank: None,
        }
    }
}

impl RankPolicy {
    pub fn relative(threshold: f64) -> Self {
        RankPolicy {
            relative: threshold,
            max_rank: None,
        }
    }

    fn rank_of(&self, sigma: &DVector<f64>) -> usize {
        let Some(&top) = sigma.iter().next() else {
            return 0;
        };
        if top <= 0.0 {
            return 0;
        }
        let r = sigma.iter().filter(|&&s| s > self.relative * top).count();
        self.max_rank.map_or(r, |cap| r.min(cap))
    }
}

/// `M = R* + E*` with `rank(R*) = r`.
#[derive(Debug, Clone)]
pub struct LowRankSplit {
    pub low_rank: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub rank: usize,
    /// Singular values of `M`, non-increasing.
    pub sigma: DVector<f64>,
    /// Right singular vectors of `M` (columns), matching `sigma`.
    pub v: DMatrix<f64>,
}

/// Splits a symmetric PSD matrix into its thresholded low-rank part and the
/// residual.
pub fn low_rank_split(m: &DMatrix<f64>, policy: RankPolicy) -> Result<LowRankSplit> {
    if !m.is_square() {
        return Err(Error::Domain("low-rank split needs a square matrix".into()));
    }
    let scale = max_abs(m).max(1.0);
    if max_abs(&(m - m.transpose())) > 1e-8 * scale {
        return Err(Error::Domain("matrix is not symmetric".into()));
    }
    let (u, sigma, v) = sorted_svd(m);
    let rank = policy.rank_of(&sigma);
    let n = m.nrows();
    let mut low_rank = DMatrix::zeros(n, n);
    for i in 0..rank {
        low_rank += u.column(i) * v.column(i).transpose() * sigma[i];
    }
    let noise = m - &low_rank;
    Ok(LowRankSplit {
        low_rank,
        noise,
        rank,
        sigma,
        v,
    })
}

/// Orthonormal latent directions with the effective rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRecord", into = "BasisRecord")]
pub struct DirectionBasis {
    /// `d x d`, columns are directions.
    pub v: DMatrix<f64>,
    /// Gram-matrix singular values, non-increasing.
    pub singular_values: DVector<f64>,
    pub rank: usize,
}

#[derive(Serialize, Deserialize)]
struct BasisRecord {
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    rank: usize,
}

impl From<DirectionBasis> for BasisRecord {
    fn from(b: DirectionBasis) -> Self {
        BasisRecord {
            v: b.v.row_iter().map(|r| r.iter().copied().collect()).collect(),
            sigma: b.singular_values.iter().copied().collect(),
            rank: b.rank,
        }
    }
}

impl TryFrom<BasisRecord> for DirectionBasis {
    type Error = Error;
    fn try_from(r: BasisRecord) -> Result<Self> {
        let d = r.v.len();
        if r.v.iter().any(|row| row.len() != d) || r.sigma.len() != d {
            return Err(Error::Format("basis must be square with one sigma per column".into()));
        }
        if r.rank > d {
            return Err(Error::Range(format!("rank {} exceeds dimension {d}", r.rank)));
        }
        let flat: Vec<f64> = r.v.into_iter().flatten().collect();
        Ok(DirectionBasis {
            v: DMatrix::from_row_slice(d, d, &flat),
            singular_values: DVector::from_vec(r.sigma),
            rank: r.rank,
        })
    }
}

impl DirectionBasis {
    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn direction(&self, i: usize) -> DVector<f64> {
        self.v.column(i).into_owned()
    }

    /// Columns `0..rank`.
    pub fn mutating(&self) -> DMatrix<f64> {
        self.v.columns(0, self.rank).into_owned()
    }

    /// Columns `rank..d`.
    pub fn non_mutating(&self) -> DMatrix<f64> {
        self.v.columns(self.rank, self.dim() - self.rank).into_owned()
    }

    /// `‖VᵀV − I‖_∞`.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.v)
    }
}

/// Basis from the low-rank part of the Gram matrix of `j`.
pub fn basis_from_jacobian(j: &DMatrix<f64>, policy: RankPolicy) -> Result<DirectionBasis> {
    let split = low_rank_split(&gram(j), policy)?;
    Ok(DirectionBasis {
        v: split.v,
        singular_values: split.sigma,
        rank: split.rank,
    })
}

/// Mutation directions of `generator` at latent point `z`.
pub fn mutation_directions(
    generator: &Network,
    z: &DVector<f64>,
    policy: RankPolicy,
) -> Result<DirectionBasis> {
    let jac = generator.jacobian(z)?;
    basis_from_jacobian(&jac.matrix, policy)
}

/// Foreground pixel indices; the background is the complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    foreground: BTreeSet<usize>,
    total: usize,
}

impl RegionMask {
    pub fn new(foreground: impl IntoIterator<Item = usize>, total: usize) -> Result<Self> {
        let foreground: BTreeSet<usize> = foreground.into_iter().collect();
        if let Some(&bad) = foreground.iter().find(|&&i| i >= total) {
            return Err(Error::Range(format!("mask index {bad} outside {total} outputs")));
        }
        Ok(RegionMask { foreground, total })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn foreground(&self) -> Vec<usize> {
        self.foreground.iter().copied().collect()
    }

    pub fn background(&self) -> Vec<usize> {
        (0..self.total)
            .filter(|i| !self.foreground.contains(i))
            .collect()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.foreground.contains(&i)
    }
}

/// One mutation: unit direction, maximal extent, optional region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRecord", into = "SpecRecord")]
pub struct MutationSpec {
    pub direction: DVector<f64>,
    pub delta_max: f64,
    pub region: Option<Vec<usize>>,
    pub label: String,
    /// Norm of the projected direction before renormalization (local mutations).
    pub projection_norm: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct SpecRecord {
    s: Vec<f64>,
    delta_max: f64,
    #[serde(default)]
    mask: Option<Vec<usize>>,
    #[serde(default)]
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    projection_norm: Option<f64>,
}

impl From<MutationSpec> for SpecRecord {
    fn from(m: MutationSpec) -> Self {
        SpecRecord {
            s: m.direction.iter().copied().collect(),
            delta_max: m.delta_max,
            mask: m.region,
            label: m.label,
            projection_norm: m.projection_norm,
        }
    }
}

impl TryFrom<SpecRecord> for MutationSpec {
    type Error = Error;
    fn try_from(r: SpecRecord) -> Result<Self> {
        let mut spec = MutationSpec::new(DVector::from_vec(r.s), r.delta_max, r.label)?;
        spec.region = r.mask;
        spec.projection_norm = r.projection_norm;
        Ok(spec)
    }
}

impl MutationSpec {
    /// `direction` must be unit norm (±1e-9) and `delta_max >= 0`.
    pub fn new(direction: DVector<f64>, delta_max: f64, label: impl Into<String>) -> Result<Self> {
        let norm = direction.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("mutation direction has norm {norm}, expected 1")));
        }
        if !(delta_max >= 0.0) || !delta_max.is_finite() {
            return Err(Error::Range(format!("delta_max must be >= 0, got {delta_max}")));
        }
        Ok(MutationSpec {
            direction,
            delta_max,
            region: None,
            label: label.into(),
            projection_norm: None,
        })
    }

    /// Normalizes `direction` first.
    pub fn normalized(direction: &DVector<f64>, delta_max: f64, label: impl Into<String>) -> Result<Self> {
        let norm = direction.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Domain("cannot normalize a zero direction".into()));
        }
        MutationSpec::new(direction / norm, delta_max, label)
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    /// Latent segment `z → z + delta_max · ŝ`.
    pub fn segment(&self, z: &DVector<f64>) -> Result<crate::segprop::Segment> {
        if z.len() != self.dim() {
            return Err(Error::shape("latent point", self.dim(), z.len()));
        }
        crate::segprop::Segment::from_direction(z, &self.direction, self.delta_max)
    }
}

/// `z + delta · ŝ` for `0 <= delta <= delta_max`.
pub fn mutate(z: &DVector<f64>, spec: &MutationSpec, delta: f64) -> Result<DVector<f64>> {
    if z.len() != spec.dim() {
        return Err(Error::shape("latent point", spec.dim(), z.len()));
    }
    if !(0.0..=spec.delta_max).contains(&delta) {
        return Err(Error::Range(format!(
            "delta {delta} outside [0, {}]",
            spec.delta_max
        )));
    }
    Ok(z + &spec.direction * delta)
}

/// Mutating directions of the basis as specs.
pub fn global_specs(basis: &DirectionBasis, delta_max: f64) -> Result<Vec<MutationSpec>> {
    (0..basis.rank)
        .map(|i| MutationSpec::normalized(&basis.direction(i), delta_max, format!("global-{i}")))
        .collect()
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Projects `v` onto the column space of the orthonormal matrix `b` and
/// returns the projection with its norm.
pub fn project_onto(b: &DMatrix<f64>, v: &DVector<f64>) -> (DVector<f64>, f64) {
    let p = b * (b.transpose() * v);
    let n = p.norm();
    (p, n)
}

/// Directions that mutate only the masked region.
///
/// Each mutating direction of the foreground Jacobian is projected onto the
/// non-mutating subspace of the background Jacobian and renormalized. An
/// empty background falls back to the global directions.
pub fn local_directions(
    generator: &Network,
    z: &DVector<f64>,
    mask: &RegionMask,
    policy: RankPolicy,
    delta_max: f64,
) -> Result<Vec<MutationSpec>> {
    if mask.total() != generator.output_dim {
        return Err(Error::shape("region mask", generator.output_dim, mask.total()));
    }
    let jac = generator.jacobian(z)?.matrix;
    let fg = mask.foreground();
    let bg = mask.background();
    if bg.is_empty() {
        let basis = basis_from_jacobian(&jac, policy)?;
        return global_specs(&basis, delta_max);
    }
    let fg_basis = basis_from_jacobian(&select_rows(&jac, &fg), policy)?;
    let bg_basis = basis_from_jacobian(&select_rows(&jac, &bg), policy)?;
    let keep = bg_basis.non_mutating();

    let mut specs = Vec::new();
    for i in 0..fg_basis.rank {
        let (proj, norm) = project_onto(&keep, &fg_basis.direction(i));
        if norm < MIN_PROJECTION_NORM {
            continue;
        }
        let mut spec = MutationSpec::normalized(&proj, delta_max, format!("local-{i}"))?;
        spec.region = Some(fg.clone());
        spec.projection_norm = Some(norm);
        specs.push(spec);
    }
    Ok(specs)
}
