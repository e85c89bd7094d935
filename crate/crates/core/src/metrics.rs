//! Per-pixel bounds from output chains, average pixel difference, and cost
//! accounting for segment propagation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segprop::{PropagationStats, SegmentChain};

/// Tolerance below which two pixel values count as unchanged.
pub const CHANGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub avg_distance: f64,
    pub median_distance: f64,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-coordinate min/max over the chain's breakpoint vertices. Exact,
/// since every piece is affine.
pub fn pixel_bounds(chain: &SegmentChain) -> PixelBounds {
    let dim = chain.dim();
    let mut lower = vec![f64::INFINITY; dim];
    let mut upper = vec![f64::NEG_INFINITY; dim];
    for v in chain.vertices() {
        for (i, &x) in v.iter().enumerate() {
            lower[i] = lower[i].min(x);
            upper[i] = upper[i].max(x);
        }
    }
    let mut dist: Vec<f64> = upper.iter().zip(&lower).map(|(u, l)| u - l).collect();
    let avg_distance = if dim == 0 { 0.0 } else { dist.iter().sum::<f64>() / dim as f64 };
    let median_distance = median(&mut dist);
    PixelBounds {
        lower,
        upper,
        avg_distance,
        median_distance,
    }
}

impl PixelBounds {
    /// Whether `x` lies inside the bounds up to `tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.lower.len()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Apd {
    pub value: f64,
    pub changed: usize,
    /// No pixel changed; `value` is 0 by convention.
    pub no_change: bool,
}

/// Mean `|x_i − x'_i|` over the pixels that changed.
pub fn apd(x: &[f64], x2: &[f64]) -> Result<Apd> {
    if x.len() != x2.len() {
        return Err(Error::shape("apd image", x.len(), x2.len()));
    }
    let (mut sum, mut changed) = (0.0, 0usize);
    for (a, b) in x.iter().zip(x2) {
        let d = (a - b).abs();
        if d > CHANGE_TOLERANCE {
            sum += d;
            changed += 1;
        }
    }
    Ok(Apd {
        value: if changed == 0 { 0.0 } else { sum / changed as f64 },
        changed,
        no_change: changed == 0,
    })
}

/// One propagation run with the width of the network it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRecord {
    pub width: usize,
    pub depth: usize,
    pub stats: PropagationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub runs: usize,
    pub max_pieces: usize,
    pub mean_final_pieces: f64,
    pub total_ms: f64,
    /// Every run respected its per-layer growth bound.
    pub growth_within_bounds: bool,
    /// Largest observed `pieces_k / pieces_{k−1}` over all layers and runs.
    pub max_growth_factor: f64,
    /// Least-squares slope of `ln(pieces)` against layer index, pooled over runs.
    pub log_pieces_per_layer: f64,
    /// Slope of `ln(mean final pieces)` against `ln(width)`; absent with
    /// fewer than two distinct widths.
    pub width_loglog_slope: Option<f64>,
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Some(sxy / sxx)
}

pub fn cost_report(records: &[CostRecord]) -> Result<CostReport> {
    if records.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut max_pieces = 1;
    let mut max_growth: f64 = 1.0;
    let (mut depth_x, mut depth_y) = (Vec::new(), Vec::new());
    for r in records {
        let mut prev = 1usize;
        for (k, &p) in r.stats.pieces_per_layer.iter().enumerate() {
            max_pieces = max_pieces.max(p);
            max_growth = max_growth.max(p as f64 / prev as f64);
            depth_x.push(k as f64 + 1.0);
            depth_y.push((p as f64).ln());
            prev = p;
        }
    }
    let mut widths: Vec<usize> = records.iter().map(|r| r.width).collect();
    widths.sort_unstable();
    widths.dedup();
    let width_loglog_slope = if widths.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = widths
            .iter()
            .map(|&w| {
                let finals: Vec<f64> = records
                    .iter()
                    .filter(|r| r.width == w)
                    .map(|r| r.stats.final_pieces() as f64)
                    .collect();
                ((w as f64).ln(), (finals.iter().sum::<f64>() / finals.len() as f64).ln())
            })
            .unzip();
        slope(&xs, &ys)
    } else {
        None
    };
    Ok(CostReport {
        runs: records.len(),
        max_pieces,
        mean_final_pieces: records.iter().map(|r| r.stats.final_pieces() as f64).sum::<f64>() / records.len() as f64,
        total_ms: records.iter().map(|r| r.stats.wall_ms).sum(),
        growth_within_bounds: records.iter().all(|r| r.stats.growth_within_bounds()),
        max_growth_factor: max_growth,
        log_pieces_per_layer: slope(&depth_x, &depth_y).unwrap_or(0.0),
        width_loglog_slope,
    })
}
