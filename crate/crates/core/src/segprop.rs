//! Exact propagation of a line segment through a piece-wise linear network.
//!
//! The image of a segment under a piece-wise linear map is a polyline. A
//! [`SegmentChain`] stores it as breakpoints `(t_i, v_i)` over the segment
//! parameter `t ∈ [0, 1]`; the map is affine between consecutive breakpoints.
//! Affine layers move vertices, activation layers split pieces where a
//! coordinate changes sign.
//!
//! [`propagate_box`] is the interval-arithmetic baseline: sound but loose.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{relu, Affine, Layer, Network};

/// Breakpoints closer than this in `t` are merged.
pub const T_DEDUP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: DVector<f64>,
    pub end: DVector<f64>,
}

impl Segment {
    pub fn new(start: DVector<f64>, end: DVector<f64>) -> Result<Self> {
        if start.len() != end.len() {
            return Err(Error::shape("segment end", start.len(), end.len()));
        }
        if start.iter().chain(end.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite segment endpoint".into()));
        }
        Ok(Segment { start, end })
    }

    /// The segment `z → z + extent · direction`.
    pub fn from_direction(z: &DVector<f64>, direction: &DVector<f64>, extent: f64) -> Result<Self> {
        Segment::new(z.clone(), z + direction * extent)
    }

    pub fn dim(&self) -> usize {
        self.start.len()
    }

    pub fn lerp(&self, t: f64) -> DVector<f64> {
        &self.start + (&self.end - &self.start) * t
    }
}

/// Polyline with affine behaviour between consecutive breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainRecord", into = "ChainRecord")]
pub struct SegmentChain {
    t: Vec<f64>,
    vertices: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ChainRecord {
    t: Vec<f64>,
    vertices: Vec<Vec<f64>>,
}

impl From<SegmentChain> for ChainRecord {
    fn from(c: SegmentChain) -> Self {
        ChainRecord {
            t: c.t,
            vertices: c.vertices.iter().map(|v| v.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<ChainRecord> for SegmentChain {
    type Error = Error;
    fn try_from(r: ChainRecord) -> Result<Self> {
        SegmentChain::new(r.t, r.vertices.into_iter().map(DVector::from_vec).collect())
    }
}

impl SegmentChain {
    /// Validates ordering (`0 = t_0 < ... < t_n = 1`) and dimensions.
    pub fn new(t: Vec<f64>, vertices: Vec<DVector<f64>>) -> Result<Self> {
        if t.len() < 2 || t.len() != vertices.len() {
            return Err(Error::Domain(format!(
                "chain needs >= 2 matching breakpoints, got {} t values and {} vertices",
                t.len(),
                vertices.len()
            )));
        }
        if t[0] != 0.0 || *t.last().unwrap() != 1.0 {
            return Err(Error::Domain("chain must start at t = 0 and end at t = 1".into()));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("chain parameters must be strictly increasing".into()));
        }
        let dim = vertices[0].len();
        if let Some(v) = vertices.iter().find(|v| v.len() != dim) {
            return Err(Error::shape("chain vertex", dim, v.len()));
        }
        Ok(SegmentChain { t, vertices })
    }

    /// The single-piece chain of a segment.
    pub fn from_segment(seg: &Segment) -> Self {
        SegmentChain {
            t: vec![0.0, 1.0],
            vertices: vec![seg.start.clone(), seg.end.clone()],
        }
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    pub fn params(&self) -> &[f64] {
        &self.t
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn breakpoints(&self) -> usize {
        self.t.len()
    }

    pub fn pieces(&self) -> usize {
        self.t.len() - 1
    }

    /// Index `i` of the piece `[t_i, t_{i+1}]` containing `t` (clamped to `[0, 1]`).
    pub fn piece_index(&self, t: f64) -> usize {
        let t = t.clamp(0.0, 1.0);
        match self.t.partition_point(|&x| x <= t) {
            0 => 0,
            k => (k - 1).min(self.pieces() - 1),
        }
    }

    /// Linear interpolation of the chain at parameter `t`.
    pub fn at(&self, t: f64) -> DVector<f64> {
        let i = self.piece_index(t);
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let a = ((t.clamp(0.0, 1.0) - t0) / (t1 - t0)).clamp(0.0, 1.0);
        &self.vertices[i] + (&self.vertices[i + 1] - &self.vertices[i]) * a
    }

    /// Euclidean length of the polyline.
    pub fn length(&self) -> f64 {
        self.vertices.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
    }

    /// Iterates pieces as `(t_start, t_end, v_start, v_end)`.
    pub fn piece_iter(
        &self,
    ) -> impl Iterator<Item = (f64, f64, &DVector<f64>, &DVector<f64>)> + '_ {
        (0..self.pieces()).map(move |i| {
            (
                self.t[i],
                self.t[i + 1],
                &self.vertices[i],
                &self.vertices[i + 1],
            )
        })
    }

    fn map_vertices(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> SegmentChain {
        SegmentChain {
            t: self.t.clone(),
            vertices: self.vertices.iter().map(f).collect(),
        }
    }
}

/// Affine image of a chain; breakpoints are unchanged.
pub fn propagate_affine(
    chain: &SegmentChain,
    weights: &DMatrix<f64>,
    bias: &DVector<f64>,
) -> Result<SegmentChain> {
    if weights.ncols() != chain.dim() {
        return Err(Error::shape("affine over chain", weights.ncols(), chain.dim()));
    }
    if weights.nrows() != bias.len() {
        return Err(Error::shape("affine bias", weights.nrows(), bias.len()));
    }
    let stacked = DMatrix::from_columns(&chain.vertices);
    let mut mapped = weights * stacked;
    for mut col in mapped.column_iter_mut() {
        col += bias;
    }
    Ok(SegmentChain {
        t: chain.t.clone(),
        vertices: mapped.column_iter().map(|c| c.into_owned()).collect(),
    })
}

/// Splits every piece at interior zero crossings, then applies ReLU.
pub fn propagate_relu(chain: &SegmentChain) -> SegmentChain {
    let split = split_at_zero(chain);
    split.map_vertices(|v| v.map(relu))
}

/// Inserts a breakpoint wherever a coordinate changes sign strictly inside a
/// piece. The crossing coordinate of the new vertex is set to zero exactly.
fn split_at_zero(chain: &SegmentChain) -> SegmentChain {
    let dim = chain.dim();
    let mut t_out = Vec::with_capacity(chain.t.len());
    let mut v_out = Vec::with_capacity(chain.t.len());
    let mut crossings: Vec<(f64, usize)> = Vec::with_capacity(dim);

    for (t0, t1, a, b) in chain.piece_iter() {
        t_out.push(t0);
        v_out.push(a.clone());

        crossings.clear();
        for c in 0..dim {
            let (va, vb) = (a[c], b[c]);
            if (va < 0.0 && vb > 0.0) || (va > 0.0 && vb < 0.0) {
                crossings.push((-va / (vb - va), c));
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(|x, y| x.0.total_cmp(&y.0));

        let span = t1 - t0;
        let diff = b - a;
        let mut k = 0;
        while k < crossings.len() {
            let alpha = crossings[k].0;
            let t = t0 + alpha * span;
            // Coordinates crossing at (numerically) the same parameter share a vertex.
            let mut group_end = k + 1;
            while group_end < crossings.len()
                && (crossings[group_end].0 - alpha) * span <= T_DEDUP_TOLERANCE
            {
                group_end += 1;
            }
            let last_t = *t_out.last().unwrap();
            if t - last_t > T_DEDUP_TOLERANCE && t1 - t > T_DEDUP_TOLERANCE {
                let mut v = a + &diff * alpha;
                for &(_, c) in &crossings[k..group_end] {
                    v[c] = 0.0;
                }
                t_out.push(t);
                v_out.push(v);
            }
            k = group_end;
        }
    }
    t_out.push(1.0);
    v_out.push(chain.vertices.last().unwrap().clone());
    SegmentChain {
        t: t_out,
        vertices: v_out,
    }
}

/// Per-call instrumentation of a propagation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropagationStats {
    /// Pieces after each layer.
    pub pieces_per_layer: Vec<usize>,
    pub wall_ms: f64,
    /// Per-layer worst-case growth factor (1 for affine layers).
    #[serde(default)]
    pub growth_bounds: Vec<usize>,
}

impl PropagationStats {
    pub fn final_pieces(&self) -> usize {
        self.pieces_per_layer.last().copied().unwrap_or(1)
    }

    /// Checks `pieces_k <= pieces_{k-1} * bound_k` for every layer.
    pub fn growth_within_bounds(&self) -> bool {
        let mut prev = 1usize;
        self.pieces_per_layer
            .iter()
            .zip(&self.growth_bounds)
            .all(|(&p, &bound)| {
                let ok = p <= prev.saturating_mul(bound);
                prev = p;
                ok
            })
    }
}

/// Result of [`propagate_segment`].
#[derive(Debug, Clone)]
pub struct Propagation {
    pub chain: SegmentChain,
    pub stats: PropagationStats,
}

fn affine_to(chain: &SegmentChain, a: &Affine) -> Result<SegmentChain> {
    propagate_affine(chain, &a.weights, &a.bias)
}

/// Applies one layer to a chain. Clamps run as relu, `peak - x`, relu
/// (and `- 1` for `clamp11`).
pub fn propagate_layer(chain: &SegmentChain, layer: &Layer) -> Result<SegmentChain> {
    Ok(match layer {
        Layer::Affine(a) => affine_to(chain, a)?,
        Layer::Relu => propagate_relu(chain),
        Layer::Clamp01 | Layer::Clamp11 => {
            let peak = if matches!(layer, Layer::Clamp01) { 1.0 } else { 2.0 };
            let inner = propagate_relu(chain);
            let flipped = inner.map_vertices(|v| v.map(|x| -x + peak));
            let outer = propagate_relu(&flipped);
            if matches!(layer, Layer::Clamp11) {
                outer.map_vertices(|v| v.map(|x| x - 1.0))
            } else {
                outer
            }
        }
    })
}

/// Exact image of `seg` under `net`.
pub fn propagate_segment(net: &Network, seg: &Segment) -> Result<Propagation> {
    if seg.dim() != net.input_dim {
        return Err(Error::shape("segment", net.input_dim, seg.dim()));
    }
    let started = Instant::now();
    let mut chain = SegmentChain::from_segment(seg);
    let mut stats = PropagationStats::default();
    let dims = net.layer_dims();
    for (layer, &dim) in net.layers.iter().zip(&dims) {
        chain = propagate_layer(&chain, layer)?;
        stats.pieces_per_layer.push(chain.pieces());
        stats.growth_bounds.push(match layer {
            Layer::Affine(_) => 1,
            Layer::Relu => dim + 1,
            Layer::Clamp01 | Layer::Clamp11 => 2 * dim + 1,
        });
    }
    stats.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(Propagation { chain, stats })
}

/// Axis-aligned box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl IntervalBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::shape("box upper", lower.len(), upper.len()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::Domain("box lower bound exceeds upper bound".into()));
        }
        Ok(IntervalBox { lower, upper })
    }

    pub fn point(x: &DVector<f64>) -> Self {
        IntervalBox {
            lower: x.clone(),
            upper: x.clone(),
        }
    }

    /// Smallest box containing a segment.
    pub fn hull_of_segment(seg: &Segment) -> Self {
        IntervalBox {
            lower: seg.start.inf(&seg.end),
            upper: seg.start.sup(&seg.end),
        }
    }

    /// Smallest box containing every vertex of a chain.
    pub fn hull_of_chain(chain: &SegmentChain) -> Self {
        let first = &chain.vertices[0];
        let (lower, upper) = chain.vertices[1..]
            .iter()
            .fold((first.clone(), first.clone()), |(lo, hi), v| (lo.inf(v), hi.sup(v)));
        IntervalBox { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn contains_box(&self, other: &IntervalBox, tol: f64) -> bool {
        self.contains(&other.lower, tol) && self.contains(&other.upper, tol)
    }
}

/// Interval-arithmetic image of a box: contains `forward(net, x)` for every
/// `x` in the input box.
pub fn propagate_box(net: &Network, input: &IntervalBox) -> Result<IntervalBox> {
    if input.dim() != net.input_dim {
        return Err(Error::shape("box", net.input_dim, input.dim()));
    }
    let mut lo = input.lower.clone();
    let mut hi = input.upper.clone();
    for layer in &net.layers {
        match layer {
            Layer::Affine(a) => {
                let center = (&lo + &hi) * 0.5;
                let radius = (&hi - &lo) * 0.5;
                let c = a.apply(&center);
                let r = a.weights.abs() * radius;
                lo = &c - &r;
                hi = &c + &r;
            }
            Layer::Relu => {
                lo = lo.map(relu);
                hi = hi.map(relu);
            }
            Layer::Clamp01 | Layer::Clamp11 => {
                // Both clamps are non-increasing, so the bounds swap.
                let f = if matches!(layer, Layer::Clamp01) {
                    crate::network::clamp01
                } else {
                    crate::network::clamp11
                };
                let new_lo = hi.map(f);
                hi = lo.map(f);
                lo = new_lo;
            }
        }
    }
    Ok(IntervalBox {
        lower: lo,
        upper: hi,
    })
}
