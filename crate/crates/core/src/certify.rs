//! Certification of a classifier over a latent mutation segment.
//!
//! Every piece of the exact output chain is affine in `t`, so each pairwise
//! logit difference is affine on a piece and the verdict follows from its
//! values at the breakpoints.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::directions::MutationSpec;
use crate::error::{Error, Result};
use crate::network::{Affine, Layer, Network};
use crate::segprop::{propagate_box, propagate_segment, IntervalBox, SegmentChain};

/// Minimum margin between the top two logits at `t = 0`.
pub const LABEL_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Certified,
    Falsified,
    Unknown,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Certified => "certified",
            Verdict::Falsified => "falsified",
            Verdict::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantBounds {
    pub lower: f64,
    pub upper: f64,
    /// Parameter length of each piece.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Instrumentation {
    pub pieces_per_layer: Vec<usize>,
    pub final_pieces: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub verdict: Verdict,
    pub reference_label: usize,
    /// Fraction of `delta_max` before the prediction changes; 1 if it never does.
    pub max_tolerance: f64,
    pub flip_witness: Option<Vec<f64>>,
    pub witness_t: Option<f64>,
    pub quant: Option<QuantBounds>,
    pub instrumentation: Instrumentation,
}

/// Index of the largest logit; errors if the runner-up is within
/// [`LABEL_TIE_TOLERANCE`].
pub fn reference_label(logits: &DVector<f64>) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::DegenerateInput("no logits".into()));
    }
    let best = logits.argmax().0;
    let tie = logits
        .iter()
        .enumerate()
        .any(|(k, &v)| k != best && logits[best] - v <= LABEL_TIE_TOLERANCE);
    if tie {
        return Err(Error::DegenerateInput(format!(
            "top logits tie within {LABEL_TIE_TOLERANCE} at t = 0"
        )));
    }
    Ok(best)
}

/// First parameter where `label` stops being the strict maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstFlip {
    /// Parameter of the exact root.
    pub t: f64,
    /// Parameter of a point after the root where another logit is at least as large.
    pub witness_t: f64,
}

/// Scans an output chain for the earliest `t` where some logit difference
/// `y_label − y_k` is `<= 0`.
pub fn first_flip(chain: &SegmentChain, label: usize) -> Result<Option<FirstFlip>> {
    if label >= chain.dim() {
        return Err(Error::shape("reference label", chain.dim(), label));
    }
    let margin = |v: &DVector<f64>| -> f64 {
        (0..v.len())
            .filter(|&k| k != label)
            .map(|k| v[label] - v[k])
            .fold(f64::INFINITY, f64::min)
    };
    if margin(&chain.vertices()[0]) <= 0.0 {
        return Ok(Some(FirstFlip {
            t: 0.0,
            witness_t: 0.0,
        }));
    }
    for (ta, tb, va, vb) in chain.piece_iter() {
        if margin(vb) > 0.0 {
            continue;
        }
        // Some difference is positive at `ta` and non-positive at `tb`.
        let mut root = tb;
        for k in (0..va.len()).filter(|&k| k != label) {
            let da = va[label] - va[k];
            let db = vb[label] - vb[k];
            if db <= 0.0 {
                let r = ta + (tb - ta) * da / (da - db);
                root = root.min(r.clamp(ta, tb));
            }
        }
        return Ok(Some(FirstFlip {
            t: root,
            witness_t: tb,
        }));
    }
    Ok(None)
}

fn instrumentation(stats: &crate::segprop::PropagationStats, start: Instant) -> Instrumentation {
    Instrumentation {
        pieces_per_layer: stats.pieces_per_layer.clone(),
        final_pieces: stats.final_pieces(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

/// Exact verdict over `z + δ ŝ`, `0 <= δ <= delta_max`.
pub fn certify_complete(net: &Network, spec: &MutationSpec, z: &DVector<f64>) -> Result<CertificateReport> {
    let start = Instant::now();
    let label = reference_label(&net.forward(z)?)?;
    let seg = spec.segment(z)?;
    let prop = propagate_segment(net, &seg)?;
    let flip = first_flip(&prop.chain, label)?;
    let (verdict, max_tolerance, witness, witness_t) = match flip {
        None => (Verdict::Certified, 1.0, None, None),
        Some(f) => {
            let w = seg.lerp(f.witness_t);
            (Verdict::Falsified, f.t, Some(w.iter().copied().collect()), Some(f.witness_t))
        }
    };
    Ok(CertificateReport {
        verdict,
        reference_label: label,
        max_tolerance,
        flip_witness: witness,
        witness_t,
        quant: None,
        instrumentation: instrumentation(&prop.stats, start),
    })
}

/// Exact fraction of `delta_max` the prediction survives.
pub fn max_tolerance(net: &Network, spec: &MutationSpec, z: &DVector<f64>) -> Result<f64> {
    Ok(certify_complete(net, spec, z)?.max_tolerance)
}

/// Lower/upper bounds on the fraction of the segment whose scalar output
/// keeps the original decision (`q > threshold` if `original_yes`, else
/// `q <= threshold`).
pub fn certify_quant(chain: &SegmentChain, threshold: f64, original_yes: bool) -> Result<QuantBounds> {
    if chain.dim() != 1 {
        return Err(Error::shape("quantitative chain output", 1, chain.dim()));
    }
    let keeps = |q: f64| if original_yes { q > threshold } else { q <= threshold };
    let mut weights = Vec::with_capacity(chain.pieces());
    let (mut lower, mut upper) = (0.0, 0.0);
    for (ta, tb, va, vb) in chain.piece_iter() {
        let w = tb - ta;
        weights.push(w);
        let (a, b) = (keeps(va[0]), keeps(vb[0]));
        if a && b {
            lower += w;
        }
        if a || b {
            upper += w;
        }
    }
    Ok(QuantBounds {
        lower: lower.clamp(0.0, 1.0),
        upper: upper.clamp(0.0, 1.0),
        weights,
    })
}

/// Quantitative certification of a scalar-output network. The verdict is
/// certified when every piece keeps the decision, falsified otherwise with
/// the first breakpoint that does not as witness.
pub fn certify_quantitative(
    net: &Network,
    spec: &MutationSpec,
    z: &DVector<f64>,
    threshold: f64,
) -> Result<CertificateReport> {
    let start = Instant::now();
    if net.output_dim != 1 {
        return Err(Error::shape("quantitative network output", 1, net.output_dim));
    }
    let original_yes = net.forward(z)?[0] > threshold;
    let seg = spec.segment(z)?;
    let prop = propagate_segment(net, &seg)?;
    let quant = certify_quant(&prop.chain, threshold, original_yes)?;
    let keeps = |q: f64| if original_yes { q > threshold } else { q <= threshold };

    let mut flip = None;
    for (ta, tb, va, vb) in prop.chain.piece_iter() {
        if keeps(vb[0]) {
            continue;
        }
        let (qa, qb) = (va[0], vb[0]);
        let root = if qa == qb {
            ta
        } else {
            (ta + (tb - ta) * (qa - threshold) / (qa - qb)).clamp(ta, tb)
        };
        flip = Some((root, tb));
        break;
    }
    let (verdict, max_tolerance, witness, witness_t) = match flip {
        None => (Verdict::Certified, 1.0, None, None),
        Some((root, wt)) => (
            Verdict::Falsified,
            root,
            Some(seg.lerp(wt).iter().copied().collect()),
            Some(wt),
        ),
    };
    Ok(CertificateReport {
        verdict,
        reference_label: original_yes as usize,
        max_tolerance,
        flip_witness: witness,
        witness_t,
        quant: Some(quant),
        instrumentation: instrumentation(&prop.stats, start),
    })
}

/// Affine layer mapping logits to `y_label − y_k` for every `k != label`.
fn difference_layer(classes: usize, label: usize) -> Affine {
    let mut w = DMatrix::zeros(classes - 1, classes);
    for (row, k) in (0..classes).filter(|&k| k != label).enumerate() {
        w[(row, label)] = 1.0;
        w[(row, k)] = -1.0;
    }
    Affine {
        weights: w,
        bias: DVector::zeros(classes - 1),
    }
}

/// Sound but incomplete verdict from interval propagation of the
/// segment's bounding box. Never falsifies.
pub fn certify_incomplete(net: &Network, spec: &MutationSpec, z: &DVector<f64>) -> Result<CertificateReport> {
    let start = Instant::now();
    let label = reference_label(&net.forward(z)?)?;
    let seg = spec.segment(z)?;
    let mut layers = net.layers.clone();
    layers.push(Layer::Affine(difference_layer(net.output_dim, label)));
    let with_diffs = Network::new(format!("{}-margins", net.name), net.input_dim, layers)?;
    let out = propagate_box(&with_diffs, &IntervalBox::hull_of_segment(&seg))?;
    let proved = out.lower.iter().all(|&l| l > 0.0);
    Ok(CertificateReport {
        verdict: if proved { Verdict::Certified } else { Verdict::Unknown },
        reference_label: label,
        max_tolerance: if proved { 1.0 } else { 0.0 },
        flip_witness: None,
        witness_t: None,
        quant: None,
        instrumentation: Instrumentation {
            pieces_per_layer: Vec::new(),
            final_pieces: 1,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn chain(t: &[f64], vs: &[&[f64]]) -> SegmentChain {
        SegmentChain::new(t.to_vec(), vs.iter().map(|x| v(x)).collect()).unwrap()
    }

    /// One-dimensional latent, `f∘G` given as a single affine layer.
    fn affine_net(w: &[Vec<f64>], b: &[f64]) -> Network {
        Network::new("a", 1, vec![Layer::Affine(Affine::from_rows(w, b).unwrap())]).unwrap()
    }

    fn unit_spec(delta_max: f64) -> MutationSpec {
        MutationSpec::new(v(&[1.0]), delta_max, "x").unwrap()
    }

    #[test]
    fn positive_margin_is_certified() {
        let c = chain(&[0.0, 1.0], &[&[2.0, 1.0], &[3.0, 1.0]]);
        assert_eq!(first_flip(&c, 0).unwrap(), None);
        let net = affine_net(&[vec![1.0], vec![0.0]], &[2.0, 1.0]);
        let r = certify_complete(&net, &unit_spec(1.0), &v(&[0.0])).unwrap();
        assert_eq!(r.verdict, Verdict::Certified);
        assert_eq!(r.max_tolerance, 1.0);
        assert!(r.flip_witness.is_none());
    }

    #[test]
    fn linear_root_is_exact() {
        // Margin goes from +0.4 to −0.4.
        let c = chain(&[0.0, 1.0], &[&[0.4, 0.0], &[-0.4, 0.0]]);
        let f = first_flip(&c, 0).unwrap().unwrap();
        assert!((f.t - 0.5).abs() < 1e-15);
        let net = affine_net(&[vec![-0.8], vec![0.0]], &[0.4, 0.0]);
        let r = certify_complete(&net, &unit_spec(1.0), &v(&[0.0])).unwrap();
        assert_eq!(r.verdict, Verdict::Falsified);
        assert!((r.max_tolerance - 0.5).abs() < 1e-15);
        let w = v(&r.flip_witness.unwrap());
        let out = net.forward(&w).unwrap();
        assert!(out[1] >= out[0]);
        assert_eq!(max_tolerance(&net, &unit_spec(1.0), &v(&[0.0])).unwrap(), r.max_tolerance);
    }

    #[test]
    fn tie_at_origin_is_degenerate() {
        let net = affine_net(&[vec![1.0], vec![0.0]], &[1.0, 1.0]);
        assert!(matches!(
            certify_complete(&net, &unit_spec(1.0), &v(&[0.0])),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn tolerance_is_invariant_in_absolute_extent() {
        let net = affine_net(&[vec![-0.8], vec![0.0]], &[0.4, 0.0]);
        let a = max_tolerance(&net, &unit_spec(1.0), &v(&[0.0])).unwrap();
        let b = max_tolerance(&net, &unit_spec(2.0), &v(&[0.0])).unwrap();
        assert!((a * 1.0 - b * 2.0).abs() < 1e-12);
        assert!(b <= a);
    }

    #[test]
    fn quant_examples() {
        let c = chain(&[0.0, 0.5, 1.0], &[&[0.8], &[0.6], &[0.4]]);
        let q = certify_quant(&c, 0.5, true).unwrap();
        assert_eq!((q.lower, q.upper), (0.5, 1.0));
        // Monte-Carlo fraction of `q > 0.5` is 0.75.
        let n = 100_000;
        let hits = (0..n)
            .filter(|i| c.at((*i as f64 + 0.5) / n as f64)[0] > 0.5)
            .count() as f64
            / n as f64;
        assert!((hits - 0.75).abs() < 1e-3 && q.lower <= hits && hits <= q.upper);

        let low = chain(&[0.0, 1.0], &[&[0.1], &[0.3]]);
        let q = certify_quant(&low, 0.5, true).unwrap();
        assert_eq!((q.lower, q.upper), (0.0, 0.0));
        let q = certify_quant(&low, 0.5, false).unwrap();
        assert_eq!((q.lower, q.upper), (1.0, 1.0));

        let one = chain(&[0.0, 0.3, 1.0], &[&[1.0], &[1.0], &[1.0]]);
        let q = certify_quant(&one, 0.5, true).unwrap();
        assert_eq!((q.lower, q.upper), (1.0, 1.0));
        assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // A piece touching the threshold counts toward the upper bound only.
        let touch = chain(&[0.0, 1.0], &[&[0.5], &[0.7]]);
        let q = certify_quant(&touch, 0.5, true).unwrap();
        assert_eq!((q.lower, q.upper), (0.0, 1.0));

        let two = chain(&[0.0, 1.0], &[&[0.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(certify_quant(&two, 0.5, true), Err(Error::Shape { .. })));
    }

    #[test]
    fn quantitative_network() {
        let net = affine_net(&[vec![-1.0]], &[0.8]);
        let r = certify_quantitative(&net, &unit_spec(1.0), &v(&[0.0]), 0.5).unwrap();
        assert_eq!(r.verdict, Verdict::Falsified);
        assert!((r.max_tolerance - 0.3).abs() < 1e-12);
        let q = r.quant.unwrap();
        assert_eq!((q.lower, q.upper), (0.0, 1.0));
    }

    /// `y0 = 0.5 + relu(x) − relu(x)`, `y1 = 0`: the box loses the
    /// correlation between the two hidden units.
    fn cancellation_net() -> Network {
        Network::new(
            "cancel",
            1,
            vec![
                Layer::Affine(Affine::from_rows(&[vec![1.0], vec![1.0]], &[0.0, 0.0]).unwrap()),
                Layer::Relu,
                Layer::Affine(
                    Affine::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]], &[0.5, 0.0]).unwrap(),
                ),
            ],
        )
        .unwrap()
    }

    #[test]
    fn incomplete_can_be_unknown_where_complete_certifies() {
        let net = cancellation_net();
        let z = v(&[0.0]);
        let spec = unit_spec(1.0);
        assert_eq!(certify_complete(&net, &spec, &z).unwrap().verdict, Verdict::Certified);
        assert_eq!(certify_incomplete(&net, &spec, &z).unwrap().verdict, Verdict::Unknown);
        // Zero extent is a single point.
        let r = certify_incomplete(&net, &unit_spec(0.0), &z).unwrap();
        assert_eq!(r.verdict, Verdict::Certified);
    }

    #[test]
    fn incomplete_is_sound() {
        for seed in 0..30 {
            let net = Network::random("n", &[3, 6, 6, 4], seed);
            let z = v(&[0.1, -0.2, 0.3]);
            let Ok(label) = reference_label(&net.forward(&z).unwrap()) else { continue };
            let spec = MutationSpec::new(v(&[0.6, 0.0, 0.8]), 0.05 * (seed % 5) as f64, "s").unwrap();
            let inc = certify_incomplete(&net, &spec, &z).unwrap();
            let com = certify_complete(&net, &spec, &z).unwrap();
            assert_eq!(inc.reference_label, label);
            assert_ne!(inc.verdict, Verdict::Falsified);
            if inc.verdict == Verdict::Certified {
                assert_eq!(com.verdict, Verdict::Certified);
            }
        }
    }
}
