//! Piece-wise linear networks: layers, evaluation, Jacobians and composition.
//!
//! A [`Network`] is an ordered list of [`Layer`]s. Only affine maps, ReLU and
//! the two ReLU-built clamps are admitted, so every network is piece-wise
//! linear by construction. The same type represents a generator `G`, a
//! classifier `f` and their composition `f ∘ G`.
//!
//! The clamps are defined through their ReLU decomposition:
//!
//! * `clamp01(x) = relu(1 - relu(x))`, mapping `x <= 0` to 1 and `x >= 1` to 0;
//! * `clamp11(x) = relu(2 - relu(x)) - 1`, mapping `x <= 0` to 1 and `x >= 2` to -1.
//!
//! Both reverse orientation on their linear range. That is the construction
//! as written; a trained generator simply learns the flipped pre-activation.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::numeric_rank;

/// Pre-activations whose magnitude is at most this are treated as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// Row-major `out x in` matrix.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Affine {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::shape("affine bias", weights.nrows(), bias.len()));
        }
        Ok(Affine { weights, bias })
    }

    /// Builds an affine layer from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], bias: &[f64]) -> Result<Self> {
        let n_out = rows.len();
        let n_in = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n_in) {
            return Err(Error::shape("affine row length", n_in, bad.len()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Affine::new(
            DMatrix::from_row_slice(n_out, n_in, &flat),
            DVector::from_column_slice(bias),
        )
    }

    pub fn identity(dim: usize) -> Self {
        Affine {
            weights: DMatrix::identity(dim, dim),
            bias: DVector::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weights * x + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Relu,
    Clamp01,
    Clamp11,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Affine(_) => "affine",
            Layer::Relu => "relu",
            Layer::Clamp01 => "clamp01",
            Layer::Clamp11 => "clamp11",
        }
    }

    /// Output dimension given the input dimension.
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Layer::Affine(a) => a.output_dim(),
            _ => input_dim,
        }
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Layer::Affine(a) => a.apply(x),
            Layer::Relu => x.map(relu),
            Layer::Clamp01 => x.map(clamp01),
            Layer::Clamp11 => x.map(clamp11),
        }
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn clamp01(x: f64) -> f64 {
    relu(-relu(x) + 1.0)
}

#[inline]
pub fn clamp11(x: f64) -> f64 {
    relu(-relu(x) + 2.0) - 1.0
}

/// Derivative of a parameter-free layer at pre-activation `x`, plus whether
/// `x` sits on a kink. Kinks take the zero-gradient branch.
fn activation_slope(layer: &Layer, x: f64) -> (f64, bool) {
    let tie = |v: f64| v.abs() <= TIE_TOLERANCE;
    match layer {
        Layer::Relu => (if x > TIE_TOLERANCE { 1.0 } else { 0.0 }, tie(x)),
        Layer::Clamp01 => {
            let inside = x > TIE_TOLERANCE && 1.0 - x > TIE_TOLERANCE;
            (if inside { -1.0 } else { 0.0 }, tie(x) || tie(1.0 - x))
        }
        Layer::Clamp11 => {
            let inside = x > TIE_TOLERANCE && 2.0 - x > TIE_TOLERANCE;
            (if inside { -1.0 } else { 0.0 }, tie(x) || tie(2.0 - x))
        }
        Layer::Affine(_) => unreachable!("affine layers have no pointwise slope"),
    }
}

/// Jacobian of the active linear region, with a flag raised when the point
/// lies on a region boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub matrix: DMatrix<f64>,
    pub on_boundary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Validates layer dimensions and builds the network.
    pub fn new(name: impl Into<String>, input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Domain("network input dimension must be positive".into()));
        }
        let mut dim = input_dim;
        for layer in &layers {
            if let Layer::Affine(a) = layer {
                if a.input_dim() != dim {
                    return Err(Error::shape("affine input", dim, a.input_dim()));
                }
                if a.weights.iter().chain(a.bias.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Domain("non-finite network parameter".into()));
                }
            }
            dim = layer.output_dim(dim);
        }
        if dim == 0 {
            return Err(Error::Domain("network output dimension must be positive".into()));
        }
        Ok(Network {
            name: name.into(),
            input_dim,
            output_dim: dim,
            layers,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Network::new("identity", dim, Vec::new()).expect("identity is valid")
    }

    /// Dimension of the value after each layer (length = number of layers).
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dim = self.input_dim;
        self.layers
            .iter()
            .map(|l| {
                dim = l.output_dim(dim);
                dim
            })
            .collect()
    }

    /// Random fully connected ReLU network with Gaussian weights.
    ///
    /// `widths` lists every dimension from input to output; a ReLU follows
    /// each affine layer except the last.
    pub fn random(name: impl Into<String>, widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (n_in, n_out) = (pair[0], pair[1]);
            let scale = (2.0 / n_in as f64).sqrt();
            let w = DMatrix::from_fn(n_out, n_in, |_, _| {
                rng.sample::<f64, _>(StandardNormal) * scale
            });
            let b = DVector::from_fn(n_out, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.1);
            layers.push(Layer::Affine(Affine { weights: w, bias: b }));
            if i + 2 < widths.len() {
                layers.push(Layer::Relu);
            }
        }
        Network::new(name, widths[0], layers).expect("random widths are consistent")
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::shape("network input", self.input_dim, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite network input".into()));
        }
        Ok(())
    }

    /// Exact layer-by-layer evaluation.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.eval(x))
    }

    /// Evaluation without input validation.
    pub(crate) fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.layers.iter().fold(x.clone(), |acc, l| l.apply(&acc))
    }

    /// Evaluates a batch stored column-wise.
    pub fn forward_batch(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xs.nrows() != self.input_dim {
            return Err(Error::shape("network batch input", self.input_dim, xs.nrows()));
        }
        let mut acc = xs.clone();
        for layer in &self.layers {
            acc = match layer {
                Layer::Affine(a) => {
                    let mut out = &a.weights * &acc;
                    for mut col in out.column_iter_mut() {
                        col += &a.bias;
                    }
                    out
                }
                Layer::Relu => acc.map(relu),
                Layer::Clamp01 => acc.map(clamp01),
                Layer::Clamp11 => acc.map(clamp11),
            };
        }
        Ok(acc)
    }

    /// Jacobian of every prefix network, ending after layer 1, 2, ..., L.
    pub fn layer_jacobians(&self, z: &DVector<f64>) -> Result<(Vec<DMatrix<f64>>, bool)> {
        self.check_input(z)?;
        let mut on_boundary = false;
        let mut value = z.clone();
        let mut jac = DMatrix::<f64>::identity(self.input_dim, self.input_dim);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Affine(a) => {
                    jac = &a.weights * &jac;
                }
                _ => {
                    for (i, &pre) in value.iter().enumerate() {
                        let (slope, tie) = activation_slope(layer, pre);
                        on_boundary |= tie;
                        if slope != 1.0 {
                            let mut row = jac.row_mut(i);
                            row *= slope;
                        }
                    }
                }
            }
            value = layer.apply(&value);
            out.push(jac.clone());
        }
        Ok((out, on_boundary))
    }

    /// Jacobian of the linear region containing `z`.
    pub fn jacobian(&self, z: &DVector<f64>) -> Result<Jacobian> {
        let (mut all, on_boundary) = self.layer_jacobians(z)?;
        let matrix = all
            .pop()
            .unwrap_or_else(|| DMatrix::identity(self.input_dim, self.input_dim));
        Ok(Jacobian {
            matrix,
            on_boundary,
        })
    }

    /// Numerical ranks of `J^(k)^T J^(k)` for every prefix `k`.
    pub fn prefix_gram_ranks(&self, z: &DVector<f64>) -> Result<Vec<usize>> {
        let (jacs, _) = self.layer_jacobians(z)?;
        Ok(jacs.iter().map(|j| numeric_rank(&j.tr_mul(j))).collect())
    }

    /// `f ∘ g`: evaluates `self` first, then `next`.
    pub fn then(&self, next: &Network) -> Result<Network> {
        compose(self, next)
    }

    /// Number of parameter-free (kinked) layers.
    pub fn activation_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !matches!(l, Layer::Affine(_)))
            .count()
    }
}

/// `f ∘ g` as a single network: the layer list of `g` followed by that of `f`.
pub fn compose(g: &Network, f: &Network) -> Result<Network> {
    if g.output_dim != f.input_dim {
        return Err(Error::shape("composition", g.output_dim, f.input_dim));
    }
    let layers = g.layers.iter().chain(f.layers.iter()).cloned().collect();
    Network::new(format!("{}∘{}", f.name, g.name), g.input_dim, layers)
}

// ---------------------------------------------------------------------------
// JSON file format

#[derive(Debug, Serialize, Deserialize)]
struct NetworkRecord {
    name: String,
    input_dim: usize,
    output_dim: usize,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerRecord {
    Affine {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights_file: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rows: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cols: Option<usize>,
        bias: Vec<f64>,
    },
    Relu,
    Clamp01,
    Clamp11,
}

/// Clamp layers expand to plain ReLU/affine layers on disk.
fn expand_clamps(layers: &[Layer], input_dim: usize) -> Vec<Layer> {
    let mut dim = input_dim;
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        match layer {
            Layer::Clamp01 | Layer::Clamp11 => {
                let peak = if matches!(layer, Layer::Clamp01) { 1.0 } else { 2.0 };
                out.push(Layer::Relu);
                out.push(Layer::Affine(Affine {
                    weights: -DMatrix::<f64>::identity(dim, dim),
                    bias: DVector::from_element(dim, peak),
                }));
                out.push(Layer::Relu);
                if matches!(layer, Layer::Clamp11) {
                    out.push(Layer::Affine(Affine {
                        weights: DMatrix::identity(dim, dim),
                        bias: DVector::from_element(dim, -1.0),
                    }));
                }
            }
            other => out.push(other.clone()),
        }
        dim = layer.output_dim(dim);
    }
    out
}

fn is_scaled_identity(a: &Affine, diag: f64, bias: f64) -> bool {
    let (r, c) = a.weights.shape();
    r == c
        && a.bias.iter().all(|&b| b == bias)
        && a
            .weights
            .iter()
            .enumerate()
            .all(|(k, &w)| w == if k % r == k / r { diag } else { 0.0 })
}

/// Folds the on-disk ReLU decompositions back into clamp layers.
fn fold_clamps(layers: Vec<Layer>) -> Vec<Layer> {
    let mut out = Vec::with_capacity(layers.len());
    let mut i = 0;
    while i < layers.len() {
        let window = &layers[i..];
        let matches_neg = |peak: f64| -> bool {
            window.len() >= 3
                && matches!(window[0], Layer::Relu)
                && matches!(&window[1], Layer::Affine(a) if is_scaled_identity(a, -1.0, peak))
                && matches!(window[2], Layer::Relu)
        };
        if matches_neg(2.0)
            && matches!(window.get(3), Some(Layer::Affine(a)) if is_scaled_identity(a, 1.0, -1.0))
        {
            out.push(Layer::Clamp11);
            i += 4;
        } else if matches_neg(1.0) {
            out.push(Layer::Clamp01);
            i += 3;
        } else {
            out.push(layers[i].clone());
            i += 1;
        }
    }
    out
}

fn read_sidecar(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "sidecar {} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

impl Network {
    /// Parses the JSON network format. Sidecar weight files are resolved
    /// relative to `base_dir`.
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self> {
        let record: NetworkRecord = serde_json::from_str(text)?;
        let mut layers = Vec::with_capacity(record.layers.len());
        for layer in record.layers {
            layers.push(match layer {
                LayerRecord::Relu => Layer::Relu,
                LayerRecord::Clamp01 => Layer::Clamp01,
                LayerRecord::Clamp11 => Layer::Clamp11,
                LayerRecord::Affine {
                    weights,
                    weights_file,
                    rows,
                    cols,
                    bias,
                } => {
                    let w = match (weights, weights_file) {
                        (Some(rows_vec), None) => {
                            let n_in = rows_vec.first().map_or(0, Vec::len);
                            if rows_vec.iter().any(|r| r.len() != n_in) {
                                return Err(Error::Format("ragged weight matrix".into()));
                            }
                            let flat: Vec<f64> = rows_vec.iter().flatten().copied().collect();
                            DMatrix::from_row_slice(rows_vec.len(), n_in, &flat)
                        }
                        (None, Some(file)) => {
                            let (r, c) = rows.zip(cols).ok_or_else(|| {
                                Error::Format("weights_file requires rows and cols".into())
                            })?;
                            read_sidecar(&base_dir.join(file), r, c)?
                        }
                        _ => {
                            return Err(Error::Format(
                                "affine layer needs exactly one of weights / weights_file".into(),
                            ))
                        }
                    };
                    Layer::Affine(Affine::new(w, DVector::from_vec(bias))?)
                }
            });
        }
        let net = Network::new(record.name, record.input_dim, fold_clamps(layers))?;
        if net.output_dim != record.output_dim {
            return Err(Error::shape("declared output_dim", record.output_dim, net.output_dim));
        }
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Network::from_json_str(&text, &base)
    }

    /// Serializes to a JSON value with every weight inline.
    pub fn to_json_value(&self) -> serde_json::Value {
        self.to_record(None).expect("inline serialization does not touch disk")
    }

    fn to_record(&self, sidecar: Option<(&Path, &str, usize)>) -> Result<serde_json::Value> {
        let mut layers = Vec::new();
        for (idx, layer) in expand_clamps(&self.layers, self.input_dim).iter().enumerate() {
            layers.push(match layer {
                Layer::Relu => LayerRecord::Relu,
                Layer::Affine(a) => {
                    let (r, c) = a.weights.shape();
                    let bias = a.bias.iter().copied().collect();
                    match sidecar {
                        Some((dir, stem, min_elems)) if r * c >= min_elems => {
                            let file = format!("{stem}.layer{idx}.bin");
                            let mut bytes = Vec::with_capacity(r * c * 4);
                            for i in 0..r {
                                for j in 0..c {
                                    bytes.extend_from_slice(&(a.weights[(i, j)] as f32).to_le_bytes());
                                }
                            }
                            fs::write(dir.join(&file), bytes)?;
                            LayerRecord::Affine {
                                weights: None,
                                weights_file: Some(file),
                                rows: Some(r),
                                cols: Some(c),
                                bias,
                            }
                        }
                        _ => LayerRecord::Affine {
                            weights: Some(
                                a.weights
                                    .row_iter()
                                    .map(|row| row.iter().copied().collect())
                                    .collect(),
                            ),
                            weights_file: None,
                            rows: None,
                            cols: None,
                            bias,
                        },
                    }
                }
                Layer::Clamp01 | Layer::Clamp11 => unreachable!("clamps are expanded"),
            });
        }
        Ok(serde_json::to_value(NetworkRecord {
            name: self.name.clone(),
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            layers,
        })?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(&self.to_json_value())?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Saves with every affine layer of at least `min_elements` weights moved
    /// to a little-endian f32 sidecar next to the JSON file.
    pub fn save_with_sidecar(&self, path: impl AsRef<Path>, min_elements: usize) -> Result<()> {
        let path = path.as_ref();
        let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("network")
            .to_string();
        let value = self.to_record(Some((&dir, &stem, min_elements)))?;
        fs::write(path, serde_json::to_string(&value)?)?;
        Ok(())
    }
}
