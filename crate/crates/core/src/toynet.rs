//! Bias-free dense ReLU network used to check compression algebra end to end.
//!
//! Layer `i` maps a batch `X (n x d)` to `act(X Wᵢᵀ)`. Hidden layers use ReLU
//! and the last layer is linear. Random nets draw weights i.i.d. from
//! `U[-1, 1]` with a ChaCha8 stream seeded by the caller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compress::{compress_pair, Mapping};
use crate::error::{Error, Result};
use crate::matrix::WeightMatrix;
use crate::projection::{fold_rows, mask_rows, ClusterAssignment, PruneSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Identity => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMlp {
    layers: Vec<WeightMatrix>,
    activations: Vec<Activation>,
}

impl ToyMlp {
    pub fn new(layers: Vec<WeightMatrix>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::Shape(format!(
                "{} layers with {} activations",
                layers.len(),
                activations.len()
            )));
        }
        if activations.last() != Some(&Activation::Identity) {
            return Err(Error::Shape("last layer must be linear".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return Err(Error::Shape(format!(
                    "layer {} expects {} inputs but layer {i} emits {}",
                    i + 1,
                    pair[1].cols(),
                    pair[0].rows()
                )));
            }
        }
        Ok(Self { layers, activations })
    }

    /// ReLU on every layer but the last.
    pub fn relu(layers: Vec<WeightMatrix>) -> Result<Self> {
        let n = layers.len();
        let acts = (0..n)
            .map(|i| {
                if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                }
            })
            .collect();
        Self::new(layers, acts)
    }

    /// `dims = [d, h1, ..., c]`; weights i.i.d. `U[-1, 1]`.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!(
                "need at least two positive dims, got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|d| {
                let data = (0..d[0] * d[1]).map(|_| rng.random_range(-1.0..=1.0)).collect();
                WeightMatrix::new(d[1], d[0], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::relu(layers)
    }

    pub fn layers(&self) -> &[WeightMatrix] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").rows()
    }

    /// Copy with layer `idx` replaced; the shape must be unchanged.
    pub fn with_layer(&self, idx: usize, w: WeightMatrix) -> Result<Self> {
        let old = self.layer_at(idx)?;
        if old.shape() != w.shape() {
            return Err(Error::Shape(format!(
                "replacement for layer {idx} is {}x{}, expected {}x{}",
                w.rows(),
                w.cols(),
                old.rows(),
                old.cols()
            )));
        }
        let mut net = self.clone();
        net.layers[idx] = w;
        Ok(net)
    }

    fn layer_at(&self, idx: usize) -> Result<&WeightMatrix> {
        self.layers
            .get(idx)
            .ok_or_else(|| Error::Shape(format!("no layer {idx} in a {}-layer net", self.layers.len())))
    }

    /// Forward pass over a batch `x (n x d)`.
    pub fn forward(&self, x: &WeightMatrix) -> Result<WeightMatrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, net expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut h = x.clone();
        for (w, &act) in self.layers.iter().zip(&self.activations) {
            let mut next = WeightMatrix::zeros(h.rows(), w.rows());
            for s in 0..h.rows() {
                let input = h.row(s);
                for o in 0..w.rows() {
                    let z: f64 = w.row(o).iter().zip(input).map(|(a, b)| a * b).sum();
                    next.set(s, o, act.apply(z));
                }
            }
            h = next;
        }
        Ok(h)
    }

    /// Network with layer `idx` and its successor replaced by a compressed pair.
    fn with_compressed_pair(&self, idx: usize, mapping: &Mapping) -> Result<Self> {
        let w = self.layer_at(idx)?;
        let next = self
            .layer_at(idx + 1)
            .map_err(|_| Error::Shape(format!("layer {idx} has no successor to absorb the merge")))?;
        let pair = compress_pair(w, next, mapping)?;
        let mut net = self.clone();
        net.layers[idx] = pair.layer;
        net.layers[idx + 1] = pair.next;
        Ok(net)
    }
}

/// Inputs and regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub inputs: WeightMatrix,
    pub targets: WeightMatrix,
}

impl EvalBatch {
    pub fn new(inputs: WeightMatrix, targets: WeightMatrix) -> Result<Self> {
        if inputs.rows() == 0 || inputs.rows() != targets.rows() {
            return Err(Error::Shape(format!(
                "{} inputs vs {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    /// `n` inputs from `U[-scale, scale]` and targets from `U[-1, 1]`.
    pub fn random(n: usize, input_dim: usize, output_dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..n * input_dim)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        let targets = (0..n * output_dim)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        Self::new(
            WeightMatrix::new(n, input_dim, inputs)?,
            WeightMatrix::new(n, output_dim, targets)?,
        )
    }
}

/// Mean of squared residuals over all `n x c` outputs.
pub fn mse_loss(net: &ToyMlp, batch: &EvalBatch) -> Result<f64> {
    let out = net.forward(&batch.inputs)?;
    if out.shape() != batch.targets.shape() {
        return Err(Error::Shape(format!(
            "net emits {}x{} but targets are {}x{}",
            out.rows(),
            out.cols(),
            batch.targets.rows(),
            batch.targets.cols()
        )));
    }
    let sse = crate::analysis::recon_error_sq(&out, &batch.targets)?;
    Ok(sse / out.data().len() as f64)
}

fn max_abs_diff(a: &WeightMatrix, b: &WeightMatrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Largest output gap between the full-size folded net and the merged net.
///
/// Folding makes rows within a cluster identical, so their activations are
/// identical and the successor can sum the corresponding columns.
pub fn fold_equivalence_check(
    net: &ToyMlp,
    layer_idx: usize,
    a: &ClusterAssignment,
    inputs: &WeightMatrix,
) -> Result<f64> {
    let folded = net.with_layer(layer_idx, fold_rows(a, net.layer_at(layer_idx)?)?)?;
    let merged = net.with_compressed_pair(layer_idx, &Mapping::Folded(a.clone()))?;
    Ok(max_abs_diff(&folded.forward(inputs)?, &merged.forward(inputs)?))
}

/// Largest output gap between the zero-masked net and the physically pruned net.
pub fn prune_equivalence_check(
    net: &ToyMlp,
    layer_idx: usize,
    sel: &PruneSelection,
    inputs: &WeightMatrix,
) -> Result<f64> {
    let masked = net.with_layer(layer_idx, mask_rows(sel, net.layer_at(layer_idx)?)?)?;
    let dropped = net.with_compressed_pair(layer_idx, &Mapping::Pruned(sel.clone()))?;
    Ok(max_abs_diff(&masked.forward(inputs)?, &dropped.forward(inputs)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPerturbation {
    /// `‖W − W_c‖_F` for the compressed layer.
    pub param_dist: f64,
    /// `|L(W) − L(W_c)|`.
    pub loss_delta: f64,
}

/// Parameter distance and loss change when layer `layer_idx` is replaced by
/// its full-size projection under `mapping`.
pub fn loss_perturbation(
    net: &ToyMlp,
    layer_idx: usize,
    mapping: &Mapping,
    batch: &EvalBatch,
) -> Result<LossPerturbation> {
    let w = net.layer_at(layer_idx)?;
    let projected = mapping.project(w)?;
    let param_dist = crate::analysis::recon_error_sq(w, &projected)?.sqrt();
    let base = mse_loss(net, batch)?;
    let compressed = mse_loss(&net.with_layer(layer_idx, projected)?, batch)?;
    Ok(LossPerturbation {
        param_dist,
        loss_delta: (base - compressed).abs(),
    })
}

/// Largest `|L(W + E) − L(W)| / ‖E‖_F` over `samples` random directions `E`
/// on layer `layer_idx`, each scaled to Frobenius norm `radius`.
///
/// This is a local, sampled estimate of the loss Lipschitz constant at the
/// given radius, not a bound.
pub fn local_lipschitz_estimate(
    net: &ToyMlp,
    layer_idx: usize,
    batch: &EvalBatch,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidValue(format!(
            "radius must be positive, got {radius}"
        )));
    }
    let w = net.layer_at(layer_idx)?;
    let base = mse_loss(net, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0_f64;
    for _ in 0..samples {
        let dir: Vec<f64> = (0..w.data().len())
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let data = w
            .data()
            .iter()
            .zip(&dir)
            .map(|(a, d)| a + d * radius / norm)
            .collect();
        let perturbed = net.with_layer(layer_idx, WeightMatrix::new(w.rows(), w.cols(), data)?)?;
        best = best.max((mse_loss(&perturbed, batch)? - base).abs() / radius);
    }
    Ok(best)
}

/// JSON net spec for the CLI demo: `{"dims": [d, h1, ..., c], "seed": 0}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub dims: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}
