//! Fully-connected swish encoder with L2-normalized output, trained against
//! the ranking loss with a site-aware batch sampler.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortRecord, VIEWS_PER_PATCH};
use crate::numerics::{l2_norm, matmul, sgd_step, Matrix, NumericsError, Rng, SgdConfig};
use crate::rankloss::{ranking_loss, FeatureBatch, RankLossError};

const PARAMS_MAGIC: &[u8; 5] = b"SQRK1";

// Stream ids derived from the training seed.
const INIT_STREAM: u64 = 1;
const SAMPLER_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder spec: {0}")]
    Spec(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("batch composition impossible: {0}")]
    Composition(String),
    #[error("input has {got} columns, encoder expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("params file: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Loss(#[from] RankLossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Swish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            embed_dim,
            activation: Activation::Swish,
        }
    }

    /// 64 → [32] → 16.
    pub fn desk_default(input_dim: usize) -> Self {
        Self::new(input_dim, vec![32], 16)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(EncoderError::Spec(format!("all dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// (fan_in, fan_out) for each layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.embed_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }
}

/// Weights stored fan_in × fan_out, so a layer computes `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    spec: EncoderSpec,
    layers: Vec<Layer>,
}

impl EncoderParams {
    pub fn from_layers(spec: EncoderSpec, layers: Vec<Layer>) -> Result<Self, EncoderError> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(EncoderError::Spec(format!(
                "spec has {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (l, &(fan_in, fan_out)) in layers.iter().zip(&dims) {
            if l.weights.shape() != (fan_in, fan_out) || l.bias.shape() != (1, fan_out) {
                return Err(EncoderError::Spec(format!(
                    "layer shape {:?}/{:?} does not match {fan_in}->{fan_out}",
                    l.weights.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.data().len())
            .sum()
    }

    /// All parameters flattened in layer order, weights before bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Inverse of [`EncoderParams::flatten`].
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, EncoderError> {
        if flat.len() != self.n_params() {
            return Err(EncoderError::Spec(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (r, c) = l.weights.shape();
            let weights = Matrix::new(r, c, flat[offset..offset + r * c].to_vec())?;
            offset += r * c;
            let bias = Matrix::new(1, c, flat[offset..offset + c].to_vec())?;
            offset += c;
            layers.push(Layer { weights, bias });
        }
        Ok(Self {
            spec: self.spec.clone(),
            layers,
        })
    }
}

/// Per-layer gradients, shaped like [`EncoderParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

impl EncoderGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[inline]
pub fn swish(t: f64) -> f64 {
    t * sigmoid(t)
}

#[inline]
pub fn swish_grad(t: f64) -> f64 {
    let s = sigmoid(t);
    s + t * s * (1.0 - s)
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &EncoderSpec, rng: &mut Rng) -> Result<EncoderParams, EncoderError> {
    spec.validate()?;
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            Ok(Layer {
                weights: Matrix::new(fan_in, fan_out, data)?,
                bias: Matrix::zeros(1, fan_out),
            })
        })
        .collect::<Result<Vec<_>, NumericsError>>()?;
    EncoderParams::from_layers(spec.clone(), layers)
}

/// Activations kept for the backward pass.
struct ForwardCache {
    /// Input to each layer (x for layer 0).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
    output: Matrix,
}

fn affine(x: &Matrix, layer: &Layer) -> Result<Matrix, NumericsError> {
    let mut z = matmul(x, &layer.weights)?;
    let b = layer.bias.row(0);
    for r in 0..z.rows() {
        for (v, bias) in z.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(z)
}

fn forward_cached(params: &EncoderParams, x: &Matrix) -> Result<ForwardCache, EncoderError> {
    if x.cols() != params.spec.input_dim {
        return Err(EncoderError::InputDim {
            expected: params.spec.input_dim,
            got: x.cols(),
        });
    }
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut h = x.clone();
    for (idx, layer) in params.layers.iter().enumerate() {
        let z = affine(&h, layer)?;
        inputs.push(h);
        h = if idx + 1 < n_layers {
            let mut a = z.clone();
            for r in 0..a.rows() {
                a.row_mut(r).iter_mut().for_each(|v| *v = swish(*v));
            }
            a
        } else {
            crate::numerics::row_l2_normalize(&z)
        };
        pre.push(z);
    }
    Ok(ForwardCache { inputs, pre, output: h })
}

/// Unit-norm embeddings for each row of `x`.
pub fn forward(params: &EncoderParams, x: &Matrix) -> Result<Matrix, EncoderError> {
    Ok(forward_cached(params, x)?.output)
}

/// Reverse-mode gradient of a scalar loss with respect to every parameter,
/// given `grad_embeddings = d loss / d forward(params, x)`.
pub fn backward(params: &EncoderParams, x: &Matrix, grad_embeddings: &Matrix) -> Result<EncoderGrads, EncoderError> {
    let cache = forward_cached(params, x)?;
    if grad_embeddings.shape() != cache.output.shape() {
        return Err(NumericsError::Shape {
            op: "backward",
            lhs: cache.output.shape(),
            rhs: grad_embeddings.shape(),
        }
        .into());
    }
    let n_layers = params.layers.len();

    // Through the row normalization: dz = (g - u(u·g)) / |z|.
    let last = &cache.pre[n_layers - 1];
    let mut dz = Matrix::zeros(last.rows(), last.cols());
    for r in 0..last.rows() {
        let norm = l2_norm(last.row(r));
        if norm == 0.0 {
            continue;
        }
        let u = cache.output.row(r);
        let g = grad_embeddings.row(r);
        let radial: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for (d, (ui, gi)) in dz.row_mut(r).iter_mut().zip(u.iter().zip(g)) {
            *d = (gi - ui * radial) / norm;
        }
    }

    let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
    for idx in (0..n_layers).rev() {
        let layer = &params.layers[idx];
        let input = &cache.inputs[idx];
        let d_weights = matmul(&input.transpose(), &dz)?;
        let mut d_bias = Matrix::zeros(1, dz.cols());
        for r in 0..dz.rows() {
            for (b, v) in d_bias.row_mut(0).iter_mut().zip(dz.row(r)) {
                *b += v;
            }
        }
        grads.push(Layer {
            weights: d_weights,
            bias: d_bias,
        });
        if idx > 0 {
            let mut dh = matmul(&dz, &layer.weights.transpose())?;
            let z_prev = &cache.pre[idx - 1];
            for r in 0..dh.rows() {
                for (d, &z) in dh.row_mut(r).iter_mut().zip(z_prev.row(r)) {
                    *d *= swish_grad(z);
                }
            }
            dz = dh;
        }
    }
    grads.reverse();
    Ok(EncoderGrads { layers: grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub sequester: bool,
    pub seed: u64,
    pub min_sites_per_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            sequester: true,
            seed: 0,
            min_sites_per_batch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        self.sgd.validate()?;
        if self.sequester && self.sgd.batch_size < 2 * self.min_sites_per_batch {
            return Err(EncoderError::Config(format!(
                "batch_size {} < 2 × min_sites_per_batch {}",
                self.sgd.batch_size, self.min_sites_per_batch
            )));
        }
        Ok(())
    }
}

/// One batch: record indices plus the view chosen for each record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub records: Vec<usize>,
    pub views: Vec<usize>,
}

/// Batches for one epoch.
///
/// With sequestering off the records are shuffled and chunked. With it on,
/// each site's records are shuffled separately and dealt round-robin, so
/// consecutive records come from different sites; chunks that still end up
/// with fewer than `min_sites_per_batch` sites are dropped along with any
/// incomplete trailing chunk. Each record is used at most once and gets one
/// uniformly chosen view.
pub fn sample_batches(
    records: &[CohortRecord],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Batch>, EncoderError> {
    let batch_size = cfg.sgd.batch_size;
    if records.len() < batch_size {
        return Err(EncoderError::Composition(format!(
            "{} records cannot fill one batch of {batch_size}",
            records.len()
        )));
    }
    let mut rng = Rng::stream(cfg.seed, SAMPLER_STREAM_BASE + epoch as u64);

    let order: Vec<usize> = if cfg.sequester {
        let mut by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_site.entry(&r.site_id).or_default().push(i);
        }
        if by_site.len() < cfg.min_sites_per_batch {
            return Err(EncoderError::Composition(format!(
                "sequestering needs at least {} sites per batch but the data has {} site(s)",
                cfg.min_sites_per_batch,
                by_site.len()
            )));
        }
        let mut queues: Vec<Vec<usize>> = by_site.into_values().collect();
        rng.shuffle(&mut queues);
        for q in &mut queues {
            rng.shuffle(q);
        }
        let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
        let mut order = Vec::with_capacity(records.len());
        for round in 0..longest {
            for q in &queues {
                if let Some(&i) = q.get(round) {
                    order.push(i);
                }
            }
        }
        order
    } else {
        let mut order: Vec<usize> = (0..records.len()).collect();
        rng.shuffle(&mut order);
        order
    };

    let views: Vec<usize> = (0..records.len()).map(|_| rng.below(VIEWS_PER_PATCH)).collect();

    let mut batches = Vec::new();
    for chunk in order.chunks_exact(batch_size) {
        if cfg.sequester {
            let mut sites: Vec<&str> = chunk.iter().map(|&i| records[i].site_id.as_str()).collect();
            sites.sort_unstable();
            sites.dedup();
            if sites.len() < cfg.min_sites_per_batch {
                continue;
            }
        }
        batches.push(Batch {
            records: chunk.to_vec(),
            views: chunk.iter().map(|&i| views[i]).collect(),
        });
    }
    if batches.is_empty() {
        return Err(EncoderError::Composition(format!(
            "no batch of {batch_size} satisfies the {}-site constraint",
            cfg.min_sites_per_batch
        )));
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub params: EncoderParams,
}

/// Rows of the selected views, one per batch member.
pub fn batch_inputs(records: &[CohortRecord], batch: &Batch) -> Result<Matrix, NumericsError> {
    let rows: Vec<&[f64]> = batch
        .records
        .iter()
        .zip(&batch.views)
        .map(|(&i, &v)| records[i].views[v].as_slice())
        .collect();
    Matrix::from_rows(&rows)
}

/// Loss of the full pipeline for one batch, plus parameter gradients.
pub fn batch_loss_and_grads(
    params: &EncoderParams,
    x: &Matrix,
    labels: &[usize],
    sites: &[usize],
    n_classes: usize,
    sequester: bool,
) -> Result<(f64, EncoderGrads), EncoderError> {
    let embeddings = forward(params, x)?;
    let batch = FeatureBatch::new(embeddings, labels.to_vec(), sites.to_vec(), n_classes)?;
    let out = ranking_loss(&batch, sequester)?;
    let grads = backward(params, x, &out.grad_features)?;
    Ok((out.loss, grads))
}

/// Epoch loop of forward → ranking loss → backward → SGD step.
///
/// Deterministic given `cfg.seed`: weights come from one stream of the seed
/// and each epoch's batches from another.
pub fn train(cohort: &Cohort, spec: &EncoderSpec, cfg: &TrainConfig) -> Result<TrainLog, EncoderError> {
    cfg.validate()?;
    spec.validate()?;
    if cohort.is_empty() {
        return Err(EncoderError::Composition("cohort has no records".into()));
    }
    if cohort.dim() != spec.input_dim {
        return Err(EncoderError::InputDim {
            expected: spec.input_dim,
            got: cohort.dim(),
        });
    }
    let records = cohort.records();
    let site_of: Vec<usize> = records
        .iter()
        .map(|r| cohort.site_index(&r.site_id).expect("cohort validates sites"))
        .collect();

    let mut params = init_params(spec, &mut Rng::stream(cfg.seed, INIT_STREAM))?;
    let mut epoch_losses = Vec::with_capacity(cfg.sgd.epochs);
    for epoch in 0..cfg.sgd.epochs {
        let batches = sample_batches(records, cfg, epoch)?;
        let mut total = 0.0;
        for batch in &batches {
            let x = batch_inputs(records, batch)?;
            let labels: Vec<usize> = batch.records.iter().map(|&i| records[i].class_id).collect();
            let sites: Vec<usize> = batch.records.iter().map(|&i| site_of[i]).collect();
            let (loss, grads) =
                batch_loss_and_grads(&params, &x, &labels, &sites, cohort.n_classes(), cfg.sequester)?;
            total += loss;
            let layers = params
                .layers
                .iter()
                .zip(&grads.layers)
                .map(|(p, g)| {
                    Ok(Layer {
                        weights: sgd_step(&p.weights, &g.weights, &cfg.sgd)?,
                        bias: sgd_step(&p.bias, &g.bias, &cfg.sgd)?,
                    })
                })
                .collect::<Result<Vec<_>, NumericsError>>()?;
            params.layers = layers;
        }
        epoch_losses.push(total / batches.len() as f64);
    }
    Ok(TrainLog { epoch_losses, params })
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<(), EncoderError> {
    let v = u32::try_from(v).map_err(|_| EncoderError::Format(format!("dimension {v} exceeds u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<usize, EncoderError> {
    let mut buf = [0u8; 4];
    input
        .read_exact(&mut buf)
        .map_err(|e| EncoderError::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(buf) as usize)
}

/// Binary layout, little-endian:
/// `"SQRK1"`, u32 input_dim, u32 hidden count, u32 per hidden dim,
/// u32 embed_dim, then for each layer the fan_in×fan_out weights row-major
/// followed by the bias, all as f64.
pub fn write_params<W: Write>(params: &EncoderParams, mut out: W) -> Result<(), EncoderError> {
    out.write_all(PARAMS_MAGIC)?;
    let spec = &params.spec;
    write_u32(&mut out, spec.input_dim)?;
    write_u32(&mut out, spec.hidden_dims.len())?;
    for &h in &spec.hidden_dims {
        write_u32(&mut out, h)?;
    }
    write_u32(&mut out, spec.embed_dim)?;
    for v in params.flatten() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_params<R: Read>(mut input: R) -> Result<EncoderParams, EncoderError> {
    let mut magic = [0u8; 5];
    input
        .read_exact(&mut magic)
        .map_err(|_| EncoderError::Format("file too short for magic".into()))?;
    if &magic != PARAMS_MAGIC {
        return Err(EncoderError::Format(format!("bad magic {magic:?}")));
    }
    let input_dim = read_u32(&mut input)?;
    let n_hidden = read_u32(&mut input)?;
    if n_hidden > 1024 {
        return Err(EncoderError::Format(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden_dims = (0..n_hidden)
        .map(|_| read_u32(&mut input))
        .collect::<Result<Vec<_>, _>>()?;
    let embed_dim = read_u32(&mut input)?;
    let spec = EncoderSpec::new(input_dim, hidden_dims, embed_dim);
    spec.validate()?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let n_params: usize = spec.layer_dims().iter().map(|(i, o)| i * o + o).sum();
    if bytes.len() != n_params * 8 {
        return Err(EncoderError::Format(format!(
            "expected {} parameter bytes, found {}",
            n_params * 8,
            bytes.len()
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let zero = EncoderParams {
        layers: spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer {
                weights: Matrix::zeros(i, o),
                bias: Matrix::zeros(1, o),
            })
            .collect(),
        spec,
    };
    zero.with_flat(&flat)
}

pub fn save_params(params: &EncoderParams, path: &Path) -> Result<(), EncoderError> {
    write_params(params, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_params(path: &Path) -> Result<EncoderParams, EncoderError> {
    read_params(std::io::BufReader::new(std::fs::File::open(path)?))
}
