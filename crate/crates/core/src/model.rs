//! Model manifests, weight files and the per-layer forward kernels.
//!
//! A manifest is a JSON document:
//!
//! ```json
//! {"name": "fraud", "input_dim": 28,
//!  "layers": [{"type": "dense", "units": 256, "activation": "relu",
//!              "weights": "l0.w", "bias": "l0.b"}]}
//! ```
//!
//! Image models give `"input_shape": [H, W, C]` instead of `input_dim`.
//! Weight files are raw little-endian f64, row-major, with no header. Dense
//! weights are `units x in` and a dense layer computes `X W^T + b`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::error::{Error, Result};
use crate::ir::estimate;
use crate::linalg::{conv2d_lowered, embedding_lookup, BlockSize, EmbeddingReduce, EmbeddingTable, Representation};
use crate::relational::ExecContext;
use crate::tensor::{apply_activation, dense_add, dense_matmul, transpose, ActivationKind, DenseTensor};

/// Shape of the value flowing between layers, per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Vector(usize),
    Image { h: usize, w: usize, c: usize },
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Vector(n) => n,
            Shape::Image { h, w, c } => h * w * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Image { h, w, c } => write!(f, "[{h}x{w}x{c}]"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub units: usize,
    pub in_dim: usize,
    pub activation: ActivationKind,
    weights: Option<DenseTensor>,
    bias: Option<DenseTensor>,
    weights_t: OnceLock<DenseTensor>,
}

impl DenseLayer {
    fn weights(&self) -> Result<&DenseTensor> {
        self.weights.as_ref().ok_or_else(|| Error::Plan("model has no weights loaded".into()))
    }

    pub fn bias(&self) -> Result<&DenseTensor> {
        self.bias.as_ref().ok_or_else(|| Error::Plan("model has no weights loaded".into()))
    }

    /// `W^T`, `in x units`, computed once.
    pub fn weights_t(&self) -> Result<&DenseTensor> {
        if let Some(t) = self.weights_t.get() {
            return Ok(t);
        }
        let t = transpose(self.weights()?)?;
        Ok(self.weights_t.get_or_init(|| t))
    }

    /// Rows `start..start + len` of `W^T`, i.e. the transpose of the column
    /// slice `W[:, start..start + len]`.
    pub fn weights_t_rows(&self, start: usize, len: usize) -> Result<DenseTensor> {
        let wt = self.weights_t()?;
        if len == 0 || start + len > self.in_dim {
            return Err(Error::invalid(format!("weight column slice {start}+{len} of {}", self.in_dim)));
        }
        DenseTensor::matrix(len, self.units, wt.data()[start * self.units..(start + len) * self.units].to_vec())
    }

    pub fn matmul(&self, ctx: &ExecContext, x: &DenseTensor) -> Result<DenseTensor> {
        let wt = self.weights_t()?;
        ctx.install(|| dense_matmul(x, wt))
    }

    pub fn add_bias(&self, x: &DenseTensor) -> Result<DenseTensor> {
        dense_add(x, self.bias()?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2DLayer {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub activation: ActivationKind,
    kernels: Option<DenseTensor>,
    bias: Option<DenseTensor>,
}

impl Conv2DLayer {
    /// Convolves every row of `x` (a flattened `input` image) and applies
    /// the activation per output position.
    pub fn forward(
        &self,
        ctx: &ExecContext,
        x: &DenseTensor,
        input: Shape,
        representation: Representation,
        block: BlockSize,
    ) -> Result<DenseTensor> {
        let Shape::Image { h, w, c } = input else {
            return Err(Error::Plan("conv2d needs an image input".into()));
        };
        let (kernels, bias) = match (&self.kernels, &self.bias) {
            (Some(k), Some(b)) => (k, b),
            _ => return Err(Error::Plan("model has no weights loaded".into())),
        };
        let (oh, ow) = (h - self.kernel_h + 1, w - self.kernel_w + 1);
        let mut out = Vec::with_capacity(x.rows() * oh * ow * self.out_channels);
        for r in 0..x.rows() {
            let image = DenseTensor::new(vec![h, w, c], x.row(r).to_vec())?;
            let y = conv2d_lowered(ctx, &image, kernels, bias, representation, block)?;
            let y = y.reshape(vec![oh * ow, self.out_channels])?;
            out.extend(apply_activation(&y, self.activation)?.into_data());
        }
        DenseTensor::matrix(x.rows(), oh * ow * self.out_channels, out)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingLayer {
    pub dict_size: usize,
    pub dim: usize,
    pub reduce: EmbeddingReduce,
    table: Option<DenseTensor>,
}

impl EmbeddingLayer {
    pub fn table(&self) -> Result<&DenseTensor> {
        self.table.as_ref().ok_or_else(|| Error::Plan("model has no weights loaded".into()))
    }

    /// Looks up each row's ids, which arrive as integral floats.
    pub fn forward(&self, x: &DenseTensor, table: EmbeddingTable<'_>) -> Result<DenseTensor> {
        let mut out = Vec::new();
        for r in 0..x.rows() {
            let ids = x
                .row(r)
                .iter()
                .map(|&v| {
                    if v.fract() != 0.0 || !v.is_finite() {
                        Err(Error::invalid(format!("embedding id {v} is not an integer")))
                    } else {
                        Ok(v as i64)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let t = match &table {
                EmbeddingTable::Dense(t) => EmbeddingTable::Dense(t),
                EmbeddingTable::Relation(rel) => EmbeddingTable::Relation(rel),
            };
            out.extend(embedding_lookup(t, &ids, self.reduce)?.into_data());
        }
        let width = out.len() / x.rows();
        DenseTensor::matrix(x.rows(), width, out)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    Conv2D(Conv2DLayer),
    Flatten,
    Embedding(EmbeddingLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2D(_) => "conv2d",
            Layer::Flatten => "flatten",
            Layer::Embedding(_) => "embedding",
        }
    }
}

#[derive(Clone)]
pub struct Model {
    pub name: String,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
    loaded: bool,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Model({})", self.name)
    }
}

/// Models compare by identity.
impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self, other)
    }
}

impl Model {
    pub fn input(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output(&self) -> Shape {
        *self.shapes.last().expect("shape chain is never empty")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// `shapes()[i]` is the input of layer `i`; the last entry is the output.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn has_weights(&self) -> bool {
        self.loaded
    }

    /// Whole-model forward pass over a `batch x input` matrix with every
    /// operator in its dense form.
    pub fn forward(&self, ctx: &ExecContext, x: &DenseTensor) -> Result<DenseTensor> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Dense(d) => {
                    let y = d.add_bias(&d.matmul(ctx, &cur)?)?;
                    apply_activation(&y, d.activation)?
                }
                Layer::Conv2D(c) => c.forward(ctx, &cur, self.shapes[i], Representation::Udf, BlockSize::new(1, 1))?,
                Layer::Flatten => cur,
                Layer::Embedding(e) => e.forward(&cur, EmbeddingTable::Dense(e.table()?))?,
            };
        }
        Ok(cur)
    }

    pub fn forward_row(&self, ctx: &ExecContext, features: &[f64]) -> Result<Vec<f64>> {
        let x = DenseTensor::matrix(1, features.len(), features.to_vec())?;
        Ok(self.forward(ctx, &x)?.into_data())
    }

    /// Builds a model from a manifest. Weight files are resolved against
    /// `base` when `base` is given; without it only shapes are registered.
    pub fn from_manifest(manifest: &Manifest, base: Option<&Path>) -> Result<Model> {
        let input = match (manifest.input_dim, manifest.input_shape) {
            (Some(n), None) if n > 0 => Shape::Vector(n),
            (None, Some([h, w, c])) if h > 0 && w > 0 && c > 0 => Shape::Image { h, w, c },
            (None, None) => return Err(Error::load(None, "input_dim", "missing input_dim or input_shape")),
            (Some(_), Some(_)) => return Err(Error::load(None, "input_dim", "give input_dim or input_shape, not both")),
            _ => return Err(Error::load(None, "input_dim", "input dimensions must be positive")),
        };
        if manifest.layers.is_empty() {
            return Err(Error::load(None, "layers", "model has no layers"));
        }
        let mut shapes = vec![input];
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for (i, spec) in manifest.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let (layer, out) = build_layer(i, spec, cur, base)?;
            shapes.push(out);
            layers.push(layer);
        }
        if let Shape::Image { .. } = shapes.last().unwrap() {
            return Err(Error::load(
                Some(layers.len() - 1),
                "type",
                "model output is an image; end with flatten or dense",
            ));
        }
        Ok(Model {
            name: manifest.name.clone(),
            layers,
            shapes,
            loaded: base.is_some(),
        })
    }

    /// Reads a manifest file and every weight file it names.
    pub fn load(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::load(None, "manifest", format!("{}: {e}", path.display())))?;
        let manifest = Manifest::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Model::from_manifest(&manifest, Some(base))
    }

    /// Writes the manifest and weight files into `dir` and returns the
    /// manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        if !self.loaded {
            return Err(Error::invalid(format!("model `{}` has no weights to save", self.name)));
        }
        fs::create_dir_all(dir)?;
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let write = |suffix: &str, t: &DenseTensor| -> Result<String> {
                let name = format!("{}_{i}.{suffix}", self.name);
                write_weights(&dir.join(&name), t.data())?;
                Ok(name)
            };
            specs.push(match layer {
                Layer::Dense(d) => LayerSpec::Dense {
                    units: d.units,
                    activation: d.activation,
                    weights: Some(write("w", d.weights()?)?),
                    bias: Some(write("b", d.bias()?)?),
                },
                Layer::Conv2D(c) => LayerSpec::Conv2d {
                    out_channels: c.out_channels,
                    kernel_h: c.kernel_h,
                    kernel_w: c.kernel_w,
                    activation: c.activation,
                    weights: Some(write("w", c.kernels.as_ref().unwrap())?),
                    bias: Some(write("b", c.bias.as_ref().unwrap())?),
                },
                Layer::Flatten => LayerSpec::Flatten,
                Layer::Embedding(e) => LayerSpec::Embedding {
                    dict_size: e.dict_size,
                    dim: e.dim,
                    reduce: e.reduce,
                    weights: Some(write("w", e.table()?)?),
                },
            });
        }
        let manifest = Manifest {
            name: self.name.clone(),
            input_dim: match self.input() {
                Shape::Vector(n) => Some(n),
                Shape::Image { .. } => None,
            },
            input_shape: match self.input() {
                Shape::Image { h, w, c } => Some([h, w, c]),
                Shape::Vector(_) => None,
            },
            layers: specs,
        };
        let path = dir.join(format!("{}.json", self.name));
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        Ok(path)
    }

    /// A dense-only model from in-memory weights, `(W: units x in, b, act)`
    /// per layer.
    pub fn dense(name: &str, layers: Vec<(DenseTensor, DenseTensor, ActivationKind)>) -> Result<Model> {
        let first = layers.first().ok_or_else(|| Error::load(None, "layers", "model has no layers"))?;
        let mut shapes = vec![Shape::Vector(first.0.cols())];
        let mut out = Vec::new();
        for (i, (w, b, act)) in layers.into_iter().enumerate() {
            let (units, in_dim) = w.expect_rank2("dense weights")?;
            if Shape::Vector(in_dim) != *shapes.last().unwrap() {
                return Err(Error::load(Some(i), "weights", format!("expects {in_dim} inputs, previous layer gives {}", shapes.last().unwrap())));
            }
            if b.len() != units {
                return Err(Error::load(Some(i), "bias", format!("{} entries for {units} units", b.len())));
            }
            shapes.push(Shape::Vector(units));
            out.push(Layer::Dense(DenseLayer {
                units,
                in_dim,
                activation: act,
                weights: Some(w),
                bias: Some(DenseTensor::new(vec![units], b.into_data())?),
                weights_t: OnceLock::new(),
            }));
        }
        Ok(Model {
            name: name.to_string(),
            layers: out,
            shapes,
            loaded: true,
        })
    }

    /// Same layer structure as `other`.
    pub fn same_shape(&self, other: &Model) -> bool {
        self.shapes == other.shapes
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (Layer::Dense(x), Layer::Dense(y)) => x.activation == y.activation,
                (Layer::Conv2D(x), Layer::Conv2D(y)) => {
                    (x.kernel_h, x.kernel_w, x.activation) == (y.kernel_h, y.kernel_w, y.activation)
                }
                (Layer::Flatten, Layer::Flatten) => true,
                (Layer::Embedding(x), Layer::Embedding(y)) => (x.dict_size, x.reduce) == (y.dict_size, y.reduce),
                _ => false,
            })
    }
}

fn default_activation() -> ActivationKind {
    ActivationKind::Identity
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default = "default_activation")]
        activation: ActivationKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        #[serde(default = "default_activation")]
        activation: ActivationKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Flatten,
    Embedding {
        dict_size: usize,
        dim: usize,
        #[serde(default)]
        reduce: EmbeddingReduce,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<String>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<[usize; 3]>,
    pub layers: Vec<LayerSpec>,
}

impl Manifest {
    /// Parses manifest text, reporting layer-level problems with the layer
    /// index and the offending field.
    pub fn parse(text: &str) -> Result<Manifest> {
        let doc: Json = serde_json::from_str(text).map_err(|e| Error::load(None, "manifest", e.to_string()))?;
        let Json::Object(mut obj) = doc else {
            return Err(Error::load(None, "manifest", "manifest must be a JSON object"));
        };
        let layers = match obj.remove("layers") {
            Some(Json::Array(items)) => items,
            Some(_) => return Err(Error::load(None, "layers", "layers must be an array")),
            None => return Err(Error::load(None, "layers", "missing field")),
        };
        let specs = layers
            .into_iter()
            .enumerate()
            .map(|(i, v)| serde_json::from_value::<LayerSpec>(v).map_err(|e| Error::load(Some(i), field_of(&e), e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        obj.insert("layers".into(), Json::Array(Vec::new()));
        let mut m: Manifest =
            serde_json::from_value(Json::Object(obj)).map_err(|e| Error::load(None, field_of(&e), e.to_string()))?;
        m.layers = specs;
        Ok(m)
    }
}

fn field_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    let mut parts = msg.split('`');
    match (parts.next(), parts.next()) {
        (Some(pre), Some(name)) if pre.contains("field") => name.to_string(),
        _ if msg.contains("variant") || msg.contains("tag") => "type".to_string(),
        _ => "spec".to_string(),
    }
}

fn build_layer(i: usize, spec: &LayerSpec, cur: Shape, base: Option<&Path>) -> Result<(Layer, Shape)> {
    let read = |field: &str, file: &Option<String>, len: usize, shape: Vec<usize>| -> Result<Option<DenseTensor>> {
        let Some(base) = base else { return Ok(None) };
        let file = file.as_ref().ok_or_else(|| Error::load(Some(i), field, "weight file not given"))?;
        let data = read_weights(&base.join(file), len).map_err(|m| Error::load(Some(i), field, m))?;
        Ok(Some(DenseTensor::new(shape, data).expect("length checked")))
    };
    match spec {
        LayerSpec::Dense { units, activation, weights, bias } => {
            let Shape::Vector(in_dim) = cur else {
                return Err(Error::load(Some(i), "type", format!("dense layer needs a vector input, got {cur}")));
            };
            if *units == 0 {
                return Err(Error::load(Some(i), "units", "units must be positive"));
            }
            let layer = DenseLayer {
                units: *units,
                in_dim,
                activation: *activation,
                weights: read("weights", weights, units * in_dim, vec![*units, in_dim])?,
                bias: read("bias", bias, *units, vec![*units])?,
                weights_t: OnceLock::new(),
            };
            Ok((Layer::Dense(layer), Shape::Vector(*units)))
        }
        LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, activation, weights, bias } => {
            let Shape::Image { h, w, c } = cur else {
                return Err(Error::load(Some(i), "type", format!("conv2d layer needs an image input, got {cur}")));
            };
            if *out_channels == 0 || *kernel_h == 0 || *kernel_w == 0 {
                return Err(Error::load(Some(i), "out_channels", "conv2d sizes must be positive"));
            }
            if *kernel_h > h || *kernel_w > w {
                return Err(Error::load(Some(i), "kernel_h", format!("{kernel_h}x{kernel_w} kernel on a {h}x{w} image")));
            }
            let per = kernel_h * kernel_w * c;
            let layer = Conv2DLayer {
                out_channels: *out_channels,
                kernel_h: *kernel_h,
                kernel_w: *kernel_w,
                in_channels: c,
                activation: *activation,
                kernels: read("weights", weights, out_channels * per, vec![*out_channels, *kernel_h, *kernel_w, c])?,
                bias: read("bias", bias, *out_channels, vec![*out_channels])?,
            };
            let out = Shape::Image { h: h - kernel_h + 1, w: w - kernel_w + 1, c: *out_channels };
            Ok((Layer::Conv2D(layer), out))
        }
        LayerSpec::Flatten => Ok((Layer::Flatten, Shape::Vector(cur.len()))),
        LayerSpec::Embedding { dict_size, dim, reduce, weights } => {
            let Shape::Vector(m) = cur else {
                return Err(Error::load(Some(i), "type", format!("embedding layer needs a vector of ids, got {cur}")));
            };
            if *dict_size == 0 || *dim == 0 {
                return Err(Error::load(Some(i), "dim", "embedding sizes must be positive"));
            }
            let layer = EmbeddingLayer {
                dict_size: *dict_size,
                dim: *dim,
                reduce: *reduce,
                table: read("weights", weights, dict_size * dim, vec![*dict_size, *dim])?,
            };
            let out = match reduce {
                EmbeddingReduce::None => m * dim,
                EmbeddingReduce::Sum => *dim,
            };
            Ok((Layer::Embedding(layer), Shape::Vector(out)))
        }
    }
}

/// Reads exactly `len` little-endian f64 values.
pub fn read_weights(path: &Path, len: usize) -> std::result::Result<Vec<f64>, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.len() != len * 8 {
        return Err(format!("{}: expected {} bytes, found {}", path.display(), len * 8, bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_weights(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Class label of one output vector: argmax for several outputs (lowest
/// index on ties), `>= 0.5` for a single output.
pub fn class_label(outputs: &[f64]) -> i64 {
    match outputs {
        [p] => i64::from(*p >= 0.5),
        _ => {
            let mut best = 0;
            for (i, v) in outputs.iter().enumerate() {
                if *v > outputs[best] {
                    best = i;
                }
            }
            best as i64
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerDiagnostics {
    pub index: usize,
    pub kind: &'static str,
    pub input: Shape,
    pub output: Shape,
    pub weight_params: u64,
    pub bias_params: u64,
    pub weight_bytes: u64,
    pub param_bytes: u64,
    pub est_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelDiagnostics {
    pub name: String,
    pub batch: u64,
    pub shapes: Vec<Shape>,
    pub layers: Vec<LayerDiagnostics>,
    pub total_param_bytes: u64,
}

/// Shape chain, parameter sizes and the memory estimate of each layer's
/// main operator at `batch` rows.
pub fn validate_model(m: &Model, batch: u64) -> ModelDiagnostics {
    let layers: Vec<LayerDiagnostics> = m
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let (input, output) = (m.shapes[i], m.shapes[i + 1]);
            let (weights, bias, est) = match layer {
                Layer::Dense(d) => (
                    (d.units * d.in_dim) as u64,
                    d.units as u64,
                    estimate::matmul(batch, d.in_dim as u64, d.units as u64),
                ),
                Layer::Conv2D(c) => {
                    let Shape::Image { h, w, c: ch } = input else { unreachable!("checked at load") };
                    (
                        (c.out_channels * c.kernel_h * c.kernel_w * ch) as u64,
                        c.out_channels as u64,
                        estimate::conv2d(batch, (h, w, ch), (c.out_channels, c.kernel_h, c.kernel_w)),
                    )
                }
                Layer::Flatten => (0, 0, estimate::unary(batch, input.len() as u64)),
                Layer::Embedding(e) => (
                    (e.dict_size * e.dim) as u64,
                    0,
                    estimate::embedding(batch, e.dict_size as u64, e.dim as u64, input.len() as u64, output.len() as u64),
                ),
            };
            LayerDiagnostics {
                index: i,
                kind: layer.kind(),
                input,
                output,
                weight_params: weights,
                bias_params: bias,
                weight_bytes: weights * estimate::ELEMENT_BYTES,
                param_bytes: (weights + bias) * estimate::ELEMENT_BYTES,
                est_bytes: est,
            }
        })
        .collect();
    ModelDiagnostics {
        name: m.name.clone(),
        batch,
        shapes: m.shapes.clone(),
        total_param_bytes: layers.iter().map(|l| l.param_bytes).sum(),
        layers,
    }
}

/// Shared handle used by plans.
pub type ModelRef = Arc<Model>;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn write_fc(dir: &Path, name: &str, dims: &[usize], seed: u64) -> PathBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            write_weights(&dir.join(format!("{i}.w")), &random(&mut rng, w[0] * w[1])).unwrap();
            write_weights(&dir.join(format!("{i}.b")), &random(&mut rng, w[1])).unwrap();
            let act = if i + 2 == dims.len() { "softmax" } else { "relu" };
            layers.push(format!(
                r#"{{"type":"dense","units":{},"activation":"{act}","weights":"{i}.w","bias":"{i}.b"}}"#,
                w[1]
            ));
        }
        let path = dir.join(format!("{name}.json"));
        let text = format!(r#"{{"name":"{name}","input_dim":{},"layers":[{}]}}"#, dims[0], layers.join(","));
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn fraud_shaped_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fc(dir.path(), "fraud", &[28, 256, 2], 1);
        assert_eq!(fs::metadata(dir.path().join("0.w")).unwrap().len(), 57_344);
        let m = Model::load(&path).unwrap();
        assert_eq!(m.shapes(), &[Shape::Vector(28), Shape::Vector(256), Shape::Vector(2)]);
        assert!(m.has_weights());
    }

    #[test]
    fn encoder_shaped_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::load(&write_fc(dir.path(), "enc", &[76, 3072, 768], 2)).unwrap();
        assert_eq!(m.layers().len(), 2);
        assert_eq!(m.output(), Shape::Vector(768));
    }

    #[test]
    fn unit_count_mismatch_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        write_weights(&dir.path().join("w"), &[0.0; 9]).unwrap();
        write_weights(&dir.path().join("b"), &[0.0; 4]).unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, r#"{"name":"m","input_dim":3,"layers":[{"type":"dense","units":4,"weights":"w","bias":"b"}]}"#)
            .unwrap();
        match Model::load(&path) {
            Err(Error::Load { layer: Some(0), field, .. }) => assert_eq!(field, "weights"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_errors_are_precise() {
        let cases = [
            (r#"{"name":"m","input_dim":3,"layers":[{"type":"dense"}]}"#, Some(0), "units"),
            (r#"{"name":"m","input_dim":3,"layers":[{"type":"pool"}]}"#, Some(0), "type"),
            (r#"{"name":"m","layers":[{"type":"flatten"}]}"#, None, "input_dim"),
            (
                r#"{"name":"m","input_dim":3,"layers":[{"type":"flatten"},{"type":"conv2d","out_channels":1,"kernel_h":1,"kernel_w":1}]}"#,
                Some(1),
                "type",
            ),
        ];
        for (text, layer, field) in cases {
            let r = Manifest::parse(text).and_then(|m| Model::from_manifest(&m, None));
            match r {
                Err(Error::Load { layer: l, field: f, .. }) => assert_eq!((l, f.as_str()), (layer, field), "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn save_and_reload_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::load(&write_fc(dir.path(), "m", &[5, 4, 3], 3)).unwrap();
        let out = tempfile::tempdir().unwrap();
        let again = Model::load(&m.save(out.path()).unwrap()).unwrap();
        for (a, b) in m.layers().iter().zip(again.layers()) {
            let (Layer::Dense(a), Layer::Dense(b)) = (a, b) else { panic!() };
            assert_eq!(a.weights().unwrap(), b.weights().unwrap());
            assert_eq!(a.bias().unwrap(), b.bias().unwrap());
        }
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::load(&write_fc(dir.path(), "m", &[6, 5, 3], 4)).unwrap();
        let w0 = read_weights(&dir.path().join("0.w"), 30).unwrap();
        let b0 = read_weights(&dir.path().join("0.b"), 5).unwrap();
        let w1 = read_weights(&dir.path().join("1.w"), 15).unwrap();
        let b1 = read_weights(&dir.path().join("1.b"), 3).unwrap();
        let x = [0.5, -1.0, 0.25, 2.0, 0.0, -0.75];
        let h: Vec<f64> = (0..5)
            .map(|u| (0..6).fold(0.0, |s, k| s + x[k] * w0[u * 6 + k]) + b0[u])
            .map(|v: f64| v.max(0.0))
            .collect();
        let z: Vec<f64> = (0..3).map(|u| (0..5).fold(0.0, |s, k| s + h[k] * w1[u * 5 + k]) + b1[u]).collect();
        let e: Vec<f64> = z.iter().map(|v| (v - z.iter().cloned().fold(f64::MIN, f64::max)).exp()).collect();
        let want: Vec<f64> = e.iter().map(|v| v / e.iter().sum::<f64>()).collect();
        let ctx = ExecContext::unbounded().unwrap();
        let got = m.forward_row(&ctx, &x).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn diagnostics_arithmetic() {
        let amazon = Manifest::parse(
            r#"{"name":"amazon","input_dim":597540,"layers":[
                {"type":"dense","units":1024,"activation":"relu"},
                {"type":"dense","units":14588,"activation":"softmax"}]}"#,
        )
        .unwrap();
        let m = Model::from_manifest(&amazon, None).unwrap();
        assert!(!m.has_weights());
        let d = validate_model(&m, 1000);
        assert_eq!(d.layers[0].weight_bytes, 4_895_047_680);
        assert_eq!(d.layers[0].est_bytes, 9_683_559_680);

        let land = Manifest::parse(
            r#"{"name":"land","input_shape":[2500,2500,3],"layers":[
                {"type":"conv2d","out_channels":2048,"kernel_h":1,"kernel_w":1},{"type":"flatten"}]}"#,
        )
        .unwrap();
        let d = validate_model(&Model::from_manifest(&land, None).unwrap(), 1);
        assert_eq!(d.layers[0].weight_params + d.layers[0].bias_params, 8192);
        assert_eq!(d.layers[1].param_bytes, 0);
    }

    #[test]
    fn class_labels() {
        assert_eq!(class_label(&[0.2, 0.8]), 1);
        assert_eq!(class_label(&[0.5, 0.5]), 0);
        assert_eq!(class_label(&[0.5]), 1);
        assert_eq!(class_label(&[0.49]), 0);
        assert_eq!(class_label(&[0.1, 0.2, 0.7]), 2);
    }
}
