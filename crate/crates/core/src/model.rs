//! Network representation: parsing, serialization, weight truncation,
//! concrete evaluation and pairing of two same-topology networks.
//!
//! Weight matrices are stored source-major: `weights[[i, j]]` is the edge
//! from neuron `i` of the previous layer to neuron `j` of this layer, so a
//! layer maps `h` to `weights^T . h + bias`. Every layer except the last is
//! followed by a ReLU; the output layer is affine.

use crate::error::{Error, Result};
use half::f16;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Self {
        Self { weights, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }
}

/// Input/output normalization carried by NNet headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_range: Vec<f64>,
    pub output_mean: f64,
    pub output_range: f64,
}

impl Normalization {
    /// Clamp a raw input to the recorded domain and map it to network units.
    pub fn normalize_input(&self, i: usize, raw: f64) -> f64 {
        let clamped = raw.clamp(self.input_min[i], self.input_max[i]);
        (clamped - self.input_mean[i]) / self.input_range[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_count: usize,
    layers: Vec<Layer>,
    normalization: Option<Normalization>,
}

impl Network {
    /// Build a network, checking that layer shapes chain and every value is finite.
    pub fn new(input_count: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_count == 0 {
            return Err(Error::ShapeChain("network has zero inputs".into()));
        }
        if layers.is_empty() {
            return Err(Error::ShapeChain("network has no layers".into()));
        }
        let mut width = input_count;
        for (k, layer) in layers.iter().enumerate() {
            if layer.inputs() != width {
                return Err(Error::ShapeChain(format!(
                    "layer {} expects {} inputs but previous layer has {} neurons",
                    k + 1,
                    layer.inputs(),
                    width
                )));
            }
            if layer.outputs() == 0 {
                return Err(Error::ShapeChain(format!("layer {} has zero neurons", k + 1)));
            }
            if layer.bias.len() != layer.outputs() {
                return Err(Error::ShapeChain(format!(
                    "layer {} has {} neurons but {} biases",
                    k + 1,
                    layer.outputs(),
                    layer.bias.len()
                )));
            }
            if let Some(((i, j), v)) = layer.weights.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "weight [{}, {}] of layer {} is {}",
                    i + 1,
                    j + 1,
                    k + 1,
                    v
                )));
            }
            if let Some((j, v)) = layer.bias.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "bias {} of layer {} is {}",
                    j + 1,
                    k + 1,
                    v
                )));
            }
            width = layer.outputs();
        }
        Ok(Self {
            input_count,
            layers,
            normalization: None,
        })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = Some(normalization);
        self
    }

    pub fn input_count(&self) -> usize {
        self.input_count
    }

    pub fn output_count(&self) -> usize {
        self.layers.last().map(Layer::outputs).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of ReLU layers (all layers but the output layer).
    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Layer widths including the input layer.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_count)
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    pub fn same_topology(&self, other: &Network) -> bool {
        self.layer_sizes() == other.layer_sizes()
    }

    /// Concrete forward execution.
    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_count {
            return Err(Error::Dimension {
                expected: self.input_count,
                actual: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = Array1::from(x.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.weights.t().dot(&h) + &layer.bias;
            if k < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h.to_vec())
    }

    /// Round every weight and bias to IEEE-754 binary16 (round to nearest,
    /// ties to even) and widen back to f64.
    pub fn truncate_weights(&self, bits: u32) -> Result<Network> {
        if bits != 16 {
            return Err(Error::UnsupportedWidth(bits));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut weights = layer.weights.clone();
            for ((i, j), w) in weights.indexed_iter_mut() {
                *w = round_to_half(*w).ok_or(Error::HalfOverflow {
                    layer: k + 1,
                    index: format!("weight [{}, {}]", i + 1, j + 1),
                    value: *w,
                })?;
            }
            let mut bias = layer.bias.clone();
            for (j, b) in bias.iter_mut().enumerate() {
                *b = round_to_half(*b).ok_or(Error::HalfOverflow {
                    layer: k + 1,
                    index: format!("bias {}", j + 1),
                    value: *b,
                })?;
            }
            layers.push(Layer::new(weights, bias));
        }
        Ok(Network {
            input_count: self.input_count,
            layers,
            normalization: self.normalization.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        let doc = JsonNetwork {
            inputs: self.input_count,
            layers: self
                .layers
                .iter()
                .map(|l| JsonLayer {
                    weights: l.weights.outer_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            normalization: self.normalization.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("network serialization cannot fail")
    }

    /// Serialize in NNet text form (rows are target neurons, as in the format).
    pub fn to_nnet(&self) -> String {
        let sizes = self.layer_sizes();
        let max = sizes.iter().copied().max().unwrap_or(0);
        let mut out = String::new();
        let join = |vals: &mut dyn Iterator<Item = f64>| {
            vals.map(|v| format!("{v:?},")).collect::<String>()
        };
        out.push_str("// Written by diffcert\n");
        let _ = writeln!(
            out,
            "{},{},{},{},",
            self.layers.len(),
            self.input_count,
            self.output_count(),
            max
        );
        let _ = writeln!(
            out,
            "{}",
            sizes.iter().map(|s| format!("{s},")).collect::<String>()
        );
        out.push_str("0,\n");
        let norm = self.normalization.clone().unwrap_or_else(|| Normalization {
            input_min: vec![f64::MIN; self.input_count],
            input_max: vec![f64::MAX; self.input_count],
            input_mean: vec![0.0; self.input_count],
            input_range: vec![1.0; self.input_count],
            output_mean: 0.0,
            output_range: 1.0,
        });
        let _ = writeln!(out, "{}", join(&mut norm.input_min.iter().copied()));
        let _ = writeln!(out, "{}", join(&mut norm.input_max.iter().copied()));
        let mut means = norm.input_mean.clone();
        means.push(norm.output_mean);
        let mut ranges = norm.input_range.clone();
        ranges.push(norm.output_range);
        let _ = writeln!(out, "{}", join(&mut means.into_iter()));
        let _ = writeln!(out, "{}", join(&mut ranges.into_iter()));
        for layer in &self.layers {
            for col in layer.weights.columns() {
                let _ = writeln!(out, "{}", join(&mut col.iter().copied()));
            }
            for b in &layer.bias {
                let _ = writeln!(out, "{b:?},");
            }
        }
        out
    }
}

fn round_to_half(v: f64) -> Option<f64> {
    let h = f16::from_f64(v);
    if h.is_infinite() && v.is_finite() {
        None
    } else {
        Some(h.to_f64())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkFormat {
    Nnet,
    Json,
}

impl NetworkFormat {
    /// Guess from the file extension; anything but `.json` is read as NNet.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => Self::Json,
            _ => Self::Nnet,
        }
    }
}

pub fn parse_network(source: &str, format: NetworkFormat) -> Result<Network> {
    match format {
        NetworkFormat::Nnet => parse_nnet(source),
        NetworkFormat::Json => parse_json(source),
    }
}

pub fn load_network(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        line: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_network(&text, NetworkFormat::from_path(path))
}

#[derive(Serialize, Deserialize)]
struct JsonNetwork {
    inputs: usize,
    layers: Vec<JsonLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<Normalization>,
}

#[derive(Serialize, Deserialize)]
struct JsonLayer {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

fn parse_json(source: &str) -> Result<Network> {
    let doc: JsonNetwork = serde_json::from_str(source).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (k, l) in doc.layers.into_iter().enumerate() {
        let rows = l.weights.len();
        let cols = l.weights.first().map(Vec::len).unwrap_or(0);
        if let Some(r) = l.weights.iter().position(|r| r.len() != cols) {
            return Err(Error::ShapeChain(format!(
                "layer {} weight row {} has {} entries, expected {}",
                k + 1,
                r + 1,
                l.weights[r].len(),
                cols
            )));
        }
        let flat: Vec<f64> = l.weights.into_iter().flatten().collect();
        let weights = Array2::from_shape_vec((rows, cols), flat)
            .map_err(|e| Error::ShapeChain(format!("layer {}: {e}", k + 1)))?;
        layers.push(Layer::new(weights, Array1::from(l.bias)));
    }
    let net = Network::new(doc.inputs, layers)?;
    Ok(match doc.normalization {
        Some(n) => net.with_normalization(n),
        None => net,
    })
}

/// Line-oriented tokenizer over the non-comment lines of an NNet file.
struct NnetLines<'a> {
    lines: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
}

impl<'a> NnetLines<'a> {
    fn new(source: &'a str) -> Self {
        let iter: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> = Box::new(
            source
                .lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with("//")),
        );
        Self {
            lines: iter.peekable(),
        }
    }

    fn next_values(&mut self, what: &str) -> Result<(usize, Vec<f64>)> {
        let (line, text) = self.lines.next().ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("unexpected end of file while reading {what}"),
        })?;
        let values = text
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric token '{t}' in {what}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((line, values))
    }

    fn expect_len(&mut self, n: usize, what: &str) -> Result<(usize, Vec<f64>)> {
        let (line, values) = self.next_values(what)?;
        if values.len() != n {
            return Err(Error::Parse {
                line,
                message: format!("{what}: expected {n} values, found {}", values.len()),
            });
        }
        Ok((line, values))
    }
}

fn as_count(v: f64, line: usize, what: &str) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("{what} must be a non-negative integer, found {v}"),
        });
    }
    Ok(v as usize)
}

fn parse_nnet(source: &str) -> Result<Network> {
    let mut lines = NnetLines::new(source);
    let (line, header) = lines.expect_len(4, "header (layers, inputs, outputs, max size)")?;
    let num_layers = as_count(header[0], line, "layer count")?;
    let inputs = as_count(header[1], line, "input size")?;
    let outputs = as_count(header[2], line, "output size")?;
    if num_layers == 0 {
        return Err(Error::Parse {
            line,
            message: "network must have at least one layer".into(),
        });
    }

    let (line, raw_sizes) = lines.expect_len(num_layers + 1, "layer sizes")?;
    let sizes = raw_sizes
        .iter()
        .map(|&v| as_count(v, line, "layer size"))
        .collect::<Result<Vec<_>>>()?;
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::ShapeChain(format!(
            "line {line}: layer {k} has zero neurons"
        )));
    }
    if sizes[0] != inputs || sizes[num_layers] != outputs {
        return Err(Error::ShapeChain(format!(
            "line {line}: layer sizes {sizes:?} disagree with header ({inputs} inputs, {outputs} outputs)"
        )));
    }

    lines.next_values("symmetric flag")?;
    let (_, input_min) = lines.expect_len(inputs, "input minimums")?;
    let (_, input_max) = lines.expect_len(inputs, "input maximums")?;
    let (line, mut input_mean) = lines.next_values("input means")?;
    let (_, mut input_range) = lines.next_values("input ranges")?;
    let output_mean = split_output_stat(&mut input_mean, inputs, line, "means")?;
    let output_range = split_output_stat(&mut input_range, inputs, line + 1, "ranges")?;

    let mut layers = Vec::with_capacity(num_layers);
    for k in 0..num_layers {
        let (rows, cols) = (sizes[k], sizes[k + 1]);
        let mut weights = Array2::zeros((rows, cols));
        for j in 0..cols {
            let (_, row) = lines.expect_len(rows, &format!("layer {} weight row {}", k + 1, j + 1))?;
            for (i, w) in row.into_iter().enumerate() {
                weights[[i, j]] = w;
            }
        }
        let mut bias = Array1::zeros(cols);
        for j in 0..cols {
            let (_, b) = lines.expect_len(1, &format!("layer {} bias {}", k + 1, j + 1))?;
            bias[j] = b[0];
        }
        layers.push(Layer::new(weights, bias));
    }
    if let Some((line, _)) = lines.lines.next() {
        return Err(Error::Parse {
            line,
            message: "trailing data after last layer".into(),
        });
    }

    let norm = Normalization {
        input_min,
        input_max,
        input_mean,
        input_range,
        output_mean,
        output_range,
    };
    Ok(Network::new(inputs, layers)?.with_normalization(norm))
}

fn split_output_stat(values: &mut Vec<f64>, inputs: usize, line: usize, what: &str) -> Result<f64> {
    match values.len() {
        n if n == inputs + 1 => Ok(values.pop().expect("non-empty")),
        n if n == inputs => Ok(if what == "ranges" { 1.0 } else { 0.0 }),
        n => Err(Error::Parse {
            line,
            message: format!("input {what}: expected {} values, found {n}", inputs + 1),
        }),
    }
}

/// Axis-aligned box of network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl InputBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension {
                expected: lo.len(),
                actual: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(Error::InvalidBox("box has no dimensions".into()));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::InvalidBox(format!("dimension {} is not finite", i + 1)));
            }
            if l > h {
                return Err(Error::InvalidBox(format!(
                    "dimension {}: lower {l} exceeds upper {h}",
                    i + 1
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// The box `[lo, hi]^dims`.
    pub fn uniform(dims: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dims], vec![hi; dims])
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Split dimension `dim` at its midpoint.
    pub fn bisect(&self, dim: usize) -> (InputBox, InputBox) {
        let mid = 0.5 * (self.lo[dim] + self.hi[dim]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[dim] = mid;
        right.lo[dim] = mid;
        (left, right)
    }

    /// Map a raw-units box into network units using NNet normalization.
    pub fn normalized(&self, norm: &Normalization) -> Result<InputBox> {
        if norm.input_mean.len() != self.dims() {
            return Err(Error::Dimension {
                expected: norm.input_mean.len(),
                actual: self.dims(),
            });
        }
        let lo = (0..self.dims()).map(|i| norm.normalize_input(i, self.lo[i])).collect();
        let hi = (0..self.dims()).map(|i| norm.normalize_input(i, self.hi[i])).collect();
        InputBox::new(lo, hi)
    }
}

/// Two same-topology networks and their element-wise parameter differences.
#[derive(Debug, Clone)]
pub struct NetworkPair {
    original: Network,
    variant: Network,
    weight_delta: Vec<Array2<f64>>,
    bias_delta: Vec<Array1<f64>>,
}

impl NetworkPair {
    pub fn new(original: Network, variant: Network) -> Result<Self> {
        if !original.same_topology(&variant) {
            return Err(Error::TopologyMismatch(format!(
                "layer sizes {:?} vs {:?}",
                original.layer_sizes(),
                variant.layer_sizes()
            )));
        }
        let (weight_delta, bias_delta) = original
            .layers
            .iter()
            .zip(&variant.layers)
            .map(|(a, b)| (&b.weights - &a.weights, &b.bias - &a.bias))
            .unzip();
        Ok(Self {
            original,
            variant,
            weight_delta,
            bias_delta,
        })
    }

    pub fn original(&self) -> &Network {
        &self.original
    }

    pub fn variant(&self) -> &Network {
        &self.variant
    }

    pub fn weight_delta(&self, layer: usize) -> &Array2<f64> {
        &self.weight_delta[layer]
    }

    pub fn bias_delta(&self, layer: usize) -> &Array1<f64> {
        &self.bias_delta[layer]
    }

    pub fn input_count(&self) -> usize {
        self.original.input_count()
    }

    pub fn output_count(&self) -> usize {
        self.original.output_count()
    }
}

pub fn pair(original: Network, variant: Network) -> Result<NetworkPair> {
    NetworkPair::new(original, variant)
}
