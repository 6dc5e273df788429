//! Analytic multiply-accumulate and activation-memory accounting.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::ModelConfig;

/// Activation tensor `[n, c, d, h, w]`; 2D layers treat `n * d` as the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub n: u64,
    pub c: u64,
    pub d: u64,
    pub h: u64,
    pub w: u64,
}

impl Shape {
    pub fn volume(slices: u64, height: u64, width: u64) -> Self {
        Self {
            n: 1,
            c: 1,
            d: slices,
            h: height,
            w: width,
        }
    }

    pub fn elements(&self) -> u64 {
        self.n * self.c * self.d * self.h * self.w
    }
}

fn out_len(len: u64, k: u64, stride: u64, pad: u64) -> Result<u64> {
    if stride == 0 || len + 2 * pad < k {
        return Err(Error::Shape(format!("kernel {k} does not fit length {len} with padding {pad}")));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Applied to every slice independently.
    Conv2d { cout: u64, k: u64, stride: u64, pad: u64 },
    Conv3d { cout: u64, k: u64, kd: u64, stride: u64, stride_d: u64, pad: u64, pad_d: u64 },
    /// Normalization, activation and other elementwise layers: no MACs, shape kept.
    Elementwise,
    MaxPool2d { k: u64, stride: u64, pad: u64 },
    /// Spatial mean to `[n, c, d, 1, 1]`.
    GlobalAvgPool,
    /// Spatial and depth mean to `[n, c, 1, 1, 1]`.
    GlobalAvgPool3d,
    /// Per-position `fan_in -> fan_out` map over the channel axis.
    Linear { fan_out: u64 },
}

/// MACs and parameters of one layer, and its output shape.
pub fn layer_cost(layer: &LayerSpec, x: Shape) -> Result<(u64, u64, Shape)> {
    Ok(match *layer {
        LayerSpec::Conv2d { cout, k, stride, pad } => {
            let (h, w) = (out_len(x.h, k, stride, pad)?, out_len(x.w, k, stride, pad)?);
            let out = Shape { c: cout, h, w, ..x };
            (x.c * cout * k * k * h * w * x.n * x.d, x.c * cout * k * k, out)
        }
        LayerSpec::Conv3d { cout, k, kd, stride, stride_d, pad, pad_d } => {
            let (h, w) = (out_len(x.h, k, stride, pad)?, out_len(x.w, k, stride, pad)?);
            let d = out_len(x.d, kd, stride_d, pad_d)?;
            let out = Shape { c: cout, d, h, w, ..x };
            (x.c * cout * k * k * kd * d * h * w * x.n, x.c * cout * k * k * kd, out)
        }
        LayerSpec::Elementwise => (0, 0, x),
        LayerSpec::MaxPool2d { k, stride, pad } => {
            let (h, w) = (out_len(x.h, k, stride, pad)?, out_len(x.w, k, stride, pad)?);
            (0, 0, Shape { h, w, ..x })
        }
        LayerSpec::GlobalAvgPool => (0, 0, Shape { h: 1, w: 1, ..x }),
        LayerSpec::GlobalAvgPool3d => (0, 0, Shape { d: 1, h: 1, w: 1, ..x }),
        LayerSpec::Linear { fan_out } => {
            let positions = x.n * x.d * x.h * x.w;
            (x.c * fan_out * positions, x.c * fan_out, Shape { c: fan_out, ..x })
        }
    })
}

/// Cost of a sequential stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackCost {
    pub macs: u64,
    pub params: u64,
    /// Input plus every layer output, all retained (training schedule).
    pub retained_elements: u64,
    /// Largest `input + output` pair of a single layer (streaming schedule).
    pub streaming_elements: u64,
    pub output: Shape,
}

pub fn stack_cost(layers: &[LayerSpec], input: Shape) -> Result<StackCost> {
    let mut cost = StackCost {
        macs: 0,
        params: 0,
        retained_elements: input.elements(),
        streaming_elements: input.elements(),
        output: input,
    };
    for l in layers {
        let (macs, params, out) = layer_cost(l, cost.output)?;
        cost.macs += macs;
        cost.params += params;
        cost.retained_elements += out.elements();
        cost.streaming_elements = cost.streaming_elements.max(cost.output.elements() + out.elements());
        cost.output = out;
    }
    Ok(cost)
}

/// Parses a layer list; unknown kinds are rejected with the offending name.
pub fn parse_layers(json: &str) -> Result<Vec<LayerSpec>> {
    serde_json::from_str(json).map_err(|e| Error::Config(format!("layer list: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gmic3d,
    Dense2d,
    Dense3d,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmic3d" => Ok(ModelKind::Gmic3d),
            "dense2d" => Ok(ModelKind::Dense2d),
            "dense3d" => Ok(ModelKind::Dense3d),
            _ => config_err(format!("unknown model `{s}` (expected gmic3d, dense2d or dense3d)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: ModelKind,
    pub input: Shape,
    pub total_macs: u64,
    pub modules: Vec<ModuleCost>,
    /// Activations retained for a backward pass.
    pub peak_activation_bytes: u64,
    /// Forward-only peak when slices are streamed one at a time.
    pub streaming_activation_bytes: u64,
    pub parameters: u64,
    pub element_bytes: u64,
}

impl CostReport {
    pub fn module(&self, name: &str) -> Option<u64> {
        self.modules.iter().find(|m| m.name == name).map(|m| m.macs)
    }

    pub fn summary(&self) -> CostSummary {
        CostSummary {
            macs: self.total_macs as f64,
            memory: self.peak_activation_bytes as f64,
        }
    }
}

fn block_layers(widths: &[usize], strides: &[usize]) -> Vec<LayerSpec> {
    widths
        .iter()
        .zip(strides)
        .flat_map(|(&w, &s)| {
            [
                LayerSpec::Conv2d {
                    cout: w as u64,
                    k: 3,
                    stride: s as u64,
                    pad: 1,
                },
                LayerSpec::Elementwise,
            ]
        })
        .collect()
}

/// Global backbone and segmentation layer applied to every slice.
pub fn gmic3d_global_layers(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut l = block_layers(&cfg.global.widths, &cfg.global.strides);
    l.push(LayerSpec::Linear { fan_out: 2 });
    l
}

pub fn gmic3d_local_layers(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut l = block_layers(&cfg.local.widths, &cfg.local.strides);
    l.push(LayerSpec::GlobalAvgPool);
    l
}

/// `K` patches through the gated attention: two `L x S` projections, the
/// scoring vector, and the weighted sum.
pub fn attention_macs(k: u64, l: u64, s: u64) -> u64 {
    k * (2 * l * s + l + s)
}

pub fn count_gmic3d(cfg: &ModelConfig, input: Shape, element_bytes: u64) -> Result<CostReport> {
    let global = stack_cost(&gmic3d_global_layers(cfg), input)?;
    let per_slice = stack_cost(&gmic3d_global_layers(cfg), Shape { d: 1, ..input })?;
    let k = cfg.num_patches as u64;
    let p = cfg.patch_size as u64;
    let patches = Shape {
        n: 1,
        c: 1,
        d: k,
        h: p,
        w: p,
    };
    let local = stack_cost(&gmic3d_local_layers(cfg), patches)?;
    let s = cfg.encoding_dim() as u64;
    let l = cfg.attention_hidden as u64;
    let attention = attention_macs(k, l, s);
    let heads = 2 * s;
    let saliency = global.output.elements();
    // Streaming: one slice of the global module at a time while the saliency
    // map of every slice accumulates, then the local module.
    let streaming = (per_slice.streaming_elements + saliency).max(saliency + local.streaming_elements);
    Ok(CostReport {
        model: ModelKind::Gmic3d,
        input,
        total_macs: global.macs + local.macs + attention + heads,
        modules: vec![
            ModuleCost { name: "global".into(), macs: global.macs },
            ModuleCost { name: "local".into(), macs: local.macs },
            ModuleCost { name: "attention".into(), macs: attention },
            ModuleCost { name: "heads".into(), macs: heads },
        ],
        peak_activation_bytes: (global.retained_elements + local.retained_elements + k * (2 * l + 1) + s + 2) * element_bytes,
        streaming_activation_bytes: streaming * element_bytes,
        parameters: global.params + local.params + 2 * l * s + l + 2 * s,
        element_bytes,
    })
}

/// Residual-style dense 2D network: stem, four stages of two 3x3 blocks, applied
/// to every slice, then a linear classifier on the averaged features.
pub fn dense2d_layers(widths: &[u64]) -> Vec<LayerSpec> {
    let mut l = vec![
        LayerSpec::Conv2d { cout: widths[0], k: 7, stride: 2, pad: 3 },
        LayerSpec::Elementwise,
        LayerSpec::MaxPool2d { k: 3, stride: 2, pad: 1 },
    ];
    for (i, &w) in widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        for b in 0..2 {
            for j in 0..2 {
                l.push(LayerSpec::Conv2d {
                    cout: w,
                    k: 3,
                    stride: if b == 0 && j == 0 { stride } else { 1 },
                    pad: 1,
                });
                l.push(LayerSpec::Elementwise);
            }
        }
    }
    l.push(LayerSpec::GlobalAvgPool3d);
    l.push(LayerSpec::Linear { fan_out: 2 });
    l
}

/// Same stage layout with 3x3x3 kernels striding over depth as well.
pub fn dense3d_layers(widths: &[u64]) -> Vec<LayerSpec> {
    let mut l = vec![
        LayerSpec::Conv3d { cout: widths[0], k: 7, kd: 3, stride: 2, stride_d: 1, pad: 3, pad_d: 1 },
        LayerSpec::Elementwise,
        LayerSpec::MaxPool2d { k: 3, stride: 2, pad: 1 },
    ];
    for (i, &w) in widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        for b in 0..2 {
            for j in 0..2 {
                let first = b == 0 && j == 0;
                l.push(LayerSpec::Conv3d {
                    cout: w,
                    k: 3,
                    kd: 3,
                    stride: if first { stride } else { 1 },
                    stride_d: if first { stride } else { 1 },
                    pad: 1,
                    pad_d: 1,
                });
                l.push(LayerSpec::Elementwise);
            }
        }
    }
    l.push(LayerSpec::GlobalAvgPool3d);
    l.push(LayerSpec::Linear { fan_out: 2 });
    l
}

pub fn count_dense(kind: ModelKind, widths: &[u64], input: Shape, element_bytes: u64) -> Result<CostReport> {
    let layers = match kind {
        ModelKind::Dense2d => dense2d_layers(widths),
        ModelKind::Dense3d => dense3d_layers(widths),
        ModelKind::Gmic3d => return config_err("use count_gmic3d for the gmic3d profile"),
    };
    let c = stack_cost(&layers, input)?;
    let streaming = if kind == ModelKind::Dense2d {
        stack_cost(&layers, Shape { d: 1, ..input })?.streaming_elements
    } else {
        c.streaming_elements
    };
    Ok(CostReport {
        model: kind,
        input,
        total_macs: c.macs,
        modules: vec![ModuleCost {
            name: "dense".into(),
            macs: c.macs,
        }],
        peak_activation_bytes: c.retained_elements * element_bytes,
        streaming_activation_bytes: streaming * element_bytes,
        parameters: c.params,
        element_bytes,
    })
}

/// Named geometry for the profiler.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub model: ModelConfig,
    pub height: u64,
    pub width: u64,
    pub dense_widths: Vec<u64>,
}

impl Profile {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            height: 96,
            width: 96,
            dense_widths: vec![16, 32, 64, 128],
        }
    }

    /// Full-size images (2116 x 1339) and widths of an 18-layer residual network.
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            height: 2116,
            width: 1339,
            dense_widths: vec![64, 128, 256, 512],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" | "desk-scale" => Ok(Self::desk()),
            "paper" | "paper-scale" => Ok(Self::paper()),
            _ => config_err(format!("unknown profile `{name}` (expected desk or paper)")),
        }
    }

    pub fn count(&self, kind: ModelKind, slices: u64) -> Result<CostReport> {
        if slices == 0 {
            return config_err("slice count must be positive");
        }
        let input = Shape::volume(slices, self.height, self.width);
        match kind {
            ModelKind::Gmic3d => count_gmic3d(&self.model, input, 4),
            _ => count_dense(kind, &self.dense_widths, input, 4),
        }
    }
}

/// Least-squares line through `(slices, value)` evaluated at `target`.
pub fn extrapolate_linear(points: &[(f64, f64)], target: f64) -> Result<f64> {
    // Raw sums rather than centred ones: with integer slice counts and costs
    // every intermediate is an exact integer, so exact lines are reproduced exactly.
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let den = n * sxx - sx * sx;
    if points.len() < 2 || den == 0.0 {
        return config_err("extrapolation needs at least two distinct slice counts");
    }
    let slope = (n * sxy - sx * sy) / den;
    let intercept = (sy - slope * sx) / n;
    Ok(intercept + slope * target)
}

/// MACs and memory of one model, possibly taken from a published table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub macs: f64,
    pub memory: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    pub macs_percent: f64,
    pub memory_percent: f64,
}

pub fn savings_percent(a: f64, b: f64) -> f64 {
    100.0 * (1.0 - a / b)
}

/// Percentage saved by `a` relative to `b`.
pub fn compare(a: &CostSummary, b: &CostSummary) -> Savings {
    Savings {
        macs_percent: savings_percent(a.macs, b.macs),
        memory_percent: savings_percent(a.memory, b.memory),
    }
}

/// Like [`compare`], for reports on the same input.
pub fn compare_reports(a: &CostReport, b: &CostReport) -> Result<Savings> {
    if a.input != b.input {
        return Err(Error::Shape(format!("inputs differ: {:?} vs {:?}", a.input, b.input)));
    }
    Ok(compare(&a.summary(), &b.summary()))
}

/// Share of the input's pixels the local module sees, in percent.
pub fn local_pixel_percent(cfg: &ModelConfig, input: Shape) -> f64 {
    let covered = (cfg.num_patches * cfg.patch_size * cfg.patch_size) as f64;
    100.0 * covered / (input.d * input.h * input.w) as f64
}
