//! Layers, architecture descriptions and the model built from them.
//!
//! An architecture is plain data: a [`ModelConfig`] holding an ordered list
//! of [`LayerSpec`]s. [`ModelConfig::propagate`] walks that list
//! symbolically from the `[1, 8000]` input so that every intermediate shape
//! and parameter count is known before any weight is allocated.

pub mod activation;
pub mod conv;
pub mod head;
mod model;
pub mod pool;
pub mod weights;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{Gradients, Model, ParamInfo, ParamRole, Trace};

/// Samples per input clip (1 s at 8 kHz).
pub const INPUT_LEN: usize = 8000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WithInception,
    WithoutInception,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::WithInception => "with_inception",
            Variant::WithoutInception => "without_inception",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::WithInception => 0,
            Variant::WithoutInception => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::WithInception),
            1 => Some(Variant::WithoutInception),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_inception" => Ok(Variant::WithInception),
            "without_inception" => Ok(Variant::WithoutInception),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected with_inception or without_inception)"
            ))),
        }
    }
}

/// How the final feature map becomes class logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Final conv emits one channel per class, then global average pooling.
    #[default]
    GlobalAverage,
    /// Final conv keeps its tabulated width, then flatten + fully connected.
    Dense,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::GlobalAverage => "global_average",
            HeadKind::Dense => "dense",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global_average" | "gap" => Ok(HeadKind::GlobalAverage),
            "dense" => Ok(HeadKind::Dense),
            other => Err(Error::Config(format!(
                "unknown head {other:?} (expected global_average or dense)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Conv2d {
        channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: Padding,
    },
    MaxPool1d {
        kernel: usize,
        stride: usize,
    },
    MaxPool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Relu,
    /// Parallel branches over the same input, concatenated channel-wise.
    InceptionNucleus {
        branches: Vec<Vec<LayerSpec>>,
    },
    /// `[C, T]` → single-channel image `[1, C, T]`.
    ReshapeChannelsFirst,
    /// Global average pooling over the spatial axes.
    ClassHead,
    /// Flatten + fully connected.
    Dense {
        units: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool1d { .. } => "maxpool1d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::InceptionNucleus { .. } => "inception_nucleus",
            LayerSpec::ReshapeChannelsFirst => "reshape_channels_first",
            LayerSpec::ClassHead => "class_head",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub fn conv1d(channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv1d {
            channels,
            kernel,
            stride,
            padding: Padding::Same,
        }
    }

    pub fn conv2d(channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            channels,
            kernel: [kernel, kernel],
            stride: [1, 1],
            padding: Padding::Same,
        }
    }

    fn pool2x2() -> Self {
        LayerSpec::MaxPool2d {
            kernel: [2, 2],
            stride: [2, 2],
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv1d {
                channels,
                kernel,
                stride,
                padding,
            } => write!(f, "Conv1D,{channels},{kernel},{stride} ({padding:?})"),
            LayerSpec::Conv2d {
                channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "Conv2D,{channels},{}x{},{} ({padding:?})",
                kernel[0], kernel[1], stride[0]
            ),
            LayerSpec::MaxPool1d { kernel, stride } => write!(f, "MaxPool1D,{kernel},{stride}"),
            LayerSpec::MaxPool2d { kernel, stride } => {
                write!(f, "MaxPool2D,{}x{},{}", kernel[0], kernel[1], stride[0])
            }
            LayerSpec::Relu => f.write_str("ReLU"),
            LayerSpec::InceptionNucleus { branches } => {
                write!(f, "InceptionNucleus[{} branches]", branches.len())
            }
            LayerSpec::ReshapeChannelsFirst => f.write_str("Reshape (channels first)"),
            LayerSpec::ClassHead => f.write_str("GlobalAveragePool"),
            LayerSpec::Dense { units } => write!(f, "Flatten+Dense,{units}"),
        }
    }
}

/// Shape bookkeeping for one layer, in depth-first order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeStep {
    /// Depth-first layer index; inception sub-layers follow their nucleus.
    pub index: usize,
    /// Nesting depth: 0 for top-level layers, 1 inside an inception branch.
    pub depth: usize,
    pub kind: &'static str,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    /// Trainable parameters owned directly by this layer.
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `None` for hand-assembled architectures.
    pub variant: Option<Variant>,
    pub num_classes: usize,
    pub head: HeadKind,
    pub layers: Vec<LayerSpec>,
}

fn layer_err(index: usize, kind: &'static str, message: impl Into<String>) -> Error {
    Error::Layer {
        index,
        kind,
        message: message.into(),
    }
}

impl ModelConfig {
    /// The architecture of one Table 1 column, with the class count applied
    /// to the final convolution (or to the dense layer for [`HeadKind::Dense`]).
    pub fn table1(variant: Variant, num_classes: usize, head: HeadKind) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be ≥ 2, got {num_classes}"
            )));
        }
        let final_channels = match head {
            HeadKind::GlobalAverage => num_classes,
            HeadKind::Dense => 10,
        };
        let relu = || LayerSpec::Relu;
        let mut layers = match variant {
            Variant::WithInception => vec![
                LayerSpec::conv1d(32, 80, 4),
                relu(),
                LayerSpec::InceptionNucleus {
                    branches: vec![
                        vec![LayerSpec::conv1d(64, 4, 4), relu()],
                        vec![
                            LayerSpec::conv1d(64, 8, 4),
                            relu(),
                            LayerSpec::conv1d(64, 8, 1),
                            relu(),
                        ],
                        vec![
                            LayerSpec::conv1d(64, 16, 4),
                            relu(),
                            LayerSpec::conv1d(64, 16, 1),
                            relu(),
                        ],
                    ],
                },
                LayerSpec::MaxPool1d {
                    kernel: 10,
                    stride: 1,
                },
                LayerSpec::ReshapeChannelsFirst,
                LayerSpec::conv2d(32, 3),
                relu(),
                LayerSpec::pool2x2(),
                LayerSpec::conv2d(64, 3),
                relu(),
                LayerSpec::conv2d(64, 3),
                relu(),
                LayerSpec::pool2x2(),
                LayerSpec::conv2d(128, 3),
                relu(),
                LayerSpec::pool2x2(),
                LayerSpec::conv2d(final_channels, 3),
            ],
            Variant::WithoutInception => vec![
                LayerSpec::conv1d(32, 9, 4),
                relu(),
                LayerSpec::conv1d(32, 8, 4),
                relu(),
                LayerSpec::conv1d(32, 9, 4),
                relu(),
                LayerSpec::MaxPool1d {
                    kernel: 2,
                    stride: 1,
                },
                LayerSpec::ReshapeChannelsFirst,
                LayerSpec::conv2d(64, 3),
                relu(),
                LayerSpec::pool2x2(),
                LayerSpec::conv2d(128, 3),
                relu(),
                LayerSpec::conv2d(128, 3),
                relu(),
                LayerSpec::pool2x2(),
                LayerSpec::conv2d(256, 3),
                relu(),
                LayerSpec::pool2x2(),
                LayerSpec::conv2d(10, 1),
                relu(),
                LayerSpec::conv2d(final_channels, 1),
            ],
        };
        match head {
            HeadKind::GlobalAverage => layers.push(LayerSpec::ClassHead),
            HeadKind::Dense => {
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::Dense { units: num_classes });
            }
        }
        let config = ModelConfig {
            variant: Some(variant),
            num_classes,
            head,
            layers,
        };
        config.propagate()?;
        Ok(config)
    }

    /// A hand-assembled architecture; validated like the tabulated ones.
    pub fn custom(layers: Vec<LayerSpec>, num_classes: usize) -> Result<Self> {
        let head = if matches!(layers.last(), Some(LayerSpec::Dense { .. })) {
            HeadKind::Dense
        } else {
            HeadKind::GlobalAverage
        };
        let config = ModelConfig {
            variant: None,
            num_classes,
            head,
            layers,
        };
        config.propagate()?;
        Ok(config)
    }

    /// Symbolic shape propagation from a `[1, 8000]` input. The first
    /// failing layer is reported by depth-first index.
    pub fn propagate(&self) -> Result<Vec<ShapeStep>> {
        let mut steps = Vec::new();
        let mut counter = 0;
        let out = propagate_layers(&self.layers, vec![1, INPUT_LEN], 0, &mut counter, &mut steps)?;
        if out != [self.num_classes] {
            return Err(layer_err(
                counter.saturating_sub(1),
                self.layers.last().map_or("none", LayerSpec::kind),
                format!(
                    "model emits {out:?}, expected [{}] logits",
                    self.num_classes
                ),
            ));
        }
        Ok(steps)
    }

    /// Σ over layers of `in·∏kernel·out + out` (and `in·units + units` for dense).
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.propagate()?.iter().map(|s| s.params).sum())
    }

    /// Number of layers in depth-first order, inception sub-layers included.
    pub fn flat_layer_count(&self) -> usize {
        fn count(layers: &[LayerSpec]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    LayerSpec::InceptionNucleus { branches } => {
                        1 + branches.iter().map(|b| count(b)).sum::<usize>()
                    }
                    _ => 1,
                })
                .sum()
        }
        count(&self.layers)
    }
}

fn propagate_layers(
    layers: &[LayerSpec],
    mut shape: Vec<usize>,
    depth: usize,
    counter: &mut usize,
    steps: &mut Vec<ShapeStep>,
) -> Result<Vec<usize>> {
    for layer in layers {
        let index = *counter;
        *counter += 1;
        let kind = layer.kind();
        let err = |msg: String| layer_err(index, kind, msg);
        let step_pos = steps.len();
        let (out, params) = match layer {
            LayerSpec::Conv1d {
                channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, t] = shape[..] else {
                    return Err(err(format!("expects [channels, time], got {shape:?}")));
                };
                check_positive(&[*channels, *kernel, *stride]).map_err(&err)?;
                let (ot, _) = conv::axis_geometry(t, *kernel, *stride, *padding)
                    .ok_or_else(|| err(format!("length {t} < kernel {kernel}")))?;
                (vec![*channels, ot], c * kernel * channels + channels)
            }
            LayerSpec::Conv2d {
                channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = shape[..] else {
                    return Err(err(format!("expects [channels, height, width], got {shape:?}")));
                };
                check_positive(&[*channels, kernel[0], kernel[1], stride[0], stride[1]])
                    .map_err(&err)?;
                let (oh, _) = conv::axis_geometry(h, kernel[0], stride[0], *padding)
                    .ok_or_else(|| err(format!("height {h} < kernel {}", kernel[0])))?;
                let (ow, _) = conv::axis_geometry(w, kernel[1], stride[1], *padding)
                    .ok_or_else(|| err(format!("width {w} < kernel {}", kernel[1])))?;
                (
                    vec![*channels, oh, ow],
                    c * kernel[0] * kernel[1] * channels + channels,
                )
            }
            LayerSpec::MaxPool1d { kernel, stride } => {
                let [c, t] = shape[..] else {
                    return Err(err(format!("expects [channels, time], got {shape:?}")));
                };
                check_positive(&[*kernel, *stride]).map_err(&err)?;
                if t < *kernel {
                    return Err(err(format!("length {t} < pool kernel {kernel}")));
                }
                (vec![c, (t - kernel) / stride + 1], 0)
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [c, h, w] = shape[..] else {
                    return Err(err(format!("expects [channels, height, width], got {shape:?}")));
                };
                check_positive(&[kernel[0], kernel[1], stride[0], stride[1]]).map_err(&err)?;
                if h < kernel[0] || w < kernel[1] {
                    return Err(err(format!("extent {h}x{w} < pool kernel {kernel:?}")));
                }
                (
                    vec![c, (h - kernel[0]) / stride[0] + 1, (w - kernel[1]) / stride[1] + 1],
                    0,
                )
            }
            LayerSpec::Relu => (shape.clone(), 0),
            LayerSpec::InceptionNucleus { branches } => {
                if branches.is_empty() {
                    return Err(err("inception nucleus has no branches".into()));
                }
                if shape.len() != 2 {
                    return Err(err(format!("expects [channels, time], got {shape:?}")));
                }
                // placeholder, filled in once the branches are known
                steps.push(ShapeStep {
                    index,
                    depth,
                    kind,
                    input: shape.clone(),
                    output: Vec::new(),
                    params: 0,
                });
                let mut channels = 0;
                let mut length = None;
                for branch in branches {
                    let out = propagate_layers(branch, shape.clone(), depth + 1, counter, steps)?;
                    let [c, t] = out[..] else {
                        return Err(err(format!("branch emits {out:?}, expected rank 2")));
                    };
                    match length {
                        None => length = Some(t),
                        Some(l) if l != t => {
                            return Err(err(format!(
                                "branch lengths differ ({l} vs {t}); outputs cannot be concatenated"
                            )))
                        }
                        _ => {}
                    }
                    channels += c;
                }
                let out = vec![channels, length.unwrap_or(0)];
                steps[step_pos].output = out.clone();
                shape = out;
                continue;
            }
            LayerSpec::ReshapeChannelsFirst => {
                let [c, t] = shape[..] else {
                    return Err(err(format!("expects [channels, time], got {shape:?}")));
                };
                (vec![1, c, t], 0)
            }
            LayerSpec::ClassHead => {
                let [c, _, _] = shape[..] else {
                    return Err(err(format!("expects [classes, height, width], got {shape:?}")));
                };
                (vec![c], 0)
            }
            LayerSpec::Dense { units } => {
                check_positive(&[*units]).map_err(&err)?;
                let inputs: usize = shape.iter().product();
                (vec![*units], inputs * units + units)
            }
        };
        steps.push(ShapeStep {
            index,
            depth,
            kind,
            input: shape,
            output: out.clone(),
            params,
        });
        shape = out;
    }
    Ok(shape)
}

fn check_positive(values: &[usize]) -> std::result::Result<(), String> {
    if values.contains(&0) {
        Err("channels, kernel and stride must be ≥ 1".into())
    } else {
        Ok(())
    }
}
