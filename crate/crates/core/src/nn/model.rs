use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::glorot_uniform;
use crate::tensor::{Scalar, Tensor};

use super::activation::{relu, relu_grad};
use super::conv::{conv1d, conv1d_grad, conv2d, conv2d_grad};
use super::head::{class_head, class_head_grad, dense, dense_grad};
use super::pool::{maxpool1d, maxpool2d, maxpool_grad};
use super::{HeadKind, LayerSpec, ModelConfig, Padding, Variant, INPUT_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
}

impl ParamRole {
    pub fn tag(self) -> u8 {
        match self {
            ParamRole::Weight => 0,
            ParamRole::Bias => 1,
        }
    }
}

/// Where a parameter tensor lives in the layer tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    /// Depth-first layer index (see [`ModelConfig::flat_layer_count`]).
    pub layer: usize,
    pub kind: &'static str,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Params<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

#[derive(Clone, Debug)]
enum Layer<T> {
    Conv1d {
        p: Params<T>,
        stride: usize,
        padding: Padding,
    },
    Conv2d {
        p: Params<T>,
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
    Inception {
        branches: Vec<Vec<Node<T>>>,
    },
    Reshape,
    ClassHead,
    Dense {
        p: Params<T>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    index: usize,
    kind: &'static str,
    layer: Layer<T>,
}

/// Per-layer state saved by the forward pass for backpropagation.
#[derive(Clone, Debug)]
enum Cache<T> {
    Input(Tensor<T>),
    Pool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Shape(Vec<usize>),
    Inception {
        branches: Vec<Vec<Cache<T>>>,
        widths: Vec<usize>,
    },
}

/// Forward-pass record needed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    caches: Vec<Cache<T>>,
}

/// One gradient tensor per parameter, in [`Model::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Gradients {
            tensors: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape("gradient sets differ in length"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            t.scale(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// A network built from a [`ModelConfig`]; `F(X|ω)` is the composition of
/// its layers in order, and ω is the set of conv/dense weights and biases.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    nodes: Vec<Node<T>>,
}

fn build_nodes<T: Scalar, R: Rng + ?Sized>(
    specs: &[LayerSpec],
    mut in_channels: usize,
    counter: &mut usize,
    init: &mut Option<&mut R>,
    dense_inputs: &mut std::collections::VecDeque<usize>,
) -> Result<(Vec<Node<T>>, usize)> {
    let mut nodes = Vec::with_capacity(specs.len());
    for spec in specs {
        let index = *counter;
        *counter += 1;
        let mut params = |shape: &[usize], fan_in: usize, fan_out: usize| -> Result<Params<T>> {
            let weight = match init.as_deref_mut() {
                Some(rng) => glorot_uniform(shape, fan_in, fan_out, rng)?,
                None => Tensor::zeros(shape),
            };
            Ok(Params {
                weight,
                bias: Tensor::zeros(&[shape[0]]),
            })
        };
        let layer = match spec {
            LayerSpec::Conv1d {
                channels,
                kernel,
                stride,
                padding,
            } => {
                let p = params(
                    &[*channels, in_channels, *kernel],
                    in_channels * kernel,
                    channels * kernel,
                )?;
                in_channels = *channels;
                Layer::Conv1d {
                    p,
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerSpec::Conv2d {
                channels,
                kernel,
                stride,
                padding,
            } => {
                let area = kernel[0] * kernel[1];
                let p = params(
                    &[*channels, in_channels, kernel[0], kernel[1]],
                    in_channels * area,
                    channels * area,
                )?;
                in_channels = *channels;
                Layer::Conv2d {
                    p,
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerSpec::MaxPool1d { kernel, stride } => Layer::MaxPool1d {
                kernel: *kernel,
                stride: *stride,
            },
            LayerSpec::MaxPool2d { kernel, stride } => Layer::MaxPool2d {
                kernel: *kernel,
                stride: *stride,
            },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::InceptionNucleus { branches } => {
                let mut built = Vec::with_capacity(branches.len());
                let mut total = 0;
                for branch in branches {
                    let (nodes, out) = build_nodes(branch, in_channels, counter, init, dense_inputs)?;
                    built.push(nodes);
                    total += out;
                }
                in_channels = total;
                Layer::Inception { branches: built }
            }
            LayerSpec::ReshapeChannelsFirst => {
                in_channels = 1;
                Layer::Reshape
            }
            LayerSpec::ClassHead => Layer::ClassHead,
            LayerSpec::Dense { units } => {
                let inputs = dense_inputs
                    .pop_front()
                    .ok_or_else(|| Error::shape("dense layer input size unknown"))?;
                let p = params(&[*units, inputs], inputs, *units)?;
                in_channels = *units;
                Layer::Dense { p }
            }
        };
        nodes.push(Node {
            index,
            kind: spec.kind(),
            layer,
        });
    }
    Ok((nodes, in_channels))
}

fn wrap<T, V>(node: &Node<T>, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        Error::Layer { .. } => e,
        other => Error::Layer {
            index: node.index,
            kind: node.kind,
            message: other.to_string(),
        },
    })
}

fn forward_nodes<T: Scalar>(
    nodes: &[Node<T>],
    mut x: Tensor<T>,
    mut caches: Option<&mut Vec<Cache<T>>>,
) -> Result<Tensor<T>> {
    for node in nodes {
        let keep = caches.is_some();
        let (out, cache) = match &node.layer {
            Layer::Conv1d { p, stride, padding } => {
                let y = wrap(node, conv1d(&x, &p.weight, &p.bias, *stride, *padding))?;
                (y, keep.then_some(Cache::Input(x)))
            }
            Layer::Conv2d { p, stride, padding } => {
                let y = wrap(node, conv2d(&x, &p.weight, &p.bias, *stride, *padding))?;
                (y, keep.then_some(Cache::Input(x)))
            }
            Layer::MaxPool1d { kernel, stride } => {
                let pooled = wrap(node, maxpool1d(&x, *kernel, *stride))?;
                let cache = keep.then(|| Cache::Pool {
                    argmax: pooled.argmax,
                    input_shape: x.shape().to_vec(),
                });
                (pooled.output, cache)
            }
            Layer::MaxPool2d { kernel, stride } => {
                let pooled = wrap(node, maxpool2d(&x, *kernel, *stride))?;
                let cache = keep.then(|| Cache::Pool {
                    argmax: pooled.argmax,
                    input_shape: x.shape().to_vec(),
                });
                (pooled.output, cache)
            }
            Layer::Relu => {
                let y = relu(&x);
                (y, keep.then_some(Cache::Input(x)))
            }
            Layer::Inception { branches } => {
                if x.rank() != 2 {
                    return wrap(
                        node,
                        Err(Error::shape(format!("expects [channels, time], got {:?}", x.shape()))),
                    );
                }
                let mut data = Vec::new();
                let mut widths = Vec::with_capacity(branches.len());
                let mut branch_caches = Vec::with_capacity(branches.len());
                let mut length = None;
                for branch in branches {
                    let mut bc = Vec::new();
                    let y = forward_nodes(branch, x.clone(), keep.then_some(&mut bc))?;
                    let (c, t) = (y.shape()[0], y.shape()[1]);
                    if *length.get_or_insert(t) != t {
                        return wrap(node, Err(Error::shape("inception branch lengths differ")));
                    }
                    widths.push(c);
                    branch_caches.push(bc);
                    data.extend_from_slice(y.data());
                }
                let total: usize = widths.iter().sum();
                let y = Tensor::new(&[total, length.unwrap_or(0)], data)?;
                let cache = keep.then_some(Cache::Inception {
                    branches: branch_caches,
                    widths,
                });
                (y, cache)
            }
            Layer::Reshape => {
                if x.rank() != 2 {
                    return wrap(
                        node,
                        Err(Error::shape(format!("expects [channels, time], got {:?}", x.shape()))),
                    );
                }
                let shape = x.shape().to_vec();
                let y = x.reshape(&[1, shape[0], shape[1]])?;
                (y, keep.then_some(Cache::Shape(shape)))
            }
            Layer::ClassHead => {
                let y = wrap(node, class_head(&x))?;
                (y, keep.then(|| Cache::Shape(x.shape().to_vec())))
            }
            Layer::Dense { p } => {
                let y = wrap(node, dense(&x, &p.weight, &p.bias))?;
                (y, keep.then_some(Cache::Input(x)))
            }
        };
        if let (Some(cs), Some(c)) = (caches.as_deref_mut(), cache) {
            cs.push(c);
        }
        x = out;
    }
    Ok(x)
}

/// Backpropagates `upstream` through `nodes`, writing parameter gradients
/// into `slots` (indexed by parameter position). Returns the input
/// gradient when `need_dx`.
fn backward_nodes<T: Scalar>(
    nodes: &[Node<T>],
    caches: &[Cache<T>],
    mut upstream: Tensor<T>,
    need_dx: bool,
    slot_base: usize,
    slots: &mut [Option<Tensor<T>>],
) -> Result<Option<Tensor<T>>> {
    if nodes.len() != caches.len() {
        return Err(Error::shape("trace does not match the model"));
    }
    // parameter slot of each node, in forward order
    let mut slot_of = Vec::with_capacity(nodes.len());
    let mut next = slot_base;
    for node in nodes {
        slot_of.push(next);
        next += count_params(std::slice::from_ref(node));
    }
    for (pos, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
        let want_dx = need_dx || pos > 0;
        let slot = slot_of[pos];
        let dx = match (&node.layer, cache) {
            (Layer::Conv1d { p, stride, padding }, Cache::Input(x)) => {
                let g = wrap(node, conv1d_grad(&upstream, x, &p.weight, *stride, *padding, want_dx))?;
                slots[slot] = Some(g.dw);
                slots[slot + 1] = Some(g.db);
                g.dx
            }
            (Layer::Conv2d { p, stride, padding }, Cache::Input(x)) => {
                let g = wrap(node, conv2d_grad(&upstream, x, &p.weight, *stride, *padding, want_dx))?;
                slots[slot] = Some(g.dw);
                slots[slot + 1] = Some(g.db);
                g.dx
            }
            (Layer::MaxPool1d { .. } | Layer::MaxPool2d { .. }, Cache::Pool { argmax, input_shape }) => {
                Some(wrap(node, maxpool_grad(&upstream, argmax, input_shape))?)
            }
            (Layer::Relu, Cache::Input(x)) => Some(wrap(node, relu_grad(&upstream, x))?),
            (Layer::Inception { branches }, Cache::Inception { branches: bcs, widths }) => {
                let length = upstream.shape()[1];
                let mut offset = 0;
                let mut branch_slot = slot;
                let mut dx: Option<Tensor<T>> = None;
                for ((branch, bc), &w) in branches.iter().zip(bcs).zip(widths) {
                    let part = upstream.data()[offset * length..(offset + w) * length].to_vec();
                    offset += w;
                    let part = Tensor::new(&[w, length], part)?;
                    let d = backward_nodes(branch, bc, part, want_dx, branch_slot, slots)?;
                    branch_slot += count_params(branch);
                    if let Some(d) = d {
                        match dx.as_mut() {
                            Some(acc) => acc.add_assign(&d)?,
                            None => dx = Some(d),
                        }
                    }
                }
                dx
            }
            (Layer::Reshape, Cache::Shape(shape)) => Some(upstream.reshape(shape)?),
            (Layer::ClassHead, Cache::Shape(shape)) => Some(wrap(node, class_head_grad(&upstream, shape))?),
            (Layer::Dense { p }, Cache::Input(x)) => {
                let (dx, dw, db) = wrap(node, dense_grad(&upstream, x, &p.weight))?;
                slots[slot] = Some(dw);
                slots[slot + 1] = Some(db);
                Some(dx)
            }
            _ => return Err(Error::shape("trace does not match the model")),
        };
        match dx {
            Some(d) if pos > 0 || need_dx => upstream = d,
            _ => return Ok(None),
        }
    }
    Ok(Some(upstream))
}

fn count_params<T>(nodes: &[Node<T>]) -> usize {
    nodes
        .iter()
        .map(|n| match &n.layer {
            Layer::Conv1d { .. } | Layer::Conv2d { .. } | Layer::Dense { .. } => 2,
            Layer::Inception { branches } => branches.iter().map(|b| count_params(b)).sum(),
            _ => 0,
        })
        .sum()
}

fn collect_params<'a, T>(nodes: &'a [Node<T>], out: &mut Vec<&'a Tensor<T>>) {
    for n in nodes {
        match &n.layer {
            Layer::Conv1d { p, .. } | Layer::Conv2d { p, .. } | Layer::Dense { p } => {
                out.push(&p.weight);
                out.push(&p.bias);
            }
            Layer::Inception { branches } => branches.iter().for_each(|b| collect_params(b, out)),
            _ => {}
        }
    }
}

fn collect_params_mut<'a, T>(nodes: &'a mut [Node<T>], out: &mut Vec<&'a mut Tensor<T>>) {
    for n in nodes {
        match &mut n.layer {
            Layer::Conv1d { p, .. } | Layer::Conv2d { p, .. } | Layer::Dense { p } => {
                out.push(&mut p.weight);
                out.push(&mut p.bias);
            }
            Layer::Inception { branches } => branches.iter_mut().for_each(|b| collect_params_mut(b, out)),
            _ => {}
        }
    }
}

fn collect_info<T: Scalar>(nodes: &[Node<T>], out: &mut Vec<ParamInfo>) {
    for n in nodes {
        match &n.layer {
            Layer::Conv1d { p, .. } | Layer::Conv2d { p, .. } | Layer::Dense { p } => {
                for (role, t) in [(ParamRole::Weight, &p.weight), (ParamRole::Bias, &p.bias)] {
                    out.push(ParamInfo {
                        layer: n.index,
                        kind: n.kind,
                        role,
                        shape: t.shape().to_vec(),
                    });
                }
            }
            Layer::Inception { branches } => branches.iter().for_each(|b| collect_info(b, out)),
            _ => {}
        }
    }
}

fn cast_nodes<T: Scalar, U: Scalar>(nodes: &[Node<T>]) -> Vec<Node<U>> {
    let cast = |p: &Params<T>| Params {
        weight: p.weight.cast(),
        bias: p.bias.cast(),
    };
    nodes
        .iter()
        .map(|n| Node {
            index: n.index,
            kind: n.kind,
            layer: match &n.layer {
                Layer::Conv1d { p, stride, padding } => Layer::Conv1d {
                    p: cast(p),
                    stride: *stride,
                    padding: *padding,
                },
                Layer::Conv2d { p, stride, padding } => Layer::Conv2d {
                    p: cast(p),
                    stride: *stride,
                    padding: *padding,
                },
                Layer::MaxPool1d { kernel, stride } => Layer::MaxPool1d {
                    kernel: *kernel,
                    stride: *stride,
                },
                Layer::MaxPool2d { kernel, stride } => Layer::MaxPool2d {
                    kernel: *kernel,
                    stride: *stride,
                },
                Layer::Relu => Layer::Relu,
                Layer::Inception { branches } => Layer::Inception {
                    branches: branches.iter().map(|b| cast_nodes(b)).collect(),
                },
                Layer::Reshape => Layer::Reshape,
                Layer::ClassHead => Layer::ClassHead,
                Layer::Dense { p } => Layer::Dense { p: cast(p) },
            },
        })
        .collect()
}

impl<T: Scalar> Model<T> {
    /// Builds one Table 1 column with Glorot-initialized weights and zero biases.
    pub fn build<R: Rng + ?Sized>(
        variant: Variant,
        num_classes: usize,
        head: HeadKind,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_config(ModelConfig::table1(variant, num_classes, head)?, rng)
    }

    pub fn from_config<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::assemble(config, Some(rng))
    }

    /// All parameters zero; used when loading stored weights.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        Self::assemble::<rand_chacha::ChaCha8Rng>(config, None)
    }

    fn assemble<R: Rng + ?Sized>(config: ModelConfig, rng: Option<&mut R>) -> Result<Self> {
        let steps = config.propagate()?;
        let mut dense_inputs = steps
            .iter()
            .filter(|s| s.kind == "dense")
            .map(|s| s.input.iter().product())
            .collect();
        let mut counter = 0;
        let mut init = rng;
        let (nodes, _) = build_nodes(&config.layers, 1, &mut counter, &mut init, &mut dense_inputs)?;
        Ok(Model { config, nodes })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Total trainable scalars, counted from the allocated tensors.
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in depth-first order, weight before bias.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        collect_params(&self.nodes, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        collect_params_mut(&mut self.nodes, &mut out);
        out
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        collect_info(&self.nodes, &mut out);
        out
    }

    /// Zeroes the weights and bias of the last parametric layer, making all
    /// logits equal.
    pub fn zero_head(&mut self) {
        let mut params = self.params_mut();
        let n = params.len();
        for p in params[n.saturating_sub(2)..].iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            nodes: cast_nodes(&self.nodes),
        }
    }

    fn input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.len() != INPUT_LEN || !(x.rank() == 1 || x.shape() == [1, INPUT_LEN]) {
            return Err(Error::shape(format!(
                "model input must hold {INPUT_LEN} samples, got shape {:?}",
                x.shape()
            )));
        }
        x.clone().reshape(&[1, INPUT_LEN])
    }

    /// Logits for one standardized 8000-sample clip.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        forward_nodes(&self.nodes, self.input(x)?, None)
    }

    /// Forward pass that also records what [`backward`](Self::backward) needs.
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let mut caches = Vec::with_capacity(self.nodes.len());
        let logits = forward_nodes(&self.nodes, self.input(x)?, Some(&mut caches))?;
        Ok((logits, Trace { caches }))
    }

    /// Gradients of every parameter given `dloss/dlogits`.
    pub fn backward(&self, trace: &Trace<T>, dlogits: &[T]) -> Result<Gradients<T>> {
        Ok(self.backward_full(trace, dlogits, false)?.0)
    }

    /// As [`backward`](Self::backward), also returning the gradient with
    /// respect to the `[1, 8000]` input when `need_dx`.
    pub fn backward_full(
        &self,
        trace: &Trace<T>,
        dlogits: &[T],
        need_dx: bool,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        let upstream = Tensor::new(&[dlogits.len()], dlogits.to_vec())?;
        let mut slots = vec![None; count_params(&self.nodes)];
        let dx = backward_nodes(&self.nodes, &trace.caches, upstream, need_dx, 0, &mut slots)?;
        let tensors = slots
            .into_iter()
            .map(|s| s.ok_or_else(|| Error::shape("missing parameter gradient")))
            .collect::<Result<_>>()?;
        Ok((Gradients { tensors }, dx))
    }
}

fn pattern_of<T: Scalar>(nodes: &[Node<T>], caches: &[Cache<T>], out: &mut Vec<usize>) {
    for (node, cache) in nodes.iter().zip(caches) {
        match (&node.layer, cache) {
            (Layer::Relu, Cache::Input(x)) => out.extend(x.data().iter().map(|&v| usize::from(v > T::zero()))),
            (_, Cache::Pool { argmax, .. }) => out.extend_from_slice(argmax),
            (Layer::Inception { branches }, Cache::Inception { branches: bcs, .. }) => {
                branches.iter().zip(bcs).for_each(|(b, c)| pattern_of(b, c, out))
            }
            _ => {}
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Which side of every relu and pooling kink the traced pass landed on.
    ///
    /// Two inputs with equal patterns lie in the same linear region, where
    /// finite differences are meaningful.
    pub(crate) fn activation_pattern(&self, trace: &Trace<T>) -> Vec<usize> {
        let mut out = Vec::new();
        pattern_of(&self.nodes, &trace.caches, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::head::softmax_xent;
    use crate::testutil::{max_rel_err, numeric_grad, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Conv1d → ReLU → reshape → Conv2d → class head, three parametric-free
    /// steps aside, small enough for full finite differences.
    fn reduced_config() -> ModelConfig {
        ModelConfig::custom(
            vec![
                LayerSpec::Conv1d {
                    channels: 3,
                    kernel: 32,
                    stride: 16,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { kernel: 4, stride: 4 },
                LayerSpec::ReshapeChannelsFirst,
                LayerSpec::conv2d(2, 3),
                LayerSpec::ClassHead,
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for variant in [Variant::WithInception, Variant::WithoutInception] {
            let m = Model::<f32>::build(variant, 3, HeadKind::GlobalAverage, &mut rng).unwrap();
            let y = m.forward(&Tensor::zeros(&[INPUT_LEN])).unwrap();
            assert_eq!(y.shape(), &[3]);
            assert!(y.all_finite());
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let m = Model::<f32>::zeroed(reduced_config()).unwrap();
        assert!(m.forward(&Tensor::zeros(&[7999])).is_err());
        assert!(m.forward(&Tensor::zeros(&[2, 4000])).is_err());
    }

    #[test]
    fn params_follow_layer_order() {
        let m = Model::<f32>::build(
            Variant::WithInception,
            10,
            HeadKind::GlobalAverage,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let info = m.param_info();
        assert_eq!(info.len(), m.params().len());
        assert_eq!(info[0].shape, vec![32, 1, 80]);
        assert_eq!(info[1].role, ParamRole::Bias);
        // first inception branch conv is depth-first layer 3
        assert_eq!(info[2].layer, 3);
        assert_eq!(info[2].shape, vec![64, 32, 4]);
        assert!(info.windows(2).all(|w| w[0].layer <= w[1].layer));
        assert_eq!(m.num_params(), m.config().param_count().unwrap());
    }

    #[test]
    fn dense_head_builds_and_runs() {
        let m = Model::<f32>::build(
            Variant::WithoutInception,
            3,
            HeadKind::Dense,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let y = m.forward(&random_tensor(&[INPUT_LEN], 3).cast()).unwrap();
        assert_eq!(y.shape(), &[3]);
    }

    #[test]
    fn single_branch_inception_equals_plain_conv() {
        let conv = LayerSpec::conv1d(4, 16, 8);
        let tail = vec![LayerSpec::ReshapeChannelsFirst, LayerSpec::conv2d(2, 3), LayerSpec::ClassHead];
        let mut plain = vec![conv.clone()];
        plain.extend(tail.clone());
        let mut nested = vec![LayerSpec::InceptionNucleus {
            branches: vec![vec![conv]],
        }];
        nested.extend(tail);
        let a = Model::<f64>::from_config(ModelConfig::custom(plain, 2).unwrap(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = Model::<f64>::from_config(ModelConfig::custom(nested, 2).unwrap(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = random_tensor(&[INPUT_LEN], 5);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Model::<f64>::from_config(reduced_config(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (_, trace) = m.forward_trace(&random_tensor(&[INPUT_LEN], 7)).unwrap();
        let (g, dx) = m.backward_full(&trace, &[0.0, 0.0], true).unwrap();
        assert!(g.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(dx.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduced_model_gradients_match_finite_differences() {
        let model = Model::<f64>::from_config(reduced_config(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let x = random_tensor(&[INPUT_LEN], 9);
        let (logits, trace) = model.forward_trace(&x).unwrap();
        let r = softmax_xent(logits.data(), 1).unwrap();
        let grads = model.backward(&trace, &r.dlogits).unwrap();
        for (i, analytic) in grads.tensors.iter().enumerate() {
            let numeric = numeric_grad(model.params()[i], |p| {
                let mut m = model.clone();
                *m.params_mut()[i] = p.clone();
                softmax_xent(m.forward(&x).unwrap().data(), 1).unwrap().loss
            });
            let err = max_rel_err(analytic.data(), numeric.data());
            assert!(err < 1e-4, "parameter {i}: {err}");
        }
    }

    #[test]
    fn inception_gradients_match_finite_differences() {
        let config = ModelConfig::custom(
            vec![
                LayerSpec::conv1d(2, 16, 16),
                LayerSpec::Relu,
                LayerSpec::InceptionNucleus {
                    branches: vec![
                        vec![LayerSpec::conv1d(2, 4, 4), LayerSpec::Relu],
                        vec![LayerSpec::conv1d(3, 8, 4), LayerSpec::Relu, LayerSpec::conv1d(2, 8, 1)],
                    ],
                },
                LayerSpec::ReshapeChannelsFirst,
                LayerSpec::conv2d(3, 3),
                LayerSpec::ClassHead,
            ],
            3,
        )
        .unwrap();
        let mut model = Model::<f64>::from_config(config, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        // zero biases put dead windows exactly on the relu kink
        for (k, p) in model.params_mut().into_iter().enumerate().filter(|(k, _)| k % 2 == 1) {
            *p = random_tensor(p.shape(), 100 + k as u64).map(|v| 0.1 * v);
        }
        let x = random_tensor(&[INPUT_LEN], 11);
        let (logits, trace) = model.forward_trace(&x).unwrap();
        assert_eq!(logits.shape(), &[3]);
        let r = softmax_xent(logits.data(), 2).unwrap();
        let grads = model.backward(&trace, &r.dlogits).unwrap();
        for (i, analytic) in grads.tensors.iter().enumerate() {
            let numeric = numeric_grad(model.params()[i], |p| {
                let mut m = model.clone();
                *m.params_mut()[i] = p.clone();
                softmax_xent(m.forward(&x).unwrap().data(), 2).unwrap().loss
            });
            let err = max_rel_err(analytic.data(), numeric.data());
                assert!(err < 1e-4, "parameter {i}: {err}");
        }
    }

    #[test]
    fn zero_head_equalizes_logits() {
        let mut m = Model::<f32>::build(
            Variant::WithoutInception,
            4,
            HeadKind::GlobalAverage,
            &mut ChaCha8Rng::seed_from_u64(12),
        )
        .unwrap();
        m.zero_head();
        let y = m.forward(&random_tensor(&[INPUT_LEN], 13).cast()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
