//! Declarative model descriptions and architecture transforms.
//!
//! A [`ModelSpec`] is an ordered sequence of layer descriptors (with residual
//! blocks as composite entries) that can be validated, counted, factorized
//! into a hybrid low-rank variant, width-slimmed into a nested subnetwork, or
//! materialized into a trainable [`crate::nn::Model`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::{layer_rank_conv, layer_rank_dense};

/// What the network consumes: image tensors (batch, ch, H, W) or flat vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputSpec {
    Image { channels: usize },
    Vector { dim: usize },
}

/// One layer of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerDesc {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    FactorizedConv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rank: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    FactorizedDense {
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    GlobalAvgPool,
    Flatten,
}

impl LayerDesc {
    /// Conv and dense layers (factorized or not) are "factorizable" slots;
    /// they carry the weights that low-rank compression targets.
    pub fn is_factorizable(&self) -> bool {
        matches!(
            self,
            LayerDesc::Conv { .. }
                | LayerDesc::Dense { .. }
                | LayerDesc::FactorizedConv { .. }
                | LayerDesc::FactorizedDense { .. }
        )
    }
}

/// A plain layer or a residual block (main path summed with a shortcut;
/// an empty shortcut is the identity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlockDesc {
    Plain(LayerDesc),
    Residual {
        main: Vec<LayerDesc>,
        shortcut: Vec<LayerDesc>,
    },
}

/// A block together with its stage tag (stem = 0, body stages 1.., head last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecBlock {
    pub stage: usize,
    pub desc: BlockDesc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub classes: usize,
    pub input: InputSpec,
    pub blocks: Vec<SpecBlock>,
}

/// How to turn a full-rank spec into a hybrid low-rank spec: layers with
/// factorizable index below `rho` stay full, the rest factorize at rank
/// ratio `gamma`. The first factorizable layer (stem) and a trailing dense
/// classifier are kept full unless explicitly included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridPlan {
    pub rho: usize,
    pub gamma: f64,
    pub include_stem: bool,
    pub include_classifier: bool,
}

impl HybridPlan {
    pub fn new(rho: usize, gamma: f64) -> Self {
        HybridPlan {
            rho,
            gamma,
            include_stem: false,
            include_classifier: false,
        }
    }

    /// Per-factorizable-layer resolved ranks under this plan (`None` for
    /// layers that stay full).
    pub fn resolved_ranks(&self, spec: &ModelSpec) -> Result<Vec<Option<usize>>> {
        let hybrid = make_hybrid(spec, self)?;
        Ok(hybrid
            .factorizable_layers()
            .iter()
            .map(|e| match e.desc {
                LayerDesc::FactorizedConv { rank, .. }
                | LayerDesc::FactorizedDense { rank, .. } => Some(rank),
                _ => None,
            })
            .collect())
    }
}

/// A factorizable layer's position within a spec.
#[derive(Clone, Copy, Debug)]
pub struct FactorizableEntry {
    /// Index among factorizable layers, forward order.
    pub index: usize,
    pub stage: usize,
    pub block: usize,
    pub in_shortcut: bool,
    pub desc: LayerDesc,
}

#[derive(Clone, Debug, PartialEq)]
enum ShapeState {
    Image { ch: usize, collapsed: bool },
    Vector { dim: usize },
}

impl ModelSpec {
    /// Checks that consecutive layers compose, residual paths agree, and
    /// factorized ranks respect their bounds.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 {
            return Err(Error::InvalidArgument("classes must be >= 1".into()));
        }
        let mut state = match self.input {
            InputSpec::Image { channels } => {
                if channels == 0 {
                    return Err(Error::dimension("input channels must be positive"));
                }
                ShapeState::Image {
                    ch: channels,
                    collapsed: false,
                }
            }
            InputSpec::Vector { dim } => {
                if dim == 0 {
                    return Err(Error::dimension("input dim must be positive"));
                }
                ShapeState::Vector { dim }
            }
        };
        for (bi, block) in self.blocks.iter().enumerate() {
            match &block.desc {
                BlockDesc::Plain(l) => {
                    state = step_shape(l, &state)
                        .map_err(|e| Error::dimension(format!("block {bi}: {e}")))?;
                }
                BlockDesc::Residual { main, shortcut } => {
                    let (ch_in, main_out, main_stride) = {
                        let ch_in = match &state {
                            ShapeState::Image { ch, .. } => *ch,
                            _ => {
                                return Err(Error::dimension(format!(
                                    "block {bi}: residual blocks need image input"
                                )))
                            }
                        };
                        let mut s = state.clone();
                        let mut stride = 1usize;
                        for l in main {
                            stride *= conv_stride(l);
                            s = step_shape(l, &s)
                                .map_err(|e| Error::dimension(format!("block {bi}: {e}")))?;
                        }
                        let out = match &s {
                            ShapeState::Image { ch, .. } => *ch,
                            _ => {
                                return Err(Error::dimension(format!(
                                    "block {bi}: residual main path must stay an image"
                                )))
                            }
                        };
                        (ch_in, out, stride)
                    };
                    if shortcut.is_empty() {
                        if main_out != ch_in || main_stride != 1 {
                            return Err(Error::dimension(format!(
                                "block {bi}: identity shortcut needs matching channels and stride 1"
                            )));
                        }
                    } else {
                        let mut s = ShapeState::Image {
                            ch: ch_in,
                            collapsed: false,
                        };
                        let mut stride = 1usize;
                        for l in shortcut {
                            stride *= conv_stride(l);
                            s = step_shape(l, &s)
                                .map_err(|e| Error::dimension(format!("block {bi}: {e}")))?;
                        }
                        match s {
                            ShapeState::Image { ch, .. } if ch == main_out => {}
                            _ => {
                                return Err(Error::dimension(format!(
                                    "block {bi}: shortcut output channels disagree with main path"
                                )))
                            }
                        }
                        if stride != main_stride {
                            return Err(Error::dimension(format!(
                                "block {bi}: shortcut stride disagrees with main path"
                            )));
                        }
                    }
                    state = ShapeState::Image {
                        ch: main_out,
                        collapsed: false,
                    };
                }
            }
        }
        match state {
            ShapeState::Vector { dim } if dim == self.classes => Ok(()),
            other => Err(Error::dimension(format!(
                "network must end in a {}-way classifier, ends in {:?}",
                self.classes, other
            ))),
        }
    }

    /// Factorizable layers in forward order (within a residual block:
    /// main path first, then shortcut).
    pub fn factorizable_layers(&self) -> Vec<FactorizableEntry> {
        let mut out = Vec::new();
        let mut index = 0;
        for (block, sb) in self.blocks.iter().enumerate() {
            let mut push = |desc: &LayerDesc, in_shortcut: bool, index: &mut usize| {
                if desc.is_factorizable() {
                    out.push(FactorizableEntry {
                        index: *index,
                        stage: sb.stage,
                        block,
                        in_shortcut,
                        desc: *desc,
                    });
                    *index += 1;
                }
            };
            match &sb.desc {
                BlockDesc::Plain(l) => push(l, false, &mut index),
                BlockDesc::Residual { main, shortcut } => {
                    for l in main {
                        push(l, false, &mut index);
                    }
                    for l in shortcut {
                        push(l, true, &mut index);
                    }
                }
            }
        }
        out
    }

    /// Number of factorizable layers (the `L` that bounds `rho`).
    pub fn factorizable_count(&self) -> usize {
        self.factorizable_layers().len()
    }

    /// Maps a stage number to the `rho` value that starts factorization at
    /// that stage: the index of its first factorizable layer.
    pub fn rho_for_stage(&self, stage: usize) -> usize {
        self.factorizable_layers()
            .iter()
            .find(|e| e.stage >= stage)
            .map(|e| e.index)
            .unwrap_or_else(|| self.factorizable_count())
    }

    /// Stable 64-bit hash of the spec structure, used by the weights
    /// container to bind payloads to their architecture.
    pub fn spec_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut hash: u64 = 0xcbf29ce484222325;
        for byte in json.as_bytes() {
            hash ^= *byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }

    #[cfg(test)]
    pub(crate) fn single_layer_for_test(input: InputSpec, layer: LayerDesc) -> ModelSpec {
        ModelSpec {
            name: "single".into(),
            classes: 1,
            input,
            blocks: vec![SpecBlock {
                stage: 0,
                desc: BlockDesc::Plain(layer),
            }],
        }
    }
}

fn conv_stride(l: &LayerDesc) -> usize {
    match l {
        LayerDesc::Conv { stride, .. } | LayerDesc::FactorizedConv { stride, .. } => *stride,
        _ => 1,
    }
}

fn step_shape(l: &LayerDesc, state: &ShapeState) -> Result<ShapeState> {
    match (l, state) {
        (LayerDesc::Conv { in_ch, out_ch, kernel, stride, .. }, ShapeState::Image { ch, .. }) => {
            if ch != in_ch {
                return Err(Error::dimension(format!(
                    "conv expects {in_ch} channels, gets {ch}"
                )));
            }
            if *out_ch == 0 || *kernel == 0 || *stride == 0 {
                return Err(Error::dimension("conv hyper-parameters must be positive"));
            }
            Ok(ShapeState::Image {
                ch: *out_ch,
                collapsed: false,
            })
        }
        (
            LayerDesc::FactorizedConv {
                in_ch,
                out_ch,
                kernel,
                stride,
                rank,
                ..
            },
            ShapeState::Image { ch, .. },
        ) => {
            if ch != in_ch {
                return Err(Error::dimension(format!(
                    "factorized conv expects {in_ch} channels, gets {ch}"
                )));
            }
            if *out_ch == 0 || *kernel == 0 || *stride == 0 {
                return Err(Error::dimension("conv hyper-parameters must be positive"));
            }
            let bound = (in_ch * kernel).min(out_ch * kernel);
            if *rank == 0 || *rank > bound {
                return Err(Error::dimension(format!(
                    "factorized conv rank {rank} outside [1, {bound}]"
                )));
            }
            Ok(ShapeState::Image {
                ch: *out_ch,
                collapsed: false,
            })
        }
        (LayerDesc::Dense { in_dim, out_dim, .. }, ShapeState::Vector { dim }) => {
            if dim != in_dim {
                return Err(Error::dimension(format!(
                    "dense expects {in_dim} inputs, gets {dim}"
                )));
            }
            if *out_dim == 0 {
                return Err(Error::dimension("dense output dim must be positive"));
            }
            Ok(ShapeState::Vector { dim: *out_dim })
        }
        (
            LayerDesc::FactorizedDense {
                in_dim,
                out_dim,
                rank,
                ..
            },
            ShapeState::Vector { dim },
        ) => {
            if dim != in_dim {
                return Err(Error::dimension(format!(
                    "factorized dense expects {in_dim} inputs, gets {dim}"
                )));
            }
            let bound = (*in_dim).min(*out_dim);
            if *rank == 0 || *rank > bound {
                return Err(Error::dimension(format!(
                    "factorized dense rank {rank} outside [1, {bound}]"
                )));
            }
            Ok(ShapeState::Vector { dim: *out_dim })
        }
        (LayerDesc::BatchNorm { channels }, ShapeState::Image { ch, collapsed }) => {
            if ch != channels {
                return Err(Error::dimension(format!(
                    "batchnorm expects {channels} channels, gets {ch}"
                )));
            }
            Ok(ShapeState::Image {
                ch: *ch,
                collapsed: *collapsed,
            })
        }
        (LayerDesc::Relu, s) => Ok(s.clone()),
        (LayerDesc::GlobalAvgPool, ShapeState::Image { ch, .. }) => Ok(ShapeState::Image {
            ch: *ch,
            collapsed: true,
        }),
        (LayerDesc::Flatten, ShapeState::Image { ch, collapsed }) => {
            if !collapsed {
                return Err(Error::dimension(
                    "flatten before pooling has data-dependent width; pool first",
                ));
            }
            Ok(ShapeState::Vector { dim: *ch })
        }
        (l, s) => Err(Error::dimension(format!(
            "layer {l:?} does not accept {s:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

fn conv_bn_relu(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, stage: usize) -> Vec<SpecBlock> {
    vec![
        SpecBlock {
            stage,
            desc: BlockDesc::Plain(LayerDesc::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            }),
        },
        SpecBlock {
            stage,
            desc: BlockDesc::Plain(LayerDesc::BatchNorm { channels: out_ch }),
        },
        SpecBlock {
            stage,
            desc: BlockDesc::Plain(LayerDesc::Relu),
        },
    ]
}

fn basic_block(in_ch: usize, out_ch: usize, stride: usize, stage: usize) -> Vec<SpecBlock> {
    let main = vec![
        LayerDesc::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            stride,
            pad: 1,
        },
        LayerDesc::BatchNorm { channels: out_ch },
        LayerDesc::Relu,
        LayerDesc::Conv {
            in_ch: out_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        LayerDesc::BatchNorm { channels: out_ch },
    ];
    let shortcut = if stride != 1 || in_ch != out_ch {
        vec![
            LayerDesc::Conv {
                in_ch,
                out_ch,
                kernel: 1,
                stride,
                pad: 0,
            },
            LayerDesc::BatchNorm { channels: out_ch },
        ]
    } else {
        vec![]
    };
    vec![
        SpecBlock {
            stage,
            desc: BlockDesc::Residual { main, shortcut },
        },
        SpecBlock {
            stage,
            desc: BlockDesc::Plain(LayerDesc::Relu),
        },
    ]
}

fn resnet_cifar(name: &str, blocks_per_stage: [usize; 4], classes: usize) -> ModelSpec {
    let widths = [64usize, 128, 256, 512];
    let mut blocks = conv_bn_relu(3, 64, 3, 1, 1, 0);
    let mut in_ch = 64;
    for (stage_idx, (&count, &width)) in blocks_per_stage.iter().zip(widths.iter()).enumerate() {
        let stage = stage_idx + 1;
        for b in 0..count {
            let stride = if stage_idx > 0 && b == 0 { 2 } else { 1 };
            blocks.extend(basic_block(in_ch, width, stride, stage));
            in_ch = width;
        }
    }
    let head_stage = 5;
    blocks.push(SpecBlock {
        stage: head_stage,
        desc: BlockDesc::Plain(LayerDesc::GlobalAvgPool),
    });
    blocks.push(SpecBlock {
        stage: head_stage,
        desc: BlockDesc::Plain(LayerDesc::Flatten),
    });
    blocks.push(SpecBlock {
        stage: head_stage,
        desc: BlockDesc::Plain(LayerDesc::Dense {
            in_dim: 512,
            out_dim: classes,
            bias: true,
        }),
    });
    ModelSpec {
        name: name.into(),
        classes,
        input: InputSpec::Image { channels: 3 },
        blocks,
    }
}

/// CIFAR-style ResNet-18: 3x3/64 stem (stride 1, padding 1), four stages of
/// basic blocks [2, 2, 2, 2] at widths 64/128/256/512, global average pool,
/// dense classifier.
pub fn build_resnet18_cifar(classes: usize) -> ModelSpec {
    resnet_cifar("resnet18-cifar", [2, 2, 2, 2], classes)
}

/// CIFAR-style ResNet-34: stages [3, 4, 6, 3].
pub fn build_resnet34_cifar(classes: usize) -> ModelSpec {
    resnet_cifar("resnet34-cifar", [3, 4, 6, 3], classes)
}

/// Small conv net for desk-scale experiments:
/// three conv-BN-ReLU stages (8, 16, 32 channels), pool, dense classifier.
pub fn build_tiny_cnn(in_channels: usize, classes: usize) -> ModelSpec {
    let mut blocks = conv_bn_relu(in_channels, 8, 3, 1, 1, 0);
    blocks.extend(conv_bn_relu(8, 16, 3, 2, 1, 1));
    blocks.extend(conv_bn_relu(16, 32, 3, 1, 1, 2));
    let head = 3;
    blocks.push(SpecBlock {
        stage: head,
        desc: BlockDesc::Plain(LayerDesc::GlobalAvgPool),
    });
    blocks.push(SpecBlock {
        stage: head,
        desc: BlockDesc::Plain(LayerDesc::Flatten),
    });
    blocks.push(SpecBlock {
        stage: head,
        desc: BlockDesc::Plain(LayerDesc::Dense {
            in_dim: 32,
            out_dim: classes,
            bias: true,
        }),
    });
    ModelSpec {
        name: "tiny-cnn".into(),
        classes,
        input: InputSpec::Image {
            channels: in_channels,
        },
        blocks,
    }
}

/// Dense network for vector-feature datasets.
pub fn build_mlp(in_dim: usize, hidden: &[usize], classes: usize) -> ModelSpec {
    let mut blocks = Vec::new();
    let mut prev = in_dim;
    for (i, &h) in hidden.iter().enumerate() {
        blocks.push(SpecBlock {
            stage: i,
            desc: BlockDesc::Plain(LayerDesc::Dense {
                in_dim: prev,
                out_dim: h,
                bias: true,
            }),
        });
        blocks.push(SpecBlock {
            stage: i,
            desc: BlockDesc::Plain(LayerDesc::Relu),
        });
        prev = h;
    }
    blocks.push(SpecBlock {
        stage: hidden.len(),
        desc: BlockDesc::Plain(LayerDesc::Dense {
            in_dim: prev,
            out_dim: classes,
            bias: true,
        }),
    });
    ModelSpec {
        name: "mlp".into(),
        classes,
        input: InputSpec::Vector { dim: in_dim },
        blocks,
    }
}

// ---------------------------------------------------------------------------
// Hybrid factorization and width slimming
// ---------------------------------------------------------------------------

/// Replaces every conv/dense layer with factorizable index >= `plan.rho` by
/// its factorized kind at rank `layer_rank(dims, gamma)`. Shortcut projection
/// convs inherit the decision of their block's first main-path layer. The
/// stem (index 0) and a trailing dense classifier stay full unless the plan
/// includes them.
pub fn make_hybrid(spec: &ModelSpec, plan: &HybridPlan) -> Result<ModelSpec> {
    spec.validate()?;
    let entries = spec.factorizable_layers();
    let total = entries.len();
    if plan.rho > total {
        return Err(Error::InvalidArgument(format!(
            "rho {} exceeds factorizable layer count {}",
            plan.rho, total
        )));
    }
    if !(plan.gamma > 0.0 && plan.gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rank ratio must lie in (0, 1], got {}",
            plan.gamma
        )));
    }
    for e in &entries {
        if matches!(
            e.desc,
            LayerDesc::FactorizedConv { .. } | LayerDesc::FactorizedDense { .. }
        ) {
            return Err(Error::InvalidArgument(
                "make_hybrid expects a full-rank spec".into(),
            ));
        }
    }

    let classifier_index = entries.last().and_then(|e| {
        matches!(e.desc, LayerDesc::Dense { .. }).then_some(e.index)
    });

    // base decision for non-shortcut layers
    let base_decision = |e: &FactorizableEntry| -> bool {
        if e.index < plan.rho {
            return false;
        }
        if e.index == 0 && !plan.include_stem {
            return false;
        }
        if Some(e.index) == classifier_index && !plan.include_classifier {
            return false;
        }
        true
    };

    let mut decision = vec![false; total];
    for e in &entries {
        if !e.in_shortcut {
            decision[e.index] = base_decision(e);
        }
    }
    // shortcut convs follow their block's first main-path layer
    for e in &entries {
        if e.in_shortcut {
            let lead = entries
                .iter()
                .find(|other| other.block == e.block && !other.in_shortcut);
            decision[e.index] = match lead {
                Some(lead) => decision[lead.index],
                None => base_decision(e),
            };
        }
    }

    let mut next_index = 0usize;
    let map_layer = |l: &LayerDesc, next_index: &mut usize| -> Result<LayerDesc> {
        if !l.is_factorizable() {
            return Ok(*l);
        }
        let idx = *next_index;
        *next_index += 1;
        if !decision[idx] {
            return Ok(*l);
        }
        match *l {
            LayerDesc::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => Ok(LayerDesc::FactorizedConv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                rank: layer_rank_conv(in_ch, out_ch, kernel, plan.gamma)?,
            }),
            LayerDesc::Dense { in_dim, out_dim, bias } => Ok(LayerDesc::FactorizedDense {
                in_dim,
                out_dim,
                rank: layer_rank_dense(in_dim, out_dim, plan.gamma)?,
                bias,
            }),
            other => Ok(other),
        }
    };

    // walk in the same order as factorizable_layers: main paths before shortcuts
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for sb in &spec.blocks {
        let desc = match &sb.desc {
            BlockDesc::Plain(l) => BlockDesc::Plain(map_layer(l, &mut next_index)?),
            BlockDesc::Residual { main, shortcut } => {
                let main = main
                    .iter()
                    .map(|l| map_layer(l, &mut next_index))
                    .collect::<Result<Vec<_>>>()?;
                let shortcut = shortcut
                    .iter()
                    .map(|l| map_layer(l, &mut next_index))
                    .collect::<Result<Vec<_>>>()?;
                BlockDesc::Residual { main, shortcut }
            }
        };
        blocks.push(SpecBlock {
            stage: sb.stage,
            desc,
        });
    }
    let hybrid = ModelSpec {
        name: format!("{}[rho={},gamma={}]", spec.name, plan.rho, plan.gamma),
        classes: spec.classes,
        input: spec.input,
        blocks,
    };
    hybrid.validate()?;
    Ok(hybrid)
}

/// Uniform channel slimming: every hidden width becomes
/// `max(1, floor(omega * width))`. The stem's input channels and the
/// classifier's output count are unchanged; the slim model's channels are
/// the leading slice of the full model's, which is what channel aggregation
/// relies on.
pub fn width_slim(spec: &ModelSpec, omega: f64) -> Result<ModelSpec> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "width ratio must lie in (0, 1], got {omega}"
        )));
    }
    spec.validate()?;
    let scale = |c: usize| -> usize { ((omega * c as f64).floor() as usize).max(1) };

    let input_width = match spec.input {
        InputSpec::Image { channels } => channels,
        InputSpec::Vector { dim } => dim,
    };
    let entries = spec.factorizable_layers();
    let classifier_index = entries.last().and_then(|e| {
        matches!(e.desc, LayerDesc::Dense { .. }).then_some(e.index)
    });

    let mut next_index = 0usize;
    let mut map_layer = |l: &LayerDesc| -> Result<LayerDesc> {
        let fact_idx = if l.is_factorizable() {
            let i = next_index;
            next_index += 1;
            Some(i)
        } else {
            None
        };
        match *l {
            LayerDesc::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let in_slim = if in_ch == input_width && fact_idx == Some(0) {
                    in_ch
                } else {
                    scale(in_ch)
                };
                Ok(LayerDesc::Conv {
                    in_ch: in_slim,
                    out_ch: scale(out_ch),
                    kernel,
                    stride,
                    pad,
                })
            }
            LayerDesc::Dense { in_dim, out_dim, bias } => {
                let first = fact_idx == Some(0);
                let last = fact_idx == classifier_index;
                Ok(LayerDesc::Dense {
                    in_dim: if first { in_dim } else { scale(in_dim) },
                    out_dim: if last { out_dim } else { scale(out_dim) },
                    bias,
                })
            }
            LayerDesc::BatchNorm { channels } => Ok(LayerDesc::BatchNorm {
                channels: scale(channels),
            }),
            LayerDesc::FactorizedConv { .. } | LayerDesc::FactorizedDense { .. } => Err(
                Error::InvalidArgument("width_slim expects a full-rank spec".into()),
            ),
            other => Ok(other),
        }
    };

    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for sb in &spec.blocks {
        let desc = match &sb.desc {
            BlockDesc::Plain(l) => BlockDesc::Plain(map_layer(l)?),
            BlockDesc::Residual { main, shortcut } => {
                // factorizable order: main before shortcut, matching the walker
                let main = main.iter().map(&mut map_layer).collect::<Result<Vec<_>>>()?;
                let shortcut = shortcut
                    .iter()
                    .map(&mut map_layer)
                    .collect::<Result<Vec<_>>>()?;
                BlockDesc::Residual { main, shortcut }
            }
        };
        blocks.push(SpecBlock {
            stage: sb.stage,
            desc,
        });
    }
    let slim = ModelSpec {
        name: format!("{}[omega={omega}]", spec.name),
        classes: spec.classes,
        input: spec.input,
        blocks,
    };
    slim.validate()?;
    Ok(slim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorize::count_params;

    #[test]
    fn resnet18_cifar10_exact_parameter_count() {
        let spec = build_resnet18_cifar(10);
        spec.validate().unwrap();
        assert_eq!(count_params(&spec), 11_173_962);
    }

    #[test]
    fn resnet34_cifar100_parameter_count_near_paper() {
        let spec = build_resnet34_cifar(100);
        spec.validate().unwrap();
        let params = count_params(&spec) as f64;
        let target = 21.33e6;
        assert!((params - target).abs() / target <= 0.005, "got {params}");
    }

    #[test]
    fn resnet_stem_is_3x3_stride1_pad1() {
        let spec = build_resnet18_cifar(10);
        match spec.blocks[0].desc {
            BlockDesc::Plain(LayerDesc::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            }) => {
                assert_eq!((in_ch, out_ch, kernel, stride, pad), (3, 64, 3, 1, 1));
            }
            ref other => panic!("unexpected stem {other:?}"),
        }
    }

    #[test]
    fn tiny_cnn_param_count_matches_hand_sum() {
        let spec = build_tiny_cnn(1, 2);
        spec.validate().unwrap();
        // conv 1->8: 72, bn 16, conv 8->16: 1152, bn 32,
        // conv 16->32: 4608, bn 64, dense 32*2+2 = 66
        assert_eq!(count_params(&spec), 72 + 16 + 1152 + 32 + 4608 + 64 + 66);
    }

    #[test]
    fn hybrid_rho_l_is_identity() {
        let spec = build_tiny_cnn(3, 4);
        let plan = HybridPlan::new(spec.factorizable_count(), 0.5);
        let hybrid = make_hybrid(&spec, &plan).unwrap();
        for (a, b) in spec.blocks.iter().zip(hybrid.blocks.iter()) {
            assert_eq!(a.desc, b.desc);
        }
    }

    #[test]
    fn hybrid_factorized_layer_params_follow_formula() {
        let spec = build_resnet18_cifar(10);
        let plan = HybridPlan {
            rho: spec.rho_for_stage(2),
            gamma: 0.25,
            include_stem: false,
            include_classifier: false,
        };
        let hybrid = make_hybrid(&spec, &plan).unwrap();
        for e in hybrid.factorizable_layers() {
            if let LayerDesc::FactorizedConv {
                in_ch,
                out_ch,
                kernel,
                rank,
                ..
            } = e.desc
            {
                assert_eq!(
                    crate::factorize::layer_params(&e.desc),
                    rank * kernel * (in_ch + out_ch)
                );
                assert_eq!(
                    rank,
                    layer_rank_conv(in_ch, out_ch, kernel, 0.25).unwrap()
                );
            }
        }
        // stage 1 stays full
        for e in hybrid.factorizable_layers() {
            if e.stage < 2 {
                assert!(matches!(e.desc, LayerDesc::Conv { .. }));
            }
        }
    }

    #[test]
    fn hybrid_param_counts_monotone_in_gamma_and_rho() {
        let spec = build_resnet18_cifar(10);
        let gammas = [0.5, 0.25, 0.125, 0.083];
        let rho = spec.rho_for_stage(2);
        let mut prev = usize::MAX;
        for &g in &gammas {
            let hybrid = make_hybrid(&spec, &HybridPlan::new(rho, g)).unwrap();
            let p = count_params(&hybrid);
            assert!(p < prev, "params not strictly decreasing in gamma");
            prev = p;
        }
        // non-increasing in decreasing rho at fixed gamma < 1
        let mut prev = 0usize;
        for stage in (1..=5).rev() {
            let rho = spec.rho_for_stage(stage);
            let hybrid = make_hybrid(&spec, &HybridPlan::new(rho, 0.25)).unwrap();
            let p = count_params(&hybrid);
            if prev != 0 {
                assert!(p <= prev, "params increased as rho decreased");
            }
            prev = p;
        }
    }

    #[test]
    fn hybrid_preserves_interface() {
        let spec = build_resnet18_cifar(10);
        for g in [0.5, 0.25, 0.083] {
            for stage in [1, 2, 4] {
                let plan = HybridPlan::new(spec.rho_for_stage(stage), g);
                let hybrid = make_hybrid(&spec, &plan).unwrap();
                hybrid.validate().unwrap();
                assert_eq!(hybrid.classes, spec.classes);
                assert_eq!(hybrid.input, spec.input);
            }
        }
    }

    #[test]
    fn width_slim_identity_and_conv_example() {
        let spec = build_resnet18_cifar(10);
        let same = width_slim(&spec, 1.0).unwrap();
        for (a, b) in spec.blocks.iter().zip(same.blocks.iter()) {
            assert_eq!(a.desc, b.desc);
        }

        let half = width_slim(&spec, 0.5).unwrap();
        // layer1 conv 64x64x3x3 becomes 32x32x3x3 = 9216 params
        let e = half
            .factorizable_layers()
            .into_iter()
            .find(|e| e.stage == 1)
            .unwrap();
        match e.desc {
            LayerDesc::Conv { in_ch, out_ch, kernel, .. } => {
                assert_eq!((in_ch, out_ch, kernel), (32, 32, 3));
                assert_eq!(crate::factorize::layer_params(&e.desc), 9216);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn width_slim_keeps_stem_input_and_class_count() {
        let spec = build_resnet18_cifar(10);
        let slim = width_slim(&spec, 0.35).unwrap();
        slim.validate().unwrap();
        match slim.blocks[0].desc {
            BlockDesc::Plain(LayerDesc::Conv { in_ch, out_ch, .. }) => {
                assert_eq!(in_ch, 3);
                assert_eq!(out_ch, 22);
            }
            ref other => panic!("unexpected stem {other:?}"),
        }
        let last = slim.factorizable_layers().pop().unwrap();
        match last.desc {
            LayerDesc::Dense { out_dim, .. } => assert_eq!(out_dim, 10),
            other => panic!("unexpected classifier {other:?}"),
        }
    }

    #[test]
    fn width_slim_nesting_is_prefixwise() {
        let spec = build_tiny_cnn(3, 4);
        let narrow = width_slim(&spec, 0.3).unwrap();
        let wide = width_slim(&spec, 0.7).unwrap();
        let n = narrow.factorizable_layers();
        let w = wide.factorizable_layers();
        for (a, b) in n.iter().zip(w.iter()) {
            match (a.desc, b.desc) {
                (
                    LayerDesc::Conv { in_ch: i1, out_ch: o1, .. },
                    LayerDesc::Conv { in_ch: i2, out_ch: o2, .. },
                ) => {
                    assert!(i1 <= i2 && o1 <= o2);
                }
                (
                    LayerDesc::Dense { in_dim: i1, out_dim: o1, .. },
                    LayerDesc::Dense { in_dim: i2, out_dim: o2, .. },
                ) => {
                    assert!(i1 <= i2 && o1 <= o2);
                }
                _ => panic!("layer kinds changed under slimming"),
            }
        }
    }

    #[test]
    fn width_slim_resnet18_param_ladder() {
        let spec = build_resnet18_cifar(10);
        // paper's table lists 2.80M at half width and 1.37M at 0.35
        let half = count_params(&width_slim(&spec, 0.5).unwrap()) as f64;
        assert!((half - 2.80e6).abs() / 2.80e6 <= 0.05, "got {half}");
        let small = count_params(&width_slim(&spec, 0.35).unwrap()) as f64;
        assert!((small - 1.37e6).abs() / 1.37e6 <= 0.05, "got {small}");
    }

    #[test]
    fn validation_rejects_non_composing_sequences() {
        let mut spec = build_tiny_cnn(3, 4);
        // corrupt the second conv's input channels
        for sb in spec.blocks.iter_mut() {
            if let BlockDesc::Plain(LayerDesc::Conv { in_ch, .. }) = &mut sb.desc {
                if *in_ch == 8 {
                    *in_ch = 9;
                    break;
                }
            }
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn invalid_rho_is_rejected() {
        let spec = build_tiny_cnn(3, 4);
        let plan = HybridPlan::new(spec.factorizable_count() + 1, 0.5);
        assert!(make_hybrid(&spec, &plan).is_err());
    }

    #[test]
    fn mlp_builder_validates() {
        let spec = build_mlp(16, &[32, 8], 3);
        spec.validate().unwrap();
        assert_eq!(count_params(&spec), 16 * 32 + 32 + 32 * 8 + 8 + 8 * 3 + 3);
    }
}
