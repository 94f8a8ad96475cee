//! Runtime model: materialized layers, forward/backward, and the tensor
//! traversal used by SGD, aggregation, and serialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::factorize::{recover_layer, spectral_factorize, FactorizedPair};
use crate::modelspec::{BlockDesc, HybridPlan, LayerDesc, ModelSpec, SpecBlock};
use crate::nn::layers::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, conv2d_backward,
    conv2d_forward, dense_backward, dense_forward, factorized_conv_backward,
    factorized_conv_forward, factorized_dense_backward, factorized_dense_forward,
    flatten_backward, flatten_forward, global_avg_pool_backward, global_avg_pool_forward,
    relu_backward, relu_forward, BnCache, ConvGeometry,
};
use crate::tensor::Tensor;

/// A materialized layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        w: Tensor,
        b: Option<Tensor>,
    },
    FactorizedDense {
        u: Tensor,
        v: Tensor,
        b: Option<Tensor>,
        rank: usize,
    },
    Conv {
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    FactorizedConv {
        u: Tensor,
        v: Tensor,
        stride: usize,
        pad: usize,
        rank: usize,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Relu,
    GlobalAvgPool,
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Plain(Layer),
    Residual {
        main: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

/// A materialized network: the spec plus one [`Layer`] per descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub blocks: Vec<Block>,
}

/// Activation cache for one layer, produced by the training forward pass.
#[derive(Clone, Debug)]
pub enum LayerCache {
    Dense { x: Tensor },
    FactorizedDense { x: Tensor, z: Tensor },
    Conv { x: Tensor },
    FactorizedConv { x: Tensor, z: Tensor },
    BatchNorm { x: Tensor, stats: BnCache },
    Relu { y: Tensor },
    GlobalAvgPool { hw: (usize, usize) },
    Flatten { shape: Vec<usize> },
}

#[derive(Clone, Debug)]
pub enum BlockCache {
    Plain(LayerCache),
    Residual {
        main: Vec<LayerCache>,
        shortcut: Vec<LayerCache>,
    },
}

/// Whole-model activation cache; consumed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ModelCache {
    blocks: Vec<BlockCache>,
}

/// Per-layer parameter gradients, aligned with the model's layer order.
#[derive(Clone, Debug)]
pub enum LayerGrads {
    Dense {
        dw: Tensor,
        db: Option<Tensor>,
    },
    FactorizedDense {
        du: Tensor,
        dv: Tensor,
        db: Option<Tensor>,
    },
    Conv {
        dw: Tensor,
    },
    FactorizedConv {
        du: Tensor,
        dv: Tensor,
    },
    BatchNorm {
        dgamma: Tensor,
        dbeta: Tensor,
    },
    None,
}

pub type Gradients = Vec<LayerGrads>;

impl Layer {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Dense { w, b } => {
                let y = match b {
                    Some(b) => dense_forward(x, w, b)?,
                    None => crate::tensor::matmul(x, w)?,
                };
                Ok((y, LayerCache::Dense { x: x.clone() }))
            }
            Layer::FactorizedDense { u, v, b, .. } => {
                let (mut y, z) = factorized_dense_forward(x, u, v)?;
                if let Some(b) = b {
                    add_bias(&mut y, b);
                }
                Ok((y, LayerCache::FactorizedDense { x: x.clone(), z }))
            }
            Layer::Conv { w, stride, pad } => {
                let y = conv2d_forward(
                    x,
                    w,
                    ConvGeometry {
                        stride: (*stride, *stride),
                        pad: (*pad, *pad),
                    },
                )?;
                Ok((y, LayerCache::Conv { x: x.clone() }))
            }
            Layer::FactorizedConv { u, v, stride, pad, .. } => {
                let (y, z) = factorized_conv_forward(x, u, v, *stride, *pad)?;
                Ok((y, LayerCache::FactorizedConv { x: x.clone(), z }))
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                if train {
                    let (y, stats) =
                        batchnorm_forward_train(x, gamma, beta, running_mean, running_var)?;
                    Ok((y, LayerCache::BatchNorm { x: x.clone(), stats }))
                } else {
                    let y = batchnorm_forward_eval(x, gamma, beta, running_mean, running_var)?;
                    // eval-mode stats are fixed; cache holds them for symmetry
                    let stats = BnCache {
                        mean: running_mean.data().to_vec(),
                        var: running_var.data().to_vec(),
                    };
                    Ok((y, LayerCache::BatchNorm { x: x.clone(), stats }))
                }
            }
            Layer::Relu => {
                let y = relu_forward(x);
                Ok((y.clone(), LayerCache::Relu { y }))
            }
            Layer::GlobalAvgPool => {
                let (y, hw) = global_avg_pool_forward(x)?;
                Ok((y, LayerCache::GlobalAvgPool { hw }))
            }
            Layer::Flatten => {
                let (y, shape) = flatten_forward(x)?;
                Ok((y, LayerCache::Flatten { shape }))
            }
        }
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { w, b } => match b {
                Some(b) => dense_forward(x, w, b),
                None => crate::tensor::matmul(x, w),
            },
            Layer::FactorizedDense { u, v, b, .. } => {
                let (mut y, _) = factorized_dense_forward(x, u, v)?;
                if let Some(b) = b {
                    add_bias(&mut y, b);
                }
                Ok(y)
            }
            Layer::Conv { w, stride, pad } => conv2d_forward(
                x,
                w,
                ConvGeometry {
                    stride: (*stride, *stride),
                    pad: (*pad, *pad),
                },
            ),
            Layer::FactorizedConv { u, v, stride, pad, .. } => {
                factorized_conv_forward(x, u, v, *stride, *pad).map(|(y, _)| y)
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => batchnorm_forward_eval(x, gamma, beta, running_mean, running_var),
            Layer::Relu => Ok(relu_forward(x)),
            Layer::GlobalAvgPool => global_avg_pool_forward(x).map(|(y, _)| y),
            Layer::Flatten => flatten_forward(x).map(|(y, _)| y),
        }
    }

    fn backward(&self, cache: &LayerCache, dy: &Tensor) -> Result<(Tensor, LayerGrads)> {
        match (self, cache) {
            (Layer::Dense { w, b }, LayerCache::Dense { x }) => {
                let (dx, dw, db) = dense_backward(x, w, dy)?;
                Ok((
                    dx,
                    LayerGrads::Dense {
                        dw,
                        db: b.as_ref().map(|_| db),
                    },
                ))
            }
            (Layer::FactorizedDense { u, v, b, .. }, LayerCache::FactorizedDense { x, z }) => {
                let (dx, du, dv) = factorized_dense_backward(x, u, v, z, dy)?;
                let db = b.as_ref().map(|_| {
                    let n = dy.shape()[1];
                    let mut db = Tensor::zeros(&[n]);
                    for i in 0..dy.shape()[0] {
                        for j in 0..n {
                            db.data_mut()[j] += dy.at2(i, j);
                        }
                    }
                    db
                });
                Ok((dx, LayerGrads::FactorizedDense { du, dv, db }))
            }
            (Layer::Conv { w, stride, pad }, LayerCache::Conv { x }) => {
                let (dx, dw) = conv2d_backward(
                    x,
                    w,
                    ConvGeometry {
                        stride: (*stride, *stride),
                        pad: (*pad, *pad),
                    },
                    dy,
                )?;
                Ok((dx, LayerGrads::Conv { dw }))
            }
            (
                Layer::FactorizedConv { u, v, stride, pad, .. },
                LayerCache::FactorizedConv { x, z },
            ) => {
                let (dx, du, dv) = factorized_conv_backward(x, u, v, z, *stride, *pad, dy)?;
                Ok((dx, LayerGrads::FactorizedConv { du, dv }))
            }
            (Layer::BatchNorm { gamma, .. }, LayerCache::BatchNorm { x, stats }) => {
                let (dx, dgamma, dbeta) = batchnorm_backward(x, gamma, stats, dy)?;
                Ok((dx, LayerGrads::BatchNorm { dgamma, dbeta }))
            }
            (Layer::Relu, LayerCache::Relu { y }) => Ok((relu_backward(y, dy), LayerGrads::None)),
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool { hw }) => {
                Ok((global_avg_pool_backward(dy, *hw), LayerGrads::None))
            }
            (Layer::Flatten, LayerCache::Flatten { shape }) => {
                Ok((flatten_backward(dy, shape)?, LayerGrads::None))
            }
            _ => Err(Error::State(
                "backward called with a cache from a different layer".into(),
            )),
        }
    }
}

impl Model {
    /// Training-mode forward pass. Updates batch-norm running statistics and
    /// returns the activations needed by [`Model::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ModelCache)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in self.blocks.iter_mut() {
            match block {
                Block::Plain(layer) => {
                    let (y, c) = layer.forward(&cur, true)?;
                    caches.push(BlockCache::Plain(c));
                    cur = y;
                }
                Block::Residual { main, shortcut } => {
                    let mut main_out = cur.clone();
                    let mut main_caches = Vec::with_capacity(main.len());
                    for layer in main.iter_mut() {
                        let (y, c) = layer.forward(&main_out, true)?;
                        main_caches.push(c);
                        main_out = y;
                    }
                    let mut short_out = cur.clone();
                    let mut short_caches = Vec::with_capacity(shortcut.len());
                    for layer in shortcut.iter_mut() {
                        let (y, c) = layer.forward(&short_out, true)?;
                        short_caches.push(c);
                        short_out = y;
                    }
                    let mut sum = main_out;
                    sum.add_scaled(&short_out, 1.0)?;
                    caches.push(BlockCache::Residual {
                        main: main_caches,
                        shortcut: short_caches,
                    });
                    cur = sum;
                }
            }
        }
        debug_assert!(cur.all_finite(), "forward produced non-finite values");
        Ok((cur, ModelCache { blocks: caches }))
    }

    /// Inference forward pass using batch-norm running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for block in &self.blocks {
            match block {
                Block::Plain(layer) => cur = layer.forward_eval(&cur)?,
                Block::Residual { main, shortcut } => {
                    let mut main_out = cur.clone();
                    for layer in main {
                        main_out = layer.forward_eval(&main_out)?;
                    }
                    let mut short_out = cur.clone();
                    for layer in shortcut {
                        short_out = layer.forward_eval(&short_out)?;
                    }
                    main_out.add_scaled(&short_out, 1.0)?;
                    cur = main_out;
                }
            }
        }
        Ok(cur)
    }

    /// Back-propagates `dout` through the cached activations, returning
    /// parameter gradients in forward layer order (residual blocks: main
    /// path first, then shortcut).
    pub fn backward(&self, cache: &ModelCache, dout: &Tensor) -> Result<Gradients> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::State("cache does not match model".into()));
        }
        let mut grads_rev: Vec<Vec<LayerGrads>> = Vec::with_capacity(self.blocks.len());
        let mut dcur = dout.clone();
        for (block, bcache) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            match (block, bcache) {
                (Block::Plain(layer), BlockCache::Plain(c)) => {
                    let (dx, g) = layer.backward(c, &dcur)?;
                    grads_rev.push(vec![g]);
                    dcur = dx;
                }
                (
                    Block::Residual { main, shortcut },
                    BlockCache::Residual {
                        main: mc,
                        shortcut: sc,
                    },
                ) => {
                    let dsum = dcur.clone();
                    let mut dmain = dsum.clone();
                    let mut main_grads_rev = Vec::with_capacity(main.len());
                    for (layer, c) in main.iter().zip(mc.iter()).rev() {
                        let (dx, g) = layer.backward(c, &dmain)?;
                        main_grads_rev.push(g);
                        dmain = dx;
                    }
                    let mut dshort = dsum;
                    let mut short_grads_rev = Vec::with_capacity(shortcut.len());
                    for (layer, c) in shortcut.iter().zip(sc.iter()).rev() {
                        let (dx, g) = layer.backward(c, &dshort)?;
                        short_grads_rev.push(g);
                        dshort = dx;
                    }
                    dmain.add_scaled(&dshort, 1.0)?;
                    dcur = dmain;

                    main_grads_rev.reverse();
                    short_grads_rev.reverse();
                    main_grads_rev.extend(short_grads_rev);
                    grads_rev.push(main_grads_rev);
                }
                _ => return Err(Error::State("cache does not match model".into())),
            }
        }
        grads_rev.reverse();
        Ok(grads_rev.into_iter().flatten().collect())
    }

    /// Visits layers in forward order (residual: main then shortcut), the
    /// same order gradients and velocities use.
    pub fn visit_layers<'a>(&'a self) -> Vec<&'a Layer> {
        let mut out = Vec::new();
        for block in &self.blocks {
            match block {
                Block::Plain(l) => out.push(l),
                Block::Residual { main, shortcut } => {
                    out.extend(main.iter());
                    out.extend(shortcut.iter());
                }
            }
        }
        out
    }

    pub fn visit_layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut out = Vec::new();
        for block in self.blocks.iter_mut() {
            match block {
                Block::Plain(l) => out.push(l),
                Block::Residual { main, shortcut } => {
                    out.extend(main.iter_mut());
                    out.extend(shortcut.iter_mut());
                }
            }
        }
        out
    }

    /// Named tensors in canonical order: every parameter and running
    /// statistic, keyed `layer{index}.{role}`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.visit_layers().into_iter().enumerate() {
            match layer {
                Layer::Dense { w, b } => {
                    out.push((format!("layer{i}.w"), w));
                    if let Some(b) = b {
                        out.push((format!("layer{i}.b"), b));
                    }
                }
                Layer::FactorizedDense { u, v, b, .. } => {
                    out.push((format!("layer{i}.u"), u));
                    out.push((format!("layer{i}.v"), v));
                    if let Some(b) = b {
                        out.push((format!("layer{i}.b"), b));
                    }
                }
                Layer::Conv { w, .. } => out.push((format!("layer{i}.w"), w)),
                Layer::FactorizedConv { u, v, .. } => {
                    out.push((format!("layer{i}.u"), u));
                    out.push((format!("layer{i}.v"), v));
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((format!("layer{i}.gamma"), gamma));
                    out.push((format!("layer{i}.beta"), beta));
                    out.push((format!("layer{i}.running_mean"), running_mean));
                    out.push((format!("layer{i}.running_var"), running_var));
                }
                Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => {}
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.visit_layers_mut() {
            match layer {
                Layer::Dense { w, b } => {
                    out.push(w);
                    if let Some(b) = b {
                        out.push(b);
                    }
                }
                Layer::FactorizedDense { u, v, b, .. } => {
                    out.push(u);
                    out.push(v);
                    if let Some(b) = b {
                        out.push(b);
                    }
                }
                Layer::Conv { w, .. } => out.push(w),
                Layer::FactorizedConv { u, v, .. } => {
                    out.push(u);
                    out.push(v);
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push(gamma);
                    out.push(beta);
                    out.push(running_mean);
                    out.push(running_var);
                }
                Layer::Relu | Layer::GlobalAvgPool | Layer::Flatten => {}
            }
        }
        out
    }

    /// Parameter-wise weighted combination `Σ weights[p] · models[p]`,
    /// applied to every tensor including biases and batch-norm statistics.
    /// All models must share one spec.
    pub fn weighted_combine(models: &[&Model], weights: &[f64]) -> Result<Model> {
        if models.is_empty() || models.len() != weights.len() {
            return Err(Error::InvalidArgument(
                "weighted_combine needs matching models and weights".into(),
            ));
        }
        let spec0 = &models[0].spec;
        for m in models.iter().skip(1) {
            if m.spec != *spec0 {
                return Err(Error::dimension(
                    "cannot combine models with different specs",
                ));
            }
        }
        let mut out = models[0].clone();
        for t in out.tensors_mut() {
            *t = t.scale(weights[0]);
        }
        for (m, &w) in models.iter().zip(weights.iter()).skip(1) {
            let mut acc = out.tensors_mut();
            let theirs = m.named_tensors();
            for (mine, (_, other)) in acc.iter_mut().zip(theirs.iter()) {
                mine.add_scaled(other, w)?;
            }
        }
        for t in out.tensors_mut() {
            t.check_finite("aggregated model")?;
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Materializes a spec into a model with He fan-in initialization, seeded
/// and deterministic. Factorized layers draw the equivalent full-rank weight
/// and spectrally factorize it at the spec's rank.
pub fn materialize(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for sb in &spec.blocks {
        blocks.push(materialize_block(sb, &mut rng)?);
    }
    Ok(Model {
        spec: spec.clone(),
        blocks,
    })
}

fn materialize_block(sb: &SpecBlock, rng: &mut ChaCha8Rng) -> Result<Block> {
    Ok(match &sb.desc {
        BlockDesc::Plain(l) => Block::Plain(materialize_layer(l, rng)?),
        BlockDesc::Residual { main, shortcut } => Block::Residual {
            main: main
                .iter()
                .map(|l| materialize_layer(l, rng))
                .collect::<Result<_>>()?,
            shortcut: shortcut
                .iter()
                .map(|l| materialize_layer(l, rng))
                .collect::<Result<_>>()?,
        },
    })
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = StandardNormal;
    Tensor::from_fn(shape, |_| {
        let z: f64 = normal.sample(rng);
        z * std
    })
}

fn materialize_layer(desc: &LayerDesc, rng: &mut ChaCha8Rng) -> Result<Layer> {
    Ok(match *desc {
        LayerDesc::Dense { in_dim, out_dim, bias } => Layer::Dense {
            w: he_tensor(&[in_dim, out_dim], in_dim, rng),
            b: bias.then(|| Tensor::zeros(&[out_dim])),
        },
        LayerDesc::FactorizedDense {
            in_dim,
            out_dim,
            rank,
            bias,
        } => {
            let full = he_tensor(&[in_dim, out_dim], in_dim, rng);
            let pair = spectral_factorize(&full, rank)?;
            Layer::FactorizedDense {
                u: pair.u,
                v: pair.v,
                b: bias.then(|| Tensor::zeros(&[out_dim])),
                rank: pair.rank,
            }
        }
        LayerDesc::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        } => Layer::Conv {
            w: he_tensor(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng),
            stride,
            pad,
        },
        LayerDesc::FactorizedConv {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            rank,
        } => {
            let full = he_tensor(
                &[out_ch, in_ch, kernel, kernel],
                in_ch * kernel * kernel,
                rng,
            );
            let pair = spectral_factorize(&full, rank)?;
            Layer::FactorizedConv {
                u: pair.u,
                v: pair.v,
                stride,
                pad,
                rank: pair.rank,
            }
        }
        LayerDesc::BatchNorm { channels } => Layer::BatchNorm {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
        },
        LayerDesc::Relu => Layer::Relu,
        LayerDesc::GlobalAvgPool => Layer::GlobalAvgPool,
        LayerDesc::Flatten => Layer::Flatten,
    })
}

/// Factorizes a full-rank model per the plan: the spec goes through
/// `make_hybrid` and each affected weight through `spectral_factorize`.
pub fn factorize_model(model: &Model, plan: &HybridPlan) -> Result<Model> {
    let hybrid_spec = crate::modelspec::make_hybrid(&model.spec, plan)?;
    let mut new_blocks = Vec::with_capacity(model.blocks.len());

    // walk hybrid spec layer descriptors in the same order as model layers
    let mut hybrid_descs = Vec::new();
    for sb in &hybrid_spec.blocks {
        match &sb.desc {
            BlockDesc::Plain(l) => hybrid_descs.push(*l),
            BlockDesc::Residual { main, shortcut } => {
                hybrid_descs.extend(main.iter().copied());
                hybrid_descs.extend(shortcut.iter().copied());
            }
        }
    }
    let mut desc_iter = hybrid_descs.into_iter();

    for block in &model.blocks {
        let mut convert = |layer: &Layer| -> Result<Layer> {
            let desc = desc_iter
                .next()
                .ok_or_else(|| Error::State("spec/model layer count mismatch".into()))?;
            factorize_layer(layer, &desc)
        };
        new_blocks.push(match block {
            Block::Plain(l) => Block::Plain(convert(l)?),
            Block::Residual { main, shortcut } => Block::Residual {
                main: main.iter().map(&mut convert).collect::<Result<_>>()?,
                shortcut: shortcut.iter().map(&mut convert).collect::<Result<_>>()?,
            },
        });
    }
    Ok(Model {
        spec: hybrid_spec,
        blocks: new_blocks,
    })
}

fn add_bias(y: &mut Tensor, b: &Tensor) {
    let n = y.shape()[1];
    for i in 0..y.shape()[0] {
        for j in 0..n {
            y.data_mut()[i * n + j] += b.data()[j];
        }
    }
}

fn factorize_layer(layer: &Layer, target: &LayerDesc) -> Result<Layer> {
    Ok(match (layer, target) {
        (Layer::Conv { w, stride, pad }, LayerDesc::FactorizedConv { rank, .. }) => {
            let pair = spectral_factorize(w, *rank)?;
            Layer::FactorizedConv {
                u: pair.u,
                v: pair.v,
                stride: *stride,
                pad: *pad,
                rank: pair.rank,
            }
        }
        (Layer::Dense { w, b }, LayerDesc::FactorizedDense { rank, .. }) => {
            let pair = spectral_factorize(w, *rank)?;
            Layer::FactorizedDense {
                u: pair.u,
                v: pair.v,
                b: b.clone(),
                rank: pair.rank,
            }
        }
        (other, _) => other.clone(),
    })
}

/// Replaces every factorized layer by its recovered full-rank weight,
/// yielding the full-rank architecture. Identity on full models.
pub fn recover_model(model: &Model) -> Result<Model> {
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        blocks.push(match block {
            Block::Plain(l) => Block::Plain(recover_layer_full(l)?),
            Block::Residual { main, shortcut } => Block::Residual {
                main: main.iter().map(recover_layer_full).collect::<Result<_>>()?,
                shortcut: shortcut
                    .iter()
                    .map(recover_layer_full)
                    .collect::<Result<_>>()?,
            },
        });
    }
    let spec = recover_spec(&model.spec);
    Ok(Model { spec, blocks })
}

fn recover_layer_full(layer: &Layer) -> Result<Layer> {
    Ok(match layer {
        Layer::FactorizedConv { u, v, stride, pad, rank } => {
            let pair = FactorizedPair {
                u: u.clone(),
                v: v.clone(),
                rank: *rank,
            };
            Layer::Conv {
                w: recover_layer(&pair)?,
                stride: *stride,
                pad: *pad,
            }
        }
        Layer::FactorizedDense { u, v, b, rank } => {
            let pair = FactorizedPair {
                u: u.clone(),
                v: v.clone(),
                rank: *rank,
            };
            Layer::Dense {
                w: recover_layer(&pair)?,
                b: b.clone(),
            }
        }
        other => other.clone(),
    })
}

/// Spec-level inverse of `make_hybrid`: factorized descriptors revert to
/// their full kinds and the derived name suffix is dropped.
pub fn recover_spec(spec: &ModelSpec) -> ModelSpec {
    let map = |l: &LayerDesc| -> LayerDesc {
        match *l {
            LayerDesc::FactorizedConv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                ..
            } => LayerDesc::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            },
            LayerDesc::FactorizedDense {
                in_dim,
                out_dim,
                bias,
                ..
            } => LayerDesc::Dense {
                in_dim,
                out_dim,
                bias,
            },
            other => other,
        }
    };
    let blocks = spec
        .blocks
        .iter()
        .map(|sb| SpecBlock {
            stage: sb.stage,
            desc: match &sb.desc {
                BlockDesc::Plain(l) => BlockDesc::Plain(map(l)),
                BlockDesc::Residual { main, shortcut } => BlockDesc::Residual {
                    main: main.iter().map(map).collect(),
                    shortcut: shortcut.iter().map(map).collect(),
                },
            },
        })
        .collect();
    ModelSpec {
        name: spec
            .name
            .split('[')
            .next()
            .unwrap_or(&spec.name)
            .to_string(),
        classes: spec.classes,
        input: spec.input,
        blocks,
    }
}
