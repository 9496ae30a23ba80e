//! Instantiated toy generator and an independent walk over its layers.

use super::{GmSpec, FC_HIDDEN, UPSAMPLING_BLOCKS};
use crate::autodiff::{Graph, NormKind, Var};
use crate::error::{Error, Result};
use crate::labels::{BlockNonlinearity, LastNonlinearity, NormType, Upsampling, NUM_CONTINUOUS};
use crate::nn::{Activation, Bound, Conv, ConvTranspose, Ctx, Dense, Norm, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv,
    ConvTranspose,
    Norm,
    AvgPool,
    Upsample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub block: Option<usize>,
    pub out_channels: usize,
    pub params: usize,
}

#[derive(Clone, Debug)]
enum ConvLayer {
    Plain(Conv),
    Transposed(ConvTranspose),
}

impl ConvLayer {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            ConvLayer::Plain(c) => c.forward(g, p, x),
            ConvLayer::Transposed(c) => c.forward(g, p, x),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    nearest_upsample: bool,
    layers: Vec<(ConvLayer, Option<Norm>)>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub spec: GmSpec,
    fcs: Vec<Dense>,
    fc_side: usize,
    blocks: Vec<Block>,
    out: Conv,
}

fn norm_kind(n: NormType) -> Option<NormKind> {
    match n {
        NormType::None => None,
        NormType::Batch => Some(NormKind::Batch),
        NormType::Instance => Some(NormKind::Instance),
        NormType::Layer => Some(NormKind::Layer),
    }
}

fn block_activation(b: BlockNonlinearity) -> Activation {
    match b {
        BlockNonlinearity::Relu => Activation::Relu,
        BlockNonlinearity::LeakyRelu => Activation::LeakyRelu,
        BlockNonlinearity::Tanh => Activation::Tanh,
        BlockNonlinearity::Sigmoid => Activation::Sigmoid,
    }
}

impl Generator {
    pub fn new(spec: &GmSpec) -> Result<Self> {
        spec.validate()?;
        let f = spec.filters;
        let fc_side = spec.start_side() << spec.pool_layers;
        let fc_out = f * fc_side * fc_side;
        let fcs = if spec.fc_layers == 1 {
            vec![Dense::new("gen.fc0", spec.latent_dim, fc_out)]
        } else {
            vec![
                Dense::new("gen.fc0", spec.latent_dim, FC_HIDDEN),
                Dense::new("gen.fc1", FC_HIDDEN, fc_out),
            ]
        };
        let blocks = (0..spec.blocks)
            .map(|b| {
                let upsample = b < UPSAMPLING_BLOCKS;
                let transposed = upsample && spec.upsampling == Upsampling::Transposed;
                let layers = (0..spec.layers_per_block)
                    .map(|j| {
                        let name = format!("gen.block{b}.conv{j}");
                        let conv = if transposed && j == 0 {
                            ConvLayer::Transposed(ConvTranspose { name, cin: f, cout: f })
                        } else {
                            ConvLayer::Plain(Conv::same(name, f, f))
                        };
                        let norm = norm_kind(spec.norm).map(|k| Norm {
                            batch_stats_only: true,
                            ..Norm::new(format!("gen.block{b}.norm{j}"), k, f)
                        });
                        (conv, norm)
                    })
                    .collect();
                Block {
                    nearest_upsample: upsample && !transposed,
                    layers,
                }
            })
            .collect();
        Ok(Generator {
            spec: spec.clone(),
            fcs,
            fc_side,
            blocks,
            out: Conv::same("gen.out", f, spec.image[0]),
        })
    }

    pub fn init<T: Scalar>(&self) -> ParamStore<T> {
        let seed = self.spec.seed;
        let mut store = ParamStore::new();
        for d in &self.fcs {
            d.init(&mut store, seed);
        }
        for b in &self.blocks {
            for (conv, norm) in &b.layers {
                match conv {
                    ConvLayer::Plain(c) => c.init(&mut store, seed),
                    ConvLayer::Transposed(c) => c.init(&mut store, seed),
                }
                if let Some(n) = norm {
                    n.init(&mut store);
                }
            }
        }
        self.out.init(&mut store, seed);
        store
    }

    /// Latents `[N, latent_dim]` -> images `[N, C, H, W]`, before clamping.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        store: &ParamStore<T>,
        z: Var,
        ctx: &mut Ctx<T>,
    ) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.spec.latent_dim {
            return Err(Error::shape("gen.latent", format!("expected [N, {}], got {s:?}", self.spec.latent_dim)));
        }
        let act = block_activation(self.spec.block_nonlinearity);
        let mut y = z;
        for d in &self.fcs {
            y = d.forward(g, p, y)?;
            y = act.apply(g, y)?;
        }
        let f = self.spec.filters;
        y = g.reshape(y, &[s[0], f, self.fc_side, self.fc_side])?;
        for _ in 0..self.spec.pool_layers {
            y = g.avg_pool(y, 2)?;
        }
        for b in &self.blocks {
            if b.nearest_upsample {
                y = g.upsample_nearest(y, 2)?;
            }
            let mut first = None;
            for (conv, norm) in &b.layers {
                y = conv.forward(g, p, y)?;
                if let Some(n) = norm {
                    y = n.forward(g, p, store, y, ctx)?;
                }
                y = act.apply(g, y)?;
                first.get_or_insert(y);
            }
            if self.spec.skip {
                y = g.add(y, first.expect("blocks have at least one layer"))?;
            }
        }
        y = self.out.forward(g, p, y)?;
        match self.spec.last_nonlinearity {
            LastNonlinearity::Tanh => g.tanh(y),
            LastNonlinearity::Linear => Ok(y),
            LastNonlinearity::Sigmoid => {
                let s = g.sigmoid(y)?;
                let s = g.scale(s, 2.0)?;
                g.add_scalar(s, -1.0)
            }
            LastNonlinearity::Relu => {
                let r = g.relu(y)?;
                let r = g.scale(r, 2.0)?;
                g.add_scalar(r, -1.0)
            }
        }
    }

    /// Every layer in forward order.
    pub fn layers(&self) -> Vec<LayerDesc> {
        let f = self.spec.filters;
        let mut out = Vec::new();
        for d in &self.fcs {
            out.push(LayerDesc {
                name: d.name.clone(),
                kind: LayerKind::Dense,
                block: None,
                out_channels: d.fout,
                params: d.num_params(),
            });
        }
        for i in 0..self.spec.pool_layers {
            out.push(LayerDesc {
                name: format!("gen.pool{i}"),
                kind: LayerKind::AvgPool,
                block: None,
                out_channels: f,
                params: 0,
            });
        }
        for (bi, b) in self.blocks.iter().enumerate() {
            if b.nearest_upsample {
                out.push(LayerDesc {
                    name: format!("gen.block{bi}.upsample"),
                    kind: LayerKind::Upsample,
                    block: Some(bi),
                    out_channels: f,
                    params: 0,
                });
            }
            for (conv, norm) in &b.layers {
                let (name, kind, cout, params) = match conv {
                    ConvLayer::Plain(c) => (&c.name, LayerKind::Conv, c.cout, c.num_params()),
                    ConvLayer::Transposed(c) => (&c.name, LayerKind::ConvTranspose, c.cout, c.num_params()),
                };
                out.push(LayerDesc {
                    name: name.clone(),
                    kind,
                    block: Some(bi),
                    out_channels: cout,
                    params,
                });
                if let Some(n) = norm {
                    out.push(LayerDesc {
                        name: n.name.clone(),
                        kind: LayerKind::Norm,
                        block: Some(bi),
                        out_channels: n.channels,
                        params: n.num_params(),
                    });
                }
            }
        }
        out.push(LayerDesc {
            name: self.out.name.clone(),
            kind: LayerKind::Conv,
            block: None,
            out_channels: self.out.cout,
            params: self.out.num_params(),
        });
        out
    }
}

/// Continuous counts obtained by walking the instantiated layers.
pub fn layer_walk_counts(gen: &Generator) -> [f64; NUM_CONTINUOUS] {
    let layers = gen.layers();
    let count = |pred: &dyn Fn(&LayerDesc) -> bool| layers.iter().filter(|l| pred(l)).count();
    let is_conv = |l: &LayerDesc| matches!(l.kind, LayerKind::Conv | LayerKind::ConvTranspose);
    let weighted = |l: &LayerDesc| is_conv(l) || l.kind == LayerKind::Dense;
    let blocks: std::collections::BTreeSet<usize> = layers.iter().filter_map(|l| l.block).collect();
    let per_block = blocks
        .iter()
        .map(|&b| count(&|l| l.block == Some(b) && is_conv(l)))
        .max()
        .unwrap_or(0);
    [
        count(&weighted) as f64,
        count(&is_conv) as f64,
        count(&|l| l.kind == LayerKind::Dense) as f64,
        count(&|l| l.kind == LayerKind::AvgPool) as f64,
        count(&|l| l.kind == LayerKind::Norm) as f64,
        layers.iter().filter(|l| is_conv(l)).map(|l| l.out_channels).sum::<usize>() as f64,
        layers.iter().map(|l| l.params).sum::<usize>() as f64,
        blocks.len() as f64,
        per_block as f64,
    ]
}
