use rand_distr::{Distribution, Normal};

use super::ops::{self, ConvCache, DropMask, NormCache, UpCache};
use super::{ArchitectureConfig, Embedding, LatentMap, Mode, ParamStore};
use crate::error::{Result, RgfsError};
use crate::rng::{derive_rng, derive_seed, stream};
use crate::tensor::Tensor3;

#[derive(Debug, Clone)]
struct StageIdx {
    conv_w: usize,
    conv_b: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<StageIdx>,
    bottleneck_w: usize,
    bottleneck_b: usize,
    /// `(weight, bias, out_channels)` per upsampling stage.
    ups: Vec<(usize, usize, usize)>,
    head_w: usize,
    head_b: usize,
}

/// Allocates every parameter in a fixed order. With `seed = None` all
/// tensors are zero (used to check the layout of loaded checkpoints).
fn build(arch: &ArchitectureConfig, seed: Option<u64>) -> (ParamStore, Layout) {
    let mut store = ParamStore::new();
    let mut rng = derive_rng(seed.unwrap_or(0), stream::INIT, &[]);
    let mut normal = |n: usize, std: f64| -> Vec<f64> {
        match seed {
            Some(_) => {
                let d = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            None => vec![0.0; n],
        }
    };
    let ones = |n: usize| -> Vec<f64> { vec![if seed.is_some() { 1.0 } else { 0.0 }; n] };
    let leaky_gain = (2.0 / (1.0 + ops::LEAKY_SLOPE * ops::LEAKY_SLOPE)).sqrt();

    let mut stages = Vec::new();
    let mut cin = arch.input.channels;
    for (s, &co) in arch.stage_channels.iter().enumerate() {
        let fan_in = (cin * 9) as f64;
        let conv_w = store.push(
            format!("encoder.stage{s}.conv.weight"),
            vec![co, cin, 3, 3],
            normal(co * cin * 9, leaky_gain / fan_in.sqrt()),
        );
        let conv_b = store.push(format!("encoder.stage{s}.conv.bias"), vec![co], vec![0.0; co]);
        let gamma = store.push(format!("encoder.stage{s}.norm.gamma"), vec![co], ones(co));
        let beta = store.push(format!("encoder.stage{s}.norm.beta"), vec![co], vec![0.0; co]);
        stages.push(StageIdx {
            conv_w,
            conv_b,
            gamma,
            beta,
        });
        cin = co;
    }

    let d = arch.bottleneck_channels;
    let bottleneck_w = store.push(
        "bottleneck.conv.weight",
        vec![d, cin, 1, 1],
        normal(d * cin, leaky_gain / (cin as f64).sqrt()),
    );
    let bottleneck_b = store.push("bottleneck.conv.bias", vec![d], vec![0.0; d]);

    // decoder mirrors the encoder widths back down to the image channels
    let mut outs: Vec<usize> = arch.stage_channels.iter().rev().skip(1).copied().collect();
    outs.push(arch.input.channels);
    let mut ups = Vec::new();
    let mut cin = d;
    for (i, &co) in outs.iter().enumerate() {
        let w = store.push(
            format!("decoder.up{i}.weight"),
            vec![cin, co, 2, 2],
            normal(cin * co * 4, leaky_gain / (cin as f64).sqrt()),
        );
        let b = store.push(format!("decoder.up{i}.bias"), vec![co], vec![0.0; co]);
        ups.push((w, b, co));
        cin = co;
    }

    let dim = arch.embedding_dim;
    let head_w = store.push("head.fc.weight", vec![dim, d], normal(dim * d, 1.0 / (d as f64).sqrt()));
    let head_b = store.push("head.fc.bias", vec![dim], vec![0.0; dim]);

    (
        store,
        Layout {
            stages,
            bottleneck_w,
            bottleneck_b,
            ups,
            head_w,
            head_b,
        },
    )
}

#[derive(Debug, Clone)]
struct StageTrace {
    conv: ConvCache,
    norm: NormCache,
    /// Post-activation, pre-DropBlock values.
    act: Tensor3,
    drop: Option<DropMask>,
}

/// Cached activations of the deterministic encoder stages.
#[derive(Debug, Clone)]
pub struct TrunkTrace {
    stages: Vec<StageTrace>,
    pub output: Tensor3,
}

/// Cached activations of the stochastic stages and the bottleneck.
#[derive(Debug, Clone)]
pub struct BranchTrace {
    stages: Vec<StageTrace>,
    bottleneck: ConvCache,
    pub z: LatentMap,
}

impl BranchTrace {
    /// DropBlock masks realised in this pass, one per stochastic stage.
    pub fn drop_masks(&self) -> Vec<Option<&DropMask>> {
        self.stages.iter().map(|s| s.drop.as_ref()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pooled: Vec<f64>,
    z_shape: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    ups: Vec<UpCache>,
    /// Output of each upsampling stage after its nonlinearity.
    outs: Vec<Tensor3>,
}

/// Encoder, bottleneck, decoder and embedding head with their parameters.
#[derive(Debug, Clone)]
pub struct Network {
    arch: ArchitectureConfig,
    params: ParamStore,
    layout: Layout,
}

impl Network {
    /// Randomly initialised network (He-style normal weights, zero biases).
    pub fn new(arch: ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (params, layout) = build(&arch, Some(seed));
        Ok(Network { arch, params, layout })
    }

    /// Wraps loaded parameters after checking every name and shape.
    pub fn from_params(arch: ArchitectureConfig, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        let (expected, layout) = build(&arch, None);
        if params.len() != expected.len() {
            return Err(RgfsError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(params.iter()) {
            if e.name != p.name || e.shape != p.shape {
                return Err(RgfsError::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    e.name, e.shape, p.name, p.shape
                )));
            }
        }
        if !params.all_finite() {
            return Err(RgfsError::NonFinite("loaded parameters".into()));
        }
        Ok(Network { arch, params, layout })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn zero_grads(&self) -> ParamStore {
        self.params.zeros_like()
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        let s = self.arch.input;
        if x.shape() != (s.channels, s.height, s.width) {
            return Err(RgfsError::Shape(format!(
                "input is {:?} (C,H,W), network expects ({}, {}, {})",
                x.shape(),
                s.channels,
                s.height,
                s.width
            )));
        }
        Ok(())
    }

    fn stage_forward(&self, s: usize, x: &Tensor3, train: bool, seed: u64) -> (Tensor3, StageTrace) {
        let idx = &self.layout.stages[s];
        let co = self.arch.stage_channels[s];
        let p = &self.params;
        let (y, conv) = ops::conv2d_forward(x, p.get(idx.conv_w), p.get(idx.conv_b), co, 3);
        let (mut act, norm) = ops::group_norm_forward(&y, p.get(idx.gamma), p.get(idx.beta), self.arch.norm_groups);
        ops::leaky_relu_inplace(&mut act.data);
        let stochastic = s >= self.arch.trunk_stages();
        let db = self.arch.dropblock;
        let (dropped, drop) = if stochastic {
            ops::dropblock(&act, db.block_size, db.drop_prob, derive_seed(seed, stream::PASS, &[s as u64]), train)
        } else {
            (act.clone(), None)
        };
        let out = ops::avg_pool2_forward(&dropped);
        (out, StageTrace { conv, norm, act, drop })
    }

    fn stage_backward(&self, s: usize, grad: &Tensor3, trace: &StageTrace, grads: &mut ParamStore, need_input: bool) -> Option<Tensor3> {
        let idx = &self.layout.stages[s];
        let mut g = ops::avg_pool2_backward(grad);
        if let Some(mask) = &trace.drop {
            ops::apply_drop_mask(&mut g.data, mask);
        }
        ops::leaky_relu_backward_inplace(&mut g.data, &trace.act.data);
        let (gg, gb) = two_mut(grads, idx.gamma, idx.beta);
        let g = ops::group_norm_backward(&g, &trace.norm, self.params.get(idx.gamma), gg, gb);
        let (gw, gbias) = two_mut(grads, idx.conv_w, idx.conv_b);
        ops::conv2d_backward(&g, &trace.conv, self.params.get(idx.conv_w), gw, gbias, need_input)
    }

    /// Runs the deterministic encoder stages.
    pub fn trunk_forward(&self, x: &Tensor3) -> Result<TrunkTrace> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut stages = Vec::with_capacity(self.arch.trunk_stages());
        for s in 0..self.arch.trunk_stages() {
            let (out, t) = self.stage_forward(s, &cur, false, 0);
            stages.push(t);
            cur = out;
        }
        Ok(TrunkTrace { stages, output: cur })
    }

    /// Runs the DropBlock stages and the bottleneck on a trunk output.
    pub fn branch_forward(&self, trunk_out: &Tensor3, mode: Mode, pass_seed: u64) -> BranchTrace {
        let mut cur = trunk_out.clone();
        let mut stages = Vec::new();
        for s in self.arch.trunk_stages()..self.arch.num_stages() {
            let (out, t) = self.stage_forward(s, &cur, mode.is_train(), pass_seed);
            stages.push(t);
            cur = out;
        }
        let p = &self.params;
        let (mut z, bottleneck) = ops::conv2d_forward(
            &cur,
            p.get(self.layout.bottleneck_w),
            p.get(self.layout.bottleneck_b),
            self.arch.bottleneck_channels,
            1,
        );
        ops::leaky_relu_inplace(&mut z.data);
        BranchTrace {
            stages,
            bottleneck,
            z: LatentMap(z),
        }
    }

    /// Backpropagates `grad_z` through the bottleneck and stochastic stages,
    /// returning the gradient at the trunk output.
    pub fn branch_backward(&self, trace: &BranchTrace, grad_z: &Tensor3, grads: &mut ParamStore) -> Tensor3 {
        let mut g = grad_z.clone();
        ops::leaky_relu_backward_inplace(&mut g.data, &trace.z.0.data);
        let (gw, gb) = two_mut(grads, self.layout.bottleneck_w, self.layout.bottleneck_b);
        let mut g = ops::conv2d_backward(&g, &trace.bottleneck, self.params.get(self.layout.bottleneck_w), gw, gb, true)
            .expect("input grad requested");
        let first = self.arch.trunk_stages();
        for (i, t) in trace.stages.iter().enumerate().rev() {
            let s = first + i;
            // the image gradient is never needed
            let need = s > 0;
            match self.stage_backward(s, &g, t, grads, need) {
                Some(next) => g = next,
                None => return Tensor3::zeros(0, 0, 0),
            }
        }
        g
    }

    pub fn trunk_backward(&self, trace: &TrunkTrace, grad: &Tensor3, grads: &mut ParamStore) {
        let mut g = grad.clone();
        for (s, t) in trace.stages.iter().enumerate().rev() {
            match self.stage_backward(s, &g, t, grads, s > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    pub fn head_forward(&self, z: &LatentMap) -> (Embedding, HeadTrace) {
        let pooled = ops::global_avg_pool(&z.0);
        let e = ops::linear_forward(&pooled, self.params.get(self.layout.head_w), self.params.get(self.layout.head_b));
        (
            Embedding(e),
            HeadTrace {
                pooled,
                z_shape: z.0.shape(),
            },
        )
    }

    pub fn head_backward(&self, trace: &HeadTrace, grad_e: &[f64], grads: &mut ParamStore) -> Tensor3 {
        let (gw, gb) = two_mut(grads, self.layout.head_w, self.layout.head_b);
        let gp = ops::linear_backward(grad_e, &trace.pooled, self.params.get(self.layout.head_w), gw, gb);
        ops::global_avg_pool_backward(&gp, trace.z_shape)
    }

    pub fn decoder_forward(&self, z: &LatentMap) -> (Tensor3, DecoderTrace) {
        let mut cur = z.0.clone();
        let mut ups = Vec::new();
        let mut outs = Vec::new();
        let last = self.layout.ups.len() - 1;
        for (i, &(w, b, co)) in self.layout.ups.iter().enumerate() {
            let (mut y, cache) = ops::conv_transpose2_forward(&cur, self.params.get(w), self.params.get(b), co);
            if i == last {
                ops::sigmoid_inplace(&mut y.data);
            } else {
                ops::leaky_relu_inplace(&mut y.data);
            }
            ups.push(cache);
            outs.push(y.clone());
            cur = y;
        }
        (cur, DecoderTrace { ups, outs })
    }

    pub fn decoder_backward(&self, trace: &DecoderTrace, grad_out: &Tensor3, grads: &mut ParamStore) -> Tensor3 {
        let mut g = grad_out.clone();
        let last = self.layout.ups.len() - 1;
        for i in (0..self.layout.ups.len()).rev() {
            let out = &trace.outs[i];
            if i == last {
                for (gv, &y) in g.data.iter_mut().zip(&out.data) {
                    *gv *= y * (1.0 - y);
                }
            } else {
                ops::leaky_relu_backward_inplace(&mut g.data, &out.data);
            }
            let (w, b, _) = self.layout.ups[i];
            let (gw, gb) = two_mut(grads, w, b);
            g = ops::conv_transpose2_backward(&g, &trace.ups[i], self.params.get(w), gw, gb);
        }
        g
    }

    /// Image (or masked image) to latent map.
    pub fn encode(&self, x: &Tensor3, mode: Mode, pass_seed: u64) -> Result<LatentMap> {
        let trunk = self.trunk_forward(x)?;
        Ok(self.branch_forward(&trunk.output, mode, pass_seed).z)
    }

    pub fn embed(&self, z: &LatentMap) -> Result<Embedding> {
        self.check_latent(z)?;
        Ok(self.head_forward(z).0)
    }

    pub fn decode(&self, z: &LatentMap) -> Result<Tensor3> {
        self.check_latent(z)?;
        Ok(self.decoder_forward(z).0)
    }

    /// Both pathways from one shared latent (same DropBlock realisation).
    pub fn forward_full(&self, x: &Tensor3, mode: Mode, pass_seed: u64) -> Result<(Embedding, Tensor3)> {
        let z = self.encode(x, mode, pass_seed)?;
        Ok((self.head_forward(&z).0, self.decoder_forward(&z).0))
    }

    fn check_latent(&self, z: &LatentMap) -> Result<()> {
        if z.0.shape() != self.arch.latent_shape() {
            return Err(RgfsError::Shape(format!(
                "latent is {:?}, network expects {:?}",
                z.0.shape(),
                self.arch.latent_shape()
            )));
        }
        Ok(())
    }
}

fn two_mut(grads: &mut ParamStore, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    grads.pair_mut(a, b)
}
