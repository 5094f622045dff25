//! Encoder with two decoders: `D_seg` produces `S̄`, whose μ-fold morphological
//! smoothing is `S`; `D_rec` produces the reconstruction `Ī` during training.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Checkpoint, CheckpointEntry, ConvGeom, EntryKind, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Momentum of the running-statistics update.
pub const NORM_MOMENTUM: f32 = 0.1;

/// Default threshold turning `S` into a mask.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Training crop `(k, m, n)`; every dim divisible by 8.
    pub input_shape: [usize; 3],
    /// Stem, then the three residual stages (the last two produce `C3` and `E`,
    /// the first `C2`).
    pub encoder_widths: [usize; 4],
    /// Output channels of the three decoder blocks.
    pub decoder_widths: [usize; 3],
    pub mu: usize,
    pub seed: u64,
    /// Only the reduced residual encoder is implemented.
    pub reduced: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_shape: [32, 128, 128],
            encoder_widths: [16, 16, 32, 64],
            decoder_widths: [16, 8, 4],
            mu: 3,
            seed: 0,
            reduced: true,
        }
    }
}

impl NetworkConfig {
    /// Small network used for tests and phantom experiments.
    pub fn tiny(input_shape: [usize; 3]) -> Self {
        Self { input_shape, encoder_widths: [4, 4, 8, 16], decoder_widths: [8, 4, 4], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.reduced {
            return Err(Error::InvalidArgument("only the reduced encoder is available (reduced = true)".into()));
        }
        check_divisible(self.input_shape)?;
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Every spatial dim must be a positive multiple of 8.
pub fn check_divisible(shape: [usize; 3]) -> Result<()> {
    if shape.iter().any(|&d| d == 0 || d % 8 != 0) {
        return Err(Error::shape("network", format!("spatial dims {shape:?} must be positive multiples of 8")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; builds `D_rec`.
    Train,
    /// Running statistics; `D_rec` is skipped.
    Eval,
}

/// Handles to the three outputs, each `(N, 1, k, m, n)`.
#[derive(Debug, Clone, Copy)]
pub struct NetworkOutputs {
    pub s_bar: Var,
    pub s: Var,
    pub i_rec: Option<Var>,
}

/// Batch statistics of one norm layer from a training forward.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub layer: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// He normal with the given fan-in.
    He(usize),
    /// Normal with std `1/sqrt(fan_in)`.
    Lecun(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
struct NormLayer {
    name: String,
    running_mean: Vec<f32>,
    running_var: Vec<f32>,
}

/// Parameters and running statistics of the network.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
    norms: Vec<NormLayer>,
    norm_index: HashMap<String, usize>,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
    norms: Vec<(String, usize)>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push((name, shape, init));
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, k: [usize; 3]) {
        let kv: usize = k.iter().product();
        self.param(format!("{name}.w"), vec![co, ci, k[0], k[1], k[2]], Init::He(ci * kv));
    }

    fn convt(&mut self, name: &str, ci: usize, co: usize, k: [usize; 3], stride: [usize; 3]) {
        let kv: usize = k.iter().product();
        let sv: usize = stride.iter().product();
        self.param(format!("{name}.w"), vec![ci, co, k[0], k[1], k[2]], Init::He((ci * kv / sv).max(1)));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.param(format!("{name}.gamma"), vec![c], Init::Ones);
        self.param(format!("{name}.beta"), vec![c], Init::Zeros);
        self.norms.push((name.to_string(), c));
    }

    fn residual(&mut self, name: &str, ci: usize, co: usize) {
        self.conv(&format!("{name}.conv1"), ci, co, [3; 3]);
        self.norm(&format!("{name}.bn1"), co);
        self.conv(&format!("{name}.conv2"), co, co, [3; 3]);
        self.norm(&format!("{name}.bn2"), co);
        self.conv(&format!("{name}.down"), ci, co, [1; 3]);
        self.norm(&format!("{name}.bn_down"), co);
    }

    fn decoder(&mut self, name: &str, cfg: &NetworkConfig) {
        let [_, c2, c3, e] = cfg.encoder_widths;
        let [d1, d2, d3] = cfg.decoder_widths;
        for (b, (ci, co)) in [(e, d1), (d1 + c3, d2), (d2 + c2, d3)].into_iter().enumerate() {
            let blk = format!("{name}.block{}", b + 1);
            self.convt(&format!("{blk}.up"), ci, co, [4; 3], [2; 3]);
            self.norm(&format!("{blk}.bn_up"), co);
            self.convt(&format!("{blk}.refine"), co, co, [1, 3, 3], [1; 3]);
            self.norm(&format!("{blk}.bn_refine"), co);
        }
        self.param(format!("{name}.out.w"), vec![d3, 1, 3, 3, 3], Init::Lecun(d3 * 27));
        self.param(format!("{name}.out.b"), vec![1], Init::Zeros);
    }
}

const UP: ConvGeom = ConvGeom { kernel: [4; 3], stride: [2; 3], pad: [1; 3] };
const REFINE: ConvGeom = ConvGeom { kernel: [1, 3, 3], stride: [1; 3], pad: [0, 1, 1] };
const OUT: ConvGeom = ConvGeom { kernel: [3; 3], stride: [1; 3], pad: [1; 3] };

/// Forward-pass context: graph, parameter handles and collected statistics.
struct Ctx<'a, T: Real> {
    net: &'a Network,
    g: &'a mut Graph<T>,
    params: &'a [Var],
    mode: Mode,
    updates: Vec<StatUpdate>,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&self, name: &str) -> Var {
        self.params[self.net.index[name]]
    }

    fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let layer = self.net.norm_index[name];
        match self.mode {
            Mode::Train => {
                let (y, BatchStats { mean, var }) = self.g.batch_norm_train(x, gamma, beta)?;
                let f = |v: Vec<T>| v.into_iter().map(|a| a.to_f32().unwrap()).collect();
                self.updates.push(StatUpdate { layer, mean: f(mean), var: f(var) });
                Ok(y)
            }
            Mode::Eval => {
                let n = &self.net.norms[layer];
                let c = |v: &[f32]| v.iter().map(|&a| T::from_f32(a).unwrap()).collect::<Vec<_>>();
                self.g.batch_norm_eval(x, gamma, beta, &c(&n.running_mean), &c(&n.running_var))
            }
        }
    }

    fn conv_bn(&mut self, name: &str, bn: &str, x: Var, geom: ConvGeom, relu: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let y = self.g.conv3d(x, w, None, geom)?;
        let y = self.norm(bn, y)?;
        Ok(if relu { self.g.relu(y) } else { y })
    }

    fn residual(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let a =
            self.conv_bn(&format!("{name}.conv1"), &format!("{name}.bn1"), x, ConvGeom::cube(3, stride, 1), true)?;
        let a = self.conv_bn(&format!("{name}.conv2"), &format!("{name}.bn2"), a, ConvGeom::cube(3, 1, 1), false)?;
        let s =
            self.conv_bn(&format!("{name}.down"), &format!("{name}.bn_down"), x, ConvGeom::cube(1, stride, 0), false)?;
        let y = self.g.add(a, s)?;
        Ok(self.g.relu(y))
    }

    fn convt_bn(&mut self, name: &str, bn: &str, x: Var, geom: ConvGeom) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let y = self.g.conv_transpose3d(x, w, None, geom)?;
        let y = self.norm(bn, y)?;
        Ok(self.g.relu(y))
    }

    fn decoder(&mut self, name: &str, e: Var, c3: Var, c2: Var) -> Result<Var> {
        let mut h = e;
        for (b, skip) in [None, Some(c3), Some(c2)].into_iter().enumerate() {
            let blk = format!("{name}.block{}", b + 1);
            if let Some(s) = skip {
                h = self.g.concat(&[h, s])?;
            }
            h = self.convt_bn(&format!("{blk}.up"), &format!("{blk}.bn_up"), h, UP)?;
            h = self.convt_bn(&format!("{blk}.refine"), &format!("{blk}.bn_refine"), h, REFINE)?;
        }
        let w = self.p(&format!("{name}.out.w"));
        let b = self.p(&format!("{name}.out.b"));
        let y = self.g.conv_transpose3d(h, w, Some(b), OUT)?;
        Ok(self.g.sigmoid(y))
    }
}

impl Network {
    /// Builds the network with parameters drawn deterministically from `cfg.seed`.
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let [w0, c2, c3, e] = cfg.encoder_widths;
        let mut b = Builder { specs: Vec::new(), norms: Vec::new() };
        b.conv("enc.stem", 1, w0, [3; 3]);
        b.norm("enc.stem_bn", w0);
        b.residual("enc.stage1", w0, c2);
        b.residual("enc.stage2", c2, c3);
        b.residual("enc.stage3", c3, e);
        b.decoder("seg", &cfg);
        b.decoder("rec", &cfg);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in b.specs {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::He(fan) | Init::Lecun(fan) => {
                    let gain = if matches!(init, Init::He(_)) { 2.0 } else { 1.0 };
                    let dist = Normal::new(0.0f32, (gain / fan as f32).sqrt()).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let norms: Vec<NormLayer> = b
            .norms
            .into_iter()
            .map(|(name, c)| NormLayer { name, running_mean: vec![0.0; c], running_var: vec![1.0; c] })
            .collect();
        let norm_index = norms.iter().enumerate().map(|(i, n)| (n.name.clone(), i)).collect();
        Ok(Self { cfg, names, params, index, norms, norm_index })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a graph leaf, in `param_names` order.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t.cast())).collect()
    }

    /// Runs the network on `x` of shape `(N, 1, k, m, n)`. In training mode the
    /// batch statistics of every norm layer are returned for
    /// [`Network::apply_stat_updates`].
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        x: Var,
        mode: Mode,
    ) -> Result<(NetworkOutputs, Vec<StatUpdate>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1] != 1 {
            return Err(Error::shape("network", format!("expected (N, 1, k, m, n), got {shape:?}")));
        }
        check_divisible([shape[2], shape[3], shape[4]])?;
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "network",
                format!("{} parameter handles for {}", params.len(), self.params.len()),
            ));
        }
        let mut cx = Ctx { net: self, g, params, mode, updates: Vec::new() };
        let h = cx.conv_bn("enc.stem", "enc.stem_bn", x, ConvGeom::cube(3, 1, 1), true)?;
        let h = cx.g.max_pool3d(h)?;
        let c2 = cx.residual("enc.stage1", h, 1)?;
        let c3 = cx.residual("enc.stage2", c2, 2)?;
        let e = cx.residual("enc.stage3", c3, 2)?;
        let s_bar = cx.decoder("seg", e, c3, c2)?;
        let s = cx.g.curvature_smooth(s_bar, self.cfg.mu)?;
        let i_rec = match mode {
            Mode::Train => Some(cx.decoder("rec", e, c3, c2)?),
            Mode::Eval => None,
        };
        Ok((NetworkOutputs { s_bar, s, i_rec }, cx.updates))
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let n = &mut self.norms[u.layer];
            for (r, &b) in n.running_mean.iter_mut().zip(&u.mean) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
            }
            for (r, &b) in n.running_var.iter_mut().zip(&u.var) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
            }
        }
    }

    /// `S` for a batch `(N, 1, k, m, n)` in inference mode.
    pub fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::inference();
        let params = self.bind(&mut g);
        let x = g.constant(batch.clone());
        let (out, _) = self.forward(&mut g, &params, x, Mode::Eval)?;
        Ok(g.value(out.s).clone())
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut entries: Vec<CheckpointEntry> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| CheckpointEntry { name: n.clone(), kind: EntryKind::Param, tensor: t.clone() })
            .collect();
        for n in &self.norms {
            let c = n.running_mean.len();
            for (suffix, v) in [("running_mean", &n.running_mean), ("running_var", &n.running_var)] {
                entries.push(CheckpointEntry {
                    name: format!("{}.{suffix}", n.name),
                    kind: EntryKind::Buffer,
                    tensor: Tensor::new(vec![c], v.clone())?,
                });
            }
        }
        Ok(Checkpoint { step, entries, config: serde_json::to_value(&self.cfg)? })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_value(ck.config.clone())?;
        let mut net = Self::new(cfg)?;
        for (name, t) in net.names.iter().zip(net.params.iter_mut()) {
            let src = ck.get(name).ok_or_else(|| Error::format(name.clone(), "missing from checkpoint"))?;
            if src.shape() != t.shape() {
                return Err(Error::format(name.clone(), format!("shape {:?}, expected {:?}", src.shape(), t.shape())));
            }
            *t = src.clone();
        }
        for n in &mut net.norms {
            for (suffix, dst) in [("running_mean", &mut n.running_mean), ("running_var", &mut n.running_var)] {
                let key = format!("{}.{suffix}", n.name);
                let src = ck.get(&key).ok_or_else(|| Error::format(key.clone(), "missing from checkpoint"))?;
                if src.numel() != dst.len() {
                    return Err(Error::format(key, "channel count mismatch"));
                }
                dst.copy_from_slice(src.data());
            }
        }
        Ok(net)
    }
}
