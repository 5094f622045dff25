//! Adam, the unsupervised training loop and transductive fine-tuning.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{compound, LossBreakdown, LossFlags, LossWeights};
use crate::network::{check_divisible, Mode, Network, NetworkConfig};
use crate::volume::{random_crop, Shape3, Volume3D};

/// Consecutive collapsed steps tolerated before training aborts.
pub const MAX_CONSECUTIVE_COLLAPSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor<f32>]) -> Result<Self> {
        let positive = |v: f64| v > 0.0;
        if !positive(cfg.lr)
            || !(0.0..1.0).contains(&cfg.beta1)
            || !(0.0..1.0).contains(&cfg.beta2)
            || !positive(cfg.eps)
        {
            return Err(Error::InvalidArgument(format!("invalid Adam hyperparameters {cfg:?}")));
        }
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(Self { cfg, t: 0, m: zeros(), v: zeros() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. A `None` gradient counts as zero.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<&Tensor<f32>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, {} states", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[k].len() || g.is_some_and(|g| g.numel() != p.numel()) {
                return Err(Error::shape("adam_step", format!("parameter {k} has shape {:?}", p.shape())));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = grads[k].map_or(0.0, |g| g.data()[j] as f64);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    /// Crop `(k, m, n)`, each divisible by 8.
    pub crop_shape: [usize; 3],
    pub seed: u64,
    pub weights: LossWeights,
    pub flags: LossFlags,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            steps: 2000,
            crop_shape: [32, 128, 128],
            seed: 0,
            weights: LossWeights::default(),
            flags: LossFlags::default(),
            checkpoint_every: 0,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 2 for batch statistics".into()));
        }
        check_divisible(self.crop_shape)?;
        self.weights.validate()?;
        self.network.validate()
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Updated(StepRecord),
    /// The step was skipped because a soft mask collapsed.
    Collapsed {
        step: usize,
        message: String,
    },
}

/// Owns the network, optimizer state and crop sampler.
pub struct Trainer {
    net: Network,
    adam: Adam,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    consecutive_collapses: usize,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.adam, net.params())?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { net, adam, cfg, rng, step: 0, consecutive_collapses: 0 })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn sample_batch(&mut self, volumes: &[Volume3D]) -> Result<Tensor<f32>> {
        let crop = Shape3::from_dims(self.cfg.crop_shape);
        let mut data = Vec::with_capacity(self.cfg.batch_size * crop.len());
        for _ in 0..self.cfg.batch_size {
            let v = &volumes[self.rng.random_range(0..volumes.len())];
            data.extend_from_slice(random_crop(v, crop, &mut self.rng)?.data());
        }
        let [k, m, n] = self.cfg.crop_shape;
        Tensor::new(vec![self.cfg.batch_size, 1, k, m, n], data)
    }

    /// Samples a batch of crops, runs forward and backward and applies Adam.
    pub fn step(&mut self, volumes: &[Volume3D]) -> Result<StepOutcome> {
        if volumes.is_empty() {
            return Err(Error::InvalidArgument("no training volumes".into()));
        }
        let crop = Shape3::from_dims(self.cfg.crop_shape);
        if let Some(v) = volumes.iter().find(|v| !crop.fits_within(v.shape())) {
            return Err(Error::shape("train", format!("volume {} smaller than crop {crop}", v.shape())));
        }
        let batch = self.sample_batch(volumes)?;
        self.step += 1;
        let mut g = Graph::<f32>::new();
        let params = self.net.bind(&mut g);
        let x = g.constant(batch);
        let (out, updates) = self.net.forward(&mut g, &params, x, Mode::Train)?;
        match compound(&mut g, x, &out, &self.cfg.weights, &self.cfg.flags) {
            Ok((terms, loss)) => {
                self.consecutive_collapses = 0;
                g.backward(terms.total)?;
                let grads: Vec<Option<&Tensor<f32>>> = params.iter().map(|&p| g.grad(p)).collect();
                self.adam.step(self.net.params_mut(), &grads)?;
                self.net.apply_stat_updates(&updates);
                Ok(StepOutcome::Updated(StepRecord { step: self.step, loss }))
            }
            Err(e @ (Error::CollapsedMask(_) | Error::NonFiniteLoss)) => {
                self.consecutive_collapses += 1;
                if self.consecutive_collapses > MAX_CONSECUTIVE_COLLAPSES {
                    return Err(Error::Diverged(self.consecutive_collapses));
                }
                Ok(StepOutcome::Collapsed { step: self.step, message: e.to_string() })
            }
            Err(e) => Err(e),
        }
    }
}

/// Limit on fine-tuning work.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Steps(usize),
    Seconds(f64),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<StepOutcome>,
}

impl TrainOutcome {
    /// Records of the steps that updated the parameters.
    pub fn records(&self) -> impl Iterator<Item = &StepRecord> {
        self.log.iter().filter_map(|o| match o {
            StepOutcome::Updated(r) => Some(r),
            StepOutcome::Collapsed { .. } => None,
        })
    }
}

fn run(
    net: Network,
    volumes: &[Volume3D],
    cfg: &TrainConfig,
    budget: Budget,
    on_step: &mut dyn FnMut(&StepOutcome, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let start = Instant::now();
    let mut log = Vec::new();
    loop {
        let done = match budget {
            Budget::Steps(n) => trainer.steps_done() >= n,
            Budget::Seconds(s) => start.elapsed() >= Duration::from_secs_f64(s.max(0.0)),
        };
        if done {
            break;
        }
        let outcome = trainer.step(volumes)?;
        on_step(&outcome, trainer.network())?;
        log.push(outcome);
    }
    Ok(TrainOutcome { network: trainer.into_network(), log })
}

/// Trains a freshly initialised network for `cfg.steps` steps. Only images
/// are consumed; `on_step` sees every outcome (for logging and checkpoints).
pub fn train(
    volumes: &[Volume3D],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepOutcome, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut net_cfg = cfg.network.clone();
    net_cfg.input_shape = cfg.crop_shape;
    let net = Network::new(net_cfg)?;
    run(net, volumes, cfg, Budget::Steps(cfg.steps), on_step)
}

/// Continues training `net` on unlabeled test images with fresh optimizer
/// state. A zero budget returns the network unchanged.
pub fn finetune(
    net: Network,
    volumes: &[Volume3D],
    budget: Budget,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepOutcome, &Network) -> Result<()>,
) -> Result<TrainOutcome> {
    run(net, volumes, cfg, budget, on_step)
}
