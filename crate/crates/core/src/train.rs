//! The training loop: sample, compute the loss, backpropagate, step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Dtype, TrainConfig};
use crate::containers::{ReplayBuffer, Trajectories};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::estimators::{
    build_module, LogEdgeFlowEstimator, LogStateFlowEstimator, LogZEstimator, LogitPbEstimator, LogitPfEstimator,
};
use crate::exact::{l1_distance, true_distribution};
use crate::losses::{
    DbParametrization, FmParametrization, LossKind, ModifiedDbParametrization, Parametrization, SubTbParametrization,
    TbParametrization, ZVarParametrization,
};
use crate::nn::{GroupSpec, Graph, NameFilter, Optimizer, ParameterStore};
use crate::samplers::{DiscreteActionsSampler, TrajectoriesSampler};
use crate::scalar::Scalar;

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Completed iterations.
    pub iteration: usize,
    /// Loss of the latest iteration.
    pub loss: f64,
    /// L1 distance between the learned and target terminating distributions;
    /// absent when the state space is too large to enumerate.
    pub l1_distance: Option<f64>,
    pub log_z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

/// Registers the estimators `cfg` asks for and bundles them.
pub fn build_parametrization<S: Scalar>(
    cfg: &TrainConfig,
    env: &dyn Env,
    store: &mut ParameterStore<S>,
    rng: &mut ChaCha8Rng,
) -> Result<Parametrization> {
    let pre = env.default_preprocessor();
    let net = cfg.network();
    let n_actions = env.n_actions();
    if cfg.loss == LossKind::FM {
        let m = build_module(cfg.edge_flow_module, store, "edge_flow", env, pre, n_actions, &net, None, rng)?;
        return Ok(Parametrization::FM(FmParametrization { edge_flows: LogEdgeFlowEstimator::new(env, m, pre)? }));
    }
    let pf_m = build_module(cfg.pf_module, store, "pf", env, pre, n_actions, &net, None, rng)?;
    let shared = if cfg.share_torso { pf_m.torso().cloned() } else { None };
    let pb_m = build_module(cfg.pb_module, store, "pb", env, pre, n_actions - 1, &net, shared.as_ref(), rng)?;
    let pf = LogitPfEstimator::new(env, pf_m, pre)?;
    let pb = LogitPbEstimator::new(env, pb_m, pre)?;
    let mut logf = |store: &mut ParameterStore<S>| -> Result<LogStateFlowEstimator> {
        let m = build_module(cfg.logf_module, store, "logF", env, pre, 1, &net, shared.as_ref(), rng)?;
        LogStateFlowEstimator::new(env, m, pre, cfg.forward_looking)
    };
    Ok(match cfg.loss {
        LossKind::DB => Parametrization::DB(DbParametrization { pf, pb, logf: logf(store)? }),
        LossKind::SubTB => {
            Parametrization::SubTB(SubTbParametrization { pf, pb, logf: logf(store)?, lambda: cfg.subtb_lambda })
        }
        LossKind::TB => Parametrization::TB(TbParametrization { pf, pb, logz: LogZEstimator::new(store, S::zero())? }),
        LossKind::ZVar => Parametrization::ZVar(ZVarParametrization { pf, pb }),
        LossKind::ModifiedDB => Parametrization::ModifiedDB(ModifiedDbParametrization { pf, pb }),
        LossKind::FM => unreachable!("handled above"),
    })
}

/// Training state for one run; fully determined by the config and its seed.
#[derive(Debug)]
pub struct Trainer<S: Scalar> {
    cfg: TrainConfig,
    env: Box<dyn Env>,
    store: ParameterStore<S>,
    parametrization: Parametrization,
    sampler: DiscreteActionsSampler,
    optimizer: Optimizer<S>,
    buffer: Option<ReplayBuffer>,
    rng: ChaCha8Rng,
    true_dist: Option<Vec<S>>,
    last_batch: Option<Trajectories>,
    last_loss: f64,
    iteration: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.build_env()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParameterStore::new();
        let parametrization = build_parametrization(cfg, env.as_ref(), &mut store, &mut rng)?;
        let sampler =
            DiscreteActionsSampler::with_exploration(parametrization.forward_policy(), cfg.temperature, cfg.epsilon)?;
        let algorithm = cfg.optim.algorithm();
        let optimizer = Optimizer::new(
            &store,
            &[
                GroupSpec { filter: NameFilter::NotContains(LogZEstimator::NAME.into()), lr: cfg.lr, algorithm },
                GroupSpec { filter: NameFilter::Contains(LogZEstimator::NAME.into()), lr: cfg.log_z_lr, algorithm },
            ],
        )?;
        let true_dist = match env.n_states() {
            Some(n) if n <= cfg.enumeration_limit => Some(true_distribution(env.as_ref(), cfg.enumeration_limit)?.0),
            _ => None,
        };
        let buffer = (cfg.replay_buffer_size > 0).then(|| ReplayBuffer::new(cfg.replay_buffer_size));
        Ok(Self {
            cfg: cfg.clone(),
            env,
            store,
            parametrization,
            sampler,
            optimizer,
            buffer,
            rng,
            true_dist,
            last_batch: None,
            last_loss: f64::NAN,
            iteration: 0,
        })
    }

    pub fn env(&self) -> &dyn Env {
        self.env.as_ref()
    }

    pub fn store(&self) -> &ParameterStore<S> {
        &self.store
    }

    pub fn parametrization(&self) -> &Parametrization {
        &self.parametrization
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Draws a training batch. With replay, `B - B/2` fresh trajectories are
    /// added to the buffer and `B/2` are drawn back from it.
    fn sample_batch(&mut self) -> Result<Trajectories> {
        let env = self.env.as_ref();
        let sampler = TrajectoriesSampler::forward(env, self.sampler.clone());
        let b = self.cfg.batch_size;
        match &mut self.buffer {
            None => sampler.sample(&self.store, b, &mut self.rng),
            Some(buffer) => {
                let fresh = sampler.sample(&self.store, b - b / 2, &mut self.rng)?;
                buffer.add(&fresh);
                let replayed = buffer.sample(b / 2, &mut self.rng)?;
                Trajectories::concat(&[&fresh, &replayed])
            }
        }
    }

    /// One iteration; returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.sample_batch()?;
        let env = self.env.as_ref();
        let (loss, grads) = {
            let mut g = Graph::new(&self.store);
            let loss = self.parametrization.loss(&mut g, env, &batch)?;
            let value = g.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite { what: format!("loss at iteration {}", self.iteration + 1) });
            }
            (value, g.backward(loss)?)
        };
        self.store.zero_grad();
        self.store.accumulate(&grads);
        self.optimizer.step(&mut self.store);
        self.iteration += 1;
        self.last_loss = loss;
        self.last_batch = Some(batch);
        Ok(loss)
    }

    /// The exact terminating distribution of the current policy, if enumerable.
    pub fn p_t(&self) -> Result<Option<Vec<S>>> {
        if self.true_dist.is_none() {
            return Ok(None);
        }
        self.parametrization.p_t(&self.store, self.env(), self.cfg.enumeration_limit).map(Some)
    }

    pub fn l1_distance(&self) -> Result<Option<f64>> {
        match (&self.true_dist, self.p_t()?) {
            (Some(truth), Some(pt)) => Ok(Some(l1_distance(&pt, truth)?.as_f64())),
            _ => Ok(None),
        }
    }

    /// The parametrization's estimate of `log Z`; ZVar uses the latest batch.
    pub fn log_z(&self) -> Result<f64> {
        let batch = match &self.last_batch {
            Some(b) => b.clone(),
            None => TrajectoriesSampler::forward(self.env(), self.sampler.clone()).sample(
                &self.store,
                self.cfg.batch_size,
                &mut ChaCha8Rng::seed_from_u64(self.cfg.seed),
            )?,
        };
        Ok(self.parametrization.log_z_estimate(&self.store, self.env(), &batch)?.as_f64())
    }

    pub fn evaluate(&self) -> Result<MetricsRecord> {
        Ok(MetricsRecord {
            iteration: self.iteration,
            loss: self.last_loss,
            l1_distance: self.l1_distance()?,
            log_z: self.log_z()?,
            wall_clock_ms: None,
        })
    }

    /// Runs the remaining iterations, writing one record every
    /// `eval_interval` iterations and after the last one. On failure the
    /// records written so far are flushed before the error is returned.
    pub fn run<W: Write>(&mut self, out: W) -> Result<MetricsRecord> {
        let mut out = BufWriter::new(out);
        let result = self.run_inner(&mut out);
        out.flush()?;
        result
    }

    fn run_inner<W: Write>(&mut self, out: &mut W) -> Result<MetricsRecord> {
        let start = Instant::now();
        let mut last = None;
        while self.iteration < self.cfg.n_iterations {
            self.step()?;
            if self.iteration % self.cfg.eval_interval == 0 || self.iteration == self.cfg.n_iterations {
                let mut record = self.evaluate()?;
                if self.cfg.timing {
                    record.wall_clock_ms = Some(start.elapsed().as_millis() as u64);
                }
                serde_json::to_writer(&mut *out, &record)?;
                out.write_all(b"\n")?;
                last = Some(record);
            }
        }
        match last {
            Some(r) => Ok(r),
            None => self.evaluate(),
        }
    }
}

/// Trains per `cfg` in its configured precision, writing metrics to `out`.
pub fn train<W: Write>(cfg: &TrainConfig, out: W) -> Result<MetricsRecord> {
    match cfg.dtype {
        Dtype::F64 => Trainer::<f64>::new(cfg)?.run(out),
        Dtype::F32 => Trainer::<f32>::new(cfg)?.run(out),
    }
}

/// Trains per `cfg`, writing metrics to `cfg.output`.
pub fn train_to_file(cfg: &TrainConfig) -> Result<MetricsRecord> {
    train(cfg, File::create(&cfg.output)?)
}
