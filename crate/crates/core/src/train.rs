//! AdamW and the training loop.
//!
//! Training is single-threaded and fully determined by the seed: the same
//! config and dataset give byte-identical logs and checkpoints.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{OptimConfig, RunConfig};
use crate::data::{GzslDataset, Sample};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::Vspcn;
use crate::params::{ModelParams, ParamKind};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "step,l_cls,l_ar,l_ced,l_skd,total";

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One decoupled-weight-decay Adam step. `grads[i]` is `None` for
    /// tensors the loss does not reach; those are left untouched.
    ///
    /// Nothing is written unless every updated value is finite.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Option<Tensor>],
        opt: &OptimConfig,
    ) -> Result<()> {
        let t = self.step + 1;
        let bc1 = 1.0 - opt.beta1.powi(t as i32);
        let bc2 = 1.0 - opt.beta2.powi(t as i32);
        let mut staged = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let decay = if params.layout.specs[i].kind == ParamKind::Matrix {
                opt.weight_decay
            } else {
                0.0
            };
            let p = params.get(i).data();
            let (m_old, v_old) = (self.m[i].data(), self.v[i].data());
            let mut p_new = Vec::with_capacity(p.len());
            let mut m_new = Vec::with_capacity(p.len());
            let mut v_new = Vec::with_capacity(p.len());
            for j in 0..p.len() {
                let gj = g.data()[j];
                let m = opt.beta1 * m_old[j] + (1.0 - opt.beta1) * gj;
                let v = opt.beta2 * v_old[j] + (1.0 - opt.beta2) * gj * gj;
                let update = (m / bc1) / ((v / bc2).sqrt() + opt.adam_eps);
                let x = p[j] * (1.0 - opt.lr * decay) - opt.lr * update;
                if !x.is_finite() {
                    return Err(Error::NonFinite { op: "adam update" });
                }
                p_new.push(x);
                m_new.push(m);
                v_new.push(v);
            }
            staged.push((i, p_new, m_new, v_new));
        }
        for (i, p, m, v) in staged {
            params.get_mut(i).data_mut().copy_from_slice(&p);
            self.m[i].data_mut().copy_from_slice(&m);
            self.v[i].data_mut().copy_from_slice(&v);
        }
        self.step = t;
        Ok(())
    }
}

/// Gradient of the mean batch loss, one slot per parameter tensor.
pub fn batch_gradients(
    model: &Vspcn,
    data: &GzslDataset,
    batch: &[&Sample],
) -> Result<(LossBreakdown<f64>, Vec<Option<Tensor>>)> {
    let bg = model.batch_graph(data, batch)?;
    let grads = bg.graph.backward(bg.total)?;
    let out = bg
        .vars
        .iter()
        .map(|&v| grads.get(v).cloned())
        .collect::<Vec<_>>();
    for g in out.iter().flatten() {
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
    }
    Ok((bg.mean, out))
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// CSV with [`LOG_HEADER`] and one row per optimizer step.
    pub log: String,
    /// Mean total loss of the last step, if any step ran.
    pub final_loss: Option<f64>,
}

/// A failed run. After a numeric failure `last_good` holds the state
/// before the failing step.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<Checkpoint>>,
    pub log: String,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for TrainFailure {}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

/// Fresh model from `cfg.seed`, then [`resume`] for `cfg.optim.epochs`.
pub fn train(cfg: &RunConfig, data: &GzslDataset) -> Result<TrainOutcome, TrainFailure> {
    let start = Checkpoint::initial(cfg, data).map_err(|error| TrainFailure {
        error,
        last_good: None,
        log: format!("{LOG_HEADER}\n"),
    })?;
    resume(start, data, cfg.optim.epochs)
}

fn shuffle_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    rng
}

/// Runs `epochs` more epochs over the seen training split.
pub fn resume(
    mut ckpt: Checkpoint,
    data: &GzslDataset,
    epochs: usize,
) -> Result<TrainOutcome, TrainFailure> {
    let mut log = format!("{LOG_HEADER}\n");
    let fail = |error: Error, ckpt: &Checkpoint, log: &str| TrainFailure {
        error,
        last_good: Some(Box::new(ckpt.clone())),
        log: log.to_owned(),
    };
    if let Err(e) = ckpt.model.check_dataset(data) {
        return Err(fail(e, &ckpt, &log));
    }
    if data.train.is_empty() && epochs > 0 {
        return Err(fail(
            Error::Contract("empty training split".into()),
            &ckpt,
            &log,
        ));
    }
    let cfg = ckpt.model.config.clone();
    let mut final_loss = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for _ in 0..epochs {
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng(cfg.seed, ckpt.epoch));
        for chunk in order.chunks(cfg.optim.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let step = ckpt.adam.step as usize + 1;
            let numeric = |e: Error| match e {
                Error::NonFinite { op } => Error::Numeric {
                    step,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            };
            let (losses, grads) = match batch_gradients(&ckpt.model, data, &batch) {
                Ok(x) => x,
                Err(e) => return Err(fail(numeric(e), &ckpt, &log)),
            };
            if !losses.total.is_finite() {
                return Err(fail(numeric(Error::NonFinite { op: "loss" }), &ckpt, &log));
            }
            let Checkpoint { model, adam, .. } = &mut ckpt;
            if let Err(e) = adam.step(&mut model.params, &grads, &cfg.optim) {
                return Err(fail(numeric(e), &ckpt, &log));
            }
            let _ = writeln!(
                log,
                "{step},{},{},{},{},{}",
                losses.cls, losses.ar, losses.ced, losses.skd, losses.total
            );
            final_loss = Some(losses.total);
        }
        ckpt.epoch += 1;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        final_loss,
    })
}
