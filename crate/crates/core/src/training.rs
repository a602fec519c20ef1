//! The optimization loop: alternating critic/generator updates with
//! deterministic phase-derived random streams, structured loss logging and
//! checkpoint-exact resumability.

use crate::adam::Adam;
use crate::checkpoint::Checkpoint;
use crate::corpus::{Normalization, SequenceSample, SnapshotCorpus};
use crate::error::{Error, Result};
use crate::koopman::{
    gan_losses, generator_losses, predicted_continuation, prepare_sample, LossWeights, ModelCritic,
};
use crate::networks::{apply_bn_updates, init_params, Ctx, ModelConfig, ParamStore};
use crate::rng::{phase_rng, Phase};
use dakm_autograd::{grad, Graph, Var};
use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub disc_updates_per_gen: usize,
    pub n_s: usize,
    #[serde(with = "crate::corpus::seed_serde")]
    pub seed: u64,
    pub checkpoint_every: u64,
    pub latent_norm_bound: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::ks_default()
    }
}

impl TrainConfig {
    pub fn ks_default() -> Self {
        TrainConfig {
            iterations: 50_000,
            learning_rate: 5e-5,
            disc_learning_rate: 5e-5,
            disc_updates_per_gen: 4,
            n_s: 64,
            seed: 0,
            checkpoint_every: 1000,
            latent_norm_bound: 1e8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::ks_paper(),
        }
    }

    pub fn gs_default() -> Self {
        TrainConfig {
            n_s: 32,
            weights: LossWeights::gs_paper(),
            ..TrainConfig::ks_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0
            || self.learning_rate <= 0.0
            || self.disc_learning_rate <= 0.0
            || self.n_s == 0
            || self.checkpoint_every == 0
        {
            return Err(Error::InvalidConfig(
                "iterations, learning rates, n_s and checkpoint_every must be positive".into(),
            ));
        }
        self.weights.validate()
    }
}

/// One structured loss record, appended per iteration to the training log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub recon: f64,
    pub pred: f64,
    pub code: f64,
    pub grad: f64,
    pub reg: f64,
    pub gan: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gp: Option<f64>,
}

/// Mutable training state: parameters, optimizer moments, iteration count.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub normalization: Normalization,
    pub params: ParamStore,
    pub adam_gen: Adam,
    pub adam_disc: Adam,
    pub iteration: u64,
}

const GEN_PREFIXES: [&str; 3] = ["enc.", "dec.", "aux."];
const DISC_PREFIXES: [&str; 1] = ["disc."];

impl Trainer {
    pub fn new(
        corpus: &SnapshotCorpus,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        check_compatible(corpus, &model_cfg, &train_cfg)?;
        let normalization = Normalization::for_problem(corpus);
        let params = init_params(&model_cfg, train_cfg.n_s, train_cfg.seed)?;
        let adam_gen = Adam::new(
            train_cfg.learning_rate,
            train_cfg.adam_beta1,
            train_cfg.adam_beta2,
            train_cfg.adam_eps,
        );
        let adam_disc = Adam::new(
            train_cfg.disc_learning_rate,
            train_cfg.adam_beta1,
            train_cfg.adam_beta2,
            train_cfg.adam_eps,
        );
        Ok(Trainer {
            model_cfg,
            train_cfg,
            normalization,
            params,
            adam_gen,
            adam_disc,
            iteration: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Trainer {
        Trainer {
            model_cfg: ckpt.model,
            train_cfg: ckpt.train,
            normalization: ckpt.normalization,
            params: ckpt.params,
            adam_gen: ckpt.adam_gen,
            adam_disc: ckpt.adam_disc,
            iteration: ckpt.iteration,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model_cfg.clone(),
            train: self.train_cfg.clone(),
            normalization: self.normalization.clone(),
            iteration: self.iteration,
            params: self.params.clone(),
            adam_gen: self.adam_gen.clone(),
            adam_disc: self.adam_disc.clone(),
        }
    }

    /// One iteration: if the adversarial weight is active, four critic
    /// updates on fresh windows, then one generator update on its own fresh
    /// window. Windows whose anchor snapshot is masked are never drawn.
    pub fn train_step(&mut self, corpus: &SnapshotCorpus) -> Result<StepLog> {
        let it = self.iteration + 1;
        let cfg = self.model_cfg.clone();
        let w = self.train_cfg.weights;
        let dx = corpus.metadata.dx;
        let bound = self.train_cfg.latent_norm_bound;
        let seed = self.train_cfg.seed;
        let n_s = self.train_cfg.n_s;

        let mut disc_log = None;
        let mut gp_log = None;
        if w.lambda_gan > 0.0 {
            for k in 0..self.train_cfg.disc_updates_per_gen {
                let mut srng = phase_rng(seed, it, Phase::DiscSample(k));
                let sample = sample_unmasked_anchor(corpus, n_s, &mut srng)?;
                let tensors = prepare_sample(&sample, &corpus.metadata.shape, &self.normalization);
                let g = Graph::new();
                let mut frng = phase_rng(seed, it, Phase::DiscForward(k));
                let mut ctx = Ctx::train(&g, &self.params, &DISC_PREFIXES, cfg.dropout_keep, &mut frng);
                let fake = predicted_continuation(&mut ctx, &cfg, &tensors, bound)?;
                let cond: Vec<&ArrayD<f64>> = (0..n_s).map(|i| &tensors.snapshots[i]).collect();
                let real: Vec<&ArrayD<f64>> = (1..=n_s).map(|i| &tensors.snapshots[i]).collect();
                let u: f64 = phase_rng(seed, it, Phase::GpDraw(k)).gen();
                let critic = ModelCritic { cfg: &cfg };
                let gl = gan_losses(&mut ctx, &critic, &cond, &real, &fake, w.gp_coeff, u);
                let (dv, gv) = (gl.disc.scalar(), gl.gp.scalar());
                ensure_finite(it, "disc", dv)?;
                ensure_finite(it, "gp", gv)?;
                let objective = gl.disc.add(&gl.gp);
                let grads = grad_map(&objective, &ctx.trainable_bound());
                let bn = std::mem::take(&mut ctx.bn_updates);
                drop(ctx);
                self.adam_disc.apply(&mut self.params, &grads);
                apply_bn_updates(&mut self.params, &bn, &DISC_PREFIXES);
                disc_log = Some(dv);
                gp_log = Some(gv);
            }
        }

        let mut srng = phase_rng(seed, it, Phase::GenSample);
        let sample = sample_unmasked_anchor(corpus, n_s, &mut srng)?;
        let tensors = prepare_sample(&sample, &corpus.metadata.shape, &self.normalization);
        let g = Graph::new();
        let mut frng = phase_rng(seed, it, Phase::GenForward);
        let mut ctx = Ctx::train(&g, &self.params, &GEN_PREFIXES, cfg.dropout_keep, &mut frng);
        let critic = ModelCritic { cfg: &cfg };
        let losses = generator_losses(&mut ctx, &cfg, &tensors, &w, dx, bound, Some(&critic))?;
        for (name, value) in losses.components() {
            ensure_finite(it, name, value)?;
        }
        let grads = grad_map(&losses.total, &ctx.trainable_bound());
        let bn = std::mem::take(&mut ctx.bn_updates);
        drop(ctx);
        self.adam_gen.apply(&mut self.params, &grads);
        apply_bn_updates(&mut self.params, &bn, &GEN_PREFIXES);

        self.iteration = it;
        Ok(StepLog {
            iteration: it,
            recon: losses.recon.scalar(),
            pred: losses.pred.scalar(),
            code: losses.code.scalar(),
            grad: losses.grad.scalar(),
            reg: losses.reg.scalar(),
            gan: losses.gan.scalar(),
            total: losses.total.scalar(),
            disc: disc_log,
            gp: gp_log,
        })
    }

    /// Run until `target_iterations` total iterations have completed,
    /// invoking `on_step` after each (for logging and checkpointing).
    pub fn train(
        &mut self,
        corpus: &SnapshotCorpus,
        target_iterations: u64,
        mut on_step: impl FnMut(&Trainer, &StepLog) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < target_iterations {
            let log = self.train_step(corpus)?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}

fn ensure_finite(iteration: u64, component: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            iteration,
            component: component.to_string(),
        })
    }
}

fn check_compatible(
    corpus: &SnapshotCorpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<()> {
    if corpus.spatial() != model_cfg.input_extent.as_slice()
        || corpus.channels() != model_cfg.in_channels
    {
        return Err(Error::ShapeMismatch(format!(
            "corpus snapshots are {:?}, model expects extent {:?} x {} channels",
            corpus.metadata.shape, model_cfg.input_extent, model_cfg.in_channels
        )));
    }
    if corpus.len() < train_cfg.n_s + 1 {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            needed: train_cfg.n_s + 1,
        });
    }
    Ok(())
}

/// Uniform draw over window starts whose anchor snapshot is available.
pub fn sample_unmasked_anchor(
    corpus: &SnapshotCorpus,
    n_s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SequenceSample> {
    if corpus.len() < n_s + 1 {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            needed: n_s + 1,
        });
    }
    let valid: Vec<usize> = (0..=corpus.len() - n_s - 1)
        .filter(|&s| !corpus.is_masked(s))
        .collect();
    if valid.is_empty() {
        return Err(Error::NoUnmaskedAnchor);
    }
    let start = valid[rng.gen_range(0..valid.len())];
    Ok(corpus.window(start, n_s))
}

fn grad_map(loss: &Var, bound: &[(String, Var)]) -> BTreeMap<String, ArrayD<f64>> {
    let refs: Vec<&Var> = bound.iter().map(|(_, v)| v).collect();
    let grads = grad(loss, &refs);
    bound
        .iter()
        .zip(grads)
        .map(|((name, _), g)| (name.clone(), g.value().to_owned()))
        .collect()
}
