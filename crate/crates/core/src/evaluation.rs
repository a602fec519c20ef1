//! Long-horizon rollout prediction, error metrics, the ablation harness and
//! missing-entry imputation.

use crate::checkpoint::Checkpoint;
use crate::corpus::{from_model_layout, to_model_layout, Normalization, SnapshotCorpus};
use crate::error::{Error, Result};
use crate::koopman::{rollout, AblationVariant};
use crate::networks::{decode, encode, Ctx, ModelConfig, ParamStore};
use crate::training::{StepLog, TrainConfig, Trainer};
use dakm_autograd::{concat, Graph};
use ndarray::prelude::*;
use rayon::prelude::*;

/// Frozen model as used for prediction, imputation and control.
#[derive(Clone)]
pub struct TrainedModel {
    pub cfg: ModelConfig,
    pub n_s: usize,
    pub normalization: Normalization,
    pub params: ParamStore,
    pub latent_norm_bound: f64,
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> TrainedModel {
        TrainedModel {
            cfg: ckpt.model.clone(),
            n_s: ckpt.train.n_s,
            normalization: ckpt.normalization.clone(),
            params: ckpt.params.clone(),
            latent_norm_bound: ckpt.train.latent_norm_bound,
        }
    }

    /// Encode one channels-last snapshot to its latent code.
    pub fn encode_snapshot(&self, snapshot: &ArrayD<f32>) -> Array1<f64> {
        let x = self.model_input(snapshot);
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &self.params);
        let z = encode(&mut ctx, &self.cfg, &g.constant(x.into_shared()));
        Array1::from_iter(z.value().iter().copied())
    }

    /// Channels-last snapshot to normalized `[1, C, spatial...]`.
    pub fn model_input(&self, snapshot: &ArrayD<f32>) -> ArrayD<f64> {
        let flat = snapshot
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(snapshot.len())
            .unwrap();
        let one = to_model_layout(flat.view(), snapshot.shape(), false, &self.normalization);
        let mut shape = vec![1];
        shape.extend_from_slice(one.shape());
        one.into_shape_with_order(IxDyn(&shape)).unwrap()
    }
}

/// Chained-cycle prediction: encode the cycle's starting snapshot, roll the
/// latent dynamics for up to `n_s` steps, decode each step, and feed the last
/// decoded snapshot into the encoder for the next cycle.
pub fn predict_sequence(
    model: &TrainedModel,
    x_start: &ArrayD<f32>,
    n_steps: usize,
) -> Result<Vec<ArrayD<f32>>> {
    assert!(n_steps >= 1, "prediction needs at least one step");
    let mut current = model.model_input(x_start);
    let mut out: Vec<ArrayD<f32>> = Vec::with_capacity(n_steps);
    while out.len() < n_steps {
        let take = model.n_s.min(n_steps - out.len());
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &model.params);
        let x = g.constant(current.clone().into_shared());
        let z = encode(&mut ctx, &model.cfg, &x);
        let latents = rollout(&mut ctx, &model.cfg, &z, take, model.latent_norm_bound)?;
        let decoded = decode(&mut ctx, &model.cfg, &concat(0, &latents));
        let dv = decoded.value();
        for m in 0..take {
            let one = dv.index_axis(Axis(0), m).to_owned();
            out.push(from_model_layout(&one, &model.normalization));
        }
        let last = dv.index_axis(Axis(0), take - 1).to_owned();
        let mut shape = vec![1];
        shape.extend_from_slice(last.shape());
        current = last.into_shape_with_order(IxDyn(&shape)).unwrap();
    }
    Ok(out)
}

/// Mean absolute difference over all points and channels (or one channel of
/// a channels-last field).
pub fn mean_l1(pred: &ArrayD<f32>, truth: &ArrayD<f32>, channel: Option<usize>) -> f64 {
    assert_eq!(pred.shape(), truth.shape(), "mean_l1 shape mismatch");
    match channel {
        None => {
            let n = pred.len() as f64;
            pred.iter()
                .zip(truth.iter())
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum::<f64>()
                / n
        }
        Some(c) => {
            let axis = Axis(pred.ndim() - 1);
            let p = pred.index_axis(axis, c);
            let t = truth.index_axis(axis, c);
            let n = p.len() as f64;
            p.iter()
                .zip(t.iter())
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .sum::<f64>()
                / n
        }
    }
}

/// Per-step mean L1 between two equal-length snapshot sequences.
pub fn mean_l1_series(
    pred: &[ArrayD<f32>],
    truth: &[ArrayD<f32>],
    channel: Option<usize>,
) -> Vec<f64> {
    assert_eq!(pred.len(), truth.len(), "series length mismatch");
    pred.iter()
        .zip(truth.iter())
        .map(|(p, t)| mean_l1(p, t, channel))
        .collect()
}

/// What to roll out and score after training.
#[derive(Clone, Copy, Debug)]
pub struct EvalProtocol {
    pub start_index: usize,
    pub n_steps: usize,
    pub channel: Option<usize>,
}

impl EvalProtocol {
    /// KS ablation protocol: start at snapshot 860, advance to 1180.
    pub fn ks_ablation() -> Self {
        EvalProtocol {
            start_index: 860,
            n_steps: 320,
            channel: None,
        }
    }

    /// GS protocol: start at snapshot 60, predict 32 steps, score species u.
    pub fn gs_ablation() -> Self {
        EvalProtocol {
            start_index: 60,
            n_steps: 32,
            channel: Some(0),
        }
    }
}

/// Per-step error curve of a trained model under a protocol, against ground
/// truth snapshots.
pub fn evaluate_curve(
    model: &TrainedModel,
    truth: &SnapshotCorpus,
    protocol: &EvalProtocol,
) -> Result<Vec<f64>> {
    if protocol.start_index + protocol.n_steps >= truth.len() {
        return Err(Error::CorpusTooShort {
            len: truth.len(),
            needed: protocol.start_index + protocol.n_steps + 1,
        });
    }
    let x0 = truth.snapshot(protocol.start_index).values;
    let preds = predict_sequence(model, &x0, protocol.n_steps)?;
    let truths: Vec<ArrayD<f32>> = (1..=protocol.n_steps)
        .map(|m| truth.snapshot(protocol.start_index + m).values)
        .collect();
    Ok(mean_l1_series(&preds, &truths, protocol.channel))
}

/// Baseline that repeats the starting snapshot.
pub fn persistence_curve(
    truth: &SnapshotCorpus,
    protocol: &EvalProtocol,
) -> Vec<f64> {
    let x0 = truth.snapshot(protocol.start_index).values;
    (1..=protocol.n_steps)
        .map(|m| {
            mean_l1(
                &x0,
                &truth.snapshot(protocol.start_index + m).values,
                protocol.channel,
            )
        })
        .collect()
}

pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub curve: Vec<f64>,
    pub logs: Vec<StepLog>,
    pub checkpoint: Checkpoint,
}

/// Train each variant with identical seeds and configuration apart from the
/// gated loss weights, then evaluate its per-step error curve. Variants run
/// in parallel and fail independently.
pub fn run_ablation(
    train_corpus: &SnapshotCorpus,
    truth_corpus: &SnapshotCorpus,
    model_cfg: &ModelConfig,
    base_train: &TrainConfig,
    variants: &[AblationVariant],
    protocol: &EvalProtocol,
) -> Vec<(AblationVariant, Result<AblationOutcome>)> {
    variants
        .par_iter()
        .map(|&variant| {
            let run = || -> Result<AblationOutcome> {
                let mut cfg = base_train.clone();
                cfg.weights = variant.apply(&base_train.weights);
                let mut trainer = Trainer::new(train_corpus, model_cfg.clone(), cfg.clone())?;
                let mut logs = Vec::with_capacity(cfg.iterations as usize);
                trainer.train(train_corpus, cfg.iterations, |_, log| {
                    logs.push(log.clone());
                    Ok(())
                })?;
                let ckpt = trainer.checkpoint();
                let model = TrainedModel::from_checkpoint(&ckpt);
                let curve = evaluate_curve(&model, truth_corpus, protocol)?;
                Ok(AblationOutcome {
                    variant,
                    curve,
                    logs,
                    checkpoint: ckpt,
                })
            };
            (variant, run())
        })
        .collect()
}

/// Predict each masked snapshot from the most recent unmasked one: for a
/// masked index `k` with greatest unmasked `j < k`, roll `k - j` steps from
/// the snapshot at `j` and return the final decoded state.
pub fn impute_missing(
    model: &TrainedModel,
    corpus: &SnapshotCorpus,
) -> Result<Vec<(usize, ArrayD<f32>)>> {
    let mut out = Vec::new();
    for k in corpus.masked_indices() {
        let j = (0..k).rev().find(|&j| !corpus.is_masked(j));
        let Some(j) = j else {
            return Err(Error::NoUnmaskedPredecessor { index: k });
        };
        let preds = predict_sequence(model, &corpus.snapshot(j).values, k - j)?;
        out.push((k, preds.into_iter().next_back().unwrap()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_closed_forms_and_oracle() {
        let a = ArrayD::from_shape_fn(IxDyn(&[5, 2]), |ix| (ix[0] * 2 + ix[1]) as f32 * 0.3);
        assert_eq!(mean_l1(&a, &a, None), 0.0);
        let b = a.mapv(|v| v + 0.5);
        let d = mean_l1(&a, &b, None);
        assert!((d - 0.5) < 1e-6);
        // independent elementwise oracle on a random pair
        let c = ArrayD::from_shape_fn(IxDyn(&[5, 2]), |ix| ((ix[0] * 7 + ix[1] * 3) as f32).sin());
        let mut acc = 0.0f64;
        for (x, y) in a.iter().zip(c.iter()) {
            acc += (*x as f64 - *y as f64).abs();
        }
        acc /= 10.0;
        assert!((mean_l1(&a, &c, None) - acc).abs() <= 1e-12);
        // per-channel restriction
        let d0 = mean_l1(&a, &c, Some(0));
        let mut acc0 = 0.0f64;
        for i in 0..5 {
            acc0 += (a[[i, 0]] as f64 - c[[i, 0]] as f64).abs();
        }
        assert!((d0 - acc0 / 5.0).abs() <= 1e-12);
    }
}
