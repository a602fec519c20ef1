//! Latent-space control: learn control inputs under a fixed random boolean
//! matrix so the system evolves toward a desired future state at a forced
//! rate. Network weights stay frozen; only the control inputs are optimized.

use crate::adam::Adam;
use crate::corpus::{from_model_layout, SnapshotCorpus};
use crate::error::{Error, Result};
use crate::evaluation::TrainedModel;
use crate::koopman::koopman_apply;
use crate::networks::{decode, Ctx, ModelConfig, ParamEntry, ParamKind, ParamStore};
use dakm_autograd::{concat, grad, Graph, Var};
use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ControlConfig {
    pub t_start: usize,
    pub t_desired: usize,
    pub delta: usize,
    pub l_density: f64,
    #[serde(with = "crate::corpus::seed_serde")]
    pub l_seed: u64,
    /// Optimizer iterations over the control inputs.
    pub steps: usize,
    pub lr: f64,
    pub u_penalty: f64,
    /// Objective recordings every this many steps.
    pub trace_every: usize,
    /// Steps without improvement before the run is flagged as not converged.
    pub patience: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            t_start: 50,
            t_desired: 80,
            delta: 16,
            l_density: 0.4,
            l_seed: 0,
            steps: 2000,
            lr: 1e-2,
            u_penalty: 1.0,
            trace_every: 100,
            patience: 200,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self, corpus_len: usize) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::InvalidConfig("delta must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.l_density) {
            return Err(Error::InvalidConfig("l_density must be in [0,1]".into()));
        }
        if self.t_start >= corpus_len || self.t_desired >= corpus_len {
            return Err(Error::InvalidConfig(format!(
                "t_start {} and t_desired {} must lie inside the corpus (length {corpus_len})",
                self.t_start, self.t_desired
            )));
        }
        if self.steps == 0 || self.lr <= 0.0 || self.trace_every == 0 {
            return Err(Error::InvalidConfig(
                "steps, lr and trace_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// I.i.d. Bernoulli(density) boolean matrix, deterministic in the seed.
pub fn make_control_matrix(m: usize, density: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((m, m), || {
        if rng.gen::<f64>() < density {
            1.0
        } else {
            0.0
        }
    })
}

/// One forced step `z + K z + L u`, with the Koopman matrix recomputed from
/// the current (forced) latent.
pub fn controlled_step(ctx: &mut Ctx, cfg: &ModelConfig, z: &Var, u_t: &Var, l: &Var) -> Var {
    let m = cfg.latent_dim;
    let free = koopman_apply(ctx, cfg, z);
    let lu = l.matmul(&u_t.reshape(&[m, 1])).reshape(&[1, m]);
    free.add(&lu)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlTracePoint {
    pub step: usize,
    pub total: f64,
    pub latent_gap: f64,
    pub input_penalty: f64,
}

pub struct ControlOutcome {
    /// Optimized inputs, one row per forced step (`delta x M`).
    pub u: Array2<f64>,
    pub trace: Vec<ControlTracePoint>,
    pub final_total: f64,
    /// Latents along the forced trajectory (after each of the delta steps).
    pub forced_latents: Vec<Array1<f64>>,
    /// Decoded forced trajectory, channels-last corpus units.
    pub decoded: Vec<ArrayD<f32>>,
    pub converged: bool,
}

struct Objective {
    u: Var,
    total: Var,
    gap: Var,
    penalty: Var,
    latents: Vec<Var>,
}

/// Forced rollout and the two-term objective
/// `|z_pred - z_target|^2 + u_penalty * sum(U^2)` (sum reductions).
fn build_objective(
    model: &TrainedModel,
    z_start: &Array1<f64>,
    z_target: &Array1<f64>,
    l: &Array2<f64>,
    u_value: &Array2<f64>,
    u_penalty: f64,
) -> Objective {
    let m = model.cfg.latent_dim;
    let delta = u_value.nrows();
    let g = Graph::new();
    let mut ctx = Ctx::eval(&g, &model.params);
    let u = g.leaf(u_value.clone().into_dyn().into_shared());
    let lv = g.constant(l.clone().into_dyn().into_shared());
    let mut z = g.constant(as_row(z_start, m));
    let mut latents = Vec::with_capacity(delta);
    for t in 0..delta {
        let u_t = u.slice_axis(0, t, 1).reshape(&[m]);
        z = controlled_step(&mut ctx, &model.cfg, &z, &u_t, &lv);
        latents.push(z.clone());
    }
    let zt = g.constant(as_row(z_target, m));
    let gap = z.sub(&zt).square().sum_all();
    let penalty = u.square().sum_all().scale(u_penalty);
    let total = gap.add(&penalty);
    Objective {
        u,
        total,
        gap,
        penalty,
        latents,
    }
}

fn as_row(z: &Array1<f64>, m: usize) -> dakm_autograd::Value {
    z.clone()
        .into_shape_with_order(IxDyn(&[1, m]))
        .unwrap()
        .into_shared()
}

/// Gradient descent (Adam steps, inputs start at zero) over the control
/// inputs, minimizing the squared latent gap to the desired snapshot's
/// embedding plus the input penalty. Network parameters are read-only. The
/// control matrix is drawn from the configuration's density and seed.
pub fn optimize_controls(
    model: &TrainedModel,
    corpus: &SnapshotCorpus,
    cfg: &ControlConfig,
) -> Result<ControlOutcome> {
    let l = make_control_matrix(model.cfg.latent_dim, cfg.l_density, cfg.l_seed);
    optimize_controls_with(model, corpus, cfg, &l)
}

/// [`optimize_controls`] under an explicitly supplied control matrix.
pub fn optimize_controls_with(
    model: &TrainedModel,
    corpus: &SnapshotCorpus,
    cfg: &ControlConfig,
    l: &Array2<f64>,
) -> Result<ControlOutcome> {
    cfg.validate(corpus.len())?;
    let m = model.cfg.latent_dim;
    assert_eq!(l.dim(), (m, m), "control matrix must be M x M");
    let z_start = model.encode_snapshot(&corpus.snapshot(cfg.t_start).values);
    let z_target = model.encode_snapshot(&corpus.snapshot(cfg.t_desired).values);

    let mut store = ParamStore::new();
    store.insert(
        "u".into(),
        ParamEntry {
            value: ArrayD::zeros(IxDyn(&[cfg.delta, m])),
            kind: ParamKind::DenseWeight,
        },
    );
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut converged = true;

    for step in 0..cfg.steps {
        let u_now = to_matrix(&store.get("u").unwrap().value, cfg.delta, m);
        let obj = build_objective(model, &z_start, &z_target, l, &u_now, cfg.u_penalty);
        let total = obj.total.scalar();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: step as u64,
                component: "control".into(),
            });
        }
        if total < best - 1e-15 {
            best = total;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                converged = false;
            }
        }
        if step % cfg.trace_every == 0 {
            trace.push(ControlTracePoint {
                step,
                total,
                latent_gap: obj.gap.scalar(),
                input_penalty: obj.penalty.scalar(),
            });
        }
        let gu = grad(&obj.total, &[&obj.u]).pop().unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("u".to_string(), gu.value().to_owned());
        opt.apply(&mut store, &grads);
    }

    // one more pass at the optimized inputs for reporting and decoding
    let u_final = to_matrix(&store.get("u").unwrap().value, cfg.delta, m);
    let obj = build_objective(model, &z_start, &z_target, l, &u_final, cfg.u_penalty);
    trace.push(ControlTracePoint {
        step: cfg.steps,
        total: obj.total.scalar(),
        latent_gap: obj.gap.scalar(),
        input_penalty: obj.penalty.scalar(),
    });
    let forced_latents: Vec<Array1<f64>> = obj
        .latents
        .iter()
        .map(|z| Array1::from_iter(z.value().iter().copied()))
        .collect();
    let decoded = decode_latents(model, &obj.latents)?;
    Ok(ControlOutcome {
        u: u_final,
        final_total: obj.total.scalar(),
        trace,
        forced_latents,
        decoded,
        converged,
    })
}

fn decode_latents(model: &TrainedModel, latents: &[Var]) -> Result<Vec<ArrayD<f32>>> {
    if latents.is_empty() {
        return Ok(vec![]);
    }
    let g = latents[0].graph().clone();
    let values: Vec<Var> = latents.iter().map(|z| g.constant(z.value())).collect();
    let mut ctx = Ctx::eval(&g, &model.params);
    let decoded = decode(&mut ctx, &model.cfg, &concat(0, &values));
    let dv = decoded.value();
    Ok((0..latents.len())
        .map(|i| from_model_layout(&dv.index_axis(Axis(0), i).to_owned(), &model.normalization))
        .collect())
}

fn to_matrix(v: &ArrayD<f64>, rows: usize, cols: usize) -> Array2<f64> {
    v.clone().into_shape_with_order((rows, cols)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_matrix_densities() {
        assert!(make_control_matrix(8, 0.0, 1).iter().all(|&v| v == 0.0));
        assert!(make_control_matrix(8, 1.0, 1).iter().all(|&v| v == 1.0));
        let l = make_control_matrix(64, 0.4, 7);
        let ones = l.iter().filter(|&&v| v == 1.0).count();
        // expectation 0.4 * 4096 = 1638.4, sd ~ 31; allow 5 sigma
        assert!((ones as f64 - 1638.4).abs() < 160.0, "ones = {ones}");
        assert_eq!(l, make_control_matrix(64, 0.4, 7));
        assert_ne!(l, make_control_matrix(64, 0.4, 8));
    }
}
