//! Residual Koopman dynamics, recursive rollout, and the training losses:
//! reconstruction, prediction, code, finite-difference gradient, L2
//! regularization, and the Wasserstein GAN pair with gradient penalty.

use crate::corpus::{Normalization, SequenceSample};
use crate::error::{Error, Result};
use crate::networks::{aux_koopman, decode, discriminate, encode, Ctx, ModelConfig};
use dakm_autograd::{concat, grad, Graph, Var};
use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

/// All coefficients governing the total training objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_grad: f64,
    pub lambda_reg: f64,
    pub lambda_gan: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda4: f64,
    pub gp_coeff: f64,
}

impl LossWeights {
    /// Full adversarial + gradient configuration for the KS problem.
    pub fn ks_paper() -> Self {
        LossWeights {
            lambda_grad: 1.0,
            lambda_reg: 1e-3,
            lambda_gan: 0.01,
            lambda1: 1.0,
            lambda2: 1e-5,
            lambda4: 1e-8,
            gp_coeff: 10.0,
        }
    }

    /// Full adversarial + gradient configuration for the GS problem
    /// (first-derivative loss only).
    pub fn gs_paper() -> Self {
        LossWeights {
            lambda2: 0.0,
            lambda4: 0.0,
            ..LossWeights::ks_paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_grad,
            self.lambda_reg,
            self.lambda_gan,
            self.lambda1,
            self.lambda2,
            self.lambda4,
            self.gp_coeff,
        ];
        if all.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The ablation grid: adversarial loss on/off times gradient loss on/off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Koopman,
    AdvKoopman,
    KoopmanGrad,
    AdvKoopmanGrad,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Koopman,
        AblationVariant::AdvKoopman,
        AblationVariant::KoopmanGrad,
        AblationVariant::AdvKoopmanGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Koopman => "koopman",
            AblationVariant::AdvKoopman => "adv_koopman",
            AblationVariant::KoopmanGrad => "koopman_grad",
            AblationVariant::AdvKoopmanGrad => "adv_koopman_grad",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Gate the adversarial and gradient weights of a base configuration.
    pub fn apply(self, base: &LossWeights) -> LossWeights {
        let adv = matches!(self, AblationVariant::AdvKoopman | AblationVariant::AdvKoopmanGrad);
        let grad = matches!(self, AblationVariant::KoopmanGrad | AblationVariant::AdvKoopmanGrad);
        LossWeights {
            lambda_gan: if adv { 0.01 } else { 0.0 },
            lambda_grad: if grad { 1.0 } else { 0.0 },
            ..*base
        }
    }
}

/// One residual Koopman step: `z + AUX(z) z`, with the matrix recomputed
/// from the current latent state.
pub fn koopman_apply(ctx: &mut Ctx, cfg: &ModelConfig, z: &Var) -> Var {
    let b = z.shape()[0];
    let m = cfg.latent_dim;
    let k = aux_koopman(ctx, cfg, z);
    let kz = k.bmm(&z.reshape(&[b, m, 1])).reshape(&[b, m]);
    z.add(&kz)
}

/// Apply the residual Koopman operator `steps` times, recomputing the matrix
/// at every step; returns the latent after each application.
pub fn rollout(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    z1: &Var,
    steps: usize,
    norm_bound: f64,
) -> Result<Vec<Var>> {
    assert!(steps >= 1, "rollout needs at least one step");
    let mut out = Vec::with_capacity(steps);
    let mut z = z1.clone();
    for step in 0..steps {
        z = koopman_apply(ctx, cfg, &z);
        let norm = z.value().iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > norm_bound {
            return Err(Error::RolloutDiverged {
                step: step + 1,
                norm,
                bound: norm_bound,
            });
        }
        out.push(z.clone());
    }
    Ok(out)
}

/// Periodic central finite-difference stencils of order 1, 2 or 4 along every
/// spatial axis (axes 2..) of `[B, C, spatial...]`; for 2-D fields the
/// per-axis results are summed.
pub fn fd_gradient(x: &Var, order: usize, dx: f64) -> Result<Var> {
    let ndim = x.shape().len();
    let mut total: Option<Var> = None;
    for axis in 2..ndim {
        let d = match order {
            1 => x
                .circshift(axis, 1)
                .sub(&x.circshift(axis, -1))
                .scale(1.0 / (2.0 * dx)),
            2 => x
                .circshift(axis, 1)
                .sub(&x.scale(2.0))
                .add(&x.circshift(axis, -1))
                .scale(1.0 / (dx * dx)),
            4 => x
                .circshift(axis, 2)
                .sub(&x.circshift(axis, 1).scale(4.0))
                .add(&x.scale(6.0))
                .sub(&x.circshift(axis, -1).scale(4.0))
                .add(&x.circshift(axis, -2))
                .scale(1.0 / dx.powi(4)),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unsupported finite-difference order {other}"
                )))
            }
        };
        total = Some(match total {
            None => d,
            Some(t) => t.add(&d),
        });
    }
    total.ok_or_else(|| Error::ShapeMismatch("field has no spatial axes".into()))
}

/// Training window in model layout: normalized `[channels, spatial...]` f64
/// snapshots with masked entries substituted by zeros (their stored values
/// are never read).
pub struct SampleTensors {
    pub n_s: usize,
    pub snapshots: Vec<ArrayD<f64>>,
    pub mask: Vec<bool>,
}

pub fn prepare_sample(
    sample: &SequenceSample,
    shape: &[usize],
    norm: &Normalization,
) -> SampleTensors {
    let n_s = sample.x_seq.nrows() - 1;
    let snapshots = (0..=n_s)
        .map(|i| {
            crate::corpus::to_model_layout(sample.x_seq.row(i), shape, sample.mask_seq[i], norm)
        })
        .collect();
    SampleTensors {
        n_s,
        snapshots,
        mask: sample.mask_seq.clone(),
    }
}

fn mse(a: &Var, b: &Var) -> Var {
    a.sub(b).square().mean_all()
}

fn mse0(a: &Var) -> Var {
    a.square().mean_all()
}

fn batch_of(g: &Graph, items: &[&ArrayD<f64>]) -> Var {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (i, item) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(item);
    }
    g.constant(out.into_shared())
}

fn const_snapshot(g: &Graph, s: &ArrayD<f64>) -> Var {
    batch_of(g, &[s])
}

/// Reconstruction loss: MSE between a snapshot and its autoencoding.
pub fn loss_recon(ctx: &mut Ctx, cfg: &ModelConfig, x_t: &ArrayD<f64>) -> Var {
    let x = const_snapshot(&ctx.g.clone(), x_t);
    let z = encode(ctx, cfg, &x);
    let xr = decode(ctx, cfg, &z);
    mse(&xr, &x)
}

fn encode_anchor_and_roll(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    sample: &SampleTensors,
    norm_bound: f64,
) -> Result<Vec<Var>> {
    let g = ctx.g.clone();
    let x_t = const_snapshot(&g, &sample.snapshots[0]);
    let z_t = encode(ctx, cfg, &x_t);
    rollout(ctx, cfg, &z_t, sample.n_s, norm_bound)
}

/// Prediction loss: masked mean over the window of MSE between each true
/// snapshot and the decoded rollout of the anchor's latent.
pub fn loss_pred(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    sample: &SampleTensors,
    norm_bound: f64,
) -> Result<Var> {
    let g = ctx.g.clone();
    let latents = encode_anchor_and_roll(ctx, cfg, sample, norm_bound)?;
    let dec_in = concat(0, &latents);
    let decoded = decode(ctx, cfg, &dec_in);
    let mut acc = g.scalar(0.0);
    for m in 1..=sample.n_s {
        if sample.mask[m] {
            continue;
        }
        let pred = decoded.slice_axis(0, m - 1, 1);
        let truth = const_snapshot(&g, &sample.snapshots[m]);
        acc = acc.add(&mse(&pred, &truth));
    }
    Ok(acc.scale(1.0 / sample.n_s as f64))
}

/// Code loss: as the prediction loss but in latent space, against the
/// encoder's embedding of each true snapshot.
pub fn loss_code(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    sample: &SampleTensors,
    norm_bound: f64,
) -> Result<Var> {
    let g = ctx.g.clone();
    let latents = encode_anchor_and_roll(ctx, cfg, sample, norm_bound)?;
    let mut acc = g.scalar(0.0);
    for m in 1..=sample.n_s {
        if sample.mask[m] {
            continue;
        }
        let truth = const_snapshot(&g, &sample.snapshots[m]);
        let z_true = encode(ctx, cfg, &truth);
        acc = acc.add(&mse(&latents[m - 1], &z_true));
    }
    Ok(acc.scale(1.0 / sample.n_s as f64))
}

/// Gradient loss: per-order MSE of the finite-difference stencils applied to
/// the prediction residual, averaged over the window with masking and
/// combined with the per-order coefficients.
pub fn loss_grad(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    sample: &SampleTensors,
    weights: &LossWeights,
    dx: f64,
    norm_bound: f64,
) -> Result<Var> {
    let g = ctx.g.clone();
    let latents = encode_anchor_and_roll(ctx, cfg, sample, norm_bound)?;
    let dec_in = concat(0, &latents);
    let decoded = decode(ctx, cfg, &dec_in);
    let mut residuals = Vec::new();
    for m in 1..=sample.n_s {
        if sample.mask[m] {
            continue;
        }
        let pred = decoded.slice_axis(0, m - 1, 1);
        let truth = const_snapshot(&g, &sample.snapshots[m]);
        residuals.push(truth.sub(&pred));
    }
    grad_loss_of_residuals(&g, &residuals, sample.n_s, weights, dx)
}

fn grad_loss_of_residuals(
    g: &Graph,
    residuals: &[Var],
    n_s: usize,
    weights: &LossWeights,
    dx: f64,
) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for (order, lambda) in [
        (1usize, weights.lambda1),
        (2, weights.lambda2),
        (4, weights.lambda4),
    ] {
        if lambda == 0.0 {
            continue;
        }
        let mut acc = g.scalar(0.0);
        for r in residuals {
            acc = acc.add(&mse0(&fd_gradient(r, order, dx)?));
        }
        total = total.add(&acc.scale(lambda / n_s as f64));
    }
    Ok(total)
}

/// Sum of squares over the convolution/dense weight arrays of the encoder,
/// decoder and auxiliary network (biases and normalization parameters are
/// excluded, as is the critic, which has its own objective).
pub fn loss_reg(ctx: &mut Ctx) -> Var {
    let names: Vec<(String, crate::networks::ParamKind, Vec<usize>)> = ctx
        .store()
        .iter()
        .filter(|(n, e)| {
            e.kind.regularized()
                && (n.starts_with("enc.") || n.starts_with("dec.") || n.starts_with("aux."))
        })
        .map(|(n, e)| (n.clone(), e.kind, e.value.shape().to_vec()))
        .collect();
    let mut acc = ctx.g.clone().scalar(0.0);
    for (name, kind, shape) in names {
        let w = ctx.param(&name, kind, &shape);
        acc = acc.add(&w.square().sum_all());
    }
    acc
}

/// Anything that scores a channel-stacked sequence pair; the production
/// implementation is the convolutional critic, test doubles provide closed
/// forms.
pub trait Critic {
    fn score(&self, ctx: &mut Ctx, pair: &Var) -> Var;
}

pub struct ModelCritic<'a> {
    pub cfg: &'a ModelConfig,
}

impl Critic for ModelCritic<'_> {
    fn score(&self, ctx: &mut Ctx, pair: &Var) -> Var {
        discriminate(ctx, self.cfg, pair)
    }
}

/// Stack a conditioning sequence and a continuation along the channel axis:
/// `[1, 2 n_s C, spatial...]`.
fn stack_pair(g: &Graph, cond: &[&ArrayD<f64>], continuation: &[Var]) -> Var {
    let mut parts: Vec<Var> = cond.iter().map(|s| const_snapshot(g, s)).collect();
    parts.extend(continuation.iter().cloned());
    concat(1, &parts)
}

pub struct GanLosses {
    pub gen: Var,
    pub disc: Var,
    pub gp: Var,
}

/// Wasserstein pair losses. `x_cond` and `x1_real` come from data; the
/// predicted continuation may be live graph nodes. The gradient penalty is
/// evaluated at a single uniform interpolation `u real + (1-u) fake` of the
/// two pairs.
pub fn gan_losses(
    ctx: &mut Ctx,
    critic: &dyn Critic,
    x_cond: &[&ArrayD<f64>],
    x1_real: &[&ArrayD<f64>],
    x1_pred: &[Var],
    gp_coeff: f64,
    interp_u: f64,
) -> GanLosses {
    let g = ctx.g.clone();
    let real = stack_pair(&g, x_cond, &x1_real.iter().map(|s| const_snapshot(&g, s)).collect::<Vec<_>>());
    let fake = stack_pair(&g, x_cond, x1_pred);

    let d_real = critic.score(ctx, &real).mean_all();
    let d_fake = critic.score(ctx, &fake).mean_all();
    let gen = d_fake.clone();
    let disc = d_fake.sub(&d_real);

    let interp = real
        .value()
        .mapv(|v| v * interp_u)
        .into_dyn()
        + &fake.value().mapv(|v| v * (1.0 - interp_u)).into_dyn();
    let x_hat = g.leaf(interp.into_shared());
    let d_hat = critic.score(ctx, &x_hat).sum_all();
    let gx = grad(&d_hat, &[&x_hat]).pop().unwrap();
    // the tiny epsilon keeps sqrt differentiable at an exactly zero gradient
    let norm = gx.square().sum_all().add_scalar(1e-24).sqrt();
    let gp = norm.add_scalar(-1.0).square().scale(gp_coeff);

    GanLosses { gen, disc, gp }
}

/// Decoded continuation of the anchor snapshot (the "fake" sequence for the
/// critic). The anchor must be unmasked.
pub fn predicted_continuation(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    sample: &SampleTensors,
    norm_bound: f64,
) -> Result<Vec<Var>> {
    let latents = encode_anchor_and_roll(ctx, cfg, sample, norm_bound)?;
    let dec_in = concat(0, &latents);
    let decoded = decode(ctx, cfg, &dec_in);
    Ok((0..sample.n_s)
        .map(|m| decoded.slice_axis(0, m, 1))
        .collect())
}

/// All generator loss components with shared forward passes, and the total
/// `recon + pred + code + lg * grad + lr * reg + lgan * gan`.
pub struct GenLosses {
    pub recon: Var,
    pub pred: Var,
    pub code: Var,
    pub grad: Var,
    pub reg: Var,
    pub gan: Var,
    pub total: Var,
}

impl GenLosses {
    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("recon", self.recon.scalar()),
            ("pred", self.pred.scalar()),
            ("code", self.code.scalar()),
            ("grad", self.grad.scalar()),
            ("reg", self.reg.scalar()),
            ("gan", self.gan.scalar()),
            ("total", self.total.scalar()),
        ]
    }
}

pub fn generator_losses(
    ctx: &mut Ctx,
    cfg: &ModelConfig,
    sample: &SampleTensors,
    weights: &LossWeights,
    dx: f64,
    norm_bound: f64,
    critic: Option<&dyn Critic>,
) -> Result<GenLosses> {
    let g = ctx.g.clone();
    let n_s = sample.n_s;
    assert!(!sample.mask[0], "window anchor must be unmasked");

    // one encoder pass over the anchor and every unmasked target
    let mut enc_rows = vec![0usize];
    enc_rows.extend((1..=n_s).filter(|&m| !sample.mask[m]));
    let enc_refs: Vec<&ArrayD<f64>> = enc_rows.iter().map(|&i| &sample.snapshots[i]).collect();
    let x_enc = batch_of(&g, &enc_refs);
    let z_all = encode(ctx, cfg, &x_enc);
    let z_t = z_all.slice_axis(0, 0, 1);

    let latents = rollout(ctx, cfg, &z_t, n_s, norm_bound)?;

    // one decoder pass over [z_t, rollout...]
    let mut dec_rows = vec![z_t.clone()];
    dec_rows.extend(latents.iter().cloned());
    let decoded = decode(ctx, cfg, &concat(0, &dec_rows));

    let x_t = const_snapshot(&g, &sample.snapshots[0]);
    let recon = mse(&decoded.slice_axis(0, 0, 1), &x_t);

    let mut pred = g.scalar(0.0);
    let mut code = g.scalar(0.0);
    let mut residuals = Vec::new();
    for (row, &m) in enc_rows.iter().enumerate().skip(1) {
        let truth = const_snapshot(&g, &sample.snapshots[m]);
        let dec_m = decoded.slice_axis(0, m, 1);
        pred = pred.add(&mse(&dec_m, &truth));
        code = code.add(&mse(&latents[m - 1], &z_all.slice_axis(0, row, 1)));
        if weights.lambda_grad > 0.0 {
            residuals.push(truth.sub(&dec_m));
        }
    }
    pred = pred.scale(1.0 / n_s as f64);
    code = code.scale(1.0 / n_s as f64);

    let grad_loss = if weights.lambda_grad > 0.0 {
        grad_loss_of_residuals(&g, &residuals, n_s, weights, dx)?
    } else {
        g.scalar(0.0)
    };

    let reg = loss_reg(ctx);

    let gan = if weights.lambda_gan > 0.0 {
        let critic = critic.expect("adversarial weight is positive but no critic was supplied");
        let cond: Vec<&ArrayD<f64>> = (0..n_s).map(|i| &sample.snapshots[i]).collect();
        let fake: Vec<Var> = (0..n_s).map(|m| decoded.slice_axis(0, m + 1, 1)).collect();
        critic.score(ctx, &stack_pair(&g, &cond, &fake)).mean_all()
    } else {
        g.scalar(0.0)
    };

    let total = recon
        .add(&pred)
        .add(&code)
        .add(&grad_loss.scale(weights.lambda_grad))
        .add(&reg.scale(weights.lambda_reg))
        .add(&gan.scale(weights.lambda_gan));

    Ok(GenLosses {
        recon,
        pred,
        code,
        grad: grad_loss,
        reg,
        gan,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{init_params, ParamEntry, ParamKind, ParamStore};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            spatial_rank: 1,
            in_channels: 1,
            input_extent: vec![8],
            dropout_keep: 1.0,
            encoder_channels: vec![2, 2],
            aux_hidden: vec![4],
            disc_channels: vec![2, 2],
            output_sigmoid: false,
        }
    }

    /// Force the auxiliary output layer to emit a fixed matrix for every z.
    fn force_aux_matrix(store: &mut ParamStore, m: usize, k: &Array2<f64>) {
        let w = store.get_mut("aux.out.w").unwrap();
        w.value.fill(0.0);
        let b = store.get_mut("aux.out.b").unwrap();
        b.value = k
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(ndarray::IxDyn(&[m * m]))
            .unwrap();
    }

    #[test]
    fn residual_identity_and_annihilation() {
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 2, 1).unwrap();
        let z0 = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.3, -0.7]).unwrap();

        // zero matrix: identity dynamics
        force_aux_matrix(&mut store, 2, &Array2::zeros((2, 2)));
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &store);
        let z = g.constant(z0.clone().into_shared());
        let z1 = koopman_apply(&mut ctx, &cfg, &z);
        assert_eq!(z1.value().into_owned(), z0);

        // minus identity: annihilating residual
        force_aux_matrix(&mut store, 2, &(-Array2::<f64>::eye(2)));
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &store);
        let z = g.constant(z0.clone().into_shared());
        let z1 = koopman_apply(&mut ctx, &cfg, &z);
        assert!(z1.value().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn hand_sized_matrix_vector_case() {
        // K = [[0,1],[1,0]], z = (1,0): Kz = (0,1), z' = z + Kz = (1,1)
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 2, 1).unwrap();
        let k = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        force_aux_matrix(&mut store, 2, &k);
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &store);
        let z = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap().into_shared());
        let z1 = koopman_apply(&mut ctx, &cfg, &z);
        assert_eq!(z1.value()[[0, 0]], 1.0);
        assert_eq!(z1.value()[[0, 1]], 1.0);
    }

    #[test]
    fn rollout_composition_and_identity() {
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 2, 2).unwrap();

        // identity dynamics: five copies of z1
        force_aux_matrix(&mut store, 2, &Array2::zeros((2, 2)));
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &store);
        let z = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.4, 0.6]).unwrap().into_shared());
        let states = rollout(&mut ctx, &cfg, &z, 5, 1e6).unwrap();
        assert_eq!(states.len(), 5);
        for s in &states {
            assert_eq!(s.value(), z.value());
        }

        // composition: rollout(z, 3).last == apply(apply(apply(z)))
        let k = Array2::from_shape_vec((2, 2), vec![0.1, -0.2, 0.05, 0.15]).unwrap();
        force_aux_matrix(&mut store, 2, &k);
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &store);
        let z = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, -1.0]).unwrap().into_shared());
        let r3 = rollout(&mut ctx, &cfg, &z, 3, 1e6).unwrap();
        let mut w = z.clone();
        for _ in 0..3 {
            w = koopman_apply(&mut ctx, &cfg, &w);
        }
        for j in 0..2 {
            assert_abs_diff_eq!(r3[2].value()[[0, j]], w.value()[[0, j]], epsilon = 1e-14);
        }

        // a + b composition in eval mode
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &store);
        let z = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.2, 0.9]).unwrap().into_shared());
        let r5 = rollout(&mut ctx, &cfg, &z, 5, 1e6).unwrap();
        let r2 = rollout(&mut ctx, &cfg, &z, 2, 1e6).unwrap();
        let r3b = rollout(&mut ctx, &cfg, &r2[1], 3, 1e6).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(r5[4].value()[[0, j]], r3b[2].value()[[0, j]], epsilon = 1e-12);
        }
    }

    #[test]
    fn rollout_divergence_reports() {
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 2, 3).unwrap();
        force_aux_matrix(&mut store, 2, &(Array2::<f64>::eye(2) * 9.0));
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &store);
        let z = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 1.0]).unwrap().into_shared());
        match rollout(&mut ctx, &cfg, &z, 10, 1e3) {
            Err(Error::RolloutDiverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn fd_stencils_null_and_exactness() {
        let g = Graph::new();
        // constant field: zero for all orders
        let c = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 16]), 3.25).into_shared());
        for order in [1usize, 2, 4] {
            let d = fd_gradient(&c, order, 0.5).unwrap();
            assert!(d.value().iter().all(|&v| v.abs() < 1e-12));
        }
        // linear field: first derivative exact in the interior
        let dx = 0.25;
        let lin = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16]), |ix| 2.0 * ix[2] as f64 * dx + 1.0);
        let d1 = fd_gradient(&g.constant(lin.into_shared()), 1, dx).unwrap();
        for i in 1..15 {
            assert_abs_diff_eq!(d1.value()[[0, 0, i]], 2.0, epsilon = 1e-10);
        }
        // quadratic: second derivative exact
        let quad = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16]), |ix| (ix[2] as f64 * dx).powi(2));
        let d2 = fd_gradient(&g.constant(quad.into_shared()), 2, dx).unwrap();
        for i in 2..14 {
            assert_abs_diff_eq!(d2.value()[[0, 0, i]], 2.0, epsilon = 1e-10);
        }
        // quartic: fourth derivative of x^4 is 24, the 5-point stencil is exact
        let quart = ArrayD::from_shape_fn(IxDyn(&[1, 1, 16]), |ix| (ix[2] as f64 * dx).powi(4));
        let d4 = fd_gradient(&g.constant(quart.into_shared()), 4, dx).unwrap();
        for i in 2..14 {
            assert_abs_diff_eq!(d4.value()[[0, 0, i]], 24.0, epsilon = 1e-8);
        }
        // unsupported order
        assert!(fd_gradient(&c, 3, dx).is_err());
    }

    #[test]
    fn fd_sine_error_bound() {
        // u = sin(x), dx = 1/8: the Taylor remainder bounds the central
        // stencil error by dx^2/6 ~ 2.6e-3 (the observed maximum is
        // cos-weighted, (1 - sin(dx)/dx) ~ 2.602e-3)
        let dx = 0.125_f64;
        let n = 1024;
        let g = Graph::new();
        let u = ArrayD::from_shape_fn(IxDyn(&[1, 1, n]), |ix| (ix[2] as f64 * dx).sin());
        let d = fd_gradient(&g.constant(u.into_shared()), 1, dx).unwrap();
        let mut worst = 0.0_f64;
        for i in 1..n - 1 {
            let exact = (i as f64 * dx).cos();
            worst = worst.max((d.value()[[0, 0, i]] - exact).abs());
        }
        assert!(worst <= dx * dx / 6.0, "sine stencil error {worst:.4e}");
    }

    #[test]
    fn fd_2d_sums_per_axis() {
        let g = Graph::new();
        let dx = 0.5;
        let f = ArrayD::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |ix| {
            (ix[2] as f64 * dx).powi(2) + 3.0 * (ix[3] as f64 * dx).powi(2)
        });
        let d2 = fd_gradient(&g.constant(f.into_shared()), 2, dx).unwrap();
        for i in 2..6 {
            for j in 2..6 {
                assert_abs_diff_eq!(d2.value()[[0, 0, i, j]], 2.0 + 6.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn reg_loss_arithmetic() {
        // single weight array [1, 2] -> 1 + 4 = 5 before any lambda scaling
        let mut store = ParamStore::new();
        store.insert(
            "enc.only.w".into(),
            ParamEntry {
                value: ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.0]).unwrap(),
                kind: ParamKind::DenseWeight,
            },
        );
        store.insert(
            "enc.only.b".into(),
            ParamEntry {
                value: ArrayD::from_shape_vec(IxDyn(&[1]), vec![100.0]).unwrap(),
                kind: ParamKind::Bias,
            },
        );
        store.insert(
            "disc.only.w".into(),
            ParamEntry {
                value: ArrayD::from_shape_vec(IxDyn(&[1]), vec![50.0]).unwrap(),
                kind: ParamKind::DenseWeight,
            },
        );
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &store);
        assert_abs_diff_eq!(loss_reg(&mut ctx).scalar(), 5.0, epsilon = 0.0);

        // all-zero weights -> 0
        store.get_mut("enc.only.w").unwrap().value.fill(0.0);
        let g = Graph::new();
        let mut ctx = Ctx::eval(&g, &store);
        assert_abs_diff_eq!(loss_reg(&mut ctx).scalar(), 0.0, epsilon = 0.0);
    }
}
