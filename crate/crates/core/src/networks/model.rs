//! Forward definitions of the encoder, decoder, auxiliary network and critic.

use super::layers::{batch_norm, conv_layer, deconv_layer, dense, dense_zeros, flatten};
use super::{Ctx, ModelConfig, ParamStore};
use crate::error::Result;
use dakm_autograd::Var;

/// Pre-activation bottleneck branch: BN -> ReLU -> 1x1 (half width) -> BN ->
/// ReLU -> 3x3 (half width) -> BN -> ReLU -> 1x1 (input width). The branch
/// preserves its input channel count so it can be added residually.
fn bottleneck(ctx: &mut Ctx, prefix: &str, x: &Var, transposed: bool) -> Var {
    let channels = x.shape()[1];
    let mid = (channels / 2).max(1);
    let lay = |ctx: &mut Ctx, name: String, t: &Var, ch: usize, k: usize| {
        if transposed {
            deconv_layer(ctx, &name, t, ch, k, 1)
        } else {
            conv_layer(ctx, &name, t, ch, k, 1)
        }
    };
    let t = batch_norm(ctx, &format!("{prefix}.bn1"), x).relu();
    let t = lay(ctx, format!("{prefix}.c1"), &t, mid, 1);
    let t = batch_norm(ctx, &format!("{prefix}.bn2"), &t).relu();
    let t = lay(ctx, format!("{prefix}.c2"), &t, mid, 3);
    let t = batch_norm(ctx, &format!("{prefix}.bn3"), &t).relu();
    lay(ctx, format!("{prefix}.c3"), &t, channels, 1)
}

/// Encoder `g`: five stride-2 residual stages, ReLU, flatten, dense to the
/// latent dimension. No output activation.
pub fn encode(ctx: &mut Ctx, cfg: &ModelConfig, x: &Var) -> Var {
    let shape = x.shape();
    assert_eq!(shape[1], cfg.in_channels, "encoder input channels");
    assert_eq!(&shape[2..], &cfg.input_extent[..], "encoder input extent");
    let mut h = x.clone();
    for (i, &nf) in cfg.encoder_channels.iter().enumerate() {
        let c = conv_layer(ctx, &format!("enc.s{i}.conv"), &h, nf, 3, 2);
        let b = bottleneck(ctx, &format!("enc.s{i}.bneck"), &c, false);
        h = c.add(&b);
    }
    let h = flatten(&h.relu());
    dense(ctx, "enc.fc", &h, cfg.latent_dim)
}

/// Decoder `g^{-1}`: dense to the encoder's flattened extent, reshape, five
/// residual stages of (input + bottleneck) -> stride-2 transposed
/// convolution; sigmoid or identity output.
pub fn decode(ctx: &mut Ctx, cfg: &ModelConfig, z: &Var) -> Var {
    let b = z.shape()[0];
    assert_eq!(z.shape()[1], cfg.latent_dim, "decoder latent dimension");
    let flat = cfg.flat_after_encoder();
    let h = dense(ctx, "dec.fc", z, flat);
    let mut map_shape = vec![b, *cfg.encoder_channels.last().unwrap()];
    map_shape.extend(cfg.encoded_spatial());
    let mut h = h.reshape(&map_shape);
    for (i, &nf) in cfg.decoder_channels().iter().enumerate() {
        let br = bottleneck(ctx, &format!("dec.s{i}.bneck"), &h, true);
        let r = h.add(&br);
        h = deconv_layer(ctx, &format!("dec.s{i}.dconv"), &r, nf, 3, 2);
    }
    if cfg.output_sigmoid {
        h.sigmoid()
    } else {
        h
    }
}

/// Auxiliary network: latent code to Koopman matrix, `[B, M] -> [B, M, M]`.
/// The output layer starts at zero so the residual dynamics begin as the
/// identity map.
pub fn aux_koopman(ctx: &mut Ctx, cfg: &ModelConfig, z: &Var) -> Var {
    let b = z.shape()[0];
    assert_eq!(z.shape()[1], cfg.latent_dim, "aux latent dimension");
    let mut h = z.clone();
    for (i, &n) in cfg.aux_hidden.iter().enumerate() {
        h = dense(ctx, &format!("aux.fc{i}"), &h, n).relu();
        h = ctx.dropout(&h);
    }
    let m = cfg.latent_dim;
    let k = dense_zeros(ctx, "aux.out", &h, m * m);
    k.reshape(&[b, m, m])
}

/// Wasserstein critic on a channel-stacked sequence pair: stride-2 conv
/// stages (LeakyReLU 0.2, batch norm from the second stage on), flatten,
/// dense to one unactivated scalar per batch item.
pub fn discriminate(ctx: &mut Ctx, cfg: &ModelConfig, pair: &Var) -> Var {
    let mut h = conv_layer(ctx, "disc.s0.conv", pair, cfg.disc_channels[0], 5, 2).leaky_relu(0.2);
    for (i, &nf) in cfg.disc_channels.iter().enumerate().skip(1) {
        h = conv_layer(ctx, &format!("disc.s{i}.conv"), &h, nf, 5, 2);
        h = batch_norm(ctx, &format!("disc.s{i}.bn"), &h);
        h = h.leaky_relu(0.2);
    }
    let h = flatten(&h);
    dense(ctx, "disc.fc", &h, 1)
}

/// See [`super::init_params_impl`].
pub fn init_params(cfg: &ModelConfig, n_s: usize, seed: u64) -> Result<ParamStore> {
    super::init_params_impl(cfg, n_s, seed)
}
