// scratch probe: where does the rollout cascade come from
use dakm_autograd::Graph;
use dakm_core::koopman::{koopman_apply, prepare_sample};
use dakm_core::networks::{aux_koopman, encode, Ctx, ModelConfig};
use dakm_core::rng::{phase_rng, Phase};
use dakm_core::solvers::{generate_ks_corpus, KSConfig};
use dakm_core::training::{TrainConfig, Trainer};
use dakm_core::koopman::LossWeights;

fn main() {
    let solver_cfg = KSConfig {
        domain_length: 64.0, dx: 0.5, n_steps: 2048, save_every: 4,
        ..KSConfig::default()
    };
    let corpus = generate_ks_corpus(&solver_cfg).unwrap();
    let model_cfg = ModelConfig {
        latent_dim: 16, spatial_rank: 1, in_channels: 1, input_extent: vec![128],
        dropout_keep: 0.8, encoder_channels: vec![8, 16, 16, 16, 16],
        aux_hidden: vec![32, 64], disc_channels: vec![8, 8, 8, 8], output_sigmoid: false,
    };
    let mut train_cfg = TrainConfig::ks_default();
    train_cfg.iterations = 500;
    train_cfg.n_s = 8;
    train_cfg.learning_rate = 3e-4;
    train_cfg.seed = 7;
    train_cfg.latent_norm_bound = 1e12;
    train_cfg.weights = LossWeights { lambda_gan: 0.0, lambda_grad: 1.0, ..LossWeights::ks_paper() };
    let mut trainer = Trainer::new(&corpus, model_cfg.clone(), train_cfg).unwrap();

    for it in 0..200u64 {
        // inspect latent scale and K scale on a fixed window, in train mode
        let sample = corpus.window(100, 8);
        let tensors = prepare_sample(&sample, &corpus.metadata.shape, &trainer.normalization);
        let g = Graph::new();
        let mut rng = phase_rng(1, it + 1, Phase::GenForward);
        let mut ctx = Ctx::train(&g, &trainer.params, &[], 1.0, &mut rng);
        let mut shape = vec![1];
        shape.extend_from_slice(tensors.snapshots[0].shape());
        let x = g.constant(tensors.snapshots[0].clone().into_shape_with_order(ndarray::IxDyn(&shape)).unwrap().into_shared());
        let z = encode(&mut ctx, &model_cfg, &x);
        let zmax = z.value().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let k = aux_koopman(&mut ctx, &model_cfg, &z);
        let kmax = k.value().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let mut zc = z.clone();
        let mut norms = Vec::new();
        for _ in 0..8 {
            zc = koopman_apply(&mut ctx, &model_cfg, &zc);
            norms.push((zc.value().iter().map(|v| v * v).sum::<f64>()).sqrt());
        }
        if it % 20 == 0 || norms[7] > 1e6 {
            println!("it {it:3} |z|max {zmax:9.3} |K|max {kmax:9.4} rollout norms {:?}",
                norms.iter().map(|n| (n * 100.0).round() / 100.0).collect::<Vec<_>>());
        }
        if norms[7] > 1e9 { break; }
        match trainer.train_step(&corpus) {
            Ok(log) => { if it % 20 == 0 { println!("   recon {:.3e} pred {:.3e} code {:.3e}", log.recon, log.pred, log.code); } }
            Err(e) => { println!("training error at it {it}: {e}"); break; }
        }
    }
}
