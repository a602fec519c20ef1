// scratch probe: smoke-training calibration for the tiny KS configuration
use dakm_core::evaluation::{mean_l1, predict_sequence, TrainedModel};
use dakm_core::koopman::LossWeights;
use dakm_core::networks::ModelConfig;
use dakm_core::solvers::{generate_ks_corpus, KSConfig};
use dakm_core::training::{TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let solver_cfg = KSConfig {
        domain_length: 64.0,
        dx: 0.5,
        n_steps: 2048,
        save_every: 4,
        ..KSConfig::default()
    };
    let corpus = generate_ks_corpus(&solver_cfg).unwrap();
    println!("corpus: {} snapshots of {:?}", corpus.len(), corpus.metadata.shape);

    for (lr, keep) in [(3e-4, 0.8), (5e-4, 0.8), (1e-3, 0.8)] {
        let model_cfg = ModelConfig {
            latent_dim: 16,
            spatial_rank: 1,
            in_channels: 1,
            input_extent: vec![128],
            dropout_keep: keep,
            encoder_channels: vec![8, 16, 16, 16, 16],
            aux_hidden: vec![32, 64],
            disc_channels: vec![8, 8, 8, 8],
            output_sigmoid: false,
        };
        let mut train_cfg = TrainConfig::ks_default();
        train_cfg.iterations = 500;
        train_cfg.n_s = 8;
        train_cfg.learning_rate = lr;
        train_cfg.seed = 7;
        train_cfg.latent_norm_bound = 1e12;
        train_cfg.weights = LossWeights {
            lambda_gan: 0.0,
            lambda_grad: 1.0,
            ..LossWeights::ks_paper()
        };
        let t0 = Instant::now();
        let mut trainer = Trainer::new(&corpus, model_cfg, train_cfg).unwrap();
        let mut first_recon = None;
        let mut last_recon = 0.0;
        trainer
            .train(&corpus, 500, |_, log| {
                if log.iteration == 1 {
                    first_recon = Some(log.recon);
                }
                last_recon = log.recon;
                if log.iteration % 100 == 0 {
                    println!("  it {:4} recon {:.4e} pred {:.4e} code {:.4e}", log.iteration, log.recon, log.pred, log.code);
                }
                Ok(())
            })
            .unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let model = TrainedModel::from_checkpoint(&trainer.checkpoint());
        // held-out windows: 8-step rollouts vs persistence
        let mut model_l1 = 0.0;
        let mut persist_l1 = 0.0;
        let starts: Vec<usize> = (20..500).step_by(37).collect();
        for &s in &starts {
            let x0 = corpus.snapshot(s).values;
            let preds = predict_sequence(&model, &x0, 8).unwrap();
            for m in 1..=8 {
                let truth = corpus.snapshot(s + m).values;
                model_l1 += mean_l1(&preds[m - 1], &truth, None);
                persist_l1 += mean_l1(&x0, &truth, None);
            }
        }
        let n = (starts.len() * 8) as f64;
        println!(
            "lr={lr} keep={keep}: recon {:.4e} -> {:.4e} (ratio {:.3}), rollout L1 {:.4} vs persistence {:.4}, {secs:.1}s",
            first_recon.unwrap(), last_recon, last_recon / first_recon.unwrap(),
            model_l1 / n, persist_l1 / n
        );
    }
}
