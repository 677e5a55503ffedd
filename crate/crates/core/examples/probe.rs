use tppt_core::config::{ExperimentConfig, Mode};
use tppt_core::continual::run_stream;
use tppt_core::encoders::pretrain_dual_encoder;
use tppt_core::synthdata::generate;

fn main() {
    let cfg = ExperimentConfig::from_value(
        serde_json::json!({
            "synth": {"n_classes": 6, "train_per_class": 20, "test_per_class": 8},
            "hp": {"tasks": 3, "epochs": 2},
            "pretrain": {"steps": 200},
        }),
        &[],
    )
    .unwrap();
    let ds = generate(&cfg.synth).unwrap();
    let enc = pretrain_dual_encoder(&ds, &cfg.encoder, &cfg.pretrain, cfg.hp.tau, 0).unwrap();

    for (mu, lr) in [(0.0, 0.1), (0.5, 0.1), (0.9, 0.1), (0.0, 0.05), (0.0, 0.02)] {
        for mode in [Mode::TpptV, Mode::CeOnly] {
            let mut c = cfg.clone();
            c.mode = mode;
            c.hp.lr = lr;
            c.hp.momentum = mu;
            match run_stream(&ds, &enc, &c, 0) {
                Ok(art) => {
                    let log = &art.log;
                    let last = log.loss_curve.last().map(|s| s.total).unwrap_or(0.0);
                    println!(
                        "mu={mu} lr={lr:<5} {:>8}: A_T={:.4} avg={:.4} drift={:.4} loss_end={:.2}",
                        c.mode.as_str(), log.final_accuracy, log.avg_accuracy,
                        log.mean_drift().unwrap_or(0.0), last
                    );
                }
                Err(e) => println!("mu={mu} lr={lr} {}: ERR {e}", c.mode.as_str()),
            }
        }
    }
}
