// Temporary diagnostic (deleted before finalization).
use std::path::Path;
use vqr::config::*;
use vqr::harness::*;
use vqr::training::*;

fn cached_world() -> (vqr::synthworld::Dataset, vqr::synthworld::Dataset, vqr::vqa::VqaModel) {
    let cache = std::env::temp_dir().join("vqr-cache-v1");
    let cfg = ExperimentConfig::desk_default();
    let ds = vqr::synthworld::generate_dataset(1, &cfg.world).unwrap();
    let (train_ds, eval_ds) = split_dataset(&ds, cfg.eval_stride).unwrap();
    let vqa = vqr::vqa::load_model(&cache).unwrap();
    (train_ds, eval_ds, vqa)
}

fn eval_model(tag: &str, dir: &Path, eval_ds: &vqr::synthworld::Dataset, vqa: &vqr::vqa::VqaModel) {
    let s = rescaled_delta_unit(16);
    let out = run_delta_sweep(
        &[(tag.to_string(), dir.to_path_buf())],
        eval_ds, vqa, &[-s, 0.0, s],
        &std::env::temp_dir().join(format!("vqr-sweep-{tag}")),
    ).unwrap();
    for row in &out.rows {
        println!("  {tag} delta {:+.3} err {:.4}±{:.4} div {} bleu {:.3} n {}",
            row.delta, row.report.mean_abs_entropy_error, row.report.std_abs_entropy_error,
            row.report.diversity, row.report.bleu4, row.retained);
    }
}

#[test]
#[ignore]
fn ft_variants() {
    let (train_ds, eval_ds, vqa) = cached_world();
    let base = TrainDefaults { hidden_dim: 64, embed_dim: 32, learning_rate: 0.002, ..TrainDefaults::default() };
    let pre_dir = std::env::temp_dir().join("vqr-var-pre-h64lr2e3");
    if !pre_dir.join("manifest.json").exists() {
        let t0 = std::time::Instant::now();
        train(&train_ds, &vqa,
            &base.regime_config(Regime::Pretrain, Strategy::Sampling, 1, None), &pre_dir).unwrap();
        println!("pretrain h64 lr2e3: {:.0}s", t0.elapsed().as_secs_f64());
    }
    eval_model("pre", &pre_dir, &eval_ds, &vqa);
    struct V { tag: &'static str, tau: f64, st: bool, lambda: f64, lr: f64 }
    let vs = [
        V { tag: "ft-st-tau05", tau: 0.5, st: true, lambda: 1.0, lr: 0.002 },
        V { tag: "ft-lam03", tau: 0.5, st: false, lambda: 0.3, lr: 0.002 },
        V { tag: "ft-lr5e4", tau: 0.5, st: false, lambda: 1.0, lr: 0.0005 },
        V { tag: "ft-st-lr5e4", tau: 0.5, st: true, lambda: 1.0, lr: 0.0005 },
    ];
    for v in vs {
        let tag = v.tag;
        let t0 = std::time::Instant::now();
        let dir = std::env::temp_dir().join(format!("vqr-var-{tag}"));
        std::fs::remove_dir_all(&dir).ok();
        let mut d = base.clone();
        d.gumbel_temperature = v.tau;
        d.straight_through = v.st;
        d.entropy_weight = v.lambda;
        d.learning_rate = v.lr;
        let out = train(&train_ds, &vqa,
            &d.regime_config(Regime::Finetune, Strategy::Sampling, 1, Some(pre_dir.clone())), &dir).unwrap();
        let last = &out.loss_log[out.loss_log.len()-20..];
        let lvqg: f64 = last.iter().map(|r| r.l_vqg).sum::<f64>() / 20.0;
        let lent: f64 = last.iter().map(|r| r.l_ent).sum::<f64>() / 20.0;
        println!("{tag}: {:.0}s final l_vqg {:.4} l_ent {:.4}", t0.elapsed().as_secs_f64(), lvqg, lent);
        eval_model(tag, &dir, &eval_ds, &vqa);
    }
}
