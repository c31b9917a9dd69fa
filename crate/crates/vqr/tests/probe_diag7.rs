// Temporary diagnostic (deleted before finalization).
use std::path::Path;
use vqr::config::*;
use vqr::harness::*;
use vqr::training::*;

fn seed2_cache() -> (vqr::synthworld::Dataset, vqr::synthworld::Dataset, vqr::vqa::VqaModel, std::path::PathBuf) {
    let root = std::env::temp_dir().join("vqr-cache-seed2");
    let cfg = ExperimentConfig::desk_default();
    let ds = vqr::synthworld::generate_dataset(2, &cfg.world).unwrap();
    let (train_ds, eval_ds) = split_dataset(&ds, cfg.eval_stride).unwrap();
    let vqa_dir = root.join("vqa");
    let vqa = if vqa_dir.join("manifest.json").exists() {
        vqr::vqa::load_model(&vqa_dir).unwrap()
    } else {
        let mut vqa_cfg = cfg.vqa.clone();
        vqa_cfg.seed = 2;
        let (m, st) = train_frozen_vqa(&train_ds, &vqa_cfg).unwrap();
        println!("vqa seed2 KL {:.4}", st.heldout_mean_kl);
        vqr::vqa::save_model(&m, &vqa_dir, None).unwrap();
        m
    };
    let pre_dir = root.join("pretrain");
    if !pre_dir.join("manifest.json").exists() {
        let d = cfg.train.clone();
        train(&train_ds, &vqa, &d.regime_config(Regime::Pretrain, Strategy::Sampling, 2, None), &pre_dir).unwrap();
        println!("pretrain seed2 done");
    }
    (train_ds, eval_ds, vqa, pre_dir)
}

fn eval_model(tag: &str, dir: &Path, eval_ds: &vqr::synthworld::Dataset, vqa: &vqr::vqa::VqaModel) {
    let s = rescaled_delta_unit(16);
    let out = run_delta_sweep(
        &[(tag.to_string(), dir.to_path_buf())],
        eval_ds, vqa, &[-s, 0.0, s],
        &std::env::temp_dir().join(format!("vqr-sweep2-{tag}")),
    ).unwrap();
    for row in &out.rows {
        println!("  {tag} delta {:+.3} err {:.4}±{:.4} div {} bleu {:.3} n {}",
            row.delta, row.report.mean_abs_entropy_error, row.report.std_abs_entropy_error,
            row.report.diversity, row.report.bleu4, row.retained);
    }
}

#[test]
#[ignore]
fn seed2_ft_variants() {
    let (train_ds, eval_ds, vqa, pre_dir) = seed2_cache();
    eval_model("pre2", &pre_dir, &eval_ds, &vqa);
    let base = ExperimentConfig::desk_default().train;
    struct V { tag: &'static str, lambda: f64, iters: u32 }
    for v in [
        V { tag: "ft2-lam3", lambda: 3.0, iters: 3000 },
        V { tag: "ft2-lam10", lambda: 10.0, iters: 3000 },
    ] {
        let dir = std::env::temp_dir().join(format!("vqr-var2-{}", v.tag));
        std::fs::remove_dir_all(&dir).ok();
        let mut d = base.clone();
        d.entropy_weight = v.lambda;
        d.max_iterations = v.iters;
        let t0 = std::time::Instant::now();
        let out = train(&train_ds, &vqa, &d.regime_config(Regime::Finetune, Strategy::Sampling, 2, Some(pre_dir.clone())), &dir).unwrap();
        let last = &out.loss_log[out.loss_log.len()-20..];
        println!("{}: {:.0}s l_vqg {:.3} l_ent {:.3}", v.tag, t0.elapsed().as_secs_f64(),
            last.iter().map(|r| r.l_vqg).sum::<f64>() / 20.0,
            last.iter().map(|r| r.l_ent).sum::<f64>() / 20.0);
        eval_model(v.tag, &dir, &eval_ds, &vqa);
    }
}
