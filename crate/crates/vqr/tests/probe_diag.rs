// Temporary diagnostic (deleted before finalization).
use vqr::synthworld::*;
use vqr::vqa::*;

#[test]
#[ignore]
fn per_template_kl() {
    let ds = generate_dataset(1, &WorldConfig::default()).unwrap();
    let (train, _eval) = vqr::harness::split_dataset(&ds, 6).unwrap();
    let mut cfg = VqaTrainConfig::default();
    cfg.seed = 1;
    let (model, stats) = train_vqa(&train, &cfg).unwrap();
    println!("final train loss {:.4}, heldout KL {:.4}", stats.final_train_loss, stats.heldout_mean_kl);
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, scene) in train.scenes.iter().enumerate() {
        if i % 8 != 7 { continue; }
        let image = scene_to_features(scene);
        for q in train.questions.iter().filter(|q| q.scene_id == scene.scene_id) {
            let (dist, _) = model.predict(&image, QuestionInput::Tokens(&q.tokens)).unwrap();
            let kl = kl_divergence(&q.label.answer_distribution, dist.probs());
            let text = &q.text;
            let key = if text.starts_with("what color is the shape at") { "color-at-pos" }
                else if text.starts_with("what color") { "color-of-shape" }
                else if text.starts_with("what size") { "size-of-shape" }
                else if text.starts_with("how many") { "count" }
                else { "existence" };
            let e = groups.entry(key.to_string()).or_insert((0.0, 0));
            e.0 += kl; e.1 += 1;
        }
    }
    for (k, (s, n)) in groups {
        println!("{k}: mean KL {:.4} over {n}", s / n as f64);
    }
}
