//! After pretraining on the default dataset, the contribution scores find
//! the generator's salient region.

use vpl_core::perturb::salient_set;
use vpl_core::synth::{generate, SynthConfig};
use vpl_core::train::{predict, region_scores, train, TrainConfig};

#[test]
fn salient_region_lands_in_the_top_set() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig { t0: 12, t1: 12, t2: 12, ..TrainConfig::default() };
    let model = train(&cfg, &ds).unwrap().model;
    let records = &ds.train[..2000];
    let preds = predict(&model, records).unwrap();
    let (mut hits, mut correct) = (0, 0);
    for (c, chunk) in records.chunks(cfg.batch_size).enumerate() {
        let views: Vec<_> = chunk.iter().map(|r| r.training_view()).collect();
        for (j, s) in region_scores(&model, &views, cfg.score_target, cfg.score_reduction).unwrap().iter().enumerate() {
            let r = &chunk[j];
            if !r.ground_truth().contains(&preds[c * cfg.batch_size + j].answer) {
                continue;
            }
            correct += 1;
            if salient_set(&s.score, cfg.tau).unwrap().contains(&(r.salient_region as usize)) {
                hits += 1;
            }
        }
    }
    let rate = hits as f64 / correct as f64;
    println!("salient hit rate {rate:.3} over {correct} correctly classified instances");
    assert!(correct > 1000 && rate >= 0.70, "hit rate {rate:.3} over {correct}");
}
