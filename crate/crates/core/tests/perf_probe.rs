//! Manual timing probe; run with `cargo test --test perf_probe -- --ignored --nocapture`.

use dbaf_core::model::DbafModel;
use dbaf_core::nn::Graph;
use dbaf_core::training::{Dataset, TrainConfig};
use std::time::Instant;

#[test]
#[ignore]
fn probe_forward_backward_costs() {
    let cfg = TrainConfig::default();
    let model = DbafModel::build(cfg.model_config()).unwrap();
    let ds = Dataset::synthetic(4, 64, 1).unwrap();
    let img = &ds.images[0];

    let t = Instant::now();
    let n = 10;
    for _ in 0..n {
        let mut g = Graph::new(&model.store);
        let x = g.tape.leaf(img.pixels().clone().into_dyn());
        let _ = model.backbone.encode_t(&mut g, x);
    }
    println!("encoder fwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new(&model.store);
        let x = g.tape.leaf(img.pixels().clone().into_dyn());
        let (levels, feats) = model.backbone.encode_t(&mut g, x);
        let enhanced = model.enhance_t(&mut g, feats);
        let _ = model.backbone.decode_t(&mut g, levels, enhanced);
    }
    println!("enc+maar+dec fwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new(&model.store);
        let x = g.tape.leaf(img.pixels().clone().into_dyn());
        let (levels, feats) = model.backbone.encode_t(&mut g, x);
        let enhanced = model.enhance_t(&mut g, feats);
        let out = model.backbone.decode_t(&mut g, levels, enhanced);
        let loss = g.tape.sum_squares(out);
        let _ = g.tape.backward(loss);
    }
    println!("enc+maar+dec fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // discriminator cost
    let t = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new(&model.store);
        let x = g.tape.leaf(img.pixels().clone().into_dyn());
        use dbaf_core::losses::Critic;
        let l = model.discriminator.logit(&mut g, x);
        let _ = g.tape.backward(l);
    }
    println!("disc fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // extractor cost
    let t = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new(&model.store);
        let x = g.tape.leaf(img.pixels().clone().into_dyn());
        let e = model.identity_extractor.embed_t(&mut g, x);
        let s = g.tape.sum_squares(e);
        let _ = g.tape.backward(s);
    }
    println!("extractor fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
