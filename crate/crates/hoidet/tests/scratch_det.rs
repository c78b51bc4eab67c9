//! Scratch bisection for the determinism failure. Deleted before commit.

use std::path::Path;

use hoidet::config::RunConfig;
use hoidet::detector::{Model, ParamStore};
use hoidet::embed::EmbeddingTable;
use hoidet::scene::Dataset;
use hoidet::taxonomy::Taxonomy;
use hoidet::train::train;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.n_train_scenes = 4;
    cfg.n_test_scenes = 3;
    cfg.n_triplets = 2;
    cfg.sibling_rate = 1.0;
    cfg.grid_h = 4;
    cfg.grid_w = 4;
    cfg.width = 16;
    cfg.n_queries = 4;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.ffn_hidden = 32;
    cfg.d_spatial = 4;
    cfg.k1 = 2;
    cfg.k2 = 4;
    cfg.m1 = 2;
    cfg.m2 = 2;
    cfg.epochs = 2;
    cfg.decay_epoch = 1;
    cfg.batch_size = 2;
    cfg.learning_rate = 0.01;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    cfg.eval_top_k = 8;
    cfg
}

fn first_param_diff(a: &ParamStore, b: &ParamStore) -> Option<String> {
    for ((name, ta), (_, tb)) in a.iter().zip(b.iter()) {
        if ta.data() != tb.data() {
            for (j, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
                if x != y {
                    return Some(format!("{name}[{j}]: {x} vs {y}"));
                }
            }
        }
    }
    None
}

#[test]
fn bisect() {
    let cfg = tiny();
    let tax = Taxonomy::default_desk();
    let table = EmbeddingTable::pseudo(&tax, &cfg.embed_config()).unwrap();

    let m1 = Model::new(&cfg.model_config(), &tax, &table, 4, cfg.seed).unwrap();
    let m2 = Model::new(&cfg.model_config(), &tax, &table, 4, cfg.seed).unwrap();
    println!("init diff: {:?}", first_param_diff(&m1.params, &m2.params));

    let d1 = Dataset::generate(&tax, &table, &cfg.gen_config(), &cfg.embed_config(), 4, 0).unwrap();
    let d2 = Dataset::generate(&tax, &table, &cfg.gen_config(), &cfg.embed_config(), 4, 0).unwrap();
    let grids_match = d1
        .scenes
        .iter()
        .zip(&d2.scenes)
        .all(|(a, b)| a.feature_grid.data() == b.feature_grid.data());
    println!("dataset grids match: {grids_match}");

    let mut z = cfg.clone();
    z.epochs = 0;
    let t1 = tempfile::tempdir().unwrap();
    let t2 = tempfile::tempdir().unwrap();
    train(&z, t1.path()).unwrap();
    train(&z, t2.path()).unwrap();
    let p1 = ParamStore::load(&t1.path().join("checkpoint.bin")).unwrap().0;
    let p2 = ParamStore::load(&t2.path().join("checkpoint.bin")).unwrap().0;
    println!("epochs=0 ckpt diff: {:?}", first_param_diff(&p1, &p2));
    let b1 = std::fs::read(t1.path().join("checkpoint.bin")).unwrap();
    let b2 = std::fs::read(t2.path().join("checkpoint.bin")).unwrap();
    println!("epochs=0 ckpt bytes equal: {}", b1 == b2);

    let mut one = cfg.clone();
    one.epochs = 1;
    let t3 = tempfile::tempdir().unwrap();
    let t4 = tempfile::tempdir().unwrap();
    train(&one, t3.path()).unwrap();
    train(&one, t4.path()).unwrap();
    let p3 = ParamStore::load(&t3.path().join("checkpoint.bin")).unwrap().0;
    let p4 = ParamStore::load(&t4.path().join("checkpoint.bin")).unwrap().0;
    println!("epochs=1 ckpt diff: {:?}", first_param_diff(&p3, &p4));

    let _ = Path::new("x");
    panic!("see stdout");
}
