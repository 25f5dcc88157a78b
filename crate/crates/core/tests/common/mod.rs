#![allow(dead_code)]

use mmrec_core::autodiff::Matrix;
use mmrec_core::config::RunConfig;
use mmrec_core::data::{Dataset, InteractionSet, ModalityFeatures, TripleBatch};
use mmrec_core::model::ModelParams;
use mmrec_core::seeds::{rng_for, Stream};
use rand::Rng;
use rand_distr::StandardNormal;

/// 4 users, 6 items, two modalities of widths 3 and 2.
pub fn toy_dataset() -> Dataset {
    let train = vec![vec![0, 1, 2], vec![1, 3, 4], vec![0, 4, 5], vec![2, 3, 5]];
    let set = InteractionSet {
        user_ids: (0..4).map(|u| format!("u{u}")).collect(),
        item_ids: (0..6).map(|i| format!("i{i}")).collect(),
        train,
        val: vec![vec![3], vec![0], vec![1], vec![4]],
        test: vec![vec![4], vec![2], vec![3], vec![0]],
    };
    let visual = Matrix::from_rows(&[
        [1.0, 0.2, 0.0],
        [0.9, 0.1, 0.3],
        [0.0, 1.0, 0.5],
        [0.2, 0.8, 0.1],
        [0.5, 0.5, 0.5],
        [0.1, 0.3, 0.9],
    ]);
    let text = Matrix::from_rows(&[
        [0.3, 1.0],
        [1.0, 0.1],
        [0.7, 0.7],
        [0.1, 0.9],
        [-0.4, 0.6],
        [0.8, -0.2],
    ]);
    Dataset::new(
        set,
        ModalityFeatures::new(vec![("visual".into(), visual), ("text".into(), text)]).unwrap(),
    )
    .unwrap()
}

pub fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "embedding_dim=4",
        "knn_topk=2",
        "batch_size=8",
        "lambda_reg=0.01",
        "learning_rate=0.001",
        "max_epochs=3",
    ])
    .unwrap();
    c
}

/// Initial parameters blown up so every loss term has gradients well above round-off.
pub fn scaled_params(dataset: &Dataset, config: &RunConfig, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::for_dataset(
        dataset,
        config.embedding_dim,
        &mut rng_for(seed, Stream::Init),
    );
    for t in p.tensors_mut() {
        t.value = t.value.scale(scale);
    }
    p
}

pub fn toy_batch() -> TripleBatch {
    TripleBatch {
        users: vec![0, 1, 2, 3, 0, 2],
        positives: vec![1, 3, 5, 2, 0, 4],
        negatives: vec![3, 0, 1, 4, 5, 2],
    }
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}
