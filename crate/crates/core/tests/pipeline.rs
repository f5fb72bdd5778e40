//! Synthetic data through split, training, evaluation, persistence and
//! explanation, on a narrow network so it runs in seconds.

use plasmo_core::data::{self, InMemoryDataset, Label, Split, DEFAULT_FRACTIONS};
use plasmo_core::metrics::{classification_report, confusion_matrix};
use plasmo_core::train::{self, TrainConfig};
use plasmo_core::weights::{load_weights, save_weights};
use plasmo_core::xai::{self, Baseline, Classifier, Segmentation, ShapConfig};
use plasmo_core::{ArchitectureConfig, ModelGraph};

fn narrow() -> ArchitectureConfig {
    ArchitectureConfig {
        block_filters: vec![4, 8],
        dense_units: vec![8],
        bn_momentum: 0.9,
        ..Default::default()
    }
}

#[test]
fn synthetic_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("cells");
    let raw = data::generate_synthetic(20, 3, &root).unwrap();
    let index = data::stratified_split(&raw, DEFAULT_FRACTIONS, 3).unwrap();
    assert_eq!(index.len(), 40);
    let data = InMemoryDataset::load(&index).unwrap();

    let config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    };
    let model = ModelGraph::new(narrow(), 3).unwrap();
    let (model, history) = train::train(model, &data, &config).unwrap();
    assert!(!history.records.is_empty() && history.records.len() <= 3);
    assert!(history.records.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));

    let eval = train::evaluate(&model, &data, Split::Test, 8, train::DEFAULT_CLAMP).unwrap();
    assert_eq!(eval.y_true.len(), index.count(Split::Test, None));
    let report = classification_report(&confusion_matrix(&eval.y_true, &eval.y_pred).unwrap()).unwrap();
    assert!((report.accuracy - eval.accuracy).abs() < 1e-12);

    // a reloaded model predicts identically at f32 precision
    let path = dir.path().join("w.mcnn");
    save_weights(&model, &path).unwrap();
    let mut reloaded = ModelGraph::new(narrow(), 99).unwrap();
    load_weights(&mut reloaded, &path).unwrap();
    let image = data::load_and_preprocess(&index.entries[0].path).unwrap();
    let batch = image.clone().reshape(&[1, 100, 100, 3]).unwrap();
    let (a, b) = (model.class_probs(&batch).unwrap(), reloaded.class_probs(&batch).unwrap());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }

    // SHAP on a 2x2 grid is exact and efficient against the model itself
    let segments = xai::segment_image(&image, &Segmentation::Grid { cells: 2 }).unwrap();
    let class = Label::Parasitized.index();
    let mut setfn = xai::make_set_function(&reloaded, &image, &segments, class, Baseline::MeanColor).unwrap();
    let shap = xai::kernel_shap(&mut setfn, &ShapConfig::default()).unwrap();
    assert!(shap.enumerated);
    assert!((shap.phi0 + shap.values.iter().sum::<f64>() - shap.full).abs() < 1e-9);
    assert!((shap.full - b.data()[class]).abs() < 1e-9);

    let heat = xai::saliency_map(&reloaded, &image, class).unwrap();
    assert_eq!(heat.shape(), &[100, 100]);
    assert!(heat.data().iter().all(|v| v.is_finite() && *v >= 0.0));
}
