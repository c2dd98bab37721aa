//! Fine-tuning benchmark on a labeled land-cover dataset (EuroSAT layout).

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor, D};
use candle_nn::{loss::cross_entropy, AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{BackboneSpec, VisionModel};
use crate::error::{Error, Result};
use crate::{seed, PATCH_SIZE};

pub const TRAIN_FRACTION: f64 = 0.7;
/// Accuracy gap under which backbones count as tied during selection.
pub const SELECTION_TOLERANCE: f64 = 0.005;

/// Labeled 64x64 RGB images.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    images: Vec<Vec<u8>>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl ImageDataset {
    pub fn new(images: Vec<Vec<u8>>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let want = PATCH_SIZE * PATCH_SIZE * 3;
        if let Some(bad) = images.iter().position(|im| im.len() != want) {
            return Err(Error::Shape(format!("image {bad} has {} bytes, expected {want}", images[bad].len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Validation(format!("label {l} outside {} classes", class_names.len())));
        }
        Ok(Self { images, labels, class_names })
    }

    /// Reads a directory-per-class layout. Classes are the sorted
    /// subdirectory names; images are converted to RGB and resized to 64x64.
    pub fn load_dir(root: &Path) -> Result<Self> {
        let mut classes: Vec<_> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        classes.sort();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (label, class) in classes.iter().enumerate() {
            let dir = root.join(class);
            let mut files: Vec<_> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| ["jpg", "jpeg", "png", "tif", "tiff"].contains(&x.to_ascii_lowercase().as_str()))
                })
                .collect();
            files.sort();
            for path in files {
                let img = image::open(&path)?.to_rgb8();
                let img = if img.dimensions() == (PATCH_SIZE as u32, PATCH_SIZE as u32) {
                    img
                } else {
                    image::imageops::resize(
                        &img,
                        PATCH_SIZE as u32,
                        PATCH_SIZE as u32,
                        image::imageops::FilterType::Triangle,
                    )
                };
                images.push(img.into_raw());
                labels.push(label);
            }
        }
        Self::new(images, labels, classes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i]
    }
}

/// Stratified 70/30 split. Each class is shuffled with its own seed stream,
/// so membership depends only on `(labels, seed)`.
pub fn stratified_split(labels: &[usize], classes: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::Stratification {
                class: class.to_string(),
                count: members.len(),
            });
        }
        members.shuffle(&mut seed::rng(seed::derive_index(seed, "split", class)));
        let n = members.len();
        let n_train = ((TRAIN_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    /// Epoch budget; 0 evaluates the initial weights.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub optimizer: String,
    pub loss: String,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_decay: 0.9,
            weight_decay: 1e-4,
            optimizer: "adamw".into(),
            loss: "cross_entropy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneResult {
    pub name: String,
    pub param_count: usize,
    pub model_seed: u64,
    pub epochs_run: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]` on the held-out split.
    pub confusion: Vec<Vec<usize>>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub split_seed: u64,
    pub train_fraction: f64,
    pub averaging: String,
    pub budget: usize,
    pub recipe: TrainRecipe,
    pub class_names: Vec<String>,
    pub train_indices: Vec<usize>,
    pub test_count: usize,
    pub results: Vec<BackboneResult>,
}

impl BenchmarkReport {
    pub fn get(&self, name: &str) -> Option<&BackboneResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

/// Benchmarks `specs` with the default recipe and an epoch budget.
pub fn benchmark_backbones(
    dataset: &ImageDataset,
    specs: &[BackboneSpec],
    budget: usize,
    seed: u64,
) -> Result<BenchmarkReport> {
    let recipe = TrainRecipe {
        epochs: budget,
        ..TrainRecipe::default()
    };
    benchmark_with_recipe(dataset, specs, &recipe, seed)
}

pub fn benchmark_with_recipe(
    dataset: &ImageDataset,
    specs: &[BackboneSpec],
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<BenchmarkReport> {
    if specs.is_empty() {
        return Err(Error::Validation("no backbones to benchmark".into()));
    }
    if recipe.batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    for spec in specs {
        BackboneSpec::lookup(&spec.name)?;
    }
    let classes = dataset.class_names.len();
    let (train, test) = stratified_split(&dataset.labels, classes, seed)?;
    let results = specs
        .iter()
        .map(|spec| run_one(dataset, spec, recipe, &train, &test, seed::derive(seed, &spec.name)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkReport {
        split_seed: seed,
        train_fraction: TRAIN_FRACTION,
        averaging: "macro".into(),
        budget: recipe.epochs,
        recipe: recipe.clone(),
        class_names: dataset.class_names.clone(),
        train_indices: train,
        test_count: test.len(),
        results,
    })
}

fn run_one(
    dataset: &ImageDataset,
    spec: &BackboneSpec,
    recipe: &TrainRecipe,
    train: &[usize],
    test: &[usize],
    model_seed: u64,
) -> Result<BackboneResult> {
    let classes = dataset.class_names.len();
    let mut model = VisionModel::with_classes(spec.clone(), classes)?;
    match &spec.weights_ref {
        Some(path) => model.load_weights(path)?,
        None => model.init_random(model_seed)?,
    }
    tracing::info!(backbone = %spec.name, train = train.len(), test = test.len(), "benchmark");

    let mut loss_history = Vec::with_capacity(recipe.epochs);
    if recipe.epochs > 0 {
        let params = ParamsAdamW {
            lr: recipe.learning_rate,
            weight_decay: recipe.weight_decay,
            ..Default::default()
        };
        let mut opt = AdamW::new(model.trainable_vars(), params)?;
        let mut order = train.to_vec();
        for epoch in 0..recipe.epochs {
            opt.set_learning_rate(recipe.learning_rate * recipe.lr_decay.powi(epoch as i32));
            order.shuffle(&mut seed::rng(seed::derive_index(model_seed, "epoch", epoch)));
            let mut total = 0.0;
            for batch in order.chunks(recipe.batch_size) {
                let images: Vec<&[u8]> = batch.iter().map(|&i| dataset.image(i)).collect();
                let targets: Vec<u32> = batch.iter().map(|&i| dataset.labels[i] as u32).collect();
                let targets = Tensor::from_vec(targets, batch.len(), &Device::Cpu)?;
                let loss = cross_entropy(&model.logits(&images, true)?, &targets)?;
                opt.backward_step(&loss)?;
                total += f64::from(loss.to_scalar::<f32>()?) * batch.len() as f64;
            }
            loss_history.push(total / order.len() as f64);
        }
    }

    let mut confusion = vec![vec![0usize; classes]; classes];
    for batch in test.chunks(recipe.batch_size.max(1)) {
        let images: Vec<&[u8]> = batch.iter().map(|&i| dataset.image(i)).collect();
        let pred = model.logits(&images, false)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
        for (&i, p) in batch.iter().zip(pred) {
            confusion[dataset.labels[i]][p as usize] += 1;
        }
    }
    let (accuracy, per_class) = metrics_from_confusion(&confusion, &dataset.class_names);
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
    Ok(BackboneResult {
        name: spec.name.clone(),
        param_count: model.trainable_params(),
        model_seed,
        epochs_run: recipe.epochs,
        accuracy,
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        per_class,
        confusion,
        loss_history,
    })
}

/// Accuracy and per-class precision/recall/F1. Undefined ratios (no
/// predictions, no support) count as 0.
pub fn metrics_from_confusion(confusion: &[Vec<usize>], class_names: &[String]) -> (f64, Vec<ClassMetrics>) {
    let n = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..n).map(|c| confusion[c][c]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class = (0..n)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class: class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                support,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    (ratio(correct, total), per_class)
}

/// Best accuracy wins; results within [`SELECTION_TOLERANCE`] of it are
/// ranked by macro F1, then by fewer parameters.
pub fn select_backbone(report: &BenchmarkReport) -> Option<&BackboneResult> {
    let best = report.results.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
    report
        .results
        .iter()
        .filter(|r| r.accuracy >= best - SELECTION_TOLERANCE)
        .min_by(|a, b| b.f1.total_cmp(&a.f1).then(a.param_count.cmp(&b.param_count)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ten classes, each a distinct constant colour.
    fn constant_colors(per_class: usize) -> ImageDataset {
        let colors: [[u8; 3]; 10] = [
            [250, 10, 10],
            [10, 250, 10],
            [10, 10, 250],
            [250, 250, 10],
            [250, 10, 250],
            [10, 250, 250],
            [250, 250, 250],
            [10, 10, 10],
            [128, 64, 200],
            [70, 160, 90],
        ];
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (c, rgb) in colors.iter().enumerate() {
            for _ in 0..per_class {
                images.push(rgb.repeat(PATCH_SIZE * PATCH_SIZE));
                labels.push(c);
            }
        }
        ImageDataset::new(images, labels, (0..10).map(|c| format!("class_{c}")).collect()).unwrap()
    }

    #[test]
    fn split_is_stratified_and_reproducible() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let (train, test) = stratified_split(&labels, 4, 9).unwrap();
        assert_eq!(train.len() + test.len(), 100);
        for c in 0..4 {
            assert_eq!(train.iter().filter(|&&i| labels[i] == c).count(), 18); // round(0.7 * 25)
        }
        assert_eq!(stratified_split(&labels, 4, 9).unwrap().0, train);
        assert_ne!(stratified_split(&labels, 4, 10).unwrap().0, train);
    }

    #[test]
    fn tiny_class_fails_stratification() {
        let labels = vec![0, 0, 0, 1];
        assert!(matches!(stratified_split(&labels, 2, 1), Err(Error::Stratification { count: 1, .. })));
    }

    #[test]
    fn metrics_hand_table() {
        // rows true, cols predicted
        let m = vec![vec![3, 1, 0], vec![0, 2, 2], vec![0, 0, 0]];
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let (acc, per) = metrics_from_confusion(&m, &names);
        assert_eq!(acc, 5.0 / 8.0);
        assert_eq!((per[0].precision, per[0].recall), (1.0, 0.75));
        assert_eq!((per[1].precision, per[1].recall), (2.0 / 3.0, 0.5));
        assert_eq!((per[2].precision, per[2].recall, per[2].f1), (0.0, 0.0, 0.0));
        assert!((per[0].f1 - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_reports_untrained_metrics() {
        let data = constant_colors(3);
        let spec = BackboneSpec::lookup("toy").unwrap();
        let report = benchmark_backbones(&data, &[spec], 0, 4).unwrap();
        let r = &report.results[0];
        assert!(r.loss_history.is_empty() && r.epochs_run == 0);
        for v in [r.accuracy, r.precision, r.recall, r.f1] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(report.train_fraction, 0.7);
    }

    #[test]
    fn constant_colours_are_learned_perfectly() {
        let data = constant_colors(6);
        let recipe = TrainRecipe {
            epochs: 60,
            batch_size: 16,
            learning_rate: 0.05,
            lr_decay: 0.98,
            ..TrainRecipe::default()
        };
        let report = benchmark_with_recipe(&data, &[BackboneSpec::lookup("toy").unwrap()], &recipe, 1).unwrap();
        let r = &report.results[0];
        assert_eq!(r.accuracy, 1.0, "{:?}", r.confusion);
        assert!(r.f1 <= r.precision.max(r.recall) + 1e-9);
    }

    #[test]
    fn unknown_backbone_is_rejected() {
        let data = constant_colors(2);
        let mut spec = BackboneSpec::lookup("toy").unwrap();
        spec.name = "lenet".into();
        assert!(matches!(benchmark_backbones(&data, &[spec], 0, 1), Err(Error::UnknownBackbone(_))));
    }

    #[test]
    fn selection_prefers_f1_then_size_within_tolerance() {
        let result = |name: &str, accuracy, f1, param_count| BackboneResult {
            name: name.into(),
            param_count,
            model_seed: 0,
            epochs_run: 0,
            accuracy,
            precision: f1,
            recall: f1,
            f1,
            per_class: vec![],
            confusion: vec![],
            loss_history: vec![],
        };
        let mut report = BenchmarkReport {
            split_seed: 0,
            train_fraction: TRAIN_FRACTION,
            averaging: "macro".into(),
            budget: 0,
            recipe: TrainRecipe::default(),
            class_names: vec![],
            train_indices: vec![],
            test_count: 0,
            results: vec![
                result("efficientnet_b0", 0.88, 0.87, 4_000_000),
                result("resnet50", 0.83, 0.82, 23_000_000),
                result("vit_b_16", 0.88, 0.87, 85_000_000),
            ],
        };
        assert_eq!(select_backbone(&report).unwrap().name, "efficientnet_b0");
        report.results[2].accuracy = 0.90;
        assert_eq!(select_backbone(&report).unwrap().name, "vit_b_16");
    }
}
