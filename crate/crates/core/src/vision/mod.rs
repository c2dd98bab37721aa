//! Vision backbones: registry, penultimate-layer embeddings, parameter
//! counting, and the land-cover benchmark used to pick a backbone.

mod arch;
mod benchmark;
pub mod params;
mod toy;

pub use arch::{EfficientNetB0, FeatureNet, ResNet50, VitB16};
pub use benchmark::{
    benchmark_backbones, benchmark_with_recipe, metrics_from_confusion, select_backbone, stratified_split,
    BackboneResult, BenchmarkReport, ClassMetrics, ImageDataset, TrainRecipe, SELECTION_TOLERANCE, TRAIN_FRACTION,
};
pub use toy::{pixel_stats, ToyBackbone};

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImagePatch;
use crate::{seed, PATCH_SIZE};

/// Land-cover classes in the benchmark dataset.
pub const NUM_CLASSES: usize = 10;
pub const TOY_EMBEDDING_DIM: usize = 64;
const TOY_PROJECTION_SEED: u64 = 0x5EED_70E5;

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    EfficientNetB0,
    ResNet50,
    VitB16,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub architecture: Architecture,
    /// Width of the pooled features right before the classification head.
    pub embedding_dim: usize,
    /// Trainable parameters with a `NUM_CLASSES`-way head.
    pub param_count: usize,
    /// Side length the 64x64 patches are resized to before the forward pass.
    pub input_size: usize,
    /// safetensors checkpoint to start from, if any.
    pub weights_ref: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn registry() -> Vec<BackboneSpec> {
        let entry = |name: &str, architecture, embedding_dim, param_count, input_size| BackboneSpec {
            name: name.to_string(),
            architecture,
            embedding_dim,
            param_count,
            input_size,
            weights_ref: None,
        };
        vec![
            entry(
                "efficientnet_b0",
                Architecture::EfficientNetB0,
                EfficientNetB0::FEATURE_DIM,
                params::efficientnet_b0(NUM_CLASSES),
                PATCH_SIZE,
            ),
            entry("resnet50", Architecture::ResNet50, ResNet50::FEATURE_DIM, params::resnet50(NUM_CLASSES), PATCH_SIZE),
            entry("vit_b_16", Architecture::VitB16, VitB16::FEATURE_DIM, params::vit_b16(NUM_CLASSES, 224), 224),
            entry(
                "toy",
                Architecture::Toy,
                TOY_EMBEDDING_DIM,
                TOY_EMBEDDING_DIM * NUM_CLASSES + NUM_CLASSES,
                PATCH_SIZE,
            ),
        ]
    }

    pub fn lookup(name: &str) -> Result<BackboneSpec> {
        Self::registry()
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownBackbone(name.to_string()))
    }

    pub fn with_weights(mut self, path: impl Into<PathBuf>) -> Self {
        self.weights_ref = Some(path.into());
        self
    }

    fn head_prefix(&self) -> &'static str {
        match self.architecture {
            Architecture::EfficientNetB0 => "classifier.1",
            Architecture::ResNet50 => "fc",
            Architecture::VitB16 => "heads.head",
            Architecture::Toy => "head",
        }
    }
}

/// Penultimate-layer summary of one coverage-area patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub cell_id: String,
    pub backbone_name: String,
}

enum Body {
    Toy(ToyBackbone),
    Net(Box<dyn FeatureNet>),
}

/// A backbone plus classification head.
pub struct VisionModel {
    spec: BackboneSpec,
    varmap: VarMap,
    body: Body,
    head: Linear,
    ready: bool,
}

impl std::fmt::Debug for VisionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VisionModel")
            .field("spec", &self.spec)
            .field("ready", &self.ready)
            .finish()
    }
}

fn build(spec: &BackboneSpec, classes: usize) -> Result<(VarMap, Body, Linear)> {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let body = match spec.architecture {
        Architecture::EfficientNetB0 => Body::Net(Box::new(EfficientNetB0::new(vb.clone())?)),
        Architecture::ResNet50 => Body::Net(Box::new(ResNet50::new(vb.clone())?)),
        Architecture::VitB16 => Body::Net(Box::new(VitB16::new(vb.clone(), spec.input_size)?)),
        Architecture::Toy => Body::Toy(ToyBackbone::new(spec.embedding_dim, TOY_PROJECTION_SEED)),
    };
    let head = linear(spec.embedding_dim, classes, vb.pp(spec.head_prefix()))?;
    Ok((varmap, body, head))
}

fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

fn count_trainable(varmap: &VarMap) -> usize {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    data.iter()
        .filter(|(name, _)| !is_buffer(name))
        .map(|(_, v)| v.elem_count())
        .sum()
}

/// Trainable parameters of the instantiated architecture with a
/// `NUM_CLASSES`-way head.
pub fn param_count(spec: &BackboneSpec) -> Result<usize> {
    param_count_with_head(spec, NUM_CLASSES)
}

pub fn param_count_with_head(spec: &BackboneSpec, classes: usize) -> Result<usize> {
    let (varmap, _, _) = build(spec, classes)?;
    Ok(count_trainable(&varmap))
}

impl VisionModel {
    /// Builds the architecture. Real backbones start uninitialized; call
    /// [`VisionModel::init_random`] or [`VisionModel::load_weights`] first.
    pub fn new(spec: BackboneSpec) -> Result<Self> {
        Self::with_classes(spec, NUM_CLASSES)
    }

    pub fn with_classes(spec: BackboneSpec, classes: usize) -> Result<Self> {
        let (varmap, body, head) = build(&spec, classes)?;
        let ready = matches!(body, Body::Toy(_));
        let model = Self { spec, varmap, body, head, ready };
        if model.ready {
            model.reset_parameters(0)?;
        }
        Ok(model)
    }

    /// Builds the backbone and loads `spec.weights_ref` when present.
    pub fn from_spec(spec: BackboneSpec) -> Result<Self> {
        let weights = spec.weights_ref.clone();
        let mut model = Self::new(spec)?;
        if let Some(path) = weights {
            model.load_weights(&path)?;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub fn trainable_params(&self) -> usize {
        count_trainable(&self.varmap)
    }

    /// Deterministic initialization from `seed`: He-normal weights, unit
    /// norm scales, zero biases.
    pub fn init_random(&mut self, seed: u64) -> Result<()> {
        self.reset_parameters(seed)?;
        self.ready = true;
        Ok(())
    }

    fn reset_parameters(&self, seed: u64) -> Result<()> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        let head = self.spec.head_prefix();
        for name in names {
            let var = &data[name];
            let shape = var.shape().clone();
            let dims = shape.dims();
            let n = shape.elem_count();
            let constant = |v: f32| vec![v; n];
            let normal = |std: f64| -> Vec<f32> {
                let mut rng = seed::rng(seed::derive(seed, name));
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            };
            let values = if name.ends_with("running_mean") || name.ends_with("bias") {
                constant(0.0)
            } else if name.ends_with("running_var") || dims.len() == 1 {
                constant(1.0)
            } else if name.ends_with("class_token") || name.ends_with("pos_embedding") {
                normal(0.02)
            } else if name.starts_with(head) {
                normal(0.01)
            } else {
                normal((2.0 / (n / dims[0]) as f64).sqrt())
            };
            var.set(&Tensor::from_vec(values, shape, &Device::Cpu)?)?;
        }
        Ok(())
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::NotInitialized(format!("{} (missing {})", self.spec.name, path.display())));
        }
        self.varmap.load(path)?;
        self.ready = true;
        Ok(())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.varmap.save(path)?;
        Ok(())
    }

    pub(crate) fn trainable_vars(&self) -> Vec<candle_core::Var> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut named: Vec<_> = data.iter().filter(|(n, _)| !is_buffer(n)).collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    /// `(N, embedding_dim)` pooled features for a batch of 64x64 RGB images.
    pub(crate) fn features(&self, images: &[&[u8]], train: bool) -> Result<Tensor> {
        if !self.ready {
            return Err(Error::NotInitialized(self.spec.name.clone()));
        }
        match &self.body {
            Body::Toy(toy) => {
                let flat: Vec<f32> = images.iter().flat_map(|px| toy.embed(px)).map(|v| v as f32).collect();
                Ok(Tensor::from_vec(flat, (images.len(), toy.dim()), &Device::Cpu)?)
            }
            Body::Net(net) => {
                let x = images_to_tensor(images, self.spec.input_size)?;
                Ok(net.features(&x, train)?)
            }
        }
    }

    pub(crate) fn logits(&self, images: &[&[u8]], train: bool) -> Result<Tensor> {
        Ok(self.head.forward(&self.features(images, train)?)?)
    }

    /// Penultimate-layer embedding of one patch.
    pub fn embed(&self, patch: &ImagePatch) -> Result<Embedding> {
        let mut out = self.embed_batch(std::slice::from_ref(patch))?;
        Ok(out.remove(0))
    }

    pub fn embed_batch(&self, patches: &[ImagePatch]) -> Result<Vec<Embedding>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let images: Vec<&[u8]> = patches.iter().map(|p| p.pixels()).collect();
        let rows = match &self.body {
            // skip the tensor round trip for the toy body; keeps full f64 precision
            Body::Toy(toy) if self.ready => images.iter().map(|px| toy.embed(px)).collect(),
            _ => self
                .features(&images, false)?
                .to_vec2::<f32>()?
                .into_iter()
                .map(|r| r.into_iter().map(f64::from).collect())
                .collect::<Vec<Vec<f64>>>(),
        };
        Ok(rows
            .into_iter()
            .zip(patches)
            .map(|(vector, p)| Embedding {
                vector,
                cell_id: p.source_cell_id.clone(),
                backbone_name: self.spec.name.clone(),
            })
            .collect())
    }
}

/// Normalizes 64x64 HWC bytes with ImageNet statistics into an NCHW tensor,
/// upsampling (nearest) when the backbone expects a larger input.
fn images_to_tensor(images: &[&[u8]], input_size: usize) -> Result<Tensor> {
    let n = PATCH_SIZE * PATCH_SIZE;
    let mut data = vec![0f32; images.len() * 3 * n];
    for (i, px) in images.iter().enumerate() {
        if px.len() != n * 3 {
            return Err(Error::Shape(format!("image has {} bytes, expected {}", px.len(), n * 3)));
        }
        for (p, rgb) in px.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[(i * 3 + ch) * n + p] = (f32::from(rgb[ch]) / 255.0 - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch];
            }
        }
    }
    let x = Tensor::from_vec(data, (images.len(), 3, PATCH_SIZE, PATCH_SIZE), &Device::Cpu)?;
    Ok(if input_size != PATCH_SIZE {
        x.upsample_nearest2d(input_size, input_size)?
    } else {
        x
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    fn patch(cell: &str, fill: impl Fn(usize) -> u8) -> ImagePatch {
        let bbox = BoundingBox {
            lat_min: 0.0,
            lat_max: 1.0,
            lon_min: 0.0,
            lon_max: 1.0,
        };
        ImagePatch::new((0..PATCH_SIZE * PATCH_SIZE * 3).map(fill).collect(), cell, bbox).unwrap()
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(BackboneSpec::lookup("efficientnet_b0").unwrap().embedding_dim, 1280);
        assert_eq!(BackboneSpec::lookup("resnet50").unwrap().embedding_dim, 2048);
        assert_eq!(BackboneSpec::lookup("vit_b_16").unwrap().embedding_dim, 768);
        assert!(matches!(BackboneSpec::lookup("alexnet"), Err(Error::UnknownBackbone(_))));
    }

    #[test]
    fn uninitialized_backbone_refuses_to_embed() {
        let model = VisionModel::new(BackboneSpec::lookup("efficientnet_b0").unwrap()).unwrap();
        let err = model.embed(&patch("a", |i| i as u8)).unwrap_err();
        assert!(matches!(err, Error::NotInitialized(_)));
        let mut m = VisionModel::new(BackboneSpec::lookup("efficientnet_b0").unwrap()).unwrap();
        assert!(matches!(m.load_weights(Path::new("/nonexistent.safetensors")), Err(Error::NotInitialized(_))));
    }

    #[test]
    fn efficientnet_embedding_is_1280_wide_and_deterministic() {
        let mut model = VisionModel::new(BackboneSpec::lookup("efficientnet_b0").unwrap()).unwrap();
        model.init_random(3).unwrap();
        let p = patch("a", |i| ((i * 31) % 256) as u8);
        let e1 = model.embed(&p).unwrap();
        let e2 = model.embed(&p).unwrap();
        assert_eq!(e1.vector.len(), 1280);
        assert_eq!(e1, e2);
        assert!(e1.vector.iter().all(|v| v.is_finite()));
        assert!(e1.vector.iter().any(|v| *v != 0.0));
        assert_eq!(e1.backbone_name, "efficientnet_b0");
    }

    #[test]
    fn identical_patches_from_different_cells() {
        let model = VisionModel::new(BackboneSpec::lookup("toy").unwrap()).unwrap();
        let a = model.embed(&patch("a", |i| (i % 200) as u8)).unwrap();
        let b = model.embed(&patch("b", |i| (i % 200) as u8)).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!((a.cell_id.as_str(), b.cell_id.as_str()), ("a", "b"));
        assert_eq!(a.vector.len(), TOY_EMBEDDING_DIM);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let spec = BackboneSpec::lookup("efficientnet_b0").unwrap();
        let p = patch("a", |i| ((i * 7) % 256) as u8);
        let mut a = VisionModel::new(spec.clone()).unwrap();
        let mut b = VisionModel::new(spec).unwrap();
        a.init_random(11).unwrap();
        b.init_random(11).unwrap();
        assert_eq!(a.embed(&p).unwrap(), b.embed(&p).unwrap());
    }

    #[test]
    fn weights_round_trip_through_safetensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let spec = BackboneSpec::lookup("efficientnet_b0").unwrap();
        let mut a = VisionModel::new(spec.clone()).unwrap();
        a.init_random(5).unwrap();
        a.save_weights(&path).unwrap();
        let b = VisionModel::from_spec(spec.with_weights(&path)).unwrap();
        let p = patch("x", |i| (i % 97) as u8);
        assert_eq!(a.embed(&p).unwrap(), b.embed(&p).unwrap());
    }

    #[test]
    fn instantiated_counts_match_layer_tables() {
        // ViT is exercised by the acceptance suite; it is slow to allocate
        for name in ["efficientnet_b0", "resnet50", "toy"] {
            let spec = BackboneSpec::lookup(name).unwrap();
            assert_eq!(param_count(&spec).unwrap(), spec.param_count, "{name}");
        }
        let eff = BackboneSpec::lookup("efficientnet_b0").unwrap();
        assert_eq!(param_count_with_head(&eff, 1000).unwrap(), params::efficientnet_b0(1000));
    }
}
