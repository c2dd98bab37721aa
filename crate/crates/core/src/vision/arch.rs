//! Backbone architectures on candle. Parameter names follow torchvision so
//! converted checkpoints load without renaming.

use candle_core::{Module, ModuleT, Result, Tensor, D};
use candle_nn::{
    batch_norm, conv2d, conv2d_no_bias, layer_norm, linear, BatchNorm, Conv2d, Conv2dConfig, Init, LayerNorm,
    Linear, VarBuilder,
};

/// A network that maps `(N, 3, S, S)` images to pooled `(N, D)` features,
/// the layer right before the classification head.
pub trait FeatureNet: Send + Sync {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor>;
}

fn conv_cfg(k: usize, stride: usize, groups: usize) -> Conv2dConfig {
    Conv2dConfig {
        padding: (k - 1) / 2,
        stride,
        groups,
        ..Default::default()
    }
}

#[derive(Clone, Copy)]
enum Act {
    None,
    Silu,
}

/// Conv (no bias) + BatchNorm + optional activation; torchvision's
/// `Conv2dNormActivation` layout (`.0` conv, `.1` norm).
struct ConvNormAct {
    conv: Conv2d,
    bn: BatchNorm,
    act: Act,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    fn new(vb: VarBuilder, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, act: Act) -> Result<Self> {
        Ok(Self {
            conv: conv2d_no_bias(cin, cout, k, conv_cfg(k, stride, groups), vb.pp("0"))?,
            bn: batch_norm(cout, 1e-5, vb.pp("1"))?,
            act,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn.forward_t(&self.conv.forward(x)?, train)?;
        match self.act {
            Act::None => Ok(x),
            Act::Silu => x.silu(),
        }
    }
}

// ---------------------------------------------------------------- EfficientNet-B0

/// (expand ratio, kernel, stride, in channels, out channels, repeats)
const EFFNET_B0_STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
];

struct SqueezeExcite {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let s = self.fc1.forward(&s)?.silu()?;
        let s = candle_nn::ops::sigmoid(&self.fc2.forward(&s)?)?;
        x.broadcast_mul(&s)
    }
}

struct MbConv {
    expand: Option<ConvNormAct>,
    depthwise: ConvNormAct,
    se: SqueezeExcite,
    project: ConvNormAct,
    residual: bool,
}

impl MbConv {
    fn new(vb: VarBuilder, expand_ratio: usize, k: usize, stride: usize, cin: usize, cout: usize) -> Result<Self> {
        let hidden = cin * expand_ratio;
        let squeeze = (cin / 4).max(1);
        let vb = vb.pp("block");
        let mut idx = 0;
        let expand = if expand_ratio != 1 {
            idx += 1;
            Some(ConvNormAct::new(vb.pp("0"), cin, hidden, 1, 1, 1, Act::Silu)?)
        } else {
            None
        };
        let depthwise = ConvNormAct::new(vb.pp(idx.to_string()), hidden, hidden, k, stride, hidden, Act::Silu)?;
        let se_vb = vb.pp((idx + 1).to_string());
        let se = SqueezeExcite {
            fc1: conv2d(hidden, squeeze, 1, Default::default(), se_vb.pp("fc1"))?,
            fc2: conv2d(squeeze, hidden, 1, Default::default(), se_vb.pp("fc2"))?,
        };
        let project = ConvNormAct::new(vb.pp((idx + 2).to_string()), hidden, cout, 1, 1, 1, Act::None)?;
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            residual: stride == 1 && cin == cout,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = match &self.expand {
            Some(e) => e.forward(x, train)?,
            None => x.clone(),
        };
        h = self.depthwise.forward(&h, train)?;
        h = self.se.forward(&h)?;
        h = self.project.forward(&h, train)?;
        if self.residual {
            h = (h + x)?;
        }
        Ok(h)
    }
}

pub struct EfficientNetB0 {
    stem: ConvNormAct,
    blocks: Vec<MbConv>,
    top: ConvNormAct,
}

impl EfficientNetB0 {
    pub const FEATURE_DIM: usize = 1280;

    pub fn new(vb: VarBuilder) -> Result<Self> {
        let f = vb.pp("features");
        let stem = ConvNormAct::new(f.pp("0"), 3, 32, 3, 2, 1, Act::Silu)?;
        let mut blocks = Vec::new();
        for (s, &(e, k, stride, cin, cout, n)) in EFFNET_B0_STAGES.iter().enumerate() {
            for i in 0..n {
                let (cin, stride) = if i == 0 { (cin, stride) } else { (cout, 1) };
                blocks.push(MbConv::new(f.pp((s + 1).to_string()).pp(i.to_string()), e, k, stride, cin, cout)?);
            }
        }
        let top = ConvNormAct::new(f.pp("8"), 320, Self::FEATURE_DIM, 1, 1, 1, Act::Silu)?;
        Ok(Self { stem, blocks, top })
    }
}

impl FeatureNet for EfficientNetB0 {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = self.stem.forward(x, train)?;
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        self.top.forward(&h, train)?.mean((2, 3))
    }
}

// ---------------------------------------------------------------- ResNet-50

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(vb: VarBuilder, cin: usize, width: usize, stride: usize) -> Result<Self> {
        let cout = width * 4;
        let downsample = if stride != 1 || cin != cout {
            let cfg = Conv2dConfig { stride, ..Default::default() };
            Some((
                conv2d_no_bias(cin, cout, 1, cfg, vb.pp("downsample.0"))?,
                batch_norm(cout, 1e-5, vb.pp("downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv2d_no_bias(cin, width, 1, Default::default(), vb.pp("conv1"))?,
            bn1: batch_norm(width, 1e-5, vb.pp("bn1"))?,
            conv2: conv2d_no_bias(width, width, 3, conv_cfg(3, stride, 1), vb.pp("conv2"))?,
            bn2: batch_norm(width, 1e-5, vb.pp("bn2"))?,
            conv3: conv2d_no_bias(width, cout, 1, Default::default(), vb.pp("conv3"))?,
            bn3: batch_norm(cout, 1e-5, vb.pp("bn3"))?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward_t(&self.conv2.forward(&h)?, train)?.relu()?;
        let h = self.bn3.forward_t(&self.conv3.forward(&h)?, train)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward_t(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        (h + skip)?.relu()
    }
}

pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm,
    layers: Vec<Bottleneck>,
}

impl ResNet50 {
    pub const FEATURE_DIM: usize = 2048;

    pub fn new(vb: VarBuilder) -> Result<Self> {
        let conv1 = conv2d_no_bias(3, 64, 7, conv_cfg(7, 2, 1), vb.pp("conv1"))?;
        let bn1 = batch_norm(64, 1e-5, vb.pp("bn1"))?;
        let mut layers = Vec::new();
        let mut cin = 64;
        for (l, (&n, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            for i in 0..n {
                let stride = if i == 0 && l > 0 { 2 } else { 1 };
                layers.push(Bottleneck::new(vb.pp(format!("layer{}.{i}", l + 1)), cin, width, stride)?);
                cin = width * 4;
            }
        }
        Ok(Self { conv1, bn1, layers })
    }
}

impl FeatureNet for ResNet50 {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        // zero padding is safe for the max-pool because inputs are post-ReLU
        let mut h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        for b in &self.layers {
            h = b.forward(&h, train)?;
        }
        h.mean((2, 3))
    }
}

// ---------------------------------------------------------------- ViT-B/16

pub const VIT_PATCH: usize = 16;
pub const VIT_DIM: usize = 768;
const VIT_DEPTH: usize = 12;
const VIT_HEADS: usize = 12;
const VIT_MLP: usize = 3072;

struct EncoderBlock {
    ln_1: LayerNorm,
    qkv: Linear,
    out_proj: Linear,
    ln_2: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl EncoderBlock {
    fn new(vb: VarBuilder) -> Result<Self> {
        let attn = vb.pp("self_attention");
        let w = attn.get_with_hints((3 * VIT_DIM, VIT_DIM), "in_proj_weight", Init::Const(0.0))?;
        let b = attn.get_with_hints(3 * VIT_DIM, "in_proj_bias", Init::Const(0.0))?;
        Ok(Self {
            ln_1: layer_norm(VIT_DIM, 1e-6, vb.pp("ln_1"))?,
            qkv: Linear::new(w, Some(b)),
            out_proj: linear(VIT_DIM, VIT_DIM, attn.pp("out_proj"))?,
            ln_2: layer_norm(VIT_DIM, 1e-6, vb.pp("ln_2"))?,
            mlp_in: linear(VIT_DIM, VIT_MLP, vb.pp("mlp.0"))?,
            mlp_out: linear(VIT_MLP, VIT_DIM, vb.pp("mlp.3"))?,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let hd = VIT_DIM / VIT_HEADS;
        let qkv = self.qkv.forward(x)?.reshape((b, t, 3, VIT_HEADS, hd))?.permute((2, 0, 3, 1, 4))?;
        let (q, k, v) = (qkv.get(0)?.contiguous()?, qkv.get(1)?.contiguous()?, qkv.get(2)?.contiguous()?);
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax_last_dim(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, VIT_DIM))?;
        self.out_proj.forward(&out)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln_1.forward(x)?)?)?;
        let h = self.mlp_out.forward(&self.mlp_in.forward(&self.ln_2.forward(&x)?)?.gelu_erf()?)?;
        x + h
    }
}

pub struct VitB16 {
    conv_proj: Conv2d,
    class_token: Tensor,
    pos_embedding: Tensor,
    layers: Vec<EncoderBlock>,
    ln: LayerNorm,
}

impl VitB16 {
    pub const FEATURE_DIM: usize = VIT_DIM;

    pub fn new(vb: VarBuilder, image_size: usize) -> Result<Self> {
        let tokens = (image_size / VIT_PATCH).pow(2) + 1;
        let cfg = Conv2dConfig { stride: VIT_PATCH, ..Default::default() };
        let enc = vb.pp("encoder");
        let layers = (0..VIT_DEPTH)
            .map(|i| EncoderBlock::new(enc.pp(format!("layers.encoder_layer_{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            conv_proj: conv2d(3, VIT_DIM, VIT_PATCH, cfg, vb.pp("conv_proj"))?,
            class_token: vb.get_with_hints((1, 1, VIT_DIM), "class_token", Init::Const(0.0))?,
            pos_embedding: enc.get_with_hints((1, tokens, VIT_DIM), "pos_embedding", Init::Const(0.0))?,
            layers,
            ln: layer_norm(VIT_DIM, 1e-6, enc.pp("ln"))?,
        })
    }
}

impl FeatureNet for VitB16 {
    fn features(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let b = x.dim(0)?;
        let h = self.conv_proj.forward(x)?.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.class_token.broadcast_as((b, 1, VIT_DIM))?;
        let mut h = Tensor::cat(&[&cls, &h], 1)?.broadcast_add(&self.pos_embedding)?;
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        self.ln.forward(&h)?.get_on_dim(1, 0)
    }
}
