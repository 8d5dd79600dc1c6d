use serde::{Deserialize, Serialize};

use super::spec::{FeatShape, LayerKind, NetworkSpec, Role, Src};
use super::{ArchConfig, ArchKind, STRIDE_PLAN};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Variant {
    Standard,
    Color,
    Shape,
}

const FE: Role = Role::FeatureExtractor;

fn conv(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> LayerKind {
    LayerKind::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding,
        bias: false,
    }
}

fn bn(channels: usize) -> LayerKind {
    LayerKind::BatchNorm2d { channels }
}

struct BlockPlan {
    cin: usize,
    cout: usize,
    stride: usize,
    /// Stride the standard topology would use here; decides the shortcut.
    nominal_stride: usize,
    pointwise: bool,
}

fn basic_block(s: &mut NetworkSpec, prefix: &str, p: BlockPlan) {
    let input = Src::Layer(s.last().expect("block follows the stem"));
    let (k, pad) = if p.pointwise { (1, 0) } else { (3, 1) };
    s.push(format!("{prefix}.conv1"), conv(p.cin, p.cout, k, p.stride, pad), FE);
    s.push(format!("{prefix}.bn1"), bn(p.cout), FE);
    s.push(format!("{prefix}.relu1"), LayerKind::Relu, FE);
    s.push(format!("{prefix}.conv2"), conv(p.cout, p.cout, k, 1, pad), FE);
    let main = s.push(format!("{prefix}.bn2"), bn(p.cout), FE);
    let shortcut = if p.nominal_stride != 1 || p.cin != p.cout {
        s.push_from(
            format!("{prefix}.downsample.0"),
            conv(p.cin, p.cout, 1, p.stride, 0),
            vec![input],
            FE,
        );
        Src::Layer(s.push(format!("{prefix}.downsample.1"), bn(p.cout), FE))
    } else {
        input
    };
    s.push_from(
        format!("{prefix}.add"),
        LayerKind::Add,
        vec![Src::Layer(main), shortcut],
        FE,
    );
    s.push(format!("{prefix}.relu2"), LayerKind::Relu, FE);
}

fn trunk(cfg: &ArchConfig, variant: Variant, name: &str) -> Result<NetworkSpec> {
    cfg.validate()?;
    let pointwise = variant == Variant::Color;
    let strict = pointwise && cfg.strict_color;
    let stride = |s: usize| if strict { 1 } else { s };
    let widths = cfg.widths();

    let mut s = NetworkSpec::new(name, 3);
    let mut cin = 3;
    if variant == Variant::Shape {
        s.push(
            "gray",
            LayerKind::RgbToGray {
                coeffs: cfg.grayscale_coeffs,
            },
            FE,
        );
        cin = 1;
    }
    let (k, pad) = if pointwise { (1, 0) } else { (7, 3) };
    s.push("conv1", conv(cin, widths[0], k, stride(2), pad), FE);
    s.push("bn1", bn(widths[0]), FE);
    s.push("relu", LayerKind::Relu, FE);
    if !strict {
        s.push(
            "maxpool",
            LayerKind::MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            FE,
        );
    }
    let mut c = widths[0];
    for (stage, &width) in widths.iter().enumerate() {
        for block in 0..2 {
            let nominal = if stage > 0 && block == 0 { 2 } else { 1 };
            basic_block(
                &mut s,
                &format!("layer{}.{block}", stage + 1),
                BlockPlan {
                    cin: c,
                    cout: width,
                    stride: stride(nominal),
                    nominal_stride: nominal,
                    pointwise,
                },
            );
            c = width;
        }
    }
    if strict {
        s.push("gridpool", LayerKind::BlockAvgPool { block: STRIDE_PLAN }, FE);
    }
    s.push("avgpool", LayerKind::GlobalAvgPool, FE);
    Ok(s)
}

/// Standard residual feature extractor: 7×7/2 conv, BN, ReLU, 3×3/2 max-pool,
/// four stages of two basic blocks, global average pool.
pub fn build_resnet18_fe(cfg: &ArchConfig) -> Result<NetworkSpec> {
    trunk(cfg, Variant::Standard, "fe")
}

/// Same topology with every convolution reduced to 1×1 (strides kept).
pub fn build_color_fe(cfg: &ArchConfig) -> Result<NetworkSpec> {
    trunk(cfg, Variant::Color, "color")
}

/// Grayscale stem followed by the standard extractor on one channel.
pub fn build_shape_fe(cfg: &ArchConfig) -> Result<NetworkSpec> {
    trunk(cfg, Variant::Shape, "shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fusion {
    None,
    ChannelConcat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// flatten → FC on globally pooled features.
    Linear,
    /// 1×1 conv → ReLU → global pool → flatten → FC on a spatial map.
    Conv { hidden: usize },
}

/// Shared feature extractor branches plus one head per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadSpec {
    pub arch: ArchKind,
    pub config: ArchConfig,
    pub branches: Vec<NetworkSpec>,
    pub fusion: Fusion,
    pub head_kind: HeadKind,
    pub heads: Vec<NetworkSpec>,
}

impl MultiHeadSpec {
    pub fn task_classes(&self) -> Vec<usize> {
        self.heads
            .iter()
            .map(|h| match h.layers.last().map(|l| &l.kind) {
                Some(LayerKind::Linear { out_features, .. }) => *out_features,
                _ => 0,
            })
            .collect()
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    /// Parameters shared by all tasks.
    pub fn fe_param_count(&self) -> usize {
        self.branches.iter().map(NetworkSpec::param_count).sum()
    }

    pub fn head_param_count(&self, task: usize) -> usize {
        self.heads[task].param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.fe_param_count() + self.heads.iter().map(NetworkSpec::param_count).sum::<usize>()
    }

    /// Shape of the fused shared representation for a square input.
    pub fn feature_shape(&self, input_size: usize) -> Result<FeatShape> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.output_shape(input_size, input_size))
            .collect::<Result<Vec<_>>>()?;
        match self.fusion {
            Fusion::None => Ok(outs[0]),
            Fusion::ChannelConcat => {
                let (a, b) = (outs[0], outs[1]);
                if (a.h, a.w) != (b.h, b.w) {
                    return Err(Error::shape(
                        "fusion",
                        format!("branch maps {a:?} and {b:?} differ spatially"),
                    ));
                }
                Ok(FeatShape { c: a.c + b.c, ..a })
            }
        }
    }

    /// True when no branch pools globally before fusion, so binding of the
    /// two branches happens on spatial maps.
    pub fn fusion_precedes_pooling(&self) -> bool {
        self.fusion == Fusion::None
            || self
                .branches
                .iter()
                .all(|b| !b.layers.iter().any(|l| matches!(l.kind, LayerKind::GlobalAvgPool)))
    }
}

fn head(task: usize, kind: HeadKind, feat: FeatShape, classes: usize) -> NetworkSpec {
    let role = Role::Head(task);
    let mut s = NetworkSpec::new(format!("head.{task}"), feat.c);
    let fc_in = match kind {
        HeadKind::Linear => feat.c,
        HeadKind::Conv { hidden } => {
            s.push(
                "conv",
                LayerKind::Conv2d {
                    in_channels: feat.c,
                    out_channels: hidden,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    bias: true,
                },
                role,
            );
            s.push("relu", LayerKind::Relu, role);
            s.push("avgpool", LayerKind::GlobalAvgPool, role);
            hidden
        }
    };
    s.push("flatten", LayerKind::Flatten, role);
    s.push(
        "fc",
        LayerKind::Linear {
            in_features: fc_in,
            out_features: classes,
            bias: true,
        },
        role,
    );
    s
}

/// Builds any of the five architectures with one head per entry of `tasks`
/// (class counts).
pub fn build_multihead(kind: ArchKind, cfg: &ArchConfig, tasks: &[usize]) -> Result<MultiHeadSpec> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("at least one task is required".into()));
    }
    if let Some(t) = tasks.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("task {t} has zero classes")));
    }
    let conv_head = HeadKind::Conv {
        hidden: cfg.head_channels,
    };
    let (branches, fusion, head_kind) = match kind {
        ArchKind::Resnet18 => (vec![build_resnet18_fe(cfg)?], Fusion::None, HeadKind::Linear),
        ArchKind::Color => (vec![build_color_fe(cfg)?], Fusion::None, HeadKind::Linear),
        ArchKind::Shape => (vec![build_shape_fe(cfg)?], Fusion::None, HeadKind::Linear),
        ArchKind::Resnet18h => (
            vec![build_resnet18_fe(cfg)?.without_final_pool()],
            Fusion::None,
            conv_head,
        ),
        ArchKind::Ds => (
            vec![
                build_color_fe(cfg)?.without_final_pool(),
                build_shape_fe(cfg)?.without_final_pool(),
            ],
            Fusion::ChannelConcat,
            conv_head,
        ),
    };
    let mut spec = MultiHeadSpec {
        arch: kind,
        config: cfg.clone(),
        branches,
        fusion,
        head_kind,
        heads: Vec::new(),
    };
    let mut feat = spec.feature_shape(cfg.input_size)?;
    if head_kind == HeadKind::Linear {
        // Heads see the pooled vector.
        feat = FeatShape { c: feat.c, h: 1, w: 1 };
    }
    spec.heads = tasks
        .iter()
        .enumerate()
        .map(|(t, &classes)| head(t, head_kind, feat, classes))
        .collect();
    for h in &spec.heads {
        h.infer_shapes(feat.h, feat.w)?;
    }
    Ok(spec)
}

/// Color ∥ shape branches, concatenated before any pooling, with
/// 1×1-conv task heads.
pub fn build_ds_network(cfg: &ArchConfig, tasks: &[usize]) -> Result<MultiHeadSpec> {
    build_multihead(ArchKind::Ds, cfg, tasks)
}

/// Standard extractor with the same task heads as [`build_ds_network`].
pub fn build_h_network(cfg: &ArchConfig, tasks: &[usize]) -> Result<MultiHeadSpec> {
    build_multihead(ArchKind::Resnet18h, cfg, tasks)
}
