//! Declarative layer graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a layer reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Src {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    RgbToGray {
        coeffs: [f64; 3],
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Mean over non-overlapping `block × block` tiles.
    BlockAvgPool {
        block: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Add,
    ChannelConcat,
}

impl LayerKind {
    /// Trainable parameter slots as `(suffix, dims)`.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![("weight", vec![out_channels, in_channels, kernel, kernel])];
                if bias {
                    v.push(("bias", vec![out_channels]));
                }
                v
            }
            LayerKind::BatchNorm2d { channels } => {
                vec![("weight", vec![channels]), ("bias", vec![channels])]
            }
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => {
                let mut v = vec![("weight", vec![out_features, in_features])];
                if bias {
                    v.push(("bias", vec![out_features]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }

    /// Largest spatial footprint of the op (1 for per-pixel ops).
    pub fn spatial_extent(&self) -> usize {
        match *self {
            LayerKind::Conv2d { kernel, .. } => kernel,
            LayerKind::MaxPool2d { kernel, .. } => kernel,
            LayerKind::BlockAvgPool { block } => block,
            LayerKind::GlobalAvgPool => usize::MAX,
            _ => 1,
        }
    }

    pub fn is_pooling(&self) -> bool {
        matches!(
            self,
            LayerKind::MaxPool2d { .. } | LayerKind::BlockAvgPool { .. } | LayerKind::GlobalAvgPool
        )
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Add | LayerKind::ChannelConcat => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    FeatureExtractor,
    Head(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Src>,
    pub role: Role,
}

/// An ordered layer graph; the last layer is the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// Activation shape without the batch dimension. `h = w = 0` marks a flat
/// feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input_channels: usize) -> Self {
        NetworkSpec {
            name: name.into(),
            input_channels,
            layers: Vec::new(),
        }
    }

    /// Appends a layer reading from the previous layer (or the input).
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, role: Role) -> usize {
        let src = match self.layers.len() {
            0 => Src::Input,
            n => Src::Layer(n - 1),
        };
        self.push_from(name, kind, vec![src], role)
    }

    pub fn push_from(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<Src>, role: Role) -> usize {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind,
            inputs,
            role,
        });
        self.layers.len() - 1
    }

    pub fn last(&self) -> Option<usize> {
        self.layers.len().checked_sub(1)
    }

    /// Copy without a trailing global pool, exposing the pre-pool map.
    pub fn without_final_pool(&self) -> NetworkSpec {
        let mut s = self.clone();
        if matches!(s.layers.last().map(|l| &l.kind), Some(LayerKind::GlobalAvgPool)) {
            s.layers.pop();
        }
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kind.param_count()).sum()
    }

    /// Shape walk over the graph for an `input_channels × h × w` input,
    /// validating every wiring and hyperparameter.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<FeatShape>> {
        let input = FeatShape {
            c: self.input_channels,
            h,
            w,
        };
        let mut out: Vec<FeatShape> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::shape(layer.name.clone(), msg);
            if layer.inputs.len() != layer.kind.arity() {
                return Err(err(format!("expects {} inputs", layer.kind.arity())));
            }
            let mut ins = Vec::new();
            for src in &layer.inputs {
                ins.push(match *src {
                    Src::Input => input,
                    Src::Layer(j) if j < i => out[j],
                    Src::Layer(j) => return Err(err(format!("forward reference to layer {j}"))),
                });
            }
            let x = ins[0];
            let spatial = |x: FeatShape| -> Result<()> {
                if x.h == 0 {
                    Err(err("needs a spatial input".into()))
                } else {
                    Ok(())
                }
            };
            let shape = match layer.kind {
                LayerKind::RgbToGray { .. } => {
                    spatial(x)?;
                    if x.c != 3 {
                        return Err(err(format!("grayscale needs 3 channels, got {}", x.c)));
                    }
                    FeatShape { c: 1, ..x }
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    spatial(x)?;
                    if x.c != in_channels {
                        return Err(err(format!("expects {in_channels} channels, got {}", x.c)));
                    }
                    if x.h + 2 * padding < kernel || x.w + 2 * padding < kernel || stride == 0 {
                        return Err(err(format!("kernel {kernel} does not fit {}×{}", x.h, x.w)));
                    }
                    FeatShape {
                        c: out_channels,
                        h: (x.h + 2 * padding - kernel) / stride + 1,
                        w: (x.w + 2 * padding - kernel) / stride + 1,
                    }
                }
                LayerKind::BatchNorm2d { channels } => {
                    spatial(x)?;
                    if x.c != channels {
                        return Err(err(format!("expects {channels} channels, got {}", x.c)));
                    }
                    x
                }
                LayerKind::Relu => x,
                LayerKind::MaxPool2d {
                    kernel,
                    stride,
                    padding,
                } => {
                    spatial(x)?;
                    if x.h + 2 * padding < kernel || x.w + 2 * padding < kernel {
                        return Err(err(format!("window {kernel} does not fit {}×{}", x.h, x.w)));
                    }
                    FeatShape {
                        c: x.c,
                        h: (x.h + 2 * padding - kernel) / stride + 1,
                        w: (x.w + 2 * padding - kernel) / stride + 1,
                    }
                }
                LayerKind::BlockAvgPool { block } => {
                    spatial(x)?;
                    if x.h % block != 0 || x.w % block != 0 {
                        return Err(err(format!("{}×{} not divisible by {block}", x.h, x.w)));
                    }
                    FeatShape {
                        c: x.c,
                        h: x.h / block,
                        w: x.w / block,
                    }
                }
                LayerKind::GlobalAvgPool => {
                    spatial(x)?;
                    FeatShape { c: x.c, h: 1, w: 1 }
                }
                LayerKind::Flatten => FeatShape {
                    c: x.c * x.h.max(1) * x.w.max(1),
                    h: 0,
                    w: 0,
                },
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if x.h != 0 || x.c != in_features {
                        return Err(err(format!("expects flat {in_features} features, got {x:?}")));
                    }
                    FeatShape {
                        c: out_features,
                        h: 0,
                        w: 0,
                    }
                }
                LayerKind::Add => {
                    if ins[0] != ins[1] {
                        return Err(err(format!("residual add of {:?} and {:?}", ins[0], ins[1])));
                    }
                    x
                }
                LayerKind::ChannelConcat => {
                    let y = ins[1];
                    if (x.h, x.w) != (y.h, y.w) || x.h == 0 {
                        return Err(err(format!("cannot concat {x:?} with {y:?}")));
                    }
                    FeatShape { c: x.c + y.c, ..x }
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn output_shape(&self, h: usize, w: usize) -> Result<FeatShape> {
        let shapes = self.infer_shapes(h, w)?;
        Ok(*shapes.last().unwrap_or(&FeatShape {
            c: self.input_channels,
            h,
            w,
        }))
    }
}

/// Exact trainable parameter count (BN affine included, running statistics
/// excluded).
pub fn count_params(spec: &NetworkSpec) -> usize {
    spec.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_has_no_params() {
        assert_eq!(count_params(&NetworkSpec::new("empty", 3)), 0);
    }

    #[test]
    fn single_linear_layer_count() {
        let mut s = NetworkSpec::new("fc", 512);
        s.push(
            "fc",
            LayerKind::Linear {
                in_features: 512,
                out_features: 102,
                bias: true,
            },
            Role::Head(0),
        );
        assert_eq!(count_params(&s), 512 * 102 + 102);
        assert_eq!(count_params(&s), 52_326);
    }

    #[test]
    fn mismatched_residual_is_rejected() {
        let mut s = NetworkSpec::new("bad", 3);
        let conv = s.push(
            "conv",
            LayerKind::Conv2d {
                in_channels: 3,
                out_channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
                bias: false,
            },
            Role::FeatureExtractor,
        );
        s.push_from(
            "add",
            LayerKind::Add,
            vec![Src::Input, Src::Layer(conv)],
            Role::FeatureExtractor,
        );
        assert!(matches!(s.infer_shapes(8, 8), Err(Error::Shape { .. })));
    }
}
