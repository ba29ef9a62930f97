use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2dGeometry, Padding};

pub const PRESETS: [&str; 4] = ["vgg-small", "vgg-19-like", "resnet-small", "resnet-50-like"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// One indivisible unit of a network. Residual shortcuts never leave their
/// unit, so units are the atoms of block partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UnitSpec {
    /// conv3×3 → bn → relu, optionally followed by 2×2 max pooling.
    Plain { out_channels: usize, pool: bool },
    /// Two 3×3 convolutions with an identity or 1×1 projection shortcut.
    Basic { out_channels: usize, stride: usize },
    /// 1×1 → 3×3 → 1×1 (expansion 4) with an identity or projection shortcut.
    Bottleneck { width: usize, stride: usize },
}

impl UnitSpec {
    pub fn out_channels(&self) -> usize {
        match *self {
            UnitSpec::Plain { out_channels, .. } | UnitSpec::Basic { out_channels, .. } => {
                out_channels
            }
            UnitSpec::Bottleneck { width, .. } => 4 * width,
        }
    }

    pub fn is_residual(&self) -> bool {
        !matches!(self, UnitSpec::Plain { .. })
    }

    pub(crate) fn needs_projection(&self, in_channels: usize) -> bool {
        match *self {
            UnitSpec::Plain { .. } => false,
            UnitSpec::Basic { stride, .. } | UnitSpec::Bottleneck { stride, .. } => {
                stride != 1 || in_channels != self.out_channels()
            }
        }
    }
}

/// Feature-map shape `[C, H, W]` without the batch axis.
pub type FeatureShape = [usize; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub in_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<StemSpec>,
    #[serde(default)]
    pub units: Vec<UnitSpec>,
}

fn conv_out(
    name: &str,
    location: &str,
    shape: FeatureShape,
    geom: Conv2dGeometry,
    out_channels: usize,
) -> Result<FeatureShape> {
    let fail = || Error::ShapePropagation {
        name: name.to_string(),
        location: location.to_string(),
        reason: format!(
            "{}x{} kernel, stride {} does not fit {}x{} input",
            geom.kernel, geom.kernel, geom.stride, shape[1], shape[2]
        ),
    };
    let h = geom.output_extent(shape[1]).ok_or_else(fail)?;
    let w = geom.output_extent(shape[2]).ok_or_else(fail)?;
    Ok([out_channels, h, w])
}

impl ArchitectureSpec {
    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    pub fn input_shape(&self) -> FeatureShape {
        [self.in_channels, self.input_size, self.input_size]
    }

    /// Symbolic shape propagation. Returns the shape after the stem (or the
    /// input, without one) followed by the shape after every unit.
    pub fn propagate(&self) -> Result<Vec<FeatureShape>> {
        let fail = |location: String, reason: String| Error::ShapePropagation {
            name: self.name.clone(),
            location,
            reason,
        };
        if self.in_channels == 0 || self.input_size == 0 {
            return Err(fail("input".into(), "empty input".into()));
        }
        if self.num_classes < 2 {
            return Err(fail("classifier".into(), "need at least 2 classes".into()));
        }
        let mut shape = self.input_shape();
        if let Some(stem) = self.stem {
            let geom = Conv2dGeometry::new(stem.kernel, stem.stride, Padding::Same);
            shape = conv_out(&self.name, "stem", shape, geom, stem.out_channels)?;
        }
        let mut shapes = vec![shape];
        for (i, unit) in self.units.iter().enumerate() {
            let loc = format!("unit {i}");
            if unit.out_channels() == 0 {
                return Err(fail(loc, "zero output channels".into()));
            }
            shape = match *unit {
                UnitSpec::Plain { out_channels, pool } => {
                    let geom = Conv2dGeometry::new(3, 1, Padding::Same);
                    let s = conv_out(&self.name, &loc, shape, geom, out_channels)?;
                    if pool {
                        if s[1] < 2 || s[2] < 2 {
                            return Err(fail(loc, format!("cannot pool a {}x{} map", s[1], s[2])));
                        }
                        [s[0], s[1] / 2, s[2] / 2]
                    } else {
                        s
                    }
                }
                UnitSpec::Basic {
                    out_channels,
                    stride,
                } => {
                    let first = Conv2dGeometry::new(3, stride, Padding::Same);
                    conv_out(&self.name, &loc, shape, first, out_channels)?
                }
                UnitSpec::Bottleneck { width, stride } => {
                    let mid = Conv2dGeometry::new(3, stride, Padding::Same);
                    let s = conv_out(&self.name, &loc, shape, mid, width)?;
                    [4 * width, s[1], s[2]]
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Channel count reaching the classifier.
    pub fn feature_channels(&self) -> Result<usize> {
        Ok(self.propagate()?.last().expect("non-empty")[0])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.propagate()?;
        Ok(spec)
    }
}

/// Plain units pooling after the listed unit indices; a pool that would act
/// on a 1×1 map is dropped.
fn plain_stack(widths: &[usize], pool_after: &[usize], input_size: usize) -> Vec<UnitSpec> {
    let mut size = input_size;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let pool = pool_after.contains(&i) && size >= 2;
            if pool {
                size /= 2;
            }
            UnitSpec::Plain {
                out_channels: w,
                pool,
            }
        })
        .collect()
}

/// Builds and validates a named preset for `in_channels × input_size²`
/// inputs.
///
/// * `vgg-small`: 8 plain units, widths 8–64, pooled down to 1×1 for 28×28
///   and 32×32 inputs.
/// * `vgg-19-like`: the 16 convolutional units of VGG-19 (64–512 wide).
/// * `resnet-small`: stem + 8 basic residual units (widths 8–64).
/// * `resnet-50-like`: stem + 16 bottleneck units in stages of 3/4/6/3.
pub fn build_preset(
    name: &str,
    num_classes: usize,
    in_channels: usize,
    input_size: usize,
) -> Result<ArchitectureSpec> {
    let (stem, units) = match name {
        "vgg-small" => (
            None,
            plain_stack(
                &[8, 8, 16, 16, 32, 32, 64, 64],
                &[1, 3, 5, 6, 7],
                input_size,
            ),
        ),
        "vgg-19-like" => {
            let widths = [
                64, 64, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512,
            ];
            (None, plain_stack(&widths, &[1, 3, 7, 11, 15], input_size))
        }
        "resnet-small" => {
            let widths = [8, 8, 16, 16, 32, 32, 64, 64];
            let strides = [1, 1, 2, 1, 2, 1, 2, 1];
            let units = widths
                .iter()
                .zip(strides)
                .map(|(&out_channels, stride)| UnitSpec::Basic {
                    out_channels,
                    stride,
                })
                .collect();
            (
                Some(StemSpec {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                }),
                units,
            )
        }
        "resnet-50-like" => {
            let mut units = Vec::new();
            for (stage, (&depth, &width)) in [3usize, 4, 6, 3]
                .iter()
                .zip(&[64usize, 128, 256, 512])
                .enumerate()
            {
                for i in 0..depth {
                    let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                    units.push(UnitSpec::Bottleneck { width, stride });
                }
            }
            (
                Some(StemSpec {
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                }),
                units,
            )
        }
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    let spec = ArchitectureSpec {
        name: name.to_string(),
        in_channels,
        input_size,
        num_classes,
        stem,
        units,
    };
    spec.propagate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg_small_reduces_to_one_by_one() {
        for (c, size) in [(3, 32), (1, 28)] {
            let spec = build_preset("vgg-small", 10, c, size).unwrap();
            let last = *spec.propagate().unwrap().last().unwrap();
            assert_eq!(last, [64, 1, 1], "input {size}");
            assert_eq!(spec.unit_count(), 8);
        }
    }

    #[test]
    fn vgg19_like_has_sixteen_units() {
        let spec = build_preset("vgg-19-like", 10, 3, 32).unwrap();
        assert_eq!(spec.unit_count(), 16);
        assert_eq!(*spec.propagate().unwrap().last().unwrap(), [512, 1, 1]);
    }

    #[test]
    fn resnet_presets_are_even_and_consistent() {
        let small = build_preset("resnet-small", 10, 3, 32).unwrap();
        assert_eq!(small.unit_count() % 2, 0);
        assert!(small.units.iter().all(UnitSpec::is_residual));
        assert_eq!(*small.propagate().unwrap().last().unwrap(), [64, 4, 4]);
        let big = build_preset("resnet-50-like", 10, 3, 32).unwrap();
        assert_eq!(big.unit_count(), 16);
        assert_eq!(*big.propagate().unwrap().last().unwrap(), [2048, 4, 4]);
    }

    #[test]
    fn unknown_preset_and_bad_shapes() {
        assert!(matches!(
            build_preset("inception", 10, 3, 32),
            Err(Error::UnknownPreset(_))
        ));
        let spec = ArchitectureSpec {
            name: "tiny".into(),
            in_channels: 1,
            input_size: 1,
            num_classes: 10,
            stem: None,
            units: vec![UnitSpec::Plain {
                out_channels: 4,
                pool: true,
            }],
        };
        assert!(matches!(
            spec.propagate(),
            Err(Error::ShapePropagation { .. })
        ));
    }

    #[test]
    fn toml_round_trip() {
        let spec = build_preset("resnet-small", 10, 1, 28).unwrap();
        let text = spec.to_toml().unwrap();
        assert!(text.contains("kind = \"basic\""));
        assert_eq!(ArchitectureSpec::from_toml(&text).unwrap(), spec);
    }
}
