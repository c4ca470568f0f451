use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Valid convolution, stride 1.
    Conv2d {
        out_channels: usize,
        kernel_size: usize,
    },
    /// Max pooling with stride equal to the window. A trailing partial window
    /// is pooled over the cells it covers.
    MaxPool {
        window: usize,
    },
    FullyConnected {
        out_features: usize,
    },
    ReLU,
    /// Fully connected layer producing class logits; softmax lives in the loss.
    SoftmaxOutput {
        num_classes: usize,
    },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. } | LayerSpec::SoftmaxOutput { .. }
        )
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                out_channels,
                kernel_size,
            } => write!(f, "C{out_channels}({kernel_size})"),
            LayerSpec::MaxPool { window } => write!(f, "P({window})"),
            LayerSpec::FullyConnected { out_features } => write!(f, "F{out_features}"),
            LayerSpec::ReLU => write!(f, "R"),
            LayerSpec::SoftmaxOutput { num_classes } => write!(f, "O{num_classes}"),
        }
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolved geometry of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeom {
    pub kind: LayerSpec,
    pub input: ActShape,
    pub output: ActShape,
}

impl LayerGeom {
    /// Weight tensor shape, `None` for parameterless layers.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerSpec::Conv2d {
                out_channels,
                kernel_size,
            } => {
                let ActShape::Spatial { c, .. } = self.input else {
                    unreachable!("validated")
                };
                Some(vec![out_channels, c, kernel_size, kernel_size])
            }
            LayerSpec::FullyConnected { out_features } => Some(vec![out_features, self.input.len()]),
            LayerSpec::SoftmaxOutput { num_classes } => Some(vec![num_classes, self.input.len()]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        self.weight_shape().map(|s| s[0])
    }

    pub fn fan_in(&self) -> Option<usize> {
        self.weight_shape().map(|s| s[1..].iter().product())
    }

    /// Number of gradient entries (weights then bias).
    pub fn param_count(&self) -> usize {
        self.weight_shape()
            .map(|s| s.iter().product::<usize>() + s[0])
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(input_shape: (usize, usize, usize), layers: Vec<LayerSpec>, num_classes: usize) -> Result<Self> {
        let spec = Self {
            input_shape,
            layers,
            num_classes,
        };
        spec.geometry()?;
        Ok(spec)
    }

    /// Parses the compact notation used for architectures, e.g.
    /// `C4(3)-R-P(2)-C8(3)-R-P(2)-F32-R-O4`.
    pub fn parse(input_shape: (usize, usize, usize), arch: &str) -> Result<Self> {
        let layers = arch.split('-').map(str::parse).collect::<Result<Vec<LayerSpec>>>()?;
        let num_classes = match layers.last() {
            Some(LayerSpec::SoftmaxOutput { num_classes }) => *num_classes,
            _ => {
                return Err(Error::invalid(format!(
                    "architecture `{arch}` must end with an output layer"
                )))
            }
        };
        Self::new(input_shape, layers, num_classes)
    }

    /// Named desk-scale architectures.
    pub fn named(name: &str, input_shape: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        let arch = match name {
            "lenet-mini" => format!("C4(3)-R-P(2)-C8(3)-R-P(2)-F32-R-O{num_classes}"),
            "lenet5-mini" => format!("C4(3)-R-P(2)-C8(3)-R-P(2)-F32-R-F16-R-O{num_classes}"),
            "fc2" => format!("F32-R-O{num_classes}"),
            other => return Err(Error::Config(format!("unknown model `{other}`"))),
        };
        Self::parse(input_shape, &arch)
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    /// Infers and checks every layer's input and output shape.
    pub fn geometry(&self) -> Result<Vec<LayerGeom>> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input shape {:?} has a zero dimension",
                self.input_shape
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let bad = |layer: usize, detail: String| Error::LayerShape { layer, detail };
        let mut shape = ActShape::Spatial { c, h, w };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, &kind) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            let next = match kind {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel_size,
                } => {
                    let ActShape::Spatial { h, w, .. } = shape else {
                        return Err(bad(
                            i,
                            format!("{kind} needs a spatial input, got flat {}", shape.len()),
                        ));
                    };
                    if out_channels == 0 || kernel_size == 0 {
                        return Err(bad(i, format!("{kind} has a zero size")));
                    }
                    if kernel_size > h || kernel_size > w {
                        return Err(bad(i, format!("kernel {kernel_size} exceeds input {h}x{w}")));
                    }
                    ActShape::Spatial {
                        c: out_channels,
                        h: h - kernel_size + 1,
                        w: w - kernel_size + 1,
                    }
                }
                LayerSpec::MaxPool { window } => {
                    let ActShape::Spatial { c, h, w } = shape else {
                        return Err(bad(
                            i,
                            format!("{kind} needs a spatial input, got flat {}", shape.len()),
                        ));
                    };
                    if window == 0 {
                        return Err(bad(i, "pool window must be positive".into()));
                    }
                    ActShape::Spatial {
                        c,
                        h: h.div_ceil(window),
                        w: w.div_ceil(window),
                    }
                }
                LayerSpec::FullyConnected { out_features } => {
                    if out_features == 0 {
                        return Err(bad(i, "zero output features".into()));
                    }
                    ActShape::Flat(out_features)
                }
                LayerSpec::ReLU => shape,
                LayerSpec::SoftmaxOutput { num_classes } => {
                    if !last {
                        return Err(bad(i, "output layer must be the last layer".into()));
                    }
                    if num_classes != self.num_classes {
                        return Err(bad(
                            i,
                            format!(
                                "output layer has {num_classes} classes, model declares {}",
                                self.num_classes
                            ),
                        ));
                    }
                    ActShape::Flat(num_classes)
                }
            };
            out.push(LayerGeom {
                kind,
                input: shape,
                output: next,
            });
            shape = next;
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxOutput { .. }) => Ok(out),
            _ => Err(bad(
                self.layers.len().saturating_sub(1),
                "model must end with exactly one output layer".into(),
            )),
        }
    }

    /// Indices of layers that carry parameters, in order.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn to_string_arch(&self) -> String {
        self.layers
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |t: &str| -> Result<usize> {
            t.parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad layer token `{s}`")))
        };
        let paren = |t: &str| -> Result<usize> {
            let inner = t
                .strip_prefix('(')
                .and_then(|t| t.strip_suffix(')'))
                .ok_or_else(|| Error::invalid(format!("bad layer token `{s}`")))?;
            num(inner)
        };
        match s.chars().next() {
            Some('C') => {
                let rest = &s[1..];
                let open = rest
                    .find('(')
                    .ok_or_else(|| Error::invalid(format!("bad layer token `{s}`")))?;
                Ok(LayerSpec::Conv2d {
                    out_channels: num(&rest[..open])?,
                    kernel_size: paren(&rest[open..])?,
                })
            }
            Some('P') => Ok(LayerSpec::MaxPool {
                window: paren(&s[1..])?,
            }),
            Some('F') => Ok(LayerSpec::FullyConnected {
                out_features: num(&s[1..])?,
            }),
            Some('O') => Ok(LayerSpec::SoftmaxOutput {
                num_classes: num(&s[1..])?,
            }),
            Some('R') if s == "R" => Ok(LayerSpec::ReLU),
            _ => Err(Error::invalid(format!("bad layer token `{s}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_mini_geometry_at_8x8() {
        let spec = ModelSpec::named("lenet-mini", (1, 8, 8), 4).unwrap();
        let geo = spec.geometry().unwrap();
        assert_eq!(geo[0].weight_shape(), Some(vec![4, 1, 3, 3]));
        assert_eq!(geo[2].output, ActShape::Spatial { c: 4, h: 3, w: 3 });
        assert_eq!(geo[5].output, ActShape::Spatial { c: 8, h: 1, w: 1 });
        assert_eq!(geo[6].weight_shape(), Some(vec![32, 8]));
        assert_eq!(spec.param_layers(), vec![0, 3, 6, 8]);
        assert_eq!(spec.to_string_arch(), "C4(3)-R-P(2)-C8(3)-R-P(2)-F32-R-O4");
    }

    #[test]
    fn lenet_mini_geometry_at_16x16() {
        let spec = ModelSpec::named("lenet-mini", (1, 16, 16), 4).unwrap();
        let geo = spec.geometry().unwrap();
        // 16 -> 14 -> 7 -> 5 -> 3 (partial window)
        assert_eq!(geo[5].output, ActShape::Spatial { c: 8, h: 3, w: 3 });
        assert_eq!(geo[6].weight_shape(), Some(vec![32, 72]));
    }

    #[test]
    fn rejects_off_by_one_specs() {
        let cases: &[((usize, usize, usize), &str, usize)] = &[
            ((1, 2, 2), "C1(3)-O2", 2),    // kernel larger than input
            ((1, 3, 4), "C1(4)-O2", 2),    // kernel one past the height
            ((1, 8, 8), "F4-C1(3)-O2", 2), // conv after flatten
            ((1, 8, 8), "F4-P(2)-O2", 2),  // pool after flatten
            ((1, 8, 8), "F4-O3", 2),       // class count disagrees
            ((1, 8, 8), "O2-F4", 2),       // output not last
            ((1, 8, 8), "O2-O2", 2),       // output twice
            ((1, 8, 8), "F4-R", 2),        // no output
            ((1, 8, 8), "C0(3)-O2", 2),    // zero channels
            ((1, 8, 8), "C2(0)-O2", 2),    // zero kernel
            ((1, 8, 8), "P(0)-O2", 2),     // zero window
            ((1, 8, 8), "F0-O2", 2),       // zero width
            ((0, 8, 8), "F4-O2", 2),       // zero channels in input
            ((1, 8, 8), "C1(9)-O2", 2),    // kernel one past the edge
        ];
        for &(shape, arch, k) in cases {
            let layers: Result<Vec<LayerSpec>> = arch.split('-').map(str::parse).collect();
            let ok = layers.and_then(|l| ModelSpec::new(shape, l, k));
            assert!(ok.is_err(), "accepted malformed {arch} on {shape:?}");
        }
        assert!(ModelSpec::parse((1, 8, 8), "C1(8)-O2").is_ok());
    }

    #[test]
    fn error_names_layer() {
        let err = ModelSpec::parse((1, 4, 4), "C2(3)-R-C2(3)-O2").unwrap_err();
        assert!(matches!(err, Error::LayerShape { layer: 2, .. }), "{err}");
    }
}
