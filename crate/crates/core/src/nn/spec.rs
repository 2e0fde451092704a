use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvGeometry;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    /// Standalone rectifier, for stacks whose feature map is taken before
    /// the last activation.
    Relu,
    Flatten,
    Dense {
        out_features: usize,
        #[serde(default)]
        activation: Activation,
    },
}

fn one() -> usize {
    1
}

impl Layer {
    pub fn conv(out_channels: usize, kernel: usize, padding: usize, activation: Activation) -> Self {
        Layer::Conv {
            out_channels,
            kernel,
            stride: 1,
            padding,
            activation,
        }
    }

    pub fn dense(out_features: usize, activation: Activation) -> Self {
        Layer::Dense {
            out_features,
            activation,
        }
    }

    pub fn pool2() -> Self {
        Layer::MaxPool { window: 2, stride: 2 }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Dense { .. })
    }
}

/// Activation shape between layers (batch axis excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Map([usize; 3]),
    Flat(usize),
}

impl ActShape {
    pub fn numel(self) -> usize {
        match self {
            ActShape::Map([c, h, w]) => c * h * w,
            ActShape::Flat(f) => f,
        }
    }
}

/// Which side of the generator/classifier split a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Generator,
    Classifier,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Generator => "generator",
            Part::Classifier => "classifier",
        }
    }
}

/// Parameter tensor expected by a spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub part: Part,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

/// A network split into a convolutional generator, whose output is the
/// feature map, and a classifier producing logits from that map.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub generator: Vec<Layer>,
    pub classifier: Vec<Layer>,
}

pub(crate) fn conv_geometry(in_channels: usize, layer: &Layer) -> Option<ConvGeometry> {
    match *layer {
        Layer::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => Some(ConvGeometry::square(in_channels, out_channels, kernel, stride, padding)),
        _ => None,
    }
}

fn next_shape(layer: &Layer, input: ActShape) -> Result<ActShape> {
    match (layer, input) {
        (Layer::Conv { .. }, ActShape::Map([c, h, w])) => {
            let g = conv_geometry(c, layer).unwrap();
            let (ho, wo) = g.output_extent(h, w)?;
            Ok(ActShape::Map([g.out_channels, ho, wo]))
        }
        (Layer::MaxPool { window, stride }, ActShape::Map([c, h, w])) => {
            if *window == 0 || *stride == 0 || *window > h || *window > w {
                return Err(Error::Geometry(format!(
                    "empty pooling window {window}/{stride} on {h}x{w}"
                )));
            }
            Ok(ActShape::Map([c, (h - window) / stride + 1, (w - window) / stride + 1]))
        }
        (Layer::Relu, s) => Ok(s),
        (Layer::Flatten, s) => Ok(ActShape::Flat(s.numel())),
        (Layer::Dense { out_features, .. }, ActShape::Flat(_)) => {
            if *out_features == 0 {
                return Err(Error::Spec("dense layer with zero outputs".into()));
            }
            Ok(ActShape::Flat(*out_features))
        }
        (layer, shape) => Err(Error::Spec(format!("layer {layer:?} cannot consume {shape:?}"))),
    }
}

impl NetworkSpec {
    /// Shape after each generator layer, then after each classifier layer.
    fn trace(&self) -> Result<(Vec<ActShape>, Vec<ActShape>)> {
        if self.input.contains(&0) {
            return Err(Error::Spec(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.generator.is_empty() || self.classifier.is_empty() {
            return Err(Error::Spec(format!(
                "{}: generator and classifier must both be non-empty",
                self.name
            )));
        }
        let mut cur = ActShape::Map(self.input);
        let mut gen = Vec::new();
        for layer in &self.generator {
            if matches!(layer, Layer::Flatten | Layer::Dense { .. }) {
                return Err(Error::Spec(format!(
                    "{}: generator must be convolutional, found {layer:?}",
                    self.name
                )));
            }
            cur = next_shape(layer, cur)?;
            gen.push(cur);
        }
        let mut cls = Vec::new();
        for layer in &self.classifier {
            cur = next_shape(layer, cur)?;
            cls.push(cur);
        }
        match cur {
            ActShape::Flat(k) if k >= 2 => Ok((gen, cls)),
            other => Err(Error::Spec(format!(
                "{}: classifier must end in at least two logits, ends in {other:?}",
                self.name
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trace().map(|_| ())
    }

    /// `[C, H, W]` of the generator's output feature map.
    pub fn feature_map_shape(&self) -> Result<[usize; 3]> {
        let (gen, _) = self.trace()?;
        match gen.last() {
            Some(ActShape::Map(s)) => Ok(*s),
            _ => unreachable!("generator layers always produce maps"),
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        let (_, cls) = self.trace()?;
        Ok(cls.last().unwrap().numel())
    }

    /// Every parameter the spec needs, in binding order.
    pub fn param_slots(&self) -> Result<Vec<ParamSlot>> {
        self.validate()?;
        let mut slots = Vec::new();
        let mut cur = ActShape::Map(self.input);
        let parts = [(Part::Generator, &self.generator), (Part::Classifier, &self.classifier)];
        for (part, layers) in parts {
            for (i, layer) in layers.iter().enumerate() {
                let name = format!("{}.{i}", part.as_str());
                match (layer, cur) {
                    (Layer::Conv { .. }, ActShape::Map([c, _, _])) => {
                        let g = conv_geometry(c, layer).unwrap();
                        let fan_in = g.patch_len();
                        slots.push(ParamSlot {
                            name: format!("{name}.weight"),
                            part,
                            shape: vec![g.out_channels, c, g.kernel[0], g.kernel[1]],
                            fan_in,
                            is_bias: false,
                        });
                        slots.push(ParamSlot {
                            name: format!("{name}.bias"),
                            part,
                            shape: vec![g.out_channels],
                            fan_in,
                            is_bias: true,
                        });
                    }
                    (Layer::Dense { out_features, .. }, ActShape::Flat(f)) => {
                        slots.push(ParamSlot {
                            name: format!("{name}.weight"),
                            part,
                            shape: vec![f, *out_features],
                            fan_in: f,
                            is_bias: false,
                        });
                        slots.push(ParamSlot {
                            name: format!("{name}.bias"),
                            part,
                            shape: vec![*out_features],
                            fan_in: f,
                            is_bias: true,
                        });
                    }
                    _ => {}
                }
                cur = next_shape(layer, cur)?;
            }
        }
        Ok(slots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkSpec {
        NetworkSpec {
            name: "small".into(),
            input: [1, 8, 8],
            generator: vec![Layer::conv(4, 3, 1, Activation::Relu), Layer::pool2()],
            classifier: vec![Layer::Flatten, Layer::dense(3, Activation::None)],
        }
    }

    #[test]
    fn shapes_follow_formulas() {
        let s = small();
        assert_eq!(s.feature_map_shape().unwrap(), [4, 4, 4]);
        assert_eq!(s.num_classes().unwrap(), 3);
        let slots = s.param_slots().unwrap();
        let shapes: Vec<_> = slots.iter().map(|p| p.shape.clone()).collect();
        assert_eq!(shapes, vec![vec![4, 1, 3, 3], vec![4], vec![64, 3], vec![3]]);
        assert_eq!(slots[0].name, "generator.0.weight");
        assert_eq!(slots[2].name, "classifier.1.weight");
    }

    #[test]
    fn rejects_incompatible_stack() {
        let mut s = small();
        s.generator.push(Layer::dense(3, Activation::None));
        assert!(s.validate().is_err());

        let mut s = small();
        s.classifier = vec![Layer::dense(3, Activation::None)];
        assert!(s.validate().is_err());
    }
}
