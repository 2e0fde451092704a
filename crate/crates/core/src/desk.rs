//! Reference architectures for small images: a teacher and a much thinner
//! student of the same depth whose feature maps differ in channels.
//!
//! Both feature maps are the raw output of the last convolution; its
//! rectifier opens the classifier. Rectifying after pooling computes the
//! same function as pooling after rectifying.

use crate::nn::{Activation, Layer, NetworkSpec};

/// Conv blocks 16 → 32 → 32 → 64 with one pool; 16×16 inputs give
/// 64×6×6 feature maps.
pub fn teacher(input: [usize; 3], classes: usize) -> NetworkSpec {
    NetworkSpec {
        name: "desk-teacher".into(),
        input,
        generator: vec![
            Layer::conv(16, 3, 1, Activation::Relu),
            Layer::pool2(),
            Layer::conv(32, 3, 1, Activation::Relu),
            Layer::conv(32, 3, 1, Activation::Relu),
            Layer::conv(64, 3, 0, Activation::None),
        ],
        classifier: vec![
            Layer::Relu,
            Layer::pool2(),
            Layer::Flatten,
            Layer::dense(64, Activation::Relu),
            Layer::dense(classes, Activation::None),
        ],
    }
}

/// Conv blocks 4 → 8 → 8 → 16 laid out like the teacher; 16×16 inputs
/// give 16×6×6 maps.
pub fn student(input: [usize; 3], classes: usize) -> NetworkSpec {
    NetworkSpec {
        name: "desk-student".into(),
        input,
        generator: vec![
            Layer::conv(4, 3, 1, Activation::Relu),
            Layer::pool2(),
            Layer::conv(8, 3, 1, Activation::Relu),
            Layer::conv(8, 3, 1, Activation::Relu),
            Layer::conv(16, 3, 0, Activation::None),
        ],
        classifier: vec![
            Layer::Relu,
            Layer::pool2(),
            Layer::Flatten,
            Layer::dense(classes, Activation::None),
        ],
    }
}
