use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convolution window geometry. Per-axis arrays are ordered `[h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl ConvGeometry {
    /// Square kernel with equal stride and padding on both axes.
    pub fn square(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel: [kernel; 2],
            stride: [stride; 2],
            padding: [padding; 2],
        }
    }

    /// Output spatial extent `(in + 2p − k)/s + 1` per axis. The division
    /// must be exact and the result positive.
    pub fn output_extent(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Geometry(format!("zero channel count in {self:?}")));
        }
        let axis = |i: usize, extent: usize| -> Result<usize> {
            let (k, s, p) = (self.kernel[i], self.stride[i], self.padding[i]);
            if k == 0 || s == 0 {
                return Err(Error::Geometry(format!(
                    "kernel and stride must be positive, got k={k} s={s}"
                )));
            }
            let span = extent + 2 * p;
            if k > span {
                return Err(Error::Geometry(format!(
                    "kernel {k} exceeds padded extent {span}"
                )));
            }
            if !(span - k).is_multiple_of(s) {
                return Err(Error::Geometry(format!(
                    "({extent} + 2*{p} - {k}) / {s} + 1 is not an integer"
                )));
            }
            Ok((span - k) / s + 1)
        };
        Ok((axis(0, in_h)?, axis(1, in_w)?))
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel[0] * self.kernel[1]
    }
}
