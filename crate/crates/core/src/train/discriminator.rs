use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_param, Bound, NetworkState, Part};
use crate::rng;
use crate::tensor::{ConvGeometry, NoGrad, Ops, Real, Tensor};

/// Conv 3×3 (padding 1) + ReLU + 2×2 max-pool + dense to one sigmoid unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// `[C, H, W]` of the student feature maps it reads.
    pub input: [usize; 3],
    pub channels: usize,
}

impl DiscriminatorSpec {
    fn conv(&self) -> ConvGeometry {
        ConvGeometry::square(self.input[0], self.channels, 3, 1, 1)
    }

    /// Spatial extent after pooling; a 1-pixel map skips the pool.
    fn pooled(&self) -> (usize, usize, bool) {
        let [_, h, w] = self.input;
        if h >= 2 && w >= 2 {
            (h / 2, w / 2, true)
        } else {
            (h, w, false)
        }
    }

    fn features(&self) -> usize {
        let (h, w, _) = self.pooled();
        self.channels * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) || self.channels == 0 {
            return Err(Error::Spec(format!("degenerate discriminator {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub state: NetworkState<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn init(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let g = spec.conv();
        let mut r = rng::seeded(seed);
        let f = spec.features();
        let params = vec![
            init_param("discriminator.conv.weight".into(), Part::Generator, vec![g.out_channels, g.in_channels, 3, 3], g.patch_len(), false, &mut r)?,
            init_param("discriminator.conv.bias".into(), Part::Generator, vec![g.out_channels], g.patch_len(), true, &mut r)?,
            init_param("discriminator.dense.weight".into(), Part::Classifier, vec![f, 1], f, false, &mut r)?,
            init_param("discriminator.dense.bias".into(), Part::Classifier, vec![1], f, true, &mut r)?,
        ];
        Ok(Discriminator {
            spec,
            state: NetworkState { params },
        })
    }

    pub fn from_parts(spec: DiscriminatorSpec, state: NetworkState<T>) -> Result<Self> {
        let fresh = Self::init(spec, 0)?;
        let ok = fresh.state.params.len() == state.params.len()
            && fresh
                .state
                .params
                .iter()
                .zip(&state.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !ok {
            return Err(Error::Spec(format!("discriminator parameters do not match {spec:?}")));
        }
        Ok(Discriminator { spec, state })
    }

    pub fn bind<O: Ops<T>>(&self, ops: &mut O) -> Bound<O::Value> {
        self.state.bind(ops)
    }

    /// Probability per sample, `[N, 1]`, that each map is a teacher map.
    pub fn forward<O: Ops<T>>(&self, ops: &mut O, bound: &Bound<O::Value>, maps: &O::Value) -> Result<O::Value> {
        let shape = ops.value(maps).shape();
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(Error::shape(
                "discriminator",
                format!("expected maps [N, {:?}], got {shape:?}", self.spec.input),
            ));
        }
        let [cw, cb, dw, db] = bound.values() else {
            unreachable!("discriminator binds four parameters")
        };
        let h = ops.conv2d(maps, cw, cb, self.spec.conv())?;
        let h = ops.relu(&h)?;
        let h = if self.spec.pooled().2 { ops.max_pool2d(&h, 2, 2)? } else { h };
        let h = ops.flatten(&h)?;
        let z = ops.dense(&h, dw, db)?;
        ops.sigmoid(&z)
    }

    pub fn probabilities(&self, maps: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ops = NoGrad::unchecked();
        let bound = self.bind(&mut ops);
        self.forward(&mut ops, &bound, maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_are_probabilities_per_sample() {
        let spec = DiscriminatorSpec {
            input: [16, 4, 4],
            channels: 16,
        };
        let d = Discriminator::<f64>::init(spec, 1).unwrap();
        let maps = Tensor::from_vec([3, 16, 4, 4], (0..768).map(|i| (i % 7) as f64 - 3.0).collect()).unwrap();
        let p = d.probabilities(&maps).unwrap();
        assert_eq!(p.shape(), &[3, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(d.probabilities(&Tensor::zeros([1, 8, 4, 4]).unwrap()).is_err());
    }

    #[test]
    fn single_pixel_maps_skip_pooling() {
        let spec = DiscriminatorSpec {
            input: [4, 1, 1],
            channels: 2,
        };
        let d = Discriminator::<f64>::init(spec, 1).unwrap();
        assert_eq!(d.probabilities(&Tensor::ones([2, 4, 1, 1]).unwrap()).unwrap().shape(), &[2, 1]);
    }
}
