use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Random horizontal flips followed by zero-padded random crops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub horizontal_flip_probability: f64,
    pub crop_padding: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            horizontal_flip_probability: 0.5,
            crop_padding: 2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            enabled: false,
            horizontal_flip_probability: 0.0,
            crop_padding: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.horizontal_flip_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "horizontal_flip_probability must lie in [0, 1], got {p}"
            )));
        }
        Ok(())
    }
}

/// Flips one `[C, H, W]` image if asked, zero-pads it by `pad` and crops the
/// window whose top-left corner is `(dy, dx)` in the padded frame.
pub fn augment_sample<T: Real>(
    image: &[T],
    [c, h, w]: [usize; 3],
    flip: bool,
    pad: usize,
    (dy, dx): (usize, usize),
    out: &mut [T],
) {
    assert!(dy <= 2 * pad && dx <= 2 * pad, "crop offset outside padded frame");
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let sy = (y + dy) as isize - pad as isize;
                let sx = (x + dx) as isize - pad as isize;
                dst[y * w + x] = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    T::zero()
                } else {
                    let sx = sx as usize;
                    let col = if flip { w - 1 - sx } else { sx };
                    plane[sy as usize * w + col]
                };
            }
        }
    }
}

/// Applies independent per-sample augmentation to `[N, C, H, W]` images.
/// An enabled config draws three values per sample whatever its settings;
/// a disabled one draws nothing.
pub fn augment_batch<T: Real>(images: &Tensor<T>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor<T>> {
    cfg.validate()?;
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::shape("augment_batch", format!("expected [N, C, H, W], got {shape:?}")));
    }
    if !cfg.enabled {
        return Ok(images.clone());
    }
    let (n, chw) = (shape[0], [shape[1], shape[2], shape[3]]);
    let per = chw.iter().product::<usize>();
    let pad = cfg.crop_padding;
    let mut out = vec![T::zero(); images.numel()];
    for i in 0..n {
        let flip = rng.random::<f64>() < cfg.horizontal_flip_probability;
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        augment_sample(
            &images.data()[i * per..(i + 1) * per],
            chw,
            flip,
            pad,
            (dy, dx),
            &mut out[i * per..(i + 1) * per],
        );
    }
    Tensor::from_vec(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn batch(seed: u64) -> Tensor<f64> {
        use rand::Rng as _;
        let mut r = rng::seeded(seed);
        let data = (0..2 * 3 * 5 * 4).map(|_| r.random::<f64>()).collect();
        Tensor::from_vec([2, 3, 5, 4], data).unwrap()
    }

    #[test]
    fn identity_config_is_noop() {
        let x = batch(1);
        let cfg = AugmentConfig {
            enabled: true,
            horizontal_flip_probability: 0.0,
            crop_padding: 0,
        };
        let y = augment_batch(&x, &cfg, &mut rng::seeded(5)).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn flip_is_involution() {
        let x = batch(2);
        let cfg = AugmentConfig {
            enabled: true,
            horizontal_flip_probability: 1.0,
            crop_padding: 0,
        };
        let once = augment_batch(&x, &cfg, &mut rng::seeded(1)).unwrap();
        assert!(!once.bit_eq(&x));
        let twice = augment_batch(&once, &cfg, &mut rng::seeded(2)).unwrap();
        assert!(twice.bit_eq(&x));
    }

    #[test]
    fn crop_offset_shifts_with_zero_fill() {
        let img = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        augment_sample(&img, [1, 2, 2], false, 1, (0, 0), &mut out);
        assert_eq!(out, [0.0, 0.0, 0.0, 1.0]);
        augment_sample(&img, [1, 2, 2], false, 1, (1, 1), &mut out);
        assert_eq!(out, img);
        augment_sample(&img, [1, 2, 2], true, 1, (1, 1), &mut out);
        assert_eq!(out, [2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn invalid_probability_rejected() {
        let cfg = AugmentConfig {
            enabled: true,
            horizontal_flip_probability: 1.5,
            crop_padding: 0,
        };
        assert!(augment_batch(&batch(0), &cfg, &mut rng::seeded(0)).is_err());
    }

    proptest! {
        #[test]
        fn flip_preserves_pixel_multiset(seed in any::<u64>()) {
            let x = batch(seed);
            let mut out = vec![0.0; 60];
            augment_sample(&x.data()[..60], [3, 5, 4], true, 0, (0, 0), &mut out);
            let mut a = x.data()[..60].to_vec();
            a.sort_by(f64::total_cmp);
            out.sort_by(f64::total_cmp);
            prop_assert_eq!(a, out);
        }

        #[test]
        fn preserves_shape_and_range(seed in any::<u64>(), p in 0.0f64..=1.0, pad in 0usize..4) {
            let x = batch(seed);
            let cfg = AugmentConfig { enabled: true, horizontal_flip_probability: p, crop_padding: pad };
            let y = augment_batch(&x, &cfg, &mut rng::seeded(seed ^ 1)).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn deterministic_per_rng_state(seed in any::<u64>()) {
            let x = batch(seed);
            let cfg = AugmentConfig::default();
            let a = augment_batch(&x, &cfg, &mut rng::seeded(seed)).unwrap();
            let b = augment_batch(&x, &cfg, &mut rng::seeded(seed)).unwrap();
            prop_assert!(a.bit_eq(&b));
        }
    }
}
