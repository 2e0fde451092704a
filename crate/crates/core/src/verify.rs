//! Numerical self-checks: the convolution oracle comparison, the
//! finite-difference sweep over every primitive and loss, and the exhaustive
//! regressor-geometry sweep.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, discriminator_loss, generator_adversarial_loss, kd_loss, mse_feature_loss, student_total_loss,
    KdSettings,
};
use crate::regressor::solve_regressor_geometry;
use crate::rng;
use crate::tensor::gradcheck::{check_gradients, ScalarFn};
use crate::tensor::{kernels, ConvGeometry, Ops, Tape, Tensor, Var};

/// Direct evaluation of the convolution sum, one output element at a time.
pub fn conv2d_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: &ConvGeometry) -> Result<Tensor<f64>> {
    let &[n, c, h, wd] = x.shape() else {
        return Err(Error::shape("conv2d_reference", format!("input {:?}", x.shape())));
    };
    let (ho, wo) = g.output_extent(h, wd)?;
    let o = g.out_channels;
    let [kh, kw] = g.kernel;
    let mut out = vec![0.0; n * o * ho * wo];
    for s in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * g.stride[0] + u) as isize - g.padding[0] as isize;
                                let xx = (j * g.stride[1] + v) as isize - g.padding[1] as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xi = ((s * c + ic) * h + y as usize) * wd + xx as usize;
                                let wi = ((oc * c + ic) * kh + u) * kw + v;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((s * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec([n, o, ho, wo], out)
}

fn uniform(r: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape matches length")
}

/// A random valid geometry with its input, filters and bias.
pub fn random_conv_case(r: &mut rng::Rng) -> (ConvGeometry, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    loop {
        let kernel = [r.random_range(1..=5), r.random_range(1..=5)];
        let stride = [r.random_range(1..=3), r.random_range(1..=3)];
        let padding = [r.random_range(0..=2), r.random_range(0..=2)];
        let out = [r.random_range(1..=6), r.random_range(1..=6)];
        let extent: Vec<isize> = (0..2)
            .map(|a| ((out[a] - 1) * stride[a] + kernel[a]) as isize - 2 * padding[a] as isize)
            .collect();
        if extent.iter().any(|&e| e < 1) {
            continue;
        }
        let g = ConvGeometry {
            in_channels: r.random_range(1..=4),
            out_channels: r.random_range(1..=4),
            kernel,
            stride,
            padding,
        };
        let n = r.random_range(1..=3);
        let x = uniform(r, &[n, g.in_channels, extent[0] as usize, extent[1] as usize], -1.0, 1.0);
        let w = uniform(r, &[g.out_channels, g.in_channels, kernel[0], kernel[1]], -1.0, 1.0);
        let b = uniform(r, &[g.out_channels], -1.0, 1.0);
        return (g, x, w, b);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvCheck {
    pub geometries: usize,
    pub max_abs_error: f64,
}

/// Compares the fast convolution with [`conv2d_reference`] on `count`
/// random geometries.
pub fn check_conv(count: usize, seed: u64) -> Result<ConvCheck> {
    let mut r = rng::seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (g, x, w, b) = random_conv_case(&mut r);
        let fast = kernels::conv2d(&x, &w, &b, &g)?;
        let slow = conv2d_reference(&x, &w, &b, &g)?;
        worst = worst.max(fast.max_abs_diff(&slow)?);
    }
    Ok(ConvCheck {
        geometries: count,
        max_abs_error: worst,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCase {
    pub name: &'static str,
    pub max_relative_error: f64,
}

/// Every name [`gradient_suite`] reports, primitives first.
pub const GRADIENT_CASES: [&str; 24] = [
    "conv2d",
    "dense",
    "relu",
    "max_pool2d",
    "reshape",
    "softmax",
    "log_softmax",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "affine",
    "log",
    "square",
    "sum",
    "mean",
    "pick",
    "clamp",
    "ce",
    "kd",
    "mse_fm",
    "adv_g",
    "adv_d",
    "student_total",
];

/// Sum of `y ⊙ r` for a fixed random `r`, so every output element carries
/// weight in the checked scalar.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(&y).shape().to_vec();
    let r = uniform(&mut rng::seeded(seed), &shape, 0.5, 1.5);
    let r = t.constant(r);
    let p = t.mul(&y, &r)?;
    t.sum(&p)
}

/// Values bounded away from zero, so rectifier kinks stay out of reach of
/// the finite-difference step.
fn off_kink(r: &mut rng::Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(r, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values spaced well beyond the step, so window maxima are unique.
fn distinct(r: &mut rng::Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    Tensor::from_vec(shape.to_vec(), vals).expect("shape matches length")
}

fn run(name: &'static str, build: &ScalarFn, inputs: &[Tensor<f64>], eps: f64) -> Result<GradientCase> {
    Ok(GradientCase {
        name,
        max_relative_error: check_gradients(build, inputs, eps)?,
    })
}

/// Central-difference check of every primitive and loss, in
/// [`GRADIENT_CASES`] order.
pub fn gradient_suite(eps: f64, seed: u64) -> Result<Vec<GradientCase>> {
    let mut r = rng::seeded(seed);
    let r = &mut r;
    let labels = vec![2usize, 0, 1];
    let mut out = Vec::with_capacity(GRADIENT_CASES.len());

    let g = ConvGeometry {
        in_channels: 2,
        out_channels: 3,
        kernel: [3, 2],
        stride: [2, 1],
        padding: [1, 0],
    };
    out.push(run(
        "conv2d",
        &move |t, v| {
            let y = t.conv2d(&v[0], &v[1], &v[2], g)?;
            project(t, y, 1)
        },
        &[uniform(r, &[2, 2, 5, 4], -1.0, 1.0), uniform(r, &[3, 2, 3, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
        eps,
    )?);
    out.push(run(
        "dense",
        &|t, v| {
            let y = t.dense(&v[0], &v[1], &v[2])?;
            project(t, y, 2)
        },
        &[uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)],
        eps,
    )?);
    out.push(run(
        "relu",
        &|t, v| {
            let y = t.relu(&v[0])?;
            project(t, y, 3)
        },
        &[off_kink(r, &[3, 7])],
        eps,
    )?);
    out.push(run(
        "max_pool2d",
        &|t, v| {
            let y = t.max_pool2d(&v[0], 2, 2)?;
            project(t, y, 4)
        },
        &[distinct(r, &[2, 2, 4, 6])],
        eps,
    )?);
    out.push(run(
        "reshape",
        &|t, v| {
            let y = t.reshape(&v[0], &[4, 6])?;
            project(t, y, 5)
        },
        &[uniform(r, &[2, 3, 4], -1.0, 1.0)],
        eps,
    )?);
    out.push(run(
        "softmax",
        &|t, v| {
            let y = t.softmax(&v[0])?;
            project(t, y, 6)
        },
        &[uniform(r, &[3, 5], -2.0, 2.0)],
        eps,
    )?);
    out.push(run(
        "log_softmax",
        &|t, v| {
            let y = t.log_softmax(&v[0])?;
            project(t, y, 7)
        },
        &[uniform(r, &[3, 5], -2.0, 2.0)],
        eps,
    )?);
    out.push(run(
        "sigmoid",
        &|t, v| {
            let y = t.sigmoid(&v[0])?;
            project(t, y, 8)
        },
        &[uniform(r, &[4, 3], -3.0, 3.0)],
        eps,
    )?);
    let pair = [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)];
    out.push(run(
        "add",
        &|t, v| {
            let y = t.add(&v[0], &v[1])?;
            project(t, y, 9)
        },
        &pair,
        eps,
    )?);
    out.push(run(
        "sub",
        &|t, v| {
            let y = t.sub(&v[0], &v[1])?;
            project(t, y, 10)
        },
        &pair,
        eps,
    )?);
    out.push(run(
        "mul",
        &|t, v| {
            let y = t.mul(&v[0], &v[1])?;
            project(t, y, 11)
        },
        &pair,
        eps,
    )?);
    out.push(run(
        "affine",
        &|t, v| {
            let y = t.affine(&v[0], -1.7, 0.3)?;
            project(t, y, 12)
        },
        &[uniform(r, &[3, 4], -1.0, 1.0)],
        eps,
    )?);
    out.push(run(
        "log",
        &|t, v| {
            let y = t.log(&v[0])?;
            project(t, y, 13)
        },
        &[uniform(r, &[3, 4], 0.2, 2.0)],
        eps,
    )?);
    out.push(run(
        "square",
        &|t, v| {
            let y = t.square(&v[0])?;
            project(t, y, 14)
        },
        &[uniform(r, &[3, 4], -1.0, 1.0)],
        eps,
    )?);
    out.push(run("sum", &|t, v| t.sum(&v[0]), &[uniform(r, &[3, 4], -1.0, 1.0)], eps)?);
    out.push(run("mean", &|t, v| t.mean(&v[0]), &[uniform(r, &[3, 4], -1.0, 1.0)], eps)?);
    let picks = labels.clone();
    out.push(run(
        "pick",
        &move |t, v| {
            let y = t.pick(&v[0], &picks)?;
            project(t, y, 15)
        },
        &[uniform(r, &[3, 4], -1.0, 1.0)],
        eps,
    )?);
    let clamp_in = uniform(r, &[4, 5], -1.0, 1.0).map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 0.5 } else { v });
    out.push(run(
        "clamp",
        &|t, v| {
            let y = t.clamp(&v[0], -0.5, 0.5)?;
            project(t, y, 16)
        },
        &[clamp_in],
        eps,
    )?);

    let ce_labels = labels.clone();
    out.push(run(
        "ce",
        &move |t, v| Ok(cross_entropy(t, &v[0], &ce_labels)?.value),
        &[uniform(r, &[3, 4], -2.0, 2.0)],
        eps,
    )?);
    let teacher_logits = uniform(r, &[3, 4], -3.0, 3.0);
    let kd_labels = labels.clone();
    let settings = KdSettings {
        temperature: 4.0,
        teacher_weight: 0.9,
        scale_by_t2: true,
    };
    out.push(run(
        "kd",
        &move |t, v| Ok(kd_loss(t, &v[0], &teacher_logits, &kd_labels, settings)?.value),
        &[uniform(r, &[3, 4], -2.0, 2.0)],
        eps,
    )?);
    let target = uniform(r, &[2, 3, 2, 2], -1.0, 1.0);
    let mse_target = target.clone();
    out.push(run(
        "mse_fm",
        &move |t, v| Ok(mse_feature_loss(t, &mse_target, &v[0])?.value),
        &[uniform(r, &[2, 3, 2, 2], -1.0, 1.0)],
        eps,
    )?);
    out.push(run(
        "adv_g",
        &|t, v| Ok(generator_adversarial_loss(t, &v[0])?.value),
        &[uniform(r, &[5, 1], 0.1, 0.9)],
        eps,
    )?);
    out.push(run(
        "adv_d",
        &|t, v| Ok(discriminator_loss(t, &v[0], &v[1])?.value),
        &[uniform(r, &[5, 1], 0.1, 0.9), uniform(r, &[5, 1], 0.1, 0.9)],
        eps,
    )?);
    let total_labels = labels;
    out.push(run(
        "student_total",
        &move |t, v| {
            let task = cross_entropy(t, &v[0], &total_labels)?;
            let d = t.sigmoid(&v[1])?;
            let adv = generator_adversarial_loss(t, &d)?;
            let mse = mse_feature_loss(t, &target, &v[2])?;
            Ok(student_total_loss(t, &task, &adv, &mse, 0.6, 0.5)?.value)
        },
        &[
            uniform(r, &[3, 4], -2.0, 2.0),
            uniform(r, &[3, 1], -2.0, 2.0),
            uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
        ],
        eps,
    )?);
    Ok(out)
}

/// Relative error the checker reports for a square whose backward rule is
/// deliberately wrong (`3x` instead of `2x`); a working checker reports a
/// large value here.
pub fn broken_backward_error(eps: f64) -> Result<f64> {
    let x = Tensor::from_vec([4], vec![0.3, -0.7, 1.1, 0.5])?;
    check_gradients(
        &|t, v| {
            let value = t.value(&v[0]).map(|a| a * a);
            let y = t.custom("broken_square", &[v[0]], value, |x, dy| {
                let g = x[0].data().iter().zip(dy.data()).map(|(a, d)| 3.0 * a * d).collect();
                vec![Tensor::from_vec(x[0].shape().to_vec(), g).expect("same shape")]
            })?;
            t.sum(&y)
        },
        &[x],
        eps,
    )
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeometrySweep {
    pub cases: usize,
    pub feasible: usize,
    pub rejected: usize,
    /// Cases where the solver disagreed with the direct feasibility test.
    pub mismatches: Vec<String>,
}

/// Every teacher/student extent in `1..=max_extent` with strides 1–2 and
/// padding 0–1, checked against a direct feasibility test.
pub fn sweep_regressor_geometry(max_extent: usize) -> GeometrySweep {
    let mut sweep = GeometrySweep::default();
    for mt in 1..=max_extent {
        for ml in 1..=max_extent {
            for s in 1..=2usize {
                for p in 0..=1usize {
                    sweep.cases += 1;
                    let span = (mt + 2 * p) as isize;
                    let k = span - (s * (ml - 1)) as isize;
                    let feasible = k >= 1;
                    match solve_regressor_geometry([3, mt, mt], [2, ml, ml], [s, s], [p, p]) {
                        Ok(spec) if feasible => {
                            let [kh, kw] = spec.kernel;
                            let exact = |kk: usize| (mt + 2 * p - kk).is_multiple_of(s) && (mt + 2 * p - kk) / s + 1 == ml;
                            if kh as isize != k || kw as isize != k || !exact(kh) || !exact(kw) {
                                sweep.mismatches.push(format!("M_t={mt} M_s={ml} S={s} P={p}: kernel {:?}", spec.kernel));
                            } else {
                                sweep.feasible += 1;
                            }
                        }
                        Ok(spec) => sweep
                            .mismatches
                            .push(format!("M_t={mt} M_s={ml} S={s} P={p}: accepted infeasible kernel {:?}", spec.kernel)),
                        Err(_) if !feasible => sweep.rejected += 1,
                        Err(e) => sweep.mismatches.push(format!("M_t={mt} M_s={ml} S={s} P={p}: {e}")),
                    }
                }
            }
        }
    }
    sweep
}
