//! Forward and backward kernels on plain tensors.
//!
//! The tape and the no-grad executor both call into these; nothing here
//! records history.

use super::{ConvGeometry, Real, Shape, Tensor};
use crate::error::{Error, Result};

fn expect_rank<T: Real>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- conv2d

fn check_conv<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<(usize, usize, usize, usize, usize)> {
    expect_rank("conv2d", x, 4)?;
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if c != g.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, geometry expects {}", g.in_channels),
        ));
    }
    let expected_w = [g.out_channels, g.in_channels, g.kernel[0], g.kernel[1]];
    if w.shape() != expected_w {
        return Err(Error::shape(
            "conv2d",
            format!("filters {:?} do not match geometry {expected_w:?}", w.shape()),
        ));
    }
    if b.shape() != [g.out_channels] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?}, expected [{}]", b.shape(), g.out_channels),
        ));
    }
    let (ho, wo) = g.output_extent(h, wd)?;
    Ok((n, h, wd, ho, wo))
}

/// Unfolds one `[C, H, W]` image into a `[C·kh·kw, Ho·Wo]` patch matrix.
fn im2col<T: Real>(img: &[T], h: usize, w: usize, g: &ConvGeometry, ho: usize, wo: usize, cols: &mut [T]) {
    let [kh, kw] = g.kernel;
    let [sh, sw] = g.stride;
    let [ph, pw] = g.padding;
    let plane = ho * wo;
    for c in 0..g.in_channels {
        let src = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`]: accumulates patch gradients into the image.
fn col2im<T: Real>(cols: &[T], h: usize, w: usize, g: &ConvGeometry, ho: usize, wo: usize, img: &mut [T]) {
    let [kh, kw] = g.kernel;
    let [sh, sw] = g.stride;
    let [ph, pw] = g.padding;
    let plane = ho * wo;
    for c in 0..g.in_channels {
        let dst = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    let (n, h, wd, ho, wo) = check_conv(x, w, b, g)?;
    let (o, plen, plane) = (g.out_channels, g.patch_len(), ho * wo);
    let img_len = g.in_channels * h * wd;
    let mut out = vec![T::zero(); n * o * plane];
    let mut cols = vec![T::zero(); plen * plane];
    for s in 0..n {
        im2col(&x.data()[s * img_len..(s + 1) * img_len], h, wd, g, ho, wo, &mut cols);
        let dst = &mut out[s * o * plane..(s + 1) * o * plane];
        for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(b.data()[oc]);
        }
        T::gemm(o, plen, plane, w.data(), false, &cols, false, T::one(), dst);
    }
    Ok(Tensor::from_parts(Shape(vec![n, o, ho, wo]), out))
}

/// Gradients of conv2d with respect to `(input, filters, bias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeometry,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let zero_bias = Tensor::zeros([g.out_channels])?;
    let (n, h, wd, ho, wo) = check_conv(x, w, &zero_bias, g)?;
    let (o, plen, plane) = (g.out_channels, g.patch_len(), ho * wo);
    if dy.shape() != [n, o, ho, wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {:?}, expected {:?}", dy.shape(), [n, o, ho, wo]),
        ));
    }
    let img_len = g.in_channels * h * wd;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); o];
    let mut cols = vec![T::zero(); plen * plane];
    let mut dcols = vec![T::zero(); plen * plane];
    for s in 0..n {
        let dy_s = &dy.data()[s * o * plane..(s + 1) * o * plane];
        for (oc, chunk) in dy_s.chunks(plane).enumerate() {
            db[oc] += chunk.iter().copied().sum::<T>();
        }
        im2col(&x.data()[s * img_len..(s + 1) * img_len], h, wd, g, ho, wo, &mut cols);
        T::gemm(o, plane, plen, dy_s, false, &cols, true, T::one(), &mut dw);
        T::gemm(plen, o, plane, w.data(), true, dy_s, false, T::zero(), &mut dcols);
        col2im(&dcols, h, wd, g, ho, wo, &mut dx[s * img_len..(s + 1) * img_len]);
    }
    Ok((
        Tensor::from_parts(x.shape_ref().clone(), dx),
        Tensor::from_parts(w.shape_ref().clone(), dw),
        Tensor::from_parts(Shape(vec![o]), db),
    ))
}

// ---------------------------------------------------------------- dense

fn check_dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    expect_rank("dense", x, 2)?;
    expect_rank("dense", w, 2)?;
    let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    if w.shape()[0] != f {
        return Err(Error::shape(
            "dense",
            format!("input {:?} incompatible with weights {:?}", x.shape(), w.shape()),
        ));
    }
    if b.shape() != [o] {
        return Err(Error::shape("dense", format!("bias {:?}, expected [{o}]", b.shape())));
    }
    Ok((n, f, o))
}

pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, o) = check_dense(x, w, b)?;
    let mut out: Vec<T> = b.data().iter().copied().cycle().take(n * o).collect();
    T::gemm(n, f, o, x.data(), false, w.data(), false, T::one(), &mut out);
    Ok(Tensor::from_parts(Shape(vec![n, o]), out))
}

pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f, o) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    if dy.shape() != [n, o] {
        return Err(Error::shape(
            "dense_backward",
            format!("upstream gradient {:?}, expected [{n}, {o}]", dy.shape()),
        ));
    }
    let mut dx = vec![T::zero(); n * f];
    let mut dw = vec![T::zero(); f * o];
    T::gemm(n, o, f, dy.data(), false, w.data(), true, T::zero(), &mut dx);
    T::gemm(f, n, o, x.data(), true, dy.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); o];
    for row in dy.data().chunks(o) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    Ok((
        Tensor::from_parts(x.shape_ref().clone(), dx),
        Tensor::from_parts(w.shape_ref().clone(), dw),
        Tensor::from_parts(Shape(vec![o]), db),
    ))
}

// ---------------------------------------------------------------- pooling

/// 2-D max pooling. Returns the output and, per output element, the flat
/// input index it was taken from. Ties go to the lowest flat index.
pub fn max_pool2d<T: Real>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank("max_pool2d", x, 4)?;
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::Geometry(format!(
            "empty pooling window: window {window}, stride {stride} on {h}x{w}"
        )));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(Shape(vec![n, c, ho, wo]), out), argmax))
}

pub fn max_pool2d_backward<T: Real>(input_shape: &Shape, argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = vec![T::zero(); input_shape.numel()];
    for (&src, &g) in argmax.iter().zip(dy.data()) {
        dx[src] += g;
    }
    Tensor::from_parts(input_shape.clone(), dx)
}

// ---------------------------------------------------------------- activations

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape_ref().clone(), data)
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_parts(y.shape_ref().clone(), data)
}

fn rows<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<usize> {
    expect_rank(op, x, 2)?;
    Ok(x.shape()[1])
}

/// Row-wise softmax of a `[N, K]` tensor.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = rows("softmax", x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    Ok(Tensor::from_parts(x.shape_ref().clone(), out))
}

pub fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let k = y.shape()[1];
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(k).zip(dy.data().chunks(k)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&s, &g)| s * (g - dot)));
    }
    Tensor::from_parts(y.shape_ref().clone(), dx)
}

/// Row-wise log-softmax of a `[N, K]` tensor.
pub fn log_softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let k = rows("log_softmax", x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    Ok(Tensor::from_parts(x.shape_ref().clone(), out))
}

pub fn log_softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let k = y.shape()[1];
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(k).zip(dy.data().chunks(k)) {
        let total: T = gr.iter().copied().sum();
        dx.extend(yr.iter().zip(gr).map(|(&l, &g)| g - l.exp() * total));
    }
    Tensor::from_parts(y.shape_ref().clone(), dx)
}

// ---------------------------------------------------------------- elementwise

pub fn zip_with<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape_ref().clone(), data))
}

/// Gathers `x[n, index[n]]` from a `[N, K]` tensor into shape `[N]`.
pub fn pick<T: Real>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let k = rows("pick", x)?;
    let n = x.shape()[0];
    if index.len() != n {
        return Err(Error::shape(
            "pick",
            format!("{} indices for {n} rows", index.len()),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for (row, &i) in x.data().chunks(k).zip(index) {
        if i >= k {
            return Err(Error::Label { label: i, classes: k });
        }
        out.push(row[i]);
    }
    Ok(Tensor::from_parts(Shape(vec![n]), out))
}

pub fn pick_backward<T: Real>(input_shape: &Shape, index: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let k = input_shape.dims()[1];
    let mut dx = vec![T::zero(); input_shape.numel()];
    for (row, (&i, &g)) in index.iter().zip(dy.data()).enumerate() {
        dx[row * k + i] = g;
    }
    Tensor::from_parts(input_shape.clone(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_patch() {
        let x = t(&[1, 1, 1, 1], &[3.5]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &w, &b, &ConvGeometry::square(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn conv_all_ones_sums_nine() {
        let x = Tensor::<f64>::ones([1, 1, 4, 4]).unwrap();
        let w = Tensor::<f64>::ones([1, 1, 3, 3]).unwrap();
        let b = Tensor::<f64>::zeros([1]).unwrap();
        let y = conv2d(&x, &w, &b, &ConvGeometry::square(1, 1, 3, 1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::ones([1, 2, 4, 4]).unwrap();
        let w = Tensor::<f64>::ones([1, 1, 3, 3]).unwrap();
        let b = Tensor::<f64>::zeros([1]).unwrap();
        let err = conv2d(&x, &w, &b, &ConvGeometry::square(1, 1, 3, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let zero_b = t(&[2], &[0.0, 0.0]);
        assert_eq!(dense(&x, &eye, &zero_b).unwrap().data(), x.data());
        let zero_w = t(&[2, 2], &[0.0; 4]);
        let b = t(&[2], &[0.5, -1.0]);
        assert_eq!(dense(&x, &zero_w, &b).unwrap().data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_lowest_index() {
        let x = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let (y, arg) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn max_pool_empty_window() {
        let x = t(&[1, 1, 2, 2], &[1.0; 4]);
        assert!(matches!(max_pool2d(&x, 3, 1), Err(Error::Geometry(_))));
        assert!(matches!(max_pool2d(&x, 0, 1), Err(Error::Geometry(_))));
    }

    #[test]
    fn softmax_uniform_and_normalized() {
        let x = t(&[1, 4], &[2.0; 4]);
        assert!(softmax(&x).unwrap().data().iter().all(|&v| v == 0.25));
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 300.0, 0.0, -300.0]);
        let y = softmax(&x).unwrap();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relu_and_sigmoid_basics() {
        let x = t(&[3], &[0.0, 1.0, 2.5]);
        assert_eq!(relu(&x).data(), x.data());
        assert_eq!(sigmoid(&t(&[1], &[0.0])).data(), &[0.5]);
    }

    #[test]
    fn pick_rejects_out_of_range() {
        let x = t(&[1, 2], &[0.0, 1.0]);
        assert!(matches!(pick(&x, &[2]), Err(Error::Label { label: 2, classes: 2 })));
    }
}
