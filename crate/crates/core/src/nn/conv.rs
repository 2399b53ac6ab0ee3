//! Strided convolution and transposed convolution on NCHW tensors.
//!
//! Both layers lower to one whole-batch matrix product against an im2col
//! buffer, so the deep low-resolution stages still present well-shaped
//! GEMMs. Parallel sections split output blocks across threads with a fixed
//! accumulation order per element, keeping results reproducible for a given
//! thread-pool size.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{batch_chunks, init_normal, Param, Scalar};

/// Spatial output size of a convolution along one axis.
pub fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    debug_assert!(h + 2 * pad >= k);
    (h + 2 * pad - k) / stride + 1
}

/// Spatial output size of a transposed convolution along one axis.
pub fn deconv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h - 1) * stride + k - 2 * pad
}

/// Matrix product `c = a*b + beta*c` with the longest output axis split
/// across the thread pool.
fn par_gemm<F: Scalar>(
    a: &ArrayView2<'_, F>,
    b: &ArrayView2<'_, F>,
    beta: F,
    c: &mut ArrayViewMut2<'_, F>,
) {
    let (m, n) = c.dim();
    let threads = rayon::current_num_threads().max(1);
    if threads == 1 || m.max(n) < 2 * threads {
        general_mat_mul(F::one(), a, b, beta, c);
        return;
    }
    if m >= n {
        let chunk = m.div_ceil(threads);
        c.axis_chunks_iter_mut(Axis(0), chunk)
            .into_par_iter()
            .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
            .for_each(|(mut cb, ab)| {
                general_mat_mul(F::one(), &ab, b, beta, &mut cb);
            });
    } else {
        let chunk = n.div_ceil(threads);
        c.axis_chunks_iter_mut(Axis(1), chunk)
            .into_par_iter()
            .zip(b.axis_chunks_iter(Axis(1), chunk).into_par_iter())
            .for_each(|(mut cb, bb)| {
                general_mat_mul(F::one(), a, &bb, beta, &mut cb);
            });
    }
}

/// Whole-batch patch gathering:
/// `cols[(c*k+ky)*k+kx, (n*oh+oy)*ow+ox] = x[n, c, oy*s+ky-p, ox*s+kx-p]`
/// with zeros outside the image. Parallel over patch rows.
fn im2col_batch<F: Scalar>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut Array2<F>,
) {
    let (n, c_in, h, w) = x.dim();
    let s_out = oh * ow;
    debug_assert_eq!(cols.dim(), (c_in * k * k, n * s_out));
    let xs = x.as_slice().expect("standard layout");
    cols.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            let row = row.as_slice_mut().expect("row-major");
            let kx = r % k;
            let ky = (r / k) % k;
            let c = r / (k * k);
            for img in 0..n {
                let xbase = (img * c_in + c) * h * w;
                let obase = img * s_out;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[obase + oy * ow..obase + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let rowbase = xbase + iy as usize * w;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            xs[rowbase + ix as usize]
                        };
                    }
                }
            }
        });
}

/// Scatter-add of one item's patch block back into an image; the exact
/// adjoint of one item's slice of [`im2col_batch`].
fn col2im_add_item<F: Scalar>(
    cols: &[F], // (c*k*k) rows by (oh*ow) columns, contiguous
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [F], // (c, h, w) contiguous
    c_out: usize,
    h: usize,
    w: usize,
) {
    let ncols = oh * ow;
    let mut r = 0;
    for c in 0..c_out {
        let obase = c * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[r * ncols..(r + 1) * ncols];
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let rowbase = obase + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[rowbase + ix as usize] = out[rowbase + ix as usize] + row[idx];
                        }
                        idx += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Copies `(n, c, s)` into channel-major `(c, n*s)` form. Parallel over
/// channels.
fn to_channel_major<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let s = h * w;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::zeros((c, n * s));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut row)| {
            let row = row.as_slice_mut().expect("row-major");
            for img in 0..n {
                let src = &xs[(img * c + ci) * s..(img * c + ci + 1) * s];
                row[img * s..(img + 1) * s].copy_from_slice(src);
            }
        });
    out
}

/// Inverse of [`to_channel_major`]: scatters `(c, n*s)` back into
/// `(n, c, s)`, optionally adding a per-channel bias.
fn from_channel_major<F: Scalar>(
    mat: &Array2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    bias: Option<&Array1<F>>,
) -> Array4<F> {
    let s = h * w;
    let ms = mat.as_slice().expect("standard layout");
    let mut out = Array4::zeros((n, c, h, w));
    let chunk = n.div_ceil(batch_chunks(n));
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .enumerate()
        .for_each(|(chunk_idx, mut block)| {
            let base = chunk_idx * chunk;
            for i in 0..block.shape()[0] {
                let img = base + i;
                let mut item = block.index_axis_mut(Axis(0), i);
                let islice = item.as_slice_mut().expect("standard layout");
                for ci in 0..c {
                    let src = &ms[ci * (n * s) + img * s..ci * (n * s) + (img + 1) * s];
                    let dst = &mut islice[ci * s..(ci + 1) * s];
                    match bias {
                        Some(b) => {
                            let bv = b[ci];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = v + bv;
                            }
                        }
                        None => dst.copy_from_slice(src),
                    }
                }
            }
        });
    out
}

/// 2-D convolution; weight layout `(out_ch, in_ch*k*k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<F>,
    pub bias: Param<F>,
    input_cache: Option<Array4<F>>,
    cols_cache: Option<Array2<F>>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = Param::new(init_normal(&[out_ch, in_ch * k * k], 0.0, init_std, rng));
        let bias = Param::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch])));
        Self {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            weight,
            bias,
            input_cache: None,
            cols_cache: None,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.k, self.stride, self.pad),
            conv_out(w, self.k, self.stride, self.pad),
        )
    }

    fn run_forward(&self, x: &Array4<F>) -> (Array4<F>, Array2<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let (oh, ow) = self.out_spatial(h, w);
        let ckk = self.in_ch * self.k * self.k;
        let mut cols = Array2::zeros((ckk, n * oh * ow));
        im2col_batch(x, self.k, self.stride, self.pad, oh, ow, &mut cols);
        let wmat = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out_mat = Array2::zeros((self.out_ch, n * oh * ow));
        par_gemm(&wmat, &cols.view(), F::zero(), &mut out_mat.view_mut());
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let out = from_channel_major(&out_mat, n, self.out_ch, oh, ow, Some(&bias.to_owned()));
        (out, cols)
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        self.run_forward(x).0
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let (out, cols) = self.run_forward(x);
        self.input_cache = Some(x.clone());
        self.cols_cache = Some(cols);
        out
    }

    /// Backpropagates through the layer. Parameter gradients accumulate into
    /// `.grad` when `acc_params` is set; the input gradient is only computed
    /// when requested.
    pub fn backward(
        &mut self,
        gout: &Array4<F>,
        want_input_grad: bool,
        acc_params: bool,
    ) -> Option<Array4<F>> {
        let x = self
            .input_cache
            .as_ref()
            .expect("forward_train must precede backward");
        let (n, _, h, w) = x.dim();
        let (gn, oc, oh, ow) = gout.dim();
        assert_eq!(oc, self.out_ch);
        assert_eq!(gn, n);
        let ckk = self.in_ch * self.k * self.k;
        let gout_mat = to_channel_major(gout);

        if acc_params {
            let cols = self.cols_cache.as_ref().expect("cols cached in train mode");
            let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            par_gemm(&gout_mat.view(), &cols.t(), F::one(), &mut wg);
            let mut bg = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            let db: Vec<F> = gout_mat
                .axis_iter(Axis(0))
                .into_par_iter()
                .map(|row| {
                    let mut acc = F::zero();
                    for &v in row.iter() {
                        acc = acc + v;
                    }
                    acc
                })
                .collect();
            for (g, d) in bg.iter_mut().zip(db) {
                *g = *g + d;
            }
        }

        if !want_input_grad {
            return None;
        }
        let wmat = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut gcols = Array2::zeros((ckk, n * oh * ow));
        par_gemm(&wmat.t(), &gout_mat.view(), F::zero(), &mut gcols.view_mut());
        let gcs = gcols.as_slice().expect("standard layout");
        let mut dx = Array4::zeros(x.raw_dim());
        let s_out = oh * ow;
        let chunk = n.div_ceil(batch_chunks(n));
        let (k, stride, pad) = (self.k, self.stride, self.pad);
        dx.axis_chunks_iter_mut(Axis(0), chunk)
            .into_par_iter()
            .enumerate()
            .for_each(|(chunk_idx, mut block)| {
                let base = chunk_idx * chunk;
                let mut scratch = vec![F::zero(); ckk * s_out];
                for i in 0..block.shape()[0] {
                    let img = base + i;
                    for r in 0..ckk {
                        let src = &gcs[r * (n * s_out) + img * s_out
                            ..r * (n * s_out) + (img + 1) * s_out];
                        scratch[r * s_out..(r + 1) * s_out].copy_from_slice(src);
                    }
                    let mut item = block.index_axis_mut(Axis(0), i);
                    let islice = item.as_slice_mut().expect("standard layout");
                    col2im_add_item(
                        &scratch, k, stride, pad, oh, ow, islice, self.in_ch, h, w,
                    );
                }
            });
        Some(dx)
    }

    pub fn clear_cache(&mut self) {
        self.input_cache = None;
        self.cols_cache = None;
    }
}

/// 2-D transposed convolution; weight layout `(in_ch, out_ch*k*k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<F>,
    pub bias: Param<F>,
    xt_cache: Option<(Array2<F>, [usize; 4])>,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = Param::new(init_normal(&[in_ch, out_ch * k * k], 0.0, init_std, rng));
        let bias = Param::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_ch])));
        Self {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            weight,
            bias,
            xt_cache: None,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            deconv_out(h, self.k, self.stride, self.pad),
            deconv_out(w, self.k, self.stride, self.pad),
        )
    }

    fn run_forward(&self, x: &Array4<F>) -> (Array4<F>, Array2<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "deconv input channel mismatch");
        let (oh, ow) = self.out_spatial(h, w);
        let okk = self.out_ch * self.k * self.k;
        let s_in = h * w;
        let xt = to_channel_major(x);
        let wmat = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut cols = Array2::zeros((okk, n * s_in));
        par_gemm(&wmat.t(), &xt.view(), F::zero(), &mut cols.view_mut());
        let ccs = cols.as_slice().expect("standard layout");
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = Array4::zeros((n, self.out_ch, oh, ow));
        let chunk = n.div_ceil(batch_chunks(n));
        let (k, stride, pad) = (self.k, self.stride, self.pad);
        out.axis_chunks_iter_mut(Axis(0), chunk)
            .into_par_iter()
            .enumerate()
            .for_each(|(chunk_idx, mut block)| {
                let base = chunk_idx * chunk;
                let mut scratch = vec![F::zero(); okk * s_in];
                for i in 0..block.shape()[0] {
                    let img = base + i;
                    for r in 0..okk {
                        let src =
                            &ccs[r * (n * s_in) + img * s_in..r * (n * s_in) + (img + 1) * s_in];
                        scratch[r * s_in..(r + 1) * s_in].copy_from_slice(src);
                    }
                    let mut item = block.index_axis_mut(Axis(0), i);
                    let islice = item.as_slice_mut().expect("standard layout");
                    col2im_add_item(
                        &scratch,
                        k,
                        stride,
                        pad,
                        h,
                        w,
                        islice,
                        self.out_ch,
                        oh,
                        ow,
                    );
                    for (ci, chunk_px) in islice.chunks_mut(oh * ow).enumerate() {
                        let bv = bias[ci];
                        for p in chunk_px.iter_mut() {
                            *p = *p + bv;
                        }
                    }
                }
            });
        (out, xt)
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        self.run_forward(x).0
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let dims = x.dim();
        let (out, xt) = self.run_forward(x);
        self.xt_cache = Some((xt, [dims.0, dims.1, dims.2, dims.3]));
        out
    }

    pub fn backward(
        &mut self,
        gout: &Array4<F>,
        want_input_grad: bool,
        acc_params: bool,
    ) -> Option<Array4<F>> {
        let (xt, dims) = self
            .xt_cache
            .as_ref()
            .expect("forward_train must precede backward");
        let [n, _, h, w] = *dims;
        let (gn, oc, goh, gow) = gout.dim();
        assert_eq!(oc, self.out_ch);
        assert_eq!(gn, n);
        let okk = self.out_ch * self.k * self.k;
        let s_in = h * w;

        // patches of the output gradient, laid out like the forward cols
        let mut gcols = Array2::zeros((okk, n * s_in));
        im2col_batch(gout, self.k, self.stride, self.pad, h, w, &mut gcols);
        let _ = (goh, gow);

        if acc_params {
            let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            par_gemm(&xt.view(), &gcols.t(), F::one(), &mut wg);
            let mut bg = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            let gs = gout.as_slice().expect("standard layout");
            let s_out = goh * gow;
            let db: Vec<F> = (0..self.out_ch)
                .into_par_iter()
                .map(|ci| {
                    let mut acc = F::zero();
                    for img in 0..n {
                        let base = (img * self.out_ch + ci) * s_out;
                        for &v in &gs[base..base + s_out] {
                            acc = acc + v;
                        }
                    }
                    acc
                })
                .collect();
            for (g, d) in bg.iter_mut().zip(db) {
                *g = *g + d;
            }
        }

        if !want_input_grad {
            return None;
        }
        let wmat = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut dx_mat = Array2::zeros((self.in_ch, n * s_in));
        par_gemm(&wmat, &gcols.view(), F::zero(), &mut dx_mat.view_mut());
        Some(from_channel_major(&dx_mat, n, self.in_ch, h, w, None))
    }

    pub fn clear_cache(&mut self) {
        self.xt_cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct (quadruple-loop) convolution used as an oracle for the
    /// GEMM-based implementation.
    fn conv_naive(
        x: &Array4<f64>,
        w: &Array2<f64>,
        b: &Array1<f64>,
        out_ch: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Array4<f64> {
        let (n, c_in, h, wd) = x.dim();
        let oh = conv_out(h, k, s, p);
        let ow = conv_out(wd, k, s, p);
        let mut out = Array4::zeros((n, out_ch, oh, ow));
        for ni in 0..n {
            for co in 0..out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x[[ni, ci, iy as usize, ix as usize]]
                                            * w[[co, (ci * k + ky) * k + kx]];
                                    }
                                }
                            }
                        }
                        out[[ni, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn deconv_naive(
        x: &Array4<f64>,
        w: &Array2<f64>,
        b: &Array1<f64>,
        out_ch: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Array4<f64> {
        let (n, c_in, h, wd) = x.dim();
        let oh = deconv_out(h, k, s, p);
        let ow = deconv_out(wd, k, s, p);
        let mut out = Array4::zeros((n, out_ch, oh, ow));
        for ni in 0..n {
            for co in 0..out_ch {
                for plane in out
                    .index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), co)
                    .iter_mut()
                {
                    *plane += b[co];
                }
                for ci in 0..c_in {
                    for iy in 0..h {
                        for ix in 0..wd {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (iy * s + ky) as isize - p as isize;
                                    let ox = (ix * s + kx) as isize - p as isize;
                                    if oy >= 0
                                        && ox >= 0
                                        && (oy as usize) < oh
                                        && (ox as usize) < ow
                                    {
                                        out[[ni, co, oy as usize, ox as usize]] += x
                                            [[ni, ci, iy, ix]]
                                            * w[[ci, (co * k + ky) * k + kx]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn rand_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, c, h, w), || rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(4usize, 2usize, 1usize), (3, 1, 1), (3, 2, 1), (4, 1, 0)] {
            let conv = Conv2d::<f64>::new(3, 5, k, s, p, 0.1, &mut rng);
            let x = rand_input(2, 3, 8, 8, 42 + k as u64);
            let got = conv.forward_eval(&x);
            let w = conv.weight.value.view().into_dimensionality::<Ix2>().unwrap();
            let b = conv.bias.value.view().into_dimensionality::<Ix1>().unwrap();
            let want = conv_naive(&x, &w.to_owned(), &b.to_owned(), 5, k, s, p);
            assert_eq!(got.dim(), want.dim());
            for (a, e) in got.iter().zip(want.iter()) {
                assert!((a - e).abs() < 1e-12, "conv k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn deconv_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p) in &[(4usize, 2usize, 1usize), (2, 2, 0), (3, 1, 1)] {
            let deconv = ConvTranspose2d::<f64>::new(4, 3, k, s, p, 0.1, &mut rng);
            let x = rand_input(2, 4, 4, 4, 7 + k as u64);
            let got = deconv.forward_eval(&x);
            let w = deconv.weight.value.view().into_dimensionality::<Ix2>().unwrap();
            let b = deconv.bias.value.view().into_dimensionality::<Ix1>().unwrap();
            let want = deconv_naive(&x, &w.to_owned(), &b.to_owned(), 3, k, s, p);
            assert_eq!(got.dim(), want.dim());
            for (a, e) in got.iter().zip(want.iter()) {
                assert!((a - e).abs() < 1e-12, "deconv k={k} s={s} p={p}");
            }
        }
    }

    /// Finite-difference check of every parameter and input gradient of a
    /// small conv layer against a scalar loss sum(out^2)/2.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, 0.2, &mut rng);
        let x = rand_input(2, 2, 5, 5, 11);
        let out = conv.forward_train(&x);
        let dx = conv.backward(&out.clone(), true, true).unwrap();

        let h = 1e-6;
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| -> f64 {
            let o = c.forward_eval(x);
            0.5 * o.iter().map(|v| v * v).sum::<f64>()
        };
        for idx in [0usize, 5, 17, 53] {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.weight.value.as_slice_mut().unwrap()[idx] += h;
            cm.weight.value.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            let an = conv.weight.grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "w[{idx}]: fd={fd} an={an}");
        }
        for idx in 0..3 {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.bias.value.as_slice_mut().unwrap()[idx] += h;
            cm.bias.value.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            let an = conv.bias.grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "b[{idx}]: fd={fd} an={an}");
        }
        for idx in [0usize, 13, 49] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "x[{idx}]: fd={fd} an={an}");
        }
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut deconv = ConvTranspose2d::<f64>::new(3, 2, 4, 2, 1, 0.2, &mut rng);
        let x = rand_input(2, 3, 3, 3, 13);
        let out = deconv.forward_train(&x);
        let dx = deconv.backward(&out.clone(), true, true).unwrap();

        let h = 1e-6;
        let loss = |c: &ConvTranspose2d<f64>, x: &Array4<f64>| -> f64 {
            let o = c.forward_eval(x);
            0.5 * o.iter().map(|v| v * v).sum::<f64>()
        };
        for idx in [0usize, 9, 31, 95] {
            let mut cp = deconv.clone();
            let mut cm = deconv.clone();
            cp.weight.value.as_slice_mut().unwrap()[idx] += h;
            cm.weight.value.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            let an = deconv.weight.grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "w[{idx}]: fd={fd} an={an}");
        }
        for idx in 0..2 {
            let mut cp = deconv.clone();
            let mut cm = deconv.clone();
            cp.bias.value.as_slice_mut().unwrap()[idx] += h;
            cm.bias.value.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            let an = deconv.bias.grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "b[{idx}]: fd={fd} an={an}");
        }
        for idx in [0usize, 7, 26] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&deconv, &xp) - loss(&deconv, &xm)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-6, "x[{idx}]: fd={fd} an={an}");
        }
    }

    #[test]
    fn batched_forward_equals_per_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f32>::new(3, 4, 4, 2, 1, 0.1, &mut rng);
        let x = {
            let mut r = ChaCha8Rng::seed_from_u64(21);
            Array4::from_shape_simple_fn((5, 3, 8, 8), || r.random::<f32>())
        };
        let batched = conv.forward_eval(&x);
        for i in 0..5 {
            let xi = x
                .index_axis(Axis(0), i)
                .to_owned()
                .insert_axis(Axis(0));
            let single = conv.forward_eval(&xi);
            for (a, b) in single
                .index_axis(Axis(0), 0)
                .iter()
                .zip(batched.index_axis(Axis(0), i).iter())
            {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}
