//! Convolution kernels over `(n, h, w, c)` slices.
//!
//! All reductions run in a fixed loop order so results are reproducible.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub oh: usize,
    pub ow: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_y: usize,
    pub pad_x: usize,
}

impl ConvGeom {
    /// Input row `oy*stride + ky - pad`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let p = o * stride + k;
        if p < pad || p - pad >= len {
            None
        } else {
            Some(p - pad)
        }
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c ← a·b + beta·c` with `c` row-major and contiguous.
fn gemm<T: Scalar>(a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimensions");
    assert!(a.in_bounds() && b.in_bounds() && c.len() >= m * n, "gemm operand bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds checked above; `c` is a distinct &mut borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input is already the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_y == 0 && self.pad_x == 0
    }

    /// Patch matrix `(oh·ow) × (kh·kw·cin)` of sample `i`.
    fn im2col<T: Scalar>(&self, x: &[T], i: usize, cols: &mut [T]) {
        let k = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * k..(oy * self.ow + ox + 1) * k];
                for ky in 0..self.kh {
                    let iy = ConvGeom::src(oy, ky, self.stride, self.pad_y, self.h);
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * self.cin..(ky * self.kw + kx + 1) * self.cin];
                        match (iy, ConvGeom::src(ox, kx, self.stride, self.pad_x, self.w)) {
                            (Some(iy), Some(ix)) => {
                                let base = ((i * self.h + iy) * self.w + ix) * self.cin;
                                dst.copy_from_slice(&x[base..base + self.cin]);
                            }
                            _ => dst.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a patch-matrix gradient back onto sample `i` of `dx`.
    fn col2im<T: Scalar>(&self, dcols: &[T], i: usize, dx: &mut [T]) {
        let k = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &dcols[(oy * self.ow + ox) * k..(oy * self.ow + ox + 1) * k];
                for ky in 0..self.kh {
                    let Some(iy) = ConvGeom::src(oy, ky, self.stride, self.pad_y, self.h) else {
                        continue;
                    };
                    for kx in 0..self.kw {
                        let Some(ix) = ConvGeom::src(ox, kx, self.stride, self.pad_x, self.w) else {
                            continue;
                        };
                        let base = ((i * self.h + iy) * self.w + ix) * self.cin;
                        let src = &row[(ky * self.kw + kx) * self.cin..(ky * self.kw + kx + 1) * self.cin];
                        for (d, &v) in dx[base..base + self.cin].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (p, k, cout) = (g.out_pixels(), g.patch_len(), g.cout);
    let in_per = g.h * g.w * g.cin;
    let mut out = vec![T::zero(); g.n * p * cout];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); p * k] };
    let w = View::row_major(wt, k, cout);
    for i in 0..g.n {
        let dst = &mut out[i * p * cout..(i + 1) * p * cout];
        let beta = match bias {
            Some(b) => {
                for row in dst.chunks_exact_mut(cout) {
                    row.copy_from_slice(b);
                }
                T::one()
            }
            None => T::zero(),
        };
        let a = if g.is_pointwise() {
            View::row_major(&x[i * in_per..(i + 1) * in_per], p, k)
        } else {
            g.im2col(x, i, &mut cols);
            View::row_major(&cols, p, k)
        };
        gemm(a, w, beta, dst);
    }
    out
}

pub(crate) struct ConvGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dw: Option<&'a mut [T]>,
    pub db: Option<&'a mut [T]>,
}

pub(crate) fn conv2d_backward<T: Scalar>(x: &[T], wt: &[T], dy: &[T], g: &ConvGeom, grads: ConvGrads<'_, T>) {
    let ConvGrads {
        mut dx,
        mut dw,
        db,
    } = grads;
    let (p, k, cout) = (g.out_pixels(), g.patch_len(), g.cout);
    let in_per = g.h * g.w * g.cin;
    if let Some(db) = db {
        for row in dy.chunks_exact(cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    let w = View::row_major(wt, k, cout);
    let mut cols = if g.is_pointwise() || dw.is_none() { Vec::new() } else { vec![T::zero(); p * k] };
    let mut dcols = if g.is_pointwise() || dx.is_none() { Vec::new() } else { vec![T::zero(); p * k] };
    for i in 0..g.n {
        let dyi = View::row_major(&dy[i * p * cout..(i + 1) * p * cout], p, cout);
        if let Some(dw) = dw.as_deref_mut() {
            let a = if g.is_pointwise() {
                View::row_major(&x[i * in_per..(i + 1) * in_per], p, k)
            } else {
                g.im2col(x, i, &mut cols);
                View::row_major(&cols, p, k)
            };
            gemm(a.t(), dyi, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            if g.is_pointwise() {
                gemm(dyi, w.t(), T::one(), &mut dx[i * in_per..(i + 1) * in_per]);
            } else {
                gemm(dyi, w.t(), T::zero(), &mut dcols);
                g.col2im(&dcols, i, dx);
            }
        }
    }
}

/// Per-channel 3×3 convolution, stride 1, zero padding 1. Kernel layout `(3, 3, c)`.
pub(crate) fn depthwise3x3_forward<T: Scalar>(x: &[T], wt: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * h * w * c];
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let o_base = ((i * h + y) * w + xx) * c;
                let acc = &mut out[o_base..o_base + c];
                for ky in 0..3 {
                    let Some(iy) = ConvGeom::src(y, ky, 1, 1, h) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(ix) = ConvGeom::src(xx, kx, 1, 1, w) else {
                            continue;
                        };
                        let x_base = ((i * h + iy) * w + ix) * c;
                        let xrow = &x[x_base..x_base + c];
                        let wrow = &wt[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                        for ((a, &xv), &wv) in acc.iter_mut().zip(xrow).zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise3x3_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    (n, h, w, c): (usize, usize, usize, usize),
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let o_base = ((i * h + y) * w + xx) * c;
                let dyrow = &dy[o_base..o_base + c];
                for ky in 0..3 {
                    let Some(iy) = ConvGeom::src(y, ky, 1, 1, h) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(ix) = ConvGeom::src(xx, kx, 1, 1, w) else {
                            continue;
                        };
                        let x_base = ((i * h + iy) * w + ix) * c;
                        let k = (ky * 3 + kx) * c;
                        if let Some(dx) = dx.as_deref_mut() {
                            let wrow = &wt[k..k + c];
                            for ((d, &g), &wv) in dx[x_base..x_base + c].iter_mut().zip(dyrow).zip(wrow) {
                                *d += g * wv;
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let xrow = &x[x_base..x_base + c];
                            for ((d, &g), &xv) in dw[k..k + c].iter_mut().zip(dyrow).zip(xrow) {
                                *d += g * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.oh * g.ow * g.cout];
        for i in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    for o in 0..g.cout {
                        let mut s = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad_y as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad_x as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xv = x[((i * g.h + iy as usize) * g.w + ix as usize) * g.cin + ci];
                                    s += xv * wt[((ky * g.kw + kx) * g.cin + ci) * g.cout + o];
                                }
                            }
                        }
                        out[((i * g.oh + oy) * g.ow + ox) * g.cout + o] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn strided_conv_matches_naive_loop() {
        let g = ConvGeom {
            n: 2,
            h: 7,
            w: 6,
            cin: 3,
            oh: 4,
            ow: 3,
            cout: 5,
            kh: 3,
            kw: 3,
            stride: 2,
            pad_y: 1,
            pad_x: 1,
        };
        let x: Vec<f64> = (0..g.n * g.h * g.w * g.cin).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..9 * g.cin * g.cout).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.7).collect();
        let fast = conv2d_forward(&x, &wt, None, &g);
        let slow = naive_conv(&x, &wt, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_naive_adjoint() {
        for (kh, stride, pad) in [(3, 2, 1), (1, 1, 0), (3, 1, 1)] {
            let (h, w) = (5, 4);
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w + 2 * pad - kh) / stride + 1;
            let g = ConvGeom {
                n: 2,
                h,
                w,
                cin: 3,
                oh,
                ow,
                cout: 4,
                kh,
                kw: kh,
                stride,
                pad_y: pad,
                pad_x: pad,
            };
            let x: Vec<f64> = (0..g.n * h * w * g.cin).map(|i| ((i * 29) % 13) as f64 * 0.1 - 0.6).collect();
            let wt: Vec<f64> = (0..kh * kh * g.cin * g.cout).map(|i| ((i * 17) % 9) as f64 * 0.2 - 0.8).collect();
            let dy: Vec<f64> = (0..g.n * oh * ow * g.cout).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
            let (mut dx, mut dw, mut db) = (vec![0.0; x.len()], vec![0.0; wt.len()], vec![0.0; g.cout]);
            conv2d_backward(
                &x,
                &wt,
                &dy,
                &g,
                ConvGrads {
                    dx: Some(&mut dx),
                    dw: Some(&mut dw),
                    db: Some(&mut db),
                },
            );
            // The conv is linear in x and in w: <dy, conv(e_i)> is the i-th gradient entry.
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            for i in 0..x.len() {
                let mut e = vec![0.0; x.len()];
                e[i] = 1.0;
                assert!((dot(&dy, &naive_conv(&e, &wt, &g)) - dx[i]).abs() < 1e-10);
            }
            for i in 0..wt.len() {
                let mut e = vec![0.0; wt.len()];
                e[i] = 1.0;
                assert!((dot(&dy, &naive_conv(&x, &e, &g)) - dw[i]).abs() < 1e-10);
            }
            for o in 0..g.cout {
                let s: f64 = dy.iter().skip(o).step_by(g.cout).sum();
                assert!((s - db[o]).abs() < 1e-12);
            }
        }
    }
}
