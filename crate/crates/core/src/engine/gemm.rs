//! Matrix products on strided views of flat buffers.
//!
//! Convolutions here multiply a tall matrix (one row per pixel) by a small
//! weight matrix. General-purpose GEMM spends most of its time packing the
//! tall operand for such shapes, so common narrow widths go through a kernel
//! that keeps one output row in registers. It never fuses multiply and add,
//! so the AVX2 and baseline builds of it round identically.

use super::tensor::Element;

/// Element `(i, j)` sits at `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    offset: usize,
    rs: usize,
    cs: usize,
}

impl View {
    pub(crate) fn new(offset: usize, rs: usize, cs: usize) -> Self {
        Self { offset, rs, cs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c += a b` for an `m x k` view `a` and a `k x n` view `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(av.last(m, k) < a.len() && bv.last(k, n) < b.len() && cv.last(m, n) < c.len());
    let dense = av.cs == 1 && bv.cs == 1 && bv.rs == n && cv.cs == 1 && cv.rs == n;
    if dense && narrow(m, k, n, &a[av.offset..], av.rs, &b[bv.offset..], &mut c[cv.offset..]) {
        return;
    }
    // SAFETY: the assertion bounds every addressed element; `c` is a unique
    // borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            T::one(),
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

#[inline(always)]
fn rows_kernel<T: Element, const N: usize>(m: usize, k: usize, a: &[T], lda: usize, b: &[T], c: &mut [T]) {
    let b = &b[..k * N];
    for (i, crow) in c[..m * N].chunks_exact_mut(N).enumerate() {
        let arow = &a[i * lda..][..k];
        let mut acc: [T; N] = crow.try_into().expect("N columns");
        for (&av, brow) in arow.iter().zip(b.chunks_exact(N)) {
            for q in 0..N {
                acc[q] += av * brow[q];
            }
        }
        crow.copy_from_slice(&acc);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn rows_kernel_avx2<T: Element, const N: usize>(
    m: usize,
    k: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    c: &mut [T],
) {
    rows_kernel::<T, N>(m, k, a, lda, b, c)
}

fn dispatch<T: Element, const N: usize>(m: usize, k: usize, a: &[T], lda: usize, b: &[T], c: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { rows_kernel_avx2::<T, N>(m, k, a, lda, b, c) };
        return;
    }
    rows_kernel::<T, N>(m, k, a, lda, b, c)
}

macro_rules! by_width {
    ($n:expr, $f:ident::<$t:ty>($($arg:expr),*)) => {
        match $n {
            3 => $f::<$t, 3>($($arg),*),
            5 => $f::<$t, 5>($($arg),*),
            15 => $f::<$t, 15>($($arg),*),
            30 => $f::<$t, 30>($($arg),*),
            45 => $f::<$t, 45>($($arg),*),
            60 => $f::<$t, 60>($($arg),*),
            _ => return false,
        }
    };
}

/// Runs the register kernel when `n` is one of the widths the network uses.
fn narrow<T: Element>(m: usize, k: usize, n: usize, a: &[T], lda: usize, b: &[T], c: &mut [T]) -> bool {
    by_width!(n, dispatch::<T>(m, k, a, lda, b, c));
    true
}

/// Zero-padded `k x k` convolution of `[H, W, Cin]` with `[k, k, Cin, N]`
/// into `out`, which must hold the bias for every pixel. Taps accumulate in
/// kernel order, then input channel.
#[inline(always)]
fn conv_kernel<T: Element, const N: usize>(x: &[T], dims: (usize, usize, usize, usize), kernel: &[T], out: &mut [T]) {
    let (h, w, cin, k) = dims;
    let r = k / 2;
    let tap_len = cin * N;
    for y in 0..h {
        let ky0 = r.saturating_sub(y);
        let ky1 = (h + r - y).min(k);
        for xx in 0..w {
            let kx0 = r.saturating_sub(xx);
            let kx1 = (w + r - xx).min(k);
            let o = &mut out[(y * w + xx) * N..][..N];
            let mut acc: [T; N] = (&*o).try_into().expect("N columns");
            for ky in ky0..ky1 {
                let iy = y + ky - r;
                for kx in kx0..kx1 {
                    let ix = xx + kx - r;
                    let xin = &x[(iy * w + ix) * cin..][..cin];
                    let taps = &kernel[(ky * k + kx) * tap_len..][..tap_len];
                    for (&xv, wrow) in xin.iter().zip(taps.chunks_exact(N)) {
                        for q in 0..N {
                            acc[q] += xv * wrow[q];
                        }
                    }
                }
            }
            o.copy_from_slice(&acc);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_kernel_avx2<T: Element, const N: usize>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    kernel: &[T],
    out: &mut [T],
) {
    conv_kernel::<T, N>(x, dims, kernel, out)
}

fn conv_dispatch<T: Element, const N: usize>(x: &[T], dims: (usize, usize, usize, usize), kernel: &[T], out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { conv_kernel_avx2::<T, N>(x, dims, kernel, out) };
        return;
    }
    conv_kernel::<T, N>(x, dims, kernel, out)
}

/// Direct convolution for narrow outputs; `false` when `cout` has no
/// specialised kernel and the caller must fall back to im2col + GEMM.
pub(crate) fn conv_narrow<T: Element>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    kernel: &[T],
    cout: usize,
    out: &mut [T],
) -> bool {
    let (h, w, cin, k) = dims;
    assert!(x.len() >= h * w * cin && kernel.len() >= k * k * cin * cout && out.len() >= h * w * cout);
    by_width!(cout, conv_dispatch::<T>(x, dims, kernel, out));
    true
}

/// `gk[tap, ci, :] += sum_p x[p + tap, ci] * g[p, :]`: the kernel gradient
/// of a zero-padded convolution, `g` being `[H, W, N]`.
#[inline(always)]
fn weight_grad_kernel<T: Element, const N: usize>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    g: &[T],
    gk: &mut [T],
) {
    let (h, w, cin, k) = dims;
    let r = k / 2;
    for ky in 0..k {
        for kx in 0..k {
            let tap = &mut gk[(ky * k + kx) * cin * N..][..cin * N];
            let (y0, y1) = (r.saturating_sub(ky), (h + r).saturating_sub(ky).min(h));
            let (x0, x1) = (r.saturating_sub(kx), (w + r).saturating_sub(kx).min(w));
            for y in y0..y1 {
                let iy = y + ky - r;
                for xx in x0..x1 {
                    let ix = xx + kx - r;
                    let gp: &[T; N] = g[(y * w + xx) * N..][..N].try_into().expect("N columns");
                    let xin = &x[(iy * w + ix) * cin..][..cin];
                    for (&xv, row) in xin.iter().zip(tap.chunks_exact_mut(N)) {
                        for q in 0..N {
                            row[q] += xv * gp[q];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn weight_grad_kernel_avx2<T: Element, const N: usize>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    g: &[T],
    gk: &mut [T],
) {
    weight_grad_kernel::<T, N>(x, dims, g, gk)
}

fn weight_grad_dispatch<T: Element, const N: usize>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    g: &[T],
    gk: &mut [T],
) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        unsafe { weight_grad_kernel_avx2::<T, N>(x, dims, g, gk) };
        return;
    }
    weight_grad_kernel::<T, N>(x, dims, g, gk)
}

/// Kernel gradient for narrow `cout`; `false` when unsupported.
pub(crate) fn weight_grad_narrow<T: Element>(
    x: &[T],
    dims: (usize, usize, usize, usize),
    g: &[T],
    cout: usize,
    gk: &mut [T],
) -> bool {
    let (h, w, cin, k) = dims;
    assert!(x.len() >= h * w * cin && g.len() >= h * w * cout && gk.len() >= k * k * cin * cout);
    by_width!(cout, weight_grad_dispatch::<T>(x, dims, g, gk));
    true
}
