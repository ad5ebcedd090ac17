//! Dense numeric kernels shared by forward and backward passes.

/// `C = op(A)·op(B) + beta·C` where `op(A)` is `m × k` and `op(B)` is `k × n`.
///
/// With `ta = false` `A` is stored `m × k`, otherwise it is stored `k × m`;
/// likewise for `B`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 square-kernel convolution over one image.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Valid output column range for kernel column offset `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_w();
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(ow);
        (lo, hi.max(lo))
    }
}

/// Unfold one `[C, H, W]` image into `[C·k·k, Ho·Wo]` columns.
pub fn im2col(x: &[f32], g: ConvGeom, col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for ci in 0..g.c_in {
        let img = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.x_range(kx);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    for ox in lo..hi {
                        line[ox] = src[ox + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into `[C, H, W]`.
pub fn col2im_add(col: &[f32], g: ConvGeom, x: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for ci in 0..g.c_in {
        let img = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.x_range(kx);
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let dst = &mut img[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        dst[ox + kx - g.pad] += line[ox];
                    }
                }
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}
