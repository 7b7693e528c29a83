//! Dense 2D convolution as a candle custom op.
//!
//! candle's own CPU convolution backward goes through a naive transposed
//! convolution, which dominates training time on small machines. This op
//! lowers both passes to im2col + GEMM (`matrixmultiply`), so forward and
//! backward cost the same handful of matrix products. 1D convolutions are
//! routed through here with a unit height.

use candle_core::{
    CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor, WithDType,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride: (stride, stride), padding: (padding, padding) }
    }

    pub fn out_dim(&self, input: (usize, usize), kernel: (usize, usize)) -> Option<(usize, usize)> {
        let h = input.0 + 2 * self.padding.0;
        let w = input.1 + 2 * self.padding.1;
        if h < kernel.0 || w < kernel.1 || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((h - kernel.0) / self.stride.0 + 1, (w - kernel.1) / self.stride.1 + 1))
    }
}

pub(crate) trait GemmElem: WithDType + Copy + Default + std::ops::AddAssign {
    /// C = alpha * A * B + beta * C with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl GemmElem for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: slice lengths cover every index addressed by the given strides.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            )
        }
    }
}

impl GemmElem for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: slice lengths cover every index addressed by the given strides.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), rsc, csc,
            )
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geo: ConvGeometry,
}

impl Dims {
    fn new(x: &Shape, k: &Shape, geo: ConvGeometry) -> Result<Self> {
        let (batch, c_in, h, w) = x.dims4()?;
        let (c_out, c_in_k, kh, kw) = k.dims4()?;
        if c_in != c_in_k {
            candle_core::bail!("conv: input has {c_in} channels, kernel expects {c_in_k}");
        }
        let (ho, wo) = geo
            .out_dim((h, w), (kh, kw))
            .ok_or_else(|| candle_core::Error::Msg(format!("conv: kernel {kh}x{kw} larger than padded input {h}x{w}")))?;
        Ok(Self { batch, c_in, h, w, c_out, kh, kw, ho, wo, geo })
    }

    fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols_len(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.geo.stride == (1, 1)
            && self.geo.padding == (0, 0)
    }
}

fn im2col<T: GemmElem>(x: &[T], d: &Dims, cols: &mut [T]) {
    let n = d.cols_len();
    let (sh, sw) = d.geo.stride;
    let (ph, pw) = d.geo.padding;
    for ci in 0..d.c_in {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..d.ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        *o = if ix < 0 || ix >= d.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: GemmElem>(cols: &[T], d: &Dims, x: &mut [T]) {
    let n = d.cols_len();
    let (sh, sw) = d.geo.stride;
    let (ph, pw) = d.geo.padding;
    for ci in 0..d.c_in {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..d.ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: GemmElem>(x: &[T], k: &[T], d: &Dims) -> Vec<T> {
    let kk = d.cols_rows();
    let n = d.cols_len();
    let in_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * n;
    let mut out = vec![T::zero(); d.batch * out_len];
    let mut cols = if d.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * n] };
    for b in 0..d.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols_ref: &[T] = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, d, &mut cols);
            &cols
        };
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        T::gemm(d.c_out, kk, n, k, kk as isize, 1, cols_ref, n as isize, 1, T::zero(), ob, n as isize, 1);
    }
    out
}

fn backward<T: GemmElem>(x: &[T], k: &[T], g: &[T], d: &Dims) -> (Vec<T>, Vec<T>) {
    let kk = d.cols_rows();
    let n = d.cols_len();
    let in_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * n;
    let mut gx = vec![T::zero(); d.batch * in_len];
    let mut gk = vec![T::zero(); d.c_out * kk];
    let mut cols = vec![T::zero(); kk * n];
    let mut gcols = vec![T::zero(); kk * n];
    for b in 0..d.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb = &g[b * out_len..(b + 1) * out_len];
        if d.is_pointwise() {
            cols.copy_from_slice(xb);
        } else {
            im2col(xb, d, &mut cols);
        }
        // gk += g_b * cols^T
        T::gemm(d.c_out, n, kk, gb, n as isize, 1, &cols, 1, n as isize, T::one(), &mut gk, kk as isize, 1);
        // gcols = k^T * g_b
        T::gemm(kk, d.c_out, n, k, 1, kk as isize, gb, n as isize, 1, T::zero(), &mut gcols, n as isize, 1);
        let gxb = &mut gx[b * in_len..(b + 1) * in_len];
        if d.is_pointwise() {
            gxb.copy_from_slice(&gcols);
        } else {
            col2im(&gcols, d, gxb);
        }
    }
    (gx, gk)
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv: expected a contiguous operand"),
    }
}

struct Conv2dOp {
    geo: ConvGeometry,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = Dims::new(l1.shape(), l2.shape(), self.geo)?;
        let shape = Shape::from((d.batch, d.c_out, d.ho, d.wo));
        let storage = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => {
                CpuStorage::F32(forward(contiguous_slice(x, l1)?, contiguous_slice(k, l2)?, &d))
            }
            (CpuStorage::F64(x), CpuStorage::F64(k)) => {
                CpuStorage::F64(forward(contiguous_slice(x, l1)?, contiguous_slice(k, l2)?, &d))
            }
            _ => candle_core::bail!("conv: only f32/f64 operands of the same dtype are supported"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let d = Dims::new(x.shape(), k.shape(), self.geo)?;
        let dev = x.device();
        let (gx, gk) = match x.dtype() {
            DType::F32 => {
                let (gx, gk) = backward::<f32>(&flat(x)?, &flat(k)?, &flat(grad)?, &d);
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gk, k.shape(), dev)?)
            }
            DType::F64 => {
                let (gx, gk) = backward::<f64>(&flat(x)?, &flat(k)?, &flat(grad)?, &d);
                (Tensor::from_vec(gx, x.shape(), dev)?, Tensor::from_vec(gk, k.shape(), dev)?)
            }
            dt => candle_core::bail!("conv: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gk)))
    }
}

fn flat<T: WithDType>(t: &Tensor) -> Result<Vec<T>> {
    t.detach().flatten_all()?.to_vec1::<T>()
}

/// `x`: (B, C_in, H, W), `kernel`: (C_out, C_in, KH, KW). No bias.
pub fn conv2d(x: &Tensor, kernel: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    if !x.track_op() && !kernel.track_op() {
        return x.apply_op2_no_bwd(&kernel, &Conv2dOp { geo });
    }
    x.apply_op2(&kernel, Conv2dOp { geo })
}

/// `x`: (B, C_in, T), `kernel`: (C_out, C_in, K). No bias.
pub fn conv1d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    let (co, ci, k) = kernel.dims3()?;
    let geo = ConvGeometry { stride: (1, stride), padding: (0, padding) };
    let y = conv2d(&x.reshape((b, c, 1, t))?, &kernel.reshape((co, ci, 1, k))?, geo)?;
    let (_, _, _, to) = y.dims4()?;
    y.reshape((b, co, to))
}
