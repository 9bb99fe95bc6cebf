//! CPU kernels with hand-written adjoints for the two layouts that dominate
//! training time: patch extraction for convolution and nearest upsampling.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Visits every run of in-image taps of image `n` as
    /// `(patch offset, image offset, length)`. Consecutive patch entries of a
    /// run read image entries `stride` apart. Patch offsets index the
    /// `(rows, B*Ho*Wo)` matrix.
    #[inline]
    fn for_each_run(&self, n: usize, mut f: impl FnMut(usize, usize, usize)) {
        let cols = self.b * self.ho * self.wo;
        let (s, pad) = (self.stride, self.pad);
        let mut row = 0;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    // ox range with 0 <= ox*s + kx - pad < w
                    let lo = if pad > kx { (pad - kx).div_ceil(s) } else { 0 };
                    let hi = if self.w + pad > kx { ((self.w + pad - kx - 1) / s + 1).min(self.wo) } else { 0 };
                    if lo < hi {
                        for oy in 0..self.ho {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= self.h {
                                continue;
                            }
                            let p = row * cols + (n * self.ho + oy) * self.wo + lo;
                            let i = (ch * self.h + iy as usize) * self.w + lo * s + kx - pad;
                            f(p, i, hi - lo);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, name: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg(format!("{name} needs a contiguous input"))),
    }
}

fn im2col_typed<T: Copy + Default>(src: &[T], g: &Geometry) -> Vec<T> {
    let il = g.image_len();
    let mut out = vec![T::default(); g.rows() * g.b * g.ho * g.wo];
    for n in 0..g.b {
        let img = &src[n * il..(n + 1) * il];
        g.for_each_run(n, |p, i, len| {
            if g.stride == 1 {
                out[p..p + len].copy_from_slice(&img[i..i + len]);
            } else {
                for (j, o) in out[p..p + len].iter_mut().enumerate() {
                    *o = img[i + j * g.stride];
                }
            }
        });
    }
    out
}

fn col2im_typed<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geometry) -> Vec<T> {
    let il = g.image_len();
    let mut out = vec![T::default(); g.b * il];
    for n in 0..g.b {
        let dst = &mut out[n * il..(n + 1) * il];
        g.for_each_run(n, |p, i, len| {
            for (j, v) in src[p..p + len].iter().enumerate() {
                dst[i + j * g.stride] += *v;
            }
        });
    }
    out
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.rows(), g.b * g.ho * g.wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_typed(contiguous(v, layout, "im2col")?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_typed(contiguous(v, layout, "im2col")?, g)),
            _ => return Err(candle_core::Error::Msg("im2col supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.b, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_typed(contiguous(v, layout, "col2im")?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_typed(contiguous(v, layout, "col2im")?, g)),
            _ => return Err(candle_core::Error::Msg("col2im supports f32 and f64".into())),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Patches of `x (B, C, H, W)` as a `(C*kh*kw, B*Ho*Wo)` matrix. Rows are
/// ordered by channel, kernel row, kernel column; columns by image then
/// output position. Out-of-range taps read zero.
pub fn im2col(x: &Tensor, kh: usize, kw: usize, pad: usize, stride: usize) -> candle_core::Result<(Tensor, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let g = Geometry { b, c, h, w, kh, kw, pad, stride, ho, wo };
    Ok((x.contiguous()?.apply_op1(Im2Col(g))?, ho, wo))
}

struct Upsample2;

fn upsample_typed<T: Copy + Default>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::default(); planes * h * w * 4];
    for p in 0..planes {
        for y in 0..h {
            let row = &src[(p * h + y) * w..(p * h + y + 1) * w];
            let top = (p * 2 * h + 2 * y) * 2 * w;
            for (x, v) in row.iter().enumerate() {
                out[top + 2 * x] = *v;
                out[top + 2 * x + 1] = *v;
                out[top + 2 * w + 2 * x] = *v;
                out[top + 2 * w + 2 * x + 1] = *v;
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(upsample_typed(contiguous(v, layout, "upsample2")?, b * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample_typed(contiguous(v, layout, "upsample2")?, b * c, h, w)),
            _ => return Err(candle_core::Error::Msg("upsample2 supports f32 and f64".into())),
        };
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        Ok(Some(grad.reshape((b, c, h, 2, w, 2))?.sum(5)?.sum(3)?))
    }
}

/// Nearest-neighbour 2x upsampling of `(B, C, H, W)`.
pub fn upsample2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for every x, y.
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (2, 3, 7, 6), &dev).unwrap();
        let (cols, _, _) = im2col(&x, 3, 3, 1, 2).unwrap();
        let y = Tensor::randn(0f64, 1.0, cols.dims(), &dev).unwrap();
        let lhs = (&cols * &y).unwrap().sum_all().unwrap();
        let grads = lhs.backward().unwrap();
        let gx = grads.get(&x).unwrap();
        let rhs = (x.as_tensor() * gx).unwrap().sum_all().unwrap();
        let (l, r) = (lhs.to_scalar::<f64>().unwrap(), rhs.to_scalar::<f64>().unwrap());
        assert!((l - r).abs() < 1e-10, "{l} vs {r}");
    }

    #[test]
    fn upsample_gradient_sums_blocks() {
        let x = Var::new(&[[[[1f32, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap();
        let y = upsample2(&x).unwrap();
        assert_eq!(y.get(0).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap()[1], vec![1.0, 1.0, 2.0, 2.0]);
        let g = (y.sum_all().unwrap()).backward().unwrap();
        assert_eq!(g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![4.0; 4]);
    }
}
