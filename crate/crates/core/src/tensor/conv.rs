//! 2-D convolution via im2col + GEMM, one task per image.

use super::{matmul, nchw, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(img: &[T], g: &Geom, cols: &mut [T]) {
    let opl = g.out_plane();
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * opl..][..opl];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geom, img: &mut [T]) {
    let opl = g.out_plane();
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ci * g.k + ky) * g.k + kx) * opl..][..opl];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of an NCHW input with an `O×I×K×K` kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = nchw(input, "conv2d")?;
    let [cout, wcin, k, k2] = match weight.shape() {
        &[o, i, a, b] => [o, i, a, b],
        s => return Err(Error::shape("conv2d", format!("weight must be O×I×K×K, got {s:?}"))),
    };
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {k}×{k2}")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {cout} output channels", b.shape()),
            ));
        }
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {k} larger than padded input {h}×{w} (pad {padding})"),
        ));
    }
    let g = Geom {
        cin,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho: (h + 2 * padding - k) / stride + 1,
        wo: (w + 2 * padding - k) / stride + 1,
    };

    let in_len = cin * h * w;
    let out_len = cout * g.out_plane();
    let mut out = vec![T::zero(); n * out_len];
    {
        let x = input.data();
        let wt = weight.data();
        let b = bias.map(|b| b.data());
        par::for_each_chunk(&mut out, out_len, |i, o| {
            let img = &x[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                matmul(wt, false, img, false, cout, cin, g.out_plane(), T::zero(), o);
            } else {
                let mut cols = vec![T::zero(); g.patch() * g.out_plane()];
                im2col(img, &g, &mut cols);
                matmul(wt, false, &cols, false, cout, g.patch(), g.out_plane(), T::zero(), o);
            }
            if let Some(b) = b {
                for (co, row) in o.chunks_mut(g.out_plane()).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        });
    }

    let (xin, wk, has_bias) = (input.clone(), weight.clone(), bias.is_some());
    let mut parents = vec![input.clone(), weight.clone()];
    parents.extend(bias.cloned());
    Ok(Tensor::from_op(
        "conv2d",
        vec![n, cout, g.ho, g.wo],
        out,
        parents,
        Box::new(move |gout| {
            let x = xin.data();
            let wt = wk.data();
            let need_x = xin.requires_grad();
            let need_w = wk.requires_grad();
            let patch = g.patch();
            let opl = g.out_plane();

            // Per image: (input gradient, kernel gradient partial).
            let per_image = par::map_indices(n, |i| {
                let img = &x[i * in_len..(i + 1) * in_len];
                let go = &gout[i * out_len..(i + 1) * out_len];
                let mut gw = Vec::new();
                let mut gx = Vec::new();
                if g.is_pointwise() {
                    if need_w {
                        gw = vec![T::zero(); cout * cin];
                        matmul(go, false, img, true, cout, opl, cin, T::zero(), &mut gw);
                    }
                    if need_x {
                        gx = vec![T::zero(); in_len];
                        matmul(wt, true, go, false, cin, cout, opl, T::zero(), &mut gx);
                    }
                } else {
                    if need_w {
                        let mut cols = vec![T::zero(); patch * opl];
                        im2col(img, &g, &mut cols);
                        gw = vec![T::zero(); cout * patch];
                        matmul(go, false, &cols, true, cout, opl, patch, T::zero(), &mut gw);
                    }
                    if need_x {
                        let mut dcols = vec![T::zero(); patch * opl];
                        matmul(wt, true, go, false, patch, cout, opl, T::zero(), &mut dcols);
                        gx = vec![T::zero(); in_len];
                        col2im(&dcols, &g, &mut gx);
                    }
                }
                (gx, gw)
            });

            let grad_x = need_x.then(|| {
                let mut v = Vec::with_capacity(n * in_len);
                per_image.iter().for_each(|(gx, _)| v.extend_from_slice(gx));
                v
            });
            // Batch reduction in image order keeps the sum reproducible.
            let grad_w = need_w.then(|| {
                let mut acc = vec![T::zero(); cout * patch];
                for (_, gw) in &per_image {
                    acc.iter_mut().zip(gw).for_each(|(a, b)| *a = *a + *b);
                }
                acc
            });
            let mut grads = vec![grad_x, grad_w];
            if has_bias {
                let mut gb = vec![T::zero(); cout];
                for i in 0..n {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        let row = &gout[i * out_len + co * opl..][..opl];
                        *acc = row.iter().fold(*acc, |s, v| s + *v);
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}
