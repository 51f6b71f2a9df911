use super::{nchw, Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = g.iter().zip(bc.data()).map(|(g, y)| *g * *y).collect();
            let gb = g.iter().zip(ac.data()).map(|(g, x)| *g * *x).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, k: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x * k).collect();
    Tensor::from_op(
        "scale",
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.iter().map(|g| *g * k).collect())]),
    )
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let total = a.data().iter().copied().sum();
    let n = a.numel();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![total],
        vec![a.clone()],
        Box::new(move |g| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.numel();
    let inv = T::one() / T::of(n as f64);
    let total: T = a.data().iter().copied().sum();
    Tensor::from_op(
        "mean",
        vec![1],
        vec![total * inv],
        vec![a.clone()],
        Box::new(move |g| vec![Some(vec![g[0] * inv; n])]),
    )
}

pub fn reshape<T: Scalar>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(Error::shape(
            "reshape",
            format!("cannot view {:?} as {:?}", a.shape(), shape),
        ));
    }
    Ok(Tensor::from_op(
        "reshape",
        shape.to_vec(),
        a.to_vec(),
        vec![a.clone()],
        Box::new(|g| vec![Some(g.to_vec())]),
    ))
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|x| x.max(T::zero())).collect();
    let ac = a.clone();
    Tensor::from_op(
        "relu",
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let gi = g
                .iter()
                .zip(ac.data())
                .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                .collect();
            vec![Some(gi)]
        }),
    )
}

pub(crate) fn logistic<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|&x| logistic(x)).collect();
    let out = data.clone();
    Tensor::from_op(
        "sigmoid",
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let gi = g
                .iter()
                .zip(&out)
                .map(|(g, y)| *g * *y * (T::one() - *y))
                .collect();
            vec![Some(gi)]
        }),
    )
}

fn check_channel_range(c: usize, lo: usize, hi: usize, op: &'static str) -> Result<()> {
    if lo >= hi {
        return Err(Error::invalid(op, format!("empty channel range [{lo}, {hi})")));
    }
    if hi > c {
        return Err(Error::shape(
            op,
            format!("channel range [{lo}, {hi}) exceeds channel count {c}"),
        ));
    }
    Ok(())
}

/// Channels `[lo, hi)` of an NCHW tensor.
pub fn narrow_channels<T: Scalar>(a: &Tensor<T>, lo: usize, hi: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw(a, "narrow_channels")?;
    check_channel_range(c, lo, hi, "narrow_channels")?;
    let plane = h * w;
    let k = hi - lo;
    let mut data = Vec::with_capacity(n * k * plane);
    for b in 0..n {
        let base = (b * c + lo) * plane;
        data.extend_from_slice(&a.data()[base..base + k * plane]);
    }
    Ok(Tensor::from_op(
        "narrow_channels",
        vec![n, k, h, w],
        data,
        vec![a.clone()],
        Box::new(move |g| {
            let mut gi = vec![T::zero(); n * c * plane];
            for b in 0..n {
                let dst = (b * c + lo) * plane;
                let src = b * k * plane;
                gi[dst..dst + k * plane].copy_from_slice(&g[src..src + k * plane]);
            }
            vec![Some(gi)]
        }),
    ))
}

/// Softmax across channels `[lo, hi)` at every (n, h, w), returning just the
/// normalized slice (`N × (hi-lo) × H × W`).
pub fn softmax_over_channels<T: Scalar>(
    a: &Tensor<T>,
    lo: usize,
    hi: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw(a, "softmax_over_channels")?;
    check_channel_range(c, lo, hi, "softmax_over_channels")?;
    let plane = h * w;
    let k = hi - lo;
    let src = a.data();
    let mut out = vec![T::zero(); n * k * plane];
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| src[(b * c + lo + ch) * plane + p];
            let mx = (0..k).map(at).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for ch in 0..k {
                let e = (at(ch) - mx).exp();
                out[(b * k + ch) * plane + p] = e;
                total = total + e;
            }
            for ch in 0..k {
                let o = &mut out[(b * k + ch) * plane + p];
                *o = *o / total;
            }
        }
    }
    let y = out.clone();
    Ok(Tensor::from_op(
        "softmax_over_channels",
        vec![n, k, h, w],
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut gi = vec![T::zero(); n * c * plane];
            for b in 0..n {
                for p in 0..plane {
                    let idx = |ch: usize| (b * k + ch) * plane + p;
                    let dot: T = (0..k).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                    for ch in 0..k {
                        gi[(b * c + lo + ch) * plane + p] = y[idx(ch)] * (g[idx(ch)] - dot);
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// Per-output-index source taps `(i0, i1, frac)` for ×2 bilinear resampling
/// with half-pixel centers.
fn taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_x2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw(a, "upsample_bilinear_x2")?;
    let (ty, tx) = (taps(h), taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let src = a.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let o = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = s[y0 * w + x0] * (T::one() - fx) + s[y0 * w + x1] * fx;
                let bot = s[y1 * w + x0] * (T::one() - fx) + s[y1 * w + x1] * fx;
                o[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_op(
        "upsample_bilinear_x2",
        vec![n, c, ho, wo],
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut gi = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                let gs = &g[plane * ho * wo..(plane + 1) * ho * wo];
                let d = &mut gi[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let fy = T::of(fy);
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let fx = T::of(fx);
                        let v = gs[oy * wo + ox];
                        let top = v * (T::one() - fy);
                        let bot = v * fy;
                        d[y0 * w + x0] = d[y0 * w + x0] + top * (T::one() - fx);
                        d[y0 * w + x1] = d[y0 * w + x1] + top * fx;
                        d[y1 * w + x0] = d[y1 * w + x0] + bot * (T::one() - fx);
                        d[y1 * w + x1] = d[y1 * w + x1] + bot * fx;
                    }
                }
            }
            vec![Some(gi)]
        }),
    ))
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("stack", "nothing to stack"))?;
    if let Some(bad) = parts.iter().find(|p| p.shape() != first.shape()) {
        return Err(Error::shape(
            "stack",
            format!("cannot stack {:?} with {:?}", first.shape(), bad.shape()),
        ));
    }
    let each = first.numel();
    let mut data = Vec::with_capacity(each * parts.len());
    parts.iter().for_each(|p| data.extend_from_slice(p.data()));
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::from_op(
        "stack",
        shape,
        data,
        parts.to_vec(),
        Box::new(move |g| g.chunks(each).map(|c| Some(c.to_vec())).collect()),
    ))
}
