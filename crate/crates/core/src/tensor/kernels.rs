//! Low-level loops shared by the tape's forward and backward passes.

use crate::error::{shape_err, Result};

/// A strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a * b` where `out` is row-major `m x n`.
pub(crate) fn gemm(a: Mat, b: Mat, beta: f64, out: &mut [f64]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    debug_assert_eq!(k, k2);
    debug_assert_eq!(out.len(), m * n);
    debug_assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: slice lengths cover every strided access for the given extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("shapes {a:?} and {b:?} are not broadcastable")),
        };
    }
    Ok(out)
}

/// How an operand's elements are located for each element of a broadcast output.
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// Operand equals the trailing dims of the output; index = i % len.
    Suffix(usize),
    General(Vec<usize>),
}

impl Bcast {
    pub fn new(out: &[usize], input: &[usize]) -> Self {
        let n_in: usize = input.iter().product();
        let n_out: usize = out.iter().product();
        if n_in == n_out {
            return Bcast::Same;
        }
        if n_in == 1 {
            return Bcast::Scalar;
        }
        let trimmed: Vec<usize> = {
            let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
            input[first..].to_vec()
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Bcast::Suffix(n_in);
        }
        let in_strides = strides(input);
        let off = out.len() - input.len();
        let mut eff = vec![0; out.len()];
        for (i, &d) in input.iter().enumerate() {
            eff[off + i] = if d == 1 { 0 } else { in_strides[i] };
        }
        let mut map = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; out.len()];
        let mut pos = 0usize;
        for _ in 0..n_out {
            map.push(pos);
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                pos += eff[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                pos -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Bcast::General(map)
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Suffix(n) => i % n,
            Bcast::General(m) => m[i],
        }
    }
}

pub(crate) fn binary_map(
    a: &[f64],
    ma: &Bcast,
    b: &[f64],
    mb: &Bcast,
    n: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match (ma, mb) {
        (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Bcast::Same, Bcast::Scalar) => a.iter().map(|&x| f(x, b[0])).collect(),
        (Bcast::Same, Bcast::Suffix(len)) => {
            let mut out = Vec::with_capacity(n);
            for chunk in a.chunks(*len) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        _ => (0..n).map(|i| f(a[ma.index(i)], b[mb.index(i)])).collect(),
    }
}

/// Sum `g` (shaped like the broadcast output) back into an operand's layout.
pub(crate) fn reduce_into(acc: &mut [f64], map: &Bcast, g: impl Fn(usize) -> f64, n: usize) {
    match map {
        Bcast::Same => acc.iter_mut().enumerate().for_each(|(i, a)| *a += g(i)),
        Bcast::Scalar => acc[0] += (0..n).map(&g).sum::<f64>(),
        Bcast::Suffix(len) => {
            for i in 0..n {
                acc[i % len] += g(i);
            }
        }
        Bcast::General(m) => {
            for (i, &j) in m.iter().enumerate() {
                acc[j] += g(i);
            }
        }
    }
}

/// Copy `src` (shape `shape`) into a new buffer with axes reordered by `perm`.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if nd == 0 {
        out.push(src[0]);
        return out;
    }
    let inner = out_shape[nd - 1];
    let inner_stride = eff[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut pos = 0usize;
    let outer = n / inner.max(1);
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&src[pos..pos + inner]);
        } else {
            out.extend((0..inner).map(|j| src[pos + j * inner_stride]));
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Exact GELU: `x * Phi(x)`.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn general_map_matches_manual_indexing() {
        // [2,1,3] broadcast to [2,2,3]
        let m = Bcast::new(&[2, 2, 3], &[2, 1, 3]);
        let got: Vec<usize> = (0..12).map(|i| m.index(i)).collect();
        assert_eq!(got, vec![0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5]);
    }

    #[test]
    fn permute_transposes_matrix() {
        let src = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(permute(&src, &[2, 3], &[1, 0]), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gemm_with_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2), 0.0, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        gemm(Mat::new(&a, 2, 2).t(), Mat::new(&b, 2, 2), 0.0, &mut out);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
    }
}
