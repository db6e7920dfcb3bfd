//! Raw loops over row-major buffers. No shape checking happens here.

use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast against it.
pub fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    // strides of the input in output coordinates; 0 on broadcast axes
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[i + pad] = s;
        }
        s *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// How a right operand is laid out relative to the broadcast output.
pub enum Layout {
    Same,
    /// operand repeats every `period` elements (its shape is a suffix of the output)
    Suffix(usize),
    General(Vec<usize>),
}

pub fn layout(out_shape: &[usize], in_shape: &[usize]) -> Layout {
    if out_shape == in_shape {
        return Layout::Same;
    }
    let n: usize = in_shape.iter().product();
    let stripped: Vec<usize> = {
        let first = in_shape.iter().position(|&e| e != 1).unwrap_or(in_shape.len());
        in_shape[first..].to_vec()
    };
    if out_shape.ends_with(&stripped) {
        return Layout::Suffix(n);
    }
    Layout::General(broadcast_offsets(out_shape, in_shape))
}

impl Layout {
    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            Layout::Same => i,
            Layout::Suffix(p) => i % p,
            Layout::General(o) => o[i],
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (1, k), c, m, k, n);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (1, m), b, (n, 1), c, m, k, n);
}

/// Strided `c += a · b` with (row, column) strides for `a` `[m,k]` and `b` `[k,n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every index reachable through the
    // given dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into (outer, len, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialises `src` permuted so that output axis `i` is input axis `perm[i]`.
pub fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    // innermost output axis is looped directly
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = mapped[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let outer_total = total / inner_len;
    for _ in 0..outer_total {
        let mut o = base;
        for _ in 0..inner_len {
            out.push(src[o]);
            o += inner_stride;
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            base += mapped[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= mapped[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn offsets_match_manual_indexing() {
        let offs = broadcast_offsets(&[2, 3, 2], &[3, 1]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..2 {
                    assert_eq!(offs[i * 6 + j * 2 + k], j);
                }
            }
        }
        let offs = broadcast_offsets(&[2, 3], &[2, 1]);
        assert_eq!(offs, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.5, -1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [6.5, -1.0, 17.0, -1.0]);
        let bt = permute(&b, &[3, 2], &[1, 0]);
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        let at = permute(&a, &[2, 3], &[1, 0]);
        let mut c3 = [0.0; 4];
        gemm_tn(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn permute_three_axes() {
        let src: Vec<f64> = (0..24).map(|x| x as f64).collect();
        let out = permute(&src, &[2, 3, 4], &[2, 0, 1]);
        // out[k, i, j] = src[i, j, k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(out[k * 6 + i * 3 + j], src[i * 12 + j * 4 + k]);
                }
            }
        }
        let back = permute(&out, &[4, 2, 3], &inverse_permutation(&[2, 0, 1]));
        assert_eq!(back, src);
    }
}
