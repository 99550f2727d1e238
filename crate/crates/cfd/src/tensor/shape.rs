//! Shape and broadcasting helpers shared by the tape operations.

use crate::error::shape_err;
use crate::Result;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Right-aligned broadcast of two shapes; an extent may differ only when
/// one side is 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let ea = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let eb = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return Err(shape_err(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Row-major strides of `shape`, with stride 0 on axes broadcast up to
/// `out_shape` (right aligned).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let offset = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Walks every flat index of `out_shape` yielding the corresponding flat
/// offsets into two broadcast operands.
pub fn for_each_broadcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for flat in 0..n {
        f(flat, oa, ob);
        // increment the multi-index and the operand offsets
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Reduced shape with the given axes collapsed to 1 (keepdims).
pub fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out = shape.to_vec();
    for &a in axes {
        out[a] = 1;
    }
    out
}

/// Walks every flat index of `shape` yielding the flat offset into the
/// keepdims-reduced output.
pub fn for_each_reduce(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let red = reduced_shape(shape, axes);
    let strides = broadcast_strides(&red, shape);
    let n = numel(shape);
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for flat in 0..n {
        f(flat, off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}
