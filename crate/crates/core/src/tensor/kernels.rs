//! Loop kernels shared by the forward and backward passes.

use crate::tensor::Scalar;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes, aligned from the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` when read at the coordinates of `out`; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(input);
    let offset = out.len() - input.len();
    (0..out.len())
        .map(|i| {
            if i < offset || input[i - offset] == 1 {
                0
            } else {
                base[i - offset]
            }
        })
        .collect()
}

/// Visits every coordinate of `shape` except the last axis, yielding the
/// offsets into each strided operand. The innermost axis is left to the caller.
fn for_each_outer(shape: &[usize], strides: &[&[usize]], mut f: impl FnMut(&[usize])) {
    let rank = shape.len();
    let mut offsets = vec![0usize; strides.len()];
    if rank <= 1 {
        f(&offsets);
        return;
    }
    let outer = &shape[..rank - 1];
    let mut idx = vec![0usize; rank - 1];
    loop {
        f(&offsets);
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            for (o, s) in offsets.iter_mut().zip(strides) {
                *o += s[axis];
            }
            if idx[axis] < outer[axis] {
                break;
            }
            for (o, s) in offsets.iter_mut().zip(strides) {
                *o -= s[axis] * outer[axis];
            }
            idx[axis] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Scalar>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n = numel(out_shape);
    if b.len() == 1 {
        let y = b[0];
        if a.len() == n {
            return a.iter().map(|&x| f(x, y)).collect();
        }
    }
    if a.len() == 1 && b.len() == n {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    // Trailing-suffix broadcast (e.g. bias rows): b repeats along leading axes.
    if a.len() == n && n.is_multiple_of(b.len()) && out_shape.ends_with(trim_leading_ones(b_shape)) {
        let mut out = Vec::with_capacity(n);
        for chunk in a.chunks_exact(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    if b.len() == n && n.is_multiple_of(a.len()) && out_shape.ends_with(trim_leading_ones(a_shape)) {
        let mut out = Vec::with_capacity(n);
        for chunk in b.chunks_exact(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let last = *out_shape.last().unwrap_or(&1);
    let (ia, ib) = (
        sa.last().copied().unwrap_or(0),
        sb.last().copied().unwrap_or(0),
    );
    let mut out = Vec::with_capacity(n);
    for_each_outer(out_shape, &[&sa, &sb], |off| {
        let (oa, ob) = (off[0], off[1]);
        for t in 0..last {
            out.push(f(a[oa + t * ia], b[ob + t * ib]));
        }
    });
    out
}

fn trim_leading_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

/// Sums `grad` (laid out as `grad_shape`) down to `target` by collapsing broadcast axes.
pub(crate) fn reduce_to<T: Scalar>(grad: &[T], grad_shape: &[usize], target: &[usize]) -> Vec<T> {
    let n_target = numel(target);
    if grad_shape == target {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); n_target];
    if n_target == 1 {
        out[0] = grad.iter().copied().sum();
        return out;
    }
    if grad.len().is_multiple_of(n_target) && grad_shape.ends_with(trim_leading_ones(target)) {
        for chunk in grad.chunks_exact(n_target) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o = *o + g;
            }
        }
        return out;
    }
    let st = broadcast_strides(target, grad_shape);
    let sg = contiguous_strides(grad_shape);
    let last = *grad_shape.last().unwrap_or(&1);
    let it = st.last().copied().unwrap_or(0);
    for_each_outer(grad_shape, &[&sg, &st], |off| {
        let (og, ot) = (off[0], off[1]);
        for t in 0..last {
            out[ot + t * it] = out[ot + t * it] + grad[og + t];
        }
    });
    out
}

/// Materialises `input` broadcast to `out_shape`.
pub(crate) fn expand<T: Scalar>(input: &[T], in_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    let n = numel(out_shape);
    if in_shape == out_shape {
        return input.to_vec();
    }
    if input.len() == 1 {
        return vec![input[0]; n];
    }
    let si = broadcast_strides(in_shape, out_shape);
    let last = *out_shape.last().unwrap_or(&1);
    let il = si.last().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    for_each_outer(out_shape, &[&si], |off| {
        for t in 0..last {
            out.push(input[off[0] + t * il]);
        }
    });
    out
}

pub(crate) fn permute<T: Scalar>(input: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let read_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let last = *out_shape.last().unwrap_or(&1);
    let il = read_strides.last().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(input.len());
    for_each_outer(&out_shape, &[&read_strides], |off| {
        for t in 0..last {
            out.push(input[off[0] + t * il]);
        }
    });
    (out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn middle_axis_broadcast_and_reduce() {
        // [2,1,2] + [2,3,2]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b: Vec<f64> = (0..12).map(f64::from).collect();
        let out = broadcast_binary(&[2, 1, 2], &a, &[2, 3, 2], &b, &[2, 3, 2], |x, y| x + y);
        assert_eq!(out[..6], [1.0, 3.0, 3.0, 5.0, 5.0, 7.0]);
        assert_eq!(out[6..], [9.0, 11.0, 11.0, 13.0, 13.0, 15.0]);
        let r = reduce_to(&b, &[2, 3, 2], &[2, 1, 2]);
        assert_eq!(r, vec![6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn permute_round_trip() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let (s, y) = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        assert_eq!(y[1], 4.0);
        let (s2, z) = permute(&y, &s, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(z, x);
    }

    #[test]
    fn expand_matches_reduce_adjoint() {
        let x = [1.0f64, 2.0, 3.0];
        let e = expand(&x, &[3, 1], &[3, 2]);
        assert_eq!(e, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(reduce_to(&e, &[3, 2], &[3, 1]), vec![2.0, 4.0, 6.0]);
    }
}
