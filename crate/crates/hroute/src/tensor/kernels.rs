//! Raw slice kernels shared by forward evaluation and backward rules.
//!
//! Each kernel accumulates into its output in one fixed iteration order;
//! nothing here is parallel or order-dependent, which is what makes whole
//! training runs reproducible bit for bit.

use super::Real;

/// c[m,n] += a[m,k] . b[k,n]
pub fn mm_nn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == R::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] . b[k,n]^T
pub fn mm_nt<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (p, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = R::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T . b[m,n]
pub fn mm_tn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == R::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// Softmax along contiguous rows of length `lane`, written into `out`.
pub fn softmax_rows<R: Real>(x: &[R], out: &mut [R], lane: usize) {
    for (xr, yr) in x.chunks_exact(lane).zip(out.chunks_exact_mut(lane)) {
        let mut m = xr[0];
        for &v in &xr[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = R::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            let e = (v - m).exp();
            *y = e;
            sum += e;
        }
        for y in yr.iter_mut() {
            *y /= sum;
        }
    }
}

/// Copy `x` with axes `ax0` and `ax1` swapped. Returns the new shape.
pub fn swap_axes_copy<R: Real>(x: &[R], shape: &[usize], ax0: usize, ax1: usize) -> (Vec<R>, Vec<usize>) {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);

    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Stride of each output axis in the *input* layout.
    let mut map_strides = in_strides.clone();
    map_strides.swap(ax0, ax1);

    let n = x.len();
    let mut out = vec![R::zero(); n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = x[src];
        // Odometer increment over the output shape, tracking the source
        // offset incrementally.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += map_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= map_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Indices of the `k` largest entries of `row`, ties broken toward the
/// lowest index. Returned in ascending index order.
pub fn topk_indices<R: Real>(row: &[R], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("finite values are comparable")
            .then(a.cmp(&b))
    });
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_kernels_agree_with_hand_result() {
        // a = [[1, 2], [3, 4]], b = [[5, 6], [7, 8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        mm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // a . b^T
        let mut c = [0.0f64; 4];
        mm_nt(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);

        // a^T . b
        let mut c = [0.0f64; 4];
        mm_tn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!((sigmoid(2.0f64) - 0.8807970779778823).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [0.0f64, 0.0, 1.0, 2.0, 3.0, 4.0];
        let mut y = [0.0f64; 6];
        softmax_rows(&x, &mut y, 2);
        for row in y.chunks_exact(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(y[0], 0.5);
        assert_eq!(y[1], 0.5);
    }

    #[test]
    fn swap_axes_transposes_a_matrix() {
        let x = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (y, shape) = swap_axes_copy(&x, &[2, 3], 0, 1);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(y, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn topk_prefers_lowest_index_on_ties() {
        let row = [0.5f64, 0.9, 0.5, 0.1];
        assert_eq!(topk_indices(&row, 2), vec![0, 1]);
        let row = [0.5f64, 0.5, 0.5, 0.5];
        assert_eq!(topk_indices(&row, 3), vec![0, 1, 2]);
    }
}
