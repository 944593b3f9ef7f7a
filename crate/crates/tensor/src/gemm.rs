use crate::Elem;

/// Batched `c[i] (+)= op(a[i]) @ op(b[i])` where `op(a)` is `[m, k]` and
/// `op(b)` is `[k, n]`. With `ta` set, `a` is stored as `[k, m]`; with `tb`
/// set, `b` is stored as `[n, k]`. A batch stride of zero broadcasts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Elem>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    a_batch_stride: usize,
    b: &[T],
    tb: bool,
    b_batch_stride: usize,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(c.len() >= batch * m * n, "matmul output too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    for i in 0..batch {
        let a_off = i * a_batch_stride;
        let b_off = i * b_batch_stride;
        let c_off = i * m * n;
        assert!(a_off + m * k <= a.len() && b_off + k * n <= b.len());
        let c_slice = &mut c[c_off..c_off + m * n];
        if k == 0 {
            if !accumulate {
                c_slice.iter_mut().for_each(|v| *v = T::zero());
            }
            continue;
        }
        // SAFETY: bounds asserted above; c does not alias a or b.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr().add(b_off),
                rsb,
                csb,
                beta,
                c_slice.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn transposed_layouts_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                matmul(1, m, k, n, &a, ta, 0, &b, tb, 0, &mut c, false);
                let want = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
