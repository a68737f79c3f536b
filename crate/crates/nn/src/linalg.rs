//! Safe wrapper over the strided GEMM kernels.

use crate::Scalar;

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`, all row-major. With `trans_a` the buffer `a` holds a `k x m`
/// matrix; with `trans_b` the buffer `b` holds an `n x k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs has {} elements, expected {m}x{k}", a.len());
    assert_eq!(b.len(), k * n, "gemm: rhs has {} elements, expected {k}x{n}", b.len());
    assert_eq!(c.len(), m * n, "gemm: out has {} elements, expected {m}x{n}", c.len());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above match the strides chosen for each layout.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
