use super::Scalar;

/// `a (n×k) · b (k×m)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![T::zero(); n * m];
    for (i, out_row) in out.chunks_exact_mut(m.max(1)).enumerate().take(n) {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · g` for `a (n×k)`, `g (n×m)`; result `k×m`.
pub fn matmul_at_b<T: Scalar>(a: &[T], g: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(g.len(), n * m);
    let mut out = vec![T::zero(); k * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `g · bᵀ` for `g (n×m)`, `b (k×m)`; result `n×k`.
pub fn matmul_a_bt<T: Scalar>(g: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    debug_assert_eq!(g.len(), n * m);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let g_row = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let b_row = &b[p * m..(p + 1) * m];
            out[i * k + p] = g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}
