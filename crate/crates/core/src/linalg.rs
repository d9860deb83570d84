//! Small dense helpers shared by the adapter modules. Accumulation is 64-bit.

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[inline]
pub(crate) fn dot_mixed(a: &[f32], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * y).sum()
}

/// `out = m · v` for a row-major `rows × cols` matrix.
pub(crate) fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f32]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(&a, &b)| a * f64::from(b)).sum())
        .collect()
}

/// Index of the maximum; ties resolve to the lowest index.
pub(crate) fn argmax<T: PartialOrd + Copy>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}
