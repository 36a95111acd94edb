//! Scalar and slice helpers shared by the numeric modules.

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

/// Dot product with eight fixed lane accumulators. The summation order
/// depends only on the slice length, so results are reproducible across
/// call sites.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Cosine similarity, clamped to [-1, 1]. Zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let ab = dot(a, b);
    let aa = dot(a, a);
    let bb = dot(b, b);
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / sqrt(aa * bb)).clamp(-1.0, 1.0)
}

pub fn sub(a: &[f64], b: &[f64]) -> alloc::vec::Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> alloc::vec::Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Row-wise log-softmax of a single row.
pub fn log_softmax(row: &[f64]) -> alloc::vec::Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + ln(row.iter().map(|v| exp(v - max)).sum::<f64>());
    row.iter().map(|v| v - lse).collect()
}

/// Mean negative log-likelihood of `target` classes over logits rows.
pub fn mean_nll<'a>(rows: impl IntoIterator<Item = (&'a [f64], usize)>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, t) in rows {
        total -= log_softmax(row)[t];
        n += 1;
    }
    total / n as f64
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, ordered by value then by index.
pub fn top_k(row: &[f64], k: usize) -> alloc::vec::Vec<usize> {
    let mut idx: alloc::vec::Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}
