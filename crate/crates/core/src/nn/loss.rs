//! Batch losses returning `(mean loss, gradient w.r.t. the input)`.

use ndarray::Array2;

use super::softmax_rows;
use crate::scalar::Scalar;

/// Mean softmax cross-entropy over a batch of logits.
pub fn softmax_cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> (f64, Array2<F>) {
    assert_eq!(logits.nrows(), labels.len());
    let mut probs = softmax_rows(logits);
    let n = F::of(labels.len() as f64);
    let mut loss = 0.0;
    for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
        // NaN must survive the floor so divergence stays detectable
        let p = row[y].f64();
        loss -= if p.is_nan() { p } else { p.max(1e-12).ln() };
        row[y] -= F::one();
        row.mapv_inplace(|v| v / n);
    }
    (loss / labels.len() as f64, probs)
}

/// Mean binary cross-entropy on raw logits against a constant target.
pub fn bce_with_logits<F: Scalar>(logits: &Array2<F>, target: f64) -> (f64, Array2<F>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = logits.clone();
    let t = F::of(target);
    let inv_n = F::of(1.0 / n);
    for v in grad.iter_mut() {
        let z = v.f64();
        // log(1 + e^z) - t z, computed stably
        loss += z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let s = F::one() / (F::one() + (-*v).exp());
        *v = (s - t) * inv_n;
    }
    (loss / n, grad)
}

/// Mean cosine distance `1 - cos(a_i, b_i)` over rows and its gradient with
/// respect to `a`. Rows with zero norm contribute a distance of 1 and no
/// gradient.
pub fn cosine_distance<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> (f64, Array2<F>) {
    assert_eq!(a.dim(), b.dim());
    let n = a.nrows() as f64;
    let mut grad = Array2::<F>::zeros(a.raw_dim());
    let mut total = 0.0;
    for ((ra, rb), mut g) in a.rows().into_iter().zip(b.rows()).zip(grad.rows_mut()) {
        let na = ra.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        let nb = rb.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            total += 1.0;
            continue;
        }
        let dot = ra.iter().zip(rb).map(|(x, y)| x.f64() * y.f64()).sum::<f64>();
        let cos = dot / (na * nb);
        total += 1.0 - cos;
        // d(-cos)/da = -(b/(|a||b|) - cos·a/|a|²)
        for ((g, x), y) in g.iter_mut().zip(ra).zip(rb) {
            let d = -(y.f64() / (na * nb) - cos * x.f64() / (na * na));
            *g = F::of(d / n);
        }
    }
    (total / n, grad)
}

/// Row-wise cosine similarity.
pub fn cosine_similarity_rows<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Vec<f64> {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(ra, rb)| cosine(ra.iter().map(|v| v.f64()), rb.iter().map(|v| v.f64())))
        .collect()
}

pub fn cosine(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.into_iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}
