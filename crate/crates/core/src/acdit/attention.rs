//! Single-head scaled dot-product attention with optional boolean masking,
//! forward and backward.
//!
//! Masks arrive in the stored orientation (rows = source tokens, columns =
//! goal tokens) and are transposed here to query orientation: query row i
//! may attend key j iff the mask allows (source j, goal i).

use nalgebra::DMatrix;

use crate::mask::AttentionMask;

use super::AcditError;

/// Row-wise softmax over logits with -inf entries marking disallowed keys.
fn masked_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for i in 0..out.nrows() {
        let mut max = f64::NEG_INFINITY;
        for j in 0..out.ncols() {
            max = max.max(out[(i, j)]);
        }
        let mut sum = 0.0;
        for j in 0..out.ncols() {
            let e = if out[(i, j)] == f64::NEG_INFINITY {
                0.0
            } else {
                (out[(i, j)] - max).exp()
            };
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..out.ncols() {
            out[(i, j)] /= sum;
        }
    }
    out
}

/// Attention output together with the weight matrix needed for backprop.
pub(super) struct AttentionCache {
    pub weights: DMatrix<f64>,
}

pub(super) fn attention_forward(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mask: Option<&AttentionMask>,
) -> Result<(DMatrix<f64>, AttentionCache), AcditError> {
    let d = q.ncols();
    if k.ncols() != d || v.nrows() != k.nrows() {
        return Err(AcditError::Shape(format!(
            "attention shapes q {}x{}, k {}x{}, v {}x{}",
            q.nrows(),
            q.ncols(),
            k.nrows(),
            k.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = q * k.transpose() * scale;
    if let Some(mask) = mask {
        if mask.token_count() != k.nrows() || mask.token_count() != q.nrows() {
            return Err(AcditError::Shape(format!(
                "mask over {} tokens against q {} / k {}",
                mask.token_count(),
                q.nrows(),
                k.nrows()
            )));
        }
        for i in 0..logits.nrows() {
            let mut any = false;
            for j in 0..logits.ncols() {
                // Stored orientation is source x goal; queries are goal tokens.
                if mask.allows(j, i) {
                    any = true;
                } else {
                    logits[(i, j)] = f64::NEG_INFINITY;
                }
            }
            if !any {
                return Err(AcditError::EmptyAttentionRow { row: i });
            }
        }
    }
    let weights = masked_softmax(&logits);
    let out = &weights * v;
    Ok((out, AttentionCache { weights }))
}

/// Backward of [`attention_forward`]. Returns (dq, dk, dv).
pub(super) fn attention_backward(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    cache: &AttentionCache,
    d_out: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = &cache.weights;
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let d_a = d_out * v.transpose();
    let d_v = a.transpose() * d_out;
    // Softmax backward per row; masked entries have a == 0 and drop out.
    let mut d_s = DMatrix::zeros(a.nrows(), a.ncols());
    for i in 0..a.nrows() {
        let mut dot = 0.0;
        for j in 0..a.ncols() {
            dot += d_a[(i, j)] * a[(i, j)];
        }
        for j in 0..a.ncols() {
            d_s[(i, j)] = a[(i, j)] * (d_a[(i, j)] - dot);
        }
    }
    let d_q = &d_s * k * scale;
    let d_k = d_s.transpose() * q * scale;
    (d_q, d_k, d_v)
}

/// Scaled dot-product attention between projected queries and key/value
/// token matrices under a stored-orientation mask. Disallowed logits are set
/// to -inf before the softmax; a query row left without any allowed key is
/// an error (the mask invariant prevents it for masks built by this crate).
pub fn masked_cross_attention(
    queries: &DMatrix<f64>,
    keys: &DMatrix<f64>,
    values: &DMatrix<f64>,
    mask: &AttentionMask,
) -> Result<DMatrix<f64>, AcditError> {
    attention_forward(queries, keys, values, Some(mask)).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn all_true_mask_equals_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, d) = (12, 6);
        let q = random_matrix(l, d, &mut rng);
        let k = random_matrix(l, d, &mut rng);
        let v = random_matrix(l, d, &mut rng);
        let masked = masked_cross_attention(&q, &k, &v, &AttentionMask::all_true(l)).unwrap();
        let (unmasked, _) = attention_forward(&q, &k, &v, None).unwrap();
        assert!((&masked - &unmasked).norm() < 1e-12);
    }

    #[test]
    fn singleton_mask_selects_value_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (l, d) = (6, 4);
        let q = random_matrix(l, d, &mut rng);
        let k = random_matrix(l, d, &mut rng);
        let v = random_matrix(l, d, &mut rng);
        // Query i may only attend key (i + 1) % l: constrain source row j to
        // goal column (j + l - 1) % l.
        let mut mask = AttentionMask::all_true(l);
        for j in 0..l {
            mask.constrain(j, (j + l - 1) % l);
        }
        let out = masked_cross_attention(&q, &k, &v, &mask).unwrap();
        for i in 0..l {
            let expect = v.row((i + 1) % l);
            for c in 0..d {
                assert_relative_eq!(out[(i, c)], expect[c], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let (lq, lk, d) = (5, 5, 3);
            let q = random_matrix(lq, d, &mut rng);
            let k = random_matrix(lk, d, &mut rng);
            let v = random_matrix(lk, d, &mut rng);
            // Leave the upper rows unconstrained so every query keeps at
            // least one allowed key.
            let mut mask = AttentionMask::all_true(lk);
            for j in 0..lk / 2 {
                if rng.random_bool(0.7) {
                    mask.constrain(j, rng.random_range(0..lk));
                    mask.constrain(j, rng.random_range(0..lk));
                }
            }
            let (_, cache) = attention_forward(&q, &k, &v, Some(&mask)).unwrap();
            for i in 0..lq {
                let mut sum = 0.0;
                for j in 0..lk {
                    let w = cache.weights[(i, j)];
                    assert!(w >= 0.0);
                    if !mask.allows(j, i) {
                        assert_eq!(w, 0.0);
                    }
                    sum += w;
                }
                assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn empty_query_row_is_an_error() {
        let (l, d) = (3, 2);
        let q = DMatrix::zeros(l, d);
        let k = DMatrix::zeros(l, d);
        let v = DMatrix::zeros(l, d);
        // Constrain every source row away from goal 0.
        let mut mask = AttentionMask::all_true(l);
        for j in 0..l {
            mask.constrain(j, 1);
        }
        assert!(matches!(
            masked_cross_attention(&q, &k, &v, &mask),
            Err(AcditError::EmptyAttentionRow { row: 0 })
        ));
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (l, d) = (5, 4);
        let q = random_matrix(l, d, &mut rng);
        let k = random_matrix(l, d, &mut rng);
        let v = random_matrix(l, d, &mut rng);
        let mut mask = AttentionMask::all_true(l);
        mask.constrain(2, 0);
        mask.constrain(2, 3);

        let objective = |q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>| -> f64 {
            let (out, _) = attention_forward(q, k, v, Some(&mask)).unwrap();
            out.iter().map(|&x| x * x).sum::<f64>()
        };
        let (out, cache) = attention_forward(&q, &k, &v, Some(&mask)).unwrap();
        let d_out = out.map(|x| 2.0 * x);
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &cache, &d_out);

        let h = 1e-6;
        let check = |analytic: &DMatrix<f64>, target: &str| {
            let mut probe_q = q.clone();
            let mut probe_k = k.clone();
            let mut probe_v = v.clone();
            for (r, c) in [(0usize, 0usize), (2, 3), (4, 1)] {
                let m = match target {
                    "q" => &mut probe_q,
                    "k" => &mut probe_k,
                    _ => &mut probe_v,
                };
                let orig = m[(r, c)];
                m[(r, c)] = orig + h;
                let plus = objective(&probe_q, &probe_k, &probe_v);
                let m = match target {
                    "q" => &mut probe_q,
                    "k" => &mut probe_k,
                    _ => &mut probe_v,
                };
                m[(r, c)] = orig - h;
                let minus = objective(&probe_q, &probe_k, &probe_v);
                let m = match target {
                    "q" => &mut probe_q,
                    "k" => &mut probe_k,
                    _ => &mut probe_v,
                };
                m[(r, c)] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic[(r, c)];
                assert!(
                    (fd - a).abs() <= 1e-6 * fd.abs().max(a.abs()).max(1.0),
                    "{target}[{r},{c}]: fd {fd} vs analytic {a}"
                );
            }
        };
        check(&dq, "q");
        check(&dk, "k");
        check(&dv, "v");
    }
}
