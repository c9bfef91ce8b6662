//! Scalar condition embeddings: sinusoidal features of each input component
//! followed by a two-layer MLP, and the gated combination of forward and
//! backward condition terms.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::AcditError;

/// Embeds a scalar or small vector into d dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarEmbedder {
    pub input_dim: usize,
    pub freqs: Vec<f64>,
    /// hidden x (input_dim * 2 * freqs)
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// d x hidden
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// Forward intermediates needed for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    pub features: DVector<f64>,
    pub hidden: DVector<f64>,
}

impl ScalarEmbedder {
    pub fn feature_dim(input_dim: usize, freq_count: usize) -> usize {
        input_dim * 2 * freq_count
    }

    /// Random initialization. Frequencies are the dyadic ladder 2^0..2^(F-1).
    pub fn init<R: Rng>(
        input_dim: usize,
        freq_count: usize,
        hidden: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let in_dim = Self::feature_dim(input_dim, freq_count);
        let scale1 = 1.0 / (in_dim as f64).sqrt();
        let scale2 = 1.0 / (hidden as f64).sqrt();
        Self {
            input_dim,
            freqs: (0..freq_count).map(|i| (1u64 << i) as f64).collect(),
            w1: DMatrix::from_fn(hidden, in_dim, |_, _| {
                let g: f64 = StandardNormal.sample(rng);
                g * scale1
            }),
            b1: DVector::zeros(hidden),
            w2: DMatrix::from_fn(d, hidden, |_, _| {
                let g: f64 = StandardNormal.sample(rng);
                g * scale2
            }),
            b2: DVector::zeros(d),
        }
    }

    pub fn zeros(input_dim: usize, freq_count: usize, hidden: usize, d: usize) -> Self {
        Self {
            input_dim,
            freqs: (0..freq_count).map(|i| (1u64 << i) as f64).collect(),
            w1: DMatrix::zeros(hidden, Self::feature_dim(input_dim, freq_count)),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(d, hidden),
            b2: DVector::zeros(d),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Sinusoidal features of each component, concatenated.
    pub fn features(&self, input: &[f64]) -> DVector<f64> {
        assert_eq!(input.len(), self.input_dim, "embedder input dimension");
        let mut out = DVector::zeros(Self::feature_dim(self.input_dim, self.freqs.len()));
        let mut idx = 0;
        for &x in input {
            for &w in &self.freqs {
                out[idx] = (w * x).sin();
                out[idx + 1] = (w * x).cos();
                idx += 2;
            }
        }
        out
    }

    pub fn forward(&self, input: &[f64]) -> (DVector<f64>, EmbedCache) {
        let features = self.features(input);
        let hidden = (&self.w1 * &features + &self.b1).map(f64::tanh);
        let out = &self.w2 * &hidden + &self.b2;
        (out, EmbedCache { features, hidden })
    }

    /// Accumulate parameter gradients for one call; inputs are constants.
    pub fn backward(&self, cache: &EmbedCache, d_out: &DVector<f64>, grads: &mut ScalarEmbedder) {
        grads.w2 += d_out * cache.hidden.transpose();
        grads.b2 += d_out;
        let d_hidden = self.w2.transpose() * d_out;
        let d_pre = d_hidden.component_mul(&cache.hidden.map(|h| 1.0 - h * h));
        grads.w1 += &d_pre * cache.features.transpose();
        grads.b1 += d_pre;
    }
}

/// Deterministic embedding of a scalar (or small vector) condition.
pub fn embed_scalar(embedder: &ScalarEmbedder, input: &[f64]) -> DVector<f64> {
    embedder.forward(input).0
}

/// The combined conditioning vector: xi = base + gamma_cond * fut, with the
/// two terms kept for gradient and inspection purposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub base: DVector<f64>,
    pub fut: DVector<f64>,
    pub combined: DVector<f64>,
}

/// xi_base = psi_t + psi_k + psi_a, xi_fut = psi_a_inv + psi_k_f,
/// xi = xi_base + gamma_cond * xi_fut.
pub fn combine_conditions(
    psi_t: &DVector<f64>,
    psi_k: &DVector<f64>,
    psi_a: &DVector<f64>,
    psi_a_inv: &DVector<f64>,
    psi_k_f: &DVector<f64>,
    gamma_cond: f64,
) -> Result<ConditionVector, AcditError> {
    let d = psi_t.len();
    for (name, v) in [
        ("psi_k", psi_k),
        ("psi_a", psi_a),
        ("psi_a_inv", psi_a_inv),
        ("psi_k_f", psi_k_f),
    ] {
        if v.len() != d {
            return Err(AcditError::Shape(format!(
                "{name} has dim {}, expected {d}",
                v.len()
            )));
        }
    }
    let base = psi_t + psi_k + psi_a;
    let fut = psi_a_inv + psi_k_f;
    let combined = &base + &fut * gamma_cond;
    Ok(ConditionVector {
        base,
        fut,
        combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_embed_to_zero() {
        let e = ScalarEmbedder::zeros(1, 4, 8, 16);
        let out = embed_scalar(&e, &[3.7]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = ScalarEmbedder::init(3, 4, 8, 16, &mut rng);
        let a = embed_scalar(&e, &[0.1, -0.4, 2.0]);
        let b = embed_scalar(&e, &[0.1, -0.4, 2.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_is_locally_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = ScalarEmbedder::init(1, 8, 32, 32, &mut rng);
        // Finite-difference slope bound: max frequency * weight norms caps
        // the local rate of change; probe that a measured constant holds.
        let h = 1e-6;
        let mut max_slope: f64 = 0.0;
        for i in 0..10 {
            let v = -2.0 + i as f64 * 0.47;
            let a = embed_scalar(&e, &[v]);
            let b = embed_scalar(&e, &[v + h]);
            max_slope = max_slope.max((&b - &a).norm() / h);
        }
        let c = 2.0 * max_slope.max(1.0);
        for i in 0..10 {
            let v = -1.7 + i as f64 * 0.31;
            let step = 1e-3;
            let a = embed_scalar(&e, &[v]);
            let b = embed_scalar(&e, &[v + step]);
            assert!((&b - &a).norm() <= c * step, "Lipschitz bound violated");
        }
    }

    #[test]
    fn gamma_zero_reduces_to_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let rand_vec =
            |rng: &mut ChaCha8Rng| DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let (t, k, a, ai, kf) = (
            rand_vec(&mut rng),
            rand_vec(&mut rng),
            rand_vec(&mut rng),
            rand_vec(&mut rng),
            rand_vec(&mut rng),
        );
        let c = combine_conditions(&t, &k, &a, &ai, &kf, 0.0).unwrap();
        assert_eq!(c.combined, c.base);
        assert_eq!(c.base, &t + &k + &a);
    }

    #[test]
    fn all_zero_inputs_combine_to_zero() {
        let z = DVector::zeros(4);
        let c = combine_conditions(&z, &z, &z, &z, &z, 0.7).unwrap();
        assert!(c.combined.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cancellation_at_gamma_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 6;
        let t = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let k = DVector::zeros(d);
        let a = DVector::zeros(d);
        // xi_fut = -(xi_base): split across the two future embeddings.
        let ai = -&t * 0.25;
        let kf = -&t * 0.75;
        let c = combine_conditions(&t, &k, &a, &ai, &kf, 1.0).unwrap();
        assert!(c.combined.norm() < 1e-12);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = DVector::zeros(4);
        let b = DVector::zeros(5);
        assert!(combine_conditions(&a, &a, &a, &b, &a, 0.0).is_err());
    }

    #[test]
    fn embedder_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e = ScalarEmbedder::init(2, 4, 8, 6, &mut rng);
        let input = [0.3, -1.1];
        // Scalar objective: sum of the embedding.
        let (out, cache) = e.forward(&input);
        let d_out = DVector::from_element(out.len(), 1.0);
        let mut grads = ScalarEmbedder::zeros(2, 4, 8, 6);
        e.backward(&cache, &d_out, &mut grads);

        let h = 1e-6;
        let mut probe = e.clone();
        for (r, c) in [(0usize, 0usize), (3, 5), (7, 2)] {
            let orig = probe.w1[(r, c)];
            probe.w1[(r, c)] = orig + h;
            let plus: f64 = probe.forward(&input).0.iter().sum();
            probe.w1[(r, c)] = orig - h;
            let minus: f64 = probe.forward(&input).0.iter().sum();
            probe.w1[(r, c)] = orig;
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                (fd - grads.w1[(r, c)]).abs() < 1e-7,
                "w1[{r},{c}]: fd {fd} vs analytic {}",
                grads.w1[(r, c)]
            );
        }
    }
}
