//! Per-sample effective weight matrices.
//!
//! For a bias-free ReLU backbone, the forward pass of a single input `x`
//! applies the linear map `(D_L W_L) ... (D_1 W_1)` where `D_l` is the
//! diagonal 0/1 activation matrix of layer `l`. [`compose`] builds that
//! product from a recorded trace, realizing each `D_l W_l` factor as
//! row-masking (zeroing the inactive rows) and accumulating from layer 1
//! upward so intermediate shapes stay minimal.

use crate::linalg::{Matrix, Scalar};
use crate::network::{forward, ActivationTrace, MlpModel, NetworkError};
use crate::parallel::par_map;

#[derive(Debug, thiserror::Error)]
pub enum EffWeightError {
    #[error("layer {layer} out of range 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// The composed matrix `W_eff(x)` for one sample: shape `(d_L, d_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveWeight<S> {
    pub matrix: Matrix<S>,
    pub sample_ref: usize,
    pub label: u8,
}

/// `vec(W_eff)`: row-major flattening of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatWeightVector<S> {
    pub values: Vec<S>,
    pub sample_ref: usize,
    pub label: u8,
}

/// Residuals of the linearization identity `W_eff(x) x = h_L(x)`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualReport {
    pub max_abs: f64,
    pub max_rel: f64,
}

/// Diagonal of `D_l(x)` for 1-based layer `l`: entry `i` is 1 iff
/// `z_l[i] > 0` (zero counts as inactive).
pub fn mask_diag<S: Scalar>(
    trace: &ActivationTrace<S>,
    layer: usize,
) -> Result<Vec<u8>, EffWeightError> {
    let layers = trace.masks.len();
    if layer == 0 || layer > layers {
        return Err(EffWeightError::LayerOutOfRange { layer, layers });
    }
    Ok(trace.masks[layer - 1].clone())
}

/// Compose `W_eff(x) = (D_L W_L) ... (D_1 W_1)` from a trace recorded by
/// [`forward`] on the same model.
pub fn compose<S: Scalar>(
    model: &MlpModel<S>,
    trace: &ActivationTrace<S>,
    sample_ref: usize,
    label: u8,
) -> Result<EffectiveWeight<S>, EffWeightError> {
    if trace.masks.len() != model.backbone.len() {
        return Err(NetworkError::ShapeMismatch("trace layer count".into()).into());
    }
    // Layer 1: W_1 with inactive rows zeroed.
    let mut acc = model.backbone[0].clone();
    zero_inactive_rows(&mut acc, &trace.masks[0]);
    // Layers 2..L: multiply on the left, then row-mask the product.
    for l in 1..model.backbone.len() {
        let mut next = model.backbone[l].matmul(&acc);
        zero_inactive_rows(&mut next, &trace.masks[l]);
        acc = next;
    }
    Ok(EffectiveWeight {
        matrix: acc,
        sample_ref,
        label,
    })
}

fn zero_inactive_rows<S: Scalar>(m: &mut Matrix<S>, mask: &[u8]) {
    assert_eq!(m.rows(), mask.len(), "mask length mismatch");
    for (r, &active) in mask.iter().enumerate() {
        if active == 0 {
            m.row_mut(r).fill(S::zero());
        }
    }
}

/// Check `W_eff(x) x = h_L(x)` for one sample: runs the forward pass,
/// composes the effective weight, and reports the worst absolute and
/// relative residual over output coordinates.
pub fn verify_identity<S: Scalar>(
    model: &MlpModel<S>,
    x: &[S],
) -> Result<ResidualReport, EffWeightError> {
    let result = forward(model, x)?;
    let eff = compose(model, &result.trace, 0, 0)?;
    Ok(residuals(&eff.matrix, x, &result.backbone_output))
}

/// Residuals between `m * x` and a reference output vector.
pub fn residuals<S: Scalar>(m: &Matrix<S>, x: &[S], reference: &[S]) -> ResidualReport {
    let wx = m.matvec(x);
    let max_abs = wx
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
        .fold(0.0, f64::max);
    let denom = reference.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max) + 1e-12;
    ResidualReport {
        max_abs,
        max_rel: max_abs / denom,
    }
}

/// Row-major flattening; metadata carried through.
pub fn flatten<S: Scalar>(w: &EffectiveWeight<S>) -> FlatWeightVector<S> {
    FlatWeightVector {
        values: w.matrix.data().to_vec(),
        sample_ref: w.sample_ref,
        label: w.label,
    }
}

/// Effective weights for a batch of samples against a frozen model. Output
/// order matches input order; samples fan out across threads.
pub fn batch_effective_weights<S: Scalar>(
    model: &MlpModel<S>,
    samples: &[(Vec<S>, usize, u8)],
) -> Result<Vec<EffectiveWeight<S>>, EffWeightError> {
    let results = par_map(samples.len(), |i| {
        let (x, sample_ref, label) = &samples[i];
        let r = forward(model, x)?;
        compose(model, &r.trace, *sample_ref, *label)
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_model;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random_input(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.next_range(-1.0, 1.0)).collect()
    }

    // Literal dense oracle: explicit diagonal matrices multiplied in the
    // written right-to-left order.
    fn dense_compose(model: &MlpModel<f64>, trace: &ActivationTrace<f64>) -> Matrix<f64> {
        let mut factors: Vec<Matrix<f64>> = Vec::new();
        for (l, w) in model.backbone.iter().enumerate() {
            let d = diag(&trace.masks[l]);
            factors.push(d.matmul(w));
        }
        // product from l = L down to 1
        let mut acc = factors.pop().unwrap();
        while let Some(f) = factors.pop() {
            acc = acc.matmul(&f);
        }
        acc
    }

    fn diag(mask: &[u8]) -> Matrix<f64> {
        let mut m = Matrix::zeros(mask.len(), mask.len());
        for (i, &b) in mask.iter().enumerate() {
            if b == 1 {
                m.set(i, i, 1.0);
            }
        }
        m
    }

    #[test]
    fn mask_diag_thresholds() {
        let m: MlpModel<f64> = init_model(&[3, 3], 1).unwrap();
        let mut trace = forward(&m, &[0.1, 0.2, 0.3]).unwrap().trace;
        trace.pre_activations[0] = vec![3.0, -0.5, 0.0];
        trace.masks[0] = trace.pre_activations[0]
            .iter()
            .map(|&z| u8::from(z > 0.0))
            .collect();
        assert_eq!(mask_diag(&trace, 1).unwrap(), vec![1, 0, 0]);
        assert!(matches!(
            mask_diag(&trace, 2),
            Err(EffWeightError::LayerOutOfRange { layer: 2, .. })
        ));
        assert!(matches!(
            mask_diag(&trace, 0),
            Err(EffWeightError::LayerOutOfRange { layer: 0, .. })
        ));
    }

    #[test]
    fn single_layer_all_active_is_w1() {
        let m: MlpModel<f64> = init_model(&[4, 3], 5).unwrap();
        let mut trace = forward(&m, &[0.0; 4]).unwrap().trace;
        trace.masks[0] = vec![1, 1, 1];
        let eff = compose(&m, &trace, 0, 0).unwrap();
        assert_eq!(eff.matrix, m.backbone[0]);
    }

    #[test]
    fn fully_inactive_layer_zeroes_product() {
        let m: MlpModel<f64> = init_model(&[4, 3, 3], 5).unwrap();
        let mut trace = forward(&m, &[0.5, -0.5, 0.25, 1.0]).unwrap().trace;
        trace.masks[1] = vec![0, 0, 0];
        let eff = compose(&m, &trace, 0, 0).unwrap();
        assert!(eff.matrix.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_matches_dense_oracle() {
        let mut rng = SplitMix64::new(2024);
        for trial in 0..20 {
            let m: MlpModel<f64> = init_model(&[6, 5, 4, 3], 100 + trial).unwrap();
            let x = random_input(&mut rng, 6);
            let trace = forward(&m, &x).unwrap().trace;
            let fast = compose(&m, &trace, 0, 0).unwrap().matrix;
            let slow = dense_compose(&m, &trace);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                let scale = b.abs().max(1e-12);
                assert!((a - b).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn identity_holds_in_f64() {
        let mut rng = SplitMix64::new(31);
        let m: MlpModel<f64> = init_model(&[8, 6, 5, 4], 9).unwrap();
        for _ in 0..50 {
            let x = random_input(&mut rng, 8);
            let r = verify_identity(&m, &x).unwrap();
            assert!(r.max_rel <= 1e-10, "relative residual {}", r.max_rel);
        }
    }

    #[test]
    fn identity_on_zero_input() {
        let m: MlpModel<f64> = init_model(&[8, 6, 4], 9).unwrap();
        let r = verify_identity(&m, &[0.0; 8]).unwrap();
        assert_eq!(r.max_abs, 0.0);
    }

    #[test]
    fn flatten_row_major_and_invertible() {
        let w = EffectiveWeight {
            matrix: Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]),
            sample_ref: 42,
            label: 3,
        };
        let flat = flatten(&w);
        assert_eq!(flat.values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(flat.sample_ref, 42);
        assert_eq!(flat.label, 3);
        let back = Matrix::from_vec(2, 3, flat.values.clone());
        assert_eq!(back, w.matrix);
    }

    #[test]
    fn batch_matches_single_calls() {
        let m: MlpModel<f64> = init_model(&[6, 5, 4], 77).unwrap();
        let mut rng = SplitMix64::new(4);
        let samples: Vec<(Vec<f64>, usize, u8)> = (0..16)
            .map(|i| (random_input(&mut rng, 6), i, (i % 10) as u8))
            .collect();
        let batch = batch_effective_weights(&m, &samples).unwrap();
        for (i, (x, sref, label)) in samples.iter().enumerate() {
            let r = forward(&m, x).unwrap();
            let single = compose(&m, &r.trace, *sref, *label).unwrap();
            assert_eq!(batch[i], single);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        // Region constancy: identical masks => bitwise-identical W_eff.
        #[test]
        fn region_constancy(seed in any::<u64>(), xseed in any::<u64>()) {
            let m: MlpModel<f64> = init_model(&[5, 4, 3], seed).unwrap();
            let mut rng = SplitMix64::new(xseed);
            let x = random_input(&mut rng, 5);
            let t1 = forward(&m, &x).unwrap().trace;
            // A positively scaled input lies in the same linear region.
            let x2: Vec<f64> = x.iter().map(|v| v * 2.5).collect();
            let t2 = forward(&m, &x2).unwrap().trace;
            prop_assert_eq!(&t1.masks, &t2.masks);
            let w1 = compose(&m, &t1, 0, 0).unwrap();
            let w2 = compose(&m, &t2, 0, 0).unwrap();
            prop_assert_eq!(w1.matrix.data(), w2.matrix.data());
        }

        // Positive-scaling invariance of W_eff itself.
        #[test]
        fn positive_scaling_invariance(
            seed in any::<u64>(),
            xseed in any::<u64>(),
            alpha in 0.01f64..100.0,
        ) {
            let m: MlpModel<f64> = init_model(&[5, 4, 3], seed).unwrap();
            let mut rng = SplitMix64::new(xseed);
            let x = random_input(&mut rng, 5);
            let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            let w1 = compose(&m, &forward(&m, &x).unwrap().trace, 0, 0).unwrap();
            let w2 = compose(&m, &forward(&m, &scaled).unwrap().trace, 0, 0).unwrap();
            prop_assert_eq!(w1.matrix.data(), w2.matrix.data());
        }

        // Any all-zero mask layer forces W_eff = 0.
        #[test]
        fn zero_annihilation(seed in any::<u64>(), layer in 0usize..3) {
            let m: MlpModel<f64> = init_model(&[5, 4, 4, 3], seed).unwrap();
            let mut trace = forward(&m, &[0.3, -0.2, 0.5, 0.1, -0.4]).unwrap().trace;
            let width = trace.masks[layer].len();
            trace.masks[layer] = vec![0; width];
            let w = compose(&m, &trace, 0, 0).unwrap();
            prop_assert!(w.matrix.data().iter().all(|&v| v == 0.0));
        }

        // Linearization identity under random models and inputs.
        #[test]
        fn linearization_identity(seed in any::<u64>(), xseed in any::<u64>()) {
            let m: MlpModel<f64> = init_model(&[7, 6, 5, 4], seed).unwrap();
            let mut rng = SplitMix64::new(xseed);
            let x = random_input(&mut rng, 7);
            let r = verify_identity(&m, &x).unwrap();
            prop_assert!(r.max_rel <= 1e-10);
        }
    }
}
