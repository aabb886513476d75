//! Bias-free ReLU MLP backbone with an affine classification head.
//!
//! The backbone layers compute `h_l = relu(W_l h_{l-1})` with no bias of any
//! kind; the head computes `logits = W_head h_L + b_head`. The forward pass
//! records per-layer pre-activations, binary activation masks, and
//! post-activations so the effective weight matrix can be assembled from the
//! trace afterwards.

use crate::linalg::{Matrix, Scalar};
use crate::rng::SplitMix64;

pub const NUM_CLASSES: usize = 10;

/// Reference architecture: 784 -> 128 -> 64 -> 32 backbone, head 32 -> 10.
pub const REFERENCE_DIMS: [usize; 4] = [784, 128, 64, 32];

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("bad dimension list {dims:?}: {reason}")]
    BadDims { dims: Vec<usize>, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<S> {
    /// `W_1 .. W_L`, layer `l` maps `dims[l-1] -> dims[l]`.
    pub backbone: Vec<Matrix<S>>,
    pub head_weight: Matrix<S>,
    pub head_bias: Vec<S>,
    /// `[d_0, d_1, .., d_L]` with `d_0 = 784`.
    pub dims: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ActivationTrace<S> {
    /// `z_l = W_l h_{l-1}` for each backbone layer.
    pub pre_activations: Vec<Vec<S>>,
    /// Diagonals of the activation matrices: 1 iff `z_l[i] > 0`, else 0
    /// (zero pre-activations count as inactive).
    pub masks: Vec<Vec<u8>>,
    /// `h_l = mask_l .* z_l`.
    pub post_activations: Vec<Vec<S>>,
    /// `h_0 = x`.
    pub input: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult<S> {
    pub trace: ActivationTrace<S>,
    /// `h_L`, the backbone output.
    pub backbone_output: Vec<S>,
    /// Pre-softmax head output.
    pub logits: Vec<S>,
}

/// Gradients shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub backbone: Vec<Matrix<S>>,
    pub head_weight: Matrix<S>,
    pub head_bias: Vec<S>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(model: &MlpModel<S>) -> Self {
        Self {
            backbone: model
                .backbone
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            head_weight: Matrix::zeros(model.head_weight.rows(), model.head_weight.cols()),
            head_bias: vec![S::zero(); model.head_bias.len()],
        }
    }

    pub fn add_scaled(&mut self, alpha: S, other: &Gradients<S>) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            a.add_scaled(alpha, b);
        }
        self.head_weight.add_scaled(alpha, &other.head_weight);
        for (a, &b) in self.head_bias.iter_mut().zip(&other.head_bias) {
            *a = *a + alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: S) {
        for w in &mut self.backbone {
            for v in w.data_mut() {
                *v = *v * alpha;
            }
        }
        for v in self.head_weight.data_mut() {
            *v = *v * alpha;
        }
        for v in &mut self.head_bias {
            *v = *v * alpha;
        }
    }
}

pub fn relu<S: Scalar>(z: S) -> S {
    if z > S::zero() {
        z
    } else {
        S::zero()
    }
}

/// Initialize with He-uniform fan-in scaling: each `W_l` entry i.i.d. uniform
/// on `[-sqrt(6/d_in), +sqrt(6/d_in)]`, head bias zero. Deterministic given
/// `seed`; entries are drawn row-major, backbone layers first, head last.
pub fn init_model<S: Scalar>(dims: &[usize], seed: u64) -> Result<MlpModel<S>, NetworkError> {
    if dims.len() < 2 {
        return Err(NetworkError::BadDims {
            dims: dims.to_vec(),
            reason: "need at least input and one backbone layer".into(),
        });
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(NetworkError::BadDims {
            dims: dims.to_vec(),
            reason: "non-positive dimension".into(),
        });
    }
    let mut rng = SplitMix64::new(seed);
    let mut fill = |rows: usize, cols: usize| -> Matrix<S> {
        let bound = (6.0 / cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| S::from_f64(rng.next_range(-bound, bound)))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let backbone: Vec<Matrix<S>> = (1..dims.len()).map(|l| fill(dims[l], dims[l - 1])).collect();
    let head_weight = fill(NUM_CLASSES, dims[dims.len() - 1]);
    Ok(MlpModel {
        backbone,
        head_weight,
        head_bias: vec![S::zero(); NUM_CLASSES],
        dims: dims.to_vec(),
        seed,
    })
}

/// Forward pass with activation tracing. Pure function of `(model, x)`.
pub fn forward<S: Scalar>(model: &MlpModel<S>, x: &[S]) -> Result<ForwardResult<S>, NetworkError> {
    if x.len() != model.dims[0] {
        return Err(NetworkError::ShapeMismatch(format!(
            "input dim {} != {}",
            x.len(),
            model.dims[0]
        )));
    }
    let layers = model.backbone.len();
    let mut pre_activations = Vec::with_capacity(layers);
    let mut masks = Vec::with_capacity(layers);
    let mut post_activations = Vec::with_capacity(layers);
    let mut h = x.to_vec();
    for w in &model.backbone {
        let z = w.matvec(&h);
        let mask: Vec<u8> = z.iter().map(|&v| u8::from(v > S::zero())).collect();
        h = z.iter().map(|&v| relu(v)).collect();
        pre_activations.push(z);
        masks.push(mask);
        post_activations.push(h.clone());
    }
    let mut logits = model.head_weight.matvec(&h);
    for (l, &b) in logits.iter_mut().zip(&model.head_bias) {
        *l = *l + b;
    }
    Ok(ForwardResult {
        trace: ActivationTrace {
            pre_activations,
            masks,
            post_activations,
            input: x.to_vec(),
        },
        backbone_output: h,
        logits,
    })
}

/// Numerically stable `softmax(logits) - onehot(label)`.
pub fn softmax_grad<S: Scalar>(logits: &[S], label: u8) -> Vec<S> {
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: S = exps.iter().cloned().sum();
    exps.iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = e / sum;
            if i == label as usize {
                p - S::one()
            } else {
                p
            }
        })
        .collect()
}

/// Analytic backprop of the softmax cross-entropy loss through the head and
/// the mask-gated backbone. The gradient through the ReLU at layer `l` is the
/// entrywise product with `masks[l]` (subgradient 0 at exactly-zero
/// pre-activations).
pub fn backward<S: Scalar>(
    model: &MlpModel<S>,
    result: &ForwardResult<S>,
    label: u8,
) -> Result<Gradients<S>, NetworkError> {
    if result.logits.len() != model.head_bias.len() {
        return Err(NetworkError::ShapeMismatch("logit count".into()));
    }
    let mut grads = Gradients::zeros_like(model);
    let delta_head = softmax_grad(&result.logits, label);
    grads
        .head_weight
        .add_outer(S::one(), &delta_head, &result.backbone_output);
    grads.head_bias.copy_from_slice(&delta_head);

    // Gradient w.r.t. h_L, then walk the backbone in reverse.
    let mut dh = model.head_weight.matvec_transpose(&delta_head);
    for l in (0..model.backbone.len()).rev() {
        let delta: Vec<S> = dh
            .iter()
            .zip(&result.trace.masks[l])
            .map(|(&g, &m)| if m == 1 { g } else { S::zero() })
            .collect();
        let prev = if l == 0 {
            &result.trace.input
        } else {
            &result.trace.post_activations[l - 1]
        };
        grads.backbone[l].add_outer(S::one(), &delta, prev);
        if l > 0 {
            dh = model.backbone[l].matvec_transpose(&delta);
        }
    }
    Ok(grads)
}

/// Predicted class: argmax over logits (first maximum on ties).
pub fn predict<S: Scalar>(logits: &[S]) -> u8 {
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best as u8
}

/// Flatten all parameters into one vector, layer order, head last (weight
/// then bias). Matches the checkpoint serialization order.
pub fn flatten_params<S: Scalar>(model: &MlpModel<S>) -> Vec<S> {
    let mut out = Vec::new();
    for w in &model.backbone {
        out.extend_from_slice(w.data());
    }
    out.extend_from_slice(model.head_weight.data());
    out.extend_from_slice(&model.head_bias);
    out
}

/// Inverse of [`flatten_params`].
pub fn unflatten_params<S: Scalar>(model: &mut MlpModel<S>, params: &[S]) {
    let mut off = 0;
    for w in &mut model.backbone {
        let n = w.rows() * w.cols();
        w.data_mut().copy_from_slice(&params[off..off + n]);
        off += n;
    }
    let n = model.head_weight.rows() * model.head_weight.cols();
    model.head_weight.data_mut().copy_from_slice(&params[off..off + n]);
    off += n;
    let n_bias = model.head_bias.len();
    model.head_bias.copy_from_slice(&params[off..off + n_bias]);
}

pub fn promote_to_f64(model: &MlpModel<f32>) -> MlpModel<f64> {
    MlpModel {
        backbone: model.backbone.iter().map(|w| w.map(|v| v as f64)).collect(),
        head_weight: model.head_weight.map(|v| v as f64),
        head_bias: model.head_bias.iter().map(|&v| v as f64).collect(),
        dims: model.dims.clone(),
        seed: model.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_model(seed: u64) -> MlpModel<f64> {
        init_model(&[6, 5, 4, 3], seed).unwrap()
    }

    fn random_input(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.next_range(-1.0, 1.0)).collect()
    }

    #[test]
    fn relu_branches() {
        assert_eq!(relu(-1.5f64), 0.0);
        assert_eq!(relu(2.0f64), 2.0);
        assert_eq!(relu(0.0f64), 0.0);
    }

    #[test]
    fn init_deterministic_and_bounded() {
        let a: MlpModel<f32> = init_model(&[784, 128, 64, 32], 7).unwrap();
        let b: MlpModel<f32> = init_model(&[784, 128, 64, 32], 7).unwrap();
        assert_eq!(a, b);
        let bound = (6.0f64 / 784.0).sqrt() as f32;
        assert!(a.backbone[0].data().iter().all(|v| v.abs() <= bound));
        assert_eq!(a.head_bias, vec![0.0; 10]);
    }

    #[test]
    fn init_rejects_zero_dim() {
        assert!(matches!(
            init_model::<f32>(&[784, 0, 32], 1),
            Err(NetworkError::BadDims { .. })
        ));
    }

    #[test]
    fn zero_input_gives_head_bias_logits() {
        let mut m = small_model(3);
        m.head_bias = vec![0.5; 10];
        let r = forward(&m, &[0.0; 6]).unwrap();
        assert!(r.trace.masks.iter().all(|m| m.iter().all(|&b| b == 0)));
        assert!(r.backbone_output.iter().all(|&v| v == 0.0));
        assert_eq!(r.logits, vec![0.5; 10]);
    }

    #[test]
    fn identity_layer_passes_positive_input() {
        let mut m: MlpModel<f64> = init_model(&[3, 3], 1).unwrap();
        let mut w = Matrix::zeros(3, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        m.backbone[0] = w;
        let x = [0.5, 1.0, 2.0];
        let r = forward(&m, &x).unwrap();
        assert_eq!(r.backbone_output, x.to_vec());
        assert_eq!(r.trace.masks[0], vec![1, 1, 1]);
    }

    // Independent oracle: scalar triple-loop forward pass.
    fn naive_forward(model: &MlpModel<f64>, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for w in &model.backbone {
            let mut next = vec![0.0; w.rows()];
            for i in 0..w.rows() {
                let mut acc = 0.0;
                for j in 0..w.cols() {
                    acc += w.get(i, j) * h[j];
                }
                next[i] = if acc > 0.0 { acc } else { 0.0 };
            }
            h = next;
        }
        h
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let m = small_model(11);
        let mut rng = SplitMix64::new(99);
        for _ in 0..20 {
            let x = random_input(&mut rng, 6);
            let fast = forward(&m, &x).unwrap().backbone_output;
            let slow = naive_forward(&m, &x);
            for (a, b) in fast.iter().zip(&slow) {
                let scale = b.abs().max(1e-12);
                assert!((a - b).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_logits_output_error() {
        let delta = softmax_grad(&[1.0f64; 10], 3);
        for (i, &d) in delta.iter().enumerate() {
            let want = if i == 3 { 0.1 - 1.0 } else { 0.1 };
            assert!((d - want).abs() < 1e-12);
        }
    }

    fn loss(model: &MlpModel<f64>, x: &[f64], label: u8) -> f64 {
        crate::training::cross_entropy(&forward(model, x).unwrap().logits, label)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = small_model(5);
        let mut rng = SplitMix64::new(17);
        let batch: Vec<(Vec<f64>, u8)> = (0..10)
            .map(|i| (random_input(&mut rng, 6), (i % 10) as u8))
            .collect();

        let mut analytic = Gradients::zeros_like(&m);
        for (x, y) in &batch {
            let r = forward(&m, x).unwrap();
            analytic.add_scaled(1.0, &backward(&m, &r, *y).unwrap());
        }
        let analytic_flat: Vec<f64> = {
            let mut tmp = init_model::<f64>(&[6, 5, 4, 3], 0).unwrap();
            tmp.backbone = analytic.backbone.clone();
            tmp.head_weight = analytic.head_weight.clone();
            tmp.head_bias = analytic.head_bias.clone();
            flatten_params(&tmp)
        };

        let params = flatten_params(&m);
        let step = 1e-3;
        for (k, &g) in analytic_flat.iter().enumerate() {
            let mut plus = params.clone();
            plus[k] += step;
            unflatten_params(&mut m, &plus);
            let lp: f64 = batch.iter().map(|(x, y)| loss(&m, x, *y)).sum();
            let mut minus = params.clone();
            minus[k] -= step;
            unflatten_params(&mut m, &minus);
            let lm: f64 = batch.iter().map(|(x, y)| loss(&m, x, *y)).sum();
            unflatten_params(&mut m, &params);
            let fd = (lp - lm) / (2.0 * step);
            let scale = fd.abs().max(g.abs()).max(1e-6);
            assert!(
                (fd - g).abs() / scale < 1e-4,
                "param {k}: analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn dead_layer_blocks_gradient() {
        let mut m = small_model(2);
        // Force layer 1 fully inactive for a positive input.
        for v in m.backbone[0].data_mut() {
            *v = -(v.abs());
        }
        let x = [1.0, 0.5, 0.25, 1.0, 0.75, 0.5];
        let r = forward(&m, &x).unwrap();
        assert!(r.trace.masks[0].iter().all(|&b| b == 0));
        let g = backward(&m, &r, 0).unwrap();
        assert!(g.backbone[0].data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        // masks[l][i] == 1 exactly when pre_activations[l][i] > 0.
        #[test]
        fn mask_consistency(seed in any::<u64>(), xseed in any::<u64>()) {
            let m = small_model(seed);
            let mut rng = SplitMix64::new(xseed);
            let x = random_input(&mut rng, 6);
            let r = forward(&m, &x).unwrap();
            for (z, mask) in r.trace.pre_activations.iter().zip(&r.trace.masks) {
                for (&zi, &mi) in z.iter().zip(mask) {
                    prop_assert_eq!(mi == 1, zi > 0.0);
                }
            }
        }

        // Positive homogeneity of the bias-free backbone.
        #[test]
        fn positive_homogeneity(seed in any::<u64>(), xseed in any::<u64>(), alpha in 0.1f64..10.0) {
            let m = small_model(seed);
            let mut rng = SplitMix64::new(xseed);
            let x = random_input(&mut rng, 6);
            let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            let a = forward(&m, &x).unwrap();
            let b = forward(&m, &scaled).unwrap();
            prop_assert_eq!(&a.trace.masks, &b.trace.masks);
            for (&ha, &hb) in a.backbone_output.iter().zip(&b.backbone_output) {
                let scale = (ha * alpha).abs().max(1e-9);
                prop_assert!((ha * alpha - hb).abs() / scale < 1e-9);
            }
        }
    }
}
