//! The time-difference pipeline: inter-interaction gaps, global time-aware
//! enhancement, and zero-order-hold discretization into decay coefficients.

use crate::error::{Error, Result};
use crate::tape::{Tape, UnaryOp};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;

/// Inter-item time differences: `raw` gaps (first entry zero) and their
/// length-axis layer normalization.
#[derive(Clone, Debug)]
pub struct TimeDiffSeq {
    pub raw: Vec<f32>,
    pub values: Vec<f32>,
}

/// Gaps between consecutive timestamps; position 0 carries no predecessor and
/// gets zero. `values` is the plain (gamma=1, beta=0) normalization of `raw`.
pub fn compute_time_diffs(timestamps: &[i64]) -> Result<TimeDiffSeq> {
    if timestamps.is_empty() {
        return Err(Error::Contract { op: "compute_time_diffs", msg: "empty timestamps".into() });
    }
    let raw = time_diff_raw(timestamps)?;
    let tape = Tape::new();
    let values = tape
        .layer_norm_vec(&Tensor::vector(&raw), &Tensor::scalar(1.0), &Tensor::scalar(0.0), LN_EPS, 0)?
        .into_data();
    Ok(TimeDiffSeq { raw, values })
}

/// Raw gap vector, validating the non-decreasing precondition.
pub fn time_diff_raw(timestamps: &[i64]) -> Result<Vec<f32>> {
    let mut raw = vec![0.0f32; timestamps.len()];
    for l in 1..timestamps.len() {
        if timestamps[l] < timestamps[l - 1] {
            return Err(Error::TimestampOrder {
                index: l,
                prev: timestamps[l - 1],
                next: timestamps[l],
            });
        }
        raw[l] = (timestamps[l] - timestamps[l - 1]) as f32;
    }
    Ok(raw)
}

/// Parameter views for the time-aware enhancement: a 1-channel causal conv
/// kernel, a two-layer MLP producing the per-sequence scalar coefficient,
/// and the conv-path activation.
pub struct TimeEnhanceParams<'a> {
    pub conv: &'a Tensor,   // [K, 1]
    pub mlp_w1: &'a Tensor, // [L, L]
    pub mlp_b1: &'a Tensor, // [L]
    pub mlp_w2: &'a Tensor, // [L, 1]
    pub mlp_b2: &'a Tensor, // [1]
    pub activation: UnaryOp,
}

/// Global time-aware enhancement: alpha * activation(conv(d)), where the
/// scalar alpha comes from an MLP over the (pad-masked) signal.
pub fn enhance_time(
    tape: &Tape,
    d: &Tensor,
    p: &TimeEnhanceParams,
    valid_from: usize,
) -> Result<Tensor> {
    let l = d.numel();
    if d.shape().rank() != 1 {
        return Err(Error::shape("enhance_time", d.shape(), "rank-1"));
    }
    // pad positions contribute nothing to either path
    let mut mask = vec![0.0f32; l];
    for m in mask.iter_mut().skip(valid_from) {
        *m = 1.0;
    }
    let d_masked = tape.mul(d, &Tensor::vector(&mask))?;

    // local path: per-position causal conv over the signal
    let as_col = tape.reshape(&d_masked, &[l, 1])?;
    let conved = tape.causal_conv1d(&as_col, p.conv, p.activation, valid_from)?;
    let conved = tape.reshape(&conved, &[l])?;

    // global path: one scalar per sequence
    let row = tape.reshape(&d_masked, &[1, l])?;
    let hidden = tape.matmul(&row, p.mlp_w1)?;
    let hidden = tape.add_row(&hidden, p.mlp_b1)?;
    let hidden = tape.silu(&hidden);
    let alpha = tape.matmul(&hidden, p.mlp_w2)?;
    let alpha = tape.add_row(&alpha, p.mlp_b2)?;

    tape.scalar_mul(&conved, &alpha)
}

/// How the decay coefficient is derived from the discretization step.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DecayKind {
    /// a = exp(A * delta_hat); contraction guaranteed for A < 0.
    Exp,
    /// a = A * delta_hat, the printed form; sign-alternating, kept for
    /// inspection only.
    Literal,
}

impl std::str::FromStr for DecayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp" => Ok(DecayKind::Exp),
            "literal" => Ok(DecayKind::Literal),
            other => Err(Error::Config(format!("unknown decay kind '{other}' (exp|literal)"))),
        }
    }
}

/// Zero-order-hold discretization:
/// delta_hat = softplus(delta (.) d_hat) + b_delta,
/// a_hat     = exp(A * delta_hat)   (or A * delta_hat in literal mode),
/// bbar      = delta_hat row-scaled B.
pub fn discretize_zoh(
    tape: &Tape,
    delta: &Tensor,
    d_hat: &Tensor,
    a: &Tensor,
    b: &Tensor,
    b_delta: &Tensor,
    kind: DecayKind,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (a_hat, delta_hat) = discretize_decay(tape, delta, d_hat, a, b_delta, kind)?;
    let bbar = tape.row_scale(b, &delta_hat)?;
    Ok((a_hat, bbar, delta_hat))
}

/// The decay/step half of the discretization, for callers that keep B as-is.
pub fn discretize_decay(
    tape: &Tape,
    delta: &Tensor,
    d_hat: &Tensor,
    a: &Tensor,
    b_delta: &Tensor,
    kind: DecayKind,
) -> Result<(Tensor, Tensor)> {
    if delta.shape() != d_hat.shape() || delta.shape() != b_delta.shape() {
        return Err(Error::shape("discretize_zoh", delta.shape(), d_hat.shape()));
    }
    let prod = tape.mul(delta, d_hat)?;
    let sp = tape.softplus(&prod);
    let delta_hat = tape.add(&sp, b_delta)?;
    let scaled = tape.scalar_mul(&delta_hat, a)?;
    let a_hat = match kind {
        DecayKind::Exp => tape.exp(&scaled),
        DecayKind::Literal => scaled,
    };
    Ok((a_hat, delta_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_interaction_raw_zero() {
        let d = compute_time_diffs(&[100]).unwrap();
        assert_eq!(d.raw, vec![0.0]);
    }

    #[test]
    fn gaps_and_normalization() {
        let d = compute_time_diffs(&[10, 20, 40]).unwrap();
        assert_eq!(d.raw, vec![0.0, 10.0, 20.0]);
        assert!((d.values[0] + 1.2247).abs() < 1e-3);
        assert!(d.values[1].abs() < 1e-4);
        assert!((d.values[2] - 1.2247).abs() < 1e-3);
    }

    #[test]
    fn equal_spacing_constant_tail() {
        let d = compute_time_diffs(&[0, 7, 14, 21, 28]).unwrap();
        assert_eq!(d.raw, vec![0.0, 7.0, 7.0, 7.0, 7.0]);
        for w in d.values[1..].windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn decreasing_timestamps_error_names_index() {
        let err = compute_time_diffs(&[5, 9, 3]).unwrap_err().to_string();
        assert!(err.contains("index 2"), "{err}");
    }

    #[test]
    fn translation_invariance() {
        let a = compute_time_diffs(&[100, 160, 400]).unwrap();
        let b = compute_time_diffs(&[1100, 1160, 1400]).unwrap();
        assert_eq!(a.raw, b.raw);
    }

    fn enhance_params<'a>(
        conv: &'a Tensor,
        w1: &'a Tensor,
        b1: &'a Tensor,
        w2: &'a Tensor,
        b2: &'a Tensor,
        act: UnaryOp,
    ) -> TimeEnhanceParams<'a> {
        TimeEnhanceParams { conv, mlp_w1: w1, mlp_b1: b1, mlp_w2: w2, mlp_b2: b2, activation: act }
    }

    #[test]
    fn zeroed_mlp_gates_everything_off() {
        let tape = Tape::new();
        let l = 4;
        let d = Tensor::vector(&[0.3, -0.2, 0.8, 0.1]);
        let conv = Tensor::matrix(2, 1, vec![0.5, 0.5]).unwrap();
        let w1 = Tensor::zeros(&[l, l]);
        let b1 = Tensor::zeros(&[l]);
        let w2 = Tensor::zeros(&[l, 1]);
        let b2 = Tensor::zeros(&[1]);
        let p = enhance_params(&conv, &w1, &b1, &w2, &b2, UnaryOp::Silu);
        let out = enhance_time(&tape, &d, &p, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernel_identity_activation_passthrough() {
        let tape = Tape::new();
        let l = 4;
        let d = Tensor::vector(&[0.3, -0.2, 0.8, 0.1]);
        let conv = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
        let w1 = Tensor::zeros(&[l, l]);
        let b1 = Tensor::zeros(&[l]);
        let w2 = Tensor::zeros(&[l, 1]);
        // alpha = 1 through the output bias
        let b2 = Tensor::scalar(1.0);
        let p = enhance_params(&conv, &w1, &b1, &w2, &b2, UnaryOp::Identity);
        let out = enhance_time(&tape, &d, &p, 0).unwrap();
        assert!(out.max_abs_diff(&d) < 1e-6);
    }

    #[test]
    fn enhance_matches_compositional_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let l = 6usize;
        let k = 3usize;
        let d_vals: Vec<f32> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let conv_vals: Vec<f32> = (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w1_vals: Vec<f32> = (0..l * l).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let b1_vals: Vec<f32> = (0..l).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let w2_vals: Vec<f32> = (0..l).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let b2_val = rng.gen_range(-0.3..0.3);

        let d = Tensor::vector(&d_vals);
        let conv = Tensor::matrix(k, 1, conv_vals.clone()).unwrap();
        let w1 = Tensor::matrix(l, l, w1_vals.clone()).unwrap();
        let b1 = Tensor::vector(&b1_vals);
        let w2 = Tensor::matrix(l, 1, w2_vals.clone()).unwrap();
        let b2 = Tensor::scalar(b2_val);
        let p = enhance_params(&conv, &w1, &b1, &w2, &b2, UnaryOp::Silu);
        let got = enhance_time(&tape, &d, &p, 0).unwrap();

        // scripted step-by-step recomputation
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let mut conv_out = vec![0.0f64; l];
        for t in 0..l {
            for m in 0..k {
                conv_out[t] += d_vals[t.saturating_sub(m)] as f64 * conv_vals[m] as f64;
            }
            conv_out[t] = silu(conv_out[t]);
        }
        let mut hidden = vec![0.0f64; l];
        for j in 0..l {
            let mut s = b1_vals[j] as f64;
            for i in 0..l {
                s += d_vals[i] as f64 * w1_vals[i * l + j] as f64;
            }
            hidden[j] = silu(s);
        }
        let mut alpha = b2_val as f64;
        for j in 0..l {
            alpha += hidden[j] * w2_vals[j] as f64;
        }
        for t in 0..l {
            assert!(
                (got.data()[t] as f64 - alpha * conv_out[t]).abs() < 1e-5,
                "position {t}: {} vs {}",
                got.data()[t],
                alpha * conv_out[t]
            );
        }
    }

    #[test]
    fn discretize_known_values() {
        let tape = Tape::new();
        let l = 3;
        let zeros = Tensor::zeros(&[l]);
        let a = Tensor::scalar(-1.0);
        let b = Tensor::new(&[l, 2], vec![1.0; 6]).unwrap();
        let (a_hat, _, delta_hat) =
            discretize_zoh(&tape, &zeros, &zeros, &a, &b, &Tensor::zeros(&[l]), DecayKind::Exp)
                .unwrap();
        for t in 0..l {
            assert!((delta_hat.data()[t] - std::f32::consts::LN_2).abs() < 1e-6);
            assert!((a_hat.data()[t] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_bias_saturates_to_full_forgetting() {
        let tape = Tape::new();
        let l = 2;
        let zeros = Tensor::zeros(&[l]);
        let big = Tensor::vector(&[50.0, 50.0]);
        let a = Tensor::scalar(-1.0);
        let b = Tensor::new(&[l, 1], vec![1.0; 2]).unwrap();
        let (a_hat, _, _) =
            discretize_zoh(&tape, &zeros, &zeros, &a, &b, &big, DecayKind::Exp).unwrap();
        assert!(a_hat.data().iter().all(|&v| v < 1e-20));
    }

    #[test]
    fn discretize_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tape = Tape::new();
        let l = 5usize;
        let d_dim = 3usize;
        let delta: Vec<f32> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d_hat: Vec<f32> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_delta: Vec<f32> = (0..l).map(|_| rng.gen_range(0.0..0.5)).collect();
        let b: Vec<f32> = (0..l * d_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a_val = -0.7f32;

        let (a_hat, bbar, delta_hat) = discretize_zoh(
            &tape,
            &Tensor::vector(&delta),
            &Tensor::vector(&d_hat),
            &Tensor::scalar(a_val),
            &Tensor::new(&[l, d_dim], b.clone()).unwrap(),
            &Tensor::vector(&b_delta),
            DecayKind::Exp,
        )
        .unwrap();

        for t in 0..l {
            let x = (delta[t] * d_hat[t]) as f64;
            let dh = x.exp().ln_1p() + b_delta[t] as f64;
            assert!((delta_hat.data()[t] as f64 - dh).abs() < 1e-6);
            assert!((a_hat.data()[t] as f64 - (a_val as f64 * dh).exp()).abs() < 1e-6);
            for j in 0..d_dim {
                assert!((bbar.at2(t, j) as f64 - dh * b[t * d_dim + j] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn delta_hat_positive_with_nonnegative_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tape = Tape::new();
        for _ in 0..20 {
            let l = 4;
            let delta = Tensor::vector(&(0..l).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f32>>());
            let d_hat = Tensor::vector(&(0..l).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f32>>());
            let b_delta = Tensor::vector(&(0..l).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f32>>());
            let (a_hat, delta_hat) = discretize_decay(
                &tape,
                &delta,
                &d_hat,
                &Tensor::scalar(-rng.gen_range(1.0..16.0)),
                &b_delta,
                DecayKind::Exp,
            )
            .unwrap();
            assert!(delta_hat.data().iter().all(|&v| v > 0.0));
            assert!(a_hat.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
