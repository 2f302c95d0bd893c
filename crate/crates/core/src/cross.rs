//! The TiCoSSD block: cross-attention-style decoupling that draws C from the
//! visual stream and B, X, Delta from the text stream, masked by the fused
//! time signal, plus the output head producing the user representation
//! sequence.

use crate::align::{apply_dropout, pad_mask_vec, BlockCfg, FfnParamRefs, LnParamRefs, Mode};
use crate::error::{Error, Result};
use crate::ssd::ssd_auto;
use crate::tape::{Tape, UnaryOp};
use crate::temporal::{discretize_decay, enhance_time, TimeEnhanceParams};
use crate::tensor::Tensor;

/// Parameter views for one TiCoSSD block.
pub struct TicossdParamRefs<'a> {
    pub w2: &'a Tensor,      // [N, D]   visual -> C
    pub b2: &'a Tensor,      // [D]
    pub w3: &'a Tensor,      // [N, D+N+1]  text -> [B, X, Delta]
    pub b3: &'a Tensor,      // [D+N+1]
    pub conv_c: &'a Tensor,  // [K, D]
    pub conv_b: &'a Tensor,  // [K, D]
    pub conv_x: &'a Tensor,  // [K, N]
    pub a: &'a Tensor,       // [1]
    pub b_delta: &'a Tensor, // [L]
    pub te: Option<TimeEnhanceParams<'a>>,
}

/// Decoupled projections: C from the visual stream only; B, X, Delta from
/// the text stream only.
pub fn ticossd_project(
    tape: &Tape,
    pv: &Tensor,
    pt: &Tensor,
    p: &TicossdParamRefs<'_>,
    d_state: usize,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (l, n) = pv
        .shape()
        .as_matrix()
        .ok_or_else(|| Error::shape("ticossd_project", pv.shape(), "rank-2"))?;
    if pt.shape() != pv.shape() {
        return Err(Error::shape("ticossd_project", pv.shape(), pt.shape()));
    }
    let total = d_state + n + 1;
    if p.w2.dims() != [n, d_state] {
        return Err(Error::shape("ticossd_project", p.w2.shape(), format!("[{n}x{d_state}]")));
    }
    if p.w3.dims() != [n, total] {
        return Err(Error::shape("ticossd_project", p.w3.shape(), format!("[{n}x{total}]")));
    }
    let c = tape.matmul(pv, p.w2)?;
    let c = tape.add_row(&c, p.b2)?;

    let proj = tape.matmul(pt, p.w3)?;
    let proj = tape.add_row(&proj, p.b3)?;
    let b = tape.slice_cols(&proj, 0, d_state)?;
    let x = tape.slice_cols(&proj, d_state, d_state + n)?;
    let delta = tape.slice_cols(&proj, d_state + n, total)?;
    let delta = tape.reshape(&delta, &[l])?;
    Ok((c, b, x, delta))
}

/// TiCoSSD forward: the fused time signal replaces the raw time differences
/// in the enhancement pipeline, and the discretization step scales the value
/// stream (diag(delta_hat) X) while B stays unscaled, exactly as printed.
pub fn ticossd_forward(
    tape: &Tape,
    pv: &Tensor,
    pt: &Tensor,
    d_fused: &Tensor,
    p: &TicossdParamRefs<'_>,
    cfg: &BlockCfg,
    valid_from: usize,
) -> Result<Tensor> {
    let l = pv.dims()[0];
    if d_fused.numel() != l {
        return Err(Error::shape("ticossd_forward", d_fused.shape(), format!("[{l}]")));
    }
    let (c, b, x, delta) = ticossd_project(tape, pv, pt, p, cfg.d_state)?;
    let c = tape.causal_conv1d(&c, p.conv_c, UnaryOp::Silu, valid_from)?;
    let b = tape.causal_conv1d(&b, p.conv_b, UnaryOp::Silu, valid_from)?;
    let x = tape.causal_conv1d(&x, p.conv_x, UnaryOp::Silu, valid_from)?;

    let pad_mask = pad_mask_vec(l, valid_from);
    let d_fused = tape.mul(d_fused, &pad_mask)?;
    let d_hat = match &p.te {
        Some(te) => enhance_time(tape, &d_fused, te, valid_from)?,
        None => Tensor::zeros(&[l]),
    };
    let (a_hat, delta_hat) = discretize_decay(tape, &delta, &d_hat, p.a, p.b_delta, cfg.decay)?;

    let x = tape.row_scale(&x, &pad_mask)?;
    let x = tape.row_scale(&x, &delta_hat)?;
    ssd_auto(tape, &c, &b, &a_hat, &x, cfg.mode)
}

/// Output head: three-way residual, LN, FFN residual, LN.
#[allow(clippy::too_many_arguments)]
pub fn output_head(
    tape: &Tape,
    m: &Tensor,
    pv: &Tensor,
    pt: &Tensor,
    ffn: &FfnParamRefs<'_>,
    ln1: &LnParamRefs<'_>,
    ln2: &LnParamRefs<'_>,
    ln_eps: f32,
    mode: Mode<'_>,
) -> Result<Tensor> {
    if m.shape() != pv.shape() || m.shape() != pt.shape() {
        return Err(Error::shape("output_head", m.shape(), pv.shape()));
    }
    let m = apply_dropout(tape, m, mode)?;
    let o = tape.add(&m, pv)?;
    let o = tape.add(&o, pt)?;
    let o = tape.layer_norm(&o, ln1.gamma, ln1.beta, ln_eps)?;
    let f = crate::align::ffn_forward(tape, &o, ffn, mode)?;
    let y = tape.add(&f, &o)?;
    tape.layer_norm(&y, ln2.gamma, ln2.beta, ln_eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{tissd_forward, TissdParamRefs};
    use crate::ssd::{ssd_quadratic_from_decay, SsdMode};
    use crate::temporal::DecayKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn block_cfg(d_state: usize) -> BlockCfg {
        BlockCfg { d_state, decay: DecayKind::Exp, mode: SsdMode::Auto, ln_eps: 1e-5 }
    }

    struct OwnedCross {
        w2: Tensor,
        b2: Tensor,
        w3: Tensor,
        b3: Tensor,
        conv_c: Tensor,
        conv_b: Tensor,
        conv_x: Tensor,
        a: Tensor,
        b_delta: Tensor,
    }

    impl OwnedCross {
        fn random(rng: &mut ChaCha8Rng, l: usize, n: usize, d: usize, k: usize) -> Self {
            OwnedCross {
                w2: rand_tensor(rng, &[n, d], -0.4, 0.4),
                b2: rand_tensor(rng, &[d], -0.1, 0.1),
                w3: rand_tensor(rng, &[n, d + n + 1], -0.4, 0.4),
                b3: rand_tensor(rng, &[d + n + 1], -0.1, 0.1),
                conv_c: rand_tensor(rng, &[k, d], -0.4, 0.4),
                conv_b: rand_tensor(rng, &[k, d], -0.4, 0.4),
                conv_x: rand_tensor(rng, &[k, n], -0.4, 0.4),
                a: Tensor::scalar(-rng.gen_range(0.5..2.0)),
                b_delta: rand_tensor(rng, &[l], 0.0, 0.2),
            }
        }

        fn refs(&self) -> TicossdParamRefs<'_> {
            TicossdParamRefs {
                w2: &self.w2,
                b2: &self.b2,
                w3: &self.w3,
                b3: &self.b3,
                conv_c: &self.conv_c,
                conv_b: &self.conv_b,
                conv_x: &self.conv_x,
                a: &self.a,
                b_delta: &self.b_delta,
                te: None,
            }
        }
    }

    #[test]
    fn stream_isolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let tape = Tape::new();
        let (l, n, d) = (3usize, 4usize, 2usize);
        let p = OwnedCross::random(&mut rng, l, n, d, 4);
        let zeros = Tensor::zeros(&[l, n]);
        let pt = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);

        // pv = 0: C collapses to bias rows, B/X/Delta unaffected by pv
        let (c, b, x, delta) = ticossd_project(&tape, &zeros, &pt, &p.refs(), d).unwrap();
        for i in 0..l {
            for j in 0..d {
                assert!((c.at2(i, j) - p.b2.data()[j]).abs() < 1e-6);
            }
        }
        let (_, b2, x2, delta2) =
            ticossd_project(&tape, &rand_tensor(&mut rng, &[l, n], -1.0, 1.0), &pt, &p.refs(), d)
                .unwrap();
        assert_eq!(b.data(), b2.data());
        assert_eq!(x.data(), x2.data());
        assert_eq!(delta.data(), delta2.data());

        // pt = 0: B/X/Delta collapse to bias slices, C unaffected by pt
        let pv = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let (c3, b3, x3, delta3) = ticossd_project(&tape, &pv, &zeros, &p.refs(), d).unwrap();
        let total = d + n + 1;
        for i in 0..l {
            for j in 0..d {
                assert!((b3.at2(i, j) - p.b3.data()[j]).abs() < 1e-6);
            }
            for j in 0..n {
                assert!((x3.at2(i, j) - p.b3.data()[d + j]).abs() < 1e-6);
            }
            assert!((delta3.data()[i] - p.b3.data()[total - 1]).abs() < 1e-6);
        }
        let (c4, _, _, _) =
            ticossd_project(&tape, &pv, &rand_tensor(&mut rng, &[l, n], -1.0, 1.0), &p.refs(), d)
                .unwrap();
        assert_eq!(c3.data(), c4.data());
    }

    #[test]
    fn project_offsets_match_slicing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let tape = Tape::new();
        let (l, n, d) = (4usize, 3usize, 2usize);
        let p = OwnedCross::random(&mut rng, l, n, d, 4);
        let pv = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let pt = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let (c, b, x, delta) = ticossd_project(&tape, &pv, &pt, &p.refs(), d).unwrap();

        let total = d + n + 1;
        for i in 0..l {
            for j in 0..d {
                let mut s = p.b2.data()[j] as f64;
                for k in 0..n {
                    s += pv.at2(i, k) as f64 * p.w2.at2(k, j) as f64;
                }
                assert!((c.at2(i, j) as f64 - s).abs() < 1e-5);
            }
            for j in 0..total {
                let mut s = p.b3.data()[j] as f64;
                for k in 0..n {
                    s += pt.at2(i, k) as f64 * p.w3.at2(k, j) as f64;
                }
                if j < d {
                    assert!((b.at2(i, j) as f64 - s).abs() < 1e-5);
                } else if j < d + n {
                    assert!((x.at2(i, j - d) as f64 - s).abs() < 1e-5);
                } else {
                    assert!((delta.data()[i] as f64 - s).abs() < 1e-5);
                }
            }
        }
    }

    /// Transplanting the TiSSD projection into the decoupled layout and
    /// feeding the same stream on both sides must reproduce the TiSSD core:
    /// row-scaling X by delta_hat equals row-scaling B.
    #[test]
    fn parameter_transplant_matches_tissd_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let tape = Tape::new();
        let (l, n, d, k) = (5usize, 3usize, 2usize, 4usize);
        let total1 = 2 * d + n + 1;
        let w1 = rand_tensor(&mut rng, &[n, total1], -0.4, 0.4);
        let b1 = rand_tensor(&mut rng, &[total1], -0.1, 0.1);
        let conv_c = rand_tensor(&mut rng, &[k, d], -0.4, 0.4);
        let conv_b = rand_tensor(&mut rng, &[k, d], -0.4, 0.4);
        let conv_x = rand_tensor(&mut rng, &[k, n], -0.4, 0.4);
        let a = Tensor::scalar(-0.8);
        let b_delta = rand_tensor(&mut rng, &[l], 0.0, 0.2);
        let x = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let dvals = Tensor::zeros(&[l]);

        let tissd = TissdParamRefs {
            w1: &w1,
            b1: &b1,
            conv_c: &conv_c,
            conv_b: &conv_b,
            conv_x: &conv_x,
            a: &a,
            b_delta: &b_delta,
            te: None,
        };
        let cfg = block_cfg(d);
        let (want, _) = tissd_forward(&tape, &x, &dvals, &tissd, &cfg, 0).unwrap();

        // W2/b2 take the C columns; W3/b3 take the B, X, Delta columns.
        let mut w2 = vec![0.0f32; n * d];
        let mut w3 = vec![0.0f32; n * (d + n + 1)];
        for r in 0..n {
            for j in 0..d {
                w2[r * d + j] = w1.at2(r, j);
            }
            for j in 0..(d + n + 1) {
                w3[r * (d + n + 1) + j] = w1.at2(r, d + j);
            }
        }
        let b2 = b1.data()[..d].to_vec();
        let b3 = b1.data()[d..].to_vec();
        let cross = TicossdParamRefs {
            w2: &Tensor::new(&[n, d], w2).unwrap(),
            b2: &Tensor::vector(&b2),
            w3: &Tensor::new(&[n, d + n + 1], w3).unwrap(),
            b3: &Tensor::vector(&b3),
            conv_c: &conv_c,
            conv_b: &conv_b,
            conv_x: &conv_x,
            a: &a,
            b_delta: &b_delta,
            te: None,
        };
        let got = ticossd_forward(&tape, &x, &x, &dvals, &cross, &cfg, 0).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn zero_text_projection_zeroes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let tape = Tape::new();
        let (l, n, d) = (4usize, 3usize, 2usize);
        let mut p = OwnedCross::random(&mut rng, l, n, d, 4);
        p.w3 = Tensor::zeros(&[n, d + n + 1]);
        p.b3 = Tensor::zeros(&[d + n + 1]);
        let pv = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let pt = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let m =
            ticossd_forward(&tape, &pv, &pt, &Tensor::zeros(&[l]), &p.refs(), &block_cfg(d), 0)
                .unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_streams_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let tape = Tape::new();
        let (l, n, d) = (4usize, 3usize, 2usize);
        let p = OwnedCross::random(&mut rng, l, n, d, 4);
        let pv = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let pt = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let d0 = Tensor::zeros(&[l]);
        let cfg = block_cfg(d);
        let m1 = ticossd_forward(&tape, &pv, &pt, &d0, &p.refs(), &cfg, 0).unwrap();
        let m2 = ticossd_forward(&tape, &pt, &pv, &d0, &p.refs(), &cfg, 0).unwrap();
        assert!(m1.max_abs_diff(&m2) > 1e-4);
    }

    /// b_delta = 1 - ln 2 with a silent time path drives delta_hat to one,
    /// reducing the block to the plain masked form.
    #[test]
    fn unit_step_reduces_to_plain_masked_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let tape = Tape::new();
        let (l, n, d) = (5usize, 3usize, 2usize);
        let mut p = OwnedCross::random(&mut rng, l, n, d, 4);
        // Delta projection zeroed so softplus sees exactly zero
        let mut w3 = p.w3.data().to_vec();
        let total = d + n + 1;
        for r in 0..n {
            w3[r * total + total - 1] = 0.0;
        }
        let mut b3 = p.b3.data().to_vec();
        b3[total - 1] = 0.0;
        p.w3 = Tensor::new(&[n, total], w3).unwrap();
        p.b3 = Tensor::vector(&b3);
        p.b_delta = Tensor::vector(&vec![1.0 - std::f32::consts::LN_2; l]);

        let pv = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let pt = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let cfg = block_cfg(d);
        let m = ticossd_forward(&tape, &pv, &pt, &Tensor::zeros(&[l]), &p.refs(), &cfg, 0).unwrap();

        // oracle: conv-activated projections through the quadratic form
        let (c, b, x, _) = ticossd_project(&tape, &pv, &pt, &p.refs(), d).unwrap();
        let c = tape.causal_conv1d(&c, &p.conv_c, UnaryOp::Silu, 0).unwrap();
        let b = tape.causal_conv1d(&b, &p.conv_b, UnaryOp::Silu, 0).unwrap();
        let x = tape.causal_conv1d(&x, &p.conv_x, UnaryOp::Silu, 0).unwrap();
        let a_val = p.a.data()[0];
        let a_hat = Tensor::vector(&vec![a_val.exp(); l]);
        let want = ssd_quadratic_from_decay(&tape, &c, &b, &a_hat, &x).unwrap();
        assert!(m.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn output_head_residual_degeneracy_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let tape = Tape::new();
        let (l, n) = (3usize, 4usize);
        let pv = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let pt = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let gamma = Tensor::vector(&vec![1.0; n]);
        let beta = Tensor::vector(&vec![0.0; n]);
        let ln1 = LnParamRefs { gamma: &gamma, beta: &beta };
        let ln2 = LnParamRefs { gamma: &gamma, beta: &beta };
        let w_in = rand_tensor(&mut rng, &[n, 4 * n], -0.3, 0.3);
        let b_in = rand_tensor(&mut rng, &[4 * n], -0.3, 0.3);
        let w_out = rand_tensor(&mut rng, &[4 * n, n], -0.3, 0.3);
        let b_out = rand_tensor(&mut rng, &[n], -0.3, 0.3);
        let ffn = FfnParamRefs { w_in: &w_in, b_in: &b_in, w_out: &w_out, b_out: &b_out };

        // m = 0 collapses the first residual to LN(pv + pt)
        let m0 = Tensor::zeros(&[l, n]);
        let y = output_head(&tape, &m0, &pv, &pt, &ffn, &ln1, &ln2, 1e-5, Mode::Eval).unwrap();
        let o = tape.add(&pv, &pt).unwrap();
        let o = tape.layer_norm(&o, &gamma, &beta, 1e-5).unwrap();
        let f = crate::align::ffn_forward(&tape, &o, &ffn, Mode::Eval).unwrap();
        let want = tape.add(&f, &o).unwrap();
        let want = tape.layer_norm(&want, &gamma, &beta, 1e-5).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-6);

        // residual-LN rows are standardized before affine
        let rows = tape.add(&tape.add(&m0, &pv).unwrap(), &pt).unwrap();
        let normed = tape.layer_norm(&rows, &gamma, &beta, 1e-5).unwrap();
        for i in 0..l {
            let mut mean = 0.0f64;
            let mut var = 0.0f64;
            for j in 0..n {
                mean += normed.at2(i, j) as f64;
            }
            mean /= n as f64;
            for j in 0..n {
                var += (normed.at2(i, j) as f64 - mean).powi(2);
            }
            var /= n as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn end_to_end_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let tape = Tape::new();
        let (l, n, d) = (6usize, 3usize, 2usize);
        let p = OwnedCross::random(&mut rng, l, n, d, 4);
        let pv = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let pt = rand_tensor(&mut rng, &[l, n], -1.0, 1.0);
        let d0 = Tensor::zeros(&[l]);
        let cfg = block_cfg(d);
        let m0 = ticossd_forward(&tape, &pv, &pt, &d0, &p.refs(), &cfg, 0).unwrap();

        let cut = 3usize;
        let mut pv2 = pv.data().to_vec();
        let mut pt2 = pt.data().to_vec();
        for t in cut..l {
            for j in 0..n {
                pv2[t * n + j] = rng.gen_range(-1.0..1.0);
                pt2[t * n + j] = rng.gen_range(-1.0..1.0);
            }
        }
        let m1 = ticossd_forward(
            &tape,
            &Tensor::new(&[l, n], pv2).unwrap(),
            &Tensor::new(&[l, n], pt2).unwrap(),
            &d0,
            &p.refs(),
            &cfg,
            0,
        )
        .unwrap();
        for t in 0..cut {
            for j in 0..n {
                assert_eq!(m0.at2(t, j).to_bits(), m1.at2(t, j).to_bits());
            }
        }
    }
}
