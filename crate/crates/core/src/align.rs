//! The TiSSD block (projection, causal conv, time-aware SSD) and the
//! weight-shared dual-modality alignment stage built from it.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssd::{ssd_auto, SsdMode};
use crate::tape::{Tape, UnaryOp};
use crate::temporal::{discretize_zoh, enhance_time, DecayKind, TimeEnhanceParams};
use crate::tensor::Tensor;

/// Forward-pass mode: evaluation, or training with dropout driven by a
/// shared RNG.
#[derive(Clone, Copy)]
pub enum Mode<'a> {
    Eval,
    Train { dropout: f32, rng: &'a RefCell<ChaCha8Rng> },
}

/// Inverted dropout; identity in eval mode or at p = 0.
pub fn apply_dropout(tape: &Tape, x: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
    match mode {
        Mode::Train { dropout, rng } if dropout > 0.0 => {
            let scale = 1.0 / (1.0 - dropout);
            let mut r = rng.borrow_mut();
            let mask: Vec<f32> = (0..x.numel())
                .map(|_| if r.gen::<f32>() < dropout { 0.0 } else { scale })
                .collect();
            drop(r);
            tape.dropout_with_mask(x, mask)
        }
        _ => Ok(x.clone()),
    }
}

/// Parameter views for one TiSSD block.
pub struct TissdParamRefs<'a> {
    pub w1: &'a Tensor,      // [N, 2D+N+1]
    pub b1: &'a Tensor,      // [2D+N+1]
    pub conv_c: &'a Tensor,  // [K, D]
    pub conv_b: &'a Tensor,  // [K, D]
    pub conv_x: &'a Tensor,  // [K, N]
    pub a: &'a Tensor,       // [1], negative at init
    pub b_delta: &'a Tensor, // [L]
    /// Absent when the time-aware path is ablated.
    pub te: Option<TimeEnhanceParams<'a>>,
}

/// Dimensions and kernel choices shared by every SSD-bearing block.
#[derive(Clone, Copy, Debug)]
pub struct BlockCfg {
    pub d_state: usize,
    pub decay: DecayKind,
    pub mode: SsdMode,
    pub ln_eps: f32,
}

/// Single projection X W1 + b1 split into C, B, X, Delta at fixed offsets.
pub fn tissd_project(
    tape: &Tape,
    x: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    d_state: usize,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (l, n) = x
        .shape()
        .as_matrix()
        .ok_or_else(|| Error::shape("tissd_project", x.shape(), "rank-2"))?;
    let total = 2 * d_state + n + 1;
    let (wr, wc) = w1
        .shape()
        .as_matrix()
        .ok_or_else(|| Error::shape("tissd_project", w1.shape(), "rank-2"))?;
    if wr != n || wc != total {
        return Err(Error::shape("tissd_project", w1.shape(), format!("[{n}x{total}]")));
    }
    let proj = tape.matmul(x, w1)?;
    let proj = tape.add_row(&proj, b1)?;
    let c = tape.slice_cols(&proj, 0, d_state)?;
    let b = tape.slice_cols(&proj, d_state, 2 * d_state)?;
    let xin = tape.slice_cols(&proj, 2 * d_state, 2 * d_state + n)?;
    let delta = tape.slice_cols(&proj, 2 * d_state + n, total)?;
    let delta = tape.reshape(&delta, &[l])?;
    Ok((c, b, xin, delta))
}

/// 0/1 row mask that silences positions before `valid_from`.
pub(crate) fn pad_mask_vec(len: usize, valid_from: usize) -> Tensor {
    let mut m = vec![0.0f32; len];
    for v in m.iter_mut().skip(valid_from) {
        *v = 1.0;
    }
    Tensor::vector(&m)
}

/// The TiSSD block: project, causally convolve C/B/X, enhance the time
/// signal, discretize, and run the masked SSD. Returns the sequence output
/// and the enhanced time signal (consumed later by the fusion stage).
pub fn tissd_forward(
    tape: &Tape,
    x: &Tensor,
    d_values: &Tensor,
    p: &TissdParamRefs<'_>,
    cfg: &BlockCfg,
    valid_from: usize,
) -> Result<(Tensor, Tensor)> {
    let l = x.dims()[0];
    let (c, b, xin, delta) = tissd_project(tape, x, p.w1, p.b1, cfg.d_state)?;
    let c = tape.causal_conv1d(&c, p.conv_c, UnaryOp::Silu, valid_from)?;
    let b = tape.causal_conv1d(&b, p.conv_b, UnaryOp::Silu, valid_from)?;
    let xin = tape.causal_conv1d(&xin, p.conv_x, UnaryOp::Silu, valid_from)?;

    let d_hat = match &p.te {
        Some(te) => enhance_time(tape, d_values, te, valid_from)?,
        None => Tensor::zeros(&[l]),
    };
    let (a_hat, bbar, _delta_hat) =
        discretize_zoh(tape, &delta, &d_hat, p.a, &b, p.b_delta, cfg.decay)?;

    // pad rows must not inject state: zero the value stream
    let xin = tape.row_scale(&xin, &pad_mask_vec(l, valid_from))?;
    let y = ssd_auto(tape, &c, &bbar, &a_hat, &xin, cfg.mode)?;
    Ok((y, d_hat))
}

/// Transformer-style position-wise feed-forward parameters.
pub struct FfnParamRefs<'a> {
    pub w_in: &'a Tensor,  // [N, 4N]
    pub b_in: &'a Tensor,  // [4N]
    pub w_out: &'a Tensor, // [4N, N]
    pub b_out: &'a Tensor, // [N]
}

/// W_out . act(W_in h + b_in) + b_out with dropout on the hidden activation.
pub fn ffn_forward(
    tape: &Tape,
    h: &Tensor,
    p: &FfnParamRefs<'_>,
    mode: Mode<'_>,
) -> Result<Tensor> {
    let hidden = tape.matmul(h, p.w_in)?;
    let hidden = tape.add_row(&hidden, p.b_in)?;
    let hidden = tape.silu(&hidden);
    let hidden = apply_dropout(tape, &hidden, mode)?;
    let out = tape.matmul(&hidden, p.w_out)?;
    tape.add_row(&out, p.b_out)
}

/// Affine layer-norm parameter pair.
pub struct LnParamRefs<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
}

/// One modality path of the alignment stage: TiSSD, residual + LN, FFN,
/// residual + LN.
#[allow(clippy::too_many_arguments)]
fn align_path(
    tape: &Tape,
    x: &Tensor,
    d: &Tensor,
    tissd: &TissdParamRefs<'_>,
    ffn: &FfnParamRefs<'_>,
    ln1: &LnParamRefs<'_>,
    ln2: &LnParamRefs<'_>,
    cfg: &BlockCfg,
    valid_from: usize,
    mode: Mode<'_>,
) -> Result<(Tensor, Tensor)> {
    let (y, d_hat) = tissd_forward(tape, x, d, tissd, cfg, valid_from)?;
    let y = apply_dropout(tape, &y, mode)?;
    let h = tape.add(&y, x)?;
    let h = tape.layer_norm(&h, ln1.gamma, ln1.beta, cfg.ln_eps)?;
    let f = ffn_forward(tape, &h, ffn, mode)?;
    let p = tape.add(&f, &h)?;
    let p = tape.layer_norm(&p, ln2.gamma, ln2.beta, cfg.ln_eps)?;
    Ok((p, d_hat))
}

/// All parameter views feeding one alignment layer. When the shared-weight
/// constraint is active, `tissd_v` and `tissd_t` view the same storage.
pub struct AlignStageRefs<'a> {
    pub tissd_v: TissdParamRefs<'a>,
    pub tissd_t: TissdParamRefs<'a>,
    pub ffn_v: FfnParamRefs<'a>,
    pub ffn_t: FfnParamRefs<'a>,
    pub ln1_v: LnParamRefs<'a>,
    pub ln1_t: LnParamRefs<'a>,
    pub ln2_v: LnParamRefs<'a>,
    pub ln2_t: LnParamRefs<'a>,
}

/// Sequence-level cross-modal alignment: both modalities run through the
/// (shared) TiSSD with residual/LN and their own FFN stacks. Returns the
/// aligned sequences and both enhanced time signals.
#[allow(clippy::too_many_arguments)]
pub fn align_modalities(
    tape: &Tape,
    xv: &Tensor,
    xt: &Tensor,
    dv: &Tensor,
    dt: &Tensor,
    p: &AlignStageRefs<'_>,
    cfg: &BlockCfg,
    valid_from: usize,
    mode: Mode<'_>,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    if xv.shape() != xt.shape() {
        return Err(Error::shape("align_modalities", xv.shape(), xt.shape()));
    }
    let (pv, dhv) =
        align_path(tape, xv, dv, &p.tissd_v, &p.ffn_v, &p.ln1_v, &p.ln2_v, cfg, valid_from, mode)?;
    let (pt, dht) =
        align_path(tape, xt, dt, &p.tissd_t, &p.ffn_t, &p.ln1_t, &p.ln2_t, cfg, valid_from, mode)?;
    Ok((pv, pt, dhv, dht))
}
