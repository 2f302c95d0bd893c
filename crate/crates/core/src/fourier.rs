//! Dual-channel frequency-domain fusion of the two modalities' enhanced time
//! signals into a single cross-modal time signal.
//!
//! Both spectra pass through one shared adaptive filter (the kernel is
//! generated from the spectrum it filters, so the path is quadratic in its
//! input), are summed, refined by a learnable complex filter, and brought
//! back to the time domain where the real part is kept.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Views of one complex LxL filter: `w` is [2,L,L] (re plane, im plane),
/// `b` is [2,L].
pub struct ComplexFilterRefs<'a> {
    pub w: &'a Tensor,
    pub b: &'a Tensor,
}

/// Filters feeding the fusion stage; either may be ablated away.
pub struct FusionRefs<'a> {
    pub adaptive: Option<ComplexFilterRefs<'a>>,
    pub learnable: Option<ComplexFilterRefs<'a>>,
}

/// Generate the frequency kernel from the spectrum and apply it:
/// K = zW + b, out = K (.) z.
pub fn adaptive_filter_apply(
    tape: &Tape,
    d_spec: &Tensor,
    f: &ComplexFilterRefs<'_>,
) -> Result<Tensor> {
    let kernel = tape.complex_linear(d_spec, f.w, f.b)?;
    tape.complex_mul(&kernel, d_spec)
}

/// Output of [`fuse_time_signals`]: the fused real time signal plus the
/// imaginary residue left behind by the final inverse transform
/// (diagnostic only, not enforced).
pub struct FusedSignal {
    pub values: Tensor,
    pub imag_residue: f32,
}

/// Fuse two enhanced time signals through the dual-channel frequency path.
pub fn fuse_time_signals(
    tape: &Tape,
    d_hat_v: &Tensor,
    d_hat_t: &Tensor,
    p: &FusionRefs<'_>,
) -> Result<FusedSignal> {
    if d_hat_v.shape() != d_hat_t.shape() {
        return Err(Error::shape("fuse_time_signals", d_hat_v.shape(), d_hat_t.shape()));
    }
    let sv = tape.fft(&tape.real_to_complex(d_hat_v)?)?;
    let st = tape.fft(&tape.real_to_complex(d_hat_t)?)?;

    let (fv, ft) = match &p.adaptive {
        Some(f) => (adaptive_filter_apply(tape, &sv, f)?, adaptive_filter_apply(tape, &st, f)?),
        None => (sv, st),
    };
    let mut fused = tape.add(&fv, &ft)?;
    if let Some(f) = &p.learnable {
        fused = tape.complex_linear(&fused, f.w, f.b)?;
    }
    let z = tape.ifft(&fused)?;
    let l = d_hat_v.numel();
    let imag_residue = z.data()[l..].iter().map(|v| v.abs()).fold(0.0f32, f32::max);
    let values = tape.complex_real_part(&z)?;
    Ok(FusedSignal { values, imag_residue })
}
