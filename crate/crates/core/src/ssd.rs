//! State-space duality core: the structured decay mask, the masked quadratic
//! (attention-like) form, the mathematically equivalent linear recurrence,
//! and a cost-model selector between the two.
//!
//! The quadratic form costs O(L^2 * max(D,N)), the recurrence O(L * D * N);
//! both compute Y = (L (.) C Bbar^T) X with M[i][j] = prod_{k=j+1..=i} a[k]
//! and a unit diagonal (empty product).

use crate::error::{Error, Result};
use crate::tape::{decay_mask_kernel, Tape};
use crate::tensor::Tensor;

/// Per-step decay coefficients a_hat; entry 0 is never consumed by the mask.
#[derive(Clone, Debug)]
pub struct DecayCoeffs(Vec<f32>);

impl DecayCoeffs {
    /// Coefficients must be positive: the mask is reconstructed through
    /// logarithms and the recurrence assumes contraction.
    pub fn new(a: Vec<f32>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::Domain { op: "DecayCoeffs", msg: "empty".into() });
        }
        // index 0 is a placeholder; the decay chain starts at index 1
        if let Some(bad) = a.iter().skip(1).position(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::Domain {
                op: "DecayCoeffs",
                msg: format!("non-positive coefficient {} at index {}", a[bad + 1], bad + 1),
            });
        }
        Ok(DecayCoeffs(a))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }
}

/// Lower-triangular 1-semiseparable decay mask.
#[derive(Clone, Debug)]
pub struct MaskMatrix {
    entries: Vec<f32>,
    len: usize,
}

impl MaskMatrix {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.entries[i * self.len + j]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len, self.len], self.entries.clone()).expect("mask shape")
    }

    /// Identity mask: diagonal-only retention.
    pub fn identity(len: usize) -> Self {
        let mut entries = vec![0.0f32; len * len];
        for i in 0..len {
            entries[i * len + i] = 1.0;
        }
        MaskMatrix { entries, len }
    }
}

/// Build the decay mask from positive coefficients via log-space segment
/// sums: M[i][j] = prod_{k=j+1..=i} a[k], diagonal = 1, zeros above.
pub fn build_decay_mask(a_hat: &DecayCoeffs) -> MaskMatrix {
    let entries = decay_mask_kernel(a_hat.values());
    MaskMatrix { entries, len: a_hat.len() }
}

/// Raw quadratic-form evaluation on flat buffers; no tape involvement, used
/// by the kernel benchmark.
pub fn quadratic_values(
    c: &[f32],
    bbar: &[f32],
    a: &[f32],
    x: &[f32],
    l: usize,
    d: usize,
    n: usize,
) -> Vec<f32> {
    let mask = crate::tape::decay_mask_kernel(a);
    // G = C . Bbar^T, masked
    let mut g = vec![0.0f32; l * l];
    for i in 0..l {
        for j in 0..=i {
            let m = mask[i * l + j];
            if m == 0.0 {
                continue;
            }
            let mut acc = 0.0f64;
            for p in 0..d {
                acc += c[i * d + p] as f64 * bbar[j * d + p] as f64;
            }
            g[i * l + j] = (acc * m as f64) as f32;
        }
    }
    crate::tape::matmul_kernel(&g, x, l, l, n)
}

/// Raw linear-recurrence evaluation on flat buffers.
pub fn recurrent_values(
    c: &[f32],
    bbar: &[f32],
    a: &[f32],
    x: &[f32],
    l: usize,
    d: usize,
    n: usize,
) -> Vec<f32> {
    crate::tape::ssd_recurrent_kernel(c, bbar, a, x, l, d, n).0
}

/// Execution mode for [`ssd_auto`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SsdMode {
    Auto,
    Quadratic,
    Recurrent,
}

impl std::str::FromStr for SsdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SsdMode::Auto),
            "quadratic" => Ok(SsdMode::Quadratic),
            "recurrent" => Ok(SsdMode::Recurrent),
            other => Err(Error::Contract {
                op: "SsdMode",
                msg: format!("unknown mode '{other}' (auto|quadratic|recurrent)"),
            }),
        }
    }
}

/// Masked quadratic form Y = (mask (.) (C Bbar^T)) X on the tape.
pub fn ssd_quadratic(
    tape: &Tape,
    c: &Tensor,
    bbar: &Tensor,
    x: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    let bt = tape.transpose(bbar)?;
    let scores = tape.matmul(c, &bt)?;
    let masked = tape.mul(&scores, mask)?;
    tape.matmul(&masked, x)
}

/// Quadratic form with the mask built from decay coefficients.
pub fn ssd_quadratic_from_decay(
    tape: &Tape,
    c: &Tensor,
    bbar: &Tensor,
    a_hat: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    let mask = tape.decay_mask(a_hat)?;
    ssd_quadratic(tape, c, bbar, x, &mask)
}

/// Linear recurrence form; exactly equals the quadratic form under the
/// unit-diagonal mask convention.
pub fn ssd_recurrent(
    tape: &Tape,
    c: &Tensor,
    bbar: &Tensor,
    a_hat: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    tape.ssd_recurrent(c, bbar, a_hat, x)
}

/// True when the quadratic form is the cheaper evaluation:
/// L^2 * max(D,N) < L * D * N, i.e. L < min(D, N).
pub fn quadratic_is_cheaper(l: usize, d: usize, n: usize) -> bool {
    l * d.max(n) < d * n
}

/// Evaluate through the requested form; `Auto` picks by operation count.
pub fn ssd_auto(
    tape: &Tape,
    c: &Tensor,
    bbar: &Tensor,
    a_hat: &Tensor,
    x: &Tensor,
    mode: SsdMode,
) -> Result<Tensor> {
    let (l, d) = c
        .shape()
        .as_matrix()
        .ok_or_else(|| Error::shape("ssd_auto", c.shape(), "rank-2"))?;
    let n = x
        .shape()
        .as_matrix()
        .ok_or_else(|| Error::shape("ssd_auto", x.shape(), "rank-2"))?
        .1;
    match mode {
        SsdMode::Quadratic => ssd_quadratic_from_decay(tape, c, bbar, a_hat, x),
        SsdMode::Recurrent => ssd_recurrent(tape, c, bbar, a_hat, x),
        SsdMode::Auto => {
            if quadratic_is_cheaper(l, d, n) {
                ssd_quadratic_from_decay(tape, c, bbar, a_hat, x)
            } else {
                ssd_recurrent(tape, c, bbar, a_hat, x)
            }
        }
    }
}
