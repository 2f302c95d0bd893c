//! Discrete Fourier transforms for arbitrary lengths.
//!
//! Forward convention e^{-2*pi*i*k*n/L}, unnormalized; the inverse carries the
//! 1/L factor. Composite lengths go through recursive mixed-radix
//! Cooley-Tukey; prime lengths above the naive cutoff use Bluestein's
//! chirp-z algorithm. All arithmetic runs in f64 internally, results are
//! rounded to f32 at the boundary.

use crate::error::{Error, Result};

/// Paired real/imaginary vectors; the carrier for frequency-domain signals.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVec {
    pub re: Vec<f32>,
    pub im: Vec<f32>,
}

impl ComplexVec {
    pub fn new(re: Vec<f32>, im: Vec<f32>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::shape("ComplexVec::new", re.len(), im.len()));
        }
        Ok(ComplexVec { re, im })
    }

    pub fn from_real(x: &[f32]) -> Self {
        ComplexVec { re: x.to_vec(), im: vec![0.0; x.len()] }
    }

    pub fn zeros(len: usize) -> Self {
        ComplexVec { re: vec![0.0; len], im: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    fn to_pairs(&self) -> Vec<(f64, f64)> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| (r as f64, i as f64))
            .collect()
    }

    fn from_pairs(p: &[(f64, f64)]) -> Self {
        ComplexVec {
            re: p.iter().map(|&(r, _)| r as f32).collect(),
            im: p.iter().map(|&(_, i)| i as f32).collect(),
        }
    }
}

/// Forward DFT of a complex signal.
pub fn fft(x: &ComplexVec) -> ComplexVec {
    ComplexVec::from_pairs(&fft_pairs(&x.to_pairs()))
}

/// Forward DFT of a real signal.
pub fn fft_real(x: &[f32]) -> ComplexVec {
    fft(&ComplexVec::from_real(x))
}

/// Inverse DFT; `ifft(fft(x)) == x` up to rounding.
pub fn ifft(z: &ComplexVec) -> ComplexVec {
    ComplexVec::from_pairs(&ifft_pairs(&z.to_pairs()))
}

/// zW + b evaluated as the stacked real/imaginary block product
/// [[Re W, -Im W], [Im W, Re W]].
///
/// `w_re`/`w_im` are LxL row-major; the product is matrix . column-vector.
pub fn complex_linear(
    z: &ComplexVec,
    w_re: &[f32],
    w_im: &[f32],
    b_re: &[f32],
    b_im: &[f32],
) -> Result<ComplexVec> {
    let l = z.len();
    if w_re.len() != l * l || w_im.len() != l * l || b_re.len() != l || b_im.len() != l {
        return Err(Error::shape("complex_linear", format!("z len {l}"), format!("W {}x? b {}", w_re.len(), b_re.len())));
    }
    let mut re = vec![0.0f32; l];
    let mut im = vec![0.0f32; l];
    for k in 0..l {
        let mut acc_re = b_re[k] as f64;
        let mut acc_im = b_im[k] as f64;
        for n in 0..l {
            let wr = w_re[k * l + n] as f64;
            let wi = w_im[k * l + n] as f64;
            let zr = z.re[n] as f64;
            let zi = z.im[n] as f64;
            acc_re += wr * zr - wi * zi;
            acc_im += wi * zr + wr * zi;
        }
        re[k] = acc_re as f32;
        im[k] = acc_im as f32;
    }
    ComplexVec::new(re, im)
}

// ---- f64 kernels (shared with the tape op) ----------------------------------

pub(crate) fn fft_pairs(x: &[(f64, f64)]) -> Vec<(f64, f64)> {
    dft_recursive(x)
}

pub(crate) fn ifft_pairs(x: &[(f64, f64)]) -> Vec<(f64, f64)> {
    // conj(fft(conj(x))) / L
    let n = x.len() as f64;
    let conj: Vec<(f64, f64)> = x.iter().map(|&(r, i)| (r, -i)).collect();
    dft_recursive(&conj)
        .into_iter()
        .map(|(r, i)| (r / n, -i / n))
        .collect()
}

/// Prime lengths up to this bound use the O(L^2) kernel directly.
const NAIVE_PRIME_CUTOFF: usize = 31;

fn dft_recursive(x: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let l = x.len();
    if l == 1 {
        return x.to_vec();
    }
    let p = smallest_prime_factor(l);
    if p == l {
        if l <= NAIVE_PRIME_CUTOFF {
            return dft_naive(x);
        }
        return dft_bluestein(x);
    }
    // Cooley-Tukey decimation in time with radix p.
    let m = l / p;
    let mut sub = Vec::with_capacity(p);
    for r in 0..p {
        let xr: Vec<(f64, f64)> = (0..m).map(|j| x[j * p + r]).collect();
        sub.push(dft_recursive(&xr));
    }
    let mut out = vec![(0.0, 0.0); l];
    for k in 0..l {
        let (mut acc_re, mut acc_im) = (0.0, 0.0);
        for (r, s) in sub.iter().enumerate() {
            let (yr, yi) = s[k % m];
            let ang = -2.0 * std::f64::consts::PI * ((r * k) % l) as f64 / l as f64;
            let (c, sn) = (ang.cos(), ang.sin());
            acc_re += yr * c - yi * sn;
            acc_im += yr * sn + yi * c;
        }
        out[k] = (acc_re, acc_im);
    }
    out
}

fn dft_naive(x: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let l = x.len();
    let mut out = vec![(0.0, 0.0); l];
    for k in 0..l {
        let (mut acc_re, mut acc_im) = (0.0, 0.0);
        for (n, &(xr, xi)) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * ((k * n) % l) as f64 / l as f64;
            let (c, s) = (ang.cos(), ang.sin());
            acc_re += xr * c - xi * s;
            acc_im += xr * s + xi * c;
        }
        out[k] = (acc_re, acc_im);
    }
    out
}

/// Bluestein chirp-z: any-length DFT as a power-of-two circular convolution.
fn dft_bluestein(x: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let l = x.len();
    let m = (2 * l - 1).next_power_of_two();

    // chirp[n] = e^{-pi i n^2 / L}; n^2 taken mod 2L to keep the angle exact.
    let chirp: Vec<(f64, f64)> = (0..l)
        .map(|n| {
            let ang = -std::f64::consts::PI * ((n * n) % (2 * l)) as f64 / l as f64;
            (ang.cos(), ang.sin())
        })
        .collect();

    let mut a = vec![(0.0, 0.0); m];
    for n in 0..l {
        a[n] = cmul(x[n], chirp[n]);
    }
    let mut b = vec![(0.0, 0.0); m];
    b[0] = (chirp[0].0, -chirp[0].1);
    for n in 1..l {
        let conj = (chirp[n].0, -chirp[n].1);
        b[n] = conj;
        b[m - n] = conj;
    }

    fft_pow2(&mut a, false);
    fft_pow2(&mut b, false);
    for i in 0..m {
        a[i] = cmul(a[i], b[i]);
    }
    fft_pow2(&mut a, true);

    (0..l).map(|k| cmul(a[k], chirp[k])).collect()
}

fn cmul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

/// Iterative radix-2 transform; `inverse` includes the 1/M factor.
fn fft_pow2(x: &mut [(f64, f64)], inverse: bool) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    // bit reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            x.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wc, ws) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cur_re, mut cur_im) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let u = x[i + k];
                let v = cmul(x[i + k + len / 2], (cur_re, cur_im));
                x[i + k] = (u.0 + v.0, u.1 + v.1);
                x[i + k + len / 2] = (u.0 - v.0, u.1 - v.1);
                let nr = cur_re * wc - cur_im * ws;
                cur_im = cur_re * ws + cur_im * wc;
                cur_re = nr;
            }
            i += len;
        }
        len <<= 1;
    }
    if inverse {
        let inv = 1.0 / n as f64;
        for v in x.iter_mut() {
            v.0 *= inv;
            v.1 *= inv;
        }
    }
}

fn smallest_prime_factor(n: usize) -> usize {
    if n.is_multiple_of(2) {
        return 2;
    }
    let mut d = 3;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return d;
        }
        d += 2;
    }
    n
}
