//! Complex DFT kernels backing the public spectrum operations, fast
//! convolution, and the STFT.
//!
//! Power-of-two lengths use an iterative radix-2 transform with a precomputed
//! twiddle table ([`Fft`]); other lengths fall back to the O(n^2) direct sum,
//! which is only ever hit for short vectors (odd filter lengths and the like).

use num_complex::Complex;

pub type C64 = Complex<f64>;

/// Reusable transform plan for one power-of-two length.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    /// exp(-2*pi*i*k/n) for k in 0..n/2.
    twiddles: Vec<C64>,
}

impl Fft {
    /// Builds a plan for length `n`, which must be a power of two (>= 1).
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT length {n} is not a power of two");
        let twiddles = (0..n / 2)
            .map(|k| {
                let angle = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex::new(angle.cos(), angle.sin())
            })
            .collect();
        Fft { n, twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform.
    pub fn forward(&self, buf: &mut [C64]) {
        self.transform(buf, false);
    }

    /// In-place inverse transform, including the 1/n scaling.
    pub fn inverse(&self, buf: &mut [C64]) {
        self.transform(buf, true);
        let scale = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    fn transform(&self, buf: &mut [C64], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n, "buffer length does not match plan");
        if n <= 1 {
            return;
        }

        // Bit-reversal permutation.
        let shift = usize::BITS - n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> shift;
            if j > i {
                buf.swap(i, j);
            }
        }

        let mut m = 2;
        while m <= n {
            let stride = n / m;
            let half = m / 2;
            for start in (0..n).step_by(m) {
                for j in 0..half {
                    let mut w = self.twiddles[j * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + j];
                    let b = buf[start + j + half] * w;
                    buf[start + j] = a + b;
                    buf[start + j + half] = a - b;
                }
            }
            m <<= 1;
        }
    }
}

/// Direct O(n^2) transform for arbitrary lengths.
fn dft_direct(x: &[C64], inverse: bool) -> Vec<C64> {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    (0..n)
        .map(|k| {
            let mut acc = Complex::new(0.0, 0.0);
            for (j, &v) in x.iter().enumerate() {
                // Reduce j*k mod n first so the angle stays small and accurate.
                let t = (j * k) % n;
                let angle = sign * 2.0 * std::f64::consts::PI * t as f64 / n as f64;
                acc += v * Complex::new(angle.cos(), angle.sin());
            }
            acc * scale
        })
        .collect()
}

/// Forward transform of any length (plan-per-call convenience).
pub fn fft_forward(x: &[C64]) -> Vec<C64> {
    if x.len().is_power_of_two() {
        let mut buf = x.to_vec();
        Fft::new(x.len()).forward(&mut buf);
        buf
    } else {
        dft_direct(x, false)
    }
}

/// Inverse transform of any length, including the 1/n scaling.
pub fn fft_inverse(x: &[C64]) -> Vec<C64> {
    if x.len().is_power_of_two() {
        let mut buf = x.to_vec();
        Fft::new(x.len()).inverse(&mut buf);
        buf
    } else {
        dft_direct(x, true)
    }
}
