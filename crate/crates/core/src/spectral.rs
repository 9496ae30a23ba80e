//! 2-D Fourier kernels and the centered low/high pass windows.
//!
//! Convention: the forward transform is unnormalized, the inverse carries the
//! `1/(H*W)` factor, and spectra are stored with the DC bin moved to
//! `(H/2, W/2)` (integer division).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Centered complex spectrum of a real `H x W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    pub height: usize,
    pub width: usize,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Spectrum {
            height,
            width,
            re: vec![T::zero(); height * width],
            im: vec![T::zero(); height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> (T, T) {
        let i = row * self.width + col;
        (self.re[i], self.im[i])
    }

    pub fn set(&mut self, row: usize, col: usize, re: T, im: T) {
        let i = row * self.width + col;
        self.re[i] = re;
        self.im[i] = im;
    }

    /// Sum of squared bin magnitudes.
    pub fn energy(&self) -> T {
        self.re
            .iter()
            .zip(&self.im)
            .fold(T::zero(), |acc, (&r, &i)| acc + r * r + i * i)
    }

    fn masked(&self, k: usize, keep_inside: bool) -> Result<Self> {
        let mask = window_mask(self.height, self.width, k)?;
        let mut out = self.clone();
        for (i, inside) in mask.into_iter().enumerate() {
            if inside != keep_inside {
                out.re[i] = T::zero();
                out.im[i] = T::zero();
            }
        }
        Ok(out)
    }
}

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// In-place unnormalized 1-D DFT. `inverse` flips the exponent sign only.
pub fn dft1<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if is_pow2(n) {
        fft_radix2(re, im, inverse);
    } else {
        dft_direct(re, im, inverse);
    }
}

fn fft_radix2<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let twiddles: Vec<(T, T)> = (0..half)
            .map(|k| {
                let a = sign * 2.0 * std::f64::consts::PI * k as f64 / len as f64;
                (T::c(a.cos()), T::c(a.sin()))
            })
            .collect();
        for start in (0..n).step_by(len) {
            for (k, &(wr, wi)) in twiddles.iter().enumerate() {
                let a = start + k;
                let b = a + half;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] = re[a] + tr;
                im[a] = im[a] + ti;
            }
        }
        len <<= 1;
    }
}

fn dft_direct<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let src_re: Vec<f64> = re.iter().map(|v| v.f64()).collect();
    let src_im: Vec<f64> = im.iter().map(|v| v.f64()).collect();
    for k in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for t in 0..n {
            let a = sign * 2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
            let (s, c) = a.sin_cos();
            sr += src_re[t] * c - src_im[t] * s;
            si += src_re[t] * s + src_im[t] * c;
        }
        re[k] = T::c(sr);
        im[k] = T::c(si);
    }
}

/// Unnormalized 2-D DFT of a row-major `h x w` complex array, in place.
pub fn fft2<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    for r in 0..h {
        dft1(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let mut cr = vec![T::zero(); h];
    let mut ci = vec![T::zero(); h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        dft1(&mut cr, &mut ci, inverse);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
}

/// Move bin `(0, 0)` to `(h/2, w/2)`.
pub fn fftshift<T: Copy>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for i in 0..h {
        for j in 0..w {
            out[((i + h / 2) % h) * w + (j + w / 2) % w] = x[i * w + j];
        }
    }
    out
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Copy>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = x[((i + h / 2) % h) * w + (j + w / 2) % w];
        }
    }
    out
}

/// Centered forward transform of a real slice; returns `(re, im)`.
pub fn dft2_centered<T: Scalar>(x: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    let mut re = x.to_vec();
    let mut im = vec![T::zero(); x.len()];
    fft2(&mut re, &mut im, h, w, false);
    (fftshift(&re, h, w), fftshift(&im, h, w))
}

fn image_dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] if *h >= 2 && *w >= 2 => Ok((*h, *w)),
        s => Err(Error::shape(
            "dft2",
            format!("expected a real H x W image with H, W >= 2, got {s:?}"),
        )),
    }
}

pub fn dft2<T: Scalar>(image: &Tensor<T>) -> Result<Spectrum<T>> {
    let (h, w) = image_dims(image)?;
    let (re, im) = dft2_centered(image.data(), h, w);
    Ok(Spectrum {
        height: h,
        width: w,
        re,
        im,
    })
}

/// Imaginary residue allowed before the spectrum is rejected as non-Hermitian,
/// relative to the largest reconstructed magnitude (floored at 1).
pub const HERMITIAN_TOLERANCE: f64 = 1e-4;

pub fn idft2<T: Scalar>(spectrum: &Spectrum<T>) -> Result<Tensor<T>> {
    let (h, w) = (spectrum.height, spectrum.width);
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty spectrum"));
    }
    let mut re = ifftshift(&spectrum.re, h, w);
    let mut im = ifftshift(&spectrum.im, h, w);
    fft2(&mut re, &mut im, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    let mut peak = 1.0f64;
    let mut residue = 0.0f64;
    for (r, i) in re.iter().zip(&im) {
        peak = peak.max(r.f64().abs() * scale);
        residue = residue.max(i.f64().abs() * scale);
    }
    if residue > HERMITIAN_TOLERANCE * peak {
        return Err(Error::invalid(format!(
            "spectrum is not Hermitian: imaginary residue {residue:e}"
        )));
    }
    Tensor::new(vec![h, w], re.into_iter().map(|v| v * T::c(scale)).collect())
}

/// Row/column range `[start, end)` of the centered `k`-wide window along an axis.
pub fn window_range(size: usize, k: usize) -> (usize, usize) {
    let start = size / 2 - k / 2;
    (start, start + k)
}

/// Row-major mask that is `true` inside the centered `k x k` window.
pub fn window_mask(h: usize, w: usize, k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > h.min(w) {
        return Err(Error::invalid(format!(
            "window size {k} outside 1..={}",
            h.min(w)
        )));
    }
    let (r0, r1) = window_range(h, k);
    let (c0, c1) = window_range(w, k);
    Ok((0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            (r0..r1).contains(&r) && (c0..c1).contains(&c)
        })
        .collect())
}

/// Keep the centered `k x k` window, zero everything else.
pub fn low_pass<T: Scalar>(spectrum: &Spectrum<T>, k: usize) -> Result<Spectrum<T>> {
    spectrum.masked(k, true)
}

/// Zero the centered `k x k` window. Exact complement of [`low_pass`].
pub fn high_pass<T: Scalar>(spectrum: &Spectrum<T>, k: usize) -> Result<Spectrum<T>> {
    spectrum.masked(k, false)
}

/// Per-bin `|z|`, or `ln(1 + |z|)` with `log_scale`.
pub fn magnitude<T: Scalar>(spectrum: &Spectrum<T>, log_scale: bool) -> Tensor<T> {
    let data = spectrum
        .re
        .iter()
        .zip(&spectrum.im)
        .map(|(&r, &i)| {
            let m = r.hypot(i);
            if log_scale {
                m.ln_1p()
            } else {
                m
            }
        })
        .collect();
    Tensor::new(vec![spectrum.height, spectrum.width], data).expect("spectrum dims")
}

/// Magnitude image scaled into `[0, 1]` by its maximum, ready for 8-bit export.
pub fn spectrum_magnitude_image<T: Scalar>(spectrum: &Spectrum<T>, log_scale: bool) -> Tensor<T> {
    let m = magnitude(spectrum, log_scale);
    let peak = m.data().iter().fold(T::zero(), |a, &b| a.max(b));
    if peak > T::zero() {
        m.map(|v| v / peak)
    } else {
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(h: usize, w: usize) -> Spectrum<f64> {
        Spectrum {
            height: h,
            width: w,
            re: vec![1.0; h * w],
            im: vec![0.0; h * w],
        }
    }

    fn surviving(s: &Spectrum<f64>) -> Vec<(usize, usize)> {
        (0..s.height * s.width)
            .filter(|&i| s.re[i] != 0.0)
            .map(|i| (i / s.width, i % s.width))
            .collect()
    }

    #[test]
    fn constant_image_is_dc_only() {
        let img = Tensor::full(&[4, 6], 0.5f64);
        let s = dft2(&img).unwrap();
        for r in 0..4 {
            for c in 0..6 {
                let (re, im) = s.get(r, c);
                if (r, c) == (2, 3) {
                    assert!((re - 12.0).abs() < 1e-12);
                } else {
                    assert!(re.abs() < 1e-12);
                }
                assert!(im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_has_unit_magnitude_everywhere() {
        let mut img = Tensor::zeros(&[5, 4]);
        img.data_mut()[7] = 1.0f64;
        let m = magnitude(&dft2(&img).unwrap(), false);
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn window_on_ones() {
        let s = ones(4, 4);
        assert_eq!(surviving(&low_pass(&s, 2).unwrap()), vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert_eq!(surviving(&high_pass(&s, 2).unwrap()).len(), 12);
        assert_eq!(surviving(&low_pass(&s, 1).unwrap()), vec![(2, 2)]);
        assert_eq!(low_pass(&s, 4).unwrap(), s);
        assert!(surviving(&high_pass(&s, 4).unwrap()).is_empty());
    }

    #[test]
    fn window_out_of_range() {
        let s = ones(4, 4);
        assert!(low_pass(&s, 0).is_err());
        assert!(high_pass(&s, 5).is_err());
    }

    #[test]
    fn dc_only_inverse() {
        let mut s = Spectrum::zeros(4, 4);
        s.set(2, 2, 8.0f64, 0.0);
        let img = idft2(&s).unwrap();
        assert!(img.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let z = idft2(&Spectrum::<f64>::zeros(3, 3)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut s = Spectrum::zeros(4, 4);
        s.set(1, 2, 0.0f64, 3.0);
        assert!(idft2(&s).is_err());
    }

    #[test]
    fn magnitudes() {
        let mut s = Spectrum::zeros(2, 2);
        s.set(0, 0, -3.0f64, 0.0);
        s.set(1, 1, 3.0, 4.0);
        let m = magnitude(&s, false);
        assert_eq!(m.data(), &[3.0, 0.0, 0.0, 5.0]);
        let img = spectrum_magnitude_image(&s, false);
        assert!((img.data()[3] - 1.0).abs() < 1e-12);
        let zero = spectrum_magnitude_image(&Spectrum::<f64>::zeros(2, 2), true);
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(dft2(&Tensor::<f64>::zeros(&[1, 4])).is_err());
    }
}
