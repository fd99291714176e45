//! Orthonormal 2D DFT kernels over channel-last `[h, w, c]` buffers.

use std::f64::consts::PI;

use crate::numerics::Scalar;

/// Precomputed roots of unity for one transform length.
pub struct Plan<T> {
    n: usize,
    /// `exp(-2πik/n)` for `k < n`.
    roots: Vec<(T, T)>,
}

impl<T: Scalar> Plan<T> {
    pub fn new(n: usize) -> Self {
        let roots = (0..n)
            .map(|k| {
                let ang = -2.0 * PI * k as f64 / n as f64;
                (T::c(ang.cos()), T::c(ang.sin()))
            })
            .collect();
        Plan { n, roots }
    }

    fn root(&self, k: usize, inverse: bool) -> (T, T) {
        let (c, s) = self.roots[k];
        if inverse {
            (c, -s)
        } else {
            (c, s)
        }
    }

    /// Unnormalized in-place DFT over `n` consecutive blocks of `block`
    /// values each, transforming every block lane independently. Radix-2
    /// Cooley–Tukey for power-of-two lengths, direct summation otherwise.
    pub fn run_blocks(&self, re: &mut [T], im: &mut [T], block: usize, inverse: bool, scratch: &mut Vec<T>) {
        debug_assert_eq!(re.len(), self.n * block);
        debug_assert_eq!(im.len(), self.n * block);
        if self.n <= 1 {
            return;
        }
        if self.n.is_power_of_two() {
            self.radix2(re, im, block, inverse);
        } else {
            self.direct(re, im, block, inverse, scratch);
        }
    }

    fn radix2(&self, re: &mut [T], im: &mut [T], block: usize, inverse: bool) {
        let n = self.n;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                let (lo, hi) = re.split_at_mut(j * block);
                lo[i * block..(i + 1) * block].swap_with_slice(&mut hi[..block]);
                let (lo, hi) = im.split_at_mut(j * block);
                lo[i * block..(i + 1) * block].swap_with_slice(&mut hi[..block]);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for k in 0..half {
                let (wr, wi) = self.root(k * stride, inverse);
                for start in (0..n).step_by(len) {
                    let a = (start + k) * block;
                    let b = a + half * block;
                    let (ra, rb) = re.split_at_mut(b);
                    let (ia, ib) = im.split_at_mut(b);
                    let (ra, ia) = (&mut ra[a..a + block], &mut ia[a..a + block]);
                    let (rb, ib) = (&mut rb[..block], &mut ib[..block]);
                    for j in 0..block {
                        let tr = rb[j] * wr - ib[j] * wi;
                        let ti = rb[j] * wi + ib[j] * wr;
                        rb[j] = ra[j] - tr;
                        ib[j] = ia[j] - ti;
                        ra[j] = ra[j] + tr;
                        ia[j] = ia[j] + ti;
                    }
                }
            }
            len <<= 1;
        }
    }

    fn direct(&self, re: &mut [T], im: &mut [T], block: usize, inverse: bool, scratch: &mut Vec<T>) {
        let n = self.n;
        let len = n * block;
        scratch.clear();
        scratch.resize(2 * len, T::zero());
        let (sr, si) = scratch.split_at_mut(len);
        for k in 0..n {
            let (or, oi) = (&mut sr[k * block..(k + 1) * block], &mut si[k * block..(k + 1) * block]);
            for j in 0..n {
                let (c, s) = self.root(j * k % n, inverse);
                let (xr, xi) = (&re[j * block..(j + 1) * block], &im[j * block..(j + 1) * block]);
                for l in 0..block {
                    or[l] = or[l] + xr[l] * c - xi[l] * s;
                    oi[l] = oi[l] + xr[l] * s + xi[l] * c;
                }
            }
        }
        re.copy_from_slice(sr);
        im.copy_from_slice(si);
    }
}

/// Unnormalized in-place 1D DFT of one vector.
pub fn fft1d<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    Plan::new(re.len()).run_blocks(re, im, 1, inverse, &mut Vec::new());
}

/// Per-channel orthonormal 2D transform, raw (uncentered) layout.
pub fn fft2_channels<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, c: usize, inverse: bool) {
    let mut scratch = Vec::new();
    let rows = Plan::<T>::new(w);
    for y in 0..h {
        let span = y * w * c..(y + 1) * w * c;
        rows.run_blocks(&mut re[span.clone()], &mut im[span], c, inverse, &mut scratch);
    }
    Plan::<T>::new(h).run_blocks(re, im, w * c, inverse, &mut scratch);
    let scale = T::c(1.0 / ((h * w) as f64).sqrt());
    for v in re.iter_mut().chain(im.iter_mut()) {
        *v = *v * scale;
    }
}

/// Move DC from `(0, 0)` to `(h/2, w/2)`.
pub fn center<T: Scalar>(raw: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); raw.len()];
    for u in 0..h {
        let ru = (u + h - h / 2) % h;
        for v in 0..w {
            let rv = (v + w - w / 2) % w;
            let (dst, src) = ((u * w + v) * c, (ru * w + rv) * c);
            out[dst..dst + c].copy_from_slice(&raw[src..src + c]);
        }
    }
    out
}

/// Inverse of [`center`].
pub fn uncenter<T: Scalar>(centered: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); centered.len()];
    for k in 0..h {
        let cu = (k + h / 2) % h;
        for l in 0..w {
            let cv = (l + w / 2) % w;
            let (dst, src) = ((k * w + l) * c, (cu * w + cv) * c);
            out[dst..dst + c].copy_from_slice(&centered[src..src + c]);
        }
    }
    out
}

/// Centered forward transform; `im = None` means a real input.
pub fn forward_centered<T: Scalar>(
    re: &[T],
    im: Option<&[T]>,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<T>, Vec<T>) {
    let mut r = re.to_vec();
    let mut i = match im {
        Some(im) => im.to_vec(),
        None => vec![T::zero(); re.len()],
    };
    fft2_channels(&mut r, &mut i, h, w, c, false);
    (center(&r, h, w, c), center(&i, h, w, c))
}

/// Inverse of [`forward_centered`], returning `(re, im)` in the spatial domain.
pub fn inverse_centered<T: Scalar>(re: &[T], im: &[T], h: usize, w: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let mut r = uncenter(re, h, w, c);
    let mut i = uncenter(im, h, w, c);
    fft2_channels(&mut r, &mut i, h, w, c, true);
    (r, i)
}
