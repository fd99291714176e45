//! Straight-line `f64` reference implementations over nested `Vec`s, used
//! to cross-check the graph kernels. Slow by design; no shared code with the
//! kernels they check.

use std::f64::consts::PI;

pub type Mat = Vec<Vec<f64>>;

/// Weight `[din][dout]` and bias `[dout]`.
#[derive(Clone, Debug)]
pub struct Lin {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Pack {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub heads: usize,
}

pub fn linear(x: &Mat, l: &Lin) -> Mat {
    x.iter()
        .map(|row| {
            (0..l.b.len())
                .map(|j| l.b[j] + row.iter().enumerate().map(|(i, &xi)| xi * l.w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn head(m: &Mat, h: usize, dh: usize) -> Mat {
    m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect()
}

/// Weighted row sum `Σ_j p_j · v_j`.
fn mix(p: &[f64], v: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; v[0].len()];
    for (pj, vj) in p.iter().zip(v) {
        for (o, x) in out.iter_mut().zip(vj) {
            *o += pj * x;
        }
    }
    out
}

fn merge_heads(parts: Vec<Mat>) -> Mat {
    let n = parts[0].len();
    (0..n).map(|i| parts.iter().flat_map(|p| p[i].clone()).collect()).collect()
}

/// Dense multi-head cross attention: queries from `x`, keys/values from `y`.
pub fn cross_attention(x: &Mat, y: &Mat, p: &Pack) -> Mat {
    let (q, k, v) = (linear(x, &p.q), linear(y, &p.k), linear(y, &p.v));
    let dh = q[0].len() / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let parts = (0..p.heads)
        .map(|h| {
            let (qh, kh, vh) = (head(&q, h, dh), head(&k, h, dh), head(&v, h, dh));
            qh.iter()
                .map(|qi| {
                    let s: Vec<f64> = kh.iter().map(|kj| dot(qi, kj) * scale).collect();
                    mix(&softmax(&s), &vh)
                })
                .collect()
        })
        .collect();
    merge_heads(parts)
}

/// Agent-routed attention: agents first pool the values, queries then read
/// from the agents.
pub fn agent_attention(x: &Mat, y: &Mat, agents: &Mat, p: &Pack) -> Mat {
    let (q, k, v) = (linear(x, &p.q), linear(y, &p.k), linear(y, &p.v));
    let dh = q[0].len() / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let parts = (0..p.heads)
        .map(|h| {
            let (qh, kh, vh, ah) = (head(&q, h, dh), head(&k, h, dh), head(&v, h, dh), head(agents, h, dh));
            let pooled: Mat = ah
                .iter()
                .map(|a| {
                    let s: Vec<f64> = kh.iter().map(|kj| dot(a, kj) * scale).collect();
                    mix(&softmax(&s), &vh)
                })
                .collect();
            qh.iter()
                .map(|qi| {
                    let s: Vec<f64> = ah.iter().map(|a| dot(qi, a) * scale).collect();
                    mix(&softmax(&s), &pooled)
                })
                .collect()
        })
        .collect();
    merge_heads(parts)
}

/// Bilinear resampling of a `[h][w]` grid of vectors with half-pixel
/// centers and edge clamping.
pub fn resize(grid: &[Mat], oh: usize, ow: usize) -> Vec<Mat> {
    let (h, w) = (grid.len(), grid[0].len());
    let src = |o: usize, inn: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inn as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inn - 1);
        let i1 = (i0 + 1).min(inn - 1);
        (i0, i1, s - i0 as f64)
    };
    (0..oh)
        .map(|oy| {
            let (y0, y1, fy) = src(oy, h, oh);
            (0..ow)
                .map(|ox| {
                    let (x0, x1, fx) = src(ox, w, ow);
                    (0..grid[0][0].len())
                        .map(|c| {
                            let top = grid[y0][x0][c] * (1.0 - fx) + grid[y0][x1][c] * fx;
                            let bot = grid[y1][x0][c] * (1.0 - fx) + grid[y1][x1][c] * fx;
                            top * (1.0 - fy) + bot * fy
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Token list on an `h × w` grid.
#[derive(Clone, Debug)]
pub struct Grid {
    pub tokens: Mat,
    pub h: usize,
    pub w: usize,
}

fn to_grid(tokens: &[Vec<f64>], h: usize, w: usize) -> Vec<Mat> {
    (0..h).map(|y| tokens[y * w..(y + 1) * w].to_vec()).collect()
}

/// Reverse-direction output split per member, resampled to `(h, w)`, averaged.
fn align(rev: &Mat, members: &[Grid], h: usize, w: usize) -> Mat {
    let d = rev[0].len();
    let mut acc = vec![vec![0.0; d]; h * w];
    let mut off = 0;
    for m in members {
        let seg = &rev[off..off + m.h * m.w];
        off += m.h * m.w;
        let r = resize(&to_grid(seg, m.h, m.w), h, w);
        for (i, t) in r.into_iter().flatten().enumerate() {
            for (a, b) in acc[i].iter_mut().zip(t) {
                *a += b / members.len() as f64;
            }
        }
    }
    acc
}

fn concat(members: &[Grid]) -> Mat {
    members.iter().flat_map(|m| m.tokens.clone()).collect()
}

/// Mutual attention of `x` with the union of `members`; `agents = None`
/// selects dense attention in both directions.
pub fn mutual_attention(x: &Grid, members: &[Grid], agents: Option<&Mat>, xy: &Pack, yx: &Pack) -> Mat {
    let y = concat(members);
    let (fwd, rev) = match agents {
        None => (cross_attention(&x.tokens, &y, xy), cross_attention(&y, &x.tokens, yx)),
        Some(a) => (agent_attention(&x.tokens, &y, a, xy), agent_attention(&y, &x.tokens, a, yx)),
    };
    let back = align(&rev, members, x.h, x.w);
    fwd.iter()
        .zip(back)
        .map(|(f, b)| f.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

/// Complex `[h][w]` values per channel: `z[ch][y][x] = (re, im)`.
pub type Planes = Vec<Vec<Vec<(f64, f64)>>>;

/// Split an `[h, w, c]` row-major buffer into per-channel real planes.
pub fn planes(data: &[f64], h: usize, w: usize, c: usize) -> Planes {
    (0..c)
        .map(|ch| {
            (0..h)
                .map(|y| (0..w).map(|x| (data[(y * w + x) * c + ch], 0.0)).collect())
                .collect()
        })
        .collect()
}

/// Merge per-channel planes back into `[h, w, c]` (real, imaginary) buffers.
pub fn interleave(z: &Planes) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (z.len(), z[0].len(), z[0][0].len());
    let mut re = vec![0.0; h * w * c];
    let mut im = vec![0.0; h * w * c];
    for (ch, plane) in z.iter().enumerate() {
        for (y, row) in plane.iter().enumerate() {
            for (x, &(a, b)) in row.iter().enumerate() {
                re[(y * w + x) * c + ch] = a;
                im[(y * w + x) * c + ch] = b;
            }
        }
    }
    (re, im)
}

/// Orthonormal 2D DFT by direct summation with DC at `(h/2, w/2)`: output
/// index `u` holds frequency `u − h/2`.
pub fn dft2_centered(z: &Planes, inverse: bool) -> Planes {
    let sign = if inverse { 1.0 } else { -1.0 };
    z.iter()
        .map(|plane| {
            let (h, w) = (plane.len(), plane[0].len());
            let norm = 1.0 / ((h * w) as f64).sqrt();
            let (fh, fw) = ((h / 2) as f64, (w / 2) as f64);
            (0..h)
                .map(|a| {
                    (0..w)
                        .map(|b| {
                            let (mut sr, mut si) = (0.0, 0.0);
                            for (m, row) in plane.iter().enumerate() {
                                for (n, &(xr, xi)) in row.iter().enumerate() {
                                    // Centered frequencies sit on the frequency side of the sum.
                                    let (ku, kv, pm, pn) = if inverse {
                                        (m as f64 - fh, n as f64 - fw, a as f64, b as f64)
                                    } else {
                                        (a as f64 - fh, b as f64 - fw, m as f64, n as f64)
                                    };
                                    let ang = sign * 2.0 * PI * (ku * pm / h as f64 + kv * pn / w as f64);
                                    let (c, s) = (ang.cos(), ang.sin());
                                    sr += xr * c - xi * s;
                                    si += xr * s + xi * c;
                                }
                            }
                            (sr * norm, si * norm)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// `true` marks the high band.
pub fn band_mask(z: &Planes, tau: f64, magnitude: bool) -> Vec<Vec<Vec<bool>>> {
    z.iter()
        .map(|plane| {
            let (h, w) = (plane.len(), plane[0].len());
            let peak = plane
                .iter()
                .flatten()
                .map(|&(a, b)| a.hypot(b))
                .fold(0.0, f64::max);
            let (u0, v0) = ((h / 2) as f64, (w / 2) as f64);
            let nyq = u0.hypot(v0);
            (0..h)
                .map(|u| {
                    (0..w)
                        .map(|v| {
                            let ratio = if magnitude {
                                let (a, b) = plane[u][v];
                                if peak > 0.0 {
                                    a.hypot(b) / peak
                                } else {
                                    0.0
                                }
                            } else if nyq > 0.0 {
                                (u as f64 - u0).hypot(v as f64 - v0) / nyq
                            } else {
                                0.0
                            };
                            ratio >= tau
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn select(z: &Planes, mask: &[Vec<Vec<bool>>], keep: bool) -> Planes {
    z.iter()
        .zip(mask)
        .map(|(p, m)| {
            p.iter()
                .zip(m)
                .map(|(r, mr)| r.iter().zip(mr).map(|(&v, &b)| if b == keep { v } else { (0.0, 0.0) }).collect())
                .collect()
        })
        .collect()
}

fn sub(a: &Planes, b: &Planes) -> Planes {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(r, s)| r.iter().zip(s).map(|(&(x, y), &(u, v))| (x - u, y - v)).collect())
                .collect()
        })
        .collect()
}

fn add(a: &Planes, b: &Planes) -> Planes {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            p.iter()
                .zip(q)
                .map(|(r, s)| r.iter().zip(s).map(|(&(x, y), &(u, v))| (x + u, y + v)).collect())
                .collect()
        })
        .collect()
}

/// Intermediates of one enhancement, as channel planes.
pub struct FemTrace {
    pub d_h: Planes,
    pub d_l: Planes,
    pub f_1to_i: Planes,
    pub f_ito_1: Planes,
    /// Real part of the inverse transform, `[h, w, 2d]` row-major.
    pub out: Vec<f64>,
    pub imag_residue: f64,
}

/// Cross-scale complementation of `e1` and `ei` (`[h, w, d]` row-major).
pub fn fem_enhance(e1: &[f64], ei: &[f64], h: usize, w: usize, d: usize, tau: f64, magnitude: bool) -> FemTrace {
    let f1 = dft2_centered(&planes(e1, h, w, d), false);
    let fi = dft2_centered(&planes(ei, h, w, d), false);
    let m1 = band_mask(&f1, tau, magnitude);
    let mi = band_mask(&fi, tau, magnitude);
    let d_h = sub(&select(&f1, &m1, true), &select(&fi, &mi, true));
    let d_l = sub(&select(&fi, &mi, false), &select(&f1, &m1, false));
    let f_1to_i: Planes = d_h.iter().chain(fi.iter()).cloned().collect();
    let f_ito_1: Planes = d_l.iter().chain(f1.iter()).cloned().collect();
    let spatial = dft2_centered(&add(&f_ito_1, &f_1to_i), true);
    let (out, imag) = interleave(&spatial);
    let imag_residue = imag.iter().map(|x| x.abs()).fold(0.0, f64::max);
    FemTrace {
        d_h,
        d_l,
        f_1to_i,
        f_ito_1,
        out,
        imag_residue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dft_roundtrip_and_dc() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let z = planes(&data, 3, 2, 2);
        let back = dft2_centered(&dft2_centered(&z, false), true);
        let (re, im) = interleave(&back);
        for (a, b) in re.iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(im.iter().all(|x| x.abs() < 1e-12));
        let ones = dft2_centered(&planes(&[1.0; 4], 2, 2, 1), false);
        assert!((ones[0][1][1].0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform() {
        assert_eq!(softmax(&[0.3, 0.3]), vec![0.5, 0.5]);
    }
}
