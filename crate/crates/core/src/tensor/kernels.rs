//! Raw loops behind the tape operations. Everything here works on flat
//! row-major slices; shape checking happens in the tape layer.
//!
//! Summation order for every output element is fixed by the loop nest and
//! never depends on the batch extent, so a row computed inside a large batch
//! is bit-identical to the same row computed alone.

/// Output extent of a "same"-padded convolution with an odd kernel.
///
/// Stride 1 preserves the extent, stride 2 gives `ceil(input / 2)`.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (input + 2 * pad - kernel) / stride + 1
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
    c
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += a_ip * gv;
            }
        }
    }
}

/// Geometry of a convolution viewed from its "small" side: `wide` is the
/// full-resolution map (conv2d input / transpose output), `narrow` the
/// strided one (conv2d output / transpose input). `kernel` is laid out as
/// `[narrow_c × wide_c × k × k]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub wide_c: usize,
    pub wide_h: usize,
    pub wide_w: usize,
    pub narrow_c: usize,
    pub narrow_h: usize,
    pub narrow_w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeometry {
    fn pad(&self) -> isize {
        ((self.k - 1) / 2) as isize
    }

    /// Valid `narrow` positions along one axis for kernel offset `kk`,
    /// paired with the matching `wide` coordinate.
    fn span(&self, kk: usize, narrow: usize, wide: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad();
        // wide = n * s + off must lie in [0, wide)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (wide as isize - off + s - 1) / s;
        let hi = hi.clamp(0, narrow as isize);
        (lo.min(hi) as usize, hi as usize)
    }

    fn wide_index(&self, n: usize, kk: usize) -> usize {
        (n as isize * self.stride as isize + kk as isize - self.pad()) as usize
    }
}

/// `narrow[b, f, y, x] += Σ wide[b, c, y*s+ky-p, x*s+kx-p] · kernel[f, c, ky, kx]`
///
/// Forward pass of conv2d, and input gradient of the transposed convolution.
pub(crate) fn conv_gather(wide: &[f64], kernel: &[f64], g: ConvGeometry, narrow: &mut [f64]) {
    let (wh, ww, nh, nw, k) = (g.wide_h, g.wide_w, g.narrow_h, g.narrow_w, g.k);
    for b in 0..g.batch {
        for f in 0..g.narrow_c {
            let out =
                &mut narrow[((b * g.narrow_c + f) * nh * nw)..((b * g.narrow_c + f + 1) * nh * nw)];
            for c in 0..g.wide_c {
                let src = &wide[((b * g.wide_c + c) * wh * ww)..((b * g.wide_c + c + 1) * wh * ww)];
                let kern = &kernel[((f * g.wide_c + c) * k * k)..((f * g.wide_c + c + 1) * k * k)];
                for ky in 0..k {
                    let (y0, y1) = g.span(ky, nh, wh);
                    for kx in 0..k {
                        let w = kern[ky * k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.span(kx, nw, ww);
                        for y in y0..y1 {
                            let iy = g.wide_index(y, ky);
                            let out_row = &mut out[y * nw..(y + 1) * nw];
                            let src_row = &src[iy * ww..(iy + 1) * ww];
                            for x in x0..x1 {
                                out_row[x] += w * src_row[g.wide_index(x, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `wide[b, c, y*s+ky-p, x*s+kx-p] += narrow[b, f, y, x] · kernel[f, c, ky, kx]`
///
/// Input gradient of conv2d, and forward pass of the transposed convolution.
pub(crate) fn conv_scatter(narrow: &[f64], kernel: &[f64], g: ConvGeometry, wide: &mut [f64]) {
    let (wh, ww, nh, nw, k) = (g.wide_h, g.wide_w, g.narrow_h, g.narrow_w, g.k);
    for b in 0..g.batch {
        for f in 0..g.narrow_c {
            let src =
                &narrow[((b * g.narrow_c + f) * nh * nw)..((b * g.narrow_c + f + 1) * nh * nw)];
            for c in 0..g.wide_c {
                let dst =
                    &mut wide[((b * g.wide_c + c) * wh * ww)..((b * g.wide_c + c + 1) * wh * ww)];
                let kern = &kernel[((f * g.wide_c + c) * k * k)..((f * g.wide_c + c + 1) * k * k)];
                for ky in 0..k {
                    let (y0, y1) = g.span(ky, nh, wh);
                    for kx in 0..k {
                        let w = kern[ky * k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.span(kx, nw, ww);
                        for y in y0..y1 {
                            let iy = g.wide_index(y, ky);
                            let src_row = &src[y * nw..(y + 1) * nw];
                            let dst_row = &mut dst[iy * ww..(iy + 1) * ww];
                            for x in x0..x1 {
                                dst_row[g.wide_index(x, kx)] += w * src_row[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `kernel_grad[f, c, ky, kx] += Σ narrow[b, f, y, x] · wide[b, c, y*s+ky-p, x*s+kx-p]`
pub(crate) fn conv_kernel_grad(
    wide: &[f64],
    narrow: &[f64],
    g: ConvGeometry,
    kernel_grad: &mut [f64],
) {
    let (wh, ww, nh, nw, k) = (g.wide_h, g.wide_w, g.narrow_h, g.narrow_w, g.k);
    for b in 0..g.batch {
        for f in 0..g.narrow_c {
            let nmap =
                &narrow[((b * g.narrow_c + f) * nh * nw)..((b * g.narrow_c + f + 1) * nh * nw)];
            for c in 0..g.wide_c {
                let wmap =
                    &wide[((b * g.wide_c + c) * wh * ww)..((b * g.wide_c + c + 1) * wh * ww)];
                let kg = &mut kernel_grad
                    [((f * g.wide_c + c) * k * k)..((f * g.wide_c + c + 1) * k * k)];
                for ky in 0..k {
                    let (y0, y1) = g.span(ky, nh, wh);
                    for kx in 0..k {
                        let (x0, x1) = g.span(kx, nw, ww);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = g.wide_index(y, ky);
                            let n_row = &nmap[y * nw..(y + 1) * nw];
                            let w_row = &wmap[iy * ww..(iy + 1) * ww];
                            for x in x0..x1 {
                                acc += n_row[x] * w_row[g.wide_index(x, kx)];
                            }
                        }
                        kg[ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        assert_eq!(conv_output_size(28, 5, 1), 28);
        assert_eq!(conv_output_size(28, 5, 2), 14);
        assert_eq!(conv_output_size(14, 5, 2), 7);
        assert_eq!(conv_output_size(7, 5, 2), 4);
        assert_eq!(conv_output_size(4, 5, 2), 2);
        assert_eq!(conv_output_size(1, 5, 2), 1);
        assert_eq!(conv_output_size(3, 1, 1), 3);
    }

    #[test]
    fn matmul_small() {
        let c = matmul(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1);
        assert_eq!(c, vec![11.0]);
    }

    #[test]
    fn span_covers_exactly_valid_positions() {
        for &(wide, stride) in &[(7usize, 2usize), (8, 2), (5, 1), (1, 2), (2, 2)] {
            let narrow = conv_output_size(wide, 5, stride);
            let g = ConvGeometry {
                batch: 1,
                wide_c: 1,
                wide_h: wide,
                wide_w: wide,
                narrow_c: 1,
                narrow_h: narrow,
                narrow_w: narrow,
                k: 5,
                stride,
            };
            for kk in 0..5 {
                let (lo, hi) = g.span(kk, narrow, wide);
                for n in 0..narrow {
                    let w = n as isize * stride as isize + kk as isize - 2;
                    let valid = w >= 0 && (w as usize) < wide;
                    assert_eq!(
                        valid,
                        n >= lo && n < hi,
                        "wide={wide} s={stride} kk={kk} n={n}"
                    );
                }
            }
        }
    }
}
