//! Periodic 2D convolution kernels. The hot path of training: inner loops
//! run on periodically pre-padded tiles so they stay contiguous and free of
//! modulo arithmetic, and parallel work is partitioned so every reduction
//! happens in a fixed sequential order (bitwise-deterministic results
//! independent of the thread schedule).

use rayon::prelude::*;

/// Wraps image `src` (h x w) into a (h+k-1) x (w+k-1) tile so that
/// tile[y + ky][x + kx] = src_periodic(y + ky - k/2, x + kx - k/2).
fn pad_periodic(src: &[f64], h: usize, w: usize, k: usize, tile: &mut [f64]) {
    let off = k / 2;
    let (th, tw) = (h + k - 1, w + k - 1);
    debug_assert_eq!(tile.len(), th * tw);
    for ty in 0..th {
        let sy = (ty + h - off % h) % h;
        let srow = &src[sy * w..(sy + 1) * w];
        let trow = &mut tile[ty * tw..(ty + 1) * tw];
        for (tx, t) in trow.iter_mut().enumerate() {
            let sx = (tx + w - off % w) % w;
            *t = srow[sx];
        }
    }
}

/// out[b,co,y,x] = bias[co] + sum_{ci,ky,kx} w[co,ci,ky,kx] *
/// x_periodic[b,ci,y+ky-k/2,x+kx-k/2]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_periodic_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [f64],
) {
    let plane = h * w;
    let (th, tw) = (h + k - 1, w + k - 1);
    debug_assert_eq!(out.len(), batch * c_out * plane);
    out.par_chunks_mut(c_out * plane).enumerate().for_each(|(b, out_b)| {
        let mut tiles = vec![0.0; c_in * th * tw];
        for ci in 0..c_in {
            pad_periodic(
                &x[(b * c_in + ci) * plane..(b * c_in + ci + 1) * plane],
                h,
                w,
                k,
                &mut tiles[ci * th * tw..(ci + 1) * th * tw],
            );
        }
        for co in 0..c_out {
            let out_c = &mut out_b[co * plane..(co + 1) * plane];
            out_c.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..c_in {
                let tile = &tiles[ci * th * tw..(ci + 1) * th * tw];
                let wk = &weight[(co * c_in + ci) * k * k..(co * c_in + ci + 1) * k * k];
                for y in 0..h {
                    let orow = &mut out_c[y * w..(y + 1) * w];
                    for ky in 0..k {
                        let trow = &tile[(y + ky) * tw..(y + ky) * tw + tw];
                        for kx in 0..k {
                            let coeff = wk[ky * k + kx];
                            let seg = &trow[kx..kx + w];
                            for (o, t) in orow.iter_mut().zip(seg) {
                                *o += coeff * t;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradients of the periodic convolution. Any of the output slots may be
/// empty when that gradient is not needed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_periodic_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let plane = h * w;
    let (th, tw) = (h + k - 1, w + k - 1);

    if let Some(db) = db {
        db.par_iter_mut().enumerate().for_each(|(co, out)| {
            let mut acc = 0.0;
            for b in 0..batch {
                acc += dy[(b * c_out + co) * plane..(b * c_out + co + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
            *out += acc;
        });
    }

    if let Some(dw) = dw {
        // one task per output channel; the batch loop inside is sequential
        dw.par_chunks_mut(c_in * k * k).enumerate().for_each(|(co, dw_co)| {
            let mut tile = vec![0.0; th * tw];
            for b in 0..batch {
                for ci in 0..c_in {
                    pad_periodic(
                        &x[(b * c_in + ci) * plane..(b * c_in + ci + 1) * plane],
                        h,
                        w,
                        k,
                        &mut tile,
                    );
                    let dyc = &dy[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
                    let dwk = &mut dw_co[ci * k * k..(ci + 1) * k * k];
                    for y in 0..h {
                        let dyrow = &dyc[y * w..(y + 1) * w];
                        for ky in 0..k {
                            let trow = &tile[(y + ky) * tw..(y + ky) * tw + tw];
                            for kx in 0..k {
                                let seg = &trow[kx..kx + w];
                                let mut acc = 0.0;
                                for (d, t) in dyrow.iter().zip(seg) {
                                    acc += d * t;
                                }
                                dwk[ky * k + kx] += acc;
                            }
                        }
                    }
                }
            }
        });
    }

    if let Some(dx) = dx {
        // transposed convolution: scatter dy into a padded buffer per input
        // channel, then fold the wrap-around margins back
        let off = k / 2;
        dx.par_chunks_mut(c_in * plane).enumerate().for_each(|(b, dx_b)| {
            let mut pad = vec![0.0; th * tw];
            for ci in 0..c_in {
                pad.iter_mut().for_each(|v| *v = 0.0);
                for co in 0..c_out {
                    let dyc = &dy[(b * c_out + co) * plane..(b * c_out + co + 1) * plane];
                    let wk = &weight[(co * c_in + ci) * k * k..(co * c_in + ci + 1) * k * k];
                    for y in 0..h {
                        let dyrow = &dyc[y * w..(y + 1) * w];
                        for ky in 0..k {
                            let prow = &mut pad[(y + ky) * tw..(y + ky) * tw + tw];
                            for kx in 0..k {
                                let coeff = wk[ky * k + kx];
                                let seg = &mut prow[kx..kx + w];
                                for (p, d) in seg.iter_mut().zip(dyrow) {
                                    *p += coeff * d;
                                }
                            }
                        }
                    }
                }
                let dxc = &mut dx_b[ci * plane..(ci + 1) * plane];
                for ty in 0..th {
                    let sy = (ty + h - off % h) % h;
                    for tx in 0..tw {
                        let sx = (tx + w - off % w) % w;
                        dxc[sy * w + sx] += pad[ty * tw + tx];
                    }
                }
            }
        });
    }
}

/// 2x2 average pooling with stride 2; trailing odd rows/columns are dropped.
pub fn avgpool2_forward(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(out.len(), planes * oh * ow);
    debug_assert_eq!(x.len(), planes * h * w);
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, oi)| {
        let xi = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xcol in 0..ow {
                let (r, c) = (2 * y, 2 * xcol);
                oi[y * ow + xcol] = 0.25
                    * (xi[r * w + c] + xi[r * w + c + 1] + xi[(r + 1) * w + c]
                        + xi[(r + 1) * w + c + 1]);
            }
        }
    });
}

pub fn avgpool2_backward(dy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(dx.len(), planes * h * w);
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, dxi)| {
        let dyi = &dy[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xcol in 0..ow {
                let g = 0.25 * dyi[y * ow + xcol];
                let (r, c) = (2 * y, 2 * xcol);
                dxi[r * w + c] += g;
                dxi[r * w + c + 1] += g;
                dxi[(r + 1) * w + c] += g;
                dxi[(r + 1) * w + c + 1] += g;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity_kernel() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| i as f64 * 0.1).collect();
        // weight [co=3, ci=3, 1, 1] = identity across channels
        let mut weight = vec![0.0; 9];
        for c in 0..3 {
            weight[c * 3 + c] = 1.0;
        }
        let bias = vec![0.0; 3];
        let mut out = vec![0.0; x.len()];
        conv2d_periodic_forward(&x, &weight, &bias, 2, 3, 3, 4, 4, 1, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn periodic_wraparound_matches_naive() {
        let (h, w, k) = (5usize, 6usize, 3usize);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..k * k).map(|i| (i as f64 - 4.0) * 0.3).collect();
        let mut out = vec![0.0; h * w];
        conv2d_periodic_forward(&x, &weight, &[0.25], 1, 1, 1, h, w, k, &mut out);
        for y in 0..h {
            for xc in 0..w {
                let mut acc = 0.25;
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = (y + ky + h - k / 2) % h;
                        let sx = (xc + kx + w - k / 2) % w;
                        acc += weight[ky * k + kx] * x[sy * w + sx];
                    }
                }
                assert!((out[y * w + xc] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        // periodic convolution commutes with cyclic shifts
        let (h, w, k) = (8usize, 8usize, 5usize);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 13) % 7) as f64).collect();
        let weight: Vec<f64> = (0..k * k).map(|i| (i as f64) * 0.01 - 0.1).collect();
        let mut out = vec![0.0; h * w];
        conv2d_periodic_forward(&x, &weight, &[0.0], 1, 1, 1, h, w, k, &mut out);
        let (dy, dx_shift) = (3usize, 5usize);
        let mut xs = vec![0.0; h * w];
        for y in 0..h {
            for c in 0..w {
                xs[((y + dy) % h) * w + (c + dx_shift) % w] = x[y * w + c];
            }
        }
        let mut out_s = vec![0.0; h * w];
        conv2d_periodic_forward(&xs, &weight, &[0.0], 1, 1, 1, h, w, k, &mut out_s);
        for y in 0..h {
            for c in 0..w {
                let shifted = out[y * w + c];
                let direct = out_s[((y + dy) % h) * w + (c + dx_shift) % w];
                assert!((shifted - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn avgpool_forward_backward() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut out = vec![0.0; 4];
        avgpool2_forward(&x, 1, 4, 4, &mut out);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
        let mut dx = vec![0.0; 16];
        avgpool2_backward(&[4.0, 0.0, 0.0, 0.0], 1, 4, 4, &mut dx);
        assert_eq!(dx[0], 1.0);
        assert_eq!(dx[1], 1.0);
        assert_eq!(dx[4], 1.0);
        assert_eq!(dx[5], 1.0);
        assert_eq!(dx[2], 0.0);
    }
}
