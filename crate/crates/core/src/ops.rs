//! Dense kernels for average pooling, 2-D cross-correlation and affine maps,
//! with the backward passes used by training. Tensors are row-major `f64`
//! slices; feature maps are `C x H x W`.
//!
//! Forward kernels skip zero inputs, which dominate spike tensors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl MapShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pooled(&self, k: usize) -> Self {
        Self::new(self.c, self.h / k, self.w / k)
    }

    pub fn convolved(&self, out_c: usize, k: usize, pad: usize, stride: usize) -> Self {
        let dim = |d: usize| (d + 2 * pad).saturating_sub(k) / stride + 1;
        Self::new(out_c, dim(self.h), dim(self.w))
    }
}

/// `k x k` average pooling with stride `k`; remainder rows/columns are dropped.
pub fn avg_pool(input: &[f64], shape: MapShape, k: usize) -> Vec<f64> {
    let out = shape.pooled(k);
    let mut result = vec![0.0; out.len()];
    let scale = 1.0 / (k * k) as f64;
    for c in 0..shape.c {
        for oy in 0..out.h {
            for ox in 0..out.w {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = (c * shape.h + oy * k + dy) * shape.w + ox * k;
                    acc += input[row..row + k].iter().sum::<f64>();
                }
                result[(c * out.h + oy) * out.w + ox] = acc * scale;
            }
        }
    }
    result
}

pub fn avg_pool_backward(grad_out: &[f64], in_shape: MapShape, k: usize) -> Vec<f64> {
    let out = in_shape.pooled(k);
    let mut grad_in = vec![0.0; in_shape.len()];
    let scale = 1.0 / (k * k) as f64;
    for c in 0..in_shape.c {
        for oy in 0..out.h {
            for ox in 0..out.w {
                let g = grad_out[(c * out.h + oy) * out.w + ox] * scale;
                if g == 0.0 {
                    continue;
                }
                for dy in 0..k {
                    let row = (c * in_shape.h + oy * k + dy) * in_shape.w + ox * k;
                    grad_in[row..row + k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    grad_in
}

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub input: MapShape,
    pub output: MapShape,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(input: MapShape, out_c: usize, k: usize, pad: usize, stride: usize) -> Self {
        Self {
            input,
            output: input.convolved(out_c, k, pad, stride),
            k,
            pad,
            stride,
        }
    }

    /// Output coordinate fed by input coordinate `i` through kernel tap `d`.
    #[inline]
    fn out_coord(&self, i: usize, d: usize, limit: usize) -> Option<usize> {
        let num = (i + self.pad).checked_sub(d)?;
        if num % self.stride != 0 {
            return None;
        }
        let o = num / self.stride;
        (o < limit).then_some(o)
    }

    #[inline]
    fn w_index(&self, o: usize, c: usize, dy: usize, dx: usize) -> usize {
        ((o * self.input.c + c) * self.k + dy) * self.k + dx
    }
}

/// Cross-correlation with zero padding. Weight layout `[out, in, k, k]`.
pub fn conv2d(input: &[f64], geom: &ConvGeom, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ish, osh) = (geom.input, geom.output);
    let plane = osh.h * osh.w;
    let mut out = vec![0.0; osh.len()];
    for (o, b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = *b);
    }
    for c in 0..ish.c {
        for iy in 0..ish.h {
            for ix in 0..ish.w {
                let v = input[(c * ish.h + iy) * ish.w + ix];
                if v == 0.0 {
                    continue;
                }
                for dy in 0..geom.k {
                    let Some(oy) = geom.out_coord(iy, dy, osh.h) else { continue };
                    for dx in 0..geom.k {
                        let Some(ox) = geom.out_coord(ix, dx, osh.w) else { continue };
                        let base = oy * osh.w + ox;
                        for o in 0..osh.c {
                            out[o * plane + base] += v * weight[geom.w_index(o, c, dy, dx)];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    geom: &ConvGeom,
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (ish, osh) = (geom.input, geom.output);
    let plane = osh.h * osh.w;
    for (o, gb) in grad_b.iter_mut().enumerate() {
        *gb += grad_out[o * plane..(o + 1) * plane].iter().sum::<f64>();
    }
    let mut grad_in = want_input.then(|| vec![0.0; ish.len()]);
    for c in 0..ish.c {
        for iy in 0..ish.h {
            for ix in 0..ish.w {
                let idx = (c * ish.h + iy) * ish.w + ix;
                let v = input[idx];
                if v == 0.0 && grad_in.is_none() {
                    continue;
                }
                let mut gi = 0.0;
                for dy in 0..geom.k {
                    let Some(oy) = geom.out_coord(iy, dy, osh.h) else { continue };
                    for dx in 0..geom.k {
                        let Some(ox) = geom.out_coord(ix, dx, osh.w) else { continue };
                        let base = oy * osh.w + ox;
                        for o in 0..osh.c {
                            let g = grad_out[o * plane + base];
                            let wi = geom.w_index(o, c, dy, dx);
                            grad_w[wi] += g * v;
                            gi += g * weight[wi];
                        }
                    }
                }
                if let Some(gin) = grad_in.as_mut() {
                    gin[idx] = gi;
                }
            }
        }
    }
    grad_in
}

/// `out = W x + b` with `W` stored `[out, in]`.
pub fn linear(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    let active: Vec<(usize, f64)> = input
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (i, *v))
        .collect();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            b + active.iter().map(|&(i, v)| row[i] * v).sum::<f64>()
        })
        .collect()
}

pub fn linear_backward(
    grad_out: &[f64],
    input: &[f64],
    weight: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let n_in = input.len();
    for (gb, g) in grad_b.iter_mut().zip(grad_out) {
        *gb += g;
    }
    let active: Vec<usize> = (0..n_in).filter(|&i| input[i] != 0.0).collect();
    let mut grad_in = want_input.then(|| vec![0.0; n_in]);
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let gw = &mut grad_w[o * n_in..(o + 1) * n_in];
        for &i in &active {
            gw[i] += g * input[i];
        }
        if let Some(gin) = grad_in.as_mut() {
            let row = &weight[o * n_in..(o + 1) * n_in];
            for (gi, w) in gin.iter_mut().zip(row) {
                *gi += g * w;
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation used as the reference.
    #[allow(clippy::too_many_arguments)]
    fn conv_naive(input: &[f64], ish: MapShape, w: &[f64], b: &[f64], oc: usize, k: usize, pad: usize, s: usize) -> Vec<f64> {
        let oh = (ish.h + 2 * pad - k) / s + 1;
        let ow = (ish.w + 2 * pad - k) / s + 1;
        let mut out = vec![0.0; oc * oh * ow];
        for o in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ish.c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * s + dy) as isize - pad as isize;
                                let ix = (x * s + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= ish.h as isize || ix >= ish.w as isize {
                                    continue;
                                }
                                acc += w[((o * ish.c + c) * k + dy) * k + dx]
                                    * input[(c * ish.h + iy as usize) * ish.w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = acc;
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn pool_of_ones() {
        let shape = MapShape::new(1, 2, 2);
        assert_eq!(avg_pool(&[1.0; 4], shape, 2), vec![1.0]);
        // odd remainder dropped: 5x5 -> 2x2
        let shape = MapShape::new(1, 5, 5);
        assert_eq!(avg_pool(&[1.0; 25], shape, 2).len(), 4);
    }

    #[test]
    fn delta_kernel_sums_channels() {
        let ish = MapShape::new(2, 4, 4);
        let input: Vec<f64> = (0..32).map(|v| v as f64).collect();
        let mut w = vec![0.0; 2 * 9];
        w[4] = 1.0; // centre tap, channel 0
        w[9 + 4] = 1.0; // centre tap, channel 1
        let geom = ConvGeom::new(ish, 1, 3, 1, 1);
        let out = conv2d(&input, &geom, &w, &[0.0]);
        let expect: Vec<f64> = (0..16).map(|i| input[i] + input[16 + i]).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(c, oc, h, k, pad, s) in &[(2, 3, 6, 3, 1, 1), (3, 2, 7, 3, 0, 2), (1, 4, 6, 2, 1, 2)] {
            let ish = MapShape::new(c, h, h);
            let input: Vec<f64> = (0..ish.len())
                .map(|_| if rng.gen_bool(0.4) { rng.gen_range(-1.0..1.0) } else { 0.0 })
                .collect();
            let w = random(&mut rng, oc * c * k * k);
            let b = random(&mut rng, oc);
            let geom = ConvGeom::new(ish, oc, k, pad, s);
            let fast = conv2d(&input, &geom, &w, &b);
            let slow = conv_naive(&input, ish, &w, &b, oc, k, pad, s);
            assert_eq!(fast.len(), slow.len());
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ish = MapShape::new(2, 5, 5);
        let geom = ConvGeom::new(ish, 3, 3, 1, 2);
        let input = random(&mut rng, ish.len());
        let w = random(&mut rng, 3 * 2 * 9);
        let b = random(&mut rng, 3);
        let g = random(&mut rng, geom.output.len());
        let objective = |inp: &[f64], w: &[f64]| -> f64 {
            conv2d(inp, &geom, w, &b).iter().zip(&g).map(|(o, g)| o * g).sum()
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gin = conv2d_backward(&g, &input, &geom, &w, &mut gw, &mut gb, true).unwrap();
        let h = 1e-6;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (objective(&input, &wp) - objective(&input, &wm)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6);
        }
        for i in 0..input.len() {
            let (mut ip, mut im) = (input.clone(), input.clone());
            ip[i] += h;
            im[i] -= h;
            let fd = (objective(&ip, &w) - objective(&im, &w)) / (2.0 * h);
            assert!((fd - gin[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_and_pool_backward_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 6);
        let w = random(&mut rng, 12);
        let g = random(&mut rng, 2);
        let mut gw = vec![0.0; 12];
        let mut gb = vec![0.0; 2];
        let gin = linear_backward(&g, &x, &w, &mut gw, &mut gb, true).unwrap();
        for i in 0..6 {
            let expect: f64 = (0..2).map(|o| w[o * 6 + i] * g[o]).sum();
            assert!((gin[i] - expect).abs() < 1e-14);
        }
        assert_eq!(gb, g);

        let shape = MapShape::new(1, 4, 4);
        let pin = random(&mut rng, 16);
        let pg = random(&mut rng, 4);
        let lhs: f64 = avg_pool(&pin, shape, 2).iter().zip(&pg).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool_backward(&pg, shape, 2).iter().zip(&pin).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
