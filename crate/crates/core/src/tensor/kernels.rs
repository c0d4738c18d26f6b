//! Dense f64 kernels shared by the forward and backward passes.
//!
//! All buffers are row-major. Parallel variants split work by output row and
//! keep the per-element accumulation order fixed.

use crate::par::{for_each_row, Exec};

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, exec: Exec) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_row(&mut out, n, exec, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[m×n] · b[k×n]ᵀ` → `m×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, exec: Exec) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for_each_row(&mut out, k, exec, |i, row| {
        let a_row = &a[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `a[m×k]ᵀ · g[m×n]` → `k×n`.
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, exec: Exec) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for_each_row(&mut out, n, exec, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    });
    out
}

/// Geometry of a stride-1, zero-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.out_h() * self.out_w()
    }

    fn work(&self) -> usize {
        self.batch * self.out_len() * self.in_ch * self.kh * self.kw
    }

    /// Input pixel feeding output `(oy, ox)` through kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy + ky).checked_sub(self.pad)?;
        let x = (ox + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

pub fn conv2d(x: &[f64], w: &[f64], bias: &[f64], geom: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut out = vec![0.0; geom.batch * geom.out_len()];
    for_each_row(&mut out, geom.out_len(), Exec::auto(geom.work()), |b, sample| {
        let xs = &x[b * geom.in_len()..(b + 1) * geom.in_len()];
        for o in 0..geom.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..geom.in_ch {
                        for ky in 0..geom.kh {
                            for kx in 0..geom.kw {
                                if let Some((y, xx)) = geom.source(oy, ox, ky, kx) {
                                    let wv = w[((o * geom.in_ch + c) * geom.kh + ky) * geom.kw + kx];
                                    acc += wv * xs[(c * geom.height + y) * geom.width + xx];
                                }
                            }
                        }
                    }
                    sample[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
    });
    out
}

/// Gradient of a convolution w.r.t. its input.
pub fn conv2d_grad_input(g: &[f64], w: &[f64], geom: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut out = vec![0.0; geom.batch * geom.in_len()];
    for_each_row(&mut out, geom.in_len(), Exec::auto(geom.work()), |b, gx| {
        let gs = &g[b * geom.out_len()..(b + 1) * geom.out_len()];
        for o in 0..geom.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gs[(o * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..geom.in_ch {
                        for ky in 0..geom.kh {
                            for kx in 0..geom.kw {
                                if let Some((y, xx)) = geom.source(oy, ox, ky, kx) {
                                    let wv = w[((o * geom.in_ch + c) * geom.kh + ky) * geom.kw + kx];
                                    gx[(c * geom.height + y) * geom.width + xx] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of a convolution w.r.t. its weights and bias.
pub fn conv2d_grad_params(g: &[f64], x: &[f64], geom: ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let per_out = geom.in_ch * geom.kh * geom.kw;
    let mut gw = vec![0.0; geom.out_ch * per_out];
    for_each_row(&mut gw, per_out, Exec::auto(geom.work()), |o, gwo| {
        for b in 0..geom.batch {
            let xs = &x[b * geom.in_len()..(b + 1) * geom.in_len()];
            let gs = &g[b * geom.out_len()..(b + 1) * geom.out_len()];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = gs[(o * oh + oy) * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..geom.in_ch {
                        for ky in 0..geom.kh {
                            for kx in 0..geom.kw {
                                if let Some((y, xx)) = geom.source(oy, ox, ky, kx) {
                                    gwo[(c * geom.kh + ky) * geom.kw + kx] +=
                                        gv * xs[(c * geom.height + y) * geom.width + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    let mut gb = vec![0.0; geom.out_ch];
    for b in 0..geom.batch {
        let gs = &g[b * geom.out_len()..(b + 1) * geom.out_len()];
        for (o, acc) in gb.iter_mut().enumerate() {
            *acc += gs[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    (gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive_loops() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = matmul(&a, &b, m, k, n, Exec::Sequential);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-14);
            }
        }
        // bᵀ laid out as n×k
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let c2 = matmul_nt(&a, &bt, m, k, n, Exec::Sequential);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-14);
        }
        let par = matmul(&a, &b, m, k, n, Exec::available());
        assert_eq!(c, par);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let geom = ConvGeom {
            batch: 1,
            in_ch: 1,
            height: 3,
            width: 3,
            out_ch: 1,
            kh: 3,
            kw: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d(&x, &w, &[0.0], geom), x);
    }
}
