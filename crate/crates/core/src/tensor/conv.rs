//! Direct-loop channels-last convolution over three spatial axes.
//!
//! 2-D convolutions run through the same kernels with a depth of one.

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Cubic kernel with the same stride and padding on every axis.
    pub fn cube(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [k; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    /// Square 2-D kernel applied to inputs with a unit depth axis.
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, k, k],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(Error::shape(
                    "conv",
                    format!("input extent {} too small for kernel {}", input[a], self.kernel[a]),
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

struct Dims {
    n: usize,
    inp: [usize; 3],
    out: [usize; 3],
    ci: usize,
    co: usize,
}

fn dims(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Result<Dims> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 5 || ws.len() != 5 || xs[4] != ws[3] || ws[..3] != geom.kernel {
        return Err(Error::shape("conv", format!("input {xs:?}, weight {ws:?}, kernel {:?}", geom.kernel)));
    }
    let inp = [xs[1], xs[2], xs[3]];
    Ok(Dims {
        n: xs[0],
        inp,
        out: geom.output_dims(inp)?,
        ci: xs[4],
        co: ws[4],
    })
}

/// Visits every (output position, kernel tap) pair that lands inside the
/// input, passing flat offsets `(out_base, in_base, w_base)`.
fn for_each_tap(d: &Dims, geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let [id, ih, iw] = d.inp;
    let [od, oh, ow] = d.out;
    for n in 0..d.n {
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let out_base = (((n * od + z) * oh + y) * ow + x) * d.co;
                    for a in 0..kd {
                        let iz = (z * sd + a) as isize - pd as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for b in 0..kh {
                            let iy = (y * sh + b) as isize - ph as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for c in 0..kw {
                                let ix = (x * sw + c) as isize - pw as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                let in_base =
                                    (((n * id + iz as usize) * ih + iy as usize) * iw + ix as usize) * d.ci;
                                let w_base = ((a * kh + b) * kw + c) * d.ci * d.co;
                                f(out_base, in_base, w_base);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    let d = dims(x, w, geom)?;
    let mut out = vec![0.0; d.n * d.out.iter().product::<usize>() * d.co];
    let (xd, wd) = (x.data(), w.data());
    let (ci, co) = (d.ci, d.co);
    for_each_tap(&d, geom, |ob, ib, wb| {
        let o = &mut out[ob..ob + co];
        for (c, &xv) in xd[ib..ib + ci].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &wd[wb + c * co..wb + (c + 1) * co];
            for (ov, &wv) in o.iter_mut().zip(wr) {
                *ov += xv * wv;
            }
        }
    });
    Ok(Tensor::from_parts(vec![d.n, d.out[0], d.out[1], d.out[2], d.co], out))
}

pub(crate) fn backward(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeom,
    g: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let d = dims(x, w, geom).expect("validated in forward");
    let (xd, wd) = (x.data(), w.data());
    let (ci, co) = (d.ci, d.co);
    let mut gx = need_x.then(|| vec![0.0; xd.len()]);
    let mut gw = need_w.then(|| vec![0.0; wd.len()]);
    for_each_tap(&d, geom, |ob, ib, wb| {
        let go = &g[ob..ob + co];
        if go.iter().all(|&v| v == 0.0) {
            return;
        }
        if let Some(gx) = gx.as_mut() {
            for (c, gxv) in gx[ib..ib + ci].iter_mut().enumerate() {
                let wr = &wd[wb + c * co..wb + (c + 1) * co];
                *gxv += wr.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            for (c, &xv) in xd[ib..ib + ci].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let gr = &mut gw[wb + c * co..wb + (c + 1) * co];
                for (a, &b) in gr.iter_mut().zip(go) {
                    *a += xv * b;
                }
            }
        }
    });
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims_follow_stride_and_padding() {
        let g = ConvGeom::cube(3, 2, 1);
        assert_eq!(g.output_dims([16, 16, 16]).unwrap(), [8, 8, 8]);
        assert_eq!(ConvGeom::square(3, 2, 1).output_dims([1, 64, 64]).unwrap(), [1, 32, 32]);
        assert!(ConvGeom::cube(5, 1, 0).output_dims([3, 8, 8]).is_err());
    }

    #[test]
    fn one_by_one_kernel_is_a_channel_matmul() {
        // 1x1x1 kernel mixing 2 input channels into 1 output channel
        let x = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 2, 1], vec![10.0, 100.0]).unwrap();
        let y = forward(&x, &w, &ConvGeom::cube(1, 1, 0)).unwrap();
        assert_eq!(y.data(), &[210.0, 430.0]);
    }

    #[test]
    fn padded_box_filter_counts_neighbors() {
        let x = Tensor::new(vec![1, 1, 3, 3, 1], vec![1.0; 9]).unwrap();
        let w = Tensor::new(vec![1, 3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let y = forward(&x, &w, &ConvGeom::square(3, 1, 1)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
