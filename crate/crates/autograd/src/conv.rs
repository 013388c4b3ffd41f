//! Grouped 1-D convolution kernels over `[L × C]` sequences.

use ndarray::Array2;

use crate::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_len: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        let padded = self.in_len + 2 * self.padding;
        assert!(
            padded >= self.kernel,
            "conv1d: padded length {padded} shorter than kernel {}",
            self.kernel
        );
        (padded - self.kernel) / self.stride + 1
    }

    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    /// Input frame read by output frame `t` at tap `k`, if inside the sequence.
    #[inline]
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.in_len).then_some(pos as usize)
    }
}

/// `x`: `[L × C_in]`, `w`: `[C_out × (C_in/groups · K)]` with tap index fastest.
pub(crate) fn conv1d_forward(x: &Mat, w: &Mat, geom: &ConvGeom) -> Mat {
    let out_len = geom.out_len();
    let (cin_g, cout_g, k_len) = (geom.in_per_group(), geom.out_per_group(), geom.kernel);
    // Channel-major copies keep the innermost loop contiguous.
    let xt = x.t().as_standard_layout().into_owned();
    let xs = xt.as_slice().expect("standard layout");
    let w = w.as_standard_layout();
    let ws = w.as_slice().expect("standard layout");
    let mut yt = vec![0.0; geom.out_ch * out_len];
    for co in 0..geom.out_ch {
        let g = co / cout_g;
        let yrow = &mut yt[co * out_len..(co + 1) * out_len];
        for ci_l in 0..cin_g {
            let ci = g * cin_g + ci_l;
            let xrow = &xs[ci * geom.in_len..(ci + 1) * geom.in_len];
            for k in 0..k_len {
                let wv = ws[co * cin_g * k_len + ci_l * k_len + k];
                if wv == 0.0 {
                    continue;
                }
                for (t, y) in yrow.iter_mut().enumerate() {
                    if let Some(src) = geom.source(t, k) {
                        *y += wv * xrow[src];
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((geom.out_ch, out_len), yt)
        .expect("shape")
        .reversed_axes()
        .as_standard_layout()
        .into_owned()
}

/// Returns `(dx, dw)` for upstream gradient `dy`: `[L_out × C_out]`.
pub(crate) fn conv1d_backward(x: &Mat, w: &Mat, dy: &Mat, geom: &ConvGeom) -> (Mat, Mat) {
    let out_len = geom.out_len();
    let (cin_g, cout_g, k_len) = (geom.in_per_group(), geom.out_per_group(), geom.kernel);
    let xt = x.t().as_standard_layout().into_owned();
    let xs = xt.as_slice().expect("standard layout");
    let dyt = dy.t().as_standard_layout().into_owned();
    let dys = dyt.as_slice().expect("standard layout");
    let w = w.as_standard_layout();
    let ws = w.as_slice().expect("standard layout");
    let mut dxt = vec![0.0; geom.in_ch * geom.in_len];
    let mut dw = vec![0.0; geom.out_ch * cin_g * k_len];
    for co in 0..geom.out_ch {
        let g = co / cout_g;
        let dyrow = &dys[co * out_len..(co + 1) * out_len];
        for ci_l in 0..cin_g {
            let ci = g * cin_g + ci_l;
            let xrow = &xs[ci * geom.in_len..(ci + 1) * geom.in_len];
            let dxrow = &mut dxt[ci * geom.in_len..(ci + 1) * geom.in_len];
            for k in 0..k_len {
                let widx = co * cin_g * k_len + ci_l * k_len + k;
                let wv = ws[widx];
                let mut acc = 0.0;
                for (t, &d) in dyrow.iter().enumerate() {
                    if let Some(src) = geom.source(t, k) {
                        acc += d * xrow[src];
                        dxrow[src] += wv * d;
                    }
                }
                dw[widx] += acc;
            }
        }
    }
    let dx = Array2::from_shape_vec((geom.in_ch, geom.in_len), dxt)
        .expect("shape")
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    let dw = Array2::from_shape_vec((geom.out_ch, cin_g * k_len), dw).expect("shape");
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn naive(x: &Mat, w: &Mat, geom: &ConvGeom) -> Mat {
        let out_len = geom.out_len();
        let (cin_g, cout_g) = (geom.in_per_group(), geom.out_per_group());
        Array2::from_shape_fn((out_len, geom.out_ch), |(t, co)| {
            let g = co / cout_g;
            let mut acc = 0.0;
            for ci_l in 0..cin_g {
                for k in 0..geom.kernel {
                    let pos = (t * geom.stride + k) as isize - geom.padding as isize;
                    if pos >= 0 && (pos as usize) < geom.in_len {
                        acc += w[[co, ci_l * geom.kernel + k]] * x[[pos as usize, g * cin_g + ci_l]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_naive_grouped_strided() {
        let x = Array2::from_shape_fn((7, 4), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.7).sin());
        let geom = ConvGeom {
            in_len: 7,
            in_ch: 4,
            out_ch: 6,
            kernel: 3,
            stride: 2,
            padding: 1,
            groups: 2,
        };
        let w = Array2::from_shape_fn((6, 2 * 3), |(i, j)| ((i * 7 + j) as f64 * 0.11).cos());
        let fast = conv1d_forward(&x, &w, &geom);
        let slow = naive(&x, &w, &geom);
        assert_eq!(fast.dim(), (4, 6));
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let geom = ConvGeom {
            in_len: 3,
            in_ch: 2,
            out_ch: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
            groups: 2,
        };
        // Depthwise: only the centre tap set.
        let w = array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(conv1d_forward(&x, &w, &geom), x);
    }
}
