//! Convolution kernels: im2col + gemm forward, with explicit backward passes
//! for input, weight and bias. Column buffers are rebuilt during backward
//! instead of being cached on the tape, trading a little compute for memory.

use matrixmultiply::dgemm;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, ih: usize, iw: usize) -> (usize, usize) {
        let oh = (ih + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (iw + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn cols(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Lower one image (C,H,W) into a (oh*ow) x (in_ch*k*k) matrix.
fn im2col(g: &ConvGeom, x: &[f64], ih: usize, iw: usize, col: &mut [f64]) {
    let (oh, ow) = g.out_hw(ih, iw);
    let k = g.kernel;
    let cols = g.cols();
    debug_assert_eq!(col.len(), oh * ow * cols);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * cols;
            for ic in 0..g.in_ch {
                let plane = ic * ih * iw;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let base = row + (ic * k + ky) * k;
                    if iy < 0 || iy >= ih as isize {
                        col[base..base + k].fill(0.0);
                        continue;
                    }
                    let src_row = plane + iy as usize * iw;
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        col[base + kx] = if ix < 0 || ix >= iw as isize {
                            0.0
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto an image (transpose of im2col).
fn col2im_add(g: &ConvGeom, col: &[f64], ih: usize, iw: usize, x: &mut [f64]) {
    let (oh, ow) = g.out_hw(ih, iw);
    let k = g.kernel;
    let cols = g.cols();
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * cols;
            for ic in 0..g.in_ch {
                let plane = ic * ih * iw;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let dst_row = plane + iy as usize * iw;
                    let base = row + (ic * k + ky) * k;
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < iw as isize {
                            x[dst_row + ix as usize] += col[base + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `x` is (N,C,H,W) flat, `w` is
/// (out_ch, in_ch*k*k) flat, `b` is out_ch. Returns (N,out_ch,oh,ow) flat.
pub fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    ih: usize,
    iw: usize,
) -> Vec<f64> {
    let (oh, ow) = g.out_hw(ih, iw);
    let p = oh * ow;
    let cols = g.cols();
    let mut out = vec![0.0; n * g.out_ch * p];
    let mut col = vec![0.0; p * cols];
    let in_stride = g.in_ch * ih * iw;
    let out_stride = g.out_ch * p;
    for i in 0..n {
        im2col(g, &x[i * in_stride..(i + 1) * in_stride], ih, iw, &mut col);
        // out (oc x p) = w (oc x cols) . col^T (cols x p)
        unsafe {
            dgemm(
                g.out_ch,
                cols,
                p,
                1.0,
                w.as_ptr(),
                cols as isize,
                1,
                col.as_ptr(),
                1,
                cols as isize,
                0.0,
                out[i * out_stride..].as_mut_ptr(),
                p as isize,
                1,
            );
        }
        for oc in 0..g.out_ch {
            let bias = b[oc];
            let base = i * out_stride + oc * p;
            for v in &mut out[base..base + p] {
                *v += bias;
            }
        }
    }
    out
}

/// Gradients of `conv2d_forward` with respect to input, weight and bias.
/// `need_input`/`need_params` skip the corresponding work when false (the
/// returned buffers are then zero-filled and must not be used).
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    n: usize,
    ih: usize,
    iw: usize,
    need_input: bool,
    need_params: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.out_hw(ih, iw);
    let p = oh * ow;
    let cols = g.cols();
    let in_stride = g.in_ch * ih * iw;
    let out_stride = g.out_ch * p;
    let mut gx = vec![0.0; n * in_stride];
    let mut gw = vec![0.0; g.out_ch * cols];
    let mut gb = vec![0.0; g.out_ch];
    let mut col = vec![0.0; p * cols];
    let mut gcol = vec![0.0; p * cols];
    for i in 0..n {
        let go = &grad_out[i * out_stride..(i + 1) * out_stride];
        if need_params {
            for oc in 0..g.out_ch {
                gb[oc] += go[oc * p..(oc + 1) * p].iter().sum::<f64>();
            }
            im2col(g, &x[i * in_stride..(i + 1) * in_stride], ih, iw, &mut col);
            // gw (oc x cols) += go (oc x p) . col (p x cols)
            unsafe {
                dgemm(
                    g.out_ch,
                    p,
                    cols,
                    1.0,
                    go.as_ptr(),
                    p as isize,
                    1,
                    col.as_ptr(),
                    cols as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
        }
        if need_input {
            // gcol (p x cols) = go^T (p x oc) . w (oc x cols)
            unsafe {
                dgemm(
                    p,
                    g.out_ch,
                    cols,
                    1.0,
                    go.as_ptr(),
                    1,
                    p as isize,
                    w.as_ptr(),
                    cols as isize,
                    1,
                    0.0,
                    gcol.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            col2im_add(g, &gcol, ih, iw, &mut gx[i * in_stride..(i + 1) * in_stride]);
        }
    }
    (gx, gw, gb)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTransposeGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTransposeGeom {
    pub fn out_hw(&self, ih: usize, iw: usize) -> (usize, usize) {
        let oh = (ih - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad;
        let ow = (iw - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad;
        (oh, ow)
    }

    fn cols(&self) -> usize {
        self.out_ch * self.kernel * self.kernel
    }
}

/// Transposed convolution. `w` is (in_ch, out_ch*k*k) flat, matching the
/// (in, out, kh, kw) weight convention.
pub fn conv_transpose2d_forward(
    g: &ConvTransposeGeom,
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    ih: usize,
    iw: usize,
) -> Vec<f64> {
    let (oh, ow) = g.out_hw(ih, iw);
    let p_in = ih * iw;
    let cols = g.cols();
    let k = g.kernel;
    let in_stride = g.in_ch * p_in;
    let out_stride = g.out_ch * oh * ow;
    let mut out = vec![0.0; n * out_stride];
    let mut fullcol = vec![0.0; p_in * cols];
    for i in 0..n {
        let xi = &x[i * in_stride..(i + 1) * in_stride];
        // fullcol (p_in x cols) = x^T (p_in x ic) . w (ic x cols)
        unsafe {
            dgemm(
                p_in,
                g.in_ch,
                cols,
                1.0,
                xi.as_ptr(),
                1,
                p_in as isize,
                w.as_ptr(),
                cols as isize,
                1,
                0.0,
                fullcol.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
        let oi = &mut out[i * out_stride..(i + 1) * out_stride];
        for iy in 0..ih {
            for ix in 0..iw {
                let row = (iy * iw + ix) * cols;
                for oc in 0..g.out_ch {
                    let plane = oc * oh * ow;
                    for ky in 0..k {
                        let oy = (iy * g.stride + ky) as isize - g.pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let dst_row = plane + oy as usize * ow;
                        let base = row + (oc * k + ky) * k;
                        for kx in 0..k {
                            let ox = (ix * g.stride + kx) as isize - g.pad as isize;
                            if ox >= 0 && ox < ow as isize {
                                oi[dst_row + ox as usize] += fullcol[base + kx];
                            }
                        }
                    }
                }
            }
        }
        for oc in 0..g.out_ch {
            let bias = b[oc];
            let base = oc * oh * ow;
            for v in &mut oi[base..base + oh * ow] {
                *v += bias;
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    g: &ConvTransposeGeom,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    n: usize,
    ih: usize,
    iw: usize,
    need_input: bool,
    need_params: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.out_hw(ih, iw);
    let p_in = ih * iw;
    let cols = g.cols();
    let k = g.kernel;
    let in_stride = g.in_ch * p_in;
    let out_stride = g.out_ch * oh * ow;
    let mut gx = vec![0.0; n * in_stride];
    let mut gw = vec![0.0; g.in_ch * cols];
    let mut gb = vec![0.0; g.out_ch];
    let mut gcol = vec![0.0; p_in * cols];
    for i in 0..n {
        let go = &grad_out[i * out_stride..(i + 1) * out_stride];
        if need_params {
            for oc in 0..g.out_ch {
                gb[oc] += go[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
            }
        }
        // gather grad_out into column layout (inverse of the forward scatter)
        for iy in 0..ih {
            for ix in 0..iw {
                let row = (iy * iw + ix) * cols;
                for oc in 0..g.out_ch {
                    let plane = oc * oh * ow;
                    for ky in 0..k {
                        let oy = (iy * g.stride + ky) as isize - g.pad as isize;
                        let base = row + (oc * k + ky) * k;
                        if oy < 0 || oy >= oh as isize {
                            gcol[base..base + k].fill(0.0);
                            continue;
                        }
                        let src_row = plane + oy as usize * ow;
                        for kx in 0..k {
                            let ox = (ix * g.stride + kx) as isize - g.pad as isize;
                            gcol[base + kx] = if ox < 0 || ox >= ow as isize {
                                0.0
                            } else {
                                go[src_row + ox as usize]
                            };
                        }
                    }
                }
            }
        }
        let xi = &x[i * in_stride..(i + 1) * in_stride];
        if need_input {
            unsafe {
                // gx^T (p_in x ic) = gcol (p_in x cols) . w^T (cols x ic)
                dgemm(
                    p_in,
                    cols,
                    g.in_ch,
                    1.0,
                    gcol.as_ptr(),
                    cols as isize,
                    1,
                    w.as_ptr(),
                    1,
                    cols as isize,
                    0.0,
                    gx[i * in_stride..].as_mut_ptr(),
                    1,
                    p_in as isize,
                );
            }
        }
        if need_params {
            unsafe {
                // gw (ic x cols) += x (ic x p_in) . gcol (p_in x cols)
                dgemm(
                    g.in_ch,
                    p_in,
                    cols,
                    1.0,
                    xi.as_ptr(),
                    p_in as isize,
                    1,
                    gcol.as_ptr(),
                    cols as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
        }
    }
    (gx, gw, gb)
}
