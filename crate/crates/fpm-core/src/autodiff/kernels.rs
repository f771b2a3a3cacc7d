//! Plain array kernels shared by the tape ops and their backward rules.
//! Everything here is deterministic: fixed loop order, no threading.
//! The conv and shuffle kernels work on contiguous slices because the
//! dynamic-dim indexing of ArrayD is too slow for their inner loops.

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;

/// Crops an (h, w) window starting at `corner` from a centered 2-D
/// spectrum. `corner` must come from [`crate::optics::window_corner`],
/// i.e. already bounds-checked.
pub fn crop_window_2d(
    spec: &ArrayD<Complex64>,
    corner: (usize, usize),
    lo: (usize, usize),
    scale: f64,
) -> ArrayD<Complex64> {
    let (r0, c0) = corner;
    let mut out = ArrayD::from_elem(IxDyn(&[lo.0, lo.1]), Complex64::new(0.0, 0.0));
    for r in 0..lo.0 {
        for c in 0..lo.1 {
            out[[r, c]] = spec[[r0 + r, c0 + c]] * scale;
        }
    }
    out
}

/// Adds `win * scale` into the (h, w) window of `spec` at `corner`.
/// Adjoint of [`crop_window_2d`].
pub fn embed_window_2d(
    spec: &mut ArrayD<Complex64>,
    win: &ArrayD<Complex64>,
    corner: (usize, usize),
    scale: f64,
) {
    let shape = win.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (r0, c0) = corner;
    for r in 0..h {
        for c in 0..w {
            spec[[r0 + r, c0 + c]] += win[[r, c]] * scale;
        }
    }
}

fn as_slice(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("kernel arrays are standard layout")
}

/// Cross-correlation with zero padding, stride 1, odd kernel:
/// `src` is (C_in, H, W), `kernel` is (C_out, C_in, k_h, k_w), `bias`
/// (C_out); output (C_out, H, W).
pub fn conv2d_forward(src: &ArrayD<f64>, kernel: &ArrayD<f64>, bias: &ArrayD<f64>) -> ArrayD<f64> {
    let (cin, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oy, ox) = (kh / 2, kw / 2);
    let s = as_slice(src);
    let k = as_slice(kernel);
    let b = as_slice(bias);
    let mut out = vec![0.0f64; cout * h * w];
    for o in 0..cout {
        out[o * h * w..(o + 1) * h * w].fill(b[o]);
        for i in 0..cin {
            for dy in 0..kh {
                for dx in 0..kw {
                    let kv = k[((o * cin + i) * kh + dy) * kw + dx];
                    let ylo = oy.saturating_sub(dy);
                    let yhi = (h + oy).saturating_sub(dy).min(h);
                    let xlo = ox.saturating_sub(dx);
                    let xhi = (w + ox).saturating_sub(dx).min(w);
                    for y in ylo..yhi {
                        let src_row = (i * h + y + dy - oy) * w + dx;
                        let out_row = (o * h + y) * w;
                        for x in xlo..xhi {
                            out[out_row + x] += kv * s[src_row + x - ox];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[cout, h, w]), out).expect("conv shape")
}

/// Gradients of [`conv2d_forward`] with respect to src, kernel, and bias.
pub fn conv2d_backward(
    src: &ArrayD<f64>,
    kernel: &ArrayD<f64>,
    g_out: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let (cin, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (oy, ox) = (kh / 2, kw / 2);
    let s = as_slice(src);
    let k = as_slice(kernel);
    let g = as_slice(g_out);
    let mut g_src = vec![0.0f64; cin * h * w];
    let mut g_k = vec![0.0f64; cout * cin * kh * kw];
    let mut g_b = vec![0.0f64; cout];
    for o in 0..cout {
        g_b[o] = g[o * h * w..(o + 1) * h * w].iter().sum();
        for i in 0..cin {
            for dy in 0..kh {
                for dx in 0..kw {
                    let kv = k[((o * cin + i) * kh + dy) * kw + dx];
                    let mut gk = 0.0;
                    let ylo = oy.saturating_sub(dy);
                    let yhi = (h + oy).saturating_sub(dy).min(h);
                    let xlo = ox.saturating_sub(dx);
                    let xhi = (w + ox).saturating_sub(dx).min(w);
                    for y in ylo..yhi {
                        let src_row = (i * h + y + dy - oy) * w + dx;
                        let out_row = (o * h + y) * w;
                        for x in xlo..xhi {
                            let gv = g[out_row + x];
                            gk += gv * s[src_row + x - ox];
                            g_src[src_row + x - ox] += gv * kv;
                        }
                    }
                    g_k[((o * cin + i) * kh + dy) * kw + dx] = gk;
                }
            }
        }
    }
    (
        ArrayD::from_shape_vec(src.raw_dim(), g_src).expect("src shape"),
        ArrayD::from_shape_vec(kernel.raw_dim(), g_k).expect("kernel shape"),
        ArrayD::from_shape_vec(IxDyn(&[cout]), g_b).expect("bias shape"),
    )
}

/// Rearranges (C*r^2, H, W) into (C, H*r, W*r); channel c*r^2 + dy*r + dx
/// supplies the (dy, dx) sub-pixel of output channel c.
pub fn pixel_shuffle_forward(src: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let (c_in, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let c_out = c_in / (r * r);
    let s = as_slice(src);
    let mut out = vec![0.0f64; c_in * h * w];
    for c in 0..c_out {
        for dy in 0..r {
            for dx in 0..r {
                let ch = c * r * r + dy * r + dx;
                for y in 0..h {
                    let src_row = (ch * h + y) * w;
                    let out_row = (c * h * r + y * r + dy) * w * r + dx;
                    for x in 0..w {
                        out[out_row + x * r] = s[src_row + x];
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[c_out, h * r, w * r]), out).expect("shuffle shape")
}

/// Adjoint (exact inverse permutation) of [`pixel_shuffle_forward`].
pub fn pixel_shuffle_backward(g_out: &ArrayD<f64>, r: usize, src_shape: &[usize]) -> ArrayD<f64> {
    let (c_in, h, w) = (src_shape[0], src_shape[1], src_shape[2]);
    let c_out = c_in / (r * r);
    let g = as_slice(g_out);
    let mut g_src = vec![0.0f64; c_in * h * w];
    for c in 0..c_out {
        for dy in 0..r {
            for dx in 0..r {
                let ch = c * r * r + dy * r + dx;
                for y in 0..h {
                    let src_row = (ch * h + y) * w;
                    let out_row = (c * h * r + y * r + dy) * w * r + dx;
                    for x in 0..w {
                        g_src[src_row + x] = g[out_row + x * r];
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(src_shape), g_src).expect("shuffle shape")
}
