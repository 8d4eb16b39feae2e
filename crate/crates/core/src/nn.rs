//! Dense kernels with hand-written backward passes.
//!
//! Layouts are row-major throughout: conv weights `(out, in, 3, 3)`,
//! activations `(channels, height, width)`, linear weights `(out, in)`.

use crate::scalar::Scalar;

/// `c (m x n) += a (m x k) * b (k x n)`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c (m x n) += a (m x k) * b^T` where `b` is `(n x k)`.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c (m x n) += a^T * b` where `a` is `(k x m)` and `b` is `(k x n)`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `y = W x + b` for a single vector.
pub fn linear<T: Scalar>(w: &[T], b: &[T], x: &[T], out: usize) -> Vec<T> {
    let inp = x.len();
    debug_assert_eq!(w.len(), out * inp);
    (0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            row.iter().zip(x).fold(b[o], |acc, (&wv, &xv)| acc + wv * xv)
        })
        .collect()
}

/// Accumulates gradients of `y = W x + b` and returns `dx`.
pub fn linear_backward<T: Scalar>(w: &[T], x: &[T], dy: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
    let inp = x.len();
    let mut dx = vec![T::zero(); inp];
    for (o, &g) in dy.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        db[o] = db[o] + g;
        let row = &w[o * inp..(o + 1) * inp];
        let drow = &mut dw[o * inp..(o + 1) * inp];
        for i in 0..inp {
            drow[i] = drow[i] + g * x[i];
            dx[i] = dx[i] + g * row[i];
        }
    }
    dx
}

pub fn conv_out_dim(input: usize) -> usize {
    // 3x3 kernel, stride 2, padding 1
    (input + 1) / 2
}

/// Output of a stride-2 3x3 convolution followed by ReLU.
pub struct ConvCache<T> {
    /// im2col matrix `(in_c * 9) x (out_h * out_w)`
    pub cols: Vec<T>,
    pub out_h: usize,
    pub out_w: usize,
}

fn im2col<T: Scalar>(input: &[T], in_c: usize, in_h: usize, in_w: usize) -> (Vec<T>, usize, usize) {
    let (out_h, out_w) = (conv_out_dim(in_h), conv_out_dim(in_w));
    let n = out_h * out_w;
    let mut cols = vec![T::zero(); in_c * 9 * n];
    for c in 0..in_c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * n;
                for oy in 0..out_h {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= in_w as isize {
                            continue;
                        }
                        cols[row + oy * out_w + ox] = input[(c * in_h + iy as usize) * in_w + ix as usize];
                    }
                }
            }
        }
    }
    (cols, out_h, out_w)
}

fn col2im<T: Scalar>(cols: &[T], in_c: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let n = out_h * out_w;
    let mut img = vec![T::zero(); in_c * in_h * in_w];
    for c in 0..in_c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * n;
                for oy in 0..out_h {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= in_w as isize {
                            continue;
                        }
                        let idx = (c * in_h + iy as usize) * in_w + ix as usize;
                        img[idx] = img[idx] + cols[row + oy * out_w + ox];
                    }
                }
            }
        }
    }
    img
}

/// Conv(3x3, stride 2, pad 1) + bias + ReLU. Returns the rectified output.
pub fn conv_relu_forward<T: Scalar>(
    input: &[T],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    weight: &[T],
    bias: &[T],
    out_c: usize,
) -> (Vec<T>, ConvCache<T>) {
    let (cols, out_h, out_w) = im2col(input, in_c, in_h, in_w);
    let n = out_h * out_w;
    let mut out = vec![T::zero(); out_c * n];
    for (o, chunk) in out.chunks_mut(n).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[o]);
    }
    matmul_acc(weight, &cols, &mut out, out_c, in_c * 9, n);
    out.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
    (out, ConvCache { cols, out_h, out_w })
}

/// Backward through ReLU and the convolution. `dout` is the gradient with
/// respect to the rectified output. Returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv_relu_backward<T: Scalar>(
    cache: &ConvCache<T>,
    output: &[T],
    dout: &[T],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let n = cache.out_h * cache.out_w;
    let out_c = dbias.len();
    let dpre: Vec<T> = dout
        .iter()
        .zip(output)
        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
        .collect();
    for o in 0..out_c {
        dbias[o] = dbias[o] + dpre[o * n..(o + 1) * n].iter().copied().sum::<T>();
    }
    matmul_bt_acc(&dpre, &cache.cols, dweight, out_c, n, in_c * 9);
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![T::zero(); in_c * 9 * n];
    matmul_at_acc(weight, &dpre, &mut dcols, in_c * 9, out_c, n);
    Some(col2im(&dcols, in_c, in_h, in_w, cache.out_h, cache.out_w))
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable log-softmax.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&v| v - lse).collect()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    log_softmax(logits).into_iter().map(T::exp).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cached activations of one LSTM step.
pub struct LstmStep<T> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
    /// input, forget, cell candidate, output gates after nonlinearity
    pub gates: Vec<T>,
    pub c: Vec<T>,
    pub tanh_c: Vec<T>,
    pub h: Vec<T>,
}

pub struct LstmWeights<'a, T> {
    pub w_ih: &'a [T],
    pub w_hh: &'a [T],
    pub bias: &'a [T],
    pub hidden: usize,
}

impl<T: Scalar> LstmWeights<'_, T> {
    pub fn step(&self, x: Vec<T>, h_prev: Vec<T>, c_prev: Vec<T>) -> LstmStep<T> {
        let hsz = self.hidden;
        let mut pre = linear(self.w_ih, self.bias, &x, 4 * hsz);
        let rec = {
            let zeros = vec![T::zero(); 4 * hsz];
            linear(self.w_hh, &zeros, &h_prev, 4 * hsz)
        };
        pre.iter_mut().zip(&rec).for_each(|(p, &r)| *p = *p + r);
        let mut gates = pre;
        for (k, g) in gates.iter_mut().enumerate() {
            *g = if (2 * hsz..3 * hsz).contains(&k) {
                g.tanh()
            } else {
                sigmoid(*g)
            };
        }
        let mut c = vec![T::zero(); hsz];
        let mut tanh_c = vec![T::zero(); hsz];
        let mut h = vec![T::zero(); hsz];
        for j in 0..hsz {
            let (i, f, g, o) = (gates[j], gates[hsz + j], gates[2 * hsz + j], gates[3 * hsz + j]);
            c[j] = f * c_prev[j] + i * g;
            tanh_c[j] = c[j].tanh();
            h[j] = o * tanh_c[j];
        }
        LstmStep {
            x,
            h_prev,
            c_prev,
            gates,
            c,
            tanh_c,
            h,
        }
    }
}

/// Gradients flowing out of one LSTM step.
pub struct LstmStepGrad<T> {
    pub dx: Vec<T>,
    pub dh_prev: Vec<T>,
    pub dc_prev: Vec<T>,
}

pub fn lstm_step_backward<T: Scalar>(
    w: &LstmWeights<'_, T>,
    step: &LstmStep<T>,
    dh: &[T],
    dc_next: &[T],
    dw_ih: &mut [T],
    dw_hh: &mut [T],
    dbias: &mut [T],
) -> LstmStepGrad<T> {
    let hsz = w.hidden;
    let mut dpre = vec![T::zero(); 4 * hsz];
    let mut dc_prev = vec![T::zero(); hsz];
    let one = T::one();
    for j in 0..hsz {
        let (i, f, g, o) = (
            step.gates[j],
            step.gates[hsz + j],
            step.gates[2 * hsz + j],
            step.gates[3 * hsz + j],
        );
        let tc = step.tanh_c[j];
        let dc = dc_next[j] + dh[j] * o * (one - tc * tc);
        let d_o = dh[j] * tc;
        let d_i = dc * g;
        let d_f = dc * step.c_prev[j];
        let d_g = dc * i;
        dc_prev[j] = dc * f;
        dpre[j] = d_i * i * (one - i);
        dpre[hsz + j] = d_f * f * (one - f);
        dpre[2 * hsz + j] = d_g * (one - g * g);
        dpre[3 * hsz + j] = d_o * o * (one - o);
    }
    let dx = linear_backward(w.w_ih, &step.x, &dpre, dw_ih, dbias);
    let mut scratch_bias = vec![T::zero(); 4 * hsz];
    let dh_prev = linear_backward(w.w_hh, &step.h_prev, &dpre, dw_hh, &mut scratch_bias);
    LstmStepGrad { dx, dh_prev, dc_prev }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| f64::from(v) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul_acc(&a, &b, &mut c, 2, 3, 4);
        // b^T is 4x3
        let bt: Vec<f64> = (0..4).flat_map(|j| (0..3).map(move |p| (p * 4 + j) as f64 * 0.5)).collect();
        let mut c2 = vec![0.0; 8];
        matmul_bt_acc(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        // a^T is 3x2
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64)).collect();
        let mut c3 = vec![0.0; 8];
        matmul_at_acc(&at, &b, &mut c3, 2, 3, 4);
        assert_eq!(c, c3);
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }

    #[test]
    fn conv_output_dims() {
        assert_eq!(conv_out_dim(64), 32);
        assert_eq!(conv_out_dim(7), 4);
        assert_eq!(conv_out_dim(1), 1);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let (in_c, h, w, out_c) = (2, 5, 4, 3);
        let input: Vec<f64> = (0..in_c * h * w).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let weight: Vec<f64> = (0..out_c * in_c * 9).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.05).collect();
        let bias = vec![0.0513, -0.0217, 0.0131];
        let loss = |inp: &[f64], wt: &[f64]| {
            let (y, _) = conv_relu_forward(inp, in_c, h, w, wt, &bias, out_c);
            y.iter().enumerate().map(|(i, v)| v * (i as f64 * 0.1 + 1.0)).sum::<f64>()
        };
        let (y, cache) = conv_relu_forward(&input, in_c, h, w, &weight, &bias, out_c);
        let dout: Vec<f64> = (0..y.len()).map(|i| i as f64 * 0.1 + 1.0).collect();
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; 3];
        let dx = conv_relu_backward(&cache, &y, &dout, in_c, h, w, &weight, &mut dw, &mut db, true).unwrap();
        let eps = 1e-6;
        for i in [0, 7, 20, 33] {
            let mut p = weight.clone();
            p[i] += eps;
            let mut m = weight.clone();
            m[i] -= eps;
            let fd = (loss(&input, &p) - loss(&input, &m)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}] {fd} vs {}", dw[i]);
        }
        for i in [0, 9, 21, 39] {
            let mut p = input.clone();
            p[i] += eps;
            let mut m = input.clone();
            m[i] -= eps;
            let fd = (loss(&p, &weight) - loss(&m, &weight)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let p = softmax(&[1000.0f64, 1000.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[2]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
