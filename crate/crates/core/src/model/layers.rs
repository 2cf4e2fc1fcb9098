//! Dense, strided-convolution and gated-memory-cell primitives with manual
//! reverse-mode derivatives. Buffers are flat `f64` slices in row-major
//! order; every backward function accumulates (`+=`) into its gradients.

use serde::{Deserialize, Serialize};

/// 3x3 convolution, stride 2, zero padding 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub const KERNEL: usize = 3;

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / 2 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / 2 + 1
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * KERNEL * KERNEL
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_h() * self.out_w()
    }

    /// Output index range `[lo, hi)` along one axis that reads valid input
    /// for kernel offset `k`, where input = 2 * out + k - 1.
    fn valid(out_len: usize, in_len: usize, k: usize) -> (usize, usize) {
        let lo = usize::from(k == 0);
        // 2o + k - 1 <= in_len - 1  =>  o <= (in_len - k) / 2
        let hi = if in_len >= k {
            ((in_len - k) / 2 + 1).min(out_len)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// `out = conv(input) + bias` (pre-activation).
    pub fn forward(&self, input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (h, w) = (self.h, self.w);
        for co in 0..self.cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..self.cin {
                let inp = &input[ci * h * w..(ci + 1) * h * w];
                for ky in 0..KERNEL {
                    let (y0, y1) = Self::valid(oh, h, ky);
                    for kx in 0..KERNEL {
                        let wv = weight[((co * self.cin + ci) * KERNEL + ky) * KERNEL + kx];
                        let (x0, x1) = Self::valid(ow, w, kx);
                        for oy in y0..y1 {
                            let iy = 2 * oy + ky - 1;
                            let row = &inp[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                orow[ox] += wv * row[2 * ox + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Given `dpre` (gradient wrt the pre-activation output), accumulates
    /// weight, bias and (optionally) input gradients.
    pub fn backward(
        &self,
        input: &[f64],
        weight: &[f64],
        dpre: &[f64],
        dweight: &mut [f64],
        dbias: &mut [f64],
        mut dinput: Option<&mut [f64]>,
    ) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (h, w) = (self.h, self.w);
        for co in 0..self.cout {
            let plane = &dpre[co * oh * ow..(co + 1) * oh * ow];
            dbias[co] += plane.iter().sum::<f64>();
            for ci in 0..self.cin {
                let inp = &input[ci * h * w..(ci + 1) * h * w];
                for ky in 0..KERNEL {
                    let (y0, y1) = Self::valid(oh, h, ky);
                    for kx in 0..KERNEL {
                        let widx = ((co * self.cin + ci) * KERNEL + ky) * KERNEL + kx;
                        let wv = weight[widx];
                        let (x0, x1) = Self::valid(ow, w, kx);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = 2 * oy + ky - 1;
                            let row = &inp[iy * w..(iy + 1) * w];
                            let drow = &plane[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                acc += drow[ox] * row[2 * ox + kx - 1];
                            }
                        }
                        dweight[widx] += acc;
                        if let Some(din) = dinput.as_deref_mut() {
                            let dplane = &mut din[ci * h * w..(ci + 1) * h * w];
                            for oy in y0..y1 {
                                let iy = 2 * oy + ky - 1;
                                let drow = &plane[oy * ow..(oy + 1) * ow];
                                let dirow = &mut dplane[iy * w..(iy + 1) * w];
                                for ox in x0..x1 {
                                    dirow[2 * ox + kx - 1] += wv * drow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = W x + b` with `W` of shape `nout x nin`.
pub fn dense_forward(nin: usize, nout: usize, w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    for o in 0..nout {
        let row = &w[o * nin..(o + 1) * nin];
        y[o] = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    nin: usize,
    nout: usize,
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    for o in 0..nout {
        let g = dy[o];
        db[o] += g;
        if g == 0.0 {
            continue;
        }
        let drow = &mut dw[o * nin..(o + 1) * nin];
        for (d, xi) in drow.iter_mut().zip(x) {
            *d += g * xi;
        }
    }
    if let Some(dx) = dx {
        for o in 0..nout {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            let row = &w[o * nin..(o + 1) * nin];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
    }
}

/// Negative-side slope of [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

/// Encoder nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    #[default]
    LeakyRelu,
}

impl Activation {
    pub fn apply_in_place(self, v: &mut [f64]) {
        match self {
            Activation::Tanh => tanh_in_place(v),
            Activation::LeakyRelu => v.iter_mut().for_each(|x| {
                if *x < 0.0 {
                    *x *= LEAKY_SLOPE
                }
            }),
        }
    }

    /// Pre-activation gradient from the activation output, which has the
    /// same sign as the input for both functions.
    pub fn backward(self, act: &[f64], dact: &[f64]) -> Vec<f64> {
        match self {
            Activation::Tanh => tanh_backward(act, dact),
            Activation::LeakyRelu => act
                .iter()
                .zip(dact)
                .map(|(a, d)| if *a < 0.0 { d * LEAKY_SLOPE } else { *d })
                .collect(),
        }
    }
}

pub fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// `dpre = dact * (1 - act^2)` for a tanh activation.
pub fn tanh_backward(act: &[f64], dact: &[f64]) -> Vec<f64> {
    act.iter().zip(dact).map(|(a, d)| d * (1.0 - a * a)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one gated-memory-cell step; gate order is input, forget,
/// candidate, output.
#[derive(Debug, Clone)]
pub struct CellStep {
    pub input_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output_gate: Vec<f64>,
    pub cell: Vec<f64>,
    pub cell_tanh: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CellShape {
    pub nin: usize,
    pub hidden: usize,
}

impl CellShape {
    /// `z = Wx x + Wh h_prev + b`, gates from `z`, then
    /// `c = f * c_prev + i * g`, `h = o * tanh(c)`.
    pub fn forward(
        &self,
        wx: &[f64],
        wh: &[f64],
        b: &[f64],
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
    ) -> CellStep {
        let n = self.hidden;
        let mut z = vec![0.0; 4 * n];
        dense_forward(self.nin, 4 * n, wx, b, x, &mut z);
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &wh[r * n..(r + 1) * n];
            *zr += row.iter().zip(h_prev).map(|(a, c)| a * c).sum::<f64>();
        }
        let input_gate: Vec<f64> = z[..n].iter().map(|&v| sigmoid(v)).collect();
        let forget_gate: Vec<f64> = z[n..2 * n].iter().map(|&v| sigmoid(v)).collect();
        let candidate: Vec<f64> = z[2 * n..3 * n].iter().map(|v| v.tanh()).collect();
        let output_gate: Vec<f64> = z[3 * n..].iter().map(|&v| sigmoid(v)).collect();
        let cell: Vec<f64> = (0..n)
            .map(|k| forget_gate[k] * c_prev[k] + input_gate[k] * candidate[k])
            .collect();
        let cell_tanh: Vec<f64> = cell.iter().map(|c| c.tanh()).collect();
        let hidden = (0..n).map(|k| output_gate[k] * cell_tanh[k]).collect();
        CellStep {
            input_gate,
            forget_gate,
            candidate,
            output_gate,
            cell,
            cell_tanh,
            hidden,
        }
    }

    /// Back-propagates one step. `dh` and `dc` are gradients wrt this step's
    /// hidden and cell outputs; returns gradients wrt `(x, h_prev, c_prev)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        step: &CellStep,
        wx: &[f64],
        wh: &[f64],
        x: &[f64],
        h_prev: &[f64],
        c_prev: &[f64],
        dh: &[f64],
        dc: &[f64],
        dwx: &mut [f64],
        dwh: &mut [f64],
        db: &mut [f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.hidden;
        let mut dz = vec![0.0; 4 * n];
        let mut dc_prev = vec![0.0; n];
        for k in 0..n {
            let (i, f, g, o) = (
                step.input_gate[k],
                step.forget_gate[k],
                step.candidate[k],
                step.output_gate[k],
            );
            let tc = step.cell_tanh[k];
            let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
            dz[k] = dck * g * i * (1.0 - i);
            dz[n + k] = dck * c_prev[k] * f * (1.0 - f);
            dz[2 * n + k] = dck * i * (1.0 - g * g);
            dz[3 * n + k] = dh[k] * tc * o * (1.0 - o);
            dc_prev[k] = dck * f;
        }
        let mut dx = vec![0.0; self.nin];
        dense_backward(self.nin, 4 * n, wx, x, &dz, dwx, db, Some(&mut dx));
        let mut dh_prev = vec![0.0; n];
        for (r, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &wh[r * n..(r + 1) * n];
            let drow = &mut dwh[r * n..(r + 1) * n];
            for k in 0..n {
                drow[k] += g * h_prev[k];
                dh_prev[k] += g * row[k];
            }
        }
        (dx, dh_prev, dc_prev)
    }
}
