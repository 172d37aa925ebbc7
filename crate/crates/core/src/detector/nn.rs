//! Minimal dense-tensor building blocks for the toy detector: planar
//! feature maps, 2D convolution with explicit backward passes, a smooth
//! exponential-linear activation, and an Adam parameter update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Planar feature map: data[(c * h + y) * w + x].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let idx = self.idx(c, y, x);
        self.data[idx] = v;
    }
}

/// 2D convolution layer, square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Kernel weights, [out_c][in_c][k][k] flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: vec![0.0; out_c * in_c * k * k],
            bias: vec![0.0; out_c],
        }
    }

    /// Kaiming-uniform initialization, deterministic per RNG state.
    pub fn init_weights(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = (self.in_c * self.k * self.k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for w in &mut self.weight {
            *w = rng.gen_range(-bound..bound);
        }
        for b in &mut self.bias {
            *b = 0.0;
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, input: &FeatMap) -> FeatMap {
        debug_assert_eq!(input.c, self.in_c);
        let (oh, ow) = self.out_dims(input.h, input.w);
        let mut out = FeatMap::zeros(self.out_c, oh, ow);
        let k = self.k;
        for oc in 0..self.out_c {
            let w_oc = &self.weight[oc * self.in_c * k * k..(oc + 1) * self.in_c * k * k];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[oc];
                    let base_y = (oy * self.stride) as isize - self.pad as isize;
                    let base_x = (ox * self.stride) as isize - self.pad as isize;
                    for ic in 0..self.in_c {
                        for ky in 0..k {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= input.h as isize {
                                continue;
                            }
                            let row = (ic * input.h + iy as usize) * input.w;
                            let wrow = (ic * k + ky) * k;
                            for kx in 0..k {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= input.w as isize {
                                    continue;
                                }
                                acc += input.data[row + ix as usize] * w_oc[wrow + kx];
                            }
                        }
                    }
                    out.data[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    /// Backpropagate `d_out` to the layer input; optionally accumulate
    /// weight and bias gradients in place.
    pub fn backward(
        &self,
        input: &FeatMap,
        d_out: &FeatMap,
        mut d_weight: Option<&mut [f64]>,
        mut d_bias: Option<&mut [f64]>,
    ) -> FeatMap {
        let (oh, ow) = (d_out.h, d_out.w);
        let k = self.k;
        let mut d_in = FeatMap::zeros(input.c, input.h, input.w);
        for oc in 0..self.out_c {
            let w_oc = &self.weight[oc * self.in_c * k * k..(oc + 1) * self.in_c * k * k];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = d_out.data[(oc * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(db) = d_bias.as_deref_mut() {
                        db[oc] += g;
                    }
                    let base_y = (oy * self.stride) as isize - self.pad as isize;
                    let base_x = (ox * self.stride) as isize - self.pad as isize;
                    for ic in 0..self.in_c {
                        for ky in 0..k {
                            let iy = base_y + ky as isize;
                            if iy < 0 || iy >= input.h as isize {
                                continue;
                            }
                            let row = (ic * input.h + iy as usize) * input.w;
                            let wrow = (ic * k + ky) * k;
                            for kx in 0..k {
                                let ix = base_x + kx as isize;
                                if ix < 0 || ix >= input.w as isize {
                                    continue;
                                }
                                let in_idx = row + ix as usize;
                                d_in.data[in_idx] += g * w_oc[wrow + kx];
                                if let Some(dw) = d_weight.as_deref_mut() {
                                    dw[oc * self.in_c * k * k + wrow + kx] +=
                                        g * input.data[in_idx];
                                }
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Exponential linear unit. Continuously differentiable, which keeps
/// finite-difference gradient checks through the detector clean.
#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

#[inline]
pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn elu_map(m: &FeatMap) -> FeatMap {
    FeatMap {
        c: m.c,
        h: m.h,
        w: m.w,
        data: m.data.iter().map(|&x| elu(x)).collect(),
    }
}

/// d(loss)/d(pre-activation) given d(loss)/d(activation).
pub fn elu_backward(pre: &FeatMap, d_act: &FeatMap) -> FeatMap {
    FeatMap {
        c: pre.c,
        h: pre.h,
        w: pre.w,
        data: pre
            .data
            .iter()
            .zip(&d_act.data)
            .map(|(&x, &g)| g * elu_grad(x))
            .collect(),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable binary cross-entropy on a logit.
#[inline]
pub fn bce_with_logit(x: f64, target: f64) -> f64 {
    x.max(0.0) - x * target + (1.0 + (-x.abs()).exp()).ln()
}

/// d(bce)/d(logit) = sigmoid(x) - target.
#[inline]
pub fn bce_grad(x: f64, target: f64) -> f64 {
    sigmoid(x) - target
}

/// Adam update state with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update; `lr` is indexed per parameter so parameter groups can use
    /// different rates.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: &dyn Fn(usize) -> f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr(i) * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
