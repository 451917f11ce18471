//! Minimal HWC activation tensor and the two layer kinds the flow needs.

/// Activation map stored position-major: `data[(y * w + x) * c + ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn at(&self, pos: usize, ch: usize) -> f64 {
        self.data[pos * self.c + ch]
    }

    /// Copies the listed channels, in order, into a new map.
    pub fn select(&self, channels: &[usize]) -> Act {
        let mut out = Act::zeros(self.h, self.w, channels.len());
        for pos in 0..self.positions() {
            let src = &self.data[pos * self.c..(pos + 1) * self.c];
            let dst = &mut out.data[pos * channels.len()..(pos + 1) * channels.len()];
            for (d, &ch) in dst.iter_mut().zip(channels) {
                *d = src[ch];
            }
        }
        out
    }

    /// Channel-wise concatenation `[self, other]`.
    pub fn concat(&self, other: &Act) -> Act {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let c = self.c + other.c;
        let mut data = Vec::with_capacity(self.positions() * c);
        for pos in 0..self.positions() {
            data.extend_from_slice(&self.data[pos * self.c..(pos + 1) * self.c]);
            data.extend_from_slice(&other.data[pos * other.c..(pos + 1) * other.c]);
        }
        Act {
            h: self.h,
            w: self.w,
            c,
            data,
        }
    }
}

pub const LEAK: f64 = 0.1;

pub fn leaky_relu(x: &Act) -> Act {
    Act {
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { LEAK * v }).collect(),
        ..*x
    }
}

/// In-place multiply of `grad` by the leaky-ReLU derivative at `pre`.
pub fn leaky_relu_backward(pre: &Act, grad: &mut Act) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g *= LEAK;
        }
    }
}

/// Square convolution with replicate padding and stride 1.
///
/// Weights live in a flat parameter vector at `weight`, laid out
/// `[ky][kx][cin][cout]`; the bias follows at `bias`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout
    }

    #[inline]
    fn source(&self, y: usize, x: usize, ky: usize, kx: usize, h: usize, w: usize) -> usize {
        let r = self.kernel / 2;
        let sy = (y + ky).saturating_sub(r).min(h - 1);
        let sx = (x + kx).saturating_sub(r).min(w - 1);
        sy * w + sx
    }

    pub fn forward(&self, params: &[f64], input: &Act) -> Act {
        debug_assert_eq!(input.c, self.cin);
        let (h, w, cin, cout) = (input.h, input.w, self.cin, self.cout);
        let weights = &params[self.weight..self.weight + self.weight_len()];
        let bias = &params[self.bias..self.bias + cout];
        let mut out = Act::zeros(h, w, cout);
        for y in 0..h {
            for x in 0..w {
                let pos = y * w + x;
                let acc = &mut out.data[pos * cout..(pos + 1) * cout];
                acc.copy_from_slice(bias);
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let src = self.source(y, x, ky, kx, h, w);
                        let inp = &input.data[src * cin..(src + 1) * cin];
                        let wtap = &weights[(ky * self.kernel + kx) * cin * cout..][..cin * cout];
                        for (ci, &v) in inp.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let row = &wtap[ci * cout..(ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(row) {
                                *a += v * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, params: &[f64], input: &Act, dout: &Act, grad: &mut [f64]) -> Act {
        let (h, w, cin, cout) = (input.h, input.w, self.cin, self.cout);
        let weights = &params[self.weight..self.weight + self.weight_len()];
        let mut din = Act::zeros(h, w, cin);
        {
            let gb = &mut grad[self.bias..self.bias + cout];
            for pos in 0..h * w {
                for (g, &d) in gb.iter_mut().zip(&dout.data[pos * cout..(pos + 1) * cout]) {
                    *g += d;
                }
            }
        }
        let gw = &mut grad[self.weight..self.weight + self.weight_len()];
        for y in 0..h {
            for x in 0..w {
                let pos = y * w + x;
                let d = &dout.data[pos * cout..(pos + 1) * cout];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let src = self.source(y, x, ky, kx, h, w);
                        let tap = (ky * self.kernel + kx) * cin * cout;
                        for ci in 0..cin {
                            let row = tap + ci * cout;
                            let wrow = &weights[row..row + cout];
                            let dot: f64 = wrow.iter().zip(d).map(|(a, b)| a * b).sum();
                            din.data[src * cin + ci] += dot;
                            let v = input.data[src * cin + ci];
                            if v != 0.0 {
                                for (g, &dv) in gw[row..row + cout].iter_mut().zip(d) {
                                    *g += v * dv;
                                }
                            }
                        }
                    }
                }
            }
        }
        din
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_act(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Act {
        Act {
            h,
            w,
            c,
            data: (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let conv = Conv {
            kernel: 3,
            cin: 2,
            cout: 3,
            weight: 0,
            bias: 54,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: Vec<f64> = (0..57).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Act {
            h: 4,
            w: 5,
            c: 2,
            data: [0.3, -0.7].repeat(20),
        };
        let out = conv.forward(&params, &input);
        for pos in 1..20 {
            for ch in 0..3 {
                assert!((out.at(pos, ch) - out.at(0, ch)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kernel in [1, 3] {
            let conv = Conv {
                kernel,
                cin: 3,
                cout: 2,
                weight: 0,
                bias: kernel * kernel * 6,
            };
            let n = conv.bias + 2;
            let params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let input = random_act(&mut rng, 3, 4, 3);
            let probe = random_act(&mut rng, 3, 4, 2);
            let loss = |p: &[f64], x: &Act| -> f64 {
                conv.forward(p, x).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
            };
            let mut grad = vec![0.0; n];
            let din = conv.backward(&params, &input, &probe, &mut grad);
            let eps = 1e-6;
            for i in 0..n {
                let mut p = params.clone();
                p[i] += eps;
                let up = loss(&p, &input);
                p[i] -= 2.0 * eps;
                let down = loss(&p, &input);
                assert!(((up - down) / (2.0 * eps) - grad[i]).abs() < 1e-6);
            }
            for i in 0..input.data.len() {
                let mut x = input.clone();
                x.data[i] += eps;
                let up = loss(&params, &x);
                x.data[i] -= 2.0 * eps;
                let down = loss(&params, &x);
                assert!(((up - down) / (2.0 * eps) - din.data[i]).abs() < 1e-6);
            }
        }
    }
}
