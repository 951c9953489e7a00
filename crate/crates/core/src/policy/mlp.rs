//! Two-hidden-layer perceptron producing action logits, with a hand-written
//! backward pass.
//!
//! Parameter layout (row-major, all in one flat vector):
//! `W1[h1][in] | b1[h1] | W2[h2][h1] | b2[h2] | W3[out][h2] | b3[out]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    /// Derivative; ReLU uses the subgradient 0 at the kink.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(z),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output: usize,
    pub activation: Activation,
}

pub(crate) struct Forward {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    pub logits: Vec<f64>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl Mlp {
    fn offsets(&self) -> Offsets {
        let w1 = 0;
        let b1 = w1 + self.hidden1 * self.input;
        let w2 = b1 + self.hidden1;
        let b2 = w2 + self.hidden2 * self.hidden1;
        let w3 = b2 + self.hidden2;
        let b3 = w3 + self.output * self.hidden2;
        let end = b3 + self.output;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end,
        }
    }

    pub fn param_count(&self) -> usize {
        self.offsets().end
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let o = self.offsets();
        let mut theta = vec![0.0; o.end];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut theta[range] {
                *w = rng.random_range(-limit..=limit);
            }
        };
        fill(o.w1..o.b1, self.input, self.hidden1);
        fill(o.w2..o.b2, self.hidden1, self.hidden2);
        fill(o.w3..o.b3, self.hidden2, self.output);
        theta
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Forward {
        let o = self.offsets();
        let act = self.activation;
        let z1 = affine(&theta[o.w1..o.b1], &theta[o.b1..o.w2], x);
        let a1: Vec<f64> = z1.iter().map(|&z| act.apply(z)).collect();
        let z2 = affine(&theta[o.w2..o.b2], &theta[o.b2..o.w3], &a1);
        let a2: Vec<f64> = z2.iter().map(|&z| act.apply(z)).collect();
        let logits = affine(&theta[o.w3..o.b3], &theta[o.b3..o.end], &a2);
        Forward {
            z1,
            a1,
            z2,
            a2,
            logits,
        }
    }

    /// Writes the gradient of `<dlogits, logits(theta)>` with respect to `theta` into `out`.
    pub fn backward(&self, theta: &[f64], x: &[f64], fw: &Forward, dlogits: &[f64], out: &mut [f64]) {
        let o = self.offsets();
        let act = self.activation;

        // output layer
        outer_into(&mut out[o.w3..o.b3], dlogits, &fw.a2);
        out[o.b3..o.end].copy_from_slice(dlogits);
        let mut d2 = transpose_mul(&theta[o.w3..o.b3], self.output, self.hidden2, dlogits);
        for (d, &z) in d2.iter_mut().zip(&fw.z2) {
            *d *= act.derivative(z);
        }

        outer_into(&mut out[o.w2..o.b2], &d2, &fw.a1);
        out[o.b2..o.w3].copy_from_slice(&d2);
        let mut d1 = transpose_mul(&theta[o.w2..o.b2], self.hidden2, self.hidden1, &d2);
        for (d, &z) in d1.iter_mut().zip(&fw.z1) {
            *d *= act.derivative(z);
        }

        outer_into(&mut out[o.w1..o.b1], &d1, x);
        out[o.b1..o.w2].copy_from_slice(&d1);
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(i, &bias)| {
            let row = &w[i * n_in..(i + 1) * n_in];
            bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn outer_into(out: &mut [f64], rows: &[f64], cols: &[f64]) {
    let n = cols.len();
    for (i, &r) in rows.iter().enumerate() {
        for (o, &c) in out[i * n..(i + 1) * n].iter_mut().zip(cols) {
            *o = r * c;
        }
    }
}

/// `W^T v` for `W` stored as `[rows][cols]`.
fn transpose_mul(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += vi * wij;
        }
    }
    out
}
