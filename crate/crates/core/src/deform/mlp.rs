//! A small fully connected network with ReLU hidden layers and a linear head,
//! evaluated one sample at a time with an explicit tape for backprop.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        Dense {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.inputs);
        out.clear();
        out.extend(self.bias.iter().copied());
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.inputs)) {
            *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations retained by one forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTape {
    /// `acts[0]` is the input, `acts[i]` the post-activation output of layer
    /// `i - 1`; the final entry is the linear output.
    pub acts: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// `depth` hidden layers of `width` ReLU units. The output layer starts at
    /// zero so the network predicts exactly zero before training.
    pub fn new<R: Rng>(inputs: usize, width: usize, depth: usize, outputs: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = inputs;
        for _ in 0..depth {
            layers.push(Dense::glorot(fan_in, width, rng));
            fan_in = width;
        }
        layers.push(Dense::zeros(fan_in, outputs));
        Mlp { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, input: &[f64]) -> MlpTape {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(&acts[i], &mut out);
            if i < last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        MlpTape { acts }
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dinput`.
    pub fn backward(&self, tape: &MlpTape, d_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut delta = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let x = &tape.acts[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (w, xv) in row.iter_mut().zip(x) {
                    *w += d * xv;
                }
            }
            let mut d_in = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (di, w) in d_in.iter_mut().zip(row) {
                    *di += d * w;
                }
            }
            if i > 0 {
                // ReLU mask of the previous layer's output
                for (di, a) in d_in.iter_mut().zip(&tape.acts[i]) {
                    if *a <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
            delta = d_in;
        }
        delta
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    /// Flat views of every parameter tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomized(rng: &mut ChaCha8Rng) -> Mlp {
        let mut net = Mlp::new(5, 7, 2, 3, rng);
        for t in net.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.gen_range(-0.8..0.8);
            }
        }
        net
    }

    #[test]
    fn zero_initialized_head_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(4, 64, 1, 9, &mut rng);
        let tape = net.forward(&[0.3, -1.0, 2.0, 0.5]);
        assert!(tape.output().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_and_input_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let net = randomized(&mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_out = [0.3, -0.7, 1.1];
        let loss = |net: &Mlp, x: &[f64]| -> f64 {
            net.forward(x).output().iter().zip(&w_out).map(|(a, b)| a * b).sum()
        };
        let mut grads = net.zeros_like();
        let dx = net.backward(&net.forward(&x), &w_out, &mut grads);
        let h = 1e-5;
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!((fd - dx[k]).abs() < 1e-7, "input {k}");
        }
        for (li, layer) in net.layers.iter().enumerate() {
            for wi in 0..layer.weight.len() {
                let mut np = net.clone();
                let mut nm = net.clone();
                np.layers[li].weight[wi] += h;
                nm.layers[li].weight[wi] -= h;
                let fd = (loss(&np, &x) - loss(&nm, &x)) / (2.0 * h);
                let an = grads.layers[li].weight[wi];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "layer {li} w {wi}: {fd} {an}");
            }
        }
    }
}
