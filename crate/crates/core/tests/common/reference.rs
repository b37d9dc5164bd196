//! Naive f64 implementations of the network operations, written directly
//! from their definitions with explicit loops.

use forensic_transfer::model::ModelParams;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Arr, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let s = &self.shape;
        self.data[((n * s[1] + c) * s[2] + y) * s[3] + x]
    }
}

/// 3x3 cross-correlation, zero padding 1: `out[n,o,y,x] = b[o] +
/// sum_{c,ky,kx} w[o,c,ky,kx] * in[n,c,y*s+ky-1,x*s+kx-1]`.
pub fn conv2d(x: &Arr, w: &Arr, b: &Arr, stride: usize) -> Arr {
    let (n, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let cout = w.shape[0];
    let (oh, ow) = (h / stride, wd / stride);
    let mut out = Arr::zeros(vec![n, cout, oh, ow]);
    let mut k = 0;
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[o];
                    for c in 0..cin {
                        for ky in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data[((o * cin + c) * 3 + ky) * 3 + kx]
                                    * x.at4(s, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data[k] = acc;
                    k += 1;
                }
            }
        }
    }
    out
}

pub fn upsample2x(x: &Arr) -> Arr {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = Arr::zeros(vec![n, c, 2 * h, 2 * w]);
    let mut k = 0;
    for s in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.data[k] = x.at4(s, ch, y / 2, xx / 2);
                    k += 1;
                }
            }
        }
    }
    out
}

/// Per-sample mean of |x| over channels `start..start + len`.
pub fn channel_mean_abs(x: &Arr, start: usize, len: usize) -> Arr {
    let n = x.shape[0];
    let per_channel: usize = x.shape[2..].iter().product();
    let per_sample = x.shape[1] * per_channel;
    let data = (0..n)
        .map(|s| {
            let mut acc = 0.0;
            for c in start..start + len {
                for j in 0..per_channel {
                    acc += x.data[s * per_sample + c * per_channel + j].abs();
                }
            }
            acc / (len * per_channel) as f64
        })
        .collect();
    Arr::new(vec![n], data)
}

pub fn mask_channels(x: &Arr, keep: &[(usize, usize)]) -> Arr {
    let per_channel: usize = x.shape[2..].iter().product();
    let per_sample = x.shape[1] * per_channel;
    let mut out = x.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let (s, c) = (i / per_sample, (i % per_sample) / per_channel);
        let (start, len) = keep[s];
        if c < start || c >= start + len {
            *v = 0.0;
        }
    }
    out
}

pub fn pair_cross_entropy(a: &Arr, b: &Arr, targets: &[usize]) -> Arr {
    let data = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let (x, y) = (a.data[i], b.data[i]);
            let z = x.exp() + y.exp();
            -((if t == 0 { x } else { y }).exp() / z).ln()
        })
        .collect();
    Arr::new(vec![targets.len()], data)
}

/// f64 copy of a model's parameters.
#[derive(Clone, Debug)]
pub struct RefModel {
    /// `(weight, bias, stride)` per layer, encoder first.
    pub layers: Vec<(Arr, Arr, usize)>,
    pub half: usize,
}

impl RefModel {
    pub fn from_params(model: &ModelParams) -> Self {
        let conv = |t: &forensic_transfer::Tensor| {
            Arr::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
        };
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (conv(&l.weight.value), conv(&l.bias.value), l.stride))
                .collect(),
            half: model.arch.half(),
        }
    }

    /// Replaces parameter tensor `k` (weights at even, biases at odd `k`).
    pub fn set_tensor(&mut self, k: usize, data: Vec<f64>) {
        let layer = &mut self.layers[k / 2];
        let t = if k % 2 == 0 { &mut layer.0 } else { &mut layer.1 };
        assert_eq!(t.data.len(), data.len());
        t.data = data;
    }

    pub fn encode(&self, x: &Arr) -> Arr {
        let mut h = x.clone();
        for (w, b, s) in &self.layers[..5] {
            h = conv2d(&h, w, b, *s).map(|v| v.max(0.0));
        }
        h
    }

    pub fn decode(&self, z: &Arr) -> Arr {
        let mut h = z.clone();
        for (k, (w, b, s)) in self.layers[5..].iter().enumerate() {
            if k < 4 {
                h = conv2d(&upsample2x(&h), w, b, *s).map(|v| v.max(0.0));
            } else {
                h = conv2d(&h, w, b, *s).map(f64::tanh);
            }
        }
        h
    }

    /// `gamma * mean_i(mean|x_i - x_hat_i|) + mean_i(|a0 - [real]| + |a1 - [fake]|)`.
    pub fn loss(&self, x: &Arr, targets: &[usize], gamma: f64) -> f64 {
        let h = self.encode(x);
        let a0 = channel_mean_abs(&h, 0, self.half);
        let a1 = channel_mean_abs(&h, self.half, self.half);
        let n = targets.len();
        let act = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let (t0, t1) = if t == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
                (a0.data[i] - t0).abs() + (a1.data[i] - t1).abs()
            })
            .sum::<f64>()
            / n as f64;
        let keep: Vec<(usize, usize)> = targets.iter().map(|&t| (t * self.half, self.half)).collect();
        let x_hat = self.decode(&mask_channels(&h, &keep));
        let per_sample = x.data.len() / n;
        let rec = (0..n)
            .map(|i| {
                (0..per_sample)
                    .map(|j| (x.data[i * per_sample + j] - x_hat.data[i * per_sample + j]).abs())
                    .sum::<f64>()
                    / per_sample as f64
            })
            .sum::<f64>()
            / n as f64;
        gamma * rec + act
    }
}
