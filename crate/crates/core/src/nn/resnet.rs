use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{AvgPool, BatchNorm2d, Conv2d, Linear, MaxPool, Param, Relu};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of the first stage; later stages use 2x, 4x and 8x.
    pub width: usize,
    /// Side of the square input image.
    pub input_size: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            in_channels: 3,
            num_classes: 2,
            width: 64,
            input_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
    relu_out: Relu,
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.same_shape(b));
    let mut out = a.clone();
    out.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
    out
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let down = (stride != 1 || cin != cout).then(|| (Conv2d::new(cin, cout, 1, stride, 0, rng), BatchNorm2d::new(cout)));
        BasicBlock {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(cout),
            relu1: Relu::default(),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(cout),
            down,
            relu_out: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let h = self.conv1.forward(x, train);
        let h = self.bn1.forward(&h, train);
        let h = self.relu1.forward(&h, train);
        let h = self.conv2.forward(&h, train);
        let h = self.bn2.forward(&h, train);
        let skip = match &mut self.down {
            Some((c, b)) => {
                let s = c.forward(x, train);
                b.forward(&s, train)
            }
            None => x.clone(),
        };
        self.relu_out.forward(&add(&h, &skip), train)
    }

    fn eval(&self, x: &Tensor) -> Tensor {
        let h = self.bn1.eval(&self.conv1.eval(x));
        let h = self.bn2.eval(&self.conv2.eval(&self.relu1.eval(&h)));
        let skip = match &self.down {
            Some((c, b)) => b.eval(&c.eval(x)),
            None => x.clone(),
        };
        self.relu_out.eval(&add(&h, &skip))
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.relu_out.backward(dy);
        let dh = self.bn2.backward(&d);
        let dh = self.conv2.backward(&dh);
        let dh = self.relu1.backward(&dh);
        let dh = self.bn1.backward(&dh);
        let dx = self.conv1.backward(&dh);
        let dskip = match &mut self.down {
            Some((c, b)) => c.backward(&b.backward(&d)),
            None => d,
        };
        add(&dx, &dskip)
    }

    fn params(&mut self) -> Vec<&mut Param> {
        let mut v = vec![
            &mut self.conv1.weight,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ];
        if let Some((c, b)) = &mut self.down {
            v.extend([&mut c.weight, &mut b.gamma, &mut b.beta]);
        }
        v
    }

    fn norms(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, b)) = &mut self.down {
            v.push(b);
        }
        v
    }
}

/// 18-layer residual network: 7x7/2 stem, 3x3/2 max pool, four stages of
/// two basic blocks, global average pool and a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNet18 {
    pub config: ResNetConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu: Relu,
    pool: MaxPool,
    blocks: Vec<BasicBlock>,
    avg: AvgPool,
    fc: Linear,
}

impl ResNet18 {
    pub fn new(config: ResNetConfig, seed: u64) -> Result<Self> {
        if config.width == 0 || config.input_size < 8 || config.in_channels == 0 || config.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("invalid network configuration {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let conv1 = Conv2d::new(config.in_channels, w, 7, 2, 3, &mut rng);
        let mut blocks = Vec::with_capacity(8);
        let mut cin = w;
        for (stage, mult) in [1, 2, 4, 8].into_iter().enumerate() {
            let cout = w * mult;
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(cin, cout, stride, &mut rng));
                cin = cout;
            }
        }
        let fc = Linear::new(cin, config.num_classes, &mut rng);
        Ok(ResNet18 {
            config,
            conv1,
            bn1: BatchNorm2d::new(w),
            relu: Relu::default(),
            pool: MaxPool::default(),
            blocks,
            avg: AvgPool::default(),
            fc,
        })
    }

    fn check_input(&self, x: &Tensor) {
        let c = &self.config;
        assert_eq!(
            (x.c, x.h, x.w),
            (c.in_channels, c.input_size, c.input_size),
            "input does not match the network configuration"
        );
    }

    /// Training-mode forward pass; returns logits `n x classes x 1 x 1` and
    /// keeps the caches needed by [`ResNet18::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.check_input(x);
        let h = self.conv1.forward(x, true);
        let h = self.bn1.forward(&h, true);
        let h = self.relu.forward(&h, true);
        let mut h = self.pool.forward(&h, true);
        for b in &mut self.blocks {
            h = b.forward(&h, true);
        }
        let h = self.avg.forward(&h, true);
        self.fc.forward(&h, true)
    }

    /// Inference with running batch-norm statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.check_input(x);
        let h = self.pool.eval(&self.relu.eval(&self.bn1.eval(&self.conv1.eval(x))));
        let h = self.blocks.iter().fold(h, |h, b| b.eval(&h));
        self.fc.eval(&self.avg.eval(&h))
    }

    /// Accumulates parameter gradients for `dlogits = dL/dlogits`.
    pub fn backward(&mut self, dlogits: &Tensor) {
        let d = self.fc.backward(dlogits);
        let mut d = self.avg.backward(&d);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d);
        }
        let d = self.pool.backward(&d);
        let d = self.relu.backward(&d);
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d);
    }

    /// Every trainable parameter in a fixed order.
    pub fn params(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.conv1.weight, &mut self.bn1.gamma, &mut self.bn1.beta];
        for b in &mut self.blocks {
            v.extend(b.params());
        }
        v.extend([&mut self.fc.weight, &mut self.fc.bias]);
        v
    }

    pub fn num_params(&mut self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params().into_iter().for_each(Param::zero_grad);
    }

    fn norms(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut v = vec![&mut self.bn1];
        for b in &mut self.blocks {
            v.extend(b.norms());
        }
        v
    }

    /// Replaces the batch-norm running statistics by their plain average
    /// over `batches`, computed with the current weights.
    pub fn recalibrate_batch_norm(&mut self, batches: impl IntoIterator<Item = Tensor>) {
        for (k, x) in batches.into_iter().enumerate() {
            let mo = 1.0 / (k as f32 + 1.0);
            self.norms().into_iter().for_each(|b| b.momentum = mo);
            self.forward_train(&x);
        }
        self.norms().into_iter().for_each(|b| b.momentum = super::layers::BN_MOMENTUM);
    }

    /// Applies `f` to every parameter and then every batch-norm running
    /// mean and variance, in file order.
    fn visit_state(&mut self, mut f: impl FnMut(&mut Vec<f32>)) {
        for p in self.params() {
            f(&mut p.value);
        }
        for b in self.norms() {
            f(&mut b.running_mean);
            f(&mut b.running_var);
        }
    }

    const MAGIC: &'static [u8; 8] = b"GGRESNT1";

    /// Layout: 8-byte magic, little-endian u32 length of a JSON config,
    /// the config, then every parameter and batch-norm statistic as
    /// little-endian f32 in [`ResNet18::params`] order followed by running
    /// means and variances.
    pub fn write_to(&mut self, mut w: impl Write) -> std::io::Result<()> {
        let cfg = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        w.write_all(Self::MAGIC)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        let mut bytes = Vec::new();
        self.visit_state(|buf| bytes.extend(buf.iter().flat_map(|v| v.to_le_bytes())));
        w.write_all(&bytes)
    }

    pub fn read_from(mut r: impl Read) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(bad("not a model file"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut cfg = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut cfg)?;
        let config: ResNetConfig = serde_json::from_slice(&cfg).map_err(|e| bad(&e.to_string()))?;
        let mut net = ResNet18::new(config, 0).map_err(|e| bad(&e.to_string()))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let mut need = 0;
        net.visit_state(|buf| need += buf.len() * 4);
        if rest.len() != need {
            return Err(bad("model state has the wrong length"));
        }
        let mut vals = rest.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        net.visit_state(|buf| buf.iter_mut().for_each(|v| *v = vals.next().unwrap_or_default()));
        Ok(net)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
        crate::manifest::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ResNet18::read_from(std::io::BufReader::new(f)).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::tests::random_tensor;

    fn tiny() -> ResNetConfig {
        ResNetConfig {
            width: 2,
            input_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_parameter_count() {
        let mut net = ResNet18::new(tiny(), 1).unwrap();
        let y = net.forward_train(&random_tensor(3, 3, 16, 16, 1));
        assert_eq!((y.n, y.c, y.h, y.w), (3, 2, 1, 1));
        // closed-form count for a width-w network with 3 inputs and 2 classes
        let w = 2usize;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
        let bn = |c: usize| 2 * c;
        let mut expect = conv(3, w, 7) + bn(w);
        let mut cin = w;
        for (s, m) in [1, 2, 4, 8].into_iter().enumerate() {
            let c = w * m;
            for b in 0..2 {
                expect += conv(cin, c, 3) + bn(c) + conv(c, c, 3) + bn(c);
                if s > 0 && b == 0 {
                    expect += conv(cin, c, 1) + bn(c);
                }
                cin = c;
            }
        }
        expect += 8 * w * 2 + 2;
        assert_eq!(net.num_params(), expect);
        let mut full = ResNet18::new(ResNetConfig::default(), 0).unwrap();
        assert_eq!(full.num_params(), 11_177_538);
    }

    #[test]
    fn whole_network_gradient_check() {
        let cfg = ResNetConfig { width: 2, input_size: 32, ..Default::default() };
        let mut net = ResNet18::new(cfg, 3).unwrap();
        let x = random_tensor(8, 3, 32, 32, 2);
        let r = random_tensor(8, 2, 1, 1, 3);
        let loss = |net: &mut ResNet18| -> f64 {
            let y = net.forward_train(&x);
            y.data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        net.zero_grad();
        net.forward_train(&x);
        net.backward(&r);
        let h = 1e-3f32;
        let (mut checked, mut close) = (0, 0);
        let n_params = net.params().len();
        for pi in 0..n_params {
            let analytic = net.params()[pi].grad[0] as f64;
            let mut plus = net.clone();
            plus.params()[pi].value[0] += h;
            let mut minus = net.clone();
            minus.params()[pi].value[0] -= h;
            let num = (loss(&mut plus) - loss(&mut minus)) / (2.0 * h as f64);
            let err = (num - analytic).abs() / num.abs().max(analytic.abs()).max(1e-2);
            if err < 5e-2 {
                close += 1;
            }
            checked += 1;
        }
        // max-pool and ReLU kinks make a few early-layer differences unreliable
        assert!(close * 4 >= checked * 3, "{close} of {checked} gradients agree");
    }

    #[test]
    fn eval_is_deterministic_and_save_roundtrips() {
        let mut net = ResNet18::new(tiny(), 5).unwrap();
        let x = random_tensor(2, 3, 16, 16, 9);
        net.forward_train(&x);
        let a = net.forward_eval(&x);
        assert_eq!(a, net.forward_eval(&x));
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        let mut back = ResNet18::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.forward_eval(&x), a);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(ResNet18::read_from(&bytes[..bytes.len() - 1]).is_err());
        assert!(ResNet18::read_from(&b"nonsense-bytes"[..]).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = ResNet18::new(tiny(), 11).unwrap();
        let mut b = ResNet18::new(tiny(), 11).unwrap();
        let mut c = ResNet18::new(tiny(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params()[0].value, c.params()[0].value);
        let _ = b.num_params();
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = Param::new(vec![3.0, -2.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            p.grad = p.value.iter().map(|v| 2.0 * v).collect();
            opt.step(vec![&mut p]);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new(vec![1.0]);
        p.grad = vec![0.5];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut p]);
        assert!((p.value[0] - (1.0 - 1e-4)).abs() < 1e-7);
    }
}
