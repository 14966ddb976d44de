use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; activations cached for backward.
    Train,
    /// Running statistics; nothing cached.
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    fn normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::new(shape, (0..len).map(|_| dist.sample(rng)).collect())
    }

    fn filled(shape: Vec<usize>, v: f64) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visitor over the named state tensors of a layer tree.
pub trait StateVisitor {
    fn param(&mut self, name: &str, p: &Param);
    fn buffer(&mut self, name: &str, shape: &[usize], b: &[f64]);
}

pub trait StateVisitorMut {
    fn param(&mut self, name: &str, p: &mut Param);
    fn buffer(&mut self, name: &str, shape: &[usize], b: &mut Vec<f64>);
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in * kernel * kernel]`
    pub weight: Param,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // He initialisation on fan-out.
        let std = (2.0 / (kernel * kernel * out_channels) as f64).sqrt();
        let weight = Param::normal(
            vec![out_channels, in_channels, kernel, kernel],
            std,
            rng,
        );
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            cache: None,
        }
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &FeatureMap, ho: usize, wo: usize) -> Vec<f64> {
        let k = self.kernel;
        let cols_n = x.batch * ho * wo;
        let mut cols = vec![0.0; self.in_channels * k * k * cols_n];
        let (h, w) = (x.height as isize, x.width as isize);
        let pad = self.padding as isize;
        let stride = self.stride as isize;
        for ci in 0..self.in_channels {
            let src_c = &x.data[ci * x.channel_len()..(ci + 1) * x.channel_len()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    let mut idx = 0;
                    for n in 0..x.batch {
                        let img = &src_c[n * x.plane()..(n + 1) * x.plane()];
                        for oy in 0..ho as isize {
                            let iy = oy * stride + ky as isize - pad;
                            if iy < 0 || iy >= h {
                                idx += wo;
                                continue;
                            }
                            let line = &img[(iy * w) as usize..((iy + 1) * w) as usize];
                            for ox in 0..wo as isize {
                                let ix = ox * stride + kx as isize - pad;
                                if ix >= 0 && ix < w {
                                    dst[idx] = line[ix as usize];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], shape: (usize, usize, usize, usize), ho: usize, wo: usize) -> FeatureMap {
        let (c, nb, h, w) = shape;
        let mut dx = FeatureMap::zeros(c, nb, h, w);
        let k = self.kernel;
        let cols_n = nb * ho * wo;
        let pad = self.padding as isize;
        let stride = self.stride as isize;
        let plane = h * w;
        for ci in 0..c {
            let dst_c = &mut dx.data[ci * nb * plane..(ci + 1) * nb * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    let mut idx = 0;
                    for n in 0..nb {
                        let img = &mut dst_c[n * plane..(n + 1) * plane];
                        for oy in 0..ho as isize {
                            let iy = oy * stride + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                idx += wo;
                                continue;
                            }
                            let line = &mut img[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..wo as isize {
                                let ix = ox * stride + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    line[ix as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> FeatureMap {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (ho, wo) = self.out_size(x.height, x.width);
        let cols = self.im2col(x, ho, wo);
        let kk = self.in_channels * self.kernel * self.kernel;
        let n = x.batch * ho * wo;
        let mut out = FeatureMap::zeros(self.out_channels, x.batch, ho, wo);
        gemm(self.out_channels, kk, n, &self.weight.value, false, &cols, false, 0.0, &mut out.data);
        self.cache = match mode {
            Mode::Train => Some(ConvCache {
                cols,
                in_shape: (x.channels, x.batch, x.height, x.width),
                out_hw: (ho, wo),
            }),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let cache = self.cache.take().expect("conv backward without train-mode forward");
        let (ho, wo) = cache.out_hw;
        let kk = self.in_channels * self.kernel * self.kernel;
        let n = cache.in_shape.1 * ho * wo;
        gemm(self.out_channels, n, kk, &grad.data, false, &cache.cols, true, 1.0, &mut self.weight.grad);
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, self.out_channels, n, &self.weight.value, true, &grad.data, false, 0.0, &mut dcols);
        self.col2im(&dcols, cache.in_shape, ho, wo)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<NormCache>,
}

#[derive(Clone, Debug)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> FeatureMap {
        assert_eq!(x.channels, self.channels, "batch-norm channels");
        let len = x.channel_len();
        let mut out = x.clone();
        match mode {
            Mode::Eval => {
                for c in 0..self.channels {
                    let scale = self.gamma.value[c] / (self.running_var[c] + self.eps).sqrt();
                    let shift = self.beta.value[c] - self.running_mean[c] * scale;
                    for v in &mut out.data[c * len..(c + 1) * len] {
                        *v = *v * scale + shift;
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let mut xhat = vec![0.0; x.data.len()];
                let mut inv_std = vec![0.0; self.channels];
                for c in 0..self.channels {
                    let src = &x.data[c * len..(c + 1) * len];
                    let mean = src.iter().sum::<f64>() / len as f64;
                    let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
                    let istd = 1.0 / (var + self.eps).sqrt();
                    inv_std[c] = istd;
                    let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                    let xh = &mut xhat[c * len..(c + 1) * len];
                    let dst = &mut out.data[c * len..(c + 1) * len];
                    for ((h, o), s) in xh.iter_mut().zip(dst.iter_mut()).zip(src) {
                        *h = (s - mean) * istd;
                        *o = *h * g + b;
                    }
                    let unbiased = if len > 1 { var * len as f64 / (len - 1) as f64 } else { var };
                    self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean;
                    self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * unbiased;
                }
                self.cache = Some(NormCache { xhat, inv_std });
            }
        }
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let cache = self.cache.take().expect("batch-norm backward without train-mode forward");
        let len = grad.channel_len();
        let m = len as f64;
        let mut dx = grad.clone();
        for c in 0..self.channels {
            let dy = &grad.data[c * len..(c + 1) * len];
            let xh = &cache.xhat[c * len..(c + 1) * len];
            let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
            for (d, h) in dy.iter().zip(xh) {
                sum_dy += d;
                sum_dy_xh += d * h;
            }
            self.gamma.grad[c] += sum_dy_xh;
            self.beta.grad[c] += sum_dy;
            let k = self.gamma.value[c] * cache.inv_std[c] / m;
            for ((o, d), h) in dx.data[c * len..(c + 1) * len].iter_mut().zip(dy).zip(xh) {
                *o = k * (m * d - sum_dy - h * sum_dy_xh);
            }
        }
        dx
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> FeatureMap {
        let mut out = x.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.mask = match mode {
            Mode::Train => Some(x.data.iter().map(|v| *v > 0.0).collect()),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let mask = self.mask.take().expect("relu backward without train-mode forward");
        let mut dx = grad.clone();
        for (d, keep) in dx.data.iter_mut().zip(mask) {
            if !keep {
                *d = 0.0;
            }
        }
        dx
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> FeatureMap {
        let (ho, wo) = (x.height / 2, x.width / 2);
        let mut out = FeatureMap::zeros(x.channels, x.batch, ho, wo);
        let mut argmax = vec![0usize; out.data.len()];
        let planes = x.channels * x.batch;
        for p in 0..planes {
            let src = p * x.plane();
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = src + (2 * oy) * x.width + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = src + (2 * oy + dy) * x.width + 2 * ox + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    out.data[o] = x.data[best];
                    argmax[o] = best;
                }
            }
        }
        self.cache = match mode {
            Mode::Train => Some((argmax, (x.channels, x.batch, x.height, x.width))),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let (argmax, (c, n, h, w)) = self.cache.take().expect("pool backward without train-mode forward");
        let mut dx = FeatureMap::zeros(c, n, h, w);
        for (g, &i) in grad.data.iter().zip(&argmax) {
            dx.data[i] += g;
        }
        dx
    }
}

#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    in_hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> FeatureMap {
        let plane = x.plane();
        let data = x
            .data
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        self.in_hw = match mode {
            Mode::Train => Some((x.height, x.width)),
            Mode::Eval => None,
        };
        FeatureMap::from_vec(x.channels, x.batch, 1, 1, data)
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let (h, w) = self.in_hw.take().expect("pool backward without train-mode forward");
        let plane = (h * w) as f64;
        let data = grad
            .data
            .iter()
            .flat_map(|g| std::iter::repeat_n(g / plane, h * w))
            .collect();
        FeatureMap::from_vec(grad.channels, grad.batch, h, w, data)
    }
}

/// Fully connected layer on pooled features (`[in, batch, 1, 1]` → `[out, batch, 1, 1]`).
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Vec<f64>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        // Xavier-normal weights, zero bias.
        let std = (2.0 / (in_features + out_features) as f64).sqrt();
        Self {
            in_features,
            out_features,
            weight: Param::normal(vec![out_features, in_features], std, rng),
            bias: Param::filled(vec![out_features], 0.0),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> FeatureMap {
        assert_eq!(x.plane(), 1, "linear expects pooled features");
        assert_eq!(x.channels, self.in_features, "linear input width");
        let n = x.batch;
        let mut out = FeatureMap::zeros(self.out_features, n, 1, 1);
        for (o, row) in out.data.chunks_exact_mut(n).zip(&self.bias.value) {
            o.fill(*row);
        }
        gemm(self.out_features, self.in_features, n, &self.weight.value, false, &x.data, false, 1.0, &mut out.data);
        self.input = match mode {
            Mode::Train => Some(x.data.clone()),
            Mode::Eval => None,
        };
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let input = self.input.take().expect("linear backward without train-mode forward");
        let n = grad.batch;
        gemm(self.out_features, n, self.in_features, &grad.data, false, &input, true, 1.0, &mut self.weight.grad);
        for (b, g) in self.bias.grad.iter_mut().zip(grad.data.chunks_exact(n)) {
            *b += g.iter().sum::<f64>();
        }
        let mut dx = FeatureMap::zeros(self.in_features, n, 1, 1);
        gemm(self.in_features, self.out_features, n, &self.weight.value, true, &grad.data, false, 0.0, &mut dx.data);
        dx
    }
}

/// Pre-activation wide residual block: `BN-ReLU-conv3x3-BN-ReLU-conv3x3` plus an
/// identity (or 1x1 projection) shortcut.
#[derive(Clone, Debug)]
pub struct WideBlock {
    pub bn1: BatchNorm2d,
    pub relu1: Relu,
    pub conv1: Conv2d,
    pub bn2: BatchNorm2d,
    pub relu2: Relu,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl WideBlock {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (in_channels != out_channels || stride != 1)
            .then(|| Conv2d::new(in_channels, out_channels, 1, stride, 0, rng));
        Self {
            bn1: BatchNorm2d::new(in_channels),
            relu1: Relu::default(),
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, rng),
            bn2: BatchNorm2d::new(out_channels),
            relu2: Relu::default(),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, rng),
            shortcut,
        }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> FeatureMap {
        let act = self.relu1.forward(&self.bn1.forward(x, mode), mode);
        let h = self.conv1.forward(&act, mode);
        let h = self.relu2.forward(&self.bn2.forward(&h, mode), mode);
        let mut out = self.conv2.forward(&h, mode);
        let skip = match &mut self.shortcut {
            Some(proj) => proj.forward(&act, mode),
            None => x.clone(),
        };
        for (o, s) in out.data.iter_mut().zip(&skip.data) {
            *o += s;
        }
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let dh = self.conv2.backward(grad);
        let dh = self.bn2.backward(&self.relu2.backward(&dh));
        let mut dact = self.conv1.backward(&dh);
        match &mut self.shortcut {
            Some(proj) => {
                let ds = proj.backward(grad);
                for (a, s) in dact.data.iter_mut().zip(&ds.data) {
                    *a += s;
                }
                self.bn1.backward(&self.relu1.backward(&dact))
            }
            None => {
                let mut dx = self.bn1.backward(&self.relu1.backward(&dact));
                for (d, g) in dx.data.iter_mut().zip(&grad.data) {
                    *d += g;
                }
                dx
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Norm(BatchNorm2d),
    Relu(Relu),
    MaxPool(MaxPool2),
    AvgPool(GlobalAvgPool),
    Linear(Linear),
    Wide(WideBlock),
}

impl Layer {
    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> FeatureMap {
        match self {
            Layer::Conv(l) => l.forward(x, mode),
            Layer::Norm(l) => l.forward(x, mode),
            Layer::Relu(l) => l.forward(x, mode),
            Layer::MaxPool(l) => l.forward(x, mode),
            Layer::AvgPool(l) => l.forward(x, mode),
            Layer::Linear(l) => l.forward(x, mode),
            Layer::Wide(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::Norm(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::MaxPool(l) => l.backward(grad),
            Layer::AvgPool(l) => l.backward(grad),
            Layer::Linear(l) => l.backward(grad),
            Layer::Wide(l) => l.backward(grad),
        }
    }

    fn visit(&self, prefix: &str, v: &mut dyn StateVisitor) {
        fn norm(prefix: &str, l: &BatchNorm2d, v: &mut dyn StateVisitor) {
            v.param(&format!("{prefix}.gamma"), &l.gamma);
            v.param(&format!("{prefix}.beta"), &l.beta);
            v.buffer(&format!("{prefix}.running_mean"), &[l.channels], &l.running_mean);
            v.buffer(&format!("{prefix}.running_var"), &[l.channels], &l.running_var);
        }
        match self {
            Layer::Conv(l) => v.param(&format!("{prefix}.weight"), &l.weight),
            Layer::Norm(l) => norm(prefix, l, v),
            Layer::Linear(l) => {
                v.param(&format!("{prefix}.weight"), &l.weight);
                v.param(&format!("{prefix}.bias"), &l.bias);
            }
            Layer::Wide(b) => {
                norm(&format!("{prefix}.bn1"), &b.bn1, v);
                v.param(&format!("{prefix}.conv1.weight"), &b.conv1.weight);
                norm(&format!("{prefix}.bn2"), &b.bn2, v);
                v.param(&format!("{prefix}.conv2.weight"), &b.conv2.weight);
                if let Some(s) = &b.shortcut {
                    v.param(&format!("{prefix}.shortcut.weight"), &s.weight);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::AvgPool(_) => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, v: &mut dyn StateVisitorMut) {
        fn norm(prefix: &str, l: &mut BatchNorm2d, v: &mut dyn StateVisitorMut) {
            v.param(&format!("{prefix}.gamma"), &mut l.gamma);
            v.param(&format!("{prefix}.beta"), &mut l.beta);
            let shape = [l.channels];
            v.buffer(&format!("{prefix}.running_mean"), &shape, &mut l.running_mean);
            v.buffer(&format!("{prefix}.running_var"), &shape, &mut l.running_var);
        }
        match self {
            Layer::Conv(l) => v.param(&format!("{prefix}.weight"), &mut l.weight),
            Layer::Norm(l) => norm(prefix, l, v),
            Layer::Linear(l) => {
                v.param(&format!("{prefix}.weight"), &mut l.weight);
                v.param(&format!("{prefix}.bias"), &mut l.bias);
            }
            Layer::Wide(b) => {
                norm(&format!("{prefix}.bn1"), &mut b.bn1, v);
                v.param(&format!("{prefix}.conv1.weight"), &mut b.conv1.weight);
                norm(&format!("{prefix}.bn2"), &mut b.bn2, v);
                v.param(&format!("{prefix}.conv2.weight"), &mut b.conv2.weight);
                if let Some(s) = &mut b.shortcut {
                    v.param(&format!("{prefix}.shortcut.weight"), &mut s.weight);
                }
            }
            Layer::Relu(_) | Layer::MaxPool(_) | Layer::AvgPool(_) => {}
        }
    }
}

/// An ordered stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &FeatureMap, mode: Mode) -> FeatureMap {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode);
        }
        h
    }

    pub fn backward(&mut self, grad: &FeatureMap) -> FeatureMap {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    pub fn visit(&self, prefix: &str, v: &mut dyn StateVisitor) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), v);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, v: &mut dyn StateVisitorMut) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), v);
        }
    }
}
