//! The five layer kinds and their exact backward rules.

use super::NetError;
use crate::linalg::Tensor;
use rand::rngs::StdRng;
use rand::Rng;

/// Uniform fan-scaled initialization: range +-sqrt(6 / (fan_in + fan_out)).
fn init_uniform(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut StdRng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Fully connected layer: `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
    pub gw: Tensor,
    pub gb: Tensor,
    cache_x: Option<Tensor>,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut StdRng) -> Self {
        Dense {
            w: init_uniform(input, output, input, output, rng),
            b: Tensor::zeros(1, output),
            gw: Tensor::zeros(input, output),
            gb: Tensor::zeros(1, output),
            cache_x: None,
        }
    }

    pub fn input_width(&self) -> usize {
        self.w.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NetError> {
        if x.cols() != self.w.rows() {
            return Err(NetError::ShapeChain {
                layer: 0,
                got: x.shape(),
                want: self.w.rows(),
            });
        }
        let mut y = x.matmul(&self.w).expect("width checked");
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                y.set(r, c, y.get(r, c) + self.b.get(0, c));
            }
        }
        self.cache_x = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor, NetError> {
        let x = self.cache_x.as_ref().ok_or(NetError::BackwardBeforeForward)?;
        if grad_y.shape() != (x.rows(), self.w.cols()) {
            return Err(NetError::GradShape {
                got: grad_y.shape(),
                want: (x.rows(), self.w.cols()),
            });
        }
        let gw = x.transpose().matmul(grad_y).expect("shapes cached");
        self.gw = self.gw.add(&gw).expect("shape fixed");
        for r in 0..grad_y.rows() {
            for c in 0..grad_y.cols() {
                self.gb.set(0, c, self.gb.get(0, c) + grad_y.get(r, c));
            }
        }
        Ok(grad_y.matmul(&self.w.transpose()).expect("shapes cached"))
    }
}

/// Valid-padding, stride-1 convolution over row-per-sample inputs laid out
/// channel-major as `in_ch * height * width`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
    /// out_ch x (in_ch * kernel * kernel)
    pub w: Tensor,
    pub b: Tensor,
    pub gw: Tensor,
    pub gb: Tensor,
    cache_cols: Option<Vec<Tensor>>,
    cache_rows: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        height: usize,
        width: usize,
        rng: &mut StdRng,
    ) -> Self {
        assert!(kernel <= height && kernel <= width, "kernel exceeds input");
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            height,
            width,
            w: init_uniform(out_ch, in_ch * kernel * kernel, fan_in, fan_out, rng),
            b: Tensor::zeros(1, out_ch),
            gw: Tensor::zeros(out_ch, in_ch * kernel * kernel),
            gb: Tensor::zeros(1, out_ch),
            cache_cols: None,
            cache_rows: 0,
        }
    }

    pub fn out_height(&self) -> usize {
        self.height - self.kernel + 1
    }

    pub fn out_width(&self) -> usize {
        self.width - self.kernel + 1
    }

    pub fn input_width(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    pub fn output_width(&self) -> usize {
        self.out_ch * self.out_height() * self.out_width()
    }

    /// Patch matrix: (in_ch * k * k) rows, (oh * ow) columns.
    fn im2col(&self, sample: &[f64]) -> Tensor {
        let (k, oh, ow) = (self.kernel, self.out_height(), self.out_width());
        let mut cols = Tensor::zeros(self.in_ch * k * k, oh * ow);
        for ch in 0..self.in_ch {
            let plane = &sample[ch * self.height * self.width..];
            for kr in 0..k {
                for kc in 0..k {
                    let row = ch * k * k + kr * k + kc;
                    for or_ in 0..oh {
                        for oc in 0..ow {
                            cols.set(row, or_ * ow + oc, plane[(or_ + kr) * self.width + oc + kc]);
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NetError> {
        if x.cols() != self.input_width() {
            return Err(NetError::ShapeChain {
                layer: 0,
                got: x.shape(),
                want: self.input_width(),
            });
        }
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = Tensor::zeros(x.rows(), self.output_width());
        let mut cached = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let cols = self.im2col(x.row(r));
            let y = self.w.matmul(&cols).expect("patch shapes fixed");
            for ch in 0..self.out_ch {
                for p in 0..oh * ow {
                    out.set(r, ch * oh * ow + p, y.get(ch, p) + self.b.get(0, ch));
                }
            }
            cached.push(cols);
        }
        self.cache_cols = Some(cached);
        self.cache_rows = x.rows();
        Ok(out)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor, NetError> {
        let cols_per_sample = self
            .cache_cols
            .as_ref()
            .ok_or(NetError::BackwardBeforeForward)?;
        if grad_y.shape() != (self.cache_rows, self.output_width()) {
            return Err(NetError::GradShape {
                got: grad_y.shape(),
                want: (self.cache_rows, self.output_width()),
            });
        }
        let (k, oh, ow) = (self.kernel, self.out_height(), self.out_width());
        let mut grad_x = Tensor::zeros(self.cache_rows, self.input_width());
        for r in 0..self.cache_rows {
            let gy = Tensor::from_vec(self.out_ch, oh * ow, grad_y.row(r).to_vec())
                .expect("row is out_ch*oh*ow");
            let cols = &cols_per_sample[r];
            let gw = gy.matmul(&cols.transpose()).expect("shapes cached");
            self.gw = self.gw.add(&gw).expect("shape fixed");
            for ch in 0..self.out_ch {
                let mut s = 0.0;
                for p in 0..oh * ow {
                    s += gy.get(ch, p);
                }
                self.gb.set(0, ch, self.gb.get(0, ch) + s);
            }
            // col2im scatter of W^T gy.
            let gcols = self.w.transpose().matmul(&gy).expect("shapes cached");
            let row_out = grad_x.data_mut();
            let base = r * self.in_ch * self.height * self.width;
            for ch in 0..self.in_ch {
                for kr in 0..k {
                    for kc in 0..k {
                        let crow = ch * k * k + kr * k + kc;
                        for or_ in 0..oh {
                            for oc in 0..ow {
                                let idx = base
                                    + ch * self.height * self.width
                                    + (or_ + kr) * self.width
                                    + (oc + kc);
                                row_out[idx] += gcols.get(crow, or_ * ow + oc);
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_x)
    }
}

/// Rectifier; the subgradient at exactly 0 is defined as 0.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache_mask: Option<Tensor>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NetError> {
        let mask = Tensor::from_fn(x.rows(), x.cols(), |r, c| if x.get(r, c) > 0.0 { 1.0 } else { 0.0 });
        let y = x.hadamard(&mask).expect("same shape");
        self.cache_mask = Some(mask);
        Ok(y)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor, NetError> {
        let mask = self.cache_mask.as_ref().ok_or(NetError::BackwardBeforeForward)?;
        if grad_y.shape() != mask.shape() {
            return Err(NetError::GradShape { got: grad_y.shape(), want: mask.shape() });
        }
        Ok(grad_y.hadamard(mask).expect("same shape"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    cache_y: Option<Tensor>,
}

impl Sigmoid {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NetError> {
        let y = Tensor::from_fn(x.rows(), x.cols(), |r, c| 1.0 / (1.0 + (-x.get(r, c)).exp()));
        self.cache_y = Some(y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor, NetError> {
        let y = self.cache_y.as_ref().ok_or(NetError::BackwardBeforeForward)?;
        if grad_y.shape() != y.shape() {
            return Err(NetError::GradShape { got: grad_y.shape(), want: y.shape() });
        }
        Ok(Tensor::from_fn(y.rows(), y.cols(), |r, c| {
            let s = y.get(r, c);
            grad_y.get(r, c) * s * (1.0 - s)
        }))
    }
}

/// Shape bookkeeping marker between convolutional and dense stages. Inputs
/// are already row-per-sample flat vectors, so this is the identity map.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    seen: bool,
}

impl Flatten {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NetError> {
        self.seen = true;
        Ok(x.clone())
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<Tensor, NetError> {
        if !self.seen {
            return Err(NetError::BackwardBeforeForward);
        }
        Ok(grad_y.clone())
    }
}

/// A differentiable unit: parameters, gradient accumulators, forward cache.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu(Relu),
    Sigmoid(Sigmoid),
    Flatten(Flatten),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NetError> {
        match self {
            Layer::Dense(l) => l.forward(x),
            Layer::Conv2d(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::Sigmoid(l) => l.forward(x),
            Layer::Flatten(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NetError> {
        match self {
            Layer::Dense(l) => l.backward(grad),
            Layer::Conv2d(l) => l.backward(grad),
            Layer::Relu(l) => l.backward(grad),
            Layer::Sigmoid(l) => l.backward(grad),
            Layer::Flatten(l) => l.backward(grad),
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor, &Tensor)) {
        match self {
            Layer::Dense(l) => {
                f(&mut l.w, &l.gw);
                f(&mut l.b, &l.gb);
            }
            Layer::Conv2d(l) => {
                f(&mut l.w, &l.gw);
                f(&mut l.b, &l.gb);
            }
            Layer::Relu(_) | Layer::Sigmoid(_) | Layer::Flatten(_) => {}
        }
    }

    pub fn zero_grads(&mut self) {
        match self {
            Layer::Dense(l) => {
                l.gw = Tensor::zeros(l.gw.rows(), l.gw.cols());
                l.gb = Tensor::zeros(1, l.gb.cols());
            }
            Layer::Conv2d(l) => {
                l.gw = Tensor::zeros(l.gw.rows(), l.gw.cols());
                l.gb = Tensor::zeros(1, l.gb.cols());
            }
            _ => {}
        }
    }

    pub fn kind_tag(&self) -> u8 {
        match self {
            Layer::Dense(_) => 0,
            Layer::Conv2d(_) => 1,
            Layer::Relu(_) => 2,
            Layer::Sigmoid(_) => 3,
            Layer::Flatten(_) => 4,
        }
    }
}
