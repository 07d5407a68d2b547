use super::kernels::{self, channel_affine_backward};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    GlobalAvgPool(Var),
    AvgPool {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    /// Scalar produced outside the engine with precomputed partials.
    Custom {
        inputs: Vec<Var>,
        partials: Vec<Vec<f32>>,
    },
}

/// Ordered record of executed ops and their outputs.
///
/// Ops append in execution order; [`Trace::backward`] walks them in reverse
/// exactly once. Gradients stay readable afterwards via [`Trace::grad`].
#[derive(Debug, Default)]
pub struct Trace {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last backward's loss w.r.t. `v`. `None` if `v` did not
    /// influence the loss or backward has not run.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = kernels::dense(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Dense { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = kernels::relu(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", "numel", x.numel(), y.numel()));
        }
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * y.data()[i]).ensure_finite("mul")?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Result<Var> {
        let x = self.value(input);
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * factor).ensure_finite("scale")?;
        Ok(self.push(out, Op::Scale(input, factor)))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(total as f32).ensure_finite("sum")?;
        Ok(self.push(out, Op::Sum(input)))
    }

    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let out = kernels::channel_affine(self.value(input), self.value(scale), self.value(shift))?;
        Ok(self.push(out, Op::ChannelAffine { input, scale, shift }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    pub fn avg_pool(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let out = kernels::avg_pool(self.value(input), kernel, stride)?;
        Ok(self.push(out, Op::AvgPool { input, kernel, stride }))
    }

    pub fn max_pool(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool(self.value(input), kernel, stride)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    /// Records a scalar computed elsewhere, together with its partial
    /// derivatives w.r.t. each input (same length as the input's data).
    pub fn custom(&mut self, inputs: Vec<Var>, value: f32, partials: Vec<Vec<f32>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::shape("custom", "partials", inputs.len(), partials.len()));
        }
        for (v, p) in inputs.iter().zip(&partials) {
            let n = self.value(*v).numel();
            if p.len() != n {
                return Err(Error::shape("custom", "partial length", n, p.len()));
            }
            if p.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "custom" });
            }
        }
        let out = Tensor::scalar(value).ensure_finite("custom")?;
        Ok(self.push(out, Op::Custom { inputs, partials }))
    }

    fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar `loss`. May be called once per trace.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TraceConsumed);
        }
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss(numel));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let out_shape = self.values[idx].shape().to_vec();
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let go = Tensor::new(out_shape, g.clone())?;
                    let r = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &go,
                        *stride,
                        *pad,
                    )?;
                    Self::accumulate(&mut grads, *input, r.input.data());
                    Self::accumulate(&mut grads, *weight, r.weight.data());
                    if let Some(b) = bias {
                        Self::accumulate(&mut grads, *b, r.bias.data());
                    }
                }
                Op::Dense { input, weight, bias } => {
                    let go = Tensor::new(out_shape, g.clone())?;
                    let r = kernels::dense_backward(self.value(*input), self.value(*weight), &go)?;
                    Self::accumulate(&mut grads, *input, r.input.data());
                    Self::accumulate(&mut grads, *weight, r.weight.data());
                    if let Some(b) = bias {
                        Self::accumulate(&mut grads, *b, r.bias.data());
                    }
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let gi: Vec<f32> = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    Self::accumulate(&mut grads, *input, &gi);
                }
                Op::Add(a, b) => {
                    Self::accumulate(&mut grads, *a, &g);
                    Self::accumulate(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<f32> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                    let gb: Vec<f32> = g.iter().zip(x).map(|(g, x)| g * x).collect();
                    Self::accumulate(&mut grads, *a, &ga);
                    Self::accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(input, factor) => {
                    let gi: Vec<f32> = g.iter().map(|g| g * factor).collect();
                    Self::accumulate(&mut grads, *input, &gi);
                }
                Op::Sum(input) => {
                    let gi = vec![g[0]; self.value(*input).numel()];
                    Self::accumulate(&mut grads, *input, &gi);
                }
                Op::ChannelAffine { input, scale, shift } => {
                    let go = Tensor::new(out_shape, g.clone())?;
                    let r = channel_affine_backward(self.value(*input), self.value(*scale), &go)?;
                    Self::accumulate(&mut grads, *input, r.input.data());
                    Self::accumulate(&mut grads, *scale, r.scale.data());
                    Self::accumulate(&mut grads, *shift, r.shift.data());
                }
                Op::GlobalAvgPool(input) => {
                    let x = self.value(*input);
                    let hw = x.dim(2) * x.dim(3);
                    let gi: Vec<f32> = (0..x.numel()).map(|i| g[i / hw] / hw as f32).collect();
                    Self::accumulate(&mut grads, *input, &gi);
                }
                Op::AvgPool { input, kernel, stride } => {
                    let x = self.value(*input);
                    let (h, w) = (x.dim(2), x.dim(3));
                    let (ho, wo) = (out_shape[2], out_shape[3]);
                    let norm = (kernel * kernel) as f32;
                    let mut gi = vec![0.0f32; x.numel()];
                    for (p, gplane) in g.chunks(ho * wo).enumerate() {
                        let base = p * h * w;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = gplane[oy * wo + ox] / norm;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        gi[base + (oy * stride + ky) * w + ox * stride + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *input, &gi);
                }
                Op::MaxPool { input, argmax } => {
                    let mut gi = vec![0.0f32; self.value(*input).numel()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        gi[src] += gv;
                    }
                    Self::accumulate(&mut grads, *input, &gi);
                }
                Op::Custom { inputs, partials } => {
                    for (v, p) in inputs.iter().zip(partials) {
                        let gi: Vec<f32> = p.iter().map(|d| d * g[0]).collect();
                        Self::accumulate(&mut grads, *v, &gi);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Runs the reverse pass of `trace` from `loss`.
pub fn backward(trace: &mut Trace, loss: Var) -> Result<()> {
    trace.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_ones() {
        let mut t = Trace::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f32 - 2.0));
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_sum_of_squares_gives_x() {
        let mut t = Trace::new();
        let data = Tensor::from_fn(&[5], |i| i as f32 * 0.5 - 1.0);
        let x = t.leaf(data.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let loss = t.scale(s, 0.5).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), data.data());
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Trace::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::TraceConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Trace::new();
        let x = t.leaf(Tensor::zeros(&[3]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(3))));
    }

    #[test]
    fn unrelated_values_have_no_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Trace::new();
        let x = t.leaf(Tensor::randn(&[4], 1.0, &mut rng));
        let y = t.leaf(Tensor::randn(&[4], 1.0, &mut rng));
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(y).is_none());
    }

    #[test]
    fn custom_partials_scale_with_upstream() {
        let mut t = Trace::new();
        let x = t.leaf(Tensor::from_fn(&[2], |i| i as f32));
        let c = t.custom(vec![x], 3.0, vec![vec![0.5, -1.0]]).unwrap();
        let loss = t.scale(c, 2.0).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, -2.0]);
    }
}
