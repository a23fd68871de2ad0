//! Plain CNN pieces for the toy network, each with its adjoint.

use dualscan_core::params::Parameterized;
use dualscan_core::tensor::{conv2d, conv2d_backward, ConvKernel, ConvMode};
use dualscan_core::{Init, Real, Result, Tensor};

/// Same-padded convolution with bias; `k = 1` is a pointwise projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T = f32> {
    pub kernel: ConvKernel<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv<T> {
    /// He-normal weights scaled by `gain`, zero bias.
    pub fn new(c_in: usize, c_out: usize, k: usize, gain: f64, init: Init) -> Self {
        let sd = gain * (1.0 / (c_in * k * k) as f64).sqrt();
        let shape: Vec<usize> = if k == 1 { vec![c_out, c_in] } else { vec![c_out, c_in, k, k] };
        Self {
            kernel: ConvKernel::new(Tensor::from_fn(&shape, |_| T::lit(init() * sd))),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn mode(&self) -> ConvMode {
        if self.kernel.taps.rank() == 2 {
            ConvMode::Pointwise
        } else {
            ConvMode::Dense
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = conv2d(x, &self.kernel, self.mode())?;
        for (o, &b) in self.bias.data().iter().enumerate() {
            y.plane_mut(o).iter_mut().for_each(|v| *v += b);
        }
        Ok(y)
    }

    /// Accumulates weight and bias gradients into `g`, returns `dL/dx`.
    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, g: &mut Conv<T>) -> Result<Tensor<T>> {
        let (gx, gw) = conv2d_backward(x, &self.kernel, self.mode(), gy)?;
        g.kernel.taps.add_assign(&gw)?;
        for (o, gb) in g.bias.data_mut().iter_mut().enumerate() {
            *gb += gy.plane(o).iter().fold(T::zero(), |a, &v| a + v);
        }
        Ok(gx)
    }
}

impl<T: Real> Parameterized<T> for Conv<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w", &self.kernel.taps);
        f("b", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w", &mut self.kernel.taps);
        f("b", &mut self.bias);
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = y.data().iter().zip(g.data()).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect();
    Tensor::new(g.shape(), data).expect("same shape")
}

/// 2×2 max pooling, stride 2. Also returns the argmax (flat input index) per output.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        let p = x.plane(ch);
        for i in 0..ho {
            for j in 0..wo {
                // first maximum in row-major order wins ties
                let mut best = (2 * i) * w + 2 * j;
                for k in [(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1] {
                    if p[k] > p[best] {
                        best = k;
                    }
                }
                out.push(p[best]);
                idx.push((base + best) as u32);
            }
        }
    }
    Ok((Tensor::new(&[c, ho, wo], out)?, idx))
}

pub fn maxpool2_backward<T: Real>(idx: &[u32], gy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let mut gx = Tensor::zeros(in_shape);
    let d = gx.data_mut();
    for (&k, &g) in idx.iter().zip(gy.data()) {
        d[k as usize] += g;
    }
    gx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let p = x.plane(ch);
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = p[(i / 2) * w + j / 2];
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub fn upsample2_backward<T: Real>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, ho, wo) = g.dims3()?;
    let (h, w) = (ho / 2, wo / 2);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let p = g.plane(ch);
        for i in 0..ho {
            for j in 0..wo {
                out[ch * h * w + (i / 2) * w + j / 2] += p[i * wo + j];
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}
