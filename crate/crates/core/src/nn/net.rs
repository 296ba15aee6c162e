use rand::Rng;

use super::layers::{Conv2d, ConvTranspose2d, Layer, Linear, Upsample};
use super::params::ModelParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Activations recorded by a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input; `acts[i + 1]` is the output of layer `i`.
    acts: Vec<Tensor>,
    caches: Vec<Option<Vec<f32>>>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("non-empty trace")
    }

    pub fn into_output(mut self) -> Tensor {
        self.acts.pop().expect("non-empty trace")
    }
}

/// A chain of layers with its own parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
    params: ModelParams,
    in_c: usize,
}

impl Sequential {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Layer schedule as a compact string, e.g. `conv4s2p1:1>16|lrelu0.2`.
    pub fn schedule(&self) -> String {
        self.layers.iter().map(Layer::describe).collect::<Vec<_>>().join("|")
    }

    /// Output shape for an input of `(c, h, w)`.
    pub fn output_shape(&self, mut shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        if shape.0 != self.in_c {
            return Err(Error::Shape {
                op: "Sequential",
                left: format!("{} input channels", self.in_c),
                right: format!("{}", shape.0),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            shape = l.out_shape(shape).ok_or_else(|| Error::Shape {
                op: "Sequential",
                left: format!("layer {i} ({})", l.describe()),
                right: format!("input {shape:?}"),
            })?;
        }
        Ok(shape)
    }

    pub fn forward(&self, x: Tensor) -> Result<Trace> {
        self.output_shape((x.c, x.h, x.w))?;
        let p = self.params.data();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(x);
        for l in &self.layers {
            let (y, cache) = l.forward(p, acts.last().unwrap());
            acts.push(y);
            caches.push(cache);
        }
        Ok(Trace { acts, caches })
    }

    /// Forward pass without keeping intermediates.
    pub fn infer(&self, x: Tensor) -> Result<Tensor> {
        self.output_shape((x.c, x.h, x.w))?;
        let p = self.params.data();
        let mut cur = x;
        for l in &self.layers {
            cur = l.forward(p, &cur).0;
        }
        Ok(cur)
    }

    /// Accumulate parameter gradients into `grads` (same length as the
    /// parameter vector) and optionally return the input gradient.
    pub fn backward(&self, trace: &Trace, dy: Tensor, grads: &mut [f32], need_input_grad: bool) -> Option<Tensor> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer length");
        let p = self.params.data();
        let mut cur = dy;
        for i in (0..self.layers.len()).rev() {
            let need = i > 0 || need_input_grad;
            let dx = self.layers[i].backward(
                p,
                &trace.acts[i],
                &trace.acts[i + 1],
                trace.caches[i].as_deref(),
                &cur,
                grads,
                need,
            );
            cur = dx?;
        }
        Some(cur)
    }
}

/// Incremental constructor; parameters are initialized as layers are added.
pub struct SequentialBuilder<'r, R: Rng> {
    prefix: String,
    layers: Vec<Layer>,
    params: ModelParams,
    in_c: usize,
    c: usize,
    rng: &'r mut R,
}

impl<'r, R: Rng> SequentialBuilder<'r, R> {
    pub fn new(prefix: impl Into<String>, in_c: usize, rng: &'r mut R) -> Self {
        SequentialBuilder {
            prefix: prefix.into(),
            layers: Vec::new(),
            params: ModelParams::new(),
            in_c,
            c: in_c,
            rng,
        }
    }

    fn name(&self, what: &str) -> String {
        format!("{}.{}.{what}", self.prefix, self.layers.len())
    }

    /// Convolution with He-normal initialization.
    pub fn conv(mut self, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = self.c * k * k;
        let weight = self.params.add(self.name("weight"), &[out_c, fan_in]);
        let bias = self.params.add(self.name("bias"), &[out_c]);
        self.params
            .init_normal(weight, (2.0 / fan_in as f32).sqrt(), self.rng);
        self.layers.push(Layer::Conv(Conv2d {
            in_c: self.c,
            out_c,
            k,
            stride,
            pad,
            weight,
            bias,
        }));
        self.c = out_c;
        self
    }

    pub fn deconv(mut self, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let weight = self.params.add(self.name("weight"), &[self.c, out_c * k * k]);
        let bias = self.params.add(self.name("bias"), &[out_c]);
        // each output pixel sums about in_c * (k / stride)^2 taps
        let fan_in = (self.c * k * k) as f32 / (stride * stride) as f32;
        self.params.init_normal(weight, (2.0 / fan_in).sqrt(), self.rng);
        self.layers.push(Layer::Deconv(ConvTranspose2d {
            in_c: self.c,
            out_c,
            k,
            stride,
            pad,
            weight,
            bias,
        }));
        self.c = out_c;
        self
    }

    pub fn linear(mut self, out_f: usize) -> Self {
        let weight = self.params.add(self.name("weight"), &[out_f, self.c]);
        let bias = self.params.add(self.name("bias"), &[out_f]);
        self.params
            .init_normal(weight, (1.0 / self.c as f32).sqrt(), self.rng);
        self.layers.push(Layer::Linear(Linear {
            in_f: self.c,
            out_f,
            weight,
            bias,
        }));
        self.c = out_f;
        self
    }

    pub fn lrelu(mut self, slope: f32) -> Self {
        self.layers.push(Layer::LeakyRelu(slope));
        self
    }

    pub fn sigmoid(mut self) -> Self {
        self.layers.push(Layer::Sigmoid);
        self
    }

    pub fn gap(mut self) -> Self {
        self.layers.push(Layer::GlobalAvgPool);
        self
    }

    pub fn upsample(mut self, factor: usize) -> Self {
        if factor > 1 {
            self.layers.push(Layer::Upsample(Upsample { factor }));
        }
        self
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn build(self) -> Sequential {
        Sequential {
            layers: self.layers,
            params: self.params,
            in_c: self.in_c,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn loss_of(net: &Sequential, x: &Tensor, w: &[f32]) -> f64 {
        let y = net.infer(x.clone()).unwrap();
        y.data.iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    /// Central-difference check of `sum(w * net(x))` through every
    /// parametrized layer kind (smooth activations keep the check free of kinks).
    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut r = rng::rng(5);
        let net = SequentialBuilder::new("t", 2, &mut r)
            .conv(3, 4, 2, 1)
            .sigmoid()
            .deconv(2, 4, 2, 1)
            .upsample(2)
            .sigmoid()
            .conv(4, 3, 2, 1)
            .sigmoid()
            .gap()
            .linear(3)
            .build();
        let x = Tensor::from_data(2, 2, 8, 8, (0..256).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.4).collect());
        let trace = net.forward(x.clone()).unwrap();
        let out = trace.output().clone();
        assert_eq!((out.c, out.b, out.h, out.w), (3, 2, 1, 1));
        let wts: Vec<f32> = (0..out.len()).map(|i| 0.3 + 0.2 * i as f32).collect();
        let mut grads = vec![0.0; net.num_params()];
        let dx = net
            .backward(&trace, Tensor::from_data(3, 2, 1, 1, wts.clone()), &mut grads, true)
            .unwrap();

        let h = 1e-2f32;
        let mut probe = net.clone();
        for idx in (0..net.num_params()).step_by(7) {
            let orig = net.params().data()[idx];
            probe.params_mut().data_mut()[idx] = orig + h;
            let lp = loss_of(&probe, &x, &wts);
            probe.params_mut().data_mut()[idx] = orig - h;
            let lm = loss_of(&probe, &x, &wts);
            probe.params_mut().data_mut()[idx] = orig;
            let num = (lp - lm) / (2.0 * h as f64);
            let ana = grads[idx] as f64;
            assert!((num - ana).abs() <= 1e-3 * num.abs().max(ana.abs()) + 2e-5, "param {idx}: {num} vs {ana}");
        }
        for idx in (0..x.len()).step_by(11) {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let num = (loss_of(&net, &xp, &wts) - loss_of(&net, &xm, &wts)) / (2.0 * h as f64);
            let ana = dx.data[idx] as f64;
            assert!((num - ana).abs() <= 1e-3 * num.abs().max(ana.abs()) + 2e-5, "input {idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn leaky_relu_backward_scales_negative_side() {
        let mut r = rng::rng(2);
        let net = SequentialBuilder::new("t", 1, &mut r).lrelu(0.2).build();
        let x = Tensor::from_data(1, 1, 1, 4, vec![-2.0, -0.5, 0.5, 3.0]);
        let trace = net.forward(x).unwrap();
        assert_eq!(trace.output().data, vec![-0.4, -0.1, 0.5, 3.0]);
        let dx = net.backward(&trace, Tensor::from_data(1, 1, 1, 4, vec![1.0; 4]), &mut [], true).unwrap();
        assert_eq!(dx.data, vec![0.2, 0.2, 1.0, 1.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut r = rng::rng(1);
        let net = SequentialBuilder::new("t", 1, &mut r).conv(2, 4, 2, 1).build();
        assert!(net.forward(Tensor::zeros(2, 1, 8, 8)).is_err());
        assert!(net.forward(Tensor::zeros(1, 1, 2, 2)).is_ok());
        assert!(net.forward(Tensor::zeros(1, 1, 1, 1)).is_err());
        assert_eq!(net.schedule(), "conv4s2p1:1>2");
    }
}
