use rand::Rng;

use super::{Graph, Mode, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// `floor((input + 2 * pad - kernel) / stride) + 1`, rejecting non-positive
/// results.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Shape("kernel and stride must be positive".into()));
    }
    let span = input + 2 * pad;
    if span < kernel {
        return Err(Error::Shape(format!(
            "non-positive output extent: input {input}, kernel {kernel}, pad {pad}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Concat,
    Softmax,
}

impl LayerSpec {
    pub fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: (k, k),
            stride: (stride, stride),
            padding: (pad, pad),
            bias: true,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::BatchNorm { channels, eps: 1e-5, momentum: 0.1 }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::GlobalAvgPool => "global_avgpool",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Concat => "concat",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::BatchNorm { eps, .. } if *eps <= 0.0 => {
                Err(Error::InvalidArgument("batchnorm eps must be > 0".into()))
            }
            LayerSpec::Conv2d { kernel, stride, .. }
                if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 =>
            {
                Err(Error::InvalidArgument("conv kernel and stride must be positive".into()))
            }
            LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride }
                if *kernel == 0 || *stride == 0 =>
            {
                Err(Error::InvalidArgument("pool kernel and stride must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Output shape for the given input shapes, without touching any data.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        self.validate()?;
        let x = inputs
            .first()
            .ok_or_else(|| Error::Shape(format!("{} needs an input", self.kind())))?;
        let need_rank = |r: usize| -> Result<()> {
            if x.len() != r {
                return Err(Error::Shape(format!("{} expects rank {r}, got {x:?}", self.kind())));
            }
            Ok(())
        };
        match self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, .. } => {
                need_rank(4)?;
                if x[1] != *in_channels {
                    return Err(Error::Shape(format!(
                        "conv2d expects {in_channels} channels, got {}",
                        x[1]
                    )));
                }
                Ok(vec![
                    x[0],
                    *out_channels,
                    conv_out_extent(x[2], kernel.0, stride.0, padding.0)?,
                    conv_out_extent(x[3], kernel.1, stride.1, padding.1)?,
                ])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if x.len() < 2 || x[1] != *channels {
                    return Err(Error::Shape(format!("batchnorm({channels}) on {x:?}")));
                }
                Ok(x.to_vec())
            }
            LayerSpec::Relu => Ok(x.to_vec()),
            LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                need_rank(4)?;
                Ok(vec![
                    x[0],
                    x[1],
                    conv_out_extent(x[2], *kernel, *stride, 0)?,
                    conv_out_extent(x[3], *kernel, *stride, 0)?,
                ])
            }
            LayerSpec::GlobalAvgPool => {
                need_rank(4)?;
                Ok(vec![x[0], x[1]])
            }
            LayerSpec::Linear { in_features, out_features } => {
                need_rank(2)?;
                if x[1] != *in_features {
                    return Err(Error::Shape(format!("linear expects {in_features} features, got {}", x[1])));
                }
                Ok(vec![x[0], *out_features])
            }
            LayerSpec::Concat => {
                let mut out = x.to_vec();
                for s in &inputs[1..] {
                    if s.len() != x.len() || s[0] != x[0] || s[2..] != x[2..] {
                        return Err(Error::Shape(format!("concat {s:?} with {x:?}")));
                    }
                    out[1] += s[1];
                }
                Ok(out)
            }
            LayerSpec::Softmax => {
                need_rank(2)?;
                Ok(x.to_vec())
            }
        }
    }
}

/// A layer spec bound to its tensors in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    /// conv/linear: `[weight, bias?]`; batchnorm: `[gamma, beta, mean, var]`.
    pub params: Vec<ParamId>,
}

impl Layer {
    /// Allocate and initialise this layer's parameters under `name`.
    pub fn build<T: Scalar, R: Rng>(
        spec: LayerSpec,
        name: &str,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        match &spec {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, bias, .. } => {
                let fan_in = in_channels * kernel.0 * kernel.1;
                params.push(store.add_he(
                    &format!("{name}.w"),
                    &[*out_channels, *in_channels, kernel.0, kernel.1],
                    fan_in,
                    rng,
                )?);
                if *bias {
                    params.push(store.add(
                        &format!("{name}.b"),
                        Tensor::zeros(&[*out_channels]),
                        ParamKind::Trainable,
                    )?);
                }
            }
            LayerSpec::Linear { in_features, out_features } => {
                params.push(store.add_he(
                    &format!("{name}.w"),
                    &[*out_features, *in_features],
                    *in_features,
                    rng,
                )?);
                params.push(store.add(
                    &format!("{name}.b"),
                    Tensor::zeros(&[*out_features]),
                    ParamKind::Trainable,
                )?);
            }
            LayerSpec::BatchNorm { channels, .. } => {
                let c = *channels;
                params.push(store.add(&format!("{name}.gamma"), Tensor::full(&[c], T::one()), ParamKind::Trainable)?);
                params.push(store.add(&format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Trainable)?);
                params.push(store.add(&format!("{name}.mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?);
                params.push(store.add(&format!("{name}.var"), Tensor::full(&[c], T::one()), ParamKind::Buffer)?);
            }
            _ => {}
        }
        Ok(Layer { spec, params })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        inputs: &[Var],
        mode: Mode,
    ) -> Result<Var> {
        layer_forward(g, &self.spec, inputs, &self.params, store, mode)
    }

    /// Eval-mode forward against a shared store.
    pub fn infer<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &[Var]) -> Result<Var> {
        layer_infer(g, &self.spec, inputs, &self.params, store)
    }
}

/// Parameter access for a forward pass: mutable in train mode (batchnorm
/// running statistics are updated), shared for inference.
pub enum Params<'a, T = f32> {
    Mut(&'a mut ParamStore<T>, Mode),
    Shared(&'a ParamStore<T>),
}

impl<T: Scalar> Params<'_, T> {
    pub fn mode(&self) -> Mode {
        match self {
            Params::Mut(_, m) => *m,
            Params::Shared(_) => Mode::Eval,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        match self {
            Params::Mut(s, _) => s,
            Params::Shared(s) => s,
        }
    }

    pub fn apply(&mut self, layer: &Layer, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        match self {
            Params::Mut(s, m) => layer.forward(g, s, inputs, *m),
            Params::Shared(s) => layer.infer(g, s, inputs),
        }
    }
}

/// Run one layer of the given kind on `inputs`, recording it in `g`. In
/// train mode batchnorm running statistics are written back to `store`.
pub fn layer_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &LayerSpec,
    inputs: &[Var],
    params: &[ParamId],
    store: &mut ParamStore<T>,
    mode: Mode,
) -> Result<Var> {
    let (out, stats) = forward_impl(g, spec, inputs, params, store, mode)?;
    if let Some((rm, rv)) = stats {
        store.set(params[2], rm)?;
        store.set(params[3], rv)?;
    }
    Ok(out)
}

/// Eval-mode [`layer_forward`] that never mutates the store.
pub fn layer_infer<T: Scalar>(
    g: &mut Graph<T>,
    spec: &LayerSpec,
    inputs: &[Var],
    params: &[ParamId],
    store: &ParamStore<T>,
) -> Result<Var> {
    forward_impl(g, spec, inputs, params, store, Mode::Eval).map(|r| r.0)
}

type RunningStats<T> = Option<(Tensor<T>, Tensor<T>)>;

fn forward_impl<T: Scalar>(
    g: &mut Graph<T>,
    spec: &LayerSpec,
    inputs: &[Var],
    params: &[ParamId],
    store: &ParamStore<T>,
    mode: Mode,
) -> Result<(Var, RunningStats<T>)> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|&v| g.shape(v).to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let expected = spec.output_shape(&shape_refs)?;
    let need = |n: usize| -> Result<()> {
        if params.len() < n {
            return Err(Error::InvalidArgument(format!("{} needs {n} parameter tensors", spec.kind())));
        }
        Ok(())
    };
    let x = inputs[0];
    let mut stats = None;
    let out = match spec {
        LayerSpec::Conv2d { stride, padding, bias, .. } => {
            need(if *bias { 2 } else { 1 })?;
            let w = g.param(store, params[0])?;
            let b = if *bias { Some(g.param(store, params[1])?) } else { None };
            g.conv2d(x, w, b, *stride, *padding)?
        }
        LayerSpec::BatchNorm { eps, momentum, .. } => {
            need(4)?;
            let gamma = g.param(store, params[0])?;
            let beta = g.param(store, params[1])?;
            let mut rm = store.get(params[2]).clone();
            let mut rv = store.get(params[3]).clone();
            let y = g.batchnorm(x, gamma, beta, &mut rm, &mut rv, T::lit(*eps), T::lit(*momentum), mode)?;
            if mode == Mode::Train {
                stats = Some((rm, rv));
            }
            y
        }
        LayerSpec::Relu => g.relu(x)?,
        LayerSpec::MaxPool { kernel, stride } => g.maxpool2d(x, *kernel, *stride)?,
        LayerSpec::AvgPool { kernel, stride } => g.avgpool2d(x, *kernel, *stride)?,
        LayerSpec::GlobalAvgPool => g.global_avgpool(x)?,
        LayerSpec::Linear { .. } => {
            need(2)?;
            let w = g.param(store, params[0])?;
            let b = g.param(store, params[1])?;
            g.linear(x, w, Some(b))?
        }
        LayerSpec::Concat => g.concat(inputs)?,
        LayerSpec::Softmax => g.softmax(x)?,
    };
    debug_assert_eq!(g.shape(out), expected.as_slice());
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn identity_pointwise_kernel_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::full(&[1, 1, 1, 1], 1.0), ParamKind::Trainable).unwrap();
        let spec = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            bias: false,
        };
        let x_t = Tensor::from_fn(&[2, 1, 5, 3], |i| (i as f32).sin());
        let mut g = Graph::new();
        let x = g.input(x_t.clone()).unwrap();
        let y = layer_forward(&mut g, &spec, &[x], &[w], &mut store, Mode::Eval).unwrap();
        assert_eq!(g.value(y), &x_t);
    }

    #[test]
    fn stem_shape_on_full_cc_image() {
        let spec = LayerSpec::conv(1, 16, 7, 2, 3);
        let out = spec.output_shape(&[&[1, 1, 2677, 1942]]).unwrap();
        assert_eq!(out, vec![1, 16, 1339, 971]);
    }

    #[test]
    fn global_avgpool_of_constant() {
        let mut store = ParamStore::<f32>::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 256, 42, 31], 0.37)).unwrap();
        let y = layer_forward(&mut g, &LayerSpec::GlobalAvgPool, &[x], &[], &mut store, Mode::Eval).unwrap();
        assert_eq!(g.shape(y), &[1, 256]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn non_positive_extent_is_rejected() {
        assert!(conv_out_extent(2, 5, 1, 1).is_err());
        assert!(LayerSpec::MaxPool { kernel: 4, stride: 2 }.output_shape(&[&[1, 1, 3, 3]]).is_err());
        assert!(LayerSpec::BatchNorm { channels: 2, eps: 0.0, momentum: 0.1 }.validate().is_err());
    }

    #[test]
    fn batchnorm_modes_use_batch_then_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let bn = Layer::build(LayerSpec::batchnorm(2), "bn", &mut store, &mut rng).unwrap();
        let xt = Tensor::from_fn(&[4, 2, 3, 3], |i| (i % 7) as f64 + 1.0);
        let mut g = Graph::new();
        let x = g.input(xt.clone()).unwrap();
        let y = bn.forward(&mut g, &mut store, &[x], Mode::Train).unwrap();
        // Batch-normalised output has zero mean per channel.
        let yv = g.value(y).data();
        let mean_c0: f64 = (0..4).flat_map(|n| yv[n * 18..n * 18 + 9].to_vec()).sum::<f64>() / 36.0;
        assert!(mean_c0.abs() < 1e-12);
        // Running mean moved 10% of the way toward the batch mean.
        assert!(store.get(bn.params[2]).data()[0] > 0.0);
        // Eval mode with fresh statistics (mean 0, var 1) is the affine map.
        let mut store2 = ParamStore::<f64>::new();
        let bn2 = Layer::build(LayerSpec::batchnorm(2), "bn", &mut store2, &mut rng).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.input(xt.clone()).unwrap();
        let y2 = bn2.forward(&mut g2, &mut store2, &[x2], Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
        for (a, b) in g2.value(y2).data().iter().zip(xt.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    fn rand_shape() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize)> {
        (1usize..3, 1usize..4, 3usize..20, 3usize..20, 1usize..4, 1usize..3, 0usize..2)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn forward_shapes_follow_closed_forms((n, c, h, w, k, s, p) in rand_shape()) {
            prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::<f32>::new();
            let specs = vec![
                LayerSpec::conv(c, 3, k, s, p),
                LayerSpec::batchnorm(c),
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: k.min(h).min(w), stride: s },
                LayerSpec::AvgPool { kernel: k.min(h).min(w), stride: s },
                LayerSpec::GlobalAvgPool,
            ];
            for (i, spec) in specs.into_iter().enumerate() {
                let layer = Layer::build(spec.clone(), &format!("l{i}"), &mut store, &mut rng).unwrap();
                let mut g = Graph::new();
                let x = g.input(Tensor::from_fn(&[n, c, h, w], |j| ((j * 7 % 5) as f32) - 2.0)).unwrap();
                let y = layer.forward(&mut g, &mut store, &[x], Mode::Train).unwrap();
                let want = spec.output_shape(&[&[n, c, h, w]]).unwrap();
                prop_assert_eq!(g.shape(y), want.as_slice());
                if let LayerSpec::Conv2d { .. } = spec {
                    prop_assert_eq!(want[2], (h + 2 * p - k) / s + 1);
                    prop_assert_eq!(want[3], (w + 2 * p - k) / s + 1);
                }
            }
            // Linear, concat, softmax on flat features.
            let lin = Layer::build(LayerSpec::Linear { in_features: c * 2, out_features: 5 }, "lin", &mut store, &mut rng).unwrap();
            let mut g = Graph::new();
            let a = g.input(Tensor::full(&[n, c], 0.5)).unwrap();
            let b = g.input(Tensor::full(&[n, c], 0.25)).unwrap();
            let cat = layer_forward(&mut g, &LayerSpec::Concat, &[a, b], &[], &mut store, Mode::Eval).unwrap();
            prop_assert_eq!(g.shape(cat), &[n, 2 * c]);
            let y = lin.forward(&mut g, &mut store, &[cat], Mode::Eval).unwrap();
            prop_assert_eq!(g.shape(y), &[n, 5]);
            let sm = layer_forward(&mut g, &LayerSpec::Softmax, &[y], &[], &mut store, Mode::Eval).unwrap();
            prop_assert_eq!(g.shape(sm), &[n, 5]);
        }
    }
}
