//! Network wiring: extractor, confidence head, attention gate, threshold
//! learner and scale head, each a [`Chain`] of primitive layers with a tape
//! of saved inputs for the backward pass.

use crate::error::{Error, Result};
use crate::grid::{downsample_avg, Grid, Tensor3};

use super::layers::{
    avg_pool_same_tensor, avg_pool_same_tensor_backward, conv2d, conv2d_backward, relu, relu_backward,
    transposed_conv2d, transposed_conv2d_backward, upsample_nearest, upsample_nearest_backward, ConvSpec,
};
use super::params::{he_normal, seeded_rng, Grads, ParamGroup, ParamId, ParamStore};
use super::ModelConfig;

#[derive(Debug, Clone)]
enum Op {
    Conv { weight: ParamId, bias: ParamId, spec: ConvSpec },
    Deconv { weight: ParamId, bias: ParamId, out_channels: usize },
    Relu,
    AvgPool(usize),
    Upsample(usize),
    /// `x + inner(x)`.
    Residual(Chain),
}

#[derive(Debug, Clone)]
enum Saved {
    Input(Tensor3),
    Inner(Vec<Saved>),
    Nothing,
}

#[derive(Debug, Clone, Default)]
struct Chain {
    ops: Vec<Op>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: rand_chacha::ChaCha8Rng,
    group: ParamGroup,
    counter: usize,
}

impl Builder<'_> {
    fn name(&mut self, kind: &str) -> String {
        self.counter += 1;
        format!("{}.{}.{}", self.group.prefix(), self.counter, kind)
    }

    fn conv(&mut self, spec: ConvSpec) -> Op {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let w = he_normal(&mut self.rng, spec.weight_len(), fan_in);
        let wname = self.name("conv.weight");
        let bname = wname.replace(".weight", ".bias");
        let shape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        let weight = self.store.register(wname, self.group, &shape, w);
        let bias = self.store.register(bname, self.group, &[spec.out_channels], vec![0.0; spec.out_channels]);
        Op::Conv { weight, bias, spec }
    }

    fn deconv(&mut self, in_channels: usize, out_channels: usize) -> Op {
        // each output pixel sees exactly one input pixel per input channel
        let w = he_normal(&mut self.rng, in_channels * out_channels * 4, in_channels);
        let wname = self.name("deconv.weight");
        let bname = wname.replace(".weight", ".bias");
        let weight = self.store.register(wname, self.group, &[in_channels, out_channels, 2, 2], w);
        let bias = self.store.register(bname, self.group, &[out_channels], vec![0.0; out_channels]);
        Op::Deconv {
            weight,
            bias,
            out_channels,
        }
    }
}

impl Chain {
    fn forward(&self, mut x: Tensor3, p: &ParamStore, mut tape: Option<&mut Vec<Saved>>) -> Result<Tensor3> {
        for op in &self.ops {
            let (next, saved) = match op {
                Op::Conv { weight, bias, spec } => {
                    let y = conv2d(&x, p.value(*weight), p.value(*bias), spec)?;
                    (y, Saved::Input(x))
                }
                Op::Deconv {
                    weight,
                    bias,
                    out_channels,
                } => {
                    let y = transposed_conv2d(&x, p.value(*weight), p.value(*bias), *out_channels, 2, 2)?;
                    (y, Saved::Input(x))
                }
                Op::Relu => {
                    let y = relu(&x);
                    (y, Saved::Input(x))
                }
                Op::AvgPool(window) => (avg_pool_same_tensor(&x, *window)?, Saved::Nothing),
                Op::Upsample(factor) => (upsample_nearest(&x, *factor), Saved::Nothing),
                Op::Residual(inner) => {
                    let mut inner_tape = tape.as_ref().map(|_| Vec::new());
                    let mut y = inner.forward(x.clone(), p, inner_tape.as_mut())?;
                    if !y.same_shape(&x) {
                        return Err(Error::shape("residual branch changes the tensor shape"));
                    }
                    y.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b);
                    (y, Saved::Inner(inner_tape.unwrap_or_default()))
                }
            };
            if let Some(t) = tape.as_deref_mut() {
                t.push(saved);
            }
            x = next;
        }
        Ok(x)
    }

    /// Consumes the tape in reverse, accumulating parameter gradients.
    /// Returns the gradient w.r.t. the chain input if requested.
    fn backward(
        &self,
        tape: Vec<Saved>,
        grad: Tensor3,
        p: &ParamStore,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Result<Option<Tensor3>> {
        if tape.len() != self.ops.len() {
            return Err(Error::State("tape does not match chain".into()));
        }
        let mut g = grad;
        let n = self.ops.len();
        for (k, (op, saved)) in self.ops.iter().zip(tape).enumerate().rev() {
            let need = need_input_grad || k > 0;
            g = match (op, saved) {
                (Op::Conv { weight, bias, spec }, Saved::Input(x)) => {
                    let r = conv2d_backward(&x, p.value(*weight), spec, &g, need)?;
                    grads.add(*weight, &r.d_weight);
                    grads.add(*bias, &r.d_bias);
                    match r.d_input {
                        Some(d) => d,
                        None => return Ok(None),
                    }
                }
                (
                    Op::Deconv {
                        weight,
                        bias,
                        out_channels,
                    },
                    Saved::Input(x),
                ) => {
                    let r = transposed_conv2d_backward(&x, p.value(*weight), *out_channels, &g, need)?;
                    grads.add(*weight, &r.d_weight);
                    grads.add(*bias, &r.d_bias);
                    match r.d_input {
                        Some(d) => d,
                        None => return Ok(None),
                    }
                }
                (Op::Relu, Saved::Input(x)) => relu_backward(&x, &g),
                (Op::AvgPool(window), Saved::Nothing) => avg_pool_same_tensor_backward(&g, *window)?,
                (Op::Upsample(factor), Saved::Nothing) => upsample_nearest_backward(&g, *factor),
                (Op::Residual(inner), Saved::Inner(inner_tape)) => {
                    let d_inner = inner
                        .backward(inner_tape, g.clone(), p, grads, true)?
                        .expect("input gradient requested");
                    let mut d = g;
                    d.data.iter_mut().zip(&d_inner.data).for_each(|(a, b)| *a += b);
                    d
                }
                _ => return Err(Error::State(format!("tape entry {k} of {n} has the wrong kind"))),
            };
        }
        Ok(need_input_grad.then_some(g))
    }
}

/// Full-resolution head outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    /// Confidence map, non-negative.
    pub confidence: Grid,
    /// Threshold learner output before the clipped activation.
    pub raw_threshold: Grid,
    /// Predicted half-diagonal head size per pixel.
    pub size: Grid,
}

/// Intermediates kept by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    extractor: Vec<Saved>,
    confidence: Vec<Saved>,
    threshold: Vec<Saved>,
    scale: Vec<Saved>,
    gate: Grid,
}

impl Cache {
    /// The 1/4-resolution attention gate applied to the features.
    pub fn gate(&self) -> &Grid {
        &self.gate
    }
}

/// Loss gradients w.r.t. each head output of one image.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub confidence: Grid,
    pub raw_threshold: Grid,
    pub size: Grid,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: ModelConfig,
    extractor: Chain,
    confidence: Chain,
    threshold: Chain,
    scale: Chain,
}

impl Network {
    /// Builds the network and registers freshly initialised parameters.
    pub fn new(config: ModelConfig) -> Result<(Network, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: seeded_rng(config.seed),
            group: ParamGroup::Extractor,
            counter: 0,
        };

        let mut extractor = Chain::default();
        let mut c = config.in_channels;
        for (&w, &s) in config.extractor_widths.iter().zip(&config.extractor_strides) {
            extractor.ops.push(b.conv(ConvSpec::new(c, w, 3).stride(s)));
            extractor.ops.push(Op::Relu);
            c = w;
        }
        let f = c;

        b.group = ParamGroup::Confidence;
        let [c1, c2] = config.confidence_widths;
        let confidence = Chain {
            ops: vec![
                b.conv(ConvSpec::new(f, c1, 1)),
                Op::Relu,
                b.deconv(c1, c1),
                Op::Relu,
                b.conv(ConvSpec::new(c1, c2, 3)),
                Op::Relu,
                b.deconv(c2, c2),
                Op::Relu,
                b.conv(ConvSpec::new(c2, 1, 1)),
                Op::Relu,
            ],
        };

        b.group = ParamGroup::Threshold;
        let [t1, t2, t3, t4] = config.threshold_widths;
        let win = config.threshold_window;
        let threshold = Chain {
            ops: vec![
                b.conv(ConvSpec::new(f, t1, 3)),
                Op::Relu,
                b.conv(ConvSpec::new(t1, t2, 3)),
                Op::Relu,
                b.conv(ConvSpec::new(t2, t3, 3)),
                Op::Relu,
                Op::Upsample(4),
                b.conv(ConvSpec::new(t3, t4, 3)),
                Op::Relu,
                Op::AvgPool(win),
                b.conv(ConvSpec::new(t4, 1, 1)),
                Op::AvgPool(win),
            ],
        };

        b.group = ParamGroup::Scale;
        let mut scale = Chain::default();
        let bottleneck = config.scale_bottleneck;
        for &d in &config.dilations {
            let inner = Chain {
                ops: vec![
                    b.conv(ConvSpec::new(f, bottleneck, 1)),
                    Op::Relu,
                    b.conv(ConvSpec::new(bottleneck, bottleneck, 3).dilation(d)),
                    Op::Relu,
                    b.conv(ConvSpec::new(bottleneck, f, 1)),
                ],
            };
            scale.ops.push(Op::Residual(inner));
            scale.ops.push(Op::Relu);
        }
        let su = config.scale_upsample_width;
        scale.ops.push(b.deconv(f, su));
        scale.ops.push(Op::Relu);
        scale.ops.push(b.deconv(su, 1));

        let net = Network {
            config,
            extractor,
            confidence,
            threshold,
            scale,
        };
        Ok((net, store))
    }

    /// Rebuilds the layer graph for `config` and checks that `store` holds
    /// exactly the tensors it expects.
    pub fn with_params(config: ModelConfig, store: &ParamStore) -> Result<(Network, ParamStore)> {
        let (net, mut fresh) = Network::new(config)?;
        fresh.load_values(store)?;
        Ok((net, fresh))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, image: &Tensor3) -> Result<()> {
        if image.channels != self.config.in_channels {
            return Err(Error::shape(format!(
                "image has {} channels, model expects {}",
                image.channels, self.config.in_channels
            )));
        }
        if image.height == 0 || image.width == 0 || image.height % 4 != 0 || image.width % 4 != 0 {
            return Err(Error::shape(format!(
                "image dims {}x{} must be positive multiples of 4",
                image.height, image.width
            )));
        }
        Ok(())
    }

    /// Forward pass keeping a backward cache.
    pub fn forward(&self, image: &Tensor3, p: &ParamStore) -> Result<(Outputs, Cache)> {
        self.run(image, p, None, true).map(|(o, c)| (o, c.expect("cache requested")))
    }

    /// Forward pass with an externally supplied attention gate instead of
    /// the one derived from the confidence map. Used for gradient checks.
    pub fn forward_with_gate(&self, image: &Tensor3, p: &ParamStore, gate: &Grid) -> Result<(Outputs, Cache)> {
        self.run(image, p, Some(gate), true).map(|(o, c)| (o, c.expect("cache requested")))
    }

    /// Forward pass without a cache. Reentrant: `p` is only read.
    pub fn infer(&self, image: &Tensor3, p: &ParamStore) -> Result<Outputs> {
        self.run(image, p, None, false).map(|(o, _)| o)
    }

    fn run(
        &self,
        image: &Tensor3,
        p: &ParamStore,
        gate_override: Option<&Grid>,
        keep: bool,
    ) -> Result<(Outputs, Option<Cache>)> {
        self.check_input(image)?;
        let mut tapes: [Vec<Saved>; 4] = Default::default();
        let [te, tc, tt, ts] = &mut tapes;
        let features = self.extractor.forward(image.clone(), p, keep.then_some(te))?;
        let confidence = self.confidence.forward(features.clone(), p, keep.then_some(tc))?.to_grid(0);

        let gate = match gate_override {
            Some(g) => g.clone(),
            None => downsample_avg(&confidence, 4)?,
        };
        if gate.dims() != (features.height, features.width) {
            return Err(Error::shape("attention gate does not match feature resolution"));
        }
        let filtered = apply_gate(&features, &gate);
        let raw_threshold = self.threshold.forward(filtered, p, keep.then_some(tt))?.to_grid(0);
        let size = self.scale.forward(features, p, keep.then_some(ts))?.to_grid(0);

        let outputs = Outputs {
            confidence,
            raw_threshold,
            size,
        };
        let cache = keep.then(|| {
            let [extractor, confidence, threshold, scale] = tapes;
            Cache {
                extractor,
                confidence,
                threshold,
                scale,
                gate,
            }
        });
        Ok((outputs, cache))
    }

    /// Backpropagates head-output gradients into a fresh [`Grads`]. The gate
    /// is a constant here: no gradient reaches the confidence map through it.
    pub fn backward(&self, cache: Cache, d: &OutputGrads, p: &ParamStore) -> Result<Grads> {
        self.backward_routed(cache, d, p, true)
    }

    /// Like [`Network::backward`]; with `size_into_extractor` off the size
    /// gradient updates the scale head only and stops at its input.
    pub fn backward_routed(
        &self,
        cache: Cache,
        d: &OutputGrads,
        p: &ParamStore,
        size_into_extractor: bool,
    ) -> Result<Grads> {
        let mut grads = p.new_grads();
        let Cache {
            extractor,
            confidence,
            threshold,
            scale,
            gate,
        } = cache;

        let d_f_scale = self
            .scale
            .backward(scale, Tensor3::from_grid(&d.size), p, &mut grads, size_into_extractor)?;
        let d_filtered = self
            .threshold
            .backward(threshold, Tensor3::from_grid(&d.raw_threshold), p, &mut grads, true)?
            .expect("input gradient requested");
        let d_f_conf = self
            .confidence
            .backward(confidence, Tensor3::from_grid(&d.confidence), p, &mut grads, true)?
            .expect("input gradient requested");

        let mut d_f = apply_gate(&d_filtered, &gate);
        for (a, c) in d_f.data.iter_mut().zip(&d_f_conf.data) {
            *a += c;
        }
        if let Some(ds) = d_f_scale {
            for (a, b) in d_f.data.iter_mut().zip(&ds.data) {
                *a += b;
            }
        }
        self.extractor.backward(extractor, d_f, p, &mut grads, false)?;
        Ok(grads)
    }
}

/// Multiplies every channel of `t` by `gate`.
fn apply_gate(t: &Tensor3, gate: &Grid) -> Tensor3 {
    let mut out = t.clone();
    let g = gate.as_slice();
    for c in 0..t.channels {
        out.channel_mut(c).iter_mut().zip(g).for_each(|(x, w)| *x *= w);
    }
    out
}
