//! The two-pathway model: position/shape encoders, flow encoder,
//! deformation encoder, combiner and decoder, plus the step/rollout
//! recurrence and the ablation switches.
//!
//! Per step `t` (consuming frame `x_t`):
//!
//! 1. `m_t = f_pos(x_t)`, `s_t = f_shape(x_t)` (one shared encoder when
//!    `separate_encoders` is off).
//! 2. Flow pathway: `corr(m_{t-1}, m_t)` -> ConvLSTM stack -> a two-layer
//!    conv head regressing the displacement field `(u, v)`.
//! 3. Deformation pathway: `delta = s_t - warp(s_{t-1}, u, v)` -> dilated
//!    ConvLSTM stack -> 1x1 head `d`; the flow branch contributes
//!    `w_pred = warp(s_t, u, v)`, the shape features advected one step
//!    forward (the single flow serves both warps: flow persistence over one
//!    step keeps the recurrence strictly causal).
//! 4. `concat([d, w_pred])` -> 1x1 combiner -> transposed-conv decoder ->
//!    next-frame prediction.
//!
//! The first observed frame only primes the memory; every later step emits a
//! prediction of the *next* frame, so a `J`-frame warm-up yields `J-2`
//! hindcast predictions (usable as extra loss terms) and the first of the
//! `K` forecast frames.

use crate::convlstm::{BoundConvLstm, ConvLstmParams, ConvLstmSpec, StateValues};
use crate::error::{Error, Result};
use crate::flowdef::{self, cost_volume_channels, default_max_disp, FlowField};
use crate::init::{seeded_rng, xavier_normal};
use crate::tensor::{Activation, Element, Graph, Tensor, Value};
use serde::{Deserialize, Serialize};

const LEAKY_SLOPE: f64 = 0.01;
const GN_EPS: f64 = 1e-5;

fn leaky(g: &Graph<impl Element>, x: Value) -> Result<Value> {
    g.activation(x, Activation::LeakyRelu { slope: LEAKY_SLOPE })
}

/// GroupNorm group count: 8 when the channel count allows it, else 1.
fn gn_groups(channels: usize) -> usize {
    if channels >= 8 && channels % 8 == 0 {
        8
    } else {
        1
    }
}

// --- configuration -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

fn default_encoder_table() -> Vec<EncoderLayer> {
    [(8, 2), (16, 1), (32, 2), (32, 1), (64, 2), (64, 1)]
        .into_iter()
        .map(|(out_channels, stride)| EncoderLayer {
            out_channels,
            kernel: 3,
            stride,
            pad: 1,
        })
        .collect()
}

fn default_decoder_table() -> Vec<DecoderLayer> {
    [(64, 1), (32, 2), (32, 1), (16, 2), (8, 1), (1, 2)]
        .into_iter()
        .map(|(out_channels, stride)| DecoderLayer {
            out_channels,
            kernel: 3,
            stride,
            pad: 1,
            out_pad: stride - 1,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub flow_lstm_layers: usize,
    pub flow_hidden: usize,
    pub flow_head_hidden: usize,
    pub def_lstm_layers: usize,
    pub def_hidden: usize,
    /// Dilation per deformation layer; extended with its last entry when the
    /// stack is deeper than the list.
    pub def_dilations: Vec<usize>,
    pub lstm_kernel: usize,
    pub peepholes: bool,
    /// Maximum correlation displacement; `None` uses `round(feature_width/3)`.
    pub corr_max_disp: Option<usize>,
    pub corr_stride: usize,
    pub corr_normalize: bool,
    pub separate_encoders: bool,
    pub use_flow_output: bool,
    pub use_def_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_height: 64,
            input_width: 64,
            encoder: default_encoder_table(),
            decoder: default_decoder_table(),
            flow_lstm_layers: 1,
            flow_hidden: 128,
            flow_head_hidden: 128,
            def_lstm_layers: 2,
            def_hidden: 128,
            def_dilations: vec![1, 2],
            lstm_kernel: 3,
            peepholes: true,
            corr_max_disp: None,
            corr_stride: 1,
            corr_normalize: false,
            separate_encoders: true,
            use_flow_output: true,
            use_def_output: true,
        }
    }
}

impl ModelConfig {
    pub fn downsample_factor(&self) -> usize {
        self.encoder.iter().map(|l| l.stride).product()
    }

    /// Feature channels c' (the last encoder stage's output).
    pub fn feature_channels(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.out_channels)
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        let f = self.downsample_factor();
        (self.input_height / f, self.input_width / f)
    }

    pub fn corr_disp(&self) -> usize {
        self.corr_max_disp
            .unwrap_or_else(|| default_max_disp(self.feature_dims().1))
    }

    pub fn cost_channels(&self) -> usize {
        cost_volume_channels(self.corr_disp(), self.corr_stride)
    }

    fn flow_head_in(&self) -> usize {
        if self.flow_lstm_layers > 0 {
            self.flow_hidden
        } else {
            self.cost_channels()
        }
    }

    fn def_head_in(&self) -> usize {
        if self.def_lstm_layers > 0 {
            self.def_hidden
        } else {
            self.feature_channels()
        }
    }

    pub fn def_dilation(&self, layer: usize) -> usize {
        self.def_dilations
            .get(layer)
            .or(self.def_dilations.last())
            .copied()
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::Config("model: encoder/decoder tables must be non-empty".into()));
        }
        let f = self.downsample_factor();
        if f == 0 || self.input_height % f != 0 || self.input_width % f != 0 {
            return Err(Error::Config(format!(
                "model: input {}x{} must be divisible by the encoder downsample factor {f}",
                self.input_height, self.input_width
            )));
        }
        let (fh, fw) = self.feature_dims();
        if fh == 0 || fw == 0 {
            return Err(Error::Config("model: encoder collapses the input to zero extent".into()));
        }
        if self.decoder.last().map(|l| l.out_channels) != Some(1) {
            return Err(Error::Config("model: decoder must end in a single channel".into()));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            if l.out_pad >= l.stride {
                return Err(Error::Config(format!(
                    "model: decoder layer {i} output_padding {} must be < stride {}",
                    l.out_pad, l.stride
                )));
            }
        }
        let up: usize = self.decoder.iter().map(|l| l.stride).product();
        if up != f {
            return Err(Error::Config(format!(
                "model: decoder upsamples by {up} but the encoder downsamples by {f}"
            )));
        }
        if !self.use_flow_output && !self.use_def_output {
            return Err(Error::Config(
                "model: disabling both pathway outputs leaves the decoder with no signal".into(),
            ));
        }
        if self.flow_hidden == 0 || self.def_hidden == 0 && self.def_lstm_layers > 0 {
            return Err(Error::Config("model: hidden widths must be positive".into()));
        }
        if self.corr_stride == 0 {
            return Err(Error::Config("model: corr_stride must be >= 1".into()));
        }
        if self.lstm_kernel % 2 == 0 {
            return Err(Error::Config("model: lstm_kernel must be odd".into()));
        }
        Ok(())
    }
}

// --- parameters ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvParams<E: Element> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
}

/// Conv -> GroupNorm -> LeakyReLU. The conv carries no bias: a constant
/// channel shift is removed by the normalization, so GroupNorm's beta is the
/// only effective offset.
#[derive(Clone, Debug)]
pub struct EncStage<E: Element> {
    pub kernel: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct DecStage<E: Element> {
    pub kernel: Tensor<E>,
    /// Present only on the final (un-normalized) stage.
    pub bias: Option<Tensor<E>>,
    /// GroupNorm affine; the final stage has none.
    pub norm: Option<(Tensor<E>, Tensor<E>)>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<E: Element> {
    pub config: ModelConfig,
    pub pos_encoder: Vec<EncStage<E>>,
    pub shape_encoder: Option<Vec<EncStage<E>>>,
    pub flow_lstms: Vec<ConvLstmParams<E>>,
    pub flow_head1: ConvParams<E>,
    pub flow_head2: ConvParams<E>,
    pub def_lstms: Vec<ConvLstmParams<E>>,
    pub def_head: ConvParams<E>,
    pub combiner: ConvParams<E>,
    pub decoder: Vec<DecStage<E>>,
}

fn encoder_stages<E: Element>(
    table: &[EncoderLayer],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<EncStage<E>> {
    let mut cin = 1;
    table
        .iter()
        .map(|l| {
            let stage = EncStage {
                kernel: xavier_normal(rng, &[l.out_channels, cin, l.kernel, l.kernel]),
                gamma: Tensor::full(&[l.out_channels], E::ONE),
                beta: Tensor::zeros(&[l.out_channels]),
            };
            cin = l.out_channels;
            stage
        })
        .collect()
}

/// Xavier-normal kernels, unit GroupNorm gains, zero biases/peepholes;
/// bitwise-deterministic in the seed.
pub fn init_params<E: Element>(config: &ModelConfig, seed: u64) -> Result<ModelParams<E>> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let (fh, fw) = config.feature_dims();
    let c_feat = config.feature_channels();
    let k = config.lstm_kernel;

    let pos_encoder = encoder_stages(&config.encoder, &mut rng);
    let shape_encoder = config
        .separate_encoders
        .then(|| encoder_stages(&config.encoder, &mut rng));

    let lstm_spec = |cin: usize, hidden: usize, dil: usize| {
        let mut s = ConvLstmSpec::new(cin, hidden, fh, fw);
        s.kernel = k;
        s.dilation = dil;
        s.peepholes = config.peepholes;
        s
    };
    let flow_lstms = (0..config.flow_lstm_layers)
        .map(|i| {
            let cin = if i == 0 { config.cost_channels() } else { config.flow_hidden };
            ConvLstmParams::init(lstm_spec(cin, config.flow_hidden, 1), &mut rng)
        })
        .collect();
    let flow_head1 = ConvParams {
        kernel: xavier_normal(&mut rng, &[config.flow_head_hidden, config.flow_head_in(), 3, 3]),
        bias: Tensor::zeros(&[config.flow_head_hidden]),
    };
    let flow_head2 = ConvParams {
        kernel: xavier_normal(&mut rng, &[2, config.flow_head_hidden, 3, 3]),
        bias: Tensor::zeros(&[2]),
    };

    let def_lstms = (0..config.def_lstm_layers)
        .map(|i| {
            let cin = if i == 0 { c_feat } else { config.def_hidden };
            ConvLstmParams::init(lstm_spec(cin, config.def_hidden, config.def_dilation(i)), &mut rng)
        })
        .collect();
    let def_head = ConvParams {
        kernel: xavier_normal(&mut rng, &[c_feat, config.def_head_in(), 1, 1]),
        bias: Tensor::zeros(&[c_feat]),
    };
    let combiner = ConvParams {
        kernel: xavier_normal(&mut rng, &[2 * c_feat, 2 * c_feat, 1, 1]),
        bias: Tensor::zeros(&[2 * c_feat]),
    };

    let mut cin = 2 * c_feat;
    let last = config.decoder.len() - 1;
    let decoder = config
        .decoder
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let stage = DecStage {
                // Transposed kernels are stored [cin, cout, kh, kw].
                kernel: xavier_normal(&mut rng, &[cin, l.out_channels, l.kernel, l.kernel]),
                bias: (i == last).then(|| Tensor::zeros(&[l.out_channels])),
                norm: (i != last).then(|| {
                    (
                        Tensor::full(&[l.out_channels], E::ONE),
                        Tensor::zeros(&[l.out_channels]),
                    )
                }),
            };
            cin = l.out_channels;
            stage
        })
        .collect();

    Ok(ModelParams {
        config: config.clone(),
        pos_encoder,
        shape_encoder,
        flow_lstms,
        flow_head1,
        flow_head2,
        def_lstms,
        def_head,
        combiner,
        decoder,
    })
}

impl<E: Element> ModelParams<E> {
    /// Walks every parameter tensor in a fixed order with its dotted name.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<E>)) {
        let enc = |stages: &[EncStage<E>], prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)| {
            for (i, s) in stages.iter().enumerate() {
                f(format!("{prefix}.{i}.kernel"), &s.kernel);
                f(format!("{prefix}.{i}.gamma"), &s.gamma);
                f(format!("{prefix}.{i}.beta"), &s.beta);
            }
        };
        enc(&self.pos_encoder, "pos_encoder", f);
        if let Some(se) = &self.shape_encoder {
            enc(se, "shape_encoder", f);
        }
        for (i, l) in self.flow_lstms.iter().enumerate() {
            l.visit(&format!("flow_lstm.{i}"), f);
        }
        f("flow_head.0.kernel".into(), &self.flow_head1.kernel);
        f("flow_head.0.bias".into(), &self.flow_head1.bias);
        f("flow_head.1.kernel".into(), &self.flow_head2.kernel);
        f("flow_head.1.bias".into(), &self.flow_head2.bias);
        for (i, l) in self.def_lstms.iter().enumerate() {
            l.visit(&format!("def_lstm.{i}"), f);
        }
        f("def_head.kernel".into(), &self.def_head.kernel);
        f("def_head.bias".into(), &self.def_head.bias);
        f("combiner.kernel".into(), &self.combiner.kernel);
        f("combiner.bias".into(), &self.combiner.bias);
        for (i, s) in self.decoder.iter().enumerate() {
            f(format!("decoder.{i}.kernel"), &s.kernel);
            if let Some(bias) = &s.bias {
                f(format!("decoder.{i}.bias"), bias);
            }
            if let Some((gamma, beta)) = &s.norm {
                f(format!("decoder.{i}.gamma"), gamma);
                f(format!("decoder.{i}.beta"), beta);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        let enc =
            |stages: &mut [EncStage<E>], prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)| {
                for (i, s) in stages.iter_mut().enumerate() {
                    f(format!("{prefix}.{i}.kernel"), &mut s.kernel);
                    f(format!("{prefix}.{i}.gamma"), &mut s.gamma);
                    f(format!("{prefix}.{i}.beta"), &mut s.beta);
                }
            };
        enc(&mut self.pos_encoder, "pos_encoder", f);
        if let Some(se) = &mut self.shape_encoder {
            enc(se, "shape_encoder", f);
        }
        for (i, l) in self.flow_lstms.iter_mut().enumerate() {
            l.visit_mut(&format!("flow_lstm.{i}"), f);
        }
        f("flow_head.0.kernel".into(), &mut self.flow_head1.kernel);
        f("flow_head.0.bias".into(), &mut self.flow_head1.bias);
        f("flow_head.1.kernel".into(), &mut self.flow_head2.kernel);
        f("flow_head.1.bias".into(), &mut self.flow_head2.bias);
        for (i, l) in self.def_lstms.iter_mut().enumerate() {
            l.visit_mut(&format!("def_lstm.{i}"), f);
        }
        f("def_head.kernel".into(), &mut self.def_head.kernel);
        f("def_head.bias".into(), &mut self.def_head.bias);
        f("combiner.kernel".into(), &mut self.combiner.kernel);
        f("combiner.bias".into(), &mut self.combiner.bias);
        for (i, s) in self.decoder.iter_mut().enumerate() {
            f(format!("decoder.{i}.kernel"), &mut s.kernel);
            if let Some(bias) = &mut s.bias {
                f(format!("decoder.{i}.bias"), bias);
            }
            if let Some((gamma, beta)) = &mut s.norm {
                f(format!("decoder.{i}.gamma"), gamma);
                f(format!("decoder.{i}.beta"), beta);
            }
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Registers every parameter as a leaf on `g`, returning both structured
    /// access and the (name, Value) list in `visit` order.
    pub fn bind(&self, g: &Graph<E>) -> BoundModel {
        self.bind_with(&mut |t, _| g.leaf(t.clone().with_grad()))
    }

    /// Binds with caller-provided graph values, one per parameter in `visit`
    /// order (the gradient checker substitutes its own leaves this way).
    pub fn bind_with(&self, provider: &mut dyn FnMut(&Tensor<E>, &str) -> Value) -> BoundModel {
        let mut names: Vec<(String, Value)> = Vec::new();
        self.visit(&mut |name, t| {
            let v = provider(t, &name);
            names.push((name, v));
        });

        // Assemble the structured view by consuming `names` in the exact
        // order `visit` emitted it.
        type It<'a> = std::slice::Iter<'a, (String, Value)>;
        fn take(it: &mut It<'_>) -> Value {
            it.next().expect("bind: visit order exhausted early").1
        }
        fn conv(it: &mut It<'_>) -> BoundConv {
            BoundConv {
                kernel: take(it),
                bias: take(it),
            }
        }
        fn enc_stages(it: &mut It<'_>, table: &[EncoderLayer]) -> Vec<BoundEncStage> {
            table
                .iter()
                .map(|l| BoundEncStage {
                    kernel: take(it),
                    gamma: take(it),
                    beta: take(it),
                    stride: l.stride,
                    pad: l.pad,
                })
                .collect()
        }
        fn bind_lstms<E: Element>(it: &mut It<'_>, lstms: &[ConvLstmParams<E>]) -> Vec<BoundConvLstm> {
            lstms.iter().map(|l| l.bind_with(&mut |_| take(it))).collect()
        }

        let mut it = names.iter();
        let pos_encoder = enc_stages(&mut it, &self.config.encoder);
        let shape_encoder = self
            .shape_encoder
            .is_some()
            .then(|| enc_stages(&mut it, &self.config.encoder));
        let flow_lstms = bind_lstms(&mut it, &self.flow_lstms);
        let flow_head1 = conv(&mut it);
        let flow_head2 = conv(&mut it);
        let def_lstms = bind_lstms(&mut it, &self.def_lstms);
        let def_head = conv(&mut it);
        let combiner = conv(&mut it);
        let decoder = self
            .decoder
            .iter()
            .zip(&self.config.decoder)
            .map(|(s, layer)| BoundDecStage {
                kernel: take(&mut it),
                bias: s.bias.as_ref().map(|_| take(&mut it)),
                norm: s.norm.as_ref().map(|_| (take(&mut it), take(&mut it))),
                layer: layer.clone(),
            })
            .collect();
        assert!(it.next().is_none(), "bind: leftover parameters after assembly");

        BoundModel {
            config: self.config.clone(),
            pos_encoder,
            shape_encoder,
            flow_lstms,
            flow_head1,
            flow_head2,
            def_lstms,
            def_head,
            combiner,
            decoder,
            names,
        }
    }
}

// --- bound (on-graph) model -------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub kernel: Value,
    pub bias: Value,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncStage {
    kernel: Value,
    gamma: Value,
    beta: Value,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
pub struct BoundDecStage {
    kernel: Value,
    bias: Option<Value>,
    norm: Option<(Value, Value)>,
    layer: DecoderLayer,
}

/// Recurrent context carried across steps of one rollout.
#[derive(Clone, Debug)]
pub struct RolloutMemory {
    pub m_prev: Option<Value>,
    pub s_prev: Option<Value>,
    pub flow_states: Vec<StateValues>,
    pub def_states: Vec<StateValues>,
}

pub struct BoundModel {
    pub config: ModelConfig,
    pos_encoder: Vec<BoundEncStage>,
    shape_encoder: Option<Vec<BoundEncStage>>,
    flow_lstms: Vec<BoundConvLstm>,
    flow_head1: BoundConv,
    flow_head2: BoundConv,
    def_lstms: Vec<BoundConvLstm>,
    def_head: BoundConv,
    combiner: BoundConv,
    decoder: Vec<BoundDecStage>,
    /// `(dotted name, leaf)` pairs in `ModelParams::visit` order.
    pub names: Vec<(String, Value)>,
}

impl BoundModel {
    /// Cold memory: zero recurrent states, no previous features.
    pub fn cold_memory<E: Element>(&self, g: &Graph<E>, batch: usize) -> RolloutMemory {
        let (fh, fw) = self.config.feature_dims();
        let zero_state = |hidden: usize| StateValues {
            h: g.constant(Tensor::zeros(&[batch, hidden, fh, fw])),
            c: g.constant(Tensor::zeros(&[batch, hidden, fh, fw])),
        };
        RolloutMemory {
            m_prev: None,
            s_prev: None,
            flow_states: self
                .flow_lstms
                .iter()
                .map(|_| zero_state(self.config.flow_hidden))
                .collect(),
            def_states: self
                .def_lstms
                .iter()
                .map(|_| zero_state(self.config.def_hidden))
                .collect(),
        }
    }

    fn run_encoder<E: Element>(
        &self,
        g: &Graph<E>,
        stages: &[BoundEncStage],
        x: Value,
    ) -> Result<Value> {
        let mut h = x;
        for s in stages {
            let conv = g.conv2d(h, s.kernel, None, (s.stride, s.stride), (s.pad, s.pad), (1, 1))?;
            let channels = g.shape(conv)[1];
            let normed = g.group_norm(conv, s.gamma, s.beta, gn_groups(channels), GN_EPS)?;
            h = leaky(g, normed)?;
        }
        Ok(h)
    }

    /// Position features `m_t` of one frame `[N,1,H,W]`.
    pub fn encode_position<E: Element>(&self, g: &Graph<E>, x: Value) -> Result<Value> {
        self.check_input(g, x)?;
        self.run_encoder(g, &self.pos_encoder, x)
    }

    /// Shape features `s_t`; falls back to the shared encoder when the
    /// encoders are not separated.
    pub fn encode_shape<E: Element>(&self, g: &Graph<E>, x: Value) -> Result<Value> {
        self.check_input(g, x)?;
        match &self.shape_encoder {
            Some(se) => self.run_encoder(g, se, x),
            None => self.run_encoder(g, &self.pos_encoder, x),
        }
    }

    fn check_input<E: Element>(&self, g: &Graph<E>, x: Value) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 4
            || shape[1] != 1
            || shape[2] != self.config.input_height
            || shape[3] != self.config.input_width
        {
            return Err(Error::Shape(format!(
                "model input must be [N,1,{},{}], got {shape:?}",
                self.config.input_height, self.config.input_width
            )));
        }
        Ok(())
    }

    /// Flow pathway: cost volume from (m_{t-1}, m_t), ConvLSTM stack, then a
    /// one-hidden-layer conv head regressing (u, v).
    pub fn flow_step<E: Element>(
        &self,
        g: &Graph<E>,
        memory: &RolloutMemory,
        m_t: Value,
    ) -> Result<(Vec<StateValues>, FlowField)> {
        let m_prev = memory
            .m_prev
            .ok_or_else(|| Error::Shape("flow_step: memory is cold (no m_prev yet)".into()))?;
        let cv = flowdef::corr(
            g,
            m_prev,
            m_t,
            self.config.corr_disp(),
            self.config.corr_stride,
            self.config.corr_normalize,
        )?;
        let mut states = Vec::with_capacity(self.flow_lstms.len());
        let mut h = cv;
        for (lstm, state) in self.flow_lstms.iter().zip(&memory.flow_states) {
            let next = lstm.step(g, h, *state)?;
            h = next.h;
            states.push(next);
        }
        let f1 = g.conv2d(h, self.flow_head1.kernel, Some(self.flow_head1.bias), (1, 1), (1, 1), (1, 1))?;
        let f1 = leaky(g, f1)?;
        let uv = g.conv2d(f1, self.flow_head2.kernel, Some(self.flow_head2.bias), (1, 1), (1, 1), (1, 1))?;
        Ok((states, FlowField::from_two_channel(g, uv)?))
    }

    /// Deformation pathway: residual of the hindcast warp through the dilated
    /// ConvLSTM stack; also returns `w_pred = warp(s_t, flow)`.
    pub fn deform_step<E: Element>(
        &self,
        g: &Graph<E>,
        memory: &RolloutMemory,
        s_t: Value,
        flow: FlowField,
    ) -> Result<(Vec<StateValues>, Value, Value)> {
        let s_prev = memory
            .s_prev
            .ok_or_else(|| Error::Shape("deform_step: memory is cold (no s_prev yet)".into()))?;
        let hindcast = flowdef::warp(g, s_prev, flow)?;
        let delta = flowdef::diff(g, s_t, hindcast)?;
        let mut states = Vec::with_capacity(self.def_lstms.len());
        let mut h = delta;
        for (lstm, state) in self.def_lstms.iter().zip(&memory.def_states) {
            let next = lstm.step(g, h, *state)?;
            h = next.h;
            states.push(next);
        }
        let d = g.conv2d(h, self.def_head.kernel, Some(self.def_head.bias), (1, 1), (0, 0), (1, 1))?;
        let w_pred = flowdef::warp(g, s_t, flow)?;
        Ok((states, d, w_pred))
    }

    /// Combines the pathway outputs (honoring the ablation switches) and
    /// decodes a raw frame (unclamped).
    pub fn combine_decode<E: Element>(&self, g: &Graph<E>, d: Value, w_pred: Value) -> Result<Value> {
        if g.shape(d) != g.shape(w_pred) {
            return Err(Error::Shape(format!(
                "combine_decode: d {:?} and w_pred {:?} must match",
                g.shape(d),
                g.shape(w_pred)
            )));
        }
        let pair = match (self.config.use_flow_output, self.config.use_def_output) {
            (true, true) => [d, w_pred],
            (true, false) => [w_pred, w_pred],
            (false, true) => [d, d],
            (false, false) => unreachable!("rejected by ModelConfig::validate"),
        };
        let cat = g.concat_channels(&pair)?;
        let mut h = g.conv2d(cat, self.combiner.kernel, Some(self.combiner.bias), (1, 1), (0, 0), (1, 1))?;
        for stage in &self.decoder {
            let l = &stage.layer;
            h = g.transposed_conv2d(
                h,
                stage.kernel,
                stage.bias,
                (l.stride, l.stride),
                (l.pad, l.pad),
                (l.out_pad, l.out_pad),
            )?;
            if let Some((gamma, beta)) = stage.norm {
                let channels = g.shape(h)[1];
                h = g.group_norm(h, gamma, beta, gn_groups(channels), GN_EPS)?;
                h = leaky(g, h)?;
            }
        }
        Ok(h)
    }

    /// Consumes the first observed frame: encodes it into memory without
    /// producing a prediction.
    pub fn prime<E: Element>(&self, g: &Graph<E>, memory: &mut RolloutMemory, x: Value) -> Result<()> {
        let m = self.encode_position(g, x)?;
        let s = if self.config.separate_encoders {
            self.encode_shape(g, x)?
        } else {
            m
        };
        memory.m_prev = Some(m);
        memory.s_prev = Some(s);
        Ok(())
    }

    /// One full step: consumes frame `x_t`, emits the prediction of frame
    /// `t+1` (raw decoder output) and the updated memory.
    pub fn step<E: Element>(
        &self,
        g: &Graph<E>,
        memory: &RolloutMemory,
        x: Value,
    ) -> Result<(RolloutMemory, Value)> {
        if memory.m_prev.is_none() || memory.s_prev.is_none() {
            return Err(Error::Shape(
                "fdnet_step: memory is cold; prime it with the first frame".into(),
            ));
        }
        let m_t = self.encode_position(g, x)?;
        let s_t = if self.config.separate_encoders {
            self.encode_shape(g, x)?
        } else {
            m_t
        };
        let (flow_states, flow) = self.flow_step(g, memory, m_t)?;
        let (def_states, d, w_pred) = self.deform_step(g, memory, s_t, flow)?;
        let frame = self.combine_decode(g, d, w_pred)?;
        let next = RolloutMemory {
            m_prev: Some(m_t),
            s_prev: Some(s_t),
            flow_states,
            def_states,
        };
        Ok((next, frame))
    }
}

/// Differentiable rollout outcome; all entries are raw (unclamped) decoder
/// outputs unless `clamp` was requested.
pub struct RolloutValues {
    /// Hindcast predictions of frames `3..=J` made while consuming inputs.
    pub warmup: Vec<Value>,
    /// The K forecast predictions of frames `J+1..=J+K`, in order.
    pub forecast: Vec<Value>,
}

/// Runs warm-up over `inputs` (`[J,N,1,H,W]`) then `K` autoregressive steps.
/// `teacher`/`teacher_mask` substitute ground truth for fed-back predictions:
/// `teacher_mask[i]` substitutes teacher frame `i` where prediction `i` would
/// be consumed (the last entry is never consumed).
pub fn rollout<E: Element>(
    model: &BoundModel,
    g: &Graph<E>,
    inputs: &Tensor<E>,
    horizon: usize,
    teacher: Option<&Tensor<E>>,
    teacher_mask: Option<&[bool]>,
    clamp: bool,
) -> Result<RolloutValues> {
    let shape = inputs.shape().to_vec();
    let [j, n, 1, h, w] = shape[..] else {
        return Err(Error::Shape(format!(
            "rollout inputs must be [J,N,1,H,W], got {shape:?}"
        )));
    };
    if j < 2 {
        return Err(Error::Shape(format!(
            "rollout needs at least 2 input frames (flow needs a pair), got {j}"
        )));
    }
    if horizon == 0 {
        return Err(Error::Shape("rollout horizon must be at least 1".into()));
    }
    if let Some(mask) = teacher_mask {
        if mask.len() != horizon {
            return Err(Error::Shape(format!(
                "teacher mask has {} entries for horizon {horizon}",
                mask.len()
            )));
        }
        let t = teacher.ok_or_else(|| {
            Error::Shape("teacher_mask given without teacher frames".into())
        })?;
        if t.shape() != [horizon, n, 1, h, w] {
            return Err(Error::Shape(format!(
                "teacher frames must be [{horizon},{n},1,{h},{w}], got {:?}",
                t.shape()
            )));
        }
    }

    let frame_numel = n * h * w;
    let frame_at = |t: &Tensor<E>, idx: usize| -> Tensor<E> {
        Tensor::from_vec(
            &[n, 1, h, w],
            t.data()[idx * frame_numel..(idx + 1) * frame_numel].to_vec(),
        )
        .expect("frame slice length")
    };

    let mut memory = model.cold_memory(g, n);
    model.prime(g, &mut memory, g.constant(frame_at(inputs, 0)))?;

    let mut warmup = Vec::with_capacity(j.saturating_sub(2));
    let mut forecast = Vec::with_capacity(horizon);
    for t in 1..j {
        let x = g.constant(frame_at(inputs, t));
        let (next, pred) = model.step(g, &memory, x)?;
        memory = next;
        let pred = if clamp { g.clamp01(pred)? } else { pred };
        if t + 1 < j {
            // Still predicting a frame inside the observation window.
            warmup.push(pred);
        } else {
            // The step consuming the last input predicts the first future frame.
            forecast.push(pred);
        }
    }

    for k in 1..horizon {
        let use_teacher = teacher_mask.map_or(false, |m| m[k - 1]);
        let x = if use_teacher {
            g.constant(frame_at(teacher.expect("validated above"), k - 1))
        } else {
            forecast[k - 1]
        };
        let (next, pred) = model.step(g, &memory, x)?;
        memory = next;
        let pred = if clamp { g.clamp01(pred)? } else { pred };
        forecast.push(pred);
    }
    Ok(RolloutValues { warmup, forecast })
}

/// Inference-style rollout returning a `[K,N,1,H,W]` tensor of clamped frames.
pub fn rollout_frames<E: Element>(
    params: &ModelParams<E>,
    inputs: &Tensor<E>,
    horizon: usize,
    teacher: Option<&Tensor<E>>,
    teacher_mask: Option<&[bool]>,
) -> Result<Tensor<E>> {
    let g = Graph::new();
    let model = params.bind(&g);
    let values = rollout(&model, &g, inputs, horizon, teacher, teacher_mask, true)?;
    let shape = inputs.shape();
    let (n, h, w) = (shape[1], shape[3], shape[4]);
    let mut data = Vec::with_capacity(horizon * n * h * w);
    for v in &values.forecast {
        data.extend_from_slice(g.value(*v).data());
    }
    Tensor::from_vec(&[horizon, n, 1, h, w], data)
}
