//! ConvLSTM recurrence.
//!
//! The cell follows the classic formulation with convolutional
//! input-to-state and state-to-state transitions plus Hadamard peephole
//! terms:
//!
//! ```text
//! g_t = tanh(W_xg * x_t + W_hg * H_{t-1} + b_g)
//! i_t = sigma(W_xi * x_t + W_hi * H_{t-1} + W_ci . C_{t-1} + b_i)
//! f_t = sigma(W_xf * x_t + W_hf * H_{t-1} + W_cf . C_{t-1} + b_f)
//! C_t = f_t . C_{t-1} + i_t . g_t
//! o_t = sigma(W_xo * x_t + W_ho * H_{t-1} + W_co . C_t + b_o)
//! H_t = o_t . tanh(C_t)
//! ```
//!
//! Peephole weights are full state-sized tensors (`[hidden, h, w]`) shared
//! across the batch; a flag disables them for ablation. Each gate keeps its
//! own bias. Padding preserves the spatial size, so dilation `d` with an odd
//! kernel `k` pads by `d*(k-1)/2`.

use crate::error::{Error, Result};
use crate::init::xavier_normal;
use crate::tensor::{Activation, Element, Graph, Tensor, Value};
use rand_chacha::ChaCha8Rng;

/// Construction-time description of one ConvLSTM layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLstmSpec {
    pub in_channels: usize,
    pub hidden: usize,
    /// Feature-map height/width; peephole tensors are state-sized.
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub peepholes: bool,
}

impl ConvLstmSpec {
    pub fn new(in_channels: usize, hidden: usize, height: usize, width: usize) -> Self {
        ConvLstmSpec {
            in_channels,
            hidden,
            height,
            width,
            kernel: 3,
            dilation: 1,
            peepholes: true,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_peepholes(mut self, on: bool) -> Self {
        self.peepholes = on;
        self
    }

    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }
}

#[derive(Clone, Debug)]
pub struct ConvLstmParams<E: Element> {
    pub w_xg: Tensor<E>,
    pub w_hg: Tensor<E>,
    pub w_xi: Tensor<E>,
    pub w_hi: Tensor<E>,
    pub w_xf: Tensor<E>,
    pub w_hf: Tensor<E>,
    pub w_xo: Tensor<E>,
    pub w_ho: Tensor<E>,
    pub w_ci: Option<Tensor<E>>,
    pub w_cf: Option<Tensor<E>>,
    pub w_co: Option<Tensor<E>>,
    pub b_g: Tensor<E>,
    pub b_i: Tensor<E>,
    pub b_f: Tensor<E>,
    pub b_o: Tensor<E>,
    pub spec: ConvLstmSpec,
}

impl<E: Element> ConvLstmParams<E> {
    /// Xavier-normal kernels, zero biases, zero peepholes.
    pub fn init(spec: ConvLstmSpec, rng: &mut ChaCha8Rng) -> Self {
        let k = spec.kernel;
        let xk = |rng: &mut ChaCha8Rng| xavier_normal(rng, &[spec.hidden, spec.in_channels, k, k]);
        let hk = |rng: &mut ChaCha8Rng| xavier_normal(rng, &[spec.hidden, spec.hidden, k, k]);
        let peep = |on: bool| on.then(|| Tensor::zeros(&[spec.hidden, spec.height, spec.width]));
        let bias = || Tensor::zeros(&[spec.hidden]);
        ConvLstmParams {
            w_xg: xk(rng),
            w_hg: hk(rng),
            w_xi: xk(rng),
            w_hi: hk(rng),
            w_xf: xk(rng),
            w_hf: hk(rng),
            w_xo: xk(rng),
            w_ho: hk(rng),
            w_ci: peep(spec.peepholes),
            w_cf: peep(spec.peepholes),
            w_co: peep(spec.peepholes),
            b_g: bias(),
            b_i: bias(),
            b_f: bias(),
            b_o: bias(),
            spec,
        }
    }

    /// All-zero parameters (analytic fixed points in tests).
    pub fn zeros(spec: ConvLstmSpec) -> Self {
        let mut rng = crate::init::seeded_rng(0);
        let mut p = Self::init(spec, &mut rng);
        for t in [
            &mut p.w_xg, &mut p.w_hg, &mut p.w_xi, &mut p.w_hi, &mut p.w_xf, &mut p.w_hf,
            &mut p.w_xo, &mut p.w_ho,
        ] {
            *t = Tensor::zeros(t.shape());
        }
        p
    }

    pub(crate) fn visit(&self, path: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(format!("{path}.w_xg"), &self.w_xg);
        f(format!("{path}.w_hg"), &self.w_hg);
        f(format!("{path}.w_xi"), &self.w_xi);
        f(format!("{path}.w_hi"), &self.w_hi);
        f(format!("{path}.w_xf"), &self.w_xf);
        f(format!("{path}.w_hf"), &self.w_hf);
        f(format!("{path}.w_xo"), &self.w_xo);
        f(format!("{path}.w_ho"), &self.w_ho);
        for (name, t) in [("w_ci", &self.w_ci), ("w_cf", &self.w_cf), ("w_co", &self.w_co)] {
            if let Some(t) = t {
                f(format!("{path}.{name}"), t);
            }
        }
        f(format!("{path}.b_g"), &self.b_g);
        f(format!("{path}.b_i"), &self.b_i);
        f(format!("{path}.b_f"), &self.b_f);
        f(format!("{path}.b_o"), &self.b_o);
    }

    pub(crate) fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(format!("{path}.w_xg"), &mut self.w_xg);
        f(format!("{path}.w_hg"), &mut self.w_hg);
        f(format!("{path}.w_xi"), &mut self.w_xi);
        f(format!("{path}.w_hi"), &mut self.w_hi);
        f(format!("{path}.w_xf"), &mut self.w_xf);
        f(format!("{path}.w_hf"), &mut self.w_hf);
        f(format!("{path}.w_xo"), &mut self.w_xo);
        f(format!("{path}.w_ho"), &mut self.w_ho);
        for (name, t) in [
            ("w_ci", &mut self.w_ci),
            ("w_cf", &mut self.w_cf),
            ("w_co", &mut self.w_co),
        ] {
            if let Some(t) = t {
                f(format!("{path}.{name}"), t);
            }
        }
        f(format!("{path}.b_g"), &mut self.b_g);
        f(format!("{path}.b_i"), &mut self.b_i);
        f(format!("{path}.b_f"), &mut self.b_f);
        f(format!("{path}.b_o"), &mut self.b_o);
    }

    /// Registers every parameter as a differentiable leaf on `g`.
    pub fn bind(&self, g: &Graph<E>) -> BoundConvLstm {
        self.bind_with(&mut |t| g.leaf(t.clone().with_grad()))
    }

    /// Binds using caller-provided `Value`s (one call per tensor, in `visit`
    /// order); used to substitute existing graph leaves.
    pub fn bind_with(&self, provider: &mut dyn FnMut(&Tensor<E>) -> Value) -> BoundConvLstm {
        BoundConvLstm {
            w_xg: provider(&self.w_xg),
            w_hg: provider(&self.w_hg),
            w_xi: provider(&self.w_xi),
            w_hi: provider(&self.w_hi),
            w_xf: provider(&self.w_xf),
            w_hf: provider(&self.w_hf),
            w_xo: provider(&self.w_xo),
            w_ho: provider(&self.w_ho),
            w_ci: self.w_ci.as_ref().map(&mut *provider),
            w_cf: self.w_cf.as_ref().map(&mut *provider),
            w_co: self.w_co.as_ref().map(&mut *provider),
            b_g: provider(&self.b_g),
            b_i: provider(&self.b_i),
            b_f: provider(&self.b_f),
            b_o: provider(&self.b_o),
            spec: self.spec.clone(),
        }
    }
}

/// Hidden and cell maps for one layer.
#[derive(Clone, Debug)]
pub struct ConvLstmState<E: Element> {
    pub h: Tensor<E>,
    pub c: Tensor<E>,
}

/// Zero-filled initial state.
pub fn init_state<E: Element>(batch: usize, hidden: usize, height: usize, width: usize) -> ConvLstmState<E> {
    ConvLstmState {
        h: Tensor::zeros(&[batch, hidden, height, width]),
        c: Tensor::zeros(&[batch, hidden, height, width]),
    }
}

/// Graph-resident state used inside a differentiable rollout.
#[derive(Clone, Copy, Debug)]
pub struct StateValues {
    pub h: Value,
    pub c: Value,
}

impl StateValues {
    pub fn from_state<E: Element>(g: &Graph<E>, state: &ConvLstmState<E>) -> Self {
        StateValues {
            h: g.constant(state.h.clone()),
            c: g.constant(state.c.clone()),
        }
    }
}

/// Parameter handles on a live graph.
#[derive(Clone, Debug)]
pub struct BoundConvLstm {
    pub w_xg: Value,
    pub w_hg: Value,
    pub w_xi: Value,
    pub w_hi: Value,
    pub w_xf: Value,
    pub w_hf: Value,
    pub w_xo: Value,
    pub w_ho: Value,
    pub w_ci: Option<Value>,
    pub w_cf: Option<Value>,
    pub w_co: Option<Value>,
    pub b_g: Value,
    pub b_i: Value,
    pub b_f: Value,
    pub b_o: Value,
    pub spec: ConvLstmSpec,
}

impl BoundConvLstm {
    pub fn values(&self) -> Vec<Value> {
        let mut v = vec![
            self.w_xg, self.w_hg, self.w_xi, self.w_hi, self.w_xf, self.w_hf, self.w_xo, self.w_ho,
        ];
        v.extend([self.w_ci, self.w_cf, self.w_co].into_iter().flatten());
        v.extend([self.b_g, self.b_i, self.b_f, self.b_o]);
        v
    }

    fn gate_pre<E: Element>(
        &self,
        g: &Graph<E>,
        x: Value,
        h: Value,
        w_x: Value,
        w_h: Value,
        bias: Value,
        peep: Option<(Value, Value)>,
    ) -> Result<Value> {
        let s = self.spec.dilation;
        let pad = self.spec.pad();
        let xc = g.conv2d(x, w_x, Some(bias), (1, 1), (pad, pad), (s, s))?;
        let hc = g.conv2d(h, w_h, None, (1, 1), (pad, pad), (s, s))?;
        let mut pre = g.add(xc, hc)?;
        if let Some((w_c, c)) = peep {
            let pc = g.peephole_mul(w_c, c)?;
            pre = g.add(pre, pc)?;
        }
        Ok(pre)
    }

    /// One recurrence step on the graph.
    pub fn step<E: Element>(&self, g: &Graph<E>, x: Value, state: StateValues) -> Result<StateValues> {
        let xs = g.shape(x);
        let hs = g.shape(state.h);
        if xs.len() != 4 || xs[2..] != hs[2..] || xs[0] != hs[0] {
            return Err(Error::Shape(format!(
                "convlstm_step: input {xs:?} and state {hs:?} disagree on batch or spatial dims"
            )));
        }
        let pre_g = self.gate_pre(g, x, state.h, self.w_xg, self.w_hg, self.b_g, None)?;
        let gate_g = g.activation(pre_g, Activation::Tanh)?;
        let pre_i = self.gate_pre(
            g,
            x,
            state.h,
            self.w_xi,
            self.w_hi,
            self.b_i,
            self.w_ci.map(|w| (w, state.c)),
        )?;
        let gate_i = g.activation(pre_i, Activation::Sigmoid)?;
        let pre_f = self.gate_pre(
            g,
            x,
            state.h,
            self.w_xf,
            self.w_hf,
            self.b_f,
            self.w_cf.map(|w| (w, state.c)),
        )?;
        let gate_f = g.activation(pre_f, Activation::Sigmoid)?;

        let keep = g.hadamard(gate_f, state.c)?;
        let write = g.hadamard(gate_i, gate_g)?;
        let c_new = g.add(keep, write)?;

        let pre_o = self.gate_pre(
            g,
            x,
            state.h,
            self.w_xo,
            self.w_ho,
            self.b_o,
            self.w_co.map(|w| (w, c_new)),
        )?;
        let gate_o = g.activation(pre_o, Activation::Sigmoid)?;
        let c_tanh = g.activation(c_new, Activation::Tanh)?;
        let h_new = g.hadamard(gate_o, c_tanh)?;
        Ok(StateValues { h: h_new, c: c_new })
    }
}

/// Value-level step: runs the recurrence on a throwaway tape.
pub fn convlstm_step<E: Element>(
    params: &ConvLstmParams<E>,
    x: &Tensor<E>,
    state: &ConvLstmState<E>,
) -> Result<ConvLstmState<E>> {
    let g = Graph::new();
    let bound = params.bind(&g);
    let xv = g.constant(x.clone());
    let sv = StateValues::from_state(&g, state);
    let out = bound.step(&g, xv, sv)?;
    Ok(ConvLstmState {
        h: g.value(out.h),
        c: g.value(out.c),
    })
}
