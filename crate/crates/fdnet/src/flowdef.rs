//! The three distinctive kernels of the two-pathway model: the correlation
//! cost volume (`corr`), the differentiable bilinear warp (`warp`), and the
//! elementwise difference (`diff`).
//!
//! Conventions: coordinates are (row, col) = (y, x); `v` displaces rows and
//! `u` displaces columns. Out-of-grid reads are zero in both `corr` and
//! `warp`. Displacements are enumerated as `{k*s : |k*s| <= d}` per axis in
//! row-major order over the displacement grid, so stride 1 yields the full
//! `(2d+1)^2` channels and stride 2 trades resolution for compute.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Value};

/// Per-pixel displacement pair at feature resolution, in feature pixels.
#[derive(Clone, Copy, Debug)]
pub struct FlowField {
    /// Horizontal displacement (columns), `[N,1,H,W]`.
    pub u: Value,
    /// Vertical displacement (rows), `[N,1,H,W]`.
    pub v: Value,
}

/// Cost-volume sizing: `(2*floor(d/s)+1)^2` displacement channels.
pub fn cost_volume_channels(max_disp: usize, stride: usize) -> usize {
    let r = max_disp / stride;
    (2 * r + 1) * (2 * r + 1)
}

/// Default maximum displacement for a feature-map width: `round(w/3)`.
pub fn default_max_disp(feature_width: usize) -> usize {
    ((feature_width as f64) / 3.0).round() as usize
}

/// Multiplicative patch comparison between two feature maps. Channel
/// `k = (dy/s + r) * (2r+1) + (dx/s + r)` holds the per-pixel dot product
/// between `m_prev` at (y, x) and `m_curr` at (y+dy, x+dx).
///
/// `normalize` divides by the channel count (off by default; the raw dot
/// product is the reference definition).
pub fn corr<E: Element>(
    g: &Graph<E>,
    m_prev: Value,
    m_curr: Value,
    max_disp: usize,
    stride: usize,
    normalize: bool,
) -> Result<Value> {
    let cv = g.corr(m_prev, m_curr, max_disp, stride)?;
    if normalize {
        let c = g.shape(m_prev)[1];
        g.scale(cv, 1.0 / c as f64)
    } else {
        Ok(cv)
    }
}

/// Bilinear gather of `s` along the flow; see module docs for conventions.
pub fn warp<E: Element>(g: &Graph<E>, s: Value, flow: FlowField) -> Result<Value> {
    g.warp(s, flow.u, flow.v)
}

/// Elementwise subtraction `a - b`.
pub fn diff<E: Element>(g: &Graph<E>, a: Value, b: Value) -> Result<Value> {
    g.sub(a, b)
}

impl FlowField {
    /// Splits a 2-channel map into (u, v), channel 0 = u, channel 1 = v.
    pub fn from_two_channel<E: Element>(g: &Graph<E>, uv: Value) -> Result<FlowField> {
        let shape = g.shape(uv);
        if shape.len() != 4 || shape[1] != 2 {
            return Err(Error::Shape(format!(
                "flow field expects an [N,2,H,W] map, got {shape:?}"
            )));
        }
        Ok(FlowField {
            u: g.slice_channels(uv, 0, 1)?,
            v: g.slice_channels(uv, 1, 2)?,
        })
    }

    /// Zero flow over the given grid.
    pub fn zeros<E: Element>(g: &Graph<E>, batch: usize, height: usize, width: usize) -> FlowField {
        FlowField {
            u: g.constant(Tensor::zeros(&[batch, 1, height, width])),
            v: g.constant(Tensor::zeros(&[batch, 1, height, width])),
        }
    }
}
