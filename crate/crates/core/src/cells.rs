//! GRU transitions and deep-transition cells.
//!
//! One transition computes, with `LN` applied separately to the gate block
//! and the candidate block of each projection:
//!
//! ```text
//! z, r = σ(LN(x·W_zr) + LN(h·U_zr) + b_zr)
//! h̃    = tanh(LN(x·W_c) + b_c + r ∘ LN(h·U_c))
//! h'   = (1 − z) ∘ h̃ + z ∘ h
//! ```
//!
//! A transition without external input drops the `x·W` terms.

use alloc::format;
use alloc::vec::Vec;

use crate::nn::{layer_norm, LayerNormParams};
use crate::params::{Init, ParamSink};
use crate::{Graph, Real, Result, Var};

#[derive(Clone, Debug)]
pub struct GruNorms<H> {
    pub x_gates: Option<LayerNormParams<H>>,
    pub x_cand: Option<LayerNormParams<H>>,
    pub h_gates: LayerNormParams<H>,
    pub h_cand: LayerNormParams<H>,
}

/// Packed `[z | r | candidate]` parameters of one transition.
#[derive(Clone, Debug)]
pub struct GruTransitionParams<H> {
    /// `[d_in × 3H]`, absent for input-free transitions.
    pub w: Option<H>,
    /// `[H × 3H]`.
    pub u: H,
    /// `[3H]`.
    pub b: H,
    pub ln: Option<GruNorms<H>>,
}

impl<H: Copy> GruTransitionParams<H> {
    pub fn declare<S: ParamSink<Handle = H>>(
        sink: &mut S,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        ln: bool,
    ) -> Result<Self> {
        let h3 = 3 * hidden;
        let w = if d_in > 0 {
            Some(sink.tensor(&format!("{prefix}.W"), &[d_in, h3], Init::Uniform { fan_in: d_in })?)
        } else {
            None
        };
        let u = sink.tensor(&format!("{prefix}.U"), &[hidden, h3], Init::Orthogonal { blocks: 3 })?;
        let b = sink.tensor(&format!("{prefix}.b"), &[h3], Init::Zeros)?;
        let ln = if ln {
            let (x_gates, x_cand) = if d_in > 0 {
                (
                    Some(LayerNormParams::declare(sink, &format!("{prefix}.ln_x_gates"), 2 * hidden)?),
                    Some(LayerNormParams::declare(sink, &format!("{prefix}.ln_x_cand"), hidden)?),
                )
            } else {
                (None, None)
            };
            Some(GruNorms {
                x_gates,
                x_cand,
                h_gates: LayerNormParams::declare(sink, &format!("{prefix}.ln_h_gates"), 2 * hidden)?,
                h_cand: LayerNormParams::declare(sink, &format!("{prefix}.ln_h_cand"), hidden)?,
            })
        } else {
            None
        };
        Ok(Self { w, u, b, ln })
    }
}

fn maybe_ln<T: Real>(g: &mut Graph<T>, x: Var, p: Option<&LayerNormParams<Var>>) -> Result<Var> {
    match p {
        Some(p) => layer_norm(g, x, p),
        None => Ok(x),
    }
}

impl GruTransitionParams<Var> {
    pub fn hidden<T: Real>(&self, g: &Graph<T>) -> usize {
        g.shape(self.u)[0]
    }

    /// One transition on a batch: `x: [B×d_in]` (or none), `h: [B×H]`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, x: Option<Var>, h: Var) -> Result<Var> {
        let hd = self.hidden(g);
        let ln = self.ln.as_ref();

        let ah = g.matmul(h, self.u)?;
        let ah_g = g.slice(ah, 1, 0, 2 * hd)?;
        let ah_g = maybe_ln(g, ah_g, ln.map(|n| &n.h_gates))?;
        let ah_c = g.slice(ah, 1, 2 * hd, 3 * hd)?;
        let ah_c = maybe_ln(g, ah_c, ln.map(|n| &n.h_cand))?;
        let b_g = g.slice(self.b, 0, 0, 2 * hd)?;
        let b_c = g.slice(self.b, 0, 2 * hd, 3 * hd)?;

        let (gates_pre, cand_base) = match (x, self.w) {
            (Some(x), Some(w)) => {
                let ax = g.matmul(x, w)?;
                let ax_g = g.slice(ax, 1, 0, 2 * hd)?;
                let ax_g = maybe_ln(g, ax_g, ln.and_then(|n| n.x_gates.as_ref()))?;
                let ax_c = g.slice(ax, 1, 2 * hd, 3 * hd)?;
                let ax_c = maybe_ln(g, ax_c, ln.and_then(|n| n.x_cand.as_ref()))?;
                let pre = g.add(ax_g, ah_g)?;
                (g.add(pre, b_g)?, g.add(ax_c, b_c)?)
            }
            (None, None) => (g.add(ah_g, b_g)?, b_c),
            (Some(_), None) => return Err(crate::Error::Invalid("input given to an input-free transition".into())),
            (None, Some(_)) => return Err(crate::Error::Invalid("transition requires an input".into())),
        };
        let gates = g.sigmoid(gates_pre);
        let z = g.slice(gates, 1, 0, hd)?;
        let r = g.slice(gates, 1, hd, 2 * hd)?;
        let rh = g.mul(r, ah_c)?;
        let cand = g.add(cand_base, rh)?;
        let cand = g.tanh(cand);
        // (1 − z) ∘ h̃ + z ∘ h
        let one_minus_z = g.affine(z, -T::one(), T::one());
        let keep_new = g.mul(one_minus_z, cand)?;
        let keep_old = g.mul(z, h)?;
        g.add(keep_new, keep_old)
    }
}

/// A chain of transitions; only the first sees the cell input.
#[derive(Clone, Debug)]
pub struct DtGruCellParams<H> {
    pub transitions: Vec<GruTransitionParams<H>>,
}

impl<H: Copy> DtGruCellParams<H> {
    /// Transitions are named `{prefix}.t1 … {prefix}.tL`.
    pub fn declare<S: ParamSink<Handle = H>>(
        sink: &mut S,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        depth: usize,
        ln: bool,
    ) -> Result<Self> {
        let transitions = (0..depth)
            .map(|t| {
                let input = if t == 0 { d_in } else { 0 };
                GruTransitionParams::declare(sink, &format!("{prefix}.t{}", t + 1), input, hidden, ln)
            })
            .collect::<Result<_>>()?;
        Ok(Self { transitions })
    }

    pub fn depth(&self) -> usize {
        self.transitions.len()
    }
}

impl DtGruCellParams<Var> {
    pub fn step<T: Real>(&self, g: &mut Graph<T>, x: Option<Var>, h: Var) -> Result<Var> {
        Ok(*self.trace(g, x, h)?.last().expect("depth ≥ 1"))
    }

    /// States after every transition.
    pub fn trace<T: Real>(&self, g: &mut Graph<T>, x: Option<Var>, h: Var) -> Result<Vec<Var>> {
        let mut states = Vec::with_capacity(self.transitions.len());
        let mut h = h;
        for (t, p) in self.transitions.iter().enumerate() {
            h = p.step(g, if t == 0 { x } else { None }, h)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// `w_j = h_j + w_{j−1}`.
pub fn residual_combine<T: Real>(g: &mut Graph<T>, h: Var, below: Var) -> Result<Var> {
    g.add(h, below)
}
