use super::linalg::{gemm_nn, gemm_nt, gemm_tn, gemv_add, gemv_t_add};
use super::model::{DblstmModel, DirLayout, PosteriorSequence};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Borrowed parameters of one LSTM direction.
#[derive(Clone, Copy, Debug)]
pub struct CellParams<'a> {
    pub input: usize,
    pub cells: usize,
    /// `4H × input`, gate blocks i, f, g, o.
    pub w: &'a [f64],
    /// Recurrent weights stored transposed, `H × 4H`.
    pub u_t: &'a [f64],
    pub b: &'a [f64],
    pub peep_i: &'a [f64],
    pub peep_f: &'a [f64],
    pub peep_o: &'a [f64],
}

impl<'a> CellParams<'a> {
    pub fn from_layout(params: &'a [f64], d: &DirLayout) -> Self {
        let h = d.cells;
        CellParams {
            input: d.input,
            cells: h,
            w: &params[d.w..d.u],
            u_t: &params[d.u..d.b],
            b: &params[d.b..d.peep_i],
            peep_i: &params[d.peep_i..d.peep_i + h],
            peep_f: &params[d.peep_f..d.peep_f + h],
            peep_o: &params[d.peep_o..d.peep_o + h],
        }
    }
}

/// Output of one step: post-activation gates `[i, f, g, o]`, the cell
/// state, `tanh(c)` and `h`.
struct StepOut<'a> {
    gates: &'a mut [f64],
    c: &'a mut [f64],
    tanh_c: &'a mut [f64],
    h: &'a mut [f64],
}

/// `zx` already holds `W·x + b`.
fn step(p: &CellParams, zx: &[f64], h_prev: &[f64], c_prev: &[f64], out: StepOut) {
    let h = p.cells;
    out.gates.copy_from_slice(zx);
    gemv_t_add(h, 4 * h, p.u_t, h_prev, out.gates);
    for j in 0..h {
        let cp = c_prev[j];
        let i = sigmoid(out.gates[j] + p.peep_i[j] * cp);
        let f = sigmoid(out.gates[h + j] + p.peep_f[j] * cp);
        let g = out.gates[2 * h + j].tanh();
        let c = f * cp + i * g;
        let o = sigmoid(out.gates[3 * h + j] + p.peep_o[j] * c);
        let tc = c.tanh();
        out.gates[j] = i;
        out.gates[h + j] = f;
        out.gates[2 * h + j] = g;
        out.gates[3 * h + j] = o;
        out.c[j] = c;
        out.tanh_c[j] = tc;
        out.h[j] = o * tc;
    }
}

/// One peephole LSTM step:
///
/// ```text
/// i = σ(Wᵢx + Uᵢh + pᵢ⊙c_prev + bᵢ)
/// f = σ(W_f x + U_f h + p_f⊙c_prev + b_f)
/// c = f⊙c_prev + i⊙tanh(W_g x + U_g h + b_g)
/// o = σ(Wₒx + Uₒh + pₒ⊙c + bₒ)
/// h = o⊙tanh(c)
/// ```
pub fn lstm_cell_step(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &CellParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = p.cells;
    if x.len() != p.input || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::contract(format!(
            "cell step expects x[{}], h[{h}], c[{h}]; got x[{}], h[{}], c[{}]",
            p.input,
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    for (name, v) in [("x", x), ("h_prev", h_prev), ("c_prev", c_prev)] {
        if let Some(pos) = v.iter().position(|a| !a.is_finite()) {
            return Err(Error::Numerical(format!("non-finite {name}[{pos}] entering LSTM step")));
        }
    }
    let mut zx = p.b.to_vec();
    gemv_add(4 * h, p.input, p.w, x, &mut zx);
    let mut gates = vec![0.0; 4 * h];
    let (mut c, mut tanh_c, mut hn) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);
    step(p, &zx, h_prev, c_prev, StepOut { gates: &mut gates, c: &mut c, tanh_c: &mut tanh_c, h: &mut hn });
    if hn.iter().chain(&c).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("LSTM step produced a non-finite state".into()));
    }
    Ok((hn, c))
}

#[derive(Clone, Debug)]
struct DirState {
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    frames: usize,
    /// `inputs[l]` is the `T × in_l` input of hidden layer `l`; the last entry
    /// is the concatenated top-layer output.
    inputs: Vec<Vec<f64>>,
    dirs: Vec<[DirState; 2]>,
    logits: Vec<f64>,
}

impl ForwardPass {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// `T × K` pre-softmax outputs.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

fn processing_order(frames: usize, dir: usize) -> Vec<usize> {
    if dir == 0 {
        (0..frames).collect()
    } else {
        (0..frames).rev().collect()
    }
}

fn dir_forward(p: &CellParams, x: &[f64], frames: usize, dir: usize) -> DirState {
    let h = p.cells;
    let g4 = 4 * h;
    let mut zx = vec![0.0; frames * g4];
    gemm_nt(frames, p.input, g4, x, p.w, 0.0, &mut zx);
    for row in zx.chunks_exact_mut(g4) {
        for (z, b) in row.iter_mut().zip(p.b) {
            *z += b;
        }
    }
    let mut st = DirState {
        gates: vec![0.0; frames * g4],
        c: vec![0.0; frames * h],
        tanh_c: vec![0.0; frames * h],
        h: vec![0.0; frames * h],
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for t in processing_order(frames, dir) {
        let r = t * h..(t + 1) * h;
        step(
            p,
            &zx[t * g4..(t + 1) * g4],
            &h_prev,
            &c_prev,
            StepOut {
                gates: &mut st.gates[t * g4..(t + 1) * g4],
                c: &mut st.c[r.clone()],
                tanh_c: &mut st.tanh_c[r.clone()],
                h: &mut st.h[r.clone()],
            },
        );
        h_prev.copy_from_slice(&st.h[r.clone()]);
        c_prev.copy_from_slice(&st.c[r]);
    }
    st
}

/// Runs every layer in both directions and the linear output layer.
pub fn forward_pass(model: &DblstmModel, x: &[f64], frames: usize) -> Result<ForwardPass> {
    let input_dim = model.input_dim();
    if frames == 0 || x.len() != frames * input_dim {
        return Err(Error::contract(format!(
            "input of length {} is not {frames} frames of dim {input_dim}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite network input".into()));
    }
    let params = model.params();
    let layout = model.layout();
    let mut inputs = vec![x.to_vec()];
    let mut dirs = Vec::with_capacity(layout.layers.len());
    for pair in &layout.layers {
        let input = inputs.last().expect("layer input");
        let fwd = dir_forward(&CellParams::from_layout(params, &pair[0]), input, frames, 0);
        let bwd = dir_forward(&CellParams::from_layout(params, &pair[1]), input, frames, 1);
        let h = pair[0].cells;
        let mut out = vec![0.0; frames * 2 * h];
        for t in 0..frames {
            out[t * 2 * h..t * 2 * h + h].copy_from_slice(&fwd.h[t * h..(t + 1) * h]);
            out[t * 2 * h + h..(t + 1) * 2 * h].copy_from_slice(&bwd.h[t * h..(t + 1) * h]);
        }
        inputs.push(out);
        dirs.push([fwd, bwd]);
    }
    let k = layout.classes;
    let top = inputs.last().expect("top layer");
    let mut logits = vec![0.0; frames * k];
    gemm_nt(frames, layout.top_dim, k, top, &params[layout.out_w..layout.out_b], 0.0, &mut logits);
    let out_b = &params[layout.out_b..layout.total];
    for row in logits.chunks_exact_mut(k) {
        for (z, b) in row.iter_mut().zip(out_b) {
            *z += b;
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("network produced non-finite logits".into()));
    }
    Ok(ForwardPass { frames, inputs, dirs, logits })
}

/// Per-frame class posteriors for a feature sequence.
pub fn forward(model: &DblstmModel, x: &FeatureSequence) -> Result<PosteriorSequence> {
    if x.dim() != model.input_dim() {
        return Err(Error::contract(format!(
            "feature dim {} does not match model input dim {}",
            x.dim(),
            model.input_dim()
        )));
    }
    let pass = forward_pass(model, x.data(), x.len())?;
    Ok(PosteriorSequence::from_logits(&pass.logits, model.num_classes()))
}

/// Accumulates `∂L/∂θ` into `grad` (same layout as the parameters) given
/// `∂L/∂logits` for the pass.
pub fn backward_pass(model: &DblstmModel, pass: &ForwardPass, d_logits: &[f64], grad: &mut [f64]) -> Result<()> {
    let layout = model.layout();
    let frames = pass.frames;
    let k = layout.classes;
    if d_logits.len() != frames * k {
        return Err(Error::contract(format!(
            "logit gradient of length {} does not match {frames} x {k}",
            d_logits.len()
        )));
    }
    if grad.len() != layout.total {
        return Err(Error::contract("gradient buffer does not match the parameter count"));
    }
    let params = model.params();
    let top_dim = layout.top_dim;
    let top = pass.inputs.last().expect("top layer");
    gemm_tn(k, frames, top_dim, d_logits, top, 1.0, &mut grad[layout.out_w..layout.out_b]);
    for row in d_logits.chunks_exact(k) {
        for (g, d) in grad[layout.out_b..layout.total].iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut d_out = vec![0.0; frames * top_dim];
    gemm_nn(frames, k, top_dim, d_logits, &params[layout.out_w..layout.out_b], 0.0, &mut d_out);

    for (l, pair) in layout.layers.iter().enumerate().rev() {
        let x = &pass.inputs[l];
        let in_dim = pair[0].input;
        let mut d_in = if l > 0 { vec![0.0; frames * in_dim] } else { Vec::new() };
        for (dir, d) in pair.iter().enumerate() {
            let p = CellParams::from_layout(params, d);
            dir_backward(&p, d, &pass.dirs[l][dir], x, &d_out, dir, frames, grad, (l > 0).then_some(&mut d_in));
        }
        d_out = d_in;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn dir_backward(
    p: &CellParams,
    d: &DirLayout,
    st: &DirState,
    x: &[f64],
    d_out: &[f64],
    dir: usize,
    frames: usize,
    grad: &mut [f64],
    d_in: Option<&mut Vec<f64>>,
) {
    let h = p.cells;
    let g4 = 4 * h;
    let stride = 2 * h;
    let order = processing_order(frames, dir);
    let mut dz = vec![0.0; frames * g4];
    let mut h_prev_mat = vec![0.0; frames * h];
    let mut dh_rec = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let zeros = vec![0.0; h];
    for (n, &t) in order.iter().enumerate().rev() {
        let prev = n.checked_sub(1).map(|m| order[m]);
        let c_prev = prev.map_or(&zeros[..], |q| &st.c[q * h..(q + 1) * h]);
        let gates = &st.gates[t * g4..(t + 1) * g4];
        let dz_row = &mut dz[t * g4..(t + 1) * g4];
        for j in 0..h {
            let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let tc = st.tanh_c[t * h + j];
            let cp = c_prev[j];
            let dh = d_out[t * stride + dir * h + j] + dh_rec[j];
            let dzo = dh * tc * o * (1.0 - o);
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc) + dzo * p.peep_o[j];
            let dzi = dc * g * i * (1.0 - i);
            let dzf = dc * cp * f * (1.0 - f);
            let dzg = dc * i * (1.0 - g * g);
            dc_next[j] = dc * f + dzi * p.peep_i[j] + dzf * p.peep_f[j];
            grad[d.peep_i + j] += dzi * cp;
            grad[d.peep_f + j] += dzf * cp;
            grad[d.peep_o + j] += dzo * st.c[t * h + j];
            dz_row[j] = dzi;
            dz_row[h + j] = dzf;
            dz_row[2 * h + j] = dzg;
            dz_row[3 * h + j] = dzo;
        }
        dh_rec.fill(0.0);
        gemv_add(h, g4, p.u_t, dz_row, &mut dh_rec);
        if let Some(q) = prev {
            h_prev_mat[t * h..(t + 1) * h].copy_from_slice(&st.h[q * h..(q + 1) * h]);
        }
    }
    for row in dz.chunks_exact(g4) {
        for (g, v) in grad[d.b..d.b + g4].iter_mut().zip(row) {
            *g += v;
        }
    }
    gemm_tn(g4, frames, p.input, &dz, x, 1.0, &mut grad[d.w..d.u]);
    gemm_tn(h, frames, g4, &h_prev_mat, &dz, 1.0, &mut grad[d.u..d.b]);
    if let Some(d_in) = d_in {
        gemm_nn(frames, g4, p.input, &dz, p.w, 1.0, d_in);
    }
}

/// Exact gradients of a loss whose logit gradient is `d_logits`, through the
/// whole unrolled sequence.
pub fn bptt_gradients(model: &DblstmModel, x: &FeatureSequence, d_logits: &[f64]) -> Result<Vec<f64>> {
    if x.dim() != model.input_dim() {
        return Err(Error::contract("feature dim does not match model input dim"));
    }
    let pass = forward_pass(model, x.data(), x.len())?;
    let mut grad = vec![0.0; model.num_params()];
    backward_pass(model, &pass, d_logits, &mut grad)?;
    Ok(grad)
}
