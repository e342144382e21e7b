//! Latent multi-step refinement model.
//!
//! A target embedding and the mean of its reference embeddings are encoded
//! into an initial hidden state `h0`. A gated cell then refines the state
//! `steps` times, sharing weights across steps, and a scorer reads a score
//! off every state:
//!
//! ```text
//! c     = Wc · mean(refs) + bc
//! h0    = tanh(We · [t ‖ c] + be)
//! g     = σ(Wg · [h ‖ c] + bg)
//! h~    = tanh(Wh · [h ‖ c] + bh)
//! h'    = (1 − g) ⊙ h + g ⊙ h~
//! score = wo · h + bo                      (one layer)
//!       = wo · tanh(W1 · h + b1) + bo      (two layers)
//! ```
//!
//! All parameters live in one flat `Vec<f64>`; [`Layout`] gives the block
//! offsets. The same order is used by the checkpoint blob.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_STEPS: usize = 8;
/// Initial gate bias; keeps early refinements close to the identity.
pub const GATE_BIAS_INIT: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Dimension of the input embeddings.
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of refinement steps.
    pub steps: usize,
    /// 1 = affine scorer, 2 = one hidden tanh layer.
    pub scorer_layers: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.steps == 0 {
            return Err(Error::Config(format!("degenerate model shape {self:?}")));
        }
        if !matches!(self.scorer_layers, 1 | 2) {
            return Err(Error::Config(format!(
                "scorer_layers must be 1 or 2, got {}",
                self.scorer_layers
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(*self)
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub context_w: Range<usize>,
    pub context_b: Range<usize>,
    pub encoder_w: Range<usize>,
    pub encoder_b: Range<usize>,
    pub gate_w: Range<usize>,
    pub gate_b: Range<usize>,
    pub candidate_w: Range<usize>,
    pub candidate_b: Range<usize>,
    pub scorer_hidden_w: Range<usize>,
    pub scorer_hidden_b: Range<usize>,
    pub scorer_out_w: Range<usize>,
    pub scorer_out_b: Range<usize>,
    pub len: usize,
}

impl Layout {
    fn new(shape: ModelShape) -> Self {
        let (di, d) = (shape.input_dim, shape.hidden_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let context_w = take(d * di);
        let context_b = take(d);
        let encoder_w = take(d * (di + d));
        let encoder_b = take(d);
        let gate_w = take(d * 2 * d);
        let gate_b = take(d);
        let candidate_w = take(d * 2 * d);
        let candidate_b = take(d);
        let hidden = if shape.scorer_layers == 2 { d } else { 0 };
        let scorer_hidden_w = take(hidden * d);
        let scorer_hidden_b = take(hidden);
        let scorer_out_w = take(d);
        let scorer_out_b = take(1);
        Layout {
            context_w,
            context_b,
            encoder_w,
            encoder_b,
            gate_w,
            gate_b,
            candidate_w,
            candidate_b,
            scorer_hidden_w,
            scorer_hidden_b,
            scorer_out_w,
            scorer_out_b,
            len: at,
        }
    }

    /// Block names, shapes (rows, cols) and ranges in storage order.
    pub fn blocks(&self, shape: &ModelShape) -> Vec<(&'static str, [usize; 2], Range<usize>)> {
        let (di, d) = (shape.input_dim, shape.hidden_dim);
        let mut out = vec![
            ("context.weight", [d, di], self.context_w.clone()),
            ("context.bias", [d, 1], self.context_b.clone()),
            ("encoder.weight", [d, di + d], self.encoder_w.clone()),
            ("encoder.bias", [d, 1], self.encoder_b.clone()),
            ("gate.weight", [d, 2 * d], self.gate_w.clone()),
            ("gate.bias", [d, 1], self.gate_b.clone()),
            ("candidate.weight", [d, 2 * d], self.candidate_w.clone()),
            ("candidate.bias", [d, 1], self.candidate_b.clone()),
        ];
        if shape.scorer_layers == 2 {
            out.push(("scorer.hidden.weight", [d, d], self.scorer_hidden_w.clone()));
            out.push(("scorer.hidden.bias", [d, 1], self.scorer_hidden_b.clone()));
        }
        out.push(("scorer.out.weight", [1, d], self.scorer_out_w.clone()));
        out.push(("scorer.out.bias", [1, 1], self.scorer_out_b.clone()));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    layout: Layout,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let layout = shape.layout();
        let data = vec![0.0; layout.len];
        Ok(ModelParams { shape, layout, data })
    }

    pub fn from_vec(shape: ModelShape, data: Vec<f64>) -> Result<Self> {
        let mut p = ModelParams::zeros(shape)?;
        if data.len() != p.layout.len {
            return Err(Error::DimMismatch {
                expected: p.layout.len,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        p.data = data;
        Ok(p)
    }

    /// Uniform `±1/sqrt(fan_in)` init, gate bias fixed at [`GATE_BIAS_INIT`].
    /// Values are drawn as `f32` so a fresh model is exactly representable
    /// in the checkpoint format.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        let mut p = ModelParams::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (di, d) = (shape.input_dim, shape.hidden_dim);
        let l = p.layout.clone();
        let fans = [
            (l.context_w.start..l.context_b.end, di),
            (l.encoder_w.start..l.encoder_b.end, di + d),
            (l.gate_w.clone(), 2 * d),
            (l.candidate_w.start..l.candidate_b.end, 2 * d),
            (l.scorer_hidden_w.start..l.scorer_hidden_b.end, d),
            (l.scorer_out_w.start..l.scorer_out_b.end, d),
        ];
        for (range, fan_in) in fans {
            let bound = 1.0 / (fan_in as f32).sqrt();
            for x in &mut p.data[range] {
                *x = f64::from(rng.random_range(-bound..bound));
            }
        }
        p.data[l.gate_b].fill(GATE_BIAS_INIT);
        Ok(p)
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, range: &Range<usize>) -> &[f64] {
        &self.data[range.clone()]
    }

    pub fn block_mut(&mut self, range: &Range<usize>) -> &mut [f64] {
        &mut self.data[range.clone()]
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for x in &mut self.data {
            *x = f64::from(*x as f32);
        }
    }

    fn check_input(&self, target: &[f64], refs: &[&[f64]]) -> Result<()> {
        let di = self.shape.input_dim;
        if target.len() != di {
            return Err(Error::DimMismatch {
                expected: di,
                got: target.len(),
            });
        }
        if let Some(r) = refs.iter().find(|r| r.len() != di) {
            return Err(Error::DimMismatch {
                expected: di,
                got: r.len(),
            });
        }
        Ok(())
    }
}

/// Hidden states and scores of one forward pass, step 0 included.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrace {
    pub hidden: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

/// `out = W x + b`, with `W` row-major `out.len() × x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// `grad_w += dz xᵀ`, `grad_b += dz`, `dx += Wᵀ dz`.
fn affine_backward(
    w: &[f64],
    x: &[f64],
    dz: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let cols = x.len();
    for (r, &g) in dz.iter().enumerate() {
        grad_b[r] += g;
        for (gw, &v) in grad_w[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *gw += g * v;
        }
    }
    if let Some(dx) = dx {
        for (r, &g) in dz.iter().enumerate() {
            for (d, &a) in dx.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *d += a * g;
            }
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn mean_of(refs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    if refs.is_empty() {
        return mean;
    }
    for r in refs {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x;
        }
    }
    let n = refs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Encodes the target and its references: returns `(h0, context)`.
pub fn encode_input(params: &ModelParams, target: &[f64], refs: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
    params.check_input(target, refs)?;
    let enc = encode(params, target, refs);
    Ok((enc.h0, enc.context))
}

struct Encoded {
    mean: Vec<f64>,
    context: Vec<f64>,
    encoder_in: Vec<f64>,
    h0: Vec<f64>,
}

fn encode(params: &ModelParams, target: &[f64], refs: &[&[f64]]) -> Encoded {
    let l = &params.layout;
    let d = params.shape.hidden_dim;
    let mean = mean_of(refs, params.shape.input_dim);
    let mut context = vec![0.0; d];
    affine(params.block(&l.context_w), params.block(&l.context_b), &mean, &mut context);
    let encoder_in = concat(target, &context);
    let mut h0 = vec![0.0; d];
    affine(params.block(&l.encoder_w), params.block(&l.encoder_b), &encoder_in, &mut h0);
    h0.iter_mut().for_each(|x| *x = x.tanh());
    Encoded {
        mean,
        context,
        encoder_in,
        h0,
    }
}

struct StepCache {
    gate: Vec<f64>,
    candidate: Vec<f64>,
}

fn step(params: &ModelParams, h: &[f64], context: &[f64]) -> (Vec<f64>, StepCache) {
    let l = &params.layout;
    let d = params.shape.hidden_dim;
    let x = concat(h, context);
    let mut gate = vec![0.0; d];
    affine(params.block(&l.gate_w), params.block(&l.gate_b), &x, &mut gate);
    gate.iter_mut().for_each(|g| *g = logistic(*g));
    let mut candidate = vec![0.0; d];
    affine(params.block(&l.candidate_w), params.block(&l.candidate_b), &x, &mut candidate);
    candidate.iter_mut().for_each(|c| *c = c.tanh());
    let next = (0..d)
        .map(|t| (1.0 - gate[t]) * h[t] + gate[t] * candidate[t])
        .collect();
    (next, StepCache { gate, candidate })
}

/// One gated refinement of `h` given the context vector.
pub fn refine_step(params: &ModelParams, h: &[f64], context: &[f64]) -> Result<Vec<f64>> {
    let d = params.shape.hidden_dim;
    for v in [h, context] {
        if v.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    Ok(step(params, h, context).0)
}

/// Scorer output for one hidden state; the second value is the scorer's
/// hidden activation (empty for the affine scorer).
fn score(params: &ModelParams, h: &[f64]) -> (f64, Vec<f64>) {
    let l = &params.layout;
    let w_out = params.block(&l.scorer_out_w);
    let b_out = params.data[l.scorer_out_b.start];
    if params.shape.scorer_layers == 1 {
        let s = b_out + w_out.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        return (s, Vec::new());
    }
    let mut a = vec![0.0; params.shape.hidden_dim];
    affine(params.block(&l.scorer_hidden_w), params.block(&l.scorer_hidden_b), h, &mut a);
    a.iter_mut().for_each(|x| *x = x.tanh());
    let s = b_out + w_out.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
    (s, a)
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    encoded: Encoded,
    target: Vec<f64>,
    steps: Vec<StepCache>,
    scorer_hidden: Vec<Vec<f64>>,
    pub trace: RefinementTrace,
}

/// Forward pass recording intermediates for [`backward`].
pub fn forward_tape(params: &ModelParams, target: &[f64], refs: &[&[f64]]) -> Result<Tape> {
    params.check_input(target, refs)?;
    let encoded = encode(params, target, refs);
    let m = params.shape.steps;
    let mut hidden = Vec::with_capacity(m + 1);
    let mut steps = Vec::with_capacity(m);
    hidden.push(encoded.h0.clone());
    for j in 0..m {
        let (next, cache) = step(params, &hidden[j], &encoded.context);
        hidden.push(next);
        steps.push(cache);
    }
    let (scores, scorer_hidden) = hidden.iter().map(|h| score(params, h)).unzip();
    Ok(Tape {
        encoded,
        target: target.to_vec(),
        steps,
        scorer_hidden,
        trace: RefinementTrace { hidden, scores },
    })
}

/// Runs the encoder, `steps` refinements and the scorer.
pub fn forward(params: &ModelParams, target: &[f64], refs: &[&[f64]]) -> Result<RefinementTrace> {
    forward_tape(params, target, refs).map(|t| t.trace)
}

/// The final-step score.
pub fn predict(params: &ModelParams, target: &[f64], refs: &[&[f64]]) -> Result<f64> {
    let trace = forward(params, target, refs)?;
    Ok(*trace.scores.last().expect("at least one step"))
}

/// Accumulates into `grad` the parameter gradient of `Σ_j dscores[j] · score_j`.
///
/// `dscores` has one entry per step, step 0 included.
pub fn backward(params: &ModelParams, tape: &Tape, dscores: &[f64], grad: &mut [f64]) {
    let l = &params.layout;
    let d = params.shape.hidden_dim;
    let di = params.shape.input_dim;
    let m = params.shape.steps;
    assert_eq!(dscores.len(), m + 1, "one score gradient per step");
    assert_eq!(grad.len(), l.len, "gradient buffer matches parameters");

    // scorer contributions to each hidden state
    let mut dh: Vec<Vec<f64>> = vec![vec![0.0; d]; m + 1];
    let w_out = params.block(&l.scorer_out_w).to_vec();
    for j in 0..=m {
        let ds = dscores[j];
        if ds == 0.0 {
            continue;
        }
        grad[l.scorer_out_b.start] += ds;
        let h = &tape.trace.hidden[j];
        if params.shape.scorer_layers == 1 {
            for t in 0..d {
                grad[l.scorer_out_w.start + t] += ds * h[t];
                dh[j][t] += ds * w_out[t];
            }
        } else {
            let a = &tape.scorer_hidden[j];
            let mut dz = vec![0.0; d];
            for t in 0..d {
                grad[l.scorer_out_w.start + t] += ds * a[t];
                dz[t] = ds * w_out[t] * (1.0 - a[t] * a[t]);
            }
            let (gw, gb) = split_pair(grad, &l.scorer_hidden_w, &l.scorer_hidden_b);
            affine_backward(params.block(&l.scorer_hidden_w), h, &dz, gw, gb, Some(&mut dh[j]));
        }
    }

    // refinement steps, last to first
    let context = &tape.encoded.context;
    let mut dcontext = vec![0.0; d];
    let mut carry = vec![0.0; d];
    for j in (1..=m).rev() {
        let cache = &tape.steps[j - 1];
        let h_prev = &tape.trace.hidden[j - 1];
        let dcur: Vec<f64> = (0..d).map(|t| carry[t] + dh[j][t]).collect();
        let mut dz_gate = vec![0.0; d];
        let mut dz_cand = vec![0.0; d];
        let mut dprev = vec![0.0; d];
        for t in 0..d {
            let (g, c) = (cache.gate[t], cache.candidate[t]);
            dz_gate[t] = dcur[t] * (c - h_prev[t]) * g * (1.0 - g);
            dz_cand[t] = dcur[t] * g * (1.0 - c * c);
            dprev[t] = dcur[t] * (1.0 - g);
        }
        let x = concat(h_prev, context);
        let mut dx = vec![0.0; 2 * d];
        {
            let (gw, gb) = split_pair(grad, &l.gate_w, &l.gate_b);
            affine_backward(params.block(&l.gate_w), &x, &dz_gate, gw, gb, Some(&mut dx));
        }
        {
            let (gw, gb) = split_pair(grad, &l.candidate_w, &l.candidate_b);
            affine_backward(params.block(&l.candidate_w), &x, &dz_cand, gw, gb, Some(&mut dx));
        }
        for t in 0..d {
            dprev[t] += dx[t];
            dcontext[t] += dx[d + t];
        }
        carry = dprev;
    }

    // encoder
    let h0 = &tape.trace.hidden[0];
    let dz_enc: Vec<f64> = (0..d)
        .map(|t| (carry[t] + dh[0][t]) * (1.0 - h0[t] * h0[t]))
        .collect();
    let mut dx = vec![0.0; di + d];
    {
        let (gw, gb) = split_pair(grad, &l.encoder_w, &l.encoder_b);
        affine_backward(params.block(&l.encoder_w), &tape.encoded.encoder_in, &dz_enc, gw, gb, Some(&mut dx));
    }
    debug_assert_eq!(tape.target.len(), di);
    for t in 0..d {
        dcontext[t] += dx[di + t];
    }

    // context map
    let (gw, gb) = split_pair(grad, &l.context_w, &l.context_b);
    affine_backward(params.block(&l.context_w), &tape.encoded.mean, &dcontext, gw, gb, None);
}

/// Disjoint mutable views of a weight block and the bias block after it.
fn split_pair<'a>(grad: &'a mut [f64], w: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (left, right) = grad.split_at_mut(b.start);
    (&mut left[w.clone()], &mut right[..b.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn shape(di: usize, d: usize, m: usize, layers: usize) -> ModelShape {
        ModelShape {
            input_dim: di,
            hidden_dim: d,
            steps: m,
            scorer_layers: layers,
        }
    }

    fn unit(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// Scalar-by-scalar reference for one refinement step.
    fn oracle_step(p: &ModelParams, h: &[f64], c: &[f64]) -> Vec<f64> {
        let l = p.layout();
        let d = h.len();
        let gw = p.block(&l.gate_w);
        let gb = p.block(&l.gate_b);
        let cw = p.block(&l.candidate_w);
        let cb = p.block(&l.candidate_b);
        let mut out = vec![0.0; d];
        for r in 0..d {
            let mut zg = gb[r];
            let mut zc = cb[r];
            for col in 0..2 * d {
                let x = if col < d { h[col] } else { c[col - d] };
                zg += gw[r * 2 * d + col] * x;
                zc += cw[r * 2 * d + col] * x;
            }
            let g = 1.0 / (1.0 + (-zg).exp());
            out[r] = (1.0 - g) * h[r] + g * zc.tanh();
        }
        out
    }

    #[test]
    fn layout_is_contiguous() {
        for layers in [1, 2] {
            let s = shape(5, 3, 2, layers);
            let l = s.layout();
            let blocks = l.blocks(&s);
            let mut at = 0;
            for (_, [r, c], range) in &blocks {
                assert_eq!(range.start, at);
                assert_eq!(range.len(), r * c);
                at = range.end;
            }
            assert_eq!(at, l.len);
        }
    }

    #[test]
    fn context_uses_reference_mean() {
        let s = shape(3, 2, 1, 1);
        let p = ModelParams::init(s, 1).unwrap();
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 1.0, 0.0];
        let t = [0.0, 0.0, 1.0];
        let (_, c_two) = encode_input(&p, &t, &[&a, &b]).unwrap();
        let mid = [0.5, 0.5, 0.0];
        let (_, c_mid) = encode_input(&p, &t, &[&mid]).unwrap();
        assert_eq!(c_two, c_mid);
        let (_, c_empty) = encode_input(&p, &t, &[]).unwrap();
        assert_eq!(c_empty, p.block(&p.layout().context_b));
        assert!(encode_input(&p, &[1.0], &[]).is_err());
    }

    #[test]
    fn gate_limits() {
        let s = shape(2, 3, 1, 1);
        let mut p = ModelParams::zeros(s).unwrap();
        let l = p.layout().clone();
        let h = [0.3, -0.7, 0.9];
        let c = [0.1, 0.2, 0.3];
        p.block_mut(&l.gate_b).fill(-1e3);
        assert_eq!(refine_step(&p, &h, &c).unwrap(), h);
        // open gate, zero candidate
        p.block_mut(&l.gate_b).fill(1e3);
        assert_eq!(refine_step(&p, &h, &c).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let s = shape(2, 3, 1, 1);
        let p = ModelParams::init(s, 42).unwrap();
        let h = [0.5, -0.25, 0.1];
        let c = [-0.3, 0.8, 0.05];
        let got = refine_step(&p, &h, &c).unwrap();
        let want = oracle_step(&p, &h, &c);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_unrolls_steps() {
        let s = shape(4, 4, 3, 1);
        let p = ModelParams::init(s, 9).unwrap();
        let t = unit(4, 1);
        let r = unit(4, 2);
        let trace = forward(&p, &t, &[&r]).unwrap();
        assert_eq!(trace.hidden.len(), 4);
        assert_eq!(trace.scores.len(), 4);

        let (h0, c) = encode_input(&p, &t, &[&r]).unwrap();
        let l = p.layout();
        let w = p.block(&l.scorer_out_w);
        let b = p.as_slice()[l.scorer_out_b.start];
        let mut h = h0;
        for j in 0..=3 {
            if j > 0 {
                h = oracle_step(&p, &h, &c);
            }
            let s_j = b + (0..4).map(|t| w[t] * h[t]).sum::<f64>();
            assert!((trace.scores[j] - s_j).abs() < 1e-13, "step {j}");
        }
        assert_eq!(predict(&p, &t, &[&r]).unwrap(), trace.scores[3]);
    }

    #[test]
    fn zero_network_scores_bias() {
        let s = shape(3, 4, 8, 2);
        let mut p = ModelParams::zeros(s).unwrap();
        let b = p.layout().scorer_out_b.start;
        p.as_mut_slice()[b] = 0.37;
        let trace = forward(&p, &unit(3, 0), &[]).unwrap();
        assert!(trace.scores.iter().all(|&s| s == 0.37));
    }

    #[test]
    fn step_zero_independent_of_depth() {
        let t = unit(5, 3);
        let r = unit(5, 4);
        let mut scores = Vec::new();
        for m in [1, 4, 8] {
            let p = ModelParams::init(shape(5, 6, m, 1), 11).unwrap();
            scores.push(forward(&p, &t, &[&r]).unwrap().scores[0]);
        }
        assert!(scores.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn init_is_f32_exact_and_seeded() {
        let s = shape(6, 8, 2, 2);
        let a = ModelParams::init(s, 5).unwrap();
        let mut q = a.clone();
        q.quantize_f32();
        assert_eq!(a, q);
        assert_eq!(a, ModelParams::init(s, 5).unwrap());
        assert_ne!(a, ModelParams::init(s, 6).unwrap());
        assert!(a.block(&a.layout().gate_b).iter().all(|&b| b == GATE_BIAS_INIT));
    }

    fn total_loss(p: &ModelParams, t: &[f64], r: &[f64], weights: &[f64]) -> f64 {
        let trace = forward(p, t, &[r]).unwrap();
        trace.scores.iter().zip(weights).map(|(s, w)| s * w).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        for layers in [1, 2] {
            let s = shape(3, 4, 3, layers);
            let p = ModelParams::init(s, 21).unwrap();
            let t = unit(3, 7);
            let r = unit(3, 8);
            let weights = [0.3, -1.1, 0.7, 1.9];
            let tape = forward_tape(&p, &t, &[&r]).unwrap();
            let mut grad = vec![0.0; p.len()];
            backward(&p, &tape, &weights, &mut grad);
            let eps = 1e-5;
            for (i, &g) in grad.iter().enumerate() {
                let mut plus = p.clone();
                plus.as_mut_slice()[i] += eps;
                let mut minus = p.clone();
                minus.as_mut_slice()[i] -= eps;
                let fd = (total_loss(&plus, &t, &r, &weights) - total_loss(&minus, &t, &r, &weights))
                    / (2.0 * eps);
                let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
                assert!(err < 1e-4, "layers {layers} coord {i}: fd {fd} vs {g}");
            }
        }
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hidden_states_stay_bounded(seed in any::<u64>(), m in 1usize..12) {
            let p = ModelParams::init(shape(4, 5, m, 1), seed).unwrap();
            let t = unit(4, seed ^ 1);
            let r = unit(4, seed ^ 2);
            let trace = forward(&p, &t, &[&r]).unwrap();
            let h0 = &trace.hidden[0];
            for h in &trace.hidden {
                for (x, x0) in h.iter().zip(h0) {
                    prop_assert!(x.abs() <= x0.abs().max(1.0) + 1e-12);
                }
            }
        }
    }
}
