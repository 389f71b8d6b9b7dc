use rayon::prelude::*;

use super::params::{DenseSlots, Layout, LstmSlots, PredictorParams};
use super::{write_position_embedding, ModelConfig, TrainingExample};
use crate::error::{Error, Result};

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

/// `out += W x` for row-major `W` of shape `[out.len(), x.len()]`.
#[inline]
fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// Activations of one direction of one LSTM layer, indexed by sequence position.
#[derive(Debug, Clone)]
pub(crate) struct DirCache {
    /// Post-activation gates `[i, f, g, o]`, `T x 4H`.
    gates: Vec<f64>,
    cell: Vec<f64>,
    pub(crate) hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    dirs: [DirCache; 2],
    /// `T x 2H`, forward half then backward half.
    pub(crate) out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct SeqCache {
    len: usize,
    input: Vec<f64>,
    layers: Vec<LayerCache>,
    dropout: Option<Vec<f64>>,
    /// Input activations of each MLP layer, `T x in_k`.
    mlp_in: Vec<Vec<f64>>,
    /// Pre-activations of each MLP layer, `T x out_k`.
    mlp_pre: Vec<Vec<f64>>,
    pub(crate) out: Vec<f64>,
}

fn lstm_dir_forward(p: &[f64], s: &LstmSlots, h: usize, xs: &[f64], len: usize, reverse: bool) -> DirCache {
    let w_ih = &p[s.w_ih..s.w_ih + 4 * h * s.input];
    let w_hh = &p[s.w_hh..s.w_hh + 4 * h * h];
    let bias = &p[s.bias..s.bias + 4 * h];
    let mut gates = vec![0.0; len * 4 * h];
    let mut cell = vec![0.0; len * h];
    let mut hidden = vec![0.0; len * h];
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut z = vec![0.0; 4 * h];
    for k in 0..len {
        let t = if reverse { len - 1 - k } else { k };
        z.copy_from_slice(bias);
        matvec_add(w_ih, &xs[t * s.input..(t + 1) * s.input], &mut z);
        matvec_add(w_hh, &h_prev, &mut z);
        let g = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            let i_g = sigmoid(z[j]);
            let f_g = sigmoid(z[h + j]);
            let c_g = z[2 * h + j].tanh();
            let o_g = sigmoid(z[3 * h + j]);
            g[j] = i_g;
            g[h + j] = f_g;
            g[2 * h + j] = c_g;
            g[3 * h + j] = o_g;
            let c = f_g * c_prev[j] + i_g * c_g;
            cell[t * h + j] = c;
            hidden[t * h + j] = o_g * c.tanh();
        }
        h_prev.copy_from_slice(&hidden[t * h..(t + 1) * h]);
        c_prev.copy_from_slice(&cell[t * h..(t + 1) * h]);
    }
    DirCache { gates, cell, hidden }
}

#[allow(clippy::too_many_arguments)]
fn lstm_dir_backward(
    p: &[f64],
    grad: &mut [f64],
    s: &LstmSlots,
    h: usize,
    xs: &[f64],
    len: usize,
    reverse: bool,
    cache: &DirCache,
    dh_ext: &[f64],
    dx: &mut [f64],
) {
    let w_ih = &p[s.w_ih..s.w_ih + 4 * h * s.input];
    let w_hh = &p[s.w_hh..s.w_hh + 4 * h * h];
    let order = |k: usize| if reverse { len - 1 - k } else { k };
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];
    for k in (0..len).rev() {
        let t = order(k);
        let (c_prev, h_prev) = if k > 0 {
            let tp = order(k - 1);
            (&cache.cell[tp * h..(tp + 1) * h], &cache.hidden[tp * h..(tp + 1) * h])
        } else {
            (&zeros[..], &zeros[..])
        };
        let g = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
        for j in 0..h {
            let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let dh = dh_ext[t * h + j] + dh_next[j];
            let tc = cache.cell[t * h + j].tanh();
            let d_o = dh * tc;
            let dc = dc_next[j] + dh * o_g * (1.0 - tc * tc);
            dz[j] = dc * c_g * i_g * (1.0 - i_g);
            dz[h + j] = dc * c_prev[j] * f_g * (1.0 - f_g);
            dz[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
            dz[3 * h + j] = d_o * o_g * (1.0 - o_g);
            dc_next[j] = dc * f_g;
        }
        let x = &xs[t * s.input..(t + 1) * s.input];
        let dxt = &mut dx[t * s.input..(t + 1) * s.input];
        dh_next.fill(0.0);
        for r in 0..4 * h {
            let d = dz[r];
            if d == 0.0 {
                continue;
            }
            grad[s.bias + r] += d;
            let row_ih = s.w_ih + r * s.input;
            axpy(d, x, &mut grad[row_ih..row_ih + s.input]);
            axpy(d, &w_ih[r * s.input..(r + 1) * s.input], dxt);
            let row_hh = s.w_hh + r * h;
            axpy(d, h_prev, &mut grad[row_hh..row_hh + h]);
            axpy(d, &w_hh[r * h..(r + 1) * h], &mut dh_next);
        }
    }
}

/// Runs both directions of one BiLSTM layer; output rows are `[h_fwd, h_bwd]`.
pub(crate) fn bilstm_layer(p: &[f64], slots: &[LstmSlots; 2], h: usize, xs: &[f64], len: usize) -> LayerCache {
    let fwd = lstm_dir_forward(p, &slots[0], h, xs, len, false);
    let bwd = lstm_dir_forward(p, &slots[1], h, xs, len, true);
    let mut out = vec![0.0; len * 2 * h];
    for t in 0..len {
        out[t * 2 * h..t * 2 * h + h].copy_from_slice(&fwd.hidden[t * h..(t + 1) * h]);
        out[t * 2 * h + h..(t + 1) * 2 * h].copy_from_slice(&bwd.hidden[t * h..(t + 1) * h]);
    }
    LayerCache { dirs: [fwd, bwd], out }
}

fn dense_forward(p: &[f64], d: &DenseSlots, x: &[f64], out: &mut [f64]) {
    out.copy_from_slice(&p[d.bias..d.bias + d.output]);
    matvec_add(&p[d.weight..d.weight + d.output * d.input], x, out);
}

pub(crate) struct Network<'a> {
    cfg: &'a ModelConfig,
    layout: &'a Layout,
    params: &'a [f64],
}

impl<'a> Network<'a> {
    pub(crate) fn new(cfg: &'a ModelConfig, layout: &'a Layout, params: &'a PredictorParams) -> Result<Self> {
        if params.len() != layout.len() {
            return Err(Error::Shape(format!(
                "parameter buffer has {} entries, config implies {}",
                params.len(),
                layout.len()
            )));
        }
        Ok(Self { cfg, layout, params: params.as_slice() })
    }

    fn check_inputs(&self, embedding: &[f64], steps: &[u32]) -> Result<()> {
        if embedding.len() != self.cfg.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt embedding has dim {}, model expects {}",
                embedding.len(),
                self.cfg.prompt_dim
            )));
        }
        if steps.is_empty() {
            return Err(Error::Validation("empty step sequence".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("steps must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Forward pass keeping every activation needed by [`Network::backward_seq`].
    /// `dropout` is a `T x 2H` multiplicative mask on the last BiLSTM output.
    pub(crate) fn forward_seq(&self, embedding: &[f64], steps: &[u32], dropout: Option<Vec<f64>>) -> Result<SeqCache> {
        self.check_inputs(embedding, steps)?;
        let p = self.params;
        let e = self.cfg.embed_dim;
        let h = self.layout.hidden;
        let len = steps.len();

        let mut base = vec![0.0; e];
        match &self.layout.projection {
            Some(d) => dense_forward(p, d, embedding, &mut base),
            None => base.copy_from_slice(embedding),
        }
        let mut input = vec![0.0; len * e];
        let mut pe = vec![0.0; e];
        for (t, &step) in steps.iter().enumerate() {
            let row = &mut input[t * e..(t + 1) * e];
            row.copy_from_slice(&base);
            if self.cfg.use_position {
                write_position_embedding(step, e, &mut pe)?;
                for (r, q) in row.iter_mut().zip(&pe) {
                    *r += q;
                }
            }
        }

        let mut layers: Vec<LayerCache> = Vec::with_capacity(self.layout.lstm.len());
        for slots in &self.layout.lstm {
            let xs = layers.last().map_or(&input[..], |l| &l.out[..]);
            let layer = bilstm_layer(p, slots, h, xs, len);
            layers.push(layer);
        }

        let top = &layers.last().expect("at least one layer").out;
        let mut act = match &dropout {
            Some(mask) => {
                if mask.len() != top.len() {
                    return Err(Error::Shape("dropout mask size mismatch".into()));
                }
                top.iter().zip(mask).map(|(a, m)| a * m).collect()
            }
            None => top.clone(),
        };

        let n_mlp = self.layout.mlp.len();
        let mut mlp_in = Vec::with_capacity(n_mlp);
        let mut mlp_pre = Vec::with_capacity(n_mlp);
        for (k, d) in self.layout.mlp.iter().enumerate() {
            let mut pre = vec![0.0; len * d.output];
            for t in 0..len {
                dense_forward(p, d, &act[t * d.input..(t + 1) * d.input], &mut pre[t * d.output..(t + 1) * d.output]);
            }
            let next: Vec<f64> = if k + 1 < n_mlp {
                pre.iter().map(|&v| v.max(0.0)).collect()
            } else {
                pre.iter().map(|&v| sigmoid(v)).collect()
            };
            mlp_in.push(std::mem::replace(&mut act, next));
            mlp_pre.push(pre);
        }

        Ok(SeqCache { len, input, layers, dropout, mlp_in, mlp_pre, out: act })
    }

    /// Accumulates into `grad` the gradient of `sum_t d_out[t] * out[t]`.
    pub(crate) fn backward_seq(&self, embedding: &[f64], cache: &SeqCache, d_out: &[f64], grad: &mut PredictorParams) {
        let p = self.params;
        let g = grad.as_mut_slice();
        let len = cache.len;
        let h = self.layout.hidden;
        let n_mlp = self.layout.mlp.len();

        // d(loss)/d(pre-activation) of the current MLP layer, T x out_k
        let mut d_pre: Vec<f64> = d_out.iter().zip(&cache.out).map(|(d, s)| d * s * (1.0 - s)).collect();
        for k in (0..n_mlp).rev() {
            let d = &self.layout.mlp[k];
            let x = &cache.mlp_in[k];
            let mut d_in = vec![0.0; len * d.input];
            for t in 0..len {
                let dp = &d_pre[t * d.output..(t + 1) * d.output];
                let xt = &x[t * d.input..(t + 1) * d.input];
                let dxt = &mut d_in[t * d.input..(t + 1) * d.input];
                for (r, &dv) in dp.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    g[d.bias + r] += dv;
                    let row = d.weight + r * d.input;
                    axpy(dv, xt, &mut g[row..row + d.input]);
                    axpy(dv, &p[row..row + d.input], dxt);
                }
            }
            if k > 0 {
                let pre_prev = &cache.mlp_pre[k - 1];
                for (dv, &z) in d_in.iter_mut().zip(pre_prev) {
                    if z <= 0.0 {
                        *dv = 0.0;
                    }
                }
            } else if let Some(mask) = &cache.dropout {
                for (dv, m) in d_in.iter_mut().zip(mask) {
                    *dv *= m;
                }
            }
            d_pre = d_in;
        }

        // d_pre now holds d(loss)/d(top BiLSTM output), T x 2H.
        let mut d_layer_out = d_pre;
        for (l, slots) in self.layout.lstm.iter().enumerate().rev() {
            let xs = if l == 0 { &cache.input[..] } else { &cache.layers[l - 1].out[..] };
            let in_dim = slots[0].input;
            let mut dx = vec![0.0; len * in_dim];
            for (dir, reverse) in [(0, false), (1, true)] {
                let mut dh_ext = vec![0.0; len * h];
                for t in 0..len {
                    let src = t * 2 * h + dir * h;
                    dh_ext[t * h..(t + 1) * h].copy_from_slice(&d_layer_out[src..src + h]);
                }
                lstm_dir_backward(p, g, &slots[dir], h, xs, len, reverse, &cache.layers[l].dirs[dir], &dh_ext, &mut dx);
            }
            d_layer_out = dx;
        }

        // Layer-0 input is base + position; only the base depends on parameters.
        if let Some(d) = &self.layout.projection {
            let e = self.cfg.embed_dim;
            let mut d_base = vec![0.0; e];
            for t in 0..len {
                for (acc, v) in d_base.iter_mut().zip(&d_layer_out[t * e..(t + 1) * e]) {
                    *acc += v;
                }
            }
            for (r, &dv) in d_base.iter().enumerate() {
                g[d.bias + r] += dv;
                let row = d.weight + r * d.input;
                axpy(dv, embedding, &mut g[row..row + d.input]);
            }
        }
    }
}

/// Per-step scores in (0, 1) for one prompt, dropout disabled.
pub fn forward(params: &PredictorParams, config: &ModelConfig, prompt_embedding: &[f64], steps: &[u32]) -> Result<Vec<f64>> {
    let layout = Layout::new(config);
    let net = Network::new(config, &layout, params)?;
    Ok(net.forward_seq(prompt_embedding, steps, None)?.out)
}

/// Mean squared error over every step of every example in `batch`, and its
/// gradient with respect to all parameters. Dropout is disabled.
pub fn backward(params: &PredictorParams, config: &ModelConfig, batch: &[TrainingExample]) -> Result<(f64, PredictorParams)> {
    let layout = Layout::new(config);
    batch_gradient(config, &layout, params, batch, None)
}

/// Shared by [`backward`] and the training loop. Per-example gradients are
/// computed in parallel and summed in batch order, so the result does not
/// depend on the thread count.
pub(crate) fn batch_gradient(
    config: &ModelConfig,
    layout: &Layout,
    params: &PredictorParams,
    batch: &[TrainingExample],
    masks: Option<&[Vec<f64>]>,
) -> Result<(f64, PredictorParams)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let net = Network::new(config, layout, params)?;
    let seqs: Vec<Vec<u32>> = batch.iter().map(|ex| config.sequence_steps(ex.t_n())).collect();
    let total: usize = seqs.iter().map(Vec::len).sum();
    let scale = 2.0 / total as f64;

    let per_example: Vec<Result<(f64, PredictorParams)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let steps = &seqs[i];
            let mask = masks.map(|m| m[i].clone());
            let cache = net.forward_seq(ex.prompt_embedding.values(), steps, mask)?;
            let targets = ex.targets_at(steps);
            let mut sse = 0.0;
            let d_out: Vec<f64> = cache
                .out
                .iter()
                .zip(&targets)
                .map(|(s, y)| {
                    sse += (s - y) * (s - y);
                    scale * (s - y)
                })
                .collect();
            let mut grad = PredictorParams::zeros(layout);
            net.backward_seq(ex.prompt_embedding.values(), &cache, &d_out, &mut grad);
            Ok((sse, grad))
        })
        .collect();

    let mut sse = 0.0;
    let mut grad = PredictorParams::zeros(layout);
    for r in per_example {
        let (s, g) = r?;
        sse += s;
        grad.add_assign(&g);
    }
    Ok((sse / total as f64, grad))
}
