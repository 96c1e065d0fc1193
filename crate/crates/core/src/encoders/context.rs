use ncc_tensor::{Graph, NodeId, ParamId, ParamStore, Scalar, SegmentIndex, Tensor};
use rand::Rng;

use super::{glorot, lookup};
use crate::model::{ContextEncoderKind, TrainConfig};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
struct GruParams {
    wx: ParamId,
    uh: ParamId,
    bx: ParamId,
    bh: ParamId,
    hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockParams {
    wqkv: ParamId,
    bqkv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
enum Layers {
    Gru(Vec<GruParams>),
    Bigru(GruParams, GruParams),
    Cnn(Vec<(ParamId, ParamId)>),
    Transformer {
        input: (ParamId, ParamId),
        blocks: Vec<BlockParams>,
        output: (ParamId, ParamId),
    },
}

/// Summarises a sequence of (optionally annotated) token encodings into one
/// `H`-dimensional context vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEncoder {
    kind: ContextEncoderKind,
    din: usize,
    h: usize,
    width: usize,
    heads: usize,
    layers: Layers,
}

fn add_gru<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    din: usize,
    h: usize,
    rng: &mut impl Rng,
) {
    store.add(format!("{prefix}.wx"), glorot(din, 3 * h, rng));
    store.add(format!("{prefix}.uh"), glorot(h, 3 * h, rng));
    store.add(format!("{prefix}.bx"), Tensor::zeros(1, 3 * h));
    store.add(format!("{prefix}.bh"), Tensor::zeros(1, 3 * h));
}

fn bind_gru<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> Result<GruParams> {
    let uh = lookup(store, &format!("{prefix}.uh"))?;
    Ok(GruParams {
        wx: lookup(store, &format!("{prefix}.wx"))?,
        bx: lookup(store, &format!("{prefix}.bx"))?,
        bh: lookup(store, &format!("{prefix}.bh"))?,
        hidden: store.get(uh).rows(),
        uh,
    })
}

fn add_linear<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, i: usize, o: usize, rng: &mut impl Rng) {
    store.add(format!("{prefix}.w"), glorot(i, o, rng));
    store.add(format!("{prefix}.b"), Tensor::zeros(1, o));
}

fn bind_pair<S: Scalar>(store: &ParamStore<S>, prefix: &str, a: &str, b: &str) -> Result<(ParamId, ParamId)> {
    Ok((
        lookup(store, &format!("{prefix}.{a}"))?,
        lookup(store, &format!("{prefix}.{b}"))?,
    ))
}

fn linear<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: NodeId,
    (w, b): (ParamId, ParamId),
) -> Result<NodeId> {
    let wn = g.param(store, w)?;
    let bn = g.param(store, b)?;
    let y = g.matmul(x, wn)?;
    Ok(g.add_row(y, bn)?)
}

/// Sinusoidal position table: `sin` on even columns, `cos` on odd ones.
pub fn positional_encoding<S: Scalar>(len: usize, width: usize) -> Tensor<S> {
    let mut t = Tensor::zeros(len, width);
    for pos in 0..len {
        for c in 0..width {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * i / width as f64);
            let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, c, S::from_f64(v));
        }
    }
    t
}

impl ContextEncoder {
    /// Input width: `D`, plus one when the receiver bit is appended.
    pub fn input_width(config: &TrainConfig) -> usize {
        config.d + usize::from(config.annotate)
    }

    pub fn init<S: Scalar>(config: &TrainConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) {
        let din = Self::input_width(config);
        let h = config.h;
        match config.context_encoder {
            ContextEncoderKind::Gru => {
                for l in 0..config.layers {
                    add_gru(store, &format!("ctx.gru{l}"), if l == 0 { din } else { h }, h, rng);
                }
            }
            ContextEncoderKind::Bigru => {
                add_gru(store, "ctx.fwd", din, h / 2, rng);
                add_gru(store, "ctx.bwd", din, h / 2, rng);
            }
            ContextEncoderKind::Cnn => {
                for l in 0..config.layers {
                    let i = if l == 0 { din } else { h };
                    add_linear(store, &format!("ctx.conv{l}"), config.cnn_width * i, h, rng);
                }
            }
            ContextEncoderKind::Transformer => {
                add_linear(store, "ctx.in", din, h, rng);
                for l in 0..config.layers {
                    let p = format!("ctx.block{l}");
                    add_linear(store, &format!("{p}.qkv"), h, 3 * h, rng);
                    add_linear(store, &format!("{p}.attn_out"), h, h, rng);
                    store.add(format!("{p}.ln1.g"), Tensor::filled(1, h, S::one()));
                    store.add(format!("{p}.ln1.b"), Tensor::zeros(1, h));
                    add_linear(store, &format!("{p}.ff1"), h, 4 * h, rng);
                    add_linear(store, &format!("{p}.ff2"), 4 * h, h, rng);
                    store.add(format!("{p}.ln2.g"), Tensor::filled(1, h, S::one()));
                    store.add(format!("{p}.ln2.b"), Tensor::zeros(1, h));
                }
                add_linear(store, "ctx.out", h, h, rng);
            }
        }
    }

    pub fn bind<S: Scalar>(config: &TrainConfig, store: &ParamStore<S>) -> Result<Self> {
        let layers = match config.context_encoder {
            ContextEncoderKind::Gru => Layers::Gru(
                (0..config.layers)
                    .map(|l| bind_gru(store, &format!("ctx.gru{l}")))
                    .collect::<Result<_>>()?,
            ),
            ContextEncoderKind::Bigru => Layers::Bigru(bind_gru(store, "ctx.fwd")?, bind_gru(store, "ctx.bwd")?),
            ContextEncoderKind::Cnn => Layers::Cnn(
                (0..config.layers)
                    .map(|l| bind_pair(store, &format!("ctx.conv{l}"), "w", "b"))
                    .collect::<Result<_>>()?,
            ),
            ContextEncoderKind::Transformer => Layers::Transformer {
                input: bind_pair(store, "ctx.in", "w", "b")?,
                blocks: (0..config.layers)
                    .map(|l| {
                        let p = format!("ctx.block{l}");
                        Ok(BlockParams {
                            wqkv: lookup(store, &format!("{p}.qkv.w"))?,
                            bqkv: lookup(store, &format!("{p}.qkv.b"))?,
                            wo: lookup(store, &format!("{p}.attn_out.w"))?,
                            bo: lookup(store, &format!("{p}.attn_out.b"))?,
                            ln1: bind_pair(store, &format!("{p}.ln1"), "g", "b")?,
                            ff1: bind_pair(store, &format!("{p}.ff1"), "w", "b")?,
                            ff2: bind_pair(store, &format!("{p}.ff2"), "w", "b")?,
                            ln2: bind_pair(store, &format!("{p}.ln2"), "g", "b")?,
                        })
                    })
                    .collect::<Result<_>>()?,
                output: bind_pair(store, "ctx.out", "w", "b")?,
            },
        };
        Ok(Self {
            kind: config.context_encoder,
            din: Self::input_width(config),
            h: config.h,
            width: config.cnn_width,
            heads: config.heads,
            layers,
        })
    }

    pub fn kind(&self) -> ContextEncoderKind {
        self.kind
    }

    pub fn output_width(&self) -> usize {
        self.h
    }

    /// Encodes a batch of sequences. `inputs` is an `n x din` node of token
    /// encodings and each sequence lists row indices into it, oldest first.
    /// Returns a `B x H` node, one row per sequence.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        inputs: NodeId,
        seqs: &[Vec<usize>],
    ) -> Result<NodeId> {
        if g.value(inputs).cols() != self.din {
            return Err(Error::Data(format!(
                "context encoder expects width {}, got {}",
                self.din,
                g.value(inputs).cols()
            )));
        }
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::Data("cannot encode an empty context".into()));
        }
        match &self.layers {
            Layers::Gru(layers) => {
                let mut steps = StepInputs::Rows(inputs);
                let mut last = None;
                for layer in layers {
                    let (h, outs) = run_gru(g, store, layer, &steps, seqs)?;
                    steps = StepInputs::Steps(outs);
                    last = Some(h);
                }
                Ok(last.expect("at least one layer"))
            }
            Layers::Bigru(fwd, bwd) => {
                let (hf, _) = run_gru(g, store, fwd, &StepInputs::Rows(inputs), seqs)?;
                let rev: Vec<Vec<usize>> = seqs.iter().map(|s| s.iter().rev().copied().collect()).collect();
                let (hb, _) = run_gru(g, store, bwd, &StepInputs::Rows(inputs), &rev)?;
                Ok(g.concat_cols(&[hf, hb])?)
            }
            Layers::Cnn(convs) => self.run_cnn(g, store, convs, inputs, seqs),
            Layers::Transformer { input, blocks, output } => {
                let mut outs = Vec::with_capacity(seqs.len());
                for s in seqs {
                    outs.push(self.run_transformer(g, store, *input, blocks, *output, inputs, s, None)?);
                }
                Ok(g.concat_rows(&outs)?)
            }
        }
    }

    fn run_cnn<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        convs: &[(ParamId, ParamId)],
        inputs: NodeId,
        seqs: &[Vec<usize>],
    ) -> Result<NodeId> {
        let w = self.width;
        // Per-sequence row blocks of the current layer's input.
        let mut blocks: Vec<NodeId> = seqs
            .iter()
            .map(|s| g.gather_rows(inputs, s))
            .collect::<Result<_, _>>()?;
        let mut out = None;
        for (l, &params) in convs.iter().enumerate() {
            let mut windows = Vec::with_capacity(blocks.len());
            let mut seg = Vec::new();
            for (b, &x) in blocks.iter().enumerate() {
                let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
                let x = if rows < w {
                    let pad = g.constant(Tensor::zeros(w - rows, cols))?;
                    g.concat_rows(&[pad, x])?
                } else {
                    x
                };
                let u = g.unfold(x, w)?;
                seg.extend(std::iter::repeat_n(b, g.value(u).rows()));
                windows.push(u);
            }
            let stacked = g.concat_rows(&windows)?;
            let y = linear(g, store, stacked, params)?;
            let y = g.relu(y)?;
            if l + 1 == convs.len() {
                let seg = SegmentIndex::new(seg, seqs.len())?;
                out = Some(g.segment_max(y, &seg)?);
            } else {
                let mut start = 0;
                blocks = Vec::with_capacity(seqs.len());
                for b in 0..seqs.len() {
                    let n = seg.iter().filter(|&&s| s == b).count();
                    let idx: Vec<usize> = (start..start + n).collect();
                    blocks.push(g.gather_rows(y, &idx)?);
                    start += n;
                }
            }
        }
        Ok(out.expect("at least one layer"))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_transformer<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        input: (ParamId, ParamId),
        blocks: &[BlockParams],
        output: (ParamId, ParamId),
        inputs: NodeId,
        seq: &[usize],
        mut attention: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let h = self.h;
        let dh = h / self.heads;
        let x = g.gather_rows(inputs, seq)?;
        let z = linear(g, store, x, input)?;
        let pe = g.constant(positional_encoding(seq.len(), h))?;
        let mut z = g.add(z, pe)?;
        for blk in blocks {
            let qkv = linear(g, store, z, (blk.wqkv, blk.bqkv))?;
            let mut heads = Vec::with_capacity(self.heads);
            for i in 0..self.heads {
                let q = g.slice_cols(qkv, i * dh, dh)?;
                let k = g.slice_cols(qkv, h + i * dh, dh)?;
                let v = g.slice_cols(qkv, 2 * h + i * dh, dh)?;
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
                let a = g.softmax_rows(s)?;
                if let Some(trace) = attention.as_deref_mut() {
                    trace.push(a);
                }
                heads.push(g.matmul(a, v)?);
            }
            let o = g.concat_cols(&heads)?;
            let attn = linear(g, store, o, (blk.wo, blk.bo))?;
            let r = g.add(z, attn)?;
            z = layer_norm(g, store, r, blk.ln1)?;
            let f = linear(g, store, z, blk.ff1)?;
            let f = g.relu(f)?;
            let f = linear(g, store, f, blk.ff2)?;
            let r = g.add(z, f)?;
            z = layer_norm(g, store, r, blk.ln2)?;
        }
        let last = g.gather_rows(z, &[seq.len() - 1])?;
        linear(g, store, last, output)
    }

    /// Attention matrices (one per layer and head) of a transformer encoder
    /// for a single sequence of input rows.
    pub fn attention_maps<S: Scalar>(&self, store: &ParamStore<S>, inputs: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        let Layers::Transformer { input, blocks, output } = &self.layers else {
            return Err(Error::Config("attention maps need a transformer encoder".into()));
        };
        let mut g = Graph::new();
        let x = g.constant(inputs.clone())?;
        let seq: Vec<usize> = (0..inputs.rows()).collect();
        let mut trace = Vec::new();
        self.run_transformer(&mut g, store, *input, blocks, *output, x, &seq, Some(&mut trace))?;
        Ok(trace.into_iter().map(|n| g.value(n).clone()).collect())
    }
}

fn layer_norm<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: NodeId,
    (gain, bias): (ParamId, ParamId),
) -> Result<NodeId> {
    let gn = g.param(store, gain)?;
    let bn = g.param(store, bias)?;
    Ok(g.layer_norm(x, gn, bn, LN_EPS)?)
}

enum StepInputs {
    /// Token rows shared by all sequences, indexed through the sequences.
    Rows(NodeId),
    /// One `B x width` node per time step from a lower layer.
    Steps(Vec<NodeId>),
}

/// Runs one GRU layer over right-aligned sequences: sequence `b` occupies the
/// last `len_b` of `T` steps and its state stays at zero before that.
/// Returns the final `B x H` state and the state after every step.
fn run_gru<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    p: &GruParams,
    inputs: &StepInputs,
    seqs: &[Vec<usize>],
) -> Result<(NodeId, Vec<NodeId>)> {
    let hd = p.hidden;
    let b = seqs.len();
    let t_max = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let wx = g.param(store, p.wx)?;
    let bx = g.param(store, p.bx)?;
    let uh = g.param(store, p.uh)?;
    let bh = g.param(store, p.bh)?;

    let projected = match inputs {
        StepInputs::Rows(x) => {
            let y = g.matmul(*x, wx)?;
            Some(g.add_row(y, bx)?)
        }
        StepInputs::Steps(_) => None,
    };

    let mut h = g.constant(Tensor::zeros(b, hd))?;
    let mut outs = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let active: Vec<bool> = seqs.iter().map(|s| t + s.len() >= t_max).collect();
        let xp = match (inputs, projected) {
            (StepInputs::Rows(_), Some(proj)) => {
                let idx: Vec<usize> = seqs
                    .iter()
                    .map(|s| {
                        let offset = t_max - s.len();
                        if t >= offset {
                            s[t - offset]
                        } else {
                            s[0]
                        }
                    })
                    .collect();
                g.gather_rows(proj, &idx)?
            }
            (StepInputs::Steps(steps), _) => {
                let y = g.matmul(steps[t], wx)?;
                g.add_row(y, bx)?
            }
            _ => unreachable!(),
        };
        let hp = g.matmul(h, uh)?;
        let hp = g.add_row(hp, bh)?;
        let xz = g.slice_cols(xp, 0, hd)?;
        let xr = g.slice_cols(xp, hd, hd)?;
        let xn = g.slice_cols(xp, 2 * hd, hd)?;
        let hz = g.slice_cols(hp, 0, hd)?;
        let hr = g.slice_cols(hp, hd, hd)?;
        let hn = g.slice_cols(hp, 2 * hd, hd)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n)?;
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        let next = g.add(n, zd)?;
        h = if active.iter().all(|&a| a) {
            next
        } else {
            g.select_rows(&active, next, h)?
        };
        outs.push(h);
    }
    Ok((h, outs))
}
