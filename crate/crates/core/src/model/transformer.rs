use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{Model, LAYER_NORM_EPS};
use crate::numerics::{Graph, Rng, Scalar, Tensor, Var};

/// Parameter name → graph leaf for one forward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::CheckpointIncompatible(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Dropout switch for a forward pass. `Dropout::off()` gives eval mode.
pub struct Dropout<'r> {
    rng: Option<&'r mut Rng>,
    rate: f64,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { rng: None, rate: 0.0 }
    }

    pub fn on(rate: f64, rng: &'r mut Rng) -> Self {
        Dropout {
            rng: Some(rng),
            rate,
        }
    }

    fn apply<S: Scalar>(&mut self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

/// Fixed sinusoidal position table, `[len, d]` row-major.
pub fn positional_encoding<S: Scalar>(len: usize, d: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let freq = (10000f64).powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            out.push(S::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

/// Additive mask hiding future positions.
fn causal_mask<S: Scalar>(len: usize) -> Vec<S> {
    let mut m = vec![S::zero(); len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = S::neg_infinity();
        }
    }
    m
}

fn linear<S: Scalar>(g: &mut Graph<'_, S>, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let w = b.get(&format!("{name}.weight"))?;
    let bias = b.get(&format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, bias)
}

fn norm<S: Scalar>(g: &mut Graph<'_, S>, b: &Bound, x: Var, name: &str) -> Result<Var> {
    let gain = b.get(&format!("{name}.gain"))?;
    let bias = b.get(&format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

fn feed_forward<S: Scalar>(g: &mut Graph<'_, S>, b: &Bound, x: Var, name: &str, drop: &mut Dropout) -> Result<Var> {
    let h = linear(g, b, x, &format!("{name}.w1"))?;
    let h = g.relu(h);
    let h = drop.apply(g, h)?;
    linear(g, b, h, &format!("{name}.w2"))
}

/// `[len, heads·dk] -> [heads, len, dk]`
fn split_heads<S: Scalar>(g: &mut Graph<'_, S>, x: Var, heads: usize) -> Result<Var> {
    let (len, d) = (g.shape(x)[0], g.shape(x)[1]);
    let r = g.reshape(x, [len, heads, d / heads])?;
    g.swap_axes01(r)
}

#[allow(clippy::too_many_arguments)]
fn attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    b: &Bound,
    name: &str,
    query: Var,
    memory: Var,
    mask: Option<&[S]>,
    heads: usize,
    drop: &mut Dropout,
) -> Result<Var> {
    let d = g.shape(query)[1];
    let q = linear(g, b, query, &format!("{name}.q"))?;
    let k = linear(g, b, memory, &format!("{name}.k"))?;
    let v = linear(g, b, memory, &format!("{name}.v"))?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, S::of(1.0 / ((d / heads) as f64).sqrt()));
    let scores = match mask {
        Some(m) => g.add_const(scores, m)?,
        None => scores,
    };
    let weights = g.softmax(scores)?;
    let weights = drop.apply(g, weights)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.swap_axes01(ctx)?;
    let len = g.shape(ctx)[0];
    let ctx = g.reshape(ctx, [len, d])?;
    linear(g, b, ctx, &format!("{name}.out"))
}

impl<S: Scalar> Model<S> {
    /// Registers every parameter as a leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, S>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.to_string(), g.leaf(t)))
            .collect();
        Bound { vars }
    }

    /// Encoder output length for `frames` input frames.
    pub fn encoded_len(&self, frames: usize) -> usize {
        frames / self.config.downsample_factor
    }

    /// Encoder states `[T / k, d_model]` for features `[T, feat_dim]`.
    /// Trailing frames that do not fill a stack of `k` are dropped.
    pub fn encode_var(&self, g: &mut Graph<'_, S>, b: &Bound, x: &Tensor<S>, drop: &mut Dropout) -> Result<Var> {
        let cfg = &self.config;
        let k = cfg.downsample_factor;
        if x.shape().len() != 2 || x.shape()[1] != cfg.feat_dim {
            return Err(Error::shape("encode", x.shape(), &[0, cfg.feat_dim]));
        }
        let frames = x.shape()[0];
        let out_len = frames / k;
        if out_len == 0 {
            return Err(Error::InputTooShort { frames, needed: k });
        }
        let stacked = x.data()[..out_len * k * cfg.feat_dim].to_vec();
        let input = g.constant([out_len, k * cfg.feat_dim], stacked)?;
        let h = linear(g, b, input, "enc.embed")?;
        let mut h = g.add_const(h, &positional_encoding::<S>(out_len, cfg.d_model))?;
        h = drop.apply(g, h)?;
        for l in 0..cfg.enc_layers {
            let pre = format!("enc.layers.{l}");
            let n = norm(g, b, h, &format!("{pre}.norm1"))?;
            let a = attention(g, b, &format!("{pre}.self_attn"), n, n, None, cfg.heads, drop)?;
            let a = drop.apply(g, a)?;
            h = g.add(h, a)?;
            let n = norm(g, b, h, &format!("{pre}.norm2"))?;
            let f = feed_forward(g, b, n, &format!("{pre}.ff"), drop)?;
            let f = drop.apply(g, f)?;
            h = g.add(h, f)?;
        }
        norm(g, b, h, "enc.norm")
    }

    /// Per-frame log-distribution over `<blank>` and content, `[T', V + 1]`.
    pub fn ctc_head_var(&self, g: &mut Graph<'_, S>, b: &Bound, enc: Var) -> Result<Var> {
        let logits = linear(g, b, enc, "ctc")?;
        g.log_softmax(logits)
    }

    /// Position-wise log-distributions over content plus `<eos>`.
    ///
    /// With `causal`, position `l` sees only `y_in[..=l]` (the usual
    /// `<sos>`-prefixed teacher-forcing input); otherwise every position
    /// attends to the whole sequence and `<MASK>` may appear.
    pub fn decode_step_var(
        &self,
        g: &mut Graph<'_, S>,
        b: &Bound,
        y_in: &[usize],
        enc: Var,
        causal: bool,
        drop: &mut Dropout,
    ) -> Result<Var> {
        if !self.kind.has_decoder() {
            return Err(Error::ModelType {
                found: self.kind.to_string(),
                wanted: "decoding with the attention decoder".into(),
            });
        }
        if y_in.is_empty() {
            return Err(Error::Contract("decoder input is empty".into()));
        }
        let vocab = &self.vocab;
        if let Some(&bad) = y_in.iter().find(|&&t| t >= vocab.len() || t == vocab.blank() || t == vocab.pad()) {
            return Err(Error::Contract(format!("token id {bad} is not a decoder input")));
        }
        if causal && y_in.contains(&vocab.mask()) {
            return Err(Error::Contract("<MASK> in causal decoder input".into()));
        }
        let cfg = &self.config;
        let len = y_in.len();
        let embed = b.get("dec.embed")?;
        let h = g.gather_rows(embed, y_in)?;
        let mut h = g.add_const(h, &positional_encoding::<S>(len, cfg.d_model))?;
        h = drop.apply(g, h)?;
        let mask = causal.then(|| causal_mask::<S>(len));
        for l in 0..cfg.dec_layers {
            let pre = format!("dec.layers.{l}");
            let n = norm(g, b, h, &format!("{pre}.norm1"))?;
            let a = attention(g, b, &format!("{pre}.self_attn"), n, n, mask.as_deref(), cfg.heads, drop)?;
            let a = drop.apply(g, a)?;
            h = g.add(h, a)?;
            let n = norm(g, b, h, &format!("{pre}.norm2"))?;
            let a = attention(g, b, &format!("{pre}.src_attn"), n, enc, None, cfg.heads, drop)?;
            let a = drop.apply(g, a)?;
            h = g.add(h, a)?;
            let n = norm(g, b, h, &format!("{pre}.norm3"))?;
            let f = feed_forward(g, b, n, &format!("{pre}.ff"), drop)?;
            let f = drop.apply(g, f)?;
            h = g.add(h, f)?;
        }
        let h = norm(g, b, h, "dec.norm")?;
        let logits = linear(g, b, h, "dec.out")?;
        g.log_softmax(logits)
    }

    /// Eval-mode encoder output.
    pub fn encode(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::no_grad();
        let b = self.bind(&mut g);
        let enc = self.encode_var(&mut g, &b, x, &mut Dropout::off())?;
        Ok(g.to_tensor(enc))
    }

    /// Eval-mode CTC log-probabilities from encoder states.
    pub fn ctc_head(&self, enc: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::no_grad();
        let b = self.bind(&mut g);
        let e = g.leaf(enc);
        let lp = self.ctc_head_var(&mut g, &b, e)?;
        Ok(g.to_tensor(lp))
    }

    /// Eval-mode decoder pass over encoder states.
    pub fn decode_step(&self, y_in: &[usize], enc: &Tensor<S>, causal: bool) -> Result<Tensor<S>> {
        let mut g = Graph::no_grad();
        let b = self.bind(&mut g);
        let e = g.leaf(enc);
        let lp = self.decode_step_var(&mut g, &b, y_in, e, causal, &mut Dropout::off())?;
        Ok(g.to_tensor(lp))
    }
}
