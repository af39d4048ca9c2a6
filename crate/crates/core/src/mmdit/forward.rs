//! Double- and single-stream transformer blocks with residual tap points.
//!
//! Block `ℓ` for `ℓ < D` is a double-stream block: text and image tokens keep
//! separate parameter sets but attend jointly over the concatenation
//! `[text; image]`. Blocks `D..D+G` are single-stream: one shared parameter set
//! over the concatenated sequence. Every block has two sublayers, attention
//! (`r = 1`) then MLP (`r = 2`), each feeding a skip connection
//! `x ← x + F`. A [`ResidualHook`] sees every `F` before it is added.

use super::config::ModelConfig;
use super::weights::{stream_name, Weights};
use crate::error::{Error, Result};
use crate::tensor::{matmul_bt, softmax_in_place, FeatureMatrix};

const LN_EPS: f64 = 1e-6;

/// Text tokens, image tokens and the timestep embedding flowing through the blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    pub text: FeatureMatrix,
    pub image: FeatureMatrix,
    pub temb: Vec<f64>,
}

impl TokenState {
    pub fn is_finite(&self) -> bool {
        self.text.is_finite() && self.image.is_finite() && self.temb.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sublayer {
    Attention,
    Mlp,
}

impl Sublayer {
    /// 1-based sublayer index `r`.
    pub fn index(self) -> usize {
        match self {
            Sublayer::Attention => 1,
            Sublayer::Mlp => 2,
        }
    }
}

/// Which rows a residual record covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    /// Text rows of a double-stream block (`T` rows).
    Text,
    /// Image rows of a double-stream block (`S` rows).
    Image,
    /// The concatenated `[text; image]` sequence of a single-stream block.
    Joint,
}

impl Stream {
    /// Row range of image tokens inside a record of this stream.
    pub fn image_rows(self, prompt_len: usize, image_len: usize) -> std::ops::Range<usize> {
        match self {
            Stream::Text => 0..0,
            Stream::Image => 0..image_len,
            Stream::Joint => prompt_len..prompt_len + image_len,
        }
    }
}

/// One sublayer output `F_{ℓ,r}` before its skip connection.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRecord {
    pub block: usize,
    pub sublayer: Sublayer,
    pub stream: Stream,
    pub values: FeatureMatrix,
}

impl ResidualRecord {
    pub fn same_slot(&self, other: &Self) -> bool {
        self.block == other.block && self.sublayer == other.sublayer && self.stream == other.stream
    }
}

/// Per-head image queries and text keys at one double-stream block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub block: usize,
    /// `heads` matrices of shape `S × d`.
    pub image_queries: Vec<FeatureMatrix>,
    /// `heads` matrices of shape `T × d`.
    pub text_keys: Vec<FeatureMatrix>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum ResidualTaps {
    #[default]
    None,
    All,
    Blocks(Vec<usize>),
}

impl ResidualTaps {
    fn wants(&self, block: usize) -> bool {
        match self {
            ResidualTaps::None => false,
            ResidualTaps::All => true,
            ResidualTaps::Blocks(b) => b.contains(&block),
        }
    }
}

/// What a forward pass should hand back besides the output state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Taps {
    pub residuals: ResidualTaps,
    /// Double-stream block indices at which to capture attention.
    pub attention: Vec<usize>,
}

impl Taps {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all_residuals() -> Self {
        Self {
            residuals: ResidualTaps::All,
            attention: Vec::new(),
        }
    }

    pub fn attention_at(block: usize) -> Self {
        Self {
            residuals: ResidualTaps::None,
            attention: vec![block],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Double,
    Single,
}

/// Inputs to one sublayer, exactly as the base weights see them.
#[derive(Debug, Clone, Copy)]
pub enum SiteInput<'a> {
    Double {
        text: &'a FeatureMatrix,
        image: &'a FeatureMatrix,
    },
    Single {
        joint: &'a FeatureMatrix,
    },
}

/// A residual-producing sublayer together with its input.
#[derive(Debug, Clone, Copy)]
pub struct Site<'a> {
    /// Global block index `ℓ`.
    pub block: usize,
    pub kind: BlockKind,
    /// Index within its kind (`ℓ` for double blocks, `ℓ − D` for single ones).
    pub local: usize,
    pub sublayer: Sublayer,
    pub input: SiteInput<'a>,
    pub temb: &'a [f64],
}

/// Observes and may overwrite residuals before each skip connection.
pub trait ResidualHook {
    /// Called once per denoising step before the velocity evaluation.
    fn begin_step(&mut self, _step: usize, _t: f64) -> Result<()> {
        Ok(())
    }

    fn on_site(&mut self, _site: &Site<'_>, _records: &mut [ResidualRecord]) -> Result<()> {
        Ok(())
    }
}

/// A hook that leaves every residual untouched.
pub struct NoHook;

impl ResidualHook for NoHook {}

impl<H: ResidualHook + ?Sized> ResidualHook for &mut H {
    fn begin_step(&mut self, step: usize, t: f64) -> Result<()> {
        (**self).begin_step(step, t)
    }

    fn on_site(&mut self, site: &Site<'_>, records: &mut [ResidualRecord]) -> Result<()> {
        (**self).on_site(site, records)
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

fn layer_norm(x: &FeatureMatrix) -> FeatureMatrix {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// `silu(temb) · Wᵀ` as a plain vector.
fn modulation(temb: &[f64], w: &FeatureMatrix) -> Vec<f64> {
    let act: Vec<f64> = temb.iter().map(|&v| silu(v)).collect();
    (0..w.rows())
        .map(|o| {
            let row = w.row(o);
            let mut acc = 0.0;
            for k in 0..act.len() {
                acc += row[k] * act[k];
            }
            acc
        })
        .collect()
}

/// `layer_norm(x)·(1 + scale) + shift`.
fn modulated_norm(x: &FeatureMatrix, shift: &[f64], scale: &[f64]) -> FeatureMatrix {
    let mut out = layer_norm(x);
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = *v * (1.0 + scale[j]) + shift[j];
        }
    }
    out
}

/// Shift/scale pairs for the attention and MLP sublayers of one parameter set.
fn block_modulation(temb: &[f64], w: &FeatureMatrix, c: usize, sub: Sublayer) -> (Vec<f64>, Vec<f64>) {
    let m = modulation(temb, w);
    let base = match sub {
        Sublayer::Attention => 0,
        Sublayer::Mlp => 2 * c,
    };
    (m[base..base + c].to_vec(), m[base + c..base + 2 * c].to_vec())
}

fn mlp(x: &FeatureMatrix, fc1: &FeatureMatrix, fc2: &FeatureMatrix) -> Result<FeatureMatrix> {
    let h = matmul_bt(x, fc1)?.map(gelu);
    matmul_bt(&h, fc2)
}

/// Multi-head softmax attention over the rows of `q`, `k`, `v` (`n × C`).
fn attention(cfg: &ModelConfig, q: &FeatureMatrix, k: &FeatureMatrix, v: &FeatureMatrix) -> FeatureMatrix {
    let n = q.rows();
    let d = cfg.head_dim;
    let inv = 1.0 / (d as f64).sqrt();
    let mut out = FeatureMatrix::zeros(n, cfg.channels);
    let mut scores = vec![0.0; n];
    for h in 0..cfg.heads {
        let off = h * d;
        for i in 0..n {
            let qi = &q.row(i)[off..off + d];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k.row(j)[off..off + d];
                let mut acc = 0.0;
                for t in 0..d {
                    acc += qi[t] * kj[t];
                }
                *s = acc * inv;
            }
            softmax_in_place(&mut scores);
            let orow = &mut out.row_mut(i)[off..off + d];
            for (j, &p) in scores.iter().enumerate() {
                let vj = &v.row(j)[off..off + d];
                for t in 0..d {
                    orow[t] += p * vj[t];
                }
            }
        }
    }
    out
}

/// Splits a `n × 3C` projection into per-head query/key/value blocks.
fn split_qkv(qkv: &FeatureMatrix, c: usize) -> (FeatureMatrix, FeatureMatrix, FeatureMatrix) {
    (
        qkv.slice_cols(0, c),
        qkv.slice_cols(c, 2 * c),
        qkv.slice_cols(2 * c, 3 * c),
    )
}

fn per_head(m: &FeatureMatrix, cfg: &ModelConfig) -> Vec<FeatureMatrix> {
    (0..cfg.heads)
        .map(|h| m.slice_cols(h * cfg.head_dim, (h + 1) * cfg.head_dim))
        .collect()
}

/// Computes the residuals a sublayer produces for `site.input` under `weights`.
///
/// Double-stream sites yield `[text, image]` records, single-stream sites one
/// joint record. If `capture` is given and the site is a double-stream
/// attention sublayer, the image queries and text keys are appended to it.
pub fn site_residuals(
    cfg: &ModelConfig,
    weights: &Weights,
    site: &Site<'_>,
    capture: Option<&mut Vec<AttentionCapture>>,
) -> Result<Vec<ResidualRecord>> {
    let c = cfg.channels;
    let record = |stream, values| ResidualRecord {
        block: site.block,
        sublayer: site.sublayer,
        stream,
        values,
    };
    match (site.input, site.sublayer) {
        (SiteInput::Double { text, image }, Sublayer::Attention) => {
            let prefix = |txt| format!("double.{}.{}", site.local, stream_name(txt));
            let mut qkv = Vec::with_capacity(2);
            for (x, txt) in [(text, true), (image, false)] {
                let p = prefix(txt);
                let (shift, scale) =
                    block_modulation(site.temb, weights.w(&format!("{p}.mod")), c, Sublayer::Attention);
                let xn = modulated_norm(x, &shift, &scale);
                qkv.push(split_qkv(&matmul_bt(&xn, weights.w(&format!("{p}.qkv")))?, c));
            }
            let (tq, tk, tv) = &qkv[0];
            let (iq, ik, iv) = &qkv[1];
            if let Some(cap) = capture {
                cap.push(AttentionCapture {
                    block: site.block,
                    image_queries: per_head(iq, cfg),
                    text_keys: per_head(tk, cfg),
                });
            }
            let q = tq.vstack(iq)?;
            let k = tk.vstack(ik)?;
            let v = tv.vstack(iv)?;
            let att = attention(cfg, &q, &k, &v);
            let t = text.rows();
            let att_text = att.slice_rows(0, t);
            let att_image = att.slice_rows(t, att.rows());
            Ok(vec![
                record(
                    Stream::Text,
                    matmul_bt(&att_text, weights.w(&format!("{}.proj", prefix(true))))?,
                ),
                record(
                    Stream::Image,
                    matmul_bt(&att_image, weights.w(&format!("{}.proj", prefix(false))))?,
                ),
            ])
        }
        (SiteInput::Double { text, image }, Sublayer::Mlp) => {
            let mut out = Vec::with_capacity(2);
            for (x, txt, stream) in [(text, true, Stream::Text), (image, false, Stream::Image)] {
                let p = format!("double.{}.{}", site.local, stream_name(txt));
                let (shift, scale) =
                    block_modulation(site.temb, weights.w(&format!("{p}.mod")), c, Sublayer::Mlp);
                let xn = modulated_norm(x, &shift, &scale);
                let f = mlp(&xn, weights.w(&format!("{p}.fc1")), weights.w(&format!("{p}.fc2")))?;
                out.push(record(stream, f));
            }
            Ok(out)
        }
        (SiteInput::Single { joint }, sub) => {
            let p = format!("single.{}", site.local);
            let (shift, scale) = block_modulation(site.temb, weights.w(&format!("{p}.mod")), c, sub);
            let xn = modulated_norm(joint, &shift, &scale);
            let f = match sub {
                Sublayer::Attention => {
                    let (q, k, v) = split_qkv(&matmul_bt(&xn, weights.w(&format!("{p}.qkv")))?, c);
                    matmul_bt(&attention(cfg, &q, &k, &v), weights.w(&format!("{p}.proj")))?
                }
                Sublayer::Mlp => mlp(&xn, weights.w(&format!("{p}.fc1")), weights.w(&format!("{p}.fc2")))?,
            };
            Ok(vec![record(Stream::Joint, f)])
        }
    }
}

fn check_state(cfg: &ModelConfig, state: &TokenState) -> Result<()> {
    let c = cfg.channels;
    if state.text.shape() != (cfg.prompt_len, c) {
        return Err(Error::shape(
            "forward_pass",
            format!("text tokens {:?}, expected ({}, {c})", state.text.shape(), cfg.prompt_len),
        ));
    }
    if state.image.shape() != (cfg.image_tokens(), c) {
        return Err(Error::shape(
            "forward_pass",
            format!(
                "image tokens {:?}, expected ({}, {c})",
                state.image.shape(),
                cfg.image_tokens()
            ),
        ));
    }
    if state.temb.len() != c {
        return Err(Error::shape(
            "forward_pass",
            format!("timestep embedding has {} entries, expected {c}", state.temb.len()),
        ));
    }
    Ok(())
}

/// Output of one pass through all blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub state: TokenState,
    pub residuals: Vec<ResidualRecord>,
    pub captures: Vec<AttentionCapture>,
}

/// Runs every block under `weights`, letting `hook` rewrite each residual
/// before its skip connection. Tapped records hold the values actually added.
pub fn forward_with(
    cfg: &ModelConfig,
    weights: &Weights,
    state: &TokenState,
    taps: &Taps,
    hook: &mut dyn ResidualHook,
) -> Result<ForwardOutput> {
    check_state(cfg, state)?;
    if let Some(&b) = taps.attention.iter().find(|&&b| b >= cfg.double_blocks) {
        return Err(Error::param(format!(
            "attention capture block {b} is not a double-stream block (D = {})",
            cfg.double_blocks
        )));
    }
    let temb = state.temb.as_slice();
    let mut text = state.text.clone();
    let mut image = state.image.clone();
    let mut residuals = Vec::new();
    let mut captures = Vec::new();

    for l in 0..cfg.double_blocks {
        for sub in [Sublayer::Attention, Sublayer::Mlp] {
            let site = Site {
                block: l,
                kind: BlockKind::Double,
                local: l,
                sublayer: sub,
                input: SiteInput::Double {
                    text: &text,
                    image: &image,
                },
                temb,
            };
            let cap = (sub == Sublayer::Attention && taps.attention.contains(&l)).then_some(&mut captures);
            let mut recs = site_residuals(cfg, weights, &site, cap)?;
            hook.on_site(&site, &mut recs)?;
            text.add_assign(&recs[0].values)?;
            image.add_assign(&recs[1].values)?;
            if taps.residuals.wants(l) {
                residuals.extend(recs);
            }
        }
    }

    for g in 0..cfg.single_blocks {
        let l = cfg.double_blocks + g;
        let mut joint = text.vstack(&image)?;
        for sub in [Sublayer::Attention, Sublayer::Mlp] {
            let site = Site {
                block: l,
                kind: BlockKind::Single,
                local: g,
                sublayer: sub,
                input: SiteInput::Single { joint: &joint },
                temb,
            };
            let mut recs = site_residuals(cfg, weights, &site, None)?;
            hook.on_site(&site, &mut recs)?;
            joint.add_assign(&recs[0].values)?;
            if taps.residuals.wants(l) {
                residuals.extend(recs);
            }
        }
        text = joint.slice_rows(0, cfg.prompt_len);
        image = joint.slice_rows(cfg.prompt_len, joint.rows());
    }

    let state = TokenState {
        text,
        image,
        temb: state.temb.clone(),
    };
    if !state.is_finite() {
        return Err(Error::Contract("forward pass produced non-finite values".into()));
    }
    Ok(ForwardOutput {
        state,
        residuals,
        captures,
    })
}

/// Replays a complete set of residual records along the skip topology.
pub fn recompose(cfg: &ModelConfig, input: &TokenState, residuals: &[ResidualRecord]) -> Result<TokenState> {
    let find = |block, sub, stream| {
        residuals
            .iter()
            .find(|r| r.block == block && r.sublayer == sub && r.stream == stream)
            .map(|r| &r.values)
            .ok_or_else(|| Error::Contract(format!("missing residual ({block}, {sub:?}, {stream:?})")))
    };
    let mut text = input.text.clone();
    let mut image = input.image.clone();
    for l in 0..cfg.double_blocks {
        for sub in [Sublayer::Attention, Sublayer::Mlp] {
            text.add_assign(find(l, sub, Stream::Text)?)?;
            image.add_assign(find(l, sub, Stream::Image)?)?;
        }
    }
    for g in 0..cfg.single_blocks {
        let l = cfg.double_blocks + g;
        let mut joint = text.vstack(&image)?;
        for sub in [Sublayer::Attention, Sublayer::Mlp] {
            joint.add_assign(find(l, sub, Stream::Joint)?)?;
        }
        text = joint.slice_rows(0, cfg.prompt_len);
        image = joint.slice_rows(cfg.prompt_len, joint.rows());
    }
    Ok(TokenState {
        text,
        image,
        temb: input.temb.clone(),
    })
}

/// Velocity head: `modnorm(image) · W_outᵀ`.
pub(crate) fn velocity_head(cfg: &ModelConfig, weights: &Weights, image: &FeatureMatrix, temb: &[f64]) -> Result<FeatureMatrix> {
    let c = cfg.channels;
    let m = modulation(temb, weights.w("head.mod"));
    let xn = modulated_norm(image, &m[..c], &m[c..2 * c]);
    matmul_bt(&xn, weights.w("head.out"))
}

/// Sinusoidal features of `1000·t` projected through `embed.time`.
pub(crate) fn timestep_embedding(cfg: &ModelConfig, weights: &Weights, t: f64) -> Vec<f64> {
    let c = cfg.channels;
    let half = c / 2;
    let arg = 1000.0 * t;
    let mut feat = vec![0.0; c];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        feat[i] = (arg * freq).sin();
        feat[half + i] = (arg * freq).cos();
    }
    let w = weights.w("embed.time");
    (0..c)
        .map(|o| {
            let row = w.row(o);
            let mut acc = 0.0;
            for k in 0..c {
                acc += row[k] * feat[k];
            }
            acc
        })
        .collect()
}

/// Fixed 2-D sinusoidal position features for the `H × W` image tokens.
pub(crate) fn position_embedding(cfg: &ModelConfig) -> FeatureMatrix {
    let c = cfg.channels;
    let quarter = c / 4;
    FeatureMatrix::from_fn(cfg.image_tokens(), c, |p, j| {
        let (y, x) = ((p / cfg.width) as f64, (p % cfg.width) as f64);
        if quarter == 0 {
            return 0.0;
        }
        let (pos, k) = if j < 2 * quarter { (y, j) } else { (x, j - 2 * quarter) };
        let i = k % quarter;
        let freq = (-(100f64.ln()) * i as f64 / quarter as f64).exp();
        if k < quarter {
            (pos * freq).sin()
        } else if k < 2 * quarter {
            (pos * freq).cos()
        } else {
            0.0
        }
    })
}
