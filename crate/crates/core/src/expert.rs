//! Flow-matching diffusion transformer that turns conditioning tokens into
//! action chunks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{
    positions_1d, sinusoidal_1d, stack_with, Encoder, EncoderConfig, EncoderError, GlobalInput,
    LangInput, LocalInput, Stream, TokenSequence,
};
use crate::nn::{Init, Linear, Mlp};
use crate::scalar::Scalar;
use crate::tensor::{Grads, Graph, Mat, ParamStore, Segment, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpertError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("stream `{}` is in the ordering but missing from the context", .0.name())]
    MissingStream(Stream),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tau {0} outside [0, 1]")]
    Tau(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiTConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub horizon: usize,
    pub d_a: usize,
    pub d_s: usize,
    /// Cross-attention streams, applied in this order inside every block.
    pub ordering: Vec<Stream>,
    pub norm_kind: NormKind,
    pub norm_eps: f64,
    pub ffn_hidden: usize,
    pub ode_steps: usize,
    /// Samples are clamped to `[-action_bound, action_bound]`.
    pub action_bound: f64,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            heads: 4,
            kv_heads: 2,
            horizon: 16,
            d_a: 3,
            d_s: 3,
            ordering: vec![Stream::Global, Stream::Local, Stream::Lang],
            norm_kind: NormKind::LayerNorm,
            norm_eps: 1e-5,
            ffn_hidden: 256,
            ode_steps: 10,
            action_bound: 1.0,
        }
    }
}

impl DiTConfig {
    /// Full-size layout: 2176 wide, 16 layers, 16 heads over 8 kv heads, 14-d actions.
    pub fn full_scale() -> Self {
        Self {
            d_model: 2176,
            layers: 16,
            heads: 16,
            kv_heads: 8,
            d_a: 14,
            d_s: 14,
            ffn_hidden: 4 * 2176,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExpertError> {
        let err = |m: &str| Err(ExpertError::Config(m.to_string()));
        if self.d_model == 0
            || self.layers == 0
            || self.horizon == 0
            || self.d_a == 0
            || self.d_s == 0
        {
            return err("dimensions must be positive");
        }
        if self.heads == 0 || self.kv_heads == 0 || !self.heads.is_multiple_of(self.kv_heads) {
            return err("heads must be a positive multiple of kv_heads");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return err("d_model must be divisible by heads");
        }
        if self.ordering.is_empty() {
            return err("ordering must name at least one stream");
        }
        for (i, s) in self.ordering.iter().enumerate() {
            if self.ordering[..i].contains(s) {
                return err("ordering repeats a stream");
            }
        }
        if self.ode_steps == 0 {
            return err("ode_steps must be at least 1");
        }
        if self.ffn_hidden == 0 || !(self.action_bound > 0.0) {
            return err("ffn_hidden and action_bound must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dit: DiTConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ExpertError> {
        self.encoder.validate()?;
        self.dit.validate()?;
        if self.encoder.d_model != self.dit.d_model {
            return Err(ExpertError::Config(
                "encoder and transformer widths differ".into(),
            ));
        }
        Ok(())
    }
}

/// A point on the noise-to-action path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState<T> {
    pub x_tau: Mat<T>,
    pub tau: f64,
}

/// `x_τ = τ A + (1 − τ) z`.
pub fn cfm_interpolate<T: Scalar>(
    a: &Mat<T>,
    z: &Mat<T>,
    tau: f64,
) -> Result<FlowState<T>, ExpertError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ExpertError::Tau(tau));
    }
    if a.shape() != z.shape() {
        return Err(ExpertError::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            z.shape()
        )));
    }
    let t = T::of(tau);
    let s = T::one() - t;
    Ok(FlowState {
        x_tau: a.zip_map(z, |x, y| t * x + s * y),
        tau,
    })
}

/// `u = A − z`, the constant velocity of the linear path.
pub fn target_vector_field<T: Scalar>(a: &Mat<T>, z: &Mat<T>) -> Result<Mat<T>, ExpertError> {
    if a.shape() != z.shape() {
        return Err(ExpertError::Shape(format!(
            "{:?} vs {:?}",
            a.shape(),
            z.shape()
        )));
    }
    Ok(a.zip_map(z, |x, y| x - y))
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Mat<T> {
    Mat::randn(rows, cols, 1.0, rng)
}

/// Forward Euler from `τ = 0` to `τ = 1` on a uniform grid.
pub fn euler_integrate<T: Scalar>(
    x0: Mat<T>,
    steps: usize,
    mut field: impl FnMut(&Mat<T>, f64) -> Mat<T>,
) -> Mat<T> {
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let v = field(&x, k as f64 * dt);
        let dtt = T::of(dt);
        x = x.zip_map(&v, |a, b| a + dtt * b);
    }
    x
}

/// Encoded conditioning streams plus the proprioceptive state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningContext<T> {
    pub global: Option<TokenSequence<T>>,
    pub local: Option<TokenSequence<T>>,
    pub lang: Option<TokenSequence<T>>,
    pub state: Vec<T>,
}

impl<T: Scalar> ConditioningContext<T> {
    pub fn stream(&self, s: Stream) -> Option<&TokenSequence<T>> {
        match s {
            Stream::Global => self.global.as_ref(),
            Stream::Local => self.local.as_ref(),
            Stream::Lang => self.lang.as_ref(),
        }
    }
}

/// Raw, pre-processed observation from which the context is encoded.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput<T> {
    pub global: GlobalInput<T>,
    pub local: LocalInput<T>,
    pub lang: LangInput<T>,
    pub state: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    pub input: PolicyInput<T>,
    /// `H × d_a` target chunk in model units.
    pub actions: Mat<T>,
}

#[derive(Clone, Debug)]
struct AttnProj {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttnProj {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &DiTConfig,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d_model;
        let kv = cfg.kv_heads * (d / cfg.heads);
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, Init::Lecun, rng),
            k: Linear::new(store, &format!("{name}.k"), d, kv, Init::Lecun, rng),
            v: Linear::new(store, &format!("{name}.v"), d, kv, Init::Lecun, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, out_init, rng),
        }
    }

    fn params(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

#[derive(Clone, Debug)]
struct Block {
    ada: Linear,
    self_attn: AttnProj,
    cross: BTreeMap<Stream, AttnProj>,
    ffn_gate: Linear,
    ffn_up: Linear,
    ffn_down: Linear,
}

/// Conditioning tokens of a batch stacked along rows.
#[derive(Clone, Debug)]
pub struct StreamBatch {
    pub var: Var,
    /// `(first_row, count)` per batch element.
    pub spans: Vec<(usize, usize)>,
}

/// Encoders plus transformer, all parameters in one store.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    state_adapter: Mlp,
    action_adapter: Mlp,
    time_mlp: Mlp,
    blocks: Vec<Block>,
    final_ada: Linear,
    decoder: Mlp,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self, ExpertError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder.clone(), &mut store, &mut rng)?;
        let c = &cfg.dit;
        let d = c.d_model;
        let state_adapter = Mlp::new(
            &mut store,
            "dit.state_adapter",
            &[c.d_s, d, d, d],
            Init::Lecun,
            &mut rng,
        );
        let action_adapter = Mlp::new(
            &mut store,
            "dit.action_adapter",
            &[c.d_a, d, d, d],
            Init::Lecun,
            &mut rng,
        );
        let time_mlp = Mlp::new(
            &mut store,
            "dit.time_mlp",
            &[d, d, d],
            Init::Lecun,
            &mut rng,
        );
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = format!("dit.block{l}");
            let ada = Linear::new(
                &mut store,
                &format!("{p}.ada"),
                d,
                6 * d,
                Init::Zeros,
                &mut rng,
            );
            let self_attn =
                AttnProj::new(&mut store, &format!("{p}.self"), c, Init::Lecun, &mut rng);
            let mut cross = BTreeMap::new();
            for s in Stream::ALL {
                let a = AttnProj::new(
                    &mut store,
                    &format!("{p}.cross_{}", s.name()),
                    c,
                    Init::Zeros,
                    &mut rng,
                );
                cross.insert(s, a);
            }
            let ffn_gate = Linear::new(
                &mut store,
                &format!("{p}.ffn_gate"),
                d,
                c.ffn_hidden,
                Init::Lecun,
                &mut rng,
            );
            let ffn_up = Linear::new(
                &mut store,
                &format!("{p}.ffn_up"),
                d,
                c.ffn_hidden,
                Init::Lecun,
                &mut rng,
            );
            let ffn_down = Linear::new(
                &mut store,
                &format!("{p}.ffn_down"),
                c.ffn_hidden,
                d,
                Init::Lecun,
                &mut rng,
            );
            blocks.push(Block {
                ada,
                self_attn,
                cross,
                ffn_gate,
                ffn_up,
                ffn_down,
            });
        }
        let final_ada = Linear::new(&mut store, "dit.final_ada", d, 2 * d, Init::Zeros, &mut rng);
        let decoder = Mlp::new(
            &mut store,
            "dit.decoder",
            &[d, d, c.d_a],
            Init::Zeros,
            &mut rng,
        );
        Ok(Self {
            cfg,
            params: store,
            encoder,
            state_adapter,
            action_adapter,
            time_mlp,
            blocks,
            final_ada,
            decoder,
        })
    }

    pub fn dit(&self) -> &DiTConfig {
        &self.cfg.dit
    }

    /// Names of every cross-attention parameter of `stream`, block by block.
    pub fn cross_param_names(&self, stream: Stream) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for l in b.cross[&stream].params() {
                out.push(self.params.name(l.w).to_string());
                out.push(self.params.name(l.b).to_string());
            }
        }
        out
    }

    /// Names of every cross-attention output projection.
    pub fn cross_output_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for a in b.cross.values() {
                out.push(self.params.name(a.o.w).to_string());
                out.push(self.params.name(a.o.b).to_string());
            }
        }
        out
    }

    fn norm(&self, g: &mut Graph<T>, x: Var) -> Var {
        match self.cfg.dit.norm_kind {
            NormKind::LayerNorm => g.layer_norm(x, self.cfg.dit.norm_eps),
            NormKind::RmsNorm => g.rms_norm(x, self.cfg.dit.norm_eps),
        }
    }

    /// Per-element timestep embedding `MLP(sin(1000 τ))`, `B × d`.
    fn time_embedding(&self, g: &mut Graph<T>, taus: &[f64]) -> Var {
        let d = self.cfg.dit.d_model;
        let data: Vec<f64> = taus
            .iter()
            .flat_map(|&t| sinusoidal_1d(t * 1000.0, d, 10000.0))
            .collect();
        let e = g.constant(Mat::from_f64(taus.len(), d, &data));
        self.time_mlp.forward(g, e)
    }

    /// The velocity network over a batch. `x` stacks `B` chunks of `H` rows,
    /// `state` is `B × d_s`; each `(stream, tokens)` pair runs the named
    /// stream's cross-attention over `tokens`, in slice order.
    pub fn velocity_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        taus: &[f64],
        state: Var,
        streams: &[(Stream, &StreamBatch)],
    ) -> Var {
        let c = &self.cfg.dit;
        let (bsz, h, d) = (taus.len(), c.horizon, c.d_model);
        let n = h + 1;
        let temb = self.time_embedding(g, taus);
        let cond = g.silu(temb);
        let st = self.state_adapter.forward(g, state);
        let at = self.action_adapter.forward(g, x);
        let all = g.concat_rows(&[st, at]);
        let order: Vec<usize> = (0..bsz)
            .flat_map(|b| std::iter::once(b).chain((0..h).map(move |i| bsz + b * h + i)))
            .collect();
        let mut seq = g.gather(all, &order);
        let pe = positions_1d::<T>(n, d, 10000.0);
        let pe_all = g.constant(stack_with(&vec![&pe; bsz], |m| *m));
        seq = g.add(seq, pe_all);
        let owner: Vec<usize> = (0..bsz * n).map(|r| r / n).collect();
        let self_segs: Vec<Segment> = (0..bsz)
            .map(|b| Segment {
                q0: b * n,
                nq: n,
                k0: b * n,
                nk: n,
            })
            .collect();
        for blk in &self.blocks {
            let m = blk.ada.forward(g, cond);
            let part = |g: &mut Graph<T>, i: usize| g.slice_cols(m, i * d, d);
            let (sh1, sc1, ga1, sh2, sc2, ga2) = (
                part(g, 0),
                part(g, 1),
                part(g, 2),
                part(g, 3),
                part(g, 4),
                part(g, 5),
            );

            let hn = self.norm(g, seq);
            let hm = g.modulate_rows(hn, sh1, sc1, &owner);
            let a = self.attend(g, &blk.self_attn, hm, hm, &self_segs);
            seq = g.gated_add_rows(seq, ga1, a, &owner);

            for (s, sb) in streams {
                let segs: Vec<Segment> = sb
                    .spans
                    .iter()
                    .enumerate()
                    .map(|(b, &(k0, nk))| Segment {
                        q0: b * n,
                        nq: n,
                        k0,
                        nk,
                    })
                    .collect();
                let hn = self.norm(g, seq);
                let a = self.attend(g, &blk.cross[s], hn, sb.var, &segs);
                seq = g.add(seq, a);
            }

            let hn = self.norm(g, seq);
            let hm = g.modulate_rows(hn, sh2, sc2, &owner);
            let gate = blk.ffn_gate.forward(g, hm);
            let gate = g.silu(gate);
            let up = blk.ffn_up.forward(g, hm);
            let f = g.mul(gate, up);
            let f = blk.ffn_down.forward(g, f);
            seq = g.gated_add_rows(seq, ga2, f, &owner);
        }
        let m = self.final_ada.forward(g, cond);
        let sh = g.slice_cols(m, 0, d);
        let sc = g.slice_cols(m, d, d);
        let hn = self.norm(g, seq);
        let hm = g.modulate_rows(hn, sh, sc, &owner);
        let act_rows: Vec<usize> = (0..bsz)
            .flat_map(|b| (0..h).map(move |i| b * n + 1 + i))
            .collect();
        let acts = g.gather(hm, &act_rows);
        self.decoder.forward(g, acts)
    }

    fn attend(&self, g: &mut Graph<T>, p: &AttnProj, xq: Var, xkv: Var, segs: &[Segment]) -> Var {
        let q = p.q.forward(g, xq);
        let k = p.k.forward(g, xkv);
        let v = p.v.forward(g, xkv);
        let o = g.attention(q, k, v, segs, self.cfg.dit.heads, self.cfg.dit.kv_heads);
        p.o.forward(g, o)
    }

    fn check_flow(&self, x: &Mat<T>, state_len: usize) -> Result<(), ExpertError> {
        let c = &self.cfg.dit;
        if x.shape() != (c.horizon, c.d_a) {
            return Err(ExpertError::Shape(format!(
                "action chunk {:?}, expected ({}, {})",
                x.shape(),
                c.horizon,
                c.d_a
            )));
        }
        if state_len != c.d_s {
            return Err(ExpertError::Shape(format!(
                "state length {state_len}, expected {}",
                c.d_s
            )));
        }
        Ok(())
    }

    /// Predicted field for one chunk given explicit `(stream, tokens)` pairs.
    pub fn forward_with_streams(
        &self,
        flow: &FlowState<T>,
        state: &[T],
        streams: &[(Stream, &TokenSequence<T>)],
    ) -> Result<Mat<T>, ExpertError> {
        self.check_flow(&flow.x_tau, state.len())?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(flow.x_tau.clone());
        let s = g.constant(Mat::row_vector(state.to_vec()));
        let batches: Vec<(Stream, StreamBatch)> = streams
            .iter()
            .map(|(s, t)| {
                (
                    *s,
                    StreamBatch {
                        var: g.constant(t.tokens.clone()),
                        spans: vec![(0, t.len())],
                    },
                )
            })
            .collect();
        let refs: Vec<(Stream, &StreamBatch)> = batches.iter().map(|(s, b)| (*s, b)).collect();
        let out = self.velocity_graph(&mut g, x, &[flow.tau], s, &refs);
        Ok(g.value(out).clone())
    }

    /// `v_θ(x_τ, τ, ctx)` with streams taken in the configured order.
    pub fn forward(
        &self,
        flow: &FlowState<T>,
        ctx: &ConditioningContext<T>,
    ) -> Result<Mat<T>, ExpertError> {
        let mut streams = Vec::new();
        for &s in &self.cfg.dit.ordering {
            let t = ctx.stream(s).ok_or(ExpertError::MissingStream(s))?;
            if t.is_empty() || t.d_model() != self.cfg.dit.d_model {
                return Err(ExpertError::Shape(format!(
                    "stream {} tokens {:?}",
                    s.name(),
                    t.tokens.shape()
                )));
            }
            streams.push((s, t));
        }
        self.forward_with_streams(flow, &ctx.state, &streams)
    }

    /// Encodes the streams named in the ordering.
    pub fn encode(&self, input: &PolicyInput<T>) -> ConditioningContext<T> {
        let mut ctx = ConditioningContext {
            global: None,
            local: None,
            lang: None,
            state: input.state.clone(),
        };
        for &s in &self.cfg.dit.ordering {
            let mut g = Graph::new(&self.params);
            let v = match s {
                Stream::Global => self.encoder.global_graph(&mut g, &[&input.global]),
                Stream::Local => self.encoder.local_graph(&mut g, &[&input.local]),
                Stream::Lang => self.encoder.lang_graph(&mut g, &[&input.lang]),
            };
            let t = TokenSequence {
                tokens: g.value(v).clone(),
                stream: s,
            };
            match s {
                Stream::Global => ctx.global = Some(t),
                Stream::Local => ctx.local = Some(t),
                Stream::Lang => ctx.lang = Some(t),
            }
        }
        ctx
    }

    fn encode_batch(
        &self,
        g: &mut Graph<T>,
        inputs: &[&PolicyInput<T>],
    ) -> Vec<(Stream, StreamBatch)> {
        let spans = |lens: Vec<usize>| {
            let mut off = 0;
            lens.into_iter()
                .map(|n| {
                    let s = (off, n);
                    off += n;
                    s
                })
                .collect::<Vec<_>>()
        };
        self.cfg
            .dit
            .ordering
            .iter()
            .map(|&s| {
                let (var, lens) = match s {
                    Stream::Global => {
                        let b: Vec<&GlobalInput<T>> = inputs.iter().map(|i| &i.global).collect();
                        (
                            self.encoder.global_graph(g, &b),
                            b.iter().map(|x| x.patches.rows).collect(),
                        )
                    }
                    Stream::Local => {
                        let b: Vec<&LocalInput<T>> = inputs.iter().map(|i| &i.local).collect();
                        (
                            self.encoder.local_graph(g, &b),
                            b.iter().map(|x| x.patches.rows).collect(),
                        )
                    }
                    Stream::Lang => {
                        let b: Vec<&LangInput<T>> = inputs.iter().map(|i| &i.lang).collect();
                        (
                            self.encoder.lang_graph(g, &b),
                            b.iter().map(|x| x.ids.len()).collect(),
                        )
                    }
                };
                (
                    s,
                    StreamBatch {
                        var,
                        spans: spans(lens),
                    },
                )
            })
            .collect()
    }

    /// Conditional flow-matching loss on a batch with explicit noise and
    /// times; returns the loss and its parameter gradients.
    pub fn cfm_loss_with(
        &self,
        batch: &[&TrainSample<T>],
        noise: &[Mat<T>],
        taus: &[f64],
    ) -> Result<(T, Grads<T>), ExpertError> {
        if batch.is_empty() {
            return Err(ExpertError::EmptyBatch);
        }
        if noise.len() != batch.len() || taus.len() != batch.len() {
            return Err(ExpertError::Shape(
                "noise/tau count differs from batch".into(),
            ));
        }
        let mut xs = Vec::with_capacity(batch.len());
        let mut us = Vec::with_capacity(batch.len());
        for ((s, z), &tau) in batch.iter().zip(noise).zip(taus) {
            self.check_flow(&s.actions, s.input.state.len())?;
            xs.push(cfm_interpolate(&s.actions, z, tau)?.x_tau);
            us.push(target_vector_field(&s.actions, z)?);
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(stack_with(&xs, |m| m));
        let u = g.constant(stack_with(&us, |m| m));
        let states: Vec<Mat<T>> = batch
            .iter()
            .map(|s| Mat::row_vector(s.input.state.clone()))
            .collect();
        let st = g.constant(stack_with(&states, |m| m));
        let inputs: Vec<&PolicyInput<T>> = batch.iter().map(|s| &s.input).collect();
        let streams = self.encode_batch(&mut g, &inputs);
        let refs: Vec<(Stream, &StreamBatch)> = streams.iter().map(|(s, b)| (*s, b)).collect();
        let v = self.velocity_graph(&mut g, x, taus, st, &refs);
        let loss = g.mse(v, u);
        let value = g.value(loss).data[0];
        Ok((value, g.backward(loss, T::one())))
    }

    /// Samples `z ~ N(0, I)` and `τ ~ U[0, 1]` per element, then evaluates
    /// the flow-matching loss.
    pub fn cfm_loss<R: Rng + ?Sized>(
        &self,
        batch: &[&TrainSample<T>],
        rng: &mut R,
    ) -> Result<(T, Grads<T>), ExpertError> {
        let c = &self.cfg.dit;
        let noise: Vec<Mat<T>> = batch
            .iter()
            .map(|_| standard_normal(c.horizon, c.d_a, rng))
            .collect();
        let taus: Vec<f64> = batch.iter().map(|_| rng.gen::<f64>()).collect();
        self.cfm_loss_with(batch, &noise, &taus)
    }

    /// Euler-integrates the learned field from Gaussian noise and clamps the
    /// result to the action bound.
    pub fn sample_actions<R: Rng + ?Sized>(
        &self,
        ctx: &ConditioningContext<T>,
        ode_steps: usize,
        rng: &mut R,
    ) -> Result<Mat<T>, ExpertError> {
        let mut err = None;
        let x = self.sample_with(ode_steps, rng, |x, tau| {
            let flow = FlowState {
                x_tau: x.clone(),
                tau,
            };
            match self.forward(&flow, ctx) {
                Ok(v) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    Mat::zeros(x.rows, x.cols)
                }
            }
        })?;
        match err {
            Some(e) => Err(e),
            None => Ok(x),
        }
    }

    /// The sampler of `sample_actions` with the velocity field supplied by
    /// the caller.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        ode_steps: usize,
        rng: &mut R,
        field: impl FnMut(&Mat<T>, f64) -> Mat<T>,
    ) -> Result<Mat<T>, ExpertError> {
        if ode_steps == 0 {
            return Err(ExpertError::Config("ode_steps must be at least 1".into()));
        }
        let c = &self.cfg.dit;
        let x0 = standard_normal(c.horizon, c.d_a, rng);
        let x = euler_integrate(x0, ode_steps, field);
        let b = T::of(c.action_bound);
        Ok(x.map(|v| v.max(-b).min(b)))
    }

    /// Overwrites each block's local-stream cross-attention with an exact
    /// copy of its global-stream weights.
    pub fn init_local_from_global(&mut self) -> Result<(), ExpertError> {
        let src = self.cross_param_names(Stream::Global);
        let dst = self.cross_param_names(Stream::Local);
        for (s, d) in src.iter().zip(&dst) {
            let sv = self.params.by_name(s).expect("registered").clone();
            let did = self.params.id(d).expect("registered");
            if self.params.get(did).shape() != sv.shape() {
                return Err(ExpertError::Shape(format!("{s} vs {d}")));
            }
            *self.params.get_mut(did) = sv;
        }
        Ok(())
    }
}

/// Scripted field used to check the sampler: returns `A − z` for the noise
/// the chain started from, recovered from `x_τ = τ A + (1 − τ) z`.
pub fn oracle_field<T: Scalar>(a: &Mat<T>) -> impl FnMut(&Mat<T>, f64) -> Mat<T> + '_ {
    move |x: &Mat<T>, tau: f64| {
        // z = (x − τ A) / (1 − τ) for τ < 1
        let t = T::of(tau);
        let s = T::one() - t;
        let z = x.zip_map(a, |xv, av| (xv - t * av) / s);
        a.zip_map(&z, |av, zv| av - zv)
    }
}
