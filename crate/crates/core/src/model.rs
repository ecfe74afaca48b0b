//! The assembled network: modality encoders, fusion, task routing, branches
//! and heads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::summary::feature_modality;
use crate::data::{Modality, ProcessedTrial};
use crate::layers::{
    positional_encoding, scaled_dot_product_attention, BatchNorm, ConvBlock, Ctx, EncoderLayer, EncoderParams, Linear,
};
use crate::params::{Bound, Builder, Group, Init, ParamId, ParamStore};
use crate::tensor::{Float, Graph, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch is missing `{0}`")]
    MissingInput(String),
    #[error("{field}: expected width {expected}, got {got}")]
    Width {
        field: String,
        expected: usize,
        got: usize,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub eye: usize,
    pub pupil: usize,
    pub au: usize,
    pub gsr: usize,
}

impl ModalityDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Eye => self.eye,
            Modality::Pupil => self.pupil,
            Modality::Au => self.au,
            Modality::Gsr => self.gsr,
        }
    }

    pub fn from_array(a: [usize; 4]) -> Self {
        Self {
            eye: a[0],
            pupil: a[1],
            au: a[2],
            gsr: a[3],
        }
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.eye, self.pupil, self.au, self.gsr]
    }
}

impl Default for ModalityDims {
    fn default() -> Self {
        Self::from_array(Modality::ALL.map(Modality::width))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modality_dims: ModalityDims,
    pub seq_len: usize,
    pub t_reduced: usize,
    pub enc: EncoderParams,
    /// Encoder layers per modality. Zero makes the encoder an identity map.
    pub encoder_depth: usize,
    pub fusion: EncoderParams,
    pub proj_dim: usize,
    pub use_stim_emo: bool,
    pub stim_emo_dim: usize,
    pub enabled_modalities: Vec<Modality>,
    pub condition_emotion_on_personality: bool,
    /// Width of the trial summary vector.
    pub summary_dim: usize,
    /// Names of the summary features, used to mask features of disabled
    /// modalities. Empty means no masking.
    #[serde(default)]
    pub summary_names: Vec<String>,
    pub trial_dim: usize,
    pub personality_dropout: f64,
    pub emotion_dropout: f64,
    pub trial_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modality_dims: ModalityDims::default(),
            seq_len: 400,
            t_reduced: 16,
            enc: EncoderParams {
                d_model: 64,
                heads: 2,
                ffn_dim: 2048,
                dropout: 0.25,
            },
            encoder_depth: 1,
            fusion: EncoderParams {
                d_model: 128,
                heads: 4,
                ffn_dim: 2048,
                dropout: 0.25,
            },
            proj_dim: 32,
            use_stim_emo: true,
            stim_emo_dim: 128,
            enabled_modalities: Modality::ALL.to_vec(),
            condition_emotion_on_personality: true,
            summary_dim: crate::data::summary::summary_names().len(),
            summary_names: crate::data::summary::summary_names(),
            trial_dim: 64,
            personality_dropout: 0.4,
            emotion_dropout: 0.25,
            trial_dropout: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn is_enabled(&self, m: Modality) -> bool {
        self.enabled_modalities.contains(&m)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.enc.validate("enc")?;
        self.fusion.validate("fusion")?;
        if self.enabled_modalities.is_empty() {
            return Err("at least one modality must be enabled".into());
        }
        if self.t_reduced == 0 || self.seq_len == 0 || self.seq_len % self.t_reduced != 0 {
            return Err(format!(
                "t_reduced {} must divide seq_len {}",
                self.t_reduced, self.seq_len
            ));
        }
        if 4 * self.proj_dim != self.fusion.d_model {
            return Err(format!(
                "4 x proj_dim ({}) must equal fusion.d_model ({})",
                4 * self.proj_dim,
                self.fusion.d_model
            ));
        }
        if self.use_stim_emo && self.stim_emo_dim != self.fusion.d_model {
            return Err(format!(
                "stim_emo_dim {} must equal fusion.d_model {} (the embedding is added to the fused sequence)",
                self.stim_emo_dim, self.fusion.d_model
            ));
        }
        for m in Modality::ALL {
            if self.modality_dims.get(m) == 0 {
                return Err(format!("modality_dims.{m} must be positive"));
            }
        }
        if self.summary_dim == 0 || self.trial_dim == 0 {
            return Err("summary_dim and trial_dim must be positive".into());
        }
        if !self.summary_names.is_empty() && self.summary_names.len() != self.summary_dim {
            return Err(format!(
                "summary_names lists {} features but summary_dim is {}",
                self.summary_names.len(),
                self.summary_dim
            ));
        }
        for (name, p) in [
            ("personality_dropout", self.personality_dropout),
            ("emotion_dropout", self.emotion_dropout),
            ("trial_dropout", self.trial_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(format!("{name} {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Summary entries kept (1) or zeroed (0) given the enabled modalities.
    pub fn summary_mask(&self) -> Vec<f64> {
        if self.summary_names.is_empty() {
            return vec![1.0; self.summary_dim];
        }
        self.summary_names
            .iter()
            .map(|n| match feature_modality(n) {
                Some(m) if !self.is_enabled(m) => 0.0,
                _ => 1.0,
            })
            .collect()
    }
}

/// Model inputs for one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<F: Float> {
    pub size: usize,
    /// `[B, seq_len, D_m]` per modality; `None` for absent inputs.
    pub seqs: [Option<Tensor<F>>; 4],
    /// `[B, S]`.
    pub summary: Option<Tensor<F>>,
    /// `[B, 2]`.
    pub stim_emo: Option<Tensor<F>>,
}

impl Batch<f32> {
    /// Stacks trials into one batch.
    pub fn from_trials(trials: &[&ProcessedTrial]) -> Self {
        let b = trials.len();
        assert!(b > 0, "empty batch");
        let seqs = Modality::ALL.map(|m| {
            let i = m.index();
            let len = trials[0].seqs[i].len();
            let w = len / crate::data::SEQ_LEN;
            let mut data = Vec::with_capacity(b * len);
            for t in trials {
                data.extend_from_slice(&t.seqs[i]);
            }
            Some(Tensor::new(vec![b, crate::data::SEQ_LEN, w], data).expect("consistent trial widths"))
        });
        let s = trials[0].summary.len();
        let summary = Tensor::new(
            vec![b, s],
            trials.iter().flat_map(|t| t.summary.iter().copied()).collect(),
        )
        .expect("consistent summary widths");
        let stim = Tensor::new(vec![b, 2], trials.iter().flat_map(|t| t.stim_emo).collect()).expect("two stim values");
        Self {
            size: b,
            seqs,
            summary: Some(summary),
            stim_emo: Some(stim),
        }
    }

    pub fn cast<G: Float>(&self) -> Batch<G> {
        Batch {
            size: self.size,
            seqs: std::array::from_fn(|i| self.seqs[i].as_ref().map(Tensor::cast)),
            summary: self.summary.as_ref().map(Tensor::cast),
            stim_emo: self.stim_emo.as_ref().map(Tensor::cast),
        }
    }
}

pub struct ForwardOutput<'g, F: Float> {
    pub valence_logits: Var<'g, F>,
    pub arousal_logits: Var<'g, F>,
    pub personality: Var<'g, F>,
    pub personality_embedding: Var<'g, F>,
    pub emotion_embedding: Var<'g, F>,
    pub trial_embedding: Var<'g, F>,
}

impl<'g, F: Float> ForwardOutput<'g, F> {
    pub fn all(&self) -> [Var<'g, F>; 6] {
        [
            self.valence_logits,
            self.arousal_logits,
            self.personality,
            self.personality_embedding,
            self.emotion_embedding,
            self.trial_embedding,
        ]
    }
}

/// Input projection, positional encoding, encoder stack and 64 -> 32 fusion projection.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub modality: Modality,
    norm_mean: ParamId,
    norm_std: ParamId,
    input: Linear,
    layers: Vec<EncoderLayer>,
    fusion_proj: Linear,
}

/// Learnable query sequence attending over the fused sequence (single head).
#[derive(Debug, Clone, Copy)]
struct TaskAttention {
    query: ParamId,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl TaskAttention {
    fn new(b: &mut Builder<'_>, name: &str, len: usize, d: usize) -> Self {
        let mut s = b.sub(name);
        let xav = Init::Xavier(d, d);
        Self {
            query: s.param("query", &[len, d], Init::Normal(0.02)),
            wk: Linear::with_init(&mut s, "key", d, d, xav, true),
            wv: Linear::with_init(&mut s, "value", d, d, xav, true),
            wo: Linear::with_init(&mut s, "out", d, d, xav, true),
        }
    }

    fn forward<'g, F: Float>(
        &self,
        p: &Bound<'_, 'g, F>,
        ctx: &mut Ctx<F>,
        x: Var<'g, F>,
        tag: &str,
    ) -> Result<Var<'g, F>> {
        let s = x.shape();
        let q = p.var(self.query);
        let qs = q.shape();
        let q = q.reshape(&[1, qs[0], qs[1]])?.expand(0, s[0])?;
        let k = self.wk.forward(p, x)?;
        let v = self.wv.forward(p, x)?;
        let (o, w) = scaled_dot_product_attention(q, k, v)?;
        if let Some(list) = &mut ctx.attention {
            list.push((tag.to_string(), w.value()));
        }
        Ok(self.wo.forward(p, o)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct DenseBn {
    lin: Linear,
    bn: BatchNorm,
}

impl DenseBn {
    fn new(b: &mut Builder<'_>, name: &str, din: usize, dout: usize) -> Self {
        let mut s = b.sub(name);
        Self {
            lin: Linear::new(&mut s, "linear", din, dout),
            bn: BatchNorm::new(&mut s, "bn", dout),
        }
    }

    fn forward<'g, F: Float>(&self, p: &Bound<'_, 'g, F>, ctx: &mut Ctx<F>, x: Var<'g, F>, drop: f64) -> Result<Var<'g, F>> {
        let y = self.lin.forward(p, x)?;
        let y = self.bn.forward(p, ctx, y)?.relu()?;
        Ok(ctx.dropout(y, drop)?)
    }
}

#[derive(Debug, Clone)]
struct EmotionHead {
    attn: TaskAttention,
    proj: Linear,
    hidden: Linear,
    out: Linear,
}

/// The assembled model and its parameters.
#[derive(Clone)]
pub struct MuMTAffect {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    encoders: Vec<ModalityEncoder>,
    summary_mean: ParamId,
    summary_std: ParamId,
    fusion: EncoderLayer,
    stim: Option<Linear>,
    route_personality: TaskAttention,
    route_emotion: TaskAttention,
    pers_convs: [ConvBlock; 2],
    emo_convs: [ConvBlock; 3],
    trial_mlp: [DenseBn; 2],
    pers_proj: Linear,
    pers_mlp: [DenseBn; 2],
    pers_out: Linear,
    valence_head: EmotionHead,
    arousal_head: EmotionHead,
}

/// Parameter counts per group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub by_group: BTreeMap<Group, usize>,
    pub total: usize,
}

const FLOOR_STD: f32 = 1e-6;

impl MuMTAffect {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate().map_err(ModelError::Config)?;
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, seed);
        let d_enc = cfg.enc.d_model;
        let d = cfg.fusion.d_model;

        let mut encoders = Vec::new();
        for m in Modality::ALL {
            if !cfg.is_enabled(m) {
                continue;
            }
            let dim = cfg.modality_dims.get(m);
            let mut s = b.sub(m.name());
            let norm_mean = s.buffer("norm.mean", Tensor::zeros(&[dim]));
            let norm_std = s.buffer("norm.std", Tensor::full(&[dim], 1.0));
            let input = Linear::new(&mut s, "input", dim, d_enc);
            let layers = (0..cfg.encoder_depth)
                .map(|i| EncoderLayer::new(&mut s, &format!("encoder.{i}"), &cfg.enc))
                .collect();
            let fusion_proj = Linear::new(&mut s, "fusion_proj", d_enc, cfg.proj_dim);
            encoders.push(ModalityEncoder {
                modality: m,
                norm_mean,
                norm_std,
                input,
                layers,
                fusion_proj,
            });
        }
        let summary_mean = b.buffer("summary.norm.mean", Tensor::zeros(&[cfg.summary_dim]));
        let summary_std = b.buffer("summary.norm.std", Tensor::full(&[cfg.summary_dim], 1.0));
        let fusion = EncoderLayer::new(&mut b, "fusion", &cfg.fusion);
        let stim = cfg
            .use_stim_emo
            .then(|| Linear::new(&mut b, "stim_emo", 2, cfg.stim_emo_dim));
        let route_personality = TaskAttention::new(&mut b, "route.personality", cfg.t_reduced, d);
        let route_emotion = TaskAttention::new(&mut b, "route.emotion", cfg.t_reduced, d);
        let trial_mlp = [
            DenseBn::new(&mut b, "trial.0", cfg.summary_dim, cfg.trial_dim),
            DenseBn::new(&mut b, "trial.1", cfg.trial_dim, cfg.trial_dim),
        ];

        let mut pb = b.sub("personality").group(Group::Personality);
        let pers_convs = [
            ConvBlock::new(&mut pb, "conv.0", d, d, 1),
            ConvBlock::new(&mut pb, "conv.1", d, d, 2),
        ];
        let pers_proj = Linear::new(&mut pb, "head.proj", 2 * d + cfg.trial_dim, d);
        let pers_mlp = [
            DenseBn::new(&mut pb, "head.0", d, 64),
            DenseBn::new(&mut pb, "head.1", 64, 64),
        ];
        let pers_out = Linear::new(&mut pb, "head.out", 64, 5);

        let mut eb = b.sub("emotion").group(Group::Emotion);
        let emo_convs = [
            ConvBlock::new(&mut eb, "conv.0", d, d, 2),
            ConvBlock::new(&mut eb, "conv.1", d, d, 2),
            ConvBlock::new(&mut eb, "conv.2", d, d, 2),
        ];
        let head_in = d + cfg.trial_dim + if cfg.condition_emotion_on_personality { d } else { 0 };
        let mut head = |name: &str| {
            let mut s = eb.sub(name);
            EmotionHead {
                attn: TaskAttention::new(&mut s, "attn", 1, d),
                proj: Linear::new(&mut s, "proj", head_in, d),
                hidden: Linear::new(&mut s, "hidden", d, 64),
                out: Linear::new(&mut s, "out", 64, 3),
            }
        };
        let valence_head = head("valence");
        let arousal_head = head("arousal");

        Ok(Self {
            cfg,
            params,
            encoders,
            summary_mean,
            summary_std,
            fusion,
            stim,
            route_personality,
            route_emotion,
            pers_convs,
            emo_convs,
            trial_mlp,
            pers_proj,
            pers_mlp,
            pers_out,
            valence_head,
            arousal_head,
        })
    }

    pub fn count_parameters(&self) -> ParamCount {
        let by_group: BTreeMap<Group, usize> = self.params.count_by_group().into_iter().collect();
        ParamCount {
            total: by_group.values().sum(),
            by_group,
        }
    }

    /// Fits the per-channel z-score normalizers on the given trials.
    pub fn fit_normalizer(&mut self, trials: &[&ProcessedTrial]) {
        if trials.is_empty() {
            return;
        }
        let stats = |rows: &mut dyn Iterator<Item = &[f32]>, width: usize| {
            let mut sum = vec![0f64; width];
            let mut sq = vec![0f64; width];
            let mut n = 0usize;
            for r in rows {
                for (c, &v) in r.iter().enumerate() {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
                n += 1;
            }
            let n = n.max(1) as f64;
            let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
            let std: Vec<f32> = sum
                .iter()
                .zip(&sq)
                .map(|(s, q)| {
                    let m = s / n;
                    let sd = ((q / n - m * m).max(0.0)).sqrt() as f32;
                    if sd < FLOOR_STD {
                        1.0
                    } else {
                        sd
                    }
                })
                .collect();
            (mean, std)
        };
        for e in &self.encoders {
            let i = e.modality.index();
            let w = self.cfg.modality_dims.get(e.modality);
            let (mean, std) = stats(&mut trials.iter().flat_map(|t| t.seqs[i].chunks(w)), w);
            self.params.get_mut(e.norm_mean).data_mut().copy_from_slice(&mean);
            self.params.get_mut(e.norm_std).data_mut().copy_from_slice(&std);
        }
        let (mean, std) = stats(&mut trials.iter().map(|t| &t.summary[..]), self.cfg.summary_dim);
        self.params.get_mut(self.summary_mean).data_mut().copy_from_slice(&mean);
        self.params.get_mut(self.summary_std).data_mut().copy_from_slice(&std);
    }

    fn normalize<'g, F: Float>(
        p: &Bound<'_, 'g, F>,
        g: &'g Graph<F>,
        x: Tensor<F>,
        mean: ParamId,
        std: ParamId,
    ) -> Var<'g, F> {
        let (m, s) = (p.data(mean), p.data(std));
        let w = m.len();
        let mut x = x;
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let c = i % w;
            *v = (*v - m[c]) / s[c];
        }
        g.constant(x)
    }

    fn check_width<F: Float>(t: &Tensor<F>, field: &str, expected: usize) -> Result<()> {
        let got = *t.shape().last().unwrap_or(&0);
        if got != expected {
            return Err(ModelError::Width {
                field: field.to_string(),
                expected,
                got,
            });
        }
        Ok(())
    }

    /// `[B, seq_len, D_m]` -> `[B, t_reduced, d_enc]`.
    pub fn encode_modality<'g, F: Float>(
        &self,
        p: &Bound<'_, 'g, F>,
        ctx: &mut Ctx<F>,
        m: Modality,
        x: &Tensor<F>,
    ) -> Result<Var<'g, F>> {
        let e = self
            .encoders
            .iter()
            .find(|e| e.modality == m)
            .ok_or_else(|| ModelError::Config(format!("modality {m} is disabled")))?;
        Self::check_width(x, m.name(), self.cfg.modality_dims.get(m))?;
        let s = x.shape();
        if s.len() != 3 || s[1] != self.cfg.seq_len {
            return Err(ModelError::Width {
                field: format!("{m} sequence length"),
                expected: self.cfg.seq_len,
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        let g = p.vars()[0].graph();
        let xv = Self::normalize(p, g, x.clone(), e.norm_mean, e.norm_std);
        let pe = g.constant(positional_encoding(self.cfg.seq_len, self.cfg.enc.d_model));
        let mut h = e.input.forward(p, xv)?.add(pe)?;
        h = ctx.dropout(h, self.cfg.enc.dropout)?;
        for (i, layer) in e.layers.iter().enumerate() {
            h = layer.forward(p, ctx, h, &format!("{m}.encoder.{i}"))?;
        }
        Ok(segment_mean(h, self.cfg.t_reduced)?)
    }

    /// Fusion over the projected modality slots, then per-task routing.
    /// Returns `(personality sequence, emotion sequence, pooled fused state)`.
    pub fn fuse_and_route<'g, F: Float>(
        &self,
        p: &Bound<'_, 'g, F>,
        ctx: &mut Ctx<F>,
        reduced: &[(Modality, Var<'g, F>)],
        stim_emo: Option<&Tensor<F>>,
    ) -> Result<(Var<'g, F>, Var<'g, F>, Var<'g, F>)> {
        let (_, first) = reduced.first().ok_or(TensorError::Empty { op: "fuse_and_route" })?;
        let g = first.graph();
        let s = first.shape();
        let (b, t) = (s[0], s[1]);
        let mut slots = Vec::with_capacity(4);
        for m in Modality::ALL {
            let enc = self.encoders.iter().find(|e| e.modality == m);
            match (enc, reduced.iter().find(|(rm, _)| *rm == m)) {
                (Some(e), Some((_, h))) => slots.push(e.fusion_proj.forward(p, *h)?),
                _ => slots.push(g.constant(Tensor::zeros(&[b, t, self.cfg.proj_dim]))),
            }
        }
        let cat = g.concat(&slots, 2)?;
        let fused = self.fusion.forward(p, ctx, cat, "fusion")?;
        let pooled = fused.mean_axis(1)?;
        let mut routed = fused;
        if let Some(stim) = &self.stim {
            let x = stim_emo.ok_or_else(|| ModelError::MissingInput("stim_emo".into()))?;
            Self::check_width(x, "stim_emo", 2)?;
            let e = stim.forward(p, g.constant(x.clone()))?;
            let e = e.reshape(&[b, 1, self.cfg.stim_emo_dim])?.expand(1, t)?;
            routed = routed.add(e)?;
        }
        let pers = self.route_personality.forward(p, ctx, routed, "route.personality")?;
        let emo = self.route_emotion.forward(p, ctx, routed, "route.emotion")?;
        Ok((pers, emo, pooled))
    }

    /// Branch embeddings `(p_emb, e_emb, t_emb)` plus the emotion branch's
    /// pre-pool sequence `[B, L, d]`.
    #[allow(clippy::type_complexity)]
    pub fn branch_embeddings<'g, F: Float>(
        &self,
        p: &Bound<'_, 'g, F>,
        ctx: &mut Ctx<F>,
        pers_seq: Var<'g, F>,
        emo_seq: Var<'g, F>,
        summary: &Tensor<F>,
    ) -> Result<(Var<'g, F>, Var<'g, F>, Var<'g, F>, Var<'g, F>)> {
        Self::check_width(summary, "summary", self.cfg.summary_dim)?;
        let g = pers_seq.graph();

        let mut h = pers_seq.transpose(1, 2)?;
        ctx.trace(|| "personality.input".into(), h);
        for (i, c) in self.pers_convs.iter().enumerate() {
            h = c.forward(p, ctx, h)?;
            ctx.trace(|| format!("personality.conv.{i}"), h);
        }
        let p_emb = ctx.dropout(h.mean_axis(2)?, self.cfg.personality_dropout)?;

        let mut h = emo_seq.transpose(1, 2)?;
        ctx.trace(|| "emotion.input".into(), h);
        for (i, c) in self.emo_convs.iter().enumerate() {
            h = c.forward(p, ctx, h)?;
            ctx.trace(|| format!("emotion.conv.{i}"), h);
        }
        let e_seq = h.transpose(1, 2)?;
        let e_emb = ctx.dropout(h.mean_axis(2)?, self.cfg.emotion_dropout)?;

        let mut x = summary.clone();
        let mask = self.cfg.summary_mask();
        let (m, s) = (p.data(self.summary_mean), p.data(self.summary_std));
        let w = mask.len();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let c = i % w;
            *v = (*v - m[c]) / s[c] * F::cst(mask[c]);
        }
        let mut t = g.constant(x);
        for layer in &self.trial_mlp {
            t = layer.forward(p, ctx, t, self.cfg.trial_dropout)?;
        }
        Ok((p_emb, e_emb, t, e_seq))
    }

    fn emotion_head<'g, F: Float>(
        &self,
        head: &EmotionHead,
        p: &Bound<'_, 'g, F>,
        ctx: &mut Ctx<F>,
        e_seq: Var<'g, F>,
        t_emb: Var<'g, F>,
        p_emb: Var<'g, F>,
        tag: &str,
    ) -> Result<Var<'g, F>> {
        let b = e_seq.shape()[0];
        let d = self.cfg.fusion.d_model;
        let att = head.attn.forward(p, ctx, e_seq, tag)?.reshape(&[b, d])?;
        let mut parts = vec![att, t_emb];
        if self.cfg.condition_emotion_on_personality {
            parts.push(p_emb);
        }
        let g = att.graph();
        let x = head.proj.forward(p, g.concat(&parts, 1)?)?.relu()?;
        let x = ctx.dropout(x, self.cfg.emotion_dropout)?;
        let x = head.hidden.forward(p, x)?.relu()?;
        let x = ctx.dropout(x, self.cfg.emotion_dropout)?;
        Ok(head.out.forward(p, x)?)
    }

    pub fn forward<'g, F: Float>(
        &self,
        p: &Bound<'_, 'g, F>,
        ctx: &mut Ctx<F>,
        batch: &Batch<F>,
    ) -> Result<ForwardOutput<'g, F>> {
        let mut reduced = Vec::with_capacity(4);
        for e in &self.encoders {
            let m = e.modality;
            let x = batch.seqs[m.index()]
                .as_ref()
                .ok_or_else(|| ModelError::MissingInput(format!("{m} sequence")))?;
            reduced.push((m, self.encode_modality(p, ctx, m, x)?));
        }
        let stim = if self.cfg.use_stim_emo {
            Some(
                batch
                    .stim_emo
                    .as_ref()
                    .ok_or_else(|| ModelError::MissingInput("stim_emo".into()))?,
            )
        } else {
            None
        };
        let (pers_seq, emo_seq, pooled) = self.fuse_and_route(p, ctx, &reduced, stim)?;
        let summary = batch
            .summary
            .as_ref()
            .ok_or_else(|| ModelError::MissingInput("summary".into()))?;
        let (p_emb, e_emb, t_emb, e_seq) = self.branch_embeddings(p, ctx, pers_seq, emo_seq, summary)?;

        let g = p_emb.graph();
        let x = g.concat(&[p_emb, t_emb, pooled], 1)?;
        let mut x = self.pers_proj.forward(p, x)?.relu()?;
        for layer in &self.pers_mlp {
            x = layer.forward(p, ctx, x, self.cfg.personality_dropout)?;
        }
        let personality = self.pers_out.forward(p, x)?.sigmoid()?;

        let valence_logits = self.emotion_head(&self.valence_head, p, ctx, e_seq, t_emb, p_emb, "valence")?;
        let arousal_logits = self.emotion_head(&self.arousal_head, p, ctx, e_seq, t_emb, p_emb, "arousal")?;
        Ok(ForwardOutput {
            valence_logits,
            arousal_logits,
            personality,
            personality_embedding: p_emb,
            emotion_embedding: e_emb,
            trial_embedding: t_emb,
        })
    }

    /// Names of the parameters exclusive to the personality head and branch.
    pub fn group_of(&self, name: &str) -> Option<Group> {
        self.params.id(name).map(|i| self.params.entry(i).group)
    }
}

/// Averages contiguous equal segments of the time axis: `[B, T, d] -> [B, n, d]`.
pub fn segment_mean<F: Float>(x: Var<'_, F>, n: usize) -> crate::tensor::Result<Var<'_, F>> {
    let s = x.shape();
    if s.len() != 3 || n == 0 || s[1] % n != 0 {
        return Err(TensorError::Contract {
            op: "segment_mean",
            msg: format!("cannot split {} steps into {n} equal segments", s.get(1).copied().unwrap_or(0)),
        });
    }
    x.reshape(&[s[0], n, s[1] / n, s[2]])?.mean_axis(2)
}
