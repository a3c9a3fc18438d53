//! The dialogue-aware network.
//!
//! Per participant: five cue encoders, then an audio-group stack and a
//! visual-group stack. Per target: the partners' group embeddings are
//! stacked along the frame axis, passed through a context stack, and
//! attended to from the target's own embeddings (audio queries audio
//! context, visual queries visual context). The two attended streams are
//! concatenated, normalized, and mapped to one score in (0, 1) per frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::block::{AttnWeights, BlockSpec, FfnWeights, MambaBlockParams, MambaStack, Projection};
use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::losses::ContrastiveProjection;
use crate::params::{Bound, ParamId, ParamStore};
use crate::pipeline::{build_modality_groups_var, AlignedCues, Cue, CueEncoder, SessionBatch};
use crate::tensor::Tensor;

/// Pre-norm cross-attention followed by a pre-norm FFN, both residual.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub attn: AttnWeights,
    pub ffn: FfnWeights,
    pub heads: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub width: usize,
}

impl CrossAttention {
    pub fn init(store: &mut ParamStore, prefix: &str, spec: &BlockSpec, rng: &mut ChaCha8Rng) -> Self {
        let w = spec.width;
        CrossAttention {
            ln_g: store.add(format!("{prefix}.ln_g"), Tensor::ones([w])),
            ln_b: store.add(format!("{prefix}.ln_b"), Tensor::zeros([w])),
            attn: AttnWeights::init(store, &format!("{prefix}.attn"), w, rng),
            ffn: FfnWeights::init(store, &format!("{prefix}.ffn"), w, spec.ffn_expansion, rng),
            heads: spec.heads,
            dropout: spec.dropout,
            ln_eps: spec.ln_eps,
            width: w,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln_g, self.ln_b];
        ids.extend(self.attn.ids());
        ids.extend(self.ffn.ids());
        ids
    }

    /// `X̂ = X + Attn(LN(X), ctx)`, then `X̂ + FFN(LN(X̂))`.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var, ctx: Var) -> Result<Var> {
        for (what, v) in [("queries", x), ("context", ctx)] {
            if tape.shape(v).get(1) != Some(&self.width) || tape.shape(v).len() != 2 {
                return Err(dim_err!(
                    "cross-attention of width {} got {what} of shape {:?}",
                    self.width,
                    tape.shape(v)
                ));
            }
        }
        let h = tape.layer_norm(x, p[self.ln_g], p[self.ln_b], self.ln_eps)?;
        let a = self.attn.cross(tape, p, h, ctx, self.heads)?;
        let a = tape.dropout(a, self.dropout)?;
        let u = tape.add(x, a)?;
        let f = self.ffn.apply(tape, p, u, self.ln_eps)?;
        let f = tape.dropout(f, self.dropout)?;
        tape.add(u, f)
    }
}

/// `LayerNorm → Linear(d_f→d_f) → SiLU → Linear(d_f→1) → sigmoid`.
#[derive(Debug, Clone)]
pub struct Head {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub hidden: Projection,
    pub out: Projection,
    pub ln_eps: f64,
}

impl Head {
    pub fn init(store: &mut ParamStore, prefix: &str, d_f: usize, ln_eps: f64, rng: &mut ChaCha8Rng) -> Self {
        Head {
            ln_g: store.add(format!("{prefix}.ln_g"), Tensor::ones([d_f])),
            ln_b: store.add(format!("{prefix}.ln_b"), Tensor::zeros([d_f])),
            hidden: Projection::init(store, &format!("{prefix}.hidden"), d_f, d_f, rng),
            out: Projection::init(store, &format!("{prefix}.out"), d_f, 1, rng),
            ln_eps,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln_g, self.ln_b];
        ids.extend(self.hidden.ids());
        ids.extend(self.out.ids());
        ids
    }

    pub fn width(&self) -> usize {
        self.hidden.in_width
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, fused: Var) -> Result<Var> {
        let f = tape.layer_norm(fused, p[self.ln_g], p[self.ln_b], self.ln_eps)?;
        let h = self.hidden.apply(tape, p, f)?;
        let h = tape.silu(h)?;
        let y = self.out.apply(tape, p, h)?;
        tape.sigmoid(y)
    }
}

/// Group embeddings of one participant. `visual` is `None` when modality
/// fusion is disabled and a single stack sees all five cues.
#[derive(Debug, Clone, Copy)]
pub struct GroupEmbeddings {
    pub participant: usize,
    pub audio: Var,
    pub visual: Option<Var>,
}

/// Partners' embeddings stacked along the frame axis, in `order`.
#[derive(Debug, Clone)]
pub struct PartnerContext {
    pub audio: Var,
    pub visual: Option<Var>,
    pub order: Vec<usize>,
}

/// Every weight of the network, as ids into one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub encoders: Vec<CueEncoder>,
    /// Audio-group stack, or the single stack over all cues without
    /// modality fusion.
    pub audio_stack: MambaStack,
    pub visual_stack: Option<MambaStack>,
    pub ctx_audio: Option<MambaStack>,
    pub ctx_visual: Option<MambaStack>,
    pub xattn_audio: Option<CrossAttention>,
    pub xattn_visual: Option<CrossAttention>,
    pub head: Head,
    pub contrastive: Option<ContrastiveProjection>,
}

impl ModelParams {
    /// Builds and initializes the network from `cfg.init_seed`.
    /// `contrastive_width` adds the shared projection used by the alignment
    /// loss when the group widths differ.
    pub fn init(cfg: &ModelConfig, contrastive_width: Option<usize>) -> Result<(ParamStore, ModelParams)> {
        if cfg.layers == 0 {
            return Err(Error::Config("model.layers must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let encoders = Cue::ALL
            .iter()
            .map(|&cue| {
                let proj = Projection::init(&mut store, &format!("enc.{cue}.proj"), cue.width(), d, &mut rng);
                let block = MambaBlockParams::init(
                    &mut store,
                    &format!("enc.{cue}.block"),
                    BlockSpec::from_model(cfg, d),
                    &mut rng,
                )?;
                Ok(CueEncoder { cue, proj, block })
            })
            .collect::<Result<Vec<_>>>()?;

        let (ka, kv) = (cfg.k_audio, cfg.k_visual);
        let spec_a = BlockSpec::from_model(cfg, ka);
        let spec_v = BlockSpec::from_model(cfg, kv);
        let (audio_stack, visual_stack) = if cfg.modality_fusion {
            (
                MambaStack::init(&mut store, "audio", Some(2 * d), cfg.layers, spec_a, &mut rng)?,
                Some(MambaStack::init(&mut store, "visual", Some(3 * d), cfg.layers, spec_v, &mut rng)?),
            )
        } else {
            (
                MambaStack::init(&mut store, "fused", Some(5 * d), cfg.layers, spec_a, &mut rng)?,
                None,
            )
        };

        let (mut ctx_audio, mut ctx_visual, mut xattn_audio, mut xattn_visual) = (None, None, None, None);
        if cfg.partner_fusion {
            if !cfg.ctx_identity {
                ctx_audio = Some(MambaStack::init(&mut store, "ctx_audio", None, cfg.layers, spec_a, &mut rng)?);
                if visual_stack.is_some() {
                    ctx_visual =
                        Some(MambaStack::init(&mut store, "ctx_visual", None, cfg.layers, spec_v, &mut rng)?);
                }
            }
            xattn_audio = Some(CrossAttention::init(&mut store, "xattn_audio", &spec_a, &mut rng));
            if visual_stack.is_some() {
                xattn_visual = Some(CrossAttention::init(&mut store, "xattn_visual", &spec_v, &mut rng));
            }
        }

        let d_f = if visual_stack.is_some() { ka + kv } else { ka };
        let head = Head::init(&mut store, "head", d_f, cfg.ln_eps, &mut rng);
        let contrastive = match contrastive_width {
            Some(w) if visual_stack.is_some() => Some(ContrastiveProjection {
                audio: Projection::init(&mut store, "contrast.audio", ka, w, &mut rng),
                visual: Projection::init(&mut store, "contrast.visual", kv, w, &mut rng),
            }),
            _ => None,
        };
        let params = ModelParams {
            cfg: cfg.clone(),
            encoders,
            audio_stack,
            visual_stack,
            ctx_audio,
            ctx_visual,
            xattn_audio,
            xattn_visual,
            head,
            contrastive,
        };
        Ok((store, params))
    }

    /// Width of the fused per-frame feature.
    pub fn fused_width(&self) -> usize {
        self.head.width()
    }

    pub fn has_alignment_pair(&self) -> bool {
        self.visual_stack.is_some()
    }

    /// One participant's group embeddings from window-aligned cues.
    pub fn embed_participant(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        cues: &AlignedCues,
        participant: usize,
    ) -> Result<GroupEmbeddings> {
        let encoded = self
            .encoders
            .iter()
            .map(|enc| {
                let x = tape.constant(cues.get(enc.cue).clone());
                enc.forward(tape, p, x)
            })
            .collect::<Result<Vec<_>>>()?;
        match &self.visual_stack {
            Some(vs) => {
                let (a, v) = build_modality_groups_var(tape, &encoded)?;
                Ok(GroupEmbeddings {
                    participant,
                    audio: encode_group(tape, p, a, &self.audio_stack)?,
                    visual: Some(encode_group(tape, p, v, vs)?),
                })
            }
            None => {
                let all = tape.concat_cols(&encoded)?;
                Ok(GroupEmbeddings {
                    participant,
                    audio: encode_group(tape, p, all, &self.audio_stack)?,
                    visual: None,
                })
            }
        }
    }

    /// Group embeddings of every participant, in participant order.
    pub fn embed_all(&self, tape: &mut Tape<'_>, p: &Bound, cues: &[AlignedCues]) -> Result<Vec<GroupEmbeddings>> {
        if cues.len() < 2 {
            return Err(Error::Config(format!(
                "a dialogue needs at least 2 participants, got {}",
                cues.len()
            )));
        }
        cues.iter()
            .enumerate()
            .map(|(i, c)| self.embed_participant(tape, p, c, i))
            .collect()
    }

    /// Frame scores (`n×1`) for `target` given everyone's embeddings.
    pub fn predict_target(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        all: &[GroupEmbeddings],
        target: usize,
    ) -> Result<Var> {
        let me = all
            .iter()
            .find(|g| g.participant == target)
            .ok_or_else(|| Error::Usage(format!("unknown target participant {target}")))?;
        let (mut xa, mut xv) = (me.audio, me.visual);
        if let Some(xattn_a) = &self.xattn_audio {
            let partners: Vec<GroupEmbeddings> =
                all.iter().filter(|g| g.participant != target).copied().collect();
            let ctx = assemble_partner_context(tape, &partners, target)?;
            let ca = match &self.ctx_audio {
                Some(s) => s.forward(tape, p, ctx.audio)?,
                None => ctx.audio,
            };
            xa = xattn_a.forward(tape, p, xa, ca)?;
            if let (Some(xattn_v), Some(v), Some(cv)) = (&self.xattn_visual, xv, ctx.visual) {
                let cv = match &self.ctx_visual {
                    Some(s) => s.forward(tape, p, cv)?,
                    None => cv,
                };
                xv = Some(xattn_v.forward(tape, p, v, cv)?);
            }
        }
        fuse_and_predict(tape, p, xa, xv, &self.head)
    }

    /// Predictions for `target` plus every participant's group embeddings.
    pub fn forward_session(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        cues: &[AlignedCues],
        target: usize,
    ) -> Result<(Var, Vec<GroupEmbeddings>)> {
        if target >= cues.len() {
            return Err(Error::Usage(format!(
                "unknown target participant {target} (session has {})",
                cues.len()
            )));
        }
        let emb = self.embed_all(tape, p, cues)?;
        let y = self.predict_target(tape, p, &emb, target)?;
        Ok((y, emb))
    }

    /// Eval-mode predictions for `target` over a whole session in one pass.
    pub fn predict_session(&self, store: &ParamStore, session: &SessionBatch, target: usize) -> Result<Tensor> {
        let cues = session
            .participants
            .iter()
            .map(|c| c.aligned())
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let (y, _) = self.forward_session(&mut tape, &p, &cues, target)?;
        Ok(tape.value(y).clone())
    }

    /// Every parameter id that belongs to this network.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for e in &self.encoders {
            ids.extend(e.proj.ids());
            ids.extend(e.block.ids());
        }
        ids.extend(self.audio_stack.ids());
        for s in [&self.visual_stack, &self.ctx_audio, &self.ctx_visual].into_iter().flatten() {
            ids.extend(s.ids());
        }
        for x in [&self.xattn_audio, &self.xattn_visual].into_iter().flatten() {
            ids.extend(x.ids());
        }
        ids.extend(self.head.ids());
        if let Some(c) = &self.contrastive {
            ids.extend(c.audio.ids());
            ids.extend(c.visual.ids());
        }
        ids
    }
}

/// Runs a group stack (`n×w → n×k`).
pub fn encode_group(tape: &mut Tape<'_>, p: &Bound, group: Var, stack: &MambaStack) -> Result<Var> {
    stack.forward(tape, p, group)
}

/// Stacks partner embeddings along the frame axis in the given order.
/// Row block `i` holds partner `i`'s frames in their original order.
pub fn assemble_partner_context(
    tape: &mut Tape<'_>,
    partners: &[GroupEmbeddings],
    target: usize,
) -> Result<PartnerContext> {
    if partners.is_empty() {
        return Err(Error::Config("partner context needs at least one partner".into()));
    }
    if partners.iter().any(|g| g.participant == target) {
        return Err(Error::Usage(format!(
            "target {target} must not appear among its own partners"
        )));
    }
    let n = tape.shape(partners[0].audio)[0];
    for g in partners {
        let gn = tape.shape(g.audio)[0];
        let vn = g.visual.map_or(gn, |v| tape.shape(v)[0]);
        if gn != n || vn != n {
            return Err(Error::Alignment(format!(
                "partner {} has {gn}/{vn} frames, expected {n}",
                g.participant
            )));
        }
    }
    let audio: Vec<Var> = partners.iter().map(|g| g.audio).collect();
    let audio = tape.concat_rows(&audio)?;
    let visual = match partners.iter().map(|g| g.visual).collect::<Option<Vec<Var>>>() {
        Some(vs) => Some(tape.concat_rows(&vs)?),
        None => None,
    };
    Ok(PartnerContext {
        audio,
        visual,
        order: partners.iter().map(|g| g.participant).collect(),
    })
}

/// `ŷ = head(LN([Xa ∥ Xv]))`, one score per frame.
pub fn fuse_and_predict(
    tape: &mut Tape<'_>,
    p: &Bound,
    xa: Var,
    xv: Option<Var>,
    head: &Head,
) -> Result<Var> {
    let fused = match xv {
        Some(v) => {
            let (na, nv) = (tape.shape(xa)[0], tape.shape(v)[0]);
            if na != nv {
                return Err(Error::Alignment(format!(
                    "audio stream has {na} frames, visual has {nv}"
                )));
            }
            tape.concat_cols(&[xa, v])?
        }
        None => xa,
    };
    if tape.shape(fused)[1] != head.width() {
        return Err(dim_err!(
            "head expects width {}, fused features have shape {:?}",
            head.width(),
            tape.shape(fused)
        ));
    }
    head.forward(tape, p, fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{generate_synthetic_session, SyntheticOptions};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 4,
            k_audio: 8,
            k_visual: 8,
            layers: 1,
            d_state: 2,
            chunk_size: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn session_forward_shape() {
        let (store, m) = ModelParams::init(&tiny(), None).unwrap();
        let s = generate_synthetic_session(1, 2, 24, &SyntheticOptions::default()).unwrap();
        let y = m.predict_session(&store, &s, 0).unwrap();
        assert_eq!(y.shape(), &[24, 1]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(m.predict_session(&store, &s, 2), Err(Error::Usage(_))));
    }

    #[test]
    fn ids_cover_the_whole_store() {
        for (mf, pf, ci) in [(true, true, false), (false, true, false), (true, false, false), (true, true, true)] {
            let cfg = ModelConfig {
                modality_fusion: mf,
                partner_fusion: pf,
                ctx_identity: ci,
                ..tiny()
            };
            let (store, m) = ModelParams::init(&cfg, Some(4)).unwrap();
            let mut ids = m.ids();
            ids.sort();
            assert_eq!(ids, store.ids().collect::<Vec<_>>());
        }
    }

    #[test]
    fn partner_context_checks() {
        let mut tape = Tape::new();
        let mut g = |i: usize, n: usize| GroupEmbeddings {
            participant: i,
            audio: tape.constant(Tensor::full([n, 2], i as f64)),
            visual: None,
        };
        let (a, b, short) = (g(0, 3), g(1, 3), g(2, 2));
        assert!(matches!(
            assemble_partner_context(&mut tape, &[a, b], 1),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            assemble_partner_context(&mut tape, &[a, short], 1),
            Err(Error::Alignment(_))
        ));
        let ctx = assemble_partner_context(&mut tape, &[b, a], 2).unwrap();
        assert_eq!(ctx.order, vec![1, 0]);
        assert_eq!(tape.value(ctx.audio).data(), &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
