use std::f64::consts::TAU;

use super::layers::{cross_stack, encode_stack, Builder, CrossLayer, Ctx, EncoderLayer, Linear, ScoreHead};
use super::state::{Action, MemoryEntry, NavState};
use super::{ModelConfig, ModelError};
use crate::autodiff::{kernels, ParamStore, Tape, Var};
use crate::env::{orientation, Panorama, SceneGraph, Vocabulary};
use crate::seed;

const EMBED_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ability {
    Visual,
    Text,
    Local,
    Global,
    Behavior,
}

impl Ability {
    pub const ALL: [Ability; 5] = [Ability::Visual, Ability::Text, Ability::Local, Ability::Global, Ability::Behavior];

    pub fn symbol(self) -> &'static str {
        match self {
            Ability::Visual => "v",
            Ability::Text => "t",
            Ability::Local => "l",
            Ability::Global => "g",
            Ability::Behavior => "b",
        }
    }
}

/// Final-layer attention (`heads × queries × keys`) and pooled feature (`1 × h`).
#[derive(Debug, Clone, Copy)]
pub struct AbilityOutput {
    pub attn: Var,
    pub feat: Var,
}

/// Distillable outputs of one decision step.
#[derive(Debug, Clone, Copy)]
pub struct MetaKnowledge {
    pub visual: AbilityOutput,
    pub text: AbilityOutput,
    pub local: AbilityOutput,
    pub global: AbilityOutput,
    /// Fused action logits.
    pub behavior: Var,
}

impl MetaKnowledge {
    /// Attention and feature for the four representation abilities; `None` for behavior.
    pub fn representation(&self, ability: Ability) -> Option<AbilityOutput> {
        match ability {
            Ability::Visual => Some(self.visual),
            Ability::Text => Some(self.text),
            Ability::Local => Some(self.local),
            Ability::Global => Some(self.global),
            Ability::Behavior => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub features: Var,
    pub attn: Var,
    /// True at padding positions.
    pub pad_mask: Vec<bool>,
    pub pooled: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct VisualEncoding {
    pub features: Var,
    pub attn: Var,
    pub pooled: Var,
}

#[derive(Debug, Clone)]
pub struct LocalOutput {
    /// `[CLS]`, one token per slot, `[MEM]`.
    pub tokens: Var,
    pub attn: Var,
    pub pooled: Var,
    /// Scores over `[CLS]` and every slot, −∞ where no candidate is visible.
    pub token_logits: Var,
    /// Scores over stop followed by the panorama's candidates.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct GlobalOutput {
    /// `[CLS]`, memory entries, frontier nodes, `[MEM]`.
    pub tokens: Var,
    pub attn: Var,
    pub pooled: Var,
    pub logits: Var,
    pub actions: Vec<Action>,
    /// Leading actions (stop and candidates) that also have local scores.
    pub n_local: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub actions: Vec<Action>,
    pub n_local: usize,
    pub local_logits: Var,
    pub global_logits: Var,
    pub logits: Var,
    pub probs: Vec<f64>,
    pub fusion_weight: f64,
    pub meta: MetaKnowledge,
}

impl StepOutput {
    pub fn action_index(&self, action: Action) -> Option<usize> {
        self.actions.iter().position(|a| *a == action)
    }

    /// Highest-probability action, lowest index on ties.
    pub fn greedy(&self) -> Action {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        self.actions[best]
    }
}

#[derive(Debug, Clone)]
struct Branch {
    proj: Linear,
    orient: Linear,
    cls: usize,
    mem: usize,
    layers: Vec<CrossLayer>,
}

impl Branch {
    fn new<R: rand::Rng>(b: &mut Builder<'_, R>, name: &str, cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        Self {
            proj: Linear::new(b, &format!("{name}.proj"), h, h),
            orient: Linear::new(b, &format!("{name}.orient"), 4, h),
            cls: b.normal(&format!("{name}.cls"), vec![1, h], EMBED_STD),
            mem: b.normal(&format!("{name}.mem"), vec![1, h], EMBED_STD),
            layers: (0..cfg.cross_layers)
                .map(|i| CrossLayer::new(b, &format!("{name}.layer{i}"), h, cfg.heads))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Net {
    tok_emb: usize,
    pos_emb: usize,
    text: Vec<EncoderLayer>,
    obs_proj: Linear,
    obs_orient: Linear,
    pano: Vec<EncoderLayer>,
    step_emb: usize,
    local: Branch,
    global: Branch,
    gaa_query: usize,
    frontier_type: usize,
    head_local: ScoreHead,
    head_global: ScoreHead,
    fusion: Linear,
}

/// The navigation agent. Parameters live in `params`; forward passes record
/// onto a caller-supplied tape, either trainable or as frozen constants.
#[derive(Debug, Clone)]
pub struct AgentModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    net: Net,
}

fn rows_of(tape: &mut Tape, rows: &[[f64; 4]]) -> Result<Var, ModelError> {
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(tape.constant_raw(vec![rows.len(), 4], data)?)
}

fn pool(tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
    let m = tape.mean_rows(x)?;
    let h = tape.shape(m)[0];
    Ok(tape.reshape(m, vec![1, h])?)
}

/// Picks entries of a rank-1 tensor.
fn gather_vec(tape: &mut Tape, v: Var, ids: &[usize]) -> Result<Var, ModelError> {
    let n = tape.shape(v)[0];
    let col = tape.reshape(v, vec![n, 1])?;
    let g = tape.embed_lookup(col, ids)?;
    Ok(tape.reshape(g, vec![ids.len()])?)
}

/// Orientation of `node` seen from the current pose; zeros for the current node.
fn relative_orientation(scene: &SceneGraph, state: &NavState, node: usize) -> [f64; 4] {
    if node == state.pose.node {
        return [0.0; 4];
    }
    let rel = (scene.bearing(state.pose.node, node) - state.pose.heading).rem_euclid(TAU);
    orientation(rel)
}

impl AgentModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let (h, heads) = (config.hidden, config.heads);
        let net = Net {
            tok_emb: b.normal("text.tok_emb", vec![config.vocab_size, h], EMBED_STD),
            pos_emb: b.normal("text.pos_emb", vec![config.max_text_len, h], EMBED_STD),
            text: (0..config.text_layers).map(|i| EncoderLayer::new(&mut b, &format!("text.layer{i}"), h, heads)).collect(),
            obs_proj: Linear::new(&mut b, "pano.obs_proj", config.obs_dim, h),
            obs_orient: Linear::new(&mut b, "pano.orient", 4, h),
            pano: (0..config.pano_layers).map(|i| EncoderLayer::new(&mut b, &format!("pano.layer{i}"), h, heads)).collect(),
            step_emb: b.normal("step_emb", vec![config.horizon + 1, h], EMBED_STD),
            local: Branch::new(&mut b, "local", &config),
            global: Branch::new(&mut b, "global", &config),
            gaa_query: b.normal("global.gaa_query", vec![1, h], EMBED_STD),
            frontier_type: b.normal("global.frontier_type", vec![1, h], EMBED_STD),
            head_local: ScoreHead::new(&mut b, "head_local", h),
            head_global: ScoreHead::new(&mut b, "head_global", h),
            fusion: Linear::new(&mut b, "fusion", h, 1),
        };
        Ok(Self { config, params: store, net })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn ctx<'a>(&'a self, tape: &'a mut Tape, trainable: bool) -> Ctx<'a> {
        Ctx::new(tape, &self.params, trainable)
    }

    fn step_row(&self, ctx: &mut Ctx<'_>, step: usize) -> Result<Var, ModelError> {
        let table = ctx.p(self.net.step_emb);
        Ok(ctx.tape.embed_lookup(table, &[step.min(self.config.horizon)])?)
    }

    /// Instruction features `L × h` from token and position embeddings and
    /// the text self-attention stack. Padding tokens are masked as keys.
    pub fn encode_text(
        &self,
        tape: &mut Tape,
        trainable: bool,
        tokens: &[usize],
        positions: &[usize],
    ) -> Result<TextEncoding, ModelError> {
        if tokens.is_empty() || tokens.len() != positions.len() {
            return Err(ModelError::Contract(format!(
                "{} tokens with {} positions",
                tokens.len(),
                positions.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::OutOfVocab { token: t, vocab: self.config.vocab_size });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_text_len) {
            return Err(ModelError::Contract(format!("position {p} ≥ max length {}", self.config.max_text_len)));
        }
        let pad_mask: Vec<bool> = tokens.iter().map(|&t| t == Vocabulary::PAD).collect();
        let valid: Vec<usize> = (0..tokens.len()).filter(|&i| !pad_mask[i]).collect();
        if valid.is_empty() {
            return Err(ModelError::Contract("instruction is all padding".into()));
        }
        let mut ctx = self.ctx(tape, trainable);
        let (tok, pos) = (ctx.p(self.net.tok_emb), ctx.p(self.net.pos_emb));
        let t = ctx.tape.embed_lookup(tok, tokens)?;
        let p = ctx.tape.embed_lookup(pos, positions)?;
        let x = ctx.tape.add(t, p)?;
        let enc = encode_stack(&self.net.text, &mut ctx, x, Some(&pad_mask))?;
        let kept = ctx.tape.embed_lookup(enc.out, &valid)?;
        let pooled = pool(ctx.tape, kept)?;
        Ok(TextEncoding { features: enc.out, attn: enc.probs, pad_mask, pooled })
    }

    /// Panoramic features `V × h`: projected slot features plus projected
    /// orientations, through the panorama self-attention stack.
    pub fn encode_visual(&self, tape: &mut Tape, trainable: bool, pano: &Panorama) -> Result<VisualEncoding, ModelError> {
        if pano.slots.is_empty() {
            return Err(ModelError::Config("panorama has no slots".into()));
        }
        if let Some(s) = pano.slots.iter().find(|s| s.feature.len() != self.config.obs_dim) {
            return Err(ModelError::Config(format!(
                "slot feature of dim {} for model expecting {}",
                s.feature.len(),
                self.config.obs_dim
            )));
        }
        let v = pano.slots.len();
        let obs: Vec<f64> = pano.slots.iter().flat_map(|s| s.feature.iter().copied()).collect();
        let orient: Vec<[f64; 4]> = pano.slots.iter().map(|s| s.orientation).collect();
        let mut ctx = self.ctx(tape, trainable);
        let obs = ctx.tape.constant_raw(vec![v, self.config.obs_dim], obs)?;
        let orient = rows_of(ctx.tape, &orient)?;
        let a = self.net.obs_proj.forward(&mut ctx, obs)?;
        let b = self.net.obs_orient.forward(&mut ctx, orient)?;
        let x = ctx.tape.add(a, b)?;
        let enc = encode_stack(&self.net.pano, &mut ctx, x, None)?;
        let pooled = pool(ctx.tape, enc.out)?;
        Ok(VisualEncoding { features: enc.out, attn: enc.probs, pooled })
    }

    /// Slot-level grounding: `{[CLS], slots, [MEM]}` cross-attends to the
    /// instruction and scores stop plus every visible candidate.
    pub fn local_match(
        &self,
        tape: &mut Tape,
        trainable: bool,
        visual: &VisualEncoding,
        pano: &Panorama,
        text: &TextEncoding,
        step: usize,
    ) -> Result<LocalOutput, ModelError> {
        let v = pano.slots.len();
        if let Some(c) = pano.candidates.iter().find(|c| c.slot >= v) {
            return Err(ModelError::Contract(format!("candidate {} in slot {} of {v}", c.node, c.slot)));
        }
        let mut ctx = self.ctx(tape, trainable);
        let br = &self.net.local;
        let body = br.proj.forward(&mut ctx, visual.features)?;
        let cls = ctx.p(br.cls);
        let srow = self.step_row(&mut ctx, step)?;
        let cls = ctx.tape.add(cls, srow)?;
        let mem = ctx.p(br.mem);
        let x = ctx.tape.concat(&[cls, body, mem], 0)?;
        let mut orient = vec![[0.0; 4]];
        orient.extend(pano.slots.iter().map(|s| s.orientation));
        orient.push([0.0; 4]);
        let orient = rows_of(ctx.tape, &orient)?;
        let o = br.orient.forward(&mut ctx, orient)?;
        let x = ctx.tape.add(x, o)?;
        let enc = cross_stack(&br.layers, &mut ctx, x, text.features, Some(&text.pad_mask))?;
        let scores = self.net.head_local.forward(&mut ctx, enc.out)?;

        let token_ids: Vec<usize> = (0..=v).collect();
        let token_scores = gather_vec(ctx.tape, scores, &token_ids)?;
        let mut mask = vec![true; v + 1];
        mask[0] = false;
        for c in &pano.candidates {
            mask[1 + c.slot] = false;
        }
        let token_logits = ctx.tape.masked_fill(token_scores, &mask, f64::NEG_INFINITY)?;
        let mut action_ids = vec![0];
        action_ids.extend(pano.candidates.iter().map(|c| 1 + c.slot));
        let logits = gather_vec(ctx.tape, scores, &action_ids)?;
        let pooled = pool(ctx.tape, enc.out)?;
        Ok(LocalOutput { tokens: enc.out, attn: enc.probs, pooled, token_logits, logits })
    }

    /// Attention pooling of the slot features with a learned query.
    pub fn aggregate(&self, tape: &mut Tape, trainable: bool, features: Var) -> Result<Var, ModelError> {
        let mut ctx = self.ctx(tape, trainable);
        let q = ctx.p(self.net.gaa_query);
        let s = ctx.tape.matmul_t(q, features)?;
        let s = ctx.tape.scale(s, 1.0 / (self.config.hidden as f64).sqrt())?;
        let p = ctx.tape.softmax(s)?;
        Ok(ctx.tape.matmul(p, features)?)
    }

    /// Records this step's aggregated view and newly seen nodes in `state`,
    /// then scores stop, the candidates, and the remaining frontier over the
    /// graph memory `{[CLS], memory, frontier, [MEM]}`.
    #[allow(clippy::too_many_arguments)]
    pub fn global_locate(
        &self,
        tape: &mut Tape,
        trainable: bool,
        scene: &SceneGraph,
        state: &mut NavState,
        visual: &VisualEncoding,
        pano: &Panorama,
        text: &TextEncoding,
    ) -> Result<GlobalOutput, ModelError> {
        let cur = state.pose.node;
        let agg = self.aggregate(tape, trainable, visual.features)?;
        state.memory.push(MemoryEntry { node: cur, step: state.step, feature: agg });
        state.frontier.remove(&cur);
        for c in &pano.candidates {
            if !state.is_visited(c.node) {
                let row = tape.embed_lookup(visual.features, &[c.slot])?;
                state.frontier.insert(c.node, row);
            }
        }

        let mut ctx = self.ctx(tape, trainable);
        let br = &self.net.global;
        let t = state.memory.len();
        let f = state.frontier.len();
        let mut feats: Vec<Var> = state.memory.iter().map(|m| m.feature).collect();
        feats.extend(state.frontier.values().copied());
        let nodes_in = ctx.tape.concat(&feats, 0)?;
        let body = br.proj.forward(&mut ctx, nodes_in)?;
        let steps_tab = ctx.p(self.net.step_emb);
        let steps: Vec<usize> = state.memory.iter().map(|m| m.step.min(self.config.horizon)).collect();
        let mut extra = vec![ctx.tape.embed_lookup(steps_tab, &steps)?];
        if f > 0 {
            let ft = ctx.p(self.net.frontier_type);
            extra.push(ctx.tape.embed_lookup(ft, &vec![0; f])?);
        }
        let extra = ctx.tape.concat(&extra, 0)?;
        let body = ctx.tape.add(body, extra)?;

        let cls = ctx.p(br.cls);
        let srow = self.step_row(&mut ctx, state.step)?;
        let cls = ctx.tape.add(cls, srow)?;
        let mem = ctx.p(br.mem);
        let x = ctx.tape.concat(&[cls, body, mem], 0)?;
        let mut orient = vec![[0.0; 4]];
        orient.extend(state.memory.iter().map(|m| relative_orientation(scene, state, m.node)));
        orient.extend(state.frontier.keys().map(|&n| relative_orientation(scene, state, n)));
        orient.push([0.0; 4]);
        let orient = rows_of(ctx.tape, &orient)?;
        let o = br.orient.forward(&mut ctx, orient)?;
        let x = ctx.tape.add(x, o)?;
        let enc = cross_stack(&br.layers, &mut ctx, x, text.features, Some(&text.pad_mask))?;
        let scores = self.net.head_global.forward(&mut ctx, enc.out)?;

        let mut actions = vec![Action::Stop];
        actions.extend(pano.candidates.iter().map(|c| Action::Goto(c.node)));
        let n_local = actions.len();
        actions.extend(
            state.frontier.keys().filter(|n| pano.candidate_index(**n).is_none()).map(|&n| Action::Goto(n)),
        );
        let frontier_pos = |n: usize| state.frontier.keys().position(|&k| k == n);
        let mut ids = Vec::with_capacity(actions.len());
        for a in &actions {
            let id = match *a {
                Action::Stop => 0,
                Action::Goto(n) => match (frontier_pos(n), state.latest_memory(n)) {
                    (Some(p), _) => 1 + t + p,
                    (None, Some(m)) => 1 + m,
                    (None, None) => {
                        return Err(ModelError::Contract(format!("node {n} has no graph-memory token")));
                    }
                },
            };
            ids.push(id);
        }
        let logits = gather_vec(ctx.tape, scores, &ids)?;
        let pooled = pool(ctx.tape, enc.out)?;
        Ok(GlobalOutput { tokens: enc.out, attn: enc.probs, pooled, logits, actions, n_local })
    }

    /// Fuses local and global scores: `w·B_l + (1−w)·B_g` on the first
    /// `n_local` actions, `B_g` alone on the rest. Returns the fused logits
    /// and the weight `w = sigmoid(linear(global [CLS]))`.
    pub fn decide(
        &self,
        tape: &mut Tape,
        trainable: bool,
        local_logits: Var,
        global_logits: Var,
        global_tokens: Var,
    ) -> Result<(Var, Var), ModelError> {
        let n_local = tape.shape(local_logits)[0];
        let n = tape.shape(global_logits)[0];
        if n_local == 0 || n_local > n {
            return Err(ModelError::Contract(format!("{n_local} local scores for {n} actions")));
        }
        let mut ctx = self.ctx(tape, trainable);
        let cls = ctx.tape.embed_lookup(global_tokens, &[0])?;
        let w = self.net.fusion.forward(&mut ctx, cls)?;
        let w = ctx.tape.sigmoid(w)?;
        let w = ctx.tape.reshape(w, vec![1])?;
        let tape = ctx.tape;
        let local_ext = if n_local < n {
            let pad = tape.constant_raw(vec![n - n_local], vec![0.0; n - n_local])?;
            let joined = tape.concat(&[local_logits, pad], 1)?;
            tape.reshape(joined, vec![n])?
        } else {
            local_logits
        };
        let diff = tape.sub(local_ext, global_logits)?;
        let keep = tape.constant_raw(vec![n], (0..n).map(|i| if i < n_local { 1.0 } else { 0.0 }).collect())?;
        let diff = tape.mul(diff, keep)?;
        let diff = tape.scale_by(diff, w)?;
        let fused = tape.add(global_logits, diff)?;
        Ok((fused, w))
    }

    /// One decision: encode the panorama, ground it locally and globally,
    /// fuse, and record all five abilities. `state` gains this step's memory
    /// entry and frontier; the caller applies the chosen action.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        trainable: bool,
        scene: &SceneGraph,
        state: &mut NavState,
        pano: &Panorama,
        text: &TextEncoding,
    ) -> Result<StepOutput, ModelError> {
        if state.stopped {
            return Err(ModelError::Contract("step called after stop".into()));
        }
        if state.step >= self.config.horizon {
            return Err(ModelError::Contract(format!("step {} at horizon {}", state.step, self.config.horizon)));
        }
        if pano.node != state.pose.node {
            return Err(ModelError::Contract(format!(
                "panorama at node {} but agent at {}",
                pano.node, state.pose.node
            )));
        }
        let visual = self.encode_visual(tape, trainable, pano)?;
        let local = self.local_match(tape, trainable, &visual, pano, text, state.step)?;
        let global = self.global_locate(tape, trainable, scene, state, &visual, pano, text)?;
        if global.n_local != tape.shape(local.logits)[0] {
            return Err(ModelError::Contract("local and global action sets disagree".into()));
        }
        let (logits, w) = self.decide(tape, trainable, local.logits, global.logits, global.tokens)?;
        let probs = kernels::softmax(tape.value(logits));
        let meta = MetaKnowledge {
            visual: AbilityOutput { attn: visual.attn, feat: visual.pooled },
            text: AbilityOutput { attn: text.attn, feat: text.pooled },
            local: AbilityOutput { attn: local.attn, feat: local.pooled },
            global: AbilityOutput { attn: global.attn, feat: global.pooled },
            behavior: logits,
        };
        Ok(StepOutput {
            actions: global.actions,
            n_local: global.n_local,
            local_logits: local.logits,
            global_logits: global.logits,
            logits,
            probs,
            fusion_weight: tape.scalar(w),
            meta,
        })
    }
}
