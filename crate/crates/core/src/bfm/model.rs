use rand::Rng;

use super::{BfmConfig, BfmError, PoseGoal, GOAL_FEATURES, LOOKAHEADS, PROPRIO_DIM};
use crate::numgrad::{
    mha_forward, Activation, AttentionBlock, GaussianDist, Linear, Mlp, NumError, ParamId, ParamStore, Real, Tape,
    Tensor, Var,
};

/// Name prefix of every behavior-model parameter.
pub const PREFIX: &str = "bfm.";

/// Token-conditioned policy trunk. Parameters live in a shared [`ParamStore`]
/// under the `bfm.` prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Bfm {
    pub cfg: BfmConfig,
    pub state_encoder: Mlp,
    pub goal_encoder: Mlp,
    /// One learned offset row per lookahead in [`LOOKAHEADS`].
    pub lookahead_offsets: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub head: Linear,
    pub log_std: ParamId,
}

/// Padded `[B·T, d]` token rows plus the per-row presence mask.
#[derive(Debug, Clone)]
pub struct PackedTokens {
    pub tokens: Var,
    pub mask: Vec<bool>,
    pub per_sample: usize,
}

/// Lays out token rows sample by sample. `groups[b]` lists `(source, row)`
/// pairs for sample `b` in sequence order; shorter groups are padded with
/// absent rows.
pub fn pack_tokens<F: Real>(
    tape: &mut Tape<F>,
    sources: &[Var],
    groups: &[Vec<(usize, usize)>],
) -> Result<PackedTokens, NumError> {
    let per_sample = groups.iter().map(Vec::len).max().unwrap_or(0);
    if per_sample == 0 {
        return Err(NumError::Contract("token sequence is empty".into()));
    }
    let mut map = Vec::with_capacity(groups.len() * per_sample);
    let mut mask = Vec::with_capacity(groups.len() * per_sample);
    for g in groups {
        if g.is_empty() {
            return Err(NumError::Contract("sample without tokens".into()));
        }
        for i in 0..per_sample {
            map.push(g.get(i).copied());
            mask.push(i < g.len());
        }
    }
    let tokens = tape.assemble_rows(sources, map)?;
    Ok(PackedTokens {
        tokens,
        mask,
        per_sample,
    })
}

/// Keeps each of `n` goal tokens independently with probability `keep_prob`.
pub fn sample_mask(rng: &mut impl Rng, keep_prob: f64, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(keep_prob.clamp(0.0, 1.0))).collect()
}

/// Unbatched token sequence: goal tokens first, the state token last.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub rows: Vec<Vec<f64>>,
    pub present: Vec<bool>,
}

impl TokenSet {
    /// All rows present.
    pub fn new(goal_tokens: Vec<Vec<f64>>, state_token: Vec<f64>) -> Self {
        let mut rows = goal_tokens;
        rows.push(state_token);
        let present = vec![true; rows.len()];
        Self { rows, present }
    }

    /// Marks goal tokens absent according to `keep`; the state token always stays.
    pub fn masked(mut self, keep: &[bool]) -> Self {
        for (p, k) in self.present.iter_mut().zip(keep) {
            *p = *k;
        }
        let last = self.present.len() - 1;
        self.present[last] = true;
        self
    }

    pub fn active(&self) -> usize {
        self.present.iter().filter(|p| **p).count()
    }
}

impl Bfm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: BfmConfig, rng: &mut impl Rng) -> Result<Self, BfmError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let sizes = |input: usize| {
            let mut s = vec![input];
            s.extend(&cfg.encoder_hidden);
            s.push(d);
            s
        };
        let state_encoder = Mlp::new(
            store,
            "bfm.state_enc",
            &sizes(PROPRIO_DIM),
            cfg.activation,
            Activation::Identity,
            rng,
        )?;
        let goal_encoder = Mlp::new(
            store,
            "bfm.goal_enc",
            &sizes(GOAL_FEATURES),
            cfg.activation,
            Activation::Identity,
            rng,
        )?;
        let lookahead_offsets = store.add_glorot("bfm.lookahead", LOOKAHEADS.len(), d, 1.0, rng)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                AttentionBlock::new(
                    store,
                    &format!("bfm.block{i}"),
                    d,
                    cfg.heads,
                    cfg.ff_width,
                    cfg.activation,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let head = Linear::new(store, "bfm.head", d, cfg.action_dim, 0.5, rng)?;
        let log_std = store.add(
            "bfm.log_std",
            Tensor::filled(&[cfg.action_dim], F::of(cfg.init_log_std)),
        )?;
        Ok(Self {
            cfg,
            state_encoder,
            goal_encoder,
            lookahead_offsets,
            blocks,
            head,
            log_std,
        })
    }

    pub fn param_count(&self) -> usize {
        let d = self.cfg.d_model;
        self.state_encoder.param_count()
            + self.goal_encoder.param_count()
            + LOOKAHEADS.len() * d
            + self.blocks.iter().map(AttentionBlock::param_count).sum::<usize>()
            + self.head.param_count()
            + self.cfg.action_dim
    }

    /// `[B, 13] -> [B, d]`.
    pub fn encode_state<F: Real>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        proprio: Var,
    ) -> Result<Var, NumError> {
        self.state_encoder.forward(store, tape, proprio)
    }

    /// `[n, 9] -> [n, d]`: the goal MLP plus the learned offset of each row's lookahead.
    pub fn encode_goals<F: Real>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        features: Var,
        lookahead_idx: Vec<usize>,
    ) -> Result<Var, NumError> {
        let h = self.goal_encoder.forward(store, tape, features)?;
        let table = tape.param(store, self.lookahead_offsets);
        let off = tape.gather_rows(table, lookahead_idx)?;
        tape.add(h, off)
    }

    /// Attention blocks, mean-pool over present tokens, linear head.
    /// Returns the action mean `[B, A]` and the raw shared log-std `[A]`.
    pub fn trunk<F: Real>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        packed: &PackedTokens,
    ) -> Result<(Var, Var), NumError> {
        let mut x = packed.tokens;
        for block in &self.blocks {
            let vars = block.vars(store, tape);
            x = mha_forward(tape, x, &vars, block.heads, &packed.mask, packed.per_sample)?;
        }
        let pooled = tape.masked_mean_pool(x, &packed.mask, packed.per_sample)?;
        let mean = self.head.forward(store, tape, pooled)?;
        Ok((mean, tape.param(store, self.log_std)))
    }

    /// Single-sample state token.
    pub fn state_token<F: Real>(&self, store: &ParamStore<F>, proprio: &[f64]) -> Result<Vec<f64>, NumError> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(
            vec![1, proprio.len()],
            proprio.iter().map(|v| F::of(*v)).collect(),
        )?)?;
        let t = self.encode_state(store, &mut tape, x)?;
        Ok(tape.value(t).to_f64_vec())
    }

    /// Single pose-goal token.
    pub fn goal_token<F: Real>(&self, store: &ParamStore<F>, goal: &PoseGoal) -> Result<Vec<f64>, BfmError> {
        let k = goal.lookahead_index()?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(
            vec![1, GOAL_FEATURES],
            goal.features().iter().map(|v| F::of(*v)).collect(),
        )?)?;
        let t = self.encode_goals(store, &mut tape, x, vec![k])?;
        Ok(tape.value(t).to_f64_vec())
    }

    /// Trunk over an explicit token set.
    pub fn trunk_forward<F: Real>(&self, store: &ParamStore<F>, set: &TokenSet) -> Result<GaussianDist, BfmError> {
        if set.rows.is_empty() || set.active() == 0 {
            return Err(BfmError::Contract("trunk needs at least one token".into()));
        }
        let d = self.cfg.d_model;
        if set.rows.iter().any(|r| r.len() != d) {
            return Err(NumError::Dimension(format!("tokens must have width {d}")).into());
        }
        let mut tape = Tape::new();
        let rows = tape.constant(Tensor::new(
            vec![set.rows.len(), d],
            set.rows.iter().flatten().map(|v| F::of(*v)).collect(),
        )?)?;
        let tokens = tape.assemble_rows(&[rows], (0..set.rows.len()).map(|r| Some((0, r))).collect())?;
        let packed = PackedTokens {
            tokens,
            mask: set.present.clone(),
            per_sample: set.rows.len(),
        };
        let (mean, log_std) = self.trunk(store, &mut tape, &packed)?;
        Ok(GaussianDist::new(
            tape.value(mean).to_f64_vec(),
            tape.value(log_std).to_f64_vec(),
        )?)
    }

    /// Batched action means for proprio rows and per-sample pose-goal tokens
    /// (each goal becomes one token).
    pub fn act_mean<F: Real>(
        &self,
        store: &ParamStore<F>,
        proprio: &[[f64; PROPRIO_DIM]],
        goals: &[Vec<PoseGoal>],
    ) -> Result<Vec<[f64; 5]>, BfmError> {
        let b = proprio.len();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(
            vec![b, PROPRIO_DIM],
            proprio.iter().flatten().map(|v| F::of(*v)).collect(),
        )?)?;
        let st = self.encode_state(store, &mut tape, p)?;
        let mut feats = Vec::new();
        let mut kidx = Vec::new();
        let mut groups = Vec::with_capacity(b);
        for (i, gs) in goals.iter().enumerate() {
            let mut g = Vec::with_capacity(gs.len() + 1);
            for goal in gs {
                g.push((1, kidx.len()));
                feats.extend(goal.features().iter().map(|v| F::of(*v)));
                kidx.push(goal.lookahead_index()?);
            }
            g.push((0, i));
            groups.push(g);
        }
        let mut sources = vec![st];
        if !kidx.is_empty() {
            let f = tape.constant(Tensor::new(vec![kidx.len(), GOAL_FEATURES], feats)?)?;
            sources.push(self.encode_goals(store, &mut tape, f, kidx)?);
        }
        let packed = pack_tokens(&mut tape, &sources, &groups)?;
        let (mean, _) = self.trunk(store, &mut tape, &packed)?;
        let mv = tape.value(mean).to_f64_vec();
        Ok(mv.chunks(5).map(|c| [c[0], c[1], c[2], c[3], c[4]]).collect())
    }
}
