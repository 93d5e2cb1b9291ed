use super::infer::distance_mask;
use super::layers::{Block, Bound, Init, Linear, Norm};
use super::{ClipInput, FrameInput, ModelConfig, ModelError};
use crate::numerics::{sigmoid, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct GroupingTransformer {
    config: ModelConfig,
    store: ParamStore,
    actor_in: Linear,
    position: Linear,
    scene_in: Option<Linear>,
    scene_tokens: Option<ParamId>,
    group_tokens: ParamId,
    blocks: Vec<Block>,
    final_actor: Norm,
    final_group: Norm,
    actor_cls: Linear,
    group_cls: Linear,
    actor_proj: Linear,
    group_proj: Linear,
}

/// Frame-averaged outputs for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `N × D`.
    pub actor_embeddings: Tensor,
    /// `K × D`.
    pub group_embeddings: Tensor,
    /// `N × (C + 1)`.
    pub actor_logits: Tensor,
    /// `K × (C + 1)`.
    pub group_logits: Tensor,
    /// `K × N`; the logistic of an entry is a membership score.
    pub membership_logits: Tensor,
    /// Actor self-attention weights, one `N × N` matrix per frame, layer and
    /// head in that order.
    pub actor_attention: Vec<Tensor>,
}

impl ModelOutput {
    /// `K × N` membership scores in `(0, 1)`.
    pub fn membership_scores(&self) -> Tensor {
        self.membership_logits.map(sigmoid)
    }

    pub fn num_actors(&self) -> usize {
        self.membership_logits.cols()
    }

    pub fn num_slots(&self) -> usize {
        self.membership_logits.rows()
    }
}

/// Outputs still attached to the tape, for computing losses.
pub struct ForwardVars<'t> {
    pub actor_embeddings: Var<'t>,
    pub group_embeddings: Var<'t>,
    pub actor_logits: Var<'t>,
    pub group_logits: Var<'t>,
    pub membership_logits: Var<'t>,
    pub actor_attention: Vec<Tensor>,
}

impl ForwardVars<'_> {
    pub fn output(&self) -> ModelOutput {
        ModelOutput {
            actor_embeddings: (*self.actor_embeddings.value()).clone(),
            group_embeddings: (*self.group_embeddings.value()).clone(),
            actor_logits: (*self.actor_logits.value()).clone(),
            group_logits: (*self.group_logits.value()).clone(),
            membership_logits: (*self.membership_logits.value()).clone(),
            actor_attention: self.actor_attention.clone(),
        }
    }
}

impl GroupingTransformer {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let out = config.num_classes + 1;
        let mut init = Init {
            store: &mut store,
            rng: SplitMix64::new(seed),
        };
        let actor_in = Linear::new(&mut init, "actor_in", config.actor_in, d);
        let position = Linear::new(&mut init, "position", 4, d);
        let (scene_in, scene_tokens) = match config.scene_in {
            Some(w) => (Some(Linear::new(&mut init, "scene_in", w, d)), None),
            None => (None, Some(init.normal("scene_tokens".into(), config.scene_tokens, d, 1.0))),
        };
        let group_tokens = init.normal("group_tokens".into(), config.k_tokens, d, 1.0);
        let blocks = (0..config.layers)
            .map(|l| Block::new(&mut init, &format!("layers.{l}"), d, config.heads, d * config.ffn_mult))
            .collect();
        let final_actor = Norm::new(&mut init, "final_actor", d);
        let final_group = Norm::new(&mut init, "final_group", d);
        let actor_cls = Linear::new(&mut init, "actor_cls", d, out);
        let group_cls = Linear::new(&mut init, "group_cls", d, out);
        let actor_proj = Linear::new(&mut init, "actor_proj", d, d);
        let group_proj = Linear::new(&mut init, "group_proj", d, d);
        Ok(Self {
            config,
            store,
            actor_in,
            position,
            scene_in,
            scene_tokens,
            group_tokens,
            blocks,
            final_actor,
            final_group,
            actor_cls,
            group_cls,
            actor_proj,
            group_proj,
        })
    }

    /// Model whose parameters come from `store` (e.g. a checkpoint). Every
    /// parameter must be present with the shape `config` implies.
    pub fn from_params(config: ModelConfig, store: &ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        model.store.load_values_from(store)?;
        if store.len() != model.store.len() {
            return Err(ModelError::Numerics(NumericsError::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                store.len(),
                model.store.len()
            ))));
        }
        Ok(model)
    }

    /// Rebuilds a model from checkpoint parameters. Sizes (width, group
    /// tokens, layers, classes, input widths) are read from the parameter
    /// shapes; heads, `mu`, frame count and the mask flag come from `base`.
    pub fn from_checkpoint(store: &ParamStore, base: &ModelConfig) -> Result<Self, ModelError> {
        let shape = |name: &str| -> Result<(usize, usize), ModelError> {
            Ok(store.value(store.id(name)?).dims()?)
        };
        let (k_tokens, d_model) = shape("group_tokens")?;
        let (actor_in, _) = shape("actor_in.weight")?;
        let (_, out) = shape("group_cls.weight")?;
        let (_, hidden) = shape("layers.0.actor_ffn.up.weight").unwrap_or((0, d_model));
        let layers = (0..)
            .take_while(|l| store.id(&format!("layers.{l}.actor_ffn.up.weight")).is_ok())
            .count();
        let (scene_in, scene_tokens) = match shape("scene_in.weight") {
            Ok((w, _)) => (Some(w), base.scene_tokens),
            Err(_) => (None, shape("scene_tokens")?.0),
        };
        if out < 2 || d_model == 0 || hidden % d_model != 0 {
            return Err(ModelError::Config("checkpoint shapes are inconsistent".into()));
        }
        let config = ModelConfig {
            d_model,
            k_tokens,
            layers,
            num_classes: out - 1,
            actor_in,
            scene_in,
            scene_tokens,
            ffn_mult: hidden / d_model,
            ..base.clone()
        };
        Self::from_params(config, store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn group_tokens_id(&self) -> ParamId {
        self.group_tokens
    }

    /// Ids of the two projection heads (weights and biases) whose outputs form
    /// the membership dot products.
    pub fn projection_ids(&self) -> [ParamId; 4] {
        [
            self.actor_proj.weight,
            self.actor_proj.bias,
            self.group_proj.weight,
            self.group_proj.bias,
        ]
    }

    /// Runs the model without recording gradients.
    pub fn predict(&self, input: &ClipInput) -> Result<ModelOutput, ModelError> {
        let tape = Tape::new();
        Ok(self.forward(&tape, input)?.output())
    }

    pub fn forward<'t>(&self, tape: &'t Tape, input: &ClipInput) -> Result<ForwardVars<'t>, ModelError> {
        self.forward_with_params(tape, &self.store, input)
    }

    /// Forward pass reading parameters from `store`, which must have the
    /// layout of [`Self::params`] (e.g. a perturbed copy).
    pub fn forward_with_params<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        input: &ClipInput,
    ) -> Result<ForwardVars<'t>, ModelError> {
        if store.len() != self.store.len() {
            return Err(ModelError::Config("parameter store layout differs from the model".into()));
        }
        self.check_input(input)?;
        let p = &Bound::new(tape, store);
        let t = input.frames.len();
        let mut sums: Option<[Var<'t>; 5]> = None;
        let mut attention = Vec::new();
        for frame in &input.frames {
            let outs = self.forward_frame(tape, p, frame, &mut attention)?;
            sums = Some(match sums {
                None => outs,
                Some(acc) => {
                    let mut next = acc;
                    for (a, o) in next.iter_mut().zip(outs) {
                        *a = a.add(&o)?;
                    }
                    next
                }
            });
        }
        let [ae, ge, al, gl, ml] = sums.expect("at least one frame").map(|v| if t == 1 { v } else { v.scale(1.0 / t as f64) });
        Ok(ForwardVars {
            actor_embeddings: ae,
            group_embeddings: ge,
            actor_logits: al,
            group_logits: gl,
            membership_logits: ml,
            actor_attention: attention,
        })
    }

    fn check_input(&self, input: &ClipInput) -> Result<(), ModelError> {
        let c = &self.config;
        let id = input.clip_id.as_str();
        if input.frames.len() != c.frames {
            return Err(ModelError::features(
                id,
                format!("{} frames, model expects {}", input.frames.len(), c.frames),
            ));
        }
        if input.actor_width() != c.actor_in {
            return Err(ModelError::features(
                id,
                format!("actor feature width {}, model expects {}", input.actor_width(), c.actor_in),
            ));
        }
        if input.scene_width() != c.scene_in {
            return Err(ModelError::features(
                id,
                format!("scene feature width {:?}, model expects {:?}", input.scene_width(), c.scene_in),
            ));
        }
        Ok(())
    }

    fn forward_frame<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        frame: &FrameInput,
        attention: &mut Vec<Tensor>,
    ) -> Result<[Var<'t>; 5], NumericsError> {
        let n = frame.boxes.len();
        let feats = tape.constant(frame.actor_feats.clone());
        let boxes = tape.constant(Tensor::matrix(n, 4, frame.boxes.concat())?);
        let mut actors = self.actor_in.apply(p, feats)?.add(&self.position.apply(p, boxes)?)?;
        let scene = match (&frame.scene_feats, self.scene_in, self.scene_tokens) {
            (Some(s), Some(lin), _) => lin.apply(p, tape.constant(s.clone()))?,
            (None, _, Some(tokens)) => p.get(tokens),
            _ => unreachable!("input width checked against config"),
        };
        let mask = self.config.use_distance_mask.then(|| distance_mask(&frame.centers(), self.config.mu));
        let mut groups = p.get(self.group_tokens);
        for block in &self.blocks {
            (actors, groups) = block.apply(p, actors, groups, scene, mask.as_ref(), Some(attention))?;
        }
        let actors = self.final_actor.apply(p, actors)?;
        let groups = self.final_group.apply(p, groups)?;
        let actor_logits = self.actor_cls.apply(p, actors)?;
        let group_logits = self.group_cls.apply(p, groups)?;
        let ap = self.actor_proj.apply(p, actors)?;
        let gp = self.group_proj.apply(p, groups)?;
        let membership = gp.matmul(&ap.t())?;
        Ok([actors, groups, actor_logits, group_logits, membership])
    }
}

