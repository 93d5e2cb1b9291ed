use super::TrainError;
use crate::assignment::{group_matching_cost, hungarian, GroupTarget};
use crate::data::{ClassId, Clip, GroupPrediction};
use crate::model::{ForwardVars, ModelOutput};
use crate::numerics::{softmax_rows, Mask, Tensor, Var};

/// Loss weights. Defaults: `λ_mem = 5`, `λ_con = 2`, `τ = 0.2`, no ∅
/// down-weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_mem: f64,
    pub lambda_con: f64,
    pub tau: f64,
    /// Weight of group-classification terms whose target is ∅.
    pub empty_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mem: 5.0,
            lambda_con: 2.0,
            tau: 0.2,
            empty_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ind: f64,
    /// Summed over matched pairs.
    pub l_group: f64,
    /// Summed over non-∅ matched pairs.
    pub l_mem: f64,
    pub l_con: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `l_ind + l_group + λ_mem · l_mem + λ_con · l_con`, in that order.
    pub fn combine(l_ind: f64, l_group: f64, l_mem: f64, l_con: f64, cfg: &LossConfig) -> Self {
        Self {
            l_ind,
            l_group,
            l_mem,
            l_con,
            total: l_ind + l_group + cfg.lambda_mem * l_mem + cfg.lambda_con * l_con,
        }
    }
}

/// Real groups of `clip` followed by ∅ padding up to `slots`.
pub fn group_targets(clip: &Clip, slots: usize) -> Result<Vec<GroupTarget>, TrainError> {
    if clip.groups.len() > slots {
        return Err(TrainError::TooManyGroups {
            clip_id: clip.clip_id.clone(),
            groups: clip.groups.len(),
            slots,
        });
    }
    let ids = clip.actor_ids();
    let mut targets: Vec<GroupTarget> = clip
        .groups
        .iter()
        .map(|g| GroupTarget {
            activity: g.activity,
            membership: ids.iter().map(|a| if g.members.contains(a) { 1.0 } else { 0.0 }).collect(),
        })
        .collect();
    targets.resize(slots, GroupTarget::empty(ids.len()));
    Ok(targets)
}

/// Optimal slot for every target (`result[i]` is the slot of target `i`),
/// computed from detached scores.
pub fn match_groups(targets: &[GroupTarget], out: &ModelOutput) -> Result<Vec<usize>, TrainError> {
    let classes = softmax_rows(&out.group_logits, None)?;
    let scores = out.membership_scores();
    let preds: Vec<GroupPrediction> = (0..out.num_slots())
        .map(|k| GroupPrediction::new(classes.row(k).to_vec(), scores.row(k).to_vec()))
        .collect();
    let costs = group_matching_cost(targets, &preds)?;
    Ok(hungarian(&costs)?.assignment)
}

fn log_softmax_at(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits[class] - lse
}

/// Cross-entropy `−log softmax(logits)[class]`.
pub fn group_loss(class: ClassId, logits: &[f64]) -> f64 {
    -log_softmax_at(logits, class)
}

/// Mean binary cross-entropy of scores against 0/1 targets. Scores are
/// clamped to `[1e-12, 1 − 1e-12]`.
pub fn membership_loss(targets: &[f64], scores: &[f64]) -> f64 {
    const EPS: f64 = 1e-12;
    let n = targets.len() as f64;
    -targets
        .iter()
        .zip(scores)
        .map(|(m, s)| {
            let s = s.clamp(EPS, 1.0 - EPS);
            m * s.ln() + (1.0 - m) * (1.0 - s).ln()
        })
        .sum::<f64>()
        / n
}

/// Mean cross-entropy of actor logits (`N × (C+1)`) against per-actor labels.
pub fn individual_action_loss(logits: &Tensor, labels: &[ClassId]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(j, &y)| -log_softmax_at(logits.row(j), y))
        .sum::<f64>()
        / labels.len() as f64
}

/// Contrastive grouping loss over actor embeddings (`N × D`).
///
/// For every member `j` of a group `g`:
/// `−log( Σ_{k∈g, k≠j} e^{cos(f_j,f_k)/τ} / Σ_{k≠j} e^{cos(f_j,f_k)/τ} )`,
/// summed. `groups` holds actor indices; groups with fewer than two members
/// are skipped.
pub fn consistency_loss(embeddings: &Tensor, groups: &[Vec<usize>], tau: f64) -> f64 {
    let n = embeddings.rows();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = embeddings.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let sim = |a: usize, b: usize| unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for g in groups.iter().filter(|g| g.len() >= 2) {
        for &j in g {
            let num: f64 = g.iter().filter(|&&k| k != j).map(|&k| sim(j, k).exp()).sum();
            let den: f64 = (0..n).filter(|&k| k != j).map(|k| sim(j, k).exp()).sum();
            total -= (num / den).ln();
        }
    }
    total
}

/// Differentiable total loss for one clip.
pub fn clip_loss<'t>(
    vars: &ForwardVars<'t>,
    clip: &Clip,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown), TrainError> {
    let tape = vars.group_logits.tape();
    let out = vars.output();
    let n = clip.num_actors();
    let k = out.num_slots();
    let targets = group_targets(clip, k)?;
    let slots = match_groups(&targets, &out)?;

    // individual actions
    let labels = clip.actor_labels();
    let cells: Vec<(usize, usize)> = labels.iter().enumerate().map(|(j, &y)| (j, y)).collect();
    let l_ind = vars.actor_logits.log_softmax()?.pick(&cells)?.mean().neg();

    // group classification over every matched pair
    let cells: Vec<(usize, usize)> = targets.iter().zip(&slots).map(|(t, &s)| (s, t.activity)).collect();
    let weights: Vec<f64> = targets
        .iter()
        .map(|t| if t.is_empty_group() { cfg.empty_weight } else { 1.0 })
        .collect();
    let picked = vars.group_logits.log_softmax()?.pick(&cells)?;
    let l_group = picked.mul(&tape.constant(Tensor::matrix(k, 1, weights)?))?.sum().neg();

    // membership for real groups
    let real: Vec<usize> = (0..k).filter(|&i| !targets[i].is_empty_group()).collect();
    let l_mem = if real.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let mut cells = Vec::with_capacity(real.len() * n);
        let mut m = Vec::with_capacity(real.len() * n);
        for &i in &real {
            for j in 0..n {
                cells.push((slots[i], j));
                m.push(targets[i].membership[j]);
            }
        }
        let x = vars.membership_logits.pick(&cells)?;
        let pos = tape.constant(Tensor::matrix(m.len(), 1, m.clone())?);
        let neg = tape.constant(Tensor::matrix(m.len(), 1, m.iter().map(|v| 1.0 - v).collect())?);
        let ll = x.log_sigmoid().mul(&pos)?.add(&x.neg().log_sigmoid().mul(&neg)?)?;
        ll.sum().scale(-1.0 / n as f64)
    };

    let l_con = consistency_var(vars.actor_embeddings, clip, cfg.tau)?;

    let total = l_ind
        .add(&l_group)?
        .add(&l_mem.scale(cfg.lambda_mem))?
        .add(&l_con.scale(cfg.lambda_con))?;
    let breakdown = LossBreakdown::combine(l_ind.item(), l_group.item(), l_mem.item(), l_con.item(), cfg);
    debug_assert_eq!(breakdown.total, total.item());
    Ok((total, breakdown))
}

fn consistency_var<'t>(embeddings: Var<'t>, clip: &Clip, tau: f64) -> Result<Var<'t>, TrainError> {
    let tape = embeddings.tape();
    let n = clip.num_actors();
    let ids = clip.actor_ids();
    let groups: Vec<Vec<usize>> = clip
        .groups
        .iter()
        .filter(|g| {
            if g.members.len() < 2 {
                log::warn!("clip {}: group {} has one member; skipped in the consistency loss", clip.clip_id, g.group_id);
            }
            g.members.len() >= 2
        })
        .map(|g| (0..n).filter(|&j| g.members.contains(&ids[j])).collect())
        .collect();
    let rows: Vec<(usize, &Vec<usize>)> = groups.iter().flat_map(|g| g.iter().map(move |&j| (j, g))).collect();
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = rows.len();
    let mut select = vec![0.0; m * n];
    for (r, (j, _)) in rows.iter().enumerate() {
        select[r * n + j] = 1.0;
    }
    let unit = embeddings.l2_normalize_rows()?;
    let sim = tape
        .constant(Tensor::matrix(m, n, select)?)
        .matmul(&unit)?
        .matmul(&unit.t())?
        .scale(1.0 / tau);
    let same = Mask::from_fn(m, n, |r, k| k != rows[r].0 && rows[r].1.contains(&k));
    let others = Mask::from_fn(m, n, |r, k| k != rows[r].0);
    let num = sim.masked_logsumexp(&same)?;
    let den = sim.masked_logsumexp(&others)?;
    Ok(den.sub(&num)?.sum())
}

