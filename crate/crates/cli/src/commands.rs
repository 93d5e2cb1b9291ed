use std::fmt;
use std::fs;
use std::path::Path;

use gad_core::baseline::{build_affinity, clusters_to_prediction, spectral_cluster, AffinityKind, BaselineError};
use gad_core::data::{
    box_center_normalized, load_dataset, load_predictions, save_dataset, save_predictions, Clip, DataError,
    LoadOptions,
};
use gad_core::metrics::{confusion_matrix, evaluate as eval_at, render_reports, EvalReport, MetricOptions};
use gad_core::model::{
    infer_groups, load_features, save_features, ClipInput, GroupingTransformer, InferOptions, ModelConfig, ModelError,
};
use gad_core::numerics::{grad_check, NumericsError, ParamStore};
use gad_core::stats::summarize;
use gad_core::synth::{generate, SynthError, SynthSpec};
use gad_core::training::{clip_loss, loss_curve_csv, train, LossConfig, TrainConfig, TrainError};

use crate::{
    AffinityArg, BaselineArgs, EvaluateArgs, GradcheckArgs, InferArgs, LoadArgs, ModelArgs, StatsArgs, SynthArgs,
    TrainArgs,
};

pub enum CliError {
    /// Bad or inconsistent input; exit code 1.
    Input(String),
    /// Non-finite values or failed numerical checks; exit code 2.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(NumericsError::NonFinite(_)) => CliError::Numerical(e.to_string()),
            e => CliError::Input(e.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        ModelError::from(e).into()
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            e => CliError::Input(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        CliError::Input(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Input(format!("writing {}: {e}", path.display())))
}

fn load_options(a: &LoadArgs) -> LoadOptions {
    LoadOptions {
        allow_singleton_groups: a.allow_singleton_groups,
    }
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    if let Some(t) = a.thetas.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(CliError::Input(format!("theta {t} must lie in (0, 1]")));
    }
    let clips = load_dataset(&a.gt, &load_options(&a.load))?;
    let preds = load_predictions(&a.pred, &clips)?;
    let opts = MetricOptions {
        outliers_as_singletons: a.outliers_as_singletons,
    };
    let reports = a
        .thetas
        .iter()
        .map(|t| eval_at(&clips, &preds, *t, opts))
        .collect::<std::result::Result<Vec<EvalReport>, _>>()?;
    let confusion = confusion_matrix(&clips, &preds, a.thetas[0])?;
    print!("{}", render_reports(&reports, Some(&confusion)));
    if let Some(path) = a.json {
        let json = serde_json::json!({
            "reports": reports,
            "confusion": { "theta": a.thetas[0], "counts": confusion.counts },
        });
        write(&path, &serde_json::to_string_pretty(&json).expect("json"))?;
    }
    Ok(())
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let clips = load_dataset(&a.gt, &load_options(&a.load))?;
    let s = summarize(&clips);
    println!("clips                      {}", s.num_clips);
    println!("groups                     {}", s.num_groups);
    println!("population density         {:.4}", s.population_density);
    println!("inter-group distance       {:.4}", s.inter_group_distance);
    println!("groups without counterpart {}", s.groups_without_counterpart);
    println!("group sizes                {:?}", s.group_size_hist);
    println!("actors per clip            {:?}", s.actors_per_clip_hist);
    if let Some(dir) = a.out_dir {
        fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("creating {}: {e}", dir.display())))?;
        for (name, csv) in s.csv_files() {
            write(&dir.join(name), &csv)?;
        }
        write(&dir.join("summary.json"), &serde_json::to_string_pretty(&s).expect("json"))?;
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_clips: a.clips,
        actors: a.min_actors..=a.max_actors,
        groups: a.min_groups..=a.max_groups,
        outlier_fraction: a.outlier_fraction,
        tightness: a.tightness,
        feature_noise: a.noise,
        num_classes: a.classes,
        feature_dim: a.feature_dim,
        feature_frames: a.frames,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let (clips, features) = generate(&spec)?;
    save_dataset(&a.out_dataset, &clips)?;
    save_features(&a.out_features, &features)?;
    println!("wrote {} clips", clips.len());
    Ok(())
}

fn model_config(m: &ModelArgs, inputs: &[ClipInput], num_classes: usize) -> Result<ModelConfig> {
    let first = inputs.first().ok_or_else(|| CliError::Input("no clips to train on".into()))?;
    let shape = |i: &ClipInput| (i.frames.len(), i.actor_width(), i.scene_width());
    if let Some(odd) = inputs.iter().find(|i| shape(i) != shape(first)) {
        return Err(CliError::Input(format!(
            "clip {} has features shaped differently from clip {}",
            odd.clip_id, first.clip_id
        )));
    }
    Ok(ModelConfig {
        d_model: m.d_model,
        k_tokens: m.k_tokens,
        layers: m.layers,
        heads: m.heads,
        num_classes,
        mu: m.mu,
        frames: first.frames.len(),
        actor_in: first.actor_width(),
        scene_in: first.scene_width(),
        use_distance_mask: !m.no_distance_mask,
        ..ModelConfig::default()
    })
}

fn predict_all(model: &GroupingTransformer, clips: &[Clip], inputs: &[ClipInput], opts: InferOptions) -> Result<Vec<gad_core::data::ClipPrediction>> {
    clips
        .iter()
        .zip(inputs)
        .map(|(clip, input)| {
            let out = model.predict(input)?;
            if !out.group_logits.all_finite() || !out.membership_logits.all_finite() {
                return Err(CliError::Numerical(format!("non-finite model output for clip {}", clip.clip_id)));
            }
            Ok(infer_groups(&out, clip, opts)?)
        })
        .collect()
}

pub fn train_toy(a: TrainArgs) -> Result<()> {
    let (clips, features) = match (&a.dataset, &a.features) {
        (Some(d), Some(f)) => (load_dataset(d, &LoadOptions::default())?, load_features(f)?),
        _ => generate(&SynthSpec {
            num_classes: a.classes,
            seed: a.seed,
            ..SynthSpec::default()
        })?,
    };
    let inputs = ClipInput::for_dataset(&clips, &features)?;
    let max_class = clips.iter().flat_map(|c| c.groups.iter().map(|g| g.activity)).max().unwrap_or(1);
    let cfg = model_config(&a.model, &inputs, a.classes.max(max_class))?;
    let mut model = GroupingTransformer::new(cfg, a.seed)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        warmup_start_lr: a.lr / 10.0,
        warmup_epochs: a.warmup_epochs,
        batch_size: a.batch,
        loss: LossConfig {
            lambda_mem: a.lambda_mem,
            lambda_con: a.lambda_con,
            tau: a.tau,
            ..LossConfig::default()
        },
        seed: a.seed,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &clips, &inputs, &tc)?;
    write(&a.checkpoint, &model.params().to_checkpoint_json())?;
    if let Some(path) = &a.curve {
        write(path, &loss_curve_csv(&report))?;
    }
    if let Some(last) = report.epochs.last() {
        println!(
            "final loss {:.6} (ind {:.6}, group {:.6}, mem {:.6}, con {:.6})",
            last.total, last.l_ind, last.l_group, last.l_mem, last.l_con
        );
    }
    let preds = predict_all(&model, &clips, &inputs, InferOptions::default())?;
    let reports = [1.0, 0.5]
        .iter()
        .map(|t| eval_at(&clips, &preds, *t, MetricOptions::default()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    println!("train set:");
    print!("{}", render_reports(&reports, None));
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let text = fs::read_to_string(&a.checkpoint)
        .map_err(|e| CliError::Input(format!("reading {}: {e}", a.checkpoint.display())))?;
    let store = ParamStore::from_checkpoint_json(&text).map_err(|e| CliError::Input(e.to_string()))?;
    let clips = load_dataset(&a.dataset, &load_options(&a.load))?;
    let features = load_features(&a.features)?;
    let inputs = ClipInput::for_dataset(&clips, &features)?;
    let preds = match inputs.first() {
        None => Vec::new(),
        Some(first) => {
            let base = ModelConfig {
                heads: a.heads,
                mu: a.mu,
                frames: first.frames.len(),
                use_distance_mask: !a.no_distance_mask,
                ..ModelConfig::default()
            };
            let model = GroupingTransformer::from_checkpoint(&store, &base)?;
            let opts = InferOptions {
                dissolve_singletons: !a.keep_singletons,
                ..InferOptions::default()
            };
            predict_all(&model, &clips, &inputs, opts)?
        }
    };
    save_predictions(&a.output, &preds)?;
    println!("wrote predictions for {} clips", preds.len());
    Ok(())
}

pub fn baseline(a: BaselineArgs) -> Result<()> {
    let clips = load_dataset(&a.dataset, &load_options(&a.load))?;
    let kind = match a.affinity {
        AffinityArg::Cosine => AffinityKind::Cosine,
        AffinityArg::Rbf => AffinityKind::Rbf { bandwidth: a.bandwidth },
    };
    let features = match (a.affinity, &a.features) {
        (AffinityArg::Cosine, None) => return Err(CliError::Input("cosine affinity needs --features".into())),
        (AffinityArg::Cosine, Some(p)) => Some(ClipInput::for_dataset(&clips, &load_features(p)?)?),
        (AffinityArg::Rbf, _) => None,
    };
    if a.k_clusters == 0 {
        return Err(CliError::Input("--k-clusters must be positive".into()));
    }
    let mut preds = Vec::with_capacity(clips.len());
    for (ci, clip) in clips.iter().enumerate() {
        let points: Vec<Vec<f64>> = match &features {
            Some(inputs) => {
                let input = &inputs[ci];
                (0..clip.num_actors())
                    .map(|j| {
                        let t = input.frames.len() as f64;
                        let width = input.actor_width();
                        (0..width)
                            .map(|d| input.frames.iter().map(|f| f.actor_feats.get(j, d)).sum::<f64>() / t)
                            .collect()
                    })
                    .collect()
            }
            None => clip
                .tracklets
                .iter()
                .map(|t| {
                    let (x, y) = box_center_normalized(&t.key_box(), clip.frame_size);
                    vec![x, y]
                })
                .collect(),
        };
        let affinity = build_affinity(&points, kind)?;
        let k = a.k_clusters.min(clip.num_actors());
        let partition = spectral_cluster(&affinity, k, a.seed)?;
        preds.push(clusters_to_prediction(clip, &partition, None, a.classes)?);
    }
    save_predictions(&a.output, &preds)?;
    println!("wrote predictions for {} clips", preds.len());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    // three actors: one pair and one outlier
    let spec = SynthSpec {
        num_clips: 1,
        actors: 3..=3,
        groups: 1..=1,
        group_size: 2..=2,
        outlier_fraction: 1.0,
        num_classes: 3,
        feature_dim: 4,
        feature_frames: 1,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let (clips, features) = generate(&spec)?;
    let inputs = ClipInput::for_dataset(&clips, &features)?;
    let cfg = ModelConfig {
        d_model: 8,
        k_tokens: 2,
        layers: 1,
        heads: 2,
        num_classes: 3,
        frames: 1,
        actor_in: 4,
        ..ModelConfig::default()
    };
    let model = GroupingTransformer::new(cfg, a.seed)?;
    let mut store = model.params().clone();
    let ids: Vec<_> = store.ids().collect();
    let loss_cfg = LossConfig::default();
    let report = grad_check(&mut store, &ids, 1e-5, a.tolerance, |tape, s| {
        let vars = model
            .forward_with_params(tape, s, &inputs[0])
            .map_err(|e| NumericsError::Shape(e.to_string()))?;
        clip_loss(&vars, &clips[0], &loss_cfg)
            .map(|(loss, _)| loss)
            .map_err(|e| NumericsError::Shape(e.to_string()))
    })?;
    println!(
        "checked {} entries: max relative error {:.3e}, max absolute error {:.3e}",
        report.checked, report.max_rel_error, report.max_abs_error
    );
    if report.passed {
        println!("gradient check passed (tolerance {:.1e})", a.tolerance);
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: worst entry {:?} with relative error {:.3e}",
            report.worst, report.max_rel_error
        )))
    }
}
