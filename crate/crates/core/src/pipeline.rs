//! End-to-end experiment: data, contrastive pretraining, heads, fine-tuning,
//! the alpha sweep, patching, and alignment of the multi-spectral student,
//! with the ablation variants used to check the method's properties.

use serde::{Deserialize, Serialize};

use crate::checkpoint::interpolate;
use crate::data::{generate, select_bands, DataConfig, MultiModalDataset, SplitView};
use crate::encoders::{Encoder, EncoderConfig, EncoderKind, ProjectionHead, TextEncoder};
use crate::error::Result;
use crate::eval::{
    cosine_similarity_stats, linear_probe, per_class_ap, retrieval, zeroshot_score, CosineStats, EmbeddingSet,
    Metric, RetrievalReport,
};
use crate::head::{build_head, ClassificationHead};
use crate::train::{
    align, checkpoint_logit_scale, default_alpha_grid, finetune_frozen_head, pretrain_contrastive, sweep_alpha,
    AlignLoss, AlignOutput, SweepResult, SweepTask, TaskRole, TaskSpec, TrainConfig, TrainLog,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub width: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub patch: usize,
    pub out_init_scale: f64,
}

impl ArchConfig {
    pub fn teacher() -> Self {
        ArchConfig { width: 64, depth: 2, mlp_hidden: 128, embed_dim: 32, patch: 4, out_init_scale: 0.5 }
    }

    pub fn student() -> Self {
        ArchConfig { width: 48, depth: 2, mlp_hidden: 96, embed_dim: 24, patch: 4, out_init_scale: 0.5 }
    }

    pub fn encoder(&self, kind: EncoderKind, in_channels: usize, input_size: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            kind,
            in_channels,
            input_size,
            patch: if kind == EncoderKind::Text { 1 } else { self.patch },
            width: self.width,
            depth: self.depth,
            mlp_hidden: self.mlp_hidden,
            embed_dim: self.embed_dim,
            out_init_scale: self.out_init_scale,
            seed,
        }
    }
}

/// Every knob of one experiment. Stage seeds derive from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub natural: DataConfig,
    pub satellite: DataConfig,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub align: TrainConfig,
    pub probe: TrainConfig,
    pub alpha_grid: Vec<f64>,
    pub delta: f64,
    pub ks: Vec<usize>,
    /// Also run the loss, teacher and band ablations.
    pub ablations: bool,
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            natural: DataConfig::natural(seed),
            satellite: DataConfig::satellite(seed),
            teacher: ArchConfig::teacher(),
            student: ArchConfig::student(),
            pretrain: TrainConfig::pretrain(seed),
            finetune: TrainConfig::finetune(seed),
            align: TrainConfig::align(seed),
            probe: TrainConfig::probe(seed),
            alpha_grid: default_alpha_grid(),
            delta: 0.05,
            ks: vec![1, 5, 10, 20, 50],
            ablations: true,
        }
    }

    /// Smaller models and datasets for quick runs and the test suite. Half
    /// the samples means half the steps per epoch, so fine-tuning and
    /// alignment run longer; satellite noise is lowered so the short
    /// fine-tune learns something.
    pub fn small(seed: u64) -> Self {
        let mut c = ExperimentConfig::new(seed);
        c.teacher = ArchConfig { width: 32, depth: 2, mlp_hidden: 64, embed_dim: 32, patch: 4, out_init_scale: 0.5 };
        c.student = ArchConfig { width: 32, depth: 1, mlp_hidden: 64, embed_dim: 24, patch: 4, out_init_scale: 0.5 };
        c.natural.samples = 2048;
        c.satellite.samples = 2048;
        c.satellite.noise = 0.05;
        c.finetune.epochs = 10;
        c.finetune.weight_decay = 0.0;
        c.align.epochs = 15;
        c
    }

    /// Re-seeds every stage from one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.natural.seed = seed;
        self.satellite.seed = seed;
        for t in [&mut self.pretrain, &mut self.finetune, &mut self.align, &mut self.probe] {
            t.seed = seed;
        }
        self
    }
}

/// Supported (natural, accuracy) and patching (satellite, mAP) test scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub supported: f64,
    pub patching: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignScores {
    pub zeroshot_map: f64,
    pub retrieval: RetrievalReport,
    pub final_mse: f64,
    pub final_ce: f64,
}

impl AlignScores {
    /// Mean of zero-shot mAP and the two-direction mean R@10.
    pub fn combined(&self) -> f64 {
        (self.zeroshot_map + self.retrieval.mean_at(10).unwrap_or(0.0)) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablations {
    pub ce_only: AlignScores,
    pub mse_only: AlignScores,
    pub unpatched_teacher: AlignScores,
    pub rgb_bands_only: AlignScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub seed: u64,
    pub zeroshot: TaskScores,
    pub finetuned: TaskScores,
    pub patched: TaskScores,
    pub sweep: SweepResult,
    pub drift_supported: CosineStats,
    pub drift_patching: CosineStats,
    pub student_before_map: f64,
    pub aligned: AlignScores,
    pub aligned_per_class: Vec<Option<f64>>,
    pub probe: f64,
    pub ablations: Option<Ablations>,
}

/// Checkpoints and logs produced by a run.
pub struct ExperimentArtifacts {
    pub zeroshot_image: Encoder,
    pub text: TextEncoder,
    pub finetuned_image: Encoder,
    pub patched_image: Encoder,
    pub natural_head: ClassificationHead,
    pub satellite_head: ClassificationHead,
    pub student: AlignOutput,
    pub logs: Vec<TrainLog>,
}

pub struct ExperimentOutput {
    pub metrics: ExperimentMetrics,
    pub artifacts: ExperimentArtifacts,
    pub natural: MultiModalDataset,
    pub satellite: MultiModalDataset,
}

struct Views {
    nat_train: SplitView,
    nat_val: SplitView,
    nat_test: SplitView,
    sat_train: SplitView,
    sat_val: SplitView,
    sat_test: SplitView,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let natural = generate(&cfg.natural)?;
    let satellite = generate(&cfg.satellite)?;
    run_on_datasets(cfg, natural, satellite)
}

pub fn run_on_datasets(
    cfg: &ExperimentConfig,
    natural: MultiModalDataset,
    satellite: MultiModalDataset,
) -> Result<ExperimentOutput> {
    let v = Views {
        nat_train: natural.view("train")?,
        nat_val: natural.view("val")?,
        nat_test: natural.view("test")?,
        sat_train: satellite.view("train")?,
        sat_val: satellite.view("val")?,
        sat_test: satellite.view("test")?,
    };
    let seed = cfg.seed;
    let size = cfg.natural.size;
    let tokenizer = crate::data::shared_tokenizer(natural.num_classes())?;
    let mut logs = Vec::new();

    // Step 1: pretrain the image/text pair, build heads, fine-tune, patch.
    let image0 = Encoder::init(cfg.teacher.encoder(EncoderKind::Image, 3, size, seed))?;
    let tcfg = cfg.teacher.encoder(EncoderKind::Text, tokenizer.vocab_size(), tokenizer.max_len(), seed);
    let text0 = TextEncoder::with_config(tokenizer, tcfg)?;
    let pre = pretrain_contrastive(image0, text0, &v.nat_train.rgb, &v.nat_train.captions, &cfg.pretrain)?;
    logs.push(pre.log);
    let zs = pre.image;
    let text = pre.text;
    let scale = checkpoint_logit_scale(zs.params()).unwrap_or_else(crate::head::default_logit_scale);
    let nat_head = build_head(&text, &natural.prompts(), scale)?;
    let sat_head = build_head(&text, &satellite.prompts(), scale)?;
    let nat_metric = Metric::for_labels(natural.multilabel());
    let sat_metric = Metric::for_labels(satellite.multilabel());

    let (ft, ft_log) = finetune_frozen_head(
        &zs,
        &sat_head,
        &v.sat_train.rgb,
        &v.sat_train.labels,
        satellite.multilabel(),
        &cfg.finetune,
    )?;
    logs.push(ft_log);

    let supported = SweepTask {
        spec: TaskSpec { role: TaskRole::Supported, dataset: "natural".into(), metric: nat_metric },
        head: &nat_head,
        images: &v.nat_val.rgb,
        labels: &v.nat_val.labels,
    };
    let patching = SweepTask {
        spec: TaskSpec { role: TaskRole::Patching, dataset: "satellite".into(), metric: sat_metric },
        head: &sat_head,
        images: &v.sat_val.rgb,
        labels: &v.sat_val.labels,
    };
    let sweep = sweep_alpha(&zs, ft.params(), &cfg.alpha_grid, &supported, &patching, cfg.delta)?;
    let patched = zs.with_params(interpolate(zs.params(), ft.params(), sweep.chosen_alpha)?)?;

    let scores = |enc: &Encoder| -> Result<TaskScores> {
        Ok(TaskScores {
            supported: zeroshot_score(&enc.encode(&v.nat_test.rgb)?, &nat_head, &v.nat_test.labels, nat_metric)?,
            patching: zeroshot_score(&enc.encode(&v.sat_test.rgb)?, &sat_head, &v.sat_test.labels, sat_metric)?,
        })
    };
    let zs_scores = scores(&zs)?;
    let ft_scores = scores(&ft)?;
    let patched_scores = scores(&patched)?;

    let drift = |view: &SplitView| -> Result<CosineStats> {
        let a = EmbeddingSet::new(zs.encode(&view.rgb)?, view.ids.clone())?;
        let b = EmbeddingSet::new(patched.encode(&view.rgb)?, view.ids.clone())?;
        cosine_similarity_stats(&a, &b)
    };
    let drift_supported = drift(&v.nat_test)?;
    let drift_patching = drift(&v.sat_test)?;

    // Step 2: align the multi-spectral student to the patched teacher.
    let channels = cfg.satellite.channels;
    let student_seed = seed ^ 0x5eed;
    let new_student = |bands: usize| -> Result<(Encoder, Option<ProjectionHead>)> {
        let s = Encoder::init(cfg.student.encoder(EncoderKind::Modality, bands, size, student_seed))?;
        let p = ProjectionHead::for_dims(s.embed_dim(), zs.embed_dim())?;
        Ok((s, p))
    };
    let (student0, proj0) = new_student(channels)?;
    let before = crate::encoders::encode_modality(&student0, &v.sat_test.ms, proj0.as_ref(), zs.embed_dim())?;
    let student_before_map = zeroshot_score(&before, &sat_head, &v.sat_test.labels, sat_metric)?;

    let run_align = |teacher: &Encoder,
                     student: Encoder,
                     proj: Option<ProjectionHead>,
                     train_in: &crate::tensor::Tensor,
                     test_in: &crate::tensor::Tensor,
                     loss: AlignLoss,
                     tcfg: &TrainConfig|
     -> Result<(AlignOutput, AlignScores)> {
        let out = align(
            teacher,
            student,
            proj,
            &sat_head,
            train_in,
            &v.sat_train.rgb,
            &v.sat_train.labels,
            satellite.multilabel(),
            tcfg,
            loss,
        )?;
        let ms_emb = out.embed(test_in, zs.embed_dim())?;
        let rgb_emb = teacher.encode(&v.sat_test.rgb)?;
        let zeroshot_map = zeroshot_score(&ms_emb, &sat_head, &v.sat_test.labels, sat_metric)?;
        let rgb_set = EmbeddingSet::new(rgb_emb, v.sat_test.ids.clone())?;
        let ms_set = EmbeddingSet::new(ms_emb, v.sat_test.ids.clone())?;
        let retrieval = retrieval(&rgb_set, &ms_set, &cfg.ks)?;
        let tail = out.log.steps.len().saturating_sub(10);
        let last = &out.log.steps[tail..];
        let avg = |f: fn(&crate::train::StepLog) -> f64| last.iter().map(f).sum::<f64>() / last.len().max(1) as f64;
        let scores = AlignScores {
            zeroshot_map,
            retrieval,
            final_mse: avg(|s| s.mse.unwrap_or(0.0)),
            final_ce: avg(|s| s.ce.unwrap_or(0.0)),
        };
        Ok((out, scores))
    };

    let (student, aligned) = run_align(&patched, student0.clone(), proj0.clone(), &v.sat_train.ms, &v.sat_test.ms, AlignLoss::default(), &cfg.align)?;
    let aligned_emb = student.embed(&v.sat_test.ms, zs.embed_dim())?;
    let aligned_per_class = per_class_ap(&sat_head.classify(&aligned_emb)?, &v.sat_test.labels)?;
    let probe = linear_probe(
        &student.embed(&v.sat_train.ms, zs.embed_dim())?,
        &v.sat_train.labels,
        &aligned_emb,
        &v.sat_test.labels,
        satellite.multilabel(),
        &cfg.probe,
    )?
    .report
    .value;

    let ablations = if cfg.ablations {
        let ce_only = run_align(&patched, student0.clone(), proj0.clone(), &v.sat_train.ms, &v.sat_test.ms, AlignLoss { mse_weight: 0.0 }, &cfg.align)?.1;
        let mse_only = {
            let mut c = cfg.align.clone();
            c.lambda = 0.0;
            run_align(&patched, student0.clone(), proj0.clone(), &v.sat_train.ms, &v.sat_test.ms, AlignLoss::default(), &c)?.1
        };
        let unpatched_teacher = run_align(&zs, student0.clone(), proj0.clone(), &v.sat_train.ms, &v.sat_test.ms, AlignLoss::default(), &cfg.align)?.1;
        let rgb_bands = cfg.satellite.composite.bands;
        let (rgb_student, rgb_proj) = new_student(3)?;
        let rgb_only = run_align(
            &patched,
            rgb_student,
            rgb_proj,
            &select_bands(&v.sat_train.ms, &rgb_bands)?,
            &select_bands(&v.sat_test.ms, &rgb_bands)?,
            AlignLoss::default(),
            &cfg.align,
        )?
        .1;
        Some(Ablations { ce_only, mse_only, unpatched_teacher, rgb_bands_only: rgb_only })
    } else {
        None
    };
    logs.push(student.log.clone());

    let metrics = ExperimentMetrics {
        seed,
        zeroshot: zs_scores,
        finetuned: ft_scores,
        patched: patched_scores,
        sweep,
        drift_supported,
        drift_patching,
        student_before_map,
        aligned,
        aligned_per_class,
        probe,
        ablations,
    };
    Ok(ExperimentOutput {
        metrics,
        artifacts: ExperimentArtifacts {
            zeroshot_image: zs,
            text,
            finetuned_image: ft,
            patched_image: patched,
            natural_head: nat_head,
            satellite_head: sat_head,
            student,
            logs,
        },
        natural,
        satellite,
    })
}
