use std::path::{Path, PathBuf};

use mpatch_core::checkpoint::{interpolate, Stage};
use mpatch_core::data::{generate, select_bands, shared_tokenizer, MultiModalDataset, SplitView};
use mpatch_core::encoders::{encode_modality, Encoder, EncoderKind, ProjectionHead, TextEncoder};
use mpatch_core::eval::{
    cosine_similarity_stats, linear_probe, per_class_ap, retrieval, zeroshot_score, EmbeddingSet, Metric,
    MetricsReport,
};
use mpatch_core::head::{build_head, default_logit_scale, ClassificationHead, PromptSet};
use mpatch_core::pipeline::{run_experiment, ExperimentConfig};
use mpatch_core::train::{
    align, checkpoint_logit_scale, finetune_frozen_head, normalize_grid, pretrain_contrastive, sweep_alpha, AlignLoss,
    SweepResult, SweepTask, TaskRole, TaskSpec, TrainLog,
};
use mpatch_core::{Checkpoint, Tensor};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::report::{exit, io_error, rel, CliError, CliResult, Report, Workspace, BUILD_ID};
use crate::svg;

/// Checkpoint metadata key listing the bands a student reads.
const META_BANDS: &str = "bands";
/// Students are seeded apart from the teacher.
const STUDENT_SEED_MIX: u64 = 0x5eed;

pub struct Ctx {
    pub ws: Workspace,
    pub cfg: ExperimentConfig,
    pub report: PathBuf,
}

impl Ctx {
    fn emit<A: Serialize, T: Serialize>(&self, command: &str, args: &A, artifacts: Vec<String>, result: T) -> CliResult<()> {
        let r = Report { command, build: BUILD_ID, config: &self.cfg, args, artifacts, result };
        let mut text = serde_json::to_string_pretty(&r)?;
        text.push('\n');
        self.ws.write(&self.report, text.as_bytes())
    }

    /// SVG path next to the report.
    fn plot_path(&self, suffix: &str) -> PathBuf {
        let stem = self.report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        self.report.with_file_name(format!("{stem}{suffix}.svg"))
    }

    fn save(&self, ck: &Checkpoint, path: &Path) -> CliResult<String> {
        let full = self.ws.ensure_parent(path)?;
        ck.save(&full)?;
        Ok(rel(path))
    }

    fn dataset(&self, path: &Path) -> CliResult<MultiModalDataset> {
        Ok(MultiModalDataset::load(self.ws.path(path))?)
    }

    fn checkpoint(&self, path: &Path) -> CliResult<Checkpoint> {
        Ok(Checkpoint::load(self.ws.path(path))?)
    }
}

/// Built-in or file config, then `--seed`, then `--set` overrides.
pub fn resolve_config(cli: &Cli, ws: &Workspace) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(_), Some(_)) => return Err(CliError::config("--config and --preset are mutually exclusive")),
        (Some(p), None) => {
            let path = ws.path(p);
            let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        }
        (None, Some(Preset::Small)) => ExperimentConfig::small(0),
        (None, _) => ExperimentConfig::new(0),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if !cli.overrides.is_empty() {
        let mut v = serde_json::to_value(&cfg)?;
        for o in &cli.overrides {
            apply_override(&mut v, o)?;
        }
        cfg = serde_json::from_value(v).map_err(|e| CliError::config(format!("after overrides: {e}")))?;
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn apply_override(root: &mut Value, spec: &str) -> CliResult<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| CliError::config(format!("override {spec:?} is not PATH=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            Value::Object(m) => m.get_mut(key),
            Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::config(format!("unknown config field {path:?}")))?;
    }
    *node = value;
    Ok(())
}

fn validate(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.natural.validate()?;
    cfg.satellite.validate()?;
    for t in [&cfg.pretrain, &cfg.finetune, &cfg.align, &cfg.probe] {
        t.validate()?;
    }
    normalize_grid(&cfg.alpha_grid)?;
    if !(0.0..1.0).contains(&cfg.delta) {
        return Err(CliError::config(format!("delta {} outside [0, 1)", cfg.delta)));
    }
    if cfg.ks.contains(&0) {
        return Err(CliError::config("retrieval ks must be >= 1"));
    }
    Ok(())
}

pub fn run(ctx: &Ctx, cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(ctx, a),
        Command::Pretrain(a) => pretrain(ctx, a),
        Command::BuildHead(a) => build_heads(ctx, a),
        Command::Finetune(a) => finetune(ctx, a),
        Command::Patch(a) => patch(ctx, a),
        Command::Sweep(a) => sweep(ctx, a),
        Command::Align(a) => align_cmd(ctx, a),
        Command::EvalZeroshot(a) => eval_zeroshot(ctx, a),
        Command::EvalRetrieval(a) => eval_retrieval(ctx, a),
        Command::EvalProbe(a) => eval_probe(ctx, a),
        Command::EvalSimstats(a) => eval_simstats(ctx, a),
        Command::Pipeline(a) => pipeline(ctx, a),
    }
}

fn dataset_summary(ds: &MultiModalDataset) -> CliResult<Value> {
    let sizes: Vec<usize> =
        ["train", "val", "test"].iter().map(|s| ds.view(s).map(|v| v.len())).collect::<Result<_, _>>()?;
    Ok(json!({
        "domain": ds.config().domain.as_str(),
        "samples": ds.len(),
        "classes": ds.num_classes(),
        "channels": ds.config().channels,
        "multilabel": ds.multilabel(),
        "splits": { "train": sizes[0], "val": sizes[1], "test": sizes[2] },
    }))
}

fn gen_data(ctx: &Ctx, a: &GenData) -> CliResult<()> {
    let mut artifacts = Vec::new();
    let mut result = Vec::new();
    for (domain, cfg) in [(DomainArg::Natural, &ctx.cfg.natural), (DomainArg::Satellite, &ctx.cfg.satellite)] {
        if a.domain != DomainArg::Both && a.domain != domain {
            continue;
        }
        let ds = generate(cfg)?;
        let dir = PathBuf::from("data").join(cfg.domain.as_str());
        ds.save(ctx.ws.path(&dir))?;
        artifacts.push(rel(&dir));
        result.push(dataset_summary(&ds)?);
    }
    ctx.emit("gen-data", a, artifacts, result)
}

fn log_summary(log: &TrainLog) -> Value {
    json!({
        "stage": log.stage,
        "steps": log.steps.len(),
        "first_loss": log.first_loss(),
        "final_epoch_loss": log.final_epoch_loss(),
    })
}

fn pretrain(ctx: &Ctx, a: &Pretrain) -> CliResult<()> {
    let ds = ctx.dataset(&a.data)?;
    let train = ds.view("train")?;
    let cfg = &ctx.cfg;
    let size = ds.config().size;
    let tokenizer = shared_tokenizer(ds.num_classes())?;
    let image = Encoder::init(cfg.teacher.encoder(EncoderKind::Image, 3, size, cfg.seed))?;
    let tcfg = cfg.teacher.encoder(EncoderKind::Text, tokenizer.vocab_size(), tokenizer.max_len(), cfg.seed);
    let text = TextEncoder::with_config(tokenizer, tcfg)?;
    let out = pretrain_contrastive(image, text, &train.rgb, &train.captions, &cfg.pretrain)?;
    let artifacts = vec![ctx.save(out.image.params(), &a.image_out)?, ctx.save(out.text.encoder.params(), &a.text_out)?];
    let result = json!({
        "log": log_summary(&out.log),
        "logit_scale": checkpoint_logit_scale(out.image.params()),
        "losses": out.log.steps.iter().map(|s| s.loss).collect::<Vec<_>>(),
    });
    ctx.emit("pretrain", a, artifacts, result)
}

fn build_heads(ctx: &Ctx, a: &BuildHead) -> CliResult<()> {
    if a.domain == DomainArg::Both && (a.output.is_some() || a.prompts.is_some()) {
        return Err(CliError::config("--output and --prompts need a single --domain"));
    }
    let text = TextEncoder::from_checkpoint(ctx.checkpoint(&a.text)?)?;
    let scale = checkpoint_logit_scale(&ctx.checkpoint(&a.image)?).unwrap_or_else(default_logit_scale);
    let mut artifacts = Vec::new();
    let mut result = Vec::new();
    for (domain, data) in [(DomainArg::Natural, &ctx.cfg.natural), (DomainArg::Satellite, &ctx.cfg.satellite)] {
        if a.domain != DomainArg::Both && a.domain != domain {
            continue;
        }
        let prompts = match &a.prompts {
            Some(p) => PromptSet::load(ctx.ws.path(p))?,
            None => data.prompts(),
        };
        let head = build_head(&text, &prompts, scale)?;
        let default = PathBuf::from("heads").join(format!("{}.mpc", data.domain.as_str()));
        let out = a.output.clone().unwrap_or(default);
        artifacts.push(ctx.save(&head.to_checkpoint()?, &out)?);
        result.push(json!({
            "domain": data.domain.as_str(),
            "classes": prompts.classes,
            "templates": prompts.templates,
            "logit_scale": scale,
        }));
    }
    ctx.emit("build-head", a, artifacts, result)
}

fn load_head(ctx: &Ctx, path: &Path) -> CliResult<ClassificationHead> {
    Ok(ClassificationHead::from_checkpoint(&ctx.checkpoint(path)?)?)
}

fn finetune(ctx: &Ctx, a: &Finetune) -> CliResult<()> {
    let image = Encoder::from_self_describing(ctx.checkpoint(&a.image)?)?;
    let head = load_head(ctx, &a.head)?;
    let ds = ctx.dataset(&a.data)?;
    let train = ds.view("train")?;
    let (ft, log) = finetune_frozen_head(&image, &head, &train.rgb, &train.labels, ds.multilabel(), &ctx.cfg.finetune)?;
    let artifacts = vec![ctx.save(ft.params(), &a.output)?];
    let result = json!({
        "log": log_summary(&log),
        "losses": log.steps.iter().map(|s| s.loss).collect::<Vec<_>>(),
    });
    ctx.emit("finetune", a, artifacts, result)
}

fn require_stage(ck: &Checkpoint, want: Stage, what: &str) -> CliResult<()> {
    match ck.stage() {
        Some(s) if s == want => Ok(()),
        found => Err(CliError::stage(format!(
            "{what} must be a {:?} checkpoint, found {}",
            want.as_str(),
            found.map_or("untagged", |s| s.as_str())
        ))),
    }
}

fn patch(ctx: &Ctx, a: &Patch) -> CliResult<()> {
    let zs = ctx.checkpoint(&a.zeroshot)?;
    let ft = ctx.checkpoint(&a.finetuned)?;
    require_stage(&zs, Stage::Zeroshot, "--zeroshot")?;
    require_stage(&ft, Stage::Finetuned, "--finetuned")?;
    let (alpha, source) = match a.alpha {
        Some(x) => (x, "flag"),
        None => {
            let path = ctx.ws.path(&a.sweep);
            let text = std::fs::read_to_string(&path)
                .map_err(|_| CliError::stage(format!("no --alpha given and no sweep report at {}", rel(&a.sweep))))?;
            let v: Value = serde_json::from_str(&text)?;
            let x = v["result"]["sweep"]["chosen_alpha"]
                .as_f64()
                .ok_or_else(|| CliError::config(format!("{} has no chosen alpha", rel(&a.sweep))))?;
            (x, "sweep")
        }
    };
    let out = interpolate(&zs, &ft, alpha)?;
    let artifacts = vec![ctx.save(&out, &a.output)?];
    ctx.emit("patch", a, artifacts, json!({ "alpha": alpha, "alpha_source": source }))
}

fn sweep_plot(title: &str, s: &SweepResult) -> String {
    let series = [
        svg::Series { name: "supported", points: s.rows.iter().map(|r| (r.alpha, r.supported)).collect() },
        svg::Series { name: "patching", points: s.rows.iter().map(|r| (r.alpha, r.patching)).collect() },
    ];
    svg::line_plot(title, "alpha", "score", &series, Some(s.chosen_alpha))
}

fn sweep(ctx: &Ctx, a: &Sweep) -> CliResult<()> {
    let zs_ck = ctx.checkpoint(&a.zeroshot)?;
    let ft = ctx.checkpoint(&a.finetuned)?;
    require_stage(&ft, Stage::Finetuned, "--finetuned")?;
    let zs = Encoder::from_self_describing(zs_ck)?;
    let (sh, ph) = (load_head(ctx, &a.supported_head)?, load_head(ctx, &a.patching_head)?);
    let (sd, pd) = (ctx.dataset(&a.supported_data)?, ctx.dataset(&a.patching_data)?);
    let (sv, pv) = (sd.view("val")?, pd.view("val")?);
    let supported = SweepTask {
        spec: TaskSpec { role: TaskRole::Supported, dataset: sd.config().domain.as_str().into(), metric: Metric::for_labels(sd.multilabel()) },
        head: &sh,
        images: &sv.rgb,
        labels: &sv.labels,
    };
    let patching = SweepTask {
        spec: TaskSpec { role: TaskRole::Patching, dataset: pd.config().domain.as_str().into(), metric: Metric::for_labels(pd.multilabel()) },
        head: &ph,
        images: &pv.rgb,
        labels: &pv.labels,
    };
    let grid = a.grid.clone().unwrap_or_else(|| ctx.cfg.alpha_grid.clone());
    let result = sweep_alpha(&zs, &ft, &grid, &supported, &patching, ctx.cfg.delta)?;
    if result.warning {
        eprintln!("{}", json!({ "warning": "no alpha keeps the supported metric within delta; using alpha = 0" }));
    }
    let plot = ctx.plot_path("");
    ctx.ws.write(&plot, sweep_plot("Patching trade-off (validation)", &result).as_bytes())?;
    let tasks = json!({ "supported": supported.spec, "patching": patching.spec });
    ctx.emit("sweep", a, vec![rel(&plot)], json!({ "tasks": tasks, "sweep": result }))
}

/// An image encoder, or a student with its projection and band list.
enum Model {
    Image(Encoder),
    Student { enc: Encoder, proj: Option<ProjectionHead>, bands: Option<Vec<usize>> },
}

impl Model {
    fn load(ctx: &Ctx, path: &Path) -> CliResult<Model> {
        let ck = ctx.checkpoint(path)?;
        let proj = ProjectionHead::read_from(&ck)?;
        let bands = match ck.meta_value(META_BANDS) {
            Some(b) => Some(serde_json::from_str(b)?),
            None => None,
        };
        let enc = Encoder::from_self_describing(ck)?;
        Ok(match enc.config().kind {
            EncoderKind::Image => Model::Image(enc),
            EncoderKind::Modality => Model::Student { enc, proj, bands },
            EncoderKind::Text => return Err(CliError::config(format!("{} is a text encoder", rel(path)))),
        })
    }

    fn embed(&self, view: &SplitView) -> CliResult<Tensor> {
        Ok(match self {
            Model::Image(e) => e.encode(&view.rgb)?,
            Model::Student { enc, proj, bands } => {
                let x = match bands {
                    Some(b) => select_bands(&view.ms, b)?,
                    None => view.ms.clone(),
                };
                let dim = proj.as_ref().map_or(enc.embed_dim(), ProjectionHead::d_out);
                encode_modality(enc, &x, proj.as_ref(), dim)?
            }
        })
    }
}

#[derive(Serialize)]
struct AlignResult {
    loss: LossArg,
    bands: Vec<usize>,
    teacher_stage: Option<&'static str>,
    before: MetricsReport,
    after: MetricsReport,
    retrieval: mpatch_core::eval::RetrievalReport,
    log: Value,
}

fn metric_report(task: &str, metric: Metric, value: f64, per_class: Option<Vec<Option<f64>>>) -> MetricsReport {
    let mut r = MetricsReport::new(task, metric.as_str(), value);
    r.per_class = per_class;
    r
}

fn valid_ks(ks: &[usize], n: usize) -> Vec<usize> {
    ks.iter().copied().filter(|&k| k <= n).collect()
}

fn align_cmd(ctx: &Ctx, a: &Align) -> CliResult<()> {
    let teacher_ck = ctx.checkpoint(&a.teacher)?;
    let stage = teacher_ck.stage();
    if stage != Some(Stage::Patched) && !a.allow_unpatched {
        return Err(CliError::stage(format!(
            "align needs a patched teacher, found {}; run patch first or pass --allow-unpatched",
            stage.map_or("untagged", |s| s.as_str())
        )));
    }
    let teacher = Encoder::from_self_describing(teacher_ck)?;
    let head = load_head(ctx, &a.head)?;
    let ds = ctx.dataset(&a.data)?;
    let (train, test) = (ds.view("train")?, ds.view("test")?);
    let dcfg = ds.config();
    let bands: Vec<usize> = match a.bands {
        BandsArg::All => (0..dcfg.channels).collect(),
        BandsArg::Rgb => dcfg.composite.bands.to_vec(),
    };
    let cfg = &ctx.cfg;
    let student = Encoder::init(cfg.student.encoder(EncoderKind::Modality, bands.len(), dcfg.size, cfg.seed ^ STUDENT_SEED_MIX))?;
    let proj = ProjectionHead::for_dims(student.embed_dim(), teacher.embed_dim())?;
    let metric = Metric::for_labels(ds.multilabel());
    let d = teacher.embed_dim();

    let test_in = select_bands(&test.ms, &bands)?;
    let before = encode_modality(&student, &test_in, proj.as_ref(), d)?;
    let before = zeroshot_score(&before, &head, &test.labels, metric)?;

    let mut tcfg = cfg.align.clone();
    let weights = match a.loss {
        LossArg::MseCe => AlignLoss::default(),
        LossArg::Ce => AlignLoss { mse_weight: 0.0 },
        LossArg::Mse => {
            tcfg.lambda = 0.0;
            AlignLoss::default()
        }
    };
    let train_in = select_bands(&train.ms, &bands)?;
    let out = align(&teacher, student, proj, &head, &train_in, &train.rgb, &train.labels, ds.multilabel(), &tcfg, weights)?;
    let emb = out.embed(&test_in, d)?;
    let after = zeroshot_score(&emb, &head, &test.labels, metric)?;
    let per_class = per_class_ap(&head.classify(&emb)?, &test.labels)?;
    let rgb = EmbeddingSet::new(teacher.encode(&test.rgb)?, test.ids.clone())?;
    let ms = EmbeddingSet::new(emb, test.ids.clone())?;
    let retrieval = retrieval(&rgb, &ms, &valid_ks(&cfg.ks, test.len()))?;

    let mut ck = out.checkpoint()?;
    ck.set_meta(META_BANDS, serde_json::to_string(&bands)?);
    let artifacts = vec![ctx.save(&ck, &a.output)?];
    let result = AlignResult {
        loss: a.loss,
        bands,
        teacher_stage: stage.map(Stage::as_str),
        before: metric_report("zeroshot/before", metric, before, None),
        after: metric_report("zeroshot/after", metric, after, Some(per_class)),
        retrieval,
        log: log_summary(&out.log),
    };
    ctx.emit("align", a, artifacts, result)
}

fn eval_zeroshot(ctx: &Ctx, a: &EvalZeroshot) -> CliResult<()> {
    let model = Model::load(ctx, &a.encoder)?;
    let head = load_head(ctx, &a.head)?;
    let ds = ctx.dataset(&a.data)?;
    let view = ds.view(&a.split)?;
    let emb = model.embed(&view)?;
    let metric = Metric::for_labels(ds.multilabel());
    let value = zeroshot_score(&emb, &head, &view.labels, metric)?;
    let per_class = per_class_ap(&head.classify(&emb)?, &view.labels)?;
    let task = format!("zeroshot/{}/{}", ds.config().domain.as_str(), a.split);
    ctx.emit("eval-zeroshot", a, vec![], metric_report(&task, metric, value, Some(per_class)))
}

fn eval_retrieval(ctx: &Ctx, a: &EvalRetrieval) -> CliResult<()> {
    let teacher = Model::load(ctx, &a.teacher)?;
    let student = Model::load(ctx, &a.student)?;
    let ds = ctx.dataset(&a.data)?;
    let view = ds.view(&a.split)?;
    let rgb = EmbeddingSet::new(teacher.embed(&view)?, view.ids.clone())?;
    let ms = EmbeddingSet::new(student.embed(&view)?, view.ids.clone())?;
    let ks = valid_ks(&ctx.cfg.ks, view.len());
    let rep = retrieval(&rgb, &ms, &ks)?;
    let mut m = MetricsReport::new(&format!("retrieval/{}", a.split), "recall@k", rep.mean_at(10).unwrap_or(f64::NAN));
    for &k in &ks {
        let (ab, ba) = rep.at(k).expect("k was requested");
        m.values.insert(format!("rgb_to_ms@{k}"), ab);
        m.values.insert(format!("ms_to_rgb@{k}"), ba);
    }
    if rep.mean_at(10).is_none() {
        m.value = rep.mean_at(ks.last().copied().unwrap_or(1)).unwrap_or(0.0);
    }
    ctx.emit("eval-retrieval", a, vec![], json!({ "report": m, "retrieval": rep }))
}

fn eval_probe(ctx: &Ctx, a: &EvalProbe) -> CliResult<()> {
    let model = Model::load(ctx, &a.encoder)?;
    let ds = ctx.dataset(&a.data)?;
    let (train, test) = (ds.view("train")?, ds.view("test")?);
    let probe = linear_probe(
        &model.embed(&train)?,
        &train.labels,
        &model.embed(&test)?,
        &test.labels,
        ds.multilabel(),
        &ctx.cfg.probe,
    )?;
    let mut report = probe.report;
    report.task = format!("probe/{}", ds.config().domain.as_str());
    ctx.emit("eval-probe", a, vec![], json!({ "report": report, "final_loss": probe.losses.last() }))
}

#[derive(Serialize)]
struct SimGroup {
    data: String,
    mean: f64,
    median: f64,
    histogram: Vec<usize>,
}

fn eval_simstats(ctx: &Ctx, a: &EvalSimstats) -> CliResult<()> {
    let (ma, mb) = (Model::load(ctx, &a.a)?, Model::load(ctx, &a.b)?);
    let mut groups = Vec::new();
    let mut values = Vec::new();
    for path in &a.data {
        let ds = ctx.dataset(path)?;
        let view = ds.view(&a.split)?;
        let ea = EmbeddingSet::new(ma.embed(&view)?, view.ids.clone())?;
        let eb = EmbeddingSet::new(mb.embed(&view)?, view.ids.clone())?;
        let s = cosine_similarity_stats(&ea, &eb)?;
        let name = ds.config().domain.as_str().to_string();
        groups.push(SimGroup { data: rel(path), mean: s.mean, median: s.median, histogram: s.histogram });
        values.push((name, s.values));
    }
    let plot = ctx.plot_path("");
    let refs: Vec<(&str, &[f64])> = values.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    ctx.ws.write(&plot, svg::violin_plot("Cosine similarity between encoders", "cosine similarity", &refs).as_bytes())?;
    ctx.emit("eval-simstats", a, vec![rel(&plot)], groups)
}

fn pipeline(ctx: &Ctx, a: &Pipeline) -> CliResult<()> {
    let out = run_experiment(&ctx.cfg)?;
    let art = &out.artifacts;
    let mut artifacts = Vec::new();
    for ds in [&out.natural, &out.satellite] {
        let dir = PathBuf::from("data").join(ds.config().domain.as_str());
        ds.save(ctx.ws.path(&dir))?;
        artifacts.push(rel(&dir));
    }
    let mut student = art.student.checkpoint()?;
    let bands: Vec<usize> = (0..ctx.cfg.satellite.channels).collect();
    student.set_meta(META_BANDS, serde_json::to_string(&bands)?);
    let cks: [(&Checkpoint, &str); 7] = [
        (art.zeroshot_image.params(), "ckpt/zeroshot_image.mpc"),
        (art.text.encoder.params(), "ckpt/text.mpc"),
        (art.finetuned_image.params(), "ckpt/finetuned_image.mpc"),
        (art.patched_image.params(), "ckpt/patched_image.mpc"),
        (&student, "ckpt/student.mpc"),
        (&art.natural_head.to_checkpoint()?, "heads/natural.mpc"),
        (&art.satellite_head.to_checkpoint()?, "heads/satellite.mpc"),
    ];
    for (ck, path) in cks {
        artifacts.push(ctx.save(ck, Path::new(path))?);
    }
    let m = &out.metrics;
    if m.sweep.warning {
        eprintln!("{}", json!({ "warning": "no alpha keeps the supported metric within delta; using alpha = 0" }));
    }
    let sweep_svg = ctx.plot_path("_sweep");
    ctx.ws.write(&sweep_svg, sweep_plot("Patching trade-off (validation)", &m.sweep).as_bytes())?;
    let sim_svg = ctx.plot_path("_simstats");
    let groups: [(&str, &[f64]); 2] =
        [("natural", &m.drift_supported.values), ("satellite", &m.drift_patching.values)];
    ctx.ws.write(&sim_svg, svg::violin_plot("Zero-shot vs patched embeddings", "cosine similarity", &groups).as_bytes())?;
    let logs = ctx.report.with_file_name("train_logs.json");
    let mut log_text = serde_json::to_string_pretty(&art.logs)?;
    log_text.push('\n');
    ctx.ws.write(&logs, log_text.as_bytes())?;
    artifacts.extend([rel(&sweep_svg), rel(&sim_svg), rel(&logs)]);
    ctx.emit("pipeline", a, artifacts, m)
}

/// Stage reports land in `reports/<command>.json` unless `--report` is given.
pub fn default_report(cmd: &Command) -> PathBuf {
    PathBuf::from("reports").join(format!("{}.json", cmd.name()))
}

pub fn thread_count() -> CliResult<Option<usize>> {
    match std::env::var("MPATCH_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError { kind: "config".into(), message: format!("MPATCH_THREADS={s:?} is not a positive integer"), code: exit::CONFIG }),
        },
    }
}
