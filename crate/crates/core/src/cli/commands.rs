use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use paramsal::data::{prepare, DataSource, Dataset, DatasetManifest, PreparedData, Sample, SplitSpec, SynthConfig};
use paramsal::experiments::{
    build_pool, correct_pool_pruning, counts_from_percent, finetune_sweep, mask_dataset_experiment, perturbation_sweep,
    pruning_sweep, FinetuneSweepConfig, MaskExperimentConfig, PoolKind, SweepConfig,
};
use paramsal::input_saliency::{
    cascade_stage_sets, input_saliency_map, postprocess_map, sanity_randomization, BoostSpec,
    DEFAULT_PERCENTILE,
};
use paramsal::nn::{Checkpoint, GoldenVector, Model, ModelSpec, TrainingMeta};
use paramsal::profile_index::{NeighborQuery, Pool, ProfileIndex, QueryTarget, RowMeta};
use paramsal::saliency::{
    adversarial_saliency, compute_stats, filter_profile, l1_adversarial_saliency, smoothgrad_param_saliency,
    sorted_per_layer, standardize, write_sorted_csv, AttackConfig, ProfileStats,
};
use paramsal::seeds::derive_seed;
use paramsal::service_api::{encode_heatmap_png, serve, AppState, ServiceConfig};
use paramsal::trainer::{evaluate, train, write_history_csv, TrainConfig};
use paramsal::{Error, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;

use super::*;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareData(a) => prepare_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Profile(a) => profile(a),
        Command::Knn(a) => knn(a),
        Command::ExpPrune(a) => exp_prune(a),
        Command::ExpPerturb(a) => exp_perturb(a),
        Command::ExpFinetune(a) => exp_finetune(a),
        Command::ExpMask(a) => exp_mask(a),
        Command::InputSaliency(a) => input_saliency(a),
        Command::SanityCheck(a) => sanity_check(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::MissingArtifact { path: path.to_path_buf(), source })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Model, prepared data and the selected split.
struct Loaded {
    model: Model,
    data: PreparedData,
    split: String,
}

impl Loaded {
    fn open(input: &ModelData) -> Result<Self> {
        let model = Checkpoint::load(&input.checkpoint)?.model;
        let data = prepare(&DatasetManifest::load(&input.dataset)?)?;
        data.split_by_name(&input.split)?;
        Ok(Loaded { model, data, split: input.split.clone() })
    }

    fn dataset(&self) -> &Dataset {
        self.data.split_by_name(&self.split).expect("checked in open")
    }

    fn sample(&self, id: usize) -> Result<&Sample> {
        self.dataset().get(id).ok_or_else(|| invalid(format!("sample {id} is not in the {} split", self.split)))
    }
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    let manifest = match &a.config {
        Some(p) => DatasetManifest::load(p)?,
        None => DatasetManifest::new(DataSource::Synth(SynthConfig::default()), SplitSpec::default()),
    };
    let prepared = prepare(&manifest)?;
    prepared.manifest.save(&a.out)?;
    let c = prepared.manifest.counts.as_ref().expect("filled by prepare");
    println!("samples={} train={} val={} holdout={}", c.total, c.train, c.val, c.holdout);
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = prepare(&DatasetManifest::load(&a.dataset)?)?;
    let mut cfg: TrainConfig = read_config(a.config.as_ref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let spec = match &a.model {
        Some(p) => read_json(p)?,
        None => ModelSpec::small_resnet(&a.widths, 1, data.train.image_shape, data.train.num_classes),
    };
    let outcome = train(&Model::build(&spec, cfg.seed)?, &data.train, &data.val, &cfg)?;
    if let Some(h) = &a.history {
        write_history_csv(&outcome.history, h)?;
    }
    let (loss, acc) = evaluate(&outcome.model, &data.val, 256)?;
    let mut ckpt = Checkpoint::new(outcome.model, TrainingMeta { seed: cfg.seed, epochs: cfg.epochs, final_accuracy: acc });
    if let Some(first) = data.val.samples.first() {
        ckpt.golden = Some(GoldenVector::capture(&ckpt.model, &first.image)?);
    }
    ckpt.save(&a.out)?;
    println!("val_loss={loss:.6} val_accuracy={acc:.4} filters={}", ckpt.model.registry().filter_count());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let ds = l.dataset();
    let (loss, acc) = evaluate(&l.model, ds, 256)?;
    if let Some(out) = &a.out {
        let preds = l.model.predict_many(&ds.images(), 256)?;
        let mut f = create(out)?;
        writeln!(f, "sample_id,label,predicted,true_confidence,predicted_confidence")?;
        for (s, p) in ds.samples.iter().zip(&preds) {
            writeln!(f, "{},{},{},{},{}", s.id, s.label, p.predicted, p.confidences[s.label], p.confidences[p.predicted])?;
        }
        f.flush()?;
    }
    println!("split={} samples={} loss={loss:.6} accuracy={acc:.4}", l.split, ds.len());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let refs: Vec<_> = l.dataset().samples.iter().map(|s| (&s.image, s.label)).collect();
    let stats = compute_stats(&l.model, &refs, &l.split)?;
    stats.save(&a.out)?;
    println!("reference={} samples={} filters={}", l.split, stats.count, stats.len());
    Ok(())
}

fn profile(a: ProfileArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let stats = ProfileStats::load(&a.stats)?;
    let Some(id) = a.sample else {
        if a.variant != Variant::Gradient || a.sorted_out.is_some() {
            return Err(invalid("--variant and --sorted-out apply to a single --sample"));
        }
        let index = ProfileIndex::from_dataset(&l.model, l.dataset(), &stats, Pool::All)?;
        index.save(&a.out, Some(&stats.reference))?;
        println!("profiles={} width={}", index.len(), index.width());
        return Ok(());
    };
    let s = l.sample(id)?;
    let raw = match a.variant {
        Variant::Gradient => filter_profile(&l.model, &s.image, s.label)?,
        Variant::Smoothgrad => smoothgrad_param_saliency(&l.model, &s.image, s.label, 0.1, 20, a.seed)?,
        Variant::Adversarial => adversarial_saliency(&l.model, &s.image, s.label, &AttackConfig::default())?,
        Variant::L1Adversarial => l1_adversarial_saliency(&l.model, &s.image, s.label, 0.99)?,
    };
    let standardized = standardize(&raw, &stats)?;
    let reg = l.model.registry();
    let mut f = create(&a.out)?;
    writeln!(f, "filter_id,layer_id,raw,standardized")?;
    for (g, (r, z)) in reg.filters().iter().zip(raw.iter().zip(&standardized)) {
        writeln!(f, "{},{},{r},{z}", g.id, g.layer_id)?;
    }
    f.flush()?;
    if let Some(p) = &a.sorted_out {
        write_sorted_csv(&sorted_per_layer(&standardized, reg)?, p)?;
    }
    let mean = standardized.iter().sum::<f64>() / standardized.len() as f64;
    println!("sample={id} label={} mean_standardized={mean:.6}", s.label);
    Ok(())
}

fn parse_layers(text: &str) -> Result<(usize, usize)> {
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| invalid(format!("layers must look like a..b, got {text:?}")));
    match text.split_once("..") {
        Some((a, b)) => Ok((num(a)?, num(b)?)),
        None => num(text).map(|a| (a, a)),
    }
}

fn knn(a: KnnArgs) -> Result<()> {
    let index = ProfileIndex::load(&a.index)?;
    let pool = match a.pool {
        PoolArg::All => Pool::All,
        PoolArg::Misclassified => Pool::MisclassifiedOnly,
        PoolArg::Correct => Pool::CorrectOnly,
    };
    let layer_range = a.layers.as_deref().map(parse_layers).transpose()?;
    let found = index.knn(&NeighborQuery { target: QueryTarget::Sample(a.sample), k: a.k, layer_range, pool })?;
    let me = index.meta()[index.position(a.sample).expect("knn checked the sample")];
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "rank,sample_id,similarity,label,predicted,shares_confusion_pair")?;
    for (rank, n) in found.neighbors.iter().enumerate() {
        let other = RowMeta { sample_id: n.sample_id, label: n.label, predicted: n.predicted };
        let shares = !me.correct() && !other.correct() && me.confusion_pair() == other.confusion_pair();
        writeln!(out, "{},{},{},{},{},{shares}", rank + 1, n.sample_id, n.similarity, n.label, n.predicted)?;
    }
    out.flush()?;
    if found.truncated {
        log::warn!("pool holds fewer than {} candidates", a.k);
    }
    Ok(())
}

/// Model, data, statistics and the selected pool of an experiment command.
struct Experiment {
    loaded: Loaded,
    stats: ProfileStats,
}

impl Experiment {
    fn open(e: &ExperimentData) -> Result<Self> {
        Ok(Experiment { loaded: Loaded::open(&e.input)?, stats: ProfileStats::load(&e.stats)? })
    }

    fn pool(&self, kind: PoolKind, limit: Option<usize>) -> Result<Vec<paramsal::experiments::PoolEntry>> {
        let pool = build_pool(&self.loaded.model, self.loaded.dataset(), &self.stats, kind, limit)?;
        log::info!("{} {kind:?} samples from {}", pool.len(), self.loaded.split);
        Ok(pool)
    }
}

fn resolve_counts(c: &SweepCounts, model: &Model) -> Option<Vec<usize>> {
    match (&c.counts, &c.percents) {
        (Some(k), _) => Some(k.clone()),
        (None, Some(p)) => Some(counts_from_percent(model.registry().filter_count(), p)),
        (None, None) => None,
    }
}

fn json_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn sweep_config(e: &ExperimentData, counts: &SweepCounts, model: &Model) -> Result<SweepConfig> {
    let mut cfg: SweepConfig = read_config(e.config.as_ref())?;
    if let Some(s) = e.seed {
        cfg.seed = s;
    }
    if let Some(k) = resolve_counts(counts, model) {
        cfg.counts = k;
    }
    Ok(cfg)
}

fn exp_prune(a: PruneArgs) -> Result<()> {
    let x = Experiment::open(&a.exp)?;
    let cfg = sweep_config(&a.exp, &a.counts, &x.loaded.model)?;
    let report = if a.correct {
        correct_pool_pruning(&x.loaded.model, &x.pool(PoolKind::Correct, a.exp.limit)?, &cfg)?
    } else {
        pruning_sweep(&x.loaded.model, &x.pool(PoolKind::Misclassified, a.exp.limit)?, &cfg)?
    };
    report.write_csv(&a.exp.out)?;
    report.write_json(&json_path(&a.exp.out))?;
    log::info!("pruning sweep took {:?}", report.runtime);
    println!("rows={} samples={}", report.rows.len(), report.rows.first().map_or(0, |r| r.samples));
    Ok(())
}

fn exp_perturb(a: PerturbArgs) -> Result<()> {
    let x = Experiment::open(&a.exp)?;
    let cfg = sweep_config(&a.exp, &a.counts, &x.loaded.model)?;
    let kind = if a.correct { PoolKind::Correct } else { PoolKind::Misclassified };
    let report = perturbation_sweep(&x.loaded.model, &x.pool(kind, a.exp.limit)?, &cfg, a.noise_std)?;
    report.write_csv(&a.exp.out)?;
    report.write_json(&json_path(&a.exp.out))?;
    log::info!("perturbation sweep took {:?}", report.runtime);
    println!("rows={} samples={}", report.rows.len(), report.rows.first().map_or(0, |r| r.samples));
    Ok(())
}

fn exp_finetune(a: FinetuneArgs) -> Result<()> {
    let x = Experiment::open(&a.exp)?;
    let model = &x.loaded.model;
    let mut cfg: FinetuneSweepConfig = read_config(a.exp.config.as_ref())?;
    if let Some(s) = a.exp.seed {
        cfg.seed = s;
    }
    if let Some(k) = resolve_counts(&a.counts, model) {
        cfg.counts = k;
    }
    if let Some(step) = a.step_size {
        cfg.step_size = step;
    }
    cfg.allow_over_cap |= a.allow_over_cap;
    let neighbor_data = x.loaded.data.split_by_name(&a.neighbor_split)?;
    let index = ProfileIndex::from_dataset(model, neighbor_data, &x.stats, Pool::MisclassifiedOnly)?;
    let pool = x.pool(PoolKind::Misclassified, a.exp.limit)?;
    let report = finetune_sweep(model, &pool, &index, neighbor_data, &cfg)?;
    report.write_csv(&a.exp.out)?;
    report.write_json(&json_path(&a.exp.out))?;
    log::info!("fine-tuning sweep took {:?}", report.runtime);
    println!("rows={} samples={} neighbor_pool={}", report.rows.len(), pool.len(), index.len());
    Ok(())
}

fn exp_mask(a: MaskArgs) -> Result<()> {
    let x = Experiment::open(&a.exp)?;
    let mut cfg: MaskExperimentConfig = read_config(a.exp.config.as_ref())?;
    if let Some(s) = a.exp.seed {
        cfg.seed = s;
    }
    if let Some(p) = a.percent {
        cfg.percent = p;
    }
    let pool = x.pool(PoolKind::Misclassified, a.exp.limit)?;
    let report = mask_dataset_experiment(&x.loaded.model, &pool, &x.stats, &cfg)?;
    report.write_csv(&a.exp.out)?;
    report.write_json(&json_path(&a.exp.out))?;
    log::info!("masking experiment took {:?}", report.runtime);
    let c = &report.incorrect_salient_vs_random;
    println!("samples={} salient_minus_random={:.6} p={:.4}", report.samples, c.mean_difference, c.p_value);
    Ok(())
}

fn boost_spec(b: &BoostArgs) -> BoostSpec {
    BoostSpec { filters: b.filters.clone(), top_filters: b.top_filters, boost: b.boost }
}

fn input_saliency(a: InputSaliencyArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let stats = ProfileStats::load(&a.stats)?;
    let s = l.sample(a.sample)?;
    let mut map = input_saliency_map(&l.model, &s.image, s.label, &stats, &boost_spec(&a.boost))?;
    if !a.raw {
        map = postprocess_map(&map, DEFAULT_PERCENTILE, true)?;
    }
    let mut f = create(&a.out)?;
    writeln!(f, "row,col,value")?;
    for i in 0..map.height {
        for j in 0..map.width {
            writeln!(f, "{i},{j},{}", map.get(i, j))?;
        }
    }
    f.flush()?;
    if let Some(p) = &a.png {
        std::fs::write(p, encode_heatmap_png(&map)?)?;
    }
    let filters: Vec<String> = map.filters.iter().map(|f| f.to_string()).collect();
    println!("sample={} filters={} degenerate={}", a.sample, filters.join(";"), map.degenerate);
    Ok(())
}

fn sanity_check(a: SanityArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let ds = l.dataset();
    if a.samples == 0 || a.reference == 0 || a.repeats == 0 {
        return Err(invalid("--samples, --reference and --repeats must be positive"));
    }
    let reference: Vec<_> = ds.samples.iter().take(a.reference).map(|s| (&s.image, s.label)).collect();
    let preds = l.model.predict_many(&ds.images(), 256)?;
    let chosen: Vec<&Sample> =
        ds.samples.iter().zip(&preds).filter(|(s, p)| p.predicted != s.label).map(|(s, _)| s).take(a.samples).collect();
    if chosen.is_empty() {
        return Err(Error::Empty(format!("no misclassified samples in {}", l.split)));
    }
    let sets = cascade_stage_sets(&l.model);
    let spec = boost_spec(&a.boost);
    let mut f = create(&a.out)?;
    writeln!(f, "repeat,sample_id,step,stages,spearman")?;
    let mut means = vec![0.0; sets.len() + 1];
    let draws = (a.repeats * chosen.len()) as f64;
    for repeat in 0..a.repeats {
        let seed = derive_seed(a.seed, repeat as u64);
        let rows: Vec<_> = chosen
            .par_iter()
            .map(|s| sanity_randomization(&l.model, &s.image, s.label, &spec, &sets, &reference, seed))
            .collect::<Result<_>>()?;
        for (s, sample_rows) in chosen.iter().zip(&rows) {
            for (step, r) in sample_rows.iter().enumerate() {
                let stages: Vec<String> = r.stages.iter().map(|x| x.to_string()).collect();
                writeln!(f, "{repeat},{},{step},{},{}", s.id, stages.join(";"), r.spearman)?;
                means[step] += r.spearman / draws;
            }
        }
    }
    f.flush()?;
    let text: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    println!("samples={} mean_spearman_by_step={}", chosen.len(), text.join(","));
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let base: Option<ServiceConfig> = a.config.as_deref().map(read_json).transpose()?;
    let pick = |flag: Option<PathBuf>, from: Option<PathBuf>, name: &str| {
        flag.or(from).ok_or_else(|| invalid(format!("serve needs --{name} or a config file naming it")))
    };
    let config = ServiceConfig {
        checkpoint: pick(a.checkpoint, base.as_ref().map(|c| c.checkpoint.clone()), "checkpoint")?,
        dataset: pick(a.dataset, base.as_ref().map(|c| c.dataset.clone()), "dataset")?,
        stats: pick(a.stats, base.as_ref().map(|c| c.stats.clone()), "stats")?,
        index: a.index.or(base.as_ref().and_then(|c| c.index.clone())),
        port: a.port.or(base.as_ref().map(|c| c.port)).unwrap_or(8080),
    };
    let state = Arc::new(AppState::open(&config)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(serve(state, std::net::SocketAddr::new(a.host, config.port)))
}
