//! Implementations of the subcommands. Each checks its prerequisites
//! before writing anything.

use std::path::{Path, PathBuf};

use crate::data::{
    from_model_range, generate_dataset, read_latents, read_volume, seg_decode, seg_encode, write_latents, write_volume,
    Dataset, LatentSource, Modality, Patient, SegMap, SliceSet, Split, Stage, Variant, Volume,
};
use crate::error::{Error, Result};
use crate::metrics::{
    build_report, build_segmentation_report, write_aggregates_csv, write_report_csv, write_violin_csvs, MetricReport,
    Region, VariantVolumes,
};
use crate::models::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use crate::tensor::Tensor;
use crate::train::{loss_csv, train_stage, TrainOutcome};
use crate::util::atomic_write;

use super::RunConfig;

/// Prediction batch size for inference and latent extraction.
const INFER_BATCH: usize = 16;
/// Pseudo-variant that predicts T1C as the T1W input.
pub const COPY_T1W: &str = "copy-t1w";

pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Self {
        Self { out: out.to_path_buf() }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.stage_dir(stage).join("model.tavc")
    }

    pub fn latents(&self, src: LatentSource) -> PathBuf {
        self.out.join("latents").join(src.dir_name())
    }

    pub fn predicted_seg(&self, patient: &str) -> PathBuf {
        self.out.join("seg_pred").join(format!("{patient}_seg.tav"))
    }

    pub fn predictions(&self, variant: &str) -> PathBuf {
        self.out.join("predictions").join(variant)
    }

    pub fn prediction(&self, variant: &str, patient: &str) -> PathBuf {
        self.predictions(variant).join(format!("{patient}_t1c.tav"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
}

fn stage_name(stage: Stage) -> String {
    match stage {
        Stage::Segmentation => "seg".into(),
        Stage::Latent => "latent".into(),
        Stage::Synthesis(v) => v.name().into(),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!(
            "{what} ({} not found)",
            path.display()
        )))
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<u64> {
    cfg.validate()?;
    let hash = generate_dataset(&cfg.data_dir, &cfg.gen_config())?;
    log::info!("wrote {} patients to {}", cfg.patients, cfg.data_dir.display());
    Ok(hash)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::load(&cfg.data_dir)?;
    if ds.image_size() != cfg.image_size {
        return Err(Error::Config(format!(
            "dataset at {} has {s}x{s} slices but image_size is {}",
            cfg.data_dir.display(),
            cfg.image_size,
            s = ds.image_size()
        )));
    }
    Ok(ds)
}

fn latent_shape(cfg: &RunConfig) -> [usize; 3] {
    let b = cfg.image_size / 4;
    [cfg.bottleneck_channels, b, b]
}

fn load_split_latents(layout: &Layout, patients: &[&Patient], split: Split) -> Result<Vec<Vec<f32>>> {
    let dir = layout.latents(LatentSource::for_split(split));
    patients
        .iter()
        .map(|p| read_latents(&dir, &p.id).map(|(_, d)| d))
        .collect()
}

fn slice_set<'a>(
    cfg: &RunConfig,
    layout: &Layout,
    ds: &'a Dataset,
    split: Split,
    stage: Stage,
) -> Result<SliceSet<'a>> {
    let patients = ds.split(split);
    if patients.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split} is empty")));
    }
    let latents = if stage.needs_latents() {
        Some((load_split_latents(layout, &patients, split)?, latent_shape(cfg)))
    } else {
        None
    };
    SliceSet::new(patients, stage, latents)
}

fn save_stage(cfg: &RunConfig, layout: &Layout, name: &str, out: &TrainOutcome) -> Result<()> {
    let dir = layout.stage_dir(name);
    let snapshot = cfg.to_toml();
    let ckpt = Checkpoint::from_model(&out.model, out.best_epoch as u64, Some(&out.optimizer), &snapshot);
    save_checkpoint(&ckpt, &layout.checkpoint(name))?;
    atomic_write(&dir.join("loss.csv"), loss_csv(&out.history).as_bytes())?;
    atomic_write(&dir.join("config.toml"), snapshot.as_bytes())?;
    Ok(())
}

fn run_training(cfg: &RunConfig, layout: &Layout, ds: &Dataset, stage: Stage) -> Result<TrainOutcome> {
    let train = slice_set(cfg, layout, ds, Split::Train, stage)?;
    let mut val = slice_set(cfg, layout, ds, Split::Val, stage)?;
    if cfg.val_slices_per_patient > 0 {
        val = val.keep_even(cfg.val_slices_per_patient)?;
    }
    // Synthesis variants share the init and shuffling seeds.
    let seed_name = match stage {
        Stage::Synthesis(_) => "synthesis".to_string(),
        s => stage_name(s),
    };
    let model = Model::build(&cfg.model_config(stage)?, cfg.stage_seed(&seed_name, "init"))?;
    let plan = cfg.train_plan(&seed_name);
    log::info!(
        "training {} on {} slices ({} validation)",
        stage_name(stage),
        train.len(),
        val.len()
    );
    train_stage(model, &plan, &train, &val)
}

/// Runs `model` over every slice of a patient and returns `[d, h, w]`
/// outputs in model range.
fn predict_patient(
    model: &mut Model<f32>,
    inputs: &[&[f32]],
    latents: Option<&[f32]>,
    p: &Patient,
) -> Result<Vec<f32>> {
    let [d, h, w] = p.seg.extents;
    let n = h * w;
    let c = inputs.len();
    let cfg = model.config().clone();
    let b = cfg.bottleneck_size();
    let ln = cfg.latent_channels * b * b;
    let mut out = Vec::with_capacity(d * n);
    for z0 in (0..d).step_by(INFER_BATCH) {
        let z1 = (z0 + INFER_BATCH).min(d);
        let mut x = Vec::with_capacity((z1 - z0) * c * n);
        for z in z0..z1 {
            for ch in inputs {
                x.extend_from_slice(&ch[z * n..(z + 1) * n]);
            }
        }
        let x = Tensor::from_vec(&[z1 - z0, c, h, w], x)?;
        let s = latents
            .map(|l| Tensor::from_vec(&[z1 - z0, cfg.latent_channels, b, b], l[z0 * ln..z1 * ln].to_vec()))
            .transpose()?;
        out.extend_from_slice(model.predict(&x, s.as_ref())?.data());
    }
    Ok(out)
}

fn model_range(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&x| crate::data::to_model_range(x)).collect()
}

/// Encoder latents `[d, C, b, b]` of a label map.
fn encode_latents(encoder: &mut Model<f32>, seg: &SegMap) -> Result<Vec<f32>> {
    let [d, h, w] = seg.extents;
    let enc = seg_encode(&seg.labels)?;
    let n = h * w;
    let mut out = Vec::new();
    for z0 in (0..d).step_by(INFER_BATCH) {
        let z1 = (z0 + INFER_BATCH).min(d);
        let x = Tensor::from_vec(&[z1 - z0, 1, h, w], enc[z0 * n..z1 * n].to_vec())?;
        out.extend_from_slice(encoder.extract_latent(&x)?.data());
    }
    Ok(out)
}

fn load_model(path: &Path, what: &str) -> Result<Model<f32>> {
    require(path, what)?;
    load_checkpoint(path)?.to_model()
}

pub fn train(cfg: &RunConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    match stage {
        Stage::Latent => require(
            &layout.checkpoint("seg"),
            "the latent stage needs a trained segmenter; run `train seg` first",
        )?,
        Stage::Synthesis(v) if v.conditioned() => require(
            &layout.latents(LatentSource::GroundTruth),
            "conditioned synthesis needs segmentation latents; run `train latent` first",
        )?,
        _ => {}
    }
    let ds = load_dataset(cfg)?;
    let name = stage_name(stage);
    let out = run_training(cfg, &layout, &ds, stage)?;
    save_stage(cfg, &layout, &name, &out)?;
    if stage == Stage::Latent {
        materialize_latents(cfg, &layout, &ds, out.model)?;
    }
    Ok(())
}

/// Writes ground-truth latents for training and validation patients, and
/// latents of predicted segmentations for test patients.
fn materialize_latents(cfg: &RunConfig, layout: &Layout, ds: &Dataset, mut encoder: Model<f32>) -> Result<()> {
    let mut segmenter = load_model(&layout.checkpoint("seg"), "trained segmenter")?;
    let [c, b, _] = latent_shape(cfg);
    for p in &ds.patients {
        let src = LatentSource::for_split(p.split);
        let seg = match src {
            LatentSource::GroundTruth => p.seg.clone(),
            LatentSource::Predicted => {
                let inputs = [model_range(&p.t1w.data), model_range(&p.flair.data)];
                let raw = predict_patient(&mut segmenter, &[&inputs[0], &inputs[1]], None, p)?;
                let pred = SegMap::new(&p.id, p.seg.extents, seg_decode(&raw))?;
                write_volume(&layout.predicted_seg(&p.id), &pred.to_file())?;
                pred
            }
        };
        let lat = encode_latents(&mut encoder, &seg)?;
        write_latents(&layout.latents(src), &p.id, [p.depth(), c, b, b], lat)?;
    }
    Ok(())
}

fn split_patients(ds: &Dataset, split: Split) -> Result<Vec<&Patient>> {
    let ps = ds.split(split);
    if ps.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split} is empty")));
    }
    Ok(ps)
}

/// Predicted T1C volumes in `[0, 1]` for every patient of `split`.
pub fn infer(cfg: &RunConfig, variant: &str, split: Split, checkpoint: Option<&Path>) -> Result<usize> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let ds = load_dataset(cfg)?;
    let patients = split_patients(&ds, split)?;
    if variant == COPY_T1W {
        for p in &patients {
            write_volume(&layout.prediction(variant, &p.id), &p.t1w.to_file())?;
        }
        return Ok(patients.len());
    }
    let v: Variant = variant.parse()?;
    let path = checkpoint.map_or_else(|| layout.checkpoint(v.name()), Path::to_path_buf);
    let mut model = load_model(
        &path,
        &format!("trained {v} model; run `train tavit --variant {v}` first"),
    )?;
    let mc = model.config();
    if mc.in_channels != v.in_channels()
        || mc.image_size != ds.image_size()
        || model.is_conditioned() != v.conditioned()
    {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds a {}-channel {}x{} {} model, variant {v} needs {} channel(s) at {}x{}",
            path.display(),
            mc.in_channels,
            mc.image_size,
            mc.image_size,
            if model.is_conditioned() {
                "conditioned"
            } else {
                "unconditioned"
            },
            v.in_channels(),
            ds.image_size(),
            ds.image_size()
        )));
    }
    let latents = if v.conditioned() {
        Some(load_split_latents(&layout, &patients, split)?)
    } else {
        None
    };
    for (i, p) in patients.iter().enumerate() {
        let t1w = model_range(&p.t1w.data);
        let flair = model_range(&p.flair.data);
        let inputs: Vec<&[f32]> = if v.in_channels() == 1 {
            vec![&t1w]
        } else {
            vec![&t1w, &flair]
        };
        let raw = predict_patient(&mut model, &inputs, latents.as_ref().map(|l| l[i].as_slice()), p)?;
        let vol = Volume::new(
            &p.id,
            Modality::T1c,
            p.seg.extents,
            raw.into_iter().map(from_model_range).collect(),
        )?;
        write_volume(&layout.prediction(v.name(), &p.id), &vol.to_file())?;
    }
    Ok(patients.len())
}

/// Variants with predictions on disk, in canonical order.
pub fn available_variants(cfg: &RunConfig) -> Vec<String> {
    let layout = Layout::new(&cfg.out_dir);
    Variant::ALL
        .iter()
        .map(|v| v.name())
        .chain([COPY_T1W])
        .filter(|v| layout.predictions(v).is_dir())
        .map(str::to_string)
        .collect()
}

fn load_predictions(layout: &Layout, variant: &str, patients: &[&Patient]) -> Result<VariantVolumes> {
    let mut volumes = Vec::with_capacity(patients.len());
    for p in patients {
        let path = layout.prediction(variant, &p.id);
        require(
            &path,
            &format!(
                "predictions of {variant} for patient {}; run `infer --variant {variant}`",
                p.id
            ),
        )?;
        volumes.push(Volume::from_file(read_volume(&path)?, &p.id, Modality::T1c)?);
    }
    Ok(VariantVolumes {
        name: variant.to_string(),
        volumes,
    })
}

/// Computes per-patient metrics on the test split and writes the report
/// CSVs.
pub fn evaluate(cfg: &RunConfig, variants: &[String], baseline: Option<&str>) -> Result<MetricReport> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    if variants.is_empty() {
        return Err(Error::MissingPrerequisite(
            "no predictions to evaluate; run `infer` first".into(),
        ));
    }
    let ds = load_dataset(cfg)?;
    let patients = split_patients(&ds, Split::Test)?;
    let preds = variants
        .iter()
        .map(|v| load_predictions(&layout, v, &patients))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&Volume, &SegMap)> = patients.iter().map(|p| (&p.t1c, &p.seg)).collect();
    let report = build_report(&refs, &preds, baseline)?;
    let dir = layout.report_dir();
    write_report_csv(&dir.join("metrics.csv"), &report)?;
    write_aggregates_csv(&dir.join("aggregates.csv"), &report)?;
    write_violin_csvs(&dir, &report)?;
    Ok(report)
}

/// Segmentation overlap of the test predictions plus a plain-text summary
/// of the synthesis aggregates.
pub fn report(cfg: &RunConfig, synthesis: &MetricReport) -> Result<String> {
    let layout = Layout::new(&cfg.out_dir);
    let ds = load_dataset(cfg)?;
    let patients = split_patients(&ds, Split::Test)?;
    let mut preds = Vec::new();
    for p in &patients {
        let path = layout.predicted_seg(&p.id);
        require(&path, "predicted test segmentations; run `train latent` first")?;
        preds.push(SegMap::from_file(read_volume(&path)?, &p.id)?);
    }
    let pairs: Vec<(&SegMap, &SegMap)> = patients.iter().map(|p| &p.seg).zip(&preds).collect();
    let seg = build_segmentation_report("segmenter", &pairs)?;
    let dir = layout.report_dir();
    write_report_csv(&dir.join("segmentation.csv"), &seg)?;
    write_aggregates_csv(&dir.join("segmentation_aggregates.csv"), &seg)?;
    let mut s = String::new();
    for r in [synthesis, &seg] {
        for region in Region::ALL {
            s.push_str(&format!("\n[{region}]\n{:<18}", "variant"));
            for m in &r.metrics {
                s.push_str(&format!("{m:>24}"));
            }
            s.push('\n');
            for v in &r.variants {
                s.push_str(&format!("{v:<18}"));
                for m in &r.metrics {
                    let cell = match r.aggregate(v, region, m) {
                        Some(a) => match a.p_vs_baseline {
                            Some(p) => format!("{:.4}±{:.4} p={:.3}", a.mean, a.std, p),
                            None => format!("{:.4}±{:.4}", a.mean, a.std),
                        },
                        None => "-".into(),
                    };
                    s.push_str(&format!("{cell:>24}"));
                }
                s.push('\n');
            }
        }
    }
    atomic_write(&dir.join("summary.md"), s.as_bytes())?;
    Ok(s)
}
