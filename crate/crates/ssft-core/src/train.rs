//! The training recipe: AdamW with step decay, auxiliary-loss weighting,
//! early stopping on the validation metric, multi-seed runs, and evaluation.

use crate::augment::AugmentSpec;
use crate::checkpoint::save_checkpoint;
use crate::cube::{
    fit_band_stats, load_cube, normalize, BandStats, DatasetManifest, HsiCube, Split, Task,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, VarId};
use crate::metrics::{accuracy, macro_f1};
use crate::model::{
    bind_params, init_params, model_forward, BoundParams, FeatureTap, ForwardOutput, SsftConfig,
    SsftParams,
};
use crate::optim::{lr_at, AdamW, EarlyStopper};
use crate::synth::splitmix;
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_max: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub step_size: usize,
    pub gamma: f64,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub augment: Vec<AugmentSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_max: 50,
            lr: 4e-4,
            weight_decay: 1e-2,
            batch: 8,
            step_size: 20,
            gamma: 0.1,
            patience: 10,
            seeds: vec![0, 1, 2],
            augment: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_max < 1 {
            return Err(Error::InvalidConfig("epochs_max must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch < 1 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        if self.step_size < 1 {
            return Err(Error::InvalidConfig("step_size must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig("gamma must be in (0, 1]".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        for spec in &self.augment {
            spec.validate()?;
        }
        Ok(())
    }
}

/// A manifest plus its cubes, loaded into memory in manifest order.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub cubes: Vec<HsiCube>,
}

impl LoadedDataset {
    /// Load all cubes referenced by a manifest file; relative sample paths
    /// resolve against the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut cubes = Vec::with_capacity(manifest.samples.len());
        for sample in &manifest.samples {
            let p = PathBuf::from(&sample.path);
            let p = if p.is_absolute() { p } else { base.join(p) };
            cubes.push(load_cube(&p)?);
        }
        let ds = LoadedDataset { manifest, cubes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_memory(manifest: DatasetManifest, cubes: Vec<HsiCube>) -> Result<Self> {
        let ds = LoadedDataset { manifest, cubes };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        if self.cubes.len() != self.manifest.samples.len() {
            return Err(Error::InvalidData(format!(
                "{} cubes for {} manifest entries",
                self.cubes.len(),
                self.manifest.samples.len()
            )));
        }
        let Some(first) = self.cubes.first() else {
            return Err(Error::InvalidData("dataset is empty".into()));
        };
        let (h, w, c) = (first.h, first.w, first.c);
        for cube in &self.cubes {
            if (cube.h, cube.w, cube.c) != (h, w, c) {
                return Err(Error::InvalidData(format!(
                    "cube {} is {}x{}x{}, expected {}x{}x{}",
                    cube.id, cube.h, cube.w, cube.c, h, w, c
                )));
            }
        }
        Ok(())
    }

    pub fn num_bands(&self) -> usize {
        self.cubes[0].c
    }
}

/// Stack cubes into a `[B, H, W, C]` batch tensor.
fn batch_tensor(cubes: &[HsiCube]) -> Tensor {
    let (h, w, c) = (cubes[0].h, cubes[0].w, cubes[0].c);
    let mut data = Vec::with_capacity(cubes.len() * h * w * c);
    for cube in cubes {
        data.extend_from_slice(&cube.data);
    }
    Tensor::new(vec![cubes.len(), h, w, c], data).unwrap()
}

fn multihot(labels: &[usize], k: usize) -> Vec<f64> {
    let mut row = vec![0.0; k];
    for &l in labels {
        row[l] = 1.0;
    }
    row
}

/// Classification loss for one output head under the manifest task.
fn head_loss(
    g: &mut Graph,
    logits: VarId,
    task: Task,
    labels: &[&[usize]],
    k: usize,
) -> Result<VarId> {
    match task {
        Task::Multiclass => {
            let targets: Vec<usize> = labels.iter().map(|l| l[0]).collect();
            g.cross_entropy(logits, &targets)
        }
        Task::Multilabel => {
            let rows: Vec<f64> = labels.iter().flat_map(|l| multihot(l, k)).collect();
            let t = Tensor::new(vec![labels.len(), k], rows)?;
            g.bce_with_logits(logits, &t)
        }
    }
}

/// Scalar values of the loss components for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub main: f64,
    pub aux_s: f64,
    pub aux_p: f64,
}

/// `L = L_main + lambda * (L_aux_s + L_aux_p)`; the auxiliary terms require
/// the auxiliary heads when lambda > 0.
pub fn total_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    task: Task,
    labels: &[&[usize]],
    k: usize,
    lambda: f64,
) -> Result<(VarId, LossParts)> {
    let main = head_loss(g, out.logits, task, labels, k)?;
    let main_val = g.value(main).scalar();
    if lambda == 0.0 {
        return Ok((
            main,
            LossParts {
                total: main_val,
                main: main_val,
                aux_s: 0.0,
                aux_p: 0.0,
            },
        ));
    }
    let (Some(aux_s), Some(aux_p)) = (out.aux_s, out.aux_p) else {
        return Err(Error::InvalidConfig(
            "lambda_aux > 0 but the forward pass produced no auxiliary logits".into(),
        ));
    };
    let ls = head_loss(g, aux_s, task, labels, k)?;
    let lp = head_loss(g, aux_p, task, labels, k)?;
    let (ls_val, lp_val) = (g.value(ls).scalar(), g.value(lp).scalar());
    let aux_sum = g.add(ls, lp);
    let weighted = g.scale(aux_sum, lambda);
    let total = g.add(main, weighted);
    Ok((
        total,
        LossParts {
            total: g.value(total).scalar(),
            main: main_val,
            aux_s: ls_val,
            aux_p: lp_val,
        },
    ))
}

/// One line of the per-epoch training history (JSONL).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_main: f64,
    pub loss_aux_s: f64,
    pub loss_aux_p: f64,
    pub val: f64,
}

/// Batched eval-mode metric on one split: accuracy for multiclass, macro F1
/// for multilabel.
pub fn evaluate(
    params: &SsftParams,
    config: &SsftConfig,
    dataset: &LoadedDataset,
    cubes: &[HsiCube],
    split: Split,
    batch: usize,
) -> Result<f64> {
    let indices = dataset.manifest.indices_of(split);
    if indices.is_empty() {
        return Err(Error::InvalidData(format!("split {} is empty", split)));
    }
    let k = dataset.manifest.num_classes;
    let mut all_logits: Vec<f64> = Vec::with_capacity(indices.len() * k);
    let mut bn = params.bn.clone();
    for chunk in indices.chunks(batch) {
        let members: Vec<HsiCube> = chunk.iter().map(|&i| cubes[i].clone()).collect();
        let mut g = Graph::new();
        let x = g.leaf(batch_tensor(&members), false);
        let bound = bind_params(&mut g, &params.params, false);
        let out = model_forward(&mut g, x, &bound, &mut bn, config, Mode::Eval)?;
        all_logits.extend_from_slice(g.value(out.logits).data());
    }
    let metric = match dataset.manifest.task {
        Task::Multiclass => {
            let labels: Vec<usize> = indices
                .iter()
                .map(|&i| dataset.manifest.samples[i].labels[0])
                .collect();
            accuracy(&all_logits, k, &labels)
        }
        Task::Multilabel => {
            let targets: Vec<f64> = indices
                .iter()
                .flat_map(|&i| multihot(&dataset.manifest.samples[i].labels, k))
                .collect();
            macro_f1(&all_logits, k, &targets)
        }
    };
    Ok(metric)
}

/// Outcome of one seed's run.
#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub test_metric: f64,
    pub epochs: Vec<EpochRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

/// Aggregate over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub seeds: Vec<SeedResult>,
    pub test_mean: f64,
    pub test_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train one seed end to end. Band statistics are fit on the training split,
/// every evaluation uses normalized cubes, training cubes are (optionally)
/// augmented per epoch before normalization. Returns the result with the
/// best-validation parameters restored; when `out_dir` is given the
/// checkpoint and a JSONL epoch history are written there.
pub fn train_seed(
    dataset: &LoadedDataset,
    config: &SsftConfig,
    tc: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(SeedResult, SsftParams, BandStats)> {
    config.validate()?;
    tc.validate()?;
    if config.num_bands != dataset.num_bands() {
        return Err(Error::InvalidConfig(format!(
            "model expects {} bands, dataset has {}",
            config.num_bands,
            dataset.num_bands()
        )));
    }
    let manifest = &dataset.manifest;
    let k = manifest.num_classes;
    if let Some(&l) = manifest
        .samples
        .iter()
        .flat_map(|s| s.labels.iter())
        .find(|&&l| l >= k)
    {
        return Err(Error::InvalidData(format!("label {} out of range", l)));
    }

    let train_idx = manifest.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InvalidData("train split is empty".into()));
    }
    let train_cubes: Vec<&HsiCube> = train_idx.iter().map(|&i| &dataset.cubes[i]).collect();
    let stats = fit_band_stats(&train_cubes)?;
    let normed: Vec<HsiCube> = dataset
        .cubes
        .iter()
        .map(|c| normalize(c, &stats))
        .collect::<Result<_>>()?;

    let mut params = init_params(config, seed)?;
    let mut opt = AdamW::new(&params.params);
    let mut stopper = EarlyStopper::new(tc.patience);
    let mut best: Option<SsftParams> = None;
    let mut epochs = Vec::new();

    for epoch in 1..=tc.epochs_max {
        let lr = lr_at(epoch, tc.lr, tc.step_size, tc.gamma);
        let batches = crate::cube::split_iter(
            manifest,
            Split::Train,
            tc.batch,
            splitmix(seed, 0x5_0000 + epoch as u64),
        )?;
        let mut sums = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for idxs in &batches {
            let members: Vec<HsiCube> = idxs
                .iter()
                .map(|&i| {
                    if tc.augment.is_empty() {
                        Ok(normed[i].clone())
                    } else {
                        // augment the raw cube, then normalize with the
                        // train-split statistics
                        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(
                            splitmix(seed, 0xA06_0000 + epoch as u64),
                            i as u64,
                        ));
                        let aug = crate::augment::pipeline(&dataset.cubes[i], &tc.augment, &mut rng)?;
                        normalize(&aug, &stats)
                    }
                })
                .collect::<Result<_>>()?;
            let labels: Vec<&[usize]> = idxs
                .iter()
                .map(|&i| manifest.samples[i].labels.as_slice())
                .collect();

            let mut g = Graph::new();
            let x = g.leaf(batch_tensor(&members), false);
            let bound = bind_params(&mut g, &params.params, true);
            let out = model_forward(&mut g, x, &bound, &mut params.bn, config, Mode::Train)?;
            let lambda = if config.aux_heads { config.lambda_aux } else { 0.0 };
            let (loss, parts) = total_loss(&mut g, &out, manifest.task, &labels, k, lambda)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} at seed {} epoch {} (main {}, aux_s {}, aux_p {})",
                    parts.total, seed, epoch, parts.main, parts.aux_s, parts.aux_p
                )));
            }
            g.backward(loss)?;
            let grads = collect_grads(&g, &bound);
            opt.step(&mut params.params, &grads, lr, tc.weight_decay)?;

            let b = idxs.len() as f64;
            sums.0 += parts.main * b;
            sums.1 += parts.aux_s * b;
            sums.2 += parts.aux_p * b;
            seen += idxs.len();
        }
        let n = seen as f64;
        let val = evaluate(&params, config, dataset, &normed, Split::Val, tc.batch)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            loss_main: sums.0 / n,
            loss_aux_s: sums.1 / n,
            loss_aux_p: sums.2 / n,
            val,
        });
        let stop = stopper.update(epoch, val);
        if stopper.improved(epoch) {
            best = Some(params.clone());
        }
        if stop {
            break;
        }
    }

    let best = best.expect("at least one epoch ran");
    let test_metric = evaluate(&best, config, dataset, &normed, Split::Test, tc.batch)?;
    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join(format!("seed_{seed}.ckpt"));
        save_checkpoint(&best, config, Some(&stats), &ckpt)?;
        let hist = dir.join(format!("seed_{seed}_history.jsonl"));
        write_history(&hist, &epochs)?;
        checkpoint = Some(ckpt);
    }
    Ok((
        SeedResult {
            seed,
            best_epoch: stopper.best_epoch(),
            best_val: stopper.best_metric(),
            test_metric,
            epochs,
            checkpoint,
        },
        best,
        stats,
    ))
}

fn collect_grads(g: &Graph, bound: &BoundParams) -> IndexMap<String, Tensor> {
    let mut grads = IndexMap::new();
    for (name, &id) in bound.iter() {
        if let Some(gr) = g.grad(id) {
            grads.insert(name.clone(), gr.clone());
        }
    }
    grads
}

fn write_history(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in epochs {
        let line = serde_json::to_string(rec).map_err(|e| Error::json(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Train every seed in the config, in parallel up to `SSFT_THREADS` (default
/// 1), and aggregate the test metrics.
pub fn run(
    dataset: &LoadedDataset,
    config: &SsftConfig,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let threads: usize = std::env::var("SSFT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1);
    let mut seeds_done: Vec<SeedResult> = Vec::with_capacity(tc.seeds.len());
    for group in tc.seeds.chunks(threads) {
        let results: Vec<Result<SeedResult>> = std::thread::scope(|scope| {
            let handles: Vec<_> = group
                .iter()
                .map(|&seed| {
                    scope.spawn(move || {
                        train_seed(dataset, config, tc, seed, out_dir).map(|(r, _, _)| r)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            seeds_done.push(r?);
        }
    }
    let metrics: Vec<f64> = seeds_done.iter().map(|r| r.test_metric).collect();
    let (test_mean, test_std) = mean_std(&metrics);
    Ok(TrainReport {
        seeds: seeds_done,
        test_mean,
        test_std,
    })
}

/// Write per-sample mean-pooled features from one tap as CSV:
/// `id,label,f0..f{D-1}` (multilabel rows join labels with `;`).
pub fn export_features_csv(
    dataset: &LoadedDataset,
    params: &SsftParams,
    config: &SsftConfig,
    stats: &BandStats,
    tap: FeatureTap,
    split: Split,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let indices = dataset.manifest.indices_of(split);
    if indices.is_empty() {
        return Err(Error::InvalidData(format!("split {} is empty", split)));
    }
    let d = config.embed_dim;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    writeln!(f, "id,label,{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for &i in &indices {
        let cube = normalize(&dataset.cubes[i], stats)?;
        let x = cube.to_tensor().reshaped(&[1, cube.h, cube.w, cube.c])?;
        let feats = crate::model::export_features(&x, params, config, tap)?;
        let label = dataset.manifest.samples[i]
            .labels
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let row: Vec<String> = feats.data().iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{},{},{}", cube.id, label, row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, SynthSpec};

    fn tiny_setup() -> (LoadedDataset, SsftConfig, TrainConfig) {
        let ds = synth_dataset(&SynthSpec {
            classes: 2,
            per_class: 6,
            height: 8,
            width: 8,
            bands: 8,
            seed: 7,
            noise_sigma: 0.02,
        })
        .unwrap();
        let dataset = LoadedDataset::from_memory(ds.manifest, ds.cubes).unwrap();
        let config = SsftConfig {
            embed_dim: 8,
            downsample: 4,
            heads: 2,
            ffn_mult: 2,
            num_bands: 8,
            num_classes: 2,
            ..Default::default()
        };
        let tc = TrainConfig {
            epochs_max: 2,
            batch: 4,
            seeds: vec![0],
            ..Default::default()
        };
        (dataset, config, tc)
    }

    #[test]
    fn one_seed_runs_and_logs() {
        let (dataset, config, tc) = tiny_setup();
        let (result, _, _) = train_seed(&dataset, &config, &tc, 0, None).unwrap();
        assert_eq!(result.epochs.len(), 2);
        assert!(result.best_epoch >= 1);
        for rec in &result.epochs {
            assert!(rec.loss_main.is_finite());
            assert!((0.0..=1.0).contains(&rec.val));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (dataset, config, tc) = tiny_setup();
        let (a, pa, _) = train_seed(&dataset, &config, &tc, 3, None).unwrap();
        let (b, pb, _) = train_seed(&dataset, &config, &tc, 3, None).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(pa, pb);
    }

    #[test]
    fn checkpoint_reproduces_val_metric() {
        let (dataset, config, tc) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let (result, _, _) = train_seed(&dataset, &config, &tc, 1, Some(dir.path())).unwrap();
        let ckpt = result.checkpoint.clone().unwrap();
        let (params, config2, stats) = crate::checkpoint::load_checkpoint(&ckpt).unwrap();
        let stats = stats.unwrap();
        let normed: Vec<HsiCube> = dataset
            .cubes
            .iter()
            .map(|c| normalize(c, &stats).unwrap())
            .collect();
        let val = evaluate(&params, &config2, &dataset, &normed, Split::Val, tc.batch).unwrap();
        assert_eq!(val, result.best_val);
    }

    #[test]
    fn band_count_mismatch_is_rejected() {
        let (dataset, mut config, tc) = tiny_setup();
        config.num_bands = 16;
        assert!(train_seed(&dataset, &config, &tc, 0, None).is_err());
    }

    #[test]
    fn evaluation_is_batch_size_invariant() {
        let (dataset, config, tc) = tiny_setup();
        let (_, params, stats) = train_seed(&dataset, &config, &tc, 2, None).unwrap();
        let normed: Vec<HsiCube> = dataset
            .cubes
            .iter()
            .map(|c| normalize(c, &stats).unwrap())
            .collect();
        let v1 = evaluate(&params, &config, &dataset, &normed, Split::Val, 1).unwrap();
        let v8 = evaluate(&params, &config, &dataset, &normed, Split::Val, 8).unwrap();
        assert_eq!(v1, v8);
    }

    #[test]
    fn zero_lambda_matches_aux_free_trajectory() {
        // training with aux heads present but lambda = 0 must follow the exact
        // same main-path parameter trajectory as training without aux heads
        let (dataset, config, tc) = tiny_setup();
        let with_aux = SsftConfig {
            aux_heads: true,
            lambda_aux: 0.0,
            ..config.clone()
        };
        let without_aux = SsftConfig {
            aux_heads: false,
            lambda_aux: 0.0,
            ..config
        };
        let (ra, pa, _) = train_seed(&dataset, &with_aux, &tc, 5, None).unwrap();
        let (rb, pb, _) = train_seed(&dataset, &without_aux, &tc, 5, None).unwrap();
        assert_eq!(ra.epochs, rb.epochs);
        for (name, t) in pb.params.iter() {
            assert_eq!(pa.params.get(name), t, "{} diverged", name);
        }
        assert_eq!(pa.bn, pb.bn);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let (dataset, _, _) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = dataset.manifest.clone();
        for (s, cube) in manifest.samples.iter_mut().zip(&dataset.cubes) {
            let p = dir.path().join(&s.path);
            crate::cube::save_cube(cube, &p).unwrap();
        }
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        let loaded = LoadedDataset::load(&mpath).unwrap();
        assert_eq!(loaded.manifest, dataset.manifest);
        // on-disk payload is f32, so values agree to f32 precision
        for (a, b) in loaded.cubes.iter().zip(&dataset.cubes) {
            assert_eq!(a.h, b.h);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
