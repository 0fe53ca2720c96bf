//! Datasets, the training loop, evaluation sweeps, constellation statistics,
//! run records and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokcomm_tensor::{Adam, AdamConfig, Graph, ParamStore, RandomSource};

use crate::config::{ExperimentConfig, RateLoss};
use crate::error::{CoreError, Result};
use crate::geometry::{estimate_normals, read_cloud, synth_dataset, PointCloud, DEFAULT_NORMAL_K};
use crate::metrics::{MetricReport, MetricRow};
use crate::model::{ChannelSpec, ForwardOptions, TokComm};
use crate::modulator::{constellation_histogram, entropy_bits, ConstellationRow, SymbolStream};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Seeded random split by percentages; the test split takes the rest.
    pub fn new(clouds: Vec<PointCloud>, split: [usize; 3], seed: u64) -> Result<Self> {
        if clouds.is_empty() {
            return Err(CoreError::Argument("dataset is empty".into()));
        }
        if split.iter().sum::<usize>() != 100 {
            return Err(CoreError::Config(format!("split {split:?} must sum to 100")));
        }
        let n = clouds.len();
        let mut order: Vec<usize> = (0..n).collect();
        RandomSource::new(seed).fork(0x5e11).shuffle(&mut order);
        let n_train = (n * split[0] / 100).max(1);
        let n_val = (n * split[1] / 100).min(n - n_train);
        Ok(Self {
            train: order[..n_train].to_vec(),
            val: order[n_train..n_train + n_val].to_vec(),
            test: order[n_train + n_val..].to_vec(),
            clouds,
        })
    }

    /// Synthetic shapes as configured.
    pub fn synthetic(cfg: &ExperimentConfig) -> Result<Self> {
        let mut rng = RandomSource::new(cfg.train.seed).fork(0xda7a);
        let clouds = synth_dataset(cfg.train.dataset_size, cfg.model.n_points, &mut rng)?;
        Self::new(clouds, cfg.train.split, cfg.train.seed)
    }

    /// Every `.ply` or `.bin` file in `dir`, sorted by name. Clouds without
    /// normals get PCA normals.
    pub fn from_dir(dir: &Path, split: [usize; 3], seed: u64) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ply" || e == "bin"))
            .collect();
        paths.sort();
        let clouds = paths
            .iter()
            .map(|p| with_normals(read_cloud(p)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clouds, split, seed)
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&PointCloud> {
        idx.iter().map(|&i| &self.clouds[i]).collect()
    }

    pub fn train_set(&self) -> Vec<&PointCloud> {
        self.subset(&self.train)
    }

    pub fn test_set(&self) -> Vec<&PointCloud> {
        let set = self.subset(&self.test);
        if set.is_empty() {
            self.train_set()
        } else {
            set
        }
    }

    /// SHA-256 over the raw coordinates of every cloud, in order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clouds {
            h.update((c.len() as u64).to_le_bytes());
            for p in c.points() {
                for v in p {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn with_normals(cloud: PointCloud) -> Result<PointCloud> {
    if cloud.normals().is_some() {
        Ok(cloud)
    } else {
        Ok(estimate_normals(&cloud, DEFAULT_NORMAL_K)?.cloud)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cd: f64,
    pub mean_n_send: f64,
}

/// Symbols transmitted per branch, averaged over an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolCounts {
    pub snr_db: f64,
    pub main: f64,
    pub auxiliary_sent: f64,
    pub auxiliary_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub dataset_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub evaluations: Vec<MetricRow>,
    pub constellation: Vec<ConstellationRow>,
    pub symbol_counts: Vec<SymbolCounts>,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// A model together with its parameters and the configuration it was built from.
pub struct Trained {
    pub config: ExperimentConfig,
    pub model: TokComm,
    pub store: ParamStore,
    pub record: RunRecord,
}

pub fn build(cfg: &ExperimentConfig) -> Result<(TokComm, ParamStore)> {
    cfg.validate()?;
    let (model, mut store) = TokComm::new(&cfg.model, cfg.train.seed)?;
    if let Some(init) = &cfg.train.init_checkpoint {
        load_params(&mut store, Path::new(init))?;
    }
    Ok((model, store))
}

/// Loads every parameter the checkpoint shares with `store` by name.
fn load_params(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut other = ParamStore::new();
    let manifest = tokcomm_tensor::param::read_manifest(path)?;
    let bytes = fs::read(path)?;
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let offset = e.offset as usize;
        let vals = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| CoreError::Parse(format!("checkpoint truncated at `{}`", e.name)))?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        other.add(e.name.clone(), tokcomm_tensor::Tensor::new(&e.shape, vals)?)?;
    }
    for p in store.iter_mut() {
        if let Some(id) = other.id(&p.name) {
            let src = &other.get(id).value;
            if src.shape() == p.value.shape() {
                p.value = src.clone();
            }
        }
    }
    Ok(())
}

/// Optimizes the full chain on the training split. Each batch draws its
/// SNR uniformly from the configured window unless `train_snr` is fixed.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<Trained> {
    train_with(cfg, data, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    let (model, mut store) = build(cfg)?;
    let t = &cfg.train;
    let mut adam = Adam::new(
        AdamConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            ..AdamConfig::default()
        },
        &store,
    )?;
    let mut rng = RandomSource::new(t.seed).fork(0x7a1);
    let mut order = data.train.clone();
    let mut record = RunRecord {
        config_hash: cfg.hash(),
        dataset_hash: data.hash(),
        ..RunRecord::default()
    };
    for epoch in 0..t.epochs {
        let lr = t.lr_at(epoch);
        adam.set_lr(lr)?;
        rng.shuffle(&mut order);
        let (mut loss_sum, mut cd_sum, mut send_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(t.batch_size) {
            let clouds = data.subset(batch);
            let snr = t.train_snr.unwrap_or_else(|| rng.uniform(t.snr_min, t.snr_max));
            let spec = ChannelSpec {
                kind: t.channel,
                snr_db: snr,
                csi_noise: t.csi_noise,
            };
            let mut g = Graph::new();
            let opts = ForwardOptions::train(&cfg.model, spec);
            let sent = model.forward_batch(&mut g, &store, &clouds, &opts, &mut rng)?;
            let (loss, cd) = model.loss(&mut g, &clouds, &sent, t.lambda, t.rate_loss)?;
            let (lv, cv) = (g.value(loss).item(), g.value(cd).item());
            if !lv.is_finite() {
                return Err(CoreError::Diverged {
                    epoch: epoch + 1,
                    detail: format!("loss {lv} at SNR {snr:.2} dB"),
                });
            }
            let grads = g.backward(loss)?;
            store.zero_grads();
            g.accumulate_param_grads(&grads, &mut store);
            adam.step(&mut store);
            let b = clouds.len() as f64;
            loss_sum += lv * b;
            cd_sum += cv * b;
            send_sum += sent.iter().map(|s| s.n_send as f64).sum::<f64>();
            count += clouds.len();
        }
        let n = count.max(1) as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / n,
            cd: cd_sum / n,
            mean_n_send: send_sum / n,
        };
        on_epoch(&rec);
        record.epochs.push(rec);
    }
    Ok(Trained {
        config: cfg.clone(),
        model,
        store,
        record,
    })
}

/// Scores the model on `clouds` at each SNR, averaging `trials` channel
/// realizations per cloud. Gumbel noise is off. A seed of the form
/// (seed, SNR index, trial) drives each realization.
pub fn evaluate(
    trained: &Trained,
    clouds: &[&PointCloud],
    snrs: &[f64],
    trials: usize,
) -> Result<(Vec<MetricRow>, Vec<SymbolCounts>)> {
    let t = &trained.config.train;
    let model = &trained.model;
    let mut rows = Vec::with_capacity(snrs.len());
    let mut counts = Vec::with_capacity(snrs.len());
    for (si, &snr) in snrs.iter().enumerate() {
        let spec = ChannelSpec {
            kind: t.channel,
            snr_db: snr,
            csi_noise: t.csi_noise,
        };
        let mut reports = Vec::new();
        let mut sent_total = 0.0;
        for trial in 0..trials.max(1) {
            let mut rng = RandomSource::new(t.seed).fork(((si as u64) << 32) | trial as u64);
            for cloud in clouds {
                let reference = with_normals((*cloud).clone())?;
                let (recon, n_send) = model.reconstruct(&trained.store, &reference, Some(spec), &mut rng)?;
                let recon = estimate_normals(&recon, DEFAULT_NORMAL_K)?.cloud;
                reports.push(MetricReport::compute(
                    &reference,
                    &recon,
                    None,
                    n_send as f64,
                    model.cfg.n_mod,
                )?);
                sent_total += n_send as f64;
            }
        }
        let mean_sent = sent_total / reports.len() as f64;
        rows.push(MetricRow {
            model: model_label(&trained.config),
            snr_db: snr,
            seed: t.seed,
            report: MetricReport::mean(&reports)?,
        });
        counts.push(SymbolCounts {
            snr_db: snr,
            main: model.n_main as f64,
            auxiliary_sent: mean_sent - model.n_main as f64,
            auxiliary_total: model.n_aux as f64,
        });
    }
    Ok((rows, counts))
}

/// Short description used as the model column of metric tables.
pub fn model_label(cfg: &ExperimentConfig) -> String {
    let mut s = format!("{}-nmod{}", cfg.model.estimator, cfg.model.n_mod);
    if cfg.model.channel_adapter {
        s.push_str("-adapter");
    }
    if cfg.model.rate_allocator {
        s.push_str(match cfg.train.rate_loss {
            RateLoss::Penalty => "-rate",
            RateLoss::Verbatim => "-rate-verbatim",
        });
    }
    if let Some(snr) = cfg.train.train_snr {
        s.push_str(&format!("-fixed{snr}dB"));
    }
    s
}

/// Frequency of every grid point among the transmitted (pre-normalization)
/// symbols for `clouds` at `snr`, with the entropy of the table in bits.
pub fn constellation_stats(
    trained: &Trained,
    clouds: &[&PointCloud],
    snr: f64,
    gumbel_noise: bool,
) -> Result<(Vec<ConstellationRow>, f64)> {
    let model = &trained.model;
    let spec = ChannelSpec {
        kind: trained.config.train.channel,
        snr_db: snr,
        csi_noise: 0.0,
    };
    let mut opts = ForwardOptions::eval(&model.cfg, Some(spec));
    opts.modulation.noise = gumbel_noise;
    let mut rng = RandomSource::new(trained.config.train.seed).fork(0xc0de);
    let mut symbols: Vec<Complex64> = Vec::new();
    for cloud in clouds {
        let mut g = Graph::new();
        let t = model
            .forward_batch(&mut g, &trained.store, &[cloud], &opts, &mut rng)?
            .remove(0);
        let stream = SymbolStream::from_tensor(g.value(t.symbols))?;
        symbols.extend_from_slice(&stream.symbols[..t.n_send]);
    }
    let rows = constellation_histogram(&model.codebook, &symbols)?;
    let h = entropy_bits(&rows);
    Ok((rows, h))
}

/// Writes parameters plus a manifest whose metadata holds the full config.
pub fn save_checkpoint(trained: &Trained, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "config": trained.config.to_toml()?,
        "config_hash": trained.config.hash(),
    });
    trained.store.save_checkpoint(path, meta)?;
    Ok(())
}

/// Rebuilds the model from the config stored in the checkpoint manifest.
pub fn load_checkpoint(path: &Path) -> Result<Trained> {
    let manifest = tokcomm_tensor::param::read_manifest(path)?;
    let text = manifest.metadata["config"]
        .as_str()
        .ok_or_else(|| CoreError::Parse("checkpoint manifest lacks a config".into()))?;
    let mut config = ExperimentConfig::from_toml(text)?;
    config.train.init_checkpoint = None;
    let (model, mut store) = TokComm::new(&config.model, config.train.seed)?;
    store.load_checkpoint(path)?;
    Ok(Trained {
        config,
        model,
        store,
        record: RunRecord::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.train.dataset_size = 8;
        c.train.epochs = 2;
        c.train.batch_size = 4;
        c
    }

    #[test]
    fn split_follows_percentages() {
        let cfg = ExperimentConfig::desk();
        let d = Dataset::synthetic(&cfg).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (22, 3, 7));
        let mut all: Vec<usize> = d.train.iter().chain(&d.val).chain(&d.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let mut cfg = tiny();
        cfg.train.epochs = 0;
        let d = Dataset::synthetic(&cfg).unwrap();
        let t = train(&cfg, &d).unwrap();
        let (_, init) = TokComm::new(&cfg.model, cfg.train.seed).unwrap();
        for (a, b) in t.store.iter().zip(init.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let cfg = tiny();
        let d = Dataset::synthetic(&cfg).unwrap();
        let a = train(&cfg, &d).unwrap();
        let b = train(&cfg, &d).unwrap();
        assert_eq!(a.record.epochs, b.record.epochs);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let d = Dataset::synthetic(&cfg).unwrap();
        let t = train(&cfg, &d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&t, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, t.config);
        for (a, b) in back.store.iter().zip(t.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        let mut init_cfg = cfg.clone();
        init_cfg.train.init_checkpoint = Some(path.to_string_lossy().into_owned());
        let (_, store) = build(&init_cfg).unwrap();
        for (a, b) in store.iter().zip(t.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn evaluation_is_reproducible() {
        let cfg = tiny();
        let d = Dataset::synthetic(&cfg).unwrap();
        let t = train(&cfg, &d).unwrap();
        let test = d.test_set();
        let (a, counts) = evaluate(&t, &test, &[0.0, 10.0], 1).unwrap();
        let (b, _) = evaluate(&t, &test, &[0.0, 10.0], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(counts[0].auxiliary_sent, counts[0].auxiliary_total);
    }

    #[test]
    fn constellation_table_sums_to_one() {
        let cfg = tiny();
        let d = Dataset::synthetic(&cfg).unwrap();
        let t = train(&cfg, &d).unwrap();
        let (rows, h) = constellation_stats(&t, &d.test_set(), 10.0, false).unwrap();
        assert_eq!(rows.len(), 16);
        assert!((rows.iter().map(|r| r.probability).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((0.0..=4.0).contains(&h));
    }
}
