use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Sample;
use super::loss::loss;
use super::metrics::Metrics;
use super::optim::{adamw_step, AdamHyper, AdamState};
use super::schedule::{lr_at, wd_at, TrainConfig};
use crate::error::{Error, Result};
use crate::mm_unet::{load_checkpoint, save_checkpoint, MmUnet, NetworkConfig};
use crate::ndgrad::{resize_bilinear, Tape, Tensor, Var};
use crate::params::ParamStore;

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: MmUnet,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        let (net, params) = MmUnet::new(config)?;
        Ok(Self { net, params })
    }

    pub fn from_params(params: ParamStore<f32>, input_hw: (usize, usize)) -> Result<Self> {
        let net = MmUnet::from_params(&params, input_hw)?;
        Ok(Self { net, params })
    }

    pub fn load(path: &Path, input_hw: (usize, usize)) -> Result<Self> {
        Self::from_params(load_checkpoint(path)?, input_hw)
    }

    /// Probability maps `[B, 1, H, W]` for a batch `[B, 3, H, W]`.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let art = self.net.forward(&bound, tape.constant(images.clone()))?;
        let p = art.probability.value();
        Ok(Tensor::clone(&p))
    }
}

struct Batch {
    images: Tensor<f32>,
    masks: Tensor<f32>,
    fov: Option<Tensor<f32>>,
    ids: Vec<String>,
}

fn stack(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_parts(shape, data)
}

fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let (h, w) = (samples[0].height(), samples[0].width());
    if let Some(s) = samples.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::Config(format!("sample {} is {}x{}, expected {h}x{w}", s.id, s.height(), s.width())));
    }
    let images = stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>());
    let masks = stack(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>());
    let fov = if samples.iter().any(|s| s.fov.is_some()) {
        let ones = Tensor::full(&[1, h, w], 1.0f32);
        Some(stack(&samples.iter().map(|s| s.fov.as_ref().unwrap_or(&ones)).collect::<Vec<_>>()))
    } else {
        None
    };
    Ok(Batch {
        images,
        masks,
        fov,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}

fn batch_metrics(pred: &[f32], batch: &Batch, threshold: f64) -> Metrics {
    Metrics::from_maps(pred, batch.masks.data(), batch.fov.as_ref().map(|f| f.data()), threshold)
}

/// Confusion-count metrics over `samples`, inside the field of view when
/// one is present.
pub fn evaluate(model: &Model, samples: &[Sample], threshold: f64) -> Result<Metrics> {
    let mut total = Metrics::default();
    for chunk in samples.chunks(4) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let pred = model.predict(&batch.images)?;
        total += batch_metrics(pred.data(), &batch, threshold);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wd: f64,
    /// F1 of the predictions made while training during this epoch.
    pub f1_train: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,lr,wd,f1_train";

    pub fn csv_row(&self) -> String {
        format!("{},{:.8},{:.6e},{:.6},{:.6}", self.epoch, self.loss, self.lr, self.wd, self.f1_train)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_f1: f64,
    pub best_epoch: usize,
    pub model: Model,
}

fn step_loss<'t>(
    tape: &'t Tape<f32>,
    model: &Model,
    bound: &crate::params::Bound<'t, f32>,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(Var<'t, f32>, Var<'t, f32>)> {
    let art = model.net.forward(bound, tape.constant(batch.images.clone()))?;
    let mut total = loss(art.probability, &batch.masks, batch.fov.as_ref(), config.loss_kind)?;
    if config.deep_supervision {
        let (h, w) = (batch.masks.shape()[2], batch.masks.shape()[3]);
        let n = art.side_logits.len() as f64;
        for &side in &art.side_logits {
            let p = resize_bilinear(side, h, w)?.sigmoid();
            total = total.add(loss(p, &batch.masks, batch.fov.as_ref(), config.loss_kind)?.scale(1.0 / n))?;
        }
    }
    Ok((total, art.probability))
}

/// Trains `model` on `dataset`. When `out_dir` is given it receives
/// `train_log.csv`, `best.mmun` (highest `f1_train`) and `final.mmun`.
pub fn train(
    mut model: Model,
    dataset: &[Sample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("train_log.csv"))?;
            writeln!(f, "{}", EpochLog::CSV_HEADER)?;
            Some(f)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut state = AdamState::new();
    let mut log = Vec::with_capacity(config.epochs);
    let (mut best_f1, mut best_epoch) = (f64::NEG_INFINITY, 0);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config)?;
        let wd = wd_at(epoch, config)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut counts = Metrics::default();
        for idx in order.chunks(config.batch_size) {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &dataset[i]).collect();
            let batch = make_batch(&refs)?;
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let (l, prob) = step_loss(&tape, &model, &bound, &batch, config)?;
            let lv = l.value().data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    loss: lv,
                    epoch,
                    ids: batch.ids.join(", "),
                });
            }
            counts += batch_metrics(prob.value().data(), &batch, config.threshold);
            let grads = tape.backward(l)?;
            let gs: Vec<Vec<f32>> = bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
            drop(grads);
            drop(bound);
            let refs: Vec<&[f32]> = gs.iter().map(Vec::as_slice).collect();
            let hp = AdamHyper {
                lr,
                wd,
                betas: config.betas,
                eps: config.eps,
            };
            adamw_step(model.params.tensors_mut(), &refs, &mut state, hp)?;
            loss_sum += lv * idx.len() as f64;
            seen += idx.len();
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            lr,
            wd,
            f1_train: counts.f1,
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", entry.csv_row())?;
        }
        if entry.f1_train > best_f1 {
            best_f1 = entry.f1_train;
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                save_checkpoint(&model.params, &dir.join("best.mmun"))?;
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&model.params, &dir.join("final.mmun"))?;
    }
    Ok(TrainReport {
        log,
        best_f1,
        best_epoch,
        model,
    })
}
