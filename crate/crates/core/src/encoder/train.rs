use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{MultiEncoder, SingleEncoder};
use super::network::{Network, ParamSet};
use super::{adam_step, cross_entropy_loss, AdamState, EncoderError, InputNorm, Scalar};
use crate::dsp::{MelFrontEnd, MelSpectrogram};
use crate::pit::pit_loss;
use crate::rng::{derive_seed, rng_for};
use crate::synth::{random_mix, AudioClip, ClipPool, MixConfig};

/// Samples per gradient work unit. Units are reduced in a fixed order, so
/// results do not depend on the number of worker threads.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SingleTrainConfig {
    fn default() -> Self {
        SingleTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.001,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Mixtures drawn per epoch when mixing on the fly.
    pub mixes_per_epoch: usize,
    pub mix: MixConfig,
    /// Directory receiving the cost matrix of each epoch's first mixture.
    pub dump_costs: Option<PathBuf>,
}

impl Default for MultiTrainConfig {
    fn default() -> Self {
        MultiTrainConfig {
            epochs: 10,
            batch_size: 128,
            lr: 0.001,
            seed: 0,
            mixes_per_epoch: 1024,
            mix: MixConfig::default(),
            dump_costs: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-example loss over the epoch, measured before each update.
    pub loss: f64,
    /// Running classification accuracy (single encoder only).
    pub accuracy: Option<f64>,
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<(), EncoderError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,loss,accuracy")?;
    for m in metrics {
        let acc = m.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", m.epoch, m.loss, acc)?;
    }
    out.flush()?;
    Ok(())
}

/// A prepared network input with its class index.
#[derive(Clone, Debug)]
pub struct LabeledInput<F> {
    pub input: Array3<F>,
    pub label: usize,
}

/// Log-mel of each clip in parallel.
pub(crate) fn mels(clips: &[&AudioClip], front: &MelFrontEnd) -> Result<Vec<MelSpectrogram>, EncoderError> {
    clips
        .par_iter()
        .map(|c| front.log_mel(c).map_err(EncoderError::from))
        .collect()
}

/// Fit the encoder's input normalization on `clips` and return prepared inputs.
pub fn single_training_set<F: Scalar>(
    encoder: &mut SingleEncoder<F>,
    clips: &[(&AudioClip, usize)],
) -> Result<Vec<LabeledInput<F>>, EncoderError> {
    if clips.is_empty() {
        return Err(EncoderError::EmptyDataset);
    }
    if let Some(&(_, label)) = clips.iter().find(|(_, l)| *l >= encoder.classes()) {
        return Err(EncoderError::LabelOutOfRange {
            label,
            classes: encoder.classes(),
        });
    }
    let front = MelFrontEnd::new(encoder.config.mel.clone())?;
    let audio: Vec<&AudioClip> = clips.iter().map(|(c, _)| *c).collect();
    let mels = mels(&audio, &front)?;
    encoder.norm = InputNorm::fit(&mels);
    mels.iter()
        .zip(clips)
        .map(|(m, &(_, label))| Ok(LabeledInput { input: encoder.input(m)?, label }))
        .collect()
}

#[derive(Clone, Copy, Default)]
struct Stats {
    loss: f64,
    correct: usize,
}

/// Summed gradients and statistics of `per_item` over `items`.
fn batch_gradients<F, T, G>(net: &Network<F>, items: &[T], per_item: G) -> Result<(ParamSet<F>, Stats), EncoderError>
where
    F: Scalar,
    T: Sync,
    G: Fn(&T, &mut ParamSet<F>) -> Result<Stats, EncoderError> + Sync,
{
    let parts: Vec<(ParamSet<F>, Stats)> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = net.params.zeros_like();
            let mut stats = Stats::default();
            for item in chunk {
                let s = per_item(item, &mut grads)?;
                stats.loss += s.loss;
                stats.correct += s.correct;
            }
            Ok((grads, stats))
        })
        .collect::<Result<_, EncoderError>>()?;
    let mut iter = parts.into_iter();
    let (mut total, mut stats) = iter.next().unwrap_or_else(|| (net.params.zeros_like(), Stats::default()));
    for (g, s) in iter {
        total.accumulate(&g);
        stats.loss += s.loss;
        stats.correct += s.correct;
    }
    Ok((total, stats))
}

fn argmax<F: Scalar>(v: &Array1<F>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn apply_update<F: Scalar>(
    net: &mut Network<F>,
    mut grads: ParamSet<F>,
    batch: usize,
    adam: &mut AdamState,
) -> Result<(), EncoderError> {
    grads.scale(F::from_f64(1.0 / batch as f64));
    if !grads.all_finite() {
        return Err(EncoderError::NonFinite("gradients".into()));
    }
    adam_step(&mut net.params, &grads, adam)
}

/// Minibatch Adam on softmax cross-entropy with a seeded shuffle per epoch.
pub fn train_single<F: Scalar>(
    encoder: &mut SingleEncoder<F>,
    data: &[LabeledInput<F>],
    config: &SingleTrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, EncoderError> {
    if data.is_empty() {
        return Err(EncoderError::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(EncoderError::InvalidConfig("batch_size must be positive".into()));
    }
    let classes = encoder.classes();
    if let Some(bad) = data.iter().find(|d| d.label >= classes) {
        return Err(EncoderError::LabelOutOfRange { label: bad.label, classes });
    }
    let mut adam = AdamState::new(&encoder.net.params, config.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(config.seed, "single-shuffle", epoch as u64));
        let mut loss = 0.0;
        let mut correct = 0;
        for batch in order.chunks(config.batch_size) {
            let enc = &*encoder;
            let (grads, stats) = batch_gradients(&enc.net, batch, |&i, grads| {
                let sample = &data[i];
                let (logits, tape) = enc.forward_with_tape(&sample.input)?;
                let (l, upstream) = cross_entropy_loss(&logits, sample.label)?;
                enc.net.backward_into(&tape, &upstream, grads)?;
                Ok(Stats {
                    loss: l,
                    correct: usize::from(argmax(&logits) == sample.label),
                })
            })?;
            loss += stats.loss;
            correct += stats.correct;
            apply_update(&mut encoder.net, grads, batch.len(), &mut adam)?;
        }
        let m = EpochMetrics {
            epoch,
            loss: loss / data.len() as f64,
            accuracy: Some(correct as f64 / data.len() as f64),
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Fraction of inputs whose arg-max logit is the label.
pub fn evaluate_accuracy<F: Scalar>(encoder: &SingleEncoder<F>, data: &[LabeledInput<F>]) -> Result<f64, EncoderError> {
    if data.is_empty() {
        return Err(EncoderError::EmptyDataset);
    }
    let correct: Vec<bool> = data
        .par_iter()
        .map(|d| Ok(argmax(&encoder.forward_input(&d.input)?.0) == d.label))
        .collect::<Result<_, EncoderError>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

/// A mixture with its isolated stems.
#[derive(Clone, Debug)]
pub struct MixExample {
    pub mixture: AudioClip,
    pub stems: Vec<AudioClip>,
}

/// Where multi-encoder training mixtures come from.
pub enum MixSource<'a> {
    /// A fixed, pre-rendered set, shuffled each epoch.
    Fixed(&'a [MixExample]),
    /// Fresh random mixtures from a clip pool every epoch.
    Random(&'a ClipPool),
}

struct Prepared<F> {
    input: Array3<F>,
    targets: Array2<f64>,
}

fn stack_targets(rows: &[&Array1<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

fn frozen_targets<F: Scalar>(
    frozen: &SingleEncoder<F>,
    front: &MelFrontEnd,
    clips: &[&AudioClip],
) -> Result<Vec<Array1<f64>>, EncoderError> {
    mels(clips, front)?
        .par_iter()
        .map(|m| Ok(frozen.embed(m)?.mapv(|v| v.as_f64())))
        .collect()
}

enum Stream<'a, F> {
    Fixed(Vec<Prepared<F>>),
    Random {
        pool: &'a ClipPool,
        targets: Vec<Array1<f64>>,
        front: MelFrontEnd,
        mix: MixConfig,
        seed: u64,
        per_epoch: usize,
    },
}

impl<F: Scalar> Stream<'_, F> {
    fn len(&self) -> usize {
        match self {
            Stream::Fixed(v) => v.len(),
            Stream::Random { per_epoch, .. } => *per_epoch,
        }
    }

    /// Run `f` on example `k` of `epoch`.
    fn with<R>(
        &self,
        epoch: usize,
        k: usize,
        multi: &MultiEncoder<F>,
        f: impl FnOnce(&Prepared<F>) -> Result<R, EncoderError>,
    ) -> Result<R, EncoderError> {
        match self {
            Stream::Fixed(v) => f(&v[k]),
            Stream::Random {
                pool,
                targets,
                front,
                mix,
                seed,
                per_epoch,
            } => {
                let mix_seed = derive_seed(*seed, "mix", (epoch * per_epoch + k) as u64);
                let drawn = random_mix(pool, *mix, mix_seed)?;
                let mel = front.log_mel(&drawn.mixture)?;
                let rows: Vec<&Array1<f64>> = drawn.plan.clip_indices.iter().map(|&i| &targets[i]).collect();
                f(&Prepared {
                    input: multi.input(&mel)?,
                    targets: stack_targets(&rows),
                })
            }
        }
    }
}

/// Trains against the frozen single encoder's embeddings of the stems with
/// the permutation-invariant cosine loss. The multi encoder adopts the
/// frozen encoder's input normalization.
pub fn train_multi<F: Scalar>(
    multi: &mut MultiEncoder<F>,
    frozen: Option<&SingleEncoder<F>>,
    source: MixSource<'_>,
    config: &MultiTrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, EncoderError> {
    let frozen = frozen.ok_or(EncoderError::FrozenEncoderMissing)?;
    if frozen.embedding_dim() != multi.embedding_dim() || frozen.config.mel != multi.config.mel {
        return Err(EncoderError::ShapeMismatch {
            expected: vec![frozen.embedding_dim()],
            got: vec![multi.embedding_dim()],
        });
    }
    if config.batch_size == 0 {
        return Err(EncoderError::InvalidConfig("batch_size must be positive".into()));
    }
    multi.norm = frozen.norm;
    let front = MelFrontEnd::new(multi.config.mel.clone())?;
    let stream = match source {
        MixSource::Fixed(examples) => {
            if examples.is_empty() {
                return Err(EncoderError::EmptyDataset);
            }
            let mixtures: Vec<&AudioClip> = examples.iter().map(|e| &e.mixture).collect();
            let inputs = mels(&mixtures, &front)?;
            let stems: Vec<&AudioClip> = examples.iter().flat_map(|e| &e.stems).collect();
            let targets = frozen_targets(frozen, &front, &stems)?;
            let mut offset = 0;
            let mut prepared = Vec::with_capacity(examples.len());
            for (e, mel) in examples.iter().zip(&inputs) {
                let rows: Vec<&Array1<f64>> = targets[offset..offset + e.stems.len()].iter().collect();
                offset += e.stems.len();
                if rows.is_empty() || rows.len() > multi.slots {
                    return Err(EncoderError::InvalidConfig(format!(
                        "mixture with {} stems does not fit {} output slots",
                        rows.len(),
                        multi.slots
                    )));
                }
                prepared.push(Prepared {
                    input: multi.input(mel)?,
                    targets: stack_targets(&rows),
                });
            }
            Stream::Fixed(prepared)
        }
        MixSource::Random(pool) => {
            if pool.clips.is_empty() || config.mixes_per_epoch == 0 {
                return Err(EncoderError::EmptyDataset);
            }
            if config.mix.max_instruments > multi.slots {
                return Err(EncoderError::InvalidConfig(format!(
                    "mixtures of up to {} instruments exceed {} output slots",
                    config.mix.max_instruments, multi.slots
                )));
            }
            let clips: Vec<&AudioClip> = pool.clips.iter().map(|c| &c.clip).collect();
            let targets = frozen_targets(frozen, &front, &clips)?;
            Stream::Random {
                pool,
                targets,
                front,
                mix: config.mix,
                seed: config.seed,
                per_epoch: config.mixes_per_epoch,
            }
        }
    };
    if let Some(dir) = &config.dump_costs {
        std::fs::create_dir_all(dir)?;
    }

    let mut adam = AdamState::new(&multi.net.params, config.lr);
    let mut order: Vec<usize> = (0..stream.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng_for(config.seed, "multi-shuffle", epoch as u64));
        if let Some(dir) = &config.dump_costs {
            let csv = stream.with(epoch, order[0], multi, |item| {
                let out = multi.forward_input(&item.input)?.mapv(|v| v.as_f64());
                Ok(pit_loss(item.targets.view(), out.view())?.cost.to_csv())
            })?;
            std::fs::write(dir.join(format!("costs_epoch{epoch:04}.csv")), csv)?;
        }
        let mut loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let enc = &*multi;
            let (grads, stats) = batch_gradients(&enc.net, batch, |&k, grads| {
                stream.with(epoch, k, enc, |item| {
                    let (flat, tape) = enc.net.forward_with_tape(&item.input)?;
                    let outputs = enc.reshape(flat).mapv(|v| v.as_f64());
                    let result = pit_loss(item.targets.view(), outputs.view())?;
                    let upstream: Array1<F> = result.grads.iter().map(|&g| F::from_f64(g)).collect();
                    enc.net.backward_into(&tape, &upstream, grads)?;
                    Ok(Stats {
                        loss: result.loss,
                        correct: 0,
                    })
                })
            })?;
            loss += stats.loss;
            apply_update(&mut multi.net, grads, batch.len(), &mut adam)?;
        }
        let m = EpochMetrics {
            epoch,
            loss: loss / stream.len() as f64,
            accuracy: None,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Mean PIT loss of `multi` on fixed examples, with targets from `frozen`.
pub fn evaluate_pit_loss<F: Scalar>(
    multi: &MultiEncoder<F>,
    frozen: &SingleEncoder<F>,
    examples: &[MixExample],
) -> Result<f64, EncoderError> {
    if examples.is_empty() {
        return Err(EncoderError::EmptyDataset);
    }
    let front = MelFrontEnd::new(multi.config.mel.clone())?;
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| {
            let stems: Vec<&AudioClip> = e.stems.iter().collect();
            let targets = frozen_targets(frozen, &front, &stems)?;
            let rows: Vec<&Array1<f64>> = targets.iter().collect();
            let out = multi.forward_multi(&front.log_mel(&e.mixture)?)?.mapv(|v| v.as_f64());
            Ok(pit_loss(stack_targets(&rows).view(), out.view())?.loss)
        })
        .collect::<Result<_, EncoderError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
