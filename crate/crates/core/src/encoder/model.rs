use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::network::{Network, Tape};
use super::{layers, EncoderConfig, EncoderError, Scalar};
use crate::dsp::{log_mel, MelSpectrogram};
use crate::rng::rng_for;
use crate::synth::AudioClip;

/// Default number of output slots of the multi encoder.
pub const DEFAULT_SLOTS: usize = 9;

/// Global standardization applied to log-mel inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        InputNorm { mean: 0.0, std: 1.0 }
    }
}

impl InputNorm {
    /// Mean and standard deviation over every cell of every spectrogram.
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> InputNorm {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for m in mels {
            for &v in &m.values {
                n += 1;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0 {
            return InputNorm::default();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        InputNorm {
            mean,
            std: if var > 1e-12 { var.sqrt() } else { 1.0 },
        }
    }

    /// Standardized `(1, frames, bins)` network input.
    pub fn apply<F: Scalar>(&self, mel: &MelSpectrogram) -> Array3<F> {
        let (t, f) = mel.values.dim();
        Array3::from_shape_fn((1, t, f), |(_, i, j)| F::from_f64((mel.values[[i, j]] - self.mean) / self.std))
    }
}

fn check_mel(config: &EncoderConfig, mel: &MelSpectrogram) -> Result<(), EncoderError> {
    let want = config.input_shape();
    if mel.values.dim() != want || mel.config != config.mel {
        return Err(EncoderError::ShapeMismatch {
            expected: vec![want.0, want.1],
            got: vec![mel.frames(), mel.bins()],
        });
    }
    Ok(())
}

/// Classifier over training instruments; the embedding is the input of the
/// final (head) layer.
#[derive(Clone, Debug)]
pub struct SingleEncoder<F> {
    pub config: EncoderConfig,
    pub labels: Vec<String>,
    pub norm: InputNorm,
    pub net: Network<F>,
}

impl<F: Scalar> SingleEncoder<F> {
    /// All weights and biases zero.
    pub fn zeros(config: EncoderConfig, labels: Vec<String>) -> Result<Self, EncoderError> {
        config.validate()?;
        if labels.is_empty() {
            return Err(EncoderError::EmptyDataset);
        }
        let net = Network::zeros(config.architecture(&[config.embedding_dim, labels.len()]))?;
        Ok(SingleEncoder {
            config,
            labels,
            norm: InputNorm::default(),
            net,
        })
    }

    pub fn new(config: EncoderConfig, labels: Vec<String>, seed: u64) -> Result<Self, EncoderError> {
        let mut enc = Self::zeros(config, labels)?;
        enc.net.init(&mut rng_for(seed, "single-init", 0));
        Ok(enc)
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn head_layer(&self) -> usize {
        self.net.last_dense()
    }

    /// Head weight `(classes, D)` and bias `(classes,)`.
    pub fn head(&self) -> (ndarray::ArrayView2<'_, F>, ndarray::ArrayView1<'_, F>) {
        let tensors = &self.net.params.tensors;
        let n = tensors.len();
        (tensors[n - 2].matrix(), tensors[n - 1].vector())
    }

    pub fn input(&self, mel: &MelSpectrogram) -> Result<Array3<F>, EncoderError> {
        check_mel(&self.config, mel)?;
        Ok(self.norm.apply(mel))
    }

    /// `(logits, embedding)` for a prepared input.
    pub fn forward_input(&self, input: &Array3<F>) -> Result<(Array1<F>, Array1<F>), EncoderError> {
        let embedding = self.net.forward_partial(input, self.head_layer())?;
        let (w, b) = self.head();
        let logits = layers::dense_forward(&embedding, w, b);
        Ok((logits, embedding))
    }

    pub fn forward_single(&self, mel: &MelSpectrogram) -> Result<(Array1<F>, Array1<F>), EncoderError> {
        self.forward_input(&self.input(mel)?)
    }

    /// Logits with a tape for [`Network::backward`]; the embedding is `tape`'s head input.
    pub fn forward_with_tape(&self, input: &Array3<F>) -> Result<(Array1<F>, Tape<F>), EncoderError> {
        self.net.forward_with_tape(input)
    }

    pub fn embedding_from_tape<'t>(&self, tape: &'t Tape<F>) -> Option<&'t Array1<F>> {
        tape.dense_input(self.head_layer())
    }

    pub fn embed(&self, mel: &MelSpectrogram) -> Result<Array1<F>, EncoderError> {
        Ok(self.forward_single(mel)?.1)
    }

    pub fn embed_clip(&self, clip: &AudioClip) -> Result<Array1<F>, EncoderError> {
        self.embed(&log_mel(clip, &self.config.mel)?)
    }
}

/// Emits `slots` embeddings of width D from one input.
#[derive(Clone, Debug)]
pub struct MultiEncoder<F> {
    pub config: EncoderConfig,
    pub slots: usize,
    pub norm: InputNorm,
    pub net: Network<F>,
}

impl<F: Scalar> MultiEncoder<F> {
    pub fn zeros(config: EncoderConfig, slots: usize) -> Result<Self, EncoderError> {
        config.validate()?;
        if slots == 0 {
            return Err(EncoderError::InvalidConfig("the multi encoder needs at least one slot".into()));
        }
        let net = Network::zeros(config.architecture(&[slots * config.embedding_dim]))?;
        Ok(MultiEncoder {
            config,
            slots,
            norm: InputNorm::default(),
            net,
        })
    }

    pub fn new(config: EncoderConfig, slots: usize, seed: u64) -> Result<Self, EncoderError> {
        let mut enc = Self::zeros(config, slots)?;
        enc.net.init(&mut rng_for(seed, "multi-init", 0));
        Ok(enc)
    }

    /// Start from a trained single encoder: the trunk is copied and every
    /// slot of the output layer starts as the single encoder's embedding
    /// layer, perturbed by seeded noise (`noise` times the layer's RMS
    /// weight) so that slots can diverge.
    pub fn warm_start(single: &SingleEncoder<F>, slots: usize, noise: f64, seed: u64) -> Result<Self, EncoderError> {
        let mut enc = Self::zeros(single.config.clone(), slots)?;
        enc.norm = single.norm;
        let src = &single.net.params.tensors;
        let dst = &mut enc.net.params.tensors;
        // Single: trunk.., embedding (w, b), head (w, b). Multi: trunk.., output (w, b).
        let trunk = dst.len() - 2;
        for (d, s) in dst[..trunk].iter_mut().zip(&src[..trunk]) {
            d.data.clone_from(&s.data);
        }
        let (ew, eb) = (&src[trunk], &src[trunk + 1]);
        let rms = (ew.data.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / ew.data.len().max(1) as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, (noise * rms).max(0.0)).expect("finite std");
        let mut rng = rng_for(seed, "multi-warm-start", 0);
        for (i, v) in dst[trunk].data.iter_mut().enumerate() {
            let base = ew.data[i % ew.data.len()].as_f64();
            *v = F::from_f64(base + rand_distr::Distribution::sample(&normal, &mut rng));
        }
        for (i, v) in dst[trunk + 1].data.iter_mut().enumerate() {
            *v = eb.data[i % eb.data.len()];
        }
        enc.net.params.bump();
        Ok(enc)
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn input(&self, mel: &MelSpectrogram) -> Result<Array3<F>, EncoderError> {
        check_mel(&self.config, mel)?;
        Ok(self.norm.apply(mel))
    }

    /// Row `j` of the result is slot `j`.
    pub fn reshape(&self, flat: Array1<F>) -> Array2<F> {
        flat.into_shape_with_order((self.slots, self.config.embedding_dim))
            .expect("final layer width is slots * D")
    }

    pub fn forward_input(&self, input: &Array3<F>) -> Result<Array2<F>, EncoderError> {
        Ok(self.reshape(self.net.forward(input)?))
    }

    pub fn forward_multi(&self, mel: &MelSpectrogram) -> Result<Array2<F>, EncoderError> {
        self.forward_input(&self.input(mel)?)
    }

    pub fn embed_clip(&self, clip: &AudioClip) -> Result<Array2<F>, EncoderError> {
        self.forward_multi(&log_mel(clip, &self.config.mel)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::SizePreset;

    fn toy_config(d: usize) -> EncoderConfig {
        EncoderConfig {
            clip_samples: 1024 + 512 * 15,
            conv_channels: vec![2, 3],
            hidden: vec![6],
            ..EncoderConfig::preset(SizePreset::Small, d)
        }
    }

    fn mel(config: &EncoderConfig, offset: f64) -> MelSpectrogram {
        let (t, f) = config.input_shape();
        MelSpectrogram {
            values: Array2::from_shape_fn((t, f), |(i, j)| ((i * 7 + j * 3) as f64 * 0.1 + offset).sin()),
            config: config.mel.clone(),
        }
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let config = toy_config(8);
        let mut enc = SingleEncoder::<f64>::zeros(config.clone(), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let n = enc.net.params.tensors.len();
        enc.net.params.tensors[n - 1].data = vec![0.5, -1.0, 2.0];
        let (logits, emb) = enc.forward_single(&mel(&config, 0.0)).unwrap();
        assert_eq!(logits.to_vec(), vec![0.5, -1.0, 2.0]);
        assert_eq!(emb.len(), 8);
    }

    #[test]
    fn full_size_embedding_width() {
        let enc = SingleEncoder::<f32>::zeros(EncoderConfig::default(), vec!["a".into()]).unwrap();
        assert_eq!(enc.embedding_dim(), 1024);
        let (w, _) = enc.head();
        assert_eq!(w.dim(), (1, 1024));
    }

    #[test]
    fn multi_shapes() {
        let config = toy_config(8);
        for slots in [1, 4, DEFAULT_SLOTS] {
            let enc = MultiEncoder::<f64>::new(config.clone(), slots, 3).unwrap();
            assert_eq!(enc.forward_multi(&mel(&config, 0.3)).unwrap().dim(), (slots, 8));
        }
    }

    #[test]
    fn wrong_input_shape() {
        let config = toy_config(8);
        let enc = MultiEncoder::<f64>::new(config.clone(), 2, 3).unwrap();
        let mut m = mel(&config, 0.0);
        m.values = Array2::zeros((3, 64));
        assert!(matches!(enc.forward_multi(&m), Err(EncoderError::ShapeMismatch { .. })));
    }

    #[test]
    fn small_embedding_rejected() {
        assert!(matches!(
            SingleEncoder::<f32>::zeros(toy_config(4), vec!["a".into()]),
            Err(EncoderError::InvalidConfig(_))
        ));
    }
}
