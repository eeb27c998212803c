//! Synthetic multimodal datasets, Dirichlet partitioning and mini-batching.

mod export;
mod partition;

pub use export::{export_dataset, import_dataset, write_partition_csv};
pub use partition::{dirichlet_partition, BatchIter, Partition};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Inputs, Modality, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataTask {
    Classification,
    Retrieval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub task: DataTask,
    pub modalities: Vec<Modality>,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub num_pairs: usize,
    pub signal: f64,
    pub noise: f64,
    pub seed: u64,
    pub image_size: usize,
    pub image_channels: usize,
    pub audio_len: usize,
    pub vocab_size: usize,
    pub text_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            task: DataTask::Classification,
            modalities: vec![Modality::Vision, Modality::Text],
            num_classes: 4,
            samples_per_class: 50,
            num_pairs: 200,
            signal: 1.0,
            noise: 0.5,
            seed: 0,
            image_size: 8,
            image_channels: 1,
            audio_len: 256,
            vocab_size: 32,
            text_len: 8,
        }
    }
}

impl SyntheticSpec {
    /// Copies modality shapes and the task from a model config.
    pub fn matching(mut self, cfg: &ModelConfig) -> Self {
        self.modalities = cfg.modalities.clone();
        self.image_size = cfg.image_size;
        self.image_channels = cfg.image_channels;
        self.audio_len = cfg.audio_len;
        self.vocab_size = cfg.vocab_size;
        self.text_len = cfg.text_len;
        match cfg.task {
            crate::model::Task::Classification { num_classes } => {
                self.task = DataTask::Classification;
                self.num_classes = num_classes;
            }
            crate::model::Task::Retrieval { .. } => self.task = DataTask::Retrieval,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.modalities.is_empty() {
            return fail("data.modalities must list at least one modality".into());
        }
        if !(self.signal > 0.0) {
            return fail(format!("data.signal must be positive, got {}", self.signal));
        }
        if !(0.0..=1.0).contains(&self.noise) && self.modalities.contains(&Modality::Text) {
            return fail(format!("data.noise must lie in [0, 1] when text is generated, got {}", self.noise));
        }
        if self.noise < 0.0 {
            return fail(format!("data.noise must be non-negative, got {}", self.noise));
        }
        match self.task {
            DataTask::Classification => {
                if self.num_classes < 2 {
                    return fail("data.num_classes must be >= 2".into());
                }
                if self.samples_per_class == 0 {
                    return fail("data.samples_per_class must be positive".into());
                }
            }
            DataTask::Retrieval => {
                if self.num_pairs < 2 {
                    return fail("data.num_pairs must be >= 2".into());
                }
                if self.modalities != [Modality::Vision, Modality::Text] {
                    return fail("retrieval data pairs vision with text".into());
                }
            }
        }
        if self.modalities.contains(&Modality::Text) && self.vocab_size < 2 {
            return fail("data.vocab_size must be >= 2".into());
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.image_channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    /// Class index, or pair id for retrieval.
    pub labels: Vec<usize>,
    pub vision: Option<Vec<f64>>,
    pub audio: Option<Vec<f64>>,
    pub text: Option<Vec<usize>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        match self.spec.task {
            DataTask::Classification => self.spec.num_classes,
            DataTask::Retrieval => self.spec.num_pairs,
        }
    }

    /// Raw inputs for the given sample indices, in order.
    pub fn inputs(&self, idx: &[usize]) -> Inputs {
        let gather_f = |buf: &Vec<f64>, width: usize| -> Vec<f64> {
            idx.iter().flat_map(|&i| buf[i * width..(i + 1) * width].iter().copied()).collect()
        };
        let s = &self.spec;
        Inputs {
            size: idx.len(),
            vision: self.vision.as_ref().map(|v| gather_f(v, s.pixels())),
            audio: self.audio.as_ref().map(|a| gather_f(a, s.audio_len)),
            text: self
                .text
                .as_ref()
                .map(|t| idx.iter().flat_map(|&i| t[i * s.text_len..(i + 1) * s.text_len].iter().copied()).collect()),
            text_tokens: s.text_len,
        }
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates a dataset from `spec`, fully determined by `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ds = match spec.task {
        DataTask::Classification => classification(spec, &mut rng),
        DataTask::Retrieval => retrieval(spec, &mut rng),
    };
    Ok(ds)
}

fn classification(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Dataset {
    let c = spec.num_classes;
    let px = spec.pixels();
    let has = |m| spec.modalities.contains(&m);
    let vision_protos: Vec<Vec<f64>> = (0..c).map(|_| (0..px).map(|_| normal(rng)).collect()).collect();
    let audio_protos: Vec<Vec<(f64, f64)>> = (0..c)
        .map(|_| {
            (0..3)
                .map(|_| (rng.random_range(1..31) as f64, rng.random_range(0.5..1.0)))
                .collect()
        })
        .collect();
    let text_protos: Vec<Vec<usize>> = (0..c)
        .map(|_| (0..spec.text_len).map(|_| rng.random_range(0..spec.vocab_size.max(1))).collect())
        .collect();

    let n = c * spec.samples_per_class;
    let mut labels = Vec::with_capacity(n);
    let mut vision = has(Modality::Vision).then(|| Vec::with_capacity(n * px));
    let mut audio = has(Modality::Audio).then(|| Vec::with_capacity(n * spec.audio_len));
    let mut text = has(Modality::Text).then(|| Vec::with_capacity(n * spec.text_len));
    for class in 0..c {
        for _ in 0..spec.samples_per_class {
            labels.push(class);
            if let Some(v) = vision.as_mut() {
                for &p in &vision_protos[class] {
                    v.push(spec.signal * p + spec.noise * normal(rng));
                }
            }
            if let Some(a) = audio.as_mut() {
                let phases: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
                for t in 0..spec.audio_len {
                    let mut x = 0.0;
                    for ((bin, amp), ph) in audio_protos[class].iter().zip(&phases) {
                        x += amp * (std::f64::consts::TAU * bin * t as f64 / 64.0 + ph).sin();
                    }
                    a.push(spec.signal * x + spec.noise * normal(rng));
                }
            }
            if let Some(tx) = text.as_mut() {
                for &tok in &text_protos[class] {
                    let keep = rng.random::<f64>() >= spec.noise;
                    tx.push(if keep { tok } else { rng.random_range(0..spec.vocab_size) });
                }
            }
        }
    }
    let (train, test) = stratified_split(&labels, c, rng);
    Dataset { spec: spec.clone(), labels, vision, audio, text, train, test }
}

fn retrieval(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Dataset {
    let k = spec.text_len.max(1);
    let px = spec.pixels();
    let mix: Vec<f64> = (0..px * k).map(|_| normal(rng) / (k as f64).sqrt()).collect();
    let per_pos = (spec.vocab_size / k).max(1);
    let n = spec.num_pairs;
    let mut vision = Vec::with_capacity(n * px);
    let mut text = Vec::with_capacity(n * spec.text_len);
    for _ in 0..n {
        let z: Vec<f64> = (0..k).map(|_| normal(rng)).collect();
        for p in 0..px {
            let x: f64 = (0..k).map(|j| mix[p * k + j] * z[j]).sum();
            vision.push(spec.signal * x + spec.noise * normal(rng));
        }
        for (pos, &zi) in z.iter().enumerate().take(spec.text_len) {
            let u = 0.5 * (1.0 + (0.8 * zi).tanh());
            let bin = ((u * per_pos as f64) as usize).min(per_pos - 1);
            let tok = (pos * per_pos + bin) % spec.vocab_size;
            let keep = rng.random::<f64>() >= spec.noise;
            text.push(if keep { tok } else { rng.random_range(0..spec.vocab_size) });
        }
    }
    let labels: Vec<usize> = (0..n).collect();
    let mut order = labels.clone();
    order.shuffle(rng);
    let cut = (n * 4).div_ceil(5).min(n - 1);
    let mut train = order[..cut].to_vec();
    let mut test = order[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Dataset {
        spec: spec.clone(),
        labels,
        vision: Some(vision),
        audio: None,
        text: Some(text),
        train,
        test,
    }
}

/// 80/20 split within each class.
fn stratified_split(labels: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let cut = if idx.len() < 2 { idx.len() } else { (idx.len() * 4 / 5).max(1) };
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Seed for client `n`'s batch stream; the centralized trainer uses `n = 0`.
pub fn stream_seed(seed: u64, client: u32) -> u64 {
    seed ^ (u64::from(client) + 1).wrapping_mul(0xA076_1D64_78BD_642F)
}
