use mpsl_tensor::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Audio,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Early,
    Late,
}

/// How late fusion summarizes each independently encoded modality before
/// the shared pooling step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LateSummary {
    /// Every encoded token of every modality enters the pool.
    #[default]
    Tokens,
    /// Only each modality's encoded cls token enters the pool.
    Cls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Task {
    Classification { num_classes: usize },
    Retrieval { proj_dim: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// ViT shape presets as (embed_dim, depth, heads).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Ti,
    S,
    B,
    L,
    H,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Ti, Preset::S, Preset::B, Preset::L, Preset::H];

    pub fn shape(self) -> (usize, usize, usize) {
        match self {
            Preset::Ti => (192, 12, 3),
            Preset::S => (384, 12, 6),
            Preset::B => (768, 12, 12),
            Preset::L => (1024, 24, 16),
            Preset::H => (1280, 32, 16),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ti => "Ti",
            Preset::S => "S",
            Preset::B => "B",
            Preset::L => "L",
            Preset::H => "H",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (expected Ti, S, B, L or H)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub audio_len: usize,
    pub audio_frame: usize,
    pub audio_hop: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub task: Task,
    pub freeze_first_k: usize,
    pub freeze_tokenizers: bool,
    pub train_token_table: bool,
    pub fusion: Fusion,
    pub late_summary: LateSummary,
    pub precision: Precision,
    pub preset: Option<Preset>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: vec![Modality::Vision, Modality::Text],
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            patch_size: 4,
            image_size: 8,
            image_channels: 1,
            audio_len: 256,
            audio_frame: 64,
            audio_hop: 32,
            vocab_size: 32,
            text_len: 8,
            task: Task::Classification { num_classes: 4 },
            freeze_first_k: 0,
            freeze_tokenizers: false,
            train_token_table: true,
            fusion: Fusion::Early,
            late_summary: LateSummary::Tokens,
            precision: Precision::F32,
            preset: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// ViT-B/16-like vision+text configuration used for the analytic cost
    /// comparisons: 224² images, 77-token text over a frozen 49408-entry
    /// token table, and only the last half of the encoder trainable.
    pub fn full_scale(preset: Preset) -> Self {
        let (d, l, h) = preset.shape();
        Self {
            modalities: vec![Modality::Vision, Modality::Text],
            embed_dim: d,
            depth: l,
            heads: h,
            mlp_ratio: 4,
            patch_size: 16,
            image_size: 224,
            image_channels: 3,
            audio_len: 16000,
            audio_frame: 64,
            audio_hop: 32,
            vocab_size: 49408,
            text_len: 77,
            task: Task::Classification { num_classes: 10 },
            freeze_first_k: l / 2,
            freeze_tokenizers: false,
            train_token_table: false,
            fusion: Fusion::Early,
            late_summary: LateSummary::Tokens,
            precision: Precision::F32,
            preset: Some(preset),
            init_seed: 0,
        }
    }

    /// Applies the preset shape, if any, and checks every structural
    /// constraint.
    pub fn resolved(&self) -> Result<ModelConfig> {
        let mut c = self.clone();
        if let Some(p) = c.preset {
            let (d, l, h) = p.shape();
            c.embed_dim = d;
            c.depth = l;
            c.heads = h;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.modalities.is_empty() {
            return fail("model.modalities must list at least one modality".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return fail(format!("model.modalities has duplicates: {:?}", self.modalities));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "model.embed_dim ({}) must be a positive multiple of model.heads ({})",
                self.embed_dim, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return fail("model.mlp_ratio must be positive".into());
        }
        if self.freeze_first_k > self.depth {
            return fail(format!(
                "model.freeze_first_k ({}) exceeds model.depth ({})",
                self.freeze_first_k, self.depth
            ));
        }
        if self.patch_size == 0 {
            return fail("model.patch_size must be positive".into());
        }
        if self.has(Modality::Vision)
            && (self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) || self.image_channels == 0) {
                return fail(format!(
                    "model.image_size ({}) must be a positive multiple of model.patch_size ({})",
                    self.image_size, self.patch_size
                ));
            }
        if self.has(Modality::Audio) {
            if self.audio_frame < 2 || self.audio_hop == 0 {
                return fail("model.audio_frame must be >= 2 and model.audio_hop positive".into());
            }
            if !(self.audio_frame / 2).is_multiple_of(self.patch_size) {
                return fail(format!(
                    "model.audio_frame/2 ({}) must be a multiple of model.patch_size ({})",
                    self.audio_frame / 2,
                    self.patch_size
                ));
            }
            if self.audio_len < self.audio_frame {
                return fail(format!(
                    "model.audio_len ({}) is shorter than one frame ({})",
                    self.audio_len, self.audio_frame
                ));
            }
        }
        if self.has(Modality::Text) && self.vocab_size == 0 {
            return fail("model.vocab_size must be positive".into());
        }
        match self.task {
            Task::Classification { num_classes } if num_classes < 2 => {
                return fail("model.task.num_classes must be >= 2".into());
            }
            Task::Retrieval { proj_dim } => {
                if proj_dim == 0 {
                    return fail("model.task.proj_dim must be positive".into());
                }
                if self.modalities.len() != 2 {
                    return fail("retrieval needs exactly two modalities".into());
                }
                if self.fusion == Fusion::Early {
                    return fail("retrieval encodes modalities independently; set model.fusion = \"late\"".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn has(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn audio_bins(&self) -> usize {
        self.audio_frame / 2
    }

    pub fn audio_frames(&self) -> usize {
        if self.audio_len < self.audio_frame {
            return 0;
        }
        1 + (self.audio_len - self.audio_frame) / self.audio_hop
    }

    /// Time frames after zero-padding to a multiple of the patch size.
    pub fn audio_frames_padded(&self) -> usize {
        self.audio_frames().div_ceil(self.patch_size) * self.patch_size
    }

    /// Number of patch tokens (excluding cls) a modality produces.
    pub fn patches(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => (self.image_size / self.patch_size).pow(2),
            Modality::Audio => (self.audio_bins() / self.patch_size) * (self.audio_frames_padded() / self.patch_size),
            Modality::Text => self.text_len,
        }
    }

    /// Flattened length of one patch.
    pub fn patch_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => self.patch_size * self.patch_size * self.image_channels,
            Modality::Audio => self.patch_size * self.patch_size,
            Modality::Text => 0,
        }
    }

    /// Token count including the prepended cls token.
    pub fn seq_len(&self, m: Modality) -> usize {
        self.patches(m) + 1
    }

    pub fn total_seq(&self) -> usize {
        self.modalities.iter().map(|&m| self.seq_len(m)).sum()
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.task {
            Task::Classification { num_classes } => Some(num_classes),
            Task::Retrieval { .. } => None,
        }
    }

    pub fn is_retrieval(&self) -> bool {
        matches!(self.task, Task::Retrieval { .. })
    }
}
