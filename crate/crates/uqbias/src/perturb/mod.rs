//! Deterministic generation of bias-shuffled prompts.
//!
//! Three text perturbations (rephrase, reorder, relabel) and three image
//! perturbations (resize, rotate, noise), each with an exact inverse
//! mapping from displayed label tokens back to canonical option indices.
//! Everything is a pure function of the inputs and a [`PerturbationSpec`],
//! so replays are byte-identical.

mod image_ops;
mod templates;

pub use image_ops::{
    add_noise, encode_png, resize_image, rotate_image, ResizeMode, MAX_ASPECT_RATIO,
    MAX_ROTATION_DEG, MIN_ASPECT_RATIO, NOISE_STD,
};
pub use templates::{template_text, TEMPLATE_COUNT};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::uq::OPTION_COUNT;

#[derive(Debug, Error, PartialEq)]
pub enum PerturbError {
    #[error("template id {0} out of range 0..{TEMPLATE_COUNT}")]
    TemplateOutOfRange(usize),
    #[error("{0:?} is not a permutation of 0..{OPTION_COUNT}")]
    NotAPermutation([usize; OPTION_COUNT]),
    #[error("aspect ratio {0} outside [{MIN_ASPECT_RATIO}, {MAX_ASPECT_RATIO}]")]
    RatioOutOfRange(f64),
    #[error("rotation angle {0} outside [-{MAX_ROTATION_DEG}, {MAX_ROTATION_DEG}] degrees")]
    AngleOutOfRange(f64),
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("unknown bias {0:?}")]
    UnknownBias(String),
}

/// The six prompt-introduced biases that get shuffled away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bias {
    Phrasing,
    Positional,
    Label,
    Shape,
    Orientation,
    Lowlevel,
}

impl Bias {
    pub const ALL: [Bias; 6] = [
        Bias::Phrasing,
        Bias::Positional,
        Bias::Label,
        Bias::Shape,
        Bias::Orientation,
        Bias::Lowlevel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Bias::Phrasing => "phrasing",
            Bias::Positional => "positional",
            Bias::Label => "label",
            Bias::Shape => "shape",
            Bias::Orientation => "orientation",
            Bias::Lowlevel => "lowlevel",
        }
    }

    /// Method-family prefix used in reports ("rephrase_entropy", ...).
    pub fn method_family(self) -> &'static str {
        match self {
            Bias::Phrasing => "rephrase",
            Bias::Positional => "reorder",
            Bias::Label => "relabel",
            Bias::Shape => "resize",
            Bias::Orientation => "rotate",
            Bias::Lowlevel => "noise",
        }
    }

    pub fn is_text(self) -> bool {
        matches!(self, Bias::Phrasing | Bias::Positional | Bias::Label)
    }

    pub const TEXT: [Bias; 3] = [Bias::Phrasing, Bias::Positional, Bias::Label];
    pub const IMAGE: [Bias; 3] = [Bias::Shape, Bias::Orientation, Bias::Lowlevel];
}

impl std::str::FromStr for Bias {
    type Err = PerturbError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Bias::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| PerturbError::UnknownBias(s.to_string()))
    }
}

impl std::fmt::Display for Bias {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bijection on option slots {0, 1, 2, 3}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[usize; OPTION_COUNT]", into = "[usize; OPTION_COUNT]")]
pub struct Permutation([usize; OPTION_COUNT]);

impl Permutation {
    pub fn new(values: [usize; OPTION_COUNT]) -> Result<Self, PerturbError> {
        let mut seen = [false; OPTION_COUNT];
        for &v in &values {
            if v >= OPTION_COUNT || seen[v] {
                return Err(PerturbError::NotAPermutation(values));
            }
            seen[v] = true;
        }
        Ok(Self(values))
    }

    pub fn identity() -> Self {
        Self([0, 1, 2, 3])
    }

    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut values = [0usize, 1, 2, 3];
        // Fisher-Yates.
        for i in (1..OPTION_COUNT).rev() {
            let j = rng.random_range(0..=i);
            values.swap(i, j);
        }
        Self(values)
    }

    pub fn get(&self, index: usize) -> usize {
        self.0[index]
    }

    pub fn values(&self) -> &[usize; OPTION_COUNT] {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let mut inv = [0usize; OPTION_COUNT];
        for (i, &v) in self.0.iter().enumerate() {
            inv[v] = i;
        }
        Self(inv)
    }

    pub fn is_identity(&self) -> bool {
        self.0 == [0, 1, 2, 3]
    }
}

impl TryFrom<[usize; OPTION_COUNT]> for Permutation {
    type Error = PerturbError;
    fn try_from(values: [usize; OPTION_COUNT]) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<Permutation> for [usize; OPTION_COUNT] {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// Maps a displayed label token (0-3) to the canonical option index it
/// stands for in this particular rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalMap(Permutation);

impl CanonicalMap {
    pub fn identity() -> Self {
        Self(Permutation::identity())
    }

    pub fn from_permutation(perm: Permutation) -> Self {
        Self(perm)
    }

    /// Canonical option index behind displayed label `label`.
    pub fn option_for_label(&self, label: usize) -> usize {
        self.0.get(label)
    }

    pub fn as_permutation(&self) -> &Permutation {
        &self.0
    }

    /// Re-expresses a distribution over displayed labels in canonical
    /// option order.
    pub fn to_canonical(&self, displayed: [f64; OPTION_COUNT]) -> [f64; OPTION_COUNT] {
        let mut canonical = [0.0; OPTION_COUNT];
        for (label, &p) in displayed.iter().enumerate() {
            canonical[self.0.get(label)] = p;
        }
        canonical
    }
}

/// Parameters of one perturbed prompt; exactly the fields for its bias
/// kind exist, by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "bias", rename_all = "lowercase")]
pub enum PerturbKind {
    Phrasing { template_id: usize },
    Positional { position_perm: Permutation },
    Label { label_perm: Permutation },
    Shape { aspect_ratio: f64 },
    Orientation { angle_deg: f64 },
    Lowlevel { noise_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub replicate_index: u32,
    #[serde(flatten)]
    pub kind: PerturbKind,
}

impl PerturbationSpec {
    pub fn bias(&self) -> Bias {
        match self.kind {
            PerturbKind::Phrasing { .. } => Bias::Phrasing,
            PerturbKind::Positional { .. } => Bias::Positional,
            PerturbKind::Label { .. } => Bias::Label,
            PerturbKind::Shape { .. } => Bias::Shape,
            PerturbKind::Orientation { .. } => Bias::Orientation,
            PerturbKind::Lowlevel { .. } => Bias::Lowlevel,
        }
    }
}

/// A fully rendered prompt: text, raster, and the mapping from displayed
/// labels back to canonical options.
#[derive(Debug, Clone)]
pub struct RenderedPrompt {
    pub text: String,
    pub image: RgbImage,
    pub canonical_map: CanonicalMap,
}

fn option_block(lines: &[(usize, &str); OPTION_COUNT]) -> String {
    lines
        .iter()
        .map(|(label, text)| format!("{label}: {text}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn vanilla_block(options: &[String; OPTION_COUNT]) -> String {
    option_block(&[
        (0, options[0].as_str()),
        (1, options[1].as_str()),
        (2, options[2].as_str()),
        (3, options[3].as_str()),
    ])
}

/// Template 0, labels 0-3 in natural order, options in canonical order,
/// untouched image. The canonical map is the identity.
pub fn render_vanilla(options: &[String; OPTION_COUNT], image: &RgbImage) -> RenderedPrompt {
    RenderedPrompt {
        text: templates::fill(0, &vanilla_block(options)),
        image: image.clone(),
        canonical_map: CanonicalMap::identity(),
    }
}

/// One of the ten fixed templates with options and labels untouched.
pub fn rephrase(
    options: &[String; OPTION_COUNT],
    image: &RgbImage,
    template_id: usize,
) -> Result<RenderedPrompt, PerturbError> {
    if template_id >= TEMPLATE_COUNT {
        return Err(PerturbError::TemplateOutOfRange(template_id));
    }
    Ok(RenderedPrompt {
        text: templates::fill(template_id, &vanilla_block(options)),
        image: image.clone(),
        canonical_map: CanonicalMap::identity(),
    })
}

/// Option texts appear in permuted order while the labels stay 0-3
/// top to bottom; label k now stands for option `position_perm[k]`.
pub fn reorder(
    options: &[String; OPTION_COUNT],
    image: &RgbImage,
    position_perm: &Permutation,
) -> RenderedPrompt {
    let block = option_block(&[
        (0, options[position_perm.get(0)].as_str()),
        (1, options[position_perm.get(1)].as_str()),
        (2, options[position_perm.get(2)].as_str()),
        (3, options[position_perm.get(3)].as_str()),
    ]);
    RenderedPrompt {
        text: templates::fill(0, &block),
        image: image.clone(),
        canonical_map: CanonicalMap::from_permutation(*position_perm),
    }
}

/// Option texts keep their canonical positions while the displayed label
/// of position k becomes `label_perm[k]`; displayed label `label_perm[k]`
/// therefore stands for option k.
pub fn relabel(
    options: &[String; OPTION_COUNT],
    image: &RgbImage,
    label_perm: &Permutation,
) -> RenderedPrompt {
    let block = option_block(&[
        (label_perm.get(0), options[0].as_str()),
        (label_perm.get(1), options[1].as_str()),
        (label_perm.get(2), options[2].as_str()),
        (label_perm.get(3), options[3].as_str()),
    ]);
    RenderedPrompt {
        text: templates::fill(0, &block),
        image: image.clone(),
        canonical_map: CanonicalMap::from_permutation(label_perm.inverse()),
    }
}

/// Renders the prompt described by `spec`. Image perturbations keep the
/// vanilla text; text perturbations keep the untouched image.
pub fn render(
    options: &[String; OPTION_COUNT],
    image: &RgbImage,
    spec: &PerturbationSpec,
    resize_mode: ResizeMode,
) -> Result<RenderedPrompt, PerturbError> {
    match &spec.kind {
        PerturbKind::Phrasing { template_id } => rephrase(options, image, *template_id),
        PerturbKind::Positional { position_perm } => Ok(reorder(options, image, position_perm)),
        PerturbKind::Label { label_perm } => Ok(relabel(options, image, label_perm)),
        PerturbKind::Shape { aspect_ratio } => {
            let distorted = resize_image(image, *aspect_ratio, resize_mode)?;
            Ok(RenderedPrompt {
                text: templates::fill(0, &vanilla_block(options)),
                image: distorted,
                canonical_map: CanonicalMap::identity(),
            })
        }
        PerturbKind::Orientation { angle_deg } => {
            let rotated = rotate_image(image, *angle_deg)?;
            Ok(RenderedPrompt {
                text: templates::fill(0, &vanilla_block(options)),
                image: rotated,
                canonical_map: CanonicalMap::identity(),
            })
        }
        PerturbKind::Lowlevel { noise_seed } => Ok(RenderedPrompt {
            text: templates::fill(0, &vanilla_block(options)),
            image: add_noise(image, *noise_seed),
            canonical_map: CanonicalMap::identity(),
        }),
    }
}

fn suite_rng(master_seed: u64, bias: Bias, replicate: u32) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"uqbias.suite.v1");
    hasher.update(master_seed.to_le_bytes());
    hasher.update(bias.as_str().as_bytes());
    hasher.update(replicate.to_le_bytes());
    ChaCha12Rng::from_seed(hasher.finalize().into())
}

fn grid_point(low: f64, high: f64, index: u32, n: u32) -> f64 {
    if n <= 1 {
        return (low + high) / 2.0;
    }
    low + (high - low) * index as f64 / (n - 1) as f64
}

/// Builds the n-replicate perturbation suite for one bias.
///
/// Parameters come from a stream keyed by (master_seed, bias, replicate),
/// so parallel generation order cannot change the outputs. Phrasing walks
/// the ten templates, continuous parameters are evenly spaced over their
/// ranges, permutations are drawn uniformly.
pub fn make_suite(bias: Bias, master_seed: u64, n: u32) -> Vec<PerturbationSpec> {
    (0..n)
        .map(|replicate_index| {
            let kind = match bias {
                Bias::Phrasing => PerturbKind::Phrasing {
                    template_id: replicate_index as usize % TEMPLATE_COUNT,
                },
                Bias::Positional => PerturbKind::Positional {
                    position_perm: Permutation::random(&mut suite_rng(
                        master_seed,
                        bias,
                        replicate_index,
                    )),
                },
                Bias::Label => PerturbKind::Label {
                    label_perm: Permutation::random(&mut suite_rng(
                        master_seed,
                        bias,
                        replicate_index,
                    )),
                },
                Bias::Shape => PerturbKind::Shape {
                    aspect_ratio: grid_point(
                        MIN_ASPECT_RATIO,
                        MAX_ASPECT_RATIO,
                        replicate_index,
                        n,
                    ),
                },
                Bias::Orientation => PerturbKind::Orientation {
                    angle_deg: grid_point(-MAX_ROTATION_DEG, MAX_ROTATION_DEG, replicate_index, n),
                },
                Bias::Lowlevel => PerturbKind::Lowlevel {
                    noise_seed: suite_rng(master_seed, bias, replicate_index).random(),
                },
            };
            PerturbationSpec {
                replicate_index,
                kind,
            }
        })
        .collect()
}
