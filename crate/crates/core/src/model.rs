//! The full detector: patch embedding, `L` pre-norm blocks, and a one-logit
//! classification head on the class token.
//!
//! Each block runs, in order: the layer-aware controller on the block input,
//! region-guided attention, head-interaction attention, and a feed-forward
//! network, each attention/FFN sublayer as a pre-norm residual.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{head_interaction, rg_mha, AttentionParams, Gating};
use crate::error::{Error, Result};
use crate::imageio::write_pgm;
use crate::lamm::Lamm;
use crate::mask::{
    combination_init, mask_tensor_on_tape, project_to_patches, region_groups, render_gaussian_masks, LandmarkSet,
    RegionSpec,
};
use crate::numerics::{sigmoid, LayerNorm, Linear, Mlp, NodeId, ParamId, ParamStore, Tape, Tensor};

const EMBED_STD: f64 = 0.02;

fn default_channels() -> usize {
    3
}
fn default_lambda_fixed() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub regions: usize,
    pub theta_base: f64,
    pub sigma_scale: f64,
    pub eta: f64,
    /// Gate strength used when the controller is disabled, and the
    /// controller's initial strength otherwise.
    #[serde(default = "default_lambda_fixed")]
    pub lambda_fixed: f64,
    pub enable_mask: bool,
    pub enable_rgmha: bool,
    pub enable_lamm: bool,
    /// Add `log G` to the scores instead of multiplying by `G`.
    #[serde(default)]
    pub log_domain_gating: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            dim: 768,
            layers: 12,
            heads: 12,
            regions: 8,
            theta_base: 0.3,
            sigma_scale: 0.25,
            eta: 0.2,
            lambda_fixed: default_lambda_fixed(),
            enable_mask: true,
            enable_rgmha: true,
            enable_lamm: true,
            log_domain_gating: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration for the synthetic task.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            dim: 64,
            layers: 4,
            heads: 8,
            ..Self::default()
        }
    }

    /// Smallest configuration used in gradient checks.
    pub fn tiny() -> Self {
        Self {
            dim: 32,
            layers: 2,
            ..Self::toy()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.channels == 0 {
            return fail("dim, layers, heads and channels must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        let available = region_groups().len();
        if self.regions == 0 || self.regions > available {
            return fail(format!("regions must be in 1..={available}, got {}", self.regions));
        }
        if self.enable_mask && self.heads < self.regions {
            return fail(format!("{} heads cannot carry {} region masks", self.heads, self.regions));
        }
        if !self.enable_mask && (self.enable_rgmha || self.enable_lamm) {
            return fail("region gating and layer modulation require the mask".into());
        }
        if !(self.theta_base.is_finite() && self.sigma_scale > 0.0 && self.eta.is_finite() && self.lambda_fixed > 0.0) {
            return fail("theta_base, sigma_scale, eta and lambda_fixed must be finite, sigma_scale positive".into());
        }
        Ok(())
    }
}

/// Architectural variants compared in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vit,
    Mask,
    MaskRgmha,
    MaskLamm,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Vit, Variant::Mask, Variant::MaskRgmha, Variant::MaskLamm, Variant::Full];

    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let (mask, rgmha, lamm) = match self {
            Variant::Vit => (false, false, false),
            Variant::Mask => (true, false, false),
            Variant::MaskRgmha => (true, true, false),
            Variant::MaskLamm => (true, false, true),
            Variant::Full => (true, true, true),
        };
        ModelConfig {
            enable_mask: mask,
            enable_rgmha: rgmha,
            enable_lamm: lamm,
            ..config.clone()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vit => "vit",
            Variant::Mask => "mask",
            Variant::MaskRgmha => "mask-rgmha",
            Variant::MaskLamm => "mask-lamm",
            Variant::Full => "full",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub rgmha: AttentionParams,
    pub norm2: LayerNorm,
    pub interaction: AttentionParams,
    pub norm3: LayerNorm,
    pub ffn: Mlp,
}

/// Parameter handles and configuration; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub combination: Option<ParamId>,
    pub lamm: Option<Lamm>,
    regions: RegionSpec,
}

/// Per-image inputs computed once: flattened patches and base region masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    /// `N_p × P²C`, patches row-major, pixels `(y, x, channel)` within a patch.
    pub patches: Tensor,
    /// `K × N_p`, absent when the mask is disabled.
    pub base_masks: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub weights: Option<NodeId>,
    pub lambda: Option<NodeId>,
    pub theta: Option<NodeId>,
    /// Per head gate (empty for plain attention).
    pub gates: Vec<NodeId>,
    /// Block output tokens.
    pub output: NodeId,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logit: NodeId,
    pub mask: Option<NodeId>,
    pub layers: Vec<LayerTrace>,
}

/// Per-layer modulation values; constants stand in for disabled parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub lambda: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logit: f64,
    pub layers: Vec<LayerParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub probability: f64,
    pub fake: bool,
}

/// `fake` iff `σ(logit) > 0.5`.
pub fn classify(logit: f64) -> Classification {
    let probability = sigmoid(logit);
    Classification {
        probability,
        fake: probability > 0.5,
    }
}

impl Architecture {
    pub fn build(config: ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch_dim = config.patch_size * config.patch_size * config.channels;
        let patch = Linear::new(store, "embed.patch", patch_dim, d, rng)?;
        let cls = store.add_normal("embed.cls", &[1, d], EMBED_STD, rng)?;
        let pos = store.add_normal("embed.pos", &[config.tokens(), d], EMBED_STD, rng)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("blocks.{l}");
            blocks.push(Block {
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                rgmha: AttentionParams::new(store, &format!("{p}.rgmha"), d, config.heads, config.enable_mask, rng)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
                interaction: AttentionParams::new(store, &format!("{p}.interaction"), d, config.heads, false, rng)?,
                norm3: LayerNorm::new(store, &format!("{p}.norm3"), d)?,
                ffn: Mlp::new(store, &format!("{p}.ffn"), d, 4 * d, d, rng)?,
            });
        }
        let final_norm = LayerNorm::new(store, "head.norm", d)?;
        let head = Linear::new(store, "head.linear", d, 1, rng)?;
        let combination = if config.enable_mask {
            match combination_init(config.heads, config.regions)? {
                Some(init) => Some(store.add("mask.combination", init)?),
                None => None,
            }
        } else {
            None
        };
        let lamm = if config.enable_lamm {
            let lamm = Lamm::new(store, d, config.heads, config.layers, config.theta_base, rng)?;
            lamm.set_initial_strength(store, config.lambda_fixed)?;
            Some(lamm)
        } else {
            None
        };
        let mut regions = region_groups();
        regions.regions.truncate(config.regions);
        Ok(Self {
            config,
            patch,
            cls,
            pos,
            blocks,
            final_norm,
            head,
            combination,
            lamm,
            regions,
        })
    }

    pub fn regions(&self) -> &RegionSpec {
        &self.regions
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.image_size, c.image_size, c.channels];
        if image.shape() != want {
            return Err(Error::shape("image", image.shape(), &want));
        }
        Ok(())
    }

    /// Flattens non-overlapping patches into rows.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let (p, g, ch, s) = (self.config.patch_size, self.config.grid(), self.config.channels, self.config.image_size);
        let px = image.data();
        let mut data = Vec::with_capacity(s * s * ch);
        for gy in 0..g {
            for gx in 0..g {
                for y in gy * p..(gy + 1) * p {
                    let start = (y * s + gx * p) * ch;
                    data.extend_from_slice(&px[start..start + p * ch]);
                }
            }
        }
        Tensor::new(vec![g * g, p * p * ch], data)
    }

    /// Patches of `image` rescaled from `[0, 1]` to the model's `[−1, 1]`
    /// input range, plus the patch-level region masks.
    pub fn prepare(&self, image: &Tensor, lm: &LandmarkSet) -> Result<PreparedSample> {
        let patches = self.patchify(image)?.map(|v| 2.0 * v - 1.0);
        let base_masks = if self.config.enable_mask {
            let size = (self.config.image_size, self.config.image_size);
            if lm.image_size() != size {
                return Err(Error::shape("landmarks", &[lm.image_size().0, lm.image_size().1], &[size.0, size.1]));
            }
            let stack = render_gaussian_masks(lm, &self.regions, self.config.sigma_scale);
            Some(project_to_patches(&stack, self.config.patch_size)?)
        } else {
            None
        };
        Ok(PreparedSample { patches, base_masks })
    }

    /// `X_0`: embedded patches behind the class token, plus positions.
    pub fn embed(&self, t: &mut Tape, sample: &PreparedSample) -> Result<NodeId> {
        let patches = t.input(sample.patches.clone())?;
        let emb = self.patch.forward(t, patches)?;
        let cls = t.param(self.cls);
        let tokens = t.concat_rows(&[cls, emb])?;
        let pos = t.param(self.pos);
        t.add(tokens, pos)
    }

    pub fn forward_tape(&self, t: &mut Tape, sample: &PreparedSample) -> Result<ForwardTrace> {
        let c = &self.config;
        let mut x = self.embed(t, sample)?;
        let mask = match &sample.base_masks {
            Some(base) if c.enable_mask => {
                let base = t.input(base.clone())?;
                let logits = self.combination.map(|id| t.param(id));
                Some(mask_tensor_on_tape(t, base, logits)?)
            }
            _ if c.enable_mask => return Err(Error::Config("sample was prepared without masks".into())),
            _ => None,
        };
        let fixed = if c.enable_rgmha && !c.enable_lamm {
            let lambda = t.input(Tensor::filled(&[1, c.heads], c.lambda_fixed))?;
            let theta = t.input(Tensor::filled(&[1, c.heads], c.theta_base))?;
            Some((lambda, theta))
        } else {
            None
        };
        let mut w_prev = match &self.lamm {
            Some(lamm) => Some(lamm.initial_weights(t)?),
            None => None,
        };

        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let modulation = match (&self.lamm, w_prev) {
                (Some(lamm), Some(w)) => Some(lamm.step(t, x, l, w)?),
                _ => None,
            };
            let (lambda, theta) = match (modulation, fixed) {
                (Some(m), _) => (Some(m.lambda), Some(m.theta)),
                (None, Some((lam, th))) => (Some(lam), Some(th)),
                _ => (None, None),
            };
            let gating = match mask {
                None => Gating::Plain,
                Some(mask) if c.enable_rgmha => Gating::Region {
                    mask,
                    lambda: lambda.expect("gate strength"),
                    theta: theta.expect("gate threshold"),
                    log_domain: c.log_domain_gating,
                },
                Some(mask) => Gating::Static { mask },
            };
            let weights = modulation.map(|m| m.weights);

            let h = block.norm1.forward(t, x)?;
            let attn = rg_mha(t, h, gating, weights, &block.rgmha)?;
            x = t.add(x, attn.output)?;
            let h = block.norm2.forward(t, x)?;
            let inter = head_interaction(t, h, &block.interaction)?;
            x = t.add(x, inter)?;
            let h = block.norm3.forward(t, x)?;
            let ff = block.ffn.forward(t, h)?;
            x = t.add(x, ff)?;

            layers.push(LayerTrace {
                weights,
                lambda: if c.enable_rgmha { lambda } else { modulation.map(|m| m.lambda) },
                theta: if c.enable_rgmha { theta } else { modulation.map(|m| m.theta) },
                gates: attn.gates,
                output: x,
            });
            w_prev = weights.or(w_prev);
        }
        let cls = t.slice_rows(x, 0, 1)?;
        let cls = self.final_norm.forward(t, cls)?;
        let logit = self.head.forward(t, cls)?;
        Ok(ForwardTrace { logit, mask, layers })
    }

    /// Reads the per-layer values off a finished trace.
    pub fn layer_params(&self, t: &Tape, trace: &ForwardTrace) -> Vec<LayerParams> {
        let h = self.config.heads;
        let read = |node: Option<NodeId>, fill: f64| match node {
            Some(n) => t.value(n).data().to_vec(),
            None => vec![fill; h],
        };
        trace
            .layers
            .iter()
            .map(|layer| LayerParams {
                weights: read(layer.weights, 1.0),
                lambda: read(layer.lambda, self.config.lambda_fixed),
                theta: read(layer.theta, self.config.theta_base),
            })
            .collect()
    }
}

/// Parameters plus the architecture that reads them.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = Architecture::build(config, &mut store, &mut rng)?;
        Ok(Self { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn prepare(&self, image: &Tensor, lm: &LandmarkSet) -> Result<PreparedSample> {
        self.arch.prepare(image, lm)
    }

    /// `X_0` as a plain tensor, for an image already in model-input range.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let sample = PreparedSample {
            patches: self.arch.patchify(image)?,
            base_masks: None,
        };
        let mut t = Tape::new(&self.store);
        let x = self.arch.embed(&mut t, &sample)?;
        Ok(t.value(x).clone())
    }

    pub fn forward_prepared(&self, sample: &PreparedSample) -> Result<ForwardOutput> {
        let mut t = Tape::new(&self.store);
        let trace = self.arch.forward_tape(&mut t, sample)?;
        Ok(ForwardOutput {
            logit: t.value(trace.logit).item(),
            layers: self.arch.layer_params(&t, &trace),
        })
    }

    pub fn forward(&self, image: &Tensor, lm: &LandmarkSet) -> Result<ForwardOutput> {
        self.forward_prepared(&self.prepare(image, lm)?)
    }

    /// Gate matrices `G_l^h` for one layer (all ones for plain attention).
    pub fn gate_maps(&self, sample: &PreparedSample, layer: usize) -> Result<Vec<Tensor>> {
        if layer >= self.config().layers {
            return Err(Error::Config(format!("layer {layer} out of range for {} layers", self.config().layers)));
        }
        let mut t = Tape::new(&self.store);
        let trace = self.arch.forward_tape(&mut t, sample)?;
        let gates = &trace.layers[layer].gates;
        if gates.is_empty() {
            let n = self.config().tokens();
            return Ok(vec![Tensor::ones(&[n, n]); self.config().heads]);
        }
        Ok(gates.iter().map(|&g| t.value(g).clone()).collect())
    }

    /// Mixed mask tensor `H × (N_p+1)` for a prepared sample.
    pub fn mask_tensor(&self, sample: &PreparedSample) -> Result<Option<Tensor>> {
        let Some(base) = &sample.base_masks else {
            return Ok(None);
        };
        let mut t = Tape::new(&self.store);
        let b = t.input(base.clone())?;
        let logits = self.arch.combination.map(|id| t.param(id));
        let m = mask_tensor_on_tape(&mut t, b, logits)?;
        Ok(Some(t.value(m).clone()))
    }

    /// Rounds every parameter through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for p in self.store.iter_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Patch-grid views of the per-head gate diagonals of one layer.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub heads: Vec<Tensor>,
    pub combined: Tensor,
    pub layer: LayerParams,
}

pub fn attention_maps(model: &Model, sample: &PreparedSample, layer: usize) -> Result<AttentionMaps> {
    let gates = model.gate_maps(sample, layer)?;
    let params = model.forward_prepared(sample)?.layers.swap_remove(layer);
    let g = model.config().grid();
    let heads: Vec<Tensor> = gates
        .iter()
        .map(|gate| {
            let diag = (1..=g * g).map(|i| gate.get(i, i)).collect();
            Tensor::new(vec![g, g], diag)
        })
        .collect::<Result<_>>()?;
    let mut combined = Tensor::zeros(&[g, g]);
    for (map, &w) in heads.iter().zip(&params.weights) {
        for (c, v) in combined.data_mut().iter_mut().zip(map.data()) {
            *c += w * v;
        }
    }
    let (lo, hi) = combined.data().iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let combined = if hi > lo {
        combined.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::filled(&[g, g], 0.5)
    };
    Ok(AttentionMaps {
        heads,
        combined,
        layer: params,
    })
}

/// Writes `head_XX.pgm` per head and `combined.pgm`; returns the paths.
pub fn export_attention_maps(
    model: &Model,
    image: &Tensor,
    lm: &LandmarkSet,
    layer: usize,
    out_dir: &Path,
) -> Result<(Vec<PathBuf>, AttentionMaps)> {
    let sample = model.prepare(image, lm)?;
    let maps = attention_maps(model, &sample, layer)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut paths = Vec::with_capacity(maps.heads.len() + 1);
    for (h, map) in maps.heads.iter().enumerate() {
        let path = out_dir.join(format!("head_{h:02}.pgm"));
        write_pgm(&path, map)?;
        paths.push(path);
    }
    let path = out_dir.join("combined.pgm");
    write_pgm(&path, &maps.combined)?;
    paths.push(path);
    Ok((paths, maps))
}
