//! The dual-path spectral-spatial fusion architecture.
//!
//! A spectral encoder attends over band tokens at each (downsampled) spatial
//! location, a spatial encoder runs a lightweight convolutional block, and a
//! cross-attention module injects spectral cues into the spatial stream
//! (spatial tokens are the queries). A mean-pooled MLP head produces the
//! class logits; optional auxiliary heads supervise the branch features
//! during training.

use crate::error::{Error, Result};
use crate::graph::{BnState, Graph, Mode, VarId};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchMask {
    pub spectral: bool,
    pub spatial: bool,
}

impl Default for BranchMask {
    fn default() -> Self {
        BranchMask {
            spectral: true,
            spatial: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsftConfig {
    pub embed_dim: usize,
    pub downsample: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub num_bands: usize,
    pub num_classes: usize,
    pub aux_heads: bool,
    pub lambda_aux: f64,
    pub branch_mask: BranchMask,
}

impl Default for SsftConfig {
    fn default() -> Self {
        SsftConfig {
            embed_dim: 64,
            downsample: 8,
            heads: 4,
            ffn_mult: 4,
            num_bands: 64,
            num_classes: 2,
            aux_heads: true,
            lambda_aux: 0.05,
            branch_mask: BranchMask::default(),
        }
    }
}

impl SsftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.downsample < 1 {
            return Err(Error::InvalidConfig("downsample must be >= 1".into()));
        }
        if self.ffn_mult < 1 {
            return Err(Error::InvalidConfig("ffn_mult must be >= 1".into()));
        }
        if self.num_bands < 1 {
            return Err(Error::InvalidConfig("num_bands must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.lambda_aux < 0.0 {
            return Err(Error::InvalidConfig("lambda_aux must be >= 0".into()));
        }
        if self.lambda_aux > 0.0 && !self.aux_heads {
            return Err(Error::InvalidConfig(
                "lambda_aux > 0 requires aux_heads to be enabled".into(),
            ));
        }
        if !self.branch_mask.spectral && !self.branch_mask.spatial {
            return Err(Error::InvalidConfig("at least one branch must be on".into()));
        }
        Ok(())
    }
}

// ---- parameter registry ----

#[derive(Debug, Clone, Copy)]
pub enum Init {
    TruncNormal(f64),
    Normal(f64),
    KaimingUniform { fan_in: usize },
    Zero,
    One,
}

/// Every trainable tensor of the model: (name, shape, initializer).
pub fn tensor_specs(config: &SsftConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.embed_dim;
    let c = config.num_bands;
    let k = config.num_classes;
    let f = config.ffn_mult * d;
    let tn = Init::TruncNormal(0.02);
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, init: Init| {
        specs.push((name.to_string(), shape, init));
    };

    let attn = |push: &mut dyn FnMut(&str, Vec<usize>, Init), prefix: &str| {
        for proj in ["q", "k", "v", "out"] {
            push(&format!("{prefix}.attn.{proj}.weight"), vec![d, d], tn);
            push(&format!("{prefix}.attn.{proj}.bias"), vec![d], Init::Zero);
        }
    };
    let ln = |push: &mut dyn FnMut(&str, Vec<usize>, Init), name: &str| {
        push(&format!("{name}.gamma"), vec![d], Init::One);
        push(&format!("{name}.beta"), vec![d], Init::Zero);
    };
    let ffn = |push: &mut dyn FnMut(&str, Vec<usize>, Init), prefix: &str| {
        push(&format!("{prefix}.ffn.fc1.weight"), vec![d, f], tn);
        push(&format!("{prefix}.ffn.fc1.bias"), vec![f], Init::Zero);
        push(&format!("{prefix}.ffn.fc2.weight"), vec![f, d], tn);
        push(&format!("{prefix}.ffn.fc2.bias"), vec![d], Init::Zero);
    };
    let head = |push: &mut dyn FnMut(&str, Vec<usize>, Init), prefix: &str| {
        push(&format!("{prefix}.fc1.weight"), vec![d, d], tn);
        push(&format!("{prefix}.fc1.bias"), vec![d], Init::Zero);
        push(&format!("{prefix}.fc2.weight"), vec![d, k], tn);
        push(&format!("{prefix}.fc2.bias"), vec![k], Init::Zero);
    };

    // spectral encoder
    push("spectral.embed.weight", vec![1, d], tn);
    push("spectral.embed.bias", vec![d], Init::Zero);
    push("spectral.chan_embed", vec![c, d], Init::Normal(0.02));
    ln(&mut push, "spectral.ln1");
    attn(&mut push, "spectral");
    ln(&mut push, "spectral.ln2");
    ffn(&mut push, "spectral");
    // spatial encoder
    push(
        "spatial.proj.weight",
        vec![c, d],
        Init::KaimingUniform { fan_in: c },
    );
    push("spatial.proj.bias", vec![d], Init::Zero);
    push(
        "spatial.conv.weight",
        vec![3, 3, d, d],
        Init::KaimingUniform { fan_in: 9 * d },
    );
    push("spatial.conv.bias", vec![d], Init::Zero);
    push("spatial.bn.gamma", vec![d], Init::One);
    push("spatial.bn.beta", vec![d], Init::Zero);
    // fusion
    ln(&mut push, "fusion.lnq");
    ln(&mut push, "fusion.lnkv");
    attn(&mut push, "fusion");
    ln(&mut push, "fusion.ln2");
    ffn(&mut push, "fusion");
    // heads
    head(&mut push, "head.main");
    if config.aux_heads {
        head(&mut push, "head.aux_s");
        head(&mut push, "head.aux_p");
    }
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.entries.insert(name, t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsftParams {
    pub params: ParamSet,
    pub bn: BnState,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic initialization. Each tensor draws from its own RNG stream
/// keyed by (seed, tensor name), so adding or removing tensors (e.g. aux
/// heads) never shifts the draws of the others.
pub fn init_params(config: &SsftConfig, seed: u64) -> Result<SsftParams> {
    config.validate()?;
    let mut set = ParamSet::new();
    for (name, shape, init) in tensor_specs(config) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&name).rotate_left(17));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::Normal(sigma) => (0..n).map(|_| sample_normal(&mut rng) * sigma).collect(),
            Init::TruncNormal(sigma) => (0..n)
                .map(|_| {
                    // resample outside two sigma
                    loop {
                        let z = sample_normal(&mut rng);
                        if z.abs() <= 2.0 {
                            return z * sigma;
                        }
                    }
                })
                .collect(),
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        set.insert(name, Tensor::new(shape, data)?);
    }
    Ok(SsftParams {
        params: set,
        bn: BnState::new(config.embed_dim),
    })
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::StandardNormal;
    rng.sample(StandardNormal)
}

// ---- parameter accounting ----

/// Closed-form count of trainable scalars.
pub fn param_count_closed_form(config: &SsftConfig) -> usize {
    let d = config.embed_dim;
    let c = config.num_bands;
    let k = config.num_classes;
    let f = config.ffn_mult * d;
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let head = d * d + d + d * k + k;
    let spectral = (d + d) + c * d + ln + attn + ln + ffn;
    let spatial = c * d + d + 9 * d * d + d + ln;
    let fusion = 2 * ln + attn + ln + ffn;
    let heads = head * if config.aux_heads { 3 } else { 1 };
    spectral + spatial + fusion + heads
}

/// Per-tensor breakdown by enumeration over all allocated tensors.
pub fn param_count_breakdown(config: &SsftConfig) -> (usize, Vec<(String, usize)>) {
    let mut rows = Vec::new();
    let mut total = 0;
    for (name, shape, _) in tensor_specs(config) {
        let n: usize = shape.iter().product();
        total += n;
        rows.push((name, n));
    }
    (total, rows)
}

// ---- forward pass ----

/// Graph leaf ids for every parameter tensor.
pub struct BoundParams {
    ids: IndexMap<String, VarId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.ids.iter()
    }
}

pub fn bind_params(g: &mut Graph, params: &ParamSet, requires_grad: bool) -> BoundParams {
    let mut ids = IndexMap::new();
    for (name, t) in params.iter() {
        ids.insert(name.clone(), g.leaf(t.clone(), requires_grad));
    }
    BoundParams { ids }
}

pub struct ForwardOutput {
    pub logits: VarId,
    pub aux_s: Option<VarId>,
    pub aux_p: Option<VarId>,
    /// Mean-pooled per-sample feature vectors `[B, D]` at the three taps.
    pub tap_spectral: VarId,
    pub tap_spatial: VarId,
    pub tap_fused: VarId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTap {
    Spectral,
    Spatial,
    Fused,
}

impl std::str::FromStr for FeatureTap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(FeatureTap::Spectral),
            "spatial" => Ok(FeatureTap::Spatial),
            "fused" => Ok(FeatureTap::Fused),
            other => Err(Error::InvalidConfig(format!(
                "unknown feature tap {:?}; valid taps: spectral, spatial, fused",
                other
            ))),
        }
    }
}

impl ForwardOutput {
    pub fn tap(&self, tap: FeatureTap) -> VarId {
        match tap {
            FeatureTap::Spectral => self.tap_spectral,
            FeatureTap::Spatial => self.tap_spatial,
            FeatureTap::Fused => self.tap_fused,
        }
    }
}

/// Multi-head attention: `q_in: [M, Lq, D]` queries against
/// `kv_in: [M, Lk, D]` keys/values, per-head scaling `1/sqrt(D/heads)`.
pub fn mha(
    g: &mut Graph,
    q_in: VarId,
    kv_in: VarId,
    p: &BoundParams,
    prefix: &str,
    heads: usize,
) -> VarId {
    let qsh = g.value(q_in).shape().to_vec();
    let kvsh = g.value(kv_in).shape().to_vec();
    let (m, lq, d) = (qsh[0], qsh[1], qsh[2]);
    let lk = kvsh[1];
    let dh = d / heads;
    let q = g.linear(q_in, p.id(&format!("{prefix}.attn.q.weight")), p.id(&format!("{prefix}.attn.q.bias")));
    let k = g.linear(kv_in, p.id(&format!("{prefix}.attn.k.weight")), p.id(&format!("{prefix}.attn.k.bias")));
    let v = g.linear(kv_in, p.id(&format!("{prefix}.attn.v.weight")), p.id(&format!("{prefix}.attn.v.bias")));
    let q = g.reshape(q, &[m, lq, heads, dh]);
    let q = g.permute(q, &[0, 2, 1, 3]); // [M, h, Lq, dh]
    let k = g.reshape(k, &[m, lk, heads, dh]);
    let kt = g.permute(k, &[0, 2, 3, 1]); // [M, h, dh, Lk]
    let v = g.reshape(v, &[m, lk, heads, dh]);
    let v = g.permute(v, &[0, 2, 1, 3]); // [M, h, Lk, dh]
    let scores = g.bmm(q, kt);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 3); // over the key dimension
    let out = g.bmm(attn, v); // [M, h, Lq, dh]
    let out = g.permute(out, &[0, 2, 1, 3]);
    let out = g.reshape(out, &[m, lq, d]);
    g.linear(
        out,
        p.id(&format!("{prefix}.attn.out.weight")),
        p.id(&format!("{prefix}.attn.out.bias")),
    )
}

fn ffn_block(g: &mut Graph, x: VarId, p: &BoundParams, prefix: &str) -> VarId {
    let h = g.linear(
        x,
        p.id(&format!("{prefix}.ffn.fc1.weight")),
        p.id(&format!("{prefix}.ffn.fc1.bias")),
    );
    let h = g.gelu(h);
    g.linear(
        h,
        p.id(&format!("{prefix}.ffn.fc2.weight")),
        p.id(&format!("{prefix}.ffn.fc2.bias")),
    )
}

fn head_mlp(g: &mut Graph, pooled: VarId, p: &BoundParams, prefix: &str) -> VarId {
    let h = g.linear(
        pooled,
        p.id(&format!("{prefix}.fc1.weight")),
        p.id(&format!("{prefix}.fc1.bias")),
    );
    let h = g.gelu(h);
    g.linear(
        h,
        p.id(&format!("{prefix}.fc2.weight")),
        p.id(&format!("{prefix}.fc2.bias")),
    )
}

/// Spectral encoder: pool space, attend over the C band tokens at each
/// location, mean-pool the tokens back into a feature map `[B, H/s, W/s, D]`.
pub fn spectral_forward(
    g: &mut Graph,
    x: VarId,
    p: &BoundParams,
    config: &SsftConfig,
) -> VarId {
    let xsh = g.value(x).shape().to_vec();
    let (b, c) = (xsh[0], xsh[3]);
    assert_eq!(c, config.num_bands, "band count mismatch");
    let d = config.embed_dim;
    let pooled = g.maxpool2d(x, config.downsample);
    let psh = g.value(pooled).shape().to_vec();
    let (hs, ws) = (psh[1], psh[2]);
    let n = hs * ws;
    // embed each scalar band value with the shared affine map
    let flat = g.reshape(pooled, &[b * n * c, 1]);
    let e = g.linear(flat, p.id("spectral.embed.weight"), p.id("spectral.embed.bias"));
    let e = g.reshape(e, &[b * n, c, d]);
    // band identity comes from the channel embedding
    let z = g.add_broadcast(e, p.id("spectral.chan_embed"));
    // pre-norm self-attention block over the C tokens
    let zn = g.layernorm(z, p.id("spectral.ln1.gamma"), p.id("spectral.ln1.beta"));
    let attn = mha(g, zn, zn, p, "spectral", config.heads);
    let z = g.add(z, attn);
    let zn = g.layernorm(z, p.id("spectral.ln2.gamma"), p.id("spectral.ln2.beta"));
    let f = ffn_block(g, zn, p, "spectral");
    let z = g.add(z, f);
    let pooled_tokens = g.mean_axis(z, 1); // [B*N, D]
    g.reshape(pooled_tokens, &[b, hs, ws, d])
}

/// Spatial encoder: 1x1 projection, spatial downsampling, one conv block.
pub fn spatial_forward(
    g: &mut Graph,
    x: VarId,
    p: &BoundParams,
    bn: &mut BnState,
    config: &SsftConfig,
    mode: Mode,
) -> Result<VarId> {
    let xsh = g.value(x).shape().to_vec();
    assert_eq!(xsh[3], config.num_bands, "band count mismatch");
    let proj = g.conv1x1(x, p.id("spatial.proj.weight"), p.id("spatial.proj.bias"));
    let pooled = g.maxpool2d(proj, config.downsample);
    let conv = g.conv3x3(pooled, p.id("spatial.conv.weight"), p.id("spatial.conv.bias"));
    let normed = g.batchnorm2d(
        conv,
        p.id("spatial.bn.gamma"),
        p.id("spatial.bn.beta"),
        bn,
        mode,
    )?;
    Ok(g.gelu(normed))
}

/// Cross-attention fusion: spatial tokens query the spectral tokens; the
/// residual attaches to the spatial stream.
pub fn fuse(g: &mut Graph, h_s: VarId, h_p: VarId, p: &BoundParams, config: &SsftConfig) -> VarId {
    assert_eq!(g.value(h_s).shape(), g.value(h_p).shape(), "fusion shape mismatch");
    let qn = g.layernorm(h_p, p.id("fusion.lnq.gamma"), p.id("fusion.lnq.beta"));
    let kvn = g.layernorm(h_s, p.id("fusion.lnkv.gamma"), p.id("fusion.lnkv.beta"));
    let ca = mha(g, qn, kvn, p, "fusion", config.heads);
    let z = g.add(h_p, ca);
    let zn = g.layernorm(z, p.id("fusion.ln2.gamma"), p.id("fusion.ln2.beta"));
    let f = ffn_block(g, zn, p, "fusion");
    g.add(z, f)
}

/// Full forward pass on `x: [B, H, W, C]`.
pub fn model_forward(
    g: &mut Graph,
    x: VarId,
    p: &BoundParams,
    bn: &mut BnState,
    config: &SsftConfig,
    mode: Mode,
) -> Result<ForwardOutput> {
    config.validate()?;
    let xsh = g.value(x).shape().to_vec();
    assert_eq!(xsh.len(), 4, "model input must be [B,H,W,C]");
    let (b, d) = (xsh[0], config.embed_dim);
    let hs = xsh[1].div_ceil(config.downsample);
    let ws = xsh[2].div_ceil(config.downsample);
    let n = hs * ws;

    // a disabled branch contributes a zero feature map (capacity unchanged)
    let h_s_map = if config.branch_mask.spectral {
        spectral_forward(g, x, p, config)
    } else {
        g.constant(Tensor::zeros(&[b, hs, ws, d]))
    };
    let h_p_map = if config.branch_mask.spatial {
        spatial_forward(g, x, p, bn, config, mode)?
    } else {
        g.constant(Tensor::zeros(&[b, hs, ws, d]))
    };

    let h_s = g.reshape(h_s_map, &[b, n, d]);
    let h_p = g.reshape(h_p_map, &[b, n, d]);
    let fused = fuse(g, h_s, h_p, p, config);

    let tap_spectral = g.mean_axis(h_s, 1);
    let tap_spatial = g.mean_axis(h_p, 1);
    let tap_fused = g.mean_axis(fused, 1);

    let logits = head_mlp(g, tap_fused, p, "head.main");
    let (aux_s, aux_p) = if mode == Mode::Train && config.aux_heads {
        (
            Some(head_mlp(g, tap_spectral, p, "head.aux_s")),
            Some(head_mlp(g, tap_spatial, p, "head.aux_p")),
        )
    } else {
        (None, None)
    };
    Ok(ForwardOutput {
        logits,
        aux_s,
        aux_p,
        tap_spectral,
        tap_spatial,
        tap_fused,
    })
}

/// Mean-pooled D-vector per sample from the named tap (eval mode).
pub fn export_features(
    x: &Tensor,
    params: &SsftParams,
    config: &SsftConfig,
    tap: FeatureTap,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xid = g.leaf(x.clone(), false);
    let bound = bind_params(&mut g, &params.params, false);
    let mut bn = params.bn.clone();
    let out = model_forward(&mut g, xid, &bound, &mut bn, config, Mode::Eval)?;
    Ok(g.value(out.tap(tap)).clone())
}
