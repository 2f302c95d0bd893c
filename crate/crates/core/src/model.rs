//! Full-model assembly: modality adapters, optional item bias, the
//! alignment -> fusion pipeline, user-representation extraction, and
//! candidate scoring, with ablation switches.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{
    align_modalities, AlignStageRefs, BlockCfg, FfnParamRefs, LnParamRefs, Mode, TissdParamRefs,
};
use crate::cross::{output_head, ticossd_forward, TicossdParamRefs};
use crate::data::{ItemCatalog, UserSequence};
use crate::error::{Error, Result};
use crate::fourier::{fuse_time_signals, ComplexFilterRefs, FusionRefs};
use crate::ssd::SsdMode;
use crate::tape::{Tape, UnaryOp};
use crate::temporal::{time_diff_raw, DecayKind, TimeEnhanceParams};
use crate::tensor::Tensor;

/// Model hyperparameters and ablation switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub state_dim: usize,
    pub conv_kernel: usize,
    pub max_seq_len: usize,
    pub layers: usize,
    pub tau: f32,
    pub dropout: f32,
    pub use_id_bias: bool,
    pub time_aware: bool,
    pub shared_align: bool,
    pub learnable_filter: bool,
    pub adaptive_filter: bool,
    pub decay: DecayKind,
    pub ssd_mode: SsdMode,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 256,
            state_dim: 64,
            conv_kernel: 4,
            max_seq_len: 50,
            layers: 1,
            tau: 0.8,
            dropout: 0.4,
            use_id_bias: true,
            time_aware: true,
            shared_align: true,
            learnable_filter: true,
            adaptive_filter: true,
            decay: DecayKind::Exp,
            ssd_mode: SsdMode::Auto,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0
            || self.state_dim == 0
            || self.conv_kernel == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if !(self.layers == 1 || self.layers == 2) {
            return Err(Error::Config(format!("layers must be 1 or 2, got {}", self.layers)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }

    fn block_cfg(&self) -> BlockCfg {
        BlockCfg {
            d_state: self.state_dim,
            decay: self.decay,
            mode: self.ssd_mode,
            ln_eps: self.ln_eps,
        }
    }
}

/// The six structural model variants, plus the full model.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Ablation {
    Full,
    NoTime,
    NoShared,
    NoLearnableFilter,
    NoAdaptiveFilter,
    NoIdBias,
    TwoLayer,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoTime,
        Ablation::NoShared,
        Ablation::NoLearnableFilter,
        Ablation::NoAdaptiveFilter,
        Ablation::NoIdBias,
        Ablation::TwoLayer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTime => "no-time",
            Ablation::NoShared => "no-shared",
            Ablation::NoLearnableFilter => "no-lf",
            Ablation::NoAdaptiveFilter => "no-af",
            Ablation::NoIdBias => "no-id",
            Ablation::TwoLayer => "2l",
        }
    }

    pub fn apply(&self, cfg: &mut ModelConfig) {
        match self {
            Ablation::Full => {}
            Ablation::NoTime => cfg.time_aware = false,
            Ablation::NoShared => cfg.shared_align = false,
            Ablation::NoLearnableFilter => cfg.learnable_filter = false,
            Ablation::NoAdaptiveFilter => cfg.adaptive_filter = false,
            Ablation::NoIdBias => cfg.use_id_bias = false,
            Ablation::TwoLayer => cfg.layers = 2,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .iter()
            .find(|a| a.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// Named-tensor store. Shared parameters live once under a canonical name;
/// alternate access paths are recorded as aliases.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    aliases: BTreeMap<String, String>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(!self.tensors.contains_key(&name), "duplicate parameter {name}");
        self.tensors.insert(name, t);
    }

    pub fn add_alias(&mut self, alias: impl Into<String>, canonical: impl Into<String>) {
        self.aliases.insert(alias.into(), canonical.into());
    }

    /// Canonical name behind an (possibly aliased) access path.
    pub fn resolve<'a>(&'a self, name: &'a str) -> &'a str {
        let mut cur = name;
        while let Some(next) = self.aliases.get(cur) {
            cur = next;
        }
        cur
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let canonical = self.resolve(name);
        self.tensors.get(canonical).ok_or_else(|| Error::Contract {
            op: "ModelParams::get",
            msg: format!("missing parameter '{name}' (canonical '{canonical}')"),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(self.resolve(name))
    }

    pub fn set_data(&mut self, name: &str, data: Vec<f32>) -> Result<()> {
        let canonical = self.resolve(name).to_string();
        let t = self.tensors.get_mut(&canonical).ok_or_else(|| Error::Contract {
            op: "ModelParams::set_data",
            msg: format!("missing parameter '{canonical}'"),
        })?;
        if t.numel() != data.len() {
            return Err(Error::shape("ModelParams::set_data", t.numel(), data.len()));
        }
        *t = Tensor::new(t.dims(), data)?;
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn alias_entries(&self) -> impl Iterator<Item = (&String, &String)> {
        self.aliases.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Copy of the store whose canonical tensors are watched on `tape`.
    pub fn watched(&self, tape: &Tape) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.watch(v)))
                .collect(),
            aliases: self.aliases.clone(),
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    // Box-Muller from two uniforms
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    (z * std as f64) as f32
}

fn gauss_tensor(rng: &mut ChaCha8Rng, dims: &[usize], std: f32) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| gauss(rng, std)).collect()).expect("init shape")
}

/// Identity tap plus noise: the kernel starts as a pass-through so the
/// convolved streams carry signal from step one.
fn conv_kernel_tensor(rng: &mut ChaCha8Rng, k: usize, channels: usize) -> Tensor {
    let mut data: Vec<f32> = (0..k * channels).map(|_| gauss(rng, INIT_STD)).collect();
    for c in 0..channels {
        data[c] += 1.0;
    }
    Tensor::new(&[k, channels], data).expect("conv kernel shape")
}

const INIT_STD: f32 = 0.02;

fn init_tissd_block(p: &mut ModelParams, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    let n = cfg.latent_dim;
    let d = cfg.state_dim;
    let k = cfg.conv_kernel;
    let l = cfg.max_seq_len;
    p.insert(format!("{prefix}.w1"), gauss_tensor(rng, &[n, 2 * d + n + 1], INIT_STD));
    p.insert(format!("{prefix}.b1"), Tensor::zeros(&[2 * d + n + 1]));
    init_ssd_common(p, rng, prefix, cfg, d, k, l);
}

/// Conv kernels, state coefficient, step bias, and (optionally) the
/// time-enhancement parameters shared by TiSSD and TiCoSSD blocks.
fn init_ssd_common(
    p: &mut ModelParams,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &ModelConfig,
    d: usize,
    k: usize,
    l: usize,
) {
    let n = cfg.latent_dim;
    p.insert(format!("{prefix}.conv_c"), conv_kernel_tensor(rng, k, d));
    p.insert(format!("{prefix}.conv_b"), conv_kernel_tensor(rng, k, d));
    p.insert(format!("{prefix}.conv_x"), conv_kernel_tensor(rng, k, n));
    p.insert(format!("{prefix}.a"), Tensor::scalar(-rng.gen_range(1.0..16.0)));
    // step targets log-uniform in [1e-3, 1e-1]; the bias sits outside the
    // softplus, so subtract softplus(0) to land the initial step on target
    let b_delta: Vec<f32> = (0..l)
        .map(|_| {
            let dt = (rng.gen_range((1e-3f32).ln()..(1e-1f32).ln())).exp();
            dt - std::f32::consts::LN_2
        })
        .collect();
    p.insert(format!("{prefix}.b_delta"), Tensor::vector(&b_delta));
    if cfg.time_aware {
        p.insert(format!("{prefix}.te.conv"), conv_kernel_tensor(rng, k, 1));
        p.insert(format!("{prefix}.te.mlp_w1"), gauss_tensor(rng, &[l, l], INIT_STD));
        p.insert(format!("{prefix}.te.mlp_b1"), Tensor::zeros(&[l]));
        p.insert(format!("{prefix}.te.mlp_w2"), gauss_tensor(rng, &[l, 1], INIT_STD));
        // the multiplicative gate starts open
        p.insert(format!("{prefix}.te.mlp_b2"), Tensor::scalar(1.0));
    }
}

fn init_ffn(p: &mut ModelParams, rng: &mut ChaCha8Rng, prefix: &str, n: usize) {
    p.insert(format!("{prefix}.w_in"), gauss_tensor(rng, &[n, 4 * n], INIT_STD));
    p.insert(format!("{prefix}.b_in"), Tensor::zeros(&[4 * n]));
    p.insert(format!("{prefix}.w_out"), gauss_tensor(rng, &[4 * n, n], INIT_STD));
    p.insert(format!("{prefix}.b_out"), Tensor::zeros(&[n]));
}

fn init_ln(p: &mut ModelParams, prefix: &str, n: usize) {
    p.insert(format!("{prefix}.gamma"), Tensor::new(&[n], vec![1.0; n]).unwrap());
    p.insert(format!("{prefix}.beta"), Tensor::zeros(&[n]));
}

fn init_complex_filter(p: &mut ModelParams, rng: &mut ChaCha8Rng, prefix: &str, l: usize) {
    // near-identity: identity added to the real plane of W
    let mut w = vec![0.0f32; 2 * l * l];
    for v in w.iter_mut() {
        *v = gauss(rng, INIT_STD);
    }
    for i in 0..l {
        w[i * l + i] += 1.0;
    }
    p.insert(format!("{prefix}.w"), Tensor::new(&[2, l, l], w).unwrap());
    p.insert(format!("{prefix}.b"), gauss_tensor(rng, &[2, l], INIT_STD));
}

/// Deterministic parameter initialization from a seed.
pub fn init_params(
    cfg: &ModelConfig,
    seed: u64,
    dim_v: usize,
    dim_t: usize,
    num_items: usize,
) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    let n = cfg.latent_dim;
    let l = cfg.max_seq_len;

    p.insert("adapter.v.w", gauss_tensor(&mut rng, &[dim_v, n], INIT_STD));
    p.insert("adapter.v.b", Tensor::zeros(&[n]));
    p.insert("adapter.t.w", gauss_tensor(&mut rng, &[dim_t, n], INIT_STD));
    p.insert("adapter.t.b", Tensor::zeros(&[n]));

    if cfg.use_id_bias {
        p.insert("bias.v.table", Tensor::zeros(&[num_items, n]));
        p.insert("bias.t.table", Tensor::zeros(&[num_items, n]));
    }

    if cfg.time_aware {
        p.insert("time.ln.gamma", Tensor::scalar(1.0));
        p.insert("time.ln.beta", Tensor::zeros(&[1]));
    }

    for layer in 0..cfg.layers {
        if cfg.shared_align {
            let canonical = format!("align.{layer}.tissd");
            init_tissd_block(&mut p, &mut rng, &canonical, cfg);
            for field in tissd_field_names(cfg) {
                p.add_alias(
                    format!("align.{layer}.tissd_v.{field}"),
                    format!("{canonical}.{field}"),
                );
                p.add_alias(
                    format!("align.{layer}.tissd_t.{field}"),
                    format!("{canonical}.{field}"),
                );
            }
        } else {
            init_tissd_block(&mut p, &mut rng, &format!("align.{layer}.tissd_v"), cfg);
            init_tissd_block(&mut p, &mut rng, &format!("align.{layer}.tissd_t"), cfg);
        }
        init_ffn(&mut p, &mut rng, &format!("align.{layer}.ffn_v"), n);
        init_ffn(&mut p, &mut rng, &format!("align.{layer}.ffn_t"), n);
        for ln in ["ln1_v", "ln1_t", "ln2_v", "ln2_t"] {
            init_ln(&mut p, &format!("align.{layer}.{ln}"), n);
        }
    }

    for layer in 0..cfg.layers {
        if cfg.time_aware {
            if cfg.adaptive_filter {
                init_complex_filter(&mut p, &mut rng, &format!("fusion.{layer}.adaptive"), l);
            }
            if cfg.learnable_filter {
                init_complex_filter(&mut p, &mut rng, &format!("fusion.{layer}.learnable"), l);
            }
        }
        let d = cfg.state_dim;
        let prefix = format!("cross.{layer}");
        p.insert(format!("{prefix}.w2"), gauss_tensor(&mut rng, &[n, d], INIT_STD));
        p.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]));
        p.insert(format!("{prefix}.w3"), gauss_tensor(&mut rng, &[n, d + n + 1], INIT_STD));
        p.insert(format!("{prefix}.b3"), Tensor::zeros(&[d + n + 1]));
        init_ssd_common(&mut p, &mut rng, &prefix, cfg, d, cfg.conv_kernel, l);
        init_ffn(&mut p, &mut rng, &format!("{prefix}.ffn"), n);
        init_ln(&mut p, &format!("{prefix}.ln1"), n);
        init_ln(&mut p, &format!("{prefix}.ln2"), n);
    }

    Ok(p)
}

fn tissd_field_names(cfg: &ModelConfig) -> Vec<&'static str> {
    let mut fields = vec!["w1", "b1", "conv_c", "conv_b", "conv_x", "a", "b_delta"];
    if cfg.time_aware {
        fields.extend(["te.conv", "te.mlp_w1", "te.mlp_b1", "te.mlp_w2", "te.mlp_b2"]);
    }
    fields
}

fn te_refs<'a>(p: &'a ModelParams, prefix: &str, cfg: &ModelConfig) -> Result<Option<TimeEnhanceParams<'a>>> {
    if !cfg.time_aware {
        return Ok(None);
    }
    Ok(Some(TimeEnhanceParams {
        conv: p.get(&format!("{prefix}.te.conv"))?,
        mlp_w1: p.get(&format!("{prefix}.te.mlp_w1"))?,
        mlp_b1: p.get(&format!("{prefix}.te.mlp_b1"))?,
        mlp_w2: p.get(&format!("{prefix}.te.mlp_w2"))?,
        mlp_b2: p.get(&format!("{prefix}.te.mlp_b2"))?,
        activation: UnaryOp::Silu,
    }))
}

fn tissd_refs<'a>(p: &'a ModelParams, prefix: &str, cfg: &ModelConfig) -> Result<TissdParamRefs<'a>> {
    Ok(TissdParamRefs {
        w1: p.get(&format!("{prefix}.w1"))?,
        b1: p.get(&format!("{prefix}.b1"))?,
        conv_c: p.get(&format!("{prefix}.conv_c"))?,
        conv_b: p.get(&format!("{prefix}.conv_b"))?,
        conv_x: p.get(&format!("{prefix}.conv_x"))?,
        a: p.get(&format!("{prefix}.a"))?,
        b_delta: p.get(&format!("{prefix}.b_delta"))?,
        te: te_refs(p, prefix, cfg)?,
    })
}

fn ffn_refs<'a>(p: &'a ModelParams, prefix: &str) -> Result<FfnParamRefs<'a>> {
    Ok(FfnParamRefs {
        w_in: p.get(&format!("{prefix}.w_in"))?,
        b_in: p.get(&format!("{prefix}.b_in"))?,
        w_out: p.get(&format!("{prefix}.w_out"))?,
        b_out: p.get(&format!("{prefix}.b_out"))?,
    })
}

fn ln_refs<'a>(p: &'a ModelParams, prefix: &str) -> Result<LnParamRefs<'a>> {
    Ok(LnParamRefs {
        gamma: p.get(&format!("{prefix}.gamma"))?,
        beta: p.get(&format!("{prefix}.beta"))?,
    })
}

fn cross_refs<'a>(p: &'a ModelParams, layer: usize, cfg: &ModelConfig) -> Result<TicossdParamRefs<'a>> {
    let prefix = format!("cross.{layer}");
    Ok(TicossdParamRefs {
        w2: p.get(&format!("{prefix}.w2"))?,
        b2: p.get(&format!("{prefix}.b2"))?,
        w3: p.get(&format!("{prefix}.w3"))?,
        b3: p.get(&format!("{prefix}.b3"))?,
        conv_c: p.get(&format!("{prefix}.conv_c"))?,
        conv_b: p.get(&format!("{prefix}.conv_b"))?,
        conv_x: p.get(&format!("{prefix}.conv_x"))?,
        a: p.get(&format!("{prefix}.a"))?,
        b_delta: p.get(&format!("{prefix}.b_delta"))?,
        te: te_refs(p, &prefix, cfg)?,
    })
}

fn fusion_refs<'a>(p: &'a ModelParams, layer: usize, cfg: &ModelConfig) -> Result<FusionRefs<'a>> {
    let adaptive = if cfg.adaptive_filter {
        Some(ComplexFilterRefs {
            w: p.get(&format!("fusion.{layer}.adaptive.w"))?,
            b: p.get(&format!("fusion.{layer}.adaptive.b"))?,
        })
    } else {
        None
    };
    let learnable = if cfg.learnable_filter {
        Some(ComplexFilterRefs {
            w: p.get(&format!("fusion.{layer}.learnable.w"))?,
            b: p.get(&format!("fusion.{layer}.learnable.b"))?,
        })
    } else {
        None
    };
    Ok(FusionRefs { adaptive, learnable })
}

/// Two independent affine maps from frozen encoder features into the latent
/// space; the raw features themselves are never modified.
pub fn adapt_features(
    tape: &Tape,
    f_v: &Tensor,
    f_t: &Tensor,
    params: &ModelParams,
) -> Result<(Tensor, Tensor)> {
    let w_v = params.get("adapter.v.w")?;
    let w_t = params.get("adapter.t.w")?;
    if f_v.dims()[1] != w_v.dims()[0] {
        return Err(Error::shape("adapt_features(visual)", f_v.shape(), w_v.shape()));
    }
    if f_t.dims()[1] != w_t.dims()[0] {
        return Err(Error::shape("adapt_features(text)", f_t.shape(), w_t.shape()));
    }
    let xv = tape.matmul(f_v, w_v)?;
    let xv = tape.add_row(&xv, params.get("adapter.v.b")?)?;
    let xt = tape.matmul(f_t, w_t)?;
    let xt = tape.add_row(&xt, params.get("adapter.t.b")?)?;
    Ok((xv, xt))
}

/// Add the per-item learnable bias rows; pad positions receive zero bias.
pub fn apply_modality_bias(
    tape: &Tape,
    x: &Tensor,
    table: &Tensor,
    table_rows: &[Option<usize>],
    enabled: bool,
) -> Result<Tensor> {
    if !enabled {
        return Ok(x.clone());
    }
    let bias = tape.gather_rows(table, table_rows)?;
    tape.add(x, &bias)
}

/// Everything observable about one forward pass besides Y itself.
#[derive(Clone, Debug, Default)]
pub struct ForwardDiagnostics {
    pub valid_from: usize,
    pub imag_residue: f32,
}

struct PaddedInput {
    ids: Vec<Option<usize>>,
    raw_diffs: Vec<f32>,
    valid_from: usize,
}

fn pad_sequence(seq: &UserSequence, catalog: &ItemCatalog, l_max: usize) -> Result<PaddedInput> {
    // leading pad items are padding by definition
    let first_real = seq.items.iter().position(|&i| i != 0).ok_or(Error::Contract {
        op: "forward_user",
        msg: "sequence is empty (or all pads)".into(),
    })?;
    let items = &seq.items[first_real..];
    let timestamps = &seq.timestamps[first_real..];
    if let Some(pos) = items.iter().position(|&i| i == 0) {
        return Err(Error::Contract {
            op: "forward_user",
            msg: format!("pad id inside sequence at position {pos}"),
        });
    }
    for &idx in items {
        if idx > catalog.len() {
            return Err(Error::ItemIndexRange { index: idx, size: catalog.len() });
        }
    }
    let keep = items.len().min(l_max);
    let start = items.len() - keep;
    let items = &items[start..];
    let timestamps = &timestamps[start..];
    let valid_from = l_max - keep;

    let mut ids = vec![None; l_max];
    for (i, &idx) in items.iter().enumerate() {
        ids[valid_from + i] = Some(idx);
    }
    let mut raw_diffs = vec![0.0f32; l_max];
    let diffs = time_diff_raw(timestamps)?;
    raw_diffs[valid_from..].copy_from_slice(&diffs);
    Ok(PaddedInput { ids, raw_diffs, valid_from })
}

fn feature_tensors(
    ids: &[Option<usize>],
    catalog: &ItemCatalog,
) -> Result<(Tensor, Tensor)> {
    let l = ids.len();
    let mut fv = vec![0.0f32; l * catalog.dim_v];
    let mut ft = vec![0.0f32; l * catalog.dim_t];
    for (i, idx) in ids.iter().enumerate() {
        if let Some(idx) = idx {
            fv[i * catalog.dim_v..(i + 1) * catalog.dim_v]
                .copy_from_slice(catalog.visual_row(*idx)?);
            ft[i * catalog.dim_t..(i + 1) * catalog.dim_t].copy_from_slice(catalog.text_row(*idx)?);
        }
    }
    Ok((Tensor::new(&[l, catalog.dim_v], fv)?, Tensor::new(&[l, catalog.dim_t], ft)?))
}

fn bias_rows(ids: &[Option<usize>]) -> Vec<Option<usize>> {
    // bias tables are 0-based over real items
    ids.iter().map(|o| o.map(|idx| idx - 1)).collect()
}

/// Full forward pass returning the entire representation sequence Y (LxN).
pub fn forward_sequence(
    tape: &Tape,
    seq: &UserSequence,
    catalog: &ItemCatalog,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode<'_>,
) -> Result<(Tensor, ForwardDiagnostics)> {
    cfg.validate()?;
    let l = cfg.max_seq_len;
    let padded = pad_sequence(seq, catalog, l)?;
    let vf = padded.valid_from;
    let block = cfg.block_cfg();

    let (f_v, f_t) = feature_tensors(&padded.ids, catalog)?;
    let (mut xv, mut xt) = adapt_features(tape, &f_v, &f_t, params)?;
    if cfg.use_id_bias {
        let rows = bias_rows(&padded.ids);
        xv = apply_modality_bias(tape, &xv, params.get("bias.v.table")?, &rows, true)?;
        xt = apply_modality_bias(tape, &xt, params.get("bias.t.table")?, &rows, true)?;
    }

    // normalized time-difference signal (only consumed by the time path)
    let zeros = Tensor::zeros(&[l]);
    let mut dv = if cfg.time_aware {
        tape.layer_norm_vec(
            &Tensor::vector(&padded.raw_diffs),
            params.get("time.ln.gamma")?,
            params.get("time.ln.beta")?,
            cfg.ln_eps,
            vf,
        )?
    } else {
        zeros.clone()
    };
    let mut dt = dv.clone();

    for layer in 0..cfg.layers {
        let refs = AlignStageRefs {
            tissd_v: tissd_refs(params, &format!("align.{layer}.tissd_v"), cfg)?,
            tissd_t: tissd_refs(params, &format!("align.{layer}.tissd_t"), cfg)?,
            ffn_v: ffn_refs(params, &format!("align.{layer}.ffn_v"))?,
            ffn_t: ffn_refs(params, &format!("align.{layer}.ffn_t"))?,
            ln1_v: ln_refs(params, &format!("align.{layer}.ln1_v"))?,
            ln1_t: ln_refs(params, &format!("align.{layer}.ln1_t"))?,
            ln2_v: ln_refs(params, &format!("align.{layer}.ln2_v"))?,
            ln2_t: ln_refs(params, &format!("align.{layer}.ln2_t"))?,
        };
        let (pv, pt, dhv, dht) = align_modalities(tape, &xv, &xt, &dv, &dt, &refs, &block, vf, mode)?;
        xv = pv;
        xt = pt;
        dv = dhv;
        dt = dht;
    }

    let mut imag_residue = 0.0f32;
    let mut sv = xv;
    let mut st = xt;
    let mut y = None;
    for layer in 0..cfg.layers {
        let d_fused = if cfg.time_aware {
            let fused = fuse_time_signals(tape, &dv, &dt, &fusion_refs(params, layer, cfg)?)?;
            imag_residue = imag_residue.max(fused.imag_residue);
            fused.values
        } else {
            zeros.clone()
        };
        let ticossd = cross_refs(params, layer, cfg)?;
        let m = ticossd_forward(tape, &sv, &st, &d_fused, &ticossd, &block, vf)?;
        let out = output_head(
            tape,
            &m,
            &sv,
            &st,
            &ffn_refs(params, &format!("cross.{layer}.ffn"))?,
            &ln_refs(params, &format!("cross.{layer}.ln1"))?,
            &ln_refs(params, &format!("cross.{layer}.ln2"))?,
            cfg.ln_eps,
            mode,
        )?;
        sv = out.clone();
        st = out.clone();
        y = Some(out);
    }
    let y = y.expect("at least one layer");
    Ok((y, ForwardDiagnostics { valid_from: vf, imag_residue }))
}

/// User-interest representation: the final row of Y, which the left-pad
/// contract keeps aligned with the most recent real interaction.
pub fn forward_user(
    tape: &Tape,
    seq: &UserSequence,
    catalog: &ItemCatalog,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode<'_>,
) -> Result<(Tensor, ForwardDiagnostics)> {
    let (y, diag) = forward_sequence(tape, seq, catalog, params, cfg, mode)?;
    let u = tape.slice_rows(&y, cfg.max_seq_len - 1, cfg.max_seq_len)?;
    Ok((u, diag))
}

/// Candidate-side representations: adapted features of both modalities
/// summed, plus bias rows when enabled. Missing-image items contribute only
/// the text term through their zero visual features.
pub fn candidate_reprs(
    tape: &Tape,
    catalog: &ItemCatalog,
    params: &ModelParams,
    cfg: &ModelConfig,
    ids: &[usize],
) -> Result<Tensor> {
    let c = ids.len();
    let mut fv = vec![0.0f32; c * catalog.dim_v];
    let mut ft = vec![0.0f32; c * catalog.dim_t];
    for (i, &idx) in ids.iter().enumerate() {
        fv[i * catalog.dim_v..(i + 1) * catalog.dim_v].copy_from_slice(catalog.visual_row(idx)?);
        ft[i * catalog.dim_t..(i + 1) * catalog.dim_t].copy_from_slice(catalog.text_row(idx)?);
    }
    let (mut rv, mut rt) = adapt_features(
        tape,
        &Tensor::new(&[c, catalog.dim_v], fv)?,
        &Tensor::new(&[c, catalog.dim_t], ft)?,
        params,
    )?;
    if cfg.use_id_bias {
        let rows: Vec<Option<usize>> = ids.iter().map(|&idx| Some(idx - 1)).collect();
        rv = apply_modality_bias(tape, &rv, params.get("bias.v.table")?, &rows, true)?;
        rt = apply_modality_bias(tape, &rt, params.get("bias.t.table")?, &rows, true)?;
    }
    tape.add(&rv, &rt)
}

/// Inner-product scores of one user representation against candidate items.
pub fn score_candidates(
    tape: &Tape,
    u: &Tensor,
    catalog: &ItemCatalog,
    params: &ModelParams,
    cfg: &ModelConfig,
    ids: &[usize],
) -> Result<Tensor> {
    let reprs = candidate_reprs(tape, catalog, params, cfg, ids)?;
    let u_row = if u.shape().rank() == 1 { tape.reshape(u, &[1, u.numel()])? } else { u.clone() };
    let scores = tape.matmul(&u_row, &tape.transpose(&reprs)?)?;
    tape.reshape(&scores, &[ids.len()])
}
