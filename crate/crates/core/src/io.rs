//! File formats: binary feature matrices, checkpoints with a JSON manifest
//! mirror, `key = value` config files, and the prepared-dataset directory.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{DatasetSplit, EvalCase, ItemCatalog, UserSequence};
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, ModelParams};
use crate::ssd::SsdMode;
use crate::temporal::DecayKind;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const FEATURE_MAGIC: &[u8; 4] = b"MMF1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";

/// One modality's feature matrix with per-item presence flags.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// 0 = visual, 1 = text.
    pub modality: u8,
    pub num_items: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub presence: Vec<bool>,
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), msg: msg.into() }
}

pub fn write_feature_file(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if m.data.len() != m.num_items * m.dim || m.presence.len() != m.num_items {
        return Err(fmt_err(path, "inconsistent feature matrix sizes"));
    }
    let mut buf = Vec::with_capacity(17 + m.data.len() * 4 + m.presence.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.push(m.modality);
    buf.extend_from_slice(&(m.num_items as u32).to_le_bytes());
    buf.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(m.presence.iter().map(|&p| p as u8));
    std::fs::write(path, buf).map_err(|e| Error::io(path.display(), e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path.display(), e))?;
    if buf.len() < 17 {
        return Err(fmt_err(path, "truncated header"));
    }
    if &buf[0..4] != FEATURE_MAGIC {
        return Err(fmt_err(path, "bad magic (expected MMF1)"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != 1 {
        return Err(fmt_err(path, format!("unsupported version {version}")));
    }
    let modality = buf[8];
    let num_items = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(buf[13..17].try_into().unwrap()) as usize;
    let want = 17 + num_items * dim * 4 + num_items;
    if buf.len() != want {
        return Err(fmt_err(path, format!("size mismatch: {} bytes, expected {want}", buf.len())));
    }
    let mut data = Vec::with_capacity(num_items * dim);
    for i in 0..num_items * dim {
        let off = 17 + i * 4;
        data.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
    }
    let presence = buf[17 + num_items * dim * 4..].iter().map(|&b| b != 0).collect();
    Ok(FeatureMatrix { modality, num_items, dim, data, presence })
}

/// Row -> item_id sidecar, one id per line.
pub fn write_items_idx(path: &Path, ids: &[String]) -> Result<()> {
    let mut out = String::new();
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display(), e))
}

pub fn read_items_idx(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Assemble a catalog from the sidecar and both feature files in `dir`.
pub fn load_catalog(dir: &Path) -> Result<ItemCatalog> {
    let ids = read_items_idx(&dir.join("items.idx"))?;
    let fv = read_feature_file(&dir.join("features_v.bin"))?;
    let ft = read_feature_file(&dir.join("features_t.bin"))?;
    if fv.num_items != ids.len() || ft.num_items != ids.len() {
        return Err(fmt_err(dir, format!(
            "feature row counts ({}, {}) do not match items.idx ({})",
            fv.num_items,
            ft.num_items,
            ids.len()
        )));
    }
    ItemCatalog::new(ids, fv.dim, ft.dim, fv.data, ft.data, fv.presence)
}

// ---- checkpoints -------------------------------------------------------------

#[derive(serde::Serialize)]
struct ManifestEntry {
    name: String,
    alias_of: Option<String>,
    rank: usize,
    dims: Vec<usize>,
    numel: usize,
}

fn manifest_entries(params: &ModelParams) -> Vec<ManifestEntry> {
    let mut entries: Vec<ManifestEntry> = params
        .entries()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            alias_of: None,
            rank: t.shape().rank(),
            dims: t.dims().to_vec(),
            numel: t.numel(),
        })
        .collect();
    for (alias, canonical) in params.alias_entries() {
        let dims = params.get(canonical).map(|t| t.dims().to_vec()).unwrap_or_default();
        entries.push(ManifestEntry {
            name: alias.clone(),
            alias_of: Some(canonical.clone()),
            rank: dims.len(),
            dims: dims.clone(),
            numel: dims.iter().product(),
        });
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    entries
}

/// Deterministic JSON manifest: every tensor and alias with shapes.
pub fn manifest_json(params: &ModelParams) -> serde_json::Value {
    serde_json::json!({
        "version": 1u32,
        "total_scalars": params.total_scalars(),
        "tensor_count": params.entries().count(),
        "entries": manifest_entries(params),
    })
}

/// SHA-256 of the serialized manifest; distinct architectures hash apart.
pub fn manifest_hash(params: &ModelParams) -> String {
    let json = serde_json::to_vec(&manifest_json(params)).expect("manifest serializes");
    let mut hasher = Sha256::new();
    hasher.update(&json);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Binary checkpoint plus a `<path>.json` manifest mirror. Shared tensors are
/// written once; aliases are recorded by name.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());

    let tensors: Vec<(&String, &Tensor)> = params.entries().collect();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape().rank() as u32).to_le_bytes());
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    let aliases: Vec<(&String, &String)> = params.alias_entries().collect();
    buf.extend_from_slice(&(aliases.len() as u32).to_le_bytes());
    for (alias, canonical) in &aliases {
        for s in [alias, canonical] {
            let sb = s.as_bytes();
            buf.extend_from_slice(&(sb.len() as u32).to_le_bytes());
            buf.extend_from_slice(sb);
        }
    }
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display(), e))?;

    let mirror = serde_json::json!({
        "manifest": manifest_json(params),
        "manifest_sha256": manifest_hash(params),
    });
    let json_path = mirror_path(path);
    let mut f = std::fs::File::create(&json_path).map_err(|e| Error::io(json_path.display(), e))?;
    let text = serde_json::to_string_pretty(&mirror).expect("mirror serializes");
    f.write_all(text.as_bytes()).map_err(|e| Error::io(json_path.display(), e))?;
    Ok(())
}

pub fn mirror_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > buf.len() {
            return Err(fmt_err(path, "truncated checkpoint"));
        }
        let s = &buf[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let read_u32 = |off: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };
    let read_string = |off: &mut usize| -> Result<String> {
        let len = read_u32(off)? as usize;
        let bytes = take(off, len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| fmt_err(path, "non-utf8 name"))
    };

    if take(&mut off, 4)? != CHECKPOINT_MAGIC {
        return Err(fmt_err(path, "bad magic (expected MMCK)"));
    }
    let version = read_u32(&mut off)?;
    if version != 1 {
        return Err(fmt_err(path, format!("unsupported version {version}")));
    }
    let count = read_u32(&mut off)? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(&mut off)?;
        let rank = read_u32(&mut off)? as usize;
        if rank == 0 || rank > 3 {
            return Err(fmt_err(path, format!("bad rank {rank} for '{name}'")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut off)? as usize);
        }
        shapes.push((name, dims));
    }
    let alias_count = read_u32(&mut off)? as usize;
    let mut aliases = Vec::with_capacity(alias_count);
    for _ in 0..alias_count {
        let alias = read_string(&mut off)?;
        let canonical = read_string(&mut off)?;
        aliases.push((alias, canonical));
    }
    let mut params = ModelParams::new();
    for (name, dims) in shapes {
        let numel: usize = dims.iter().product();
        let bytes = take(&mut off, numel * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(&dims, data)?);
    }
    if off != buf.len() {
        return Err(fmt_err(path, "trailing bytes after payload"));
    }
    for (alias, canonical) in aliases {
        params.add_alias(alias, canonical);
    }
    Ok(params)
}

/// Shape compatibility between a loaded checkpoint and a fresh architecture:
/// identical names and dims everywhere except the listed exempt prefixes.
pub fn check_manifest_compat(
    loaded: &ModelParams,
    expected: &ModelParams,
    exempt_prefixes: &[&str],
) -> Result<()> {
    let exempt = |name: &str| exempt_prefixes.iter().any(|p| name.starts_with(p));
    for (name, t) in expected.entries() {
        if exempt(name) {
            continue;
        }
        let other = loaded
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if other.dims() != t.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                other.dims(),
                t.dims()
            )));
        }
    }
    for (name, _) in loaded.entries() {
        if !exempt(name) && !expected.contains(name) {
            return Err(Error::Checkpoint(format!("unexpected tensor '{name}'")));
        }
    }
    Ok(())
}

/// How a checkpoint was merged into a fresh parameter set.
#[derive(Clone, Copy, Debug, Default)]
pub struct TransferSummary {
    pub copied: usize,
    pub reinitialized: usize,
}

/// Initialize `fresh` from a loaded checkpoint for fine-tuning. Item-bias
/// tables are always re-initialized (they are item-indexed and domain-local);
/// adapters fall back to fresh initialization when the feature dimensions
/// differ. Any other mismatch is an incompatible checkpoint.
pub fn transfer_params(fresh: &mut ModelParams, loaded: &ModelParams) -> Result<TransferSummary> {
    let mut summary = TransferSummary::default();
    let names: Vec<String> = fresh.names().cloned().collect();
    for name in names {
        if name.starts_with("bias.") {
            summary.reinitialized += 1;
            continue;
        }
        let expected_dims = fresh.get(&name)?.dims().to_vec();
        match loaded.get(&name) {
            Ok(t) if t.dims() == expected_dims => {
                fresh.set_data(&name, t.data().to_vec())?;
                summary.copied += 1;
            }
            Ok(t) if name.starts_with("adapter.") => {
                let _ = t;
                summary.reinitialized += 1;
            }
            Ok(t) => {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for '{name}': checkpoint {:?}, model {expected_dims:?}",
                    t.dims()
                )));
            }
            Err(_) => {
                return Err(Error::Checkpoint(format!("missing tensor '{name}' in checkpoint")));
            }
        }
    }
    Ok(summary)
}

// ---- config files --------------------------------------------------------------

/// Full run configuration parsed from a `key = value` file.
#[derive(Clone, Copy, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kcore: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::default(), train: TrainConfig::default(), kcore: 5 }
    }
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig { model: ModelConfig::default(), train: TrainConfig::default(), kcore: 5 };
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
        match key {
            "latent_dim" => cfg.model.latent_dim = value.parse().map_err(|_| bad("integer"))?,
            "state_dim" => cfg.model.state_dim = value.parse().map_err(|_| bad("integer"))?,
            "conv_kernel" => cfg.model.conv_kernel = value.parse().map_err(|_| bad("integer"))?,
            "max_seq_len" => cfg.model.max_seq_len = value.parse().map_err(|_| bad("integer"))?,
            "layers" => cfg.model.layers = value.parse().map_err(|_| bad("integer"))?,
            "tau" => cfg.model.tau = value.parse().map_err(|_| bad("float"))?,
            "dropout" => cfg.model.dropout = value.parse().map_err(|_| bad("float"))?,
            "use_id_bias" => cfg.model.use_id_bias = parse_bool(value, lineno)?,
            "time_aware" => cfg.model.time_aware = parse_bool(value, lineno)?,
            "shared_align" => cfg.model.shared_align = parse_bool(value, lineno)?,
            "learnable_filter" => cfg.model.learnable_filter = parse_bool(value, lineno)?,
            "adaptive_filter" => cfg.model.adaptive_filter = parse_bool(value, lineno)?,
            "decay" => cfg.model.decay = value.parse::<DecayKind>()?,
            "ssd_mode" => cfg.model.ssd_mode = value.parse::<SsdMode>().map_err(|e| Error::Config(e.to_string()))?,
            "lr" => cfg.train.lr = value.parse().map_err(|_| bad("float"))?,
            "batch_size" => cfg.train.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "epochs" => cfg.train.epochs = value.parse().map_err(|_| bad("integer"))?,
            "patience" => cfg.train.patience = value.parse().map_err(|_| bad("integer"))?,
            "seed" => cfg.train.seed = value.parse().map_err(|_| bad("integer"))?,
            "grad_clip" => cfg.train.grad_clip = value.parse().map_err(|_| bad("float"))?,
            "kcore" => cfg.kcore = value.parse().map_err(|_| bad("integer"))?,
            other => {
                return Err(Error::Config(format!("line {}: unknown key '{other}'", lineno + 1)))
            }
        }
    }
    Ok(cfg)
}

fn parse_bool(value: &str, lineno: usize) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("line {}: bad bool '{value}'", lineno + 1))),
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
    parse_run_config(&text)
}

/// Apply an ablation on top of a run config.
pub fn apply_ablation(cfg: &mut RunConfig, ablation: Ablation) {
    ablation.apply(&mut cfg.model);
}

// ---- prepared dataset directory ---------------------------------------------------

fn seq_to_line(user: &str, seq: &UserSequence, target: Option<usize>) -> String {
    let items: Vec<String> = seq.items.iter().map(|i| i.to_string()).collect();
    let ts: Vec<String> = seq.timestamps.iter().map(|t| t.to_string()).collect();
    match target {
        Some(t) => format!("{user}\t{}\t{}\t{t}\n", items.join(","), ts.join(",")),
        None => format!("{user}\t{}\t{}\n", items.join(","), ts.join(",")),
    }
}

fn parse_seq_line(path: &Path, lineno: usize, line: &str, with_target: bool) -> Result<(String, UserSequence, Option<usize>)> {
    let parts: Vec<&str> = line.split('\t').collect();
    let expected = if with_target { 4 } else { 3 };
    if parts.len() != expected {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("expected {expected} tab-separated fields"),
        });
    }
    let parse_list = |s: &str, what: &str| -> Result<Vec<i64>> {
        s.split(',')
            .map(|v| {
                v.parse::<i64>().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("bad {what} '{v}'"),
                })
            })
            .collect()
    };
    let items: Vec<usize> = parse_list(parts[1], "item index")?.into_iter().map(|v| v as usize).collect();
    let timestamps = parse_list(parts[2], "timestamp")?;
    let target = if with_target {
        Some(parts[3].parse::<usize>().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad target '{}'", parts[3]),
        })?)
    } else {
        None
    };
    Ok((parts[0].to_string(), UserSequence { items, timestamps }, target))
}

/// Write the prepared dataset: catalog sidecar + filtered features + splits.
pub fn save_prepared(dir: &Path, split: &DatasetSplit, catalog: &ItemCatalog) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
    write_items_idx(&dir.join("items.idx"), &catalog.items)?;

    let n = catalog.len();
    let mut fv = Vec::with_capacity(n * catalog.dim_v);
    let mut ft = Vec::with_capacity(n * catalog.dim_t);
    let mut presence = Vec::with_capacity(n);
    for idx in 1..=n {
        fv.extend_from_slice(catalog.visual_row(idx)?);
        ft.extend_from_slice(catalog.text_row(idx)?);
        presence.push(catalog.item_has_image(idx)?);
    }
    write_feature_file(
        &dir.join("features_v.bin"),
        &FeatureMatrix { modality: 0, num_items: n, dim: catalog.dim_v, data: fv, presence: presence.clone() },
    )?;
    write_feature_file(
        &dir.join("features_t.bin"),
        &FeatureMatrix { modality: 1, num_items: n, dim: catalog.dim_t, data: ft, presence: vec![true; n] },
    )?;

    let mut train = String::new();
    for (user, region) in &split.train_regions {
        train.push_str(&seq_to_line(user, region, None));
    }
    std::fs::write(dir.join("train.tsv"), train).map_err(|e| Error::io(dir.display(), e))?;
    for (name, cases) in [("valid.tsv", &split.valid), ("test.tsv", &split.test)] {
        let mut text = String::new();
        for case in cases.iter() {
            text.push_str(&seq_to_line(&case.user_id, &case.prefix, Some(case.target)));
        }
        std::fs::write(dir.join(name), text).map_err(|e| Error::io(dir.display(), e))?;
    }
    Ok(())
}

/// Load a prepared dataset directory back.
pub fn load_prepared(dir: &Path) -> Result<(DatasetSplit, ItemCatalog)> {
    let catalog = load_catalog(dir)?;
    let mut split = DatasetSplit::default();

    let train_path = dir.join("train.tsv");
    let text = std::fs::read_to_string(&train_path).map_err(|e| Error::io(train_path.display(), e))?;
    for (lineno, line) in text.lines().enumerate() {
        let (user, seq, _) = parse_seq_line(&train_path, lineno, line, false)?;
        split.train_regions.insert(user, seq);
    }
    for (name, bucket) in [("valid.tsv", &mut split.valid), ("test.tsv", &mut split.test)] {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display(), e))?;
        for (lineno, line) in text.lines().enumerate() {
            let (user, seq, target) = parse_seq_line(&path, lineno, line, true)?;
            bucket.push(EvalCase { user_id: user, prefix: seq, target: target.unwrap() });
        }
    }
    Ok((split, catalog))
}
