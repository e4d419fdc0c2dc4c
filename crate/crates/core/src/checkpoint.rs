//! Checkpoint directories: a text manifest, a little-endian f64 blob, the
//! run config and the vocabularies the model was trained with.
//!
//! ```text
//! <dir>/manifest.txt   key/value lines, see `write_manifest`
//! <dir>/params.bin     parameter values, then Adam first moments, then
//!                      second moments, each in manifest order
//! <dir>/run_config.toml
//! <dir>/intent.vocab, intent.merges, snippet.vocab, snippet.merges
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backtrans::DualModel;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{AdamState, ParamStore, Tensor};
use crate::tokenizer::Vocabs;
use crate::transformer::TransformerConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";
pub const RUN_CONFIG: &str = "run_config.toml";

/// Everything needed to resume training or to decode.
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub vocabs: Vocabs,
    pub store: ParamStore,
    pub dual: DualModel,
    pub adam: AdamState,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn model_lines(out: &mut String, tag: &str, c: &TransformerConfig) {
    let _ = writeln!(
        out,
        "model {tag} num_layers={} num_heads={} d_model={} d_ff={} dropout={} src_vocab={} tgt_vocab={} max_len={}",
        c.num_layers, c.num_heads, c.d_model, c.d_ff, c.dropout, c.src_vocab, c.tgt_vocab, c.max_len
    );
}

fn blob_bytes(store: &ParamStore, adam: &AdamState) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(store.numel() * 3 * 8);
    let values = store.iter().map(|(_, p)| &p.value);
    for t in values.chain(adam.m.iter()).chain(adam.v.iter()) {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes
}

fn manifest_text(step: u64, dual: &DualModel, store: &ParamStore, adam: &AdamState, blob: &[u8]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format_version {FORMAT_VERSION}");
    let _ = writeln!(out, "step {step}");
    model_lines(&mut out, DualModel::F_PREFIX, dual.f.config());
    model_lines(&mut out, DualModel::G_PREFIX, dual.g.config());
    let mut offset = 0;
    for (_, p) in store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        let len = p.value.len();
        let _ = writeln!(out, "param {} shape={} offset={offset} len={len}", p.name, shape.join("x"));
        offset += len;
    }
    let _ = writeln!(
        out,
        "adam step={} beta1={} beta2={} epsilon={}",
        adam.step, adam.beta1, adam.beta2, adam.epsilon
    );
    let _ = writeln!(out, "blob_bytes {}", blob.len());
    let _ = writeln!(out, "blob_sha256 {}", hex(&Sha256::digest(blob)));
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a checkpoint into `dir`, replacing files already there.
pub fn save(
    dir: &Path,
    step: u64,
    config: &RunConfig,
    vocabs: &Vocabs,
    dual: &DualModel,
    store: &ParamStore,
    adam: &AdamState,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if adam.m.len() != store.len() {
        return Err(ck("optimizer state does not match the parameter store"));
    }
    let blob = blob_bytes(store, adam);
    let manifest = manifest_text(step, dual, store, adam, &blob);
    let write = |name: &str, data: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, data).map_err(|e| Error::io(p, e))
    };
    write(BLOB, &blob)?;
    write(RUN_CONFIG, config.to_toml()?.as_bytes())?;
    vocabs.save(dir)?;
    // manifest last: a directory with a manifest is complete
    write(MANIFEST, manifest.as_bytes())
}

struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Default)]
struct Manifest {
    version: Option<u32>,
    step: Option<u64>,
    models: Vec<(String, TransformerConfig)>,
    params: Vec<ParamEntry>,
    adam: Option<(u64, f64, f64, f64)>,
    blob_bytes: Option<usize>,
    sha: Option<String>,
}

fn kv<'a>(fields: &[&'a str], line_no: usize) -> Result<Vec<(&'a str, &'a str)>> {
    fields
        .iter()
        .map(|f| {
            f.split_once('=')
                .ok_or_else(|| ck(format!("manifest line {line_no}: expected key=value, found `{f}`")))
        })
        .collect()
}

fn num<T: std::str::FromStr>(v: &str, what: &str, line_no: usize) -> Result<T> {
    v.parse()
        .map_err(|_| ck(format!("manifest line {line_no}: bad {what} `{v}`")))
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut m = Manifest::default();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["format_version", v] => m.version = Some(num(v, "format version", n)?),
            ["step", v] => m.step = Some(num(v, "step", n)?),
            ["model", tag, rest @ ..] => {
                let mut c = TransformerConfig::default();
                for (k, v) in kv(rest, n)? {
                    match k {
                        "num_layers" => c.num_layers = num(v, k, n)?,
                        "num_heads" => c.num_heads = num(v, k, n)?,
                        "d_model" => c.d_model = num(v, k, n)?,
                        "d_ff" => c.d_ff = num(v, k, n)?,
                        "dropout" => c.dropout = num(v, k, n)?,
                        "src_vocab" => c.src_vocab = num(v, k, n)?,
                        "tgt_vocab" => c.tgt_vocab = num(v, k, n)?,
                        "max_len" => c.max_len = num(v, k, n)?,
                        _ => return Err(ck(format!("manifest line {n}: unknown model field `{k}`"))),
                    }
                }
                m.models.push((tag.to_string(), c));
            }
            ["param", name, rest @ ..] => {
                let mut e = ParamEntry {
                    name: name.to_string(),
                    shape: Vec::new(),
                    offset: 0,
                    len: 0,
                };
                for (k, v) in kv(rest, n)? {
                    match k {
                        "shape" => {
                            e.shape = v.split('x').map(|d| num(d, "shape", n)).collect::<Result<_>>()?;
                        }
                        "offset" => e.offset = num(v, k, n)?,
                        "len" => e.len = num(v, k, n)?,
                        _ => return Err(ck(format!("manifest line {n}: unknown param field `{k}`"))),
                    }
                }
                m.params.push(e);
            }
            ["adam", rest @ ..] => {
                let mut a = (0, 0.0, 0.0, 0.0);
                for (k, v) in kv(rest, n)? {
                    match k {
                        "step" => a.0 = num(v, k, n)?,
                        "beta1" => a.1 = num(v, k, n)?,
                        "beta2" => a.2 = num(v, k, n)?,
                        "epsilon" => a.3 = num(v, k, n)?,
                        _ => return Err(ck(format!("manifest line {n}: unknown adam field `{k}`"))),
                    }
                }
                m.adam = Some(a);
            }
            ["blob_bytes", v] => m.blob_bytes = Some(num(v, "blob size", n)?),
            ["blob_sha256", v] => m.sha = Some(v.to_string()),
            _ => return Err(ck(format!("manifest line {n}: unrecognised `{line}`"))),
        }
    }
    Ok(m)
}

fn model_config(m: &Manifest, tag: &str) -> Result<TransformerConfig> {
    m.models
        .iter()
        .find(|(t, _)| t == tag)
        .map(|(_, c)| c.clone())
        .ok_or_else(|| ck(format!("manifest has no model {tag}")))
}

/// Loads and validates a checkpoint: format version, blob size and digest,
/// and every parameter's name, shape and extent against the model the
/// manifest describes.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m = parse_manifest(&text)?;
    if m.version != Some(FORMAT_VERSION) {
        return Err(ck(format!("unsupported format version {:?}", m.version)));
    }
    let step = m.step.ok_or_else(|| ck("manifest has no step"))?;
    let bpath = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if Some(blob.len()) != m.blob_bytes {
        return Err(ck(format!("blob is {} bytes, manifest says {:?}", blob.len(), m.blob_bytes)));
    }
    if m.sha.as_deref() != Some(hex(&Sha256::digest(&blob)).as_str()) {
        return Err(ck("blob digest does not match the manifest"));
    }
    let f_cfg = model_config(&m, DualModel::F_PREFIX)?;
    let g_cfg = model_config(&m, DualModel::G_PREFIX)?;
    if g_cfg.src_vocab != f_cfg.tgt_vocab || g_cfg.tgt_vocab != f_cfg.src_vocab {
        return Err(ck("F and G vocabulary sizes are not mirrored"));
    }

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dual = DualModel::new(&f_cfg, f_cfg.src_vocab, f_cfg.tgt_vocab, &mut store, &mut rng)?;
    if dual.g.config() != &g_cfg {
        return Err(ck("F and G architectures differ"));
    }
    if m.params.len() != store.len() {
        return Err(ck(format!("manifest lists {} parameters, model has {}", m.params.len(), store.len())));
    }
    let total: usize = m.params.iter().map(|e| e.len).sum();
    if blob.len() != total * 3 * 8 {
        return Err(ck("blob size does not match parameter extents"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut adam_m = Vec::with_capacity(store.len());
    let mut adam_v = Vec::with_capacity(store.len());
    let mut expected_offset = 0;
    for e in &m.params {
        let id = store
            .id(&e.name)
            .ok_or_else(|| ck(format!("unknown parameter `{}`", e.name)))?;
        let shape = store.value(id).shape().to_vec();
        if shape != e.shape || e.len != shape.iter().product::<usize>() || e.offset != expected_offset {
            return Err(ck(format!(
                "parameter `{}`: manifest shape {:?} at {} does not match model shape {shape:?}",
                e.name, e.shape, e.offset
            )));
        }
        expected_offset += e.len;
        let slice = |base: usize| Tensor::new(shape.clone(), values[base + e.offset..base + e.offset + e.len].to_vec());
        *store.value_mut(id) = slice(0)?;
        adam_m.push(slice(total)?);
        adam_v.push(slice(2 * total)?);
    }
    let (astep, beta1, beta2, epsilon) = m.adam.ok_or_else(|| ck("manifest has no adam line"))?;
    let config = RunConfig::load(&dir.join(RUN_CONFIG))?;
    let vocabs = Vocabs::load(dir)?;
    if vocabs.intent.len() != f_cfg.src_vocab || vocabs.snippet.len() != f_cfg.tgt_vocab {
        return Err(ck("bundled vocabularies do not match the model's vocabulary sizes"));
    }
    Ok(Checkpoint {
        step,
        config,
        vocabs,
        store,
        dual,
        adam: AdamState {
            m: adam_m,
            v: adam_v,
            step: astep,
            beta1,
            beta2,
            epsilon,
        },
    })
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save(dir, self.step, &self.config, &self.vocabs, &self.dual, &self.store, &self.adam)
    }
}
