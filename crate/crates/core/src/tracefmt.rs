// SPDX-License-Identifier: Apache-2.0

//! Trace bundles: the model internals consumed by the metrics.
//!
//! On disk a bundle is a directory:
//!
//! | file             | content                                              |
//! |------------------|------------------------------------------------------|
//! | `manifest.json`  | dimensions, ids, generated text, metadata            |
//! | `attention.f32`  | `[L, H, T, n]` post-softmax rows, little-endian f32  |
//! | `hidden.f32`     | `[T, d]` answer hidden states                        |
//! | `units.f32`      | `[U, d]` unit reference embeddings                   |
//! | `steps.json`     | `[{chosen, max}]` per generated answer token         |
//! | `offsets.json`   | `[[start, end]]` char offsets per source token       |
//!
//! See `FORMAT.md` at the repository root for the full field reference.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cueminer::CueSets;
use crate::error::{Error, Result};
use crate::kgstore::UnitId;
use crate::linearizer::{PromptLayout, Span};

pub const FORMAT_VERSION: u32 = 1;
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

const MANIFEST: &str = "manifest.json";
const ATTENTION: &str = "attention.f32";
const HIDDEN: &str = "hidden.f32";
const UNITS: &str = "units.f32";
const STEPS: &str = "steps.json";
const OFFSETS: &str = "offsets.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepProb {
    /// Probability of the token that was emitted.
    pub chosen: f64,
    /// Largest probability in the step's distribution.
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub model: String,
    pub decoding: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// Everything captured for one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub sample_id: String,
    pub generated_text: String,
    pub layers: usize,
    pub heads: usize,
    /// Number of answer tokens `T`.
    pub answer_len: usize,
    /// Number of source tokens `n`.
    pub source_len: usize,
    pub hidden_dim: usize,
    /// `[L, H, T, n]`, row-major.
    pub attention: Vec<f32>,
    /// `[T, d]`.
    pub answer_hidden: Vec<f32>,
    pub unit_ids: Vec<UnitId>,
    /// `[unit_ids.len(), d]`.
    pub unit_embeddings: Vec<f32>,
    pub token_offsets: Vec<(usize, usize)>,
    pub step_probs: Vec<StepProb>,
    pub hidden_layer_index: i64,
    pub metadata: TraceMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    sample_id: String,
    generated_text: String,
    layers: usize,
    heads: usize,
    answer_len: usize,
    source_len: usize,
    hidden_dim: usize,
    unit_ids: Vec<UnitId>,
    hidden_layer_index: i64,
    metadata: TraceMetadata,
}

impl TraceBundle {
    pub fn attention_row(&self, layer: usize, head: usize, row: usize) -> &[f32] {
        let n = self.source_len;
        let base = ((layer * self.heads + head) * self.answer_len + row) * n;
        &self.attention[base..base + n]
    }

    pub fn hidden(&self, t: usize) -> &[f32] {
        &self.answer_hidden[t * self.hidden_dim..(t + 1) * self.hidden_dim]
    }

    pub fn unit_embedding(&self, idx: usize) -> &[f32] {
        &self.unit_embeddings[idx * self.hidden_dim..(idx + 1) * self.hidden_dim]
    }

    /// Embedding row for `unit`, if the bundle carries one.
    pub fn embedding_of(&self, unit: UnitId) -> Option<&[f32]> {
        self.unit_ids.iter().position(|&u| u == unit).map(|i| self.unit_embedding(i))
    }

    /// Check shapes and every numeric invariant.
    pub fn validate(&self) -> Result<()> {
        let (l, h, t, n, d) = (self.layers, self.heads, self.answer_len, self.source_len, self.hidden_dim);
        if t == 0 {
            return Err(Error::Bundle("answer_len must be at least 1".into()));
        }
        if d == 0 {
            return Err(Error::Bundle("hidden_dim must be at least 1".into()));
        }
        if l == 0 || h == 0 || n == 0 {
            return Err(Error::Bundle("layers, heads and source_len must be at least 1".into()));
        }
        let expect = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Shape(format!("{name} has {got} values, expected {want}")))
            }
        };
        expect("attention", self.attention.len(), l * h * t * n)?;
        expect("answer_hidden", self.answer_hidden.len(), t * d)?;
        expect("unit_embeddings", self.unit_embeddings.len(), self.unit_ids.len() * d)?;
        expect("token_offsets", self.token_offsets.len(), n)?;
        expect("step_probs", self.step_probs.len(), t)?;

        let mut seen = HashSet::new();
        for u in &self.unit_ids {
            if !seen.insert(*u) {
                return Err(Error::Bundle(format!("unit {u} listed twice")));
            }
        }
        for layer in 0..l {
            for head in 0..h {
                for row in 0..t {
                    let r = self.attention_row(layer, head, row);
                    if let Some(v) = r.iter().find(|v| !v.is_finite() || **v < 0.0) {
                        return Err(Error::Bundle(format!(
                            "attention weight {v} at layer {layer}, head {head}, row {row}"
                        )));
                    }
                    let sum: f64 = r.iter().map(|&v| v as f64).sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::RowSum { layer, head, row, sum });
                    }
                }
            }
        }
        if self.answer_hidden.iter().chain(&self.unit_embeddings).any(|v| !v.is_finite()) {
            return Err(Error::Bundle("non-finite hidden state or embedding".into()));
        }
        for (i, s) in self.step_probs.iter().enumerate() {
            let ok = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
            if !ok(s.chosen) || !ok(s.max) {
                return Err(Error::Bundle(format!("step {i} probability outside [0, 1]")));
            }
            if s.chosen > s.max + 1e-6 {
                return Err(Error::Bundle(format!("step {i} chosen probability exceeds max")));
            }
        }
        let mut prev = (0usize, 0usize);
        for (i, &(s, e)) in self.token_offsets.iter().enumerate() {
            if s > e || (i > 0 && (s < prev.0 || e < prev.1)) {
                return Err(Error::Bundle(format!("token offsets not monotone at token {i}")));
            }
            prev = (s, e);
        }
        Ok(())
    }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f32(dir: &Path, name: &str, want: usize) -> Result<Vec<f32>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != want * 4 {
        return Err(Error::Shape(format!("{name} has {} bytes, expected {}", bytes.len(), want * 4)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read and validate a bundle directory.
pub fn read_bundle(dir: &Path) -> Result<TraceBundle> {
    let m: Manifest = read_json(dir, MANIFEST)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Bundle(format!("unsupported format version {}", m.format_version)));
    }
    let (l, h, t, n, d) = (m.layers, m.heads, m.answer_len, m.source_len, m.hidden_dim);
    let bundle = TraceBundle {
        attention: read_f32(dir, ATTENTION, l * h * t * n)?,
        answer_hidden: read_f32(dir, HIDDEN, t * d)?,
        unit_embeddings: read_f32(dir, UNITS, m.unit_ids.len() * d)?,
        step_probs: read_json(dir, STEPS)?,
        token_offsets: read_json(dir, OFFSETS)?,
        sample_id: m.sample_id,
        generated_text: m.generated_text,
        layers: l,
        heads: h,
        answer_len: t,
        source_len: n,
        hidden_dim: d,
        unit_ids: m.unit_ids,
        hidden_layer_index: m.hidden_layer_index,
        metadata: m.metadata,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Validate and write `bundle` into `dir` (created if needed).
pub fn write_bundle(bundle: &TraceBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        sample_id: bundle.sample_id.clone(),
        generated_text: bundle.generated_text.clone(),
        layers: bundle.layers,
        heads: bundle.heads,
        answer_len: bundle.answer_len,
        source_len: bundle.source_len,
        hidden_dim: bundle.hidden_dim,
        unit_ids: bundle.unit_ids.clone(),
        hidden_layer_index: bundle.hidden_layer_index,
        metadata: bundle.metadata.clone(),
    };
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    write_atomic(&dir.join(ATTENTION), &f32_bytes(&bundle.attention))?;
    write_atomic(&dir.join(HIDDEN), &f32_bytes(&bundle.answer_hidden))?;
    write_atomic(&dir.join(UNITS), &f32_bytes(&bundle.unit_embeddings))?;
    write_atomic(&dir.join(STEPS), &serde_json::to_vec(&bundle.step_probs)?)?;
    write_atomic(&dir.join(OFFSETS), &serde_json::to_vec(&bundle.token_offsets)?)?;
    Ok(())
}

/// Targets for a synthetic bundle with known SSR and SAS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    /// Attention mass placed on core-cue tokens in every row.
    pub core_mass: f64,
    /// Per-answer-token max cosine to the supporting units.
    pub token_sas: Vec<f64>,
    pub layers: usize,
    pub heads: usize,
    pub source_len: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub generated_text: String,
}

/// Split `chars` characters into `n` contiguous, near-equal tokens.
pub fn chunk_offsets(chars: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|k| (k * chars / n, (k + 1) * chars / n)).collect()
}

// Attention masses are multiples of 2^-24 so that f32 storage and f64
// summation are exact.
const MASS_QUANTUM: f64 = (1u64 << 24) as f64;

fn spread(total_quanta: u64, slots: usize) -> impl Iterator<Item = f32> {
    let base = total_quanta / slots as u64;
    let extra = (total_quanta % slots as u64) as usize;
    (0..slots).map(move |i| ((base + (i < extra) as u64) as f64 / MASS_QUANTUM) as f32)
}

// Unit embeddings are 40·e0 + 9·e(1+i): a 9-40-41 right triangle, so their
// norms are exact and any two distinct units have cosine 1600/1681.
const SHARED: f32 = 40.0;
const OWN: f32 = 9.0;
const NORM_SQ: f64 = 1681.0;
const SLACK_DIMS: usize = 4;

/// Fill `out` with f32 values whose squares sum to `target` (nearly exactly).
fn sum_of_squares(target: f64, out: &mut [f32]) {
    let mut rem = target;
    for slot in out.iter_mut() {
        if rem <= 0.0 {
            break;
        }
        let mut x = rem.sqrt() as f32;
        while (x as f64) * (x as f64) > rem && x > 0.0 {
            x = f32::from_bits(x.to_bits() - 1);
        }
        *slot = x;
        rem -= (x as f64) * (x as f64);
    }
}

/// Build a bundle whose SSR is exactly `2p − 1` (with `p` quantized to
/// multiples of 2^-24) and whose per-token SAS equals `token_sas` to within
/// 1e-12, for the given layout and cue sets.
///
/// Source tokens are `source_len` equal character chunks of the prompt. The
/// support units get embeddings; targets below `-40/41` are only reachable
/// with a single support unit.
pub fn generate_planted(spec: &PlantedSpec, layout: &PromptLayout, cues: &CueSets) -> Result<TraceBundle> {
    let (l, h, n, d) = (spec.layers, spec.heads, spec.source_len, spec.hidden_dim);
    let t = spec.token_sas.len();
    if l == 0 || h == 0 || n == 0 || d == 0 || t == 0 {
        return Err(Error::Infeasible("all dimensions must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.core_mass) {
        return Err(Error::Infeasible(format!("core mass {} outside [0, 1]", spec.core_mass)));
    }
    let chars = layout.char_len();
    if n > chars {
        return Err(Error::Infeasible(format!("{n} tokens requested for a {chars}-char prompt")));
    }
    let offsets = chunk_offsets(chars, n);

    let core_spans: Vec<Span> = cues.core.iter().filter_map(|&u| layout.span_of(u)).collect();
    let in_core: Vec<bool> =
        offsets.iter().map(|&(s, e)| core_spans.iter().any(|c| c.overlaps(&Span::new(s, e)))).collect();
    let core_tokens = in_core.iter().filter(|&&b| b).count();
    let rest_tokens = n - core_tokens;
    let core_quanta = (spec.core_mass * MASS_QUANTUM).round() as u64;
    let rest_quanta = (1u64 << 24) - core_quanta;
    if core_quanta > 0 && core_tokens == 0 {
        return Err(Error::Infeasible("no source token overlaps a core unit".into()));
    }
    if rest_quanta > 0 && rest_tokens == 0 {
        return Err(Error::Infeasible("every source token overlaps a core unit".into()));
    }
    let mut row = vec![0f32; n];
    {
        let mut core_vals = spread(core_quanta, core_tokens.max(1));
        let mut rest_vals = spread(rest_quanta, rest_tokens.max(1));
        for (j, &c) in in_core.iter().enumerate() {
            row[j] = if c { core_vals.next() } else { rest_vals.next() }.unwrap_or(0.0);
        }
    }
    let attention: Vec<f32> = std::iter::repeat_n(&row, l * h * t).flatten().copied().collect();

    let units = &cues.support;
    let u = units.len();
    if u == 0 {
        return Err(Error::Infeasible("empty support set".into()));
    }
    if d < u + 1 + SLACK_DIMS {
        return Err(Error::Infeasible(format!("hidden_dim {d} too small for {u} units (need {})", u + 1 + SLACK_DIMS)));
    }
    let mut unit_embeddings = vec![0f32; u * d];
    for i in 0..u {
        unit_embeddings[i * d] = SHARED;
        unit_embeddings[i * d + 1 + i] = OWN;
    }
    let slack = u + 1;
    let max_negative = SHARED as f64 / NORM_SQ.sqrt();
    let mut answer_hidden = vec![0f32; t * d];
    for (ti, &c) in spec.token_sas.iter().enumerate() {
        if !(-1.0..=1.0).contains(&c) {
            return Err(Error::Infeasible(format!("token SAS target {c} outside [-1, 1]")));
        }
        let hrow = &mut answer_hidden[ti * d..(ti + 1) * d];
        if c.abs() < 1e-12 {
            hrow[slack] = 1.0;
        } else if c > 0.0 || u == 1 {
            let k = ti % u;
            let sign = c.signum() as f32;
            hrow[0] = sign * SHARED;
            hrow[1 + k] = sign * OWN;
            sum_of_squares(NORM_SQ * (1.0 / (c * c) - 1.0), &mut hrow[slack..slack + SLACK_DIMS]);
        } else {
            if -c > max_negative {
                return Err(Error::Infeasible(format!(
                    "token SAS target {c} below {} with {u} support units",
                    -max_negative
                )));
            }
            hrow[0] = -1.0;
            let r = max_negative / -c;
            sum_of_squares((r * r - 1.0).max(0.0), &mut hrow[slack..slack + SLACK_DIMS]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let step_probs = (0..t)
        .map(|_| {
            let chosen: f64 = rng.gen_range(0.05..1.0);
            let max = chosen + rng.gen_range(0.0..1.0) * (1.0 - chosen);
            StepProb { chosen, max }
        })
        .collect();

    let mut extra = BTreeMap::new();
    extra.insert("tokenizer".into(), "uniform-char-chunks".into());
    extra.insert("planted_core_mass".into(), (core_quanta as f64 / MASS_QUANTUM).to_string());
    let generated_text = if spec.generated_text.is_empty() { "ans:".to_string() } else { spec.generated_text.clone() };
    let bundle = TraceBundle {
        sample_id: layout.sample_id.clone(),
        generated_text,
        layers: l,
        heads: h,
        answer_len: t,
        source_len: n,
        hidden_dim: d,
        attention,
        answer_hidden,
        unit_ids: units.clone(),
        unit_embeddings,
        token_offsets: offsets,
        step_probs,
        hidden_layer_index: -2,
        metadata: TraceMetadata { model: "planted".into(), decoding: "greedy".into(), extra },
    };
    bundle.validate()?;
    Ok(bundle)
}
