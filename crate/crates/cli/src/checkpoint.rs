//! Checkpoint directories: `manifest.json` plus raw little-endian payloads.
//!
//! Layout:
//! - `layer{l}.weight.f32`, `layer{l}.bias.f32` for every weighted layer
//! - `layer{l}.mask` bitset, weights row-major then biases, LSB first
//! - `conductances.f64` for mapped checkpoints: every plane of every tile
//!   in map order
//!
//! Serialization is canonical, so loading and saving again reproduces the
//! same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use xbprune_core::admm::QuantScheme;
use xbprune_core::mapper::{CrossbarMap, HardwareConfig, LayerMap, Tile, TileGrid};
use xbprune_core::{LayerMask, LayerSpec, Network, PruneMask, Shape3};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Baseline,
    Admm,
    Masked,
    Purified,
    Quantized,
    Mapped,
}

impl StageTag {
    pub const ALL: [StageTag; 6] =
        [StageTag::Baseline, StageTag::Admm, StageTag::Masked, StageTag::Purified, StageTag::Quantized, StageTag::Mapped];

    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Baseline => "baseline",
            StageTag::Admm => "admm",
            StageTag::Masked => "masked",
            StageTag::Purified => "purified",
            StageTag::Quantized => "quantized",
            StageTag::Mapped => "mapped",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageTag {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        StageTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage tag {s:?}")))
    }
}

/// A network and everything the pipeline knows about it at one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub config_hash: String,
    pub seed: u64,
    pub net: Network<f32>,
    pub mask: PruneMask,
    pub schemes: Option<Vec<QuantScheme>>,
    pub map: Option<CrossbarMap>,
    /// Scalar results recorded by the producing stage (accuracy etc).
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    layer: usize,
    rows: usize,
    cols: usize,
    retained: usize,
    file: String,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TileEntry {
    row_tile: usize,
    col_tile: usize,
    row_start: usize,
    rows_used: usize,
    col_start: usize,
    cols_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerMapEntry {
    layer: usize,
    n: usize,
    k: usize,
    input_rows: Vec<usize>,
    output_cols: Vec<usize>,
    memr_max: f64,
    memr_min: f64,
    grid: TileGrid,
    tiles: Vec<TileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapEntry {
    hardware: HardwareConfig,
    layers: Vec<LayerMapEntry>,
    file: String,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    stage: StageTag,
    config_hash: String,
    seed: u64,
    input: Shape3,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    masks: Vec<MaskEntry>,
    schemes: Option<Vec<QuantScheme>>,
    map: Option<MapEntry>,
    metrics: BTreeMap<String, f64>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f64_bytes(v: impl Iterator<Item = f64>) -> Vec<u8> {
    v.flat_map(|x| x.to_le_bytes()).collect()
}

fn mask_bytes(m: &LayerMask) -> Vec<u8> {
    let bits: Vec<bool> = m.weights.iter().chain(&m.biases).copied().collect();
    bits.chunks(8).map(|c| c.iter().enumerate().fold(0u8, |b, (i, &x)| b | (u8::from(x) << i))).collect()
}

fn bits_from(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

impl Checkpoint {
    /// Payload files in write order, plus the manifest describing them.
    fn encode(&self) -> (Manifest, Vec<(String, Vec<u8>)>) {
        let mut files = Vec::new();
        let mut tensors = Vec::new();
        let mut masks = Vec::new();
        for (l, ((w, b), m)) in self.net.weighted().zip(&self.mask.layers).enumerate() {
            for (name, shape, data) in [("weight", w.shape.clone(), f32_bytes(&w.values)), ("bias", vec![b.len()], f32_bytes(b))] {
                let file = format!("layer{l}.{name}.f32");
                tensors.push(TensorEntry { name: format!("layer{l}.{name}"), file: file.clone(), shape, bytes: data.len() });
                files.push((file, data));
            }
            let data = mask_bytes(m);
            let file = format!("layer{l}.mask");
            masks.push(MaskEntry { layer: l, rows: m.rows, cols: m.cols, retained: m.retained(), file: file.clone(), bytes: data.len() });
            files.push((file, data));
        }
        let map = self.map.as_ref().map(|map| {
            let cells = map.layers.iter().flat_map(|l| &l.tiles).flat_map(|t| &t.planes).flatten().copied();
            let data = f64_bytes(cells);
            let file = "conductances.f64".to_string();
            let entry = MapEntry {
                hardware: map.hardware.clone(),
                layers: map
                    .layers
                    .iter()
                    .map(|l| LayerMapEntry {
                        layer: l.layer,
                        n: l.n,
                        k: l.k,
                        input_rows: l.input_rows.clone(),
                        output_cols: l.output_cols.clone(),
                        memr_max: l.memr_max,
                        memr_min: l.memr_min,
                        grid: l.grid,
                        tiles: l
                            .tiles
                            .iter()
                            .map(|t| TileEntry {
                                row_tile: t.row_tile,
                                col_tile: t.col_tile,
                                row_start: t.row_start,
                                rows_used: t.rows_used,
                                col_start: t.col_start,
                                cols_used: t.cols_used,
                            })
                            .collect(),
                    })
                    .collect(),
                file: file.clone(),
                bytes: data.len(),
            };
            files.push((file, data));
            entry
        });
        let manifest = Manifest {
            format: FORMAT_VERSION,
            stage: self.stage,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            input: self.net.input_shape(),
            layers: self.net.specs(),
            tensors,
            masks,
            schemes: self.schemes.clone(),
            map,
            metrics: self.metrics.clone(),
        };
        (manifest, files)
    }

    /// Writes the checkpoint into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let (manifest, files) = self.encode();
        for (name, data) in files {
            let p = dir.join(name);
            std::fs::write(&p, data).map_err(|e| CliError::io(p, e))?;
        }
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        let p = dir.join("manifest.json");
        std::fs::write(&p, text).map_err(|e| CliError::io(p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bad = |detail: String| CliError::Checkpoint { path: dir.to_path_buf(), detail };
        let mpath = dir.join("manifest.json");
        let text = std::fs::read(&mpath).map_err(|e| CliError::io(&mpath, e))?;
        let m: Manifest = serde_json::from_slice(&text).map_err(|e| bad(format!("manifest: {e}")))?;
        if m.format != FORMAT_VERSION {
            return Err(bad(format!("format {} is not {FORMAT_VERSION}", m.format)));
        }
        let read = |file: &str, expected: usize| -> Result<Vec<u8>> {
            let p: PathBuf = dir.join(file);
            let data = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
            if data.len() != expected {
                return Err(bad(format!("{file}: manifest says {expected} bytes, file has {}", data.len())));
            }
            Ok(data)
        };
        let mut net = Network::<f32>::from_specs(m.input, &m.layers)?;
        let nw = net.num_weighted();
        if m.tensors.len() != 2 * nw || m.masks.len() != nw {
            return Err(bad(format!("{} tensors and {} masks for {nw} weighted layers", m.tensors.len(), m.masks.len())));
        }
        let mut layers = Vec::with_capacity(nw);
        for l in 0..nw {
            let (we, be) = (&m.tensors[2 * l], &m.tensors[2 * l + 1]);
            if we.shape != net.weight(l).shape || be.shape != [net.bias(l).len()] {
                return Err(bad(format!("layer {l}: tensor shapes disagree with the topology")));
            }
            let count = |shape: &[usize]| shape.iter().product::<usize>();
            if we.bytes != 4 * count(&we.shape) || be.bytes != 4 * count(&be.shape) {
                return Err(bad(format!("layer {l}: byte counts disagree with the shapes")));
            }
            let floats = |b: Vec<u8>| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect() };
            net.weight_mut(l).values = floats(read(&we.file, we.bytes)?);
            *net.bias_mut(l) = floats(read(&be.file, be.bytes)?);

            let me = &m.masks[l];
            let (rows, cols) = (net.weight(l).rows(), net.weight(l).cols());
            let nbits = rows * cols + rows;
            if me.layer != l || me.rows != rows || me.cols != cols || me.bytes != nbits.div_ceil(8) {
                return Err(bad(format!("layer {l}: mask entry disagrees with the topology")));
            }
            let bits = bits_from(&read(&me.file, me.bytes)?, nbits);
            let mask = LayerMask { rows, cols, weights: bits[..rows * cols].to_vec(), biases: bits[rows * cols..].to_vec() };
            if mask.retained() != me.retained {
                return Err(bad(format!("layer {l}: mask retains {} weights, manifest says {}", mask.retained(), me.retained)));
            }
            layers.push(mask);
        }
        let map = match &m.map {
            None => None,
            Some(me) => {
                let planes = me.hardware.planes();
                let cells: usize = me.layers.iter().flat_map(|l| &l.tiles).map(|t| t.rows_used * t.cols_used * planes).sum();
                if me.bytes != 8 * cells {
                    return Err(bad(format!("map: {} bytes for {cells} cells", me.bytes)));
                }
                let data = read(&me.file, me.bytes)?;
                let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
                let layers = me
                    .layers
                    .iter()
                    .map(|l| LayerMap {
                        layer: l.layer,
                        n: l.n,
                        k: l.k,
                        input_rows: l.input_rows.clone(),
                        output_cols: l.output_cols.clone(),
                        memr_max: l.memr_max,
                        memr_min: l.memr_min,
                        grid: l.grid,
                        tiles: l
                            .tiles
                            .iter()
                            .map(|t| Tile {
                                row_tile: t.row_tile,
                                col_tile: t.col_tile,
                                row_start: t.row_start,
                                rows_used: t.rows_used,
                                col_start: t.col_start,
                                cols_used: t.cols_used,
                                planes: (0..planes).map(|_| values.by_ref().take(t.rows_used * t.cols_used).collect()).collect(),
                            })
                            .collect(),
                    })
                    .collect();
                Some(CrossbarMap { hardware: me.hardware.clone(), layers })
            }
        };
        Ok(Checkpoint {
            stage: m.stage,
            config_hash: m.config_hash,
            seed: m.seed,
            net,
            mask: PruneMask { layers },
            schemes: m.schemes,
            map,
            metrics: m.metrics,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_bits_pack_lsb_first() {
        let m = LayerMask { rows: 2, cols: 3, weights: vec![true, false, true, true, false, false], biases: vec![false, true] };
        let b = mask_bytes(&m);
        assert_eq!(b, vec![0b1000_1101]);
        assert_eq!(bits_from(&b, 8), [m.weights.clone(), m.biases.clone()].concat());
    }

    #[test]
    fn stage_tags_parse() {
        for t in StageTag::ALL {
            assert_eq!(t.as_str().parse::<StageTag>().unwrap(), t);
        }
        assert!("final".parse::<StageTag>().is_err());
    }
}
