//! Demonstration generation and the on-disk dataset container.
//!
//! Layout: `manifest.json` plus `ep{N}/images_cam{C}.bin`, `ep{N}/lowdim.bin`,
//! `ep{N}/actions.bin`. Blobs are little-endian f32, row-major, each with a
//! CRC-32 recorded in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{is_done, render, reset, toy_step};
use super::expert::scripted_expert;
use super::{DatasetStats, Episode};
use crate::error::{integrity, invalid, Result};

pub const IMAGE_HW: (usize, usize) = (96, 96);
const FORMAT: &str = "crossway-demos";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub episodes: Vec<Episode>,
    pub stats: DatasetStats,
    pub seed: u64,
}

impl DemoDataset {
    pub fn new(episodes: Vec<Episode>, seed: u64) -> Result<Self> {
        let stats = DatasetStats::fit(&episodes)?;
        let first = &episodes[0];
        if episodes.iter().any(|e| {
            e.image_hw != first.image_hw
                || e.cameras() != first.cameras()
                || e.lowdim_dim != first.lowdim_dim
                || e.action_dim != first.action_dim
        }) {
            return invalid("episodes disagree on shapes");
        }
        Ok(Self { episodes, stats, seed })
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len).sum()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        self.episodes[0].image_hw
    }

    pub fn cameras(&self) -> usize {
        self.episodes[0].cameras()
    }

    pub fn lowdim_dim(&self) -> usize {
        self.episodes[0].lowdim_dim
    }

    pub fn action_dim(&self) -> usize {
        self.episodes[0].action_dim
    }
}

/// Seed of the `i`-th episode's start state. Shared with evaluation so the
/// same `(seed, i)` always yields the same initial configuration.
pub fn episode_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Records one expert episode: frame and agent position before each action.
pub fn record_expert_episode(seed: u64, image_hw: (usize, usize)) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = reset(&mut rng);
    let (mut images, mut lowdim, mut actions) = (Vec::new(), Vec::new(), Vec::new());
    while !is_done(&s) {
        images.extend(render(&s, image_hw));
        lowdim.extend(s.agent.iter().map(|v| *v as f32));
        let a = scripted_expert(&s);
        actions.extend(a.iter().map(|v| *v as f32));
        s = toy_step(&s, a);
    }
    Episode::new(image_hw, vec![images], 2, lowdim, 2, actions)
}

pub fn generate_demos(n: usize, seed: u64) -> Result<DemoDataset> {
    if n == 0 {
        return invalid("need at least one demonstration");
    }
    let episodes = (0..n as u64).map(|i| record_expert_episode(episode_seed(seed, i), IMAGE_HW)).collect::<Result<_>>()?;
    DemoDataset::new(episodes, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub path: String,
    pub shape: Vec<usize>,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub len: usize,
    pub blobs: BTreeMap<String, BlobInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub dtype: String,
    pub image_hw: (usize, usize),
    pub cameras: usize,
    pub lowdim_dim: usize,
    pub action_dim: usize,
    pub total_steps: usize,
    pub stats: DatasetStats,
    pub episodes: Vec<EpisodeEntry>,
}

pub fn f32_to_le_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn le_bytes_to_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn save_dataset(ds: &DemoDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.episodes.len());
    for (i, ep) in ds.episodes.iter().enumerate() {
        let ep_dir = format!("ep{i}");
        fs::create_dir_all(dir.join(&ep_dir))?;
        let (h, w) = ep.image_hw;
        let mut arrays: Vec<(String, Vec<usize>, &[f32])> = ep
            .images
            .iter()
            .enumerate()
            .map(|(c, img)| (format!("images_cam{c}"), vec![ep.len, h, w, 3], img.as_slice()))
            .collect();
        arrays.push(("lowdim".into(), vec![ep.len, ep.lowdim_dim], &ep.lowdim));
        arrays.push(("actions".into(), vec![ep.len, ep.action_dim], &ep.actions));
        let mut blobs = BTreeMap::new();
        for (name, shape, data) in arrays {
            let bytes = f32_to_le_bytes(data);
            let path = format!("{ep_dir}/{name}.bin");
            fs::write(dir.join(&path), &bytes)?;
            blobs.insert(name, BlobInfo { path, shape, crc32: crc32fast::hash(&bytes) });
        }
        entries.push(EpisodeEntry { len: ep.len, blobs });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        seed: ds.seed,
        dtype: "f32le".into(),
        image_hw: ds.image_hw(),
        cameras: ds.cameras(),
        lowdim_dim: ds.lowdim_dim(),
        action_dim: ds.action_dim(),
        total_steps: ds.total_steps(),
        stats: ds.stats.clone(),
        episodes: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_blob(dir: &Path, info: &BlobInfo, expect: &[usize]) -> Result<Vec<f32>> {
    if info.shape != expect {
        return integrity(format!("{}: shape {:?}, expected {expect:?}", info.path, info.shape));
    }
    let bytes = fs::read(dir.join(&info.path))?;
    let n: usize = expect.iter().product();
    if bytes.len() != n * 4 {
        return integrity(format!("{}: {} bytes, expected {}", info.path, bytes.len(), n * 4));
    }
    let crc = crc32fast::hash(&bytes);
    if crc != info.crc32 {
        return integrity(format!("{}: checksum {crc:08x} does not match manifest {:08x}", info.path, info.crc32));
    }
    Ok(le_bytes_to_f32(&bytes))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| crate::Error::Integrity(format!("manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION || m.dtype != "f32le" {
        return integrity(format!("unsupported dataset format {} v{} ({})", m.format, m.version, m.dtype));
    }
    Ok(m)
}

pub fn load_dataset(dir: &Path) -> Result<DemoDataset> {
    let m = read_manifest(dir)?;
    let (h, w) = m.image_hw;
    let mut episodes = Vec::with_capacity(m.episodes.len());
    for (i, e) in m.episodes.iter().enumerate() {
        let blob = |name: &str| {
            e.blobs.get(name).ok_or_else(|| crate::Error::Integrity(format!("episode {i} has no `{name}` blob")))
        };
        let images = (0..m.cameras)
            .map(|c| read_blob(dir, blob(&format!("images_cam{c}"))?, &[e.len, h, w, 3]))
            .collect::<Result<Vec<_>>>()?;
        let lowdim = read_blob(dir, blob("lowdim")?, &[e.len, m.lowdim_dim])?;
        let actions = read_blob(dir, blob("actions")?, &[e.len, m.action_dim])?;
        episodes.push(
            Episode::new(m.image_hw, images, m.lowdim_dim, lowdim, m.action_dim, actions)
                .map_err(|err| crate::Error::Integrity(format!("episode {i}: {err}")))?,
        );
    }
    if episodes.iter().map(|e| e.len).sum::<usize>() != m.total_steps {
        return integrity("episode lengths do not add up to the manifest total");
    }
    let ds = DemoDataset::new(episodes, m.seed)?;
    if ds.stats != m.stats {
        return integrity("stored normalization stats do not match the data");
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = generate_demos(3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.episodes.iter().map(|e| e.len).sum::<usize>(), ds.total_steps());
    }

    #[test]
    fn corrupted_blob_is_detected() {
        let ds = generate_demos(1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("ep0/actions.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(crate::Error::Integrity(_))));
    }

    #[test]
    fn same_seed_same_demos() {
        assert_eq!(generate_demos(2, 7).unwrap(), generate_demos(2, 7).unwrap());
        assert_ne!(generate_demos(1, 7).unwrap().episodes[0], generate_demos(1, 8).unwrap().episodes[0]);
    }
}
