#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ctrldiff::backbone::BackboneConfig;
use ctrldiff::config::RunConfig;
use ctrldiff::control::{ControlExtractorConfig, ControlNetBranchConfig};

pub fn tiny_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    RunConfig::load(&path).expect("tiny config parses")
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_ctrldiff"))
}

/// Files under `dir` (recursively) with their bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

// Parameter counts derived from layer shapes alone, independent of the
// registry. One residual block per level.

fn conv(i: usize, o: usize, k: usize) -> usize {
    o * i * k * k + o
}

fn norm(c: usize) -> usize {
    2 * c
}

fn res(i: usize, o: usize, temb: Option<usize>) -> usize {
    norm(i)
        + conv(i, o, 3)
        + temb.map_or(0, |d| conv(d, o, 1))
        + norm(o)
        + conv(o, o, 3)
        + if i != o { conv(i, o, 1) } else { 0 }
}

/// Time embedding, input conv, encoder and mid block.
fn trunk(c: &BackboneConfig) -> usize {
    let t = Some(c.time_embed_dim);
    let mut total =
        2 * conv(c.time_embed_dim, c.time_embed_dim, 1) + conv(c.in_channels, c.base_channels, 3);
    let mut ch = c.base_channels;
    for (l, m) in c.channel_multipliers.iter().enumerate() {
        total += res(ch, c.base_channels * m, t);
        ch = c.base_channels * m;
        if l + 1 < c.channel_multipliers.len() {
            total += conv(ch, ch, 3);
        }
    }
    total + res(ch, c.mid_channels, t) + res(c.mid_channels, c.mid_channels, t)
}

pub fn backbone_params(c: &BackboneConfig) -> usize {
    let t = Some(c.time_embed_dim);
    let mut total = trunk(c);
    let mut ch = c.mid_channels;
    for m in c.channel_multipliers.iter().rev() {
        total += res(ch + c.base_channels * m, c.base_channels * m, t);
        ch = c.base_channels * m;
    }
    total + norm(ch) + conv(ch, c.in_channels, 3)
}

pub fn branch_params(c: &BackboneConfig, b: &ControlNetBranchConfig) -> usize {
    let hint = conv(b.control_channels, b.hint_channels, 3)
        + conv(b.hint_channels, b.hint_channels, 3)
        + conv(b.hint_channels, c.base_channels, 1);
    let bridges: usize = c
        .channel_multipliers
        .iter()
        .map(|m| conv(c.base_channels * m, c.base_channels * m, 1))
        .sum::<usize>()
        + conv(c.mid_channels, c.mid_channels, 1);
    trunk(c) + hint + bridges
}

pub fn extractor_params(e: &ControlExtractorConfig) -> usize {
    let mut ch = e.channels_per_stage[0];
    let mut total = conv(e.in_channels, ch, 3);
    for (s, &out) in e.channels_per_stage.iter().enumerate() {
        for _ in 0..e.num_blocks {
            total += res(ch, out, None);
            ch = out;
        }
        if s + 1 < e.channels_per_stage.len() {
            total += conv(ch, ch, 3);
        }
    }
    total + conv(ch, e.out_channels, 1)
}

/// Backbone parameters unfrozen by the default selector: every norm plus
/// the mid blocks' time projections.
pub fn selected_backbone_params(c: &BackboneConfig) -> usize {
    let mut norms = 0;
    let mut ch = c.base_channels;
    for m in &c.channel_multipliers {
        norms += norm(ch) + norm(c.base_channels * m);
        ch = c.base_channels * m;
    }
    norms += norm(ch) + norm(c.mid_channels) + 2 * norm(c.mid_channels);
    ch = c.mid_channels;
    for m in c.channel_multipliers.iter().rev() {
        norms += norm(ch + c.base_channels * m) + norm(c.base_channels * m);
        ch = c.base_channels * m;
    }
    norms += norm(ch);
    norms + 2 * conv(c.time_embed_dim, c.mid_channels, 1)
}
