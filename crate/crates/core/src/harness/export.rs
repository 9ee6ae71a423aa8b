//! Routing maps as binary PGM images.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::model::UniRouteNet;
use crate::params::Ctx;
use crate::routing::BlockKind;
use crate::synthdata::SamplePair;

/// Per-pixel expert choice of one routed block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingMap {
    pub kind: BlockKind,
    pub width: usize,
    pub height: usize,
    /// Expert index per pixel, row-major.
    pub experts: Vec<usize>,
}

impl RoutingMap {
    /// Grey levels: receptive-field maps use 0 (local) and 255 (global);
    /// difference maps use 0, 128, 255 for sub, cat, mul.
    pub fn grey(&self) -> Vec<u8> {
        self.experts.iter().map(|&e| grey_level(self.kind, e)).collect()
    }

    pub fn from_grey(kind: BlockKind, width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        ensure!(pixels.len() == width * height, "routing map: {} pixels for {}x{}", pixels.len(), width, height);
        let levels: &[u8] = match kind {
            BlockKind::Ar2 => &[0, 255],
            BlockKind::Mdr => &[0, 128, 255],
        };
        let experts = pixels
            .iter()
            .map(|p| levels.iter().position(|l| l == p).ok_or_else(|| Error::format("routing map", format!("grey level {p} is not an expert code"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kind, width, height, experts })
    }
}

fn grey_level(kind: BlockKind, expert: usize) -> u8 {
    match (kind, expert) {
        (BlockKind::Ar2, 0) => 0,
        (BlockKind::Ar2, _) => 255,
        (BlockKind::Mdr, 0) => 0,
        (BlockKind::Mdr, 1) => 128,
        (BlockKind::Mdr, _) => 255,
    }
}

/// Eval-mode routing of `sample` at routed block `block` (decision order).
/// Receptive-field maps show epoch 1.
pub fn routing_map(model: &UniRouteNet, sample: &SamplePair, block: usize) -> Result<RoutingMap> {
    let n = model.decision_kinds().len();
    ensure!(block < n, "block index {} out of range (model has {} routed blocks)", block, n);
    model.embedding().check(sample.domain)?;
    let mut ctx = Ctx::eval(&model.params);
    let lift = |t: &crate::tensor::Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshape(s)
    };
    let t1 = ctx.tape.constant(lift(&sample.t1)?);
    let t2 = ctx.tape.constant(lift(&sample.t2)?);
    let out = model.forward(&mut ctx, t1, t2, sample.domain)?;
    let d = &out.decisions[block];
    let (_, _, h, w) = d.hard_mask.dims4()?;
    Ok(RoutingMap {
        kind: d.kind,
        width: w,
        height: h,
        experts: d.expert_map(0),
    })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    ensure!(pixels.len() == width * height, "pgm: {} pixels for {}x{}", pixels.len(), width, height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses the exact header form written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format("pgm", d.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let end = bytes[pos..].iter().position(|b| b.is_ascii_whitespace()).ok_or_else(|| bad("truncated header"))? + pos;
        fields.push(std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("header is not ASCII"))?.to_string());
        pos = end + 1;
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes[pos..].to_vec();
    if data.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok((w, h, data))
}

pub fn export_routing_map(model: &UniRouteNet, sample: &SamplePair, block: usize, path: &Path) -> Result<RoutingMap> {
    let map = routing_map(model, sample, block)?;
    write_pgm(path, map.width, map.height, &map.grey())?;
    Ok(map)
}
