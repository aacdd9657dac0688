//! Layer-by-layer structural description of a network.
//!
//! An [`ArchitectureSpec`] is the single source of truth for a model's
//! topology: the forward pass, the FLOPs counters and the pruning
//! derivation all walk the same spec. It serializes to a line-oriented text
//! format (see [`ArchitectureSpec::to_text`]).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::SiteInfo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    DwConv,
    PwConv,
    Linear,
    Pool,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::DwConv => "dwconv",
            LayerKind::PwConv => "pwconv",
            LayerKind::Linear => "linear",
            LayerKind::Pool => "pool",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv" => LayerKind::Conv,
            "dwconv" => LayerKind::DwConv,
            "pwconv" => LayerKind::PwConv,
            "linear" => LayerKind::Linear,
            "pool" => LayerKind::Pool,
            _ => return None,
        })
    }

    /// Whether the layer owns a convolution kernel followed by batch norm.
    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::DwConv | LayerKind::PwConv)
    }
}

/// One layer. `h` and `w` are the spatial size of the layer's output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// Indicator site masking this layer's input, if any.
    pub in_site: Option<usize>,
    /// Indicator site masking this layer's output, if any.
    pub out_site: Option<usize>,
}

impl LayerSpec {
    /// Padding that preserves the spatial size at stride 1.
    pub fn padding(&self) -> usize {
        self.k / 2
    }

    /// `h * w * k^2`, the per-channel-pair cost factor.
    pub fn cost_factor(&self) -> u64 {
        match self.kind {
            LayerKind::Linear => 1,
            LayerKind::Pool => 0,
            _ => (self.h * self.w * self.k * self.k) as u64,
        }
    }

    /// Multiply-accumulate count of this layer.
    pub fn flops(&self) -> u64 {
        match self.kind {
            LayerKind::Conv | LayerKind::PwConv => self.cost_factor() * (self.c_in * self.c_out) as u64,
            LayerKind::DwConv => self.cost_factor() * self.c_out as u64,
            LayerKind::Linear => (self.c_in * self.c_out) as u64,
            LayerKind::Pool => 0,
        }
    }
}

/// Residual shortcut realization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shortcut {
    Identity,
    /// Output channel `j` takes input channel `map[j]`, or zero.
    Gather(Vec<Option<usize>>),
    /// 1x1 convolution + batch norm (layer index).
    Projection(usize),
}

/// Unit of the forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    /// conv -> BN -> ReLU -> mask(out_site)
    Conv { layer: usize },
    /// conv1 -> BN -> ReLU -> mask; conv2 -> BN; + shortcut; ReLU -> mask
    Residual {
        conv1: usize,
        conv2: usize,
        shortcut: Shortcut,
    },
    /// global average pool -> linear
    Head { pool: usize, linear: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: String,
    /// Input `(channels, height, width)`.
    pub input: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub blocks: Vec<Block>,
    pub sites: Vec<SiteInfo>,
    /// `(input site, output site)` of every identity-shortcut residual block.
    pub residual_pairs: Vec<(usize, usize)>,
}

impl ArchitectureSpec {
    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn site_lens(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.len).collect()
    }

    /// Convolution layers on the main path, in forward order.
    pub fn main_path_convs(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match b {
                Block::Conv { layer } => out.push(*layer),
                Block::Residual { conv1, conv2, .. } => out.extend([*conv1, *conv2]),
                Block::Head { .. } => {}
            }
        }
        out
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(LayerSpec::flops).sum()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv | LayerKind::PwConv => l.k * l.k * l.c_in * l.c_out + 2 * l.c_out,
                LayerKind::DwConv => l.k * l.k * l.c_out + 2 * l.c_out,
                LayerKind::Linear => l.c_in * l.c_out + l.c_out,
                LayerKind::Pool => 0,
            })
            .sum()
    }

    /// Rebuilds each site's `masks` list from the layers' `out_site` fields.
    pub(crate) fn refresh_site_masks(&mut self) {
        for s in &mut self.sites {
            s.masks.clear();
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(s) = l.out_site {
                if let Some(site) = self.sites.get_mut(s) {
                    site.masks.push(i);
                }
            }
        }
    }

    /// Structural checks: channel chaining, site consistency, residual
    /// widths and depthwise constraints.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Architecture(msg));
        for (i, l) in self.layers.iter().enumerate() {
            for s in [l.in_site, l.out_site].into_iter().flatten() {
                if s >= self.sites.len() {
                    return bad(format!("layer {i} references unknown site {s}"));
                }
            }
            if let Some(s) = l.out_site {
                if self.sites[s].len != l.c_out {
                    return bad(format!(
                        "layer {i} has {} outputs but site {s} has {} entries",
                        l.c_out, self.sites[s].len
                    ));
                }
            }
            if let Some(s) = l.in_site {
                if self.sites[s].len != l.c_in {
                    return bad(format!(
                        "layer {i} has {} inputs but its input site {s} has {} entries",
                        l.c_in, self.sites[s].len
                    ));
                }
            }
            if l.kind == LayerKind::DwConv && (l.c_in != l.c_out || l.in_site != l.out_site) {
                return bad(format!("depthwise layer {i} must share channels and site on both sides"));
            }
            if l.c_in == 0 || l.c_out == 0 {
                return bad(format!("layer {i} has zero channels"));
            }
        }
        let mut stream = self.input[0];
        let mut first_conv = true;
        for (bi, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Conv { layer } => {
                    let l = self.layer(*layer)?;
                    if l.c_in != stream {
                        return bad(format!("block {bi}: layer {layer} expects {} channels, stream has {stream}", l.c_in));
                    }
                    if first_conv && l.out_site.is_some() {
                        return bad("the first convolution carries no indicator site".into());
                    }
                    first_conv = false;
                    stream = l.c_out;
                }
                Block::Residual { conv1, conv2, shortcut } => {
                    let (a, b2) = (self.layer(*conv1)?, self.layer(*conv2)?);
                    if a.c_in != stream || b2.c_in != a.c_out {
                        return bad(format!("block {bi}: residual channel chain is broken"));
                    }
                    match shortcut {
                        Shortcut::Identity => {
                            if b2.c_out != stream {
                                return bad(format!("block {bi}: identity shortcut joins {stream} and {} channels", b2.c_out));
                            }
                        }
                        Shortcut::Gather(map) => {
                            if map.len() != b2.c_out || map.iter().flatten().any(|&j| j >= stream) {
                                return bad(format!("block {bi}: gather map does not fit the stream"));
                            }
                        }
                        Shortcut::Projection(p) => {
                            let p = self.layer(*p)?;
                            if p.c_in != stream || p.c_out != b2.c_out || p.out_site != b2.out_site {
                                return bad(format!("block {bi}: projection shortcut does not match the block"));
                            }
                        }
                    }
                    stream = b2.c_out;
                }
                Block::Head { pool, linear } => {
                    let (p, l) = (self.layer(*pool)?, self.layer(*linear)?);
                    if p.c_in != stream || l.c_in != p.c_out || l.c_out != self.num_classes {
                        return bad(format!("block {bi}: head does not match the stream"));
                    }
                    stream = l.c_out;
                }
            }
        }
        for &(a, b) in &self.residual_pairs {
            if a >= self.sites.len() || b >= self.sites.len() {
                return bad(format!("residual pair ({a}, {b}) references an unknown site"));
            }
        }
        Ok(())
    }

    /// Checks that every residual pair of an unpruned spec has equal widths.
    pub fn validate_unpruned(&self) -> Result<()> {
        self.validate()?;
        for &(a, b) in &self.residual_pairs {
            if self.sites[a].len != self.sites[b].len {
                return Err(Error::Architecture(format!(
                    "residual pair ({a}, {b}) joins {} and {} channels",
                    self.sites[a].len, self.sites[b].len
                )));
            }
        }
        Ok(())
    }

    fn layer(&self, i: usize) -> Result<&LayerSpec> {
        self.layers
            .get(i)
            .ok_or_else(|| Error::Architecture(format!("unknown layer {i}")))
    }

    /// Line-oriented text form; one `layer` line per layer with
    /// `kind k c_in c_out stride h w` followed by site references.
    pub fn to_text(&self) -> String {
        let site = |s: Option<usize>| s.map_or("-".to_string(), |s| s.to_string());
        let mut out = String::new();
        let _ = writeln!(out, "arch v1");
        let _ = writeln!(out, "family {}", self.family);
        let _ = writeln!(out, "input {} {} {}", self.input[0], self.input[1], self.input[2]);
        let _ = writeln!(out, "classes {}", self.num_classes);
        for s in &self.sites {
            let _ = writeln!(out, "site {} {}", s.name, s.len);
        }
        for l in &self.layers {
            let _ = writeln!(
                out,
                "layer {} {} {} {} {} {} {} in={} out={}",
                l.kind.as_str(),
                l.k,
                l.c_in,
                l.c_out,
                l.stride,
                l.h,
                l.w,
                site(l.in_site),
                site(l.out_site)
            );
        }
        for b in &self.blocks {
            match b {
                Block::Conv { layer } => {
                    let _ = writeln!(out, "block conv {layer}");
                }
                Block::Residual { conv1, conv2, shortcut } => {
                    let sc = match shortcut {
                        Shortcut::Identity => "identity".to_string(),
                        Shortcut::Projection(p) => format!("proj={p}"),
                        Shortcut::Gather(map) => format!(
                            "gather={}",
                            map.iter().map(|m| site(*m)).collect::<Vec<_>>().join(",")
                        ),
                    };
                    let _ = writeln!(out, "block residual {conv1} {conv2} {sc}");
                }
                Block::Head { pool, linear } => {
                    let _ = writeln!(out, "block head {pool} {linear}");
                }
            }
        }
        for (a, b) in &self.residual_pairs {
            let _ = writeln!(out, "pair {a} {b}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = ArchitectureSpec {
            family: String::new(),
            input: [0; 3],
            num_classes: 0,
            layers: Vec::new(),
            blocks: Vec::new(),
            sites: Vec::new(),
            residual_pairs: Vec::new(),
        };
        let mut offset = 0usize;
        let mut header = false;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |detail: &str| Error::Parse {
                offset: start,
                detail: format!("{detail}: `{trimmed}`"),
            };
            let toks: Vec<&str> = trimmed.split_whitespace().collect();
            let num = |i: usize| -> Result<usize> {
                toks.get(i)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("expected an integer"))
            };
            let opt_site = |t: &str, key: &str| -> Result<Option<usize>> {
                let v = t.strip_prefix(key).ok_or_else(|| err("malformed site reference"))?;
                if v == "-" {
                    Ok(None)
                } else {
                    v.parse().map(Some).map_err(|_| err("malformed site reference"))
                }
            };
            match toks[0] {
                "arch" => {
                    if toks.get(1) != Some(&"v1") {
                        return Err(err("unsupported format version"));
                    }
                    header = true;
                }
                "family" => spec.family = toks.get(1).ok_or_else(|| err("missing family"))?.to_string(),
                "input" => spec.input = [num(1)?, num(2)?, num(3)?],
                "classes" => spec.num_classes = num(1)?,
                "site" => spec.sites.push(SiteInfo {
                    name: toks.get(1).ok_or_else(|| err("missing site name"))?.to_string(),
                    len: num(2)?,
                    masks: Vec::new(),
                }),
                "layer" => {
                    if toks.len() != 10 {
                        return Err(err("layer lines have 9 fields"));
                    }
                    spec.layers.push(LayerSpec {
                        kind: LayerKind::parse(toks[1]).ok_or_else(|| err("unknown layer kind"))?,
                        k: num(2)?,
                        c_in: num(3)?,
                        c_out: num(4)?,
                        stride: num(5)?,
                        h: num(6)?,
                        w: num(7)?,
                        in_site: opt_site(toks[8], "in=")?,
                        out_site: opt_site(toks[9], "out=")?,
                    });
                }
                "block" => {
                    let block = match toks.get(1).copied() {
                        Some("conv") => Block::Conv { layer: num(2)? },
                        Some("head") => Block::Head {
                            pool: num(2)?,
                            linear: num(3)?,
                        },
                        Some("residual") => {
                            let sc = toks.get(4).ok_or_else(|| err("missing shortcut"))?;
                            let shortcut = if *sc == "identity" {
                                Shortcut::Identity
                            } else if let Some(p) = sc.strip_prefix("proj=") {
                                Shortcut::Projection(p.parse().map_err(|_| err("bad projection"))?)
                            } else if let Some(m) = sc.strip_prefix("gather=") {
                                let map = m
                                    .split(',')
                                    .map(|t| if t == "-" { Ok(None) } else { t.parse().map(Some) })
                                    .collect::<std::result::Result<Vec<_>, _>>()
                                    .map_err(|_| err("bad gather map"))?;
                                Shortcut::Gather(map)
                            } else {
                                return Err(err("unknown shortcut"));
                            };
                            Block::Residual {
                                conv1: num(2)?,
                                conv2: num(3)?,
                                shortcut,
                            }
                        }
                        _ => return Err(err("unknown block kind")),
                    };
                    spec.blocks.push(block);
                }
                "pair" => spec.residual_pairs.push((num(1)?, num(2)?)),
                _ => return Err(err("unknown directive")),
            }
        }
        if !header {
            return Err(Error::Parse {
                offset: 0,
                detail: "missing `arch v1` header".into(),
            });
        }
        spec.refresh_site_masks();
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer() -> ArchitectureSpec {
        crate::models::plain_net(&[3, 8, 8], &[4, 4], 3).unwrap()
    }

    #[test]
    fn text_round_trip() {
        let spec = two_layer();
        let text = spec.to_text();
        let back = ArchitectureSpec::from_text(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn parse_error_reports_offset() {
        let text = "arch v1\nfamily plain\nlayer conv x\n";
        match ArchitectureSpec::from_text(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 21),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_conv_flops() {
        let l = LayerSpec {
            kind: LayerKind::Conv,
            k: 3,
            c_in: 16,
            c_out: 16,
            stride: 1,
            h: 32,
            w: 32,
            in_site: None,
            out_site: None,
        };
        assert_eq!(l.flops(), 2_359_296);
    }

    #[test]
    fn validate_rejects_broken_chain() {
        let mut spec = two_layer();
        spec.layers[1].c_in = 5;
        assert!(spec.validate().is_err());
    }
}
