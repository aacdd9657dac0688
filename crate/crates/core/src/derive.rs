//! Turning hard keep-masks into a concrete, smaller network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, Block, LayerKind, Shortcut};
use crate::error::{Error, Result};
use crate::indicators::SiteInfo;
use crate::models::{Mode, Network};
use crate::tensor::{ParamStore, Real, Tape, Tensor};
use crate::weights;

/// Kept original channel indices, per site and per layer side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sites: Vec<Vec<usize>>,
    pub layers: Vec<LayerProvenance>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProvenance {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunedModel {
    pub net: Network<f32>,
    pub provenance: Provenance,
}

fn kept(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

/// Applies keep-masks to a spec without requiring every site to survive.
///
/// Widths may drop to zero, which keeps the FLOPs count meaningful for any
/// mask; [`derive`] rejects such results.
pub fn prune_spec(spec: &ArchitectureSpec, keep: &[Vec<bool>]) -> Result<(ArchitectureSpec, Provenance)> {
    if keep.len() != spec.num_sites() {
        return Err(Error::Site {
            site: keep.len().min(spec.num_sites()),
            detail: format!("{} keep-masks for {} sites", keep.len(), spec.num_sites()),
        });
    }
    for (s, (m, site)) in keep.iter().zip(&spec.sites).enumerate() {
        if m.len() != site.len {
            return Err(Error::Site {
                site: s,
                detail: format!("keep-mask has {} entries, site {} has {}", m.len(), site.name, site.len),
            });
        }
    }
    let site_kept: Vec<Vec<usize>> = keep.iter().map(|m| kept(m)).collect();
    let side = |site: Option<usize>, full: usize| match site {
        Some(s) => site_kept[s].clone(),
        None => (0..full).collect(),
    };
    let mut pruned = spec.clone();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (l, out) in spec.layers.iter().zip(&mut pruned.layers) {
        let input = side(l.in_site, l.c_in);
        let output = side(l.out_site, l.c_out);
        out.c_in = input.len();
        out.c_out = output.len();
        layers.push(LayerProvenance { input, output });
    }
    for (site, k) in pruned.sites.iter_mut().zip(&site_kept) {
        site.len = k.len();
    }
    for block in &mut pruned.blocks {
        if let Block::Residual {
            conv1,
            conv2,
            shortcut,
        } = block
        {
            if !matches!(shortcut, Shortcut::Identity) {
                continue;
            }
            let input = &layers[*conv1].input;
            let output = &layers[*conv2].output;
            if input != output {
                // Channels kept on the output but absent from the input
                // receive zero from the shortcut, exactly as in the masked
                // supernet where those input channels are zeroed.
                let map = output.iter().map(|j| input.binary_search(j).ok()).collect();
                *shortcut = Shortcut::Gather(map);
            }
        }
    }
    Ok((
        pruned,
        Provenance {
            sites: site_kept,
            layers,
        },
    ))
}

/// Builds the pruned network with weights sliced from `net`.
pub fn derive<T: Real>(net: &Network<T>, keep: &[Vec<bool>]) -> Result<PrunedModel> {
    if let Some(site) = keep.iter().position(|m| !m.iter().any(|&k| k)) {
        return Err(Error::LayerCollapsed { site });
    }
    let (spec, provenance) = prune_spec(&net.spec, keep)?;
    spec.validate()?;
    let src = net.params.cast::<f32>();
    let mut params = ParamStore::new(src.tag());
    for (i, (l, prov)) in net.spec.layers.iter().zip(&provenance.layers).enumerate() {
        let Some(p) = net.layer_params(i) else {
            continue;
        };
        let w = &src.get(p.weight);
        let sliced = match l.kind {
            LayerKind::Linear => w.tensor.select(0, &prov.input),
            LayerKind::DwConv => w.tensor.select(3, &prov.output),
            _ => w.tensor.select(2, &prov.input).select(3, &prov.output),
        };
        params.push(w.name.clone(), sliced);
        if let Some(b) = p.bias {
            let b = src.get(b);
            params.push(b.name.clone(), b.tensor.clone());
        }
        if let Some(bn) = p.bn {
            for idx in [bn.scale, bn.shift, bn.running_mean, bn.running_var] {
                let q = src.get(idx);
                params.push(q.name.clone(), q.tensor.select(0, &prov.output));
            }
        }
    }
    let net = Network::from_parts(spec, params)?;
    Ok(PrunedModel { net, provenance })
}

/// Maximum absolute logit difference between the pruned network and the
/// supernet under the same hard masks, both in eval mode.
pub fn verify_equivalence<T: Real>(
    pruned: &PrunedModel,
    supernet: &Network<T>,
    keep: &[Vec<bool>],
    batch: &Tensor<f32>,
) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let x = tape.leaf(&batch.cast());
    let masks = keep
        .iter()
        .map(|m| {
            let v = m.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
            tape.constant(&[m.len()], v)
        })
        .collect::<Result<Vec<_>>>()?;
    let full = supernet.forward(&mut tape, x, Some(&masks), Mode::Eval, false)?;
    let reference: Vec<f64> = tape.value(full.logits).iter().map(|v| v.f64()).collect();

    let small = pruned.net.cast::<T>();
    let mut tape = Tape::<T>::new();
    let x = tape.leaf(&batch.cast());
    let out = small.forward(&mut tape, x, None, Mode::Eval, false)?;
    Ok(tape
        .value(out.logits)
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a.f64() - b).abs())
        .fold(0.0, f64::max))
}

pub const ARCH_FILE: &str = "arch.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const PROVENANCE_FILE: &str = "provenance.json";

impl PrunedModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let arch = dir.join(ARCH_FILE);
        std::fs::write(&arch, self.net.spec.to_text()).map_err(|e| Error::io(&arch, e))?;
        weights::save(&self.net.params, &dir.join(WEIGHTS_FILE))?;
        let prov = dir.join(PROVENANCE_FILE);
        let json = serde_json::to_string_pretty(&self.provenance)?;
        std::fs::write(&prov, json).map_err(|e| Error::io(&prov, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let arch = dir.join(ARCH_FILE);
        let text = std::fs::read_to_string(&arch).map_err(|e| Error::io(&arch, e))?;
        let spec = ArchitectureSpec::from_text(&text)?;
        let params = weights::load(&dir.join(WEIGHTS_FILE))?;
        let prov = dir.join(PROVENANCE_FILE);
        let json = std::fs::read_to_string(&prov).map_err(|e| Error::io(&prov, e))?;
        Ok(Self {
            net: Network::from_parts(spec, params)?,
            provenance: serde_json::from_str(&json)?,
        })
    }

    pub fn site_widths(&self) -> Vec<usize> {
        self.net.spec.sites.iter().map(|s: &SiteInfo| s.len).collect()
    }
}
