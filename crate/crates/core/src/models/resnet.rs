use crate::arch::{ArchitectureSpec, Block, LayerKind, LayerSpec, Shortcut};
use crate::error::{Error, Result};
use crate::indicators::SiteInfo;

use super::{conv_out, push_head};

/// Three-stage residual network of depth `6n + 2` with basic blocks.
///
/// Each block carries two indicator sites: one masking the first 3x3
/// convolution's output and one masking the stream after the addition.
/// Reduction blocks (stride 2 or a width change) use a 1x1 projection
/// shortcut that the post-addition site masks as well.
pub fn build_resnet(
    depth: usize,
    widths: [usize; 3],
    num_classes: usize,
    input: [usize; 3],
) -> Result<ArchitectureSpec> {
    if depth < 8 || (depth - 2) % 6 != 0 {
        return Err(Error::Architecture(format!("residual depth must be 6n + 2 with n >= 1, got {depth}")));
    }
    if widths.contains(&0) || num_classes == 0 || input.contains(&0) {
        return Err(Error::Architecture("widths, classes and input must be positive".into()));
    }
    let per_stage = (depth - 2) / 6;
    let [c, mut h, mut w] = input;
    let mut layers = Vec::new();
    let mut blocks = Vec::new();
    let mut sites = Vec::new();
    let mut pairs = Vec::new();

    layers.push(LayerSpec {
        kind: LayerKind::Conv,
        k: 3,
        c_in: c,
        c_out: widths[0],
        stride: 1,
        h,
        w,
        in_site: None,
        out_site: None,
    });
    blocks.push(Block::Conv { layer: 0 });
    let mut stream = widths[0];
    let mut stream_site: Option<usize> = None;

    let site = |sites: &mut Vec<SiteInfo>, name: String, len: usize| {
        sites.push(SiteInfo {
            name,
            len,
            masks: Vec::new(),
        });
        sites.len() - 1
    };

    for (stage, &width) in widths.iter().enumerate() {
        for b in 0..per_stage {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            h = conv_out(h, 3, stride);
            w = conv_out(w, 3, stride);
            let site_a = site(&mut sites, format!("s{}.b{}.a", stage + 1, b + 1), width);
            let site_b = site(&mut sites, format!("s{}.b{}.b", stage + 1, b + 1), width);
            let conv1 = layers.len();
            layers.push(LayerSpec {
                kind: LayerKind::Conv,
                k: 3,
                c_in: stream,
                c_out: width,
                stride,
                h,
                w,
                in_site: stream_site,
                out_site: Some(site_a),
            });
            let conv2 = layers.len();
            layers.push(LayerSpec {
                kind: LayerKind::Conv,
                k: 3,
                c_in: width,
                c_out: width,
                stride: 1,
                h,
                w,
                in_site: Some(site_a),
                out_site: Some(site_b),
            });
            let shortcut = if stride != 1 || stream != width {
                let p = layers.len();
                layers.push(LayerSpec {
                    kind: LayerKind::Conv,
                    k: 1,
                    c_in: stream,
                    c_out: width,
                    stride,
                    h,
                    w,
                    in_site: stream_site,
                    out_site: Some(site_b),
                });
                Shortcut::Projection(p)
            } else {
                if let Some(prev) = stream_site {
                    pairs.push((prev, site_b));
                }
                Shortcut::Identity
            };
            blocks.push(Block::Residual { conv1, conv2, shortcut });
            stream = width;
            stream_site = Some(site_b);
        }
    }
    push_head(&mut layers, &mut blocks, stream, stream_site, h, num_classes);
    let mut spec = ArchitectureSpec {
        family: "resnet".into(),
        input,
        num_classes,
        layers,
        blocks,
        sites,
        residual_pairs: pairs,
    };
    spec.refresh_site_masks();
    spec.validate_unpruned()?;
    Ok(spec)
}
