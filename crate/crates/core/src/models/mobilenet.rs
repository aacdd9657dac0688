use crate::arch::{ArchitectureSpec, Block, LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::indicators::SiteInfo;

use super::{conv_out, push_head};

/// Stem width and `(pointwise width, depthwise stride)` pairs of the
/// small-image depthwise-separable network.
pub const MOBILENET_CIFAR: (usize, &[(usize, usize)]) = (
    32,
    &[
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ],
);

/// Standard small-image depthwise-separable network scaled by
/// `width_multiplier` (widths become `ceil(multiplier * base)`).
pub fn build_mobilenet(width_multiplier: f64, num_classes: usize, input: [usize; 3]) -> Result<ArchitectureSpec> {
    build_mobilenet_with(MOBILENET_CIFAR.0, MOBILENET_CIFAR.1, width_multiplier, num_classes, input)
}

/// Depthwise-separable network with a custom layout.
///
/// Each pointwise output carries an indicator site that is shared with the
/// following depthwise layer, which masks the same channels on both sides.
pub fn build_mobilenet_with(
    stem: usize,
    layout: &[(usize, usize)],
    width_multiplier: f64,
    num_classes: usize,
    input: [usize; 3],
) -> Result<ArchitectureSpec> {
    if !(width_multiplier > 0.0 && width_multiplier <= 1.0) {
        return Err(Error::Architecture(format!("width multiplier must lie in (0, 1], got {width_multiplier}")));
    }
    if num_classes == 0 || input.contains(&0) {
        return Err(Error::Architecture("classes and input must be positive".into()));
    }
    let scale = |c: usize| ((c as f64 * width_multiplier).ceil() as usize).max(1);
    let [c, mut h, mut w] = input;
    let mut layers = vec![LayerSpec {
        kind: LayerKind::Conv,
        k: 3,
        c_in: c,
        c_out: scale(stem),
        stride: 1,
        h,
        w,
        in_site: None,
        out_site: None,
    }];
    let mut blocks = vec![Block::Conv { layer: 0 }];
    let mut sites = Vec::new();
    let mut stream = scale(stem);
    let mut stream_site: Option<usize> = None;
    for (i, &(base, stride)) in layout.iter().enumerate() {
        h = conv_out(h, 3, stride);
        w = conv_out(w, 3, stride);
        blocks.push(Block::Conv { layer: layers.len() });
        layers.push(LayerSpec {
            kind: LayerKind::DwConv,
            k: 3,
            c_in: stream,
            c_out: stream,
            stride,
            h,
            w,
            in_site: stream_site,
            out_site: stream_site,
        });
        let width = scale(base);
        sites.push(SiteInfo {
            name: format!("pw{}", i + 1),
            len: width,
            masks: Vec::new(),
        });
        let site = sites.len() - 1;
        blocks.push(Block::Conv { layer: layers.len() });
        layers.push(LayerSpec {
            kind: LayerKind::PwConv,
            k: 1,
            c_in: stream,
            c_out: width,
            stride: 1,
            h,
            w,
            in_site: stream_site,
            out_site: Some(site),
        });
        stream = width;
        stream_site = Some(site);
    }
    push_head(&mut layers, &mut blocks, stream, stream_site, h, num_classes);
    let mut spec = ArchitectureSpec {
        family: "mobilenet".into(),
        input,
        num_classes,
        layers,
        blocks,
        sites,
        residual_pairs: Vec::new(),
    };
    spec.refresh_site_masks();
    spec.validate()?;
    Ok(spec)
}
