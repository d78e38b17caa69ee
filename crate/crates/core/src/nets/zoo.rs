//! Desk-scale architectures.

use super::LayerSpec;
use crate::error::{Error, Result};

fn spatial(input: &[usize]) -> Result<(usize, usize, usize)> {
    match *input {
        [c, h, w] if h >= 4 && w >= 4 => Ok((c, h, w)),
        _ => Err(Error::Config(format!(
            "expected a [C, H, W] input of at least 4x4, got {input:?}"
        ))),
    }
}

/// Output size of a 3x3, pad 1, stride 2 convolution.
fn halve(n: usize) -> usize {
    (n - 1) / 2 + 1
}

fn inverted_residual(c_in: usize, expand: usize, c_out: usize, stride: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::pointwise(c_in, expand),
        LayerSpec::bn(expand),
        LayerSpec::Relu6,
        LayerSpec::depthwise(expand, 3, stride),
        LayerSpec::bn(expand),
        LayerSpec::Relu6,
        LayerSpec::pointwise(expand, c_out),
        LayerSpec::bn(c_out),
    ]
}

/// MobileNet-style: strided stem, three inverted-residual blocks (expansion 6)
/// (pointwise expand, depthwise 3x3, pointwise project), linear classifier.
pub fn toy_dwnet(input: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    let (c, h, w) = spatial(input)?;
    let (h2, w2) = (halve(h), halve(w));
    let (h4, w4) = (halve(h2), halve(w2));
    let mut specs = vec![LayerSpec::conv(c, 16, 3, 2), LayerSpec::bn(16), LayerSpec::Relu6];
    specs.push(LayerSpec::Residual {
        body: inverted_residual(16, 96, 16, 1),
    });
    specs.extend(inverted_residual(16, 96, 32, 2));
    specs.push(LayerSpec::Residual {
        body: inverted_residual(32, 192, 32, 1),
    });
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::linear(32 * h4 * w4, classes));
    Ok(specs)
}

fn basic_block(c: usize) -> LayerSpec {
    LayerSpec::Residual {
        body: vec![
            LayerSpec::conv(c, c, 3, 1),
            LayerSpec::bn(c),
            LayerSpec::Relu,
            LayerSpec::conv(c, c, 3, 1),
            LayerSpec::bn(c),
        ],
    }
}

/// ResNet-style control with full 3x3 convolutions (large fan-in).
pub fn toy_resnet(input: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    let (c, h, w) = spatial(input)?;
    let (h2, w2) = (halve(h), halve(w));
    Ok(vec![
        LayerSpec::conv(c, 16, 3, 2),
        LayerSpec::bn(16),
        LayerSpec::Relu,
        basic_block(16),
        LayerSpec::Relu,
        basic_block(16),
        LayerSpec::Relu,
        LayerSpec::conv(16, 16, 3, 2),
        LayerSpec::bn(16),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::linear(16 * halve(h2) * halve(w2), classes),
    ])
}

/// Resolves a model name from a config file.
pub fn by_name(name: &str, input: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    match name {
        "toy_dwnet" => toy_dwnet(input, classes),
        "toy_resnet" => toy_resnet(input, classes),
        other => Err(Error::Config(format!(
            "unknown model {other:?}; expected toy_dwnet or toy_resnet"
        ))),
    }
}
