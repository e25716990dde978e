use serde::Serialize;

use crate::error::{Error, Result};

/// Published cost of an ImageNet backbone at 224×224 input, plus the total
/// captioner cost reported for it when used as the visual encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EncoderCost {
    pub name: &'static str,
    /// Multiply-adds in millions, as the source reports them.
    pub mflops: f64,
    pub params_m: f64,
    pub source: &'static str,
    pub published_total_mflops: f64,
    pub published_total_params_m: f64,
}

const fn entry(
    name: &'static str,
    mflops: f64,
    params_m: f64,
    source: &'static str,
    published_total_mflops: f64,
    published_total_params_m: f64,
) -> EncoderCost {
    EncoderCost {
        name,
        mflops,
        params_m,
        source,
        published_total_mflops,
        published_total_params_m,
    }
}

pub const ENCODERS: [EncoderCost; 10] = [
    entry(
        "ShuffleNetV2x0.5",
        41.0,
        1.4,
        "Ma et al. 2018, ShuffleNet V2, Table 5",
        837.575,
        23.55,
    ),
    entry(
        "MobileNetV3_Small",
        56.0,
        2.5,
        "Howard et al. 2019, MobileNetV3, Table 3",
        857.575,
        24.65,
    ),
    entry(
        "MobileNetV1X0.25",
        41.0,
        0.47,
        "Howard et al. 2017, MobileNets, Table 7 (0.25 MobileNet-224)",
        886.715,
        22.62,
    ),
    entry(
        "ShuffleNetV2x1.0",
        146.0,
        2.3,
        "Ma et al. 2018, ShuffleNet V2, Table 5",
        937.575,
        24.45,
    ),
    entry(
        "MobileNetV3_Large",
        219.0,
        5.4,
        "Howard et al. 2019, MobileNetV3, Table 3",
        1017.575,
        27.65,
    ),
    entry(
        "ShuffleNetV2x1.5",
        299.0,
        3.5,
        "Ma et al. 2018, ShuffleNet V2, Table 5",
        1097.575,
        25.65,
    ),
    entry(
        "EfficientNetB0",
        390.0,
        5.3,
        "Tan & Le 2019, EfficientNet, Table 2",
        1187.575,
        27.45,
    ),
    entry(
        "ShuffleNetV2x2.0",
        591.0,
        7.4,
        "Ma et al. 2018, ShuffleNet V2, Table 5",
        1377.575,
        29.55,
    ),
    entry(
        "EfficientNetB1",
        700.0,
        7.8,
        "Tan & Le 2019, EfficientNet, Table 2",
        1487.575,
        29.95,
    ),
    entry(
        "ResNet101",
        7600.0,
        44.5,
        "He et al. 2016, Table 1 (FLOPs); parameter count from torchvision",
        8597.575,
        66.65,
    ),
];

pub const DEFAULT_ENCODER: &str = "ShuffleNetV2x1.5";

pub fn encoder_cost(name: &str) -> Result<&'static EncoderCost> {
    ENCODERS.iter().find(|e| e.name.eq_ignore_ascii_case(name)).ok_or_else(|| {
        let known: Vec<&str> = ENCODERS.iter().map(|e| e.name).collect();
        Error::Lookup(format!("unknown encoder {name:?}; known: {}", known.join(", ")))
    })
}
