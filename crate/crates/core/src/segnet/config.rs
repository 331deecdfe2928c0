use std::fmt;

use crate::config::{parse_bool, parse_list, parse_num, KeyValues};
use crate::error::{Error, Result};
use crate::ops::batchnorm::{DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::ops::ConvSpec;

pub const STEM_LAYERS: usize = 3;
pub const RESIDUAL_BLOCKS: usize = 6;
pub const ATROUS_RATE: usize = 3;

/// One residual block: output width, stride of its first conv, and the
/// dilation rate shared by both of its convs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
    pub rate: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: Vec<usize>,
    pub kernel: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    pub head_bias: bool,
    pub upsample_factor: usize,
    /// Side length images are resized to before entering the network.
    pub input_size: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let block = |channels, stride, rate| BlockSpec {
            channels,
            stride,
            rate,
        };
        ModelConfig {
            in_channels: 1,
            stem_channels: vec![16, 16, 16],
            kernel: 3,
            blocks: vec![
                block(16, 2, 1),
                block(16, 1, 1),
                block(32, 2, 1),
                block(32, 1, 1),
                block(64, 1, ATROUS_RATE),
                block(64, 1, ATROUS_RATE),
            ],
            num_classes: 2,
            head_bias: true,
            upsample_factor: 4,
            input_size: 256,
            bn_epsilon: DEFAULT_EPSILON,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }
}

/// Convolutions of one residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConvs {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub projection: Option<ConvSpec>,
}

impl ModelConfig {
    /// Same architecture with a different number of input channels.
    pub fn with_in_channels(&self, in_channels: usize) -> Self {
        ModelConfig {
            in_channels,
            ..self.clone()
        }
    }

    pub fn stem_specs(&self) -> Vec<ConvSpec> {
        let mut prev = self.in_channels;
        self.stem_channels
            .iter()
            .map(|&c| {
                let spec = ConvSpec::same(prev, c, self.kernel, 1, 1);
                prev = c;
                spec
            })
            .collect()
    }

    pub fn block_specs(&self) -> Vec<BlockConvs> {
        let mut prev = self.stem_channels.last().copied().unwrap_or(self.in_channels);
        self.blocks
            .iter()
            .map(|b| {
                let conv1 = ConvSpec::same(prev, b.channels, self.kernel, b.stride, b.rate);
                let conv2 = ConvSpec::same(b.channels, b.channels, self.kernel, 1, b.rate);
                let projection = (b.stride != 1 || prev != b.channels)
                    .then(|| ConvSpec::same(prev, b.channels, 1, b.stride, 1));
                prev = b.channels;
                BlockConvs {
                    conv1,
                    conv2,
                    projection,
                }
            })
            .collect()
    }

    pub fn head_spec(&self) -> ConvSpec {
        let last = self.blocks.last().map_or(self.in_channels, |b| b.channels);
        ConvSpec::same(last, self.num_classes, 1, 1, 1)
    }

    /// Product of all strides.
    pub fn global_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    /// Checks the architecture rules, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.stem_channels.len() != STEM_LAYERS {
            return fail(format!(
                "stem must have exactly {STEM_LAYERS} convolutions, found {}",
                self.stem_channels.len()
            ));
        }
        if self.blocks.len() != RESIDUAL_BLOCKS {
            return fail(format!(
                "network must have exactly {RESIDUAL_BLOCKS} residual blocks, found {}",
                self.blocks.len()
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return fail(format!("kernel must be odd and positive, got {}", self.kernel));
        }
        if self.stem_channels.iter().chain(self.blocks.iter().map(|b| &b.channels)).any(|&c| c == 0) {
            return fail("channel widths must be positive".into());
        }
        let strided = self.blocks.iter().filter(|b| b.stride == 2).count();
        if strided != 2 || self.blocks.iter().any(|b| b.stride != 1 && b.stride != 2) {
            return fail(format!(
                "exactly 2 blocks must have first-conv stride 2 (others 1), found strides {:?}",
                self.blocks.iter().map(|b| b.stride).collect::<Vec<_>>()
            ));
        }
        let n = self.blocks.len();
        for (i, b) in self.blocks.iter().enumerate() {
            let want = if i >= n - 2 { ATROUS_RATE } else { 1 };
            if b.rate != want {
                return fail(format!(
                    "block {} has rate {}; the final 2 blocks must use rate {ATROUS_RATE} and all others rate 1",
                    i + 1,
                    b.rate
                ));
            }
        }
        if self.num_classes != 2 {
            return fail(format!("head must produce 2 classes, got {}", self.num_classes));
        }
        if self.upsample_factor != self.global_stride() {
            return fail(format!(
                "upsample_factor {} must equal the global stride {}",
                self.upsample_factor,
                self.global_stride()
            ));
        }
        if self.input_size == 0 || self.input_size % self.upsample_factor != 0 {
            return fail(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size, self.upsample_factor
            ));
        }
        if !(self.bn_epsilon > 0.0) {
            return fail(format!("bn_epsilon must be positive, got {}", self.bn_epsilon));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return fail(format!("bn_momentum must lie in (0,1), got {}", self.bn_momentum));
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "in_channels",
        "stem_channels",
        "kernel",
        "block_channels",
        "block_strides",
        "block_rates",
        "num_classes",
        "head_bias",
        "upsample_factor",
        "input_size",
        "bn_epsilon",
        "bn_momentum",
    ];

    pub fn to_kv(&self) -> KeyValues {
        let join = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("in_channels".into(), self.in_channels.to_string()),
            ("stem_channels".into(), join(&mut self.stem_channels.iter().copied())),
            ("kernel".into(), self.kernel.to_string()),
            ("block_channels".into(), join(&mut self.blocks.iter().map(|b| b.channels))),
            ("block_strides".into(), join(&mut self.blocks.iter().map(|b| b.stride))),
            ("block_rates".into(), join(&mut self.blocks.iter().map(|b| b.rate))),
            ("num_classes".into(), self.num_classes.to_string()),
            ("head_bias".into(), self.head_bias.to_string()),
            ("upsample_factor".into(), self.upsample_factor.to_string()),
            ("input_size".into(), self.input_size.to_string()),
            ("bn_epsilon".into(), self.bn_epsilon.to_string()),
            ("bn_momentum".into(), self.bn_momentum.to_string()),
        ]
    }

    /// Applies one `key = value` pair. Returns `Ok(false)` for keys this
    /// type does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let resize = |blocks: &mut Vec<BlockSpec>, n: usize| {
            if blocks.len() != n {
                blocks.resize(
                    n,
                    BlockSpec {
                        channels: 1,
                        stride: 1,
                        rate: 1,
                    },
                );
            }
        };
        match key {
            "in_channels" => self.in_channels = parse_num(value)?,
            "stem_channels" => self.stem_channels = parse_list(value)?,
            "kernel" => self.kernel = parse_num(value)?,
            "block_channels" | "block_strides" | "block_rates" => {
                let list: Vec<usize> = parse_list(value)?;
                resize(&mut self.blocks, list.len());
                for (b, v) in self.blocks.iter_mut().zip(list) {
                    match key {
                        "block_channels" => b.channels = v,
                        "block_strides" => b.stride = v,
                        _ => b.rate = v,
                    }
                }
            }
            "num_classes" => self.num_classes = parse_num(value)?,
            "head_bias" => self.head_bias = parse_bool(value)?,
            "upsample_factor" => self.upsample_factor = parse_num(value)?,
            "input_size" => self.input_size = parse_num(value)?,
            "bn_epsilon" => self.bn_epsilon = parse_num(value)?,
            "bn_momentum" => self.bn_momentum = parse_num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut config = ModelConfig::default();
        let mut lengths = Vec::new();
        for entry in crate::config::parse_kv(text)? {
            match config.apply(&entry.key, &entry.value) {
                Ok(true) => {
                    if entry.key.starts_with("block_") {
                        lengths.push((entry.line, config.blocks.len()));
                    }
                }
                Ok(false) => {
                    return Err(Error::ConfigParse {
                        line: entry.line,
                        msg: format!("unknown key '{}'", entry.key),
                    })
                }
                Err(msg) => return Err(Error::ConfigParse { line: entry.line, msg }),
            }
        }
        check_block_lists(&lengths)?;
        Ok(config)
    }
}

/// The three `block_*` lists must agree in length.
pub(crate) fn check_block_lists(lengths: &[(usize, usize)]) -> Result<()> {
    if let Some(&(_, first)) = lengths.first() {
        if let Some(&(line, n)) = lengths.iter().find(|(_, n)| *n != first) {
            return Err(Error::ConfigParse {
                line,
                msg: format!("block list has {n} entries, earlier block list has {first}"),
            });
        }
    }
    Ok(())
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.global_stride(), 4);
        assert_eq!(c.stem_specs().len() + 2 * c.block_specs().len(), 15);
    }

    #[test]
    fn five_blocks_rejected() {
        let mut c = ModelConfig::default();
        c.blocks.remove(0);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("6 residual blocks"), "{err}");
    }

    #[test]
    fn rule_violations_are_named() {
        let mut c = ModelConfig::default();
        c.blocks[1].stride = 2;
        assert!(c.validate().unwrap_err().to_string().contains("stride 2"));
        let mut c = ModelConfig::default();
        c.blocks[3].rate = 3;
        assert!(c.validate().unwrap_err().to_string().contains("rate"));
        let mut c = ModelConfig::default();
        c.stem_channels.push(8);
        assert!(c.validate().unwrap_err().to_string().contains("stem"));
        let mut c = ModelConfig::default();
        c.input_size = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn atrous_layers_keep_three_by_three_weights() {
        let c = ModelConfig::default();
        for b in &c.block_specs()[4..] {
            for s in [b.conv1, b.conv2] {
                assert_eq!(s.effective_kernel(), 7);
                assert_eq!((s.kernel, s.rate), (3, 3));
                assert_eq!(s.weight_count(), s.in_channels * s.out_channels * 9);
            }
        }
    }

    #[test]
    fn projections_where_shapes_change() {
        let c = ModelConfig::default();
        let with_proj: Vec<bool> = c.block_specs().iter().map(|b| b.projection.is_some()).collect();
        assert_eq!(with_proj, [true, false, true, false, true, false]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default();
        c.blocks[0].channels = 24;
        c.bn_epsilon = 3e-6;
        let back = ModelConfig::from_kv_text(&c.to_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn mismatched_block_lists_rejected() {
        let text = "block_channels = 1,2,3\nblock_strides = 1,2\n";
        assert!(ModelConfig::from_kv_text(text).is_err());
    }
}
