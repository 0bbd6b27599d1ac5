use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// Architecture descriptor. Textual form:
/// `mlp:2-16-2` (layer widths, input first, classes last) or
/// `cnn:1x8x8:8-16:4` (input CxHxW, conv channels, classes).
///
/// Small CNN: 3x3 convs with padding 1, stride 1 for the first layer and 2
/// afterwards, ReLU after each, then a linear classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArchSpec {
    Mlp { widths: Vec<usize> },
    SmallCnn {
        input: [usize; 3],
        channels: Vec<usize>,
        classes: usize,
    },
}

const KERNEL: usize = 3;

impl ArchSpec {
    pub fn mlp(widths: &[usize]) -> Self {
        ArchSpec::Mlp {
            widths: widths.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidArch(m));
        match self {
            ArchSpec::Mlp { widths } => {
                if widths.len() < 2 {
                    return bad(format!("{self}: need at least input and output widths"));
                }
                if widths.contains(&0) {
                    return bad(format!("{self}: widths must be at least 1"));
                }
            }
            ArchSpec::SmallCnn { input, channels, .. } => {
                if input.contains(&0) || channels.is_empty() || channels.contains(&0) {
                    return bad(format!("{self}: dimensions must be at least 1"));
                }
            }
        }
        if self.classes() < 2 {
            return bad(format!("{self}: class count must be at least 2"));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match self {
            ArchSpec::Mlp { widths } => *widths.last().unwrap_or(&0),
            ArchSpec::SmallCnn { classes, .. } => *classes,
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ArchSpec::Mlp { widths } => vec![widths[0]],
            ArchSpec::SmallCnn { input, .. } => input.to_vec(),
        }
    }

    /// Spatial size after each conv layer.
    fn conv_out(&self) -> (usize, usize) {
        let ArchSpec::SmallCnn { input, channels, .. } = self else {
            unreachable!()
        };
        let (mut h, mut w) = (input[1], input[2]);
        for l in 0..channels.len() {
            let s = if l == 0 { 1 } else { 2 };
            h = (h + 2 - KERNEL) / s + 1;
            w = (w + 2 - KERNEL) / s + 1;
        }
        (h, w)
    }

    /// `(name, shape, fan_in)`; `fan_in` is `None` for biases.
    pub(crate) fn param_layout(&self) -> Vec<(String, Vec<usize>, Option<usize>)> {
        let mut out = Vec::new();
        match self {
            ArchSpec::Mlp { widths } => {
                for (l, pair) in widths.windows(2).enumerate() {
                    out.push((format!("fc{l}.weight"), vec![pair[0], pair[1]], Some(pair[0])));
                    out.push((format!("fc{l}.bias"), vec![pair[1]], None));
                }
            }
            ArchSpec::SmallCnn {
                input,
                channels,
                classes,
            } => {
                let mut cin = input[0];
                for (l, &co) in channels.iter().enumerate() {
                    out.push((
                        format!("conv{l}.weight"),
                        vec![co, cin, KERNEL, KERNEL],
                        Some(cin * KERNEL * KERNEL),
                    ));
                    out.push((format!("conv{l}.bias"), vec![co], None));
                    cin = co;
                }
                let (h, w) = self.conv_out();
                let feat = cin * h * w;
                out.push(("fc.weight".into(), vec![feat, *classes], Some(feat)));
                out.push(("fc.bias".into(), vec![*classes], None));
            }
        }
        out
    }
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchSpec::Mlp { widths } => write!(f, "mlp:{}", join(widths, "-")),
            ArchSpec::SmallCnn {
                input,
                channels,
                classes,
            } => write!(f, "cnn:{}:{}:{classes}", join(input, "x"), join(channels, "-")),
        }
    }
}

fn parse_list(s: &str, sep: char, what: &str) -> Result<Vec<usize>, ModelError> {
    s.split(sep)
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| ModelError::InvalidArch(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

impl FromStr for ArchSpec {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let arch = match parts.as_slice() {
            ["mlp", widths] => ArchSpec::Mlp {
                widths: parse_list(widths, '-', "width")?,
            },
            ["cnn", input, channels, classes] => {
                let dims = parse_list(input, 'x', "input dim")?;
                let input: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| ModelError::InvalidArch(format!("{s}: input must be CxHxW")))?;
                ArchSpec::SmallCnn {
                    input,
                    channels: parse_list(channels, '-', "channel")?,
                    classes: classes
                        .parse()
                        .map_err(|_| ModelError::InvalidArch(format!("{s}: bad class count")))?,
                }
            }
            _ => return Err(ModelError::InvalidArch(format!("unrecognized descriptor {s:?}"))),
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_known_forms() {
        assert_eq!("mlp:2-16-2".parse::<ArchSpec>().unwrap(), ArchSpec::mlp(&[2, 16, 2]));
        let cnn: ArchSpec = "cnn:1x8x8:8-16:4".parse().unwrap();
        assert_eq!(cnn.input_shape(), vec![1, 8, 8]);
        assert_eq!(cnn.classes(), 4);
        assert!("mlp:2".parse::<ArchSpec>().is_err());
        assert!("resnet:18".parse::<ArchSpec>().is_err());
        assert!("cnn:8x8:4:4".parse::<ArchSpec>().is_err());
    }

    proptest! {
        #[test]
        fn descriptor_round_trips(widths in prop::collection::vec(1usize..300, 1..5), classes in 2usize..20) {
            let mut w = widths;
            w.push(classes);
            let arch = ArchSpec::Mlp { widths: w };
            prop_assert_eq!(arch.to_string().parse::<ArchSpec>().unwrap(), arch);

            let cnn = ArchSpec::SmallCnn { input: [1, 8, 8], channels: vec![classes, 3], classes };
            prop_assert_eq!(cnn.to_string().parse::<ArchSpec>().unwrap(), cnn);
        }
    }
}
