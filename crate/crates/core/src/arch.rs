//! Architecture descriptions.
//!
//! A network is written as a whitespace-separated list of layer descriptors:
//!
//! ```text
//! conv(f=5,k=8) relu bn pool(f=2,s=2) conv(f=5,k=16) relu pool(f=2,s=2) flatten dense(64) relu dense(8)
//! ```
//!
//! `conv` takes `f` (kernel size) and `k` (kernel count), optionally `s`
//! (stride, default 1) and `p` (zero padding, default 0). `pool` takes `f`,
//! optionally `s` (default `f`) and `p` (default 0). `dense` takes the output
//! width, positionally or as `n=`. Input widths and channel counts are
//! inferred from the input shape.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        f: usize,
        k: usize,
        s: usize,
        p: usize,
    },
    Relu,
    BatchNorm,
    Pool {
        f: usize,
        s: usize,
        p: usize,
    },
    Flatten,
    Dense {
        n: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ArchSpec {
    pub layers: Vec<LayerSpec>,
}

/// Network of the reference regression pipeline: two conv/pool stages
/// regressing eight values from a 200×200 grayscale image.
pub const REFERENCE_ARCH: &str =
    "conv(f=5,k=8) relu bn pool(f=2,s=2) conv(f=5,k=16) relu pool(f=2,s=2) flatten dense(64) relu dense(8)";

/// Smaller network of the same shape used for the synthetic rectangle task.
pub const SYNTH_ARCH: &str =
    "conv(f=3,k=8) relu bn pool(f=2,s=2) conv(f=3,k=16) relu pool(f=2,s=2) flatten dense(32) relu dense(2)";

impl ArchSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        ArchSpec { layers }
    }

    pub fn reference() -> Self {
        REFERENCE_ARCH
            .parse()
            .expect("built-in architecture parses")
    }

    pub fn synthetic() -> Self {
        SYNTH_ARCH.parse().expect("built-in architecture parses")
    }
}

impl LayerSpec {
    /// The descriptor that rebuilds `layer`'s structure.
    pub fn of(layer: &crate::layers::Layer) -> LayerSpec {
        use crate::layers::Layer;
        match layer {
            Layer::Conv2d(c) => LayerSpec::Conv {
                f: c.kernel_size(),
                k: c.out_channels(),
                s: c.stride,
                p: c.padding,
            },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::BatchNorm(_) => LayerSpec::BatchNorm,
            Layer::MaxPool2d(m) => LayerSpec::Pool {
                f: m.size,
                s: m.stride,
                p: m.padding,
            },
            Layer::Flatten(_) => LayerSpec::Flatten,
            Layer::Dense(d) => LayerSpec::Dense { n: d.outputs() },
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv { f: size, k, s, p } => {
                write!(f, "conv(f={size},k={k}")?;
                if s != 1 {
                    write!(f, ",s={s}")?;
                }
                if p != 0 {
                    write!(f, ",p={p}")?;
                }
                write!(f, ")")
            }
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::BatchNorm => write!(f, "bn"),
            LayerSpec::Pool { f: size, s, p } => {
                write!(f, "pool(f={size},s={s}")?;
                if p != 0 {
                    write!(f, ",p={p}")?;
                }
                write!(f, ")")
            }
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Dense { n } => write!(f, "dense({n})"),
        }
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

fn split_tokens(s: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut depth = 0usize;
    for ch in s.chars() {
        match ch {
            '(' => {
                depth += 1;
                current.push(ch);
            }
            ')' => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| Error::Config(format!("unbalanced ')' in {s:?}")))?;
                current.push(ch);
            }
            c if c.is_whitespace() => {
                if depth > 0 {
                    continue;
                }
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            }
            c => current.push(c),
        }
    }
    if depth != 0 {
        return Err(Error::Config(format!("unbalanced '(' in {s:?}")));
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    Ok(tokens)
}

struct Args<'a> {
    token: &'a str,
    positional: Vec<usize>,
    named: Vec<(String, usize)>,
}

impl<'a> Args<'a> {
    fn parse(token: &'a str, body: &str) -> Result<Self> {
        let mut positional = Vec::new();
        let mut named = Vec::new();
        for part in body.split(',').filter(|p| !p.is_empty()) {
            let number = |v: &str| {
                v.parse::<usize>().map_err(|_| {
                    Error::Config(format!("{token}: {v:?} is not a non-negative integer"))
                })
            };
            match part.split_once('=') {
                Some((k, v)) => named.push((k.to_string(), number(v)?)),
                None => positional.push(number(part)?),
            }
        }
        Ok(Args {
            token,
            positional,
            named,
        })
    }

    fn get(&self, key: &str) -> Option<usize> {
        self.named.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    fn require(&self, key: &str) -> Result<usize> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("{}: missing {key}=", self.token)))
    }

    fn only(&self, keys: &[&str], positional: usize) -> Result<()> {
        if self.positional.len() > positional {
            return Err(Error::Config(format!(
                "{}: too many positional arguments",
                self.token
            )));
        }
        if let Some((k, _)) = self.named.iter().find(|(k, _)| !keys.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "{}: unknown argument {k}",
                self.token
            )));
        }
        Ok(())
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let (name, body) = match token.split_once('(') {
            Some((name, rest)) => {
                let body = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Config(format!("{token}: expected closing ')'")))?;
                (name, body)
            }
            None => (token, ""),
        };
        let args = Args::parse(token, body)?;
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::Config(format!("{token}: {what} must be at least 1")))
            } else {
                Ok(v)
            }
        };
        let lname = name.to_ascii_lowercase();
        let spec = match lname.as_str() {
            "conv" => {
                args.only(&["f", "k", "s", "p"], 0)?;
                LayerSpec::Conv {
                    f: positive(args.require("f")?, "f")?,
                    k: positive(args.require("k")?, "k")?,
                    s: positive(args.get("s").unwrap_or(1), "s")?,
                    p: args.get("p").unwrap_or(0),
                }
            }
            "pool" => {
                args.only(&["f", "s", "p"], 0)?;
                let f = positive(args.require("f")?, "f")?;
                LayerSpec::Pool {
                    f,
                    s: positive(args.get("s").unwrap_or(f), "s")?,
                    p: args.get("p").unwrap_or(0),
                }
            }
            "dense" => {
                args.only(&["n"], 1)?;
                let n = args
                    .positional
                    .first()
                    .copied()
                    .or(args.get("n"))
                    .ok_or_else(|| Error::Config(format!("{token}: missing output width")))?;
                LayerSpec::Dense {
                    n: positive(n, "n")?,
                }
            }
            "relu" | "bn" | "batchnorm" | "flatten" => {
                args.only(&[], 0)?;
                match lname.as_str() {
                    "relu" => LayerSpec::Relu,
                    "flatten" => LayerSpec::Flatten,
                    _ => LayerSpec::BatchNorm,
                }
            }
            other => return Err(Error::Config(format!("unknown layer type {other:?}"))),
        };
        Ok(spec)
    }
}

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let layers = split_tokens(s)?
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.parse()
                    .map_err(|e: Error| e.context(format_args!("layer {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchSpec { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trips_through_display() {
        let arch = ArchSpec::reference();
        assert_eq!(arch.layers.len(), 11);
        assert_eq!(arch.to_string(), REFERENCE_ARCH);
        assert_eq!(
            arch.layers[0],
            LayerSpec::Conv {
                f: 5,
                k: 8,
                s: 1,
                p: 0
            }
        );
        assert_eq!(arch.layers[3], LayerSpec::Pool { f: 2, s: 2, p: 0 });
    }

    #[test]
    fn defaults_and_spacing() {
        let arch: ArchSpec = "conv(f=3, k=2, p=1)  pool(f=2) dense(n=4) batchnorm"
            .parse()
            .unwrap();
        assert_eq!(
            arch.layers,
            vec![
                LayerSpec::Conv {
                    f: 3,
                    k: 2,
                    s: 1,
                    p: 1
                },
                LayerSpec::Pool { f: 2, s: 2, p: 0 },
                LayerSpec::Dense { n: 4 },
                LayerSpec::BatchNorm,
            ]
        );
        assert_eq!("".parse::<ArchSpec>().unwrap(), ArchSpec::default());
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "conv(k=2)",
            "dense",
            "pool(f=0)",
            "softmax",
            "conv(f=3,k=2",
            "relu(1)",
            "dense(3,4)",
            "conv(f=3,k=2,q=1)",
        ] {
            assert!(
                matches!(bad.parse::<ArchSpec>(), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }
}
