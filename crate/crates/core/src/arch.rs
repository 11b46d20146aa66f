//! Declarative network descriptions and exact parameter / FLOP accounting.
//!
//! Only convolutions (regular and depthwise) and dense layers are counted, without
//! biases. One multiply-accumulate is one FLOP. Batch norm, pooling, activations and
//! residual additions count as zero.
//!
//! Text format, one layer per line, `#` comments:
//!
//! ```text
//! name toy
//! input c=3 h=32 w=32
//! conv k=3 in=3 out=16 stride=1 pad=same maskable=false
//! bn
//! relu
//! pool kind=max k=2 stride=2 pad=valid
//! residual
//!   conv k=3 in=16 out=16
//!   bn
//!   shortcut conv k=1 in=16 out=16
//! gap
//! classifier
//! dense in=16 out=10
//! ```
//!
//! Indented lines belong to the preceding `residual`; a `shortcut` prefix puts the layer
//! on the projection branch. Layers after `classifier` form the per-model head.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::mask::FilterMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Conv {
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: Padding,
        maskable: bool,
    },
    Depthwise {
        k: usize,
        c: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        d_in: usize,
        d_out: usize,
    },
    BatchNorm,
    Relu,
    Pool {
        kind: PoolKind,
        k: usize,
        stride: usize,
        padding: Padding,
    },
    GlobalAvgPool,
    Flatten,
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
    Classifier,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Depthwise { .. } => "depthwise",
            Layer::Dense { .. } => "dense",
            Layer::BatchNorm => "bn",
            Layer::Relu => "relu",
            Layer::Pool { .. } => "pool",
            Layer::GlobalAvgPool => "gap",
            Layer::Flatten => "flatten",
            Layer::Residual { .. } => "residual",
            Layer::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input: InputShape,
    pub layers: Vec<Layer>,
}

/// Activation shape while walking the layer list; `flat` once spatial axes are gone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Flow {
    c: usize,
    h: usize,
    w: usize,
    flat: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerStats {
    pub id: usize,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
    /// `(C, H, W)` with `C` counting kept channels, or `(D, 1, 1)` for flattened outputs.
    pub out_shape: (usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchStats {
    pub layers: Vec<LayerStats>,
    pub totals: Totals,
}

const BUILTINS: &[(&str, &str)] = &[
    ("toy4", include_str!("../archs/toy4.arch")),
    ("vgg16-cifar10", include_str!("../archs/vgg16-cifar10.arch")),
    ("resnet50", include_str!("../archs/resnet50.arch")),
    ("mobilenetv1-cifar100", include_str!("../archs/mobilenetv1-cifar100.arch")),
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _)| *n)
}

pub fn builtin_text(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

struct KeyVals<'a> {
    line: usize,
    map: BTreeMap<&'a str, &'a str>,
}

impl<'a> KeyVals<'a> {
    fn parse(line: usize, tokens: &[&'a str]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in tokens {
            let (k, v) = t.split_once('=').ok_or_else(|| Error::ArchParse {
                line,
                msg: format!("expected key=value, got `{t}`"),
            })?;
            if map.insert(k, v).is_some() {
                return Err(Error::ArchParse {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(KeyVals { line, map })
    }

    fn take_raw(&mut self, key: &str) -> Option<&'a str> {
        self.map.remove(key)
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: Option<T>) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.take_raw(key) {
            Some(v) => v.parse::<T>().map_err(|e| Error::ArchParse {
                line: self.line,
                msg: format!("bad value for `{key}`: {e}"),
            }),
            None => default.ok_or_else(|| Error::ArchParse {
                line: self.line,
                msg: format!("missing `{key}`"),
            }),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.map.keys().next() {
            return Err(Error::ArchParse {
                line: self.line,
                msg: format!("unknown key `{k}`"),
            });
        }
        Ok(())
    }
}

fn parse_layer(line: usize, kind: &str, rest: &[&str]) -> Result<Layer> {
    let mut kv = KeyVals::parse(line, rest)?;
    let layer = match kind {
        "conv" => Layer::Conv {
            k: kv.get("k", None)?,
            c_in: kv.get("in", None)?,
            c_out: kv.get("out", None)?,
            stride: kv.get("stride", Some(1))?,
            padding: kv.get("pad", Some(Padding::Same))?,
            maskable: kv.get("maskable", Some(true))?,
        },
        "depthwise" => Layer::Depthwise {
            k: kv.get("k", None)?,
            c: kv.get("c", None)?,
            stride: kv.get("stride", Some(1))?,
            padding: kv.get("pad", Some(Padding::Same))?,
        },
        "dense" => Layer::Dense {
            d_in: kv.get("in", None)?,
            d_out: kv.get("out", None)?,
        },
        "bn" => {
            kv.take_raw("c");
            Layer::BatchNorm
        }
        "relu" => Layer::Relu,
        "pool" => {
            let kind = match kv.get::<String>("kind", Some("max".into()))?.as_str() {
                "max" => PoolKind::Max,
                "avg" => PoolKind::Avg,
                other => {
                    return Err(Error::ArchParse {
                        line,
                        msg: format!("unknown pool kind `{other}`"),
                    })
                }
            };
            let k = kv.get("k", None)?;
            Layer::Pool {
                kind,
                k,
                stride: kv.get("stride", Some(k))?,
                padding: kv.get("pad", Some(Padding::Valid))?,
            }
        }
        "gap" => Layer::GlobalAvgPool,
        "flatten" => Layer::Flatten,
        "classifier" => Layer::Classifier,
        other => {
            return Err(Error::ArchParse {
                line,
                msg: format!("unknown layer `{other}`"),
            })
        }
    };
    kv.finish()?;
    Ok(layer)
}

impl ArchSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("unnamed");
        let mut input = None;
        let mut layers: Vec<Layer> = Vec::new();
        // Line number of the open residual header, if any.
        let mut open_block: Option<usize> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let indented = content.starts_with(' ') || content.starts_with('\t');
            let tokens: Vec<&str> = content.split_whitespace().collect();
            let (head, rest) = (tokens[0], &tokens[1..]);

            if indented {
                if open_block.is_none() {
                    return Err(Error::ArchParse {
                        line,
                        msg: "indented line outside a residual block".into(),
                    });
                }
                let Some(Layer::Residual { body, shortcut }) = layers.last_mut() else {
                    unreachable!("open block is always the last layer")
                };
                if head == "shortcut" {
                    let (kind, rest) = rest.split_first().ok_or_else(|| Error::ArchParse {
                        line,
                        msg: "shortcut needs a layer".into(),
                    })?;
                    shortcut.push(parse_layer(line, kind, rest)?);
                } else if head == "residual" || head == "classifier" {
                    return Err(Error::ArchParse {
                        line,
                        msg: format!("`{head}` is not allowed inside a residual block"),
                    });
                } else {
                    body.push(parse_layer(line, head, rest)?);
                }
                continue;
            }

            if let Some(start) = open_block.take() {
                if let Some(Layer::Residual { body, .. }) = layers.last() {
                    if body.is_empty() {
                        return Err(Error::ArchParse {
                            line: start,
                            msg: "empty residual block".into(),
                        });
                    }
                }
            }
            match head {
                "name" => {
                    name = rest.join(" ");
                }
                "input" => {
                    let mut kv = KeyVals::parse(line, rest)?;
                    input = Some(InputShape {
                        c: kv.get("c", None)?,
                        h: kv.get("h", None)?,
                        w: kv.get("w", None)?,
                    });
                    kv.finish()?;
                }
                "residual" => {
                    if !rest.is_empty() {
                        return Err(Error::ArchParse {
                            line,
                            msg: "residual takes no arguments".into(),
                        });
                    }
                    layers.push(Layer::Residual {
                        body: Vec::new(),
                        shortcut: Vec::new(),
                    });
                    open_block = Some(line);
                }
                kind => layers.push(parse_layer(line, kind, rest)?),
            }
        }
        if let (Some(start), Some(Layer::Residual { body, .. })) = (open_block, layers.last()) {
            if body.is_empty() {
                return Err(Error::ArchParse {
                    line: start,
                    msg: "empty residual block".into(),
                });
            }
        }
        let input = input.ok_or(Error::ArchParse {
            line: 0,
            msg: "missing `input` line".into(),
        })?;
        let spec = ArchSpec { name, input, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let text = builtin_text(name).ok_or_else(|| {
            Error::config(
                "arch",
                format!(
                    "unknown builtin `{name}` (known: {})",
                    builtin_names().collect::<Vec<_>>().join(", ")
                ),
            )
        })?;
        Self::parse(text)
    }

    /// A builtin name or a path to an arch file.
    pub fn load(source: &str) -> Result<Self> {
        if builtin_text(source).is_some() {
            return Self::builtin(source);
        }
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        fn write_layer(out: &mut String, l: &Layer) {
            match l {
                Layer::Conv {
                    k,
                    c_in,
                    c_out,
                    stride,
                    padding,
                    maskable,
                } => out.push_str(&format!(
                    "conv k={k} in={c_in} out={c_out} stride={stride} pad={} maskable={maskable}",
                    pad_name(*padding)
                )),
                Layer::Depthwise { k, c, stride, padding } => {
                    out.push_str(&format!("depthwise k={k} c={c} stride={stride} pad={}", pad_name(*padding)))
                }
                Layer::Dense { d_in, d_out } => out.push_str(&format!("dense in={d_in} out={d_out}")),
                Layer::Pool { kind, k, stride, padding } => out.push_str(&format!(
                    "pool kind={} k={k} stride={stride} pad={}",
                    match kind {
                        PoolKind::Max => "max",
                        PoolKind::Avg => "avg",
                    },
                    pad_name(*padding)
                )),
                other => out.push_str(other.kind_name()),
            }
        }
        fn pad_name(p: Padding) -> &'static str {
            match p {
                Padding::Same => "same",
                Padding::Valid => "valid",
            }
        }
        let mut out = format!(
            "name {}\ninput c={} h={} w={}\n",
            self.name, self.input.c, self.input.h, self.input.w
        );
        for l in &self.layers {
            if let Layer::Residual { body, shortcut } = l {
                out.push_str("residual\n");
                for b in body {
                    out.push_str("  ");
                    write_layer(&mut out, b);
                    out.push('\n');
                }
                for s in shortcut {
                    out.push_str("  shortcut ");
                    write_layer(&mut out, s);
                    out.push('\n');
                }
            } else {
                write_layer(&mut out, l);
                out.push('\n');
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.stats(None).map(|_| ())
    }

    /// Output filter counts of the maskable convs, in traversal order (residual bodies
    /// before their shortcuts).
    pub fn maskable_filters(&self) -> Vec<usize> {
        fn walk(layers: &[Layer], out: &mut Vec<usize>) {
            for l in layers {
                match l {
                    Layer::Conv { c_out, maskable: true, .. } => out.push(*c_out),
                    Layer::Residual { body, shortcut } => {
                        walk(body, out);
                        walk(shortcut, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    /// Per-layer statistics for the top-level layers (a residual block is one row).
    ///
    /// With a mask, each maskable conv keeps only its enabled filters and every consumer
    /// sees only the kept channels of its producer. At a residual join the output keeps
    /// `max(branch, shortcut)` channels.
    pub fn stats(&self, mask: Option<&FilterMask>) -> Result<ArchStats> {
        if let Some(m) = mask {
            let sizes = self.maskable_filters();
            let got: Vec<usize> = m.layers.iter().map(Vec::len).collect();
            if got != sizes {
                return Err(Error::shape(
                    "count_stats",
                    format!("mask layer sizes {got:?} do not match maskable convs {sizes:?}"),
                ));
            }
        }
        let mut walker = Walker {
            mask,
            next_mask: 0,
        };
        let mut flow = Flow {
            c: self.input.c,
            h: self.input.h,
            w: self.input.w,
            flat: None,
        };
        let mut kept = Kept {
            c: self.input.c,
            flat: None,
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut totals = Totals::default();
        for (id, layer) in self.layers.iter().enumerate() {
            let t = walker.layer(id, layer, &mut flow, &mut kept)?;
            totals.params += t.params;
            totals.flops += t.flops;
            let out_shape = match kept.flat.or(flow.flat) {
                Some(d) => (d, 1, 1),
                None => (kept.c, flow.h, flow.w),
            };
            layers.push(LayerStats {
                id,
                kind: layer.kind_name(),
                params: t.params,
                flops: t.flops,
                out_shape,
            });
        }
        Ok(ArchStats { layers, totals })
    }
}

/// Effective (kept) channel count alongside the full one.
#[derive(Debug, Clone, Copy)]
struct Kept {
    c: usize,
    flat: Option<usize>,
}

struct Walker<'m> {
    mask: Option<&'m FilterMask>,
    next_mask: usize,
}

impl Walker<'_> {
    fn chain(id: usize, msg: String) -> Error {
        Error::ArchChain { layer: id, msg }
    }

    fn spatial(id: usize, flow: &Flow) -> Result<()> {
        if flow.flat.is_some() {
            return Err(Self::chain(id, "spatial layer after flattening".into()));
        }
        Ok(())
    }

    fn layer(&mut self, id: usize, layer: &Layer, flow: &mut Flow, kept: &mut Kept) -> Result<Totals> {
        let mut t = Totals::default();
        match *layer {
            Layer::Conv {
                k,
                c_in,
                c_out,
                stride,
                padding,
                maskable,
            } => {
                Self::spatial(id, flow)?;
                if c_in != flow.c {
                    return Err(Self::chain(id, format!("conv expects {c_in} channels, input has {}", flow.c)));
                }
                if stride == 0 || k == 0 || c_out == 0 {
                    return Err(Self::chain(id, "conv needs positive k, out and stride".into()));
                }
                let (h, _) = padding
                    .resolve(flow.h, k, stride)
                    .ok_or_else(|| Self::chain(id, format!("kernel {k} larger than input {}", flow.h)))?;
                let (w, _) = padding
                    .resolve(flow.w, k, stride)
                    .ok_or_else(|| Self::chain(id, format!("kernel {k} larger than input {}", flow.w)))?;
                let out_eff = match (maskable, self.mask) {
                    (true, Some(m)) => {
                        let n = m.kept_in(self.next_mask);
                        self.next_mask += 1;
                        n
                    }
                    (true, None) => {
                        self.next_mask += 1;
                        c_out
                    }
                    (false, _) => c_out,
                };
                let kk = (k * k) as u64;
                t.params = kk * kept.c as u64 * out_eff as u64;
                t.flops = (h * w) as u64 * t.params;
                *flow = Flow { c: c_out, h, w, flat: None };
                kept.c = out_eff;
            }
            Layer::Depthwise { k, c, stride, padding } => {
                Self::spatial(id, flow)?;
                if c != flow.c {
                    return Err(Self::chain(id, format!("depthwise expects {c} channels, input has {}", flow.c)));
                }
                if stride == 0 || k == 0 {
                    return Err(Self::chain(id, "depthwise needs positive k and stride".into()));
                }
                let (h, _) = padding
                    .resolve(flow.h, k, stride)
                    .ok_or_else(|| Self::chain(id, "depthwise kernel larger than input".into()))?;
                let (w, _) = padding
                    .resolve(flow.w, k, stride)
                    .ok_or_else(|| Self::chain(id, "depthwise kernel larger than input".into()))?;
                t.params = (k * k) as u64 * kept.c as u64;
                t.flops = (h * w) as u64 * t.params;
                flow.h = h;
                flow.w = w;
            }
            Layer::Dense { d_in, d_out } => {
                let flat = flow
                    .flat
                    .ok_or_else(|| Self::chain(id, "dense layer needs `flatten` or `gap` first".into()))?;
                if d_in != flat {
                    return Err(Self::chain(id, format!("dense expects {d_in} inputs, got {flat}")));
                }
                let in_eff = kept.flat.unwrap_or(d_in);
                t.params = in_eff as u64 * d_out as u64;
                t.flops = t.params;
                flow.flat = Some(d_out);
                kept.flat = Some(d_out);
            }
            Layer::BatchNorm | Layer::Relu | Layer::Classifier => {}
            Layer::Pool { k, stride, padding, .. } => {
                Self::spatial(id, flow)?;
                if stride == 0 || k == 0 {
                    return Err(Self::chain(id, "pool needs positive k and stride".into()));
                }
                let (h, _) = padding
                    .resolve(flow.h, k, stride)
                    .ok_or_else(|| Self::chain(id, format!("pool window {k} larger than input {}", flow.h)))?;
                let (w, _) = padding
                    .resolve(flow.w, k, stride)
                    .ok_or_else(|| Self::chain(id, format!("pool window {k} larger than input {}", flow.w)))?;
                flow.h = h;
                flow.w = w;
            }
            Layer::GlobalAvgPool => {
                Self::spatial(id, flow)?;
                flow.flat = Some(flow.c);
                kept.flat = Some(kept.c);
            }
            Layer::Flatten => {
                Self::spatial(id, flow)?;
                flow.flat = Some(flow.c * flow.h * flow.w);
                kept.flat = Some(kept.c * flow.h * flow.w);
            }
            Layer::Residual { ref body, ref shortcut } => {
                Self::spatial(id, flow)?;
                let (mut bf, mut bk) = (*flow, *kept);
                for l in body {
                    if matches!(l, Layer::Residual { .. } | Layer::Classifier) {
                        return Err(Self::chain(id, "nested block or classifier inside residual".into()));
                    }
                    let s = self.layer(id, l, &mut bf, &mut bk)?;
                    t.params += s.params;
                    t.flops += s.flops;
                }
                let (mut sf, mut sk) = (*flow, *kept);
                for l in shortcut {
                    let s = self.layer(id, l, &mut sf, &mut sk)?;
                    t.params += s.params;
                    t.flops += s.flops;
                }
                if bf != sf {
                    return Err(Self::chain(
                        id,
                        format!(
                            "residual branch output {}x{}x{} does not match shortcut {}x{}x{}",
                            bf.c, bf.h, bf.w, sf.c, sf.h, sf.w
                        ),
                    ));
                }
                *flow = bf;
                kept.c = bk.c.max(sk.c);
            }
        }
        Ok(t)
    }
}

pub fn count_stats(arch: &ArchSpec, mask: Option<&FilterMask>) -> Result<ArchStats> {
    arch.stats(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressionReport {
    /// `baseline / pruned` parameter count.
    pub param_ratio: f64,
    pub flops_ratio: f64,
    /// Pruned model size as a percentage of the baseline.
    pub param_pct: f64,
    pub flops_pct: f64,
}

pub fn compression_report(baseline: Totals, pruned: Totals) -> Result<CompressionReport> {
    if baseline.params == 0 || baseline.flops == 0 {
        return Err(Error::ZeroDenominator("baseline"));
    }
    if pruned.params == 0 || pruned.flops == 0 {
        return Err(Error::ZeroDenominator("pruned"));
    }
    let (bp, bf, pp, pf) = (
        baseline.params as f64,
        baseline.flops as f64,
        pruned.params as f64,
        pruned.flops as f64,
    );
    Ok(CompressionReport {
        param_ratio: bp / pp,
        flops_ratio: bf / pf,
        param_pct: 100.0 * pp / bp,
        flops_pct: 100.0 * pf / bf,
    })
}

/// Compact human-readable count: `118M`, `2.05M`, `3.85B`.
pub fn human(n: u64) -> String {
    let (v, unit) = match n {
        n if n >= 1_000_000_000 => (n as f64 / 1e9, "B"),
        n if n >= 1_000_000 => (n as f64 / 1e6, "M"),
        n if n >= 1_000 => (n as f64 / 1e3, "K"),
        n => return n.to_string(),
    };
    if v >= 100.0 {
        format!("{v:.0}{unit}")
    } else if v >= 10.0 {
        format!("{v:.1}{unit}")
    } else {
        format!("{v:.2}{unit}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for name in builtin_names() {
            let a = ArchSpec::builtin(name).unwrap();
            assert_eq!(ArchSpec::parse(&a.to_text()).unwrap().layers, a.layers, "{name}");
        }
    }

    #[test]
    fn one_by_one_conv() {
        let a = ArchSpec::parse("input c=1 h=1 w=1\nconv k=1 in=1 out=1\n").unwrap();
        assert_eq!(a.stats(None).unwrap().totals, Totals { params: 1, flops: 1 });
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = ArchSpec::parse("input c=3 h=8 w=8\n\nconv k=3 in=3\n").unwrap_err();
        assert!(matches!(e, Error::ArchParse { line: 3, .. }), "{e}");
        let e = ArchSpec::parse("input c=3 h=8 w=8\nfoo\n").unwrap_err();
        assert!(matches!(e, Error::ArchParse { line: 2, .. }), "{e}");
        let e = ArchSpec::parse("input c=3 h=8 w=8\n  bn\n").unwrap_err();
        assert!(matches!(e, Error::ArchParse { line: 2, .. }), "{e}");
        let e = ArchSpec::parse("input c=3 h=8 w=8\nconv k=3 in=3 out=4 bogus=1\n").unwrap_err();
        assert!(matches!(e, Error::ArchParse { line: 2, .. }), "{e}");
    }

    #[test]
    fn chaining_is_checked() {
        let e = ArchSpec::parse("input c=3 h=8 w=8\nconv k=3 in=4 out=4\n").unwrap_err();
        assert!(matches!(e, Error::ArchChain { layer: 0, .. }), "{e}");
        let e = ArchSpec::parse("input c=3 h=8 w=8\ndense in=3 out=2\n").unwrap_err();
        assert!(matches!(e, Error::ArchChain { .. }), "{e}");
        let e = ArchSpec::parse("input c=4 h=8 w=8\nresidual\n  conv k=3 in=4 out=8\n").unwrap_err();
        assert!(matches!(e, Error::ArchChain { .. }), "{e}");
    }

    #[test]
    fn half_mask_quarters_flops() {
        let a = ArchSpec::parse(
            "input c=4 h=4 w=4\nconv k=3 in=4 out=4 maskable=true\nconv k=3 in=4 out=4 maskable=true\n",
        )
        .unwrap();
        let full = a.stats(None).unwrap();
        let m = FilterMask {
            layers: vec![vec![true, false, true, false], vec![true, true, false, false]],
        };
        let half = a.stats(Some(&m)).unwrap();
        assert_eq!(half.layers[1].flops * 4, full.layers[1].flops);
        assert_eq!(half.layers[0].flops * 2, full.layers[0].flops);
    }

    #[test]
    fn ones_mask_equals_unmasked() {
        let a = ArchSpec::builtin("resnet50").unwrap();
        let ones = FilterMask::all_ones(&a.maskable_filters());
        assert_eq!(a.stats(Some(&ones)).unwrap(), a.stats(None).unwrap());
    }

    #[test]
    fn compression_ratios() {
        let t = Totals { params: 10, flops: 20 };
        let r = compression_report(t, t).unwrap();
        assert_eq!((r.param_ratio, r.flops_ratio), (1.0, 1.0));
        assert!(compression_report(t, Totals::default()).is_err());
        assert!(compression_report(Totals::default(), t).is_err());
    }

    #[test]
    fn human_units() {
        assert_eq!(human(118_013_952), "118M");
        assert_eq!(human(2_048_000), "2.05M");
        assert_eq!(human(3_855_000_000), "3.85B");
        assert_eq!(human(14_977_728), "15.0M");
        assert_eq!(human(512), "512");
    }
}
