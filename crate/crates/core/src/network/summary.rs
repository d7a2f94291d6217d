use std::fmt::Write;

use super::{receptive_field_of, Layer, NetStructure};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummaryRow {
    pub name: String,
    pub kind: String,
    pub output: Vec<usize>,
    /// Widest receptive field reached so far, in input pixels.
    pub receptive_field: usize,
    pub params: usize,
}

impl NetStructure {
    pub fn summary_rows(&self) -> Result<Vec<SummaryRow>> {
        let trace = self.shape_trace()?;
        let shapes = self.param_shapes();
        let count = |prefix: &str| -> usize {
            shapes
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, s)| s.iter().product::<usize>())
                .sum()
        };
        let mut specs = Vec::new();
        let mut rows = Vec::with_capacity(self.layers.len());
        for (layer, out) in self.layers.iter().zip(trace) {
            let (name, kind, params) = match layer {
                Layer::Conv(u) => {
                    specs.push(u.spec);
                    let s = &u.spec;
                    let kind = format!("conv {}x{} s{} d{}", s.kernel, s.kernel, s.stride, s.dilation);
                    (u.name.clone(), kind, count(&format!("{}.", u.name)))
                }
                Layer::Block(b) => {
                    specs.extend(b.units().iter().map(|u| u.spec));
                    let kind = format!("multi-dilation m={}", b.max_dilation);
                    (b.name.clone(), kind, count(&format!("{}.", b.name)))
                }
                Layer::GlobalAvgPool => ("pool".into(), "global avg pool".into(), 0),
                Layer::Dense(d) => {
                    let kind = format!("dense {:?}", d.activation).to_lowercase();
                    (d.name.clone(), kind, count(&format!("{}.", d.name)))
                }
            };
            rows.push(SummaryRow {
                name,
                kind,
                output: out,
                receptive_field: receptive_field_of(specs.iter()),
                params,
            });
        }
        Ok(rows)
    }
}

/// Human-readable layer table.
pub fn summary_table(net: &NetStructure) -> Result<String> {
    let rows = net.summary_rows()?;
    let mut s = String::new();
    writeln!(s, "DilationNet-{} (input {}x{}x3)", net.variant, net.resolution, net.resolution).unwrap();
    writeln!(s, "{:<14} {:<22} {:>16} {:>6} {:>10}", "layer", "kind", "output", "rf", "params").unwrap();
    let mut total = 0;
    for r in &rows {
        let out = r.output.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        writeln!(s, "{:<14} {:<22} {:>16} {:>6} {:>10}", r.name, r.kind, out, r.receptive_field, r.params).unwrap();
        total += r.params;
    }
    writeln!(s, "total parameters: {total}").unwrap();
    Ok(s)
}
