use std::fmt::Write;

use super::{Graph, LayerInfo};

fn list(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(usize::to_string).collect();
    format!("[{}]", items.join(", "))
}

fn info_text(info: &LayerInfo) -> Option<String> {
    let d = LayerInfo::default();
    let mut parts = Vec::new();
    if info.strides != d.strides {
        parts.push(format!("strides: {}", list(&[info.strides.0, info.strides.1])));
    }
    if info.padding != d.padding {
        parts.push(format!("padding: {}", list(&[info.padding.0, info.padding.1])));
    }
    if info.kernel != d.kernel {
        parts.push(format!("kernel: {}", list(&[info.kernel.0, info.kernel.1])));
    }
    if let Some((h, w)) = info.block_size {
        parts.push(format!("block_size: {}", list(&[h, w])));
    }
    if info.layout != d.layout {
        parts.push(format!("layout: \"{}\"", info.layout));
    }
    if info.unroll != d.unroll {
        parts.push(format!("unroll: {}", info.unroll));
    }
    if info.tiling != d.tiling {
        parts.push(format!("tiling: {}", list(&[info.tiling.0, info.tiling.1])));
    }
    if info.device != d.device {
        parts.push(format!("device: {}", info.device));
    }
    (!parts.is_empty()).then(|| format!("info{{{}}}", parts.join(", ")))
}

/// Prints declarations first, then layers in graph order. Metadata equal to
/// the defaults is omitted.
pub fn graph_to_dsl(g: &Graph) -> String {
    let mut out = String::new();
    for i in &g.inputs {
        let _ = writeln!(out, "{} = Input({});", i.name, list(&i.shape));
    }
    for t in &g.tensors {
        let _ = writeln!(out, "{} = Tensor({}, \"{}\");", t.name, list(&t.shape), t.data_ref);
    }
    for n in &g.nodes {
        let mut args = n.args.clone();
        args.extend(info_text(&n.info));
        let _ = writeln!(out, "{} = {}({});", n.name, n.kind.name(), args.join(", "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_dsl;

    #[test]
    fn prints_non_default_info_only() {
        let g = parse_dsl("x = Input([1, 4]); w = Tensor([2, 4], \"zeros\"); y = FC(w, x, info{unroll: 2, layout: blocked});").unwrap();
        let text = graph_to_dsl(&g);
        assert!(text.contains("y = FC(w, x, info{layout: \"blocked\", unroll: 2});"), "{text}");
        assert!(parse_dsl(&text).unwrap().is_isomorphic(&g));
    }

    #[test]
    fn empty_graph_prints_nothing() {
        assert_eq!(graph_to_dsl(&Graph::default()), "");
    }
}
