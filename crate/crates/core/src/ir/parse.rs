//! Parser for the model DSL. The grammar is documented in `docs/DSL.md`.

use std::collections::BTreeSet;

use super::{Graph, InputDecl, LayerInfo, LayerIr, OpKind, TensorDecl};
use crate::error::{GrimError, Result};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(usize),
    Str(String),
    Punct(char),
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> GrimError {
    GrimError::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (l0, c0) = (line, col);
        if c == '\n' {
            line += 1;
            col = 1;
            i += 1;
        } else if c.is_whitespace() {
            col += 1;
            i += 1;
        } else if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            let s = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - s;
            out.push(Token {
                tok: Tok::Ident(chars[s..i].iter().collect()),
                line: l0,
                column: c0,
            });
        } else if c.is_ascii_digit() {
            let s = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            col += i - s;
            let text: String = chars[s..i].iter().collect();
            let v = text
                .parse()
                .map_err(|_| parse_err(l0, c0, format!("integer `{text}` is too large")))?;
            out.push(Token {
                tok: Tok::Int(v),
                line: l0,
                column: c0,
            });
        } else if c == '"' {
            let s = i + 1;
            i += 1;
            while i < chars.len() && chars[i] != '"' && chars[i] != '\n' {
                i += 1;
            }
            if i >= chars.len() || chars[i] != '"' {
                return Err(parse_err(l0, c0, "unterminated string"));
            }
            let v: String = chars[s..i].iter().collect();
            i += 1;
            col += v.chars().count() + 2;
            out.push(Token {
                tok: Tok::Str(v),
                line: l0,
                column: c0,
            });
        } else if "=(),;[]{}:".contains(c) {
            out.push(Token {
                tok: Tok::Punct(c),
                line: l0,
                column: c0,
            });
            col += 1;
            i += 1;
        } else {
            return Err(parse_err(l0, c0, format!("unexpected character `{c}`")));
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}

/// One call argument as written.
#[derive(Clone, Debug)]
enum Arg {
    Name(String, usize, usize),
    List(Vec<usize>),
    Str(String),
}

#[derive(Clone, Debug)]
enum Value {
    Int(usize),
    List(Vec<usize>),
    Word(String),
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
    graph: Graph,
    defined: BTreeSet<String>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.at]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn describe(t: &Tok) -> String {
        match t {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Str(s) => format!("\"{s}\""),
            Tok::Punct(c) => format!("`{c}`"),
            Tok::Eof => "end of input".into(),
        }
    }

    fn expect(&mut self, c: char) -> Result<Token> {
        let t = self.next();
        if t.tok == Tok::Punct(c) {
            Ok(t)
        } else {
            Err(parse_err(t.line, t.column, format!("expected `{c}`, found {}", Self::describe(&t.tok))))
        }
    }

    fn ident(&mut self) -> Result<(String, usize, usize)> {
        let t = self.next();
        match t.tok {
            Tok::Ident(s) => Ok((s, t.line, t.column)),
            other => Err(parse_err(t.line, t.column, format!("expected a name, found {}", Self::describe(&other)))),
        }
    }

    fn int_list(&mut self) -> Result<Vec<usize>> {
        self.expect('[')?;
        let mut out = Vec::new();
        if self.peek().tok == Tok::Punct(']') {
            self.next();
            return Ok(out);
        }
        loop {
            let t = self.next();
            match t.tok {
                Tok::Int(v) => out.push(v),
                other => {
                    return Err(parse_err(t.line, t.column, format!("expected an integer, found {}", Self::describe(&other))))
                }
            }
            let t = self.next();
            match t.tok {
                Tok::Punct(',') => continue,
                Tok::Punct(']') => return Ok(out),
                other => {
                    return Err(parse_err(t.line, t.column, format!("expected `,` or `]`, found {}", Self::describe(&other))))
                }
            }
        }
    }

    fn info(&mut self) -> Result<LayerInfo> {
        self.expect('{')?;
        let mut info = LayerInfo::default();
        loop {
            if self.peek().tok == Tok::Punct('}') {
                self.next();
                return Ok(info);
            }
            let (key, line, column) = self.ident()?;
            self.expect(':')?;
            let vt = self.peek().clone();
            let value = match &vt.tok {
                Tok::Punct('[') => Value::List(self.int_list()?),
                Tok::Int(v) => {
                    self.next();
                    Value::Int(*v)
                }
                Tok::Ident(s) | Tok::Str(s) => {
                    self.next();
                    Value::Word(s.clone())
                }
                other => return Err(parse_err(vt.line, vt.column, format!("expected a value, found {}", Self::describe(other)))),
            };
            apply_info(&mut info, &key, value, line, column)?;
            let t = self.next();
            match t.tok {
                Tok::Punct(',') => continue,
                Tok::Punct('}') => return Ok(info),
                other => {
                    return Err(parse_err(t.line, t.column, format!("expected `,` or `}}`, found {}", Self::describe(&other))))
                }
            }
        }
    }

    fn call_args(&mut self) -> Result<(Vec<Arg>, Option<LayerInfo>)> {
        self.expect('(')?;
        let mut args = Vec::new();
        let mut info = None;
        if self.peek().tok == Tok::Punct(')') {
            self.next();
            return Ok((args, info));
        }
        loop {
            let t = self.peek().clone();
            if info.is_some() {
                return Err(parse_err(t.line, t.column, "`info{...}` must be the last argument"));
            }
            match &t.tok {
                Tok::Ident(s) if s == "info" && self.toks[self.at + 1].tok == Tok::Punct('{') => {
                    self.next();
                    info = Some(self.info()?);
                }
                Tok::Ident(s) => {
                    self.next();
                    args.push(Arg::Name(s.clone(), t.line, t.column));
                }
                Tok::Punct('[') => args.push(Arg::List(self.int_list()?)),
                Tok::Str(s) => {
                    self.next();
                    args.push(Arg::Str(s.clone()));
                }
                other => return Err(parse_err(t.line, t.column, format!("expected an argument, found {}", Self::describe(other)))),
            }
            let t = self.next();
            match t.tok {
                Tok::Punct(',') => continue,
                Tok::Punct(')') => return Ok((args, info)),
                other => {
                    return Err(parse_err(t.line, t.column, format!("expected `,` or `)`, found {}", Self::describe(&other))))
                }
            }
        }
    }

    fn define(&mut self, name: &str, line: usize, column: usize) -> Result<()> {
        if !self.defined.insert(name.to_string()) {
            return Err(parse_err(line, column, format!("`{name}` is already defined")));
        }
        Ok(())
    }

    fn names(&self, args: &[Arg], op: &str, line: usize, column: usize) -> Result<Vec<String>> {
        args.iter()
            .map(|a| match a {
                Arg::Name(n, l, c) => {
                    if self.defined.contains(n) {
                        Ok(n.clone())
                    } else {
                        Err(GrimError::DanglingTensor {
                            line: *l,
                            column: *c,
                            name: n.clone(),
                        })
                    }
                }
                _ => Err(parse_err(line, column, format!("{op} takes tensor names only"))),
            })
            .collect()
    }

    fn statement(&mut self) -> Result<()> {
        let (lhs, line, column) = self.ident()?;
        self.expect('=')?;
        let (op, op_line, op_col) = self.ident()?;
        let (args, info) = self.call_args()?;
        self.expect(';')?;
        match op.as_str() {
            "Input" => {
                let [Arg::List(shape)] = args.as_slice() else {
                    return Err(parse_err(op_line, op_col, "Input takes one shape, e.g. Input([1, 16])"));
                };
                check_shape(shape, op_line, op_col)?;
                self.define(&lhs, line, column)?;
                self.graph.inputs.push(InputDecl {
                    name: lhs,
                    shape: shape.clone(),
                });
            }
            "Tensor" => {
                let [Arg::List(shape), Arg::Str(data_ref)] = args.as_slice() else {
                    return Err(parse_err(op_line, op_col, "Tensor takes a shape and a data reference, e.g. Tensor([8, 16], \"random\")"));
                };
                check_shape(shape, op_line, op_col)?;
                self.define(&lhs, line, column)?;
                self.graph.tensors.push(TensorDecl {
                    name: lhs,
                    shape: shape.clone(),
                    data_ref: data_ref.clone(),
                });
            }
            "GRU" => {
                let names = self.names(&args, &op, op_line, op_col)?;
                if names.len() != 8 && names.len() != 11 {
                    return Err(parse_err(op_line, op_col, "GRU takes (x, h, w_z, u_z, w_r, u_r, w_h, u_h) and optionally (b_z, b_r, b_h)"));
                }
                self.define(&lhs, line, column)?;
                for n in expand_gru(&lhs, &names, &info.unwrap_or_default()) {
                    if n.name != lhs {
                        self.define(&n.name, line, column)?;
                    }
                    self.graph.nodes.push(n);
                }
            }
            _ => {
                let Some(kind) = OpKind::from_name(&op) else {
                    return Err(GrimError::UnknownOp {
                        line: op_line,
                        column: op_col,
                        op,
                    });
                };
                let names = self.names(&args, &op, op_line, op_col)?;
                let (lo, hi) = kind.arity();
                if names.len() < lo || names.len() > hi {
                    let want = if lo == hi { lo.to_string() } else { format!("{lo} to {hi}") };
                    return Err(parse_err(op_line, op_col, format!("{op} takes {want} arguments, got {}", names.len())));
                }
                if kind.has_weights() {
                    for w in std::iter::once(&names[0]).chain(names.get(2)) {
                        if self.graph.tensor(w).is_none() {
                            return Err(parse_err(op_line, op_col, format!("`{w}` must be declared with Tensor(...)")));
                        }
                    }
                }
                self.define(&lhs, line, column)?;
                self.graph.nodes.push(LayerIr {
                    name: lhs,
                    kind,
                    args: names,
                    info: info.unwrap_or_default(),
                });
            }
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize], line: usize, column: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(parse_err(line, column, "shapes need at least one dimension, all positive"));
    }
    Ok(())
}

fn pair(v: Value, key: &str, line: usize, column: usize) -> Result<(usize, usize)> {
    match v {
        Value::List(l) if l.len() == 2 => Ok((l[0], l[1])),
        Value::Int(x) => Ok((x, x)),
        _ => Err(parse_err(line, column, format!("`{key}` expects [a, b]"))),
    }
}

fn apply_info(info: &mut LayerInfo, key: &str, v: Value, line: usize, column: usize) -> Result<()> {
    let positive = |p: (usize, usize)| -> Result<(usize, usize)> {
        if p.0 == 0 || p.1 == 0 {
            Err(parse_err(line, column, format!("`{key}` must be positive")))
        } else {
            Ok(p)
        }
    };
    match key {
        "strides" => info.strides = positive(pair(v, key, line, column)?)?,
        "padding" => info.padding = pair(v, key, line, column)?,
        "kernel" => info.kernel = positive(pair(v, key, line, column)?)?,
        "block_size" => info.block_size = Some(positive(pair(v, key, line, column)?)?),
        "tiling" => info.tiling = positive(pair(v, key, line, column)?)?,
        "unroll" => match v {
            Value::Int(u) if u > 0 => info.unroll = u,
            _ => return Err(parse_err(line, column, "`unroll` expects a positive integer")),
        },
        "layout" => match v {
            Value::Word(s) => info.layout = s,
            _ => return Err(parse_err(line, column, "`layout` expects a name")),
        },
        "device" => match v {
            Value::Word(s) if s == "CPU" => info.device = s,
            _ => return Err(parse_err(line, column, "`device` must be CPU")),
        },
        _ => return Err(parse_err(line, column, format!("unknown info key `{key}`"))),
    }
    Ok(())
}

/// Rewrites `out = GRU(x, h, w_z, u_z, w_r, u_r, w_h, u_h[, b_z, b_r, b_h])`
/// into FC and elementwise nodes named `out__*`, ending in `out`.
fn expand_gru(out: &str, a: &[String], info: &LayerInfo) -> Vec<LayerIr> {
    let (x, h) = (&a[0], &a[1]);
    let bias = |i: usize| a.get(8 + i).cloned();
    let n = |suffix: &str| format!("{out}__{suffix}");
    let mut nodes = Vec::new();
    let mut push = |name: String, kind: OpKind, args: Vec<String>| {
        let mut node = LayerIr::new(name, kind, args);
        if kind == OpKind::FC {
            node.info = info.clone();
        }
        nodes.push(node);
    };
    let fc = |w: &String, input: &String, b: Option<String>| {
        let mut args = vec![w.clone(), input.clone()];
        args.extend(b);
        args
    };
    for (gate, wi, ui, bi, act) in [("z", 2, 3, 0, OpKind::Sigmoid), ("r", 4, 5, 1, OpKind::Sigmoid)] {
        push(n(&format!("{gate}x")), OpKind::FC, fc(&a[wi], x, bias(bi)));
        push(n(&format!("{gate}h")), OpKind::FC, fc(&a[ui], h, None));
        push(n(&format!("{gate}s")), OpKind::Add, vec![n(&format!("{gate}x")), n(&format!("{gate}h"))]);
        push(n(gate), act, vec![n(&format!("{gate}s"))]);
    }
    push(n("hr"), OpKind::Mul, vec![n("r"), h.clone()]);
    push(n("cx"), OpKind::FC, fc(&a[6], x, bias(2)));
    push(n("ch"), OpKind::FC, fc(&a[7], &n("hr"), None));
    push(n("cs"), OpKind::Add, vec![n("cx"), n("ch")]);
    push(n("c"), OpKind::Tanh, vec![n("cs")]);
    push(out.to_string(), OpKind::Blend, vec![n("z"), h.clone(), n("c")]);
    nodes
}

/// Parses DSL text into a graph. `"random"` and `"zeros"` tensors are
/// materialized immediately; file-backed tensors are left for the model
/// loader.
pub fn parse_dsl(text: &str) -> Result<Graph> {
    let mut p = Parser {
        toks: lex(text)?,
        at: 0,
        graph: Graph::default(),
        defined: BTreeSet::new(),
    };
    while p.peek().tok != Tok::Eof {
        p.statement()?;
    }
    p.graph.init_generated_weights();
    Ok(p.graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LAYER: &str = "
        in = Input([1, 3, 8, 8]);
        w0 = Tensor([4, 3, 3, 3], \"random\");
        w1 = Tensor([10, 256], \"random\");
        # conv then fully connected
        out0 = Conv2D(w0, in, info{strides: [1, 1], padding: [1, 1], block_size: [2, 9]});
        out1 = FC(w1, out0, info{unroll: 8, tiling: [4, 32]});
    ";

    #[test]
    fn two_layer_chain() {
        let g = parse_dsl(TWO_LAYER).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.nodes[0].kind, OpKind::Conv2D);
        assert_eq!(g.nodes[1].args, vec!["w1".to_string(), "out0".to_string()]);
        assert_eq!(g.nodes[0].info.padding, (1, 1));
        assert_eq!(g.nodes[0].info.block_size, Some((2, 9)));
        assert_eq!(g.nodes[1].info.unroll, 8);
        assert_eq!(g.outputs(), vec!["out1".to_string()]);
        assert_eq!(g.weights.len(), 2);
    }

    #[test]
    fn empty_info_uses_defaults() {
        let g = parse_dsl("x = Input([1, 4]); w = Tensor([2, 4], \"zeros\"); y = FC(w, x, info{});").unwrap();
        assert_eq!(g.nodes[0].info.unroll, 4);
        assert_eq!(g.nodes[0].info.tiling, (8, 64));
        assert_eq!(g.nodes[0].info, LayerInfo::default());
        assert!(parse_dsl("").unwrap().nodes.is_empty());
    }

    #[test]
    fn error_positions() {
        let e = parse_dsl("x = Input([1, 4]);\ny = ReLU(z);").unwrap_err();
        assert!(matches!(e, GrimError::DanglingTensor { line: 2, column: 10, ref name } if name == "z"));
        assert!(e.to_string().contains("`z`"));

        let e = parse_dsl("x = Input([1, 4]);\n  y = Frobnicate(x);").unwrap_err();
        assert!(matches!(e, GrimError::UnknownOp { line: 2, column: 7, .. }));

        let e = parse_dsl("x = Input([1, 4])\ny = ReLU(x);").unwrap_err();
        assert!(matches!(e, GrimError::Parse { line: 2, column: 1, .. }), "{e}");

        let e = parse_dsl("x = Input([1, 4]); y = ReLU(x, info{unrol: 2});").unwrap_err();
        assert!(e.to_string().contains("unknown info key"));

        assert!(parse_dsl("x = Input([1, 4]); x = ReLU(x);").is_err());
        assert!(parse_dsl("x = Input([1, 4]); y = Add(x);").is_err());
        assert!(parse_dsl("x = Input([1, 4]); y = FC(x, x);").is_err());
        assert!(parse_dsl("x = Input([1, 0]);").is_err());
        assert!(parse_dsl("s = Tensor([1], \"oops);").is_err());
        assert!(parse_dsl("x = Input([1, 4]); y = ReLU(x) @").is_err());
    }

    #[test]
    fn gru_expands_to_fc_and_elementwise() {
        let g = parse_dsl(
            "x = Input([1, 6]); h = Input([1, 4]);
             wz = Tensor([4, 6], \"random\"); uz = Tensor([4, 4], \"random\");
             wr = Tensor([4, 6], \"random\"); ur = Tensor([4, 4], \"random\");
             wh = Tensor([4, 6], \"random\"); uh = Tensor([4, 4], \"random\");
             out = GRU(x, h, wz, uz, wr, ur, wh, uh, info{block_size: [2, 2]});",
        )
        .unwrap();
        assert_eq!(g.nodes.iter().filter(|n| n.kind == OpKind::FC).count(), 6);
        assert!(g.nodes.iter().filter(|n| n.kind == OpKind::FC).all(|n| n.info.block_size == Some((2, 2))));
        assert_eq!(g.nodes.last().unwrap().name, "out");
        assert_eq!(g.nodes.last().unwrap().kind, OpKind::Blend);
        assert_eq!(g.outputs(), vec!["out".to_string()]);
        g.validate().unwrap();
    }
}
