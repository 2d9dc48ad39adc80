//! Line-oriented parser for the textual IR.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{
    verify_module, Array, BinOp, Block, Function, IRModule, Inst, Item, Loop, Operand,
    Terminator, UnrollPragma, VerifyError,
};

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: duplicate function `{name}`")]
    DuplicateFunction { line: usize, col: usize, name: String },
    #[error("{line}:{col}: unknown branch target `{label}`")]
    UnknownLabel {
        line: usize,
        col: usize,
        label: String,
    },
    #[error("{line}:{col}: duplicate label `{label}`")]
    DuplicateLabel {
        line: usize,
        col: usize,
        label: String,
    },
    #[error("invalid module: {0}")]
    Invalid(#[from] VerifyError),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Punct(char),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    col: usize,
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len()
                && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.')
            {
                i += 1;
            }
            out.push(Token {
                tok: Tok::Ident(chars[start..i].iter().collect()),
                col,
            });
        } else if c.is_ascii_digit()
            || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            let value = text.parse::<i64>().map_err(|_| ParseError::Syntax {
                line: lineno,
                col,
                msg: format!("integer literal `{text}` out of range"),
            })?;
            out.push(Token {
                tok: Tok::Int(value),
                col,
            });
        } else if "(){}[],=:@".contains(c) {
            out.push(Token {
                tok: Tok::Punct(c),
                col,
            });
            i += 1;
        } else {
            return Err(ParseError::Syntax {
                line: lineno,
                col,
                msg: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    toks: &'a [Token],
    pos: usize,
    line: usize,
    eol_col: usize,
}

impl<'a> Cursor<'a> {
    fn new(toks: &'a [Token], line: usize, eol_col: usize) -> Self {
        Cursor {
            toks,
            pos: 0,
            line,
            eol_col,
        }
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.eol_col, |t| t.col)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            line: self.line,
            col: self.col(),
            msg: msg.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.tok.clone());
        self.pos += 1;
        t
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{kw}`")),
        }
    }

    fn int(&mut self, what: &str) -> Result<i64, ParseError> {
        match self.peek() {
            Some(Tok::Int(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn punct(&mut self, c: char) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Punct(p)) if *p == c => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected `{c}`")),
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if matches!(self.peek(), Some(Tok::Punct(p)) if *p == c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn operand(&mut self) -> Result<Operand, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(Operand::Var(s))
            }
            Some(Tok::Int(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(Operand::Const(v))
            }
            _ => self.err("expected operand"),
        }
    }

    fn expect_end(&self) -> Result<(), ParseError> {
        if self.at_end() {
            Ok(())
        } else {
            self.err("unexpected trailing tokens")
        }
    }

    /// `(a, b, ...)` after the opening parenthesis was consumed.
    fn operand_list(&mut self) -> Result<Vec<Operand>, ParseError> {
        let mut out = Vec::new();
        if self.eat_punct(')') {
            return Ok(out);
        }
        loop {
            out.push(self.operand()?);
            if self.eat_punct(')') {
                return Ok(out);
            }
            self.punct(',')?;
        }
    }
}

struct LoopHeader {
    id: String,
    iv: String,
    init: Operand,
    end: Operand,
    step: i64,
    pragma: Option<UnrollPragma>,
}

struct Frame {
    header: Option<LoopHeader>,
    items: Vec<Item>,
}

struct FuncCtx {
    name: String,
    params: Vec<String>,
    frames: Vec<Frame>,
    block: Option<Block>,
    labels: BTreeSet<String>,
    branch_refs: Vec<(String, usize, usize)>,
}

impl FuncCtx {
    fn flush_block(&mut self) {
        if let Some(b) = self.block.take() {
            self.frames
                .last_mut()
                .expect("function frame")
                .items
                .push(Item::Block(b));
        }
    }
}

/// Parse and verify a module.
///
/// Call instructions without an explicit `@site` get fresh ids `cs<N>` in
/// textual order.
pub fn parse_module(text: &str) -> Result<IRModule, ParseError> {
    let mut name = None;
    let mut entry = None;
    let mut arrays: Vec<Array> = Vec::new();
    let mut functions: Vec<Function> = Vec::new();
    let mut func_lines: BTreeMap<String, usize> = BTreeMap::new();
    let mut ctx: Option<FuncCtx> = None;
    let mut pending_pragma: Option<(UnrollPragma, usize)> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let trimmed = raw.trim_start();
        if let Some(rest) = trimmed.strip_prefix("#pragma") {
            let rest = rest.split('#').next().unwrap_or("");
            let toks = tokenize(rest, lineno)?;
            let offset = raw.len() - trimmed.len() + "#pragma".len();
            let toks: Vec<Token> = toks
                .into_iter()
                .map(|t| Token {
                    col: t.col + offset,
                    ..t
                })
                .collect();
            let mut c = Cursor::new(&toks, lineno, raw.len() + 1);
            let kw = c.ident("`unroll` or `nounroll`")?;
            let pragma = match kw.as_str() {
                "unroll" => {
                    let n = c.int("unroll count")?;
                    if n <= 0 || n > u32::MAX as i64 {
                        return Err(ParseError::Syntax {
                            line: lineno,
                            col: toks[1].col,
                            msg: "unroll count must be positive".into(),
                        });
                    }
                    UnrollPragma::Count(n as u32)
                }
                "nounroll" => UnrollPragma::Disable,
                other => {
                    return Err(ParseError::Syntax {
                        line: lineno,
                        col: toks[0].col,
                        msg: format!("unknown pragma `{other}`"),
                    })
                }
            };
            c.expect_end()?;
            if pending_pragma.is_some() {
                return Err(ParseError::Syntax {
                    line: lineno,
                    col: 1,
                    msg: "two pragmas before one loop".into(),
                });
            }
            pending_pragma = Some((pragma, lineno));
            continue;
        }
        let code = raw.split('#').next().unwrap_or("");
        let toks = tokenize(code, lineno)?;
        if toks.is_empty() {
            continue;
        }
        let mut c = Cursor::new(&toks, lineno, code.len() + 1);
        let is_loop_line = matches!(&toks[0].tok, Tok::Ident(s) if s == "loop");
        if let Some((_, pline)) = pending_pragma {
            if !is_loop_line {
                return Err(ParseError::Syntax {
                    line: pline,
                    col: 1,
                    msg: "pragma must precede a loop".into(),
                });
            }
        }

        let Some(f) = ctx.as_mut() else {
            // Top level.
            let kw = c.ident("`module`, `entry`, `array` or `func`")?;
            match kw.as_str() {
                "module" => {
                    name = Some(c.ident("module name")?);
                    c.expect_end()?;
                }
                "entry" => {
                    entry = Some(c.ident("entry function name")?);
                    c.expect_end()?;
                }
                "array" => {
                    let aname = c.ident("array name")?;
                    c.punct('[')?;
                    let len = c.int("array length")?;
                    if len <= 0 {
                        return c.err("array length must be positive");
                    }
                    c.punct(']')?;
                    let mut init = Vec::new();
                    if c.eat_punct('=') {
                        c.punct('{')?;
                        if !c.eat_punct('}') {
                            loop {
                                init.push(c.int("array element")?);
                                if c.eat_punct('}') {
                                    break;
                                }
                                c.punct(',')?;
                            }
                        }
                    }
                    c.expect_end()?;
                    if init.len() > len as usize {
                        return c.err("too many array initializers");
                    }
                    arrays.push(Array {
                        name: aname,
                        len: len as usize,
                        init,
                    });
                }
                "func" => {
                    let fcol = c.col();
                    let fname = c.ident("function name")?;
                    if func_lines.contains_key(&fname) {
                        return Err(ParseError::DuplicateFunction {
                            line: lineno,
                            col: fcol,
                            name: fname,
                        });
                    }
                    c.punct('(')?;
                    let mut params = Vec::new();
                    if !c.eat_punct(')') {
                        loop {
                            params.push(c.ident("parameter name")?);
                            if c.eat_punct(')') {
                                break;
                            }
                            c.punct(',')?;
                        }
                    }
                    c.punct('{')?;
                    let closes = c.eat_punct('}');
                    c.expect_end()?;
                    func_lines.insert(fname.clone(), lineno);
                    let fc = FuncCtx {
                        name: fname,
                        params,
                        frames: vec![Frame {
                            header: None,
                            items: Vec::new(),
                        }],
                        block: None,
                        labels: BTreeSet::new(),
                        branch_refs: Vec::new(),
                    };
                    if closes {
                        functions.push(finish_function(fc)?);
                    } else {
                        ctx = Some(fc);
                    }
                }
                other => return c.err(format!("unexpected `{other}` at top level")),
            }
            continue;
        };

        match &toks[0].tok {
            Tok::Punct('}') => {
                c.next();
                c.expect_end()?;
                f.flush_block();
                let frame = f.frames.pop().expect("frame");
                match frame.header {
                    Some(h) => {
                        f.frames
                            .last_mut()
                            .expect("enclosing frame")
                            .items
                            .push(Item::Loop(Loop {
                                id: h.id,
                                iv: h.iv,
                                init: h.init,
                                end: h.end,
                                step: h.step,
                                pragma: h.pragma,
                                body: frame.items,
                            }));
                    }
                    None => {
                        f.frames.push(frame);
                        let done = ctx.take().expect("function context");
                        functions.push(finish_function(done)?);
                    }
                }
            }
            Tok::Ident(kw) if kw == "loop" => {
                c.next();
                let id = c.ident("loop id")?;
                c.punct('(')?;
                let iv = c.ident("induction variable")?;
                c.punct('=')?;
                let init = c.operand()?;
                c.keyword("to")?;
                let end = c.operand()?;
                c.keyword("step")?;
                let step = c.int("loop step")?;
                c.punct(')')?;
                c.punct('{')?;
                let closes = c.eat_punct('}');
                c.expect_end()?;
                let pragma = pending_pragma.take().map(|(p, _)| p);
                f.flush_block();
                let header = LoopHeader {
                    id,
                    iv,
                    init,
                    end,
                    step,
                    pragma,
                };
                if closes {
                    f.frames
                        .last_mut()
                        .expect("frame")
                        .items
                        .push(Item::Loop(Loop {
                            id: header.id,
                            iv: header.iv,
                            init: header.init,
                            end: header.end,
                            step: header.step,
                            pragma: header.pragma,
                            body: Vec::new(),
                        }));
                } else {
                    f.frames.push(Frame {
                        header: Some(header),
                        items: Vec::new(),
                    });
                }
            }
            Tok::Ident(label) if toks.len() == 2 && toks[1].tok == Tok::Punct(':') => {
                if !f.labels.insert(label.clone()) {
                    return Err(ParseError::DuplicateLabel {
                        line: lineno,
                        col: toks[0].col,
                        label: label.clone(),
                    });
                }
                f.flush_block();
                f.block = Some(Block::new(label.clone()));
            }
            _ => {
                let Some(block) = f.block.as_mut() else {
                    return c.err("instruction outside of a labeled block");
                };
                if block.term.is_some() {
                    return c.err("instruction after block terminator");
                }
                match parse_statement(&mut c, &mut f.branch_refs)? {
                    Stmt::Inst(i) => block.insts.push(i),
                    Stmt::Term(t) => block.term = Some(t),
                }
            }
        }
    }

    if let Some((_, pline)) = pending_pragma {
        return Err(ParseError::Syntax {
            line: pline,
            col: 1,
            msg: "pragma must precede a loop".into(),
        });
    }
    if ctx.is_some() {
        return Err(ParseError::Syntax {
            line: last_line + 1,
            col: 1,
            msg: "unexpected end of input: unclosed `{`".into(),
        });
    }

    let mut module = IRModule {
        name: name.unwrap_or_else(|| "module".into()),
        arrays,
        functions,
        entry: entry.unwrap_or_else(|| "main".into()),
    };
    assign_site_ids(&mut module);
    verify_module(&module)?;
    Ok(module)
}

enum Stmt {
    Inst(Inst),
    Term(Terminator),
}

fn parse_statement(
    c: &mut Cursor<'_>,
    branch_refs: &mut Vec<(String, usize, usize)>,
) -> Result<Stmt, ParseError> {
    let first_col = c.col();
    let first = c.ident("instruction")?;
    let stmt = match first.as_str() {
        "store" => {
            let array = c.ident("array name")?;
            c.punct('[')?;
            let index = c.operand()?;
            c.punct(']')?;
            c.punct(',')?;
            let value = c.operand()?;
            Stmt::Inst(Inst::Store {
                array,
                index,
                value,
            })
        }
        "br" => {
            let col = c.col();
            let a = c.operand()?;
            if c.eat_punct(',') {
                let tcol = c.col();
                let then_label = c.ident("branch target")?;
                c.punct(',')?;
                let ecol = c.col();
                let else_label = c.ident("branch target")?;
                branch_refs.push((then_label.clone(), c.line, tcol));
                branch_refs.push((else_label.clone(), c.line, ecol));
                Stmt::Term(Terminator::CondBr {
                    cond: a,
                    then_label,
                    else_label,
                })
            } else {
                let Operand::Var(label) = a else {
                    return Err(ParseError::Syntax {
                        line: c.line,
                        col,
                        msg: "expected branch target".into(),
                    });
                };
                branch_refs.push((label.clone(), c.line, col));
                Stmt::Term(Terminator::Br(label))
            }
        }
        "ret" => {
            if c.at_end() {
                Stmt::Term(Terminator::Ret(None))
            } else {
                Stmt::Term(Terminator::Ret(Some(c.operand()?)))
            }
        }
        "call" => Stmt::Inst(parse_call(c, None)?),
        _ => {
            if !c.eat_punct('=') {
                return Err(ParseError::Syntax {
                    line: c.line,
                    col: first_col,
                    msg: format!("unknown instruction `{first}`"),
                });
            }
            let dst = first;
            let opcol = c.col();
            let op = c.ident("opcode")?;
            match op.as_str() {
                "mov" => Stmt::Inst(Inst::Mov {
                    dst,
                    src: c.operand()?,
                }),
                "load" => {
                    let array = c.ident("array name")?;
                    c.punct('[')?;
                    let index = c.operand()?;
                    c.punct(']')?;
                    Stmt::Inst(Inst::Load { dst, array, index })
                }
                "call" => Stmt::Inst(parse_call(c, Some(dst))?),
                other => {
                    let Some(bop) = BinOp::from_mnemonic(other) else {
                        return Err(ParseError::Syntax {
                            line: c.line,
                            col: opcol,
                            msg: format!("unknown opcode `{other}`"),
                        });
                    };
                    let lhs = c.operand()?;
                    c.punct(',')?;
                    let rhs = c.operand()?;
                    Stmt::Inst(Inst::Bin {
                        op: bop,
                        dst,
                        lhs,
                        rhs,
                    })
                }
            }
        }
    };
    c.expect_end()?;
    Ok(stmt)
}

fn parse_call(c: &mut Cursor<'_>, dst: Option<String>) -> Result<Inst, ParseError> {
    let callee = c.ident("callee name")?;
    c.punct('(')?;
    let args = c.operand_list()?;
    let site = if c.eat_punct('@') {
        c.ident("call-site id")?
    } else {
        String::new()
    };
    Ok(Inst::Call {
        dst,
        callee,
        args,
        site,
    })
}

fn finish_function(f: FuncCtx) -> Result<Function, ParseError> {
    let FuncCtx {
        name,
        params,
        mut frames,
        mut block,
        labels,
        branch_refs,
    } = f;
    for (label, line, col) in branch_refs {
        if !labels.contains(&label) {
            return Err(ParseError::UnknownLabel { line, col, label });
        }
    }
    let mut frame = frames.pop().expect("function frame");
    if let Some(b) = block.take() {
        frame.items.push(Item::Block(b));
    }
    Ok(Function {
        name,
        params,
        body: frame.items,
    })
}

fn assign_site_ids(module: &mut IRModule) {
    let mut used: BTreeSet<String> = BTreeSet::new();
    for f in &module.functions {
        for b in f.blocks() {
            for i in &b.insts {
                if let Inst::Call { site, .. } = i {
                    if !site.is_empty() {
                        used.insert(site.clone());
                    }
                }
            }
        }
    }
    let mut next = 0usize;
    for f in &mut module.functions {
        super::visit_blocks_mut(&mut f.body, &mut |b| {
            for i in &mut b.insts {
                if let Inst::Call { site, .. } = i {
                    if site.is_empty() {
                        loop {
                            let candidate = format!("cs{next}");
                            next += 1;
                            if used.insert(candidate.clone()) {
                                *site = candidate;
                                break;
                            }
                        }
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_function_body() {
        let m = parse_module("func main() {\n}\n").unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.loop_count(), 0);
        let m = parse_module("func main() { }").unwrap();
        assert!(m.functions[0].body.is_empty());
    }

    #[test]
    fn counted_loop_and_pragma() {
        let text = "\
module t
array a[64]
func main() {
entry:
  s = mov 0
  #pragma unroll 4
  loop L0 (i = 0 to 64 step 1) {
  body:
    x = load a[i]   # trailing comment
    s = add s, x
  }
exit:
  ret s
}
";
        let m = parse_module(text).unwrap();
        let f = m.entry_function();
        let loops = f.loops();
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].trip_count(), Some(64));
        assert_eq!(loops[0].pragma_unroll_count(), Some(4));
    }

    #[test]
    fn undefined_label_is_named() {
        let text = "func main() {\nentry:\n  br nowhere\n}\n";
        let err = parse_module(text).unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownLabel {
                line: 3,
                col: 6,
                label: "nowhere".into()
            }
        );
        assert!(err.to_string().contains("nowhere"));
    }

    #[test]
    fn duplicate_function() {
        let err = parse_module("func f() { }\nfunc f() { }\n").unwrap_err();
        assert!(matches!(err, ParseError::DuplicateFunction { line: 2, .. }));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let err = parse_module("func main() {\nentry:\n  x = frob 1, 2\n}\n").unwrap_err();
        assert_eq!(
            err,
            ParseError::Syntax {
                line: 3,
                col: 7,
                msg: "unknown opcode `frob`".into()
            }
        );
        let err = parse_module("func main() {\nentry:\n  ret 0\n").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { line: 4, .. }));
        let err = parse_module("func main() {\n  x = mov 1\n}\n").unwrap_err();
        assert!(err.to_string().contains("outside of a labeled block"));
    }

    #[test]
    fn call_sites_numbered_in_order() {
        let text = "\
func f(a) {
e:
  ret a
}
func main() {
e:
  x = call f(1)
  y = call f(2) @cs0
  z = call f(3)
  ret z
}
";
        let m = parse_module(text).unwrap();
        let ids: Vec<String> = m.call_sites().into_iter().map(|c| c.id).collect();
        assert_eq!(ids, vec!["cs1", "cs0", "cs2"]);
    }
}
