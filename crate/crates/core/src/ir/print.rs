use std::fmt::Write;

use super::{IRModule, Inst, Item, Terminator, UnrollPragma};

/// Canonical textual form; `parse_module(&print_module(m))` reproduces `m`.
pub fn print_module(m: &IRModule) -> String {
    let mut out = String::new();
    writeln!(out, "module {}", m.name).unwrap();
    writeln!(out, "entry {}", m.entry).unwrap();
    for a in &m.arrays {
        write!(out, "array {}[{}]", a.name, a.len).unwrap();
        if !a.init.is_empty() {
            let vals: Vec<String> = a.init.iter().map(i64::to_string).collect();
            write!(out, " = {{{}}}", vals.join(", ")).unwrap();
        }
        out.push('\n');
    }
    for f in &m.functions {
        out.push('\n');
        writeln!(out, "func {}({}) {{", f.name, f.params.join(", ")).unwrap();
        print_items(&mut out, &f.body, 0);
        out.push_str("}\n");
    }
    out
}

fn print_items(out: &mut String, items: &[Item], depth: usize) {
    let pad = "  ".repeat(depth);
    for item in items {
        match item {
            Item::Block(b) => {
                writeln!(out, "{pad}{}:", b.label).unwrap();
                for i in &b.insts {
                    writeln!(out, "{pad}  {}", inst_text(i)).unwrap();
                }
                if let Some(t) = &b.term {
                    writeln!(out, "{pad}  {}", term_text(t)).unwrap();
                }
            }
            Item::Loop(l) => {
                match l.pragma {
                    Some(UnrollPragma::Count(n)) => writeln!(out, "{pad}#pragma unroll {n}").unwrap(),
                    Some(UnrollPragma::Disable) => writeln!(out, "{pad}#pragma nounroll").unwrap(),
                    None => {}
                }
                writeln!(
                    out,
                    "{pad}loop {} ({} = {} to {} step {}) {{",
                    l.id, l.iv, l.init, l.end, l.step
                )
                .unwrap();
                print_items(out, &l.body, depth + 1);
                writeln!(out, "{pad}}}").unwrap();
            }
        }
    }
}

pub(crate) fn inst_text(i: &Inst) -> String {
    match i {
        Inst::Bin { op, dst, lhs, rhs } => format!("{dst} = {} {lhs}, {rhs}", op.mnemonic()),
        Inst::Mov { dst, src } => format!("{dst} = mov {src}"),
        Inst::Load { dst, array, index } => format!("{dst} = load {array}[{index}]"),
        Inst::Store {
            array,
            index,
            value,
        } => format!("store {array}[{index}], {value}"),
        Inst::Call {
            dst,
            callee,
            args,
            site,
        } => {
            let args: Vec<String> = args.iter().map(|a| a.to_string()).collect();
            let call = format!("call {callee}({}) @{site}", args.join(", "));
            match dst {
                Some(d) => format!("{d} = {call}"),
                None => call,
            }
        }
    }
}

pub(crate) fn term_text(t: &Terminator) -> String {
    match t {
        Terminator::Br(l) => format!("br {l}"),
        Terminator::CondBr {
            cond,
            then_label,
            else_label,
        } => format!("br {cond}, {then_label}, {else_label}"),
        Terminator::Ret(None) => "ret".into(),
        Terminator::Ret(Some(v)) => format!("ret {v}"),
    }
}
