use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{Function, IRModule, Inst, Item};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("entry function `{0}` is not defined")]
    MissingEntry(String),
    #[error("duplicate function `{0}`")]
    DuplicateFunction(String),
    #[error("duplicate array `{0}`")]
    DuplicateArray(String),
    #[error("function `{func}`: unknown array `{array}`")]
    UnknownArray { func: String, array: String },
    #[error("function `{func}`: call to undeclared function `{callee}`")]
    UnknownCallee { func: String, callee: String },
    #[error("function `{func}`: call to `{callee}` passes {got} arguments, expected {expected}")]
    Arity {
        func: String,
        callee: String,
        expected: usize,
        got: usize,
    },
    #[error("function `{func}`: duplicate label `{label}`")]
    DuplicateLabel { func: String, label: String },
    #[error("function `{func}`: unknown branch target `{label}`")]
    UnknownLabel { func: String, label: String },
    #[error("function `{func}`: duplicate parameter `{param}`")]
    DuplicateParam { func: String, param: String },
    #[error("duplicate loop id `{0}`")]
    DuplicateLoop(String),
    #[error("duplicate call-site id `{0}`")]
    DuplicateSite(String),
    #[error("function `{func}`: call without a site id")]
    MissingSite { func: String },
    #[error("loop `{0}` has step 0")]
    ZeroStep(String),
    #[error("loop `{id}` writes its induction variable `{iv}` in its body")]
    InductionWrite { id: String, iv: String },
}

pub fn verify_module(m: &IRModule) -> Result<(), VerifyError> {
    let mut fnames = BTreeMap::new();
    for f in &m.functions {
        if fnames.insert(f.name.as_str(), f.params.len()).is_some() {
            return Err(VerifyError::DuplicateFunction(f.name.clone()));
        }
    }
    if !fnames.contains_key(m.entry.as_str()) {
        return Err(VerifyError::MissingEntry(m.entry.clone()));
    }
    let mut arrays = BTreeSet::new();
    for a in &m.arrays {
        if !arrays.insert(a.name.as_str()) {
            return Err(VerifyError::DuplicateArray(a.name.clone()));
        }
    }
    let mut loop_ids = BTreeSet::new();
    let mut site_ids = BTreeSet::new();
    for f in &m.functions {
        verify_function(f, &fnames, &arrays, &mut loop_ids, &mut site_ids)?;
    }
    Ok(())
}

fn verify_function(
    f: &Function,
    fnames: &BTreeMap<&str, usize>,
    arrays: &BTreeSet<&str>,
    loop_ids: &mut BTreeSet<String>,
    site_ids: &mut BTreeSet<String>,
) -> Result<(), VerifyError> {
    let mut params = BTreeSet::new();
    for p in &f.params {
        if !params.insert(p) {
            return Err(VerifyError::DuplicateParam {
                func: f.name.clone(),
                param: p.clone(),
            });
        }
    }
    let mut labels = BTreeSet::new();
    for b in f.blocks() {
        if !labels.insert(b.label.as_str()) {
            return Err(VerifyError::DuplicateLabel {
                func: f.name.clone(),
                label: b.label.clone(),
            });
        }
    }
    for b in f.blocks() {
        if let Some(t) = &b.term {
            for target in t.targets() {
                if !labels.contains(target) {
                    return Err(VerifyError::UnknownLabel {
                        func: f.name.clone(),
                        label: target.to_string(),
                    });
                }
            }
        }
        for inst in &b.insts {
            match inst {
                Inst::Load { array, .. } | Inst::Store { array, .. } => {
                    if !arrays.contains(array.as_str()) {
                        return Err(VerifyError::UnknownArray {
                            func: f.name.clone(),
                            array: array.clone(),
                        });
                    }
                }
                Inst::Call {
                    callee, args, site, ..
                } => {
                    let Some(&arity) = fnames.get(callee.as_str()) else {
                        return Err(VerifyError::UnknownCallee {
                            func: f.name.clone(),
                            callee: callee.clone(),
                        });
                    };
                    if arity != args.len() {
                        return Err(VerifyError::Arity {
                            func: f.name.clone(),
                            callee: callee.clone(),
                            expected: arity,
                            got: args.len(),
                        });
                    }
                    if site.is_empty() {
                        return Err(VerifyError::MissingSite {
                            func: f.name.clone(),
                        });
                    }
                    if !site_ids.insert(site.clone()) {
                        return Err(VerifyError::DuplicateSite(site.clone()));
                    }
                }
                _ => {}
            }
        }
    }
    check_loops(&f.body, &mut Vec::new(), loop_ids)
}

fn check_loops(
    items: &[Item],
    enclosing: &mut Vec<(String, String)>,
    loop_ids: &mut BTreeSet<String>,
) -> Result<(), VerifyError> {
    for item in items {
        match item {
            Item::Block(b) => {
                for inst in &b.insts {
                    if let Some(d) = inst.dst() {
                        if let Some((id, iv)) = enclosing.iter().find(|(_, iv)| iv == d) {
                            return Err(VerifyError::InductionWrite {
                                id: id.clone(),
                                iv: iv.clone(),
                            });
                        }
                    }
                }
            }
            Item::Loop(l) => {
                if !loop_ids.insert(l.id.clone()) {
                    return Err(VerifyError::DuplicateLoop(l.id.clone()));
                }
                if l.step == 0 {
                    return Err(VerifyError::ZeroStep(l.id.clone()));
                }
                if let Some((id, iv)) = enclosing.iter().find(|(_, iv)| *iv == l.iv) {
                    return Err(VerifyError::InductionWrite {
                        id: id.clone(),
                        iv: iv.clone(),
                    });
                }
                enclosing.push((l.id.clone(), l.iv.clone()));
                check_loops(&l.body, enclosing, loop_ids)?;
                enclosing.pop();
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use crate::ir::{parse_module, ParseError};

    use super::*;

    fn verr(text: &str) -> VerifyError {
        match parse_module(text) {
            Err(ParseError::Invalid(e)) => e,
            other => panic!("expected verify error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_iv_writes_and_bad_calls() {
        let e = verr("func main() {\ne:\nloop L (i = 0 to 4 step 1) {\nb:\n i = add i, 1\n}\n}\n");
        assert!(matches!(e, VerifyError::InductionWrite { .. }));
        let e = verr("func main() {\ne:\n x = call g()\n}\n");
        assert!(matches!(e, VerifyError::UnknownCallee { .. }));
        let e = verr("func f(a) { }\nfunc main() {\ne:\n x = call f()\n}\n");
        assert!(matches!(e, VerifyError::Arity { .. }));
        let e = verr("entry start\nfunc main() { }\n");
        assert_eq!(e, VerifyError::MissingEntry("start".into()));
        let e = verr("func main() {\ne:\nloop L (i = 0 to 4 step 0) {\n}\n}\n");
        assert_eq!(e, VerifyError::ZeroStep("L".into()));
    }

    #[test]
    fn loop_ids_are_module_wide() {
        let e = verr(
            "func f() {\nloop L (i = 0 to 4 step 1) {\n}\n}\nfunc main() {\nloop L (i = 0 to 4 step 1) {\n}\n}\n",
        );
        assert_eq!(e, VerifyError::DuplicateLoop("L".into()));
    }
}
