//! Deep copies of item lists with fresh labels, loop ids and call-site ids.

use std::collections::HashMap;

use crate::ir::{Inst, Item, NameGen, Operand};

/// Naming state for cloning inside one function of one module.
pub(crate) struct Renamer<'a> {
    pub labels: &'a mut NameGen,
    pub loops: &'a mut NameGen,
    pub sites: &'a mut NameGen,
    pub tag: String,
    pub vars: HashMap<String, String>,
}

impl Renamer<'_> {
    /// Copy `items`. Labels defined inside get fresh names and branches to
    /// them are redirected; branches to outside labels are kept. Variables
    /// are renamed through `self.vars`.
    pub fn clone_items(&mut self, items: &[Item]) -> Vec<Item> {
        let mut label_map = HashMap::new();
        crate::ir::visit_items(items, &mut |item| {
            if let Item::Block(b) = item {
                let fresh = self.labels.fresh(&b.label, &self.tag);
                label_map.insert(b.label.clone(), fresh);
            }
        });
        self.copy(items, &label_map)
    }

    fn var(&self, v: &str) -> String {
        self.vars.get(v).cloned().unwrap_or_else(|| v.to_string())
    }

    fn operand(&self, o: &Operand) -> Operand {
        match o {
            Operand::Var(v) => Operand::Var(self.var(v)),
            c => c.clone(),
        }
    }

    fn copy(&mut self, items: &[Item], label_map: &HashMap<String, String>) -> Vec<Item> {
        items
            .iter()
            .map(|item| match item {
                Item::Block(b) => {
                    let mut nb = b.clone();
                    nb.label = label_map[&b.label].clone();
                    for inst in &mut nb.insts {
                        self.rename_inst(inst);
                    }
                    if let Some(t) = &mut nb.term {
                        for target in t.targets_mut() {
                            if let Some(n) = label_map.get(target.as_str()) {
                                *target = n.clone();
                            }
                        }
                        for op in t.operands_mut() {
                            *op = self.operand(op);
                        }
                    }
                    Item::Block(nb)
                }
                Item::Loop(l) => {
                    let mut nl = l.clone();
                    nl.id = self.loops.fresh(&l.id, &self.tag);
                    nl.iv = self.var(&l.iv);
                    nl.init = self.operand(&l.init);
                    nl.end = self.operand(&l.end);
                    nl.body = self.copy(&l.body, label_map);
                    Item::Loop(nl)
                }
            })
            .collect()
    }

    fn rename_inst(&mut self, inst: &mut Inst) {
        for op in inst.operands_mut() {
            *op = self.operand(op);
        }
        if let Some(d) = inst.dst_mut() {
            *d = self.var(d);
        }
        if let Inst::Call { site, .. } = inst {
            *site = self.sites.fresh(site, &self.tag);
        }
    }
}

/// Module-wide name generators for loop ids and call sites.
pub(crate) fn module_namegens(m: &crate::ir::IRModule) -> (NameGen, NameGen) {
    (NameGen::new(m.loop_ids()), NameGen::new(m.site_ids()))
}
