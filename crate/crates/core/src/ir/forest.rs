use std::collections::BTreeMap;

use super::{Function, Item, Loop};

#[derive(Debug, Clone, PartialEq)]
pub struct LoopInfo {
    pub id: String,
    /// Synthetic header block; named after the loop.
    pub header: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// 1 for outermost loops.
    pub depth: usize,
    /// 1 for innermost loops.
    pub height: usize,
    /// Labels of blocks directly in this loop, excluding child loops.
    pub own_blocks: Vec<String>,
    /// Labels of all blocks inside the loop, children included.
    pub blocks: Vec<String>,
    pub trip_count: Option<u64>,
    /// False when some block inside is branched to from outside the loop.
    pub reducible: bool,
}

impl LoopInfo {
    pub fn is_innermost(&self) -> bool {
        self.children.is_empty()
    }

    pub fn is_outermost(&self) -> bool {
        self.parent.is_none()
    }
}

/// Loop nesting of one function, in pre-order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopForest {
    pub loops: Vec<LoopInfo>,
}

impl LoopForest {
    pub fn roots(&self) -> impl Iterator<Item = &LoopInfo> {
        self.loops.iter().filter(|l| l.parent.is_none())
    }

    pub fn get(&self, id: &str) -> Option<&LoopInfo> {
        self.loops.iter().find(|l| l.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.loops.iter().position(|l| l.id == id)
    }

    /// Deepest nesting level (0 for no loops).
    pub fn depth(&self) -> usize {
        self.loops.iter().map(|l| l.depth).max().unwrap_or(0)
    }

    /// Outermost loop enclosing `idx` (itself when outermost).
    pub fn outermost_of(&self, mut idx: usize) -> usize {
        while let Some(p) = self.loops[idx].parent {
            idx = p;
        }
        idx
    }

    /// Loops other than irreducible ones.
    pub fn natural_loops(&self) -> impl Iterator<Item = &LoopInfo> {
        self.loops.iter().filter(|l| l.reducible)
    }

    /// Loop ids in post-order (children before parents).
    pub fn post_order(&self) -> Vec<usize> {
        fn walk(f: &LoopForest, i: usize, out: &mut Vec<usize>) {
            for &c in &f.loops[i].children {
                walk(f, c, out);
            }
            out.push(i);
        }
        let mut out = Vec::new();
        for (i, l) in self.loops.iter().enumerate() {
            if l.parent.is_none() {
                walk(self, i, &mut out);
            }
        }
        out
    }
}

pub fn build_loop_forest(f: &Function) -> LoopForest {
    let mut forest = LoopForest::default();
    let mut block_loops: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    collect(&f.body, None, 1, &mut forest, &mut Vec::new(), &mut block_loops);

    for i in (0..forest.loops.len()).rev() {
        let h = forest.loops[i]
            .children
            .iter()
            .map(|&c| forest.loops[c].height)
            .max()
            .unwrap_or(0);
        forest.loops[i].height = h + 1;
    }

    let no_loops = Vec::new();
    for b in f.blocks() {
        let Some(term) = &b.term else { continue };
        let src = block_loops.get(&b.label).unwrap_or(&no_loops);
        for target in term.targets() {
            if let Some(dst) = block_loops.get(target) {
                for l in dst {
                    if !src.contains(l) {
                        forest.loops[*l].reducible = false;
                    }
                }
            }
        }
    }
    forest
}

fn collect(
    items: &[Item],
    parent: Option<usize>,
    depth: usize,
    forest: &mut LoopForest,
    stack: &mut Vec<usize>,
    block_loops: &mut BTreeMap<String, Vec<usize>>,
) {
    for item in items {
        match item {
            Item::Block(b) => {
                block_loops.insert(b.label.clone(), stack.clone());
                if let Some(&p) = stack.last() {
                    forest.loops[p].own_blocks.push(b.label.clone());
                }
                for &l in stack.iter() {
                    forest.loops[l].blocks.push(b.label.clone());
                }
            }
            Item::Loop(l) => {
                let idx = push_loop(forest, l, parent, depth);
                stack.push(idx);
                collect(&l.body, Some(idx), depth + 1, forest, stack, block_loops);
                stack.pop();
            }
        }
    }
}

fn push_loop(forest: &mut LoopForest, l: &Loop, parent: Option<usize>, depth: usize) -> usize {
    let idx = forest.loops.len();
    forest.loops.push(LoopInfo {
        id: l.id.clone(),
        header: l.id.clone(),
        parent,
        children: Vec::new(),
        depth,
        height: 0,
        own_blocks: Vec::new(),
        blocks: Vec::new(),
        trip_count: l.trip_count(),
        reducible: true,
    });
    if let Some(p) = parent {
        forest.loops[p].children.push(idx);
    }
    idx
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_module;

    #[test]
    fn nesting_and_siblings() {
        let text = "\
func main() {
loop A (i = 0 to 4 step 1) {
  loop B (j = 0 to 4 step 1) {
  b:
    x = mov 1
  }
}
loop C (k = 0 to 2 step 1) {
c:
  y = mov 2
}
}
";
        let m = parse_module(text).unwrap();
        let forest = build_loop_forest(m.entry_function());
        assert_eq!(forest.roots().count(), 2);
        let a = forest.get("A").unwrap();
        let b = forest.get("B").unwrap();
        assert_eq!(a.height, 2);
        assert_eq!(b.depth, 2);
        assert!(b.is_innermost() && !b.is_outermost());
        assert_eq!(a.blocks, vec!["b"]);
        assert!(a.own_blocks.is_empty());
        assert_eq!(forest.depth(), 2);
        let post: Vec<&str> = forest
            .post_order()
            .into_iter()
            .map(|i| forest.loops[i].id.as_str())
            .collect();
        assert_eq!(post, vec!["B", "A", "C"]);
    }

    #[test]
    fn side_entry_is_irreducible() {
        let text = "\
func main() {
e:
  br inside
loop L (i = 0 to 4 step 1) {
inside:
  x = add x, 1
}
}
";
        let m = parse_module(text).unwrap();
        let forest = build_loop_forest(m.entry_function());
        assert!(!forest.get("L").unwrap().reducible);
        assert_eq!(forest.natural_loops().count(), 0);
    }
}
