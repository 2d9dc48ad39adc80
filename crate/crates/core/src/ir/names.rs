use std::collections::BTreeSet;

/// Fresh-identifier source over one namespace.
#[derive(Debug, Clone, Default)]
pub struct NameGen {
    used: BTreeSet<String>,
}

impl NameGen {
    pub fn new<I, S>(used: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        NameGen {
            used: used.into_iter().map(Into::into).collect(),
        }
    }

    pub fn reserve(&mut self, name: impl Into<String>) {
        self.used.insert(name.into());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.used.contains(name)
    }

    /// `base.tag`, or `base.tag_N` for the smallest free N.
    pub fn fresh(&mut self, base: &str, tag: &str) -> String {
        let first = format!("{base}.{tag}");
        if self.used.insert(first.clone()) {
            return first;
        }
        (1..)
            .map(|n| format!("{base}.{tag}_{n}"))
            .find(|c| self.used.insert(c.clone()))
            .expect("unbounded suffix space")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_names_never_repeat() {
        let mut g = NameGen::new(["L0.u1"]);
        assert_eq!(g.fresh("L0", "u1"), "L0.u1_1");
        assert_eq!(g.fresh("L0", "u1"), "L0.u1_2");
        assert_eq!(g.fresh("L0", "u2"), "L0.u2");
    }
}
