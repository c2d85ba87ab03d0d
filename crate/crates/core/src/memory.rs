//! Hierarchical key-value memory: one group of entries per feature level,
//! plus the structure/semantic prototypes that drive update gating.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, cosine_similarity, gap, Tensor, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "tex")]
    Texture,
    #[serde(rename = "str")]
    Structure,
    #[serde(rename = "sem")]
    Semantic,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Texture, Level::Structure, Level::Semantic];

    pub fn tag(self) -> &'static str {
        match self {
            Level::Texture => "tex",
            Level::Structure => "str",
            Level::Semantic => "sem",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Level> {
        Level::ALL.into_iter().find(|l| l.tag() == tag)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One value per level, serialized with the short level tags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerLevel<T> {
    #[serde(rename = "tex")]
    pub texture: T,
    #[serde(rename = "str")]
    pub structure: T,
    #[serde(rename = "sem")]
    pub semantic: T,
}

impl<T> PerLevel<T> {
    pub fn from_fn(mut f: impl FnMut(Level) -> T) -> Self {
        Self {
            texture: f(Level::Texture),
            structure: f(Level::Structure),
            semantic: f(Level::Semantic),
        }
    }

    pub fn get(&self, level: Level) -> &T {
        match level {
            Level::Texture => &self.texture,
            Level::Structure => &self.structure,
            Level::Semantic => &self.semantic,
        }
    }

    pub fn get_mut(&mut self, level: Level) -> &mut T {
        match level {
            Level::Texture => &mut self.texture,
            Level::Structure => &mut self.structure,
            Level::Semantic => &mut self.semantic,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerLevel<U> {
        PerLevel {
            texture: f(&self.texture),
            structure: f(&self.structure),
            semantic: f(&self.semantic),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(Level, &T) -> Result<U>) -> Result<PerLevel<U>> {
        Ok(PerLevel {
            texture: f(Level::Texture, &self.texture)?,
            structure: f(Level::Structure, &self.structure)?,
            semantic: f(Level::Semantic, &self.semantic)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub key: Vector,
    /// d × h × w value map.
    pub value: Tensor,
    pub source_step: u64,
    pub level: Level,
}

/// Memory encoder: the adapted feature with the class-1 probability blended
/// half-and-half into its first channel; the key is the GAP of the value.
pub fn make_entry(
    level: Level,
    adapted: &Tensor,
    mask_probs: &Tensor,
    source_step: u64,
) -> Result<MemoryEntry> {
    let (_, h, w) = adapted.dims3()?;
    let (classes, _, _) = mask_probs.dims3()?;
    if classes < 2 {
        return Err(Error::invalid("mask probabilities need at least two classes"));
    }
    let oil = Tensor::new(
        vec![1, mask_probs.shape()[1], mask_probs.shape()[2]],
        mask_probs.plane(1).to_vec(),
    )?;
    let oil = bilinear_resize(&oil, h, w)?;
    let mut value = adapted.clone();
    for (v, p) in value.plane_mut(0).iter_mut().zip(oil.data()) {
        *v = 0.5 * *v + 0.5 * p;
    }
    let key = gap(&value)?;
    Ok(MemoryEntry {
        key,
        value,
        source_step,
        level,
    })
}

/// Which entries a group may hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupScope {
    Level(Level),
    /// A single group shared by all levels.
    Merged,
}

impl GroupScope {
    fn tag(self) -> &'static str {
        match self {
            GroupScope::Level(l) => l.tag(),
            GroupScope::Merged => "merged",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryGroup {
    scope: GroupScope,
    capacity: usize,
    entries: Vec<MemoryEntry>,
}

#[derive(Clone, Debug)]
pub struct RetrievedSet<'a> {
    pub level: Level,
    pub entries: Vec<&'a MemoryEntry>,
    pub similarities: Vec<f64>,
}

impl RetrievedSet<'_> {
    pub fn empty(level: Level) -> Self {
        RetrievedSet {
            level,
            entries: Vec::new(),
            similarities: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top_similarity(&self) -> Option<f64> {
        self.similarities.first().copied()
    }
}

impl MemoryGroup {
    pub fn new(scope: GroupScope, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("group capacity must be positive"));
        }
        Ok(Self {
            scope,
            capacity,
            entries: Vec::new(),
        })
    }

    pub fn scope(&self) -> GroupScope {
        self.scope
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-`k` entries by cosine similarity of keys; ties go to the more
    /// recent `source_step`.
    pub fn retrieve(&self, level: Level, query_key: &Vector, k: usize) -> Result<RetrievedSet<'_>> {
        if k == 0 {
            return Err(Error::invalid("retrieval k must be >= 1"));
        }
        let mut scored = self
            .entries
            .iter()
            .map(|e| Ok((cosine_similarity(query_key, &e.key)?.value, e)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| b.1.source_step.cmp(&a.1.source_step))
        });
        scored.truncate(k);
        Ok(RetrievedSet {
            level,
            similarities: scored.iter().map(|s| s.0).collect(),
            entries: scored.into_iter().map(|s| s.1).collect(),
        })
    }

    /// Appends, then evicts the entry with the smallest `source_step` while
    /// over capacity.
    pub fn insert(&mut self, entry: MemoryEntry) -> Result<()> {
        if let GroupScope::Level(l) = self.scope {
            if entry.level != l {
                return Err(Error::invalid(format!(
                    "{} entry inserted into {l} group",
                    entry.level
                )));
            }
        }
        self.entries.push(entry);
        while self.entries.len() > self.capacity {
            let oldest = self
                .entries
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.source_step)
                .map(|(i, _)| i)
                .expect("nonempty");
            self.entries.remove(oldest);
        }
        Ok(())
    }

    /// First entry of `level` whose value has the given shape.
    pub(crate) fn anchor_mut(&mut self, level: Level, shape: &[usize]) -> Option<&mut MemoryEntry> {
        self.entries
            .iter_mut()
            .find(|e| e.level == level && e.value.shape() == shape)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankLayout {
    /// One group per level.
    #[default]
    Multi,
    /// One shared group for every level.
    Merged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capacities {
    #[serde(rename = "tex")]
    pub texture: usize,
    #[serde(rename = "str")]
    pub structure: usize,
    #[serde(rename = "sem")]
    pub semantic: usize,
}

impl Default for Capacities {
    fn default() -> Self {
        Self {
            texture: 8,
            structure: 8,
            semantic: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    layout: BankLayout,
    groups: Vec<MemoryGroup>,
    pub(crate) proto_sem: Option<Vector>,
    pub(crate) proto_str: Option<Tensor>,
    pub(crate) proto_initialized: bool,
}

impl MemoryBank {
    pub fn new(layout: BankLayout, capacities: Capacities) -> Result<Self> {
        let groups = match layout {
            BankLayout::Multi => vec![
                MemoryGroup::new(GroupScope::Level(Level::Texture), capacities.texture)?,
                MemoryGroup::new(GroupScope::Level(Level::Structure), capacities.structure)?,
                MemoryGroup::new(GroupScope::Level(Level::Semantic), capacities.semantic)?,
            ],
            BankLayout::Merged => vec![MemoryGroup::new(
                GroupScope::Merged,
                capacities.texture + capacities.structure + capacities.semantic,
            )?],
        };
        Ok(Self {
            layout,
            groups,
            proto_sem: None,
            proto_str: None,
            proto_initialized: false,
        })
    }

    pub fn layout(&self) -> BankLayout {
        self.layout
    }

    pub fn groups(&self) -> &[MemoryGroup] {
        &self.groups
    }

    fn group_index(&self, level: Level) -> usize {
        match self.layout {
            BankLayout::Multi => level.index(),
            BankLayout::Merged => 0,
        }
    }

    /// The group serving `level`.
    pub fn group(&self, level: Level) -> &MemoryGroup {
        &self.groups[self.group_index(level)]
    }

    pub fn group_mut(&mut self, level: Level) -> &mut MemoryGroup {
        let i = self.group_index(level);
        &mut self.groups[i]
    }

    pub fn retrieve(&self, level: Level, query_key: &Vector, k: usize) -> Result<RetrievedSet<'_>> {
        self.group(level).retrieve(level, query_key, k)
    }

    pub fn insert(&mut self, entry: MemoryEntry) -> Result<()> {
        self.group_mut(entry.level).insert(entry)
    }

    pub fn proto_sem(&self) -> Option<&Vector> {
        self.proto_sem.as_ref()
    }

    pub fn proto_str(&self) -> Option<&Tensor> {
        self.proto_str.as_ref()
    }

    pub fn proto_initialized(&self) -> bool {
        self.proto_initialized
    }

    pub fn total_entries(&self) -> usize {
        self.groups.iter().map(MemoryGroup::len).sum()
    }

    /// Line-oriented text dump; [`MemoryBank::restore`] reads it back exactly.
    ///
    /// ```text
    /// memory-bank v1
    /// layout multi
    /// proto_initialized true
    /// proto_sem 3 0.5 0.01 0.2
    /// proto_str 3 8 8 ...
    /// group tex capacity 8 entries 1
    /// entry tex 0 key 32 ... value 32 16 16 ...
    /// ```
    pub fn dump(&self) -> String {
        let mut out = String::from("memory-bank v1\n");
        let layout = match self.layout {
            BankLayout::Multi => "multi",
            BankLayout::Merged => "merged",
        };
        writeln!(out, "layout {layout}").unwrap();
        writeln!(out, "proto_initialized {}", self.proto_initialized).unwrap();
        match &self.proto_sem {
            Some(v) => {
                write!(out, "proto_sem {}", v.dim()).unwrap();
                push_values(&mut out, v.data());
            }
            None => out.push_str("proto_sem none"),
        }
        out.push('\n');
        match &self.proto_str {
            Some(t) => {
                out.push_str("proto_str");
                push_shape_values(&mut out, t);
            }
            None => out.push_str("proto_str none"),
        }
        out.push('\n');
        for g in &self.groups {
            writeln!(
                out,
                "group {} capacity {} entries {}",
                g.scope.tag(),
                g.capacity,
                g.entries.len()
            )
            .unwrap();
            for e in &g.entries {
                write!(out, "entry {} {} key {}", e.level, e.source_step, e.key.dim()).unwrap();
                push_values(&mut out, e.key.data());
                out.push_str(" value");
                push_shape_values(&mut out, &e.value);
                out.push('\n');
            }
        }
        out
    }

    pub fn restore(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Validation(format!("bank dump ends before {what}")))
        };
        let (n, header) = next("header")?;
        if header.trim() != "memory-bank v1" {
            return Err(dump_err(n, "expected 'memory-bank v1'"));
        }
        let (n, line) = next("layout")?;
        let layout = match fields(line).as_slice() {
            ["layout", "multi"] => BankLayout::Multi,
            ["layout", "merged"] => BankLayout::Merged,
            _ => return Err(dump_err(n, "bad layout line")),
        };
        let (n, line) = next("proto_initialized")?;
        let proto_initialized = match fields(line).as_slice() {
            ["proto_initialized", v] => v.parse().map_err(|_| dump_err(n, "bad boolean"))?,
            _ => return Err(dump_err(n, "bad proto_initialized line")),
        };
        let (n, line) = next("proto_sem")?;
        let f = fields(line);
        let mut cur = Cursor::new(n, &f);
        cur.expect("proto_sem")?;
        let proto_sem = if cur.peek() == Some("none") {
            None
        } else {
            let dim = cur.usize()?;
            Some(Vector::new(cur.floats(dim)?))
        };
        let (n, line) = next("proto_str")?;
        let f = fields(line);
        let mut cur = Cursor::new(n, &f);
        cur.expect("proto_str")?;
        let proto_str = if cur.peek() == Some("none") {
            None
        } else {
            Some(cur.tensor()?)
        };

        let scopes: Vec<GroupScope> = match layout {
            BankLayout::Multi => Level::ALL.into_iter().map(GroupScope::Level).collect(),
            BankLayout::Merged => vec![GroupScope::Merged],
        };
        let mut groups = Vec::new();
        for scope in scopes {
            let (n, line) = next("group")?;
            let f = fields(line);
            let mut cur = Cursor::new(n, &f);
            cur.expect("group")?;
            cur.expect(scope.tag())?;
            cur.expect("capacity")?;
            let capacity = cur.usize()?;
            cur.expect("entries")?;
            let count = cur.usize()?;
            let mut group = MemoryGroup::new(scope, capacity)?;
            if count > capacity {
                return Err(dump_err(n, "more entries than capacity"));
            }
            for _ in 0..count {
                let (n, line) = next("entry")?;
                let f = fields(line);
                let mut cur = Cursor::new(n, &f);
                cur.expect("entry")?;
                let level = cur
                    .next()
                    .and_then(Level::from_tag)
                    .ok_or_else(|| dump_err(n, "bad entry level"))?;
                let source_step = cur.u64()?;
                cur.expect("key")?;
                let dim = cur.usize()?;
                let key = Vector::new(cur.floats(dim)?);
                cur.expect("value")?;
                let value = cur.tensor()?;
                group.entries.push(MemoryEntry {
                    key,
                    value,
                    source_step,
                    level,
                });
                if let GroupScope::Level(l) = scope {
                    if l != level {
                        return Err(dump_err(n, "entry level differs from its group"));
                    }
                }
            }
            groups.push(group);
        }
        Ok(Self {
            layout,
            groups,
            proto_sem,
            proto_str,
            proto_initialized,
        })
    }
}

fn push_values(out: &mut String, values: &[f64]) {
    for v in values {
        write!(out, " {v:?}").unwrap();
    }
}

fn push_shape_values(out: &mut String, t: &Tensor) {
    write!(out, " {}", t.rank()).unwrap();
    for s in t.shape() {
        write!(out, " {s}").unwrap();
    }
    push_values(out, t.data());
}

fn fields(line: &str) -> Vec<&str> {
    line.split_ascii_whitespace().collect()
}

fn dump_err(line: usize, msg: &str) -> Error {
    Error::Validation(format!("bank dump line {line}: {msg}"))
}

struct Cursor<'a> {
    line: usize,
    fields: &'a [&'a str],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(line: usize, fields: &'a [&'a str]) -> Self {
        Self { line, fields, pos: 0 }
    }

    fn peek(&self) -> Option<&'a str> {
        self.fields.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<&'a str> {
        let f = self.peek();
        self.pos += 1;
        f
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        match self.next() {
            Some(w) if w == word => Ok(()),
            _ => Err(dump_err(self.line, &format!("expected '{word}'"))),
        }
    }

    fn usize(&mut self) -> Result<usize> {
        self.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| dump_err(self.line, "expected an integer"))
    }

    fn u64(&mut self) -> Result<u64> {
        self.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| dump_err(self.line, "expected an integer"))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        (0..count)
            .map(|_| {
                self.next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| dump_err(self.line, "expected a number"))
            })
            .collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.usize()?;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().product();
        let data = self.floats(count)?;
        Tensor::new(shape, data).map_err(|e| dump_err(self.line, &e.to_string()))
    }
}
