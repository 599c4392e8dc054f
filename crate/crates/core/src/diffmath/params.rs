use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PARAMS_HEADER: &str = "mcml-params v1";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId(pub(crate) usize);

impl SlotId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Vector,
    Matrix,
}

impl SlotKind {
    fn as_str(self) -> &'static str {
        match self {
            SlotKind::Vector => "vec",
            SlotKind::Matrix => "mat",
        }
    }
}

/// A named parameter array. Vectors are stored as `rows x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub kind: SlotKind,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape_string(&self) -> String {
        format!("{} {}x{}", self.name, self.rows, self.cols)
    }
}

/// Ordered collection of named parameter slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u32 {
        PARAMS_VERSION
    }

    fn push(&mut self, slot: Slot) -> Result<SlotId> {
        if self.index.contains_key(&slot.name) {
            return Err(Error::Invalid(format!("duplicate parameter slot {}", slot.name)));
        }
        if slot.rows == 0 || slot.cols == 0 || slot.rows * slot.cols != slot.data.len() {
            return Err(Error::shape(
                "param",
                slot.shape_string(),
                format!("{} values", slot.data.len()),
            ));
        }
        if let Some(bad) = slot.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain("param", format!("{} holds non-finite value {bad}", slot.name)));
        }
        let id = self.slots.len();
        self.index.insert(slot.name.clone(), id);
        self.slots.push(slot);
        Ok(SlotId(id))
    }

    pub fn add_vector(&mut self, name: &str, data: Vec<f64>, trainable: bool) -> Result<SlotId> {
        self.push(Slot {
            name: name.to_string(),
            kind: SlotKind::Vector,
            rows: data.len(),
            cols: 1,
            data,
            trainable,
        })
    }

    pub fn add_matrix(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        trainable: bool,
    ) -> Result<SlotId> {
        self.push(Slot {
            name: name.to_string(),
            kind: SlotKind::Matrix,
            rows,
            cols,
            data,
            trainable,
        })
    }

    pub fn id(&self, name: &str) -> Result<SlotId> {
        self.index.get(name).map(|&i| SlotId(i)).ok_or_else(|| Error::Lookup {
            kind: "parameter slot",
            name: name.to_string(),
        })
    }

    pub fn slot(&self, id: SlotId) -> &Slot {
        &self.slots[id.0]
    }

    pub fn slot_mut(&mut self, id: SlotId) -> &mut Slot {
        &mut self.slots[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&Slot> {
        self.id(name).map(|id| self.slot(id))
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = SlotId> {
        (0..self.slots.len()).map(SlotId)
    }

    pub fn set_trainable(&mut self, id: SlotId, trainable: bool) {
        self.slots[id.0].trainable = trainable;
    }

    /// Serializes every slot with 17 significant digits, which round-trips f64 exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(PARAMS_HEADER);
        out.push('\n');
        for slot in &self.slots {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                slot.name,
                slot.kind.as_str(),
                slot.rows,
                slot.cols,
                slot.trainable
            );
            for row in slot.data.chunks(slot.cols) {
                let line: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    /// Parses the text produced by [`ParamStore::to_text`]. Returns the store and the
    /// number of lines consumed so that callers can continue with trailing sections.
    pub fn from_lines(lines: &[&str]) -> Result<(Self, usize)> {
        let mut pos = 0;
        match lines.first() {
            Some(l) if l.trim_end() == PARAMS_HEADER => pos += 1,
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{PARAMS_HEADER}`"),
                })
            }
        }
        let mut store = ParamStore::new();
        while pos < lines.len() {
            let header = lines[pos].trim();
            if header.is_empty() {
                pos += 1;
                continue;
            }
            let fields: Vec<&str> = header.split_whitespace().collect();
            if fields.len() != 5 || !matches!(fields[1], "vec" | "mat") {
                // start of a following section
                break;
            }
            let line_no = pos + 1;
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let rows: usize = fields[2]
                .parse()
                .map_err(|_| parse_err(format!("bad row count {}", fields[2])))?;
            let cols: usize = fields[3]
                .parse()
                .map_err(|_| parse_err(format!("bad column count {}", fields[3])))?;
            let trainable: bool = fields[4]
                .parse()
                .map_err(|_| parse_err(format!("bad trainable flag {}", fields[4])))?;
            pos += 1;
            let want = rows * cols;
            let mut data = Vec::with_capacity(want);
            while data.len() < want {
                let Some(line) = lines.get(pos) else {
                    return Err(Error::Parse {
                        line: pos + 1,
                        message: format!("slot {} truncated", fields[0]),
                    });
                };
                for tok in line.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| Error::Parse {
                        line: pos + 1,
                        message: format!("bad float {tok}"),
                    })?;
                    data.push(v);
                }
                pos += 1;
            }
            if data.len() != want {
                return Err(Error::Parse {
                    line: pos,
                    message: format!("slot {} has {} values, expected {want}", fields[0], data.len()),
                });
            }
            match fields[1] {
                "vec" => {
                    if cols != 1 {
                        return Err(parse_err("vector slot must have one column".into()));
                    }
                    store.add_vector(fields[0], data, trainable)?
                }
                _ => store.add_matrix(fields[0], rows, cols, data, trainable)?,
            };
        }
        Ok((store, pos))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let (store, used) = Self::from_lines(&lines)?;
        if let Some(extra) = lines[used..].iter().position(|l| !l.trim().is_empty()) {
            return Err(Error::Parse {
                line: used + extra + 1,
                message: "unexpected trailing content".into(),
            });
        }
        Ok(store)
    }
}

pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let mut p = ParamStore::new();
        p.add_vector("b", vec![0.1, -1.0 / 3.0, 1e-300], true).unwrap();
        p.add_matrix("w", 2, 2, vec![std::f64::consts::PI, 2.0, -0.0, 5e17], false)
            .unwrap();
        let text = p.to_text();
        assert!(text.starts_with("mcml-params v1\nb vec 3 1 true\n"));
        let back = ParamStore::from_text(&text).unwrap();
        assert_eq!(back, p);
        for (a, b) in p.slots().iter().zip(back.slots()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.add_vector("a", vec![1.0], true).unwrap();
        assert!(p.add_vector("a", vec![1.0], true).is_err());
    }

    #[test]
    fn truncated_slot_is_a_parse_error() {
        let err = ParamStore::from_text("mcml-params v1\nw mat 2 2 true\n1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
