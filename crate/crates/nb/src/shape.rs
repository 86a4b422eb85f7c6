//! Per-example shape language used by shape inference.
//!
//! Configs never mention the batch dimension; every shape here describes one
//! example. Sequence lengths are not known until a batch arrives, so they are
//! tracked as symbolic dimensions ([`Dim::Sym`]) tied to the model input that
//! introduced them. A `valid`-padded convolution shortens a sequence by a
//! constant, which is what the `offset` field carries.

use std::fmt;

/// Identifies one symbolic sequence length (one per sequence-shaped model input).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymId(pub u32);

/// One extent of a per-example shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    Fixed(usize),
    /// A sequence length, possibly shifted by a constant (e.g. `T - 2` after
    /// a width-3 valid convolution).
    Sym { id: SymId, offset: i64 },
}

impl Dim {
    pub fn sym(id: SymId) -> Self {
        Dim::Sym { id, offset: 0 }
    }

    pub fn shifted(self, delta: i64) -> Self {
        match self {
            Dim::Fixed(n) => Dim::Fixed((n as i64 + delta).max(0) as usize),
            Dim::Sym { id, offset } => Dim::Sym { id, offset: offset + delta },
        }
    }

    /// Concrete extent once every symbol is bound.
    pub fn resolve(&self, bind: impl Fn(SymId) -> usize) -> usize {
        match *self {
            Dim::Fixed(n) => n,
            Dim::Sym { id, offset } => {
                let base = bind(id) as i64;
                (base + offset).max(0) as usize
            }
        }
    }

    pub fn as_fixed(&self) -> Option<usize> {
        match *self {
            Dim::Fixed(n) => Some(n),
            Dim::Sym { .. } => None,
        }
    }

    pub fn seq_sym(&self) -> Option<(SymId, i64)> {
        match *self {
            Dim::Sym { id, offset } => Some((id, offset)),
            Dim::Fixed(_) => None,
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Dim::Fixed(n) => write!(f, "{n}"),
            Dim::Sym { id, offset } if offset == 0 => write!(f, "T{}", id.0),
            Dim::Sym { id, offset } if offset > 0 => write!(f, "T{}+{}", id.0, offset),
            Dim::Sym { id, offset } => write!(f, "T{}{}", id.0, offset),
        }
    }
}

/// What kind of value flows along an edge of the model graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    /// Dense float tensor.
    Float,
    /// A sequence of token/feature ids, shape `[T]`.
    TokenIds,
    /// Per-token character ids, shape `[T, C]` (ragged at runtime).
    CharIds,
}

/// Per-example shape of a graph edge: value kind plus symbolic extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    pub kind: ValueKind,
    pub dims: Vec<Dim>,
}

impl Shape {
    pub fn float(dims: Vec<Dim>) -> Self {
        Shape { kind: ValueKind::Float, dims }
    }

    pub fn token_ids(seq: SymId) -> Self {
        Shape { kind: ValueKind::TokenIds, dims: vec![Dim::sym(seq)] }
    }

    pub fn char_ids(seq: SymId, chars: SymId) -> Self {
        Shape { kind: ValueKind::CharIds, dims: vec![Dim::sym(seq), Dim::sym(chars)] }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Last-dimension extent when it is fixed (the usual feature width).
    pub fn feature_dim(&self) -> Option<usize> {
        self.dims.last().and_then(Dim::as_fixed)
    }

    /// The sequence symbol of the leading axis, if the shape is sequence-like.
    pub fn seq_dim(&self) -> Option<(SymId, i64)> {
        self.dims.first().and_then(Dim::seq_sym)
    }

    pub fn resolve(&self, bind: impl Fn(SymId) -> usize + Copy) -> Vec<usize> {
        self.dims.iter().map(|d| d.resolve(bind)).collect()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            ValueKind::Float => "",
            ValueKind::TokenIds => "ids ",
            ValueKind::CharIds => "char-ids ",
        };
        write!(f, "{tag}[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}
