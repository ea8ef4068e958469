//! Search spaces: a width-grid MLP space and a small cell space whose ops sit
//! on the edges of a fixed-size DAG.
//!
//! Genotypes serialize to a canonical compact JSON document
//! (`{"variant":"mlp","widths":[..]}` or
//! `{"variant":"cell","ops":[[..]],"stem_width":n}`); the genotype id is the
//! 64-bit FNV-1a hash of that document, rendered as 16 lowercase hex digits.
//!
//! Cell op ids: 0 zero, 1 skip, 2 linear-relu, 3 linear, 4 bottleneck-linear.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Network, NetworkBuilder};

/// Allowed hidden widths: 2, 4, ..., 48.
pub const WIDTH_GRID: [usize; 24] = {
    let mut g = [0; 24];
    let mut i = 0;
    while i < 24 {
        g[i] = 2 * (i + 1);
        i += 1;
    }
    g
};
pub const MAX_MLP_DEPTH: usize = 3;
pub const MAX_SAMPLE_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("invalid genotype: {0}")]
    Invalid(String),
    #[error("genotype JSON: {0}")]
    Parse(String),
    #[error("no genotype within {max_params} parameters found after {attempts} draws")]
    Infeasible { max_params: usize, attempts: usize },
    #[error("no single-locus mutation of {id} satisfies the constraint")]
    NoMutation { id: GenotypeId },
    #[error("genotype variant does not match the {0} search space")]
    WrongSpace(&'static str),
    #[error("resource constraint needs max_params > 0")]
    BadConstraint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellOp {
    Zero = 0,
    Skip = 1,
    LinearRelu = 2,
    Linear = 3,
    Bottleneck = 4,
}

impl CellOp {
    pub const ALL: [CellOp; 5] = [
        CellOp::Zero,
        CellOp::Skip,
        CellOp::LinearRelu,
        CellOp::Linear,
        CellOp::Bottleneck,
    ];

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

/// Bottleneck width for a stem of width `s`.
pub fn bottleneck_width(s: usize) -> usize {
    (s / 4).max(1)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Architecture {
    Mlp { widths: Vec<usize> },
    /// `ops[i][j]` is the op on edge `i -> j`; only `i < j` may be non-zero.
    Cell { ops: Vec<Vec<CellOp>>, stem_width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GenotypeId(pub u64);

impl fmt::Display for GenotypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl Serialize for GenotypeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GenotypeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16)
            .map(GenotypeId)
            .map_err(serde::de::Error::custom)
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeDoc {
    variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ops: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stem_width: Option<usize>,
}

/// A validated architecture together with its content hash.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    arch: Architecture,
    id: GenotypeId,
}

impl Genotype {
    pub fn new(arch: Architecture) -> Result<Self, ArchError> {
        validate(&arch)?;
        let id = GenotypeId(fnv1a64(canonical_json(&arch).as_bytes()));
        Ok(Self { arch, id })
    }

    pub fn mlp(widths: Vec<usize>) -> Result<Self, ArchError> {
        Self::new(Architecture::Mlp { widths })
    }

    pub fn cell(ops: Vec<Vec<CellOp>>, stem_width: usize) -> Result<Self, ArchError> {
        Self::new(Architecture::Cell { ops, stem_width })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn id(&self) -> GenotypeId {
        self.id
    }

    pub fn to_json(&self) -> String {
        canonical_json(&self.arch)
    }

    pub fn from_json(s: &str) -> Result<Self, ArchError> {
        let doc: GenotypeDoc =
            serde_json::from_str(s).map_err(|e| ArchError::Parse(e.to_string()))?;
        Self::from_doc(doc)
    }

    fn from_doc(doc: GenotypeDoc) -> Result<Self, ArchError> {
        let arch = match doc.variant.as_str() {
            "mlp" => {
                if doc.ops.is_some() || doc.stem_width.is_some() {
                    return Err(ArchError::Parse("mlp genotype takes only `widths`".into()));
                }
                Architecture::Mlp {
                    widths: doc.widths.ok_or_else(|| ArchError::Parse("missing `widths`".into()))?,
                }
            }
            "cell" => {
                if doc.widths.is_some() {
                    return Err(ArchError::Parse("cell genotype does not take `widths`".into()));
                }
                let raw = doc.ops.ok_or_else(|| ArchError::Parse("missing `ops`".into()))?;
                let ops = raw
                    .into_iter()
                    .map(|row| {
                        row.into_iter()
                            .map(|id| {
                                CellOp::from_id(id)
                                    .ok_or_else(|| ArchError::Parse(format!("unknown op id {id}")))
                            })
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Architecture::Cell {
                    ops,
                    stem_width: doc
                        .stem_width
                        .ok_or_else(|| ArchError::Parse("missing `stem_width`".into()))?,
                }
            }
            other => return Err(ArchError::Parse(format!("unknown variant `{other}`"))),
        };
        Self::new(arch)
    }

    pub fn num_nodes(&self) -> Option<usize> {
        match &self.arch {
            Architecture::Cell { ops, .. } => Some(ops.len()),
            Architecture::Mlp { .. } => None,
        }
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

impl Serialize for Genotype {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        to_doc(&self.arch).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Genotype {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let doc = GenotypeDoc::deserialize(d)?;
        Genotype::from_doc(doc).map_err(serde::de::Error::custom)
    }
}

fn to_doc(arch: &Architecture) -> GenotypeDoc {
    match arch {
        Architecture::Mlp { widths } => GenotypeDoc {
            variant: "mlp".into(),
            widths: Some(widths.clone()),
            ops: None,
            stem_width: None,
        },
        Architecture::Cell { ops, stem_width } => GenotypeDoc {
            variant: "cell".into(),
            widths: None,
            ops: Some(
                ops.iter()
                    .map(|r| r.iter().map(|o| o.id()).collect())
                    .collect(),
            ),
            stem_width: Some(*stem_width),
        },
    }
}

fn canonical_json(arch: &Architecture) -> String {
    serde_json::to_string(&to_doc(arch)).expect("genotype document serializes")
}

fn validate(arch: &Architecture) -> Result<(), ArchError> {
    match arch {
        Architecture::Mlp { widths } => {
            if widths.is_empty() || widths.len() > MAX_MLP_DEPTH {
                return Err(ArchError::Invalid(format!(
                    "mlp depth {} outside [1, {MAX_MLP_DEPTH}]",
                    widths.len()
                )));
            }
            if let Some(w) = widths.iter().find(|w| !WIDTH_GRID.contains(w)) {
                return Err(ArchError::Invalid(format!("width {w} not on the 2..=48 step 2 grid")));
            }
        }
        Architecture::Cell { ops, stem_width } => {
            let n = ops.len();
            if n < 2 {
                return Err(ArchError::Invalid("cell needs at least 2 nodes".into()));
            }
            if *stem_width == 0 {
                return Err(ArchError::Invalid("stem width must be positive".into()));
            }
            for (i, row) in ops.iter().enumerate() {
                if row.len() != n {
                    return Err(ArchError::Invalid(format!("ops row {i} has {} entries, expected {n}", row.len())));
                }
                for (j, &op) in row.iter().enumerate() {
                    if j <= i && op != CellOp::Zero {
                        return Err(ArchError::Invalid(format!(
                            "ops[{i}][{j}] is below the diagonal and must be zero"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceConstraint {
    pub max_params: usize,
}

impl ResourceConstraint {
    pub fn new(max_params: usize) -> Result<Self, ArchError> {
        if max_params == 0 {
            return Err(ArchError::BadConstraint);
        }
        Ok(Self { max_params })
    }

    pub fn unbounded() -> Self {
        Self {
            max_params: usize::MAX,
        }
    }
}

/// Input width and class count of the task a genotype is instantiated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub input_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceKind {
    Mlp { min_depth: usize, max_depth: usize },
    Cell { num_nodes: usize, stem_widths: Vec<usize> },
}

impl SpaceKind {
    pub fn name(&self) -> &'static str {
        match self {
            SpaceKind::Mlp { .. } => "mlp",
            SpaceKind::Cell { .. } => "cell",
        }
    }

    /// Default cell space: 4 nodes (6 edges) and stems {8, 16, 24, 32}.
    pub fn default_cell() -> Self {
        SpaceKind::Cell {
            num_nodes: 4,
            stem_widths: vec![8, 16, 24, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpace {
    pub kind: SpaceKind,
    pub task: TaskShape,
    pub constraint: ResourceConstraint,
}

impl ArchSpace {
    pub fn new(kind: SpaceKind, task: TaskShape, constraint: ResourceConstraint) -> Result<Self, ArchError> {
        match &kind {
            SpaceKind::Mlp { min_depth, max_depth } => {
                if *min_depth < 1 || min_depth > max_depth || *max_depth > MAX_MLP_DEPTH {
                    return Err(ArchError::Invalid(format!(
                        "mlp depth range [{min_depth}, {max_depth}] outside [1, {MAX_MLP_DEPTH}]"
                    )));
                }
            }
            SpaceKind::Cell { num_nodes, stem_widths } => {
                if *num_nodes < 2 || stem_widths.is_empty() || stem_widths.contains(&0) {
                    return Err(ArchError::Invalid("cell space needs >= 2 nodes and positive stem widths".into()));
                }
            }
        }
        if constraint.max_params == 0 {
            return Err(ArchError::BadConstraint);
        }
        Ok(Self { kind, task, constraint })
    }

    /// Checks that `g` belongs to this space (shape and constraint).
    pub fn contains(&self, g: &Genotype) -> bool {
        self.matches_shape(g) && self.param_count(g) <= self.constraint.max_params
    }

    fn matches_shape(&self, g: &Genotype) -> bool {
        match (&self.kind, g.arch()) {
            (SpaceKind::Mlp { min_depth, max_depth }, Architecture::Mlp { widths }) => {
                (*min_depth..=*max_depth).contains(&widths.len())
            }
            (SpaceKind::Cell { num_nodes, stem_widths }, Architecture::Cell { ops, stem_width }) => {
                ops.len() == *num_nodes && stem_widths.contains(stem_width)
            }
            _ => false,
        }
    }

    /// Closed-form parameter count (weights and biases of every linear layer).
    pub fn param_count(&self, g: &Genotype) -> usize {
        layer_shapes(g, self.task).iter().map(|(i, o)| (i + 1) * o).sum()
    }

    /// Closed-form multiply-accumulates per sample.
    pub fn flop_count(&self, g: &Genotype) -> u64 {
        layer_shapes(g, self.task).iter().map(|(i, o)| (i * o) as u64).sum()
    }

    /// Uniform draw over the grids, rejected until it fits the constraint.
    pub fn sample_random(&self, rng: &mut Rng) -> Result<Genotype, ArchError> {
        for _ in 0..MAX_SAMPLE_ATTEMPTS {
            let arch = match &self.kind {
                SpaceKind::Mlp { min_depth, max_depth } => {
                    let depth = rng.random_range(*min_depth..=*max_depth);
                    Architecture::Mlp {
                        widths: (0..depth).map(|_| *WIDTH_GRID.choose(rng).unwrap()).collect(),
                    }
                }
                SpaceKind::Cell { num_nodes, stem_widths } => {
                    let n = *num_nodes;
                    let mut ops = vec![vec![CellOp::Zero; n]; n];
                    for (i, row) in ops.iter_mut().enumerate() {
                        for op in row.iter_mut().skip(i + 1) {
                            *op = *CellOp::ALL.choose(rng).unwrap();
                        }
                    }
                    Architecture::Cell {
                        ops,
                        stem_width: *stem_widths.choose(rng).unwrap(),
                    }
                }
            };
            let g = Genotype::new(arch)?;
            if self.param_count(&g) <= self.constraint.max_params {
                return Ok(g);
            }
        }
        Err(ArchError::Infeasible {
            max_params: self.constraint.max_params,
            attempts: MAX_SAMPLE_ATTEMPTS,
        })
    }

    /// Changes exactly one locus: one hidden width (MLP), or one edge op or the
    /// stem width (cell).
    ///
    /// A locus is drawn uniformly among the loci that still have an
    /// alternative value inside the constraint, then the new value is drawn
    /// uniformly among those alternatives.
    pub fn mutate(&self, g: &Genotype, rng: &mut Rng) -> Result<Genotype, ArchError> {
        if !self.matches_shape(g) {
            return Err(ArchError::WrongSpace(self.kind.name()));
        }
        let loci: Vec<Vec<Genotype>> = self
            .loci_neighbours(g)?
            .into_iter()
            .map(|cands| {
                cands
                    .into_iter()
                    .filter(|c| self.param_count(c) <= self.constraint.max_params)
                    .collect::<Vec<_>>()
            })
            .filter(|c| !c.is_empty())
            .collect();
        let Some(locus) = loci.choose(rng) else {
            return Err(ArchError::NoMutation { id: g.id() });
        };
        Ok(locus.choose(rng).unwrap().clone())
    }

    /// All single-locus neighbours of `g`, grouped by locus.
    fn loci_neighbours(&self, g: &Genotype) -> Result<Vec<Vec<Genotype>>, ArchError> {
        let mut out = Vec::new();
        match (g.arch(), &self.kind) {
            (Architecture::Mlp { widths }, SpaceKind::Mlp { .. }) => {
                for (l, &w) in widths.iter().enumerate() {
                    let mut locus = Vec::new();
                    for &alt in WIDTH_GRID.iter().filter(|&&a| a != w) {
                        let mut ws = widths.clone();
                        ws[l] = alt;
                        locus.push(Genotype::mlp(ws)?);
                    }
                    out.push(locus);
                }
            }
            (Architecture::Cell { ops, stem_width }, SpaceKind::Cell { stem_widths, .. }) => {
                let n = ops.len();
                for i in 0..n {
                    for j in i + 1..n {
                        let mut locus = Vec::new();
                        for &alt in CellOp::ALL.iter().filter(|&&a| a != ops[i][j]) {
                            let mut o = ops.clone();
                            o[i][j] = alt;
                            locus.push(Genotype::cell(o, *stem_width)?);
                        }
                        out.push(locus);
                    }
                }
                let stems: Vec<Genotype> = stem_widths
                    .iter()
                    .filter(|&&s| s != *stem_width)
                    .map(|&s| Genotype::cell(ops.clone(), s))
                    .collect::<Result<_, _>>()?;
                out.push(stems);
            }
            _ => return Err(ArchError::WrongSpace(self.kind.name())),
        }
        Ok(out)
    }

    /// Every genotype of the space that satisfies the constraint.
    pub fn enumerate(&self) -> Vec<Genotype> {
        let mut all = Vec::new();
        match &self.kind {
            SpaceKind::Mlp { min_depth, max_depth } => {
                for depth in *min_depth..=*max_depth {
                    let total = WIDTH_GRID.len().pow(depth as u32);
                    for mut code in 0..total {
                        let mut widths = Vec::with_capacity(depth);
                        for _ in 0..depth {
                            widths.push(WIDTH_GRID[code % WIDTH_GRID.len()]);
                            code /= WIDTH_GRID.len();
                        }
                        all.push(Genotype::mlp(widths).expect("grid widths are valid"));
                    }
                }
            }
            SpaceKind::Cell { num_nodes, stem_widths } => {
                let n = *num_nodes;
                let edges: Vec<(usize, usize)> =
                    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
                let total = CellOp::ALL.len().pow(edges.len() as u32);
                for &stem in stem_widths {
                    for mut code in 0..total {
                        let mut ops = vec![vec![CellOp::Zero; n]; n];
                        for &(i, j) in &edges {
                            ops[i][j] = CellOp::ALL[code % CellOp::ALL.len()];
                            code /= CellOp::ALL.len();
                        }
                        all.push(Genotype::cell(ops, stem).expect("enumerated cell is valid"));
                    }
                }
            }
        }
        all.retain(|g| self.param_count(g) <= self.constraint.max_params);
        all
    }

    pub fn instantiate(&self, g: &Genotype, init_seed: u64) -> Network {
        instantiate(g, self.task, init_seed)
    }
}

/// `(in_dim, out_dim)` of every linear layer, in instantiation order.
pub fn layer_shapes(g: &Genotype, task: TaskShape) -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    match g.arch() {
        Architecture::Mlp { widths } => {
            let mut prev = task.input_dim;
            for &w in widths {
                shapes.push((prev, w));
                prev = w;
            }
            shapes.push((prev, task.num_classes));
        }
        Architecture::Cell { ops, stem_width } => {
            let s = *stem_width;
            shapes.push((task.input_dim, s));
            let n = ops.len();
            for j in 1..n {
                for row in ops.iter().take(j) {
                    match row[j] {
                        CellOp::LinearRelu | CellOp::Linear => shapes.push((s, s)),
                        CellOp::Bottleneck => {
                            let b = bottleneck_width(s);
                            shapes.push((s, b));
                            shapes.push((b, s));
                        }
                        CellOp::Zero | CellOp::Skip => {}
                    }
                }
            }
            shapes.push((s, task.num_classes));
        }
    }
    shapes
}

/// Binds a genotype to parameters.
///
/// Cell networks: `node0 = relu(stem(x))`, `node_j = sum_{i<j} op_ij(node_i)`
/// (a node with no incoming edges is zero) and the head reads the last node.
pub fn instantiate(g: &Genotype, task: TaskShape, init_seed: u64) -> Network {
    let mut b = NetworkBuilder::new(task.input_dim);
    match g.arch() {
        Architecture::Mlp { widths } => {
            let mut x = b.input();
            for (l, &w) in widths.iter().enumerate() {
                x = b.linear(x, w, format!("fc{l}"));
                x = b.relu(x);
            }
            let out = b.linear(x, task.num_classes, "head");
            b.finish(out, init_seed)
        }
        Architecture::Cell { ops, stem_width } => {
            let s = *stem_width;
            let stem = b.linear(b.input(), s, "stem");
            let mut nodes = vec![b.relu(stem)];
            let n = ops.len();
            for j in 1..n {
                let mut incoming = Vec::new();
                for (i, row) in ops.iter().enumerate().take(j) {
                    let src = nodes[i];
                    match row[j] {
                        CellOp::Zero => {}
                        CellOp::Skip => incoming.push(src),
                        CellOp::LinearRelu => {
                            let y = b.linear(src, s, format!("e{i}{j}.linear"));
                            incoming.push(b.relu(y));
                        }
                        CellOp::Linear => incoming.push(b.linear(src, s, format!("e{i}{j}.linear"))),
                        CellOp::Bottleneck => {
                            let down = b.linear(src, bottleneck_width(s), format!("e{i}{j}.down"));
                            incoming.push(b.linear(down, s, format!("e{i}{j}.up")));
                        }
                    }
                }
                let node = if incoming.len() == 1 {
                    incoming[0]
                } else {
                    b.sum(incoming, s)
                };
                nodes.push(node);
            }
            let out = b.linear(nodes[n - 1], task.num_classes, "head");
            b.finish(out, init_seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn mlp_space(min_depth: usize, max_depth: usize, max_params: usize) -> ArchSpace {
        ArchSpace::new(
            SpaceKind::Mlp { min_depth, max_depth },
            TaskShape { input_dim: 784, num_classes: 10 },
            ResourceConstraint { max_params },
        )
        .unwrap()
    }

    fn cell_space() -> ArchSpace {
        ArchSpace::new(
            SpaceKind::default_cell(),
            TaskShape { input_dim: 32, num_classes: 10 },
            ResourceConstraint::unbounded(),
        )
        .unwrap()
    }

    fn hamming(a: &Genotype, b: &Genotype) -> usize {
        match (a.arch(), b.arch()) {
            (Architecture::Cell { ops: x, stem_width: s }, Architecture::Cell { ops: y, stem_width: t }) => {
                let edges = x.iter().flatten().zip(y.iter().flatten()).filter(|(p, q)| p != q).count();
                edges + usize::from(s != t)
            }
            (Architecture::Mlp { widths: x }, Architecture::Mlp { widths: y }) => {
                assert_eq!(x.len(), y.len());
                x.iter().zip(y).filter(|(p, q)| p != q).count()
            }
            _ => panic!("variant changed"),
        }
    }

    #[test]
    fn canonical_json_and_id() {
        let g = Genotype::mlp(vec![8, 4]).unwrap();
        assert_eq!(g.to_json(), r#"{"variant":"mlp","widths":[8,4]}"#);
        assert_eq!(g.id().0, fnv1a64(g.to_json().as_bytes()));
        assert_eq!(g.id().to_string().len(), 16);
        let c = Genotype::cell(
            vec![vec![CellOp::Zero, CellOp::Bottleneck], vec![CellOp::Zero, CellOp::Zero]],
            8,
        )
        .unwrap();
        assert_eq!(c.to_json(), r#"{"variant":"cell","ops":[[0,4],[0,0]],"stem_width":8}"#);
        assert_eq!(serde_json::to_string(&c).unwrap(), c.to_json());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn invalid_genotypes_rejected() {
        assert!(Genotype::mlp(vec![]).is_err());
        assert!(Genotype::mlp(vec![8, 8, 8, 8]).is_err());
        assert!(Genotype::mlp(vec![7]).is_err());
        assert!(Genotype::mlp(vec![50]).is_err());
        let lower = vec![vec![CellOp::Zero, CellOp::Skip], vec![CellOp::Skip, CellOp::Zero]];
        assert!(Genotype::cell(lower, 8).is_err());
        let diag = vec![vec![CellOp::Skip, CellOp::Zero], vec![CellOp::Zero, CellOp::Zero]];
        assert!(Genotype::cell(diag, 8).is_err());
        assert!(Genotype::from_json(r#"{"variant":"mlp","widths":[8],"extra":1}"#).is_err());
        assert!(Genotype::from_json(r#"{"variant":"cell","ops":[[0,9],[0,0]],"stem_width":8}"#).is_err());
        assert!(Genotype::from_json(r#"{"variant":"tree"}"#).is_err());
        assert_eq!(ResourceConstraint::new(0), Err(ArchError::BadConstraint));
    }

    #[test]
    fn mlp_samples_stay_on_grid() {
        let space = mlp_space(1, 3, usize::MAX);
        let mut r = rng::seeded(1);
        for _ in 0..500 {
            let g = space.sample_random(&mut r).unwrap();
            let Architecture::Mlp { widths } = g.arch() else { panic!() };
            assert!((1..=3).contains(&widths.len()));
            assert!(widths.iter().all(|w| WIDTH_GRID.contains(w)));
        }
    }

    #[test]
    fn infeasible_constraint_is_an_error() {
        let space = mlp_space(1, 1, 100);
        assert_eq!(
            space.sample_random(&mut rng::seeded(0)),
            Err(ArchError::Infeasible { max_params: 100, attempts: MAX_SAMPLE_ATTEMPTS })
        );
    }

    #[test]
    fn width_histogram_is_uniform() {
        let space = mlp_space(1, 1, usize::MAX);
        let mut r = rng::seeded(2024);
        let mut counts = [0usize; 24];
        let draws = 10_000;
        for _ in 0..draws {
            let g = space.sample_random(&mut r).unwrap();
            let Architecture::Mlp { widths } = g.arch() else { panic!() };
            counts[widths[0] / 2 - 1] += 1;
        }
        let expected = draws as f64 / 24.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-squared with 23 degrees of freedom
        assert!(chi2 < 41.638, "chi2 = {chi2}");
    }

    #[test]
    fn mlp_mutation_changes_one_width() {
        let space = mlp_space(1, 3, usize::MAX);
        let g = Genotype::mlp(vec![8]).unwrap();
        let mut r = rng::seeded(3);
        for _ in 0..200 {
            let c = space.mutate(&g, &mut r).unwrap();
            let Architecture::Mlp { widths } = c.arch() else { panic!() };
            assert_eq!(widths.len(), 1);
            assert_ne!(widths[0], 8);
            assert!(WIDTH_GRID.contains(&widths[0]));
        }
    }

    #[test]
    fn cell_mutation_is_single_locus_and_deterministic() {
        let space = cell_space();
        let mut r = rng::seeded(4);
        let g = space.sample_random(&mut r).unwrap();
        for _ in 0..200 {
            let c = space.mutate(&g, &mut r).unwrap();
            assert_eq!(hamming(&g, &c), 1);
        }
        let a = space.mutate(&g, &mut rng::seeded(9)).unwrap();
        let b = space.mutate(&g, &mut rng::seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mutation_closure() {
        for space in [cell_space(), mlp_space(1, 3, 20_000)] {
            let mut r = rng::seeded(5);
            let mut g = space.sample_random(&mut r).unwrap();
            for _ in 0..10_000 {
                g = space.mutate(&g, &mut r).unwrap();
                assert!(space.contains(&g));
                assert_eq!(Genotype::from_json(&g.to_json()).unwrap(), g);
            }
        }
    }

    #[test]
    fn mutation_respects_constraint_or_fails() {
        let g = Genotype::mlp(vec![2]).unwrap();
        let tight = mlp_space(1, 1, g_params(&g));
        assert_eq!(tight.mutate(&g, &mut rng::seeded(0)), Err(ArchError::NoMutation { id: g.id() }));
        let cell = Genotype::cell(vec![vec![CellOp::Zero; 4]; 4], 8).unwrap();
        assert_eq!(mlp_space(1, 1, usize::MAX).mutate(&cell, &mut rng::seeded(0)), Err(ArchError::WrongSpace("mlp")));
    }

    fn g_params(g: &Genotype) -> usize {
        mlp_space(1, 1, usize::MAX).param_count(g)
    }

    #[test]
    fn closed_form_counts_match_instances() {
        let task = TaskShape { input_dim: 8, num_classes: 2 };
        let g = Genotype::mlp(vec![4]).unwrap();
        assert_eq!(instantiate(&g, task, 0).param_count(), 46);
        let space = cell_space();
        let mut r = rng::seeded(6);
        for _ in 0..50 {
            let g = space.sample_random(&mut r).unwrap();
            let net = space.instantiate(&g, 1);
            assert_eq!(space.param_count(&g), net.param_count());
            assert_eq!(space.flop_count(&g), net.flop_count());
        }
    }

    #[test]
    fn instantiation_is_seeded() {
        let space = cell_space();
        let g = space.sample_random(&mut rng::seeded(7)).unwrap();
        assert_eq!(space.instantiate(&g, 3).params, space.instantiate(&g, 3).params);
        let (a, b) = (space.instantiate(&g, 3), space.instantiate(&g, 4));
        assert_eq!(a.params.len(), b.params.len());
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn enumeration_size() {
        let space = cell_space();
        assert_eq!(space.enumerate().len(), 4 * 5usize.pow(6));
        let small = ArchSpace::new(
            SpaceKind::Cell { num_nodes: 3, stem_widths: vec![8, 16] },
            TaskShape { input_dim: 4, num_classes: 2 },
            ResourceConstraint::unbounded(),
        )
        .unwrap();
        let all = small.enumerate();
        assert_eq!(all.len(), 2 * 125);
        let ids: std::collections::HashSet<_> = all.iter().map(|g| g.id()).collect();
        assert_eq!(ids.len(), all.len());
    }

    proptest! {
        #[test]
        fn json_round_trip(seed in any::<u64>(), mlp in any::<bool>()) {
            let space = if mlp { mlp_space(1, 3, usize::MAX) } else { cell_space() };
            let g = space.sample_random(&mut rng::seeded(seed)).unwrap();
            let json = g.to_json();
            let back = Genotype::from_json(&json).unwrap();
            prop_assert_eq!(back.to_json(), json);
            prop_assert_eq!(back.id(), g.id());
        }
    }
}
